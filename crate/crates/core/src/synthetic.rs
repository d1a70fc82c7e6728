//! Synthetic data and constraints with known ground truth.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crowd::sorted_quantile;
use crate::error::{Error, Result};
use crate::problem::{bag_mean, Bag, BoundConstraint, ConstraintSet, Dataset, DiffConstraint};
use crate::rng::substream;

/// Which bag pairs get difference constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffPairing {
    /// Every pair of bags cut from the same feature.
    #[default]
    SameGroup,
    /// Neighbouring bags of the same feature only (low/medium, medium/high).
    SameGroupAdjacent,
    /// Every pair of bags.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub bag_features: Vec<String>,
    pub cut_quantiles: (f64, f64),
    pub epsilon: f64,
    pub include_diffs: bool,
    #[serde(default)]
    pub pairing: DiffPairing,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(bag_features: Vec<String>, epsilon: f64) -> Self {
        Self {
            bag_features,
            cut_quantiles: (0.33, 0.66),
            epsilon,
            include_diffs: false,
            pairing: DiffPairing::SameGroup,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.cut_quantiles;
        if !(0.0 < a && a < b && b < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cut quantiles must satisfy 0 < a < b < 1, got ({a}, {b})"
            )));
        }
        check_epsilon(self.epsilon)
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon >= 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )))
    }
}

/// Three bags per named feature, cut at the given quantiles. Values on a
/// cutoff go to the lower bag.
pub fn make_tercile_bags(dataset: &Dataset, spec: &SyntheticSpec) -> Result<Vec<Bag>> {
    spec.validate()?;
    let mut bags = Vec::with_capacity(3 * spec.bag_features.len());
    for feature in &spec.bag_features {
        let j = dataset
            .feature_index(feature)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature '{feature}'")))?;
        let column: Vec<f64> = dataset.features().column(j).iter().copied().collect();
        let mut sorted = column.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.first() == sorted.last() {
            return Err(Error::InvalidDataset(format!(
                "feature '{feature}' is constant; cannot cut terciles"
            )));
        }
        let lo_cut = sorted_quantile(&sorted, spec.cut_quantiles.0);
        let hi_cut = sorted_quantile(&sorted, spec.cut_quantiles.1);
        let mut members: [Vec<usize>; 3] = Default::default();
        for (i, &v) in column.iter().enumerate() {
            let k = if v <= lo_cut {
                0
            } else if v <= hi_cut {
                1
            } else {
                2
            };
            members[k].push(i);
        }
        for (label, m) in ["low", "medium", "high"].into_iter().zip(members) {
            if m.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "feature '{feature}' leaves the {label} bag empty"
                )));
            }
            bags.push(Bag::new(format!("{feature}:{label}"), m).with_group(feature.clone()));
        }
    }
    Ok(bags)
}

/// Two bags per 0/1 feature, named `feature:0` and `feature:1`.
pub fn make_binary_bags(dataset: &Dataset, features: &[String]) -> Result<Vec<Bag>> {
    let mut bags = Vec::with_capacity(2 * features.len());
    for feature in features {
        let j = dataset
            .feature_index(feature)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature '{feature}'")))?;
        let mut members: [Vec<usize>; 2] = Default::default();
        for (i, &v) in dataset.features().column(j).iter().enumerate() {
            match v {
                0.0 => members[0].push(i),
                1.0 => members[1].push(i),
                _ => {
                    return Err(Error::InvalidDataset(format!(
                        "feature '{feature}' is not binary: row {i} has {v}"
                    )))
                }
            }
        }
        for (label, m) in ["0", "1"].into_iter().zip(members) {
            if m.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "feature '{feature}' has no rows equal to {label}"
                )));
            }
            bags.push(Bag::new(format!("{feature}:{label}"), m).with_group(feature.clone()));
        }
    }
    Ok(bags)
}

fn scaled_interval(value: f64, epsilon: f64) -> (f64, f64) {
    let a = (1.0 - epsilon) * value;
    let b = (1.0 + epsilon) * value;
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `[(1 − ε)·m, (1 + ε)·m]` around each bag's true mean `m`.
pub fn synth_bounds(dataset: &Dataset, bags: &[Bag], epsilon: f64) -> Result<Vec<BoundConstraint>> {
    check_epsilon(epsilon)?;
    let y = dataset.require_targets("synthetic bounds")?;
    bags.iter()
        .map(|bag| {
            let (lower, upper) = scaled_interval(bag_mean(y.as_slice(), bag)?, epsilon);
            Ok(BoundConstraint {
                bag: bag.name.clone(),
                lower,
                upper,
            })
        })
        .collect()
}

/// Difference constraints `[(1 − ε)·g, (1 + ε)·g]` for each selected pair
/// of bags whose true means differ by `g > 0`.
pub fn synth_diffs(
    dataset: &Dataset,
    bags: &[Bag],
    epsilon: f64,
    pairing: DiffPairing,
) -> Result<Vec<DiffConstraint>> {
    check_epsilon(epsilon)?;
    let y = dataset.require_targets("synthetic differences")?;
    let means = bags
        .iter()
        .map(|b| bag_mean(y.as_slice(), b))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for i in 0..bags.len() {
        for j in i + 1..bags.len() {
            let same_group = bags[i].group.is_some() && bags[i].group == bags[j].group;
            let selected = match pairing {
                DiffPairing::All => true,
                DiffPairing::SameGroup => same_group,
                DiffPairing::SameGroupAdjacent => {
                    same_group && bags[i + 1..j].iter().all(|b| b.group != bags[i].group)
                }
            };
            if !selected || means[i] == means[j] {
                continue;
            }
            let (hi, lo) = if means[i] > means[j] { (i, j) } else { (j, i) };
            let (lower, upper) = scaled_interval(means[hi] - means[lo], epsilon);
            out.push(DiffConstraint {
                bag_hi: bags[hi].name.clone(),
                bag_lo: bags[lo].name.clone(),
                lower,
                upper,
            });
        }
    }
    Ok(out)
}

/// Tercile bags with ε-bounds (and differences when requested).
pub fn synth_constraints(dataset: &Dataset, spec: &SyntheticSpec) -> Result<ConstraintSet> {
    let bags = make_tercile_bags(dataset, spec)?;
    constraints_for_bags(dataset, bags, spec)
}

/// ε-bounds (and differences when requested) over given bags.
pub fn constraints_for_bags(
    dataset: &Dataset,
    bags: Vec<Bag>,
    spec: &SyntheticSpec,
) -> Result<ConstraintSet> {
    let bounds = synth_bounds(dataset, &bags, spec.epsilon)?;
    let diffs = if spec.include_diffs {
        synth_diffs(dataset, &bags, spec.epsilon, spec.pairing)?
    } else {
        Vec::new()
    };
    let mut cs = ConstraintSet::with_bags(bags);
    cs.bounds = bounds;
    cs.diffs = diffs;
    Ok(cs)
}

/// Generated dataset with the weights that produced it.
#[derive(Debug, Clone)]
pub struct LinearData {
    pub dataset: Dataset,
    pub true_weights: Vec<f64>,
    pub bias: f64,
    pub noise_sigma: f64,
}

impl LinearData {
    /// Sidecar document written next to the generated CSV.
    pub fn truth_json(&self) -> serde_json::Value {
        serde_json::json!({
            "weights": self.true_weights,
            "bias": self.bias,
            "noise_sigma": self.noise_sigma,
            "feature_names": self.dataset.feature_names(),
        })
    }

    /// Centers each feature column and moves the shift into the intercept.
    pub fn center(&mut self) -> Result<()> {
        let mut x = self.dataset.features().clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
            self.bias += mean * self.true_weights[j];
        }
        let targets = self.dataset.require_targets("centering")?.clone();
        self.dataset =
            Dataset::new(x, self.dataset.feature_names().to_vec())?.with_targets(targets)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearDataSpec {
    pub n: usize,
    pub d: usize,
    pub weight_scale: f64,
    pub noise_sigma: f64,
    /// Fixed intercept; drawn like a weight when absent.
    pub bias: Option<f64>,
}

/// Standard normal features, `w* ~ N(0, weight_scale²)`, targets
/// `Xw* + b + N(0, noise_sigma²)`.
pub fn gen_linear_data(
    n: usize,
    d: usize,
    weight_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<LinearData> {
    generate_linear(
        &LinearDataSpec {
            n,
            d,
            weight_scale,
            noise_sigma,
            bias: None,
        },
        seed,
    )
}

pub fn generate_linear(spec: &LinearDataSpec, seed: u64) -> Result<LinearData> {
    let LinearDataSpec {
        n,
        d,
        weight_scale,
        noise_sigma,
        bias,
    } = *spec;
    if d == 0 || n < d + 1 {
        return Err(Error::InvalidArgument(format!(
            "need d >= 1 and n >= d + 1, got n={n}, d={d}"
        )));
    }
    if !(weight_scale >= 0.0
        && weight_scale.is_finite()
        && noise_sigma >= 0.0
        && noise_sigma.is_finite())
    {
        return Err(Error::InvalidArgument(
            "weight scale and noise must be finite and non-negative".to_string(),
        ));
    }
    let mut weight_rng = substream(seed, "synthetic.weights");
    let weights: Vec<f64> = (0..d)
        .map(|_| weight_scale * weight_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let bias = bias.unwrap_or_else(|| weight_scale * weight_rng.sample::<f64, _>(StandardNormal));

    let mut feature_rng = substream(seed, "synthetic.features");
    let features = DMatrix::from_fn(n, d, |_, _| feature_rng.sample::<f64, _>(StandardNormal));

    let mut noise_rng = substream(seed, "synthetic.noise");
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let w = DVector::from_column_slice(&weights);
    let mut y = &features * w;
    for v in y.iter_mut() {
        *v += bias + noise.sample(&mut noise_rng);
    }

    let names = (0..d).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(features, names)?.with_targets(y)?;
    Ok(LinearData {
        dataset,
        true_weights: weights,
        bias,
        noise_sigma,
    })
}

/// Housing-scale benchmark: linear data with a positive intercept, bagged
/// on the features carrying the most weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub data: LinearDataSpec,
    pub n_bag_features: usize,
    /// Shift every feature column to zero sample mean. The intercept in the
    /// returned truth absorbs the shift, so targets are unchanged.
    pub center_features: bool,
}

impl BenchmarkSpec {
    /// 500 rows, 13 features, targets around 22.5 with noise sd 4.5.
    pub fn housing_scale() -> Self {
        Self {
            data: LinearDataSpec {
                n: 500,
                d: 13,
                weight_scale: 2.0,
                noise_sigma: 4.5,
                bias: Some(22.5),
            },
            n_bag_features: 3,
            center_features: true,
        }
    }

    /// Data plus the names of the features to bag on.
    pub fn generate(&self, seed: u64) -> Result<(LinearData, Vec<String>)> {
        let mut data = generate_linear(&self.data, seed)?;
        if self.center_features {
            data.center()?;
        }
        let mut order: Vec<usize> = (0..data.true_weights.len()).collect();
        order.sort_by(|&a, &b| {
            data.true_weights[b]
                .abs()
                .total_cmp(&data.true_weights[a].abs())
                .then(a.cmp(&b))
        });
        let features = order
            .into_iter()
            .take(self.n_bag_features)
            .map(|j| data.dataset.feature_names()[j].clone())
            .collect();
        Ok((data, features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{validate_problem, BallparkProblem};
    use crate::qp::{ridge_closed_form, SolverConfig};
    use crate::regression::fit_two_step;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn single_feature(values: &[f64], targets: &[f64]) -> Dataset {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        Dataset::from_rows(&rows, vec!["f".into()])
            .unwrap()
            .with_targets(DVector::from_column_slice(targets))
            .unwrap()
    }

    #[test]
    fn binary_bags_split_on_value() {
        let ds = Dataset::from_rows(
            &[vec![0.0, 1.0], vec![1.0, 2.0], vec![0.0, 3.0]],
            vec!["flag".into(), "x".into()],
        )
        .unwrap();
        let bags = make_binary_bags(&ds, &["flag".to_string()]).unwrap();
        assert_eq!(bags[0].members, vec![0, 2]);
        assert_eq!(bags[1].name, "flag:1");
        assert_eq!(bags[1].group.as_deref(), Some("flag"));
        assert!(matches!(
            make_binary_bags(&ds, &["x".to_string()]),
            Err(Error::InvalidDataset(_))
        ));
        assert!(make_binary_bags(&ds, &["nope".to_string()]).is_err());
    }

    #[test]
    fn terciles_of_one_to_nine() {
        let values: Vec<f64> = (1..=9).map(f64::from).collect();
        let ds = single_feature(&values, &values);
        let bags = make_tercile_bags(&ds, &SyntheticSpec::new(vec!["f".into()], 0.1)).unwrap();
        let members: Vec<Vec<usize>> = bags.iter().map(|b| b.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]]);
        assert_eq!(bags[0].name, "f:low");
        assert_eq!(bags[2].group.as_deref(), Some("f"));
    }

    #[test]
    fn three_features_nine_bags() {
        let data = gen_linear_data(60, 3, 1.0, 0.1, 3).unwrap();
        let spec = SyntheticSpec::new(vec!["x0".into(), "x1".into(), "x2".into()], 0.1);
        assert_eq!(make_tercile_bags(&data.dataset, &spec).unwrap().len(), 9);
    }

    #[test]
    fn constant_feature_rejected() {
        let ds = single_feature(&[2.0; 6], &[1.0; 6]);
        assert!(make_tercile_bags(&ds, &SyntheticSpec::new(vec!["f".into()], 0.1)).is_err());
        assert!(make_tercile_bags(&ds, &SyntheticSpec::new(vec!["g".into()], 0.1)).is_err());
    }

    #[test]
    fn bound_examples() {
        let ds = single_feature(&[0.0, 1.0], &[20.0, 20.0]);
        let bag = [Bag::new("all", [0, 1])];
        let b = &synth_bounds(&ds, &bag, 0.1).unwrap()[0];
        assert!((b.lower - 18.0).abs() < 1e-12 && (b.upper - 22.0).abs() < 1e-12);
        let b = &synth_bounds(&ds, &bag, 0.0).unwrap()[0];
        assert_eq!((b.lower, b.upper), (20.0, 20.0));
        let b = &synth_bounds(&ds, &bag, 0.5).unwrap()[0];
        assert_eq!((b.lower, b.upper), (10.0, 30.0));

        let neg = single_feature(&[0.0], &[-10.0]);
        let b = &synth_bounds(&neg, &[Bag::new("n", [0])], 0.1).unwrap()[0];
        assert!(b.lower <= b.upper);

        let unlabeled = Dataset::from_rows(&[vec![0.0]], vec!["f".into()]).unwrap();
        assert!(synth_bounds(&unlabeled, &[Bag::new("n", [0])], 0.1).is_err());
    }

    #[test]
    fn diff_examples() {
        let ds = single_feature(&[0.0, 1.0, 2.0, 3.0], &[30.0, 20.0, 20.0, 10.0]);
        let g = |name: &str, m: Vec<usize>| Bag::new(name, m).with_group("f");
        let bags = vec![g("a", vec![0]), g("b", vec![1])];
        let d = &synth_diffs(&ds, &bags, 0.1, DiffPairing::SameGroup).unwrap()[0];
        assert_eq!((d.bag_hi.as_str(), d.bag_lo.as_str()), ("a", "b"));
        assert!((d.lower - 9.0).abs() < 1e-12 && (d.upper - 11.0).abs() < 1e-12);

        let tied = vec![g("b", vec![1]), g("c", vec![2])];
        assert!(synth_diffs(&ds, &tied, 0.1, DiffPairing::SameGroup)
            .unwrap()
            .is_empty());

        let three = vec![g("a", vec![0]), g("b", vec![1]), g("d", vec![3])];
        assert_eq!(
            synth_diffs(&ds, &three, 0.1, DiffPairing::SameGroup)
                .unwrap()
                .len(),
            3
        );
        assert_eq!(
            synth_diffs(&ds, &three, 0.1, DiffPairing::SameGroupAdjacent)
                .unwrap()
                .len(),
            2
        );

        let cross = vec![g("a", vec![0]), Bag::new("z", [3]).with_group("other")];
        assert!(synth_diffs(&ds, &cross, 0.1, DiffPairing::SameGroup)
            .unwrap()
            .is_empty());
        assert_eq!(
            synth_diffs(&ds, &cross, 0.1, DiffPairing::All)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn noiseless_data_identifies_weights() {
        let data = gen_linear_data(50, 4, 2.0, 0.0, 9).unwrap();
        let design = crate::problem::FeatureMap::IdentityWithBias.apply(data.dataset.features());
        let w = ridge_closed_form(&design, data.dataset.targets().unwrap(), 1e-10).unwrap();
        for (got, want) in w
            .iter()
            .zip(data.true_weights.iter().chain([data.bias].iter()))
        {
            assert!((got - want).abs() < 1e-4);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_linear_data(30, 3, 1.0, 0.5, 17).unwrap();
        let b = gen_linear_data(30, 3, 1.0, 0.5, 17).unwrap();
        assert_eq!(a.dataset.features(), b.dataset.features());
        assert_eq!(a.dataset.targets(), b.dataset.targets());
        let c = gen_linear_data(30, 3, 1.0, 0.5, 18).unwrap();
        assert_ne!(a.dataset.features(), c.dataset.features());
        assert!(gen_linear_data(3, 3, 1.0, 0.5, 1).is_err());
    }

    #[test]
    fn housing_scale_shape() {
        let (data, features) = BenchmarkSpec::housing_scale().generate(1).unwrap();
        assert_eq!(data.dataset.n_rows(), 500);
        assert_eq!(data.dataset.n_features(), 13);
        assert_eq!(features.len(), 3);
        let spec = SyntheticSpec::new(features, 0.1);
        let cs = synth_constraints(&data.dataset, &spec).unwrap();
        let problem = BallparkProblem::new(data.dataset.clone(), cs);
        assert!(validate_problem(&problem).is_empty());
    }

    #[test]
    fn centering_moves_the_shift_into_the_intercept() {
        let mut spec = BenchmarkSpec::housing_scale();
        spec.center_features = false;
        let (raw, _) = spec.generate(4).unwrap();
        spec.center_features = true;
        let (centered, _) = spec.generate(4).unwrap();
        assert_eq!(raw.dataset.targets(), centered.dataset.targets());
        assert_eq!(raw.true_weights, centered.true_weights);
        let x = centered.dataset.features();
        for col in x.column_iter() {
            assert!(col.mean().abs() < 1e-12);
        }
        // Noise-free parts agree row by row.
        let xr = raw.dataset.features();
        for i in 0..x.nrows() {
            let a: f64 = (0..x.ncols())
                .map(|j| xr[(i, j)] * raw.true_weights[j])
                .sum::<f64>()
                + raw.bias;
            let b: f64 = (0..x.ncols())
                .map(|j| x[(i, j)] * centered.true_weights[j])
                .sum::<f64>()
                + centered.bias;
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_constraints_reproduce_bag_means() {
        let data = gen_linear_data(60, 2, 1.0, 0.3, 5).unwrap();
        let spec = SyntheticSpec::new(vec!["x0".into(), "x1".into()], 0.0);
        let cs = synth_constraints(&data.dataset, &spec).unwrap();
        let y = data.dataset.targets().unwrap().clone();
        let problem = BallparkProblem::new(data.dataset, cs.clone());
        let fit = fit_two_step(&problem, 0.1, &SolverConfig::default()).unwrap();
        for bag in &cs.bags {
            let want = bag_mean(y.as_slice(), bag).unwrap();
            let got = bag_mean(&fit.solution.latent_labels, bag).unwrap();
            assert!((got - want).abs() < 1e-6, "{}: {got} vs {want}", bag.name);
        }
    }

    proptest! {
        #[test]
        fn terciles_partition_rows(values in prop::collection::vec(-50i32..50, 6..60)) {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            prop_assume!(values.iter().any(|&v| v != values[0]));
            let ds = single_feature(&values, &values);
            if let Ok(bags) = make_tercile_bags(&ds, &SyntheticSpec::new(vec!["f".into()], 0.1)) {
                let mut seen = BTreeSet::new();
                for b in &bags {
                    for &m in &b.members {
                        prop_assert!(seen.insert(m));
                    }
                }
                prop_assert_eq!(seen.len(), values.len());
            }
        }

        #[test]
        fn bounds_contain_true_mean(
            targets in prop::collection::vec(0.0f64..100.0, 1..20),
            epsilon in 0.0f64..2.0,
        ) {
            let xs: Vec<f64> = (0..targets.len()).map(|i| i as f64).collect();
            let ds = single_feature(&xs, &targets);
            let bag = Bag::new("all", 0..targets.len());
            let b = &synth_bounds(&ds, std::slice::from_ref(&bag), epsilon).unwrap()[0];
            let m = bag_mean(&targets, &bag).unwrap();
            prop_assert!(b.lower <= m && m <= b.upper);
        }
    }
}
