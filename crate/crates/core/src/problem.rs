//! Datasets, bags, aggregate constraints and the assembled problem.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix with optional ground-truth targets.
///
/// Targets are carried for evaluation. Only rows listed in
/// `labeled_indices` count as labeled training instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    feature_names: Vec<String>,
    targets: Option<DVector<f64>>,
    labeled_indices: BTreeSet<usize>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, feature_names: Vec<String>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::InvalidDataset(format!(
                "need at least one row and one column, got {}x{}",
                features.nrows(),
                features.ncols()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(Error::InvalidDataset(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if let Some((i, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (i % features.nrows(), i / features.nrows());
            return Err(Error::InvalidDataset(format!(
                "non-finite feature at row {row}, column {col}"
            )));
        }
        Ok(Self {
            features,
            feature_names,
            targets: None,
            labeled_indices: BTreeSet::new(),
        })
    }

    /// Builds a dataset from row-major data.
    pub fn from_rows(rows: &[Vec<f64>], feature_names: Vec<String>) -> Result<Self> {
        let d = feature_names.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidDataset(format!(
                "row {bad} has {} values, expected {d}",
                rows[bad].len()
            )));
        }
        let matrix = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
        Self::new(matrix, feature_names)
    }

    pub fn with_targets(mut self, targets: DVector<f64>) -> Result<Self> {
        if targets.len() != self.n_rows() {
            return Err(Error::DimensionMismatch {
                expected: self.n_rows(),
                found: targets.len(),
            });
        }
        if let Some(i) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite target at row {i}"
            )));
        }
        self.targets = Some(targets);
        Ok(self)
    }

    /// Marks rows whose targets are known to the learner.
    pub fn with_labeled(mut self, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        if self.targets.is_none() {
            return Err(Error::MissingTargets(
                "labeled rows need targets".to_string(),
            ));
        }
        let indices: BTreeSet<usize> = indices.into_iter().collect();
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_rows()) {
            return Err(Error::InvalidDataset(format!(
                "labeled index {bad} out of range for {} rows",
                self.n_rows()
            )));
        }
        self.labeled_indices = indices;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn targets(&self) -> Option<&DVector<f64>> {
        self.targets.as_ref()
    }

    pub fn labeled_indices(&self) -> &BTreeSet<usize> {
        &self.labeled_indices
    }

    /// Targets, or an error naming the caller's purpose.
    pub fn require_targets(&self, purpose: &str) -> Result<&DVector<f64>> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::MissingTargets(purpose.to_string()))
    }

    /// Sub-dataset over `rows` (in the given order). Labeled rows are remapped.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n_rows()) {
            return Err(Error::InvalidDataset(format!("row {bad} out of range")));
        }
        let features = self.features.select_rows(rows);
        let mut out = Dataset::new(features, self.feature_names.clone())?;
        if let Some(t) = &self.targets {
            out.targets = Some(DVector::from_iterator(
                rows.len(),
                rows.iter().map(|&r| t[r]),
            ));
        }
        out.labeled_indices = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| self.labeled_indices.contains(r))
            .map(|(i, _)| i)
            .collect();
        Ok(out)
    }
}

/// Map from raw features to the design row used by the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMap {
    /// Raw features followed by a constant 1 (the bias column).
    #[default]
    IdentityWithBias,
}

impl FeatureMap {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self {
            FeatureMap::IdentityWithBias => input_dim + 1,
        }
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FeatureMap::IdentityWithBias => {
                let (n, d) = features.shape();
                let mut out = DMatrix::from_element(n, d + 1, 1.0);
                out.view_mut((0, 0), (n, d)).copy_from(features);
                out
            }
        }
    }
}

/// Named subset of dataset rows.
///
/// `group` ties together bags cut from the same source variable (for
/// example the low/medium/high terciles of one feature).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bag {
    pub name: String,
    pub members: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Bag {
    /// Members are sorted and de-duplicated.
    pub fn new(name: impl Into<String>, members: impl IntoIterator<Item = usize>) -> Self {
        let members: BTreeSet<usize> = members.into_iter().collect();
        Self {
            name: name.into(),
            members: members.into_iter().collect(),
            group: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Serde helpers mapping JSON `null` to an infinite bound.
mod ext_real {
    use serde::{Deserialize, Deserializer, Serializer};

    fn ser<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub mod lower {
        use super::*;
        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            ser(v, s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
        }
    }

    pub mod upper {
        use super::*;
        pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
            ser(v, s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
            Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
        }
    }
}

/// `lower <= mean(bag) <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstraint {
    pub bag: String,
    #[serde(with = "ext_real::lower", default = "neg_inf")]
    pub lower: f64,
    #[serde(with = "ext_real::upper", default = "pos_inf")]
    pub upper: f64,
}

/// `lower <= mean(bag_hi) - mean(bag_lo) <= upper`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffConstraint {
    pub bag_hi: String,
    pub bag_lo: String,
    #[serde(with = "ext_real::lower", default = "neg_inf")]
    pub lower: f64,
    #[serde(with = "ext_real::upper", default = "pos_inf")]
    pub upper: f64,
}

/// `lower <= mean(bag_num) / mean(bag_den) <= upper` with `mean(bag_den) >= positivity_floor`.
///
/// Compiled into linear rows, never divided out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioConstraint {
    pub bag_num: String,
    pub bag_den: String,
    #[serde(with = "ext_real::lower", default = "zero")]
    pub lower: f64,
    #[serde(with = "ext_real::upper", default = "pos_inf")]
    pub upper: f64,
    pub positivity_floor: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}
fn zero() -> f64 {
    0.0
}

/// Bags plus the constraints over them. This is the bags/constraints JSON document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default)]
    pub bags: Vec<Bag>,
    #[serde(default)]
    pub bounds: Vec<BoundConstraint>,
    #[serde(default)]
    pub diffs: Vec<DiffConstraint>,
    #[serde(default)]
    pub ratios: Vec<RatioConstraint>,
}

impl ConstraintSet {
    pub fn with_bags(bags: Vec<Bag>) -> Self {
        Self {
            bags,
            ..Self::default()
        }
    }

    pub fn bag(&self, name: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.name == name)
    }

    pub fn n_constraints(&self) -> usize {
        self.bounds.len() + self.diffs.len() + self.ratios.len()
    }

    /// Linear rows over bag means. Fails on dangling bag references.
    pub fn compile(&self) -> Result<CompiledConstraints> {
        let index: HashMap<&str, usize> = self
            .bags
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.as_str(), i))
            .collect();
        let resolve = |name: &str| -> Result<usize> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidBag(format!("unknown bag '{name}'")))
        };

        let mut rows = Vec::new();
        for (k, c) in self.bounds.iter().enumerate() {
            rows.push(ConstraintRow {
                id: format!("bound[{k}]"),
                terms: vec![(resolve(&c.bag)?, 1.0)],
                lower: c.lower,
                upper: c.upper,
            });
        }
        for (k, c) in self.diffs.iter().enumerate() {
            rows.push(ConstraintRow {
                id: format!("diff[{k}]"),
                terms: vec![(resolve(&c.bag_hi)?, 1.0), (resolve(&c.bag_lo)?, -1.0)],
                lower: c.lower,
                upper: c.upper,
            });
        }
        for (k, c) in self.ratios.iter().enumerate() {
            let num = resolve(&c.bag_num)?;
            let den = resolve(&c.bag_den)?;
            // num >= lower * den
            rows.push(ConstraintRow {
                id: format!("ratio[{k}].lower"),
                terms: vec![(num, 1.0), (den, -c.lower.max(0.0))],
                lower: 0.0,
                upper: f64::INFINITY,
            });
            if c.upper.is_finite() {
                rows.push(ConstraintRow {
                    id: format!("ratio[{k}].upper"),
                    terms: vec![(den, c.upper), (num, -1.0)],
                    lower: 0.0,
                    upper: f64::INFINITY,
                });
            }
            rows.push(ConstraintRow {
                id: format!("ratio[{k}].floor"),
                terms: vec![(den, 1.0)],
                lower: c.positivity_floor,
                upper: f64::INFINITY,
            });
        }
        Ok(CompiledConstraints {
            bags: self.bags.clone(),
            rows,
        })
    }
}

/// `lower <= sum_k coef_k * mean(bag_k) <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub id: String,
    pub terms: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

impl ConstraintRow {
    /// Amount by which `value` leaves `[lower, upper]`.
    pub fn violation(&self, value: f64) -> f64 {
        (value - self.upper).max(0.0) + (self.lower - value).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledConstraints {
    pub bags: Vec<Bag>,
    pub rows: Vec<ConstraintRow>,
}

impl CompiledConstraints {
    /// Row functionals expanded over instances: entry (r, i) is the weight of
    /// value i in row r.
    pub fn instance_matrix(&self, n: usize) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.rows.len(), n);
        for (r, row) in self.rows.iter().enumerate() {
            for &(b, coef) in &row.terms {
                let bag = &self.bags[b];
                let w = coef / bag.len() as f64;
                for &i in &bag.members {
                    a[(r, i)] += w;
                }
            }
        }
        a
    }

    /// Value of each row's functional for per-instance `values`.
    pub fn row_values(&self, values: &[f64]) -> Result<Vec<f64>> {
        let means = self
            .bags
            .iter()
            .map(|b| bag_mean(values, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .rows
            .iter()
            .map(|row| row.terms.iter().map(|&(b, c)| c * means[b]).sum())
            .collect())
    }
}

/// The full learning problem: data, bags, constraints and costs.
#[derive(Debug, Clone)]
pub struct BallparkProblem {
    pub dataset: Dataset,
    pub feature_map: FeatureMap,
    pub constraints: ConstraintSet,
    /// Cost on unlabeled instances (C_N). The ridge regularizer is inversely proportional to it.
    pub unlabeled_cost: f64,
    /// Cost on labeled instances (C_L). Must be zero without labeled rows.
    pub labeled_cost: f64,
}

impl BallparkProblem {
    pub fn new(dataset: Dataset, constraints: ConstraintSet) -> Self {
        Self {
            dataset,
            feature_map: FeatureMap::IdentityWithBias,
            constraints,
            unlabeled_cost: 1.0,
            labeled_cost: 0.0,
        }
    }

    pub fn with_costs(mut self, unlabeled_cost: f64, labeled_cost: f64) -> Self {
        self.unlabeled_cost = unlabeled_cost;
        self.labeled_cost = labeled_cost;
        self
    }

    /// Design matrix after the feature map.
    pub fn design(&self) -> DMatrix<f64> {
        self.feature_map.apply(self.dataset.features())
    }

    /// Same data, different constraints.
    pub fn with_constraints(&self, constraints: ConstraintSet) -> Self {
        Self {
            constraints,
            ..self.clone()
        }
    }

    /// Restricts the problem to `rows`. Bags keep only surviving members;
    /// bags left empty are dropped together with their constraints, and the
    /// dropped bag names are returned. Bounds are reused verbatim.
    pub fn restrict_rows(&self, rows: &[usize]) -> Result<(BallparkProblem, Vec<String>)> {
        let dataset = self.dataset.select_rows(rows)?;
        let remap: HashMap<usize, usize> = rows
            .iter()
            .enumerate()
            .map(|(new, &old)| (old, new))
            .collect();
        let mut bags = Vec::new();
        let mut dropped = Vec::new();
        for bag in &self.constraints.bags {
            let members: Vec<usize> = bag
                .members
                .iter()
                .filter_map(|m| remap.get(m).copied())
                .collect();
            if members.is_empty() {
                dropped.push(bag.name.clone());
            } else {
                let mut b = Bag::new(bag.name.clone(), members);
                b.group = bag.group.clone();
                bags.push(b);
            }
        }
        let constraints = retain_bags(&self.constraints, bags);
        let labeled_cost = if dataset.labeled_indices().is_empty() {
            0.0
        } else {
            self.labeled_cost
        };
        Ok((
            BallparkProblem {
                dataset,
                feature_map: self.feature_map,
                constraints,
                unlabeled_cost: self.unlabeled_cost,
                labeled_cost,
            },
            dropped,
        ))
    }
}

/// Constraint set over `bags`, keeping only constraints whose bags all survive.
pub fn retain_bags(source: &ConstraintSet, bags: Vec<Bag>) -> ConstraintSet {
    let alive: BTreeSet<&str> = bags.iter().map(|b| b.name.as_str()).collect();
    let bounds = source
        .bounds
        .iter()
        .filter(|c| alive.contains(c.bag.as_str()))
        .cloned()
        .collect();
    let diffs = source
        .diffs
        .iter()
        .filter(|c| alive.contains(c.bag_hi.as_str()) && alive.contains(c.bag_lo.as_str()))
        .cloned()
        .collect();
    let ratios = source
        .ratios
        .iter()
        .filter(|c| alive.contains(c.bag_num.as_str()) && alive.contains(c.bag_den.as_str()))
        .cloned()
        .collect();
    ConstraintSet {
        bags,
        bounds,
        diffs,
        ratios,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    OptimalWithSlack,
    Infeasible,
    MaxIterations,
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::OptimalWithSlack => "optimal-with-slack",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max-iterations",
        };
        f.write_str(s)
    }
}

/// Result of a fit: weights over the mapped features, latent labels (empty
/// for the feasibility method) and per-constraint-row slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub weights: Vec<f64>,
    pub latent_labels: Vec<f64>,
    pub slacks: BTreeMap<String, f64>,
    pub objective: f64,
    pub status: SolveStatus,
}

impl Solution {
    pub fn total_slack(&self) -> f64 {
        self.slacks.values().sum()
    }
}

/// Arithmetic mean of `values` over the bag members.
pub fn bag_mean(values: &[f64], bag: &Bag) -> Result<f64> {
    if bag.is_empty() {
        return Err(Error::InvalidBag(format!("bag '{}' is empty", bag.name)));
    }
    let mut sum = 0.0;
    for &i in &bag.members {
        let v = values.get(i).ok_or_else(|| {
            Error::InvalidBag(format!(
                "bag '{}' member {i} out of range for {} values",
                bag.name,
                values.len()
            ))
        })?;
        sum += v;
    }
    Ok(sum / bag.len() as f64)
}

/// Fraction of `+1` labels among the bag members. Labels must be `±1`.
pub fn positive_proportion(labels: &[f64], bag: &Bag) -> Result<f64> {
    if let Some(bad) = labels.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidLabel(format!("expected ±1, found {bad}")));
    }
    if bag.is_empty() {
        return Err(Error::InvalidBag(format!("bag '{}' is empty", bag.name)));
    }
    let mut positives = 0usize;
    for &i in &bag.members {
        match labels.get(i) {
            Some(&v) if v > 0.0 => positives += 1,
            Some(_) => {}
            None => {
                return Err(Error::InvalidBag(format!(
                    "bag '{}' member {i} out of range",
                    bag.name
                )))
            }
        }
    }
    Ok(positives as f64 / bag.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiagnosticKind {
    DanglingReference,
    EmptyBag,
    IndexOutOfRange,
    DuplicateBag,
    InvertedBounds,
    NoFiniteBound,
    NonFiniteBound,
    SameBag,
    NegativeRatioBound,
    NonPositiveFloor,
    LabeledCostWithoutLabels,
    InvalidCost,
    UnsupportedConstraint,
    TiedOrder,
    SwappedInterval,
    NoAnswers,
    DroppedBag,
}

impl fmt::Display for DiagnosticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DiagnosticKind::DanglingReference => "dangling reference",
            DiagnosticKind::EmptyBag => "empty bag",
            DiagnosticKind::IndexOutOfRange => "index out of range",
            DiagnosticKind::DuplicateBag => "duplicate bag",
            DiagnosticKind::InvertedBounds => "inverted bounds",
            DiagnosticKind::NoFiniteBound => "no finite bound",
            DiagnosticKind::NonFiniteBound => "non-finite bound",
            DiagnosticKind::SameBag => "same bag on both sides",
            DiagnosticKind::NegativeRatioBound => "negative ratio bound",
            DiagnosticKind::NonPositiveFloor => "non-positive floor",
            DiagnosticKind::LabeledCostWithoutLabels => "labeled cost without labels",
            DiagnosticKind::InvalidCost => "invalid cost",
            DiagnosticKind::UnsupportedConstraint => "unsupported constraint",
            DiagnosticKind::TiedOrder => "tied order",
            DiagnosticKind::SwappedInterval => "swapped interval",
            DiagnosticKind::NoAnswers => "no answers",
            DiagnosticKind::DroppedBag => "dropped bag",
        };
        f.write_str(s)
    }
}

/// A structural problem found by [`validate_problem`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

impl Diagnostic {
    pub fn new(kind: DiagnosticKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

/// Structural issues with a problem. Empty means well-formed.
pub fn validate_problem(problem: &BallparkProblem) -> Vec<Diagnostic> {
    let mut out = validate_constraints(&problem.constraints, problem.dataset.n_rows());
    if !(problem.unlabeled_cost.is_finite() && problem.unlabeled_cost > 0.0) {
        out.push(Diagnostic::new(
            DiagnosticKind::InvalidCost,
            format!(
                "unlabeled cost must be positive, got {}",
                problem.unlabeled_cost
            ),
        ));
    }
    if !(problem.labeled_cost.is_finite() && problem.labeled_cost >= 0.0) {
        out.push(Diagnostic::new(
            DiagnosticKind::InvalidCost,
            format!(
                "labeled cost must be non-negative, got {}",
                problem.labeled_cost
            ),
        ));
    }
    if problem.labeled_cost > 0.0 && problem.dataset.labeled_indices().is_empty() {
        out.push(Diagnostic::new(
            DiagnosticKind::LabeledCostWithoutLabels,
            format!("labeled cost {} with no labeled rows", problem.labeled_cost),
        ));
    }
    out
}

/// Structural checks on a constraint set against a dataset of `n_rows`.
pub fn validate_constraints(cs: &ConstraintSet, n_rows: usize) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for bag in &cs.bags {
        if !seen.insert(bag.name.as_str()) {
            out.push(Diagnostic::new(
                DiagnosticKind::DuplicateBag,
                format!("bag '{}' defined more than once", bag.name),
            ));
        }
        if bag.members.is_empty() {
            out.push(Diagnostic::new(
                DiagnosticKind::EmptyBag,
                format!("bag '{}' has no members", bag.name),
            ));
        }
        if let Some(&bad) = bag.members.iter().find(|&&m| m >= n_rows) {
            out.push(Diagnostic::new(
                DiagnosticKind::IndexOutOfRange,
                format!("bag '{}' member {bad} >= {n_rows} rows", bag.name),
            ));
        }
    }

    let known = |name: &str, out: &mut Vec<Diagnostic>, what: &str| {
        if !seen.contains(name) {
            out.push(Diagnostic::new(
                DiagnosticKind::DanglingReference,
                format!("{what} references unknown bag '{name}'"),
            ));
        }
    };
    let interval = |lower: f64, upper: f64, out: &mut Vec<Diagnostic>, what: &str| {
        if lower.is_nan() || upper.is_nan() || lower == f64::INFINITY || upper == f64::NEG_INFINITY
        {
            out.push(Diagnostic::new(
                DiagnosticKind::NonFiniteBound,
                format!("{what} has bounds [{lower}, {upper}]"),
            ));
        } else if lower > upper {
            out.push(Diagnostic::new(
                DiagnosticKind::InvertedBounds,
                format!("{what} has lower {lower} > upper {upper}"),
            ));
        } else if !lower.is_finite() && !upper.is_finite() {
            out.push(Diagnostic::new(
                DiagnosticKind::NoFiniteBound,
                format!("{what} has no finite bound"),
            ));
        }
    };

    for (k, c) in cs.bounds.iter().enumerate() {
        let what = format!("bound[{k}]");
        known(&c.bag, &mut out, &what);
        interval(c.lower, c.upper, &mut out, &what);
    }
    for (k, c) in cs.diffs.iter().enumerate() {
        let what = format!("diff[{k}]");
        known(&c.bag_hi, &mut out, &what);
        known(&c.bag_lo, &mut out, &what);
        if c.bag_hi == c.bag_lo {
            out.push(Diagnostic::new(
                DiagnosticKind::SameBag,
                format!("{what} compares bag '{}' with itself", c.bag_hi),
            ));
        }
        interval(c.lower, c.upper, &mut out, &what);
    }
    for (k, c) in cs.ratios.iter().enumerate() {
        let what = format!("ratio[{k}]");
        known(&c.bag_num, &mut out, &what);
        known(&c.bag_den, &mut out, &what);
        if c.bag_num == c.bag_den {
            out.push(Diagnostic::new(
                DiagnosticKind::SameBag,
                format!("{what} compares bag '{}' with itself", c.bag_num),
            ));
        }
        if c.lower < 0.0 {
            out.push(Diagnostic::new(
                DiagnosticKind::NegativeRatioBound,
                format!("{what} has negative lower bound {}", c.lower),
            ));
        }
        if c.lower.is_nan() || c.upper.is_nan() || c.lower == f64::INFINITY {
            out.push(Diagnostic::new(
                DiagnosticKind::NonFiniteBound,
                format!("{what} has bounds [{}, {}]", c.lower, c.upper),
            ));
        } else if c.lower > c.upper {
            out.push(Diagnostic::new(
                DiagnosticKind::InvertedBounds,
                format!("{what} has lower {} > upper {}", c.lower, c.upper),
            ));
        }
        if !(c.positivity_floor.is_finite() && c.positivity_floor > 0.0) {
            out.push(Diagnostic::new(
                DiagnosticKind::NonPositiveFloor,
                format!("{what} has positivity floor {}", c.positivity_floor),
            ));
        }
    }
    out
}
