use std::collections::BTreeMap;
use std::path::PathBuf;

use ballpark::classification::{fit_classifier, p_hat, predict_class, ClassificationFit};
use ballpark::crowd::{
    add_global_bound, aggregate_intervals, aggregate_percentile, AggregationMode,
    AggregationPolicy, CrowdAnswerSet, QuestionMap,
};
use ballpark::cvcv::{default_grid, tune_lambda};
use ballpark::eval::{kfold_eval, LambdaChoice, Learner, Metric};
use ballpark::regression::{fit, fit_with_slack, predict, RegressionFit, RegressionMethod};
use ballpark::synthetic::{generate_linear, synth_constraints, LinearDataSpec, SyntheticSpec};
use ballpark::{io, Bag, BallparkProblem, ConstraintSet, Dataset, Error, SolverConfig};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        Error::SingularMatrix(_) => PyRuntimeError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(err: serde_json::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

fn matrix(rows: &[Vec<f64>], width: usize) -> PyResult<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "expected rows of length {width}, got {}",
            bad.len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn config(slack_penalty: f64, escalate: bool) -> SolverConfig {
    SolverConfig {
        slack_penalty,
        escalate_to_slack: escalate,
        ..SolverConfig::default()
    }
}

/// Feature matrix with optional ground-truth targets.
#[pyclass(name = "Dataset", module = "ballpark", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (rows, feature_names, targets=None))]
    fn new(
        rows: Vec<Vec<f64>>,
        feature_names: Vec<String>,
        targets: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let mut inner = Dataset::from_rows(&rows, feature_names).map_err(to_py)?;
        if let Some(t) = targets {
            inner = inner.with_targets(t.into()).map_err(to_py)?;
        }
        Ok(Self { inner })
    }

    /// Reads a CSV with a header row. `target` names the label column, if present.
    #[staticmethod]
    #[pyo3(signature = (path, target=Some("target".to_string())))]
    fn from_csv(path: PathBuf, target: Option<String>) -> PyResult<Self> {
        let target = match target {
            Some(t) if io::csv_has_column(&path, &t).map_err(to_py)? => Some(t),
            _ => None,
        };
        let inner = io::read_dataset_csv(&path, target.as_deref()).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        io::write_dataset_csv(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    #[getter]
    fn targets(&self) -> Option<Vec<f64>> {
        self.inner.targets().map(|t| t.iter().copied().collect())
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner
            .features()
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_rows={}, features={:?}, targets={})",
            self.inner.n_rows(),
            self.inner.feature_names(),
            self.inner.targets().is_some()
        )
    }
}

/// Bags plus bound, difference and ratio constraints over their means.
#[pyclass(name = "Constraints", module = "ballpark", frozen)]
struct PyConstraints {
    inner: ConstraintSet,
}

#[pymethods]
impl PyConstraints {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = serde_json::from_str(text).map_err(json_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_constraints(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        io::to_json_string(&self.inner).map_err(to_py)
    }

    /// Adds a bound on the mean over all `n_rows` rows.
    #[pyo3(signature = (n_rows, upper, proportion=false, bag="all"))]
    fn with_global_upper(&self, n_rows: usize, upper: f64, proportion: bool, bag: &str) -> Self {
        Self {
            inner: add_global_bound(&self.inner, upper, Bag::new(bag, 0..n_rows), proportion),
        }
    }

    #[getter]
    fn bag_names(&self) -> Vec<String> {
        self.inner.bags.iter().map(|b| b.name.clone()).collect()
    }

    #[getter]
    fn n_constraints(&self) -> usize {
        self.inner.n_constraints()
    }

    fn __repr__(&self) -> String {
        format!(
            "Constraints(bags={}, bounds={}, diffs={}, ratios={})",
            self.inner.bags.len(),
            self.inner.bounds.len(),
            self.inner.diffs.len(),
            self.inner.ratios.len()
        )
    }
}

#[pyclass(name = "RegressionModel", module = "ballpark", frozen)]
struct PyRegressionModel {
    inner: RegressionFit,
}

#[pymethods]
impl PyRegressionModel {
    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    /// Weights over the features followed by the intercept.
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.solution.weights.clone()
    }

    #[getter]
    fn latent_labels(&self) -> Vec<f64> {
        self.inner.solution.latent_labels.clone()
    }

    #[getter]
    fn status(&self) -> String {
        self.inner.solution.status.to_string()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.solution.objective
    }

    #[getter]
    fn regularizer(&self) -> Option<f64> {
        self.inner.regularizer_used
    }

    #[getter]
    fn slacks(&self) -> BTreeMap<String, f64> {
        self.inner.solution.slacks.clone()
    }

    #[getter]
    fn max_violation(&self) -> f64 {
        self.inner.max_violation()
    }

    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(&rows, self.inner.input_dim)?;
        Ok(predict(&self.inner, &x)
            .map_err(to_py)?
            .iter()
            .copied()
            .collect())
    }

    /// The fit report document as JSON.
    #[pyo3(signature = (fingerprint=""))]
    fn to_json(&self, fingerprint: &str) -> PyResult<String> {
        io::to_json_string(&self.inner.report(fingerprint)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "RegressionModel(method={}, status={}, weights={:?})",
            self.inner.method, self.inner.solution.status, self.inner.solution.weights
        )
    }
}

#[pyclass(name = "ClassificationModel", module = "ballpark", frozen)]
struct PyClassificationModel {
    inner: ClassificationFit,
    p_hat: BTreeMap<String, f64>,
}

#[pymethods]
impl PyClassificationModel {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn latent_labels(&self) -> Vec<f64> {
        self.inner.latent_labels.clone()
    }

    #[getter]
    fn status(&self) -> String {
        self.inner.status.to_string()
    }

    #[getter]
    fn objective_trace(&self) -> Vec<f64> {
        self.inner.objective_trace.clone()
    }

    /// Positive proportion per bag under the latent labels.
    #[getter]
    fn p_hat(&self) -> BTreeMap<String, f64> {
        self.p_hat.clone()
    }

    #[getter]
    fn slacks(&self) -> BTreeMap<String, f64> {
        self.inner.slacks.clone()
    }

    /// Labels in {-1, +1}.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = matrix(&rows, self.inner.input_dim)?;
        predict_class(&self.inner, &x).map_err(to_py)
    }

    #[pyo3(signature = (fingerprint=""))]
    fn to_json(&self, fingerprint: &str) -> PyResult<String> {
        io::to_json_string(&self.inner.report(fingerprint, &self.p_hat)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ClassificationModel(status={}, rounds={}, weights={:?})",
            self.inner.status, self.inner.iterations, self.inner.weights
        )
    }
}

fn problem(dataset: &PyDataset, constraints: &PyConstraints) -> BallparkProblem {
    BallparkProblem::new(dataset.inner.clone(), constraints.inner.clone())
}

/// Fits a linear regressor to the constraints. `slack_penalty` forces the
/// soft-constraint program; otherwise slack is used only if the hard fit is
/// infeasible and `escalate` is set.
#[pyfunction]
#[pyo3(signature = (dataset, constraints, method="two-step", lam=1.0, slack_penalty=None, escalate=true))]
fn fit_regression(
    py: Python<'_>,
    dataset: &PyDataset,
    constraints: &PyConstraints,
    method: &str,
    lam: f64,
    slack_penalty: Option<f64>,
    escalate: bool,
) -> PyResult<PyRegressionModel> {
    let method: RegressionMethod = parse(method)?;
    let problem = problem(dataset, constraints);
    let config = config(slack_penalty.unwrap_or(1e3), escalate);
    let inner = py
        .detach(|| match slack_penalty {
            Some(p) => fit_with_slack(&problem, method, Some(lam), p, &config),
            None => fit(&problem, method, lam, &config),
        })
        .map_err(to_py)?;
    Ok(PyRegressionModel { inner })
}

/// Fits a max-margin classifier to proportion constraints over the bags.
#[pyfunction]
#[pyo3(signature = (dataset, constraints, cost=1.0, escalate=true))]
fn fit_classification(
    py: Python<'_>,
    dataset: &PyDataset,
    constraints: &PyConstraints,
    cost: f64,
    escalate: bool,
) -> PyResult<PyClassificationModel> {
    let problem = problem(dataset, constraints);
    let config = config(1e3, escalate);
    let (inner, p_hat) = py
        .detach(|| {
            let fit = fit_classifier(&problem, cost, &config)?;
            let p = p_hat(&fit, &problem)?;
            Ok((fit, p))
        })
        .map_err(to_py)?;
    Ok(PyClassificationModel { inner, p_hat })
}

/// Chooses λ by cross-validating over bags. Returns a dict with
/// `chosen_lambda`, `grid` and `mean_violation`.
#[pyfunction]
#[pyo3(signature = (dataset, constraints, grid=None, folds=3, seed=42, method="two-step"))]
fn tune(
    py: Python<'_>,
    dataset: &PyDataset,
    constraints: &PyConstraints,
    grid: Option<Vec<f64>>,
    folds: usize,
    seed: u64,
    method: &str,
) -> PyResult<BTreeMap<String, Py<PyAny>>> {
    let method: RegressionMethod = parse(method)?;
    let problem = problem(dataset, constraints);
    let grid = grid.unwrap_or_else(default_grid);
    let report = py
        .detach(|| {
            tune_lambda(
                &problem,
                &grid,
                folds,
                seed,
                method,
                &SolverConfig::default(),
            )
        })
        .map_err(to_py)?;
    let mut out = BTreeMap::new();
    out.insert(
        "chosen_lambda".to_string(),
        report.chosen_lambda.into_pyobject(py)?.into_any().unbind(),
    );
    out.insert(
        "grid".to_string(),
        report.grid.into_pyobject(py)?.into_any().unbind(),
    );
    out.insert(
        "mean_violation".to_string(),
        report.mean_violation.into_pyobject(py)?.into_any().unbind(),
    );
    Ok(out)
}

/// Tercile bags on the named features with bounds widened by `epsilon`.
#[pyfunction]
#[pyo3(signature = (dataset, features, epsilon=0.1, include_diffs=false, seed=42))]
fn synthesize_constraints(
    dataset: &PyDataset,
    features: Vec<String>,
    epsilon: f64,
    include_diffs: bool,
    seed: u64,
) -> PyResult<PyConstraints> {
    let spec = SyntheticSpec {
        include_diffs,
        seed,
        ..SyntheticSpec::new(features, epsilon)
    };
    Ok(PyConstraints {
        inner: synth_constraints(&dataset.inner, &spec).map_err(to_py)?,
    })
}

/// Gaussian linear data. Returns `(dataset, true_weights, bias)`.
#[pyfunction]
#[pyo3(signature = (n, d, seed=42, weight_scale=1.0, noise=1.0, bias=None, center=false))]
fn generate_data(
    n: usize,
    d: usize,
    seed: u64,
    weight_scale: f64,
    noise: f64,
    bias: Option<f64>,
    center: bool,
) -> PyResult<(PyDataset, Vec<f64>, f64)> {
    let spec = LinearDataSpec {
        n,
        d,
        weight_scale,
        noise_sigma: noise,
        bias,
    };
    let mut data = generate_linear(&spec, seed).map_err(to_py)?;
    if center {
        data.center().map_err(to_py)?;
    }
    Ok((
        PyDataset {
            inner: data.dataset,
        },
        data.true_weights,
        data.bias,
    ))
}

/// Turns crowd answers (JSON lines) into constraints over `bags`.
#[pyfunction]
#[pyo3(signature = (answers, questions, bags, mode="percentile", b_l=0.25, d_l=0.25, multiplicative=false))]
#[allow(clippy::too_many_arguments)]
fn aggregate_crowd(
    answers: &str,
    questions: &str,
    bags: &PyConstraints,
    mode: &str,
    b_l: f64,
    d_l: f64,
    multiplicative: bool,
) -> PyResult<(PyConstraints, Vec<String>)> {
    let answers = CrowdAnswerSet::from_jsonl(answers.as_bytes()).map_err(to_py)?;
    let questions: QuestionMap = serde_json::from_str(questions).map_err(json_err)?;
    let bags = bags.inner.bags.clone();
    let aggregated = match mode {
        "percentile" => {
            let policy = AggregationPolicy {
                mode: AggregationMode::Percentile,
                lower_quantile: b_l,
                diff_lower_quantile: d_l,
                multiplicative,
                positivity_floor: None,
            };
            aggregate_percentile(&answers, &policy, bags, &questions)
        }
        "interval" => aggregate_intervals(&answers, bags, &questions),
        other => {
            return Err(PyValueError::new_err(format!(
                "mode must be percentile or interval, got {other}"
            )))
        }
    }
    .map_err(to_py)?;
    let notes = aggregated
        .diagnostics
        .iter()
        .map(|d| d.to_string())
        .collect();
    Ok((
        PyConstraints {
            inner: aggregated.constraints,
        },
        notes,
    ))
}

/// K-fold score against the dataset targets. `lam=None` tunes λ on each
/// training fold. Returns `(mean, per_fold)`.
#[pyfunction]
#[pyo3(signature = (dataset, constraints, method="two-step", lam=None, folds=5, metric="rmse", seed=42))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    dataset: &PyDataset,
    constraints: &PyConstraints,
    method: &str,
    lam: Option<f64>,
    folds: usize,
    metric: &str,
    seed: u64,
) -> PyResult<(f64, Vec<f64>)> {
    let metric: Metric = parse(metric)?;
    let learner = match method {
        "classification" => Learner::Classification {
            cost: lam.unwrap_or(1.0),
        },
        m => Learner::Regression {
            method: parse(m)?,
            lambda: lam.map_or_else(|| LambdaChoice::cvcv_default(3), LambdaChoice::Fixed),
        },
    };
    let problem = problem(dataset, constraints);
    let report = py
        .detach(|| {
            kfold_eval(
                &problem,
                &learner,
                metric,
                folds,
                seed,
                &SolverConfig::default(),
            )
        })
        .map_err(to_py)?;
    Ok((report.mean, report.per_fold))
}

#[pymodule(name = "ballpark")]
fn ballpark_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConstraints>()?;
    m.add_class::<PyRegressionModel>()?;
    m.add_class::<PyClassificationModel>()?;
    m.add_function(wrap_pyfunction!(fit_regression, m)?)?;
    m.add_function(wrap_pyfunction!(fit_classification, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_constraints, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_crowd, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
