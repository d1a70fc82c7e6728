//! Constraints from crowd answers.
//!
//! Answers arrive as JSON lines, one per worker and question:
//!
//! ```text
//! {"worker":"w1","question":"q_tv","kind":"interval","lower":80,"upper":140}
//! {"worker":"w2","question":"q_rate","kind":"point","value":0.25}
//! {"worker":"w3","question":"q_cmp","kind":"pair","order":"first","magnitude":1.5}
//! ```
//!
//! A question map ties each question to a bag (`{"bag": "..."}`) or to an
//! ordered pair of bags (`{"first": "...", "second": "..."}`).

use std::collections::BTreeMap;
use std::io::BufRead;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{
    Bag, BoundConstraint, ConstraintSet, Diagnostic, DiagnosticKind, DiffConstraint,
    RatioConstraint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrder {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnswerPayload {
    Point {
        value: f64,
    },
    Pair {
        order: PairOrder,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        magnitude: Option<f64>,
    },
    Interval {
        lower: f64,
        upper: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrowdAnswer {
    pub worker: String,
    pub question: String,
    #[serde(flatten)]
    pub payload: AnswerPayload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrowdAnswerSet {
    pub answers: Vec<CrowdAnswer>,
}

impl CrowdAnswerSet {
    pub fn new(answers: Vec<CrowdAnswer>) -> Result<Self> {
        for (i, a) in answers.iter().enumerate() {
            check_answer(a).map_err(|msg| {
                Error::InvalidArgument(format!("answer {} ({}): {msg}", i + 1, a.question))
            })?;
        }
        Ok(Self { answers })
    }

    /// Parses JSON lines; blank lines are skipped.
    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut answers = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let answer: CrowdAnswer = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidArgument(format!("answers line {}: {e}", lineno + 1)))?;
            answers.push(answer);
        }
        Self::new(answers)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    fn by_question(&self) -> BTreeMap<&str, Vec<&AnswerPayload>> {
        let mut out: BTreeMap<&str, Vec<&AnswerPayload>> = BTreeMap::new();
        for a in &self.answers {
            out.entry(a.question.as_str()).or_default().push(&a.payload);
        }
        out
    }
}

fn check_answer(a: &CrowdAnswer) -> std::result::Result<(), String> {
    match &a.payload {
        AnswerPayload::Point { value } if !value.is_finite() => {
            Err(format!("point value {value} is not finite"))
        }
        AnswerPayload::Pair {
            magnitude: Some(m), ..
        } if !m.is_finite() => Err(format!("magnitude {m} is not finite")),
        AnswerPayload::Interval { lower, upper } => {
            if !(lower.is_finite() && upper.is_finite()) {
                Err("interval endpoints must be finite".to_string())
            } else if lower > upper {
                Err(format!("interval lower {lower} exceeds upper {upper}"))
            } else {
                Ok(())
            }
        }
        _ => Ok(()),
    }
}

/// What a question asks about.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuestionTarget {
    Bag { bag: String },
    Pair { first: String, second: String },
}

pub type QuestionMap = BTreeMap<String, QuestionTarget>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    Percentile,
    IntervalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationPolicy {
    pub mode: AggregationMode,
    /// `b_l`; bag bounds use quantiles `b_l` and `1 − b_l`.
    pub lower_quantile: f64,
    /// `d_l`; pairwise magnitudes use quantiles `d_l` and `1 − d_l`.
    pub diff_lower_quantile: f64,
    /// Emit pairwise answers as ratio rather than difference constraints.
    pub multiplicative: bool,
    /// Denominator floor for ratio constraints. Derived from the bag bounds when absent.
    pub positivity_floor: Option<f64>,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        Self {
            mode: AggregationMode::Percentile,
            lower_quantile: 0.25,
            diff_lower_quantile: 0.25,
            multiplicative: false,
            positivity_floor: None,
        }
    }
}

impl AggregationPolicy {
    pub fn upper_quantile(&self) -> f64 {
        1.0 - self.lower_quantile
    }

    pub fn validate(&self) -> Result<()> {
        for (name, q) in [
            ("lower quantile", self.lower_quantile),
            ("diff lower quantile", self.diff_lower_quantile),
        ] {
            if !(0.0..=0.5).contains(&q) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 0.5], got {q}"
                )));
            }
        }
        if let Some(f) = self.positivity_floor {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "positivity floor must be positive, got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Constraint set produced by aggregation plus anything skipped on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub constraints: ConstraintSet,
    pub diagnostics: Vec<Diagnostic>,
}

/// Linear-interpolation quantile at index `q·(n − 1)` of the sorted values.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile of an empty list".to_string()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "quantile level {q} outside [0, 1]"
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("quantile of NaN values".to_string()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted_quantile(&sorted, q))
}

pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        sorted[lo.min(sorted.len() - 1)]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MajorityOrder {
    First,
    Second,
    Tie,
}

pub fn majority_order(votes: &[PairOrder]) -> MajorityOrder {
    let first = votes.iter().filter(|&&v| v == PairOrder::First).count();
    let second = votes.len() - first;
    match first.cmp(&second) {
        std::cmp::Ordering::Greater => MajorityOrder::First,
        std::cmp::Ordering::Less => MajorityOrder::Second,
        std::cmp::Ordering::Equal => MajorityOrder::Tie,
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn known_bag(bags: &[Bag], question: &str, name: &str, diagnostics: &mut Vec<Diagnostic>) -> bool {
    if bags.iter().any(|b| b.name == name) {
        true
    } else {
        diagnostics.push(Diagnostic::new(
            DiagnosticKind::DanglingReference,
            format!("question '{question}' refers to unknown bag '{name}'"),
        ));
        false
    }
}

fn unmapped_questions(
    answers: &CrowdAnswerSet,
    questions: &QuestionMap,
    diagnostics: &mut Vec<Diagnostic>,
) {
    for q in answers.by_question().keys() {
        if !questions.contains_key(*q) {
            diagnostics.push(Diagnostic::new(
                DiagnosticKind::DanglingReference,
                format!("answers for unmapped question '{q}' ignored"),
            ));
        }
    }
}

/// Percentile bounds for bag questions and majority-oriented pairwise
/// constraints for pair questions.
pub fn aggregate_percentile(
    answers: &CrowdAnswerSet,
    policy: &AggregationPolicy,
    bags: Vec<Bag>,
    questions: &QuestionMap,
) -> Result<Aggregated> {
    policy.validate()?;
    if policy.mode != AggregationMode::Percentile {
        return Err(Error::InvalidArgument(
            "percentile aggregation needs mode=percentile".to_string(),
        ));
    }
    if answers.is_empty() {
        return Err(Error::EmptyInput("no crowd answers".to_string()));
    }
    let grouped = answers.by_question();
    let mut cs = ConstraintSet::with_bags(bags);
    let mut diagnostics = Vec::new();
    unmapped_questions(answers, questions, &mut diagnostics);

    struct PendingPair {
        hi: String,
        lo: String,
        bounds: Option<(f64, f64)>,
    }
    let mut pairs = Vec::new();

    for (qid, target) in questions {
        let payloads = grouped.get(qid.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        match target {
            QuestionTarget::Bag { bag } => {
                if !known_bag(&cs.bags, qid, bag, &mut diagnostics) {
                    continue;
                }
                let values: Vec<f64> = payloads
                    .iter()
                    .filter_map(|p| match p {
                        AnswerPayload::Point { value } => Some(*value),
                        _ => None,
                    })
                    .collect();
                if values.is_empty() {
                    diagnostics.push(Diagnostic::new(
                        DiagnosticKind::NoAnswers,
                        format!("question '{qid}' has no point answers"),
                    ));
                    continue;
                }
                let mut sorted = values;
                sorted.sort_by(f64::total_cmp);
                cs.bounds.push(BoundConstraint {
                    bag: bag.clone(),
                    lower: sorted_quantile(&sorted, policy.lower_quantile),
                    upper: sorted_quantile(&sorted, policy.upper_quantile()),
                });
            }
            QuestionTarget::Pair { first, second } => {
                if !known_bag(&cs.bags, qid, first, &mut diagnostics)
                    || !known_bag(&cs.bags, qid, second, &mut diagnostics)
                {
                    continue;
                }
                let votes: Vec<(PairOrder, Option<f64>)> = payloads
                    .iter()
                    .filter_map(|p| match p {
                        AnswerPayload::Pair { order, magnitude } => Some((*order, *magnitude)),
                        _ => None,
                    })
                    .collect();
                if votes.is_empty() {
                    diagnostics.push(Diagnostic::new(
                        DiagnosticKind::NoAnswers,
                        format!("question '{qid}' has no pairwise answers"),
                    ));
                    continue;
                }
                let orders: Vec<PairOrder> = votes.iter().map(|v| v.0).collect();
                let (winner, hi, lo) = match majority_order(&orders) {
                    MajorityOrder::First => (PairOrder::First, first, second),
                    MajorityOrder::Second => (PairOrder::Second, second, first),
                    MajorityOrder::Tie => {
                        warn!("question '{qid}': tied vote, constraint dropped");
                        diagnostics.push(Diagnostic::new(
                            DiagnosticKind::TiedOrder,
                            format!(
                                "question '{qid}' has a tied vote ({} each); constraint dropped",
                                orders.len() / 2
                            ),
                        ));
                        continue;
                    }
                };
                // Magnitudes only count from workers agreeing with the majority.
                let mut magnitudes: Vec<f64> = votes
                    .iter()
                    .filter(|v| v.0 == winner)
                    .filter_map(|v| v.1)
                    .collect();
                let bounds = if magnitudes.is_empty() {
                    None
                } else {
                    magnitudes.sort_by(f64::total_cmp);
                    Some((
                        sorted_quantile(&magnitudes, policy.diff_lower_quantile),
                        sorted_quantile(&magnitudes, 1.0 - policy.diff_lower_quantile),
                    ))
                };
                pairs.push(PendingPair {
                    hi: hi.clone(),
                    lo: lo.clone(),
                    bounds,
                });
            }
        }
    }

    if policy.multiplicative {
        let floor = policy.positivity_floor.unwrap_or_else(|| {
            let scale = cs
                .bounds
                .iter()
                .flat_map(|b| [b.lower, b.upper])
                .filter(|v| v.is_finite())
                .map(f64::abs)
                .fold(0.0, f64::max);
            if scale > 0.0 {
                1e-3 * scale
            } else {
                1e-3
            }
        });
        for p in pairs {
            let (lower, upper) = p.bounds.unwrap_or((1.0, f64::INFINITY));
            cs.ratios.push(RatioConstraint {
                bag_num: p.hi,
                bag_den: p.lo,
                lower,
                upper,
                positivity_floor: floor,
            });
        }
    } else {
        for p in pairs {
            let (lower, upper) = p.bounds.unwrap_or((0.0, f64::INFINITY));
            cs.diffs.push(DiffConstraint {
                bag_hi: p.hi,
                bag_lo: p.lo,
                lower,
                upper,
            });
        }
    }

    Ok(Aggregated {
        constraints: cs,
        diagnostics,
    })
}

/// Bounds from the means of the interval endpoints given per bag question.
pub fn aggregate_intervals(
    answers: &CrowdAnswerSet,
    bags: Vec<Bag>,
    questions: &QuestionMap,
) -> Result<Aggregated> {
    if answers.is_empty() {
        return Err(Error::EmptyInput("no crowd answers".to_string()));
    }
    let grouped = answers.by_question();
    let mut cs = ConstraintSet::with_bags(bags);
    let mut diagnostics = Vec::new();
    unmapped_questions(answers, questions, &mut diagnostics);

    for (qid, target) in questions {
        let bag = match target {
            QuestionTarget::Bag { bag } => bag,
            QuestionTarget::Pair { .. } => {
                diagnostics.push(Diagnostic::new(
                    DiagnosticKind::UnsupportedConstraint,
                    format!("pairwise question '{qid}' ignored in interval mode"),
                ));
                continue;
            }
        };
        let payloads = grouped.get(qid.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut lowers = Vec::new();
        let mut uppers = Vec::new();
        for p in payloads {
            match p {
                AnswerPayload::Interval { lower, upper } => {
                    lowers.push(*lower);
                    uppers.push(*upper);
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "question '{qid}' has a non-interval answer in interval mode"
                    )))
                }
            }
        }
        if lowers.is_empty() {
            diagnostics.push(Diagnostic::new(
                DiagnosticKind::NoAnswers,
                format!("question '{qid}' has no interval answers"),
            ));
            continue;
        }
        if !known_bag(&cs.bags, qid, bag, &mut diagnostics) {
            continue;
        }
        let mut lower = mean(&lowers);
        let mut upper = mean(&uppers);
        if lower > upper {
            diagnostics.push(Diagnostic::new(
                DiagnosticKind::SwappedInterval,
                format!("question '{qid}': mean lower {lower} above mean upper {upper}, swapped"),
            ));
            std::mem::swap(&mut lower, &mut upper);
        }
        cs.bounds.push(BoundConstraint {
            bag: bag.clone(),
            lower,
            upper,
        });
    }

    Ok(Aggregated {
        constraints: cs,
        diagnostics,
    })
}

/// Appends a bound on the global mean over `all_bag`. The lower end is 0 for
/// proportions and unbounded otherwise.
pub fn add_global_bound(
    cs: &ConstraintSet,
    upper: f64,
    all_bag: Bag,
    proportion: bool,
) -> ConstraintSet {
    let mut out = cs.clone();
    let name = all_bag.name.clone();
    if out.bag(&name).is_none() {
        out.bags.push(all_bag);
    }
    out.bounds.push(BoundConstraint {
        bag: name,
        lower: if proportion { 0.0 } else { f64::NEG_INFINITY },
        upper,
    });
    out
}
