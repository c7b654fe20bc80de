//! Scoring and aggregation.
//!
//! Rating errors are signed `predicted - true`. Unreadable or failed rating
//! predictions are replaced with the training-rating mean; unreadable
//! pairwise predictions earn a deterministic 0.5 credit. Reliability counts
//! parse success only and excludes generation failures from its
//! denominator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::RatingEvent;
use crate::extract::{Answer, Prediction};
use crate::nmf::PairVerdict;
use crate::sampler::{Side, TaskInstance, TaskKind};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot impute from an empty history")]
    EmptyHistory,
    #[error("no scored instances to aggregate")]
    EmptyGroup,
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lfm,
    Direct,
    Nmf,
    Default,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lfm => "lfm",
            Method::Direct => "direct",
            Method::Nmf => "nmf",
            Method::Default => "default",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lfm" => Ok(Method::Lfm),
            "direct" => Ok(Method::Direct),
            "nmf" => Ok(Method::Nmf),
            "default" => Ok(Method::Default),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Human-readable series name, e.g. `LFM 100` or `NMF bg1200`.
pub fn method_label(method: Method, profile_length: Option<usize>, background_size: Option<usize>) -> String {
    match (method, profile_length, background_size) {
        (Method::Lfm, Some(n), _) => format!("LFM {n}"),
        (Method::Lfm, None, _) => "LFM".into(),
        (Method::Direct, _, _) => "Direct".into(),
        (Method::Nmf, _, Some(bg)) => format!("NMF bg{bg}"),
        (Method::Nmf, _, None) => "NMF".into(),
        (Method::Default, _, _) => "Default".into(),
    }
}

/// Full experimental coordinates of one scored instance.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub task: TaskKind,
    pub history_size: usize,
    pub profile_length: Option<usize>,
    pub background_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance_id: String,
    pub key: CellKey,
    pub prediction: Prediction,
    pub imputed: bool,
    /// Pairwise only: 0, 0.5 or 1.
    pub credit: Option<f64>,
    /// Rating only: predicted minus true.
    pub error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Imputation {
    /// Mean of the user's history sample.
    #[default]
    SampleMean,
    /// A fixed corpus-wide mean.
    CorpusMean(f64),
}

pub fn history_mean(history: &[RatingEvent]) -> Result<f64, EvalError> {
    if history.is_empty() {
        return Err(EvalError::EmptyHistory);
    }
    Ok(history.iter().map(|e| e.rating.value()).sum::<f64>() / history.len() as f64)
}

pub fn imputed_value(history: &[RatingEvent], imputation: Imputation) -> Result<f64, EvalError> {
    match imputation {
        Imputation::SampleMean => history_mean(history),
        Imputation::CorpusMean(m) => Ok(m),
    }
}

/// Returns the value to score and whether it was imputed.
pub fn resolve_rating(pred: &Prediction, history: &[RatingEvent], imputation: Imputation) -> Result<(f64, bool), EvalError> {
    match pred {
        Prediction::Readable(Answer::Score(v)) => Ok((*v, false)),
        _ => Ok((imputed_value(history, imputation)?, true)),
    }
}

pub fn score_pairwise(pred: &Prediction, truth: Side) -> f64 {
    match pred.side() {
        Some(side) if side == truth => 1.0,
        Some(_) => 0.0,
        None => 0.5,
    }
}

pub fn score_verdict(verdict: PairVerdict, truth: Side) -> f64 {
    match (verdict, truth) {
        (PairVerdict::Tie, _) => 0.5,
        (PairVerdict::A, Side::A) | (PairVerdict::B, Side::B) => 1.0,
        _ => 0.0,
    }
}

/// Scores one model prediction against its instance.
pub fn score_prediction(
    instance: &TaskInstance,
    key: CellKey,
    prediction: Prediction,
    history: &[RatingEvent],
    imputation: Imputation,
) -> Result<ScoredInstance, EvalError> {
    let (credit, error, imputed) = match (instance.truth_rating(), instance.truth_side()) {
        (Some(truth), _) => {
            let (value, imputed) = resolve_rating(&prediction, history, imputation)?;
            (None, Some(value - truth.value()), imputed)
        }
        (None, Some(truth)) => (Some(score_pairwise(&prediction, truth)), None, !prediction.is_readable()),
        (None, None) => unreachable!("instance has neither rating nor pairwise truth"),
    };
    Ok(ScoredInstance { instance_id: instance.id.clone(), key, prediction, imputed, credit, error })
}

/// History mean for ratings, 0.5 credit for pairwise tasks. Marked
/// unreadable and imputed: the baseline never reads a model answer.
pub fn default_baseline(
    instance: &TaskInstance,
    history: &[RatingEvent],
    imputation: Imputation,
) -> Result<ScoredInstance, EvalError> {
    let key = CellKey {
        method: Method::Default,
        task: instance.kind(),
        history_size: instance.history_size,
        profile_length: None,
        background_size: None,
    };
    score_prediction(instance, key, Prediction::Unreadable, history, imputation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBy {
    pub method: bool,
    pub task: bool,
    pub history_size: bool,
    pub profile_length: bool,
    pub background_size: bool,
}

impl GroupBy {
    pub const ALL: GroupBy =
        GroupBy { method: true, task: true, history_size: true, profile_length: true, background_size: true };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub method: Option<Method>,
    pub label: String,
    pub task: Option<TaskKind>,
    pub history_size: Option<usize>,
    pub profile_length: Option<usize>,
    pub background_size: Option<usize>,
    pub n_total: usize,
    pub n_readable: usize,
    pub n_generation_failed: usize,
    pub reliability: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub bias: Option<f64>,
    pub error_rate: Option<f64>,
}

type GroupKey = (Option<Method>, Option<TaskKind>, Option<usize>, Option<usize>, Option<usize>);

fn group_key(key: &CellKey, by: GroupBy) -> GroupKey {
    (
        by.method.then_some(key.method),
        by.task.then_some(key.task),
        by.history_size.then_some(key.history_size),
        if by.profile_length { key.profile_length } else { None },
        if by.background_size { key.background_size } else { None },
    )
}

#[derive(Default)]
struct Accumulator {
    n_total: usize,
    n_readable: usize,
    n_failed: usize,
    n_err: usize,
    sum_sq: f64,
    sum_abs: f64,
    sum: f64,
    n_credit: usize,
    sum_credit: f64,
}

pub fn aggregate(scored: &[ScoredInstance], by: GroupBy) -> Result<Vec<MetricsCell>, EvalError> {
    if scored.is_empty() {
        return Err(EvalError::EmptyGroup);
    }
    let mut groups: BTreeMap<GroupKey, Accumulator> = BTreeMap::new();
    for s in scored {
        let acc = groups.entry(group_key(&s.key, by)).or_default();
        acc.n_total += 1;
        match s.prediction {
            Prediction::Readable(_) => acc.n_readable += 1,
            Prediction::GenerationFailed => acc.n_failed += 1,
            Prediction::Unreadable => {}
        }
        if let Some(e) = s.error {
            acc.n_err += 1;
            acc.sum_sq += e * e;
            acc.sum_abs += e.abs();
            acc.sum += e;
        }
        if let Some(c) = s.credit {
            acc.n_credit += 1;
            acc.sum_credit += c;
        }
    }
    Ok(groups
        .into_iter()
        .map(|((method, task, history_size, profile_length, background_size), acc)| {
            let attempted = acc.n_total - acc.n_failed;
            let n_err = acc.n_err as f64;
            let label = match method {
                Some(m) => method_label(m, profile_length, background_size),
                None => "all".to_string(),
            };
            MetricsCell {
                method,
                label,
                task,
                history_size,
                profile_length,
                background_size,
                n_total: acc.n_total,
                n_readable: acc.n_readable,
                n_generation_failed: acc.n_failed,
                reliability: (attempted > 0).then(|| acc.n_readable as f64 / attempted as f64),
                rmse: (acc.n_err > 0).then(|| (acc.sum_sq / n_err).sqrt()),
                mae: (acc.n_err > 0).then(|| acc.sum_abs / n_err),
                bias: (acc.n_err > 0).then(|| acc.sum / n_err),
                error_rate: (acc.n_credit > 0).then(|| 1.0 - acc.sum_credit / acc.n_credit as f64),
            }
        })
        .collect())
}

pub fn write_metrics_csv(path: &Path, cells: &[MetricsCell]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Io(e.to_string()))?;
    for c in cells {
        w.serialize(c).map_err(|e| EvalError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsCell>, EvalError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| EvalError::Io(e.to_string()))?;
    r.deserialize().collect::<Result<Vec<MetricsCell>, _>>().map_err(|e| EvalError::Io(e.to_string()))
}

pub fn write_metrics_json(path: &Path, cells: &[MetricsCell]) -> Result<(), EvalError> {
    let text = serde_json::to_string_pretty(cells).map_err(|e| EvalError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| EvalError::Io(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{MovieId, Rating, UserId};
    use crate::sampler::Target;

    fn ev(r: f64) -> RatingEvent {
        RatingEvent { user: UserId(1), movie: MovieId(1), rating: Rating::new(r).unwrap(), timestamp: None }
    }

    fn key(method: Method, task: TaskKind) -> CellKey {
        CellKey { method, task, history_size: 10, profile_length: None, background_size: None }
    }

    fn rating_instance(truth: f64) -> TaskInstance {
        TaskInstance {
            id: "r".into(),
            sample_id: "s".into(),
            user: UserId(1),
            history_size: 2,
            repeat: 0,
            index: 0,
            target: Target::Rating { movie: MovieId(5), rating: Rating::new(truth).unwrap() },
        }
    }

    fn choice_instance(truth: Side) -> TaskInstance {
        TaskInstance {
            id: "c".into(),
            sample_id: "s".into(),
            user: UserId(1),
            history_size: 2,
            repeat: 0,
            index: 0,
            target: Target::Choice { a: MovieId(1), b: MovieId(2), truth },
        }
    }

    #[test]
    fn resolve_rating_cases() {
        let none = Imputation::SampleMean;
        assert_eq!(resolve_rating(&Prediction::Readable(Answer::Score(4.0)), &[], none), Ok((4.0, false)));
        assert_eq!(resolve_rating(&Prediction::Unreadable, &[ev(3.0), ev(4.0), ev(5.0)], none), Ok((4.0, true)));
        assert_eq!(resolve_rating(&Prediction::GenerationFailed, &[ev(3.0)], none), Ok((3.0, true)));
        assert_eq!(resolve_rating(&Prediction::Unreadable, &[], none), Err(EvalError::EmptyHistory));
        assert_eq!(
            resolve_rating(&Prediction::Unreadable, &[], Imputation::CorpusMean(3.5)),
            Ok((3.5, true))
        );
    }

    #[test]
    fn pairwise_credit() {
        let a = Prediction::Readable(Answer::Choice(Side::A));
        assert_eq!(score_pairwise(&a, Side::A), 1.0);
        assert_eq!(score_pairwise(&a, Side::B), 0.0);
        assert_eq!(score_pairwise(&Prediction::Unreadable, Side::A), 0.5);
        assert_eq!(score_pairwise(&Prediction::GenerationFailed, Side::B), 0.5);
        assert_eq!(score_verdict(PairVerdict::Tie, Side::A), 0.5);
        assert_eq!(score_verdict(PairVerdict::B, Side::B), 1.0);
    }

    #[test]
    fn default_baseline_cases() {
        let hist = [ev(3.5), ev(4.0), ev(4.0), ev(3.5), ev(4.0)];
        let s = default_baseline(&rating_instance(4.5), &hist, Imputation::SampleMean).unwrap();
        assert!((s.error.unwrap() - (-0.7)).abs() < 1e-12);
        assert!(s.imputed);
        let s = default_baseline(&rating_instance(5.0), &[ev(5.0), ev(5.0)], Imputation::SampleMean).unwrap();
        assert_eq!(s.error, Some(0.0));
        let s = default_baseline(&choice_instance(Side::B), &hist, Imputation::SampleMean).unwrap();
        assert_eq!(s.credit, Some(0.5));
        assert_eq!(default_baseline(&rating_instance(3.0), &[], Imputation::SampleMean), Err(EvalError::EmptyHistory));
    }

    fn scored(method: Method, task: TaskKind, prediction: Prediction, credit: Option<f64>, error: Option<f64>) -> ScoredInstance {
        ScoredInstance { instance_id: "x".into(), key: key(method, task), prediction, imputed: false, credit, error }
    }

    #[test]
    fn aggregate_closed_forms() {
        let readable = Prediction::Readable(Answer::Score(3.0));
        let rows = vec![
            scored(Method::Lfm, TaskKind::Rating, readable, None, Some(1.0)),
            scored(Method::Lfm, TaskKind::Rating, readable, None, Some(0.0)),
        ];
        let cells = aggregate(&rows, GroupBy::ALL).unwrap();
        assert_eq!(cells.len(), 1);
        let c = &cells[0];
        assert!((c.rmse.unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(c.mae, Some(0.5));
        assert_eq!(c.bias, Some(0.5));
        assert_eq!(c.error_rate, None);

        let side = Prediction::Readable(Answer::Choice(Side::A));
        let rows = vec![
            scored(Method::Direct, TaskKind::Choice, side, Some(1.0), None),
            scored(Method::Direct, TaskKind::Choice, side, Some(0.0), None),
            scored(Method::Direct, TaskKind::Choice, Prediction::Unreadable, Some(0.5), None),
        ];
        let cells = aggregate(&rows, GroupBy::ALL).unwrap();
        assert_eq!(cells[0].error_rate, Some(0.5));
        assert!((cells[0].reliability.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(cells[0].label, "Direct");
    }

    #[test]
    fn generation_failures_leave_reliability_denominator() {
        let side = Prediction::Readable(Answer::Choice(Side::A));
        let rows = vec![
            scored(Method::Direct, TaskKind::Choice, side, Some(1.0), None),
            scored(Method::Direct, TaskKind::Choice, Prediction::Unreadable, Some(0.5), None),
            scored(Method::Direct, TaskKind::Choice, Prediction::GenerationFailed, Some(0.5), None),
        ];
        let c = &aggregate(&rows, GroupBy::ALL).unwrap()[0];
        assert_eq!(c.n_total, 3);
        assert_eq!(c.n_generation_failed, 1);
        assert_eq!(c.reliability, Some(0.5));
        assert!((c.error_rate.unwrap() - (1.0 - 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_empty_is_error() {
        assert_eq!(aggregate(&[], GroupBy::ALL), Err(EvalError::EmptyGroup));
    }

    #[test]
    fn grouping_collapses_keys() {
        let readable = Prediction::Readable(Answer::Score(3.0));
        let mut a = scored(Method::Lfm, TaskKind::Rating, readable, None, Some(1.0));
        a.key.profile_length = Some(50);
        let mut b = scored(Method::Lfm, TaskKind::Rating, readable, None, Some(-1.0));
        b.key.profile_length = Some(100);
        assert_eq!(aggregate(&[a.clone(), b.clone()], GroupBy::ALL).unwrap().len(), 2);
        let by = GroupBy { profile_length: false, ..GroupBy::ALL };
        let cells = aggregate(&[a, b], by).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].bias, Some(0.0));
        assert_eq!(cells[0].label, "LFM");
    }

    #[test]
    fn labels() {
        assert_eq!(method_label(Method::Lfm, Some(100), None), "LFM 100");
        assert_eq!(method_label(Method::Nmf, None, Some(1200)), "NMF bg1200");
        assert_eq!(method_label(Method::Default, None, None), "Default");
    }

    #[test]
    fn csv_round_trip() {
        let readable = Prediction::Readable(Answer::Score(3.0));
        let rows = vec![scored(Method::Lfm, TaskKind::Rating, readable, None, Some(0.25))];
        let cells = aggregate(&rows, GroupBy::ALL).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &cells).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "method,label,task,history_size,profile_length,background_size,n_total,n_readable,n_generation_failed,reliability,rmse,mae,bias,error_rate\n"
        ));
        assert_eq!(read_metrics_csv(&path).unwrap(), cells);
    }
}
