use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ClassIncrementalProtocol, ContinualState, IterationLog, TrainConfig};
use crate::error::{Error, Result};
use crate::synthbench::{
    evaluate, forgetting_ratio, EvalReport, ForgettingLedger, FrIndicator, Prediction, SyntheticVideo,
};

/// Evaluation knobs that do not affect training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub fr_indicator: FrIndicator,
    /// Threads used to compute validation predictions (results are merged in
    /// video order, so the count never changes the report).
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fr_indicator: FrIndicator::Corrected,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub classes: Vec<usize>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "AR1")]
    pub ar1: f64,
    #[serde(rename = "AR10")]
    pub ar10: f64,
    /// Category id (as a string key) → AP on the cumulative validation set.
    pub per_category_ap: BTreeMap<String, f64>,
}

impl StepReport {
    fn new(step: usize, classes: Vec<usize>, eval: &EvalReport) -> Self {
        Self {
            step,
            classes,
            map: eval.map,
            ap50: eval.ap50,
            ap75: eval.ap75,
            ar1: eval.ar1,
            ar10: eval.ar10,
            per_category_ap: eval
                .per_category_ap
                .iter()
                .map(|(c, ap)| (c.to_string(), *ap))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: ClassIncrementalProtocol,
    pub steps: Vec<StepReport>,
    #[serde(rename = "FR")]
    pub fr: f64,
    pub fr_indicator: FrIndicator,
    pub fr_skipped_zero_first: usize,
    pub ledger: ForgettingLedger,
}

impl ExperimentReport {
    pub fn final_step(&self) -> &StepReport {
        self.steps.last().expect("a run has at least one step")
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolRun {
    pub report: ExperimentReport,
    pub state: ContinualState,
    pub logs: Vec<IterationLog>,
}

/// Validation predictions for `videos`, fanned out over `workers` threads.
pub fn predict_all(state: &ContinualState, videos: &[&SyntheticVideo], workers: usize) -> Result<Vec<Prediction>> {
    let workers = workers.clamp(1, videos.len().max(1));
    let chunk = videos.len().div_ceil(workers).max(1);
    let per_chunk: Vec<Result<Vec<Prediction>>> = if workers == 1 {
        vec![collect_predictions(state, videos)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = videos
                .chunks(chunk)
                .map(|part| s.spawn(move || collect_predictions(state, part)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::Contract("evaluation worker panicked".into())))
                })
                .collect()
        })
    };
    let mut out = Vec::new();
    for part in per_chunk {
        out.extend(part?);
    }
    Ok(out)
}

fn collect_predictions(state: &ContinualState, videos: &[&SyntheticVideo]) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(state.predict(v)?);
    }
    Ok(out)
}

/// Runs every step of `protocol`: `datasets[t]` is `(train, val)` for step t.
///
/// After each step the model is evaluated on the union of all validation
/// videos seen so far; `on_step` receives the state and that step's logs
/// (used for checkpointing).
pub fn run_protocol(
    protocol: &ClassIncrementalProtocol,
    datasets: &[(Vec<SyntheticVideo>, Vec<SyntheticVideo>)],
    config: &TrainConfig,
    options: RunOptions,
    mut on_step: impl FnMut(usize, &ContinualState, &[IterationLog]) -> Result<()>,
) -> Result<ProtocolRun> {
    protocol.validate()?;
    if datasets.len() != protocol.steps {
        return Err(Error::Parameter(format!(
            "{} datasets for a {}-step protocol",
            datasets.len(),
            protocol.steps
        )));
    }
    let d = datasets
        .iter()
        .flat_map(|(train, _)| train.first())
        .map(|v| v.pixel_features[0].cols())
        .next()
        .ok_or_else(|| Error::Parameter("no training videos".into()))?;
    let mut state = ContinualState::new(protocol.clone(), d, config)?;
    let mut ledger = ForgettingLedger::new(protocol.steps);
    let mut steps = Vec::with_capacity(protocol.steps);
    let mut logs = Vec::new();
    let mut val_seen: Vec<&SyntheticVideo> = Vec::new();
    let mut last_eval = None;
    for (t, (train, val)) in datasets.iter().enumerate() {
        for v in train.iter().chain(val) {
            if let Some(c) = v
                .instances
                .iter()
                .map(|i| i.category)
                .find(|c| !protocol.class_sets[t].contains(c))
            {
                return Err(Error::Contract(format!(
                    "video {} of step {t} is labelled with category {c} from another step",
                    v.id
                )));
            }
        }
        state.begin_step(t, config)?;
        let step_logs = state.run_step(train, config)?;
        val_seen.extend(val.iter());
        let preds = predict_all(&state, &val_seen, options.workers)?;
        let eval = evaluate(&preds, &val_seen)?;
        for &c in &protocol.class_sets[t] {
            ledger.record_first(c, t, eval.per_category_ap.get(&c).copied().unwrap_or(0.0));
        }
        steps.push(StepReport::new(t, protocol.class_sets[t].clone(), &eval));
        on_step(t, &state, &step_logs)?;
        logs.extend(step_logs);
        last_eval = Some(eval);
    }
    let last = last_eval.expect("at least one step");
    for c in protocol.class_sets.concat() {
        ledger.record_last(c, last.per_category_ap.get(&c).copied().unwrap_or(0.0));
    }
    let fr = forgetting_ratio(&ledger, options.fr_indicator)?;
    Ok(ProtocolRun {
        report: ExperimentReport {
            protocol: protocol.clone(),
            steps,
            fr: fr.fr,
            fr_indicator: options.fr_indicator,
            fr_skipped_zero_first: fr.skipped_zero_first,
            ledger,
        },
        state,
        logs,
    })
}
