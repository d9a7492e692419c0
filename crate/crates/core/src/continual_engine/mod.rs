//! Class-incremental training: task schedules, query initialisation,
//! freezing and the per-step loop.

mod checkpoint;
mod protocol;
mod state;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::numerics::{pca, Matrix};
use crate::prompts::SimilarityMode;
use crate::seeding;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use protocol::{run_protocol, ExperimentReport, ProtocolRun, RunOptions, StepReport};
pub use state::{ContinualState, IterationLog, QuerySegment, QuerySet};

/// Categories introduced at each step: `n_ini` first, then `n_inc` per step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIncrementalProtocol {
    pub n_ini: usize,
    pub n_inc: usize,
    pub steps: usize,
    pub class_sets: Vec<Vec<usize>>,
}

impl ClassIncrementalProtocol {
    /// Consecutive category ids: `{0..n_ini}`, then `n_inc` at a time.
    pub fn new(n_ini: usize, n_inc: usize, steps: usize) -> Result<Self> {
        if n_ini == 0 || steps == 0 || (steps > 1 && n_inc == 0) {
            return Err(Error::Config(format!(
                "protocol {n_ini}-{n_inc} with {steps} steps has an empty task"
            )));
        }
        let mut class_sets = vec![(0..n_ini).collect::<Vec<_>>()];
        for t in 1..steps {
            let start = n_ini + (t - 1) * n_inc;
            class_sets.push((start..start + n_inc).collect());
        }
        Ok(Self {
            n_ini,
            n_inc,
            steps,
            class_sets,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.class_sets.iter().map(Vec::len).sum()
    }

    /// Categories of all steps before `t`, in learning order.
    pub fn seen_before(&self, t: usize) -> Vec<usize> {
        self.class_sets[..t].concat()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_sets.len() != self.steps || self.steps == 0 {
            return Err(Error::Config("class_sets must hold one list per step".into()));
        }
        for (t, set) in self.class_sets.iter().enumerate() {
            let want = if t == 0 { self.n_ini } else { self.n_inc };
            if set.len() != want || set.is_empty() {
                return Err(Error::Config(format!(
                    "step {t} has {} classes, expected {want}",
                    set.len()
                )));
            }
        }
        let mut all = self.class_sets.concat();
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("class sets overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Pca,
    #[value(name = "replicate_average")]
    ReplicateAverage,
}

/// Which parameters incremental steps may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Old queries, prompts, class columns and the decoder body stay frozen.
    #[default]
    PromptTuning,
    /// Everything is trained at every step (the forgetting-prone baseline).
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations_per_step: usize,
    pub batch_size: usize,
    /// Cap on the global gradient norm of one step; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub init_strategy: InitStrategy,
    pub similarity: SimilarityMode,
    pub regime: Regime,
    pub use_arsp: bool,
    pub use_isc: bool,
    pub use_ic: bool,
    pub no_object_weight: f64,
    /// Base queries per step-0 category.
    pub queries_per_category: usize,
    pub num_layers: usize,
    pub ffn_dim: usize,
    pub prompt_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.3,
            iterations_per_step: 300,
            batch_size: 8,
            grad_clip: 5.0,
            seed: 0,
            weights: LossWeights::default(),
            init_strategy: InitStrategy::Pca,
            similarity: SimilarityMode::Frobenius,
            regime: Regime::PromptTuning,
            use_arsp: true,
            use_isc: true,
            use_ic: true,
            no_object_weight: 0.1,
            queries_per_category: 5,
            num_layers: 2,
            ffn_dim: 32,
            prompt_scale: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("prompt_scale", self.prompt_scale)?;
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be finite and >= 0".into()));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("queries_per_category", self.queries_per_category),
            ("num_layers", self.num_layers),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.no_object_weight.is_finite() && self.no_object_weight > 0.0) {
            return Err(Error::Config("no_object_weight must be positive".into()));
        }
        let w = self.weights;
        if !(w.lambda_isc.is_finite() && w.lambda_isc >= 0.0 && w.lambda_ic.is_finite() && w.lambda_ic >= 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Initial queries for a new task from the principal directions of the old
/// queries, rescaled so their norms live on the old queries' scale.
///
/// The top `c_t` of `c_prev` components (by norm) are kept. When `c_t`
/// exceeds `c_prev`, the extra rows are seeded unit perturbations of the top
/// direction scaled to the old mean norm.
pub fn pca_guided_init(q_old: &Matrix, c_prev: usize, c_t: usize, seed: u64) -> Result<Matrix> {
    let (n, d) = q_old.shape();
    if n < 2 {
        return Err(Error::Parameter(format!(
            "pca_guided_init needs >= 2 old queries, got {n}"
        )));
    }
    if c_prev == 0 || c_prev > n.min(d) {
        return Err(Error::Parameter(format!(
            "pca_guided_init: c_prev = {c_prev} must lie in 1..={}",
            n.min(d)
        )));
    }
    let comps = pca(q_old, c_prev)?.components;
    let norms = comps.row_norms();
    let a_ori = q_old.row_norms().iter().sum::<f64>() / n as f64;
    let a_pca = norms.iter().sum::<f64>() / c_prev as f64;
    if a_pca < 1e-12 {
        return Err(Error::DegenerateInput(format!(
            "old queries have no variance (mean component norm {a_pca:e})"
        )));
    }
    let mut order: Vec<usize> = (0..c_prev).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let take = c_t.min(c_prev);
    let ratio = a_ori / a_pca;
    let mut out = comps.select_rows(&order[..take])?.scale(ratio);
    if c_t > c_prev {
        let top = comps.row(order[0]);
        let top_norm = crate::numerics::norm(top);
        let mut rng = seeding::rng(seed, "pca-augment");
        let mut extra = Matrix::zeros(c_t - c_prev, d);
        for r in 0..extra.rows() {
            let g: Vec<f64> = (0..d).map(|_| seeding::gaussian(&mut rng)).collect();
            let g_norm = crate::numerics::norm(&g);
            let v: Vec<f64> = top.iter().zip(&g).map(|(t, g)| t / top_norm + g / g_norm).collect();
            let v_norm = crate::numerics::norm(&v);
            for (o, x) in extra.row_mut(r).iter_mut().zip(&v) {
                *o = a_ori * x / v_norm;
            }
        }
        out = Matrix::vstack(&[&out, &extra])?;
    }
    Ok(out)
}

/// `c_t` copies of the mean old query.
pub fn replicate_average_init(q_old: &Matrix, c_t: usize) -> Result<Matrix> {
    if q_old.rows() == 0 {
        return Err(Error::Parameter(
            "replicate_average_init needs at least one old query".into(),
        ));
    }
    let mean = q_old.column_means();
    let mut out = Matrix::zeros(c_t, q_old.cols());
    for r in 0..c_t {
        out.row_mut(r).copy_from_slice(&mean);
    }
    Ok(out)
}
