use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{pca_guided_init, replicate_average_init, ClassIncrementalProtocol, InitStrategy, Regime, TrainConfig};
use crate::decoder::{self, DecoderParam, DecoderStack, Mode, PromptInput};
use crate::error::{Error, Result};
use crate::losses::{
    self, hungarian_match, ic_loss_on, isc_loss_on, matching_cost, reference_gram, seg_loss_on, Assignment,
    InstanceTarget, LossReport,
};
use crate::numerics::{Matrix, Tape, Var};
use crate::prompts::{self, PromptGenerator, PromptPool};
use crate::seeding;
use crate::synthbench::{category_name, Prediction, SyntheticVideo};

/// Rows of the query matrix owned by one task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySegment {
    pub task: usize,
    pub start: usize,
    pub len: usize,
    pub frozen: bool,
}

impl QuerySegment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// All object queries, partitioned by task, plus the step-start snapshot
/// used as the correlation reference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub matrix: Matrix,
    pub segments: Vec<QuerySegment>,
    pub snapshot: Matrix,
}

impl QuerySet {
    pub fn empty(d: usize) -> Self {
        Self {
            matrix: Matrix::zeros(0, d),
            segments: Vec::new(),
            snapshot: Matrix::zeros(0, d),
        }
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append(&mut self, task: usize, rows: &Matrix) -> Result<()> {
        let start = self.len();
        self.matrix = Matrix::vstack(&[&self.matrix, rows])?;
        self.segments.push(QuerySegment {
            task,
            start,
            len: rows.rows(),
            frozen: false,
        });
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != next || s.task != i {
                return Err(Error::Contract(
                    "query segments must partition rows in task order".into(),
                ));
            }
            next += s.len;
        }
        if next != self.len() {
            return Err(Error::Contract("query segments do not cover the query matrix".into()));
        }
        if self.snapshot.shape() != self.matrix.shape() {
            return Err(Error::Contract(
                "query snapshot shape differs from the query matrix".into(),
            ));
        }
        Ok(())
    }
}

/// Losses of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub step: usize,
    pub iteration: usize,
    pub seg: f64,
    pub isc: f64,
    pub ic: f64,
    pub ic_aux: Vec<f64>,
    pub total: f64,
}

/// Everything a continual run learns.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinualState {
    pub protocol: ClassIncrementalProtocol,
    pub decoder: DecoderStack,
    pub queries: QuerySet,
    pub pools: Vec<PromptPool>,
    pub generator: PromptGenerator,
    pub prompt_scale: f64,
    /// Category id of each class-head column (no-object excluded).
    pub class_order: Vec<usize>,
    /// Step begun most recently.
    pub step: Option<usize>,
}

impl ContinualState {
    /// Fresh model for a protocol over `d`-dimensional features.
    pub fn new(protocol: ClassIncrementalProtocol, d: usize, config: &TrainConfig) -> Result<Self> {
        protocol.validate()?;
        config.validate()?;
        let decoder = DecoderStack::init(
            seeding::sub_seed(config.seed, "init"),
            d,
            config.ffn_dim,
            config.num_layers,
        )?;
        Ok(Self {
            protocol,
            decoder,
            queries: QuerySet::empty(d),
            pools: Vec::new(),
            generator: PromptGenerator::new(seeding::sub_seed(config.seed, "prompts"), d, config.prompt_scale),
            prompt_scale: config.prompt_scale,
            class_order: Vec::new(),
            step: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.decoder.dim()
    }

    /// Starts step `t`: freezes earlier tasks, adds and initialises this
    /// task's queries, prompt pool and class columns, and snapshots the queries.
    pub fn begin_step(&mut self, t: usize, config: &TrainConfig) -> Result<()> {
        if t >= self.protocol.steps {
            return Err(Error::Parameter(format!(
                "step {t} out of range for {} steps",
                self.protocol.steps
            )));
        }
        let expected = self.step.map_or(0, |s| s + 1);
        if t != expected {
            return Err(Error::Contract(format!(
                "begin_step({t}) called, next step is {expected}"
            )));
        }
        let classes = self.protocol.class_sets[t].clone();
        let d = self.dim();
        for s in &mut self.queries.segments {
            s.frozen = true;
        }
        for p in &mut self.pools {
            p.freeze();
        }
        let new_rows = if t == 0 {
            let n = config.queries_per_category * classes.len();
            let mut rng = seeding::rng(config.seed, "queries");
            seeding::gaussian_matrix(&mut rng, n, d, 1.0 / (d as f64).sqrt())
        } else {
            let old = &self.queries.matrix;
            match config.init_strategy {
                InitStrategy::Pca => pca_guided_init(
                    old,
                    self.class_order.len(),
                    classes.len(),
                    seeding::sub_seed(config.seed, &format!("pca-init-{t}")),
                )?,
                InitStrategy::ReplicateAverage => replicate_average_init(old, classes.len())?,
            }
        };
        self.queries.append(t, &new_rows)?;
        let names: Vec<String> = classes.iter().map(|c| category_name(*c)).collect();
        self.pools.push(PromptPool::new(t, names, &self.generator)?);
        self.decoder.widen_class_head(classes.len());
        self.class_order.extend(&classes);
        self.queries.snapshot = self.queries.matrix.clone();
        self.step = Some(t);
        Ok(())
    }

    /// Class-head column of a category, if it has been learned.
    pub fn column_of(&self, category: usize) -> Option<usize> {
        self.class_order.iter().position(|c| *c == category)
    }

    fn trainable(&self, key: DecoderParam, t: usize, regime: Regime) -> bool {
        match regime {
            Regime::Finetune => true,
            Regime::PromptTuning => t == 0 || key == DecoderParam::ClassBlock(t),
        }
    }

    /// Runs the configured number of SGD iterations of step `step()` on `train`.
    pub fn run_step(&mut self, train: &[SyntheticVideo], config: &TrainConfig) -> Result<Vec<IterationLog>> {
        let t = self
            .step
            .ok_or_else(|| Error::Contract("run_step before begin_step".into()))?;
        self.queries.validate()?;
        if config.iterations_per_step == 0 {
            return Ok(Vec::new());
        }
        if train.is_empty() {
            return Err(Error::Parameter(format!("step {t} has no training videos")));
        }
        let mut rng = seeding::rng(config.seed, &format!("batches-{t}"));
        let mut order: Vec<usize> = Vec::new();
        let mut logs = Vec::with_capacity(config.iterations_per_step);
        for iteration in 0..config.iterations_per_step {
            let mut batch = Vec::with_capacity(config.batch_size);
            while batch.len() < config.batch_size.min(train.len()) {
                if order.is_empty() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut rng);
                }
                batch.push(order.pop().expect("refilled above"));
            }
            let videos: Vec<&SyntheticVideo> = batch.iter().map(|&i| &train[i]).collect();
            let report = self.sgd_iteration(t, &videos, config).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "{msg} at step {t} iteration {iteration}, batch [{}]",
                    videos.iter().map(|v| v.id.as_str()).collect::<Vec<_>>().join(", ")
                )),
                other => other,
            })?;
            logs.push(IterationLog {
                step: t,
                iteration,
                seg: report.seg,
                isc: report.isc,
                ic: report.ic,
                ic_aux: report.ic_aux,
                total: report.total,
            });
        }
        Ok(logs)
    }

    fn sgd_iteration(&mut self, t: usize, videos: &[&SyntheticVideo], config: &TrainConfig) -> Result<LossReport> {
        let tape = Tape::new();
        let regime = config.regime;
        let bound = self.decoder.bind(&tape, |k| self.trainable(k, t, regime));

        let mut query_params = Vec::new();
        let mut parts = Vec::with_capacity(self.queries.segments.len());
        for (i, s) in self.queries.segments.iter().enumerate() {
            let rows = self.queries.matrix.slice_rows(s.range());
            if regime == Regime::Finetune || !s.frozen {
                let v = tape.param(rows);
                query_params.push((i, v));
                parts.push(v);
            } else {
                parts.push(tape.constant(rows));
            }
        }
        let queries = tape.vstack(&parts)?;

        let mut token_params = Vec::new();
        let mut prompt_parts = Vec::with_capacity(self.pools.len());
        for (i, pool) in self.pools.iter().enumerate() {
            if pool.trainable {
                let tokens = tape.param(pool.tokens.clone());
                token_params.push((i, tokens));
                prompt_parts.push(self.generator.generate_on(&tape, &pool.category_names, tokens)?);
            } else {
                prompt_parts.push(tape.constant(pool.prompts.clone()));
            }
        }
        let all_prompts = tape.vstack(&prompt_parts)?;
        let current_prompts = *prompt_parts.last().expect("begin_step adds a pool");

        let prompt_input = config.use_arsp.then_some(PromptInput {
            prompts: all_prompts,
            similarity: config.similarity,
        });
        // Step 0 has no earlier query space to preserve; its snapshot is the random init.
        let ref_gram = (config.use_ic && t > 0)
            .then(|| reference_gram(&self.queries.snapshot))
            .transpose()?;
        let inv_b = 1.0 / videos.len() as f64;
        let mut seg_terms = Vec::with_capacity(videos.len());
        let mut aux_terms: Vec<Vec<Var>> = vec![Vec::new(); self.decoder.layers.len()];
        for video in videos {
            let memory = tape.constant(video.feature_memory());
            let pixels: Vec<Var> = video.pixel_features.iter().map(|f| tape.constant(f.clone())).collect();
            let out = decoder::forward_on(&tape, &bound, queries, memory, &pixels, prompt_input)?;
            let all_targets = self.targets(video)?;
            let cost = matching_cost(
                &tape.value(out.class_logits),
                &tape.value(out.mask_logits),
                &all_targets,
            )?;
            if cost.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("matching cost for video {}", video.id)));
            }
            let (assignment, targets) = if regime == Regime::PromptTuning && t > 0 {
                let current = self.queries.segments[t].range().collect::<Vec<_>>();
                restricted_assignment(&cost, &current, all_targets)?
            } else {
                (hungarian_match(&cost)?, all_targets)
            };
            let (seg, _) = seg_loss_on(
                &tape,
                out.class_logits,
                out.mask_logits,
                &targets,
                &assignment,
                config.no_object_weight,
            )?;
            seg_terms.push(seg);
            if let Some(g) = &ref_gram {
                for (l, refined) in out.refined.iter().enumerate() {
                    aux_terms[l].push(ic_loss_on(&tape, *refined, g)?);
                }
            }
        }
        let mean_of = |terms: &[Var]| -> Result<Var> {
            let mut acc = terms[0];
            for v in &terms[1..] {
                acc = tape.add(acc, *v)?;
            }
            Ok(tape.scale(acc, inv_b))
        };
        let seg = mean_of(&seg_terms)?;
        let mut total = seg;
        let mut isc_value = 0.0;
        if config.use_isc {
            let seg_rows = self.queries.segments.last().expect("begin_step adds a segment").range();
            let q_t = tape.slice_rows(queries, seg_rows)?;
            let s = prompts::similarity_on(&tape, q_t, current_prompts, config.similarity)?;
            let assignments: Vec<usize> = (0..tape.shape(s).0)
                .map(|i| prompts::argmax(tape.value(s).row(i)))
                .collect();
            let isc = isc_loss_on(&tape, s, &assignments)?;
            isc_value = tape.scalar(isc);
            let weighted = tape.scale(isc, config.weights.lambda_isc);
            total = tape.add(total, weighted)?;
        }
        let (mut ic_value, mut aux_values) = (0.0, Vec::new());
        if let Some(g) = &ref_gram {
            let ic = ic_loss_on(&tape, queries, g)?;
            ic_value = tape.scalar(ic);
            let mut ic_sum = ic;
            for terms in &aux_terms {
                let aux = mean_of(terms)?;
                aux_values.push(tape.scalar(aux));
                ic_sum = tape.add(ic_sum, aux)?;
            }
            let weighted = tape.scale(ic_sum, config.weights.lambda_ic);
            total = tape.add(total, weighted)?;
        }
        let total_value = tape.scalar(total);
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("loss {total_value}")));
        }
        let report = losses::total_loss(tape.scalar(seg), isc_value, ic_value, &aux_values, config.weights)?;

        let grads = tape.backward(total)?;
        let decoder_grads: Vec<(DecoderParam, &Matrix)> = self
            .decoder
            .param_keys()
            .into_iter()
            .filter(|&key| self.trainable(key, t, regime))
            .map(|key| (key, grads.get(bound.var(key)).expect("bound parameter has a gradient")))
            .collect();
        let query_grads: Vec<(usize, &Matrix)> = query_params
            .iter()
            .map(|&(i, v)| (i, grads.get(v).expect("query parameter has a gradient")))
            .collect();
        let token_grads: Vec<(usize, &Matrix)> = token_params
            .iter()
            .map(|&(i, v)| (i, grads.get(v).expect("token parameter has a gradient")))
            .collect();
        let sq_norm: f64 = decoder_grads
            .iter()
            .map(|(_, g)| g)
            .chain(query_grads.iter().map(|(_, g)| g))
            .chain(token_grads.iter().map(|(_, g)| g))
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        let norm = sq_norm.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm}")));
        }
        // Global-norm clipping: the step direction is kept, its length capped.
        let lr = if config.grad_clip > 0.0 && norm > config.grad_clip {
            config.learning_rate * config.grad_clip / norm
        } else {
            config.learning_rate
        };
        for (key, g) in decoder_grads {
            let p = self.decoder.param_mut(key);
            *p = p.sub(&g.scale(lr))?;
        }
        for (i, g) in query_grads {
            let range = self.queries.segments[i].range();
            for (r, row) in range.enumerate() {
                for (x, gx) in self.queries.matrix.row_mut(row).iter_mut().zip(g.row(r)) {
                    *x -= lr * gx;
                }
            }
        }
        for (i, g) in token_grads {
            let tokens = self.pools[i].tokens.sub(&g.scale(lr))?;
            self.pools[i].set_tokens(tokens, &self.generator)?;
        }
        Ok(report)
    }

    fn targets(&self, video: &SyntheticVideo) -> Result<Vec<InstanceTarget>> {
        video
            .instances
            .iter()
            .map(|inst| {
                let class_index = self.column_of(inst.category).ok_or_else(|| {
                    Error::Contract(format!("video {} has unlearned category {}", video.id, inst.category))
                })?;
                let mask = inst.masks.iter().flatten().map(|b| f64::from(u8::from(*b))).collect();
                Ok(InstanceTarget { class_index, mask })
            })
            .collect()
    }

    /// Inference-mode tracks for one video: one prediction per query, labelled
    /// with its most probable object class.
    pub fn predict(&self, video: &SyntheticVideo) -> Result<Vec<Prediction>> {
        let out = decoder::forward(
            &self.decoder,
            &self.queries.matrix,
            &video.pixel_features,
            None,
            Default::default(),
            Mode::Infer,
        )?;
        let probs = out.class_logits.softmax_rows();
        let k = self.class_order.len();
        Ok((0..probs.rows())
            .map(|q| {
                let row = &probs.row(q)[..k];
                let best = prompts::argmax(row);
                Prediction {
                    video_id: video.id.clone(),
                    category: self.class_order[best],
                    confidence: row[best],
                    masks: out
                        .mask_logits
                        .iter()
                        .map(|m| m.row(q).iter().map(|x| *x > 0.0).collect())
                        .collect(),
                }
            })
            .collect())
    }
}

/// Matches targets only to the `candidates` queries; every other query is
/// left unmatched. With fewer candidates than targets, the targets that fit
/// best are kept and the rest are dropped from the loss.
fn restricted_assignment(
    cost: &Matrix,
    candidates: &[usize],
    targets: Vec<InstanceTarget>,
) -> Result<(Assignment, Vec<InstanceTarget>)> {
    let sub = cost.select_rows(candidates)?;
    let (pairs, kept): (Vec<(usize, usize)>, Vec<usize>) = if candidates.len() >= targets.len() {
        let a = hungarian_match(&sub)?;
        (
            a.pairs.iter().map(|&(q, t)| (candidates[q], t)).collect(),
            (0..targets.len()).collect(),
        )
    } else {
        // Targets become the rows: each candidate query picks one target.
        let a = hungarian_match(&sub.transpose())?;
        let mut chosen: Vec<(usize, usize)> = a.pairs.iter().map(|&(t, q)| (t, candidates[q])).collect();
        chosen.sort_unstable();
        let kept: Vec<usize> = chosen.iter().map(|p| p.0).collect();
        (chosen.iter().enumerate().map(|(i, &(_, q))| (q, i)).collect(), kept)
    };
    let mut used = vec![false; cost.rows()];
    for &(q, _) in &pairs {
        used[q] = true;
    }
    let assignment = Assignment {
        pairs,
        unmatched_queries: (0..cost.rows()).filter(|q| !used[*q]).collect(),
    };
    let mut slots: Vec<Option<InstanceTarget>> = targets.into_iter().map(Some).collect();
    let kept = kept.into_iter().map(|i| slots[i].take().expect("kept once")).collect();
    Ok((assignment, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{generate_dataset, GeneratorConfig};

    fn setup() -> (ContinualState, TrainConfig, Vec<SyntheticVideo>) {
        let protocol = ClassIncrementalProtocol::new(4, 2, 3).unwrap();
        let config = TrainConfig {
            iterations_per_step: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let gen = GeneratorConfig {
            videos_per_category: 3,
            feature_dim: 8,
            ..GeneratorConfig::default()
        };
        let (train, _) = generate_dataset(&gen, &protocol.class_sets[0]).unwrap();
        (ContinualState::new(protocol, 8, &config).unwrap(), config, train)
    }

    #[test]
    fn begin_step_allocates_and_snapshots() {
        let (mut s, config, _) = setup();
        assert!(s.begin_step(1, &config).is_err());
        s.begin_step(0, &config).unwrap();
        assert_eq!(s.queries.len(), 20);
        s.begin_step(1, &config).unwrap();
        assert_eq!(s.queries.len(), 22);
        assert!(s.queries.segments[0].frozen && !s.queries.segments[1].frozen);
        assert!(!s.pools[0].trainable && s.pools[1].trainable);
        assert_eq!(s.decoder.num_categories(), 6);
        assert_eq!(s.queries.snapshot, s.queries.matrix);
        assert!(s.begin_step(3, &config).is_err());
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let (mut s, mut config, train) = setup();
        s.begin_step(0, &config).unwrap();
        let before = s.clone();
        config.iterations_per_step = 0;
        assert!(s.run_step(&train, &config).unwrap().is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn training_is_deterministic_and_moves_parameters() {
        let (mut a, config, train) = setup();
        a.begin_step(0, &config).unwrap();
        let mut b = a.clone();
        let la = a.run_step(&train, &config).unwrap();
        let lb = b.run_step(&train, &config).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_ne!(a.queries.matrix, a.queries.snapshot);
        assert!(la.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn predictions_cover_every_query() {
        let (mut s, config, train) = setup();
        s.begin_step(0, &config).unwrap();
        let p = s.predict(&train[0]).unwrap();
        assert_eq!(p.len(), 20);
        assert!(p.iter().all(|p| p.category < 4 && p.masks.len() == 2));
    }
}
