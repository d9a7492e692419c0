//! A small query-based decoder with prompt-injected self-attention.
//!
//! Each layer runs cross-attention from the queries to the frame features,
//! then self-attention among the queries in which matched prompts are added
//! to the projected values during training, then a feed-forward block. All
//! three sub-blocks are residual. Heads turn the final queries into class
//! logits (no-object last) and per-frame mask logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::prompts::{match_queries, SimilarityMode};
use crate::seeding;

/// Parameters of one decoder layer. Attention is single-head with `d_k = d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub cross_q: Matrix,
    pub cross_k: Matrix,
    pub cross_v: Matrix,
    pub cross_o: Matrix,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

pub const LAYER_PARAMS: [&str; 12] = [
    "cross_q", "cross_k", "cross_v", "cross_o", "w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
];

impl DecoderLayer {
    pub fn init(rng: &mut seeding::Rng, d: usize, d_ff: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut g = |r: usize, c: usize, s: f64| seeding::gaussian_matrix(rng, r, c, s);
        Self {
            cross_q: g(d, d, std),
            cross_k: g(d, d, std),
            cross_v: g(d, d, std),
            cross_o: g(d, d, 0.5 * std),
            w_q: g(d, d, std),
            w_k: g(d, d, std),
            w_v: g(d, d, std),
            w_o: g(d, d, 0.5 * std),
            ffn_w1: g(d, d_ff, std),
            ffn_b1: Matrix::zeros(1, d_ff),
            ffn_w2: g(d_ff, d, 0.5 / (d_ff as f64).sqrt()),
            ffn_b2: Matrix::zeros(1, d),
        }
    }

    /// All-zero layer of the given size (a placeholder to load values into).
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        let z = |r, c| Matrix::zeros(r, c);
        Self {
            cross_q: z(d, d),
            cross_k: z(d, d),
            cross_v: z(d, d),
            cross_o: z(d, d),
            w_q: z(d, d),
            w_k: z(d, d),
            w_v: z(d, d),
            w_o: z(d, d),
            ffn_w1: z(d, d_ff),
            ffn_b1: z(1, d_ff),
            ffn_w2: z(d_ff, d),
            ffn_b2: z(1, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        Some(match name {
            "cross_q" => &self.cross_q,
            "cross_k" => &self.cross_k,
            "cross_v" => &self.cross_v,
            "cross_o" => &self.cross_o,
            "w_q" => &self.w_q,
            "w_k" => &self.w_k,
            "w_v" => &self.w_v,
            "w_o" => &self.w_o,
            "ffn_w1" => &self.ffn_w1,
            "ffn_b1" => &self.ffn_b1,
            "ffn_w2" => &self.ffn_w2,
            "ffn_b2" => &self.ffn_b2,
            _ => return None,
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        Some(match name {
            "cross_q" => &mut self.cross_q,
            "cross_k" => &mut self.cross_k,
            "cross_v" => &mut self.cross_v,
            "cross_o" => &mut self.cross_o,
            "w_q" => &mut self.w_q,
            "w_k" => &mut self.w_k,
            "w_v" => &mut self.w_v,
            "w_o" => &mut self.w_o,
            "ffn_w1" => &mut self.ffn_w1,
            "ffn_b1" => &mut self.ffn_b1,
            "ffn_w2" => &mut self.ffn_w2,
            "ffn_b2" => &mut self.ffn_b2,
            _ => return None,
        })
    }
}

/// Identifies one parameter matrix of a [`DecoderStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderParam {
    Layer(usize, &'static str),
    /// Class-head columns added at the given task.
    ClassBlock(usize),
    NoObject,
    MaskEmbed,
}

/// Class head stored as per-task column blocks plus the no-object column.
/// Logit columns are laid out task by task with no-object last.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub class_blocks: Vec<Matrix>,
    pub no_object: Matrix,
    pub mask_embed: Matrix,
}

impl DecoderStack {
    pub fn init(seed: u64, d: usize, d_ff: usize, num_layers: usize) -> Result<Self> {
        if num_layers == 0 || d == 0 {
            return Err(Error::Parameter("decoder needs d > 0 and at least one layer".into()));
        }
        let mut rng = seeding::rng(seed, "decoder-init");
        let layers = (0..num_layers).map(|_| DecoderLayer::init(&mut rng, d, d_ff)).collect();
        let mask_embed = seeding::gaussian_matrix(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        Ok(Self {
            layers,
            class_blocks: Vec::new(),
            no_object: Matrix::zeros(d, 1),
            mask_embed,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask_embed.rows()
    }

    pub fn num_categories(&self) -> usize {
        self.class_blocks.iter().map(Matrix::cols).sum()
    }

    /// Widens the class head with `count` zero-initialized columns for a new task.
    pub fn widen_class_head(&mut self, count: usize) {
        self.class_blocks.push(Matrix::zeros(self.dim(), count));
    }

    pub fn param_keys(&self) -> Vec<DecoderParam> {
        let mut keys = Vec::new();
        for l in 0..self.layers.len() {
            keys.extend(LAYER_PARAMS.iter().map(|n| DecoderParam::Layer(l, n)));
        }
        keys.extend((0..self.class_blocks.len()).map(DecoderParam::ClassBlock));
        keys.push(DecoderParam::NoObject);
        keys.push(DecoderParam::MaskEmbed);
        keys
    }

    pub fn param(&self, key: DecoderParam) -> &Matrix {
        match key {
            DecoderParam::Layer(l, n) => self.layers[l].get(n).expect("known layer parameter"),
            DecoderParam::ClassBlock(t) => &self.class_blocks[t],
            DecoderParam::NoObject => &self.no_object,
            DecoderParam::MaskEmbed => &self.mask_embed,
        }
    }

    pub fn param_mut(&mut self, key: DecoderParam) -> &mut Matrix {
        match key {
            DecoderParam::Layer(l, n) => self.layers[l].get_mut(n).expect("known layer parameter"),
            DecoderParam::ClassBlock(t) => &mut self.class_blocks[t],
            DecoderParam::NoObject => &mut self.no_object,
            DecoderParam::MaskEmbed => &mut self.mask_embed,
        }
    }

    /// Puts every parameter on `tape`, as a differentiable leaf when
    /// `trainable(key)` holds and as a constant otherwise.
    pub fn bind(&self, tape: &Tape, trainable: impl Fn(DecoderParam) -> bool) -> BoundDecoder {
        let put = |key: DecoderParam| {
            let m = self.param(key).clone();
            if trainable(key) {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        };
        let layers = (0..self.layers.len())
            .map(|l| LayerVars {
                cross_q: put(DecoderParam::Layer(l, "cross_q")),
                cross_k: put(DecoderParam::Layer(l, "cross_k")),
                cross_v: put(DecoderParam::Layer(l, "cross_v")),
                cross_o: put(DecoderParam::Layer(l, "cross_o")),
                w_q: put(DecoderParam::Layer(l, "w_q")),
                w_k: put(DecoderParam::Layer(l, "w_k")),
                w_v: put(DecoderParam::Layer(l, "w_v")),
                w_o: put(DecoderParam::Layer(l, "w_o")),
                ffn_w1: put(DecoderParam::Layer(l, "ffn_w1")),
                ffn_b1: put(DecoderParam::Layer(l, "ffn_b1")),
                ffn_w2: put(DecoderParam::Layer(l, "ffn_w2")),
                ffn_b2: put(DecoderParam::Layer(l, "ffn_b2")),
            })
            .collect();
        let class_blocks = (0..self.class_blocks.len())
            .map(|t| put(DecoderParam::ClassBlock(t)))
            .collect();
        let no_object = put(DecoderParam::NoObject);
        let mask_embed = put(DecoderParam::MaskEmbed);
        BoundDecoder {
            layers,
            class_blocks,
            no_object,
            mask_embed,
        }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> BoundDecoder {
        self.bind(tape, |_| false)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub cross_q: Var,
    pub cross_k: Var,
    pub cross_v: Var,
    pub cross_o: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Tape handles of a [`DecoderStack`]'s parameters.
#[derive(Debug, Clone)]
pub struct BoundDecoder {
    pub layers: Vec<LayerVars>,
    pub class_blocks: Vec<Var>,
    pub no_object: Var,
    pub mask_embed: Var,
}

impl BoundDecoder {
    pub fn var(&self, key: DecoderParam) -> Var {
        match key {
            DecoderParam::Layer(l, n) => {
                let v = &self.layers[l];
                match n {
                    "cross_q" => v.cross_q,
                    "cross_k" => v.cross_k,
                    "cross_v" => v.cross_v,
                    "cross_o" => v.cross_o,
                    "w_q" => v.w_q,
                    "w_k" => v.w_k,
                    "w_v" => v.w_v,
                    "w_o" => v.w_o,
                    "ffn_w1" => v.ffn_w1,
                    "ffn_b1" => v.ffn_b1,
                    "ffn_w2" => v.ffn_w2,
                    _ => v.ffn_b2,
                }
            }
            DecoderParam::ClassBlock(t) => self.class_blocks[t],
            DecoderParam::NoObject => self.no_object,
            DecoderParam::MaskEmbed => self.mask_embed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

/// Scaled dot-product attention weights `softmax(q kᵀ / √d_k)`.
pub fn attention_weights(tape: &Tape, q: Var, k: Var) -> Result<Var> {
    let d_k = tape.shape(q).1 as f64;
    let logits = tape.matmul_t(q, k)?;
    let scaled = tape.scale(logits, 1.0 / d_k.sqrt());
    Ok(tape.softmax_rows(scaled))
}

/// Self-attention with prompts added to the projected values, before the
/// output projection: `softmax(QKᵀ/√d)(V + P_m)`. `None` means no injection.
pub fn injected_attention_core(
    tape: &Tape,
    layer: &LayerVars,
    input: Var,
    matched_prompts: Option<Var>,
) -> Result<Var> {
    if let Some(p) = matched_prompts {
        let (sp, si) = (tape.shape(p), tape.shape(input));
        if sp != si {
            return Err(Error::shape("injected_self_attention", si, sp));
        }
    }
    let q = tape.matmul(input, layer.w_q)?;
    let k = tape.matmul(input, layer.w_k)?;
    let v = tape.matmul(input, layer.w_v)?;
    let weights = attention_weights(tape, q, k)?;
    let values = match matched_prompts {
        Some(p) => tape.add(v, p)?,
        None => v,
    };
    tape.matmul(weights, values)
}

/// Prompt-injected self-attention followed by the output projection and residual.
pub fn injected_self_attention(
    tape: &Tape,
    layer: &LayerVars,
    input: Var,
    matched_prompts: Option<Var>,
) -> Result<Var> {
    let core = injected_attention_core(tape, layer, input, matched_prompts)?;
    let projected = tape.matmul(core, layer.w_o)?;
    tape.add(input, projected)
}

/// Single-head cross-attention from queries to feature tokens, with residual.
pub fn cross_attention(tape: &Tape, layer: &LayerVars, input: Var, features: Var) -> Result<Var> {
    let (si, sf) = (tape.shape(input), tape.shape(features));
    if si.1 != sf.1 {
        return Err(Error::shape("cross_attention", si, sf));
    }
    let q = tape.matmul(input, layer.cross_q)?;
    let k = tape.matmul(features, layer.cross_k)?;
    let v = tape.matmul(features, layer.cross_v)?;
    let weights = attention_weights(tape, q, k)?;
    let attended = tape.matmul(weights, v)?;
    let projected = tape.matmul(attended, layer.cross_o)?;
    tape.add(input, projected)
}

pub fn feed_forward(tape: &Tape, layer: &LayerVars, input: Var) -> Result<Var> {
    let h = tape.matmul(input, layer.ffn_w1)?;
    let h = tape.add_row(h, layer.ffn_b1)?;
    let h = tape.silu(h);
    let out = tape.matmul(h, layer.ffn_w2)?;
    let out = tape.add_row(out, layer.ffn_b2)?;
    tape.add(input, out)
}

/// Prompt source for training-mode forward passes.
#[derive(Debug, Clone, Copy)]
pub struct PromptInput {
    /// All prompts seen so far, stacked task by task.
    pub prompts: Var,
    pub similarity: SimilarityMode,
}

/// Tape handles produced by [`forward_on`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Output of every layer, first to last.
    pub refined: Vec<Var>,
    pub class_logits: Var,
    /// N×(F·H·W): frame masks laid side by side.
    pub mask_logits: Var,
    /// Prompt index chosen for each query at each layer (empty without injection).
    pub assignments: Vec<Vec<usize>>,
}

/// Runs the decoder on the tape.
///
/// `features` is the cross-attention memory (all frames' tokens stacked) and
/// `pixel_features` holds one (H·W)×d matrix per frame. Prompts are injected
/// only when `prompts` is given, i.e. in training mode.
pub fn forward_on(
    tape: &Tape,
    stack: &BoundDecoder,
    queries: Var,
    features: Var,
    pixel_features: &[Var],
    prompts: Option<PromptInput>,
) -> Result<ForwardVars> {
    if pixel_features.is_empty() {
        return Err(Error::Parameter("forward needs at least one frame".into()));
    }
    let mut x = queries;
    let mut refined = Vec::with_capacity(stack.layers.len());
    let mut assignments = Vec::new();
    for layer in &stack.layers {
        x = cross_attention(tape, layer, x, features)?;
        let matched = match prompts {
            Some(input) => {
                let m = match_queries(&tape.value(x), &tape.value(input.prompts), input.similarity)?;
                let gathered = tape.gather_rows(input.prompts, &m.assignments)?;
                assignments.push(m.assignments);
                Some(gathered)
            }
            None => None,
        };
        x = injected_self_attention(tape, layer, x, matched)?;
        x = feed_forward(tape, layer, x)?;
        refined.push(x);
    }
    let mut head_parts = stack.class_blocks.clone();
    head_parts.push(stack.no_object);
    let head = tape.hstack(&head_parts)?;
    let class_logits = tape.matmul(x, head)?;
    let embed = tape.matmul(x, stack.mask_embed)?;
    let per_frame = pixel_features
        .iter()
        .map(|pf| tape.matmul_t(embed, *pf))
        .collect::<Result<Vec<_>>>()?;
    let mask_logits = if per_frame.len() == 1 {
        per_frame[0]
    } else {
        tape.hstack(&per_frame)?
    };
    Ok(ForwardVars {
        refined,
        class_logits,
        mask_logits,
        assignments,
    })
}

/// Plain-value decoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub refined_queries: Vec<Matrix>,
    pub class_logits: Matrix,
    /// One N×(H·W) matrix per frame.
    pub mask_logits: Vec<Matrix>,
}

/// Value-level forward pass. `prompts` is the stacked prompt matrix and is
/// ignored in [`Mode::Infer`].
pub fn forward(
    stack: &DecoderStack,
    queries: &Matrix,
    frames: &[Matrix],
    prompts: Option<&Matrix>,
    similarity: SimilarityMode,
    mode: Mode,
) -> Result<ForwardOutput> {
    let tape = Tape::new();
    let bound = stack.bind_frozen(&tape);
    let q = tape.constant(queries.clone());
    let frame_refs: Vec<&Matrix> = frames.iter().collect();
    let memory = tape.constant(Matrix::vstack(&frame_refs)?);
    let pixel: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
    let prompt_input = match (mode, prompts) {
        (Mode::Train, Some(p)) => Some(PromptInput {
            prompts: tape.constant(p.clone()),
            similarity,
        }),
        _ => None,
    };
    let out = forward_on(&tape, &bound, q, memory, &pixel, prompt_input)?;
    let masks = tape.value(out.mask_logits);
    let hw = frames[0].rows();
    let mask_logits = (0..frames.len())
        .map(|f| {
            let mut m = Matrix::zeros(masks.rows(), hw);
            for r in 0..masks.rows() {
                m.row_mut(r).copy_from_slice(&masks.row(r)[f * hw..(f + 1) * hw]);
            }
            m
        })
        .collect();
    Ok(ForwardOutput {
        refined_queries: out.refined.iter().map(|v| (*tape.value(*v)).clone()).collect(),
        class_logits: (*tape.value(out.class_logits)).clone(),
        mask_logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_stack(d: usize, layers: usize) -> DecoderStack {
        let mut s = DecoderStack::init(9, d, 2 * d, layers).unwrap();
        s.widen_class_head(2);
        s
    }

    #[test]
    fn single_key_attention_returns_value_plus_prompt() {
        let stack = small_stack(3, 1);
        let tape = Tape::new();
        let b = stack.bind_frozen(&tape);
        let x = tape.constant(Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap());
        let p = tape.constant(Matrix::from_rows(&[[0.5, 0.25, -0.125]]).unwrap());
        let out = injected_attention_core(&tape, &b.layers[0], x, Some(p)).unwrap();
        let v = tape.value(x).matmul(&stack.layers[0].w_v).unwrap();
        let expected = v.add(&tape.value(p)).unwrap();
        assert_eq!(*tape.value(out), expected);
    }

    #[test]
    fn zero_injection_matches_plain_attention() {
        let stack = small_stack(4, 1);
        let tape = Tape::new();
        let b = stack.bind_frozen(&tape);
        let mut rng = seeding::rng(1, "t");
        let x = tape.constant(seeding::gaussian_matrix(&mut rng, 5, 4, 1.0));
        let zero = tape.constant(Matrix::zeros(5, 4));
        let a = injected_self_attention(&tape, &b.layers[0], x, None).unwrap();
        let z = injected_self_attention(&tape, &b.layers[0], x, Some(zero)).unwrap();
        assert_eq!(*tape.value(a), *tape.value(z));
    }

    #[test]
    fn prompt_shape_mismatch_is_rejected() {
        let stack = small_stack(3, 1);
        let tape = Tape::new();
        let b = stack.bind_frozen(&tape);
        let x = tape.constant(Matrix::zeros(2, 3));
        let p = tape.constant(Matrix::zeros(1, 3));
        assert!(injected_self_attention(&tape, &b.layers[0], x, Some(p)).is_err());
    }

    #[test]
    fn single_feature_token_gives_every_query_the_same_update() {
        let stack = small_stack(3, 1);
        let tape = Tape::new();
        let b = stack.bind_frozen(&tape);
        let xm = Matrix::from_rows(&[[1.0, 0.0, -1.0], [0.5, 2.0, 0.25]]).unwrap();
        let x = tape.constant(xm.clone());
        let f = tape.constant(Matrix::from_rows(&[[0.2, -0.4, 1.0]]).unwrap());
        let out = tape.value(cross_attention(&tape, &b.layers[0], x, f).unwrap());
        let delta = out.sub(&xm).unwrap();
        for c in 0..3 {
            assert!((delta.get(0, c) - delta.get(1, c)).abs() < 1e-12);
        }

        let zeros = tape.constant(Matrix::zeros(4, 3));
        let out = tape.value(cross_attention(&tape, &b.layers[0], x, zeros).unwrap());
        assert_eq!(*out, xm);
    }

    #[test]
    fn class_head_widens_with_zero_columns() {
        let mut s = small_stack(4, 2);
        s.widen_class_head(3);
        assert_eq!(s.num_categories(), 5);
        assert_eq!(s.class_blocks[1], Matrix::zeros(4, 3));
        let frames = vec![Matrix::filled(6, 4, 0.1)];
        let q = Matrix::filled(2, 4, 0.5);
        let out = forward(&s, &q, &frames, None, SimilarityMode::Frobenius, Mode::Infer).unwrap();
        assert_eq!(out.class_logits.shape(), (2, 6));
        assert_eq!(out.refined_queries.len(), 2);
        assert_eq!(out.mask_logits[0].shape(), (2, 6));
    }
}
