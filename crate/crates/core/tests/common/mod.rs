//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use crisp::decoder::{self, BoundDecoder, DecoderParam, DecoderStack, LayerVars, PromptInput};
use crisp::losses::{
    hungarian_match, ic_loss_on, isc_loss_on, matching_cost, reference_gram, seg_loss_on, InstanceTarget,
};
use crisp::numerics::{Tape, Var};
use crisp::prompts::{match_queries, similarity_on, PromptGenerator, SimilarityMode};
use crisp::synthbench::{Instance, Split, SyntheticVideo};
use crisp::{seeding, Matrix, Result};

pub fn random_matrix(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Matrix {
    seeding::gaussian_matrix(&mut seeding::rng(seed, name), rows, cols, std)
}

pub fn random_mask(seed: u64, name: &str, len: usize) -> Vec<f64> {
    let m = random_matrix(seed, name, 1, len, 1.0);
    let mut mask: Vec<f64> = m.data().iter().map(|x| f64::from(*x > 0.0)).collect();
    mask[0] = 1.0;
    mask
}

/// Puts `vars` (one per `stack.param_keys()` entry, in order) in place of the
/// stack's parameters.
pub fn bind_vars(stack: &DecoderStack, vars: &[Var]) -> BoundDecoder {
    let keys = stack.param_keys();
    assert_eq!(keys.len(), vars.len());
    let of = |key: DecoderParam| vars[keys.iter().position(|k| *k == key).expect("known key")];
    let layers = (0..stack.layers.len())
        .map(|l| LayerVars {
            cross_q: of(DecoderParam::Layer(l, "cross_q")),
            cross_k: of(DecoderParam::Layer(l, "cross_k")),
            cross_v: of(DecoderParam::Layer(l, "cross_v")),
            cross_o: of(DecoderParam::Layer(l, "cross_o")),
            w_q: of(DecoderParam::Layer(l, "w_q")),
            w_k: of(DecoderParam::Layer(l, "w_k")),
            w_v: of(DecoderParam::Layer(l, "w_v")),
            w_o: of(DecoderParam::Layer(l, "w_o")),
            ffn_w1: of(DecoderParam::Layer(l, "ffn_w1")),
            ffn_b1: of(DecoderParam::Layer(l, "ffn_b1")),
            ffn_w2: of(DecoderParam::Layer(l, "ffn_w2")),
            ffn_b2: of(DecoderParam::Layer(l, "ffn_b2")),
        })
        .collect();
    BoundDecoder {
        layers,
        class_blocks: (0..stack.class_blocks.len())
            .map(|t| of(DecoderParam::ClassBlock(t)))
            .collect(),
        no_object: of(DecoderParam::NoObject),
        mask_embed: of(DecoderParam::MaskEmbed),
    }
}

/// A small end-to-end problem: decoder, queries, prompt tokens, two frames
/// of pixel features and two instance targets.
pub struct EndToEnd {
    pub stack: DecoderStack,
    pub queries: Matrix,
    pub snapshot: Matrix,
    pub tokens: Matrix,
    pub names: Vec<String>,
    pub generator: PromptGenerator,
    pub frames: Vec<Matrix>,
    pub targets: Vec<InstanceTarget>,
}

impl EndToEnd {
    /// d = 4, N = 6 queries, L = 2 layers, 3 object classes, 2 frames of 3×3.
    pub fn new(seed: u64) -> Self {
        let (d, n, pixels) = (4, 6, 9);
        let mut stack = DecoderStack::init(seed, d, 2 * d, 2).unwrap();
        stack.widen_class_head(3);
        // Non-zero class columns so every parameter carries gradient signal.
        stack.class_blocks[0] = random_matrix(seed, "class", d, 3, 0.5);
        let queries = random_matrix(seed, "queries", n, d, 1.0);
        let snapshot = queries.add(&random_matrix(seed, "drift", n, d, 0.3)).unwrap();
        let names: Vec<String> = ["disc", "square", "ring"].iter().map(|s| s.to_string()).collect();
        let frames = (0..2)
            .map(|f| random_matrix(seed, &format!("frame-{f}"), pixels, d, 1.0))
            .collect();
        let targets = (0..2)
            .map(|i| InstanceTarget {
                class_index: i,
                mask: random_mask(seed, &format!("mask-{i}"), 2 * pixels),
            })
            .collect();
        Self {
            stack,
            queries,
            snapshot,
            tokens: random_matrix(seed, "tokens", 3, d, 0.2),
            names,
            generator: PromptGenerator::new(seed, d, 0.5),
            frames,
            targets,
        }
    }

    /// Parameters in the order [`EndToEnd::total_loss`] expects.
    pub fn params(&self) -> Vec<Matrix> {
        let mut p = vec![self.queries.clone(), self.tokens.clone()];
        p.extend(self.stack.param_keys().into_iter().map(|k| self.stack.param(k).clone()));
        p
    }

    /// `seg + 3·isc + 3·(ic + Σ aux)` with prompts injected.
    pub fn total_loss(&self, tape: &Tape, vars: &[Var]) -> Result<Var> {
        let (queries, tokens) = (vars[0], vars[1]);
        let bound = bind_vars(&self.stack, &vars[2..]);
        let prompts = self.generator.generate_on(tape, &self.names, tokens)?;
        let refs: Vec<&Matrix> = self.frames.iter().collect();
        let memory = tape.constant(Matrix::vstack(&refs)?);
        let pixels: Vec<Var> = self.frames.iter().map(|f| tape.constant(f.clone())).collect();
        let input = PromptInput {
            prompts,
            similarity: SimilarityMode::Frobenius,
        };
        let out = decoder::forward_on(tape, &bound, queries, memory, &pixels, Some(input))?;
        let cost = matching_cost(
            &tape.value(out.class_logits),
            &tape.value(out.mask_logits),
            &self.targets,
        )?;
        let assignment = hungarian_match(&cost)?;
        let (seg, _) = seg_loss_on(tape, out.class_logits, out.mask_logits, &self.targets, &assignment, 0.1)?;

        let m = match_queries(&tape.value(queries), &tape.value(prompts), SimilarityMode::Frobenius)?;
        let s = similarity_on(tape, queries, prompts, SimilarityMode::Frobenius)?;
        let isc = isc_loss_on(tape, s, &m.assignments)?;

        let gram = reference_gram(&self.snapshot)?;
        let mut ic = ic_loss_on(tape, queries, &gram)?;
        for refined in &out.refined {
            let aux = ic_loss_on(tape, *refined, &gram)?;
            ic = tape.add(ic, aux)?;
        }
        let weighted_isc = tape.scale(isc, 3.0);
        let weighted_ic = tape.scale(ic, 3.0);
        let total = tape.add(seg, weighted_isc)?;
        tape.add(total, weighted_ic)
    }
}

/// Eigenpairs of a symmetric matrix by power iteration with deflation,
/// largest first.
pub fn power_iteration_eigen(c: &Matrix, k: usize) -> Vec<(f64, Vec<f64>)> {
    let d = c.rows();
    let mut a = c.clone();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let mut v: Vec<f64> = (0..d).map(|j| 1.0 + ((i * 31 + j * 17) % 13) as f64 / 13.0).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..200_000 {
            let mut w = vec![0.0; d];
            for r in 0..d {
                w[r] = (0..d).map(|s| a.get(r, s) * v[s]).sum();
            }
            lambda = dot(&w, &v);
            normalize(&mut w);
            let delta: f64 = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            v = w;
            if delta < 1e-15 {
                break;
            }
        }
        for r in 0..d {
            for s in 0..d {
                a.set(r, s, a.get(r, s) - lambda * v[r] * v[s]);
            }
        }
        out.push((lambda, v));
    }
    out
}

/// Closed-form eigenpairs of a symmetric matrix of size 1, 2 or 3, largest first.
pub fn closed_form_eigen(c: &Matrix) -> Vec<(f64, Vec<f64>)> {
    let d = c.rows();
    let values: Vec<f64> = match d {
        1 => vec![c.get(0, 0)],
        2 => {
            let (a, b, e) = (c.get(0, 0), c.get(0, 1), c.get(1, 1));
            let mid = 0.5 * (a + e);
            let r = (0.25 * (a - e) * (a - e) + b * b).sqrt();
            vec![mid + r, mid - r]
        }
        3 => {
            // Trigonometric solution of the characteristic cubic.
            let q = (c.get(0, 0) + c.get(1, 1) + c.get(2, 2)) / 3.0;
            let off = c.get(0, 1).powi(2) + c.get(0, 2).powi(2) + c.get(1, 2).powi(2);
            let p2 = (0..3).map(|i| (c.get(i, i) - q).powi(2)).sum::<f64>() + 2.0 * off;
            let p = (p2 / 6.0).sqrt();
            let mut b = c.clone();
            for i in 0..3 {
                b.set(i, i, c.get(i, i) - q);
            }
            let b = b.scale(1.0 / p);
            let det = b.get(0, 0) * (b.get(1, 1) * b.get(2, 2) - b.get(1, 2) * b.get(2, 1))
                - b.get(0, 1) * (b.get(1, 0) * b.get(2, 2) - b.get(1, 2) * b.get(2, 0))
                + b.get(0, 2) * (b.get(1, 0) * b.get(2, 1) - b.get(1, 1) * b.get(2, 0));
            let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
            let l1 = q + 2.0 * p * phi.cos();
            let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            vec![l1, 3.0 * q - l1 - l3, l3]
        }
        _ => panic!("closed form only for d <= 3"),
    };
    values
        .into_iter()
        .map(|lambda| (lambda, null_vector(c, lambda)))
        .collect()
}

/// Unit vector spanning the null space of `c − λI` (assumed one-dimensional).
fn null_vector(c: &Matrix, lambda: f64) -> Vec<f64> {
    let d = c.rows();
    if d == 1 {
        return vec![1.0];
    }
    let row = |i: usize| -> Vec<f64> {
        (0..d)
            .map(|j| c.get(i, j) - if i == j { lambda } else { 0.0 })
            .collect()
    };
    let mut best = vec![0.0; d];
    let mut best_norm = -1.0;
    if d == 2 {
        for i in 0..2 {
            let r = row(i);
            let v = vec![-r[1], r[0]];
            let n = dot(&v, &v);
            if n > best_norm {
                best_norm = n;
                best = v;
            }
        }
    } else {
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            let (a, b) = (row(i), row(j));
            let v = vec![
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            let n = dot(&v, &v);
            if n > best_norm {
                best_norm = n;
                best = v;
            }
        }
    }
    normalize(&mut best);
    best
}

pub fn covariance(a: &Matrix) -> Matrix {
    let (n, d) = a.shape();
    let mean = a.column_means();
    let mut c = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let s: f64 = (0..n).map(|r| (a.get(r, i) - mean[i]) * (a.get(r, j) - mean[j])).sum();
            c.set(i, j, s / (n - 1) as f64);
        }
    }
    c
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    for x in v {
        *x /= n;
    }
}

/// Largest entry-wise difference between `a` and `±b`, taking the better sign.
pub fn sign_free_diff(a: &[f64], b: &[f64]) -> f64 {
    let plus = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let minus = a.iter().zip(b).map(|(x, y)| (x + y).abs()).fold(0.0, f64::max);
    plus.min(minus)
}

/// Ground-truth video with one frame and the given (category, mask) tracks.
pub fn gt_video(id: &str, width: usize, tracks: &[(usize, Vec<bool>)]) -> SyntheticVideo {
    SyntheticVideo {
        id: id.to_string(),
        split: Split::Val,
        frames: 1,
        height: 1,
        width,
        pixel_features: vec![Matrix::zeros(width, 1)],
        instances: tracks
            .iter()
            .enumerate()
            .map(|(track, (category, mask))| Instance {
                track,
                category: *category,
                masks: vec![mask.clone()],
            })
            .collect(),
    }
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// AP of one category from first principles: every prediction, in order of
/// decreasing confidence, takes the free ground truth of its video with the
/// highest IoU ≥ τ (lowest index on ties); AP is the area under the
/// precision envelope, summed over recall increments.
pub fn oracle_ap(preds: &[(String, f64, Vec<bool>)], gts: &[(String, Vec<bool>)], tau: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for (rank, &p) in order.iter().enumerate() {
        let (vid, _, mask) = &preds[p];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gvid, gmask)) in gts.iter().enumerate() {
            if taken[g] || gvid != vid {
                continue;
            }
            let v = iou(mask, gmask);
            if v >= tau && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..points.len() {
        let recall = points[k].0;
        if recall > prev_recall {
            let envelope = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}
