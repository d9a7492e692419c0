//! Training objectives: semantic consistency, instance correlation, the
//! set-prediction segmentation loss and their weighted total.

mod hungarian;

pub use hungarian::{hungarian_match, Assignment};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gram_matrix, sigmoid, softplus, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_isc: f64,
    pub lambda_ic: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_isc: 3.0,
            lambda_ic: 3.0,
        }
    }
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub seg: f64,
    pub isc: f64,
    pub ic: f64,
    /// Per-decoder-layer auxiliary correlation losses.
    pub ic_aux: Vec<f64>,
    pub total: f64,
}

/// Fills in `total = seg + λ_isc·isc + λ_ic·(ic + Σ ic_aux)`.
pub fn total_loss(seg: f64, isc: f64, ic: f64, ic_aux: &[f64], weights: LossWeights) -> Result<LossReport> {
    let named = [("seg", seg), ("isc", isc), ("ic", ic)];
    for (name, v) in named.iter().copied().chain(ic_aux.iter().map(|v| ("ic_aux", *v))) {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Contract(format!(
                "loss component {name} = {v} must be finite and >= 0"
            )));
        }
    }
    let aux = ic_aux.iter().fold(0.0, |s, v| s + v);
    Ok(LossReport {
        seg,
        isc,
        ic,
        ic_aux: ic_aux.to_vec(),
        total: seg + weights.lambda_isc * isc + weights.lambda_ic * (ic + aux),
    })
}

fn check_assignments(s: (usize, usize), assignments: &[usize]) -> Result<()> {
    if assignments.len() != s.0 {
        return Err(Error::Contract(format!(
            "isc_loss: {} assignments for {} rows",
            assignments.len(),
            s.0
        )));
    }
    if let Some(bad) = assignments.iter().find(|&&a| a >= s.1) {
        return Err(Error::Contract(format!(
            "isc_loss: assignment {bad} out of {} columns",
            s.1
        )));
    }
    Ok(())
}

/// `(1/N) Σᵢ log(1 + Σ_{j≠aᵢ} exp(S_ij) / exp(S_{i,aᵢ}))`.
///
/// The log term equals `logsumexp(Sᵢ) − S_{i,aᵢ}`, which is how it is evaluated.
pub fn isc_loss(s: &Matrix, assignments: &[usize]) -> Result<f64> {
    check_assignments(s.shape(), assignments)?;
    if s.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        let row = s.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().fold(0.0, |acc, x| acc + (x - max).exp()).ln();
        total += lse - row[a];
    }
    Ok(total / s.rows() as f64)
}

/// Differentiable form of [`isc_loss`].
pub fn isc_loss_on(tape: &Tape, s: Var, assignments: &[usize]) -> Result<Var> {
    let shape = tape.shape(s);
    check_assignments(shape, assignments)?;
    let n = shape.0.max(1) as f64;
    let ls = tape.log_softmax_rows(s);
    let picks: Vec<(usize, usize, f64)> = assignments.iter().enumerate().map(|(i, &a)| (i, a, -1.0 / n)).collect();
    tape.pick_sum(ls, &picks)
}

/// Mean squared difference between the Gram matrices of the row-normalized inputs.
pub fn ic_loss(q: &Matrix, reference: &Matrix) -> Result<f64> {
    if q.rows() != reference.rows() {
        return Err(Error::shape("ic_loss", q.shape(), reference.shape()));
    }
    let g = gram_matrix(&q.row_normalize()?);
    let g0 = gram_matrix(&reference.row_normalize()?);
    let n = g.data().len().max(1) as f64;
    let sq = g
        .data()
        .iter()
        .zip(g0.data())
        .fold(0.0, |s, (a, b)| s + (a - b) * (a - b));
    Ok(sq / n)
}

/// Gram matrix of the row-normalized reference, the fixed target of [`ic_loss_on`].
pub fn reference_gram(reference: &Matrix) -> Result<Matrix> {
    Ok(gram_matrix(&reference.row_normalize()?))
}

/// Differentiable form of [`ic_loss`]; the reference enters only through its Gram matrix.
pub fn ic_loss_on(tape: &Tape, q: Var, reference_gram: &Matrix) -> Result<Var> {
    let n = tape.shape(q).0;
    if reference_gram.shape() != (n, n) {
        return Err(Error::shape("ic_loss", tape.shape(q), reference_gram.shape()));
    }
    let qn = tape.row_normalize(q)?;
    let g = tape.matmul_t(qn, qn)?;
    let g0 = tape.constant(reference_gram.clone());
    let diff = tape.sub(g, g0)?;
    let sq = tape.square(diff);
    Ok(tape.mean(sq))
}

/// Dice loss `1 − 2Σpy / (Σp + Σy)` on probabilities; empty against empty scores 0.
pub fn dice_loss(probs: &[f64], target: &[f64]) -> f64 {
    let inter = probs.iter().zip(target).fold(0.0, |s, (p, y)| s + p * y);
    let denom = probs.iter().fold(0.0, |s, p| s + p) + target.iter().fold(0.0, |s, y| s + y);
    if denom == 0.0 {
        0.0
    } else {
        1.0 - 2.0 * inter / denom
    }
}

/// Mean binary cross-entropy of logits against {0, 1} targets.
pub fn bce_with_logits(logits: &[f64], target: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(target)
        .fold(0.0, |s, (x, y)| s + softplus(*x) - x * y)
        / n
}

/// Ground truth for one instance: its class column and its binary mask over
/// all frames, concatenated frame after frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTarget {
    pub class_index: usize,
    pub mask: Vec<f64>,
}

/// Matching cost between every query and every target: negative class
/// probability plus mask BCE plus mask dice.
pub fn matching_cost(class_logits: &Matrix, mask_logits: &Matrix, targets: &[InstanceTarget]) -> Result<Matrix> {
    let n = class_logits.rows();
    if mask_logits.rows() != n {
        return Err(Error::shape("matching_cost", class_logits.shape(), mask_logits.shape()));
    }
    let probs = class_logits.softmax_rows();
    let mut cost = Matrix::zeros(n, targets.len());
    for (t, target) in targets.iter().enumerate() {
        check_target(target, class_logits.cols(), mask_logits.cols())?;
        for q in 0..n {
            let logits = mask_logits.row(q);
            let p: Vec<f64> = logits.iter().map(|x| sigmoid(*x)).collect();
            let c =
                -probs.get(q, target.class_index) + bce_with_logits(logits, &target.mask) + dice_loss(&p, &target.mask);
            cost.set(q, t, c);
        }
    }
    Ok(cost)
}

fn check_target(target: &InstanceTarget, classes: usize, pixels: usize) -> Result<()> {
    // The last class column is the no-object slot.
    if target.class_index + 1 >= classes {
        return Err(Error::Contract(format!(
            "target class {} outside {} object classes",
            target.class_index,
            classes - 1
        )));
    }
    if target.mask.len() != pixels {
        return Err(Error::Contract(format!(
            "target mask has {} pixels, predictions have {pixels}",
            target.mask.len()
        )));
    }
    Ok(())
}

/// Component values of one segmentation loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegParts {
    pub class_ce: f64,
    pub mask_bce: f64,
    pub mask_dice: f64,
}

/// Set-prediction segmentation loss on the tape.
///
/// `class_logits` is N×(K+1) with the no-object class last; `mask_logits` is
/// N×P over all frames. Classification is a weighted cross-entropy where
/// unmatched queries target no-object at weight `no_object_weight`; mask BCE
/// and dice are averaged over matched instances.
pub fn seg_loss_on(
    tape: &Tape,
    class_logits: Var,
    mask_logits: Var,
    targets: &[InstanceTarget],
    assignment: &Assignment,
    no_object_weight: f64,
) -> Result<(Var, SegParts)> {
    let (n, classes) = tape.shape(class_logits);
    let pixels = tape.shape(mask_logits).1;
    for t in targets {
        check_target(t, classes, pixels)?;
    }
    if assignment.pairs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "assignment covers {} of {} targets",
            assignment.pairs.len(),
            targets.len()
        )));
    }
    let no_object = classes - 1;
    let matched = assignment.target_of(n);
    let mut picks = Vec::with_capacity(n);
    let mut weight_sum = 0.0;
    for (q, t) in matched.iter().enumerate() {
        let (class, w) = match t {
            Some(t) => (targets[*t].class_index, 1.0),
            None => (no_object, no_object_weight),
        };
        picks.push((q, class, w));
        weight_sum += w;
    }
    let picks: Vec<_> = picks.into_iter().map(|(q, c, w)| (q, c, -w / weight_sum)).collect();
    let ls = tape.log_softmax_rows(class_logits);
    let ce = tape.pick_sum(ls, &picks)?;
    let mut parts = SegParts {
        class_ce: tape.scalar(ce),
        ..SegParts::default()
    };
    if targets.is_empty() {
        return Ok((ce, parts));
    }

    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let mut target_data = Vec::with_capacity(rows.len() * pixels);
    for &(_, t) in &assignment.pairs {
        target_data.extend_from_slice(&targets[t].mask);
    }
    let y = tape.constant(Matrix::new(rows.len(), pixels, target_data)?);
    let x = tape.gather_rows(mask_logits, &rows)?;

    // BCE with logits: softplus(x) − x·y, averaged over instances and pixels.
    let sp = tape.softplus(x);
    let xy = tape.mul(x, y)?;
    let bce_terms = tape.sub(sp, xy)?;
    let bce = tape.mean(bce_terms);

    let p = tape.sigmoid(x);
    let ones = tape.constant(Matrix::filled(pixels, 1, 1.0));
    let py = tape.mul(p, y)?;
    let inter = tape.matmul(py, ones)?;
    let p_sum = tape.matmul(p, ones)?;
    let y_sum = tape.constant(Matrix::new(
        rows.len(),
        1,
        assignment
            .pairs
            .iter()
            .map(|&(_, t)| targets[t].mask.iter().fold(0.0, |s, v| s + v))
            .collect(),
    )?);
    let denom = tape.add(p_sum, y_sum)?;
    let ratio = tape.div(inter, denom)?;
    let dice_terms = tape.scale(ratio, -2.0);
    let dice_terms = tape.offset(dice_terms, 1.0);
    let dice = tape.mean(dice_terms);

    parts.mask_bce = tape.scalar(bce);
    parts.mask_dice = tape.scalar(dice);
    let mask = tape.add(bce, dice)?;
    Ok((tape.add(ce, mask)?, parts))
}

/// Matches predictions to targets and evaluates [`seg_loss_on`] as plain values.
pub fn seg_loss(
    class_logits: &Matrix,
    mask_logits: &Matrix,
    targets: &[InstanceTarget],
    no_object_weight: f64,
) -> Result<(f64, Assignment)> {
    let assignment = hungarian_match(&matching_cost(class_logits, mask_logits, targets)?)?;
    let tape = Tape::new();
    let c = tape.constant(class_logits.clone());
    let m = tape.constant(mask_logits.clone());
    let (loss, _) = seg_loss_on(&tape, c, m, targets, &assignment, no_object_weight)?;
    Ok((tape.scalar(loss), assignment))
}
