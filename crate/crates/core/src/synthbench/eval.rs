//! Video instance segmentation metrics, forgetting ratio and query diagnostics.

use std::borrow::Borrow;
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::SyntheticVideo;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// IoU thresholds 0.50, 0.55, …, 0.95 (built from integers so 0.6 is exact).
pub fn iou_thresholds() -> Vec<f64> {
    (50..=95).step_by(5).map(|k| k as f64 / 100.0).collect()
}

/// Spatio-temporal IoU: intersections and unions summed over frames.
/// Two empty tracks have IoU 0.
pub fn st_iou(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("st_iou", (a.len(), 0), (b.len(), 0)));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (fa, fb) in a.iter().zip(b) {
        if fa.len() != fb.len() {
            return Err(Error::shape("st_iou", (1, fa.len()), (1, fb.len())));
        }
        for (&x, &y) in fa.iter().zip(fb) {
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// One predicted track.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub video_id: String,
    pub category: usize,
    pub confidence: f64,
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP averaged over thresholds, for categories with ground truth.
    pub per_category_ap: BTreeMap<usize, f64>,
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

/// Per (category, video): predictions and ground-truth tracks plus their IoUs.
struct Cell<'a> {
    preds: Vec<&'a Prediction>,
    ious: Vec<Vec<f64>>,
}

/// Greedy matching of confidence-ordered predictions to ground truth:
/// each prediction claims the best still-free ground truth at IoU ≥ `tau`.
fn greedy_hits(ious: &[Vec<f64>], order: &[usize], n_gt: usize, tau: f64) -> Vec<bool> {
    let mut taken = vec![false; n_gt];
    order
        .iter()
        .map(|&p| {
            let mut best: Option<usize> = None;
            for g in 0..n_gt {
                if taken[g] || ious[p][g] < tau {
                    continue;
                }
                if best.is_none_or(|b| ious[p][g] > ious[p][b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// All-points interpolated AP from a hit sequence in rank order.
pub fn average_precision(hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
    }
    // Running maximum from the right gives interpolated precision.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    hits.iter()
        .zip(&precision)
        .filter(|(h, _)| **h)
        .map(|(_, p)| p)
        .sum::<f64>()
        / n_gt as f64
}

fn by_confidence(preds: &[&Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
    order
}

/// AP, AP50, AP75 and AR1/AR10 over the categories that have ground truth.
pub fn evaluate<V: Borrow<SyntheticVideo>>(predictions: &[Prediction], ground_truth: &[V]) -> Result<EvalReport> {
    if let Some(p) = predictions.iter().find(|p| !p.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("prediction confidence for {}", p.video_id)));
    }
    let videos: BTreeMap<&str, &SyntheticVideo> = ground_truth
        .iter()
        .map(|v| (v.borrow().id.as_str(), v.borrow()))
        .collect();
    let mut cells: BTreeMap<(usize, &str), Cell> = BTreeMap::new();
    let mut n_gt: BTreeMap<usize, usize> = BTreeMap::new();
    for v in ground_truth {
        for inst in &v.borrow().instances {
            *n_gt.entry(inst.category).or_default() += 1;
        }
    }
    for p in predictions {
        let v = videos
            .get(p.video_id.as_str())
            .ok_or_else(|| Error::Contract(format!("prediction for unknown video {}", p.video_id)))?;
        if p.masks.len() != v.frames {
            return Err(Error::shape("evaluate", (p.masks.len(), 0), (v.frames, 0)));
        }
        cells
            .entry((p.category, v.id.as_str()))
            .or_insert_with(|| Cell {
                preds: Vec::new(),
                ious: Vec::new(),
            })
            .preds
            .push(p);
    }
    for ((category, vid), cell) in cells.iter_mut() {
        let gts: Vec<_> = videos[vid]
            .instances
            .iter()
            .filter(|i| i.category == *category)
            .collect();
        cell.ious = cell
            .preds
            .iter()
            .map(|p| {
                gts.iter()
                    .map(|g| st_iou(&p.masks, &g.masks))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
    }

    let thresholds = iou_thresholds();
    let mut ap = BTreeMap::new();
    let mut ap_at = vec![Vec::new(); thresholds.len()];
    let (mut ar1, mut ar10) = (Vec::new(), Vec::new());
    for (&category, &total) in &n_gt {
        let mine: Vec<_> = cells
            .range((category, "")..(category + 1, ""))
            .map(|(_, c)| c)
            .collect();
        // Global ranking across videos for AP.
        let mut ranked: Vec<(f64, usize, usize)> = Vec::new();
        for (ci, c) in mine.iter().enumerate() {
            for (pi, p) in c.preds.iter().enumerate() {
                ranked.push((p.confidence, ci, pi));
            }
        }
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut per_tau = Vec::with_capacity(thresholds.len());
        let (mut r1, mut r10) = (0.0, 0.0);
        for (ti, &tau) in thresholds.iter().enumerate() {
            // Hits are decided per video, then merged into the global ranking.
            let mut hit_of: Vec<Vec<bool>> = Vec::with_capacity(mine.len());
            let (mut tp1, mut tp10) = (0usize, 0usize);
            for c in &mine {
                let n = c.ious.first().map_or(0, Vec::len);
                let order = by_confidence(&c.preds);
                let hits = greedy_hits(&c.ious, &order, n, tau);
                let mut by_pred = vec![false; c.preds.len()];
                for (&p, &h) in order.iter().zip(&hits) {
                    by_pred[p] = h;
                }
                hit_of.push(by_pred);
                for (k, top) in [(1, &mut tp1), (10, &mut tp10)] {
                    let order: Vec<usize> = order.iter().copied().take(k).collect();
                    *top += greedy_hits(&c.ious, &order, n, tau).iter().filter(|h| **h).count();
                }
            }
            let hits: Vec<bool> = ranked.iter().map(|&(_, ci, pi)| hit_of[ci][pi]).collect();
            let a = average_precision(&hits, total);
            ap_at[ti].push(a);
            per_tau.push(a);
            r1 += tp1 as f64 / total as f64;
            r10 += tp10 as f64 / total as f64;
        }
        ap.insert(category, mean(&per_tau));
        ar1.push(r1 / thresholds.len() as f64);
        ar10.push(r10 / thresholds.len() as f64);
    }
    let per_cat: Vec<f64> = ap.values().copied().collect();
    Ok(EvalReport {
        map: mean(&per_cat),
        ap50: mean(&ap_at[0]),
        ap75: mean(&ap_at[5]),
        ar1: mean(&ar1),
        ar10: mean(&ar10),
        per_category_ap: ap,
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Which indicator the forgetting ratio applies to `A_first − A_final`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FrIndicator {
    /// Count only drops in AP (the intended definition).
    #[default]
    Corrected,
    /// The raw indicator: fires on improvements, whose non-negative
    /// part is zero, so every term vanishes.
    Literal,
}

/// AP of every category when it was first learned and after the final step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForgettingLedger {
    pub num_steps: usize,
    /// category → (0-based step it was introduced at, AP right after that step).
    pub first: BTreeMap<usize, (usize, f64)>,
    pub last: BTreeMap<usize, f64>,
}

impl ForgettingLedger {
    pub fn new(num_steps: usize) -> Self {
        Self {
            num_steps,
            ..Self::default()
        }
    }

    pub fn record_first(&mut self, category: usize, step: usize, ap: f64) {
        self.first.insert(category, (step, ap));
    }

    pub fn record_last(&mut self, category: usize, ap: f64) {
        self.last.insert(category, ap);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgettingResult {
    pub fr: f64,
    /// Categories dropped because their first AP was zero.
    pub skipped_zero_first: usize,
}

/// Relative AP drop of earlier categories, weighted by how many later steps
/// each survived and averaged over all categories in the ledger.
pub fn forgetting_ratio(ledger: &ForgettingLedger, indicator: FrIndicator) -> Result<ForgettingResult> {
    let t_total = ledger.num_steps;
    if ledger.first.keys().ne(ledger.last.keys()) {
        return Err(Error::Contract(
            "forgetting ledger: first/last categories differ".into(),
        ));
    }
    if ledger.first.is_empty() {
        return Ok(ForgettingResult {
            fr: 0.0,
            skipped_zero_first: 0,
        });
    }
    let mut sum = 0.0;
    let mut skipped = 0;
    for (category, &(step, first)) in &ledger.first {
        if step >= t_total {
            return Err(Error::Contract(format!(
                "category {category} introduced at step {step} of {t_total}"
            )));
        }
        let last = ledger.last[category];
        if !(first.is_finite() && last.is_finite()) {
            return Err(Error::NonFinite(format!("AP of category {category}")));
        }
        // Categories of the final step have nothing to forget.
        if step + 1 == t_total {
            continue;
        }
        if first == 0.0 {
            skipped += 1;
            continue;
        }
        let diff = first - last;
        let term = match indicator {
            FrIndicator::Corrected if diff >= 0.0 => diff,
            FrIndicator::Literal if diff < 0.0 => diff.max(0.0),
            _ => 0.0,
        };
        sum += term / first / (t_total - 1 - step) as f64;
    }
    Ok(ForgettingResult {
        fr: sum / ledger.first.len() as f64,
        skipped_zero_first: skipped,
    })
}

/// Pearson correlation between every pair of query rows.
pub fn query_correlation(queries: &Matrix) -> Result<Matrix> {
    let (n, d) = queries.shape();
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = queries.row(i);
            let m = r.iter().sum::<f64>() / d as f64;
            r.iter().map(|x| x - m).collect()
        })
        .collect();
    let ss: Vec<f64> = centered.iter().map(|r| crate::numerics::dot(r, r)).collect();
    if let Some(row) = ss.iter().position(|s| *s < 1e-24) {
        return Err(Error::DegenerateRow {
            op: "query_correlation",
            row,
        });
    }
    let mut out = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            // sqrt(x·x) recovers |x| exactly, so identical rows give exactly 1.
            let c = (crate::numerics::dot(&centered[i], &centered[j]) / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            out.set(i, j, c);
            out.set(j, i, c);
        }
    }
    Ok(out)
}

/// Writes one CSV row per query: its label then its coordinates.
pub fn export_embeddings(queries: &Matrix, labels: &[String], path: &Path) -> Result<()> {
    if labels.len() != queries.rows() {
        return Err(Error::shape("export_embeddings", queries.shape(), (labels.len(), 0)));
    }
    let mut out = String::from("label");
    for k in 0..queries.cols() {
        out.push_str(&format!(",dim{k}"));
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        if label.contains([',', '"', '\n']) {
            out.push_str(&format!("\"{}\"", label.replace('"', "\"\"")));
        } else {
            out.push_str(label);
        }
        for x in queries.row(i) {
            out.push(',');
            out.push_str(&crate::numerics::format_f64(*x));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
