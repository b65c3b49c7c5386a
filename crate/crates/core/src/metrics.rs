//! Segmentation evaluation: MAE, PR/F-measure curves, S-measure and
//! E-measure, plus directory-level aggregation and CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{list_files, read_gray, IMAGE_EXTS};
use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// Machine epsilon, the stabilizer used by the structure and alignment terms.
pub const EPS: f64 = f64::EPSILON;

/// A prediction in `[0, 1]` and a binary ground truth of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pred: Vec<f64>,
    gt: Vec<f64>,
    h: usize,
    w: usize,
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        ref s => Err(Error::contract(format!("expected a single plane, got {s:?}"))),
    }
}

impl EvalPair {
    pub fn new(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        let (h, w) = plane(pred)?;
        if plane(gt)? != (h, w) {
            return Err(Error::contract(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.shape(),
                gt.shape()
            )));
        }
        if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("prediction value {v} outside [0, 1]")));
        }
        if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("ground truth value {v} is not binary")));
        }
        Ok(EvalPair {
            pred: pred.data().to_vec(),
            gt: gt.data().to_vec(),
            h,
            w,
        })
    }

    /// Min-max normalizes `pred` when it leaves `[0, 1]` and binarizes `gt` at 0.5.
    pub fn normalized(pred: &Tensor, gt: &Tensor) -> Result<Self> {
        let (lo, hi) = pred
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let pred = if lo < 0.0 || hi > 1.0 {
            let span = hi - lo;
            pred.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        } else {
            pred.clone()
        };
        let gt = gt.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        Self::new(&pred, &gt)
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn gt(&self) -> &[f64] {
        &self.gt
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn len(&self) -> usize {
        self.pred.len()
    }

    fn gt_count(&self) -> usize {
        self.gt.iter().filter(|&&g| g == 1.0).count()
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_beta_squared() -> f64 {
    0.3
}
fn default_thresholds() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta_squared")]
    pub beta_squared: f64,
    /// Thresholds are `k / (n − 1)` for `k = 0..n`.
    #[serde(default = "default_thresholds")]
    pub thresholds: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            alpha: default_alpha(),
            beta_squared: default_beta_squared(),
            thresholds: default_thresholds(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("metrics.alpha", "must lie in [0, 1]"));
        }
        if !(self.beta_squared > 0.0) {
            return Err(Error::config("metrics.beta_squared", "must be positive"));
        }
        if self.thresholds < 2 {
            return Err(Error::config("metrics.thresholds", "need at least two thresholds"));
        }
        Ok(())
    }

    pub fn threshold_values(&self) -> Vec<f64> {
        let top = (self.thresholds - 1) as f64;
        (0..self.thresholds).map(|k| k as f64 / top).collect()
    }
}

pub fn mae(pair: &EvalPair) -> f64 {
    pair.pred.iter().zip(&pair.gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pair.len() as f64
}

/// Per-threshold confusion counts for `M = pred ≥ τ`.
#[derive(Clone, Debug, PartialEq)]
struct Counts {
    /// `|M|` per threshold.
    selected: Vec<usize>,
    /// `|M ∩ G|` per threshold.
    hits: Vec<usize>,
}

/// Index of the largest threshold not above `p`.
fn bin(p: f64, taus: &[f64]) -> usize {
    taus.partition_point(|&t| t <= p).saturating_sub(1)
}

fn counts(pair: &EvalPair, taus: &[f64]) -> Counts {
    let n = taus.len();
    let mut sel_hist = vec![0usize; n];
    let mut hit_hist = vec![0usize; n];
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        if p < taus[0] {
            continue;
        }
        let k = bin(p, taus);
        sel_hist[k] += 1;
        if g == 1.0 {
            hit_hist[k] += 1;
        }
    }
    // cumulative from the top: a pixel in bin k is selected by every τ_j with j ≤ k
    let mut selected = vec![0; n];
    let mut hits = vec![0; n];
    let (mut s, mut h) = (0, 0);
    for k in (0..n).rev() {
        s += sel_hist[k];
        h += hit_hist[k];
        selected[k] = s;
        hits[k] = h;
    }
    Counts { selected, hits }
}

/// Precision/recall per threshold. `empty_gt` marks pairs whose recall is undefined
/// (reported as 0); such pairs are left out of curve aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub empty_gt: bool,
}

/// An empty binarization counts as precision 1.
pub fn pr_curve(pair: &EvalPair, config: &MetricConfig) -> PrCurve {
    let c = counts(pair, &config.threshold_values());
    let g = pair.gt_count();
    let precision = c
        .selected
        .iter()
        .zip(&c.hits)
        .map(|(&m, &tp)| if m == 0 { 1.0 } else { tp as f64 / m as f64 })
        .collect();
    let recall = c.hits.iter().map(|&tp| if g == 0 { 0.0 } else { tp as f64 / g as f64 }).collect();
    PrCurve {
        precision,
        recall,
        empty_gt: g == 0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FMeasure {
    pub curve: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

pub fn f_beta(precision: f64, recall: f64, beta_squared: f64) -> f64 {
    let den = beta_squared * precision + recall;
    if den <= 0.0 {
        0.0
    } else {
        (1.0 + beta_squared) * precision / den * recall
    }
}

fn f_from_pr(pr: &PrCurve, beta_squared: f64) -> FMeasure {
    let curve: Vec<f64> = pr.precision.iter().zip(&pr.recall).map(|(&p, &r)| f_beta(p, r, beta_squared)).collect();
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    let max = curve.iter().copied().fold(0.0, f64::max);
    FMeasure { curve, mean, max }
}

pub fn f_measure(pair: &EvalPair, config: &MetricConfig) -> FMeasure {
    f_from_pr(&pr_curve(pair, config), config.beta_squared)
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn s_object(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sigma) = mean_std(values);
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn object_score(pair: &EvalPair) -> f64 {
    let u = pair.gt_count() as f64 / pair.len() as f64;
    let pg = || pair.pred.iter().zip(&pair.gt);
    let fg = pg().filter(|(_, &g)| g == 1.0).map(|(&p, _)| p);
    let bg = pg().filter(|(_, &g)| g == 0.0).map(|(&p, _)| 1.0 - p);
    u * s_object(fg) + (1.0 - u) * s_object(bg)
}

/// SSIM-style similarity of one rectangular block `[y0, y1) × [x0, x1)`.
fn block_ssim(pair: &EvalPair, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> f64 {
    let w = pair.w;
    let n = (y1 - y0) * (x1 - x0);
    let idx = || (y0..y1).flat_map(move |y| (x0..x1).map(move |x| y * w + x));
    let x = idx().map(|i| pair.pred[i]).sum::<f64>() / n as f64;
    let y = idx().map(|i| pair.gt[i]).sum::<f64>() / n as f64;
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for i in idx() {
            let (dp, dg) = (pair.pred[i] - x, pair.gt[i] - y);
            sx += dp * dp;
            sy += dg * dg;
            sxy += dp * dg;
        }
        let d = (n - 1) as f64;
        (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point after the ground-truth centroid (rounded half to even), in `1..=len`.
fn centroid_split(pair: &EvalPair) -> (usize, usize) {
    let (h, w) = (pair.h, pair.w);
    let n = pair.gt_count();
    if n == 0 {
        return ((h as f64 / 2.0).round_ties_even() as usize + 1, (w as f64 / 2.0).round_ties_even() as usize + 1);
    }
    let (mut sy, mut sx) = (0.0, 0.0);
    for (i, _) in pair.gt.iter().enumerate().filter(|(_, &g)| g == 1.0) {
        sy += (i / w) as f64;
        sx += (i % w) as f64;
    }
    let cy = (sy / n as f64).round_ties_even() as usize + 1;
    let cx = (sx / n as f64).round_ties_even() as usize + 1;
    (cy.min(h), cx.min(w))
}

fn region_score(pair: &EvalPair) -> f64 {
    let (h, w) = (pair.h, pair.w);
    let (cy, cx) = centroid_split(pair);
    let area = (h * w) as f64;
    let mut score = 0.0;
    for ys in [(0, cy), (cy, h)] {
        for xs in [(0, cx), (cx, w)] {
            let weight = ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64 / area;
            if weight > 0.0 {
                score += weight * block_ssim(pair, ys, xs);
            }
        }
    }
    score
}

/// Structure measure `α·S_o + (1 − α)·S_r`, clipped at 0.
pub fn s_measure(pair: &EvalPair, config: &MetricConfig) -> f64 {
    let y = pair.gt_count() as f64 / pair.len() as f64;
    let mean_pred = pair.pred.iter().sum::<f64>() / pair.len() as f64;
    if y == 0.0 {
        1.0 - mean_pred
    } else if y == 1.0 {
        mean_pred
    } else {
        (config.alpha * object_score(pair) + (1.0 - config.alpha) * region_score(pair)).max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EMeasure {
    pub curve: Vec<f64>,
    pub mean: f64,
}

fn enhanced(a: f64, b: f64) -> f64 {
    let align = 2.0 * a * b / (a * a + b * b + EPS);
    (align + 1.0) * (align + 1.0) / 4.0
}

/// Enhanced alignment of a binarized prediction with `selected` foreground
/// pixels of which `hits` overlap a ground truth of `g` pixels out of `n`.
fn e_from_counts(selected: usize, hits: usize, g: usize, n: usize) -> f64 {
    let nf = n as f64;
    if g == 0 {
        return (n - selected) as f64 / nf;
    }
    if g == n {
        return selected as f64 / nf;
    }
    let mp = selected as f64 / nf;
    let mg = g as f64 / nf;
    let fg_fg = hits as f64;
    let fg_bg = (selected - hits) as f64;
    let bg_fg = (g - hits) as f64;
    let bg_bg = nf - fg_fg - fg_bg - bg_fg;
    let sum = fg_fg * enhanced(1.0 - mp, 1.0 - mg)
        + fg_bg * enhanced(1.0 - mp, -mg)
        + bg_fg * enhanced(-mp, 1.0 - mg)
        + bg_bg * enhanced(-mp, -mg);
    sum / nf
}

pub fn e_measure(pair: &EvalPair, config: &MetricConfig) -> EMeasure {
    let c = counts(pair, &config.threshold_values());
    let (g, n) = (pair.gt_count(), pair.len());
    let curve: Vec<f64> = c.selected.iter().zip(&c.hits).map(|(&s, &h)| e_from_counts(s, h, g, n)).collect();
    let mean = curve.iter().sum::<f64>() / curve.len() as f64;
    EMeasure { curve, mean }
}

/// Dice at threshold 0.5; two empty masks score 1.
pub fn dice(pair: &EvalPair) -> f64 {
    let (inter, p, g) = overlap(pair);
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// IoU at threshold 0.5; two empty masks score 1.
pub fn iou(pair: &EvalPair) -> f64 {
    let (inter, p, g) = overlap(pair);
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn overlap(pair: &EvalPair) -> (usize, usize, usize) {
    let mut out = (0, 0, 0);
    for (&p, &g) in pair.pred.iter().zip(&pair.gt) {
        let pb = p >= 0.5;
        let gb = g == 1.0;
        out.0 += (pb && gb) as usize;
        out.1 += pb as usize;
        out.2 += gb as usize;
    }
    out
}

pub fn mean_dice(pairs: &[EvalPair]) -> f64 {
    pairs.iter().map(dice).sum::<f64>() / pairs.len().max(1) as f64
}

pub fn mean_iou(pairs: &[EvalPair]) -> f64 {
    pairs.iter().map(iou).sum::<f64>() / pairs.len().max(1) as f64
}

/// Every metric of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub s_alpha: f64,
    pub e: EMeasure,
    pub pr: PrCurve,
    pub f: FMeasure,
    pub mae: f64,
}

pub fn evaluate_pair(pair: &EvalPair, config: &MetricConfig) -> PairMetrics {
    let pr = pr_curve(pair, config);
    let f = f_from_pr(&pr, config.beta_squared);
    PairMetrics {
        s_alpha: s_measure(pair, config),
        e: e_measure(pair, config),
        pr,
        f,
        mae: mae(pair),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub stem: String,
    pub s_alpha: f64,
    pub e_phi_mean: f64,
    pub f_beta_mean: f64,
    pub f_beta_max: f64,
    pub mae: f64,
    pub empty_gt: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub s_alpha: f64,
    pub e_phi_mean: f64,
    pub f_beta_mean: f64,
    pub f_beta_max: f64,
    pub mae: f64,
    pub thresholds: Vec<f64>,
    pub pr_curve: Vec<(f64, f64)>,
    pub f_curve: Vec<f64>,
    pub e_curve: Vec<f64>,
    /// Maximum of the pointwise-mean F curve.
    pub f_beta_max_of_mean_curve: f64,
    pub per_image: Vec<ImageMetrics>,
    /// Stems present in only one of the two directories.
    pub missing: Vec<String>,
    /// Precision assigned when a threshold selects no pixel.
    pub empty_selection_precision: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn mean_curves<'a>(curves: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> Vec<f64> {
    (0..len).map(|k| mean_of(curves.clone().map(|c| c[k]))).collect()
}

impl MetricReport {
    /// Aggregates per-pair results in the given (stem) order. Pairs with an
    /// empty ground truth still count towards S, E and MAE but are left out
    /// of the PR/F curves and F scalars.
    pub fn from_pairs(items: &[(String, PairMetrics)], missing: Vec<String>, config: &MetricConfig) -> Self {
        let n = config.thresholds;
        let scored = || items.iter().filter(|(_, m)| !m.pr.empty_gt);
        let precision = mean_curves(scored().map(|(_, m)| m.pr.precision.as_slice()), n);
        let recall = mean_curves(scored().map(|(_, m)| m.pr.recall.as_slice()), n);
        let f_curve = mean_curves(scored().map(|(_, m)| m.f.curve.as_slice()), n);
        let e_curve = mean_curves(items.iter().map(|(_, m)| m.e.curve.as_slice()), n);
        let per_image = items
            .iter()
            .map(|(stem, m)| ImageMetrics {
                stem: stem.clone(),
                s_alpha: m.s_alpha,
                e_phi_mean: m.e.mean,
                f_beta_mean: m.f.mean,
                f_beta_max: m.f.max,
                mae: m.mae,
                empty_gt: m.pr.empty_gt,
            })
            .collect::<Vec<_>>();
        MetricReport {
            s_alpha: mean_of(per_image.iter().map(|r| r.s_alpha)),
            e_phi_mean: mean_of(per_image.iter().map(|r| r.e_phi_mean)),
            f_beta_mean: mean_of(per_image.iter().filter(|r| !r.empty_gt).map(|r| r.f_beta_mean)),
            f_beta_max: mean_of(per_image.iter().filter(|r| !r.empty_gt).map(|r| r.f_beta_max)),
            mae: mean_of(per_image.iter().map(|r| r.mae)),
            thresholds: config.threshold_values(),
            pr_curve: precision.into_iter().zip(recall).collect(),
            f_beta_max_of_mean_curve: f_curve.iter().copied().fold(0.0, f64::max),
            f_curve,
            e_curve,
            per_image,
            missing,
            empty_selection_precision: 1.0,
        }
    }

    /// Per-image rows followed by a `mean` row, six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stem,s_alpha,e_phi_mean,f_beta_mean,f_beta_max,mae\n");
        let row = |s: &mut String, stem: &str, v: [f64; 5]| {
            let _ = writeln!(s, "{stem},{:.6},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3], v[4]);
        };
        for r in &self.per_image {
            row(&mut s, &r.stem, [r.s_alpha, r.e_phi_mean, r.f_beta_mean, r.f_beta_max, r.mae]);
        }
        row(&mut s, "mean", self.aggregate());
        s
    }

    pub fn aggregate(&self) -> [f64; 5] {
        [self.s_alpha, self.e_phi_mean, self.f_beta_mean, self.f_beta_max, self.mae]
    }

    /// One row per threshold.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f_beta,e_phi\n");
        for (k, &t) in self.thresholds.iter().enumerate() {
            let (p, r) = self.pr_curve[k];
            let _ = writeln!(s, "{t:.6},{p:.6},{r:.6},{:.6},{:.6}", self.f_curve[k], self.e_curve[k]);
        }
        s
    }

    /// Writes `metrics.csv`, `curves.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        for (name, body) in [("metrics.csv", self.to_csv()), ("curves.csv", self.curves_csv()), ("report.json", json)] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Scores every prediction in `pred_dir` against the same-stem mask in
/// `gt_dir`, at ground-truth resolution.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, config: &MetricConfig) -> Result<MetricReport> {
    config.validate()?;
    let preds = list_files(pred_dir, IMAGE_EXTS)?;
    let gts = list_files(gt_dir, IMAGE_EXTS)?;
    let mut missing = Vec::new();
    for (stem, _) in &preds {
        if gts.binary_search_by(|(s, _)| s.cmp(stem)).is_err() {
            log::warn!("prediction {stem} has no ground truth; skipped");
            missing.push(stem.clone());
        }
    }
    let mut items = Vec::new();
    for (stem, gt_path) in &gts {
        let Ok(i) = preds.binary_search_by(|(s, _)| s.cmp(stem)) else {
            log::warn!("ground truth {stem} has no prediction; skipped");
            missing.push(stem.clone());
            continue;
        };
        let gt = read_gray(gt_path)?;
        let mut pred = read_gray(&preds[i].1)?;
        let (_, _, h, w) = gt.dims4();
        if pred.shape() != gt.shape() {
            pred = resize_bilinear(&pred, h, w);
        }
        let pair = EvalPair::normalized(&pred, &gt)?;
        items.push((stem.clone(), evaluate_pair(&pair, config)));
    }
    missing.sort();
    if items.is_empty() {
        return Err(Error::NoPairs(pred_dir.to_path_buf()));
    }
    Ok(MetricReport::from_pairs(&items, missing, config))
}
