//! Unsupervised segmentation metrics over label videos.
//!
//! Predicted and ground-truth videos are integer label maps; label `0` (the
//! background label) is never treated as an instance. Predictions built from
//! slot masks use `slot + 1` as their label so every slot is a candidate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decoders::MaskSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMaskVideo {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub background: u32,
}

impl LabelMaskVideo {
    pub fn new(t: usize, h: usize, w: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != t * h * w {
            return Err(Error::shape("label video", t * h * w, labels.len()));
        }
        Ok(Self {
            t,
            h,
            w,
            labels,
            background: 0,
        })
    }

    /// Hard labels from soft slot masks: argmax over slots, plus one.
    pub fn from_mask_set(m: &MaskSet) -> Self {
        let labels = m.label_video().into_iter().map(|k| k as u32 + 1).collect();
        Self {
            t: m.t(),
            h: m.height(),
            w: m.width(),
            labels,
            background: 0,
        }
    }

    pub fn frame(&self, t: usize) -> &[u32] {
        let n = self.h * self.w;
        &self.labels[t * n..(t + 1) * n]
    }

    pub fn single_frame(&self, t: usize) -> Self {
        Self {
            t: 1,
            labels: self.frame(t).to_vec(),
            ..*self
        }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if (self.t, self.h, self.w) != (other.t, other.h, other.w) {
            return Err(Error::shape(
                "label videos",
                format!("({}, {}, {})", other.t, other.h, other.w),
                format!("({}, {}, {})", self.t, self.h, self.w),
            ));
        }
        Ok(())
    }

    pub fn instance_ids(&self) -> BTreeSet<u32> {
        self.labels
            .iter()
            .copied()
            .filter(|&l| l != self.background)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    #[default]
    BestOverlap,
    Hungarian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AriPooling {
    /// One clustering over all foreground pixels of the clip.
    #[default]
    Video,
    /// Mean of per-frame scores over frames with foreground.
    FrameMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Video,
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AriValue {
    pub value: f64,
    /// Set when there was no foreground to score; `value` is then 1.0.
    pub empty_foreground: bool,
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Contingency-table adjusted Rand index between two labelings of the same
/// items. Degenerate denominators score 1.0.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut table: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut rows: BTreeMap<u32, u64> = BTreeMap::new();
    let mut cols: BTreeMap<u32, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&n| comb2(n)).sum();
    let sa: f64 = rows.values().map(|&n| comb2(n)).sum();
    let sb: f64 = cols.values().map(|&n| comb2(n)).sum();
    let total = comb2(a.len() as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// ARI restricted to pixels whose ground truth is foreground.
pub fn fg_ari(pred: &LabelMaskVideo, gt: &LabelMaskVideo, pooling: AriPooling) -> Result<AriValue> {
    pred.check_same_shape(gt)?;
    let fg = |range: std::ops::Range<usize>| -> (Vec<u32>, Vec<u32>) {
        range
            .filter(|&i| gt.labels[i] != gt.background)
            .map(|i| (pred.labels[i], gt.labels[i]))
            .unzip()
    };
    match pooling {
        AriPooling::Video => {
            let (p, g) = fg(0..gt.labels.len());
            if p.is_empty() {
                return Ok(AriValue {
                    value: 1.0,
                    empty_foreground: true,
                });
            }
            Ok(AriValue {
                value: adjusted_rand_index(&p, &g),
                empty_foreground: false,
            })
        }
        AriPooling::FrameMean => {
            let n = gt.h * gt.w;
            let scores: Vec<f64> = (0..gt.t)
                .filter_map(|t| {
                    let (p, g) = fg(t * n..(t + 1) * n);
                    (!p.is_empty()).then(|| adjusted_rand_index(&p, &g))
                })
                .collect();
            if scores.is_empty() {
                return Ok(AriValue {
                    value: 1.0,
                    empty_foreground: true,
                });
            }
            Ok(AriValue {
                value: scores.iter().sum::<f64>() / scores.len() as f64,
                empty_foreground: false,
            })
        }
    }
}

/// Both empty counts as identical (1.0); one empty gives 0.0.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU between every gt instance and every predicted instance over the
/// given pixel range. Returns `(gt ids, pred ids, iou[g][p])`.
fn iou_table(
    pred: &LabelMaskVideo,
    gt: &LabelMaskVideo,
    range: std::ops::Range<usize>,
) -> (Vec<u32>, Vec<u32>, Vec<Vec<f64>>) {
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut gsize: BTreeMap<u32, usize> = BTreeMap::new();
    let mut psize: BTreeMap<u32, usize> = BTreeMap::new();
    for i in range {
        let (g, p) = (gt.labels[i], pred.labels[i]);
        let g_in = g != gt.background;
        let p_in = p != pred.background;
        if g_in {
            *gsize.entry(g).or_default() += 1;
        }
        if p_in {
            *psize.entry(p).or_default() += 1;
        }
        if g_in && p_in {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let gids: Vec<u32> = gsize.keys().copied().collect();
    let pids: Vec<u32> = psize.keys().copied().collect();
    let table = gids
        .iter()
        .map(|g| {
            pids.iter()
                .map(|p| {
                    let i = inter.get(&(*g, *p)).copied().unwrap_or(0);
                    i as f64 / (gsize[g] + psize[p] - i) as f64
                })
                .collect()
        })
        .collect();
    (gids, pids, table)
}

/// Maximum-weight one-to-one assignment of rows to columns. Rows left
/// without a column (more rows than columns) get `None`.
pub fn hungarian_max(w: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 {
        return Vec::new();
    }
    let n = rows.max(cols);
    let big = w
        .iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    // Minimise cost = big - weight on the padded square matrix; padding
    // entries cost `big` (weight zero).
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            big - w[i][j]
        } else {
            big
        }
    };
    // Potentials-based O(n^3) assignment, 1-indexed with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// Chosen prediction column for each gt row.
fn match_rows(table: &[Vec<f64>], matching: Matching) -> Vec<Option<usize>> {
    match matching {
        Matching::BestOverlap => table
            .iter()
            .map(|row| {
                let mut best: Option<usize> = None;
                for (j, &v) in row.iter().enumerate() {
                    if best.is_none_or(|b| v > row[b]) {
                        best = Some(j);
                    }
                }
                best
            })
            .collect(),
        Matching::Hungarian => hungarian_max(table),
    }
}

fn matched_ious(table: &[Vec<f64>], matching: Matching) -> Vec<f64> {
    match_rows(table, matching)
        .iter()
        .zip(table)
        .map(|(m, row)| m.map_or(0.0, |j| row[j]))
        .collect()
}

/// Mean best overlap. `None` when the ground truth has no instances.
pub fn mbo(
    pred: &LabelMaskVideo,
    gt: &LabelMaskVideo,
    level: Level,
    matching: Matching,
) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let mut scores = Vec::new();
    match level {
        Level::Video => {
            let (_, _, table) = iou_table(pred, gt, 0..gt.labels.len());
            scores.extend(matched_ious(&table, matching));
        }
        Level::Frame => {
            let n = gt.h * gt.w;
            for t in 0..gt.t {
                let (_, _, table) = iou_table(pred, gt, t * n..(t + 1) * n);
                scores.extend(matched_ious(&table, matching));
            }
        }
    }
    Ok(mean(&scores))
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mask pixels with at least one 4-neighbour outside the mask (image
/// borders count as outside).
pub fn inner_boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let outside = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || !mask[yy as usize * w + xx as usize]
            };
            let (yi, xi) = (y as isize, x as isize);
            out[y * w + x] =
                outside(yi - 1, xi) || outside(yi + 1, xi) || outside(yi, xi - 1) || outside(yi, xi + 1);
        }
    }
    out
}

/// Exact squared Euclidean distance to the nearest true pixel of `set`,
/// by separable lower envelopes of parabolas. Pixels are `inf` when the set
/// is empty.
pub fn squared_distance_transform(set: &[bool], h: usize, w: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { inf }).collect();
    let mut buf = vec![0.0; h.max(w)];
    let mut out = vec![0.0; h.max(w)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        dt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.iter_mut().for_each(|x| *x = f64::INFINITY);
        return;
    }
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *out = diff * diff + f[p];
    }
}

/// Symmetric Hausdorff distance between the inner boundaries of two masks.
/// `None` if either mask is empty.
pub fn hausdorff(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let ba = inner_boundary(a, h, w);
    let bb = inner_boundary(b, h, w);
    if !ba.contains(&true) || !bb.contains(&true) {
        return None;
    }
    let da = squared_distance_transform(&ba, h, w);
    let db = squared_distance_transform(&bb, h, w);
    let directed = |from: &[bool], dt: &[f64]| {
        from.iter()
            .zip(dt)
            .filter(|(&f, _)| f)
            .fold(0.0f64, |m, (_, &d)| m.max(d))
    };
    Some(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}

/// Mean Hausdorff distance between each gt instance and its matched
/// prediction, per frame. Unmatched instances score the image diagonal.
pub fn mbhd(pred: &LabelMaskVideo, gt: &LabelMaskVideo, matching: Matching) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let (h, w) = (gt.h, gt.w);
    let n = h * w;
    let diagonal = (h as f64).hypot(w as f64);
    let mut scores = Vec::new();
    for t in 0..gt.t {
        let (gids, pids, table) = iou_table(pred, gt, t * n..(t + 1) * n);
        let gf = gt.frame(t);
        let pf = pred.frame(t);
        for (gi, m) in match_rows(&table, matching).into_iter().enumerate() {
            let d = m.and_then(|pj| {
                let a: Vec<bool> = gf.iter().map(|&l| l == gids[gi]).collect();
                let b: Vec<bool> = pf.iter().map(|&l| l == pids[pj]).collect();
                hausdorff(&a, &b, h, w)
            });
            scores.push(d.unwrap_or(diagonal));
        }
    }
    Ok(mean(&scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundingBox {
    pub id: u32,
    pub min_row: usize,
    pub min_col: usize,
    pub max_row: usize,
    pub max_col: usize,
}

impl BoundingBox {
    fn area(&self) -> usize {
        (self.max_row - self.min_row + 1) * (self.max_col - self.min_col + 1)
    }

    /// IoU of inclusive pixel boxes.
    pub fn iou(&self, other: &Self) -> f64 {
        let r0 = self.min_row.max(other.min_row);
        let r1 = self.max_row.min(other.max_row);
        let c0 = self.min_col.max(other.min_col);
        let c1 = self.max_col.min(other.max_col);
        let inter = if r0 <= r1 && c0 <= c1 {
            (r1 - r0 + 1) * (c1 - c0 + 1)
        } else {
            0
        };
        inter as f64 / (self.area() + other.area() - inter) as f64
    }
}

/// Tight boxes for every non-zero id, ordered by id.
pub fn masks_to_boxes(labels: &[u32], h: usize, w: usize) -> Vec<BoundingBox> {
    let mut boxes: BTreeMap<u32, BoundingBox> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let id = labels[y * w + x];
            if id == 0 {
                continue;
            }
            boxes
                .entry(id)
                .and_modify(|b| {
                    b.min_row = b.min_row.min(y);
                    b.max_row = b.max_row.max(y);
                    b.min_col = b.min_col.min(x);
                    b.max_col = b.max_col.max(x);
                })
                .or_insert(BoundingBox {
                    id,
                    min_row: y,
                    min_col: x,
                    max_row: y,
                    max_col: x,
                });
        }
    }
    boxes.into_values().collect()
}

/// Fraction of per-frame gt boxes hit by some predicted box with IoU > 0.5.
pub fn corloc(pred: &LabelMaskVideo, gt: &LabelMaskVideo) -> Result<Option<f64>> {
    pred.check_same_shape(gt)?;
    let (mut hits, mut total) = (0usize, 0usize);
    for t in 0..gt.t {
        let gb = masks_to_boxes(gt.frame(t), gt.h, gt.w);
        let pb = masks_to_boxes(pred.frame(t), gt.h, gt.w);
        for g in &gb {
            total += 1;
            if pb.iter().any(|p| p.iou(g) > 0.5) {
                hits += 1;
            }
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub matching: Matching,
    pub ari_pooling: AriPooling,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            matching: Matching::BestOverlap,
            ari_pooling: AriPooling::Video,
        }
    }
}

/// Scores for one clip. Overlap metrics are `None` when the clip has no
/// ground-truth instances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub clip_id: String,
    pub fg_ari: f64,
    pub empty_foreground: bool,
    pub mbo_v: Option<f64>,
    pub mbo_f: Option<f64>,
    pub mbhd: Option<f64>,
    pub corloc: Option<f64>,
    pub mbo_v_hungarian: Option<f64>,
    pub mbo_f_hungarian: Option<f64>,
    pub frames: usize,
}

pub const METRIC_NAMES: [&str; 7] = [
    "fg_ari",
    "mbo_v",
    "mbo_f",
    "mbhd",
    "corloc",
    "mbo_v_hungarian",
    "mbo_f_hungarian",
];

impl ClipMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "fg_ari" => Some(self.fg_ari),
            "mbo_v" => self.mbo_v,
            "mbo_f" => self.mbo_f,
            "mbhd" => self.mbhd,
            "corloc" => self.corloc,
            "mbo_v_hungarian" => self.mbo_v_hungarian,
            "mbo_f_hungarian" => self.mbo_f_hungarian,
            _ => None,
        }
    }
}

pub fn evaluate_labels(
    clip_id: &str,
    pred: &LabelMaskVideo,
    gt: &LabelMaskVideo,
    cfg: &MetricsConfig,
) -> Result<ClipMetrics> {
    let ari = fg_ari(pred, gt, cfg.ari_pooling)?;
    Ok(ClipMetrics {
        clip_id: clip_id.to_string(),
        fg_ari: ari.value,
        empty_foreground: ari.empty_foreground,
        mbo_v: mbo(pred, gt, Level::Video, cfg.matching)?,
        mbo_f: mbo(pred, gt, Level::Frame, cfg.matching)?,
        mbhd: mbhd(pred, gt, cfg.matching)?,
        corloc: corloc(pred, gt)?,
        mbo_v_hungarian: mbo(pred, gt, Level::Video, Matching::Hungarian)?,
        mbo_f_hungarian: mbo(pred, gt, Level::Frame, Matching::Hungarian)?,
        frames: gt.t,
    })
}

/// Hard labels by argmax over slots (ties to the lowest slot), then every
/// metric.
pub fn evaluate_clip(
    clip_id: &str,
    pred_soft: &MaskSet,
    gt: &LabelMaskVideo,
    cfg: &MetricsConfig,
) -> Result<ClipMetrics> {
    evaluate_labels(clip_id, &LabelMaskVideo::from_mask_set(pred_soft), gt, cfg)
}

/// Dataset-level means (over clips where the metric is defined).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fg_ari: f64,
    pub mbo_v: f64,
    pub mbo_f: f64,
    pub mbhd: f64,
    pub corloc: f64,
    pub mbo_v_hungarian: f64,
    pub mbo_f_hungarian: f64,
    pub videos: usize,
    pub frames: usize,
    pub per_video: Vec<ClipMetrics>,
}

impl MetricsReport {
    pub fn aggregate(per_video: Vec<ClipMetrics>) -> Self {
        let avg = |name: &str| {
            let v: Vec<f64> = per_video.iter().filter_map(|c| c.get(name)).collect();
            mean(&v).unwrap_or(f64::NAN)
        };
        Self {
            fg_ari: avg("fg_ari"),
            mbo_v: avg("mbo_v"),
            mbo_f: avg("mbo_f"),
            mbhd: avg("mbhd"),
            corloc: avg("corloc"),
            mbo_v_hungarian: avg("mbo_v_hungarian"),
            mbo_f_hungarian: avg("mbo_f_hungarian"),
            videos: per_video.len(),
            frames: per_video.iter().map(|c| c.frames).sum(),
            per_video,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "fg_ari" => Some(self.fg_ari),
            "mbo_v" => Some(self.mbo_v),
            "mbo_f" => Some(self.mbo_f),
            "mbhd" => Some(self.mbhd),
            "corloc" => Some(self.corloc),
            "mbo_v_hungarian" => Some(self.mbo_v_hungarian),
            "mbo_f_hungarian" => Some(self.mbo_f_hungarian),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn video(t: usize, h: usize, w: usize, labels: Vec<u32>) -> LabelMaskVideo {
        LabelMaskVideo::new(t, h, w, labels).unwrap()
    }

    /// Pair-counting ARI, quadratic in the number of items.
    fn ari_oracle(a: &[u32], b: &[u32]) -> f64 {
        let n = a.len();
        let (mut both, mut same_a, mut same_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                pairs += 1.0;
                same_a += sa as u8 as f64;
                same_b += sb as u8 as f64;
                both += (sa && sb) as u8 as f64;
            }
        }
        let expected = same_a * same_b / pairs;
        let max = 0.5 * (same_a + same_b);
        if max == expected {
            return 1.0;
        }
        (both - expected) / (max - expected)
    }

    fn hausdorff_oracle(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
        let ba = inner_boundary(a, h, w);
        let bb = inner_boundary(b, h, w);
        let pts = |m: &[bool]| -> Vec<(f64, f64)> {
            (0..h * w)
                .filter(|&i| m[i])
                .map(|i| ((i / w) as f64, (i % w) as f64))
                .collect()
        };
        let (pa, pb) = (pts(&ba), pts(&bb));
        if pa.is_empty() || pb.is_empty() {
            return None;
        }
        let directed = |x: &[(f64, f64)], y: &[(f64, f64)]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0.0, f64::max)
        };
        Some(directed(&pa, &pb).max(directed(&pb, &pa)))
    }

    fn best_assignment_oracle(w: &[Vec<f64>]) -> f64 {
        fn go(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == w.len() {
                return 0.0;
            }
            let mut best = go(w, row + 1, used);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row][j] + go(w, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        let cols = w.first().map_or(0, Vec::len);
        go(w, 0, &mut vec![false; cols])
    }

    #[test]
    fn ari_perfect_and_hand_example() {
        let gt = video(1, 2, 2, vec![1, 2, 1, 2]);
        assert_eq!(fg_ari(&gt, &gt, AriPooling::Video).unwrap().value, 1.0);
        let pred = video(1, 2, 2, vec![5, 5, 6, 6]);
        let v = fg_ari(&pred, &gt, AriPooling::Video).unwrap();
        assert!((v.value + 0.5).abs() < 1e-12);
        assert!(!v.empty_foreground);
    }

    #[test]
    fn ari_ignores_background_and_flags_empty() {
        let gt = video(1, 1, 4, vec![0, 1, 1, 0]);
        let pred = video(1, 1, 4, vec![3, 2, 2, 4]);
        assert_eq!(fg_ari(&pred, &gt, AriPooling::Video).unwrap().value, 1.0);
        let empty = video(1, 1, 4, vec![0; 4]);
        let v = fg_ari(&pred, &empty, AriPooling::Video).unwrap();
        assert!(v.empty_foreground);
        assert_eq!(v.value, 1.0);
    }

    #[test]
    fn ari_matches_pair_counting_on_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let gt: Vec<u32> = (0..64).map(|_| rng.random_range(0..4)).collect();
            let pred: Vec<u32> = (0..64).map(|_| rng.random_range(1..5)).collect();
            let (gv, pv) = (video(1, 8, 8, gt.clone()), video(1, 8, 8, pred.clone()));
            let ours = fg_ari(&pv, &gv, AriPooling::Video).unwrap().value;
            let (p, g): (Vec<u32>, Vec<u32>) = gt
                .iter()
                .zip(&pred)
                .filter(|(g, _)| **g != 0)
                .map(|(g, p)| (*p, *g))
                .unzip();
            assert!((ours - ari_oracle(&p, &g)).abs() < 1e-9);
        }
    }

    #[test]
    fn frame_mean_pooling_averages_frames() {
        let gt = video(2, 1, 4, vec![1, 1, 2, 2, 1, 2, 1, 2]);
        let pred = video(2, 1, 4, vec![1, 1, 2, 2, 1, 1, 2, 2]);
        let v = fg_ari(&pred, &gt, AriPooling::FrameMean).unwrap().value;
        assert!((v - 0.25).abs() < 1e-12);
    }

    #[test]
    fn iou_cases() {
        let a = [true, true, false, true, true, false];
        let b = [false, true, true, false, true, true];
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]), 0.0);
        assert_eq!(iou(&[false, false], &[false, false]), 1.0);
        assert_eq!(iou(&[true, false], &[false, false]), 0.0);
    }

    #[test]
    fn mbo_identity_and_levels() {
        let gt = video(2, 2, 3, vec![1, 1, 0, 2, 2, 0, 1, 0, 0, 2, 2, 2]);
        for m in [Matching::BestOverlap, Matching::Hungarian] {
            for l in [Level::Video, Level::Frame] {
                assert_eq!(mbo(&gt, &gt, l, m).unwrap(), Some(1.0));
            }
        }
        let one = gt.single_frame(1);
        let pred = video(1, 2, 3, vec![1, 1, 1, 2, 0, 0]);
        for m in [Matching::BestOverlap, Matching::Hungarian] {
            assert_eq!(
                mbo(&pred, &one, Level::Video, m).unwrap(),
                mbo(&pred, &one, Level::Frame, m).unwrap()
            );
        }
        assert_eq!(mbo(&gt, &video(2, 2, 3, vec![0; 12]), Level::Video, Matching::BestOverlap).unwrap(), None);
    }

    #[test]
    fn hungarian_cannot_reuse_a_prediction() {
        // gt objects 1 and 2 side by side; prediction 7 covers both, 8 is a
        // stray pixel.
        let gt = video(1, 1, 5, vec![1, 1, 2, 2, 0]);
        let pred = video(1, 1, 5, vec![7, 7, 7, 7, 8]);
        let best = mbo(&pred, &gt, Level::Video, Matching::BestOverlap).unwrap().unwrap();
        let hung = mbo(&pred, &gt, Level::Video, Matching::Hungarian).unwrap().unwrap();
        assert!((best - 0.5).abs() < 1e-15);
        assert!((hung - 0.25).abs() < 1e-15);
        assert!(hung <= best);
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let r = rng.random_range(1..5);
            let c = rng.random_range(1..5);
            let w: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.random::<f64>()).collect())
                .collect();
            let assign = hungarian_max(&w);
            let mut seen = BTreeSet::new();
            let mut total = 0.0;
            for (i, a) in assign.iter().enumerate() {
                if let Some(j) = a {
                    assert!(seen.insert(*j));
                    total += w[i][*j];
                }
            }
            assert_eq!(seen.len(), r.min(c));
            assert!((total - best_assignment_oracle(&w)).abs() < 1e-9);
        }
    }

    #[test]
    fn hausdorff_basics() {
        let gt = video(1, 4, 3, vec![1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 2]);
        assert_eq!(mbhd(&gt, &gt, Matching::BestOverlap).unwrap(), Some(0.0));
        let mut a = vec![false; 5 * 5];
        let mut b = vec![false; 5 * 5];
        a[0] = true;
        b[3 * 5 + 4] = true;
        assert_eq!(hausdorff(&a, &b, 5, 5), Some(5.0));
    }

    #[test]
    fn missing_prediction_costs_the_diagonal() {
        let gt = video(1, 3, 4, vec![1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0]);
        let pred = video(1, 3, 4, vec![0; 12]);
        assert_eq!(mbhd(&pred, &gt, Matching::BestOverlap).unwrap(), Some(5.0));
    }

    #[test]
    fn distance_transform_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
            let set: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.1)).collect();
            let dt = squared_distance_transform(&set, h, w);
            for i in 0..h * w {
                let mut best = f64::INFINITY;
                for j in 0..h * w {
                    if set[j] {
                        let dy = (i / w) as f64 - (j / w) as f64;
                        let dx = (i % w) as f64 - (j % w) as f64;
                        best = best.min(dy * dy + dx * dx);
                    }
                }
                assert_eq!(dt[i], best);
            }
        }
    }

    #[test]
    fn hausdorff_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (h, w) = (rng.random_range(2..16), rng.random_range(2..16));
            let pa = rng.random_range(0.05..0.6);
            let pb = rng.random_range(0.05..0.6);
            let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
            let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
            assert_eq!(hausdorff(&a, &b, h, w), hausdorff_oracle(&a, &b, h, w));
        }
    }

    #[test]
    fn boxes() {
        let mut labels = vec![0u32; 4 * 6];
        for (y, x) in [(1, 3), (1, 4), (2, 3), (2, 4)] {
            labels[y * 6 + x] = 1;
        }
        let b = masks_to_boxes(&labels, 4, 6);
        assert_eq!(
            b,
            vec![BoundingBox { id: 1, min_row: 1, min_col: 3, max_row: 2, max_col: 4 }]
        );
        assert!(masks_to_boxes(&[0; 6], 2, 3).is_empty());
        labels[0] = 9;
        let b = masks_to_boxes(&labels, 4, 6);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].id, 9);
    }

    #[test]
    fn corloc_threshold_is_strict() {
        // gt box is 1x4, pred box covers half of it: IoU exactly 0.5.
        let gt = video(1, 1, 4, vec![1, 1, 1, 1]);
        let half = video(1, 1, 4, vec![0, 0, 3, 3]);
        assert_eq!(corloc(&half, &gt).unwrap(), Some(0.0));
        let most = video(1, 1, 4, vec![0, 3, 3, 3]);
        assert_eq!(corloc(&most, &gt).unwrap(), Some(1.0));
        assert_eq!(corloc(&gt, &gt).unwrap(), Some(1.0));
        assert_eq!(corloc(&video(1, 1, 4, vec![0; 4]), &gt).unwrap(), Some(0.0));
    }

    #[test]
    fn evaluate_perfect_and_uniform_masks() {
        // 2x2 patch grid, patch size 2; gt uses three instances.
        let grid_labels = [1u32, 2, 3, 3];
        let gt_labels = crate::decoders::upsample_labels(&grid_labels, (2, 2), 2);
        let gt = video(1, 4, 4, gt_labels);
        let onehot = Mat::from_fn(3, 4, |k, n| if grid_labels[n] == k as u32 + 1 { 1.0 } else { 0.0 });
        let ms = MaskSet::new(vec![onehot], (2, 2), 2).unwrap();
        let r = evaluate_clip("c", &ms, &gt, &MetricsConfig::default()).unwrap();
        assert_eq!(r.fg_ari, 1.0);
        assert_eq!(r.mbo_v, Some(1.0));
        assert_eq!(r.mbo_f, Some(1.0));
        assert_eq!(r.corloc, Some(1.0));
        assert_eq!(r.mbhd, Some(0.0));

        let uniform = MaskSet::new(vec![Mat::filled(3, 4, 1.0 / 3.0)], (2, 2), 2).unwrap();
        let pred = LabelMaskVideo::from_mask_set(&uniform);
        assert!(pred.labels.iter().all(|&l| l == 1));
        let r = evaluate_clip("c", &uniform, &gt, &MetricsConfig::default()).unwrap();
        assert_eq!(r.fg_ari, 0.0);
    }

    #[test]
    fn report_aggregates_defined_values() {
        let mk = |id: &str, ari: f64, mbo: Option<f64>| ClipMetrics {
            clip_id: id.into(),
            fg_ari: ari,
            empty_foreground: false,
            mbo_v: mbo,
            mbo_f: mbo,
            mbhd: mbo,
            corloc: mbo,
            mbo_v_hungarian: mbo,
            mbo_f_hungarian: mbo,
            frames: 3,
        };
        let r = MetricsReport::aggregate(vec![mk("a", 0.2, Some(0.5)), mk("b", 0.4, None)]);
        assert!((r.fg_ari - 0.3).abs() < 1e-15);
        assert_eq!(r.mbo_v, 0.5);
        assert_eq!(r.videos, 2);
        assert_eq!(r.frames, 6);
    }

    fn relabel(v: &LabelMaskVideo, perm: &[u32]) -> LabelMaskVideo {
        LabelMaskVideo {
            labels: v.labels.iter().map(|&l| if l == 0 { 0 } else { perm[l as usize - 1] }).collect(),
            ..v.clone()
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range_and_ignore_pred_ids(
            gt in proptest::collection::vec(0u32..4, 2 * 36),
            pred in proptest::collection::vec(1u32..5, 2 * 36),
        ) {
            let gt = video(2, 6, 6, gt);
            let pred = video(2, 6, 6, pred);
            let cfg = MetricsConfig::default();
            let r = evaluate_labels("p", &pred, &gt, &cfg).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r.fg_ari));
            for v in [r.mbo_v, r.mbo_f, r.corloc, r.mbo_v_hungarian, r.mbo_f_hungarian].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let Some(d) = r.mbhd {
                prop_assert!(d >= 0.0);
            }
            prop_assert!(r.mbo_v_hungarian.unwrap_or(0.0) <= r.mbo_v.unwrap_or(0.0) + 1e-12);
            prop_assert!(r.mbo_f_hungarian.unwrap_or(0.0) <= r.mbo_f.unwrap_or(0.0) + 1e-12);

            let permuted = relabel(&pred, &[3, 1, 4, 2]);
            let q = evaluate_labels("p", &permuted, &gt, &cfg).unwrap();
            prop_assert!((q.fg_ari - r.fg_ari).abs() < 1e-12);
            prop_assert_eq!(q.mbo_v, r.mbo_v);
            prop_assert_eq!(q.mbo_f, r.mbo_f);
            prop_assert_eq!(q.corloc, r.corloc);
            prop_assert_eq!(q.mbo_v_hungarian.map(|v| (v * 1e9).round()), r.mbo_v_hungarian.map(|v| (v * 1e9).round()));
        }
    }
}
