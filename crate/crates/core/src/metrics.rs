//! Segmentation quality metrics and the statistics used to compare
//! pseudo-scores with real scores.
//!
//! Multi-class masks are scored per foreground class and averaged; a class
//! that appears in neither mask is excluded from the mean.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MetricKind {
    Dsc,
    Hd95,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Dsc)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Dsc => "dsc",
            MetricKind::Hd95 => "hd95",
        }
    }
}

struct ClassCounts {
    a: [usize; 256],
    b: [usize; 256],
    both: [usize; 256],
}

fn class_counts(a: &Mask, b: &Mask) -> ClassCounts {
    let mut c = ClassCounts {
        a: [0; 256],
        b: [0; 256],
        both: [0; 256],
    };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        c.a[x as usize] += 1;
        c.b[y as usize] += 1;
        if x == y {
            c.both[x as usize] += 1;
        }
    }
    c
}

/// Per-class Dice for every label present in either mask, in label order.
pub fn dsc_per_class(a: &Mask, b: &Mask) -> Result<Vec<(u8, f64)>> {
    a.ensure_same_shape(b)?;
    let c = class_counts(a, b);
    Ok((1..=255usize)
        .filter(|&l| c.a[l] + c.b[l] > 0)
        .map(|l| {
            (
                l as u8,
                2.0 * c.both[l] as f64 / (c.a[l] + c.b[l]) as f64,
            )
        })
        .collect())
}

/// Mean foreground Dice. Two masks with no foreground at all score 1.
pub fn dsc(a: &Mask, b: &Mask) -> Result<f64> {
    let per = dsc_per_class(a, b)?;
    if per.is_empty() {
        return Ok(1.0);
    }
    Ok(per.iter().map(|(_, d)| d).sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hd95 {
    /// Mean over classes, in the units of `spacing`.
    pub value: f64,
    /// Classes present in exactly one mask; each contributed the sentinel.
    pub sentinel_classes: usize,
}

impl Hd95 {
    pub fn is_degenerate(&self) -> bool {
        self.sentinel_classes > 0
    }
}

/// Sentinel for a class present in exactly one mask: the grid diagonal in mm.
pub fn hd95_sentinel(dims: [usize; 3], spacing: [f64; 3]) -> f64 {
    let s: f64 = (0..3)
        .map(|i| {
            let e = dims[i] as f64 * spacing[i];
            e * e
        })
        .sum();
    libm::sqrt(s)
}

/// Boundary voxels of `label`: voxels of the class with a face neighbour
/// outside the class. Outside the grid counts as background, except along
/// axes of extent 1, which are ignored so that a single slice is scored as a
/// 2D image.
pub fn boundary(mask: &Mask, label: u8) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let mut out = Vec::new();
    let data = mask.data();
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                let i = mask.index(x, y, z);
                if data[i] != label {
                    continue;
                }
                let p = [x, y, z];
                // a single voxel has no axis left to test and is its own boundary
                let mut edge = d == [1, 1, 1];
                for axis in 0..3 {
                    if d[axis] == 1 {
                        continue;
                    }
                    let stride = match axis {
                        0 => 1,
                        1 => d[0],
                        _ => d[0] * d[1],
                    };
                    if p[axis] == 0
                        || p[axis] + 1 == d[axis]
                        || data[i - stride] != label
                        || data[i + stride] != label
                    {
                        edge = true;
                        break;
                    }
                }
                if edge {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// 1D lower envelope of parabolas `w (q - p)^2 + f(p)` (Felzenszwalb &
/// Huttenlocher). Infinite samples do not contribute.
fn envelope_1d(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q as f64 - p as f64));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = w * d * d + f[p];
    }
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest
/// seed voxel.
pub fn squared_distance_transform(dims: [usize; 3], seeds: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut field = vec![f64::INFINITY; n];
    for p in seeds {
        field[p[0] + dims[0] * (p[1] + dims[1] * p[2])] = 0.0;
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let longest = dims.iter().copied().max().unwrap_or(0);
    let mut line = vec![0.0; longest];
    let mut res = vec![0.0; longest];
    let (mut v, mut z) = (Vec::with_capacity(longest), Vec::with_capacity(longest + 1));
    for axis in 0..3 {
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let w = spacing[axis] * spacing[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for q in 0..len {
                    line[q] = field[base + q * strides[axis]];
                }
                envelope_1d(&line[..len], w, &mut res[..len], &mut v, &mut z);
                for q in 0..len {
                    field[base + q * strides[axis]] = res[q];
                }
            }
        }
    }
    field
}

/// Linear-interpolation percentile (`q` in [0, 1]) of unsorted values.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_unstable_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

fn hd95_class(a: &Mask, b: &Mask, label: u8, spacing: [f64; 3]) -> f64 {
    let dims = a.dims();
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    let da = squared_distance_transform(dims, &bb, spacing);
    let db = squared_distance_transform(dims, &ba, spacing);
    let mut all = Vec::with_capacity(ba.len() + bb.len());
    let at = |p: &[usize; 3]| p[0] + dims[0] * (p[1] + dims[1] * p[2]);
    all.extend(ba.iter().map(|p| libm::sqrt(da[at(p)])));
    all.extend(bb.iter().map(|p| libm::sqrt(db[at(p)])));
    percentile(&mut all, 0.95)
}

/// 95th percentile of the pooled directed boundary distances (both
/// directions), averaged over foreground classes.
pub fn hd95(a: &Mask, b: &Mask, spacing: [f64; 3]) -> Result<Hd95> {
    a.ensure_same_shape(b)?;
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(alloc::format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    let c = class_counts(a, b);
    let sentinel = hd95_sentinel(a.dims(), spacing);
    let mut total = 0.0;
    let mut classes = 0usize;
    let mut sentinel_classes = 0usize;
    for l in 1..=255usize {
        match (c.a[l] > 0, c.b[l] > 0) {
            (false, false) => continue,
            (true, true) => total += hd95_class(a, b, l as u8, spacing),
            _ => {
                total += sentinel;
                sentinel_classes += 1;
            }
        }
        classes += 1;
    }
    Ok(Hd95 {
        value: if classes == 0 { 0.0 } else { total / classes as f64 },
        sentinel_classes,
    })
}

fn check_pair_len(xs: &[f64], ys: &[f64], min: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} vs {} samples",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < min {
        return Err(Error::InvalidArgument(alloc::format!(
            "need at least {min} samples, got {}",
            xs.len()
        )));
    }
    Ok(())
}

/// Pearson correlation, accumulated in one pass with running co-moments.
pub fn pearson_r(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair_len(xs, ys, 2)?;
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
        let n = (i + 1) as f64;
        let dx = x - mx;
        let dy = y - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (x - mx);
        syy += dy * (y - my);
        sxy += dx * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

pub fn mae(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair_len(xs, ys, 1)?;
    Ok(xs.iter().zip(ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / xs.len() as f64)
}

fn check_permutation(r: &[usize]) -> Result<()> {
    let mut seen = vec![false; r.len()];
    for &v in r {
        if v >= r.len() || core::mem::replace(&mut seen[v], true) {
            return Err(Error::InvalidArgument(alloc::format!(
                "ranking {r:?} is not a permutation of 0..{}",
                r.len()
            )));
        }
    }
    Ok(())
}

fn count_inversions(v: &mut [usize], buf: &mut [usize]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = {
        let (l, r) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        count_inversions(l, bl) + count_inversions(r, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            inv += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    inv
}

/// Kendall's tau between two rankings of the same items: `rank_a[i]` is the
/// position of item `i` in ranking A. Discordant pairs are counted as
/// inversions with a merge sort.
pub fn kendall_tau(rank_a: &[usize], rank_b: &[usize]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} vs {} items",
            rank_a.len(),
            rank_b.len()
        )));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(Error::InvalidArgument("kendall tau needs at least 2 items".into()));
    }
    check_permutation(rank_a)?;
    check_permutation(rank_b)?;
    let mut by_a = vec![0usize; n];
    for (item, &pos) in rank_a.iter().enumerate() {
        by_a[pos] = rank_b[item];
    }
    let mut buf = vec![0usize; n];
    let discordant = count_inversions(&mut by_a, &mut buf) as f64;
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((pairs - 2.0 * discordant) / pairs)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelScores {
    pub name: String,
    pub pseudo: Vec<f64>,
    pub real: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Ranking {
    /// Model names, best first, by mean pseudo-score.
    pub pseudo_order: Vec<String>,
    /// Model names, best first, by mean real score.
    pub real_order: Vec<String>,
    pub tau: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn order_by(models: &[ModelScores], key: impl Fn(&ModelScores) -> f64, higher_is_better: bool) -> Vec<usize> {
    let keys: Vec<f64> = models.iter().map(key).collect();
    let mut idx: Vec<usize> = (0..models.len()).collect();
    idx.sort_by(|&i, &j| {
        let c = if higher_is_better {
            keys[j].total_cmp(&keys[i])
        } else {
            keys[i].total_cmp(&keys[j])
        };
        match c {
            Ordering::Equal => models[i].name.cmp(&models[j].name),
            o => o,
        }
    });
    idx
}

/// Orders models by mean pseudo-score and by mean real score (ties broken by
/// name) and measures their agreement.
pub fn rank_models(models: &[ModelScores], higher_is_better: bool) -> Result<Ranking> {
    if models.len() < 2 {
        return Err(Error::InvalidArgument("ranking needs at least 2 models".into()));
    }
    let pseudo = order_by(models, |m| mean(&m.pseudo), higher_is_better);
    let real = order_by(models, |m| mean(&m.real), higher_is_better);
    let mut rank_p = vec![0; models.len()];
    let mut rank_r = vec![0; models.len()];
    for (pos, &i) in pseudo.iter().enumerate() {
        rank_p[i] = pos;
    }
    for (pos, &i) in real.iter().enumerate() {
        rank_r[i] = pos;
    }
    Ok(Ranking {
        pseudo_order: pseudo.iter().map(|&i| models[i].name.clone()).collect(),
        real_order: real.iter().map(|&i| models[i].name.clone()).collect(),
        tau: kendall_tau(&rank_p, &rank_r)?,
    })
}

/// Welch's unpaired two-sample t statistic and its degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("t-test needs at least 2 samples per group".into()));
    }
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (var(a) / na, var(b) / nb);
    if va + vb <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = (mean(a) - mean(b)) / libm::sqrt(va + vb);
    let df = (va + vb) * (va + vb) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    Ok((t, df))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScorePair {
    pub subject_id: String,
    pub metric: MetricKind,
    /// M(S, pGT).
    pub pseudo_score: f64,
    /// M(S, GT), when a ground truth is available.
    pub real_score: Option<f64>,
    /// Set when an HD95 value involves the one-empty-mask sentinel.
    pub sentinel: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QcReport {
    pub pairs: Vec<ScorePair>,
    /// Pearson r per metric between pseudo and real scores.
    pub pearson_r: Vec<(MetricKind, f64)>,
    pub mae: Vec<(MetricKind, f64)>,
    pub ranking: Option<Ranking>,
}

impl QcReport {
    /// Fills `pearson_r` and `mae` from pairs that carry a real score.
    /// Metrics whose correlation is undefined (fewer than two pairs, zero
    /// variance) are left out of `pearson_r`.
    pub fn summarize(&mut self) {
        self.pearson_r.clear();
        self.mae.clear();
        for kind in [MetricKind::Dsc, MetricKind::Hd95] {
            let (p, r): (Vec<f64>, Vec<f64>) = self
                .pairs
                .iter()
                .filter(|s| s.metric == kind)
                .filter_map(|s| s.real_score.map(|r| (s.pseudo_score, r)))
                .unzip();
            if let Ok(m) = mae(&p, &r) {
                self.mae.push((kind, m));
            }
            if let Ok(c) = pearson_r(&p, &r) {
                self.pearson_r.push((kind, c));
            }
        }
    }
}
