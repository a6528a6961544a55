//! Synthetic corruption of ground-truth masks to controlled quality levels.
//!
//! Five operators (holes, erosion, false-positive blobs, class collapse,
//! class swap) are composed at random and tuned by a strength controller
//! until the mean foreground Dice against the ground truth lands in the
//! requested [`QualityBand`]. Every operator works on 2D label slices and is
//! a pure function of its inputs and seed.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::fingerprint::SlicePack;
use crate::grid::{Image, Mask};
use crate::metrics::dsc;
use crate::rng::{derive_seed, seeded, SeededRng};

/// One of the five Dice intervals used to grade synthetic segmentations.
/// Intervals are half-open except the top one, which includes 0.95.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "u8", into = "u8"))]
pub struct QualityBand(u8);

const BAND_EDGES: [(f64, f64); 5] = [(0.05, 0.10), (0.10, 0.25), (0.25, 0.50), (0.50, 0.75), (0.75, 0.95)];

impl QualityBand {
    pub const COUNT: usize = 5;

    pub fn all() -> [QualityBand; 5] {
        [0, 1, 2, 3, 4].map(QualityBand)
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i < Self::COUNT {
            Ok(QualityBand(i as u8))
        } else {
            Err(Error::InvalidArgument(alloc::format!("quality band index {i}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn lo(self) -> f64 {
        BAND_EDGES[self.index()].0
    }

    pub fn hi(self) -> f64 {
        BAND_EDGES[self.index()].1
    }

    pub fn contains(self, d: f64) -> bool {
        d >= self.lo() && (d < self.hi() || (self.index() == Self::COUNT - 1 && d <= self.hi()))
    }

    /// Band holding `d`, if any.
    pub fn of(d: f64) -> Option<Self> {
        Self::all().into_iter().find(|b| b.contains(d))
    }
}

impl TryFrom<u8> for QualityBand {
    type Error = Error;
    fn try_from(i: u8) -> Result<Self> {
        Self::from_index(i as usize)
    }
}

impl From<QualityBand> for u8 {
    fn from(b: QualityBand) -> u8 {
        b.0
    }
}

impl fmt::Display for QualityBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let close = if self.index() == Self::COUNT - 1 { ']' } else { ')' };
        write!(f, "[{:.2},{:.2}{close}", self.lo(), self.hi())
    }
}

fn pixels_of(mask: &Mask, pred: impl Fn(u8) -> bool) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| pred(v))
        .map(|(i, _)| i)
        .collect()
}

/// Calls `f` for every pixel index of the 2D disk centred on pixel `centre`.
fn for_disk(mask: &Mask, centre: usize, radius: f64, mut f: impl FnMut(usize)) {
    let [w, h, _] = mask.dims();
    let (cx, cy) = ((centre % w) as isize, (centre / w % h) as isize);
    let z0 = centre - centre % (w * h);
    let r = libm::ceil(radius) as isize;
    let r2 = radius * radius;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (cx + dx, cy + dy);
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            if ((dx * dx + dy * dy) as f64) <= r2 {
                f(z0 + y as usize * w + x as usize);
            }
        }
    }
}

/// Sets `n` random disks inside each nonzero class to background. Each disk
/// is centred on a pixel of its class.
pub fn punch_holes(mask: &Mask, n: usize, radius_range: (f64, f64), seed: u64) -> Mask {
    let mut rng = seeded(seed);
    let mut out = mask.clone();
    for label in mask.labels() {
        for _ in 0..n {
            let px = pixels_of(&out, |v| v == label);
            let Some(&centre) = px.choose(&mut rng) else { break };
            let r = sample_range(&mut rng, radius_range);
            let mut hit = Vec::new();
            for_disk(&out, centre, r, |i| hit.push(i));
            let d = out.data_mut();
            for i in hit {
                if d[i] == label {
                    d[i] = 0;
                }
            }
        }
    }
    out
}

fn sample_range(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Per-class binary erosion with a 3×3 square element, `iterations` times.
/// Pixels outside the grid count as background.
pub fn erode_iterative(mask: &Mask, iterations: usize) -> Mask {
    let [w, h, d] = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..iterations {
        let src = cur.clone();
        let s = src.data();
        let out = cur.data_mut();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let v = s[i];
                    if v == 0 {
                        continue;
                    }
                    let interior = x > 0
                        && y > 0
                        && x + 1 < w
                        && y + 1 < h
                        && (-1isize..=1).all(|dy| {
                            (-1isize..=1).all(|dx| s[(i as isize + dy * w as isize + dx) as usize] == v)
                        });
                    if !interior {
                        out[i] = 0;
                    }
                }
            }
        }
        if cur == src {
            break;
        }
    }
    cur
}

/// Paints `n_blobs` disks of a randomly chosen existing class onto
/// background pixels. No-op on masks without foreground.
pub fn add_false_positives(mask: &Mask, n_blobs: usize, radius_range: (f64, f64), seed: u64) -> Mask {
    let labels = mask.labels();
    let mut out = mask.clone();
    if labels.is_empty() {
        return out;
    }
    let mut rng = seeded(seed);
    for _ in 0..n_blobs {
        let bg = pixels_of(&out, |v| v == 0);
        let Some(&centre) = bg.choose(&mut rng) else { break };
        let label = *labels.choose(&mut rng).unwrap();
        let r = sample_range(&mut rng, radius_range);
        let mut hit = Vec::new();
        for_disk(&out, centre, r, |i| hit.push(i));
        let d = out.data_mut();
        for i in hit {
            if d[i] == 0 {
                d[i] = label;
            }
        }
    }
    out
}

/// Maps every nonzero label to the smallest label present.
pub fn collapse_classes(mask: &Mask) -> Mask {
    match mask.labels().first() {
        None => mask.clone(),
        Some(&target) => mask.map(|v| if v == 0 { 0 } else { target }),
    }
}

/// Applies a random non-identity permutation to the labels present. Masks
/// with fewer than two labels are returned unchanged.
pub fn swap_classes(mask: &Mask, seed: u64) -> Mask {
    let labels = mask.labels();
    if labels.len() < 2 {
        return mask.clone();
    }
    let mut rng = seeded(seed);
    let mut perm = labels.clone();
    while perm == labels {
        perm.shuffle(&mut rng);
    }
    let mut table = [0u8; 256];
    for (i, &l) in labels.iter().enumerate() {
        table[l as usize] = perm[i];
    }
    mask.map(|v| table[v as usize])
}

/// Operator parameter ranges, scaled by a strength in `[0, 1]` and by the
/// equivalent radius of the ground-truth foreground.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct DegradeParams {
    pub max_holes: usize,
    /// Hole radius at full strength, relative to the foreground radius.
    pub hole_radius: f64,
    pub max_fp_blobs: usize,
    /// Blob radius at full strength, relative to the foreground radius.
    pub fp_radius: f64,
    /// Erosion depth at full strength, relative to the foreground radius.
    pub erosion_depth: f64,
    pub max_ops: usize,
    pub max_retries: usize,
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            max_holes: 6,
            hole_radius: 0.7,
            max_fp_blobs: 5,
            fp_radius: 0.5,
            erosion_depth: 1.0,
            max_ops: 3,
            max_retries: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Holes,
    Erode,
    FalsePositives,
    Collapse,
    Swap,
}

impl Op {
    fn graded(self) -> bool {
        matches!(self, Op::Holes | Op::Erode | Op::FalsePositives)
    }
}

fn apply_op(op: Op, m: &Mask, strength: f64, fg_radius: f64, p: &DegradeParams, seed: u64) -> Mask {
    let s = strength.clamp(0.0, 1.0);
    match op {
        Op::Holes => {
            let n = 1 + libm::floor(s * (p.max_holes.max(1) - 1) as f64) as usize;
            let hi = (fg_radius * p.hole_radius * (0.15 + 0.85 * s)).max(1.0);
            punch_holes(m, n, (0.5 * hi, hi), seed)
        }
        Op::Erode => erode_iterative(m, libm::round(s * p.erosion_depth * fg_radius).max(1.0) as usize),
        Op::FalsePositives => {
            let n = 1 + libm::floor(s * (p.max_fp_blobs.max(1) - 1) as f64) as usize;
            let hi = (fg_radius * p.fp_radius * (0.15 + 0.85 * s)).max(1.0);
            add_false_positives(m, n, (0.5 * hi, hi), seed)
        }
        Op::Collapse => collapse_classes(m),
        Op::Swap => swap_classes(m, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradedPair {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: Image,
    pub gt: Mask,
    pub degraded: Mask,
    pub ratio: f64,
    pub band: QualityBand,
    pub achieved_dsc: f64,
    pub seed: u64,
}

/// Degrades `gt` until its Dice against `gt` falls inside `band`.
///
/// Each attempt draws 1..=`max_ops` distinct operators in random order and
/// bisects their shared strength on `[0, 1]` (strong when the result is too
/// good, weak when too poor) for a few evaluations before drawing a new
/// operator set. Every evaluation starts again from `gt` and counts against
/// `max_retries`.
pub fn degrade_mask(gt: &Mask, band: QualityBand, seed: u64, p: &DegradeParams) -> Result<(Mask, f64)> {
    let s = search(gt, band, seed, p)?;
    if s.hit {
        Ok((s.mask, s.dsc))
    } else {
        Err(Error::BandUnreachable {
            lo: band.lo(),
            hi: band.hi(),
            retries: p.max_retries,
            best: s.dsc,
        })
    }
}

/// Like [`degrade_mask`], but when the band is never hit returns the
/// candidate whose Dice came closest to the band centre. The flag tells
/// whether the result is in band.
pub fn degrade_nearest(gt: &Mask, band: QualityBand, seed: u64, p: &DegradeParams) -> Result<(Mask, f64, bool)> {
    let s = search(gt, band, seed, p)?;
    Ok((s.mask, s.dsc, s.hit))
}

struct Search {
    mask: Mask,
    dsc: f64,
    hit: bool,
}

fn search(gt: &Mask, band: QualityBand, seed: u64, p: &DegradeParams) -> Result<Search> {
    const BISECTION_STEPS: usize = 6;
    let fg = gt.foreground_count();
    let fg_radius = libm::sqrt(fg as f64 / core::f64::consts::PI).max(1.0);
    let mut ops = alloc::vec![Op::Holes, Op::Erode, Op::FalsePositives];
    if gt.labels().len() >= 2 {
        ops.extend([Op::Collapse, Op::Swap]);
    }
    let target = 0.5 * (band.lo() + band.hi());
    let mut best = Search {
        mask: gt.clone(),
        dsc: dsc(gt, gt)?,
        hit: false,
    };
    let mut evals = 0;
    let mut attempt = 0u64;
    while evals < p.max_retries.max(1) {
        let aseed = derive_seed(seed, &[attempt]);
        attempt += 1;
        let mut rng = seeded(aseed);
        let k = rng.random_range(1..=p.max_ops.clamp(1, ops.len()));
        let mut chosen: Vec<Op> = ops.choose_multiple(&mut rng, k).copied().collect();
        chosen.shuffle(&mut rng);
        let steps = if chosen.iter().any(|o| o.graded()) { BISECTION_STEPS } else { 1 };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..steps {
            if evals == p.max_retries.max(1) {
                break;
            }
            evals += 1;
            let strength = 0.5 * (lo + hi);
            let mut cand = gt.clone();
            for (j, &op) in chosen.iter().enumerate() {
                cand = apply_op(op, &cand, strength, fg_radius, p, derive_seed(aseed, &[j as u64]));
            }
            let d = dsc(&cand, gt)?;
            if band.contains(d) {
                return Ok(Search {
                    mask: cand,
                    dsc: d,
                    hit: true,
                });
            }
            if evals == 1 || (d - target).abs() < (best.dsc - target).abs() {
                best = Search {
                    mask: cand,
                    dsc: d,
                    hit: false,
                };
            }
            if d >= band.hi() {
                lo = strength;
            } else {
                hi = strength;
            }
        }
    }
    Ok(best)
}

pub fn degrade_to_band(
    subject_id: &str,
    slice_index: usize,
    image: &Image,
    gt: &Mask,
    ratio: f64,
    band: QualityBand,
    seed: u64,
    p: &DegradeParams,
) -> Result<DegradedPair> {
    image.ensure_same_shape(gt)?;
    let (degraded, achieved_dsc) = degrade_mask(gt, band, seed, p)?;
    Ok(DegradedPair {
        subject_id: subject_id.into(),
        slice_index,
        image: image.clone(),
        gt: gt.clone(),
        degraded,
        ratio,
        band,
        achieved_dsc,
        seed,
    })
}

/// FNV-1a, so corpus seeds depend on subject identity rather than order.
pub fn subject_hash(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Seed of one (subject, slice, band) degradation.
pub fn pair_seed(seed: u64, subject_id: &str, slice_index: usize, band: QualityBand) -> u64 {
    derive_seed(seed, &[subject_hash(subject_id), slice_index as u64, band.index() as u64])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedBand {
    pub subject_id: String,
    pub slice_index: usize,
    pub band: QualityBand,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub pairs: Vec<DegradedPair>,
    pub skipped: Vec<SkippedBand>,
}

/// One degraded pair per (slice, band); unreachable bands are logged and
/// recorded in `skipped`.
pub fn build_corpus(packs: &[SlicePack], bands: &[QualityBand], seed: u64, p: &DegradeParams) -> Result<Corpus> {
    if packs.is_empty() || packs.iter().all(|pk| pk.slices.is_empty()) {
        return Err(Error::Empty("no slices to degrade"));
    }
    let mut corpus = Corpus::default();
    for pack in packs {
        for (i, s) in pack.slices.iter().enumerate() {
            for &band in bands {
                let ps = pair_seed(seed, &pack.subject_id, i, band);
                match degrade_to_band(&pack.subject_id, i, &s.image, &s.mask, s.ratio, band, ps, p) {
                    Ok(pair) => corpus.pairs.push(pair),
                    Err(e @ Error::BandUnreachable { .. }) => {
                        log::warn!("{} slice {i} band {band}: {e}", pack.subject_id);
                        corpus.skipped.push(SkippedBand {
                            subject_id: pack.subject_id.clone(),
                            slice_index: i,
                            band,
                            error: e,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(corpus)
}
