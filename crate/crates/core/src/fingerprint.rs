//! Dataset fingerprints and the standardization they drive.
//!
//! A fingerprint summarizes a training dataset (median spacing, median
//! foreground extent, intensity percentiles inside the foreground, label
//! count). [`preprocess`] maps any volume of that dataset into fixed-size
//! axial slices in the canonical orientation; [`postprocess`] maps per-slice
//! masks back onto the original voxel grid.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, Mask};
use crate::metrics::percentile;
use crate::orientation::{AxisTransform, Orientation};
use crate::resample::{crop_or_pad, resize_linear, resize_nearest};

/// Resampling factors beyond this (either direction) indicate a broken header.
pub const MAX_RESAMPLING_FACTOR: f64 = 100.0;
/// In-plane crop window relative to the median foreground extent.
pub const CROP_MARGIN: f64 = 1.25;
pub const INTENSITY_LO_PERCENTILE: f64 = 0.005;
pub const INTENSITY_HI_PERCENTILE: f64 = 0.995;

#[derive(Debug, Clone, PartialEq)]
pub struct VolumePair {
    pub subject_id: String,
    pub image: Image,
    pub mask: Mask,
    /// Voxel size in mm along the grid axes.
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl VolumePair {
    pub fn validate(&self) -> Result<()> {
        self.image.ensure_same_shape(&self.mask)?;
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "{}: spacing {:?} must be positive",
                self.subject_id, self.spacing
            )));
        }
        if self.image.dims().iter().any(|&d| d == 0) {
            return Err(Error::DegenerateVolume(alloc::format!(
                "{}: dims {:?}",
                self.subject_id,
                self.image.dims()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DatasetFingerprint {
    /// mm, in canonical axis order.
    pub median_spacing: [f64; 3],
    /// Foreground bounding-box extent in voxels at `median_spacing`.
    pub median_foreground_size: [f64; 3],
    pub orientation: Orientation,
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    pub num_labels: u8,
    /// In-plane slice size `[width, height]`.
    pub target_size: [usize; 2],
}

impl DatasetFingerprint {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity_lo < self.intensity_hi) {
            return Err(Error::InvalidArgument("intensity_lo must be < intensity_hi".into()));
        }
        if self.num_labels < 1 {
            return Err(Error::InvalidArgument("num_labels must be >= 1".into()));
        }
        if self.target_size.contains(&0) {
            return Err(Error::InvalidArgument("target_size must be positive".into()));
        }
        if self.median_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("median_spacing must be positive".into()));
        }
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Foreground bounding-box extent per axis, `None` for an empty mask.
fn foreground_extent(mask: &Mask) -> Option<[usize; 3]> {
    let d = mask.dims();
    let mut lo = d;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..d[2] {
        for y in 0..d[1] {
            for x in 0..d[0] {
                if mask.get(x, y, z) != 0 {
                    any = true;
                    let p = [x, y, z];
                    for i in 0..3 {
                        lo[i] = lo[i].min(p[i]);
                        hi[i] = hi[i].max(p[i]);
                    }
                }
            }
        }
    }
    any.then(|| [0, 1, 2].map(|i| hi[i] - lo[i] + 1))
}

pub fn extract_fingerprint(dataset: &[VolumePair], target_size: [usize; 2]) -> Result<DatasetFingerprint> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset has no subjects"));
    }
    let canonical = Orientation::RAS;
    let mut spacings: [Vec<f64>; 3] = Default::default();
    let mut extents_mm: Vec<[f64; 3]> = Vec::new();
    let mut fg_values: Vec<f64> = Vec::new();
    let mut num_labels = 0u8;
    for pair in dataset {
        pair.validate()?;
        let t = AxisTransform::between(pair.orientation, canonical);
        let sp = t.permute_spacing(pair.spacing);
        for i in 0..3 {
            spacings[i].push(sp[i]);
        }
        num_labels = num_labels.max(pair.mask.max_label());
        if let Some(ext) = foreground_extent(&pair.mask) {
            let ext = t.out_dims(ext);
            extents_mm.push([0, 1, 2].map(|i| ext[i] as f64 * sp[i]));
        }
        fg_values.extend(
            pair.mask
                .data()
                .iter()
                .zip(pair.image.data())
                .filter(|(&m, _)| m != 0)
                .map(|(_, &v)| v as f64),
        );
    }
    if fg_values.is_empty() {
        return Err(Error::NoForeground);
    }
    let median_spacing = [0, 1, 2].map(|i| median(&mut spacings[i]));
    let median_foreground_size = [0, 1, 2].map(|i| {
        let mut v: Vec<f64> = extents_mm.iter().map(|e| e[i] / median_spacing[i]).collect();
        median(&mut v)
    });
    let intensity_lo = percentile(&mut fg_values, INTENSITY_LO_PERCENTILE);
    let intensity_hi = percentile(&mut fg_values, INTENSITY_HI_PERCENTILE);
    if !(intensity_lo < intensity_hi) {
        return Err(Error::DegenerateVolume(alloc::format!(
            "foreground intensities are constant ({intensity_lo})"
        )));
    }
    let fp = DatasetFingerprint {
        median_spacing,
        median_foreground_size,
        orientation: canonical,
        intensity_lo,
        intensity_hi,
        num_labels,
        target_size,
    };
    fp.validate()?;
    Ok(fp)
}

/// Relative axial position of slice `index` in a stack of `n`.
pub fn slice_ratio(index: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        index as f64 / (n - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub image: Image,
    pub mask: Mask,
    pub ratio: f64,
}

/// Everything needed to map standardized slices back to the source grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RestoreMeta {
    pub original_dims: [usize; 3],
    pub original_spacing: [f64; 3],
    /// Source orientation to canonical orientation.
    pub reorient: AxisTransform,
    pub resampled_dims: [usize; 3],
    pub crop_dims: [usize; 2],
    /// Position of the resampled grid's origin inside the crop window.
    pub crop_offset: [isize; 2],
    pub target_size: [usize; 2],
}

impl RestoreMeta {
    pub fn n_slices(&self) -> usize {
        self.resampled_dims[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicePack {
    pub subject_id: String,
    pub slices: Vec<Slice>,
    pub meta: RestoreMeta,
}

/// Clips to `[lo, hi]` and rescales to `[0, 1]`.
pub fn normalize_intensity(v: f32, lo: f64, hi: f64) -> f32 {
    ((v as f64).clamp(lo, hi) - lo) as f32 / (hi - lo) as f32
}

pub fn preprocess(pair: &VolumePair, fp: &DatasetFingerprint) -> Result<SlicePack> {
    pair.validate()?;
    fp.validate()?;
    if pair.mask.max_label() > fp.num_labels {
        return Err(Error::InvalidArgument(alloc::format!(
            "{}: label {} exceeds fingerprint num_labels {}",
            pair.subject_id,
            pair.mask.max_label(),
            fp.num_labels
        )));
    }
    let reorient = AxisTransform::between(pair.orientation, fp.orientation);
    let image = reorient.apply(&pair.image);
    let mask = reorient.apply(&pair.mask);
    let spacing = reorient.permute_spacing(pair.spacing);
    let dims = image.dims();

    let mut resampled_dims = [0usize; 3];
    for i in 0..3 {
        let factor = spacing[i] / fp.median_spacing[i];
        if factor > MAX_RESAMPLING_FACTOR || factor < 1.0 / MAX_RESAMPLING_FACTOR {
            return Err(Error::ExcessiveResampling { factor });
        }
        resampled_dims[i] = (libm::round(dims[i] as f64 * factor) as usize).max(1);
    }
    let image = resize_linear(&image, resampled_dims);
    let mask = resize_nearest(&mask, resampled_dims);
    let image = image.map(|v| normalize_intensity(v, fp.intensity_lo, fp.intensity_hi));

    let crop_dims = [0, 1].map(|i| (libm::ceil(fp.median_foreground_size[i] * CROP_MARGIN) as usize).max(1));
    let crop_offset = [0, 1].map(|i| (crop_dims[i] as isize - resampled_dims[i] as isize).div_euclid(2));
    let nz = resampled_dims[2];
    let crop3 = [crop_dims[0], crop_dims[1], nz];
    let off3 = [crop_offset[0], crop_offset[1], 0];
    let image = crop_or_pad(&image, crop3, off3, 0.0);
    let mask = crop_or_pad(&mask, crop3, off3, 0);

    let out3 = [fp.target_size[0], fp.target_size[1], nz];
    let image = resize_linear(&image, out3);
    let mask = resize_nearest(&mask, out3);

    let slices = (0..nz)
        .map(|z| Slice {
            image: image.slice_z(z),
            mask: mask.slice_z(z),
            ratio: slice_ratio(z, nz),
        })
        .collect();
    Ok(SlicePack {
        subject_id: pair.subject_id.clone(),
        slices,
        meta: RestoreMeta {
            original_dims: pair.image.dims(),
            original_spacing: pair.spacing,
            reorient,
            resampled_dims,
            crop_dims,
            crop_offset,
            target_size: fp.target_size,
        },
    })
}

/// Maps standardized 2D masks back to the source voxel grid (nearest
/// neighbour throughout).
pub fn postprocess(slices: &[Mask], meta: &RestoreMeta) -> Result<Mask> {
    if slices.len() != meta.n_slices() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "{} slices for a volume of {}",
            slices.len(),
            meta.n_slices()
        )));
    }
    let [tw, th] = meta.target_size;
    for s in slices {
        if s.dims() != [tw, th, 1] {
            return Err(Error::ShapeMismatch(alloc::format!(
                "slice {:?}, expected {:?}",
                s.dims(),
                [tw, th, 1]
            )));
        }
    }
    let nz = meta.n_slices();
    let stacked = Grid::stack(slices)?;
    let cropped = resize_nearest(&stacked, [meta.crop_dims[0], meta.crop_dims[1], nz]);
    let resampled = crop_or_pad(
        &cropped,
        meta.resampled_dims,
        [-meta.crop_offset[0], -meta.crop_offset[1], 0],
        0,
    );
    let canonical_dims = meta.reorient.out_dims(meta.original_dims);
    let canonical = resize_nearest(&resampled, canonical_dims);
    Ok(meta.reorient.inverse().apply(&canonical))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;
    use alloc::vec;

    fn pair(id: &str, dims: [usize; 3], spacing: [f64; 3]) -> VolumePair {
        let mask = Grid::from_fn(dims, |x, y, _| {
            let (cx, cy) = (dims[0] as f64 / 2.0, dims[1] as f64 / 2.0);
            let r2 = (x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy);
            if r2 < (dims[0] as f64 / 4.0) * (dims[0] as f64 / 4.0) {
                1
            } else {
                0
            }
        });
        let image = Grid::from_fn(dims, |x, y, z| 10.0 * mask.get(x, y, z) as f32 + (x + y) as f32);
        VolumePair {
            subject_id: id.into(),
            image,
            mask,
            spacing,
            orientation: Orientation::RAS,
        }
    }

    #[test]
    fn single_volume_spacing_is_identity() {
        let fp = extract_fingerprint(&[pair("a", [8, 8, 3], [1.0, 1.0, 2.0])], [8, 8]).unwrap();
        assert_eq!(fp.median_spacing, [1.0, 1.0, 2.0]);
        assert_eq!(fp.num_labels, 1);
    }

    #[test]
    fn median_of_three_spacings() {
        let d = [
            pair("a", [8, 8, 3], [1.0, 1.0, 1.0]),
            pair("b", [8, 8, 3], [1.0, 1.0, 2.0]),
            pair("c", [8, 8, 3], [1.0, 1.0, 4.0]),
        ];
        assert_eq!(extract_fingerprint(&d, [8, 8]).unwrap().median_spacing, [1.0, 1.0, 2.0]);
    }

    #[test]
    fn num_labels_is_max_label() {
        let mut p = pair("a", [8, 8, 2], [1.0; 3]);
        p.mask.set(0, 0, 0, 2);
        p.image.set(0, 0, 0, 50.0);
        assert_eq!(extract_fingerprint(&[p], [8, 8]).unwrap().num_labels, 2);
    }

    #[test]
    fn errors_on_empty_and_background_only() {
        assert_eq!(extract_fingerprint(&[], [8, 8]), Err(Error::Empty("dataset has no subjects")));
        let mut p = pair("a", [8, 8, 2], [1.0; 3]);
        p.mask.data_mut().iter_mut().for_each(|v| *v = 0);
        assert_eq!(extract_fingerprint(&[p], [8, 8]), Err(Error::NoForeground));
    }

    #[test]
    fn clip_and_rescale() {
        let v: Vec<f32> = [-100.0, 0.0, 5000.0]
            .iter()
            .map(|&x| normalize_intensity(x, 0.0, 1000.0))
            .collect();
        assert_eq!(v, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn ratios_of_ten_slices() {
        let r: Vec<f64> = (0..10).map(|i| slice_ratio(i, 10)).collect();
        assert_eq!(r[0], 0.0);
        assert!((r[1] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(r[9], 1.0);
        assert_eq!(slice_ratio(0, 1), 0.5);
    }

    #[test]
    fn rejects_corrupt_spacing() {
        let fp = extract_fingerprint(&[pair("a", [8, 8, 3], [1.0; 3])], [8, 8]).unwrap();
        let bad = pair("b", [8, 8, 3], [1.0, 1.0, 500.0]);
        assert!(matches!(preprocess(&bad, &fp), Err(Error::ExcessiveResampling { .. })));
    }

    #[test]
    fn slices_have_target_shape_and_unit_range() {
        let p = pair("a", [20, 16, 5], [1.0, 1.0, 2.0]);
        let fp = extract_fingerprint(&[p.clone()], [12, 12]).unwrap();
        let pack = preprocess(&p, &fp).unwrap();
        assert_eq!(pack.slices.len(), 5);
        for s in &pack.slices {
            assert_eq!(s.image.dims(), [12, 12, 1]);
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.mask.max_label() <= 1);
        }
    }

    #[test]
    fn postprocess_round_trip_lps() {
        let mut p = pair("a", [24, 20, 6], [0.8, 0.8, 2.0]);
        p.orientation = Orientation::parse("LPS").unwrap();
        let fp = extract_fingerprint(&[p.clone()], [32, 32]).unwrap();
        let pack = preprocess(&p, &fp).unwrap();
        let masks: Vec<Mask> = pack.slices.iter().map(|s| s.mask.clone()).collect();
        let back = postprocess(&masks, &pack.meta).unwrap();
        assert_eq!(back.dims(), p.mask.dims());
        assert!(dsc(&back, &p.mask).unwrap() >= 0.9);
    }

    #[test]
    fn postprocess_empty_and_count_mismatch() {
        let p = pair("a", [10, 10, 4], [1.0; 3]);
        let fp = extract_fingerprint(&[p.clone()], [16, 16]).unwrap();
        let pack = preprocess(&p, &fp).unwrap();
        let empty = vec![Mask::filled([16, 16, 1], 0); 4];
        let out = postprocess(&empty, &pack.meta).unwrap();
        assert_eq!(out.dims(), [10, 10, 4]);
        assert_eq!(out.foreground_count(), 0);
        assert!(postprocess(&empty[..3], &pack.meta).is_err());
    }
}
