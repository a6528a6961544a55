//! Synthetic nested-ellipsoid volumes with matching intensity images.
//!
//! Each subject is a stack of axial slices through tilted, rotated nested
//! ellipsoids. The in-plane size follows an asymmetric profile along the
//! axial axis (largest a little past the middle), so slice position carries
//! information about shape.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::fingerprint::VolumePair;
use crate::grid::{Image, Mask};
use crate::orientation::Orientation;
use crate::rng::{derive_seed, seeded, standard_normal};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PhantomSpec {
    pub n_subjects: usize,
    /// In-plane grid `[width, height]`.
    pub grid: [usize; 2],
    /// Inclusive range of axial slice counts.
    pub slices: (usize, usize),
    pub n_classes: u8,
    /// Noise standard deviation relative to the class intensity step.
    pub noise: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            n_subjects: 40,
            grid: [64, 64],
            slices: (12, 20),
            n_classes: 2,
            noise: 0.1,
            spacing: [1.0, 1.0, 2.0],
            seed: 0,
        }
    }
}

pub const BACKGROUND_INTENSITY: f32 = 100.0;
pub const CLASS_INTENSITY_STEP: f32 = 400.0;

/// In-plane scale of the outer ellipsoid at relative axial position `u`.
pub fn axial_profile(u: f64) -> f64 {
    let z = -0.9 + 1.5 * u;
    libm::sqrt((1.0 - z * z).max(0.0))
}

struct Subject {
    centre: [f64; 2],
    tilt: f64,
    semi_axes: [f64; 2],
    angle: f64,
    inner_offset: [f64; 2],
}

pub fn generate_phantoms(spec: &PhantomSpec) -> Result<Vec<VolumePair>> {
    if spec.n_classes < 1 {
        return Err(Error::InvalidArgument("phantoms need at least one class".into()));
    }
    if spec.slices.0 < 1 || spec.slices.0 > spec.slices.1 {
        return Err(Error::InvalidArgument(format!("slice range {:?}", spec.slices)));
    }
    if spec.grid.iter().any(|&g| g < 8) {
        return Err(Error::InvalidArgument(format!("grid {:?} too small", spec.grid)));
    }
    Ok((0..spec.n_subjects).map(|s| subject(spec, s)).collect())
}

fn subject(spec: &PhantomSpec, index: usize) -> VolumePair {
    let mut rng = seeded(derive_seed(spec.seed, &[index as u64]));
    let [w, h] = spec.grid;
    let (wf, hf) = (w as f64, h as f64);
    let nz = rng.random_range(spec.slices.0..=spec.slices.1);
    let s = Subject {
        centre: [wf / 2.0 + rng.random_range(-3.0..3.0), hf / 2.0 + rng.random_range(-3.0..3.0)],
        tilt: rng.random_range(-4.0..4.0),
        semi_axes: [rng.random_range(0.26..0.34) * wf, rng.random_range(0.22..0.30) * hf],
        angle: rng.random_range(-0.4..0.4),
        inner_offset: [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
    };
    let n = spec.n_classes as usize;
    let (sin, cos) = (libm::sin(s.angle), libm::cos(s.angle));
    let mut mask = Mask::filled([w, h, nz], 0);
    for z in 0..nz {
        let u = crate::fingerprint::slice_ratio(z, nz);
        let p = axial_profile(u);
        let cy = s.centre[1] + s.tilt * (u - 0.5);
        for y in 0..h {
            for x in 0..w {
                let mut label = 0u8;
                for k in 1..=n {
                    // Inner classes shrink linearly down to 0.55 of the outer ellipse.
                    let scale = p * (1.0 - 0.45 * (k - 1) as f64 / (n.max(2) - 1) as f64);
                    let shift = if k > 1 { s.inner_offset } else { [0.0, 0.0] };
                    let dx = x as f64 + 0.5 - s.centre[0] - shift[0];
                    let dy = y as f64 + 0.5 - cy - shift[1];
                    let rx = cos * dx + sin * dy;
                    let ry = -sin * dx + cos * dy;
                    let (a, b) = (s.semi_axes[0] * scale, s.semi_axes[1] * scale);
                    if rx * rx / (a * a) + ry * ry / (b * b) <= 1.0 {
                        label = k as u8;
                    }
                }
                mask.set(x, y, z, label);
            }
        }
    }
    let sigma = spec.noise * CLASS_INTENSITY_STEP as f64;
    let image = Image::from_vec(
        mask.dims(),
        mask.data()
            .iter()
            .map(|&l| {
                BACKGROUND_INTENSITY
                    + CLASS_INTENSITY_STEP * l as f32
                    + (sigma * standard_normal(&mut rng)) as f32
            })
            .collect(),
    )
    .expect("dims match");
    VolumePair {
        subject_id: format!("phantom_{index:03}"),
        image,
        mask,
        spacing: spec.spacing,
        orientation: Orientation::RAS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_labels_and_determinism() {
        let spec = PhantomSpec {
            n_subjects: 5,
            ..PhantomSpec::default()
        };
        let a = generate_phantoms(&spec).unwrap();
        assert_eq!(a.len(), 5);
        for v in &a {
            v.validate().unwrap();
            assert!(v.mask.max_label() <= 2);
            assert_eq!(v.mask.labels(), alloc::vec![1, 2]);
            let nz = v.mask.dims()[2];
            assert!((12..=20).contains(&nz));
        }
        assert_eq!(a, generate_phantoms(&spec).unwrap());
    }

    #[test]
    fn mid_slice_larger_than_end_slices() {
        let spec = PhantomSpec {
            n_subjects: 6,
            ..PhantomSpec::default()
        };
        for v in generate_phantoms(&spec).unwrap() {
            let nz = v.mask.dims()[2];
            let area = |z: usize| v.mask.slice_z(z).foreground_count();
            let mid = area(nz / 2);
            assert!(mid > area(0) && mid > area(nz - 1), "{} {mid}", v.subject_id);
        }
    }

    #[test]
    fn every_slice_has_every_class() {
        let spec = PhantomSpec {
            n_subjects: 4,
            n_classes: 3,
            ..PhantomSpec::default()
        };
        for v in generate_phantoms(&spec).unwrap() {
            for z in 0..v.mask.dims()[2] {
                assert_eq!(v.mask.slice_z(z).labels(), alloc::vec![1, 2, 3]);
            }
        }
    }
}
