//! Voxel-axis orientation codes (`"RAS"`, `"LPS"`, ...) and the axis
//! permutations/flips that move a grid between them.

use core::fmt;

use crate::error::{Error, Result};
use crate::grid::Grid;

/// Three axis letters, one per voxel axis, naming the world direction the
/// axis increases towards. World space is RAS+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "alloc::string::String", into = "alloc::string::String"))]
pub struct Orientation([u8; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation(*b"RAS");

    pub fn parse(code: &str) -> Result<Self> {
        let b = code.as_bytes();
        if b.len() != 3 {
            return Err(Error::InvalidArgument(alloc::format!("orientation code {code:?}")));
        }
        let mut seen = [false; 3];
        let mut out = [0u8; 3];
        for (i, &c) in b.iter().enumerate() {
            let c = c.to_ascii_uppercase();
            let (axis, _) = letter_axis(c)
                .ok_or_else(|| Error::InvalidArgument(alloc::format!("orientation code {code:?}")))?;
            if core::mem::replace(&mut seen[axis], true) {
                return Err(Error::InvalidArgument(alloc::format!(
                    "orientation code {code:?} repeats an axis"
                )));
            }
            out[i] = c;
        }
        Ok(Self(out))
    }

    /// Axis codes of a voxel-to-world affine (rows are world x, y, z).
    /// Each voxel axis is assigned its dominant world axis, largest
    /// components first so that oblique affines still yield a permutation.
    pub fn from_affine(affine: &[[f64; 4]; 4]) -> Result<Self> {
        let mut used_world = [false; 3];
        let mut used_voxel = [false; 3];
        let mut out = [0u8; 3];
        for _ in 0..3 {
            let mut best = (0.0f64, 0usize, 0usize);
            for v in 0..3 {
                if used_voxel[v] {
                    continue;
                }
                for w in 0..3 {
                    if used_world[w] {
                        continue;
                    }
                    let m = affine[w][v].abs();
                    if m > best.0 {
                        best = (m, v, w);
                    }
                }
            }
            let (m, v, w) = best;
            if !(m > 0.0) {
                return Err(Error::InvalidArgument("singular affine".into()));
            }
            used_voxel[v] = true;
            used_world[w] = true;
            out[v] = axis_letter(w, affine[w][v] > 0.0);
        }
        Ok(Self(out))
    }

    pub fn as_str(&self) -> &str {
        core::str::from_utf8(&self.0).unwrap_or("???")
    }

    fn axes(&self) -> [(usize, bool); 3] {
        // Codes are validated on construction.
        [0, 1, 2].map(|i| letter_axis(self.0[i]).unwrap())
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl TryFrom<alloc::string::String> for Orientation {
    type Error = Error;
    fn try_from(s: alloc::string::String) -> Result<Self> {
        Self::parse(&s)
    }
}

impl From<Orientation> for alloc::string::String {
    fn from(o: Orientation) -> Self {
        o.as_str().into()
    }
}

fn letter_axis(c: u8) -> Option<(usize, bool)> {
    match c {
        b'R' => Some((0, true)),
        b'L' => Some((0, false)),
        b'A' => Some((1, true)),
        b'P' => Some((1, false)),
        b'S' => Some((2, true)),
        b'I' => Some((2, false)),
        _ => None,
    }
}

fn axis_letter(world: usize, positive: bool) -> u8 {
    match (world, positive) {
        (0, true) => b'R',
        (0, false) => b'L',
        (1, true) => b'A',
        (1, false) => b'P',
        (2, true) => b'S',
        _ => b'I',
    }
}

/// Output axis `i` reads input axis `perm[i]`, reversed when `flip[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AxisTransform {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl AxisTransform {
    pub const IDENTITY: AxisTransform = AxisTransform {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    pub fn between(from: Orientation, to: Orientation) -> Self {
        let src = from.axes();
        let dst = to.axes();
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for i in 0..3 {
            let j = (0..3).find(|&j| src[j].0 == dst[i].0).unwrap();
            perm[i] = j;
            flip[i] = src[j].1 != dst[i].1;
        }
        Self { perm, flip }
    }

    pub fn inverse(&self) -> Self {
        let mut perm = [0; 3];
        let mut flip = [false; 3];
        for i in 0..3 {
            perm[self.perm[i]] = i;
            flip[self.perm[i]] = self.flip[i];
        }
        Self { perm, flip }
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        self.perm.map(|p| dims[p])
    }

    pub fn permute_spacing(&self, spacing: [f64; 3]) -> [f64; 3] {
        self.perm.map(|p| spacing[p])
    }

    pub fn apply<T: Copy>(&self, g: &Grid<T>) -> Grid<T> {
        if *self == Self::IDENTITY {
            return g.clone();
        }
        let din = g.dims();
        let dout = self.out_dims(din);
        Grid::from_fn(dout, |x, y, z| {
            let o = [x, y, z];
            let mut src = [0usize; 3];
            for i in 0..3 {
                src[self.perm[i]] = if self.flip[i] { dout[i] - 1 - o[i] } else { o[i] };
            }
            g.get(src[0], src[1], src[2])
        })
    }
}
