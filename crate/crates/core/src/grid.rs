//! Dense 3D grids in voxel order `(x, y, z)` with `x` varying fastest.
//!
//! 2D slices are grids with `dims[2] == 1`, so an axial slice of a volume is
//! a contiguous run of the backing buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

/// Integer label grid; 0 is background.
pub type Mask = Grid<u8>;
/// Scalar intensity grid.
pub type Image = Grid<f32>;

impl<T: Copy> Grid<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::ShapeMismatch(alloc::format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { dims, data }
    }

    /// Builds a 2D grid (`dims[2] == 1`).
    pub fn plane(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec([width, height, 1], data)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.dims == other.dims
    }

    pub fn ensure_same_shape<U>(&self, other: &Grid<U>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(alloc::format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Axial slice `z` as a 2D grid.
    pub fn slice_z(&self, z: usize) -> Grid<T> {
        let n = self.dims[0] * self.dims[1];
        Grid {
            dims: [self.dims[0], self.dims[1], 1],
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    /// Stacks equally-shaped 2D grids along `z`.
    pub fn stack(slices: &[Grid<T>]) -> Result<Self> {
        let first = slices.first().ok_or(Error::Empty("no slices to stack"))?;
        let [w, h, _] = first.dims;
        let mut data = Vec::with_capacity(w * h * slices.len());
        for s in slices {
            if s.dims != [w, h, 1] {
                return Err(Error::ShapeMismatch(alloc::format!(
                    "slice {:?} vs {:?}",
                    s.dims,
                    [w, h, 1]
                )));
            }
            data.extend_from_slice(&s.data);
        }
        Ok(Self {
            dims: [w, h, slices.len()],
            data,
        })
    }
}

impl Mask {
    /// Largest label present (0 for an empty mask).
    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct nonzero labels.
    pub fn labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (1..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}
