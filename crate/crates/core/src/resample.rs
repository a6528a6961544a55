//! Grid resizing with half-pixel-centre alignment: output voxel `i` of an
//! axis resized from `n` to `m` samples the input at `(i + 0.5) n / m - 0.5`.

use alloc::vec::Vec;

use crate::grid::Grid;

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f32,
}

fn linear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(s) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                w1: (s - i0 as f64) as f32,
            }
        })
        .collect()
}

fn nearest_index(n_in: usize, n_out: usize) -> Vec<usize> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| (libm::floor((i as f64 + 0.5) * scale) as usize).min(n_in - 1))
        .collect()
}

/// Trilinear resize (axes of unchanged extent are copied exactly).
pub fn resize_linear(g: &Grid<f32>, dims: [usize; 3]) -> Grid<f32> {
    let din = g.dims();
    if din == dims {
        return g.clone();
    }
    let tx = linear_taps(din[0], dims[0]);
    let ty = linear_taps(din[1], dims[1]);
    let tz = linear_taps(din[2], dims[2]);
    Grid::from_fn(dims, |x, y, z| {
        let (a, b, c) = (tx[x], ty[y], tz[z]);
        let lerp_x = |yy: usize, zz: usize| {
            let v0 = g.get(a.i0, yy, zz);
            let v1 = g.get(a.i1, yy, zz);
            v0 + (v1 - v0) * a.w1
        };
        let plane = |zz: usize| {
            let v0 = lerp_x(b.i0, zz);
            let v1 = lerp_x(b.i1, zz);
            v0 + (v1 - v0) * b.w1
        };
        let v0 = plane(c.i0);
        let v1 = plane(c.i1);
        v0 + (v1 - v0) * c.w1
    })
}

pub fn resize_nearest<T: Copy>(g: &Grid<T>, dims: [usize; 3]) -> Grid<T> {
    let din = g.dims();
    if din == dims {
        return g.clone();
    }
    let ix = nearest_index(din[0], dims[0]);
    let iy = nearest_index(din[1], dims[1]);
    let iz = nearest_index(din[2], dims[2]);
    Grid::from_fn(dims, |x, y, z| g.get(ix[x], iy[y], iz[z]))
}

/// Copies `g` into a grid of `dims`, placing input voxel `(0,0,0)` at
/// `offset` (which may be negative, cropping). Uncovered voxels take `fill`.
pub fn crop_or_pad<T: Copy>(g: &Grid<T>, dims: [usize; 3], offset: [isize; 3], fill: T) -> Grid<T> {
    let din = g.dims();
    Grid::from_fn(dims, |x, y, z| {
        let o = [x, y, z];
        let mut s = [0usize; 3];
        for i in 0..3 {
            let v = o[i] as isize - offset[i];
            if v < 0 || v >= din[i] as isize {
                return fill;
            }
            s[i] = v as usize;
        }
        g.get(s[0], s[1], s[2])
    })
}
