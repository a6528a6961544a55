//! Small neural-network toolkit on top of candle.
//!
//! Convolutional activations are kept channel-major, `(C, N, H, W)`, so a
//! convolution is one im2col followed by a single matmul and the result
//! needs no transpose. Parameters are created by [`ParamStore`] from a
//! seeded generator, which keeps initialization reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Module, Shape, Tensor, Var};
use nnqc_core::rng::{seeded, standard_normal, SeededRng};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn contiguous_f32<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// `(C, N, H, W)` to patch columns `(C·k·k, N·Ho·Wo)`.
struct Im2Col(ConvGeometry);

/// Adjoint of [`Im2Col`]: scatters columns back, summing overlaps.
struct Col2Im {
    g: ConvGeometry,
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = contiguous_f32(s, l)?;
        let (c, n, h, w) = l.shape().dims4()?;
        let ConvGeometry { k, stride, pad } = self.0;
        let (ho, wo) = (self.0.out_size(h), self.0.out_size(w));
        let cols = n * ho * wo;
        let mut out = vec![0f32; c * k * k * cols];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for ni in 0..n {
                        let src = &x[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = srow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((c * k * k, cols))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = Col2Im {
            g: self.0,
            dims: arg.dims4()?,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let cols_data = contiguous_f32(s, l)?;
        let (c, n, h, w) = self.dims;
        let ConvGeometry { k, stride, pad } = self.g;
        let (ho, wo) = (self.g.out_size(h), self.g.out_size(w));
        let cols = n * ho * wo;
        let mut out = vec![0f32; c * n * h * w];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols_data[row * cols..(row + 1) * cols];
                    for ni in 0..n {
                        let dst = &mut out[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                            let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                            for (ox, v) in srow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((CpuStorage::F32(out), Shape::from((c, n, h, w))))
    }
}

pub fn im2col(x: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

/// Named parameters with deterministic initialization.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: SeededRng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: seeded(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(&mut self.rng) as f32).collect();
        self.insert(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.as_tensor().flatten_all()?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the value stored in `path`; names and
    /// shapes must match exactly.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        if map.len() != self.vars.len() {
            return Err(Error::Model(format!(
                "{}: {} tensors, model has {}",
                path.display(),
                map.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let t = map
                .get(name)
                .ok_or_else(|| Error::Model(format!("{}: missing tensor {name}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Model(format!(
                    "{name}: stored shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

/// `y = x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        Ok(Self {
            w: ps.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?,
            b: ps.uniform(&format!("{name}.bias"), &[d_out], bound)?,
        })
    }

    /// Without bias; used for attention projections.
    pub fn no_bias(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f32).sqrt();
        let w = ps.uniform(&format!("{name}.weight"), &[d_out, d_in], bound)?;
        let b = Tensor::zeros(d_out, DType::F32, ps.device())?;
        Ok(Self { w, b })
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    /// Copy that takes part in no gradient computation.
    pub fn detach(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap_or(&0);
        let rows = x.elem_count() / d_in.max(1);
        let y = x.reshape((rows, d_in))?.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.w.dim(0)?;
        y.reshape(out)
    }
}

/// 2D convolution on `(C, N, H, W)` activations.
#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    geometry: ConvGeometry,
    c_out: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, geometry: ConvGeometry) -> Result<Self> {
        let fan_in = c_in * geometry.k * geometry.k;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self::with_bound(ps, name, c_in, c_out, geometry, bound)
    }

    /// Variance-preserving uniform init, for networks that are never trained.
    pub fn he(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, geometry: ConvGeometry) -> Result<Self> {
        let fan_in = c_in * geometry.k * geometry.k;
        let bound = (6.0 / fan_in as f32).sqrt();
        Self::with_bound(ps, name, c_in, c_out, geometry, bound)
    }

    fn with_bound(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        geometry: ConvGeometry,
        bound: f32,
    ) -> Result<Self> {
        let fan_in = c_in * geometry.k * geometry.k;
        Ok(Self {
            w: ps.uniform(&format!("{name}.weight"), &[c_out, fan_in], bound)?,
            b: ps.uniform(&format!("{name}.bias"), &[c_out, 1], 1.0 / (fan_in as f32).sqrt())?,
            geometry,
            c_out,
        })
    }

    /// 3×3, stride 1, same padding.
    pub fn k3(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(ps, name, c_in, c_out, ConvGeometry { k: 3, stride: 1, pad: 1 })
    }

    /// 3×3, stride 2, halving the spatial size.
    pub fn down(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(ps, name, c_in, c_out, ConvGeometry { k: 3, stride: 2, pad: 1 })
    }

    pub fn k1(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(ps, name, c_in, c_out, ConvGeometry { k: 1, stride: 1, pad: 0 })
    }

    pub fn detach(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
            ..*self
        }
    }

    /// Whether the weights take part in gradient computation.
    pub fn is_tracked(&self) -> bool {
        self.w.is_variable() || self.b.is_variable()
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (c, n, h, w) = x.dims4()?;
        let g = self.geometry;
        if h + 2 * g.pad < g.k || w + 2 * g.pad < g.k {
            candle_core::bail!("{h}x{w} input too small for a {}x{} kernel", g.k, g.k);
        }
        let (ho, wo) = (g.out_size(h), g.out_size(w));
        let cols = if g.k == 1 && g.stride == 1 && g.pad == 0 {
            x.reshape((c, n * h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col(g))?
        };
        self.w
            .matmul(&cols)?
            .broadcast_add(&self.b)?
            .reshape((self.c_out, n, ho, wo))
    }
}

/// Group normalization over `(C, N, H, W)` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Model(format!("{channels} channels in {groups} groups")));
        }
        Ok(Self {
            groups,
            gamma: ps.constant(&format!("{name}.weight"), &[channels, 1, 1, 1], 1.0)?,
            beta: ps.constant(&format!("{name}.bias"), &[channels, 1, 1, 1], 0.0)?,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (c, n, h, w) = x.dims4()?;
        let g = x.reshape((self.groups, c / self.groups, n, h * w))?;
        let mean = g.mean_keepdim(3)?.mean_keepdim(1)?;
        let centred = g.broadcast_sub(&mean)?;
        let var = centred.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centred.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed
            .reshape((c, n, h, w))?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Nearest-neighbour 2× upsampling of `(C, N, H, W)`.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, n, h, w) = x.dims4()?;
    Ok(x.reshape((c, n, h, 1, w, 1))?
        .broadcast_as((c, n, h, 2, w, 2))?
        .reshape((c, n, 2 * h, 2 * w))?)
}

/// `(B, L, D)` to `(B·heads, L, D/heads)`.
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    Ok(x.reshape((b, l, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * heads, l, d / heads))?)
}

/// Scaled dot-product attention with heads splitting the feature dimension.
/// Returns the concatenated head outputs `(B, Lq, D)` and the attention
/// weights `(B, heads, Lq, Lk)`.
pub fn multi_head_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    let (b, lq, d) = q.dims3()?;
    let (bk, lk, dk) = k.dims3()?;
    if heads == 0 || d % heads != 0 || dk != d || bk != b || v.dims3()? != (b, lk, d) {
        return Err(Error::Model(format!(
            "attention shapes q {:?} k {:?} v {:?} with {heads} heads",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    let dh = d / heads;
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    let weights = candle_nn::ops::softmax(&scores, candle_core::D::Minus1)?;
    let out = weights
        .matmul(&vh)?
        .reshape((b, heads, lq, dh))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, lq, d))?;
    Ok((out, weights.reshape((b, heads, lq, lk))?))
}

/// Sinusoidal embedding of scalar positions: `(N,)` to `(N, dim)`, sines
/// in the first half and cosines in the second.
pub fn sinusoidal_embedding(values: &[f32], dim: usize, max_period: f32, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let freqs = (0..half).map(|i| (-(max_period.ln()) * i as f32 / half as f32).exp() * v);
        let f: Vec<f32> = freqs.collect();
        out.extend(f.iter().map(|a| a.sin()));
        out.extend(f.iter().map(|a| a.cos()));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(out, (values.len(), dim), device)?)
}

/// `(N, C, H, W)` batch-major to the channel-major layout used here.
pub fn to_cnhw(x: &Tensor) -> Result<Tensor> {
    Ok(x.transpose(0, 1)?.contiguous()?)
}

pub fn mean_all(x: &Tensor) -> Result<f32> {
    Ok(x.mean_all()?.to_scalar::<f32>()?)
}

/// Softmax over channels of `(C, N, H, W)` logits.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, 0)?)
}

/// Argmax over channels of `(C, N, H, W)`, giving `N` planes of `H·W` labels.
pub fn argmax_channels(x: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (_, n, h, w) = x.dims4()?;
    let idx = x.argmax(0)?.to_dtype(DType::U32)?.reshape((n, h * w))?.to_vec2::<u32>()?;
    Ok(idx.into_iter().map(|r| r.into_iter().map(|v| v as u8).collect()).collect())
}
