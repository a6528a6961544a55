//! Team of Experts: a positional expert E1 (MLP on the slice ratio), a
//! frozen vision expert E2 (patch tokens of the image), and the
//! cross-attention that fuses their opinions into the condition `c`.

use std::path::Path;

use candle_core::{Device, Module, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{ToeConfig, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{multi_head_attention, silu, sinusoidal_embedding, Conv2d, ConvGeometry, Linear, ParamStore};

/// E1: slice ratio to a single token `(N, 1, d_e)`.
pub struct PositionalExpert {
    params: ParamStore,
    layers: Vec<Linear>,
}

impl PositionalExpert {
    pub fn new(hidden: &[usize], d_e: usize, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(seed);
        let mut layers = Vec::new();
        let mut d_in = 1;
        for (i, &h) in hidden.iter().chain(std::iter::once(&d_e)).enumerate() {
            layers.push(Linear::new(&mut ps, &format!("e1.fc{i}"), d_in, h)?);
            d_in = h;
        }
        Ok(Self { params: ps, layers })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, ratios: &[f64]) -> Result<Tensor> {
        if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Model(format!("slice ratio {r} outside [0, 1]")));
        }
        let n = ratios.len();
        let x: Vec<f32> = ratios.iter().map(|&r| r as f32).collect();
        let mut h = Tensor::from_vec(x, (n, 1), self.params.device())?;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = silu(&h)?;
            }
        }
        let d = h.dim(1)?;
        Ok(h.reshape((n, 1, d))?)
    }
}

/// E2: a frozen image encoder producing patch tokens `(N, T, d_e)`.
pub trait VisionEncoder: Send + Sync {
    /// Identity string recorded in checkpoints.
    fn identity(&self) -> String;
    /// Images `(1, N, H, W)` in `[0, 1]` to tokens `(N, T, d_e)`.
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn digest(&self) -> Result<String>;
    fn save(&self, path: &Path) -> Result<()>;
}

/// Strided 3×3 convolutions, average pooling to a `grid × grid` patch map,
/// a 1×1 projection to `d_e`, per-token standardization and a 2D
/// sinusoidal position code. Weights never receive gradients.
pub struct ConvPatchEncoder {
    params: ParamStore,
    convs: Vec<Conv2d>,
    proj: Conv2d,
    grid: usize,
    d_e: usize,
    positions: Tensor,
    identity: String,
}

impl ConvPatchEncoder {
    fn build(widths: &[usize], grid: usize, d_e: usize, seed: u64, identity: String) -> Result<Self> {
        if d_e % 4 != 0 {
            return Err(Error::Model(format!("d_e {d_e} must be a multiple of 4")));
        }
        let mut ps = ParamStore::new(seed);
        let s2 = ConvGeometry { k: 3, stride: 2, pad: 1 };
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::he(&mut ps, &format!("e2.conv{i}"), c_in, w, s2)?);
            c_in = w;
        }
        let proj = Conv2d::he(&mut ps, "e2.proj", c_in, d_e, ConvGeometry { k: 1, stride: 1, pad: 0 })?;
        let positions = patch_positions(grid, d_e, ps.device())?;
        let mut enc = Self {
            params: ps,
            convs,
            proj,
            grid,
            d_e,
            positions,
            identity,
        };
        enc.freeze();
        Ok(enc)
    }

    fn freeze(&mut self) {
        self.convs = self.convs.iter().map(Conv2d::detach).collect();
        self.proj = self.proj.detach();
    }

    pub fn random(widths: &[usize], grid: usize, d_e: usize, seed: u64) -> Result<Self> {
        let id = format!("random_conv(seed={seed},widths={widths:?},grid={grid},d_e={d_e})");
        Self::build(widths, grid, d_e, seed, id)
    }

    pub fn load(path: &Path, widths: &[usize], grid: usize, d_e: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sha = hex::encode(Sha256::digest(&bytes));
        let mut enc = Self::build(widths, grid, d_e, 0, format!("pretrained(sha256={sha})"))?;
        enc.params.load(path)?;
        enc.freeze();
        Ok(enc)
    }

    pub fn from_config(cfg: &ToeConfig) -> Result<Box<dyn VisionEncoder>> {
        match &cfg.vision_encoder {
            VisionEncoderConfig::RandomConv { seed, widths, patch_grid } => {
                Ok(Box::new(Self::random(widths, *patch_grid, cfg.d_e, *seed)?))
            }
            VisionEncoderConfig::Pretrained { path, widths, patch_grid } => {
                match Self::load(path, widths, *patch_grid, cfg.d_e) {
                    Ok(enc) => Ok(Box::new(enc)),
                    Err(e) => {
                        let VisionEncoderConfig::RandomConv { seed, widths, patch_grid } = VisionEncoderConfig::default()
                        else {
                            unreachable!()
                        };
                        log::warn!(
                            "vision encoder {} unavailable ({e}); using the random substitute",
                            path.display()
                        );
                        Ok(Box::new(Self::random(&widths, patch_grid, cfg.d_e, seed)?))
                    }
                }
            }
        }
    }
}

/// Half the channels encode the patch row, half the column.
fn patch_positions(grid: usize, d_e: usize, device: &Device) -> Result<Tensor> {
    let rows: Vec<f32> = (0..grid * grid).map(|i| (i / grid) as f32).collect();
    let cols: Vec<f32> = (0..grid * grid).map(|i| (i % grid) as f32).collect();
    let r = sinusoidal_embedding(&rows, d_e / 2, 100.0, device)?;
    let c = sinusoidal_embedding(&cols, d_e / 2, 100.0, device)?;
    Ok(Tensor::cat(&[r, c], 1)?)
}

impl VisionEncoder for ConvPatchEncoder {
    fn identity(&self) -> String {
        self.identity.clone()
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let images = images.detach();
        let mut h = images;
        for conv in &self.convs {
            h = silu(&conv.forward(&h)?)?;
        }
        let (c, n, hh, ww) = h.dims4()?;
        let g = self.grid;
        if hh % g != 0 || ww % g != 0 {
            return Err(Error::Model(format!("feature map {hh}x{ww} does not pool to {g}x{g}")));
        }
        let pooled = h
            .reshape((c, n, g, hh / g, g, ww / g))?
            .mean(5)?
            .mean(3)?;
        let tokens = self
            .proj
            .forward(&pooled)?
            .reshape((self.d_e, n, g * g))?
            .permute((1, 2, 0))?
            .contiguous()?;
        let mean = tokens.mean_keepdim(2)?;
        let centred = tokens.broadcast_sub(&mean)?;
        let std = (centred.sqr()?.mean_keepdim(2)? + 1e-6)?.sqrt()?;
        Ok(centred.broadcast_div(&std)?.broadcast_add(&self.positions)?)
    }

    fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }
}

/// Cross-attention fusion `c = concat_h softmax(Q_h K_hᵀ / √d_k) V_h` with
/// `Q = F_Q(o1)`, `K = F_K(o2)`, `V = F_V(o2)`.
pub struct Fuse {
    params: ParamStore,
    fq: Linear,
    fk: Linear,
    fv: Linear,
    heads: usize,
}

impl Fuse {
    pub fn new(d_e: usize, d_c: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || d_c % heads != 0 {
            return Err(Error::Model(format!("{heads} heads do not divide d_c {d_c}")));
        }
        let mut ps = ParamStore::new(seed);
        Ok(Self {
            fq: Linear::no_bias(&mut ps, "fuse.f_q", d_e, d_c)?,
            fk: Linear::no_bias(&mut ps, "fuse.f_k", d_e, d_c)?,
            fv: Linear::no_bias(&mut ps, "fuse.f_v", d_e, d_c)?,
            params: ps,
            heads,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn projections(&self) -> (&Linear, &Linear, &Linear) {
        (&self.fq, &self.fk, &self.fv)
    }

    /// Returns `c` `(N, n_tokens(o1), d_c)` and the attention weights
    /// `(N, heads, n_tokens(o1), n_tokens(o2))`.
    pub fn forward(&self, o1: &Tensor, o2: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n1, _, d1) = o1.dims3()?;
        let (n2, _, d2) = o2.dims3()?;
        let d_e = self.fq.weight().dim(1)?;
        if n1 != n2 || d1 != d_e || d2 != d_e {
            return Err(Error::Model(format!(
                "opinions {:?} and {:?} do not match d_e {d_e}",
                o1.dims(),
                o2.dims()
            )));
        }
        let q = self.fq.forward(o1)?;
        let k = self.fk.forward(o2)?;
        let v = self.fv.forward(o2)?;
        multi_head_attention(&q, &k, &v, self.heads)
    }
}

/// The three experts together.
pub struct Toe {
    pub e1: PositionalExpert,
    pub e2: Box<dyn VisionEncoder>,
    pub fuse: Fuse,
}

impl Toe {
    pub fn new(cfg: &ToeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            e1: PositionalExpert::new(&cfg.e1_widths, cfg.d_e, nnqc_core::rng::derive_seed(seed, &[1]))?,
            e2: ConvPatchEncoder::from_config(cfg)?,
            fuse: Fuse::new(cfg.d_e, cfg.d_c, cfg.n_heads, nnqc_core::rng::derive_seed(seed, &[2]))?,
        })
    }

    /// Image planes `H × W` (x fastest) to E2 tokens, in batches.
    pub fn vision_tokens(&self, images: &[&[f32]], h: usize, w: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in images.chunks(64) {
            let data: Vec<f32> = chunk.iter().flat_map(|im| im.iter().copied()).collect();
            let t = Tensor::from_vec(data, (1, chunk.len(), h, w), self.fuse.params().device())?;
            parts.push(self.e2.encode(&t)?);
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// `c = fuse(E1(ratio), o2)`.
    pub fn condition(&self, ratios: &[f64], o2: &Tensor) -> Result<Tensor> {
        let o1 = self.e1.forward(ratios)?;
        Ok(self.fuse.forward(&o1, o2)?.0)
    }
}
