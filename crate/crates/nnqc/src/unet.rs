//! Conditional denoising UNet over `(3, N, h, w)` inputs (noisy latent plus
//! mask guidance), predicting the 2-channel noise. The condition enters
//! through cross-attention at every resolution level.

use candle_core::{Module, Tensor};

use crate::config::LdmConfig;
use crate::error::{Error, Result};
use crate::manifold::LATENT_CHANNELS;
use crate::nn::{multi_head_attention, silu, sinusoidal_embedding, upsample2, Conv2d, GroupNorm, Linear, ParamStore};

pub const INPUT_CHANNELS: usize = LATENT_CHANNELS + 1;

struct TimeResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    temb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl TimeResBlock {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, t_dim: usize, groups: usize) -> Result<Self> {
        let in_groups = if c_in % groups == 0 { groups } else { 1 };
        Ok(Self {
            n1: GroupNorm::new(ps, &format!("{name}.norm1"), in_groups, c_in)?,
            c1: Conv2d::k3(ps, &format!("{name}.conv1"), c_in, c_out)?,
            temb: Linear::new(ps, &format!("{name}.time"), t_dim, c_out)?,
            n2: GroupNorm::new(ps, &format!("{name}.norm2"), groups, c_out)?,
            c2: Conv2d::k3(ps, &format!("{name}.conv2"), c_out, c_out)?,
            skip: if c_in != c_out {
                Some(Conv2d::k1(ps, &format!("{name}.skip"), c_in, c_out)?)
            } else {
                None
            },
        })
    }

    /// `temb` is `(N, t_dim)`.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&silu(&self.n1.forward(x)?)?)?;
        let t = self.temb.forward(&silu(temb)?)?.t()?;
        let (c, n) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((c, n, 1, 1))?)?;
        let h = self.c2.forward(&silu(&self.n2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl CrossAttention {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, d_c: usize, heads: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), groups, ch)?,
            q: Linear::no_bias(ps, &format!("{name}.to_q"), ch, ch)?,
            k: Linear::no_bias(ps, &format!("{name}.to_k"), d_c, ch)?,
            v: Linear::no_bias(ps, &format!("{name}.to_v"), d_c, ch)?,
            out: Linear::new(ps, &format!("{name}.to_out"), ch, ch)?,
            heads,
        })
    }

    /// `x` `(C, N, H, W)` attends to `ctx` `(N, L, d_c)`.
    fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (c, n, h, w) = x.dims4()?;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((c, n, h * w))?
            .permute((1, 2, 0))?
            .contiguous()?;
        let q = self.q.forward(&tokens)?;
        let k = self.k.forward(ctx)?;
        let v = self.v.forward(ctx)?;
        let (a, _) = multi_head_attention(&q, &k, &v, self.heads)?;
        let o = self
            .out
            .forward(&a)?
            .permute((2, 0, 1))?
            .contiguous()?
            .reshape((c, n, h, w))?;
        Ok((x + o)?)
    }
}

pub struct UNet {
    params: ParamStore,
    time_dim: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    down_blocks: Vec<(TimeResBlock, CrossAttention)>,
    downsamplers: Vec<Conv2d>,
    mid1: TimeResBlock,
    mid_attn: CrossAttention,
    mid2: TimeResBlock,
    up_blocks: Vec<(TimeResBlock, CrossAttention)>,
    upsamplers: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    pub fn new(cfg: &LdmConfig, d_c: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed);
        let w = &cfg.widths;
        let g = cfg.groups;
        let heads = cfg.attn_heads;
        let t_dim = 2 * cfg.time_dim;
        let levels = w.len();
        let time_fc1 = Linear::new(&mut ps, "time.fc1", cfg.time_dim, t_dim)?;
        let time_fc2 = Linear::new(&mut ps, "time.fc2", t_dim, t_dim)?;
        let conv_in = Conv2d::k3(&mut ps, "conv_in", INPUT_CHANNELS, w[0])?;
        let mut down_blocks = Vec::new();
        let mut downsamplers = Vec::new();
        let mut ch = w[0];
        for i in 0..levels {
            down_blocks.push((
                TimeResBlock::new(&mut ps, &format!("down{i}.res"), ch, w[i], t_dim, g)?,
                CrossAttention::new(&mut ps, &format!("down{i}.attn"), w[i], d_c, heads, g)?,
            ));
            ch = w[i];
            if i + 1 < levels {
                downsamplers.push(Conv2d::down(&mut ps, &format!("down{i}.downsample"), ch, ch)?);
            }
        }
        let mid1 = TimeResBlock::new(&mut ps, "mid.res1", ch, ch, t_dim, g)?;
        let mid_attn = CrossAttention::new(&mut ps, "mid.attn", ch, d_c, heads, g)?;
        let mid2 = TimeResBlock::new(&mut ps, "mid.res2", ch, ch, t_dim, g)?;
        let mut up_blocks = Vec::new();
        let mut upsamplers = Vec::new();
        for i in (0..levels).rev() {
            up_blocks.push((
                TimeResBlock::new(&mut ps, &format!("up{i}.res"), ch + w[i], w[i], t_dim, g)?,
                CrossAttention::new(&mut ps, &format!("up{i}.attn"), w[i], d_c, heads, g)?,
            ));
            ch = w[i];
            if i > 0 {
                upsamplers.push(Conv2d::k3(&mut ps, &format!("up{i}.upsample"), ch, ch)?);
            }
        }
        let norm_out = GroupNorm::new(&mut ps, "norm_out", g, w[0])?;
        let conv_out = Conv2d::k3(&mut ps, "conv_out", w[0], LATENT_CHANNELS)?;
        Ok(Self {
            params: ps,
            time_dim: cfg.time_dim,
            time_fc1,
            time_fc2,
            conv_in,
            down_blocks,
            downsamplers,
            mid1,
            mid_attn,
            mid2,
            up_blocks,
            upsamplers,
            norm_out,
            conv_out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// `x` `(3, N, h, w)`, one timestep per sample, `ctx` `(N, L, d_c)`.
    pub fn forward(&self, x: &Tensor, timesteps: &[usize], ctx: &Tensor) -> Result<Tensor> {
        let (c, n, ..) = x.dims4()?;
        if c != INPUT_CHANNELS || timesteps.len() != n || ctx.dim(0)? != n {
            return Err(Error::Model(format!(
                "unet input {:?} with {} timesteps and context {:?}",
                x.dims(),
                timesteps.len(),
                ctx.dims()
            )));
        }
        let ts: Vec<f32> = timesteps.iter().map(|&t| t as f32).collect();
        let temb = sinusoidal_embedding(&ts, self.time_dim, 10_000.0, self.params.device())?;
        let temb = self.time_fc2.forward(&silu(&self.time_fc1.forward(&temb)?)?)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        for (i, (res, attn)) in self.down_blocks.iter().enumerate() {
            h = attn.forward(&res.forward(&h, &temb)?, ctx)?;
            skips.push(h.clone());
            if let Some(down) = self.downsamplers.get(i) {
                h = down.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        h = self.mid_attn.forward(&h, ctx)?;
        h = self.mid2.forward(&h, &temb)?;
        for (i, (res, attn)) in self.up_blocks.iter().enumerate() {
            let skip = skips.pop().ok_or(Error::Model("unet skip underflow".into()))?;
            h = Tensor::cat(&[&h, &skip], 0)?;
            h = attn.forward(&res.forward(&h, &temb)?, ctx)?;
            if let Some(up) = self.upsamplers.get(i) {
                h = up.forward(&upsample2(&h)?)?;
            }
        }
        Ok(self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn output_shape_and_condition_sensitivity() {
        let cfg = LdmConfig {
            widths: vec![8, 16],
            groups: 4,
            time_dim: 8,
            ..LdmConfig::default()
        };
        let unet = UNet::new(&cfg, 12, 0).unwrap();
        let x = Tensor::ones((3, 2, 8, 8), candle_core::DType::F32, &Device::Cpu).unwrap();
        let ctx = Tensor::zeros((2, 1, 12), candle_core::DType::F32, &Device::Cpu).unwrap();
        let y = unet.forward(&x, &[1, 500], &ctx).unwrap();
        assert_eq!(y.dims(), &[2, 2, 8, 8]);
        let ctx2 = (ctx.ones_like().unwrap() * 3.0).unwrap();
        let y2 = unet.forward(&x, &[1, 500], &ctx2).unwrap();
        let d = (y - y2).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d > 0.0);
        assert!(unet.forward(&x, &[1], &ctx).is_err());
    }
}
