//! Spatial VAE trained adversarially on clean masks. Its latent space is
//! the manifold the diffusion model restores onto.

use candle_core::{Device, Module, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nnqc_core::grid::Mask;
use nnqc_core::metrics::dsc;
use nnqc_core::rng::{derive_seed, seeded, standard_normal};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::VaeConfig;
use crate::error::{Error, Result};
use crate::nn::{argmax_channels, silu, softmax_channels, upsample2, Conv2d, ConvGeometry, GroupNorm, ParamStore};

/// Latent channel count, fixed for every configuration.
pub const LATENT_CHANNELS: usize = 2;

const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

/// One-hot `(L+1, N, H, W)` encoding of 2D masks (background included).
pub fn one_hot(masks: &[&Mask], num_classes: usize, device: &Device) -> Result<Tensor> {
    let first = masks.first().ok_or(Error::Model("empty batch".into()))?;
    let [w, h, d] = first.dims();
    if d != 1 {
        return Err(Error::Model(format!("expected 2D masks, got {:?}", first.dims())));
    }
    let n = masks.len();
    let mut data = vec![0f32; num_classes * n * h * w];
    for (i, m) in masks.iter().enumerate() {
        if m.dims() != first.dims() {
            return Err(Error::Model("masks in a batch must share a shape".into()));
        }
        for (p, &l) in m.data().iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::Model(format!("label {l} with {num_classes} classes")));
            }
            data[(l * n + i) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (num_classes, n, h, w), device)?)
}

/// Label planes from `(C, N, H, W)` logits.
pub fn logits_to_masks(logits: &Tensor) -> Result<Vec<Mask>> {
    let (_, _, h, w) = logits.dims4()?;
    argmax_channels(logits)?
        .into_iter()
        .map(|v| Ok(Mask::plane(w, h, v)?))
        .collect()
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            n1: GroupNorm::new(ps, &format!("{name}.norm1"), groups, ch)?,
            c1: Conv2d::k3(ps, &format!("{name}.conv1"), ch, ch)?,
            n2: GroupNorm::new(ps, &format!("{name}.norm2"), groups, ch)?,
            c2: Conv2d::k3(ps, &format!("{name}.conv2"), ch, ch)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(&silu(&self.n1.forward(x)?)?)?;
        let h = self.c2.forward(&silu(&self.n2.forward(&h)?)?)?;
        Ok((x + h)?)
    }
}

pub struct Vae {
    params: ParamStore,
    num_classes: usize,
    factor: usize,
    enc_in: Conv2d,
    enc_blocks: Vec<ResBlock>,
    enc_down: Vec<Conv2d>,
    enc_norm: GroupNorm,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_blocks: Vec<ResBlock>,
    dec_up: Vec<Conv2d>,
    dec_norm: GroupNorm,
    dec_out: Conv2d,
    /// Multiplies posterior means before diffusion so latents have unit scale.
    pub latent_scale: f32,
}

impl Vae {
    /// `num_labels` foreground classes, so `num_labels + 1` one-hot channels.
    pub fn new(cfg: &VaeConfig, num_labels: u8, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new(seed);
        let nc = num_labels as usize + 1;
        let w = &cfg.widths;
        let g = cfg.groups;
        let levels = w.len();
        let enc_in = Conv2d::k3(&mut ps, "encoder.conv_in", nc, w[0])?;
        let mut enc_blocks = Vec::new();
        let mut enc_down = Vec::new();
        for i in 0..levels {
            enc_blocks.push(ResBlock::new(&mut ps, &format!("encoder.block{i}"), w[i], g)?);
            if i + 1 < levels {
                enc_down.push(Conv2d::down(&mut ps, &format!("encoder.down{i}"), w[i], w[i + 1])?);
            }
        }
        let enc_norm = GroupNorm::new(&mut ps, "encoder.norm_out", g, w[levels - 1])?;
        let enc_out = Conv2d::k3(&mut ps, "encoder.conv_out", w[levels - 1], 2 * LATENT_CHANNELS)?;
        let dec_in = Conv2d::k3(&mut ps, "decoder.conv_in", LATENT_CHANNELS, w[levels - 1])?;
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        for i in (0..levels).rev() {
            dec_blocks.push(ResBlock::new(&mut ps, &format!("decoder.block{i}"), w[i], g)?);
            if i > 0 {
                dec_up.push(Conv2d::k3(&mut ps, &format!("decoder.up{i}"), w[i], w[i - 1])?);
            }
        }
        let dec_norm = GroupNorm::new(&mut ps, "decoder.norm_out", g, w[0])?;
        let dec_out = Conv2d::k3(&mut ps, "decoder.conv_out", w[0], nc)?;
        Ok(Self {
            params: ps,
            num_classes: nc,
            factor: cfg.compression_factor,
            enc_in,
            enc_blocks,
            enc_down,
            enc_norm,
            enc_out,
            dec_in,
            dec_blocks,
            dec_up,
            dec_norm,
            dec_out,
            latent_scale: 1.0,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn compression_factor(&self) -> usize {
        self.factor
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// One-hot `(L+1, N, H, W)` to posterior `(mu, logvar)`, each
    /// `(2, N, H/f, W/f)`.
    pub fn encode(&self, onehot: &Tensor) -> Result<(Tensor, Tensor)> {
        let (c, _, h, w) = onehot.dims4()?;
        if c != self.num_classes {
            return Err(Error::Model(format!(
                "encoder expects {} channels, got {c}",
                self.num_classes
            )));
        }
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Model(format!("{h}x{w} not divisible by {}", self.factor)));
        }
        let mut x = self.enc_in.forward(onehot)?;
        for (i, block) in self.enc_blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if let Some(down) = self.enc_down.get(i) {
                x = down.forward(&x)?;
            }
        }
        let out = self.enc_out.forward(&silu(&self.enc_norm.forward(&x)?)?)?;
        let mu = out.narrow(0, 0, LATENT_CHANNELS)?;
        let logvar = out
            .narrow(0, LATENT_CHANNELS, LATENT_CHANNELS)?
            .clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1)?;
        Ok((mu, logvar))
    }

    /// Latent `(2, N, h, w)` to class logits `(L+1, N, h·f, w·f)`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (c, ..) = z.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Model(format!("latent has {c} channels")));
        }
        let mut x = self.dec_in.forward(z)?;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if let Some(up) = self.dec_up.get(i) {
                x = up.forward(&upsample2(&x)?)?;
            }
        }
        Ok(self.dec_out.forward(&silu(&self.dec_norm.forward(&x)?)?)?)
    }

    /// Posterior means of 2D masks, detached, in batches.
    pub fn encode_mean(&self, masks: &[&Mask]) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in masks.chunks(64) {
            let x = one_hot(chunk, self.num_classes, self.device())?;
            parts.push(self.encode(&x)?.0.detach());
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Deterministic reconstruction through the posterior mean.
    pub fn reconstruct(&self, masks: &[&Mask]) -> Result<Vec<Mask>> {
        let mut out = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(64) {
            let mu = self.encode_mean(chunk)?;
            out.extend(logits_to_masks(&self.decode(&mu)?)?);
        }
        Ok(out)
    }

    /// Sets `latent_scale` to the inverse standard deviation of the
    /// posterior means of `masks`.
    pub fn fit_latent_scale(&mut self, masks: &[&Mask]) -> Result<f32> {
        let mu = self.encode_mean(masks)?.flatten_all()?.to_vec1::<f32>()?;
        let n = mu.len() as f64;
        let mean = mu.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = mu.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        self.latent_scale = if var > 0.0 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        Ok(self.latent_scale)
    }
}

/// `z = mu + exp(logvar / 2) · ε` with `ε ~ N(0, 1)` drawn from `seed`.
pub fn reparameterize(mu: &Tensor, logvar: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = seeded(seed);
    let eps: Vec<f32> = (0..mu.elem_count()).map(|_| standard_normal(&mut rng) as f32).collect();
    let eps = Tensor::from_vec(eps, mu.shape(), mu.device())?;
    Ok((mu + (logvar * 0.5)?.exp()?.mul(&eps)?)?)
}

/// Closed-form KL to N(0, 1), summed over latent elements and averaged over
/// the batch (dimension 1).
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let n = mu.dim(1)? as f64;
    let per = ((mu.sqr()? + logvar.exp()?)? - 1.0)?.sub(logvar)?;
    Ok((per.sum_all()? * (0.5 / n))?)
}

/// Generalized Dice loss between class probabilities and a one-hot target,
/// both `(C, N, H, W)`. Class weights are `1 / (target volume)²`; classes
/// absent from the target get the largest finite weight.
pub fn generalized_dice_loss(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    let c = target.dim(0)?;
    let volumes = target.flatten_from(1)?.sum(1)?.to_vec1::<f32>()?;
    let mut weights: Vec<f32> = volumes
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / (v * v) } else { f32::NAN })
        .collect();
    let max_w = weights.iter().copied().filter(|w| w.is_finite()).fold(0.0f32, f32::max);
    let fill = if max_w > 0.0 { max_w } else { 1.0 };
    weights.iter_mut().filter(|w| w.is_nan()).for_each(|w| *w = fill);
    let w = Tensor::from_vec(weights, c, probs.device())?;
    let inter = (probs * target)?.flatten_from(1)?.sum(1)?;
    let total = (probs + target)?.flatten_from(1)?.sum(1)?;
    let num = (inter * &w)?.sum_all()?;
    let den = (total * &w)?.sum_all()?;
    Ok((1.0 - (num * 2.0)?.div(&den)?)?)
}

/// `log(1 + exp(x))`, stable for large `|x|`.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Frozen random-feature extractor for the perceptual term.
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(seed);
        let k3 = ConvGeometry { k: 3, stride: 1, pad: 1 };
        let s2 = ConvGeometry { k: 3, stride: 2, pad: 1 };
        let convs = vec![
            Conv2d::he(&mut ps, "perceptual.0", num_classes, 16, k3)?.detach(),
            Conv2d::he(&mut ps, "perceptual.1", 16, 32, s2)?.detach(),
            Conv2d::he(&mut ps, "perceptual.2", 32, 32, s2)?.detach(),
        ];
        Ok(Self { convs })
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (mut fa, mut fb) = (a.clone(), b.clone());
        let mut acc: Option<Tensor> = None;
        for conv in &self.convs {
            fa = silu(&conv.forward(&fa)?)?;
            fb = silu(&conv.forward(&fb)?)?;
            let d = (&fa - &fb)?.sqr()?.mean_all()?;
            acc = Some(match acc {
                Some(s) => (s + d)?,
                None => d,
            });
        }
        acc.ok_or(Error::Model("empty perceptual net".into()))
    }
}

/// PatchGAN discriminator: three stride-2 and two stride-1 4×4 convolutions
/// (70×70 receptive field), one logit per patch.
pub struct Discriminator {
    params: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
}

impl Discriminator {
    pub fn new(num_classes: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new(seed);
        let s2 = ConvGeometry { k: 4, stride: 2, pad: 1 };
        let s1 = ConvGeometry { k: 4, stride: 1, pad: 1 };
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c_in = num_classes;
        let last = *widths.last().unwrap_or(&16);
        let plan: Vec<(usize, ConvGeometry)> = (0..3)
            .map(|i| (*widths.get(i).unwrap_or(&last), s2))
            .chain([(last, s1), (1, s1)])
            .collect();
        for (i, (c_out, g)) in plan.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("disc.conv{i}"), c_in, *c_out, *g)?);
            if i > 0 && i + 1 < plan.len() {
                norms.push(GroupNorm::new(&mut ps, &format!("disc.norm{i}"), 1, *c_out)?);
            }
            c_in = *c_out;
        }
        Ok(Self { params: ps, convs, norms })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i + 1 < n {
                if i > 0 {
                    h = self.norms[i - 1].forward(&h)?;
                }
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }

    /// Non-saturating loss: real patches toward 1, fake toward 0.
    pub fn loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let r = softplus(&self.forward(real)?.neg()?)?.mean_all()?;
        let f = softplus(&self.forward(fake)?)?.mean_all()?;
        Ok((r + f)?)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeLossParts {
    pub total: f64,
    pub kld: f64,
    pub perc: f64,
    pub adv: f64,
    pub dice: f64,
}

impl VaeLossParts {
    fn is_finite(&self) -> bool {
        [self.total, self.kld, self.perc, self.adv, self.dice].iter().all(|v| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f32>()? as f64)
}

/// Weighted VAE objective. `disc_fake` holds discriminator logits on the
/// reconstruction (ignored when `lambda_adv == 0`). Non-finite components
/// are an error.
pub fn vae_loss(
    target: &Tensor,
    logits: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    disc_fake: Option<&Tensor>,
    perceptual: &PerceptualNet,
    cfg: &VaeConfig,
) -> Result<(Tensor, VaeLossParts)> {
    let probs = softmax_channels(logits)?;
    let kld = kl_divergence(mu, logvar)?;
    let dice = generalized_dice_loss(&probs, target)?;
    let perc = if cfg.lambda_perc > 0.0 {
        perceptual.distance(&probs, target)?
    } else {
        Tensor::new(0f32, target.device())?
    };
    let adv = match disc_fake {
        Some(d) if cfg.lambda_adv > 0.0 => softplus(&d.neg()?)?.mean_all()?,
        _ => Tensor::new(0f32, target.device())?,
    };
    let total = ((((&kld * cfg.lambda_kld)? + (&perc * cfg.lambda_perc)?)? + (&adv * cfg.lambda_adv)?)?
        + (&dice * cfg.lambda_dice)?)?;
    let parts = VaeLossParts {
        total: scalar(&total)?,
        kld: scalar(&kld)?,
        perc: scalar(&perc)?,
        adv: scalar(&adv)?,
        dice: scalar(&dice)?,
    };
    if !parts.is_finite() {
        return Err(Error::Divergence {
            stage: "vae",
            step: 0,
            detail: format!("non-finite loss {parts:?}"),
        });
    }
    Ok((total, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub loss: VaeLossParts,
    pub disc_loss: f64,
    /// Mean over held-out subjects of the 3D Dice between the stacked
    /// reconstructions and the stacked inputs.
    pub held_out_dice: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainLog {
    pub first_step: Option<VaeLossParts>,
    pub epochs: Vec<VaeEpoch>,
    pub disc_updates: usize,
}

/// Subject-level reconstruction Dice: slices of each subject are stacked
/// and compared in 3D, then averaged over subjects.
pub fn held_out_dice(vae: &Vae, subjects: &[Vec<Mask>]) -> Result<f64> {
    let mut acc = 0.0;
    for slices in subjects {
        let refs: Vec<&Mask> = slices.iter().collect();
        let rec = vae.reconstruct(&refs)?;
        let a = Mask::stack(slices)?;
        let b = Mask::stack(&rec)?;
        acc += dsc(&a, &b)?;
    }
    Ok(acc / subjects.len().max(1) as f64)
}

/// Trains the VAE-GAN on clean 2D masks. Generator and discriminator
/// updates alternate per batch; with `lambda_adv == 0` the discriminator is
/// never updated.
pub fn train_vae_gan(
    train: &[Mask],
    held_out: &[Vec<Mask>],
    num_labels: u8,
    cfg: &VaeConfig,
    seed: u64,
) -> Result<(Vae, Discriminator, VaeTrainLog)> {
    if train.is_empty() {
        return Err(Error::Model("no training masks".into()));
    }
    let mut vae = Vae::new(cfg, num_labels, derive_seed(seed, &[1]))?;
    let disc = Discriminator::new(vae.num_classes(), &cfg.disc_widths, derive_seed(seed, &[2]))?;
    let perceptual = PerceptualNet::new(vae.num_classes(), cfg.perceptual_seed)?;
    let adam = |lr: f64, beta1: f64| ParamsAdamW {
        lr,
        beta1,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut opt_g = AdamW::new(vae.params().vars(), adam(cfg.learning_rate, 0.9))?;
    let mut opt_d = AdamW::new(disc.params().vars(), adam(cfg.disc_learning_rate, 0.5))?;
    let use_disc = cfg.lambda_adv > 0.0;
    let mut log = VaeTrainLog::default();
    let mut bad_steps = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seeded(derive_seed(seed, &[3, epoch as u64])));
        let mut sums = VaeLossParts::default();
        let mut disc_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let masks: Vec<&Mask> = idx.iter().map(|&i| &train[i]).collect();
            let x = one_hot(&masks, vae.num_classes(), vae.device())?;
            let (mu, logvar) = vae.encode(&x)?;
            let z = reparameterize(&mu, &logvar, derive_seed(seed, &[4, epoch as u64, b as u64]))?;
            let logits = vae.decode(&z)?;
            let fake_logits = if use_disc {
                Some(disc.forward(&softmax_channels(&logits)?)?)
            } else {
                None
            };
            let (loss, parts) = match vae_loss(&x, &logits, &mu, &logvar, fake_logits.as_ref(), &perceptual, cfg) {
                Ok(v) => v,
                Err(Error::Divergence { detail, .. }) => {
                    bad_steps += 1;
                    log::warn!("vae step {step}: {detail}");
                    if bad_steps >= cfg.divergence_patience {
                        return Err(Error::Divergence {
                            stage: "vae",
                            step,
                            detail,
                        });
                    }
                    step += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            bad_steps = 0;
            if log.first_step.is_none() {
                log.first_step = Some(parts);
            }
            opt_g.backward_step(&loss)?;
            if use_disc {
                let fake = softmax_channels(&logits)?.detach();
                let d_loss = disc.loss(&x, &fake)?;
                disc_sum += scalar(&d_loss)?;
                opt_d.backward_step(&d_loss)?;
                log.disc_updates += 1;
            }
            sums.total += parts.total;
            sums.kld += parts.kld;
            sums.perc += parts.perc;
            sums.adv += parts.adv;
            sums.dice += parts.dice;
            batches += 1;
            step += 1;
        }
        let nb = batches.max(1) as f64;
        let mean = VaeLossParts {
            total: sums.total / nb,
            kld: sums.kld / nb,
            perc: sums.perc / nb,
            adv: sums.adv / nb,
            dice: sums.dice / nb,
        };
        let dice = if held_out.is_empty() {
            None
        } else {
            Some(held_out_dice(&vae, held_out)?)
        };
        log::info!(
            "vae epoch {epoch}: loss {:.4} dice-loss {:.4} perc {:.4} kld {:.1} disc {:.4} held-out dice {:?}",
            mean.total,
            mean.dice,
            mean.perc,
            mean.kld,
            disc_sum / nb,
            dice
        );
        log.epochs.push(VaeEpoch {
            epoch,
            loss: mean,
            disc_loss: disc_sum / nb,
            held_out_dice: dice,
        });
    }
    let refs: Vec<&Mask> = train.iter().collect();
    vae.fit_latent_scale(&refs)?;
    Ok((vae, disc, log))
}

#[cfg(test)]
fn zeros_like_latent(n: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((LATENT_CHANNELS, n, h, w), candle_core::DType::F32, device)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            widths: vec![4, 8, 8],
            disc_widths: vec![4, 8, 8],
            groups: 2,
            epochs: 1,
            batch_size: 4,
            ..VaeConfig::default()
        }
    }

    fn disk(n: usize, r: f64) -> Mask {
        Mask::from_fn([n, n, 1], |x, y, _| {
            let c = n as f64 / 2.0;
            let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
            if d < r / 2.0 {
                2
            } else if d < r {
                1
            } else {
                0
            }
        })
    }

    fn scalar_t(v: f32) -> Tensor {
        Tensor::from_vec(vec![v], (1, 1, 1, 1), &Device::Cpu).unwrap()
    }

    #[test]
    fn kl_closed_form() {
        let zero = scalar_t(0.0);
        assert_eq!(scalar(&kl_divergence(&zero, &zero).unwrap()).unwrap(), 0.0);
        let kl = scalar(&kl_divergence(&scalar_t(1.0), &zero).unwrap()).unwrap();
        assert!((kl - 0.5).abs() < 1e-7);
    }

    #[test]
    fn shapes_and_finiteness() {
        let vae = Vae::new(&small_cfg(), 2, 0).unwrap();
        let m = disk(16, 6.0);
        let empty = Mask::filled([16, 16, 1], 0);
        let x = one_hot(&[&m, &empty], 3, &Device::Cpu).unwrap();
        let (mu, lv) = vae.encode(&x).unwrap();
        assert_eq!(mu.dims(), &[2, 2, 4, 4]);
        assert_eq!(lv.dims(), &[2, 2, 4, 4]);
        let logits = vae.decode(&mu).unwrap();
        assert_eq!(logits.dims(), &[3, 2, 16, 16]);
        let all: Vec<f32> = logits.flatten_all().unwrap().to_vec1().unwrap();
        assert!(all.iter().all(|v| v.is_finite()));
        let zero = zeros_like_latent(1, 4, 4, &Device::Cpu).unwrap();
        let from_zero: Vec<f32> = vae.decode(&zero).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(from_zero.iter().all(|v| v.is_finite()));
        let (mu2, _) = vae.encode(&x).unwrap();
        assert_eq!(
            mu.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            mu2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert!(vae.encode(&x.narrow(0, 0, 2).unwrap()).is_err());
    }

    #[test]
    fn dice_loss_bounds() {
        let m = disk(16, 6.0);
        let t = one_hot(&[&m], 3, &Device::Cpu).unwrap();
        assert_eq!(scalar(&generalized_dice_loss(&t, &t).unwrap()).unwrap(), 0.0);
        let uniform = (t.ones_like().unwrap() / 3.0).unwrap();
        let l = scalar(&generalized_dice_loss(&uniform, &t).unwrap()).unwrap();
        assert!(l > 0.0 && l <= 1.0, "{l}");
        let wrong = one_hot(&[&Mask::filled([16, 16, 1], 1)], 3, &Device::Cpu).unwrap();
        let l = scalar(&generalized_dice_loss(&wrong, &t).unwrap()).unwrap();
        assert!(l > 0.5 && l <= 1.0, "{l}");
    }

    #[test]
    fn loss_recomposes_from_parts() {
        let cfg = small_cfg();
        let vae = Vae::new(&cfg, 2, 3).unwrap();
        let disc = Discriminator::new(3, &cfg.disc_widths, 4).unwrap();
        let perc = PerceptualNet::new(3, 5).unwrap();
        let m = disk(32, 10.0);
        let x = one_hot(&[&m, &m], 3, &Device::Cpu).unwrap();
        let (mu, lv) = vae.encode(&x).unwrap();
        let logits = vae.decode(&mu).unwrap();
        let d = disc.forward(&softmax_channels(&logits).unwrap()).unwrap();
        let (_, p) = vae_loss(&x, &logits, &mu, &lv, Some(&d), &perc, &cfg).unwrap();
        let re = cfg.lambda_kld * p.kld + cfg.lambda_perc * p.perc + cfg.lambda_adv * p.adv + cfg.lambda_dice * p.dice;
        assert!((re - p.total).abs() <= 1e-6 * p.total.abs().max(1.0), "{re} vs {}", p.total);
        assert!(p.adv > 0.0 && p.perc > 0.0);
    }

    #[test]
    fn reparameterize_limits_and_determinism() {
        let mu = Tensor::from_vec(vec![0.5f32; 8], (2, 1, 2, 2), &Device::Cpu).unwrap();
        let lv = Tensor::from_vec(vec![-60.0f32; 8], (2, 1, 2, 2), &Device::Cpu).unwrap();
        let z: Vec<f32> = reparameterize(&mu, &lv, 1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(z.iter().all(|v| (v - 0.5).abs() < 1e-9));
        let lv0 = lv.zeros_like().unwrap();
        let a = reparameterize(&mu, &lv0, 9).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = reparameterize(&mu, &lv0, 9).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_adversarial_weight_skips_discriminator() {
        let cfg = VaeConfig {
            lambda_adv: 0.0,
            ..small_cfg()
        };
        let masks: Vec<Mask> = (0..4).map(|i| disk(16, 4.0 + i as f64)).collect();
        let (_, disc, log) = train_vae_gan(&masks, &[], 2, &cfg, 0).unwrap();
        assert_eq!(log.disc_updates, 0);
        let fresh = Discriminator::new(3, &cfg.disc_widths, derive_seed(0, &[2])).unwrap();
        assert_eq!(disc.params().digest().unwrap(), fresh.params().digest().unwrap());
        assert_eq!(log.first_step.unwrap().adv, 0.0);
    }

    #[test]
    fn first_step_is_reproducible() {
        let cfg = small_cfg();
        let masks: Vec<Mask> = (0..4).map(|i| disk(32, 8.0 + i as f64)).collect();
        let (_, _, a) = train_vae_gan(&masks, &[], 2, &cfg, 7).unwrap();
        let (_, _, b) = train_vae_gan(&masks, &[], 2, &cfg, 7).unwrap();
        assert_eq!(a.first_step, b.first_step);
        assert_eq!(a.disc_updates, 1);
    }
}
