//! Conditional latent diffusion: training on degraded/clean pairs with the
//! VAE and vision expert frozen, and deterministic DDIM sampling of pseudo
//! ground truths.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use nnqc_core::degrade::{subject_hash, DegradedPair};
use nnqc_core::grid::{Image, Mask};
use nnqc_core::rng::{derive_seed, seeded, standard_normal, SeededRng};
use nnqc_core::schedule::{ddim_step, ddim_timesteps, downsample_mask, forward_noise, previous_timestep, NoiseSchedule};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::LdmConfig;
use crate::error::{Error, Result};
use crate::manifold::{logits_to_masks, Vae, LATENT_CHANNELS};
use crate::toe::Toe;
use crate::unet::UNet;

/// `‖ε − ε̂‖²` averaged over latent elements and the batch.
pub fn ldm_loss(eps: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    if eps.dims() != eps_pred.dims() {
        return Err(Error::Model(format!("noise {:?} vs prediction {:?}", eps.dims(), eps_pred.dims())));
    }
    Ok((eps - eps_pred)?.sqr()?.mean_all()?)
}

/// Per-sample CHW planes stacked into channel-major `(C, N, h, w)`.
fn stack_cnhw(planes: &[&[f32]], channels: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
    let n = planes.len();
    let hw = h * w;
    let mut data = vec![0f32; channels * n * hw];
    for (i, p) in planes.iter().enumerate() {
        if p.len() != channels * hw {
            return Err(Error::Model(format!("plane of {} values, expected {}", p.len(), channels * hw)));
        }
        for c in 0..channels {
            data[(c * n + i) * hw..(c * n + i + 1) * hw].copy_from_slice(&p[c * hw..(c + 1) * hw]);
        }
    }
    Ok(Tensor::from_vec(data, (channels, n, h, w), device)?)
}

fn normal_vec(rng: &mut SeededRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| standard_normal(rng) as f32).collect()
}

/// Mask guidance channel `S_d` for each mask, `(1, N, h, w)`.
pub fn guidance(masks: &[&Mask], num_labels: u8, factor: usize, device: &Device) -> Result<Tensor> {
    let planes: Vec<Vec<f32>> = masks
        .iter()
        .map(|m| downsample_mask(m, num_labels, factor))
        .collect::<std::result::Result<_, _>>()?;
    let [w, h, _] = masks.first().ok_or(Error::Model("no masks".into()))?.dims();
    let refs: Vec<&[f32]> = planes.iter().map(|p| p.as_slice()).collect();
    stack_cnhw(&refs, 1, h / factor, w / factor, device)
}

/// Image planes of 2D slices, x fastest.
fn image_planes<'a>(images: &[&'a Image]) -> Vec<&'a [f32]> {
    images.iter().map(|im| im.data()).collect()
}

pub struct TrainSlice {
    pub subject_id: String,
    pub slice_index: usize,
    pub ratio: f64,
    /// Scaled posterior mean of the clean mask, CHW.
    pub z0: Vec<f32>,
    /// One guidance plane per degraded variant of this slice.
    pub guides: Vec<Vec<f32>>,
}

/// Everything the denoiser needs, precomputed with the frozen networks.
pub struct TrainingSet {
    pub slices: Vec<TrainSlice>,
    /// Vision tokens `(n_slices, T, d_e)`.
    pub o2: Tensor,
    pub latent_hw: (usize, usize),
}

impl TrainingSet {
    pub fn build(vae: &Vae, toe: &Toe, corpus: &[DegradedPair], num_labels: u8) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Model("empty training corpus".into()));
        }
        let f = vae.compression_factor();
        let mut groups: BTreeMap<(String, usize), Vec<&DegradedPair>> = BTreeMap::new();
        for p in corpus {
            groups.entry((p.subject_id.clone(), p.slice_index)).or_default().push(p);
        }
        let [w, h, _] = corpus[0].gt.dims();
        let (lh, lw) = (h / f, w / f);
        let firsts: Vec<&DegradedPair> = groups.values().map(|g| g[0]).collect();
        let gts: Vec<&Mask> = firsts.iter().map(|p| &p.gt).collect();
        let mu = (vae.encode_mean(&gts)? * vae.latent_scale as f64)?;
        let per = LATENT_CHANNELS * lh * lw;
        // (2, N, h, w) to per-slice CHW
        let mu = mu.permute((1, 0, 2, 3))?.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let images: Vec<&Image> = firsts.iter().map(|p| &p.image).collect();
        let o2 = toe.vision_tokens(&image_planes(&images), h, w)?;
        let mut slices = Vec::with_capacity(groups.len());
        for (i, ((subject_id, slice_index), pairs)) in groups.into_iter().enumerate() {
            let guides = pairs
                .iter()
                .map(|p| downsample_mask(&p.degraded, num_labels, f))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            slices.push(TrainSlice {
                subject_id,
                slice_index,
                ratio: pairs[0].ratio,
                z0: mu[i * per..(i + 1) * per].to_vec(),
                guides,
            });
        }
        Ok(Self {
            slices,
            o2,
            latent_hw: (lh, lw),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LdmTrainLog {
    pub first_step_loss: Option<f64>,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Optimizes the UNet, E1 and the fusion projections; the VAE and E2 are
/// never handed to the optimizer.
pub struct LdmTrainer<'a> {
    set: &'a TrainingSet,
    schedule: NoiseSchedule,
    opt: AdamW,
    batch_size: usize,
    patience: usize,
    bad_steps: usize,
    pub log: LdmTrainLog,
}

impl<'a> LdmTrainer<'a> {
    pub fn new(set: &'a TrainingSet, unet: &UNet, toe: &Toe, cfg: &LdmConfig) -> Result<Self> {
        let mut vars = unet.params().vars();
        vars.extend(toe.e1.params().vars());
        vars.extend(toe.fuse.params().vars());
        let opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            set,
            schedule: cfg.schedule()?,
            opt,
            batch_size: cfg.batch_size,
            patience: cfg.divergence_patience,
            bad_steps: 0,
            log: LdmTrainLog::default(),
        })
    }

    /// One optimizer step on the given slices, one guidance variant each.
    /// Returns the loss before the update.
    pub fn step(&mut self, unet: &UNet, toe: &Toe, batch: &[(usize, usize)], rng: &mut SeededRng) -> Result<f64> {
        let (lh, lw) = self.set.latent_hw;
        let per = LATENT_CHANNELS * lh * lw;
        let t_max = self.schedule.t_train();
        let mut zt = Vec::with_capacity(batch.len());
        let mut eps = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for &(i, _) in batch {
            let t = rng.random_range(1..=t_max);
            let e = normal_vec(rng, per);
            zt.push(forward_noise(&self.set.slices[i].z0, t, &e, &self.schedule)?);
            eps.push(e);
            ts.push(t);
        }
        let device = self.set.o2.device();
        let planes: Vec<Vec<f32>> = batch
            .iter()
            .zip(&zt)
            .map(|(&(i, g), z)| [z.as_slice(), self.set.slices[i].guides[g].as_slice()].concat())
            .collect();
        let refs: Vec<&[f32]> = planes.iter().map(|p| p.as_slice()).collect();
        let x = stack_cnhw(&refs, LATENT_CHANNELS + 1, lh, lw, device)?;
        let eref: Vec<&[f32]> = eps.iter().map(|e| e.as_slice()).collect();
        let eps = stack_cnhw(&eref, LATENT_CHANNELS, lh, lw, device)?;
        let idx: Vec<u32> = batch.iter().map(|&(i, _)| i as u32).collect();
        let o2 = self.set.o2.index_select(&Tensor::new(idx.as_slice(), device)?, 0)?;
        let ratios: Vec<f64> = batch.iter().map(|&(i, _)| self.set.slices[i].ratio).collect();
        let c = toe.condition(&ratios, &o2)?;
        let pred = unet.forward(&x, &ts, &c)?;
        let loss = ldm_loss(&eps, &pred)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            self.bad_steps += 1;
            if self.bad_steps >= self.patience {
                return Err(Error::Divergence {
                    stage: "ldm",
                    step: self.log.steps,
                    detail: format!("loss {value}"),
                });
            }
            log::warn!("ldm step {}: non-finite loss, skipped", self.log.steps);
        } else {
            self.bad_steps = 0;
            self.opt.backward_step(&loss)?;
        }
        if self.log.first_step_loss.is_none() {
            self.log.first_step_loss = Some(value);
        }
        self.log.steps += 1;
        Ok(value)
    }

    /// One pass over all slices with one uniformly drawn variant per slice.
    pub fn epoch(&mut self, unet: &UNet, toe: &Toe, epoch: usize, seed: u64) -> Result<f64> {
        let mut rng = seeded(derive_seed(seed, &[epoch as u64]));
        let mut items: Vec<(usize, usize)> = self
            .set
            .slices
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.guides.is_empty())
            .map(|(i, s)| (i, rng.random_range(0..s.guides.len())))
            .collect();
        items.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n = 0usize;
        for batch in items.chunks(self.batch_size) {
            let l = self.step(unet, toe, batch, &mut rng)?;
            if l.is_finite() {
                total += l * batch.len() as f64;
                n += batch.len();
            }
        }
        let mean = total / n.max(1) as f64;
        self.log.epoch_losses.push(mean);
        Ok(mean)
    }
}

pub fn train_ldm(
    set: &TrainingSet,
    unet: &UNet,
    toe: &Toe,
    cfg: &LdmConfig,
    seed: u64,
) -> Result<LdmTrainLog> {
    let mut trainer = LdmTrainer::new(set, unet, toe, cfg)?;
    for epoch in 0..cfg.epochs {
        let loss = trainer.epoch(unet, toe, epoch, seed)?;
        log::info!("ldm epoch {epoch}: loss {loss:.4}");
    }
    Ok(trainer.log)
}

/// Seed of the initial noise of one slice, independent of batching.
pub fn slice_seed(seed: u64, subject_id: &str, slice_index: usize) -> u64 {
    derive_seed(seed, &[subject_hash(subject_id), slice_index as u64])
}

/// DDIM (η = 0) sampling of pseudo ground truths.
pub struct Sampler<'a> {
    pub vae: &'a Vae,
    pub unet: &'a UNet,
    pub toe: &'a Toe,
    pub schedule: &'a NoiseSchedule,
    pub num_labels: u8,
}

const SAMPLE_BATCH: usize = 64;

impl Sampler<'_> {
    /// Reverse trajectory from per-sample seeded noise. `observer` sees the
    /// UNet input `(3, N, h, w)` at every step.
    pub fn sample_latents(
        &self,
        guides: &Tensor,
        c: &Tensor,
        seeds: &[u64],
        steps: usize,
        mut observer: Option<&mut dyn FnMut(usize, &Tensor)>,
    ) -> Result<Tensor> {
        let (_, n, lh, lw) = guides.dims4()?;
        if seeds.len() != n {
            return Err(Error::Model(format!("{} seeds for {n} samples", seeds.len())));
        }
        let per = LATENT_CHANNELS * lh * lw;
        let noise: Vec<Vec<f32>> = seeds.iter().map(|&s| normal_vec(&mut seeded(s), per)).collect();
        let refs: Vec<&[f32]> = noise.iter().map(|v| v.as_slice()).collect();
        let device = guides.device();
        let mut z = stack_cnhw(&refs, LATENT_CHANNELS, lh, lw, device)?.flatten_all()?.to_vec1::<f32>()?;
        let ts = ddim_timesteps(self.schedule.t_train(), steps)?;
        let guides = guides.detach();
        let c = c.detach();
        for (i, &t) in ts.iter().enumerate() {
            let zt = Tensor::from_vec(z.clone(), (LATENT_CHANNELS, n, lh, lw), device)?;
            let x = Tensor::cat(&[&zt, &guides], 0)?;
            if let Some(obs) = observer.as_mut() {
                obs(i, &x);
            }
            let eps = self.unet.forward(&x, &vec![t; n], &c)?.detach();
            let eps = eps.flatten_all()?.to_vec1::<f32>()?;
            z = ddim_step(&z, &eps, t, previous_timestep(&ts, i), self.schedule);
        }
        Ok(Tensor::from_vec(z, (LATENT_CHANNELS, n, lh, lw), device)?)
    }

    /// pGT for each (mask, image, ratio) slice.
    pub fn sample_pgt(
        &self,
        masks: &[&Mask],
        images: &[&Image],
        ratios: &[f64],
        seeds: &[u64],
        steps: usize,
    ) -> Result<Vec<Mask>> {
        let n = masks.len();
        if images.len() != n || ratios.len() != n || seeds.len() != n {
            return Err(Error::Model("sample_pgt inputs differ in length".into()));
        }
        if steps < 1 {
            return Err(Error::Model("steps must be >= 1".into()));
        }
        let device = self.vae.device();
        let f = self.vae.compression_factor();
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(SAMPLE_BATCH) {
            let end = (start + SAMPLE_BATCH).min(n);
            let m = &masks[start..end];
            let im = &images[start..end];
            if let Some(bad) = im.iter().zip(m).find(|(a, b)| a.dims() != b.dims()) {
                return Err(Error::Model(format!("image {:?} vs mask {:?}", bad.0.dims(), bad.1.dims())));
            }
            let [w, h, _] = m[0].dims();
            let g = guidance(m, self.num_labels, f, device)?;
            let o2 = self.toe.vision_tokens(&image_planes(im), h, w)?;
            let c = self.toe.condition(&ratios[start..end], &o2)?;
            let z = self.sample_latents(&g, &c, &seeds[start..end], steps, None)?;
            let logits = self.vae.decode(&(z / self.vae.latent_scale as f64)?)?;
            out.extend(logits_to_masks(&logits)?);
        }
        Ok(out)
    }
}
