//! Run configuration: a single versioned YAML document. Every section has
//! defaults, unknown keys are rejected.

use std::path::{Path, PathBuf};

use nnqc_core::degrade::DegradeParams;
use nnqc_core::phantom::PhantomSpec;
use nnqc_core::schedule::{NoiseSchedule, ScheduleKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub lambda_kld: f64,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
    pub lambda_dice: f64,
    /// Spatial downsampling factor, a power of two.
    pub compression_factor: usize,
    /// Encoder widths from full resolution down to the latent resolution;
    /// one entry per level, so `log2(f) + 1` entries. The decoder mirrors it.
    pub widths: Vec<usize>,
    pub disc_widths: Vec<usize>,
    pub groups: usize,
    pub learning_rate: f64,
    pub disc_learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Consecutive non-finite losses tolerated before training aborts.
    pub divergence_patience: usize,
    pub perceptual_seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            lambda_kld: 1e-6,
            lambda_perc: 1.0,
            lambda_adv: 0.01,
            lambda_dice: 1.0,
            compression_factor: 4,
            widths: vec![8, 16, 32],
            disc_widths: vec![8, 16, 32],
            groups: 4,
            learning_rate: 2e-3,
            disc_learning_rate: 2e-4,
            epochs: 6,
            batch_size: 16,
            divergence_patience: 3,
            perceptual_seed: 7,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_kld, self.lambda_perc, self.lambda_adv, self.lambda_dice];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config("vae lambdas must be finite and >= 0".into()));
        }
        let f = self.compression_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::Config(format!("compression_factor {f} must be a power of two >= 2")));
        }
        let levels = f.trailing_zeros() as usize + 1;
        if self.widths.len() != levels {
            return Err(Error::Config(format!(
                "compression_factor {f} needs {levels} encoder widths, got {}",
                self.widths.len()
            )));
        }
        if self.widths.iter().any(|w| *w == 0 || w % self.groups.max(1) != 0) || self.groups == 0 {
            return Err(Error::Config(format!(
                "widths {:?} must be positive multiples of groups {}",
                self.widths, self.groups
            )));
        }
        if self.disc_widths.is_empty() || self.disc_widths.contains(&0) {
            return Err(Error::Config("disc_widths must be non-empty and positive".into()));
        }
        check_training(self.learning_rate, self.batch_size, "vae")?;
        if !(self.disc_learning_rate > 0.0) {
            return Err(Error::Config("vae disc_learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

fn check_training(lr: f64, batch: usize, what: &str) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Config(format!("{what} learning_rate must be > 0")));
    }
    if batch == 0 {
        return Err(Error::Config(format!("{what} batch_size must be > 0")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum VisionEncoderConfig {
    /// Frozen convolutional encoder with fixed-seed random weights.
    RandomConv { seed: u64, widths: Vec<usize>, patch_grid: usize },
    /// Weights for the same architecture loaded from a safetensors file;
    /// falls back to `RandomConv` defaults with a warning when unusable.
    Pretrained { path: PathBuf, widths: Vec<usize>, patch_grid: usize },
}

impl Default for VisionEncoderConfig {
    fn default() -> Self {
        VisionEncoderConfig::RandomConv {
            seed: 11,
            widths: vec![16, 32],
            patch_grid: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToeConfig {
    /// Hidden widths of the positional MLP.
    pub e1_widths: Vec<usize>,
    pub d_e: usize,
    pub d_c: usize,
    pub n_heads: usize,
    pub vision_encoder: VisionEncoderConfig,
    /// Must stay true; the vision expert is never trained.
    pub e2_frozen: bool,
}

impl Default for ToeConfig {
    fn default() -> Self {
        Self {
            e1_widths: vec![64, 64],
            d_e: 256,
            d_c: 256,
            n_heads: 4,
            vision_encoder: VisionEncoderConfig::default(),
            e2_frozen: true,
        }
    }
}

impl ToeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.e2_frozen {
            return Err(Error::Config("the vision expert must stay frozen (e2_frozen: true)".into()));
        }
        if self.d_e == 0 || self.d_c == 0 || self.n_heads == 0 || self.d_c % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_c {} (d_e {})",
                self.n_heads, self.d_c, self.d_e
            )));
        }
        if self.e1_widths.contains(&0) {
            return Err(Error::Config("e1_widths must be positive".into()));
        }
        let (VisionEncoderConfig::RandomConv { widths, patch_grid, .. }
        | VisionEncoderConfig::Pretrained { widths, patch_grid, .. }) = &self.vision_encoder;
        if widths.is_empty() || widths.contains(&0) || *patch_grid == 0 {
            return Err(Error::Config("vision encoder widths and patch_grid must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LdmConfig {
    pub t_train: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    /// UNet widths per resolution level, full latent resolution first.
    pub widths: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    pub attn_heads: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub divergence_patience: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 20,
            widths: vec![32, 64, 64],
            groups: 8,
            time_dim: 64,
            attn_heads: 1,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 8,
            divergence_patience: 3,
        }
    }
}

impl LdmConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.t_train, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.sampling_steps == 0 || self.sampling_steps > self.t_train {
            return Err(Error::Config(format!(
                "sampling_steps must be in 1..={}",
                self.t_train
            )));
        }
        if self.widths.is_empty() || self.groups == 0 || self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return Err(Error::Config(format!(
                "unet widths {:?} must be positive multiples of groups {}",
                self.widths, self.groups
            )));
        }
        if self.attn_heads == 0 || self.widths.iter().any(|w| w % self.attn_heads != 0) {
            return Err(Error::Config("attn_heads must divide every unet width".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        check_training(self.learning_rate, self.batch_size, "ldm")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    /// Fraction of subjects held out for evaluation.
    pub test_fraction: f64,
    /// Band indices (0 = lowest quality) used for degraded test inputs.
    pub bands: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            bands: vec![0, 1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Namespace for checkpoints; one model per dataset.
    pub dataset_name: String,
    /// Directory with `imagesTr/` and `labelsTr/` NIfTI volumes.
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub target_size: [usize; 2],
    pub phantom: PhantomSpec,
    pub degrade: DegradeParams,
    pub vae: VaeConfig,
    pub toe: ToeConfig,
    pub ldm: LdmConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset_name: "phantom".into(),
            dataset_dir: PathBuf::from("data/phantom"),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            target_size: [64, 64],
            phantom: PhantomSpec::default(),
            degrade: DegradeParams::default(),
            vae: VaeConfig::default(),
            toe: ToeConfig::default(),
            ldm: LdmConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_yaml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_yaml(&self) -> Result<String> {
        serde_yaml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.dataset_name.is_empty() || self.dataset_name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid dataset_name {:?}", self.dataset_name)));
        }
        let f = self.vae.compression_factor;
        if self.target_size.iter().any(|&s| s == 0 || s % f != 0) {
            return Err(Error::Config(format!(
                "target_size {:?} must be a positive multiple of compression_factor {f}",
                self.target_size
            )));
        }
        if self.target_size.iter().any(|&s| s < 32) {
            return Err(Error::Config(format!(
                "target_size {:?} is below the 32x32 minimum of the patch discriminator",
                self.target_size
            )));
        }
        let latent = [self.target_size[0] / f, self.target_size[1] / f];
        let down = 1usize << (self.ldm.widths.len() - 1).min(16);
        if latent.iter().any(|&s| s % down != 0) {
            return Err(Error::Config(format!(
                "latent size {latent:?} not divisible by {down} for {} unet levels",
                self.ldm.widths.len()
            )));
        }
        if !(0.0 < self.evaluate.test_fraction && self.evaluate.test_fraction < 1.0) {
            return Err(Error::Config("evaluate.test_fraction must be in (0, 1)".into()));
        }
        if self.evaluate.bands.is_empty() || self.evaluate.bands.iter().any(|&b| b >= 5) {
            return Err(Error::Config("evaluate.bands must be indices in 0..5".into()));
        }
        self.vae.validate()?;
        self.toe.validate()?;
        self.ldm.validate()
    }

    /// Fails unless the dataset directory exists.
    pub fn require_dataset(&self) -> Result<()> {
        if self.dataset_dir.is_dir() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "dataset_dir {} does not exist",
                self.dataset_dir.display()
            )))
        }
    }

    /// Checkpoints and reports for this dataset live under here.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.dataset_name)
    }

    /// SHA-256 of the canonical JSON form, recorded in every artifact.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
