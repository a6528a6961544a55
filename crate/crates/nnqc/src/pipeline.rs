//! Two-stage training workflow, QC inference, evaluation and ranking.
//!
//! Layout under `<output_dir>/<dataset_name>/`:
//! `fingerprint.json`, `vae/`, `corpus/`, `ldm/`, `reports/`.

use std::path::{Path, PathBuf};

use nnqc_core::degrade::{build_corpus, degrade_nearest, pair_seed, QualityBand};
use nnqc_core::fingerprint::{extract_fingerprint, postprocess, preprocess, DatasetFingerprint, SlicePack, VolumePair};
use nnqc_core::grid::{Image, Mask};
use nnqc_core::metrics::{dsc, hd95, rank_models, MetricKind, ModelScores};
use nnqc_core::phantom::generate_phantoms;
use nnqc_core::rng::{derive_seed, seeded};
use nnqc_core::schedule::NoiseSchedule;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json, Manifest, Stage};
use crate::config::{RunConfig, VisionEncoderConfig};
use crate::corpus::{load_corpus, save_corpus, CorpusMeta, META_FILE};
use crate::error::{Error, Result};
use crate::ldm::{slice_seed, train_ldm, LdmTrainLog, Sampler, TrainingSet};
use crate::manifold::{train_vae_gan, Vae, VaeTrainLog};
use crate::nifti_io;
use crate::report::{Report, ReportRow};
use crate::toe::{ConvPatchEncoder, Toe, VisionEncoder};
use crate::unet::UNet;

pub const FINGERPRINT_FILE: &str = "fingerprint.json";

/// Seed streams derived from the run seed.
pub mod streams {
    pub const SPLIT: u64 = 1;
    pub const VAE: u64 = 10;
    pub const CORPUS: u64 = 20;
    pub const TOE: u64 = 30;
    pub const UNET: u64 = 31;
    pub const LDM_TRAIN: u64 = 32;
    pub const SAMPLING: u64 = 40;
    pub const EVALUATE: u64 = 50;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSel {
    Dsc,
    Hd95,
    All,
}

impl MetricSel {
    pub fn kinds(self) -> &'static [MetricKind] {
        match self {
            MetricSel::Dsc => &[MetricKind::Dsc],
            MetricSel::Hd95 => &[MetricKind::Hd95],
            MetricSel::All => &[MetricKind::Dsc, MetricKind::Hd95],
        }
    }
}

pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { root: cfg.run_dir() }
    }
    pub fn fingerprint(&self) -> PathBuf {
        self.root.join(FINGERPRINT_FILE)
    }
    pub fn stage(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir_name())
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintRecord {
    pub seed: u64,
    pub config_sha256: String,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub fingerprint: DatasetFingerprint,
}

/// Deterministic subject-level split; at least one subject on each side.
pub fn split_subjects(ids: &[String], test_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if ids.len() < 2 {
        return Err(Error::Config(format!("need at least 2 subjects to split, found {}", ids.len())));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.sort();
    order.shuffle(&mut seeded(derive_seed(seed, &[streams::SPLIT])));
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut test = order.split_off(ids.len() - n_test);
    order.sort();
    test.sort();
    Ok((order, test))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Vec<VolumePair>> {
    cfg.require_dataset()?;
    nifti_io::read_dataset(&cfg.dataset_dir)
}

pub fn subset<'a>(pairs: &'a [VolumePair], ids: &[String]) -> Result<Vec<&'a VolumePair>> {
    ids.iter()
        .map(|id| {
            pairs
                .iter()
                .find(|p| &p.subject_id == id)
                .ok_or_else(|| Error::MissingPrerequisite(format!("subject {id} missing from dataset")))
        })
        .collect()
}

pub fn preprocess_all(pairs: &[&VolumePair], fp: &DatasetFingerprint) -> Result<Vec<SlicePack>> {
    pairs.iter().map(|p| Ok(preprocess(p, fp)?)).collect()
}

pub fn phantom_gen(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.dataset_dir.clone());
    let pairs = generate_phantoms(&cfg.phantom)?;
    nifti_io::write_dataset(&dir, &pairs)?;
    log::info!("wrote {} phantom subjects to {}", pairs.len(), dir.display());
    Ok(dir)
}

pub fn cmd_fingerprint(cfg: &RunConfig) -> Result<FingerprintRecord> {
    let pairs = load_dataset(cfg)?;
    let ids: Vec<String> = pairs.iter().map(|p| p.subject_id.clone()).collect();
    let (train, test) = split_subjects(&ids, cfg.evaluate.test_fraction, cfg.seed)?;
    let train_pairs: Vec<VolumePair> = subset(&pairs, &train)?.into_iter().cloned().collect();
    let fingerprint = extract_fingerprint(&train_pairs, cfg.target_size)?;
    let rec = FingerprintRecord {
        seed: cfg.seed,
        config_sha256: cfg.digest()?,
        train_subjects: train,
        test_subjects: test,
        fingerprint,
    };
    write_json(&RunPaths::new(cfg).fingerprint(), &rec)?;
    Ok(rec)
}

pub fn load_fingerprint(cfg: &RunConfig) -> Result<FingerprintRecord> {
    let path = RunPaths::new(cfg).fingerprint();
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no fingerprint at {}; run `nnqc fingerprint` first",
            path.display()
        )));
    }
    read_json(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeExtra {
    pub num_labels: u8,
    pub latent_scale: f32,
    pub log: VaeTrainLog,
}

pub fn cmd_train_vae(cfg: &RunConfig) -> Result<Manifest> {
    let rec = load_fingerprint(cfg)?;
    let pairs = load_dataset(cfg)?;
    let fp = &rec.fingerprint;
    let train = preprocess_all(&subset(&pairs, &rec.train_subjects)?, fp)?;
    let test = preprocess_all(&subset(&pairs, &rec.test_subjects)?, fp)?;
    let masks: Vec<Mask> = train.iter().flat_map(|p| p.slices.iter().map(|s| s.mask.clone())).collect();
    let held: Vec<Vec<Mask>> = test.iter().map(|p| p.slices.iter().map(|s| s.mask.clone()).collect()).collect();
    let (vae, disc, log) = train_vae_gan(&masks, &held, fp.num_labels, &cfg.vae, derive_seed(cfg.seed, &[streams::VAE]))?;
    let dir = RunPaths::new(cfg).stage(Stage::Vae);
    let mut m = Manifest::new(Stage::Vae, cfg, fp, None)?;
    m.add_weights(&dir, "vae", vae.params())?;
    m.add_weights(&dir, "discriminator", disc.params())?;
    m.extra = serde_json::to_value(VaeExtra {
        num_labels: fp.num_labels,
        latent_scale: vae.latent_scale,
        log,
    })?;
    m.save(&dir)?;
    Ok(m)
}

fn load_vae(dir: &Path, m: &Manifest) -> Result<Vae> {
    let extra: VaeExtra = serde_json::from_value(m.extra.clone())?;
    let mut vae = Vae::new(&m.config.vae, extra.num_labels, 0)?;
    m.load_weights(dir, "vae", vae.params_mut())?;
    vae.latent_scale = extra.latent_scale;
    Ok(vae)
}

fn encoder_shape(cfg: &VisionEncoderConfig) -> (&[usize], usize) {
    match cfg {
        VisionEncoderConfig::RandomConv { widths, patch_grid, .. } => (widths, *patch_grid),
        VisionEncoderConfig::Pretrained { widths, patch_grid, .. } => (widths, *patch_grid),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdmExtra {
    pub num_labels: u8,
    pub encoder_identity: String,
    pub corpus_sha256: String,
    pub log: LdmTrainLog,
}

fn corpus_for(cfg: &RunConfig, packs: &[SlicePack]) -> Result<(Vec<nnqc_core::degrade::DegradedPair>, CorpusMeta)> {
    let dir = RunPaths::new(cfg).corpus();
    let seed = derive_seed(cfg.seed, &[streams::CORPUS]);
    let digest = cfg.digest()?;
    if dir.join(META_FILE).exists() {
        let meta: CorpusMeta = read_json(&dir.join(META_FILE))?;
        if meta.seed == seed && meta.config_sha256 == digest {
            log::info!("reusing degraded corpus at {}", dir.display());
            return load_corpus(&dir, packs);
        }
    }
    let bands: Vec<QualityBand> = QualityBand::all().to_vec();
    let corpus = build_corpus(packs, &bands, seed, &cfg.degrade)?;
    let meta = save_corpus(&dir, &corpus, seed, &digest)?;
    log::info!("degraded corpus: {} pairs, {} skipped", meta.pairs, meta.skipped.len());
    Ok((corpus.pairs, meta))
}

pub fn cmd_train_ldm(cfg: &RunConfig, force: bool) -> Result<Manifest> {
    let paths = RunPaths::new(cfg);
    let vae_dir = paths.stage(Stage::Vae);
    let vm = Manifest::load(&vae_dir, Stage::Vae)?;
    let rec = load_fingerprint(cfg)?;
    vm.check_fingerprint(&rec.fingerprint, force)?;
    let fp = &rec.fingerprint;
    let vae = load_vae(&vae_dir, &vm)?;
    let pairs = load_dataset(cfg)?;
    let train = preprocess_all(&subset(&pairs, &rec.train_subjects)?, fp)?;
    let (corpus, meta) = corpus_for(cfg, &train)?;
    let toe = Toe::new(&cfg.toe, derive_seed(cfg.seed, &[streams::TOE]))?;
    let unet = UNet::new(&cfg.ldm, cfg.toe.d_c, derive_seed(cfg.seed, &[streams::UNET]))?;
    let set = TrainingSet::build(&vae, &toe, &corpus, fp.num_labels)?;
    let frozen = (vae.params().digest()?, toe.e2.digest()?);
    let log = train_ldm(&set, &unet, &toe, &cfg.ldm, derive_seed(cfg.seed, &[streams::LDM_TRAIN]))?;
    if (vae.params().digest()?, toe.e2.digest()?) != frozen {
        return Err(Error::Model("frozen VAE or vision encoder changed during diffusion training".into()));
    }
    let dir = paths.stage(Stage::Ldm);
    let mut m = Manifest::new(Stage::Ldm, cfg, fp, Some(vm.content_digest()?))?;
    m.add_weights(&dir, "unet", unet.params())?;
    m.add_weights(&dir, "e1", toe.e1.params())?;
    m.add_weights(&dir, "fuse", toe.fuse.params())?;
    toe.e2.save(&dir.join("e2.safetensors"))?;
    m.record(&dir, "e2", "e2.safetensors".into(), toe.e2.digest()?)?;
    m.extra = serde_json::to_value(LdmExtra {
        num_labels: fp.num_labels,
        encoder_identity: toe.e2.identity(),
        corpus_sha256: meta.content_sha256,
        log,
    })?;
    m.save(&dir)?;
    Ok(m)
}

/// Everything needed for inference, loaded from both checkpoints.
pub struct Models {
    pub fingerprint: DatasetFingerprint,
    pub test_subjects: Vec<String>,
    pub vae: Vae,
    pub toe: Toe,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub num_labels: u8,
    pub vae_manifest: Manifest,
    pub ldm_manifest: Manifest,
}

impl Models {
    pub fn load(cfg: &RunConfig, force: bool) -> Result<Self> {
        let paths = RunPaths::new(cfg);
        let rec = load_fingerprint(cfg)?;
        let vae_dir = paths.stage(Stage::Vae);
        let ldm_dir = paths.stage(Stage::Ldm);
        let vm = Manifest::load(&vae_dir, Stage::Vae)?;
        let lm = Manifest::load(&ldm_dir, Stage::Ldm)?;
        if lm.parent.as_deref() != Some(vm.content_digest()?.as_str()) {
            return Err(Error::Digest("diffusion checkpoint was not trained on the current VAE checkpoint".into()));
        }
        vm.check_fingerprint(&rec.fingerprint, force)?;
        lm.check_fingerprint(&rec.fingerprint, force)?;
        let vae = load_vae(&vae_dir, &vm)?;
        let lcfg = &lm.config;
        let mut toe = Toe::new(&lcfg.toe, 0)?;
        let (widths, grid) = encoder_shape(&lcfg.toe.vision_encoder);
        let e2 = ConvPatchEncoder::load(&lm.weight_path(&ldm_dir, "e2")?, widths, grid, lcfg.toe.d_e)?;
        if e2.digest()? != lm.weights["e2"].params {
            return Err(Error::Digest("vision encoder parameter digest differs from manifest".into()));
        }
        toe.e2 = Box::new(e2);
        lm.load_weights(&ldm_dir, "e1", toe.e1.params_mut())?;
        lm.load_weights(&ldm_dir, "fuse", toe.fuse.params_mut())?;
        let mut unet = UNet::new(&lcfg.ldm, lcfg.toe.d_c, 0)?;
        lm.load_weights(&ldm_dir, "unet", unet.params_mut())?;
        let extra: LdmExtra = serde_json::from_value(lm.extra.clone())?;
        Ok(Self {
            fingerprint: rec.fingerprint,
            test_subjects: rec.test_subjects,
            vae,
            toe,
            unet,
            schedule: lcfg.ldm.schedule()?,
            num_labels: extra.num_labels,
            vae_manifest: vm,
            ldm_manifest: lm,
        })
    }

    pub fn sampler(&self) -> Sampler<'_> {
        Sampler {
            vae: &self.vae,
            unet: &self.unet,
            toe: &self.toe,
            schedule: &self.schedule,
            num_labels: self.num_labels,
        }
    }

    /// pGT slices for per-slice candidate masks of one preprocessed subject.
    pub fn pgt_slices(&self, pack: &SlicePack, candidates: &[Mask], steps: usize, seed: u64) -> Result<Vec<Mask>> {
        if candidates.len() != pack.slices.len() {
            return Err(Error::Model(format!("{} candidate slices for {}", candidates.len(), pack.slices.len())));
        }
        let masks: Vec<&Mask> = candidates.iter().collect();
        let images: Vec<&Image> = pack.slices.iter().map(|s| &s.image).collect();
        let ratios: Vec<f64> = pack.slices.iter().map(|s| s.ratio).collect();
        let sseed = derive_seed(seed, &[streams::SAMPLING]);
        let seeds: Vec<u64> = (0..masks.len()).map(|i| slice_seed(sseed, &pack.subject_id, i)).collect();
        self.sampler().sample_pgt(&masks, &images, &ratios, &seeds, steps)
    }

    /// pGT volume on the source grid of `pair`, whose mask is the candidate.
    pub fn pgt_volume(&self, pair: &VolumePair, steps: usize, seed: u64) -> Result<Mask> {
        let pack = preprocess(pair, &self.fingerprint)?;
        let candidates: Vec<Mask> = pack.slices.iter().map(|s| s.mask.clone()).collect();
        let pgt = self.pgt_slices(&pack, &candidates, steps, seed)?;
        Ok(postprocess(&pgt, &pack.meta)?)
    }
}

/// One row per requested metric: `M(S, pGT)` and, with a GT, `M(S, GT)`.
pub fn score_rows(
    subject_id: &str,
    group: &str,
    candidate: &Mask,
    pgt: &Mask,
    gt: Option<&Mask>,
    spacing: [f64; 3],
    metric: MetricSel,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &kind in metric.kinds() {
        let (pseudo, real, sentinel) = match kind {
            MetricKind::Dsc => (dsc(candidate, pgt)?, gt.map(|g| dsc(candidate, g)).transpose()?, false),
            MetricKind::Hd95 => {
                let p = hd95(candidate, pgt, spacing)?;
                let r = gt.map(|g| hd95(candidate, g, spacing)).transpose()?;
                let sentinel = p.is_degenerate() || r.as_ref().is_some_and(|r| r.is_degenerate());
                (p.value, r.map(|r| r.value), sentinel)
            }
        };
        rows.push(ReportRow {
            subject_id: subject_id.to_string(),
            group: group.to_string(),
            metric: kind.name().to_string(),
            pseudo_score: pseudo,
            real_score: real,
            sentinel,
        });
    }
    Ok(rows)
}

pub struct QcInput<'a> {
    pub subject_id: &'a str,
    pub image: &'a Path,
    pub mask: &'a Path,
    pub gt: Option<&'a Path>,
}

pub fn cmd_qc(cfg: &RunConfig, input: &QcInput, metric: MetricSel, steps: usize, force: bool) -> Result<(Report, Mask)> {
    let models = Models::load(cfg, force)?;
    let pair = nifti_io::read_pair(input.subject_id, input.image, input.mask)?;
    let gt = match input.gt {
        Some(path) => {
            let g = nifti_io::read_mask(path)?;
            if g.grid.dims() != pair.mask.dims() {
                return Err(Error::Format(format!("gt dims {:?} vs mask dims {:?}", g.grid.dims(), pair.mask.dims())));
            }
            Some(g.grid)
        }
        None => None,
    };
    let pgt = models.pgt_volume(&pair, steps, cfg.seed)?;
    let rows = score_rows(&pair.subject_id, "", &pair.mask, &pgt, gt.as_ref(), pair.spacing, metric)?;
    Ok((Report::new(rows, cfg.seed, &cfg.digest()?, steps), pgt))
}

/// Degraded candidate slices of one subject, every slice aimed at `band`.
pub fn degrade_subject(pack: &SlicePack, band: QualityBand, cfg: &RunConfig) -> Result<Vec<Mask>> {
    let seed = derive_seed(cfg.seed, &[streams::EVALUATE]);
    pack.slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (m, _, _) = degrade_nearest(&s.mask, band, pair_seed(seed, &pack.subject_id, i, band), &cfg.degrade)?;
            Ok(m)
        })
        .collect()
}

/// Held-out subjects degraded into each configured band; pseudo scores
/// against pGTs, real scores against the ground truth, on the source grid.
pub fn evaluate_models(models: &Models, cfg: &RunConfig, pairs: &[VolumePair], metric: MetricSel, steps: usize) -> Result<Report> {
    let test = subset(pairs, &models.test_subjects)?;
    let mut rows = Vec::new();
    for &b in &cfg.evaluate.bands {
        let band = QualityBand::from_index(b)?;
        for pair in &test {
            let pack = preprocess(pair, &models.fingerprint)?;
            let candidates = degrade_subject(&pack, band, cfg)?;
            let pgt = models.pgt_slices(&pack, &candidates, steps, cfg.seed)?;
            let s = postprocess(&candidates, &pack.meta)?;
            let p = postprocess(&pgt, &pack.meta)?;
            rows.extend(score_rows(&pair.subject_id, &band.to_string(), &s, &p, Some(&pair.mask), pair.spacing, metric)?);
        }
        log::info!("evaluated band {band}");
    }
    Ok(Report::new(rows, cfg.seed, &cfg.digest()?, steps))
}

pub fn cmd_evaluate(cfg: &RunConfig, metric: MetricSel, steps: usize, force: bool) -> Result<Report> {
    let models = Models::load(cfg, force)?;
    let pairs = load_dataset(cfg)?;
    evaluate_models(&models, cfg, &pairs, metric, steps)
}

/// Ranks named candidate sets; each maps subject ids to source-grid masks.
pub fn rank_candidates(
    models: &Models,
    cfg: &RunConfig,
    pairs: &[VolumePair],
    candidates: &[(String, Vec<(String, Mask)>)],
    metric: MetricSel,
    steps: usize,
) -> Result<Report> {
    let mut rows = Vec::new();
    for (name, masks) in candidates {
        for (id, mask) in masks {
            let gt = pairs
                .iter()
                .find(|p| &p.subject_id == id)
                .ok_or_else(|| Error::MissingPrerequisite(format!("{name}: subject {id} not in dataset")))?;
            let cand = VolumePair {
                mask: mask.clone(),
                ..gt.clone()
            };
            let pgt = models.pgt_volume(&cand, steps, cfg.seed)?;
            rows.extend(score_rows(id, name, mask, &pgt, Some(&gt.mask), gt.spacing, metric)?);
        }
    }
    let mut report = Report::new(rows, cfg.seed, &cfg.digest()?, steps);
    let kind = metric.kinds()[0];
    let scores: Vec<ModelScores> = candidates
        .iter()
        .map(|(name, _)| {
            let sel: Vec<&ReportRow> = report.rows.iter().filter(|r| &r.group == name && r.metric == kind.name()).collect();
            ModelScores {
                name: name.clone(),
                pseudo: sel.iter().map(|r| r.pseudo_score).collect(),
                real: sel.iter().filter_map(|r| r.real_score).collect(),
            }
        })
        .collect();
    report.summary.ranking = Some(rank_models(&scores, kind.higher_is_better())?);
    report.add_t_tests(kind);
    Ok(report)
}

/// Each directory holds `<subject>.nii[.gz]` masks; the model is named
/// after the directory.
pub fn cmd_rank(cfg: &RunConfig, dirs: &[PathBuf], metric: MetricSel, steps: usize, force: bool) -> Result<Report> {
    let models = Models::load(cfg, force)?;
    let pairs = load_dataset(cfg)?;
    let mut candidates = Vec::new();
    for dir in dirs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Config(format!("bad model directory {}", dir.display())))?;
        let mut masks = Vec::new();
        for p in &pairs {
            let path = [format!("{}.nii.gz", p.subject_id), format!("{}.nii", p.subject_id)]
                .into_iter()
                .map(|f| dir.join(f))
                .find(|f| f.exists());
            if let Some(path) = path {
                masks.push((p.subject_id.clone(), nifti_io::read_mask(&path)?.grid));
            }
        }
        if masks.is_empty() {
            return Err(Error::MissingPrerequisite(format!("no subject masks in {}", dir.display())));
        }
        candidates.push((name, masks));
    }
    rank_candidates(&models, cfg, &pairs, &candidates, metric, steps)
}
