//! Model-level contracts on tiny networks: what trains, what stays frozen,
//! sampling determinism, checkpoint integrity.

use candle_core::Tensor;
use nnqc::checkpoint::{Manifest, Stage};
use nnqc::config::{LdmConfig, RunConfig, ToeConfig, VaeConfig, VisionEncoderConfig};
use nnqc::ldm::{guidance, LdmTrainer, Sampler, TrainingSet};
use nnqc::manifold::Vae;
use nnqc::toe::Toe;
use nnqc::unet::UNet;
use nnqc::Error;
use nnqc_core::degrade::{build_corpus, DegradeParams, QualityBand};
use nnqc_core::fingerprint::{extract_fingerprint, preprocess, DatasetFingerprint, SlicePack};
use nnqc_core::grid::{Image, Mask};
use nnqc_core::phantom::{generate_phantoms, PhantomSpec};
use nnqc_core::rng::seeded;
use nnqc_core::schedule::NoiseSchedule;

fn tiny_config() -> RunConfig {
    RunConfig {
        target_size: [32, 32],
        vae: VaeConfig {
            widths: vec![4, 4, 4],
            disc_widths: vec![4, 4],
            groups: 2,
            ..VaeConfig::default()
        },
        toe: ToeConfig {
            e1_widths: vec![8],
            d_e: 8,
            d_c: 8,
            n_heads: 2,
            vision_encoder: VisionEncoderConfig::RandomConv {
                seed: 1,
                widths: vec![4, 4],
                patch_grid: 2,
            },
            ..ToeConfig::default()
        },
        ldm: LdmConfig {
            widths: vec![8, 8],
            groups: 4,
            time_dim: 8,
            ..LdmConfig::default()
        },
        ..RunConfig::default()
    }
}

struct Fixture {
    cfg: RunConfig,
    fp: DatasetFingerprint,
    packs: Vec<SlicePack>,
    vae: Vae,
    toe: Toe,
    unet: UNet,
    schedule: NoiseSchedule,
}

fn fixture() -> Fixture {
    let cfg = tiny_config();
    cfg.validate().unwrap();
    let spec = PhantomSpec {
        n_subjects: 3,
        grid: [32, 32],
        slices: (3, 4),
        ..PhantomSpec::default()
    };
    let pairs = generate_phantoms(&spec).unwrap();
    let fp = extract_fingerprint(&pairs, cfg.target_size).unwrap();
    let packs = pairs.iter().map(|p| preprocess(p, &fp).unwrap()).collect();
    let mut vae = Vae::new(&cfg.vae, fp.num_labels, 4).unwrap();
    vae.latent_scale = 1.5;
    let toe = Toe::new(&cfg.toe, 5).unwrap();
    let unet = UNet::new(&cfg.ldm, cfg.toe.d_c, 6).unwrap();
    Fixture {
        schedule: cfg.ldm.schedule().unwrap(),
        cfg,
        fp,
        packs,
        vae,
        toe,
        unet,
    }
}

#[test]
fn one_step_moves_the_trained_experts_only() {
    let fx = fixture();
    let corpus = build_corpus(&fx.packs, &[QualityBand::all()[2]], 9, &DegradeParams::default()).unwrap();
    let set = TrainingSet::build(&fx.vae, &fx.toe, &corpus.pairs, fx.fp.num_labels).unwrap();
    let digests = |f: &Fixture| {
        [
            f.vae.params().digest().unwrap(),
            f.toe.e2.digest().unwrap(),
            f.toe.e1.params().digest().unwrap(),
            f.toe.fuse.params().digest().unwrap(),
            f.unet.params().digest().unwrap(),
        ]
    };
    let before = digests(&fx);
    let mut trainer = LdmTrainer::new(&set, &fx.unet, &fx.toe, &fx.cfg.ldm).unwrap();
    let loss = trainer.step(&fx.unet, &fx.toe, &[(0, 0), (1, 0)], &mut seeded(1)).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    let after = digests(&fx);
    assert_eq!(before[0], after[0], "vae moved");
    assert_eq!(before[1], after[1], "vision expert moved");
    for i in 2..5 {
        assert_ne!(before[i], after[i], "parameter group {i} did not move");
    }
}

fn sampling_inputs(fx: &Fixture) -> (Vec<Mask>, Vec<Image>, Vec<f64>) {
    let slices = &fx.packs[0].slices;
    (
        slices.iter().map(|s| s.mask.clone()).collect(),
        slices.iter().map(|s| s.image.clone()).collect(),
        slices.iter().map(|s| s.ratio).collect(),
    )
}

fn sampler(fx: &Fixture) -> Sampler<'_> {
    Sampler {
        vae: &fx.vae,
        unet: &fx.unet,
        toe: &fx.toe,
        schedule: &fx.schedule,
        num_labels: fx.fp.num_labels,
    }
}

#[test]
fn sampling_is_seeded_and_keeps_the_guide_fixed() {
    let fx = fixture();
    let s = sampler(&fx);
    let (masks, images, ratios) = sampling_inputs(&fx);
    let m: Vec<&Mask> = masks.iter().collect();
    let im: Vec<&Image> = images.iter().collect();
    let seeds: Vec<u64> = (0..m.len() as u64).collect();

    let a = s.sample_pgt(&m, &im, &ratios, &seeds, 4).unwrap();
    let b = s.sample_pgt(&m, &im, &ratios, &seeds, 4).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().zip(&masks).all(|(p, q)| p.dims() == q.dims()));

    let g = guidance(&m, fx.fp.num_labels, 4, fx.vae.device()).unwrap();
    let planes: Vec<&[f32]> = im.iter().map(|x| x.data()).collect();
    let o2 = fx.toe.vision_tokens(&planes, 32, 32).unwrap();
    let c = fx.toe.condition(&ratios, &o2).unwrap();
    let want = g.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let mut seen = 0;
    let mut check = |_: usize, x: &Tensor| {
        let ch = x.narrow(0, 2, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(ch, want);
        seen += 1;
    };
    let z1 = s.sample_latents(&g, &c, &seeds, 5, Some(&mut check)).unwrap();
    assert_eq!(seen, 5);
    let shifted: Vec<u64> = seeds.iter().map(|x| x + 100).collect();
    let z2 = s.sample_latents(&g, &c, &shifted, 5, None).unwrap();
    assert_ne!(
        z1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        z2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    );
}

#[test]
fn empty_candidates_still_sample() {
    let fx = fixture();
    let s = sampler(&fx);
    let (masks, images, ratios) = sampling_inputs(&fx);
    let empty: Vec<Mask> = masks.iter().map(|m| Mask::filled(m.dims(), 0)).collect();
    let m: Vec<&Mask> = empty.iter().collect();
    let im: Vec<&Image> = images.iter().collect();
    let seeds = vec![7; m.len()];
    let out = s.sample_pgt(&m, &im, &ratios, &seeds, 2).unwrap();
    assert_eq!(out.len(), m.len());
    assert!(out.iter().all(|p| p.max_label() <= fx.fp.num_labels));
    assert!(s.sample_pgt(&m, &im, &ratios, &seeds, 0).is_err());
}

#[test]
fn tampered_weights_are_rejected() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut m = Manifest::new(Stage::Vae, &fx.cfg, &fx.fp, None).unwrap();
    m.add_weights(dir.path(), "vae", fx.vae.params()).unwrap();
    m.save(dir.path()).unwrap();
    let loaded = Manifest::load(dir.path(), Stage::Vae).unwrap();
    assert_eq!(loaded.content_digest().unwrap(), m.content_digest().unwrap());
    assert!(matches!(Manifest::load(dir.path(), Stage::Ldm), Err(Error::Format(_))));

    let mut other = Vae::new(&fx.cfg.vae, fx.fp.num_labels, 99).unwrap();
    assert!(matches!(
        loaded.load_weights(dir.path(), "vae", other.params_mut()),
        Ok(())
    ));
    assert_eq!(other.params().digest().unwrap(), fx.vae.params().digest().unwrap());

    let path = loaded.weight_path(dir.path(), "vae").unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let err = Manifest::load(dir.path(), Stage::Vae).unwrap_err();
    assert!(matches!(err, Error::Digest(_)));
    assert_eq!(err.exit_code(), 3);

    let missing = tempfile::tempdir().unwrap();
    assert!(matches!(
        Manifest::load(missing.path(), Stage::Ldm),
        Err(Error::MissingPrerequisite(_))
    ));
}
