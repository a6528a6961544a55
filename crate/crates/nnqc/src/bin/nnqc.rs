use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nnqc::checkpoint::write_json;
use nnqc::config::RunConfig;
use nnqc::nifti_io;
use nnqc::pipeline::{self, MetricSel, QcInput, RunPaths};
use nnqc::{Error, Result};

#[derive(Parser)]
#[command(name = "nnqc", version, about = "Segmentation quality control with diffusion-restored pseudo ground truths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// YAML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Dsc,
    Hd95,
    All,
}

impl From<Metric> for MetricSel {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Dsc => MetricSel::Dsc,
            Metric::Hd95 => MetricSel::Hd95,
            Metric::All => MetricSel::All,
        }
    }
}

#[derive(Args, Clone)]
struct Inference {
    /// DDIM sampling steps; the configured default when omitted.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum, default_value = "dsc")]
    metric: Metric,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accept checkpoints trained under a different dataset fingerprint.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset fingerprint and train/test split.
    Fingerprint {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the VAE-GAN on clean masks.
    TrainVae {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: train the conditional latent diffusion model.
    TrainLdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Score one segmentation against its pseudo ground truth.
    Qc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Optional ground truth; adds real scores to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value = "subject")]
        subject: String,
        /// Also write the pseudo ground truth volume here.
        #[arg(long)]
        pgt_out: Option<PathBuf>,
    },
    /// Pseudo vs real scores on held-out subjects degraded across quality bands.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
    },
    /// Rank segmentation models by pseudo scores and compare with real scores.
    Rank {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: Inference,
        /// One directory of `<subject>.nii.gz` masks per model.
        #[arg(required = true, num_args = 2..)]
        models: Vec<PathBuf>,
    },
    /// Generate the synthetic phantom dataset.
    PhantomGen {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; the configured `dataset_dir` when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report_dir(cfg: &RunConfig, inference: &Inference, name: &str) -> PathBuf {
    inference.out.clone().unwrap_or_else(|| RunPaths::new(cfg).reports().join(name))
}

fn print_summary(dir: &std::path::Path, report: &nnqc::report::Report) -> Result<()> {
    for a in &report.summary.overall {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        println!(
            "{}: n={} mean_pseudo={:.4} mean_real={} r={} mae={}",
            a.metric,
            a.n,
            a.mean_pseudo,
            fmt(a.mean_real),
            fmt(a.pearson_r),
            fmt(a.mae)
        );
    }
    if let Some(r) = &report.summary.ranking {
        println!("pseudo ranking: {}", r.pseudo_order.join(" > "));
        println!("real ranking:   {}", r.real_order.join(" > "));
        println!("kendall tau: {:.4}", r.tau);
    }
    println!("report written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fingerprint { common } => {
            let cfg = load_config(&common)?;
            let rec = pipeline::cmd_fingerprint(&cfg)?;
            println!(
                "fingerprint: {} train / {} test subjects, {} labels, spacing {:?}",
                rec.train_subjects.len(),
                rec.test_subjects.len(),
                rec.fingerprint.num_labels,
                rec.fingerprint.median_spacing
            );
        }
        Command::TrainVae { common } => {
            let cfg = load_config(&common)?;
            let m = pipeline::cmd_train_vae(&cfg)?;
            println!("stage-1 checkpoint {}", m.content_digest()?);
        }
        Command::TrainLdm { common, force } => {
            let cfg = load_config(&common)?;
            let m = pipeline::cmd_train_ldm(&cfg, force)?;
            println!("stage-2 checkpoint {}", m.content_digest()?);
        }
        Command::Qc {
            common,
            inference,
            image,
            mask,
            gt,
            subject,
            pgt_out,
        } => {
            let cfg = load_config(&common)?;
            let steps = inference.steps.unwrap_or(cfg.ldm.sampling_steps);
            let input = QcInput {
                subject_id: &subject,
                image: &image,
                mask: &mask,
                gt: gt.as_deref(),
            };
            let (report, pgt) = pipeline::cmd_qc(&cfg, &input, inference.metric.into(), steps, inference.force)?;
            let dir = report_dir(&cfg, &inference, &format!("qc-{subject}"));
            report.write(&dir)?;
            if let Some(path) = pgt_out {
                let m = nifti_io::read_mask(&mask)?;
                nifti_io::write_mask(&path, &nifti_io::Volume { grid: pgt, ..m })?;
            }
            print_summary(&dir, &report)?;
        }
        Command::Evaluate { common, inference } => {
            let cfg = load_config(&common)?;
            let steps = inference.steps.unwrap_or(cfg.ldm.sampling_steps);
            let report = pipeline::cmd_evaluate(&cfg, inference.metric.into(), steps, inference.force)?;
            let dir = report_dir(&cfg, &inference, "evaluate");
            report.write(&dir)?;
            print_summary(&dir, &report)?;
        }
        Command::Rank { common, inference, models } => {
            let cfg = load_config(&common)?;
            let steps = inference.steps.unwrap_or(cfg.ldm.sampling_steps);
            let report = pipeline::cmd_rank(&cfg, &models, inference.metric.into(), steps, inference.force)?;
            let dir = report_dir(&cfg, &inference, "rank");
            report.write(&dir)?;
            print_summary(&dir, &report)?;
        }
        Command::PhantomGen { common, out } => {
            let cfg = load_config(&common)?;
            let dir = pipeline::phantom_gen(&cfg, out.as_deref())?;
            write_json(&dir.join("phantom.json"), &cfg.phantom)?;
            println!("phantoms written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
