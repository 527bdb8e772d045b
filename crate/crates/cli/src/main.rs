use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rfosr::experiment::{
    full_run, load_config_with, paired_run, parse_config, run_until, Ablation, ExperimentConfig, Profile, RunManifest,
    RunReport, StageStatus,
};
use rfosr::io::{list_iq, read_iq, read_json, write_iq, write_json};
use rfosr::preprocess::{preprocess_pipeline, write_spectrogram};
use rfosr::seed;
use rfosr::synth::{apply_channel, synthesize_clean};

/// Worker threads for the parallel stages; defaults to one per core.
const WORKERS_ENV: &str = "RFOSR_WORKERS";

#[derive(Parser)]
#[command(name = "rfosr", version, about = "Open-set RF emitter recognition")]
struct Cli {
    /// TOML experiment configuration; omitted keys take the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (or output directory for `synth` and `preprocess`).
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// desk or paper; overrides the configuration's profile.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    /// no-transformer, no-supcon, supcon-only, no-denoise or no-freeze. With
    /// `full-run` each one is run next to an unablated baseline.
    #[arg(long = "ablation", global = true)]
    ablations: Vec<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write labelled synthetic I/Q recordings for every configured class.
    Synth {
        #[arg(long, default_value_t = 2)]
        recordings: usize,
    },
    /// Convert a directory of `.iq` recordings into spectrogram files.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Build the dataset and train the closed-set model.
    Train,
    /// Fit plain OpenMax on the closed-set model.
    Calibrate,
    /// Train the conditional GAN and keep the samples the closed-set model gets wrong.
    MineUnknowns,
    /// Retrain the head with the simulated unknown class and recalibrate.
    IgRetrain,
    /// Score the test split and write the reports.
    Score,
    /// Every stage, resuming from the run directory's manifest.
    FullRun,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config_with(path, cli.profile)?,
        None => parse_config("", cli.profile)?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_ablations(mut cfg: ExperimentConfig, ablations: &[Ablation]) -> ExperimentConfig {
    for &a in ablations {
        cfg = cfg.with_ablation(a);
    }
    cfg
}

fn synth(cfg: &ExperimentConfig, out: &Path, recordings: usize) -> Result<()> {
    let spec = cfg.dataset_spec()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let duration = (spec.recording_slices * spec.preprocess.slice_samples) as f64 / spec.sample_rate;
    let mut written = 0;
    for p in spec.known.iter().chain(&spec.unknown) {
        let class_seed = seed::derive(spec.seed, p.class_id as u64);
        for r in 0..recordings {
            let rec_seed = seed::derive(class_seed, r as u64);
            let clean = synthesize_clean(p, duration, spec.sample_rate, rec_seed)?;
            let mut channel = spec.channel.clone();
            if let Some(snr) = spec.snr_db {
                channel.noise_variance = channel.noise_for_snr(clean.mean_power(), snr);
            }
            let rec = apply_channel(&clean, &channel, rec_seed)?;
            write_iq(&out.join(format!("class{:03}_{r:03}.iq", p.class_id)), &rec)?;
            written += 1;
        }
    }
    write_json(&out.join("profiles.json"), &(&spec.known, &spec.unknown))?;
    println!("wrote {written} recordings to {}", out.display());
    Ok(())
}

fn preprocess(cfg: &ExperimentConfig, input: &Path, out: &Path) -> Result<()> {
    let files = list_iq(input)?;
    if files.is_empty() {
        bail!("no .iq recordings in {}", input.display());
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = 0;
    for path in &files {
        let rec = read_iq(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("recording");
        for (k, s) in preprocess_pipeline(&rec, &cfg.preprocess)?.iter().enumerate() {
            write_spectrogram(&out.join(format!("{stem}_{k:04}.spg")), s, &path.display().to_string())?;
            written += 1;
        }
    }
    println!(
        "wrote {written} spectrograms from {} recordings to {}",
        files.len(),
        out.display()
    );
    Ok(())
}

fn print_stages(m: &RunManifest) {
    for s in &m.stages {
        let status = match s.status {
            StageStatus::Done => "done",
            StageStatus::Pending => "pending",
            StageStatus::Failed => "failed",
        };
        println!("{:<12} {status}", s.name);
    }
}

fn print_report(dir: &Path) -> Result<()> {
    let md = std::fs::read_to_string(dir.join("report.md"))
        .with_context(|| format!("reading report in {}", dir.display()))?;
    print!("{md}");
    Ok(())
}

fn summary(label: &str, r: &RunReport) {
    if let Some(ig) = r.report("ig-openmax") {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.4}"));
        println!(
            "{label}: KAR {} UAR {} GAP {} AUC {}",
            f(ig.metrics.kar),
            f(ig.metrics.uar),
            f(ig.metrics.gap),
            f(ig.auc)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Ok(w) = std::env::var(WORKERS_ENV) {
        let n: usize = w
            .parse()
            .with_context(|| format!("{WORKERS_ENV}={w} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let base = config(&cli)?;
    let cfg = with_ablations(base.clone(), &cli.ablations);
    let out = &cli.out;
    let stage = |last: &str| -> Result<()> {
        let m = run_until(&cfg, out, last)?;
        print_stages(&m);
        Ok(())
    };
    match &cli.command {
        Command::Synth { recordings } => synth(&cfg, out, *recordings),
        Command::Preprocess { input } => preprocess(&cfg, input, out),
        Command::Train => stage("train"),
        Command::Calibrate => stage("calibrate"),
        Command::MineUnknowns => stage("mine"),
        Command::IgRetrain => stage("ig-retrain"),
        Command::Score => {
            run_until(&cfg, out, "score")?;
            print_report(out)
        }
        Command::FullRun if cli.ablations.is_empty() => {
            full_run(&cfg, out)?;
            summary("ig-openmax", &read_json(&out.join("report.json"))?);
            print_report(out)
        }
        Command::FullRun => {
            for &a in &cli.ablations {
                let (plain, ablated) = paired_run(&base, out, a)?;
                summary("baseline", &plain);
                summary(a.name(), &ablated);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
