use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use unirestore::adaptation::compute_anchors;
use unirestore::autograd::ParamGroup;
use unirestore::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use unirestore::config::{Profile, RunConfig};
use unirestore::data::{load_folder_dataset, synthesize_split, write_split, Domain, Split, Task};
use unirestore::evaluation::{
    aggregate_metrics, analyze_features, evaluate_samples, export_features, write_aggregate_csv,
    write_code_usage, write_jsonl,
};
use unirestore::model::{Model, Variant};
use unirestore::training::Trainer;
use unirestore::{Error, ErrorKind, Result};

use crate::logging;

#[derive(Debug, Parser)]
#[command(
    name = "unirestore",
    version,
    about = "All-in-one image restoration experiments"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Named default configuration (`ci` or `paper`).
    #[arg(long, global = true, default_value = "ci")]
    pub profile: String,
    /// TOML or JSON file overlaid on the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every output of the command.
    #[arg(long, global = true, default_value = "runs/latest")]
    pub out_dir: PathBuf,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes synthetic source/target pairs in the folder layout.
    SynthData,
    /// Trains a model and writes a checkpoint with anchors.
    Train {
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Continues the run stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stops after this many steps in this invocation.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Also writes the checkpoint every N steps.
        #[arg(long)]
        save_every: Option<u64>,
    },
    /// Restores a dataset split and scores it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target")]
        domain: Domain,
        /// Test-time adaptation for target-domain samples.
        #[arg(long)]
        tta: bool,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Feature density, KL divergence and cluster diagnostics.
    AnalyzeFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split compared against the held-out source split.
        #[arg(long, default_value = "target")]
        target_split: Split,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Prints parameter counts per group.
    CountParams {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

/// Process exit code of an error.
pub fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
        ErrorKind::Io => 5,
    }
}

fn resolve(common: &Common, variant: Option<Variant>) -> Result<RunConfig> {
    let profile: Profile = common.profile.parse()?;
    let mut overrides = common.set.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(v) = variant {
        overrides.push(format!("train.variant={}", v.as_str()));
    }
    RunConfig::resolve(profile, common.config.as_deref(), &overrides)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    logging::attach(dir);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn fresh(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(path.to_path_buf())
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::SynthData => synth_data(common),
        Command::Train {
            data,
            variant,
            resume,
            max_steps,
            save_every,
        } => train(
            common,
            &data,
            variant,
            resume.as_deref(),
            max_steps,
            save_every,
        ),
        Command::Eval {
            checkpoint,
            data,
            domain,
            tta,
            variant,
        } => eval(common, &checkpoint, &data, domain, tta, variant),
        Command::AnalyzeFeatures {
            checkpoint,
            data,
            target_split,
            variant,
        } => analyze(common, &checkpoint, &data, target_split, variant),
        Command::CountParams { checkpoint } => count_params(common, checkpoint.as_deref()),
    }
}

fn synth_data(common: &Common) -> Result<()> {
    let rc = resolve(common, None)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    rc.write_snapshot(out)?;
    let d = &rc.data;
    let mut total = 0;
    for task in Task::ALL {
        for (split, count) in [
            (Split::Train, d.train_per_task),
            (Split::Test, d.test_per_task),
            (Split::Target, d.target_per_task),
        ] {
            if count == 0 {
                continue;
            }
            let (pairs, entries) =
                synthesize_split(task, split, count, d.image_size, &d.regimes, rc.seed)?;
            write_split(out, task, split, &pairs, &entries)?;
            total += pairs.len();
        }
    }
    info!("wrote {total} pairs under {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    variant: Variant,
    step: u64,
    total_steps: u64,
    finished: bool,
    final_loss: Option<f64>,
    anchors: usize,
    used_codes: usize,
    elapsed_s: f64,
    restoration_digest: String,
    degradation_digest: String,
}

fn train(
    common: &Common,
    data: &Path,
    variant: Option<Variant>,
    resume: Option<&Path>,
    max_steps: Option<u64>,
    save_every: Option<u64>,
) -> Result<()> {
    let mut rc = resolve(common, variant)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let samples = load_folder_dataset(data, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Format(format!(
            "no training pairs found under {}",
            data.display()
        )));
    }
    let mut trainer = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let state = ck.train.ok_or_else(|| {
                Error::Config(format!("{} holds no training state", path.display()))
            })?;
            info!("resuming {} at step {}", path.display(), state.step);
            rc.model = ck.model.config().clone();
            rc.train = state.cfg.clone();
            rc.seed = state.cfg.seed;
            Trainer::resume(ck.model, samples, state)?
        }
        None => {
            let metrics = out.join("metrics.jsonl");
            fresh(&metrics)?;
            Trainer::new(
                Model::new(rc.model.clone(), rc.seed)?,
                rc.train.clone(),
                samples,
            )?
        }
    };
    rc.write_snapshot(out)?;
    let cfg = trainer.cfg.clone();
    let metrics_path = out.join("metrics.jsonl");
    let ck_path = out.join("checkpoint.bin");
    let t0 = Instant::now();
    let mut done = 0u64;
    let mut last = None;
    while trainer.step < cfg.steps && max_steps.is_none_or(|m| done < m) {
        let m = match trainer.train_step() {
            Ok(m) => m,
            Err(e) => {
                if let Error::Divergence { step, detail } = &e {
                    let dump =
                        serde_json::json!({ "step": step, "detail": detail, "last_metrics": last });
                    write_json(&out.join("divergence.json"), &dump)?;
                }
                return Err(e);
            }
        };
        done += 1;
        let final_step = trainer.step == cfg.steps;
        if m.step % cfg.log_every.max(1) == 0 || final_step {
            write_jsonl(&metrics_path, std::slice::from_ref(&m))?;
            info!(
                "step {} lr {:.3e} loss {:.5} mae {:.5} cscl {:.4} vq {:.5}",
                m.step,
                m.lr,
                m.loss.total,
                m.loss.mae,
                m.loss.cscl,
                m.loss.codebook + m.loss.commitment
            );
        }
        if save_every.is_some_and(|n| n > 0 && trainer.step % n == 0) {
            save_checkpoint(
                &Checkpoint {
                    model: trainer.model.clone(),
                    anchors: None,
                    train: Some(trainer.state()),
                },
                &ck_path,
            )?;
        }
        last = Some(m);
    }
    let finished = trainer.step >= cfg.steps;
    let anchors = if finished && cfg.variant != Variant::Baseline {
        let a = compute_anchors(
            &trainer.model,
            &trainer.samples(),
            cfg.variant,
            rc.eval.batch,
        )?;
        info!("computed {} anchors", a.len());
        Some(a)
    } else {
        None
    };
    let summary = TrainSummary {
        variant: cfg.variant,
        step: trainer.step,
        total_steps: cfg.steps,
        finished,
        final_loss: last.as_ref().map(|m| m.loss.total),
        anchors: anchors.as_ref().map_or(0, |a| a.len()),
        used_codes: trainer.total_usage.iter().filter(|&&c| c > 0).count(),
        elapsed_s: t0.elapsed().as_secs_f64(),
        restoration_digest: trainer.model.store().digest(&[ParamGroup::Restoration]),
        degradation_digest: trainer.model.store().digest(&[ParamGroup::Degradation]),
    };
    write_code_usage(&out.join("code_usage.tsv"), &trainer.total_usage)?;
    let state = trainer.state();
    save_checkpoint(
        &Checkpoint {
            model: trainer.model,
            anchors,
            train: Some(state),
        },
        &ck_path,
    )?;
    write_json(&out.join("train_summary.json"), &summary)?;
    info!(
        "checkpoint written to {} after {:.1}s",
        ck_path.display(),
        summary.elapsed_s
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    domain: Domain,
    variant: Variant,
    tta: bool,
    samples: usize,
    mean_psnr: f64,
    mean_ssim: f64,
    dam_calls: usize,
    tta_reports: usize,
}

fn eval_variant(requested: Option<Variant>, ck: &Checkpoint) -> Variant {
    requested
        .or(ck.train.as_ref().map(|t| t.cfg.variant))
        .unwrap_or(Variant::Full)
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    domain: Domain,
    tta: bool,
    variant: Option<Variant>,
) -> Result<()> {
    let mut rc = resolve(common, None)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let ck = load_checkpoint(checkpoint)?;
    let variant = eval_variant(variant, &ck);
    rc.model = ck.model.config().clone();
    rc.train.variant = variant;
    rc.write_snapshot(out)?;
    let mut use_tta = tta;
    if tta && domain == Domain::Source {
        warn!("configuration warning: TTA is never applied to source-domain evaluation; ignoring --tta");
        use_tta = false;
    }
    if use_tta && !variant.injects() {
        warn!(
            "configuration warning: variant {} has no adaptation path; ignoring --tta",
            variant.as_str()
        );
        use_tta = false;
    }
    if use_tta && ck.anchors.is_none() {
        return Err(Error::Config(format!(
            "{} has no anchors; TTA needs a finished training run",
            checkpoint.display()
        )));
    }
    let split = if domain == Domain::Source {
        Split::Test
    } else {
        Split::Target
    };
    let samples = load_folder_dataset(data, split)?;
    if samples.is_empty() {
        return Err(Error::Format(format!(
            "no {split} pairs found under {}",
            data.display()
        )));
    }
    let model = ck.model;
    model.reset_dam_calls();
    let tta_args = if use_tta {
        ck.anchors.as_ref().map(|a| (a, &rc.tta))
    } else {
        None
    };
    let (records, reports) =
        evaluate_samples(&model, &samples, variant, rc.eval.ssim_window, tta_args)?;
    write_jsonl(&fresh(&out.join("metrics.jsonl"))?, &records)?;
    let rows = aggregate_metrics(&records);
    write_aggregate_csv(&out.join("metrics.csv"), &rows)?;
    if use_tta {
        write_jsonl(&fresh(&out.join("tta_reports.jsonl"))?, &reports)?;
    }
    let n = records.len() as f64;
    let summary = EvalSummary {
        domain,
        variant,
        tta: use_tta,
        samples: records.len(),
        mean_psnr: records.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: records.iter().map(|r| r.ssim).sum::<f64>() / n,
        dam_calls: model.dam_calls(),
        tta_reports: reports.len(),
    };
    write_json(&out.join("eval_summary.json"), &summary)?;
    for r in &rows {
        info!(
            "{} {} tta={} psnr {:.3} ssim {:.4} (n={})",
            r.task, r.domain, r.tta_enabled, r.mean_psnr, r.mean_ssim, r.count
        );
    }
    Ok(())
}

fn analyze(
    common: &Common,
    checkpoint: &Path,
    data: &Path,
    target_split: Split,
    variant: Option<Variant>,
) -> Result<()> {
    let mut rc = resolve(common, None)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let ck = load_checkpoint(checkpoint)?;
    let variant = eval_variant(variant, &ck);
    rc.model = ck.model.config().clone();
    rc.train.variant = variant;
    rc.write_snapshot(out)?;
    let source = load_folder_dataset(data, Split::Test)?;
    let target = load_folder_dataset(data, target_split)?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::Format(format!(
            "analysis needs test and {target_split} pairs under {}",
            data.display()
        )));
    }
    let tta = match &ck.anchors {
        Some(a) if variant.injects() => Some((a, &rc.tta)),
        _ => {
            warn!(
                "no anchors for variant {}; adapted-target densities are omitted",
                variant.as_str()
            );
            None
        }
    };
    let report = analyze_features(&ck.model, &source, &target, variant, rc.eval.kl_bins, tta)?;
    write_json(&out.join("density_report.json"), &report)?;
    export_features(
        &ck.model,
        &source,
        variant,
        &out.join("features_source.tsv"),
    )?;
    export_features(
        &ck.model,
        &target,
        variant,
        &out.join("features_target.tsv"),
    )?;
    for d in &report.density {
        match d.kl_source_vs_adapted {
            Some(a) => info!(
                "{}: KL source/raw {:.4}  source/adapted {:.4}",
                d.task, d.kl_source_vs_raw, a
            ),
            None => info!("{}: KL source/raw {:.4}", d.task, d.kl_source_vs_raw),
        }
    }
    if let Some(m) = report.margin_source {
        info!(
            "source cluster margin {:.4} (intra {:.4}, inter {:.4})",
            m.margin, m.intra, m.inter
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ParamCounts {
    total: usize,
    restoration: usize,
    degradation: usize,
    adaptation: usize,
}

fn count_params(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let mut rc = resolve(common, None)?;
    let out = &common.out_dir;
    prepare_out_dir(out)?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => Model::new(rc.model.clone(), rc.seed)?,
    };
    rc.model = model.config().clone();
    rc.write_snapshot(out)?;
    let counts = ParamCounts {
        total: model.param_count(None),
        restoration: model.param_count(Some(ParamGroup::Restoration)),
        degradation: model.param_count(Some(ParamGroup::Degradation)),
        adaptation: model.param_count(Some(ParamGroup::Adaptation)),
    };
    write_json(&out.join("params.json"), &counts)?;
    println!(
        "total {} (restoration {}, degradation {}, adaptation {}) = {:.3}M",
        counts.total,
        counts.restoration,
        counts.degradation,
        counts.adaptation,
        counts.total as f64 / 1e6
    );
    Ok(())
}
