use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use drgrader_core::data::{synth_dataset, Manifest};
use drgrader_core::model::default_b0_plan;
use drgrader_core::optim::{parse_presets, table3_presets};
use drgrader_core::preprocess::{prepare, Image, DEFAULT_MEDIAN_WINDOW, DEFAULT_SIZE};
use drgrader_core::scaling::{apply_scaling, check_resource_constraint, resolve_scaling, ScalingCoefficients, DEFAULT_RESOURCE_TOLERANCE};
use drgrader_core::trainer::{
    self, checkpoint, load_sets, ranked_summary, sweep_csv, PlanSource, RunConfig, SplitPolicy, SweepOptions, Trainer,
};

#[derive(Parser)]
#[command(name = "drgrader", version, about = "Diabetic-retinopathy grading with EfficientNet-B0")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labelled manifest.
    Eval(EvalArgs),
    /// Train every optimizer preset and tabulate the results.
    Sweep(SweepArgs),
    /// Print compound-scaling multipliers and the scaled stage plan.
    Scale(ScaleArgs),
    /// Median-filter and resize every image in a directory.
    Preprocess(PreprocessArgs),
    /// Write a synthetic fundus dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `manifest` from the config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// `table3` or a CSV file with columns optimizer,params,epochs,lr.
    #[arg(long, default_value = "table3")]
    presets: String,
    /// Base run config; optimizer, lr and epochs come from each preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `b0`, `b0@<resolution>` or a plan file (ignored with --config).
    #[arg(long, default_value = "b0")]
    plan: String,
    #[arg(long, default_value = "sweep")]
    out: PathBuf,
    /// Cap every preset at 20 epochs.
    #[arg(long)]
    ci: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Stratified validation fraction (ignored with --config).
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long)]
    phi: f64,
    #[arg(long, default_value_t = 1.2)]
    depth_base: f64,
    #[arg(long, default_value_t = 1.1)]
    width_base: f64,
    #[arg(long, default_value_t = 1.15)]
    res_base: f64,
    #[arg(long, default_value_t = DEFAULT_RESOURCE_TOLERANCE)]
    tolerance: f64,
    /// Write the scaled plan in plan-file format.
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = DEFAULT_MEDIAN_WINDOW)]
    median: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SIZE)]
    resolution: usize,
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DRGRADER_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("DRGRADER_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("DRGRADER_THREADS must be ≥ 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(m) = args.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    let mut t = Trainer::from_config(cfg)?;
    let summary = t.run(Some(&out))?;
    if let Some(last) = &summary.last {
        println!(
            "trained {} epochs: train loss {:.4}, train acc {:.4}, train DSC {:.4}",
            summary.epochs, last.train_loss, last.train_accuracy, last.train_dsc
        );
    }
    if let Some((epoch, score)) = summary.best {
        println!("best epoch {epoch} (macro DSC {score:.4})");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut ck = checkpoint::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let report = trainer::evaluate(&mut ck, &manifest, args.batch_size)?;
    print!("{}", report.to_text());
    if let Some(path) = args.csv {
        std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn plan_source(text: &str) -> Result<PlanSource> {
    Ok(if text.eq_ignore_ascii_case("b0") {
        PlanSource::B0 { resolution: 256 }
    } else if let Some(r) = text.strip_prefix("b0@") {
        PlanSource::B0 {
            resolution: r.parse().context("plan resolution")?,
        }
    } else {
        PlanSource::File(PathBuf::from(text))
    })
}

fn sweep(args: SweepArgs) -> Result<()> {
    let presets = if args.presets == "table3" {
        table3_presets()
    } else {
        let path = Path::new(&args.presets);
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        parse_presets(&text)?
    };
    let mut base = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig {
            plan: plan_source(&args.plan)?,
            split: SplitPolicy::Stratified {
                val_fraction: args.val_fraction,
            },
            ..RunConfig::default()
        },
    };
    if let Some(s) = args.seed {
        base.seed = s;
    }
    if let Some(b) = args.batch_size {
        base.batch_size = b;
    }
    base.validate()?;
    let manifest = Manifest::load(&args.manifest)?;
    let plan = base.plan.load()?;
    let (train, val) = load_sets(&base, &manifest, &plan)?;
    let opts = SweepOptions {
        ci: args.ci,
        out_dir: Some(args.out.clone()),
    };
    let rows = trainer::sweep(&base, &presets, &train, val.as_ref(), &opts)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("results.csv"), sweep_csv(&rows)?)?;
    let summary = ranked_summary(&rows);
    std::fs::write(args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn scale(args: ScaleArgs) -> Result<()> {
    let coeffs = ScalingCoefficients {
        depth_base: args.depth_base,
        width_base: args.width_base,
        resolution_base: args.res_base,
        phi: args.phi,
    };
    let dims = resolve_scaling(&coeffs)?;
    let check = check_resource_constraint(&coeffs, args.tolerance);
    println!("depth ×{:.6}  width ×{:.6}  resolution ×{:.6}", dims.depth, dims.width, dims.resolution);
    println!(
        "resource factor D·Ω²·R² = {:.6} ({} tolerance {} around 2)",
        check.resources,
        if check.satisfied { "within" } else { "outside" },
        args.tolerance
    );
    let plan = apply_scaling(&default_b0_plan(), &dims)?;
    println!("\nOperator, Resolution, Channels, Layers");
    for row in plan.describe() {
        println!("{row}");
    }
    if let Some(path) = args.plan_out {
        std::fs::write(&path, plan.to_text())?;
    }
    Ok(())
}

fn preprocess(args: PreprocessArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut done = 0;
    for path in entries {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("png" | "ppm" | "pnm") => {
                let img = Image::load(&path)?;
                let out = prepare(&img, args.median, args.size)?;
                out.save(&args.out.join(path.file_name().unwrap()))?;
                done += 1;
            }
            Some("csv") => {
                std::fs::copy(&path, args.out.join(path.file_name().unwrap()))?;
            }
            _ => {}
        }
    }
    println!("prepared {done} images into {}", args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let m = synth_dataset(&args.out, args.per_class, args.resolution, args.seed)?;
    println!("wrote {} images and manifest.csv to {}", m.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads()?;
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Scale(a) => scale(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_sources() {
        assert_eq!(plan_source("b0").unwrap(), PlanSource::B0 { resolution: 256 });
        assert_eq!(plan_source("b0@64").unwrap(), PlanSource::B0 { resolution: 64 });
        assert!(matches!(plan_source("plans/x.txt").unwrap(), PlanSource::File(_)));
        assert!(plan_source("b0@x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
