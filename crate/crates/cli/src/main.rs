use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lsrs_core::config::RunConfig;
use lsrs_core::lsrs::{LsrsConfig, Selection};
use lsrs_core::pipeline::{Pipeline, SampleRequest, StageStatus, SweepAxis};

#[derive(Parser)]
#[command(name = "lsrs", version, about = "Desk-scale next-scale generation with latent scale rejection sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; an empty file selects every default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory holding the stage folders.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// Worker threads (default: logical cores). LSRS_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus and calibrate validity thresholds.
    GenData,
    /// Fit the residual-quantization codebook.
    FitCodebook,
    /// Train the next-scale prior.
    TrainPrior,
    /// Generate negatives and encode positives for the scorer.
    BuildScoreDataset,
    /// Train the configured scoring model.
    TrainScorer,
    /// Run every training stage in order.
    Prepare,
    /// Generate one sample.
    Sample(SampleArgs),
    /// Replace each scale with random tokens and measure violation changes.
    AblateScale,
    /// Evaluate a grid of configurations.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Metrics, scorer diagnostics and compute counters of the configured run.
    Report,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First scale with candidate selection (defaults to the config).
    #[arg(long)]
    st: Option<usize>,
    /// Candidates per active scale (defaults to the config).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_enum)]
    select: Option<SelectArg>,
    #[arg(long)]
    ksel: Option<usize>,
    /// Plain next-scale sampling without a scorer.
    #[arg(long)]
    baseline: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectArg {
    Greedy,
    Topk,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    M,
    St,
    TopK,
    LossKind,
    FirstScaleExclusion,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::M => SweepAxis::M,
            AxisArg::St => SweepAxis::St,
            AxisArg::TopK => SweepAxis::TopK,
            AxisArg::LossKind => SweepAxis::LossKind,
            AxisArg::FirstScaleExclusion => SweepAxis::FirstScaleExclusion,
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("LSRS_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("LSRS_THREADS={v:?} is not a count"))?;
            Ok(Some(n))
        }
        Err(_) => Ok(flag),
    }
}

fn stage(name: &str, status: StageStatus) {
    match status {
        StageStatus::Ran => eprintln!("{name}: done"),
        StageStatus::UpToDate => eprintln!("{name}: up to date"),
    }
}

fn sample_config(config: &RunConfig, args: &SampleArgs) -> Result<Option<LsrsConfig>> {
    if args.baseline {
        return Ok(None);
    }
    let selection = match (args.select, args.ksel) {
        (None, None) => config.lsrs.selection,
        (Some(SelectArg::Greedy), None) => Selection::Greedy,
        (Some(SelectArg::Greedy), Some(_)) => bail!("--ksel only applies to --select topk"),
        (Some(SelectArg::Topk) | None, k) => Selection::Topk {
            k_sel: k.unwrap_or(match config.lsrs.selection {
                Selection::Topk { k_sel } => k_sel,
                Selection::Greedy => 1,
            }),
        },
    };
    let st = args.st.unwrap_or(config.lsrs.st);
    let m = args.m.unwrap_or(config.lsrs.m);
    Ok(Some(LsrsConfig::from_st_m(config.scales(), st, m, selection)?))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.common.threads)? {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = match &cli.common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    let pipeline = Pipeline::new(config, &cli.common.workdir)?.with_logger(|m| eprintln!("{m}"));
    match cli.command {
        Command::GenData => stage("gen-data", pipeline.gen_data()?),
        Command::FitCodebook => stage("fit-codebook", pipeline.fit_codebook()?),
        Command::TrainPrior => stage("train-prior", pipeline.train_prior()?),
        Command::BuildScoreDataset => stage("build-score-dataset", pipeline.build_score_dataset()?),
        Command::TrainScorer => stage("train-scorer", pipeline.train_scorer()?),
        Command::Prepare => pipeline.prepare()?,
        Command::Sample(args) => {
            let lsrs = sample_config(&pipeline.config, &args)?;
            let out = pipeline.sample(&SampleRequest {
                class: args.class,
                seed: args.seed,
                lsrs,
            })?;
            println!(
                "{} valid={} violation={:.5}",
                out.dir.display(),
                out.valid,
                out.violation
            );
        }
        Command::AblateScale => {
            let (real, generated) = pipeline.ablate_scale()?;
            println!("scale,real_delta,generated_delta");
            for (k, (r, g)) in real.deltas.iter().zip(&generated.deltas).enumerate() {
                println!("{},{r:.6},{g:.6}", k + 1);
            }
        }
        Command::Sweep { axis } => {
            let axis = SweepAxis::from(axis);
            pipeline.sweep(axis)?;
            let path = pipeline.workdir.join("sweeps").join(format!("{}.csv", axis.label()));
            print!("{}", std::fs::read_to_string(path)?);
        }
        Command::Report => {
            let r = pipeline.report()?;
            for (seed, (b, l)) in r.seeds.iter().zip(r.baseline.iter().zip(&r.lsrs)) {
                println!(
                    "seed {seed}: baseline fid {:.5} validity {:.4} | lsrs(st={}, m={}) fid {:.5} validity {:.4}",
                    b.frechet.fid, b.validity, r.st, r.m, l.frechet.fid, l.validity
                );
            }
            let acc: Vec<String> = r
                .scorer
                .per_scale
                .iter()
                .map(|s| s.accuracy.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()))
                .collect();
            println!("scorer accuracy per scale: [{}]", acc.join(", "));
            println!(
                "wall-clock per image = {:.3} + {:.3}·M ms (R² {:.3})",
                r.compute.intercept, r.compute.slope, r.compute.r2
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
