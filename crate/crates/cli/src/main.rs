//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 failed check or training abort, 2 usage or
//! config error.

mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use ccs::diagnostics::{gradcheck_points, Fault, TinyProblem};
use ccs::evalharness::{
    ablation_grid, aggregation_comparison, evaluate, write_runs_csv, write_summary_csv,
};
use ccs::numeric::GradCheckReport;
use ccs::shared::Aggregation;
use ccs::synthdata::{self, Dataset, Instance, SynthConfig, MANIFEST_FILE};
use ccs::trainer::{self, split, write_metrics_csv, Checkpoint};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::ConfigFile;

#[derive(Parser)]
#[command(
    name = "ccs",
    version,
    about = "Cooperative cross-stream network on synthetic paired-modality data"
)]
struct Cli {
    /// Overrides the seed of the dataset generator or of training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and metric log.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Check analytic gradients of the full objective on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train the component ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Category count; even and at least 4.
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    per_class: usize,
    /// Positions per instance.
    #[arg(long, default_value_t = 60)]
    length: usize,
    #[arg(long, default_value_t = 16)]
    d_in: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train for max_epochs regardless of validation progress.
    #[arg(long)]
    fixed_epochs: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    /// The held-out validation split of the training seed.
    Val,
    /// Every instance of the dataset.
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalSplit::Val)]
    split: EvalSplit,
    /// Report path; defaults to eval.json in the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional config; only its seed is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Evaluation points away from any hinge.
    #[arg(long, default_value_t = 5)]
    points: usize,
    /// Negate the analytic gradient of this parameter index.
    #[arg(long)]
    fault_sign_flip: Option<usize>,
    /// Place one triplet hinge just above zero instead of avoiding kinks.
    #[arg(long)]
    hinge_adjacent: bool,
    /// Write the reports as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Number of seeds, counting up from the base seed.
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Also compare these aggregation kinds, e.g. avg,max,mul,concat.
    #[arg(long, value_delimiter = ',')]
    aggregations: Vec<String>,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn check(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let seed = cli.seed;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::Gradcheck(a) => gradcheck(a, seed),
        Command::Ablate(a) => ablate(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> std::result::Result<ConfigFile, Failure> {
    let mut cfg = ConfigFile::load(path).map_err(usage)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(cfg: &ConfigFile) -> std::result::Result<Dataset, Failure> {
    let path = cfg.dataset().map_err(usage)?;
    synthdata::load(path)
        .with_context(|| format!("cannot load dataset {}", path.display()))
        .map_err(usage)
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(usage)
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot write {}", path.display())
    })?))
}

fn gen_data(a: GenDataArgs, seed: Option<u64>) -> Outcome {
    let cfg = SynthConfig {
        n: a.classes,
        per_class: a.per_class,
        length: a.length,
        d_in: a.d_in,
        seed: seed.unwrap_or(SynthConfig::default().seed),
    };
    let ds = synthdata::generate(&cfg).map_err(|e| usage(e.into()))?;
    create_dir(&a.out)?;
    synthdata::save(&ds, &a.out).map_err(|e| check(e.into()))?;
    println!("{}", a.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train(a: TrainArgs, seed: Option<u64>) -> Outcome {
    let mut cfg = load_config(&a.config, seed)?;
    if a.fixed_epochs {
        cfg.train.early_stop_patience = None;
    }
    let ds = load_dataset(&cfg)?;
    let out_dir = cfg.out_dir();
    create_dir(&out_dir)?;
    let outcome = match &a.resume {
        None => trainer::fit(&ds, &cfg.train),
        Some(path) => {
            let mut ck = Checkpoint::load(path)
                .with_context(|| format!("cannot load checkpoint {}", path.display()))
                .map_err(usage)?;
            let mut want = cfg.train.clone();
            want.max_epochs = ck.config.max_epochs;
            want.early_stop_patience = ck.config.early_stop_patience;
            if want != ck.config {
                return Err(usage(anyhow!(
                    "config differs from the checkpoint's beyond max_epochs and early stopping"
                )));
            }
            ck.config.max_epochs = cfg.train.max_epochs;
            ck.config.early_stop_patience = cfg.train.early_stop_patience;
            trainer::resume(&ds, ck)
        }
    };
    let outcome = outcome.map_err(|e| match e {
        ccs::CcsError::Config(_) => usage(e.into()),
        other => check(other.into()),
    })?;

    let ck_path = out_dir.join("checkpoint.ckpt");
    let csv_path = out_dir.join("metrics.csv");
    let report_path = out_dir.join("report.json");
    let write = || -> Result<()> {
        outcome.checkpoint.save(&ck_path)?;
        write_metrics_csv(&outcome.checkpoint.log, writer(&csv_path)?)?;
        fs::write(&report_path, outcome.report.to_json()?)?;
        Ok(())
    };
    write().map_err(check)?;
    let ck = &outcome.checkpoint;
    println!(
        "epochs {}{}  acc_f {:.4}  acc_o {:.4}  acc_fused {:.4}",
        ck.epoch,
        if ck.stopped { " (early stop)" } else { "" },
        outcome.report.acc_f,
        outcome.report.acc_o,
        outcome.report.acc_fused
    );
    println!("{}", ck_path.display());
    println!("{}", csv_path.display());
    Ok(())
}

fn eval(a: EvalArgs, seed: Option<u64>) -> Outcome {
    let cfg = load_config(&a.config, seed)?;
    let ds = load_dataset(&cfg)?;
    let ck = Checkpoint::load(&a.checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))
        .map_err(usage)?;
    let positions: Vec<usize> = match a.split {
        EvalSplit::Val => split(&ds, &ck.config).1,
        EvalSplit::All => (0..ds.instances.len()).collect(),
    };
    let pool: Vec<&Instance> = positions.iter().map(|&i| &ds.instances[i]).collect();
    let report =
        evaluate(&ck.model, &pool, ck.config.fusion_weight).map_err(|e| check(e.into()))?;
    let out = a.out.unwrap_or_else(|| cfg.out_dir().join("eval.json"));
    if let Some(dir) = out.parent() {
        create_dir(dir)?;
    }
    let json = report.to_json().map_err(|e| check(e.into()))?;
    fs::write(&out, json)
        .with_context(|| format!("cannot write {}", out.display()))
        .map_err(check)?;
    println!(
        "instances {}  acc_f {:.4}  acc_o {:.4}  acc_fused {:.4}",
        pool.len(),
        report.acc_f,
        report.acc_o,
        report.acc_fused
    );
    println!("{}", out.display());
    Ok(())
}

fn print_report(label: &str, report: &GradCheckReport, names: &[String], expected: bool) {
    println!(
        "{label}: max relative error {:.3e}, kink margin {:.3e}, {}",
        report.max_rel_error(),
        report.kink_margin,
        if report.passed() { "pass" } else { "FAIL" }
    );
    for p in report.failures() {
        println!(
            "  {} {}[{}]: analytic {:.6e} numeric {:.6e} rel {:.3e}{}",
            if expected {
                "expected failure"
            } else {
                "failure"
            },
            names[p.index],
            p.worst_entry,
            p.analytic,
            p.numeric,
            p.max_rel_error,
            if expected {
                " (hinge within one step)"
            } else {
                ""
            }
        );
    }
}

fn gradcheck(a: GradcheckArgs, seed: Option<u64>) -> Outcome {
    if !(a.tol > 0.0 && a.eps > 0.0) {
        return Err(usage(anyhow!("--tol and --eps must be positive")));
    }
    let base = match &a.config {
        Some(p) => load_config(p, seed)?.train.seed,
        None => seed.unwrap_or(0),
    };
    let names = TinyProblem::new(base, true)
        .map_err(|e| check(e.into()))?
        .names();
    if let Some(i) = a.fault_sign_flip {
        if i >= names.len() {
            return Err(usage(anyhow!(
                "--fault-sign-flip {i} is out of range, the model has {} parameters",
                names.len()
            )));
        }
    }
    let fault = a.fault_sign_flip.map(|param| Fault::SignFlip { param });
    let mut reports = Vec::new();
    if a.hinge_adjacent {
        let mut p = TinyProblem::new(base, true).map_err(|e| check(e.into()))?;
        let anchor = p.place_on_hinge(0.1 * a.eps).map_err(|e| check(e.into()))?;
        let r = p
            .gradcheck(a.eps, a.tol, fault)
            .map_err(|e| check(e.into()))?;
        print_report(
            &format!(
                "seed {base}, hinge of anchor {anchor} at +{:.1e}",
                0.1 * a.eps
            ),
            &r,
            &names,
            true,
        );
        reports.push((base, r));
    } else {
        let points =
            gradcheck_points(base, a.points, 1e-4, a.eps, a.tol).map_err(|e| check(e.into()))?;
        for (s, r) in points {
            let r = if fault.is_some() {
                TinyProblem::new(s, true)
                    .and_then(|p| p.gradcheck(a.eps, a.tol, fault))
                    .map_err(|e| check(e.into()))?
            } else {
                r
            };
            print_report(&format!("seed {s}"), &r, &names, false);
            reports.push((s, r));
        }
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| check(e.into()))?;
        fs::write(path, json)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(check)?;
    }
    let failed = reports.iter().filter(|(_, r)| !r.passed()).count();
    if failed > 0 {
        return Err(check(anyhow!(
            "{failed} of {} gradient checks failed at tol {:e}",
            reports.len(),
            a.tol
        )));
    }
    println!(
        "all {} gradient checks passed at tol {:e}",
        reports.len(),
        a.tol
    );
    Ok(())
}

fn ablate(a: AblateArgs, seed: Option<u64>) -> Outcome {
    if a.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let kinds: Vec<Aggregation> = a
        .aggregations
        .iter()
        .map(|s| s.trim().parse::<Aggregation>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| usage(e.into()))?;
    let cfg = load_config(&a.config, seed)?;
    let ds = load_dataset(&cfg)?;
    let out_dir = cfg.out_dir();
    create_dir(&out_dir)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| cfg.train.seed + i).collect();

    let write = |name: &str, report: &ccs::evalharness::GridReport| -> Result<()> {
        let runs = out_dir.join(format!("{name}.csv"));
        let summary = out_dir.join(format!("{name}_summary.csv"));
        write_runs_csv(&report.runs, writer(&runs)?)?;
        write_summary_csv(&report.summary, writer(&summary)?)?;
        for s in &report.summary {
            println!(
                "{:<9} acc_f {:.4}±{:.4}  acc_o {:.4}±{:.4}  acc_fused {:.4}±{:.4}",
                s.variant,
                s.acc_f_mean,
                s.acc_f_std,
                s.acc_o_mean,
                s.acc_o_std,
                s.acc_fused_mean,
                s.acc_fused_std
            );
        }
        println!("{}", runs.display());
        println!("{}", summary.display());
        Ok(())
    };

    let grid = ablation_grid(&ds, &cfg.train, &seeds).map_err(|e| check(e.into()))?;
    write("ablation", &grid).map_err(check)?;
    if !kinds.is_empty() {
        let cmp =
            aggregation_comparison(&ds, &cfg.train, &kinds, &seeds).map_err(|e| check(e.into()))?;
        write("aggregation", &cmp).map_err(check)?;
    }
    Ok(())
}
