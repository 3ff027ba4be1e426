use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use moge::analysis::invariance::InvarianceReport;
use moge::analysis::maps::write_category_maps;
use moge::analysis::{category_mean_maps, invariance_report};
use moge::config::{ModelKind, RunConfig};
use moge::data::{load_split, AffineSpec, ImageDataset, NUM_CLASSES};
use moge::gradcheck::{default_model_suite, reg_gradcheck, worst_by_group, CheckResult, GradMutation};
use moge::group_reg::SigmaSchedule;
use moge::model::checkpoint::load_checkpoint;
use moge::model::ModelParams;
use moge::router::RouterConfig;
use moge::train::{evaluate, train, with_threads};
use moge::Error;

#[derive(Parser)]
#[command(name = "moge", version, about = "Mixture-of-group-experts experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Mean IMED of routing maps under affine perturbations.
    Invariance(InvarianceArgs),
    /// Per-class routing maps and their Moran's I.
    Maps(MapsArgs),
    /// Print the sigma schedule as CSV.
    Schedule(ScheduleArgs),
    /// Test accuracy and expert usage of a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the model family; `moe` also sets lambda to 0.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated epochs, e.g. `50,100,150`.
    #[arg(long, value_delimiter = ',')]
    epoch_snapshots: Option<Vec<usize>>,
}

/// Checkpoints are given as `tag=path` or a bare path (tagged by file stem).
#[derive(Args)]
struct DataArgs {
    /// Run configuration supplying the data directory and test subset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct InvarianceArgs {
    #[arg(long, required = true)]
    checkpoint: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = moge::analysis::imed::DEFAULT_WIDTH)]
    imed_width: f64,
    /// Random perturbations per image drawn from [-magnitude, magnitude];
    /// 0 applies each magnitude exactly.
    #[arg(long, default_value_t = 0)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Transforms such as `rotation:5` or `translation:0.1:0`; defaults to the 12-cell grid.
    #[arg(long)]
    transform: Vec<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MapsArgs {
    #[arg(long, required = true)]
    checkpoint: Vec<String>,
    #[command(flatten)]
    data: DataArgs,
    /// Directory for the per-class CSV/PGM files, one subdirectory per tag.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long)]
    sigma0: f64,
    #[arg(long)]
    sigma_min: f64,
    #[arg(long)]
    gamma: f64,
    #[arg(long)]
    iters: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

/// Failure with its process exit status.
struct Failure {
    code: u8,
    msg: String,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_CHECK: u8 = 5;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Shape(_) => EXIT_CONFIG,
            Error::Load { .. } => EXIT_DATA,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Io(_) => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

fn fail(code: u8) -> impl FnOnce(Error) -> Failure {
    move |e| Failure { code, msg: e.to_string() }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
        Command::Invariance(a) => cmd_invariance(a),
        Command::Maps(a) => cmd_maps(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).map_err(fail(EXIT_CONFIG)),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(cfg: &RunConfig, train: bool) -> CliResult<ImageDataset> {
    let dir = cfg.resolved_data_dir();
    let ds = load_split(&dir, train).map_err(fail(EXIT_DATA))?;
    let subset = if train { cfg.train_subset } else { cfg.test_subset };
    Ok(match subset {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = &a.model {
        cfg = cfg.with_model(ModelKind::from_tag(m)?);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.threads {
        cfg.threads = Some(t);
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(s) = a.epoch_snapshots {
        cfg.epoch_snapshots = Some(s);
    }
    cfg.validate()?;
    let train_set = load_data(&cfg, true)?;
    let test_set = load_data(&cfg, false)?;
    eprintln!(
        "training {} (n={}, k={}, lambda={}) on {} images, testing on {}",
        cfg.model.tag(),
        cfg.n_experts,
        cfg.k,
        cfg.lambda,
        train_set.len(),
        test_set.len()
    );
    let out = cfg.out_dir.clone();
    let report = with_threads(cfg.threads, || {
        train(&cfg, &train_set, &test_set, &out, |r| {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train {:.2}%  test {:.2}%  experts {}  entropy {:.3}",
                r.epoch,
                r.train_loss,
                100.0 * r.train_acc,
                100.0 * r.test_acc,
                r.active_experts,
                r.usage_entropy
            )
        })
    })??;
    let last = report.epochs.last().expect("at least one epoch");
    println!("final test accuracy {:.2}%", 100.0 * last.test_acc);
    for (epoch, path) in &report.checkpoints {
        println!("checkpoint epoch {epoch}: {}", path.display());
    }
    Ok(())
}

fn print_checks(results: &[CheckResult]) -> bool {
    let mut ok = true;
    for r in results {
        ok &= r.passed();
        println!(
            "{}  {:<48} worst rel error {:.3e} (tolerance {:.0e})",
            if r.passed() { "pass" } else { "FAIL" },
            r.name,
            r.rel_error,
            r.tolerance
        );
    }
    ok
}

fn cmd_gradcheck(seed: u64) -> CliResult {
    let reg = reg_gradcheck(seed)?;
    let model = default_model_suite(seed, &GradMutation::None)?;
    let failed: Vec<String> = model.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    let ok = print_checks(&reg) & print_checks(&worst_by_group(&model));
    if ok {
        return Ok(());
    }
    Err(Failure {
        code: EXIT_CHECK,
        msg: format!("gradient check failed: {}", failed.join(", ")),
    })
}

fn parse_checkpoint_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((tag, path)) => (tag.to_string(), PathBuf::from(path)),
        None => {
            let path = PathBuf::from(arg);
            let tag = path.file_stem().map_or_else(|| arg.to_string(), |s| s.to_string_lossy().into_owned());
            (tag, path)
        }
    }
}

fn load_model(path: &Path) -> CliResult<(ModelParams, RouterConfig)> {
    load_checkpoint(path).map_err(fail(EXIT_CHECKPOINT))
}

fn cmd_invariance(a: InvarianceArgs) -> CliResult {
    let cfg = load_config(a.data.config.as_deref())?;
    let specs: Vec<AffineSpec> = if a.transform.is_empty() {
        AffineSpec::default_grid()
    } else {
        a.transform.iter().map(|s| s.parse()).collect::<Result<_, Error>>()?
    };
    let checkpoints: Vec<(String, PathBuf)> = a.checkpoint.iter().map(|c| parse_checkpoint_arg(c)).collect();
    let models = checkpoints
        .iter()
        .map(|(tag, p)| Ok((tag.clone(), load_model(p)?.0)))
        .collect::<CliResult<Vec<_>>>()?;
    let test = load_data(&cfg, false)?;
    let samples = (a.samples > 0).then_some((a.samples, a.seed));
    let mut report = InvarianceReport::default();
    for (tag, model) in &models {
        let r = with_threads(a.data.threads, || invariance_report(model, tag, &test, &specs, a.imed_width, samples))??;
        report.extend(r);
    }
    let csv = report.to_csv();
    match a.out {
        Some(p) => std::fs::write(&p, csv).map_err(|e| Failure::from(Error::from(e)))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_maps(a: MapsArgs) -> CliResult {
    let cfg = load_config(a.data.config.as_deref())?;
    let checkpoints: Vec<(String, PathBuf)> = a.checkpoint.iter().map(|c| parse_checkpoint_arg(c)).collect();
    let models = checkpoints
        .iter()
        .map(|(tag, p)| Ok((tag.clone(), load_model(p)?.0)))
        .collect::<CliResult<Vec<_>>>()?;
    let test = load_data(&cfg, false)?;
    for (tag, model) in &models {
        let maps = with_threads(a.data.threads, || category_mean_maps(model, &test, NUM_CLASSES))??;
        for c in maps.missing() {
            eprintln!("warning: {tag}: class {c} has no test items, map skipped");
        }
        if let Some(dir) = &a.out {
            write_category_maps(&dir.join(tag), &maps)?;
        }
        println!("{tag} mean_morans_i={:.6} classes={}", maps.mean_morans_i(), maps.maps.iter().flatten().count());
    }
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> CliResult {
    let s = SigmaSchedule::new(a.sigma0, a.sigma_min, a.gamma, a.iters)?;
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    let io = |e: std::io::Error| Failure::from(Error::from(e));
    writeln!(out, "t,sigma").map_err(io)?;
    for t in 0..=a.iters {
        writeln!(out, "{t},{}", s.sigma_at(t)).map_err(io)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let cfg = load_config(a.data.config.as_deref())?;
    let (model, router) = load_model(&a.checkpoint)?;
    let test = load_data(&cfg, false)?;
    let eval = with_threads(a.data.threads, || evaluate(&model, &router, &test))??;
    println!(
        "test accuracy {:.2}% ({}/{})  active experts {}/{}  usage entropy {:.4}",
        100.0 * eval.accuracy(),
        eval.correct,
        eval.total,
        eval.usage.active(),
        model.n_experts(),
        eval.usage.normalized_entropy
    );
    Ok(())
}
