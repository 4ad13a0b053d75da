use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use auxq::auxiliary::{AuxiliarySpec, DEFAULT_AGGREGATOR_WIDTH};
use auxq::config::{ExperimentConfig, Method};
use auxq::metrics::{self, MetricsLog, MetricsRow, Split};
use auxq::train::{self, Trainer};
use auxq::{DType, Element, Error, Result};

/// Overrides the default output directory (`runs`).
const OUT_DIR_ENV: &str = "AUXQ_OUT_DIR";

#[derive(Parser)]
#[command(name = "auxq", version, about = "Low-precision training with a full-precision auxiliary module")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Output {
    /// Output directory; defaults to $AUXQ_OUT_DIR, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Output {
    fn dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full-precision pretraining.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        output: Output,
    },
    /// Quantized fine-tuning from a checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint holding the initial network.
        #[arg(long)]
        init: PathBuf,
        /// Overrides the configured method.
        #[arg(long)]
        method: Option<Method>,
        /// Auxiliary module spec (JSON file). Without a value, the config's
        /// `auxiliary` section or a 1×1-adaptor default is used.
        #[arg(long, num_args = 0..=1)]
        aux: Option<Option<PathBuf>>,
        #[command(flatten)]
        output: Output,
    },
    /// Evaluates a checkpoint's backbone on a split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
    },
    /// Method × seed grid.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,auxi")]
        methods: Vec<Method>,
        /// Number of seeds, counting up from the config's seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker threads; each cell stays single-threaded.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        output: Output,
    },
    /// Converts a metrics JSON file to the fixed-column CSV.
    ExportCurves {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the input path with a `.csv` extension.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Prints a checkpoint's precision policy audit and parameter counts.
    Inspect { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let msg = e.kind().to_string();
            eprintln!("{}", error_line("usage", &msg));
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            let usage = matches!(e, Error::Usage(_) | Error::Validation(_) | Error::Json(_));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

macro_rules! with_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            with_dtype!(cfg.train.dtype, pretrain_cmd(&cfg, &base_dir(&config), &output.dir()))
        }
        Command::Finetune { config, init, method, aux, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(m) = method {
                cfg.train.method = m;
            }
            let aux = resolve_aux(&cfg, aux)?;
            with_dtype!(cfg.train.dtype, finetune_cmd(&cfg, &base_dir(&config), &init, aux.as_ref(), &output.dir()))
        }
        Command::Eval { config, checkpoint, split } => {
            let cfg = ExperimentConfig::load(&config)?;
            with_dtype!(cfg.train.dtype, eval_cmd(&cfg, &base_dir(&config), &checkpoint, &split))
        }
        Command::Compare { config, methods, seeds, jobs, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            if seeds == 0 {
                return Err(Error::usage("--seeds must be at least 1"));
            }
            with_dtype!(cfg.train.dtype, compare_cmd(&cfg, &base_dir(&config), &methods, seeds, jobs, &output.dir()))
        }
        Command::ExportCurves { input, output } => {
            let log = MetricsLog::load(&input)?;
            let issues = metrics::check_rows(&log.rows);
            if !issues.is_empty() {
                return Err(Error::format(&input, issues.join("; ")));
            }
            let out = output.unwrap_or_else(|| input.with_extension("csv"));
            metrics::write_text(&out, &log.to_csv())?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Inspect { checkpoint } => inspect_cmd(&checkpoint),
    }
}

fn resolve_aux(cfg: &ExperimentConfig, flag: Option<Option<PathBuf>>) -> Result<Option<AuxiliarySpec>> {
    let spec = match flag {
        None => None,
        Some(Some(path)) => {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))?)
        }
        Some(None) => Some(
            cfg.auxiliary
                .clone()
                .unwrap_or_else(|| AuxiliarySpec::for_backbone(&cfg.network, 1, DEFAULT_AGGREGATOR_WIDTH)),
        ),
    };
    match (cfg.train.method, &spec) {
        (Method::Auxi, None) => Err(Error::Validation(vec!["method auxi requires --aux".into()])),
        (m, Some(_)) if m != Method::Auxi => {
            Err(Error::Validation(vec![format!("--aux is only valid with method auxi, not {m}")]))
        }
        _ => Ok(spec),
    }
}

fn print_row(row: &MetricsRow) {
    let top5 = row.top5.map(|v| format!(" top5={v:.4}")).unwrap_or_default();
    log::info!(
        "epoch {:>3} {:<5} loss={:.4} top1={:.4}{top5} lr={} ({:.1}s)",
        row.epoch,
        row.split.as_str(),
        row.loss,
        row.top1,
        row.lr,
        row.seconds
    );
}

/// Runs `trainer` to completion, writing the checkpoint and metrics under `out/name`.
/// On divergence the last good state is saved next to it.
fn fit_and_save<T: Element>(
    mut trainer: Trainer<T>,
    splits: &auxq::data::Splits,
    out: &Path,
    name: &str,
) -> Result<()> {
    let result = trainer.fit(splits, print_row);
    let log = trainer.metrics_log();
    log.write(&out.join(format!("{name}_metrics.csv")), &out.join(format!("{name}_metrics.json")))?;
    match result {
        Ok(()) => {
            let path = out.join(format!("{name}.ckpt"));
            trainer.save(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            let path = out.join(format!("{name}.last-good.ckpt"));
            trainer.save(&path)?;
            log::error!("saved last good state to {}", path.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn pretrain_cmd<T: Element>(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<()> {
    let splits = cfg.dataset.load(base)?;
    let trainer = Trainer::<T>::pretrain(cfg)?;
    fit_and_save(trainer, &splits, out, "pretrain")
}

fn finetune_cmd<T: Element>(
    cfg: &ExperimentConfig,
    base: &Path,
    init: &Path,
    aux: Option<&AuxiliarySpec>,
    out: &Path,
) -> Result<()> {
    let net = train::load_network::<T>(init)?;
    let trainer = Trainer::finetune(net, cfg, aux)?;
    let splits = cfg.dataset.load(base)?;
    fit_and_save(trainer, &splits, out, &format!("finetune_{}", cfg.train.method))
}

fn eval_cmd<T: Element>(cfg: &ExperimentConfig, base: &Path, ckpt: &Path, split: &str) -> Result<()> {
    let net = train::load_network::<T>(ckpt)?;
    let splits = cfg.dataset.load(base)?;
    let (ds, which) = if split == "train" { (&splits.train, Split::Train) } else { (&splits.test, Split::Test) };
    let pipeline = auxq::data::Pipeline::from_spec(&cfg.dataset);
    let start = std::time::Instant::now();
    let e = train::evaluate(&net, ds, &pipeline, train::EVAL_BATCH)?;
    let row = MetricsRow {
        epoch: 0,
        split: which,
        loss: e.loss,
        top1: e.top1,
        top5: e.top5,
        lr: 0.0,
        seconds: start.elapsed().as_secs_f64(),
    };
    println!("{}", serde_json::to_string(&row)?);
    Ok(())
}

fn compare_cmd<T: Element>(
    cfg: &ExperimentConfig,
    base: &Path,
    methods: &[Method],
    seeds: u64,
    jobs: usize,
    out: &Path,
) -> Result<()> {
    let splits = cfg.dataset.load(base)?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.train.seed + i).collect();
    let table = train::run_comparison::<T>(cfg, &splits, methods, &seed_list, jobs)?;
    table.write(out)?;
    print!("{}", table.summary_csv());
    let failed = table.cells.iter().filter(|c| !c.ok).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed; see comparison.csv", table.cells.len());
    }
    Ok(())
}

fn inspect_cmd(path: &Path) -> Result<()> {
    let s = train::inspect_checkpoint(path)?;
    let p = s.network.policy;
    println!("checkpoint {}", path.display());
    println!("stage={} method={} epoch={} dtype={:?}", s.stage, s.method, s.epoch, s.dtype);
    println!(
        "policy first_layer={} last_layer={} interior={} activation={}",
        p.first_layer, p.last_layer, p.interior, p.activation
    );
    for layer in s.network.precision_report() {
        println!("  {layer}");
    }
    println!("backbone_parameters={}", s.network.parameter_count());
    if let Some(a) = &s.auxiliary {
        println!("auxiliary_parameters={} (all Full, training only)", a.parameter_count(&s.network));
    }
    Ok(())
}
