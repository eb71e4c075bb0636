use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ultramem::autodiff::Fault;
use ultramem::checkpoint::{self, write_atomic};
use ultramem::cost::{
    access_csv, boundary_csv, cost_preset, crossover_batch, crossover_linear_scan, pow2_range, sweep_points,
    CostScenario, Crossover,
};
use ultramem::lm::{self, perplexity, synthetic_text, write_csv, Corpus, LmConfig, StepMetrics};
use ultramem::verify::{render_table, run_suite, VerifyOptions, SUITES};
use ultramem::{Error, Precision};

#[derive(Parser)]
#[command(name = "ultramem", version, about = "Train, verify and cost ultra-sparse memory layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a byte-level language model.
    Train(TrainArgs),
    /// Report held-out perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Run the oracle suites and print a pass/fail table.
    Verify(VerifyArgs),
    /// Emit memory-access and partition-volume curves.
    Cost(CostArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "64")]
    precision: PrecisionArg,
    /// Fixed reduction order. Every kernel already reduces in a fixed order,
    /// so this only gets recorded with the run.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Override the configured number of steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Raw bytes to train on instead of the generated corpus.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "64")]
    precision: PrecisionArg,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites.
    #[arg(long, value_delimiter = ',')]
    suite: Vec<String>,
    /// Corrupt one backward rule to show the gradient suite catches it.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Gelu,
}

#[derive(Args)]
struct CostArgs {
    /// Scenario file with the fields of a cost scenario.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Batch sweep such as `B=1..1e6`, optionally followed by `log`.
    #[arg(long, num_args = 1..=2)]
    sweep: Option<Vec<String>>,
    /// Partition grid such as `P=2..64 v_dim=8..1024`.
    #[arg(long, num_args = 1..=2)]
    partition: Option<Vec<String>>,
    /// Values per token for the partition grid.
    #[arg(long, default_value_t = 8)]
    topm: u64,
    /// Tokens per step for the partition grid.
    #[arg(long, default_value_t = 1)]
    bs: u64,
    /// Count `4 D^2` per chosen expert instead of `2 D^2`.
    #[arg(long)]
    full_expert_params: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Errors the user can fix by changing arguments or configuration.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Cost(a) => cmd_cost(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let is_usage = e.downcast_ref::<Usage>().is_some()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Argument(_)));
            ExitCode::from(if is_usage { 2 } else { 1 })
        }
    }
}

fn load_config(config: Option<&Path>, preset: Option<&str>) -> anyhow::Result<LmConfig> {
    match (config, preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(LmConfig::from_toml(&text)?)
        }
        (None, Some(name)) => Ok(lm::preset(name)?),
        (None, None) => Err(usage("pass --config FILE or --preset NAME")),
    }
}

fn load_corpus(path: Option<&Path>, cfg: &LmConfig) -> anyhow::Result<Corpus> {
    let bytes = match path {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => synthetic_text(cfg.train.corpus_bytes, cfg.seed),
    };
    Ok(Corpus::from_bytes(&bytes, cfg.train.seq_len + 1)?)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn run_header(command: &str, precision: Precision, deterministic: bool) -> String {
    format!(
        "command = \"{command}\"\nprecision = {}\ndeterministic = {deterministic}\n",
        match precision {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    )
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(a.config.as_deref(), a.preset.as_deref())?;
    if let Some(seed) = a.common.seed {
        cfg.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    cfg.validate()?;
    let precision: Precision = a.common.precision.into();
    let out = &a.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    write_file(&out.join("run.toml"), &run_header("train", precision, a.common.deterministic))?;
    let corpus = load_corpus(a.corpus.as_deref(), &cfg)?;
    println!(
        "training {} ({:?}) for {} steps on {} tokens",
        if cfg.name.is_empty() { "model" } else { &cfg.name },
        cfg.model.variant,
        cfg.train.steps,
        corpus.train_len()
    );

    let metrics_path = out.join("metrics.csv");
    let every = cfg.train.checkpoint_every;
    let mut rows: Vec<StepMetrics> = Vec::new();
    let result = lm::train(&cfg, &corpus, precision, |row, trainer| {
        rows.push(row.clone());
        if let Some(v) = row.val_loss {
            println!(
                "step {:>6}  loss {:.4}  aux {:.2e}  val {:.4}  lr {:.2e}",
                row.step, row.lm_loss, row.aux_loss, v, row.lr
            );
            flush_metrics(&metrics_path, &rows).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        if every > 0 && (row.step + 1) % every == 0 {
            checkpoint::save(&out.join(format!("step-{}.ckpt", row.step + 1)), &trainer.model, row.step + 1)?;
        }
        Ok(())
    });
    flush_metrics(&metrics_path, &rows)?;
    match result {
        Ok((trainer, _)) => {
            checkpoint::save(&out.join("final.ckpt"), &trainer.model, trainer.step)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            eprintln!("metrics up to the failure are in {}", metrics_path.display());
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e.into()),
    }
}

fn flush_metrics(path: &Path, rows: &[StepMetrics]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let (model, step) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = load_corpus(a.corpus.as_deref(), &model.cfg)?;
    let ppl = perplexity(&model, &corpus, a.precision.into())?;
    println!("step {step}  held-out tokens {}  perplexity {ppl:.4}  bits/byte {:.4}", corpus.valid_len(), ppl.log2());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> anyhow::Result<ExitCode> {
    let precision: Precision = a.common.precision.into();
    let opts = VerifyOptions {
        precision,
        seed: a.common.seed.unwrap_or(0),
        fault: a.inject_fault.map(|f| match f {
            FaultArg::Gelu => Fault::gelu_backward(),
        }),
    };
    let names: Vec<String> = if a.suite.is_empty() {
        SUITES.iter().map(|s| s.to_string()).collect()
    } else {
        a.suite.clone()
    };
    for n in &names {
        if !SUITES.contains(&n.as_str()) {
            return Err(usage(format!("unknown suite `{n}`; known: {}", SUITES.join(", "))));
        }
    }
    let results = names.iter().map(|n| run_suite(n, &opts)).collect::<Result<Vec<_>, _>>()?;
    let table = render_table(&results);
    print!("{table}");
    fs::create_dir_all(&a.common.out)?;
    write_file(&a.common.out.join("verify.txt"), &table)?;
    write_file(&a.common.out.join("run.toml"), &run_header("verify", precision, a.common.deterministic))?;
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Parses `NAME=lo..hi` with numbers such as `1e6`.
fn parse_range(spec: &str, name: &str) -> anyhow::Result<(u64, u64)> {
    let (key, range) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("expected {name}=lo..hi, got `{spec}`")))?;
    if !key.eq_ignore_ascii_case(name) {
        return Err(usage(format!("expected {name}=lo..hi, got `{spec}`")));
    }
    let (lo, hi) = range
        .split_once("..")
        .ok_or_else(|| usage(format!("expected {name}=lo..hi, got `{spec}`")))?;
    let num = |s: &str| -> anyhow::Result<u64> {
        let v: f64 = s.trim().parse().map_err(|_| usage(format!("`{s}` is not a number")))?;
        if !(v >= 1.0 && v.fract() == 0.0 && v < 1e18) {
            return Err(usage(format!("`{s}` must be a positive integer")));
        }
        Ok(v as u64)
    };
    let (lo, hi) = (num(lo)?, num(hi)?);
    if hi < lo {
        return Err(usage(format!("empty range in `{spec}`")));
    }
    Ok((lo, hi))
}

fn cmd_cost(a: CostArgs) -> anyhow::Result<ExitCode> {
    let mut scenario = match (&a.config, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str::<CostScenario>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        (None, Some(name)) => cost_preset(name)?,
        (None, None) => CostScenario::analog_1p6b(),
    };
    if a.full_expert_params {
        scenario.compact_experts = false;
    }
    scenario.validate()?;
    fs::create_dir_all(&a.out)?;

    if a.sweep.is_none() && a.partition.is_none() {
        bail!(usage("pass --sweep B=lo..hi [log] and/or --partition P=lo..hi v_dim=lo..hi"));
    }
    if let Some(spec) = &a.sweep {
        let log = match spec.get(1).map(String::as_str) {
            None | Some("linear") => false,
            Some("log") => true,
            Some(other) => return Err(usage(format!("sweep scale must be `log` or `linear`, got `{other}`"))),
        };
        let (lo, hi) = parse_range(&spec[0], "B")?;
        let batches = sweep_points(lo, hi, log)?;
        let path = a.out.join("access.csv");
        write_file(&path, &access_csv(&scenario, &batches))?;
        let c = crossover_batch(&scenario);
        let report = format!(
            "{}crossover_batch = \"{c}\"\nlinear_scan_agrees = {}\nreference_parity_batch = 131072\n",
            toml::to_string(&scenario)?,
            c == crossover_linear_scan(&scenario),
        );
        write_file(&a.out.join("crossover.toml"), &report)?;
        println!("wrote {} ({} rows)", path.display(), batches.len());
        match c {
            Crossover::At(b) => println!("model-total access parity at batch {b} (reference figure 131072)"),
            Crossover::Never => println!("memory-layer access never reaches MoE access"),
        }
    }
    if let Some(spec) = &a.partition {
        let mut devices = (2, 64);
        let mut v_dims = (8, 1024);
        for s in spec {
            match s.split_once('=').map(|(k, _)| k.to_ascii_lowercase()) {
                Some(k) if k == "p" => devices = parse_range(s, "P")?,
                Some(k) if k == "v_dim" => v_dims = parse_range(s, "v_dim")?,
                _ => return Err(usage(format!("expected P=lo..hi or v_dim=lo..hi, got `{s}`"))),
            }
        }
        if devices.0 < 2 {
            return Err(usage("partitioning needs at least 2 devices"));
        }
        if a.topm == 0 || a.bs == 0 {
            return Err(usage("--topm and --bs must be positive"));
        }
        let path = a.out.join("partition.csv");
        let csv = boundary_csv(a.topm, a.bs, &pow2_range(devices.0, devices.1)?, &pow2_range(v_dims.0, v_dims.1)?);
        write_file(&path, &csv)?;
        println!("wrote {} ({} rows)", path.display(), csv.lines().count() - 1);
    }
    Ok(ExitCode::SUCCESS)
}
