mod manifest;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use weightsym::metanet::{threshold_indices, write_history_csv, write_metrics_csv, Metanet, MetanetConfig, MetricsRow};
use weightsym::netmodels::sha256_hex;
use weightsym::propverify::{all_pass, format_reports, run_suite, suite_names, write_reports_csv, SuiteConfig};
use weightsym::zoogen::{
    augment_zoo, gen_mha_zoo, gen_mlp_zoo, Augmentation, MhaZooSpec, MlpZooSpec, Split, Task, Zoo,
};
use weightsym::NetParams;

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "weightsym", version, about = "Model zoos, invariant metanetworks and symmetry checks")]
struct Cli {
    /// Worker threads for parallel work (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or augment a model zoo.
    #[command(subcommand)]
    Zoo(ZooCommand),
    /// Train a metanetwork on a zoo's train split.
    Train(TrainArgs),
    /// Score a trained metanetwork on a zoo split.
    Eval(EvalArgs),
    /// Run the symmetry property suite.
    Verify(VerifyArgs),
    /// Summarize run directories into tables and plots.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "WEIGHTSYM_OUT")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum ZooCommand {
    Gen(GenArgs),
    Augment(AugmentArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    /// 2d-two-class, 1d-regression, sequence-majority or sum-sign.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on sampled training epochs per entry.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[command(flatten)]
    #[serde(skip)]
    out: OutDir,
}

#[derive(Args, Debug, Serialize)]
struct AugmentArgs {
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long, default_value_t = 2)]
    factor: usize,
    /// Diagonal scales drawn from [1, 10^i].
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4), conflicts_with = "gl_spread")]
    scale_exp: Option<u32>,
    #[arg(long)]
    permute: bool,
    /// Entry range of the GL factors, for attention zoos.
    #[arg(long)]
    gl_spread: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    out: OutDir,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    zoo: PathBuf,
    /// Metanetwork config as JSON; defaults to the desk-scale config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// One or more seeds; several seeds train in parallel into `seed-<s>`.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    quasi: OnOff,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    zoo: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Keep only entries whose label is at least this value.
    #[arg(long)]
    threshold: Option<f64>,
    /// Score original entries only, ignoring augmented copies.
    #[arg(long)]
    originals_only: bool,
    /// Name written to the split column; defaults to the split name.
    #[arg(long)]
    label: Option<String>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated property names; all by default.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
    /// Print the property names and exit.
    #[arg(long)]
    list: bool,
    /// Directory for reports.csv.
    #[arg(long, env = "WEIGHTSYM_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories produced by `train` and `eval`.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[command(flatten)]
    out: OutDir,
}

/// Errors caused by bad input rather than a failed computation.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Wraps input-side library errors as usage errors.
fn input<T>(r: weightsym::Result<T>, what: &dyn std::fmt::Display) -> Result<T> {
    use weightsym::Error as E;
    r.map_err(|e| match e {
        E::InvalidArgument(_) | E::Architecture(_) | E::Malformed(_) | E::Version { .. } | E::Io(_) => {
            usage(format!("{what}: {e}"))
        }
        other => anyhow!(other).context(what.to_string()),
    })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn config_hash<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("arguments serialize").as_bytes())
}

fn write_zoo(zoo: &Zoo, dir: &Path) -> Result<()> {
    zoo.save(&dir.join("zoo.json"))?;
    zoo.write_manifest(std::fs::File::create(dir.join("manifest.csv"))?)?;
    Ok(())
}

fn zoo_outputs(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join("zoo.json"), dir.join("manifest.csv")]
}

fn cmd_zoo_gen(args: &GenArgs) -> Result<()> {
    let task = input(Task::parse(&args.task), &"--task")?;
    let dir = &args.out.out;
    prepare_dir(dir)?;
    let run = RunManifest::start(&dir.join("zoo.run.json"), config_hash(args), Some(args.seed), zoo_outputs(dir))?;
    let zoo = if task.is_sequence() {
        let mut spec = input(MhaZooSpec::new(task), &"--task")?;
        if let Some(e) = args.max_epochs {
            spec.ranges.epochs.1 = e.max(spec.ranges.epochs.0);
        }
        input(gen_mha_zoo(args.n, &spec, args.seed), &"zoo generation")?
    } else {
        let mut spec = input(MlpZooSpec::new(task), &"--task")?;
        if let Some(e) = args.max_epochs {
            spec.ranges.epochs.1 = e.max(spec.ranges.epochs.0);
        }
        input(gen_mlp_zoo(args.n, &spec, args.seed), &"zoo generation")?
    };
    write_zoo(&zoo, dir)?;
    println!("{} entries ({}) -> {}", zoo.len(), task.name(), dir.join("zoo.json").display());
    run.finish()
}

fn load_zoo(path: &Path) -> Result<Zoo> {
    input(Zoo::load(path), &path.display())
}

fn cmd_zoo_augment(args: &AugmentArgs) -> Result<()> {
    let aug = match (args.scale_exp, args.gl_spread) {
        (Some(scale_exp), None) => Augmentation::Monomial { scale_exp, permute: args.permute },
        (None, Some(spread)) => Augmentation::Gl { spread },
        _ => return Err(usage("give exactly one of --scale-exp or --gl-spread")),
    };
    let zoo = load_zoo(&args.zoo)?;
    let dir = &args.out.out;
    prepare_dir(dir)?;
    let run = RunManifest::start(&dir.join("zoo.run.json"), config_hash(args), Some(args.seed), zoo_outputs(dir))?;
    let out = match augment_zoo(&zoo, args.factor, aug, args.seed) {
        Err(weightsym::Error::Certification(m)) => bail!("augmentation failed certification: {m}"),
        r => input(r, &"augmentation")?,
    };
    write_zoo(&out, dir)?;
    println!("{} -> {} entries in {}", zoo.len(), out.len(), dir.join("zoo.json").display());
    run.finish()
}

fn load_config(path: Option<&Path>) -> Result<MetanetConfig> {
    let Some(path) = path else {
        return Ok(MetanetConfig::desk());
    };
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn metrics_row(
    model: &Metanet,
    seed: u64,
    split: &str,
    params: &[&NetParams],
    labels: &[f64],
) -> Result<Option<MetricsRow>> {
    if params.len() < 2 {
        return Ok(None);
    }
    let m = model.evaluate(params, labels)?;
    Ok(Some(MetricsRow { seed, split: split.into(), tau: m.tau, loss: m.loss, n: m.n }))
}

fn train_one(zoo: &Zoo, mut config: MetanetConfig, seed: u64, dir: &Path) -> Result<Vec<MetricsRow>> {
    prepare_dir(dir)?;
    config.seed = seed;
    let outputs = ["model.json", "metrics.csv", "history.csv"].map(|f| dir.join(f)).to_vec();
    let run = RunManifest::start(&dir.join("train.run.json"), config.hash(), Some(seed), outputs)?;
    let signature = zoo.entries.first().ok_or_else(|| usage("zoo is empty"))?.params.signature();
    let mut model = input(Metanet::build(config, signature), &"metanetwork config")?;
    let (train_x, train_y) = zoo.split(Split::Train, false);
    if train_x.is_empty() {
        return Err(usage("zoo has no training entries"));
    }
    model.train(&train_x, &train_y)?;

    let mut rows = Vec::new();
    let augmented = zoo.entries.iter().any(|e| !e.provenance.is_original());
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
        let (x, y) = zoo.split(split, true);
        rows.extend(metrics_row(&model, seed, name, &x, &y)?);
    }
    if augmented {
        let (x, y) = zoo.split(Split::Test, false);
        rows.extend(metrics_row(&model, seed, "test-all", &x, &y)?);
    }
    model.save(&dir.join("model.json"))?;
    write_metrics_csv(&rows, std::fs::File::create(dir.join("metrics.csv"))?)?;
    write_history_csv(&model.history, std::fs::File::create(dir.join("history.csv"))?)?;
    run.finish()?;
    Ok(rows)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let zoo = load_zoo(&args.zoo)?;
    let mut config = load_config(args.config.as_deref())?;
    config.quasi = args.quasi == OnOff::On;
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    config.arch = zoo.entries.first().ok_or_else(|| usage("zoo is empty"))?.params.arch();
    let dir = &args.out.out;
    let dirs: Vec<(u64, PathBuf)> = if args.seed.len() == 1 {
        vec![(args.seed[0], dir.clone())]
    } else {
        args.seed.iter().map(|&s| (s, dir.join(format!("seed-{s}")))).collect()
    };
    let results: Vec<Result<Vec<MetricsRow>>> =
        dirs.par_iter().map(|(seed, d)| train_one(&zoo, config.clone(), *seed, d)).collect();
    for ((_, d), r) in dirs.iter().zip(results) {
        for row in r? {
            println!(
                "{}  seed {} {:<8} tau {:+.4} loss {:.4} (n={})",
                d.display(),
                row.seed,
                row.split,
                row.tau,
                row.loss,
                row.n
            );
        }
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if let Some(t) = args.threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("--threshold {t} outside [0, 1]")));
        }
    }
    let model = input(Metanet::load(&args.model), &args.model.display())?;
    let zoo = load_zoo(&args.zoo)?;
    let split: Split = args.split.into();
    let name = args.label.clone().unwrap_or_else(|| split.name().to_string());
    let dir = &args.out.out;
    prepare_dir(dir)?;
    let file = dir.join(format!("eval-{name}.csv"));
    let hash = config_hash(&(model.config().hash(), zoo.content_hash(), &name, args.threshold, args.originals_only));
    let run = RunManifest::start(
        &dir.join(format!("eval-{name}.run.json")),
        hash,
        Some(model.config().seed),
        vec![file.clone()],
    )?;

    let (mut x, mut y) = zoo.split(split, args.originals_only);
    if let Some(t) = args.threshold {
        let keep = threshold_indices(&y, t);
        x = keep.iter().map(|&i| x[i]).collect();
        y = keep.iter().map(|&i| y[i]).collect();
    }
    if x.len() < 2 {
        return Err(usage(format!("only {} entries left to score", x.len())));
    }
    let m = input(model.evaluate(&x, &y), &"evaluation")?;
    let row = MetricsRow { seed: model.config().seed, split: name, tau: m.tau, loss: m.loss, n: m.n };
    write_metrics_csv(std::slice::from_ref(&row), std::fs::File::create(&file)?)?;
    println!("{} tau {:+.4} loss {:.4} (n={})", row.split, row.tau, row.loss, row.n);
    run.finish()
}

/// Exit status of `verify`: `Ok(false)` when a property failed.
fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    if args.list {
        for n in suite_names() {
            println!("{n}");
        }
        return Ok(true);
    }
    let cfg = SuiteConfig { samples: args.samples, seed: args.seed, ..SuiteConfig::default() };
    let only: Vec<&str> = args.only.iter().map(String::as_str).collect();
    let run = match &args.out {
        Some(dir) => {
            prepare_dir(dir)?;
            let hash = config_hash(&(args.samples, args.seed, &args.only));
            Some(RunManifest::start(
                &dir.join("verify.run.json"),
                hash,
                Some(args.seed),
                vec![dir.join("reports.csv")],
            )?)
        }
        None => None,
    };
    let reports = input(run_suite(&cfg, &only), &"verify")?;
    print!("{}", format_reports(&reports));
    if let (Some(dir), Some(run)) = (&args.out, run) {
        write_reports_csv(&reports, std::fs::File::create(dir.join("reports.csv"))?)?;
        run.finish()?;
    }
    let ok = all_pass(&reports);
    println!("{}", if ok { "all properties hold" } else { "property check FAILED" });
    Ok(ok)
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for d in &args.runs {
        if !d.is_dir() {
            return Err(usage(format!("{} is not a directory", d.display())));
        }
        runs.push(report::load_run(d)?);
    }
    if runs.iter().all(|r| r.rows.is_empty()) {
        return Err(usage("no metrics found in the given runs"));
    }
    let dir = &args.out.out;
    prepare_dir(dir)?;
    let outputs = ["summary.csv", "loss_curves.svg", "tau_by_split.svg"].map(|f| dir.join(f)).to_vec();
    let paths: Vec<String> = args.runs.iter().map(|p| p.display().to_string()).collect();
    let run = RunManifest::start(&dir.join("report.run.json"), config_hash(&paths), None, outputs)?;
    let summary = report::summarize(&runs);
    report::write_summary_csv(&summary, &dir.join("summary.csv"))?;
    std::fs::write(dir.join("loss_curves.svg"), report::loss_curves_svg(&runs))?;
    std::fs::write(dir.join("tau_by_split.svg"), report::tau_by_split_svg(&runs, &summary))?;
    print!("{}", report::format_summary(&summary));
    run.finish()
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    match &cli.command {
        Command::Zoo(ZooCommand::Gen(a)) => cmd_zoo_gen(a)?,
        Command::Zoo(ZooCommand::Augment(a)) => cmd_zoo_augment(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Verify(a) => return cmd_verify(a),
        Command::Report(a) => cmd_report(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
