//! `stochact` command line: `gen-demos`, `train`, `eval` and `probe`.
//!
//! Every command reads a flat config (`--config`), applies `key=value`
//! overrides on top, and writes its artifact to `--out`. [`run_command`]
//! returns the process exit status; failures print one diagnostic line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use stochact_core::expert::{generate_dataset, read_dataset, write_dataset};
use stochact_core::heads::{read_model, write_model};
use stochact_core::train::{
    collect_probes, evaluate, mode_coverage, probe_distribution, probes_from_dataset, train, EvalConfig,
};
use stochact_core::{
    parse_config, Config, ConfigValue, Dataset, EnvConfig, Error, ExpertConfig, PolicyModel, ProbeSpec, RngStream,
    TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_PARSE: i32 = 5;
pub const EXIT_COMPATIBILITY: i32 = 6;
pub const EXIT_DIVERGED: i32 = 7;
pub const EXIT_GENERATION: i32 = 8;

/// Episodes rolled out to build probe references when no dataset is given.
pub const DEFAULT_PROBE_EPISODES: usize = 200;
/// Seed for those rollouts; fixed so references do not move with `--seed`.
pub const PROBE_SEED: u64 = 1_000_000;

pub const PROBE_HEADER: [&str; 6] = ["probe", "action", "empirical", "reference", "tv", "coverage"];

#[derive(Parser, Debug)]
#[command(name = "stochact", version, about = "Multimodal imitation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert demonstrations.
    GenDemos(Common),
    /// Fit a policy head to a dataset; writes a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file.
        #[arg(long)]
        data: PathBuf,
        /// Training log CSV (default `<out>.log.csv`).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Roll out a checkpoint and report success and probe metrics.
    Eval(ModelArgs),
    /// Per-probe empirical action distributions of a checkpoint.
    Probe(ModelArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; CSV commands print to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `key=value` overrides, applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset whose probe-tagged steps supply the references; otherwise
    /// expert rollouts do.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    MissingConfig(PathBuf),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn status(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::MissingConfig(_) => EXIT_CONFIG,
            Failure::Core(e) => match e {
                Error::Config(_) | Error::UnknownKeys(_) => EXIT_CONFIG,
                Error::Io { .. } => EXIT_IO,
                Error::Parse { .. } => EXIT_PARSE,
                Error::Compatibility { .. } => EXIT_COMPATIBILITY,
                Error::TrainingDiverged { .. } => EXIT_DIVERGED,
                Error::Generation { .. } => EXIT_GENERATION,
                _ => EXIT_OTHER,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::MissingConfig(p) => format!("config file not found: {}", p.display()),
            Failure::Core(e) => e.to_string(),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Runs one command; `argv[0]` is the program name.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("usage error"));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("stochact: {}", f.message());
            f.status()
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::GenDemos(common) => gen_demos(&common),
        Command::Train { common, data, log } => train_command(&common, &data, log),
        Command::Eval(args) => eval_command(&args),
        Command::Probe(args) => probe_command(&args),
    }
}

/// File entries first, then overrides, then `--seed`.
fn load_config(common: &Common) -> Outcome<Config> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Failure::MissingConfig(path.clone()),
                _ => Failure::Core(Error::Io {
                    path: path.clone(),
                    source: e,
                }),
            })?;
            parse_config(&text)?
        }
        None => Config::new(),
    };
    for o in &common.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Failure::Usage(format!("seed {seed} is out of range")))?;
        config.set("seed", ConfigValue::Int(seed))?;
    }
    Ok(config)
}

fn seed_of(config: &Config) -> Outcome<u64> {
    Ok(config.count("seed")?.unwrap_or(0) as u64)
}

fn required_out(common: &Common) -> Outcome<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out <path> is required".into()))
}

fn write_text(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn gen_demos(common: &Common) -> Outcome {
    let out = required_out(common)?;
    let config = load_config(common)?;
    let env = EnvConfig::from_config(&config)?;
    let expert = ExpertConfig::from_config(&config)?;
    let default_demos = if env.task.is_car() { 10 } else { 15 };
    let demos = config.count("demos")?.unwrap_or(default_demos);
    let dataset = generate_dataset(&env, &expert, demos, seed_of(&config)?)?;
    write_dataset(&dataset, out)?;
    Ok(())
}

fn train_command(common: &Common, data: &Path, log: Option<PathBuf>) -> Outcome {
    let out = required_out(common)?;
    let config = load_config(common)?;
    let cfg = TrainConfig::from_config(&config)?;
    let dataset = read_dataset(data)?;
    // without a task the dataset vouches for its own environment
    let expected = match config.get("task") {
        Some(_) => EnvConfig::from_config(&config)?.fingerprint(),
        None => dataset.fingerprint.clone(),
    };
    let (model, training_log) = train(&dataset, &expected, &cfg)?;
    write_model(&model, out)?;
    let log = log.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".log.csv");
        PathBuf::from(name)
    });
    write_text(Some(&log), &training_log.to_csv())
}

struct Loaded {
    config: Config,
    env: EnvConfig,
    model: PolicyModel,
    probes: Vec<ProbeSpec>,
}

fn load_model_and_probes(args: &ModelArgs) -> Outcome<Loaded> {
    let config = load_config(&args.common)?;
    let env = EnvConfig::from_config(&config)?;
    let model = read_model(&args.model)?;
    let fingerprint = env.fingerprint();
    if model.spec.fingerprint != fingerprint {
        return Err(Error::Compatibility {
            expected: fingerprint,
            found: model.spec.fingerprint.clone(),
        }
        .into());
    }
    let probes = match &args.data {
        Some(path) => {
            let dataset: Dataset = read_dataset(path)?;
            dataset.check_fingerprint(&fingerprint)?;
            probes_from_dataset(&dataset)?
        }
        None => {
            let episodes = config.count("probe.episodes")?.unwrap_or(DEFAULT_PROBE_EPISODES);
            collect_probes(&env, &ExpertConfig::from_config(&config)?, episodes, PROBE_SEED)?
        }
    };
    Ok(Loaded {
        config,
        env,
        model,
        probes,
    })
}

fn eval_command(args: &ModelArgs) -> Outcome {
    let l = load_model_and_probes(args)?;
    let cfg = EvalConfig::from_config(l.env.task, &l.config)?;
    let report = evaluate(&l.model, &l.env, &l.probes, &cfg)?;
    write_text(args.common.out.as_deref(), &report.to_csv())
}

fn probe_command(args: &ModelArgs) -> Outcome {
    let l = load_model_and_probes(args)?;
    let cfg = EvalConfig::from_config(l.env.task, &l.config)?;
    let space = l.env.action_space();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::Core(Error::Contract(e.to_string()));
    w.write_record(PROBE_HEADER).map_err(csv_err)?;
    let mut tvs = Vec::with_capacity(l.probes.len());
    for (j, probe) in l.probes.iter().enumerate() {
        let mut rng = RngStream::derive(cfg.seed, j as u64);
        let (empirical, tv) = probe_distribution(&l.model, probe, cfg.probe_samples, &mut rng)?;
        let coverage = if probe.min_mode_prob() > cfg.threshold {
            mode_coverage(&empirical, probe, cfg.threshold)?.to_string()
        } else {
            String::new()
        };
        for (k, action) in space.enumerate().iter().enumerate() {
            w.write_record([
                j.to_string(),
                space.label(action),
                empirical[k].to_string(),
                probe.reference[k].to_string(),
                tv.to_string(),
                coverage.clone(),
            ])
            .map_err(csv_err)?;
        }
        tvs.push(tv);
    }
    let bytes = w.into_inner().map_err(|e| Failure::Core(Error::Contract(e.to_string())))?;
    let text = String::from_utf8(bytes).map_err(|e| Failure::Core(Error::Contract(e.to_string())))?;
    write_text(args.common.out.as_deref(), &text)?;
    if !tvs.is_empty() {
        eprintln!(
            "{} probes, mean tv {:.4}",
            tvs.len(),
            tvs.iter().sum::<f64>() / tvs.len() as f64
        );
    }
    Ok(())
}
