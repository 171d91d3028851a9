//! `driftbench` command line. [`run`] parses arguments, dispatches and maps
//! outcomes to exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use driftbench_core::adapt::{adapt, fit_vae, ModelBundle, StrategyKind};
use driftbench_core::corpus::{synth_drift_generate, DriftConfig, SLICE_NAMES};
use driftbench_core::harness::{
    ablate_freshness, ablate_label_quality, ablate_scale, export_diagnostics, prepare, run_timeline_eval,
    slice_index, ExperimentConfig,
};
use driftbench_core::vae::{top_words_per_topic, TopicWords};
use driftbench_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "driftbench", version, about = "Time-adaptive text classification workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Drift rate of the synthetic corpus.
    #[arg(long)]
    drift: Option<f64>,
    /// Config override, `dotted.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic drifting corpus as JSONL.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Split the configured corpus and write each partition as JSONL.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train the BASE classifier on t0 and save a model bundle.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Adapt with one strategy for one test slice and save a model bundle.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_strategy)]
        strategy: StrategyKind,
        /// Test slice whose regime selects the trans-data.
        #[arg(long, default_value = "t4")]
        slice: String,
    },
    /// Timeline evaluation over all strategies, seeds and slices.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Run ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        kind: AblationKind,
    },
    /// Fit the topic model on t0-train plus t1..t3 and export its topic words.
    Topics {
        #[command(flatten)]
        common: Common,
        /// Words per topic.
        #[arg(long, default_value_t = 10)]
        words: usize,
    },
    /// Export overlap, per-period topics and attention matrices for a bundle.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Post ids whose attention is exported; repeatable.
        #[arg(long = "attention")]
        attention: Vec<String>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum AblationKind {
    Scale,
    LabelQuality,
    Freshness,
    All,
}

fn parse_strategy(s: &str) -> std::result::Result<StrategyKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Entry point; `argv[0]` is the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn missing(flag: &str) -> Failure {
    Failure::Usage(format!("the following required argument was not provided: --{flag}"))
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| missing(flag))
}

fn parse_overrides(set: &[String]) -> CliResult<Vec<(String, String)>> {
    set.iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .filter(|(k, _)| !k.is_empty())
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))
        })
        .collect()
}

/// Loads the config (or defaults when `required` is false and none is
/// given), then applies `--set`, `--seed`, `--drift` and `--out`.
fn load_config(common: &Common, required: bool) -> CliResult<ExperimentConfig> {
    let overrides = parse_overrides(&common.set)?;
    let base = match (&common.config, required) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, true) => return Err(missing("config")),
        (None, false) => ExperimentConfig::default(),
    };
    let mut cfg = base.apply_overrides(&overrides)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(drift) = common.drift {
        if cfg.corpus.path.is_some() {
            return Err(Failure::Usage("--drift applies to synthetic corpora only".into()));
        }
        cfg.corpus.synthetic.get_or_insert_with(DriftConfig::default).drift_rate = drift;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    require(&common.out, "out").map(PathBuf::as_path)
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    driftbench_core::io::write_atomic(path, text.as_bytes())
}

fn dispatch(command: Command) -> CliResult<String> {
    match command {
        Command::Generate { common } => {
            let out = require(&common.out, "out")?.clone();
            let mut drift = match &common.config {
                Some(_) => load_config(&common, false)?.corpus.synthetic.unwrap_or_default(),
                None => DriftConfig::default(),
            };
            if let Some(d) = common.drift {
                drift.drift_rate = d;
            }
            let seed = common.seed.unwrap_or(0);
            let s = synth_drift_generate(seed, &drift)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                mkdir(dir)?;
            }
            s.corpus.write_jsonl(&out)?;
            Ok(format!(
                "generated {} posts (seed {seed}, drift {}) -> {}",
                s.corpus.len(),
                drift.drift_rate,
                out.display()
            ))
        }
        Command::Split { common } => {
            let cfg = load_config(&common, true)?;
            let out = out_dir(&common)?;
            let seed = cfg.seeds[0];
            let data = prepare(&cfg, seed)?;
            mkdir(out)?;
            let mut sizes = Vec::new();
            for (name, part) in data.slices.partitions() {
                part.write_jsonl(&out.join(format!("{name}.jsonl")))?;
                sizes.push(format!("{name}={}", part.len()));
            }
            Ok(format!("split (seed {seed}): {} -> {}", sizes.join(" "), out.display()))
        }
        Command::Train { common } => adapt_command(&common, StrategyKind::Base, "t0"),
        Command::Adapt { common, strategy, slice } => adapt_command(&common, strategy, &slice),
        Command::Eval { common } => {
            let cfg = load_config(&common, true)?;
            let out = out_dir(&common)?;
            let report = run_timeline_eval(&cfg)?;
            mkdir(out)?;
            report.write(out, "metrics")?;
            Ok(format!(
                "eval: {} cells, config {} -> {}",
                report.cells.len(),
                report.meta.config_hash,
                out.display()
            ))
        }
        Command::Ablate { common, kind } => {
            let cfg = load_config(&common, true)?;
            let out = out_dir(&common)?;
            mkdir(out)?;
            let mut done = Vec::new();
            if matches!(kind, AblationKind::Scale | AblationKind::All) {
                ablate_scale(&cfg, &cfg.ablation.fractions)?.write(out, "scale")?;
                done.push("scale");
            }
            if matches!(kind, AblationKind::LabelQuality | AblationKind::All) {
                match ablate_label_quality(&cfg) {
                    Ok(r) => {
                        r.write(out, "label_quality")?;
                        done.push("label_quality");
                    }
                    Err(Error::Unsupported(m)) if kind == AblationKind::All => {
                        log::warn!("skipping label-quality ablation: {m}");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if matches!(kind, AblationKind::Freshness | AblationKind::All) {
                ablate_freshness(&cfg)?.write(out, "freshness")?;
                done.push("freshness");
            }
            Ok(format!("ablate: {} -> {}", done.join(", "), out.display()))
        }
        Command::Topics { common, words } => {
            let cfg = load_config(&common, true)?;
            let out = out_dir(&common)?;
            let seed = cfg.seeds[0];
            let data = prepare(&cfg, seed)?;
            let (vae, _) = fit_vae(&data.slices.t0_train, &data.t4_trans()?, &cfg.adapt, seed)?;
            let topics: Vec<TopicWords> = top_words_per_topic(&vae.model, &vae.vocab, words)?;
            mkdir(out)?;
            write_json(&out.join("topics.json"), &topics)?;
            Ok(format!("topics: {} topics x {words} words -> {}", topics.len(), out.display()))
        }
        Command::Diagnose {
            common,
            bundle,
            attention,
        } => {
            let mut cfg = load_config(&common, true)?;
            let out = out_dir(&common)?;
            cfg.diagnostics.attention_ids.extend(attention);
            let seed = cfg.seeds[0];
            let bundle = ModelBundle::load(&bundle)?;
            let data = prepare(&cfg, seed)?;
            let files = export_diagnostics(&bundle, &data.slices, out, &cfg.diagnostics, seed)?;
            Ok(format!(
                "diagnose: overlap, topics and {} attention matrices -> {}",
                files.attention.len(),
                out.display()
            ))
        }
    }
}

fn adapt_command(common: &Common, kind: StrategyKind, slice: &str) -> CliResult<String> {
    let cfg = load_config(common, true)?;
    let out = out_dir(common)?;
    let col = slice_index(slice).map_err(|e| Failure::Usage(e.to_string()))?;
    let seed = cfg.seeds[0];
    let data = prepare(&cfg, seed)?;
    let trans = if kind.uses_trans() {
        data.trans_for(col, cfg.regimes[col])?
    } else {
        data.slices.t0_train.empty_like()
    };
    let strategy = cfg.strategy_for(kind);
    let outcome = adapt(&data.slices, &trans, &strategy, &cfg.adapt, seed)?;
    let accuracy = outcome.classifier.accuracy(data.slices.test_slice(col))?;
    let bundle = ModelBundle::new(
        outcome.classifier,
        strategy,
        cfg.adapt.clone(),
        data.slices.t0_train.label_names.clone(),
    );
    bundle.save(out)?;
    Ok(format!(
        "{kind} (seed {seed}): {} pseudo labels, {} accuracy {:.4} -> {}",
        outcome.pseudo.len(),
        SLICE_NAMES[col],
        accuracy,
        out.display()
    ))
}
