//! `canon`: canonize models, compute attributions and run evaluation experiments.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canon_core::attribute::{attribute, BnRule, Method, MethodConfig};
use canon_core::bundle::{load_dataset, load_model, load_raw_tensor, model_checksum, save_dataset, save_model,
    save_tensor_with_sidecar};
use canon_core::canonize::{canonize_pass, verify_equivalence, DEFAULT_TOLERANCE};
use canon_core::evaluate::cosine_distance;
use canon_core::experiment::{run_experiment, CanonMode, ExperimentConfig};
use canon_core::toy::{make_toy_dataset, make_toy_localizer, toy_class_names};
use canon_core::{Error, ModelGraph, Tensor};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "canon", version, about = "BatchNorm canonization and attribution evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse BatchNorm layers into their producers and verify the result.
    Canonize(CanonizeArgs),
    /// Compute one attribution map and write it as raw f32 plus a JSON sidecar.
    Attribute(AttributeArgs),
    /// Print the cosine distance between two saved attribution maps.
    Compare(CompareArgs),
    /// Run the localization and perturbation experiment.
    Run(RunArgs),
    /// Write the toy localizer and a toy dataset to disk.
    Toy(ToyArgs),
}

#[derive(Args)]
struct CanonizeArgs {
    /// Input `.canonmodel` directory.
    #[arg(long)]
    model: PathBuf,
    /// Output `.canonmodel` directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttributeArgs {
    /// `.canonmodel` directory; the toy localizer when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// `.canondata` directory; a toy dataset when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample id (defaults to the first sample).
    #[arg(long)]
    sample: Option<String>,
    #[arg(long, default_value_t = 0)]
    toy_seed: u64,
    #[arg(long)]
    method: String,
    /// Class to explain (defaults to the sample label).
    #[arg(long)]
    target: Option<usize>,
    /// Explain the canonized model.
    #[arg(long)]
    canonize: bool,
    #[arg(long, default_value = "affine_epsilon")]
    bn_rule: String,
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    ig_steps: Option<usize>,
    /// Output `.f32` file; the sidecar goes next to it as `.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    map_a: PathBuf,
    map_b: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["toy_seed", "toy_n"])]
    data: Option<PathBuf>,
    #[arg(long)]
    toy_seed: Option<u64>,
    #[arg(long)]
    toy_n: Option<usize>,
    /// Comma-separated method names.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Perturbation steps per curve.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// both, on or off.
    #[arg(long)]
    canonized: Option<String>,
    #[arg(long)]
    bn_rule: Option<String>,
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    ig_steps: Option<usize>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    n: usize,
    /// Build the BN-free variant of the localizer.
    #[arg(long)]
    no_bn: bool,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    out_data: Option<PathBuf>,
}

/// Sidecar written next to every saved attribution map.
#[derive(Debug, Serialize, Deserialize)]
struct MapMeta {
    shape: Vec<usize>,
    method: String,
    target: usize,
    sample_id: String,
    canonized: bool,
    model_checksum: String,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::NoSuccessfulSamples { .. } | Error::ZeroNorm => EXIT_FAILED,
            _ => EXIT_IO,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {}", path.display(), e),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(Failure::from)
}

/// Writes a line to stdout, tolerating a closed pipe.
fn emit(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{}", line);
}

fn cmd_canonize(a: CanonizeArgs) -> Result<(), Failure> {
    let g = load_model(&a.model).map_err(|e| io_failure(&a.model, e))?;
    let c = canonize_pass(&g)?;
    eprintln!("{} fusions", c.fusions.len());
    for id in &c.unfused {
        eprintln!("left unfused: {}", id);
    }
    let report = verify_equivalence(&g, &c.graph, a.trials, a.tolerance, a.seed)?;
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
    if !report.passed {
        return Err(Failure {
            code: EXIT_FAILED,
            message: format!(
                "equivalence check failed: max_abs_diff {} > {}",
                report.max_abs_diff, report.tolerance
            ),
        });
    }
    save_model(&c.graph, &a.out).map_err(|e| io_failure(&a.out, e))?;
    Ok(())
}

fn method_config(name: &str, bn_rule: BnRule, epsilon: Option<f32>, ig_steps: Option<usize>) -> Result<MethodConfig, Failure> {
    let mut cfg = MethodConfig::new(parse::<Method>(name)?).with_bn_rule(bn_rule);
    if let Some(e) = epsilon {
        cfg = cfg.with_epsilon(e);
    }
    if let Some(s) = ig_steps {
        cfg = cfg.with_ig_steps(s);
    }
    Ok(cfg)
}

fn load_graph(path: Option<&Path>, toy_seed: u64) -> Result<ModelGraph, Failure> {
    match path {
        Some(p) => load_model(p).map_err(|e| io_failure(p, e)),
        None => Ok(make_toy_localizer(toy_seed, true)),
    }
}

fn cmd_attribute(a: AttributeArgs) -> Result<(), Failure> {
    let cfg = method_config(&a.method, parse(&a.bn_rule)?, a.epsilon, a.ig_steps)?;
    let mut g = load_graph(a.model.as_deref(), a.toy_seed)?;
    if a.canonize {
        g = canonize_pass(&g)?.graph;
    }
    let samples = match &a.data {
        Some(p) => load_dataset(p).map_err(|e| io_failure(p, e))?,
        None => make_toy_dataset(a.toy_seed, 1),
    };
    let sample = match &a.sample {
        Some(id) => samples
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| usage(format!("no sample `{}`", id)))?,
        None => samples.first().ok_or_else(|| usage("dataset is empty"))?,
    };
    let target = a.target.unwrap_or(sample.label);
    let map = attribute(&g, &sample.image, target, &cfg)?;
    let meta = MapMeta {
        shape: map.values.shape().to_vec(),
        method: cfg.method.to_string(),
        target,
        sample_id: sample.id.clone(),
        canonized: a.canonize,
        model_checksum: model_checksum(&g),
    };
    save_tensor_with_sidecar(&map.values, &a.out, &meta).map_err(|e| io_failure(&a.out, e))?;
    info!("wrote {} for sample {}", a.out.display(), sample.id);
    Ok(())
}

fn load_map(path: &Path) -> Result<Tensor, Failure> {
    let side = path.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|e| io_failure(&side, e))?;
    let meta: MapMeta = serde_json::from_str(&text).map_err(|e| io_failure(&side, e))?;
    load_raw_tensor(path, &meta.shape).map_err(|e| io_failure(path, e))
}

fn cmd_compare(a: CompareArgs) -> Result<(), Failure> {
    let (x, y) = (load_map(&a.map_a)?, load_map(&a.map_b)?);
    emit(&cosine_distance(&x, &y)?.to_string());
    Ok(())
}

fn experiment_config(a: RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            serde_json::from_str(&text).map_err(|e| io_failure(p, e))?
        }
        None => ExperimentConfig::default(),
    };
    if a.model.is_some() {
        cfg.model_path = a.model;
    }
    if a.data.is_some() {
        cfg.dataset_path = a.data;
    }
    if let Some(s) = a.toy_seed {
        cfg.toy_seed = s;
        cfg.dataset_path = None;
    }
    if let Some(n) = a.toy_n {
        cfg.toy_n = n;
        cfg.dataset_path = None;
    }
    if let Some(r) = &a.bn_rule {
        cfg.bn_rule = Some(parse(r)?);
    }
    if let Some(names) = &a.methods {
        cfg.methods = names
            .iter()
            .map(|n| method_config(n.trim(), BnRule::default(), None, None))
            .collect::<Result<_, _>>()?;
    }
    for m in &mut cfg.methods {
        if let Some(e) = a.epsilon {
            m.epsilon = e;
        }
        if let Some(s) = a.ig_steps {
            m.ig_steps = s;
        }
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(c) = &a.canonized {
        cfg.canonized = parse::<CanonMode>(c)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let cfg = experiment_config(a)?;
    let summary = run_experiment(&cfg)?;
    eprintln!(
        "{} samples evaluated, {} skipped; results in {}",
        summary.samples_ok,
        summary.samples_failed,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_toy(a: ToyArgs) -> Result<(), Failure> {
    if a.out_model.is_none() && a.out_data.is_none() {
        return Err(usage("nothing to write: pass --out-model and/or --out-data"));
    }
    if let Some(p) = &a.out_model {
        save_model(&make_toy_localizer(a.seed, !a.no_bn), p).map_err(|e| io_failure(p, e))?;
    }
    if let Some(p) = &a.out_data {
        save_dataset(&make_toy_dataset(a.seed, a.n), &toy_class_names(), p).map_err(|e| io_failure(p, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Canonize(a) => cmd_canonize(a),
        Command::Attribute(a) => cmd_attribute(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Run(a) => cmd_run(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
