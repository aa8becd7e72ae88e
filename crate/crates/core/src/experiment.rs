//! End-to-end evaluation runs producing `localization.csv`,
//! `perturbation.csv` and `summary.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{attribute, BnRule, MethodConfig};
use crate::bundle::{load_dataset, load_model};
use crate::canonize::canonize_pass;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate_localization, curve_difference, derive_seed, localization_score, perturbation_curve,
    LocalizationRecord, LocalizationSummary, PerturbationCurve,
};
use crate::ir::ModelGraph;
use crate::toy::{make_toy_dataset, make_toy_localizer};

pub const LOCALIZATION_CSV: &str = "localization.csv";
pub const PERTURBATION_CSV: &str = "perturbation.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonMode {
    #[default]
    Both,
    On,
    Off,
}

impl CanonMode {
    pub fn states(self) -> &'static [bool] {
        match self {
            CanonMode::Both => &[false, true],
            CanonMode::On => &[true],
            CanonMode::Off => &[false],
        }
    }
}

impl FromStr for CanonMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(CanonMode::Both),
            "on" => Ok(CanonMode::On),
            "off" => Ok(CanonMode::Off),
            other => Err(Error::InvalidArgument(format!("unknown canonized mode `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `.canonmodel` directory; the toy localizer when absent.
    pub model_path: Option<PathBuf>,
    /// `.canondata` directory; a toy dataset when absent.
    pub dataset_path: Option<PathBuf>,
    pub toy_seed: u64,
    pub toy_n: usize,
    pub methods: Vec<MethodConfig>,
    pub steps: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub canonized: CanonMode,
    /// Applied to every method, overriding per-method values.
    pub bn_rule: Option<BnRule>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model_path: None,
            dataset_path: None,
            toy_seed: 0,
            toy_n: 100,
            methods: Vec::new(),
            steps: 64,
            seed: 0,
            out_dir: PathBuf::from("out"),
            canonized: CanonMode::Both,
            bn_rule: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no attribution methods selected".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        Ok(())
    }

    fn method_configs(&self) -> Vec<MethodConfig> {
        self.methods
            .iter()
            .map(|m| match self.bn_rule {
                Some(r) => m.with_bn_rule(r),
                None => *m,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveDifferenceSummary {
    pub method: String,
    /// Mean of `plain - canon` at every step over samples.
    pub mean: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub samples_ok: usize,
    pub samples_failed: usize,
    pub steps: usize,
    pub seed: u64,
    pub fusions: usize,
    pub localization: Vec<LocalizationSummary>,
    pub curve_differences: Vec<CurveDifferenceSummary>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub localization: Vec<LocalizationRecord>,
    pub perturbation: Vec<(String, bool, PerturbationCurve)>,
    pub summary: Summary,
}

struct SampleResult {
    localization: Vec<LocalizationRecord>,
    curves: Vec<(String, bool, PerturbationCurve)>,
}

fn evaluate_sample(
    graphs: &[(bool, &ModelGraph)],
    methods: &[MethodConfig],
    sample: &Sample,
    steps: usize,
    seed: u64,
) -> Result<SampleResult> {
    let rng_seed = derive_seed(seed, &sample.id);
    let mut out = SampleResult {
        localization: Vec::new(),
        curves: Vec::new(),
    };
    for m in methods {
        for &(canonized, g) in graphs {
            let map = attribute(g, &sample.image, sample.label, m)?;
            out.localization
                .push(localization_score(&map, &sample.bboxes, &sample.id, canonized)?);
            let curve = perturbation_curve(g, &map, &sample.image, sample.label, steps, rng_seed, &sample.id)?;
            out.curves.push((m.method.name().to_string(), canonized, curve));
        }
    }
    Ok(out)
}

/// Runs every method on every sample, in parallel, with results ordered by sample id.
pub fn run_on(g: &ModelGraph, samples: &[Sample], cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let methods = cfg.method_configs();
    let canon = canonize_pass(g)?;
    info!("canonized model with {} fusions", canon.fusions.len());
    let graphs: Vec<(bool, &ModelGraph)> = cfg
        .canonized
        .states()
        .iter()
        .map(|&c| (c, if c { &canon.graph } else { g }))
        .collect();

    let mut order: Vec<&Sample> = samples.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let results: Vec<(&Sample, Result<SampleResult>)> = order
        .par_iter()
        .map(|s| (*s, evaluate_sample(&graphs, &methods, s, cfg.steps, cfg.seed)))
        .collect();

    let mut localization = Vec::new();
    let mut perturbation = Vec::new();
    let mut failed = 0;
    for (s, r) in results {
        match r {
            Ok(r) => {
                localization.extend(r.localization);
                perturbation.extend(r.curves);
            }
            Err(e) => {
                warn!("sample {} skipped: {}", s.id, e);
                failed += 1;
            }
        }
    }
    let ok = samples.len() - failed;
    if ok == 0 {
        return Err(Error::NoSuccessfulSamples { failed });
    }
    let summary = Summary {
        samples_ok: ok,
        samples_failed: failed,
        steps: cfg.steps,
        seed: cfg.seed,
        fusions: canon.fusions.len(),
        localization: aggregate_localization(&localization),
        curve_differences: summarize_curves(&perturbation)?,
    };
    Ok(ExperimentOutput {
        localization,
        perturbation,
        summary,
    })
}

/// Mean curve difference per method over samples that have both states.
pub fn summarize_curves(rows: &[(String, bool, PerturbationCurve)]) -> Result<Vec<CurveDifferenceSummary>> {
    let mut pairs: BTreeMap<(&str, &str), [Option<&PerturbationCurve>; 2]> = BTreeMap::new();
    for (method, canonized, curve) in rows {
        pairs.entry((method, &curve.sample_id)).or_default()[*canonized as usize] = Some(curve);
    }
    let mut acc: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for ((method, _), pair) in pairs {
        if let [Some(plain), Some(canon)] = pair {
            let d = curve_difference(canon, plain)?;
            let (sum, n) = acc.entry(method).or_insert_with(|| (vec![0.0; d.len()], 0));
            if sum.len() != d.len() {
                return Err(Error::InvalidArgument("curves of different lengths".into()));
            }
            for (s, v) in sum.iter_mut().zip(d) {
                *s += v as f64;
            }
            *n += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(method, (sum, n))| CurveDifferenceSummary {
            method: method.to_string(),
            mean: sum.into_iter().map(|s| s / n as f64).collect(),
            count: n,
        })
        .collect())
}

pub fn localization_csv(records: &[LocalizationRecord]) -> String {
    let mut s = String::from("sample_id,method,canonized,mu,bbox_area_fraction\n");
    for r in records {
        let mu = r.mu.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.sample_id, r.method, r.canonized, mu, r.bbox_area_fraction);
    }
    s
}

pub fn perturbation_csv(rows: &[(String, bool, PerturbationCurve)]) -> String {
    let mut s = String::from("sample_id,method,canonized,k,score\n");
    for (method, canonized, curve) in rows {
        for (k, score) in curve.scores.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{}", curve.sample_id, method, canonized, k, score);
        }
    }
    s
}

pub fn write_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LOCALIZATION_CSV), localization_csv(&out.localization))?;
    fs::write(dir.join(PERTURBATION_CSV), perturbation_csv(&out.perturbation))?;
    fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(&out.summary)? + "\n")?;
    Ok(())
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<(ModelGraph, Vec<Sample>)> {
    let g = match &cfg.model_path {
        Some(p) => load_model(p)?,
        None => make_toy_localizer(cfg.toy_seed, true),
    };
    let samples = match &cfg.dataset_path {
        Some(p) => load_dataset(p)?,
        None => make_toy_dataset(cfg.toy_seed, cfg.toy_n),
    };
    Ok((g, samples))
}

/// Loads inputs, evaluates and writes all artifacts to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Summary> {
    let (g, samples) = load_inputs(cfg)?;
    info!("evaluating {} samples", samples.len());
    let out = run_on(&g, &samples, cfg)?;
    write_outputs(&out, &cfg.out_dir)?;
    Ok(out.summary)
}
