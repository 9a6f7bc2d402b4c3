//! Reproducible evaluation runs: generate or load clean data, corrupt it, smooth
//! with each requested method, score every method, and write the report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{particle_filter_smooth, savgol_smooth, ParticleFilterParams, SavgolParams};
use crate::corruption::NoiseProfile;
use crate::corruption::apply_profile_with_rng;
use crate::error::{Error, Result};
use crate::hpstm::HpstmModel;
use crate::kinematics::{PoseSequence, SkeletonDefinition};
use crate::metrics::{evaluate_many, MetricReport};
use crate::pipeline::{read_sequence, run_offline, PipelineOptions, StreamConfig};
use crate::training::{derive_seed, generate_synthetic_dataset, SyntheticDatasetSpec};

/// Row labels of the report, in [`MetricReport::values`] order.
pub const METRIC_LABELS: [&str; 7] = [
    "MPJPE (mm)",
    "PA-MPJPE (mm)",
    "RR-MPJPE (mm)",
    "MeanAccel",
    "MeanJerk",
    "BoneMAE (mm)",
    "BoneStdDev (mm)",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Noisy,
    Savgol,
    Particle,
    Hpstm,
    HpstmCov,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Noisy, Method::Particle, Method::Savgol, Method::Hpstm, Method::HpstmCov];

    pub fn label(self) -> &'static str {
        match self {
            Method::Noisy => "Noisy Input",
            Method::Particle => "PF Smoothed",
            Method::Savgol => "SavGol Smoothed",
            Method::Hpstm => "HPSTM",
            Method::HpstmCov => "HPSTM + Cov",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string()))
            .map_err(|_| Error::Config(format!("unknown method {name:?}")))
    }

    pub fn needs_model(self) -> bool {
        matches!(self, Method::Hpstm | Method::HpstmCov)
    }
}

/// A built-in profile name, a path to a profile JSON file, or an inline profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Inline(NoiseProfile),
    Name(String),
}

impl ProfileSource {
    pub fn resolve(&self, base: Option<&Path>) -> Result<NoiseProfile> {
        match self {
            ProfileSource::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            ProfileSource::Name(n) if n == "stage2" || n == "eval-hard" => NoiseProfile::named(n),
            ProfileSource::Name(path) => {
                let p = PathBuf::from(path);
                NoiseProfile::load(match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// synthetic data to generate; ignored when `sequences` is non-empty
    #[serde(default)]
    pub dataset: SyntheticDatasetSpec,
    /// sequence sidecar files to load instead of generating
    #[serde(default)]
    pub sequences: Vec<PathBuf>,
    pub profile: ProfileSource,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_fps")]
    pub fps: f64,
    #[serde(default)]
    pub savgol: SavgolParams,
    #[serde(default)]
    pub particle: ParticleFilterParams,
}

fn default_stride() -> usize {
    5
}

fn default_fps() -> f64 {
    30.0
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: SyntheticDatasetSpec { sequences: 20, ..Default::default() },
            sequences: Vec::new(),
            profile: ProfileSource::Name("eval-hard".into()),
            methods: vec![Method::Noisy, Method::Savgol],
            checkpoint: None,
            stride: default_stride(),
            fps: default_fps(),
            savgol: SavgolParams::default(),
            particle: ParticleFilterParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods requested".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::Config("fps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub sequences: usize,
    pub frames: usize,
    pub results: Vec<MethodResult>,
}

/// Clean sequences for a run: loaded from files or generated.
pub fn experiment_data(
    config: &ExperimentConfig,
    skeleton: &SkeletonDefinition<f64>,
    base: Option<&Path>,
) -> Result<Vec<PoseSequence<f64>>> {
    if config.sequences.is_empty() {
        return Ok(generate_synthetic_dataset(&config.dataset, skeleton)?.sequences);
    }
    config
        .sequences
        .iter()
        .map(|p| match base {
            Some(b) if p.is_relative() => read_sequence(b.join(p)),
            _ => read_sequence(p),
        })
        .collect()
}

/// Seeded corruption of every sequence; sequence `i` uses its own derived seed.
pub fn corrupt_all(
    clean: &[PoseSequence<f64>],
    skeleton: &SkeletonDefinition<f64>,
    profile: &NoiseProfile,
    seed: u64,
) -> Result<Vec<PoseSequence<f64>>> {
    clean
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xC0, i as u64]));
            apply_profile_with_rng(s, skeleton, profile, &mut rng)
        })
        .collect()
}

/// Smooths every noisy sequence with one method.
pub fn smooth_all(
    method: Method,
    noisy: &[PoseSequence<f64>],
    config: &ExperimentConfig,
    model: Option<&HpstmModel>,
) -> Result<Vec<PoseSequence<f64>>> {
    match method {
        Method::Noisy => Ok(noisy.to_vec()),
        Method::Savgol => noisy.iter().map(|s| savgol_smooth(s, config.savgol)).collect(),
        Method::Particle => noisy
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xF1, i as u64]));
                Ok(particle_filter_smooth(s, config.particle, &mut rng)?.0)
            })
            .collect(),
        Method::Hpstm | Method::HpstmCov => {
            let model = model.ok_or_else(|| Error::Missing(format!("method {:?} needs a model checkpoint", method)))?;
            if method == Method::HpstmCov && !model.config().covariance_head {
                return Err(Error::Config("hpstm-cov needs a model with a covariance head".into()));
            }
            let opts = PipelineOptions {
                stream: StreamConfig {
                    stride: config.stride,
                    use_covariance: method == Method::HpstmCov,
                },
                fps: config.fps,
                retarget: None,
            };
            noisy.iter().map(|s| Ok(run_offline(s, model, &opts)?.smoothed)).collect()
        }
    }
}

/// Runs the experiment with an already loaded model (if any).
pub fn run_experiment_with_model(
    config: &ExperimentConfig,
    skeleton: &SkeletonDefinition<f64>,
    model: Option<&HpstmModel>,
    base: Option<&Path>,
) -> Result<ExperimentReport> {
    config.validate()?;
    if model.is_none() {
        if let Some(m) = config.methods.iter().find(|m| m.needs_model()) {
            return Err(Error::Missing(format!("method {m:?} needs a model checkpoint")));
        }
    }
    let clean = experiment_data(config, skeleton, base)?;
    let profile = config.profile.resolve(base)?;
    let noisy = corrupt_all(&clean, skeleton, &profile, config.seed)?;
    let mut results = Vec::with_capacity(config.methods.len());
    for &method in &config.methods {
        log::info!("evaluating {}", method.label());
        let smoothed = smooth_all(method, &noisy, config, model)?;
        results.push(MethodResult {
            method,
            report: evaluate_many(&smoothed, &clean, skeleton)?,
        });
    }
    Ok(ExperimentReport {
        seed: config.seed,
        sequences: clean.len(),
        frames: clean.iter().map(|s| s.frames()).sum(),
        results,
    })
}

/// Loads the checkpoint named by the config when a model method is requested.
pub fn run_experiment(config: &ExperimentConfig, base: Option<&Path>) -> Result<ExperimentReport> {
    let skeleton = SkeletonDefinition::smpl24();
    let model = if config.methods.iter().any(|m| m.needs_model()) {
        let path = config
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Missing("a model method was requested without a checkpoint".into()))?;
        let path = match base {
            Some(b) if path.is_relative() => b.join(path),
            _ => path.clone(),
        };
        if !path.exists() {
            return Err(Error::Missing(format!("checkpoint {} not found", path.display())));
        }
        Some(HpstmModel::load(path, skeleton.clone())?)
    } else {
        None
    };
    run_experiment_with_model(config, &skeleton, model.as_ref(), base)
}

/// Metrics as rows, methods as columns, full precision.
pub fn report_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("metric");
    for r in &report.results {
        s.push(',');
        s.push_str(r.method.label());
    }
    s.push('\n');
    for (k, label) in METRIC_LABELS.iter().enumerate() {
        s.push_str(label);
        for r in &report.results {
            let _ = write!(s, ",{}", r.report.values()[k]);
        }
        s.push('\n');
    }
    s
}

/// Parses [`report_csv`] output back into per-method metric values.
pub fn parse_report_csv(text: &str) -> Result<Vec<(String, [f64; 7])>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty report".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut values = vec![[0.0; 7]; names.len()];
    for (k, line) in lines.enumerate().take(7) {
        for (m, cell) in line.split(',').skip(1).enumerate() {
            values[m][k] = cell
                .parse()
                .map_err(|_| Error::Config(format!("bad report cell {cell:?}")))?;
        }
    }
    Ok(names.into_iter().zip(values).collect())
}

/// Markdown table with four decimals.
pub fn report_markdown(report: &ExperimentReport) -> String {
    let mut s = String::from("| Metric |");
    for r in &report.results {
        let _ = write!(s, " {} |", r.method.label());
    }
    s.push_str("\n|---|");
    for _ in &report.results {
        s.push_str("---:|");
    }
    s.push('\n');
    for (k, label) in METRIC_LABELS.iter().enumerate() {
        let _ = write!(s, "| {label} |");
        for r in &report.results {
            let _ = write!(s, " {:.4} |", r.report.values()[k]);
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\nseed {}, {} sequences, {} frames", report.seed, report.sequences, report.frames);
    s
}

/// Writes `report.csv`, `report.json` and `report.md` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: impl AsRef<Path>) -> Result<()> {
    if report.results.is_empty() {
        return Err(Error::Config("report has no methods".into()));
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), report_csv(report))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("report.md"), report_markdown(report))?;
    Ok(())
}
