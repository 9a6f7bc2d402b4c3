use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use esfp_core::corruption::NoiseProfile;
use esfp_core::experiment::{
    corrupt_all, emit_report, report_markdown, run_experiment, smooth_all, ExperimentConfig, Method, ProfileSource,
};
use esfp_core::hpstm::{HpstmModel, ModelConfig};
use esfp_core::kinematics::{PoseSequence, SkeletonDefinition};
use esfp_core::metrics::evaluate;
use esfp_core::pipeline::{
    read_sequence, run_streaming, run_threaded, single_threaded_requested, write_csv, write_sequence, PipelineOptions,
    StreamConfig,
};
use esfp_core::retarget::{retarget_sequence, write_command_log, ArmJoints, RetargetConfig};
use esfp_core::training::{
    generate_synthetic_dataset, run_curriculum, CurriculumConfig, SyntheticDatasetSpec,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser)]
#[command(name = "esfp", version, about = "Pose smoothing, evaluation and arm retargeting")]
struct Cli {
    /// Seed for every random choice; recorded in the outputs
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic clean sequences
    Gen {
        /// Dataset spec JSON; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a sequence with a noise profile
    Corrupt {
        #[arg(long)]
        input: PathBuf,
        /// stage2, eval-hard, or a profile JSON path
        #[arg(long, default_value = "eval-hard")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model with the three-stage curriculum
    Train {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        /// Curriculum config JSON overriding the preset schedule
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest written by `gen`; synthetic data is generated when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sequences: Option<usize>,
        /// Output directory for the checkpoint and training log
        #[arg(long)]
        out: PathBuf,
    },
    /// Smooth one sequence
    Smooth {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "savgol")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction against ground truth
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Map a sequence's right arm to robot commands
    Retarget {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Command log (one JSON object per line)
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream a sequence through the model and optionally retarget
    Pipeline {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        stride: usize,
        /// Retarget config JSON; commands are written when given
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation experiment from a JSON config
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Methods overriding the config, comma separated
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
        #[arg(long)]
        profile: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    spec: SyntheticDatasetSpec,
    files: Vec<PathBuf>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// `<out>.run.json` next to a file output.
fn run_info_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn read_seq(path: &Path) -> Result<PoseSequence<f64>> {
    read_sequence(path).with_context(|| format!("reading sequence {}", path.display()))
}

fn write_seq(path: &Path, seq: &PoseSequence<f64>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_sequence(path, seq).with_context(|| format!("writing sequence {}", path.display()))
}

fn profile_source(name: &str) -> ProfileSource {
    ProfileSource::Name(name.to_string())
}

fn load_model(path: &Path, skeleton: &SkeletonDefinition<f64>) -> Result<HpstmModel> {
    if !path.exists() {
        bail!("checkpoint {} not found", path.display());
    }
    HpstmModel::load(path, skeleton.clone()).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen(seed: u64, config: Option<PathBuf>, sequences: Option<usize>, frames: Option<usize>, out: &Path) -> Result<()> {
    let mut spec: SyntheticDatasetSpec = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
        None => SyntheticDatasetSpec::default(),
    };
    spec.seed = seed;
    if let Some(n) = sequences {
        spec.sequences = n;
    }
    if let Some(f) = frames {
        spec.frames = f;
    }
    let skeleton = SkeletonDefinition::smpl24();
    let data = generate_synthetic_dataset(&spec, &skeleton)?;
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (i, s) in data.sequences.iter().enumerate() {
        let name = PathBuf::from(format!("seq_{i:04}.json"));
        write_seq(&out.join(&name), s)?;
        files.push(name);
    }
    write_json(&out.join("dataset.json"), &DatasetManifest { seed, spec, files })?;
    println!("wrote {} sequences to {}", data.sequences.len(), out.display());
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Vec<PoseSequence<f64>>> {
    let m: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.files.iter().map(|f| read_seq(&base.join(f))).collect()
}

fn train(
    seed: u64,
    preset: Preset,
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    sequences: Option<usize>,
    out: &Path,
) -> Result<()> {
    let skeleton = SkeletonDefinition::smpl24();
    let (model_cfg, mut cfg) = match preset {
        Preset::Desk => (ModelConfig::desk(), CurriculumConfig::desk()),
        Preset::Paper => (ModelConfig::default(), CurriculumConfig::default()),
    };
    if let Some(p) = config {
        cfg = serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("parsing {}", p.display()))?;
    }
    cfg.seed = seed;
    std::fs::create_dir_all(out)?;
    cfg.log_path = Some(out.join("training_log.csv"));
    let clean = match data {
        Some(p) => load_manifest(&p)?,
        None => {
            let spec = SyntheticDatasetSpec {
                seed,
                sequences: sequences.unwrap_or(SyntheticDatasetSpec::default().sequences),
                ..Default::default()
            };
            generate_synthetic_dataset(&spec, &skeleton)?.sequences
        }
    };
    let mut model = HpstmModel::new(model_cfg, skeleton, seed)?;
    let log = run_curriculum(&cfg, &clean, &mut model)?;
    model.save(out.join("model.json"))?;
    write_json(&out.join("training.json"), &json!({ "seed": seed, "curriculum": cfg, "log": log }))?;
    if let Some(last) = log.records.last() {
        println!("trained {} epochs, final validation loss {:.6}", last.epoch, last.val_loss);
    }
    Ok(())
}

fn smooth(seed: u64, input: &Path, method: &str, checkpoint: Option<PathBuf>, stride: usize, out: &Path) -> Result<()> {
    let method = Method::parse(method)?;
    let skeleton = SkeletonDefinition::smpl24();
    let model = match (method.needs_model(), checkpoint) {
        (true, Some(p)) => Some(load_model(&p, &skeleton)?),
        (true, None) => bail!("method {} needs --checkpoint", method.label()),
        (false, _) => None,
    };
    let cfg = ExperimentConfig { seed, stride, ..Default::default() };
    let seq = read_seq(input)?;
    let smoothed = smooth_all(method, std::slice::from_ref(&seq), &cfg, model.as_ref())?.remove(0);
    write_seq(out, &smoothed)?;
    write_json(&run_info_path(out), &json!({ "command": "smooth", "seed": seed, "method": method, "stride": stride }))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen { config, sequences, frames, out } => gen(seed, config, sequences, frames, &out),
        Command::Corrupt { input, profile, out } => {
            let skeleton = SkeletonDefinition::smpl24();
            let profile: NoiseProfile = profile_source(&profile).resolve(None)?;
            let noisy = corrupt_all(&[read_seq(&input)?], &skeleton, &profile, seed)?.remove(0);
            write_seq(&out, &noisy)?;
            write_json(&run_info_path(&out), &json!({ "command": "corrupt", "seed": seed, "profile": profile }))
        }
        Command::Train { preset, config, data, sequences, out } => train(seed, preset, config, data, sequences, &out),
        Command::Smooth { input, method, checkpoint, stride, out } => smooth(seed, &input, &method, checkpoint, stride, &out),
        Command::Eval { input, reference, out } => {
            let skeleton = SkeletonDefinition::smpl24();
            let report = evaluate(&read_seq(&input)?, &read_seq(&reference)?, &skeleton)?;
            let value = json!({ "seed": seed, "report": report });
            println!("{}", serde_json::to_string_pretty(&value)?);
            if let Some(out) = out {
                write_json(&out, &value)?;
            }
            Ok(())
        }
        Command::Retarget { input, config, fps, out } => {
            let cfg = match config {
                Some(p) => RetargetConfig::load(&p)?,
                None => RetargetConfig::default(),
            };
            let skeleton = SkeletonDefinition::smpl24();
            let seq = read_seq(&input)?;
            let cmds = retarget_sequence(&seq, ArmJoints::right(&skeleton)?, fps, &cfg)?;
            write_command_log(&cmds, BufWriter::new(File::create(&out)?))?;
            write_json(&run_info_path(&out), &json!({ "command": "retarget", "seed": seed, "commands": cmds.len() }))
        }
        Command::Pipeline { input, checkpoint, stride, config, fps, out } => {
            let skeleton = SkeletonDefinition::smpl24();
            let model = load_model(&checkpoint, &skeleton)?;
            let retarget = match config {
                Some(p) => Some((RetargetConfig::load(&p)?, ArmJoints::right(&skeleton)?)),
                None => None,
            };
            let opts = PipelineOptions {
                stream: StreamConfig { stride, use_covariance: true },
                fps,
                retarget,
            };
            let seq = read_seq(&input)?;
            let deterministic = single_threaded_requested();
            let result = if deterministic {
                run_streaming(&seq, &model, &opts)?
            } else {
                run_threaded(&seq, &model, &opts, 64)?
            };
            std::fs::create_dir_all(&out)?;
            write_seq(&out.join("smoothed.json"), &result.smoothed)?;
            write_csv(&result.smoothed, BufWriter::new(File::create(out.join("smoothed.csv"))?))?;
            if let Some(cmds) = &result.commands {
                write_command_log(cmds, BufWriter::new(File::create(out.join("commands.jsonl"))?))?;
            }
            write_json(
                &out.join("run.json"),
                &json!({
                    "command": "pipeline",
                    "seed": seed,
                    "stride": stride,
                    "single_threaded": deterministic,
                    "windows_run": result.windows_run,
                    "max_latency_frames": result.max_latency,
                }),
            )
        }
        Command::Experiment { config, method, profile, checkpoint, stride, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("parsing {}", config.display()))?;
            cfg.seed = seed;
            if !method.is_empty() {
                cfg.methods = method.iter().map(|m| Method::parse(m)).collect::<esfp_core::Result<_>>()?;
            }
            if let Some(p) = profile {
                cfg.profile = profile_source(&p);
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            if let Some(s) = stride {
                cfg.stride = s;
            }
            let report = run_experiment(&cfg, config.parent())?;
            emit_report(&report, &out)?;
            write_json(&out.join("experiment.json"), &cfg)?;
            print!("{}", report_markdown(&report));
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
