use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, AdamW, AdamWConfig};
use super::scheduler::{PlateauConfig, PlateauScheduler};
use crate::corruption::{apply_profile_with_rng, NoiseProfile};
use crate::diffcore::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::hpstm::HpstmModel;
use crate::kinematics::PoseSequence;
use crate::losses::{graph as lg, LossWeights, Stage};

pub const TRAINING_LOG_HEADER: &str = "stage,epoch,train_loss,val_loss,lr,wall_seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    /// epochs for stages 1, 2, 3
    pub epochs: [usize; 3],
    /// initial rate for stages 1 and 2
    pub lr: f64,
    /// rate after the stage-3 optimizer reset
    pub lr_stage3: f64,
    pub plateau: PlateauConfig,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    /// random crops drawn from every training sequence per epoch
    pub crops_per_sequence: usize,
    /// fraction of sequences (taken from the end) held out for validation
    pub val_fraction: f64,
    pub seed: u64,
    pub stage2_profile: NoiseProfile,
    pub weights: LossWeights,
    /// reset optimizer moments when entering stage 2
    pub reinit_optimizer_stage2: bool,
    /// global gradient-norm bound; `None` disables clipping
    pub clip_norm: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            epochs: [10, 10, 10],
            lr: 1e-4,
            lr_stage3: 1e-5,
            plateau: PlateauConfig::default(),
            adamw: AdamWConfig::default(),
            batch_size: 16,
            crops_per_sequence: 4,
            val_fraction: 0.2,
            seed: 0,
            stage2_profile: NoiseProfile::stage2(),
            weights: LossWeights::default(),
            reinit_optimizer_stage2: false,
            clip_norm: Some(1.0),
            checkpoint_dir: None,
            log_path: None,
        }
    }
}

impl CurriculumConfig {
    /// Small-budget schedule: 5/5/5 epochs with a higher stage-1/2 rate and many
    /// crops per sequence so a CPU run finishes in minutes.
    pub fn desk() -> Self {
        Self {
            epochs: [5, 5, 5],
            lr: 3e-3,
            crops_per_sequence: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_stage3 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.crops_per_sequence == 0 {
            return Err(Error::Config("batch size and crops per sequence must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("validation fraction must lie in (0, 1)".into()));
        }
        self.weights.validate()?;
        self.stage2_profile.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    /// 1-based, counted across stages
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// validation position term
    pub val_pos: f64,
    /// whether the likelihood term entered the loss
    pub nll_active: bool,
    /// whether inputs were corrupted
    pub noise_active: bool,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// stage-1 validation position loss before any update
    pub initial_val_pos: f64,
    pub records: Vec<EpochRecord>,
    pub skipped_steps: usize,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAINING_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.stage, r.epoch, r.train_loss, r.val_loss, r.lr, r.wall_seconds
            ));
        }
        s
    }
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*s);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

struct Batch {
    inputs: Vec<PoseSequence<f64>>,
    target: Tensor<f64>,
}

fn make_batch(inputs: Vec<PoseSequence<f64>>, targets: &[PoseSequence<f64>]) -> Result<Batch> {
    let (t, j) = (targets[0].frames(), targets[0].joints());
    let data = targets.iter().flat_map(|s| s.as_slice().iter().copied()).collect();
    Ok(Batch {
        inputs,
        target: Tensor::new(vec![targets.len(), t, j, 3], data)?,
    })
}

/// Loss (and optionally gradients) of one batch.
fn evaluate_batch(
    model: &HpstmModel,
    batch: &Batch,
    stage: Stage,
    weights: &LossWeights,
    dropout_rng: Option<&mut ChaCha8Rng>,
    want_grads: bool,
) -> Result<(f64, f64, Option<Vec<(crate::diffcore::ParamId, Tensor<f64>)>>)> {
    let mut g = Graph::new();
    let w = model.params().bind_all(&mut g);
    let out = model.forward_graph(&mut g, &w, &batch.inputs, stage.uses_covariance(), dropout_rng)?;
    let gt = g.constant(batch.target.clone());
    let canon = model.skeleton().canonical_lengths().to_vec();
    let (loss, terms) = lg::total(&mut g, stage, out.positions, gt, Some(out.lengths), &canon, out.chol_raw, weights)?;
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    let pos = g.value(terms.pos).item().unwrap_or(f64::NAN);
    let grads = if want_grads && value.is_finite() {
        Some(g.backward(loss)?.params())
    } else {
        None
    };
    Ok((value, pos, grads))
}

struct ValidationSet {
    clean: Vec<Batch>,
    noisy: Vec<Batch>,
}

fn build_validation(
    val: &[PoseSequence<f64>],
    model: &HpstmModel,
    cfg: &CurriculumConfig,
) -> Result<ValidationSet> {
    let t = model.config().window;
    let mut clean_windows = Vec::new();
    let mut noisy_windows = Vec::new();
    for (i, seq) in val.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xA1, i as u64]));
        let noisy = apply_profile_with_rng(seq, model.skeleton(), &cfg.stage2_profile, &mut rng)?;
        let mut start = 0;
        while start + t <= seq.frames() {
            clean_windows.push(seq.window(start, t)?);
            noisy_windows.push(noisy.window(start, t)?);
            start += t;
        }
    }
    let mut clean = Vec::new();
    let mut noisy = Vec::new();
    for (c, n) in clean_windows.chunks(cfg.batch_size).zip(noisy_windows.chunks(cfg.batch_size)) {
        clean.push(make_batch(c.to_vec(), c)?);
        noisy.push(make_batch(n.to_vec(), c)?);
    }
    Ok(ValidationSet { clean, noisy })
}

fn validate(model: &HpstmModel, set: &ValidationSet, stage: Stage, weights: &LossWeights) -> Result<(f64, f64)> {
    let batches = if stage == Stage::Manifold { &set.clean } else { &set.noisy };
    let (mut loss, mut pos, mut n) = (0.0, 0.0, 0usize);
    for b in batches {
        let (l, p, _) = evaluate_batch(model, b, stage, weights, None, false)?;
        let k = b.inputs.len();
        loss += l * k as f64;
        pos += p * k as f64;
        n += k;
    }
    Ok((loss / n as f64, pos / n as f64))
}

fn diverged(e: Error, stage: Stage, epoch: usize) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged {
            stage: stage.number(),
            epoch,
            detail,
        },
        other => other,
    }
}

/// Runs the three-stage curriculum on `dataset`, updating `model` in place.
///
/// Stage 1 trains on clean windows with the position loss only. Stage 2 corrupts
/// every training sequence afresh each epoch with `stage2_profile` and adds the
/// bone, velocity, and acceleration terms. Stage 3 enables the covariance head,
/// adds the likelihood term, and restarts the optimizer at `lr_stage3`.
pub fn run_curriculum(
    config: &CurriculumConfig,
    dataset: &[PoseSequence<f64>],
    model: &mut HpstmModel,
) -> Result<TrainingLog> {
    run_curriculum_with(config, dataset, model, |_, _| Ok(()))
}

/// [`run_curriculum`] with a callback invoked after every stage that ran at
/// least one epoch.
pub fn run_curriculum_with(
    config: &CurriculumConfig,
    dataset: &[PoseSequence<f64>],
    model: &mut HpstmModel,
    mut after_stage: impl FnMut(Stage, &HpstmModel) -> Result<()>,
) -> Result<TrainingLog> {
    config.validate()?;
    let window = model.config().window;
    if let Some(s) = dataset.iter().find(|s| s.frames() < window) {
        return Err(Error::TooShort {
            what: "run_curriculum",
            needed: window,
            got: s.frames(),
        });
    }
    let n_val = ((dataset.len() as f64 * config.val_fraction).round() as usize).max(1);
    if dataset.len() < n_val + 1 {
        return Err(Error::Config(format!(
            "need at least {} sequences, got {}",
            n_val + 1,
            dataset.len()
        )));
    }
    let (train, val) = dataset.split_at(dataset.len() - n_val);
    let val_set = build_validation(val, model, config)?;
    let mut log = TrainingLog {
        initial_val_pos: validate(model, &val_set, Stage::Manifold, &config.weights)
            .map_err(|e| diverged(e, Stage::Manifold, 0))?
            .1,
        ..Default::default()
    };
    if config.epochs.iter().all(|e| *e == 0) {
        return Ok(log);
    }
    if config.stage2_profile.seed != 0 {
        log::debug!("stage-2 profile seed is ignored; corruption seeds derive from the curriculum seed");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xD0]));
    let mut opt = AdamW::new(config.adamw, config.lr);
    let mut sched = PlateauScheduler::new(config.plateau, config.lr);
    let started = Instant::now();
    let mut global_epoch = 0;
    let mut csv = match &config.log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "{TRAINING_LOG_HEADER}")?;
            Some(f)
        }
        None => None,
    };

    for (si, stage) in [Stage::Manifold, Stage::NoiseAware, Stage::Uncertainty].into_iter().enumerate() {
        let epochs = config.epochs[si];
        match stage {
            Stage::Manifold => {}
            Stage::NoiseAware => {
                if config.reinit_optimizer_stage2 {
                    let lr = opt.lr;
                    opt.reset(model.params_mut(), lr);
                }
                sched.reset_best();
            }
            Stage::Uncertainty => {
                opt.reset(model.params_mut(), config.lr_stage3);
                sched = PlateauScheduler::new(config.plateau, config.lr_stage3);
            }
        }
        if epochs > 0 && stage.uses_covariance() && !model.config().covariance_head {
            return Err(Error::Config("stage 3 needs a model with a covariance head".into()));
        }
        for _ in 0..epochs {
            global_epoch += 1;
            let noisy_train: Vec<PoseSequence<f64>> = if stage == Stage::Manifold {
                train.to_vec()
            } else {
                train
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(
                            config.seed,
                            &[0xB2, global_epoch as u64, i as u64],
                        ));
                        apply_profile_with_rng(s, model.skeleton(), &config.stage2_profile, &mut r)
                    })
                    .collect::<Result<_>>()?
            };
            let mut crops: Vec<(usize, usize)> = Vec::with_capacity(train.len() * config.crops_per_sequence);
            for (i, s) in train.iter().enumerate() {
                for _ in 0..config.crops_per_sequence {
                    crops.push((i, rng.random_range(0..=s.frames() - window)));
                }
            }
            crops.shuffle(&mut rng);
            let (mut total, mut count) = (0.0, 0usize);
            for chunk in crops.chunks(config.batch_size) {
                let targets: Vec<PoseSequence<f64>> = chunk
                    .iter()
                    .map(|&(i, st)| train[i].window(st, window))
                    .collect::<Result<_>>()?;
                let inputs: Vec<PoseSequence<f64>> = chunk
                    .iter()
                    .map(|&(i, st)| noisy_train[i].window(st, window))
                    .collect::<Result<_>>()?;
                let batch = make_batch(inputs, &targets)?;
                let (loss, _, grads) =
                    evaluate_batch(model, &batch, stage, &config.weights, Some(&mut dropout_rng), true)
                        .map_err(|e| diverged(e, stage, global_epoch))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        stage: stage.number(),
                        epoch: global_epoch,
                        detail: format!("training loss {loss}"),
                    });
                }
                let mut grads = grads.unwrap_or_default();
                if let Some(c) = config.clip_norm {
                    clip_global_norm(&mut grads, c);
                }
                opt.step(model.params_mut(), &grads);
                total += loss * chunk.len() as f64;
                count += chunk.len();
            }
            let (val_loss, val_pos) =
                validate(model, &val_set, stage, &config.weights).map_err(|e| diverged(e, stage, global_epoch))?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged {
                    stage: stage.number(),
                    epoch: global_epoch,
                    detail: format!("validation loss {val_loss}"),
                });
            }
            let lr_used = opt.lr;
            opt.lr = sched.step(val_loss);
            let rec = EpochRecord {
                stage: stage.number(),
                epoch: global_epoch,
                train_loss: total / count.max(1) as f64,
                val_loss,
                val_pos,
                nll_active: stage.uses_covariance(),
                noise_active: stage != Stage::Manifold,
                lr: lr_used,
                wall_seconds: started.elapsed().as_secs_f64(),
            };
            log::info!(
                "stage {} epoch {} train {:.6} val {:.6} lr {:.2e}",
                rec.stage,
                rec.epoch,
                rec.train_loss,
                rec.val_loss,
                rec.lr
            );
            if let Some(f) = csv.as_mut() {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    rec.stage, rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.wall_seconds
                )?;
            }
            log.records.push(rec);
        }
        if epochs > 0 {
            if let Some(dir) = &config.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                model.save(dir.join(format!("stage{}.json", stage.number())))?;
            }
            after_stage(stage, model)?;
        }
    }
    log.skipped_steps = opt.skipped();
    Ok(log)
}
