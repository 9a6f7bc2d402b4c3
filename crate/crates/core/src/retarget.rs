//! Mapping of human shoulder-elbow-wrist triples to clipped robot workspace
//! commands.
//!
//! Human frame: +X forward, +Y left, +Z up, meters. Robot frame: +X forward
//! (reach), +Y up, +Z right, millimeters.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{one_euro_step, OneEuroParams, OneEuroState};
use crate::error::{Error, Result};
use crate::kinematics::{vec3, PoseSequence, SkeletonDefinition, Vec3};

pub type Mat3 = [[f64; 3]; 3];

/// (x, y, z) in the human frame to (x, z, -y) in the robot frame.
pub const DEFAULT_ROTATION_MAP: Mat3 = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]];

const FOREARM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetargetConfig {
    pub rotation_map: Mat3,
    /// mm
    pub target_reach: f64,
    /// mm, robot frame
    pub shoulder_offset: Vec3<f64>,
    /// per-axis [min, max], mm
    pub clip_box: [[f64; 2]; 3],
    /// m; shorter human arms use `lambda_0`
    pub tau_min: f64,
    pub lambda_0: f64,
    /// Hz
    pub command_rate: f64,
    pub speed: f64,
    pub one_euro: OneEuroParams,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self {
            rotation_map: DEFAULT_ROTATION_MAP,
            target_reach: 200.0,
            shoulder_offset: [100.0, 125.0, 0.0],
            clip_box: [[100.0, 300.0], [0.0, 250.0], [-150.0, 150.0]],
            tau_min: 0.05,
            lambda_0: 0.4,
            command_rate: 20.0,
            speed: 100.0,
            one_euro: OneEuroParams::default(),
        }
    }
}

impl RetargetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("retarget: {m}")));
        if self.clip_box.iter().any(|[lo, hi]| !(lo < hi)) {
            return bad("clip box needs min < max on every axis");
        }
        if !(self.target_reach > 0.0) || !(self.tau_min > 0.0) || !(self.command_rate > 0.0) {
            return bad("target reach, tau_min and command rate must be positive");
        }
        if !self.lambda_0.is_finite() || self.shoulder_offset.iter().any(|v| !v.is_finite()) {
            return bad("non-finite fallback scale or offset");
        }
        let r = &self.rotation_map;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 {
                    return bad("rotation map is not orthonormal");
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn clamp(&self, p: Vec3<f64>) -> Vec3<f64> {
        [0, 1, 2].map(|k| p[k].clamp(self.clip_box[k][0], self.clip_box[k][1]))
    }

    pub fn contains(&self, p: Vec3<f64>) -> bool {
        (0..3).all(|k| self.clip_box[k][0] <= p[k] && p[k] <= self.clip_box[k][1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmTriple {
    pub shoulder: Vec3<f64>,
    pub elbow: Vec3<f64>,
    pub wrist: Vec3<f64>,
}

impl ArmTriple {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            shoulder: vec3::scale(self.shoulder, s),
            elbow: vec3::scale(self.elbow, s),
            wrist: vec3::scale(self.wrist, s),
        }
    }

    /// Upper arm plus forearm length, m.
    pub fn arm_length(&self) -> f64 {
        vec3::norm(vec3::sub(self.elbow, self.shoulder)) + vec3::norm(vec3::sub(self.wrist, self.elbow))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotCommand {
    pub t_ms: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
    pub wrist_deg: f64,
    pub speed: f64,
}

impl RobotCommand {
    pub fn position(&self) -> Vec3<f64> {
        [self.x_mm, self.y_mm, self.z_mm]
    }
}

pub fn relative_wrist_vector(triple: &ArmTriple) -> Vec3<f64> {
    vec3::sub(triple.wrist, triple.shoulder)
}

pub fn rotate(m: &Mat3, v: Vec3<f64>) -> Vec3<f64> {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Robot reach over human arm length (both in mm), or the fallback when the
/// arm is shorter than `tau_min`.
pub fn compute_scale(triple: &ArmTriple, config: &RetargetConfig) -> f64 {
    let arm = triple.arm_length();
    if !(arm >= config.tau_min) {
        return config.lambda_0;
    }
    config.target_reach / (arm * 1000.0)
}

/// Command position before clipping, mm.
pub fn map_command_unclipped(triple: &ArmTriple, config: &RetargetConfig) -> Vec3<f64> {
    map_vector(relative_wrist_vector(triple), compute_scale(triple, config), config)
}

fn map_vector(v_h: Vec3<f64>, lambda: f64, config: &RetargetConfig) -> Vec3<f64> {
    let v_r = rotate(&config.rotation_map, v_h);
    [0, 1, 2].map(|k| config.shoulder_offset[k] + lambda * v_r[k] * 1000.0)
}

/// Clipped command position, mm.
pub fn map_command(triple: &ArmTriple, config: &RetargetConfig) -> Vec3<f64> {
    config.clamp(map_command_unclipped(triple, config))
}

/// Heading of the forearm in the robot's horizontal (X-Z) plane: 90 is straight
/// ahead, 180 points to the robot's left (-Z), 0 to its right; headings behind
/// the robot clamp to the nearer side, exactly backward to 180. Returns `None`
/// for a degenerate forearm.
pub fn wrist_angle(triple: &ArmTriple, config: &RetargetConfig) -> Option<f64> {
    let f = vec3::sub(triple.wrist, triple.elbow);
    if !(vec3::norm(f) > FOREARM_EPS) {
        return None;
    }
    let r = rotate(&config.rotation_map, f);
    if r[0].hypot(r[2]) <= FOREARM_EPS {
        return None;
    }
    Some((90.0 + (0.0 - r[2]).atan2(r[0]).to_degrees()).clamp(0.0, 180.0))
}

/// Joint indices of the tracked arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmJoints {
    pub shoulder: usize,
    pub elbow: usize,
    pub wrist: usize,
}

impl ArmJoints {
    pub fn right(skeleton: &SkeletonDefinition<f64>) -> Result<Self> {
        let idx = |name: &str| {
            skeleton
                .joint_index(name)
                .ok_or_else(|| Error::Skeleton(format!("skeleton has no joint named {name}")))
        };
        Ok(Self {
            shoulder: idx("right_shoulder")?,
            elbow: idx("right_elbow")?,
            wrist: idx("right_wrist")?,
        })
    }

    pub fn triple(&self, seq: &PoseSequence<f64>, frame: usize) -> ArmTriple {
        ArmTriple {
            shoulder: seq.get(frame, self.shoulder),
            elbow: seq.get(frame, self.elbow),
            wrist: seq.get(frame, self.wrist),
        }
    }
}

/// Stateful mapper: one-euro filters the wrist vector, tracks the latest state,
/// and emits commands at `command_rate` from the newest filtered state.
#[derive(Debug, Clone)]
pub struct Retargeter {
    config: RetargetConfig,
    filter: OneEuroState,
    latest: Option<(Vec3<f64>, f64)>,
    angle: f64,
    next_emit: Option<f64>,
}

impl Retargeter {
    pub fn new(config: RetargetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            filter: OneEuroState::new(),
            latest: None,
            angle: 90.0,
            next_emit: None,
        })
    }

    pub fn config(&self) -> &RetargetConfig {
        &self.config
    }

    /// Feeds one triple observed at `t` seconds; returns the commands due at or
    /// before `t`.
    pub fn push(&mut self, triple: &ArmTriple, t: f64) -> Result<Vec<RobotCommand>> {
        if [triple.shoulder, triple.elbow, triple.wrist].iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("arm triple".into()));
        }
        let v = one_euro_step(&mut self.filter, relative_wrist_vector(triple), t, &self.config.one_euro)?;
        if let Some(a) = wrist_angle(triple, &self.config) {
            self.angle = a;
        }
        self.latest = Some((v, compute_scale(triple, &self.config)));
        let period = 1.0 / self.config.command_rate;
        let mut next = *self.next_emit.get_or_insert(t);
        let mut out = Vec::new();
        while next <= t + 1e-12 {
            out.push(self.command_at(next));
            next += period;
        }
        self.next_emit = Some(next);
        Ok(out)
    }

    fn command_at(&self, t: f64) -> RobotCommand {
        let (v, lambda) = self.latest.expect("command requested before any input");
        let p = self.config.clamp(map_vector(v, lambda, &self.config));
        RobotCommand {
            t_ms: t * 1000.0,
            x_mm: p[0],
            y_mm: p[1],
            z_mm: p[2],
            wrist_deg: self.angle,
            speed: self.config.speed,
        }
    }
}

/// Runs a whole sequence sampled at `fps` through a fresh [`Retargeter`].
pub fn retarget_sequence(
    seq: &PoseSequence<f64>,
    arm: ArmJoints,
    fps: f64,
    config: &RetargetConfig,
) -> Result<Vec<RobotCommand>> {
    if !(fps > 0.0) {
        return Err(Error::Config(format!("frame rate must be positive, got {fps}")));
    }
    let mut r = Retargeter::new(config.clone())?;
    let mut out = Vec::new();
    for f in 0..seq.frames() {
        out.extend(r.push(&arm.triple(seq, f), f as f64 / fps)?);
    }
    Ok(out)
}

pub fn write_command_log(commands: &[RobotCommand], mut w: impl Write) -> Result<()> {
    for c in commands {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_command_log(r: impl BufRead) -> Result<Vec<RobotCommand>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}
