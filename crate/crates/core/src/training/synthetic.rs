use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{forward_kinematics, vec3, PoseParameters, PoseSequence, Quaternion, SkeletonDefinition, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub sequences: usize,
    pub frames: usize,
    pub fps: f64,
    /// per-sinusoid joint angle amplitude range, radians
    pub amplitude: (f64, f64),
    /// sinusoid frequency range, Hz
    pub frequency: (f64, f64),
    /// sinusoids summed per angle track
    pub components: usize,
    /// relative half-width of the uniform per-subject bone scale
    pub bone_spread: f64,
    /// root track amplitude per axis, meters
    pub root_amplitude: f64,
    /// root track frequency range, Hz
    pub root_frequency: (f64, f64),
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            sequences: 200,
            frames: 120,
            fps: 30.0,
            amplitude: (0.05, 0.3),
            frequency: (0.2, 1.5),
            components: 2,
            bone_spread: 0.1,
            root_amplitude: 0.3,
            root_frequency: (0.05, 0.3),
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self, window: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.frames < window {
            return fail(format!("{} frames per sequence is shorter than the window {window}", self.frames));
        }
        let (a0, a1) = self.amplitude;
        if !(0.0 <= a0 && a0 <= a1 && a1 * self.components as f64 <= std::f64::consts::PI) {
            return fail(format!("amplitudes {a0}..{a1} must be ordered and within pi"));
        }
        if !(self.frequency.0 >= 0.0 && self.frequency.0 <= self.frequency.1) {
            return fail("frequency range must be ordered and >= 0".into());
        }
        if !(self.root_frequency.0 >= 0.0 && self.root_frequency.0 <= self.root_frequency.1) {
            return fail("root frequency range must be ordered and >= 0".into());
        }
        if !(0.0..1.0).contains(&self.bone_spread) || self.root_amplitude < 0.0 || !(self.fps > 0.0) {
            return fail("bone spread must lie in [0, 1); root amplitude >= 0; fps > 0".into());
        }
        Ok(())
    }
}

/// Clean sequences together with the parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub sequences: Vec<PoseSequence<f64>>,
    pub params: Vec<Vec<PoseParameters<f64>>>,
    /// per-sequence bone lengths
    pub bone_lengths: Vec<Vec<f64>>,
}

struct Track {
    amplitude: Vec<f64>,
    frequency: Vec<f64>,
    phase: Vec<f64>,
}

impl Track {
    fn sample(rng: &mut ChaCha8Rng, n: usize, amp: (f64, f64), freq: (f64, f64)) -> Self {
        let r = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        Self {
            amplitude: (0..n).map(|_| r(rng, amp)).collect(),
            frequency: (0..n).map(|_| r(rng, freq)).collect(),
            phase: (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    fn at(&self, seconds: f64) -> f64 {
        (0..self.amplitude.len())
            .map(|k| {
                self.amplitude[k]
                    * ((std::f64::consts::TAU * self.frequency[k] * seconds + self.phase[k]).sin()
                        - self.phase[k].sin())
            })
            .sum()
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Vec3<f64> {
    loop {
        let v = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = vec3::norm(v);
        if n > 0.1 && n <= 1.0 {
            return vec3::scale(v, 1.0 / n);
        }
    }
}

/// Sum-of-sinusoid joint rotations about fixed random axes, a smooth root
/// track, and per-subject bone lengths, decoded by forward kinematics.
///
/// Every angle track starts at zero, so frame 0 is the rest pose at the origin
/// whenever the root track also starts at zero.
pub fn generate_synthetic_dataset(
    spec: &SyntheticDatasetSpec,
    skeleton: &SkeletonDefinition<f64>,
) -> Result<SyntheticDataset> {
    spec.validate(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = skeleton.num_joints();
    let mut out = SyntheticDataset {
        sequences: Vec::with_capacity(spec.sequences),
        params: Vec::with_capacity(spec.sequences),
        bone_lengths: Vec::with_capacity(spec.sequences),
    };
    for _ in 0..spec.sequences {
        let lengths: Vec<f64> = skeleton
            .canonical_lengths()
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 || spec.bone_spread == 0.0 {
                    *c
                } else {
                    c * (1.0 + rng.random_range(-spec.bone_spread..spec.bone_spread))
                }
            })
            .collect();
        let axes: Vec<Vec3<f64>> = (0..n).map(|_| random_axis(&mut rng)).collect();
        let tracks: Vec<Track> = (0..n)
            .map(|_| Track::sample(&mut rng, spec.components, spec.amplitude, spec.frequency))
            .collect();
        let root_tracks: Vec<Track> = (0..3)
            .map(|_| {
                Track::sample(
                    &mut rng,
                    1,
                    (spec.root_amplitude, spec.root_amplitude),
                    spec.root_frequency,
                )
            })
            .collect();
        let mut frames = Vec::with_capacity(spec.frames);
        let mut params = Vec::with_capacity(spec.frames);
        for f in 0..spec.frames {
            let s = f as f64 / spec.fps;
            let rot = |j: usize| Quaternion::from_axis_angle(axes[j], tracks[j].at(s));
            let p = PoseParameters {
                root_translation: [0, 1, 2].map(|k| root_tracks[k].at(s)),
                root_orientation: rot(0)?.canonical(),
                local_rotations: (1..n).map(|j| Ok(rot(j)?.canonical())).collect::<Result<_>>()?,
                bone_lengths: lengths.clone(),
            };
            frames.push(forward_kinematics(skeleton, &p)?);
            params.push(p);
        }
        out.sequences.push(PoseSequence::from_frames(&frames)?);
        out.params.push(params);
        out.bone_lengths.push(lengths);
    }
    Ok(out)
}
