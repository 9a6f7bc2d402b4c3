use super::quaternion::Quaternion;
use super::skeleton::SkeletonDefinition;
use super::vec3::Vec3;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Manifold coordinates of one frame, decoded into joint positions by FK.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParameters<T> {
    pub root_translation: Vec3<T>,
    pub root_orientation: Quaternion<T>,
    /// One rotation per non-root joint, relative to its parent: entry `j - 1` belongs to joint `j`.
    pub local_rotations: Vec<Quaternion<T>>,
    /// Per-joint bone length in meters; the root entry is 0.
    pub bone_lengths: Vec<T>,
}

impl<T: Real> PoseParameters<T> {
    /// Rest pose of `skeleton` at the origin.
    pub fn rest(skeleton: &SkeletonDefinition<T>) -> Self {
        let n = skeleton.num_joints();
        Self {
            root_translation: [T::zero(); 3],
            root_orientation: Quaternion::identity(),
            local_rotations: vec![Quaternion::identity(); n - 1],
            bone_lengths: skeleton.canonical_lengths().to_vec(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.bone_lengths.len()
    }

    /// Rotation attached to `joint`: the root orientation for joint 0, else the local rotation.
    pub fn rotation(&self, joint: usize) -> Quaternion<T> {
        if joint == 0 {
            self.root_orientation
        } else {
            self.local_rotations[joint - 1]
        }
    }

    pub fn check(&self, skeleton: &SkeletonDefinition<T>) -> Result<()> {
        let n = skeleton.num_joints();
        if self.bone_lengths.len() != n || self.local_rotations.len() + 1 != n {
            return Err(shape_err(
                "forward_kinematics",
                format!(
                    "skeleton has {n} joints, parameters carry {} lengths and {} local rotations",
                    self.bone_lengths.len(),
                    self.local_rotations.len()
                ),
            ));
        }
        Ok(())
    }
}

/// `T x J x 3` joint positions in meters, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence<T> {
    frames: usize,
    joints: usize,
    positions: Vec<T>,
}

impl<T: Real> PoseSequence<T> {
    pub fn new(frames: usize, joints: usize, positions: Vec<T>) -> Result<Self> {
        if frames == 0 || joints == 0 {
            return Err(shape_err("PoseSequence", "frames and joints must be positive"));
        }
        if positions.len() != frames * joints * 3 {
            return Err(shape_err(
                "PoseSequence",
                format!("{} values for {frames}x{joints}x3", positions.len()),
            ));
        }
        if let Some(i) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pose sequence frame {} joint {}",
                i / (joints * 3),
                (i / 3) % joints
            )));
        }
        Ok(Self {
            frames,
            joints,
            positions,
        })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self {
            frames,
            joints,
            positions: vec![T::zero(); frames * joints * 3],
        }
    }

    pub fn from_frames(frames: &[Vec<Vec3<T>>]) -> Result<Self> {
        let joints = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != joints) {
            return Err(shape_err("PoseSequence", "frames disagree on joint count"));
        }
        Self::new(
            frames.len(),
            joints,
            frames.iter().flatten().flat_map(|p| p.iter().copied()).collect(),
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn as_slice(&self) -> &[T] {
        &self.positions
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.positions
    }

    pub fn into_vec(self) -> Vec<T> {
        self.positions
    }

    #[inline]
    pub fn get(&self, frame: usize, joint: usize) -> Vec3<T> {
        let i = (frame * self.joints + joint) * 3;
        [self.positions[i], self.positions[i + 1], self.positions[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, joint: usize, p: Vec3<T>) {
        let i = (frame * self.joints + joint) * 3;
        self.positions[i..i + 3].copy_from_slice(&p);
    }

    pub fn frame(&self, frame: usize) -> Vec<Vec3<T>> {
        (0..self.joints).map(|j| self.get(frame, j)).collect()
    }

    pub fn set_frame(&mut self, frame: usize, points: &[Vec3<T>]) {
        for (j, p) in points.iter().enumerate() {
            self.set(frame, j, *p);
        }
    }

    /// Copy of frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(shape_err(
                "window",
                format!("{start}..{} outside {} frames", start + len, self.frames),
            ));
        }
        let stride = self.joints * 3;
        Ok(Self {
            frames: len,
            joints: self.joints,
            positions: self.positions[start * stride..(start + len) * stride].to_vec(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.joints == other.joints
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PoseSequence<U> {
        PoseSequence {
            frames: self.frames,
            joints: self.joints,
            positions: self.positions.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Largest per-coordinate absolute difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<T> {
        if !self.same_shape(other) {
            return None;
        }
        Some(
            self.positions
                .iter()
                .zip(&other.positions)
                .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs())),
        )
    }
}
