use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vec3::{self, Vec3};
use crate::error::{Error, Result};
use crate::scalar::Real;

const DEFAULT_SKELETON_JSON: &str = include_str!("../../data/smpl24_skeleton.json");

/// On-disk layout of a skeleton file. Keys are fixed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_directions: Vec<[f64; 3]>,
    canonical_lengths: Vec<f64>,
}

/// Joint tree defining the kinematic manifold.
///
/// Joints are stored in topological order: every parent index is smaller than
/// its child's index, so the root is joint 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDefinition<T> {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    rest_directions: Vec<Vec3<T>>,
    canonical_lengths: Vec<T>,
}

impl<T: Real> SkeletonDefinition<T> {
    pub fn new(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_directions: Vec<Vec3<T>>,
        canonical_lengths: Vec<T>,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(Error::Skeleton("no joints".into()));
        }
        if joint_names.len() != n || rest_directions.len() != n || canonical_lengths.len() != n {
            return Err(Error::Skeleton(format!(
                "field lengths disagree: names {}, parents {}, directions {}, lengths {}",
                joint_names.len(),
                n,
                rest_directions.len(),
                canonical_lengths.len()
            )));
        }
        let roots = parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::Skeleton(format!("expected exactly one root, found {roots}")));
        }
        if parents[0].is_some() {
            return Err(Error::Skeleton("root must be joint 0".into()));
        }
        for (j, p) in parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                Some(p) => {
                    return Err(Error::Skeleton(format!(
                        "joint {j} has parent {p}; parents must precede children"
                    )))
                }
                None => unreachable!("single root checked above"),
            }
        }
        let tol = T::unit_tolerance();
        for (j, d) in rest_directions.iter().enumerate() {
            let norm = vec3::norm(*d);
            if !((norm - T::one()).abs() <= tol) {
                return Err(Error::Skeleton(format!(
                    "rest direction of joint {j} has norm {norm}"
                )));
            }
        }
        for (j, l) in canonical_lengths.iter().enumerate() {
            if !l.is_finite() || *l < T::zero() {
                return Err(Error::Skeleton(format!("joint {j} has invalid length {l}")));
            }
        }
        if canonical_lengths[0] != T::zero() {
            return Err(Error::Skeleton("root canonical length must be 0".into()));
        }
        Ok(Self {
            joint_names,
            parents,
            rest_directions,
            canonical_lengths,
        })
    }

    /// Builds a skeleton, normalizing the rest directions first.
    pub fn with_unnormalized_directions(
        joint_names: Vec<String>,
        parents: Vec<Option<usize>>,
        rest_directions: Vec<Vec3<T>>,
        canonical_lengths: Vec<T>,
    ) -> Result<Self> {
        let dirs = rest_directions
            .into_iter()
            .map(|d| {
                let n = vec3::norm(d);
                if n > T::zero() {
                    Ok(vec3::scale(d, T::one() / n))
                } else {
                    Err(Error::Skeleton("zero rest direction".into()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(joint_names, parents, dirs, canonical_lengths)
    }

    /// 24-joint SMPL-topology skeleton shipped with the crate. Bone lengths are
    /// configuration defaults for an adult of roughly 1.7 m.
    pub fn smpl24() -> Self {
        Self::from_json_str(DEFAULT_SKELETON_JSON).expect("bundled skeleton is valid")
    }

    /// Single chain of `lengths.len()` joints, all rest directions along `direction`.
    pub fn chain(lengths: &[T], direction: Vec3<T>) -> Result<Self> {
        let n = lengths.len();
        Self::with_unnormalized_directions(
            (0..n).map(|i| format!("j{i}")).collect(),
            (0..n).map(|i| i.checked_sub(1)).collect(),
            vec![direction; n],
            lengths.to_vec(),
        )
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: SkeletonFile = serde_json::from_str(s)?;
        Self::new(
            file.names,
            file.parents,
            file.rest_directions
                .into_iter()
                .map(|d| d.map(T::lit))
                .collect(),
            file.canonical_lengths.into_iter().map(T::lit).collect(),
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = SkeletonFile {
            names: self.joint_names.clone(),
            parents: self.parents.clone(),
            rest_directions: self
                .rest_directions
                .iter()
                .map(|d| d.map(|v| v.to_f64_lossy()))
                .collect(),
            canonical_lengths: self.canonical_lengths.iter().map(|v| v.to_f64_lossy()).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn rest_directions(&self) -> &[Vec3<T>] {
        &self.rest_directions
    }

    pub fn canonical_lengths(&self) -> &[T] {
        &self.canonical_lengths
    }

    /// Non-root joints paired with their parents, in topological order.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.map(|p| (j, p)))
    }

    pub fn cast<U: Real>(&self) -> SkeletonDefinition<U> {
        SkeletonDefinition {
            joint_names: self.joint_names.clone(),
            parents: self.parents.clone(),
            rest_directions: self
                .rest_directions
                .iter()
                .map(|d| d.map(|v| U::lit(v.to_f64_lossy())))
                .collect(),
            canonical_lengths: self
                .canonical_lengths
                .iter()
                .map(|v| U::lit(v.to_f64_lossy()))
                .collect(),
        }
    }
}
