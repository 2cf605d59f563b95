use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROOT: usize = 0;

/// Joint hierarchy. Joint 0 is the root (its own parent); the root's bone
/// length is its standing height above the ground plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub joint_names: Vec<String>,
    pub parent: Vec<usize>,
    pub bone_lengths: Vec<f64>,
}

impl Skeleton {
    pub fn new(joint_names: Vec<String>, parent: Vec<usize>, bone_lengths: Vec<f64>) -> Result<Self> {
        let s = Self {
            joint_names,
            parent,
            bone_lengths,
        };
        s.validate()?;
        Ok(s)
    }

    /// Root/pelvis, head, both hands and a point between the feet.
    pub fn standard() -> Self {
        let hand = (0.3f64 * 0.3 + 0.25 * 0.25).sqrt();
        Self::new(
            ["root", "head", "left_hand", "right_hand", "feet_center"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec![0, 0, 0, 0, 0],
            vec![0.95, 0.6, hand, hand, 0.95],
        )
        .expect("standard skeleton is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_names.len();
        if n < 2 {
            return Err(Error::validation(format!("skeleton needs at least 2 joints, got {n}")));
        }
        if self.parent.len() != n || self.bone_lengths.len() != n {
            return Err(Error::validation(format!(
                "skeleton has {n} names but {} parents and {} bone lengths",
                self.parent.len(),
                self.bone_lengths.len()
            )));
        }
        if self.parent[ROOT] != ROOT {
            return Err(Error::validation("joint 0 must be the root (its own parent)"));
        }
        for j in 1..n {
            // Walking up the parent chain must reach the root in < n steps.
            let mut k = j;
            for _ in 0..n {
                if k == ROOT {
                    break;
                }
                let p = self.parent[k];
                if p >= n || p == k {
                    return Err(Error::validation(format!(
                        "joint {} has invalid parent {p}",
                        self.joint_names[k]
                    )));
                }
                k = p;
            }
            if k != ROOT {
                return Err(Error::validation(format!(
                    "parent chain of joint {} does not reach the root",
                    self.joint_names[j]
                )));
            }
        }
        if let Some(j) = self.bone_lengths.iter().position(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::validation(format!(
                "bone length of {} must be positive",
                self.joint_names[j]
            )));
        }
        let mut names = self.joint_names.clone();
        names.sort();
        names.dedup();
        if names.len() != n {
            return Err(Error::validation("joint names must be unique"));
        }
        Ok(())
    }

    pub fn n_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn root_height(&self) -> f64 {
        self.bone_lengths[ROOT]
    }

    /// Rest-pose offset of every joint from the root in the body frame
    /// (facing +y, right = +x, z up). Bone directions come from the joint
    /// role implied by its name.
    pub fn rest_offsets(&self) -> Vec<[f64; 3]> {
        let n = self.n_joints();
        let mut out = vec![[0.0; 3]; n];
        // Parents may appear after children in the list; resolve by depth.
        let mut done = vec![false; n];
        done[ROOT] = true;
        while done.iter().any(|d| !d) {
            for j in 1..n {
                let p = self.parent[j];
                if !done[j] && done[p] {
                    let d = role_direction(&self.joint_names[j]);
                    let len = self.bone_lengths[j];
                    out[j] = [
                        out[p][0] + d[0] * len,
                        out[p][1] + d[1] * len,
                        out[p][2] + d[2] * len,
                    ];
                    done[j] = true;
                }
            }
        }
        out
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::standard()
    }
}

fn role_direction(name: &str) -> [f64; 3] {
    let unit = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    match name {
        "left_hand" => unit([-0.3, 0.0, -0.25]),
        "right_hand" => unit([0.3, 0.0, -0.25]),
        "feet_center" => [0.0, 0.0, -1.0],
        _ => [0.0, 0.0, 1.0],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_rest_pose() {
        let s = Skeleton::standard();
        let rest = s.rest_offsets();
        assert!((rest[2][0] + 0.3).abs() < 1e-12 && (rest[2][2] + 0.25).abs() < 1e-12);
        assert!((rest[3][0] - 0.3).abs() < 1e-12);
        assert!((rest[4][2] + 0.95).abs() < 1e-12);
        assert!((rest[1][2] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_trees() {
        let names = |n: usize| (0..n).map(|i| format!("j{i}")).collect::<Vec<_>>();
        assert!(Skeleton::new(names(1), vec![0], vec![1.0]).is_err());
        assert!(Skeleton::new(names(3), vec![0, 2, 1], vec![1.0; 3]).is_err());
        assert!(Skeleton::new(names(2), vec![1, 0], vec![1.0; 2]).is_err());
        assert!(Skeleton::new(names(2), vec![0, 0], vec![1.0, 0.0]).is_err());
        assert!(Skeleton::new(vec!["a".into(), "a".into()], vec![0, 0], vec![1.0; 2]).is_err());
        assert!(Skeleton::new(names(3), vec![0, 0, 1], vec![1.0; 3]).is_ok());
    }
}
