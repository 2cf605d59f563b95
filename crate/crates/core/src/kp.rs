//! Kinematic phrases: signed per-frame indicators of objective motion facts.
//!
//! Each phrase evaluates an extraction function `f_j` on joint positions
//! (a velocity component, a relative height, or the rate of change of a
//! distance), applies a dead-zone and is then reported either as `sign(f)`
//! or as the differentiable `tanh(f / tau)`.

use std::path::Path;

use diffnet::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{write_file, Error, Result};
use crate::motion::{MotionSequence, Skeleton, ROOT};

pub const DEFAULT_VELOCITY_DEAD_ZONE: f64 = 0.05;
pub const DEFAULT_POSITION_DEAD_ZONE: f64 = 0.02;
const DISTANCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhraseKind {
    /// Velocity of `joints[0]` (minus `joints[1]` when present) along `axis`, m/s.
    JointVelocityAxis,
    /// Position of `joints[0]` relative to `joints[1]` along `axis`, m.
    RelativePositionAxis,
    /// Rate of change of the distance between `joints[0]` and `joints[1]`, m/s.
    PairDistanceRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub name: String,
    pub kind: PhraseKind,
    pub joints: Vec<usize>,
    pub axis: Option<usize>,
    pub dead_zone: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KpCatalog {
    pub n_joints: usize,
    pub phrases: Vec<Phrase>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeadZones {
    pub velocity: f64,
    pub position: f64,
}

impl Default for DeadZones {
    fn default() -> Self {
        Self {
            velocity: DEFAULT_VELOCITY_DEAD_ZONE,
            position: DEFAULT_POSITION_DEAD_ZONE,
        }
    }
}

const AXES: [&str; 3] = ["x", "y", "z"];

pub fn default_catalog(skeleton: &Skeleton) -> KpCatalog {
    default_catalog_with(skeleton, DeadZones::default())
}

/// Root velocity per axis, per-axis velocity and height of every other joint
/// relative to the root, and distance rates (hand-hand and hand-root when
/// both hands exist, otherwise every joint against the root).
pub fn default_catalog_with(skeleton: &Skeleton, dz: DeadZones) -> KpCatalog {
    let names = &skeleton.joint_names;
    let n = skeleton.n_joints();
    let mut phrases = Vec::new();
    for (a, ax) in AXES.iter().enumerate() {
        phrases.push(Phrase {
            name: format!("{}.vel.{ax}", names[ROOT]),
            kind: PhraseKind::JointVelocityAxis,
            joints: vec![ROOT],
            axis: Some(a),
            dead_zone: dz.velocity,
        });
    }
    for j in (0..n).filter(|&j| j != ROOT) {
        for (a, ax) in AXES.iter().enumerate() {
            phrases.push(Phrase {
                name: format!("{}.rel_vel.{ax}", names[j]),
                kind: PhraseKind::JointVelocityAxis,
                joints: vec![j, ROOT],
                axis: Some(a),
                dead_zone: dz.velocity,
            });
        }
    }
    for j in (0..n).filter(|&j| j != ROOT) {
        phrases.push(Phrase {
            name: format!("{}.rel_pos.z", names[j]),
            kind: PhraseKind::RelativePositionAxis,
            joints: vec![j, ROOT],
            axis: Some(2),
            dead_zone: dz.position,
        });
    }
    let pairs: Vec<(usize, usize)> = match (skeleton.index_of("left_hand"), skeleton.index_of("right_hand")) {
        (Some(l), Some(r)) => vec![(l, r), (l, ROOT), (r, ROOT)],
        _ => (0..n).filter(|&j| j != ROOT).map(|j| (j, ROOT)).collect(),
    };
    for (a, b) in pairs {
        phrases.push(Phrase {
            name: format!("{}~{}.dist_rate", names[a], names[b]),
            kind: PhraseKind::PairDistanceRate,
            joints: vec![a, b],
            axis: None,
            dead_zone: dz.velocity,
        });
    }
    KpCatalog { n_joints: n, phrases }
}

impl KpCatalog {
    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.phrases.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.phrases.iter().position(|p| p.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phrases.is_empty() {
            return Err(Error::validation("catalog must contain at least one phrase"));
        }
        for (i, p) in self.phrases.iter().enumerate() {
            if let Some(&j) = p.joints.iter().find(|&&j| j >= self.n_joints) {
                return Err(Error::validation(format!(
                    "phrase {} references joint {j} but the skeleton has {}",
                    p.name, self.n_joints
                )));
            }
            let ok = match p.kind {
                PhraseKind::JointVelocityAxis => matches!(p.joints.len(), 1 | 2) && p.axis.is_some_and(|a| a < 3),
                PhraseKind::RelativePositionAxis => p.joints.len() == 2 && p.axis.is_some_and(|a| a < 3),
                PhraseKind::PairDistanceRate => p.joints.len() == 2 && p.axis.is_none() && p.joints[0] != p.joints[1],
            };
            if !ok {
                return Err(Error::validation(format!("phrase {} has an invalid descriptor", p.name)));
            }
            if !(p.dead_zone >= 0.0 && p.dead_zone.is_finite()) {
                return Err(Error::validation(format!("phrase {} has an invalid dead-zone", p.name)));
            }
            for q in &self.phrases[..i] {
                if q.name == p.name || (q.kind == p.kind && q.joints == p.joints && q.axis == p.axis) {
                    return Err(Error::validation(format!("duplicate phrase {}", p.name)));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("catalog encoding: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: KpCatalog = toml::from_str(text)
            .map_err(|e| Error::parse(e.span().map(|s| s.start).unwrap_or(0), format!("catalog: {}", e.message())))?;
        c.validate()?;
        Ok(c)
    }

    fn check_motion(&self, motion: &MotionSequence) -> Result<()> {
        if motion.n_joints() != self.n_joints {
            return Err(Error::validation(format!(
                "catalog is bound to {} joints but the motion has {}",
                self.n_joints,
                motion.n_joints()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KpMode {
    Hard,
    Smooth { tau: f64 },
}

/// `[frames, n_kp]` phrase values.
#[derive(Clone, Debug, PartialEq)]
pub struct KpSequence {
    pub values: Tensor,
    pub mode: KpMode,
}

impl KpSequence {
    pub fn n_frames(&self) -> usize {
        self.values.rows()
    }

    pub fn n_kp(&self) -> usize {
        self.values.cols()
    }

    /// Frame-major CSV with one column per phrase.
    pub fn to_csv(&self, catalog: &KpCatalog) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["frame".to_string()];
        header.extend(catalog.names().iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for t in 0..self.n_frames() {
            let mut row = vec![t.to_string()];
            row.extend(self.values.row_slice(t).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::validation(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, catalog: &KpCatalog, path: &Path) -> Result<()> {
        write_file(path, self.to_csv(catalog)?.as_bytes())
    }
}

/// Selection matrices mapping flattened `[joints * 3]` positions to the
/// linear parts of the catalog.
struct Plan {
    vel: (Vec<usize>, Tensor),
    pos: (Vec<usize>, Tensor),
    dist: (Vec<usize>, Tensor, Tensor),
    dead_zones: Vec<f64>,
}

impl Plan {
    fn new(catalog: &KpCatalog) -> Self {
        let width = catalog.n_joints * 3;
        let pick = |kind: PhraseKind| -> Vec<usize> {
            (0..catalog.len()).filter(|&i| catalog.phrases[i].kind == kind).collect()
        };
        let linear = |idx: &[usize]| -> Tensor {
            let mut s = Tensor::zeros(&[width, idx.len()]);
            for (c, &i) in idx.iter().enumerate() {
                let p = &catalog.phrases[i];
                let axis = p.axis.expect("validated");
                s.data_mut()[(3 * p.joints[0] + axis) * idx.len() + c] += 1.0;
                if let Some(&r) = p.joints.get(1) {
                    s.data_mut()[(3 * r + axis) * idx.len() + c] -= 1.0;
                }
            }
            s
        };
        let vel_idx = pick(PhraseKind::JointVelocityAxis);
        let pos_idx = pick(PhraseKind::RelativePositionAxis);
        let dist_idx = pick(PhraseKind::PairDistanceRate);
        let np = dist_idx.len();
        let mut diff = Tensor::zeros(&[width, 3 * np]);
        let mut group = Tensor::zeros(&[3 * np, np]);
        for (k, &i) in dist_idx.iter().enumerate() {
            let p = &catalog.phrases[i];
            for ax in 0..3 {
                diff.data_mut()[(3 * p.joints[0] + ax) * 3 * np + 3 * k + ax] += 1.0;
                diff.data_mut()[(3 * p.joints[1] + ax) * 3 * np + 3 * k + ax] -= 1.0;
                group.data_mut()[(3 * k + ax) * np + k] = 1.0;
            }
        }
        Self {
            vel: (vel_idx.clone(), linear(&vel_idx)),
            pos: (pos_idx.clone(), linear(&pos_idx)),
            dist: (dist_idx, diff, group),
            dead_zones: catalog.phrases.iter().map(|p| p.dead_zone).collect(),
        }
    }
}

/// Raw (dead-zoned) phrase values on the graph. `positions` is
/// `[frames, joints * 3]`; the result is `[frames, n_kp]`.
pub fn raw_graph(g: &mut Graph, positions: Var, catalog: &KpCatalog, fps: f64) -> Result<Var> {
    let shape = g.shape(positions).to_vec();
    if shape.len() != 2 || shape[1] != catalog.n_joints * 3 {
        return Err(Error::validation(format!(
            "positions shape {shape:?} does not match a {}-joint catalog",
            catalog.n_joints
        )));
    }
    if shape[0] < 2 {
        return Err(Error::validation("phrase extraction needs at least 2 frames"));
    }
    let plan = Plan::new(catalog);
    let mut blocks = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    if !plan.vel.0.is_empty() {
        let s = g.constant(plan.vel.1.clone());
        let p = g.matmul(positions, s)?;
        blocks.push(g.diff_rows(p, fps)?);
        order.extend(&plan.vel.0);
    }
    if !plan.pos.0.is_empty() {
        let s = g.constant(plan.pos.1.clone());
        blocks.push(g.matmul(positions, s)?);
        order.extend(&plan.pos.0);
    }
    if !plan.dist.0.is_empty() {
        let s = g.constant(plan.dist.1.clone());
        let d = g.matmul(positions, s)?;
        let sq = g.square(d);
        let grp = g.constant(plan.dist.2.clone());
        let d2 = g.matmul(sq, grp)?;
        let d2 = g.add_scalar(d2, DISTANCE_EPS);
        let dist = g.sqrt(d2);
        blocks.push(g.diff_rows(dist, fps)?);
        order.extend(&plan.dist.0);
    }
    let all = if blocks.len() == 1 {
        blocks[0]
    } else {
        g.concat(&blocks, 1)?
    };
    // `order[c]` is the catalog index of column `c`; invert it.
    let mut cols = vec![0; order.len()];
    for (c, &i) in order.iter().enumerate() {
        cols[i] = c;
    }
    let sorted = g.select_cols(all, &cols)?;
    Ok(g.dead_zone(sorted, &plan.dead_zones)?)
}

/// `tanh(raw / tau)` on the graph.
pub fn smooth_graph(g: &mut Graph, positions: Var, catalog: &KpCatalog, fps: f64, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let raw = raw_graph(g, positions, catalog, fps)?;
    let scaled = g.scale(raw, 1.0 / tau);
    Ok(g.tanh(scaled))
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn extract_raw(motion: &MotionSequence, catalog: &KpCatalog) -> Result<Tensor> {
    catalog.check_motion(motion)?;
    let mut g = Graph::new();
    let p = g.constant(motion.to_tensor());
    let raw = raw_graph(&mut g, p, catalog, motion.fps)?;
    Ok(g.value(raw).clone())
}

pub fn extract_hard(motion: &MotionSequence, catalog: &KpCatalog) -> Result<KpSequence> {
    let raw = extract_raw(motion, catalog)?;
    Ok(KpSequence {
        values: raw.map(sign),
        mode: KpMode::Hard,
    })
}

pub fn extract_smooth(motion: &MotionSequence, catalog: &KpCatalog, tau: f64) -> Result<KpSequence> {
    check_tau(tau)?;
    let raw = extract_raw(motion, catalog)?;
    Ok(KpSequence {
        values: raw.map(|v| (v / tau).tanh()),
        mode: KpMode::Smooth { tau },
    })
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_joint() -> Skeleton {
        Skeleton::new(vec!["root".into(), "head".into()], vec![0, 0], vec![0.95, 0.6]).unwrap()
    }

    #[test]
    fn catalog_sizes() {
        assert_eq!(default_catalog(&Skeleton::standard()).len(), 22);
        assert_eq!(default_catalog(&two_joint()).len(), 8);
        assert_eq!(default_catalog(&Skeleton::standard()), default_catalog(&Skeleton::standard()));
        default_catalog(&Skeleton::standard()).validate().unwrap();
    }

    #[test]
    fn catalog_toml_round_trip() {
        let c = default_catalog(&Skeleton::standard());
        assert_eq!(KpCatalog::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn rising_joint_and_static_motion() {
        let sk = two_joint();
        let cat = default_catalog(&sk);
        // Head rising at 1 m/s relative to a static root, 20 fps.
        let frames: Vec<f64> = (0..6)
            .flat_map(|t| vec![0.0, 0.0, 0.95, 0.0, 0.0, 1.55 + t as f64 / 20.0])
            .collect();
        let m = MotionSequence::new(sk.clone(), 20.0, frames).unwrap();
        let raw = extract_raw(&m, &cat).unwrap();
        let k = cat.index_of("head.rel_vel.z").unwrap();
        for t in 0..6 {
            assert!((raw.at(t, k) - 0.95).abs() < 1e-9);
        }
        let hard = extract_hard(&m, &cat).unwrap();
        assert_eq!(hard.values.at(3, k), 1.0);
        let still = MotionSequence::new(sk, 20.0, [0.0, 0.0, 0.95, 0.0, 0.0, 1.55].repeat(4)).unwrap();
        let hard = extract_hard(&still, &cat).unwrap();
        let pos = cat.index_of("head.rel_pos.z").unwrap();
        for t in 0..4 {
            for j in 0..cat.len() {
                let expect = if j == pos { 1.0 } else { 0.0 };
                assert_eq!(hard.values.at(t, j), expect);
            }
        }
    }

    #[test]
    fn relative_height_subtracts_dead_zone() {
        let sk = two_joint();
        let cat = default_catalog(&sk);
        let m = MotionSequence::new(sk, 20.0, [0.0, 0.0, 1.0, 0.0, 0.0, 1.3].repeat(2)).unwrap();
        let raw = extract_raw(&m, &cat).unwrap();
        assert!((raw.at(0, cat.index_of("head.rel_pos.z").unwrap()) - 0.28).abs() < 1e-12);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let sk = two_joint();
        let cat = default_catalog(&sk);
        let m = MotionSequence::new(sk, 20.0, [0.0, 0.0, 1.0, 0.0, 0.0, 1.3].repeat(3)).unwrap();
        let csv = extract_hard(&m, &cat).unwrap().to_csv(&cat).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("frame,root.vel.x"));
    }

    #[test]
    fn rejects_mismatched_skeleton() {
        let cat = default_catalog(&Skeleton::standard());
        let m = MotionSequence::new(two_joint(), 20.0, vec![0.0; 12]).unwrap();
        assert!(extract_raw(&m, &cat).is_err());
        assert!(extract_smooth(&m, &default_catalog(&two_joint()), 0.0).is_err());
    }
}
