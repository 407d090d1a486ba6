//! Shared domain types: the closed affordance vocabulary, instructions,
//! object registries for labeled synthetic scenes, ground-truth motion
//! programs, and per-query displacement sequences.

use crate::geometry::{Point3, QuerySet, RigidTransform, ScenePointCloud};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown affordance verb '{0}'")]
    UnknownAffordance(String),
    #[error("non-finite displacement value")]
    NonFiniteDisplacement,
    #[error("displacement query count {steps} does not match role mask {mask}")]
    MaskMismatch { steps: usize, mask: usize },
    #[error("frame timestamps must be strictly increasing: {0:?}")]
    NonMonotonicTimestamps(Vec<f64>),
    #[error("expected exactly 4 frames per clip, got {0}")]
    WrongFrameCount(usize),
    #[error("duplicate object name '{0}' in registry")]
    DuplicateObjectName(String),
    #[error("timestamp {t} outside motion program duration {duration}")]
    TimestampOutOfRange { t: f64, duration: f64 },
}

/// The closed ten-element affordance vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Affordance {
    Open,
    Close,
    Pickup,
    Place,
    Push,
    Pull,
    Pour,
    Press,
    HangOn,
    Cut,
}

impl Affordance {
    pub const ALL: [Affordance; 10] = [
        Affordance::Open,
        Affordance::Close,
        Affordance::Pickup,
        Affordance::Place,
        Affordance::Push,
        Affordance::Pull,
        Affordance::Pour,
        Affordance::Press,
        Affordance::HangOn,
        Affordance::Cut,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Affordance::Open => "open",
            Affordance::Close => "close",
            Affordance::Pickup => "pickup",
            Affordance::Place => "place",
            Affordance::Push => "push",
            Affordance::Pull => "pull",
            Affordance::Pour => "pour",
            Affordance::Press => "press",
            Affordance::HangOn => "hang-on",
            Affordance::Cut => "cut",
        }
    }

    pub fn parse(s: &str) -> Result<Affordance, SceneError> {
        Affordance::ALL
            .iter()
            .find(|a| a.as_str() == s)
            .copied()
            .ok_or_else(|| SceneError::UnknownAffordance(s.to_string()))
    }

    /// Object-to-object interactions: both roles are scene objects.
    pub fn is_o2o(&self) -> bool {
        matches!(self, Affordance::Pour | Affordance::Cut | Affordance::HangOn)
    }
}

/// Name the executor uses in single-object instructions.
pub const EXECUTOR_DESC: &str = "executor";

/// A templated language instruction over the closed vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub action: Affordance,
    pub tool_desc: String,
    pub target_desc: String,
    pub raw_text: String,
}

impl Instruction {
    pub fn new(action: Affordance, tool_desc: &str, target_desc: &str) -> Instruction {
        let raw_text = if tool_desc == EXECUTOR_DESC {
            format!("{} the {}", action.as_str(), target_desc)
        } else {
            format!("{} the {} with the {}", action.as_str(), target_desc, tool_desc)
        };
        Instruction {
            action,
            tool_desc: tool_desc.to_string(),
            target_desc: target_desc.to_string(),
            raw_text,
        }
    }
}

/// Per-query 3D step displacements, shape (n_q, m, 3) row-major, plus the
/// tool/target role mask (1 = tool, 0 = target).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementSequence {
    steps: Vec<f64>,
    n_q: usize,
    m: usize,
    role_mask: Vec<u8>,
}

impl DisplacementSequence {
    pub fn new(
        steps: Vec<f64>,
        n_q: usize,
        m: usize,
        role_mask: Vec<u8>,
    ) -> Result<DisplacementSequence, SceneError> {
        if steps.len() != n_q * m * 3 || role_mask.len() != n_q {
            return Err(SceneError::MaskMismatch { steps: steps.len() / (m * 3).max(1), mask: role_mask.len() });
        }
        if steps.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFiniteDisplacement);
        }
        Ok(DisplacementSequence { steps, n_q, m, role_mask })
    }

    /// Difference consecutive keyframe positions: frames[t][i] is query i at
    /// frame t. Steps are q_i^t - q_i^{t-1}.
    pub fn from_keyframes(
        frames: &[Vec<Point3>],
        role_mask: Vec<u8>,
    ) -> Result<DisplacementSequence, SceneError> {
        let m = frames.len() - 1;
        let n_q = frames[0].len();
        let mut steps = Vec::with_capacity(n_q * m * 3);
        for i in 0..n_q {
            for t in 1..frames.len() {
                let d = frames[t][i].sub(&frames[t - 1][i]);
                steps.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }
        DisplacementSequence::new(steps, n_q, m, role_mask)
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn role_mask(&self) -> &[u8] {
        &self.role_mask
    }

    pub fn step(&self, query: usize, t: usize) -> Point3 {
        let base = (query * self.m + t) * 3;
        Point3::new(self.steps[base], self.steps[base + 1], self.steps[base + 2])
    }

    /// Cumulative displacements s_i^t relative to the first frame, same
    /// (n_q, m, 3) layout.
    pub fn trajectories(&self) -> Vec<f64> {
        let mut out = self.steps.clone();
        for i in 0..self.n_q {
            for t in 1..self.m {
                for c in 0..3 {
                    let idx = (i * self.m + t) * 3 + c;
                    let prev = (i * self.m + t - 1) * 3 + c;
                    out[idx] += out[prev];
                }
            }
        }
        out
    }

    /// Mean per-step displacement norm of query i.
    pub fn mean_step_norm(&self, query: usize) -> f64 {
        (0..self.m).map(|t| self.step(query, t).norm()).sum::<f64>() / self.m as f64
    }

    /// Mean step norm over all queries and steps.
    pub fn overall_mean_step_norm(&self) -> f64 {
        (0..self.n_q).map(|i| self.mean_step_norm(i)).sum::<f64>() / self.n_q as f64
    }
}

/// One object part; part ids are indices into `ObjectInfo::parts`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartInfo {
    pub name: String,
}

/// Revolute articulation of one object: `moving_parts` rotate about the axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HingeInfo {
    pub axis: Point3,
    pub pivot: Point3,
    pub moving_parts: Vec<i32>,
    pub min_angle: f64,
    pub max_angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInfo {
    pub name: String,
    pub parts: Vec<PartInfo>,
    pub graspable: bool,
    pub hinge: Option<HingeInfo>,
}

impl ObjectInfo {
    pub fn part_id(&self, part: &str) -> Option<i32> {
        self.parts.iter().position(|p| p.name == part).map(|i| i as i32)
    }
}

/// Registry of scene objects; object ids are indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRegistry {
    pub objects: Vec<ObjectInfo>,
}

impl ObjectRegistry {
    pub fn new(objects: Vec<ObjectInfo>) -> Result<ObjectRegistry, SceneError> {
        for (i, a) in objects.iter().enumerate() {
            if objects[..i].iter().any(|b| b.name == a.name) {
                return Err(SceneError::DuplicateObjectName(a.name.clone()));
            }
        }
        Ok(ObjectRegistry { objects })
    }

    pub fn by_name(&self, name: &str) -> Option<(i32, &ObjectInfo)> {
        self.objects
            .iter()
            .enumerate()
            .find(|(_, o)| o.name == name)
            .map(|(i, o)| (i as i32, o))
    }

    pub fn get(&self, id: i32) -> Option<&ObjectInfo> {
        self.objects.get(id as usize)
    }

    pub fn names(&self) -> Vec<&str> {
        self.objects.iter().map(|o| o.name.as_str()).collect()
    }
}

/// Labels that follow a motion program's rigid motion. `part_id = None`
/// matches every part of the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyRef {
    pub object_id: i32,
    pub part_id: Option<i32>,
}

impl BodyRef {
    pub fn matches(&self, label: (i32, i32)) -> bool {
        label.0 == self.object_id && self.part_id.map_or(true, |p| p == label.1)
    }
}

/// Time-parameterized rigid motion, linear in t over the duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    /// Total translation `delta` reached at t = duration.
    Translate { delta: Point3 },
    /// Rotation about (axis through pivot), reaching `total_angle` radians
    /// at t = duration.
    Revolute { axis: Point3, pivot: Point3, total_angle: f64 },
}

/// Ground-truth generator for one clip: which labels move and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    pub kind: Affordance,
    pub duration: f64,
    pub movers: Vec<BodyRef>,
    pub motion: Motion,
}

impl MotionProgram {
    /// World-frame motion of the moving set at time t, relative to t = 0.
    pub fn pose_at(&self, t: f64) -> Result<RigidTransform, SceneError> {
        if t < 0.0 || t > self.duration + 1e-9 {
            return Err(SceneError::TimestampOutOfRange { t, duration: self.duration });
        }
        let frac = t / self.duration;
        Ok(match &self.motion {
            Motion::Translate { delta } => RigidTransform::translation_only(delta.scale(frac)),
            Motion::Revolute { axis, pivot, total_angle } => {
                RigidTransform::about_axis(*axis, *pivot, total_angle * frac)
            }
        })
    }

    pub fn moves(&self, label: (i32, i32)) -> bool {
        self.movers.iter().any(|m| m.matches(label))
    }
}

/// Sample metadata: provenance of one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub kind: Affordance,
    pub scene_id: u64,
    pub clip_index: usize,
    pub timestamps: Vec<f64>,
}

impl SampleMeta {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.timestamps.len() != 4 {
            return Err(SceneError::WrongFrameCount(self.timestamps.len()));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SceneError::NonMonotonicTimestamps(self.timestamps.clone()));
        }
        Ok(())
    }
}

/// One training/inference unit: scene, queries, instruction, ground-truth
/// flow, and metadata.
#[derive(Debug, Clone)]
pub struct AffordanceSample {
    pub scene: ScenePointCloud,
    pub queries: QuerySet,
    pub instruction: Instruction,
    pub gt_flow: DisplacementSequence,
    pub meta: SampleMeta,
}

impl AffordanceSample {
    pub fn validate(&self) -> Result<(), SceneError> {
        self.meta.validate()?;
        if self.gt_flow.n_q() != self.queries.len() {
            return Err(SceneError::MaskMismatch {
                steps: self.gt_flow.n_q(),
                mask: self.queries.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_round_trip() {
        for a in Affordance::ALL {
            assert_eq!(Affordance::parse(a.as_str()).unwrap(), a);
        }
        assert!(Affordance::parse("levitate").is_err());
    }

    #[test]
    fn instruction_templates() {
        let single = Instruction::new(Affordance::Open, EXECUTOR_DESC, "oven");
        assert_eq!(single.raw_text, "open the oven");
        let o2o = Instruction::new(Affordance::Cut, "knife", "apple");
        assert_eq!(o2o.raw_text, "cut the apple with the knife");
    }

    #[test]
    fn displacement_from_keyframes_reconstructs() {
        let frames = vec![
            vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)],
            vec![Point3::new(0.1, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)],
            vec![Point3::new(0.2, 0.1, 0.0), Point3::new(1.0, 0.0, 0.0)],
            vec![Point3::new(0.3, 0.1, 0.2), Point3::new(1.0, 0.0, 0.0)],
        ];
        let seq = DisplacementSequence::from_keyframes(&frames, vec![1, 0]).unwrap();
        assert_eq!(seq.m(), 3);
        // integration consistency: cumulative steps reproduce keyframes
        let traj = seq.trajectories();
        for i in 0..2 {
            for t in 0..3 {
                let expect = frames[t + 1][i].sub(&frames[0][i]);
                let base = (i * 3 + t) * 3;
                assert!((traj[base] - expect.x).abs() < 1e-9);
                assert!((traj[base + 1] - expect.y).abs() < 1e-9);
                assert!((traj[base + 2] - expect.z).abs() < 1e-9);
            }
        }
        // static query has zero mean step norm
        assert!(seq.mean_step_norm(1) < 1e-12);
    }

    #[test]
    fn registry_rejects_duplicate_names() {
        let o = ObjectInfo { name: "cup".into(), parts: vec![], graspable: true, hinge: None };
        assert!(ObjectRegistry::new(vec![o.clone(), o]).is_err());
    }

    #[test]
    fn motion_program_bounds() {
        let prog = MotionProgram {
            kind: Affordance::Pickup,
            duration: 2.0,
            movers: vec![BodyRef { object_id: 0, part_id: None }],
            motion: Motion::Translate { delta: Point3::new(0.0, 0.0, 0.2) },
        };
        assert!(prog.pose_at(1.0).is_ok());
        assert!(prog.pose_at(2.5).is_err());
        let half = prog.pose_at(1.0).unwrap();
        assert!((half.translation().z - 0.1).abs() < 1e-12);
    }

    #[test]
    fn meta_timestamp_validation() {
        let mut meta = SampleMeta {
            kind: Affordance::Open,
            scene_id: 0,
            clip_index: 0,
            timestamps: vec![0.0, 0.5, 1.0, 1.5],
        };
        assert!(meta.validate().is_ok());
        meta.timestamps = vec![0.0, 0.5, 0.5, 1.5];
        assert!(meta.validate().is_err());
        meta.timestamps = vec![0.0, 0.5, 1.0];
        assert!(meta.validate().is_err());
    }
}
