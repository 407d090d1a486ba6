//! Kinematic execution simulator: rigid bodies with revolute constraints, a
//! gripper with rigid attachment, flow-to-action conversion via weighted
//! rigid fitting, rollout modes, and per-kind success predicates.

use crate::geometry::{
    crop_interaction_region, fit_rigid, GeometryError, Point3, QuerySet, RigidTransform,
    ScenePointCloud,
};
use crate::grounding::{
    ground, GroundingConfig, GroundingError, GroundingRequest, GroundingTables,
};
use crate::model::{Model, ModelError};
use crate::rng::Rng;
use crate::scene::{
    Affordance, DisplacementSequence, HingeInfo, ObjectRegistry, SceneError, EXECUTOR_DESC,
};
use crate::synth::{roll_out_motion, GeneratedScene, SynthError};
use crate::train::motion_weights;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("degenerate rigid set: {0}")]
    DegenerateFit(String),
    #[error("no body carries grasp label ({0}, {1:?})")]
    NoGraspBody(i32, Option<i32>),
    #[error("body '{0}' not present in world")]
    UnknownBody(String),
    #[error("rollout mode '{0}' requires a model")]
    NeedModel(&'static str),
    #[error("non-positive success threshold {value} for {what}")]
    BadThreshold { what: &'static str, value: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

// ---------------------------------------------------------------------------
// world

/// One rigid unit: rest-frame surface points plus a current pose. A hinged
/// body's pose is always a rotation about its hinge from the rest placement.
#[derive(Debug, Clone)]
pub struct SimBody {
    pub name: String,
    pub object_id: i32,
    rest_points: Vec<Point3>,
    pub labels: Vec<(i32, i32)>,
    pub colors: Vec<[f64; 3]>,
    pub pose: RigidTransform,
    pub hinge: Option<HingeInfo>,
    /// Absolute hinge angle the rest points were generated at.
    pub initial_angle: f64,
    /// Current hinge angle relative to the rest placement.
    pub angle: f64,
}

impl SimBody {
    pub fn points(&self) -> Vec<Point3> {
        self.rest_points.iter().map(|p| self.pose.apply(p)).collect()
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = Point3::ZERO;
        for p in &self.rest_points {
            c = c.add(&self.pose.apply(p));
        }
        c.scale(1.0 / self.rest_points.len() as f64)
    }

    fn rest_centroid(&self) -> Point3 {
        let mut c = Point3::ZERO;
        for p in &self.rest_points {
            c = c.add(p);
        }
        c.scale(1.0 / self.rest_points.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    pub bodies: Vec<SimBody>,
    pub registry: ObjectRegistry,
    pub gripper_pose: RigidTransform,
    /// Body rigidly attached to the gripper (grasping is bypassed).
    pub attached: Option<usize>,
    /// Body standing in for the robot gripper itself, if the scene has one.
    pub executor: Option<usize>,
    pub interaction_center: Point3,
    pub step_index: usize,
    /// Set when a joint limit clamped the commanded motion.
    pub limit_hit: bool,
    /// Constraint-projection residual of the last step, meters.
    pub last_residual: f64,
}

fn find_grasp_body(bodies: &[SimBody], object: i32, part: Option<i32>) -> Option<usize> {
    bodies.iter().position(|b| {
        b.name != EXECUTOR_DESC
            && b.object_id == object
            && match part {
                None => true,
                Some(p) => b.labels.iter().any(|&l| l == (object, p)),
            }
    })
}

impl SimWorld {
    pub fn from_scene(scene: &GeneratedScene) -> Result<SimWorld, SimError> {
        let bodies: Vec<SimBody> = scene
            .bodies
            .iter()
            .map(|s| SimBody {
                name: s.name.clone(),
                object_id: s.object_id,
                rest_points: s.points.clone(),
                labels: s.labels.clone(),
                colors: s.colors.clone(),
                pose: RigidTransform::identity(),
                hinge: s.hinge.clone(),
                initial_angle: s.initial_angle,
                angle: 0.0,
            })
            .collect();
        let attached = find_grasp_body(&bodies, scene.grasp_object, scene.grasp_part)
            .ok_or(SimError::NoGraspBody(scene.grasp_object, scene.grasp_part))?;
        let executor = bodies.iter().position(|b| b.name == EXECUTOR_DESC);
        Ok(SimWorld {
            bodies,
            registry: scene.registry.clone(),
            gripper_pose: RigidTransform::identity(),
            attached: Some(attached),
            executor,
            interaction_center: scene.interaction_center,
            step_index: 0,
            limit_hit: false,
            last_residual: 0.0,
        })
    }

    pub fn body(&self, name: &str) -> Result<&SimBody, SimError> {
        self.bodies
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| SimError::UnknownBody(name.to_string()))
    }
}

/// Surface points of all bodies at their current poses, with labels.
/// `arm_mask` drops gripper/executor points; `noise` adds iid Gaussian
/// perturbation per coordinate (stand-in for depth-projection noise).
pub fn observe(
    world: &SimWorld,
    arm_mask: bool,
    noise: f64,
    rng: &mut Rng,
) -> Result<ScenePointCloud, SimError> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for (i, b) in world.bodies.iter().enumerate() {
        if arm_mask && Some(i) == world.executor {
            continue;
        }
        points.extend(b.points());
        colors.extend_from_slice(&b.colors);
        labels.extend_from_slice(&b.labels);
    }
    if noise > 0.0 {
        for p in points.iter_mut() {
            *p = p.add(&Point3::new(
                noise * rng.normal(),
                noise * rng.normal(),
                noise * rng.normal(),
            ));
        }
    }
    Ok(ScenePointCloud::new(points, colors, labels)?)
}

/// Signed angle from `u` to `v` around unit axis `a`, with both projected
/// into the plane normal to `a`.
fn angle_about(a: &Point3, u: &Point3, v: &Point3) -> f64 {
    let w0 = u.sub(&a.scale(a.dot(u)));
    let w1 = v.sub(&a.scale(a.dot(v)));
    if w0.norm() < 1e-9 || w1.norm() < 1e-9 {
        return 0.0;
    }
    w0.cross(&w1).dot(a).atan2(w0.dot(&w1))
}

/// Compose `action` onto the gripper; the attached body follows rigidly,
/// with hinged bodies projected back onto their constraint manifold and
/// clamped at joint limits.
pub fn step_world(world: &mut SimWorld, action: &RigidTransform) {
    world.gripper_pose = action.compose(&world.gripper_pose);
    if let Some(e) = world.executor {
        world.bodies[e].pose = action.compose(&world.bodies[e].pose);
    }
    world.last_residual = 0.0;
    if let Some(i) = world.attached {
        let candidate = action.compose(&world.bodies[i].pose);
        let hinged = world.bodies[i].hinge.clone();
        match hinged {
            None => world.bodies[i].pose = candidate,
            Some(h) => {
                let axis = h.axis.normalized();
                let anchor = world.bodies[i].rest_centroid();
                let cur = world.bodies[i].pose.apply(&anchor);
                let cand = candidate.apply(&anchor);
                let d_angle = angle_about(
                    &axis,
                    &cur.sub(&h.pivot),
                    &cand.sub(&h.pivot),
                );
                let mut delta = world.bodies[i].angle + d_angle;
                let abs = world.bodies[i].initial_angle + delta;
                let clamped = abs.clamp(h.min_angle, h.max_angle);
                if (clamped - abs).abs() > 1e-12 {
                    world.limit_hit = true;
                    delta = clamped - world.bodies[i].initial_angle;
                }
                let new_pose = RigidTransform::about_axis(axis, h.pivot, delta);
                world.last_residual = candidate.apply(&anchor).dist(&new_pose.apply(&anchor));
                // keep the gripper rigid with the constrained body
                let correction = new_pose.compose(&candidate.invert());
                world.gripper_pose = correction.compose(&world.gripper_pose);
                if let Some(e) = world.executor {
                    world.bodies[e].pose = correction.compose(&world.bodies[e].pose);
                }
                world.bodies[i].pose = new_pose;
                world.bodies[i].angle = delta;
            }
        }
    }
    world.step_index += 1;
}

// ---------------------------------------------------------------------------
// flow -> action

/// Fit the rigid transform carrying the rigid-set queries from their current
/// positions to their positions after integrating `horizon` predicted steps,
/// weighted by motion weights.
pub fn flow_to_action(
    queries: &[Point3],
    flow: &DisplacementSequence,
    rigid_set: &[usize],
    horizon: usize,
) -> Result<RigidTransform, SimError> {
    assert_eq!(queries.len(), flow.n_q(), "flow_to_action: query count mismatch");
    assert!(horizon >= 1 && horizon <= flow.m(), "flow_to_action: bad horizon");
    let w_all = motion_weights(flow, 1e-3);
    let mut src = Vec::with_capacity(rigid_set.len());
    let mut dst = Vec::with_capacity(rigid_set.len());
    let mut w = Vec::with_capacity(rigid_set.len());
    for &i in rigid_set {
        let mut d = Point3::ZERO;
        for t in 0..horizon {
            d = d.add(&flow.step(i, t));
        }
        src.push(queries[i]);
        dst.push(queries[i].add(&d));
        w.push(w_all[i]);
    }
    fit_rigid(&src, &dst, Some(&w)).map_err(|e| SimError::DegenerateFit(e.to_string()))
}

// ---------------------------------------------------------------------------
// task specification and success predicates

/// Per-kind success rule with all reference quantities resolved at world
/// construction time.
#[derive(Debug, Clone)]
pub enum SuccessSpec {
    /// Body centroid z rose by at least `height` from `initial_z`.
    Lift { body: String, initial_z: f64, height: f64 },
    /// (Part) centroid within `radius` of `goal`.
    Reach { body: String, part: Option<i32>, goal: Point3, radius: f64 },
    /// Hinge angle delta reached `theta_goal` (signed, inclusive).
    Hinge { body: String, theta_goal: f64 },
    /// Body centroid moved at least `distance` along `dir` from `start`.
    Slide { body: String, start: Point3, dir: Point3, distance: f64 },
    /// Tool tilted at least `tilt` while its centroid sits above the target
    /// footprint disc.
    PourTilt { tool: String, tilt: f64, target_center: Point3, target_top_z: f64, footprint: f64 },
    /// Lowest blade point over the target footprint reached the target
    /// mid-height.
    CutDepth { tool: String, blade_part: i32, mid_z: f64, footprint_center: Point3, footprint: f64 },
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: Affordance,
    pub success: SuccessSpec,
    pub max_steps: usize,
}

/// Fraction of the demonstrated motion that must be realized.
const GOAL_FRACTION: f64 = 0.7;

impl TaskSpec {
    /// Derive thresholds from the scene's ground-truth motion program.
    pub fn for_scene(scene: &GeneratedScene) -> Result<TaskSpec, SimError> {
        let world = SimWorld::from_scene(scene)?;
        let grasped = &world.bodies[world.attached.unwrap()];
        let d = scene.duration;
        let rel = scene.program.pose_at(d)?.compose(&scene.program.pose_at(0.0)?.invert());
        let success = match scene.program.kind {
            Affordance::Pickup => {
                let c = grasped.rest_centroid();
                let height = GOAL_FRACTION * (rel.apply(&c).z - c.z);
                Self::positive("lift height", height)?;
                SuccessSpec::Lift { body: grasped.name.clone(), initial_z: c.z, height }
            }
            Affordance::Place => SuccessSpec::Reach {
                body: grasped.name.clone(),
                part: None,
                goal: rel.apply(&grasped.rest_centroid()),
                radius: 0.05,
            },
            Affordance::Open | Affordance::Close => {
                let total = match scene.program.motion {
                    crate::scene::Motion::Revolute { total_angle, .. } => total_angle,
                    _ => 0.0,
                };
                let theta_goal = GOAL_FRACTION * total;
                Self::positive("hinge angle", theta_goal.abs())?;
                SuccessSpec::Hinge { body: grasped.name.clone(), theta_goal }
            }
            Affordance::Push | Affordance::Pull | Affordance::Press => {
                let c = grasped.rest_centroid();
                let delta = rel.apply(&c).sub(&c);
                let distance = GOAL_FRACTION * delta.norm();
                Self::positive("travel distance", distance)?;
                SuccessSpec::Slide {
                    body: grasped.name.clone(),
                    start: c,
                    dir: delta.normalized(),
                    distance,
                }
            }
            Affordance::Pour => {
                let target = world.body(&scene.instruction.target_desc)?;
                let tc = target.rest_centroid();
                let footprint = target
                    .rest_points
                    .iter()
                    .map(|p| ((p.x - tc.x).powi(2) + (p.y - tc.y).powi(2)).sqrt())
                    .fold(0.0f64, f64::max);
                let top = target.rest_points.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
                let tilt = GOAL_FRACTION * rel.rotation_angle();
                Self::positive("tilt angle", tilt)?;
                SuccessSpec::PourTilt {
                    tool: grasped.name.clone(),
                    tilt,
                    target_center: tc,
                    target_top_z: top,
                    footprint,
                }
            }
            Affordance::Cut => {
                let target = world.body(&scene.instruction.target_desc)?;
                let tc = target.rest_centroid();
                let footprint = target
                    .rest_points
                    .iter()
                    .map(|p| ((p.x - tc.x).powi(2) + (p.y - tc.y).powi(2)).sqrt())
                    .fold(0.0f64, f64::max)
                    + 0.005;
                SuccessSpec::CutDepth {
                    tool: grasped.name.clone(),
                    blade_part: 0,
                    mid_z: tc.z,
                    footprint_center: tc,
                    footprint,
                }
            }
            Affordance::HangOn => {
                let part = scene.grasp_part.unwrap_or(0);
                let pts: Vec<&Point3> = grasped
                    .rest_points
                    .iter()
                    .zip(&grasped.labels)
                    .filter(|(_, &l)| l.1 == part)
                    .map(|(p, _)| p)
                    .collect();
                let mut c = Point3::ZERO;
                for p in &pts {
                    c = c.add(p);
                }
                let c = c.scale(1.0 / pts.len() as f64);
                SuccessSpec::Reach {
                    body: grasped.name.clone(),
                    part: Some(part),
                    goal: rel.apply(&c),
                    radius: 0.03,
                }
            }
        };
        Ok(TaskSpec { kind: scene.program.kind, success, max_steps: 24 })
    }

    fn positive(what: &'static str, value: f64) -> Result<(), SimError> {
        if value > 0.0 {
            Ok(())
        } else {
            Err(SimError::BadThreshold { what, value })
        }
    }
}

fn part_centroid(body: &SimBody, part: Option<i32>) -> Point3 {
    let mut c = Point3::ZERO;
    let mut n = 0usize;
    for (p, l) in body.points().iter().zip(&body.labels) {
        if part.is_none_or(|id| l.1 == id) {
            c = c.add(p);
            n += 1;
        }
    }
    c.scale(1.0 / n.max(1) as f64)
}

/// Evaluate the task predicate, returning the decision and the measured
/// quantity it was made on (meters or radians). Thresholds are inclusive.
pub fn success_check(task: &TaskSpec, world: &SimWorld) -> Result<(bool, f64), SimError> {
    Ok(match &task.success {
        SuccessSpec::Lift { body, initial_z, height } => {
            let lift = world.body(body)?.centroid().z - initial_z;
            (lift >= *height, lift)
        }
        SuccessSpec::Reach { body, part, goal, radius } => {
            let d = part_centroid(world.body(body)?, *part).dist(goal);
            (d <= *radius, d)
        }
        SuccessSpec::Hinge { body, theta_goal } => {
            let delta = world.body(body)?.angle;
            (delta * theta_goal.signum() >= theta_goal.abs(), delta)
        }
        SuccessSpec::Slide { body, start, dir, distance } => {
            let moved = world.body(body)?.centroid().sub(start).dot(dir);
            (moved >= *distance, moved)
        }
        SuccessSpec::PourTilt { tool, tilt, target_center, target_top_z, footprint } => {
            let b = world.body(tool)?;
            let angle = b.pose.rotation_angle();
            let c = b.centroid();
            let over = ((c.x - target_center.x).powi(2) + (c.y - target_center.y).powi(2)).sqrt()
                <= *footprint
                && c.z >= *target_top_z;
            (angle >= *tilt && over, angle)
        }
        SuccessSpec::CutDepth { tool, blade_part, mid_z, footprint_center, footprint } => {
            let b = world.body(tool)?;
            let mut low = f64::INFINITY;
            for (p, l) in b.points().iter().zip(&b.labels) {
                let in_fp = ((p.x - footprint_center.x).powi(2)
                    + (p.y - footprint_center.y).powi(2))
                .sqrt()
                    <= *footprint;
                if l.1 == *blade_part && in_fp {
                    low = low.min(p.z);
                }
            }
            if low.is_infinite() {
                (false, -1.0)
            } else {
                let depth = mid_z - low;
                (depth >= 0.0, depth)
            }
        }
    })
}

// ---------------------------------------------------------------------------
// rollout

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    ClosedLoop,
    OpenLoop,
    Oracle,
}

impl RolloutMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RolloutMode::ClosedLoop => "closed_loop",
            RolloutMode::OpenLoop => "open_loop",
            RolloutMode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<RolloutMode> {
        match s {
            "closed_loop" => Some(RolloutMode::ClosedLoop),
            "open_loop" => Some(RolloutMode::OpenLoop),
            "oracle" => Some(RolloutMode::Oracle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    Grounding(String),
    DegenerateFit(String),
    NonFiniteSample,
    Budget,
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub max_steps: usize,
    /// Observation noise sigma, meters.
    pub obs_noise: f64,
    /// Re-run the full grounding pipeline at every control step instead of
    /// only once at the start.
    pub reground_every_step: bool,
    /// Interaction-region crop applied to the conditioning cloud, meters.
    pub crop_radius: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { max_steps: 24, obs_noise: 0.0, reground_every_step: false, crop_radius: 0.65 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_used: usize,
    pub transforms: Vec<RigidTransform>,
    /// Per-step ADE of the sampled flow against the ground-truth program
    /// flow (diagnostic; empty in oracle mode).
    pub per_step_ade: Vec<f64>,
    pub measured: f64,
    pub failure: Option<FailureReason>,
    pub limit_hit: bool,
    pub grounding_recovery_used: bool,
}

impl RolloutResult {
    fn failed(reason: FailureReason, measured: f64) -> RolloutResult {
        RolloutResult {
            success: false,
            steps_used: 0,
            transforms: Vec::new(),
            per_step_ade: Vec::new(),
            measured,
            failure: Some(reason),
            limit_hit: false,
            grounding_recovery_used: false,
        }
    }
}

/// Seconds of motion one predicted step spans (training clip stride).
const STEP_SECONDS: f64 = 0.5;

struct GroundedQueries {
    tool_indices: Vec<usize>,
    target_indices: Vec<usize>,
    recovery_used: bool,
}

fn query_positions(obs: &ScenePointCloud, g: &GroundedQueries) -> (QuerySet, Vec<(i32, i32)>) {
    let set = QuerySet {
        tool: g.tool_indices.iter().map(|&i| obs.points[i]).collect(),
        target: g.target_indices.iter().map(|&i| obs.points[i]).collect(),
    };
    let labels = g
        .tool_indices
        .iter()
        .chain(&g.target_indices)
        .map(|&i| obs.labels[i])
        .collect();
    (set, labels)
}

fn ground_on(
    obs: &ScenePointCloud,
    scene: &GeneratedScene,
    seed: u64,
) -> Result<GroundedQueries, GroundingError> {
    let g = ground(
        &GroundingRequest {
            raw_text: &scene.instruction.raw_text,
            scene: obs,
            registry: &scene.registry,
        },
        &GroundingTables::default(),
        &GroundingConfig::default(),
        seed,
    )?;
    Ok(GroundedQueries {
        tool_indices: g.queries.tool_indices,
        target_indices: g.queries.target_indices,
        recovery_used: g.recovery_used,
    })
}

/// Ground-truth flow from the current query positions, assuming the world is
/// at program time `t0` and queries have tracked their physical points.
fn gt_flow_at(
    scene: &GeneratedScene,
    queries: &QuerySet,
    labels: &[(i32, i32)],
    t0: f64,
    m: usize,
) -> Result<DisplacementSequence, SimError> {
    let d = scene.duration;
    let mut ts = [0.0; 4];
    for (j, slot) in ts.iter_mut().enumerate().take(m + 1) {
        *slot = (t0 + j as f64 * STEP_SECONDS).min(d);
    }
    Ok(roll_out_motion(&scene.program, queries, labels, &ts)?)
}

/// Execute a full rollout in the requested mode. Task-level failures
/// (grounding, degenerate fit, budget) are reported in the result; only
/// programming/configuration errors surface as `Err`.
pub fn run_rollout(
    scene: &GeneratedScene,
    task: &TaskSpec,
    model: Option<&Model>,
    mode: RolloutMode,
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<RolloutResult, SimError> {
    if mode != RolloutMode::Oracle && model.is_none() {
        return Err(SimError::NeedModel(mode.as_str()));
    }
    let mut world = SimWorld::from_scene(scene)?;
    let mut rng = Rng::derive(seed, 0x4011);
    let obs = observe(&world, false, cfg.obs_noise, &mut rng)?;
    let mut grounded = match ground_on(&obs, scene, rng.next_u64()) {
        Ok(g) => g,
        Err(e) => return Ok(RolloutResult::failed(FailureReason::Grounding(e.to_string()), 0.0)),
    };
    let recovery_used = grounded.recovery_used;
    let n_tool = grounded.tool_indices.len();
    let rigid_set: Vec<usize> = (0..n_tool).collect();
    let mut transforms = Vec::new();
    let mut ades = Vec::new();

    let finish = |world: &SimWorld, steps: usize, transforms: Vec<RigidTransform>, ades: Vec<f64>| {
        let (success, measured) = success_check(task, world)?;
        Ok::<RolloutResult, SimError>(RolloutResult {
            success,
            steps_used: steps,
            transforms,
            per_step_ade: ades,
            measured,
            failure: if success { None } else { Some(FailureReason::Budget) },
            limit_hit: world.limit_hit,
            grounding_recovery_used: recovery_used,
        })
    };

    match mode {
        RolloutMode::Oracle | RolloutMode::OpenLoop => {
            // one flow up front, integrated without re-observation
            let (queries, labels) = query_positions(&obs, &grounded);
            let m;
            let flow = match mode {
                RolloutMode::Oracle => {
                    let d = scene.duration;
                    m = 3;
                    roll_out_motion(
                        &scene.program,
                        &queries,
                        &labels,
                        &[0.0, d / 3.0, 2.0 * d / 3.0, d],
                    )?
                }
                _ => {
                    let model = model.unwrap();
                    m = model.cfg.m;
                    let cropped =
                        crop_interaction_region(&obs, world.interaction_center, cfg.crop_radius)?;
                    let cond = model.condition(&cropped, &queries, &scene.instruction)?;
                    match model.sample_flow(&cond, queries.role_mask(), rng.next_u64()) {
                        Ok(f) => f,
                        Err(ModelError::NonFiniteSample { .. }) => {
                            return Ok(RolloutResult::failed(FailureReason::NonFiniteSample, 0.0))
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            };
            if mode == RolloutMode::OpenLoop {
                let gt = gt_flow_at(scene, &queries, &labels, 0.0, m)?;
                ades.push(crate::metrics::ade_fde(&flow, &gt).0);
            }
            let all = queries.all();
            let mut steps = 0;
            for t in 0..m.min(cfg.max_steps) {
                // per-step delta from cumulative positions
                let base: Vec<Point3> = all
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let mut p = *q;
                        for tt in 0..t {
                            p = p.add(&flow.step(i, tt));
                        }
                        p
                    })
                    .collect();
                let step_flow = DisplacementSequence::new(
                    (0..all.len())
                        .flat_map(|i| {
                            let s = flow.step(i, t);
                            [s.x, s.y, s.z]
                        })
                        .collect(),
                    all.len(),
                    1,
                    flow.role_mask().to_vec(),
                )?;
                let action = match flow_to_action(&base, &step_flow, &rigid_set, 1) {
                    Ok(a) => a,
                    Err(SimError::DegenerateFit(e)) => {
                        return Ok(RolloutResult::failed(FailureReason::DegenerateFit(e), 0.0))
                    }
                    Err(e) => return Err(e),
                };
                step_world(&mut world, &action);
                transforms.push(action);
                steps += 1;
                if success_check(task, &world)?.0 {
                    break;
                }
            }
            finish(&world, steps, transforms, ades)
        }
        RolloutMode::ClosedLoop => {
            let model = model.unwrap();
            let mut steps = 0;
            for step in 0..cfg.max_steps {
                if success_check(task, &world)?.0 {
                    break;
                }
                let obs = observe(&world, false, cfg.obs_noise, &mut rng)?;
                if cfg.reground_every_step && step > 0 {
                    grounded = match ground_on(&obs, scene, rng.next_u64()) {
                        Ok(g) => g,
                        Err(e) => {
                            return Ok(RolloutResult::failed(
                                FailureReason::Grounding(e.to_string()),
                                0.0,
                            ))
                        }
                    };
                }
                let (queries, labels) = query_positions(&obs, &grounded);
                let cropped =
                    crop_interaction_region(&obs, world.interaction_center, cfg.crop_radius)?;
                let cond = model.condition(&cropped, &queries, &scene.instruction)?;
                let flow = match model.sample_flow(&cond, queries.role_mask(), rng.next_u64()) {
                    Ok(f) => f,
                    Err(ModelError::NonFiniteSample { .. }) => {
                        return Ok(RolloutResult::failed(FailureReason::NonFiniteSample, 0.0))
                    }
                    Err(e) => return Err(e.into()),
                };
                let t_est = (step as f64 * STEP_SECONDS).min(scene.duration);
                let gt = gt_flow_at(scene, &queries, &labels, t_est, model.cfg.m)?;
                ades.push(crate::metrics::ade_fde(&flow, &gt).0);
                let action = match flow_to_action(&queries.all(), &flow, &rigid_set, 1) {
                    Ok(a) => a,
                    Err(SimError::DegenerateFit(e)) => {
                        return Ok(RolloutResult::failed(FailureReason::DegenerateFit(e), 0.0))
                    }
                    Err(e) => return Err(e),
                };
                step_world(&mut world, &action);
                transforms.push(action);
                steps += 1;
            }
            finish(&world, steps, transforms, ades)
        }
    }
}

// ---------------------------------------------------------------------------
// logging

/// One JSON object per rollout; transforms serialized as 3x4 row-major.
pub fn rollout_log_line(
    kind: Affordance,
    seed: u64,
    mode: RolloutMode,
    result: &RolloutResult,
) -> String {
    let transforms: Vec<[[f64; 4]; 3]> = result
        .transforms
        .iter()
        .map(|t| {
            let r = t.to_rows_3x4();
            [
                [r[0], r[1], r[2], r[3]],
                [r[4], r[5], r[6], r[7]],
                [r[8], r[9], r[10], r[11]],
            ]
        })
        .collect();
    serde_json::json!({
        "task": kind.as_str(),
        "seed": seed,
        "mode": mode.as_str(),
        "success": result.success,
        "steps": result.steps_used,
        "measured": result.measured,
        "transforms": transforms,
        "per_step_ade": result.per_step_ade,
        "failure": result.failure,
    })
    .to_string()
}

pub fn append_rollout_log(path: &std::path::Path, line: &str) -> Result<(), SimError> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| SimError::Io { path: path.display().to_string(), source })?;
    writeln!(f, "{line}").map_err(|source| SimError::Io { path: path.display().to_string(), source })
}
