//! Procedural training data: labeled desk-scale scenes with ground-truth
//! motion programs for the ten affordance kinds, clip windowing, motion
//! roll-out into displacement sequences, query sampling, and the dataset
//! container builder.

use crate::container::{Container, ContainerError, ContainerWriter};
use crate::geometry::{
    crop_interaction_region, lift_to_3d, remove_isolated_clusters, GeometryError, PinholeCamera,
    Point3, QuerySet, RigidTransform, ScenePointCloud,
};
use crate::grounding::{self, GroundingConfig, GroundingError, GroundingRequest, GroundingTables};
use crate::rng::Rng;
use crate::scene::{
    Affordance, AffordanceSample, BodyRef, DisplacementSequence, HingeInfo, Instruction,
    Motion, MotionProgram, ObjectInfo, ObjectRegistry, PartInfo, SampleMeta, SceneError,
    EXECUTOR_DESC,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("query region '{0}' is empty")]
    EmptyRegion(&'static str),
    #[error("dataset build failed: {skipped}/{requested} samples skipped (limit 10%)")]
    TooManySkips { skipped: usize, requested: usize },
    #[error("dataset container is missing sample metadata")]
    BadDatasetMeta,
}

// ---------------------------------------------------------------------------
// surface samplers

fn sample_box(rng: &mut Rng, center: Point3, half: Point3, n: usize) -> Vec<Point3> {
    // area-weighted faces
    let areas = [
        half.y * half.z, // +-x
        half.x * half.z, // +-y
        half.x * half.y, // +-z
    ];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    (0..n)
        .map(|_| {
            let mut pick = rng.uniform(0.0, total);
            let mut face = 5;
            for f in 0..6 {
                let a = areas[f / 2];
                if pick < a {
                    face = f;
                    break;
                }
                pick -= a;
            }
            let u = rng.uniform(-1.0, 1.0);
            let v = rng.uniform(-1.0, 1.0);
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            let local = match face / 2 {
                0 => Point3::new(s * half.x, u * half.y, v * half.z),
                1 => Point3::new(u * half.x, s * half.y, v * half.z),
                _ => Point3::new(u * half.x, v * half.y, s * half.z),
            };
            center.add(&local)
        })
        .collect()
}

fn sample_cylinder(rng: &mut Rng, base_center: Point3, radius: f64, height: f64, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            // lateral surface only; caps rarely matter at desk scale
            let z = rng.uniform(0.0, height);
            base_center.add(&Point3::new(radius * theta.cos(), radius * theta.sin(), z))
        })
        .collect()
}

fn sample_sphere(rng: &mut Rng, center: Point3, radius: f64, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let d = Point3::new(rng.normal(), rng.normal(), rng.normal()).normalized();
            center.add(&d.scale(radius))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// scene generation

/// Generator parameter ranges; shifted by tests to produce held-out
/// object sizes and positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub size_scale_lo: f64,
    pub size_scale_hi: f64,
    pub pos_jitter: f64,
    pub points_per_object: usize,
    pub points_table: usize,
    pub points_executor: usize,
    pub distractors: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            size_scale_lo: 0.85,
            size_scale_hi: 1.15,
            pos_jitter: 0.08,
            points_per_object: 220,
            points_table: 200,
            points_executor: 120,
            distractors: 1,
        }
    }
}

/// One rigid unit of the generated scene, with enough structure to rebuild
/// it as a simulator body.
#[derive(Debug, Clone)]
pub struct BodySpec {
    pub name: String,
    pub object_id: i32,
    /// World-frame points at generation time, with (object, part) labels.
    pub points: Vec<Point3>,
    pub labels: Vec<(i32, i32)>,
    pub colors: Vec<[f64; 3]>,
    /// Revolute articulation for this body, if any (axis/pivot in world).
    pub hinge: Option<HingeInfo>,
    /// Initial hinge angle the body was generated at.
    pub initial_angle: f64,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub registry: ObjectRegistry,
    pub bodies: Vec<BodySpec>,
    pub program: MotionProgram,
    pub instruction: Instruction,
    /// Object the gripper rigidly attaches to at execution time.
    pub grasp_object: i32,
    pub grasp_part: Option<i32>,
    pub interaction_center: Point3,
    pub scene_id: u64,
    /// Total motion duration in seconds.
    pub duration: f64,
}

impl GeneratedScene {
    /// Flattened labeled cloud over all bodies, in body order.
    pub fn cloud(&self) -> Result<ScenePointCloud, GeometryError> {
        let mut points = Vec::new();
        let mut colors = Vec::new();
        let mut labels = Vec::new();
        for b in &self.bodies {
            points.extend_from_slice(&b.points);
            colors.extend_from_slice(&b.colors);
            labels.extend_from_slice(&b.labels);
        }
        ScenePointCloud::new(points, colors, labels)
    }
}

struct SceneBuilder {
    objects: Vec<ObjectInfo>,
    bodies: Vec<BodySpec>,
}

impl SceneBuilder {
    fn new() -> Self {
        SceneBuilder { objects: Vec::new(), bodies: Vec::new() }
    }

    fn add_object(&mut self, name: &str, parts: &[&str], graspable: bool, hinge: Option<HingeInfo>) -> i32 {
        let id = self.objects.len() as i32;
        self.objects.push(ObjectInfo {
            name: name.to_string(),
            parts: parts.iter().map(|p| PartInfo { name: p.to_string() }).collect(),
            graspable,
            hinge,
        });
        id
    }

    fn add_body(
        &mut self,
        name: &str,
        object_id: i32,
        parts: Vec<(Vec<Point3>, i32, [f64; 3])>,
        hinge: Option<HingeInfo>,
    ) {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        let mut colors = Vec::new();
        for (pts, part, color) in parts {
            labels.extend(std::iter::repeat((object_id, part)).take(pts.len()));
            colors.extend(std::iter::repeat(color).take(pts.len()));
            points.extend(pts);
        }
        self.bodies.push(BodySpec {
            name: name.to_string(),
            object_id,
            points,
            labels,
            colors,
            hinge,
            initial_angle: 0.0,
        });
    }
}

/// Executor anchor points: a gripper-like cluster distributed along the
/// segment [a, b] with a small lateral spread.
fn executor_points(rng: &mut Rng, a: Point3, b: Point3, offset: Point3, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            let t = rng.uniform(0.0, 1.0);
            let on_seg = a.add(&b.sub(&a).scale(t));
            let jitter = Point3::new(
                rng.uniform(-0.01, 0.01),
                rng.uniform(-0.01, 0.01),
                rng.uniform(-0.01, 0.01),
            );
            on_seg.add(&offset).add(&jitter)
        })
        .collect()
}

/// Generate a labeled scene, registry, and ground-truth motion program for
/// one affordance kind. Deterministic per (kind, seed, config).
pub fn generate_scene(
    kind: Affordance,
    seed: u64,
    cfg: &SceneGenConfig,
) -> Result<GeneratedScene, SynthError> {
    let mut rng = Rng::derive(seed, 0x5ce7e);
    let s = rng.uniform(cfg.size_scale_lo, cfg.size_scale_hi);
    let jx = rng.uniform(-cfg.pos_jitter, cfg.pos_jitter);
    let jy = rng.uniform(-cfg.pos_jitter, cfg.pos_jitter);
    let duration = rng.uniform(1.6, 3.0);
    let mut b = SceneBuilder::new();

    // table: support surface at z = 0
    let table = b.add_object("table", &["top"], false, None);
    let table_pts: Vec<Point3> = (0..cfg.points_table)
        .map(|_| Point3::new(rng.uniform(-0.45, 0.45), rng.uniform(-0.45, 0.45), 0.0))
        .collect();
    b.add_body("table", table, vec![(table_pts, 0, [0.6, 0.6, 0.6])], None);

    let grey = [0.4, 0.45, 0.5];
    let np = cfg.points_per_object;
    let nexec = cfg.points_executor;

    let center = Point3::new(jx, jy, 0.0);
    let (program, instruction, grasp_object, grasp_part, interaction_center);

    match kind {
        Affordance::Open | Affordance::Close => {
            // oven: static base behind, drop-down front door with a vertical
            // grab bar spanning the door height (radius spread from hinge)
            let w = 0.36 * s;
            let dpt = 0.30 * s;
            let h = 0.34 * s;
            let base_c = Point3::new(center.x, center.y + dpt / 2.0, h / 2.0);
            let oven = b.add_object("oven", &["body", "door", "handle"], true, None);
            let body_pts = sample_box(&mut rng, base_c, Point3::new(w / 2.0, dpt / 2.0, h / 2.0), np);
            // door: closed pose is the vertical front face plane y = front
            let front = center.y - 0.01 * s;
            let hinge_pivot = Point3::new(center.x, front, 0.015 * s);
            let axis = Point3::new(1.0, 0.0, 0.0);
            let mut door_pts: Vec<Point3> = (0..np / 2)
                .map(|_| {
                    Point3::new(
                        center.x + rng.uniform(-w / 2.0, w / 2.0),
                        front + rng.uniform(-0.008, 0.008),
                        rng.uniform(0.02 * s, h),
                    )
                })
                .collect();
            // handle bar: vertical, centered on the door, spanning most of it
            let bar_x = center.x;
            let bar_lo = Point3::new(bar_x, front - 0.03 * s, 0.08 * s);
            let bar_hi = Point3::new(bar_x, front - 0.03 * s, 0.95 * h);
            let mut handle_pts: Vec<Point3> = (0..np / 3)
                .map(|_| {
                    let t = rng.uniform(0.0, 1.0);
                    bar_lo
                        .add(&bar_hi.sub(&bar_lo).scale(t))
                        .add(&Point3::new(rng.uniform(-0.012, 0.012), rng.uniform(-0.008, 0.008), 0.0))
                })
                .collect();
            let hinge = HingeInfo {
                axis,
                pivot: hinge_pivot,
                moving_parts: vec![1, 2],
                min_angle: 0.0,
                max_angle: 1.9,
            };
            b.objects[oven as usize].hinge = Some(hinge.clone());
            // opening rotates the door top outward (toward -y): positive
            // angle about +x seen from the pivot
            let open_angle = rng.uniform(0.9, 1.4);
            let (start_angle, total_angle) = match kind {
                Affordance::Open => (0.0, open_angle),
                _ => (open_angle, -open_angle),
            };
            if start_angle != 0.0 {
                let t0 = RigidTransform::about_axis(axis, hinge_pivot, start_angle);
                for p in door_pts.iter_mut().chain(handle_pts.iter_mut()) {
                    *p = t0.apply(p);
                }
            }
            let mut parts = vec![(body_pts, 0, grey)];
            parts.push((door_pts, 1, [0.35, 0.3, 0.3]));
            parts.push((handle_pts.clone(), 2, [0.8, 0.75, 0.2]));
            b.add_body("oven", oven, parts, None);
            // re-tag: door+handle form their own rigid body for simulation
            let oven_body = b.bodies.pop().unwrap();
            let (mut fixed, mut moving): (BodySpec, BodySpec) = (
                BodySpec { name: "oven".into(), object_id: oven, points: vec![], labels: vec![], colors: vec![], hinge: None, initial_angle: 0.0 },
                BodySpec { name: "oven_door".into(), object_id: oven, points: vec![], labels: vec![], colors: vec![], hinge: Some(hinge), initial_angle: start_angle },
            );
            for ((p, l), c) in oven_body.points.iter().zip(&oven_body.labels).zip(&oven_body.colors) {
                let dest = if l.1 == 0 { &mut fixed } else { &mut moving };
                dest.points.push(*p);
                dest.labels.push(*l);
                dest.colors.push(*c);
            }
            b.bodies.push(fixed);
            b.bodies.push(moving);

            // executor grips along the bar
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let mut grip_lo = bar_lo;
            let mut grip_hi = bar_hi;
            if start_angle != 0.0 {
                let t0 = RigidTransform::about_axis(axis, hinge_pivot, start_angle);
                grip_lo = t0.apply(&grip_lo);
                grip_hi = t0.apply(&grip_hi);
            }
            let exec_pts =
                executor_points(&mut rng, grip_lo, grip_hi, Point3::new(0.0, -0.02, 0.0), nexec);
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);

            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: oven, part_id: Some(1) },
                    BodyRef { object_id: oven, part_id: Some(2) },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Revolute { axis, pivot: hinge_pivot, total_angle },
            };
            instruction = Instruction::new(kind, EXECUTOR_DESC, "oven");
            grasp_object = oven;
            grasp_part = Some(2);
            interaction_center = Point3::new(center.x, front, h / 2.0);
        }
        Affordance::Pickup | Affordance::Place => {
            let r = 0.04 * s;
            let h = 0.1 * s;
            let start_z = if kind == Affordance::Pickup { 0.0 } else { 0.18 };
            let base = Point3::new(center.x, center.y, start_z);
            let cup = b.add_object("cup", &["body", "rim"], true, None);
            let body_pts = sample_cylinder(&mut rng, base, r, h * 0.85, np);
            let rim_pts = sample_cylinder(
                &mut rng,
                Point3::new(base.x, base.y, base.z + 0.85 * h),
                r,
                0.15 * h,
                np / 4,
            );
            b.add_body("cup", cup, vec![(body_pts, 0, [0.2, 0.4, 0.8]), (rim_pts, 1, [0.3, 0.5, 0.9])], None);
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let rim_c = Point3::new(base.x, base.y, base.z + h);
            let exec_pts = executor_points(
                &mut rng,
                rim_c.add(&Point3::new(-r, 0.0, 0.0)),
                rim_c.add(&Point3::new(r, 0.0, 0.0)),
                Point3::new(0.0, 0.0, 0.02),
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            let delta = if kind == Affordance::Pickup {
                Point3::new(0.0, 0.0, rng.uniform(0.10, 0.20))
            } else {
                // place: descend onto a goal spot on the table
                Point3::new(rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), -start_z)
            };
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: cup, part_id: None },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Translate { delta },
            };
            instruction = Instruction::new(kind, EXECUTOR_DESC, "cup");
            grasp_object = cup;
            grasp_part = Some(1);
            interaction_center = rim_c;
        }
        Affordance::Push | Affordance::Pull => {
            let half = Point3::new(0.05 * s, 0.05 * s, 0.04 * s);
            let c = Point3::new(center.x, center.y, half.z);
            let bx = b.add_object("box", &["body"], true, None);
            let pts = sample_box(&mut rng, c, half, np);
            b.add_body("box", bx, vec![(pts, 0, [0.7, 0.5, 0.2])], None);
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let side = if kind == Affordance::Push { -1.0 } else { 1.0 };
            let anchor = Point3::new(c.x, c.y + side * (half.y + 0.015), c.z);
            let exec_pts = executor_points(
                &mut rng,
                anchor.add(&Point3::new(-half.x * 0.6, 0.0, 0.0)),
                anchor.add(&Point3::new(half.x * 0.6, 0.0, 0.0)),
                Point3::ZERO,
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            let d = rng.uniform(0.10, 0.20);
            // executor sits at -y for push (moves the box away, +y) and at
            // +y for pull (draws the box toward itself, also +y)
            let delta = Point3::new(0.0, d, 0.0);
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: bx, part_id: None },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Translate { delta },
            };
            instruction = Instruction::new(kind, EXECUTOR_DESC, "box");
            grasp_object = bx;
            grasp_part = None;
            interaction_center = c;
        }
        Affordance::Press => {
            let half = Point3::new(0.07 * s, 0.07 * s, 0.03 * s);
            let c = Point3::new(center.x, center.y, half.z);
            let dev = b.add_object("device", &["body", "button"], true, None);
            let body_pts = sample_box(&mut rng, c, half, np);
            let btn_c = Point3::new(c.x, c.y, 2.0 * half.z);
            let btn_pts = sample_cylinder(&mut rng, btn_c, 0.012 * s, 0.012 * s, np / 5);
            let mut parts = vec![(body_pts, 0, grey)];
            parts.push((btn_pts, 1, [0.9, 0.1, 0.1]));
            // button is its own rigid unit
            let dev_body: Vec<_> = parts.drain(..1).collect();
            b.add_body("device", dev, dev_body, None);
            b.add_body("device_button", dev, parts, None);
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let tip = Point3::new(btn_c.x, btn_c.y, btn_c.z + 0.02);
            let exec_pts = executor_points(
                &mut rng,
                tip,
                tip.add(&Point3::new(0.0, 0.0, 0.03)),
                Point3::ZERO,
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: dev, part_id: Some(1) },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Translate { delta: Point3::new(0.0, 0.0, -0.012 * s) },
            };
            instruction = Instruction::new(kind, EXECUTOR_DESC, "device");
            grasp_object = dev;
            grasp_part = Some(1);
            interaction_center = btn_c;
        }
        Affordance::Pour => {
            let bowl_r = 0.08 * s;
            let bowl = b.add_object("bowl", &["body", "rim"], false, None);
            let bowl_c = Point3::new(center.x, center.y, 0.0);
            let bowl_pts = sample_cylinder(&mut rng, bowl_c, bowl_r, 0.05 * s, np);
            let bowl_rim = sample_cylinder(
                &mut rng,
                Point3::new(bowl_c.x, bowl_c.y, 0.045 * s),
                bowl_r,
                0.01,
                np / 4,
            );
            b.add_body("bowl", bowl, vec![(bowl_pts, 0, [0.9, 0.9, 0.85]), (bowl_rim, 1, [0.95, 0.95, 0.9])], None);
            let cup_r = 0.035 * s;
            let cup_h = 0.09 * s;
            let cup_base = Point3::new(center.x + bowl_r + 0.01, center.y, 0.13);
            let cup = b.add_object("cup", &["body", "rim"], true, None);
            let cup_pts = sample_cylinder(&mut rng, cup_base, cup_r, cup_h * 0.85, np);
            let cup_rim = sample_cylinder(
                &mut rng,
                Point3::new(cup_base.x, cup_base.y, cup_base.z + 0.85 * cup_h),
                cup_r,
                0.15 * cup_h,
                np / 4,
            );
            b.add_body("cup", cup, vec![(cup_pts, 0, [0.2, 0.4, 0.8]), (cup_rim, 1, [0.3, 0.5, 0.9])], None);
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let side = Point3::new(cup_base.x + cup_r, cup_base.y, cup_base.z + cup_h * 0.5);
            let exec_pts = executor_points(
                &mut rng,
                side,
                side.add(&Point3::new(0.0, 0.0, 0.03)),
                Point3::new(0.015, 0.0, 0.0),
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            // tilt about the rim edge nearest the bowl
            let pivot = Point3::new(cup_base.x - cup_r, cup_base.y, cup_base.z + cup_h);
            let axis = Point3::new(0.0, 1.0, 0.0);
            let angle = rng.uniform(1.2, 1.8);
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: cup, part_id: None },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Revolute { axis, pivot, total_angle: angle },
            };
            instruction = Instruction::new(kind, "cup", "bowl");
            grasp_object = cup;
            grasp_part = Some(1);
            interaction_center = pivot;
        }
        Affordance::Cut => {
            let apple_r = 0.04 * s;
            let apple = b.add_object("apple", &["body"], false, None);
            let apple_c = Point3::new(center.x, center.y, apple_r);
            let apple_pts = sample_sphere(&mut rng, apple_c, apple_r, np);
            b.add_body("apple", apple, vec![(apple_pts, 0, [0.85, 0.15, 0.1])], None);
            let knife = b.add_object("knife", &["blade", "handle"], true, None);
            let clearance = 0.05;
            let blade_c = Point3::new(apple_c.x, apple_c.y, 2.0 * apple_r + clearance + 0.03 * s);
            let blade_pts = sample_box(
                &mut rng,
                blade_c,
                Point3::new(0.06 * s, 0.004, 0.03 * s),
                np / 2,
            );
            let handle_c = Point3::new(blade_c.x + 0.09 * s, blade_c.y, blade_c.z + 0.01);
            let handle_pts = sample_box(
                &mut rng,
                handle_c,
                Point3::new(0.035 * s, 0.01, 0.012 * s),
                np / 4,
            );
            b.add_body(
                "knife",
                knife,
                vec![(blade_pts, 0, [0.75, 0.75, 0.8]), (handle_pts, 1, [0.3, 0.2, 0.1])],
                None,
            );
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let exec_pts = executor_points(
                &mut rng,
                handle_c.add(&Point3::new(-0.02, 0.0, 0.015)),
                handle_c.add(&Point3::new(0.02, 0.0, 0.015)),
                Point3::ZERO,
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            // blade descends through the apple down to near the table
            let descent = (blade_c.z - 0.03 * s) - apple_r * 0.4;
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: knife, part_id: None },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Translate { delta: Point3::new(0.0, 0.0, -descent) },
            };
            instruction = Instruction::new(kind, "knife", "apple");
            grasp_object = knife;
            grasp_part = Some(1);
            interaction_center = apple_c;
        }
        Affordance::HangOn => {
            let hook = b.add_object("hook", &["stand", "peg"], false, None);
            let stand_c = Point3::new(center.x, center.y + 0.1, 0.15);
            let stand_pts = sample_box(&mut rng, stand_c, Point3::new(0.015, 0.015, 0.15), np / 2);
            let peg_c = Point3::new(stand_c.x, stand_c.y - 0.05, 0.27);
            let peg_pts: Vec<Point3> = (0..np / 5)
                .map(|_| {
                    let t = rng.uniform(0.0, 0.05);
                    Point3::new(
                        peg_c.x + rng.uniform(-0.006, 0.006),
                        stand_c.y - t,
                        peg_c.z + rng.uniform(-0.006, 0.006),
                    )
                })
                .collect();
            b.add_body("hook", hook, vec![(stand_pts, 0, grey), (peg_pts, 1, [0.8, 0.8, 0.3])], None);
            let mug = b.add_object("mug", &["body", "handle"], true, None);
            let mug_base = Point3::new(center.x - 0.18, center.y - 0.1, 0.12);
            let mug_pts = sample_cylinder(&mut rng, mug_base, 0.035 * s, 0.08 * s, np);
            let mug_handle = sample_box(
                &mut rng,
                Point3::new(mug_base.x + 0.045 * s, mug_base.y, mug_base.z + 0.04 * s),
                Point3::new(0.008, 0.015, 0.025 * s),
                np / 4,
            );
            b.add_body(
                "mug",
                mug,
                vec![(mug_pts, 0, [0.2, 0.6, 0.3]), (mug_handle, 1, [0.25, 0.65, 0.35])],
                None,
            );
            let exec = b.add_object(EXECUTOR_DESC, &["gripper"], false, None);
            let grip = Point3::new(mug_base.x, mug_base.y, mug_base.z + 0.08 * s + 0.01);
            let exec_pts = executor_points(
                &mut rng,
                grip.add(&Point3::new(-0.02, 0.0, 0.0)),
                grip.add(&Point3::new(0.02, 0.0, 0.0)),
                Point3::ZERO,
                nexec,
            );
            b.add_body(EXECUTOR_DESC, exec, vec![(exec_pts, 0, [0.9, 0.2, 0.2])], None);
            // carry the mug handle onto the peg
            let handle_now = Point3::new(mug_base.x + 0.045 * s, mug_base.y, mug_base.z + 0.04 * s);
            let goal = Point3::new(peg_c.x, peg_c.y - 0.015, peg_c.z + 0.01);
            program = MotionProgram {
                kind,
                duration,
                movers: vec![
                    BodyRef { object_id: mug, part_id: None },
                    BodyRef { object_id: exec, part_id: None },
                ],
                motion: Motion::Translate { delta: goal.sub(&handle_now) },
            };
            instruction = Instruction::new(kind, "mug", "hook");
            grasp_object = mug;
            grasp_part = Some(1);
            interaction_center = peg_c;
        }
    }

    // static distractors away from the interaction region
    for d in 0..cfg.distractors {
        let name = format!("block{d}");
        let id = b.add_object(&name, &["body"], false, None);
        let mut c = Point3::new(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), 0.025);
        // keep clear of the interaction center
        if c.dist(&interaction_center) < 0.25 {
            c = Point3::new(-c.x.signum() * 0.38, -c.y.signum() * 0.38, 0.025);
        }
        let pts = sample_box(&mut rng, c, Point3::new(0.025, 0.025, 0.025), 60);
        b.add_body(&name, id, vec![(pts, 0, [0.5, 0.35, 0.6])], None);
    }

    Ok(GeneratedScene {
        registry: ObjectRegistry::new(b.objects)?,
        bodies: b.bodies,
        program,
        instruction,
        grasp_object,
        grasp_part,
        interaction_center,
        scene_id: seed,
        duration,
    })
}

// ---------------------------------------------------------------------------
// clip windowing

pub const CLIP_SPAN_S: f64 = 1.5;
pub const CLIP_STRIDE_S: f64 = 0.5;
/// Frame offsets within one clip, seconds.
pub const CLIP_OFFSETS_S: [f64; 4] = [0.0, 0.5, 1.0, 1.5];

/// Sliding-window clip boundaries as frame-index quadruples. Returns the
/// clip list and a warning flag set when the trajectory is too short for a
/// single clip.
pub fn window_clips(traj_duration: f64, frame_rate: f64) -> (Vec<[usize; 4]>, bool) {
    let mut clips = Vec::new();
    if traj_duration + 1e-9 < CLIP_SPAN_S {
        return (clips, true);
    }
    let mut start = 0.0;
    while start + CLIP_SPAN_S <= traj_duration + 1e-9 {
        let mut frames = [0usize; 4];
        for (i, off) in CLIP_OFFSETS_S.iter().enumerate() {
            frames[i] = ((start + off) * frame_rate).round() as usize;
        }
        clips.push(frames);
        start += CLIP_STRIDE_S;
    }
    (clips, false)
}

// ---------------------------------------------------------------------------
// motion roll-out

/// Apply the program's rigid motion to the moving queries at each of the four
/// timestamps, and difference into per-step displacements. `labels` gives the
/// (object, part) label of each query in tool-then-target order.
pub fn roll_out_motion(
    program: &MotionProgram,
    queries: &QuerySet,
    labels: &[(i32, i32)],
    timestamps: &[f64; 4],
) -> Result<DisplacementSequence, SynthError> {
    let all = queries.all();
    assert_eq!(all.len(), labels.len(), "query/label count mismatch");
    let base = program.pose_at(timestamps[0])?.invert();
    let mut frames: Vec<Vec<Point3>> = Vec::with_capacity(4);
    for &t in timestamps {
        let rel = program.pose_at(t)?.compose(&base);
        frames.push(
            all.iter()
                .zip(labels)
                .map(|(q, &l)| if program.moves(l) { rel.apply(q) } else { *q })
                .collect(),
        );
    }
    Ok(DisplacementSequence::from_keyframes(&frames, queries.role_mask())?)
}

// ---------------------------------------------------------------------------
// query sampling

#[derive(Debug, Clone)]
pub struct SampledQueries {
    pub set: QuerySet,
    /// Scene point indices each tool query was drawn from.
    pub tool_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
    /// Set when a region was smaller than the request and sampling fell back
    /// to replacement.
    pub with_replacement: bool,
}

fn draw(rng: &mut Rng, region: &[usize], count: usize) -> (Vec<usize>, bool) {
    if region.len() >= count {
        let mut pool: Vec<usize> = region.to_vec();
        rng.shuffle(&mut pool);
        pool.truncate(count);
        (pool, false)
    } else {
        ((0..count).map(|_| region[rng.below(region.len())]).collect(), true)
    }
}

/// Sample tool and target queries from scene-point regions with the
/// configured total and tool:target allocation ratio.
pub fn sample_queries(
    scene: &ScenePointCloud,
    tool_region: &[usize],
    target_region: &[usize],
    total: usize,
    ratio: (usize, usize),
    seed: u64,
) -> Result<SampledQueries, SynthError> {
    if tool_region.is_empty() {
        return Err(SynthError::EmptyRegion("tool"));
    }
    if target_region.is_empty() {
        return Err(SynthError::EmptyRegion("target"));
    }
    let n_tool = total * ratio.0 / (ratio.0 + ratio.1);
    let n_target = total - n_tool;
    let mut rng = Rng::derive(seed, 0x9e3);
    let (tool_indices, r1) = draw(&mut rng, tool_region, n_tool);
    let (target_indices, r2) = draw(&mut rng, target_region, n_target);
    let set = QuerySet {
        tool: tool_indices.iter().map(|&i| scene.points[i]).collect(),
        target: target_indices.iter().map(|&i| scene.points[i]).collect(),
    };
    Ok(SampledQueries { set, tool_indices, target_indices, with_replacement: r1 || r2 })
}

// ---------------------------------------------------------------------------
// dataset build

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorSimConfig {
    pub enabled: bool,
    pub pixel_noise: f64,
    pub depth_noise: f64,
}

impl Default for SensorSimConfig {
    fn default() -> Self {
        SensorSimConfig { enabled: false, pixel_noise: 0.0, depth_noise: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kinds: Vec<Affordance>,
    pub samples_per_kind: usize,
    pub gen: SceneGenConfig,
    pub sensor: SensorSimConfig,
    pub clean_cluster_radius: f64,
    pub clean_min_cluster: usize,
    pub crop_radius: f64,
    pub total_queries: usize,
    pub query_ratio: (usize, usize),
    pub frame_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kinds: Affordance::ALL.to_vec(),
            samples_per_kind: 10,
            gen: SceneGenConfig::default(),
            sensor: SensorSimConfig::default(),
            // cleaning thresholds are generator defaults, not validated
            // against any reference capture setup
            clean_cluster_radius: 0.04,
            clean_min_cluster: 5,
            crop_radius: 0.65,
            total_queries: 128,
            query_ratio: (3, 1),
            frame_rate: 30.0,
        }
    }
}

fn default_camera() -> PinholeCamera {
    // front-above view covering the whole table
    let eye = Point3::new(0.0, -0.9, 0.9);
    let target = Point3::new(0.0, 0.0, 0.05);
    let f = target.sub(&eye).normalized();
    let r = f.cross(&Point3::new(0.0, 0.0, 1.0)).normalized();
    let d = f.cross(&r);
    // camera-to-world rotation: columns are the camera's right/down/forward
    // axes expressed in world coordinates
    let rot = [[r.x, d.x, f.x], [r.y, d.y, f.y], [r.z, d.z, f.z]];
    let pose = RigidTransform::new(rot, eye).expect("orthonormal look-at basis");
    PinholeCamera::new(220.0, 220.0, 160.0, 120.0, 320, 240, pose).unwrap()
}

/// Project points to the camera, optionally perturb pixels/depths, and
/// re-lift. Points falling outside the frame are dropped.
fn sensor_round_trip(
    points: &[Point3],
    cam: &PinholeCamera,
    noise: &SensorSimConfig,
    rng: &mut Rng,
) -> (Vec<Point3>, Vec<usize>) {
    let mut pixels = Vec::new();
    let mut depths = Vec::new();
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if let Some((u, v, d)) = cam.project(p) {
            let (nu, nv, nd) = (
                u + rng.normal() * noise.pixel_noise,
                v + rng.normal() * noise.depth_noise.min(noise.pixel_noise),
                d + rng.normal() * noise.depth_noise,
            );
            pixels.push((nu, nv));
            depths.push(nd);
            kept.push(i);
        }
    }
    let lifted = lift_to_3d(&pixels, &depths, cam).expect("length-matched lift");
    let kept: Vec<usize> = lifted.kept.iter().map(|&j| kept[j]).collect();
    (lifted.points, kept)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecordMeta {
    pub index: usize,
    pub kind: Affordance,
    pub instruction: String,
    pub tool_desc: String,
    pub target_desc: String,
    pub scene_id: u64,
    pub clip_index: usize,
    pub timestamps: Vec<f64>,
    pub n_scene: usize,
    pub n_queries: usize,
}

#[derive(Debug, Clone)]
pub struct BuildReport {
    pub built: usize,
    pub skipped: Vec<(usize, String)>,
}

struct BuiltSample {
    meta: SampleRecordMeta,
    scene: ScenePointCloud,
    queries: QuerySet,
    gt_flow: DisplacementSequence,
}

fn build_one(
    index: usize,
    kind: Affordance,
    seed: u64,
    cfg: &DatasetConfig,
    tables: &GroundingTables,
) -> Result<BuiltSample, SynthError> {
    let sample_seed = seed.wrapping_add(index as u64).wrapping_mul(0x9E3779B97F4A7C15);
    let gen = generate_scene(kind, sample_seed, &cfg.gen)?;
    let mut cloud = gen.cloud()?;
    let mut rng = Rng::derive(sample_seed, 0xda7a);

    // clip selection over the program duration
    let (clips, _) = window_clips(gen.duration, cfg.frame_rate);
    let clip_index = rng.below(clips.len().max(1));
    let frames = clips[clip_index];
    let timestamps: [f64; 4] = std::array::from_fn(|i| frames[i] as f64 / cfg.frame_rate);

    // optional sensor simulation before grounding and query sampling
    if cfg.sensor.enabled {
        let cam = default_camera();
        let (pts, kept) = sensor_round_trip(&cloud.points, &cam, &cfg.sensor, &mut rng);
        if pts.is_empty() {
            return Err(SynthError::EmptyRegion("sensor-visible scene"));
        }
        cloud = ScenePointCloud::new(
            pts,
            kept.iter().map(|&i| cloud.colors[i]).collect(),
            kept.iter().map(|&i| cloud.labels[i]).collect(),
        )?;
    }

    // role grounding on the labeled cloud
    let grounded = grounding::ground(
        &GroundingRequest { raw_text: &gen.instruction.raw_text, scene: &cloud, registry: &gen.registry },
        tables,
        &GroundingConfig {
            total_queries: cfg.total_queries,
            query_ratio: cfg.query_ratio,
            ..GroundingConfig::default()
        },
        sample_seed,
    )?;
    let queries = grounded.queries.set.clone();
    let labels: Vec<(i32, i32)> = grounded
        .queries
        .tool_indices
        .iter()
        .chain(grounded.queries.target_indices.iter())
        .map(|&i| cloud.labels[i])
        .collect();

    let gt_flow = roll_out_motion(&gen.program, &queries, &labels, &timestamps)?;

    // cleaning on the scene cloud only
    let cleaned = remove_isolated_clusters(&cloud, cfg.clean_cluster_radius, cfg.clean_min_cluster)?;
    let cleaned = crop_interaction_region(&cleaned, gen.interaction_center, cfg.crop_radius)?;

    let meta = SampleRecordMeta {
        index,
        kind,
        instruction: gen.instruction.raw_text.clone(),
        tool_desc: gen.instruction.tool_desc.clone(),
        target_desc: gen.instruction.target_desc.clone(),
        scene_id: gen.scene_id,
        clip_index,
        timestamps: timestamps.to_vec(),
        n_scene: cleaned.len(),
        n_queries: queries.len(),
    };
    Ok(BuiltSample { meta, scene: cleaned, queries, gt_flow })
}

/// Build a dataset container at `out_dir`. Per-sample sub-seeds derive from
/// (seed, index), so parallel and serial builds are byte-identical.
pub fn build_dataset(
    cfg: &DatasetConfig,
    seed: u64,
    tables: &GroundingTables,
    out_dir: &std::path::Path,
) -> Result<BuildReport, SynthError> {
    let jobs: Vec<(usize, Affordance)> = cfg
        .kinds
        .iter()
        .flat_map(|&k| std::iter::repeat(k).take(cfg.samples_per_kind))
        .enumerate()
        .collect();
    let requested = jobs.len();
    let results: Vec<(usize, Result<BuiltSample, SynthError>)> = jobs
        .par_iter()
        .map(|&(i, kind)| (i, build_one(i, kind, seed, cfg, tables)))
        .collect();

    let mut writer = ContainerWriter::new();
    let mut metas = Vec::new();
    let mut skipped = Vec::new();
    for (i, res) in results {
        match res {
            Ok(s) => {
                let tag = format!("sample{:05}", s.meta.index);
                let n_s = s.scene.len();
                let n_q = s.queries.len();
                let pts: Vec<f64> =
                    s.scene.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                writer.push_f32(&format!("{tag}/scene_points"), vec![n_s, 3], &pts);
                let cols: Vec<f64> = s.scene.colors.iter().flatten().copied().collect();
                writer.push_f32(&format!("{tag}/scene_colors"), vec![n_s, 3], &cols);
                let labels: Vec<i32> =
                    s.scene.labels.iter().flat_map(|&(o, p)| [o, p]).collect();
                writer.push_i32(&format!("{tag}/scene_labels"), vec![n_s, 2], &labels);
                let q: Vec<f64> =
                    s.queries.all().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
                writer.push_f32(&format!("{tag}/queries"), vec![n_q, 3], &q);
                let mask: Vec<i32> = s.queries.role_mask().iter().map(|&b| b as i32).collect();
                writer.push_i32(&format!("{tag}/role_mask"), vec![n_q], &mask);
                writer.push_f32(
                    &format!("{tag}/gt_flow"),
                    vec![n_q, s.gt_flow.m(), 3],
                    s.gt_flow.steps(),
                );
                metas.push(s.meta);
            }
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    if skipped.len() * 10 > requested {
        return Err(SynthError::TooManySkips { skipped: skipped.len(), requested });
    }
    let meta = serde_json::json!({
        "seed": seed,
        "samples": metas,
        "skipped": skipped.iter().map(|(i, e)| serde_json::json!({"index": i, "error": e})).collect::<Vec<_>>(),
        "config": serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    });
    writer.finish(out_dir, "dataset", meta)?;
    Ok(BuildReport { built: requested - skipped.len(), skipped })
}

/// Load every sample from a dataset container.
pub fn load_dataset(dir: &std::path::Path) -> Result<Vec<AffordanceSample>, SynthError> {
    let c = Container::open(dir)?;
    let metas: Vec<SampleRecordMeta> =
        serde_json::from_value(c.manifest.meta["samples"].clone())
            .map_err(|_| SynthError::BadDatasetMeta)?;
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let tag = format!("sample{:05}", m.index);
        let (_, pts) = c.read_f32(&format!("{tag}/scene_points"))?;
        let (_, cols) = c.read_f32(&format!("{tag}/scene_colors"))?;
        let (_, labels) = c.read_i32(&format!("{tag}/scene_labels"))?;
        let points: Vec<Point3> =
            pts.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        let colors: Vec<[f64; 3]> =
            cols.chunks_exact(3).map(|c| [c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0), c[2].clamp(0.0, 1.0)]).collect();
        let labels: Vec<(i32, i32)> = labels.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let scene = ScenePointCloud::new(points, colors, labels)
            .map_err(SynthError::Geometry)?;
        let (_, q) = c.read_f32(&format!("{tag}/queries"))?;
        let (_, mask) = c.read_i32(&format!("{tag}/role_mask"))?;
        let (fshape, flow) = c.read_f32(&format!("{tag}/gt_flow"))?;
        let qpts: Vec<Point3> = q.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect();
        let n_tool = mask.iter().filter(|&&v| v == 1).count();
        let queries = QuerySet {
            tool: qpts[..n_tool].to_vec(),
            target: qpts[n_tool..].to_vec(),
        };
        let gt_flow = DisplacementSequence::new(
            flow,
            fshape[0],
            fshape[1],
            mask.iter().map(|&v| v as u8).collect(),
        )?;
        let action = m.kind;
        out.push(AffordanceSample {
            scene,
            queries,
            instruction: Instruction::new(action, &m.tool_desc, &m.target_desc),
            gt_flow,
            meta: SampleMeta {
                kind: m.kind,
                scene_id: m.scene_id,
                clip_index: m.clip_index,
                timestamps: m.timestamps,
            },
        });
    }
    Ok(out)
}
