//! Scene geometry: target objects, static environment, virtual rails and the
//! rail-parameter to sensor-pose mapping.
//!
//! Conventions: the world frame is right-handed with +Y up and the ground is a
//! plane of constant Y. Every yaw in this crate is a rotation about +Y. An
//! object's `size` is `(w, h, l)`: `w` along its local X axis, `h` vertical and
//! `l` along its local Z axis.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub type Vec3 = Vector3<f64>;
pub type Triangle = [Vec3; 3];

/// Logistic function, stable over the whole finite range.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// d/dz sigmoid(z).
pub fn sigmoid_grad(z: f64) -> f64 {
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Inverse of [`sigmoid`] for `p` in (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation about the world vertical axis.
pub fn yaw_rotation(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// An oriented cuboid resting anywhere in the world, yawed about +Y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

/// One of the six faces of a cuboid, identified by its normal axis and sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: usize,
    pub positive: bool,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face { axis: 0, positive: false },
        Face { axis: 0, positive: true },
        Face { axis: 1, positive: false },
        Face { axis: 1, positive: true },
        Face { axis: 2, positive: false },
        Face { axis: 2, positive: true },
    ];
}

impl Cuboid {
    pub fn validate(&self) -> Result<()> {
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidInput("cuboid center must be finite".into()));
        }
        if !self.size.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cuboid size components must be positive, got {:?}",
                self.size.as_slice()
            )));
        }
        if !(0.0..TAU).contains(&self.yaw) {
            return Err(Error::InvalidInput(format!(
                "yaw must lie in [0, 2pi), got {}",
                self.yaw
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        yaw_rotation(self.yaw)
    }

    pub fn half_extents(&self) -> Vec3 {
        self.size * 0.5
    }

    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.center + self.rotation() * local
    }

    pub fn to_local(&self, world: &Vec3) -> Vec3 {
        self.rotation().transpose() * (world - self.center)
    }

    /// Corner `i` has local sign `-` or `+` on axis k according to bit k of `i`.
    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents();
        let r = self.rotation();
        std::array::from_fn(|i| {
            let local = Vec3::new(
                if i & 1 == 0 { -h.x } else { h.x },
                if i & 2 == 0 { -h.y } else { h.y },
                if i & 4 == 0 { -h.z } else { h.z },
            );
            self.center + r * local
        })
    }

    pub fn face_area(&self, face: Face) -> f64 {
        let (a, b) = other_axes(face.axis);
        self.size[a] * self.size[b]
    }

    pub fn surface_area(&self) -> f64 {
        Face::ALL.iter().map(|&f| self.face_area(f)).sum()
    }

    /// Two triangles per face, wound counter-clockwise seen from outside.
    pub fn to_mesh(&self) -> Vec<Triangle> {
        let h = self.half_extents();
        let mut triangles = Vec::with_capacity(12);
        for face in Face::ALL {
            let (a, b) = other_axes(face.axis);
            let sign = if face.positive { 1.0 } else { -1.0 };
            let quad: [Vec3; 4] = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(
                |(sa, sb)| {
                    let mut local = Vec3::zeros();
                    local[face.axis] = sign * h[face.axis];
                    local[a] = sa * h[a];
                    local[b] = sb * h[b];
                    local
                },
            );
            let mut normal = Vec3::zeros();
            normal[face.axis] = sign;
            let winding = (quad[1] - quad[0]).cross(&(quad[2] - quad[0]));
            let quad = if winding.dot(&normal) > 0.0 {
                quad
            } else {
                [quad[0], quad[3], quad[2], quad[1]]
            };
            let world = quad.map(|q| self.to_world(&q));
            triangles.push([world[0], world[1], world[2]]);
            triangles.push([world[0], world[2], world[3]]);
        }
        triangles
    }

    /// Ground-plane footprint corners as (x, z), counter-clockwise in the local frame.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hw, hl) = (0.5 * self.size.x, 0.5 * self.size.z);
        [(-hw, -hl), (hw, -hl), (hw, hl), (-hw, hl)].map(|(lx, lz)| {
            [
                self.center.x + c * lx + s * lz,
                self.center.z - s * lx + c * lz,
            ]
        })
    }

    /// Draws one point uniformly (by area) on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, faces: &WeightedIndex<f64>, rng: &mut R) -> Vec3 {
        let face = Face::ALL[faces.sample(rng)];
        let h = self.half_extents();
        let (a, b) = other_axes(face.axis);
        let mut local = Vec3::zeros();
        local[face.axis] = if face.positive { h[face.axis] } else { -h[face.axis] };
        local[a] = rng.gen_range(-h[a]..=h[a]);
        local[b] = rng.gen_range(-h[b]..=h[b]);
        self.to_world(&local)
    }

    pub fn face_weights(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(Face::ALL.map(|f| self.face_area(f))).expect("positive face areas")
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    }
}

/// A target object: an identified cuboid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub id: u32,
    pub center: Vec3,
    pub size: Vec3,
    pub yaw: f64,
}

impl ObjectBox {
    pub fn cuboid(&self) -> Cuboid {
        Cuboid {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
        }
    }
}

/// The 12 triangles of an object's cuboid, in world coordinates.
pub fn box_to_mesh(object: &ObjectBox) -> Vec<Triangle> {
    object.cuboid().to_mesh()
}

/// Samples `count` points on the object's surface, faces chosen in proportion
/// to their area. Deterministic in `seed`.
pub fn sample_surface_points(object: &ObjectBox, count: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = rng_for(seed, &[u64::from(object.id)]);
    let cuboid = object.cuboid();
    let weights = cuboid.face_weights();
    (0..count)
        .map(|_| cuboid.sample_surface(&weights, &mut rng))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub id: u32,
    pub objects: Vec<ObjectBox>,
}

impl Frame {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidInput(format!("frame {} has no objects", self.id)));
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidInput(format!(
                "frame {} has duplicate object ids",
                self.id
            )));
        }
        for o in &self.objects {
            o.cuboid().validate()?;
        }
        Ok(())
    }
}

/// Axis-aligned ground rectangle at height `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ground {
    pub min_x: f64,
    pub max_x: f64,
    pub min_z: f64,
    pub max_z: f64,
    pub y: f64,
}

impl Ground {
    pub fn to_mesh(&self) -> Vec<Triangle> {
        let c = |x: f64, z: f64| Vec3::new(x, self.y, z);
        let (a, b) = (c(self.min_x, self.min_z), c(self.max_x, self.min_z));
        let (d, e) = (c(self.max_x, self.max_z), c(self.min_x, self.max_z));
        // Normal +Y: (e - a) x (b - a) points up.
        vec![[a, e, d], [a, d, b]]
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_z - self.min_z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    #[serde(default)]
    pub boxes: Vec<Cuboid>,
    pub ground: Ground,
}

impl Environment {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            b.validate()?;
        }
        let g = &self.ground;
        if !(g.min_x < g.max_x && g.min_z < g.max_z && g.y.is_finite()) {
            return Err(Error::InvalidInput(
                "ground extent must have min < max on both axes".into(),
            ));
        }
        Ok(())
    }
}

/// A line segment constraining where a sensor may sit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VirtualRail {
    pub p1: Vec3,
    pub p2: Vec3,
}

impl VirtualRail {
    pub fn point_at(&self, fraction: f64) -> Vec3 {
        self.p1 + fraction * (self.p2 - self.p1)
    }
}

/// Unbounded sensor parameters on a rail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RailPose {
    pub rail_index: usize,
    pub t: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// A sensor pose in the world. Roll is fixed at zero.
///
/// `pitch` is measured from straight down (0) through horizontal (pi/2) to
/// straight up (pi); `yaw` is the heading about +Y, with yaw 0 looking along +Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPose {
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

impl CanonicalPose {
    /// Unit viewing direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        let (sp, cp) = self.pitch.sin_cos();
        let (sy, cy) = self.yaw.sin_cos();
        Vec3::new(sp * sy, -cp, sp * cy)
    }

    /// Pose at `position` whose optical axis passes through `target`.
    /// `None` when the two points coincide.
    pub fn looking_at(position: Vec3, target: Vec3) -> Option<Self> {
        let d = target - position;
        let len = d.norm();
        if len < 1e-9 {
            return None;
        }
        let yaw = d.x.atan2(d.z).rem_euclid(TAU);
        let pitch = (-d.y / len).clamp(-1.0, 1.0).acos();
        Some(Self {
            position,
            yaw,
            pitch,
        })
    }
}

pub fn rail_to_canonical(rail: &VirtualRail, pose: &RailPose) -> CanonicalPose {
    CanonicalPose {
        position: rail.point_at(sigmoid(pose.t)),
        yaw: TAU * sigmoid(pose.alpha),
        pitch: PI * sigmoid(pose.beta),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub environment: Environment,
    pub rails: Vec<VirtualRail>,
    pub frames: Vec<Frame>,
    /// Point the sensors are initially aimed at (e.g. a junction centre).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus_point: Option<Vec3>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        if self.rails.is_empty() {
            return Err(Error::InvalidInput("scenario needs at least one rail".into()));
        }
        for (i, r) in self.rails.iter().enumerate() {
            if (r.p1 - r.p2).norm() == 0.0 {
                return Err(Error::InvalidInput(format!("rail {i} has p1 == p2")));
            }
        }
        if self.frames.is_empty() {
            return Err(Error::InvalidInput("scenario needs at least one frame".into()));
        }
        for f in &self.frames {
            f.validate()?;
        }
        Ok(())
    }

    pub fn canonical(&self, pose: &RailPose) -> Result<CanonicalPose> {
        let rail = self.rails.get(pose.rail_index).ok_or_else(|| {
            Error::InvalidInput(format!(
                "rail index {} out of range ({} rails)",
                pose.rail_index,
                self.rails.len()
            ))
        })?;
        Ok(rail_to_canonical(rail, pose))
    }

    pub fn canonical_all(&self, poses: &[RailPose]) -> Result<Vec<CanonicalPose>> {
        poses.iter().map(|p| self.canonical(p)).collect()
    }

    pub fn object_count(&self) -> usize {
        self.frames.iter().map(|f| f.objects.len()).sum()
    }
}

/// Separating-axis overlap test between two ground footprints.
/// Touching footprints do not overlap.
pub fn footprints_overlap(a: &Cuboid, b: &Cuboid) -> bool {
    let (pa, pb) = (a.footprint(), b.footprint());
    let axes = [
        edge_normal(&pa, 0),
        edge_normal(&pa, 1),
        edge_normal(&pb, 0),
        edge_normal(&pb, 1),
    ];
    axes.iter().all(|axis| {
        let (amin, amax) = project_polygon(&pa, axis);
        let (bmin, bmax) = project_polygon(&pb, axis);
        amax > bmin && bmax > amin
    })
}

fn edge_normal(p: &[[f64; 2]; 4], i: usize) -> [f64; 2] {
    let e = [p[i + 1][0] - p[i][0], p[i + 1][1] - p[i][1]];
    [-e[1], e[0]]
}

fn project_polygon(p: &[[f64; 2]; 4], axis: &[f64; 2]) -> (f64, f64) {
    p.iter()
        .map(|v| v[0] * axis[0] + v[1] * axis[1])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
}

/// Rectangle on the ground where objects are placed, with the heading objects
/// on it face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lane {
    pub min_x: f64,
    pub max_x: f64,
    pub min_z: f64,
    pub max_z: f64,
    pub heading: f64,
    #[serde(default = "one")]
    pub weight: f64,
}

/// A family of objects (cars, vans, trucks...) with size ranges in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    #[serde(default = "one")]
    pub weight: f64,
    pub width: [f64; 2],
    pub height: [f64; 2],
    pub length: [f64; 2],
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGenConfig {
    pub frames: usize,
    pub lanes: Vec<Lane>,
    pub classes: Vec<ObjectClass>,
    /// Inclusive range of object counts per frame.
    pub objects_per_frame: [usize; 2],
    /// Uniform yaw jitter half-width around the lane heading, radians.
    #[serde(default)]
    pub yaw_jitter: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    pub ground_y: f64,
}

fn default_attempts() -> usize {
    200
}

impl FrameGenConfig {
    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.objects_per_frame;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidInput(format!(
                "objects_per_frame must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.lanes.is_empty() || self.classes.is_empty() {
            return Err(Error::InvalidInput(
                "generator needs at least one lane and one object class".into(),
            ));
        }
        for l in &self.lanes {
            if !(l.min_x < l.max_x && l.min_z < l.max_z && l.weight > 0.0) {
                return Err(Error::InvalidInput(format!("degenerate lane {l:?}")));
            }
        }
        for c in &self.classes {
            let ok = [c.width, c.height, c.length]
                .iter()
                .all(|r| r[0] > 0.0 && r[0] <= r[1]);
            if !ok || c.weight <= 0.0 {
                return Err(Error::InvalidInput(format!("bad object class {c:?}")));
            }
        }
        Ok(())
    }
}

/// Generates synthetic traffic frames: objects dropped on lanes with
/// lane-aligned yaw plus jitter, rejecting any placement whose footprint
/// overlaps an object already in the frame.
pub fn generate_frames(config: &FrameGenConfig, seed: u64) -> Result<Vec<Frame>> {
    config.validate()?;
    let lanes = WeightedIndex::new(config.lanes.iter().map(|l| l.weight))
        .map_err(|e| Error::InvalidInput(format!("lane weights: {e}")))?;
    let classes = WeightedIndex::new(config.classes.iter().map(|c| c.weight))
        .map_err(|e| Error::InvalidInput(format!("class weights: {e}")))?;
    let [lo, hi] = config.objects_per_frame;

    (0..config.frames)
        .map(|fi| {
            let mut rng = rng_for(seed, &[fi as u64]);
            let count = rng.gen_range(lo..=hi);
            let mut objects: Vec<ObjectBox> = Vec::with_capacity(count);
            for oi in 0..count {
                let mut placed = None;
                for _ in 0..config.max_attempts {
                    let lane = &config.lanes[lanes.sample(&mut rng)];
                    let class = &config.classes[classes.sample(&mut rng)];
                    let size = Vec3::new(
                        uniform(&mut rng, class.width),
                        uniform(&mut rng, class.height),
                        uniform(&mut rng, class.length),
                    );
                    let jitter = if config.yaw_jitter > 0.0 {
                        rng.gen_range(-config.yaw_jitter..=config.yaw_jitter)
                    } else {
                        0.0
                    };
                    let candidate = ObjectBox {
                        id: oi as u32,
                        center: Vec3::new(
                            rng.gen_range(lane.min_x..=lane.max_x),
                            config.ground_y + 0.5 * size.y,
                            rng.gen_range(lane.min_z..=lane.max_z),
                        ),
                        size,
                        yaw: (lane.heading + jitter).rem_euclid(TAU),
                    };
                    let c = candidate.cuboid();
                    if objects
                        .iter()
                        .all(|o| !footprints_overlap(&o.cuboid(), &c))
                    {
                        placed = Some(candidate);
                        break;
                    }
                }
                objects.push(placed.ok_or(Error::PlacementInfeasible {
                    frame: fi,
                    object: oi,
                    attempts: config.max_attempts,
                })?);
            }
            Ok(Frame {
                id: fi as u32,
                objects,
            })
        })
        .collect()
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..=range[1])
    }
}

/// Everything needed to synthesize a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub environment: Environment,
    pub rails: Vec<VirtualRail>,
    pub generator: FrameGenConfig,
    #[serde(default)]
    pub focus_point: Option<Vec3>,
}

impl ScenarioConfig {
    pub fn generate(&self, seed: u64) -> Result<Scenario> {
        let scenario = Scenario {
            environment: self.environment.clone(),
            rails: self.rails.clone(),
            frames: generate_frames(&self.generator, seed)?,
            focus_point: self.focus_point,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}
