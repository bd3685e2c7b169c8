//! Independent oracles shared by the integration tests. Nothing here calls
//! the rasterizer or the camera module.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vispose::camera::Intrinsics;
use vispose::scene::{
    CanonicalPose, Cuboid, Environment, Frame, Ground, ObjectBox, Scenario, Vec3, VirtualRail,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera basis built directly from the pose angles: (x, y, z) = (left, up, forward).
pub fn camera_basis(pose: &CanonicalPose) -> (Vec3, Vec3, Vec3) {
    let (st, ct) = pose.pitch.sin_cos();
    let (sp, cp) = pose.yaw.sin_cos();
    let forward = Vec3::new(st * sp, -ct, st * cp);
    let up = Vec3::new(ct * sp, st, ct * cp);
    let left = up.cross(&forward);
    (left, up, forward)
}

/// Ray through image position `(u, v)`, scaled so its forward component is 1:
/// the ray parameter equals camera-axis depth.
pub fn pixel_ray(pose: &CanonicalPose, intr: &Intrinsics, u: f64, v: f64) -> Vec3 {
    let f = 0.5 * f64::from(intr.width) / (0.5 * intr.hfov).tan();
    let cx = 0.5 * f64::from(intr.width);
    let cy = 0.5 * f64::from(intr.height);
    let (x, y, z) = camera_basis(pose);
    z + x * ((u - cx) / f) + y * ((v - cy) / f)
}

/// Naive pinhole projection: (u, v, depth).
pub fn naive_project(pose: &CanonicalPose, intr: &Intrinsics, p: &Vec3) -> (f64, f64, f64) {
    let f = 0.5 * f64::from(intr.width) / (0.5 * intr.hfov).tan();
    let (x, y, z) = camera_basis(pose);
    let r = p - pose.position;
    let (cx_, cy_, cz_) = (x.dot(&r), y.dot(&r), z.dot(&r));
    (
        0.5 * f64::from(intr.width) + f * cx_ / cz_,
        0.5 * f64::from(intr.height) + f * cy_ / cz_,
        cz_,
    )
}

/// Slab test in the box frame: entry and exit ray parameters.
pub fn ray_box(origin: &Vec3, dir: &Vec3, b: &Cuboid) -> Option<(f64, f64)> {
    let (s, c) = b.yaw.sin_cos();
    // World -> local: inverse of a rotation about +Y by yaw.
    let to_local = |v: &Vec3| Vec3::new(c * v.x - s * v.z, v.y, s * v.x + c * v.z);
    let o = to_local(&(origin - b.center));
    let d = to_local(dir);
    let half = b.size * 0.5;
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let b2 = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b2));
        t1 = t1.min(a.max(b2));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// What the ray-cast oracle sees along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Object(u32, f64),
    Static(u32, f64),
    Ground(f64),
}

impl Hit {
    pub fn depth(&self) -> f64 {
        match *self {
            Hit::Object(_, d) | Hit::Static(_, d) | Hit::Ground(d) => d,
        }
    }
}

/// Nearest surface crossing in `[near, far]`. A box whose entry is clipped by
/// the near plane is seen from inside at its exit.
pub fn first_surface(enter: f64, exit: f64, near: f64, far: f64) -> Option<f64> {
    [enter, exit].into_iter().find(|&t| t >= near && t <= far)
}

pub fn cast(
    origin: &Vec3,
    dir: &Vec3,
    objects: &[ObjectBox],
    env: Option<&Environment>,
    near: f64,
    far: f64,
) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut offer = |h: Hit| {
        if best.is_none_or(|b| h.depth() < b.depth()) {
            best = Some(h);
        }
    };
    for o in objects {
        if let Some((a, b)) = ray_box(origin, dir, &o.cuboid()) {
            if let Some(t) = first_surface(a, b, near, far) {
                offer(Hit::Object(o.id, t));
            }
        }
    }
    if let Some(env) = env {
        for (k, c) in env.boxes.iter().enumerate() {
            if let Some((a, b)) = ray_box(origin, dir, c) {
                if let Some(t) = first_surface(a, b, near, far) {
                    offer(Hit::Static(k as u32, t));
                }
            }
        }
        let g = &env.ground;
        if dir.y.abs() > 1e-15 {
            let t = (g.y - origin.y) / dir.y;
            let p = origin + dir * t;
            if t >= near
                && t <= far
                && p.x >= g.min_x
                && p.x <= g.max_x
                && p.z >= g.min_z
                && p.z <= g.max_z
            {
                offer(Hit::Ground(t));
            }
        }
    }
    best
}

/// Ray-cast image: one optional hit per pixel centre, row-major.
pub fn raycast_image(
    pose: &CanonicalPose,
    intr: &Intrinsics,
    objects: &[ObjectBox],
    env: Option<&Environment>,
) -> Vec<Option<Hit>> {
    let mut out = Vec::with_capacity(intr.pixel_count() as usize);
    for row in 0..intr.height {
        for col in 0..intr.width {
            let dir = pixel_ray(pose, intr, f64::from(col) + 0.5, f64::from(row) + 0.5);
            out.push(cast(&pose.position, &dir, objects, env, intr.near, intr.far));
        }
    }
    out
}

/// Distance from `p` to the surface of a box.
pub fn distance_to_box_surface(p: &Vec3, b: &Cuboid) -> f64 {
    let (s, c) = b.yaw.sin_cos();
    let r = p - b.center;
    let local = Vec3::new(c * r.x - s * r.z, r.y, s * r.x + c * r.z);
    let half = b.size * 0.5;
    let q = local.abs() - half;
    let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
    let inside = q.x.max(q.y).max(q.z).min(0.0);
    outside + inside.abs()
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    o1 * o2 < 0.0 && o3 * o4 < 0.0
}

fn inside_convex(p: [f64; 2], poly: &[[f64; 2]; 4]) -> bool {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b) = (poly[i], poly[(i + 1) % 4]);
        let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        if cross == 0.0 {
            return false;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

/// Brute-force interior overlap of two convex quadrilaterals: any proper edge
/// crossing, or a vertex of one strictly inside the other.
pub fn quads_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for i in 0..4 {
        for j in 0..4 {
            if segments_cross(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]) {
                return true;
            }
        }
    }
    a.iter().any(|p| inside_convex(*p, b)) || b.iter().any(|p| inside_convex(*p, a))
}

pub fn random_box<R: Rng>(rng: &mut R, id: u32, spread: f64) -> ObjectBox {
    let size = Vec3::new(
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..3.0),
        rng.gen_range(0.5..4.0),
    );
    ObjectBox {
        id,
        center: Vec3::new(
            rng.gen_range(-spread..spread),
            0.5 * size.y,
            rng.gen_range(-spread..spread),
        ),
        size,
        yaw: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// A pose on a circle around the origin looking at a point near it.
pub fn random_pose_around<R: Rng>(rng: &mut R, radius: [f64; 2], height: [f64; 2]) -> CanonicalPose {
    let r = rng.gen_range(radius[0]..radius[1]);
    let a = rng.gen_range(0.0..std::f64::consts::TAU);
    let position = Vec3::new(r * a.cos(), rng.gen_range(height[0]..height[1]), r * a.sin());
    let target = Vec3::new(rng.gen_range(-1.0..1.0), 0.5, rng.gen_range(-1.0..1.0));
    CanonicalPose::looking_at(position, target).expect("distinct points")
}

pub fn flat_env(half: f64) -> Environment {
    Environment {
        boxes: vec![],
        ground: Ground {
            min_x: -half,
            max_x: half,
            min_z: -half,
            max_z: half,
            y: 0.0,
        },
    }
}

/// One rail along +X at height 5, `offset` metres from the origin along -Z.
pub fn single_rail_scenario(frames: Vec<Frame>, offset: f64) -> Scenario {
    Scenario {
        environment: flat_env(40.0),
        rails: vec![VirtualRail {
            p1: Vec3::new(-10.0, 5.0, -offset),
            p2: Vec3::new(10.0, 5.0, -offset),
        }],
        frames,
        focus_point: Some(Vec3::zeros()),
    }
}

/// A small random scenario: a few frames of boxes, two rails.
pub fn random_scenario<R: Rng>(rng: &mut R, frames: usize, objects: usize) -> Scenario {
    let frames = (0..frames as u32)
        .map(|id| Frame {
            id,
            objects: (0..objects as u32).map(|k| random_box(rng, k, 6.0)).collect(),
        })
        .collect();
    Scenario {
        environment: flat_env(30.0),
        rails: vec![
            VirtualRail {
                p1: Vec3::new(-12.0, 5.0, -12.0),
                p2: Vec3::new(12.0, 5.0, -12.0),
            },
            VirtualRail {
                p1: Vec3::new(12.0, 5.0, -12.0),
                p2: Vec3::new(12.0, 5.0, 12.0),
            },
        ],
        frames,
        focus_point: Some(Vec3::zeros()),
    }
}

pub fn demo_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}
