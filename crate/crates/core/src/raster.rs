//! Software rasterizer producing depth and fragment-id buffers, depth-buffer
//! re-projection, and the integer per-object visibility metric.
//!
//! Pixels are sampled at their centres `(i + 0.5, j + 0.5)`. Shared triangle
//! edges follow a top-left ownership rule so no centre is drawn twice by the
//! same mesh. Equal depths resolve to the lower [`SourceId`]. Depth is the
//! camera-axis distance, interpolated perspective-correctly (1/Z is affine in
//! screen space). Triangles are clipped against the near plane; fragments past
//! the far plane are discarded.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::camera::{CameraMatrices, ImagePoint, Intrinsics};
use crate::scene::{box_to_mesh, CanonicalPose, Environment, Frame, ObjectBox, Triangle, Vec3};

/// Which mesh a fragment came from. Ordering is the depth tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceId {
    Object(u32),
    /// Static environment box, by index.
    Static(u32),
    Ground,
}

/// Integer code used in buffer dumps and PLY exports.
pub const BACKGROUND_CODE: i32 = -1;

impl SourceId {
    /// Objects map to their id, the ground to -2, static box `k` to `-3 - k`.
    pub fn code(self) -> i32 {
        match self {
            SourceId::Object(id) => id as i32,
            SourceId::Ground => -2,
            SourceId::Static(k) => -3 - k as i32,
        }
    }

    /// Inverse of [`SourceId::code`]; `Some(None)` is background.
    pub fn from_code(code: i32) -> Option<Option<SourceId>> {
        match code {
            c if c >= 0 => Some(Some(SourceId::Object(c as u32))),
            -1 => Some(None),
            -2 => Some(Some(SourceId::Ground)),
            c => Some(Some(SourceId::Static((-3 - c) as u32))),
        }
    }
}

pub fn fragment_code(id: Option<SourceId>) -> i32 {
    id.map_or(BACKGROUND_CODE, SourceId::code)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub id: SourceId,
    pub triangles: Vec<Triangle>,
}

/// Per-pixel nearest depth, row-major; `f64::INFINITY` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBuffer {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
}

impl DepthBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width as usize * height as usize],
        }
    }

    pub fn at(&self, col: u32, row: u32) -> Option<f64> {
        let d = self.depth[row as usize * self.width as usize + col as usize];
        d.is_finite().then_some(d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragmentBuffer {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<Option<SourceId>>,
}

impl FragmentBuffer {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ids: vec![None; width as usize * height as usize],
        }
    }

    pub fn at(&self, col: u32, row: u32) -> Option<SourceId> {
        self.ids[row as usize * self.width as usize + col as usize]
    }

    /// Pixel count per object id.
    pub fn object_counts(&self) -> HashMap<u32, u64> {
        let mut counts = HashMap::new();
        for id in self.ids.iter().flatten() {
            if let SourceId::Object(o) = id {
                *counts.entry(*o).or_insert(0) += 1;
            }
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudPoint {
    pub position: Vec3,
    pub source: SourceId,
    pub sensor: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
    }
}

#[derive(Clone, Copy)]
struct ScreenVertex {
    x: f64,
    y: f64,
    inv_z: f64,
}

struct Target<'a> {
    intr: &'a Intrinsics,
    focal: f64,
    cx: f64,
    cy: f64,
    depth: &'a mut DepthBuffer,
    frags: &'a mut FragmentBuffer,
}

fn edge(a: &ScreenVertex, b: &ScreenVertex, px: f64, py: f64) -> f64 {
    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x)
}

/// Whether a directed edge owns pixel centres lying exactly on it. The reverse
/// edge of a neighbouring triangle gets the opposite answer.
fn owns_edge(a: &ScreenVertex, b: &ScreenVertex) -> bool {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

fn inside(w: f64, owned: bool) -> bool {
    w > 0.0 || (w == 0.0 && owned)
}

/// Clips a camera-space polygon to `z >= near`.
fn clip_near(poly: &[Vec3], near: f64) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ain, bin) = (a.z >= near, b.z >= near);
        if ain {
            out.push(a);
        }
        if ain != bin {
            let t = (near - a.z) / (b.z - a.z);
            let mut p = a + t * (b - a);
            p.z = near;
            out.push(p);
        }
    }
    out
}

impl Target<'_> {
    fn draw(&mut self, tri: &Triangle, cams: &CameraMatrices, id: SourceId) {
        let q = tri.map(|p| cams.to_camera(&p));
        if q.iter().all(|v| v.z < self.intr.near) || q.iter().all(|v| v.z > self.intr.far) {
            return;
        }
        let poly = if q.iter().all(|v| v.z >= self.intr.near) {
            q.to_vec()
        } else {
            clip_near(&q, self.intr.near)
        };
        if poly.len() < 3 {
            return;
        }
        let screen: Vec<ScreenVertex> = poly
            .iter()
            .map(|v| ScreenVertex {
                x: self.cx + self.focal * v.x / v.z,
                y: self.cy + self.focal * v.y / v.z,
                inv_z: 1.0 / v.z,
            })
            .collect();
        for k in 1..screen.len() - 1 {
            self.fill(screen[0], screen[k], screen[k + 1], id);
        }
    }

    fn fill(&mut self, a: ScreenVertex, b: ScreenVertex, c: ScreenVertex, id: SourceId) {
        let area = edge(&a, &b, c.x, c.y);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        let (a, b, c, area) = if area < 0.0 { (a, c, b, -area) } else { (a, b, c, area) };

        let (w, h) = (self.intr.width as i64, self.intr.height as i64);
        let min_x = a.x.min(b.x).min(c.x);
        let max_x = a.x.max(b.x).max(c.x);
        let min_y = a.y.min(b.y).min(c.y);
        let max_y = a.y.max(b.y).max(c.y);
        let col0 = ((min_x - 0.5).ceil().max(0.0) as i64).min(w);
        let col1 = ((max_x - 0.5).floor().min((w - 1) as f64) as i64).max(-1);
        let row0 = ((min_y - 0.5).ceil().max(0.0) as i64).min(h);
        let row1 = ((max_y - 0.5).floor().min((h - 1) as f64) as i64).max(-1);

        let own = [owns_edge(&b, &c), owns_edge(&c, &a), owns_edge(&a, &b)];
        let (near, far) = (self.intr.near, self.intr.far);
        for row in row0..=row1 {
            let py = row as f64 + 0.5;
            for col in col0..=col1 {
                let px = col as f64 + 0.5;
                let w0 = edge(&b, &c, px, py);
                let w1 = edge(&c, &a, px, py);
                let w2 = edge(&a, &b, px, py);
                if !(inside(w0, own[0]) && inside(w1, own[1]) && inside(w2, own[2])) {
                    continue;
                }
                let inv_z = (w0 * a.inv_z + w1 * b.inv_z + w2 * c.inv_z) / area;
                let depth = (1.0 / inv_z).max(near);
                if depth > far {
                    continue;
                }
                let idx = row as usize * w as usize + col as usize;
                let current = self.depth.depth[idx];
                let wins = depth < current
                    || (depth == current && self.frags.ids[idx].is_none_or(|cur| id < cur));
                if wins {
                    self.depth.depth[idx] = depth;
                    self.frags.ids[idx] = Some(id);
                }
            }
        }
    }
}

/// Renders `meshes` from one camera.
pub fn rasterize(
    meshes: &[Mesh],
    cams: &CameraMatrices,
    intr: &Intrinsics,
) -> (DepthBuffer, FragmentBuffer) {
    let mut depth = DepthBuffer::new(intr.width, intr.height);
    let mut frags = FragmentBuffer::new(intr.width, intr.height);
    let (cx, cy) = cams.principal_point();
    let mut target = Target {
        intr,
        focal: cams.focal(),
        cx,
        cy,
        depth: &mut depth,
        frags: &mut frags,
    };
    for mesh in meshes {
        for tri in &mesh.triangles {
            target.draw(tri, cams, mesh.id);
        }
    }
    (depth, frags)
}

pub fn object_mesh(object: &ObjectBox) -> Mesh {
    Mesh {
        id: SourceId::Object(object.id),
        triangles: box_to_mesh(object),
    }
}

/// Ground and static boxes.
pub fn environment_meshes(env: &Environment) -> Vec<Mesh> {
    let mut meshes: Vec<Mesh> = env
        .boxes
        .iter()
        .enumerate()
        .map(|(k, b)| Mesh {
            id: SourceId::Static(k as u32),
            triangles: b.to_mesh(),
        })
        .collect();
    meshes.push(Mesh {
        id: SourceId::Ground,
        triangles: env.ground.to_mesh(),
    });
    meshes
}

/// All objects of a frame plus the environment.
pub fn frame_meshes(frame: &Frame, env: &Environment) -> Vec<Mesh> {
    let mut meshes: Vec<Mesh> = frame.objects.iter().map(object_mesh).collect();
    meshes.extend(environment_meshes(env));
    meshes
}

/// One 3D point per rendered pixel, unprojected at the pixel centre.
pub fn reproject(
    db: &DepthBuffer,
    fb: &FragmentBuffer,
    cams: &CameraMatrices,
    sensor_id: u32,
) -> PointCloud {
    let mut points = Vec::new();
    for row in 0..db.height {
        for col in 0..db.width {
            let (Some(d), Some(source)) = (db.at(col, row), fb.at(col, row)) else {
                continue;
            };
            let ip = ImagePoint {
                u: f64::from(col) + 0.5,
                v: f64::from(row) + 0.5,
                d,
            };
            let position = cams.unproject(&ip).expect("rendered depth is positive");
            points.push(CloudPoint {
                position,
                source,
                sensor: sensor_id,
            });
        }
    }
    PointCloud { points }
}

/// Nearest-pixel depth lookup with coordinates clamped to the image.
/// `None` is background.
pub fn depth_lookup(db: &DepthBuffer, u: f64, v: f64) -> Option<f64> {
    let clamp = |x: f64, n: u32| -> u32 {
        if x.is_nan() {
            0
        } else {
            (x.floor().max(0.0) as u64).min(u64::from(n - 1)) as u32
        }
    };
    db.at(clamp(u, db.width), clamp(v, db.height))
}

/// Visibility counts of every object in `frame` (in `frame.objects` order)
/// from a single sensor, together with that sensor's buffers.
pub fn render_frame(
    frame: &Frame,
    env: &Environment,
    pose: &CanonicalPose,
    intr: &Intrinsics,
) -> (DepthBuffer, FragmentBuffer, Vec<u64>) {
    let cams = CameraMatrices::new(intr, pose);
    let (db, fb) = rasterize(&frame_meshes(frame, env), &cams, intr);
    let counts = fb.object_counts();
    let per_object = frame
        .objects
        .iter()
        .map(|o| counts.get(&o.id).copied().unwrap_or(0))
        .collect();
    (db, fb, per_object)
}

/// Per-object visibility of a whole frame under a sensor set: pixels showing
/// each object, summed over sensors.
pub fn frame_visibility(
    frame: &Frame,
    env: &Environment,
    sensors: &[CanonicalPose],
    intr: &Intrinsics,
) -> Vec<u64> {
    let mut total = vec![0u64; frame.objects.len()];
    for pose in sensors {
        let (_, _, counts) = render_frame(frame, env, pose, intr);
        for (t, c) in total.iter_mut().zip(counts) {
            *t += c;
        }
    }
    total
}

/// Number of pixels, over all sensors, whose nearest surface belongs to
/// `object`. Each sensor renders the full frame and environment.
pub fn vis_metric(
    object: &ObjectBox,
    sensors: &[CanonicalPose],
    frame: &Frame,
    env: &Environment,
    intr: &Intrinsics,
) -> u64 {
    let meshes = frame_meshes(frame, env);
    sensors
        .iter()
        .map(|pose| {
            let cams = CameraMatrices::new(intr, pose);
            let (_, fb) = rasterize(&meshes, &cams, intr);
            fb.ids
                .iter()
                .filter(|id| **id == Some(SourceId::Object(object.id)))
                .count() as u64
        })
        .sum()
}
