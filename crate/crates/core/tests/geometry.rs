mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use vispose::camera::{in_frustum, CameraMatrices, ImagePoint, Intrinsics};
use vispose::scene::{
    box_to_mesh, footprints_overlap, generate_frames, rail_to_canonical, sample_surface_points,
    CanonicalPose, FrameGenConfig, Lane, ObjectBox, ObjectClass, RailPose, Vec3, VirtualRail,
};

fn triangle_area(t: &[Vec3; 3]) -> f64 {
    0.5 * (t[1] - t[0]).cross(&(t[2] - t[0])).norm()
}

#[test]
fn mesh_area_matches_closed_form() {
    let mut r = rng(1);
    for k in 0..200 {
        let b = random_box(&mut r, k, 5.0);
        let area: f64 = box_to_mesh(&b).iter().map(triangle_area).sum();
        let (w, h, l) = (b.size.x, b.size.y, b.size.z);
        let expected = 2.0 * (w * l + w * h + l * h);
        assert!((area - expected).abs() < 1e-9 * expected, "{area} vs {expected}");
    }
}

#[test]
fn face_sampling_follows_face_areas() {
    let b = ObjectBox {
        id: 0,
        center: Vec3::new(1.0, 2.0, -3.0),
        size: Vec3::new(2.0, 1.0, 4.0),
        yaw: 0.7,
    };
    let c = b.cuboid();
    let n = 100_000;
    let pts = sample_surface_points(&b, n, 42);
    let half = b.size * 0.5;
    // Bin each point by the face it lies on: -x, +x, -y, +y, -z, +z.
    let mut counts = [0u64; 6];
    for p in &pts {
        let q = c.to_local(p);
        let axis = (0..3)
            .max_by(|&i, &j| (q[i].abs() / half[i]).total_cmp(&(q[j].abs() / half[j])))
            .unwrap();
        counts[2 * axis + usize::from(q[axis] > 0.0)] += 1;
    }
    let (w, h, l) = (2.0, 1.0, 4.0);
    let face = [h * l, h * l, w * l, w * l, w * h, w * h];
    let total: f64 = face.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(face)
        .map(|(&o, a)| {
            let e = n as f64 * a / total;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}, counts {counts:?}");
}

#[test]
fn samples_lie_on_the_surface() {
    let mut r = rng(2);
    for k in 0..50 {
        let b = random_box(&mut r, k, 10.0);
        for p in sample_surface_points(&b, 400, k as u64) {
            assert!(distance_to_box_surface(&p, &b.cuboid()) < 1e-9);
        }
    }
}

fn generator() -> FrameGenConfig {
    FrameGenConfig {
        frames: 300,
        lanes: vec![
            Lane { min_x: -15.0, max_x: 15.0, min_z: -4.0, max_z: -1.0, heading: 1.57, weight: 1.0 },
            Lane { min_x: -3.0, max_x: 3.0, min_z: -15.0, max_z: 15.0, heading: 0.0, weight: 1.0 },
        ],
        classes: vec![
            ObjectClass { weight: 3.0, width: [1.7, 1.9], height: [1.4, 1.6], length: [4.0, 4.8] },
            ObjectClass { weight: 1.0, width: [2.4, 2.6], height: [3.0, 3.8], length: [8.0, 10.0] },
        ],
        objects_per_frame: [3, 7],
        yaw_jitter: 0.2,
        max_attempts: 500,
        ground_y: 0.0,
    }
}

#[test]
fn generated_frames_have_no_overlapping_footprints() {
    let frames = generate_frames(&generator(), 11).unwrap();
    let mut pairs = 0;
    for f in &frames {
        for (i, a) in f.objects.iter().enumerate() {
            for b in &f.objects[i + 1..] {
                pairs += 1;
                let (ca, cb) = (a.cuboid(), b.cuboid());
                assert!(!quads_overlap(&ca.footprint(), &cb.footprint()), "frame {}: {a:?} {b:?}", f.id);
            }
        }
    }
    assert!(pairs > 500);
}

#[test]
fn generation_is_reproducible() {
    let mut g = generator();
    g.frames = 1000;
    let a = serde_json::to_string(&generate_frames(&g, 7).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_frames(&g, 7).unwrap()).unwrap();
    assert_eq!(a, b);
    g.objects_per_frame = [1, 1];
    assert!(generate_frames(&g, 7).unwrap().iter().all(|f| f.objects.len() == 1));
}

#[test]
fn projection_matches_naive_pinhole() {
    let intr = Intrinsics::default();
    let mut r = rng(3);
    for _ in 0..1000 {
        let pose = CanonicalPose {
            position: Vec3::new(r.gen_range(-20.0..20.0), r.gen_range(0.0..10.0), r.gen_range(-20.0..20.0)),
            yaw: r.gen_range(0.0..std::f64::consts::TAU),
            pitch: r.gen_range(0.01..std::f64::consts::PI - 0.01),
        };
        let p = Vec3::new(r.gen_range(-30.0..30.0), r.gen_range(-5.0..10.0), r.gen_range(-30.0..30.0));
        let cams = CameraMatrices::new(&intr, &pose);
        let (u, v, d) = naive_project(&pose, &intr, &p);
        if d.abs() < 1e-3 {
            continue;
        }
        let ip = cams.project(&p).unwrap();
        let scale = 1.0 + u.abs().max(v.abs());
        assert!((ip.u - u).abs() < 1e-9 * scale && (ip.v - v).abs() < 1e-9 * scale, "{ip:?} vs {u} {v}");
        assert!((ip.d - d).abs() < 1e-9);
    }
}

#[test]
fn unproject_round_trip() {
    let intr = Intrinsics::default();
    let mut r = rng(4);
    let pose = CanonicalPose { position: Vec3::new(3.0, 5.0, -2.0), yaw: 1.1, pitch: 1.2 };
    let cams = CameraMatrices::new(&intr, &pose);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let ip = ImagePoint {
            u: r.gen_range(0.0..200.0),
            v: r.gen_range(0.0..200.0),
            d: r.gen_range(1.0..100.0),
        };
        let p = cams.unproject(&ip).unwrap();
        let back = cams.project(&p).unwrap();
        let q = cams.unproject(&back).unwrap();
        worst = worst.max((p - q).norm());
    }
    assert!(worst < 1e-6, "max round-trip error {worst}");
}

fn rotate_y(v: &Vec3, a: f64) -> Vec3 {
    let (s, c) = a.sin_cos();
    Vec3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

#[test]
fn frustum_membership_is_invariant_under_rigid_motion() {
    // Roll is fixed, so the camera-preserving rigid motions are rotations about
    // +Y combined with translations.
    let intr = Intrinsics::default();
    let mut r = rng(5);
    for _ in 0..100 {
        let pose = CanonicalPose {
            position: Vec3::new(r.gen_range(-5.0..5.0), r.gen_range(0.0..6.0), r.gen_range(-5.0..5.0)),
            yaw: r.gen_range(0.0..std::f64::consts::TAU),
            pitch: r.gen_range(0.2..2.9),
        };
        let a = r.gen_range(0.0..std::f64::consts::TAU);
        let shift = Vec3::new(r.gen_range(-50.0..50.0), r.gen_range(-5.0..5.0), r.gen_range(-50.0..50.0));
        let moved = CanonicalPose {
            position: rotate_y(&pose.position, a) + shift,
            yaw: (pose.yaw + a).rem_euclid(std::f64::consts::TAU),
            pitch: pose.pitch,
        };
        let (c0, c1) = (CameraMatrices::new(&intr, &pose), CameraMatrices::new(&intr, &moved));
        for _ in 0..50 {
            let p = pose.position + Vec3::new(r.gen_range(-40.0..40.0), r.gen_range(-10.0..10.0), r.gen_range(-40.0..40.0));
            let q = rotate_y(&p, a) + shift;
            let a0 = c0.project(&p).is_some_and(|ip| in_frustum(&ip, &intr));
            let a1 = c1.project(&q).is_some_and(|ip| in_frustum(&ip, &intr));
            assert_eq!(a0, a1);
        }
    }
}

proptest! {
    #[test]
    fn rail_position_stays_on_segment(t in -1e3f64..1e3, alpha in -50f64..50.0, beta in -50f64..50.0) {
        let rail = VirtualRail { p1: Vec3::new(-3.0, 5.2, 1.0), p2: Vec3::new(7.0, 5.2, -4.0) };
        let c = rail_to_canonical(&rail, &RailPose { rail_index: 0, t, alpha, beta });
        let along = (c.position - rail.p1).dot(&(rail.p2 - rail.p1)) / (rail.p2 - rail.p1).norm_squared();
        let off = (c.position - rail.point_at(along)).norm();
        prop_assert!((0.0..=1.0).contains(&along));
        prop_assert!(off < 1e-9);
    }

    #[test]
    fn angles_stay_strictly_inside_their_ranges(alpha in -30f64..30.0, beta in -30f64..30.0) {
        let rail = VirtualRail { p1: Vec3::zeros(), p2: Vec3::new(1.0, 0.0, 0.0) };
        let c = rail_to_canonical(&rail, &RailPose { rail_index: 0, t: 0.0, alpha, beta });
        prop_assert!(c.yaw > 0.0 && c.yaw < std::f64::consts::TAU);
        prop_assert!(c.pitch > 0.0 && c.pitch < std::f64::consts::PI);
    }

    #[test]
    fn sat_overlap_agrees_with_brute_force(
        ax in -3f64..3.0, az in -3f64..3.0, ay in 0f64..6.3,
        bx in -3f64..3.0, bz in -3f64..3.0, by in 0f64..6.3,
        w in 0.5f64..3.0, l in 0.5f64..5.0,
    ) {
        let a = ObjectBox { id: 0, center: Vec3::new(ax, 0.5, az), size: Vec3::new(w, 1.0, l), yaw: ay }.cuboid();
        let b = ObjectBox { id: 1, center: Vec3::new(bx, 0.5, bz), size: Vec3::new(l, 1.0, w), yaw: by }.cuboid();
        prop_assert_eq!(footprints_overlap(&a, &b), quads_overlap(&a.footprint(), &b.footprint()));
    }
}
