mod common;

use common::*;
use rand::Rng;
use vispose::camera::{CameraMatrices, Intrinsics};
use vispose::raster::{
    environment_meshes, frame_meshes, object_mesh, rasterize, render_frame, reproject, vis_metric,
    SourceId,
};
use vispose::scene::{Cuboid, Environment, Frame, ObjectBox, Vec3};

fn same_source(h: &Hit, s: SourceId) -> bool {
    match (*h, s) {
        (Hit::Object(a, _), SourceId::Object(b)) | (Hit::Static(a, _), SourceId::Static(b)) => a == b,
        (Hit::Ground(_), SourceId::Ground) => true,
        _ => false,
    }
}

#[test]
fn single_cuboid_matches_ray_cast() {
    let intr = Intrinsics::default();
    let mut r = rng(10);
    for k in 0..5 {
        let b = random_box(&mut r, 0, 1.0);
        let pose = random_pose_around(&mut r, [6.0, 12.0], [2.0, 6.0]);
        let cams = CameraMatrices::new(&intr, &pose);
        let (db, fb) = rasterize(&[object_mesh(&b)], &cams, &intr);
        let oracle = raycast_image(&pose, &intr, std::slice::from_ref(&b), None);
        let mut disagree = 0;
        let mut hits = 0;
        for (i, h) in oracle.iter().enumerate() {
            match (h, db.depth[i].is_finite()) {
                (Some(h), true) => {
                    hits += 1;
                    if (h.depth() - db.depth[i]).abs() > 1e-3 {
                        disagree += 1;
                    }
                }
                (None, false) => {}
                _ => disagree += 1,
            }
            assert_eq!(fb.ids[i].is_some(), db.depth[i].is_finite());
        }
        assert!(hits > 100, "scene {k}: box barely visible");
        assert!(disagree * 1000 <= hits, "scene {k}: {disagree} of {hits} pixels disagree");
    }
}

#[test]
fn static_boxes_and_ground_match_ray_cast() {
    let intr = Intrinsics::default();
    let mut r = rng(11);
    let mut env = flat_env(25.0);
    env.boxes.push(Cuboid { center: Vec3::new(0.0, 2.0, 4.0), size: Vec3::new(10.0, 4.0, 0.5), yaw: 0.3 });
    for _ in 0..3 {
        let objects: Vec<ObjectBox> = (0..4).map(|k| random_box(&mut r, k, 5.0)).collect();
        let frame = Frame { id: 0, objects: objects.clone() };
        let pose = random_pose_around(&mut r, [10.0, 15.0], [3.0, 8.0]);
        let cams = CameraMatrices::new(&intr, &pose);
        let (db, fb) = rasterize(&frame_meshes(&frame, &env), &cams, &intr);
        let oracle = raycast_image(&pose, &intr, &objects, Some(&env));
        let mut bad_id = 0;
        let mut bad_depth = 0;
        let mut n = 0;
        for (i, h) in oracle.iter().enumerate() {
            let Some(h) = h else { continue };
            n += 1;
            if !fb.ids[i].is_some_and(|s| same_source(h, s)) {
                bad_id += 1;
            }
            if (h.depth() - db.depth[i]).abs() > 1e-3 {
                bad_depth += 1;
            }
        }
        assert!(bad_depth * 1000 <= n, "{bad_depth} / {n}");
        assert!(bad_id * 200 <= n, "{bad_id} / {n}");
    }
}

#[test]
fn reprojected_points_lie_on_surfaces() {
    let intr = Intrinsics::default();
    let mut r = rng(12);
    let b = random_box(&mut r, 3, 1.0);
    let pose = random_pose_around(&mut r, [5.0, 8.0], [2.0, 5.0]);
    let cams = CameraMatrices::new(&intr, &pose);
    let (db, fb) = rasterize(&[object_mesh(&b)], &cams, &intr);
    let cloud = reproject(&db, &fb, &cams, 7);
    assert!(cloud.points.len() > 100);
    for p in &cloud.points {
        assert_eq!(p.source, SourceId::Object(3));
        assert_eq!(p.sensor, 7);
        let d = distance_to_box_surface(&p.position, &b.cuboid());
        assert!(d < 2e-3, "{:?} is {d} m off the surface", p.position);
    }
}

#[test]
fn adding_a_mesh_never_increases_depth() {
    let intr = Intrinsics::default();
    let mut r = rng(13);
    for _ in 0..10 {
        let objects: Vec<ObjectBox> = (0..4).map(|k| random_box(&mut r, k, 4.0)).collect();
        let pose = random_pose_around(&mut r, [8.0, 14.0], [2.0, 7.0]);
        let cams = CameraMatrices::new(&intr, &pose);
        let mut meshes = environment_meshes(&flat_env(20.0));
        let (mut prev, _) = rasterize(&meshes, &cams, &intr);
        for o in &objects {
            meshes.push(object_mesh(o));
            let (db, _) = rasterize(&meshes, &cams, &intr);
            for (a, b) in db.depth.iter().zip(&prev.depth) {
                assert!(a <= b);
            }
            prev = db;
        }
    }
}

fn demo_like_frame(r: &mut impl Rng) -> (Frame, Environment) {
    let objects: Vec<ObjectBox> = (0..5).map(|k| random_box(r, k, 5.0)).collect();
    (Frame { id: 0, objects }, flat_env(20.0))
}

#[test]
fn removing_an_occluder_never_decreases_visibility() {
    let intr = Intrinsics::default();
    let mut r = rng(14);
    for _ in 0..10 {
        let (frame, env) = demo_like_frame(&mut r);
        let sensors: Vec<_> = (0..2).map(|_| random_pose_around(&mut r, [8.0, 14.0], [2.0, 6.0])).collect();
        let drop = r.gen_range(0..frame.objects.len());
        let mut reduced = frame.clone();
        reduced.objects.remove(drop);
        for o in &reduced.objects {
            let before = vis_metric(o, &sensors, &frame, &env, &intr);
            let after = vis_metric(o, &sensors, &reduced, &env, &intr);
            assert!(after >= before, "object {} went {before} -> {after}", o.id);
        }
    }
}

#[test]
fn visibility_is_bounded_by_total_pixels() {
    let intr = Intrinsics { width: 64, height: 48, ..Intrinsics::default() };
    let mut r = rng(15);
    // A box enclosing the camera fills every pixel.
    let big = ObjectBox { id: 0, center: Vec3::zeros(), size: Vec3::new(8.0, 8.0, 8.0), yaw: 0.4 };
    let frame = Frame { id: 0, objects: vec![big] };
    let mut env = flat_env(20.0);
    env.ground.y = -10.0;
    for n in 1..4 {
        let sensors: Vec<_> = (0..n).map(|_| random_pose_around(&mut r, [0.0, 1.0], [-1.0, 1.0])).collect();
        let v = vis_metric(&frame.objects[0], &sensors, &frame, &env, &intr);
        assert_eq!(v, intr.pixel_count() * n as u64);
    }
    for _ in 0..10 {
        let (frame, env) = demo_like_frame(&mut r);
        let sensors: Vec<_> = (0..3).map(|_| random_pose_around(&mut r, [5.0, 10.0], [1.0, 6.0])).collect();
        let total: u64 = frame.objects.iter().map(|o| vis_metric(o, &sensors, &frame, &env, &intr)).sum();
        assert!(total <= intr.pixel_count() * 3);
    }
}

#[test]
fn wall_in_front_of_object_matches_ray_cast_counts() {
    let intr = Intrinsics::default();
    let mut env = flat_env(30.0);
    env.boxes.push(Cuboid { center: Vec3::new(-1.0, 1.0, 0.0), size: Vec3::new(3.0, 2.0, 0.3), yaw: 0.0 });
    let car = ObjectBox { id: 4, center: Vec3::new(0.0, 0.8, 3.0), size: Vec3::new(1.8, 1.6, 4.5), yaw: 1.57 };
    let frame = Frame { id: 0, objects: vec![car.clone()] };
    let pose = vispose::scene::CanonicalPose::looking_at(Vec3::new(0.0, 2.5, -8.0), car.center).unwrap();
    let (_, fb, counts) = render_frame(&frame, &env, &pose, &intr);
    let oracle = raycast_image(&pose, &intr, &[car], Some(&env));
    let expected = oracle.iter().filter(|h| matches!(h, Some(Hit::Object(4, _)))).count() as i64;
    let wall = oracle.iter().filter(|h| matches!(h, Some(Hit::Static(0, _)))).count() as i64;
    let wall_r = fb.ids.iter().filter(|s| **s == Some(SourceId::Static(0))).count() as i64;
    let tol = intr.pixel_count() as f64 * 0.005;
    assert!(expected > 0 && wall > 0);
    assert!(((counts[0] as i64 - expected) as f64).abs() <= tol, "{} vs {expected}", counts[0]);
    assert!(((wall_r - wall) as f64).abs() <= tol, "{wall_r} vs {wall}");
}
