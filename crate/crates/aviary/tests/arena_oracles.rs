//! Geometry oracles: Monte-Carlo containment for collision tests, the
//! ray-marching distance oracle, spawn-distribution statistics, and
//! structural properties over random arenas.

mod common;

use aviary::arena::load_arena;
use aviary::math::Vec3;
use common::{march_distance, random_arena, random_free_point, random_unit};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const TRAIN: &str = include_str!("../arenas/train.arena");

#[test]
fn collides_agrees_with_monte_carlo_containment() {
    let arena = load_arena(TRAIN).unwrap();
    let mut rng = StdRng::seed_from_u64(41);
    let samples_per_sphere = 10_000;
    let mut checked = 0;
    for _ in 0..1000 {
        let b = arena.bounds();
        let p = Vec3::new(
            rng.gen_range(b.min.x - 1.0..b.max.x + 1.0),
            rng.gen_range(b.min.y - 1.0..b.max.y + 1.0),
            rng.gen_range(b.min.z - 1.0..b.max.z + 1.0),
        );
        let radius = rng.gen_range(0.05..1.0_f64);
        // sample-spacing scale for this sphere's point cloud
        let spacing = radius * (4.0 / samples_per_sphere as f64).cbrt();

        let mut oracle_hit = false;
        for _ in 0..samples_per_sphere {
            let dir = random_unit(&mut rng);
            let r = radius * rng.gen_range(0.0..1.0_f64).cbrt();
            let q = p + dir * r;
            if !b.contains(q) || arena.obstacles().iter().any(|o| o.distance_squared(q) == 0.0) {
                oracle_hit = true;
                break;
            }
        }
        let fast = arena.collides(p, radius);
        if fast != oracle_hit {
            // disagreement is only allowed within one sample spacing of a
            // surface: verify via the exact clearance
            let clearance = {
                let to_wall = [
                    p.x - b.min.x,
                    b.max.x - p.x,
                    p.y - b.min.y,
                    b.max.y - p.y,
                    p.z - b.min.z,
                    b.max.z - p.z,
                ]
                .into_iter()
                .fold(f64::INFINITY, f64::min);
                let to_box = arena
                    .obstacles()
                    .iter()
                    .map(|o| o.distance_squared(p).sqrt())
                    .fold(f64::INFINITY, f64::min);
                to_wall.min(to_box) - radius
            };
            assert!(
                clearance.abs() <= spacing,
                "disagreement far from surface: clearance {clearance}, spacing {spacing}"
            );
        } else {
            checked += 1;
        }
    }
    assert!(checked > 900, "too many near-surface cases: {checked}");
}

#[test]
fn raycast_matches_marching_oracle() {
    let arena = load_arena(TRAIN).unwrap();
    let mut rng = StdRng::seed_from_u64(42);
    let step = 1e-3;
    let max_range = 20.0;
    for _ in 0..2000 {
        let origin = random_free_point(&arena, &mut rng);
        let dir = random_unit(&mut rng);
        let fast = arena.raycast(origin, dir, max_range);
        let slow = march_distance(&arena, origin, dir, max_range, step);
        assert!(
            (fast - slow).abs() <= 2.0 * step,
            "origin {origin:?} dir {dir:?}: raycast {fast} vs march {slow}"
        );
    }
}

#[test]
fn raycast_monotone_under_obstacle_removal() {
    let mut rng = StdRng::seed_from_u64(43);
    for _ in 0..40 {
        let full = random_arena(&mut rng, 6);
        if full.obstacles().is_empty() {
            continue;
        }
        let drop_idx = rng.gen_range(0..full.obstacles().len());
        let reduced_boxes: Vec<_> = full
            .obstacles()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != drop_idx)
            .map(|(_, b)| *b)
            .collect();
        let reduced = aviary::arena::ArenaSpec::new(
            *full.bounds(),
            reduced_boxes,
            *full.spawn(),
            full.goal_x(),
        )
        .unwrap();
        for _ in 0..50 {
            let origin = random_free_point(&reduced, &mut rng);
            if full.obstacles().iter().any(|o| o.distance_squared(origin) == 0.0) {
                continue;
            }
            let dir = random_unit(&mut rng);
            let with = full.raycast(origin, dir, 30.0);
            let without = reduced.raycast(origin, dir, 30.0);
            assert!(
                without >= with - 1e-12,
                "removing a box shortened the ray: {with} -> {without}"
            );
        }
    }
}

#[test]
fn obstacle_faces_collide_at_any_radius() {
    let arena = load_arena(TRAIN).unwrap();
    let mut rng = StdRng::seed_from_u64(44);
    for b in arena.obstacles() {
        for _ in 0..50 {
            // a point on a random face
            let face = rng.gen_range(0..4); // side faces (z faces touch floor/ceiling)
            let x = rng.gen_range(b.min.x..b.max.x);
            let y = rng.gen_range(b.min.y..b.max.y);
            let z = rng.gen_range(b.min.z.max(0.5)..b.max.z.min(3.5));
            let p = match face {
                0 => Vec3::new(b.min.x, y, z),
                1 => Vec3::new(b.max.x, y, z),
                2 => Vec3::new(x, b.min.y, z),
                _ => Vec3::new(x, b.max.y, z),
            };
            assert!(arena.collides(p, 1e-9));
            assert!(arena.collides(p, 0.5));
        }
    }
}

#[test]
fn spawn_samples_match_uniform_statistics() {
    let arena = load_arena(TRAIN).unwrap();
    let s = arena.spawn();
    let mut rng = StdRng::seed_from_u64(45);
    let n = 10_000;
    let (mut sx, mut sy) = (0.0, 0.0);
    for _ in 0..n {
        let p = arena.sample_spawn(&mut rng);
        assert!(p.position.x >= s.x0 && p.position.x <= s.x1);
        assert!(p.position.y >= s.y0 && p.position.y <= s.y1);
        assert_eq!(p.position.z, s.z);
        assert_eq!(p.yaw, 0.0);
        sx += p.position.x;
        sy += p.position.y;
    }
    // mean within 3 sigma of the rectangle center
    let mean_x = sx / n as f64;
    let mean_y = sy / n as f64;
    let sigma_x = (s.x1 - s.x0) / (12.0f64).sqrt() / (n as f64).sqrt();
    let sigma_y = (s.y1 - s.y0) / (12.0f64).sqrt() / (n as f64).sqrt();
    assert!((mean_x - (s.x0 + s.x1) / 2.0).abs() < 3.0 * sigma_x);
    assert!((mean_y - (s.y0 + s.y1) / 2.0).abs() < 3.0 * sigma_y);
}

#[test]
fn writer_round_trips_random_arenas() {
    let mut rng = StdRng::seed_from_u64(46);
    for _ in 0..50 {
        let arena = random_arena(&mut rng, 6);
        let round = load_arena(&arena.to_text()).unwrap();
        assert_eq!(arena, round);
    }
}
