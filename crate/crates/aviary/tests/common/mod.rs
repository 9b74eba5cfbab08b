//! Shared test helpers: the ray-marching oracle and random geometry.
//! Each test target compiles its own copy, so not every helper is used
//! everywhere.
#![allow(dead_code)]

use aviary::arena::{ArenaSpec, SpawnRegion};
use aviary::math::{Aabb, Vec3};
use rand::rngs::StdRng;
use rand::Rng;

/// Independent distance oracle: marching on the point-inside-geometry
/// predicate, refined by bisection once a penetration is found. Uses no
/// ray/slab arithmetic at all.
///
/// The march advances at most `step` per sample; near surfaces the stride
/// shrinks to the exact point-to-surface distance (floored at 1e-6 m) so
/// that thin grazing chords cannot be stepped over.
pub fn march_distance(
    arena: &ArenaSpec,
    origin: Vec3,
    dir: Vec3,
    max_range: f64,
    step: f64,
) -> f64 {
    let inside = |p: Vec3| {
        !arena.bounds().contains(p)
            || arena.obstacles().iter().any(|b| b.distance_squared(p) == 0.0)
    };
    let clearance = |p: Vec3| -> f64 {
        let b = arena.bounds();
        let wall = (p.x - b.min.x)
            .min(b.max.x - p.x)
            .min(p.y - b.min.y)
            .min(b.max.y - p.y)
            .min(p.z - b.min.z)
            .min(b.max.z - p.z);
        arena
            .obstacles()
            .iter()
            .map(|o| o.distance_squared(p).sqrt())
            .fold(wall, f64::min)
    };
    let mut t = 0.0f64;
    loop {
        let p = origin + dir * t;
        if inside(p) {
            // bracket is [t - last stride, t]; redo with the known stride
            // by bisecting down from t
            let mut hi = t;
            let mut lo = (t - step).max(0.0);
            while inside(origin + dir * lo) && lo > 0.0 {
                lo = (lo - step).max(0.0);
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if inside(origin + dir * mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return hi;
        }
        if t >= max_range {
            return max_range;
        }
        let stride = clearance(p).max(1e-6).min(step);
        t = (t + stride).min(max_range);
    }
}

/// Uniform direction on the unit sphere (rejection sampling).
pub fn random_unit(rng: &mut StdRng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let len = v.length();
        if len > 0.2 && len <= 1.0 {
            return v / len;
        }
    }
}

/// A random free-space point strictly inside the bounds.
pub fn random_free_point(arena: &ArenaSpec, rng: &mut StdRng) -> Vec3 {
    let b = arena.bounds();
    loop {
        let p = Vec3::new(
            rng.gen_range(b.min.x + 0.05..b.max.x - 0.05),
            rng.gen_range(b.min.y + 0.05..b.max.y - 0.05),
            rng.gen_range(b.min.z + 0.05..b.max.z - 0.05),
        );
        if !arena.obstacles().iter().any(|o| o.distance_squared(p) < 1e-4) {
            return p;
        }
    }
}

/// Random valid arena with up to `max_boxes` obstacles.
pub fn random_arena(rng: &mut StdRng, max_boxes: usize) -> ArenaSpec {
    loop {
        let xmax = rng.gen_range(20.0..50.0_f64).round();
        let ymax = rng.gen_range(8.0..16.0_f64).round();
        let bounds = Aabb::new(Vec3::ZERO, Vec3::new(xmax, ymax, 4.0));
        let spawn = SpawnRegion { x0: 0.8, y0: ymax / 2.0 - 1.0, x1: 1.6, y1: ymax / 2.0 + 1.0, z: 2.0, yaw: 0.0 };
        let n_boxes = rng.gen_range(0..=max_boxes);
        let obstacles: Vec<Aabb> = (0..n_boxes)
            .map(|_| {
                let x0 = rng.gen_range(4.0..xmax - 6.0);
                let y0 = rng.gen_range(0.0..ymax - 2.0);
                let dx = rng.gen_range(1.0..4.0);
                let dy = rng.gen_range(1.0..4.0);
                Aabb::new(
                    Vec3::new(x0, y0, 0.0),
                    Vec3::new((x0 + dx).min(xmax), (y0 + dy).min(ymax), 4.0),
                )
            })
            .collect();
        if let Ok(a) = ArenaSpec::new(bounds, obstacles, spawn, xmax - 2.0) {
            return a;
        }
    }
}
