//! Immutable world geometry: bounds, box obstacles, spawn region and goal
//! plane, plus the collision and ray queries the depth camera is built on.
//!
//! Arenas are loaded from a small line-oriented text format (see
//! [`load_arena`]) and are immutable afterwards, so an [`ArenaSpec`] can be
//! shared read-only across every thread and process of a run.

use crate::math::{Aabb, Vec3};
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

/// Default body radius used for spawn-clearance validation at load time.
/// The simulator takes its own (configurable) radius for collision tests.
pub const DEFAULT_AGENT_RADIUS: f64 = 0.3;

/// Position plus heading of a quadrotor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    /// Heading in radians, wrapped to [-pi, pi).
    pub yaw: f64,
}

impl Pose {
    pub fn new(position: Vec3, yaw: f64) -> Result<Self, ArenaError> {
        if !position.is_finite() || !yaw.is_finite() {
            return Err(ArenaError::InvalidPose);
        }
        Ok(Self { position, yaw: wrap_angle(yaw) })
    }
}

/// Wrap an angle into [-pi, pi). In-range values pass through bit-exactly.
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let mut w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w = -PI;
    }
    w
}

/// Spawn region: an axis-aligned rectangle at fixed altitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpawnRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub z: f64,
    pub yaw: f64,
}

/// Validated world geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ArenaSpec {
    bounds: Aabb,
    obstacles: Vec<Aabb>,
    spawn: SpawnRegion,
    goal_x: f64,
}

#[derive(Debug, Error)]
pub enum ArenaError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("pose must be finite")]
    InvalidPose,
}

fn invariant(msg: impl Into<String>) -> ArenaError {
    ArenaError::Invariant(msg.into())
}

impl ArenaSpec {
    /// Build an arena from raw pieces, running the same validation as
    /// [`load_arena`].
    pub fn new(
        bounds: Aabb,
        obstacles: Vec<Aabb>,
        spawn: SpawnRegion,
        goal_x: f64,
    ) -> Result<Self, ArenaError> {
        if !bounds.is_valid() {
            return Err(invariant("bounds must have positive extent on every axis"));
        }
        for (i, b) in obstacles.iter().enumerate() {
            if !b.is_valid() {
                return Err(invariant(format!("box {i} must have positive extent on every axis")));
            }
            if !bounds.encloses(b) {
                return Err(invariant(format!("box {i} extends outside bounds")));
            }
        }
        if !(spawn.x0 <= spawn.x1 && spawn.y0 <= spawn.y1) {
            return Err(invariant("spawn rectangle must have x0 <= x1 and y0 <= y1"));
        }
        if !spawn.yaw.is_finite() || !spawn.z.is_finite() {
            return Err(invariant("spawn z and yaw must be finite"));
        }
        let spawn_box = Aabb::new(
            Vec3::new(spawn.x0, spawn.y0, spawn.z),
            Vec3::new(spawn.x1, spawn.y1, spawn.z),
        );
        if !(bounds.min.x <= spawn.x0
            && spawn.x1 <= bounds.max.x
            && bounds.min.y <= spawn.y0
            && spawn.y1 <= bounds.max.y
            && bounds.min.z <= spawn.z
            && spawn.z <= bounds.max.z)
        {
            return Err(invariant("spawn rectangle extends outside bounds"));
        }
        let r = DEFAULT_AGENT_RADIUS;
        for (i, b) in obstacles.iter().enumerate() {
            let inflated = Aabb::new(
                Vec3::new(b.min.x - r, b.min.y - r, b.min.z - r),
                Vec3::new(b.max.x + r, b.max.y + r, b.max.z + r),
            );
            let overlaps = inflated.min.x <= spawn_box.max.x
                && spawn_box.min.x <= inflated.max.x
                && inflated.min.y <= spawn_box.max.y
                && spawn_box.min.y <= inflated.max.y
                && inflated.min.z <= spawn_box.max.z
                && spawn_box.min.z <= inflated.max.z;
            if overlaps {
                return Err(invariant(format!(
                    "spawn rectangle intersects box {i} (inflated by agent radius)"
                )));
            }
        }
        if !(spawn.x1 < goal_x && goal_x <= bounds.max.x) {
            return Err(invariant("goal plane must satisfy spawn x-max < goal_x <= bounds x-max"));
        }
        Ok(Self { bounds, obstacles, spawn, goal_x })
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn obstacles(&self) -> &[Aabb] {
        &self.obstacles
    }

    pub fn spawn(&self) -> &SpawnRegion {
        &self.spawn
    }

    pub fn goal_x(&self) -> f64 {
        self.goal_x
    }

    /// True iff the sphere at `p` with `radius` touches any obstacle or is
    /// not fully inside the bounds. Surface contact counts as a collision.
    pub fn collides(&self, p: Vec3, radius: f64) -> bool {
        assert!(radius > 0.0, "collision radius must be positive");
        if p.x - radius <= self.bounds.min.x
            || p.x + radius >= self.bounds.max.x
            || p.y - radius <= self.bounds.min.y
            || p.y + radius >= self.bounds.max.y
            || p.z - radius <= self.bounds.min.z
            || p.z + radius >= self.bounds.max.z
        {
            return true;
        }
        let r2 = radius * radius;
        self.obstacles.iter().any(|b| b.distance_squared(p) <= r2)
    }

    /// Distance from `origin` along the unit vector `dir` to the nearest
    /// obstacle or bounds surface, capped at `max_range`. An origin already
    /// inside geometry (outside bounds or inside an obstacle) returns 0:
    /// the camera is in contact.
    pub fn raycast(&self, origin: Vec3, dir: Vec3, max_range: f64) -> f64 {
        debug_assert!((dir.length() - 1.0).abs() <= 1e-9, "dir must be unit length");
        if !self.bounds.contains(origin) {
            return 0.0;
        }
        if self.obstacles.iter().any(|b| b.distance_squared(origin) == 0.0) {
            return 0.0;
        }
        let mut hit = self.bounds.ray_exit(origin, dir);
        for b in &self.obstacles {
            if let Some(t) = b.ray_entry(origin, dir) {
                if t < hit {
                    hit = t;
                }
            }
        }
        hit.min(max_range)
    }

    /// Uniform sample from the spawn rectangle at the fixed altitude,
    /// heading along the spawn yaw (+x in the shipped arenas).
    pub fn sample_spawn<R: Rng>(&self, rng: &mut R) -> Pose {
        let x = sample_range(rng, self.spawn.x0, self.spawn.x1);
        let y = sample_range(rng, self.spawn.y0, self.spawn.y1);
        Pose { position: Vec3::new(x, y, self.spawn.z), yaw: wrap_angle(self.spawn.yaw) }
    }

    /// Success predicate: the goal plane is crossed (inclusive).
    pub fn reached_goal(&self, p: Vec3) -> bool {
        p.x >= self.goal_x
    }

    /// Canonical writer for the arena v1 text format. `load_arena` of the
    /// output reproduces an equal spec.
    pub fn to_text(&self) -> String {
        let mut out = String::from("arena v1\n");
        let b = &self.bounds;
        out.push_str(&format!(
            "bounds {} {} {} {} {} {}\n",
            b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
        ));
        let s = &self.spawn;
        out.push_str(&format!("spawn {} {} {} {} {} {}\n", s.x0, s.y0, s.x1, s.y1, s.z, s.yaw));
        out.push_str(&format!("goal {}\n", self.goal_x));
        for o in &self.obstacles {
            out.push_str(&format!(
                "box {} {} {} {} {} {}\n",
                o.min.x, o.min.y, o.min.z, o.max.x, o.max.y, o.max.z
            ));
        }
        out
    }
}

fn sample_range<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Parse and validate arena v1 text.
///
/// Grammar (whitespace separated, `#` starts a comment, order fixed):
///
/// ```text
/// arena v1
/// bounds x0 y0 z0 x1 y1 z1
/// spawn x0 y0 x1 y1 z yaw
/// goal x
/// box x0 y0 z0 x1 y1 z1   # repeated
/// ```
pub fn load_arena(text: &str) -> Result<ArenaSpec, ArenaError> {
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let tokens: Vec<&str> = stripped.split_whitespace().collect();
        if !tokens.is_empty() {
            lines.push((idx + 1, tokens));
        }
    }
    let mut it = lines.into_iter();

    let (line, header) = it.next().ok_or(ArenaError::Parse {
        line: 1,
        msg: "empty arena file".into(),
    })?;
    if header != ["arena", "v1"] {
        return Err(ArenaError::Parse { line, msg: "expected header `arena v1`".into() });
    }

    let bounds = {
        let (line, toks) = it.next().ok_or(ArenaError::Parse {
            line: line + 1,
            msg: "missing `bounds` line".into(),
        })?;
        let v = parse_record(line, &toks, "bounds", 6)?;
        Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
    };

    let spawn = {
        let (line, toks) = it.next().ok_or(ArenaError::Parse {
            line: line + 1,
            msg: "missing `spawn` line".into(),
        })?;
        let v = parse_record(line, &toks, "spawn", 6)?;
        SpawnRegion { x0: v[0], y0: v[1], x1: v[2], y1: v[3], z: v[4], yaw: v[5] }
    };

    let goal_x = {
        let (line, toks) = it.next().ok_or(ArenaError::Parse {
            line: line + 1,
            msg: "missing `goal` line".into(),
        })?;
        parse_record(line, &toks, "goal", 1)?[0]
    };

    let mut obstacles = Vec::new();
    for (line, toks) in it {
        let v = parse_record(line, &toks, "box", 6)?;
        obstacles.push(Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])));
    }

    ArenaSpec::new(bounds, obstacles, spawn, goal_x)
}

fn parse_record(
    line: usize,
    tokens: &[&str],
    keyword: &str,
    n_fields: usize,
) -> Result<Vec<f64>, ArenaError> {
    if tokens[0] != keyword {
        return Err(ArenaError::Parse {
            line,
            msg: format!("expected `{keyword}`, found `{}`", tokens[0]),
        });
    }
    if tokens.len() != n_fields + 1 {
        return Err(ArenaError::Parse {
            line,
            msg: format!("`{keyword}` takes {n_fields} numbers, found {}", tokens.len() - 1),
        });
    }
    tokens[1..]
        .iter()
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| ArenaError::Parse {
                line,
                msg: format!("`{t}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(ArenaError::Parse { line, msg: format!("`{t}` is not finite") });
            }
            Ok(v)
        })
        .collect()
}
