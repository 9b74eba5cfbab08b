//! Vectorized multi-agent quadrotor simulation.
//!
//! Agents are non-interactive: they never collide with each other and never
//! appear in each other's depth images, so any number can share one arena.
//! Kinematics run at `physics_hz` substeps per action period, state
//! collection synchronises with the render-thread frame clock (see
//! [`clock::FrameClock`]), and individual agents can be reset the moment
//! their episode ends without disturbing anyone else.

mod camera;
mod clock;

pub use camera::render_depth;
pub use clock::FrameClock;

use crate::arena::{ArenaSpec, Pose};
use crate::math::Vec3;
use crate::util::derive_seed;
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

pub const DEPTH_WIDTH: usize = 32;
pub const DEPTH_HEIGHT: usize = 32;
pub const DEPTH_PIXELS: usize = DEPTH_WIDTH * DEPTH_HEIGHT;

/// Lateral velocity increment per action, m/s.
pub const LATERAL_STEP: f64 = 0.25;

/// Reward for colliding with walls or obstacles.
pub const REWARD_COLLISION: f32 = -100.0;
/// Reward for surviving a step (including the goal-reaching step).
pub const REWARD_SURVIVE: f32 = 3.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("agent {0} is not alive")]
    DeadAgent(usize),
    #[error("reset pose is in collision; agent unchanged")]
    PoseInCollision,
    #[error("bad simulator config: {0}")]
    BadConfig(String),
    #[error("bad depth image: {0}")]
    BadImage(String),
}

/// 32x32 grid of ray distances in meters, row major, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    depths: Vec<f32>,
}

impl DepthImage {
    pub fn from_depths(depths: Vec<f32>) -> Result<Self, SimError> {
        if depths.len() != DEPTH_PIXELS {
            return Err(SimError::BadImage(format!(
                "expected {DEPTH_PIXELS} pixels, got {}",
                depths.len()
            )));
        }
        Ok(Self { depths })
    }

    /// Constant-valued image; handy for synthetic states in tests.
    pub fn constant(value: f32) -> Self {
        Self { depths: vec![value; DEPTH_PIXELS] }
    }

    pub fn depths(&self) -> &[f32] {
        &self.depths
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.depths[row * DEPTH_WIDTH + col]
    }

    pub fn width(&self) -> usize {
        DEPTH_WIDTH
    }

    pub fn height(&self) -> usize {
        DEPTH_HEIGHT
    }
}

/// Simulator tuning. Defaults follow the training setup: 4 Hz physics, 1 s
/// action period, 1 m/s forward velocity, 90 degree FOV, 20 m depth range,
/// 16 ms render frame period.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub physics_hz: u32,
    pub action_period: f64,
    pub forward_velocity: f64,
    pub camera_fov: f64,
    pub max_range: f64,
    pub frame_period: Duration,
    pub agent_radius: f64,
    pub lateral_clamp: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            physics_hz: 4,
            action_period: 1.0,
            forward_velocity: 1.0,
            camera_fov: std::f64::consts::FRAC_PI_2,
            max_range: 20.0,
            frame_period: Duration::from_millis(16),
            agent_radius: 0.3,
            lateral_clamp: 1.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let substeps = self.physics_hz as f64 * self.action_period;
        if self.physics_hz == 0 || (substeps - substeps.round()).abs() > 1e-9 || substeps < 1.0 {
            return Err(SimError::BadConfig(
                "physics_hz x action_period must be a whole number of substeps".into(),
            ));
        }
        if self.frame_period.is_zero() {
            return Err(SimError::BadConfig("frame_period must be positive".into()));
        }
        if !(self.camera_fov > 0.0 && self.camera_fov < std::f64::consts::PI) {
            return Err(SimError::BadConfig("camera_fov must be in (0, pi)".into()));
        }
        for (name, v) in [
            ("action_period", self.action_period),
            ("forward_velocity", self.forward_velocity),
            ("max_range", self.max_range),
            ("agent_radius", self.agent_radius),
            ("lateral_clamp", self.lateral_clamp),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::BadConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn substeps(&self) -> u32 {
        (self.physics_hz as f64 * self.action_period).round() as u32
    }
}

/// Per-agent simulation state.
#[derive(Debug, Clone)]
pub struct QuadState {
    pub pose: Pose,
    pub velocity: Vec3,
    pub desired_lateral: f64,
    pub alive: bool,
    pub steps_in_episode: u32,
    pub prev_image: Option<DepthImage>,
}

/// High-level command: nudge the desired lateral velocity left or right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    /// +0.25 m/s lateral (toward +y at yaw 0).
    Left,
    /// -0.25 m/s lateral.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    None,
    Collision,
    Goal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f32,
    pub terminal: Terminal,
}

/// One collected state: current and previous depth image plus velocity.
#[derive(Debug, Clone)]
pub struct AgentStateTriple {
    pub now: DepthImage,
    pub prev: DepthImage,
    pub velocity: Vec3,
}

/// The vectorized world: one arena, many non-interactive agents, one frame
/// clock. A single owner advances physics; concurrent callers go through a
/// lock so every request observes a consistent tick.
pub struct World {
    arena: Arc<ArenaSpec>,
    cfg: SimConfig,
    clock: FrameClock,
    agents: Vec<QuadState>,
    rngs: Vec<StdRng>,
}

impl World {
    /// Spawn `n_agents` via per-agent seeded draws from the arena spawn
    /// region. Agent `i`'s random stream depends only on `(seed, i)`, so a
    /// given agent behaves identically no matter how many others share the
    /// world. Overlapping spawns are fine: agents are non-interactive.
    pub fn new(
        arena: Arc<ArenaSpec>,
        n_agents: usize,
        cfg: SimConfig,
        seed: u64,
    ) -> Result<World, SimError> {
        cfg.validate()?;
        if n_agents == 0 {
            return Err(SimError::BadConfig("need at least one agent".into()));
        }
        let mut rngs: Vec<StdRng> = (0..n_agents)
            .map(|i| StdRng::seed_from_u64(derive_seed(seed, i as u64)))
            .collect();
        let agents = rngs
            .iter_mut()
            .map(|rng| fresh_state(arena.sample_spawn(rng)))
            .collect();
        let clock = FrameClock::start(cfg.frame_period);
        Ok(World { arena, cfg, clock, agents, rngs })
    }

    pub fn arena(&self) -> &ArenaSpec {
        &self.arena
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn clock(&self) -> &FrameClock {
        &self.clock
    }

    pub fn agent(&self, id: usize) -> Result<&QuadState, SimError> {
        self.agents.get(id).ok_or(SimError::UnknownAgent(id))
    }

    /// Nudge the desired lateral velocity of a living agent, clamped.
    pub fn apply_action(&mut self, id: usize, action: Action) -> Result<(), SimError> {
        let clamp = self.cfg.lateral_clamp;
        let agent = self.agents.get_mut(id).ok_or(SimError::UnknownAgent(id))?;
        if !agent.alive {
            return Err(SimError::DeadAgent(id));
        }
        let delta = match action {
            Action::Left => LATERAL_STEP,
            Action::Right => -LATERAL_STEP,
        };
        agent.desired_lateral = (agent.desired_lateral + delta).clamp(-clamp, clamp);
        Ok(())
    }

    /// Advance every living agent by one action period: velocity is set to
    /// (forward, desired lateral, 0) in the world frame, integrated over
    /// `physics_hz x action_period` substeps, then collision and goal are
    /// evaluated. Dead agents are skipped and their pose stays frozen.
    pub fn step_action_period(&mut self) -> Vec<(usize, StepOutcome)> {
        let substeps = self.cfg.substeps();
        let dt = self.cfg.action_period / substeps as f64;
        let mut outcomes = Vec::new();
        for (id, agent) in self.agents.iter_mut().enumerate() {
            if !agent.alive {
                continue;
            }
            agent.velocity = Vec3::new(self.cfg.forward_velocity, agent.desired_lateral, 0.0);
            for _ in 0..substeps {
                agent.pose.position += agent.velocity * dt;
            }
            agent.steps_in_episode += 1;
            let outcome = if self.arena.collides(agent.pose.position, self.cfg.agent_radius) {
                agent.alive = false;
                StepOutcome { reward: REWARD_COLLISION, terminal: Terminal::Collision }
            } else if self.arena.reached_goal(agent.pose.position) {
                agent.alive = false;
                StepOutcome { reward: REWARD_SURVIVE, terminal: Terminal::Goal }
            } else {
                StepOutcome { reward: REWARD_SURVIVE, terminal: Terminal::None }
            };
            outcomes.push((id, outcome));
        }
        outcomes
    }

    /// Render one agent without touching the frame clock or the stacking
    /// history. Works for dead agents too (frozen pose).
    pub fn render_agent_depth(&self, id: usize) -> Result<DepthImage, SimError> {
        let agent = self.agent(id)?;
        Ok(render_depth(&self.arena, &agent.pose, self.cfg.camera_fov, self.cfg.max_range))
    }

    /// Collect states for all requested agents after a single frame-clock
    /// barrier. Fails atomically on any invalid id (no history updated).
    /// The previous image defaults to the current one right after a reset.
    pub fn get_states_batched(&mut self, ids: &[usize]) -> Result<Vec<AgentStateTriple>, SimError> {
        for &id in ids {
            if id >= self.agents.len() {
                return Err(SimError::UnknownAgent(id));
            }
        }
        self.clock.wait_barrier();
        Ok(ids.iter().map(|&id| self.collect_one(id)).collect())
    }

    /// Collect the same states, paying one frame-clock barrier per agent,
    /// sequentially. A bad id mid-way aborts without returning partial
    /// results (earlier agents' stacking history has already advanced).
    pub fn get_states_nonbatched(
        &mut self,
        ids: &[usize],
    ) -> Result<Vec<AgentStateTriple>, SimError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.agents.len() {
                return Err(SimError::UnknownAgent(id));
            }
            self.clock.wait_barrier();
            out.push(self.collect_one(id));
        }
        Ok(out)
    }

    fn collect_one(&mut self, id: usize) -> AgentStateTriple {
        let now = render_depth(
            &self.arena,
            &self.agents[id].pose,
            self.cfg.camera_fov,
            self.cfg.max_range,
        );
        let agent = &mut self.agents[id];
        let prev = agent.prev_image.take().unwrap_or_else(|| now.clone());
        agent.prev_image = Some(now.clone());
        AgentStateTriple { now, prev, velocity: agent.velocity }
    }

    /// Revive one agent at `pose` with zeroed velocity, lateral command,
    /// step count and stacking history. Every other agent is untouched.
    /// A pose in collision is rejected and the agent left exactly as it was.
    pub fn reset_vehicle(&mut self, id: usize, pose: Pose) -> Result<(), SimError> {
        if id >= self.agents.len() {
            return Err(SimError::UnknownAgent(id));
        }
        if self.arena.collides(pose.position, self.cfg.agent_radius) {
            return Err(SimError::PoseInCollision);
        }
        self.agents[id] = fresh_state(pose);
        Ok(())
    }

    /// Re-spawn every agent from its own random stream; equivalent to
    /// `reset_vehicle` over all agents with fresh spawn samples.
    pub fn reset_all(&mut self) {
        for (agent, rng) in self.agents.iter_mut().zip(&mut self.rngs) {
            *agent = fresh_state(self.arena.sample_spawn(rng));
        }
    }

    /// Draw the next spawn pose from an agent's own stream (used by the
    /// sequence-equivalence tests).
    pub fn sample_agent_spawn(&mut self, id: usize) -> Result<Pose, SimError> {
        if id >= self.rngs.len() {
            return Err(SimError::UnknownAgent(id));
        }
        Ok(self.arena.sample_spawn(&mut self.rngs[id]))
    }
}

fn fresh_state(pose: Pose) -> QuadState {
    QuadState {
        pose,
        velocity: Vec3::ZERO,
        desired_lateral: 0.0,
        alive: true,
        steps_in_episode: 0,
        prev_image: None,
    }
}
