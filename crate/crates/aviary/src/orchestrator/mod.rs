//! Runs the decentralized topology: actor processes paired with simulator
//! instances, a replay service, a trainer service and a coordinator, wired
//! together over the binary RPC layer.
//!
//! Two single-machine scheduling modes:
//!
//! * `threads` — every role free-runs in its own thread; the trainer holds
//!   a fixed 50 Hz rate independent of actor speed. This is the
//!   real-topology mode (roles may also live on other machines and get
//!   attached by address).
//! * `lockstep` — one actor and the trainer interleave deterministically
//!   on one thread (`train_hz x action_period` trainer steps per actor
//!   tick, still gated on a full buffer). With fixed seeds two lockstep
//!   runs produce bit-identical `episodes.csv` files; episode timestamps
//!   are simulation time, not wall clock.

mod actor;
mod services;

pub use actor::{Actor, ActorConfig, ActorReport, TickSummary};
pub use services::{Coordinator, ReplayService, SimService, TrainerCore, TrainerService};

use crate::arena::{load_arena, ArenaError, ArenaSpec};
use crate::dqn::{DqnError, Hyperparams};
use crate::replay::ReplayBuffer;
use crate::simcore::{SimConfig, SimError, World};
use crate::util::{derive_seed, git_blob_hash};
use crate::wire::{serve, Connection, Request, Response, Server, Service, WireError};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchError {
    #[error("config: {0}")]
    Config(String),
    #[error("runtime: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dqn(#[from] DqnError),
}

impl OrchError {
    pub(crate) fn unexpected(resp: &Response) -> OrchError {
        OrchError::Runtime(format!("unexpected response variant: {resp:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Threads,
    Lockstep,
}

/// One simulator instance: where it listens, which arena it loads, and how
/// many agents fly in it.
#[derive(Debug, Clone)]
pub struct SimEntry {
    pub addr: String,
    pub arena_path: PathBuf,
    pub n_agents: usize,
}

/// Parsed experiment topology; see [`Topology::parse`] for the file format.
#[derive(Debug, Clone)]
pub struct Topology {
    pub sims: Vec<SimEntry>,
    pub replay_addr: String,
    pub trainer_addr: String,
    pub coordinator_addr: String,
    pub hyper: Hyperparams,
    pub sim_config: SimConfig,
    pub seed: u64,
    pub threshold: f32,
    pub budget_secs: f64,
    /// Lockstep runs stop after this many actor ticks (0 = no tick budget).
    pub budget_ticks: u64,
    pub episode_cap: u32,
    pub reward_window: usize,
    pub mode: RunMode,
    pub actor_latency_factor: f64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            sims: Vec::new(),
            replay_addr: "127.0.0.1:0".into(),
            trainer_addr: "127.0.0.1:0".into(),
            coordinator_addr: "127.0.0.1:0".into(),
            hyper: Hyperparams::default(),
            sim_config: SimConfig::default(),
            seed: 0,
            threshold: 300.0,
            budget_secs: 600.0,
            budget_ticks: 0,
            episode_cap: 200,
            reward_window: 20,
            mode: RunMode::Threads,
            actor_latency_factor: 1.0,
        }
    }
}

impl Topology {
    /// Parse the topology v1 config format: line oriented, `#` comments,
    /// `key value` pairs. Role lines:
    ///
    /// ```text
    /// topology v1
    /// sim 127.0.0.1:0 arenas/corridor_easy.arena 8    # repeatable
    /// replay 127.0.0.1:0
    /// trainer 127.0.0.1:0
    /// coordinator 127.0.0.1:0
    /// ```
    ///
    /// Remaining keys (all optional, defaults in parentheses): gamma
    /// (0.99), replay_capacity (15000), batch_size (32), target_sync_every
    /// (150), train_hz (50), lr (1e-4), grad_clip (10), physics_hz (4),
    /// action_period (1), forward_velocity (1), camera_fov_deg (90),
    /// max_range (20), frame_period_ms (16), agent_radius (0.3),
    /// lateral_clamp (1), seed (0), threshold (300), budget_secs (600),
    /// budget_ticks (0), episode_cap (200), reward_window (20), mode
    /// (threads|lockstep), actor_latency_factor (1). Arena paths are
    /// resolved relative to `base_dir`. Port 0 means "host here on an
    /// ephemeral port"; concrete addresses are attached when alive.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Topology, OrchError> {
        let mut topo = Topology::default();
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
        match it.next() {
            Some((_, toks)) if toks == ["topology", "v1"] => {}
            Some((line, _)) => {
                return Err(OrchError::Config(format!(
                    "line {line}: expected header `topology v1`"
                )))
            }
            None => return Err(OrchError::Config("empty topology file".into())),
        }

        let bad = |line: usize, msg: String| OrchError::Config(format!("line {line}: {msg}"));
        for (line, toks) in it {
            let key = toks[0];
            let args = &toks[1..];
            let want = |n: usize| -> Result<(), OrchError> {
                if args.len() == n {
                    Ok(())
                } else {
                    Err(bad(line, format!("`{key}` takes {n} values, found {}", args.len())))
                }
            };
            let num = |s: &str| -> Result<f64, OrchError> {
                s.parse::<f64>().map_err(|_| bad(line, format!("`{s}` is not a number")))
            };
            match key {
                "sim" => {
                    want(3)?;
                    topo.sims.push(SimEntry {
                        addr: args[0].to_string(),
                        arena_path: base_dir.join(args[1]),
                        n_agents: num(args[2])? as usize,
                    });
                }
                "replay" => {
                    want(1)?;
                    topo.replay_addr = args[0].to_string();
                }
                "trainer" => {
                    want(1)?;
                    topo.trainer_addr = args[0].to_string();
                }
                "coordinator" => {
                    want(1)?;
                    topo.coordinator_addr = args[0].to_string();
                }
                "gamma" => {
                    want(1)?;
                    topo.hyper.gamma = num(args[0])? as f32;
                }
                "replay_capacity" => {
                    want(1)?;
                    topo.hyper.replay_capacity = num(args[0])? as usize;
                }
                "batch_size" => {
                    want(1)?;
                    topo.hyper.batch_size = num(args[0])? as usize;
                }
                "target_sync_every" => {
                    want(1)?;
                    topo.hyper.target_sync_every = num(args[0])? as u64;
                }
                "train_hz" => {
                    want(1)?;
                    topo.hyper.train_hz = num(args[0])?;
                }
                "lr" => {
                    want(1)?;
                    topo.hyper.lr = num(args[0])? as f32;
                }
                "grad_clip" => {
                    want(1)?;
                    topo.hyper.grad_clip = num(args[0])? as f32;
                }
                "physics_hz" => {
                    want(1)?;
                    topo.sim_config.physics_hz = num(args[0])? as u32;
                }
                "action_period" => {
                    want(1)?;
                    topo.sim_config.action_period = num(args[0])?;
                }
                "forward_velocity" => {
                    want(1)?;
                    topo.sim_config.forward_velocity = num(args[0])?;
                }
                "camera_fov_deg" => {
                    want(1)?;
                    topo.sim_config.camera_fov = num(args[0])?.to_radians();
                }
                "max_range" => {
                    want(1)?;
                    topo.sim_config.max_range = num(args[0])?;
                }
                "frame_period_ms" => {
                    want(1)?;
                    topo.sim_config.frame_period = Duration::from_secs_f64(num(args[0])? / 1000.0);
                }
                "agent_radius" => {
                    want(1)?;
                    topo.sim_config.agent_radius = num(args[0])?;
                }
                "lateral_clamp" => {
                    want(1)?;
                    topo.sim_config.lateral_clamp = num(args[0])?;
                }
                "seed" => {
                    want(1)?;
                    topo.seed = num(args[0])? as u64;
                }
                "threshold" => {
                    want(1)?;
                    topo.threshold = num(args[0])? as f32;
                }
                "budget_secs" => {
                    want(1)?;
                    topo.budget_secs = num(args[0])?;
                }
                "budget_ticks" => {
                    want(1)?;
                    topo.budget_ticks = num(args[0])? as u64;
                }
                "episode_cap" => {
                    want(1)?;
                    topo.episode_cap = num(args[0])? as u32;
                }
                "reward_window" => {
                    want(1)?;
                    topo.reward_window = num(args[0])? as usize;
                }
                "mode" => {
                    want(1)?;
                    topo.mode = match args[0] {
                        "threads" => RunMode::Threads,
                        "lockstep" => RunMode::Lockstep,
                        m => return Err(bad(line, format!("unknown mode `{m}`"))),
                    };
                }
                "actor_latency_factor" => {
                    want(1)?;
                    topo.actor_latency_factor = num(args[0])?;
                }
                other => return Err(bad(line, format!("unknown key `{other}`"))),
            }
        }
        topo.validate()?;
        Ok(topo)
    }

    pub fn load(path: &Path) -> Result<Topology, OrchError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<(), OrchError> {
        if self.sims.is_empty() {
            return Err(OrchError::Config("at least one sim instance required".into()));
        }
        if self.sims.iter().any(|s| s.n_agents == 0) {
            return Err(OrchError::Config("every sim needs at least one agent".into()));
        }
        self.hyper.validate().map_err(|e| OrchError::Config(e.to_string()))?;
        self.sim_config.validate().map_err(|e| OrchError::Config(e.to_string()))?;
        if self.reward_window == 0 {
            return Err(OrchError::Config("reward_window must be positive".into()));
        }
        if self.episode_cap == 0 {
            return Err(OrchError::Config("episode_cap must be positive".into()));
        }
        // concrete addresses must be distinct; port-0 addresses become
        // distinct when bound
        let mut concrete: Vec<&str> = self
            .sims
            .iter()
            .map(|s| s.addr.as_str())
            .chain([
                self.replay_addr.as_str(),
                self.trainer_addr.as_str(),
                self.coordinator_addr.as_str(),
            ])
            .filter(|a| !a.ends_with(":0"))
            .collect();
        concrete.sort_unstable();
        for pair in concrete.windows(2) {
            if pair[0] == pair[1] {
                return Err(OrchError::Config(format!("duplicate address {}", pair[0])));
            }
        }
        if self.mode == RunMode::Lockstep {
            if self.sims.len() != 1 {
                return Err(OrchError::Config("lockstep mode requires exactly one sim".into()));
            }
            if self.budget_ticks == 0 {
                return Err(OrchError::Config(
                    "lockstep mode requires a positive budget_ticks".into(),
                ));
            }
        }
        Ok(())
    }

    /// Canonical writer; `parse` of the output reproduces the topology.
    pub fn to_text(&self) -> String {
        let mut out = String::from("topology v1\n");
        for s in &self.sims {
            out.push_str(&format!("sim {} {} {}\n", s.addr, s.arena_path.display(), s.n_agents));
        }
        out.push_str(&format!("replay {}\n", self.replay_addr));
        out.push_str(&format!("trainer {}\n", self.trainer_addr));
        out.push_str(&format!("coordinator {}\n", self.coordinator_addr));
        out.push_str(&format!("gamma {}\n", self.hyper.gamma));
        out.push_str(&format!("replay_capacity {}\n", self.hyper.replay_capacity));
        out.push_str(&format!("batch_size {}\n", self.hyper.batch_size));
        out.push_str(&format!("target_sync_every {}\n", self.hyper.target_sync_every));
        out.push_str(&format!("train_hz {}\n", self.hyper.train_hz));
        out.push_str(&format!("lr {}\n", self.hyper.lr));
        out.push_str(&format!("grad_clip {}\n", self.hyper.grad_clip));
        out.push_str(&format!("physics_hz {}\n", self.sim_config.physics_hz));
        out.push_str(&format!("action_period {}\n", self.sim_config.action_period));
        out.push_str(&format!("forward_velocity {}\n", self.sim_config.forward_velocity));
        out.push_str(&format!("camera_fov_deg {}\n", self.sim_config.camera_fov.to_degrees()));
        out.push_str(&format!("max_range {}\n", self.sim_config.max_range));
        out.push_str(&format!(
            "frame_period_ms {}\n",
            self.sim_config.frame_period.as_secs_f64() * 1000.0
        ));
        out.push_str(&format!("agent_radius {}\n", self.sim_config.agent_radius));
        out.push_str(&format!("lateral_clamp {}\n", self.sim_config.lateral_clamp));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str(&format!("threshold {}\n", self.threshold));
        out.push_str(&format!("budget_secs {}\n", self.budget_secs));
        out.push_str(&format!("budget_ticks {}\n", self.budget_ticks));
        out.push_str(&format!("episode_cap {}\n", self.episode_cap));
        out.push_str(&format!("reward_window {}\n", self.reward_window));
        out.push_str(&format!(
            "mode {}\n",
            match self.mode {
                RunMode::Threads => "threads",
                RunMode::Lockstep => "lockstep",
            }
        ));
        out.push_str(&format!("actor_latency_factor {}\n", self.actor_latency_factor));
        out
    }

    pub fn total_agents(&self) -> usize {
        self.sims.iter().map(|s| s.n_agents).sum()
    }
}

/// A role endpoint: either hosted here (server handle kept) or attached to
/// an already-running remote service.
pub struct Endpoint {
    pub addr: String,
    server: Option<Server>,
}

impl Endpoint {
    pub fn hosted_here(&self) -> bool {
        self.server.is_some()
    }
}

/// Host the service at `addr`, unless something already answers Health
/// there, in which case attach to it. Port 0 always hosts.
pub fn spawn_or_attach(addr: &str, svc: Arc<dyn Service>) -> Result<Endpoint, OrchError> {
    if !addr.ends_with(":0") {
        if let Ok(conn) = Connection::connect(addr, Duration::from_millis(300)) {
            if matches!(conn.call(&Request::Health, Duration::from_millis(500)), Ok(Response::HealthOk))
            {
                return Ok(Endpoint { addr: addr.to_string(), server: None });
            }
        }
    }
    let server = serve(addr, svc)?;
    let addr = server.local_addr().to_string();
    Ok(Endpoint { addr, server: Some(server) })
}

/// Fixed-rate training loop for threads mode. Holds `train_hz` on an
/// absolute-deadline schedule regardless of actor latency, waits for
/// buffer readiness first, and logs one CSV row per second.
pub fn run_trainer_loop(
    svc: Arc<TrainerService>,
    stop: Arc<AtomicBool>,
    failed: Arc<AtomicBool>,
    train_hz: f64,
    csv_path: Option<&Path>,
) {
    let period = Duration::from_secs_f64(1.0 / train_hz);
    svc.core.lock().unwrap().enable_pipelined_sampling();
    let mut csv = csv_path.and_then(|p| File::create(p).ok()).map(BufWriter::new);
    if let Some(c) = csv.as_mut() {
        let _ = writeln!(c, "step,loss,version,rate");
    }
    let mut next = Instant::now() + period;
    let mut last_log = Instant::now();
    let mut steps_at_log = 0u64;
    let mut consecutive_errors = 0u32;

    while !stop.load(Ordering::SeqCst) {
        {
            let mut core = svc.core.lock().unwrap();
            match core.poll_ready() {
                Ok(false) => {
                    drop(core);
                    std::thread::sleep(Duration::from_millis(100));
                    next = Instant::now() + period;
                    continue;
                }
                Ok(true) => match core.train_tick() {
                    Ok(_) => consecutive_errors = 0,
                    Err(_) => consecutive_errors += 1,
                },
                Err(_) => consecutive_errors += 1,
            }
        }
        if consecutive_errors > 5 {
            failed.store(true, Ordering::SeqCst);
            break;
        }
        if last_log.elapsed() >= Duration::from_secs(1) {
            let (steps, loss, version) = {
                let core = svc.core.lock().unwrap();
                (core.steps_done, core.last_loss, core.params.version)
            };
            let rate = (steps - steps_at_log) as f64 / last_log.elapsed().as_secs_f64();
            if let Some(c) = csv.as_mut() {
                let _ = writeln!(c, "{},{},{},{:.2}", steps, loss, version, rate);
            }
            steps_at_log = steps;
            last_log = Instant::now();
        }
        let now = Instant::now();
        if next > now {
            std::thread::sleep(next - now);
            next += period;
        } else {
            // missed deadlines are dropped, never repaid in a burst: the
            // loop rate stays at or below train_hz
            next = now + period;
        }
    }
    if let Some(c) = csv.as_mut() {
        let _ = c.flush();
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub converged: bool,
    pub time_to_threshold_secs: Option<f64>,
    pub episodes: usize,
    pub trainer_steps: u64,
    pub final_version: u64,
    pub out_dir: PathBuf,
}

struct LoadedArena {
    spec: Arc<ArenaSpec>,
    path: PathBuf,
    blob_hash: String,
}

fn load_arenas(topo: &Topology) -> Result<Vec<LoadedArena>, OrchError> {
    topo.sims
        .iter()
        .map(|s| {
            let text = std::fs::read_to_string(&s.arena_path).map_err(|e| {
                OrchError::Config(format!("arena {}: {e}", s.arena_path.display()))
            })?;
            let spec = load_arena(&text)?;
            Ok(LoadedArena {
                spec: Arc::new(spec),
                path: s.arena_path.clone(),
                blob_hash: git_blob_hash(text.as_bytes()),
            })
        })
        .collect()
}

/// Launch every role (hosting locally or attaching to live remote
/// addresses), run until the moving-average reward reaches the threshold
/// or the budget expires, and write `episodes.csv`, `trainer.csv` and
/// `manifest.txt` into `out_dir`.
pub fn run_experiment(topo: &Topology, out_dir: &Path) -> Result<ExperimentOutcome, OrchError> {
    topo.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let arenas = load_arenas(topo)?;
    let started = Instant::now();

    // replay
    let replay_svc = Arc::new(ReplayService::new(
        ReplayBuffer::new(topo.hyper.replay_capacity),
        derive_seed(topo.seed, 2),
    ));
    let replay = spawn_or_attach(&topo.replay_addr, replay_svc.clone())?;

    // trainer
    let trainer_conn_for_core = Connection::connect(&replay.addr, Duration::from_secs(5))?;
    let trainer_svc = Arc::new(TrainerService::new(TrainerCore::new(
        derive_seed(topo.seed, 1),
        topo.hyper.clone(),
        topo.sim_config.max_range as f32,
        trainer_conn_for_core,
    )));
    let trainer = spawn_or_attach(&topo.trainer_addr, trainer_svc.clone())?;

    // simulators
    let mut sim_endpoints = Vec::new();
    for (i, (entry, arena)) in topo.sims.iter().zip(&arenas).enumerate() {
        let world = World::new(
            arena.spec.clone(),
            entry.n_agents,
            topo.sim_config.clone(),
            derive_seed(topo.seed, 200 + i as u64),
        )?;
        let svc = Arc::new(SimService::new(world));
        sim_endpoints.push(spawn_or_attach(&entry.addr, svc)?);
    }

    // coordinator
    let episodes_csv = out_dir.join("episodes.csv");
    let coordinator_svc = Arc::new(Coordinator::new(
        topo.threshold,
        topo.reward_window,
        Some(&episodes_csv),
    )?);
    let coordinator = spawn_or_attach(&topo.coordinator_addr, coordinator_svc.clone())?;

    let actor_cfg_for = |i: usize, sim_addr: &str, arena: Arc<ArenaSpec>, n_agents: usize| {
        ActorConfig {
            sim_addr: sim_addr.to_string(),
            replay_addr: replay.addr.clone(),
            trainer_addr: trainer.addr.clone(),
            coordinator_addr: coordinator.addr.clone(),
            arena,
            sim_config: topo.sim_config.clone(),
            hyper: topo.hyper.clone(),
            n_agents,
            seed: derive_seed(topo.seed, 100 + i as u64),
            episode_cap: topo.episode_cap,
            latency_factor: topo.actor_latency_factor,
            call_timeout: Duration::from_secs(30),
        }
    };

    let trainer_csv = out_dir.join("trainer.csv");
    match topo.mode {
        RunMode::Threads => {
            let stop = Arc::new(AtomicBool::new(false));
            let failed = Arc::new(AtomicBool::new(false));

            let trainer_thread = if trainer.hosted_here() {
                let svc = trainer_svc.clone();
                let stop_t = stop.clone();
                let failed_t = failed.clone();
                let hz = topo.hyper.train_hz;
                let csv = trainer_csv.clone();
                Some(std::thread::Builder::new().name("trainer".into()).spawn(move || {
                    run_trainer_loop(svc, stop_t, failed_t, hz, Some(&csv));
                })?)
            } else {
                None
            };

            let mut actor_threads = Vec::new();
            for (i, (entry, arena)) in topo.sims.iter().zip(&arenas).enumerate() {
                let cfg =
                    actor_cfg_for(i, &sim_endpoints[i].addr, arena.spec.clone(), entry.n_agents);
                let stop_a = stop.clone();
                let failed_a = failed.clone();
                actor_threads.push(
                    std::thread::Builder::new().name(format!("actor-{i}")).spawn(move || {
                        match Actor::connect(cfg) {
                            Ok(actor) => match actor.run(&stop_a) {
                                Ok(report) => Some(report),
                                Err(_) => {
                                    failed_a.store(true, Ordering::SeqCst);
                                    None
                                }
                            },
                            Err(_) => {
                                failed_a.store(true, Ordering::SeqCst);
                                None
                            }
                        }
                    })?,
                );
            }

            // monitor: threshold, role failure, wall budget
            loop {
                if coordinator_svc.stopped() || failed.load(Ordering::SeqCst) {
                    break;
                }
                if started.elapsed().as_secs_f64() > topo.budget_secs {
                    coordinator_svc.request_stop();
                    break;
                }
                std::thread::sleep(Duration::from_millis(50));
            }
            stop.store(true, Ordering::SeqCst);
            for t in actor_threads {
                let _ = t.join();
            }
            if let Some(t) = trainer_thread {
                let _ = t.join();
            }
            if failed.load(Ordering::SeqCst) {
                coordinator_svc.flush();
                write_manifest(topo, out_dir, &arenas, &coordinator_svc, &trainer_svc, "failed")?;
                return Err(OrchError::Runtime(
                    "a role failed; partial metrics preserved".into(),
                ));
            }
        }
        RunMode::Lockstep => {
            let entry = &topo.sims[0];
            let cfg = actor_cfg_for(0, &sim_endpoints[0].addr, arenas[0].spec.clone(), entry.n_agents);
            let mut actor = Actor::connect(cfg)?;
            let steps_per_tick =
                (topo.hyper.train_hz * topo.sim_config.action_period).round() as usize;
            let mut csv = BufWriter::new(File::create(&trainer_csv)?);
            writeln!(csv, "step,loss,version,rate")?;
            let mut last_log = Instant::now();
            let mut steps_at_log = 0u64;

            for _ in 0..topo.budget_ticks {
                actor.tick()?;
                {
                    let mut core = trainer_svc.core.lock().unwrap();
                    if core.poll_ready()? {
                        for _ in 0..steps_per_tick {
                            core.train_tick()?;
                        }
                    }
                    if last_log.elapsed() >= Duration::from_secs(1) {
                        let rate =
                            (core.steps_done - steps_at_log) as f64 / last_log.elapsed().as_secs_f64();
                        writeln!(csv, "{},{},{},{:.2}", core.steps_done, core.last_loss, core.params.version, rate)?;
                        steps_at_log = core.steps_done;
                        last_log = Instant::now();
                    }
                }
                if actor.should_stop() || coordinator_svc.stopped() {
                    break;
                }
                if started.elapsed().as_secs_f64() > topo.budget_secs {
                    coordinator_svc.request_stop();
                    break;
                }
            }
            csv.flush()?;
        }
    }

    coordinator_svc.flush();
    let status = if coordinator_svc.reached().is_some() { "converged" } else { "budget_exhausted" };
    write_manifest(topo, out_dir, &arenas, &coordinator_svc, &trainer_svc, status)?;

    Ok(ExperimentOutcome {
        converged: coordinator_svc.reached().is_some(),
        time_to_threshold_secs: coordinator_svc.reached().map(|(d, _)| d.as_secs_f64()),
        episodes: coordinator_svc.total_episodes(),
        trainer_steps: trainer_svc.steps_done(),
        final_version: trainer_svc.version(),
        out_dir: out_dir.to_path_buf(),
    })
}

fn write_manifest(
    topo: &Topology,
    out_dir: &Path,
    arenas: &[LoadedArena],
    coordinator: &Coordinator,
    trainer: &TrainerService,
    status: &str,
) -> Result<(), OrchError> {
    let mut f = BufWriter::new(File::create(out_dir.join("manifest.txt"))?);
    writeln!(f, "status {status}")?;
    if let Some((t, episodes)) = coordinator.reached() {
        writeln!(f, "time_to_threshold_secs {:.3}", t.as_secs_f64())?;
        writeln!(f, "episodes_to_threshold {episodes}")?;
    }
    writeln!(f, "episodes {}", coordinator.total_episodes())?;
    let (steps, skipped, version) = {
        let core = trainer.core.lock().unwrap();
        (core.steps_done, core.nonfinite_skipped, core.params.version)
    };
    writeln!(f, "trainer_steps {steps}")?;
    writeln!(f, "nonfinite_skipped {skipped}")?;
    writeln!(f, "final_version {version}")?;
    for a in arenas {
        writeln!(f, "arena {} blob {}", a.path.display(), a.blob_hash)?;
    }
    writeln!(f, "--- config ---")?;
    write!(f, "{}", topo.to_text())?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
topology v1
# one local instance
sim 127.0.0.1:0 missing.arena 8
replay 127.0.0.1:0
trainer 127.0.0.1:0
coordinator 127.0.0.1:0
gamma 0.99
replay_capacity 2000
train_hz 25
frame_period_ms 4
seed 11
threshold 150
mode threads
";

    #[test]
    fn parse_sample_topology() {
        let t = Topology::parse(SAMPLE, Path::new("/tmp")).unwrap();
        assert_eq!(t.sims.len(), 1);
        assert_eq!(t.sims[0].n_agents, 8);
        assert_eq!(t.sims[0].arena_path, Path::new("/tmp/missing.arena"));
        assert_eq!(t.hyper.replay_capacity, 2000);
        assert_eq!(t.hyper.train_hz, 25.0);
        assert_eq!(t.sim_config.frame_period, Duration::from_millis(4));
        assert_eq!(t.seed, 11);
        assert_eq!(t.threshold, 150.0);
        // defaults survive
        assert_eq!(t.hyper.batch_size, 32);
        assert_eq!(t.hyper.target_sync_every, 150);
        assert_eq!(t.episode_cap, 200);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_bad_header() {
        assert!(Topology::parse("topology v1\nwat 3\n", Path::new(".")).is_err());
        assert!(Topology::parse("arena v1\n", Path::new(".")).is_err());
    }

    #[test]
    fn validate_requires_sims_and_distinct_addresses() {
        let mut t = Topology::default();
        assert!(t.validate().is_err());
        t.sims.push(SimEntry {
            addr: "127.0.0.1:7001".into(),
            arena_path: "a.arena".into(),
            n_agents: 1,
        });
        t.replay_addr = "127.0.0.1:7001".into();
        assert!(t.validate().is_err());
        t.replay_addr = "127.0.0.1:7002".into();
        t.validate().unwrap();
    }

    #[test]
    fn lockstep_requires_single_sim_and_tick_budget() {
        let mut t = Topology::default();
        t.sims.push(SimEntry { addr: "127.0.0.1:0".into(), arena_path: "a".into(), n_agents: 2 });
        t.mode = RunMode::Lockstep;
        assert!(t.validate().is_err());
        t.budget_ticks = 100;
        t.validate().unwrap();
        t.sims.push(SimEntry { addr: "127.0.0.1:0".into(), arena_path: "b".into(), n_agents: 2 });
        assert!(t.validate().is_err());
    }

    #[test]
    fn to_text_round_trips() {
        let mut t = Topology::parse(SAMPLE, Path::new("/tmp")).unwrap();
        t.budget_ticks = 500;
        t.mode = RunMode::Lockstep;
        let text = t.to_text();
        let u = Topology::parse(&text, Path::new("")).unwrap();
        assert_eq!(u.hyper, t.hyper);
        assert_eq!(u.seed, t.seed);
        assert_eq!(u.mode, t.mode);
        assert_eq!(u.budget_ticks, t.budget_ticks);
        assert_eq!(u.sim_config, t.sim_config);
    }
}
