//! The actor loop: drives one simulator instance tick by tick, feeds the
//! replay service, reports episodes, and refreshes its policy snapshot at
//! episode boundaries.
//!
//! Asynchronous episodic training: the moment an agent's episode ends it is
//! reset with a fresh spawn inside the same tick. No agent ever waits on a
//! co-hosted agent's episode boundary.

use super::OrchError;
use crate::arena::ArenaSpec;
use crate::dqn::{
    epsilon_schedule, q_values_batch, select_action, ActionIndex, Hyperparams, StackedState,
};
use crate::nn::NetParams;
use crate::replay::Experience;
use crate::simcore::{SimConfig, Terminal};
use crate::util::derive_seed;
use crate::wire::{get_params_client, Connection, EpisodeReport, Request, Response};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

#[derive(Debug, Clone)]
pub struct ActorConfig {
    pub sim_addr: String,
    pub replay_addr: String,
    pub trainer_addr: String,
    pub coordinator_addr: String,
    pub arena: Arc<ArenaSpec>,
    pub sim_config: SimConfig,
    pub hyper: Hyperparams,
    pub n_agents: usize,
    pub seed: u64,
    pub episode_cap: u32,
    /// Artificial per-tick slowdown factor (1.0 = none); each tick sleeps
    /// (factor - 1) times its own measured duration.
    pub latency_factor: f64,
    pub call_timeout: Duration,
}

struct Pending {
    state: StackedState,
    action: ActionIndex,
    reward: f32,
}

struct EpisodeTracker {
    index: u32,
    reward: f32,
    steps: u32,
    start_tick: u64,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct TickSummary {
    pub episodes_ended: usize,
    pub experiences_pushed: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ActorReport {
    pub ticks: u64,
    pub episodes_completed: u64,
    pub experiences_pushed: u64,
}

pub struct Actor {
    cfg: ActorConfig,
    sim: Connection,
    replay: Connection,
    trainer: Connection,
    coordinator: Connection,
    rng: StdRng,
    params: NetParams,
    pending: Vec<Option<Pending>>,
    episodes: Vec<EpisodeTracker>,
    tick_index: u64,
    period_ms: u64,
    stop: bool,
    report: ActorReport,
}

impl Actor {
    /// Connect to all four services and fetch the initial policy snapshot.
    pub fn connect(cfg: ActorConfig) -> Result<Actor, OrchError> {
        let dial = Duration::from_secs(5);
        let sim = Connection::connect(&cfg.sim_addr, dial)?;
        let replay = Connection::connect(&cfg.replay_addr, dial)?;
        let trainer = Connection::connect(&cfg.trainer_addr, dial)?;
        let coordinator = Connection::connect(&cfg.coordinator_addr, dial)?;
        let params = get_params_client(&trainer, 0, cfg.call_timeout)?
            .ok_or_else(|| OrchError::Runtime("trainer has no parameters to serve".into()))?;
        let rng = StdRng::seed_from_u64(derive_seed(cfg.seed, 0x0ac7_0e00));
        let n = cfg.n_agents;
        let period_ms = (cfg.sim_config.action_period * 1000.0).round() as u64;
        Ok(Actor {
            cfg,
            sim,
            replay,
            trainer,
            coordinator,
            rng,
            params,
            pending: (0..n).map(|_| None).collect(),
            episodes: (0..n)
                .map(|_| EpisodeTracker { index: 0, reward: 0.0, steps: 0, start_tick: 0 })
                .collect(),
            tick_index: 0,
            period_ms,
            stop: false,
            report: ActorReport::default(),
        })
    }

    pub fn should_stop(&self) -> bool {
        self.stop
    }

    pub fn ticks(&self) -> u64 {
        self.tick_index
    }

    pub fn report(&self) -> ActorReport {
        self.report
    }

    pub fn params_version(&self) -> u64 {
        self.params.version
    }

    /// One action tick for every agent in the paired simulator.
    pub fn tick(&mut self) -> Result<TickSummary, OrchError> {
        let tick_started = Instant::now();
        let timeout = self.cfg.call_timeout;

        // epsilon comes from the global action counter at fetch time
        let a_t = match self.replay.call(&Request::ReplayStats, timeout)? {
            Response::ReplayStats { a_t, .. } => a_t,
            other => return Err(OrchError::unexpected(&other)),
        };
        let epsilon = epsilon_schedule(a_t, self.cfg.hyper.replay_capacity);

        // all agents are alive at tick start (terminals were reset in the
        // tick that ended them)
        let ids: Vec<u32> = (0..self.cfg.n_agents as u32).collect();
        let states: Vec<StackedState> =
            match self.sim.call(&Request::GetBatchStates { agent_ids: ids }, timeout)? {
                Response::States(ws) => ws
                    .into_iter()
                    .map(|w| StackedState {
                        image_now: w.now,
                        image_prev: w.prev,
                        velocity: w.velocity,
                    })
                    .collect(),
                other => return Err(OrchError::unexpected(&other)),
            };

        // complete last tick's transitions now that s' is observed
        let mut push_items: Vec<Experience> = Vec::new();
        for (i, slot) in self.pending.iter_mut().enumerate() {
            if let Some(p) = slot.take() {
                push_items.push(Experience {
                    state: p.state,
                    action: p.action,
                    next_state: states[i].clone(),
                    reward: p.reward,
                    done: false,
                });
            }
        }

        // pick actions from the local snapshot
        let refs: Vec<&StackedState> = states.iter().collect();
        let q = q_values_batch(&self.params, &refs, self.cfg.sim_config.max_range as f32)?;
        let actions: Vec<ActionIndex> =
            q.iter().map(|&qi| select_action(qi, epsilon, &mut self.rng)).collect();
        let wire_actions: Vec<(u32, ActionIndex)> =
            actions.iter().enumerate().map(|(i, &a)| (i as u32, a)).collect();
        match self.sim.call(&Request::ApplyActions { actions: wire_actions }, timeout)? {
            Response::ActionsApplied => {}
            other => return Err(OrchError::unexpected(&other)),
        }

        let outcomes = match self.sim.call(&Request::StepPeriod, timeout)? {
            Response::StepOutcomes(o) => o,
            other => return Err(OrchError::unexpected(&other)),
        };

        let mut ended: Vec<usize> = Vec::new();
        for (id, reward, terminal) in outcomes {
            let i = id as usize;
            let tracker = &mut self.episodes[i];
            tracker.steps += 1;
            tracker.reward += reward;
            if terminal != Terminal::None {
                push_items.push(Experience {
                    state: states[i].clone(),
                    action: actions[i],
                    // terminal targets never bootstrap, and a dead agent is
                    // not rendered again; carry the pre-step state
                    next_state: states[i].clone(),
                    reward,
                    done: true,
                });
                ended.push(i);
            } else if tracker.steps >= self.cfg.episode_cap {
                // step cap: the episode ends without a terminal; the final
                // transition has no observable successor and is dropped
                ended.push(i);
            } else {
                self.pending[i] =
                    Some(Pending { state: states[i].clone(), action: actions[i], reward });
            }
        }

        if !push_items.is_empty() {
            self.report.experiences_pushed += push_items.len() as u64;
            match self.replay.call(&Request::PushExperiences { items: push_items }, timeout)? {
                Response::PushOutcome { .. } => {}
                other => return Err(OrchError::unexpected(&other)),
            }
        }

        let episodes_ended = ended.len();
        for i in ended {
            let tracker = &self.episodes[i];
            let report = EpisodeReport {
                agent_id: i as u32,
                episode: tracker.index,
                reward: tracker.reward,
                steps: tracker.steps,
                epsilon: epsilon as f32,
                t_start_ms: tracker.start_tick * self.period_ms,
                t_end_ms: (self.tick_index + 1) * self.period_ms,
            };
            match self.coordinator.call(&Request::ReportEpisode(report), timeout)? {
                Response::EpisodeAck { stop } => {
                    if stop {
                        self.stop = true;
                    }
                }
                other => return Err(OrchError::unexpected(&other)),
            }
            // immediate individual reset: nobody waits on anyone
            let pose = self.cfg.arena.sample_spawn(&mut self.rng);
            match self.sim.call(&Request::ResetVehicle { agent_id: i as u32, pose }, timeout)? {
                Response::VehicleReset => {}
                other => return Err(OrchError::unexpected(&other)),
            }
            self.report.episodes_completed += 1;
            self.episodes[i] = EpisodeTracker {
                index: tracker.index + 1,
                reward: 0.0,
                steps: 0,
                start_tick: self.tick_index + 1,
            };
            self.pending[i] = None;
        }

        // refresh the policy snapshot at episode boundaries
        if episodes_ended > 0 {
            if let Some(newer) =
                get_params_client(&self.trainer, self.params.version, timeout)?
            {
                self.params = newer;
            }
        }

        if self.cfg.latency_factor > 1.0 {
            let elapsed = tick_started.elapsed();
            std::thread::sleep(elapsed.mul_f64(self.cfg.latency_factor - 1.0));
        }

        self.tick_index += 1;
        self.report.ticks = self.tick_index;
        Ok(TickSummary {
            episodes_ended,
            experiences_pushed: self.report.experiences_pushed as usize,
            epsilon,
        })
    }

    /// Free-running loop for threads mode. Stops on the coordinator's stop
    /// acknowledgement or the external flag; transient connection errors
    /// get a bounded retry (pending transitions are dropped to keep
    /// experience chains intact).
    pub fn run(mut self, external_stop: &AtomicBool) -> Result<ActorReport, OrchError> {
        let mut consecutive_errors = 0u32;
        while !self.stop && !external_stop.load(Ordering::SeqCst) {
            match self.tick() {
                Ok(_) => consecutive_errors = 0,
                Err(OrchError::Wire(e)) => {
                    consecutive_errors += 1;
                    if consecutive_errors > 5 {
                        return Err(OrchError::Wire(e));
                    }
                    for slot in &mut self.pending {
                        *slot = None;
                    }
                    std::thread::sleep(Duration::from_millis(50 * consecutive_errors as u64));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(self.report)
    }
}
