//! Wire-facing role implementations: the replay service, the simulator
//! service, the trainer (training core + parameter serving) and the
//! experiment coordinator that collects episode records.

use crate::dqn::{build_network, sync_target, train_step, Hyperparams};
use crate::nn::{AdamState, NetParams};
use crate::replay::{Experience, ReplayBuffer};
use crate::simcore::World;
use crate::wire::{
    Connection, EpisodeReport, Request, Response, Service, ServiceError, WireError,
    WireStateTriple,
};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

const RPC_TIMEOUT: Duration = Duration::from_secs(30);

/// Replay buffer behind PushExperiences / SampleBatch / ReplayStats.
/// Push batches are atomic under the interior lock; sampling sees a
/// consistent snapshot.
pub struct ReplayService {
    buffer: Mutex<ReplayBuffer>,
    rng: Mutex<StdRng>,
}

impl ReplayService {
    pub fn new(buffer: ReplayBuffer, sample_seed: u64) -> Self {
        Self { buffer: Mutex::new(buffer), rng: Mutex::new(StdRng::seed_from_u64(sample_seed)) }
    }

    pub fn stats(&self) -> crate::replay::ReplayStatsSnapshot {
        self.buffer.lock().unwrap().stats()
    }

    /// Inspect the buffer under the service lock (diagnostics and tests).
    pub fn with_buffer<T>(&self, f: impl FnOnce(&ReplayBuffer) -> T) -> T {
        f(&self.buffer.lock().unwrap())
    }
}

impl Service for ReplayService {
    fn handle(&self, req: Request) -> Result<Response, ServiceError> {
        match req {
            Request::PushExperiences { items } => {
                let report = self.buffer.lock().unwrap().push(items);
                Ok(Response::PushOutcome {
                    accepted: report.accepted as u32,
                    rejected_indices: report.rejected.iter().map(|(i, _)| *i as u32).collect(),
                })
            }
            Request::SampleBatch { n } => {
                let buffer = self.buffer.lock().unwrap();
                let mut rng = self.rng.lock().unwrap();
                match buffer.sample(n as usize, &mut *rng) {
                    Ok(batch) => Ok(Response::Batch(batch)),
                    Err(_) => Ok(Response::SampleNotReady),
                }
            }
            Request::ReplayStats => {
                let s = self.buffer.lock().unwrap().stats();
                Ok(Response::ReplayStats {
                    len: s.len as u64,
                    capacity: s.capacity as u64,
                    a_t: s.a_t,
                    insert_count: s.insert_count,
                })
            }
            Request::Health => Ok(Response::HealthOk),
            other => Err(ServiceError::new(format!(
                "replay service does not handle {:?}",
                other.kind()
            ))),
        }
    }
}

/// One simulator instance behind the state/action/reset endpoints.
/// Requests are serialized through the world lock, so each observes a
/// consistent tick.
pub struct SimService {
    world: Mutex<World>,
}

impl SimService {
    pub fn new(world: World) -> Self {
        Self { world: Mutex::new(world) }
    }

    pub fn barrier_waits(&self) -> u64 {
        self.world.lock().unwrap().clock().barrier_waits()
    }

    pub fn with_world<T>(&self, f: impl FnOnce(&mut World) -> T) -> T {
        f(&mut self.world.lock().unwrap())
    }
}

impl Service for SimService {
    fn handle(&self, req: Request) -> Result<Response, ServiceError> {
        match req {
            Request::GetBatchStates { agent_ids } => {
                let ids: Vec<usize> = agent_ids.iter().map(|&i| i as usize).collect();
                let triples = self.world.lock().unwrap().get_states_batched(&ids)?;
                Ok(Response::States(to_wire_states(triples)))
            }
            Request::GetStatesNonBatched { agent_ids } => {
                let ids: Vec<usize> = agent_ids.iter().map(|&i| i as usize).collect();
                let triples = self.world.lock().unwrap().get_states_nonbatched(&ids)?;
                Ok(Response::States(to_wire_states(triples)))
            }
            Request::ApplyActions { actions } => {
                let mut world = self.world.lock().unwrap();
                for (id, action) in actions {
                    world.apply_action(id as usize, action.to_sim_action())?;
                }
                Ok(Response::ActionsApplied)
            }
            Request::StepPeriod => {
                let outcomes = self.world.lock().unwrap().step_action_period();
                Ok(Response::StepOutcomes(
                    outcomes
                        .into_iter()
                        .map(|(id, o)| (id as u32, o.reward, o.terminal))
                        .collect(),
                ))
            }
            Request::ResetVehicle { agent_id, pose } => {
                self.world.lock().unwrap().reset_vehicle(agent_id as usize, pose)?;
                Ok(Response::VehicleReset)
            }
            Request::ResetAll => {
                self.world.lock().unwrap().reset_all();
                Ok(Response::AllReset)
            }
            Request::Health => Ok(Response::HealthOk),
            other => {
                Err(ServiceError::new(format!("sim service does not handle {:?}", other.kind())))
            }
        }
    }
}

fn to_wire_states(triples: Vec<crate::simcore::AgentStateTriple>) -> Vec<WireStateTriple> {
    triples
        .into_iter()
        .map(|t| WireStateTriple {
            now: t.now,
            prev: t.prev,
            velocity: [t.velocity.x as f32, t.velocity.y as f32, t.velocity.z as f32],
        })
        .collect()
}

type BatchResult = Result<Option<Vec<Experience>>, WireError>;

/// Fetches the next mini-batch concurrently with the current gradient
/// step, keeping the replay round-trip off the trainer's critical path.
struct BatchPrefetcher {
    trigger: mpsc::Sender<()>,
    batches: mpsc::Receiver<BatchResult>,
}

impl BatchPrefetcher {
    fn start(conn: Connection, batch_size: u32) -> BatchPrefetcher {
        let (trigger, trigger_rx) = mpsc::channel::<()>();
        let (batch_tx, batches) = mpsc::channel::<BatchResult>();
        std::thread::Builder::new()
            .name("batch-prefetch".into())
            .spawn(move || {
                while trigger_rx.recv().is_ok() {
                    let result = match conn.call(&Request::SampleBatch { n: batch_size }, RPC_TIMEOUT)
                    {
                        Ok(Response::Batch(items)) => Ok(Some(items)),
                        Ok(Response::SampleNotReady) => Ok(None),
                        Ok(other) => {
                            Err(WireError::Protocol(format!("unexpected response {other:?}")))
                        }
                        Err(e) => Err(e),
                    };
                    if batch_tx.send(result).is_err() {
                        return;
                    }
                }
            })
            .expect("spawn batch prefetcher");
        let _ = trigger.send(());
        BatchPrefetcher { trigger, batches }
    }

    fn take(&self) -> BatchResult {
        let result = self
            .batches
            .recv()
            .unwrap_or_else(|_| Err(WireError::ConnectionClosed));
        let _ = self.trigger.send(());
        result
    }
}

/// The training loop state: online/target parameters, Adam, and the
/// connection to the replay service. The core is the only mutator of the
/// online parameters; actors receive snapshots through `GetParams`.
pub struct TrainerCore {
    pub params: NetParams,
    pub target: NetParams,
    pub adam: AdamState,
    pub hyper: Hyperparams,
    pub max_range: f32,
    replay: Connection,
    prefetch: Option<BatchPrefetcher>,
    pub steps_done: u64,
    pub syncs_done: u64,
    pub nonfinite_skipped: u64,
    pub last_loss: f32,
    ready: bool,
}

impl TrainerCore {
    /// Build the seeded network and publish it as version 1 so actors can
    /// fetch an initial snapshot.
    pub fn new(seed: u64, hyper: Hyperparams, max_range: f32, replay: Connection) -> Self {
        let mut params = build_network(seed);
        params.version = 1;
        let target = sync_target(&params);
        let adam = AdamState::new(params.param_count(), hyper.lr);
        Self {
            params,
            target,
            adam,
            hyper,
            max_range,
            replay,
            prefetch: None,
            steps_done: 0,
            syncs_done: 0,
            nonfinite_skipped: 0,
            last_loss: f32::NAN,
            ready: false,
        }
    }

    /// Overlap each SampleBatch round-trip with the previous gradient
    /// step. Free-running (threads) mode only: a concurrent sampler races
    /// actor pushes, so deterministic lockstep keeps synchronous fetches.
    pub fn enable_pipelined_sampling(&mut self) {
        if self.prefetch.is_none() {
            self.prefetch = Some(BatchPrefetcher::start(
                self.replay.clone(),
                self.hyper.batch_size as u32,
            ));
        }
    }

    /// Training is gated on a full buffer; polls replay stats until then.
    pub fn poll_ready(&mut self) -> Result<bool, WireError> {
        if self.ready {
            return Ok(true);
        }
        match self.replay.call(&Request::ReplayStats, RPC_TIMEOUT)? {
            Response::ReplayStats { len, capacity, .. } => {
                self.ready = len >= capacity;
                Ok(self.ready)
            }
            other => Err(WireError::Protocol(format!("unexpected response {other:?}"))),
        }
    }

    /// One fixed-rate iteration: sample a mini-batch, take a gradient
    /// step, and sync the target every `target_sync_every` applied steps.
    /// A non-finite loss or gradient skips the update and is counted.
    pub fn train_tick(&mut self) -> Result<Option<f32>, WireError> {
        let fetched = match &self.prefetch {
            Some(p) => p.take()?,
            None => match self
                .replay
                .call(&Request::SampleBatch { n: self.hyper.batch_size as u32 }, RPC_TIMEOUT)?
            {
                Response::Batch(items) => Some(items),
                Response::SampleNotReady => None,
                other => {
                    return Err(WireError::Protocol(format!("unexpected response {other:?}")))
                }
            },
        };
        let Some(batch) = fetched else {
            return Ok(None);
        };
        match train_step(
            &mut self.params,
            &self.target,
            &batch,
            &mut self.adam,
            &self.hyper,
            self.max_range,
        ) {
            Ok(loss) => {
                self.steps_done += 1;
                self.last_loss = loss;
                if self.steps_done.is_multiple_of(self.hyper.target_sync_every) {
                    self.target = sync_target(&self.params);
                    self.syncs_done += 1;
                }
                Ok(Some(loss))
            }
            Err(crate::dqn::DqnError::NonFiniteLoss)
            | Err(crate::dqn::DqnError::Nn(crate::nn::NnError::NonFiniteGradient)) => {
                self.nonfinite_skipped += 1;
                Ok(None)
            }
            Err(e) => Err(WireError::Protocol(format!("train step failed: {e}"))),
        }
    }
}

/// Shares the trainer core between the training loop and `GetParams`.
pub struct TrainerService {
    pub core: Mutex<TrainerCore>,
}

impl TrainerService {
    pub fn new(core: TrainerCore) -> Self {
        Self { core: Mutex::new(core) }
    }

    pub fn version(&self) -> u64 {
        self.core.lock().unwrap().params.version
    }

    pub fn steps_done(&self) -> u64 {
        self.core.lock().unwrap().steps_done
    }
}

impl Service for TrainerService {
    fn handle(&self, req: Request) -> Result<Response, ServiceError> {
        match req {
            Request::GetParams { have_version } => {
                let core = self.core.lock().unwrap();
                if core.params.version > have_version {
                    Ok(Response::Params { blob: core.params.encode_blob() })
                } else {
                    Ok(Response::ParamsUpToDate)
                }
            }
            Request::Health => Ok(Response::HealthOk),
            other => Err(ServiceError::new(format!(
                "trainer service does not handle {:?}",
                other.kind()
            ))),
        }
    }
}

struct CoordinatorState {
    window: std::collections::VecDeque<f32>,
    records: Vec<EpisodeReport>,
    total_episodes: usize,
    stop: bool,
    reached: Option<(Duration, usize)>,
    csv: Option<BufWriter<File>>,
}

/// Collects per-episode records from every actor, maintains the moving
/// average that defines convergence, writes `episodes.csv`, and tells
/// actors when to stop via the ReportEpisode acknowledgement.
pub struct Coordinator {
    threshold: f32,
    window_size: usize,
    started: Instant,
    state: Mutex<CoordinatorState>,
}

impl Coordinator {
    pub fn new(threshold: f32, window_size: usize, csv_path: Option<&Path>) -> std::io::Result<Self> {
        let csv = match csv_path {
            Some(p) => {
                let mut f = BufWriter::new(File::create(p)?);
                writeln!(f, "agent_id,episode,reward,steps,epsilon,t_start,t_end")?;
                Some(f)
            }
            None => None,
        };
        Ok(Self {
            threshold,
            window_size,
            started: Instant::now(),
            state: Mutex::new(CoordinatorState {
                window: std::collections::VecDeque::with_capacity(window_size),
                records: Vec::new(),
                total_episodes: 0,
                stop: false,
                reached: None,
                csv,
            }),
        })
    }

    pub fn request_stop(&self) {
        self.state.lock().unwrap().stop = true;
    }

    pub fn stopped(&self) -> bool {
        self.state.lock().unwrap().stop
    }

    /// Wall-clock time to threshold and episode count, when reached.
    pub fn reached(&self) -> Option<(Duration, usize)> {
        self.state.lock().unwrap().reached
    }

    pub fn total_episodes(&self) -> usize {
        self.state.lock().unwrap().total_episodes
    }

    /// Every record received so far, in arrival order.
    pub fn records(&self) -> Vec<EpisodeReport> {
        self.state.lock().unwrap().records.clone()
    }

    /// Mean of the current window, when full.
    pub fn moving_average(&self) -> Option<f32> {
        let st = self.state.lock().unwrap();
        if st.window.len() == self.window_size {
            Some(st.window.iter().sum::<f32>() / self.window_size as f32)
        } else {
            None
        }
    }

    pub fn flush(&self) {
        if let Some(csv) = self.state.lock().unwrap().csv.as_mut() {
            let _ = csv.flush();
        }
    }

    fn record(&self, r: &EpisodeReport) -> bool {
        let mut st = self.state.lock().unwrap();
        st.total_episodes += 1;
        st.records.push(r.clone());
        if let Some(csv) = st.csv.as_mut() {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}.{:03},{}.{:03}",
                r.agent_id,
                r.episode,
                r.reward,
                r.steps,
                r.epsilon,
                r.t_start_ms / 1000,
                r.t_start_ms % 1000,
                r.t_end_ms / 1000,
                r.t_end_ms % 1000,
            );
        }
        if st.window.len() == self.window_size {
            st.window.pop_front();
        }
        st.window.push_back(r.reward);
        if !st.stop && st.window.len() == self.window_size {
            let avg = st.window.iter().sum::<f32>() / self.window_size as f32;
            if avg >= self.threshold {
                st.stop = true;
                st.reached = Some((self.started.elapsed(), st.total_episodes));
            }
        }
        st.stop
    }
}

impl Service for Coordinator {
    fn handle(&self, req: Request) -> Result<Response, ServiceError> {
        match req {
            Request::ReportEpisode(report) => {
                let stop = self.record(&report);
                Ok(Response::EpisodeAck { stop })
            }
            Request::Health => Ok(Response::HealthOk),
            other => Err(ServiceError::new(format!(
                "coordinator does not handle {:?}",
                other.kind()
            ))),
        }
    }
}
