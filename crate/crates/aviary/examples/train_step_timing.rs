//! Microbenchmark of one training step (batch 32) and one 32-state
//! q_values_batch call; the training loop budget at 50 Hz is 20 ms/step.
//!
//!     cargo run --release --example train_step_timing

use aviary::dqn::{
    build_network, q_values_batch, sync_target, train_step, ActionIndex, Hyperparams, StackedState,
};
use aviary::nn::AdamState;
use aviary::replay::Experience;
use aviary::simcore::DepthImage;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::time::Instant;

fn random_state(rng: &mut StdRng) -> StackedState {
    let img = |rng: &mut StdRng| {
        DepthImage::from_depths((0..1024).map(|_| rng.gen_range(0.0..20.0)).collect()).unwrap()
    };
    StackedState {
        image_now: img(rng),
        image_prev: img(rng),
        velocity: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0],
    }
}

fn main() {
    let mut rng = StdRng::seed_from_u64(1);
    let mut params = build_network(1);
    let target = sync_target(&params);
    let hyper = Hyperparams::default();
    let mut adam = AdamState::new(params.param_count(), hyper.lr);
    let batch: Vec<Experience> = (0..32)
        .map(|i| Experience {
            state: random_state(&mut rng),
            action: ActionIndex::new(i % 2).unwrap(),
            next_state: random_state(&mut rng),
            reward: 3.0,
            done: false,
        })
        .collect();

    // warmup
    for _ in 0..5 {
        train_step(&mut params, &target, &batch, &mut adam, &hyper, 20.0).unwrap();
    }
    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        train_step(&mut params, &target, &batch, &mut adam, &hyper, 20.0).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    println!("train_step (batch 32): {per_step:.2} ms  (50 Hz budget: 20 ms)");

    let states: Vec<&StackedState> = batch.iter().map(|e| &e.state).collect();
    let t0 = Instant::now();
    for _ in 0..n {
        q_values_batch(&params, &states, 20.0).unwrap();
    }
    let per_fwd = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    println!("q_values_batch (32 states): {per_fwd:.2} ms");

    // full trainer tick including the SampleBatch round-trip
    use aviary::orchestrator::{ReplayService, TrainerCore};
    use aviary::replay::ReplayBuffer;
    use aviary::wire::{serve, Connection};
    use std::sync::Arc;

    let mut buffer = ReplayBuffer::new(512);
    while !buffer.is_full() {
        buffer.push(batch.clone());
    }
    let svc = Arc::new(ReplayService::new(buffer, 1));
    let server = serve("127.0.0.1:0", svc).unwrap();
    let conn = Connection::connect(server.local_addr(), std::time::Duration::from_secs(5)).unwrap();
    let mut core = TrainerCore::new(2, hyper.clone(), 20.0, conn);
    for _ in 0..5 {
        core.train_tick().unwrap();
    }
    let t0 = Instant::now();
    for _ in 0..n {
        core.train_tick().unwrap();
    }
    let per_tick = t0.elapsed().as_secs_f64() * 1000.0 / n as f64;
    println!("trainer tick incl. SampleBatch RPC: {per_tick:.2} ms");
}
