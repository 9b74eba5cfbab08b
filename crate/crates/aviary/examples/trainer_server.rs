//! Host the trainer standalone: a fixed-rate training loop over the replay
//! service plus GetParams serving for actors.
//!
//!     cargo run --release --example trainer_server -- [ADDR] [REPLAY_ADDR] [SEED]
//!
//! Defaults: 127.0.0.1:7702, 127.0.0.1:7701, seed 1.

use aviary::dqn::Hyperparams;
use aviary::orchestrator::{run_trainer_loop, TrainerCore, TrainerService};
use aviary::wire::{serve, Connection};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:7702".into());
    let replay_addr = args.next().unwrap_or_else(|| "127.0.0.1:7701".into());
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(1);

    let hyper = Hyperparams::default();
    let replay = Connection::connect(&replay_addr as &str, Duration::from_secs(10))
        .expect("connect to replay service");
    let core = TrainerCore::new(seed, hyper.clone(), 20.0, replay);
    let svc = Arc::new(TrainerService::new(core));
    let server = serve(&addr as &str, svc.clone()).expect("bind trainer service");
    println!(
        "trainer on {} ({} Hz, batch {}, target sync every {})",
        server.local_addr(),
        hyper.train_hz,
        hyper.batch_size,
        hyper.target_sync_every
    );
    println!("waiting for the replay buffer to fill, then training; ctrl-c to stop");

    let stop = Arc::new(AtomicBool::new(false));
    let failed = Arc::new(AtomicBool::new(false));
    run_trainer_loop(svc, stop, failed, hyper.train_hz, Some(std::path::Path::new("trainer.csv")));
}
