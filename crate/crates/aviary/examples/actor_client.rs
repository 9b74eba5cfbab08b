//! Run one actor against already-running services (see replay_server,
//! trainer_server, sim_server; episodes are reported to a coordinator, so
//! usually this is driven from `train_local` / run_experiment instead).
//!
//!     cargo run --release --example actor_client -- \
//!         SIM_ADDR REPLAY_ADDR TRAINER_ADDR COORDINATOR_ADDR ARENA N_AGENTS [SEED]

use aviary::arena::load_arena;
use aviary::dqn::Hyperparams;
use aviary::orchestrator::{Actor, ActorConfig};
use aviary::simcore::SimConfig;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 6 {
        eprintln!(
            "usage: actor_client SIM_ADDR REPLAY_ADDR TRAINER_ADDR COORDINATOR_ADDR ARENA N [SEED]"
        );
        std::process::exit(1);
    }
    let text = std::fs::read_to_string(&args[4]).expect("read arena");
    let arena = Arc::new(load_arena(&text).expect("valid arena"));
    let cfg = ActorConfig {
        sim_addr: args[0].clone(),
        replay_addr: args[1].clone(),
        trainer_addr: args[2].clone(),
        coordinator_addr: args[3].clone(),
        arena,
        sim_config: SimConfig::default(),
        hyper: Hyperparams::default(),
        n_agents: args[5].parse().expect("agent count"),
        seed: args.get(6).map(|s| s.parse().expect("seed")).unwrap_or(0),
        episode_cap: 200,
        latency_factor: 1.0,
        call_timeout: Duration::from_secs(30),
    };

    let actor = Actor::connect(cfg).expect("connect actor");
    println!("actor connected; driving agents until the coordinator says stop");
    let never_stop = AtomicBool::new(false);
    match actor.run(&never_stop) {
        Ok(report) => println!(
            "actor done: {} ticks, {} episodes, {} experiences pushed",
            report.ticks, report.episodes_completed, report.experiences_pushed
        ),
        Err(e) => {
            eprintln!("actor failed: {e}");
            std::process::exit(1);
        }
    }
}
