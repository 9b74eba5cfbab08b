//! Host one simulator instance standalone.
//!
//!     cargo run --release --example sim_server -- [ADDR] [ARENA] [N_AGENTS] [SEED]
//!
//! Defaults: 127.0.0.1:7810, arenas/train.arena, 8 agents, seed 0.

use aviary::arena::load_arena;
use aviary::orchestrator::SimService;
use aviary::simcore::{SimConfig, World};
use aviary::wire::serve;
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:7810".into());
    let arena_path = args
        .next()
        .unwrap_or_else(|| format!("{}/arenas/train.arena", env!("CARGO_MANIFEST_DIR")));
    let n_agents: usize = args.next().map(|s| s.parse().expect("agent count")).unwrap_or(8);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);

    let text = std::fs::read_to_string(&arena_path).expect("read arena");
    let arena = Arc::new(load_arena(&text).expect("valid arena"));
    let world = World::new(arena, n_agents, SimConfig::default(), seed).expect("world");
    let svc = Arc::new(SimService::new(world));
    let server = serve(&addr as &str, svc.clone()).expect("bind sim service");
    println!(
        "simulator on {} ({} agents, arena {})",
        server.local_addr(),
        n_agents,
        arena_path
    );

    loop {
        std::thread::sleep(Duration::from_secs(10));
        println!("barrier waits served: {}", svc.barrier_waits());
    }
}
