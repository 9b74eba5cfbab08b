//! Quick look at the batched vs non-batched state-collection gap.
//! The full sweep lives in the `bench` binary.
//!
//!     cargo run --release --example latency_demo

use aviary::arena::load_arena;
use aviary::simcore::{SimConfig, World};
use std::sync::Arc;
use std::time::{Duration, Instant};

fn main() {
    let text = std::fs::read_to_string(format!(
        "{}/arenas/train.arena",
        env!("CARGO_MANIFEST_DIR")
    ))
    .expect("read arena");
    let arena = Arc::new(load_arena(&text).expect("valid arena"));
    let cfg = SimConfig { frame_period: Duration::from_millis(16), ..SimConfig::default() };

    println!("frame period 16 ms, 100 calls per cell\n");
    println!("{:>7} {:>14} {:>17} {:>7}", "agents", "batched_ms", "nonbatched_ms", "ratio");
    for n in [1usize, 4, 10] {
        let mut world = World::new(arena.clone(), n, cfg.clone(), 9).expect("world");
        let ids: Vec<usize> = (0..n).collect();
        let mut means = [0.0f64; 2];
        for (slot, batched) in [(0usize, true), (1, false)] {
            for _ in 0..10 {
                // warmup
                collect(&mut world, &ids, batched);
            }
            let t0 = Instant::now();
            for _ in 0..100 {
                collect(&mut world, &ids, batched);
            }
            means[slot] = t0.elapsed().as_secs_f64() * 1000.0 / 100.0;
        }
        println!(
            "{:>7} {:>14.2} {:>17.2} {:>7.2}",
            n,
            means[0],
            means[1],
            means[0] / means[1]
        );
    }
    println!("\none barrier per batched call; one barrier per agent otherwise");
}

fn collect(world: &mut World, ids: &[usize], batched: bool) {
    if batched {
        world.get_states_batched(ids).expect("states");
    } else {
        world.get_states_nonbatched(ids).expect("states");
    }
}
