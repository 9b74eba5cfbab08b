//! Drive a vectorized 50-agent world with random actions: batched state
//! collection, per-agent episode resets, and barrier-wait accounting.
//!
//!     cargo run --release --example sim_world

use aviary::arena::load_arena;
use aviary::simcore::{Action, SimConfig, Terminal, World};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let text = std::fs::read_to_string(format!(
        "{}/arenas/train.arena",
        env!("CARGO_MANIFEST_DIR")
    ))
    .expect("read arena");
    let arena = Arc::new(load_arena(&text).expect("valid arena"));

    let cfg = SimConfig { frame_period: Duration::from_millis(4), ..SimConfig::default() };
    let n = 50;
    let mut world = World::new(arena.clone(), n, cfg, 1).expect("world");
    let mut rng = StdRng::seed_from_u64(2);
    let ids: Vec<usize> = (0..n).collect();

    let mut episodes = 0u32;
    let mut reward_sum = 0.0f32;
    for tick in 0..120 {
        // one barrier for all 50 agents
        let _states = world.get_states_batched(&ids).expect("collect states");
        for id in 0..n {
            let action = if rng.gen_bool(0.5) { Action::Left } else { Action::Right };
            world.apply_action(id, action).ok();
        }
        for (id, outcome) in world.step_action_period() {
            reward_sum += outcome.reward;
            if outcome.terminal != Terminal::None {
                episodes += 1;
                // asynchronous episodic reset: only this agent restarts
                let pose = world.sample_agent_spawn(id).expect("spawn");
                world.reset_vehicle(id, pose).expect("reset");
            }
        }
        if tick % 30 == 29 {
            println!(
                "tick {:>3}: {} episodes finished, total reward {:>9.0}, barrier waits {}",
                tick + 1,
                episodes,
                reward_sum,
                world.clock().barrier_waits()
            );
        }
    }
    println!(
        "done: {} batched collections for {} agents consumed {} barrier waits",
        120,
        n,
        world.clock().barrier_waits()
    );
}
