//! End-to-end single-machine experiment from a topology file: hosts every
//! role in-process over loopback RPC, trains until the moving-average
//! episode reward reaches the threshold (or the budget runs out), and
//! writes episodes.csv / trainer.csv / manifest.txt.
//!
//!     cargo run --release --example train_local -- [CONFIG] [OUT_DIR]
//!
//! Defaults: configs/local_lockstep.topo, out dir ./metrics-<pid>.

use aviary::orchestrator::{run_experiment, Topology};
use std::path::PathBuf;

fn main() {
    let mut args = std::env::args().skip(1);
    let config = args.next().unwrap_or_else(|| {
        format!("{}/configs/local_lockstep.topo", env!("CARGO_MANIFEST_DIR"))
    });
    let out_dir =
        args.next().unwrap_or_else(|| format!("metrics-{}", std::process::id()));

    let topo = Topology::load(&PathBuf::from(&config)).expect("load topology");
    println!(
        "running {} ({} sim instance(s), {} agents total, threshold {})",
        config,
        topo.sims.len(),
        topo.total_agents(),
        topo.threshold
    );

    match run_experiment(&topo, &PathBuf::from(&out_dir)) {
        Ok(outcome) => {
            if outcome.converged {
                println!(
                    "converged in {:.1} s after {} episodes",
                    outcome.time_to_threshold_secs.unwrap_or(f64::NAN),
                    outcome.episodes
                );
            } else {
                println!("budget exhausted after {} episodes (not converged)", outcome.episodes);
            }
            println!(
                "{} trainer steps, final parameter version {}",
                outcome.trainer_steps, outcome.final_version
            );
            println!("metrics in {}", outcome.out_dir.display());
        }
        Err(e) => {
            eprintln!("experiment failed: {e}");
            std::process::exit(1);
        }
    }
}
