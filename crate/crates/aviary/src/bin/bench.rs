//! Benchmark CLI.
//!
//! Subcommands:
//! - `bench latency --config F --agents 1,2,5,10,25,50 --calls 1000 --out DIR`
//! - `bench speedup --config F --agents 1,4,8 --seeds 3 --threshold R --out DIR`
//! - `bench summary --in DIR`
//!
//! Exit code 0 only when every cell completed.

use aviary::bench::{bench_latency, bench_speedup, emit_summary};
use aviary::orchestrator::Topology;
use std::path::PathBuf;
use std::process;

const USAGE: &str = "\
bench: batched-vs-non-batched latency and agent-count speedup benchmarks

USAGE:
    bench latency --config FILE --agents N,N,.. [--calls N] --out DIR
    bench speedup --config FILE --agents N,N,.. [--seeds N] [--threshold R] --out DIR
    bench summary --in DIR

OPTIONS:
    --config FILE    topology file (sim config, arena, seed)
    --agents LIST    comma-separated agent counts, e.g. 1,2,5,10,25,50
    --calls N        timed state collections per cell (default 1000)
    --seeds N        seeds per agent count (default 3)
    --threshold R    moving-average episode reward to reach (default: from config)
    --out DIR        output directory for CSV and summary files
    --in DIR         directory with latency.csv / speedup.csv to summarize
";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = args.first() else {
        eprint!("{USAGE}");
        process::exit(1);
    };
    let rest = &args[1..];
    let code = match cmd.as_str() {
        "latency" => cmd_latency(rest),
        "speedup" => cmd_speedup(rest),
        "summary" => cmd_summary(rest),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            0
        }
        other => {
            eprintln!("unknown subcommand `{other}`");
            eprint!("{USAGE}");
            1
        }
    };
    process::exit(code);
}

struct Opts {
    config: Option<PathBuf>,
    agents: Vec<usize>,
    calls: u32,
    seeds: u32,
    threshold: Option<f32>,
    out: Option<PathBuf>,
    in_dir: Option<PathBuf>,
}

fn parse_opts(args: &[String]) -> Result<Opts, String> {
    let mut opts = Opts {
        config: None,
        agents: Vec::new(),
        calls: 1000,
        seeds: 3,
        threshold: None,
        out: None,
        in_dir: None,
    };
    let mut i = 0;
    while i < args.len() {
        let flag = args[i].as_str();
        let value = args.get(i + 1).ok_or_else(|| format!("missing value for {flag}"))?;
        match flag {
            "--config" => opts.config = Some(PathBuf::from(value)),
            "--agents" => {
                opts.agents = value
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<usize>().map_err(|_| format!("bad agent count `{t}`"))
                    })
                    .collect::<Result<_, _>>()?;
            }
            "--calls" => opts.calls = value.parse().map_err(|_| format!("bad --calls `{value}`"))?,
            "--seeds" => opts.seeds = value.parse().map_err(|_| format!("bad --seeds `{value}`"))?,
            "--threshold" => {
                opts.threshold =
                    Some(value.parse().map_err(|_| format!("bad --threshold `{value}`"))?)
            }
            "--out" => opts.out = Some(PathBuf::from(value)),
            "--in" => opts.in_dir = Some(PathBuf::from(value)),
            other => return Err(format!("unknown option `{other}`")),
        }
        i += 2;
    }
    Ok(opts)
}

fn load_topology(opts: &Opts) -> Result<Topology, String> {
    let path = opts.config.as_ref().ok_or("--config is required")?;
    Topology::load(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_latency(args: &[String]) -> i32 {
    let opts = match parse_opts(args) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let topo = match load_topology(&opts) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    if opts.agents.is_empty() {
        return fail("--agents is required");
    }
    let Some(out) = opts.out else { return fail("--out is required") };

    println!(
        "latency: agents {:?}, {} calls/cell (+{} warmup), frame period {:?}",
        opts.agents,
        opts.calls,
        aviary::bench::WARMUP_CALLS,
        topo.sim_config.frame_period
    );
    match bench_latency(&topo, &opts.agents, opts.calls, &out) {
        Ok(cells) => {
            for c in &cells {
                println!(
                    "{:<12} n={:<3} mean {:>9.3} ms  p50 {:>9.3} ms  p95 {:>9.3} ms  barriers {}",
                    c.method.as_str(),
                    c.n_agents,
                    c.mean_ms,
                    c.p50_ms,
                    c.p95_ms,
                    c.barrier_waits
                );
            }
            match emit_summary(&out) {
                Ok(_) => {
                    println!("wrote {}", out.join("latency.csv").display());
                    0
                }
                Err(e) => fail(&e.to_string()),
            }
        }
        Err(e) => fail(&e.to_string()),
    }
}

fn cmd_speedup(args: &[String]) -> i32 {
    let opts = match parse_opts(args) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let topo = match load_topology(&opts) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    if opts.agents.is_empty() {
        return fail("--agents is required");
    }
    let Some(out) = opts.out else { return fail("--out is required") };
    let threshold = opts.threshold.unwrap_or(topo.threshold);

    println!(
        "speedup: agents {:?}, {} seeds each, threshold {}, budget {} s",
        opts.agents, opts.seeds, threshold, topo.budget_secs
    );
    match bench_speedup(&topo, &opts.agents, opts.seeds, threshold, &out) {
        Ok(rows) => {
            for row in &rows {
                let converged = row.cells.iter().filter(|c| c.converged).count();
                println!(
                    "n={:<3} median {:>9.1} s  ({}/{} seeds converged)",
                    row.n_agents,
                    row.median_secs,
                    converged,
                    row.cells.len()
                );
            }
            match emit_summary(&out) {
                Ok(_) => {
                    println!("wrote {}", out.join("speedup.csv").display());
                    0
                }
                Err(e) => fail(&e.to_string()),
            }
        }
        Err(e) => fail(&e.to_string()),
    }
}

fn cmd_summary(args: &[String]) -> i32 {
    let opts = match parse_opts(args) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let Some(dir) = opts.in_dir else { return fail("--in is required") };
    match emit_summary(&dir) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => fail(&e.to_string()),
    }
}

fn fail(msg: &str) -> i32 {
    eprintln!("error: {msg}");
    1
}
