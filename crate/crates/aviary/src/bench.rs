//! Benchmark harness for the two experiment families: batched vs
//! non-batched state-collection latency, and training time against agent
//! count. Emits raw and aggregated CSV plus plain-text summary tables.

use crate::orchestrator::{run_experiment, spawn_or_attach, OrchError, SimService, Topology};
use crate::simcore::World;
use crate::util::{derive_seed, git_blob_hash, mean, percentile};
use crate::wire::{Connection, Request, Response};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Warm-up calls discarded before each measured cell.
pub const WARMUP_CALLS: u32 = 50;

const CALL_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Batched,
    NonBatched,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Batched => "batched",
            Method::NonBatched => "nonbatched",
        }
    }
}

/// Aggregated timing for one (method, agent count) cell.
#[derive(Debug, Clone)]
pub struct LatencyCell {
    pub method: Method,
    pub n_agents: usize,
    pub calls: u32,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    /// Frame-clock barrier waits consumed by the measured calls.
    pub barrier_waits: u64,
}

/// One training run in the speedup sweep.
#[derive(Debug, Clone)]
pub struct SpeedupCell {
    pub n_agents: usize,
    pub seed_index: u32,
    pub converged: bool,
    /// Wall-clock seconds to threshold; a non-converged run contributes
    /// its budget (a lower bound on the true time).
    pub time_secs: f64,
}

/// Per-agent-count summary of the sweep.
#[derive(Debug, Clone)]
pub struct SpeedupRow {
    pub n_agents: usize,
    pub median_secs: f64,
    pub cells: Vec<SpeedupCell>,
}

/// Measure state-collection latency through the full RPC path.
///
/// For each agent count a fresh simulator is hosted in-process on
/// loopback; for each method ([`Method::Batched`] first) the harness makes
/// `WARMUP_CALLS` unrecorded calls, then `calls` timed calls, recording
/// per-call milliseconds and the frame-clock barrier delta. Raw samples go
/// to `latency_raw.csv`, aggregates to `latency.csv`. No training runs
/// concurrently: the simulator is exclusive to the harness.
pub fn bench_latency(
    topo: &Topology,
    agent_counts: &[usize],
    calls: u32,
    out_dir: &Path,
) -> Result<Vec<LatencyCell>, OrchError> {
    if agent_counts.is_empty() || calls == 0 {
        return Err(OrchError::Config("need at least one agent count and one call".into()));
    }
    let entry =
        topo.sims.first().ok_or_else(|| OrchError::Config("topology has no sim entry".into()))?;
    let arena_text = std::fs::read_to_string(&entry.arena_path)
        .map_err(|e| OrchError::Config(format!("arena {}: {e}", entry.arena_path.display())))?;
    let arena = Arc::new(crate::arena::load_arena(&arena_text)?);

    std::fs::create_dir_all(out_dir)?;
    let mut raw = BufWriter::new(File::create(out_dir.join("latency_raw.csv"))?);
    writeln!(raw, "method,n_agents,call,ms")?;

    let mut counts = agent_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();

    let mut cells = Vec::new();
    for &n in &counts {
        let world = World::new(
            arena.clone(),
            n,
            topo.sim_config.clone(),
            derive_seed(topo.seed, 300 + n as u64),
        )?;
        let svc = Arc::new(SimService::new(world));
        let endpoint = spawn_or_attach("127.0.0.1:0", svc.clone())?;
        let conn = Connection::connect(&endpoint.addr, Duration::from_secs(5))?;
        let ids: Vec<u32> = (0..n as u32).collect();

        for method in [Method::Batched, Method::NonBatched] {
            let request = match method {
                Method::Batched => Request::GetBatchStates { agent_ids: ids.clone() },
                Method::NonBatched => Request::GetStatesNonBatched { agent_ids: ids.clone() },
            };
            for _ in 0..WARMUP_CALLS {
                match conn.call(&request, CALL_TIMEOUT)? {
                    Response::States(_) => {}
                    other => return Err(OrchError::unexpected(&other)),
                }
            }
            let waits_before = svc.barrier_waits();
            let mut samples = Vec::with_capacity(calls as usize);
            for call in 0..calls {
                let t0 = Instant::now();
                match conn.call(&request, CALL_TIMEOUT)? {
                    Response::States(states) => {
                        if states.len() != n {
                            return Err(OrchError::Runtime(format!(
                                "expected {n} states, got {}",
                                states.len()
                            )));
                        }
                    }
                    other => return Err(OrchError::unexpected(&other)),
                }
                let ms = t0.elapsed().as_secs_f64() * 1000.0;
                writeln!(raw, "{},{},{},{:.6}", method.as_str(), n, call, ms)?;
                samples.push(ms);
            }
            let barrier_waits = svc.barrier_waits() - waits_before;
            cells.push(LatencyCell {
                method,
                n_agents: n,
                calls,
                mean_ms: mean(&samples),
                p50_ms: percentile(&samples, 0.50),
                p95_ms: percentile(&samples, 0.95),
                barrier_waits,
            });
        }
    }
    raw.flush()?;

    let mut agg = BufWriter::new(File::create(out_dir.join("latency.csv"))?);
    writeln!(agg, "method,n_agents,calls,mean_ms,p50_ms,p95_ms,barrier_waits")?;
    for c in &cells {
        writeln!(
            agg,
            "{},{},{},{:.6},{:.6},{:.6},{}",
            c.method.as_str(),
            c.n_agents,
            c.calls,
            c.mean_ms,
            c.p50_ms,
            c.p95_ms,
            c.barrier_waits
        )?;
    }
    agg.flush()?;
    Ok(cells)
}

/// Run the training-speedup sweep: for each agent count and seed, a full
/// experiment on a derived topology (single sim instance, overridden agent
/// count, seed and threshold); report the median wall-clock
/// time-to-threshold per count. Non-convergence is reported, not fatal.
pub fn bench_speedup(
    topo: &Topology,
    agent_counts: &[usize],
    n_seeds: u32,
    threshold: f32,
    out_dir: &Path,
) -> Result<Vec<SpeedupRow>, OrchError> {
    if agent_counts.is_empty() || n_seeds == 0 {
        return Err(OrchError::Config("need at least one agent count and one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut counts = agent_counts.to_vec();
    counts.sort_unstable();
    counts.dedup();

    let mut csv = BufWriter::new(File::create(out_dir.join("speedup.csv"))?);
    writeln!(csv, "n_agents,seed_index,converged,time_secs")?;

    let mut rows = Vec::new();
    for &n in &counts {
        let mut cells = Vec::new();
        for s in 0..n_seeds {
            let mut sub = topo.clone();
            sub.sims.truncate(1);
            sub.sims[0].n_agents = n;
            sub.seed = derive_seed(topo.seed, 1000 + 37 * n as u64 + s as u64);
            sub.threshold = threshold;
            let run_dir = out_dir.join(format!("run_n{n}_s{s}"));
            let outcome = run_experiment(&sub, &run_dir)?;
            let cell = SpeedupCell {
                n_agents: n,
                seed_index: s,
                converged: outcome.converged,
                time_secs: outcome.time_to_threshold_secs.unwrap_or(sub.budget_secs),
            };
            writeln!(csv, "{},{},{},{:.3}", n, s, cell.converged, cell.time_secs)?;
            csv.flush()?;
            cells.push(cell);
        }
        let median_secs = median(&cells.iter().map(|c| c.time_secs).collect::<Vec<_>>());
        rows.push(SpeedupRow { n_agents: n, median_secs, cells });
    }
    csv.flush()?;
    Ok(rows)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, OrchError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|c| c.trim().to_string()).collect())
        .collect())
}

/// Render text tables (and gnuplot-ready .dat files) from the CSV output
/// of the latency and speedup benchmarks found in `in_dir`. Fails when
/// neither CSV is present. Output ordering is deterministic.
pub fn emit_summary(in_dir: &Path) -> Result<String, OrchError> {
    let latency_path = in_dir.join("latency.csv");
    let speedup_path = in_dir.join("speedup.csv");
    if !latency_path.exists() && !speedup_path.exists() {
        return Err(OrchError::Config(format!(
            "no latency.csv or speedup.csv under {}",
            in_dir.display()
        )));
    }

    let mut out = String::new();

    if latency_path.exists() {
        let mut rows = read_csv(&latency_path)?;
        rows.sort_by_key(|r| (r[0].clone(), r[1].parse::<usize>().unwrap_or(0)));
        out.push_str("state-collection latency\n");
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>12} {:>12} {:>12} {:>14}\n",
            "method", "agents", "calls", "mean_ms", "p50_ms", "p95_ms", "barrier_waits"
        ));
        let mut total_calls = 0u64;
        let mut dat_batched = String::new();
        let mut dat_nonbatched = String::new();
        for r in &rows {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>12} {:>12} {:>12} {:>14}\n",
                r[0], r[1], r[2], r[3], r[4], r[5], r[6]
            ));
            total_calls += r[2].parse::<u64>().unwrap_or(0);
            let line = format!("{} {}\n", r[1], r[3]);
            if r[0] == "batched" {
                dat_batched.push_str(&line);
            } else {
                dat_nonbatched.push_str(&line);
            }
        }
        out.push_str(&format!("total timed calls: {total_calls}\n\n"));
        std::fs::write(in_dir.join("latency_batched.dat"), dat_batched)?;
        std::fs::write(in_dir.join("latency_nonbatched.dat"), dat_nonbatched)?;
    }

    if speedup_path.exists() {
        let mut rows = read_csv(&speedup_path)?;
        rows.sort_by_key(|r| (r[0].parse::<usize>().unwrap_or(0), r[1].parse::<u32>().unwrap_or(0)));
        out.push_str("training time to threshold\n");
        out.push_str(&format!(
            "{:<8} {:>6} {:>10} {:>12}\n",
            "agents", "seed", "converged", "time_secs"
        ));
        let mut by_n: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut sum_secs = 0.0;
        for r in &rows {
            out.push_str(&format!("{:<8} {:>6} {:>10} {:>12}\n", r[0], r[1], r[2], r[3]));
            let n: usize = r[0].parse().unwrap_or(0);
            let t: f64 = r[3].parse().unwrap_or(f64::NAN);
            sum_secs += t;
            match by_n.iter_mut().find(|(bn, _)| *bn == n) {
                Some((_, v)) => v.push(t),
                None => by_n.push((n, vec![t])),
            }
        }
        out.push_str(&format!("total run seconds: {sum_secs:.3}\n"));
        out.push_str(&format!("{:<8} {:>14}\n", "agents", "median_secs"));
        let mut dat = String::new();
        for (n, times) in &by_n {
            let m = median(times);
            out.push_str(&format!("{:<8} {:>14.3}\n", n, m));
            dat.push_str(&format!("{n} {m:.3}\n"));
        }
        out.push('\n');
        std::fs::write(in_dir.join("speedup_median.dat"), dat)?;
    }

    std::fs::write(in_dir.join("summary.txt"), &out)?;
    Ok(out)
}

/// Git-style blob hashes of benchmark input files, for run manifests.
pub fn hash_config_files(paths: &[&Path]) -> Result<Vec<(String, String)>, OrchError> {
    paths
        .iter()
        .map(|p| {
            let content = std::fs::read(p)?;
            Ok((p.display().to_string(), git_blob_hash(&content)))
        })
        .collect()
}
