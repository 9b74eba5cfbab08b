//! The render-thread frame clock.
//!
//! State collection must synchronise with the render tick: a request blocks
//! until the next tick boundary (one "barrier wait"), then observes the
//! world at that tick. Batched collection pays one barrier for any number
//! of agents; non-batched collection pays one barrier per agent. The
//! cumulative barrier count is the observable that the latency benchmarks
//! and their accounting tests are built on.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

struct ClockState {
    tick: u64,
    stop: bool,
}

struct ClockShared {
    state: Mutex<ClockState>,
    cv: Condvar,
    barrier_waits: AtomicU64,
}

/// Monotone tick source driven by a background thread at a fixed period.
pub struct FrameClock {
    shared: Arc<ClockShared>,
    thread: Option<JoinHandle<()>>,
}

impl FrameClock {
    pub fn start(period: Duration) -> FrameClock {
        assert!(period > Duration::ZERO, "frame period must be positive");
        let shared = Arc::new(ClockShared {
            state: Mutex::new(ClockState { tick: 0, stop: false }),
            cv: Condvar::new(),
            barrier_waits: AtomicU64::new(0),
        });
        let tick_shared = Arc::clone(&shared);
        let thread = std::thread::Builder::new()
            .name("frame-clock".into())
            .spawn(move || {
                let mut next = Instant::now() + period;
                loop {
                    let now = Instant::now();
                    if next > now {
                        std::thread::sleep(next - now);
                    }
                    {
                        let mut st = tick_shared.state.lock().unwrap();
                        if st.stop {
                            return;
                        }
                        st.tick += 1;
                        tick_shared.cv.notify_all();
                    }
                    next += period;
                    // don't accumulate backlog after a stall
                    let now = Instant::now();
                    if next < now {
                        next = now + period;
                    }
                }
            })
            .expect("spawn frame clock");
        FrameClock { shared, thread: Some(thread) }
    }

    pub fn tick_index(&self) -> u64 {
        self.shared.state.lock().unwrap().tick
    }

    /// Cumulative count of barrier waits served.
    pub fn barrier_waits(&self) -> u64 {
        self.shared.barrier_waits.load(Ordering::SeqCst)
    }

    /// Block until the next tick boundary. Counts as exactly one barrier
    /// wait however many agents are rendered afterwards.
    pub fn wait_barrier(&self) {
        let mut st = self.shared.state.lock().unwrap();
        let entry = st.tick;
        while st.tick <= entry && !st.stop {
            st = self.shared.cv.wait(st).unwrap();
        }
        drop(st);
        self.shared.barrier_waits.fetch_add(1, Ordering::SeqCst);
    }
}

impl Drop for FrameClock {
    fn drop(&mut self) {
        {
            let mut st = self.shared.state.lock().unwrap();
            st.stop = true;
            self.shared.cv.notify_all();
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
