//! Host the experience-replay service standalone.
//!
//!     cargo run --release --example replay_server -- [ADDR] [CAPACITY]
//!
//! Defaults: 127.0.0.1:7701, capacity 15000.

use aviary::orchestrator::ReplayService;
use aviary::replay::ReplayBuffer;
use aviary::wire::serve;
use std::sync::Arc;
use std::time::Duration;

fn main() {
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:7701".into());
    let capacity: usize = args.next().map(|s| s.parse().expect("capacity")).unwrap_or(15_000);

    let svc = Arc::new(ReplayService::new(ReplayBuffer::new(capacity), 2));
    let server = serve(&addr as &str, svc.clone()).expect("bind replay service");
    println!("replay service on {} (capacity {capacity})", server.local_addr());

    loop {
        std::thread::sleep(Duration::from_secs(5));
        let s = svc.stats();
        println!(
            "len {} / {}  actions {}  inserts {}",
            s.len, s.capacity, s.a_t, s.insert_count
        );
    }
}
