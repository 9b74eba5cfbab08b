//! Wire-protocol behavior through real sockets: pipelining, malformed
//! traffic survival, timeouts, duplicate suppression and parameter
//! transfer.

use aviary::dqn::{build_network, ActionIndex, StackedState};
use aviary::replay::Experience;
use aviary::simcore::DepthImage;
use aviary::wire::{
    get_params_client, serve, Connection, ErrorCode, MessageKind, Request, Response, Service,
    ServiceError, WireError,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

const TIMEOUT: Duration = Duration::from_secs(10);

/// Health plus a stats endpoint that answers after a caller-controlled
/// delay, for out-of-order pipelining.
struct SlowService {
    calls: AtomicU32,
}

impl Service for SlowService {
    fn handle(&self, req: Request) -> Result<Response, ServiceError> {
        match req {
            Request::Health => Ok(Response::HealthOk),
            Request::ReplayStats => {
                // first request sleeps long enough for later ones to finish
                let idx = self.calls.fetch_add(1, Ordering::SeqCst);
                if idx == 0 {
                    std::thread::sleep(Duration::from_millis(150));
                }
                Ok(Response::ReplayStats {
                    len: idx as u64,
                    capacity: 0,
                    a_t: 0,
                    insert_count: 0,
                })
            }
            Request::SampleBatch { .. } => Err(ServiceError::new("refusing to sample")),
            other => Err(ServiceError::new(format!("unhandled {:?}", other.kind()))),
        }
    }
}

fn slow_server() -> (aviary::wire::Server, Connection) {
    let server = serve("127.0.0.1:0", Arc::new(SlowService { calls: AtomicU32::new(0) })).unwrap();
    let conn = Connection::connect(server.local_addr(), TIMEOUT).unwrap();
    (server, conn)
}

#[test]
fn health_round_trip_is_fast() {
    let (_server, conn) = slow_server();
    let t0 = std::time::Instant::now();
    let resp = conn.call(&Request::Health, TIMEOUT).unwrap();
    assert_eq!(resp, Response::HealthOk);
    assert!(t0.elapsed() < Duration::from_millis(50), "took {:?}", t0.elapsed());
}

#[test]
fn pipelined_requests_answered_out_of_order() {
    let (_server, conn) = slow_server();
    let c2 = conn.clone();
    let slow = std::thread::spawn(move || c2.call(&Request::ReplayStats, TIMEOUT));
    std::thread::sleep(Duration::from_millis(30));
    let t0 = std::time::Instant::now();
    let fast = conn.call(&Request::ReplayStats, TIMEOUT).unwrap();
    // the second request overtook the first
    assert!(t0.elapsed() < Duration::from_millis(120));
    assert_eq!(fast, Response::ReplayStats { len: 1, capacity: 0, a_t: 0, insert_count: 0 });
    let slow = slow.join().unwrap().unwrap();
    assert_eq!(slow, Response::ReplayStats { len: 0, capacity: 0, a_t: 0, insert_count: 0 });
}

#[test]
fn hundred_concurrent_pipelined_calls_all_match() {
    let (_server, conn) = slow_server();
    // absorb the deliberately slow first stats call
    conn.call(&Request::ReplayStats, TIMEOUT).unwrap();
    let mut handles = Vec::new();
    for _ in 0..100 {
        let c = conn.clone();
        handles.push(std::thread::spawn(move || c.call(&Request::Health, TIMEOUT)));
    }
    for h in handles {
        assert_eq!(h.join().unwrap().unwrap(), Response::HealthOk);
    }
}

#[test]
fn unknown_kind_yields_error_and_connection_survives() {
    let (_server, conn) = slow_server();
    let (kind, body) = conn.call_raw(200, &[], TIMEOUT).unwrap();
    assert_eq!(kind, MessageKind::ErrorResponse as u8);
    let (code, _msg) = aviary::wire::decode_error_body(&body).unwrap();
    assert_eq!(code, Some(ErrorCode::UnknownKind));
    // same connection keeps working
    assert_eq!(conn.call(&Request::Health, TIMEOUT).unwrap(), Response::HealthOk);
}

#[test]
fn malformed_body_yields_error_and_connection_survives() {
    let (_server, conn) = slow_server();
    let err = conn.call_raw(MessageKind::SampleBatch as u8, &[1, 2], TIMEOUT).unwrap();
    assert_eq!(err.0, MessageKind::ErrorResponse as u8);
    let (code, _) = aviary::wire::decode_error_body(&err.1).unwrap();
    assert_eq!(code, Some(ErrorCode::Malformed));
    assert_eq!(conn.call(&Request::Health, TIMEOUT).unwrap(), Response::HealthOk);
}

#[test]
fn error_kind_request_is_rejected() {
    let (_server, conn) = slow_server();
    let (kind, body) = conn.call_raw(255, &[0, 0], TIMEOUT).unwrap();
    assert_eq!(kind, MessageKind::ErrorResponse as u8);
    let (code, _) = aviary::wire::decode_error_body(&body).unwrap();
    assert_eq!(code, Some(ErrorCode::UnknownKind));
}

#[test]
fn handler_errors_propagate_with_message() {
    let (_server, conn) = slow_server();
    match conn.call(&Request::SampleBatch { n: 32 }, TIMEOUT) {
        Err(WireError::Remote { code: Some(ErrorCode::Handler), message }) => {
            assert!(message.contains("refusing"));
        }
        other => panic!("expected handler error, got {other:?}"),
    }
    assert_eq!(conn.call(&Request::Health, TIMEOUT).unwrap(), Response::HealthOk);
}

#[test]
fn call_to_dead_port_fails_fast() {
    // bind-then-drop reserves a port nothing listens on
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let t0 = std::time::Instant::now();
    let result = Connection::connect(format!("127.0.0.1:{port}"), Duration::from_secs(2));
    assert!(result.is_err());
    assert!(t0.elapsed() < Duration::from_secs(3));
}

#[test]
fn unanswered_call_times_out() {
    // a raw listener that accepts but never replies
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let keep = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        std::thread::sleep(Duration::from_secs(5));
        drop(stream);
    });
    let conn = Connection::connect(addr, Duration::from_secs(2)).unwrap();
    match conn.call(&Request::Health, Duration::from_millis(200)) {
        Err(WireError::Timeout) => {}
        other => panic!("expected timeout, got {other:?}"),
    }
    drop(conn);
    let _ = keep.join();
}

#[test]
fn duplicate_request_ids_execute_at_most_once() {
    use std::io::{Read, Write};
    let server = serve("127.0.0.1:0", Arc::new(SlowService { calls: AtomicU32::new(0) })).unwrap();
    let mut stream = std::net::TcpStream::connect(server.local_addr()).unwrap();
    stream.set_nodelay(true).unwrap();

    // two Health frames sharing request id 5
    let frame = aviary::wire::encode_frame(MessageKind::Health as u8, 5, &[]);
    stream.write_all(&frame).unwrap();
    stream.write_all(&frame).unwrap();
    stream.flush().unwrap();

    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let mut frames = Vec::new();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    while frames.len() < 2 {
        match aviary::wire::try_parse_frame(&buf).unwrap() {
            Some((kind, id, payload, consumed)) => {
                buf.drain(..consumed);
                frames.push((kind, id, payload));
            }
            None => {
                let n = stream.read(&mut chunk).unwrap();
                assert!(n > 0, "connection closed early");
                buf.extend_from_slice(&chunk[..n]);
            }
        }
    }
    let kinds: Vec<u8> = frames.iter().map(|f| f.0).collect();
    assert!(kinds.contains(&(MessageKind::Health as u8)), "one execution expected");
    assert!(kinds.contains(&(MessageKind::ErrorResponse as u8)), "duplicate must be refused");
    for (_, id, _) in &frames {
        assert_eq!(*id, 5);
    }
    let error_frame = frames.iter().find(|f| f.0 == MessageKind::ErrorResponse as u8).unwrap();
    let (code, _) = aviary::wire::decode_error_body(&error_frame.2).unwrap();
    assert_eq!(code, Some(ErrorCode::DuplicateRequest));
}

#[test]
fn concurrent_pushers_keep_fifo_linearizable() {
    use aviary::orchestrator::ReplayService;
    use aviary::replay::ReplayBuffer;
    // 4 writers, 10^4 total pushes, capacity below the total
    let capacity = 4000;
    let per_writer = 2500u32;
    let svc = Arc::new(ReplayService::new(
        ReplayBuffer::with_reward_set(capacity, None),
        1,
    ));
    let server = serve("127.0.0.1:0", svc.clone() as Arc<dyn Service>).unwrap();
    let addr = server.local_addr();

    let mut handles = Vec::new();
    for writer in 0..4u32 {
        handles.push(std::thread::spawn(move || {
            let conn = Connection::connect(addr, TIMEOUT).unwrap();
            let base = StackedState {
                image_now: DepthImage::constant(1.0),
                image_prev: DepthImage::constant(1.0),
                velocity: [0.0; 3],
            };
            for seq in 0..per_writer {
                let mut e = Experience {
                    state: base.clone(),
                    action: ActionIndex::LEFT,
                    next_state: base.clone(),
                    reward: 3.0,
                    done: false,
                };
                e.state.velocity = [writer as f32, seq as f32, 0.0];
                match conn.call(&Request::PushExperiences { items: vec![e] }, TIMEOUT).unwrap() {
                    Response::PushOutcome { accepted: 1, .. } => {}
                    other => panic!("push failed: {other:?}"),
                }
            }
        }));
    }
    for h in handles {
        h.join().unwrap();
    }

    let stats = svc.stats();
    assert_eq!(stats.len, capacity);
    assert_eq!(stats.a_t, 4 * per_writer as u64);
    assert_eq!(stats.insert_count, 4 * per_writer as u64);
    svc.with_buffer(|buf| {
        // each writer's retained items form a strictly increasing suffix of
        // its own sequence: nothing is both present and evicted
        let mut last_seq = [None::<f32>; 4];
        let mut counts = [0u32; 4];
        for e in buf.iter() {
            let writer = e.state.velocity[0] as usize;
            let seq = e.state.velocity[1];
            if let Some(prev) = last_seq[writer] {
                assert!(seq > prev, "writer {writer} out of order: {prev} then {seq}");
            }
            last_seq[writer] = Some(seq);
            counts[writer] += 1;
        }
        for w in 0..4 {
            // retained items are the newest from each writer
            assert_eq!(
                last_seq[w],
                Some((per_writer - 1) as f32),
                "writer {w} lost its newest item"
            );
            assert!(counts[w] > 0);
        }
        assert_eq!(counts.iter().sum::<u32>() as usize, capacity);
    });
}

#[test]
fn parameter_blob_transfers_bit_exactly() {
    struct ParamsService {
        params: aviary::nn::NetParams,
    }
    impl Service for ParamsService {
        fn handle(&self, req: Request) -> Result<Response, ServiceError> {
            match req {
                Request::GetParams { have_version } => {
                    if self.params.version > have_version {
                        Ok(Response::Params { blob: self.params.encode_blob() })
                    } else {
                        Ok(Response::ParamsUpToDate)
                    }
                }
                _ => Err(ServiceError::new("params only")),
            }
        }
    }
    let mut params = build_network(77);
    params.version = 3;
    let expect = params.clone();
    let server = serve("127.0.0.1:0", Arc::new(ParamsService { params })).unwrap();
    let conn = Connection::connect(server.local_addr(), TIMEOUT).unwrap();

    let got = get_params_client(&conn, 0, TIMEOUT).unwrap().expect("newer params");
    assert_eq!(got.version, 3);
    for (a, b) in got.flat_values().iter().zip(expect.flat_values()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    // already current -> no blob
    assert!(get_params_client(&conn, 3, TIMEOUT).unwrap().is_none());
    assert!(get_params_client(&conn, 9, TIMEOUT).unwrap().is_none());
}

fn random_state(rng: &mut StdRng) -> StackedState {
    let img = |rng: &mut StdRng| {
        DepthImage::from_depths((0..1024).map(|_| rng.gen_range(0.0..20.0)).collect()).unwrap()
    };
    StackedState {
        image_now: img(rng),
        image_prev: img(rng),
        velocity: [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0],
    }
}

#[test]
fn full_experience_batch_round_trips_through_a_server() {
    // push stores verbatim; sample returns the store in order
    struct Echo {
        stash: std::sync::Mutex<Vec<Experience>>,
    }
    impl Service for Echo {
        fn handle(&self, req: Request) -> Result<Response, ServiceError> {
            match req {
                Request::PushExperiences { items } => {
                    let accepted = items.len() as u32;
                    *self.stash.lock().unwrap() = items;
                    Ok(Response::PushOutcome { accepted, rejected_indices: vec![] })
                }
                Request::SampleBatch { .. } => {
                    Ok(Response::Batch(self.stash.lock().unwrap().clone()))
                }
                _ => Err(ServiceError::new("echo only")),
            }
        }
    }
    let server =
        serve("127.0.0.1:0", Arc::new(Echo { stash: std::sync::Mutex::new(Vec::new()) })).unwrap();
    let conn = Connection::connect(server.local_addr(), TIMEOUT).unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let items: Vec<Experience> = (0..32)
        .map(|i| Experience {
            state: random_state(&mut rng),
            action: ActionIndex::new(i % 2).unwrap(),
            next_state: random_state(&mut rng),
            reward: if i % 2 == 0 { 3.0 } else { -100.0 },
            done: i % 5 == 0,
        })
        .collect();
    match conn.call(&Request::PushExperiences { items: items.clone() }, TIMEOUT).unwrap() {
        Response::PushOutcome { accepted: 32, rejected_indices } => {
            assert!(rejected_indices.is_empty())
        }
        other => panic!("unexpected {other:?}"),
    }
    match conn.call(&Request::SampleBatch { n: 32 }, TIMEOUT).unwrap() {
        Response::Batch(back) => assert_eq!(back, items),
        other => panic!("unexpected {other:?}"),
    }
}
