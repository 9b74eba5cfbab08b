//! Threaded frame server: one reader per connection, one worker per
//! request (so pipelined requests can be answered out of order), one writer
//! serializing response frames.

use super::codec::{decode_request, encode_error_body, encode_response_body, Request, Response};
use super::{encode_frame, try_parse_frame, CodecError, ErrorCode, MessageKind};
use std::collections::HashSet;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Handler failure surfaced to the caller as an ErrorResponse.
#[derive(Debug, Clone)]
pub struct ServiceError {
    pub message: String,
}

impl ServiceError {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }
}

impl<E: std::error::Error> From<E> for ServiceError {
    fn from(e: E) -> Self {
        ServiceError { message: e.to_string() }
    }
}

/// An endpoint implementation. Handlers may be called concurrently from
/// many connections and pipelined requests; interior state protection is
/// the implementor's contract.
pub trait Service: Send + Sync + 'static {
    fn handle(&self, req: Request) -> Result<Response, ServiceError>;
}

/// Running server handle. Shutting down (or dropping) stops the accept
/// loop and asks connection threads to wind down.
pub struct Server {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind and serve. `addr` may use port 0 for an ephemeral port; the actual
/// address is available from [`Server::local_addr`].
pub fn serve<A: ToSocketAddrs>(addr: A, service: Arc<dyn Service>) -> std::io::Result<Server> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let accept_stop = Arc::clone(&stop);

    let accept_thread = std::thread::Builder::new()
        .name(format!("serve-{local_addr}"))
        .spawn(move || loop {
            if accept_stop.load(Ordering::SeqCst) {
                return;
            }
            match listener.accept() {
                Ok((stream, _peer)) => {
                    let svc = Arc::clone(&service);
                    let conn_stop = Arc::clone(&accept_stop);
                    let _ = std::thread::Builder::new()
                        .name("serve-conn".into())
                        .spawn(move || serve_connection(stream, svc, conn_stop));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(_) => std::thread::sleep(Duration::from_millis(10)),
            }
        })?;

    Ok(Server { local_addr, stop, accept_thread: Some(accept_thread) })
}

fn serve_connection(stream: TcpStream, svc: Arc<dyn Service>, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
    let mut reader = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };

    // single writer serializes responses from all in-flight workers
    let (resp_tx, resp_rx) = mpsc::channel::<(u8, u32, Vec<u8>)>();
    let mut writer = stream;
    let writer_thread = std::thread::Builder::new()
        .name("serve-writer".into())
        .spawn(move || {
            for (kind, id, body) in resp_rx {
                let frame = encode_frame(kind, id, &body);
                if writer.write_all(&frame).is_err() {
                    return;
                }
                let _ = writer.flush();
            }
        })
        .expect("spawn writer");

    // a fixed pair of workers per connection: pipelined requests can
    // complete out of order without spawning a thread per request
    let (work_tx, work_rx) = mpsc::channel::<(MessageKind, u32, Request)>();
    let work_rx = Arc::new(std::sync::Mutex::new(work_rx));
    let mut worker_threads = Vec::new();
    for _ in 0..2 {
        let svc = Arc::clone(&svc);
        let tx = resp_tx.clone();
        let rx = Arc::clone(&work_rx);
        worker_threads.push(
            std::thread::Builder::new()
                .name("serve-worker".into())
                .spawn(move || loop {
                    let job = rx.lock().unwrap().recv();
                    let Ok((kind, request_id, req)) = job else { return };
                    let reply = match svc.handle(req) {
                        Ok(resp) => {
                            debug_assert!(resp.kind_matches(kind));
                            (kind as u8, request_id, encode_response_body(&resp))
                        }
                        Err(err) => (
                            MessageKind::ErrorResponse as u8,
                            request_id,
                            encode_error_body(ErrorCode::Handler, &err.message),
                        ),
                    };
                    if tx.send(reply).is_err() {
                        return;
                    }
                })
                .expect("spawn worker"),
        );
    }

    let mut buf: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 64 * 1024];
    let mut seen_ids: HashSet<u32> = HashSet::new();
    let error_kind = MessageKind::ErrorResponse as u8;

    'conn: loop {
        // drain complete frames
        loop {
            match try_parse_frame(&buf) {
                Ok(None) => break,
                Ok(Some((kind_byte, request_id, payload, consumed))) => {
                    buf.drain(..consumed);
                    if !seen_ids.insert(request_id) {
                        let body = encode_error_body(
                            ErrorCode::DuplicateRequest,
                            &format!("request id {request_id} already executed"),
                        );
                        let _ = resp_tx.send((error_kind, request_id, body));
                        continue;
                    }
                    let kind = match MessageKind::from_u8(kind_byte) {
                        Some(MessageKind::ErrorResponse) | None => {
                            let body = encode_error_body(
                                ErrorCode::UnknownKind,
                                &format!("kind {kind_byte} is not a request"),
                            );
                            let _ = resp_tx.send((error_kind, request_id, body));
                            continue;
                        }
                        Some(k) => k,
                    };
                    match decode_request(kind, &payload) {
                        Err(e) => {
                            let body = encode_error_body(ErrorCode::Malformed, &e.to_string());
                            let _ = resp_tx.send((error_kind, request_id, body));
                        }
                        Ok(req) => {
                            if work_tx.send((kind, request_id, req)).is_err() {
                                break 'conn;
                            }
                        }
                    }
                }
                Err(CodecError::BadLength(len)) => {
                    // stream cannot be resynchronized; reply and hang up
                    let body = encode_error_body(
                        ErrorCode::BadLength,
                        &format!("frame length {len} out of range"),
                    );
                    let _ = resp_tx.send((error_kind, 0, body));
                    break 'conn;
                }
                Err(e) => {
                    let body = encode_error_body(ErrorCode::Malformed, &e.to_string());
                    let _ = resp_tx.send((error_kind, 0, body));
                    break 'conn;
                }
            }
        }

        if stop.load(Ordering::SeqCst) {
            break;
        }
        match reader.read(&mut chunk) {
            Ok(0) => break, // peer closed
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut => {}
            Err(_) => break,
        }
    }

    drop(work_tx);
    for w in worker_threads {
        let _ = w.join();
    }
    drop(resp_tx);
    let _ = writer_thread.join();
}
