//! Client connection: long-lived stream, pipelined calls matched to
//! responses by request id via a background demultiplexer.

use super::codec::{decode_error_body, decode_response, encode_request_body, Request, Response};
use super::{encode_frame, try_parse_frame, MessageKind, WireError};
use crate::nn::NetParams;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

type PendingSlot = mpsc::SyncSender<Result<(u8, Vec<u8>), WireError>>;

struct ConnShared {
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u32, PendingSlot>>,
    next_id: AtomicU32,
    closed: AtomicBool,
}

/// A connection to one service. Calls may be issued concurrently from
/// several threads; responses are routed by request id.
#[derive(Clone)]
pub struct Connection {
    shared: Arc<ConnShared>,
}

impl Connection {
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Connection, WireError> {
        let mut last_err = None;
        let mut stream = None;
        for sa in addr
            .to_socket_addrs()
            .map_err(WireError::Io)?
            .collect::<Vec<SocketAddr>>()
        {
            match TcpStream::connect_timeout(&sa, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let stream = stream.ok_or_else(|| {
            WireError::Io(last_err.unwrap_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::AddrNotAvailable, "no address resolved")
            }))
        })?;
        stream.set_nodelay(true).map_err(WireError::Io)?;

        let shared = Arc::new(ConnShared {
            writer: Mutex::new(stream.try_clone().map_err(WireError::Io)?),
            pending: Mutex::new(HashMap::new()),
            next_id: AtomicU32::new(1),
            closed: AtomicBool::new(false),
        });

        let reader_shared = Arc::clone(&shared);
        std::thread::Builder::new()
            .name("wire-client-reader".into())
            .spawn(move || reader_loop(stream, reader_shared))
            .map_err(WireError::Io)?;

        Ok(Connection { shared })
    }

    /// Issue one request and wait for its response (or error / timeout).
    pub fn call(&self, req: &Request, timeout: Duration) -> Result<Response, WireError> {
        let kind = req.kind();
        let body = encode_request_body(req);
        let (resp_kind, resp_body) = self.call_raw(kind as u8, &body, timeout)?;
        if resp_kind == MessageKind::ErrorResponse as u8 {
            let (code, message) = decode_error_body(&resp_body)?;
            return Err(WireError::Remote { code, message });
        }
        if resp_kind != kind as u8 {
            return Err(WireError::Protocol(format!(
                "response kind {resp_kind} does not match request kind {}",
                kind as u8
            )));
        }
        Ok(decode_response(kind, &resp_body)?)
    }

    /// Raw frame round-trip; used by `call` and by protocol tests that
    /// need to send deliberately malformed traffic.
    pub fn call_raw(
        &self,
        kind_byte: u8,
        body: &[u8],
        timeout: Duration,
    ) -> Result<(u8, Vec<u8>), WireError> {
        if self.shared.closed.load(Ordering::SeqCst) {
            return Err(WireError::ConnectionClosed);
        }
        let id = self.shared.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::sync_channel(1);
        self.shared.pending.lock().unwrap().insert(id, tx);

        let frame = encode_frame(kind_byte, id, body);
        {
            let mut w = self.shared.writer.lock().unwrap();
            if let Err(e) = w.write_all(&frame).and_then(|_| w.flush()) {
                self.shared.pending.lock().unwrap().remove(&id);
                return Err(WireError::Io(e));
            }
        }

        match rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                self.shared.pending.lock().unwrap().remove(&id);
                Err(WireError::Timeout)
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => Err(WireError::ConnectionClosed),
        }
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }
}

fn reader_loop(mut stream: TcpStream, shared: Arc<ConnShared>) {
    let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
    let mut buf: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 64 * 1024];
    loop {
        loop {
            match try_parse_frame(&buf) {
                Ok(None) => break,
                Ok(Some((kind, id, payload, consumed))) => {
                    buf.drain(..consumed);
                    if let Some(tx) = shared.pending.lock().unwrap().remove(&id) {
                        let _ = tx.send(Ok((kind, payload)));
                    }
                    // responses to ids we no longer wait for are dropped
                }
                Err(e) => {
                    fail_all(&shared, WireError::Codec(e));
                    return;
                }
            }
        }
        match stream.read(&mut chunk) {
            Ok(0) => {
                fail_all(&shared, WireError::ConnectionClosed);
                return;
            }
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(e)
                if e.kind() == std::io::ErrorKind::WouldBlock
                    || e.kind() == std::io::ErrorKind::TimedOut =>
            {
                if Arc::strong_count(&shared) == 1 {
                    // every Connection handle dropped; wind down
                    return;
                }
            }
            Err(e) => {
                fail_all(&shared, WireError::Io(e));
                return;
            }
        }
    }
}

fn fail_all(shared: &Arc<ConnShared>, _err: WireError) {
    shared.closed.store(true, Ordering::SeqCst);
    let mut pending = shared.pending.lock().unwrap();
    for (_, tx) in pending.drain() {
        let _ = tx.send(Err(WireError::ConnectionClosed));
    }
}

/// Fetch newer parameters from the trainer: `None` when `have_version` is
/// already current, otherwise the decoded parameter table (bit-exact 32-bit
/// payload) whose version is carried in the blob.
pub fn get_params_client(
    conn: &Connection,
    have_version: u64,
    timeout: Duration,
) -> Result<Option<NetParams>, WireError> {
    match conn.call(&Request::GetParams { have_version }, timeout)? {
        Response::ParamsUpToDate => Ok(None),
        Response::Params { blob } => {
            let params = NetParams::decode_blob(&blob)
                .map_err(|e| WireError::Protocol(format!("parameter blob: {e}")))?;
            Ok(Some(params))
        }
        other => Err(WireError::Protocol(format!("unexpected response {other:?}"))),
    }
}
