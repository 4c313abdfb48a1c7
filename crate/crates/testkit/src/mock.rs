//! Minimal HTTP/1.1 server speaking the inpainting wire protocol.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde_json::{json, Value};

use rip_core::ImageBuffer;

pub const MOCK_MODEL: &str = "mock-inpaint-1";

/// How the mock answers `POST /inpaint`.
#[derive(Debug, Clone, PartialEq)]
pub enum Behavior {
    /// Returns the request image unchanged.
    Echo,
    /// Returns the request image with every channel inverted.
    Invert,
    /// Returns an all-white image of the request's size.
    White,
    /// Returns a 256x256 image whatever the request size.
    WrongSize,
    /// Answers with this HTTP status and a text body.
    Status(u16),
    /// Answers 200 with a body that is not the response schema.
    Garbage,
    /// Closes the first `n` inpaint connections without answering, then echoes.
    DropFirst(usize),
    /// Like `Echo`, but `/health` reports the model as not ready.
    NotReady,
    /// Echoes after holding the request for this many milliseconds.
    SlowEcho(u64),
}

#[derive(Default)]
struct State {
    requests: Mutex<Vec<Value>>,
    inpaint_calls: AtomicUsize,
    health_calls: AtomicUsize,
    active: AtomicUsize,
    max_active: AtomicUsize,
    stop: AtomicBool,
}

/// A mock service on an ephemeral localhost port, stopped on drop.
pub struct MockServer {
    addr: SocketAddr,
    state: Arc<State>,
    handle: Option<thread::JoinHandle<()>>,
}

impl MockServer {
    pub fn start(behavior: Behavior) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(State::default());
        let st = Arc::clone(&state);
        let handle = thread::spawn(move || {
            for stream in listener.incoming() {
                if st.stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let st = Arc::clone(&st);
                let behavior = behavior.clone();
                thread::spawn(move || serve(stream, &behavior, &st));
            }
        });
        Self { addr, state, handle: Some(handle) }
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Every `/inpaint` body received, parsed as JSON.
    pub fn requests(&self) -> Vec<Value> {
        self.state.requests.lock().unwrap().clone()
    }

    pub fn inpaint_calls(&self) -> usize {
        self.state.inpaint_calls.load(Ordering::SeqCst)
    }

    /// Largest number of `/inpaint` requests seen in progress at once.
    pub fn max_concurrent(&self) -> usize {
        self.state.max_active.load(Ordering::SeqCst)
    }

    pub fn health_calls(&self) -> usize {
        self.state.health_calls.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.state.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// An unused localhost URL: bound once, then released.
pub fn dead_endpoint() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}")
}

struct Request {
    method: String,
    path: String,
    body: Vec<u8>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<Request> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(Request { method, path, body })
}

fn respond(stream: &mut TcpStream, status: u16, body: &[u8]) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    write!(
        stream,
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

fn serve(stream: TcpStream, behavior: &Behavior, st: &State) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    while let Some(req) = read_request(&mut reader) {
        let (status, body) = match (req.method.as_str(), req.path.as_str()) {
            ("GET", "/health") => {
                st.health_calls.fetch_add(1, Ordering::SeqCst);
                let ready = *behavior != Behavior::NotReady;
                let body = json!({
                    "model": MOCK_MODEL,
                    "ready": ready,
                    "deterministic": true,
                    "defaults": {"steps": 50, "guidanceScale": 7.5, "scheduler": "mock"},
                });
                (200, body.to_string().into_bytes())
            }
            ("POST", "/inpaint") => {
                let n = st.inpaint_calls.fetch_add(1, Ordering::SeqCst);
                if let Behavior::DropFirst(k) = behavior {
                    if n < *k {
                        return;
                    }
                }
                let parsed: Value = serde_json::from_slice(&req.body).unwrap_or(Value::Null);
                st.requests.lock().unwrap().push(parsed.clone());
                let now = st.active.fetch_add(1, Ordering::SeqCst) + 1;
                st.max_active.fetch_max(now, Ordering::SeqCst);
                if let Behavior::SlowEcho(ms) = behavior {
                    thread::sleep(Duration::from_millis(*ms));
                }
                let answer = inpaint(behavior, &parsed);
                st.active.fetch_sub(1, Ordering::SeqCst);
                answer
            }
            _ => (404, b"{\"error\":\"not found\"}".to_vec()),
        };
        if respond(&mut writer, status, &body).is_err() {
            return;
        }
    }
}

fn inpaint(behavior: &Behavior, req: &Value) -> (u16, Vec<u8>) {
    let decode = |field: &str| {
        let b64 = req.get(field)?.as_str()?;
        ImageBuffer::decode(&B64.decode(b64).ok()?).ok()
    };
    let (Some(image), Some(_mask)) = (decode("image"), decode("mask")) else {
        return (400, b"{\"error\":\"schema\"}".to_vec());
    };
    let (w, h) = image.dimensions();
    let out = match behavior {
        Behavior::Status(code) => return (*code, b"{\"error\":\"mock failure\"}".to_vec()),
        Behavior::Garbage => return (200, b"{\"picture\":42}".to_vec()),
        Behavior::Echo | Behavior::DropFirst(_) | Behavior::NotReady | Behavior::SlowEcho(_) => image,
        Behavior::Invert => ImageBuffer::from_fn(w, h, |x, y| image.pixel(x, y).map(|c| 255 - c)),
        Behavior::White => ImageBuffer::filled(w, h, [255; 3]),
        Behavior::WrongSize => ImageBuffer::filled(256, 256, [255; 3]),
    };
    let png = out.encode_png().expect("encode png");
    (200, json!({ "image": B64.encode(png) }).to_string().into_bytes())
}
