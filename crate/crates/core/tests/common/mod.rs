//! Test helpers: a tiny HTTP/1.1 chat-completion mock and fixture loading.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

pub fn fixture(name: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

pub fn planner_example(n: usize) -> String {
    fixture(&format!("planner_example_{n}.txt"))
}

type Responder = dyn Fn(usize, &Value) -> String + Send + Sync;

/// Serves `POST /chat/completions`, answering request `k` (0-based) with the
/// responder's text as the first choice's content.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<AtomicUsize>,
    pub max_concurrent: Arc<AtomicUsize>,
    pub bodies: Arc<Mutex<Vec<Value>>>,
}

impl MockServer {
    pub fn start(delay: Duration, responder: impl Fn(usize, &Value) -> String + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let responder: Arc<Responder> = Arc::new(responder);
        {
            let (requests, max_concurrent, bodies) = (requests.clone(), max_concurrent.clone(), bodies.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (requests, max_concurrent, current, bodies, responder) = (
                        requests.clone(),
                        max_concurrent.clone(),
                        current.clone(),
                        bodies.clone(),
                        responder.clone(),
                    );
                    thread::spawn(move || {
                        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                        max_concurrent.fetch_max(now, Ordering::SeqCst);
                        let reply = handle(stream, delay, &requests, &bodies, &*responder, &current);
                        if reply.is_none() {
                            current.fetch_sub(1, Ordering::SeqCst);
                        }
                    });
                }
            });
        }
        Self {
            url,
            requests,
            max_concurrent,
            bodies,
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn handle(
    stream: TcpStream,
    delay: Duration,
    requests: &AtomicUsize,
    bodies: &Mutex<Vec<Value>>,
    responder: &Responder,
    current: &AtomicUsize,
) -> Option<()> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut len = 0usize;
    let mut request_line = String::new();
    reader.read_line(&mut request_line).ok()?;
    loop {
        let mut line = String::new();
        reader.read_line(&mut line).ok()?;
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().ok()?;
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).ok()?;
    let body: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let k = requests.fetch_add(1, Ordering::SeqCst);
    bodies.lock().unwrap().push(body.clone());
    thread::sleep(delay);
    let content = responder(k, &body);
    let payload = json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string();
    // leave the in-flight count before the client can observe the reply
    current.fetch_sub(1, Ordering::SeqCst);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        payload.len(),
        payload
    );
    let _ = stream.flush();
    Some(())
}
