//! Loopback HTTP stand-in for the diffusion service.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

#[derive(Clone)]
pub enum Behaviour {
    /// Returns the request image untouched.
    Echo,
    /// Replies with this status and `{"error": message}`.
    Fail(u16, String),
    /// Replies 200 with the given base64 PNG regardless of the request.
    Fixed(String),
}

pub struct Stub {
    pub endpoint: String,
    /// `"METHOD /path"` of every request received.
    pub log: Arc<Mutex<Vec<String>>>,
    /// Parsed JSON bodies of POST requests.
    pub bodies: Arc<Mutex<Vec<Value>>>,
}

impl Stub {
    pub fn start(behaviour: Behaviour) -> Stub {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (l, b) = (log.clone(), bodies.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (l, b, behaviour) = (l.clone(), b.clone(), behaviour.clone());
                thread::spawn(move || serve(stream, &behaviour, &l, &b));
            }
        });
        Stub {
            endpoint,
            log,
            bodies,
        }
    }

    pub fn posts(&self) -> usize {
        self.log
            .lock()
            .unwrap()
            .iter()
            .filter(|l| l.starts_with("POST"))
            .count()
    }
}

fn serve(stream: TcpStream, behaviour: &Behaviour, log: &Mutex<Vec<String>>, bodies: &Mutex<Vec<Value>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut content_length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    content_length = v.trim().parse().unwrap();
                }
            }
        }
        let mut body = vec![0u8; content_length];
        reader.read_exact(&mut body).unwrap();
        let mut parts = request_line.split_whitespace();
        let method = parts.next().unwrap_or("").to_string();
        let path = parts.next().unwrap_or("").to_string();
        log.lock().unwrap().push(format!("{method} {path}"));

        let (status, reply) = match (method.as_str(), path.as_str()) {
            ("GET", "/health") => (200, json!({"status": "ok", "model_info": "loopback stub"})),
            ("POST", "/inpaint") => {
                let req: Value = serde_json::from_slice(&body).unwrap();
                bodies.lock().unwrap().push(req.clone());
                match behaviour {
                    Behaviour::Echo => (
                        200,
                        json!({"image_png_b64": req["image_png_b64"], "model_info": "echo"}),
                    ),
                    Behaviour::Fail(code, msg) => (*code, json!({ "error": msg })),
                    Behaviour::Fixed(png) => (200, json!({"image_png_b64": png, "model_info": "fixed"})),
                }
            }
            _ => (404, json!({"error": "not found"})),
        };
        let text = reply.to_string();
        let mut out = stream.try_clone().unwrap();
        let head = format!(
            "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            text.len()
        );
        if out.write_all(head.as_bytes()).and_then(|_| out.write_all(text.as_bytes())).is_err() {
            return;
        }
    }
}

/// A local port with nothing listening on it.
pub fn dead_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}")
}
