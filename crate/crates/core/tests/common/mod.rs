//! Independent oracles, random fixtures and a scripted mock chat server
//! shared by the integration tests.

#![allow(dead_code)]

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::Rng;

/// Random rooted tree over `n` nodes named `c0x..c{n-1}x`, `c0x` the root.
/// The suffix keeps no name a substring of another.
/// Parents are drawn either uniformly or from the few most recent nodes so
/// both bushy and deep shapes occur.
pub struct RandomTree {
    pub parent: Vec<Option<usize>>,
    pub edge_list: String,
}

pub fn random_tree<R: Rng>(rng: &mut R, n: usize) -> RandomTree {
    let mut parent = vec![None];
    let mut text = String::from("ROOT\tc0x\n");
    for i in 1..n {
        let p = if rng.random_bool(0.5) {
            rng.random_range(0..i)
        } else {
            rng.random_range(i.saturating_sub(3)..i)
        };
        parent.push(Some(p));
        text.push_str(&format!("c{i}x\tc{p}x\n"));
    }
    RandomTree {
        parent,
        edge_list: text,
    }
}

pub fn name(i: usize) -> String {
    format!("c{i}x")
}

/// Brute-force tree queries straight from the parent array. Depths and
/// heights are filled by walking every node's full ancestor chain.
pub struct TreeOracle<'a> {
    pub parent: &'a [Option<usize>],
    depth: Vec<usize>,
    height: Vec<usize>,
    has_child: Vec<bool>,
    /// `ancestors[x][a]` is true when `a` lies on the chain from `x` to the root.
    ancestors: Vec<Vec<bool>>,
}

impl<'a> TreeOracle<'a> {
    pub fn new(parent: &'a [Option<usize>]) -> Self {
        let n = parent.len();
        let mut has_child = vec![false; n];
        for p in parent.iter().flatten() {
            has_child[*p] = true;
        }
        let chain = |mut x: usize| {
            let mut out = vec![x];
            while let Some(p) = parent[x] {
                out.push(p);
                x = p;
            }
            out
        };
        let depth: Vec<usize> = (0..n).map(|x| chain(x).len() - 1).collect();
        let mut height = vec![0; n];
        let mut ancestors = vec![vec![false; n]; n];
        for x in 0..n {
            for a in chain(x) {
                height[a] = height[a].max(depth[x] - depth[a]);
                ancestors[x][a] = true;
            }
        }
        Self {
            parent,
            depth,
            height,
            has_child,
            ancestors,
        }
    }

    pub fn chain(&self, mut n: usize) -> Vec<usize> {
        let mut out = vec![n];
        while let Some(p) = self.parent[n] {
            out.push(p);
            n = p;
        }
        out
    }

    pub fn depth(&self, n: usize) -> usize {
        self.depth[n]
    }

    pub fn is_leaf(&self, n: usize) -> bool {
        n != 0 && !self.has_child[n]
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.parent.len()).filter(|&n| self.is_leaf(n)).collect()
    }

    pub fn height(&self, n: usize) -> usize {
        self.height[n]
    }

    /// Deepest element of the intersection of both ancestor sets: the first
    /// node on `b`'s chain that is also in `a`'s set.
    pub fn lca(&self, a: usize, mut b: usize) -> usize {
        while !self.ancestors[a][b] {
            b = self.parent[b].expect("root is a common ancestor");
        }
        b
    }

    pub fn distance(&self, a: usize, b: usize) -> usize {
        self.height(self.lca(a, b))
    }

    pub fn siblings(&self, n: usize) -> Vec<usize> {
        match self.parent[n] {
            None => Vec::new(),
            Some(p) => (0..self.parent.len())
                .filter(|&m| m != n && self.parent[m] == Some(p))
                .collect(),
        }
    }

    pub fn leaf_peer_count(&self, y: usize) -> usize {
        self.siblings(y).into_iter().filter(|&m| self.is_leaf(m)).count()
    }

    /// Ancestors excluding `y` and the root.
    pub fn non_root_ancestors(&self, y: usize) -> Vec<usize> {
        let c = self.chain(y);
        c[1..c.len() - 1].to_vec()
    }

    pub fn comparative_count(&self, y: usize) -> usize {
        self.leaf_peer_count(y)
            + self
                .non_root_ancestors(y)
                .into_iter()
                .map(|a| self.siblings(a).len())
                .sum::<usize>()
    }
}

/// One-pass metric oracle: (top1, severity, hd_at_1, mistakes).
pub fn metric_oracle(pred: &[usize], truth: &[usize], d: &[Vec<u32>]) -> (f64, f64, f64, usize) {
    let (mut correct, mut mistakes, mut sum) = (0usize, 0usize, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            correct += 1;
        } else {
            mistakes += 1;
            sum += u64::from(d[p][t]);
        }
    }
    let n = pred.len() as f64;
    let severity = if mistakes == 0 { 0.0 } else { sum as f64 / mistakes as f64 };
    (correct as f64 / n, severity, sum as f64 / n, mistakes)
}

/// Expected cost per class under softmax(scale * logits), computed naively.
pub fn risk_oracle(logits: &[f64], d: &[Vec<u32>], scale: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (scale * (l - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    (0..logits.len())
        .map(|k| (0..logits.len()).map(|j| f64::from(d[k][j]) * w[j] / z).sum())
        .collect()
}

pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

/// What the mock server does with the next request.
#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    /// Deterministic completion derived from the prompt.
    Ok,
    /// Error status with a short JSON body.
    Status(u16),
    /// 200 with empty content.
    Empty,
}

#[derive(Default)]
pub struct MockState {
    pub requests: AtomicUsize,
    script: Mutex<VecDeque<Reply>>,
    pub bodies: Mutex<Vec<serde_json::Value>>,
    pub auth: Mutex<Vec<String>>,
}

/// Minimal HTTP/1.1 chat-completion server on a loopback port. Each
/// request consumes the next scripted reply; once the script is empty every
/// request succeeds.
pub struct MockServer {
    pub base_url: String,
    pub state: Arc<MockState>,
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

pub fn mock_completion(prompt: &str) -> String {
    let digest = prompt.bytes().fold(0u32, |h, b| h.wrapping_mul(31).wrapping_add(u32::from(b)));
    format!("Seen in photo {digest:08x} with distinctive shape and color")
}

impl MockServer {
    pub fn start(script: Vec<Reply>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(MockState {
            script: Mutex::new(script.into()),
            ..Default::default()
        });
        let stop = Arc::new(AtomicBool::new(false));
        let (st, sp) = (state.clone(), stop.clone());
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if sp.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let st = st.clone();
                std::thread::spawn(move || {
                    let _ = serve(conn, &st);
                });
            }
        });
        Self {
            base_url: format!("http://{addr}/v1"),
            state,
            addr,
            stop,
            handle: Some(handle),
        }
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, state: &MockState) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut content_length = 0usize;
    let mut auth = String::new();
    let mut line = String::new();
    reader.read_line(&mut line)?;
    loop {
        line.clear();
        reader.read_line(&mut line)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            match k.trim().to_ascii_lowercase().as_str() {
                "content-length" => content_length = v.trim().parse().unwrap_or(0),
                "authorization" => auth = v.trim().to_string(),
                _ => {}
            }
        }
    }
    let mut body = vec![0; content_length];
    reader.read_exact(&mut body)?;
    let request: serde_json::Value = serde_json::from_slice(&body).unwrap_or_default();
    state.requests.fetch_add(1, Ordering::SeqCst);
    state.auth.lock().unwrap().push(auth);
    state.bodies.lock().unwrap().push(request.clone());

    let reply = state.script.lock().unwrap().pop_front().unwrap_or(Reply::Ok);
    let prompt = request["messages"][0]["content"].as_str().unwrap_or("");
    let (code, payload) = match reply {
        Reply::Status(code) => (code, serde_json::json!({"error": {"message": "scripted"}})),
        Reply::Empty => (200, completion_body("", "stop")),
        Reply::Ok => (200, completion_body(&mock_completion(prompt), "stop")),
    };
    let payload = payload.to_string();
    let mut out = stream;
    write!(
        out,
        "HTTP/1.1 {code} Scripted\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    )?;
    out.flush()
}

fn completion_body(content: &str, finish: &str) -> serde_json::Value {
    serde_json::json!({
        "id": "mock",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": finish,
        }],
    })
}
