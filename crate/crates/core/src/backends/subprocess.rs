//! Backends hosted by a child process speaking the framed protocol on stdio.

use std::io::{BufReader, BufWriter, Read};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use log::{debug, warn};

use super::protocol::{
    read_frame, write_frame, Frame, Tensor, ERROR_KEY, OP_DETECT, OP_NLI, OP_PING, OP_RECOGNIZE,
    OP_SUMMARIZE, OP_UPSCALE,
};
use super::{Detector, NliLogits, NliScorer, Recognizer, Summarizer};
use crate::detection::ScoreMaps;
use crate::error::{BackendError, ProtocolError};
use crate::geometry::Polygon;
use crate::imaging::{GrayImage, Upscaler};

/// A runner must answer its first ping within this long after launch.
pub const STARTUP_TIMEOUT: Duration = Duration::from_secs(10);

const STDERR_CAP: usize = 64 * 1024;

struct RunningChild {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    responses: Receiver<Result<Frame, ProtocolError>>,
    stderr: Arc<Mutex<String>>,
}

impl RunningChild {
    fn stderr_tail(&self) -> String {
        // Give the stderr pump a moment to drain after the child died.
        thread::sleep(Duration::from_millis(20));
        let s = self.stderr.lock().map(|s| s.clone()).unwrap_or_default();
        s.trim().to_string()
    }

    fn shutdown(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_pumps(
    stdout: impl Read + Send + 'static,
    stderr: impl Read + Send + 'static,
) -> (Receiver<Result<Frame, ProtocolError>>, Arc<Mutex<String>>) {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let mut reader = BufReader::new(stdout);
        loop {
            match read_frame(&mut reader) {
                Ok(Some(frame)) => {
                    if tx.send(Ok(frame)).is_err() {
                        return;
                    }
                }
                Ok(None) => return,
                Err(e) => {
                    let _ = tx.send(Err(e));
                    return;
                }
            }
        }
    });
    let log = Arc::new(Mutex::new(String::new()));
    let sink = Arc::clone(&log);
    thread::spawn(move || {
        let mut stderr = stderr;
        let mut buf = [0u8; 4096];
        while let Ok(n) = stderr.read(&mut buf) {
            if n == 0 {
                break;
            }
            if let Ok(mut s) = sink.lock() {
                s.push_str(&String::from_utf8_lossy(&buf[..n]));
                if s.len() > STDERR_CAP {
                    let cut = s.len() - STDERR_CAP;
                    let cut = (cut..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
                    s.drain(..cut);
                }
            }
        }
    });
    (rx, log)
}

/// One child process with at most one request in flight.
///
/// The child is started lazily and restarted on the call after it dies; a
/// request that was in flight when it died fails and is not replayed.
pub struct SubprocessClient {
    launch: Vec<String>,
    timeout: Duration,
    next_id: AtomicU64,
    state: Mutex<Option<RunningChild>>,
}

impl SubprocessClient {
    pub fn new(launch: Vec<String>, timeout: Duration) -> Self {
        Self {
            launch,
            timeout,
            next_id: AtomicU64::new(1),
            state: Mutex::new(None),
        }
    }

    /// Process id of the current child, if one is running.
    pub fn child_pid(&self) -> Option<u32> {
        self.state.lock().ok()?.as_ref().map(|c| c.child.id())
    }

    fn spawn(&self) -> Result<RunningChild, BackendError> {
        let (program, args) = self
            .launch
            .split_first()
            .ok_or_else(|| BackendError::Contract("empty launch command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| BackendError::Unavailable(format!("cannot launch `{program}`: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = child.stdout.take().expect("piped stdout");
        let stderr = child.stderr.take().expect("piped stderr");
        let (responses, stderr) = spawn_pumps(stdout, stderr);
        debug!("launched model runner `{program}` pid {}", child.id());
        let mut running = RunningChild {
            child,
            stdin,
            responses,
            stderr,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        match exchange(&mut running, &Frame::new(OP_PING, id), STARTUP_TIMEOUT) {
            Ok(_) => Ok(running),
            Err(e) => {
                running.shutdown();
                Err(match e {
                    BackendError::Timeout(_) => BackendError::Unavailable(format!(
                        "`{program}` did not answer ping within {STARTUP_TIMEOUT:?}"
                    )),
                    other => other,
                })
            }
        }
    }

    /// Sends `request` (its id is overwritten) and waits for the matching response.
    pub fn call(&self, mut request: Frame) -> Result<Frame, BackendError> {
        let mut state = self.state.lock().unwrap_or_else(|p| p.into_inner());
        if state.is_none() {
            *state = Some(self.spawn()?);
        }
        request.id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let running = state.as_mut().expect("child present");
        match exchange(running, &request, self.timeout) {
            Ok(resp) => {
                if let Some(msg) = resp.string(ERROR_KEY) {
                    return Err(BackendError::Remote(msg.to_string()));
                }
                Ok(resp)
            }
            Err(e) => {
                if let Some(dead) = state.take() {
                    warn!("model runner pid {} dropped: {e}", dead.child.id());
                    dead.shutdown();
                }
                Err(e)
            }
        }
    }

    pub fn ping(&self) -> Result<(), BackendError> {
        self.call(Frame::new(OP_PING, 0)).map(|_| ())
    }
}

impl Drop for SubprocessClient {
    fn drop(&mut self) {
        if let Ok(mut s) = self.state.lock() {
            if let Some(c) = s.take() {
                c.shutdown();
            }
        }
    }
}

fn exchange(running: &mut RunningChild, request: &Frame, timeout: Duration) -> Result<Frame, BackendError> {
    let died = |running: &RunningChild, what: String| {
        let stderr = running.stderr_tail();
        if stderr.is_empty() {
            BackendError::Unavailable(what)
        } else {
            BackendError::Unavailable(format!("{what}; stderr: {stderr}"))
        }
    };
    if let Err(e) = write_frame(&mut running.stdin, request) {
        return Err(died(running, format!("model runner closed its input: {e}")));
    }
    match running.responses.recv_timeout(timeout) {
        Ok(Ok(frame)) if frame.id == request.id => Ok(frame),
        Ok(Ok(frame)) => Err(ProtocolError::IdMismatch {
            expected: request.id,
            got: frame.id,
        }
        .into()),
        Ok(Err(e)) => Err(e.into()),
        Err(RecvTimeoutError::Timeout) => Err(BackendError::Timeout(timeout)),
        Err(RecvTimeoutError::Disconnected) => Err(died(running, "model runner exited".into())),
    }
}

/// Round-robin over `n` independent children.
pub struct SubprocessPool {
    clients: Vec<SubprocessClient>,
    next: AtomicUsize,
}

impl SubprocessPool {
    pub fn new(launch: Vec<String>, size: usize, timeout: Duration) -> Self {
        Self {
            clients: (0..size.max(1))
                .map(|_| SubprocessClient::new(launch.clone(), timeout))
                .collect(),
            next: AtomicUsize::new(0),
        }
    }

    pub fn call(&self, request: Frame) -> Result<Frame, BackendError> {
        let i = self.next.fetch_add(1, Ordering::Relaxed) % self.clients.len();
        self.clients[i].call(request)
    }

    pub fn clients(&self) -> &[SubprocessClient] {
        &self.clients
    }

    pub fn ping(&self) -> Result<(), BackendError> {
        self.clients.iter().try_for_each(SubprocessClient::ping)
    }
}

// Frame <-> domain conversions shared by the client adapters and the runner.

pub fn image_tensor(name: &str, img: &GrayImage) -> Tensor {
    Tensor::from_u8(name, vec![img.height(), img.width()], img.pixels()).expect("shape matches pixels")
}

pub fn image_from_frame(frame: &Frame, name: &str) -> Result<GrayImage, String> {
    let t = frame.tensor(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
    let data = t.as_u8().ok_or_else(|| format!("tensor `{name}` must be u8"))?;
    match t.shape.as_slice() {
        &[h, w] => GrayImage::new(w, h, data.to_vec()).map_err(|e| e.to_string()),
        other => Err(format!("tensor `{name}` must be rank 2, got shape {other:?}")),
    }
}

pub fn maps_to_frame(mut frame: Frame, maps: &ScoreMaps) -> Frame {
    let shape = vec![maps.height(), maps.width()];
    frame = frame.with_tensor(Tensor::from_f32("prob", shape.clone(), maps.prob()).expect("shape"));
    if let Some(t) = maps.thresh() {
        frame = frame.with_tensor(Tensor::from_f32("thresh", shape, t).expect("shape"));
    }
    frame
}

fn map_tensor(frame: &Frame, name: &str, w: usize, h: usize) -> Result<Option<Vec<f32>>, String> {
    let Some(t) = frame.tensor(name) else {
        return Ok(None);
    };
    if t.shape != [h, w] {
        return Err(format!("`{name}` has shape {:?}, expected [{h}, {w}]", t.shape));
    }
    t.to_f32()
        .map(Some)
        .ok_or_else(|| format!("`{name}` must be f32"))
}

pub fn maps_from_frame(frame: &Frame, width: usize, height: usize) -> Result<ScoreMaps, String> {
    let prob = map_tensor(frame, "prob", width, height)?.ok_or("missing tensor `prob`")?;
    let thresh = map_tensor(frame, "thresh", width, height)?;
    ScoreMaps::new(width, height, prob, thresh).map_err(|e| e.to_string())
}

pub fn polygons_to_frame(mut frame: Frame, regions: &[Polygon]) -> Frame {
    frame = frame.with_string("count", regions.len().to_string());
    for (i, p) in regions.iter().enumerate() {
        let flat: Vec<String> = p.to_flat().iter().map(|v| v.to_string()).collect();
        frame = frame.with_string(format!("polygon.{i}"), flat.join(","));
    }
    frame
}

pub fn polygons_from_frame(frame: &Frame) -> Result<Vec<Polygon>, String> {
    let count: usize = frame
        .string("count")
        .ok_or("missing `count`")?
        .parse()
        .map_err(|_| "bad `count`".to_string())?;
    (0..count)
        .map(|i| {
            let key = format!("polygon.{i}");
            let s = frame.string(&key).ok_or_else(|| format!("missing `{key}`"))?;
            let flat = s
                .split(',')
                .map(|c| c.parse::<f64>().map_err(|_| format!("bad coordinate in `{key}`")))
                .collect::<Result<Vec<_>, _>>()?;
            Polygon::from_flat(&flat).map_err(|e| format!("`{key}`: {e}"))
        })
        .collect()
}

pub fn logits_from_frame(frame: &Frame) -> Result<NliLogits, String> {
    let t = frame.tensor("logits").ok_or("missing tensor `logits`")?;
    let v = t.to_f32().ok_or("`logits` must be f32")?;
    if v.len() != 3 {
        return Err(format!("`logits` has {} values, expected 3", v.len()));
    }
    let logits = NliLogits {
        entailment: v[0] as f64,
        contradiction: v[1] as f64,
        neutral: v[2] as f64,
    };
    if !logits.is_finite() {
        return Err("non-finite logits".into());
    }
    Ok(logits)
}

pub fn logits_tensor(l: &NliLogits) -> Tensor {
    Tensor::from_f32(
        "logits",
        vec![3],
        &[l.entailment as f32, l.contradiction as f32, l.neutral as f32],
    )
    .expect("shape")
}

pub struct SubprocessDetector {
    pool: Arc<SubprocessPool>,
}

impl SubprocessDetector {
    pub fn new(pool: Arc<SubprocessPool>) -> Self {
        Self { pool }
    }

    pub fn pool(&self) -> &SubprocessPool {
        &self.pool
    }
}

impl Detector for SubprocessDetector {
    fn infer_maps(&self, img: &GrayImage) -> Result<ScoreMaps, BackendError> {
        let req = Frame::new(OP_DETECT, 0).with_tensor(image_tensor("image", img));
        let resp = self.pool.call(req)?;
        maps_from_frame(&resp, img.width(), img.height()).map_err(BackendError::Malformed)
    }

    fn ping(&self) -> Result<(), BackendError> {
        self.pool.ping()
    }
}

pub struct SubprocessRecognizer {
    pool: Arc<SubprocessPool>,
}

impl SubprocessRecognizer {
    pub fn new(pool: Arc<SubprocessPool>) -> Self {
        Self { pool }
    }
}

impl Recognizer for SubprocessRecognizer {
    fn recognize(&self, img: &GrayImage, regions: &[Polygon]) -> Result<Vec<String>, BackendError> {
        let req = polygons_to_frame(
            Frame::new(OP_RECOGNIZE, 0).with_tensor(image_tensor("image", img)),
            regions,
        );
        let resp = self.pool.call(req)?;
        let texts: Vec<String> = (0..)
            .map_while(|i| resp.string(&format!("text.{i}")).map(str::to_string))
            .collect();
        if texts.len() != regions.len() {
            return Err(BackendError::CountMismatch {
                expected: regions.len(),
                got: texts.len(),
            });
        }
        Ok(texts)
    }

    fn ping(&self) -> Result<(), BackendError> {
        self.pool.ping()
    }
}

pub struct SubprocessNli {
    pool: Arc<SubprocessPool>,
}

impl SubprocessNli {
    pub fn new(pool: Arc<SubprocessPool>) -> Self {
        Self { pool }
    }
}

impl NliScorer for SubprocessNli {
    fn score(&self, premise: &str, hypothesis: &str) -> Result<NliLogits, BackendError> {
        let req = Frame::new(OP_NLI, 0)
            .with_string("premise", premise)
            .with_string("hypothesis", hypothesis);
        logits_from_frame(&self.pool.call(req)?).map_err(BackendError::Malformed)
    }

    fn ping(&self) -> Result<(), BackendError> {
        self.pool.ping()
    }
}

pub struct SubprocessSummarizer {
    pool: Arc<SubprocessPool>,
}

impl SubprocessSummarizer {
    pub fn new(pool: Arc<SubprocessPool>) -> Self {
        Self { pool }
    }
}

impl Summarizer for SubprocessSummarizer {
    fn summarize(&self, text: &str) -> Result<String, BackendError> {
        let resp = self.pool.call(Frame::new(OP_SUMMARIZE, 0).with_string("text", text))?;
        resp.string("summary")
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("missing `summary`".into()))
    }

    fn ping(&self) -> Result<(), BackendError> {
        self.pool.ping()
    }
}

pub struct SubprocessUpscaler {
    pool: Arc<SubprocessPool>,
    scale: usize,
}

impl SubprocessUpscaler {
    pub fn new(pool: Arc<SubprocessPool>, scale: usize) -> Self {
        Self { pool, scale }
    }
}

impl Upscaler for SubprocessUpscaler {
    fn scale_factor(&self) -> usize {
        self.scale
    }

    fn upscale(&self, img: &GrayImage) -> Result<GrayImage, BackendError> {
        let req = Frame::new(OP_UPSCALE, 0)
            .with_tensor(image_tensor("image", img))
            .with_string("scale", self.scale.to_string());
        image_from_frame(&self.pool.call(req)?, "image").map_err(BackendError::Malformed)
    }

    fn ping(&self) -> Result<(), BackendError> {
        self.pool.ping()
    }
}

impl std::fmt::Debug for SubprocessClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubprocessClient")
            .field("launch", &self.launch)
            .field("timeout", &self.timeout)
            .finish()
    }
}
