//! The shuffle manager: a template store plus an append-only record log,
//! usable in-process or as a standalone TCP service.
//!
//! Wire protocol: 4-byte big-endian length-prefixed UTF-8 JSON frames.
//! Requests carry `op` plus `wId` / `shuffleId` / `templateId` / `body`
//! fields; responses are `{"ok":true,...}` or `{"ok":false,"err":"..."}`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use teshu_core::template::Template;
use teshu_core::topology::WorkerId;
use teshu_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    Start,
    End,
}

/// One append-only log entry. Timestamps come from a logical monotonic
/// counter so logs are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleRecord {
    pub w_id: u32,
    pub shuffle_id: u64,
    pub template_id: String,
    pub kind: RecordKind,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WorkerStatus {
    NotStarted,
    InFlight,
    Done,
}

impl fmt::Display for WorkerStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WorkerStatus::NotStarted => "NOT_STARTED",
            WorkerStatus::InFlight => "IN_FLIGHT",
            WorkerStatus::Done => "DONE",
        })
    }
}

/// Template store + record log. Single instance; wrap in a mutex to share.
#[derive(Debug, Default)]
pub struct ManagerState {
    templates: BTreeMap<String, String>,
    records: Vec<ShuffleRecord>,
    clock: u64,
    spill: Option<PathBuf>,
}

impl ManagerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append every record as a JSON line to `path` as it arrives.
    pub fn with_spill(mut self, path: PathBuf) -> Self {
        self.spill = Some(path);
        self
    }

    /// Install (or replace) a template; the body must parse.
    pub fn install_template(&mut self, body: &str) -> Result<String> {
        let t = Template::parse(body)?;
        self.templates.insert(t.id.clone(), body.to_string());
        Ok(t.id)
    }

    pub fn template_ids(&self) -> Vec<String> {
        self.templates.keys().cloned().collect()
    }

    fn append(&mut self, w_id: u32, shuffle_id: u64, template_id: &str, kind: RecordKind) {
        self.clock += 1;
        let rec = ShuffleRecord {
            w_id,
            shuffle_id,
            template_id: template_id.to_string(),
            kind,
            timestamp: self.clock,
        };
        if let Some(path) = &self.spill {
            // Spill failures must never fail the shuffle.
            if let Ok(line) = serde_json::to_string(&rec) {
                let _ = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .and_then(|mut f| writeln!(f, "{line}"));
            }
        }
        self.records.push(rec);
    }

    /// Serve a template body and record the shuffle start.
    pub fn get_template(&mut self, w_id: u32, shuffle_id: u64, template_id: &str) -> Result<String> {
        let body = self
            .templates
            .get(template_id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("template '{template_id}' not installed")))?;
        self.append(w_id, shuffle_id, template_id, RecordKind::Start);
        Ok(body)
    }

    /// Record a start for a worker serving the template from its cache.
    pub fn record_start(&mut self, w_id: u32, shuffle_id: u64, template_id: &str) {
        self.append(w_id, shuffle_id, template_id, RecordKind::Start);
    }

    pub fn record_end(&mut self, w_id: u32, shuffle_id: u64) -> Result<()> {
        let start = self
            .records
            .iter()
            .find(|r| r.w_id == w_id && r.shuffle_id == shuffle_id && r.kind == RecordKind::Start)
            .cloned()
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "END without START for worker {w_id} shuffle {shuffle_id}"
                ))
            })?;
        if self
            .records
            .iter()
            .any(|r| r.w_id == w_id && r.shuffle_id == shuffle_id && r.kind == RecordKind::End)
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate END for worker {w_id} shuffle {shuffle_id}"
            )));
        }
        self.append(w_id, shuffle_id, &start.template_id, RecordKind::End);
        Ok(())
    }

    /// Per-worker status derived purely from the records of one shuffle.
    pub fn progress(&self, shuffle_id: u64) -> BTreeMap<u32, WorkerStatus> {
        let mut out = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.shuffle_id == shuffle_id) {
            let status = match r.kind {
                RecordKind::Start => WorkerStatus::InFlight,
                RecordKind::End => WorkerStatus::Done,
            };
            let e = out.entry(r.w_id).or_insert(status);
            if status == WorkerStatus::Done {
                *e = WorkerStatus::Done;
            }
        }
        out
    }

    pub fn records(&self) -> &[ShuffleRecord] {
        &self.records
    }

    /// The record-log invariants: at most one START and one END per
    /// (worker, shuffle), END after START, timestamps strictly increasing.
    pub fn check_record_invariants(&self) -> Result<()> {
        let mut last_ts = 0;
        let mut starts: BTreeMap<(u32, u64), u64> = BTreeMap::new();
        let mut ends: BTreeMap<(u32, u64), u64> = BTreeMap::new();
        for r in &self.records {
            if r.timestamp <= last_ts {
                return Err(Error::InvalidArgument("timestamps not strictly increasing".into()));
            }
            last_ts = r.timestamp;
            let key = (r.w_id, r.shuffle_id);
            let table = match r.kind {
                RecordKind::Start => &mut starts,
                RecordKind::End => &mut ends,
            };
            if table.insert(key, r.timestamp).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate {:?} for worker {} shuffle {}",
                    r.kind, r.w_id, r.shuffle_id
                )));
            }
        }
        for (key, end_ts) in &ends {
            match starts.get(key) {
                Some(start_ts) if start_ts < end_ts => {}
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "END without prior START for worker {} shuffle {}",
                        key.0, key.1
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Preload every shipped template.
pub fn with_builtin_templates(mut state: ManagerState) -> ManagerState {
    for id in teshu_core::algorithms::BUILTIN_IDS {
        let body = teshu_core::algorithms::builtin_text(id).expect("builtin body");
        state.install_template(&body).expect("builtin installs");
    }
    state
}

/// Client view of the manager, satisfied by both the in-process state and
/// the TCP client.
pub trait ManagerClient: Send {
    fn install_template(&mut self, body: &str) -> Result<String>;
    fn get_template(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<String>;
    /// Fire-and-forget; delivery failures are swallowed by callers.
    fn record_start(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<()>;
    fn record_end(&mut self, w: WorkerId, shuffle_id: u64) -> Result<()>;
    fn progress(&mut self, shuffle_id: u64) -> Result<BTreeMap<u32, WorkerStatus>>;
}

/// Shared in-process manager with call counters for the protocol tests.
#[derive(Debug, Clone, Default)]
pub struct InProcessManager {
    state: Arc<Mutex<ManagerState>>,
    counts: Arc<Mutex<CallCounts>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub get_template: u64,
    pub record_start: u64,
    pub record_end: u64,
}

impl InProcessManager {
    pub fn new(state: ManagerState) -> Self {
        Self { state: Arc::new(Mutex::new(state)), counts: Arc::default() }
    }

    pub fn with_builtins() -> Self {
        Self::new(with_builtin_templates(ManagerState::new()))
    }

    pub fn counts(&self) -> CallCounts {
        *self.counts.lock().expect("counts lock")
    }

    pub fn with_state<T>(&self, f: impl FnOnce(&ManagerState) -> T) -> T {
        f(&self.state.lock().expect("manager lock"))
    }
}

impl ManagerClient for InProcessManager {
    fn install_template(&mut self, body: &str) -> Result<String> {
        self.state.lock().expect("manager lock").install_template(body)
    }

    fn get_template(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<String> {
        self.counts.lock().expect("counts lock").get_template += 1;
        self.state.lock().expect("manager lock").get_template(w.0, shuffle_id, template_id)
    }

    fn record_start(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<()> {
        self.counts.lock().expect("counts lock").record_start += 1;
        self.state.lock().expect("manager lock").record_start(w.0, shuffle_id, template_id);
        Ok(())
    }

    fn record_end(&mut self, w: WorkerId, shuffle_id: u64) -> Result<()> {
        self.counts.lock().expect("counts lock").record_end += 1;
        self.state.lock().expect("manager lock").record_end(w.0, shuffle_id)
    }

    fn progress(&mut self, shuffle_id: u64) -> Result<BTreeMap<u32, WorkerStatus>> {
        Ok(self.state.lock().expect("manager lock").progress(shuffle_id))
    }
}

// ---------------------------------------------------------------------------
// wire protocol

pub fn write_frame(stream: &mut impl Write, value: &Value) -> std::io::Result<()> {
    let body = value.to_string().into_bytes();
    stream.write_all(&(body.len() as u32).to_be_bytes())?;
    stream.write_all(&body)?;
    stream.flush()
}

pub fn read_frame(stream: &mut impl Read) -> std::io::Result<Value> {
    let mut len = [0u8; 4];
    stream.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

fn field_u64(req: &Value, name: &str) -> Result<u64> {
    req.get(name)
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Parse(format!("missing numeric field '{name}'")))
}

fn field_str<'a>(req: &'a Value, name: &str) -> Result<&'a str> {
    req.get(name)
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse(format!("missing string field '{name}'")))
}

/// Apply one decoded request to the state; always yields a response frame.
pub fn handle_request(state: &Mutex<ManagerState>, req: &Value) -> Value {
    let out = (|| -> Result<Value> {
        let mut state = state.lock().expect("manager lock");
        match field_str(req, "op")? {
            "get_template" => {
                let body = state.get_template(
                    field_u64(req, "wId")? as u32,
                    field_u64(req, "shuffleId")?,
                    field_str(req, "templateId")?,
                )?;
                Ok(json!({"ok": true, "body": body}))
            }
            "record_start" => {
                state.record_start(
                    field_u64(req, "wId")? as u32,
                    field_u64(req, "shuffleId")?,
                    field_str(req, "templateId")?,
                );
                Ok(json!({"ok": true}))
            }
            "record_end" => {
                state.record_end(field_u64(req, "wId")? as u32, field_u64(req, "shuffleId")?)?;
                Ok(json!({"ok": true}))
            }
            "progress" => {
                let map: BTreeMap<String, String> = state
                    .progress(field_u64(req, "shuffleId")?)
                    .into_iter()
                    .map(|(w, s)| (w.to_string(), s.to_string()))
                    .collect();
                Ok(json!({"ok": true, "status": map}))
            }
            "install_template" => {
                let id = state.install_template(field_str(req, "body")?)?;
                Ok(json!({"ok": true, "templateId": id}))
            }
            other => Err(Error::Parse(format!("unknown op '{other}'"))),
        }
    })();
    match out {
        Ok(v) => v,
        Err(e) => {
            let code = match &e {
                Error::InvalidArgument(m) if m.contains("not installed") => "not_found",
                Error::Parse(_) => "bad_request",
                _ => "error",
            };
            json!({"ok": false, "err": code, "detail": e.to_string()})
        }
    }
}

pub struct ManagerServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl ManagerServer {
    /// Bind and serve in background threads (one per connection).
    pub fn spawn(state: ManagerState, bind: &str) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(Mutex::new(state));
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = stop.clone();
        let accept_thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let state = state.clone();
                std::thread::spawn(move || serve_connection(stream, &state));
            }
        });
        Ok(Self { addr, stop, accept_thread: Some(accept_thread) })
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(mut stream: TcpStream, state: &Mutex<ManagerState>) {
    loop {
        let req = match read_frame(&mut stream) {
            Ok(v) => v,
            Err(_) => return, // EOF or bad frame closes the connection
        };
        let resp = handle_request(state, &req);
        if write_frame(&mut stream, &resp).is_err() {
            return;
        }
    }
}

/// Blocking client speaking the wire protocol over one connection.
pub struct TcpManagerClient {
    stream: TcpStream,
}

impl TcpManagerClient {
    pub fn connect(addr: &str) -> std::io::Result<Self> {
        Ok(Self { stream: TcpStream::connect(addr)? })
    }

    fn call(&mut self, req: Value) -> Result<Value> {
        write_frame(&mut self.stream, &req)
            .and_then(|()| read_frame(&mut self.stream))
            .map_err(|e| Error::Parse(format!("manager rpc failed: {e}")))
    }

    fn expect_ok(resp: Value) -> Result<Value> {
        if resp.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(resp)
        } else {
            let err = resp.get("detail").and_then(Value::as_str).unwrap_or("manager error");
            Err(Error::InvalidArgument(err.to_string()))
        }
    }
}

impl ManagerClient for TcpManagerClient {
    fn install_template(&mut self, body: &str) -> Result<String> {
        let resp = Self::expect_ok(self.call(json!({"op": "install_template", "body": body}))?)?;
        Ok(field_str(&resp, "templateId")?.to_string())
    }

    fn get_template(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<String> {
        let resp = Self::expect_ok(self.call(json!({
            "op": "get_template", "wId": w.0, "shuffleId": shuffle_id, "templateId": template_id,
        }))?)?;
        Ok(field_str(&resp, "body")?.to_string())
    }

    fn record_start(&mut self, w: WorkerId, shuffle_id: u64, template_id: &str) -> Result<()> {
        Self::expect_ok(self.call(json!({
            "op": "record_start", "wId": w.0, "shuffleId": shuffle_id, "templateId": template_id,
        }))?)?;
        Ok(())
    }

    fn record_end(&mut self, w: WorkerId, shuffle_id: u64) -> Result<()> {
        Self::expect_ok(
            self.call(json!({"op": "record_end", "wId": w.0, "shuffleId": shuffle_id}))?,
        )?;
        Ok(())
    }

    fn progress(&mut self, shuffle_id: u64) -> Result<BTreeMap<u32, WorkerStatus>> {
        let resp =
            Self::expect_ok(self.call(json!({"op": "progress", "shuffleId": shuffle_id}))?)?;
        let map = resp
            .get("status")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Parse("missing status map".into()))?;
        let mut out = BTreeMap::new();
        for (k, v) in map {
            let w: u32 = k.parse().map_err(|_| Error::Parse("bad worker id".into()))?;
            let status = match v.as_str() {
                Some("NOT_STARTED") => WorkerStatus::NotStarted,
                Some("IN_FLIGHT") => WorkerStatus::InFlight,
                Some("DONE") => WorkerStatus::Done,
                _ => return Err(Error::Parse("bad worker status".into())),
            };
            out.insert(w, status);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn install_get_round_trip() {
        let mut state = ManagerState::new();
        let body = teshu_core::algorithms::builtin_text("vanilla_push").unwrap();
        assert_eq!(state.install_template(&body).unwrap(), "vanilla_push");
        let fetched = state.get_template(3, 1, "vanilla_push").unwrap();
        assert_eq!(fetched, body);
        assert_eq!(state.records().len(), 1);
        assert_eq!(state.records()[0].kind, RecordKind::Start);
    }

    #[test]
    fn malformed_template_rejected() {
        let mut state = ManagerState::new();
        assert!(state.install_template("(template broken").is_err());
        assert!(state.template_ids().is_empty());
    }

    #[test]
    fn reinstall_replaces() {
        let mut state = ManagerState::new();
        state.install_template("(template t (sender) (receiver))").unwrap();
        let v2 = "(template t (sender (comb bufs)) (receiver))";
        state.install_template(v2).unwrap();
        assert_eq!(state.get_template(0, 1, "t").unwrap(), v2);
    }

    #[test]
    fn end_requires_start_and_is_unique() {
        let mut state = ManagerState::new();
        assert!(state.record_end(1, 7).is_err());
        state.record_start(1, 7, "t");
        state.record_end(1, 7).unwrap();
        assert!(state.record_end(1, 7).is_err());
        state.check_record_invariants().unwrap();
    }

    #[test]
    fn progress_states() {
        let mut state = ManagerState::new();
        assert!(state.progress(5).is_empty());
        state.record_start(0, 5, "t");
        state.record_start(1, 5, "t");
        state.record_end(0, 5).unwrap();
        let p = state.progress(5);
        assert_eq!(p[&0], WorkerStatus::Done);
        assert_eq!(p[&1], WorkerStatus::InFlight);
    }

    #[test]
    fn logical_clock_is_monotonic() {
        let mut state = ManagerState::new();
        for shuffle in 0..5 {
            state.record_start(0, shuffle, "t");
            state.record_end(0, shuffle).unwrap();
        }
        state.check_record_invariants().unwrap();
        let ts: Vec<u64> = state.records().iter().map(|r| r.timestamp).collect();
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn spill_writes_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        let mut state = ManagerState::new().with_spill(path.clone());
        state.record_start(2, 9, "t");
        state.record_end(2, 9).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<ShuffleRecord> =
            text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].kind, RecordKind::End);
    }

    #[test]
    fn unknown_template_maps_to_not_found() {
        let state = Mutex::new(ManagerState::new());
        let resp = handle_request(
            &state,
            &json!({"op": "get_template", "wId": 0, "shuffleId": 1, "templateId": "nope"}),
        );
        assert_eq!(resp["ok"], json!(false));
        assert_eq!(resp["err"], json!("not_found"));
    }

    #[test]
    fn frame_codec_round_trips() {
        let mut buf = Vec::new();
        let v = json!({"op": "progress", "shuffleId": 3});
        write_frame(&mut buf, &v).unwrap();
        assert_eq!(&buf[..4], &(buf.len() as u32 - 4).to_be_bytes());
        let back = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, v);
    }
}
