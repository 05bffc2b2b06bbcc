//! Client for a backend running as a child process.
//!
//! The child reads requests on stdin and writes responses on stdout, one JSON
//! object per line (see [`super::protocol`]). Its stderr is inherited. A
//! session is started lazily, handshaken, and replaced after any failure that
//! may leave the stream out of step (timeouts, malformed lines, exits).

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::oracle::check_grid;
use super::protocol::{
    decode_image, encode_image, to_line, Request, RequestBody, Response, Status, PROTOCOL_VERSION,
};
use super::{BackendError, Detector, ReconstructHint, Reconstructor};
use crate::geometry::{Detection, PatchGrid, DEFAULT_PATCH_SIZE};
use crate::raster::RasterImage;

pub const DEFAULT_TIMEOUT_SECS: f64 = 60.0;
const MAX_QUOTED_BYTES: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_patch")]
    pub patch_size: u32,
    #[serde(default = "default_side")]
    pub image_width: u32,
    #[serde(default = "default_side")]
    pub image_height: u32,
    /// Send frame hints with reconstruct requests. Off by default: a learned
    /// reconstructor is expected to infer the object itself.
    #[serde(default)]
    pub forward_hints: bool,
}

fn default_timeout() -> f64 {
    DEFAULT_TIMEOUT_SECS
}
fn default_patch() -> u32 {
    DEFAULT_PATCH_SIZE
}
fn default_side() -> u32 {
    crate::synth::DEFAULT_IMAGE_SIZE
}

impl ExternalConfig {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
            timeout_secs: DEFAULT_TIMEOUT_SECS,
            patch_size: DEFAULT_PATCH_SIZE,
            image_width: default_side(),
            image_height: default_side(),
            forward_hints: false,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs.max(0.0))
    }
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<Vec<u8>>>,
    next_id: u64,
}

impl Drop for Session {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct ExternalBackend {
    config: ExternalConfig,
    session: Mutex<Option<Session>>,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend").field("config", &self.config).finish()
    }
}

impl ExternalBackend {
    /// A backend that starts its process on first use.
    pub fn new(config: ExternalConfig) -> Self {
        Self {
            config,
            session: Mutex::new(None),
        }
    }

    /// Starts the process and completes the handshake now.
    pub fn connect(config: ExternalConfig) -> Result<Self, BackendError> {
        let backend = Self::new(config);
        let session = backend.start()?;
        *backend.session.lock().expect("session lock") = Some(session);
        Ok(backend)
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn start(&self) -> Result<Session, BackendError> {
        let mut child = Command::new(&self.config.program)
            .args(&self.config.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(BackendError::Spawn)?;
        let stdin = child.stdin.take().expect("stdin is piped");
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut buf = Vec::new();
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) => return,
                    Ok(_) => {
                        if tx.send(Ok(buf)).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
            }
        });
        let mut session = Session {
            child,
            stdin,
            lines: rx,
            next_id: 0,
        };
        let resp = self.exchange(
            &mut session,
            RequestBody::Handshake {
                protocol_version: PROTOCOL_VERSION,
                patch_size: self.config.patch_size,
                image_width: self.config.image_width,
                image_height: self.config.image_height,
            },
        )?;
        let got = resp
            .protocol_version
            .ok_or_else(|| BackendError::Protocol("handshake response lacks `protocol_version`".into()))?;
        if got != PROTOCOL_VERSION {
            return Err(BackendError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                got,
            });
        }
        if let Some(p) = resp.patch_size {
            if p != self.config.patch_size {
                return Err(BackendError::Protocol(format!(
                    "backend uses patch size {p}, expected {}",
                    self.config.patch_size
                )));
            }
        }
        Ok(session)
    }

    /// Sends one request and waits for its response.
    fn exchange(&self, s: &mut Session, body: RequestBody) -> Result<Response, BackendError> {
        let id = s.next_id;
        s.next_id += 1;
        let op = body.op();
        let line = to_line(&Request { id, body });
        if s.stdin.write_all(line.as_bytes()).and_then(|_| s.stdin.flush()).is_err() {
            return Err(exited(s));
        }
        let raw = match s.lines.recv_timeout(self.config.timeout()) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(BackendError::Io(e)),
            Err(RecvTimeoutError::Timeout) => {
                return Err(BackendError::Timeout {
                    op: op.to_owned(),
                    seconds: self.config.timeout_secs,
                })
            }
            Err(RecvTimeoutError::Disconnected) => return Err(exited(s)),
        };
        let resp = parse_response(&raw)?;
        if resp.status == Status::Error && (resp.id.is_none() || resp.id == Some(id)) {
            return Err(BackendError::Remote(resp.error.unwrap_or_else(|| "unspecified error".into())));
        }
        if resp.id != Some(id) {
            return Err(BackendError::Protocol(format!(
                "response id {:?} does not match request id {id}",
                resp.id
            )));
        }
        Ok(resp)
    }

    fn call(&self, body: RequestBody) -> Result<Response, BackendError> {
        let mut guard = self.session.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.start()?);
        }
        let session = guard.as_mut().expect("session just started");
        let result = self.exchange(session, body);
        if let Err(e) = &result {
            // a remote error leaves the stream in step; anything else may not
            if !matches!(e, BackendError::Remote(_)) {
                *guard = None;
            }
        }
        result
    }
}

fn exited(s: &mut Session) -> BackendError {
    let status = s
        .child
        .wait_timeout_ms(200)
        .map(|st| st.to_string());
    BackendError::Exited { status }
}

trait WaitTimeout {
    fn wait_timeout_ms(&mut self, ms: u64) -> Option<std::process::ExitStatus>;
}

impl WaitTimeout for Child {
    fn wait_timeout_ms(&mut self, ms: u64) -> Option<std::process::ExitStatus> {
        for _ in 0..ms / 10 {
            if let Ok(Some(st)) = self.try_wait() {
                return Some(st);
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.try_wait().ok().flatten()
    }
}

fn parse_response(raw: &[u8]) -> Result<Response, BackendError> {
    let quoted = || {
        let end = raw.len().min(MAX_QUOTED_BYTES);
        String::from_utf8_lossy(&raw[..end]).trim_end().to_owned()
    };
    let text = std::str::from_utf8(raw).map_err(|e| BackendError::Malformed {
        line: quoted(),
        message: format!("not UTF-8: {e}"),
    })?;
    serde_json::from_str(text.trim_end()).map_err(|e| BackendError::Malformed {
        line: quoted(),
        message: e.to_string(),
    })
}

impl Detector for ExternalBackend {
    fn detect(&self, image: &RasterImage) -> Result<Vec<Detection>, BackendError> {
        let resp = self.call(RequestBody::Detect {
            image: encode_image(image),
        })?;
        resp.detections
            .ok_or_else(|| BackendError::Protocol("detect response lacks `detections`".into()))
    }
}

impl Reconstructor for ExternalBackend {
    fn reconstruct(
        &self,
        image: &RasterImage,
        grid: &PatchGrid,
        masked: &[usize],
        hint: Option<&ReconstructHint>,
    ) -> Result<RasterImage, BackendError> {
        check_grid(image, grid)?;
        if grid.patch_size() != self.config.patch_size {
            return Err(BackendError::Protocol(format!(
                "grid patch size {} differs from the backend's {}",
                grid.patch_size(),
                self.config.patch_size
            )));
        }
        let resp = self.call(RequestBody::Reconstruct {
            image: encode_image(image),
            masked_patches: masked.to_vec(),
            hints: hint.filter(|_| self.config.forward_hints).cloned(),
        })?;
        let text = resp
            .image
            .ok_or_else(|| BackendError::Protocol("reconstruct response lacks `image`".into()))?;
        let out = decode_image(&text)?;
        check_grid(&out, grid)?;
        Ok(out)
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use std::time::Instant;

    const HANDSHAKE_OK: &str = r#"{"id":0,"status":"ok","protocol_version":1,"patch_size":16}"#;

    fn sh(script: &str) -> ExternalConfig {
        let mut c = ExternalConfig::new("sh", vec!["-c".into(), script.into()]);
        c.timeout_secs = 2.0;
        c
    }

    fn image() -> RasterImage {
        RasterImage::filled(32, 32, [120, 120, 120]).unwrap()
    }

    #[test]
    fn detections_are_returned() {
        let script = format!(
            "read l; echo '{HANDSHAKE_OK}'; read l; \
             echo '{{\"id\":1,\"status\":\"ok\",\"detections\":[{{\"label\":\"nose\",\"box\":[1,2,3,4],\"score\":0.5}}]}}'; \
             read l"
        );
        let b = ExternalBackend::connect(sh(&script)).unwrap();
        let d = b.detect(&image()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label.as_str(), "nose");
    }

    #[test]
    fn timeout_is_reported_and_bounded() {
        let script = format!("read l; echo '{HANDSHAKE_OK}'; read l; sleep 30");
        let mut cfg = sh(&script);
        cfg.timeout_secs = 0.3;
        let b = ExternalBackend::connect(cfg).unwrap();
        let t = Instant::now();
        let err = b.detect(&image()).unwrap_err();
        assert!(matches!(err, BackendError::Timeout { .. }), "{err}");
        assert!(t.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn malformed_line_is_quoted() {
        let script = format!("read l; echo '{HANDSHAKE_OK}'; read l; echo 'this is not json'; read l");
        let b = ExternalBackend::connect(sh(&script)).unwrap();
        match b.detect(&image()).unwrap_err() {
            BackendError::Malformed { line, .. } => assert_eq!(line, "this is not json"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn version_mismatch_refuses_session() {
        let script = r#"read l; echo '{"id":0,"status":"ok","protocol_version":2,"patch_size":16}'; read l"#;
        match ExternalBackend::connect(sh(script)).unwrap_err() {
            BackendError::VersionMismatch { expected: 1, got: 2 } => {}
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn patch_size_mismatch_refuses_session() {
        let script = r#"read l; echo '{"id":0,"status":"ok","protocol_version":1,"patch_size":8}'; read l"#;
        assert!(ExternalBackend::connect(sh(script)).is_err());
    }

    #[test]
    fn exit_is_reported() {
        let script = format!("read l; echo '{HANDSHAKE_OK}'; exit 3");
        let b = ExternalBackend::connect(sh(&script)).unwrap();
        let err = b.detect(&image()).unwrap_err();
        assert!(matches!(err, BackendError::Exited { .. }), "{err}");
    }

    #[test]
    fn remote_errors_pass_through() {
        let script = format!(
            "read l; echo '{HANDSHAKE_OK}'; read l; echo '{{\"id\":1,\"status\":\"error\",\"error\":\"out of memory\"}}'; read l"
        );
        let b = ExternalBackend::connect(sh(&script)).unwrap();
        let err = b.detect(&image()).unwrap_err();
        assert_eq!(err.to_string(), "backend reported error: out of memory");
    }

    #[test]
    fn missing_program_fails_to_spawn() {
        let cfg = ExternalConfig::new("/nonexistent/backend-binary", vec![]);
        assert!(matches!(ExternalBackend::connect(cfg), Err(BackendError::Spawn(_))));
    }

    #[test]
    fn reconstruct_checks_returned_size() {
        let small = encode_image(&RasterImage::filled(16, 16, [0, 0, 0]).unwrap());
        let script = format!(
            "read l; echo '{HANDSHAKE_OK}'; read l; echo '{{\"id\":1,\"status\":\"ok\",\"image\":\"{small}\"}}'; read l"
        );
        let b = ExternalBackend::connect(sh(&script)).unwrap();
        let grid = PatchGrid::new(32, 32, 16).unwrap();
        let err = b.reconstruct(&image(), &grid, &[0], None).unwrap_err();
        assert!(matches!(err, BackendError::Dimensions { .. }), "{err}");
    }
}
