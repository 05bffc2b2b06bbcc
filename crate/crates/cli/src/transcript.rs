//! Golden transcript replay against a backend process.
//!
//! A transcript is a JSON Lines file of `{"send": LINE}` and `{"expect": LINE}`
//! entries; lines starting with `#` are comments. Each `send` line is written
//! to the backend verbatim and each `expect` line is compared with the next
//! response byte for byte, except for two payloads that legitimately vary
//! between implementations:
//!
//! - `image`: must decode to an image with the request's dimensions that
//!   equals the request image outside the masked patches;
//! - `error`: must be a non-empty string.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use vissyn_core::backends::protocol::{decode_image, Request, RequestBody};
use vissyn_core::geometry::PatchGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Entry {
    Send(String),
    Expect(String),
}

pub fn parse(text: &str) -> anyhow::Result<Vec<Entry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("transcript line {}", i + 1)))
        .collect()
}

pub fn to_text(entries: &[Entry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("entries serialize"));
        out.push('\n');
    }
    out
}

/// A backend child process with line-level timeouts.
pub struct Session {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    timeout: Duration,
}

impl Session {
    pub fn spawn(program: &str, args: &[String], timeout: Duration) -> anyhow::Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .with_context(|| format!("cannot start `{program}`"))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines: rx,
            timeout,
        })
    }

    pub fn send(&mut self, line: &str) -> anyhow::Result<()> {
        let stdin = self.stdin.as_mut().ok_or_else(|| anyhow!("stdin is closed"))?;
        stdin.write_all(line.as_bytes())?;
        stdin.write_all(b"\n")?;
        stdin.flush()?;
        Ok(())
    }

    pub fn recv(&mut self) -> anyhow::Result<String> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(line) => Ok(line?),
            Err(RecvTimeoutError::Timeout) => bail!("no response within {:?}", self.timeout),
            Err(RecvTimeoutError::Disconnected) => bail!("backend closed its output"),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stdin.take();
        if !matches!(self.child.try_wait(), Ok(Some(_))) {
            std::thread::sleep(Duration::from_millis(50));
            if !matches!(self.child.try_wait(), Ok(Some(_))) {
                let _ = self.child.kill();
            }
        }
        let _ = self.child.wait();
    }
}

/// Sends every `send` line and records the responses as `expect` lines.
pub fn record(session: &mut Session, sends: &[String]) -> anyhow::Result<Vec<Entry>> {
    let mut out = Vec::new();
    for s in sends {
        session.send(s)?;
        out.push(Entry::Send(s.clone()));
        out.push(Entry::Expect(session.recv()?));
    }
    Ok(out)
}

/// Replays `entries`; returns one message per mismatch (empty means conformant).
pub fn replay(session: &mut Session, entries: &[Entry]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut last_request: Option<Request> = None;
    let mut patch_size = None;
    for (n, e) in entries.iter().enumerate() {
        match e {
            Entry::Send(line) => {
                last_request = serde_json::from_str(line).ok();
                if let Err(err) = session.send(line) {
                    problems.push(format!("entry {n}: send failed: {err}"));
                    return problems;
                }
            }
            Entry::Expect(want) => {
                let got = match session.recv() {
                    Ok(g) => g,
                    Err(err) => {
                        problems.push(format!("entry {n}: {err}"));
                        return problems;
                    }
                };
                if let Some(Request {
                    body: RequestBody::Handshake { patch_size: p, .. },
                    ..
                }) = &last_request
                {
                    patch_size = Some(*p);
                }
                if let Err(err) = compare(want, &got, last_request.as_ref(), patch_size) {
                    problems.push(format!("entry {n}: {err:#}"));
                }
            }
        }
    }
    problems
}

fn compare(want: &str, got: &str, request: Option<&Request>, patch_size: Option<u32>) -> anyhow::Result<()> {
    let want_v: Value = serde_json::from_str(want).context("golden response is not JSON")?;
    let got_v: Value = serde_json::from_str(got).with_context(|| format!("response is not JSON: {}", clip(got)))?;
    if want_v.get("error").is_some() {
        match got_v.get("error") {
            Some(Value::String(s)) if !s.is_empty() => {}
            _ => bail!("expected a non-empty error message, got {}", clip(got)),
        }
    }
    if want_v.get("image").is_some() {
        let text = got_v
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| anyhow!("expected an image, got {}", clip(got)))?;
        check_image(text, request, patch_size)?;
    }
    let (w, g) = (strip_fields(want), strip_fields(got));
    if w != g {
        bail!("response differs\n  want {}\n  got  {}", clip(&w), clip(&g));
    }
    Ok(())
}

fn check_image(text: &str, request: Option<&Request>, patch_size: Option<u32>) -> anyhow::Result<()> {
    let out = decode_image(text)?;
    let Some(Request {
        body: RequestBody::Reconstruct {
            image, masked_patches, ..
        },
        ..
    }) = request
    else {
        bail!("image response to a request that is not reconstruct");
    };
    let input = decode_image(image)?;
    if (out.width(), out.height()) != (input.width(), input.height()) {
        bail!(
            "reconstruction is {}x{}, input is {}x{}",
            out.width(),
            out.height(),
            input.width(),
            input.height()
        );
    }
    let p = patch_size.ok_or_else(|| anyhow!("reconstruct before handshake"))?;
    let grid = PatchGrid::new(input.width(), input.height(), p)?;
    for y in 0..input.height() {
        for x in 0..input.width() {
            let patch = grid.index(y / p, x / p);
            if !masked_patches.contains(&patch) && out.get(x, y) != input.get(x, y) {
                bail!("pixel ({x}, {y}) outside the masked patches changed");
            }
        }
    }
    Ok(())
}

/// Drops the `image` and `error` members from a compact JSON object line.
fn strip_fields(line: &str) -> String {
    let mut s = line.trim_end().to_owned();
    for key in ["image", "error"] {
        let pat = format!(",\"{key}\":\"");
        if let Some(start) = s.find(&pat) {
            let body = start + pat.len();
            let mut end = body;
            let bytes = s.as_bytes();
            while end < bytes.len() {
                match bytes[end] {
                    b'\\' => end += 2,
                    b'"' => break,
                    _ => end += 1,
                }
            }
            s.replace_range(start..(end + 1).min(s.len()), "");
        }
    }
    s
}

fn clip(s: &str) -> String {
    const MAX: usize = 300;
    if s.len() <= MAX {
        return s.to_owned();
    }
    let mut cut = MAX;
    while !s.is_char_boundary(cut) {
        cut -= 1;
    }
    format!("{}...", &s[..cut])
}
