//! Serving a detector and reconstructor over the line protocol.

use std::io::{BufRead, Write};

use super::protocol::{decode_image, to_line, Request, RequestBody, Response, PROTOCOL_VERSION};
use super::{BackendError, Detector, ReconstructHint, Reconstructor};
use crate::geometry::PatchGrid;
use crate::grammar::ContainerFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    pub patch_size: u32,
    /// Reconstruct requests without hints assume the centered default frame.
    pub assume_centered_frame: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            patch_size: crate::geometry::DEFAULT_PATCH_SIZE,
            assume_centered_frame: true,
        }
    }
}

/// Answers requests from `input` until EOF or a shutdown request.
///
/// Per-request failures become error responses; only I/O failures on the
/// streams themselves end the loop with an error.
pub fn serve<R: BufRead, W: Write>(
    mut input: R,
    mut output: W,
    detector: &dyn Detector,
    reconstructor: &dyn Reconstructor,
    opts: ServeOptions,
) -> std::io::Result<()> {
    let mut shaken = false;
    let mut line = String::new();
    loop {
        line.clear();
        if input.read_line(&mut line)? == 0 {
            return Ok(());
        }
        if line.trim().is_empty() {
            continue;
        }
        let (response, stop) = match serde_json::from_str::<Request>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_u64()));
                (Response::error(id, format!("invalid request: {e}")), false)
            }
            Ok(req) => {
                let stop = matches!(req.body, RequestBody::Shutdown);
                let id = req.id;
                let resp = handle(req, &mut shaken, detector, reconstructor, opts)
                    .unwrap_or_else(|e| Response::error(Some(id), e.to_string()));
                (resp, stop)
            }
        };
        output.write_all(to_line(&response).as_bytes())?;
        output.flush()?;
        if stop {
            return Ok(());
        }
    }
}

fn handle(
    req: Request,
    shaken: &mut bool,
    detector: &dyn Detector,
    reconstructor: &dyn Reconstructor,
    opts: ServeOptions,
) -> Result<Response, BackendError> {
    let id = req.id;
    match req.body {
        RequestBody::Handshake {
            protocol_version, ..
        } => {
            if protocol_version != PROTOCOL_VERSION {
                return Err(BackendError::VersionMismatch {
                    expected: PROTOCOL_VERSION,
                    got: protocol_version,
                });
            }
            *shaken = true;
            Ok(Response::handshake(id, opts.patch_size))
        }
        RequestBody::Shutdown => Ok(Response::done(id)),
        _ if !*shaken => Err(BackendError::Protocol("handshake required first".into())),
        RequestBody::Detect { image } => {
            let img = decode_image(&image)?;
            Ok(Response::detections(id, detector.detect(&img)?))
        }
        RequestBody::Reconstruct {
            image,
            masked_patches,
            hints,
        } => {
            let img = decode_image(&image)?;
            let grid = PatchGrid::new(img.width(), img.height(), opts.patch_size)?;
            let hint = match hints {
                Some(h) => Some(h),
                None if opts.assume_centered_frame => Some(ReconstructHint::Framed {
                    frame: ContainerFrame::centered(img.width(), img.height())?,
                }),
                None => None,
            };
            let out = reconstructor.reconstruct(&img, &grid, &masked_patches, hint.as_ref())?;
            Ok(Response::image(id, &out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::protocol::{encode_image, Status};
    use crate::backends::{OracleDetector, OracleReconstructor};
    use crate::grammar::Grammar;
    use crate::render;

    fn run(input: &str) -> Vec<Response> {
        let g = Grammar::bundled("face").unwrap();
        let det = OracleDetector::new(&g).unwrap();
        let rec = OracleReconstructor::new(&g, 1).unwrap();
        let mut out = Vec::new();
        serve(input.as_bytes(), &mut out, &det, &rec, ServeOptions::default()).unwrap();
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn session_flow() {
        let img = encode_image(&render::background(32, 32, 2).unwrap());
        let input = format!(
            "{{\"id\":1,\"op\":\"detect\",\"image\":\"{img}\"}}\n\
             {{\"id\":2,\"op\":\"handshake\",\"protocol_version\":1,\"patch_size\":16,\"image_width\":32,\"image_height\":32}}\n\
             {{\"id\":3,\"op\":\"detect\",\"image\":\"{img}\"}}\n\
             {{\"id\":4,\"op\":\"reconstruct\",\"image\":\"{img}\",\"masked_patches\":[0,3]}}\n\
             {{\"id\":5,\"op\":\"reconstruct\",\"image\":\"{img}\",\"masked_patches\":[4]}}\n\
             garbage\n\
             {{\"id\":6,\"op\":\"shutdown\"}}\n\
             {{\"id\":7,\"op\":\"shutdown\"}}\n"
        );
        let r = run(&input);
        assert_eq!(r.len(), 7);
        assert_eq!(r[0].status, Status::Error);
        assert_eq!(r[1].patch_size, Some(16));
        assert_eq!(r[2].detections.as_deref(), Some(&[][..]));
        assert!(r[3].image.is_some());
        assert_eq!(r[4].status, Status::Error);
        assert_eq!((r[5].id, r[5].status), (None, Status::Error));
        assert_eq!((r[6].id, r[6].status), (Some(6), Status::Ok));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let r = run("{\"id\":1,\"op\":\"handshake\",\"protocol_version\":9,\"patch_size\":16,\"image_width\":32,\"image_height\":32}\n");
        assert_eq!(r[0].status, Status::Error);
        assert!(r[0].error.as_deref().unwrap().contains("got 9"));
    }
}
