//! Line-delimited JSON messages exchanged with external backends.
//!
//! Each request and each response is one UTF-8 JSON object on one line.
//! Images travel as base64-encoded binary PPM (`P6`).

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{BackendError, ReconstructHint};
use crate::geometry::Detection;
use crate::raster::RasterImage;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    #[serde(flatten)]
    pub body: RequestBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RequestBody {
    Handshake {
        protocol_version: u32,
        patch_size: u32,
        image_width: u32,
        image_height: u32,
    },
    Detect {
        image: String,
    },
    Reconstruct {
        image: String,
        masked_patches: Vec<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hints: Option<ReconstructHint>,
    },
    Shutdown,
}

impl RequestBody {
    pub fn op(&self) -> &'static str {
        match self {
            RequestBody::Handshake { .. } => "handshake",
            RequestBody::Detect { .. } => "detect",
            RequestBody::Reconstruct { .. } => "reconstruct",
            RequestBody::Shutdown => "shutdown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

/// A response; which payload field is present depends on the request's `op`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Absent only when the request line could not be parsed at all.
    pub id: Option<u64>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_version: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl Response {
    fn ok(id: u64) -> Self {
        Self {
            id: Some(id),
            status: Status::Ok,
            error: None,
            protocol_version: None,
            patch_size: None,
            detections: None,
            image: None,
        }
    }

    pub fn handshake(id: u64, patch_size: u32) -> Self {
        Self {
            protocol_version: Some(PROTOCOL_VERSION),
            patch_size: Some(patch_size),
            ..Self::ok(id)
        }
    }

    pub fn detections(id: u64, detections: Vec<Detection>) -> Self {
        Self {
            detections: Some(detections),
            ..Self::ok(id)
        }
    }

    pub fn image(id: u64, image: &RasterImage) -> Self {
        Self {
            image: Some(encode_image(image)),
            ..Self::ok(id)
        }
    }

    pub fn done(id: u64) -> Self {
        Self::ok(id)
    }

    pub fn error(id: Option<u64>, message: impl Into<String>) -> Self {
        Self {
            id,
            status: Status::Error,
            error: Some(message.into()),
            protocol_version: None,
            patch_size: None,
            detections: None,
            image: None,
        }
    }
}

pub fn encode_image(image: &RasterImage) -> String {
    STANDARD.encode(image.to_ppm())
}

pub fn decode_image(text: &str) -> Result<RasterImage, BackendError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| BackendError::Protocol(format!("image is not valid base64: {e}")))?;
    Ok(RasterImage::from_ppm(&bytes)?)
}

/// Serializes a message as one line, newline included.
pub fn to_line<T: Serialize>(msg: &T) -> String {
    let mut s = serde_json::to_string(msg).expect("protocol messages serialize");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::grammar::ContainerFrame;

    #[test]
    fn request_wire_shape() {
        let r = Request {
            id: 3,
            body: RequestBody::Reconstruct {
                image: "AAAA".into(),
                masked_patches: vec![1, 2],
                hints: Some(ReconstructHint::Framed {
                    frame: ContainerFrame::centered(224, 224).unwrap(),
                }),
            },
        };
        let line = to_line(&r);
        assert_eq!(
            line,
            "{\"id\":3,\"op\":\"reconstruct\",\"image\":\"AAAA\",\"masked_patches\":[1,2],\
             \"hints\":{\"layout\":\"framed\",\"frame\":[32.0,32.0,192.0,192.0]}}\n"
        );
        let back: Request = serde_json::from_str(&line).unwrap();
        assert_eq!(back, r);
        let h: Request = serde_json::from_str(
            r#"{"id":0,"op":"handshake","protocol_version":1,"patch_size":16,"image_width":224,"image_height":224}"#,
        )
        .unwrap();
        assert_eq!(h.body.op(), "handshake");
    }

    #[test]
    fn response_wire_shape() {
        let d = Detection::new("nose", BBox::new(1.0, 2.0, 3.0, 4.0).unwrap(), 0.5).unwrap();
        assert_eq!(
            to_line(&Response::detections(7, vec![d])),
            "{\"id\":7,\"status\":\"ok\",\"detections\":[{\"label\":\"nose\",\"box\":[1.0,2.0,3.0,4.0],\"score\":0.5}]}\n"
        );
        assert_eq!(
            to_line(&Response::error(None, "bad")),
            "{\"id\":null,\"status\":\"error\",\"error\":\"bad\"}\n"
        );
    }

    #[test]
    fn image_round_trip() {
        let img = RasterImage::filled(3, 2, [1, 2, 3]).unwrap();
        assert_eq!(decode_image(&encode_image(&img)).unwrap(), img);
        assert!(decode_image("not base64!").is_err());
    }
}
