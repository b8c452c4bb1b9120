//! Wire formats: JSON poses in, binary frames out.

use serde::{Deserialize, Serialize};
use splatforge::gaussians::{quat_normalize, quat_to_rotation, rotation_to_quat, Camera, GaussianError};
use splatforge::Vec3;
use thiserror::Error;

pub const FRAME_MAGIC: &[u8; 4] = b"FRM1";
/// Magic, sequence, width, height, mode, render and preprocess micros.
pub const FRAME_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 1 + 8 + 8;
pub const MIN_SIDE: u32 = 64;
pub const MAX_SIDE: u32 = 4096;
/// Accepted deviation from unit norm before renormalizing.
pub const UNIT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed pose: {0}")]
    Json(#[from] serde_json::Error),
    #[error("quaternion norm {norm} is not within {UNIT_TOLERANCE} of 1")]
    Quaternion { norm: f64 },
    #[error("light_dir norm {norm} is not within {UNIT_TOLERANCE} of 1")]
    LightDir { norm: f64 },
    #[error("image size {width}x{height} outside [{MIN_SIDE}, {MAX_SIDE}]")]
    Size { width: u32, height: u32 },
    #[error("non-finite or non-positive {0}")]
    Value(&'static str),
    #[error(transparent)]
    Camera(#[from] GaussianError),
    #[error("frame: {0}")]
    Frame(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    #[default]
    Rgb,
    Normal,
    Relit,
}

impl FrameMode {
    pub fn code(self) -> u8 {
        match self {
            FrameMode::Rgb => 0,
            FrameMode::Normal => 1,
            FrameMode::Relit => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(FrameMode::Rgb),
            1 => Some(FrameMode::Normal),
            2 => Some(FrameMode::Relit),
            _ => None,
        }
    }
}

impl std::str::FromStr for FrameMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rgb" => Ok(FrameMode::Rgb),
            "normal" => Ok(FrameMode::Normal),
            "relit" => Ok(FrameMode::Relit),
            other => Err(format!("unknown mode {other:?} (expected rgb, normal or relit)")),
        }
    }
}

/// A camera pose: world-to-camera rotation as a `(w, x, y, z)` quaternion,
/// world-to-camera translation, focal lengths in pixels and image size. The
/// principal point is the image center. This is also the camera file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub mode: FrameMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub light_dir: Option<[f64; 3]>,
}

/// A pose sent by a client; `sequence` is echoed in the answering frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMessage {
    #[serde(flatten)]
    pub pose: CameraPose,
    pub sequence: u32,
}

fn renormalize(v: &[f64], what: fn(f64) -> ProtocolError) -> Result<Vec<f64>> {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(what(norm));
    }
    // Within rounding of unit length, keep the input so parsing is idempotent.
    if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|c| c / norm).collect())
}

impl CameraPose {
    /// Checks the invariants and renormalizes the quaternion and light direction.
    pub fn validated(mut self) -> Result<Self> {
        let q = renormalize(&self.quaternion, |norm| ProtocolError::Quaternion { norm })?;
        self.quaternion = [q[0], q[1], q[2], q[3]];
        if let Some(l) = self.light_dir {
            let l = renormalize(&l, |norm| ProtocolError::LightDir { norm })?;
            self.light_dir = Some([l[0], l[1], l[2]]);
        }
        let sides = MIN_SIDE..=MAX_SIDE;
        if !sides.contains(&self.width) || !sides.contains(&self.height) {
            return Err(ProtocolError::Size {
                width: self.width,
                height: self.height,
            });
        }
        if !(self.fx > 0.0 && self.fx.is_finite() && self.fy > 0.0 && self.fy.is_finite()) {
            return Err(ProtocolError::Value("focal length"));
        }
        if !self.translation.iter().all(|t| t.is_finite()) {
            return Err(ProtocolError::Value("translation"));
        }
        Ok(self)
    }

    /// Parses and validates a camera file.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str::<Self>(text)?.validated()
    }

    pub fn camera(&self) -> Result<Camera> {
        let q = quat_normalize(self.quaternion)?;
        let (w, h) = (self.width as usize, self.height as usize);
        Ok(Camera::new(
            quat_to_rotation(q),
            Vec3::from(self.translation),
            self.fx,
            self.fy,
            w as f64 / 2.0,
            h as f64 / 2.0,
            w,
            h,
        )?)
    }

    /// Pose of an existing camera, assuming a centered principal point.
    pub fn from_camera(cam: &Camera, mode: FrameMode, light_dir: Option<[f64; 3]>) -> Self {
        let t = cam.translation;
        Self {
            quaternion: rotation_to_quat(&cam.rotation),
            translation: [t.x, t.y, t.z],
            fx: cam.fx,
            fy: cam.fy,
            width: cam.width as u32,
            height: cam.height as u32,
            mode,
            light_dir,
        }
    }
}

impl PoseMessage {
    pub fn parse(text: &str) -> Result<Self> {
        let msg: Self = serde_json::from_str(text)?;
        Ok(Self {
            pose: msg.pose.validated()?,
            sequence: msg.sequence,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("pose serializes")
    }
}

/// Text frame sent back for a message the server could not act on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<u32>,
}

impl ErrorMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }
}

/// One rendered frame. Integers are little-endian; the payload is RGBA8,
/// row-major, `width · height · 4` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMessage {
    pub sequence: u32,
    pub width: u32,
    pub height: u32,
    pub mode: FrameMode,
    pub render_micros: u64,
    pub preprocess_micros: u64,
    pub rgba: Vec<u8>,
}

impl FrameMessage {
    pub fn encode(&self) -> Vec<u8> {
        debug_assert_eq!(self.rgba.len(), self.width as usize * self.height as usize * 4);
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.rgba.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&self.sequence.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.mode.code());
        out.extend_from_slice(&self.render_micros.to_le_bytes());
        out.extend_from_slice(&self.preprocess_micros.to_le_bytes());
        out.extend_from_slice(&self.rgba);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| ProtocolError::Frame(m);
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != FRAME_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let (sequence, width, height) = (u32_at(4), u32_at(8), u32_at(12));
        let mode = FrameMode::from_code(bytes[16]).ok_or_else(|| bad(format!("mode code {}", bytes[16])))?;
        let payload = &bytes[FRAME_HEADER_LEN..];
        let expected = width as usize * height as usize * 4;
        if payload.len() != expected {
            return Err(bad(format!("payload has {} bytes, expected {expected}", payload.len())));
        }
        Ok(Self {
            sequence,
            width,
            height,
            mode,
            render_micros: u64_at(17),
            preprocess_micros: u64_at(25),
            rgba: payload.to_vec(),
        })
    }
}
