use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::PoseSequence;

pub const SEQUENCE_LAYOUT: &str = "frame-major TxJx3";
pub const SEQUENCE_DTYPE: &str = "f32le";

/// JSON sidecar describing a raw little-endian f32 position file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceHeader {
    pub joints: usize,
    pub frames: usize,
    pub layout: String,
    pub dtype: String,
}

/// The binary file paired with a sidecar: same stem, `.bin` extension.
pub fn binary_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("bin")
}

/// Writes `<stem>.json` and `<stem>.bin`; `path` names the sidecar.
pub fn write_sequence(path: impl AsRef<Path>, seq: &PoseSequence<f64>) -> Result<()> {
    let path = path.as_ref();
    let header = SequenceHeader {
        joints: seq.joints(),
        frames: seq.frames(),
        layout: SEQUENCE_LAYOUT.into(),
        dtype: SEQUENCE_DTYPE.into(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
    let bytes: Vec<u8> = seq.as_slice().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    std::fs::write(binary_path(path), bytes)?;
    Ok(())
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<PoseSequence<f64>> {
    let path = path.as_ref();
    let header: SequenceHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if header.layout != SEQUENCE_LAYOUT || header.dtype != SEQUENCE_DTYPE {
        return Err(Error::Config(format!(
            "unsupported sequence layout {:?} / dtype {:?}",
            header.layout, header.dtype
        )));
    }
    let bytes = std::fs::read(binary_path(path))?;
    let want = header.frames * header.joints * 3 * 4;
    if bytes.len() != want {
        return Err(Error::Shape {
            op: "read_sequence",
            detail: format!("expected {want} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    PoseSequence::new(header.frames, header.joints, data)
}

/// One row per frame and joint: `frame,joint,x,y,z`.
pub fn write_csv(seq: &PoseSequence<f64>, mut w: impl Write) -> Result<()> {
    writeln!(w, "frame,joint,x,y,z")?;
    for t in 0..seq.frames() {
        for j in 0..seq.joints() {
            let p = seq.get(t, j);
            writeln!(w, "{t},{j},{},{},{}", p[0], p[1], p[2])?;
        }
    }
    Ok(())
}
