//! Binary weight checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! 8 bytes   magic  b"UEDPOCKP"
//! u32       format version (1)
//! u64 x 3   feature layout: image_dim, vocab_size, window
//! u64 x 2   weight shape: rows, cols
//! f64 x rows*cols   weights, row-major
//! ```

use std::path::Path;

use crate::error::{LabError, Result};
use crate::toy_policy::{FeatureLayout, Matrix, PolicyParams};

pub const MAGIC: &[u8; 8] = b"UEDPOCKP";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 5 * 8;

pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let l = params.layout();
    let w = params.weights();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * w.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [l.image_dim, l.vocab_size, l.window, w.rows(), w.cols()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for x in w.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    let bad = |detail: String| LabError::Format {
        what: "checkpoint".into(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 12 + 8 * i;
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        *d = usize::try_from(v).map_err(|_| bad(format!("dimension {v} too large")))?;
    }
    let [image_dim, vocab_size, window, rows, cols] = dims;
    let count = rows
        .checked_mul(cols)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| bad("weight shape overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * count {
        return Err(bad(format!(
            "expected {} weight bytes for {rows}x{cols}, found {}",
            8 * count,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layout = FeatureLayout::new(image_dim, vocab_size, window)?;
    PolicyParams::new(layout, Matrix::from_vec(rows, cols, data)?)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        LabError::Format { detail, .. } => LabError::Format {
            what: format!("checkpoint {}", path.display()),
            detail,
        },
        other => other,
    })
}
