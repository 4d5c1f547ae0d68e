//! Binary per-layer backbone activation files.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RETFEA1" | modality u8 (0 text, 1 vision) | layer_count u32 | source_dim u32
//! layer_count × ( tokens u32 | tokens×source_dim f32 )
//! ```
//!
//! Values are stored as `f32` and widened to `f64` on read.

use std::path::Path;

use crate::encoder::LayerStack;
use crate::error::{Error, Modality, Result};
use crate::index::Reader;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 7] = b"RETFEA1";

pub fn encode_feature_file(stack: &LayerStack) -> Vec<u8> {
    let dim = stack.source_dim();
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(stack.modality().to_byte());
    out.extend_from_slice(&(stack.depth() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for layer in stack.layers() {
        out.extend_from_slice(&(layer.rows() as u32).to_le_bytes());
        for &v in layer.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_feature_file(bytes: &[u8]) -> Result<LayerStack> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(FEATURE_MAGIC.len()).ok() != Some(&FEATURE_MAGIC[..]) {
        return Err(Error::BadMagic {
            expected: "RETFEA1",
        });
    }
    let mbyte = r.take(1)?[0];
    let modality = Modality::from_byte(mbyte)
        .ok_or_else(|| Error::Format(format!("unknown modality byte {mbyte}")))?;
    let depth = r.u32()?;
    let dim = r.u32()?;
    if depth == 0 || dim == 0 {
        return Err(Error::Format(format!(
            "feature header declares {depth} layers of width {dim}"
        )));
    }
    let mut layers = Vec::with_capacity(depth);
    for layer in 0..depth {
        let n = r.u32()?;
        if n == 0 {
            return Err(Error::EmptyModality(modality));
        }
        let raw = r.take(n * dim * 4)?;
        let mut data = Vec::with_capacity(n * dim);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("4-byte chunk"));
            if !v.is_finite() {
                return Err(Error::NonFiniteFeature {
                    layer,
                    row: i / dim,
                });
            }
            data.push(f64::from(v));
        }
        layers.push(Tensor::new(vec![n, dim], data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::SizeMismatch {
            expected: r.pos,
            actual: bytes.len(),
        });
    }
    LayerStack::new(modality, layers)
}

pub fn read_feature_file(path: &Path) -> Result<LayerStack> {
    decode_feature_file(&std::fs::read(path)?)
}

pub fn write_feature_file(path: &Path, stack: &LayerStack) -> Result<()> {
    std::fs::write(path, encode_feature_file(stack))?;
    Ok(())
}
