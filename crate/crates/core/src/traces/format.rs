//! The MOER binary trace format.
//!
//! All integers and floats are little-endian.
//!
//! | offset        | type              | field                                  |
//! |---------------|-------------------|----------------------------------------|
//! | 0             | `[u8; 4]`         | magic `"MOER"`                         |
//! | 4             | `u32`             | version, currently 1                   |
//! | 8             | `u32`             | `T`, token count                       |
//! | 12            | `u32`             | `L`, MoE layer count                   |
//! | 16            | `u32`             | `M`, experts per layer                 |
//! | 20            | `u32`             | `K`, top-K routing width               |
//! | 24            | `f32`             | `lambda`                               |
//! | 28            | `f32`             | `alpha`, NaN when absent               |
//! | 32            | `u32`             | `B`, batch count                       |
//! | 36            | `u32 × (B + 1)`   | batch offsets, `0 = o_0 < … < o_B = T` |
//! | 40 + 4B       | `f32 × T·L·M`     | gate logits, token-major, then layer, then expert |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result, TraceError};
use crate::traces::RoutingTrace;

pub const MAGIC: [u8; 4] = *b"MOER";
pub const VERSION: u32 = 1;
const HEADER_FIXED: usize = 36;

/// Serialize a trace to its exact MOER byte image.
pub fn encode(trace: &RoutingTrace) -> Vec<u8> {
    let offsets = trace.batch_offsets();
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * offsets.len() + 4 * trace.logits().len());
    out.extend_from_slice(&MAGIC);
    for v in [
        VERSION,
        trace.tokens() as u32,
        trace.layers() as u32,
        trace.experts() as u32,
        trace.top_k() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&trace.lambda().to_le_bytes());
    out.extend_from_slice(&trace.alpha().unwrap_or(f32::NAN).to_le_bytes());
    out.extend_from_slice(&((offsets.len() - 1) as u32).to_le_bytes());
    for &o in offsets {
        out.extend_from_slice(&(o as u32).to_le_bytes());
    }
    for &l in trace.logits() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8], TraceError> {
        let available = self.bytes.len().saturating_sub(self.pos);
        if available < n {
            return Err(TraceError::Truncated {
                field,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &'static str) -> Result<f32, TraceError> {
        Ok(f32::from_le_bytes(self.take(field, 4)?.try_into().unwrap()))
    }
}

fn inconsistent(field: &'static str, offset: usize, reason: impl Into<String>) -> TraceError {
    TraceError::Inconsistent {
        field,
        offset,
        reason: reason.into(),
    }
}

/// Parse and validate a MOER byte image.
pub fn decode(bytes: &[u8]) -> Result<RoutingTrace, TraceError> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take("magic", 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(TraceError::BadMagic { found: magic });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(TraceError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let tokens = c.u32("token_count")? as usize;
    let layers = c.u32("layer_count")? as usize;
    let experts_at = c.pos;
    let experts = c.u32("expert_count")? as usize;
    let top_k_at = c.pos;
    let top_k = c.u32("top_k")? as usize;
    let lambda_at = c.pos;
    let lambda = c.f32("lambda")?;
    let alpha = c.f32("alpha")?;
    let batch_count_at = c.pos;
    let batch_count = c.u32("batch_count")? as usize;

    if layers == 0 {
        return Err(inconsistent("layer_count", 12, "must be at least 1"));
    }
    if experts < 2 {
        return Err(inconsistent(
            "expert_count",
            experts_at,
            format!("{experts} < 2"),
        ));
    }
    if top_k == 0 || top_k > experts {
        return Err(inconsistent(
            "top_k",
            top_k_at,
            format!("{top_k} outside 1..={experts}"),
        ));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(inconsistent(
            "lambda",
            lambda_at,
            format!("{lambda} is not positive"),
        ));
    }
    if batch_count == 0 {
        return Err(inconsistent(
            "batch_count",
            batch_count_at,
            "must be at least 1",
        ));
    }

    let offsets_at = c.pos;
    let offsets_len = (batch_count + 1)
        .checked_mul(4)
        .ok_or_else(|| inconsistent("batch_count", batch_count_at, "overflows"))?;
    let raw = c.take("batch_offsets", offsets_len)?;
    let offsets: Vec<usize> = raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if offsets[0] != 0 {
        return Err(inconsistent(
            "batch_offsets",
            offsets_at,
            "first offset must be 0",
        ));
    }
    if let Some(i) = offsets.windows(2).position(|w| w[1] <= w[0]) {
        return Err(inconsistent(
            "batch_offsets",
            offsets_at + 4 * (i + 1),
            "offsets must be strictly increasing",
        ));
    }
    if *offsets.last().unwrap() != tokens {
        return Err(inconsistent(
            "batch_offsets",
            offsets_at + 4 * batch_count,
            format!(
                "last offset {} != token count {tokens}",
                offsets.last().unwrap()
            ),
        ));
    }

    let logits_at = c.pos;
    let count = tokens
        .checked_mul(layers)
        .and_then(|v| v.checked_mul(experts))
        .ok_or_else(|| inconsistent("token_count", 8, "T·L·M overflows"))?;
    let payload_len = count
        .checked_mul(4)
        .ok_or_else(|| inconsistent("token_count", 8, "payload size overflows"))?;
    let raw = c.take("logits", payload_len)?;
    if c.pos != bytes.len() {
        return Err(inconsistent(
            "logits",
            c.pos,
            format!("{} trailing bytes after payload", bytes.len() - c.pos),
        ));
    }
    let mut logits = Vec::with_capacity(count);
    for (i, b) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(b.try_into().unwrap());
        if !v.is_finite() {
            return Err(inconsistent(
                "logits",
                logits_at + 4 * i,
                "non-finite logit",
            ));
        }
        logits.push(v);
    }

    let alpha = (!alpha.is_nan()).then_some(alpha);
    RoutingTrace::new(experts, layers, top_k, lambda, alpha, logits, offsets)
        .map_err(|e| inconsistent("header", 0, e.to_string()))
}

pub fn write_trace<W: Write>(trace: &RoutingTrace, mut writer: W) -> Result<()> {
    writer
        .write_all(&encode(trace))
        .map_err(|e| Error::io("writing trace", e))
}

pub fn read_trace<R: Read>(mut reader: R) -> Result<RoutingTrace> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading trace", e))?;
    Ok(decode(&bytes)?)
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<RoutingTrace> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(decode(&bytes)?)
}

pub fn write_trace_file(trace: &RoutingTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(trace)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RoutingTrace {
        let logits = (0..3 * 2 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        RoutingTrace::new(4, 2, 2, 1.0, Some(0.01), logits, vec![0, 2, 3]).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny());
        assert_eq!(&bytes[..4], b"MOER");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 36 + 3 * 4 + 24 * 4);
    }

    #[test]
    fn absent_alpha_is_nan() {
        let t = tiny();
        let t = RoutingTrace::new(4, 2, 2, 1.0, None, t.logits().to_vec(), vec![0, 3]).unwrap();
        let bytes = encode(&t);
        assert!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()).is_nan());
        assert_eq!(decode(&bytes).unwrap().alpha(), None);
    }

    #[test]
    fn rejects_each_corruption_with_its_class() {
        let good = encode(&tiny());

        let mut b = good.clone();
        b[1] = b'X';
        assert!(matches!(decode(&b), Err(TraceError::BadMagic { .. })));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(
            decode(&b),
            Err(TraceError::UnsupportedVersion { found: 2, .. })
        ));

        let b = &good[..good.len() - 5];
        match decode(b) {
            Err(TraceError::Truncated {
                field: "logits",
                offset,
                ..
            }) => assert_eq!(offset, 48),
            other => panic!("{other:?}"),
        }

        assert!(matches!(
            decode(&good[..20]),
            Err(TraceError::Truncated {
                field: "top_k",
                offset: 20,
                ..
            })
        ));

        let mut b = good.clone();
        b[20] = 9; // K > M
        assert!(matches!(
            decode(&b),
            Err(TraceError::Inconsistent { field: "top_k", .. })
        ));

        let mut b = good.clone();
        b[40] = 7; // second offset beyond T
        assert!(matches!(
            decode(&b),
            Err(TraceError::Inconsistent {
                field: "batch_offsets",
                ..
            })
        ));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(
            decode(&b),
            Err(TraceError::Inconsistent {
                field: "logits",
                ..
            })
        ));

        let mut b = good;
        b[48..52].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            decode(&b),
            Err(TraceError::Inconsistent {
                field: "logits",
                offset: 48,
                ..
            })
        ));
    }
}
