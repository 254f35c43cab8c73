//! Binary containers. Integers are little-endian `u32` unless noted.
//!
//! - `FMAP`: magic, version, `ndim`, `ndim` extents, then the `f32`
//!   little-endian payload in row-major order.
//! - `FSTK`: magic, version, layer count, image width, image height, then one
//!   `FMAP` record of shape `C × H × W` per layer, in layer order.
//! - `FCKP`: magic, version, step (`u64`), queue capacity, entry count, then
//!   per entry a name (`u32` byte length + UTF-8) and an `FMAP` record.
//!   Entries are the query, key and velocity head parameters plus an
//!   optional `queue` snapshot.

use std::path::Path;

use cyclecorr::features::{EncoderParams, FeatureMap, FeatureStack, HeadParams};
use cyclecorr::objectives::{NegativeQueue, TrainState};
use cyclecorr::{NamedTensors, Tensor};

use crate::error::{CliError, FormatError, Result};
use crate::fsio;

pub const VERSION: u32 = 1;
const MAX_NDIM: u32 = 8;
const QUEUE_ENTRY: &str = "queue";

type Parse<T> = std::result::Result<T, FormatError>;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Parse<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if n > rest {
            return Err(FormatError::Truncated {
                offset: self.pos,
                expected: n,
                actual: rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Parse<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Parse<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Parse<()> {
        let offset = self.pos;
        let found = self.take(4)?;
        if found != magic {
            return Err(FormatError::BadMagic {
                offset,
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let offset = self.pos;
        let version = self.u32()?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion {
                offset,
                expected: VERSION,
                found: version,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Parse<()> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(FormatError::TrailingBytes { offset: self.pos, extra }),
        }
    }

    fn tensor(&mut self) -> Parse<Tensor> {
        let start = self.pos;
        self.header(b"FMAP")?;
        let at = self.pos;
        let ndim = self.u32()?;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(FormatError::InvalidRecord {
                offset: at,
                detail: format!("ndim {ndim} outside 1..={MAX_NDIM}"),
            });
        }
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Parse<Vec<_>>>()?;
        let bytes = dims
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::InvalidRecord {
                offset: at,
                detail: format!("extents {dims:?} overflow"),
            })?;
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(dims, data).map_err(|e| FormatError::InvalidRecord {
            offset: start,
            detail: e.to_string(),
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(b"FMAP");
    put_u32(out, VERSION as usize);
    put_u32(out, t.dims().len());
    for &d in t.dims() {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.len());
    put_tensor(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Parse<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn encode_stack(stack: &FeatureStack) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"FSTK");
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, stack.layers.len());
    put_u32(&mut out, stack.image_dims.0 as usize);
    put_u32(&mut out, stack.image_dims.1 as usize);
    for layer in &stack.layers {
        put_tensor(&mut out, &layer.to_chw());
    }
    out
}

pub fn decode_stack(bytes: &[u8], source_id: &str) -> Parse<FeatureStack> {
    let mut r = Reader::new(bytes);
    r.header(b"FSTK")?;
    let count = r.u32()?;
    let image_dims = (r.u32()?, r.u32()?);
    let mut layers = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let t = r.tensor()?;
        let map = FeatureMap::from_chw(&t).map_err(|e| FormatError::InvalidRecord {
            offset: at,
            detail: e.to_string(),
        })?;
        layers.push(map);
    }
    r.finish()?;
    FeatureStack::new(layers, image_dims, source_id.to_string()).map_err(|e| {
        FormatError::InvalidRecord {
            offset: 0,
            detail: e.to_string(),
        }
    })
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut named = state.params.query.to_named("query.");
    named.extend(state.params.key.to_named("key."));
    named.extend(state.velocity.to_named("velocity."));
    if let Some(q) = state.queue.to_tensor() {
        named.insert(QUEUE_ENTRY.to_string(), q);
    }
    let mut out = Vec::new();
    out.extend_from_slice(b"FCKP");
    put_u32(&mut out, VERSION as usize);
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    put_u32(&mut out, state.queue.capacity());
    put_u32(&mut out, named.len());
    for (name, t) in &named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Parse<TrainState> {
    let mut r = Reader::new(bytes);
    r.header(b"FCKP")?;
    let step = r.u64()? as usize;
    let capacity = r.u32()? as usize;
    let count = r.u32()?;
    let mut named = NamedTensors::new();
    for _ in 0..count {
        let at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| FormatError::InvalidRecord {
            offset: at,
            detail: e.to_string(),
        })?;
        let name = name.to_string();
        named.insert(name, r.tensor()?);
    }
    r.finish()?;
    let invalid = |e: cyclecorr::Error| FormatError::InvalidRecord {
        offset: 0,
        detail: e.to_string(),
    };
    let params = EncoderParams {
        query: HeadParams::from_named(&named, "query.").map_err(invalid)?,
        key: HeadParams::from_named(&named, "key.").map_err(invalid)?,
    };
    let velocity = HeadParams::from_named(&named, "velocity.").map_err(invalid)?;
    let queue = match named.get(QUEUE_ENTRY) {
        Some(t) => NegativeQueue::from_tensor(capacity, t),
        None => NegativeQueue::new(capacity, params.query.shape().embed_dim),
    }
    .map_err(invalid)?;
    let mut state = TrainState::new(params, capacity).map_err(invalid)?;
    state.queue = queue;
    state.velocity = velocity;
    state.step = step;
    Ok(state)
}

fn parsed<T>(path: &Path, r: Parse<T>) -> Result<T> {
    r.map_err(|source| CliError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a stack; its id is the file stem.
pub fn load_stack(path: &Path) -> Result<FeatureStack> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parsed(path, decode_stack(&fsio::read(path)?, &id))
}

pub fn save_stack(path: &Path, stack: &FeatureStack) -> Result<()> {
    fsio::write_atomic(path, &encode_stack(stack))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    parsed(path, decode_tensor(&fsio::read(path)?))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fsio::write_atomic(path, &encode_tensor(t))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    parsed(path, decode_checkpoint(&fsio::read(path)?))
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cyclecorr::features::EncoderShape;

    fn stack() -> FeatureStack {
        let a = FeatureMap::new(2, 3, 4, (0..24).map(|v| v as f32 * 0.5).collect()).unwrap();
        let b = FeatureMap::new(3, 2, 2, (0..12).map(|v| -(v as f32)).collect()).unwrap();
        FeatureStack::new(vec![a, b], (32, 24), "s".into()).unwrap()
    }

    #[test]
    fn stack_layout() {
        let bytes = encode_stack(&stack());
        assert_eq!(&bytes[..4], b"FSTK");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(&bytes[20..24], b"FMAP");
        let back = decode_stack(&bytes, "s").unwrap();
        assert_eq!(back, stack());
    }

    #[test]
    fn truncation_names_offset_and_lengths() {
        let t = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let bytes = encode_tensor(&t);
        let cut = &bytes[..bytes.len() - 5];
        assert_eq!(
            decode_tensor(cut),
            Err(FormatError::Truncated { offset: 20, expected: 24, actual: 19 })
        );
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0).unwrap());
        bytes[4] = 2;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(FormatError::UnsupportedVersion { offset: 4, found: 2, .. })
        ));
        assert!(matches!(decode_stack(&bytes, "x"), Err(FormatError::BadMagic { offset: 0, .. })));
        let mut long = encode_tensor(&Tensor::scalar(1.0).unwrap());
        long.push(0);
        assert!(matches!(decode_tensor(&long), Err(FormatError::TrailingBytes { extra: 1, .. })));
    }

    #[test]
    fn rejects_non_finite_payload() {
        let mut bytes = encode_tensor(&Tensor::scalar(1.0).unwrap());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_tensor(&bytes), Err(FormatError::InvalidRecord { .. })));
    }

    #[test]
    fn checkpoint_keeps_queue_and_step() {
        let params = EncoderParams::random(EncoderShape::for_channels(5), 1);
        let mut state = TrainState::new(params, 4).unwrap();
        let d = state.queue.dim();
        let mut key = vec![0.0f32; d];
        key[0] = 1.0;
        state.queue.push(&[key]).unwrap();
        state.step = 17;
        let back = decode_checkpoint(&encode_checkpoint(&state)).unwrap();
        assert_eq!(back, state);
    }
}
