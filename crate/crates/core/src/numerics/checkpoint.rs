//! Versioned binary container for parameter stores.
//!
//! ```text
//! "FFCN" | version: u32 | entry count: u32 |
//!   per entry: path length: u32 | path bytes | dtype: u8 | rank: u32 |
//!              extents: u64 × rank | little-endian values
//! ```
//!
//! All integers are little-endian. Optimizer state lives under reserved
//! paths: `opt/step` (one u64) and `opt/velocity/<param path>`. Free-form
//! metadata (run configuration, class table) lives under `meta/` as raw
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::{DType, ParameterStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FFCN";
pub const FORMAT_VERSION: u32 = 1;

const STEP_PATH: &str = "opt/step";
const VELOCITY_PREFIX: &str = "opt/velocity/";
const META_PREFIX: &str = "meta/";

/// Metadata entries stored next to the parameters, keyed without the
/// `meta/` prefix.
pub type Meta = BTreeMap<String, Vec<u8>>;

fn put_header(out: &mut Vec<u8>, path: &str, dtype: DType, shape: &[usize]) {
    out.extend_from_slice(&(path.len() as u32).to_le_bytes());
    out.extend_from_slice(path.as_bytes());
    out.push(dtype as u8);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
}

pub fn encode<F: Real>(store: &ParameterStore<F>, meta: &Meta) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = 2 * store.len() + 1 + meta.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (path, t) in store.iter() {
        put_header(&mut out, path, F::DTYPE, t.shape());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    for (path, t) in store.iter() {
        put_header(&mut out, &format!("{VELOCITY_PREFIX}{path}"), F::DTYPE, t.shape());
        for &v in store.velocity(path).expect("parallel map") {
            v.write_le(&mut out);
        }
    }
    put_header(&mut out, STEP_PATH, DType::U64, &[1]);
    out.extend_from_slice(&store.step_count().to_le_bytes());
    for (key, bytes) in meta {
        put_header(&mut out, &format!("{META_PREFIX}{key}"), DType::Bytes, &[bytes.len()]);
        out.extend_from_slice(bytes);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

fn read_values<F: Real>(raw: &[u8], dtype: DType) -> Result<Vec<F>> {
    let w = dtype.width();
    raw.chunks_exact(w)
        .map(|c| match dtype {
            DType::F32 => Ok(F::c(f32::read_le(c) as f64)),
            DType::F64 => Ok(F::c(f64::read_le(c))),
            _ => Err(Error::Checkpoint(format!("{dtype:?} is not a float dtype"))),
        })
        .collect()
}

/// Decodes a container. Float entries are converted to `F` when the stored
/// precision differs.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<(ParameterStore<F>, Meta)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut store = ParameterStore::new();
    let mut velocities = Vec::new();
    let mut meta = Meta::new();
    let mut step = 0;
    for _ in 0..count {
        let plen = r.u32()? as usize;
        let path = String::from_utf8(r.take(plen)?.to_vec())
            .map_err(|_| Error::Checkpoint("path is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.width())?;
        if path == STEP_PATH {
            if dtype != DType::U64 || numel != 1 {
                return Err(Error::Checkpoint("malformed step entry".into()));
            }
            step = u64::from_le_bytes(raw.try_into().expect("8"));
        } else if let Some(key) = path.strip_prefix(META_PREFIX) {
            meta.insert(key.to_string(), raw.to_vec());
        } else if let Some(param) = path.strip_prefix(VELOCITY_PREFIX) {
            velocities.push((param.to_string(), read_values::<F>(raw, dtype)?));
        } else {
            store.insert(path, Tensor::new(shape, read_values(raw, dtype)?)?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    for (path, v) in velocities {
        let slot = store
            .velocity_mut(&path)
            .map_err(|_| Error::Checkpoint(format!("velocity for unknown path {path}")))?;
        if slot.len() != v.len() {
            return Err(Error::Checkpoint(format!("velocity extent mismatch at {path}")));
        }
        *slot = v;
    }
    store.set_step_count(step);
    Ok((store, meta))
}

pub fn save<F: Real>(path: &Path, store: &ParameterStore<F>, meta: &Meta) -> Result<()> {
    std::fs::write(path, encode(store, meta)).map_err(|e| Error::io(path, e))
}

pub fn load<F: Real>(path: &Path) -> Result<(ParameterStore<F>, Meta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("a.0.weight", Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        s.insert("a.0.bias", Tensor::from_f64(vec![3], &[0.5, -0.5, 0.25]).unwrap());
        s.velocity_mut("a.0.bias").unwrap()[1] = 7.0;
        s.set_step_count(42);
        s
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&sample_store(), &Meta::new());
        assert_eq!(&bytes[..4], b"FFCN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        // two params, two velocities, one step counter
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        // first entry path is the lexicographically smallest parameter
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.0.bias");
        assert_eq!(bytes[24], DType::F64 as u8);
    }

    #[test]
    fn round_trip_keeps_optimizer_state_and_meta() {
        let s = sample_store();
        let mut meta = Meta::new();
        meta.insert("config".into(), b"hidden = 8\n".to_vec());
        let (back, m): (ParameterStore<f64>, _) = decode(&encode(&s, &meta)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.step_count(), 42);
        assert_eq!(back.velocity("a.0.bias").unwrap()[1], 7.0);
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode(&sample_store(), &Meta::new());
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode::<f64>(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn f32_store_round_trips_bitwise(values in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let mut s = ParameterStore::<f32>::new();
            let n = values.len();
            s.insert("p", Tensor::new(vec![n], values.clone()).unwrap());
            let (back, _) = decode::<f32>(&encode(&s, &Meta::new())).unwrap();
            let bits: Vec<u32> = back.get("p").unwrap().data().iter().map(|v| v.to_bits()).collect();
            let want: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, want);
        }
    }
}
