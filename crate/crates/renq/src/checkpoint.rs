//! Binary checkpoint format: magic "RENQ", a format version, the canonical
//! config snapshot, then the full training state (parameters, optimizer
//! moments, generator states, replay contents, environment state). Little
//! endian throughout; save -> load -> save is byte-identical.

use crate::error::RenqError;
use crate::tensor::{AdamState, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"RENQ";
pub const VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, v: &[u8]) {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
    }

    pub fn str(&mut self, v: &str) {
        self.bytes(v.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for &x in v {
            self.f64(x);
        }
    }

    pub fn rng(&mut self, state: [u64; 4]) {
        for w in state {
            self.u64(w);
        }
    }

    pub fn params(&mut self, set: &ParamSet) {
        self.u32(set.len() as u32);
        for (name, t) in set.iter() {
            self.str(name);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u32(d as u32);
            }
            self.f64s(t.data());
        }
    }

    pub fn adam(&mut self, st: &AdamState) {
        self.u64(st.step);
        self.u32(st.m.len() as u32);
        for (m, v) in st.m.iter().zip(st.v.iter()) {
            self.f64s(m);
            self.f64s(v);
        }
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], RenqError> {
        if self.pos + n > self.buf.len() {
            return Err(RenqError::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn u8(&mut self) -> Result<u8, RenqError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, RenqError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, RenqError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, RenqError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, RenqError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, RenqError> {
        String::from_utf8(self.bytes()?)
            .map_err(|_| RenqError::Checkpoint("invalid utf-8 string".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, RenqError> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    pub fn rng(&mut self) -> Result<[u64; 4], RenqError> {
        Ok([self.u64()?, self.u64()?, self.u64()?, self.u64()?])
    }

    /// Read parameters into an existing set; names and shapes must match.
    pub fn params_into(&mut self, set: &mut ParamSet) -> Result<(), RenqError> {
        let n = self.u32()? as usize;
        if n != set.len() {
            return Err(RenqError::Checkpoint(format!(
                "parameter count mismatch: file {n}, model {}",
                set.len()
            )));
        }
        for i in 0..n {
            let name = self.str()?;
            if name != set.name(i) {
                return Err(RenqError::Checkpoint(format!(
                    "parameter name mismatch: file '{name}', model '{}'",
                    set.name(i)
                )));
            }
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let data = self.f64s()?;
            if shape != set.get(i).shape() || data.len() != set.get(i).numel() {
                return Err(RenqError::Checkpoint(format!(
                    "parameter shape mismatch for '{name}'"
                )));
            }
            set.get_mut(i).data_mut().copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn adam_into(&mut self, st: &mut AdamState) -> Result<(), RenqError> {
        st.step = self.u64()?;
        let n = self.u32()? as usize;
        if n != st.m.len() {
            return Err(RenqError::Checkpoint("optimizer state count mismatch".into()));
        }
        for i in 0..n {
            let m = self.f64s()?;
            let v = self.f64s()?;
            if m.len() != st.m[i].len() || v.len() != st.v[i].len() {
                return Err(RenqError::Checkpoint("optimizer state shape mismatch".into()));
            }
            st.m[i] = m;
            st.v[i] = v;
        }
        Ok(())
    }
}

/// Frame the payload with magic and version.
pub fn wrap(payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Validate magic and version, returning the payload slice.
pub fn unwrap(bytes: &[u8]) -> Result<&[u8], RenqError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(RenqError::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(RenqError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    Ok(&bytes[8..])
}

/// Serialize a tensor list round-trippable shape check used in tests.
pub fn tensor_digest(t: &Tensor) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &v in t.data() {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_roundtrip() {
        let mut w = ByteWriter::new();
        w.u8(7);
        w.u32(1234);
        w.u64(u64::MAX - 3);
        w.f64(-0.125);
        w.str("hello");
        w.f64s(&[1.0, 2.5]);
        w.rng([1, 2, 3, 4]);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 1234);
        assert_eq!(r.u64().unwrap(), u64::MAX - 3);
        assert_eq!(r.f64().unwrap(), -0.125);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.f64s().unwrap(), vec![1.0, 2.5]);
        assert_eq!(r.rng().unwrap(), [1, 2, 3, 4]);
        assert!(r.done());
    }

    #[test]
    fn truncation_is_detected() {
        let mut w = ByteWriter::new();
        w.str("some content");
        let mut bytes = wrap(w.into_bytes());
        bytes.truncate(bytes.len() - 3);
        let payload = unwrap(&bytes).unwrap();
        let mut r = ByteReader::new(payload);
        assert!(r.str().is_err());
    }

    #[test]
    fn magic_and_version_checked() {
        assert!(unwrap(b"NOPE....").is_err());
        let mut bad_version = wrap(vec![1, 2, 3]);
        bad_version[4] = 99;
        assert!(unwrap(&bad_version).is_err());
        let ok = wrap(vec![1, 2, 3]);
        assert_eq!(unwrap(&ok).unwrap(), &[1, 2, 3]);
    }

    #[test]
    fn params_roundtrip_and_mismatch() {
        let mut set = ParamSet::new();
        set.add("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        set.add("a.b", Tensor::new(vec![2], vec![0.5, -0.5]));
        let mut w = ByteWriter::new();
        w.params(&set);
        let bytes = w.into_bytes();

        let mut dst = ParamSet::new();
        dst.add("a.w", Tensor::zeros(vec![2, 2]));
        dst.add("a.b", Tensor::zeros(vec![2]));
        ByteReader::new(&bytes).params_into(&mut dst).unwrap();
        assert_eq!(dst.get(0).data(), set.get(0).data());

        let mut wrong = ParamSet::new();
        wrong.add("a.w", Tensor::zeros(vec![2, 2]));
        wrong.add("b.b", Tensor::zeros(vec![2]));
        assert!(ByteReader::new(&bytes).params_into(&mut wrong).is_err());
    }
}
