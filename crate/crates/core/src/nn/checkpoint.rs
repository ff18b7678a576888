//! Parameter checkpoints.
//!
//! Little-endian layout: magic `"TNCP"`, version u32, tensor_count u32, then
//! per tensor: name_len u16, UTF-8 name, ndim u8, dims u32 × ndim, dtype u8
//! (1 = fp32, 2 = fp64), raw values. Each parameter `p` is followed by its
//! Adam moments `p.m` and `p.v`; the step counter is the scalar `t`.

use std::fs;
use std::path::Path;

use super::{NnError, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"TNCP";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(DTYPE_F64);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((store.len() * 3 + 1) as u32).to_le_bytes());
    for p in store.params() {
        put_tensor(&mut out, &p.name, &p.value);
        put_tensor(&mut out, &format!("{}.m", p.name), &p.m);
        put_tensor(&mut out, &format!("{}.v", p.name), &p.v);
    }
    put_tensor(&mut out, "t", &Tensor::scalar(store.step() as f64));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.pos < n {
            return Err(NnError::BadCheckpoint {
                offset: self.pos,
                reason: format!("truncated, need {n} more bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), NnError> {
        let start = self.pos;
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| NnError::BadCheckpoint {
                offset: start,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let ndim = self.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = match self.u8()? {
            DTYPE_F32 => self
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DTYPE_F64 => self
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => {
                return Err(NnError::BadCheckpoint {
                    offset: self.pos - 1,
                    reason: format!("unknown dtype tag {other}"),
                })
            }
        };
        let t = Tensor::new(dims, data).map_err(|e| NnError::BadCheckpoint {
            offset: start,
            reason: e.to_string(),
        })?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(NnError::BadCheckpoint {
            offset: 0,
            reason: "bad magic, expected \"TNCP\"".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NnError::BadCheckpoint {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(NnError::BadCheckpoint {
            offset: r.pos,
            reason: "trailing bytes".into(),
        });
    }

    let mut store = ParamStore::new();
    let mut pending: Vec<(String, Tensor, Option<Tensor>, Option<Tensor>)> = Vec::new();
    for (name, t) in entries {
        if name == "t" && t.len() == 1 {
            store.set_step(t.data()[0] as u64);
            continue;
        }
        let moment = name
            .strip_suffix(".m")
            .map(|b| (b, true))
            .or_else(|| name.strip_suffix(".v").map(|b| (b, false)));
        if let Some((base, is_m)) = moment {
            if let Some(slot) = pending.iter_mut().find(|p| p.0 == base) {
                if is_m {
                    slot.2 = Some(t);
                } else {
                    slot.3 = Some(t);
                }
                continue;
            }
        }
        pending.push((name, t, None, None));
    }
    for (name, value, m, v) in pending {
        let m = m.unwrap_or_else(|| Tensor::zeros(value.dims()));
        let v = v.unwrap_or_else(|| Tensor::zeros(value.dims()));
        store.insert_with_state(name, value, m, v)?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<(), NnError> {
    fs::write(path, encode_checkpoint(store))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, NnError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_of_single_scalar_store() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![2.0]).unwrap()).unwrap();
        let bytes = encode_checkpoint(&s);
        assert_eq!(&bytes[..4], b"TNCP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        // "w": 2 + 1 + 1 + 4 + 1 + 8 = 17; "w.m", "w.v": 19 each; "t": 2 + 1 + 1 + 0 + 1 + 8 = 13
        assert_eq!(bytes.len(), 12 + 17 + 19 + 19 + 13);
    }

    #[test]
    fn fp32_payloads_are_accepted() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'a');
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.push(DTYPE_F32);
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let s = decode_checkpoint(&bytes).unwrap();
        assert_eq!(s.value("a").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(s.step(), 0);
    }

    #[test]
    fn corrupt_inputs() {
        assert!(matches!(decode_checkpoint(b"NOPE\x01\0\0\0"), Err(NnError::BadCheckpoint { offset: 0, .. })));
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[3])).unwrap();
        let bytes = encode_checkpoint(&s);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
