//! Parameter file layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PHTRPRM\0"
//! version  u32
//! count    u32
//! count × { name_len u32, name UTF-8, rank u32, extents u64 × rank, values f64 × Π extents }
//! ```
//!
//! Optimizer state is stored as extra entries named `<param>#<state-key>`.

use std::io::{Read, Write};

use super::{ParamStore, Parameter, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PHTRPRM\0";
pub const PARAM_FORMAT_VERSION: u32 = 1;
const STATE_SEP: char = '#';

pub fn write_parameters<W: Write>(w: &mut W, store: &ParamStore) -> std::io::Result<()> {
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for p in store.iter() {
        entries.push((p.name.clone(), &p.value));
        for (k, t) in &p.state {
            entries.push((format!("{}{STATE_SEP}{k}", p.name), t));
        }
    }
    w.write_all(MAGIC)?;
    w.write_all(&PARAM_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// `source` only labels error messages.
pub fn read_parameters<R: Read>(r: &mut R, source: &str) -> Result<ParamStore> {
    let bad = |detail: String| Error::format(source, detail);
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic, source)?;
    if &magic != MAGIC {
        return Err(bad("not a parameter file (bad magic)".into()));
    }
    let version = read_u32(r, source)?;
    if version != PARAM_FORMAT_VERSION {
        return Err(bad(format!("unsupported parameter format version {version}")));
    }
    let count = read_u32(r, source)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r, source)? as usize;
        let mut name = vec![0u8; len];
        read_exact(r, &mut name, source)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r, source)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact(r, &mut b, source)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        read_exact(r, &mut bytes, source)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        match name.split_once(STATE_SEP) {
            Some((owner, key)) => {
                let id = store
                    .find(owner)
                    .ok_or_else(|| bad(format!("state {key} for unknown parameter {owner}")))?;
                store.get_mut(id).state.insert(key.to_string(), tensor);
            }
            None => {
                if store.find(&name).is_some() {
                    return Err(bad(format!("duplicate parameter {name}")));
                }
                store.push(Parameter::new(name, tensor));
            }
        }
    }
    Ok(store)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], source: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::format(source, format!("truncated parameter file: {e}")))
}

fn read_u32<R: Read>(r: &mut R, source: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, source)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 1..40),
            with_state in any::<bool>(),
        ) {
            let mut store = ParamStore::new();
            let n = values.len();
            let id = store.push(Parameter::new("enc/w", Tensor::new(vec![n], values.clone()).unwrap()));
            store.push(Parameter::new("dec/b", Tensor::new(vec![1, n], values.iter().rev().copied().collect()).unwrap()));
            if with_state {
                store.get_mut(id).state.insert("ms".into(), Tensor::new(vec![n], values).unwrap());
            }
            let mut buf = Vec::new();
            write_parameters(&mut buf, &store).unwrap();
            let back = read_parameters(&mut buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(back.len(), 2);
            for (a, b) in store.iter().zip(back.iter()) {
                prop_assert_eq!(&a.name, &b.name);
                prop_assert_eq!(a.value.shape(), b.value.shape());
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.value), bits(&b.value));
                prop_assert_eq!(a.state.keys().collect::<Vec<_>>(), b.state.keys().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(read_parameters(&mut &b"nonsense"[..], "x").is_err());
        let mut store = ParamStore::new();
        store.push(Parameter::new("w", Tensor::filled(&[3], 1.5)));
        let mut buf = Vec::new();
        write_parameters(&mut buf, &store).unwrap();
        let err = read_parameters(&mut &buf[..buf.len() - 3], "ckpt").unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }
}
