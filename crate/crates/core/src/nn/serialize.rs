//! Flat binary parameter blob.
//!
//! ```text
//! "ABSN" | version: u32
//! repeated until EOF:
//!   name_len: u16 | name: utf-8 | rank: u8 | extents: u32 × rank | values: f32 × Π extents
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"ABSN";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode<T: Element>(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor<T>)>, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut entries = Vec::new();
    while cur.pos < bytes.len() {
        let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = cur.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or("extent overflow")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn save<T: Element>(store: &ParamStore<T>, path: &std::path::Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &std::path::Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|detail| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f32>(), 1..40),
            name in "[a-z._]{1,24}",
        ) {
            let mut store = ParamStore::<f32>::new();
            let n = values.len();
            store.add(name.clone(), Tensor::new(vec![n], values.clone()).unwrap(), true);
            store.add("moving", Tensor::new(vec![1, n], values.clone()).unwrap(), false);
            let bytes = encode(&store);
            let back = decode::<f32>(&bytes).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].0, &name);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(back[0].1.data()), bits(&values));
            prop_assert_eq!(back[1].1.shape(), &[1, n]);
            prop_assert_eq!(encode(&{
                let mut s = ParamStore::<f32>::new();
                for (name, t) in back { s.add(name, t, true); }
                s
            }), bytes);
        }
    }

    #[test]
    fn layout_is_fixed() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap(), true);
        let bytes = encode(&store);
        let mut want = b"ABSN".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u16.to_le_bytes());
        want.push(b'w');
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_damage() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::ones(vec![3]).unwrap(), true);
        let bytes = encode(&store);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 9;
        assert!(decode::<f32>(&bad).is_err());
    }
}
