//! Versioned binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EASCKPT\0"
//! version  u32
//! meta_len u32, meta bytes (UTF-8 JSON)
//! count    u32
//! count x { name_len u32, name bytes, ndim u32, dims u32 x ndim, payload f32 x prod(dims) }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde_json::Value;

use super::optim::ParamMap;
use super::tensor::Tensor;
use crate::error::{EasError, Result};

const MAGIC: &[u8; 8] = b"EASCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: ParamMap,
}

impl Checkpoint {
    pub fn new(metadata: Value, tensors: ParamMap) -> Self {
        Checkpoint { metadata, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = serde_json::to_vec(&self.metadata)?;
        out.write_u32::<LittleEndian>(meta.len() as u32)?;
        out.write_all(&meta)?;
        out.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                out.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                out.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| EasError::Checkpoint(m.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(EasError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|_| bad("truncated metadata"))?;
        let metadata = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated payload"))?;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map(
                "[a-z.]{1,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(a, b)|
                    proptest::collection::vec(any::<u32>(), a * b).prop_map(move |bits| (a, b, bits))),
                0..6),
        ) {
            let tensors: ParamMap = entries.into_iter().map(|(k, (a, b, bits))| {
                let data = bits.into_iter().map(f32::from_bits).collect();
                (k, Tensor::new(vec![a, b], data).unwrap())
            }).collect();
            let ck = Checkpoint::new(serde_json::json!({"kind": "test"}), tensors.clone());
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.tensors.len(), tensors.len());
            for (k, t) in &tensors {
                let u = &back.tensors[k];
                prop_assert_eq!(u.shape(), t.shape());
                let same = u.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let ck = Checkpoint::new(serde_json::json!({}), ParamMap::new());
        let mut bytes = ck.to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(EasError::Checkpoint(_))));
    }
}
