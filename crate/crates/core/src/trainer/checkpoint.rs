//! Binary checkpoint: `"GRAF" | version u32 | config hash [32] | iteration u64 | tensor table`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use graf_diffcore::{read_table, write_table_entry, Scalar, Tensor};

use crate::error::{io_err, GrafError, Result};

pub const MAGIC: &[u8; 4] = b"GRAF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 32 + 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: [u8; 32],
    pub iteration: u64,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.iteration.to_le_bytes());
        for (name, t) in &self.tensors {
            write_table_entry(&mut out, name, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: String| GrafError::Checkpoint(m);
        if bytes.len() < HEADER_LEN {
            return Err(err(format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err(format!("bad magic {:02x?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(err(format!("format version {version}, expected {VERSION}")));
        }
        let config_hash: [u8; 32] = bytes[8..40].try_into().expect("32 bytes");
        let iteration = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
        let tensors = read_table(&bytes[HEADER_LEN..], HEADER_LEN).map_err(|e| err(e.to_string()))?;
        Ok(Self {
            config_hash,
            iteration,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }

    /// Tensors under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f32> {
        Checkpoint {
            config_hash: [7; 32],
            iteration: 42,
            tensors: BTreeMap::from([
                (
                    "a/w".to_string(),
                    Tensor::from_f64(vec![2, 2], &[1.0, -2.5, 3.25, 1e-9]).unwrap(),
                ),
                ("b".to_string(), Tensor::scalar(0.5)),
            ]),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        assert_eq!(c.section("a").len(), 1);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..20]).is_err());
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        bytes[4] = 9;
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        bytes[4] = 1;
        bytes[0] = b'X';
        let e = Checkpoint::<f32>::from_bytes(&bytes).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
    }
}
