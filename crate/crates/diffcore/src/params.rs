//! Named parameter storage and the binary tensor table used by checkpoints.

use std::collections::BTreeMap;

use crate::error::{DiffError, Result};
use crate::scalar::{DType, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    /// Buffers (e.g. power-iteration vectors) are stored but never differentiated.
    pub trainable: bool,
}

/// Hierarchically named tensors, iterated in sorted name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// How a store is placed on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable entries become named differentiable leaves.
    Trainable,
    /// Everything is a constant.
    Frozen,
}

/// Tape handles for every entry of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::Params(format!("no parameter named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl FromIterator<(String, Var)> for Bindings {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    fn insert(&mut self, name: String, tensor: Tensor<T>, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(DiffError::Params(format!("duplicate name {name:?}")));
        }
        self.entries.insert(name, ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn insert_param(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        self.insert(name.into(), tensor, true)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        self.insert(name.into(), tensor, false)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a over names, flags and raw bits; equal stores hash equal.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        let mut buf = Vec::new();
        for (name, e) in self.iter() {
            eat(name.as_bytes());
            eat(&[e.trainable as u8]);
            buf.clear();
            for &v in e.tensor.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }

    pub fn bind(&self, tape: &mut Tape<T>, mode: BindMode) -> Bindings {
        let vars = self
            .iter()
            .map(|(name, e)| {
                let v = if e.trainable && mode == BindMode::Trainable {
                    tape.param(name, e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Bindings { vars }
    }

    /// Replaces every tensor from `loaded`; names and shapes must match exactly.
    pub fn assign_from(&mut self, loaded: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let ours: Vec<&str> = self.names().collect();
        let theirs: Vec<&str> = loaded.keys().map(String::as_str).collect();
        if ours != theirs {
            let missing: Vec<&&str> = ours.iter().filter(|n| !loaded.contains_key(**n)).collect();
            let extra: Vec<&&str> = theirs.iter().filter(|n| !self.contains(n)).collect();
            return Err(DiffError::Params(format!(
                "name set mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, e) in self.entries.iter_mut() {
            let t = &loaded[name];
            if t.shape() != e.tensor.shape() {
                return Err(DiffError::Params(format!(
                    "{name}: stored shape {:?} does not match {:?}",
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = t.clone();
        }
        Ok(())
    }
}

/// Appends one tensor-table record:
/// `name-length u32 | name | dtype u8 | rank u8 | dims u64×rank | data`, little-endian.
pub fn write_table_entry<T: Scalar>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(out);
    }
}

/// Parses records until the end of `bytes`. `base` is the offset of
/// `bytes` within the enclosing file, used in error messages.
pub fn read_table<T: Scalar>(bytes: &[u8], base: usize) -> Result<BTreeMap<String, Tensor<T>>> {
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
        base: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(DiffError::Format {
                    offset: self.base + self.pos,
                    reason: format!("truncated {what}"),
                });
            }
            let s = &self.bytes[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }
        fn err(&self, at: usize, reason: String) -> DiffError {
            DiffError::Format {
                offset: self.base + at,
                reason,
            }
        }
    }

    let mut cur = Cursor { bytes, pos: 0, base };
    let mut out = BTreeMap::new();
    let mut previous: Option<String> = None;
    while cur.pos < bytes.len() {
        let start = cur.pos;
        let name_len = u32::from_le_bytes(cur.take(4, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| cur.err(start + 4, "name is not UTF-8".into()))?
            .to_string();
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(cur.err(start, format!("entry {name:?} out of sorted order")));
        }
        let tag_at = cur.pos;
        let tag = cur.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| cur.err(tag_at, format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(cur.err(tag_at, format!("{name}: stored as {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(cur.take(8, "dims")?.try_into().unwrap()) as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let nbytes = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| cur.err(start, format!("{name}: dims overflow")))?;
        let raw = cur.take(nbytes, "tensor data")?;
        let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        out.insert(name.clone(), Tensor::new(shape, data)?);
        previous = Some(name);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_param("b/w", Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap())
            .unwrap();
        s.insert_param("a/bias", Tensor::from_f64(vec![2], &[0.5, -0.5]).unwrap())
            .unwrap();
        s.insert_buffer("b/u", Tensor::from_f64(vec![2], &[0.6, 0.8]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn iteration_is_sorted_and_names_unique() {
        let mut s = store();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["a/bias", "b/u", "b/w"]);
        assert!(s.insert_param("a/bias", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn buffers_bind_as_constants() {
        let s = store();
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, BindMode::Trainable);
        assert!(tape.requires_grad(b.var("b/w").unwrap()));
        assert!(!tape.requires_grad(b.var("b/u").unwrap()));
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, BindMode::Frozen);
        assert!(!tape.requires_grad(b.var("b/w").unwrap()));
        assert_eq!(s.trainable_count(), 6);
    }

    #[test]
    fn table_round_trip_is_bit_exact() {
        let s = store();
        let mut bytes = Vec::new();
        for (name, e) in s.iter() {
            write_table_entry(&mut bytes, name, &e.tensor);
        }
        let back = read_table::<f64>(&bytes, 0).unwrap();
        let mut t = s.clone();
        t.assign_from(&back).unwrap();
        assert_eq!(t.fingerprint(), s.fingerprint());
        assert_eq!(t, s);
    }

    #[test]
    fn table_rejects_truncation_and_wrong_dtype() {
        let s = store();
        let mut bytes = Vec::new();
        for (name, e) in s.iter() {
            write_table_entry(&mut bytes, name, &e.tensor);
        }
        let err = read_table::<f64>(&bytes[..bytes.len() - 3], 100).unwrap_err();
        assert!(matches!(err, DiffError::Format { offset, .. } if offset > 100));
        assert!(read_table::<f32>(&bytes, 0).is_err());
    }

    #[test]
    fn assign_rejects_name_mismatch() {
        let mut s = store();
        let mut other = BTreeMap::new();
        other.insert("a/bias".to_string(), Tensor::zeros(vec![2]));
        let err = s.assign_from(&other).unwrap_err();
        assert!(err.to_string().contains("b/w"));
    }
}
