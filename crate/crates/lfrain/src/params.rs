//! Named-parameter storage shared by every network, the flat binary
//! checkpoint container, and the tape-lifting context that exposes stored
//! parameters as leaves (trainable) or constants (frozen) during a forward
//! pass.

use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, Gradients, Tape};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub vals: Vec<f64>,
}

/// Ordered map of dotted names (detector.stem.w, opt.step, ...) to dense
/// f64 tensors. Iteration order is the name order, which keeps every
/// downstream walk deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, vals: Vec<f64>) -> Result<()> {
        let need: usize = dims.iter().product();
        if vals.len() != need || dims.is_empty() {
            return Err(Error::shape(format!(
                "parameter '{name}': {} values for dims {dims:?}",
                vals.len()
            )));
        }
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("parameter '{name}': non-finite value {bad}")));
        }
        self.map.insert(name.to_string(), Param { dims, vals });
        Ok(())
    }

    /// Returns the stored parameter, creating it from `init` on first use.
    /// An existing entry must match the requested dims.
    pub fn get_or_init<F>(&mut self, name: &str, dims: &[usize], init: F) -> Result<&Param>
    where
        F: FnOnce() -> Vec<f64>,
    {
        if !self.map.contains_key(name) {
            self.insert(name, dims.to_vec(), init())?;
        }
        let p = self.map.get(name).unwrap();
        if p.dims != dims {
            return Err(Error::contract(format!(
                "parameter '{name}' exists with dims {:?}, requested {dims:?}",
                p.dims
            )));
        }
        Ok(p)
    }

    pub fn set_vals(&mut self, name: &str, vals: Vec<f64>) -> Result<()> {
        let p = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))?;
        if vals.len() != p.vals.len() {
            return Err(Error::shape(format!(
                "parameter '{name}': length {} vs stored {}",
                vals.len(),
                p.vals.len()
            )));
        }
        p.vals = vals;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.map.keys().filter(move |k| k.starts_with(prefix)).map(|s| s.as_str())
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    /// Copies every entry under `prefix` from `other`, replacing ours.
    pub fn adopt_prefix(&mut self, other: &ParamStore, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
        for (k, v) in other.map.range(prefix.to_string()..) {
            if !k.starts_with(prefix) {
                break;
            }
            self.map.insert(k.clone(), v.clone());
        }
    }

    /// Order-stable FNV-1a digest over names, dims, and raw value bytes of
    /// every entry under `prefix`. Used to prove frozen weights untouched.
    pub fn checksum_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (k, p) in &self.map {
            if !k.starts_with(prefix) {
                continue;
            }
            eat(k.as_bytes());
            for d in &p.dims {
                eat(&(*d as u64).to_le_bytes());
            }
            for v in &p.vals {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    /// Flat binary container: u64 LE tensor count, then per tensor u64 LE
    /// name length, UTF-8 name, u64 LE rank, u64 LE dims, f64 LE values.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&(self.map.len() as u64).to_le_bytes())?;
        for (k, p) in &self.map {
            f.write_all(&(k.len() as u64).to_le_bytes())?;
            f.write_all(k.as_bytes())?;
            f.write_all(&(p.dims.len() as u64).to_le_bytes())?;
            for d in &p.dims {
                f.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in &p.vals {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let bad = |what: &str| Error::format(format!("{}: truncated {what}", path.display()));
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |f: &mut dyn Read, what: &str| -> Result<u64> {
            f.read_exact(&mut u64buf).map_err(|_| bad(what))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let count = read_u64(&mut f, "header")? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut f, "name length")? as usize;
            if name_len > 4096 {
                return Err(Error::format(format!(
                    "{}: implausible name length {name_len}",
                    path.display()
                )));
            }
            let mut name_buf = vec![0u8; name_len];
            f.read_exact(&mut name_buf).map_err(|_| bad("name"))?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::format(format!("{}: non-UTF-8 name", path.display())))?;
            let rank = read_u64(&mut f, "rank")? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::format(format!("{}: implausible rank {rank}", path.display())));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut f, "dims")? as usize);
            }
            let numel: usize = dims.iter().product();
            let mut body = vec![0u8; numel * 8];
            f.read_exact(&mut body).map_err(|_| bad("values"))?;
            let vals: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(&name, dims, vals)?;
        }
        Ok(store)
    }
}

enum Lift {
    Trainable(Tape),
    Frozen,
}

/// Lifts stored parameters onto a tape for one forward pass. Trainable
/// lifts become leaves whose gradients can be read back by name; frozen
/// lifts are constants so no gradient is retained for them.
pub struct ParamCtx<'a> {
    store: &'a ParamStore,
    mode: Lift,
    lifted: RefCell<BTreeMap<String, DiffTensor>>,
}

impl<'a> ParamCtx<'a> {
    pub fn trainable(store: &'a ParamStore, tape: &Tape) -> ParamCtx<'a> {
        ParamCtx {
            store,
            mode: Lift::Trainable(tape.clone()),
            lifted: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> ParamCtx<'a> {
        ParamCtx { store, mode: Lift::Frozen, lifted: RefCell::new(BTreeMap::new()) }
    }

    /// Fetches a parameter as a tensor; repeated fetches of one name share
    /// the same tape node, so gradients accumulate across uses.
    pub fn param(&self, name: &str) -> Result<DiffTensor> {
        if let Some(t) = self.lifted.borrow().get(name) {
            return Ok(t.clone());
        }
        let p = self.store.get(name)?;
        let raw = DiffTensor::from_vec(p.vals.clone(), &p.dims)?;
        let t = match &self.mode {
            Lift::Trainable(tape) => tape.leaf(&raw),
            Lift::Frozen => raw,
        };
        self.lifted.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Collects per-name gradients after a backward pass; names whose leaf
    /// received no gradient are omitted.
    pub fn grads(&self, grads: &Gradients) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.lifted.borrow().iter() {
            if !t.is_tracked() {
                continue;
            }
            if let Some(g) = grads.get(t)? {
                out.insert(name.clone(), g.to_vec());
            }
        }
        Ok(out)
    }
}

/// Runtime freeze guard: prefixes whose parameters no optimizer step may
/// touch. Callers check a gradient map against it before applying.
#[derive(Clone, Debug, Default)]
pub struct FreezeSet {
    prefixes: Vec<String>,
}

impl FreezeSet {
    pub fn new(prefixes: &[&str]) -> FreezeSet {
        FreezeSet { prefixes: prefixes.iter().map(|s| s.to_string()).collect() }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Errors if any gradient targets a frozen parameter.
    pub fn assert_disjoint(&self, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for name in grads.keys() {
            if self.is_frozen(name) {
                return Err(Error::contract(format!(
                    "optimizer step touches frozen parameter '{name}'"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freeze_guard_rejects_frozen_names() {
        let f = FreezeSet::new(&["depth."]);
        let mut g = BTreeMap::new();
        g.insert("detector.stem.w".to_string(), vec![0.0]);
        f.assert_disjoint(&g).unwrap();
        g.insert("depth.head.w".to_string(), vec![0.0]);
        assert!(matches!(f.assert_disjoint(&g), Err(Error::Contract(_))));
        assert!(f.is_frozen("depth.blk1.c1.w"));
        assert!(!f.is_frozen("restorer.stem.w"));
    }

    #[test]
    fn store_roundtrip_is_bitwise() {
        let mut s = ParamStore::new();
        s.insert("a.w", vec![2, 3], vec![0.1, -0.2, 0.3, 1e-300, -0.0, 5.5]).unwrap();
        s.insert("a.b", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        s.insert("z.step", vec![1], vec![42.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        s.save(&path).unwrap();
        let back = ParamStore::load(&path).unwrap();
        assert_eq!(s, back);
        let b1 = std::fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(b1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn get_or_init_runs_once_and_checks_dims() {
        let mut s = ParamStore::new();
        let mut calls = 0;
        s.get_or_init("w", &[2], || {
            calls += 1;
            vec![1.0, 2.0]
        })
        .unwrap();
        s.get_or_init("w", &[2], || {
            calls += 1;
            vec![9.0, 9.0]
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(s.get("w").unwrap().vals, vec![1.0, 2.0]);
        assert!(s.get_or_init("w", &[3], Vec::new).is_err());
    }

    #[test]
    fn checksum_tracks_prefix_content_only() {
        let mut s = ParamStore::new();
        s.insert("depth.w", vec![2], vec![1.0, 2.0]).unwrap();
        s.insert("detector.w", vec![2], vec![3.0, 4.0]).unwrap();
        let c0 = s.checksum_prefix("depth.");
        s.set_vals("detector.w", vec![9.0, 9.0]).unwrap();
        assert_eq!(s.checksum_prefix("depth."), c0);
        s.set_vals("depth.w", vec![1.0, 2.5]).unwrap();
        assert_ne!(s.checksum_prefix("depth."), c0);
    }

    #[test]
    fn trainable_ctx_accumulates_shared_uses() {
        let mut s = ParamStore::new();
        s.insert("w", vec![2], vec![3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let ctx = ParamCtx::trainable(&s, &tape);
        let w1 = ctx.param("w").unwrap();
        let w2 = ctx.param("w").unwrap();
        // Same node: loss = sum(w) + sum(w*w) gives grad 1 + 2w.
        let loss = w1.sum().unwrap().add(&w2.mul(&w2).unwrap().sum().unwrap()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let g = ctx.grads(&grads).unwrap();
        assert_eq!(g["w"], vec![7.0, 9.0]);
    }

    #[test]
    fn frozen_ctx_yields_no_grads() {
        let mut s = ParamStore::new();
        s.insert("w", vec![2], vec![3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let ctx = ParamCtx::frozen(&s);
        let w = ctx.param("w").unwrap();
        let x = tape.leaf(&DiffTensor::from_vec(vec![1.0, 1.0], &[2]).unwrap());
        let loss = w.mul(&x).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(ctx.grads(&grads).unwrap().is_empty());
        // Gradient still flows through the frozen constant to live inputs.
        assert_eq!(grads.get(&x).unwrap().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn adopt_prefix_replaces_subtree() {
        let mut a = ParamStore::new();
        a.insert("depth.w", vec![1], vec![1.0]).unwrap();
        a.insert("other.w", vec![1], vec![2.0]).unwrap();
        let mut b = ParamStore::new();
        b.insert("depth.w", vec![1], vec![9.0]).unwrap();
        b.insert("depth.b", vec![1], vec![8.0]).unwrap();
        a.adopt_prefix(&b, "depth.");
        assert_eq!(a.get("depth.w").unwrap().vals, vec![9.0]);
        assert_eq!(a.get("depth.b").unwrap().vals, vec![8.0]);
        assert_eq!(a.get("other.w").unwrap().vals, vec![2.0]);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        let mut s = ParamStore::new();
        s.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match ParamStore::load(&path) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
