//! Named parameter storage, tape binding for forward passes, and the
//! binary checkpoint format.
//!
//! Checkpoint layout: magic `BPNETCKPT1`, then one record per parameter:
//! name length (u32 LE), name bytes, rank (u32 LE), extents (u64 LE each),
//! payload (f64 LE each). Buffers (running statistics) are stored alongside
//! trainable weights.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tape, Var};
use crate::{BpError, Result};

pub type ParamId = usize;

const MAGIC: &[u8; 10] = b"BPNETCKPT1";

pub struct Param {
    pub name: String,
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        data: Vec<f64>,
        shape: Vec<usize>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            data,
            shape,
            trainable,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn entries(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    /// Overwrite parameter values, e.g. queued running-statistic updates.
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<f64>)>) {
        for (id, value) in updates {
            self.params[id].data = value;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes())?;
            for &e in &p.shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load values by name into an already-constructed set; every parameter
    /// must be present with a matching shape.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 10];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BpError::Format(format!(
                "bad checkpoint magic in {}",
                path.display()
            )));
        }
        let mut seen = vec![false; self.params.len()];
        loop {
            let mut len4 = [0u8; 4];
            match r.read_exact(&mut len4) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| BpError::Format("non-utf8 parameter name".into()))?;
            r.read_exact(&mut len4)?;
            let rank = u32::from_le_bytes(len4) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut e8 = [0u8; 8];
                r.read_exact(&mut e8)?;
                shape.push(u64::from_le_bytes(e8) as usize);
            }
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let mut v8 = [0u8; 8];
                r.read_exact(&mut v8)?;
                data.push(f64::from_le_bytes(v8));
            }
            let idx = self
                .params
                .iter()
                .position(|p| p.name == name)
                .ok_or_else(|| BpError::Format(format!("unknown parameter {name}")))?;
            if self.params[idx].shape != shape {
                return Err(BpError::Format(format!(
                    "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                    shape, self.params[idx].shape
                )));
            }
            self.params[idx].data = data;
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(BpError::Format(format!(
                "checkpoint missing parameter {}",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}

/// One forward pass: binds parameters to tape leaves on demand and collects
/// batch-norm statistics updates for the caller to apply after the step.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub params: &'a ParamSet,
    pub train: bool,
    bound: RefCell<Vec<Option<Var>>>,
    stat_updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamSet, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            train,
            bound: RefCell::new(vec![None; params.len()]),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Tape leaf for a parameter; bound once and reused within the pass.
    pub fn var(&self, id: ParamId) -> Var {
        if let Some(v) = &self.bound.borrow()[id] {
            return v.clone();
        }
        let p = self.params.get(id);
        let v = self
            .tape
            .leaf(p.data.clone(), p.shape.clone(), p.trainable)
            .expect("parameter shape consistent");
        self.bound.borrow_mut()[id] = Some(v.clone());
        v
    }

    pub fn push_stat_update(&self, id: ParamId, value: Vec<f64>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    /// Drain the collected running-statistic updates so the caller can
    /// apply them once the pass no longer borrows the parameter set.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.stat_updates.borrow_mut().drain(..).collect()
    }

    /// Gradients aligned with the parameter set; unbound or untouched
    /// parameters yield empty slots.
    pub fn collect_grads(&self) -> Vec<Vec<f64>> {
        self.bound
            .borrow()
            .iter()
            .map(|slot| match slot {
                Some(v) => v.grad().unwrap_or_default(),
                None => Vec::new(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use tempfile::tempdir;

    use super::*;

    fn sample_set() -> (ParamSet, ParamId, ParamId) {
        let mut ps = ParamSet::new();
        let a = ps.register("layer.w", vec![1.5, -2.5, 3.0], vec![3], true);
        let b = ps.register("bn.rmean", vec![0.25, 0.75], vec![2], false);
        (ps, a, b)
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (ps, ..) = sample_set();
        ps.save(&path).unwrap();
        let (mut other, a, b) = sample_set();
        other.get_mut(a).data = vec![0.0; 3];
        other.get_mut(b).data = vec![0.0; 2];
        other.load(&path).unwrap();
        assert_eq!(other.get(a).data, vec![1.5, -2.5, 3.0]);
        assert_eq!(other.get(b).data, vec![0.25, 0.75]);
    }

    #[test]
    fn checkpoint_rejects_mismatches() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let (ps, ..) = sample_set();
        ps.save(&path).unwrap();

        // unknown parameter in the file
        let mut empty = ParamSet::new();
        empty.register("other", vec![0.0], vec![1], true);
        assert!(empty.load(&path).is_err());

        // shape mismatch
        let mut reshaped = ParamSet::new();
        reshaped.register("layer.w", vec![0.0; 3], vec![1, 3], true);
        reshaped.register("bn.rmean", vec![0.0; 2], vec![2], false);
        assert!(reshaped.load(&path).is_err());

        // missing parameter: file lacks an entry the model has
        let (mut superset, ..) = sample_set();
        superset.register("extra", vec![0.0], vec![1], true);
        assert!(superset.load(&path).is_err());

        // bad magic
        let garbled = dir.path().join("bad.bin");
        std::fs::write(&garbled, b"NOTACKPT++").unwrap();
        let (mut ps2, ..) = sample_set();
        assert!(ps2.load(&garbled).is_err());
    }

    #[test]
    fn ctx_binds_leaves_once_and_queues_stats() {
        let (ps, a, b) = sample_set();
        let ctx = Ctx::new(&ps, true);
        let v1 = ctx.var(a);
        let v2 = ctx.var(a);
        assert_eq!(v1.id(), v2.id());
        assert!(v1.requires_grad());
        assert!(!ctx.var(b).requires_grad());
        ctx.push_stat_update(b, vec![9.0, 9.0]);
        let updates = ctx.take_stat_updates();
        drop(ctx);
        let (mut ps, _, b2) = sample_set();
        ps.apply_updates(updates);
        assert_eq!(ps.get(b2).data, vec![9.0, 9.0]);
    }
}
