//! Flat binary container for named `f64` tensors.
//!
//! Layout: magic bytes `MATE`, a `u32` format version, then a `u64` entry
//! count followed by the entries. Each entry is `name_len: u64`, the UTF-8
//! name, a `u8` dtype tag (only `f64` = 1 today), `rank: u64`, the extents
//! (`u64` each) and the values, all little-endian. Round-trips are bit-exact,
//! including negative zero and non-normal values.
//!
//! The same container carries replay episodes (see [`episodes_to_container`])
//! so a training run's state lives in one format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::envs::{Action, ContextSample, EpisodeRecord};
use crate::error::{CoreError, Result};
use crate::nn::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"MATE";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
/// Sanity bound while reading; no real tensor here goes past rank 2.
const MAX_RANK: u64 = 8;

/// An ordered set of named tensors; order is preserved through files so
/// writes are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    names: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(CoreError::Checkpoint(format!(
                "duplicate tensor name `{name}`"
            )));
        }
        if name.is_empty() {
            return Err(CoreError::Checkpoint("empty tensor name".into()));
        }
        self.names.push(name.to_string());
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Snapshot every parameter, in registration order.
    pub fn from_params(params: &ParamSet) -> Self {
        let mut c = Container::new();
        for (_, name, value) in params.iter() {
            c.insert(name, value.clone()).expect("unique param names");
        }
        c
    }

    /// Load values back into a parameter set. Every parameter must be
    /// present with an identical shape and no extra tensors may remain; the
    /// first incompatibility is named in the error.
    pub fn apply_to_params(&self, params: &mut ParamSet) -> Result<()> {
        let mut used = 0usize;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let name = params.name(id).to_string();
            let tensor = self.tensors.get(&name).ok_or_else(|| {
                CoreError::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if tensor.shape() != params.get(id).shape() {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    tensor.shape(),
                    params.get(id).shape()
                )));
            }
            params.set(id, tensor.clone());
            used += 1;
        }
        if used != self.len() {
            let known: std::collections::HashSet<&str> = {
                let mut s = std::collections::HashSet::new();
                for id in params.ids() {
                    s.insert(params.name(id));
                }
                s
            };
            let extra = self
                .names
                .iter()
                .find(|n| !known.contains(n.as_str()))
                .expect("count mismatch implies an extra tensor");
            return Err(CoreError::Checkpoint(format!(
                "unexpected tensor `{extra}` not present in the model"
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.names.len() as u64).to_le_bytes())?;
        for name in &self.names {
            let t = &self.tensors[name];
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[DTYPE_F64])?;
            w.write_all(&(t.rank() as u64).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic bytes")?;
        if magic != MAGIC {
            return Err(CoreError::Checkpoint(format!(
                "bad magic bytes {magic:?}, not a checkpoint container"
            )));
        }
        let version = read_u32(r, "format version")?;
        if version != VERSION {
            return Err(CoreError::Checkpoint(format!(
                "unsupported container version {version} (supported: {VERSION})"
            )));
        }
        let count = read_u64(r, "entry count")?;
        let mut c = Container::new();
        for i in 0..count {
            let name_len = read_u64(r, "name length")? as usize;
            if name_len == 0 || name_len > 4096 {
                return Err(CoreError::Checkpoint(format!(
                    "entry {i}: implausible name length {name_len}"
                )));
            }
            let mut buf = vec![0u8; name_len];
            read_exact(r, &mut buf, "tensor name")?;
            let name = String::from_utf8(buf).map_err(|_| {
                CoreError::Checkpoint(format!("entry {i}: tensor name is not UTF-8"))
            })?;
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype, "dtype tag")?;
            if dtype[0] != DTYPE_F64 {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}`: unsupported dtype tag {}",
                    dtype[0]
                )));
            }
            let rank = read_u64(r, "rank")?;
            if rank > MAX_RANK {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}`: implausible rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = read_u64(r, "extent")? as usize;
                len = len.checked_mul(d).ok_or_else(|| {
                    CoreError::Checkpoint(format!("tensor `{name}`: extent overflow"))
                })?;
                shape.push(d);
            }
            if len > (1 << 32) {
                return Err(CoreError::Checkpoint(format!(
                    "tensor `{name}`: implausible element count {len}"
                )));
            }
            let mut data = vec![0.0f64; len];
            for v in &mut data {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "tensor values")?;
                *v = f64::from_le_bytes(b);
            }
            c.insert(&name, Tensor::from_shape(shape, data))?;
        }
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let c = Self::read_from(&mut r)?;
        // Trailing garbage means the file is not what it claims to be.
        let mut probe = [0u8; 1];
        match r.read(&mut probe)? {
            0 => Ok(c),
            _ => Err(CoreError::Checkpoint(
                "trailing bytes after the last tensor".into(),
            )),
        }
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| CoreError::Checkpoint(format!("truncated container ({what}): {e}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

// ---- episode persistence ----
//
// Episodes ride in the same container: per episode `j`,
//   ep{j}/obs    (T+1) x obs_dim
//   ep{j}/rew    T
//   ep{j}/act_d  T          (discrete action indices), or
//   ep{j}/act_c  T x dim    (continuous actions)
//   ep{j}/ctx    tagged context: [0, goal] | [1, scalar] | [2, x, y]
// plus a leading `episodes/count` scalar.

/// Pack episodes for persistence (e.g. replay-buffer snapshots).
pub fn episodes_to_container(episodes: &[EpisodeRecord]) -> Result<Container> {
    let mut c = Container::new();
    c.insert("episodes/count", Tensor::scalar(episodes.len() as f64))?;
    for (j, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        let t = ep.len();
        let obs_dim = ep.observations[0].len();
        let mut obs = Tensor::zeros(&[t + 1, obs_dim]);
        for (i, o) in ep.observations.iter().enumerate() {
            obs.row_mut(i).copy_from_slice(o);
        }
        c.insert(&format!("ep{j}/obs"), obs)?;
        c.insert(&format!("ep{j}/rew"), Tensor::vector(ep.rewards.clone()))?;
        match &ep.actions[0] {
            Action::Discrete(_) => {
                let idx: Result<Vec<f64>> = ep
                    .actions
                    .iter()
                    .map(|a| a.discrete().map(|v| v as f64))
                    .collect();
                c.insert(&format!("ep{j}/act_d"), Tensor::vector(idx?))?;
            }
            Action::Continuous(first) => {
                let dim = first.len();
                let mut m = Tensor::zeros(&[t, dim]);
                for (i, a) in ep.actions.iter().enumerate() {
                    let v = a.continuous()?;
                    if v.len() != dim {
                        return Err(CoreError::Data(format!(
                            "episode {j}: ragged continuous action widths"
                        )));
                    }
                    m.row_mut(i).copy_from_slice(v);
                }
                c.insert(&format!("ep{j}/act_c"), m)?;
            }
        }
        let ctx = match ep.context {
            ContextSample::Goal(g) => vec![0.0, g as f64],
            ContextSample::Scalar(v) => vec![1.0, v],
            ContextSample::Direction([x, y]) => vec![2.0, x, y],
        };
        c.insert(&format!("ep{j}/ctx"), Tensor::vector(ctx))?;
    }
    Ok(c)
}

/// Reverse of [`episodes_to_container`].
pub fn episodes_from_container(c: &Container) -> Result<Vec<EpisodeRecord>> {
    let count = c
        .get("episodes/count")
        .ok_or_else(|| CoreError::Checkpoint("missing tensor `episodes/count`".into()))?
        .item() as usize;
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let need = |suffix: &str| -> Result<&Tensor> {
            let name = format!("ep{j}/{suffix}");
            c.get(&name)
                .ok_or_else(|| CoreError::Checkpoint(format!("missing tensor `{name}`")))
        };
        let obs = need("obs")?;
        let rew = need("rew")?;
        if obs.rank() != 2 {
            return Err(CoreError::Checkpoint(format!(
                "tensor `ep{j}/obs` must be rank 2"
            )));
        }
        let t = rew.len();
        if obs.rows() != t + 1 {
            return Err(CoreError::Checkpoint(format!(
                "episode {j}: {} observations for {t} rewards",
                obs.rows()
            )));
        }
        let observations: Vec<Vec<f64>> = (0..obs.rows()).map(|i| obs.row(i).to_vec()).collect();
        let actions: Vec<Action> = if let Some(d) = c.get(&format!("ep{j}/act_d")) {
            d.as_slice()
                .iter()
                .map(|&v| Action::Discrete(v as usize))
                .collect()
        } else if let Some(m) = c.get(&format!("ep{j}/act_c")) {
            (0..m.rows())
                .map(|i| Action::Continuous(m.row(i).to_vec()))
                .collect()
        } else {
            return Err(CoreError::Checkpoint(format!(
                "missing tensor `ep{j}/act_d` or `ep{j}/act_c`"
            )));
        };
        if actions.len() != t {
            return Err(CoreError::Checkpoint(format!(
                "episode {j}: {} actions for {t} rewards",
                actions.len()
            )));
        }
        let ctx = need("ctx")?.as_slice();
        let context = match ctx.first().copied() {
            Some(tag) if tag == 0.0 && ctx.len() == 2 => ContextSample::Goal(ctx[1] as i8),
            Some(tag) if tag == 1.0 && ctx.len() == 2 => ContextSample::Scalar(ctx[1]),
            Some(tag) if tag == 2.0 && ctx.len() == 3 => {
                ContextSample::Direction([ctx[1], ctx[2]])
            }
            _ => {
                return Err(CoreError::Checkpoint(format!(
                    "episode {j}: malformed context tensor"
                )))
            }
        };
        let ep = EpisodeRecord {
            observations,
            actions,
            rewards: rew.as_slice().to_vec(),
            context,
        };
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}
