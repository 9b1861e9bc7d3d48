//! Binary checkpoints: `"HFMC" | u32 version | u32 len | NetworkSpec JSON |
//! u32 count | count × (u32 name len, name, u32 rank, u64 dims…, f64 data…)`,
//! all little-endian.
//!
//! A trainer checkpoint carries the parameters, running normalization
//! statistics, filter-bank estimators, optimizer moments and step counter,
//! so a resumed run continues bit-exactly.

use std::collections::BTreeSet;
use std::path::Path;

use crate::costs::FilterEntry;
use crate::error::{Error, Result};
use crate::hierarchy::AugmentProtocol;
use crate::linalg::Matrix;
use crate::net::{Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::trainer::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"HFMC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub tensors: Vec<(String, Tensor)>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| corrupt(format!("{what} too large to encode")))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.spec).map_err(|e| corrupt(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(json.len(), "spec")?.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&len_u32(name.len(), "name")?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&len_u32(t.rank(), "rank")?.to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).map_err(|_| corrupt("file too short"))? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}, expected {VERSION}")));
        }
        let json_len = r.u32()? as usize;
        let spec: NetworkSpec =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| corrupt(format!("spec: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(corrupt(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?;
                n = n.checked_mul(d).ok_or_else(|| corrupt("dimension overflow"))?;
                shape.push(d);
            }
            if n > r.remaining() / 8 {
                return Err(corrupt(format!("tensor {name} runs past the end of the file")));
            }
            let data = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if !seen.insert(name.clone()) {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(corrupt(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { spec, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Parameters and running statistics of a network.
    pub fn from_network(net: &Network) -> Self {
        let mut tensors: Vec<(String, Tensor)> = net
            .param_names()
            .iter()
            .cloned()
            .zip(net.params().iter().cloned())
            .collect();
        for (name, rs) in net.running_names().iter().zip(net.running()) {
            let c = rs.mean.len();
            tensors.push((format!("running.{name}.mean"), Tensor::new(vec![c], rs.mean.clone()).unwrap()));
            tensors.push((format!("running.{name}.var"), Tensor::new(vec![c], rs.var.clone()).unwrap()));
        }
        Checkpoint {
            spec: net.spec().clone(),
            tensors,
        }
    }

    /// Overwrites the network's state; the network must have been built from
    /// the same spec.
    pub fn apply_to_network(&self, net: &mut Network) -> Result<()> {
        if *net.spec() != self.spec {
            return Err(corrupt("checkpoint was written for a different network spec"));
        }
        let names = net.param_names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = self.require(name)?;
            if t.shape() != net.params()[i].shape() {
                return Err(corrupt(format!("tensor {name} has shape {:?}", t.shape())));
            }
            net.params_mut()[i] = t.clone();
        }
        let rnames = net.running_names().to_vec();
        for (i, name) in rnames.iter().enumerate() {
            let c = net.running()[i].mean.len();
            let mean = self.require(&format!("running.{name}.mean"))?;
            let var = self.require(&format!("running.{name}.var"))?;
            if mean.shape() != [c] || var.shape() != [c] {
                return Err(corrupt(format!("running statistics {name} have the wrong width")));
            }
            net.running_mut()[i].mean = mean.data().to_vec();
            net.running_mut()[i].var = var.data().to_vec();
        }
        Ok(())
    }

    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.spec.clone(), 0)?;
        self.apply_to_network(&mut net)?;
        Ok(net)
    }

    /// Full trainer state.
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut ck = Self::from_network(&t.network);
        let mat = |m: &Matrix| Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec()).unwrap();
        for s in 0..t.bank.slots() {
            if let Some(e) = t.bank.entry(s) {
                ck.tensors.push((format!("bank.{s}.r_phi"), mat(&e.r_phi)));
                ck.tensors.push((format!("bank.{s}.r_psi"), mat(&e.r_psi)));
                ck.tensors.push((format!("bank.{s}.joint"), mat(&e.joint)));
                ck.tensors.push((format!("bank.{s}.k"), Tensor::scalar(e.k as f64)));
            }
        }
        let vec_t = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
        for (i, m) in t.optimizer.first.iter().enumerate() {
            ck.tensors.push((format!("opt.first.{i}"), vec_t(m)));
        }
        for (i, m) in t.optimizer.second.iter().enumerate() {
            ck.tensors.push((format!("opt.second.{i}"), vec_t(m)));
        }
        ck.tensors.push(("opt.t".into(), Tensor::scalar(t.optimizer.t as f64)));
        ck.tensors.push(("trainer.step".into(), Tensor::scalar(t.step as f64)));
        ck
    }

    /// Rebuilds a trainer from this checkpoint and the run's configuration.
    pub fn to_trainer(&self, config: TrainConfig, protocol: AugmentProtocol) -> Result<Trainer> {
        let net = self.to_network()?;
        let mut t = Trainer::new(config, protocol, net)?;
        let counter = |name: &str| -> Result<u64> {
            let v = self.require(name)?;
            match (v.shape(), v.data()) {
                ([], &[x]) if x >= 0.0 && x.fract() == 0.0 && x < 2f64.powi(53) => Ok(x as u64),
                _ => Err(corrupt(format!("{name} is not a counter"))),
            }
        };
        let mat = |name: &str, k: usize| -> Result<Matrix> {
            let v = self.require(name)?;
            if v.shape() != [k, k] {
                return Err(corrupt(format!("{name} has shape {:?}", v.shape())));
            }
            Ok(Matrix::from_vec(k, k, v.data().to_vec())?)
        };
        for s in 0..t.bank.slots() {
            if self.get(&format!("bank.{s}.k")).is_none() {
                continue;
            }
            let k_phi = self.require(&format!("bank.{s}.r_phi"))?.shape().first().copied().unwrap_or(0);
            let k_psi = self.require(&format!("bank.{s}.r_psi"))?.shape().first().copied().unwrap_or(0);
            let entry = FilterEntry {
                r_phi: mat(&format!("bank.{s}.r_phi"), k_phi)?,
                r_psi: mat(&format!("bank.{s}.r_psi"), k_psi)?,
                joint: mat(&format!("bank.{s}.joint"), k_phi + k_psi)?,
                k: counter(&format!("bank.{s}.k"))?,
            };
            t.bank.set_entry(s, Some(entry))?;
        }
        let fill = |slots: &mut Vec<Vec<f64>>, prefix: &str| -> Result<()> {
            for (i, m) in slots.iter_mut().enumerate() {
                let v = self.require(&format!("{prefix}.{i}"))?;
                if v.len() != m.len() {
                    return Err(corrupt(format!("{prefix}.{i} has {} entries", v.len())));
                }
                m.copy_from_slice(v.data());
            }
            Ok(())
        };
        fill(&mut t.optimizer.first, "opt.first")?;
        fill(&mut t.optimizer.second, "opt.second")?;
        t.optimizer.t = counter("opt.t")?;
        t.step = counter("trainer.step")?;
        Ok(t)
    }
}
