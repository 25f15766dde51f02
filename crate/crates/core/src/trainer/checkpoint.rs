//! Binary checkpoints.
//!
//! Layout (little endian): `EFNB`, `u32` version, `u32`-prefixed UTF-8 plan
//! text, `u32` tensor count, then per tensor a `u32`-prefixed name, `u32`
//! rank, `u64` dims and the `f32` data. Metadata rides in the plan text as
//! `#meta key = value` lines, which the plan parser skips as comments.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_count, HeadPool, Network, NetworkConfig, StagePlan};
use crate::preprocess::NormStats;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EFNB";
pub const VERSION: u32 = 1;

/// Everything a checkpoint carries besides tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub norm: NormStats,
    pub median_window: usize,
    /// Selection score (validation macro-DSC) for best-model checkpoints.
    pub score: Option<f64>,
    /// Run configuration text, if the checkpoint came from a training run.
    pub config: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: CheckpointMeta,
    /// Optimizer slots as exported by `Optimizer::export_state`.
    pub optimizer_state: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn param_count(&self) -> usize {
        param_count(&self.network)
    }
}

fn meta_lines(net: &Network<f32>, meta: &CheckpointMeta) -> String {
    let c = net.config();
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(&format!("#meta {k} = {v}\n"));
    };
    kv("num_classes", c.num_classes.to_string());
    kv("se_ratio", c.se_ratio.to_string());
    kv("dropout", c.dropout.to_string());
    kv(
        "head_pool",
        match c.head_pool {
            HeadPool::Avg => "avg".into(),
            HeadPool::Max => "max".into(),
        },
    );
    kv("bn_epsilon", c.bn_epsilon.to_string());
    kv("bn_momentum", c.bn_momentum.to_string());
    kv("epoch", meta.epoch.to_string());
    kv("median_window", meta.median_window.to_string());
    let join = |v: [f64; 3]| v.map(|x| x.to_string()).join(",");
    kv("norm.mean", join(meta.norm.mean));
    kv("norm.std", join(meta.norm.std));
    if let Some(score) = meta.score {
        kv("score", score.to_string());
    }
    if let Some(cfg) = &meta.config {
        for line in cfg.lines() {
            s.push_str(&format!("#config {line}\n"));
        }
    }
    s
}

pub fn encode(net: &Network<f32>, meta: &CheckpointMeta, optimizer_state: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let mut tensors: Vec<(String, &[usize], &[f32])> = Vec::new();
    for p in net.params() {
        tensors.push((p.name.clone(), p.tensor.shape(), p.tensor.data()));
    }
    let mut owned = Vec::new();
    for b in net.buffers() {
        owned.push((format!("{}.running_mean", b.name), b.stats.mean.clone()));
        owned.push((format!("{}.running_var", b.name), b.stats.var.clone()));
    }
    let shapes: Vec<[usize; 1]> = owned.iter().map(|(_, v)| [v.len()]).collect();
    for ((name, data), shape) in owned.iter().zip(&shapes) {
        tensors.push((name.clone(), shape, data));
    }
    for (name, t) in optimizer_state {
        tensors.push((name.clone(), t.shape(), t.data()));
    }

    let text = format!("{}{}", net.plan().to_text(), meta_lines(net, meta));
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, net: &Network<f32>, meta: &CheckpointMeta, optimizer_state: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode(net, meta, optimizer_state);
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Resolve {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            ))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Integrity(format!("{what} is not valid UTF-8")))
    }
}

fn parse_meta(text: &str) -> Result<(NetworkConfig, CheckpointMeta)> {
    let mut kv = BTreeMap::new();
    let mut config = Vec::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("#meta ") {
            if let Some((k, v)) = rest.split_once(" = ") {
                kv.insert(k.to_string(), v.to_string());
            }
        } else if let Some(rest) = line.strip_prefix("#config ") {
            config.push(rest);
        }
    }
    let get = |k: &str| -> Result<&str> {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks `{k}`")))
    };
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::Format(format!("checkpoint metadata `{k}` has bad value `{v}`")))
    }
    let triple = |k: &str| -> Result<[f64; 3]> {
        let v = get(k)?;
        let parts: Vec<f64> = v.split(',').map(|p| num(k, p)).collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| Error::Format(format!("checkpoint metadata `{k}` needs three values")))
    };
    let net = NetworkConfig {
        num_classes: num("num_classes", get("num_classes")?)?,
        se_ratio: num("se_ratio", get("se_ratio")?)?,
        dropout: num("dropout", get("dropout")?)?,
        head_pool: match get("head_pool")? {
            "avg" => HeadPool::Avg,
            "max" => HeadPool::Max,
            other => return Err(Error::Format(format!("unknown head_pool `{other}`"))),
        },
        bn_epsilon: num("bn_epsilon", get("bn_epsilon")?)?,
        bn_momentum: num("bn_momentum", get("bn_momentum")?)?,
    };
    let meta = CheckpointMeta {
        epoch: num("epoch", get("epoch")?)?,
        norm: NormStats {
            mean: triple("norm.mean")?,
            std: triple("norm.std")?,
        },
        median_window: num("median_window", get("median_window")?)?,
        score: kv.get("score").map(|v| num("score", v)).transpose()?,
        config: (!config.is_empty()).then(|| config.iter().map(|l| format!("{l}\n")).collect()),
    };
    Ok((net, meta))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::Format("file too short for a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let text = r.string("plan text")?;
    let plan = StagePlan::parse(&text).map_err(|e| Error::Format(format!("embedded plan: {e}")))?;
    let (config, meta) = parse_meta(&text)?;
    let mut network = Network::<f32>::build(&plan, config, 0)?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let name = r.string("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(Error::Integrity(format!("tensor `{name}` claims rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("tensor `{name}` has an absurd size")))?;
        let raw = r.take(numel, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Integrity(format!("tensor {i} `{name}`: {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Integrity(format!("tensor `{name}` appears twice")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }

    for p in network.params_mut() {
        let t = tensors
            .remove(&p.name)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{}`", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Integrity(format!(
                "parameter `{}` has shape {:?}, the plan needs {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t;
    }
    for b in network.buffers_mut() {
        for (suffix, slot) in [("running_mean", &mut b.stats.mean), ("running_var", &mut b.stats.var)] {
            let key = format!("{}.{suffix}", b.name);
            let t = tensors
                .remove(&key)
                .ok_or_else(|| Error::Integrity(format!("missing buffer `{key}`")))?;
            if t.numel() != slot.len() {
                return Err(Error::Integrity(format!("buffer `{key}` has {} values, expected {}", t.numel(), slot.len())));
            }
            *slot = t.data().to_vec();
        }
    }
    let mut optimizer_state = Vec::new();
    for (name, t) in tensors {
        if !name.starts_with("optim.") {
            return Err(Error::Integrity(format!("unexpected tensor `{name}`")));
        }
        optimizer_state.push((name, t));
    }
    Ok(Checkpoint {
        network,
        meta,
        optimizer_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, default_b0_plan};

    fn small() -> (Network<f32>, CheckpointMeta) {
        let net = build::<f32>(&StagePlan::b0_at_resolution(64), 5, 3).unwrap();
        let meta = CheckpointMeta {
            epoch: 7,
            norm: NormStats {
                mean: [0.1, 0.2, 0.3],
                std: [0.4, 0.5, 0.6],
            },
            median_window: 3,
            score: Some(0.625),
            config: Some("seed = 3\nepochs = 9\n".into()),
        };
        (net, meta)
    }

    #[test]
    fn round_trip_is_exact() {
        let (mut net, meta) = small();
        net.buffers_mut()[0].stats.mean[0] = 0.25;
        let opt = vec![("optim.step".to_string(), Tensor::scalar(4.0))];
        let ck = decode(&encode(&net, &meta, &opt)).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.optimizer_state, opt);
        assert_eq!(ck.network.plan(), net.plan());
        for (a, b) in ck.network.params().iter().zip(net.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(ck.network.buffers()[0].stats.mean[0], 0.25);
        assert_eq!(ck.param_count(), param_count(&net));
    }

    #[test]
    fn b0_checkpoint_lists_the_full_parameter_count() {
        let net = build::<f32>(&default_b0_plan(), 5, 0).unwrap();
        let (_, meta) = small();
        let ck = decode(&encode(&net, &meta, &[])).unwrap();
        assert_eq!(ck.param_count(), 4_013_953);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (net, meta) = small();
        let bytes = encode(&net, &meta, &[]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        for cut in [bytes.len() - 1, bytes.len() / 2, 40] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::Integrity(_))));
        assert!(matches!(decode(b"EF"), Err(Error::Format(_))));
    }
}
