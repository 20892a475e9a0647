//! Single-file checkpoint archives: a JSON manifest followed by named
//! little-endian `f64` tensors.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::networks::{Counter, CounterConfig, Network, Refiner, RefinerConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CRDACKP1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub manifest: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(bad("archive is truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflows"))
    }
}

impl Archive {
    pub fn new(manifest: serde_json::Value) -> Self {
        Self { manifest, tensors: BTreeMap::new() }
    }

    /// Store every tensor of `params` as `<prefix>/<name>`.
    pub fn insert_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Store a list of tensors parallel to `params`, e.g. optimiser moments.
    pub fn insert_parallel(&mut self, prefix: &str, params: &ParamSet, tensors: &[Tensor]) {
        for (name, t) in params.names().iter().zip(tensors) {
            self.tensors.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Fill `params` from `<prefix>/<name>` entries; names and shapes must
    /// match exactly.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let loaded = self.read_parallel(prefix, params)?;
        for (dst, src) in params.tensors_mut().iter_mut().zip(loaded) {
            *dst = src;
        }
        Ok(())
    }

    /// Read tensors shaped like `params` from `<prefix>/<name>`.
    pub fn read_parallel(&self, prefix: &str, params: &ParamSet) -> Result<Vec<Tensor>> {
        let expected = params.len();
        let found = self.tensors.keys().filter(|k| k.starts_with(&format!("{prefix}/"))).count();
        if found != expected {
            return Err(bad(format!("{prefix}: expected {expected} tensors, archive has {found}")));
        }
        params
            .iter()
            .map(|(name, like)| {
                let key = format!("{prefix}/{name}");
                let t = self.tensors.get(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
                if t.shape() != like.shape() {
                    return Err(bad(format!("tensor {key} has shape {:?}, expected {:?}", t.shape(), like.shape())));
                }
                Ok(t.clone())
            })
            .collect()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.keys().any(|k| k.starts_with(&format!("{prefix}/")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(bad("not a checkpoint archive"));
        }
        let n = r.len()?;
        let manifest = serde_json::from_slice(r.take(n)?).map_err(|e| bad(format!("bad manifest: {e}")))?;
        let count = r.len()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel =
                shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if !r.buf.is_empty() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self { manifest, tensors })
    }

    /// Write via a temporary file and rename, so readers never see a
    /// partial archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

const NETWORK_FORMAT: &str = "crowdda-network";

/// Archive holding one network's architecture and weights.
pub fn network_archive(kind: &str, net: &dyn Network) -> Archive {
    let mut a = Archive::new(serde_json::json!({
        "format": NETWORK_FORMAT,
        "version": 1,
        "kind": kind,
        "config": net.config_json(),
    }));
    a.insert_params("net", net.params());
    a
}

fn archive_format(a: &Archive) -> Result<&str> {
    a.manifest["format"].as_str().ok_or_else(|| bad("manifest lacks a format"))
}

fn parse_config<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| bad(format!("bad network config: {e}")))
}

/// Counter stored either as a network archive or inside a training state,
/// where the best-validation weights are used.
pub fn counter_from_archive(a: &Archive) -> Result<Counter> {
    let (config, prefix): (CounterConfig, &str) = match archive_format(a)? {
        NETWORK_FORMAT if a.manifest["kind"] == "counter" => (parse_config(&a.manifest["config"])?, "net"),
        "crowdda-train-state" => (parse_config(&a.manifest["models"]["counter"])?, "G.best"),
        other => return Err(bad(format!("archive of format {other} holds no counter"))),
    };
    let mut c = Counter::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    a.load_params(prefix, c.params_mut())?;
    Ok(c)
}

pub fn refiner_from_archive(a: &Archive) -> Result<Refiner> {
    if archive_format(a)? != NETWORK_FORMAT || a.manifest["kind"] != "refiner" {
        return Err(bad("archive holds no refiner"));
    }
    let config: RefinerConfig = parse_config(&a.manifest["config"])?;
    let mut r = Refiner::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    a.load_params("net", r.params_mut())?;
    Ok(r)
}
