//! Binary checkpoints (`NWCK`) and feature-cache sidecars (`NWFC`).
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "NWCK" | u32 version | u32 n_dims | u32 dims[n_dims]
//! | per layer: f64 weight[in*out] (row-major), f64 bias[out]
//! | u8 has_head | [u32 in | u32 out | f64 weight | f64 bias]
//! | u32 meta_len | meta_len bytes of UTF-8 JSON
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featnet::{FeatureNet, Linear};
use crate::infer::FeatureCache;
use crate::numcore::Tensor;
use crate::trainer::{Model, Variant};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CACHE_MAGIC: &[u8; 4] = b"NWFC";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub config_hash: String,
    /// Epoch of the selected evaluation; `None` for an untrained model.
    pub epoch: Option<usize>,
    pub variant: Variant,
    pub val_metric: Option<f64>,
}

/// A feature net with an optional linear head (the ERM classifier or a probe).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: FeatureNet,
    pub head: Option<Linear>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            net: model.net().clone(),
            head: model.head().cloned(),
            meta,
        }
    }

    /// The model this checkpoint was saved from; ERM variants need a head.
    pub fn into_model(self) -> Result<Model> {
        if self.meta.variant.is_erm() {
            let head = self
                .head
                .ok_or_else(|| Error::Format("ERM checkpoint has no head".into()))?;
            Ok(Model::Erm { net: self.net, head })
        } else {
            Ok(Model::Nw(self.net))
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what} length overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = self.u32("version")?;
        if v != version as usize {
            return Err(Error::Format(format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_linear(w: &mut Writer, l: &Linear) {
    w.f64s(l.weight.data());
    w.f64s(l.bias.data());
}

fn read_linear(r: &mut Reader, input: usize, output: usize, what: &str) -> Result<Linear> {
    let weight = Tensor::new(vec![input, output], r.f64s(input * output, what)?)?;
    let bias = Tensor::new(vec![1, output], r.f64s(output, what)?)?;
    Ok(Linear { weight, bias })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize)?;
    let dims = ck.net.layer_dims();
    w.u32(dims.len())?;
    for &d in dims {
        w.u32(d)?;
    }
    for layer in ck.net.layers() {
        write_linear(&mut w, layer);
    }
    match &ck.head {
        Some(h) => {
            w.u8(1);
            w.u32(h.input_dim())?;
            w.u32(h.output_dim())?;
            write_linear(&mut w, h);
        }
        None => w.u8(0),
    }
    let meta = serde_json::to_vec(&ck.meta)?;
    w.u32(meta.len())?;
    w.0.extend_from_slice(&meta);
    Ok(w.0)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let n_dims = r.u32("layer count")?;
    if n_dims < 2 {
        return Err(Error::Format(format!("{n_dims} layer dims; need at least 2")));
    }
    let mut dims = Vec::with_capacity(n_dims.min(1024));
    for _ in 0..n_dims {
        dims.push(r.u32("layer dims")?);
    }
    let mut layers = Vec::with_capacity(n_dims - 1);
    for pair in dims.windows(2) {
        layers.push(read_linear(&mut r, pair[0], pair[1], "layer weights")?);
    }
    let head = match r.u8("head flag")? {
        0 => None,
        1 => {
            let i = r.u32("head dims")?;
            let o = r.u32("head dims")?;
            Some(read_linear(&mut r, i, o, "head weights")?)
        }
        f => return Err(Error::Format(format!("bad head flag {f}"))),
    };
    let meta_len = r.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
    r.finish()?;
    let net = FeatureNet::from_layers(layers).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint { net, head, meta })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?)
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    decode_checkpoint(&buf).map_err(|e| e.context(path.display().to_string()))
}

/// `NWFC | u32 version | u64 rows | u32 dim | u32 n_classes | f64 features
/// | u32 labels | u32 envs | u64 dataset indices`.
pub fn encode_feature_cache(cache: &FeatureCache) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CACHE_MAGIC);
    w.u32(CACHE_VERSION as usize)?;
    w.u64(cache.len() as u64);
    w.u32(cache.dim())?;
    w.u32(cache.n_classes())?;
    w.f64s(cache.features().data());
    for &y in cache.labels() {
        w.u32(y)?;
    }
    for &e in cache.envs() {
        w.u32(e)?;
    }
    for &i in cache.indices() {
        w.u64(i as u64);
    }
    Ok(w.0)
}

pub fn decode_feature_cache(buf: &[u8]) -> Result<FeatureCache> {
    let mut r = Reader { buf, pos: 0 };
    r.header(CACHE_MAGIC, CACHE_VERSION)?;
    let n = usize::try_from(r.u64("row count")?).map_err(|_| Error::Format("row count too large".into()))?;
    let dim = r.u32("dim")?;
    let n_classes = r.u32("class count")?;
    let total = n
        .checked_mul(dim)
        .ok_or_else(|| Error::Format("feature block size overflows".into()))?;
    let features = Tensor::new(vec![n, dim], r.f64s(total, "features")?)?;
    let mut read_u32s = |what: &str| -> Result<Vec<usize>> { (0..n).map(|_| r.u32(what)).collect() };
    let labels = read_u32s("labels")?;
    let envs = read_u32s("envs")?;
    let indices = (0..n)
        .map(|_| r.u64("indices").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureCache::new(features, labels, envs, indices, n_classes).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_feature_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    std::fs::write(path, encode_feature_cache(cache)?)
        .map_err(|e| Error::from(e).context(format!("writing {}", path.display())))
}

pub fn load_feature_cache(path: &Path) -> Result<FeatureCache> {
    let buf = std::fs::read(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    decode_feature_cache(&buf).map_err(|e| e.context(path.display().to_string()))
}
