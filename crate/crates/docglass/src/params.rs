//! Named parameter storage: deterministic initialization, SGD with momentum,
//! the versioned binary checkpoint format, and the binder that inserts
//! parameters into a graph exactly once per forward pass (so shared tensors
//! accumulate gradient at a single leaf).

use std::collections::HashMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::doc::N_LABELS;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Bilinear channels of the pairwise spatial-relation head.
pub const GTR_CHANNELS: usize = 16;
/// Spatial-relation classes: far, eight directions, coincident.
pub const GTR_CLASSES: usize = 10;

const CKPT_MAGIC: &[u8; 8] = b"DGLSCKPT";
const CKPT_VERSION: u32 = 1;

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    velocity: Vec<Option<Vec<f64>>>,
}

/// Standard normal via Box-Muller; `rand` has no Gaussian distribution of its
/// own and pulling in another crate for two lines is not worth it.
fn normal(rng: &mut ChaCha8Rng, sigma: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Every parameter of the model, in creation order. One place defines the
/// topology; init, checkpoints, and the gradient check all walk this list.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.d, cfg.d_ffn);
    let table = |name: &str, rows: usize| (name.to_string(), vec![rows, d], Init::Normal(0.1));
    let mat = |name: String, r: usize, c: usize| (name, vec![r, c], Init::Normal(0.05));
    let zero = |name: String, r: usize, c: usize| (name, vec![r, c], Init::Zeros);
    let ones = |name: String, c: usize| (name, vec![1, c], Init::Ones);

    let mut specs = vec![
        table("embed.word", cfg.vocab),
        table("embed.pos", cfg.l_t),
        table("embed.layout_x0", cfg.coord_buckets),
        table("embed.layout_y0", cfg.coord_buckets),
        table("embed.layout_x1", cfg.coord_buckets),
        table("embed.layout_y1", cfg.coord_buckets),
        table("embed.seg", cfg.l_v + 1),
        mat("embed.vis_w".into(), d, d),
        zero("embed.vis_b".into(), 1, d),
        mat("guide.v2l_w".into(), d, 1),
        zero("guide.v2l_b".into(), 1, 1),
        mat("guide.l2v_w".into(), d, 1),
        zero("guide.l2v_b".into(), 1, 1),
        table("sca.seg", cfg.l_v + 1),
    ];

    let mut block_names: Vec<String> = Vec::new();
    for i in 0..cfg.n_stages {
        block_names.push(format!("m{i}"));
    }
    for i in 0..cfg.n_stages {
        block_names.push(format!("e{i}"));
    }
    for b in &block_names {
        for w in ["wq", "wk", "wv", "wo"] {
            specs.push(mat(format!("{b}.sa.{w}"), d, d));
        }
        specs.push(ones(format!("{b}.sa.ln1_g"), d));
        specs.push(zero(format!("{b}.sa.ln1_b"), 1, d));
        specs.push(mat(format!("{b}.sa.ffn_w1"), d, f));
        specs.push(zero(format!("{b}.sa.ffn_b1"), 1, f));
        specs.push(mat(format!("{b}.sa.ffn_w2"), f, d));
        specs.push(zero(format!("{b}.sa.ffn_b2"), 1, d));
        specs.push(ones(format!("{b}.sa.ln2_g"), d));
        specs.push(zero(format!("{b}.sa.ln2_b"), 1, d));
        for dir in ["tv", "vt"] {
            for w in ["wq", "wk", "wv", "wo"] {
                specs.push(mat(format!("{b}.sca.{dir}_{w}"), d, d));
            }
        }
        specs.push(ones(format!("{b}.sca.ln_t_g"), d));
        specs.push(zero(format!("{b}.sca.ln_t_b"), 1, d));
        specs.push(ones(format!("{b}.sca.ln_v_g"), d));
        specs.push(zero(format!("{b}.sca.ln_v_b"), 1, d));
        for s in ["t", "v"] {
            specs.push(mat(format!("{b}.sca.ffn_{s}_w1"), d, f));
            specs.push(zero(format!("{b}.sca.ffn_{s}_b1"), 1, f));
            specs.push(mat(format!("{b}.sca.ffn_{s}_w2"), f, d));
            specs.push(zero(format!("{b}.sca.ffn_{s}_b2"), 1, d));
            specs.push(ones(format!("{b}.sca.ln2_{s}_g"), d));
            specs.push(zero(format!("{b}.sca.ln2_{s}_b"), 1, d));
        }
    }

    specs.push(mat("head.label_w".into(), d, N_LABELS));
    specs.push(zero("head.label_b".into(), 1, N_LABELS));
    for side in ["link", "sop"] {
        specs.push(mat(format!("head.{side}_wk"), d, d));
        specs.push(zero(format!("head.{side}_bk"), 1, d));
        specs.push(mat(format!("head.{side}_wv"), d, d));
        specs.push(zero(format!("head.{side}_bv"), 1, d));
        specs.push(mat(format!("head.{side}_wb"), d, d));
    }
    for p in 0..GTR_CHANNELS {
        specs.push(mat(format!("head.gtr_w{p}"), d, d));
    }
    specs.push(zero("head.gtr_b".into(), 1, GTR_CHANNELS));
    specs.push(mat("head.gtr_cls_w".into(), GTR_CHANNELS, GTR_CLASSES));
    specs.push(zero("head.gtr_cls_b".into(), 1, GTR_CLASSES));
    specs.push(mat("head.mvlm_w".into(), d, cfg.vocab));
    specs.push(zero("head.mvlm_b".into(), 1, cfg.vocab));
    specs.push(mat("head.tia_w".into(), d, 1));
    specs.push(zero("head.tia_b".into(), 1, 1));
    specs
}

impl ParamStore {
    /// Tensors with shapes but no data — just enough for a dry-run forward
    /// pass (shape checking and MAC counting). Never feed this to a real
    /// forward or to `save`.
    pub fn shape_only(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let entries = param_specs(cfg)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::shape_only(&shape)))
            .collect();
        Self::from_entries(entries)
    }

    /// Fresh model parameters, deterministic in `cfg.seed`.
    pub fn new_model(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let entries = param_specs(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Normal(sigma) => normal(&mut rng, sigma, n),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                (name, Tensor::from_vec(&shape, data))
            })
            .collect();
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut names = Vec::with_capacity(entries.len());
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, tensor) in entries {
            if index.insert(name.clone(), names.len()).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter name {name}")));
            }
            names.push(name);
            tensors.push(tensor);
        }
        let velocity = vec![None; names.len()];
        Ok(ParamStore { names, tensors, index, velocity })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.idx(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.idx(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, i: usize) -> (&str, &Tensor) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// One gradient-descent step with momentum; gradients are cleared after.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            let Some(grad) = t.grad.as_ref() else { continue };
            let vel = self.velocity[i].get_or_insert_with(|| vec![0.0; t.numel()]);
            for ((p, &g), v) in t.data.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
            t.zero_grad();
        }
    }

    pub fn save(&self, cfg: &ModelConfig, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, encode_checkpoint(cfg, self)?)?)
    }

    /// Load a checkpoint and validate it against its own embedded config:
    /// every parameter the topology requires must be present with the right
    /// shape, and nothing extra.
    pub fn load(path: &Path) -> Result<(ModelConfig, Self)> {
        let bytes = std::fs::read(path)?;
        let (cfg, entries) = decode_checkpoint(&bytes)?;
        let store = Self::from_entries(entries)?;
        let specs = param_specs(&cfg);
        if specs.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, config requires {}",
                store.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in specs {
            let t = store
                .get(&name)
                .map_err(|_| Error::Checkpoint(format!("checkpoint is missing {name}")))?;
            if t.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, config requires {:?}",
                    t.shape, shape
                )));
            }
        }
        Ok((cfg, store))
    }
}

/// Inserts parameters into a graph on first use and replays the same node on
/// every later request, so shared parameters (guidance, segment tables) get a
/// single leaf whose gradient accumulates across all uses.
#[derive(Default)]
pub struct Binder {
    nodes: HashMap<usize, NodeId>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<NodeId> {
        let i = store.idx(name)?;
        if let Some(&id) = self.nodes.get(&i) {
            return Ok(id);
        }
        let id = g.param(&store.tensors[i]);
        self.nodes.insert(i, id);
        Ok(id)
    }

    /// Copy gradients from the graph back into the store (additively).
    pub fn store_grads(&self, g: &Graph, store: &mut ParamStore) {
        for (&i, &node) in &self.nodes {
            if let Some(grad) = g.grad(node) {
                let buf = store.tensors[i].grad_mut();
                for (o, &v) in buf.iter_mut().zip(grad) {
                    *o += v;
                }
            }
        }
    }
}

// ---- checkpoint codec --------------------------------------------------------
//
// layout: magic "DGLSCKPT" | u32 version | u32 config-JSON length | JSON |
// u32 tensor count | per tensor: u16 name length | name | u8 rank |
// rank x u32 dims | numel x f64 data. All integers and floats little-endian.

pub fn encode_checkpoint(cfg: &ModelConfig, store: &ParamStore) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg_json);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for &dim in &t.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decode a checkpoint without assuming anything about the producer. Never
/// panics or over-allocates on malformed input: every length is validated
/// against the bytes that actually remain before any allocation happens.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let cfg_str = std::str::from_utf8(cfg_bytes)
        .map_err(|_| Error::Checkpoint("config JSON is not UTF-8".into()))?;
    let cfg = ModelConfig::from_json(cfg_str)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

    let count = r.u32()? as usize;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("tensor {name}: rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let dim = r.u32()? as usize;
            numel = numel
                .checked_mul(dim)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: size overflow")))?;
            shape.push(dim);
        }
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {name}: size overflow"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.d = 16;
        cfg.heads = 2;
        cfg.d_ffn = 32;
        cfg.l_t = 32;
        cfg.l_v = 8;
        cfg.vocab = 64;
        cfg.n_stages = 2;
        cfg
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = tiny_cfg();
        let a = ParamStore::new_model(&cfg).unwrap();
        let b = ParamStore::new_model(&cfg).unwrap();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        let mut cfg2 = cfg;
        cfg2.seed = 7;
        let c = ParamStore::new_model(&cfg2).unwrap();
        assert_ne!(a.get("embed.word").unwrap().data, c.get("embed.word").unwrap().data);
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let store = ParamStore::new_model(&tiny_cfg()).unwrap();
        assert!(store.get("m0.sa.ln1_g").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(store.get("e1.sca.ln2_v_b").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let entries = vec![("p".to_string(), Tensor::from_vec(&[1, 1], vec![1.0]))];
        let mut store = ParamStore::from_entries(entries).unwrap();
        store.get_mut("p").unwrap().grad_mut()[0] = 1.0;
        store.sgd_step(0.1, 0.9);
        // v = 1, p = 1 - 0.1
        assert!((store.get("p").unwrap().data[0] - 0.9).abs() < 1e-15);
        store.get_mut("p").unwrap().grad_mut()[0] = 1.0;
        store.sgd_step(0.1, 0.9);
        // v = 0.9 + 1 = 1.9, p = 0.9 - 0.19
        assert!((store.get("p").unwrap().data[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_keeps_parameters_fixed() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new_model(&cfg).unwrap();
        let before = store.get("m0.sa.wq").unwrap().data.clone();
        store.get_mut("m0.sa.wq").unwrap().grad_mut()[3] = 5.0;
        store.sgd_step(0.0, 0.9);
        assert_eq!(store.get("m0.sa.wq").unwrap().data, before);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let cfg = tiny_cfg();
        let store = ParamStore::new_model(&cfg).unwrap();
        let bytes = encode_checkpoint(&cfg, &store).unwrap();
        let (cfg2, entries) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(entries.len(), store.len());
        for ((name, t), (n2, t2)) in store.iter().zip(entries.iter()) {
            assert_eq!(name, n2);
            assert_eq!(t.shape, t2.shape);
            assert_eq!(t.data, t2.data);
        }
    }

    #[test]
    fn decode_rejects_malformed_inputs() {
        let cfg = tiny_cfg();
        let store = ParamStore::new_model(&cfg).unwrap();
        let good = encode_checkpoint(&cfg, &store).unwrap();

        assert!(decode_checkpoint(b"").is_err());
        assert!(decode_checkpoint(b"NOTMAGIC").is_err());
        let mut bad_version = good.clone();
        bad_version[8] = 9;
        assert!(decode_checkpoint(&bad_version).is_err());
        // truncation anywhere must error, never panic
        for cut in [9, 13, 20, good.len() / 2, good.len() - 1] {
            assert!(decode_checkpoint(&good[..cut]).is_err());
        }
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
        // a dim length field claiming more data than the file holds
        let mut huge = good.clone();
        let pos = 8 + 4 + 4 + {
            let l = u32::from_le_bytes(good[12..16].try_into().unwrap()) as usize;
            l
        } + 4 + 2 + "embed.word".len() + 1;
        huge[pos..pos + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&huge).is_err());
    }

    #[test]
    fn binder_reuses_nodes_and_accumulates_grads() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new_model(&cfg).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new();
        let a = b.bind(&mut g, &store, "guide.v2l_w").unwrap();
        let a2 = b.bind(&mut g, &store, "guide.v2l_w").unwrap();
        assert_eq!(a, a2);
        let s1 = g.sum_all(a);
        let s2 = g.sum_all(a2);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        b.store_grads(&g, &mut store);
        // used twice, so every entry's gradient is 2
        assert!(store
            .get("guide.v2l_w")
            .unwrap()
            .grad
            .as_ref()
            .unwrap()
            .iter()
            .all(|&v| v == 2.0));
    }

    #[test]
    fn loading_rejects_shape_drift() {
        let cfg = tiny_cfg();
        let store = ParamStore::new_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        store.save(&cfg, &path).unwrap();
        let (cfg2, loaded) = ParamStore::load(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(loaded.len(), store.len());

        // tamper: drop one tensor
        let mut entries: Vec<(String, Tensor)> =
            store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.pop();
        let partial = ParamStore::from_entries(entries).unwrap();
        std::fs::write(&path, encode_checkpoint(&cfg, &partial).unwrap()).unwrap();
        assert!(matches!(ParamStore::load(&path), Err(Error::Checkpoint(_))));
    }
}
