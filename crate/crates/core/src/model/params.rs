use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelConfig, PluginSharing};
use crate::tensor::Tensor;

/// Named parameter table. Names are path-like (`enc.3.self_attn.wq`) and
/// iteration order is lexicographic, which fixes checkpoint layout and
/// hashing order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.values_mut().for_each(Tensor::round_to_f32);
    }

    /// SHA-256 over one parameter's shape and f32 little-endian values.
    pub fn tensor_checksum(t: &Tensor) -> [u8; 32] {
        let mut h = Sha256::new();
        hash_tensor(&mut h, t);
        h.finalize().into()
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            hash_tensor(h, t);
        }
    }
}

fn hash_tensor(h: &mut Sha256, t: &Tensor) {
    h.update((t.shape().len() as u32).to_le_bytes());
    for &s in t.shape() {
        h.update((s as u32).to_le_bytes());
    }
    for &v in t.data() {
        h.update((v as f32).to_le_bytes());
    }
}

pub fn attn_names(prefix: &str) -> [String; 4] {
    ["wq", "wk", "wv", "wo"].map(|w| format!("{prefix}.{w}"))
}

/// Names of the mapping-network weights feeding encoder layer `layer`.
pub fn mapping_names(cfg: &ModelConfig, layer: usize) -> (String, String) {
    match cfg.plugin_sharing {
        PluginSharing::Shared => ("map.w1".into(), "map.w2".into()),
        PluginSharing::PerLayer => (format!("map.{layer}.w1"), format!("map.{layer}.w2")),
    }
}

pub fn is_mapping_param(name: &str) -> bool {
    name.starts_with("map.")
}

pub fn is_adapter_param(name: &str) -> bool {
    name.contains(".adapter.")
}

/// Fresh parameters: Gaussian(0, init_std) matrices and embeddings, unit
/// norm scales, zero norm shifts.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let std = cfg.init_std;
    let mut p = ParamSet::new();
    let mut mat = |p: &mut ParamSet, name: String, shape: &[usize]| {
        p.insert(name, Tensor::randn(shape, std, &mut rng));
    };
    mat(&mut p, "embed.tokens".into(), &[cfg.vocab_size, d]);
    mat(&mut p, "enc.pos".into(), &[cfg.max_len, d]);
    mat(&mut p, "dec.pos".into(), &[cfg.max_len, d]);
    for l in 0..cfg.n_enc_layers {
        for n in attn_names(&format!("enc.{l}.self_attn")) {
            mat(&mut p, n, &[d, d]);
        }
        mat(&mut p, format!("enc.{l}.ffn.w1"), &[d, cfg.d_ff]);
        mat(&mut p, format!("enc.{l}.ffn.w2"), &[cfg.d_ff, d]);
    }
    for l in 0..cfg.n_dec_layers {
        for n in attn_names(&format!("dec.{l}.self_attn")) {
            mat(&mut p, n, &[d, d]);
        }
        for n in attn_names(&format!("dec.{l}.cross_attn")) {
            mat(&mut p, n, &[d, d]);
        }
        mat(&mut p, format!("dec.{l}.ffn.w1"), &[d, cfg.d_ff]);
        mat(&mut p, format!("dec.{l}.ffn.w2"), &[cfg.d_ff, d]);
    }
    mat(&mut p, "lm_head".into(), &[d, cfg.vocab_size]);
    let mapped: Vec<usize> = match cfg.plugin_sharing {
        PluginSharing::Shared if cfg.n_plug > 0 => vec![cfg.first_plugged_layer()],
        PluginSharing::Shared => vec![],
        PluginSharing::PerLayer => (cfg.first_plugged_layer()..cfg.n_enc_layers).collect(),
    };
    for l in mapped {
        let (w1, w2) = mapping_names(cfg, l);
        mat(&mut p, w1, &[d, 2 * d]);
        mat(&mut p, w2, &[2 * d, d]);
    }
    let mut norms = Vec::new();
    for l in 0..cfg.n_enc_layers {
        norms.push(format!("enc.{l}.attn_norm"));
        norms.push(format!("enc.{l}.ffn_norm"));
    }
    for l in 0..cfg.n_dec_layers {
        norms.push(format!("dec.{l}.self_norm"));
        norms.push(format!("dec.{l}.cross_norm"));
        norms.push(format!("dec.{l}.ffn_norm"));
    }
    norms.push("enc.final_norm".into());
    norms.push("dec.final_norm".into());
    for n in norms {
        p.insert(format!("{n}.gamma"), Tensor::filled(&[d], 1.0));
        p.insert(format!("{n}.beta"), Tensor::zeros(&[d]));
    }
    p
}
