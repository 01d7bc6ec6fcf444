//! Pre-norm encoder-decoder transformer whose top encoder layers accept
//! plugin prefixes.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::attention::{
    cross_attention, multi_head, prefix_attention, project_memory, AttnWeights,
};
use super::params::{attn_names, init_params, mapping_names};
use super::{ModelConfig, ParamSet, PluginSharing, MAX_TARGET_LEN};
use crate::adapt::{adapter_forward, AdapterConfig};
use crate::tensor::{FlopCounter, Graph, Tensor, Var};
use crate::text::{EOS, PAD};
use crate::{Error, Result};

/// A backbone (or task model derived from one).
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub adapter: Option<AdapterConfig>,
    /// Hash of the backbone this model was derived from. Plugins encoded
    /// by that backbone stay compatible after task tuning.
    pub base_hash: Option<[u8; 32]>,
}

/// Per encoder layer, the prefix inserted there (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefixes(pub Vec<Option<Var>>);

impl LayerPrefixes {
    pub fn none(n_layers: usize) -> Self {
        Self(vec![None; n_layers])
    }

    pub fn get(&self, layer: usize) -> Option<Var> {
        self.0.get(layer).copied().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(Option::is_none)
    }
}

/// Which parameters become gradient-carrying leaves in a [`Ctx`].
#[derive(Debug, Clone, Copy)]
pub enum Trainable<'a> {
    Nothing,
    Everything,
    Only(&'a BTreeSet<String>),
}

impl Trainable<'_> {
    fn includes(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Everything => true,
            Trainable::Only(set) => set.contains(name),
        }
    }
}

/// Incremental decoding state: cached self-attention keys/values per
/// layer and the encoder memory projected once per layer.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pos: usize,
    self_kv: Vec<Option<(Var, Var)>>,
    cross_kv: Vec<(Var, Var)>,
}

impl Backbone {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Self {
            config,
            params,
            adapter: None,
            base_hash: None,
        })
    }

    /// SHA-256 over the config, adapter config and f32-rounded weights.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(serde_json::to_vec(&self.adapter).expect("adapter serializes"));
        self.params.hash_into(&mut h);
        h.finalize().into()
    }

    /// Identity used for plugin compatibility: the base backbone's hash
    /// for derived task models, otherwise this model's content hash.
    pub fn lineage_hash(&self) -> [u8; 32] {
        self.base_hash.unwrap_or_else(|| self.content_hash())
    }

    /// Pins the current weights as the base that plugins refer to.
    pub fn pin_lineage(&mut self) {
        if self.base_hash.is_none() {
            self.base_hash = Some(self.content_hash());
        }
    }

    pub fn round_to_f32(&mut self) {
        self.params.round_to_f32();
    }

    /// Encodes `ids` without gradients, with optional per-layer prefixes.
    pub fn encode(&self, ids: &[u32], prefixes: Option<&[Option<Tensor>]>) -> Result<Tensor> {
        let mut ctx = Ctx::inference(self);
        let p = ctx.bind_prefixes(prefixes);
        let out = ctx.encode(ids, &p)?;
        Ok(ctx.g.value(out).clone())
    }

    /// Teacher-forced decoder logits `[len(target)×V]`.
    pub fn logits(
        &self,
        query: &[u32],
        prefixes: Option<&[Option<Tensor>]>,
        target: &[u32],
    ) -> Result<Tensor> {
        let mut ctx = Ctx::inference(self);
        let p = ctx.bind_prefixes(prefixes);
        let enc = ctx.encode(query, &p)?;
        let logits = ctx.decode_logits(enc, target)?;
        Ok(ctx.g.value(logits).clone())
    }

    /// Greedy decoding until EOS or `max_new` tokens.
    pub fn generate_greedy(
        &self,
        query: &[u32],
        prefixes: Option<&[Option<Tensor>]>,
        max_new: usize,
    ) -> Result<Vec<u32>> {
        let mut ctx = Ctx::inference(self);
        let p = ctx.bind_prefixes(prefixes);
        let enc = ctx.encode(query, &p)?;
        ctx.generate(enc, max_new, true)
    }

    /// Logits of the first decoding step, used for yes/no classification.
    pub fn first_step_logits(
        &self,
        query: &[u32],
        prefixes: Option<&[Option<Tensor>]>,
    ) -> Result<Tensor> {
        let mut ctx = Ctx::inference(self);
        let p = ctx.bind_prefixes(prefixes);
        let enc = ctx.encode(query, &p)?;
        let mut st = ctx.start_decoding(enc)?;
        let l = ctx.decode_step(&mut st, PAD)?;
        Ok(ctx.g.value(l).clone())
    }

    /// FLOPs of encoding `query` and greedily producing exactly `steps`
    /// tokens (EOS does not stop it).
    pub fn inference_flops(
        &self,
        query: &[u32],
        prefixes: Option<&[Option<Tensor>]>,
        steps: usize,
    ) -> Result<FlopCounter> {
        let mut ctx = Ctx::inference(self);
        let p = ctx.bind_prefixes(prefixes);
        let enc = ctx.encode(query, &p)?;
        ctx.generate(enc, steps, false)?;
        Ok(ctx.g.flops().clone())
    }
}

/// A forward pass over one [`Graph`], binding parameters lazily.
pub struct Ctx<'m> {
    pub g: Graph,
    model: &'m Backbone,
    trainable: Trainable<'m>,
    bound: HashMap<String, Var>,
}

impl<'m> Ctx<'m> {
    pub fn new(model: &'m Backbone, trainable: Trainable<'m>) -> Self {
        Self {
            g: Graph::new(),
            model,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn inference(model: &'m Backbone) -> Self {
        Self::new(model, Trainable::Nothing)
    }

    /// Continues on an existing graph, e.g. one whose leaves a caller
    /// wants to bind as parameters with [`Ctx::bind`].
    pub fn with_graph(model: &'m Backbone, g: Graph, trainable: Trainable<'m>) -> Self {
        Self {
            g,
            model,
            trainable,
            bound: HashMap::new(),
        }
    }

    /// Uses `v` for parameter `name` instead of a copy of the model's.
    pub fn bind(&mut self, name: impl Into<String>, v: Var) {
        self.bound.insert(name.into(), v);
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn model(&self) -> &'m Backbone {
        self.model
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.g.leaf(t.clone(), self.trainable.includes(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter after `g.backward`.
    pub fn gradients(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.g.grad(v).map(|t| (name.clone(), t)))
            .collect()
    }

    /// Adds mapped prefix tensors to the graph as constants.
    pub fn bind_prefixes(&mut self, prefixes: Option<&[Option<Tensor>]>) -> LayerPrefixes {
        let n = self.config().n_enc_layers;
        let mut out = LayerPrefixes::none(n);
        if let Some(ps) = prefixes {
            let mut cache: Vec<(*const Tensor, Var)> = Vec::new();
            for (l, p) in ps.iter().enumerate().take(n) {
                if let Some(t) = p {
                    // shared prefixes become a single node
                    let key = t as *const Tensor;
                    let v = match cache.iter().find(|(k, _)| *k == key) {
                        Some(&(_, v)) => v,
                        None => {
                            let v = self.g.constant(t.clone());
                            cache.push((key, v));
                            v
                        }
                    };
                    out.0[l] = Some(v);
                }
            }
        }
        out
    }

    fn attn_weights(&mut self, prefix: &str) -> Result<AttnWeights> {
        let [q, k, v, o] = attn_names(prefix);
        Ok(AttnWeights {
            wq: self.param(&q)?,
            wk: self.param(&k)?,
            wv: self.param(&v)?,
            wo: self.param(&o)?,
        })
    }

    fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        Ok(self.g.layer_norm(x, gamma, beta)?)
    }

    fn embed(&mut self, ids: &[u32], pos_table: &str, first_pos: usize) -> Result<Var> {
        let cfg = self.config();
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if first_pos + ids.len() > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_len {}",
                first_pos + ids.len(),
                cfg.max_len
            )));
        }
        let table = self.param("embed.tokens")?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = self.g.embedding(table, &idx)?;
        let pos_all = self.param(pos_table)?;
        let pos = self.g.slice(pos_all, 0, first_pos, ids.len())?;
        Ok(self.g.add(tok, pos)?)
    }

    /// Feed-forward sublayer with the optional adapter after its norm.
    fn ffn_block(&mut self, x: Var, layer_prefix: &str, norm_name: &str) -> Result<Var> {
        let mut h = self.norm(x, norm_name)?;
        if self.model.adapter.is_some() {
            let down = self.param(&format!("{layer_prefix}.adapter.down"))?;
            let up = self.param(&format!("{layer_prefix}.adapter.up"))?;
            self.g.push_scope(format!("{layer_prefix}.adapter"));
            let r = adapter_forward(&mut self.g, h, down, up);
            self.g.pop_scope();
            h = r?;
        }
        let w1 = self.param(&format!("{layer_prefix}.ffn.w1"))?;
        let w2 = self.param(&format!("{layer_prefix}.ffn.w2"))?;
        self.g.push_scope(format!("{layer_prefix}.ffn"));
        let r = (|| {
            let a = self.g.matmul(h, w1)?;
            let a = self.g.relu(a);
            self.g.matmul(a, w2)
        })();
        self.g.pop_scope();
        Ok(self.g.add(x, r?)?)
    }

    /// Encoder forward. Prefixes given for layers below the plugged range
    /// are ignored.
    pub fn encode(&mut self, ids: &[u32], prefixes: &LayerPrefixes) -> Result<Var> {
        Ok(self.encode_traced(ids, prefixes)?.0)
    }

    /// Encoder forward that also returns every layer's residual output.
    pub fn encode_traced(
        &mut self,
        ids: &[u32],
        prefixes: &LayerPrefixes,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = self.config();
        let mut x = self.embed(ids, "enc.pos", 0)?;
        let mut trace = Vec::with_capacity(cfg.n_enc_layers);
        for l in 0..cfg.n_enc_layers {
            let prefix = if cfg.is_plugged_layer(l) {
                prefixes.get(l)
            } else {
                None
            };
            let lp = format!("enc.{l}");
            let a = self.norm(x, &format!("{lp}.attn_norm"))?;
            let w = self.attn_weights(&format!("{lp}.self_attn"))?;
            self.g.push_scope(format!("{lp}.self_attn"));
            let attn = prefix_attention(&mut self.g, a, prefix, &w, cfg.n_heads, false);
            self.g.pop_scope();
            x = self.g.add(x, attn?)?;
            x = self.ffn_block(x, &lp, &format!("{lp}.ffn_norm"))?;
            trace.push(x);
        }
        let out = self.norm(x, "enc.final_norm")?;
        Ok((out, trace))
    }

    /// Maps raw document states `[L_d×d]` to prefixes for every plugged
    /// layer: `p = h + ReLU(h·W1)·W2`.
    pub fn map_plugin(&mut self, hidden: Var) -> Result<LayerPrefixes> {
        let cfg = self.config();
        let d = cfg.d_model;
        if self.g.value(hidden).cols() != d {
            return Err(Error::Tensor(crate::tensor::TensorError::Shape(format!(
                "plugin width {} != d_model {d}",
                self.g.value(hidden).cols()
            ))));
        }
        let mut out = LayerPrefixes::none(cfg.n_enc_layers);
        let mut shared: Option<Var> = None;
        for l in cfg.first_plugged_layer()..cfg.n_enc_layers {
            if cfg.plugin_sharing == PluginSharing::Shared {
                if let Some(p) = shared {
                    out.0[l] = Some(p);
                    continue;
                }
            }
            let (n1, n2) = mapping_names(cfg, l);
            let w1 = self.param(&n1)?;
            let w2 = self.param(&n2)?;
            let p = map_rows(&mut self.g, hidden, w1, w2)?;
            shared = Some(p);
            out.0[l] = Some(p);
        }
        Ok(out)
    }

    /// Teacher-forced decoder logits for `target` (the decoder input is
    /// PAD followed by `target` shifted right).
    pub fn decode_logits(&mut self, enc: Var, target: &[u32]) -> Result<Var> {
        let cfg = self.config();
        if target.is_empty() {
            return Err(Error::Input("empty target".into()));
        }
        if target.len() > MAX_TARGET_LEN {
            return Err(Error::Input(format!(
                "target of {} tokens exceeds {MAX_TARGET_LEN}",
                target.len()
            )));
        }
        let mut input = Vec::with_capacity(target.len());
        input.push(PAD);
        input.extend_from_slice(&target[..target.len() - 1]);
        let mut x = self.embed(&input, "dec.pos", 0)?;
        for l in 0..cfg.n_dec_layers {
            let lp = format!("dec.{l}");
            let a = self.norm(x, &format!("{lp}.self_norm"))?;
            let w = self.attn_weights(&format!("{lp}.self_attn"))?;
            self.g.push_scope(format!("{lp}.self_attn"));
            let sa = prefix_attention(&mut self.g, a, None, &w, cfg.n_heads, true);
            self.g.pop_scope();
            x = self.g.add(x, sa?)?;
            let c = self.norm(x, &format!("{lp}.cross_norm"))?;
            let w = self.attn_weights(&format!("{lp}.cross_attn"))?;
            self.g.push_scope(format!("{lp}.cross_attn"));
            let ca = project_memory(&mut self.g, enc, &w)
                .and_then(|(k, v)| cross_attention(&mut self.g, c, k, v, &w, cfg.n_heads));
            self.g.pop_scope();
            x = self.g.add(x, ca?)?;
            x = self.ffn_block(x, &lp, &format!("{lp}.ffn_norm"))?;
        }
        self.lm_head(x)
    }

    fn lm_head(&mut self, x: Var) -> Result<Var> {
        let h = self.norm(x, "dec.final_norm")?;
        let w = self.param("lm_head")?;
        self.g.push_scope("lm_head");
        let r = self.g.matmul(h, w);
        self.g.pop_scope();
        Ok(r?)
    }

    /// Mean token-level negative log-likelihood of `target`.
    pub fn decode_loss(&mut self, enc: Var, target: &[u32]) -> Result<Var> {
        let logits = self.decode_logits(enc, target)?;
        let t: Vec<usize> = target.iter().map(|&x| x as usize).collect();
        Ok(self.g.cross_entropy(logits, &t)?)
    }

    pub fn start_decoding(&mut self, enc: Var) -> Result<DecodeState> {
        let cfg = self.config();
        let mut cross_kv = Vec::with_capacity(cfg.n_dec_layers);
        for l in 0..cfg.n_dec_layers {
            let w = self.attn_weights(&format!("dec.{l}.cross_attn"))?;
            self.g.push_scope(format!("dec.{l}.cross_attn"));
            let kv = project_memory(&mut self.g, enc, &w);
            self.g.pop_scope();
            cross_kv.push(kv?);
        }
        Ok(DecodeState {
            pos: 0,
            self_kv: vec![None; cfg.n_dec_layers],
            cross_kv,
        })
    }

    /// Feeds one token and returns next-token logits `[1×V]`.
    pub fn decode_step(&mut self, st: &mut DecodeState, token: u32) -> Result<Var> {
        let cfg = self.config();
        let mut x = self.embed(&[token], "dec.pos", st.pos)?;
        for l in 0..cfg.n_dec_layers {
            let lp = format!("dec.{l}");
            let a = self.norm(x, &format!("{lp}.self_norm"))?;
            let w = self.attn_weights(&format!("{lp}.self_attn"))?;
            self.g.push_scope(format!("{lp}.self_attn"));
            let sa = (|| -> Result<Var> {
                self.g.push_scope("proj");
                let qkv = (|| {
                    Ok::<_, crate::tensor::TensorError>((
                        self.g.matmul(a, w.wq)?,
                        self.g.matmul(a, w.wk)?,
                        self.g.matmul(a, w.wv)?,
                    ))
                })();
                self.g.pop_scope();
                let (q, k, v) = qkv?;
                let (k_all, v_all) = match st.self_kv[l] {
                    Some((kc, vc)) => (self.g.concat(&[kc, k], 0)?, self.g.concat(&[vc, v], 0)?),
                    None => (k, v),
                };
                st.self_kv[l] = Some((k_all, v_all));
                let ctx = multi_head(&mut self.g, q, k_all, v_all, cfg.n_heads, false)?;
                self.g.push_scope("proj");
                let o = self.g.matmul(ctx, w.wo);
                self.g.pop_scope();
                Ok(o?)
            })();
            self.g.pop_scope();
            x = self.g.add(x, sa?)?;
            let c = self.norm(x, &format!("{lp}.cross_norm"))?;
            let w = self.attn_weights(&format!("{lp}.cross_attn"))?;
            let (mk, mv) = st.cross_kv[l];
            self.g.push_scope(format!("{lp}.cross_attn"));
            let ca = cross_attention(&mut self.g, c, mk, mv, &w, cfg.n_heads);
            self.g.pop_scope();
            x = self.g.add(x, ca?)?;
            x = self.ffn_block(x, &lp, &format!("{lp}.ffn_norm"))?;
        }
        st.pos += 1;
        self.lm_head(x)
    }

    /// Greedy decoding from encoder output `enc`. With `stop_at_eos`
    /// generation ends at EOS (not included in the output).
    pub fn generate(&mut self, enc: Var, max_new: usize, stop_at_eos: bool) -> Result<Vec<u32>> {
        if max_new > MAX_TARGET_LEN {
            return Err(Error::Input(format!(
                "max_new {max_new} exceeds {MAX_TARGET_LEN}"
            )));
        }
        let mut st = self.start_decoding(enc)?;
        let mut out = Vec::new();
        let mut token = PAD;
        for _ in 0..max_new {
            let logits = self.decode_step(&mut st, token)?;
            let next = argmax(self.g.value(logits).data()) as u32;
            if stop_at_eos && next == EOS {
                break;
            }
            out.push(next);
            token = next;
        }
        Ok(out)
    }
}

/// `h + ReLU(h·W1)·W2`, tagged `mapping`.
pub fn map_rows(g: &mut Graph, h: Var, w1: Var, w2: Var) -> Result<Var> {
    g.push_scope("mapping");
    let r = (|| {
        let a = g.matmul(h, w1)?;
        let a = g.relu(a);
        let b = g.matmul(a, w2)?;
        g.add(h, b)
    })();
    g.pop_scope();
    Ok(r?)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Adam};
    use crate::text::sentinel;

    type M = Vec<Vec<f64>>;

    fn small(d: usize, n_enc: usize, n_dec: usize, n_plug: usize) -> Backbone {
        let cfg = ModelConfig {
            d_model: d,
            n_heads: 2,
            d_ff: 2 * d,
            n_enc_layers: n_enc,
            n_dec_layers: n_dec,
            n_plug,
            vocab_size: 120,
            max_len: 24,
            plugin_sharing: PluginSharing::Shared,
            also_decoder_cross: false,
            init_std: 0.3,
        };
        Backbone::new(cfg, 17).unwrap()
    }

    fn t2m(t: &Tensor) -> M {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|r| {
                (0..b[0].len())
                    .map(|j| (0..r.len()).map(|k| r[k] * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    struct Oracle<'a>(&'a Backbone);

    impl Oracle<'_> {
        fn p(&self, n: &str) -> M {
            let t = self.0.params.get(n).unwrap();
            if t.shape().len() == 1 {
                vec![t.data().to_vec()]
            } else {
                t2m(t)
            }
        }

        fn ln(&self, x: &M, n: &str) -> M {
            let (g, b) = (
                self.p(&format!("{n}.gamma"))[0].clone(),
                self.p(&format!("{n}.beta"))[0].clone(),
            );
            x.iter()
                .map(|r| {
                    let mu = r.iter().sum::<f64>() / r.len() as f64;
                    let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
                    r.iter()
                        .enumerate()
                        .map(|(j, v)| (v - mu) / (var + 1e-6).sqrt() * g[j] + b[j])
                        .collect()
                })
                .collect()
        }

        fn attn(&self, x: &M, mem: &M, n: &str, causal: bool) -> M {
            let heads = self.0.config.n_heads;
            let q = mm(x, &self.p(&format!("{n}.wq")));
            let k = mm(mem, &self.p(&format!("{n}.wk")));
            let v = mm(mem, &self.p(&format!("{n}.wv")));
            let d = q[0].len();
            let dh = d / heads;
            let mut ctx = vec![vec![0.0; d]; q.len()];
            for i in 0..q.len() {
                for h in 0..heads {
                    let visible = if causal {
                        i + 1 + k.len() - q.len()
                    } else {
                        k.len()
                    };
                    let s: Vec<f64> = (0..visible)
                        .map(|j| {
                            (h * dh..(h + 1) * dh)
                                .map(|c| q[i][c] * k[j][c])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
                    for c in h * dh..(h + 1) * dh {
                        ctx[i][c] = (0..visible).map(|j| (s[j] - m).exp() / z * v[j][c]).sum();
                    }
                }
            }
            mm(&ctx, &self.p(&format!("{n}.wo")))
        }

        fn ffn(&self, x: &M, lp: &str, norm: &str) -> M {
            let f = self.ln(x, norm);
            let mut a = mm(&f, &self.p(&format!("{lp}.ffn.w1")));
            a.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
            add(x, &mm(&a, &self.p(&format!("{lp}.ffn.w2"))))
        }

        fn embed(&self, ids: &[u32], pos: &str) -> M {
            let (e, p) = (self.p("embed.tokens"), self.p(pos));
            ids.iter()
                .enumerate()
                .map(|(i, &t)| {
                    e[t as usize]
                        .iter()
                        .zip(&p[i])
                        .map(|(a, b)| a + b)
                        .collect()
                })
                .collect()
        }

        fn loss(&self, query: &[u32], target: &[u32]) -> f64 {
            let cfg = &self.0.config;
            let mut x = self.embed(query, "enc.pos");
            for l in 0..cfg.n_enc_layers {
                let a = self.ln(&x, &format!("enc.{l}.attn_norm"));
                x = add(&x, &self.attn(&a, &a, &format!("enc.{l}.self_attn"), false));
                x = self.ffn(&x, &format!("enc.{l}"), &format!("enc.{l}.ffn_norm"));
            }
            let enc = self.ln(&x, "enc.final_norm");
            let mut input = vec![PAD];
            input.extend_from_slice(&target[..target.len() - 1]);
            let mut y = self.embed(&input, "dec.pos");
            for l in 0..cfg.n_dec_layers {
                let a = self.ln(&y, &format!("dec.{l}.self_norm"));
                y = add(&y, &self.attn(&a, &a, &format!("dec.{l}.self_attn"), true));
                let c = self.ln(&y, &format!("dec.{l}.cross_norm"));
                y = add(
                    &y,
                    &self.attn(&c, &enc, &format!("dec.{l}.cross_attn"), false),
                );
                y = self.ffn(&y, &format!("dec.{l}"), &format!("dec.{l}.ffn_norm"));
            }
            let logits = mm(&self.ln(&y, "dec.final_norm"), &self.p("lm_head"));
            let nll: f64 = logits
                .iter()
                .zip(target)
                .map(|(r, &t)| {
                    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - r[t as usize]
                })
                .sum();
            nll / target.len() as f64
        }
    }

    fn loss_of(m: &Backbone, q: &[u32], t: &[u32]) -> f64 {
        let mut ctx = Ctx::inference(m);
        let enc = ctx
            .encode(q, &LayerPrefixes::none(m.config.n_enc_layers))
            .unwrap();
        let l = ctx.decode_loss(enc, t).unwrap();
        ctx.g.value(l).item()
    }

    #[test]
    fn decode_loss_matches_scalar_oracle() {
        let m = small(8, 2, 2, 1);
        let (q, t) = ([105, 110, 104, 119], [111, 112, 113, EOS]);
        let expected = Oracle(&m).loss(&q, &t);
        assert!((loss_of(&m, &q, &t) - expected).abs() < 1e-10);
    }

    #[test]
    fn untrained_loss_is_near_ln_v() {
        let m = Backbone::new(ModelConfig::toy(300), 3).unwrap();
        let l = loss_of(&m, &[150, 151, 152], &[200, 250, 120, 299]);
        let ln_v = 300f64.ln();
        assert!((l - ln_v).abs() / ln_v < 0.05, "{l} vs {ln_v}");
    }

    fn rig_output(m: &mut Backbone, token: u32) {
        let d = m.config.d_model;
        let gamma = m.params.get_mut("dec.final_norm.gamma").unwrap();
        gamma.data_mut().iter_mut().for_each(|x| *x = 0.0);
        m.params.get_mut("dec.final_norm.beta").unwrap().data_mut()[0] = 1.0;
        let head = m.params.get_mut("lm_head").unwrap();
        let v = head.cols();
        head.data_mut().iter_mut().for_each(|x| *x = 0.0);
        head.data_mut()[token as usize] = 50.0;
        assert!(d > 0 && v > token as usize);
    }

    #[test]
    fn rigged_output_layer() {
        let mut m = small(8, 2, 2, 1);
        rig_output(&mut m, 107);
        assert!(loss_of(&m, &[105, 106], &[107, 107, 107]) < 1e-10);
        rig_output(&mut m, EOS);
        assert!(m.generate_greedy(&[105, 106], None, 10).unwrap().is_empty());
    }

    #[test]
    fn empty_or_long_targets_are_rejected() {
        let m = small(8, 2, 2, 1);
        let mut ctx = Ctx::inference(&m);
        let enc = ctx.encode(&[105], &LayerPrefixes::none(2)).unwrap();
        assert!(matches!(ctx.decode_loss(enc, &[]), Err(Error::Input(_))));
        assert!(ctx.decode_loss(enc, &[105; 129]).is_err());
        assert!(m.generate_greedy(&[105], None, 129).is_err());
    }

    #[test]
    fn cached_decoding_matches_teacher_forcing() {
        let m = small(8, 2, 3, 1);
        let target = [111, 112, 113, 114, EOS];
        let full = m.logits(&[105, 106, 107], None, &target).unwrap();
        let mut ctx = Ctx::inference(&m);
        let enc = ctx
            .encode(&[105, 106, 107], &LayerPrefixes::none(2))
            .unwrap();
        let mut st = ctx.start_decoding(enc).unwrap();
        let mut prev = PAD;
        for (i, &t) in target.iter().enumerate() {
            let step = ctx.decode_step(&mut st, prev).unwrap();
            let row = ctx.g.value(step);
            for j in 0..row.cols() {
                assert!((row.at(0, j) - full.at(i, j)).abs() < 1e-12);
            }
            prev = t;
        }
    }

    #[test]
    fn encode_flops_by_layer() {
        let m = small(16, 2, 1, 1);
        let flops = |lp: usize| {
            let prefix = Tensor::filled(&[lp, 16], 0.1);
            let mut ctx = Ctx::inference(&m);
            let p = ctx.bind_prefixes(Some(&[None, Some(prefix)]));
            ctx.encode(&[105, 106, 107], &p).unwrap();
            ctx.g.flops().clone()
        };
        let (f2, f3, f4) = (flops(2), flops(3), flops(4));
        assert_eq!(f2.sum_prefix("enc.0."), f4.sum_prefix("enc.0."));
        let top = |f: &FlopCounter| f.sum_prefix("enc.1.");
        assert!(top(&f3) > top(&f2));
        assert_eq!(top(&f4) - top(&f2), 2 * (top(&f3) - top(&f2)));
        assert_eq!(f2.get("enc.0.self_attn.prefix_kv"), 0);
        assert_eq!(f2.get("enc.1.self_attn.prefix_kv"), 2 * 2 * 2 * 16 * 16);
        let mut again = Ctx::inference(&m);
        let p = again.bind_prefixes(Some(&[None, Some(Tensor::filled(&[2, 16], 0.1))]));
        again.encode(&[105, 106, 107], &p).unwrap();
        assert_eq!(again.g.flops(), &f2);
    }

    #[test]
    fn prefixes_only_touch_plugged_layers() {
        let m = small(8, 3, 1, 1);
        let run = |fill: f64| {
            let mut ctx = Ctx::inference(&m);
            let pre = Tensor::filled(&[2, 8], fill);
            let p = ctx.bind_prefixes(Some(&[Some(pre.clone()), Some(pre.clone()), Some(pre)]));
            let (_, trace) = ctx.encode_traced(&[105, 106], &p).unwrap();
            trace
                .iter()
                .map(|&v| ctx.g.value(v).clone())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(0.5), run(-0.5));
        assert!(a[0].bitwise_eq(&b[0]) && a[1].bitwise_eq(&b[1]));
        assert!(!a[2].bitwise_eq(&b[2]));
    }

    #[test]
    fn n_plug_zero_ignores_plugins() {
        let m = small(8, 2, 1, 0);
        let base = m.encode(&[105, 106], None).unwrap();
        let pre = Some(Tensor::filled(&[3, 8], 0.7));
        let with = m.encode(&[105, 106], Some(&[pre.clone(), pre])).unwrap();
        assert!(with.bitwise_eq(&base));
    }

    #[test]
    fn plugin_width_mismatch_is_shape_error() {
        let m = small(8, 2, 1, 1);
        let bad = Some(Tensor::filled(&[3, 6], 0.7));
        assert!(matches!(
            m.encode(&[105], Some(&[None, bad])),
            Err(Error::Tensor(_))
        ));
    }

    #[test]
    fn gradients_reach_mapping_through_prefixes() {
        let m = small(8, 2, 1, 1);
        let h = Tensor::filled(&[2, 8], 0.3);
        let w1 = m.params.get("map.w1").unwrap().clone();
        let w2 = m.params.get("map.w2").unwrap().clone();
        let report = grad_check(
            |g, p| {
                let mut ctx = Ctx::with_graph(&m, std::mem::take(g), Trainable::Nothing);
                ctx.bind("map.w1", p[0]);
                ctx.bind("map.w2", p[1]);
                let r = (|| {
                    let hv = ctx.g.constant(h.clone());
                    let pre = ctx.map_plugin(hv)?;
                    let enc = ctx.encode(&[105, 106], &pre)?;
                    ctx.decode_loss(enc, &[107, EOS])
                })();
                *g = ctx.into_graph();
                r.map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => crate::tensor::TensorError::Usage(other.to_string()),
                })
            },
            &[w1, w2],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn overfits_copy_task() {
        let mut m = small(16, 2, 2, 1);
        let q = [sentinel(0), 110, 111, 112];
        let target = [110, 111, 112, EOS];
        let mut opt = Adam::new(3e-3);
        for _ in 0..200 {
            let grads = {
                let mut ctx = Ctx::new(&m, Trainable::Everything);
                let enc = ctx.encode(&q, &LayerPrefixes::none(2)).unwrap();
                let loss = ctx.decode_loss(enc, &target).unwrap();
                ctx.g.backward(loss).unwrap();
                ctx.gradients()
            };
            let updates = m
                .params
                .iter_mut()
                .filter_map(|(n, t)| grads.get(n).map(|g| (n, t, g)));
            opt.step(updates);
        }
        let out = m.generate_greedy(&q, None, 10).unwrap();
        assert_eq!(out, &target[..3]);
        assert_eq!(out, m.generate_greedy(&q, None, 10).unwrap());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn lineage_hash_pins() {
        let mut m = small(8, 2, 1, 1);
        let h = m.content_hash();
        assert_eq!(m.lineage_hash(), h);
        m.pin_lineage();
        m.params.get_mut("lm_head").unwrap().data_mut()[0] += 1.0;
        assert_ne!(m.content_hash(), h);
        assert_eq!(m.lineage_hash(), h);
    }
}
