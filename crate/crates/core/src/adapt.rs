//! Downstream tuning: bottleneck adapters, freeze masks, plugging
//! strategies and inference.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{
    is_adapter_param, is_mapping_param, Backbone, Ctx, LayerPrefixes, Trainable, MAX_QUERY_LEN,
};
use crate::plugin::{check_compatible, MappingNetwork};
use crate::store::{PluginStore, StoreError};
use crate::tensor::{Adam, Graph, Tensor, Var};
use crate::{Error, Result};
use hex::encode as hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub r: usize,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r: 16,
            init_std: 1e-2,
        }
    }
}

/// `h + ReLU(h·W_down)·W_up`.
pub fn adapter_forward(g: &mut Graph, h: Var, down: Var, up: Var) -> crate::tensor::Result<Var> {
    let a = g.matmul(h, down)?;
    let a = g.relu(a);
    let b = g.matmul(a, up)?;
    g.add(h, b)
}

/// Adds one adapter per feed-forward block, encoder and decoder. The
/// model's lineage is pinned first so existing plugins stay compatible.
pub fn attach_adapters(model: &mut Backbone, cfg: AdapterConfig, seed: u64) -> Result<()> {
    if model.adapter.is_some() {
        return Err(Error::Usage("adapters already attached".into()));
    }
    let d = model.config.d_model;
    if cfg.r == 0 || cfg.r >= d {
        return Err(Error::Config(format!(
            "adapter bottleneck r={} must be in 1..{d}",
            cfg.r
        )));
    }
    model.pin_lineage();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = (0..model.config.n_enc_layers)
        .map(|l| format!("enc.{l}"))
        .chain((0..model.config.n_dec_layers).map(|l| format!("dec.{l}")));
    for lp in layers {
        model.params.insert(
            format!("{lp}.adapter.down"),
            Tensor::randn(&[d, cfg.r], cfg.init_std, &mut rng),
        );
        model.params.insert(
            format!("{lp}.adapter.up"),
            Tensor::randn(&[cfg.r, d], cfg.init_std, &mut rng),
        );
    }
    model.adapter = Some(cfg);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneMode {
    Pet,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Plugging {
    During,
    None,
}

/// Names of the parameters an optimizer may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreezeMask {
    pub trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn new(model: &Backbone, mode: TuneMode) -> Self {
        let trainable = model
            .params
            .names()
            .filter(|n| mode == TuneMode::Full || is_adapter_param(n) || is_mapping_param(n))
            .map(str::to_string)
            .collect();
        Self { trainable }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }
}

/// Applies one optimizer step to every parameter with a gradient.
pub fn apply_gradients(model: &mut Backbone, opt: &mut Adam, grads: &BTreeMap<String, Tensor>) {
    let updates = model
        .params
        .iter_mut()
        .filter_map(|(n, t)| grads.get(n).map(|g| (n, t, g)));
    opt.step(updates);
}

/// One downstream row, already tokenized. `answer` ends with EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskExample {
    pub query: Vec<u32>,
    pub doc_id: String,
    pub answer: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub mode: TuneMode,
    pub plugging: Plugging,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
}

fn check_store(store: &PluginStore, model: &Backbone) -> Result<()> {
    let expected = model.lineage_hash();
    if store.model_hash() != expected {
        return Err(StoreError::HashMismatch {
            expected: hex(expected),
            found: hex(store.model_hash()),
        }
        .into());
    }
    Ok(())
}

fn truncated(query: &[u32]) -> &[u32] {
    &query[..query.len().min(MAX_QUERY_LEN)]
}

/// Batch loss: mean over examples of mean answer NLL.
fn batch_loss(ctx: &mut Ctx, store: Option<&PluginStore>, batch: &[&TaskExample]) -> Result<Var> {
    let n_layers = ctx.config().n_enc_layers;
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let prefixes = match store {
            Some(s) => {
                let plugin = s.get(&ex.doc_id).map_err(|e| match e {
                    StoreError::NotFound(id) => {
                        Error::Data(format!("doc_id {id:?} not in plugin store"))
                    }
                    other => other.into(),
                })?;
                let h = ctx.g.constant(plugin.hidden);
                ctx.map_plugin(h)?
            }
            None => LayerPrefixes::none(n_layers),
        };
        let enc = ctx.encode(truncated(&ex.query), &prefixes)?;
        losses.push(ctx.decode_loss(enc, &ex.answer)?);
    }
    let total = ctx.g.add_all(&losses)?;
    Ok(ctx.g.scale(total, 1.0 / batch.len() as f64))
}

/// Tunes `model` on `data`. With `Plugging::During` every example's
/// plugin is read from `store`, mapped and inserted; with
/// `Plugging::None` the store is never touched.
pub fn train_downstream(
    model: &mut Backbone,
    store: Option<&PluginStore>,
    data: &[TaskExample],
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if opts.mode == TuneMode::Pet && model.adapter.is_none() {
        return Err(Error::Usage("PET tuning needs adapters attached".into()));
    }
    let store = match opts.plugging {
        Plugging::During => {
            let s = store.ok_or_else(|| {
                Error::Usage("plugging during tuning needs a plugin store".into())
            })?;
            check_store(s, model)?;
            if let Some(ex) = data.iter().find(|ex| !s.contains(&ex.doc_id)) {
                return Err(Error::Data(format!(
                    "doc_id {:?} not in plugin store",
                    ex.doc_id
                )));
            }
            Some(s)
        }
        Plugging::None => None,
    };
    model.pin_lineage();
    let mask = FreezeMask::new(model, opts.mode);
    let mut opt = Adam::new(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut report = TrainReport::default();
    for _ in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        while batch.len() < opts.batch_size.min(data.len()) {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&data[order.pop().unwrap()]);
        }
        let grads = {
            let mut ctx = Ctx::new(model, Trainable::Only(&mask.trainable));
            let loss = batch_loss(&mut ctx, store, &batch)?;
            report.losses.push(ctx.g.value(loss).item());
            ctx.g.backward(loss)?;
            ctx.gradients()
        };
        apply_gradients(model, &mut opt, &grads);
    }
    Ok(report)
}

fn plugin_prefixes(
    model: &Backbone,
    store: &PluginStore,
    doc_id: &str,
) -> Result<Vec<Option<Tensor>>> {
    let plugin = store.get(doc_id)?;
    check_compatible(&plugin, model)?;
    MappingNetwork::from_model(model)?.apply(&plugin.hidden)
}

/// Greedy answer for `query`, optionally with the document's plugin
/// inserted (plugging after tuning when the model was trained without).
pub fn infer(
    model: &Backbone,
    store: Option<&PluginStore>,
    query: &[u32],
    doc_id: Option<&str>,
    plug_at_inference: bool,
    max_new: usize,
) -> Result<Vec<u32>> {
    if plug_at_inference {
        let (store, id) = store.zip(doc_id).ok_or_else(|| {
            Error::Usage("plugging at inference needs a store and a doc_id".into())
        })?;
        let prefixes = plugin_prefixes(model, store, id)?;
        model.generate_greedy(truncated(query), Some(&prefixes), max_new)
    } else {
        model.generate_greedy(truncated(query), None, max_new)
    }
}

/// Yes/no decision from the first decoding step's logits of the two
/// answer tokens.
pub fn classify(
    model: &Backbone,
    store: Option<&PluginStore>,
    query: &[u32],
    doc_id: Option<&str>,
    plug_at_inference: bool,
    yes: u32,
    no: u32,
) -> Result<bool> {
    let prefixes = if plug_at_inference {
        let (store, id) = store.zip(doc_id).ok_or_else(|| {
            Error::Usage("plugging at inference needs a store and a doc_id".into())
        })?;
        Some(plugin_prefixes(model, store, id)?)
    } else {
        None
    };
    let logits = model.first_step_logits(truncated(query), prefixes.as_deref())?;
    Ok(logits.data()[yes as usize] > logits.data()[no as usize])
}
