//! Document plugins: raw encoder states of a document, mapped to prefix
//! tokens only when inserted into a model.

use std::time::{SystemTime, UNIX_EPOCH};

use crate::model::{map_rows, mapping_names, Backbone, PluginSharing};
use crate::tensor::{Graph, Tensor, TensorError};
use crate::text::Document;
use crate::{Error, Result};
use hex::encode as hex;

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentPlugin {
    pub doc_id: String,
    /// `[L_d×d]`, f32-representable values.
    pub hidden: Tensor,
    pub model_hash: [u8; 32],
    /// Unix seconds; not persisted by the store.
    pub created_at: Option<u64>,
}

impl DocumentPlugin {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.hidden.cols()
    }
}

/// Encodes `doc` with no plugin, truncated head-first to the model's
/// document limit.
pub fn encode_document(doc: &Document, model: &Backbone) -> Result<DocumentPlugin> {
    let mut ids = doc.tokens();
    if ids.is_empty() {
        return Err(Error::Input(format!(
            "document {:?} has no tokens",
            doc.doc_id
        )));
    }
    ids.truncate(model.config.max_doc_len());
    let mut hidden = model.encode(&ids, None)?;
    hidden.round_to_f32();
    let created_at = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    Ok(DocumentPlugin {
        doc_id: doc.doc_id.clone(),
        hidden,
        model_hash: model.lineage_hash(),
        created_at,
    })
}

/// Residual MLP weights taken from a model, one pair per plugged layer in
/// per-layer mode or a single pair when shared.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingNetwork {
    pub sharing: PluginSharing,
    pub n_layers: usize,
    /// `(layer, W1 [d×2d], W2 [2d×d])`
    pub layers: Vec<(usize, Tensor, Tensor)>,
}

impl MappingNetwork {
    pub fn from_model(model: &Backbone) -> Result<Self> {
        let cfg = &model.config;
        let layers: Vec<usize> = match cfg.plugin_sharing {
            PluginSharing::Shared if cfg.n_plug > 0 => vec![cfg.first_plugged_layer()],
            PluginSharing::Shared => vec![],
            PluginSharing::PerLayer => (cfg.first_plugged_layer()..cfg.n_enc_layers).collect(),
        };
        let mut out = Vec::new();
        for l in layers {
            let (n1, n2) = mapping_names(cfg, l);
            let get = |n: &str| {
                model
                    .params
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::MissingParam(n.to_string()))
            };
            out.push((l, get(&n1)?, get(&n2)?));
        }
        Ok(Self {
            sharing: cfg.plugin_sharing,
            n_layers: cfg.n_enc_layers,
            layers: out,
        })
    }

    /// Prefixes for every encoder layer (`None` below the plugged range).
    pub fn apply(&self, hidden: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut out = vec![None; self.n_layers];
        let Some(first) = self.layers.first().map(|l| l.0) else {
            return Ok(out);
        };
        let mut g = Graph::new();
        let h = g.constant(hidden.clone());
        for (layer, w1, w2) in &self.layers {
            let d = w1.rows();
            if hidden.cols() != d {
                return Err(TensorError::Shape(format!(
                    "plugin width {} != mapping width {d}",
                    hidden.cols()
                ))
                .into());
            }
            let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
            let p = map_rows(&mut g, h, a, b)?;
            out[*layer] = Some(g.value(p).clone());
        }
        if self.sharing == PluginSharing::Shared {
            let shared = out[first].clone();
            for slot in out.iter_mut().skip(first) {
                *slot = shared.clone();
            }
        }
        Ok(out)
    }
}

pub fn map_plugin(plugin: &DocumentPlugin, net: &MappingNetwork) -> Result<Vec<Option<Tensor>>> {
    net.apply(&plugin.hidden)
}

/// Fails unless `plugin` was encoded by `model`'s lineage.
pub fn check_compatible(plugin: &DocumentPlugin, model: &Backbone) -> Result<()> {
    let expected = model.lineage_hash();
    if plugin.model_hash != expected {
        return Err(Error::Incompatible(format!(
            "plugin {:?} was encoded by model {} but this model is {}",
            plugin.doc_id,
            hex(plugin.model_hash),
            hex(expected)
        )));
    }
    Ok(())
}

/// A model with a document's prefixes in its plugged layers.
#[derive(Debug, Clone)]
pub struct PluggedModel<'a> {
    model: &'a Backbone,
    prefixes: Vec<Option<Tensor>>,
}

/// Maps `plugin` with the model's own mapping network and inserts it.
/// With `force` the lineage check is skipped.
pub fn insert<'a>(
    model: &'a Backbone,
    plugin: &DocumentPlugin,
    force: bool,
) -> Result<PluggedModel<'a>> {
    if !force {
        check_compatible(plugin, model)?;
    }
    let prefixes = MappingNetwork::from_model(model)?.apply(&plugin.hidden)?;
    Ok(PluggedModel { model, prefixes })
}

impl<'a> PluggedModel<'a> {
    pub fn prefixes(&self) -> &[Option<Tensor>] {
        &self.prefixes
    }

    pub fn encode(&self, query: &[u32]) -> Result<Tensor> {
        self.model.encode(query, Some(&self.prefixes))
    }

    pub fn logits(&self, query: &[u32], target: &[u32]) -> Result<Tensor> {
        self.model.logits(query, Some(&self.prefixes), target)
    }

    pub fn generate(&self, query: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.model
            .generate_greedy(query, Some(&self.prefixes), max_new)
    }

    /// Drops the prefixes, giving back the unmodified model.
    pub fn remove(self) -> &'a Backbone {
        self.model
    }
}
