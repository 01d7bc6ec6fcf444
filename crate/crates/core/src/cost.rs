//! Closed-form matmul FLOPs of coupled and plugged inference.
//!
//! Counting follows the tensor engine: a product of `[m×k]` and `[k×n]`
//! costs `2·m·k·n`, everything else is free. Decoding is greedy with
//! cached keys and values, one step per answer token.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kv::KvConfig;
use crate::model::{Backbone, Ctx, LayerPrefixes, ModelConfig, PluginSharing};
use crate::tensor::Tensor;
use crate::text::FIRST_WORD_ID;
use crate::{Error, Result};

/// Reference T5-large dimensions and operating point.
pub const T5_LARGE: &str = include_str!("../configs/t5-large.conf");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lengths {
    pub l_q: usize,
    pub l_d: usize,
    pub l_ans: usize,
}

/// Where plugins enter: top encoder self-attention layers, and
/// (analytically only) top decoder self-attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlugPlacement {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

impl PlugPlacement {
    pub fn encoder(n: usize) -> Self {
        Self {
            encoder_layers: n,
            decoder_layers: 0,
        }
    }
}

/// Itemized FLOPs of one inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub enc_attn_proj: u64,
    pub enc_prefix_kv: u64,
    pub enc_attn_scores: u64,
    pub enc_ffn: u64,
    pub dec_self_proj: u64,
    pub dec_prefix_kv: u64,
    pub dec_self_scores: u64,
    pub dec_cross_kv: u64,
    pub dec_cross_proj: u64,
    pub dec_cross_scores: u64,
    pub dec_ffn: u64,
    pub lm_head: u64,
    pub mapping: u64,
}

impl CostBreakdown {
    pub fn items(&self) -> [(&'static str, u64); 13] {
        [
            ("enc_attn_proj", self.enc_attn_proj),
            ("enc_prefix_kv", self.enc_prefix_kv),
            ("enc_attn_scores", self.enc_attn_scores),
            ("enc_ffn", self.enc_ffn),
            ("dec_self_proj", self.dec_self_proj),
            ("dec_prefix_kv", self.dec_prefix_kv),
            ("dec_self_scores", self.dec_self_scores),
            ("dec_cross_kv", self.dec_cross_kv),
            ("dec_cross_proj", self.dec_cross_proj),
            ("dec_cross_scores", self.dec_cross_scores),
            ("dec_ffn", self.dec_ffn),
            ("lm_head", self.lm_head),
            ("mapping", self.mapping),
        ]
    }

    pub fn total(&self) -> u64 {
        self.items().iter().map(|(_, v)| v).sum()
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Encoder over `l` tokens, `plugged` of its layers also attending to
/// `l_p` prefix tokens.
fn encoder(cfg: &ModelConfig, l: usize, plugged: usize, l_p: usize, out: &mut CostBreakdown) {
    let (d, ff, n) = (u(cfg.d_model), u(cfg.d_ff), u(cfg.n_enc_layers));
    let (l, lp, k) = (u(l), u(l_p), u(plugged.min(cfg.n_enc_layers)));
    out.enc_attn_proj = n * 8 * l * d * d;
    out.enc_prefix_kv = k * 4 * lp * d * d;
    out.enc_attn_scores = n * 4 * l * l * d + k * 4 * l * lp * d;
    out.enc_ffn = n * 4 * l * d * ff;
}

/// Greedy decoding of `l_ans` tokens over an encoder memory of `l_mem`
/// rows; `plugged` decoder layers attend to `l_p` extra cached keys.
fn decoder(
    cfg: &ModelConfig,
    l_mem: usize,
    l_ans: usize,
    plugged: usize,
    l_p: usize,
    out: &mut CostBreakdown,
) {
    let (d, ff, n, v) = (
        u(cfg.d_model),
        u(cfg.d_ff),
        u(cfg.n_dec_layers),
        u(cfg.vocab_size),
    );
    let (m, t_max, lp, k) = (u(l_mem), u(l_ans), u(l_p), u(plugged.min(cfg.n_dec_layers)));
    let key_steps: u64 = (1..=t_max).sum();
    out.dec_cross_kv = n * 4 * m * d * d;
    out.dec_self_proj = n * t_max * 8 * d * d;
    out.dec_prefix_kv = k * 4 * lp * d * d;
    out.dec_self_scores = n * 4 * key_steps * d + k * 4 * t_max * lp * d;
    out.dec_cross_proj = n * t_max * 4 * d * d;
    out.dec_cross_scores = n * t_max * 4 * m * d;
    out.dec_ffn = n * t_max * 4 * d * ff;
    out.lm_head = t_max * 2 * d * v;
}

/// Document and query encoded together, as one `L_q + L_d` input.
pub fn flops_coupled(cfg: &ModelConfig, len: Lengths) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    encoder(cfg, len.l_q + len.l_d, 0, 0, &mut out);
    decoder(cfg, len.l_q + len.l_d, len.l_ans, 0, 0, &mut out);
    out
}

/// Query encoded alone with a precomputed plugin of `L_d` rows.
/// `count_mapping` adds the mapping network (once per distinct mapping).
pub fn flops_plugged(
    cfg: &ModelConfig,
    len: Lengths,
    place: PlugPlacement,
    count_mapping: bool,
) -> CostBreakdown {
    let mut out = CostBreakdown::default();
    encoder(cfg, len.l_q, place.encoder_layers, len.l_d, &mut out);
    decoder(
        cfg,
        len.l_q,
        len.l_ans,
        place.decoder_layers,
        len.l_d,
        &mut out,
    );
    if count_mapping && len.l_d > 0 {
        let d = u(cfg.d_model);
        let nets = match cfg.plugin_sharing {
            PluginSharing::Shared => {
                u(usize::from(place.encoder_layers + place.decoder_layers > 0))
            }
            PluginSharing::PerLayer => u(place.encoder_layers + place.decoder_layers),
        };
        out.mapping = nets * 8 * u(len.l_d) * d * d;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub lengths: Lengths,
    pub placement: PlugPlacement,
    pub count_mapping: bool,
    pub coupled: CostBreakdown,
    pub plugged: CostBreakdown,
    pub coupled_total: u64,
    pub plugged_total: u64,
    /// coupled / plugged
    pub ratio: f64,
    /// 1 − plugged / coupled
    pub savings: f64,
}

impl CostReport {
    pub fn new(cfg: &ModelConfig, len: Lengths, place: PlugPlacement, count_mapping: bool) -> Self {
        let coupled = flops_coupled(cfg, len);
        let plugged = flops_plugged(cfg, len, place, count_mapping);
        let (c, p) = (coupled.total(), plugged.total());
        Self {
            lengths: len,
            placement: place,
            count_mapping,
            coupled,
            plugged,
            coupled_total: c,
            plugged_total: p,
            ratio: c as f64 / p as f64,
            savings: 1.0 - p as f64 / c as f64,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table in GFLOPs.
    pub fn to_table(&self) -> String {
        let g = |x: u64| x as f64 / 1e9;
        let mut s = format!(
            "{:<18}{:>14}{:>14}\n",
            "component", "coupled GF", "plugged GF"
        );
        for ((name, c), (_, p)) in self.coupled.items().iter().zip(self.plugged.items()) {
            let _ = writeln!(s, "{name:<18}{:>14.3}{:>14.3}", g(*c), g(p));
        }
        let _ = writeln!(
            s,
            "{:<18}{:>14.3}{:>14.3}",
            "total",
            g(self.coupled_total),
            g(self.plugged_total)
        );
        let _ = writeln!(s, "ratio {:.3}  savings {:.3}", self.ratio, self.savings);
        s
    }
}

/// Reference setting: model, lengths, placement and mapping flag.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSetting {
    pub model: ModelConfig,
    pub lengths: Lengths,
    pub placement: PlugPlacement,
    pub count_mapping: bool,
}

impl CostSetting {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let model = ModelConfig::from_kv(kv)?;
        let lengths = Lengths {
            l_q: kv.require("l_q")?,
            l_d: kv.require("l_d")?,
            l_ans: kv.require("l_ans")?,
        };
        let placement = PlugPlacement {
            encoder_layers: kv.get("plug_encoder_layers")?.unwrap_or(model.n_plug),
            decoder_layers: kv.get("plug_decoder_layers")?.unwrap_or(0),
        };
        if placement.encoder_layers > model.n_enc_layers
            || placement.decoder_layers > model.n_dec_layers
        {
            return Err(Error::Config("plug placement exceeds layer count".into()));
        }
        Ok(Self {
            model,
            lengths,
            placement,
            count_mapping: kv.get("count_mapping")?.unwrap_or(true),
        })
    }

    pub fn t5_large() -> Self {
        Self::from_kv(&KvConfig::parse(T5_LARGE).expect("bundled config parses"))
            .expect("bundled config is valid")
    }

    pub fn report(&self) -> CostReport {
        CostReport::new(
            &self.model,
            self.lengths,
            self.placement,
            self.count_mapping,
        )
    }
}

/// CSV of the reference setting over a grid of lengths.
pub fn sweep_csv(
    setting: &CostSetting,
    l_qs: &[usize],
    l_ds: &[usize],
    l_anss: &[usize],
) -> String {
    let mut s = String::from("l_q,l_d,l_ans,coupled_flops,plugged_flops,ratio,savings\n");
    for &l_q in l_qs {
        for &l_d in l_ds {
            for &l_ans in l_anss {
                let r = CostReport::new(
                    &setting.model,
                    Lengths { l_q, l_d, l_ans },
                    setting.placement,
                    setting.count_mapping,
                );
                let _ = writeln!(
                    s,
                    "{l_q},{l_d},{l_ans},{},{},{:.6},{:.6}",
                    r.coupled_total, r.plugged_total, r.ratio, r.savings
                );
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineCheck {
    pub coupled_engine: u64,
    pub coupled_analytic: u64,
    pub plugged_engine: u64,
    pub plugged_analytic: u64,
    pub max_rel_deviation: f64,
}

fn rel(a: u64, b: u64) -> f64 {
    if a == b {
        0.0
    } else {
        (a as f64 - b as f64).abs() / (b as f64)
    }
}

/// Runs coupled and plugged inference through the instrumented engine
/// (random weights and tokens, exactly `l_ans` decoding steps) and
/// compares FLOP totals with the closed form. Plugins go into the
/// model's top `n_plug` encoder layers and the mapping is counted.
pub fn validate_against_engine(cfg: &ModelConfig, len: Lengths, seed: u64) -> Result<EngineCheck> {
    if len.l_q == 0 || len.l_ans == 0 {
        return Err(Error::Input("l_q and l_ans must be positive".into()));
    }
    if len.l_q + len.l_d > cfg.max_len {
        return Err(Error::Input(format!(
            "l_q + l_d exceeds max_len {}",
            cfg.max_len
        )));
    }
    let model = Backbone::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut word = || rng.random_range(FIRST_WORD_ID..cfg.vocab_size as u32);
    let query: Vec<u32> = (0..len.l_q).map(|_| word()).collect();
    let doc: Vec<u32> = (0..len.l_d).map(|_| word()).collect();

    let coupled_input = [doc.as_slice(), &query].concat();
    let coupled_engine = model
        .inference_flops(&coupled_input, None, len.l_ans)?
        .total();

    let mut ctx = Ctx::inference(&model);
    let prefixes = if len.l_d > 0 {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let h = ctx.g.constant(Tensor::rand_uniform(
            &[len.l_d, cfg.d_model],
            -1.0,
            1.0,
            &mut r,
        ));
        ctx.map_plugin(h)?
    } else {
        LayerPrefixes::none(cfg.n_enc_layers)
    };
    let enc = ctx.encode(&query, &prefixes)?;
    ctx.generate(enc, len.l_ans, false)?;
    let plugged_engine = ctx.g.flops().total();

    let coupled_analytic = flops_coupled(cfg, len).total();
    let plugged_analytic =
        flops_plugged(cfg, len, PlugPlacement::encoder(cfg.n_plug), true).total();
    Ok(EngineCheck {
        coupled_engine,
        coupled_analytic,
        plugged_engine,
        plugged_analytic,
        max_rel_deviation: rel(coupled_engine, coupled_analytic)
            .max(rel(plugged_engine, plugged_analytic)),
    })
}
