//! Multi-head attention with optional prefix tokens on the key/value side.
//!
//! With a prefix `P` the layer computes
//! `Attn(H·Wq, cat(P, H)·Wk, cat(P, H)·Wv)·Wo`: queries come from the
//! query states only, so the output keeps one row per query token and
//! the prefix positions are attended to but never attend.

use crate::tensor::{Graph, Result, TensorError, Var};

/// Handles to the four projection matrices of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

fn scoped<T>(g: &mut Graph, name: &str, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
    g.push_scope(name);
    let r = f(g);
    g.pop_scope();
    r
}

/// Scaled dot-product attention over already-projected `q: [Lq×d]`,
/// `k, v: [Lk×d]`, split into `n_heads` column blocks. With `causal`,
/// query row `i` sees keys `0..=i + (Lk − Lq)`.
pub fn multi_head(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = g.value(q).cols();
    if g.value(k).cols() != d || g.value(v).cols() != d {
        return Err(TensorError::Shape("q/k/v widths differ".into()));
    }
    if n_heads == 0 || !d.is_multiple_of(n_heads) {
        return Err(TensorError::Shape(format!(
            "{d} columns cannot split into {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = g.value(k).rows().saturating_sub(g.value(q).rows());
    scoped(g, "scores", |g| {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (qh, kh, vh) = if n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, h * dh, dh)?,
                    g.slice(k, 1, h * dh, dh)?,
                    g.slice(v, 1, h * dh, dh)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = if causal {
                g.softmax_causal(s, offset)?
            } else {
                g.softmax(s)?
            };
            heads.push(g.matmul(p, vh)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            g.concat(&heads, 1)
        }
    })
}

/// Self-attention of `h: [Lq×d]` with an optional prefix `P: [Lp×d]`
/// prepended on the key/value side. Without a prefix this is plain
/// self-attention, computed by the same code path.
pub fn prefix_attention(
    g: &mut Graph,
    h: Var,
    prefix: Option<Var>,
    w: &AttnWeights,
    n_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = g.value(w.wq).rows();
    if g.value(h).cols() != d {
        return Err(TensorError::Shape(format!(
            "hidden width {} != d_model {d}",
            g.value(h).cols()
        )));
    }
    if let Some(p) = prefix {
        if g.value(p).cols() != d {
            return Err(TensorError::Shape(format!(
                "prefix width {} != d_model {d}",
                g.value(p).cols()
            )));
        }
    }
    let (q, k_self, v_self) = scoped(g, "proj", |g| {
        Ok((g.matmul(h, w.wq)?, g.matmul(h, w.wk)?, g.matmul(h, w.wv)?))
    })?;
    let (k, v) = match prefix {
        None => (k_self, v_self),
        Some(p) => {
            let (kp, vp) = scoped(g, "prefix_kv", |g| {
                Ok((g.matmul(p, w.wk)?, g.matmul(p, w.wv)?))
            })?;
            (g.concat(&[kp, k_self], 0)?, g.concat(&[vp, v_self], 0)?)
        }
    };
    let ctx = multi_head(g, q, k, v, n_heads, causal)?;
    scoped(g, "proj", |g| g.matmul(ctx, w.wo))
}

/// Attention from `h` onto a separate memory (`kv_source`), as in the
/// decoder's cross-attention. Memory projections are tagged `kv`.
pub fn cross_attention(
    g: &mut Graph,
    h: Var,
    memory_k: Var,
    memory_v: Var,
    w: &AttnWeights,
    n_heads: usize,
) -> Result<Var> {
    let q = scoped(g, "proj", |g| g.matmul(h, w.wq))?;
    let ctx = multi_head(g, q, memory_k, memory_v, n_heads, false)?;
    scoped(g, "proj", |g| g.matmul(ctx, w.wo))
}

/// Projects a memory into keys and values once, for reuse across steps.
pub fn project_memory(g: &mut Graph, memory: Var, w: &AttnWeights) -> Result<(Var, Var)> {
    scoped(g, "kv", |g| {
        Ok((g.matmul(memory, w.wk)?, g.matmul(memory, w.wv)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        g: Graph,
        w: AttnWeights,
        raw: [Tensor; 4],
    }

    fn fixture(d: usize, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = [(); 4].map(|_| Tensor::rand_uniform(&[d, d], -0.5, 0.5, &mut rng));
        let mut g = Graph::new();
        let v: Vec<Var> = raw.iter().map(|t| g.constant(t.clone())).collect();
        Fixture {
            g,
            w: AttnWeights {
                wq: v[0],
                wk: v[1],
                wv: v[2],
                wo: v[3],
            },
            raw,
        }
    }

    fn matvec_rows(x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| (0..row.len()).map(|i| row[i] * w.at(i, j)).sum())
                    .collect()
            })
            .collect()
    }

    /// Full self-attention over `cat(P, H)` with scalar loops, returning
    /// only the rows that belong to `H`.
    fn oracle(p: &[Vec<f64>], h: &[Vec<f64>], raw: &[Tensor; 4], heads: usize) -> Vec<Vec<f64>> {
        let all: Vec<Vec<f64>> = p.iter().chain(h).cloned().collect();
        let q = matvec_rows(&all, &raw[0]);
        let k = matvec_rows(&all, &raw[1]);
        let v = matvec_rows(&all, &raw[2]);
        let d = raw[0].rows();
        let dh = d / heads;
        let mut ctx = vec![vec![0.0; d]; all.len()];
        for i in 0..all.len() {
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..all.len())
                    .map(|j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols {
                    ctx[i][c] = (0..all.len()).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        matvec_rows(&ctx, &raw[3])[p.len()..].to_vec()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    #[test]
    fn prefix_rows_match_concatenated_oracle() {
        let mut f = fixture(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Tensor::rand_uniform(&[3, 8], -1.0, 1.0, &mut rng);
        let p = Tensor::rand_uniform(&[2, 8], -1.0, 1.0, &mut rng);
        let (hv, pv) = (f.g.constant(h.clone()), f.g.constant(p.clone()));
        let out = prefix_attention(&mut f.g, hv, Some(pv), &f.w, 2, false).unwrap();
        let expected = oracle(&rows(&p), &rows(&h), &f.raw, 2);
        let got = f.g.value(out);
        assert_eq!(got.shape(), &[3, 8]);
        for i in 0..3 {
            for j in 0..8 {
                assert!((got.at(i, j) - expected[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn duplicated_prefix_splits_mass_evenly() {
        // With P == H, every key appears twice; attention over cat(H, H)
        // equals attention over H alone since each weight halves.
        let mut f = fixture(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = Tensor::rand_uniform(&[4, 8], -1.0, 1.0, &mut rng);
        let hv = f.g.constant(h.clone());
        let pv = f.g.constant(h.clone());
        let with = prefix_attention(&mut f.g, hv, Some(pv), &f.w, 4, false).unwrap();
        let without = prefix_attention(&mut f.g, hv, None, &f.w, 4, false).unwrap();
        let expected = oracle(&rows(&h), &rows(&h), &f.raw, 4);
        assert!(f.g.value(with).max_abs_diff(f.g.value(without)) < 1e-12);
        for i in 0..4 {
            for j in 0..8 {
                assert!((f.g.value(with).at(i, j) - expected[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn no_prefix_is_plain_self_attention() {
        let mut f = fixture(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = Tensor::rand_uniform(&[5, 8], -1.0, 1.0, &mut rng);
        let hv = f.g.constant(h.clone());
        let out = prefix_attention(&mut f.g, hv, None, &f.w, 2, false).unwrap();
        let expected = oracle(&[], &rows(&h), &f.raw, 2);
        for i in 0..5 {
            for j in 0..8 {
                assert!((f.g.value(out).at(i, j) - expected[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut f = fixture(8, 1);
        let h = f.g.constant(Tensor::zeros(&[2, 8]));
        let p = f.g.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(
            prefix_attention(&mut f.g, h, Some(p), &f.w, 2, false),
            Err(TensorError::Shape(_))
        ));
        let bad_h = f.g.constant(Tensor::zeros(&[2, 4]));
        assert!(prefix_attention(&mut f.g, bad_h, None, &f.w, 2, false).is_err());
    }
}
