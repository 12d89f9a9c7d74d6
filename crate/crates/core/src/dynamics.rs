//! Universal-transformer block over per-record sequences: multi-head
//! self-attention, a position-wise transition, (position, time) coordinate
//! embeddings and adaptive-computation-time halting.
//!
//! All operations work on batches shaped `[B, n_s, n_e]`. Sequences are
//! right-padded; `lengths[b]` is the number of valid leading positions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{Graph, Init, NumericError, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("every position of sequence {0} is masked")]
    AllMasked(usize),
    #[error("invalid transformer config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    /// Maximum sequence length; older records are dropped.
    pub n_s: usize,
    /// Model width.
    pub n_e: usize,
    pub heads: usize,
    pub t_max: usize,
    pub act_epsilon: f64,
    pub ponder_cost: f64,
    /// Hidden width of the position-wise transition.
    pub transition_hidden: usize,
    pub dropout: f64,
    /// Scale scores by `sqrt(n_e)` instead of the per-head width `sqrt(n_e / heads)`.
    pub full_width_scaling: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            n_s: 10,
            n_e: 32,
            heads: 4,
            t_max: 4,
            act_epsilon: 0.01,
            ponder_cost: 0.01,
            transition_hidden: 64,
            dropout: 0.1,
            full_width_scaling: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::InvalidConfig(m.to_string()));
        if self.n_s == 0 || self.n_e == 0 || self.heads == 0 || self.transition_hidden == 0 {
            return bad("sizes must be positive");
        }
        if !self.n_e.is_multiple_of(self.heads) {
            return bad("n_e must be divisible by heads");
        }
        if self.t_max == 0 {
            return bad("t_max must be >= 1");
        }
        if !(self.act_epsilon > 0.0 && self.act_epsilon < 1.0) {
            return bad("act_epsilon must lie in (0, 1)");
        }
        if !(self.ponder_cost >= 0.0) {
            return bad("ponder_cost must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.n_e / self.heads
    }

    fn score_scale(&self) -> f64 {
        let w = if self.full_width_scaling {
            self.n_e
        } else {
            self.head_width()
        };
        1.0 / (w as f64).sqrt()
    }
}

/// Weights shared across refinement steps.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
    pub ts_w1: ParamId,
    pub ts_b1: ParamId,
    pub ts_w2: ParamId,
    pub ts_b2: ParamId,
    pub halt_w: ParamId,
    pub halt_b: ParamId,
    /// Output mixer `W^D`, `(n_s * n_e) x n_e`.
    pub w_d: ParamId,
}

impl TransformerParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, c: &TransformerConfig, rng: &mut R) -> Self {
        let (e, h, dh) = (c.n_e, c.transition_hidden, c.head_width());
        let xavier = |i, o| Init::XavierUniform { fan_in: i, fan_out: o };
        let heads = |tag: &str, store: &mut ParamStore, rng: &mut R| -> Vec<ParamId> {
            (0..c.heads)
                .map(|i| store.add(format!("{prefix}.{tag}.{i}"), &[e, dh], xavier(e, dh), rng))
                .collect()
        };
        let wq = heads("wq", store, rng);
        let wk = heads("wk", store, rng);
        let wv = heads("wv", store, rng);
        Self {
            wq,
            wk,
            wv,
            wo: store.add(format!("{prefix}.wo"), &[e, e], xavier(e, e), rng),
            ts_w1: store.add(format!("{prefix}.ts_w1"), &[e, h], xavier(e, h), rng),
            ts_b1: store.add(format!("{prefix}.ts_b1"), &[h], Init::Zeros, rng),
            ts_w2: store.add(format!("{prefix}.ts_w2"), &[h, e], xavier(h, e), rng),
            ts_b2: store.add(format!("{prefix}.ts_b2"), &[e], Init::Zeros, rng),
            halt_w: store.add(format!("{prefix}.halt_w"), &[e, 1], xavier(e, 1), rng),
            // Start with a small halting probability so early training refines for several steps.
            halt_b: store.add(format!("{prefix}.halt_b"), &[1], Init::Constant(-1.0), rng),
            w_d: store.add(format!("{prefix}.w_d"), &[c.n_s * e, e], xavier(c.n_s * e, e), rng),
        }
    }
}

fn sinusoid(x: f64, j: usize, width: usize) -> f64 {
    let pair = (j - j % 2) as f64;
    let angle = x / 10000f64.powf(pair / width as f64);
    if j.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Constant `n_s x n_e` coordinate matrix: sinusoidal code of the position plus
/// sinusoidal code of the refinement step `t`.
pub fn coordinate_embedding(t: usize, n_s: usize, n_e: usize) -> Tensor {
    let mut out = Tensor::zeros(&[n_s, n_e]);
    for i in 0..n_s {
        for j in 0..n_e {
            out.set2(i, j, sinusoid(i as f64, j, n_e) + sinusoid(t as f64, j, n_e));
        }
    }
    out
}

fn check_lengths(lengths: &[usize], batch: usize, n_s: usize) -> Result<(), DynamicsError> {
    if lengths.len() != batch {
        return Err(NumericError::ShapeMismatch {
            op: "sequence lengths",
            lhs: vec![batch],
            rhs: vec![lengths.len()],
        }
        .into());
    }
    if let Some(b) = lengths.iter().position(|&l| l == 0) {
        return Err(DynamicsError::AllMasked(b));
    }
    if lengths.iter().any(|&l| l > n_s) {
        return Err(NumericError::InvalidShape(lengths.to_vec()).into());
    }
    Ok(())
}

fn batch_dims(g: &Graph, x: Var, c: &TransformerConfig) -> Result<usize, DynamicsError> {
    let s = g.shape(x);
    if s.len() != 3 || s[1] != c.n_s || s[2] != c.n_e {
        return Err(NumericError::ShapeMismatch {
            op: "transformer input",
            lhs: s.to_vec(),
            rhs: vec![0, c.n_s, c.n_e],
        }
        .into());
    }
    Ok(s[0])
}

/// Additive key mask `[B, n_s, n_s]`: zero for valid keys, `-inf` for padding.
fn key_mask(lengths: &[usize], n_s: usize) -> Tensor {
    let mut data = vec![0.0; lengths.len() * n_s * n_s];
    for (b, &len) in lengths.iter().enumerate() {
        for q in 0..n_s {
            for k in len..n_s {
                data[(b * n_s + q) * n_s + k] = f64::NEG_INFINITY;
            }
        }
    }
    Tensor::new(vec![lengths.len(), n_s, n_s], data).expect("consistent mask shape")
}

/// Multi-head self-attention output together with each head's attention weights.
#[derive(Debug, Clone)]
pub struct MhsaOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

/// `concat_i(softmax(E W^Q_i (E W^K_i)^T * scale + mask) E W^V_i) W^O`.
pub fn mhsa(
    g: &mut Graph,
    store: &ParamStore,
    p: &TransformerParams,
    c: &TransformerConfig,
    x: Var,
    lengths: &[usize],
) -> Result<MhsaOutput, DynamicsError> {
    let batch = batch_dims(g, x, c)?;
    check_lengths(lengths, batch, c.n_s)?;
    let needs_mask = lengths.iter().any(|&l| l < c.n_s);
    let mask = needs_mask.then(|| g.constant(key_mask(lengths, c.n_s)));
    let mut heads = Vec::with_capacity(c.heads);
    let mut attention = Vec::with_capacity(c.heads);
    for i in 0..c.heads {
        let (wq, wk, wv) = (
            g.param(store, p.wq[i]),
            g.param(store, p.wk[i]),
            g.param(store, p.wv[i]),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let mut scores = g.scale(scores, c.score_scale());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let a = g.softmax(scores, 2)?;
        heads.push(g.bmm(a, v)?);
        attention.push(a);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat(&heads, 2)?
    };
    let wo = g.param(store, p.wo);
    Ok(MhsaOutput {
        output: g.matmul(joined, wo)?,
        attention,
    })
}

fn transition(g: &mut Graph, store: &ParamStore, p: &TransformerParams, a: Var) -> Result<Var, NumericError> {
    let (w1, b1, w2, b2) = (
        g.param(store, p.ts_w1),
        g.param(store, p.ts_b1),
        g.param(store, p.ts_w2),
        g.param(store, p.ts_b2),
    );
    let h = g.matmul(a, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    g.add(o, b2)
}

/// One refinement step producing `E^t` from `E^{t-1}`.
pub fn transformer_step(
    g: &mut Graph,
    store: &ParamStore,
    p: &TransformerParams,
    c: &TransformerConfig,
    x: Var,
    t: usize,
    lengths: &[usize],
) -> Result<Var, DynamicsError> {
    let coords = g.constant(coordinate_embedding(t, c.n_s, c.n_e));
    let xp = g.add(x, coords)?;
    let attn = mhsa(g, store, p, c, xp, lengths)?.output;
    let attn = g.dropout(attn, c.dropout);
    let a = g.add(xp, attn)?;
    let a = g.layer_norm(a, 2, LAYER_NORM_EPS)?;
    let ts = transition(g, store, p, a)?;
    let ts = g.dropout(ts, c.dropout);
    let e = g.add(a, ts)?;
    Ok(g.layer_norm(e, 2, LAYER_NORM_EPS)?)
}

/// Outcome of [`act_run`].
#[derive(Debug, Clone)]
pub struct ActOutput {
    /// `E^f`: each valid row frozen at its halting step; padded rows zeroed.
    pub state: Var,
    /// Halting step per valid position, per sequence.
    pub halt_steps: Vec<Vec<usize>>,
    /// Halting-probability mass accumulated before each position's halting step.
    pub remainders: Vec<Vec<f64>>,
    /// Mean over sequences of the per-position average `N + R` (a scalar node).
    pub ponder: Var,
    /// `ponder_cost * ponder`.
    pub penalty: Var,
    pub mean_steps: f64,
    pub mean_remainder: f64,
}

fn row_mask(batch: usize, n_s: usize, width: usize, keep: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![0.0; batch * n_s * width];
    for b in 0..batch {
        for i in 0..n_s {
            if keep(b, i) {
                data[(b * n_s + i) * width..(b * n_s + i + 1) * width].fill(1.0);
            }
        }
    }
    Tensor::new(vec![batch, n_s, width], data).expect("consistent mask shape")
}

/// Repeats [`transformer_step`] with per-position halting.
///
/// At step `t` each still-running position adds `p_t = sigmoid(w_h . E^t_i + b_h)`
/// to its accumulator and halts once the sum reaches `1 - act_epsilon` or
/// `t = t_max`. A halted row keeps its state while the others continue. The
/// realized halting pattern is treated as constant by backpropagation; the
/// ponder term `N + R` with `R = 1 - sum_{t<N} p_t` trains the halting unit.
pub fn act_run(
    g: &mut Graph,
    store: &ParamStore,
    p: &TransformerParams,
    c: &TransformerConfig,
    e0: Var,
    lengths: &[usize],
) -> Result<ActOutput, DynamicsError> {
    let batch = batch_dims(g, e0, c)?;
    check_lengths(lengths, batch, c.n_s)?;
    let (n_s, n_e) = (c.n_s, c.n_e);
    let mut acc = vec![0.0; batch * n_s];
    let mut halt = vec![0usize; batch * n_s];
    let mut remainder = vec![0.0; batch * n_s];
    let mut state = e0;
    // Coefficients applied to p_t for positions still running after step t.
    let mut ponder_terms: Vec<Var> = Vec::new();
    let valid_count: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    let coef = |b: usize| 1.0 / (valid_count[b] * batch as f64);

    for t in 1..=c.t_max {
        let running_before: Vec<bool> = (0..batch * n_s)
            .map(|k| k % n_s < lengths[k / n_s] && halt[k] == 0)
            .collect();
        if !running_before.iter().any(|&r| r) {
            break;
        }
        let new_state = transformer_step(g, store, p, c, state, t, lengths)?;
        let hw = g.param(store, p.halt_w);
        let hb = g.param(store, p.halt_b);
        let logits = g.matmul(new_state, hw)?;
        let logits = g.add(logits, hb)?;
        let probs = g.sigmoid(logits);
        let pv = g.value(probs).data().to_vec();
        let mut still = vec![0.0; batch * n_s];
        for k in 0..batch * n_s {
            if !running_before[k] {
                continue;
            }
            let sum = acc[k] + pv[k];
            if sum >= 1.0 - c.act_epsilon || t == c.t_max {
                halt[k] = t;
                remainder[k] = 1.0 - acc[k];
            } else {
                still[k] = coef(k / n_s);
            }
            acc[k] = sum;
        }
        if still.iter().any(|&s| s != 0.0) {
            let w = g.constant(Tensor::new(vec![batch, n_s, 1], still)?);
            let contrib = g.mul(probs, w)?;
            ponder_terms.push(g.sum(contrib));
        }
        let advance = g.constant(row_mask(batch, n_s, n_e, |b, i| running_before[b * n_s + i]));
        let hold = g.constant(row_mask(batch, n_s, n_e, |b, i| !running_before[b * n_s + i]));
        let moved = g.mul(new_state, advance)?;
        let kept = g.mul(state, hold)?;
        state = g.add(moved, kept)?;
    }

    let valid = g.constant(row_mask(batch, n_s, n_e, |b, i| i < lengths[b]));
    let state = g.mul(state, valid)?;

    // N + 1 - sum_{t<N} p_t, averaged per sequence then over the batch.
    let mut constant_part = 0.0;
    let mut halt_steps = Vec::with_capacity(batch);
    let mut remainders = Vec::with_capacity(batch);
    for (b, &len) in lengths.iter().enumerate() {
        let hs: Vec<usize> = (0..len).map(|i| halt[b * n_s + i]).collect();
        let rs: Vec<f64> = (0..len).map(|i| remainder[b * n_s + i]).collect();
        constant_part += hs.iter().map(|&h| h as f64 + 1.0).sum::<f64>() * coef(b);
        halt_steps.push(hs);
        remainders.push(rs);
    }
    let base = g.constant(Tensor::scalar(constant_part));
    let mut ponder = base;
    for term in ponder_terms {
        ponder = g.sub(ponder, term)?;
    }
    let penalty = g.scale(ponder, c.ponder_cost);
    let total: usize = lengths.iter().sum();
    let mean_steps = halt_steps.iter().flatten().sum::<usize>() as f64 / total as f64;
    let mean_remainder = remainders.iter().flatten().sum::<f64>() / total as f64;
    Ok(ActOutput {
        state,
        halt_steps,
        remainders,
        ponder,
        penalty,
        mean_steps,
        mean_remainder,
    })
}

/// `e^d = flatten(E^f) W^D` for each sequence, giving `[B, n_e]`.
pub fn dynamic_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &TransformerParams,
    c: &TransformerConfig,
    ef: Var,
) -> Result<Var, DynamicsError> {
    let batch = batch_dims(g, ef, c)?;
    let flat = g.reshape(ef, vec![batch, c.n_s * c.n_e])?;
    let wd = g.param(store, p.w_d);
    Ok(g.matmul(flat, wd)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small(n_s: usize, n_e: usize, heads: usize) -> TransformerConfig {
        TransformerConfig {
            n_s,
            n_e,
            heads,
            transition_hidden: 2 * n_e,
            ..TransformerConfig::default()
        }
    }

    fn setup(c: &TransformerConfig, seed: u64) -> (ParamStore, TransformerParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = TransformerParams::new(&mut store, "t", c, &mut rng);
        (store, p)
    }

    fn random_input(batch: usize, c: &TransformerConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..batch * c.n_s * c.n_e)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(vec![batch, c.n_s, c.n_e], data).unwrap()
    }

    #[test]
    fn config_checks() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig {
            n_e: 30,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TransformerConfig {
            t_max: 0,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn param_shapes() {
        let c = TransformerConfig::default();
        let (store, p) = setup(&c, 0);
        assert_eq!(store.get(p.wq[3]).value.shape(), &[32, 8]);
        assert_eq!(store.get(p.wo).value.shape(), &[32, 32]);
        assert_eq!(store.get(p.halt_w).value.shape(), &[32, 1]);
        assert_eq!(store.get(p.w_d).value.shape(), &[320, 32]);
    }

    #[test]
    fn coordinates_constant_distinct_and_time_shift() {
        let a = coordinate_embedding(1, 6, 8);
        assert_eq!(a, coordinate_embedding(1, 6, 8));
        for p in 0..6 {
            for q in p + 1..6 {
                assert_ne!(a.row(p), a.row(q));
            }
        }
        let b = coordinate_embedding(2, 6, 8);
        let diff0: Vec<f64> = a.row(0).iter().zip(b.row(0)).map(|(x, y)| y - x).collect();
        for i in 1..6 {
            for (j, (x, y)) in a.row(i).iter().zip(b.row(i)).enumerate() {
                assert!((y - x - diff0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singleton_sequence_attends_to_itself() {
        let c = small(1, 4, 2);
        let (store, p) = setup(&c, 3);
        let mut g = Graph::eval();
        let x = g.constant(random_input(1, &c, 9));
        let out = mhsa(&mut g, &store, &p, &c, x, &[1]).unwrap();
        for a in &out.attention {
            assert_eq!(g.value(*a).data(), &[1.0]);
        }
        // Oracle: concat_i(x W^V_i) W^O.
        let xv = g.value(x).data().to_vec();
        let mut values = Vec::new();
        for i in 0..2 {
            let w = &store.get(p.wv[i]).value;
            for j in 0..2 {
                values.push((0..4).map(|k| xv[k] * w.get2(k, j)).sum::<f64>());
            }
        }
        let wo = &store.get(p.wo).value;
        for j in 0..4 {
            let expect: f64 = (0..4).map(|k| values[k] * wo.get2(k, j)).sum();
            assert!((g.value(out.output).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_single_head_matches_brute_force() {
        let c = small(2, 2, 1);
        let (mut store, _) = setup(&c, 0);
        let p = setup(&c, 0).1;
        let set = |store: &mut ParamStore, name: &str, rows: &[Vec<f64>]| {
            *store.value_mut(name).unwrap() = Tensor::matrix(rows).unwrap();
        };
        set(&mut store, "t.wq.0", &[vec![1.0, 0.5], vec![0.0, 1.0]]);
        set(&mut store, "t.wk.0", &[vec![0.5, 0.0], vec![1.0, -1.0]]);
        set(&mut store, "t.wv.0", &[vec![2.0, 0.0], vec![1.0, 1.0]]);
        set(&mut store, "t.wo", &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = [[1.0, 2.0], [-1.0, 0.5]];
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 2, 2], e.iter().flatten().copied().collect()).unwrap());
        let out = mhsa(&mut g, &store, &p, &c, x, &[2]).unwrap();

        let mm = |a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    r[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
                }
            }
            r
        };
        let q = mm(&e, &[[1.0, 0.5], [0.0, 1.0]]);
        let k = mm(&e, &[[0.5, 0.0], [1.0, -1.0]]);
        let v = mm(&e, &[[2.0, 0.0], [1.0, 1.0]]);
        let scale = 1.0 / 2f64.sqrt();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale)
                .collect();
            let m = s[0].max(s[1]);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            let a: Vec<f64> = s.iter().map(|x| (x - m).exp() / z).collect();
            for col in 0..2 {
                let expect = a[0] * v[0][col] + a[1] * v[1][col];
                assert!((g.value(out.output).data()[i * 2 + col] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_normalized_over_valid_keys() {
        let c = small(5, 8, 2);
        let (store, p) = setup(&c, 4);
        let mut g = Graph::eval();
        let x = g.constant(random_input(3, &c, 5));
        let out = mhsa(&mut g, &store, &p, &c, x, &[5, 2, 1]).unwrap();
        for a in &out.attention {
            let v = g.value(*a);
            for (b, len) in [5usize, 2, 1].iter().enumerate() {
                for q in 0..5 {
                    let row = &v.data()[(b * 5 + q) * 5..(b * 5 + q + 1) * 5];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row[*len..].iter().all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let c = small(4, 8, 2);
        let (store, p) = setup(&c, 6);
        let base = random_input(1, &c, 7);
        let mut flipped = base.clone();
        for v in &mut flipped.data_mut()[2 * 8..] {
            *v = -*v * 3.0 + 1.0;
        }
        let mut g = Graph::eval();
        let xa = g.constant(base);
        let xb = g.constant(flipped);
        let a = mhsa(&mut g, &store, &p, &c, xa, &[2]).unwrap().output;
        let b = mhsa(&mut g, &store, &p, &c, xb, &[2]).unwrap().output;
        assert_eq!(&g.value(a).data()[..16], &g.value(b).data()[..16]);
    }

    #[test]
    fn all_masked_rejected() {
        let c = small(3, 4, 1);
        let (store, p) = setup(&c, 0);
        let mut g = Graph::eval();
        let x = g.constant(random_input(1, &c, 0));
        assert!(matches!(
            mhsa(&mut g, &store, &p, &c, x, &[0]),
            Err(DynamicsError::AllMasked(0))
        ));
    }

    #[test]
    fn step_is_deterministic_and_shape_preserving() {
        let c = small(3, 8, 4);
        let (store, p) = setup(&c, 1);
        let input = random_input(2, &c, 2);
        let run = || {
            let mut g = Graph::eval();
            let x = g.constant(input.clone());
            let y = transformer_step(&mut g, &store, &p, &c, x, 1, &[3, 2]).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[2, 3, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn zero_weights_reduce_step_to_double_layer_norm() {
        let c = small(3, 4, 2);
        let (mut store, p) = setup(&c, 1);
        let names: Vec<String> = store.iter().map(|(_, q)| q.name.clone()).collect();
        for n in names {
            store.value_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let input = random_input(1, &c, 8);
        let mut g = Graph::eval();
        let x = g.constant(input.clone());
        let y = transformer_step(&mut g, &store, &p, &c, x, 2, &[3]).unwrap();
        let pcoord = coordinate_embedding(2, 3, 4);
        let ln = |row: &[f64]| {
            let m = row.iter().sum::<f64>() / row.len() as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter()
                .map(|x| (x - m) / (v + LAYER_NORM_EPS).sqrt())
                .collect::<Vec<_>>()
        };
        for i in 0..3 {
            let sum: Vec<f64> = input.row(i).iter().zip(pcoord.row(i)).map(|(a, b)| a + b).collect();
            let expect = ln(&ln(&sum));
            for (a, b) in g.value(y).row(i).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn bias_halting(store: &mut ParamStore, value: f64) {
        store.value_mut("t.halt_w").unwrap().data_mut().fill(0.0);
        store.value_mut("t.halt_b").unwrap().data_mut()[0] = value;
    }

    #[test]
    fn immediate_halt_returns_first_step() {
        let c = small(3, 4, 2);
        let (mut store, p) = setup(&c, 2);
        bias_halting(&mut store, 20.0);
        let input = random_input(2, &c, 3);
        let mut g = Graph::eval();
        let x = g.constant(input);
        let out = act_run(&mut g, &store, &p, &c, x, &[3, 1]).unwrap();
        assert_eq!(out.halt_steps, vec![vec![1, 1, 1], vec![1]]);
        let e1 = transformer_step(&mut g, &store, &p, &c, x, 1, &[3, 1]).unwrap();
        let (ef, e1v) = (g.value(out.state).data(), g.value(e1).data());
        assert_eq!(&ef[..12], &e1v[..12]);
        assert_eq!(&ef[12..16], &e1v[12..16]);
        assert!(ef[16..].iter().all(|&v| v == 0.0));
        assert_eq!(out.mean_steps, 1.0);
    }

    #[test]
    fn low_halting_probability_runs_to_cap() {
        let c = small(3, 4, 2);
        let (mut store, p) = setup(&c, 2);
        bias_halting(&mut store, -30.0);
        let mut g = Graph::eval();
        let x = g.constant(random_input(1, &c, 3));
        let out = act_run(&mut g, &store, &p, &c, x, &[3]).unwrap();
        assert_eq!(out.halt_steps, vec![vec![4, 4, 4]]);
        // Ponder: N + R with R ~ 1.
        assert!((g.value(out.ponder).item() - 5.0).abs() < 1e-9);
        assert!((g.value(out.penalty).item() - 0.05).abs() < 1e-11);
    }

    #[test]
    fn halting_steps_bounded() {
        let c = small(4, 8, 2);
        let mut max_seen = 0;
        for trial in 0..100 {
            let (store, p) = setup(&c, trial);
            let mut g = Graph::eval();
            let x = g.constant(random_input(2, &c, 1000 + trial));
            let out = act_run(&mut g, &store, &p, &c, x, &[4, 2]).unwrap();
            for &h in out.halt_steps.iter().flatten() {
                assert!(h >= 1);
                max_seen = max_seen.max(h);
            }
            for r in out.remainders.iter().flatten() {
                assert!((0.0..=1.0).contains(r));
            }
        }
        assert!(max_seen <= 4);
    }

    #[test]
    fn dynamic_embed_examples() {
        let c = small(3, 2, 1);
        let (mut store, p) = setup(&c, 0);
        let mut g = Graph::eval();
        let zero = g.constant(Tensor::zeros(&[1, 3, 2]));
        let e = dynamic_embed(&mut g, &store, &p, &c, zero).unwrap();
        assert_eq!(g.value(e).data(), &[0.0, 0.0]);

        // Stacked identity blocks / n_s gives the row mean.
        let mut wd = Tensor::zeros(&[6, 2]);
        for blk in 0..3 {
            for j in 0..2 {
                wd.set2(blk * 2 + j, j, 1.0 / 3.0);
            }
        }
        *store.value_mut("t.w_d").unwrap() = wd;
        let mut g = Graph::eval();
        let rows = [1.0, 2.0, 3.0, -1.0, 5.0, 8.0];
        let ef = g.constant(Tensor::new(vec![1, 3, 2], rows.to_vec()).unwrap());
        let e = dynamic_embed(&mut g, &store, &p, &c, ef).unwrap();
        let v = g.value(e).data().to_vec();
        assert!((v[0] - 3.0).abs() < 1e-12 && (v[1] - 3.0).abs() < 1e-12);
        let doubled = g.constant(Tensor::new(vec![1, 3, 2], rows.iter().map(|x| 2.0 * x).collect()).unwrap());
        let e2 = dynamic_embed(&mut g, &store, &p, &c, doubled).unwrap();
        assert_eq!(g.value(e2).data(), &[2.0 * v[0], 2.0 * v[1]]);
    }

    #[test]
    fn block_gradient_with_fixed_halting() {
        // Three unrolled steps; probabilities stay low so the pattern is stable.
        let c = TransformerConfig {
            t_max: 3,
            dropout: 0.0,
            ..small(3, 4, 2)
        };
        let (store, p) = setup(&c, 11);
        let input = random_input(2, &c, 12);
        let lengths = [3, 2];
        let loss_of = |x: &Tensor| {
            let mut g = Graph::eval();
            let xv = g.input(x.clone());
            let out = act_run(&mut g, &store, &p, &c, xv, &lengths).unwrap();
            assert_eq!(out.halt_steps, vec![vec![3, 3, 3], vec![3, 3]]);
            let e = dynamic_embed(&mut g, &store, &p, &c, out.state).unwrap();
            let s = g.sum(e);
            let total = g.add(s, out.penalty).unwrap();
            let v = g.value(total).item();
            let grads = g.backward(total).unwrap();
            (v, grads.wrt(xv).unwrap().to_vec())
        };
        let (_, analytic) = loss_of(&input);
        let h = 1e-5;
        for k in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[k] += h;
            let mut minus = input.clone();
            minus.data_mut()[k] -= h;
            let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[k] - numeric).abs() / denom < 1e-3, "coordinate {k}");
        }
    }
}
