//! Per-token transformations: tokenwise SwiGLU and the tokenwise sparse
//! mixture of experts with its router and auxiliary losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::{logsumexp, Tape, Var};

/// SwiGLU weights, either one set per token or one set shared by all tokens.
#[derive(Clone, Debug)]
pub struct SwigluParams {
    /// `[T, D, r]` when tokenwise, `[D, r]` when shared.
    pub w1: ParamId,
    pub w2: ParamId,
    /// `[T, r, D]` when tokenwise, `[r, D]` when shared.
    pub w3: ParamId,
    pub tokenwise: bool,
    pub tokens: usize,
    pub d_model: usize,
    pub hidden: usize,
}

impl SwigluParams {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        tokens: usize,
        d_model: usize,
        hidden: usize,
        tokenwise: bool,
    ) -> Self {
        let lead: Vec<usize> = if tokenwise { vec![tokens] } else { vec![] };
        let shape = |a: usize, b: usize| [lead.as_slice(), &[a, b]].concat();
        let w1 = store.add(format!("{prefix}.w1"), init.glorot(&shape(d_model, hidden), d_model, hidden));
        let w2 = store.add(format!("{prefix}.w2"), init.glorot(&shape(d_model, hidden), d_model, hidden));
        let w3 = store.add(format!("{prefix}.w3"), init.glorot(&shape(hidden, d_model), hidden, d_model));
        Self { w1, w2, w3, tokenwise, tokens, d_model, hidden }
    }
}

/// `(Swish(X W₁) ⊗ X W₂) W₃` on a `[B, T, D]` batch, each token with its own
/// weights when tokenwise.
pub fn tswiglu_forward<'t>(x: Var<'t>, p: &Bound<'t>, w: &SwigluParams) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    assert_eq!(d, w.d_model, "tswiglu_forward input shape {s:?}");
    if w.tokenwise {
        assert_eq!(t, w.tokens, "tswiglu_forward token count");
        let gate = x.tokenwise_matmul(&p[w.w1]).swish();
        let lin = x.tokenwise_matmul(&p[w.w2]);
        gate.mul(&lin).tokenwise_matmul(&p[w.w3])
    } else {
        swiglu_rows(x.reshape(&[b * t, d]), p, w).reshape(&[b, t, d])
    }
}

/// Shared-weight SwiGLU on the rows of a `[N, D]` var.
pub fn swiglu_rows<'t>(x: Var<'t>, p: &Bound<'t>, w: &SwigluParams) -> Var<'t> {
    debug_assert!(!w.tokenwise);
    let gate = x.matmul(&p[w.w1]).swish();
    gate.mul(&x.matmul(&p[w.w2])).matmul(&p[w.w3])
}

/// Routing record of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterTrace {
    pub batch: usize,
    pub tokens: usize,
    pub experts: usize,
    pub active: usize,
    /// Router logits `z[b, t, i]`, row-major.
    pub logits: Vec<f64>,
    /// Softmax of the logits per position.
    pub probs: Vec<f64>,
    /// Dispatch mask: the top-`active` logits per position.
    pub mask: Vec<bool>,
    /// Fraction of positions routed to each expert.
    pub loads: Vec<f64>,
    /// Mean routing probability of each expert.
    pub mean_probs: Vec<f64>,
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl RouterTrace {
    /// Builds the trace from raw logits laid out `[batch, tokens, experts]`.
    pub fn from_logits(logits: Vec<f64>, batch: usize, tokens: usize, experts: usize, active: usize) -> Self {
        assert_eq!(logits.len(), batch * tokens * experts, "router logit count");
        assert!(active >= 1 && active <= experts, "active experts out of range");
        let positions = batch * tokens;
        let mut probs = vec![0.0; logits.len()];
        let mut mask = vec![false; logits.len()];
        for pos in 0..positions {
            let row = &logits[pos * experts..(pos + 1) * experts];
            let lse = logsumexp(row);
            for (j, z) in row.iter().enumerate() {
                probs[pos * experts + j] = (z - lse).exp();
            }
            for j in top_k(row, active) {
                mask[pos * experts + j] = true;
            }
        }
        let n = positions as f64;
        let mut loads = vec![0.0; experts];
        let mut mean_probs = vec![0.0; experts];
        for pos in 0..positions {
            for j in 0..experts {
                if mask[pos * experts + j] {
                    loads[j] += 1.0;
                }
                mean_probs[j] += probs[pos * experts + j];
            }
        }
        loads.iter_mut().for_each(|v| *v /= n);
        mean_probs.iter_mut().for_each(|v| *v /= n);
        Self { batch, tokens, experts, active, logits, probs, mask, loads, mean_probs }
    }

    pub fn positions(&self) -> usize {
        self.batch * self.tokens
    }

    /// Rows (flattened positions) dispatched to `expert`.
    pub fn rows_for(&self, expert: usize) -> Vec<usize> {
        (0..self.positions()).filter(|&p| self.mask[p * self.experts + expert]).collect()
    }

    /// Coefficient of variation of the expert loads.
    pub fn load_cv(&self) -> f64 {
        coefficient_of_variation(&self.loads)
    }

    /// Checks `Σπ = 1`, `Σm = E_a` per position and `Σf = E_a` within `tol`.
    pub fn check_invariants(&self, tol: f64) -> Result<()> {
        for pos in 0..self.positions() {
            let r = pos * self.experts..(pos + 1) * self.experts;
            let psum: f64 = self.probs[r.clone()].iter().sum();
            let msum = self.mask[r].iter().filter(|&&m| m).count();
            if (psum - 1.0).abs() > tol || msum != self.active {
                return Err(Error::NonFinite(format!(
                    "router position {pos}: Σπ = {psum}, Σm = {msum} (E_a = {})",
                    self.active
                )));
            }
        }
        let fsum: f64 = self.loads.iter().sum();
        if (fsum - self.active as f64).abs() > tol {
            return Err(Error::NonFinite(format!("Σf = {fsum}, expected {}", self.active)));
        }
        Ok(())
    }
}

pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if mean == 0.0 {
        0.0
    } else {
        var.sqrt() / mean
    }
}

/// Weights of the auxiliary router losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxLossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AuxLossConfig {
    fn default() -> Self {
        Self { alpha: 1e-2, beta: 1e-3 }
    }
}

impl AuxLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!("aux loss weights must be non-negative (α={}, β={})", self.alpha, self.beta)));
        }
        Ok(())
    }
}

/// `α · 1/(B·T·E_s) · Σ_i (f_i / E_a) · π̄_i`, with `B`, `T`, `E_s`, `E_a`
/// taken from the trace.
pub fn load_balance_loss(trace: &RouterTrace, alpha: f64) -> f64 {
    let scale = alpha / (trace.positions() * trace.experts) as f64;
    scale * trace.loads.iter().zip(&trace.mean_probs).map(|(f, p)| f / trace.active as f64 * p).sum::<f64>()
}

/// `β · 1/(B·T) · Σ_{b,t} (ln Σ_i e^{z})²` with a stable log-sum-exp.
pub fn z_loss(trace: &RouterTrace, beta: f64) -> f64 {
    let e = trace.experts;
    let total: f64 = trace.logits.chunks(e).map(|row| logsumexp(row).powi(2)).sum();
    beta * total / trace.positions() as f64
}

/// Expert weights (shared across tokens) and routers of a tokenwise sparse MoE.
#[derive(Clone, Debug)]
pub struct TsmoeParams {
    pub tokens: usize,
    pub d_model: usize,
    pub hidden: usize,
    /// `[T, D, E_s]` per-token routers, or `[D, E_s]` when `tokenwise_router` is off.
    pub router: ParamId,
    pub tokenwise_router: bool,
    pub shared: Vec<SwigluParams>,
    pub sparse: Vec<SwigluParams>,
    pub active: usize,
    /// Sum activated experts without gate weights.
    pub unweighted: bool,
}

impl TsmoeParams {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        tokens: usize,
        d_model: usize,
        hidden: usize,
        shared_experts: usize,
        sparse_experts: usize,
        active: usize,
        tokenwise_router: bool,
        unweighted: bool,
    ) -> Result<Self> {
        if active == 0 || active > sparse_experts {
            return Err(Error::Config(format!(
                "need 1 ≤ E_a ≤ E_s (E_a={active}, E_s={sparse_experts})"
            )));
        }
        let router_shape: Vec<usize> =
            if tokenwise_router { vec![tokens, d_model, sparse_experts] } else { vec![d_model, sparse_experts] };
        let router = store.add(format!("{prefix}.router"), init.glorot(&router_shape, d_model, sparse_experts));
        let shared = (0..shared_experts)
            .map(|e| SwigluParams::build(store, init, &format!("{prefix}.shared.{e}"), tokens, d_model, hidden, false))
            .collect();
        let sparse = (0..sparse_experts)
            .map(|e| SwigluParams::build(store, init, &format!("{prefix}.sparse.{e}"), tokens, d_model, hidden, false))
            .collect();
        Ok(Self { tokens, d_model, hidden, router, tokenwise_router, shared, sparse, active, unweighted })
    }

    pub fn sparse_experts(&self) -> usize {
        self.sparse.len()
    }
}

/// Router output: the value-level trace plus the differentiable logits.
pub struct Routing<'t> {
    pub trace: RouterTrace,
    /// `[B·T, E_s]` router logits on the tape.
    pub logits: Var<'t>,
}

/// Computes `Gate(t_i) = W₀ⁱ t_i` for every position and selects the
/// top-`E_a` experts.
pub fn route_tokens<'t>(x: Var<'t>, p: &Bound<'t>, moe: &TsmoeParams) -> Routing<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let e = moe.sparse_experts();
    let logits = if moe.tokenwise_router {
        x.tokenwise_matmul(&p[moe.router]).reshape(&[b * t, e])
    } else {
        x.reshape(&[b * t, d]).matmul(&p[moe.router])
    };
    let trace = RouterTrace::from_logits(logits.data().as_ref().clone(), b, t, e, moe.active);
    Routing { trace, logits }
}

/// Shared experts (unweighted) plus activated sparse experts weighted by the
/// softmax renormalized over the activated set. Only activated experts are
/// evaluated, each on exactly the rows routed to it.
pub fn tsmoe_forward<'t>(tape: &'t Tape, x: Var<'t>, p: &Bound<'t>, moe: &TsmoeParams, routing: &Routing<'t>) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let n = b * t;
    let trace = &routing.trace;
    assert_eq!(trace.positions(), n, "trace does not match input");
    let flat = x.reshape(&[n, d]);

    let gates = (!moe.unweighted).then(|| routing.logits.masked_softmax(&trace.mask));
    let e_s = moe.sparse_experts();
    let mut parts = Vec::with_capacity(e_s);
    let mut scatter_idx = Vec::with_capacity(n * moe.active * d);
    for (e, expert) in moe.sparse.iter().enumerate() {
        let rows = trace.rows_for(e);
        if rows.is_empty() {
            continue;
        }
        let mut ye = swiglu_rows(flat.gather_rows(&rows), p, expert);
        if let Some(g) = &gates {
            let gi: Vec<usize> = rows.iter().map(|&r| r * e_s + e).collect();
            let len = gi.len();
            ye = ye.scale_rows(&g.gather(Rc::new(gi), &[len]));
        }
        scatter_idx.extend(rows.iter().flat_map(|&r| r * d..(r + 1) * d));
        parts.push(ye);
    }
    let routed = if parts.is_empty() {
        tape.constant_from(&[n, d], vec![0.0; n * d])
    } else {
        Var::concat(&parts, 0).scatter_add(Rc::new(scatter_idx), &[n, d])
    };
    let mut out = routed;
    for expert in &moe.shared {
        out = swiglu_rows(flat, p, expert).add(&out);
    }
    out.reshape(&[b, t, d])
}

/// Differentiable load-balancing loss; gradient flows through `π̄` only.
pub fn load_balance_loss_var<'t>(tape: &'t Tape, routing: &Routing<'t>, alpha: f64) -> Var<'t> {
    let trace = &routing.trace;
    let e = trace.experts;
    let pi_bar = routing.logits.softmax().mean_axis(0);
    let scale = alpha / (trace.positions() * e) as f64 / trace.active as f64;
    let coef = tape.constant_from(&[e], trace.loads.iter().map(|f| f * scale).collect());
    pi_bar.mul(&coef).sum()
}

/// Differentiable z-loss on the router logits.
pub fn z_loss_var<'t>(routing: &Routing<'t>, beta: f64) -> Var<'t> {
    routing.logits.logsumexp().square().mean().scale(beta)
}
