//! Inter-token interaction: retokenized self-attention (RSA) and tokenwise
//! multi-head self-attention (TMHSA).

use crate::error::{Error, Result};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Layer-norm epsilon used throughout the model.
pub const NORM_EPS: f64 = 1e-5;

/// Gain/bias of one layer normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormParams {
    pub fn build(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(&p[self.gain], &p[self.bias], NORM_EPS)
    }
}

/// Number of output tokens after retokenizing `tokens × k` into rows of `d`.
pub fn retokenized_count(tokens: usize, k: usize, d: usize) -> Result<usize> {
    if d == 0 || !(tokens * k).is_multiple_of(d) {
        return Err(Error::Config(format!(
            "retokenization needs T·k divisible by D (T={tokens}, k={k}, D={d})"
        )));
    }
    Ok(tokens * k / d)
}

/// Flattens a `T × k` matrix row-major and reshapes it to `T̂ × D`.
///
/// Pure metadata: the data buffer is moved, not touched.
pub fn retokenize(o1: Tensor, d: usize) -> Result<Tensor> {
    let [t, k] = o1.shape() else {
        return Err(Error::Config(format!("retokenize expects a 2-D input, got {:?}", o1.shape())));
    };
    let t_hat = retokenized_count(*t, *k, d)?;
    o1.reshape(&[t_hat, d])
}

/// Inverse of [`retokenize`].
pub fn detokenize(o_tf: Tensor, k: usize) -> Result<Tensor> {
    let [t_hat, d] = o_tf.shape() else {
        return Err(Error::Config(format!("detokenize expects a 2-D input, got {:?}", o_tf.shape())));
    };
    let t = retokenized_count(*t_hat, *d, k)?;
    o_tf.reshape(&[t, k])
}

/// Retokenizes a batch `[B, T, k] -> [B, T̂, D]` on the tape.
pub fn retokenize_var<'t>(o1: Var<'t>, d: usize) -> Result<Var<'t>> {
    let s = o1.shape();
    let [b, t, k] = s[..] else {
        return Err(Error::Config(format!("retokenize expects [B, T, k], got {s:?}")));
    };
    let t_hat = retokenized_count(t, k, d)?;
    Ok(o1.reshape(&[b, t_hat, d]))
}

/// Parameters of retokenized self-attention.
#[derive(Clone, Debug)]
pub struct RsaParams {
    pub tokens: usize,
    pub d_model: usize,
    pub k: usize,
    pub out_tokens: usize,
    /// `D × k` projection applied after `X Xᵀ X`.
    pub w_r: ParamId,
    /// Shared `D × D` map of the residual branch.
    pub residual: ParamId,
    pub norm: NormParams,
    pub softmax: bool,
}

impl RsaParams {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        tokens: usize,
        d_model: usize,
        k: usize,
        softmax: bool,
    ) -> Result<Self> {
        let out_tokens = retokenized_count(tokens, k, d_model)?;
        if out_tokens == 0 || !tokens.is_multiple_of(out_tokens) {
            return Err(Error::Config(format!(
                "residual grouping needs T̂ | T (T={tokens}, T̂={out_tokens})"
            )));
        }
        Ok(Self {
            tokens,
            d_model,
            k,
            out_tokens,
            w_r: store.add(format!("{prefix}.w_r"), init.glorot(&[d_model, k], d_model, k)),
            residual: store.add(format!("{prefix}.residual"), init.glorot(&[d_model, d_model], d_model, d_model)),
            norm: NormParams::build(store, &format!("{prefix}.norm"), d_model),
            softmax,
        })
    }
}

/// `Norm(retokenize(X Xᵀ X W_R) + MLP(X))` for a `[B, T, D]` batch; returns `[B, T̂, D]`.
///
/// The residual MLP maps each token through the shared `D × D` matrix and
/// averages consecutive blocks of `T / T̂` tokens.
pub fn rsa_forward<'t>(x: Var<'t>, p: &Bound<'t>, rsa: &RsaParams) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    assert_eq!((t, d), (rsa.tokens, rsa.d_model), "rsa_forward input shape {s:?}");
    let mut gram = x.bmm(&x, true);
    if rsa.softmax {
        gram = gram.softmax();
    }
    let o1 = gram.bmm(&x, false).reshape(&[b * t, d]).matmul(&p[rsa.w_r]).reshape(&[b, t, rsa.k]);
    let o_tf = retokenize_var(o1, d).expect("checked at build time");
    let group = t / rsa.out_tokens;
    let residual = x
        .reshape(&[b * t, d])
        .matmul(&p[rsa.residual])
        .reshape(&[b, rsa.out_tokens, group, d])
        .mean_axis(2);
    rsa.norm.apply(p, o_tf.add(&residual))
}

/// Parameters of tokenwise multi-head self-attention.
///
/// `q`, `k`, `v` are `[T, D, D]`: token `i` owns a `D × D` block whose column
/// slice `h·d_k .. (h+1)·d_k` is the head-`h` projection.
#[derive(Clone, Debug)]
pub struct TmhsaParams {
    pub tokens: usize,
    pub d_model: usize,
    pub heads: usize,
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub norm: NormParams,
    pub softmax: bool,
}

impl TmhsaParams {
    pub fn build(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        tokens: usize,
        d_model: usize,
        heads: usize,
        softmax: bool,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("head count must divide D (H={heads}, D={d_model})")));
        }
        let d_k = d_model / heads;
        let mut proj = |name: &str| {
            store.add(format!("{prefix}.{name}"), init.glorot(&[tokens, d_model, d_model], d_model, d_k))
        };
        let (q, k, v) = (proj("q"), proj("k"), proj("v"));
        Ok(Self { tokens, d_model, heads, q, k, v, norm: NormParams::build(store, &format!("{prefix}.norm"), d_model), softmax })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Splits `[B, T, D]` into `[B·H, T, d_k]` head-major blocks.
fn split_heads<'t>(x: Var<'t>, heads: usize) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    let dk = d / heads;
    x.reshape(&[b, t, heads, dk]).permute(&[0, 2, 1, 3]).reshape(&[b * heads, t, dk])
}

/// Tokenwise attention without softmax (unless enabled): per head,
/// `(Q_h K_hᵀ / √d_k) V_h`, heads concatenated, then `Norm(O_TF + X)`.
pub fn tmhsa_forward<'t>(x: Var<'t>, p: &Bound<'t>, att: &TmhsaParams) -> Var<'t> {
    let o_tf = tmhsa_mix(x, p, att);
    att.norm.apply(p, o_tf.add(&x))
}

/// The attention output `O_TF` before the residual and normalization.
pub fn tmhsa_mix<'t>(x: Var<'t>, p: &Bound<'t>, att: &TmhsaParams) -> Var<'t> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[1], s[2]);
    assert_eq!((t, d), (att.tokens, att.d_model), "tmhsa_forward input shape {s:?}");
    let h = att.heads;
    let dk = att.head_dim();
    let q = split_heads(x.tokenwise_matmul(&p[att.q]), h);
    let k = split_heads(x.tokenwise_matmul(&p[att.k]), h);
    let v = split_heads(x.tokenwise_matmul(&p[att.v]), h);
    let mut scores = q.bmm(&k, true).scale(1.0 / (dk as f64).sqrt());
    if att.softmax {
        scores = scores.softmax();
    }
    scores
        .bmm(&v, false)
        .reshape(&[b, h, t, dk])
        .permute(&[0, 2, 1, 3])
        .reshape(&[b, t, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, DEFAULT_STEP};
    use crate::params::ParamStore;
    use crate::tape::Tape;

    fn rand_input(seed: u64, shape: &[usize]) -> Tensor {
        Initializer::new(seed).uniform(shape, 1.0)
    }

    #[test]
    fn retokenize_pure_flatten() {
        let o1 = Tensor::from_fn(&[2, 4], |i| i as f64 + 1.0);
        let out = retokenize(o1, 8).unwrap();
        assert_eq!(out.shape(), &[1, 8]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn retokenize_inverse_is_bitwise_identity() {
        let o1 = rand_input(3, &[8, 256]);
        let back = detokenize(retokenize(o1.clone(), 512).unwrap(), 256).unwrap();
        assert_eq!(back, o1);
    }

    #[test]
    fn retokenize_indivisible_is_config_error() {
        assert!(matches!(retokenize(Tensor::zeros(&[3, 5]), 4), Err(Error::Config(_))));
    }

    #[test]
    fn rsa_reference_shapes() {
        let mut store = ParamStore::new();
        let rsa = RsaParams::build(&mut store, &mut Initializer::new(0), "rsa", 8, 512, 256, false).unwrap();
        assert_eq!(rsa.out_tokens, 4);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(&Initializer::new(1).uniform(&[1, 8, 512], 0.05));
        assert_eq!(rsa_forward(x, &p, &rsa).shape(), vec![1, 4, 512]);
    }

    #[test]
    fn rsa_zero_input_is_norm_of_residual() {
        let mut store = ParamStore::new();
        let rsa = RsaParams::build(&mut store, &mut Initializer::new(0), "rsa", 4, 4, 2, false).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = tape.constant(&Tensor::zeros(&[1, 4, 4]));
        let out = rsa_forward(x, &p, &rsa).value();
        // MLP(0) = 0 and Norm(0) = bias = 0
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[1, 2, 4]);
    }

    #[test]
    fn single_token_cubic_closed_form() {
        let x = Tensor::new(vec![1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let xv = tape.constant(&x);
        let cubic = xv.bmm(&xv, true).bmm(&xv, false).value();
        let norm2: f64 = x.data().iter().map(|v| v * v).sum();
        for (c, v) in cubic.data().iter().zip(x.data()) {
            assert!((c - norm2 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn tmhsa_identity_projections_match_closed_form() {
        let (t, d) = (3, 4);
        let mut store = ParamStore::new();
        let att = TmhsaParams::build(&mut store, &mut Initializer::new(0), "att", t, d, 1, false).unwrap();
        for id in [att.q, att.k, att.v] {
            *store.get_mut(id) = Tensor::from_fn(&[t, d, d], |i| if (i % (d * d)) / d == i % d { 1.0 } else { 0.0 });
        }
        let x = rand_input(4, &[1, t, d]);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let got = tmhsa_mix(tape.constant(&x), &p, &att).value();
        // (X Xᵀ / √D) X by hand
        let xm = |i: usize, j: usize| x.data()[i * d + j];
        for i in 0..t {
            for j in 0..d {
                let mut want = 0.0;
                for m in 0..t {
                    let dot: f64 = (0..d).map(|c| xm(i, c) * xm(m, c)).sum();
                    want += dot / (d as f64).sqrt() * xm(m, j);
                }
                assert!((got.data()[i * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tmhsa_zero_input_is_norm_of_zero() {
        let mut store = ParamStore::new();
        let att = TmhsaParams::build(&mut store, &mut Initializer::new(0), "att", 2, 4, 2, false).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let out = tmhsa_forward(tape.constant(&Tensor::zeros(&[1, 2, 4])), &p, &att).value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tmhsa_rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let err = TmhsaParams::build(&mut store, &mut Initializer::new(0), "att", 8, 512, 3, false).unwrap_err();
        assert!(err.to_string().contains("H=3"));
    }

    #[test]
    fn tmhsa_parameter_count_is_three_t_d_squared() {
        for heads in [1, 2, 4, 8] {
            let mut store = ParamStore::new();
            TmhsaParams::build(&mut store, &mut Initializer::new(0), "att", 8, 256, heads, false).unwrap();
            assert_eq!(store.numel_with_prefix("att.q") * 3, 3 * 8 * 256 * 256);
            assert_eq!(store.numel() - 2 * 256, 1_572_864);
        }
    }

    #[test]
    fn identical_tokens_get_distinct_queries() {
        let mut store = ParamStore::new();
        let att = TmhsaParams::build(&mut store, &mut Initializer::new(9), "att", 2, 4, 2, false).unwrap();
        let row = [0.3, -0.2, 0.9, 0.1];
        let x = Tensor::new(vec![1, 2, 4], [row, row].concat()).unwrap();
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let q = tape.constant(&x).tokenwise_matmul(&p[att.q]).value();
        assert_ne!(&q.data()[0..4], &q.data()[4..8]);
    }

    #[test]
    fn tmhsa_not_permutation_equivariant() {
        let mut store = ParamStore::new();
        let att = TmhsaParams::build(&mut store, &mut Initializer::new(2), "att", 3, 4, 2, false).unwrap();
        let x = rand_input(5, &[1, 3, 4]);
        let swapped = Tensor::from_fn(&[1, 3, 4], |i| {
            let (t, j) = (i / 4, i % 4);
            let src = [1, 0, 2][t];
            x.data()[src * 4 + j]
        });
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let y = tmhsa_forward(tape.constant(&x), &p, &att).value();
        let ys = tmhsa_forward(tape.constant(&swapped), &p, &att).value();
        let permuted_y: Vec<f64> = [1, 0, 2].iter().flat_map(|&t| y.data()[t * 4..(t + 1) * 4].to_vec()).collect();
        let diff = ys.data().iter().zip(&permuted_y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        for softmax in [false, true] {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(17);
            let rsa = RsaParams::build(&mut store, &mut init, "rsa", 4, 4, 2, softmax).unwrap();
            let att = TmhsaParams::build(&mut store, &mut init, "att", 2, 4, 2, softmax).unwrap();
            let mut params = store.tensors().to_vec();
            params.push(rand_input(8, &[2, 4, 4]));
            let n = store.len();
            let report = check_gradients(&params, DEFAULT_STEP, |_, v| {
                let p = ParamStore::bind_vars(&v[..n]);
                let x = v[n];
                let y = rsa_forward(x, &p, &rsa); // [2,2,4]
                let z = tmhsa_forward(y, &p, &att);
                Ok(z.square().mean().add(&z.mean()))
            })
            .unwrap();
            for c in report {
                assert!(c.rel_err <= 1e-4, "softmax={softmax} param {} rel err {:.2e}", c.index, c.rel_err);
            }
        }
    }
}
