//! Model assembly: Prime Tokenization, a stack of Token Fusion / Token Boost
//! layers and a prediction head, plus closed-form cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurizer::{ExampleBatch, FeatureSchema, Mlp, PrimeTokenizer, TokenPlan};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::token_boost::{route_tokens, tsmoe_forward, tswiglu_forward, Routing, SwigluParams, TsmoeParams};
use crate::token_fusion::{rsa_forward, tmhsa_forward, NormParams, RsaParams, TmhsaParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Retokenized self-attention + tokenwise SwiGLU.
    Zenith,
    /// Tokenwise multi-head attention + tokenwise sparse MoE.
    ZenithPp,
}

fn default_head_hidden() -> Vec<usize> {
    vec![256]
}

fn default_true() -> bool {
    true
}

fn default_max_features() -> usize {
    4
}

/// Architecture hyperparameters. Fields that only one variant uses may be
/// left at zero for the other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Layer count `L`.
    pub layers: usize,
    /// Prime Token count `T`.
    pub tokens: usize,
    /// Token dimension `D`.
    pub d_model: usize,
    /// RSA projection width `k`.
    #[serde(default)]
    pub k: usize,
    /// Retokenized count `T̂`, must satisfy `T·k = T̂·D`.
    #[serde(default)]
    pub out_tokens: usize,
    /// SwiGLU hidden width `r`.
    pub ffn_hidden: usize,
    /// Attention heads `H`.
    #[serde(default)]
    pub heads: usize,
    /// Always-on experts `E_c`.
    #[serde(default)]
    pub shared_experts: usize,
    /// Routed experts `E_s`.
    #[serde(default)]
    pub sparse_experts: usize,
    /// Experts activated per token `E_a`.
    #[serde(default)]
    pub active_experts: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default)]
    pub attention_softmax: bool,
    #[serde(default)]
    pub unweighted_experts: bool,
    /// Per-token boost weights and routers; `false` builds the shared-weight
    /// counterparts (plain SwiGLU, one router for all tokens).
    #[serde(default = "default_true")]
    pub tokenwise_boost: bool,
    /// Largest number of non-id features grouped into one Prime Token.
    #[serde(default = "default_max_features")]
    pub max_features_per_token: usize,
    /// Hidden width of the per-token projection MLPs; `None` means `2·D`.
    #[serde(default)]
    pub projection_hidden: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Small RSA model for the default desk schema (8 Prime Tokens).
    pub fn small_zenith() -> Self {
        Self {
            variant: Variant::Zenith,
            layers: 3,
            tokens: 8,
            d_model: 16,
            k: 8,
            out_tokens: 4,
            ffn_hidden: 32,
            heads: 0,
            shared_experts: 0,
            sparse_experts: 0,
            active_experts: 0,
            head_hidden: vec![64],
            attention_softmax: false,
            unweighted_experts: false,
            tokenwise_boost: true,
            max_features_per_token: 4,
            projection_hidden: None,
            seed: 0,
        }
    }

    /// Small attention + MoE model for the default desk schema.
    pub fn small_zenith_pp() -> Self {
        Self {
            variant: Variant::ZenithPp,
            k: 0,
            out_tokens: 0,
            heads: 2,
            shared_experts: 1,
            sparse_experts: 4,
            active_experts: 2,
            ..Self::small_zenith()
        }
    }

    /// Every broken constraint, named.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |name: &str, value: usize| {
            if value == 0 {
                v.push(format!("{name} must be positive"));
            }
        };
        positive("L (layers)", self.layers);
        positive("T (tokens)", self.tokens);
        positive("D (d_model)", self.d_model);
        positive("r (ffn_hidden)", self.ffn_hidden);
        positive("max_features_per_token", self.max_features_per_token);
        if self.head_hidden.contains(&0) {
            v.push("head_hidden widths must be positive".into());
        }
        if self.projection_hidden == Some(0) {
            v.push("projection_hidden must be positive".into());
        }
        match self.variant {
            Variant::Zenith => {
                if self.k == 0 {
                    v.push("k must be positive".into());
                }
                if self.out_tokens == 0 {
                    v.push("T̂ (out_tokens) must be positive".into());
                } else {
                    if self.tokens * self.k != self.out_tokens * self.d_model {
                        v.push(format!(
                            "T·k = T̂·D violated (T={}, k={}, T̂={}, D={})",
                            self.tokens, self.k, self.out_tokens, self.d_model
                        ));
                    }
                    if !self.tokens.is_multiple_of(self.out_tokens) {
                        v.push(format!("T̂ | T violated (T̂={}, T={})", self.out_tokens, self.tokens));
                    }
                }
            }
            Variant::ZenithPp => {
                if self.heads == 0 {
                    v.push("H (heads) must be positive".into());
                } else if !self.d_model.is_multiple_of(self.heads) {
                    v.push(format!("H | D violated (H={}, D={})", self.heads, self.d_model));
                }
                if self.sparse_experts == 0 {
                    v.push("E_s (sparse_experts) must be positive".into());
                }
                if self.active_experts == 0 {
                    v.push("E_a (active_experts) must be positive".into());
                }
                if self.active_experts > self.sparse_experts {
                    v.push(format!(
                        "E_a ≤ E_s violated (E_a={}, E_s={})",
                        self.active_experts, self.sparse_experts
                    ));
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::violations(v))
        }
    }

    /// Tokens leaving the Token Boost of each layer (`T̂` or `T`).
    pub fn boost_tokens(&self) -> usize {
        match self.variant {
            Variant::Zenith => self.out_tokens,
            Variant::ZenithPp => self.tokens,
        }
    }

    pub fn token_plan(&self, schema: &FeatureSchema) -> TokenPlan {
        let hidden = self.projection_hidden.unwrap_or(2 * self.d_model);
        TokenPlan::from_schema(schema, self.d_model, self.max_features_per_token, Some(hidden))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Rsa(RsaParams),
    Tmhsa(TmhsaParams),
}

#[derive(Clone, Debug)]
pub enum Boost {
    Swiglu(SwigluParams),
    Moe(TsmoeParams),
}

/// Parameters of one layer.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub fusion: Fusion,
    pub boost: Boost,
    /// Shared `D × D` map regenerating the last `T − T̂` tokens (RSA only, `T̂ < T`).
    pub regen: Option<ParamId>,
    pub norm: NormParams,
}

/// Tape values produced by one forward pass.
pub struct ForwardOutput<'t> {
    /// `[B]` pre-sigmoid scores.
    pub logits: Var<'t>,
    /// `[B, T, D]` output of every layer.
    pub layer_outputs: Vec<Var<'t>>,
    /// Routing of every MoE layer, in layer order.
    pub routings: Vec<Routing<'t>>,
}

/// A built model: configuration, tokenizer, layers, head and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub tokenizer: PrimeTokenizer,
    pub layers: Vec<LayerParams>,
    pub head: Mlp,
    pub store: ParamStore,
}

/// Rows scored per tape in [`Scorer::predict`].
const PREDICT_CHUNK: usize = 1024;

/// Logits and routing traces of one scored batch.
pub struct Scored<'t> {
    /// `[B]` pre-sigmoid scores.
    pub logits: Var<'t>,
    pub routings: Vec<Routing<'t>>,
}

/// Anything trainable that maps a batch to click logits.
pub trait Scorer {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn score<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Scored<'t>>;

    /// Predicted click probabilities.
    fn predict(&self, batch: &ExampleBatch) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(batch.len());
        let mut start = 0;
        while start < batch.len() {
            let end = (start + PREDICT_CHUNK).min(batch.len());
            let chunk = batch.range(start, end);
            let tape = Tape::new();
            let p = self.store().bind_frozen(&tape);
            out.extend(self.score(&tape, &p, &chunk)?.logits.sigmoid().data().iter());
            start = end;
        }
        Ok(out)
    }
}

impl Scorer for Model {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn score<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<Scored<'t>> {
        let out = self.forward(tape, p, batch)?;
        Ok(Scored { logits: out.logits, routings: out.routings })
    }
}

impl Model {
    /// Builds and initializes a model for `schema` from `cfg.seed`.
    pub fn build(cfg: &ModelConfig, schema: &FeatureSchema) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.token_plan(schema);
        if plan.num_tokens() != cfg.tokens {
            return Err(Error::Config(format!(
                "schema yields {} Prime Tokens but T = {}",
                plan.num_tokens(),
                cfg.tokens
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        let tokenizer = PrimeTokenizer::build(schema, &plan, &mut store, &mut init)?;
        let (t, d) = (cfg.tokens, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let pre = format!("layer.{l}");
            let layer = match cfg.variant {
                Variant::Zenith => {
                    let rsa = RsaParams::build(&mut store, &mut init, &format!("{pre}.fusion"), t, d, cfg.k, cfg.attention_softmax)?;
                    let t_hat = rsa.out_tokens;
                    let boost = SwigluParams::build(
                        &mut store,
                        &mut init,
                        &format!("{pre}.boost"),
                        t_hat,
                        d,
                        cfg.ffn_hidden,
                        cfg.tokenwise_boost,
                    );
                    let regen = (t_hat < t).then(|| store.add(format!("{pre}.regen"), init.glorot(&[d, d], d, d)));
                    LayerParams {
                        fusion: Fusion::Rsa(rsa),
                        boost: Boost::Swiglu(boost),
                        regen,
                        norm: NormParams::build(&mut store, &format!("{pre}.norm"), d),
                    }
                }
                Variant::ZenithPp => {
                    let att = TmhsaParams::build(&mut store, &mut init, &format!("{pre}.fusion"), t, d, cfg.heads, cfg.attention_softmax)?;
                    let moe = TsmoeParams::build(
                        &mut store,
                        &mut init,
                        &format!("{pre}.boost"),
                        t,
                        d,
                        cfg.ffn_hidden,
                        cfg.shared_experts,
                        cfg.sparse_experts,
                        cfg.active_experts,
                        cfg.tokenwise_boost,
                        cfg.unweighted_experts,
                    )?;
                    LayerParams {
                        fusion: Fusion::Tmhsa(att),
                        boost: Boost::Moe(moe),
                        regen: None,
                        norm: NormParams::build(&mut store, &format!("{pre}.norm"), d),
                    }
                }
            };
            layers.push(layer);
        }
        let head_dims: Vec<usize> = std::iter::once(t * d).chain(cfg.head_hidden.iter().copied()).chain([1]).collect();
        let head = Mlp::build(&mut store, &mut init, "head", &head_dims);
        Ok(Self { cfg: cfg.clone(), tokenizer, layers, head, store })
    }

    pub fn schema(&self) -> &FeatureSchema {
        self.tokenizer.schema()
    }

    /// Runs one layer on a `[B, T, D]` input.
    pub fn layer_forward<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t>,
        layer: &LayerParams,
        x: Var<'t>,
    ) -> (Var<'t>, Option<Routing<'t>>) {
        match (&layer.fusion, &layer.boost) {
            (Fusion::Rsa(rsa), Boost::Swiglu(sw)) => {
                let x_tb = rsa_forward(x, p, rsa);
                let o_tb = tswiglu_forward(x_tb, p, sw);
                let joined = match layer.regen {
                    Some(w) => {
                        let s = x.shape();
                        let (b, t, d) = (s[0], s[1], s[2]);
                        let rest = t - rsa.out_tokens;
                        let regen = x
                            .slice(1, rsa.out_tokens, rest)
                            .reshape(&[b * rest, d])
                            .matmul(&p[w])
                            .reshape(&[b, rest, d]);
                        Var::concat(&[o_tb, regen], 1)
                    }
                    None => o_tb,
                };
                (layer.norm.apply(p, joined.add(&x)), None)
            }
            (Fusion::Tmhsa(att), Boost::Moe(moe)) => {
                let x_tb = tmhsa_forward(x, p, att);
                let routing = route_tokens(x_tb, p, moe);
                let o_tb = tsmoe_forward(tape, x_tb, p, moe, &routing);
                (layer.norm.apply(p, o_tb.add(&x)), Some(routing))
            }
            _ => unreachable!("layer modules always match the variant"),
        }
    }

    /// Forward pass on an already-bound parameter set.
    pub fn forward<'t>(&self, tape: &'t Tape, p: &Bound<'t>, batch: &ExampleBatch) -> Result<ForwardOutput<'t>> {
        let mut x = self.tokenizer.tokenize(tape, p, batch)?;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut routings = Vec::new();
        for layer in &self.layers {
            let (y, routing) = self.layer_forward(tape, p, layer, x);
            routings.extend(routing);
            layer_outputs.push(y);
            x = y;
        }
        let b = batch.len();
        let flat = x.reshape(&[b, self.cfg.tokens * self.cfg.d_model]);
        let logits = self.head.forward(p, flat).reshape(&[b]);
        Ok(ForwardOutput { logits, layer_outputs, routings })
    }

    /// Interaction-layer parameters counted by enumerating built tensors.
    pub fn enumerate_layer_params(&self) -> usize {
        self.store.numel_with_prefix("layer.")
    }
}

/// Itemized parameter and FLOP counts of one layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub fusion_params: u64,
    pub boost_params: u64,
    /// Routed-expert weights excluded when only `E_a` experts run.
    pub idle_boost_params: u64,
    pub regen_params: u64,
    pub norm_params: u64,
    /// Fusion, boost and regeneration weights (norms excluded).
    pub interaction_params: u64,
    pub params: u64,
    pub activated_params: u64,
    pub fusion_flops: u64,
    pub boost_flops: u64,
    pub regen_flops: u64,
    pub flops: u64,
}

/// Parameter and per-example FLOP accounting.
///
/// FLOPs count matrix products only, two per multiply-add; elementwise work
/// is excluded. Sparse experts are counted for activated tokens only.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: Variant,
    pub layers: Vec<LayerCost>,
    pub layer_params: u64,
    pub activated_layer_params: u64,
    pub head_params: u64,
    /// Embedding tables and dense lifts (needs a schema).
    pub embedding_params: Option<u64>,
    /// Prime Token projections (needs a schema).
    pub tokenizer_params: Option<u64>,
    pub total_params: Option<u64>,
    pub activated_params: Option<u64>,
    pub layer_flops: u64,
    pub head_flops: u64,
    pub tokenizer_flops: Option<u64>,
    pub flops_per_example: Option<u64>,
}

fn layer_cost(cfg: &ModelConfig) -> LayerCost {
    let u = |v: usize| v as u64;
    let (t, d, r) = (u(cfg.tokens), u(cfg.d_model), u(cfg.ffn_hidden));
    let mut c = LayerCost::default();
    match cfg.variant {
        Variant::Zenith => {
            let (k, t_hat) = (u(cfg.k), u(cfg.out_tokens));
            c.fusion_params = d * k + d * d;
            c.boost_params = if cfg.tokenwise_boost { 3 * t_hat * d * r } else { 3 * d * r };
            c.regen_params = if t_hat < t { d * d } else { 0 };
            c.norm_params = 4 * d;
            // X Xᵀ, (X Xᵀ) X, the W_R projection and the residual map.
            c.fusion_flops = 4 * t * t * d + 2 * t * d * k + 2 * t * d * d;
            c.boost_flops = 6 * t_hat * d * r;
            c.regen_flops = 2 * (t - t_hat) * d * d;
        }
        Variant::ZenithPp => {
            let (e_c, e_s, e_a) = (u(cfg.shared_experts), u(cfg.sparse_experts), u(cfg.active_experts));
            let router = if cfg.tokenwise_boost { t * d * e_s } else { d * e_s };
            c.fusion_params = 3 * t * d * d;
            c.boost_params = router + 3 * d * r * (e_c + e_s);
            c.idle_boost_params = 3 * d * r * (e_s - e_a);
            c.norm_params = 4 * d;
            // Q/K/V projections, scores and weighted values over all heads.
            c.fusion_flops = 6 * t * d * d + 4 * t * t * d;
            c.boost_flops = 2 * t * d * e_s + 6 * t * d * r * (e_c + e_a);
        }
    }
    c.interaction_params = c.fusion_params + c.boost_params + c.regen_params;
    c.params = c.interaction_params + c.norm_params;
    c.activated_params = c.params - c.idle_boost_params;
    c.flops = c.fusion_flops + c.boost_flops + c.regen_flops;
    c
}

/// Closed-form parameter and FLOP counts. Embedding and tokenizer entries
/// are filled in when a schema is given.
pub fn count_costs(cfg: &ModelConfig, schema: Option<&FeatureSchema>) -> Result<CostReport> {
    cfg.validate()?;
    let layer = layer_cost(cfg);
    let layers = vec![layer.clone(); cfg.layers];
    let l = cfg.layers as u64;
    let head_dims: Vec<u64> = std::iter::once((cfg.tokens * cfg.d_model) as u64)
        .chain(cfg.head_hidden.iter().map(|&h| h as u64))
        .chain([1])
        .collect();
    let head_params = head_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    let head_flops = head_dims.windows(2).map(|w| 2 * w[0] * w[1]).sum();

    let mut report = CostReport {
        variant: cfg.variant,
        layer_params: l * layer.params,
        activated_layer_params: l * layer.activated_params,
        layers,
        head_params,
        embedding_params: None,
        tokenizer_params: None,
        total_params: None,
        activated_params: None,
        layer_flops: l * layer.flops,
        head_flops,
        tokenizer_flops: None,
        flops_per_example: None,
    };
    if let Some(schema) = schema {
        let plan = cfg.token_plan(schema);
        let embedding: u64 = schema
            .features
            .iter()
            .map(|f| if f.kind.is_sparse() { (f.vocab * f.emb_dim) as u64 } else { 2 * f.emb_dim as u64 })
            .sum();
        let dense_flops: u64 =
            schema.features.iter().filter(|f| !f.kind.is_sparse()).map(|f| 2 * f.emb_dim as u64).sum();
        let (mut proj_params, mut proj_flops) = (0u64, 0u64);
        for (tok, input) in plan.tokens.iter().zip(plan.input_dims(schema)) {
            let dims: Vec<u64> = match tok.hidden {
                Some(h) => vec![input as u64, h as u64, cfg.d_model as u64],
                None => vec![input as u64, cfg.d_model as u64],
            };
            proj_params += dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<u64>();
            proj_flops += dims.windows(2).map(|w| 2 * w[0] * w[1]).sum::<u64>();
        }
        let fixed = embedding + proj_params + head_params;
        report.embedding_params = Some(embedding);
        report.tokenizer_params = Some(proj_params);
        report.total_params = Some(fixed + report.layer_params);
        report.activated_params = Some(fixed + report.activated_layer_params);
        report.tokenizer_flops = Some(dense_flops + proj_flops);
        report.flops_per_example = Some(dense_flops + proj_flops + report.layer_flops + head_flops);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::{FeatureKind, FeatureSpec, GroundTruth, GroundTruthSpec};
    use crate::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two ids, two categorical groups and one dense feature: 4 tokens at
    /// `max_features_per_token = 2`.
    fn tiny_schema() -> FeatureSchema {
        let f = |name: &str, kind, vocab, group: &str| FeatureSpec {
            name: name.into(),
            kind,
            vocab,
            group: group.into(),
            emb_dim: 3,
        };
        FeatureSchema {
            features: vec![
                f("user_id", FeatureKind::Id, 6, "user"),
                f("item_id", FeatureKind::Id, 5, "item"),
                f("c0", FeatureKind::Categorical, 4, "ctx"),
                f("c1", FeatureKind::Categorical, 3, "ctx"),
                f("c2", FeatureKind::Categorical, 3, "dev"),
                f("x0", FeatureKind::Dense, 0, "dev"),
            ],
        }
    }

    fn tiny(variant: Variant) -> ModelConfig {
        let base = ModelConfig {
            layers: 2,
            tokens: 4,
            d_model: 8,
            head_hidden: vec![5],
            max_features_per_token: 2,
            seed: 3,
            ..ModelConfig::small_zenith()
        };
        match variant {
            Variant::Zenith => ModelConfig { k: 8, out_tokens: 4, ffn_hidden: 8, ..base },
            Variant::ZenithPp => ModelConfig {
                variant,
                k: 0,
                out_tokens: 0,
                ffn_hidden: 4,
                heads: 2,
                shared_experts: 1,
                sparse_experts: 4,
                active_experts: 2,
                ..base
            },
        }
    }

    fn tiny_batch(n: usize, seed: u64) -> ExampleBatch {
        let schema = tiny_schema();
        let spec = GroundTruthSpec { interactions: vec![], ..GroundTruthSpec::desk_default() };
        GroundTruth::new(&schema, &spec).unwrap().sample(&schema, n, seed)
    }

    #[test]
    fn reference_layer_count() {
        let cfg = ModelConfig { tokens: 4, d_model: 512, k: 512, out_tokens: 4, ffn_hidden: 512, layers: 1, ..ModelConfig::small_zenith() };
        let c = count_costs(&cfg, None).unwrap();
        assert_eq!(c.layers[0].fusion_params + c.layers[0].boost_params, 3_670_016);
        assert_eq!(c.layers[0].interaction_params, 3_670_016);
        assert_eq!(c.layers[0].regen_params, 0);
    }

    #[test]
    fn attention_and_router_counts() {
        let cfg = ModelConfig { tokens: 8, d_model: 256, sparse_experts: 8, active_experts: 2, ..ModelConfig::small_zenith_pp() };
        let c = count_costs(&cfg, None).unwrap();
        assert_eq!(c.layers[0].fusion_params, 1_572_864);
        let r = cfg.ffn_hidden as u64;
        assert_eq!(c.layers[0].boost_params - 3 * 256 * r * 9, 16_384);
        assert!(c.activated_layer_params < c.layer_params);
    }

    #[test]
    fn constraint_errors_name_the_rule() {
        let ok = ModelConfig { d_model: 512, k: 256, out_tokens: 4, ..ModelConfig::small_zenith() };
        assert!(ok.validate().is_ok());
        let bad = ModelConfig { d_model: 512, k: 100, ..ok };
        assert!(bad.validate().unwrap_err().to_string().contains("T·k = T̂·D"));
        let pp = ModelConfig { d_model: 512, heads: 3, active_experts: 9, ..ModelConfig::small_zenith_pp() };
        let msg = pp.validate().unwrap_err().to_string();
        assert!(msg.contains("H | D") && msg.contains("E_a ≤ E_s"), "{msg}");
    }

    fn random_config(rng: &mut ChaCha8Rng, variant: Variant) -> ModelConfig {
        let t_hat = [1, 2, 4][rng.random_range(0..3)];
        let group = rng.random_range(1..=3);
        let width = rng.random_range(2..=4);
        let base = ModelConfig {
            layers: rng.random_range(1..=3),
            tokens: t_hat * group,
            d_model: group * width,
            ffn_hidden: rng.random_range(1..=6),
            head_hidden: vec![rng.random_range(1..=4)],
            tokenwise_boost: rng.random_bool(0.7),
            seed: rng.random(),
            ..ModelConfig::small_zenith()
        };
        match variant {
            // T·k = T̂·D with T = T̂·group and D = group·width gives k = width.
            Variant::Zenith => ModelConfig { k: width, out_tokens: t_hat, ..base },
            Variant::ZenithPp => {
                let e_s = rng.random_range(1..=5);
                let heads = if base.d_model.is_multiple_of(2) { rng.random_range(1..=2) } else { 1 };
                ModelConfig {
                    variant,
                    heads,
                    shared_experts: rng.random_range(0..=2),
                    sparse_experts: e_s,
                    active_experts: rng.random_range(1..=e_s),
                    ..base
                }
            }
        }
    }

    /// Schema with exactly `t` single-feature tokens.
    fn schema_with_tokens(t: usize) -> FeatureSchema {
        FeatureSchema {
            features: (0..t)
                .map(|i| FeatureSpec {
                    name: format!("id{i}"),
                    kind: FeatureKind::Id,
                    vocab: 3,
                    group: format!("g{i}"),
                    emb_dim: 2,
                })
                .collect(),
        }
    }

    #[test]
    fn closed_forms_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for variant in [Variant::Zenith, Variant::ZenithPp] {
            for _ in 0..8 {
                let cfg = random_config(&mut rng, variant);
                let schema = schema_with_tokens(cfg.tokens);
                let model = Model::build(&cfg, &schema).unwrap();
                let c = count_costs(&cfg, Some(&schema)).unwrap();
                assert_eq!(c.layer_params, model.enumerate_layer_params() as u64, "{cfg:?}");
                assert_eq!(c.total_params, Some(model.store.numel() as u64));
                assert_eq!(c.head_params, model.store.numel_with_prefix("head.") as u64);
            }
        }
    }

    #[test]
    fn flops_match_instrumented_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for variant in [Variant::Zenith, Variant::ZenithPp] {
            for _ in 0..5 {
                let cfg = random_config(&mut rng, variant);
                let schema = schema_with_tokens(cfg.tokens);
                let model = Model::build(&cfg, &schema).unwrap();
                let spec = GroundTruthSpec { interactions: vec![], ..GroundTruthSpec::desk_default() };
                let batch = GroundTruth::new(&schema, &spec).unwrap().sample(&schema, 1, 1);
                let tape = Tape::new();
                let p = model.store.bind_frozen(&tape);
                model.forward(&tape, &p, &batch).unwrap();
                let c = count_costs(&cfg, Some(&schema)).unwrap();
                assert_eq!(c.flops_per_example, Some(tape.product_flops()), "{cfg:?}");
            }
        }
    }

    #[test]
    fn flop_scaling_properties() {
        let cfg = ModelConfig::small_zenith_pp();
        let a = layer_cost(&cfg).fusion_flops - 4 * 64 * 16;
        let b = layer_cost(&ModelConfig { d_model: 32, ..cfg.clone() }).fusion_flops - 4 * 64 * 32;
        assert_eq!(b, 4 * a);
        let more = ModelConfig { sparse_experts: 8, ..cfg.clone() };
        let diff = layer_cost(&more).boost_flops - layer_cost(&cfg).boost_flops;
        assert_eq!(diff, 2 * 8 * 16 * 4);
    }

    #[test]
    fn predictions_are_probabilities_and_deterministic() {
        for variant in [Variant::Zenith, Variant::ZenithPp] {
            let model = Model::build(&tiny(variant), &tiny_schema()).unwrap();
            let batch = tiny_batch(6, 2);
            let twin = batch.select(&[0, 0, 3]);
            let p = model.predict(&twin).unwrap();
            assert_eq!(p.len(), 3);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(p[0], p[1]);
        }
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut model = Model::build(&tiny(Variant::Zenith), &tiny_schema()).unwrap();
        for (w, b) in model.head.layer_ids().to_vec() {
            model.store.get_mut(w).data_mut().fill(0.0);
            model.store.get_mut(b).data_mut().fill(0.0);
        }
        assert!(model.predict(&tiny_batch(4, 1)).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn schema_token_mismatch_is_config_error() {
        let cfg = ModelConfig { tokens: 5, ..tiny(Variant::ZenithPp) };
        assert!(matches!(Model::build(&cfg, &tiny_schema()), Err(Error::Config(_))));
    }

    /// The cubic RSA interaction makes the loss strongly curved in the
    /// embeddings; a smaller step keeps central-difference truncation error
    /// well below the tolerance.
    const END_TO_END_STEP: f64 = 1e-6;

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for variant in [Variant::Zenith, Variant::ZenithPp] {
            let model = Model::build(&tiny(variant), &tiny_schema()).unwrap();
            let batch = tiny_batch(3, 4);
            let report = check_gradients(model.store.tensors(), END_TO_END_STEP, |tape, v| {
                let p = ParamStore::bind_vars(v);
                let out = model.forward(tape, &p, &batch)?;
                Ok(out.logits.bce_with_logits(&batch.labels))
            })
            .unwrap();
            for c in report {
                assert!(c.rel_err <= 1e-4, "{variant:?} {} rel err {:.2e}", model.store.names()[c.index], c.rel_err);
            }
        }
    }
}
