use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{
    adapted_linear, dequantize, merge_adapter, quantize_blockwise, AdapterSet, Codebook,
    QuantizedTensor,
};
use crate::error::{Error, Result};
use crate::numcore::{AdamWState, Scalar, Tape, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 128, MLP 512.
    pub fn toy(vocab_size: usize, context_length: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            context_length,
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("context_length", self.context_length.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_model", self.d_model.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<u64> {
            kv.get(k)
                .ok_or_else(|| Error::Corruption(format!("model config is missing `{k}`")))?
                .parse()
                .map_err(|_| Error::Corruption(format!("model config `{k}` is not an integer")))
        };
        let cfg = ModelConfig {
            vocab_size: get("vocab_size")? as usize,
            context_length: get("context_length")? as usize,
            n_layers: get("n_layers")? as usize,
            n_heads: get("n_heads")? as usize,
            d_model: get("d_model")? as usize,
            d_ff: get("d_ff")? as usize,
            seed: get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Names and shapes of every backbone parameter, in initialisation order.
fn backbone_layout(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.context_length, d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.g"), vec![d]),
            (p("ln1.b"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.wo"), vec![d, d]),
            (p("ln2.g"), vec![d]),
            (p("ln2.b"), vec![d]),
            (p("mlp.w1"), vec![f, d]),
            (p("mlp.b1"), vec![f]),
            (p("mlp.w2"), vec![d, f]),
            (p("mlp.b2"), vec![d]),
        ]);
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out
}

pub fn head_weight_name(head: &str) -> String {
    format!("head.{head}.w")
}

pub fn head_bias_name(head: &str) -> String {
    format!("head.{head}.b")
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

/// Pre-LayerNorm decoder-only transformer with learned positions and an
/// output projection tied to the token embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderModel<T> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
    quantized: BTreeMap<String, QuantizedTensor>,
    adapters: AdapterSet<T>,
}

/// Tape handles for one binding of a model's weights.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    lora: HashMap<String, (Var, Var, f64)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }
}

impl<T: Scalar> DecoderModel<T> {
    /// Gaussian init (std 0.02; residual output projections scaled by
    /// `1/√(2·layers)`), unit layernorm gains, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in backbone_layout(&config) {
            let t = if name.ends_with(".g") {
                Tensor::full(&shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                Tensor::randn(&shape, resid_std, &mut rng)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            params.insert(name, t.with_grad(true));
        }
        Ok(DecoderModel {
            config,
            params,
            quantized: BTreeMap::new(),
            adapters: AdapterSet::default(),
        })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<T>>,
        quantized: BTreeMap<String, QuantizedTensor>,
        adapters: AdapterSet<T>,
    ) -> Result<Self> {
        config.validate()?;
        for (name, shape) in backbone_layout(&config) {
            let found = params
                .get(&name)
                .map(|t| t.shape().to_vec())
                .or_else(|| quantized.get(&name).map(|q| q.shape().to_vec()));
            match found {
                Some(s) if s == shape => {}
                Some(s) => {
                    return Err(Error::Corruption(format!(
                        "`{name}` has shape {s:?}, expected {shape:?}"
                    )))
                }
                None => return Err(Error::Corruption(format!("missing weight `{name}`"))),
            }
        }
        let model = DecoderModel {
            config,
            params,
            quantized,
            adapters,
        };
        for a in model.adapters.iter() {
            let shape = model.weight_shape(&a.target).ok_or_else(|| {
                Error::Corruption(format!("adapter for unknown weight `{}`", a.target))
            })?;
            if shape != [a.d_out(), a.d_in()] || a.a.shape()[0] != a.rank {
                return Err(Error::Corruption(format!("adapter `{}` has wrong shape", a.target)));
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn quantized(&self) -> &BTreeMap<String, QuantizedTensor> {
        &self.quantized
    }

    pub fn adapters(&self) -> &AdapterSet<T> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> &mut AdapterSet<T> {
        &mut self.adapters
    }

    /// Shape of a dense or quantized weight.
    pub fn weight_shape(&self, name: &str) -> Option<Vec<usize>> {
        self.params
            .get(name)
            .map(|t| t.shape().to_vec())
            .or_else(|| self.quantized.get(name).map(|q| q.shape().to_vec()))
    }

    /// Stops gradient flow into every backbone parameter. Heads keep
    /// their flags.
    pub fn freeze_base(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if !is_head(name) {
                t.requires_grad = false;
                t.grad = None;
            }
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))?;
        t.requires_grad = trainable;
        Ok(())
    }

    /// Adds a scalar read-out `hidden · w + b` named `head` with a small
    /// seeded gaussian weight and zero bias. No-op if the head exists.
    pub fn add_head(&mut self, head: &str, seed: u64) {
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params
            .entry(head_weight_name(head))
            .or_insert_with(|| Tensor::randn(&[1, d], INIT_STD, &mut rng).with_grad(true));
        self.params
            .entry(head_bias_name(head))
            .or_insert_with(|| Tensor::zeros(&[1]).with_grad(true));
    }

    pub fn has_head(&self, head: &str) -> bool {
        self.params.contains_key(&head_weight_name(head))
    }

    /// Replaces every layer matrix (attention and MLP weights) by its
    /// blockwise 4-bit form. Quantized weights are frozen.
    pub fn quantize_base(&mut self, block_size: usize, codebook: &Codebook) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .filter(|(n, t)| n.starts_with("layers.") && t.shape().len() == 2)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let t = self.params.remove(&name).expect("listed");
            self.quantized.insert(name, quantize_blockwise(&t, block_size, codebook)?);
        }
        Ok(())
    }

    /// Folds every adapter into its base weight (dequantizing first when
    /// needed) and drops the adapters.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let adapters = std::mem::take(&mut self.adapters);
        for a in adapters.iter().filter(|a| a.enabled) {
            let (base, frozen) = match self.params.get(&a.target) {
                Some(w) => (w.clone(), !w.requires_grad),
                None => {
                    let q = self.quantized.remove(&a.target).ok_or_else(|| {
                        Error::Config(format!("adapter for unknown weight `{}`", a.target))
                    })?;
                    (dequantize(&q)?, true)
                }
            };
            let merged = merge_adapter(&base, a)?.with_grad(!frozen);
            self.params.insert(a.target.clone(), merged);
        }
        self.adapters.rank = adapters.rank;
        self.adapters.alpha = adapters.alpha;
        Ok(())
    }

    /// Number of scalars that receive gradients.
    pub fn trainable_params(&self) -> usize {
        let dense: usize = self.params.values().filter(|t| t.requires_grad).map(Tensor::len).sum();
        dense + self.adapters.trainable_params()
    }

    pub fn total_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum::<usize>()
            + self.quantized.values().map(QuantizedTensor::numel).sum::<usize>()
            + self.adapters.trainable_params()
    }

    /// Bytes held by backbone weights: 4 per dense scalar plus the packed
    /// size of quantized weights. Adapters and heads are excluded.
    pub fn weight_storage_bytes(&self) -> usize {
        let dense: usize = self
            .params
            .iter()
            .filter(|(n, _)| !is_head(n))
            .map(|(_, t)| 4 * t.len())
            .sum();
        dense + self.quantized.values().map(QuantizedTensor::storage_bytes).sum::<usize>()
    }

    /// SHA-256 over the backbone weights (dense and quantized), excluding
    /// adapters and heads.
    pub fn base_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| !is_head(n)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        for (name, q) in &self.quantized {
            h.update(name.as_bytes());
            h.update(q.packed_codes());
            for s in q.scales() {
                h.update(s.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copy with a different element precision. Quantized weights are shared
    /// as-is; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> DecoderModel<U> {
        let mut adapters = AdapterSet::<U>::default();
        adapters.rank = self.adapters.rank;
        adapters.alpha = self.adapters.alpha;
        for a in self.adapters.iter() {
            adapters
                .insert(crate::adapt::LoraAdapter {
                    target: a.target.clone(),
                    a: a.a.cast(),
                    b: a.b.cast(),
                    rank: a.rank,
                    alpha: a.alpha,
                    enabled: a.enabled,
                })
                .expect("targets are unique");
        }
        DecoderModel {
            config: self.config,
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            quantized: self.quantized.clone(),
            adapters,
        }
    }

    /// Records every weight on `tape`. Dense parameters keep their
    /// trainable flag, quantized weights enter dequantized as constants,
    /// enabled adapters are bound for the low-rank path.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = HashMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.leaf(t));
        }
        for (name, q) in &self.quantized {
            let dense: Tensor<T> = dequantize(q)?;
            vars.insert(name.clone(), tape.leaf(&dense.with_grad(false)));
        }
        let mut lora = HashMap::new();
        for a in self.adapters.iter().filter(|a| a.enabled) {
            let av = tape.leaf(&a.a);
            let bv = tape.leaf(&a.b);
            lora.insert(a.target.clone(), (av, bv, a.scaling()));
        }
        Ok(Bound { vars, lora })
    }

    fn proj(&self, tape: &mut Tape<T>, b: &Bound, x: Var, name: &str) -> Result<Var> {
        adapted_linear(tape, x, b.var(name)?, b.lora.get(name).copied())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward on an empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::ContextLength {
                len: tokens.len(),
                max: self.config.context_length,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Final-layernormed hidden states `[T × d_model]`.
    pub fn hidden_tape(&self, tape: &mut Tape<T>, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        let t_len = tokens.len();
        let dh = c.head_dim();
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());

        let tok = tape.gather_rows(b.var("tok_emb")?, tokens)?;
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.gather_rows(b.var("pos_emb")?, &positions)?;
        let mut h = tape.add(tok, pos)?;

        for l in 0..c.n_layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            let a = tape.layernorm(h, b.var(&n("ln1.g"))?, b.var(&n("ln1.b"))?, eps)?;
            let q = self.proj(tape, b, a, &n("attn.wq"))?;
            let k = self.proj(tape, b, a, &n("attn.wk"))?;
            let v = self.proj(tape, b, a, &n("attn.wv"))?;
            let mut heads = Vec::with_capacity(c.n_heads);
            for hd in 0..c.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.linear(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let probs = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let att = self.proj(tape, b, att, &n("attn.wo"))?;
            h = tape.add(h, att)?;

            let m = tape.layernorm(h, b.var(&n("ln2.g"))?, b.var(&n("ln2.b"))?, eps)?;
            let f = self.proj(tape, b, m, &n("mlp.w1"))?;
            let f = tape.add_row(f, b.var(&n("mlp.b1"))?)?;
            let f = tape.gelu(f);
            let f = self.proj(tape, b, f, &n("mlp.w2"))?;
            let f = tape.add_row(f, b.var(&n("mlp.b2"))?)?;
            h = tape.add(h, f)?;
        }
        tape.layernorm(h, b.var("ln_f.g")?, b.var("ln_f.b")?, eps)
    }

    /// Next-token logits from hidden states, through the tied embedding.
    pub fn logits_tape(&self, tape: &mut Tape<T>, b: &Bound, hidden: Var) -> Result<Var> {
        tape.linear(hidden, b.var("tok_emb")?)
    }

    /// Per-row scalar read-out `hidden · w + b` of a named head, shape `[T]`.
    pub fn head_tape(&self, tape: &mut Tape<T>, b: &Bound, head: &str, hidden: Var) -> Result<Var> {
        let w = b.var(&head_weight_name(head))?;
        let bias = b.var(&head_bias_name(head))?;
        let y = tape.linear(hidden, w)?;
        let y = tape.add_row(y, bias)?;
        let rows = tape.shape(y)[0];
        tape.reshape(y, &[rows])
    }

    /// Logits `[T × V]` for `tokens`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape)?;
        let h = self.hidden_tape(&mut tape, &b, tokens)?;
        let lg = self.logits_tape(&mut tape, &b, h)?;
        Tensor::from_vec(tape.shape(lg).to_vec(), tape.value(lg).to_vec())
    }

    /// Copies gradients from a finished backward pass into the parameter and
    /// adapter tensors that require them.
    pub fn collect_grads(&mut self, tape: &Tape<T>, b: &Bound) -> Result<()> {
        for (name, t) in self.params.iter_mut().filter(|(_, t)| t.requires_grad) {
            if let Some(g) = b.vars.get(name).and_then(|&v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        for a in self.adapters.iter_mut() {
            if let Some(&(av, bv, _)) = b.lora.get(&a.target) {
                if a.a.requires_grad {
                    if let Some(g) = tape.grad(av) {
                        a.a.accumulate_grad(g)?;
                    }
                }
                if a.b.requires_grad {
                    if let Some(g) = tape.grad(bv) {
                        a.b.accumulate_grad(g)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
        for a in self.adapters.iter_mut() {
            a.a.zero_grad();
            a.b.zero_grad();
        }
    }

    /// One optimizer update over every trainable tensor; adapter tensors are
    /// keyed `lora/<target>/A|B`.
    pub fn apply_step(&mut self, opt: &mut AdamWState<T>) -> Result<()> {
        let mut named: Vec<(String, &mut Tensor<T>)> = Vec::new();
        for (name, t) in self.params.iter_mut() {
            named.push((name.clone(), t));
        }
        for a in self.adapters.iter_mut() {
            let (an, bn) = (a.a_name(), a.b_name());
            named.push((an, &mut a.a));
            named.push((bn, &mut a.b));
        }
        opt.step(named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)))
    }

    /// Names of every tensor [`apply_step`](Self::apply_step) may update.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .params
            .iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, _)| n.clone())
            .collect();
        for a in self.adapters.iter() {
            out.push(a.a_name());
            out.push(a.b_name());
        }
        out
    }
}
