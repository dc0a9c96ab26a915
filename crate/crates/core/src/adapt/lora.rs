use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::quant::{dequantize, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::DecoderModel;
use crate::numcore::{kernels, Scalar, Tape, Tensor, Var};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const INIT_STD: f64 = 0.02;

/// Low-rank update `(alpha / rank) · B · A` for one frozen `[d_out × d_in]`
/// weight. `B` starts at zero so a freshly attached adapter is a no-op.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub target: String,
    /// `[rank × d_in]`
    pub a: Tensor<T>,
    /// `[d_out × rank]`
    pub b: Tensor<T>,
    pub rank: usize,
    pub alpha: f64,
    pub enabled: bool,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(target: &str, d_out: usize, d_in: usize, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(alpha.is_finite()) {
            return Err(Error::Config("adapter alpha must be finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(LoraAdapter {
            target: target.to_string(),
            a: Tensor::randn(&[rank, d_in], INIT_STD, &mut rng).with_grad(true),
            b: Tensor::zeros(&[d_out, rank]).with_grad(true),
            rank,
            alpha,
            enabled: true,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Dense `(alpha / rank) · B · A`.
    pub fn delta(&self) -> Tensor<T> {
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank);
        let mut ba = kernels::matmul(self.b.data(), self.a.data(), d_out, r, d_in);
        let s = T::from_f64(self.scaling());
        ba.iter_mut().for_each(|v| *v = *v * s);
        Tensor::from_vec(vec![d_out, d_in], ba).expect("finite adapter")
    }

    pub fn a_name(&self) -> String {
        format!("lora/{}/A", self.target)
    }

    pub fn b_name(&self) -> String {
        format!("lora/{}/B", self.target)
    }
}

/// Adapters keyed by the name of the weight they modify.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<T> {
    pub rank: usize,
    pub alpha: f64,
    adapters: BTreeMap<String, LoraAdapter<T>>,
}

impl<T> Default for AdapterSet<T> {
    fn default() -> Self {
        AdapterSet {
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            adapters: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> AdapterSet<T> {
    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter<T>> {
        self.adapters.get(target)
    }

    pub fn get_mut(&mut self, target: &str) -> Option<&mut LoraAdapter<T>> {
        self.adapters.get_mut(target)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoraAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn insert(&mut self, adapter: LoraAdapter<T>) -> Result<()> {
        if self.adapters.contains_key(&adapter.target) {
            return Err(Error::Config(format!(
                "duplicate adapter target `{}`",
                adapter.target
            )));
        }
        self.adapters.insert(adapter.target.clone(), adapter);
        Ok(())
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.values().map(LoraAdapter::trainable_params).sum()
    }

    pub fn set_enabled(&mut self, enabled: bool) {
        self.adapters.values_mut().for_each(|a| a.enabled = enabled);
    }
}

/// Attention query and value projections of every layer.
pub fn default_targets(n_layers: usize) -> Vec<String> {
    (0..n_layers)
        .flat_map(|l| [format!("layers.{l}.attn.wq"), format!("layers.{l}.attn.wv")])
        .collect()
}

/// Attaches a fresh adapter to each named 2-D weight and freezes every base
/// parameter of the model. `A` is drawn from N(0, 0.02²) with a seed derived
/// from `seed` and the target's position; `B` is zero.
pub fn attach_adapters<'m, T: Scalar>(
    model: &'m mut DecoderModel<T>,
    targets: &[String],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<&'m AdapterSet<T>> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    let mut fresh = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let shape = model.weight_shape(target).ok_or_else(|| {
            Error::Config(format!("adapter target `{target}` is not a weight of the model"))
        })?;
        if shape.len() != 2 {
            return Err(Error::Config(format!(
                "adapter target `{target}` has shape {shape:?}, expected a matrix"
            )));
        }
        if targets[..i].contains(target) || model.adapters().get(target).is_some() {
            return Err(Error::Config(format!("duplicate adapter target `{target}`")));
        }
        let s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64);
        fresh.push(LoraAdapter::new(target, shape[0], shape[1], rank, alpha, s)?);
    }
    model.freeze_base();
    let set = model.adapters_mut();
    set.rank = rank;
    set.alpha = alpha;
    for a in fresh {
        set.insert(a)?;
    }
    Ok(model.adapters())
}

/// A frozen base weight, stored dense or 4-bit quantized.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseWeight<'a, T> {
    Dense(&'a Tensor<T>),
    Quantized(&'a QuantizedTensor),
}

impl<T: Scalar> BaseWeight<'_, T> {
    pub fn to_dense(&self) -> Result<Tensor<T>> {
        match self {
            BaseWeight::Dense(t) => Ok((*t).clone()),
            BaseWeight::Quantized(q) => dequantize(q),
        }
    }
}

/// Records `y = x·W_effᵀ` on the tape, where `W_eff = W + (alpha/r)·B·A`.
/// The low-rank path is `((x·Aᵀ)·Bᵀ)·(alpha/r)` so the dense delta is never
/// formed; gradient reaches `A`/`B` only if their leaves require it.
pub fn adapted_linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    lora: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let base = tape.linear(x, w)?;
    match lora {
        None => Ok(base),
        Some((a, b, scaling)) => {
            let xa = tape.linear(x, a)?;
            let xab = tape.linear(xa, b)?;
            let scaled = tape.scale(xab, T::from_f64(scaling));
            tape.add(base, scaled)
        }
    }
}

/// Applies a (possibly quantized) base weight and an adapter to the rows of
/// `x[m × d_in]`, returning `[m × d_out]`. A disabled adapter reduces to the
/// plain base product.
pub fn adapter_forward<T: Scalar>(
    base: BaseWeight<'_, T>,
    adapter: &LoraAdapter<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let w = base.to_dense()?;
    if w.shape() != [adapter.d_out(), adapter.d_in()] {
        return Err(Error::Dimension(format!(
            "base weight {:?} does not match adapter [{} x {}]",
            w.shape(),
            adapter.d_out(),
            adapter.d_in()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let wv = tape.leaf(&w);
    let lora = if adapter.enabled {
        Some((tape.leaf(&adapter.a), tape.leaf(&adapter.b), adapter.scaling()))
    } else {
        None
    };
    let y = adapted_linear(&mut tape, xv, wv, lora)?;
    Tensor::from_vec(tape.shape(y).to_vec(), tape.value(y).to_vec())
}

/// `W + (alpha/r)·B·A` as a dense weight.
pub fn merge_adapter<T: Scalar>(w: &Tensor<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    let delta = adapter.delta();
    if w.shape() != delta.shape() {
        return Err(Error::Dimension(format!(
            "cannot merge adapter of shape {:?} into weight of shape {:?}",
            delta.shape(),
            w.shape()
        )));
    }
    let merged = w.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect();
    Tensor::from_vec(w.shape().to_vec(), merged)
}
