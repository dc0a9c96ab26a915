//! Blockwise 4-bit absmax quantization with a 16-entry codebook.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodebookKind {
    /// Normal-float levels built from standard-normal quantiles.
    Nf4,
    /// Evenly spaced levels, useful for exact-arithmetic tests.
    Linear4,
}

impl CodebookKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CodebookKind::Nf4 => "nf4",
            CodebookKind::Linear4 => "linear4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nf4" => Ok(CodebookKind::Nf4),
            "linear4" => Ok(CodebookKind::Linear4),
            other => Err(Error::Config(format!("unknown codebook kind `{other}`"))),
        }
    }
}

/// Sorted quantization levels in `[-1, 1]`, at most 16 of them.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// `None` for caller-supplied levels.
    kind: Option<CodebookKind>,
    values: Vec<f32>,
}

impl Codebook {
    pub fn custom(values: Vec<f32>) -> Result<Self> {
        Self::with_kind(None, values)
    }

    fn with_kind(kind: Option<CodebookKind>, values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.len() > 16 {
            return Err(Error::Config(format!(
                "a 4-bit codebook needs 1..=16 levels, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Config("codebook levels must lie in [-1, 1]".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("codebook levels must be strictly increasing".into()));
        }
        Ok(Codebook { kind, values })
    }

    pub fn kind(&self) -> Option<CodebookKind> {
        self.kind
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_gap(&self) -> f32 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f32::max)
    }

    /// Index of the level nearest to `x`; ties go to the smaller index.
    pub fn nearest(&self, x: f64) -> u8 {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, &c) in self.values.iter().enumerate() {
            let d = (x - c as f64).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best as u8
    }
}

/// Standard-normal quantile function (Wichura, AS 241 / PPND16).
fn normal_quantile(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((r * 2509.080_928_730_122_7 + 33430.575_583_588_128) * r
                + 67265.770_927_008_700)
                * r
                + 45921.953_931_549_871)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((r * 5226.495_278_852_545_5 + 28729.085_735_721_943) * r
                + 39307.895_800_092_710)
                * r
                + 21213.794_301_586_595)
                * r
                + 5394.196_021_424_751_1)
                * r
                + 687.187_007_492_057_91)
                * r
                + 42.313_330_701_600_911)
                * r
                + 1.0);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((r * 7.745_450_142_783_414_1e-4 + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_61)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691_4)
            * r
            + 4.630_337_846_156_545_3)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((r * 1.050_750_071_644_416_9e-9 + 5.475_938_084_995_344_9e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_07)
                * r
                + 0.689_767_334_985_100_04)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_758_8)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((r * 2.010_334_399_292_288_1e-7 + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_123)
            * r
            + 0.296_560_571_828_504_89)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114_4)
            * r
            + 6.657_904_643_501_103_8)
            / (((((((r * 2.044_263_103_389_939_7e-15 + 1.421_511_758_316_445_9e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_132_6e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_80)
                * r
                + 0.599_832_206_555_887_94)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

fn linspace(a: f64, b: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| a + (b - a) * i as f64 / (n - 1) as f64)
}

/// Builds the 16-level codebook of the given kind.
///
/// `Nf4`: 8 positive and 7 negative standard-normal quantiles taken on an
/// evenly spaced probability grid from 0.5 to 0.9677, plus an exact zero,
/// normalised so the extremes are ±1.
/// `Linear4`: 15 evenly spaced levels on `[-1, 1]` (zero is one of them, so
/// the 16th code is unused).
pub fn build_codebook(kind: CodebookKind) -> Codebook {
    const OFFSET: f64 = 0.967_708_333_333_333_3; // (1 - 1/(2*15) + 1 - 1/(2*16)) / 2
    let values: Vec<f64> = match kind {
        CodebookKind::Nf4 => {
            let pos: Vec<f64> = linspace(OFFSET, 0.5, 9).take(8).map(normal_quantile).collect();
            let neg: Vec<f64> = linspace(OFFSET, 0.5, 8)
                .take(7)
                .map(|p| -normal_quantile(p))
                .collect();
            let max = pos[0];
            let mut v: Vec<f64> = pos.iter().chain(&neg).map(|x| x / max).collect();
            v.push(0.0);
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        }
        CodebookKind::Linear4 => linspace(-1.0, 1.0, 15).collect(),
    };
    let mut values: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
    // Pin the endpoints and zero exactly.
    let n = values.len();
    values[0] = -1.0;
    values[n - 1] = 1.0;
    if let Some(z) = values.iter_mut().min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap()) {
        *z = 0.0;
    }
    Codebook::with_kind(Some(kind), values).expect("built-in codebooks are valid")
}

/// A tensor stored as packed 4-bit codes plus one absmax scale per block.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    block_size: usize,
    /// Two codes per byte, low nibble first.
    codes: Vec<u8>,
    scales: Vec<f32>,
    codebook: Codebook,
}

impl QuantizedTensor {
    pub fn from_parts(
        shape: Vec<usize>,
        block_size: usize,
        codes: Vec<u8>,
        scales: Vec<f32>,
        codebook: Codebook,
    ) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if block_size == 0 {
            return Err(Error::Corruption("block size 0".into()));
        }
        if codes.len() != numel.div_ceil(2) {
            return Err(Error::Corruption(format!(
                "{} code bytes for {numel} elements",
                codes.len()
            )));
        }
        if scales.len() != numel.div_ceil(block_size) {
            return Err(Error::Corruption(format!(
                "{} scales for {} blocks",
                scales.len(),
                numel.div_ceil(block_size)
            )));
        }
        Ok(QuantizedTensor {
            shape,
            block_size,
            codes,
            scales,
            codebook,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.scales.len()
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.codes[i / 2];
        if i % 2 == 0 {
            b & 0x0F
        } else {
            b >> 4
        }
    }

    /// Bytes held by codes, scales and codebook.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len() + 4 * self.codebook.len()
    }
}

/// Quantizes `w` block by block: `scale = max|block|`, each element stored as
/// the index of the level nearest to `value / scale`. All-zero blocks get
/// scale 0 and the zero level.
pub fn quantize_blockwise<T: Scalar>(
    w: &Tensor<T>,
    block_size: usize,
    codebook: &Codebook,
) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    let data = w.data();
    let zero_code = codebook.nearest(0.0);
    let mut codes = vec![0u8; data.len().div_ceil(2)];
    let mut scales = Vec::with_capacity(data.len().div_ceil(block_size));
    for (b, block) in data.chunks(block_size).enumerate() {
        let absmax = block
            .iter()
            .map(|v| v.as_f64().abs() as f32)
            .fold(0.0f32, f32::max);
        scales.push(absmax);
        for (j, v) in block.iter().enumerate() {
            let code = if absmax == 0.0 {
                zero_code
            } else {
                codebook.nearest(v.as_f64() / absmax as f64)
            };
            let i = b * block_size + j;
            codes[i / 2] |= if i % 2 == 0 { code } else { code << 4 };
        }
    }
    QuantizedTensor::from_parts(w.shape().to_vec(), block_size, codes, scales, codebook.clone())
}

/// `codebook[code] · scale` elementwise, restoring the original shape.
pub fn dequantize<T: Scalar>(q: &QuantizedTensor) -> Result<Tensor<T>> {
    let levels = q.codebook.values();
    let mut out = Vec::with_capacity(q.numel());
    for i in 0..q.numel() {
        let c = q.code(i) as usize;
        let level = *levels.get(c).ok_or_else(|| {
            Error::Corruption(format!(
                "code {c} at element {i} outside a {}-level codebook",
                levels.len()
            ))
        })?;
        out.push(T::from_f64((level * q.scales[i / q.block_size]) as f64));
    }
    Tensor::from_vec(q.shape.clone(), out)
}
