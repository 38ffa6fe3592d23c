//! Softmax attention and SimpleAttention behind one interface.
//!
//! Both kinds share the q-k-v projection and head split. They differ in the
//! per-head product:
//!
//! ```text
//! softmax: softmax(s · Q_h K_hᵀ) V_h      L×L score matrix, O(L²·d)
//! simple:  Q_h (s · K_hᵀ V_h)             d×d summary,      O(L·d²)
//! ```
//!
//! where `s` is the configured scale (`1/√d` for softmax and `1/√L` for simple
//! by default). The simple head never materialises anything of size L×L.

use crate::tensor::{Element, Rng, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    Softmax,
    Simple,
}

impl AttentionKind {
    pub fn default_scale(self) -> ScaleMode {
        match self {
            AttentionKind::Softmax => ScaleMode::InvSqrtD,
            AttentionKind::Simple => ScaleMode::InvSqrtL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Softmax => "softmax",
            AttentionKind::Simple => "simple",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "softmax" | "vanilla" => Ok(AttentionKind::Softmax),
            "simple" => Ok(AttentionKind::Simple),
            _ => Err(Error::Parse(format!("unknown attention kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleMode {
    InvSqrtD,
    /// Uses the unpadded length of the sequence.
    InvSqrtL,
    None,
}

impl ScaleMode {
    pub fn factor(self, head_width: usize, true_len: usize) -> f64 {
        match self {
            ScaleMode::InvSqrtD => 1.0 / (head_width as f64).sqrt(),
            ScaleMode::InvSqrtL => 1.0 / (true_len as f64).sqrt(),
            ScaleMode::None => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleMode::InvSqrtD => "inv_sqrt_d",
            ScaleMode::InvSqrtL => "inv_sqrt_l",
            ScaleMode::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inv_sqrt_d" => Ok(ScaleMode::InvSqrtD),
            "inv_sqrt_l" => Ok(ScaleMode::InvSqrtL),
            "none" => Ok(ScaleMode::None),
            _ => Err(Error::Parse(format!("unknown scale mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// Padding positions take part like any other token.
    None,
    /// Padding positions are excluded from keys and values.
    Pad,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::None => "none",
            MaskMode::Pad => "pad",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskMode::None),
            "pad" => Ok(MaskMode::Pad),
            _ => Err(Error::Parse(format!("unknown mask mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub n_heads: usize,
    pub scale: ScaleMode,
    pub use_output_linear: bool,
    pub mask_mode: MaskMode,
}

impl AttentionConfig {
    pub fn new(kind: AttentionKind, n_heads: usize) -> Self {
        AttentionConfig {
            kind,
            n_heads,
            scale: kind.default_scale(),
            use_output_linear: true,
            mask_mode: MaskMode::Pad,
        }
    }
}

/// Affine map `x · weight + bias` with `weight[in, out]`, `bias[out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::parameter(vec![T::zero(); d_in * d_out], &[d_in, d_out]).unwrap(),
            bias: Tensor::parameter(vec![T::zero(); d_out], &[d_out]).unwrap(),
        }
    }

    /// Weights uniform in `±√(1/d_in)`, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = (1.0 / d_in as f64).sqrt();
        let w = (0..d_in * d_out)
            .map(|_| T::cast(rng.uniform_range(-bound, bound)))
            .collect();
        Linear {
            weight: Tensor::parameter(w, &[d_in, d_out]).unwrap(),
            bias: Tensor::parameter(vec![T::zero(); d_out], &[d_out]).unwrap(),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_row_bias(&self.bias)
    }
}

/// Projection matrices and biases of one attention layer. The output
/// layer is either fully present or absent.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Element> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Option<Linear<T>>,
}

impl<T: Element> AttentionParams<T> {
    pub fn zeros(d_embed: usize, d_hidden: usize, output_linear: bool) -> Self {
        AttentionParams {
            q: Linear::zeros(d_embed, d_hidden),
            k: Linear::zeros(d_embed, d_hidden),
            v: Linear::zeros(d_embed, d_hidden),
            out: output_linear.then(|| Linear::zeros(d_hidden, d_embed)),
        }
    }

    pub fn init(d_embed: usize, d_hidden: usize, output_linear: bool, rng: &mut Rng) -> Self {
        AttentionParams {
            q: Linear::init(d_embed, d_hidden, rng),
            k: Linear::init(d_embed, d_hidden, rng),
            v: Linear::init(d_embed, d_hidden, rng),
            out: output_linear.then(|| Linear::init(d_hidden, d_embed, rng)),
        }
    }

    pub fn d_embed(&self) -> usize {
        self.q.d_in()
    }

    pub fn d_hidden(&self) -> usize {
        self.q.d_out()
    }
}

/// `Q = x·Q* + q*`, and likewise for K and V.
pub fn project_qkv<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.rank() != 2 || x.shape()[1] != p.d_embed() {
        return Err(Error::Shape {
            op: "project_qkv",
            lhs: x.shape().to_vec(),
            rhs: p.q.weight.shape().to_vec(),
        });
    }
    Ok((p.q.forward(x)?, p.k.forward(x)?, p.v.forward(x)?))
}

/// Head `h` is columns `h·d .. (h+1)·d` with `d = D_hid / n_heads`.
pub fn split_heads<T: Element>(m: &Tensor<T>, n_heads: usize) -> Result<Vec<Tensor<T>>> {
    let (_, width) = m.dims2()?;
    if n_heads == 0 || width % n_heads != 0 {
        return Err(Error::Config(format!(
            "hidden width {width} is not divisible into {n_heads} heads"
        )));
    }
    if n_heads == 1 {
        return Ok(vec![m.clone()]);
    }
    let d = width / n_heads;
    (0..n_heads).map(|h| m.slice_cols(h * d, d)).collect()
}

pub fn merge_heads<T: Element>(heads: &[Tensor<T>]) -> Result<Tensor<T>> {
    if heads.len() == 1 {
        return Ok(heads[0].clone());
    }
    Tensor::concat_cols(heads)
}

fn check_head_shapes<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    if q.rank() != 2 || q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::Shape {
            op: "attention head",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    Ok(())
}

/// `softmax(scale · Q Kᵀ) V` with masked key columns excluded. Allocates
/// the full L×L score matrix.
pub fn softmax_attention_head<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    check_head_shapes(q, k, v)?;
    let scores = q.matmul(&k.transpose()?)?.scale(T::cast(scale));
    scores.softmax_masked(mask).matmul(v)
}

/// `Q (scale · Kᵀ V)`. Masked rows of K and V are zeroed first, so padding
/// contributes nothing to the d×d summary.
pub fn simple_attention_head<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    check_head_shapes(q, k, v)?;
    let (k, v) = match mask {
        Some(m) => (k.mask_rows(m)?, v.mask_rows(m)?),
        None => (k.clone(), v.clone()),
    };
    let summary = k.transpose()?.matmul(&v)?.scale(T::cast(scale));
    q.matmul(&summary)
}

/// Full attention layer without the residual: project, split, per-head
/// product, concatenate, then the optional output layer.
pub fn attention_forward<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    cfg: &AttentionConfig,
    pad_mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let heads = attention_heads(x, p, cfg, pad_mask)?;
    let merged = merge_heads(&heads)?;
    match &p.out {
        Some(out) => out.forward(&merged),
        None => Ok(merged),
    }
}

/// The per-head outputs of [`attention_forward`], before concatenation.
pub fn attention_heads<T: Element>(
    x: &Tensor<T>,
    p: &AttentionParams<T>,
    cfg: &AttentionConfig,
    pad_mask: Option<&[bool]>,
) -> Result<Vec<Tensor<T>>> {
    check_config(p, cfg)?;
    let len = x.dims2()?.0;
    let mask = match cfg.mask_mode {
        MaskMode::Pad => pad_mask,
        MaskMode::None => None,
    };
    if let Some(m) = mask {
        if m.len() != len {
            return Err(Error::Param(format!(
                "pad mask of length {} for a sequence of length {len}",
                m.len()
            )));
        }
    }
    let true_len = mask.map_or(len, |m| m.iter().filter(|&&b| b).count());
    if true_len == 0 {
        return Err(Error::Param("pad mask excludes every position".into()));
    }
    let d = p.d_hidden() / cfg.n_heads;
    let scale = cfg.scale.factor(d, true_len);

    let (q, k, v) = project_qkv(x, p)?;
    let (qs, ks, vs) = (
        split_heads(&q, cfg.n_heads)?,
        split_heads(&k, cfg.n_heads)?,
        split_heads(&v, cfg.n_heads)?,
    );
    qs.iter()
        .zip(&ks)
        .zip(&vs)
        .map(|((qh, kh), vh)| match cfg.kind {
            AttentionKind::Softmax => softmax_attention_head(qh, kh, vh, scale, mask),
            AttentionKind::Simple => simple_attention_head(qh, kh, vh, scale, mask),
        })
        .collect()
}

fn check_config<T: Element>(p: &AttentionParams<T>, cfg: &AttentionConfig) -> Result<()> {
    if cfg.use_output_linear != p.out.is_some() {
        return Err(Error::Config(format!(
            "use_output_linear={} but the parameters {} an output layer",
            cfg.use_output_linear,
            if p.out.is_some() { "have" } else { "lack" }
        )));
    }
    if !cfg.use_output_linear && p.d_hidden() != p.d_embed() {
        return Err(Error::Config(format!(
            "without an output linear layer D_hid ({}) must equal D_E ({})",
            p.d_hidden(),
            p.d_embed()
        )));
    }
    if cfg.n_heads == 0 || p.d_hidden() % cfg.n_heads != 0 {
        return Err(Error::Config(format!(
            "D_hid {} is not divisible into {} heads",
            p.d_hidden(),
            cfg.n_heads
        )));
    }
    Ok(())
}

/// Analytic operation count of the per-head attention products for one
/// sequence, summed over heads.
///
/// - `matmul`: multiply-adds of the two matrix products per head:
///   softmax `2·L²·d`, simple `2·L·d²`.
/// - `elementwise`: L-dependent elementwise work. Softmax counts `4·L²` per
///   head (scale, exp, row sum, normalise). Simple has none: its scale acts
///   on the d×d summary and does not grow with L.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub matmul: u64,
    pub elementwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.matmul + self.elementwise
    }
}

pub fn flop_count(kind: AttentionKind, len: usize, head_width: usize, n_heads: usize) -> FlopCount {
    let (l, d, h) = (len as u64, head_width as u64, n_heads as u64);
    match kind {
        AttentionKind::Softmax => FlopCount {
            matmul: h * 2 * l * l * d,
            elementwise: h * 4 * l * l,
        },
        AttentionKind::Simple => FlopCount {
            matmul: h * 2 * l * d * d,
            elementwise: 0,
        },
    }
}
