//! Encoder assembly: embeddings, stacked post-norm blocks, CLS pooling and
//! classification heads.
//!
//! Variants differ in two switches:
//!
//! | variant       | output linear | extra skip |
//! |---------------|---------------|------------|
//! | `Vanilla`     | yes           | no         |
//! | `Simple`      | no            | no         |
//! | `SimpleRes`   | no            | yes        |
//! | `SimpleResL`  | yes           | yes        |
//!
//! The attention kind is separate from the variant so a trained model can be
//! re-run under the other attention formula (see [`crate::transfer`]).
//!
//! Block layout (post-norm, `D` = dropout):
//!
//! ```text
//! a   = LN1(x + D(Attn(x)))        [+ x]  extra skip
//! out = LN2(a + D(MLP(a)))         [+ a]  extra skip
//! ```

use crate::attention::{
    attention_forward, project_qkv, simple_attention_head, split_heads, AttentionConfig, AttentionKind,
    AttentionParams, Linear, MaskMode, ScaleMode,
};
use crate::tasks::Batch;
use crate::tensor::{embedding_lookup, no_grad, Activation, Element, Rng, Tensor};
use crate::{Error, Result};

/// Reserved token ids shared by every tokenizer.
pub const CLS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Vanilla,
    Simple,
    SimpleRes,
    SimpleResL,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Vanilla, Variant::Simple, Variant::SimpleRes, Variant::SimpleResL];

    pub fn output_linear(self) -> bool {
        matches!(self, Variant::Vanilla | Variant::SimpleResL)
    }

    pub fn extra_skip(self) -> bool {
        matches!(self, Variant::SimpleRes | Variant::SimpleResL)
    }

    pub fn default_attention(self) -> AttentionKind {
        match self {
            Variant::Vanilla => AttentionKind::Softmax,
            _ => AttentionKind::Simple,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Simple => "simple",
            Variant::SimpleRes => "simple_res",
            Variant::SimpleResL => "simple_resl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Ok(Variant::Vanilla),
            "simple" => Ok(Variant::Simple),
            "simple_res" => Ok(Variant::SimpleRes),
            "simple_resl" => Ok(Variant::SimpleResL),
            _ => Err(Error::Parse(format!("unknown variant `{s}`"))),
        }
    }
}

/// Where the extra skip connection of `SimpleRes`/`SimpleResL` lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SkipLanding {
    /// `a = LN1(..) + x` and `out = LN2(..) + a`.
    BothSublayers,
    /// Only `a = LN1(..) + x`.
    AfterAttentionNorm,
    /// Only `out = LN2(..) + x`.
    AfterOutputNorm,
}

impl SkipLanding {
    pub fn name(self) -> &'static str {
        match self {
            SkipLanding::BothSublayers => "both",
            SkipLanding::AfterAttentionNorm => "attention",
            SkipLanding::AfterOutputNorm => "output",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(SkipLanding::BothSublayers),
            "attention" => Ok(SkipLanding::AfterAttentionNorm),
            "output" => Ok(SkipLanding::AfterOutputNorm),
            _ => Err(Error::Parse(format!("unknown skip landing `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Dense layer on the pooled vector.
    Single,
    /// Shared encoder on two sequences, combined as `[a, b, a⊙b, a−b]`,
    /// then dense → ReLU → dense.
    Pair,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Single => "single",
            HeadKind::Pair => "pair",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(HeadKind::Single),
            "pair" => Ok(HeadKind::Pair),
            _ => Err(Error::Parse(format!("unknown head kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention: AttentionKind,
    pub scale: ScaleMode,
    pub mask_mode: MaskMode,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_embed: usize,
    pub d_hidden: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    /// Longest sequence including the CLS slot.
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout_p: f64,
    pub activation: Activation,
    pub skip_landing: SkipLanding,
    pub head: HeadKind,
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(variant: Variant) -> Self {
        let attention = variant.default_attention();
        ModelConfig {
            variant,
            attention,
            scale: attention.default_scale(),
            mask_mode: MaskMode::Pad,
            n_blocks: 2,
            n_heads: 4,
            d_embed: 64,
            d_hidden: 64,
            d_mlp: 128,
            vocab_size: 32,
            max_len: 257,
            n_classes: 2,
            dropout_p: 0.1,
            activation: Activation::Gelu,
            skip_landing: SkipLanding::BothSublayers,
            head: HeadKind::Single,
            ln_eps: 1e-5,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            kind: self.attention,
            n_heads: self.n_heads,
            scale: self.scale,
            use_output_linear: self.variant.output_linear(),
            mask_mode: self.mask_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_hidden % self.n_heads != 0 {
            return fail(format!("d_hidden {} not divisible by {} heads", self.d_hidden, self.n_heads));
        }
        if !self.variant.output_linear() && self.d_hidden != self.d_embed {
            return fail(format!(
                "variant {} has no output linear layer, so d_hidden ({}) must equal d_embed ({})",
                self.variant.name(),
                self.d_hidden,
                self.d_embed
            ));
        }
        if self.d_embed == 0 || self.d_mlp == 0 {
            return fail("dimensions must be positive".into());
        }
        if self.vocab_size < 3 {
            return fail("vocabulary must hold CLS, PAD and at least one symbol".into());
        }
        if self.max_len < 2 {
            return fail("max_len must leave room for CLS and one token".into());
        }
        if self.n_classes == 0 {
            return fail("n_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }

    /// Number of parameter tensors a model with this config holds.
    pub fn tensor_count(&self) -> usize {
        let per_block = 6 + if self.variant.output_linear() { 2 } else { 0 } + 4 + 4;
        let head = match self.head {
            HeadKind::Single => 2,
            HeadKind::Pair => 4,
        };
        2 + self.n_blocks * per_block + head
    }
}

#[derive(Debug, Clone)]
pub struct Norm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> Norm<T> {
    pub fn new(d: usize) -> Self {
        Norm {
            gamma: Tensor::parameter(vec![T::one(); d], &[d]).unwrap(),
            beta: Tensor::parameter(vec![T::zero(); d], &[d]).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        x.layer_norm(&self.gamma, &self.beta, eps)
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams<T: Element> {
    pub attn: AttentionParams<T>,
    pub ln1: Norm<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
    pub ln2: Norm<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T: Element> {
    pub tok_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    /// Interior layer of the pair head.
    pub head_pre: Option<Linear<T>>,
    pub head: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub params: ModelParams<T>,
}

/// Weights uniform in `±√(1/fan_in)`, biases zero, norms `(1, 0)`,
/// embeddings normal with std 0.02. Fully determined by the RNG state.
pub fn init_parameters<T: Element>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut embed = |rows: usize| {
        let data = (0..rows * cfg.d_embed).map(|_| T::cast(0.02 * rng.normal())).collect();
        Tensor::parameter(data, &[rows, cfg.d_embed]).unwrap()
    };
    let tok_embed = embed(cfg.vocab_size);
    let pos_embed = embed(cfg.max_len);
    let blocks = (0..cfg.n_blocks)
        .map(|_| BlockParams {
            attn: AttentionParams::init(cfg.d_embed, cfg.d_hidden, cfg.variant.output_linear(), rng),
            ln1: Norm::new(cfg.d_embed),
            mlp_in: Linear::init(cfg.d_embed, cfg.d_mlp, rng),
            mlp_out: Linear::init(cfg.d_mlp, cfg.d_embed, rng),
            ln2: Norm::new(cfg.d_embed),
        })
        .collect();
    let (head_pre, head) = match cfg.head {
        HeadKind::Single => (None, Linear::init(cfg.d_embed, cfg.n_classes, rng)),
        HeadKind::Pair => (
            Some(Linear::init(4 * cfg.d_embed, cfg.d_embed, rng)),
            Linear::init(cfg.d_embed, cfg.n_classes, rng),
        ),
    };
    Ok(ModelParams {
        tok_embed,
        pos_embed,
        blocks,
        head_pre,
        head,
    })
}

fn maybe_dropout<T: Element>(x: Tensor<T>, p: f64, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
    match rng {
        Some(r) => x.dropout(p, true, r),
        None => Ok(x),
    }
}

/// One encoder block. `rng` is `Some` in training (dropout active).
pub fn block_forward<T: Element>(
    x: &Tensor<T>,
    bp: &BlockParams<T>,
    cfg: &ModelConfig,
    mask: Option<&[bool]>,
    mut rng: Option<&mut Rng>,
) -> Result<Tensor<T>> {
    let p = cfg.dropout_p;
    let attn = attention_forward(x, &bp.attn, &cfg.attention_config(), mask)?;
    let attn = maybe_dropout(attn, p, rng.as_deref_mut())?;
    let mut a = bp.ln1.forward(&x.add(&attn)?, cfg.ln_eps)?;
    let extra = cfg.variant.extra_skip();
    if extra && cfg.skip_landing != SkipLanding::AfterOutputNorm {
        a = a.add(x)?;
    }

    let hidden = bp.mlp_in.forward(&a)?.activation(cfg.activation);
    let hidden = maybe_dropout(hidden, p, rng.as_deref_mut())?;
    let mlp = maybe_dropout(bp.mlp_out.forward(&hidden)?, p, rng.as_deref_mut())?;
    let out = bp.ln2.forward(&a.add(&mlp)?, cfg.ln_eps)?;
    if !extra {
        return Ok(out);
    }
    match cfg.skip_landing {
        SkipLanding::BothSublayers => out.add(&a),
        SkipLanding::AfterAttentionNorm => Ok(out),
        SkipLanding::AfterOutputNorm => out.add(x),
    }
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_parameters(&cfg, rng)?;
        Ok(Model { cfg, params })
    }

    /// Parameters in canonical order with their checkpoint names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let p = &self.params;
        let mut out = vec![
            ("embed.tok".to_string(), p.tok_embed.clone()),
            ("embed.pos".to_string(), p.pos_embed.clone()),
        ];
        let linear = |out: &mut Vec<(String, Tensor<T>)>, prefix: String, l: &Linear<T>| {
            out.push((format!("{prefix}.weight"), l.weight.clone()));
            out.push((format!("{prefix}.bias"), l.bias.clone()));
        };
        for (i, b) in p.blocks.iter().enumerate() {
            linear(&mut out, format!("block.{i}.attn.q"), &b.attn.q);
            linear(&mut out, format!("block.{i}.attn.k"), &b.attn.k);
            linear(&mut out, format!("block.{i}.attn.v"), &b.attn.v);
            if let Some(o) = &b.attn.out {
                linear(&mut out, format!("block.{i}.attn.out"), o);
            }
            out.push((format!("block.{i}.ln1.gamma"), b.ln1.gamma.clone()));
            out.push((format!("block.{i}.ln1.beta"), b.ln1.beta.clone()));
            linear(&mut out, format!("block.{i}.mlp.0"), &b.mlp_in);
            linear(&mut out, format!("block.{i}.mlp.1"), &b.mlp_out);
            out.push((format!("block.{i}.ln2.gamma"), b.ln2.gamma.clone()));
            out.push((format!("block.{i}.ln2.beta"), b.ln2.beta.clone()));
        }
        if let Some(pre) = &p.head_pre {
            linear(&mut out, "head.pre".into(), pre);
        }
        linear(&mut out, "head".into(), &p.head);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.named_parameters()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in self.named_parameters() {
            t.zero_grad();
        }
    }

    /// Token plus position embeddings of a sequence that already starts with CLS.
    fn embed(&self, ids: &[u32]) -> Result<Tensor<T>> {
        if ids.len() > self.cfg.max_len {
            return Err(Error::TooLong {
                len: ids.len(),
                max_len: self.cfg.max_len,
            });
        }
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        embedding_lookup(&self.params.tok_embed, &ids)?
            .add(&embedding_lookup(&self.params.pos_embed, &positions)?)
    }

    /// Hidden states `[L, D]` after every block, for a CLS-prefixed sequence.
    /// Element `i` is the input of block `i`; the last one is the output.
    pub fn hidden_states(
        &self,
        ids_with_cls: &[u32],
        mask: Option<&[bool]>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut states = vec![self.embed(ids_with_cls)?];
        for bp in &self.params.blocks {
            let x = states.last().unwrap();
            let next = block_forward(x, bp, &self.cfg, mask, rng.as_deref_mut())?;
            states.push(next);
        }
        Ok(states)
    }

    /// Pooled `[1, D]` representation (the CLS row) of a CLS-prefixed sequence.
    pub fn pool(&self, ids_with_cls: &[u32], mask: Option<&[bool]>, mut rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let mut x = self.embed(ids_with_cls)?;
        for bp in &self.params.blocks {
            x = block_forward(&x, bp, &self.cfg, mask, rng.as_deref_mut())?;
        }
        x.select_rows(&[0])
    }

    /// Prepends CLS to `ids` and returns the pooled `[D]` vector.
    pub fn encode(&self, ids: &[u32], rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let with_cls = with_cls(ids);
        if with_cls.len() > self.cfg.max_len {
            return Err(Error::TooLong {
                len: with_cls.len(),
                max_len: self.cfg.max_len,
            });
        }
        self.pool(&with_cls, None, rng)?.reshape(&[self.cfg.d_embed])
    }

    fn single_head(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        self.params.head.forward(pooled)
    }

    fn pair_head(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let features = pair_features(a, b)?;
        let pre = self
            .params
            .head_pre
            .as_ref()
            .ok_or_else(|| Error::Config("model has no pair head".into()))?;
        let hidden = pre.forward(&features)?.activation(Activation::Relu);
        self.params.head.forward(&hidden)
    }

    /// Logits `[n_classes]` for one sequence (CLS is prepended here).
    pub fn classify(&self, ids: &[u32], rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        if self.cfg.head != HeadKind::Single {
            return Err(Error::Config("classify needs a single-sequence head".into()));
        }
        let pooled = self.encode(ids, rng)?.reshape(&[1, self.cfg.d_embed])?;
        self.single_head(&pooled)?.reshape(&[self.cfg.n_classes])
    }

    /// Logits `[n_classes]` for a pair of sequences through the shared encoder.
    pub fn classify_pair(&self, ids_a: &[u32], ids_b: &[u32], mut rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        if self.cfg.head != HeadKind::Pair {
            return Err(Error::Config("classify_pair needs a pair head".into()));
        }
        let d = self.cfg.d_embed;
        let a = self.encode(ids_a, rng.as_deref_mut())?.reshape(&[1, d])?;
        let b = self.encode(ids_b, rng)?.reshape(&[1, d])?;
        self.pair_head(&a, &b)?.reshape(&[self.cfg.n_classes])
    }

    /// Logits `[B, n_classes]` for a padded batch.
    pub fn logits(&self, batch: &Batch, mut rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        let pooled_rows = |ids: &[Vec<u32>], masks: &[Vec<bool>], rng: &mut Option<&mut Rng>| -> Result<Tensor<T>> {
            let rows = ids
                .iter()
                .zip(masks)
                .map(|(row, mask)| self.pool(row, Some(mask), rng.as_deref_mut()))
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat_rows(&rows)
        };
        let a = pooled_rows(&batch.ids, &batch.mask, &mut rng)?;
        match (&batch.pair, self.cfg.head) {
            (None, HeadKind::Single) => self.single_head(&a),
            (Some(pair), HeadKind::Pair) => {
                let b = pooled_rows(&pair.ids, &pair.mask, &mut rng)?;
                self.pair_head(&a, &b)
            }
            _ => Err(Error::Config("batch and model head disagree on pairing".into())),
        }
    }
}

impl<T: Element> Model<T> {
    /// Per-block population standard deviation of the attention product
    /// before concatenation and output layer, over all real rows, columns
    /// and heads of `probe`. Softmax is omitted for the softmax kind:
    /// its product is taken as `(Q Kᵀ / √d) V`.
    pub fn attention_std(&self, probe: &Batch) -> Result<Vec<f64>> {
        let d = self.cfg.d_hidden / self.cfg.n_heads;
        let mut moments = vec![(0.0f64, 0.0f64, 0usize); self.cfg.n_blocks];
        no_grad(|| -> Result<()> {
            for (ids, mask) in probe.ids.iter().zip(&probe.mask).chain(
                probe.pair.iter().flat_map(|p| p.ids.iter().zip(&p.mask)),
            ) {
                let states = self.hidden_states(ids, Some(mask), None)?;
                let true_len = mask.iter().filter(|&&m| m).count();
                let scale = self.cfg.scale.factor(d, true_len);
                for (b, bp) in self.params.blocks.iter().enumerate() {
                    let (q, k, v) = project_qkv(&states[b], &bp.attn)?;
                    let heads = split_heads(&q, self.cfg.n_heads)?
                        .into_iter()
                        .zip(split_heads(&k, self.cfg.n_heads)?)
                        .zip(split_heads(&v, self.cfg.n_heads)?);
                    for ((qh, kh), vh) in heads {
                        let prod = simple_attention_head(&qh, &kh, &vh, scale, Some(mask))?;
                        let data = prod.data();
                        for (row, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                            for &x in &data[row * d..(row + 1) * d] {
                                let x = x.widen();
                                let m = &mut moments[b];
                                m.0 += x;
                                m.1 += x * x;
                                m.2 += 1;
                            }
                        }
                    }
                }
            }
            Ok(())
        })?;
        Ok(moments
            .into_iter()
            .map(|(s, ss, n)| {
                if n == 0 {
                    return 0.0;
                }
                let mean = s / n as f64;
                (ss / n as f64 - mean * mean).max(0.0).sqrt()
            })
            .collect())
    }
}

/// Finite-difference check of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub rel_err: f64,
    pub abs_err: f64,
}

impl GradcheckRow {
    /// Relative error within `tol`, or both gradients at round-off level
    /// (the key bias under softmax has an identically zero gradient).
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol || self.abs_err <= 1e-9
    }
}

/// Compares analytic and central-difference gradients of the
/// cross-entropy loss for every parameter of an f64 model with dropout
/// off, on a random sequence of `seq_len` tokens. Biases and norm
/// parameters are perturbed away from their initial values first.
pub fn gradcheck_model(cfg: &ModelConfig, seq_len: usize, seed: u64) -> Result<Vec<GradcheckRow>> {
    let cfg = ModelConfig {
        dropout_p: 0.0,
        ..cfg.clone()
    };
    let mut rng = Rng::new(seed);
    let m = Model::<f64>::new(cfg.clone(), &mut rng)?;
    for (name, t) in m.named_parameters() {
        if name.ends_with("bias") || name.contains(".ln") {
            t.update_data(|d| d.iter_mut().for_each(|v| *v += 0.1 * rng.normal()));
        }
    }
    let mut seq = || -> Vec<u32> { (0..seq_len).map(|_| 2 + rng.below(cfg.vocab_size - 2) as u32).collect() };
    let (a, b) = (seq(), seq());
    let label = (seed as usize) % cfg.n_classes;
    let loss = || -> Result<Tensor<f64>> {
        let logits = match cfg.head {
            HeadKind::Single => m.classify(&a, None)?,
            HeadKind::Pair => m.classify_pair(&a, &b, None)?,
        };
        crate::tensor::cross_entropy_mean(&logits.reshape(&[1, cfg.n_classes])?, &[label])
    };
    loss()?.backward()?;
    m.named_parameters()
        .into_iter()
        .map(|(name, t)| {
            let analytic = t.grad().ok_or_else(|| Error::MissingGrad(name.clone()))?;
            let numeric = crate::tensor::finite_difference_gradient(|_| loss().map(|l| l.item()).unwrap_or(f64::NAN), &t, 1e-5)
                .to_vec();
            let abs_err = analytic.iter().zip(&numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            Ok(GradcheckRow {
                name,
                rel_err: crate::tensor::relative_error(&analytic, &numeric),
                abs_err,
            })
        })
        .collect()
}

/// `[a, b, a⊙b, a−b]` along columns.
pub fn pair_features<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    Tensor::concat_cols(&[a.clone(), b.clone(), a.mul(b)?, a.sub(b)?])
}

pub fn with_cls(ids: &[u32]) -> Vec<u32> {
    std::iter::once(CLS_ID).chain(ids.iter().copied()).collect()
}
