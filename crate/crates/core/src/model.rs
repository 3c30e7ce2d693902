//! DeiT-S shaped Vision Transformer forward pass with staged pruning.
//!
//! A pruning block runs `LN -> MHSA -> residual`, scores the candidate
//! tokens from the class token's per-head attention, keeps the top-k, then
//! runs `LN -> MLP -> residual` on the reduced sequence. When fusion is
//! enabled the pruned tokens (post-attention-residual representations) are
//! folded into one token appended at the end.
//!
//! A fusion token produced at an earlier stage is an ordinary candidate at
//! later stages.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ImageRGB;
use crate::pruning::{self, IndicatorKind, PruneDecision, DEFAULT_TEMPERATURE};
use crate::tensor::{self, Exec, Matrix, DEFAULT_LN_EPS};

fn default_ln_eps() -> f32 {
    DEFAULT_LN_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub embed_dim: usize,
    pub qkv_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// 1-indexed block positions that prune after attention.
    pub prune_block_indices: Vec<usize>,
    pub keep_rate: f64,
    pub indicator: IndicatorKind,
    pub fusion_enabled: bool,
    pub temperature: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::deit_small()
    }
}

impl ModelConfig {
    /// DeiT-S backbone, 100-way head, variance pruning at blocks 4/7/10
    /// with keep rate 0.7 and fusion off.
    pub fn deit_small() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            stride: 16,
            embed_dim: 384,
            qkv_dim: 384,
            heads: 6,
            depth: 12,
            mlp_ratio: 4.0,
            num_classes: 100,
            prune_block_indices: vec![4, 7, 10],
            keep_rate: 0.7,
            indicator: IndicatorKind::Variance,
            fusion_enabled: false,
            temperature: DEFAULT_TEMPERATURE,
            layer_norm_eps: DEFAULT_LN_EPS,
        }
    }

    /// Pruning disabled: indicator `none`, keep rate 1.0, no fusion.
    pub fn without_pruning(mut self) -> Self {
        self.indicator = IndicatorKind::None;
        self.keep_rate = 1.0;
        self.fusion_enabled = false;
        self
    }

    /// Stride of three quarters of the patch size when `on`, otherwise the
    /// patch size itself.
    pub fn with_overlap(mut self, on: bool) -> Self {
        self.stride = if on {
            (self.patch_size * 3 / 4).max(1)
        } else {
            self.patch_size
        };
        self
    }

    pub fn is_overlapping(&self) -> bool {
        self.stride < self.patch_size
    }

    pub fn grid_side(&self) -> usize {
        (self.image_size - self.patch_size) / self.stride + 1
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.qkv_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Whether 1-indexed `block` prunes. Indicator `none` never prunes.
    pub fn is_pruning_block(&self, block: usize) -> bool {
        self.prune_block_indices.contains(&block)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.embed_dim == 0 || self.qkv_dim == 0 || self.heads == 0 || self.depth == 0 {
            return fail("embed_dim, qkv_dim, heads and depth must be positive".into());
        }
        if self.embed_dim % self.heads != 0 || self.qkv_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} / qkv_dim {} not divisible by {} heads",
                self.embed_dim, self.qkv_dim, self.heads
            ));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return fail("patch_size and stride must be positive".into());
        }
        if self.stride > self.patch_size {
            return fail(format!(
                "stride {} exceeds patch size {}",
                self.stride, self.patch_size
            ));
        }
        if self.patch_size > self.image_size {
            return fail(format!(
                "patch size {} exceeds image size {}",
                self.patch_size, self.image_size
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives no hidden units", self.mlp_ratio));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self
            .prune_block_indices
            .windows(2)
            .any(|w| w[0] >= w[1])
        {
            return fail(format!(
                "prune blocks {:?} not strictly increasing",
                self.prune_block_indices
            ));
        }
        if let Some(&b) = self
            .prune_block_indices
            .iter()
            .find(|&&b| b == 0 || b > self.depth)
        {
            return fail(format!("prune block {b} outside 1..={}", self.depth));
        }
        if !(self.keep_rate > 0.0 && self.keep_rate <= 1.0) {
            return fail(format!("keep rate {} outside (0, 1]", self.keep_rate));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return fail(format!("temperature {} outside (0, 1]", self.temperature));
        }
        if self.indicator == IndicatorKind::None && self.keep_rate < 1.0 {
            return fail(format!(
                "indicator `none` cannot prune; keep rate must be 1.0, got {}",
                self.keep_rate
            ));
        }
        Ok(())
    }
}

/// Where a non-class token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchOrigin {
    Grid { row: usize, col: usize },
    Fusion,
}

impl fmt::Display for PatchOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchOrigin::Grid { row, col } => write!(f, "({row},{col})"),
            PatchOrigin::Fusion => f.write_str("fusion"),
        }
    }
}

/// Class token in row 0, then patch tokens, then (optionally) the fusion
/// token. `origins[i]` describes token row `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
    origins: Vec<PatchOrigin>,
}

impl TokenSequence {
    pub fn new(tokens: Matrix, origins: Vec<PatchOrigin>) -> Result<Self> {
        if tokens.rows() == 0 || origins.len() + 1 != tokens.rows() {
            return Err(Error::shape(
                "TokenSequence::new",
                format!("{} tokens with {} origins", tokens.rows(), origins.len()),
            ));
        }
        Ok(TokenSequence { tokens, origins })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn origins(&self) -> &[PatchOrigin] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }

    pub fn has_fusion(&self) -> bool {
        self.origins.last() == Some(&PatchOrigin::Fusion)
    }

    /// Number of tokens that came straight from the patch grid.
    pub fn grid_token_count(&self) -> usize {
        self.origins
            .iter()
            .filter(|o| matches!(o, PatchOrigin::Grid { .. }))
            .count()
    }

    pub fn class_token(&self) -> &[f32] {
        self.tokens.row(0)
    }

    fn with_tokens(&self, tokens: Matrix) -> TokenSequence {
        debug_assert_eq!(tokens.rows(), self.tokens.rows());
        TokenSequence {
            tokens,
            origins: self.origins.clone(),
        }
    }
}

/// Softmaxed class-token attention per head, restricted to the candidate
/// (non-class) columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttention {
    per_head: Matrix,
    candidate_indices: Vec<usize>,
}

impl ClassAttention {
    pub fn new(per_head: Matrix, candidate_indices: Vec<usize>) -> Result<Self> {
        if per_head.cols() != candidate_indices.len() {
            return Err(Error::shape(
                "ClassAttention::new",
                format!(
                    "{} columns for {} candidates",
                    per_head.cols(),
                    candidate_indices.len()
                ),
            ));
        }
        Ok(ClassAttention {
            per_head,
            candidate_indices,
        })
    }

    /// Columns refer to candidates `0..N`.
    pub fn from_heads(per_head: Matrix) -> Result<Self> {
        let idx = (0..per_head.cols()).collect();
        ClassAttention::new(per_head, idx)
    }

    pub fn per_head(&self) -> &Matrix {
        &self.per_head
    }

    pub fn candidate_indices(&self) -> &[usize] {
        &self.candidate_indices
    }

    pub fn heads(&self) -> usize {
        self.per_head.rows()
    }

    pub fn candidates(&self) -> usize {
        self.per_head.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Vec<f32>,
    pub ln1_beta: Vec<f32>,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vec<f32>,
    pub b_k: Vec<f32>,
    pub b_v: Vec<f32>,
    pub w_o: Matrix,
    pub b_o: Vec<f32>,
    pub ln2_gamma: Vec<f32>,
    pub ln2_beta: Vec<f32>,
    pub mlp_w1: Matrix,
    pub mlp_b1: Vec<f32>,
    pub mlp_w2: Matrix,
    pub mlp_b2: Vec<f32>,
}

/// Per-channel pixel normalisation applied before patch projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Patch rows are flattened channel-major: `(c, ky, kx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub patch_w: Matrix,
    pub patch_b: Vec<f32>,
    pub cls_token: Vec<f32>,
    pub pos_embed: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub norm_gamma: Vec<f32>,
    pub norm_beta: Vec<f32>,
    pub head_w: Matrix,
    pub head_b: Vec<f32>,
    pub normalization: Normalization,
}

/// A tensor view used by the weight container: name, shape, values.
pub type NamedTensor<'a> = (String, Vec<usize>, &'a [f32]);

impl ModelWeights {
    /// Every tensor the config demands, in canonical order.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = cfg.embed_dim;
        let dq = cfg.qkv_dim;
        let hidden = cfg.mlp_hidden();
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![1 + cfg.num_patches(), d]),
        ];
        for b in 1..=cfg.depth {
            let p = |s: &str| format!("block{b}.{s}");
            v.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("W_Q"), vec![d, dq]),
                (p("W_K"), vec![d, dq]),
                (p("W_V"), vec![d, dq]),
                (p("b_Q"), vec![dq]),
                (p("b_K"), vec![dq]),
                (p("b_V"), vec![dq]),
                (p("W_O"), vec![dq, d]),
                (p("b_O"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.W1"), vec![d, hidden]),
                (p("mlp.b1"), vec![hidden]),
                (p("mlp.W2"), vec![hidden, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        v.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, cfg.num_classes]),
            ("head.bias".to_string(), vec![cfg.num_classes]),
        ]);
        v
    }

    /// Tensors in the same order as [`ModelWeights::expected_shapes`].
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        fn mat(name: String, m: &Matrix) -> NamedTensor<'_> {
            (name, vec![m.rows(), m.cols()], m.data())
        }
        fn vec1(name: String, v: &[f32]) -> NamedTensor<'_> {
            (name, vec![v.len()], v)
        }
        let mut out = vec![
            mat("patch_embed.weight".into(), &self.patch_w),
            vec1("patch_embed.bias".into(), &self.patch_b),
            vec1("cls_token".into(), &self.cls_token),
            mat("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{}.{s}", i + 1);
            out.extend([
                vec1(p("ln1.gamma"), &b.ln1_gamma),
                vec1(p("ln1.beta"), &b.ln1_beta),
                mat(p("W_Q"), &b.w_q),
                mat(p("W_K"), &b.w_k),
                mat(p("W_V"), &b.w_v),
                vec1(p("b_Q"), &b.b_q),
                vec1(p("b_K"), &b.b_k),
                vec1(p("b_V"), &b.b_v),
                mat(p("W_O"), &b.w_o),
                vec1(p("b_O"), &b.b_o),
                vec1(p("ln2.gamma"), &b.ln2_gamma),
                vec1(p("ln2.beta"), &b.ln2_beta),
                mat(p("mlp.W1"), &b.mlp_w1),
                vec1(p("mlp.b1"), &b.mlp_b1),
                mat(p("mlp.W2"), &b.mlp_w2),
                vec1(p("mlp.b2"), &b.mlp_b2),
            ]);
        }
        out.extend([
            vec1("norm.gamma".into(), &self.norm_gamma),
            vec1("norm.beta".into(), &self.norm_beta),
            mat("head.weight".into(), &self.head_w),
            vec1("head.bias".into(), &self.head_b),
        ]);
        out
    }

    /// Builds weights from tensors supplied by name. The lookup must
    /// return values whose length matches the expected shape.
    pub fn from_named<F>(cfg: &ModelConfig, normalization: Normalization, take: F) -> Result<Self>
    where
        F: FnMut(&str, &[usize]) -> Result<Vec<f32>>,
    {
        let take = std::cell::RefCell::new(take);
        let mat = |name: &str, r: usize, c: usize| -> Result<Matrix> {
            let values = (take.borrow_mut())(name, &[r, c])?;
            Matrix::new(r, c, values)
        };
        let vec1 = |name: &str, n: usize| -> Result<Vec<f32>> { (take.borrow_mut())(name, &[n]) };
        let d = cfg.embed_dim;
        let dq = cfg.qkv_dim;
        let hidden = cfg.mlp_hidden();
        let patch_w = mat("patch_embed.weight", cfg.patch_dim(), d)?;
        let patch_b = vec1("patch_embed.bias", d)?;
        let cls_token = vec1("cls_token", d)?;
        let pos_embed = mat("pos_embed", 1 + cfg.num_patches(), d)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 1..=cfg.depth {
            let p = |s: &str| format!("block{b}.{s}");
            blocks.push(BlockWeights {
                ln1_gamma: vec1(&p("ln1.gamma"), d)?,
                ln1_beta: vec1(&p("ln1.beta"), d)?,
                w_q: mat(&p("W_Q"), d, dq)?,
                w_k: mat(&p("W_K"), d, dq)?,
                w_v: mat(&p("W_V"), d, dq)?,
                b_q: vec1(&p("b_Q"), dq)?,
                b_k: vec1(&p("b_K"), dq)?,
                b_v: vec1(&p("b_V"), dq)?,
                w_o: mat(&p("W_O"), dq, d)?,
                b_o: vec1(&p("b_O"), d)?,
                ln2_gamma: vec1(&p("ln2.gamma"), d)?,
                ln2_beta: vec1(&p("ln2.beta"), d)?,
                mlp_w1: mat(&p("mlp.W1"), d, hidden)?,
                mlp_b1: vec1(&p("mlp.b1"), hidden)?,
                mlp_w2: mat(&p("mlp.W2"), hidden, d)?,
                mlp_b2: vec1(&p("mlp.b2"), d)?,
            });
        }
        Ok(ModelWeights {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: vec1("norm.gamma", d)?,
            norm_beta: vec1("norm.beta", d)?,
            head_w: mat("head.weight", d, cfg.num_classes)?,
            head_b: vec1("head.bias", cfg.num_classes)?,
            normalization,
        })
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelWeights::expected_shapes(cfg);
        let actual = self.named_tensors();
        if actual.len() != expected.len() {
            return Err(Error::Config(format!(
                "weights hold {} tensors, config expects {} (depth {} vs {})",
                actual.len(),
                expected.len(),
                self.blocks.len(),
                cfg.depth
            )));
        }
        for ((name, shape), (_, found, _)) in expected.into_iter().zip(actual) {
            if shape != found {
                return Err(Error::TensorShape {
                    name,
                    expected: shape,
                    found,
                });
            }
        }
        Ok(())
    }
}

/// Splits the image into (possibly overlapping) patches, projects them,
/// prepends the class token and adds position embeddings.
pub fn embed_patches(
    image: &ImageRGB,
    cfg: &ModelConfig,
    weights: &ModelWeights,
    exec: &Exec,
) -> Result<TokenSequence> {
    if image.width() != cfg.image_size || image.height() != cfg.image_size {
        return Err(Error::shape(
            "embed_patches",
            format!(
                "image is {}x{}, model expects {}x{}",
                image.width(),
                image.height(),
                cfg.image_size,
                cfg.image_size
            ),
        ));
    }
    let side = cfg.grid_side();
    let p = cfg.patch_size;
    let norm = weights.normalization;
    let mut patches = Matrix::zeros(side * side, cfg.patch_dim());
    let mut origins = Vec::with_capacity(side * side);
    for gy in 0..side {
        for gx in 0..side {
            let row = patches.row_mut(gy * side + gx);
            let (y0, x0) = (gy * cfg.stride, gx * cfg.stride);
            for c in 0..3 {
                for ky in 0..p {
                    for kx in 0..p {
                        let v = image.pixel(x0 + kx, y0 + ky)[c] as f32 / 255.0;
                        row[(c * p + ky) * p + kx] = (v - norm.mean[c]) / norm.std[c];
                    }
                }
            }
            origins.push(PatchOrigin::Grid { row: gy, col: gx });
        }
    }
    let mut projected = exec.matmul(&patches, &weights.patch_w)?;
    projected.add_row_bias(&weights.patch_b)?;

    let mut tokens = Matrix::zeros(0, cfg.embed_dim);
    tokens.push_row(&weights.cls_token)?;
    for r in projected.iter_rows() {
        tokens.push_row(r)?;
    }
    tokens.add_assign(&weights.pos_embed).map_err(|_| {
        Error::shape(
            "embed_patches",
            format!(
                "position table has {} rows for {} tokens",
                weights.pos_embed.rows(),
                tokens.rows()
            ),
        )
    })?;
    TokenSequence::new(tokens, origins)
}

/// Multi-head self-attention over every token present. Returns the
/// projected output (before any residual) and the class-token attention.
pub fn mhsa(
    x: &Matrix,
    w: &BlockWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<(Matrix, ClassAttention)> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::shape("mhsa", "empty token sequence"));
    }
    let mut q = exec.matmul(x, &w.w_q)?;
    q.add_row_bias(&w.b_q)?;
    let mut k = exec.matmul(x, &w.w_k)?;
    k.add_row_bias(&w.b_k)?;
    let mut v = exec.matmul(x, &w.w_v)?;
    v.add_row_bias(&w.b_v)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let per_head = exec.map_indices(cfg.heads, |h| -> Result<(Matrix, Vec<f32>)> {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.column_block(lo, hi);
        let kh_t = k.column_block(lo, hi).transpose();
        let vh = v.column_block(lo, hi);
        let mut logits = exec.matmul(&qh, &kh_t)?;
        logits.scale(scale);
        tensor::softmax_rows_in_place(&mut logits);
        let class_row = logits.row(0)[1..].to_vec();
        Ok((exec.matmul(&logits, &vh)?, class_row))
    });

    let mut concat = Matrix::zeros(n, cfg.qkv_dim);
    let mut class_rows = Matrix::zeros(0, n - 1);
    for (h, head) in per_head.into_iter().enumerate() {
        let (out, class_row) = head?;
        concat.set_column_block(h * dh, &out);
        class_rows.push_row(&class_row)?;
    }
    let mut y = exec.matmul(&concat, &w.w_o)?;
    y.add_row_bias(&w.b_o)?;
    let attn = ClassAttention::new(class_rows, (1..n).collect())?;
    Ok((y, attn))
}

/// [`mhsa`] on a token sequence; origins carry over unchanged.
pub fn mhsa_forward(
    seq: &TokenSequence,
    w: &BlockWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<(TokenSequence, ClassAttention)> {
    let (y, attn) = mhsa(seq.tokens(), w, cfg, exec)?;
    Ok((seq.with_tokens(y), attn))
}

/// `x + MHSA(LN1(x))`.
pub fn attention_residual(
    seq: &TokenSequence,
    w: &BlockWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<(TokenSequence, ClassAttention)> {
    let normed = tensor::layernorm(seq.tokens(), &w.ln1_gamma, &w.ln1_beta, cfg.layer_norm_eps)?;
    let (mut y, attn) = mhsa(&normed, w, cfg, exec)?;
    y.add_assign(seq.tokens())?;
    Ok((seq.with_tokens(y), attn))
}

/// `x + MLP(LN2(x))`.
pub fn mlp_residual(
    seq: &TokenSequence,
    w: &BlockWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<TokenSequence> {
    let normed = tensor::layernorm(seq.tokens(), &w.ln2_gamma, &w.ln2_beta, cfg.layer_norm_eps)?;
    let mut hidden = exec.matmul(&normed, &w.mlp_w1)?;
    hidden.add_row_bias(&w.mlp_b1)?;
    tensor::gelu_in_place(&mut hidden);
    let mut out = exec.matmul(&hidden, &w.mlp_w2)?;
    out.add_row_bias(&w.mlp_b2)?;
    out.add_assign(seq.tokens())?;
    Ok(seq.with_tokens(out))
}

/// Plain pre-norm transformer block.
pub fn block_forward(
    seq: &TokenSequence,
    w: &BlockWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<TokenSequence> {
    let (mid, _) = attention_residual(seq, w, cfg, exec)?;
    mlp_residual(&mid, w, cfg, exec)
}

/// Scores the candidates, keeps the top-k and (optionally) appends the
/// fusion token built from the pruned rows of `seq`.
pub fn apply_pruning(
    seq: &TokenSequence,
    attn: &ClassAttention,
    cfg: &ModelConfig,
) -> Result<(TokenSequence, PruneDecision)> {
    if attn.candidates() == 0 {
        return Err(Error::Pruning("no patch tokens left to keep".into()));
    }
    let scores = pruning::score(cfg.indicator, attn)?;
    let keep_rate = if cfg.indicator == IndicatorKind::None {
        1.0
    } else {
        cfg.keep_rate
    };
    let mut decision = pruning::select_topk(scores, keep_rate)?;

    let mut rows = Vec::with_capacity(1 + decision.kept.len());
    rows.push(0);
    rows.extend_from_slice(&decision.kept);
    let mut tokens = seq.tokens().select_rows(&rows);
    let mut origins: Vec<PatchOrigin> = decision.kept.iter().map(|&t| seq.origins()[t - 1]).collect();

    if cfg.fusion_enabled && !decision.pruned.is_empty() {
        let pruned_rows: Vec<&[f32]> = decision.pruned.iter().map(|&t| seq.tokens().row(t)).collect();
        let fused = pruning::fuse(&pruned_rows, &decision.pruned_scores(), cfg.temperature)?
            .expect("pruned set is non-empty");
        tokens.push_row(&fused)?;
        origins.push(PatchOrigin::Fusion);
        decision.fusion_token_built = true;
    }
    Ok((TokenSequence::new(tokens, origins)?, decision))
}

/// Final layer norm on the class token followed by the linear head.
pub fn classify_head(
    seq: &TokenSequence,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<Vec<f32>> {
    let cls = Matrix::new(1, seq.width(), seq.class_token().to_vec())?;
    let normed = tensor::layernorm(&cls, &weights.norm_gamma, &weights.norm_beta, cfg.layer_norm_eps)?;
    let mut logits = exec.matmul(&normed, &weights.head_w)?;
    logits.add_row_bias(&weights.head_b)?;
    Ok(logits.into_data())
}

/// One pruning stage as applied during a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMask {
    /// 1-indexed block position.
    pub block: usize,
    pub decision: PruneDecision,
    /// Origin of every candidate, aligned with `decision.scores.candidate_indices`.
    pub candidate_origins: Vec<PatchOrigin>,
    /// Origins of the kept tokens, aligned with `decision.kept`.
    pub kept_origins: Vec<PatchOrigin>,
    /// Token count after the stage, class and fusion tokens included.
    pub tokens_after: usize,
}

impl StageMask {
    pub fn kept_count(&self) -> usize {
        self.decision.kept.len()
    }

    /// Grid cells still represented by their own token after this stage.
    pub fn retained_cells(&self) -> Vec<(usize, usize)> {
        self.kept_origins
            .iter()
            .filter_map(|o| match *o {
                PatchOrigin::Grid { row, col } => Some((row, col)),
                PatchOrigin::Fusion => None,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub stages: Vec<StageMask>,
}

/// Full forward pass with pruning at `cfg.prune_block_indices`.
pub fn forward(
    image: &ImageRGB,
    weights: &ModelWeights,
    cfg: &ModelConfig,
    exec: &Exec,
) -> Result<ForwardOutput> {
    cfg.validate()?;
    if weights.blocks.len() != cfg.depth {
        return Err(Error::Config(format!(
            "weights have {} blocks, config depth is {}",
            weights.blocks.len(),
            cfg.depth
        )));
    }
    let mut seq = embed_patches(image, cfg, weights, exec)?;
    let mut stages = Vec::with_capacity(cfg.prune_block_indices.len());
    for (i, w) in weights.blocks.iter().enumerate() {
        let block = i + 1;
        let (mid, attn) = attention_residual(&seq, w, cfg, exec)?;
        let mid = if cfg.is_pruning_block(block) {
            let candidate_origins = mid.origins().to_vec();
            let (reduced, decision) = apply_pruning(&mid, &attn, cfg)?;
            let kept_origins = decision.kept.iter().map(|&t| mid.origins()[t - 1]).collect();
            stages.push(StageMask {
                block,
                decision,
                candidate_origins,
                kept_origins,
                tokens_after: reduced.len(),
            });
            reduced
        } else {
            mid
        };
        seq = mlp_residual(&mid, w, cfg, exec)?;
    }
    let logits = classify_head(&seq, weights, cfg, exec)?;
    Ok(ForwardOutput { logits, stages })
}

/// Weights bundled with the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model { config, weights })
    }

    pub fn forward(&self, image: &ImageRGB, exec: &Exec) -> Result<ForwardOutput> {
        forward(image, &self.weights, &self.config, exec)
    }
}
