//! Toy-scale hierarchical shifted-window attention encoder.
//!
//! The encoder follows the usual 3D Swin layout: patch embedding, four stages
//! of alternating plain/shifted window attention blocks, and 2x2x2 patch
//! merging between stages. It exists to produce post-softmax attention
//! matrices together with the real/padding class of every query and key, so
//! the attention dilution statistics can be measured on controlled inputs.
//!
//! Padding tokens take part in attention like any other token unless
//! [`EncoderConfig::mask_padding_keys`] is set. Window padding (feature
//! extents rounded up to a multiple of the window) is zero-filled after the
//! first LayerNorm of each block, so those keys and values reduce to the
//! projection biases.

pub mod nn;
pub mod ratt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{stage_budget, Profile, StageBudget};
use crate::volumes::{linear_index, voxel_count, MaskVolume, Volume};

use nn::{gelu, LayerNorm, Linear};

/// Label of a token at some stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TokenClass {
    Real = 0,
    VolumePad = 1,
    WindowPad = 2,
}

impl TokenClass {
    #[inline]
    pub fn is_real(self) -> bool {
        self == TokenClass::Real
    }

    #[inline]
    pub fn is_pad(self) -> bool {
        self != TokenClass::Real
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TokenClass::Real),
            1 => Some(TokenClass::VolumePad),
            2 => Some(TokenClass::WindowPad),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch: [usize; 3],
    pub window: [usize; 3],
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub seed: u64,
    /// Exclude volume- and window-padding keys from every softmax.
    #[serde(default)]
    pub mask_padding_keys: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Smit, 0)
    }
}

impl EncoderConfig {
    pub fn for_profile(profile: Profile, seed: u64) -> Self {
        Self {
            patch: profile.patch(),
            window: profile.window(),
            embed_dim: profile.embed_dim(),
            depths: profile.depths().to_vec(),
            heads: profile.heads().to_vec(),
            mlp_ratio: 4.0,
            seed,
            mask_padding_keys: false,
        }
    }

    pub fn with_embed_dim(mut self, embed_dim: usize) -> Self {
        self.embed_dim = embed_dim;
        self
    }

    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != 4 || self.heads.len() != 4 {
            return Err(Error::invalid("depths and heads must have 4 entries"));
        }
        if self.patch.iter().chain(&self.window).any(|&v| v == 0)
            || self.embed_dim == 0
            || self.depths.iter().chain(&self.heads).any(|&v| v == 0)
        {
            return Err(Error::invalid("encoder hyperparameters must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        for s in 0..4 {
            if self.stage_dim(s) % self.heads[s] != 0 {
                return Err(Error::invalid(format!(
                    "stage {s}: width {} not divisible by {} heads",
                    self.stage_dim(s),
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }

    fn hidden_dim(&self, stage: usize) -> usize {
        ((self.stage_dim(stage) as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

/// Token features on a 3D grid, token-major (`data[t * dim + c]`), tokens in
/// x-fastest order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenField {
    pub extent: [usize; 3],
    pub dim: usize,
    pub data: Vec<f32>,
}

impl TokenField {
    pub fn zeros(extent: [usize; 3], dim: usize) -> Self {
        Self {
            extent,
            dim,
            data: vec![0.0; voxel_count(extent) * dim],
        }
    }

    pub fn tokens(&self) -> usize {
        voxel_count(self.extent)
    }

    #[inline]
    pub fn token(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Token classes on one stage grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGrid {
    pub extent: [usize; 3],
    pub labels: Vec<TokenClass>,
}

impl ClassGrid {
    pub fn real_count(&self) -> usize {
        self.labels.iter().filter(|c| c.is_real()).count()
    }

    /// Max-pool of realness over 2x2x2 blocks. Odd extents are padded with
    /// volume padding.
    pub fn merge(&self) -> ClassGrid {
        let e = self.extent;
        let out_e = [e[0].div_ceil(2), e[1].div_ceil(2), e[2].div_ceil(2)];
        let mut labels = vec![TokenClass::VolumePad; voxel_count(out_e)];
        for z in 0..e[2] {
            for y in 0..e[1] {
                for x in 0..e[0] {
                    if self.labels[linear_index(e, x, y, z)].is_real() {
                        labels[linear_index(out_e, x / 2, y / 2, z / 2)] = TokenClass::Real;
                    }
                }
            }
        }
        ClassGrid {
            extent: out_e,
            labels,
        }
    }
}

/// Token classes of every stage.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenClassMap {
    pub stages: Vec<ClassGrid>,
}

/// One post-softmax attention matrix for a (stage, block, window, head).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub stage: u32,
    pub block: u32,
    pub window_index: u32,
    pub head: u32,
    /// Rows are queries, columns keys; `n_queries x n_keys` row-major.
    pub weights: Vec<f32>,
    pub query_classes: Vec<TokenClass>,
    pub key_classes: Vec<TokenClass>,
    /// Admissible (query, key) pairs under the shift mask, same layout as
    /// `weights`.
    pub shift_mask: Option<Vec<bool>>,
    /// Optional per-key token features, `n_keys x feature_dim`.
    pub features: Option<Vec<f32>>,
    pub feature_dim: u32,
}

impl AttentionRecord {
    pub fn n_queries(&self) -> usize {
        self.query_classes.len()
    }

    pub fn n_keys(&self) -> usize {
        self.key_classes.len()
    }

    pub fn view(&self) -> AttentionView<'_> {
        AttentionView {
            stage: self.stage,
            block: self.block,
            window_index: self.window_index,
            head: self.head,
            weights: &self.weights,
            query_classes: &self.query_classes,
            key_classes: &self.key_classes,
            shift_mask: self.shift_mask.as_deref(),
            features: self.features.as_deref(),
            feature_dim: self.feature_dim,
        }
    }
}

/// Borrowed form of [`AttentionRecord`] handed to sinks during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionView<'a> {
    pub stage: u32,
    pub block: u32,
    pub window_index: u32,
    pub head: u32,
    pub weights: &'a [f32],
    pub query_classes: &'a [TokenClass],
    pub key_classes: &'a [TokenClass],
    pub shift_mask: Option<&'a [bool]>,
    pub features: Option<&'a [f32]>,
    pub feature_dim: u32,
}

impl AttentionView<'_> {
    pub fn to_record(&self) -> AttentionRecord {
        AttentionRecord {
            stage: self.stage,
            block: self.block,
            window_index: self.window_index,
            head: self.head,
            weights: self.weights.to_vec(),
            query_classes: self.query_classes.to_vec(),
            key_classes: self.key_classes.to_vec(),
            shift_mask: self.shift_mask.map(<[bool]>::to_vec),
            features: self.features.map(<[f32]>::to_vec),
            feature_dim: self.feature_dim,
        }
    }
}

/// Receives attention matrices as the encoder produces them.
pub trait AttentionSink {
    fn record(&mut self, view: &AttentionView<'_>) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl AttentionSink for NullSink {
    fn record(&mut self, _: &AttentionView<'_>) -> Result<()> {
        Ok(())
    }
}

impl AttentionSink for Vec<AttentionRecord> {
    fn record(&mut self, view: &AttentionView<'_>) -> Result<()> {
        self.push(view.to_record());
        Ok(())
    }
}

impl<S: AttentionSink + ?Sized> AttentionSink for &mut S {
    fn record(&mut self, view: &AttentionView<'_>) -> Result<()> {
        (**self).record(view)
    }
}

/// Flattens each patch into a token vector and labels tokens real when any
/// of their voxels is real.
pub fn patchify(v: &Volume, indicator: &MaskVolume, patch: [usize; 3]) -> Result<(TokenField, ClassGrid)> {
    if v.shape != indicator.shape {
        return Err(Error::GridMismatch(format!(
            "volume {:?} vs indicator {:?}",
            v.shape, indicator.shape
        )));
    }
    let mut extent = [0; 3];
    for a in 0..3 {
        if patch[a] == 0 || v.shape[a] % patch[a] != 0 {
            return Err(Error::invalid(format!(
                "shape {:?} not divisible by patch {:?}",
                v.shape, patch
            )));
        }
        extent[a] = v.shape[a] / patch[a];
    }
    let pv = voxel_count(patch);
    let mut field = TokenField::zeros(extent, pv);
    let mut labels = vec![TokenClass::VolumePad; voxel_count(extent)];
    for tz in 0..extent[2] {
        for ty in 0..extent[1] {
            for tx in 0..extent[0] {
                let t = linear_index(extent, tx, ty, tz);
                let mut k = 0;
                for dz in 0..patch[2] {
                    for dy in 0..patch[1] {
                        for dx in 0..patch[0] {
                            let (x, y, z) = (tx * patch[0] + dx, ty * patch[1] + dy, tz * patch[2] + dz);
                            let i = linear_index(v.shape, x, y, z);
                            field.data[t * pv + k] = v.data[i];
                            if indicator.data[i] != 0 {
                                labels[t] = TokenClass::Real;
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((field, ClassGrid { extent, labels }))
}

/// Position of a block inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockContext {
    pub stage: usize,
    pub block: usize,
    pub shifted: bool,
    pub mask_padding_keys: bool,
}

/// Pre-norm window attention block: `x += proj(attn(LN(x)))`, `x += MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    pub dim: usize,
    pub heads: usize,
    pub window: [usize; 3],
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn init(rng: &mut ChaCha8Rng, dim: usize, heads: usize, hidden: usize, window: [usize; 3]) -> Self {
        Self {
            dim,
            heads,
            window,
            norm1: LayerNorm::new(dim),
            qkv: Linear::init(rng, dim, 3 * dim, true),
            proj: Linear::init(rng, dim, dim, true),
            norm2: LayerNorm::new(dim),
            fc1: Linear::init(rng, dim, hidden, true),
            fc2: Linear::init(rng, hidden, dim, true),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Window geometry for a feature extent (clamped window, shift, padding).
    pub fn geometry(&self, extent: [usize; 3], shifted: bool) -> StageBudget {
        let mut g = stage_budget(0, extent, self.window);
        if !shifted {
            g.shift = [0; 3];
        }
        g
    }

    pub fn forward<S: AttentionSink + ?Sized>(
        &self,
        x: &TokenField,
        classes: &ClassGrid,
        ctx: BlockContext,
        sink: &mut S,
    ) -> Result<TokenField> {
        debug_assert_eq!(x.dim, self.dim);
        debug_assert_eq!(x.extent, classes.extent);
        let c = self.dim;
        let n_tok = x.tokens();
        let extent = x.extent;
        let geo = self.geometry(extent, ctx.shifted);
        let win = geo.effective_window;
        let shift = geo.shift;
        let padded = geo.padded_extent;

        // LN1 + qkv on real grid tokens; window-padding tokens get zero input,
        // i.e. qkv = bias.
        let mut normed = vec![0.0f32; n_tok * c];
        self.norm1.forward(&x.data, &mut normed);
        let mut qkv = vec![0.0f32; n_tok * 3 * c];
        self.qkv.forward(&normed, n_tok, &mut qkv);
        drop(normed);
        let mut pad_qkv = vec![0.0f32; 3 * c];
        if let Some(b) = &self.qkv.bias {
            pad_qkv.copy_from_slice(b);
        }

        let nw = voxel_count(win);
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let n_windows = [padded[0] / win[0], padded[1] / win[1], padded[2] / win[2]];

        let mut attn_out = vec![0.0f32; n_tok * c];
        let mut slot_src: Vec<Option<usize>> = vec![None; nw];
        let mut slot_region = vec![0u8; nw];
        let mut slot_class = vec![TokenClass::Real; nw];
        let mut admissible = vec![true; nw * nw];
        let mut weights = vec![0.0f32; nw * nw];
        let mut out_window = vec![0.0f32; nw * c];
        let mut q_h = vec![0.0f32; nw * hd];
        let mut k_t = vec![0.0f32; hd * nw];
        let mut v_h = vec![0.0f32; nw * hd];

        let region = |p: usize, a: usize| -> u8 {
            if shift[a] == 0 || p < padded[a] - win[a] {
                0
            } else if p < padded[a] - shift[a] {
                1
            } else {
                2
            }
        };

        let mut w_index = 0u32;
        for wz in 0..n_windows[2] {
            for wy in 0..n_windows[1] {
                for wx in 0..n_windows[0] {
                    // Gather slots: shifted-grid position p holds padded-grid
                    // position (p + shift) mod padded.
                    let mut k = 0;
                    for dz in 0..win[2] {
                        for dy in 0..win[1] {
                            for dx in 0..win[0] {
                                let p = [wx * win[0] + dx, wy * win[1] + dy, wz * win[2] + dz];
                                let mut src = [0usize; 3];
                                let mut inside = true;
                                for a in 0..3 {
                                    src[a] = (p[a] + shift[a]) % padded[a];
                                    inside &= src[a] < extent[a];
                                }
                                slot_region[k] = region(p[0], 0) + 3 * region(p[1], 1) + 9 * region(p[2], 2);
                                if inside {
                                    let t = linear_index(extent, src[0], src[1], src[2]);
                                    slot_src[k] = Some(t);
                                    slot_class[k] = classes.labels[t];
                                } else {
                                    slot_src[k] = None;
                                    slot_class[k] = TokenClass::WindowPad;
                                }
                                k += 1;
                            }
                        }
                    }
                    for i in 0..nw {
                        for j in 0..nw {
                            let mut ok = slot_region[i] == slot_region[j];
                            if ctx.mask_padding_keys && slot_class[j].is_pad() {
                                ok = false;
                            }
                            admissible[i * nw + j] = ok;
                        }
                    }
                    let all_admissible = admissible.iter().all(|a| *a);
                    out_window.iter_mut().for_each(|v| *v = 0.0);
                    for h in 0..self.heads {
                        let qo = h * hd;
                        let ko = c + h * hd;
                        let vo = 2 * c + h * hd;
                        // Per-head copies: keys transposed so score loops run
                        // over contiguous slots.
                        for s in 0..nw {
                            let r = match slot_src[s] {
                                Some(t) => &qkv[t * 3 * c..(t + 1) * 3 * c],
                                None => &pad_qkv[..],
                            };
                            for d in 0..hd {
                                q_h[s * hd + d] = r[qo + d] * scale;
                                k_t[d * nw + s] = r[ko + d];
                                v_h[s * hd + d] = r[vo + d];
                            }
                        }
                        for i in 0..nw {
                            let wrow = &mut weights[i * nw..(i + 1) * nw];
                            let arow = &admissible[i * nw..(i + 1) * nw];
                            wrow.iter_mut().for_each(|v| *v = 0.0);
                            for d in 0..hd {
                                let qd = q_h[i * hd + d];
                                for (w, k) in wrow.iter_mut().zip(&k_t[d * nw..(d + 1) * nw]) {
                                    *w += qd * k;
                                }
                            }
                            let mut maxv = f32::NEG_INFINITY;
                            if all_admissible {
                                for w in wrow.iter() {
                                    maxv = maxv.max(*w);
                                }
                            } else {
                                for (w, a) in wrow.iter_mut().zip(arow) {
                                    if *a {
                                        maxv = maxv.max(*w);
                                    } else {
                                        *w = f32::NEG_INFINITY;
                                    }
                                }
                            }
                            if maxv == f32::NEG_INFINITY {
                                wrow.iter_mut().for_each(|v| *v = 0.0);
                                continue;
                            }
                            let mut sum = 0.0f32;
                            for w in wrow.iter_mut() {
                                // exp(-inf) is exactly 0 for masked pairs.
                                *w = (*w - maxv).exp();
                                sum += *w;
                            }
                            let inv = 1.0 / sum;
                            let orow = &mut out_window[i * c + qo..i * c + qo + hd];
                            for (j, w) in wrow.iter_mut().enumerate() {
                                *w *= inv;
                                if *w != 0.0 {
                                    for (o, v) in orow.iter_mut().zip(&v_h[j * hd..(j + 1) * hd]) {
                                        *o += *w * v;
                                    }
                                }
                            }
                        }
                        sink.record(&AttentionView {
                            stage: ctx.stage as u32,
                            block: ctx.block as u32,
                            window_index: w_index,
                            head: h as u32,
                            weights: &weights,
                            query_classes: &slot_class,
                            key_classes: &slot_class,
                            shift_mask: Some(&admissible),
                            features: None,
                            feature_dim: 0,
                        })?;
                    }
                    for (s, src) in slot_src.iter().enumerate() {
                        if let Some(t) = src {
                            attn_out[t * c..(t + 1) * c].copy_from_slice(&out_window[s * c..(s + 1) * c]);
                        }
                    }
                    w_index += 1;
                }
            }
        }
        drop(qkv);

        let mut out = x.clone();
        let mut tmp = vec![0.0f32; c];
        for t in 0..n_tok {
            self.proj.forward_row(&attn_out[t * c..(t + 1) * c], &mut tmp);
            for (o, v) in out.data[t * c..(t + 1) * c].iter_mut().zip(&tmp) {
                *o += v;
            }
        }
        drop(attn_out);

        let hidden = self.fc1.out_dim;
        let mut ln = vec![0.0f32; c];
        let mut hbuf = vec![0.0f32; hidden];
        for t in 0..n_tok {
            let xt = &mut out.data[t * c..(t + 1) * c];
            self.norm2.forward_row(xt, &mut ln);
            self.fc1.forward_row(&ln, &mut hbuf);
            for v in hbuf.iter_mut() {
                *v = gelu(*v);
            }
            self.fc2.forward_row(&hbuf, &mut tmp);
            for (o, v) in xt.iter_mut().zip(&tmp) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// 2x2x2 patch merging: concatenate, LayerNorm, reduce 8C -> 2C (no bias).
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub dim: usize,
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self {
            dim,
            norm: LayerNorm::new(8 * dim),
            reduction: Linear::init(rng, 8 * dim, 2 * dim, false),
        }
    }

    pub fn forward(&self, x: &TokenField) -> TokenField {
        let c = self.dim;
        let e = x.extent;
        let out_e = [e[0].div_ceil(2), e[1].div_ceil(2), e[2].div_ceil(2)];
        let mut out = TokenField::zeros(out_e, 2 * c);
        let mut cat = vec![0.0f32; 8 * c];
        let mut ln = vec![0.0f32; 8 * c];
        for z in 0..out_e[2] {
            for y in 0..out_e[1] {
                for xx in 0..out_e[0] {
                    let mut k = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (sx, sy, sz) = (2 * xx + dx, 2 * y + dy, 2 * z + dz);
                                let dst = &mut cat[k * c..(k + 1) * c];
                                if sx < e[0] && sy < e[1] && sz < e[2] {
                                    dst.copy_from_slice(x.token(linear_index(e, sx, sy, sz)));
                                } else {
                                    dst.iter_mut().for_each(|v| *v = 0.0);
                                }
                                k += 1;
                            }
                        }
                    }
                    self.norm.forward_row(&cat, &mut ln);
                    let t = linear_index(out_e, xx, y, z);
                    self.reduction
                        .forward_row(&ln, &mut out.data[t * 2 * c..(t + 1) * 2 * c]);
                }
            }
        }
        out
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Features after the last block of every stage.
    pub stage_features: Vec<TokenField>,
    pub classes: TokenClassMap,
}

/// Randomly initialised encoder, deterministic per seed.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Vec<Block>>,
    pub merges: Vec<PatchMerge>,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pv = voxel_count(cfg.patch);
        let embed = Linear::init(&mut rng, pv, cfg.embed_dim, true);
        let embed_norm = LayerNorm::new(cfg.embed_dim);
        let mut stages = Vec::new();
        let mut merges = Vec::new();
        for s in 0..cfg.n_stages() {
            let dim = cfg.stage_dim(s);
            let blocks = (0..cfg.depths[s])
                .map(|_| Block::init(&mut rng, dim, cfg.heads[s], cfg.hidden_dim(s), cfg.window))
                .collect();
            stages.push(blocks);
            if s + 1 < cfg.n_stages() {
                merges.push(PatchMerge::init(&mut rng, dim));
            }
        }
        Ok(Self {
            cfg,
            embed,
            embed_norm,
            stages,
            merges,
        })
    }

    /// Patch embedding followed by LayerNorm.
    pub fn embed(&self, v: &Volume, indicator: &MaskVolume) -> Result<(TokenField, ClassGrid)> {
        let (patches, classes) = patchify(v, indicator, self.cfg.patch)?;
        let n = patches.tokens();
        let c = self.cfg.embed_dim;
        let mut x = TokenField::zeros(patches.extent, c);
        let mut tmp = vec![0.0f32; c];
        for t in 0..n {
            self.embed.forward_row(patches.token(t), &mut tmp);
            self.embed_norm
                .forward_row(&tmp, &mut x.data[t * c..(t + 1) * c]);
        }
        Ok((x, classes))
    }

    /// Runs the encoder, streaming every attention matrix to `sink` in a
    /// fixed order: stage, block, window, head.
    pub fn forward<S: AttentionSink + ?Sized>(
        &self,
        v: &Volume,
        indicator: &MaskVolume,
        sink: &mut S,
    ) -> Result<ForwardOutput> {
        self.run(v, indicator, sink, None)
    }

    /// Like [`Encoder::forward`], also returning the output of every block
    /// in execution order.
    pub fn forward_blocks<S: AttentionSink + ?Sized>(
        &self,
        v: &Volume,
        indicator: &MaskVolume,
        sink: &mut S,
    ) -> Result<(ForwardOutput, Vec<TokenField>)> {
        let mut blocks = Vec::new();
        let out = self.run(v, indicator, sink, Some(&mut blocks))?;
        Ok((out, blocks))
    }

    fn run<S: AttentionSink + ?Sized>(
        &self,
        v: &Volume,
        indicator: &MaskVolume,
        sink: &mut S,
        mut keep: Option<&mut Vec<TokenField>>,
    ) -> Result<ForwardOutput> {
        let (mut x, mut classes) = self.embed(v, indicator)?;
        let mut out = ForwardOutput {
            stage_features: Vec::new(),
            classes: TokenClassMap::default(),
        };
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let ctx = BlockContext {
                    stage: s,
                    block: b,
                    shifted: b % 2 == 1,
                    mask_padding_keys: self.cfg.mask_padding_keys,
                };
                x = block.forward(&x, &classes, ctx, sink)?;
                if let Some(k) = keep.as_deref_mut() {
                    k.push(x.clone());
                }
            }
            out.stage_features.push(x.clone());
            out.classes.stages.push(classes.clone());
            if let Some(m) = self.merges.get(s) {
                x = m.forward(&x);
                classes = classes.merge();
            }
        }
        Ok(out)
    }
}

/// Convenience: build an encoder from `cfg` and run it.
pub fn forward<S: AttentionSink + ?Sized>(
    v: &Volume,
    indicator: &MaskVolume,
    cfg: &EncoderConfig,
    sink: &mut S,
) -> Result<ForwardOutput> {
    Encoder::new(cfg.clone())?.forward(v, indicator, sink)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(window: usize) -> EncoderConfig {
        EncoderConfig {
            patch: [2; 3],
            window: [window; 3],
            embed_dim: 6,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 3, 4],
            mlp_ratio: 2.0,
            seed: 7,
            mask_padding_keys: false,
        }
    }

    fn ramp_volume(shape: [usize; 3]) -> Volume {
        let n = voxel_count(shape);
        Volume::new(shape, [1.0; 3], (0..n).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap()
    }

    fn indicator(shape: [usize; 3], real_z: usize) -> MaskVolume {
        let mut m = MaskVolume::empty(shape, [1.0; 3]).unwrap();
        for z in 0..real_z.min(shape[2]) {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    m.set(x, y, z, true);
                }
            }
        }
        m
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = toy_cfg(2);
        c.heads = vec![4, 2, 3, 4];
        assert!(c.validate().is_err());
        c = toy_cfg(2);
        c.depths.pop();
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_class_rules() {
        let shape = [4, 4, 8];
        let v = ramp_volume(shape);
        let (f, cls) = patchify(&v, &indicator(shape, 8), [2; 3]).unwrap();
        assert_eq!(f.tokens(), 2 * 2 * 4);
        assert!(cls.labels.iter().all(|c| c.is_real()));
        let (_, cls) = patchify(&v, &indicator(shape, 0), [2; 3]).unwrap();
        assert!(cls.labels.iter().all(|c| *c == TokenClass::VolumePad));
        assert!(patchify(&v, &indicator(shape, 8), [3, 2, 2]).is_err());
    }

    #[test]
    fn patchify_35_padded_slices() {
        // 93 real slices low, 35 padded on top -> 17 full pad layers + 1 mixed.
        let shape = [2, 2, 128];
        let v = Volume::filled(shape, [1.0; 3], 0.5).unwrap();
        let (_, cls) = patchify(&v, &indicator(shape, 93), [2; 3]).unwrap();
        let pad_layers = (0..64)
            .filter(|&z| cls.labels[linear_index(cls.extent, 0, 0, z)] == TokenClass::VolumePad)
            .count();
        assert_eq!(pad_layers, 17);
        // Layer 46 holds voxels 92 (real) and 93 (pad).
        assert_eq!(cls.labels[linear_index(cls.extent, 0, 0, 46)], TokenClass::Real);
    }

    #[test]
    fn rows_are_stochastic_and_masked_pairs_zero() {
        let shape = [8, 8, 12];
        let v = ramp_volume(shape);
        let mut recs: Vec<AttentionRecord> = Vec::new();
        forward(&v, &indicator(shape, 7), &toy_cfg(4), &mut recs).unwrap();
        assert!(!recs.is_empty());
        for r in &recs {
            let n = r.n_keys();
            let mask = r.shift_mask.as_ref().unwrap();
            for i in 0..r.n_queries() {
                let row = &r.weights[i * n..(i + 1) * n];
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
                for j in 0..n {
                    assert!(row[j] >= 0.0);
                    if !mask[i * n + j] {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn unshifted_block_mask_is_all_admissible() {
        let shape = [8, 8, 8];
        let v = ramp_volume(shape);
        let mut recs: Vec<AttentionRecord> = Vec::new();
        forward(&v, &indicator(shape, 8), &toy_cfg(2), &mut recs).unwrap();
        for r in recs.iter().filter(|r| r.block == 0) {
            assert!(r.shift_mask.as_ref().unwrap().iter().all(|&b| b));
        }
        assert!(recs
            .iter()
            .filter(|r| r.block == 1 && r.stage == 0)
            .any(|r| r.shift_mask.as_ref().unwrap().iter().any(|&b| !b)));
    }

    #[test]
    fn all_real_input_has_no_padding_labels() {
        let shape = [16, 16, 16];
        let v = ramp_volume(shape);
        let mut recs: Vec<AttentionRecord> = Vec::new();
        let out = forward(&v, &indicator(shape, 16), &toy_cfg(2), &mut recs).unwrap();
        for g in &out.classes.stages {
            assert!(g.labels.iter().all(|c| c.is_real()));
        }
        for r in &recs {
            assert!(r.key_classes.iter().all(|c| c.is_real()));
        }
    }

    #[test]
    fn determinism() {
        let shape = [8, 8, 8];
        let v = ramp_volume(shape);
        let ind = indicator(shape, 5);
        let mut a: Vec<AttentionRecord> = Vec::new();
        let mut b: Vec<AttentionRecord> = Vec::new();
        let oa = forward(&v, &ind, &toy_cfg(2), &mut a).unwrap();
        let ob = forward(&v, &ind, &toy_cfg(2), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa.stage_features, ob.stage_features);
    }

    #[test]
    fn class_merge_keeps_realness() {
        let shape = [16, 16, 32];
        let v = ramp_volume(shape);
        let out = forward(&v, &indicator(shape, 1), &toy_cfg(2), &mut NullSink).unwrap();
        for g in &out.classes.stages {
            assert!(g.real_count() > 0);
        }
        let counts: Vec<usize> = out.classes.stages.iter().map(|g| g.real_count()).collect();
        assert_eq!(counts, vec![64, 16, 4, 1]);
    }

    #[test]
    fn masking_padding_keys_removes_pad_attention() {
        let shape = [8, 8, 16];
        let v = ramp_volume(shape);
        let mut cfg = toy_cfg(4);
        cfg.mask_padding_keys = true;
        let mut recs: Vec<AttentionRecord> = Vec::new();
        forward(&v, &indicator(shape, 6), &cfg, &mut recs).unwrap();
        for r in &recs {
            let n = r.n_keys();
            for i in 0..n {
                if r.query_classes[i].is_real() {
                    for j in 0..n {
                        if r.key_classes[j].is_pad() {
                            assert_eq!(r.weights[i * n + j], 0.0);
                        }
                    }
                }
            }
        }
    }
}
