//! ViT-style space-time policy core: patch embedding (plain and hybrid),
//! divided and joint space-time attention with Transformer-XL-style frame
//! caching, per-frame outputs, and instrumented comparison counting.

use rand::Rng;

use crate::attention::{sdpa, AttentionRecord, LN_EPS};
use crate::error::{Error, Result};
use crate::layers::{gaussian_encoding, init_weight, Linear, VisionNet};
use crate::tensor::Tensor;

const POS_SIGMA: f64 = 0.02;

// ── Patch embedding ──────────────────────────────────────────────────

pub enum EmbedderMode {
    /// Single conv with kernel P and stride P: non-overlapping P×P patches.
    Plain { conv: Tensor, patch: usize },
    /// Residual conv encoder whose feature-map cells act as 1×1 patches.
    Hybrid { vision: VisionNet, proj: Linear },
}

pub struct PatchEmbedder {
    pub mode: EmbedderMode,
    pub emb: usize,
    pub n_tokens: usize,
    pub spatial_pos: Tensor, // [N × emb], trainable
}

impl PatchEmbedder {
    pub fn plain(
        in_channels: usize,
        frame_h: usize,
        frame_w: usize,
        patch: usize,
        emb: usize,
        rng: &mut impl Rng,
    ) -> Result<PatchEmbedder> {
        if patch == 0 || frame_h % patch != 0 || frame_w % patch != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("frame {frame_h}x{frame_w} not divisible by patch size {patch}"),
            ));
        }
        let n_tokens = (frame_h / patch) * (frame_w / patch);
        Ok(PatchEmbedder {
            mode: EmbedderMode::Plain {
                conv: init_weight(&[emb, in_channels, patch, patch], in_channels * patch * patch, rng),
                patch,
            },
            emb,
            n_tokens,
            spatial_pos: gaussian_encoding(&[n_tokens, emb], POS_SIGMA, rng)?,
        })
    }

    pub fn hybrid(
        in_channels: usize,
        frame_h: usize,
        frame_w: usize,
        vision_widths: &[usize],
        emb: usize,
        rng: &mut impl Rng,
    ) -> Result<PatchEmbedder> {
        let vision = VisionNet::new(in_channels, vision_widths, rng);
        let down = vision.downscale();
        if frame_h % down != 0 || frame_w % down != 0 {
            return Err(Error::shape(
                "patch_embed",
                format!("frame {frame_h}x{frame_w} not divisible by vision downscale {down}"),
            ));
        }
        let n_tokens = (frame_h / down) * (frame_w / down);
        let c = vision.out_channels();
        Ok(PatchEmbedder {
            mode: EmbedderMode::Hybrid { vision, proj: Linear::new(c, emb, rng) },
            emb,
            n_tokens,
            spatial_pos: gaussian_encoding(&[n_tokens, emb], POS_SIGMA, rng)?,
        })
    }

    /// frame: [C,H,W] → tokens [N × emb] with spatial encoding added.
    pub fn forward(&self, frame: &Tensor) -> Result<Tensor> {
        let tokens = match &self.mode {
            EmbedderMode::Plain { conv, patch } => {
                let s = frame.shape();
                if s.len() != 3 || s[1] % patch != 0 || s[2] % patch != 0 {
                    return Err(Error::shape(
                        "patch_embed",
                        format!("frame H={}, W={} not divisible by P={patch}", s[1], s[2]),
                    ));
                }
                let feat = frame.conv2d(conv, *patch, 0)?;
                let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
                feat.permute(&[1, 2, 0])?.reshape(&[h * w, c])?
            }
            EmbedderMode::Hybrid { vision, proj } => {
                let feat = vision.forward(frame)?;
                let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
                proj.forward(&feat.permute(&[1, 2, 0])?.reshape(&[h * w, c])?)?
            }
        };
        if tokens.shape() != [self.n_tokens, self.emb] {
            return Err(Error::shape(
                "patch_embed",
                format!("tokens {:?}, expected [{}, {}]", tokens.shape(), self.n_tokens, self.emb),
            ));
        }
        tokens.add(&self.spatial_pos)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        match &self.mode {
            EmbedderMode::Plain { conv, .. } => {
                out.push((format!("{prefix}.conv"), conv.clone()));
            }
            EmbedderMode::Hybrid { vision, proj } => {
                vision.collect_params(&format!("{prefix}.vision"), out);
                proj.collect_params(&format!("{prefix}.proj"), out);
            }
        }
        out.push((format!("{prefix}.spatial_pos"), self.spatial_pos.clone()));
    }
}

// ── Comparison counting ──────────────────────────────────────────────

/// Tally of query-key score evaluations per forward pass, counted per
/// (query position, key position) pair; heads share positions. Reset it
/// between passes.
#[derive(Default, Debug, Clone)]
pub struct ComparisonCounter {
    pub scores: u64,
}

impl ComparisonCounter {
    pub fn add(&mut self, queries: usize, keys: usize) {
        self.scores += (queries * keys) as u64;
    }

    pub fn reset(&mut self) {
        self.scores = 0;
    }
}

// ── Frame cache ──────────────────────────────────────────────────────

/// Detached per-layer token grids for up to `mem_len` past frames, plus the
/// global index of the next frame (for the temporal encoding). Cached grids
/// never receive gradient.
#[derive(Clone)]
pub struct FrameCache {
    pub layers: Vec<Vec<Tensor>>, // [n_layer][frames], each [N × emb]
    pub frame_pos: usize,
}

impl FrameCache {
    pub fn empty(n_layers: usize) -> FrameCache {
        FrameCache { layers: vec![Vec::new(); n_layers], frame_pos: 0 }
    }

    /// Number of cached past frames.
    pub fn frames(&self) -> usize {
        self.layers.first().map(|l| l.len()).unwrap_or(0)
    }

    fn push(&mut self, layer: usize, grid: Tensor, mem_len: usize) {
        let slot = &mut self.layers[layer];
        slot.push(grid.detach());
        if slot.len() > mem_len {
            slot.remove(0);
        }
    }
}

// ── Space-time block ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionScheme {
    Divided,
    Joint,
}

struct QkvSet {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
}

impl QkvSet {
    fn new(d: usize, rng: &mut impl Rng) -> QkvSet {
        QkvSet {
            w_q: init_weight(&[d, d], d, rng),
            w_k: init_weight(&[d, d], d, rng),
            w_v: init_weight(&[d, d], d, rng),
            w_o: init_weight(&[d, d], d, rng),
        }
    }

    fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
    }
}

/// Pre-LN space-time attention block. Divided holds distinct query-key-value
/// matrices for the temporal and spatial stages; joint holds one set applied
/// over all patches of all visible frames. One shared MLP sub-block.
pub struct SpaceTimeBlock {
    pub scheme: AttentionScheme,
    time: QkvSet,
    space: Option<QkvSet>, // divided only
    mlp1: Linear,
    mlp2: Linear,
    ln_t_gain: Tensor,
    ln_t_bias: Tensor,
    ln_s_gain: Tensor,
    ln_s_bias: Tensor,
    ln_m_gain: Tensor,
    ln_m_bias: Tensor,
    pub heads: usize,
    pub d: usize,
}

impl SpaceTimeBlock {
    pub fn new(
        scheme: AttentionScheme,
        d: usize,
        heads: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<SpaceTimeBlock> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("emb {d} not divisible by heads {heads}")));
        }
        Ok(SpaceTimeBlock {
            scheme,
            time: QkvSet::new(d, rng),
            space: match scheme {
                AttentionScheme::Divided => Some(QkvSet::new(d, rng)),
                AttentionScheme::Joint => None,
            },
            mlp1: Linear::new(d, mlp_hidden, rng),
            mlp2: Linear::new(mlp_hidden, d, rng),
            ln_t_gain: Tensor::ones(&[d]).with_grad(),
            ln_t_bias: Tensor::zeros(&[d]).with_grad(),
            ln_s_gain: Tensor::ones(&[d]).with_grad(),
            ln_s_bias: Tensor::zeros(&[d]).with_grad(),
            ln_m_gain: Tensor::ones(&[d]).with_grad(),
            ln_m_bias: Tensor::zeros(&[d]).with_grad(),
            heads,
            d,
        })
    }

    fn mlp_sub(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.layer_norm(&self.ln_m_gain, &self.ln_m_bias, 1, LN_EPS)?;
        x.add(&self.mlp2.forward(&self.mlp1.forward(&h)?.gelu())?)
    }

    /// Joint space-time attention: every query patch attends over all N·F
    /// patch tokens of the cached past frames plus the current frame.
    pub fn forward_joint(
        &self,
        tokens_now: &Tensor,
        cached: &[Tensor],
        counter: &mut ComparisonCounter,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let n = tokens_now.shape()[0];
        let f = cached.len() + 1;
        let q_in = tokens_now.layer_norm(&self.ln_t_gain, &self.ln_t_bias, 1, LN_EPS)?;
        let kv_src = if cached.is_empty() {
            q_in.clone()
        } else {
            let mut parts: Vec<Tensor> = cached.to_vec();
            parts.push(tokens_now.clone());
            Tensor::concat(&parts, 0)?.layer_norm(&self.ln_t_gain, &self.ln_t_bias, 1, LN_EPS)?
        };
        let q = q_in.matmul_t(&self.time.w_q)?;
        let k = kv_src.matmul_t(&self.time.w_k)?;
        let v = kv_src.matmul_t(&self.time.w_v)?;
        counter.add(n, n * f);
        let d_k = self.d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut records = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (y, a) = sdpa(
                &q.narrow(1, h * d_k, d_k)?,
                &k.narrow(1, h * d_k, d_k)?,
                &v.narrow(1, h * d_k, d_k)?,
                None,
            )?;
            records.push(AttentionRecord {
                layer: 0,
                head: h,
                q_len: n,
                k_len: n * f,
                probs: a.to_vec(),
            });
            outs.push(y);
        }
        let attn = Tensor::concat(&outs, 1)?.matmul_t(&self.time.w_o)?;
        let x = tokens_now.add(&attn)?;
        let out = self.mlp_sub(&x)?;
        Ok((out, records))
    }

    /// Divided space-time attention: temporal attention first (each patch
    /// attends the same patch across frames), then spatial attention within
    /// the current frame, then the MLP.
    pub fn forward_divided(
        &self,
        tokens_now: &Tensor,
        cached: &[Tensor],
        counter: &mut ComparisonCounter,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let n = tokens_now.shape()[0];
        let f = cached.len() + 1;
        let d_k = self.d / self.heads;

        // temporal stage
        let q_in = tokens_now.layer_norm(&self.ln_t_gain, &self.ln_t_bias, 1, LN_EPS)?;
        let kv_src = if cached.is_empty() {
            q_in.clone()
        } else {
            let mut parts: Vec<Tensor> = cached.to_vec();
            parts.push(tokens_now.clone());
            Tensor::concat(&parts, 0)?.layer_norm(&self.ln_t_gain, &self.ln_t_bias, 1, LN_EPS)?
        };
        let q = q_in.matmul_t(&self.time.w_q)?;
        let k_all = kv_src.matmul_t(&self.time.w_k)?;
        let v_all = kv_src.matmul_t(&self.time.w_v)?;
        counter.add(n, f);
        // each patch attends its own track: the same spatial index across
        // the cached frames and the current one (frame-major layout)
        let mut time_records = Vec::with_capacity(self.heads);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (y, a) = Tensor::track_attention(
                &q.narrow(1, h * d_k, d_k)?,
                &k_all.narrow(1, h * d_k, d_k)?,
                &v_all.narrow(1, h * d_k, d_k)?,
                n,
                f,
            )?;
            time_records.push(AttentionRecord {
                layer: 0,
                head: h,
                q_len: n,
                k_len: f,
                probs: a.to_vec(),
            });
            heads_out.push(y);
        }
        let time_attn = Tensor::concat(&heads_out, 1)?.matmul_t(&self.time.w_o)?;
        let x = tokens_now.add(&time_attn)?;

        // spatial stage over the current frame
        let space = self
            .space
            .as_ref()
            .ok_or_else(|| Error::Contract("divided block missing spatial projections".into()))?;
        let s_in = x.layer_norm(&self.ln_s_gain, &self.ln_s_bias, 1, LN_EPS)?;
        let qs = s_in.matmul_t(&space.w_q)?;
        let ks = s_in.matmul_t(&space.w_k)?;
        let vs = s_in.matmul_t(&space.w_v)?;
        counter.add(n, n);
        let mut outs = Vec::with_capacity(self.heads);
        let mut space_records = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (y, a) = sdpa(
                &qs.narrow(1, h * d_k, d_k)?,
                &ks.narrow(1, h * d_k, d_k)?,
                &vs.narrow(1, h * d_k, d_k)?,
                None,
            )?;
            space_records.push(AttentionRecord {
                layer: 0,
                head: h,
                q_len: n,
                k_len: n,
                probs: a.to_vec(),
            });
            outs.push(y);
        }
        let space_attn = Tensor::concat(&outs, 1)?.matmul_t(&space.w_o)?;
        let x = x.add(&space_attn)?;
        let out = self.mlp_sub(&x)?;
        let mut records = time_records;
        records.extend(space_records);
        Ok((out, records))
    }

    pub fn forward(
        &self,
        tokens_now: &Tensor,
        cached: &[Tensor],
        counter: &mut ComparisonCounter,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        match self.scheme {
            AttentionScheme::Joint => self.forward_joint(tokens_now, cached, counter),
            AttentionScheme::Divided => self.forward_divided(tokens_now, cached, counter),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.time.collect(&format!("{prefix}.time"), out);
        if let Some(space) = &self.space {
            space.collect(&format!("{prefix}.space"), out);
        }
        self.mlp1.collect_params(&format!("{prefix}.mlp1"), out);
        self.mlp2.collect_params(&format!("{prefix}.mlp2"), out);
        for (name, t) in [
            ("ln_t_gain", &self.ln_t_gain),
            ("ln_t_bias", &self.ln_t_bias),
            ("ln_s_gain", &self.ln_s_gain),
            ("ln_s_bias", &self.ln_s_bias),
            ("ln_m_gain", &self.ln_m_gain),
            ("ln_m_bias", &self.ln_m_bias),
        ] {
            if self.scheme == AttentionScheme::Joint && name.starts_with("ln_s") {
                continue;
            }
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

// ── TimeSformer policy core ──────────────────────────────────────────

pub struct TimesformerConfig {
    pub in_channels: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub patch_size: usize,
    pub emb_size: usize,
    pub n_layer: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub scheme: AttentionScheme,
    pub hybrid: bool,
    pub vision_widths: Vec<usize>,
    pub mem_len: usize,
    pub max_frames: usize,
    pub d_shrink: usize,
    pub actions: usize,
}

pub struct TimesformerCore {
    pub embedder: PatchEmbedder,
    pub blocks: Vec<SpaceTimeBlock>,
    pub temporal_pos: Tensor, // [max_frames × emb], trainable
    pub shrink: Linear,       // N·emb → d_shrink
    pub policy_head: Linear,  // (d_shrink + 1 + A) → A
    pub value_head: Linear,
    pub mem_len: usize,
    pub actions: usize,
}

pub struct TimesformerOut {
    pub logits: Tensor,   // [T × A]
    pub baseline: Tensor, // [T]
    pub state: FrameCache,
    pub records: Vec<AttentionRecord>,
    pub comparisons: u64,
}

impl TimesformerCore {
    pub fn new(cfg: &TimesformerConfig, rng: &mut impl Rng) -> Result<TimesformerCore> {
        let embedder = if cfg.hybrid {
            PatchEmbedder::hybrid(
                cfg.in_channels,
                cfg.frame_h,
                cfg.frame_w,
                &cfg.vision_widths,
                cfg.emb_size,
                rng,
            )?
        } else {
            PatchEmbedder::plain(
                cfg.in_channels,
                cfg.frame_h,
                cfg.frame_w,
                cfg.patch_size,
                cfg.emb_size,
                rng,
            )?
        };
        let blocks = (0..cfg.n_layer)
            .map(|_| SpaceTimeBlock::new(cfg.scheme, cfg.emb_size, cfg.heads, cfg.mlp_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let n = embedder.n_tokens;
        Ok(TimesformerCore {
            embedder,
            blocks,
            temporal_pos: gaussian_encoding(&[cfg.max_frames, cfg.emb_size], POS_SIGMA, rng)?,
            shrink: Linear::new(n * cfg.emb_size, cfg.d_shrink, rng),
            policy_head: Linear::new(cfg.d_shrink + 1 + cfg.actions, cfg.actions, rng),
            value_head: Linear::new(cfg.d_shrink + 1 + cfg.actions, 1, rng),
            mem_len: cfg.mem_len,
            actions: cfg.actions,
        })
    }

    pub fn state_init(&self) -> FrameCache {
        FrameCache::empty(self.blocks.len())
    }

    /// Frames are processed one at a time against the cache; outputs are
    /// drawn from every frame (no classification token).
    pub fn forward_chunk(
        &self,
        frames: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        state: &FrameCache,
    ) -> Result<TimesformerOut> {
        let t = frames.len();
        if prev_rewards.len() != t || prev_logits.shape() != [t, self.actions] {
            return Err(Error::shape(
                "timesformer_core_forward",
                format!("{t} frames, {} rewards, logits {:?}", prev_rewards.len(), prev_logits.shape()),
            ));
        }
        let mut cache = state.clone();
        let mut counter = ComparisonCounter::default();
        let mut logits_rows = Vec::with_capacity(t);
        let mut baseline_rows = Vec::with_capacity(t);
        let mut records = Vec::new();
        let max_frames = self.temporal_pos.shape()[0];
        for (step, frame) in frames.iter().enumerate() {
            let tokens = self.embedder.forward(frame)?;
            let t_pos = self
                .temporal_pos
                .narrow(0, cache.frame_pos.min(max_frames - 1), 1)?
                .reshape(&[self.embedder.emb])?;
            let mut x = tokens.add_rows(&t_pos)?;
            for (l, block) in self.blocks.iter().enumerate() {
                let cached = cache.layers[l].clone();
                cache.push(l, x.clone(), self.mem_len);
                let (out, mut recs) = block.forward(&x, &cached, &mut counter)?;
                for r in &mut recs {
                    r.layer = l;
                }
                records.extend(recs);
                x = out;
            }
            cache.frame_pos += 1;
            let flat = x.reshape(&[1, self.embedder.n_tokens * self.embedder.emb])?;
            let shrunk = self.shrink.forward(&flat)?;
            let head_in = Tensor::concat(
                &[
                    shrunk,
                    Tensor::from_vec(vec![prev_rewards[step]], &[1, 1])?,
                    prev_logits.narrow(0, step, 1)?,
                ],
                1,
            )?;
            logits_rows.push(self.policy_head.forward(&head_in)?);
            baseline_rows.push(self.value_head.forward(&head_in)?);
        }
        Ok(TimesformerOut {
            logits: Tensor::concat(&logits_rows, 0)?,
            baseline: Tensor::concat(&baseline_rows, 0)?.reshape(&[t])?,
            state: cache,
            records,
            comparisons: counter.scores,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.embedder.collect_params(&format!("{prefix}.embedder"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.temporal_pos"), self.temporal_pos.clone()));
        self.shrink.collect_params(&format!("{prefix}.shrink"), out);
        self.policy_head.collect_params(&format!("{prefix}.policy_head"), out);
        self.value_head.collect_params(&format!("{prefix}.value_head"), out);
    }
}

// ── Scheme comparison bench ──────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub n: usize,
    pub f: usize,
    pub divided_scores: u64,
    pub joint_scores: u64,
    pub divided_secs: f64,
    pub joint_secs: f64,
}

/// Time and count one forward pass of a divided vs a joint block for each
/// (N, F) in the grid: a single current frame of N tokens attending over
/// F−1 cached frames. Wall-clock is the best of `repeats` runs.
pub fn bench_attention(
    grid_n: &[usize],
    grid_f: &[usize],
    emb: usize,
    heads: usize,
    repeats: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &n in grid_n {
        for &f in grid_f {
            if f == 0 {
                return Err(Error::Contract("bench needs F >= 1".into()));
            }
            let divided = SpaceTimeBlock::new(AttentionScheme::Divided, emb, heads, 2 * emb, rng)?;
            let joint = SpaceTimeBlock::new(AttentionScheme::Joint, emb, heads, 2 * emb, rng)?;
            let tokens = Tensor::rand_uniform(&[n, emb], -1.0, 1.0, rng);
            let cached: Vec<Tensor> =
                (0..f - 1).map(|_| Tensor::rand_uniform(&[n, emb], -1.0, 1.0, rng)).collect();
            let mut divided_scores = 0;
            let mut joint_scores = 0;
            let mut divided_secs = f64::INFINITY;
            let mut joint_secs = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let mut counter = ComparisonCounter::default();
                let started = std::time::Instant::now();
                crate::tensor::tape::no_grad(|| divided.forward(&tokens, &cached, &mut counter))?;
                divided_secs = divided_secs.min(started.elapsed().as_secs_f64());
                divided_scores = counter.scores;

                let mut counter = ComparisonCounter::default();
                let started = std::time::Instant::now();
                crate::tensor::tape::no_grad(|| joint.forward(&tokens, &cached, &mut counter))?;
                joint_secs = joint_secs.min(started.elapsed().as_secs_f64());
                joint_scores = counter.scores;
            }
            rows.push(BenchRow { n, f, divided_scores, joint_scores, divided_secs, joint_secs });
        }
    }
    Ok(rows)
}
