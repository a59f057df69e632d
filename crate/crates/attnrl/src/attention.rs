//! Scaled dot-product and multi-head attention, causal masking, the pre-LN
//! encoder block, Transformer-XL segment recurrence, and the Adaptive
//! (Transformer-XL) policy core.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{init_weight, sinusoidal_encoding, Linear};
use crate::tensor::Tensor;

/// Boolean attention mask; true = query may attend to key.
#[derive(Clone)]
pub struct AttentionMask {
    pub q_len: usize,
    pub k_len: usize,
    pub allow: Vec<bool>, // [q_len × k_len]
}

/// Forward mask over a key range that may include a memory prefix:
/// query i may attend key j iff j ≤ i + (k_len − q_len). The prefix of
/// k_len − q_len memory tokens is fully visible to every query.
pub fn causal_mask(q_len: usize, k_len: usize) -> Result<AttentionMask> {
    if k_len < q_len {
        return Err(Error::Contract(format!(
            "causal_mask requires k_len >= q_len, got q_len={q_len}, k_len={k_len}"
        )));
    }
    let offset = k_len - q_len;
    let mut allow = vec![false; q_len * k_len];
    for i in 0..q_len {
        for j in 0..k_len {
            allow[i * k_len + j] = j <= i + offset;
        }
    }
    Ok(AttentionMask { q_len, k_len, allow })
}

/// Per-head attention probabilities captured during a forward pass.
/// Each query row sums to 1.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub probs: Vec<f64>, // [q_len × k_len], row-major
}

const MASK_FILL: f64 = -1e30;

/// Scaled dot-product attention: A = softmax(QKᵀ/√d_k), Y = A·V.
/// Masked logits are filled with -1e30 before the (max-shifted) softmax,
/// which yields exactly zero probability in 64-bit arithmetic.
pub fn sdpa(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor, Tensor)> {
    let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::shape(
            "sdpa",
            format!("Q {sq:?}, K {sk:?}, V {sv:?}"),
        ));
    }
    let d_k = sq[1] as f64;
    let mut logits = q.matmul_t(&k)?.mul_scalar(1.0 / d_k.sqrt());
    if let Some(m) = mask {
        if m.q_len != sq[0] || m.k_len != sk[0] {
            return Err(Error::shape(
                "sdpa",
                format!("mask {}x{} vs scores {}x{}", m.q_len, m.k_len, sq[0], sk[0]),
            ));
        }
        for i in 0..m.q_len {
            if !m.allow[i * m.k_len..(i + 1) * m.k_len].iter().any(|&a| a) {
                return Err(Error::Contract(format!("sdpa: query row {i} is fully masked")));
            }
        }
        logits = logits.masked_fill(&m.allow, MASK_FILL)?;
    }
    let probs = logits.softmax(1)?;
    let y = probs.matmul(v)?;
    Ok((y, probs))
}

// ── Multi-head attention ─────────────────────────────────────────────

/// Multi-head attention with bias-free d_model×d_model projections.
pub struct MultiHeadAttention {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<MultiHeadAttention> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {d_model} not divisible by heads {heads}"
            )));
        }
        Ok(MultiHeadAttention {
            w_q: init_weight(&[d_model, d_model], d_model, rng),
            w_k: init_weight(&[d_model, d_model], d_model, rng),
            w_v: init_weight(&[d_model, d_model], d_model, rng),
            w_o: init_weight(&[d_model, d_model], d_model, rng),
            heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// x_q: [Tq×d], x_kv: [Tk×d]. Projects, runs per-head sdpa on the split
    /// slices, concatenates heads and applies the output projection.
    pub fn forward(
        &self,
        x_q: &Tensor,
        x_kv: &Tensor,
        mask: Option<&AttentionMask>,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        if x_q.shape().len() != 2 || x_q.shape()[1] != self.d_model
            || x_kv.shape().len() != 2 || x_kv.shape()[1] != self.d_model
        {
            return Err(Error::shape(
                "mha_forward",
                format!("inputs {:?}, {:?} vs d_model {}", x_q.shape(), x_kv.shape(), self.d_model),
            ));
        }
        let q = x_q.matmul_t(&self.w_q)?;
        let k = x_kv.matmul_t(&self.w_k)?;
        let v = x_kv.matmul_t(&self.w_v)?;
        let d_k = self.d_k();
        let mut outs = Vec::with_capacity(self.heads);
        let mut records = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.narrow(1, h * d_k, d_k)?,
                k.narrow(1, h * d_k, d_k)?,
                v.narrow(1, h * d_k, d_k)?,
            );
            let (y, a) = sdpa(&qh, &kh, &vh, mask)?;
            records.push(AttentionRecord {
                layer: 0,
                head: h,
                q_len: a.shape()[0],
                k_len: a.shape()[1],
                probs: a.to_vec(),
            });
            outs.push(y);
        }
        let concat = Tensor::concat(&outs, 1)?;
        Ok((concat.matmul_t(&self.w_o)?, records))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (name, t) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            out.push((format!("{prefix}.{name}"), t.clone()));
        }
    }
}

// ── Pre-LN encoder block ─────────────────────────────────────────────

/// Pre-LN transformer encoder block: x + MHA(LN(x)), then x + MLP(LN(x)),
/// with GELU between the two MLP linears. With all block weights zeroed the
/// block is the identity map.
pub struct EncoderBlock {
    pub mha: MultiHeadAttention,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl EncoderBlock {
    pub fn new(d_model: usize, heads: usize, mlp_hidden: usize, rng: &mut impl Rng) -> Result<EncoderBlock> {
        Ok(EncoderBlock {
            mha: MultiHeadAttention::new(d_model, heads, rng)?,
            mlp1: Linear::new(d_model, mlp_hidden, rng),
            mlp2: Linear::new(mlp_hidden, d_model, rng),
            ln1_gain: Tensor::ones(&[d_model]).with_grad(),
            ln1_bias: Tensor::zeros(&[d_model]).with_grad(),
            ln2_gain: Tensor::ones(&[d_model]).with_grad(),
            ln2_bias: Tensor::zeros(&[d_model]).with_grad(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.mha.d_model
    }

    /// `memory`, when present, extends keys/values in front of the segment.
    pub fn forward(
        &self,
        x: &Tensor,
        memory: Option<&Tensor>,
        mask: Option<&AttentionMask>,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let q_in = x.layer_norm(&self.ln1_gain, &self.ln1_bias, 1, LN_EPS)?;
        let kv_in = match memory {
            Some(mem) if mem.shape()[0] > 0 => {
                let full = Tensor::concat(&[mem.clone(), x.clone()], 0)?;
                full.layer_norm(&self.ln1_gain, &self.ln1_bias, 1, LN_EPS)?
            }
            _ => q_in.clone(),
        };
        let (attn, records) = self.mha.forward(&q_in, &kv_in, mask)?;
        let x = x.add(&attn)?;
        let h = x.layer_norm(&self.ln2_gain, &self.ln2_bias, 1, LN_EPS)?;
        let mlp = self.mlp2.forward(&self.mlp1.forward(&h)?.gelu())?;
        Ok((x.add(&mlp)?, records))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mha.collect_params(&format!("{prefix}.mha"), out);
        self.mlp1.collect_params(&format!("{prefix}.mlp1"), out);
        self.mlp2.collect_params(&format!("{prefix}.mlp2"), out);
        out.push((format!("{prefix}.ln1_gain"), self.ln1_gain.clone()));
        out.push((format!("{prefix}.ln1_bias"), self.ln1_bias.clone()));
        out.push((format!("{prefix}.ln2_gain"), self.ln2_gain.clone()));
        out.push((format!("{prefix}.ln2_bias"), self.ln2_bias.clone()));
    }
}

// ── Transformer-XL segment recurrence ────────────────────────────────

/// Per-layer cached hidden-state sequences, always detached, plus the global
/// position of the next token. Cached tensors never receive gradient.
#[derive(Clone)]
pub struct TxlMemory {
    pub layers: Vec<Tensor>, // each [len × d_model]
    pub pos: usize,
}

impl TxlMemory {
    pub fn empty(n_layers: usize, d_model: usize) -> TxlMemory {
        TxlMemory {
            layers: (0..n_layers).map(|_| Tensor::zeros(&[0, d_model])).collect(),
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map(|t| t.shape()[0]).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Rows `start..start+len` of the positional table, clamping indices past the
/// end to the last row so unboundedly long episodes stay well defined.
pub fn position_rows(table: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let max_pos = table.shape()[0];
    let clamped_start = start.min(max_pos - 1);
    let in_range = (max_pos - clamped_start).min(len);
    let mut parts = vec![table.narrow(0, clamped_start, in_range)?];
    for _ in in_range..len {
        parts.push(table.narrow(0, max_pos - 1, 1)?);
    }
    if parts.len() == 1 {
        Ok(parts.pop().unwrap())
    } else {
        Tensor::concat(&parts, 0)
    }
}

/// Process one segment with segment-level recurrence. Keys/values extend over
/// the cached memory; queries cover the current segment only; the forward
/// mask keeps the memory prefix fully visible. The new memory holds the last
/// `mem_len` rows of each layer's input sequence, detached.
pub fn txl_segment_forward(
    blocks: &[EncoderBlock],
    segment: &Tensor,
    memory: &TxlMemory,
    pos_table: &Tensor,
    mem_len: usize,
) -> Result<(Tensor, TxlMemory, Vec<AttentionRecord>)> {
    let d = blocks
        .first()
        .map(|b| b.d_model())
        .ok_or_else(|| Error::Contract("txl_segment_forward needs at least one block".into()))?;
    let s = segment.shape();
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape(
            "txl_segment_forward",
            format!("segment {s:?} vs d_model {d}"),
        ));
    }
    if memory.layers.len() != blocks.len() {
        return Err(Error::Contract(format!(
            "memory has {} layers, blocks {}",
            memory.layers.len(),
            blocks.len()
        )));
    }
    for m in &memory.layers {
        if m.shape()[1] != d {
            return Err(Error::shape(
                "txl_segment_forward",
                format!("memory width {:?} vs d_model {d}", m.shape()),
            ));
        }
    }
    let seg_len = s[0];
    let mut x = segment.add(&position_rows(pos_table, memory.pos, seg_len)?)?;
    let mut new_layers = Vec::with_capacity(blocks.len());
    let mut records = Vec::new();
    for (l, block) in blocks.iter().enumerate() {
        let mem = &memory.layers[l];
        // cache this layer's input (with accumulated old memory), detached
        let cache_src = Tensor::concat(&[mem.clone(), x.clone()], 0)?.detach();
        let cache_len = cache_src.shape()[0];
        let kept = cache_len.min(mem_len);
        new_layers.push(cache_src.narrow(0, cache_len - kept, kept)?);

        let mask = causal_mask(seg_len, mem.shape()[0] + seg_len)?;
        let (out, mut recs) = block.forward(&x, Some(mem), Some(&mask))?;
        for r in &mut recs {
            r.layer = l;
        }
        records.extend(recs);
        x = out;
    }
    let new_memory = TxlMemory { layers: new_layers, pos: memory.pos + seg_len };
    Ok((x, new_memory, records))
}

// ── Adaptive policy core ─────────────────────────────────────────────

/// Transformer-XL policy core: encoded observations are concatenated with the
/// previous-step reward and previous-step policy logits, linearly mapped to
/// d_model, run through the masked encoder stack with cached memory, then
/// linearly mapped to policy and value heads.
pub struct AdaptiveCore {
    pub input_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub pos_table: Tensor,
    pub policy_head: Linear,
    pub value_head: Linear,
    pub mem_len: usize,
    pub actions: usize,
}

pub struct AdaptiveConfig {
    pub d_enc: usize,
    pub d_model: usize,
    pub heads: usize,
    pub n_layer: usize,
    pub mlp_hidden: usize,
    pub mem_len: usize,
    pub max_pos: usize,
    pub actions: usize,
}

impl AdaptiveCore {
    pub fn new(cfg: &AdaptiveConfig, rng: &mut impl Rng) -> Result<AdaptiveCore> {
        let blocks = (0..cfg.n_layer)
            .map(|_| EncoderBlock::new(cfg.d_model, cfg.heads, cfg.mlp_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptiveCore {
            input_proj: Linear::new(cfg.d_enc + 1 + cfg.actions, cfg.d_model, rng),
            blocks,
            // trainable, sinusoidal start
            pos_table: sinusoidal_encoding(cfg.max_pos, cfg.d_model)?.with_grad(),
            policy_head: Linear::new(cfg.d_model, cfg.actions, rng),
            value_head: Linear::new(cfg.d_model, 1, rng),
            mem_len: cfg.mem_len,
            actions: cfg.actions,
        })
    }

    pub fn state_init(&self) -> TxlMemory {
        TxlMemory::empty(self.blocks.len(), self.blocks[0].d_model())
    }

    /// encoded_obs: [T×d_enc], prev_reward: [T], prev_logits: [T×A].
    pub fn forward(
        &self,
        encoded_obs: &Tensor,
        prev_reward: &Tensor,
        prev_logits: &Tensor,
        state: &TxlMemory,
    ) -> Result<(Tensor, Tensor, TxlMemory, Vec<AttentionRecord>)> {
        let t = encoded_obs.shape()[0];
        if prev_reward.numel() != t || prev_logits.shape() != [t, self.actions] {
            return Err(Error::shape(
                "adaptive_core_forward",
                format!(
                    "obs {:?}, reward {:?}, logits {:?}",
                    encoded_obs.shape(),
                    prev_reward.shape(),
                    prev_logits.shape()
                ),
            ));
        }
        let joined = Tensor::concat(
            &[encoded_obs.clone(), prev_reward.reshape(&[t, 1])?, prev_logits.clone()],
            1,
        )?;
        let x = self.input_proj.forward(&joined)?;
        let (out, new_state, records) =
            txl_segment_forward(&self.blocks, &x, state, &self.pos_table, self.mem_len)?;
        let logits = self.policy_head.forward(&out)?;
        let baseline = self.value_head.forward(&out)?.reshape(&[t])?;
        Ok((logits, baseline, new_state, records))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input_proj.collect_params(&format!("{prefix}.input_proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.pos_table"), self.pos_table.clone()));
        self.policy_head.collect_params(&format!("{prefix}.policy_head"), out);
        self.value_head.collect_params(&format!("{prefix}.value_head"), out);
    }
}
