//! Mott-style spatial attention: a fixed Fourier spatial basis, query
//! network, spatial softmax, answer vectors, and an LSTM policy core — plus
//! the combined spatio-temporal core that swaps the LSTM for Transformer-XL,
//! in sequential and one-shot (actor-cached query) variants.

use rand::Rng;

use crate::attention::{txl_segment_forward, AttentionRecord, EncoderBlock, TxlMemory};
use crate::error::{Error, Result};
use crate::layers::{sinusoidal_encoding, Linear, LstmCell, VisionNet};
use crate::tensor::Tensor;

// ── Spatial basis ────────────────────────────────────────────────────

/// Fixed (non-trainable) spatial basis: all outer products of the even
/// (cosine, frequencies 0..U-1) and odd (sine, frequencies 1..=V) 1-D bases,
/// giving (U+V)² channels. Stored channels-last as [h·w × c_S].
pub struct SpatialBasis {
    pub values: Tensor,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

pub fn build_spatial_basis(h: usize, w: usize, u: usize, v: usize) -> SpatialBasis {
    let funcs = |n: usize, i: usize| -> Vec<f64> {
        // U cosines then V sines evaluated at grid position i of extent n
        let x = std::f64::consts::PI * i as f64 / n as f64;
        let mut out = Vec::with_capacity(u + v);
        for f in 0..u {
            out.push((f as f64 * x).cos());
        }
        for f in 1..=v {
            out.push((f as f64 * x).sin());
        }
        out
    };
    let per_axis = u + v;
    let channels = per_axis * per_axis;
    let mut data = vec![0.0; h * w * channels];
    for i in 0..h {
        let fi = funcs(h, i);
        for j in 0..w {
            let fj = funcs(w, j);
            let cell = (i * w + j) * channels;
            for a in 0..per_axis {
                for b in 0..per_axis {
                    data[cell + a * per_axis + b] = fi[a] * fj[b];
                }
            }
        }
    }
    SpatialBasis {
        values: Tensor::from_vec(data, &[h * w, channels]).expect("basis shape"),
        h,
        w,
        channels,
    }
}

// ── Spatial attention math ───────────────────────────────────────────

/// Inner product of each query with every spatial cell of the augmented keys,
/// then softmax over all (i,j): maps[n] is a probability distribution over
/// the h·w cells. keys_aug: [h·w × c], queries: [H × c].
pub fn spatial_attention(keys_aug: &Tensor, queries: &Tensor) -> Result<Tensor> {
    if keys_aug.shape().len() != 2
        || queries.shape().len() != 2
        || keys_aug.shape()[1] != queries.shape()[1]
    {
        return Err(Error::shape(
            "spatial_attention",
            format!("keys {:?} vs queries {:?}", keys_aug.shape(), queries.shape()),
        ));
    }
    queries.matmul(&keys_aug.t()?)?.softmax(1)
}

/// Attention-weighted spatial sum: answers[n,c] = Σ_ij maps[n,ij]·values[ij,c].
pub fn answer_vectors(maps: &Tensor, values_aug: &Tensor) -> Result<Tensor> {
    if maps.shape().len() != 2
        || values_aug.shape().len() != 2
        || maps.shape()[1] != values_aug.shape()[0]
    {
        return Err(Error::shape(
            "answer_vectors",
            format!("maps {:?} vs values {:?}", maps.shape(), values_aug.shape()),
        ));
    }
    maps.matmul(values_aug)
}

// ── Mott core ────────────────────────────────────────────────────────

pub struct MottConfig {
    pub in_channels: usize,
    pub vision_widths: Vec<usize>,
    pub frame_h: usize,
    pub frame_w: usize,
    pub u: usize,
    pub v: usize,
    pub heads: usize,
    pub lstm_hidden: usize,
    pub answer_hidden: usize,
    pub actions: usize,
}

/// LSTM state plus the previous core output that seeds the next queries.
#[derive(Clone)]
pub struct MottState {
    pub h: Tensor,
    pub c: Tensor,
    pub prev_out: Tensor,
}

pub struct MottCore {
    pub vision: VisionNet,
    pub basis: SpatialBasis,
    pub query_mlp1: Linear,
    pub query_mlp2: Linear,
    pub answer_mlp1: Linear,
    pub answer_mlp2: Linear,
    pub lstm: LstmCell,
    pub policy_head: Linear,
    pub value_head: Linear,
    pub heads: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub actions: usize,
}

impl MottCore {
    pub fn new(cfg: &MottConfig, rng: &mut impl Rng) -> Result<MottCore> {
        let vision = VisionNet::new(cfg.in_channels, &cfg.vision_widths, rng);
        let down = vision.downscale();
        if cfg.frame_h % down != 0 || cfg.frame_w % down != 0 {
            return Err(Error::Contract(format!(
                "frame {}x{} not divisible by vision downscale {down}",
                cfg.frame_h, cfg.frame_w
            )));
        }
        let (h, w) = (cfg.frame_h / down, cfg.frame_w / down);
        let c = vision.out_channels();
        // equal split when unconfigured; only c_k + c_v = c is required
        let c_k = c / 2;
        let c_v = c - c_k;
        let basis = build_spatial_basis(h, w, cfg.u, cfg.v);
        let c_s = basis.channels;
        let q_width = cfg.heads * (c_s + c_k);
        let q_hidden = 2 * q_width;
        let ans_in = cfg.heads * (c_v + c_s) + q_width + 1 + cfg.actions;
        Ok(MottCore {
            vision,
            basis,
            query_mlp1: Linear::new(cfg.lstm_hidden, q_hidden, rng),
            query_mlp2: Linear::new(q_hidden, q_width, rng),
            answer_mlp1: Linear::new(ans_in, cfg.answer_hidden, rng),
            answer_mlp2: Linear::new(cfg.answer_hidden, cfg.answer_hidden, rng),
            lstm: LstmCell::new(cfg.answer_hidden, cfg.lstm_hidden, rng),
            policy_head: Linear::new(cfg.lstm_hidden, cfg.actions, rng),
            value_head: Linear::new(cfg.lstm_hidden, 1, rng),
            heads: cfg.heads,
            c_k,
            c_v,
            actions: cfg.actions,
        })
    }

    pub fn state_init(&self) -> MottState {
        let hidden = self.lstm.hidden;
        MottState {
            h: Tensor::zeros(&[1, hidden]),
            c: Tensor::zeros(&[1, hidden]),
            prev_out: Tensor::zeros(&[1, hidden]),
        }
    }

    /// Vision → split keys/values → concat spatial basis, channels-last.
    fn encode(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let feat = self.vision.forward(frames)?;
        let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
        let cells = feat.permute(&[1, 2, 0])?.reshape(&[h * w, c])?;
        let keys = cells.narrow(1, 0, self.c_k)?;
        let values = cells.narrow(1, self.c_k, self.c_v)?;
        let keys_aug = Tensor::concat(&[keys, self.basis.values.clone()], 1)?;
        let values_aug = Tensor::concat(&[values, self.basis.values.clone()], 1)?;
        Ok((keys_aug, values_aug))
    }

    fn queries_from(&self, seed: &Tensor) -> Result<Tensor> {
        let q = self.query_mlp2.forward(&self.query_mlp1.forward(seed)?.relu())?;
        let c = q.numel() / self.heads;
        q.reshape(&[self.heads, c])
    }

    /// One timestep. frames: [C,H,W]; prev_logits: [A]; returns the policy
    /// logits [A], baseline scalar, next state, and spatial maps [H × h·w].
    pub fn step(
        &self,
        frames: &Tensor,
        prev_reward: f64,
        prev_logits: &Tensor,
        state: &MottState,
    ) -> Result<(Tensor, Tensor, MottState, Tensor)> {
        let (keys_aug, values_aug) = self.encode(frames)?;
        let queries = self.queries_from(&state.prev_out)?;
        let maps = spatial_attention(&keys_aug, &queries)?;
        let answers = answer_vectors(&maps, &values_aug)?;
        let ans_flat = answers.reshape(&[1, answers.numel()])?;
        let q_flat = queries.reshape(&[1, queries.numel()])?;
        let reward = Tensor::from_vec(vec![prev_reward], &[1, 1])?;
        let logits_in = prev_logits.reshape(&[1, prev_logits.numel()])?;
        let core_in = Tensor::concat(&[ans_flat, q_flat, reward, logits_in], 1)?;
        let processed = self.answer_mlp2.forward(&self.answer_mlp1.forward(&core_in)?.relu())?;
        let (h, c) = self.lstm.step(&processed, &state.h, &state.c)?;
        let logits = self.policy_head.forward(&h)?.reshape(&[self.actions])?;
        let baseline = self.value_head.forward(&h)?.reshape(&[])?;
        let new_state = MottState { h: h.clone(), c, prev_out: h };
        Ok((logits, baseline, new_state, maps))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.vision.collect_params(&format!("{prefix}.vision"), out);
        self.query_mlp1.collect_params(&format!("{prefix}.query_mlp1"), out);
        self.query_mlp2.collect_params(&format!("{prefix}.query_mlp2"), out);
        self.answer_mlp1.collect_params(&format!("{prefix}.answer_mlp1"), out);
        self.answer_mlp2.collect_params(&format!("{prefix}.answer_mlp2"), out);
        self.lstm.collect_params(&format!("{prefix}.lstm"), out);
        self.policy_head.collect_params(&format!("{prefix}.policy_head"), out);
        self.value_head.collect_params(&format!("{prefix}.value_head"), out);
    }
}

// ── Spatio-temporal core ─────────────────────────────────────────────

/// Where spatial-attention query seeds come from during learner chunks:
/// the core's own previous output (sequential) or per-step seeds recorded by
/// the actor (one-shot).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySource {
    Sequential,
    ActorCached,
}

pub struct SpTempConfig {
    pub in_channels: usize,
    pub vision_widths: Vec<usize>,
    pub frame_h: usize,
    pub frame_w: usize,
    pub u: usize,
    pub v: usize,
    pub heads: usize,
    pub d_model: usize,
    pub attn_heads: usize,
    pub n_layer: usize,
    pub mlp_hidden: usize,
    pub mem_len: usize,
    pub max_pos: usize,
    pub actions: usize,
    pub query_source: QuerySource,
}

#[derive(Clone)]
pub struct SpTempState {
    pub mem: TxlMemory,
    pub prev_out: Tensor, // [1 × d_model], seeds the next step's queries
}

pub struct SpatioTemporalCore {
    pub vision: VisionNet,
    pub basis: SpatialBasis,
    pub query_mlp1: Linear,
    pub query_mlp2: Linear,
    pub input_proj: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub pos_table: Tensor,
    pub policy_head: Linear,
    pub value_head: Linear,
    pub heads: usize,
    pub c_k: usize,
    pub c_v: usize,
    pub mem_len: usize,
    pub actions: usize,
    pub query_source: QuerySource,
}

pub struct SpTempChunkOut {
    pub logits: Tensor,   // [T × A]
    pub baseline: Tensor, // [T]
    pub state: SpTempState,
    pub maps: Vec<Tensor>, // per step [H × h·w]
    pub records: Vec<AttentionRecord>,
}

impl SpatioTemporalCore {
    pub fn new(cfg: &SpTempConfig, rng: &mut impl Rng) -> Result<SpatioTemporalCore> {
        let vision = VisionNet::new(cfg.in_channels, &cfg.vision_widths, rng);
        let down = vision.downscale();
        if cfg.frame_h % down != 0 || cfg.frame_w % down != 0 {
            return Err(Error::Contract(format!(
                "frame {}x{} not divisible by vision downscale {down}",
                cfg.frame_h, cfg.frame_w
            )));
        }
        let (h, w) = (cfg.frame_h / down, cfg.frame_w / down);
        let c = vision.out_channels();
        let c_k = c / 2;
        let c_v = c - c_k;
        let basis = build_spatial_basis(h, w, cfg.u, cfg.v);
        let c_s = basis.channels;
        let q_width = cfg.heads * (c_s + c_k);
        let q_hidden = 2 * q_width;
        let in_width = cfg.heads * (c_v + c_s) + q_width + 1 + cfg.actions;
        let blocks = (0..cfg.n_layer)
            .map(|_| EncoderBlock::new(cfg.d_model, cfg.attn_heads, cfg.mlp_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SpatioTemporalCore {
            vision,
            basis,
            query_mlp1: Linear::new(cfg.d_model, q_hidden, rng),
            query_mlp2: Linear::new(q_hidden, q_width, rng),
            input_proj: Linear::new(in_width, cfg.d_model, rng),
            blocks,
            pos_table: sinusoidal_encoding(cfg.max_pos, cfg.d_model)?.with_grad(),
            policy_head: Linear::new(cfg.d_model, cfg.actions, rng),
            value_head: Linear::new(cfg.d_model, 1, rng),
            heads: cfg.heads,
            c_k,
            c_v,
            mem_len: cfg.mem_len,
            actions: cfg.actions,
            query_source: cfg.query_source,
        })
    }

    pub fn state_init(&self) -> SpTempState {
        let d = self.blocks[0].d_model();
        SpTempState {
            mem: TxlMemory::empty(self.blocks.len(), d),
            prev_out: Tensor::zeros(&[1, d]),
        }
    }

    pub fn set_query_source(&mut self, source: QuerySource) {
        self.query_source = source;
    }

    fn encode(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        let feat = self.vision.forward(frames)?;
        let (c, h, w) = (feat.shape()[0], feat.shape()[1], feat.shape()[2]);
        let cells = feat.permute(&[1, 2, 0])?.reshape(&[h * w, c])?;
        let keys = cells.narrow(1, 0, self.c_k)?;
        let values = cells.narrow(1, self.c_k, self.c_v)?;
        let keys_aug = Tensor::concat(&[keys, self.basis.values.clone()], 1)?;
        let values_aug = Tensor::concat(&[values, self.basis.values.clone()], 1)?;
        Ok((keys_aug, values_aug))
    }

    fn queries_from(&self, seeds: &Tensor) -> Result<Tensor> {
        // seeds: [T × d_model] → [T × H·(c_S+c_K)]
        self.query_mlp2.forward(&self.query_mlp1.forward(seeds)?.relu())
    }

    /// Per-step spatial attention followed by one transformer pass over the
    /// whole chunk. In sequential mode each timestep's queries come from the
    /// previous core output, so the chunk is processed one step at a time; in
    /// actor-cached mode `seeds` supplies all query seeds up front and the
    /// temporal pass runs in one shot.
    pub fn forward_chunk(
        &self,
        frames: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        seeds: Option<&Tensor>,
        state: &SpTempState,
    ) -> Result<SpTempChunkOut> {
        let t = frames.len();
        if prev_rewards.len() != t || prev_logits.shape() != [t, self.actions] {
            return Err(Error::shape(
                "spatio_temporal_step",
                format!("{t} frames, {} rewards, logits {:?}", prev_rewards.len(), prev_logits.shape()),
            ));
        }
        match self.query_source {
            QuerySource::ActorCached => {
                let seeds = seeds.ok_or_else(|| {
                    Error::Contract("actor_cached mode requires query seeds in the rollout".into())
                })?;
                if seeds.shape() != [t, self.blocks[0].d_model()] {
                    return Err(Error::shape(
                        "spatio_temporal_step",
                        format!("seeds {:?} for chunk {t}", seeds.shape()),
                    ));
                }
                self.chunk_with_seeds(frames, prev_rewards, prev_logits, seeds, state)
            }
            QuerySource::Sequential => {
                let mut state = state.clone();
                let mut logits_rows = Vec::with_capacity(t);
                let mut baseline_rows = Vec::with_capacity(t);
                let mut maps_all = Vec::with_capacity(t);
                let mut records_all = Vec::new();
                for step in 0..t {
                    let seed = state.prev_out.clone();
                    let out = self.chunk_with_seeds(
                        &frames[step..step + 1],
                        &prev_rewards[step..step + 1],
                        &prev_logits.narrow(0, step, 1)?,
                        &seed,
                        &state,
                    )?;
                    state = out.state;
                    logits_rows.push(out.logits);
                    baseline_rows.push(out.baseline);
                    maps_all.extend(out.maps);
                    records_all.extend(out.records);
                }
                let logits = Tensor::concat(&logits_rows, 0)?;
                let baseline = Tensor::concat(&baseline_rows, 0)?;
                Ok(SpTempChunkOut { logits, baseline, state, maps: maps_all, records: records_all })
            }
        }
    }

    fn chunk_with_seeds(
        &self,
        frames: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        seeds: &Tensor,
        state: &SpTempState,
    ) -> Result<SpTempChunkOut> {
        let t = frames.len();
        let queries_all = self.queries_from(seeds)?; // [T × H·(cs+ck)]
        let q_width = queries_all.shape()[1] / self.heads;
        let mut step_inputs = Vec::with_capacity(t);
        let mut maps_all = Vec::with_capacity(t);
        for (step, frame) in frames.iter().enumerate() {
            let (keys_aug, values_aug) = self.encode(frame)?;
            let queries = queries_all.narrow(0, step, 1)?.reshape(&[self.heads, q_width])?;
            let maps = spatial_attention(&keys_aug, &queries)?;
            let answers = answer_vectors(&maps, &values_aug)?;
            let row = Tensor::concat(
                &[
                    answers.reshape(&[1, answers.numel()])?,
                    queries.reshape(&[1, queries.numel()])?,
                    Tensor::from_vec(vec![prev_rewards[step]], &[1, 1])?,
                    prev_logits.narrow(0, step, 1)?,
                ],
                1,
            )?;
            step_inputs.push(row);
            maps_all.push(maps);
        }
        let joined = Tensor::concat(&step_inputs, 0)?;
        let x = self.input_proj.forward(&joined)?;
        let (out, new_mem, records) =
            txl_segment_forward(&self.blocks, &x, &state.mem, &self.pos_table, self.mem_len)?;
        let logits = self.policy_head.forward(&out)?;
        let baseline = self.value_head.forward(&out)?.reshape(&[t])?;
        let prev_out = out.narrow(0, t - 1, 1)?;
        Ok(SpTempChunkOut {
            logits,
            baseline,
            state: SpTempState { mem: new_mem, prev_out },
            maps: maps_all,
            records,
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.vision.collect_params(&format!("{prefix}.vision"), out);
        self.query_mlp1.collect_params(&format!("{prefix}.query_mlp1"), out);
        self.query_mlp2.collect_params(&format!("{prefix}.query_mlp2"), out);
        self.input_proj.collect_params(&format!("{prefix}.input_proj"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        out.push((format!("{prefix}.pos_table"), self.pos_table.clone()));
        self.policy_head.collect_params(&format!("{prefix}.policy_head"), out);
        self.value_head.collect_params(&format!("{prefix}.value_head"), out);
    }
}
