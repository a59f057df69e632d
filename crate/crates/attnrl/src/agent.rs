//! A uniform policy-core interface over the four architecture families
//! (six configurations), plus plain-data state snapshots so recurrent state
//! can cross thread boundaries inside rollout buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AdaptiveConfig, AdaptiveCore, AttentionRecord, TxlMemory};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::layers::{Linear, VisionNet};
use crate::mott::{MottConfig, MottCore, MottState, QuerySource, SpTempConfig, SpTempState, SpatioTemporalCore};
use crate::tensor::Tensor;
use crate::timesformer::{AttentionScheme, FrameCache, TimesformerConfig, TimesformerCore};

/// Default residual vision-net channel widths at desk scale.
pub const VISION_WIDTHS: [usize; 2] = [8, 16];

/// Per-architecture recurrent state held by one execution context.
#[derive(Clone)]
pub enum AgentState {
    Mott(MottState),
    Txl(TxlMemory),
    SpTemp(SpTempState),
    Frames(FrameCache),
}

/// Plain-data image of an AgentState; safe to store in shared buffers.
#[derive(Clone, Debug)]
pub enum StateSnapshot {
    Mott { h: Vec<f64>, c: Vec<f64>, prev_out: Vec<f64> },
    Txl { layers: Vec<(Vec<usize>, Vec<f64>)>, pos: usize },
    SpTemp { layers: Vec<(Vec<usize>, Vec<f64>)>, pos: usize, prev_out: Vec<f64> },
    Frames { layers: Vec<Vec<(Vec<usize>, Vec<f64>)>>, frame_pos: usize },
}

fn dump(t: &Tensor) -> (Vec<usize>, Vec<f64>) {
    (t.shape().to_vec(), t.to_vec())
}

fn restore((shape, data): &(Vec<usize>, Vec<f64>)) -> Tensor {
    Tensor::from_vec(data.clone(), shape).expect("snapshot shape")
}

impl AgentState {
    pub fn snapshot(&self) -> StateSnapshot {
        match self {
            AgentState::Mott(s) => StateSnapshot::Mott {
                h: s.h.to_vec(),
                c: s.c.to_vec(),
                prev_out: s.prev_out.to_vec(),
            },
            AgentState::Txl(m) => StateSnapshot::Txl {
                layers: m.layers.iter().map(dump).collect(),
                pos: m.pos,
            },
            AgentState::SpTemp(s) => StateSnapshot::SpTemp {
                layers: s.mem.layers.iter().map(dump).collect(),
                pos: s.mem.pos,
                prev_out: s.prev_out.to_vec(),
            },
            AgentState::Frames(c) => StateSnapshot::Frames {
                layers: c.layers.iter().map(|l| l.iter().map(dump).collect()).collect(),
                frame_pos: c.frame_pos,
            },
        }
    }

    pub fn from_snapshot(snap: &StateSnapshot, hidden: usize, d_model: usize) -> AgentState {
        match snap {
            StateSnapshot::Mott { h, c, prev_out } => AgentState::Mott(MottState {
                h: Tensor::from_vec(h.clone(), &[1, hidden]).expect("state shape"),
                c: Tensor::from_vec(c.clone(), &[1, hidden]).expect("state shape"),
                prev_out: Tensor::from_vec(prev_out.clone(), &[1, hidden]).expect("state shape"),
            }),
            StateSnapshot::Txl { layers, pos } => AgentState::Txl(TxlMemory {
                layers: layers.iter().map(restore).collect(),
                pos: *pos,
            }),
            StateSnapshot::SpTemp { layers, pos, prev_out } => AgentState::SpTemp(SpTempState {
                mem: TxlMemory { layers: layers.iter().map(restore).collect(), pos: *pos },
                prev_out: Tensor::from_vec(prev_out.clone(), &[1, d_model]).expect("state shape"),
            }),
            StateSnapshot::Frames { layers, frame_pos } => AgentState::Frames(FrameCache {
                layers: layers.iter().map(|l| l.iter().map(restore).collect()).collect(),
                frame_pos: *frame_pos,
            }),
        }
    }
}

/// One actor step: raw outputs plus the state to carry. `seed` is the
/// query-seed vector recorded for one-shot training, when the architecture
/// uses one.
pub struct StepOut {
    pub logits: Vec<f64>,
    pub baseline: f64,
    pub state: AgentState,
    pub seed: Option<Vec<f64>>,
}

/// One learner chunk: in-graph outputs plus carried state.
pub struct ChunkOut {
    pub logits: Tensor,   // [T × A]
    pub baseline: Tensor, // [T]
    pub state: AgentState,
}

/// Attention introspection for the visualization commands: per-head spatial
/// maps (h×w) when the architecture has them, and raw attention records.
pub struct Introspection {
    pub spatial_maps: Option<Tensor>, // [heads × h·w]
    pub map_shape: (usize, usize),
    pub records: Vec<AttentionRecord>,
}

pub trait PolicyCore {
    fn actions(&self) -> usize;
    fn state_init(&self) -> AgentState;
    fn step(&self, obs: &Tensor, prev_reward: f64, prev_logits: &[f64], state: &AgentState)
        -> Result<StepOut>;
    fn forward_chunk(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        seeds: Option<&Tensor>,
        state: &AgentState,
    ) -> Result<ChunkOut>;
    fn named_params(&self) -> Vec<(String, Tensor)>;
    /// Whether rollouts must carry per-step query seeds.
    fn wants_seeds(&self) -> bool {
        false
    }
    /// Step with attention capture, for the viz commands.
    fn step_instrumented(
        &self,
        obs: &Tensor,
        prev_reward: f64,
        prev_logits: &[f64],
        state: &AgentState,
    ) -> Result<(StepOut, Introspection)>;
}

// ── Mott ─────────────────────────────────────────────────────────────

pub struct MottAgent {
    pub core: MottCore,
    grid: (usize, usize),
}

impl MottAgent {
    fn unpack<'a>(&self, state: &'a AgentState) -> Result<&'a MottState> {
        match state {
            AgentState::Mott(s) => Ok(s),
            _ => Err(Error::Contract("wrong state kind for mott core".into())),
        }
    }
}

impl PolicyCore for MottAgent {
    fn actions(&self) -> usize {
        self.core.actions
    }

    fn state_init(&self) -> AgentState {
        AgentState::Mott(self.core.state_init())
    }

    fn step(&self, obs: &Tensor, prev_reward: f64, prev_logits: &[f64], state: &AgentState) -> Result<StepOut> {
        let s = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[prev_logits.len()])?;
        let (logits, baseline, new_state, _) = self.core.step(obs, prev_reward, &prev, s)?;
        Ok(StepOut {
            logits: logits.to_vec(),
            baseline: baseline.item(),
            state: AgentState::Mott(new_state),
            seed: None,
        })
    }

    fn forward_chunk(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        _seeds: Option<&Tensor>,
        state: &AgentState,
    ) -> Result<ChunkOut> {
        let mut s = self.unpack(state)?.clone();
        let mut logits_rows = Vec::with_capacity(obs.len());
        let mut baseline_rows = Vec::with_capacity(obs.len());
        for (t, frame) in obs.iter().enumerate() {
            let prev = prev_logits.narrow(0, t, 1)?.reshape(&[self.core.actions])?;
            let (logits, baseline, next, _) = self.core.step(frame, prev_rewards[t], &prev, &s)?;
            logits_rows.push(logits.reshape(&[1, self.core.actions])?);
            baseline_rows.push(baseline.reshape(&[1])?);
            s = next;
        }
        Ok(ChunkOut {
            logits: Tensor::concat(&logits_rows, 0)?,
            baseline: Tensor::concat(&baseline_rows, 0)?,
            state: AgentState::Mott(s),
        })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.core.collect_params("mott", &mut out);
        out
    }

    fn step_instrumented(
        &self,
        obs: &Tensor,
        prev_reward: f64,
        prev_logits: &[f64],
        state: &AgentState,
    ) -> Result<(StepOut, Introspection)> {
        let s = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[prev_logits.len()])?;
        let (logits, baseline, new_state, maps) = self.core.step(obs, prev_reward, &prev, s)?;
        Ok((
            StepOut {
                logits: logits.to_vec(),
                baseline: baseline.item(),
                state: AgentState::Mott(new_state),
                seed: None,
            },
            Introspection { spatial_maps: Some(maps), map_shape: self.grid, records: Vec::new() },
        ))
    }
}

// ── Adaptive (Transformer-XL) ────────────────────────────────────────

pub struct AdaptiveAgent {
    pub vision: VisionNet,
    pub shrink: Linear,
    pub core: AdaptiveCore,
}

impl AdaptiveAgent {
    fn unpack<'a>(&self, state: &'a AgentState) -> Result<&'a TxlMemory> {
        match state {
            AgentState::Txl(m) => Ok(m),
            _ => Err(Error::Contract("wrong state kind for adaptive core".into())),
        }
    }

    /// Vision → flatten → single-layer MLP shrink, one row per frame.
    fn encode(&self, obs: &[Tensor]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(obs.len());
        for frame in obs {
            let feat = self.vision.forward(frame)?;
            rows.push(feat.reshape(&[1, feat.numel()])?);
        }
        let flat = Tensor::concat(&rows, 0)?;
        Ok(self.shrink.forward(&flat)?.relu())
    }

    fn run(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        state: &AgentState,
    ) -> Result<(Tensor, Tensor, AgentState, Vec<AttentionRecord>)> {
        let mem = self.unpack(state)?;
        let encoded = self.encode(obs)?;
        let reward = Tensor::from_vec(prev_rewards.to_vec(), &[prev_rewards.len()])?;
        let (logits, baseline, new_mem, records) =
            self.core.forward(&encoded, &reward, prev_logits, mem)?;
        Ok((logits, baseline, AgentState::Txl(new_mem), records))
    }
}

impl PolicyCore for AdaptiveAgent {
    fn actions(&self) -> usize {
        self.core.actions
    }

    fn state_init(&self) -> AgentState {
        AgentState::Txl(self.core.state_init())
    }

    fn step(&self, obs: &Tensor, prev_reward: f64, prev_logits: &[f64], state: &AgentState) -> Result<StepOut> {
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        let (logits, baseline, new_state, _) =
            self.run(std::slice::from_ref(obs), &[prev_reward], &prev, state)?;
        Ok(StepOut {
            logits: logits.to_vec(),
            baseline: baseline.item(),
            state: new_state,
            seed: None,
        })
    }

    fn forward_chunk(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        _seeds: Option<&Tensor>,
        state: &AgentState,
    ) -> Result<ChunkOut> {
        let (logits, baseline, new_state, _) = self.run(obs, prev_rewards, prev_logits, state)?;
        Ok(ChunkOut { logits, baseline, state: new_state })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.vision.collect_params("adaptive.vision", &mut out);
        self.shrink.collect_params("adaptive.shrink", &mut out);
        self.core.collect_params("adaptive.core", &mut out);
        out
    }

    fn step_instrumented(
        &self,
        obs: &Tensor,
        prev_reward: f64,
        prev_logits: &[f64],
        state: &AgentState,
    ) -> Result<(StepOut, Introspection)> {
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        let (logits, baseline, new_state, records) =
            self.run(std::slice::from_ref(obs), &[prev_reward], &prev, state)?;
        Ok((
            StepOut {
                logits: logits.to_vec(),
                baseline: baseline.item(),
                state: new_state,
                seed: None,
            },
            Introspection { spatial_maps: None, map_shape: (0, 0), records },
        ))
    }
}

// ── Spatio-temporal (sequential and one-shot) ────────────────────────

pub struct SpTempAgent {
    pub core: SpatioTemporalCore,
    grid: (usize, usize),
}

impl SpTempAgent {
    fn unpack<'a>(&self, state: &'a AgentState) -> Result<&'a SpTempState> {
        match state {
            AgentState::SpTemp(s) => Ok(s),
            _ => Err(Error::Contract("wrong state kind for spatio-temporal core".into())),
        }
    }
}

impl PolicyCore for SpTempAgent {
    fn actions(&self) -> usize {
        self.core.actions
    }

    fn state_init(&self) -> AgentState {
        AgentState::SpTemp(self.core.state_init())
    }

    fn step(&self, obs: &Tensor, prev_reward: f64, prev_logits: &[f64], state: &AgentState) -> Result<StepOut> {
        let s = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        // acting is always sequential: this step's queries come from the
        // core's own previous output, which is also the recorded seed
        let seed = s.prev_out.to_vec();
        let out = self.core.forward_chunk(
            std::slice::from_ref(obs),
            &[prev_reward],
            &prev,
            Some(&s.prev_out),
            s,
        )?;
        Ok(StepOut {
            logits: out.logits.to_vec(),
            baseline: out.baseline.item(),
            state: AgentState::SpTemp(out.state),
            seed: if self.core.query_source == QuerySource::ActorCached {
                Some(seed)
            } else {
                None
            },
        })
    }

    fn forward_chunk(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        seeds: Option<&Tensor>,
        state: &AgentState,
    ) -> Result<ChunkOut> {
        let s = self.unpack(state)?;
        let seeds = match self.core.query_source {
            QuerySource::ActorCached => seeds,
            QuerySource::Sequential => None,
        };
        let out = self.core.forward_chunk(obs, prev_rewards, prev_logits, seeds, s)?;
        Ok(ChunkOut {
            logits: out.logits,
            baseline: out.baseline,
            state: AgentState::SpTemp(out.state),
        })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.core.collect_params("sp_temp", &mut out);
        out
    }

    fn wants_seeds(&self) -> bool {
        self.core.query_source == QuerySource::ActorCached
    }

    fn step_instrumented(
        &self,
        obs: &Tensor,
        prev_reward: f64,
        prev_logits: &[f64],
        state: &AgentState,
    ) -> Result<(StepOut, Introspection)> {
        let s = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        let seed = s.prev_out.to_vec();
        let out = self.core.forward_chunk(
            std::slice::from_ref(obs),
            &[prev_reward],
            &prev,
            Some(&s.prev_out),
            s,
        )?;
        let maps = out.maps.into_iter().next();
        Ok((
            StepOut {
                logits: out.logits.to_vec(),
                baseline: out.baseline.item(),
                state: AgentState::SpTemp(out.state),
                seed: Some(seed),
            },
            Introspection { spatial_maps: maps, map_shape: self.grid, records: out.records },
        ))
    }
}

// ── TimeSformer (divided / joint) ────────────────────────────────────

pub struct TimesformerAgent {
    pub core: TimesformerCore,
    grid: (usize, usize),
}

impl TimesformerAgent {
    fn unpack<'a>(&self, state: &'a AgentState) -> Result<&'a FrameCache> {
        match state {
            AgentState::Frames(c) => Ok(c),
            _ => Err(Error::Contract("wrong state kind for timesformer core".into())),
        }
    }
}

impl PolicyCore for TimesformerAgent {
    fn actions(&self) -> usize {
        self.core.actions
    }

    fn state_init(&self) -> AgentState {
        AgentState::Frames(self.core.state_init())
    }

    fn step(&self, obs: &Tensor, prev_reward: f64, prev_logits: &[f64], state: &AgentState) -> Result<StepOut> {
        let cache = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        let out =
            self.core.forward_chunk(std::slice::from_ref(obs), &[prev_reward], &prev, cache)?;
        Ok(StepOut {
            logits: out.logits.to_vec(),
            baseline: out.baseline.item(),
            state: AgentState::Frames(out.state),
            seed: None,
        })
    }

    fn forward_chunk(
        &self,
        obs: &[Tensor],
        prev_rewards: &[f64],
        prev_logits: &Tensor,
        _seeds: Option<&Tensor>,
        state: &AgentState,
    ) -> Result<ChunkOut> {
        let cache = self.unpack(state)?;
        let out = self.core.forward_chunk(obs, prev_rewards, prev_logits, cache)?;
        Ok(ChunkOut {
            logits: out.logits,
            baseline: out.baseline,
            state: AgentState::Frames(out.state),
        })
    }

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.core.collect_params("timesformer", &mut out);
        out
    }

    fn step_instrumented(
        &self,
        obs: &Tensor,
        prev_reward: f64,
        prev_logits: &[f64],
        state: &AgentState,
    ) -> Result<(StepOut, Introspection)> {
        let cache = self.unpack(state)?;
        let prev = Tensor::from_vec(prev_logits.to_vec(), &[1, prev_logits.len()])?;
        let out =
            self.core.forward_chunk(std::slice::from_ref(obs), &[prev_reward], &prev, cache)?;
        Ok((
            StepOut {
                logits: out.logits.to_vec(),
                baseline: out.baseline.item(),
                state: AgentState::Frames(out.state),
                seed: None,
            },
            Introspection { spatial_maps: None, map_shape: self.grid, records: out.records },
        ))
    }
}

// ── factory ──────────────────────────────────────────────────────────

/// Number of actions for a named environment.
pub fn env_actions(env: &str) -> Result<usize> {
    Ok(crate::envs::make_env(env, 0)?.num_actions())
}

/// Per-agent state dimensions needed to restore snapshots.
pub fn state_dims(cfg: &Config) -> (usize, usize) {
    (cfg.lstm_hidden, cfg.d_model)
}

/// Build the configured architecture with parameters drawn from `seed`.
pub fn build_core(cfg: &Config) -> Result<Box<dyn PolicyCore>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let actions = env_actions(&cfg.env)?;
    let widths = VISION_WIDTHS.to_vec();
    let max_pos = cfg.mem_len + cfg.unroll_length;
    match cfg.arch.as_str() {
        "mott" => {
            let core = MottCore::new(
                &MottConfig {
                    in_channels: cfg.frame_stack,
                    vision_widths: widths,
                    frame_h: cfg.frame_size,
                    frame_w: cfg.frame_size,
                    u: cfg.spatial_freqs,
                    v: cfg.spatial_freqs,
                    heads: cfg.heads,
                    lstm_hidden: cfg.lstm_hidden,
                    answer_hidden: cfg.answer_hidden,
                    actions,
                },
                &mut rng,
            )?;
            let down = core.vision.downscale();
            let grid = (cfg.frame_size / down, cfg.frame_size / down);
            Ok(Box::new(MottAgent { core, grid }))
        }
        "adaptive" => {
            let vision = VisionNet::new(cfg.frame_stack, &widths, &mut rng);
            let down = vision.downscale();
            if cfg.frame_size % down != 0 {
                return Err(Error::config(
                    "frame_size",
                    format!("not divisible by vision downscale {down}"),
                ));
            }
            let cells = (cfg.frame_size / down) * (cfg.frame_size / down);
            let flat = vision.out_channels() * cells;
            let shrink = Linear::new(flat, cfg.d_model, &mut rng);
            let core = AdaptiveCore::new(
                &AdaptiveConfig {
                    d_enc: cfg.d_model,
                    d_model: cfg.d_model,
                    heads: cfg.heads,
                    n_layer: cfg.n_layer,
                    mlp_hidden: 4 * cfg.d_model,
                    mem_len: cfg.mem_len,
                    max_pos,
                    actions,
                },
                &mut rng,
            )?;
            Ok(Box::new(AdaptiveAgent { vision, shrink, core }))
        }
        "sp-temp-seq" | "sp-temp-oneshot" => {
            let source = if cfg.arch == "sp-temp-seq" {
                QuerySource::Sequential
            } else {
                QuerySource::ActorCached
            };
            let core = SpatioTemporalCore::new(
                &SpTempConfig {
                    in_channels: cfg.frame_stack,
                    vision_widths: widths,
                    frame_h: cfg.frame_size,
                    frame_w: cfg.frame_size,
                    u: cfg.spatial_freqs,
                    v: cfg.spatial_freqs,
                    heads: cfg.heads,
                    d_model: cfg.d_model,
                    attn_heads: cfg.heads,
                    n_layer: cfg.n_layer,
                    mlp_hidden: 4 * cfg.d_model,
                    mem_len: cfg.mem_len,
                    max_pos,
                    actions,
                    query_source: source,
                },
                &mut rng,
            )?;
            let down = core.vision.downscale();
            let grid = (cfg.frame_size / down, cfg.frame_size / down);
            Ok(Box::new(SpTempAgent { core, grid }))
        }
        "divided" | "joint" => {
            let scheme = if cfg.arch == "divided" {
                AttentionScheme::Divided
            } else {
                AttentionScheme::Joint
            };
            let core = TimesformerCore::new(
                &TimesformerConfig {
                    in_channels: cfg.frame_stack,
                    frame_h: cfg.frame_size,
                    frame_w: cfg.frame_size,
                    patch_size: cfg.patch_size,
                    emb_size: cfg.emb_size,
                    n_layer: cfg.n_layer,
                    heads: cfg.heads,
                    mlp_hidden: 4 * cfg.emb_size,
                    scheme,
                    hybrid: cfg.hybrid,
                    vision_widths: widths,
                    mem_len: cfg.mem_len,
                    max_frames: max_pos,
                    d_shrink: cfg.d_model,
                    actions,
                },
                &mut rng,
            )?;
            let grid = if cfg.hybrid {
                let side = cfg.frame_size / 4; // two pooling blocks
                (side, side)
            } else {
                (cfg.frame_size / cfg.patch_size, cfg.frame_size / cfg.patch_size)
            };
            Ok(Box::new(TimesformerAgent { core, grid }))
        }
        other => Err(Error::config("arch", format!("unknown architecture `{other}`"))),
    }
}
