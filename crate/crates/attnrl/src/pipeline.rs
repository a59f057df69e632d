//! MonoBeast-style actor-learner pipeline: shared rollout buffers exchanged
//! by index through free/full queues, actor workers producing trajectories,
//! a single learner consuming batches, and versioned parameter snapshots.
//!
//! Buffers transfer ownership by index; every transition is audited through
//! an atomic owner tag per buffer. Actors never record gradients; the
//! learner owns the only autodiff graph. With one actor the whole loop runs
//! fully sequentially in the calling thread, which makes runs bit-exactly
//! reproducible for a fixed seed.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use crossbeam_channel::{unbounded, Receiver, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{build_core, state_dims, AgentState, PolicyCore, StateSnapshot};
use crate::config::Config;
use crate::envs::{make_env, Environment, Preprocessor};
use crate::error::{Error, Result};
use crate::metrics::{sps, EpisodeWindow, MetricsRow};
use crate::optim::Adam;
use crate::tensor::{tape, Tensor};
use crate::vtrace::{actor_critic_losses, truncated_is_weights, vtrace_targets, Trajectory};

// ── Rollout buffers ──────────────────────────────────────────────────

/// One unroll of the learner input dictionary, plus the per-architecture
/// extras: the bootstrap observation, the actor's initial recurrent state,
/// the previous-step context entering step 0, optional one-shot query seeds,
/// and the parameter version that produced the rollout.
#[derive(Clone)]
pub struct RolloutBuffer {
    pub observation: Vec<f64>,   // [T × obs_numel]
    pub reward: Vec<f64>,        // [T]
    pub done: Vec<bool>,         // [T]
    pub policy_logits: Vec<f64>, // [T × A]
    pub baseline: Vec<f64>,      // [T]
    pub actions: Vec<usize>,     // [T]
    pub next_obs: Vec<f64>,      // [obs_numel]
    pub initial_state: Option<StateSnapshot>,
    pub initial_prev_reward: f64,
    pub initial_prev_logits: Vec<f64>,
    pub query_seeds: Vec<f64>, // [T × d_model] when the architecture wants them
    pub snapshot_version: u64,
}

impl RolloutBuffer {
    fn new(t: usize, obs_numel: usize, actions: usize) -> RolloutBuffer {
        RolloutBuffer {
            observation: vec![0.0; t * obs_numel],
            reward: vec![0.0; t],
            done: vec![false; t],
            policy_logits: vec![0.0; t * actions],
            baseline: vec![0.0; t],
            actions: vec![0; t],
            next_obs: vec![0.0; obs_numel],
            initial_state: None,
            initial_prev_reward: 0.0,
            initial_prev_logits: vec![0.0; actions],
            query_seeds: Vec::new(),
            snapshot_version: 0,
        }
    }
}

/// Buffer pool plus a free queue preloaded with every index.
pub fn create_buffers(
    num_buffers: usize,
    t: usize,
    obs_numel: usize,
    actions: usize,
    batch_size: usize,
    num_actors: usize,
) -> Result<(Arc<Vec<Mutex<RolloutBuffer>>>, Sender<usize>, Receiver<usize>)> {
    if num_buffers < batch_size + num_actors {
        return Err(Error::config(
            "num_buffers",
            format!("need at least batch_size + num_actors = {}", batch_size + num_actors),
        ));
    }
    let buffers: Vec<Mutex<RolloutBuffer>> =
        (0..num_buffers).map(|_| Mutex::new(RolloutBuffer::new(t, obs_numel, actions))).collect();
    let (free_tx, free_rx) = unbounded();
    for idx in 0..num_buffers {
        free_tx.send(idx).expect("preload free queue");
    }
    Ok((Arc::new(buffers), free_tx, free_rx))
}

// ── Ownership audit ──────────────────────────────────────────────────

pub const OWNER_FREE: u8 = 0;
pub const OWNER_ACTOR: u8 = 1;
pub const OWNER_FULL: u8 = 2;
pub const OWNER_LEARNER: u8 = 3;

/// Shared pipeline counters. Owner tags move through
/// free-queue → actor → full-queue → learner → free-queue; any transition
/// from an unexpected owner counts as a violation.
pub struct PipelineStats {
    pub transfers: AtomicU64,
    pub ownership_violations: AtomicU64,
    pub stale_consumed: AtomicU64,
    pub updates: AtomicU64,
    owners: Vec<AtomicU8>,
}

impl PipelineStats {
    pub fn new(num_buffers: usize) -> PipelineStats {
        PipelineStats {
            transfers: AtomicU64::new(0),
            ownership_violations: AtomicU64::new(0),
            stale_consumed: AtomicU64::new(0),
            updates: AtomicU64::new(0),
            owners: (0..num_buffers).map(|_| AtomicU8::new(OWNER_FREE)).collect(),
        }
    }

    pub fn transition(&self, idx: usize, from: u8, to: u8) {
        self.transfers.fetch_add(1, Ordering::Relaxed);
        if self.owners[idx]
            .compare_exchange(from, to, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            self.ownership_violations.fetch_add(1, Ordering::Relaxed);
        }
    }
}

/// Versioned, immutable copy of all learner parameters. Actors read whole
/// snapshots through an Arc swap, so torn reads cannot happen.
pub struct ParameterSnapshot {
    pub version: u64,
    pub values: Vec<Vec<f64>>,
}

pub type SnapshotSlot = Arc<RwLock<Arc<ParameterSnapshot>>>;

fn publish(slot: &SnapshotSlot, version: u64, params: &[(String, Tensor)]) {
    let snap =
        ParameterSnapshot { version, values: params.iter().map(|(_, t)| t.to_vec()).collect() };
    *slot.write().expect("snapshot slot") = Arc::new(snap);
}

/// Episode statistics reported by actors.
struct EpisodeResult {
    episode_return: f64,
    length: usize,
    inference_ms: f64,
    actor_id: usize,
}

// ── Actor ────────────────────────────────────────────────────────────

/// Rolls trajectories with gradient recording disabled, carrying recurrent
/// state across buffer boundaries within an episode and resetting it at
/// episode starts.
struct ActorWorker {
    actor_id: usize,
    core: Box<dyn PolicyCore>,
    params: Vec<(String, Tensor)>,
    env: Box<dyn Environment>,
    pre: Preprocessor,
    rng: ChaCha8Rng,
    state: AgentState,
    obs: Tensor,
    prev_reward: f64,
    prev_logits: Vec<f64>,
    param_version: u64,
    episode_return: f64,
    episode_len: usize,
    step_secs: f64,
    unroll: usize,
    actions: usize,
    obs_numel: usize,
    wants_seeds: bool,
    d_model: usize,
}

impl ActorWorker {
    fn new(cfg: &Config, actor_id: usize) -> Result<ActorWorker> {
        let core = build_core(cfg)?;
        let params = core.named_params();
        let mut env = make_env(&cfg.env, cfg.seed.wrapping_add(1000 * (actor_id as u64 + 1)))?;
        let mut pre =
            Preprocessor::new(cfg.frame_size, cfg.frame_size, cfg.frame_stack, cfg.rescale_images);
        let first = env.reset();
        let obs = pre.push(&first)?;
        let actions = core.actions();
        let state = core.state_init();
        let wants_seeds = core.wants_seeds();
        Ok(ActorWorker {
            actor_id,
            core,
            params,
            env,
            pre,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(777 * (actor_id as u64 + 1))),
            state,
            obs,
            prev_reward: 0.0,
            prev_logits: vec![0.0; actions],
            param_version: u64::MAX, // force an initial load
            episode_return: 0.0,
            episode_len: 0,
            step_secs: 0.0,
            unroll: cfg.unroll_length,
            actions,
            obs_numel: cfg.frame_stack * cfg.frame_size * cfg.frame_size,
            wants_seeds,
            d_model: cfg.d_model,
        })
    }

    fn refresh_params(&mut self, slot: &SnapshotSlot) {
        let snap = slot.read().expect("snapshot slot").clone();
        if snap.version != self.param_version {
            for ((_, tensor), values) in self.params.iter().zip(&snap.values) {
                tensor.set_data(values.clone());
            }
            self.param_version = snap.version;
        }
    }

    fn sample_action(&mut self, logits: &[f64]) -> usize {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (i, &e) in exps.iter().enumerate() {
            u -= e;
            if u <= 0.0 {
                return i;
            }
        }
        exps.len() - 1
    }

    /// Fill one rollout buffer of `unroll` transitions.
    fn fill(
        &mut self,
        buf: &mut RolloutBuffer,
        episodes: &Sender<EpisodeResult>,
    ) -> Result<()> {
        buf.snapshot_version = self.param_version;
        buf.initial_state = Some(self.state.snapshot());
        buf.initial_prev_reward = self.prev_reward;
        buf.initial_prev_logits = self.prev_logits.clone();
        if self.wants_seeds {
            buf.query_seeds.resize(self.unroll * self.d_model, 0.0);
        }
        for t in 0..self.unroll {
            let started = Instant::now();
            buf.observation[t * self.obs_numel..(t + 1) * self.obs_numel]
                .copy_from_slice(&self.obs.data());
            let out = tape::no_grad(|| {
                self.core.step(&self.obs, self.prev_reward, &self.prev_logits, &self.state)
            })?;
            let action = self.sample_action(&out.logits);
            buf.policy_logits[t * self.actions..(t + 1) * self.actions]
                .copy_from_slice(&out.logits);
            buf.baseline[t] = out.baseline;
            buf.actions[t] = action;
            if let Some(seed) = &out.seed {
                buf.query_seeds[t * self.d_model..(t + 1) * self.d_model].copy_from_slice(seed);
            }
            let (frame, reward, done) = self.env.step(action)?;
            buf.reward[t] = reward;
            buf.done[t] = done;
            self.episode_return += reward;
            self.episode_len += 1;
            self.step_secs += started.elapsed().as_secs_f64();
            if done {
                let inference_ms = 1000.0 * self.step_secs / self.episode_len.max(1) as f64;
                let _ = episodes.send(EpisodeResult {
                    episode_return: self.episode_return,
                    length: self.episode_len,
                    inference_ms,
                    actor_id: self.actor_id,
                });
                self.episode_return = 0.0;
                self.episode_len = 0;
                self.step_secs = 0.0;
                self.state = self.core.state_init();
                self.prev_reward = 0.0;
                self.prev_logits = vec![0.0; self.actions];
                self.pre.clear();
                let first = self.env.reset();
                self.obs = self.pre.push(&first)?;
            } else {
                self.state = out.state;
                self.prev_reward = reward;
                self.prev_logits = out.logits;
                self.obs = self.pre.push(&frame)?;
            }
        }
        buf.next_obs.copy_from_slice(&self.obs.data());
        Ok(())
    }
}

fn actor_loop(
    cfg: Config,
    actor_id: usize,
    buffers: Arc<Vec<Mutex<RolloutBuffer>>>,
    free_rx: Receiver<usize>,
    full_tx: Sender<usize>,
    slot: SnapshotSlot,
    stats: Arc<PipelineStats>,
    episodes: Sender<EpisodeResult>,
    stop: Arc<AtomicBool>,
) {
    let mut worker = match ActorWorker::new(&cfg, actor_id) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("actor {actor_id} failed to start: {e}");
            return;
        }
    };
    while !stop.load(Ordering::Acquire) {
        let idx = match free_rx.recv_timeout(std::time::Duration::from_millis(50)) {
            Ok(idx) => idx,
            Err(_) => continue,
        };
        stats.transition(idx, OWNER_FREE, OWNER_ACTOR);
        worker.refresh_params(&slot);
        let result = {
            let mut buf = buffers[idx].lock().expect("buffer lock");
            worker.fill(&mut buf, &episodes)
        };
        if let Err(e) = result {
            // this actor aborts; others keep running
            eprintln!("actor {actor_id} aborted: {e}");
            stats.transition(idx, OWNER_ACTOR, OWNER_FREE);
            return;
        }
        stats.transition(idx, OWNER_ACTOR, OWNER_FULL);
        if full_tx.send(idx).is_err() {
            return;
        }
    }
}

// ── Learner ──────────────────────────────────────────────────────────

struct LearnerLosses {
    pg: f64,
    baseline: f64,
    entropy: f64,
}

/// Forward one buffer through the core in chunks (splitting at episode
/// boundaries), compute V-trace targets, and return the summed loss tensor.
fn buffer_loss(
    core: &dyn PolicyCore,
    cfg: &Config,
    buf: &RolloutBuffer,
    actions: usize,
) -> Result<(Tensor, LearnerLosses)> {
    let t_len = cfg.unroll_length;
    let obs_numel = cfg.frame_stack * cfg.frame_size * cfg.frame_size;
    let obs_shape = [cfg.frame_stack, cfg.frame_size, cfg.frame_size];
    let obs: Vec<Tensor> = (0..t_len)
        .map(|t| {
            Tensor::from_vec(
                buf.observation[t * obs_numel..(t + 1) * obs_numel].to_vec(),
                &obs_shape,
            )
        })
        .collect::<Result<_>>()?;

    // previous-step context entering each step
    let mut prev_rewards = vec![0.0; t_len];
    let mut prev_logits = vec![0.0; t_len * actions];
    prev_rewards[0] = buf.initial_prev_reward;
    prev_logits[..actions].copy_from_slice(&buf.initial_prev_logits);
    for t in 1..t_len {
        if !buf.done[t - 1] {
            prev_rewards[t] = buf.reward[t - 1];
            prev_logits[t * actions..(t + 1) * actions]
                .copy_from_slice(&buf.policy_logits[(t - 1) * actions..t * actions]);
        }
    }
    let prev_logits_t = Tensor::from_vec(prev_logits, &[t_len, actions])?;
    let seeds_t = if buf.query_seeds.is_empty() {
        None
    } else {
        Some(Tensor::from_vec(buf.query_seeds.clone(), &[t_len, cfg.d_model])?)
    };

    let (hidden, d_model) = state_dims(cfg);
    let snap = buf
        .initial_state
        .as_ref()
        .ok_or_else(|| Error::Contract("buffer missing its initial agent state".into()))?;
    let mut state = AgentState::from_snapshot(snap, hidden, d_model);

    // segments end at chunk boundaries and episode boundaries
    let mut logits_parts = Vec::new();
    let mut baseline_parts = Vec::new();
    let mut start = 0;
    while start < t_len {
        let chunk_end = (start / cfg.chunk_size + 1) * cfg.chunk_size;
        let mut end = chunk_end.min(t_len);
        if let Some(done_at) = (start..end).find(|&t| buf.done[t]) {
            end = done_at + 1;
        }
        let seg_seeds = match &seeds_t {
            Some(s) => Some(s.narrow(0, start, end - start)?),
            None => None,
        };
        let out = core.forward_chunk(
            &obs[start..end],
            &prev_rewards[start..end],
            &prev_logits_t.narrow(0, start, end - start)?,
            seg_seeds.as_ref(),
            &state,
        )?;
        logits_parts.push(out.logits);
        baseline_parts.push(out.baseline);
        state = if buf.done[end - 1] { core.state_init() } else { out.state };
        start = end;
    }
    let target_logits = Tensor::concat(&logits_parts, 0)?;
    let baseline = Tensor::concat(&baseline_parts, 0)?;

    // bootstrap value for the state after the last transition
    let boot_reward = if buf.done[t_len - 1] { 0.0 } else { buf.reward[t_len - 1] };
    let boot_logits = if buf.done[t_len - 1] {
        vec![0.0; actions]
    } else {
        buf.policy_logits[(t_len - 1) * actions..].to_vec()
    };
    let bootstrap = tape::no_grad(|| -> Result<f64> {
        let next = Tensor::from_vec(buf.next_obs.clone(), &obs_shape)?;
        let out = core.step(&next, boot_reward, &boot_logits, &state)?;
        Ok(out.baseline)
    })?;

    let traj = Trajectory {
        behaviour_logits: buf.policy_logits.clone(),
        target_logits: target_logits.to_vec(),
        actions: buf.actions.clone(),
        rewards: buf.reward.clone(),
        dones: buf.done.clone(),
        baselines: baseline.to_vec(),
        bootstrap,
        num_actions: actions,
    };
    let (rho, c) = truncated_is_weights(&traj, cfg.rho_bar, cfg.c_bar)?;
    let vtrace = vtrace_targets(&traj, cfg.gamma, &rho, &c)?;
    let (pg, base, ent, total) = actor_critic_losses(
        &vtrace,
        &target_logits,
        &baseline,
        &buf.actions,
        cfg.baseline_coef,
        cfg.entropy_coef,
    )?;
    Ok((total, LearnerLosses { pg: pg.item(), baseline: base.item(), entropy: ent.item() }))
}

/// One learner update over `batch` buffer indices. Returns summed losses.
fn learner_step(
    core: &dyn PolicyCore,
    cfg: &Config,
    params: &[(String, Tensor)],
    optimizer: &mut Adam,
    buffers: &[Mutex<RolloutBuffer>],
    batch: &[usize],
    stats: &PipelineStats,
    version: u64,
) -> Result<LearnerLosses> {
    tape::reset();
    for (_, p) in params {
        p.zero_grad();
    }
    let actions = core.actions();
    let mut total: Option<Tensor> = None;
    let mut sums = LearnerLosses { pg: 0.0, baseline: 0.0, entropy: 0.0 };
    for &idx in batch {
        let buf = buffers[idx].lock().expect("buffer lock").clone();
        if buf.snapshot_version < version {
            stats.stale_consumed.fetch_add(1, Ordering::Relaxed);
        }
        let (loss, parts) = buffer_loss(core, cfg, &buf, actions)?;
        sums.pg += parts.pg;
        sums.baseline += parts.baseline;
        sums.entropy += parts.entropy;
        total = Some(match total {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    total.expect("non-empty batch").backward()?;
    optimizer.step(params);
    stats.updates.fetch_add(1, Ordering::Relaxed);
    Ok(sums)
}

// ── Training orchestration ───────────────────────────────────────────

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub steps: usize,
    pub episodes: usize,
    pub final_mean_return: f64,
    pub stale_consumed: u64,
    pub transfers: u64,
    pub ownership_violations: u64,
    pub final_version: u64,
    pub elapsed_secs: f64,
    pub stopped_early: bool,
    pub actors_seen_stale: bool,
}

/// Run the full actor-learner loop to `total_steps` (or until the moving
/// average return reaches `stop_return`). Returns the outcome and the
/// trained learner core. `on_row` observes each metrics row as it is made.
pub fn run_training(
    cfg: &Config,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<(TrainOutcome, Box<dyn PolicyCore>)> {
    cfg.validate()?;
    let core = build_core(cfg)?;
    let params = core.named_params();
    let parameter_count: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut optimizer = Adam::new(cfg.learning_rate, &params);
    let actions = core.actions();
    let obs_numel = cfg.frame_stack * cfg.frame_size * cfg.frame_size;

    let (buffers, free_tx, free_rx) = create_buffers(
        cfg.num_buffers,
        cfg.unroll_length,
        obs_numel,
        actions,
        cfg.batch_size,
        cfg.num_actors,
    )?;
    let (full_tx, full_rx) = unbounded::<usize>();
    let (episode_tx, episode_rx) = unbounded::<EpisodeResult>();
    let stats = Arc::new(PipelineStats::new(cfg.num_buffers));
    let slot: SnapshotSlot = Arc::new(RwLock::new(Arc::new(ParameterSnapshot {
        version: 0,
        values: params.iter().map(|(_, t)| t.to_vec()).collect(),
    })));
    let stop = Arc::new(AtomicBool::new(false));

    let sequential = cfg.num_actors == 1;
    let mut inline_worker = None;
    let mut handles = Vec::new();
    if sequential {
        inline_worker = Some(ActorWorker::new(cfg, 0)?);
    } else {
        for actor_id in 0..cfg.num_actors {
            let cfg = cfg.clone();
            let buffers = buffers.clone();
            let free_rx = free_rx.clone();
            let full_tx = full_tx.clone();
            let slot = slot.clone();
            let stats = stats.clone();
            let episode_tx = episode_tx.clone();
            let stop = stop.clone();
            handles.push(std::thread::spawn(move || {
                actor_loop(cfg, actor_id, buffers, free_rx, full_tx, slot, stats, episode_tx, stop)
            }));
        }
    }

    let started = Instant::now();
    let mut window = EpisodeWindow::new(cfg.metrics_window);
    let mut inference_ring: Vec<f64> = Vec::new();
    let mut actors_seen_stale = false;
    let mut steps = 0usize;
    let mut version = 0u64;
    let mut rows = Vec::new();
    let mut stopped_early = false;

    'training: while steps < cfg.total_steps {
        // gather one batch of full buffers
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if sequential {
                let worker = inline_worker.as_mut().expect("inline worker");
                let idx = free_rx.recv().expect("free queue");
                stats.transition(idx, OWNER_FREE, OWNER_ACTOR);
                worker.refresh_params(&slot);
                {
                    let mut buf = buffers[idx].lock().expect("buffer lock");
                    worker.fill(&mut buf, &episode_tx)?;
                }
                stats.transition(idx, OWNER_ACTOR, OWNER_FULL);
                full_tx.send(idx).expect("full queue");
            }
            match full_rx.recv_timeout(std::time::Duration::from_secs(60)) {
                Ok(idx) => {
                    stats.transition(idx, OWNER_FULL, OWNER_LEARNER);
                    batch.push(idx);
                }
                Err(_) => {
                    if handles.iter().all(|h| h.is_finished()) && !sequential {
                        break 'training; // all actors died
                    }
                }
            }
        }
        for &idx in &batch {
            if buffers[idx].lock().expect("buffer lock").snapshot_version < version {
                actors_seen_stale = true;
            }
        }
        let losses =
            learner_step(core.as_ref(), cfg, &params, &mut optimizer, &buffers, &batch, &stats, version)?;
        version += 1;
        publish(&slot, version, &params);
        for idx in batch {
            stats.transition(idx, OWNER_LEARNER, OWNER_FREE);
            free_tx.send(idx).expect("free queue");
        }
        steps += cfg.batch_size * cfg.unroll_length;

        while let Ok(ep) = episode_rx.try_recv() {
            window.push(ep.episode_return, ep.length);
            inference_ring.push(ep.inference_ms);
            if inference_ring.len() > cfg.metrics_window {
                inference_ring.remove(0);
            }
            let _ = ep.actor_id;
        }
        let elapsed = started.elapsed().as_secs_f64();
        let row = MetricsRow {
            step: steps,
            episodes: window.episodes,
            mean_return: window.mean_return(),
            mean_length: window.mean_length(),
            sps: sps(steps, elapsed),
            loss_pg: losses.pg,
            loss_baseline: losses.baseline,
            loss_entropy: losses.entropy,
            parameter_count,
            inference_ms: if inference_ring.is_empty() {
                0.0
            } else {
                inference_ring.iter().sum::<f64>() / inference_ring.len() as f64
            },
        };
        on_row(&row);
        rows.push(row);
        if let Some(threshold) = cfg.stop_return {
            if window.episodes >= cfg.metrics_window && window.mean_return() >= threshold {
                stopped_early = true;
                break;
            }
        }
    }

    stop.store(true, Ordering::Release);
    for handle in handles {
        let _ = handle.join();
    }
    let outcome = TrainOutcome {
        episodes: window.episodes,
        final_mean_return: window.mean_return(),
        steps,
        stale_consumed: stats.stale_consumed.load(Ordering::Relaxed),
        transfers: stats.transfers.load(Ordering::Relaxed),
        ownership_violations: stats.ownership_violations.load(Ordering::Relaxed),
        final_version: version,
        elapsed_secs: started.elapsed().as_secs_f64(),
        stopped_early,
        actors_seen_stale,
        rows,
    };
    Ok((outcome, core))
}

// ── Evaluation ───────────────────────────────────────────────────────

pub struct EvalReport {
    pub mean_return: f64,
    pub mean_length: f64,
    pub inference_ms: f64,
    pub episodes: usize,
}

/// Roll `episodes` complete episodes with the given core, sampling actions
/// from the policy, and report means plus per-step inference time.
pub fn evaluate(cfg: &Config, core: &dyn PolicyCore, episodes: usize) -> Result<EvalReport> {
    let mut env = make_env(&cfg.env, cfg.seed.wrapping_add(424242))?;
    let mut pre =
        Preprocessor::new(cfg.frame_size, cfg.frame_size, cfg.frame_stack, cfg.rescale_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(99));
    let actions = core.actions();
    let mut total_return = 0.0;
    let mut total_len = 0usize;
    let mut total_secs = 0.0;
    for _ in 0..episodes {
        let mut state = core.state_init();
        let mut prev_reward = 0.0;
        let mut prev_logits = vec![0.0; actions];
        pre.clear();
        let first = env.reset();
        let mut obs = pre.push(&first)?;
        loop {
            let started = Instant::now();
            let out =
                tape::no_grad(|| core.step(&obs, prev_reward, &prev_logits, &state))?;
            let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.logits.iter().map(|&x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            let mut action = exps.len() - 1;
            for (i, &e) in exps.iter().enumerate() {
                u -= e;
                if u <= 0.0 {
                    action = i;
                    break;
                }
            }
            let (frame, reward, done) = env.step(action)?;
            total_secs += started.elapsed().as_secs_f64();
            total_return += reward;
            total_len += 1;
            if done {
                break;
            }
            state = out.state;
            prev_reward = reward;
            prev_logits = out.logits;
            obs = pre.push(&frame)?;
        }
    }
    Ok(EvalReport {
        mean_return: total_return / episodes as f64,
        mean_length: total_len as f64 / episodes as f64,
        inference_ms: 1000.0 * total_secs / total_len.max(1) as f64,
        episodes,
    })
}

#[cfg(test)]
mod tests;
