//! Truncated importance sampling, V-trace targets, and the three-term
//! actor-critic loss.
//!
//! Targets and advantages are plain f64 computations over trajectory data;
//! the losses are built in the autodiff graph with targets and advantages
//! entering as constants (the detach barrier keeps them gradient-free).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One unrolled trajectory as the learner sees it: behaviour policy logits
/// recorded by the actor, target policy logits and baselines recomputed by
/// the learner, plus the bootstrap value for the state after the last step.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub behaviour_logits: Vec<f64>, // [T × A]
    pub target_logits: Vec<f64>,    // [T × A]
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub baselines: Vec<f64>, // V(s_t)
    pub bootstrap: f64,      // V(s_T)
    pub num_actions: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let t = self.len();
        let a = self.num_actions;
        if self.behaviour_logits.len() != t * a
            || self.target_logits.len() != t * a
            || self.rewards.len() != t
            || self.dones.len() != t
            || self.baselines.len() != t
        {
            return Err(Error::Contract(format!(
                "trajectory field lengths disagree (T={t}, A={a})"
            )));
        }
        if let Some(&bad) = self.actions.iter().find(|&&x| x >= a) {
            return Err(Error::Contract(format!("action {bad} out of range {a}")));
        }
        Ok(())
    }
}

/// Per-step value targets and policy-gradient advantages.
#[derive(Clone, Debug)]
pub struct VTraceOutput {
    pub vs: Vec<f64>,
    pub pg_advantages: Vec<f64>,
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// ρ_t = min(ρ̄, π(a_t|s_t)/b(a_t|s_t)) and c_t = min(c̄, same ratio), with
/// probabilities taken from the softmax of the stored logits.
pub fn truncated_is_weights(
    traj: &Trajectory,
    rho_bar: f64,
    c_bar: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(c_bar > 0.0 && rho_bar >= c_bar) {
        return Err(Error::Contract(format!(
            "truncation levels must satisfy rho_bar >= c_bar > 0, got rho_bar={rho_bar}, c_bar={c_bar}"
        )));
    }
    traj.validate()?;
    let a = traj.num_actions;
    let mut rho = Vec::with_capacity(traj.len());
    let mut c = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let target = softmax_row(&traj.target_logits[t * a..(t + 1) * a]);
        let behaviour = softmax_row(&traj.behaviour_logits[t * a..(t + 1) * a]);
        let ratio = target[traj.actions[t]] / behaviour[traj.actions[t]];
        rho.push(rho_bar.min(ratio));
        c.push(c_bar.min(ratio));
    }
    Ok((rho, c))
}

/// Backward recursion v_k = V(s_k) + δ_kV + γ·c_k·(v_{k+1} − V(s_{k+1}))
/// from the bootstrap value, with γ treated as 0 at a done step so episode
/// boundaries never bootstrap across.
pub fn vtrace_targets(
    traj: &Trajectory,
    gamma: f64,
    rho: &[f64],
    c: &[f64],
) -> Result<VTraceOutput> {
    traj.validate()?;
    let t_len = traj.len();
    if rho.len() != t_len || c.len() != t_len {
        return Err(Error::Contract(format!(
            "weight lengths {}/{} do not match trajectory length {t_len}",
            rho.len(),
            c.len()
        )));
    }
    let next_v = |t: usize| if t + 1 < t_len { traj.baselines[t + 1] } else { traj.bootstrap };
    let mut vs = vec![0.0; t_len];
    let mut next_target = traj.bootstrap;
    for t in (0..t_len).rev() {
        let g = if traj.dones[t] { 0.0 } else { gamma };
        let delta = rho[t] * (traj.rewards[t] + g * next_v(t) - traj.baselines[t]);
        vs[t] = traj.baselines[t] + delta + g * c[t] * (next_target - next_v(t));
        next_target = vs[t];
    }
    let mut pg_advantages = vec![0.0; t_len];
    for t in 0..t_len {
        let g = if traj.dones[t] { 0.0 } else { gamma };
        let next_vs = if t + 1 < t_len { vs[t + 1] } else { traj.bootstrap };
        pg_advantages[t] = rho[t] * (traj.rewards[t] + g * next_vs - traj.baselines[t]);
    }
    Ok(VTraceOutput { vs, pg_advantages })
}

/// The three loss terms over one trajectory, built in the autodiff graph:
///
/// - baseline: ½ Σ (v_k − V(s_k))²
/// - policy gradient: −Σ log π(a_k|s_k) · advantage_k (advantages constant)
/// - entropy: Σ_k Σ_a π log π, so minimizing it maximizes entropy
///
/// Returns (loss_pg, loss_baseline, loss_entropy, total) where
/// total = loss_pg + baseline_coef·loss_baseline + entropy_coef·loss_entropy.
pub fn actor_critic_losses(
    out: &VTraceOutput,
    target_logits: &Tensor, // [T × A], gradients enabled
    baseline: &Tensor,      // [T]
    actions: &[usize],
    baseline_coef: f64,
    entropy_coef: f64,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let t = actions.len();
    if target_logits.shape().len() != 2
        || target_logits.shape()[0] != t
        || baseline.numel() != t
        || out.vs.len() != t
        || out.pg_advantages.len() != t
    {
        return Err(Error::shape(
            "actor_critic_losses",
            format!(
                "logits {:?}, baseline {:?}, T={t}",
                target_logits.shape(),
                baseline.shape()
            ),
        ));
    }
    let logp = target_logits.log_softmax(1)?;
    let action_logp = logp.gather_rows(actions)?;
    let adv = Tensor::from_vec(out.pg_advantages.clone(), &[t])?;
    let loss_pg = action_logp.mul(&adv)?.sum().neg();

    let vs = Tensor::from_vec(out.vs.clone(), &[t])?;
    let diff = vs.sub(&baseline.reshape(&[t])?)?;
    let loss_baseline = diff.mul(&diff)?.sum().mul_scalar(0.5);

    let probs = target_logits.softmax(1)?;
    let loss_entropy = probs.mul(&logp)?.sum();

    let total = loss_pg
        .add(&loss_baseline.mul_scalar(baseline_coef))?
        .add(&loss_entropy.mul_scalar(entropy_coef))?;
    Ok((loss_pg, loss_baseline, loss_entropy, total))
}
