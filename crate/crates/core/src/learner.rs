//! Policy-gradient training for the assignment model.
//!
//! Episodes are rolled out with a stochastic head over the affinity matrix
//! (sequential sampling without replacement), scored by a time-penalized
//! area-gain reward, and used for clipped-surrogate updates with generalized
//! advantage estimation. A finite-difference gradient checker validates the
//! analytic gradients end to end.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::global_planner::{GraphInputs, Model, UNREACHABLE_AFFINITY};
use crate::grid::{coverage, CellState, GridError, TriStateGrid};
use crate::local_planner::UtilityParams;
use crate::nn::{Mat, NodeId, ParamStore, Tape};
use crate::sim::{Assignment, SimConfig, SimError, Simulator, TerminationReason, World};

#[derive(Debug, Error)]
pub enum LearnError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("update needs at least one recorded step")]
    EmptyBatch,
    #[error("non-finite loss (policy {policy}, value {value}, entropy {entropy})")]
    NonFiniteLoss { policy: f64, value: f64, entropy: f64 },
}

/// Reward shaping: a fixed per-step time penalty plus a weighted bonus for
/// newly mapped area.
#[derive(Debug, Clone, Copy)]
pub struct RewardConfig {
    /// Per-step penalty, strictly negative.
    pub r_time: f64,
    /// Weight on the mapped-area increase.
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { r_time: -1.0, lambda: 2.0 }
    }
}

/// Reward for one planning step given the mapped-cell counts before and
/// after it.
pub fn step_reward(prev_area: usize, new_area: usize, config: &RewardConfig) -> f64 {
    config.r_time + config.lambda * (new_area as f64 - prev_area as f64)
}

#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    pub max_grad_norm: f64,
    /// Rewards are multiplied by this inside the update (never in the
    /// trajectory) to keep value targets near unit scale.
    pub reward_scale: f64,
    pub episodes: usize,
    pub steps_per_episode: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs_per_update: 4,
            gamma: 0.99,
            gae_lambda: 0.95,
            entropy_coeff: 0.01,
            value_coeff: 0.5,
            max_grad_norm: 0.5,
            reward_scale: 0.01,
            episodes: 100,
            steps_per_episode: 25,
        }
    }
}

/// One planning step as seen by the update: the observation, what was
/// sampled, and what came back.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub inputs: GraphInputs,
    pub actions: Assignment,
    /// Joint log-probability of the sampled actions under the behavior
    /// policy.
    pub log_prob: f64,
    pub reward: f64,
    /// Critic estimate at the observation.
    pub value: f64,
    /// True when the episode ended right after this step.
    pub done: bool,
}

/// One episode of experience.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// Mapped-cell counts, one before the first action and one after each
    /// step; rewards are derived from consecutive pairs.
    pub areas: Vec<usize>,
    /// Critic estimate at the truncation state, zero on termination.
    pub bootstrap_value: f64,
    /// Coverage of the merged grid after the last transmission round.
    pub coverage: f64,
    pub termination: Option<TerminationReason>,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

fn candidate(affinity: &Mat, taken: &[bool], i: usize, j: usize) -> bool {
    !taken[j] && affinity.get(i, j) > UNREACHABLE_AFFINITY / 2.0
}

fn row_distribution(affinity: &Mat, taken: &[bool], i: usize) -> Vec<f64> {
    let nc = affinity.cols();
    let max = (0..nc)
        .filter(|&j| candidate(affinity, taken, i, j))
        .map(|j| affinity.get(i, j))
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; nc];
    if max == f64::NEG_INFINITY {
        return probs;
    }
    let mut total = 0.0;
    for (j, p) in probs.iter_mut().enumerate() {
        if candidate(affinity, taken, i, j) {
            *p = (affinity.get(i, j) - max).exp();
            total += *p;
        }
    }
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Per-robot categorical distributions over clusters under a shared
/// exclusion mask. Clusters flagged in `taken` and pairs pinned to the
/// unreachable affinity get probability zero; a robot with no candidate
/// left gets an all-zero row.
pub fn policy_distribution(affinity: &Mat, taken: &[bool]) -> Vec<Vec<f64>> {
    assert_eq!(taken.len(), affinity.cols(), "taken mask length mismatch");
    (0..affinity.rows()).map(|i| row_distribution(affinity, taken, i)).collect()
}

/// Sample one cluster per robot in index order without replacement; robots
/// whose row has no candidate left take no action and contribute zero to
/// the joint log-probability.
pub fn sample_assignments(affinity: &Mat, rng: &mut ChaCha8Rng) -> (Assignment, f64) {
    let (nr, nc) = (affinity.rows(), affinity.cols());
    let mut taken = vec![false; nc];
    let mut actions = Vec::with_capacity(nr);
    let mut log_prob = 0.0;
    for i in 0..nr {
        let probs = row_distribution(affinity, &taken, i);
        if probs.iter().all(|&p| p == 0.0) {
            actions.push(None);
            continue;
        }
        let mut u = rng.gen::<f64>();
        let mut pick = None;
        for (j, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if u < p {
                pick = Some(j);
                break;
            }
            u -= p;
        }
        let j = pick.unwrap_or_else(|| probs.iter().rposition(|&p| p > 0.0).unwrap());
        taken[j] = true;
        log_prob += probs[j].ln();
        actions.push(Some(j));
    }
    (actions, log_prob)
}

fn known_area(grid: &TriStateGrid) -> usize {
    let mut n = 0;
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if grid.get(x, y) != CellState::Unknown {
                n += 1;
            }
        }
    }
    n
}

fn pinned_affinity(raw: &Mat, inputs: &GraphInputs) -> Mat {
    Mat::from_fn(inputs.robots, inputs.clusters, |i, j| {
        if inputs.mask[i * inputs.clusters + j] {
            raw.get(i, j)
        } else {
            UNREACHABLE_AFFINITY
        }
    })
}

/// Roll one episode with the stochastic policy, recording everything the
/// update needs. Stops early on the usual termination criteria; otherwise
/// truncates after `steps_per_episode` steps and bootstraps from the
/// critic.
pub fn collect_rollout(
    sim: &mut Simulator,
    model: &Model,
    utility: &UtilityParams,
    reward: &RewardConfig,
    steps_per_episode: usize,
    seed: u64,
) -> Result<Trajectory, LearnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (sim.world.truth.width(), sim.world.truth.height());
    let mut traj = Trajectory {
        steps: Vec::new(),
        areas: Vec::new(),
        bootstrap_value: 0.0,
        coverage: 0.0,
        termination: None,
    };
    loop {
        let scene = sim.preprocess()?;
        let area = known_area(&scene.grid);
        if let Some(last) = traj.steps.last_mut() {
            last.reward = step_reward(*traj.areas.last().unwrap(), area, reward);
        }
        traj.areas.push(area);
        traj.coverage = coverage(&scene.grid, &sim.world.truth)?;
        if let Some(reason) = scene.termination {
            traj.termination = Some(reason);
            if let Some(last) = traj.steps.last_mut() {
                last.done = true;
            }
            return Ok(traj);
        }
        let inputs = GraphInputs::new(w, h, &sim.poses(), &scene.clusters, &scene.dists);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &inputs);
        let value = tape.value(out.value).item();
        if traj.steps.len() >= steps_per_episode {
            traj.bootstrap_value = value;
            return Ok(traj);
        }
        let affinity = pinned_affinity(tape.value(out.affinity), &inputs);
        let (actions, log_prob) = sample_assignments(&affinity, &mut rng);
        sim.execute(&scene, &actions, utility)?;
        traj.steps.push(StepRecord { inputs, actions, log_prob, reward: 0.0, value, done: false });
    }
}

/// Generalized advantage estimation over a batch, with the rewards scaled
/// by `reward_scale` and the advantages normalized to zero mean and unit
/// variance across the batch. Returns per-step (advantage, value target)
/// pairs flattened in trajectory order.
pub fn advantage_estimates(
    trajectories: &[Trajectory],
    config: &PpoConfig,
) -> Result<(Vec<f64>, Vec<f64>), LearnError> {
    let total: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    if total == 0 {
        return Err(LearnError::EmptyBatch);
    }
    let mut advantages = Vec::with_capacity(total);
    let mut returns = Vec::with_capacity(total);
    for traj in trajectories {
        let n = traj.steps.len();
        let mut adv = vec![0.0; n];
        let mut next_adv = 0.0;
        let mut next_value = traj.bootstrap_value;
        for t in (0..n).rev() {
            let s = &traj.steps[t];
            let carry = if s.done { 0.0 } else { 1.0 };
            let delta = s.reward * config.reward_scale + config.gamma * next_value * carry - s.value;
            next_adv = delta + config.gamma * config.gae_lambda * carry * next_adv;
            adv[t] = next_adv;
            next_value = s.value;
        }
        for (t, a) in adv.iter().enumerate() {
            advantages.push(*a);
            returns.push(*a + traj.steps[t].value);
        }
    }
    let mean = advantages.iter().sum::<f64>() / total as f64;
    let var = advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / total as f64;
    let std = var.sqrt();
    for a in &mut advantages {
        *a = (*a - mean) / (std + 1e-8);
    }
    Ok((advantages, returns))
}

/// Batch loss values, each averaged per step. `total` combines them with
/// the configured coefficients.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

struct StepGraph {
    loss: NodeId,
    policy: f64,
    value: f64,
    entropy: f64,
}

fn step_graph(
    model: &Model,
    tape: &mut Tape,
    step: &StepRecord,
    advantage: f64,
    value_target: f64,
    config: &PpoConfig,
) -> StepGraph {
    let out = model.forward(tape, &step.inputs);
    let nc = step.inputs.clusters;

    // Rebuild the per-robot candidate masks the sampler saw: reachable
    // pairs minus clusters taken by earlier robots in the same step.
    let mut mask = step.inputs.mask.clone();
    let mut idx = Vec::new();
    let mut taken = Vec::new();
    for (i, act) in step.actions.iter().enumerate() {
        for &j in &taken {
            mask[i * nc + j] = false;
        }
        if let Some(j) = *act {
            idx.push((i, j));
            taken.push(j);
        }
    }

    let log_rows = tape.masked_log_softmax_rows(out.affinity, mask.clone());
    let ent_rows = tape.masked_entropy_rows(out.affinity, mask);
    let ent = tape.sum(ent_rows);

    let target = tape.constant(Mat::scalar(value_target));
    let vdiff = tape.sub(out.value, target);
    let vsq = tape.mul(vdiff, vdiff);

    let policy = if idx.is_empty() {
        tape.constant(Mat::scalar(0.0))
    } else {
        let picked = tape.gather_entries(log_rows, idx);
        let new_logp = tape.sum(picked);
        let old_logp = tape.constant(Mat::scalar(step.log_prob));
        let shift = tape.sub(new_logp, old_logp);
        let ratio = tape.exp(shift);
        let adv = tape.constant(Mat::scalar(advantage));
        let surr = tape.mul(ratio, adv);
        let clipped = tape.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio);
        let surr_clip = tape.mul(clipped, adv);
        let worst = tape.min_elem(surr, surr_clip);
        tape.scale(worst, -1.0)
    };

    let value_term = tape.scale(vsq, config.value_coeff);
    let ent_term = tape.scale(ent, -config.entropy_coeff);
    let pv = tape.add(policy, value_term);
    let loss = tape.add(pv, ent_term);
    StepGraph {
        loss,
        policy: tape.value(policy).item(),
        value: tape.value(vsq).item(),
        entropy: tape.value(ent).item(),
    }
}

fn batch_steps<'a>(
    trajectories: &'a [Trajectory],
) -> impl Iterator<Item = &'a StepRecord> + 'a {
    trajectories.iter().flat_map(|t| t.steps.iter())
}

/// Mean batch loss under the current parameters, without touching
/// gradients.
pub fn evaluate_loss(
    model: &Model,
    trajectories: &[Trajectory],
    advantages: &[f64],
    returns: &[f64],
    config: &PpoConfig,
) -> LossBreakdown {
    let n = advantages.len();
    let mut out = LossBreakdown::default();
    for (k, step) in batch_steps(trajectories).enumerate() {
        let mut tape = Tape::new();
        let g = step_graph(model, &mut tape, step, advantages[k], returns[k], config);
        out.total += tape.value(g.loss).item() / n as f64;
        out.policy += g.policy / n as f64;
        out.value += g.value / n as f64;
        out.entropy += g.entropy / n as f64;
    }
    out
}

/// Mean batch loss plus one backward pass accumulating its gradients into
/// the model parameters.
pub fn accumulate_gradients(
    model: &mut Model,
    trajectories: &[Trajectory],
    advantages: &[f64],
    returns: &[f64],
    config: &PpoConfig,
) -> LossBreakdown {
    let n = advantages.len();
    let mut out = LossBreakdown::default();
    for (k, step) in trajectories.iter().flat_map(|t| t.steps.iter()).enumerate() {
        let mut tape = Tape::new();
        let g = step_graph(model, &mut tape, step, advantages[k], returns[k], config);
        let scaled = tape.scale(g.loss, 1.0 / n as f64);
        out.total += tape.value(scaled).item();
        out.policy += g.policy / n as f64;
        out.value += g.value / n as f64;
        out.entropy += g.entropy / n as f64;
        tape.backward(scaled, &mut model.params);
    }
    out
}

/// Loss diagnostics from the last epoch of an update.
#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub grad_norm: f64,
}

/// Clipped-surrogate update: several epochs of gradient descent on the
/// batch, with gradient-norm clipping. A non-finite loss aborts the update
/// with the gradients cleared and the offending values reported.
pub fn ppo_update(
    model: &mut Model,
    trajectories: &[Trajectory],
    config: &PpoConfig,
) -> Result<UpdateStats, LearnError> {
    let (advantages, returns) = advantage_estimates(trajectories, config)?;
    let mut stats = UpdateStats::default();
    for _ in 0..config.epochs_per_update {
        model.params.zero_grad();
        let loss = accumulate_gradients(model, trajectories, &advantages, &returns, config);
        if !loss.total.is_finite() {
            model.params.zero_grad();
            return Err(LearnError::NonFiniteLoss {
                policy: loss.policy,
                value: loss.value,
                entropy: loss.entropy,
            });
        }
        stats = UpdateStats {
            policy_loss: loss.policy,
            value_loss: loss.value,
            entropy: loss.entropy,
            grad_norm: model.params.clip_grad_norm(config.max_grad_norm),
        };
        model.params.sgd_step(config.learning_rate);
    }
    Ok(stats)
}

/// Compare the gradients already accumulated in `params` against central
/// finite differences of `loss_fn`. Every parameter is checked, or a
/// seeded sample of `max_checks` of them when there are more. The error is
/// `|analytic - numeric| / (1 + max(|analytic|, |numeric|))`, and the worst
/// one is returned.
pub fn grad_check(
    params: &mut ParamStore,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    perturbation: f64,
    max_checks: usize,
    seed: u64,
) -> f64 {
    assert!(perturbation > 0.0, "perturbation must be positive");
    let analytic = params.grads().to_vec();
    let mut picks: Vec<usize> = (0..params.len()).collect();
    if picks.len() > max_checks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        picks.shuffle(&mut rng);
        picks.truncate(max_checks);
    }
    let mut worst = 0.0;
    for i in picks {
        let orig = params.data()[i];
        params.data_mut()[i] = orig + perturbation;
        let up = loss_fn(params);
        params.data_mut()[i] = orig - perturbation;
        let down = loss_fn(params);
        params.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * perturbation);
        let err = (analytic[i] - numeric).abs() / (1.0 + analytic[i].abs().max(numeric.abs()));
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub utility: UtilityParams,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeStats {
    pub episode: usize,
    pub steps: usize,
    pub ret: f64,
    pub coverage: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

fn episode_seed(base: u64, episode: usize) -> u64 {
    let mut z = base ^ (episode as u64).wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Train the model in place, pulling the world for each episode from
/// `worlds`: every episode rolls out a fresh simulator with its own
/// sampling stream, then applies one update. Episodes that terminate
/// before the first action are logged and skipped.
pub fn train_each(
    model: &mut Model,
    mut worlds: impl FnMut(usize) -> World,
    config: &TrainConfig,
) -> Result<Vec<EpisodeStats>, LearnError> {
    let mut log = Vec::with_capacity(config.ppo.episodes);
    for episode in 0..config.ppo.episodes {
        let mut sim = Simulator::new(worlds(episode), config.sim.clone())?;
        let traj = collect_rollout(
            &mut sim,
            model,
            &config.utility,
            &config.reward,
            config.ppo.steps_per_episode,
            episode_seed(config.seed, episode),
        )?;
        let mut stats = UpdateStats::default();
        if !traj.steps.is_empty() {
            stats = ppo_update(model, std::slice::from_ref(&traj), &config.ppo)?;
        }
        log.push(EpisodeStats {
            episode,
            steps: traj.steps.len(),
            ret: traj.total_return(),
            coverage: traj.coverage,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        });
    }
    Ok(log)
}

/// Train on a single fixed world for every episode.
pub fn train(
    model: &mut Model,
    world: &World,
    config: &TrainConfig,
) -> Result<Vec<EpisodeStats>, LearnError> {
    train_each(model, |_| world.clone(), config)
}
