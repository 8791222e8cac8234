//! Group-relative advantages, teacher-guided token credit and the clipped
//! policy-gradient update.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{diagnose_with, encode_feedback, JudgeFeedback, JudgeThresholds, PrivilegedLayout};
use crate::policy::{
    distribution, entropy, log_softmax, sample_rollout, FeatureLayout, PolicyParams, Rollout, RolloutContext,
};
use crate::rng;
use crate::teacher::{
    local_support_delta, privileged_state, sampled_token_delta, topk_support, update_teacher, TeacherMode,
};
use crate::trace::parse_trace;
use crate::verifier::{
    anneal_sigma, rollout_reward, Component, GroundTruth, RewardBreakdown, ThinkingTemporal, VerifierConfig,
};
use crate::vocab::Vocabulary;

/// Which teacher-student discrepancy drives the token weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaVariant {
    TopK,
    SampledToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub group_size: usize,
    pub prompts_per_step: usize,
    pub max_len: usize,
    pub topk: usize,
    pub weight_clip: f64,
    pub pg_clip: f64,
    pub lambda0: f64,
    pub lambda_anneal_steps: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub adv_epsilon: f64,
    pub teacher_mode: TeacherMode,
    pub use_feedback: bool,
    pub delta_variant: DeltaVariant,
    /// Replay the teacher even when the mixing coefficient is zero.
    pub teacher_replay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            prompts_per_step: 4,
            max_len: 64,
            topk: 16,
            weight_clip: 0.2,
            pg_clip: 0.2,
            lambda0: 0.5,
            lambda_anneal_steps: 600,
            learning_rate: 0.5,
            weight_decay: 0.0,
            max_grad_norm: 5.0,
            adv_epsilon: 1e-6,
            teacher_mode: TeacherMode::default(),
            use_feedback: true,
            delta_variant: DeltaVariant::TopK,
            teacher_replay: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group_size {} < 2", self.group_size));
        }
        if self.prompts_per_step == 0 || self.max_len == 0 || self.topk == 0 {
            return bad("prompts_per_step, max_len and topk must be positive".into());
        }
        if !(self.weight_clip > 0.0 && self.weight_clip < 1.0) {
            return bad(format!("weight_clip {} outside (0, 1)", self.weight_clip));
        }
        if !(self.pg_clip > 0.0 && self.pg_clip < 1.0) {
            return bad(format!("pg_clip {} outside (0, 1)", self.pg_clip));
        }
        if !(0.0..=1.0).contains(&self.lambda0) {
            return bad(format!("lambda0 {} outside [0, 1]", self.lambda0));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0".into());
        }
        if self.max_grad_norm.is_nan()
            || self.max_grad_norm <= 0.0
            || self.adv_epsilon.is_nan()
            || self.adv_epsilon <= 0.0
        {
            return bad("max_grad_norm and adv_epsilon must be positive".into());
        }
        self.teacher_mode.validate()
    }

    fn needs_teacher(&self, lambda: f64) -> bool {
        lambda > 0.0 || self.teacher_replay
    }
}

/// `(R_i − mean) / (population std + eps)` within one group.
pub fn group_advantage(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    // The float mean of equal values can miss them by an ulp.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(exp(sign(A)·Δ), 1 − eps_w, 1 + eps_w)`.
pub fn token_weight(delta: f64, advantage: f64, eps_w: f64) -> f64 {
    (sign(advantage) * delta).exp().clamp(1.0 - eps_w, 1.0 + eps_w)
}

/// Linear decay from `lambda0` at step 0 to zero at `anneal_steps`.
pub fn lambda_schedule(step: u64, lambda0: f64, anneal_steps: u64) -> f64 {
    if step >= anneal_steps {
        return 0.0;
    }
    lambda0 * (1.0 - step as f64 / anneal_steps as f64)
}

/// `A·((1 − λ) + λ·m)`.
pub fn mixed_advantage(advantage: f64, weight: f64, lambda: f64) -> f64 {
    advantage * ((1.0 - lambda) + lambda * weight)
}

/// Per-token credit for one rollout position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenCredit {
    pub delta: f64,
    pub weight: f64,
    pub advantage: f64,
    pub ratio: f64,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grad` to `max_norm` when its norm exceeds it; returns the norm
/// before clipping.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Clipped surrogate averaged per rollout then across rollouts, and its
/// gradient with respect to the current parameters.
///
/// `old_logprobs[r][t]` are the sampling-time log-probabilities and
/// `advantages[r][t]` the token advantages. Tokens on the clipped branch of
/// the `min` contribute no gradient.
pub fn surrogate_loss_and_grad(
    params: &PolicyParams,
    rollouts: &[&Rollout],
    old_logprobs: &[&[f64]],
    advantages: &[&[f64]],
    pg_clip: f64,
) -> Result<(f64, Vec<f64>)> {
    if rollouts.len() != old_logprobs.len() || rollouts.len() != advantages.len() {
        return Err(Error::LengthMismatch(format!(
            "{} rollouts, {} log-prob rows, {} advantage rows",
            rollouts.len(),
            old_logprobs.len(),
            advantages.len()
        )));
    }
    if rollouts.is_empty() {
        return Ok((0.0, vec![0.0; params.weights.len()]));
    }
    let n = rollouts.len() as f64;
    let parts: Vec<(f64, Vec<ActiveToken>)> = rollouts
        .par_iter()
        .zip(old_logprobs.par_iter())
        .zip(advantages.par_iter())
        .map(|((r, old), adv)| rollout_surrogate(params, r, old, adv, pg_clip, n))
        .collect::<Result<_>>()?;
    let objective = parts.iter().map(|(o, _)| o).sum();

    // Each weight row sums its contributions in rollout and token order, so
    // the result does not depend on how rows are split across threads.
    let mut grad = vec![0.0; params.weights.len()];
    grad.par_chunks_mut(params.dim).enumerate().for_each(|(v, row)| {
        for ((_, active), r) in parts.iter().zip(rollouts) {
            for tok in active {
                let c = tok.coef[v];
                if c != 0.0 {
                    for (i, x) in r.states[tok.position].features.iter() {
                        row[i] += c * x;
                    }
                }
            }
        }
    });
    Ok((objective, grad))
}

/// Gradient coefficients `scale·Â·ρ·(onehot − π)` of one unclipped token.
struct ActiveToken {
    position: usize,
    coef: Vec<f64>,
}

fn rollout_surrogate(
    params: &PolicyParams,
    rollout: &Rollout,
    old: &[f64],
    adv: &[f64],
    pg_clip: f64,
    n_rollouts: f64,
) -> Result<(f64, Vec<ActiveToken>)> {
    let len = rollout.states.len();
    if old.len() != len || adv.len() != len || rollout.tokens.len() != len {
        return Err(Error::LengthMismatch(format!(
            "rollout of {} tokens with {} states, {} log-probs, {} advantages",
            rollout.tokens.len(),
            len,
            old.len(),
            adv.len()
        )));
    }
    let mut active = Vec::new();
    if len == 0 {
        return Ok((0.0, active));
    }
    let scale = 1.0 / (n_rollouts * len as f64);
    let mut objective = 0.0;
    for t in 0..len {
        let token = rollout.tokens[t];
        let a = adv[t];
        let logp = log_softmax(&params.logits(&rollout.states[t])?);
        let ratio = (logp[token] - old[t]).exp();
        let clipped = ratio.clamp(1.0 - pg_clip, 1.0 + pg_clip);
        let unclipped_term = ratio * a;
        let clipped_term = clipped * a;
        objective += unclipped_term.min(clipped_term) * scale;
        if unclipped_term <= clipped_term && a != 0.0 {
            let c = scale * a * ratio;
            let coef =
                logp.iter().enumerate().map(|(v, lp)| c * (f64::from(u8::from(v == token)) - lp.exp())).collect();
            active.push(ActiveToken { position: t, coef });
        }
    }
    Ok((objective, active))
}

/// One prompt: the student-visible context and the verifier's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub context: Vec<f64>,
    pub ground_truth: GroundTruth,
}

/// Everything a training step reads but does not change.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub vocab: Vocabulary,
    pub features: FeatureLayout,
    pub privileged: PrivilegedLayout,
    pub optimizer: OptimizerConfig,
    pub verifier: VerifierConfig,
    pub judge: JudgeThresholds,
    pub seed: u64,
}

/// A scored rollout with its credit assignment.
#[derive(Debug, Clone)]
pub struct ScoredRollout {
    pub rollout: Rollout,
    pub breakdown: RewardBreakdown,
    pub advantage: f64,
    pub feedback: Option<JudgeFeedback>,
    pub credits: Vec<TokenCredit>,
    pub mean_entropy: f64,
}

/// Per-step training metrics, one CSV row each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub total_reward: f64,
    pub group_mean_reward: f64,
    pub answer_acc: f64,
    pub r_fmt: f64,
    pub r_thk_tmp_seg: f64,
    pub r_thk_tmp_pt: f64,
    pub r_thk_spa: f64,
    pub r_ans_tmp: f64,
    pub r_ans_spa: f64,
    pub grad_norm: f64,
    pub entropy: f64,
    pub lambda: f64,
    pub sigma: f64,
}

pub const METRICS_HEADER: [&str; 14] = [
    "step",
    "total_reward",
    "group_mean_reward",
    "answer_acc",
    "r_fmt",
    "r_thk_tmp_seg",
    "r_thk_tmp_pt",
    "r_thk_spa",
    "r_ans_tmp",
    "r_ans_spa",
    "grad_norm",
    "entropy",
    "lambda",
    "sigma",
];

impl StepMetrics {
    pub fn values(&self) -> [f64; 13] {
        [
            self.total_reward,
            self.group_mean_reward,
            self.answer_acc,
            self.r_fmt,
            self.r_thk_tmp_seg,
            self.r_thk_tmp_pt,
            self.r_thk_spa,
            self.r_ans_tmp,
            self.r_ans_spa,
            self.grad_norm,
            self.entropy,
            self.lambda,
            self.sigma,
        ]
    }

    pub fn write_csv_row<W: Write>(&self, w: &mut csv::Writer<W>) -> Result<()> {
        let mut row = vec![self.step.to_string()];
        row.extend(self.values().iter().map(|v| v.to_string()));
        w.write_record(&row)?;
        Ok(())
    }
}

/// Samples a group per prompt, scores it and assigns token credit, without
/// touching any parameters.
pub fn score_batch(
    prompts: &[Prompt],
    student: &PolicyParams,
    teacher: &PolicyParams,
    setup: &TrainSetup,
    step: u64,
) -> Result<Vec<Vec<ScoredRollout>>> {
    let cfg = &setup.optimizer;
    let lambda = lambda_schedule(step, cfg.lambda0, cfg.lambda_anneal_steps);
    let jobs: Vec<(usize, usize)> = (0..prompts.len()).flat_map(|p| (0..cfg.group_size).map(move |i| (p, i))).collect();

    let sampled: Vec<(Rollout, RewardBreakdown, Option<JudgeFeedback>)> = jobs
        .par_iter()
        .map(|&(p, i)| {
            let prompt = &prompts[p];
            let ctx = RolloutContext { layout: &setup.features, vocab: &setup.vocab, context: &prompt.context };
            let mut r = rng::stream(setup.seed, &[rng::ROLLOUTS, step, p as u64, i as u64]);
            let rollout = sample_rollout(student, &ctx, &mut r, cfg.max_len)?;
            let doc = parse_trace(&rollout.tokens, &setup.vocab);
            let v = &setup.verifier;
            let breakdown = rollout_reward(&doc, &prompt.ground_truth, &v.weights, &v.sigma, v.spatial_tolerance, step);
            let feedback =
                cfg.use_feedback.then(|| diagnose_with(&doc, &prompt.ground_truth, &breakdown, &setup.judge));
            Ok((rollout, breakdown, feedback))
        })
        .collect::<Result<_>>()?;

    let mut advantages = Vec::with_capacity(jobs.len());
    for group in sampled.chunks(cfg.group_size) {
        let rewards: Vec<f64> = group.iter().map(|(_, b, _)| b.total).collect();
        advantages.extend(group_advantage(&rewards, cfg.adv_epsilon)?);
    }

    let scored: Vec<ScoredRollout> = sampled
        .into_par_iter()
        .zip(advantages.into_par_iter())
        .zip(jobs.par_iter())
        .map(|(((rollout, breakdown, feedback), advantage), &(p, _))| {
            let prompt = &prompts[p];
            let privileged = cfg
                .needs_teacher(lambda)
                .then(|| encode_feedback(feedback.as_ref(), &prompt.ground_truth, &setup.vocab, &setup.privileged));
            let mut credits = Vec::with_capacity(rollout.len());
            let mut entropy_sum = 0.0;
            for (t, state) in rollout.states.iter().enumerate() {
                let token = rollout.tokens[t];
                let student_dist = &rollout.dists[t];
                entropy_sum += entropy(student_dist);
                let delta = match &privileged {
                    Some(priv_feats) => {
                        let ts = privileged_state(&setup.features, &prompt.context, priv_feats, state)?;
                        let teacher_dist = distribution(teacher, &ts)?;
                        match cfg.delta_variant {
                            DeltaVariant::TopK => {
                                let support = topk_support(&teacher_dist, student_dist, cfg.topk, token);
                                local_support_delta(&support, token).expect("realized token is in support")
                            }
                            DeltaVariant::SampledToken => sampled_token_delta(&teacher_dist, student_dist, token),
                        }
                    }
                    None => 0.0,
                };
                let weight = token_weight(delta, advantage, cfg.weight_clip);
                credits.push(TokenCredit {
                    delta,
                    weight,
                    advantage: mixed_advantage(advantage, weight, lambda),
                    ratio: 1.0,
                });
            }
            let mean_entropy = entropy_sum / rollout.len().max(1) as f64;
            Ok(ScoredRollout { rollout, breakdown, advantage, feedback, credits, mean_entropy })
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(prompts.len());
    let mut it = scored.into_iter();
    for _ in 0..prompts.len() {
        groups.push(it.by_ref().take(cfg.group_size).collect());
    }
    Ok(groups)
}

/// One iteration of the training loop at 0-based `step`: sample, score,
/// assign credit, take a clipped policy-gradient ascent step with decoupled
/// weight decay, then move the teacher.
pub fn train_step(
    prompts: &[Prompt],
    student: &mut PolicyParams,
    teacher: &mut PolicyParams,
    setup: &TrainSetup,
    step: u64,
) -> Result<StepMetrics> {
    let cfg = &setup.optimizer;
    cfg.validate()?;
    student.check_shape(teacher)?;
    let lambda = lambda_schedule(step, cfg.lambda0, cfg.lambda_anneal_steps);
    let sigma = anneal_sigma(step, &setup.verifier.sigma);

    let groups = score_batch(prompts, student, teacher, setup, step)?;
    let flat: Vec<&ScoredRollout> = groups.iter().flatten().collect();

    let rollouts: Vec<&Rollout> = flat.iter().map(|s| &s.rollout).collect();
    let old: Vec<&[f64]> = flat.iter().map(|s| s.rollout.logprobs.as_slice()).collect();
    let adv_rows: Vec<Vec<f64>> = flat.iter().map(|s| s.credits.iter().map(|c| c.advantage).collect()).collect();
    let adv: Vec<&[f64]> = adv_rows.iter().map(|v| v.as_slice()).collect();
    let (_, mut grad) = surrogate_loss_and_grad(student, &rollouts, &old, &adv, cfg.pg_clip)?;
    let grad_norm = clip_gradient(&mut grad, cfg.max_grad_norm);

    let lr = cfg.learning_rate;
    let decay = 1.0 - lr * cfg.weight_decay;
    for (w, g) in student.weights.iter_mut().zip(&grad) {
        *w = *w * decay + lr * g;
    }
    update_teacher(cfg.teacher_mode, teacher, student, step + 1)?;

    Ok(summarize(&groups, step, grad_norm, lambda, sigma))
}

fn summarize(groups: &[Vec<ScoredRollout>], step: u64, grad_norm: f64, lambda: f64, sigma: f64) -> StepMetrics {
    let all: Vec<&ScoredRollout> = groups.iter().flatten().collect();
    let n = all.len().max(1) as f64;
    let mean_where = |pick: &dyn Fn(&ScoredRollout) -> Option<f64>| {
        let (sum, count) = all.iter().filter_map(|s| pick(s)).fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let comp = |c: Component| move |s: &ScoredRollout| s.breakdown.is_applicable(c).then(|| s.breakdown.score(c));
    let thk = |kind: ThinkingTemporal| {
        move |s: &ScoredRollout| {
            (s.breakdown.is_applicable(Component::ThkTmp) && s.breakdown.thinking_temporal == Some(kind))
                .then(|| s.breakdown.score(Component::ThkTmp))
        }
    };
    let group_means: Vec<f64> =
        groups.iter().map(|g| g.iter().map(|s| s.breakdown.total).sum::<f64>() / g.len().max(1) as f64).collect();
    StepMetrics {
        step,
        total_reward: all.iter().map(|s| s.breakdown.total).sum::<f64>() / n,
        group_mean_reward: group_means.iter().sum::<f64>() / group_means.len().max(1) as f64,
        answer_acc: mean_where(&comp(Component::Ans)),
        r_fmt: mean_where(&comp(Component::Fmt)),
        r_thk_tmp_seg: mean_where(&thk(ThinkingTemporal::Segment)),
        r_thk_tmp_pt: mean_where(&thk(ThinkingTemporal::Point)),
        r_thk_spa: mean_where(&comp(Component::ThkSpa)),
        r_ans_tmp: mean_where(&comp(Component::AnsTmp)),
        r_ans_spa: mean_where(&comp(Component::AnsSpa)),
        grad_norm,
        entropy: all.iter().map(|s| s.mean_entropy).sum::<f64>() / n,
        lambda,
        sigma,
    }
}
