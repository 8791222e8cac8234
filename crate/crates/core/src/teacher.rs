//! Teacher parameters, privileged replay and the top-K local-support
//! discrepancy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::{block, PrivilegedLayout};
use crate::policy::{distribution, featurize, featurize_at, FeatureLayout, Gate, PolicyParams, PolicyState, Rollout};
use crate::vocab::{Tag, TokenId, Vocabulary};

/// How the teacher tracks the student.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherMode {
    /// `teacher ← (1 − rate)·teacher + rate·student` every step.
    Ema { rate: f64 },
    /// The teacher is the student.
    Current,
    /// Copy the student when `step % period == 0`.
    SyncN { period: u64 },
}

impl Default for TeacherMode {
    fn default() -> Self {
        TeacherMode::Ema { rate: 0.01 }
    }
}

impl TeacherMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TeacherMode::Ema { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(Error::InvalidConfig(format!("EMA rate {rate} outside (0, 1]")))
            }
            TeacherMode::SyncN { period: 0 } => Err(Error::InvalidConfig("sync period must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Moves the teacher toward the student; steps are numbered from 1.
pub fn update_teacher(mode: TeacherMode, teacher: &mut PolicyParams, student: &PolicyParams, step: u64) -> Result<()> {
    teacher.check_shape(student)?;
    match mode {
        TeacherMode::Ema { rate } => {
            for (t, s) in teacher.weights.iter_mut().zip(&student.weights) {
                *t = (1.0 - rate) * *t + rate * s;
            }
        }
        TeacherMode::Current => teacher.weights.copy_from_slice(&student.weights),
        TeacherMode::SyncN { period } => {
            if period > 0 && step.is_multiple_of(period) {
                teacher.weights.copy_from_slice(&student.weights);
            }
        }
    }
    Ok(())
}

/// Teacher next-token distribution for position `t` after `prefix`, with the
/// privileged block filled in.
pub fn teacher_distribution(
    teacher: &PolicyParams,
    layout: &FeatureLayout,
    vocab: &Vocabulary,
    context: &[f64],
    privileged: &[f64],
    prefix: &[TokenId],
    t: usize,
) -> Result<Vec<f64>> {
    let state = featurize(layout, vocab, context, Some(privileged), prefix, t)?;
    distribution(teacher, &state)
}

/// Teacher state matching a student state, with privileged features added.
pub fn privileged_state(
    layout: &FeatureLayout,
    context: &[f64],
    privileged: &[f64],
    student: &PolicyState,
) -> Result<PolicyState> {
    featurize_at(layout, context, Some(privileged), student.prev_token, student.position, student.slot)
}

/// Scores every position of a student rollout under the teacher. The teacher
/// never samples; it only conditions on the student's prefix.
pub fn replay(
    teacher: &PolicyParams,
    layout: &FeatureLayout,
    context: &[f64],
    privileged: &[f64],
    rollout: &Rollout,
) -> Result<Vec<Vec<f64>>> {
    rollout.states.iter().map(|s| distribution(teacher, &privileged_state(layout, context, privileged, s)?)).collect()
}

/// Top-K teacher candidates plus the realized token, with both distributions
/// renormalized over that set.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSupport {
    pub tokens: Vec<TokenId>,
    pub teacher: Vec<f64>,
    pub student: Vec<f64>,
    pub teacher_mass: f64,
    pub student_mass: f64,
}

impl LocalSupport {
    pub fn position(&self, token: TokenId) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }
}

/// The `k` most probable tokens, ties broken by lower id.
pub fn top_k(dist: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..dist.len()).collect();
    ids.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    ids.truncate(k.min(dist.len()));
    ids
}

/// Renormalizes both distributions over an explicit support.
pub fn restrict(teacher: &[f64], student: &[f64], tokens: Vec<TokenId>) -> LocalSupport {
    let teacher_mass: f64 = tokens.iter().map(|&t| teacher[t]).sum();
    let student_mass: f64 = tokens.iter().map(|&t| student[t]).sum();
    LocalSupport {
        teacher: tokens.iter().map(|&t| teacher[t] / teacher_mass).collect(),
        student: tokens.iter().map(|&t| student[t] / student_mass).collect(),
        tokens,
        teacher_mass,
        student_mass,
    }
}

pub fn topk_support(teacher: &[f64], student: &[f64], k: usize, realized: TokenId) -> LocalSupport {
    let mut tokens = top_k(teacher, k);
    if !tokens.contains(&realized) {
        tokens.push(realized);
    }
    restrict(teacher, student, tokens)
}

/// `ln q̃(y) − ln π̃(y)` on the support; `None` when `realized` is outside it.
pub fn local_support_delta(support: &LocalSupport, realized: TokenId) -> Option<f64> {
    let i = support.position(realized)?;
    Some(support.teacher[i].ln() - support.student[i].ln())
}

/// Full-distribution log ratio on the realized token.
pub fn sampled_token_delta(teacher: &[f64], student: &[f64], realized: TokenId) -> f64 {
    teacher[realized].ln() - student[realized].ln()
}

/// `ln(P(U) / Q(U))`: the term separating the local-support delta from the
/// sampled-token delta.
pub fn calibration_term(support: &LocalSupport) -> f64 {
    support.student_mass.ln() - support.teacher_mass.ln()
}

/// Writes a fixed privileged-reading prior into the teacher-visible columns.
///
/// The student's privileged features are always zero, so these weights never
/// move its logits and receive no gradient; they only shape how the teacher
/// reads the verified answer, the evidence buckets and the feedback.
///
/// Only shifts that differ between tokens valid at the same slot survive
/// renormalization on the local support, so the prior targets specific
/// tokens per slot class: the verified letter at the answer slot, the digits
/// of evidence frames at timestamp slots, and opening a timestamp at
/// structural slots when the judge found no temporal evidence.
pub fn add_reading_prior(
    params: &mut PolicyParams,
    layout: &FeatureLayout,
    privileged: &PrivilegedLayout,
    vocab: &Vocabulary,
    strength: f64,
) {
    let mut add = |gate: Gate, i: usize, tokens: &[TokenId], w: f64| {
        let c = layout.privileged_offset(gate) + i;
        for &t in tokens {
            *params.get_mut(t, c) += w;
        }
    };

    for j in 0..privileged.n_letters.min(vocab.n_letters()) {
        add(Gate::Letter, privileged.answer_offset() + j, &[vocab.letter(j)], strength);
    }

    let time_close = vocab.tag(Tag::TimeClose);
    for bucket in 0..privileged.time_buckets {
        let (lo, hi) = privileged.bucket_frames(bucket);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for frame in lo..=hi.min(privileged.frame_count.saturating_sub(1)) {
            let (lead, next) = if frame < 10 {
                (vocab.digit(frame as u8), time_close)
            } else {
                (vocab.digit((frame / 10 % 10) as u8), vocab.digit((frame % 10) as u8))
            };
            if !first.contains(&lead) {
                first.push(lead);
            }
            if !second.contains(&next) {
                second.push(next);
            }
        }
        for offset in
            [privileged.segment_start_offset(), privileged.segment_end_offset(), privileged.keyframe_time_offset()]
        {
            add(Gate::TimeFirst, offset + bucket, &first, strength);
            add(Gate::TimeSecond, offset + bucket, &second, strength);
        }
    }

    let t_open = vocab.tag(Tag::TimeOpen);
    // No temporal evidence at all: prefer opening a timestamp over closing.
    add(Gate::Structure, block::TEMPORAL, &[t_open], strength / 2.0);
}
