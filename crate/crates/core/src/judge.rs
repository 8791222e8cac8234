//! Rule-based rollout diagnosis and its encoding as teacher context.
//!
//! The judge reads a parsed rollout, the ground truth and the verifier's
//! breakdown, and returns a small structured diagnosis: was the answer right,
//! does the reasoning support it, how good is the temporal and spatial
//! evidence, and what single cause best explains a failure. The diagnosis never
//! changes the reward; it is only encoded as privileged features for the
//! teacher.

use serde::{Deserialize, Serialize};

use crate::trace::TraceDocument;
use crate::verifier::{answer_reward, Component, GroundTruth, RewardBreakdown};
use crate::vocab::{SymbolKind, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerVerdict {
    Correct,
    Partial,
    Wrong,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    Supports,
    Conflicts,
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalBand {
    None,
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialBand {
    None,
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    WrongFocus,
    TooBroad,
    AnswerDrift,
    Incomplete,
    None,
}

impl AnswerVerdict {
    pub const ALL: [Self; 4] = [Self::Correct, Self::Partial, Self::Wrong, Self::Missing];
}
impl Consistency {
    pub const ALL: [Self; 3] = [Self::Supports, Self::Conflicts, Self::Insufficient];
}
impl TemporalBand {
    pub const ALL: [Self; 4] = [Self::None, Self::Low, Self::Mid, Self::High];
}
impl SpatialBand {
    pub const ALL: [Self; 3] = [Self::None, Self::Low, Self::High];
}
impl Cause {
    pub const ALL: [Self; 5] = [Self::WrongFocus, Self::TooBroad, Self::AnswerDrift, Self::Incomplete, Self::None];
}

/// Structured diagnosis of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JudgeFeedback {
    pub answer_verdict: AnswerVerdict,
    pub consistency: Consistency,
    pub temporal_band: TemporalBand,
    pub spatial_band: SpatialBand,
    pub cause: Cause,
}

#[derive(Serialize, Deserialize)]
struct FeedbackJson {
    feedback: JudgeFeedback,
}

impl JudgeFeedback {
    /// `{"feedback": {...}}` with the five fields.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&FeedbackJson { feedback: *self }).expect("feedback serializes")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let parsed: FeedbackJson = serde_json::from_str(text)?;
        Ok(parsed.feedback)
    }
}

/// Score thresholds for the temporal and spatial bands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeThresholds {
    pub temporal_low: f64,
    pub temporal_mid: f64,
    pub spatial_high: f64,
    /// Answer-side IoU below which a correct letter is only a partial answer.
    pub answer_grounding: f64,
}

impl Default for JudgeThresholds {
    fn default() -> Self {
        Self { temporal_low: 1.0 / 3.0, temporal_mid: 2.0 / 3.0, spatial_high: 0.5, answer_grounding: 0.5 }
    }
}

impl JudgeThresholds {
    pub fn temporal_band(&self, score: f64) -> TemporalBand {
        if score <= 0.0 {
            TemporalBand::None
        } else if score < self.temporal_low {
            TemporalBand::Low
        } else if score < self.temporal_mid {
            TemporalBand::Mid
        } else {
            TemporalBand::High
        }
    }

    pub fn spatial_band(&self, score: f64) -> SpatialBand {
        if score <= 0.0 {
            SpatialBand::None
        } else if score < self.spatial_high {
            SpatialBand::Low
        } else {
            SpatialBand::High
        }
    }
}

/// Diagnoses a rollout with the default thresholds.
pub fn diagnose(doc: &TraceDocument, gt: &GroundTruth, breakdown: &RewardBreakdown) -> JudgeFeedback {
    diagnose_with(doc, gt, breakdown, &JudgeThresholds::default())
}

/// Rule table:
///
/// - verdict: `missing` without answer tags; otherwise `correct`/`wrong` by
///   letter, downgraded or upgraded to `partial` when an applicable
///   answer-side IoU falls on the other side of `answer_grounding`;
/// - consistency: `insufficient` when missing, `conflicts` for a wrong letter,
///   `supports` for a right letter backed by at least a mid temporal band
///   (when the temporal component applies), else `insufficient`;
/// - cause, first match wins: `incomplete` (missing) > `wrong_focus` (wrong
///   letter, temporal band none/low) > `answer_drift` (wrong letter) >
///   `too_broad` (right letter, partial or insufficient) > `none`.
pub fn diagnose_with(
    doc: &TraceDocument,
    gt: &GroundTruth,
    breakdown: &RewardBreakdown,
    th: &JudgeThresholds,
) -> JudgeFeedback {
    let temporal_band = if breakdown.is_applicable(Component::ThkTmp) {
        th.temporal_band(breakdown.score(Component::ThkTmp))
    } else {
        TemporalBand::None
    };
    let spatial_band = if breakdown.is_applicable(Component::ThkSpa) {
        th.spatial_band(breakdown.score(Component::ThkSpa))
    } else {
        SpatialBand::None
    };

    if !doc.has_answer_tags {
        return JudgeFeedback {
            answer_verdict: AnswerVerdict::Missing,
            consistency: Consistency::Insufficient,
            temporal_band,
            spatial_band,
            cause: Cause::Incomplete,
        };
    }

    let letter_ok = answer_reward(doc, gt) == 1.0;
    let answer_grounding: Vec<f64> = [Component::AnsTmp, Component::AnsSpa]
        .into_iter()
        .filter(|&c| breakdown.is_applicable(c))
        .map(|c| breakdown.score(c))
        .collect();
    let grounding_ok = answer_grounding.iter().all(|&s| s >= th.answer_grounding);
    let grounding_some = !answer_grounding.is_empty() && grounding_ok;

    let answer_verdict = match (letter_ok, grounding_ok) {
        (true, true) => AnswerVerdict::Correct,
        (true, false) => AnswerVerdict::Partial,
        (false, _) if grounding_some => AnswerVerdict::Partial,
        (false, _) => AnswerVerdict::Wrong,
    };

    let temporal_ok = !breakdown.is_applicable(Component::ThkTmp) || temporal_band >= TemporalBand::Mid;
    let consistency = if !letter_ok {
        Consistency::Conflicts
    } else if temporal_ok {
        Consistency::Supports
    } else {
        Consistency::Insufficient
    };

    let cause = if !letter_ok {
        if temporal_band <= TemporalBand::Low {
            Cause::WrongFocus
        } else {
            Cause::AnswerDrift
        }
    } else if answer_verdict != AnswerVerdict::Correct || consistency != Consistency::Supports {
        Cause::TooBroad
    } else {
        Cause::None
    };

    JudgeFeedback { answer_verdict, consistency, temporal_band, spatial_band, cause }
}

/// Layout of the teacher-only privileged feature block.
///
/// Blocks, in order: the five one-hot feedback fields; the verified answer
/// letter; the segment start bucket, segment end bucket, key-frame count
/// bucket and first key-frame bucket (each time bucket block has a trailing
/// "absent" slot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivilegedLayout {
    pub n_letters: usize,
    pub frame_count: u32,
    pub time_buckets: usize,
}

pub const FEEDBACK_DIM: usize = 4 + 3 + 4 + 3 + 5;
const KEYFRAME_COUNT_BUCKETS: usize = 4;

impl PrivilegedLayout {
    pub fn answer_offset(&self) -> usize {
        FEEDBACK_DIM
    }

    pub fn segment_start_offset(&self) -> usize {
        self.answer_offset() + self.n_letters
    }

    pub fn segment_end_offset(&self) -> usize {
        self.segment_start_offset() + self.time_buckets + 1
    }

    pub fn keyframe_count_offset(&self) -> usize {
        self.segment_end_offset() + self.time_buckets + 1
    }

    pub fn keyframe_time_offset(&self) -> usize {
        self.keyframe_count_offset() + KEYFRAME_COUNT_BUCKETS
    }

    pub fn dim(&self) -> usize {
        self.keyframe_time_offset() + self.time_buckets + 1
    }

    pub fn time_bucket(&self, t: f64) -> usize {
        let b = (t.max(0.0) * self.time_buckets as f64 / self.frame_count.max(1) as f64) as usize;
        b.min(self.time_buckets - 1)
    }

    /// Frames `[lo, hi]` covered by a time bucket.
    pub fn bucket_frames(&self, bucket: usize) -> (u32, u32) {
        let f = self.frame_count as f64;
        let n = self.time_buckets as f64;
        let lo = (bucket as f64 * f / n).ceil() as u32;
        let hi = (((bucket + 1) as f64 * f / n).ceil() as u32).saturating_sub(1);
        (lo, hi.max(lo))
    }
}

/// Offsets of the five feedback blocks inside the feedback encoding.
pub mod block {
    pub const VERDICT: usize = 0;
    pub const CONSISTENCY: usize = 4;
    pub const TEMPORAL: usize = 7;
    pub const SPATIAL: usize = 11;
    pub const CAUSE: usize = 14;
}

/// One-hot blocks for the five feedback fields (`FEEDBACK_DIM` entries).
pub fn feedback_one_hot(f: &JudgeFeedback) -> [f64; FEEDBACK_DIM] {
    let mut v = [0.0; FEEDBACK_DIM];
    let pos = |all: &[_], x| all.iter().position(|y| *y == x).unwrap();
    v[block::VERDICT + pos(&AnswerVerdict::ALL, f.answer_verdict)] = 1.0;
    v[block::CONSISTENCY + Consistency::ALL.iter().position(|y| *y == f.consistency).unwrap()] = 1.0;
    v[block::TEMPORAL + TemporalBand::ALL.iter().position(|y| *y == f.temporal_band).unwrap()] = 1.0;
    v[block::SPATIAL + SpatialBand::ALL.iter().position(|y| *y == f.spatial_band).unwrap()] = 1.0;
    v[block::CAUSE + Cause::ALL.iter().position(|y| *y == f.cause).unwrap()] = 1.0;
    v
}

/// Privileged teacher context: feedback blocks (zeroed when `feedback` is
/// `None`, i.e. answer-only conditioning) followed by the verified answer and
/// a coarse evidence encoding.
pub fn encode_feedback(
    feedback: Option<&JudgeFeedback>,
    gt: &GroundTruth,
    vocab: &Vocabulary,
    layout: &PrivilegedLayout,
) -> Vec<f64> {
    let mut v = vec![0.0; layout.dim()];
    if let Some(f) = feedback {
        v[..FEEDBACK_DIM].copy_from_slice(&feedback_one_hot(f));
    }
    if let SymbolKind::Letter(i) = vocab.kind(gt.answer_symbol) {
        if i < layout.n_letters {
            v[layout.answer_offset() + i] = 1.0;
        }
    }
    let absent = layout.time_buckets;
    let (sb, eb) = match gt.segment {
        Some(seg) => (layout.time_bucket(seg.start), layout.time_bucket(seg.end)),
        None => (absent, absent),
    };
    v[layout.segment_start_offset() + sb] = 1.0;
    v[layout.segment_end_offset() + eb] = 1.0;
    let keyframes = gt.keyframe_times.as_deref().unwrap_or(&[]);
    v[layout.keyframe_count_offset() + keyframes.len().min(KEYFRAME_COUNT_BUCKETS - 1)] = 1.0;
    let kb = keyframes.first().map_or(absent, |&t| layout.time_bucket(t));
    v[layout.keyframe_time_offset() + kb] = 1.0;
    v
}
