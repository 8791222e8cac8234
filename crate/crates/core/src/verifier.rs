//! Compound verifiable reward.
//!
//! A rollout's reward is the weighted sum of the components applicable to its
//! sample: answer correctness, format, answer-side temporal and spatial IoU,
//! and thinking-side temporal and spatial grounding. Components outside the
//! applicable set contribute exactly zero.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{BBox, GroundedTuple, TraceDocument};
use crate::vocab::TokenId;

/// Reward component keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Ans,
    Fmt,
    AnsTmp,
    AnsSpa,
    ThkTmp,
    ThkSpa,
}

impl Component {
    pub const ALL: [Component; 6] =
        [Component::Ans, Component::Fmt, Component::AnsTmp, Component::AnsSpa, Component::ThkTmp, Component::ThkSpa];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_grounding(self) -> bool {
        !matches!(self, Component::Ans | Component::Fmt)
    }
}

/// Closed interval in frame units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if start <= end {
            Ok(Self { start, end })
        } else {
            Err(Error::InvalidInterval { start, end })
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Annotated key frame: its time and the ground-truth boxes on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub time: f64,
    pub boxes: Vec<BBox>,
}

/// Verified answer and grounding supervision for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub answer_symbol: TokenId,
    pub segment: Option<Interval>,
    pub keyframe_times: Option<Vec<f64>>,
    /// Boxes per key frame; times correspond to `keyframe_times`.
    pub keyframe_boxes: Vec<Keyframe>,
    pub applicable: BTreeSet<Component>,
}

impl GroundTruth {
    /// Checks that every applicable component has the supervision it needs.
    pub fn validate(&self) -> Result<()> {
        if let Some(seg) = self.segment {
            Interval::new(seg.start, seg.end)?;
        }
        let has_keyframes = self.keyframe_times.as_ref().is_some_and(|k| !k.is_empty());
        let has_boxes = self.keyframe_boxes.iter().any(|k| !k.boxes.is_empty());
        let need = |c: Component, ok: bool, what: &str| -> Result<()> {
            if self.applicable.contains(&c) && !ok {
                Err(Error::InvalidConfig(format!("{c:?} is applicable but {what} is missing")))
            } else {
                Ok(())
            }
        };
        need(Component::ThkTmp, self.segment.is_some() || has_keyframes, "temporal supervision")?;
        need(Component::AnsTmp, self.segment.is_some(), "the segment")?;
        need(Component::ThkSpa, has_keyframes && has_boxes, "key-frame boxes")?;
        need(Component::AnsSpa, has_boxes, "key-frame boxes")?;
        Ok(())
    }

    /// Which temporal thinking reward applies: interval supervision takes
    /// precedence over key frames, so the two never co-occur.
    pub fn thinking_temporal_kind(&self) -> Option<ThinkingTemporal> {
        if !self.applicable.contains(&Component::ThkTmp) {
            None
        } else if self.segment.is_some() {
            Some(ThinkingTemporal::Segment)
        } else {
            Some(ThinkingTemporal::Point)
        }
    }

    pub fn requires_grounding(&self) -> bool {
        self.applicable.iter().any(|c| c.is_grounding())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThinkingTemporal {
    Segment,
    Point,
}

/// Per-component weights, indexed like [`Component::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights(pub [f64; 6]);

impl Default for RewardWeights {
    fn default() -> Self {
        Self([1.0; 6])
    }
}

impl RewardWeights {
    pub fn get(&self, c: Component) -> f64 {
        self.0[c.index()]
    }
}

/// Linear annealing of the proximity width used by the point temporal reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    pub sigma_hi: f64,
    pub sigma_lo: f64,
    pub anneal_steps: u64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self { sigma_hi: 4.0, sigma_lo: 1.0, anneal_steps: 600 }
    }
}

impl SigmaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_lo > 0.0 && self.sigma_hi >= self.sigma_lo) || self.anneal_steps == 0 {
            return Err(Error::InvalidConfig(format!("bad sigma schedule {self:?}")));
        }
        Ok(())
    }
}

pub fn anneal_sigma(step: u64, schedule: &SigmaSchedule) -> f64 {
    if step >= schedule.anneal_steps {
        return schedule.sigma_lo;
    }
    let frac = step as f64 / schedule.anneal_steps as f64;
    schedule.sigma_hi + (schedule.sigma_lo - schedule.sigma_hi) * frac
}

/// Temporal IoU of two closed intervals.
pub fn interval_iou(a: Interval, b: Interval) -> Result<f64> {
    Interval::new(a.start, a.end)?;
    Interval::new(b.start, b.end)?;
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0.0 {
        // Both are points; they coincide iff the union is empty.
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok(inter / union)
}

/// Box IoU on inclusive cell areas.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let span = |lo1: u32, hi1: u32, lo2: u32, hi2: u32| -> u64 {
        (hi1.min(hi2) as i64 - lo1.max(lo2) as i64 + 1).max(0) as u64
    };
    let inter = span(a.x1, a.x2, b.x1, b.x2) * span(a.y1, a.y2, b.y1, b.y2);
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Fraction of thinking timestamps inside the annotated segment.
pub fn thinking_temporal_segment_reward(timestamps: &[f64], segment: Interval) -> f64 {
    if timestamps.is_empty() {
        return 0.0;
    }
    let inside = timestamps.iter().filter(|&&t| segment.contains(t)).count();
    inside as f64 / timestamps.len() as f64
}

/// Mean Gaussian proximity of each timestamp to its nearest key frame.
pub fn thinking_temporal_point_reward(timestamps: &[f64], keyframe_times: &[f64], sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidSigma(sigma));
    }
    if timestamps.is_empty() || keyframe_times.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = timestamps
        .iter()
        .map(|&t| {
            let d = nearest(keyframe_times, t).1;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(sum / timestamps.len() as f64)
}

/// Index and distance of the nearest key frame (earliest on ties).
fn nearest(times: &[f64], t: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &k) in times.iter().enumerate() {
        let d = (t - k).abs();
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mean best IoU of matched thinking tuples against the boxes on their
/// nearest key frame. A tuple matches when that key frame is within `tol`;
/// the sum is normalized by `max(|matched|, 1)`.
pub fn thinking_spatial_reward(tuples: &[GroundedTuple], keyframes: &[Keyframe], tol: f64) -> f64 {
    if tuples.is_empty() || keyframes.is_empty() {
        return 0.0;
    }
    let times: Vec<f64> = keyframes.iter().map(|k| k.time).collect();
    let mut matched = 0usize;
    let mut sum = 0.0;
    for tuple in tuples {
        let (j, d) = nearest(&times, tuple.time);
        if d <= tol {
            matched += 1;
            sum += keyframes[j].boxes.iter().map(|b| box_iou(&tuple.bbox, b)).fold(0.0, f64::max);
        }
    }
    sum / matched.max(1) as f64
}

/// 1 when the answer section's symbol equals the verified one.
pub fn answer_reward(doc: &TraceDocument, gt: &GroundTruth) -> f64 {
    if doc.has_answer_tags && doc.answer_symbol == Some(gt.answer_symbol) {
        1.0
    } else {
        0.0
    }
}

/// Temporal IoU between the answer interval and the segment.
pub fn answer_temporal_reward(doc: &TraceDocument, gt: &GroundTruth) -> f64 {
    match (doc.has_answer_tags, doc.answer_interval, gt.segment) {
        (true, Some((s, e)), Some(seg)) => Interval::new(s, e).and_then(|pred| interval_iou(pred, seg)).unwrap_or(0.0),
        _ => 0.0,
    }
}

/// Mean over answer boxes of the best IoU against any ground-truth box.
pub fn answer_spatial_reward(doc: &TraceDocument, gt: &GroundTruth) -> f64 {
    if !doc.has_answer_tags || doc.answer_boxes.is_empty() {
        return 0.0;
    }
    let gt_boxes: Vec<&BBox> = gt.keyframe_boxes.iter().flat_map(|k| &k.boxes).collect();
    if gt_boxes.is_empty() {
        return 0.0;
    }
    let sum: f64 = doc.answer_boxes.iter().map(|b| gt_boxes.iter().map(|g| box_iou(b, g)).fold(0.0, f64::max)).sum();
    sum / doc.answer_boxes.len() as f64
}

pub fn format_reward(doc: &TraceDocument, grounding_required: bool) -> f64 {
    let ok = doc.has_think_tags && doc.has_answer_tags && (!grounding_required || doc.grounding_tags_valid);
    if ok {
        1.0
    } else {
        0.0
    }
}

/// Component scores, weights and their masked weighted sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub scores: [f64; 6],
    pub weights: [f64; 6],
    pub applicable: BTreeSet<Component>,
    pub thinking_temporal: Option<ThinkingTemporal>,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn score(&self, c: Component) -> f64 {
        self.scores[c.index()]
    }

    pub fn is_applicable(&self, c: Component) -> bool {
        self.applicable.contains(&c)
    }

    fn recompute_total(&mut self) {
        self.total = Component::ALL
            .iter()
            .filter(|c| self.applicable.contains(c))
            .map(|c| self.weights[c.index()] * self.scores[c.index()])
            .sum();
    }

    /// Drops a component from the applicable set, zeroing its score.
    pub fn mask(&mut self, c: Component) {
        self.applicable.remove(&c);
        self.scores[c.index()] = 0.0;
        self.recompute_total();
    }
}

/// Verifier settings shared by every rollout of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifierConfig {
    pub weights: RewardWeights,
    pub sigma: SigmaSchedule,
    /// Temporal tolerance for matching thinking tuples to key frames.
    pub spatial_tolerance: f64,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self { weights: RewardWeights::default(), sigma: SigmaSchedule::default(), spatial_tolerance: 0.5 }
    }
}

/// Scores one rollout on every applicable component.
pub fn rollout_reward(
    doc: &TraceDocument,
    gt: &GroundTruth,
    weights: &RewardWeights,
    schedule: &SigmaSchedule,
    spatial_tolerance: f64,
    step: u64,
) -> RewardBreakdown {
    let mut scores = [0.0; 6];
    let thinking_temporal = gt.thinking_temporal_kind();
    for c in &gt.applicable {
        scores[c.index()] = match c {
            Component::Ans => answer_reward(doc, gt),
            Component::Fmt => format_reward(doc, gt.requires_grounding()),
            Component::AnsTmp => answer_temporal_reward(doc, gt),
            Component::AnsSpa => answer_spatial_reward(doc, gt),
            Component::ThkTmp => match (thinking_temporal, gt.segment) {
                (Some(ThinkingTemporal::Segment), Some(seg)) => thinking_temporal_segment_reward(&doc.timestamps, seg),
                _ => thinking_temporal_point_reward(
                    &doc.timestamps,
                    gt.keyframe_times.as_deref().unwrap_or(&[]),
                    anneal_sigma(step, schedule),
                )
                .unwrap_or(0.0),
            },
            Component::ThkSpa => thinking_spatial_reward(&doc.tuples, &gt.keyframe_boxes, spatial_tolerance),
        };
    }
    let mut breakdown = RewardBreakdown {
        scores,
        weights: weights.0,
        applicable: gt.applicable.clone(),
        thinking_temporal,
        total: 0.0,
    };
    breakdown.recompute_total();
    breakdown
}

/// Column order of the per-rollout reward CSV.
pub const REWARD_CSV_HEADER: [&str; 9] =
    ["step", "rollout_id", "r_ans", "r_fmt", "r_ans_tmp", "r_ans_spa", "r_thk_tmp", "r_thk_spa", "total"];

/// Appends one reward row per rollout to `out`, writing the header when
/// `with_header` is set.
pub fn write_reward_rows<W: Write>(out: W, step: u64, breakdowns: &[RewardBreakdown], with_header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if with_header {
        w.write_record(REWARD_CSV_HEADER)?;
    }
    for (i, b) in breakdowns.iter().enumerate() {
        let mut row = vec![step.to_string(), i.to_string()];
        row.extend(b.scores.iter().map(|s| s.to_string()));
        row.push(b.total.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
