//! Synthetic grounded video-reasoning episodes.
//!
//! A "video" is a handful of events on a small grid: an object performs an
//! action over a frame interval while its box drifts one cell at a time. Each
//! episode asks one multiple-choice question about a target event and carries
//! the exact ground truth the verifier needs.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizer::Prompt;
use crate::trace::{BBox, GroundedTuple, TraceDocument};
use crate::verifier::{Component, GroundTruth, Interval, Keyframe};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    What,
    When,
    Where,
}

impl QuestionKind {
    pub const ALL: [Self; 3] = [Self::What, Self::When, Self::Where];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Reward components scored for this kind of question.
    pub fn applicable(self) -> BTreeSet<Component> {
        let mut set: BTreeSet<Component> = [Component::Ans, Component::Fmt, Component::ThkTmp].into();
        match self {
            Self::What => {}
            Self::When => {
                set.insert(Component::AnsTmp);
            }
            Self::Where => {
                set.insert(Component::AnsSpa);
                set.insert(Component::ThkSpa);
            }
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub frame_count: u32,
    pub grid_width: u32,
    pub grid_height: u32,
    pub max_events: usize,
    /// Relative frequencies of what / when / where questions.
    pub kind_weights: [f64; 3],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { frame_count: 16, grid_width: 8, grid_height: 8, max_events: 3, kind_weights: [1.0; 3] }
    }
}

/// Number of answer options per question.
pub const OPTIONS: usize = 4;

impl EnvConfig {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.frame_count < 2 || self.frame_count > 100 {
            return bad("frame_count must be in [2, 100]");
        }
        if !(1..=10).contains(&self.grid_width) || !(1..=10).contains(&self.grid_height) {
            return bad("grid extent must be in [1, 10] cells per side");
        }
        if self.max_events == 0 || self.max_events > vocab.n_objects() {
            return bad("max_events must be in [1, number of objects]");
        }
        if vocab.n_objects() < 2 || vocab.n_actions() < OPTIONS.max(2) || vocab.n_letters() < OPTIONS {
            return bad("vocabulary needs >= 2 objects, >= 4 actions and >= 4 letters");
        }
        let w = &self.kind_weights;
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return bad("kind_weights must be non-negative with a positive sum");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// Index into the vocabulary's object list.
    pub object: usize,
    /// Index into the vocabulary's action list.
    pub action: usize,
    pub start: u32,
    pub end: u32,
    /// One box per frame in `start..=end`.
    pub boxes: Vec<BBox>,
}

impl Event {
    pub fn box_at(&self, frame: u32) -> Option<&BBox> {
        frame.checked_sub(self.start).and_then(|i| self.boxes.get(i as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicVideo {
    pub frame_count: u32,
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub video: SymbolicVideo,
    pub kind: QuestionKind,
    pub target: usize,
    /// Action indices offered as options for `what` questions; empty otherwise.
    pub action_options: Vec<usize>,
    /// Index of the correct option.
    pub answer: usize,
    pub keyframes: Vec<u32>,
    pub ground_truth: GroundTruth,
}

impl Episode {
    pub fn target_event(&self) -> &Event {
        &self.video.events[self.target]
    }
}

fn quarter(value: u32, extent: u32) -> usize {
    ((value as usize * 4) / extent.max(1) as usize).min(3)
}

/// Quadrant of a box center: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right.
pub fn quadrant(b: &BBox, width: u32, height: u32) -> usize {
    let right = (b.x1 + b.x2) >= width;
    let bottom = (b.y1 + b.y2) >= height;
    usize::from(right) + 2 * usize::from(bottom)
}

fn random_interval<R: Rng + ?Sized>(rng: &mut R, frames: u32) -> (u32, u32) {
    let max_len = (frames / 2).max(2).min(frames);
    let len = rng.gen_range(2.min(frames)..=max_len);
    let start = rng.gen_range(0..=frames - len);
    (start, start + len - 1)
}

fn random_track<R: Rng + ?Sized>(rng: &mut R, frames: u32, width: u32, height: u32) -> Vec<BBox> {
    let bw = rng.gen_range(1..=3.min(width));
    let bh = rng.gen_range(1..=3.min(height));
    let mut x = rng.gen_range(0..=width - bw);
    let mut y = rng.gen_range(0..=height - bh);
    let mut out = Vec::with_capacity(frames as usize);
    for _ in 0..frames {
        out.push(BBox { x1: x, y1: y, x2: x + bw - 1, y2: y + bh - 1 });
        x = (x as i64 + rng.gen_range(-1..=1)).clamp(0, (width - bw) as i64) as u32;
        y = (y as i64 + rng.gen_range(-1..=1)).clamp(0, (height - bh) as i64) as u32;
    }
    out
}

/// Draws one episode. Deterministic given the generator state.
pub fn generate_episode<R: Rng + ?Sized>(rng: &mut R, config: &EnvConfig, vocab: &Vocabulary) -> Result<Episode> {
    config.validate(vocab)?;
    let f = config.frame_count;
    let n_events = rng.gen_range(1..=config.max_events);
    let mut objects: Vec<usize> = (0..vocab.n_objects()).collect();
    objects.shuffle(rng);

    let mut events: Vec<Event> = Vec::with_capacity(n_events);
    for &object in objects.iter().take(n_events) {
        let mut span = random_interval(rng, f);
        // Distinct spans keep "when" questions unambiguous; few attempts are
        // ever needed, and a repeat on tiny videos is tolerated.
        for _ in 0..32 {
            if events.iter().all(|e| (e.start, e.end) != span) {
                break;
            }
            span = random_interval(rng, f);
        }
        let action = rng.gen_range(0..vocab.n_actions());
        let boxes = random_track(rng, span.1 - span.0 + 1, config.grid_width, config.grid_height);
        events.push(Event { object, action, start: span.0, end: span.1, boxes });
    }
    let target = rng.gen_range(0..events.len());
    let kinds =
        WeightedIndex::new(config.kind_weights).map_err(|e| Error::InvalidConfig(format!("kind_weights: {e}")))?;
    let kind = QuestionKind::ALL[kinds.sample(rng)];

    let ev = &events[target];
    let mut keyframes: Vec<u32> = (ev.start..=ev.end).collect::<Vec<_>>();
    keyframes.shuffle(rng);
    keyframes.truncate(2);
    keyframes.sort_unstable();

    let mut action_options = Vec::new();
    let answer = match kind {
        QuestionKind::What => {
            let mut others: Vec<usize> = (0..vocab.n_actions()).filter(|&a| a != ev.action).collect();
            others.shuffle(rng);
            action_options = others.into_iter().take(OPTIONS - 1).collect();
            let slot = rng.gen_range(0..OPTIONS);
            action_options.insert(slot, ev.action);
            slot
        }
        QuestionKind::When => quarter(ev.start, f),
        QuestionKind::Where => {
            let b = ev.box_at(keyframes[0]).expect("keyframe inside the target interval");
            quadrant(b, config.grid_width, config.grid_height)
        }
    };

    let keyframe_boxes = keyframes
        .iter()
        .map(|&k| Keyframe { time: k as f64, boxes: vec![*ev.box_at(k).expect("keyframe in interval")] })
        .collect();
    let ground_truth = GroundTruth {
        answer_symbol: vocab.letter(answer),
        segment: (kind == QuestionKind::When).then(|| Interval::new(ev.start as f64, ev.end as f64)).transpose()?,
        keyframe_times: (kind != QuestionKind::When).then(|| keyframes.iter().map(|&k| k as f64).collect()),
        keyframe_boxes,
        applicable: kind.applicable(),
    };
    ground_truth.validate()?;

    Ok(Episode {
        video: SymbolicVideo { frame_count: f, width: config.grid_width, height: config.grid_height, events },
        kind,
        target,
        action_options,
        answer,
        keyframes,
        ground_truth,
    })
}

/// Offsets of the context feature blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextLayout {
    pub n_objects: usize,
}

impl ContextLayout {
    pub fn new(vocab: &Vocabulary) -> Self {
        Self { n_objects: vocab.n_objects() }
    }

    pub fn kind(&self) -> usize {
        0
    }
    pub fn target_object(&self) -> usize {
        3
    }
    pub fn option_support(&self) -> usize {
        self.target_object() + self.n_objects
    }
    /// Start of the video block; everything before it is the question block.
    pub fn video(&self) -> usize {
        self.option_support() + OPTIONS
    }
    pub fn target_start(&self) -> usize {
        self.video()
    }
    pub fn target_end(&self) -> usize {
        self.target_start() + 4
    }
    pub fn target_x(&self) -> usize {
        self.target_end() + 4
    }
    pub fn target_y(&self) -> usize {
        self.target_x() + 4
    }
    pub fn presence(&self) -> usize {
        self.target_y() + 4
    }
    pub fn dim(&self) -> usize {
        self.presence() + 4 * self.n_objects
    }
}

/// Student-visible encoding of an episode.
///
/// Question block: kind, target object, and which option the question's
/// wording supports. Video block: the target's start and end quarter, the
/// quarter of its box center on each axis at the first key frame, and for
/// every object the quarters of the video in which it is active. Box extents
/// are deliberately not encoded.
pub fn context_features(episode: &Episode, vocab: &Vocabulary) -> Vec<f64> {
    let l = ContextLayout::new(vocab);
    let mut v = vec![0.0; l.dim()];
    let video = &episode.video;
    let ev = episode.target_event();
    v[l.kind() + episode.kind.index()] = 1.0;
    v[l.target_object() + ev.object] = 1.0;
    v[l.option_support() + episode.answer] = 1.0;
    v[l.target_start() + quarter(ev.start, video.frame_count)] = 1.0;
    v[l.target_end() + quarter(ev.end, video.frame_count)] = 1.0;
    let kb = ev.box_at(episode.keyframes[0]).expect("keyframe in interval");
    v[l.target_x() + quarter(kb.x1 + kb.x2, 2 * video.width)] = 1.0;
    v[l.target_y() + quarter(kb.y1 + kb.y2, 2 * video.height)] = 1.0;
    for e in &video.events {
        for q in quarter(e.start, video.frame_count)..=quarter(e.end, video.frame_count) {
            v[l.presence() + 4 * e.object + q] = 1.0;
        }
    }
    v
}

/// Answer chosen by reading the option-support block of the features.
pub fn read_answer(features: &[f64], vocab: &Vocabulary) -> usize {
    let l = ContextLayout::new(vocab);
    let block = &features[l.option_support()..l.option_support() + OPTIONS];
    (0..OPTIONS).max_by(|&a, &b| block[a].total_cmp(&block[b]).then(b.cmp(&a))).unwrap_or(0)
}

/// Reference trace built from ground truth: one object-box-time group per
/// key frame, then the answer letter with the target span (when) or the
/// first key-frame box (where).
pub fn gold_document(episode: &Episode, vocab: &Vocabulary) -> TraceDocument {
    let ev = episode.target_event();
    let tuples: Vec<GroundedTuple> = episode
        .keyframes
        .iter()
        .map(|&k| GroundedTuple { object: vocab.object(ev.object), bbox: *ev.box_at(k).unwrap(), time: k as f64 })
        .collect();
    let answer_interval = (episode.kind == QuestionKind::When).then_some((ev.start as f64, ev.end as f64));
    let answer_boxes =
        if episode.kind == QuestionKind::Where { vec![*ev.box_at(episode.keyframes[0]).unwrap()] } else { vec![] };
    TraceDocument {
        think_text: vec![],
        answer_text: vec![],
        answer_symbol: Some(episode.ground_truth.answer_symbol),
        timestamps: tuples.iter().map(|t| t.time).collect(),
        tuples,
        answer_interval,
        answer_boxes,
        has_answer_tags: true,
        has_think_tags: true,
        grounding_tags_valid: true,
    }
}

impl Episode {
    pub fn prompt(&self, vocab: &Vocabulary) -> Prompt {
        Prompt { context: context_features(self, vocab), ground_truth: self.ground_truth.clone() }
    }
}

pub fn write_jsonl<W: Write>(mut out: W, episodes: &[Episode]) -> Result<()> {
    for e in episodes {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
