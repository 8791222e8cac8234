//! Parsing and serialization of grounded reasoning traces.
//!
//! A trace looks like
//!
//! ```text
//! <think><obj>cat</obj><box>1,1,3,3</box><t>5</t></think><answer>A<t>4</t><t>6</t></answer>
//! ```
//!
//! The parser is total: any token sequence yields a [`TraceDocument`], with
//! malformedness reported through its flags rather than as an error.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{SymbolKind, Tag, TokenId, Vocabulary};

/// Longest digit run accepted as a number.
const MAX_DIGITS: usize = 6;

/// Axis-aligned box in inclusive grid-cell coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_ordered() {
            Ok(b)
        } else {
            Err(Error::InvalidDocument(format!("box {b:?} has x1 > x2 or y1 > y2")))
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> u64 {
        (self.x2 - self.x1) as u64 + 1
    }

    pub fn height(&self) -> u64 {
        (self.y2 - self.y1) as u64 + 1
    }

    /// Number of grid cells covered.
    pub fn area(&self) -> u64 {
        self.width() * self.height()
    }

    pub fn within(&self, width: u32, height: u32) -> bool {
        self.is_ordered() && self.x2 < width && self.y2 < height
    }
}

/// An `<obj>..</obj><box>..</box><t>..</t>` group from the think section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundedTuple {
    pub object: TokenId,
    pub bbox: BBox,
    pub time: f64,
}

/// Structured view of a (possibly malformed) trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub think_text: Vec<TokenId>,
    pub answer_text: Vec<TokenId>,
    /// First plain word of the answer section, if any.
    pub answer_symbol: Option<TokenId>,
    /// Every `<t>` value in the think section, in order.
    pub timestamps: Vec<f64>,
    pub tuples: Vec<GroundedTuple>,
    pub answer_interval: Option<(f64, f64)>,
    pub answer_boxes: Vec<BBox>,
    pub has_answer_tags: bool,
    pub has_think_tags: bool,
    pub grounding_tags_valid: bool,
}

impl TraceDocument {
    /// True when both section pairs are present and every grounding tag parsed.
    pub fn is_well_formed(&self) -> bool {
        self.has_think_tags && self.has_answer_tags && self.grounding_tags_valid
    }

    /// Compares the fields that survive a serialize/parse round trip.
    pub fn same_structure(&self, other: &Self) -> bool {
        self.answer_symbol == other.answer_symbol
            && self.timestamps == other.timestamps
            && self.tuples == other.tuples
            && self.answer_interval == other.answer_interval
            && self.answer_boxes == other.answer_boxes
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Item {
    Time(f64),
    Obj(TokenId),
    Box(BBox),
    Word(TokenId),
}

#[derive(Debug, Default)]
struct SectionScan {
    items: Vec<Item>,
    valid: bool,
}

fn is_grounding(tag: Tag) -> bool {
    matches!(tag, Tag::ObjOpen | Tag::ObjClose | Tag::BoxOpen | Tag::BoxClose | Tag::TimeOpen | Tag::TimeClose)
}

fn parse_number(vocab: &Vocabulary, payload: &[TokenId]) -> Option<u32> {
    if payload.is_empty() || payload.len() > MAX_DIGITS {
        return None;
    }
    payload.iter().try_fold(0u32, |acc, &id| vocab.digit_of(id).map(|d| acc * 10 + d as u32))
}

fn parse_payload(vocab: &Vocabulary, open: Tag, payload: &[TokenId]) -> Option<Item> {
    match open {
        Tag::TimeOpen => parse_number(vocab, payload).map(|v| Item::Time(v as f64)),
        Tag::ObjOpen => match payload {
            [id] if matches!(vocab.kind(*id), SymbolKind::Object(_)) => Some(Item::Obj(*id)),
            _ => None,
        },
        Tag::BoxOpen => {
            let sep = vocab.separator();
            let coords: Option<Vec<u32>> = payload.split(|&id| id == sep).map(|run| parse_number(vocab, run)).collect();
            match coords.as_deref() {
                Some(&[x1, y1, x2, y2]) => BBox::new(x1, y1, x2, y2).ok().map(Item::Box),
                _ => None,
            }
        }
        _ => None,
    }
}

fn scan_section(vocab: &Vocabulary, tokens: &[TokenId]) -> SectionScan {
    let mut scan = SectionScan { items: Vec::new(), valid: true };
    let mut open: Option<(Tag, Vec<TokenId>)> = None;
    for &id in tokens {
        match (vocab.tag_of(id), open.as_mut()) {
            (Some(tag), None) if is_grounding(tag) => {
                if tag.is_open() {
                    open = Some((tag, Vec::new()));
                } else {
                    scan.valid = false;
                }
            }
            (Some(_), None) => {}
            (Some(tag), Some((open_tag, payload))) => {
                if tag == open_tag.closer() {
                    match parse_payload(vocab, *open_tag, payload) {
                        Some(item) => scan.items.push(item),
                        None => scan.valid = false,
                    }
                    open = None;
                } else {
                    scan.valid = false;
                    open = (is_grounding(tag) && tag.is_open()).then(|| (tag, Vec::new()));
                }
            }
            (None, Some((_, payload))) => payload.push(id),
            (None, None) => scan.items.push(Item::Word(id)),
        }
    }
    if open.is_some() {
        scan.valid = false;
    }
    scan
}

fn has_grounding_tag(vocab: &Vocabulary, tokens: &[TokenId]) -> bool {
    tokens.iter().any(|&id| vocab.tag_of(id).is_some_and(is_grounding))
}

fn find(tokens: &[TokenId], from: usize, id: TokenId) -> Option<usize> {
    tokens.get(from..)?.iter().position(|&t| t == id).map(|p| p + from)
}

/// Parses a token sequence into a [`TraceDocument`]. Never fails.
///
/// Parsing stops at the first end-of-sequence token. The think section runs
/// from the first `<think>` to the next `</think>` (or, if unterminated, to the
/// next `<answer>` or the end); the answer section from the first `<answer>`
/// after it to the next `</answer>`. Grounding tags outside both sections are
/// ignored and clear `grounding_tags_valid`.
pub fn parse_trace(tokens: &[TokenId], vocab: &Vocabulary) -> TraceDocument {
    let end = tokens.iter().position(|&t| t == vocab.eos()).unwrap_or(tokens.len());
    let tokens = &tokens[..end];

    let think_open = find(tokens, 0, vocab.tag(Tag::ThinkOpen));
    let think_close = think_open.and_then(|o| find(tokens, o + 1, vocab.tag(Tag::ThinkClose)));
    let think: Option<Range<usize>> = think_open.map(|o| {
        let stop = think_close.or_else(|| find(tokens, o + 1, vocab.tag(Tag::AnswerOpen))).unwrap_or(tokens.len());
        o + 1..stop
    });

    let answer_search_from = match (&think, think_close) {
        (Some(_), Some(c)) => c + 1,
        (Some(r), None) => r.end,
        (None, _) => 0,
    };
    let answer_open = find(tokens, answer_search_from, vocab.tag(Tag::AnswerOpen));
    let answer_close = answer_open.and_then(|o| find(tokens, o + 1, vocab.tag(Tag::AnswerClose)));
    let answer: Option<Range<usize>> = answer_open.map(|o| o + 1..answer_close.unwrap_or(tokens.len()));

    let mut doc = TraceDocument {
        has_think_tags: think_open.is_some() && think_close.is_some(),
        has_answer_tags: answer_open.is_some() && answer_close.is_some(),
        grounding_tags_valid: true,
        ..Default::default()
    };

    // Anything outside the two sections must not carry grounding tags.
    let mut covered = vec![false; tokens.len()];
    for (open, r) in [(think_open, &think), (answer_open, &answer)] {
        if let (Some(o), Some(r)) = (open, r) {
            covered[o] = true;
            for c in &mut covered[r.clone()] {
                *c = true;
            }
            if let Some(c) = covered.get_mut(r.end) {
                *c = true;
            }
        }
    }
    let outside: Vec<TokenId> = tokens.iter().zip(&covered).filter(|(_, &c)| !c).map(|(&t, _)| t).collect();
    if has_grounding_tag(vocab, &outside) {
        doc.grounding_tags_valid = false;
    }

    if let Some(r) = think {
        doc.think_text = tokens[r.clone()].to_vec();
        let scan = scan_section(vocab, &doc.think_text);
        doc.grounding_tags_valid &= scan.valid;
        for (i, item) in scan.items.iter().enumerate() {
            match *item {
                Item::Time(t) => doc.timestamps.push(t),
                Item::Obj(object) => {
                    if let (Some(Item::Box(bbox)), Some(Item::Time(time))) =
                        (scan.items.get(i + 1), scan.items.get(i + 2))
                    {
                        doc.tuples.push(GroundedTuple { object, bbox: *bbox, time: *time });
                    }
                }
                _ => {}
            }
        }
    }

    if let Some(r) = answer {
        doc.answer_text = tokens[r].to_vec();
        let scan = scan_section(vocab, &doc.answer_text);
        doc.grounding_tags_valid &= scan.valid;
        let mut times = Vec::new();
        for item in scan.items {
            match item {
                Item::Time(t) => times.push(t),
                Item::Box(b) => doc.answer_boxes.push(b),
                Item::Word(w) if doc.answer_symbol.is_none() => {
                    if matches!(vocab.kind(w), SymbolKind::Letter(_) | SymbolKind::Object(_) | SymbolKind::Action(_)) {
                        doc.answer_symbol = Some(w);
                    }
                }
                _ => {}
            }
        }
        if let [a, b, ..] = times[..] {
            doc.answer_interval = Some((a.min(b), a.max(b)));
        }
    }
    doc
}

/// Parses trace text (see [`Vocabulary::tokenize_text`]).
pub fn parse_trace_text(text: &str, vocab: &Vocabulary) -> Result<TraceDocument> {
    Ok(parse_trace(&vocab.encode_text(text)?, vocab))
}

fn push_number(out: &mut Vec<TokenId>, vocab: &Vocabulary, value: u32) {
    for c in value.to_string().bytes() {
        out.push(vocab.digit(c - b'0'));
    }
}

fn as_frame(value: f64, what: &str) -> Result<u32> {
    if value.is_finite() && value >= 0.0 && value.fract() == 0.0 && value < 1e6 {
        Ok(value as u32)
    } else {
        Err(Error::InvalidDocument(format!("{what} {value} is not a non-negative integer frame")))
    }
}

fn push_box(out: &mut Vec<TokenId>, vocab: &Vocabulary, b: &BBox) -> Result<()> {
    if !b.is_ordered() || b.x2 >= 1_000_000 || b.y2 >= 1_000_000 {
        return Err(Error::InvalidDocument(format!("invalid box {b:?}")));
    }
    out.push(vocab.tag(Tag::BoxOpen));
    for (i, v) in [b.x1, b.y1, b.x2, b.y2].into_iter().enumerate() {
        if i > 0 {
            out.push(vocab.separator());
        }
        push_number(out, vocab, v);
    }
    out.push(vocab.tag(Tag::BoxClose));
    Ok(())
}

fn push_time(out: &mut Vec<TokenId>, vocab: &Vocabulary, t: f64, what: &str) -> Result<()> {
    let frame = as_frame(t, what)?;
    out.push(vocab.tag(Tag::TimeOpen));
    push_number(out, vocab, frame);
    out.push(vocab.tag(Tag::TimeClose));
    Ok(())
}

/// Renders the structured fields of `doc` as a canonical token sequence.
///
/// Tuples must appear in `timestamps` as an ordered subsequence (each tuple's
/// time is one of the think timestamps); they are emitted in place of the
/// matching bare `<t>`. Raw text spans and flags are not consulted.
pub fn serialize_trace(doc: &TraceDocument, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let mut out = vec![vocab.tag(Tag::ThinkOpen)];
    let mut tuples = doc.tuples.iter().peekable();
    for &t in &doc.timestamps {
        match tuples.peek() {
            Some(tuple) if tuple.time == t => {
                if !matches!(vocab.kind(tuple.object), SymbolKind::Object(_)) {
                    return Err(Error::InvalidDocument(format!(
                        "tuple object {:?} is not an object symbol",
                        vocab.symbol(tuple.object)
                    )));
                }
                out.extend([vocab.tag(Tag::ObjOpen), tuple.object, vocab.tag(Tag::ObjClose)]);
                push_box(&mut out, vocab, &tuple.bbox)?;
                push_time(&mut out, vocab, t, "timestamp")?;
                tuples.next();
            }
            _ => push_time(&mut out, vocab, t, "timestamp")?,
        }
    }
    if tuples.next().is_some() {
        return Err(Error::InvalidDocument("tuple times are not an ordered subsequence of the timestamps".into()));
    }
    out.extend([vocab.tag(Tag::ThinkClose), vocab.tag(Tag::AnswerOpen)]);
    if let Some(sym) = doc.answer_symbol {
        if sym >= vocab.size()
            || !matches!(vocab.kind(sym), SymbolKind::Letter(_) | SymbolKind::Object(_) | SymbolKind::Action(_))
        {
            return Err(Error::InvalidDocument(format!("answer symbol id {sym} is not a word")));
        }
        out.push(sym);
    }
    if let Some((s, e)) = doc.answer_interval {
        if s > e {
            return Err(Error::InvalidInterval { start: s, end: e });
        }
        push_time(&mut out, vocab, s, "interval start")?;
        push_time(&mut out, vocab, e, "interval end")?;
    }
    for b in &doc.answer_boxes {
        push_box(&mut out, vocab, b)?;
    }
    out.push(vocab.tag(Tag::AnswerClose));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocabulary {
        Vocabulary::standard()
    }

    #[test]
    fn minimal_trace() {
        let vocab = v();
        let doc = parse_trace_text("<think><t>3</t></think><answer>A</answer>", &vocab).unwrap();
        assert_eq!(doc.timestamps, vec![3.0]);
        assert!(doc.has_answer_tags && doc.has_think_tags && doc.grounding_tags_valid);
        assert_eq!(doc.answer_symbol, vocab.id("A"));
    }

    #[test]
    fn unterminated_think() {
        let doc = parse_trace_text("<think>dog run", &v()).unwrap();
        assert!(!doc.has_think_tags);
        assert!(!doc.has_answer_tags);
        assert!(doc.timestamps.is_empty());
    }

    #[test]
    fn tuple_and_answer_interval() {
        let vocab = v();
        let doc = parse_trace_text(
            "<think><obj>cat</obj><box>1,1,3,3</box><t>5</t></think><answer><t>4</t><t>6</t></answer>",
            &vocab,
        )
        .unwrap();
        assert_eq!(
            doc.tuples,
            vec![GroundedTuple { object: vocab.id("cat").unwrap(), bbox: BBox::new(1, 1, 3, 3).unwrap(), time: 5.0 }]
        );
        assert_eq!(doc.timestamps, vec![5.0]);
        assert_eq!(doc.answer_interval, Some((4.0, 6.0)));
        assert!(doc.grounding_tags_valid);
    }

    #[test]
    fn unordered_answer_times_take_min_max_of_first_two() {
        let doc = parse_trace_text("<think></think><answer>B<t>9</t><t>2</t><t>1</t></answer>", &v()).unwrap();
        assert_eq!(doc.answer_interval, Some((2.0, 9.0)));
    }

    #[test]
    fn malformed_box_payloads() {
        for text in [
            "<think><box>1,1,3</box></think><answer>A</answer>",
            "<think><box>3,1,1,3</box></think><answer>A</answer>",
            "<think><box>1,,1,3,3</box></think><answer>A</answer>",
            "<think><t></t></think><answer>A</answer>",
            "<think><t>1234567</t></think><answer>A</answer>",
            "<think><obj>A</obj></think><answer>A</answer>",
            "<think><t>3</think><answer>A</answer>",
            "<think></t></think><answer>A</answer>",
        ] {
            let doc = parse_trace_text(text, &v()).unwrap();
            assert!(!doc.grounding_tags_valid, "{text}");
            assert!(doc.has_think_tags && doc.has_answer_tags, "{text}");
        }
    }

    #[test]
    fn time_tag_outside_sections_is_ignored_and_flagged() {
        let doc = parse_trace_text("<t>3</t><think></think><answer>A</answer>", &v()).unwrap();
        assert!(doc.timestamps.is_empty());
        assert!(!doc.grounding_tags_valid);
    }

    #[test]
    fn parsing_stops_at_eos() {
        let vocab = v();
        let mut ids = vocab.encode_text("<think><t>3</t></think><answer>A</answer>").unwrap();
        ids.push(vocab.eos());
        ids.extend(vocab.encode_text("<t>9</t>").unwrap());
        let doc = parse_trace(&ids, &vocab);
        assert!(doc.is_well_formed());
    }

    #[test]
    fn serialize_minimal() {
        let vocab = v();
        let doc = TraceDocument { timestamps: vec![3.0], answer_symbol: vocab.id("A"), ..Default::default() };
        let ids = serialize_trace(&doc, &vocab).unwrap();
        assert_eq!(vocab.render(&ids), "<think><t>3</t></think><answer>A</answer>");
    }

    #[test]
    fn serialize_empty_think() {
        let vocab = v();
        let doc = TraceDocument { answer_symbol: vocab.id("B"), ..Default::default() };
        let ids = serialize_trace(&doc, &vocab).unwrap();
        assert_eq!(vocab.render(&ids), "<think></think><answer>B</answer>");
    }

    #[test]
    fn serialize_tuple_canonical_order() {
        let vocab = v();
        let doc = TraceDocument {
            timestamps: vec![5.0],
            tuples: vec![GroundedTuple {
                object: vocab.id("cat").unwrap(),
                bbox: BBox::new(1, 1, 3, 3).unwrap(),
                time: 5.0,
            }],
            answer_symbol: vocab.id("A"),
            ..Default::default()
        };
        let ids = serialize_trace(&doc, &vocab).unwrap();
        assert_eq!(vocab.render(&ids), "<think><obj>cat</obj><box>1,1,3,3</box><t>5</t></think><answer>A</answer>");
    }

    #[test]
    fn serialize_rejects_invalid() {
        let vocab = v();
        let bad_interval = TraceDocument { answer_interval: Some((6.0, 4.0)), ..Default::default() };
        assert!(serialize_trace(&bad_interval, &vocab).is_err());
        let bad_box = TraceDocument { answer_boxes: vec![BBox { x1: 3, y1: 0, x2: 1, y2: 0 }], ..Default::default() };
        assert!(serialize_trace(&bad_box, &vocab).is_err());
        let fractional = TraceDocument { timestamps: vec![2.5], ..Default::default() };
        assert!(serialize_trace(&fractional, &vocab).is_err());
        let orphan_tuple = TraceDocument {
            tuples: vec![GroundedTuple {
                object: vocab.id("cat").unwrap(),
                bbox: BBox::new(0, 0, 0, 0).unwrap(),
                time: 1.0,
            }],
            ..Default::default()
        };
        assert!(serialize_trace(&orphan_tuple, &vocab).is_err());
    }
}
