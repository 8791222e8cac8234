//! Token vocabulary for grounded reasoning traces.
//!
//! The vocabulary is small and closed: structural tags, the ten digits, a
//! coordinate separator, answer-choice letters, object names, action names and
//! an end-of-sequence marker. Numbers are spelled as digit runs, so every trace
//! the policy can emit is a sequence over this fixed alphabet.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a symbol in a [`Vocabulary`].
pub type TokenId = usize;

/// Structural tags, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tag {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    ObjOpen,
    ObjClose,
    BoxOpen,
    BoxClose,
    TimeOpen,
    TimeClose,
}

impl Tag {
    pub const ALL: [Tag; 10] = [
        Tag::ThinkOpen,
        Tag::ThinkClose,
        Tag::AnswerOpen,
        Tag::AnswerClose,
        Tag::ObjOpen,
        Tag::ObjClose,
        Tag::BoxOpen,
        Tag::BoxClose,
        Tag::TimeOpen,
        Tag::TimeClose,
    ];

    pub fn spelling(self) -> &'static str {
        match self {
            Tag::ThinkOpen => "<think>",
            Tag::ThinkClose => "</think>",
            Tag::AnswerOpen => "<answer>",
            Tag::AnswerClose => "</answer>",
            Tag::ObjOpen => "<obj>",
            Tag::ObjClose => "</obj>",
            Tag::BoxOpen => "<box>",
            Tag::BoxClose => "</box>",
            Tag::TimeOpen => "<t>",
            Tag::TimeClose => "</t>",
        }
    }

    pub fn is_open(self) -> bool {
        matches!(self, Tag::ThinkOpen | Tag::AnswerOpen | Tag::ObjOpen | Tag::BoxOpen | Tag::TimeOpen)
    }

    /// The closing partner of an open tag (or the tag itself for close tags).
    pub fn closer(self) -> Tag {
        match self {
            Tag::ThinkOpen => Tag::ThinkClose,
            Tag::AnswerOpen => Tag::AnswerClose,
            Tag::ObjOpen => Tag::ObjClose,
            Tag::BoxOpen => Tag::BoxClose,
            Tag::TimeOpen => Tag::TimeClose,
            close => close,
        }
    }
}

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SymbolKind {
    Tag(Tag),
    Digit(u8),
    Separator,
    Letter(usize),
    Object(usize),
    Action(usize),
    Eos,
}

pub const SEPARATOR: &str = ",";
pub const EOS: &str = "<eos>";

pub const DEFAULT_LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const DEFAULT_OBJECTS: [&str; 8] = ["person", "dog", "cat", "car", "ball", "bike", "bird", "cup"];
pub const DEFAULT_ACTIONS: [&str; 8] = ["run", "jump", "sit", "walk", "throw", "open", "fall", "wave"];

/// Closed, ordered symbol table.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    kinds: Vec<SymbolKind>,
    index: HashMap<String, TokenId>,
    n_letters: usize,
    n_objects: usize,
    n_actions: usize,
}

impl Vocabulary {
    pub const MAX_SIZE: usize = 256;

    /// Builds the vocabulary: tags, digits, separator, letters, objects,
    /// actions, end-of-sequence, in that order.
    pub fn new<S: AsRef<str>>(letters: &[S], objects: &[S], actions: &[S]) -> Result<Self> {
        let mut symbols = Vec::new();
        let mut kinds = Vec::new();
        for tag in Tag::ALL {
            symbols.push(tag.spelling().to_string());
            kinds.push(SymbolKind::Tag(tag));
        }
        for d in 0..10u8 {
            symbols.push(d.to_string());
            kinds.push(SymbolKind::Digit(d));
        }
        symbols.push(SEPARATOR.to_string());
        kinds.push(SymbolKind::Separator);
        for (i, s) in letters.iter().enumerate() {
            symbols.push(check_word(s.as_ref())?);
            kinds.push(SymbolKind::Letter(i));
        }
        for (i, s) in objects.iter().enumerate() {
            symbols.push(check_word(s.as_ref())?);
            kinds.push(SymbolKind::Object(i));
        }
        for (i, s) in actions.iter().enumerate() {
            symbols.push(check_word(s.as_ref())?);
            kinds.push(SymbolKind::Action(i));
        }
        symbols.push(EOS.to_string());
        kinds.push(SymbolKind::Eos);

        if symbols.len() > Self::MAX_SIZE {
            return Err(Error::InvalidVocabulary(format!(
                "{} symbols exceeds the limit of {}",
                symbols.len(),
                Self::MAX_SIZE
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, kinds, index, n_letters: letters.len(), n_objects: objects.len(), n_actions: actions.len() })
    }

    /// Four answer letters, eight objects and eight actions.
    pub fn standard() -> Self {
        Self::new(&DEFAULT_LETTERS, &DEFAULT_OBJECTS, &DEFAULT_ACTIONS).expect("default vocabulary is valid")
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.symbols[id]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn kind(&self, id: TokenId) -> SymbolKind {
        self.kinds[id]
    }

    pub fn tag(&self, tag: Tag) -> TokenId {
        tag as usize
    }

    pub fn tag_of(&self, id: TokenId) -> Option<Tag> {
        match self.kinds.get(id) {
            Some(SymbolKind::Tag(t)) => Some(*t),
            _ => None,
        }
    }

    pub fn digit(&self, d: u8) -> TokenId {
        assert!(d < 10);
        Tag::ALL.len() + d as usize
    }

    pub fn digit_of(&self, id: TokenId) -> Option<u8> {
        match self.kinds.get(id) {
            Some(SymbolKind::Digit(d)) => Some(*d),
            _ => None,
        }
    }

    pub fn separator(&self) -> TokenId {
        Tag::ALL.len() + 10
    }

    pub fn n_letters(&self) -> usize {
        self.n_letters
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn letter(&self, i: usize) -> TokenId {
        assert!(i < self.n_letters);
        self.separator() + 1 + i
    }

    pub fn object(&self, i: usize) -> TokenId {
        assert!(i < self.n_objects);
        self.separator() + 1 + self.n_letters + i
    }

    pub fn action(&self, i: usize) -> TokenId {
        assert!(i < self.n_actions);
        self.separator() + 1 + self.n_letters + self.n_objects + i
    }

    pub fn eos(&self) -> TokenId {
        self.symbols.len() - 1
    }

    /// Maps symbols to ids.
    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<TokenId>> {
        symbols
            .iter()
            .map(|s| {
                let s = s.as_ref();
                self.id(s).ok_or_else(|| Error::UnknownSymbol(s.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.symbol(id)).collect()
    }

    /// Splits trace text into symbols: `<...>` tags, single digits, `,`, and
    /// alphabetic words. Whitespace separates words and is otherwise ignored.
    pub fn tokenize_text(text: &str) -> Result<Vec<String>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c == '<' {
                let end = chars[i..]
                    .iter()
                    .position(|&c| c == '>')
                    .ok_or_else(|| Error::UnknownSymbol(chars[i..].iter().collect()))?;
                out.push(chars[i..=i + end].iter().collect());
                i += end + 1;
            } else if c.is_ascii_digit() || c == ',' {
                out.push(c.to_string());
                i += 1;
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphabetic() || chars[i] == '_') {
                    i += 1;
                }
                out.push(chars[start..i].iter().collect());
            } else {
                return Err(Error::UnknownSymbol(c.to_string()));
            }
        }
        Ok(out)
    }

    /// Tokenizes and encodes trace text in one go.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>> {
        self.encode(&Self::tokenize_text(text)?)
    }

    /// Renders ids back to trace text. Adjacent words get a single space so
    /// that [`Vocabulary::encode_text`] inverts this exactly.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        for &id in ids {
            let word = matches!(self.kind(id), SymbolKind::Letter(_) | SymbolKind::Object(_) | SymbolKind::Action(_));
            if word && prev_word {
                out.push(' ');
            }
            out.push_str(self.symbol(id));
            prev_word = word;
        }
        out
    }
}

fn check_word(s: &str) -> Result<String> {
    if s.is_empty() || !s.chars().all(|c| c.is_alphabetic() || c == '_') {
        return Err(Error::InvalidVocabulary(format!("word symbols must be alphabetic, got {s:?}")));
    }
    Ok(s.to_string())
}
