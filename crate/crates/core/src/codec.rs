//! Interleaved text–coordinate instructions.
//!
//! A caption is split into word tokens and every grounded mention is followed
//! immediately by a coordinate block. The canonical text form is
//!
//! ```text
//! A wooden table <|box|>128,120,968,920<|/box|> with a severely rotten apple <|box|>376,336,744,696<|/box|>
//! ```
//!
//! Tokens are joined by single spaces; a block is written without interior
//! spaces. Planner output uses a different surface, `<|bbox_N|>` placeholders
//! referencing a numbered object map, which [`substitute_placeholders`] turns
//! into the same instruction type.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

pub const BOX_OPEN: &str = "<|box|>";
pub const BOX_CLOSE: &str = "<|/box|>";
const PLACEHOLDER_PREFIX: &str = "<|bbox";

/// Characters peeled off the end of a whitespace chunk into their own tokens.
const TRAILING_PUNCT: &[char] = &['.', ',', ';', ':', '!', '?', '"'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("phrase {0:?} has no unclaimed occurrence in the caption")]
    PhraseNotFound(String),
    #[error("every occurrence of phrase {0:?} overlaps an earlier entity")]
    OverlappingSpans(String),
    #[error("phrase is empty after tokenization")]
    EmptyPhrase,
    #[error("text contains a reserved marker: {0:?}")]
    ReservedMarker(String),
    #[error("placeholder <|bbox_{0}|> has no matching object")]
    MissingObject(usize),
    #[error("object {0} is never referenced by a placeholder")]
    UnusedObject(usize),
    #[error("placeholder <|bbox_{0}|> appears more than once")]
    DuplicatePlaceholder(usize),
    #[error("malformed placeholder near {0:?}")]
    MalformedPlaceholder(String),
    #[error("placeholder <|bbox_{0}|> is not preceded by any word")]
    OrphanPlaceholder(usize),
    #[error("unbalanced coordinate block at byte {0}")]
    UnbalancedBlock(usize),
    #[error("coordinate block has {0} values, expected 4")]
    CoordCountNot4(usize),
    #[error("coordinate {0} is outside 0..=1000")]
    CoordOutOfRange(i64),
    #[error("coordinate {0:?} is not an integer")]
    InvalidCoord(String),
    #[error("coordinate block does not form a valid box: {0}")]
    InvalidBox(GeometryError),
    #[error("coordinate block at byte {0} is not preceded by any word")]
    OrphanBlock(usize),
}

// ---------------------------------------------------------------------------
// Tokens

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Word,
    BoxOpen,
    Coord,
    BoxClose,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// Position in the full token sequence, 0-based.
    pub index: usize,
}

impl Token {
    /// Integer value of a `Coord` token.
    pub fn coord(&self) -> Option<u32> {
        match self.kind {
            TokenKind::Coord => self.text.parse().ok(),
            _ => None,
        }
    }
}

/// Split a caption into word tokens.
///
/// Splits on whitespace, then peels trailing `. , ; : ! ? "` characters off
/// each chunk as separate one-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let stem = chunk.trim_end_matches(TRAILING_PUNCT);
        if !stem.is_empty() {
            out.push(stem.to_string());
        }
        out.extend(chunk[stem.len()..].chars().map(String::from));
    }
    out
}

fn is_punct_token(t: &str) -> bool {
    !t.is_empty() && t.chars().all(|c| TRAILING_PUNCT.contains(&c))
}

/// Inverse of [`tokenize`] up to whitespace normalization: tokens are joined
/// by single spaces, except punctuation tokens which attach to the previous
/// token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !is_punct_token(t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

fn check_reserved(text: &str) -> Result<(), CodecError> {
    for marker in [BOX_OPEN, BOX_CLOSE, PLACEHOLDER_PREFIX] {
        if text.contains(marker) {
            return Err(CodecError::ReservedMarker(marker.to_string()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Spans

/// Inclusive word-token span, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(1 <= start && start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocatedSpan {
    /// Index into the `phrases` argument of [`locate_spans`].
    pub phrase_index: usize,
    pub span: Span,
}

/// Find a token span for every phrase.
///
/// Phrases are processed in order; each takes the leftmost exact,
/// case-sensitive occurrence that does not touch a token already claimed by
/// an earlier phrase. The result is sorted by span end.
pub fn locate_spans<S: AsRef<str>>(
    tokens: &[String],
    phrases: &[S],
) -> Result<Vec<LocatedSpan>, CodecError> {
    let mut claimed: Vec<Span> = Vec::with_capacity(phrases.len());
    let mut out = Vec::with_capacity(phrases.len());
    for (phrase_index, phrase) in phrases.iter().enumerate() {
        let needle = tokenize(phrase.as_ref());
        if needle.is_empty() {
            return Err(CodecError::EmptyPhrase);
        }
        let mut seen = false;
        let mut partial = false;
        let mut found = None;
        if needle.len() <= tokens.len() {
            for start in 0..=tokens.len() - needle.len() {
                if tokens[start..start + needle.len()] != needle[..] {
                    continue;
                }
                seen = true;
                let span = Span::new(start + 1, start + needle.len());
                match claimed.iter().find(|c| c.overlaps(&span)) {
                    None => {
                        found = Some(span);
                        break;
                    }
                    Some(c) if *c != span => partial = true,
                    Some(_) => {}
                }
            }
        }
        match found {
            Some(span) => {
                claimed.push(span);
                out.push(LocatedSpan { phrase_index, span });
            }
            None if seen && partial => {
                return Err(CodecError::OverlappingSpans(phrase.as_ref().to_string()))
            }
            None => return Err(CodecError::PhraseNotFound(phrase.as_ref().to_string())),
        }
    }
    out.sort_by_key(|l| l.span.end);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Instructions

/// A caption phrase bound to a box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedEntity {
    pub phrase: String,
    pub attributes: BTreeMap<String, String>,
    pub bbox: BBox,
    pub span: Span,
}

/// Input to [`interleave_grounded`]: a phrase to find in the caption and the
/// box to attach after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grounding {
    pub phrase: String,
    pub attributes: BTreeMap<String, String>,
    pub bbox: BBox,
}

impl Grounding {
    pub fn new(phrase: impl Into<String>, bbox: BBox) -> Self {
        Self {
            phrase: phrase.into(),
            attributes: BTreeMap::new(),
            bbox,
        }
    }
}

/// A caption with a coordinate block after each grounded mention.
///
/// Entities are kept in appearance order. Consecutive entities either have
/// disjoint spans with strictly increasing ends, or share one exact span:
/// several blocks stacked after the same mention (e.g. `girls<|bbox_6|><|bbox_7|>`
/// in planner output, one block per instance).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterleavedInstruction {
    words: Vec<String>,
    entities: Vec<GroundedEntity>,
}

impl InterleavedInstruction {
    /// Build from caption words and entities; entities are sorted into
    /// appearance order (stable) and checked.
    pub fn from_parts(
        words: Vec<String>,
        mut entities: Vec<GroundedEntity>,
    ) -> Result<Self, CodecError> {
        entities.sort_by_key(|e| e.span.end);
        let mut prev: Option<Span> = None;
        for e in &entities {
            let s = e.span;
            if s.start == 0 || s.start > s.end || s.end > words.len() {
                return Err(CodecError::PhraseNotFound(e.phrase.clone()));
            }
            if let Some(p) = prev {
                if p != s && s.start <= p.end {
                    return Err(CodecError::OverlappingSpans(e.phrase.clone()));
                }
            }
            if e.phrase != detokenize(&words[s.start - 1..s.end]) {
                return Err(CodecError::PhraseNotFound(e.phrase.clone()));
            }
            prev = Some(s);
        }
        Ok(Self { words, entities })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn entities(&self) -> &[GroundedEntity] {
        &self.entities
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.entities.iter().map(|e| e.bbox).collect()
    }

    /// The caption with all coordinate blocks stripped.
    pub fn caption(&self) -> String {
        detokenize(&self.words)
    }

    /// Trailing text after the last grounded mention, if any.
    pub fn tail(&self) -> Option<String> {
        let last = self.entities.last().map_or(0, |e| e.span.end);
        (last < self.words.len()).then(|| detokenize(&self.words[last..]))
    }

    /// The full token sequence, words and coordinate blocks interleaved.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.words.len() + 6 * self.entities.len());
        let mut push = |kind, text: String| {
            let index = out.len();
            out.push(Token { kind, text, index });
        };
        let mut next = self.entities.iter().peekable();
        for (i, w) in self.words.iter().enumerate() {
            push(TokenKind::Word, w.clone());
            while let Some(e) = next.next_if(|e| e.span.end == i + 1) {
                push(TokenKind::BoxOpen, BOX_OPEN.to_string());
                for c in e.bbox.coords() {
                    push(TokenKind::Coord, c.to_string());
                }
                push(TokenKind::BoxClose, BOX_CLOSE.to_string());
            }
        }
        out
    }

    /// Canonical text form.
    pub fn serialize(&self) -> String {
        let mut parts: Vec<String> = Vec::with_capacity(self.words.len() + self.entities.len());
        let mut next = self.entities.iter().peekable();
        for (i, w) in self.words.iter().enumerate() {
            parts.push(w.clone());
            while let Some(e) = next.next_if(|e| e.span.end == i + 1) {
                parts.push(encode_box(&e.bbox));
            }
        }
        parts.join(" ")
    }
}

impl fmt::Display for InterleavedInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// The coordinate block for one box, `<|box|>x1,y1,x2,y2<|/box|>`.
pub fn encode_box(b: &BBox) -> String {
    let [x0, y0, x1, y1] = b.coords();
    format!("{BOX_OPEN}{x0},{y0},{x1},{y1}{BOX_CLOSE}")
}

/// Attach each `(phrase, box)` after its mention in `caption`.
pub fn interleave<S: AsRef<str>>(
    caption: &str,
    entities: &[(S, BBox)],
) -> Result<InterleavedInstruction, CodecError> {
    let groundings = entities
        .iter()
        .map(|(p, b)| Grounding::new(p.as_ref(), *b))
        .collect();
    interleave_grounded(caption, groundings)
}

pub fn interleave_grounded(
    caption: &str,
    groundings: Vec<Grounding>,
) -> Result<InterleavedInstruction, CodecError> {
    check_reserved(caption)?;
    let words = tokenize(caption);
    let phrases: Vec<&str> = groundings.iter().map(|g| g.phrase.as_str()).collect();
    let located = locate_spans(&words, &phrases)?;
    let mut groundings: Vec<Option<Grounding>> = groundings.into_iter().map(Some).collect();
    let entities = located
        .into_iter()
        .map(|l| {
            let g = groundings[l.phrase_index].take().expect("each phrase located once");
            GroundedEntity {
                phrase: detokenize(&words[l.span.start - 1..l.span.end]),
                attributes: g.attributes,
                bbox: g.bbox,
                span: l.span,
            }
        })
        .collect();
    InterleavedInstruction::from_parts(words, entities)
}

// ---------------------------------------------------------------------------
// Placeholder format

/// Attribute key under which [`substitute_placeholders`] records the object
/// index `N` of each entity.
pub const INDEX_ATTR: &str = "index";

/// Replace every `<|bbox_N|>` in `prompt` by the block for `objects[N]`.
///
/// The token right before a placeholder becomes the entity's mention. Directly
/// adjacent placeholders stack on the same mention.
pub fn substitute_placeholders(
    prompt: &str,
    objects: &BTreeMap<usize, BBox>,
) -> Result<InterleavedInstruction, CodecError> {
    let mut words: Vec<String> = Vec::new();
    let mut entities = Vec::new();
    let mut used = BTreeSet::new();
    let mut rest = prompt;
    loop {
        let Some(pos) = rest.find(PLACEHOLDER_PREFIX) else {
            check_reserved(rest)?;
            words.extend(tokenize(rest));
            break;
        };
        let (text, tail) = rest.split_at(pos);
        check_reserved(text)?;
        words.extend(tokenize(text));
        let (index, len) = parse_placeholder(tail)?;
        rest = &tail[len..];
        if !used.insert(index) {
            return Err(CodecError::DuplicatePlaceholder(index));
        }
        let bbox = *objects.get(&index).ok_or(CodecError::MissingObject(index))?;
        let end = words.len();
        if end == 0 {
            return Err(CodecError::OrphanPlaceholder(index));
        }
        entities.push(GroundedEntity {
            phrase: words[end - 1].clone(),
            attributes: BTreeMap::from([(INDEX_ATTR.to_string(), index.to_string())]),
            bbox,
            span: Span::new(end, end),
        });
    }
    if let Some(unused) = objects.keys().find(|k| !used.contains(k)) {
        return Err(CodecError::UnusedObject(*unused));
    }
    InterleavedInstruction::from_parts(words, entities)
}

/// Parse `<|bbox_N|>` at the start of `s`; returns `(N, byte length)`.
fn parse_placeholder(s: &str) -> Result<(usize, usize), CodecError> {
    let malformed = || CodecError::MalformedPlaceholder(s.chars().take(16).collect());
    let body = s.strip_prefix("<|bbox_").ok_or_else(malformed)?;
    let digits = body.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || !body[digits..].starts_with("|>") {
        return Err(malformed());
    }
    let index = body[..digits].parse().map_err(|_| malformed())?;
    Ok((index, "<|bbox_".len() + digits + 2))
}

/// Indices of all well-formed `<|bbox_N|>` placeholders in order of appearance.
pub fn placeholder_indices(prompt: &str) -> Result<Vec<usize>, CodecError> {
    let mut out = Vec::new();
    let mut rest = prompt;
    while let Some(pos) = rest.find(PLACEHOLDER_PREFIX) {
        let (index, len) = parse_placeholder(&rest[pos..])?;
        out.push(index);
        rest = &rest[pos + len..];
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoding

/// Decode canonical (or loosely spaced) instruction text.
///
/// Each block binds to the word token just before it; the recovered phrase is
/// that single word since the text form does not mark where a span starts.
pub fn parse(text: &str) -> Result<InterleavedInstruction, CodecError> {
    let mut words: Vec<String> = Vec::new();
    let mut entities = Vec::new();
    let mut offset = 0;
    loop {
        let rest = &text[offset..];
        let open = rest.find(BOX_OPEN);
        let segment = &rest[..open.unwrap_or(rest.len())];
        if let Some(p) = segment.find(BOX_CLOSE) {
            return Err(CodecError::UnbalancedBlock(offset + p));
        }
        words.extend(tokenize(segment));
        let Some(open) = open else { break };
        let block_at = offset + open;
        let inner_start = block_at + BOX_OPEN.len();
        let close = text[inner_start..]
            .find(BOX_CLOSE)
            .ok_or(CodecError::UnbalancedBlock(block_at))?;
        let inner = &text[inner_start..inner_start + close];
        if inner.contains(BOX_OPEN) {
            return Err(CodecError::UnbalancedBlock(block_at));
        }
        let bbox = decode_coords(inner)?;
        let end = words.len();
        if end == 0 {
            return Err(CodecError::OrphanBlock(block_at));
        }
        entities.push(GroundedEntity {
            phrase: words[end - 1].clone(),
            attributes: BTreeMap::new(),
            bbox,
            span: Span::new(end, end),
        });
        offset = inner_start + close + BOX_CLOSE.len();
    }
    InterleavedInstruction::from_parts(words, entities)
}

fn decode_coords(inner: &str) -> Result<BBox, CodecError> {
    let fields: Vec<&str> = inner.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(CodecError::CoordCountNot4(fields.len()));
    }
    let mut c = [0i64; 4];
    for (slot, f) in c.iter_mut().zip(&fields) {
        let v: i64 = f.parse().map_err(|_| CodecError::InvalidCoord(f.to_string()))?;
        if !(0..=1000).contains(&v) {
            return Err(CodecError::CoordOutOfRange(v));
        }
        *slot = v;
    }
    BBox::try_from(c).map_err(CodecError::InvalidBox)
}
