//! Grounded caption records, their line-delimited JSON form, and synthetic
//! generators for records and satisfiable scene specs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, Grounding, InterleavedInstruction};
use crate::constraints::{cell_rect, interior_depth, Cell, Constraint, Layout};
use crate::geometry::{BBox, CANVAS};
use crate::planner::{EntitySpec, SceneSpec, SizeClass};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: cannot parse record: {detail}")]
    ParseError { line: usize, detail: String },
    #[error("line {line}: invalid record: {detail}")]
    InvalidRecord { line: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntity {
    pub phrase: String,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One image–caption pair with its grounded entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedRecord {
    pub id: String,
    /// Opaque image path or URL; never dereferenced.
    pub image_ref: Option<String>,
    pub caption: String,
    pub entities: Vec<RecordEntity>,
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct WireEntity {
    phrase: String,
    #[serde(default)]
    attrs: BTreeMap<String, String>,
    #[serde(rename = "box")]
    bbox: [i64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    v: u32,
    id: String,
    image: Option<String>,
    caption: String,
    entities: Vec<WireEntity>,
    source: String,
}

impl GroundedRecord {
    /// Check the record invariants: non-empty caption and every phrase
    /// locatable in it.
    pub fn validate(&self) -> Result<(), String> {
        if self.caption.trim().is_empty() {
            return Err("empty caption".into());
        }
        record_to_instruction(self).map(|_| ()).map_err(|e| e.to_string())
    }

    pub fn to_json_line(&self) -> String {
        let wire = WireRecord {
            v: SCHEMA_VERSION,
            id: self.id.clone(),
            image: self.image_ref.clone(),
            caption: self.caption.clone(),
            entities: self
                .entities
                .iter()
                .map(|e| WireEntity {
                    phrase: e.phrase.clone(),
                    attrs: e.attrs.clone(),
                    bbox: e.bbox.coords().map(i64::from),
                })
                .collect(),
            source: self.source.clone(),
        };
        serde_json::to_string(&wire).expect("record serializes")
    }

    /// Parse one line; `line` is only used for error reporting.
    pub fn from_json_line(text: &str, line: usize) -> Result<Self, DatasetError> {
        let wire: WireRecord = serde_json::from_str(text).map_err(|e| DatasetError::ParseError {
            line,
            detail: e.to_string(),
        })?;
        let invalid = |detail: String| DatasetError::InvalidRecord { line, detail };
        if wire.v != SCHEMA_VERSION {
            return Err(invalid(format!("unsupported schema version {}", wire.v)));
        }
        let mut entities = Vec::with_capacity(wire.entities.len());
        for e in wire.entities {
            let bbox = BBox::try_from(e.bbox).map_err(|err| invalid(format!("entity {:?}: {err}", e.phrase)))?;
            entities.push(RecordEntity {
                phrase: e.phrase,
                attrs: e.attrs,
                bbox,
            });
        }
        let record = GroundedRecord {
            id: wire.id,
            image_ref: wire.image,
            caption: wire.caption,
            entities,
            source: wire.source,
        };
        record.validate().map_err(invalid)?;
        Ok(record)
    }
}

/// Read records from a reader; blank lines are skipped.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<GroundedRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(GroundedRecord::from_json_line(&line, i + 1)?);
    }
    Ok(out)
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<GroundedRecord>, DatasetError> {
    read_records(BufReader::new(File::open(path)?))
}

pub fn write_records<W: Write>(mut w: W, records: &[GroundedRecord]) -> io::Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line())?;
    }
    w.flush()
}

pub fn save_records(path: impl AsRef<Path>, records: &[GroundedRecord]) -> io::Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}

/// Inverse of [`record_to_instruction`]: one entity per coordinate block.
pub fn record_from_instruction(id: &str, source: &str, inst: &InterleavedInstruction) -> GroundedRecord {
    GroundedRecord {
        id: id.to_string(),
        image_ref: None,
        caption: inst.caption(),
        entities: inst
            .entities()
            .iter()
            .map(|e| RecordEntity {
                phrase: e.phrase.clone(),
                attrs: e.attributes.clone(),
                bbox: e.bbox,
            })
            .collect(),
        source: source.to_string(),
    }
}

pub fn record_to_instruction(r: &GroundedRecord) -> Result<InterleavedInstruction, CodecError> {
    let groundings = r
        .entities
        .iter()
        .map(|e| Grounding {
            phrase: e.phrase.clone(),
            attributes: e.attrs.clone(),
            bbox: e.bbox,
        })
        .collect();
    codec::interleave_grounded(&r.caption, groundings)
}

// ---------------------------------------------------------------------------
// Constraint lists

/// Read one constraint per line in the record container format; blank lines
/// are skipped.
pub fn read_constraints<R: BufRead>(reader: R) -> Result<Vec<Constraint>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::ParseError {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_constraints(path: impl AsRef<Path>) -> Result<Vec<Constraint>, DatasetError> {
    read_constraints(BufReader::new(File::open(path)?))
}

pub fn write_constraints<W: Write>(mut w: W, constraints: &[Constraint]) -> io::Result<()> {
    for c in constraints {
        writeln!(w, "{}", serde_json::to_string(c).expect("constraints serialize"))?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// Statistics

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub count: usize,
    /// Number of records per entity count.
    pub entity_histogram: BTreeMap<usize, usize>,
    /// Mean caption length in tokens.
    pub mean_caption_tokens: f64,
    pub mean_entities: f64,
    /// Fraction of records with more than ten entities.
    pub frac_over_ten: f64,
}

pub fn stats(records: &[GroundedRecord]) -> DatasetStats {
    let mut entity_histogram = BTreeMap::new();
    let mut tokens = 0usize;
    let mut entities = 0usize;
    let mut over = 0usize;
    for r in records {
        *entity_histogram.entry(r.entities.len()).or_insert(0) += 1;
        tokens += codec::tokenize(&r.caption).len();
        entities += r.entities.len();
        over += usize::from(r.entities.len() > 10);
    }
    let n = records.len();
    let mean = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
    DatasetStats {
        count: n,
        entity_histogram,
        mean_caption_tokens: mean(tokens),
        mean_entities: mean(entities),
        frac_over_ten: mean(over),
    }
}

// ---------------------------------------------------------------------------
// Synthetic records

const NOUNS: &[&str] = &[
    "apple", "bench", "bicycle", "bird", "book", "bottle", "car", "cat", "chair", "clock", "cup",
    "desk", "dog", "giraffe", "horse", "kite", "lamp", "laptop", "umbrella", "vase",
];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black", "orange", "purple", "brown", "pink"];
const LEADS: &[&str] = &["A photo of", "An illustration of", "A scene showing", "A picture with"];
const SCENES: &[&str] = &[
    "in a park",
    "on a wooden table",
    "in a bright room",
    "on a city street",
    "by the lake",
];

fn random_box(rng: &mut impl Rng, min_edge: u32, max_edge: u32) -> BBox {
    let w = rng.random_range(min_edge..=max_edge);
    let h = rng.random_range(min_edge..=max_edge);
    let x = rng.random_range(0..=CANVAS - w);
    let y = rng.random_range(0..=CANVAS - h);
    BBox::new(x as i64, y as i64, (x + w) as i64, (y + h) as i64).expect("in range")
}

/// `n` synthetic records with 1..=max_entities colored objects each.
pub fn synth_generate(seed: u64, n: usize, max_entities: usize) -> Vec<GroundedRecord> {
    let max_entities = max_entities.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=max_entities);
            let mut entities = Vec::with_capacity(k);
            let mut mentions = Vec::with_capacity(k);
            for _ in 0..k {
                let noun = *NOUNS.choose(&mut rng).unwrap();
                let color = *COLORS.choose(&mut rng).unwrap();
                let phrase = format!("{color} {noun}");
                mentions.push(format!("a {phrase}"));
                entities.push(RecordEntity {
                    phrase,
                    attrs: BTreeMap::from([
                        ("category".to_string(), noun.to_string()),
                        ("color".to_string(), color.to_string()),
                    ]),
                    bbox: random_box(&mut rng, 40, 500),
                });
            }
            let list = match mentions.split_last() {
                Some((last, [])) => last.clone(),
                Some((last, rest)) => format!("{} and {last}", rest.join(", ")),
                None => unreachable!("k >= 1"),
            };
            let lead = LEADS.choose(&mut rng).unwrap();
            let scene = SCENES.choose(&mut rng).unwrap();
            GroundedRecord {
                id: format!("synth-{seed}-{i:06}"),
                image_ref: None,
                caption: format!("{lead} {list} {scene}."),
                entities,
                source: "synthetic".to_string(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Synthetic scene specs

/// A scene spec together with a layout known to satisfy it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub hidden: Layout,
}

fn size_class_of(b: &BBox) -> SizeClass {
    if *b == BBox::full() {
        return SizeClass::Background;
    }
    let edge = (b.area() as f64).sqrt();
    if edge > 325.0 {
        SizeClass::Large
    } else if edge > 185.0 {
        SizeClass::Medium
    } else {
        SizeClass::Small
    }
}

/// Relations between `a` and `b` that hold in the hidden layout.
fn true_pair_relations(rng: &mut impl Rng, a: &str, ba: &BBox, b: &str, bb: &BBox) -> Vec<Constraint> {
    let mut out = Vec::new();
    let (ca, cb) = (ba.center(), bb.center());
    let margin = |rng: &mut ChaCha8Rng, d: f64| (d * rng.random_range(0.0..0.5)).floor() as u32;
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let dx = cb.0 - ca.0;
    let dy = cb.1 - ca.1;
    if dx >= 0.0 {
        out.push(Constraint::left_of(a, b, margin(&mut local, dx)));
        out.push(Constraint::right_of(b, a, margin(&mut local, dx)));
    } else {
        out.push(Constraint::right_of(a, b, margin(&mut local, -dx)));
    }
    if dy >= 0.0 {
        out.push(Constraint::above(a, b, margin(&mut local, dy)));
    } else {
        out.push(Constraint::below(a, b, margin(&mut local, -dy)));
    }
    if ba.intersection_area(bb) == 0 {
        out.push(Constraint::non_overlap(a, b));
        let gap = crate::constraints::box_gap(ba, bb);
        if gap <= 150.0 {
            out.push(Constraint::adjacent(a, b, gap.ceil() as u32 + local.random_range(0..30)));
        }
    }
    out
}

/// A satisfiable spec with `2..=max_entities` entities, built by sampling a
/// hidden layout and keeping relations that hold in it.
pub fn synth_scene(seed: u64, max_entities: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=max_entities.max(2));
    let ids: Vec<String> = (0..n).map(|i| format!("e{}", i + 1)).collect();
    let mut nouns: Vec<&str> = NOUNS.to_vec();
    nouns.shuffle(&mut rng);
    // a few repeated categories so counting constraints are meaningful
    let categories: Vec<String> = (0..n).map(|_| nouns[rng.random_range(0..4)].to_string()).collect();

    let mut hidden = Layout::new();
    let mut constraints = Vec::new();
    let mut start = 0;
    let mut containers = Vec::new();
    if n >= 3 && rng.random_bool(0.25) {
        // one container holding the next entity
        let outer = random_box(&mut rng, 320, 450);
        let o = outer.coords().map(i64::from);
        let w = rng.random_range(40..=(o[2] - o[0]) / 2);
        let h = rng.random_range(40..=(o[3] - o[1]) / 2);
        let x = rng.random_range(o[0]..=o[2] - w);
        let y = rng.random_range(o[1]..=o[3] - h);
        hidden.insert(ids[0].clone(), outer);
        hidden.insert(ids[1].clone(), BBox::new(x, y, x + w, y + h).unwrap());
        constraints.push(Constraint::contains(&ids[0], &ids[1], 0));
        containers.push((0, 1));
        start = 2;
    }
    for id in &ids[start..] {
        // prefer a spot clear of everything placed so far
        let mut b = random_box(&mut rng, 60, 200);
        for _ in 0..60 {
            if hidden.values().all(|o| o.intersection_area(&b) == 0) {
                break;
            }
            b = random_box(&mut rng, 60, 200);
        }
        hidden.insert(id.clone(), b);
    }

    let tries = n + n / 2;
    for _ in 0..tries {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j || containers.contains(&(i, j)) || containers.contains(&(j, i)) {
            continue;
        }
        let rel = true_pair_relations(&mut rng, &ids[i], &hidden[&ids[i]], &ids[j], &hidden[&ids[j]]);
        if let Some(c) = rel.choose(&mut rng) {
            if !constraints.contains(c) {
                constraints.push(c.clone());
            }
        }
    }
    if n >= 3 && rng.random_bool(0.3) {
        let mut pick: Vec<usize> = (start..n).collect();
        pick.shuffle(&mut rng);
        pick.truncate(3);
        if pick.len() >= 2 {
            let members: Vec<String> = pick.iter().map(|&k| ids[k].clone()).collect();
            let row = rng.random_bool(0.5);
            let vals: Vec<f64> = members
                .iter()
                .map(|m| if row { hidden[m].center().1 } else { hidden[m].center().0 })
                .collect();
            let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
            let tol = spread.ceil() + 5.0;
            constraints.push(if row {
                Constraint::AlignedRow { ids: members, tol }
            } else {
                Constraint::AlignedCol { ids: members, tol }
            });
        }
    }
    if rng.random_bool(0.5) {
        let cat = &categories[rng.random_range(0..n)];
        let count = categories.iter().filter(|c| *c == cat).count();
        constraints.push(Constraint::CountEquals { category: cat.clone(), n: count });
    }
    if rng.random_bool(0.2) {
        constraints.push(hidden_grid(&mut rng, &ids[start..], &hidden));
    }

    let entities = ids
        .iter()
        .zip(&categories)
        .map(|(id, cat)| {
            let mut e = EntitySpec::new(id, cat, size_class_of(&hidden[id]));
            e.category = Some(cat.clone());
            e
        })
        .collect();
    SyntheticScene {
        spec: SceneSpec {
            entities,
            constraints,
            tail: None,
        },
        hidden,
    }
}

/// Grid constraint that the hidden layout satisfies: each entity is assigned
/// the cell holding its center, and up to two cells with no center inside are
/// declared empty.
fn hidden_grid(rng: &mut impl Rng, ids: &[String], hidden: &Layout) -> Constraint {
    let rows = rng.random_range(2..=4);
    let cols = rng.random_range(2..=4);
    let mut assignments = BTreeMap::new();
    let cell_of = |v: f64, k: u32| ((v * k as f64 / CANVAS as f64).floor() as u32).min(k - 1);
    for id in ids {
        let (cx, cy) = hidden[id].center();
        assignments.insert(id.clone(), Cell(cell_of(cy, rows), cell_of(cx, cols)));
    }
    let mut empty = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let rect = cell_rect(rows, cols, Cell(r, c));
            let occupied = ids.iter().any(|id| interior_depth(hidden[id].center(), rect) > 0.0);
            if !occupied && empty.len() < 2 {
                empty.push(Cell(r, c));
            }
        }
    }
    Constraint::Grid {
        rows,
        cols,
        assignments,
        empty,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints;

    #[test]
    fn zero_records() {
        assert!(synth_generate(0, 0, 12).is_empty());
        let s = stats(&[]);
        assert_eq!(s.count, 0);
        assert!(s.entity_histogram.is_empty());
        assert_eq!(s.frac_over_ten, 0.0);
    }

    #[test]
    fn synthetic_records_interleave() {
        let rs = synth_generate(0, 100, 12);
        assert_eq!(rs.len(), 100);
        for r in &rs {
            r.validate().unwrap();
            let inst = record_to_instruction(r).unwrap();
            assert_eq!(inst.entities().len(), r.entities.len());
        }
    }

    #[test]
    fn histogram_counts() {
        let base = synth_generate(1, 1, 1).pop().unwrap();
        let mut eleven = synth_generate(2, 20, 15).into_iter().find(|r| r.entities.len() >= 11).unwrap();
        eleven.entities.truncate(11);
        let s = stats(&[base.clone(), base, eleven]);
        assert_eq!(s.entity_histogram, BTreeMap::from([(1, 2), (11, 1)]));
        assert!((s.frac_over_ten - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_box_reports_line() {
        let good = synth_generate(0, 1, 2)[0].to_json_line();
        let bad = r#"{"v":1,"id":"x","image":null,"caption":"a cat","entities":[{"phrase":"cat","attrs":{},"box":[0,0,0,10]}],"source":"t"}"#;
        let text = format!("{good}\n{bad}\n");
        match read_records(text.as_bytes()) {
            Err(DatasetError::InvalidRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match read_records("{not json".as_bytes()) {
            Err(DatasetError::ParseError { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let unlocatable = r#"{"v":1,"id":"x","image":null,"caption":"a cat","entities":[{"phrase":"dog","attrs":{},"box":[0,0,5,10]}],"source":"t"}"#;
        assert!(matches!(read_records(unlocatable.as_bytes()), Err(DatasetError::InvalidRecord { line: 1, .. })));
    }

    #[test]
    fn line_schema() {
        let r = GroundedRecord {
            id: "r1".into(),
            image_ref: None,
            caption: "A black cat.".into(),
            entities: vec![RecordEntity {
                phrase: "black cat".into(),
                attrs: BTreeMap::new(),
                bbox: BBox::new(1, 2, 3, 4).unwrap(),
            }],
            source: "test".into(),
        };
        assert_eq!(
            r.to_json_line(),
            r#"{"v":1,"id":"r1","image":null,"caption":"A black cat.","entities":[{"phrase":"black cat","attrs":{},"box":[1,2,3,4]}],"source":"test"}"#
        );
        assert_eq!(GroundedRecord::from_json_line(&r.to_json_line(), 1).unwrap(), r);
    }

    #[test]
    fn hidden_layouts_satisfy_their_specs() {
        for seed in 0..300 {
            let s = synth_scene(seed, 12);
            s.spec.validate().unwrap();
            let v = constraints::check(&s.hidden, &s.spec.categories(), &s.spec.constraints).unwrap();
            assert!(v.is_empty(), "seed {seed}: {v:?}");
            assert!(s.spec.entities.len() <= 12);
        }
    }
}
