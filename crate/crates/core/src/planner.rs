//! Scene specifications, the propose → check → revise layout search, and the
//! planner JSON schema.
//!
//! The layout search is a deterministic greedy local search. Each pass walks
//! the violated constraints, generates a handful of candidate translations or
//! resizes for the boxes involved, and keeps the candidate that lowers the
//! total violation magnitude the most. Moves that do not lower it are
//! rejected, so the magnitude trace is non-increasing.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::codec::{self, CodecError, InterleavedInstruction, INDEX_ATTR};
use crate::constraints::{
    self, box_gap, cell_rect, constraint_magnitude, interior_depth,
    unchecked_total, Categories, Cell, Constraint, ConstraintError, Layout, Violation,
};
use crate::geometry::{BBox, CANVAS};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlannerError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

// ---------------------------------------------------------------------------
// Scene specs

/// Coarse size prior used for the initial proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    /// Spans the whole canvas (scene, room, table top filling the frame).
    Background,
    Large,
    #[default]
    Medium,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub id: String,
    /// Text that will appear in the caption, followed by the entity's box.
    pub phrase: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
    /// Category for counting constraints; defaults to the phrase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default)]
    pub size: SizeClass,
}

impl EntitySpec {
    pub fn new(id: &str, phrase: &str, size: SizeClass) -> Self {
        Self {
            id: id.to_string(),
            phrase: phrase.to_string(),
            attributes: BTreeMap::new(),
            category: None,
            size,
        }
    }

    pub fn category(&self) -> &str {
        self.category.as_deref().unwrap_or(&self.phrase)
    }
}

/// Entities, the constraints between them, and optional trailing caption text.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneSpec {
    pub entities: Vec<EntitySpec>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<String>,
}

impl SceneSpec {
    pub fn categories(&self) -> Categories {
        self.entities
            .iter()
            .map(|e| (e.id.clone(), e.category().to_string()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            if !ids.insert(e.id.as_str()) {
                return Err(PlannerError::InvalidSpec(format!("duplicate entity id {:?}", e.id)));
            }
            if codec::tokenize(&e.phrase).is_empty() {
                return Err(PlannerError::InvalidSpec(format!("entity {:?} has an empty phrase", e.id)));
            }
            if e.phrase.contains("<|") {
                return Err(PlannerError::InvalidSpec(format!("entity {:?} phrase contains a marker", e.id)));
            }
        }
        if self.tail.as_deref().is_some_and(|t| t.contains("<|")) {
            return Err(PlannerError::InvalidSpec("tail contains a marker".into()));
        }
        // any box works for id resolution
        let probe: Layout = self.entities.iter().map(|e| (e.id.clone(), BBox::full())).collect();
        constraints::check(&probe, &self.categories(), &self.constraints)?;
        Ok(())
    }

    /// First grid cell assigned to each entity, with the grid shape.
    fn grid_cells(&self) -> BTreeMap<&str, (u32, u32, Cell)> {
        let mut out = BTreeMap::new();
        for c in &self.constraints {
            if let Constraint::Grid { rows, cols, assignments, .. } = c {
                for (id, cell) in assignments {
                    out.entry(id.as_str()).or_insert((*rows, *cols, *cell));
                }
            }
        }
        out
    }
}

/// Edge lengths (canvas units) of the initial boxes per size class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizePriors {
    pub large: u32,
    pub medium: u32,
    pub small: u32,
}

impl Default for SizePriors {
    fn default() -> Self {
        Self {
            large: 400,
            medium: 250,
            small: 120,
        }
    }
}

impl SizePriors {
    fn edge(&self, class: SizeClass) -> f64 {
        match class {
            SizeClass::Background => CANVAS as f64,
            SizeClass::Large => self.large as f64,
            SizeClass::Medium => self.medium as f64,
            SizeClass::Small => self.small as f64,
        }
    }
}

/// Step size for the repair search: `initial`, multiplied by `decay` after
/// every pass, never below `floor`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            decay: 0.95,
            floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPlan {
    pub boxes: Layout,
    /// Completed repair passes.
    pub iterations: usize,
    /// Violations left after the last pass.
    pub residual: Vec<Violation>,
    /// Total violation magnitude before the first pass and after each pass.
    pub trace: Vec<f64>,
}

impl LayoutPlan {
    pub fn is_satisfied(&self) -> bool {
        self.residual.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Initial proposal

fn centered_box(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::from_edges_clamped(
        (cx - w / 2.0).round() as i64,
        (cy - h / 2.0).round() as i64,
        (cx + w / 2.0).round() as i64,
        (cy + h / 2.0).round() as i64,
    )
}

pub fn propose_initial(spec: &SceneSpec, seed: u64) -> Layout {
    propose_initial_with(spec, seed, &SizePriors::default())
}

/// Coarse placement: background entities fill the canvas, grid-assigned
/// entities get 80% of their cell, everything else is packed row-major into a
/// `ceil(sqrt(n))`-column grid at its prior size with ±5% jitter (capped at 90%
/// of the packing cell).
pub fn propose_initial_with(spec: &SceneSpec, seed: u64, priors: &SizePriors) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = spec.grid_cells();
    let packed: Vec<&EntitySpec> = spec
        .entities
        .iter()
        .filter(|e| e.size != SizeClass::Background && !grid.contains_key(e.id.as_str()))
        .collect();
    let n = packed.len().max(1);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cell_w = CANVAS as f64 / cols as f64;
    let cell_h = CANVAS as f64 / rows as f64;

    let mut out = Layout::new();
    let mut slot = 0;
    for e in &spec.entities {
        let b = if let Some(&(gr, gc, cell)) = grid.get(e.id.as_str()) {
            let [x0, y0, x1, y1] = cell_rect(gr, gc, cell);
            centered_box((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.8 * (x1 - x0), 0.8 * (y1 - y0))
        } else if e.size == SizeClass::Background {
            BBox::full()
        } else {
            let (r, c) = (slot / cols, slot % cols);
            slot += 1;
            let edge = priors.edge(e.size);
            let w = (edge * (1.0 + rng.random_range(-0.05..=0.05))).min(0.9 * cell_w);
            let h = (edge * (1.0 + rng.random_range(-0.05..=0.05))).min(0.9 * cell_h);
            centered_box((c as f64 + 0.5) * cell_w, (r as f64 + 0.5) * cell_h, w, h)
        };
        out.insert(e.id.clone(), b);
    }
    out
}

// ---------------------------------------------------------------------------
// Repair

/// A candidate edit: replacement boxes for some ids.
type Move = Vec<(String, BBox)>;

/// `ceil(step * d)` clamped to at least one unit, plus the full `ceil(d)`.
fn amounts(d: f64, step: f64) -> Vec<i64> {
    let full = d.ceil().max(1.0) as i64;
    let part = (step * d).ceil().max(1.0) as i64;
    if part < full {
        vec![part, full]
    } else {
        vec![full]
    }
}

fn shift(id: &str, b: &BBox, dx: i64, dy: i64) -> (String, BBox) {
    (id.to_string(), b.translated(dx, dy))
}

fn edges(id: &str, e: [i64; 4]) -> (String, BBox) {
    (id.to_string(), BBox::from_edges_clamped(e[0], e[1], e[2], e[3]))
}

fn coords(b: &BBox) -> [i64; 4] {
    b.coords().map(i64::from)
}

/// Candidate moves for a pair relation on one axis: `a` must move by `-d`
/// or `b` by `+d` (or both by half).
fn push_apart(a: &str, ba: &BBox, b: &str, bb: &BBox, d: f64, step: f64, horizontal: bool) -> Vec<Move> {
    let mut out = Vec::new();
    let (ax, ay) = if horizontal { (1, 0) } else { (0, 1) };
    for amt in amounts(d, step) {
        let half = (amt + 1) / 2;
        out.push(vec![shift(a, ba, -amt * ax, -amt * ay)]);
        out.push(vec![shift(b, bb, amt * ax, amt * ay)]);
        out.push(vec![shift(a, ba, -half * ax, -half * ay), shift(b, bb, half * ax, half * ay)]);
    }
    out
}

fn candidate_moves(c: &Constraint, layout: &Layout, step: f64) -> Vec<Move> {
    use Constraint::*;
    let bx = |id: &str| layout[id];
    match c {
        LeftOf { a, b, margin } | RightOf { b: a, a: b, margin } => {
            let d = bx(a).center().0 + *margin as f64 - bx(b).center().0;
            push_apart(a, &bx(a), b, &bx(b), d, step, true)
        }
        Above { a, b, margin } | Below { b: a, a: b, margin } => {
            let d = bx(a).center().1 + *margin as f64 - bx(b).center().1;
            push_apart(a, &bx(a), b, &bx(b), d, step, false)
        }
        Contains { outer, inner, margin } => contain_moves(outer, &bx(outer), inner, &bx(inner), *margin, step),
        NonOverlap { a, b, .. } => separate_moves(a, &bx(a), b, &bx(b), step),
        AdjacentTo { a, b, max_gap } => adjacency_moves(a, &bx(a), b, &bx(b), *max_gap, step),
        AlignedRow { ids, tol } => align_moves(ids, layout, *tol, step, false),
        AlignedCol { ids, tol } => align_moves(ids, layout, *tol, step, true),
        CountEquals { .. } => Vec::new(),
        Grid { rows, cols, assignments, empty } => grid_moves(*rows, *cols, assignments, empty, layout, step),
    }
}

fn contain_moves(outer: &str, bo: &BBox, inner: &str, bi: &BBox, margin: u32, step: f64) -> Vec<Move> {
    let m = margin as i64;
    let o = coords(bo);
    let i = coords(bi);
    // positive = inner pokes out on that side
    let left = (o[0] - m - i[0]).max(0);
    let top = (o[1] - m - i[1]).max(0);
    let right = (i[2] - o[2] - m).max(0);
    let bottom = (i[3] - o[3] - m).max(0);
    let d = left.max(top).max(right).max(bottom) as f64;
    let mut out = Vec::new();
    for amt in amounts(d, step) {
        let f = |p: i64| p.min(amt);
        let dx = f(left) - f(right);
        let dy = f(top) - f(bottom);
        out.push(vec![shift(inner, bi, dx, dy)]);
        out.push(vec![shift(outer, bo, -dx, -dy)]);
        out.push(vec![edges(inner, [i[0] + f(left), i[1] + f(top), i[2] - f(right), i[3] - f(bottom)])]);
        out.push(vec![edges(outer, [o[0] - f(left), o[1] - f(top), o[2] + f(right), o[3] + f(bottom)])]);
    }
    // recenter the inner box inside the outer one, shrinking it if needed
    let w = (i[2] - i[0]).min(o[2] - o[0] + 2 * m);
    let h = (i[3] - i[1]).min(o[3] - o[1] + 2 * m);
    let cx = (o[0] + o[2]) / 2;
    let cy = (o[1] + o[3]) / 2;
    out.push(vec![edges(inner, [cx - w / 2, cy - h / 2, cx - w / 2 + w, cy - h / 2 + h])]);
    out
}

fn separate_moves(a: &str, ba: &BBox, b: &str, bb: &BBox, step: f64) -> Vec<Move> {
    let (pa, pb) = (coords(ba), coords(bb));
    let mut out = Vec::new();
    for (axis, horizontal) in [(0usize, true), (1usize, false)] {
        let (lo, hi) = (axis, axis + 2);
        // distance `a` must move in +direction to clear `b`, and in -direction
        let plus = pb[hi] - pa[lo];
        let minus = pa[hi] - pb[lo];
        let unit = |v: i64| if horizontal { (v, 0) } else { (0, v) };
        for (dist, sign) in [(minus, -1i64), (plus, 1i64)] {
            if dist <= 0 {
                continue;
            }
            for amt in amounts(dist as f64, step) {
                let (dx, dy) = unit(sign * amt);
                out.push(vec![shift(a, ba, dx, dy)]);
                out.push(vec![shift(b, bb, -dx, -dy)]);
                let half = (amt + 1) / 2;
                let (hx, hy) = unit(sign * half);
                out.push(vec![shift(a, ba, hx, hy), shift(b, bb, -hx, -hy)]);
            }
        }
        // trim whichever box's edge reaches into the other
        let overlap = pa[hi].min(pb[hi]) - pa[lo].max(pb[lo]);
        if overlap > 0 {
            let mut trim = |id: &str, p: [i64; 4], q: [i64; 4]| {
                let mut e = p;
                if p[lo] < q[lo] {
                    e[hi] = e[hi].min(q[lo]);
                } else {
                    e[lo] = e[lo].max(q[hi]);
                }
                if e[hi] > e[lo] {
                    out.push(vec![edges(id, e)]);
                }
            };
            trim(a, pa, pb);
            trim(b, pb, pa);
        }
    }
    out
}

fn adjacency_moves(a: &str, ba: &BBox, b: &str, bb: &BBox, max_gap: u32, step: f64) -> Vec<Move> {
    let (pa, pb) = (coords(ba), coords(bb));
    let mut out = Vec::new();
    for (axis, horizontal) in [(0usize, true), (1usize, false)] {
        let (lo, hi) = (axis, axis + 2);
        // a before b on this axis: gap = b.lo - a.hi; move a forward
        let (sep, dir) = if pb[lo] - pa[hi] > pa[lo] - pb[hi] {
            (pb[lo] - pa[hi], 1i64)
        } else {
            (pa[lo] - pb[hi], -1i64)
        };
        let need = sep - max_gap as i64;
        if need <= 0 {
            continue;
        }
        for amt in amounts(need as f64, step) {
            let v = dir * amt;
            let (dx, dy) = if horizontal { (v, 0) } else { (0, v) };
            out.push(vec![shift(a, ba, dx, dy)]);
            out.push(vec![shift(b, bb, -dx, -dy)]);
            let mut grown = pa;
            if dir > 0 {
                grown[hi] += amt;
            } else {
                grown[lo] -= amt;
            }
            out.push(vec![edges(a, grown)]);
        }
    }
    // diagonal gaps also shrink when the other axis closes
    let g = box_gap(ba, bb);
    if g > max_gap as f64 {
        let (ca, cb) = (ba.center(), bb.center());
        let (dx, dy) = (cb.0 - ca.0, cb.1 - ca.1);
        let norm = dx.hypot(dy).max(1.0);
        let s = (g - max_gap as f64).max(1.0) / norm;
        out.push(vec![shift(a, ba, (dx * s).round() as i64, (dy * s).round() as i64)]);
    }
    out
}

fn align_moves(ids: &[String], layout: &Layout, tol: f64, step: f64, by_x: bool) -> Vec<Move> {
    let center = |id: &String| {
        let c = layout[id].center();
        if by_x {
            c.0
        } else {
            c.1
        }
    };
    let unit = |v: i64| if by_x { (v, 0) } else { (0, v) };
    let (lo_id, hi_id) = (
        ids.iter().min_by(|a, b| center(a).total_cmp(&center(b))).unwrap(),
        ids.iter().max_by(|a, b| center(a).total_cmp(&center(b))).unwrap(),
    );
    let spread = center(hi_id) - center(lo_id);
    let d = spread - tol;
    let mut out = Vec::new();
    for amt in amounts(d, step) {
        let (dx, dy) = unit(-amt);
        out.push(vec![shift(hi_id, &layout[hi_id], dx, dy)]);
        out.push(vec![shift(lo_id, &layout[lo_id], -dx, -dy)]);
    }
    let mean = ids.iter().map(center).sum::<f64>() / ids.len() as f64;
    for frac in [step, 1.0] {
        let mv: Move = ids
            .iter()
            .map(|id| {
                let (dx, dy) = unit(((mean - center(id)) * frac).round() as i64);
                shift(id, &layout[id], dx, dy)
            })
            .collect();
        out.push(mv);
    }
    out
}

fn grid_moves(
    rows: u32,
    cols: u32,
    assignments: &BTreeMap<String, Cell>,
    empty: &[Cell],
    layout: &Layout,
    step: f64,
) -> Vec<Move> {
    let mut out = Vec::new();
    for (id, cell) in assignments {
        let b = layout[id];
        let (cx, cy) = b.center();
        let rect = cell_rect(rows, cols, *cell);
        if constraints::distance_to_rect((cx, cy), rect) == 0.0 {
            continue;
        }
        let tx = (rect[0] + rect[2]) / 2.0 - cx;
        let ty = (rect[1] + rect[3]) / 2.0 - cy;
        for frac in [step, 1.0] {
            out.push(vec![shift(id, &b, (tx * frac).round() as i64, (ty * frac).round() as i64)]);
        }
        let [x0, y0, x1, y1] = rect;
        out.push(vec![(id.clone(), centered_box((x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.8 * (x1 - x0), 0.8 * (y1 - y0)))]);
    }
    for cell in empty {
        let rect = cell_rect(rows, cols, *cell);
        for id in assignments.keys() {
            let b = layout[id];
            let (cx, cy) = b.center();
            if interior_depth((cx, cy), rect) == 0.0 {
                continue;
            }
            // leave through each side, just past the boundary
            let exits = [
                (-((cx - rect[0]).floor() as i64 + 1), 0),
                (((rect[2] - cx).floor() as i64 + 1), 0),
                (0, -((cy - rect[1]).floor() as i64 + 1)),
                (0, ((rect[3] - cy).floor() as i64 + 1)),
            ];
            for (dx, dy) in exits {
                out.push(vec![shift(id, &b, dx, dy)]);
            }
        }
    }
    out
}

fn apply(layout: &Layout, mv: &Move) -> Layout {
    let mut next = layout.clone();
    for (id, b) in mv {
        next.insert(id.clone(), *b);
    }
    next
}

/// Iteratively revise `boxes` until every constraint in `spec` holds or
/// `max_iters` passes are spent.
pub fn repair(
    boxes: &Layout,
    spec: &SceneSpec,
    max_iters: usize,
    schedule: StepSchedule,
) -> Result<LayoutPlan, PlannerError> {
    for e in &spec.entities {
        if !boxes.contains_key(&e.id) {
            return Err(PlannerError::InvalidSpec(format!("no box for entity {:?}", e.id)));
        }
    }
    let categories = spec.categories();
    let cs = &spec.constraints;
    total_check(boxes, &categories, cs)?;

    let mut layout = boxes.clone();
    let mut total = unchecked_total(&layout, &categories, cs);
    let mut trace = vec![total];
    let mut iterations = 0;
    let mut step = schedule.initial;
    while total > 0.0 && iterations < max_iters {
        iterations += 1;
        let mut improved = false;
        for c in cs.iter().filter(|c| c.is_geometric()) {
            if constraint_magnitude(c, &layout, &categories) == 0.0 {
                continue;
            }
            let mut best: Option<(f64, Layout)> = None;
            for mv in candidate_moves(c, &layout, step) {
                let next = apply(&layout, &mv);
                let t = unchecked_total(&next, &categories, cs);
                if t < best.as_ref().map_or(total, |(bt, _)| *bt) {
                    best = Some((t, next));
                }
            }
            if let Some((t, next)) = best {
                debug_assert!(t < total);
                total = t;
                layout = next;
                improved = true;
            }
            if total == 0.0 {
                break;
            }
        }
        trace.push(total);
        let at_floor = step <= schedule.floor;
        step = (step * schedule.decay).max(schedule.floor);
        if !improved && at_floor {
            // every later pass would propose the same rejected moves
            iterations = max_iters;
        }
    }
    let residual = constraints::check(&layout, &categories, cs)?;
    Ok(LayoutPlan {
        boxes: layout,
        iterations,
        residual,
        trace,
    })
}

fn total_check(layout: &Layout, categories: &Categories, cs: &[Constraint]) -> Result<(), PlannerError> {
    constraints::total_magnitude(layout, categories, cs)?;
    Ok(())
}

/// The full layout procedure: initial proposal followed by repair.
pub fn plan(spec: &SceneSpec, seed: u64, max_iters: usize) -> Result<LayoutPlan, PlannerError> {
    spec.validate()?;
    repair(&propose_initial(spec, seed), spec, max_iters, StepSchedule::default())
}

// ---------------------------------------------------------------------------
// Planner output schema

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedObject {
    pub index: usize,
    pub name: String,
    pub bbox: BBox,
}

impl PlannedObject {
    /// The `"N. name"` key used in the JSON object map.
    pub fn key(&self) -> String {
        format!("{}. {}", self.index, self.name)
    }
}

/// Planner JSON: free-text reasoning, a prompt carrying `<|bbox_N|>`
/// placeholders, and the numbered object map in its original order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOutput {
    pub reasoning: String,
    pub prompt: String,
    pub objects: Vec<PlannedObject>,
}

impl Serialize for PlannerOutput {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        struct Objects<'a>(&'a [PlannedObject]);
        impl Serialize for Objects<'_> {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                let mut map = serializer.serialize_map(Some(self.0.len()))?;
                for o in self.0 {
                    map.serialize_entry(&o.key(), &o.bbox)?;
                }
                map.end()
            }
        }
        let mut map = serializer.serialize_map(Some(3))?;
        map.serialize_entry("reasoning", &self.reasoning)?;
        map.serialize_entry("prompt", &self.prompt)?;
        map.serialize_entry("objects", &Objects(&self.objects))?;
        map.end()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OutputError {
    #[error("planner output is not JSON: {0}")]
    NotJson(String),
    #[error("planner output is missing field {0:?}")]
    MissingField(&'static str),
    #[error("field {0:?} has the wrong type")]
    WrongType(&'static str),
    #[error("object key {0:?} does not match \"N. name\"")]
    InvalidKey(String),
    #[error("object index {0} appears twice")]
    DuplicateIndex(usize),
    #[error("object indices skip {0}")]
    IndexGap(usize),
    #[error("placeholders do not match objects (no object for {missing:?}, no placeholder for {unused:?})")]
    PlaceholderMismatch { missing: Vec<usize>, unused: Vec<usize> },
    #[error("object {0:?} has an invalid box")]
    InvalidBox(String),
    #[error(transparent)]
    Placeholder(CodecError),
}

/// The JSON body inside optional Markdown code fences.
fn strip_fences(raw: &str) -> &str {
    let t = raw.trim();
    let Some(start) = t.find("```") else { return t };
    let after = &t[start + 3..];
    let after = after
        .strip_prefix("json")
        .or_else(|| after.strip_prefix("JSON"))
        .unwrap_or(after);
    let body = match after.find("```") {
        Some(end) => &after[..end],
        None => after,
    };
    body.trim()
}

fn parse_key(key: &str) -> Option<(usize, String)> {
    let (num, name) = key.split_once('.')?;
    let index = num.trim().parse().ok()?;
    let name = name.trim();
    (!num.is_empty() && num.bytes().all(|c| c.is_ascii_digit()) && !name.is_empty())
        .then(|| (index, name.to_string()))
}

/// Parse and validate raw planner text.
pub fn parse_planner_output(raw: &str) -> Result<PlannerOutput, OutputError> {
    let body = strip_fences(raw);
    let value: Value = serde_json::from_str(body).map_err(|e| OutputError::NotJson(e.to_string()))?;
    let root = value.as_object().ok_or(OutputError::NotJson("top level is not an object".into()))?;

    let reasoning = match root.get("reasoning") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(OutputError::WrongType("reasoning")),
    };
    let prompt = root
        .get("prompt")
        .ok_or(OutputError::MissingField("prompt"))?
        .as_str()
        .ok_or(OutputError::WrongType("prompt"))?
        .to_string();
    let raw_objects = root
        .get("objects")
        .ok_or(OutputError::MissingField("objects"))?
        .as_object()
        .ok_or(OutputError::WrongType("objects"))?;

    let mut objects = Vec::with_capacity(raw_objects.len());
    let mut seen = BTreeSet::new();
    for (key, v) in raw_objects {
        let (index, name) = parse_key(key).ok_or_else(|| OutputError::InvalidKey(key.clone()))?;
        if index == 0 {
            return Err(OutputError::IndexGap(1));
        }
        if !seen.insert(index) {
            return Err(OutputError::DuplicateIndex(index));
        }
        let bbox: BBox = serde_json::from_value(v.clone()).map_err(|_| OutputError::InvalidBox(key.clone()))?;
        objects.push(PlannedObject { index, name, bbox });
    }
    if let Some(gap) = (1..=objects.len()).find(|i| !seen.contains(i)) {
        return Err(OutputError::IndexGap(gap));
    }

    let placed = codec::placeholder_indices(&prompt).map_err(OutputError::Placeholder)?;
    let placed_set: BTreeSet<usize> = placed.iter().copied().collect();
    let missing: Vec<usize> = placed_set.difference(&seen).copied().collect();
    let unused: Vec<usize> = seen.difference(&placed_set).copied().collect();
    if !missing.is_empty() || !unused.is_empty() || placed.len() != placed_set.len() {
        return Err(OutputError::PlaceholderMismatch { missing, unused });
    }

    Ok(PlannerOutput {
        reasoning,
        prompt,
        objects,
    })
}

/// Attribute key holding the object name on entities from [`to_instruction`].
pub const NAME_ATTR: &str = "name";

/// Convert planner output into the executable instruction. Text after the
/// last placeholder is the instruction's tail.
pub fn to_instruction(out: &PlannerOutput) -> Result<InterleavedInstruction, CodecError> {
    let boxes: BTreeMap<usize, BBox> = out.objects.iter().map(|o| (o.index, o.bbox)).collect();
    let names: BTreeMap<String, &str> = out
        .objects
        .iter()
        .map(|o| (o.index.to_string(), o.name.as_str()))
        .collect();
    let inst = codec::substitute_placeholders(&out.prompt, &boxes)?;
    let entities = inst
        .entities()
        .iter()
        .cloned()
        .map(|mut e| {
            if let Some(name) = e.attributes.get(INDEX_ATTR).and_then(|i| names.get(i)) {
                e.attributes.insert(NAME_ATTR.to_string(), name.to_string());
            }
            e
        })
        .collect();
    InterleavedInstruction::from_parts(inst.words().to_vec(), entities)
}

/// Emit a heuristic plan in the planner JSON schema: each phrase followed by
/// its placeholder, in spec order, then the tail.
pub fn plan_to_output(spec: &SceneSpec, plan: &LayoutPlan) -> Result<PlannerOutput, PlannerError> {
    let mut parts = Vec::with_capacity(spec.entities.len() + 1);
    let mut objects = Vec::with_capacity(spec.entities.len());
    for (i, e) in spec.entities.iter().enumerate() {
        let bbox = *plan
            .boxes
            .get(&e.id)
            .ok_or_else(|| PlannerError::InvalidSpec(format!("plan has no box for {:?}", e.id)))?;
        let index = i + 1;
        parts.push(format!("{}<|bbox_{index}|>", e.phrase.trim()));
        objects.push(PlannedObject {
            index,
            name: e.phrase.trim().to_string(),
            bbox,
        });
    }
    if let Some(tail) = spec.tail.as_deref().map(str::trim).filter(|t| !t.is_empty()) {
        parts.push(tail.to_string());
    }
    let reasoning = format!(
        "Heuristic layout search: {} entities, {} constraints, {} passes, {} residual violations.",
        spec.entities.len(),
        spec.constraints.len(),
        plan.iterations,
        plan.residual.len()
    );
    Ok(PlannerOutput {
        reasoning,
        prompt: parts.join(" "),
        objects,
    })
}
