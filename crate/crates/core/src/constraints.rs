//! Spatial constraints over a layout and their violation magnitudes.
//!
//! Directional relations compare box centers. Every magnitude is zero exactly
//! when its constraint holds and is continuous in box coordinates for the
//! geometric kinds, so the sum can drive a local-search repair.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, CANVAS};

/// Entity id → box.
pub type Layout = BTreeMap<String, BBox>;
/// Entity id → category label, used by counting constraints.
pub type Categories = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("constraint references unknown entity {0:?}")]
    UnknownEntityId(String),
    #[error("invalid constraint: {0}")]
    InvalidConstraint(String),
}

/// A grid cell, `(row, col)`, 0-based. Serialized as `[row, col]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub u32, pub u32);

impl Cell {
    pub fn row(&self) -> u32 {
        self.0
    }
    pub fn col(&self) -> u32 {
        self.1
    }
}

/// Rectangle `[x0, x1] × [y0, y1]` of a cell on the canvas.
pub fn cell_rect(rows: u32, cols: u32, cell: Cell) -> [f64; 4] {
    let w = CANVAS as f64 / cols as f64;
    let h = CANVAS as f64 / rows as f64;
    [
        cell.col() as f64 * w,
        cell.row() as f64 * h,
        (cell.col() + 1) as f64 * w,
        (cell.row() + 1) as f64 * h,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Constraint {
    /// `cx(a) + margin <= cx(b)`.
    LeftOf {
        a: String,
        b: String,
        #[serde(default)]
        margin: u32,
    },
    /// `cx(a) >= cx(b) + margin`.
    RightOf {
        a: String,
        b: String,
        #[serde(default)]
        margin: u32,
    },
    /// `cy(a) + margin <= cy(b)`; y grows downwards.
    Above {
        a: String,
        b: String,
        #[serde(default)]
        margin: u32,
    },
    /// `cy(a) >= cy(b) + margin`.
    Below {
        a: String,
        b: String,
        #[serde(default)]
        margin: u32,
    },
    Contains {
        outer: String,
        inner: String,
        #[serde(default)]
        margin: u32,
    },
    /// Intersection area at most `epsilon`.
    NonOverlap {
        a: String,
        b: String,
        #[serde(default)]
        epsilon: u64,
    },
    /// Axis-aligned gap between the boxes at most `max_gap`.
    AdjacentTo {
        a: String,
        b: String,
        #[serde(default)]
        max_gap: u32,
    },
    /// Spread of center y values at most `tol`.
    AlignedRow {
        ids: Vec<String>,
        #[serde(default)]
        tol: f64,
    },
    /// Spread of center x values at most `tol`.
    AlignedCol {
        ids: Vec<String>,
        #[serde(default)]
        tol: f64,
    },
    CountEquals { category: String, n: usize },
    /// Equal-cell grid over the whole canvas. Each assigned entity's center
    /// must lie in its (closed) cell; no assigned entity's center may lie
    /// strictly inside an empty cell.
    Grid {
        rows: u32,
        cols: u32,
        assignments: BTreeMap<String, Cell>,
        #[serde(default)]
        empty: Vec<Cell>,
    },
}

impl Constraint {
    pub fn left_of(a: &str, b: &str, margin: u32) -> Self {
        Constraint::LeftOf { a: a.into(), b: b.into(), margin }
    }
    pub fn right_of(a: &str, b: &str, margin: u32) -> Self {
        Constraint::RightOf { a: a.into(), b: b.into(), margin }
    }
    pub fn above(a: &str, b: &str, margin: u32) -> Self {
        Constraint::Above { a: a.into(), b: b.into(), margin }
    }
    pub fn below(a: &str, b: &str, margin: u32) -> Self {
        Constraint::Below { a: a.into(), b: b.into(), margin }
    }
    pub fn contains(outer: &str, inner: &str, margin: u32) -> Self {
        Constraint::Contains { outer: outer.into(), inner: inner.into(), margin }
    }
    pub fn non_overlap(a: &str, b: &str) -> Self {
        Constraint::NonOverlap { a: a.into(), b: b.into(), epsilon: 0 }
    }
    pub fn adjacent(a: &str, b: &str, max_gap: u32) -> Self {
        Constraint::AdjacentTo { a: a.into(), b: b.into(), max_gap }
    }

    /// Entity ids referenced by this constraint.
    pub fn ids(&self) -> Vec<&str> {
        use Constraint::*;
        match self {
            LeftOf { a, b, .. }
            | RightOf { a, b, .. }
            | Above { a, b, .. }
            | Below { a, b, .. }
            | NonOverlap { a, b, .. }
            | AdjacentTo { a, b, .. } => vec![a, b],
            Contains { outer, inner, .. } => vec![outer, inner],
            AlignedRow { ids, .. } | AlignedCol { ids, .. } => ids.iter().map(String::as_str).collect(),
            CountEquals { .. } => vec![],
            Grid { assignments, .. } => assignments.keys().map(String::as_str).collect(),
        }
    }

    /// Whether moving boxes can change this constraint's magnitude.
    pub fn is_geometric(&self) -> bool {
        !matches!(self, Constraint::CountEquals { .. })
    }

    fn validate(&self, layout: &Layout) -> Result<(), ConstraintError> {
        for id in self.ids() {
            if !layout.contains_key(id) {
                return Err(ConstraintError::UnknownEntityId(id.to_string()));
            }
        }
        let invalid = |m: &str| Err(ConstraintError::InvalidConstraint(m.to_string()));
        match self {
            Constraint::AlignedRow { ids, tol } | Constraint::AlignedCol { ids, tol } => {
                if !(tol.is_finite() && *tol >= 0.0) {
                    return invalid("alignment tolerance must be finite and >= 0");
                }
                if ids.is_empty() {
                    return invalid("alignment needs at least one entity");
                }
            }
            Constraint::Grid { rows, cols, assignments, empty } => {
                if *rows == 0 || *cols == 0 {
                    return invalid("grid needs rows >= 1 and cols >= 1");
                }
                let in_range = |c: &Cell| c.row() < *rows && c.col() < *cols;
                if !assignments.values().all(in_range) || !empty.iter().all(in_range) {
                    return invalid("grid cell outside the grid");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Constraint::*;
        match self {
            LeftOf { a, b, margin } => write!(f, "{a} left of {b} (margin {margin})"),
            RightOf { a, b, margin } => write!(f, "{a} right of {b} (margin {margin})"),
            Above { a, b, margin } => write!(f, "{a} above {b} (margin {margin})"),
            Below { a, b, margin } => write!(f, "{a} below {b} (margin {margin})"),
            Contains { outer, inner, margin } => write!(f, "{outer} contains {inner} (margin {margin})"),
            NonOverlap { a, b, epsilon } => write!(f, "{a} does not overlap {b} (epsilon {epsilon})"),
            AdjacentTo { a, b, max_gap } => write!(f, "{a} adjacent to {b} (gap <= {max_gap})"),
            AlignedRow { ids, tol } => write!(f, "row alignment of [{}] (tol {tol})", ids.join(", ")),
            AlignedCol { ids, tol } => write!(f, "column alignment of [{}] (tol {tol})", ids.join(", ")),
            CountEquals { category, n } => write!(f, "exactly {n} × {category}"),
            Grid { rows, cols, .. } => write!(f, "{rows}×{cols} grid"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Position of the constraint in the checked list.
    pub index: usize,
    pub constraint: Constraint,
    /// Strictly positive for every reported violation.
    pub magnitude: f64,
    pub message: String,
}

/// Magnitudes (with messages) of the ways one constraint is violated. Empty
/// when satisfied. Ids must already be validated.
fn evaluate(c: &Constraint, layout: &Layout, categories: &Categories) -> Vec<(f64, String)> {
    use Constraint::*;
    let bx = |id: &String| layout[id];
    let mut out = Vec::new();
    let mut report = |m: f64, msg: String| {
        if m > 0.0 {
            out.push((m, msg));
        }
    };
    match c {
        LeftOf { a, b, margin } => {
            let (ca, cb) = (bx(a).center().0, bx(b).center().0);
            report(ca + *margin as f64 - cb, format!("{a} center x {ca} is not {margin} left of {b} center x {cb}"));
        }
        RightOf { a, b, margin } => {
            let (ca, cb) = (bx(a).center().0, bx(b).center().0);
            report(cb + *margin as f64 - ca, format!("{a} center x {ca} is not {margin} right of {b} center x {cb}"));
        }
        Above { a, b, margin } => {
            let (ca, cb) = (bx(a).center().1, bx(b).center().1);
            report(ca + *margin as f64 - cb, format!("{a} center y {ca} is not {margin} above {b} center y {cb}"));
        }
        Below { a, b, margin } => {
            let (ca, cb) = (bx(a).center().1, bx(b).center().1);
            report(cb + *margin as f64 - ca, format!("{a} center y {ca} is not {margin} below {b} center y {cb}"));
        }
        Contains { outer, inner, margin } => {
            let m = containment_protrusion(&bx(outer), &bx(inner), *margin);
            report(m, format!("{inner} sticks out of {outer} by {m}"));
        }
        NonOverlap { a, b, epsilon } => {
            let (ba, bb) = (bx(a), bx(b));
            let inter = ba.intersection_area(&bb);
            if inter > *epsilon {
                let m = (inter - epsilon) as f64 / ba.area().min(bb.area()) as f64;
                report(m, format!("{a} and {b} overlap by {inter} square units"));
            }
        }
        AdjacentTo { a, b, max_gap } => {
            let g = box_gap(&bx(a), &bx(b));
            report(g - *max_gap as f64, format!("{a} and {b} are {g} apart (max {max_gap})"));
        }
        AlignedRow { ids, tol } => {
            let spread = spread(ids.iter().map(|i| bx(i).center().1));
            report(spread - tol, format!("row centers spread {spread} (tol {tol})"));
        }
        AlignedCol { ids, tol } => {
            let spread = spread(ids.iter().map(|i| bx(i).center().0));
            report(spread - tol, format!("column centers spread {spread} (tol {tol})"));
        }
        CountEquals { category, n } => {
            let count = layout
                .keys()
                .filter(|id| categories.get(*id) == Some(category))
                .count();
            report(count.abs_diff(*n) as f64, format!("found {count} × {category}, expected {n}"));
        }
        Grid { rows, cols, assignments, empty } => {
            for (id, cell) in assignments {
                let d = distance_to_rect(bx(id).center(), cell_rect(*rows, *cols, *cell));
                report(d, format!("{id} center is {d} away from cell ({}, {})", cell.row(), cell.col()));
            }
            for cell in empty {
                let rect = cell_rect(*rows, *cols, *cell);
                let occupants: Vec<(&String, f64)> = assignments
                    .keys()
                    .map(|id| (id, interior_depth(bx(id).center(), rect)))
                    .filter(|(_, d)| *d > 0.0)
                    .collect();
                if !occupants.is_empty() {
                    let m = occupants.iter().map(|(_, d)| d).sum();
                    let names: Vec<&str> = occupants.iter().map(|(id, _)| id.as_str()).collect();
                    report(
                        m,
                        format!("empty cell ({}, {}) holds {}", cell.row(), cell.col(), names.join(", ")),
                    );
                }
            }
        }
    }
    out
}

/// Largest amount by which `inner` crosses the dilated boundary of `outer`.
pub(crate) fn containment_protrusion(outer: &BBox, inner: &BBox, margin: u32) -> f64 {
    let m = margin as i64;
    let o = outer.coords().map(i64::from);
    let i = inner.coords().map(i64::from);
    [o[0] - m - i[0], o[1] - m - i[1], i[2] - o[2] - m, i[3] - o[3] - m]
        .into_iter()
        .max()
        .unwrap()
        .max(0) as f64
}

/// Separation along the axis where the boxes are farthest apart; 0 when they
/// touch or overlap.
pub(crate) fn box_gap(a: &BBox, b: &BBox) -> f64 {
    let dx = (a.xmin() as i64 - b.xmax() as i64).max(b.xmin() as i64 - a.xmax() as i64);
    let dy = (a.ymin() as i64 - b.ymax() as i64).max(b.ymin() as i64 - a.ymax() as i64);
    dx.max(dy).max(0) as f64
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

pub(crate) fn distance_to_rect((x, y): (f64, f64), [x0, y0, x1, y1]: [f64; 4]) -> f64 {
    let dx = (x0 - x).max(0.0).max(x - x1);
    let dy = (y0 - y).max(0.0).max(y - y1);
    dx.hypot(dy)
}

/// Distance from a point to the boundary of the open rectangle; 0 outside.
pub(crate) fn interior_depth((x, y): (f64, f64), [x0, y0, x1, y1]: [f64; 4]) -> f64 {
    (x - x0).min(x1 - x).min(y - y0).min(y1 - y).max(0.0)
}

/// Evaluate every constraint against `layout`.
pub fn check(
    layout: &Layout,
    categories: &Categories,
    constraints: &[Constraint],
) -> Result<Vec<Violation>, ConstraintError> {
    let mut out = Vec::new();
    for (index, c) in constraints.iter().enumerate() {
        c.validate(layout)?;
        for (magnitude, message) in evaluate(c, layout, categories) {
            out.push(Violation {
                index,
                constraint: c.clone(),
                magnitude,
                message,
            });
        }
    }
    Ok(out)
}

/// Sum of all violation magnitudes.
pub fn total_magnitude(
    layout: &Layout,
    categories: &Categories,
    constraints: &[Constraint],
) -> Result<f64, ConstraintError> {
    for c in constraints {
        c.validate(layout)?;
    }
    Ok(unchecked_total(layout, categories, constraints))
}

/// [`total_magnitude`] without id validation, for callers that validated once.
pub(crate) fn unchecked_total(layout: &Layout, categories: &Categories, constraints: &[Constraint]) -> f64 {
    constraints
        .iter()
        .flat_map(|c| evaluate(c, layout, categories))
        .map(|(m, _)| m)
        .sum()
}

/// Magnitude of a single constraint, ids assumed valid.
pub(crate) fn constraint_magnitude(c: &Constraint, layout: &Layout, categories: &Categories) -> f64 {
    evaluate(c, layout, categories).iter().map(|(m, _)| m).sum()
}
