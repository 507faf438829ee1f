//! Grid layouts: cells with allowed headings, workstations, and drop-off points.
//!
//! A layout is the physical description of the sorting floor. Robots travel on
//! a grid of unidirectional cells (a cell never allows two opposite headings),
//! pick parcels up at workstations, and release them at drop-off points. The
//! text format is line-oriented: a `rows cols` header followed by one token
//! per cell (`.` void, concatenated heading letters such as `NE`, `W<id>` for
//! a workstation, `D<id>` for a drop-off).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One of the four travel directions on the grid. Row 0 is the north edge, so
/// moving north decreases the row index; moving east increases the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

/// Canonical heading order used everywhere node and arc orderings matter.
pub const HEADING_ORDER: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

impl Heading {
    pub fn opposite(self) -> Heading {
        match self {
            Heading::North => Heading::South,
            Heading::East => Heading::West,
            Heading::South => Heading::North,
            Heading::West => Heading::East,
        }
    }

    pub fn is_perpendicular(self, other: Heading) -> bool {
        self != other && self != other.opposite()
    }

    pub fn letter(self) -> char {
        match self {
            Heading::North => 'N',
            Heading::East => 'E',
            Heading::South => 'S',
            Heading::West => 'W',
        }
    }

    pub fn from_letter(c: char) -> Option<Heading> {
        match c {
            'N' => Some(Heading::North),
            'E' => Some(Heading::East),
            'S' => Some(Heading::South),
            'W' => Some(Heading::West),
            _ => None,
        }
    }

    /// Offset (drow, dcol) of a single step in this direction.
    pub fn step(self) -> (isize, isize) {
        match self {
            Heading::North => (-1, 0),
            Heading::East => (0, 1),
            Heading::South => (1, 0),
            Heading::West => (0, -1),
        }
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Set of headings allowed on one cell, stored as a 4-bit mask in N,E,S,W order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct HeadingSet(u8);

impl HeadingSet {
    pub fn empty() -> Self {
        HeadingSet(0)
    }

    pub fn single(h: Heading) -> Self {
        let mut s = HeadingSet(0);
        s.insert(h);
        s
    }

    pub fn pair(a: Heading, b: Heading) -> Self {
        let mut s = HeadingSet::single(a);
        s.insert(b);
        s
    }

    fn bit(h: Heading) -> u8 {
        match h {
            Heading::North => 1,
            Heading::East => 2,
            Heading::South => 4,
            Heading::West => 8,
        }
    }

    pub fn insert(&mut self, h: Heading) {
        self.0 |= Self::bit(h);
    }

    pub fn contains(&self, h: Heading) -> bool {
        self.0 & Self::bit(h) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Headings in canonical N,E,S,W order.
    pub fn iter(&self) -> impl Iterator<Item = Heading> + '_ {
        HEADING_ORDER.into_iter().filter(|h| self.contains(*h))
    }

    pub fn has_opposite_pair(&self) -> bool {
        (self.contains(Heading::North) && self.contains(Heading::South))
            || (self.contains(Heading::East) && self.contains(Heading::West))
    }
}

impl fmt::Display for HeadingSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for h in self.iter() {
            write!(f, "{}", h.letter())?;
        }
        Ok(())
    }
}

/// Contents of one grid position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellSpec {
    /// Travelable cell with its allowed headings (1 or 2, never opposites).
    Ordinary(HeadingSet),
    /// Loading workstation, 1-based id.
    Workstation(u32),
    /// Drop-off hole, 1-based id. Robots stop on an adjacent cell to release.
    DropOff(u32),
    /// Unused position; robots never enter.
    Void,
}

/// Kinds of layout invariant violations reported by validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    OppositeHeadings,
    EmptyHeadings,
    TooManyHeadings,
    DuplicateWorkstationId,
    DuplicateDropOffId,
    NonContiguousWorkstationIds,
    NonContiguousDropOffIds,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::OppositeHeadings => "opposite headings on one cell",
            ViolationKind::EmptyHeadings => "ordinary cell with no headings",
            ViolationKind::TooManyHeadings => "more than two headings on one cell",
            ViolationKind::DuplicateWorkstationId => "duplicate workstation id",
            ViolationKind::DuplicateDropOffId => "duplicate drop-off id",
            ViolationKind::NonContiguousWorkstationIds => "workstation ids are not 1..n",
            ViolationKind::NonContiguousDropOffIds => "drop-off ids are not 1..n",
        };
        f.write_str(s)
    }
}

/// Element whose required neighbors are missing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementRef {
    Workstation(u32),
    DropOff(u32),
}

impl fmt::Display for ElementRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementRef::Workstation(id) => write!(f, "workstation {id}"),
            ElementRef::DropOff(id) => write!(f, "drop-off {id}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("syntax error at line {line}, col {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("invariant violation at cell ({row},{col}): {kind}")]
    InvariantViolation { kind: ViolationKind, row: usize, col: usize },
    #[error("{element} has no usable neighbor: {msg}")]
    UnreachableElement { element: ElementRef, msg: String },
    #[error("cannot place requested elements: {0}")]
    PlacementInfeasible(String),
}

/// The physical grid: dimensions plus one `CellSpec` per position (row-major).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<CellSpec>,
}

impl Layout {
    pub fn cell(&self, row: usize, col: usize) -> CellSpec {
        self.cells[row * self.cols + col]
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Grid neighbor of `(row, col)` in direction `h`, if inside the grid.
    pub fn neighbor(&self, row: usize, col: usize, h: Heading) -> Option<(usize, usize)> {
        let (dr, dc) = h.step();
        let nr = row as isize + dr;
        let nc = col as isize + dc;
        if nr < 0 || nc < 0 || nr as usize >= self.rows || nc as usize >= self.cols {
            None
        } else {
            Some((nr as usize, nc as usize))
        }
    }

    pub fn workstation_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellSpec::Workstation(_)))
            .count()
    }

    pub fn dropoff_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellSpec::DropOff(_)))
            .count()
    }

    pub fn ordinary_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, CellSpec::Ordinary(_)))
            .count()
    }

    /// Grid position of workstation `id`.
    pub fn workstation_position(&self, id: u32) -> Option<(usize, usize)> {
        self.cells.iter().position(|c| *c == CellSpec::Workstation(id)).map(|i| self.position(i))
    }

    /// Grid position of drop-off `id`.
    pub fn dropoff_position(&self, id: u32) -> Option<(usize, usize)> {
        self.cells.iter().position(|c| *c == CellSpec::DropOff(id)).map(|i| self.position(i))
    }

    /// Ordinary neighbors that can step into `(row, col)`: the neighbor's
    /// heading set must contain the direction pointing at this position.
    pub fn entrance_neighbors(&self, row: usize, col: usize) -> Vec<(usize, usize, Heading)> {
        let mut out = Vec::new();
        for h in HEADING_ORDER {
            // A robot arrives moving in direction h.opposite()..h? The robot
            // enters from the neighbor in direction h, moving h.opposite().
            if let Some((nr, nc)) = self.neighbor(row, col, h) {
                if let CellSpec::Ordinary(set) = self.cell(nr, nc) {
                    let toward = h.opposite();
                    if set.contains(toward) {
                        out.push((nr, nc, toward));
                    }
                }
            }
        }
        out
    }

    /// Ordinary neighbors a robot leaving `(row, col)` may step onto: the move
    /// direction must be in the destination cell's heading set.
    pub fn exit_neighbors(&self, row: usize, col: usize) -> Vec<(usize, usize, Heading)> {
        let mut out = Vec::new();
        for h in HEADING_ORDER {
            if let Some((nr, nc)) = self.neighbor(row, col, h) {
                if let CellSpec::Ordinary(set) = self.cell(nr, nc) {
                    if set.contains(h) {
                        out.push((nr, nc, h));
                    }
                }
            }
        }
        out
    }

    /// Ordinary neighbors of any kind (used for drop-off reachability).
    pub fn ordinary_neighbors(&self, row: usize, col: usize) -> Vec<(usize, usize)> {
        HEADING_ORDER
            .into_iter()
            .filter_map(|h| self.neighbor(row, col, h))
            .filter(|&(r, c)| matches!(self.cell(r, c), CellSpec::Ordinary(_)))
            .collect()
    }

    /// Check all structural invariants. Parsing and generation both funnel
    /// through this before handing a layout out.
    pub fn validate(&self) -> Result<(), LayoutError> {
        let mut w_ids = Vec::new();
        let mut d_ids = Vec::new();
        for idx in 0..self.cells.len() {
            let (row, col) = self.position(idx);
            match self.cells[idx] {
                CellSpec::Ordinary(set) => {
                    if set.is_empty() {
                        return Err(LayoutError::InvariantViolation {
                            kind: ViolationKind::EmptyHeadings,
                            row,
                            col,
                        });
                    }
                    if set.len() > 2 {
                        return Err(LayoutError::InvariantViolation {
                            kind: ViolationKind::TooManyHeadings,
                            row,
                            col,
                        });
                    }
                    if set.has_opposite_pair() {
                        return Err(LayoutError::InvariantViolation {
                            kind: ViolationKind::OppositeHeadings,
                            row,
                            col,
                        });
                    }
                }
                CellSpec::Workstation(id) => {
                    if w_ids.contains(&id) {
                        return Err(LayoutError::InvariantViolation {
                            kind: ViolationKind::DuplicateWorkstationId,
                            row,
                            col,
                        });
                    }
                    w_ids.push(id);
                }
                CellSpec::DropOff(id) => {
                    if d_ids.contains(&id) {
                        return Err(LayoutError::InvariantViolation {
                            kind: ViolationKind::DuplicateDropOffId,
                            row,
                            col,
                        });
                    }
                    d_ids.push(id);
                }
                CellSpec::Void => {}
            }
        }
        w_ids.sort_unstable();
        if !w_ids.iter().enumerate().all(|(i, id)| *id == i as u32 + 1) {
            return Err(LayoutError::InvariantViolation {
                kind: ViolationKind::NonContiguousWorkstationIds,
                row: 0,
                col: 0,
            });
        }
        d_ids.sort_unstable();
        if !d_ids.iter().enumerate().all(|(i, id)| *id == i as u32 + 1) {
            return Err(LayoutError::InvariantViolation {
                kind: ViolationKind::NonContiguousDropOffIds,
                row: 0,
                col: 0,
            });
        }

        // Every workstation needs at least one entrance and one exit neighbor;
        // every drop-off needs an ordinary cell to release from.
        for idx in 0..self.cells.len() {
            let (row, col) = self.position(idx);
            match self.cells[idx] {
                CellSpec::Workstation(id) => {
                    if self.entrance_neighbors(row, col).is_empty() {
                        return Err(LayoutError::UnreachableElement {
                            element: ElementRef::Workstation(id),
                            msg: "no entrance neighbor".into(),
                        });
                    }
                    if self.exit_neighbors(row, col).is_empty() {
                        return Err(LayoutError::UnreachableElement {
                            element: ElementRef::Workstation(id),
                            msg: "no exit neighbor".into(),
                        });
                    }
                }
                CellSpec::DropOff(id) => {
                    if self.ordinary_neighbors(row, col).is_empty() {
                        return Err(LayoutError::UnreachableElement {
                            element: ElementRef::DropOff(id),
                            msg: "no ordinary neighbor to release from".into(),
                        });
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Canonical text form: header line, then one line per row with
    /// space-separated tokens. Headings come out in N,E,S,W order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.rows, self.cols));
        for row in 0..self.rows {
            let mut tokens = Vec::with_capacity(self.cols);
            for col in 0..self.cols {
                tokens.push(match self.cell(row, col) {
                    CellSpec::Ordinary(set) => set.to_string(),
                    CellSpec::Workstation(id) => format!("W{id}"),
                    CellSpec::DropOff(id) => format!("D{id}"),
                    CellSpec::Void => ".".to_string(),
                });
            }
            out.push_str(&tokens.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Parse layout-file contents. Tokens may wrap across lines; positions are
/// assigned row-major in reading order. The returned layout passed
/// [`Layout::validate`].
pub fn parse_layout(text: &str) -> Result<Layout, LayoutError> {
    let mut tokens: Vec<(usize, usize, &str)> = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let mut col = 0usize;
        for (byte_off, tok) in split_with_offsets(line) {
            let _ = col;
            col = byte_off + 1;
            tokens.push((line_no + 1, col, tok));
        }
    }
    if tokens.len() < 2 {
        return Err(LayoutError::Syntax {
            line: 1,
            col: 1,
            msg: "missing `rows cols` header".into(),
        });
    }
    let rows = parse_dim(tokens[0])?;
    let cols = parse_dim(tokens[1])?;
    if rows == 0 || cols == 0 {
        let (line, col, _) = tokens[0];
        return Err(LayoutError::Syntax { line, col, msg: "grid dimensions must be positive".into() });
    }
    let body = &tokens[2..];
    if body.len() != rows * cols {
        let (line, col, _) = *tokens.last().unwrap();
        return Err(LayoutError::Syntax {
            line,
            col,
            msg: format!("expected {} cell tokens, found {}", rows * cols, body.len()),
        });
    }
    let mut cells = Vec::with_capacity(rows * cols);
    for &(line, col, tok) in body {
        cells.push(parse_token(line, col, tok)?);
    }
    let layout = Layout { rows, cols, cells };
    layout.validate()?;
    Ok(layout)
}

fn split_with_offsets(line: &str) -> impl Iterator<Item = (usize, &str)> {
    line.split_whitespace().map(move |tok| {
        let off = tok.as_ptr() as usize - line.as_ptr() as usize;
        (off, tok)
    })
}

fn parse_dim(tok: (usize, usize, &str)) -> Result<usize, LayoutError> {
    let (line, col, s) = tok;
    s.parse::<usize>().map_err(|_| LayoutError::Syntax {
        line,
        col,
        msg: format!("expected integer dimension, found `{s}`"),
    })
}

fn parse_token(line: usize, col: usize, tok: &str) -> Result<CellSpec, LayoutError> {
    if tok == "." {
        return Ok(CellSpec::Void);
    }
    if let Some(rest) = tok.strip_prefix('W') {
        // Bare heading letters never start with a digit, so `W3` is a
        // workstation while `W` alone is the west heading.
        if !rest.is_empty() {
            let id = rest.parse::<u32>().map_err(|_| LayoutError::Syntax {
                line,
                col,
                msg: format!("bad workstation id `{rest}`"),
            })?;
            return Ok(CellSpec::Workstation(id));
        }
    }
    if let Some(rest) = tok.strip_prefix('D') {
        if !rest.is_empty() {
            let id = rest.parse::<u32>().map_err(|_| LayoutError::Syntax {
                line,
                col,
                msg: format!("bad drop-off id `{rest}`"),
            })?;
            return Ok(CellSpec::DropOff(id));
        } else {
            return Err(LayoutError::Syntax { line, col, msg: "bare `D` is not a heading".into() });
        }
    }
    let mut set = HeadingSet::empty();
    for c in tok.chars() {
        match Heading::from_letter(c) {
            Some(h) => {
                if set.contains(h) {
                    return Err(LayoutError::Syntax {
                        line,
                        col,
                        msg: format!("duplicate heading `{c}` in `{tok}`"),
                    });
                }
                set.insert(h);
            }
            None => {
                return Err(LayoutError::Syntax {
                    line,
                    col,
                    msg: format!("unknown token `{tok}`"),
                })
            }
        }
    }
    Ok(CellSpec::Ordinary(set))
}

/// Deterministic test-scenario generator.
///
/// Convention: ordinary cell `(r, c)` allows the row direction (east on even
/// rows, west on odd) and the column direction (north on even columns, south
/// on odd). Workstations sit on the west edge at evenly spaced rows; drop-offs
/// fill an interior lattice starting at `(2, 2)` with step 3, densified to
/// step 2 when the grid is too small for the requested count. The seed picks
/// which lattice slots are used when there are more slots than drop-offs.
pub fn generate_standard_layout(
    rows: usize,
    cols: usize,
    n_workstations: usize,
    n_dropoffs: usize,
    seed: u64,
) -> Result<Layout, LayoutError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if rows < 2 || cols < 2 {
        return Err(LayoutError::PlacementInfeasible(format!(
            "grid {rows}x{cols} too small for a circulating layout"
        )));
    }
    if n_workstations == 0 {
        return Err(LayoutError::PlacementInfeasible("need at least one workstation".into()));
    }
    let mut cells = vec![CellSpec::Void; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let row_dir = if r % 2 == 0 { Heading::East } else { Heading::West };
            let col_dir = if c % 2 == 0 { Heading::North } else { Heading::South };
            cells[r * cols + c] = CellSpec::Ordinary(HeadingSet::pair(row_dir, col_dir));
        }
    }
    let mut layout = Layout { rows, cols, cells };

    // Workstations go on column 0 (northbound), spaced over interior rows so
    // each has a north exit neighbor and a south entrance neighbor.
    if rows < 3 {
        return Err(LayoutError::PlacementInfeasible(
            "need at least 3 rows to place a workstation with entrance and exit".into(),
        ));
    }
    let usable = rows - 2; // rows 1..=rows-2
    if n_workstations > usable {
        return Err(LayoutError::PlacementInfeasible(format!(
            "cannot place {n_workstations} workstations on {usable} interior west-edge rows"
        )));
    }
    let mut w_rows = Vec::with_capacity(n_workstations);
    for i in 0..n_workstations {
        // Even spread over the interior rows.
        let r = 1 + (i * usable) / n_workstations + usable / (2 * n_workstations);
        let r = r.min(rows - 2);
        if w_rows.contains(&r) {
            return Err(LayoutError::PlacementInfeasible(
                "workstation rows collide; grid too small".into(),
            ));
        }
        w_rows.push(r);
    }
    for (i, &r) in w_rows.iter().enumerate() {
        let idx = layout.index(r, 0);
        layout.cells[idx] = CellSpec::Workstation(i as u32 + 1);
    }

    // Candidate drop-off slots: an interior lattice, step 3 first, densified
    // to step 2 when the grid is too small for the requested count.
    let mut slots = lattice_slots(&layout, 3);
    if slots.len() < n_dropoffs {
        slots = lattice_slots(&layout, 2);
    }
    if slots.len() < n_dropoffs {
        return Err(LayoutError::PlacementInfeasible(format!(
            "only {} drop-off slots available for {} drop-offs",
            slots.len(),
            n_dropoffs
        )));
    }

    // The seed picks which slots are used. A choice can sever the one-way
    // circulation, so reject candidates whose flow network is disconnected
    // and redraw, deterministically, a bounded number of times.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = String::new();
    for _ in 0..32 {
        let chosen: Vec<(usize, usize)> = if slots.len() == n_dropoffs {
            slots.clone()
        } else {
            let mut picked: Vec<(usize, usize)> =
                slots.choose_multiple(&mut rng, n_dropoffs).copied().collect();
            picked.sort_unstable();
            picked
        };
        let mut candidate = layout.clone();
        for (i, &(r, c)) in chosen.iter().enumerate() {
            let idx = candidate.index(r, c);
            candidate.cells[idx] = CellSpec::DropOff(i as u32 + 1);
        }
        match validate_circulation(&candidate, n_dropoffs) {
            Ok(()) => return Ok(candidate),
            Err(e) => last_err = e.to_string(),
        }
        if slots.len() == n_dropoffs {
            break; // nothing else to draw
        }
    }
    Err(LayoutError::PlacementInfeasible(format!(
        "no drop-off placement keeps the grid connected: {last_err}"
    )))
}

fn lattice_slots(layout: &Layout, step: usize) -> Vec<(usize, usize)> {
    let mut slots = Vec::new();
    if layout.rows < 5 || layout.cols < 5 {
        // Tiny grids: any interior cell.
        for r in 1..layout.rows.saturating_sub(1) {
            for c in 1..layout.cols.saturating_sub(1) {
                if matches!(layout.cell(r, c), CellSpec::Ordinary(_)) {
                    slots.push((r, c));
                }
            }
        }
        return slots;
    }
    let mut r = 2;
    while r + 2 < layout.rows {
        let mut c = 2;
        while c + 2 < layout.cols {
            if matches!(layout.cell(r, c), CellSpec::Ordinary(_)) {
                slots.push((r, c));
            }
            c += step;
        }
        r += step;
    }
    slots
}

/// Structural validation plus a full routability check: every drop-off must
/// be reachable from the source and able to reach it back.
fn validate_circulation(layout: &Layout, n_dropoffs: usize) -> Result<(), LayoutError> {
    layout.validate()?;
    let demand = super::graph::Demand { per_dropoff: vec![1.0; n_dropoffs] };
    match super::graph::build_flow_network(layout, &demand) {
        Ok(_) => Ok(()),
        Err(super::graph::NetworkError::Layout(e)) => Err(e),
        Err(e) => Err(LayoutError::PlacementInfeasible(e.to_string())),
    }
}
