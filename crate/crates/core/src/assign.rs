//! Constrained cost matrix and the rectangular assignment solver.
//!
//! The solver works in the primal-dual (Kuhn-Munkres) style on a residual
//! graph `source -> rows -> cols -> sink` that contains only feasible cells,
//! so infeasible pairs never enter the dual arithmetic. Successive shortest
//! augmenting paths give a maximum-cardinality matching of minimum cost; a
//! second pass then walks rows in order and rotates zero-cost alternating
//! cycles to reach the lexicographically smallest optimal pair list.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::embed::{similarity_matrix, EmbedError};
use crate::model::{MatchedPair, Observation, TimeTerm, ZoneConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("cost matrix expects {rows}x{cols} cells, got {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("cost at ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("pair ({row}, {col}) is outside a {rows}x{cols} problem")]
    IndexOutOfRange { row: usize, col: usize, rows: usize, cols: usize },
    #[error("cell ({row}, {col}) has no cost breakdown")]
    MissingBreakdown { row: usize, col: usize },
}

/// Components of one feasible cell's cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// Cosine distance.
    pub appearance: f64,
    /// Travel-time term in seconds.
    pub time: f64,
    pub similarity: f64,
}

/// Rectangular pairing costs with an explicit feasibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
    feasible: Vec<bool>,
    breakdown: Vec<Option<CostBreakdown>>,
}

impl CostMatrix {
    /// Builds a matrix from row-major cells, `None` marking infeasible pairs.
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<Option<f64>>) -> Result<Self, AssignError> {
        if cells.len() != rows * cols {
            return Err(AssignError::ShapeMismatch { rows, cols, len: cells.len() });
        }
        let mut cost = Vec::with_capacity(cells.len());
        let mut feasible = Vec::with_capacity(cells.len());
        for (i, cell) in cells.into_iter().enumerate() {
            match cell {
                Some(c) if !c.is_finite() => {
                    return Err(AssignError::NonFiniteCost { row: i / cols, col: i % cols });
                }
                Some(c) => {
                    cost.push(c);
                    feasible.push(true);
                }
                None => {
                    cost.push(0.0);
                    feasible.push(false);
                }
            }
        }
        Ok(CostMatrix { rows, cols, cost, feasible, breakdown: Vec::new() })
    }

    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self, AssignError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(AssignError::ShapeMismatch { rows: rows.len(), cols, len: bad.len() });
        }
        Self::from_cells(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_feasible(&self, row: usize, col: usize) -> bool {
        self.feasible[self.index(row, col)]
    }

    /// Cost of a feasible cell, `None` when infeasible.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        self.feasible[i].then_some(self.cost[i])
    }

    pub fn breakdown(&self, row: usize, col: usize) -> Option<&CostBreakdown> {
        let i = self.index(row, col);
        self.breakdown.get(i).and_then(Option::as_ref)
    }

    pub fn feasible_count(&self) -> usize {
        self.feasible.iter().filter(|&&f| f).count()
    }

    /// Marks a cell infeasible.
    pub fn remove_cell(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.feasible[i] = false;
        if let Some(b) = self.breakdown.get_mut(i) {
            *b = None;
        }
    }

    fn index(&self, row: usize, col: usize) -> usize {
        assert!(row < self.rows && col < self.cols, "cell ({row}, {col}) out of range");
        row * self.cols + col
    }

    /// Objective differences at or below this are treated as ties.
    pub fn tie_tolerance(&self) -> f64 {
        1e-11 * (1.0 + self.max_abs_cost())
    }

    fn max_abs_cost(&self) -> f64 {
        self.cost
            .iter()
            .zip(&self.feasible)
            .filter(|(_, &f)| f)
            .fold(0.0, |acc, (c, _)| acc.max(c.abs()))
    }
}

/// Partial matching between rows and columns, sorted by row.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub objective: f64,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sums costs in row order; the solver and the enumeration oracle share
    /// this so equal matchings produce identical objectives.
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, m: &CostMatrix) -> Assignment {
        pairs.sort_unstable();
        let objective = pairs
            .iter()
            .map(|&(r, c)| m.get(r, c).expect("assignment uses an infeasible cell"))
            .sum();
        Assignment { pairs, objective }
    }
}

/// Pairing costs for every entry/exit combination.
///
/// A cell is feasible when the classes agree, the exit comes strictly after
/// the entry, similarity reaches `tau`, and the exit time falls inside
/// `t_entry + T_a ± delta`. Feasible cells cost
/// `w1 * cosine_distance + w2 * time_term`.
pub fn build_cost_matrix(
    entries: &[Observation],
    exits: &[Observation],
    zone: &ZoneConfig,
) -> Result<CostMatrix, AssignError> {
    let entry_embeddings: Vec<_> = entries.iter().map(|o| o.embedding.clone()).collect();
    let exit_embeddings: Vec<_> = exits.iter().map(|o| o.embedding.clone()).collect();
    let sim = similarity_matrix(&entry_embeddings, &exit_embeddings)?;

    let travel = zone.expected_travel_time();
    let delta = zone.time_window();
    let (rows, cols) = (entries.len(), exits.len());
    let mut cost = vec![0.0; rows * cols];
    let mut feasible = vec![false; rows * cols];
    let mut breakdown = vec![None; rows * cols];

    for (i, a) in entries.iter().enumerate() {
        let (t1, lo, hi) = (a.timestamp, a.timestamp + travel - delta, a.timestamp + travel + delta);
        for (j, b) in exits.iter().enumerate() {
            let t2 = b.timestamp;
            let similarity = sim.get(i, j);
            let ok = a.vehicle_class == b.vehicle_class
                && t1 - t2 < 0.0
                && similarity >= zone.tau()
                && lo <= t2
                && t2 <= hi;
            if !ok {
                continue;
            }
            let appearance = 1.0 - similarity;
            let time = match zone.time_term() {
                TimeTerm::Deviation => ((t2 - t1) - travel).abs(),
                TimeTerm::Literal => (t1 - t2 - travel).abs(),
            };
            let k = i * cols + j;
            cost[k] = zone.w1() * appearance + zone.w2() * time;
            feasible[k] = true;
            breakdown[k] = Some(CostBreakdown { appearance, time, similarity });
        }
    }
    Ok(CostMatrix { rows, cols, cost, feasible, breakdown })
}

/// Maximum-cardinality, minimum-cost matching over feasible cells.
///
/// Among equal-cost optima (within a tolerance scaled to the largest cost)
/// the lexicographically smallest `(row, col)` list wins.
pub fn solve_assignment(m: &CostMatrix) -> Assignment {
    if m.feasible_count() == 0 {
        return Assignment::default();
    }
    let mut solver = Solver::new(m);
    solver.augment_to_maximum();
    solver.refine_lexicographic();
    let pairs = solver
        .row_match
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| (r, c)))
        .collect();
    Assignment::from_pairs(pairs, m)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Node {
    Source,
    Row(usize),
    Col(usize),
    Sink,
}

struct Solver<'a> {
    m: &'a CostMatrix,
    row_match: Vec<Option<usize>>,
    col_match: Vec<Option<usize>>,
    potential: Vec<f64>,
    row_removed: Vec<bool>,
    col_removed: Vec<bool>,
    tolerance: f64,
}

impl<'a> Solver<'a> {
    fn new(m: &'a CostMatrix) -> Self {
        let (rows, cols) = (m.rows, m.cols);
        // Exact shortest distances from the source in the empty-matching graph.
        let mut potential = vec![0.0; rows + cols + 2];
        let mut sink = f64::INFINITY;
        for c in 0..cols {
            let best = (0..rows).filter_map(|r| m.get(r, c)).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                potential[1 + rows + c] = best;
                sink = sink.min(best);
            }
        }
        potential[rows + cols + 1] = if sink.is_finite() { sink } else { 0.0 };
        Solver {
            m,
            row_match: vec![None; rows],
            col_match: vec![None; cols],
            potential,
            row_removed: vec![false; rows],
            col_removed: vec![false; cols],
            tolerance: m.tie_tolerance(),
        }
    }

    fn id(&self, n: Node) -> usize {
        match n {
            Node::Source => 0,
            Node::Row(r) => 1 + r,
            Node::Col(c) => 1 + self.m.rows + c,
            Node::Sink => 1 + self.m.rows + self.m.cols,
        }
    }

    fn node(&self, id: usize) -> Node {
        let (rows, cols) = (self.m.rows, self.m.cols);
        match id {
            0 => Node::Source,
            i if i <= rows => Node::Row(i - 1),
            i if i <= rows + cols => Node::Col(i - 1 - rows),
            _ => Node::Sink,
        }
    }

    fn node_count(&self) -> usize {
        self.m.rows + self.m.cols + 2
    }

    fn cost(&self, r: usize, c: usize) -> f64 {
        self.m.cost[r * self.m.cols + c]
    }

    fn reduced(&self, u: Node, v: Node, w: f64) -> f64 {
        (w + self.potential[self.id(u)] - self.potential[self.id(v)]).max(0.0)
    }

    /// Residual edges leaving `u`, as `(target, true cost)`.
    fn for_each_out(&self, u: Node, mut f: impl FnMut(Node, f64)) {
        match u {
            Node::Source => {
                for r in 0..self.m.rows {
                    if !self.row_removed[r] && self.row_match[r].is_none() {
                        f(Node::Row(r), 0.0);
                    }
                }
            }
            Node::Row(r) => {
                if self.row_match[r].is_some() {
                    f(Node::Source, 0.0);
                }
                for c in 0..self.m.cols {
                    if !self.col_removed[c] && self.m.is_feasible(r, c) && self.row_match[r] != Some(c) {
                        f(Node::Col(c), self.cost(r, c));
                    }
                }
            }
            Node::Col(c) => match self.col_match[c] {
                Some(r) => f(Node::Row(r), -self.cost(r, c)),
                None => f(Node::Sink, 0.0),
            },
            Node::Sink => {
                for c in 0..self.m.cols {
                    if !self.col_removed[c] && self.col_match[c].is_some() {
                        f(Node::Col(c), 0.0);
                    }
                }
            }
        }
    }

    /// Residual edges entering `v`, as `(origin, true cost)`.
    fn for_each_in(&self, v: Node, mut f: impl FnMut(Node, f64)) {
        match v {
            Node::Source => {
                for r in 0..self.m.rows {
                    if !self.row_removed[r] && self.row_match[r].is_some() {
                        f(Node::Row(r), 0.0);
                    }
                }
            }
            Node::Row(r) => match self.row_match[r] {
                Some(c) => f(Node::Col(c), -self.cost(r, c)),
                None => f(Node::Source, 0.0),
            },
            Node::Col(c) => {
                if self.col_match[c].is_some() {
                    f(Node::Sink, 0.0);
                }
                for r in 0..self.m.rows {
                    if !self.row_removed[r] && self.m.is_feasible(r, c) && self.col_match[c] != Some(r) {
                        f(Node::Row(r), self.cost(r, c));
                    }
                }
            }
            Node::Sink => {
                for c in 0..self.m.cols {
                    if !self.col_removed[c] && self.col_match[c].is_none() {
                        f(Node::Col(c), 0.0);
                    }
                }
            }
        }
    }

    fn is_removed(&self, n: Node) -> bool {
        match n {
            Node::Row(r) => self.row_removed[r],
            Node::Col(c) => self.col_removed[c],
            _ => false,
        }
    }

    /// Dense Dijkstra over reduced costs. With `reverse`, distances are *to*
    /// `root` and `link[x]` is the next hop toward it; otherwise distances are
    /// from `root` and `link[x]` is the predecessor.
    fn dijkstra(&self, root: Node, reverse: bool) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = self.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut link = vec![None; n];
        let mut done = vec![false; n];
        dist[self.id(root)] = 0.0;
        loop {
            let mut best: Option<usize> = None;
            for i in 0..n {
                if !done[i] && dist[i].is_finite() && best.is_none_or(|b| dist[i] < dist[b]) {
                    best = Some(i);
                }
            }
            let Some(u) = best else { break };
            done[u] = true;
            let un = self.node(u);
            let mut relax = |v: Node, red: f64| {
                let vi = self.id(v);
                if !done[vi] && !self.is_removed(v) && dist[u] + red < dist[vi] {
                    dist[vi] = dist[u] + red;
                    link[vi] = Some(u);
                }
            };
            if reverse {
                self.for_each_in(un, |v, w| relax(v, self.reduced(v, un, w)));
            } else {
                self.for_each_out(un, |v, w| relax(v, self.reduced(un, v, w)));
            }
        }
        (dist, link)
    }

    /// Flips matched/unmatched state along a sequence of residual edges.
    fn apply_edges(&mut self, edges: &[(Node, Node)]) {
        for &(u, v) in edges {
            if let (Node::Col(c), Node::Row(r)) = (u, v) {
                debug_assert_eq!(self.row_match[r], Some(c));
                self.row_match[r] = None;
                self.col_match[c] = None;
            }
        }
        for &(u, v) in edges {
            if let (Node::Row(r), Node::Col(c)) = (u, v) {
                self.row_match[r] = Some(c);
                self.col_match[c] = Some(r);
            }
        }
    }

    fn augment_to_maximum(&mut self) {
        let sink = self.id(Node::Sink);
        loop {
            let (dist, prev) = self.dijkstra(Node::Source, false);
            let reach = dist[sink];
            if !reach.is_finite() {
                break;
            }
            let mut edges = Vec::new();
            let mut v = sink;
            while let Some(u) = prev[v] {
                edges.push((self.node(u), self.node(v)));
                v = u;
            }
            self.apply_edges(&edges);
            // Capping at the sink distance keeps every reduced cost non-negative,
            // including on edges out of nodes the search never reached.
            for (p, d) in self.potential.iter_mut().zip(&dist) {
                *p += d.min(reach);
            }
        }
    }

    fn refine_lexicographic(&mut self) {
        for r in 0..self.m.rows {
            let (dist_to, next) = self.dijkstra(Node::Row(r), true);
            let mut fixed = None;
            for c in 0..self.m.cols {
                if self.col_removed[c] || !self.m.is_feasible(r, c) {
                    continue;
                }
                if self.row_match[r] == Some(c) {
                    fixed = Some(c);
                    break;
                }
                let back = dist_to[self.id(Node::Col(c))];
                if !back.is_finite() {
                    continue;
                }
                let gain = self.reduced(Node::Row(r), Node::Col(c), self.cost(r, c)) + back;
                if gain <= self.tolerance {
                    let mut edges = vec![(Node::Row(r), Node::Col(c))];
                    let mut u = self.id(Node::Col(c));
                    while let Some(v) = next[u] {
                        edges.push((self.node(u), self.node(v)));
                        u = v;
                    }
                    self.apply_edges(&edges);
                    fixed = Some(c);
                    break;
                }
            }
            self.row_removed[r] = true;
            if let Some(c) = fixed {
                self.col_removed[c] = true;
            }
        }
    }
}

/// Converts solver output to matched pairs, ordered by entry time then track.
pub fn extract_matches(
    a: &Assignment,
    m: &CostMatrix,
    entries: &[Observation],
    exits: &[Observation],
) -> Result<Vec<MatchedPair>, AssignError> {
    if m.rows != entries.len() || m.cols != exits.len() {
        return Err(AssignError::IndexOutOfRange {
            row: entries.len(),
            col: exits.len(),
            rows: m.rows,
            cols: m.cols,
        });
    }
    let mut out = Vec::with_capacity(a.pairs.len());
    for &(row, col) in &a.pairs {
        if row >= m.rows || col >= m.cols {
            return Err(AssignError::IndexOutOfRange { row, col, rows: m.rows, cols: m.cols });
        }
        let (Some(total), Some(b)) = (m.get(row, col), m.breakdown(row, col)) else {
            return Err(AssignError::MissingBreakdown { row, col });
        };
        out.push((
            row,
            MatchedPair {
                entry_track: entries[row].track_id.clone(),
                exit_track: exits[col].track_id.clone(),
                total_cost: total,
                appearance_cost: b.appearance,
                time_cost: b.time,
                similarity: b.similarity,
            },
        ));
    }
    out.sort_by(|(ra, pa), (rb, pb)| {
        entries[*ra]
            .timestamp
            .total_cmp(&entries[*rb].timestamp)
            .then_with(|| pa.entry_track.cmp(&pb.entry_track))
    });
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

fn canonical_order(obs: &[Observation]) -> Vec<&Observation> {
    let mut sorted: Vec<&Observation> = obs.iter().collect();
    sorted.sort_by(|a, b| canonical_cmp(a, b));
    sorted
}

fn canonical_cmp(a: &Observation, b: &Observation) -> Ordering {
    a.timestamp
        .total_cmp(&b.timestamp)
        .then_with(|| a.camera_id.cmp(&b.camera_id))
        .then_with(|| a.track_id.cmp(&b.track_id))
}

/// Matches a whole zone by sliding time windows.
///
/// Entries are bucketed into windows of width `2 * delta` stepped by `delta`
/// (anchored at the earliest entry). Each window is solved against the exits
/// that can be feasible for it; windows run in ascending order and tracks
/// matched in one window are dropped from later ones. Inputs are put in a
/// canonical order first, so the result does not depend on input order.
pub fn match_zone(
    entries: &[Observation],
    exits: &[Observation],
    zone: &ZoneConfig,
) -> Result<Vec<MatchedPair>, AssignError> {
    if entries.is_empty() || exits.is_empty() {
        return Ok(Vec::new());
    }
    let entries = canonical_order(entries);
    let exits = canonical_order(exits);
    let travel = zone.expected_travel_time();
    let delta = zone.time_window();
    let t0 = entries[0].timestamp;

    // Entry i lives in windows bucket(i) - 1 and bucket(i).
    let mut windows: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let bucket = ((e.timestamp - t0) / delta).floor() as i64;
        windows.entry(bucket - 1).or_default().push(i);
        windows.entry(bucket).or_default().push(i);
    }

    let mut entry_used = vec![false; entries.len()];
    let mut exit_used = vec![false; exits.len()];
    let mut matches = Vec::new();

    for members in windows.values() {
        let rows: Vec<usize> = members.iter().copied().filter(|&i| !entry_used[i]).collect();
        if rows.is_empty() {
            continue;
        }
        let first = entries[rows[0]].timestamp;
        let last = entries[*rows.last().unwrap()].timestamp;
        let (lo, hi) = (first + travel - delta, last + travel + delta);
        let start = exits.partition_point(|x| x.timestamp < lo);
        let cols: Vec<usize> = (start..exits.len())
            .take_while(|&j| exits[j].timestamp <= hi)
            .filter(|&j| !exit_used[j])
            .collect();
        if cols.is_empty() {
            continue;
        }

        let window_entries: Vec<Observation> = rows.iter().map(|&i| entries[i].clone()).collect();
        let window_exits: Vec<Observation> = cols.iter().map(|&j| exits[j].clone()).collect();
        let m = build_cost_matrix(&window_entries, &window_exits, zone)?;
        let a = solve_assignment(&m);
        for &(r, c) in &a.pairs {
            entry_used[rows[r]] = true;
            exit_used[cols[c]] = true;
        }
        matches.extend(extract_matches(&a, &m, &window_entries, &window_exits)?);
    }

    let entry_time: HashMap<&str, f64> =
        entries.iter().map(|e| (e.track_id.as_str(), e.timestamp)).collect();
    matches.sort_by(|a, b| {
        entry_time[a.entry_track.as_str()]
            .total_cmp(&entry_time[b.entry_track.as_str()])
            .then_with(|| a.entry_track.cmp(&b.entry_track))
    });
    Ok(matches)
}
