//! Time-varying communication topologies and the mixing matrices built from them.
//!
//! Neighbor sets always contain the node itself, so degrees count the self-loop:
//! an isolated node has degree 1. Self-loops are never stored in edge lists.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use thiserror::Error;

pub type Edge = (usize, usize);

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("schedule needs at least one node")]
    NoNodes,
    #[error("schedule needs at least one round")]
    EmptySchedule,
    #[error("connectivity window must be positive")]
    ZeroWindow,
    #[error("edge ({0}, {1}) has an endpoint outside [0, {2})")]
    EndpointOutOfRange(usize, usize, usize),
    #[error("self-loop on node {0} must not be stored explicitly")]
    SelfLoop(usize),
    #[error("schedule line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("window product M({t})..M({s}) is undefined for t < s - 1")]
    BadWindow { t: usize, s: usize },
    #[error("window product needs matrices up to index {needed}, only {available} given")]
    MissingMatrix { needed: usize, available: usize },
    #[error("window product over an empty matrix sequence")]
    NoMatrices,
}

/// Periodic sequence of edge sets `E(0), .., E(P-1)`; round `t` uses `E(t mod P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologySchedule {
    n: usize,
    rounds: Vec<Vec<Edge>>,
    directed: bool,
    window: usize,
}

impl TopologySchedule {
    /// Builds a schedule. Undirected edges are normalized to `(min, max)`;
    /// duplicates are dropped.
    pub fn new(
        n: usize,
        rounds: Vec<Vec<Edge>>,
        directed: bool,
        window: usize,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::NoNodes);
        }
        if rounds.is_empty() {
            return Err(GraphError::EmptySchedule);
        }
        if window == 0 {
            return Err(GraphError::ZeroWindow);
        }
        let mut normalized = Vec::with_capacity(rounds.len());
        for edges in rounds {
            let mut seen = BTreeSet::new();
            let mut out = Vec::with_capacity(edges.len());
            for (a, b) in edges {
                if a >= n || b >= n {
                    return Err(GraphError::EndpointOutOfRange(a, b, n));
                }
                if a == b {
                    return Err(GraphError::SelfLoop(a));
                }
                let e = if directed { (a, b) } else { (a.min(b), a.max(b)) };
                if seen.insert(e) {
                    out.push(e);
                }
            }
            normalized.push(out);
        }
        Ok(Self {
            n,
            rounds: normalized,
            directed,
            window,
        })
    }

    /// Seven nodes, period four, 4-strongly connected. Round `k` carries the ring
    /// edges `i -> i+1` for `i = k (mod 4)` plus the chord `k -> k+3`.
    pub fn default_directed() -> Self {
        let n = 7;
        let rounds = (0..4)
            .map(|k| {
                let mut edges: Vec<Edge> = (0..n)
                    .filter(|i| i % 4 == k)
                    .map(|i| (i, (i + 1) % n))
                    .collect();
                edges.push((k, (k + 3) % n));
                edges
            })
            .collect();
        Self::new(n, rounds, true, 4).expect("default schedule is well formed")
    }

    /// Same schedule with edge directions deleted.
    pub fn undirected(&self) -> Self {
        Self::new(self.n, self.rounds.clone(), false, self.window)
            .expect("dropping directions keeps a valid schedule")
    }

    /// Static complete graph (one round).
    pub fn complete(n: usize, directed: bool) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j && (directed || i < j) {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, vec![edges], directed, 1)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn period(&self) -> usize {
        self.rounds.len()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn rounds(&self) -> &[Vec<Edge>] {
        &self.rounds
    }

    /// Edge set active at round `t`.
    pub fn graph_at(&self, t: usize) -> &[Edge] {
        &self.rounds[t % self.rounds.len()]
    }

    /// True iff the union of every `B` consecutive rounds (cyclically) is
    /// strongly connected (directed) or connected (undirected).
    pub fn check_window_connectivity(&self) -> bool {
        let p = self.period();
        (0..p).all(|start| {
            let union: Vec<Edge> = (start..start + self.window)
                .flat_map(|t| self.graph_at(t).iter().copied())
                .collect();
            is_connected(self.n, &union, self.directed)
        })
    }

    /// True iff every individual round is (strongly) connected.
    pub fn rounds_individually_connected(&self) -> bool {
        self.rounds
            .iter()
            .all(|edges| is_connected(self.n, edges, self.directed))
    }

    /// Plain-text form: a header line followed by one line per round.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "n={} P={} B={} directed={}",
            self.n,
            self.period(),
            self.window,
            u8::from(self.directed)
        );
        let sep = if self.directed { "->" } else { "-" };
        for edges in &self.rounds {
            let line: Vec<String> = edges.iter().map(|(a, b)| format!("{a}{sep}{b}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(GraphError::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let (mut n, mut p, mut b, mut directed) = (None, None, None, None);
        for tok in header.split_whitespace() {
            let (key, val) = tok.split_once('=').ok_or_else(|| GraphError::Parse {
                line: 1,
                msg: format!("header token {tok:?} is not key=value"),
            })?;
            let num: usize = val.parse().map_err(|_| GraphError::Parse {
                line: 1,
                msg: format!("header value {val:?} is not an integer"),
            })?;
            match key {
                "n" => n = Some(num),
                "P" => p = Some(num),
                "B" => b = Some(num),
                "directed" => match num {
                    0 => directed = Some(false),
                    1 => directed = Some(true),
                    _ => {
                        return Err(GraphError::Parse {
                            line: 1,
                            msg: "directed must be 0 or 1".into(),
                        })
                    }
                },
                _ => {
                    return Err(GraphError::Parse {
                        line: 1,
                        msg: format!("unknown header key {key:?}"),
                    })
                }
            }
        }
        let missing = |k: &str| GraphError::Parse {
            line: 1,
            msg: format!("header is missing {k}"),
        };
        let n = n.ok_or_else(|| missing("n"))?;
        let p = p.ok_or_else(|| missing("P"))?;
        let b = b.ok_or_else(|| missing("B"))?;
        let directed = directed.ok_or_else(|| missing("directed"))?;
        let sep = if directed { "->" } else { "-" };

        let mut rounds = Vec::with_capacity(p);
        for r in 0..p {
            let lineno = r + 2;
            let line = lines.next().ok_or(GraphError::Parse {
                line: lineno,
                msg: format!("expected {p} round lines"),
            })?;
            let mut edges = Vec::new();
            for tok in line.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let (a, b) = tok.split_once(sep).ok_or_else(|| GraphError::Parse {
                    line: lineno,
                    msg: format!("edge token {tok:?} lacks {sep:?}"),
                })?;
                let parse = |s: &str| {
                    s.trim().parse::<usize>().map_err(|_| GraphError::Parse {
                        line: lineno,
                        msg: format!("bad node index in {tok:?}"),
                    })
                };
                edges.push((parse(a)?, parse(b)?));
            }
            rounds.push(edges);
        }
        for (extra, line) in lines.enumerate() {
            if !line.trim().is_empty() {
                return Err(GraphError::Parse {
                    line: p + 2 + extra,
                    msg: "content after the last round".into(),
                });
            }
        }
        Self::new(n, rounds, directed, b)
    }
}

fn is_connected(n: usize, edges: &[Edge], directed: bool) -> bool {
    let reach = |forward: bool| {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if directed {
                if forward {
                    adj[a].push(b);
                } else {
                    adj[b].push(a);
                }
            } else {
                adj[a].push(b);
                adj[b].push(a);
            }
        }
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && (!directed || reach(false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StochasticKind {
    RowStochastic,
    ColumnStochastic,
}

/// Per-round mixing weights. `phi` is the smallest positive entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    kind: StochasticKind,
    phi: f64,
}

impl MixingMatrix {
    fn from_entries(entries: DMatrix<f64>, kind: StochasticKind) -> Self {
        let phi = entries
            .iter()
            .copied()
            .filter(|&v| v > 0.0)
            .fold(f64::INFINITY, f64::min);
        Self { entries, kind, phi }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> StochasticKind {
        self.kind
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    /// Largest deviation of the relevant line sums from one.
    pub fn stochastic_defect(&self) -> f64 {
        let n = self.n();
        (0..n)
            .map(|k| {
                let s: f64 = match self.kind {
                    StochasticKind::RowStochastic => self.entries.row(k).sum(),
                    StochasticKind::ColumnStochastic => self.entries.column(k).sum(),
                };
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn self_inclusive_degrees(edges: &[Edge], n: usize) -> Vec<usize> {
    let mut deg = vec![1usize; n];
    for &(a, b) in edges {
        deg[a] += 1;
        deg[b] += 1;
    }
    deg
}

/// `W_ij = 1/deg_i` on the closed neighborhood of `i`.
pub fn uniform_row_weights(edges: &[Edge], n: usize) -> MixingMatrix {
    let deg = self_inclusive_degrees(edges, n);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        w[(i, i)] = 1.0 / deg[i] as f64;
    }
    for &(a, b) in edges {
        w[(a, b)] = 1.0 / deg[a] as f64;
        w[(b, a)] = 1.0 / deg[b] as f64;
    }
    MixingMatrix::from_entries(w, StochasticKind::RowStochastic)
}

/// Symmetric, doubly stochastic Metropolis weights.
pub fn metropolis_row_weights(edges: &[Edge], n: usize) -> MixingMatrix {
    let deg = self_inclusive_degrees(edges, n);
    let mut w = DMatrix::zeros(n, n);
    for &(a, b) in edges {
        let v = 1.0 / (1 + deg[a].max(deg[b])) as f64;
        w[(a, b)] = v;
        w[(b, a)] = v;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    MixingMatrix::from_entries(w, StochasticKind::RowStochastic)
}

/// Push-sum weights: `A_ij = 1/deg_j^out` when `j` is an in-neighbor of `i`
/// (including `j = i`).
pub fn pushsum_column_weights(edges: &[Edge], n: usize) -> MixingMatrix {
    let mut out_deg = vec![1usize; n];
    for &(from, _) in edges {
        out_deg[from] += 1;
    }
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(j, j)] = 1.0 / out_deg[j] as f64;
    }
    for &(from, to) in edges {
        a[(to, from)] = 1.0 / out_deg[from] as f64;
    }
    MixingMatrix::from_entries(a, StochasticKind::ColumnStochastic)
}

/// `M(t) M(t-1) .. M(s)`, where `matrices[k]` is `M(k)`. The empty product
/// (`s = t + 1`) is the identity.
pub fn window_product(
    matrices: &[DMatrix<f64>],
    t: usize,
    s: usize,
) -> Result<DMatrix<f64>, GraphError> {
    let first = matrices.first().ok_or(GraphError::NoMatrices)?;
    if s > t + 1 {
        return Err(GraphError::BadWindow { t, s });
    }
    let n = first.nrows();
    if s == t + 1 {
        return Ok(DMatrix::identity(n, n));
    }
    if t >= matrices.len() {
        return Err(GraphError::MissingMatrix {
            needed: t,
            available: matrices.len(),
        });
    }
    let mut acc = matrices[s].clone();
    for m in &matrices[s + 1..=t] {
        acc = m * acc;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sched(p: usize) -> TopologySchedule {
        let rounds = (0..p).map(|k| vec![(k % 3, (k % 3) + 1)]).collect();
        TopologySchedule::new(4, rounds, true, 1).unwrap()
    }

    #[test]
    fn graph_at_is_periodic() {
        let s = sched(4);
        assert_eq!(s.graph_at(5), s.rounds()[1].as_slice());
        let s1 = sched(1);
        assert_eq!(s1.graph_at(999), s1.rounds()[0].as_slice());
        let d = TopologySchedule::default_directed();
        assert_eq!(d.graph_at(0), &[(0, 1), (4, 5), (0, 3)]);
    }

    #[test]
    fn rejects_bad_edges() {
        assert_eq!(
            TopologySchedule::new(3, vec![vec![(0, 3)]], true, 1),
            Err(GraphError::EndpointOutOfRange(0, 3, 3))
        );
        assert_eq!(
            TopologySchedule::new(3, vec![vec![(1, 1)]], false, 1),
            Err(GraphError::SelfLoop(1))
        );
    }

    #[test]
    fn window_connectivity() {
        assert!(TopologySchedule::complete(5, true).unwrap().check_window_connectivity());
        assert!(TopologySchedule::complete(5, false).unwrap().check_window_connectivity());
        let empty = TopologySchedule::new(4, vec![vec![]; 4], true, 4).unwrap();
        assert!(!empty.check_window_connectivity());
        let d = TopologySchedule::default_directed();
        assert_eq!((d.n(), d.period(), d.window()), (7, 4, 4));
        assert!(d.check_window_connectivity());
        // B = 3 leaves out one round's ring edges
        let short = TopologySchedule::new(7, d.rounds().to_vec(), true, 3).unwrap();
        assert!(!short.check_window_connectivity());
        assert!(!d.rounds_individually_connected());
        assert!(d.undirected().check_window_connectivity());
    }

    #[test]
    fn directed_connectivity_needs_both_directions() {
        let path = TopologySchedule::new(3, vec![vec![(0, 1), (1, 2)]], true, 1).unwrap();
        assert!(!path.check_window_connectivity());
        assert!(path.undirected().check_window_connectivity());
    }

    #[test]
    fn uniform_weights_examples() {
        let iso = uniform_row_weights(&[], 3);
        assert_eq!(iso.entries(), &DMatrix::identity(3, 3));
        let path = uniform_row_weights(&[(0, 1)], 2);
        assert!(path.entries().iter().all(|&v| v == 0.5));
        let star = uniform_row_weights(&[(0, 1), (0, 2), (0, 3)], 4);
        for j in 0..4 {
            assert_eq!(star.entries()[(0, j)], 0.25);
        }
        for k in 1..4 {
            assert_eq!(star.entries()[(k, k)], 0.5);
            assert_eq!(star.entries()[(k, 0)], 0.5);
            assert_eq!(star.entries().row(k).sum(), 1.0);
        }
        assert_eq!(star.phi(), 0.25);
    }

    #[test]
    fn metropolis_examples() {
        let path = metropolis_row_weights(&[(0, 1)], 2);
        assert_abs_diff_eq!(path.entries()[(0, 1)], 1.0 / 3.0);
        assert_abs_diff_eq!(path.entries()[(0, 0)], 2.0 / 3.0);
        let iso = metropolis_row_weights(&[], 2);
        assert_eq!(iso.entries(), &DMatrix::identity(2, 2));
        let k3 = metropolis_row_weights(&[(0, 1), (0, 2), (1, 2)], 3);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.5 } else { 0.25 };
                assert_abs_diff_eq!(k3.entries()[(i, j)], want);
            }
        }
    }

    #[test]
    fn pushsum_examples() {
        assert_eq!(pushsum_column_weights(&[], 3).entries(), &DMatrix::identity(3, 3));
        let one = pushsum_column_weights(&[(0, 1)], 2);
        assert_eq!(one.entries()[(0, 0)], 0.5);
        assert_eq!(one.entries()[(1, 0)], 0.5);
        assert_eq!(one.entries()[(0, 1)], 0.0);
        assert_eq!(one.entries()[(1, 1)], 1.0);
        let cyc = pushsum_column_weights(&[(0, 1), (1, 2), (2, 0)], 3);
        for j in 0..3 {
            assert_eq!(cyc.entries()[(j, j)], 0.5);
            assert_eq!(cyc.entries()[((j + 1) % 3, j)], 0.5);
        }
        assert_eq!(cyc.kind(), StochasticKind::ColumnStochastic);
    }

    #[test]
    fn window_product_examples() {
        let w = metropolis_row_weights(&[(0, 1), (1, 2)], 3).entries().clone();
        let ms = vec![w.clone(); 6];
        assert_eq!(window_product(&ms, 4, 5).unwrap(), DMatrix::identity(3, 3));
        assert_eq!(window_product(&ms, 1, 0).unwrap(), &w * &w);
        assert_eq!(
            window_product(&ms, 2, 4),
            Err(GraphError::BadWindow { t: 2, s: 4 })
        );
    }

    #[test]
    fn text_round_trip() {
        let d = TopologySchedule::default_directed();
        let text = d.to_text();
        assert!(text.starts_with("n=7 P=4 B=4 directed=1\n0->1,4->5,0->3\n"));
        assert_eq!(TopologySchedule::from_text(&text).unwrap(), d);
        let u = TopologySchedule::new(3, vec![vec![(0, 1)], vec![]], false, 2).unwrap();
        assert_eq!(TopologySchedule::from_text(&u.to_text()).unwrap(), u);
        assert!(matches!(
            TopologySchedule::from_text("n=3 P=1 B=1 directed=1\n0-1\n"),
            Err(GraphError::Parse { line: 2, .. })
        ));
    }

    fn random_edges(n: usize, mask: &[bool]) -> Vec<Edge> {
        let mut edges = Vec::new();
        let mut k = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    if mask[k % mask.len()] {
                        edges.push((i, j));
                    }
                    k += 1;
                }
            }
        }
        edges
    }

    proptest! {
        #[test]
        fn generated_matrices_are_stochastic(n in 1usize..8, mask in prop::collection::vec(any::<bool>(), 1..64)) {
            let directed = random_edges(n, &mask);
            let undirected: Vec<Edge> = directed.iter().filter(|(a, b)| a < b).copied().collect();
            let u = uniform_row_weights(&undirected, n);
            let m = metropolis_row_weights(&undirected, n);
            let a = pushsum_column_weights(&directed, n);
            prop_assert!(u.stochastic_defect() <= 1e-12);
            prop_assert!(m.stochastic_defect() <= 1e-12);
            prop_assert!(a.stochastic_defect() <= 1e-12);
            prop_assert_eq!(m.entries(), &m.entries().transpose());
            for i in 0..n {
                prop_assert!(u.entries()[(i, i)] >= u.phi());
                prop_assert!(m.entries()[(i, i)] >= m.phi());
            }
            // products keep their kind
            let rows = vec![u.entries().clone(), m.entries().clone(), u.entries().clone()];
            let p = window_product(&rows, 2, 0).unwrap();
            for i in 0..n {
                prop_assert!((p.row(i).sum() - 1.0).abs() <= 1e-10);
            }
            let cols = vec![a.entries().clone(); 3];
            let q = window_product(&cols, 2, 0).unwrap();
            for j in 0..n {
                prop_assert!((q.column(j).sum() - 1.0).abs() <= 1e-10);
            }
        }
    }
}
