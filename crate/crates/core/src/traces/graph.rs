//! Weighted undirected graphs, random graph families, shortest-path and
//! spanning-tree traces, and the reference algorithms used to check them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::MaskVector;
use crate::numeral::Token;

use super::arithmetic::ArithOp;
use super::sorting::masked_min;
use super::{LabeledStep, Subroutine, TraceError, TraceStep};

const MAX_WEIGHT: u64 = 255;

/// Undirected graph with edge weights in `[1, 255]`; edges are stored once
/// with `u < v`, sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightedGraph {
    nodes: usize,
    edges: Vec<(usize, usize, u64)>,
}

impl WeightedGraph {
    pub fn new(nodes: usize, edges: impl IntoIterator<Item = (usize, usize, u64)>) -> Result<Self, TraceError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (a, b, w) in edges {
            let (u, v) = (a.min(b), a.max(b));
            if u == v {
                return Err(TraceError::InvalidParams(format!("self-loop at {u}")));
            }
            if v >= nodes {
                return Err(TraceError::InvalidParams(format!("node {v} out of range")));
            }
            if !(1..=MAX_WEIGHT).contains(&w) {
                return Err(TraceError::InvalidParams(format!("weight {w} outside [1, 255]")));
            }
            if !seen.insert((u, v)) {
                return Err(TraceError::InvalidParams(format!("duplicate edge {u}-{v}")));
            }
            out.push((u, v, w));
        }
        out.sort_unstable();
        Ok(Self { nodes, edges: out })
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize, u64)] {
        &self.edges
    }

    /// Neighbours of `u` with edge weights, by ascending node id.
    pub fn neighbors(&self, u: usize) -> Vec<(usize, u64)> {
        let mut out: Vec<(usize, u64)> = self
            .edges
            .iter()
            .filter_map(|&(a, b, w)| match () {
                _ if a == u => Some((b, w)),
                _ if b == u => Some((a, w)),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<u64> {
        let (u, v) = (a.min(b), a.max(b));
        self.edges.iter().find(|&&(x, y, _)| x == u && y == v).map(|e| e.2)
    }

    /// Nodes reachable from `source`, ascending.
    pub fn component_of(&self, source: usize) -> Vec<usize> {
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![source];
        seen[source] = true;
        while let Some(u) = stack.pop() {
            for (v, _) in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        (0..self.nodes).filter(|&v| seen[v]).collect()
    }

    pub fn is_connected(&self) -> bool {
        self.nodes == 0 || self.component_of(0).len() == self.nodes
    }

    /// Subgraph on `keep` (ascending), relabelled `0..keep.len()`.
    pub fn induced(&self, keep: &[usize]) -> WeightedGraph {
        let index = |x: usize| keep.binary_search(&x).ok();
        let edges = self
            .edges
            .iter()
            .filter_map(|&(u, v, w)| Some((index(u)?, index(v)?, w)))
            .collect();
        WeightedGraph { nodes: keep.len(), edges }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GraphFamily {
    /// Each pair joined with probability `p`.
    ErdosRenyi { p: f64 },
    /// Ring lattice to the `k` nearest neighbours plus shortcuts added
    /// with probability `p` per lattice edge.
    NewmanWattsStrogatz { k: usize, p: f64 },
    /// Uniform random `d`-regular graph.
    Regular { d: usize },
    /// Preferential attachment, `m` edges per new node.
    BarabasiAlbert { m: usize },
}

impl GraphFamily {
    fn validate(&self, n: usize) -> Result<(), TraceError> {
        let bad = |s: String| Err(TraceError::InvalidParams(s));
        match *self {
            GraphFamily::ErdosRenyi { p } if !(0.0..=1.0).contains(&p) => bad(format!("p = {p}")),
            GraphFamily::NewmanWattsStrogatz { k, p } => {
                if !(0.0..=1.0).contains(&p) {
                    bad(format!("p = {p}"))
                } else if !(2..=5).contains(&k) || k >= n {
                    bad(format!("k = {k} with n = {n}"))
                } else {
                    Ok(())
                }
            }
            GraphFamily::Regular { d } => {
                if d < 2 || d >= n {
                    bad(format!("d = {d} with n = {n}"))
                } else if n * d % 2 == 1 {
                    bad(format!("n * d = {} is odd", n * d))
                } else {
                    Ok(())
                }
            }
            GraphFamily::BarabasiAlbert { m } if !(2..=5).contains(&m) || m >= n => {
                bad(format!("m = {m} with n = {n}"))
            }
            _ => Ok(()),
        }
    }
}

/// How edge weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// All weights within `spread` of a common base.
    Close { spread: u64 },
}

pub fn gen_graph(family: &GraphFamily, n: usize, seed: u64) -> Result<WeightedGraph, TraceError> {
    gen_graph_with(family, n, WeightMode::Uniform, seed)
}

/// Random graph from `family`. Weights are redrawn with a cap shrinking by a
/// quarter until no relaxation `dist[u] + w(u, v)` from node 0 exceeds 255.
pub fn gen_graph_with(
    family: &GraphFamily,
    n: usize,
    weights: WeightMode,
    seed: u64,
) -> Result<WeightedGraph, TraceError> {
    if n == 0 {
        return Err(TraceError::InvalidParams("empty graph".into()));
    }
    family.validate(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = structure(family, n, &mut rng)?;
    let mut cap = MAX_WEIGHT;
    loop {
        let draw: Vec<u64> = match weights {
            WeightMode::Uniform => pairs.iter().map(|_| rng.gen_range(1..=cap)).collect(),
            WeightMode::Close { spread } => {
                let spread = spread.min(cap - 1);
                let base = rng.gen_range(1..=cap - spread);
                pairs.iter().map(|_| base + rng.gen_range(0..=spread)).collect()
            }
        };
        let g = WeightedGraph::new(n, pairs.iter().zip(draw).map(|(&(u, v), w)| (u, v, w)))?;
        if relaxations_fit(&g) || cap == 1 {
            return Ok(g);
        }
        cap = (cap * 3 / 4).max(1);
    }
}

fn relaxations_fit(g: &WeightedGraph) -> bool {
    let dist = bellman_ford(g, 0);
    g.edges.iter().all(|&(u, v, w)| {
        [(u, v), (v, u)]
            .iter()
            .all(|&(a, _)| dist[a].num().is_none_or(|d| d + w <= MAX_WEIGHT))
    })
}

fn structure<R: Rng>(family: &GraphFamily, n: usize, rng: &mut R) -> Result<Vec<(usize, usize)>, TraceError> {
    let mut set = BTreeSet::new();
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    match *family {
        GraphFamily::ErdosRenyi { p } => {
            for u in 0..n {
                for v in u + 1..n {
                    if rng.gen_bool(p) {
                        set.insert((u, v));
                    }
                }
            }
        }
        GraphFamily::NewmanWattsStrogatz { k, p } => {
            for u in 0..n {
                for j in 1..=k / 2 {
                    set.insert(key(u, (u + j) % n));
                }
            }
            let lattice: Vec<_> = set.iter().copied().collect();
            for (u, _) in lattice {
                if rng.gen_bool(p) {
                    let w = rng.gen_range(0..n);
                    if w != u {
                        set.insert(key(u, w));
                    }
                }
            }
        }
        GraphFamily::Regular { d } => return random_regular(n, d, rng),
        GraphFamily::BarabasiAlbert { m } => {
            let mut repeated = Vec::new();
            for v in 1..=m {
                set.insert((0, v));
                repeated.extend([0, v]);
            }
            for source in m + 1..n {
                let mut targets = BTreeSet::new();
                while targets.len() < m {
                    targets.insert(*repeated.choose(rng).unwrap());
                }
                for &t in &targets {
                    set.insert(key(source, t));
                    repeated.extend([t, source]);
                }
            }
        }
    }
    Ok(set.into_iter().collect())
}

/// Sequential stub pairing, restarting whenever it gets stuck.
fn random_regular<R: Rng>(n: usize, d: usize, rng: &mut R) -> Result<Vec<(usize, usize)>, TraceError> {
    'restart: for _ in 0..1000 {
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        let mut set = BTreeSet::new();
        while !stubs.is_empty() {
            let mut placed = false;
            for _ in 0..100 {
                let (i, j) = (rng.gen_range(0..stubs.len()), rng.gen_range(0..stubs.len()));
                let (a, b) = (stubs[i], stubs[j]);
                if a != b && !set.contains(&(a.min(b), a.max(b))) {
                    set.insert((a.min(b), a.max(b)));
                    let (hi, lo) = (i.max(j), i.min(j));
                    stubs.swap_remove(hi);
                    stubs.swap_remove(lo);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(set.into_iter().collect());
    }
    Err(TraceError::InvalidParams(format!("could not build a {d}-regular graph on {n} nodes")))
}

/// Shortest distances by repeated edge relaxation; unreachable nodes get `e`.
pub fn bellman_ford(g: &WeightedGraph, source: usize) -> Vec<Token> {
    let mut dist = vec![Token::End; g.nodes];
    dist[source] = Token::Num(0);
    for _ in 1..g.nodes.max(1) {
        let mut changed = false;
        for &(u, v, w) in &g.edges {
            for (a, b) in [(u, v), (v, u)] {
                if let Token::Num(da) = dist[a] {
                    if Token::Num(da + w) < dist[b] {
                        dist[b] = Token::Num(da + w);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    dist
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

/// True when `edges` form a spanning tree of `n` nodes.
pub fn is_spanning_tree(n: usize, edges: &[(usize, usize, u64)]) -> bool {
    let mut uf = UnionFind::new(n);
    edges.len() + 1 == n.max(1) && edges.iter().all(|&(u, v, _)| u < n && v < n && uf.union(u, v))
}

/// Minimum spanning-tree weight by exhaustive include/exclude search over
/// the edges, pruned by the cheapest completion still possible. `None` for
/// a disconnected graph.
pub fn brute_force_mst_weight(g: &WeightedGraph) -> Option<u64> {
    let mut edges = g.edges.clone();
    edges.sort_by_key(|e| e.2);
    let mut best = None;
    search(&edges, 0, &UnionFind::new(g.nodes), g.nodes.saturating_sub(1), 0, &mut best);
    best
}

fn search(
    edges: &[(usize, usize, u64)],
    i: usize,
    uf: &UnionFind,
    needed: usize,
    weight: u64,
    best: &mut Option<u64>,
) {
    if needed == 0 {
        if best.is_none_or(|b| weight < b) {
            *best = Some(weight);
        }
        return;
    }
    if edges.len() - i < needed {
        return;
    }
    let bound: u64 = weight + edges[i..i + needed].iter().map(|e| e.2).sum::<u64>();
    if best.is_some_and(|b| bound >= b) {
        return;
    }
    let (u, v, w) = edges[i];
    let mut with = UnionFind(uf.0.clone());
    if with.union(u, v) {
        search(edges, i + 1, &with, needed - 1, weight + w, best);
    }
    search(edges, i + 1, uf, needed, weight, best);
}

/// Minimum spanning-tree weight over every `(n - 1)`-edge subset. Only for
/// tiny graphs.
pub fn enumerate_mst_weight(g: &WeightedGraph) -> Option<u64> {
    fn rec(g: &WeightedGraph, start: usize, chosen: &mut Vec<(usize, usize, u64)>, best: &mut Option<u64>) {
        if chosen.len() + 1 == g.nodes.max(1) {
            if is_spanning_tree(g.nodes, chosen) {
                let w = chosen.iter().map(|e| e.2).sum();
                if best.is_none_or(|b| w < b) {
                    *best = Some(w);
                }
            }
            return;
        }
        for i in start..g.edges.len() {
            chosen.push(g.edges[i]);
            rec(g, i + 1, chosen, best);
            chosen.pop();
        }
    }
    let mut best = None;
    rec(g, 0, &mut Vec::new(), &mut best);
    best
}

/// Queue/frontier selection over `values ++ [e]` with finished nodes masked.
fn select_step(values: &[Token], done: &[bool]) -> TraceStep {
    let tokens: Vec<Token> = values.iter().copied().chain([Token::End]).collect();
    let mask = MaskVector::from_flags(done.iter().copied().chain([false]).collect());
    let (target, pointer) = masked_min(&tokens, &mask).expect("trailing e is considered");
    if target.is_end() {
        return TraceStep::terminal(tokens, mask, pointer);
    }
    let mut next = mask.clone();
    next.ignore(pointer);
    TraceStep { tokens, mask, target, pointer: Some(pointer), next_mask: Some(next) }
}

/// Unmasked minimum of `[current, candidate, e]`; ties keep `current`.
fn min_step(current: Token, candidate: Token) -> TraceStep {
    let tokens = vec![current, candidate, Token::End];
    let mask = MaskVector::considering_all(3);
    let (target, pointer) = masked_min(&tokens, &mask).unwrap();
    TraceStep { tokens, mask, target, pointer: Some(pointer), next_mask: None }
}

fn check_node(g: &WeightedGraph, node: usize) -> Result<(), TraceError> {
    if node >= g.nodes {
        return Err(TraceError::InvalidParams(format!("node {node} not in a graph of {}", g.nodes)));
    }
    Ok(())
}

/// Each iteration selects the closest unvisited node, then for every
/// unvisited neighbour adds the edge weight and takes the minimum with the
/// current distance.
pub fn gen_dijkstra_trace(g: &WeightedGraph, source: usize) -> Result<Vec<LabeledStep>, TraceError> {
    check_node(g, source)?;
    let mut dist = vec![Token::End; g.nodes];
    dist[source] = Token::Num(0);
    let mut visited = vec![false; g.nodes];
    let mut out = Vec::new();
    loop {
        let select = select_step(&dist, &visited);
        let (target, u) = (select.target, select.pointer.unwrap());
        out.push(LabeledStep { subroutine: Subroutine::Select, node: Some(u), step: select });
        if target.is_end() {
            return Ok(out);
        }
        visited[u] = true;
        for (v, w) in g.neighbors(u).into_iter().filter(|&(v, _)| !visited[v]) {
            let sum = ArithOp::Add
                .apply(dist[u], Token::Num(w), 8)
                .ok_or_else(|| TraceError::InvalidParams(format!("distance to {v} overflows 8 bits")))?;
            out.push(LabeledStep {
                subroutine: Subroutine::Add,
                node: Some(v),
                step: TraceStep {
                    tokens: vec![dist[u], Token::Num(w)],
                    mask: MaskVector::considering_all(2),
                    target: sum,
                    pointer: None,
                    next_mask: None,
                },
            });
            let min = min_step(dist[v], sum);
            dist[v] = min.target;
            out.push(LabeledStep { subroutine: Subroutine::Min, node: Some(v), step: min });
        }
    }
}

/// Each iteration selects the cheapest frontier node, then for every
/// neighbour outside the tree takes the minimum of its key and the edge
/// weight; choosing the weight re-parents the neighbour.
pub fn gen_prim_trace(g: &WeightedGraph, root: usize) -> Result<Vec<LabeledStep>, TraceError> {
    check_node(g, root)?;
    if !g.is_connected() {
        return Err(TraceError::Disconnected);
    }
    let mut key = vec![Token::End; g.nodes];
    key[root] = Token::Num(0);
    let mut in_tree = vec![false; g.nodes];
    let mut out = Vec::new();
    loop {
        let select = select_step(&key, &in_tree);
        let (target, u) = (select.target, select.pointer.unwrap());
        out.push(LabeledStep { subroutine: Subroutine::Select, node: Some(u), step: select });
        if target.is_end() {
            return Ok(out);
        }
        in_tree[u] = true;
        for (v, w) in g.neighbors(u).into_iter().filter(|&(v, _)| !in_tree[v]) {
            let min = min_step(key[v], Token::Num(w));
            key[v] = min.target;
            out.push(LabeledStep { subroutine: Subroutine::Min, node: Some(v), step: min });
        }
    }
}

fn inconsistent<T>(msg: impl Into<String>) -> Result<T, TraceError> {
    Err(TraceError::Inconsistent(msg.into()))
}

/// Checks a select step against the interpreter state and returns the
/// chosen node, or `None` on the terminal step.
fn replay_select(s: &LabeledStep, values: &[Token], done: &[bool]) -> Result<Option<usize>, TraceError> {
    let step = &s.step;
    if s.subroutine != Subroutine::Select || step.tokens != with_tokens(values) {
        return inconsistent("select step does not match the interpreter state");
    }
    if step.mask.flags() != done.iter().copied().chain([false]).collect::<Vec<_>>() {
        return inconsistent("select mask does not match the finished set");
    }
    let p = step.pointer.ok_or(TraceError::Inconsistent("select without pointer".into()))?;
    if p >= step.tokens.len() || step.mask.is_ignored(p) || step.tokens[p] != step.target {
        return inconsistent(format!("select points at {p} illegally"));
    }
    if step.target.is_end() {
        return Ok(None);
    }
    let mut next = step.mask.clone();
    next.ignore(p);
    if step.next_mask.as_ref() != Some(&next) || p == values.len() {
        return inconsistent("select mask update breaks the rule");
    }
    Ok(Some(p))
}

fn with_tokens(values: &[Token]) -> Vec<Token> {
    values.iter().copied().chain([Token::End]).collect()
}

fn replay_min(s: Option<&LabeledStep>, v: usize, current: Token, candidate: Token) -> Result<(Token, usize), TraceError> {
    let Some(s) = s else { return inconsistent("trace ends mid-relaxation") };
    let step = &s.step;
    if s.subroutine != Subroutine::Min || s.node != Some(v) || step.tokens != [current, candidate, Token::End] {
        return inconsistent(format!("min step for node {v} does not match the interpreter state"));
    }
    match step.pointer {
        Some(p) if p < 3 && step.tokens[p] == step.target => Ok((step.target, p)),
        _ => inconsistent("min step pointer disagrees with its value"),
    }
}

/// Replays a shortest-path trace through the host control loop, taking
/// every value from the recorded targets. Returns the final distances.
pub fn replay_dijkstra(g: &WeightedGraph, source: usize, steps: &[LabeledStep]) -> Result<Vec<Token>, TraceError> {
    check_node(g, source)?;
    let mut dist = vec![Token::End; g.nodes];
    dist[source] = Token::Num(0);
    let mut visited = vec![false; g.nodes];
    let mut it = steps.iter();
    loop {
        let Some(s) = it.next() else { return inconsistent("trace ends without terminal select") };
        let Some(u) = replay_select(s, &dist, &visited)? else {
            return if it.next().is_none() { Ok(dist) } else { inconsistent("steps after terminal select") };
        };
        visited[u] = true;
        for (v, w) in g.neighbors(u).into_iter().filter(|&(v, _)| !visited[v]) {
            let Some(add) = it.next() else { return inconsistent("trace ends mid-relaxation") };
            if add.subroutine != Subroutine::Add || add.node != Some(v) || add.step.tokens != [dist[u], Token::Num(w)] {
                return inconsistent(format!("add step for node {v} does not match the interpreter state"));
            }
            let sum = add.step.target;
            dist[v] = replay_min(it.next(), v, dist[v], sum)?.0;
        }
    }
}

/// Replays a spanning-tree trace and returns the tree edges
/// `(parent, child, weight)`.
pub fn replay_prim(
    g: &WeightedGraph,
    root: usize,
    steps: &[LabeledStep],
) -> Result<Vec<(usize, usize, u64)>, TraceError> {
    check_node(g, root)?;
    let mut key = vec![Token::End; g.nodes];
    key[root] = Token::Num(0);
    let mut parent: Vec<Option<usize>> = vec![None; g.nodes];
    let mut in_tree = vec![false; g.nodes];
    let mut it = steps.iter();
    loop {
        let Some(s) = it.next() else { return inconsistent("trace ends without terminal select") };
        let Some(u) = replay_select(s, &key, &in_tree)? else {
            if it.next().is_some() {
                return inconsistent("steps after terminal select");
            }
            return (0..g.nodes)
                .filter(|&v| v != root)
                .map(|v| {
                    let p = parent[v].ok_or(TraceError::Disconnected)?;
                    Ok((p, v, g.weight(p, v).expect("parent edges come from the graph")))
                })
                .collect();
        };
        in_tree[u] = true;
        for (v, w) in g.neighbors(u).into_iter().filter(|&(v, _)| !in_tree[v]) {
            let (value, p) = replay_min(it.next(), v, key[v], Token::Num(w))?;
            key[v] = value;
            if p == 1 {
                parent[v] = Some(u);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn families() -> Vec<GraphFamily> {
        vec![
            GraphFamily::ErdosRenyi { p: 0.4 },
            GraphFamily::NewmanWattsStrogatz { k: 2, p: 0.3 },
            GraphFamily::NewmanWattsStrogatz { k: 4, p: 0.5 },
            GraphFamily::Regular { d: 3 },
            GraphFamily::BarabasiAlbert { m: 2 },
        ]
    }

    fn triangle() -> WeightedGraph {
        WeightedGraph::new(3, [(0, 1, 2), (1, 2, 3), (0, 2, 7)]).unwrap()
    }

    #[test]
    fn erdos_renyi_extremes() {
        assert_eq!(gen_graph(&GraphFamily::ErdosRenyi { p: 1.0 }, 4, 0).unwrap().edges().len(), 6);
        assert!(gen_graph(&GraphFamily::ErdosRenyi { p: 0.0 }, 4, 0).unwrap().edges().is_empty());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(gen_graph(&GraphFamily::Regular { d: 3 }, 5, 0).is_err());
        assert!(gen_graph(&GraphFamily::ErdosRenyi { p: 1.5 }, 5, 0).is_err());
        assert!(gen_graph(&GraphFamily::BarabasiAlbert { m: 6 }, 10, 0).is_err());
        assert!(WeightedGraph::new(2, [(0, 0, 1)]).is_err());
        assert!(WeightedGraph::new(2, [(0, 1, 0)]).is_err());
    }

    #[test]
    fn regular_graphs_are_regular() {
        for seed in 0..20 {
            let g = gen_graph(&GraphFamily::Regular { d: 3 }, 8, seed).unwrap();
            assert!((0..8).all(|v| g.neighbors(v).len() == 3));
        }
        let g = gen_graph(&GraphFamily::Regular { d: 7 }, 8, 1).unwrap();
        assert_eq!(g.edges().len(), 28);
    }

    #[test]
    fn barabasi_albert_edge_count() {
        let g = gen_graph(&GraphFamily::BarabasiAlbert { m: 3 }, 10, 4).unwrap();
        assert_eq!(g.edges().len(), 3 + 3 * 6);
        assert!(g.is_connected());
    }

    #[test]
    fn generation_is_deterministic() {
        for f in families() {
            assert_eq!(gen_graph(&f, 10, 17).unwrap(), gen_graph(&f, 10, 17).unwrap());
        }
    }

    #[test]
    fn weights_never_overflow_relaxations() {
        for f in families() {
            for seed in 0..50 {
                for mode in [WeightMode::Uniform, WeightMode::Close { spread: 8 }] {
                    let g = gen_graph_with(&f, 10, mode, seed).unwrap();
                    assert!(relaxations_fit(&g));
                    gen_dijkstra_trace(&g, 0).unwrap();
                }
            }
        }
    }

    #[test]
    fn close_weights_stay_close() {
        let g = gen_graph_with(&GraphFamily::ErdosRenyi { p: 1.0 }, 6, WeightMode::Close { spread: 8 }, 2).unwrap();
        let ws: Vec<u64> = g.edges().iter().map(|e| e.2).collect();
        assert!(ws.iter().max().unwrap() - ws.iter().min().unwrap() <= 8);
    }

    #[test]
    fn dijkstra_three_node_example() {
        let g = triangle();
        let steps = gen_dijkstra_trace(&g, 0).unwrap();
        let want = vec![Token::Num(0), Token::Num(2), Token::Num(5)];
        assert_eq!(replay_dijkstra(&g, 0, &steps).unwrap(), want);
        assert_eq!(bellman_ford(&g, 0), want);
    }

    #[test]
    fn isolated_node_stays_at_e() {
        let g = WeightedGraph::new(3, [(0, 1, 4)]).unwrap();
        let d = replay_dijkstra(&g, 0, &gen_dijkstra_trace(&g, 0).unwrap()).unwrap();
        assert_eq!(d, vec![Token::Num(0), Token::Num(4), Token::End]);
        let single = WeightedGraph::new(1, []).unwrap();
        assert_eq!(replay_dijkstra(&single, 0, &gen_dijkstra_trace(&single, 0).unwrap()).unwrap(), [Token::Num(0)]);
    }

    #[test]
    fn prim_triangle_example() {
        let g = triangle();
        let tree = replay_prim(&g, 0, &gen_prim_trace(&g, 0).unwrap()).unwrap();
        assert!(is_spanning_tree(3, &tree));
        assert_eq!(tree.iter().map(|e| e.2).sum::<u64>(), 5);
        assert_eq!(brute_force_mst_weight(&g), Some(5));
        assert_eq!(enumerate_mst_weight(&g), Some(5));
    }

    #[test]
    fn prim_on_a_tree_returns_the_tree() {
        let g = WeightedGraph::new(4, [(0, 1, 9), (1, 2, 4), (1, 3, 200)]).unwrap();
        let mut tree: Vec<_> = replay_prim(&g, 0, &gen_prim_trace(&g, 0).unwrap())
            .unwrap()
            .into_iter()
            .map(|(a, b, w)| (a.min(b), a.max(b), w))
            .collect();
        tree.sort_unstable();
        assert_eq!(tree, g.edges());
    }

    #[test]
    fn prim_rejects_disconnected() {
        let g = WeightedGraph::new(3, [(0, 1, 4)]).unwrap();
        assert!(matches!(gen_prim_trace(&g, 0), Err(TraceError::Disconnected)));
        assert_eq!(brute_force_mst_weight(&g), None);
    }

    #[test]
    fn tampered_trace_is_caught() {
        let g = triangle();
        let mut steps = gen_dijkstra_trace(&g, 0).unwrap();
        let add = steps.iter_mut().find(|s| s.subroutine == Subroutine::Add).unwrap();
        add.step.tokens[1] = Token::Num(99);
        assert!(replay_dijkstra(&g, 0, &steps).is_err());
    }

    #[test]
    fn branch_and_bound_agrees_with_enumeration() {
        for seed in 0..300 {
            let g = gen_graph(&GraphFamily::ErdosRenyi { p: 0.6 }, 6, seed).unwrap();
            assert_eq!(brute_force_mst_weight(&g), enumerate_mst_weight(&g), "seed {seed}");
        }
    }

    #[test]
    fn traces_match_oracles_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..1000u64 {
            let n = rng.gen_range(1..=10);
            let p = rng.gen_range(0.1..0.9);
            let g = gen_graph(&GraphFamily::ErdosRenyi { p }, n, i).unwrap();
            let d = replay_dijkstra(&g, 0, &gen_dijkstra_trace(&g, 0).unwrap()).unwrap();
            assert_eq!(d, bellman_ford(&g, 0));

            let keep = g.component_of(0);
            let c = g.induced(&keep[..keep.len().min(9)]);
            if c.is_connected() {
                let tree = replay_prim(&c, 0, &gen_prim_trace(&c, 0).unwrap()).unwrap();
                assert!(is_spanning_tree(c.node_count(), &tree));
                assert_eq!(Some(tree.iter().map(|e| e.2).sum()), brute_force_mst_weight(&c));
            }
        }
    }
}
