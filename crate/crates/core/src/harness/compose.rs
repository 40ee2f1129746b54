//! Host programs that run whole algorithms by delegating every
//! comparison, selection and addition to a step engine, either a trained
//! model or an exact stand-in.

use crate::model::{nee_step_batch, MaskVector, Model};
use crate::numeral::Token;
use crate::traces::{
    is_spanning_tree, masked_min, merge_layout, merge_update, selection_update, ArithOp, TraceError, WeightedGraph,
};

use super::HarnessError;

/// What one engine invocation returns.
#[derive(Clone, Debug, PartialEq)]
pub struct EngineStep {
    pub value: Token,
    pub pointer: usize,
    pub next_mask: MaskVector,
}

/// Masked minimum with a mask update.
pub trait StepEngine {
    fn step_batch(&self, items: &[(&[Token], &MaskVector)]) -> Result<Vec<EngineStep>, HarnessError>;

    fn step(&self, tokens: &[Token], mask: &MaskVector) -> Result<EngineStep, HarnessError> {
        Ok(self.step_batch(&[(tokens, mask)])?.remove(0))
    }
}

/// Two-operand arithmetic.
pub trait AddEngine {
    fn add_batch(&self, pairs: &[(Token, Token)]) -> Result<Vec<Token>, HarnessError>;
}

impl StepEngine for Model {
    fn step_batch(&self, items: &[(&[Token], &MaskVector)]) -> Result<Vec<EngineStep>, HarnessError> {
        Ok(nee_step_batch(self, items)?
            .into_iter()
            .map(|o| EngineStep { value: o.value, pointer: o.pointer, next_mask: o.next_mask })
            .collect())
    }
}

impl AddEngine for Model {
    fn add_batch(&self, pairs: &[(Token, Token)]) -> Result<Vec<Token>, HarnessError> {
        let tokens: Vec<[Token; 2]> = pairs.iter().map(|&(a, b)| [a, b]).collect();
        let mask = MaskVector::considering_all(2);
        let items: Vec<(&[Token], &MaskVector)> = tokens.iter().map(|t| (&t[..], &mask)).collect();
        Ok(nee_step_batch(self, &items)?.into_iter().map(|o| o.value).collect())
    }
}

/// Mask rule applied by [`ExactMin`] after each selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExactUpdate {
    /// Ignore the chosen position.
    Select,
    /// Ignore the chosen position and expose its successor.
    Merge,
    /// Leave the mask alone.
    Keep,
}

/// Exact masked minimum (ties to the lowest index).
#[derive(Clone, Copy, Debug)]
pub struct ExactMin(pub ExactUpdate);

impl StepEngine for ExactMin {
    fn step_batch(&self, items: &[(&[Token], &MaskVector)]) -> Result<Vec<EngineStep>, HarnessError> {
        items
            .iter()
            .map(|&(tokens, mask)| {
                let (value, pointer) = masked_min(tokens, mask).ok_or(crate::model::ModelError::EmptyMask)?;
                let next_mask = match self.0 {
                    ExactUpdate::Select => selection_update(mask, pointer),
                    ExactUpdate::Merge => merge_update(mask, pointer),
                    ExactUpdate::Keep => mask.clone(),
                };
                Ok(EngineStep { value, pointer, next_mask })
            })
            .collect()
    }
}

/// Exact addition at a bit width, `e` absorbing.
#[derive(Clone, Copy, Debug)]
pub struct ExactAdd(pub u32);

impl AddEngine for ExactAdd {
    fn add_batch(&self, pairs: &[(Token, Token)]) -> Result<Vec<Token>, HarnessError> {
        pairs
            .iter()
            .map(|&(a, b)| {
                ArithOp::Add
                    .apply(a, b, self.0)
                    .ok_or_else(|| HarnessError::Subroutine(format!("{a:?} + {b:?} overflows {} bits", self.0)))
            })
            .collect()
    }
}

/// Repeated engine steps from `mask` until the engine emits `e`, within
/// `2 L` steps.
pub fn run_engine(engine: &dyn StepEngine, tokens: &[Token], mut mask: MaskVector) -> Result<Vec<Token>, HarnessError> {
    let budget = 2 * tokens.len();
    let mut out = Vec::new();
    for _ in 0..budget {
        if mask.considered_count() == 0 {
            return Err(crate::model::ModelError::EmptyMask.into());
        }
        let s = engine.step(tokens, &mask)?;
        if s.value.is_end() {
            return Ok(out);
        }
        out.push(s.value);
        mask = s.next_mask;
    }
    Err(HarnessError::Budget { what: "engine rollout", steps: budget })
}

fn queue_tokens(values: &[Token]) -> Vec<Token> {
    values.iter().copied().chain([Token::End]).collect()
}

/// Selects the next node from `values` under `mask` (one slot per node
/// plus the trailing `e`). `None` once the engine returns `e`.
fn select(
    engine: &dyn StepEngine,
    values: &[Token],
    mask: &mut MaskVector,
) -> Result<Option<usize>, HarnessError> {
    if mask.considered_count() == 0 {
        return Err(crate::model::ModelError::EmptyMask.into());
    }
    let s = engine.step(&queue_tokens(values), mask)?;
    if s.value.is_end() {
        return Ok(None);
    }
    if s.pointer >= values.len() {
        return Err(HarnessError::Subroutine(format!("selection pointed at the end marker with value {:?}", s.value)));
    }
    if s.next_mask.len() != mask.len() {
        return Err(HarnessError::Subroutine("mask update changed the length".into()));
    }
    *mask = s.next_mask;
    Ok(Some(s.pointer))
}

/// `min(current, candidate)` for each pair through the engine; returns the
/// value and whether the candidate won.
fn relax(engine: &dyn StepEngine, pairs: &[(Token, Token)]) -> Result<Vec<(Token, bool)>, HarnessError> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let tokens: Vec<[Token; 3]> = pairs.iter().map(|&(c, x)| [c, x, Token::End]).collect();
    let mask = MaskVector::considering_all(3);
    let items: Vec<(&[Token], &MaskVector)> = tokens.iter().map(|t| (&t[..], &mask)).collect();
    Ok(engine.step_batch(&items)?.into_iter().map(|s| (s.value, s.pointer == 1)).collect())
}

/// Shortest-path distances from `source`; unreachable nodes stay `e`.
pub fn compose_dijkstra(
    min: &dyn StepEngine,
    add: &dyn AddEngine,
    g: &WeightedGraph,
    source: usize,
) -> Result<Vec<Token>, HarnessError> {
    let n = g.node_count();
    if source >= n {
        return Err(TraceError::InvalidParams(format!("source {source} not in a graph of {n}")).into());
    }
    let mut dist = vec![Token::End; n];
    dist[source] = Token::Num(0);
    let mut queue = MaskVector::considering_all(n + 1);
    for _ in 0..=n {
        let Some(u) = select(min, &dist, &mut queue)? else {
            return Ok(dist);
        };
        let targets: Vec<(usize, u64)> =
            g.neighbors(u).into_iter().filter(|&(v, _)| !queue.is_ignored(v)).collect();
        if targets.is_empty() {
            continue;
        }
        let pairs: Vec<(Token, Token)> = targets.iter().map(|&(_, w)| (dist[u], Token::Num(w))).collect();
        let sums = add.add_batch(&pairs)?;
        let cmp: Vec<(Token, Token)> = targets.iter().zip(&sums).map(|(&(v, _), &s)| (dist[v], s)).collect();
        for (&(v, _), (value, _)) in targets.iter().zip(relax(min, &cmp)?) {
            dist[v] = value;
        }
    }
    Err(HarnessError::Budget { what: "shortest-path host loop", steps: n + 1 })
}

/// Minimum spanning tree edges `(parent, child, weight)` grown from
/// `root`, checked to form a spanning tree.
pub fn compose_prim(
    min: &dyn StepEngine,
    g: &WeightedGraph,
    root: usize,
) -> Result<Vec<(usize, usize, u64)>, HarnessError> {
    let n = g.node_count();
    if root >= n {
        return Err(TraceError::InvalidParams(format!("root {root} not in a graph of {n}")).into());
    }
    if !g.is_connected() {
        return Err(TraceError::Disconnected.into());
    }
    let mut key = vec![Token::End; n];
    key[root] = Token::Num(0);
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut frontier = MaskVector::considering_all(n + 1);
    let mut edges: Vec<(usize, usize, u64)> = Vec::with_capacity(n.saturating_sub(1));
    for _ in 0..=n {
        let Some(u) = select(min, &key, &mut frontier)? else {
            let all: Vec<(usize, usize, u64)> = edges.iter().map(|&(p, c, w)| (p.min(c), p.max(c), w)).collect();
            if !is_spanning_tree(n, &all) || all.iter().any(|&(a, b, w)| g.weight(a, b) != Some(w)) {
                return Err(HarnessError::Subroutine("selected edges do not form a spanning tree".into()));
            }
            return Ok(edges);
        };
        if let Some(p) = parent[u] {
            edges.push((p, u, g.weight(p, u).expect("parents come from graph edges")));
        }
        let targets: Vec<(usize, u64)> =
            g.neighbors(u).into_iter().filter(|&(v, _)| !frontier.is_ignored(v)).collect();
        let cmp: Vec<(Token, Token)> = targets.iter().map(|&(v, w)| (key[v], Token::Num(w))).collect();
        for (&(v, _), (value, took)) in targets.iter().zip(relax(min, &cmp)?) {
            key[v] = value;
            if took {
                parent[v] = Some(u);
            }
        }
    }
    Err(HarnessError::Budget { what: "spanning-tree host loop", steps: n + 1 })
}

/// Top-down merge sort; the host splits, `merge` performs every merge.
pub fn compose_merge_sort(merge: &dyn StepEngine, seq: &[u64]) -> Result<Vec<u64>, HarnessError> {
    if seq.len() <= 1 {
        return Ok(seq.to_vec());
    }
    let (left, right) = seq.split_at(seq.len() / 2);
    let (left, right) = (compose_merge_sort(merge, left)?, compose_merge_sort(merge, right)?);
    let (tokens, mask) = merge_layout(&left, &right);
    let merged = run_engine(merge, &tokens, mask)?;
    let out: Vec<u64> = merged.iter().filter_map(|t| t.num()).collect();
    if out.len() != seq.len() {
        return Err(HarnessError::Subroutine(format!("merge emitted {} of {} values", out.len(), seq.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{bellman_ford, brute_force_mst_weight, gen_graph, GraphFamily};

    fn triangle() -> WeightedGraph {
        WeightedGraph::new(3, [(0, 1, 2), (1, 2, 3), (0, 2, 7)]).unwrap()
    }

    #[test]
    fn dijkstra_on_the_triangle() {
        let d = compose_dijkstra(&ExactMin(ExactUpdate::Select), &ExactAdd(8), &triangle(), 0).unwrap();
        assert_eq!(d, vec![Token::Num(0), Token::Num(2), Token::Num(5)]);
    }

    #[test]
    fn source_only_graph() {
        let g = WeightedGraph::new(1, []).unwrap();
        let d = compose_dijkstra(&ExactMin(ExactUpdate::Select), &ExactAdd(8), &g, 0).unwrap();
        assert_eq!(d, vec![Token::Num(0)]);
    }

    #[test]
    fn isolated_node_stays_unreached() {
        let g = WeightedGraph::new(3, [(0, 1, 4)]).unwrap();
        let d = compose_dijkstra(&ExactMin(ExactUpdate::Select), &ExactAdd(8), &g, 0).unwrap();
        assert_eq!(d, vec![Token::Num(0), Token::Num(4), Token::End]);
    }

    #[test]
    fn prim_on_the_triangle() {
        let edges = compose_prim(&ExactMin(ExactUpdate::Select), &triangle(), 0).unwrap();
        assert_eq!(edges.iter().map(|e| e.2).sum::<u64>(), 5);
    }

    #[test]
    fn prim_returns_a_tree_input_unchanged() {
        let g = WeightedGraph::new(4, [(0, 1, 9), (1, 2, 1), (1, 3, 200)]).unwrap();
        let mut edges: Vec<_> =
            compose_prim(&ExactMin(ExactUpdate::Select), &g, 0).unwrap().into_iter().map(|(p, c, w)| (p.min(c), p.max(c), w)).collect();
        edges.sort_unstable();
        assert_eq!(edges, g.edges());
    }

    #[test]
    fn prim_rejects_disconnected_graphs() {
        let g = WeightedGraph::new(3, [(0, 1, 4)]).unwrap();
        assert!(matches!(
            compose_prim(&ExactMin(ExactUpdate::Select), &g, 0),
            Err(HarnessError::Trace(TraceError::Disconnected))
        ));
    }

    #[test]
    fn merge_sort_small_cases() {
        let m = ExactMin(ExactUpdate::Merge);
        assert_eq!(compose_merge_sort(&m, &[]).unwrap(), Vec::<u64>::new());
        assert_eq!(compose_merge_sort(&m, &[9]).unwrap(), vec![9]);
        assert_eq!(compose_merge_sort(&m, &[4, 1, 3, 2]).unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(compose_merge_sort(&m, &[5, 5, 0, 255, 5]).unwrap(), vec![0, 5, 5, 5, 255]);
    }

    #[test]
    fn run_engine_sorts_with_exact_selection() {
        let t = crate::traces::with_end(&[5, 2, 7]);
        let out = run_engine(&ExactMin(ExactUpdate::Select), &t, MaskVector::considering_all(4)).unwrap();
        assert_eq!(out, vec![Token::Num(2), Token::Num(5), Token::Num(7)]);
    }

    #[test]
    fn a_stuck_engine_hits_the_budget() {
        let t = crate::traces::with_end(&[5, 2]);
        assert!(matches!(
            run_engine(&ExactMin(ExactUpdate::Keep), &t, MaskVector::considering_all(3)),
            Err(HarnessError::Budget { steps: 6, .. })
        ));
    }

    #[test]
    fn exact_compositions_on_a_few_random_graphs() {
        for seed in 0..50 {
            let g = gen_graph(&GraphFamily::ErdosRenyi { p: 0.4 }, 7, seed).unwrap();
            let d = compose_dijkstra(&ExactMin(ExactUpdate::Select), &ExactAdd(8), &g, 0).unwrap();
            assert_eq!(d, bellman_ford(&g, 0));
            if g.is_connected() {
                let e = compose_prim(&ExactMin(ExactUpdate::Select), &g, 0).unwrap();
                assert_eq!(Some(e.iter().map(|e| e.2).sum()), brute_force_mst_weight(&g));
            }
        }
    }
}
