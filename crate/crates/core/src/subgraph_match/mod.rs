//! Topology-aware divide-and-conquer partition of two graphs into pairs of
//! semantically equivalent subgraphs.
//!
//! Equivalent tensor pairs produced by nodes on both dominator paths are cut
//! points. Each region between consecutive cuts is matched recursively; a
//! region whose paths hold no interior cut is emitted as one segment pair.

mod tensors;

pub use tensors::{match_tensors, TensorPair, TensorPairSet};

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{dominators, CompGraph, DominatorInfo};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("model input `{tensor}` of graph {side} has no equivalent partner")]
    UnpairedSource { side: char, tensor: String },
    #[error("graphs have {a} and {b} model outputs")]
    UnpairedSink { a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgraphPair {
    /// Operator ids in topological order.
    pub nodes_a: Vec<String>,
    pub nodes_b: Vec<String>,
    /// Tensor pairs entering the segment.
    pub entry: Vec<(String, String)>,
    /// Tensor pairs leaving the segment.
    pub exit: Vec<(String, String)>,
    pub depth: usize,
    /// No interior cut existed, so the whole graph pair is one segment.
    pub coarse: bool,
}

impl SubgraphPair {
    pub fn size(&self) -> usize {
        self.nodes_a.len() + self.nodes_b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CutPair {
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub pairs: Vec<SubgraphPair>,
    /// Cut candidates dropped to restore a consistent order on both paths.
    pub dropped_crossings: Vec<CutPair>,
    /// Dominator-path node pairs examined as cut candidates.
    pub comparisons: usize,
}

struct Ctx<'a> {
    ga: &'a CompGraph,
    gb: &'a CompGraph,
    da: DominatorInfo,
    db: DominatorInfo,
    pos_a: Vec<Option<usize>>,
    pos_b: Vec<Option<usize>>,
    eq: &'a TensorPairSet,
    sink_exit: Vec<(String, String)>,
    result: MatchResult,
}

fn path_positions(g: &CompGraph, d: &DominatorInfo) -> Vec<Option<usize>> {
    let mut pos = vec![None; g.len()];
    for (i, &v) in d.dom_path.iter().enumerate() {
        pos[v] = Some(i);
    }
    pos
}

/// Partitions both graphs. Source inputs must all be paired by `eq`; sink
/// outputs are paired by `eq` where possible and by position otherwise.
pub fn recursive_match(ga: &CompGraph, gb: &CompGraph, eq: &TensorPairSet) -> Result<MatchResult, MatchError> {
    let (sa, sb) = (ga.out(ga.source()), gb.out(gb.source()));
    for t in sa {
        if !eq.partner_of_a(t).is_some_and(|p| sb.iter().any(|x| x == p)) {
            return Err(MatchError::UnpairedSource {
                side: 'A',
                tensor: t.clone(),
            });
        }
    }
    if let Some(t) = sb.iter().find(|t| !eq.partner_of_b(t).is_some_and(|p| sa.iter().any(|x| x == p))) {
        return Err(MatchError::UnpairedSource {
            side: 'B',
            tensor: t.clone(),
        });
    }
    let (oa, ob) = (ga.model_outputs(), gb.model_outputs());
    if oa.len() != ob.len() {
        return Err(MatchError::UnpairedSink { a: oa.len(), b: ob.len() });
    }
    let mut sink_exit = Vec::new();
    let mut free_b: Vec<&String> = ob.iter().filter(|t| !eq.partner_of_b(t).is_some_and(|p| oa.contains(&p.to_string()))).collect();
    free_b.reverse();
    for t in &oa {
        match eq.partner_of_a(t).filter(|p| ob.iter().any(|x| x == p)) {
            Some(p) => sink_exit.push((t.clone(), p.to_string())),
            None => {
                let p = free_b.pop().expect("equal output counts");
                sink_exit.push((t.clone(), p.clone()));
            }
        }
    }

    let da = dominators(ga);
    let db = dominators(gb);
    let mut ctx = Ctx {
        ga,
        gb,
        pos_a: path_positions(ga, &da),
        pos_b: path_positions(gb, &db),
        da,
        db,
        eq,
        sink_exit,
        result: MatchResult {
            pairs: Vec::new(),
            dropped_crossings: Vec::new(),
            comparisons: 0,
        },
    };
    recurse(&mut ctx, (ga.source(), gb.source()), (ga.sink(), gb.sink()), 0);
    Ok(ctx.result)
}

/// True when every output of `a` pairs with an output of `b` and vice versa.
fn is_cut(ctx: &Ctx, a: usize, b: usize) -> bool {
    let (oa, ob) = (ctx.ga.out(a), ctx.gb.out(b));
    !oa.is_empty()
        && oa.len() == ob.len()
        && oa
            .iter()
            .all(|t| ctx.eq.partner_of_a(t).is_some_and(|p| ob.iter().any(|x| x == p)))
}

fn boundary(ctx: &Ctx, a: usize, b: usize) -> Vec<(String, String)> {
    if a == ctx.ga.sink() {
        return ctx.sink_exit.clone();
    }
    let ob = ctx.gb.out(b);
    ctx.ga
        .out(a)
        .iter()
        .filter_map(|t| {
            ctx.eq
                .partner_of_a(t)
                .filter(|p| ob.iter().any(|x| x == p))
                .map(|p| (t.clone(), p.to_string()))
        })
        .collect()
}

fn recurse(ctx: &mut Ctx, entry: (usize, usize), exit: (usize, usize), depth: usize) {
    // Dominance inside a region equals dominance in the whole graph, so the
    // region's dominator path is the slice of the global one.
    let slice = |path: &[usize], pos: &[Option<usize>], from: usize, to: usize| -> Vec<usize> {
        let (s, e) = (pos[from].expect("cut on path"), pos[to].expect("cut on path"));
        path[s + 1..e].to_vec()
    };
    let pa = slice(&ctx.da.dom_path, &ctx.pos_a, entry.0, exit.0);
    let pb = slice(&ctx.db.dom_path, &ctx.pos_b, entry.1, exit.1);

    let mut candidates = Vec::new();
    for (i, &a) in pa.iter().enumerate() {
        for (j, &b) in pb.iter().enumerate() {
            ctx.result.comparisons += 1;
            if is_cut(ctx, a, b) {
                candidates.push((i, j, a, b));
            }
        }
    }
    let keep = increasing_chain(&candidates.iter().map(|c| (c.0, c.1)).collect::<Vec<_>>());
    for (k, c) in candidates.iter().enumerate() {
        if !keep.contains(&k) {
            ctx.result.dropped_crossings.push(CutPair {
                a: ctx.ga.nodes[c.2].id.clone(),
                b: ctx.gb.nodes[c.3].id.clone(),
            });
        }
    }
    let mut cuts: Vec<(usize, usize)> = keep.iter().map(|&k| (candidates[k].2, candidates[k].3)).collect();
    cuts.push(exit);

    if cuts.len() == 1 {
        emit(ctx, entry, exit, depth);
        return;
    }
    let mut prev = entry;
    for c in cuts {
        recurse(ctx, prev, c, depth + 1);
        prev = c;
    }
}

fn emit(ctx: &mut Ctx, entry: (usize, usize), exit: (usize, usize), depth: usize) {
    let members = |g: &CompGraph, d: &DominatorInfo, from: usize, to: usize| -> Vec<String> {
        g.topo_order()
            .iter()
            .copied()
            .filter(|&v| !g.is_virtual(v) && d.strictly_dominates(from, v) && !d.strictly_dominates(to, v))
            .map(|v| g.nodes[v].id.clone())
            .collect()
    };
    let nodes_a = members(ctx.ga, &ctx.da, entry.0, exit.0);
    let nodes_b = members(ctx.gb, &ctx.db, entry.1, exit.1);
    if nodes_a.is_empty() && nodes_b.is_empty() {
        return;
    }
    let pair = SubgraphPair {
        nodes_a,
        nodes_b,
        entry: boundary(ctx, entry.0, entry.1),
        exit: boundary(ctx, exit.0, exit.1),
        depth,
        coarse: depth == 0,
    };
    ctx.result.pairs.push(pair);
}

/// Indices of a longest chain strictly increasing in both coordinates.
/// `items` must be sorted by the first coordinate. Among longest chains the
/// one with the lexicographically smallest index sequence wins.
fn increasing_chain(items: &[(usize, usize)]) -> Vec<usize> {
    let n = items.len();
    let mut best = vec![1usize; n];
    for k in (0..n).rev() {
        for m in k + 1..n {
            if items[m].0 > items[k].0 && items[m].1 > items[k].1 {
                best[k] = best[k].max(best[m] + 1);
            }
        }
    }
    let Some(&len) = best.iter().max() else {
        return Vec::new();
    };
    let mut chain = Vec::with_capacity(len);
    let mut need = len;
    let mut last: Option<(usize, usize)> = None;
    for k in 0..n {
        let fits = last.is_none_or(|(i, j)| items[k].0 > i && items[k].1 > j);
        if need > 0 && best[k] == need && fits {
            chain.push(k);
            last = Some(items[k]);
            need -= 1;
        }
    }
    chain
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub pair_count: usize,
    pub avg_size: f64,
    pub max_size: usize,
    pub comparisons: usize,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Summary of a partition; segment size counts operators on both sides.
pub fn segment_cost_report(result: &MatchResult, wall_time: Duration) -> CostReport {
    let sizes: Vec<usize> = result.pairs.iter().map(SubgraphPair::size).collect();
    CostReport {
        pair_count: sizes.len(),
        avg_size: if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        },
        max_size: sizes.iter().copied().max().unwrap_or(0),
        comparisons: result.comparisons,
        wall_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpSpec;

    fn attention_ffn() -> (CompGraph, CompGraph, TensorPairSet) {
        let a = CompGraph::from_ops(&[
            OpSpec::new("Q", "linear_q", &["h"], &["q"]),
            OpSpec::new("K", "linear_k", &["h"], &["k"]),
            OpSpec::new("V", "linear_v", &["h"], &["v"]),
            OpSpec::new("Attn", "attention", &["q", "k", "v"], &["a"]),
            OpSpec::new("Mul", "mul", &["a"], &["m"]),
            OpSpec::new("Add", "add", &["m"], &["o"]),
        ])
        .unwrap();
        let b = CompGraph::from_ops(&[
            OpSpec::new("QKV", "linear_qkv", &["h"], &["qkv"]),
            OpSpec::new("Split", "split", &["qkv"], &["q2", "k2", "v2"]),
            OpSpec::new("Attn", "attention", &["q2", "k2", "v2"], &["a2"]),
            OpSpec::new("Linear", "linear", &["a2"], &["o2"]),
        ])
        .unwrap();
        let eq = TensorPairSet::from_ids(&[("h", "h"), ("q", "q2"), ("k", "k2"), ("v", "v2"), ("a", "a2"), ("o", "o2")]);
        (a, b, eq)
    }

    #[test]
    fn attention_ffn_partition() {
        let (a, b, eq) = attention_ffn();
        let r = recursive_match(&a, &b, &eq).unwrap();
        let parts: Vec<(Vec<&str>, Vec<&str>)> = r
            .pairs
            .iter()
            .map(|p| {
                (
                    p.nodes_a.iter().map(String::as_str).collect(),
                    p.nodes_b.iter().map(String::as_str).collect(),
                )
            })
            .collect();
        assert_eq!(
            parts,
            vec![
                (vec!["Q", "K", "V", "Attn"], vec!["QKV", "Split", "Attn"]),
                (vec!["Mul", "Add"], vec!["Linear"]),
            ]
        );
        assert_eq!(r.pairs[0].exit, vec![("a".to_string(), "a2".to_string())]);
        assert!(r.pairs.iter().all(|p| !p.coarse));
    }

    #[test]
    fn identical_chains_split_per_op() {
        let ops: Vec<OpSpec> = (0..5)
            .map(|i| OpSpec {
                id: format!("o{i}"),
                name: "f".into(),
                inputs: vec![format!("t{i}")],
                outputs: vec![format!("t{}", i + 1)],
            })
            .collect();
        let g = CompGraph::from_ops(&ops).unwrap();
        let ids: Vec<(String, String)> = (0..6).map(|i| (format!("t{i}"), format!("t{i}"))).collect();
        let r = recursive_match(&g, &g, &TensorPairSet::from_ids(&ids)).unwrap();
        assert_eq!(r.pairs.len(), 5);
        assert!(r.pairs.iter().all(|p| p.nodes_a.len() == 1 && p.nodes_b.len() == 1 && p.nodes_a == p.nodes_b));
        let report = segment_cost_report(&r, Duration::ZERO);
        assert_eq!(report.max_size, 2);
    }

    #[test]
    fn no_interior_cut_is_coarse() {
        let (a, b, _) = attention_ffn();
        let r = recursive_match(&a, &b, &TensorPairSet::from_ids(&[("h", "h")])).unwrap();
        assert_eq!(r.pairs.len(), 1);
        assert!(r.pairs[0].coarse);
        assert_eq!(r.pairs[0].nodes_a.len(), 6);
        assert_eq!(r.pairs[0].exit, vec![("o".to_string(), "o2".to_string())]);
        assert_eq!(segment_cost_report(&r, Duration::ZERO).pair_count, 1);
    }

    #[test]
    fn unpaired_source_rejected() {
        let (a, b, _) = attention_ffn();
        let err = recursive_match(&a, &b, &TensorPairSet::default()).unwrap_err();
        assert_eq!(err, MatchError::UnpairedSource { side: 'A', tensor: "h".into() });
    }

    #[test]
    fn crossing_pairs_dropped() {
        let ops = |names: [&str; 2]| {
            CompGraph::from_ops(&[
                OpSpec::new(names[0], "f", &["x"], &[&format!("{}_out", names[0])]),
                OpSpec::new(names[1], "g", &[&format!("{}_out", names[0])], &[&format!("{}_out", names[1])]),
            ])
            .unwrap()
        };
        let a = ops(["p", "q"]);
        let b = ops(["r", "s"]);
        let eq = TensorPairSet::from_ids(&[("x", "x"), ("p_out", "s_out"), ("q_out", "r_out")]);
        let r = recursive_match(&a, &b, &eq).unwrap();
        assert_eq!(r.dropped_crossings, vec![CutPair { a: "q".into(), b: "r".into() }]);
        assert_eq!(r.pairs[0].nodes_a, vec!["p"]);
        assert_eq!(r.pairs[0].nodes_b, vec!["r", "s"]);
    }

    #[test]
    fn chain_tie_break_prefers_earliest() {
        // (0,1) and (1,0) both form length-1 chains; the first is kept.
        assert_eq!(increasing_chain(&[(0, 1), (1, 0)]), vec![0]);
        assert_eq!(increasing_chain(&[(0, 2), (1, 0), (2, 1)]), vec![1, 2]);
        assert!(increasing_chain(&[]).is_empty());
    }
}
