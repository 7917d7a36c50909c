//! Cross-graph tensor pairing with multi-batch disambiguation.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::graph::CompGraph;
use crate::tensor_equiv::{compare_sets, invariant_set, prefilter, EquivError, InvariantSet};
use crate::trace_model::Trace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorPair {
    pub a: String,
    pub b: String,
    /// Worst score over all batches.
    pub score: f64,
    /// Batches on which the pair was confirmed equivalent.
    pub batches_confirmed: u32,
    /// B tensors that matched `a` on the first batch but failed a later one.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub rejected_by_later_batches: Vec<String>,
    /// Other B tensors equivalent to `a` on every batch, lost on rank/id tie-break.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ties: Vec<String>,
}

/// Injective tensor pairing between two graphs.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TensorPairSet {
    pub pairs: Vec<TensorPair>,
    #[serde(skip)]
    by_a: HashMap<String, usize>,
    #[serde(skip)]
    by_b: HashMap<String, usize>,
}

impl TensorPairSet {
    pub fn from_pairs(pairs: Vec<TensorPair>) -> Self {
        let mut set = Self::default();
        for p in pairs {
            set.insert(p);
        }
        set
    }

    /// Builds a set from bare id pairs, as when the pairing is known a priori.
    pub fn from_ids<S: AsRef<str>>(pairs: &[(S, S)]) -> Self {
        Self::from_pairs(
            pairs
                .iter()
                .map(|(a, b)| TensorPair {
                    a: a.as_ref().to_string(),
                    b: b.as_ref().to_string(),
                    score: 0.0,
                    batches_confirmed: 0,
                    rejected_by_later_batches: Vec::new(),
                    ties: Vec::new(),
                })
                .collect(),
        )
    }

    fn insert(&mut self, p: TensorPair) {
        assert!(
            !self.by_a.contains_key(&p.a) && !self.by_b.contains_key(&p.b),
            "tensor pairing must be injective"
        );
        self.by_a.insert(p.a.clone(), self.pairs.len());
        self.by_b.insert(p.b.clone(), self.pairs.len());
        self.pairs.push(p);
    }

    pub fn partner_of_a(&self, a: &str) -> Option<&str> {
        self.by_a.get(a).map(|&i| self.pairs[i].b.as_str())
    }

    pub fn partner_of_b(&self, b: &str) -> Option<&str> {
        self.by_b.get(b).map(|&i| self.pairs[i].a.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

struct Side {
    ids: Vec<String>,
    rank: Vec<f64>,
    sets: Vec<Vec<InvariantSet>>,
}

fn side(t: &Trace, g: &CompGraph) -> Result<Side, EquivError> {
    let ids = g.tensor_ids();
    let denom = (g.len().max(2) - 1) as f64;
    let rank = ids
        .iter()
        .map(|id| g.producer_of(id).map_or(0.0, |p| g.rank(p) as f64 / denom))
        .collect();
    let sets = ids
        .par_iter()
        .map(|id| {
            (0..t.batches())
                .map(|b| invariant_set(t.tensor(id, b).expect("validated trace has every batch")))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Side { ids, rank, sets })
}

/// Tests every cross-graph tensor pair on every recorded batch; ties among
/// surviving candidates are broken by closest normalized topological rank,
/// then by tensor id.
pub fn match_tensors(
    ta: &Trace,
    ga: &CompGraph,
    tb: &Trace,
    gb: &CompGraph,
    epsilon: f64,
) -> Result<TensorPairSet, EquivError> {
    let (a, b) = rayon::join(|| side(ta, ga), || side(tb, gb));
    let (a, b) = (a?, b?);
    let batches = ta.batches().min(tb.batches());

    struct Row {
        full: Vec<(usize, f64)>,
        first_only: Vec<usize>,
    }
    let rows: Vec<Row> = (0..a.ids.len())
        .into_par_iter()
        .map(|i| {
            let mut full = Vec::new();
            let mut first_only = Vec::new();
            for j in 0..b.ids.len() {
                if batches == 0 || !prefilter(&a.sets[i][0], &b.sets[j][0], epsilon) {
                    continue;
                }
                let first = compare_sets(&a.sets[i][0], &b.sets[j][0], epsilon);
                if !first.equivalent {
                    continue;
                }
                let mut worst = first.score;
                let mut ok = true;
                for k in 1..batches as usize {
                    let e = compare_sets(&a.sets[i][k], &b.sets[j][k], epsilon);
                    worst = worst.max(e.score);
                    if !e.equivalent {
                        ok = false;
                        break;
                    }
                }
                if ok {
                    full.push((j, worst));
                } else {
                    first_only.push(j);
                }
            }
            Row { full, first_only }
        })
        .collect();

    let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        for &(j, score) in &row.full {
            candidates.push(((a.rank[i] - b.rank[j]).abs(), i, j, score));
        }
    }
    candidates.sort_by(|x, y| {
        x.0.total_cmp(&y.0)
            .then_with(|| a.ids[x.1].cmp(&a.ids[y.1]))
            .then_with(|| b.ids[x.2].cmp(&b.ids[y.2]))
    });
    let mut used_a = vec![false; a.ids.len()];
    let mut used_b = vec![false; b.ids.len()];
    let mut chosen = Vec::new();
    for (_, i, j, score) in candidates {
        if used_a[i] || used_b[j] {
            continue;
        }
        used_a[i] = true;
        used_b[j] = true;
        let ties = rows[i]
            .full
            .iter()
            .filter(|&&(k, _)| k != j)
            .map(|&(k, _)| b.ids[k].clone())
            .collect();
        chosen.push(TensorPair {
            a: a.ids[i].clone(),
            b: b.ids[j].clone(),
            score,
            batches_confirmed: batches,
            rejected_by_later_batches: rows[i].first_only.iter().map(|&k| b.ids[k].clone()).collect(),
            ties,
        });
    }
    chosen.sort_by(|x, y| x.a.cmp(&y.a));
    Ok(TensorPairSet::from_pairs(chosen))
}
