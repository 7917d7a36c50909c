//! Usage contract of a differential comparison: same workload, equivalent inputs.

use serde::Serialize;
use thiserror::Error;

use super::Trace;
use crate::tensor_equiv::{compare_sets, elementwise_rel_diff, invariant_set, EquivError};

#[derive(Debug, Error)]
pub enum PairingError {
    #[error("workload mismatch: `{a}` vs `{b}`")]
    WorkloadMismatch { a: String, b: String },
    #[error("traces record {a} and {b} input batches")]
    BatchMismatch { a: u32, b: u32 },
    #[error("model input `{tensor}` of trace {side} has no equivalent counterpart")]
    InputMismatch { side: char, tensor: String },
    #[error(transparent)]
    Equiv(#[from] EquivError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputPair {
    pub a: String,
    pub b: String,
    pub equivalent: bool,
    /// Element-wise relative difference of B against A when shapes agree,
    /// otherwise the equivalence score; maximum over batches.
    pub rel_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairingReport {
    pub workload: String,
    pub batches: u32,
    pub input_pairs: Vec<(String, String)>,
    pub output_pairs: Vec<OutputPair>,
    pub max_output_rel_diff: f64,
}

/// Worst equivalence score of two tensors over every batch.
pub(crate) fn score_all_batches(
    a: &Trace,
    ta: &str,
    b: &Trace,
    tb: &str,
    epsilon: f64,
) -> Result<(bool, f64), EquivError> {
    let mut worst = 0.0f64;
    let mut all = true;
    for batch in 0..a.batches() {
        let (Some(x), Some(y)) = (a.tensor(ta, batch), b.tensor(tb, batch)) else {
            return Ok((false, f64::INFINITY));
        };
        if x.element_count() != y.element_count() {
            return Ok((false, f64::INFINITY));
        }
        let e = compare_sets(&invariant_set(x)?, &invariant_set(y)?, epsilon);
        all &= e.equivalent;
        worst = worst.max(e.score);
    }
    Ok((all, worst))
}

/// Output difference used by the 1% rule, maximum over batches.
pub(crate) fn output_rel_diff(reference: &Trace, tr: &str, other: &Trace, to: &str, epsilon: f64) -> Result<f64, EquivError> {
    let mut worst = 0.0f64;
    for batch in 0..reference.batches() {
        let (Some(x), Some(y)) = (reference.tensor(tr, batch), other.tensor(to, batch)) else {
            return Ok(f64::INFINITY);
        };
        let d = match elementwise_rel_diff(x, y) {
            Some(d) => d,
            None if x.element_count() != y.element_count() => f64::INFINITY,
            None => compare_sets(&invariant_set(x)?, &invariant_set(y)?, epsilon).score,
        };
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Greedy best-score injective pairing of `left` into `right`.
fn pair_by_equivalence(
    a: &Trace,
    left: &[String],
    b: &Trace,
    right: &[String],
    epsilon: f64,
) -> Result<Vec<Option<usize>>, EquivError> {
    let mut candidates = Vec::new();
    for (i, ta) in left.iter().enumerate() {
        for (j, tb) in right.iter().enumerate() {
            let (ok, score) = score_all_batches(a, ta, b, tb, epsilon)?;
            if ok {
                candidates.push((score, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![None; left.len()];
    let mut used = vec![false; right.len()];
    for (_, i, j) in candidates {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    Ok(out)
}

/// Checks that `a` and `b` are a meaningful differential pair.
pub fn validate_pairing(a: &Trace, b: &Trace, epsilon: f64) -> Result<PairingReport, PairingError> {
    if a.header.workload != b.header.workload {
        return Err(PairingError::WorkloadMismatch {
            a: a.header.workload.clone(),
            b: b.header.workload.clone(),
        });
    }
    if a.batches() != b.batches() {
        return Err(PairingError::BatchMismatch {
            a: a.batches(),
            b: b.batches(),
        });
    }

    let inputs_a = a.model_inputs();
    let inputs_b = b.model_inputs();
    let input_match = pair_by_equivalence(a, &inputs_a, b, &inputs_b, epsilon)?;
    let mut input_pairs = Vec::new();
    for (i, m) in input_match.iter().enumerate() {
        match m {
            Some(j) => input_pairs.push((inputs_a[i].clone(), inputs_b[*j].clone())),
            None => {
                return Err(PairingError::InputMismatch {
                    side: 'A',
                    tensor: inputs_a[i].clone(),
                })
            }
        }
    }
    if let Some(extra) = inputs_b
        .iter()
        .find(|t| !input_pairs.iter().any(|(_, pb)| pb == *t))
    {
        return Err(PairingError::InputMismatch {
            side: 'B',
            tensor: extra.clone(),
        });
    }

    let outputs_a = a.model_outputs();
    let outputs_b = b.model_outputs();
    let mut output_match = pair_by_equivalence(a, &outputs_a, b, &outputs_b, epsilon)?;
    let equivalent: Vec<bool> = output_match.iter().map(Option::is_some).collect();
    // Unmatched outputs fall back to positional pairing among the leftovers.
    let mut free: Vec<usize> = (0..outputs_b.len())
        .filter(|j| !output_match.contains(&Some(*j)))
        .collect();
    free.reverse();
    for m in output_match.iter_mut().filter(|m| m.is_none()) {
        *m = free.pop();
    }
    let mut output_pairs = Vec::new();
    for (i, m) in output_match.iter().enumerate() {
        if let Some(j) = m {
            output_pairs.push(OutputPair {
                a: outputs_a[i].clone(),
                b: outputs_b[*j].clone(),
                equivalent: equivalent[i],
                rel_diff: output_rel_diff(a, &outputs_a[i], b, &outputs_b[*j], epsilon)?,
            });
        }
    }
    let max_output_rel_diff = output_pairs.iter().map(|p| p.rel_diff).fold(0.0, f64::max);
    Ok(PairingReport {
        workload: a.header.workload.clone(),
        batches: a.batches(),
        input_pairs,
        output_pairs,
        max_output_rel_diff,
    })
}
