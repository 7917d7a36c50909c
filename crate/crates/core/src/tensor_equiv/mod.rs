//! Layout-robust tensor equivalence via multi-mode SVD invariant sets.
//!
//! For an order-r tensor every non-trivial mode subset G defines an unfolding
//! with G as rows and its complement as columns. The multiset of sorted
//! singular-value spectra over all such unfoldings is unchanged by mode
//! permutation, and merging adjacent modes selects a subset of it.

mod svd;

pub use svd::{singular_values, spectrum_distance, Matrix, Spectrum};

use rayon::prelude::*;
use thiserror::Error;

use crate::trace_model::TensorSnapshot;

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const MAX_ORDER: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquivError {
    #[error("mode subset must be non-empty and proper, got {0:?}")]
    TrivialSubset(Vec<usize>),
    #[error("mode {mode} out of range for order {order}")]
    ModeOutOfRange { mode: usize, order: usize },
    #[error("tensor order {order} exceeds the supported maximum {max}")]
    OrderCap { order: usize, max: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
}

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Matricizes `t` with the modes in `g` as rows and the rest as columns, both
/// in ascending mode order.
pub fn unfold(t: &TensorSnapshot, g: &[usize]) -> Result<Matrix, EquivError> {
    let r = t.order();
    let mut rows_modes: Vec<usize> = g.to_vec();
    rows_modes.sort_unstable();
    rows_modes.dedup();
    if let Some(&m) = rows_modes.iter().find(|&&m| m >= r) {
        return Err(EquivError::ModeOutOfRange { mode: m, order: r });
    }
    if rows_modes.is_empty() || rows_modes.len() == r {
        return Err(EquivError::TrivialSubset(g.to_vec()));
    }
    let col_modes: Vec<usize> = (0..r).filter(|m| !rows_modes.contains(m)).collect();
    Ok(unfold_unchecked(t, &rows_modes, &col_modes))
}

fn unfold_unchecked(t: &TensorSnapshot, rows_modes: &[usize], col_modes: &[usize]) -> Matrix {
    let st = strides(&t.shape);
    let m: usize = rows_modes.iter().map(|&i| t.shape[i]).product();
    let n: usize = col_modes.iter().map(|&i| t.shape[i]).product();
    // Offsets of every row (resp. column) multi-index into the flat tensor.
    let offsets = |modes: &[usize], count: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        let mut idx = vec![0usize; modes.len()];
        for _ in 0..count {
            out.push(idx.iter().zip(modes).map(|(i, &md)| i * st[md]).sum());
            for k in (0..modes.len()).rev() {
                idx[k] += 1;
                if idx[k] < t.shape[modes[k]] {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    };
    let ro = offsets(rows_modes, m);
    let co = offsets(col_modes, n);
    let mut data = Vec::with_capacity(m * n);
    for &r in &ro {
        for &c in &co {
            data.push(t.values[r + c]);
        }
    }
    Matrix::new(m, n, data)
}

/// Spectra over all non-trivial unfoldings of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSet {
    pub spectra: Vec<Spectrum>,
    pub source_order: usize,
    pub element_count: usize,
    pub frobenius: f64,
}

/// Computes the invariant set. An order-1 tensor has the single spectrum `[‖t‖]`.
pub fn invariant_set(t: &TensorSnapshot) -> Result<InvariantSet, EquivError> {
    let r = t.order();
    if r > MAX_ORDER {
        return Err(EquivError::OrderCap { order: r, max: MAX_ORDER });
    }
    if t.values.iter().any(|v| !v.is_finite()) {
        return Err(EquivError::NonFinite);
    }
    let frobenius = t.frobenius();
    let mut spectra = Vec::new();
    if r <= 1 {
        spectra.push(Spectrum::from_values(vec![frobenius]));
    } else {
        // G and its complement give transposed unfoldings with equal spectra,
        // so only subsets excluding the last mode are decomposed.
        let last = 1usize << (r - 1);
        for mask in 1..last {
            let rows: Vec<usize> = (0..r).filter(|i| mask & (1 << i) != 0).collect();
            let cols: Vec<usize> = (0..r).filter(|i| mask & (1 << i) == 0).collect();
            let s = singular_values(&unfold_unchecked(t, &rows, &cols))?;
            spectra.push(s.clone());
            spectra.push(s);
        }
    }
    Ok(InvariantSet {
        spectra,
        source_order: r,
        element_count: t.element_count(),
        frobenius,
    })
}

/// Invariant sets for many tensors, computed data-parallel.
pub fn invariant_sets(tensors: &[&TensorSnapshot]) -> Result<Vec<InvariantSet>, EquivError> {
    tensors.par_iter().map(|t| invariant_set(t)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Equivalence {
    pub equivalent: bool,
    /// Largest matched spectrum distance; infinite when no embedding exists.
    pub score: f64,
}

impl Equivalence {
    fn reject() -> Self {
        Self {
            equivalent: false,
            score: f64::INFINITY,
        }
    }
}

/// Cheap necessary condition: equal element count and Frobenius norms within ε.
pub fn prefilter(a: &InvariantSet, b: &InvariantSet, epsilon: f64) -> bool {
    if a.element_count != b.element_count {
        return false;
    }
    let lo = a.frobenius.min(b.frobenius);
    (a.frobenius - b.frobenius).abs() <= epsilon * lo.max(Spectrum::FLOOR) * (1.0 + 1e-9) + 1e-12
}

/// Compares two invariant sets. The smaller set must embed injectively into
/// the larger; when orders differ the larger set also offers the trivial
/// full-merge spectrum `[‖T‖]`.
pub fn compare_sets(a: &InvariantSet, b: &InvariantSet, epsilon: f64) -> Equivalence {
    if !prefilter(a, b, epsilon) {
        return Equivalence::reject();
    }
    let (small, large) = if a.spectra.len() <= b.spectra.len() { (a, b) } else { (b, a) };
    let mut targets: Vec<&Spectrum> = large.spectra.iter().collect();
    let trivial = Spectrum::from_values(vec![large.frobenius]);
    if a.source_order != b.source_order {
        targets.push(&trivial);
    }
    let dist: Vec<Vec<f64>> = small
        .spectra
        .iter()
        .map(|s| targets.iter().map(|t| spectrum_distance(s, t)).collect())
        .collect();
    let score = bottleneck(&dist, targets.len());
    Equivalence {
        equivalent: score <= epsilon,
        score,
    }
}

/// Smallest threshold admitting a matching that saturates every row.
fn bottleneck(dist: &[Vec<f64>], ncols: usize) -> f64 {
    if dist.is_empty() {
        return 0.0;
    }
    let mut levels: Vec<f64> = dist.iter().flatten().copied().collect();
    levels.sort_by(|x, y| x.total_cmp(y));
    levels.dedup();
    let (mut lo, mut hi) = (0usize, levels.len() - 1);
    if !saturates(dist, ncols, levels[hi]) {
        return f64::INFINITY;
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        if saturates(dist, ncols, levels[mid]) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    levels[lo]
}

fn saturates(dist: &[Vec<f64>], ncols: usize, limit: f64) -> bool {
    fn augment(
        row: usize,
        dist: &[Vec<f64>],
        limit: f64,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for c in 0..owner.len() {
            if dist[row][c] <= limit && !seen[c] {
                seen[c] = true;
                if owner[c].is_none_or(|o| augment(o, dist, limit, seen, owner)) {
                    owner[c] = Some(row);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; ncols];
    (0..dist.len()).all(|row| {
        let mut seen = vec![false; ncols];
        augment(row, dist, limit, &mut seen, &mut owner)
    })
}

/// Full equivalence test of two snapshots.
pub fn tensors_equivalent(a: &TensorSnapshot, b: &TensorSnapshot, epsilon: f64) -> Result<Equivalence, EquivError> {
    if a.element_count() != b.element_count() {
        return Ok(Equivalence::reject());
    }
    Ok(compare_sets(&invariant_set(a)?, &invariant_set(b)?, epsilon))
}

/// Maximum element-wise relative difference of `other` against `reference`,
/// or `None` when shapes differ. Elements tiny relative to the reference's
/// largest magnitude are measured against that scale instead.
pub fn elementwise_rel_diff(reference: &TensorSnapshot, other: &TensorSnapshot) -> Option<f64> {
    if reference.shape != other.shape {
        return None;
    }
    let scale = reference.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-6).max(1e-12);
    Some(
        reference
            .values
            .iter()
            .zip(&other.values)
            .map(|(r, o)| (r - o).abs() / r.abs().max(floor))
            .fold(0.0, f64::max),
    )
}

/// Returns the tensor with modes reordered so that output mode `i` is input mode `perm[i]`.
pub fn permute_modes(t: &TensorSnapshot, perm: &[usize]) -> TensorSnapshot {
    assert_eq!(perm.len(), t.order(), "permutation length");
    let st = strides(&t.shape);
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let n = t.element_count();
    let mut values = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let off: usize = idx.iter().zip(perm).map(|(i, &p)| i * st[p]).sum();
        values.push(t.values[off]);
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    TensorSnapshot {
        tensor_id: t.tensor_id.clone(),
        batch: t.batch,
        shape,
        values,
    }
}

/// Merges modes `first` and `first + 1` (a layout-only reshape).
pub fn merge_modes(t: &TensorSnapshot, first: usize) -> TensorSnapshot {
    let mut shape = t.shape.clone();
    let merged = shape[first] * shape[first + 1];
    shape.splice(first..first + 2, [merged]);
    TensorSnapshot {
        shape,
        ..t.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(shape: Vec<usize>, seed: u64) -> TensorSnapshot {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        TensorSnapshot::new("t", shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn unfold_shapes() {
        let t = random_tensor(vec![2, 3, 4], 1);
        let m = unfold(&t, &[0, 2]).unwrap();
        assert_eq!((m.rows, m.cols), (8, 3));
        let t2 = random_tensor(vec![2, 3], 2);
        let m2 = unfold(&t2, &[0]).unwrap();
        assert_eq!(m2.data, t2.values);
        assert!(unfold(&t2, &[]).is_err());
        assert!(unfold(&t2, &[0, 1]).is_err());
        assert!(matches!(unfold(&t2, &[5]), Err(EquivError::ModeOutOfRange { .. })));
    }

    #[test]
    fn unfold_entry_mapping() {
        // t[i][j][k] = 100i + 10j + k; rows over (i,k), columns over j.
        let mut values = vec![];
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    values.push((100 * i + 10 * j + k) as f64);
                }
            }
        }
        let t = TensorSnapshot::new("t", vec![2, 3, 4], values);
        let m = unfold(&t, &[2, 0]).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(1, 0), 1.0);
        assert_eq!(m.get(4, 2), 120.0);
        assert_eq!(m.get(7, 1), 113.0);
    }

    #[test]
    fn all_ones_rank_one() {
        let t = TensorSnapshot::new("t", vec![2, 2, 2], vec![1.0; 8]);
        for g in [[0].as_slice(), &[1], &[0, 2], &[1, 2]] {
            let s = singular_values(&unfold(&t, g).unwrap()).unwrap();
            assert_eq!(s.singulars.len(), 1);
            assert!((s.singulars[0] - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn set_cardinality() {
        assert_eq!(invariant_set(&random_tensor(vec![3, 4], 3)).unwrap().spectra.len(), 2);
        assert_eq!(invariant_set(&random_tensor(vec![2, 3, 4], 3)).unwrap().spectra.len(), 6);
        assert_eq!(invariant_set(&random_tensor(vec![5], 3)).unwrap().spectra.len(), 1);
        let s = invariant_set(&random_tensor(vec![3, 4], 4)).unwrap();
        assert_eq!(s.spectra[0], s.spectra[1]);
        let big = TensorSnapshot::new("t", vec![1; 9], vec![1.0]);
        assert!(matches!(invariant_set(&big), Err(EquivError::OrderCap { order: 9, .. })));
    }

    #[test]
    fn layout_permutation_equivalent() {
        // Heads-first versus tokens-first attention layout.
        let hnd = random_tensor(vec![4, 6, 8], 5);
        let nhd = permute_modes(&hnd, &[1, 0, 2]);
        let e = tensors_equivalent(&hnd, &nhd, 1e-3).unwrap();
        assert!(e.equivalent, "{e:?}");
        assert!(e.score < 1e-10);
    }

    #[test]
    fn single_perturbation_rejected() {
        let a = random_tensor(vec![4, 6, 8], 6);
        let mut b = a.clone();
        let (i, _) = b
            .values
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .unwrap();
        b.values[i] *= 1.1;
        assert!(!tensors_equivalent(&a, &b, 1e-3).unwrap().equivalent);
    }

    #[test]
    fn reshape_embeds() {
        let a = random_tensor(vec![6], 7);
        let b = TensorSnapshot::new("b", vec![2, 3], a.values.clone());
        assert!(tensors_equivalent(&a, &b, 1e-3).unwrap().equivalent);
        assert!(tensors_equivalent(&b, &a, 1e-3).unwrap().equivalent);
        let c = random_tensor(vec![2, 4, 4], 8);
        let d = merge_modes(&permute_modes(&c, &[1, 0, 2]), 0);
        assert_eq!(d.shape, vec![8, 4]);
        assert!(tensors_equivalent(&c, &d, 1e-3).unwrap().equivalent);
    }

    #[test]
    fn element_count_must_match() {
        let a = random_tensor(vec![2, 3], 9);
        let b = random_tensor(vec![2, 4], 9);
        assert!(!tensors_equivalent(&a, &b, 1.0).unwrap().equivalent);
    }

    #[test]
    fn zero_tensors_equivalent() {
        let a = TensorSnapshot::new("a", vec![2, 2], vec![0.0; 4]);
        assert!(tensors_equivalent(&a, &a, 1e-3).unwrap().equivalent);
    }

    #[test]
    fn elementwise_diff_oracle() {
        let a = TensorSnapshot::new("a", vec![3], vec![1.0, -2.0, 4.0]);
        let b = TensorSnapshot::new("b", vec![3], vec![1.003, -2.0, 4.004]);
        assert!((elementwise_rel_diff(&a, &b).unwrap() - 0.003).abs() < 1e-12);
        assert!(elementwise_rel_diff(&a, &TensorSnapshot::new("c", vec![1, 3], b.values.clone())).is_none());
    }

    #[test]
    fn bottleneck_needs_injective() {
        // Two rows both close only to column 0.
        let d = vec![vec![0.0, 5.0], vec![0.1, 7.0]];
        assert_eq!(bottleneck(&d, 2), 5.0);
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..5)
    }

    proptest! {
        #[test]
        fn frobenius_consistency(shape in shape_strategy(), seed in any::<u64>()) {
            let t = random_tensor(shape, seed);
            let f2 = t.frobenius().powi(2);
            for s in invariant_set(&t).unwrap().spectra {
                let sum: f64 = s.singulars.iter().map(|x| x * x).sum();
                prop_assert!((sum - f2).abs() <= 1e-9 * f2.max(1e-300));
            }
        }

        #[test]
        fn permutation_invariance(shape in shape_strategy(), seed in any::<u64>(), rot in 0usize..4) {
            let t = random_tensor(shape.clone(), seed);
            let r = shape.len();
            let perm: Vec<usize> = (0..r).map(|i| (i + rot) % r).collect();
            let p = permute_modes(&t, &perm);
            let e = tensors_equivalent(&t, &p, 1e-9).unwrap();
            prop_assert!(e.equivalent, "{:?}", e);
        }

        #[test]
        fn symmetric_and_monotone(seed in any::<u64>(), delta in 0.0f64..0.02, eps in 1e-5f64..1e-2) {
            let a = random_tensor(vec![3, 4, 2], seed);
            let mut b = a.clone();
            b.values[0] *= 1.0 + delta;
            let ab = tensors_equivalent(&a, &b, eps).unwrap();
            let ba = tensors_equivalent(&b, &a, eps).unwrap();
            prop_assert_eq!(ab.equivalent, ba.equivalent);
            prop_assert!(ab.score == ba.score || (ab.score - ba.score).abs() <= 1e-12 * ab.score.max(1.0));
            if ab.equivalent {
                prop_assert!(tensors_equivalent(&a, &b, eps * 1.5).unwrap().equivalent);
            }
        }

        #[test]
        fn uniform_scaling_breaks(seed in any::<u64>(), eps in 1e-4f64..1e-2, extra in 1.01f64..3.0) {
            let a = random_tensor(vec![2, 3, 3], seed);
            let delta = eps * extra;
            let b = TensorSnapshot { values: a.values.iter().map(|v| v * (1.0 + delta)).collect(), ..a.clone() };
            prop_assert!(!tensors_equivalent(&a, &b, eps).unwrap().equivalent);
        }
    }
}
