//! End-to-end acceptance criteria. Runs as a plain binary so each criterion
//! prints its PASS/FAIL line regardless of output capture.

use std::collections::{BTreeSet, VecDeque};
use std::time::{Duration, Instant};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffwatt::{analyze_scenario, sampler_fidelity, selfcheck, Analysis, RunConfig};
use diffwatt_core::detect::Verdict;
use diffwatt_core::diagnose::diagnose_finding;
use diffwatt_core::graph::{dominators, CompGraph, OpSpec};
use diffwatt_core::simulate::{fuzz, fuzz_null, generate, preset, InjectionKind, Scenario, ScenarioManifest};
use diffwatt_core::subgraph_match::{recursive_match, TensorPairSet};
use diffwatt_core::tensor_equiv::{invariant_set, merge_modes, permute_modes, singular_values, tensors_equivalent, Matrix};
use diffwatt_core::trace_model::TensorSnapshot;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- tensors

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorSnapshot {
    let n = shape.iter().product();
    TensorSnapshot::new("t", shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_perm(rng: &mut ChaCha8Rng, r: usize) -> Vec<usize> {
    loop {
        let mut p: Vec<usize> = (0..r).collect();
        p.shuffle(rng);
        if p.iter().enumerate().any(|(i, &x)| i != x) || r == 1 {
            return p;
        }
    }
}

fn c1_tensor_f1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut corpus = Vec::with_capacity(500);
    for k in 0..500 {
        let r = rng.random_range(2..=4);
        let shape: Vec<usize> = (0..r).map(|_| rng.random_range(2..=5)).collect();
        let a = random_tensor(&mut rng, shape);
        let b = if k % 2 == 0 {
            match rng.random_range(0..3) {
                0 => permute_modes(&a, &random_perm(&mut rng, r)),
                1 => merge_modes(&a, rng.random_range(0..r - 1)),
                _ => merge_modes(&permute_modes(&a, &random_perm(&mut rng, r)), rng.random_range(0..r - 1)),
            }
        } else if k % 4 == 1 {
            let mut p = permute_modes(&a, &random_perm(&mut rng, r));
            for v in &mut p.values {
                *v *= 1.0 + rng.random_range(-0.1..0.1);
            }
            p
        } else {
            random_tensor(&mut rng, a.shape.clone())
        };
        corpus.push((a, b, k % 2 == 0));
    }
    let mut f1s = Vec::new();
    for eps in [1e-4, 1e-3, 1e-2] {
        let (mut tp, mut fp, mut fneg) = (0, 0, 0);
        for (a, b, truth) in &corpus {
            let got = tensors_equivalent(a, b, eps).map_err(|e| e.to_string())?.equivalent;
            match (got, *truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        f1s.push(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
    }
    let dt = t0.elapsed();
    let detail = format!(
        "F1 at 1e-4/1e-3/1e-2 = {:.3}/{:.3}/{:.3}, {:.2?}",
        f1s[0], f1s[1], f1s[2], dt
    );
    ensure(f1s[1] >= 0.95 && f1s.iter().all(|&f| f >= 0.8) && dt < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotation.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn gram_singulars(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = (m.rows, m.cols);
    let k = rows.min(cols);
    let g: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if rows <= cols {
                        (0..cols).map(|c| m.get(i, c) * m.get(j, c)).sum()
                    } else {
                        (0..rows).map(|r| m.get(r, i) * m.get(r, j)).sum()
                    }
                })
                .collect()
        })
        .collect();
    let mut s: Vec<f64> = jacobi_eigen(g).into_iter().map(|l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn c2_svd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let (r, c) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let m = Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = singular_values(&m).map_err(|e| e.to_string())?.singulars;
        let want = gram_singulars(&m);
        ensure(got.len() == want.len(), || format!("matrix {k}: {} vs {} values", got.len(), want.len()))?;
        let top = want[0];
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs() / top);
        }
    }
    ensure(worst <= 1e-7, || format!("max relative singular value error {worst:.2e}"))?;
    let mut frob: f64 = 0.0;
    for _ in 0..100 {
        let r = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..r).map(|_| rng.random_range(1..=5)).collect();
        let t = random_tensor(&mut rng, shape);
        let f = t.frobenius();
        for s in invariant_set(&t).map_err(|e| e.to_string())?.spectra {
            frob = frob.max((s.norm() - f).abs() / f);
        }
    }
    ensure(frob <= 1e-9, || format!("Frobenius inconsistency {frob:.2e}"))?;
    Ok(format!("singular values within {worst:.1e} of the Gram oracle, unfolding norms within {frob:.1e}"))
}

// ---------------------------------------------------------------- graphs

/// Brute force: `u` dominates `v` when `v` is unreachable from SOURCE once `u` is removed.
fn dominates_bf(g: &CompGraph, u: usize, v: usize) -> bool {
    if u == v {
        return true;
    }
    if u == g.source() {
        return true;
    }
    let mut seen = vec![false; g.len()];
    seen[g.source()] = true;
    let mut q = VecDeque::from([g.source()]);
    while let Some(x) = q.pop_front() {
        for &y in g.succ(x) {
            if y != u && !seen[y] {
                seen[y] = true;
                q.push_back(y);
            }
        }
    }
    !seen[v]
}

fn random_dag(rng: &mut ChaCha8Rng, n: usize) -> Vec<OpSpec> {
    let mut tensors = vec!["x".to_string()];
    let mut ops = Vec::new();
    for i in 0..n {
        let k = rng.random_range(1..=tensors.len().min(3));
        let ins: BTreeSet<&String> = (0..k).map(|_| tensors.choose(rng).unwrap()).collect();
        let ins: Vec<&str> = ins.into_iter().map(|s| s.as_str()).collect();
        let out = format!("t{i}");
        ops.push(OpSpec::new(&format!("op{i}"), "f", &ins, &[&out]));
        tensors.push(out);
    }
    ops
}

struct BlockGraph {
    ops: Vec<OpSpec>,
    internals: Vec<String>,
}

/// One side of a block-structured pair. Block `k` maps shared tensor `c{k}` to
/// `c{k+1}`; `skip` is the chance an op also reads an older block boundary.
fn block_side(rng: &mut ChaCha8Rng, side: &str, sizes: &[usize], skip: f64, fan_in: usize) -> BlockGraph {
    let mut ops = Vec::new();
    let mut internals = Vec::new();
    let boundary = |k: usize| if k == 0 { "x".to_string() } else { format!("c{k}") };
    for (k, &m) in sizes.iter().enumerate() {
        let mut avail = vec![boundary(k)];
        let mut consumed = BTreeSet::new();
        for j in 0..m {
            let mut ins = BTreeSet::new();
            if j == 0 {
                ins.insert(boundary(k));
            } else {
                for _ in 0..rng.random_range(1..=fan_in) {
                    ins.insert(avail.choose(rng).unwrap().clone());
                }
            }
            if k > 0 && rng.random_bool(skip) {
                ins.insert(boundary(rng.random_range(0..k)));
            }
            let out = if j + 1 == m {
                for t in &avail[1..] {
                    if !consumed.contains(t) {
                        ins.insert(t.clone());
                    }
                }
                if k + 1 == sizes.len() {
                    "y".to_string()
                } else {
                    boundary(k + 1)
                }
            } else {
                format!("{side}{k}_{j}")
            };
            consumed.extend(ins.iter().cloned());
            let ins: Vec<&str> = ins.iter().map(|s| s.as_str()).collect();
            ops.push(OpSpec::new(&format!("{side}{k}.{j}"), "f", &ins, &[&out]));
            if j + 1 < m {
                internals.push(out.clone());
                avail.push(out);
            }
        }
    }
    BlockGraph { ops, internals }
}

fn split_sizes(rng: &mut ChaCha8Rng, blocks: usize, budget: usize) -> Vec<usize> {
    let mut sizes = vec![1; blocks];
    for _ in blocks..budget {
        let k = rng.random_range(0..blocks);
        sizes[k] += 1;
    }
    sizes
}

struct GraphPair {
    ga: CompGraph,
    gb: CompGraph,
    eq: TensorPairSet,
}

fn random_pair(rng: &mut ChaCha8Rng) -> GraphPair {
    let blocks = rng.random_range(1..=4);
    let (na, nb) = (rng.random_range(blocks..=12), rng.random_range(blocks..=12));
    let sa = split_sizes(rng, blocks, na);
    let sb = split_sizes(rng, blocks, nb);
    let a = block_side(rng, "a", &sa, 0.1, 2);
    let b = block_side(rng, "b", &sb, 0.1, 2);
    let mut ids: Vec<(String, String)> = vec![("x".into(), "x".into()), ("y".into(), "y".into())];
    ids.extend((1..blocks).map(|k| (format!("c{k}"), format!("c{k}"))));
    // Extra interior pairs, possibly out of order, give crossing candidates.
    let (mut ia, mut ib) = (a.internals.clone(), b.internals.clone());
    ia.shuffle(rng);
    ib.shuffle(rng);
    let extra = rng.random_range(0..=4).min(ia.len()).min(ib.len());
    ids.extend(ia.into_iter().zip(ib).take(extra));
    GraphPair {
        ga: CompGraph::from_ops(&a.ops).expect("generated ops are well formed"),
        gb: CompGraph::from_ops(&b.ops).expect("generated ops are well formed"),
        eq: TensorPairSet::from_ids(&ids),
    }
}

/// Finest partition by enumerating every chain of cut candidates.
fn partition_oracle(p: &GraphPair) -> Vec<(BTreeSet<String>, BTreeSet<String>)> {
    let (ga, gb) = (&p.ga, &p.gb);
    let on_path = |g: &CompGraph, v: usize| v != g.source() && v != g.sink() && dominates_bf(g, v, g.sink());
    let depth = |g: &CompGraph, v: usize| (0..g.len()).filter(|&u| dominates_bf(g, u, v)).count();
    let is_cut = |a: usize, b: usize| {
        let (oa, ob) = (ga.out(a), gb.out(b));
        !oa.is_empty()
            && oa.len() == ob.len()
            && oa.iter().all(|t| p.eq.partner_of_a(t).is_some_and(|x| ob.iter().any(|y| y == x)))
    };
    let mut cands: Vec<(usize, usize, usize, usize)> = Vec::new();
    for a in (0..ga.len()).filter(|&v| on_path(ga, v)) {
        for b in (0..gb.len()).filter(|&v| on_path(gb, v)) {
            if is_cut(a, b) {
                cands.push((depth(ga, a), depth(gb, b), a, b));
            }
        }
    }
    cands.sort();
    assert!(cands.len() <= 20, "oracle enumeration too large");
    let mut best: Option<Vec<usize>> = None;
    for mask in 0u32..1 << cands.len() {
        let chosen: Vec<usize> = (0..cands.len()).filter(|&k| mask & (1 << k) != 0).collect();
        let chain = chosen.windows(2).all(|w| cands[w[1]].0 > cands[w[0]].0 && cands[w[1]].1 > cands[w[0]].1);
        if !chain {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => chosen.len() > b.len() || (chosen.len() == b.len() && chosen < *b),
        };
        if better {
            best = Some(chosen);
        }
    }
    let mut cuts = vec![(ga.source(), gb.source())];
    cuts.extend(best.unwrap_or_default().into_iter().map(|k| (cands[k].2, cands[k].3)));
    cuts.push((ga.sink(), gb.sink()));
    let members = |g: &CompGraph, from: usize, to: usize| -> BTreeSet<String> {
        (0..g.len())
            .filter(|&v| !g.is_virtual(v) && v != from && dominates_bf(g, from, v) && !(v != to && dominates_bf(g, to, v)))
            .map(|v| g.nodes[v].id.clone())
            .collect()
    };
    cuts.windows(2)
        .map(|w| (members(ga, w[0].0, w[1].0), members(gb, w[0].1, w[1].1)))
        .filter(|(a, b)| !a.is_empty() || !b.is_empty())
        .collect()
}

fn c3_partition_and_dominators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut segments = 0;
    let mut crossings = 0;
    for k in 0..100 {
        let p = random_pair(&mut rng);
        ensure(p.ga.op_count() <= 12 && p.gb.op_count() <= 12, || format!("pair {k} too large"))?;
        let want = partition_oracle(&p);
        let m = recursive_match(&p.ga, &p.gb, &p.eq).map_err(|e| format!("pair {k}: {e}"))?;
        let got: Vec<(BTreeSet<String>, BTreeSet<String>)> = m
            .pairs
            .iter()
            .map(|s| (s.nodes_a.iter().cloned().collect(), s.nodes_b.iter().cloned().collect()))
            .collect();
        ensure(got == want, || format!("pair {k}: got {got:?}, oracle {want:?}"))?;
        segments += got.len();
        crossings += m.dropped_crossings.len();
    }
    for k in 0..100 {
        let n = rng.random_range(1..=13);
        let g = CompGraph::from_ops(&random_dag(&mut rng, n)).map_err(|e| e.to_string())?;
        let d = dominators(&g);
        for u in 0..g.len() {
            for v in 0..g.len() {
                ensure(d.dominates(u, v) == dominates_bf(&g, u, v), || format!("dag {k}: dominance of {u} over {v}"))?;
            }
        }
        let path: Vec<usize> = g.topo_order().iter().copied().filter(|&v| dominates_bf(&g, v, g.sink())).collect();
        ensure(d.dom_path == path, || format!("dag {k}: dominator path {:?} vs {path:?}", d.dom_path))?;
    }
    Ok(format!(
        "100 pairs match the exhaustive partition ({segments} segments, {crossings} crossings dropped), 100 DAGs match remove-and-test dominance"
    ))
}

fn large_pair(rng: &mut ChaCha8Rng, nodes: usize, cuts: usize) -> GraphPair {
    let sa = split_sizes(rng, cuts + 1, nodes);
    let sb = split_sizes(rng, cuts + 1, nodes);
    let a = block_side(rng, "a", &sa, 0.0, 3);
    let b = block_side(rng, "b", &sb, 0.0, 3);
    let mut ids: Vec<(String, String)> = vec![("x".into(), "x".into()), ("y".into(), "y".into())];
    ids.extend((1..=cuts).map(|k| (format!("c{k}"), format!("c{k}"))));
    GraphPair {
        ga: CompGraph::from_ops(&a.ops).expect("well formed"),
        gb: CompGraph::from_ops(&b.ops).expect("well formed"),
        eq: TensorPairSet::from_ids(&ids),
    }
}

fn c4_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut times = Vec::new();
    for nodes in [750, 1500] {
        let p = large_pair(&mut rng, nodes, 70);
        let mut best = Duration::MAX;
        let mut pairs = 0;
        for _ in 0..5 {
            let t0 = Instant::now();
            let m = recursive_match(&p.ga, &p.gb, &p.eq).map_err(|e| e.to_string())?;
            best = best.min(t0.elapsed());
            pairs = m.pairs.len();
        }
        ensure(pairs == 71, || format!("{nodes} nodes: {pairs} segment pairs, expected 71"))?;
        ensure(best < Duration::from_secs(10), || format!("{nodes} nodes took {best:?}"))?;
        times.push(best);
    }
    let ratio = times[1].as_secs_f64() / times[0].as_secs_f64();
    let detail = format!("750 nodes {:?}, 1500 nodes {:?}, ratio {ratio:.2}", times[0], times[1]);
    ensure(ratio <= 6.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- energy

fn c5_sampler() -> Outcome {
    let s = generate(&preset("sampler-demo").unwrap()).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..20).collect();
    let rows = sampler_fidelity(&s.trace_a, 40_000, 200_000, 1000, &seeds).map_err(|e| format!("{e:#}"))?;
    let direct = rows.iter().map(|r| r.sampled_abs_error).fold(0.0, f64::max);
    let replay = rows.iter().map(|r| r.replay_abs_error).fold(0.0, f64::max);
    let detail = format!("worst direct error {:.1}%, worst replay error {:.2}%", 100.0 * direct, 100.0 * replay);
    ensure(direct >= 0.5 && replay <= 0.05, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- detection

fn run(s: &Scenario, threshold: f64) -> Result<Analysis, String> {
    let cfg = RunConfig {
        threshold,
        ..RunConfig::default()
    };
    analyze_scenario(s, &cfg).map_err(|e| format!("{}: {e:#}", s.manifest.workload))
}

fn corpus() -> Result<(Vec<Scenario>, Vec<Scenario>), String> {
    let gen = |m: &ScenarioManifest| generate(m).map_err(|e| e.to_string());
    let injected = fuzz(6, 50).iter().map(gen).collect::<Result<Vec<_>, _>>();
    let null = fuzz_null(6, 10).iter().map(gen).collect::<Result<Vec<_>, _>>();
    Ok((injected?, null?))
}

fn c6_detection(injected: &[Scenario], null: &[Scenario]) -> Outcome {
    let (mut strong, mut hit, mut weak_hit, mut fp) = (0, 0, 0, 0);
    let mut worst: f64 = 0.0;
    for s in injected.iter().chain(null) {
        let an = run(s, 0.10)?;
        for f in an.detection.waste() {
            let seg = s.truth.segment_of(&f.nodes_a, &f.nodes_b);
            match (&s.truth.injected, seg) {
                (Some(inj), Some(k)) if k == inj.segment => {
                    worst = worst.max((f.wasted_joules / inj.wasted_joules - 1.0).abs());
                    if inj.magnitude >= 0.12 {
                        hit += 1;
                    } else {
                        weak_hit += 1;
                    }
                }
                _ => fp += 1,
            }
        }
        if s.truth.injected.as_ref().is_some_and(|i| i.magnitude >= 0.12) {
            strong += 1;
        }
    }
    let detail = format!(
        "{hit}/{strong} injections of magnitude >= 0.12 flagged, {weak_hit} weaker ones flagged, {fp} false positives, worst wasted-energy error {:.2}%",
        100.0 * worst
    );
    ensure(hit == strong && fp == 0 && worst <= 0.05, || detail.clone())?;
    Ok(detail)
}

fn c7_diagnosis(injected: &[Scenario]) -> Outcome {
    let mut counts = [0usize; 3];
    for s in injected {
        let inj = s.truth.injected.as_ref().unwrap();
        // A low threshold so that every injection yields a finding to diagnose.
        let an = run(s, 0.01)?;
        let f = an
            .detection
            .waste()
            .find(|f| s.truth.segment_of(&f.nodes_a, &f.nodes_b) == Some(inj.segment))
            .ok_or_else(|| format!("{}: injected segment not flagged", s.manifest.workload))?;
        let p = diffwatt_core::detect::Pairing {
            trace_a: &s.trace_a,
            trace_b: &s.trace_b,
            ledger_a: &an.ledger_a,
            ledger_b: &an.ledger_b,
        };
        let d = diagnose_finding(f, p).map_err(|e| format!("{}: {e}", s.manifest.workload))?;
        let w = &s.manifest.workload;
        match inj.kind {
            InjectionKind::Misconfiguration => {
                ensure(d.primary_source == inj.source, || format!("{w}: source {:?}, expected {:?}", d.primary_source, inj.source))?;
                counts[0] += 1;
            }
            InjectionKind::ApiMisuse => {
                let api = d.api_misuse.as_ref().ok_or_else(|| format!("{w}: no api misuse reported"))?;
                let sorted = |v: &[String]| {
                    let mut v = v.to_vec();
                    v.sort();
                    v
                };
                ensure(
                    sorted(&api.efficient_kernels) == inj.kernels_a && sorted(&api.wasteful_kernels) == inj.kernels_b,
                    || format!("{w}: kernels {:?} / {:?}", api.efficient_kernels, api.wasteful_kernels),
                )?;
                counts[1] += 1;
            }
            InjectionKind::Redundant => {
                ensure(d.extra_kernel_names() == inj.extra_kernels, || format!("{w}: extra kernels {:?}", d.extra_kernel_names()))?;
                counts[2] += 1;
            }
        }
    }
    Ok(format!(
        "{} misconfiguration sources, {} API misuse kernel sets, {} redundant kernel lists all correct",
        counts[0], counts[1], counts[2]
    ))
}

fn c8_selfcheck() -> Outcome {
    let r = selfcheck();
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("failed checks: {failed:?}"))?;
    Ok(format!("{} checks in {:.2?}", r.checks.len(), r.elapsed))
}

fn c9_null(null: &[Scenario]) -> Outcome {
    let mut scenarios: Vec<&Scenario> = null.iter().collect();
    let presets: Vec<Scenario> = ["attn-ffn", "gpt2-like", "null", "sampler-demo"]
        .iter()
        .map(|n| generate(&preset(n).unwrap()).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    scenarios.extend(&presets);
    let mut flagged = Vec::new();
    let mut largest: f64 = 0.0;
    for s in &scenarios {
        let an = run(s, 0.05)?;
        for f in &an.detection.findings {
            if f.verdict == Verdict::Waste {
                flagged.push(s.manifest.workload.clone());
            }
            largest = largest.max(f.energy_ratio);
        }
    }
    let detail = format!("{} null scenarios, {} false positives, largest ratio {largest:.4}", scenarios.len(), flagged.len());
    ensure(flagged.is_empty(), || format!("{detail}: {flagged:?}"))?;
    Ok(detail)
}

fn main() {
    let mut failures = 0;
    let mut report = |n: u32, name: &str, out: Outcome| {
        match out {
            Ok(d) => println!("criterion {n} PASS {name}: {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {n} FAIL {name}: {d}");
            }
        }
    };
    report(1, "tensor equivalence F1", c1_tensor_f1());
    report(2, "singular values and unfolding norms", c2_svd());
    report(3, "finest partition and dominators", c3_partition_and_dominators());
    report(4, "matching scales to large graphs", c4_scaling());
    report(5, "replay beats direct sampling", c5_sampler());
    match corpus() {
        Ok((injected, null)) => {
            report(6, "detection against ground truth", c6_detection(&injected, &null));
            report(7, "diagnosis of injected causes", c7_diagnosis(&injected));
            report(8, "selfcheck", c8_selfcheck());
            report(9, "no false positives at 5%", c9_null(&null));
        }
        Err(e) => {
            for (n, name) in [(6, "detection"), (7, "diagnosis")] {
                report(n, name, Err(e.clone()));
            }
            report(8, "selfcheck", c8_selfcheck());
            report(9, "no false positives at 5%", Err(e));
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
