//! Waste detection over matched segment pairs and category hints.
//!
//! A pair is waste when the costlier side spends at least `1 + θ` times the
//! energy while the cheaper side is at most 1% slower and the boundary
//! outputs agree within 1%. A large ratio failing either rule is a trade-off.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnose::{diagnose_finding, SegmentSide};
use crate::energy::{same_method, EnergyError, EnergyLedger, Method};
use crate::subgraph_match::SubgraphPair;
use crate::tensor_equiv::EquivError;
use crate::trace_model::output_rel_diff as boundary_diff;
use crate::trace_model::Trace;

pub const DEFAULT_THRESHOLD: f64 = 0.10;
/// Thresholds below this are reported as informational.
pub const THRESHOLD_FLOOR: f64 = 0.05;
pub const LATENCY_TOLERANCE: f64 = 0.01;
pub const OUTPUT_TOLERANCE: f64 = 0.01;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Method(#[from] EnergyError),
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error(transparent)]
    Equiv(#[from] EquivError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Waste,
    Tradeoff,
    BelowThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Misconfiguration,
    ApiMisuse,
    Redundant,
    Unknown,
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Category::Misconfiguration => "misconfiguration",
            Category::ApiMisuse => "api_misuse",
            Category::Redundant => "redundant",
            Category::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasteFinding {
    pub pair_index: usize,
    pub nodes_a: Vec<String>,
    pub nodes_b: Vec<String>,
    pub energy_a: f64,
    pub energy_b: f64,
    pub energy_ratio: f64,
    pub latency_a_us: u64,
    pub latency_b_us: u64,
    pub output_rel_diff: f64,
    /// Higher-energy side.
    pub wasteful: Side,
    /// Energy difference for waste verdicts, zero otherwise.
    pub wasted_joules: f64,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
}

impl WasteFinding {
    pub fn efficient(&self) -> Side {
        match self.wasteful {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub threshold: f64,
    pub epsilon: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            epsilon: crate::tensor_equiv::DEFAULT_EPSILON,
        }
    }
}

/// Both traces with their ledgers.
#[derive(Clone, Copy)]
pub struct Pairing<'a> {
    pub trace_a: &'a Trace,
    pub trace_b: &'a Trace,
    pub ledger_a: &'a EnergyLedger,
    pub ledger_b: &'a EnergyLedger,
}

impl<'a> Pairing<'a> {
    fn side(&self, s: Side) -> (&'a Trace, &'a EnergyLedger) {
        match s {
            Side::A => (self.trace_a, self.ledger_a),
            Side::B => (self.trace_b, self.ledger_b),
        }
    }

    fn nodes<'f>(&self, s: Side, f: &'f WasteFinding) -> &'f [String] {
        match s {
            Side::A => &f.nodes_a,
            Side::B => &f.nodes_b,
        }
    }

    pub fn segment_side(&self, s: Side, f: &'a WasteFinding) -> SegmentSide<'a> {
        let (trace, ledger) = self.side(s);
        SegmentSide {
            trace,
            ledger: Some(ledger),
            ops: match s {
                Side::A => &f.nodes_a,
                Side::B => &f.nodes_b,
            },
        }
    }
}

/// Wall time of a segment: last member end minus first member start.
fn latency(t: &Trace, ops: &[String]) -> u64 {
    let iv: Vec<_> = ops.iter().filter_map(|id| t.op(id)).map(|o| (o.start_us, o.end_us)).collect();
    match (iv.iter().map(|x| x.0).min(), iv.iter().map(|x| x.1).max()) {
        (Some(s), Some(e)) => e - s,
        _ => 0,
    }
}

pub fn detect_waste(pairs: &[SubgraphPair], p: Pairing, cfg: DetectConfig) -> Result<Vec<WasteFinding>, DetectError> {
    same_method(p.ledger_a, p.ledger_b)?;
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(DetectError::Threshold(cfg.threshold));
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (i, sp) in pairs.iter().enumerate() {
        let energy_a = p.ledger_a.subgraph_joules(&sp.nodes_a);
        let energy_b = p.ledger_b.subgraph_joules(&sp.nodes_b);
        let latency_a_us = latency(p.trace_a, &sp.nodes_a);
        let latency_b_us = latency(p.trace_b, &sp.nodes_b);
        let wasteful = if energy_b > energy_a { Side::B } else { Side::A };
        let (hi, lo) = (energy_a.max(energy_b), energy_a.min(energy_b));
        let energy_ratio = hi / lo.max(1e-12);

        let mut output_rel_diff = 0.0f64;
        for (ta, tb) in &sp.exit {
            let d = match wasteful {
                Side::B => boundary_diff(p.trace_a, ta, p.trace_b, tb, cfg.epsilon)?,
                Side::A => boundary_diff(p.trace_b, tb, p.trace_a, ta, cfg.epsilon)?,
            };
            output_rel_diff = output_rel_diff.max(d);
        }

        let (lat_eff, lat_waste) = match wasteful {
            Side::A => (latency_b_us, latency_a_us),
            Side::B => (latency_a_us, latency_b_us),
        };
        let ratio_ok = energy_ratio >= 1.0 + cfg.threshold - 1e-12;
        let latency_ok = lat_eff as f64 <= (1.0 + LATENCY_TOLERANCE) * lat_waste as f64;
        let output_ok = output_rel_diff <= OUTPUT_TOLERANCE;
        let verdict = match (ratio_ok, latency_ok && output_ok) {
            (true, true) => Verdict::Waste,
            (true, false) => Verdict::Tradeoff,
            (false, _) => Verdict::BelowThreshold,
        };
        let mut f = WasteFinding {
            pair_index: i,
            nodes_a: sp.nodes_a.clone(),
            nodes_b: sp.nodes_b.clone(),
            energy_a,
            energy_b,
            energy_ratio,
            latency_a_us,
            latency_b_us,
            output_rel_diff,
            wasteful,
            wasted_joules: if verdict == Verdict::Waste { hi - lo } else { 0.0 },
            verdict,
            category: None,
        };
        if verdict == Verdict::Waste {
            f.category = Some(classify(&f, p));
        }
        out.push(f);
    }
    Ok(out)
}

fn multiset<I: IntoIterator<Item = String>>(items: I) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in items {
        *m.entry(s).or_insert(0) += 1;
    }
    m
}

fn strict_superset(big: &BTreeMap<String, usize>, small: &BTreeMap<String, usize>) -> bool {
    big != small && small.iter().all(|(k, n)| big.get(k).is_some_and(|m| m >= n))
}

fn op_names(t: &Trace, ops: &[String]) -> BTreeMap<String, usize> {
    multiset(ops.iter().filter_map(|id| t.op(id)).map(|o| o.op_name.clone()))
}

fn kernel_names(t: &Trace, ops: &[String]) -> BTreeMap<String, usize> {
    multiset(
        ops.iter()
            .filter_map(|id| t.op(id))
            .flat_map(|o| t.op_kernels(o))
            .map(|k| k.kernel_name.clone()),
    )
}

/// Category hint for a waste finding.
pub fn classify(f: &WasteFinding, p: Pairing) -> Category {
    let (ws, es) = (f.wasteful, f.efficient());
    let (tw, lw) = p.side(ws);
    let (te, le) = p.side(es);
    let (nw, ne) = (p.nodes(ws, f), p.nodes(es, f));

    let kw = kernel_names(tw, nw);
    let ke = kernel_names(te, ne);
    let forced_w = lw.subgraph_forced_gap_joules(nw);
    let forced_e = le.subgraph_forced_gap_joules(ne);
    let delta = (lw.subgraph_joules(nw) - le.subgraph_joules(ne)).abs();
    // Forced gaps count when they explain a tenth of the excess or more.
    let forced = forced_w - forced_e > 0.0 && forced_w - forced_e >= 0.1 * delta;
    if strict_superset(&op_names(tw, nw), &op_names(te, ne)) || strict_superset(&kw, &ke) || forced {
        return Category::Redundant;
    }
    if let Ok(report) = diagnose_finding(f, p) {
        if report.primary_source.is_some() {
            return Category::Misconfiguration;
        }
    }
    if kw != ke {
        return Category::ApiMisuse;
    }
    Category::Unknown
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub schema_version: u32,
    pub threshold: f64,
    /// Threshold below the recommended floor.
    pub informational: bool,
    pub method: Method,
    /// Waste findings by wasted joules descending, then the rest by pair index.
    pub findings: Vec<WasteFinding>,
    pub total_joules_a: f64,
    pub total_joules_b: f64,
    pub total_wasted_joules: f64,
    /// Wasted joules over the total energy of the costlier trace.
    pub end_to_end_waste_fraction: f64,
}

impl DetectionReport {
    pub fn waste(&self) -> impl Iterator<Item = &WasteFinding> {
        self.findings.iter().filter(|f| f.verdict == Verdict::Waste)
    }

    pub fn has_waste(&self) -> bool {
        self.waste().next().is_some()
    }
}

pub fn report(mut findings: Vec<WasteFinding>, threshold: f64, la: &EnergyLedger, lb: &EnergyLedger) -> DetectionReport {
    findings.sort_by(|x, y| {
        let wx = x.verdict == Verdict::Waste;
        let wy = y.verdict == Verdict::Waste;
        wy.cmp(&wx)
            .then_with(|| y.wasted_joules.total_cmp(&x.wasted_joules))
            .then_with(|| x.pair_index.cmp(&y.pair_index))
    });
    let total_wasted_joules: f64 = findings.iter().map(|f| f.wasted_joules).sum();
    let denom = la.total_joules.max(lb.total_joules);
    DetectionReport {
        schema_version: REPORT_SCHEMA_VERSION,
        threshold,
        informational: threshold < THRESHOLD_FLOOR,
        method: la.method,
        findings,
        total_joules_a: la.total_joules,
        total_joules_b: lb.total_joules,
        total_wasted_joules,
        end_to_end_waste_fraction: if denom > 0.0 { total_wasted_joules / denom } else { 0.0 },
    }
}

/// Human-readable summary, one line per waste finding.
pub fn summary(r: &DetectionReport) -> String {
    let mut s = String::new();
    let n = r.waste().count();
    let _ = writeln!(
        s,
        "{n} waste finding(s) at threshold {:.2}{}; {:.3} J wasted, {:.2}% end to end",
        r.threshold,
        if r.informational { " (informational)" } else { "" },
        r.total_wasted_joules,
        100.0 * r.end_to_end_waste_fraction
    );
    for f in r.waste() {
        let _ = writeln!(
            s,
            "  pair {:>3}: {:.4} J vs {:.4} J (x{:.3}), {:?} wastes {:.4} J [{}]",
            f.pair_index,
            f.energy_a,
            f.energy_b,
            f.energy_ratio,
            f.wasteful,
            f.wasted_joules,
            f.category.unwrap_or(Category::Unknown)
        );
    }
    let tradeoffs = r.findings.iter().filter(|f| f.verdict == Verdict::Tradeoff).count();
    if tradeoffs > 0 {
        let _ = writeln!(s, "  {tradeoffs} performance-energy trade-off(s) not counted as waste");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{compute_ledger, EnergyConfig};
    use crate::trace_model::*;

    /// One operator `o` with one kernel of `dur` µs at `watts`, output `y`.
    fn single(dur: u64, watts: f64, kernel: &str, output: Vec<f64>) -> Trace {
        let recs = vec![
            Record::Header(Header {
                schema_version: SCHEMA_VERSION,
                system: "s".into(),
                workload: "w".into(),
                seed: 0,
                sampler: None,
            }),
            Record::Tensor(TensorSnapshot::new("x", vec![2], vec![1.0, 2.0])),
            Record::Tensor(TensorSnapshot::new("y", vec![2], output)),
            Record::Op(OperatorEvent {
                op_id: "o".into(),
                op_name: "f".into(),
                input_tensor_ids: vec!["x".into()],
                output_tensor_ids: vec!["y".into()],
                kernel_ids: vec!["k".into()],
                start_us: 0,
                end_us: dur,
            }),
            Record::Kernel(KernelEvent {
                kernel_id: "k".into(),
                kernel_name: kernel.into(),
                correlation_id: 1,
                start_us: 0,
                end_us: dur,
                backtrace: vec!["main".into(), kernel.into()],
                params: Default::default(),
            }),
            Record::Power(PowerRecord::Segment(PowerSegment {
                start_us: 0,
                end_us: dur,
                watts,
            })),
        ];
        Trace::from_records(recs).unwrap()
    }

    fn run(a: &Trace, b: &Trace, theta: f64) -> Vec<WasteFinding> {
        let la = compute_ledger(a, &EnergyConfig::default()).unwrap();
        let lb = compute_ledger(b, &EnergyConfig::default()).unwrap();
        let pair = SubgraphPair {
            nodes_a: vec!["o".into()],
            nodes_b: vec!["o".into()],
            entry: vec![("x".into(), "x".into())],
            exit: vec![("y".into(), "y".into())],
            depth: 1,
            coarse: false,
        };
        let p = Pairing {
            trace_a: a,
            trace_b: b,
            ledger_a: &la,
            ledger_b: &lb,
        };
        detect_waste(&[pair], p, DetectConfig { threshold: theta, epsilon: 1e-3 }).unwrap()
    }

    #[test]
    fn ten_percent_is_waste() {
        let a = single(1_000_000, 110.0, "k1", vec![1.0, 2.0]);
        let b = single(1_000_000, 100.0, "k2", vec![1.0, 2.0]);
        let f = &run(&a, &b, 0.10)[0];
        assert_eq!(f.verdict, Verdict::Waste);
        assert_eq!(f.wasteful, Side::A);
        assert!((f.wasted_joules - 10.0).abs() < 1e-9);
        assert_eq!(f.category, Some(Category::ApiMisuse));
    }

    #[test]
    fn four_percent_depends_on_threshold() {
        let a = single(1_000_000, 104.0, "k", vec![1.0, 2.0]);
        let b = single(1_000_000, 100.0, "k", vec![1.0, 2.0]);
        assert_eq!(run(&a, &b, 0.10)[0].verdict, Verdict::BelowThreshold);
        let f = &run(&a, &b, 0.04)[0];
        assert_eq!(f.verdict, Verdict::Waste);
        assert_eq!(f.category, Some(Category::Unknown));
    }

    #[test]
    fn slower_cheap_side_is_tradeoff() {
        // B uses less energy but takes 3% longer.
        let a = single(1_000_000, 150.0, "k", vec![1.0, 2.0]);
        let b = single(1_030_000, 100.0, "k", vec![1.0, 2.0]);
        assert_eq!(run(&a, &b, 0.10)[0].verdict, Verdict::Tradeoff);
    }

    #[test]
    fn diverging_outputs_are_tradeoff() {
        let a = single(1_000_000, 150.0, "k", vec![1.0, 2.0]);
        let b = single(1_000_000, 100.0, "k", vec![1.05, 2.0]);
        let f = &run(&a, &b, 0.10)[0];
        assert!((f.output_rel_diff - 0.05 / 1.05).abs() < 1e-9);
        assert_eq!(f.verdict, Verdict::Tradeoff);
    }

    #[test]
    fn symmetric_under_swap() {
        let a = single(1_000_000, 130.0, "k1", vec![1.0, 2.0]);
        let b = single(1_000_000, 100.0, "k2", vec![1.002, 2.0]);
        let ab = &run(&a, &b, 0.10)[0];
        let ba = &run(&b, &a, 0.10)[0];
        assert_eq!(ab.verdict, ba.verdict);
        assert_eq!(ab.category, ba.category);
        assert_eq!(ab.wasteful, Side::A);
        assert_eq!(ba.wasteful, Side::B);
        assert_eq!(ab.output_rel_diff, ba.output_rel_diff);
    }

    #[test]
    fn identical_traces_no_waste() {
        let a = single(1_000_000, 100.0, "k", vec![1.0, 2.0]);
        for theta in [0.01, 0.05, 0.1, 1.0] {
            assert_eq!(run(&a, &a, theta)[0].verdict, Verdict::BelowThreshold);
        }
    }

    #[test]
    fn report_ranks_and_sums() {
        let mk = |i: usize, w: f64| WasteFinding {
            pair_index: i,
            nodes_a: vec![],
            nodes_b: vec![],
            energy_a: 0.0,
            energy_b: 0.0,
            energy_ratio: 2.0,
            latency_a_us: 0,
            latency_b_us: 0,
            output_rel_diff: 0.0,
            wasteful: Side::B,
            wasted_joules: w,
            verdict: Verdict::Waste,
            category: Some(Category::Unknown),
        };
        let a = single(1_000_000, 100.0, "k", vec![1.0, 2.0]);
        let l = compute_ledger(&a, &EnergyConfig::default()).unwrap();
        let r = report(vec![mk(0, 1.0), mk(1, 5.0)], 0.1, &l, &l);
        assert_eq!(r.findings.iter().map(|f| f.wasted_joules).collect::<Vec<_>>(), vec![5.0, 1.0]);
        assert!((r.end_to_end_waste_fraction - 0.06).abs() < 1e-12);
        let empty = report(vec![], 0.04, &l, &l);
        assert_eq!(empty.total_wasted_joules, 0.0);
        assert!(empty.informational);
        assert!(summary(&empty).starts_with("0 waste"));
    }
}
