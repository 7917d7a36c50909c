//! Energy attribution to kernels, operators and subgraphs.
//!
//! Intra-operator gaps between kernels are charged to the operator; time
//! outside every operator goes to an `idle` pseudo-operator.

mod signal;

pub use signal::{integrate, sample_signal, truth_at, PowerSignal, MAX_PERIOD_US, MIN_PERIOD_US};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::trace_model::{PowerSegment, SamplerDescriptor, Trace};
use signal::{check_period, integrate_samples, integrate_truth, sample_points, UJ};

pub const DEFAULT_PERIOD_US: u64 = 40_000;
pub const DEFAULT_DELAY_US: u64 = 200_000;
pub const DEFAULT_REPEAT: u32 = 1000;
/// Fraction of the replay window discarded at each end.
pub const REPLAY_MARGIN: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnergyError {
    #[error("power signal is empty")]
    EmptySignal,
    #[error("interval [{start_us}, {end_us}] lies outside the signal span {span:?}")]
    OutsideSpan { start_us: u64, end_us: u64, span: (u64, u64) },
    #[error("sampler period {0} us outside [1000, 1000000]")]
    Period(u64),
    #[error("trace carries no ground-truth power segments")]
    NoGroundTruth,
    #[error("operator `{0}` launched no kernels")]
    ZeroKernels(String),
    #[error("unknown operator `{0}`")]
    UnknownOp(String),
    #[error("replay repeat count must be at least 1")]
    Repeat,
    #[error("ledgers use different methods ({0} vs {1})")]
    MethodMismatch(Method, Method),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GroundTruth,
    Sampled,
    Replay,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GroundTruth => "ground_truth",
            Method::Sampled => "sampled",
            Method::Replay => "replay",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ground_truth" => Ok(Method::GroundTruth),
            "sampled" => Ok(Method::Sampled),
            "replay" => Ok(Method::Replay),
            other => Err(format!("unknown energy method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyConfig {
    pub method: Method,
    pub period_us: u64,
    pub delay_us: u64,
    pub repeat: u32,
    pub seed: u64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            method: Method::GroundTruth,
            period_us: DEFAULT_PERIOD_US,
            delay_us: DEFAULT_DELAY_US,
            repeat: DEFAULT_REPEAT,
            seed: 0,
        }
    }
}

impl EnergyConfig {
    fn sampler(&self) -> SamplerDescriptor {
        SamplerDescriptor {
            period_us: self.period_us,
            delay_us: self.delay_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelEnergy {
    pub kernel_id: String,
    pub op_id: String,
    pub joules: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpEnergy {
    pub op_id: String,
    pub op_name: String,
    pub start_us: u64,
    pub end_us: u64,
    pub kernel_joules: f64,
    /// Energy of the gaps between this operator's kernels.
    pub gap_joules: f64,
    /// Gap energy above what the device would draw idle over the same time.
    pub forced_gap_joules: f64,
    pub joules: f64,
}

impl OpEnergy {
    pub fn watts(&self) -> f64 {
        let d = self.end_us.saturating_sub(self.start_us);
        if d == 0 {
            0.0
        } else {
            self.joules / (d as f64 * UJ)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub method: Method,
    pub kernels: Vec<KernelEnergy>,
    pub ops: Vec<OpEnergy>,
    pub idle_watts: f64,
    /// Energy outside every operator interval.
    pub idle_joules: f64,
    pub total_joules: f64,
    #[serde(skip)]
    op_index: HashMap<String, usize>,
}

impl EnergyLedger {
    pub fn op(&self, op_id: &str) -> Option<&OpEnergy> {
        self.op_index.get(op_id).map(|&i| &self.ops[i])
    }

    /// Sum over member operators.
    pub fn subgraph_joules<S: AsRef<str>>(&self, op_ids: &[S]) -> f64 {
        op_ids.iter().filter_map(|id| self.op(id.as_ref())).map(|o| o.joules).sum()
    }

    pub fn subgraph_forced_gap_joules<S: AsRef<str>>(&self, op_ids: &[S]) -> f64 {
        op_ids
            .iter()
            .filter_map(|id| self.op(id.as_ref()))
            .map(|o| o.forced_gap_joules)
            .sum()
    }
}

/// Sorted, merged union of intervals.
fn union(mut iv: Vec<(u64, u64)>) -> Vec<(u64, u64)> {
    iv.sort_unstable();
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (s, e) in iv {
        match out.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// `outer` minus the union `holes`, both within one interval.
fn complement(outer: (u64, u64), holes: &[(u64, u64)]) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut cur = outer.0;
    for &(s, e) in holes {
        let (s, e) = (s.max(outer.0), e.min(outer.1));
        if s >= e {
            continue;
        }
        if s > cur {
            out.push((cur, s));
        }
        cur = cur.max(e);
    }
    if cur < outer.1 {
        out.push((cur, outer.1));
    }
    out
}

fn trace_span(t: &Trace) -> (u64, u64) {
    let mut lo = u64::MAX;
    let mut hi = 0;
    for o in &t.ops {
        lo = lo.min(o.start_us);
        hi = hi.max(o.end_us);
    }
    if let (Some(f), Some(l)) = (t.power_segments.first(), t.power_segments.last()) {
        lo = lo.min(f.start_us);
        hi = hi.max(l.end_us);
    }
    if lo > hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

fn idle_watts_of(segs: &[PowerSegment]) -> f64 {
    segs.iter().map(|s| s.watts).fold(f64::INFINITY, f64::min)
}

/// The trace's own sampler readings, or the truth observed through `cfg`'s sampler.
fn sampled_view(t: &Trace, cfg: &EnergyConfig, seed: u64) -> Result<PowerSignal, EnergyError> {
    if let (Some(sampler), false) = (t.header.sampler, t.power_samples.is_empty()) {
        return Ok(PowerSignal::Sampled {
            samples: t.power_samples.clone(),
            sampler,
            span: trace_span(t),
        });
    }
    if t.power_segments.is_empty() {
        return Err(EnergyError::NoGroundTruth);
    }
    sample_signal(&t.power_segments, cfg.period_us, cfg.delay_us, seed)
}

fn over(signal: &PowerSignal, s: u64, e: u64) -> f64 {
    match signal {
        PowerSignal::GroundTruth(segs) => integrate_truth(segs, s, e),
        PowerSignal::Sampled { samples, .. } => integrate_samples(samples, s, e),
    }
}

/// Builds the ledger of one trace. All randomness derives from `cfg.seed`.
pub fn compute_ledger(t: &Trace, cfg: &EnergyConfig) -> Result<EnergyLedger, EnergyError> {
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample_seed: u64 = master.random();
    let signal = match cfg.method {
        Method::GroundTruth => {
            if t.power_segments.is_empty() {
                return Err(EnergyError::NoGroundTruth);
            }
            PowerSignal::GroundTruth(t.power_segments.clone())
        }
        Method::Sampled | Method::Replay => {
            check_period(cfg.period_us)?;
            sampled_view(t, cfg, sample_seed)?
        }
    };
    let idle_watts = if t.power_segments.is_empty() {
        t.power_samples.iter().map(|s| s.watts).fold(f64::INFINITY, f64::min)
    } else {
        idle_watts_of(&t.power_segments)
    };
    let idle_watts = if idle_watts.is_finite() { idle_watts } else { 0.0 };

    let mut kernels = Vec::new();
    let mut ops = Vec::with_capacity(t.ops.len());
    for op in &t.ops {
        let ks: Vec<_> = t.op_kernels(op).collect();
        let intervals = union(ks.iter().map(|k| (k.start_us, k.end_us)).collect());
        let gaps = complement((op.start_us, op.end_us), &intervals);
        let gap_us: u64 = gaps.iter().map(|(s, e)| e - s).sum();

        let (kernel_joules_each, gap_joules, forced): (Vec<f64>, f64, f64) = if cfg.method == Method::Replay && !ks.is_empty() {
            let op_seed: u64 = master.random();
            let est = replay_with(t, op, cfg.repeat, cfg.sampler(), op_seed)?;
            // Replay resolves one steady power per operator; shares follow duration.
            let w = est.watts;
            (
                ks.iter().map(|k| w * k.duration_us() as f64 * UJ).collect(),
                w * gap_us as f64 * UJ,
                0.0,
            )
        } else {
            let each = ks.iter().map(|k| over(&signal, k.start_us, k.end_us)).collect();
            let mut gap_j = 0.0;
            let mut forced = 0.0;
            for &(s, e) in &gaps {
                let j = over(&signal, s, e);
                gap_j += j;
                forced += (j - idle_watts * (e - s) as f64 * UJ).max(0.0);
            }
            (each, gap_j, forced)
        };
        let kernel_joules: f64 = kernel_joules_each.iter().sum();
        for (k, j) in ks.iter().zip(&kernel_joules_each) {
            kernels.push(KernelEnergy {
                kernel_id: k.kernel_id.clone(),
                op_id: op.op_id.clone(),
                joules: *j,
            });
        }
        ops.push(OpEnergy {
            op_id: op.op_id.clone(),
            op_name: op.op_name.clone(),
            start_us: op.start_us,
            end_us: op.end_us,
            kernel_joules,
            gap_joules,
            forced_gap_joules: forced,
            joules: kernel_joules + gap_joules,
        });
    }

    let busy = union(t.ops.iter().map(|o| (o.start_us, o.end_us)).collect());
    let idle_signal = if cfg.method == Method::Replay {
        sampled_view(t, cfg, sample_seed)?
    } else {
        signal
    };
    let idle_joules: f64 = complement(trace_span(t), &busy)
        .iter()
        .map(|&(s, e)| over(&idle_signal, s, e))
        .sum();
    let total_joules = ops.iter().map(|o| o.joules).sum::<f64>() + idle_joules;
    let op_index = ops.iter().enumerate().map(|(i, o)| (o.op_id.clone(), i)).collect();
    Ok(EnergyLedger {
        method: cfg.method,
        kernels,
        ops,
        idle_watts,
        idle_joules,
        total_joules,
        op_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayEstimate {
    pub watts: f64,
    pub joules: f64,
    pub samples_used: usize,
}

/// Repeats the operator's interval back to back `repeat` times between idle
/// lead-in and tail, observes it through the sampler, and averages the
/// readings away from both ends of the window.
pub fn replay_estimate(
    t: &Trace,
    op_id: &str,
    repeat: u32,
    sampler: SamplerDescriptor,
    seed: u64,
) -> Result<ReplayEstimate, EnergyError> {
    let op = t.op(op_id).ok_or_else(|| EnergyError::UnknownOp(op_id.to_string()))?;
    replay_with(t, op, repeat, sampler, seed)
}

fn replay_with(
    t: &Trace,
    op: &crate::trace_model::OperatorEvent,
    repeat: u32,
    sampler: SamplerDescriptor,
    seed: u64,
) -> Result<ReplayEstimate, EnergyError> {
    if op.kernel_ids.is_empty() {
        return Err(EnergyError::ZeroKernels(op.op_id.clone()));
    }
    if repeat == 0 {
        return Err(EnergyError::Repeat);
    }
    check_period(sampler.period_us)?;
    let truth = &t.power_segments;
    if truth.is_empty() {
        return Err(EnergyError::NoGroundTruth);
    }
    let idle = idle_watts_of(truth);
    let d = op.duration_us();
    let lead = sampler.delay_us + sampler.delay_us / 2 + sampler.period_us;
    let window = repeat as u64 * d;
    let f = |tau: u64| {
        if tau < lead || tau >= lead + window {
            idle
        } else {
            truth_at(truth, op.start_us + (tau - lead) % d)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample_points((0, 2 * lead + window), f, sampler, &mut rng);

    let margin = (window as f64 * REPLAY_MARGIN) as u64;
    let pick = |lo: u64, hi: u64| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.timestamp_us >= lo && s.timestamp_us <= hi)
            .map(|s| s.watts)
            .collect()
    };
    let mut used = pick(lead + margin, lead + window - margin);
    if used.is_empty() {
        used = pick(lead, lead + window);
    }
    if used.is_empty() {
        let mid = lead + window / 2;
        if let Some(s) = samples.iter().min_by_key(|s| s.timestamp_us.abs_diff(mid)) {
            used.push(s.watts);
        }
    }
    let watts = used.iter().sum::<f64>() / used.len().max(1) as f64;
    Ok(ReplayEstimate {
        watts,
        joules: watts * d as f64 * UJ,
        samples_used: used.len(),
    })
}

/// Rejects ledgers built by different methods.
pub fn same_method(a: &EnergyLedger, b: &EnergyLedger) -> Result<Method, EnergyError> {
    if a.method != b.method {
        return Err(EnergyError::MethodMismatch(a.method, b.method));
    }
    Ok(a.method)
}
