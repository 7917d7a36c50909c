//! Seeded generator of paired traces with declared ground truth.
//!
//! A scenario is a graph template realized twice. System A is the reference;
//! system B may store tensors in other layouts, fuse operators differently
//! and carry one injected inefficiency in a chosen segment. Segments are the
//! finest regions the matcher can separate, so the manifest can name them.

mod build;
mod presets;

pub use presets::{fuzz, fuzz_null, preset, PRESETS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace_model::{Trace, TraceError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("inconsistent manifest: {0}")]
    Manifest(String),
    #[error("generated trace failed validation: {0}")]
    Trace(#[from] TraceError),
    #[error("expected ground truth differs from generated: {0}")]
    Expected(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Template {
    /// Operators in series, one segment each.
    Chain { length: usize },
    /// Fork operator followed by a two-branch diamond, repeated.
    Diamond { count: usize },
    /// Attention and feed-forward blocks. B fuses Q/K/V and Mul/Add.
    Transformer {
        blocks: usize,
        /// Adds a normalization segment, identical on both sides, before each attention.
        #[serde(default)]
        norm: bool,
    },
    /// Three short kernels separated by long idle stretches.
    SamplerDemo,
}

/// How system B stores intermediate tensors. Model inputs and outputs keep
/// the canonical layout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Canonical,
    Permuted,
    Merged,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    Misconfiguration,
    ApiMisuse,
    Redundant,
}

/// How a misconfiguration reaches the kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispatch {
    /// A branch in a dispatch function selects a different kernel.
    #[default]
    Branch,
    /// Same, through a switch.
    Switch,
    /// Same kernel, different launch parameter.
    Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub kind: InjectionKind,
    pub target_segment: usize,
    /// Extra energy as a fraction of the target segment's energy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    /// Alternative to `magnitude`: wasted fraction of B's total energy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_to_end: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_key: Option<String>,
    #[serde(default)]
    pub dispatch: Dispatch,
    /// Def-use hops from the source to the key variable.
    #[serde(default = "one")]
    pub hops: usize,
}

fn one() -> usize {
    1
}

fn two() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub workload: String,
    pub seed: u64,
    pub template: Template,
    #[serde(default)]
    pub layout_b: Layout,
    #[serde(default = "two")]
    pub batches: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<Injection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<GroundTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTruth {
    pub ops_a: Vec<String>,
    pub ops_b: Vec<String>,
    pub joules_a: f64,
    pub joules_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedTruth {
    pub kind: InjectionKind,
    pub segment: usize,
    pub magnitude: f64,
    pub wasted_joules: f64,
    /// Wasted joules over the larger of the two trace totals.
    pub end_to_end_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_var: Option<String>,
    /// Kernels B launches on top of A's, in launch order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_kernels: Vec<String>,
    /// Sorted kernel names of the target segment on each side.
    pub kernels_a: Vec<String>,
    pub kernels_b: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub workload: String,
    pub seed: u64,
    pub segments: Vec<SegmentTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected: Option<InjectedTruth>,
    pub total_joules_a: f64,
    pub total_joules_b: f64,
}

impl GroundTruth {
    /// Segment whose op sets equal the given ones, compared as sets.
    pub fn segment_of(&self, ops_a: &[String], ops_b: &[String]) -> Option<usize> {
        let sorted = |v: &[String]| {
            let mut v = v.to_vec();
            v.sort();
            v
        };
        let (a, b) = (sorted(ops_a), sorted(ops_b));
        self.segments
            .iter()
            .position(|s| sorted(&s.ops_a) == a && sorted(&s.ops_b) == b)
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub manifest: ScenarioManifest,
    pub trace_a: Trace,
    pub trace_b: Trace,
    pub truth: GroundTruth,
}

impl ScenarioManifest {
    pub fn with_seed(mut self, seed: u64) -> Self {
        if seed != self.seed {
            self.seed = seed;
            self.expected = None;
        }
        self
    }

    pub fn segment_count(&self) -> usize {
        build::segment_kinds(&self.template).len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Manifest(m));
        if self.batches < 2 {
            return bad(format!("batches = {}, need at least 2", self.batches));
        }
        match self.template {
            Template::Chain { length: 0 } | Template::Diamond { count: 0 } | Template::Transformer { blocks: 0, .. } => {
                return bad("template has no segments".into())
            }
            _ => {}
        }
        let Some(inj) = &self.injection else {
            return Ok(());
        };
        if self.template == Template::SamplerDemo {
            return bad("the sampler demo takes no injection".into());
        }
        let kinds = build::segment_kinds(&self.template);
        let Some(&homogeneous) = kinds.get(inj.target_segment) else {
            return bad(format!("target segment {} of {}", inj.target_segment, kinds.len()));
        };
        if inj.kind != InjectionKind::ApiMisuse && !homogeneous {
            return bad(format!(
                "{:?} needs a segment realized identically on both sides; segment {} is not",
                inj.kind, inj.target_segment
            ));
        }
        match (inj.magnitude, inj.end_to_end) {
            (Some(m), None) if m > 0.0 && m <= 2.0 => {}
            (None, Some(f)) if f > 0.0 && f < 1.0 => {}
            (Some(m), None) => return bad(format!("magnitude {m} outside (0, 2]")),
            (None, Some(f)) => return bad(format!("end_to_end {f} outside (0, 1)")),
            _ => return bad("give exactly one of magnitude and end_to_end".into()),
        }
        match (&inj.kind, &inj.source_key) {
            (InjectionKind::Misconfiguration, Some(k)) if !crate::trace_model::is_source_var(k) => {
                return bad(format!("source key `{k}` lacks a config: or arg: prefix"))
            }
            (InjectionKind::Misconfiguration, _) => {}
            (_, Some(_)) => return bad("source_key applies to misconfiguration only".into()),
            _ => {}
        }
        if inj.hops == 0 || inj.hops > 8 {
            return bad(format!("hops = {}, need 1..=8", inj.hops));
        }
        Ok(())
    }
}

/// Builds both traces and the ground-truth record.
pub fn generate(manifest: &ScenarioManifest) -> Result<Scenario, SimError> {
    manifest.validate()?;
    let (trace_a, trace_b, truth) = build::build(manifest)?;
    if let Some(expected) = &manifest.expected {
        let want = serde_json::to_value(expected).expect("serializable");
        let got = serde_json::to_value(&truth).expect("serializable");
        if let Some(path) = first_difference(&want, &got, "") {
            return Err(SimError::Expected(path));
        }
    }
    Ok(Scenario {
        manifest: manifest.clone(),
        trace_a,
        trace_b,
        truth,
    })
}

/// Path of the first mismatch, numbers compared to relative 1e-9.
fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value::*;
    match (a, b) {
        (Number(x), Number(y)) => {
            let (x, y) = (x.as_f64()?, y.as_f64()?);
            ((x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1e-12)).then(|| format!("{path}: {x} vs {y}"))
        }
        (Array(x), Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .enumerate()
            .find_map(|(i, (x, y))| first_difference(x, y, &format!("{path}[{i}]"))),
        (Object(x), Object(y)) if x.len() == y.len() => x.iter().find_map(|(k, xv)| match y.get(k) {
            Some(yv) => first_difference(xv, yv, &format!("{path}.{k}")),
            None => Some(format!("{path}.{k}: missing")),
        }),
        _ if a == b => None,
        _ => Some(format!("{path}: {a} vs {b}")),
    }
}
