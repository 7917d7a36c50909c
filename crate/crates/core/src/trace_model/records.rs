//! Record types that make up a trace file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};

/// Schema version written into every header this crate emits.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerDescriptor {
    pub period_us: u64,
    pub delay_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub schema_version: u32,
    pub system: String,
    pub workload: String,
    pub seed: u64,
    /// Present when the trace carries low-rate power readings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub key: String,
    pub value: String,
}

/// Recorded value of one tensor for one input batch, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSnapshot {
    pub tensor_id: String,
    #[serde(default)]
    pub batch: u32,
    pub shape: Vec<usize>,
    #[serde(serialize_with = "serialize_sig9")]
    pub values: Vec<f64>,
}

impl TensorSnapshot {
    pub fn new(tensor_id: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        Self {
            tensor_id: tensor_id.into(),
            batch: 0,
            shape,
            values,
        }
    }

    pub fn with_batch(mut self, batch: u32) -> Self {
        self.batch = batch;
        self
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorEvent {
    pub op_id: String,
    pub op_name: String,
    pub input_tensor_ids: Vec<String>,
    pub output_tensor_ids: Vec<String>,
    pub kernel_ids: Vec<String>,
    pub start_us: u64,
    pub end_us: u64,
}

impl OperatorEvent {
    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelParam {
    pub value: String,
    /// Program variable the launch site read this parameter from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelEvent {
    pub kernel_id: String,
    pub kernel_name: String,
    pub correlation_id: u64,
    pub start_us: u64,
    pub end_us: u64,
    /// Outermost call site first, launch site last.
    pub backtrace: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, KernelParam>,
}

impl KernelEvent {
    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub timestamp_us: u64,
    pub watts: f64,
}

/// Constant power over `[start_us, end_us)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSegment {
    pub start_us: u64,
    pub end_us: u64,
    pub watts: f64,
}

/// A `power` line is either a ground-truth segment or a sampler reading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PowerRecord {
    Segment(PowerSegment),
    Sample(PowerSample),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Branch,
    Switch,
    Indirect,
}

impl std::fmt::Display for ControlKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ControlKind::Branch => "branch",
            ControlKind::Switch => "switch",
            ControlKind::Indirect => "indirect",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub kind: ControlKind,
    pub var: String,
}

/// `to` is assigned from `from` at `site`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefUseEdge {
    pub from: String,
    pub to: String,
    pub site: String,
}

/// Static facts about the host program needed for root-cause search.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgramModel {
    pub functions: BTreeMap<String, Vec<String>>,
    pub block_control: BTreeMap<String, ControlRecord>,
    pub def_use: Vec<DefUseEdge>,
}

/// Variables tagged `config:` or `arg:` terminate backward data-flow.
pub fn is_source_var(name: &str) -> bool {
    name.starts_with("config:") || name.starts_with("arg:")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTraceRecord {
    pub func: String,
    pub run_index: u32,
    pub blocks: Vec<String>,
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Record {
    Header(Header),
    Config(ConfigEntry),
    Progmodel(ProgramModel),
    Tensor(TensorSnapshot),
    Op(OperatorEvent),
    Kernel(KernelEvent),
    Power(PowerRecord),
    Blocktrace(BlockTraceRecord),
}

/// Rounds to 9 significant decimal digits, the precision tensor values are stored at.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

fn serialize_sig9<S: Serializer>(values: &[f64], ser: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = ser.serialize_seq(Some(values.len()))?;
    for v in values {
        seq.serialize_element(&round_sig9(*v))?;
    }
    seq.end()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_rounding_is_idempotent() {
        for x in [1.0 / 3.0, -std::f64::consts::E, 1e-7 * std::f64::consts::PI, 12345.678901234] {
            let r = round_sig9(x);
            assert_eq!(r, round_sig9(r));
            assert!((r - x).abs() <= 1e-8 * x.abs());
        }
    }

    #[test]
    fn power_line_variants() {
        let seg: Record =
            serde_json::from_str(r#"{"type":"power","start_us":0,"end_us":10,"watts":100.0}"#).unwrap();
        assert!(matches!(seg, Record::Power(PowerRecord::Segment(_))));
        let s: Record = serde_json::from_str(r#"{"type":"power","timestamp_us":5,"watts":70.5}"#).unwrap();
        assert!(matches!(s, Record::Power(PowerRecord::Sample(_))));
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(text, r#"{"type":"power","timestamp_us":5,"watts":70.5}"#);
    }
}
