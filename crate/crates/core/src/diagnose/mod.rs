//! Root-cause search over kernel call paths, basic-block traces and def-use edges.
//!
//! Kernels of a segment pair are aligned by name. Each unaligned stretch is
//! explained as extra work, a control-flow divergence traced back to a
//! configuration or argument source, or a different API realization.

mod dataflow;

pub use dataflow::{backward_dataflow, DataflowChain};

use serde::Serialize;
use thiserror::Error;

use crate::detect::{Pairing, WasteFinding};
use crate::energy::EnergyLedger;
use crate::trace_model::{is_source_var, ControlKind, KernelEvent, ProgramModel, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnoseError {
    #[error("backtrace is empty")]
    EmptyPath,
    #[error("disjoint call paths: `{a}` vs `{b}` at the outermost frame")]
    DisjointPaths { a: String, b: String },
    #[error("no divergence in `{0}`: block traces are identical")]
    NoDivergence(String),
    #[error("block traces of `{0}` share no leading block")]
    NoCommonBlock(String),
    #[error("block `{0}` has no control record in the program model")]
    MissingControl(String),
    #[error("variable `{0}` does not appear in the def-use graph")]
    DanglingVariable(String),
    #[error("def-use cycle through `{0}`")]
    Cycle(String),
    #[error("segment pair launches no kernels")]
    NoKernels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeviationPoint {
    /// First differing frame index; the frames before it are shared.
    pub index: usize,
    /// Last common function.
    pub func: String,
    pub frame_a: String,
    pub frame_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Deviation {
    Point(DeviationPoint),
    /// Equal paths, or one a prefix of the other (`depth_mismatch`).
    Identical { depth_mismatch: bool },
}

/// Smallest index where the call paths differ.
pub fn find_deviation<S: AsRef<str>>(path_a: &[S], path_b: &[S]) -> Result<Deviation, DiagnoseError> {
    if path_a.is_empty() || path_b.is_empty() {
        return Err(DiagnoseError::EmptyPath);
    }
    let n = path_a.len().min(path_b.len());
    match (0..n).find(|&i| path_a[i].as_ref() != path_b[i].as_ref()) {
        Some(0) => Err(DiagnoseError::DisjointPaths {
            a: path_a[0].as_ref().to_string(),
            b: path_b[0].as_ref().to_string(),
        }),
        Some(i) => Ok(Deviation::Point(DeviationPoint {
            index: i,
            func: path_a[i - 1].as_ref().to_string(),
            frame_a: path_a[i].as_ref().to_string(),
            frame_b: path_b[i].as_ref().to_string(),
        })),
        None => Ok(Deviation::Identical {
            depth_mismatch: path_a.len() != path_b.len(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct KeyVariable {
    pub var: String,
    pub kind: ControlKind,
    /// Last block both runs executed.
    pub block: String,
}

/// Control variable of the last block shared by both block traces.
pub fn find_key_var<S: AsRef<str>>(
    func: &str,
    model: &ProgramModel,
    blocks_a: &[S],
    blocks_b: &[S],
) -> Result<KeyVariable, DiagnoseError> {
    let n = blocks_a.len().min(blocks_b.len());
    let i = (0..n)
        .find(|&i| blocks_a[i].as_ref() != blocks_b[i].as_ref())
        .unwrap_or(n);
    if i == n && blocks_a.len() == blocks_b.len() {
        return Err(DiagnoseError::NoDivergence(func.to_string()));
    }
    if i == 0 {
        return Err(DiagnoseError::NoCommonBlock(func.to_string()));
    }
    let block = blocks_a[i - 1].as_ref();
    let ctl = model
        .block_control
        .get(block)
        .ok_or_else(|| DiagnoseError::MissingControl(block.to_string()))?;
    Ok(KeyVariable {
        var: ctl.var.clone(),
        kind: ctl.kind,
        block: block.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnosis {
    pub kernel_efficient: String,
    pub kernel_wasteful: String,
    pub deviation: DeviationPoint,
    pub key: KeyVariable,
    /// Shortest chain first.
    pub chains: Vec<DataflowChain>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterDelta {
    pub kernel_efficient: String,
    pub kernel_wasteful: String,
    pub param: String,
    pub value_efficient: Option<String>,
    pub value_wasteful: Option<String>,
    pub var: Option<String>,
    pub chains: Vec<DataflowChain>,
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtraKernel {
    pub kernel_id: String,
    pub kernel_name: String,
    pub op_id: String,
    pub joules: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiMisuse {
    /// Sorted kernel names of the unexplained stretch on each side.
    pub efficient_kernels: Vec<String>,
    pub wasteful_kernels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiagnosisReport {
    pub diagnoses: Vec<Diagnosis>,
    pub parameter_deltas: Vec<ParameterDelta>,
    pub extra_kernels: Vec<ExtraKernel>,
    pub api_misuse: Option<ApiMisuse>,
    /// First configuration or argument source found, in kernel order.
    pub primary_source: Option<String>,
    pub notes: Vec<String>,
}

impl DiagnosisReport {
    pub fn extra_kernel_names(&self) -> Vec<String> {
        self.extra_kernels.iter().map(|k| k.kernel_name.clone()).collect()
    }
}

/// One side of a segment pair with its trace and ledger.
#[derive(Clone, Copy)]
pub struct SegmentSide<'a> {
    pub trace: &'a Trace,
    pub ledger: Option<&'a EnergyLedger>,
    pub ops: &'a [String],
}

impl<'a> SegmentSide<'a> {
    fn kernels(&self) -> Vec<&'a KernelEvent> {
        self.ops
            .iter()
            .filter_map(|id| self.trace.op(id))
            .flat_map(|op| self.trace.op_kernels(op))
            .collect()
    }

    fn kernel_joules(&self, id: &str) -> f64 {
        self.ledger
            .and_then(|l| l.kernels.iter().find(|k| k.kernel_id == id))
            .map_or(0.0, |k| k.joules)
    }
}

/// Index pairs of a longest common subsequence of kernel names, earliest first.
fn lcs(a: &[&KernelEvent], b: &[&KernelEvent]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    let mut dp = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if a[i].kernel_name == b[j].kernel_name {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < n && j < m {
        if a[i].kernel_name == b[j].kernel_name {
            out.push((i, j));
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

fn chains_and_source(var: &str, model: &ProgramModel, notes: &mut Vec<String>) -> (Vec<DataflowChain>, Option<String>) {
    match backward_dataflow(var, model) {
        Ok(chains) => {
            let source = chains.first().map(|c| c.source.clone());
            (chains, source)
        }
        Err(e) => {
            notes.push(format!("data-flow from `{var}` failed: {e}"));
            (Vec::new(), None)
        }
    }
}

fn param_deltas(e: &KernelEvent, w: &KernelEvent, model: &ProgramModel, notes: &mut Vec<String>) -> Vec<ParameterDelta> {
    let mut names: Vec<&String> = e.params.keys().chain(w.params.keys()).collect();
    names.sort();
    names.dedup();
    let mut out = Vec::new();
    for name in names {
        let (pe, pw) = (e.params.get(name), w.params.get(name));
        if pe.map(|p| &p.value) == pw.map(|p| &p.value) {
            continue;
        }
        let var = pw.and_then(|p| p.var.clone()).or_else(|| pe.and_then(|p| p.var.clone()));
        let (chains, source) = match &var {
            Some(v) => chains_and_source(v, model, notes),
            None => (Vec::new(), None),
        };
        out.push(ParameterDelta {
            kernel_efficient: e.kernel_id.clone(),
            kernel_wasteful: w.kernel_id.clone(),
            param: name.clone(),
            value_efficient: pe.map(|p| p.value.clone()),
            value_wasteful: pw.map(|p| p.value.clone()),
            var,
            chains,
            source,
        });
    }
    out
}

/// Full control-flow pipeline for one kernel pair with diverging call paths.
fn divergence(
    e: &KernelEvent,
    w: &KernelEvent,
    efficient: &Trace,
    wasteful: &Trace,
    model: &ProgramModel,
    notes: &mut Vec<String>,
) -> Option<Diagnosis> {
    let dev = match find_deviation(&e.backtrace, &w.backtrace) {
        Ok(Deviation::Point(p)) => p,
        Ok(Deviation::Identical { .. }) => return None,
        Err(err) => {
            notes.push(format!("{} vs {}: {err}", e.kernel_id, w.kernel_id));
            return None;
        }
    };
    let (Some(be), Some(bw)) = (efficient.block_trace(&dev.func), wasteful.block_trace(&dev.func)) else {
        notes.push(format!("no block traces recorded for `{}`", dev.func));
        return None;
    };
    let key = match find_key_var(&dev.func, model, &be.blocks, &bw.blocks) {
        Ok(k) => k,
        Err(err) => {
            notes.push(err.to_string());
            return None;
        }
    };
    let (chains, source) = chains_and_source(&key.var, model, notes);
    Some(Diagnosis {
        kernel_efficient: e.kernel_id.clone(),
        kernel_wasteful: w.kernel_id.clone(),
        deviation: dev,
        key,
        chains,
        source: source?,
    })
}

/// Explains why the wasteful side of a segment pair costs more.
pub fn diagnose_segment(efficient: SegmentSide, wasteful: SegmentSide) -> Result<DiagnosisReport, DiagnoseError> {
    let ke = efficient.kernels();
    let kw = wasteful.kernels();
    if ke.is_empty() && kw.is_empty() {
        return Err(DiagnoseError::NoKernels);
    }
    let empty = ProgramModel::default();
    let model = wasteful
        .trace
        .program
        .as_ref()
        .or(efficient.trace.program.as_ref())
        .unwrap_or(&empty);

    let mut report = DiagnosisReport::default();
    // (wasteful kernel index, source) in discovery order, for the primary pick.
    let mut found: Vec<(usize, String)> = Vec::new();
    let mut unresolved_e: Vec<String> = Vec::new();
    let mut unresolved_w: Vec<String> = Vec::new();

    let anchors = lcs(&ke, &kw);
    let mut bounds = anchors.clone();
    bounds.push((ke.len(), kw.len()));
    let (mut pe, mut pw) = (0usize, 0usize);
    for &(ae, aw) in &bounds {
        let we = &ke[pe..ae];
        let ww = &kw[pw..aw];
        if we.is_empty() && !ww.is_empty() {
            for k in ww {
                report.extra_kernels.push(ExtraKernel {
                    kernel_id: k.kernel_id.clone(),
                    kernel_name: k.kernel_name.clone(),
                    op_id: wasteful.trace.kernel_owner(&k.kernel_id).map(|o| o.op_id.clone()).unwrap_or_default(),
                    joules: wasteful.kernel_joules(&k.kernel_id),
                });
            }
        } else if !we.is_empty() {
            let mut resolved = false;
            for (k, (e, w)) in we.iter().zip(ww.iter()).enumerate() {
                if let Some(d) = divergence(e, w, efficient.trace, wasteful.trace, model, &mut report.notes) {
                    found.push((pw + k, d.source.clone()));
                    report.diagnoses.push(d);
                    resolved = true;
                } else if e.backtrace == w.backtrace {
                    let deltas = param_deltas(e, w, model, &mut report.notes);
                    for d in &deltas {
                        if let Some(s) = &d.source {
                            found.push((pw + k, s.clone()));
                            resolved = true;
                        }
                    }
                    report.parameter_deltas.extend(deltas);
                }
            }
            if !resolved {
                unresolved_e.extend(we.iter().map(|k| k.kernel_name.clone()));
                unresolved_w.extend(ww.iter().map(|k| k.kernel_name.clone()));
            }
        }
        if ae < ke.len() {
            let (e, w) = (ke[ae], kw[aw]);
            let deltas = param_deltas(e, w, model, &mut report.notes);
            for d in &deltas {
                if let Some(s) = &d.source {
                    found.push((aw, s.clone()));
                }
            }
            report.parameter_deltas.extend(deltas);
        }
        pe = ae + 1;
        pw = aw + 1;
    }
    if !unresolved_e.is_empty() || !unresolved_w.is_empty() {
        unresolved_e.sort();
        unresolved_w.sort();
        report.api_misuse = Some(ApiMisuse {
            efficient_kernels: unresolved_e,
            wasteful_kernels: unresolved_w,
        });
    }
    found.sort_by_key(|(i, _)| *i);
    report.primary_source = found.into_iter().map(|(_, s)| s).find(|s| is_source_var(s));
    Ok(report)
}

/// Diagnoses a finding with its higher-energy side as the wasteful one.
pub fn diagnose_finding(finding: &WasteFinding, p: Pairing) -> Result<DiagnosisReport, DiagnoseError> {
    diagnose_segment(p.segment_side(finding.efficient(), finding), p.segment_side(finding.wasteful, finding))
}
