//! Trace data model, the line-delimited trace file format, and cross-validation.
//!
//! A trace file holds one JSON record per line. The first line is always the
//! `header`; remaining lines may appear in any order. Canonical emission groups
//! records by kind (header, config, progmodel, tensor, op, kernel, power,
//! blocktrace) and keeps file order within a kind.

mod pairing;
mod records;

pub(crate) use pairing::output_rel_diff;
pub use pairing::{validate_pairing, OutputPair, PairingError, PairingReport};
pub use records::*;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported schema version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },
    #[error("line {line}: dangling reference to {kind} `{id}`")]
    Reference {
        line: usize,
        kind: &'static str,
        id: String,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

fn invalid(line: usize, message: impl Into<String>) -> TraceError {
    TraceError::Invalid {
        line,
        message: message.into(),
    }
}

/// A fully cross-validated trace. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: Header,
    pub config: BTreeMap<String, String>,
    pub program: Option<ProgramModel>,
    pub tensors: Vec<TensorSnapshot>,
    pub ops: Vec<OperatorEvent>,
    pub kernels: Vec<KernelEvent>,
    pub power_segments: Vec<PowerSegment>,
    pub power_samples: Vec<PowerSample>,
    pub block_traces: Vec<BlockTraceRecord>,
    index: TraceIndex,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TraceIndex {
    tensors: HashMap<(String, u32), usize>,
    ops: HashMap<String, usize>,
    kernels: HashMap<String, usize>,
    kernel_owner: HashMap<String, usize>,
    producer: HashMap<String, usize>,
    consumed: HashSet<String>,
    batches: u32,
}

impl Trace {
    /// Builds a trace from records, validating every invariant. Line numbers in
    /// errors are 1-based positions in `records`.
    pub fn from_records(records: Vec<Record>) -> Result<Self, TraceError> {
        let numbered = records.into_iter().enumerate().map(|(i, r)| (i + 1, r)).collect();
        Self::from_numbered(numbered)
    }

    /// Parses trace text in the line-delimited format.
    pub fn parse(text: &str) -> Result<Self, TraceError> {
        let mut numbered = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| TraceError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            numbered.push((line_no, record));
        }
        Self::from_numbered(numbered)
    }

    fn from_numbered(records: Vec<(usize, Record)>) -> Result<Self, TraceError> {
        let mut iter = records.into_iter();
        let header = match iter.next() {
            Some((_, Record::Header(h))) => h,
            Some((line, _)) => return Err(invalid(line, "first record must be the header")),
            None => return Err(invalid(1, "empty trace")),
        };
        if header.schema_version != SCHEMA_VERSION {
            return Err(TraceError::Version {
                found: header.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        if let Some(s) = &header.sampler {
            if !(1_000..=1_000_000).contains(&s.period_us) {
                return Err(invalid(1, format!("sampler period {} us outside [1e3, 1e6]", s.period_us)));
            }
        }

        let mut b = Builder::default();
        for (line, record) in iter {
            b.push(line, record)?;
        }
        b.finish(header)
    }

    pub fn tensor(&self, id: &str, batch: u32) -> Option<&TensorSnapshot> {
        self.index
            .tensors
            .get(&(id.to_string(), batch))
            .map(|&i| &self.tensors[i])
    }

    pub fn op(&self, id: &str) -> Option<&OperatorEvent> {
        self.index.ops.get(id).map(|&i| &self.ops[i])
    }

    pub fn kernel(&self, id: &str) -> Option<&KernelEvent> {
        self.index.kernels.get(id).map(|&i| &self.kernels[i])
    }

    /// Operator that launched `kernel_id`.
    pub fn kernel_owner(&self, kernel_id: &str) -> Option<&OperatorEvent> {
        self.index.kernel_owner.get(kernel_id).map(|&i| &self.ops[i])
    }

    /// Operator that produces `tensor_id`, if any.
    pub fn producer(&self, tensor_id: &str) -> Option<&OperatorEvent> {
        self.index.producer.get(tensor_id).map(|&i| &self.ops[i])
    }

    /// Number of recorded input batches (every tensor has one snapshot per batch).
    pub fn batches(&self) -> u32 {
        self.index.batches
    }

    /// Tensors consumed by some operator but produced by none, in first-use order.
    pub fn model_inputs(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for op in &self.ops {
            for t in &op.input_tensor_ids {
                if !self.index.producer.contains_key(t) && seen.insert(t.clone()) {
                    out.push(t.clone());
                }
            }
        }
        out
    }

    /// Tensors produced but never consumed, in production order.
    pub fn model_outputs(&self) -> Vec<String> {
        self.ops
            .iter()
            .flat_map(|op| op.output_tensor_ids.iter())
            .filter(|t| !self.index.consumed.contains(*t))
            .cloned()
            .collect()
    }

    /// Kernels launched by `op`, in launch order.
    pub fn op_kernels<'a>(&'a self, op: &'a OperatorEvent) -> impl Iterator<Item = &'a KernelEvent> + 'a {
        op.kernel_ids.iter().filter_map(move |k| self.kernel(k))
    }

    /// Block trace of `func` with the lowest run index.
    pub fn block_trace(&self, func: &str) -> Option<&BlockTraceRecord> {
        self.block_traces
            .iter()
            .filter(|b| b.func == func)
            .min_by_key(|b| b.run_index)
    }

    pub fn records(&self) -> Vec<Record> {
        let mut out = vec![Record::Header(self.header.clone())];
        out.extend(self.config.iter().map(|(k, v)| {
            Record::Config(ConfigEntry {
                key: k.clone(),
                value: v.clone(),
            })
        }));
        out.extend(self.program.iter().cloned().map(Record::Progmodel));
        out.extend(self.tensors.iter().cloned().map(Record::Tensor));
        out.extend(self.ops.iter().cloned().map(Record::Op));
        out.extend(self.kernels.iter().cloned().map(Record::Kernel));
        out.extend(
            self.power_segments
                .iter()
                .map(|s| Record::Power(PowerRecord::Segment(*s))),
        );
        out.extend(
            self.power_samples
                .iter()
                .map(|s| Record::Power(PowerRecord::Sample(*s))),
        );
        out.extend(self.block_traces.iter().cloned().map(Record::Blocktrace));
        out
    }

    /// Canonical line-delimited text.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in self.records() {
            s.push_str(&serde_json::to_string(&r).expect("trace records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), TraceError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| TraceError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Reads and validates a trace file.
pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let text = std::fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Trace::parse(&text)
}

#[derive(Default)]
struct Builder {
    config: BTreeMap<String, String>,
    program: Option<(usize, ProgramModel)>,
    tensors: Vec<(usize, TensorSnapshot)>,
    ops: Vec<(usize, OperatorEvent)>,
    kernels: Vec<(usize, KernelEvent)>,
    segments: Vec<PowerSegment>,
    samples: Vec<PowerSample>,
    block_traces: Vec<(usize, BlockTraceRecord)>,
    correlation: HashSet<u64>,
}

impl Builder {
    fn push(&mut self, line: usize, record: Record) -> Result<(), TraceError> {
        match record {
            Record::Header(_) => return Err(invalid(line, "duplicate header")),
            Record::Config(c) => {
                if self.config.insert(c.key.clone(), c.value).is_some() {
                    return Err(invalid(line, format!("duplicate config key `{}`", c.key)));
                }
            }
            Record::Progmodel(p) => {
                if self.program.is_some() {
                    return Err(invalid(line, "more than one progmodel record"));
                }
                self.program = Some((line, p));
            }
            Record::Tensor(mut t) => {
                check_tensor(line, &t)?;
                for v in &mut t.values {
                    *v = round_sig9(*v);
                }
                self.tensors.push((line, t));
            }
            Record::Op(op) => {
                if op.end_us < op.start_us {
                    return Err(invalid(line, format!("operator `{}` ends before it starts", op.op_id)));
                }
                self.ops.push((line, op));
            }
            Record::Kernel(k) => {
                if k.end_us <= k.start_us {
                    return Err(invalid(line, format!("kernel `{}` has non-positive duration", k.kernel_id)));
                }
                if k.backtrace.is_empty() {
                    return Err(invalid(line, format!("kernel `{}` has an empty backtrace", k.kernel_id)));
                }
                if !self.correlation.insert(k.correlation_id) {
                    return Err(invalid(
                        line,
                        format!("correlation id {} reused by kernel `{}`", k.correlation_id, k.kernel_id),
                    ));
                }
                self.kernels.push((line, k));
            }
            Record::Power(PowerRecord::Segment(s)) => {
                if s.end_us <= s.start_us || !s.watts.is_finite() || s.watts < 0.0 {
                    return Err(invalid(line, "power segment must have positive length and non-negative watts"));
                }
                if let Some(prev) = self.segments.last() {
                    if s.start_us < prev.end_us {
                        return Err(invalid(line, "power segments overlap or are out of order"));
                    }
                }
                self.segments.push(s);
            }
            Record::Power(PowerRecord::Sample(s)) => {
                if !s.watts.is_finite() || s.watts < 0.0 {
                    return Err(invalid(line, "power sample watts must be non-negative"));
                }
                if let Some(prev) = self.samples.last() {
                    if s.timestamp_us <= prev.timestamp_us {
                        return Err(invalid(line, "power samples must be strictly increasing in time"));
                    }
                }
                self.samples.push(s);
            }
            Record::Blocktrace(b) => self.block_traces.push((line, b)),
        }
        Ok(())
    }

    fn finish(self, header: Header) -> Result<Trace, TraceError> {
        let mut index = TraceIndex::default();

        let mut tensor_ids: BTreeMap<&str, HashSet<u32>> = BTreeMap::new();
        for (i, (line, t)) in self.tensors.iter().enumerate() {
            if index.tensors.insert((t.tensor_id.clone(), t.batch), i).is_some() {
                return Err(invalid(
                    *line,
                    format!("duplicate snapshot of tensor `{}` batch {}", t.tensor_id, t.batch),
                ));
            }
            tensor_ids.entry(&t.tensor_id).or_default().insert(t.batch);
        }
        let batches = self.tensors.iter().map(|(_, t)| t.batch + 1).max().unwrap_or(0);
        for (line, t) in &self.tensors {
            if tensor_ids[t.tensor_id.as_str()].len() as u32 != batches {
                return Err(invalid(
                    *line,
                    format!("tensor `{}` lacks a snapshot for some of the {batches} batches", t.tensor_id),
                ));
            }
        }
        index.batches = batches;

        for (i, (line, k)) in self.kernels.iter().enumerate() {
            if index.kernels.insert(k.kernel_id.clone(), i).is_some() {
                return Err(invalid(*line, format!("duplicate kernel id `{}`", k.kernel_id)));
            }
        }

        for (i, (line, op)) in self.ops.iter().enumerate() {
            if index.ops.insert(op.op_id.clone(), i).is_some() {
                return Err(invalid(*line, format!("duplicate operator id `{}`", op.op_id)));
            }
            for t in op.input_tensor_ids.iter().chain(&op.output_tensor_ids) {
                if !tensor_ids.contains_key(t.as_str()) {
                    return Err(TraceError::Reference {
                        line: *line,
                        kind: "tensor",
                        id: t.clone(),
                    });
                }
            }
            if let Some(t) = op.input_tensor_ids.iter().find(|t| op.output_tensor_ids.contains(t)) {
                return Err(invalid(
                    *line,
                    format!("operator `{}` reads and writes tensor `{t}` in place", op.op_id),
                ));
            }
            for t in &op.output_tensor_ids {
                if index.producer.insert(t.clone(), i).is_some() {
                    return Err(invalid(*line, format!("tensor `{t}` has more than one producer")));
                }
            }
            index.consumed.extend(op.input_tensor_ids.iter().cloned());
            for kid in &op.kernel_ids {
                let Some(&ki) = index.kernels.get(kid) else {
                    return Err(TraceError::Reference {
                        line: *line,
                        kind: "kernel",
                        id: kid.clone(),
                    });
                };
                if index.kernel_owner.insert(kid.clone(), i).is_some() {
                    return Err(invalid(*line, format!("kernel `{kid}` launched by two operators")));
                }
                let k = &self.kernels[ki].1;
                if k.start_us < op.start_us || k.end_us > op.end_us {
                    return Err(invalid(
                        *line,
                        format!("kernel `{kid}` lies outside operator `{}` interval", op.op_id),
                    ));
                }
            }
        }
        check_acyclic(&self.ops, &index.producer)?;

        if let Some((line, prog)) = &self.program {
            check_program(*line, prog)?;
        }
        for (line, bt) in &self.block_traces {
            let Some((_, prog)) = &self.program else {
                return Err(TraceError::Reference {
                    line: *line,
                    kind: "function",
                    id: bt.func.clone(),
                });
            };
            let Some(blocks) = prog.functions.get(&bt.func) else {
                return Err(TraceError::Reference {
                    line: *line,
                    kind: "function",
                    id: bt.func.clone(),
                });
            };
            if let Some(b) = bt.blocks.iter().find(|b| !blocks.contains(b)) {
                return Err(TraceError::Reference {
                    line: *line,
                    kind: "basic block",
                    id: b.clone(),
                });
            }
        }

        Ok(Trace {
            header,
            config: self.config,
            program: self.program.map(|(_, p)| p),
            tensors: self.tensors.into_iter().map(|(_, t)| t).collect(),
            ops: self.ops.into_iter().map(|(_, o)| o).collect(),
            kernels: self.kernels.into_iter().map(|(_, k)| k).collect(),
            power_segments: self.segments,
            power_samples: self.samples,
            block_traces: self.block_traces.into_iter().map(|(_, b)| b).collect(),
            index,
        })
    }
}

fn check_tensor(line: usize, t: &TensorSnapshot) -> Result<(), TraceError> {
    if t.shape.is_empty() {
        return Err(invalid(line, format!("tensor `{}` has an empty shape", t.tensor_id)));
    }
    if t.shape.contains(&0) {
        return Err(invalid(line, format!("tensor `{}` has a zero-sized dimension", t.tensor_id)));
    }
    if t.values.len() != t.element_count() {
        return Err(invalid(
            line,
            format!(
                "tensor `{}` holds {} values but shape {:?} needs {}",
                t.tensor_id,
                t.values.len(),
                t.shape,
                t.element_count()
            ),
        ));
    }
    if t.values.iter().any(|v| !v.is_finite()) {
        return Err(invalid(line, format!("tensor `{}` has non-finite values", t.tensor_id)));
    }
    Ok(())
}

fn check_acyclic(ops: &[(usize, OperatorEvent)], producer: &HashMap<String, usize>) -> Result<(), TraceError> {
    let n = ops.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, (_, op)) in ops.iter().enumerate() {
        for t in &op.input_tensor_ids {
            if let Some(&p) = producer.get(t) {
                succ[p].push(i);
                indegree[i] += 1;
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut visited = 0;
    while let Some(i) = ready.pop() {
        visited += 1;
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(s);
            }
        }
    }
    if visited != n {
        let (line, op) = ops
            .iter()
            .zip(&indegree)
            .find(|(_, &d)| d > 0)
            .map(|(o, _)| o)
            .expect("some operator left on a cycle");
        return Err(invalid(
            *line,
            format!("operators are not topologically orderable; `{}` lies on a cycle", op.op_id),
        ));
    }
    Ok(())
}

fn check_program(line: usize, prog: &ProgramModel) -> Result<(), TraceError> {
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for (func, blocks) in &prog.functions {
        for b in blocks {
            if let Some(other) = owner.insert(b, func) {
                return Err(invalid(line, format!("block `{b}` belongs to both `{other}` and `{func}`")));
            }
        }
    }
    let mut vars: HashSet<&str> = HashSet::new();
    let mut incoming: HashMap<&str, Vec<&str>> = HashMap::new();
    for e in &prog.def_use {
        if is_source_var(&e.to) {
            return Err(invalid(line, format!("source `{}` cannot be assigned (site {})", e.to, e.site)));
        }
        vars.insert(&e.from);
        vars.insert(&e.to);
        incoming.entry(&e.to).or_default().push(&e.from);
    }
    for (block, ctl) in &prog.block_control {
        if !owner.contains_key(block.as_str()) {
            return Err(TraceError::Reference {
                line,
                kind: "basic block",
                id: block.clone(),
            });
        }
        if !vars.contains(ctl.var.as_str()) {
            return Err(TraceError::Reference {
                line,
                kind: "def-use variable",
                id: ctl.var.clone(),
            });
        }
    }
    for v in &vars {
        if !is_source_var(v) && !incoming.contains_key(v) {
            return Err(invalid(line, format!("variable `{v}` has no definition and is not a source")));
        }
    }
    // Depth-first colouring over incoming edges detects def-use cycles.
    let mut state: HashMap<&str, u8> = HashMap::new();
    for start in incoming.keys() {
        if state.contains_key(start) {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        state.insert(start, 1);
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            let preds = incoming.get(v).map(Vec::as_slice).unwrap_or(&[]);
            if *next < preds.len() {
                let p = preds[*next];
                *next += 1;
                match state.get(p) {
                    Some(1) => return Err(invalid(line, format!("def-use cycle through `{p}`"))),
                    Some(_) => {}
                    None => {
                        state.insert(p, 1);
                        stack.push((p, 0));
                    }
                }
            } else {
                state.insert(v, 2);
                stack.pop();
            }
        }
    }
    Ok(())
}
