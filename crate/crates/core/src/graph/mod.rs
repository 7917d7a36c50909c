//! Computational graph: operators are nodes, tensors are edges.
//!
//! A virtual SOURCE (index 0) produces every model input and a virtual SINK
//! (last index) consumes every terminal output, so the graph always has a
//! unique entry and exit.

mod dominators;

pub use dominators::{dominators, DominatorInfo};

use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::trace_model::Trace;

pub const SOURCE_ID: &str = "SOURCE";
pub const SINK_ID: &str = "SINK";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("operators form a cycle through `{0}`")]
    Cycle(String),
    #[error("tensor `{0}` is neither produced nor consumed by any operator")]
    OrphanTensor(String),
    #[error("operator `{op}` reads and writes tensor `{tensor}` in place")]
    InPlace { op: String, tensor: String },
    #[error("tensor `{0}` has more than one producer")]
    DuplicateProducer(String),
    #[error("operator id `{0}` is duplicated or reserved")]
    DuplicateOp(String),
}

/// Operator description independent of any trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSpec {
    pub id: String,
    pub name: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl OpSpec {
    pub fn new(id: &str, name: &str, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Source,
    Op,
    Sink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: String,
    pub name: String,
    pub kind: NodeKind,
    pub outputs: Vec<String>,
}

/// A tensor flowing between two nodes. `tensor` is `None` for the virtual
/// edges that keep input-less or output-less operators connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub tensor: Option<String>,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    succ: Vec<Vec<usize>>,
    pred: Vec<Vec<usize>>,
    topo: Vec<usize>,
    rank: Vec<usize>,
    index: HashMap<String, usize>,
    producer: HashMap<String, usize>,
}

/// Builds the graph of a validated trace.
pub fn build_graph(t: &Trace) -> Result<CompGraph, GraphError> {
    let specs: Vec<OpSpec> = t
        .ops
        .iter()
        .map(|o| OpSpec {
            id: o.op_id.clone(),
            name: o.op_name.clone(),
            inputs: o.input_tensor_ids.clone(),
            outputs: o.output_tensor_ids.clone(),
        })
        .collect();
    let g = CompGraph::from_ops(&specs)?;
    let known: HashSet<&str> = specs
        .iter()
        .flat_map(|s| s.inputs.iter().chain(&s.outputs))
        .map(String::as_str)
        .collect();
    if let Some(orphan) = t.tensors.iter().find(|s| !known.contains(s.tensor_id.as_str())) {
        return Err(GraphError::OrphanTensor(orphan.tensor_id.clone()));
    }
    Ok(g)
}

impl CompGraph {
    pub fn from_ops(ops: &[OpSpec]) -> Result<Self, GraphError> {
        let n = ops.len() + 2;
        let sink = n - 1;
        let mut index = HashMap::new();
        index.insert(SOURCE_ID.to_string(), 0);
        index.insert(SINK_ID.to_string(), sink);
        let mut producer: HashMap<String, usize> = HashMap::new();
        for (i, op) in ops.iter().enumerate() {
            if index.insert(op.id.clone(), i + 1).is_some() {
                return Err(GraphError::DuplicateOp(op.id.clone()));
            }
            if let Some(t) = op.inputs.iter().find(|t| op.outputs.contains(t)) {
                return Err(GraphError::InPlace {
                    op: op.id.clone(),
                    tensor: t.clone(),
                });
            }
            for t in &op.outputs {
                if producer.insert(t.clone(), i + 1).is_some() {
                    return Err(GraphError::DuplicateProducer(t.clone()));
                }
            }
        }

        let mut model_inputs = Vec::new();
        let mut seen_inputs = HashSet::new();
        let mut consumed = HashSet::new();
        let mut edges = Vec::new();
        for (i, op) in ops.iter().enumerate() {
            if op.inputs.is_empty() {
                edges.push(Edge {
                    tensor: None,
                    from: 0,
                    to: i + 1,
                });
            }
            for t in &op.inputs {
                consumed.insert(t.as_str());
                let from = match producer.get(t) {
                    Some(&p) => p,
                    None => {
                        if seen_inputs.insert(t.clone()) {
                            model_inputs.push(t.clone());
                        }
                        0
                    }
                };
                edges.push(Edge {
                    tensor: Some(t.clone()),
                    from,
                    to: i + 1,
                });
            }
        }
        for (i, op) in ops.iter().enumerate() {
            if op.outputs.is_empty() {
                edges.push(Edge {
                    tensor: None,
                    from: i + 1,
                    to: sink,
                });
            }
            for t in op.outputs.iter().filter(|t| !consumed.contains(t.as_str())) {
                edges.push(Edge {
                    tensor: Some(t.clone()),
                    from: i + 1,
                    to: sink,
                });
            }
        }

        let mut nodes = Vec::with_capacity(n);
        nodes.push(Node {
            id: SOURCE_ID.into(),
            name: SOURCE_ID.into(),
            kind: NodeKind::Source,
            outputs: model_inputs,
        });
        nodes.extend(ops.iter().map(|op| Node {
            id: op.id.clone(),
            name: op.name.clone(),
            kind: NodeKind::Op,
            outputs: op.outputs.clone(),
        }));
        nodes.push(Node {
            id: SINK_ID.into(),
            name: SINK_ID.into(),
            kind: NodeKind::Sink,
            outputs: Vec::new(),
        });

        let mut succ_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut pred_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for e in &edges {
            succ_sets[e.from].insert(e.to);
            pred_sets[e.to].insert(e.from);
        }
        let succ: Vec<Vec<usize>> = succ_sets.into_iter().map(|s| s.into_iter().collect()).collect();
        let pred: Vec<Vec<usize>> = pred_sets.into_iter().map(|s| s.into_iter().collect()).collect();

        // Kahn's algorithm, lowest index first, for a stable order.
        let mut indegree: Vec<usize> = pred.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<usize>> = (0..n).filter(|&v| indegree[v] == 0).map(Reverse).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(Reverse(v)) = heap.pop() {
            topo.push(v);
            for &s in &succ[v] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    heap.push(Reverse(s));
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&v| indegree[v] > 0).expect("a node remains on the cycle");
            return Err(GraphError::Cycle(nodes[stuck].id.clone()));
        }
        let mut rank = vec![0; n];
        for (r, &v) in topo.iter().enumerate() {
            rank[v] = r;
        }

        Ok(Self {
            nodes,
            edges,
            succ,
            pred,
            topo,
            rank,
            index,
            producer,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn source(&self) -> usize {
        0
    }

    pub fn sink(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn is_virtual(&self, v: usize) -> bool {
        v == self.source() || v == self.sink()
    }

    /// Output tensors of node `v`; SOURCE outputs the model inputs.
    pub fn out(&self, v: usize) -> &[String] {
        &self.nodes[v].outputs
    }

    pub fn succ(&self, v: usize) -> &[usize] {
        &self.succ[v]
    }

    pub fn pred(&self, v: usize) -> &[usize] {
        &self.pred[v]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Position of `v` in the topological order.
    pub fn rank(&self, v: usize) -> usize {
        self.rank[v]
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Node producing tensor `t` (SOURCE for model inputs).
    pub fn producer_of(&self, t: &str) -> Option<usize> {
        self.producer
            .get(t)
            .copied()
            .or_else(|| self.nodes[0].outputs.iter().any(|x| x == t).then_some(0))
    }

    /// Terminal tensors consumed by SINK, in edge order.
    pub fn model_outputs(&self) -> Vec<String> {
        self.edges
            .iter()
            .filter(|e| e.to == self.sink())
            .filter_map(|e| e.tensor.clone())
            .collect()
    }

    /// Every tensor edge, model inputs first, then in producer order.
    pub fn tensor_ids(&self) -> Vec<String> {
        self.nodes.iter().flat_map(|n| n.outputs.iter().cloned()).collect()
    }

    pub fn op_count(&self) -> usize {
        self.nodes.len() - 2
    }

    /// Graph-description text, one statement per node and edge.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph G {\n  rankdir=LR;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let shape = if n.kind == NodeKind::Op { "box" } else { "ellipse" };
            let _ = writeln!(s, "  n{i} [label=\"{}\\n{}\", shape={shape}];", escape(&n.id), escape(&n.name));
        }
        for e in &self.edges {
            match &e.tensor {
                Some(t) => {
                    let _ = writeln!(s, "  n{} -> n{} [label=\"{}\"];", e.from, e.to, escape(t));
                }
                None => {
                    let _ = writeln!(s, "  n{} -> n{} [style=dashed];", e.from, e.to);
                }
            }
        }
        s.push_str("}\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
