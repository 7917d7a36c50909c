//! Template realization, timing, power assignment and trace emission.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    Dispatch, GroundTruth, InjectedTruth, Injection, InjectionKind, Layout, ScenarioManifest, SegmentTruth, SimError,
    Template,
};
use crate::energy::{compute_ledger, EnergyConfig};
use crate::tensor_equiv::{merge_modes, permute_modes};
use crate::trace_model::{
    round_sig9, BlockTraceRecord, ConfigEntry, ControlKind, ControlRecord, DefUseEdge, Header, KernelEvent, KernelParam,
    OperatorEvent, PowerRecord, PowerSegment, ProgramModel, Record, TensorSnapshot, Trace, SCHEMA_VERSION,
};

const KERNEL_GAP_US: u64 = 5;
const OP_GAP_US: u64 = 10;
const LEAD_US: u64 = 100;
const DEMO_IDLE_US: u64 = 400_000;
const SHAPE: [usize; 3] = [2, 3, 4];
const QKV_SHAPE: [usize; 3] = [6, 3, 4];
const OUTPUT_NOISE: f64 = 0.002;
pub(super) const EXTRA_KERNEL: &str = "nccl_allreduce_join";
const EXTRA_COUNT: usize = 2;
const DEMO_OPS: [(&str, f64); 3] = [("arange", 266.0), ("contiguous", 317.0), ("linear", 455.0)];
const CHAIN_OPS: [&str; 8] = ["matmul", "gelu", "layernorm", "softmax", "conv2d", "relu", "dropout", "bias_add"];

/// One flag per segment: realized identically on both sides.
pub(super) fn segment_kinds(t: &Template) -> Vec<bool> {
    match *t {
        Template::Chain { length } => vec![true; length],
        Template::Diamond { count } => vec![true; 2 * count],
        Template::Transformer { blocks, norm } => {
            let block: &[bool] = if norm { &[true, false, false] } else { &[false, false] };
            block.repeat(blocks)
        }
        Template::SamplerDemo => vec![true; DEMO_OPS.len()],
    }
}

#[derive(Debug, Clone)]
struct KernelPlan {
    name: String,
    weight: f64,
    backtrace: Vec<String>,
    params: BTreeMap<String, KernelParam>,
    dur: u64,
    watts: f64,
}

#[derive(Debug, Clone)]
enum Extra {
    Gap { dur: u64, watts: f64 },
    Kernel(KernelPlan),
}

#[derive(Debug, Clone)]
struct OpPlan {
    id: String,
    name: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    kernels: Vec<KernelPlan>,
    tail_us: u64,
    extras: Vec<Extra>,
}

impl OpPlan {
    fn gap_us(&self) -> u64 {
        (self.kernels.len() as u64 - 1) * KERNEL_GAP_US + self.tail_us
    }

    fn joules(&self, idle: f64) -> f64 {
        let k: f64 = self.kernels.iter().map(|k| k.watts * k.dur as f64).sum();
        let x: f64 = self
            .extras
            .iter()
            .map(|e| match e {
                Extra::Gap { dur, watts } => watts * *dur as f64,
                Extra::Kernel(k) => k.watts * k.dur as f64,
            })
            .sum();
        (k + x + idle * self.gap_us() as f64) * 1e-6
    }

    fn kernel_names(&self) -> impl Iterator<Item = String> + '_ {
        self.kernels.iter().map(|k| k.name.clone()).chain(self.extras.iter().filter_map(|e| match e {
            Extra::Kernel(k) => Some(k.name.clone()),
            Extra::Gap { .. } => None,
        }))
    }
}

#[derive(Debug, Clone)]
struct SegPlan {
    module: String,
    fused_name: String,
    a: Vec<OpPlan>,
    b: Vec<OpPlan>,
    inputs_b: Vec<String>,
    exit_b: String,
    latency_us: u64,
    power_w: f64,
    /// Sampler demo: exact kernel duration and watts.
    fixed: Option<(u64, f64)>,
}

type Store = BTreeMap<String, (Vec<usize>, Vec<Vec<f64>>)>;

struct Gen {
    rng: ChaCha8Rng,
    batches: u32,
    layout: Layout,
    ta: Store,
    tb: Store,
    segs: Vec<SegPlan>,
}

impl Gen {
    fn fresh(&mut self, shape: &[usize]) -> Vec<Vec<f64>> {
        let n: usize = shape.iter().product();
        (0..self.batches)
            .map(|_| (0..n).map(|_| round_sig9(self.rng.sample(StandardNormal))).collect())
            .collect()
    }

    fn store_both(&mut self, id: &str, shape: &[usize], vals: Vec<Vec<f64>>) {
        self.ta.insert(id.to_string(), (shape.to_vec(), vals.clone()));
        self.store_b(id, shape, vals);
    }

    /// Stores in B's layout.
    fn store_b(&mut self, id: &str, shape: &[usize], vals: Vec<Vec<f64>>) {
        let choice = match self.layout {
            Layout::Canonical => 0,
            Layout::Permuted => 1,
            Layout::Merged => 2,
            Layout::Mixed => self.rng.random_range(0..3),
        };
        let perm = {
            let mut p: Vec<usize> = (0..shape.len()).collect();
            while choice == 1 && p.iter().enumerate().all(|(i, &x)| i == x) {
                p.shuffle(&mut self.rng);
            }
            p
        };
        let first = self.rng.random_range(0..shape.len() - 1);
        let mut out_shape = shape.to_vec();
        let out: Vec<Vec<f64>> = vals
            .into_iter()
            .map(|v| {
                let t = TensorSnapshot::new(id, shape.to_vec(), v);
                let t = match choice {
                    1 => permute_modes(&t, &perm),
                    2 => merge_modes(&t, first),
                    _ => t,
                };
                out_shape = t.shape.clone();
                t.values
            })
            .collect();
        self.tb.insert(id.to_string(), (out_shape, out));
    }

    /// Segment exit: B gets its layout, or output noise for a model output.
    fn exit(&mut self, id: &str, shape: &[usize], is_output: bool) {
        let vals = self.fresh(shape);
        if !is_output {
            return self.store_both(id, shape, vals);
        }
        self.ta.insert(id.to_string(), (shape.to_vec(), vals.clone()));
        let noisy = vals
            .iter()
            .map(|v| {
                v.iter()
                    .map(|x| round_sig9(x * (1.0 + self.rng.random_range(-OUTPUT_NOISE..OUTPUT_NOISE))))
                    .collect()
            })
            .collect();
        self.tb.insert(id.to_string(), (shape.to_vec(), noisy));
    }

    fn op(&mut self, id: &str, name: &str, module: &str, inputs: &[&str], outputs: &[&str], max_kernels: usize) -> OpPlan {
        let k = self.rng.random_range(1..=max_kernels);
        let kernels = (0..k)
            .map(|j| {
                let kname = format!("{}_k{j}", name.to_lowercase());
                KernelPlan {
                    backtrace: vec!["main".into(), "forward".into(), module.into(), format!("{}_fn", name.to_lowercase()), kname.clone()],
                    name: kname,
                    weight: self.rng.random_range(0.8..1.2),
                    params: BTreeMap::new(),
                    dur: 0,
                    watts: 0.0,
                }
            })
            .collect();
        OpPlan {
            id: id.into(),
            name: name.into(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            kernels,
            tail_us: 0,
            extras: Vec::new(),
        }
    }

    fn seg(&mut self, module: String, fused_name: &str, a: Vec<OpPlan>, b: Vec<OpPlan>, input_b: &str, exit_b: &str) {
        let latency_us = self.rng.random_range(1000..=3000);
        let power_w = self.rng.random_range(180.0..320.0);
        self.segs.push(SegPlan {
            module,
            fused_name: fused_name.into(),
            a,
            b,
            inputs_b: vec![input_b.into()],
            exit_b: exit_b.into(),
            latency_us,
            power_w,
            fixed: None,
        });
    }

    fn chain(&mut self, length: usize) {
        let mut cur = "x".to_string();
        for i in 0..length {
            let name = CHAIN_OPS[i % CHAIN_OPS.len()];
            let id = format!("l{i}.{name}");
            let out = format!("{id}:0");
            let module = format!("layer{i}");
            let op = self.op(&id, name, &module, &[&cur], &[&out], 3);
            self.exit(&out, &SHAPE, i + 1 == length);
            self.seg(module, &format!("fused_{name}"), vec![op.clone()], vec![op], &cur, &out);
            cur = out;
        }
    }

    fn diamond(&mut self, count: usize) {
        let mut cur = "x".to_string();
        for i in 0..count {
            let module = format!("stage{i}");
            let (u, v, w, y) = (format!("d{i}.u"), format!("d{i}.v"), format!("d{i}.w"), format!("d{i}.y"));
            let fork = self.op(&format!("d{i}.fork"), "linear", &module, &[&cur], &[&u], 2);
            self.exit(&u, &SHAPE, false);
            self.seg(format!("{module}.fork"), "fused_linear", vec![fork.clone()], vec![fork], &cur, &u);

            let left = self.op(&format!("d{i}.left"), "conv3x3", &module, &[&u], &[&v], 2);
            let right = self.op(&format!("d{i}.right"), "conv1x1", &module, &[&u], &[&w], 2);
            let join = self.op(&format!("d{i}.join"), "add", &module, &[&v, &w], &[&y], 1);
            for t in [&v, &w] {
                let vals = self.fresh(&SHAPE);
                self.store_both(t, &SHAPE, vals);
            }
            self.exit(&y, &SHAPE, i + 1 == count);
            let ops = vec![left, right, join];
            self.seg(format!("{module}.branch"), "fused_branch", ops.clone(), ops, &u, &y);
            cur = y;
        }
    }

    fn transformer(&mut self, blocks: usize, norm: bool) {
        let mut cur = "x".to_string();
        for b in 0..blocks {
            let p = format!("b{b}");
            if norm {
                let n = format!("{p}.n");
                let module = format!("block{b}.norm");
                let op = self.op(&format!("{p}.ln"), "layernorm", &module, &[&cur], &[&n], 2);
                self.exit(&n, &SHAPE, false);
                self.seg(module, "fused_layernorm", vec![op.clone()], vec![op], &cur, &n);
                cur = n;
            }
            let module = format!("block{b}.attn");
            let (q, k, v, qkv, a) = (format!("{p}.q"), format!("{p}.k"), format!("{p}.v"), format!("{p}.qkv"), format!("{p}.a"));
            let qv = self.fresh(&SHAPE);
            let mut kv = self.fresh(&SHAPE);
            // Q and K agree on the first batch; later batches tell them apart.
            kv[0] = qv[0].clone();
            let vv = self.fresh(&SHAPE);
            self.store_both(&q, &SHAPE, qv);
            self.store_both(&k, &SHAPE, kv);
            self.store_both(&v, &SHAPE, vv);
            let qkv_vals = self.fresh(&QKV_SHAPE);
            self.store_b(&qkv, &QKV_SHAPE, qkv_vals);

            let op_q = self.op(&format!("{p}.Q"), "Q", &module, &[&cur], &[&q], 1);
            let op_k = self.op(&format!("{p}.K"), "K", &module, &[&cur], &[&k], 1);
            let op_v = self.op(&format!("{p}.V"), "V", &module, &[&cur], &[&v], 1);
            let attn = self.op(&format!("{p}.Attn"), "Attn", &module, &[&q, &k, &v], &[&a], 2);
            let op_qkv = self.op(&format!("{p}.QKV"), "QKV", &module, &[&cur], &[&qkv], 1);
            let split = self.op(&format!("{p}.Split"), "Split", &module, &[&qkv], &[&q, &k, &v], 1);
            self.exit(&a, &SHAPE, false);
            self.seg(module, "fused_attention", vec![op_q, op_k, op_v, attn.clone()], vec![op_qkv, split, attn], &cur, &a);

            let module = format!("block{b}.ffn");
            let (m, y) = (format!("{p}.m"), format!("{p}.y"));
            let mul = self.op(&format!("{p}.Mul"), "Mul", &module, &[&a], &[&m], 1);
            let add = self.op(&format!("{p}.Add"), "Add", &module, &[&m], &[&y], 1);
            let linear = self.op(&format!("{p}.linear"), "linear", &module, &[&a], &[&y], 1);
            let mv = self.fresh(&SHAPE);
            self.ta.insert(m, (SHAPE.to_vec(), mv));
            self.exit(&y, &SHAPE, b + 1 == blocks);
            self.seg(module, "addmm", vec![mul, add], vec![linear], &a, &y);
            cur = y;
        }
    }

    fn sampler_demo(&mut self) {
        let mut cur = "x".to_string();
        for (i, (name, watts)) in DEMO_OPS.iter().enumerate() {
            let id = format!("s{i}.{name}");
            let out = format!("{id}:0");
            let module = format!("step{i}");
            let op = self.op(&id, name, &module, &[&cur], &[&out], 1);
            self.exit(&out, &SHAPE, i + 1 == DEMO_OPS.len());
            let dur = self.rng.random_range(4_500..=5_500);
            self.seg(module, "unused", vec![op.clone()], vec![op], &cur, &out);
            self.segs.last_mut().unwrap().fixed = Some((dur, *watts));
            cur = out;
        }
    }
}

/// Splits `latency` over the side's operators and each operator over its kernels.
fn assign_durations(ops: &mut [OpPlan], latency: u64, fixed: Option<(u64, f64)>) {
    let n = ops.len() as u64;
    let d = match fixed {
        Some((dur, _)) => dur,
        None => (latency - (n - 1) * OP_GAP_US) / n,
    };
    for op in ops {
        let k = op.kernels.len() as u64;
        let kd = (d - (k - 1) * KERNEL_GAP_US) / k;
        for kernel in &mut op.kernels {
            kernel.dur = kd;
        }
        op.tail_us = d - k * kd - (k - 1) * KERNEL_GAP_US;
    }
}

/// Kernel watts proportional to weight, scaled so the side spends `joules`.
fn solve_watts(ops: &mut [OpPlan], joules: f64, idle: f64) {
    let gaps: u64 = ops.iter().map(OpPlan::gap_us).sum();
    let weighted: f64 = ops.iter().flat_map(|o| &o.kernels).map(|k| k.weight * k.dur as f64).sum();
    let w = (joules * 1e6 - idle * gaps as f64) / weighted;
    for k in ops.iter_mut().flat_map(|o| o.kernels.iter_mut()) {
        k.watts = w * k.weight;
    }
}

struct Timeline {
    ops: Vec<OperatorEvent>,
    kernels: Vec<KernelEvent>,
    power: Vec<PowerSegment>,
}

impl Timeline {
    fn joules(&self) -> f64 {
        self.power.iter().map(|s| s.watts * (s.end_us - s.start_us) as f64).sum::<f64>() * 1e-6
    }
}

fn layout(ops: &[&OpPlan], idle: f64, lead: u64, op_gap: u64) -> Timeline {
    let mut power = Vec::new();
    let mut t = 0u64;
    let mut push = |t: &mut u64, dur: u64, watts: f64| {
        if dur > 0 {
            power.push(PowerSegment { start_us: *t, end_us: *t + dur, watts });
            *t += dur;
        }
    };
    let mut events = Vec::new();
    let mut kernels = Vec::new();
    let mut corr = 1u64;
    let mut launch = |t: u64, k: &KernelPlan, kernels: &mut Vec<KernelEvent>, ids: &mut Vec<String>| {
        let id = format!("k{corr}");
        kernels.push(KernelEvent {
            kernel_id: id.clone(),
            kernel_name: k.name.clone(),
            correlation_id: corr,
            start_us: t,
            end_us: t + k.dur,
            backtrace: k.backtrace.clone(),
            params: k.params.clone(),
        });
        ids.push(id);
        corr += 1;
    };
    push(&mut t, lead, idle);
    for (i, op) in ops.iter().enumerate() {
        if i > 0 {
            push(&mut t, op_gap, idle);
        }
        let start = t;
        let mut ids = Vec::new();
        for (j, k) in op.kernels.iter().enumerate() {
            if j > 0 {
                push(&mut t, KERNEL_GAP_US, idle);
            }
            launch(t, k, &mut kernels, &mut ids);
            push(&mut t, k.dur, k.watts);
        }
        push(&mut t, op.tail_us, idle);
        for e in &op.extras {
            match e {
                Extra::Gap { dur, watts } => push(&mut t, *dur, *watts),
                Extra::Kernel(k) => {
                    launch(t, k, &mut kernels, &mut ids);
                    push(&mut t, k.dur, k.watts);
                }
            }
        }
        events.push(OperatorEvent {
            op_id: op.id.clone(),
            op_name: op.name.clone(),
            input_tensor_ids: op.inputs.clone(),
            output_tensor_ids: op.outputs.clone(),
            kernel_ids: ids,
            start_us: start,
            end_us: t,
        });
    }
    push(&mut t, lead, idle);
    Timeline {
        ops: events,
        kernels,
        power,
    }
}

/// Static program facts and per-side records for a misconfiguration.
struct Program {
    model: ProgramModel,
    config: Vec<(String, String, String)>,
    blocks: Option<(String, Vec<String>, Vec<String>)>,
    key: String,
    source: String,
}

fn program(inj: &Injection, op: &OpPlan, module: &str) -> Program {
    let source = inj.source_key.clone().unwrap_or_else(|| match inj.dispatch {
        Dispatch::Param => "arg:use_tensor_cores".into(),
        _ => "config:matmul.allow_tf32".into(),
    });
    let base = source
        .split_once(':')
        .map_or(source.as_str(), |(_, rest)| rest)
        .rsplit('.')
        .next()
        .unwrap_or("flag")
        .to_string();
    let key = format!("use_{base}");
    let mut vars = vec![source.clone()];
    vars.extend((1..inj.hops).map(|i| format!("{base}_{i}")));
    vars.push(key.clone());
    let def_use = vars
        .windows(2)
        .enumerate()
        .map(|(i, w)| DefUseEdge {
            from: w[0].clone(),
            to: w[1].clone(),
            site: format!("{module}.py:{}", 10 * (i + 1)),
        })
        .collect();
    let mut model = ProgramModel {
        def_use,
        ..Default::default()
    };
    let mut blocks = None;
    if inj.dispatch != Dispatch::Param {
        let func = format!("{}_dispatch", op.name.to_lowercase());
        let b = |s: &str| format!("{func}.{s}");
        model
            .functions
            .insert(func.clone(), ["entry", "check", "fast", "slow", "launch"].iter().map(|s| b(s)).collect());
        let kind = if inj.dispatch == Dispatch::Switch { ControlKind::Switch } else { ControlKind::Branch };
        model.block_control.insert(b("check"), ControlRecord { kind, var: key.clone() });
        let fast = ["entry", "check", "fast", "launch"].iter().map(|s| b(s)).collect();
        let slow = ["entry", "check", "slow", "launch"].iter().map(|s| b(s)).collect();
        blocks = Some((func, fast, slow));
    }
    let config = match source.strip_prefix("config:") {
        Some(k) => vec![(k.to_string(), "true".to_string(), "false".to_string())],
        None => Vec::new(),
    };
    Program {
        model,
        config,
        blocks,
        key,
        source,
    }
}

struct SideOut<'a> {
    system: &'a str,
    tensors: &'a Store,
    timeline: &'a Timeline,
    config: Vec<(String, String)>,
    model: Option<&'a ProgramModel>,
    blocks: Option<(String, Vec<String>)>,
}

fn emit(m: &ScenarioManifest, side: SideOut) -> Result<Trace, SimError> {
    let mut recs = vec![Record::Header(Header {
        schema_version: SCHEMA_VERSION,
        system: side.system.into(),
        workload: m.workload.clone(),
        seed: m.seed,
        sampler: None,
    })];
    for (key, value) in side.config {
        recs.push(Record::Config(ConfigEntry { key, value }));
    }
    if let Some(model) = side.model {
        recs.push(Record::Progmodel(model.clone()));
    }
    let used: BTreeSet<&String> = side
        .timeline
        .ops
        .iter()
        .flat_map(|o| o.input_tensor_ids.iter().chain(&o.output_tensor_ids))
        .collect();
    for id in used {
        let (shape, vals) = &side.tensors[id];
        for (batch, v) in vals.iter().enumerate() {
            recs.push(Record::Tensor(TensorSnapshot::new(id.clone(), shape.clone(), v.clone()).with_batch(batch as u32)));
        }
    }
    recs.extend(side.timeline.ops.iter().cloned().map(Record::Op));
    recs.extend(side.timeline.kernels.iter().cloned().map(Record::Kernel));
    recs.extend(side.timeline.power.iter().map(|s| Record::Power(PowerRecord::Segment(*s))));
    if let Some((func, blocks)) = side.blocks {
        recs.push(Record::Blocktrace(BlockTraceRecord {
            func,
            run_index: 0,
            blocks,
        }));
    }
    Ok(Trace::from_records(recs)?)
}

fn sorted_names<'a>(ops: impl Iterator<Item = &'a OpPlan>) -> Vec<String> {
    let mut v: Vec<String> = ops.flat_map(|o| o.kernel_names().collect::<Vec<_>>()).collect();
    v.sort();
    v
}

pub(super) fn build(m: &ScenarioManifest) -> Result<(Trace, Trace, GroundTruth), SimError> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(m.seed),
        batches: m.batches,
        layout: m.layout_b,
        ta: Store::new(),
        tb: Store::new(),
        segs: Vec::new(),
    };
    let demo = m.template == Template::SamplerDemo;
    let idle = if demo { g.rng.random_range(68.0..72.0) } else { g.rng.random_range(60.0..70.0) };
    let x = g.fresh(&SHAPE);
    g.ta.insert("x".into(), (SHAPE.to_vec(), x.clone()));
    g.tb.insert("x".into(), (SHAPE.to_vec(), x));
    match m.template {
        Template::Chain { length } => g.chain(length),
        Template::Diamond { count } => g.diamond(count),
        Template::Transformer { blocks, norm } => g.transformer(blocks, norm),
        Template::SamplerDemo => g.sampler_demo(),
    }
    let (lead, op_gap) = if demo { (DEMO_IDLE_US, DEMO_IDLE_US) } else { (LEAD_US, OP_GAP_US) };

    // Structural part of the injection.
    let mut prog = None;
    if let Some(inj) = &m.injection {
        let seg = &mut g.segs[inj.target_segment];
        match inj.kind {
            InjectionKind::ApiMisuse => {
                let name = seg.fused_name.clone();
                let kname = format!("{name}_kernel");
                seg.b = vec![OpPlan {
                    id: format!("{}.{name}", seg.module),
                    name: name.clone(),
                    inputs: seg.inputs_b.clone(),
                    outputs: vec![seg.exit_b.clone()],
                    kernels: vec![KernelPlan {
                        name: kname.clone(),
                        weight: 1.0,
                        backtrace: vec!["main".into(), "forward".into(), seg.module.clone(), format!("{name}_fn"), kname],
                        params: BTreeMap::new(),
                        dur: 0,
                        watts: 0.0,
                    }],
                    tail_us: 0,
                    extras: Vec::new(),
                }];
            }
            InjectionKind::Misconfiguration => {
                let p = program(inj, seg.a.last().unwrap(), &seg.module);
                for (side, (suffix, value)) in [(&mut seg.a, ("tf32", "tensor_op")), (&mut seg.b, ("fp32", "default"))] {
                    let k = &mut side.last_mut().unwrap().kernels[0];
                    match &p.blocks {
                        Some((func, _, _)) => {
                            k.name = format!("{}_{suffix}", k.name);
                            let leaf = k.backtrace.len() - 1;
                            k.backtrace[leaf] = func.clone();
                            k.backtrace.push(k.name.clone());
                        }
                        None => {
                            k.params.insert(
                                "math_mode".into(),
                                KernelParam {
                                    value: value.into(),
                                    var: Some(p.key.clone()),
                                },
                            );
                        }
                    }
                }
                prog = Some(p);
            }
            InjectionKind::Redundant => {}
        }
    }

    // Timing and baseline power: B spends exactly what A spends per segment.
    let mut seg_joules_a = Vec::with_capacity(g.segs.len());
    for s in &mut g.segs {
        assign_durations(&mut s.a, s.latency_us, s.fixed);
        assign_durations(&mut s.b, s.latency_us, s.fixed);
        for k in s.a.iter_mut().flat_map(|o| o.kernels.iter_mut()) {
            k.watts = s.fixed.map_or(s.power_w * k.weight, |f| f.1);
        }
        let e: f64 = s.a.iter().map(|o| o.joules(idle)).sum();
        match s.fixed {
            Some((_, w)) => s.b.iter_mut().flat_map(|o| o.kernels.iter_mut()).for_each(|k| k.watts = w),
            None => solve_watts(&mut s.b, e, idle),
        }
        seg_joules_a.push(e);
    }
    let ops_of = |segs: &[SegPlan], b: bool| -> Vec<OpPlan> {
        segs.iter().flat_map(|s| if b { s.b.clone() } else { s.a.clone() }).collect()
    };
    let base_b = {
        let ops = ops_of(&g.segs, true);
        layout(&ops.iter().collect::<Vec<_>>(), idle, lead, op_gap).joules()
    };

    // Energy part of the injection.
    let mut injected = None;
    if let Some(inj) = &m.injection {
        let t = inj.target_segment;
        let e = seg_joules_a[t];
        let extra = match (inj.magnitude, inj.end_to_end) {
            (Some(mag), _) => mag * e,
            (None, Some(f)) => f * base_b / (1.0 - f),
            (None, None) => unreachable!("validated"),
        };
        let magnitude = extra / e;
        if !(magnitude > 0.0 && magnitude <= 2.0) {
            return Err(SimError::Manifest(format!("derived magnitude {magnitude:.4} outside (0, 2]")));
        }
        let seg = &mut g.segs[t];
        let last = seg.b.last_mut().unwrap();
        let mut extra_kernels = Vec::new();
        match inj.kind {
            InjectionKind::Misconfiguration | InjectionKind::ApiMisuse => {
                let k = &mut last.kernels[0];
                k.watts += extra * 1e6 / k.dur as f64;
            }
            InjectionKind::Redundant => {
                let pf = idle + g.rng.random_range(60.0..100.0);
                let px = g.rng.random_range(200.0..300.0);
                let c = EXTRA_COUNT as f64;
                // Forced gaps carry about 40% of the excess.
                let gap = ((0.4 * extra * 1e6 / (c * pf)).round() as u64).max(1);
                let each = (extra - c * gap as f64 * pf * 1e-6) / c;
                let dur = ((each * 1e6 / px).round() as u64).max(1);
                for _ in 0..EXTRA_COUNT {
                    last.extras.push(Extra::Gap { dur: gap, watts: pf });
                    last.extras.push(Extra::Kernel(KernelPlan {
                        name: EXTRA_KERNEL.into(),
                        weight: 1.0,
                        backtrace: vec!["main".into(), "forward".into(), seg.module.clone(), "join_fn".into(), EXTRA_KERNEL.into()],
                        params: BTreeMap::new(),
                        dur,
                        watts: each * 1e6 / dur as f64,
                    }));
                    extra_kernels.push(EXTRA_KERNEL.to_string());
                }
            }
        }
        injected = Some(InjectedTruth {
            kind: inj.kind,
            segment: t,
            magnitude,
            wasted_joules: extra,
            end_to_end_fraction: 0.0,
            source: prog.as_ref().map(|p| p.source.clone()),
            key_var: prog.as_ref().map(|p| p.key.clone()),
            extra_kernels,
            kernels_a: sorted_names(seg.a.iter()),
            kernels_b: sorted_names(seg.b.iter()),
        });
    }

    let ops_a = ops_of(&g.segs, false);
    let ops_b = ops_of(&g.segs, true);
    let tl_a = layout(&ops_a.iter().collect::<Vec<_>>(), idle, lead, op_gap);
    let tl_b = layout(&ops_b.iter().collect::<Vec<_>>(), idle, lead, op_gap);
    let side_cfg = |b: bool| -> Vec<(String, String)> {
        prog.iter()
            .flat_map(|p| p.config.iter().map(move |(k, va, vb)| (k.clone(), if b { vb.clone() } else { va.clone() })))
            .collect()
    };
    let side_blocks = |b: bool| {
        prog.as_ref()
            .and_then(|p| p.blocks.as_ref())
            .map(|(f, ba, bb)| (f.clone(), if b { bb.clone() } else { ba.clone() }))
    };
    let model = prog.as_ref().map(|p| &p.model);
    let trace_a = emit(
        m,
        SideOut {
            system: "system_a",
            tensors: &g.ta,
            timeline: &tl_a,
            config: side_cfg(false),
            model,
            blocks: side_blocks(false),
        },
    )?;
    let trace_b = emit(
        m,
        SideOut {
            system: "system_b",
            tensors: &g.tb,
            timeline: &tl_b,
            config: side_cfg(true),
            model,
            blocks: side_blocks(true),
        },
    )?;

    let cfg = EnergyConfig::default();
    let (la, lb) = match (compute_ledger(&trace_a, &cfg), compute_ledger(&trace_b, &cfg)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Err(SimError::Manifest(format!("ledger of generated trace: {e}"))),
    };
    let segments = g
        .segs
        .iter()
        .map(|s| {
            let ops_a: Vec<String> = s.a.iter().map(|o| o.id.clone()).collect();
            let ops_b: Vec<String> = s.b.iter().map(|o| o.id.clone()).collect();
            SegmentTruth {
                joules_a: la.subgraph_joules(&ops_a),
                joules_b: lb.subgraph_joules(&ops_b),
                ops_a,
                ops_b,
            }
        })
        .collect();
    if let Some(inj) = &mut injected {
        inj.end_to_end_fraction = inj.wasted_joules / la.total_joules.max(lb.total_joules);
    }
    let truth = GroundTruth {
        workload: m.workload.clone(),
        seed: m.seed,
        segments,
        injected,
        total_joules_a: la.total_joules,
        total_joules_b: lb.total_joules,
    };
    Ok((trace_a, trace_b, truth))
}
