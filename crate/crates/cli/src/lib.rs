//! Pipeline wiring shared by the binary and the acceptance suite.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use diffwatt_core::detect::{self, Category, DetectConfig, DetectionReport, Pairing, Verdict};
use diffwatt_core::diagnose::{diagnose_finding, DiagnosisReport};
use diffwatt_core::energy::{compute_ledger, EnergyConfig, EnergyLedger, Method};
use diffwatt_core::graph::build_graph;
use diffwatt_core::simulate::{generate, preset, Scenario};
use diffwatt_core::subgraph_match::{match_tensors, recursive_match, segment_cost_report, CostReport, MatchResult, TensorPairSet};
use diffwatt_core::tensor_equiv::DEFAULT_EPSILON;
use diffwatt_core::trace_model::{load_trace, validate_pairing, PairingReport, Trace};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunConfig {
    pub epsilon: f64,
    pub threshold: f64,
    pub method: Method,
    pub period_us: u64,
    pub delay_us: u64,
    pub repeat: u32,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EnergyConfig::default();
        Self {
            epsilon: DEFAULT_EPSILON,
            threshold: detect::DEFAULT_THRESHOLD,
            method: e.method,
            period_us: e.period_us,
            delay_us: e.delay_us,
            repeat: e.repeat,
            seed: e.seed,
        }
    }
}

impl RunConfig {
    pub fn energy(&self) -> EnergyConfig {
        EnergyConfig {
            method: self.method,
            period_us: self.period_us,
            delay_us: self.delay_us,
            repeat: self.repeat,
            seed: self.seed,
        }
    }

    pub fn detect(&self) -> DetectConfig {
        DetectConfig {
            threshold: self.threshold,
            epsilon: self.epsilon,
        }
    }

    pub fn check(&self) -> Result<()> {
        ensure!(self.epsilon > 0.0 && self.epsilon < 1.0, "epsilon {} outside (0, 1)", self.epsilon);
        ensure!(self.threshold > 0.0 && self.threshold <= 1.0, "threshold {} outside (0, 1]", self.threshold);
        ensure!(self.repeat >= 1, "repeat must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FindingDiagnosis {
    pub pair_index: usize,
    pub category: Option<Category>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<DiagnosisReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub pairing: PairingReport,
    pub tensors: TensorPairSet,
    pub matching: MatchResult,
    pub cost: CostReport,
    pub ledger_a: EnergyLedger,
    pub ledger_b: EnergyLedger,
    pub detection: DetectionReport,
    pub diagnoses: Vec<FindingDiagnosis>,
}

impl Analysis {
    pub fn exit_code(&self) -> i32 {
        if self.detection.has_waste() {
            2
        } else {
            0
        }
    }

    pub fn diagnosis(&self, pair_index: usize) -> Option<&DiagnosisReport> {
        self.diagnoses
            .iter()
            .find(|d| d.pair_index == pair_index)
            .and_then(|d| d.report.as_ref())
    }
}

pub fn diagnose_all(report: &DetectionReport, p: Pairing) -> Vec<FindingDiagnosis> {
    report
        .waste()
        .map(|f| {
            let (report, error) = match diagnose_finding(f, p) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            FindingDiagnosis {
                pair_index: f.pair_index,
                category: f.category,
                report,
                error,
            }
        })
        .collect()
}

/// Full analysis of two loaded traces.
pub fn analyze(a: &Trace, b: &Trace, cfg: &RunConfig) -> Result<Analysis> {
    cfg.check()?;
    let pairing = validate_pairing(a, b, cfg.epsilon).context("pairing")?;
    let ga = build_graph(a).context("graph: trace A")?;
    let gb = build_graph(b).context("graph: trace B")?;
    let tensors = match_tensors(a, &ga, b, &gb, cfg.epsilon).context("tensors")?;
    let t0 = Instant::now();
    let matching = recursive_match(&ga, &gb, &tensors).context("match")?;
    let cost = segment_cost_report(&matching, t0.elapsed());
    let ecfg = cfg.energy();
    let ledger_a = compute_ledger(a, &ecfg).context("energy: trace A")?;
    let ledger_b = compute_ledger(b, &ecfg).context("energy: trace B")?;
    let p = Pairing {
        trace_a: a,
        trace_b: b,
        ledger_a: &ledger_a,
        ledger_b: &ledger_b,
    };
    let findings = detect::detect_waste(&matching.pairs, p, cfg.detect()).context("detect")?;
    let detection = detect::report(findings, cfg.threshold, &ledger_a, &ledger_b);
    let diagnoses = diagnose_all(&detection, p);
    Ok(Analysis {
        pairing,
        tensors,
        matching,
        cost,
        ledger_a,
        ledger_b,
        detection,
        diagnoses,
    })
}

#[derive(Serialize)]
pub struct RunReport<'a> {
    pub schema_version: u32,
    pub seed: u64,
    pub workload: &'a str,
    pub config: &'a RunConfig,
    pub detection: &'a DetectionReport,
    pub diagnoses: &'a [FindingDiagnosis],
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads both traces, runs every stage and writes `report.json` into `out_dir`.
pub fn run_pipeline(a: &Path, b: &Path, cfg: &RunConfig, out_dir: &Path, keep_intermediates: bool) -> Result<Analysis> {
    let ta = load_trace(a).context("validate: trace A")?;
    let tb = load_trace(b).context("validate: trace B")?;
    let an = analyze(&ta, &tb, cfg)?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    write_report(&ta, cfg, &an, out_dir, keep_intermediates)?;
    Ok(an)
}

pub fn write_report(ta: &Trace, cfg: &RunConfig, an: &Analysis, out_dir: &Path, keep_intermediates: bool) -> Result<()> {
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.seed,
        workload: &ta.header.workload,
        config: cfg,
        detection: &an.detection,
        diagnoses: &an.diagnoses,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    if keep_intermediates {
        write_json(&out_dir.join("pairing.json"), &an.pairing)?;
        write_json(&out_dir.join("tensors.json"), &an.tensors)?;
        write_json(&out_dir.join("match.json"), &an.matching)?;
        write_json(&out_dir.join("cost.json"), &an.cost)?;
        write_json(&out_dir.join("ledger_a.json"), &an.ledger_a)?;
        write_json(&out_dir.join("ledger_b.json"), &an.ledger_b)?;
        write_json(&out_dir.join("findings.json"), &an.detection)?;
        write_json(&out_dir.join("diagnosis.json"), &an.diagnoses)?;
    }
    Ok(())
}

/// Human summary for standard output.
pub fn summary(an: &Analysis) -> String {
    let mut s = detect::summary(&an.detection);
    for d in &an.diagnoses {
        match (&d.report, &d.error) {
            (Some(r), _) => {
                if let Some(src) = &r.primary_source {
                    let _ = writeln!(s, "  pair {:>3}: source {src}", d.pair_index);
                }
                if let Some(m) = &r.api_misuse {
                    let _ = writeln!(
                        s,
                        "  pair {:>3}: kernels {:?} replace {:?}",
                        d.pair_index, m.wasteful_kernels, m.efficient_kernels
                    );
                }
                if !r.extra_kernels.is_empty() {
                    let j: f64 = r.extra_kernels.iter().map(|k| k.joules).sum();
                    let _ = writeln!(
                        s,
                        "  pair {:>3}: {} extra kernel(s), {j:.4} J",
                        d.pair_index,
                        r.extra_kernels.len()
                    );
                }
            }
            (None, Some(e)) => {
                let _ = writeln!(s, "  pair {:>3}: diagnosis failed: {e}", d.pair_index);
            }
            _ => {}
        }
    }
    s
}

/// Analyzes a generated scenario in memory.
pub fn analyze_scenario(s: &Scenario, cfg: &RunConfig) -> Result<Analysis> {
    analyze(&s.trace_a, &s.trace_b, cfg).with_context(|| format!("scenario {}", s.manifest.workload))
}

pub fn load_preset(name: &str) -> Result<Scenario> {
    let Some(m) = preset(name) else {
        bail!("unknown preset `{name}`");
    };
    Ok(generate(&m)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct OpFidelity {
    pub op_id: String,
    pub op_name: String,
    pub truth_watts: f64,
    /// Mean signed relative power error over seeds.
    pub sampled_error: f64,
    pub replay_error: f64,
    /// Mean absolute relative power error over seeds.
    pub sampled_abs_error: f64,
    pub replay_abs_error: f64,
}

/// Per-operator power error of direct sampling and replay against ground truth.
pub fn sampler_fidelity(trace: &Trace, period_us: u64, delay_us: u64, repeat: u32, seeds: &[u64]) -> Result<Vec<OpFidelity>> {
    let truth = compute_ledger(trace, &EnergyConfig::default())?;
    let mut rows: Vec<OpFidelity> = truth
        .ops
        .iter()
        .map(|o| OpFidelity {
            op_id: o.op_id.clone(),
            op_name: o.op_name.clone(),
            truth_watts: o.watts(),
            sampled_error: 0.0,
            replay_error: 0.0,
            sampled_abs_error: 0.0,
            replay_abs_error: 0.0,
        })
        .collect();
    for &seed in seeds {
        let cfg = |method| EnergyConfig {
            method,
            period_us,
            delay_us,
            repeat,
            seed,
        };
        let sampled = compute_ledger(trace, &cfg(Method::Sampled))?;
        let replay = compute_ledger(trace, &cfg(Method::Replay))?;
        for (i, row) in rows.iter_mut().enumerate() {
            let es = sampled.ops[i].watts() / row.truth_watts - 1.0;
            let er = replay.ops[i].watts() / row.truth_watts - 1.0;
            row.sampled_error += es;
            row.replay_error += er;
            row.sampled_abs_error += es.abs();
            row.replay_abs_error += er.abs();
        }
    }
    let n = seeds.len().max(1) as f64;
    for r in &mut rows {
        r.sampled_error /= n;
        r.replay_error /= n;
        r.sampled_abs_error /= n;
        r.replay_abs_error /= n;
    }
    Ok(rows)
}

pub fn fidelity_table(rows: &[OpFidelity]) -> String {
    let mut s = format!("{:<12} {:>10} {:>12} {:>12}\n", "operator", "truth W", "sampled", "replay");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>10.1} {:>11.1}% {:>11.1}%",
            r.op_name,
            r.truth_watts,
            100.0 * r.sampled_error,
            100.0 * r.replay_error
        );
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfcheckReport {
    pub checks: Vec<Check>,
    pub sampler_table: String,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        s.push_str("\nsampler demo, mean relative power error\n");
        s.push_str(&self.sampler_table);
        s
    }
}

fn names(t: &Trace, ids: &[String]) -> Vec<String> {
    let mut v: Vec<String> = ids.iter().filter_map(|i| t.op(i)).map(|o| o.op_name.clone()).collect();
    v.sort();
    v
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e:#}")));
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

fn only_waste(an: &Analysis) -> Result<&detect::WasteFinding> {
    let w: Vec<_> = an.detection.waste().collect();
    ensure!(w.len() == 1, "expected one waste finding, got {}", w.len());
    Ok(w[0])
}

/// Runs the canonical scenarios and reports one line per check.
pub fn selfcheck() -> SelfcheckReport {
    let t0 = Instant::now();
    let cfg = RunConfig::default();
    let mut checks = Vec::new();

    checks.push(check("attention and ffn partition", || {
        let s = load_preset("attn-ffn")?;
        let an = analyze_scenario(&s, &cfg)?;
        let got: Vec<(Vec<String>, Vec<String>)> = an
            .matching
            .pairs
            .iter()
            .map(|p| (names(&s.trace_a, &p.nodes_a), names(&s.trace_b, &p.nodes_b)))
            .collect();
        let v = |x: &[&str]| x.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let want = vec![
            (v(&["Attn", "K", "Q", "V"]), v(&["Attn", "QKV", "Split"])),
            (v(&["Add", "Mul"]), v(&["linear"])),
        ];
        Ok((got == want, format!("{got:?}")))
    }));

    checks.push(check("misconfiguration", || {
        let s = load_preset("misconfig-tf32")?;
        let an = analyze_scenario(&s, &cfg)?;
        let f = only_waste(&an)?;
        let want = s.truth.injected.as_ref().and_then(|i| i.source.clone());
        let got = an.diagnosis(f.pair_index).and_then(|d| d.primary_source.clone());
        let e2e = an.detection.end_to_end_waste_fraction;
        let ok = (e2e - 0.125).abs() <= 0.01 && got == want && f.category == Some(Category::Misconfiguration);
        Ok((ok, format!("end-to-end {:.2}%, source {got:?}, category {:?}", 100.0 * e2e, f.category)))
    }));

    checks.push(check("redundant operation", || {
        let s = load_preset("redundant-allreduce")?;
        let an = analyze_scenario(&s, &cfg)?;
        let f = only_waste(&an)?;
        let inj = s.truth.injected.as_ref().context("preset has an injection")?;
        let extra = an.diagnosis(f.pair_index).map(|d| d.extra_kernel_names()).unwrap_or_default();
        let seg_b = match f.wasteful {
            detect::Side::A => &f.nodes_a,
            detect::Side::B => &f.nodes_b,
        };
        let ledger = if f.wasteful == detect::Side::A { &an.ledger_a } else { &an.ledger_b };
        let forced = ledger.subgraph_forced_gap_joules(seg_b);
        let e2e = an.detection.end_to_end_waste_fraction;
        let ok = (e2e - 0.23).abs() <= 0.02 && extra == inj.extra_kernels && forced > 0.0 && f.category == Some(Category::Redundant);
        Ok((ok, format!("end-to-end {:.2}%, extra {extra:?}, forced gaps {forced:.4} J", 100.0 * e2e)))
    }));

    checks.push(check("api misuse", || {
        let s = load_preset("api-misuse-addmm")?;
        let an = analyze_scenario(&s, &cfg)?;
        let f = only_waste(&an)?;
        let inj = s.truth.injected.as_ref().context("preset has an injection")?;
        let m = an.diagnosis(f.pair_index).and_then(|d| d.api_misuse.clone()).context("no api misuse explanation")?;
        let ok = m.efficient_kernels == inj.kernels_a && m.wasteful_kernels == inj.kernels_b && f.category == Some(Category::ApiMisuse);
        Ok((ok, format!("{:?} replace {:?}", m.wasteful_kernels, m.efficient_kernels)))
    }));

    let mut table = String::new();
    checks.push(check("sampler vs replay", || {
        let s = load_preset("sampler-demo")?;
        let seeds: Vec<u64> = (0..20).collect();
        let rows = sampler_fidelity(&s.trace_a, 40_000, 200_000, 1000, &seeds)?;
        table = fidelity_table(&rows);
        let worst_sampled = rows.iter().map(|r| r.sampled_abs_error).fold(0.0, f64::max);
        let worst_replay = rows.iter().map(|r| r.replay_abs_error).fold(0.0, f64::max);
        let ok = worst_sampled >= 0.5 && worst_replay <= 0.05;
        Ok((ok, format!("worst direct {:.1}%, worst replay {:.1}%", 100.0 * worst_sampled, 100.0 * worst_replay)))
    }));

    checks.push(check("null scenario at 0.05", || {
        let s = load_preset("null")?;
        let an = analyze_scenario(&s, &RunConfig { threshold: 0.05, ..cfg })?;
        Ok((an.exit_code() == 0, format!("{} pairs, exit {}", an.matching.pairs.len(), an.exit_code())))
    }));

    checks.push(check("threshold 0.5 on the misconfiguration scenario", || {
        let s = load_preset("misconfig-tf32")?;
        let an = analyze_scenario(&s, &RunConfig { threshold: 0.5, ..cfg })?;
        let below = an.detection.findings.iter().all(|f| f.verdict == Verdict::BelowThreshold);
        let ratio = an.detection.findings.iter().map(|f| f.energy_ratio).fold(0.0, f64::max);
        Ok((below, format!("largest ratio {ratio:.3}, all below threshold: {below}")))
    }));

    SelfcheckReport {
        checks,
        sampler_table: table,
        elapsed: t0.elapsed(),
    }
}
