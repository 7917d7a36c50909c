use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use diffwatt::{analyze, run_pipeline, selfcheck, summary, write_json, RunConfig};
use diffwatt_core::detect::{self, DetectionReport, Pairing};
use diffwatt_core::energy::{compute_ledger, Method};
use diffwatt_core::graph::build_graph;
use diffwatt_core::simulate::{fuzz, fuzz_null, generate, preset, ScenarioManifest, PRESETS};
use diffwatt_core::subgraph_match::{match_tensors, recursive_match, segment_cost_report};
use diffwatt_core::trace_model::{load_trace, validate_pairing, Trace};

#[derive(Parser)]
#[command(name = "diffwatt", version, about = "Differential energy debugging for ML execution traces")]
struct Cli {
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Opts {
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.10)]
    threshold: f64,
    #[arg(long, default_value_t = Method::GroundTruth)]
    method: Method,
    #[arg(long, default_value_t = 40_000)]
    period_us: u64,
    #[arg(long, default_value_t = 200_000)]
    delay_us: u64,
    #[arg(long, default_value_t = 1000)]
    repeat: u32,
    #[arg(long, env = "DIFFWATT_SEED", default_value_t = 0)]
    seed: u64,
}

impl Opts {
    fn config(&self) -> RunConfig {
        RunConfig {
            epsilon: self.epsilon,
            threshold: self.threshold,
            method: self.method,
            period_us: self.period_us,
            delay_us: self.delay_us,
            repeat: self.repeat,
            seed: self.seed,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Check trace files; with two, also check that they form a pair.
    Validate {
        #[arg(required = true, num_args = 1..=2)]
        traces: Vec<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Build the computational graph of a trace.
    Graph {
        trace: PathBuf,
        /// Write Graphviz DOT here instead of printing a summary.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Pair equivalent tensors across two traces.
    Tensors {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition both graphs into matched segment pairs.
    Match {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-kernel and per-operator energy ledger of one trace.
    Energy {
        trace: PathBuf,
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Flag wasteful segment pairs.
    Detect {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain the waste findings of a previous detect run.
    Diagnose {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        findings: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        opts: Opts,
    },
    /// All stages end to end. Exits 2 when waste is found.
    Run {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value = "diffwatt-out")]
        out_dir: PathBuf,
        #[arg(long)]
        keep_intermediates: bool,
        #[command(flatten)]
        opts: Opts,
    },
    /// Generate a trace pair from a manifest or a named preset.
    Simulate {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write a corpus of random manifests.
    Fuzz {
        #[arg(long, env = "DIFFWATT_SEED")]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Additional scenarios without injection.
        #[arg(long, default_value_t = 0)]
        null: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the canonical scenarios and report pass or fail per check.
    Selfcheck,
}

fn load(p: &Path) -> Result<Trace> {
    load_trace(p).with_context(|| format!("validate: {}", p.display()))
}

fn emit<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DIFFWATT_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("DIFFWATT_SEED=`{s}`"))?)),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::Validate { traces, epsilon } => {
            let loaded: Vec<Trace> = traces.iter().map(|p| load(p)).collect::<Result<_>>()?;
            for (p, t) in traces.iter().zip(&loaded) {
                println!(
                    "{}: {} ops, {} kernels, {} tensors x {} batches, {} power records",
                    p.display(),
                    t.ops.len(),
                    t.kernels.len(),
                    t.tensors.len() / t.batches().max(1) as usize,
                    t.batches(),
                    t.power_segments.len() + t.power_samples.len()
                );
            }
            if let [a, b] = loaded.as_slice() {
                let r = validate_pairing(a, b, epsilon).context("pairing")?;
                println!(
                    "pair OK: {} inputs matched, max output difference {:.3e}",
                    r.input_pairs.len(),
                    r.max_output_rel_diff
                );
            }
        }
        Cmd::Graph { trace, dot } => {
            let g = build_graph(&load(&trace)?).context("graph")?;
            match dot {
                Some(p) => std::fs::write(&p, g.to_dot()).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{} operators, {} tensors", g.op_count(), g.tensor_ids().len()),
            }
        }
        Cmd::Tensors { a, b, epsilon, out } => {
            let (ta, tb) = (load(&a)?, load(&b)?);
            let (ga, gb) = (build_graph(&ta).context("graph")?, build_graph(&tb).context("graph")?);
            let eq = match_tensors(&ta, &ga, &tb, &gb, epsilon).context("tensors")?;
            emit(out.as_deref(), &eq)?;
        }
        Cmd::Match { a, b, epsilon, out } => {
            let (ta, tb) = (load(&a)?, load(&b)?);
            let (ga, gb) = (build_graph(&ta).context("graph")?, build_graph(&tb).context("graph")?);
            let eq = match_tensors(&ta, &ga, &tb, &gb, epsilon).context("tensors")?;
            let t0 = std::time::Instant::now();
            let m = recursive_match(&ga, &gb, &eq).context("match")?;
            let cost = segment_cost_report(&m, t0.elapsed());
            eprintln!(
                "{} segment pairs, mean size {:.1}, max {}, {:?}",
                cost.pair_count, cost.avg_size, cost.max_size, cost.wall_time
            );
            emit(out.as_deref(), &m)?;
        }
        Cmd::Energy { trace, opts, out } => {
            let t = load(&trace)?;
            let ledger = compute_ledger(&t, &opts.config().energy()).context("energy")?;
            emit(out.as_deref(), &ledger)?;
        }
        Cmd::Detect { a, b, opts, out } => {
            let (ta, tb) = (load(&a)?, load(&b)?);
            let an = analyze(&ta, &tb, &opts.config())?;
            print!("{}", detect::summary(&an.detection));
            if let Some(p) = &out {
                write_json(p, &an.detection)?;
            }
            return Ok(an.exit_code() as u8);
        }
        Cmd::Diagnose { a, b, findings, out, opts } => {
            let (ta, tb) = (load(&a)?, load(&b)?);
            let text = std::fs::read_to_string(&findings).with_context(|| format!("reading {}", findings.display()))?;
            let report: DetectionReport = serde_json::from_str(&text).context("diagnose: findings file")?;
            let ecfg = RunConfig {
                method: report.method,
                ..opts.config()
            }
            .energy();
            let la = compute_ledger(&ta, &ecfg).context("energy: trace A")?;
            let lb = compute_ledger(&tb, &ecfg).context("energy: trace B")?;
            let p = Pairing {
                trace_a: &ta,
                trace_b: &tb,
                ledger_a: &la,
                ledger_b: &lb,
            };
            emit(out.as_deref(), &diffwatt::diagnose_all(&report, p))?;
        }
        Cmd::Run {
            a,
            b,
            out_dir,
            keep_intermediates,
            opts,
        } => {
            let cfg = opts.config();
            let an = run_pipeline(&a, &b, &cfg, &out_dir, keep_intermediates)?;
            print!("{}", summary(&an));
            if cli.verbose > 0 {
                println!(
                    "matching: {} pairs, {} comparisons, {:?}",
                    an.cost.pair_count, an.cost.comparisons, an.cost.wall_time
                );
            }
            return Ok(an.exit_code() as u8);
        }
        Cmd::Simulate {
            manifest,
            preset: name,
            out_dir,
        } => {
            let mut m: ScenarioManifest = match (&manifest, &name) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).context("simulate: manifest")?
                }
                (None, Some(n)) => match preset(n) {
                    Some(m) => m,
                    None => bail!("unknown preset `{n}`; known: {}", PRESETS.join(", ")),
                },
                (None, None) => unreachable!("clap requires one"),
            };
            if let Some(seed) = env_seed()? {
                m = m.with_seed(seed);
            }
            let s = generate(&m).context("simulate")?;
            std::fs::create_dir_all(&out_dir)?;
            s.trace_a.save(&out_dir.join("a.jsonl"))?;
            s.trace_b.save(&out_dir.join("b.jsonl"))?;
            write_json(&out_dir.join("truth.json"), &s.truth)?;
            write_json(&out_dir.join("manifest.json"), &s.manifest)?;
            println!("wrote {}", out_dir.display());
        }
        Cmd::Fuzz {
            seed,
            count,
            null,
            out_dir,
        } => {
            std::fs::create_dir_all(&out_dir)?;
            let all = fuzz(seed, count).into_iter().chain(fuzz_null(seed, null));
            let mut n = 0;
            for m in all {
                write_json(&out_dir.join(format!("{}.json", m.workload)), &m)?;
                n += 1;
            }
            println!("wrote {n} manifests to {}", out_dir.display());
        }
        Cmd::Selfcheck => {
            let r = selfcheck();
            print!("{}", r.render());
            println!("elapsed {:?}", r.elapsed);
            return Ok(if r.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
