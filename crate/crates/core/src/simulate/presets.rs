//! Canonical scenarios and the random manifest corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build::segment_kinds, generate, Dispatch, Injection, InjectionKind, Layout, ScenarioManifest, Template};

pub const PRESETS: [&str; 7] = ["attn-ffn", "gpt2-like", "misconfig-tf32", "redundant-allreduce", "api-misuse-addmm", "sampler-demo", "null"];

const CONFIG_KEYS: [&str; 4] = ["config:matmul.allow_tf32", "config:cudnn.benchmark", "config:amp.autocast", "config:attention.flash"];
const ARG_KEYS: [&str; 3] = ["arg:use_tensor_cores", "arg:fused", "arg:algo"];

fn manifest(workload: &str, seed: u64, template: Template, layout_b: Layout, injection: Option<Injection>) -> ScenarioManifest {
    ScenarioManifest {
        workload: workload.into(),
        seed,
        template,
        layout_b,
        batches: 2,
        injection,
        expected: None,
    }
}

pub fn preset(name: &str) -> Option<ScenarioManifest> {
    let inj = |kind, target_segment, magnitude: Option<f64>, end_to_end: Option<f64>| Injection {
        kind,
        target_segment,
        magnitude,
        end_to_end,
        source_key: None,
        dispatch: Dispatch::Branch,
        hops: 1,
    };
    Some(match name {
        "attn-ffn" => manifest(name, 7, Template::Transformer { blocks: 1, norm: false }, Layout::Permuted, None),
        "gpt2-like" => manifest(name, 12, Template::Transformer { blocks: 12, norm: true }, Layout::Mixed, None),
        "misconfig-tf32" => {
            let mut i = inj(InjectionKind::Misconfiguration, 0, None, Some(0.125));
            i.source_key = Some("config:matmul.allow_tf32".into());
            i.hops = 2;
            manifest(name, 3, Template::Chain { length: 3 }, Layout::Permuted, Some(i))
        }
        "redundant-allreduce" => manifest(
            name,
            2,
            Template::Chain { length: 2 },
            Layout::Canonical,
            Some(inj(InjectionKind::Redundant, 1, None, Some(0.23))),
        ),
        "api-misuse-addmm" => manifest(
            name,
            1,
            Template::Transformer { blocks: 1, norm: false },
            Layout::Merged,
            Some(inj(InjectionKind::ApiMisuse, 1, Some(0.3), None)),
        ),
        "sampler-demo" => manifest(name, 5, Template::SamplerDemo, Layout::Canonical, None),
        "null" => manifest(name, 0, Template::Diamond { count: 2 }, Layout::Mixed, None),
        _ => return None,
    })
}

fn random_template(rng: &mut ChaCha8Rng) -> Template {
    match rng.random_range(0..3) {
        0 => Template::Chain {
            length: rng.random_range(3..=8),
        },
        1 => Template::Diamond {
            count: rng.random_range(1..=3),
        },
        _ => Template::Transformer {
            blocks: rng.random_range(1..=3),
            norm: true,
        },
    }
}

fn random_layout(rng: &mut ChaCha8Rng) -> Layout {
    *[Layout::Canonical, Layout::Permuted, Layout::Merged, Layout::Mixed].choose(rng).unwrap()
}

/// `n` injected scenarios with magnitudes in [0.02, 0.5] and their expected ground truth.
pub fn fuzz(seed: u64, n: usize) -> Vec<ScenarioManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let template = random_template(&mut rng);
            let layout_b = random_layout(&mut rng);
            let kind = *[InjectionKind::Misconfiguration, InjectionKind::ApiMisuse, InjectionKind::Redundant]
                .choose(&mut rng)
                .unwrap();
            let kinds = segment_kinds(&template);
            let eligible: Vec<usize> = (0..kinds.len())
                .filter(|&s| kind == InjectionKind::ApiMisuse || kinds[s])
                .collect();
            let target_segment = *eligible.choose(&mut rng).unwrap();
            let dispatch = *[Dispatch::Branch, Dispatch::Switch, Dispatch::Param].choose(&mut rng).unwrap();
            let source_key = (kind == InjectionKind::Misconfiguration).then(|| {
                let pool: &[&str] = if dispatch == Dispatch::Param { &ARG_KEYS } else { &CONFIG_KEYS };
                pool.choose(&mut rng).unwrap().to_string()
            });
            let injection = Injection {
                kind,
                target_segment,
                magnitude: Some(rng.random_range(0.02..=0.5)),
                end_to_end: None,
                source_key,
                dispatch,
                hops: rng.random_range(1..=3),
            };
            let mut m = manifest(&format!("fuzz-{seed}-{i}"), rng.random(), template, layout_b, Some(injection));
            m.expected = Some(generate(&m).expect("fuzzed manifests are consistent").truth);
            m
        })
        .collect()
}

/// `n` scenarios without injection.
pub fn fuzz_null(seed: u64, n: usize) -> Vec<ScenarioManifest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e75_6c6c);
    (0..n)
        .map(|i| {
            let template = random_template(&mut rng);
            let layout_b = random_layout(&mut rng);
            let mut m = manifest(&format!("null-{seed}-{i}"), rng.random(), template, layout_b, None);
            m.expected = Some(generate(&m).expect("null manifests are consistent").truth);
            m
        })
        .collect()
}
