//! Power signals, exact integration and the low-rate delayed sampler.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EnergyError;
use crate::trace_model::{PowerSample, PowerSegment, SamplerDescriptor};

pub const MIN_PERIOD_US: u64 = 1_000;
pub const MAX_PERIOD_US: u64 = 1_000_000;

/// Microsecond-watts to joules.
pub(crate) const UJ: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum PowerSignal {
    /// Piecewise-constant truth. Time not covered by a segment draws 0 W.
    GroundTruth(Vec<PowerSegment>),
    /// Sampler readings over `span`, interpolated linearly between samples.
    Sampled {
        samples: Vec<PowerSample>,
        sampler: SamplerDescriptor,
        span: (u64, u64),
    },
}

impl PowerSignal {
    pub fn span(&self) -> Option<(u64, u64)> {
        match self {
            PowerSignal::GroundTruth(s) => Some((s.first()?.start_us, s.last()?.end_us)),
            PowerSignal::Sampled { span, .. } => Some(*span),
        }
    }
}

/// Watts of the truth segment containing `t`; times before the first
/// segment read the first segment, times after the last read the last.
pub fn truth_at(segments: &[PowerSegment], t: u64) -> f64 {
    let Some(first) = segments.first() else {
        return 0.0;
    };
    if t < first.start_us {
        return first.watts;
    }
    let i = segments.partition_point(|s| s.start_us <= t);
    let s = &segments[i - 1];
    if t < s.end_us || i == segments.len() {
        s.watts
    } else {
        0.0
    }
}

/// Energy in joules over `[start_us, end_us]`.
pub fn integrate(signal: &PowerSignal, start_us: u64, end_us: u64) -> Result<f64, EnergyError> {
    let Some((lo, hi)) = signal.span() else {
        return Err(EnergyError::EmptySignal);
    };
    if start_us < lo || end_us > hi || end_us < start_us {
        return Err(EnergyError::OutsideSpan {
            start_us,
            end_us,
            span: (lo, hi),
        });
    }
    Ok(match signal {
        PowerSignal::GroundTruth(segs) => integrate_truth(segs, start_us, end_us),
        PowerSignal::Sampled { samples, .. } => integrate_samples(samples, start_us, end_us),
    })
}

pub(crate) fn integrate_truth(segs: &[PowerSegment], start_us: u64, end_us: u64) -> f64 {
    let first = segs.partition_point(|s| s.end_us <= start_us);
    let mut e = 0.0;
    for s in &segs[first..] {
        if s.start_us >= end_us {
            break;
        }
        let overlap = s.end_us.min(end_us) - s.start_us.max(start_us);
        e += overlap as f64 * s.watts;
    }
    e * UJ
}

/// Exact integral of the linear interpolant, held constant outside the samples.
pub(crate) fn integrate_samples(samples: &[PowerSample], start_us: u64, end_us: u64) -> f64 {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return 0.0;
    };
    let (s, e) = (start_us as f64, end_us as f64);
    let mut total = 0.0;
    // Hold regions.
    let t0 = first.timestamp_us as f64;
    let tn = last.timestamp_us as f64;
    if s < t0 {
        total += (e.min(t0) - s).max(0.0) * first.watts;
    }
    if e > tn {
        total += (e - s.max(tn)).max(0.0) * last.watts;
    }
    let from = samples.partition_point(|p| (p.timestamp_us as f64) <= s).saturating_sub(1);
    for w in samples[from..].windows(2) {
        let (ta, tb) = (w[0].timestamp_us as f64, w[1].timestamp_us as f64);
        if ta >= e {
            break;
        }
        let (a, b) = (ta.max(s), tb.min(e));
        if b <= a {
            continue;
        }
        let at = |t: f64| w[0].watts + (w[1].watts - w[0].watts) * (t - ta) / (tb - ta);
        total += (b - a) * 0.5 * (at(a) + at(b));
    }
    total * UJ
}

pub(crate) fn check_period(period_us: u64) -> Result<(), EnergyError> {
    if !(MIN_PERIOD_US..=MAX_PERIOD_US).contains(&period_us) {
        return Err(EnergyError::Period(period_us));
    }
    Ok(())
}

/// Samples the point signal `f` over `[span.0, span.1)`: a random initial
/// phase, then one reading every `period_us`, each reporting `f` at the
/// sample time minus a delay drawn uniformly from `[0.5, 1.5] × delay_us`.
pub(crate) fn sample_points(
    span: (u64, u64),
    f: impl Fn(u64) -> f64,
    sampler: SamplerDescriptor,
    rng: &mut ChaCha8Rng,
) -> Vec<PowerSample> {
    let (lo, hi) = span;
    let phase = rng.random_range(0..sampler.period_us);
    let mut out = Vec::new();
    let mut ts = lo + phase;
    while ts < hi {
        let delay = if sampler.delay_us == 0 {
            0
        } else {
            rng.random_range(sampler.delay_us / 2..=sampler.delay_us + sampler.delay_us / 2)
        };
        let at = ts.saturating_sub(delay).max(lo);
        out.push(PowerSample {
            timestamp_us: ts,
            watts: f(at),
        });
        ts += sampler.period_us;
    }
    out
}

/// Observes a ground-truth signal through the low-rate delayed sampler.
pub fn sample_signal(truth: &[PowerSegment], period_us: u64, delay_us: u64, seed: u64) -> Result<PowerSignal, EnergyError> {
    check_period(period_us)?;
    let span = PowerSignal::GroundTruth(truth.to_vec())
        .span()
        .ok_or(EnergyError::EmptySignal)?;
    let sampler = SamplerDescriptor { period_us, delay_us };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = sample_points(span, |t| truth_at(truth, t), sampler, &mut rng);
    Ok(PowerSignal::Sampled { samples, sampler, span })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(start_us: u64, end_us: u64, watts: f64) -> PowerSegment {
        PowerSegment { start_us, end_us, watts }
    }

    #[test]
    fn constant_and_two_segment() {
        let one = PowerSignal::GroundTruth(vec![seg(0, 10_000, 100.0)]);
        assert!((integrate(&one, 0, 10_000).unwrap() - 1.0).abs() < 1e-12);
        let two = PowerSignal::GroundTruth(vec![seg(0, 5_000, 100.0), seg(5_000, 10_000, 300.0)]);
        assert!((integrate(&two, 0, 10_000).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(integrate(&two, 0, 10_001), Err(EnergyError::OutsideSpan { .. })));
    }

    #[test]
    fn sampled_trapezoid_and_holds() {
        let samples = vec![
            PowerSample { timestamp_us: 10, watts: 100.0 },
            PowerSample { timestamp_us: 20, watts: 200.0 },
        ];
        let sig = PowerSignal::Sampled {
            samples,
            sampler: SamplerDescriptor { period_us: 1000, delay_us: 0 },
            span: (0, 30),
        };
        // 10 µs hold at 100 W, ramp averaging 150 W, 10 µs hold at 200 W.
        let want = (1000.0 + 1500.0 + 2000.0) * UJ;
        assert!((integrate(&sig, 0, 30).unwrap() - want).abs() < 1e-15);
        assert!((integrate(&sig, 12, 18).unwrap() - 6.0 * 150.0 * UJ).abs() < 1e-15);
    }

    #[test]
    fn zero_delay_reads_truth_at_instants() {
        let truth = vec![seg(0, 7_000, 50.0), seg(7_000, 20_000, 90.0), seg(20_000, 50_000, 10.0)];
        let PowerSignal::Sampled { samples, .. } = sample_signal(&truth, 1_000, 0, 3).unwrap() else {
            unreachable!()
        };
        for s in &samples {
            assert_eq!(s.watts, truth_at(&truth, s.timestamp_us));
        }
        assert!(samples.windows(2).all(|w| w[1].timestamp_us - w[0].timestamp_us == 1_000));
    }

    #[test]
    fn long_period_sees_short_kernel_at_most_once() {
        let truth = vec![seg(0, 100_000, 70.0), seg(100_000, 105_000, 300.0), seg(105_000, 400_000, 70.0)];
        let PowerSignal::Sampled { samples, .. } = sample_signal(&truth, 50_000, 0, 9).unwrap() else {
            unreachable!()
        };
        let inside = samples
            .iter()
            .filter(|s| (100_000..105_000).contains(&s.timestamp_us))
            .count();
        assert!(inside <= 1);
    }

    #[test]
    fn period_range_enforced() {
        let truth = vec![seg(0, 10, 1.0)];
        assert!(matches!(sample_signal(&truth, 999, 0, 0), Err(EnergyError::Period(999))));
        assert!(sample_signal(&truth, 1_000_001, 0, 0).is_err());
    }

    #[test]
    fn sampler_deterministic_per_seed() {
        let truth = vec![seg(0, 1_000_000, 80.0), seg(1_000_000, 2_000_000, 120.0)];
        assert_eq!(sample_signal(&truth, 40_000, 200_000, 5).unwrap(), sample_signal(&truth, 40_000, 200_000, 5).unwrap());
    }

    fn signal_strategy() -> impl Strategy<Value = Vec<PowerSegment>> {
        prop::collection::vec((1u64..500, 0u64..3, 0.0f64..500.0), 1..12).prop_map(|parts| {
            let mut t = 0;
            let mut out = Vec::new();
            for (len, gap, w) in parts {
                t += gap;
                out.push(seg(t, t + len, w));
                t += len;
            }
            out
        })
    }

    proptest! {
        #[test]
        fn matches_riemann_sum(segs in signal_strategy(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let sig = PowerSignal::GroundTruth(segs.clone());
            let (lo, hi) = sig.span().unwrap();
            let x = lo + ((hi - lo) as f64 * a.min(b)) as u64;
            let y = lo + ((hi - lo) as f64 * a.max(b)) as u64;
            // 1 µs step oracle; uncovered time draws nothing.
            let covered = |t: u64| segs.iter().find(|s| s.start_us <= t && t < s.end_us).map_or(0.0, |s| s.watts);
            let oracle: f64 = (x..y).map(covered).sum::<f64>() * 1e-6;
            let got = integrate(&sig, x, y).unwrap();
            prop_assert!((got - oracle).abs() <= 1e-6 * oracle.abs().max(1e-9));
        }

        #[test]
        fn linear_in_signal(segs in signal_strategy(), k in 0.0f64..10.0) {
            let sig = PowerSignal::GroundTruth(segs.clone());
            let scaled = PowerSignal::GroundTruth(segs.iter().map(|s| seg(s.start_us, s.end_us, s.watts * k)).collect());
            let (lo, hi) = sig.span().unwrap();
            let e = integrate(&sig, lo, hi).unwrap();
            prop_assert!((integrate(&scaled, lo, hi).unwrap() - k * e).abs() <= 1e-9 * (k * e).max(1e-12));
        }
    }
}
