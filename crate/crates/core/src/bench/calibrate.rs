//! Fits the roofline cost model to timed micro-runs on this host.
//!
//! Attention alone moves bytes and FLOPs in nearly fixed proportion, which
//! leaves the two rates unidentifiable. Two probes break the tie: a
//! streaming read (bytes, almost no arithmetic) and a register-only
//! multiply-add chain (arithmetic, no memory traffic).

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CausalSpec, ModelConfig};
use crate::bifurcated::{attend_cached, AttentionPath};
use crate::error::{Error, Result};
use crate::io_model::CostModel;
use crate::kv_cache::KvCache;
use crate::tensor_core::{IoLedger, Tensor};

/// Coarser clocks than this cannot time the smallest micro-run.
const MAX_TIMER_RESOLUTION: Duration = Duration::from_micros(100);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub kind: SampleKind,
    pub b: usize,
    pub m_c: usize,
    pub n: usize,
    pub path: Option<AttentionPath>,
    pub bytes: u64,
    pub flops: u64,
    /// Median over the timed iterations.
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Attention,
    Stream,
    MultiplyAdd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub cost_model: CostModel,
    pub r_squared: f64,
    pub timer_resolution_seconds: f64,
    /// Smallest measured `b·m_c` from which bifurcated was faster at every
    /// larger measured workload; `None` if it never was.
    pub suggested_auto_threshold: Option<usize>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub b: Vec<usize>,
    pub m_c: Vec<usize>,
    pub n: Vec<usize>,
    pub m_d: usize,
    /// Element counts for the streaming-read probe.
    pub stream_elements: Vec<usize>,
    /// Chain lengths for the multiply-add probe.
    pub fma_iterations: Vec<usize>,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        Self {
            b: vec![1, 4, 16],
            m_c: vec![64, 256, 1024],
            n: vec![1, 8],
            m_d: 8,
            stream_elements: vec![1 << 22, 1 << 24],
            fma_iterations: vec![1 << 18, 1 << 20],
        }
    }
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Result<Tensor<f32>> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn median_seconds(iterations: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut times: Vec<f64> = (0..iterations)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[times.len() / 2]
}

/// Four independent chains of `x = x·a + c`, 2 FLOPs each per iteration.
fn fma_chain(iterations: usize) -> f32 {
    let (a, c) = (
        std::hint::black_box(0.999_f32),
        std::hint::black_box(1e-3_f32),
    );
    let mut x = [1.0f32, 2.0, 3.0, 4.0];
    for _ in 0..iterations {
        for v in &mut x {
            *v = v.mul_add(a, c);
        }
    }
    x.iter().sum()
}

fn probe_samples(iterations: usize, plan: &CalibrationPlan) -> Vec<Sample> {
    let mut out = Vec::new();
    let probe = |kind, bytes: usize, flops: usize, seconds| Sample {
        kind,
        b: 0,
        m_c: 0,
        n: 0,
        path: None,
        bytes: bytes as u64,
        flops: flops as u64,
        seconds,
    };
    for &len in &plan.stream_elements {
        // Integer adds vectorize freely, so the read rate is the limit.
        let buf = vec![1u32; len];
        let seconds = median_seconds(iterations, || {
            std::hint::black_box(buf.iter().fold(0u32, |a, &x| a.wrapping_add(x)));
        });
        out.push(probe(SampleKind::Stream, 4 * len, 0, seconds));
    }
    for &iters in &plan.fma_iterations {
        let seconds = median_seconds(iterations, || {
            std::hint::black_box(fma_chain(std::hint::black_box(iters)));
        });
        out.push(probe(SampleKind::MultiplyAdd, 0, 8 * iters, seconds));
    }
    out
}

/// Times single-layer attention over a range of workloads and fits the
/// cost model. Each shape runs once untimed, then `iterations` times.
pub fn calibrate(iterations: usize, plan: &CalibrationPlan) -> Result<CalibrationReport> {
    if iterations == 0 {
        return Err(Error::Calibration("iterations must be at least 1".into()));
    }
    let resolution = timer_resolution();
    if resolution > MAX_TIMER_RESOLUTION {
        return Err(Error::Calibration(format!(
            "timer resolution {resolution:?} is too coarse (need <= {MAX_TIMER_RESOLUTION:?})"
        )));
    }
    let cfg = ModelConfig::new(64, 8, 8, 1)?;
    let (g, p, k) = (cfg.groups, cfg.group_size(), cfg.head_dim);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut samples = Vec::new();
    for &b in &plan.b {
        for &m_c in &plan.m_c {
            let parts = vec![(
                random_tensor(vec![1, g, m_c, k], &mut rng)?,
                random_tensor(vec![1, g, m_c, k], &mut rng)?,
            )];
            let mut cache = KvCache::init_from_prefill(parts, b, plan.m_d, &mut IoLedger::new())?;
            if plan.m_d > 0 {
                let kd = random_tensor(vec![b, g, plan.m_d, k], &mut rng)?;
                let vd = random_tensor(vec![b, g, plan.m_d, k], &mut rng)?;
                cache.append_decode(0, &kd, &vd, &mut IoLedger::new())?;
            }
            for &n in &plan.n {
                let n = n.min(m_c + plan.m_d).max(1);
                let q = random_tensor(vec![b, g, p, n, k], &mut rng)?;
                let mask = CausalSpec::trailing(n, m_c + plan.m_d);
                for path in [AttentionPath::Naive, AttentionPath::Bifurcated] {
                    let mut ledger = IoLedger::new();
                    attend_cached(&q, &cache, 0, mask, path, &cfg, &mut ledger)?;
                    let seconds = median_seconds(iterations, || {
                        let out =
                            attend_cached(&q, &cache, 0, mask, path, &cfg, &mut IoLedger::new());
                        std::hint::black_box(out).expect("shapes validated by the untimed run");
                    });
                    samples.push(Sample {
                        kind: SampleKind::Attention,
                        b,
                        m_c,
                        n,
                        path: Some(path),
                        bytes: ledger.bytes_read + ledger.bytes_written,
                        flops: ledger.flops,
                        seconds,
                    });
                }
            }
        }
    }
    samples.extend(probe_samples(iterations, plan));
    let points: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|s| (s.bytes as f64, s.flops as f64, s.seconds))
        .collect();
    let (cost_model, r_squared) = CostModel::fit(&points)?;
    Ok(CalibrationReport {
        cost_model,
        r_squared,
        timer_resolution_seconds: resolution.as_secs_f64(),
        suggested_auto_threshold: crossover(&samples),
        samples,
    })
}

/// Single-token workloads sorted by `b·m_c`; the threshold is the start of
/// the longest suffix where bifurcated wins.
fn crossover(samples: &[Sample]) -> Option<usize> {
    let mut work: Vec<(usize, bool)> = Vec::new();
    for s in samples
        .iter()
        .filter(|s| s.n == 1 && s.path == Some(AttentionPath::Naive))
    {
        let bif = samples.iter().find(|o| {
            o.b == s.b && o.m_c == s.m_c && o.n == 1 && o.path == Some(AttentionPath::Bifurcated)
        })?;
        work.push((s.b * s.m_c, bif.seconds < s.seconds));
    }
    work.sort();
    let mut threshold = None;
    for &(w, wins) in work.iter().rev() {
        if !wins {
            break;
        }
        threshold = Some(w);
    }
    threshold
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_iterations_rejected() {
        assert!(matches!(
            calibrate(0, &CalibrationPlan::default()),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn small_calibration_fits() {
        let plan = CalibrationPlan {
            b: vec![1, 8],
            m_c: vec![32, 256],
            n: vec![1, 4],
            m_d: 2,
            stream_elements: vec![1 << 16],
            fma_iterations: vec![1 << 14],
        };
        let r = calibrate(3, &plan).unwrap();
        assert!(r.cost_model.bytes_per_second > 0.0);
        assert!(r.cost_model.validate().is_ok());
        assert!(r.r_squared.is_finite());
        assert_eq!(r.samples.len(), 18);
        assert!(r.cost_model.flops_per_second < 1e30);
    }

    #[test]
    fn crossover_takes_winning_suffix() {
        let s = |b, m_c, path, seconds| Sample {
            kind: SampleKind::Attention,
            b,
            m_c,
            n: 1,
            path: Some(path),
            bytes: 0,
            flops: 0,
            seconds,
        };
        use AttentionPath::*;
        let samples = vec![
            s(1, 10, Naive, 1.0),
            s(1, 10, Bifurcated, 2.0),
            s(4, 10, Naive, 2.0),
            s(4, 10, Bifurcated, 1.0),
            s(8, 10, Naive, 3.0),
            s(8, 10, Bifurcated, 1.0),
        ];
        assert_eq!(crossover(&samples), Some(40));
        assert_eq!(crossover(&samples[..2]), None);
    }
}
