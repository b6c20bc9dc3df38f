//! Randomized equivalence sweep: bifurcated attention against the naive
//! path over the materialized cache.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::merge_heads;
use crate::attention::{finish_logits, CausalSpec, ModelConfig};
use crate::bifurcated::{attend_cached, join_values, kv_read_elements, AttentionPath};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor_core::{
    concat_lastaxis, contract_qk, contract_qk_shared, softmax_lastaxis, IoLedger, Operand, Scalar,
    Tensor,
};

/// Value lists each case draws from, one uniform pick per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub b: Vec<usize>,
    pub h: Vec<usize>,
    /// Candidate group counts; a case keeps only those dividing its `h`.
    pub g: Vec<usize>,
    pub k: Vec<usize>,
    pub m_c: Vec<usize>,
    pub m_d: Vec<usize>,
    pub n: Vec<usize>,
    pub cases: usize,
    pub seed: u64,
    /// Upper bound on `cases`.
    pub cap: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            b: (1..=8).collect(),
            h: vec![1, 2, 4, 8],
            g: vec![1, 2, 4, 8],
            k: (1..=8).collect(),
            m_c: (0..=32).collect(),
            m_d: (0..=8).collect(),
            n: (1..=4).collect(),
            cases: 200,
            seed: 0,
            cap: 100_000,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [
            ("b", &self.b),
            ("h", &self.h),
            ("g", &self.g),
            ("k", &self.k),
            ("m_c", &self.m_c),
            ("m_d", &self.m_d),
            ("n", &self.n),
        ] {
            if axis.is_empty() {
                return Err(Error::Sweep(format!("axis {name} is empty")));
            }
        }
        for (name, axis) in [
            ("b", &self.b),
            ("h", &self.h),
            ("k", &self.k),
            ("n", &self.n),
        ] {
            if axis.contains(&0) {
                return Err(Error::Sweep(format!("axis {name} must be positive")));
            }
        }
        if !self
            .h
            .iter()
            .any(|h| self.g.iter().any(|g| *g > 0 && h % g == 0))
        {
            return Err(Error::Sweep("no g value divides any h value".into()));
        }
        if self.cases == 0 || self.cases > self.cap {
            return Err(Error::Sweep(format!(
                "cases {} not in 1..={}",
                self.cases, self.cap
            )));
        }
        Ok(())
    }

    /// Draws the case shapes. Each case gets its own stream so shapes do
    /// not depend on evaluation order. `n` is clamped to the available
    /// keys, and an empty cache gets one decode position.
    pub fn shapes(&self) -> Result<Vec<CaseShape>> {
        self.validate()?;
        Ok((0..self.cases)
            .map(|i| {
                let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                let h = loop {
                    let h = *self.h.choose(&mut rng).expect("non-empty");
                    if self.g.iter().any(|g| *g > 0 && h % g == 0) {
                        break h;
                    }
                };
                let gs: Vec<usize> = self
                    .g
                    .iter()
                    .copied()
                    .filter(|g| *g > 0 && h % g == 0)
                    .collect();
                let g = *gs.choose(&mut rng).expect("some g divides h");
                let pick =
                    |axis: &[usize], rng: &mut ChaCha20Rng| *axis.choose(rng).expect("non-empty");
                let b = pick(&self.b, &mut rng);
                let k = pick(&self.k, &mut rng);
                let m_c = pick(&self.m_c, &mut rng);
                let mut m_d = pick(&self.m_d, &mut rng);
                if m_c + m_d == 0 {
                    m_d = 1;
                }
                let n = pick(&self.n, &mut rng).min(m_c + m_d);
                CaseShape {
                    index: i,
                    b,
                    h,
                    g,
                    k,
                    m_c,
                    m_d,
                    n,
                    seed: rng.random(),
                }
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseShape {
    pub index: usize,
    pub b: usize,
    pub h: usize,
    pub g: usize,
    pub k: usize,
    pub m_c: usize,
    pub m_d: usize,
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub shape: CaseShape,
    /// Double precision bifurcated output equals the naive output bit for bit.
    pub bit_exact_f64: bool,
    pub max_abs_err_f64: f64,
    /// Single precision bifurcated output against the double precision naive oracle.
    pub max_abs_err_f32: f64,
    pub max_rel_err_f32: f64,
    pub key_reads: [u64; 2],
    pub value_reads: [u64; 2],
    pub expected_reads: [u64; 2],
    pub flops: [u64; 2],
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivReport {
    pub cases: Vec<CaseResult>,
    pub max_abs_err_f64: f64,
    pub max_rel_err_f32: f64,
    pub io_exact: bool,
    pub failures: usize,
    pub tolerance: f64,
}

impl EquivReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// How the bifurcated side is computed. `PerBranchSoftmax` normalizes the
/// two logit blocks separately, a known-wrong variant used to confirm the
/// sweep catches real bugs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    None,
    PerBranchSoftmax,
}

pub const F32_TOLERANCE: f64 = 1e-5;

struct CaseData {
    q: Vec<f64>,
    kc: Vec<f64>,
    vc: Vec<f64>,
    kd: Vec<f64>,
    vd: Vec<f64>,
}

impl CaseData {
    fn new(s: &CaseShape) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(s.seed);
        let mut draw = |len: usize| {
            (0..len)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        };
        let p = s.h / s.g;
        Self {
            q: draw(s.b * s.g * p * s.n * s.k),
            kc: draw(s.g * s.m_c * s.k),
            vc: draw(s.g * s.m_c * s.k),
            kd: draw(s.b * s.g * s.m_d * s.k),
            vd: draw(s.b * s.g * s.m_d * s.k),
        }
    }

    fn build<T: Scalar>(&self, s: &CaseShape) -> Result<(Tensor<T>, KvCache<T>)> {
        let cast = |shape: Vec<usize>, v: &[f64]| Tensor::<T>::from_f64(shape, v);
        let q = cast(vec![s.b, s.g, s.h / s.g, s.n, s.k], &self.q)?;
        let parts = vec![(
            cast(vec![1, s.g, s.m_c, s.k], &self.kc)?,
            cast(vec![1, s.g, s.m_c, s.k], &self.vc)?,
        )];
        let mut cache = KvCache::init_from_prefill(parts, s.b, s.m_d, &mut IoLedger::new())?;
        if s.m_d > 0 {
            let kd = cast(vec![s.b, s.g, s.m_d, s.k], &self.kd)?;
            let vd = cast(vec![s.b, s.g, s.m_d, s.k], &self.vd)?;
            cache.append_decode(0, &kd, &vd, &mut IoLedger::new())?;
        }
        Ok((q, cache))
    }
}

/// Bifurcated attention with the softmax applied to each branch separately.
fn per_branch_softmax<T: Scalar>(
    q: &Tensor<T>,
    cache: &KvCache<T>,
    mask: CausalSpec,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    let lc = cache.layer(0);
    let (m_c, m_d) = (cache.context_len(), cache.decoded_len());
    let kd = cache.decode_keys(0);
    let vd = cache.decode_values(0);
    let logits = match (m_c > 0, m_d > 0) {
        (true, true) => concat_lastaxis(
            &contract_qk_shared(q, lc.context_keys(), ledger)?,
            &contract_qk(q, &kd, ledger)?,
        )?,
        (true, false) => contract_qk_shared(q, lc.context_keys(), ledger)?,
        _ => contract_qk(q, &kd, ledger)?,
    };
    let logits = finish_logits(logits, mask, cfg)?;
    let m = m_c + m_d;
    let mut parts = Vec::new();
    for (lo, hi) in [(0, m_c), (m_c, m)] {
        if hi > lo {
            parts.push(softmax_lastaxis(&logits.slice_lastaxis(lo, hi)?, ledger)?);
        }
    }
    let weights = if parts.len() == 2 {
        concat_lastaxis(&parts[0], &parts[1])?
    } else {
        parts.pop().expect("at least one branch")
    };
    Ok(merge_heads(&join_values(
        &weights,
        lc.context_values(),
        &vd,
        ledger,
    )?))
}

fn run_case(s: &CaseShape, fault: Fault) -> Result<CaseResult> {
    let cfg = ModelConfig::new(s.h * s.k, s.h, s.g, 1)?;
    let data = CaseData::new(s);
    let mask = CausalSpec::trailing(s.n, s.m_c + s.m_d);

    let (q, cache) = data.build::<f64>(s)?;
    let mut ln = IoLedger::new();
    let mut lb = IoLedger::new();
    let naive = attend_cached(&q, &cache, 0, mask, AttentionPath::Naive, &cfg, &mut ln)?;
    let bif = match fault {
        Fault::None => attend_cached(
            &q,
            &cache,
            0,
            mask,
            AttentionPath::Bifurcated,
            &cfg,
            &mut lb,
        )?,
        Fault::PerBranchSoftmax => per_branch_softmax(&q, &cache, mask, &cfg, &mut lb)?,
    };
    let bit_exact = naive
        .data()
        .iter()
        .zip(bif.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    let max_abs_f64 = max_abs(naive.data(), &bif.to_f64_vec());

    let (q32, cache32) = data.build::<f32>(s)?;
    let bif32 = match fault {
        Fault::None => attend_cached(
            &q32,
            &cache32,
            0,
            mask,
            AttentionPath::Bifurcated,
            &cfg,
            &mut IoLedger::new(),
        )?,
        Fault::PerBranchSoftmax => {
            per_branch_softmax(&q32, &cache32, mask, &cfg, &mut IoLedger::new())?
        }
    };
    let out32 = bif32.to_f64_vec();
    let max_abs_f32 = max_abs(naive.data(), &out32);
    let scale = naive.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_rel_f32 = if scale > 0.0 {
        max_abs_f32 / scale
    } else {
        max_abs_f32
    };

    let expected = [
        kv_read_elements(s.b, s.g, s.k, s.m_c, s.m_d, false),
        kv_read_elements(s.b, s.g, s.k, s.m_c, s.m_d, true),
    ];
    let key_reads = [ln.reads_of(Operand::Key), lb.reads_of(Operand::Key)];
    let value_reads = [ln.reads_of(Operand::Value), lb.reads_of(Operand::Value)];
    let pass = bit_exact
        && max_rel_f32 <= F32_TOLERANCE
        && key_reads == expected
        && value_reads == expected;
    Ok(CaseResult {
        shape: *s,
        bit_exact_f64: bit_exact,
        max_abs_err_f64: max_abs_f64,
        max_abs_err_f32: max_abs_f32,
        max_rel_err_f32: max_rel_f32,
        key_reads,
        value_reads,
        expected_reads: expected,
        flops: [ln.flops, lb.flops],
        pass,
    })
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs every case of `spec` (in parallel; results keep case order).
pub fn run_equivalence(spec: &SweepSpec, fault: Fault) -> Result<EquivReport> {
    let shapes = spec.shapes()?;
    let cases = shapes
        .par_iter()
        .map(|s| run_case(s, fault))
        .collect::<Result<Vec<_>>>()?;
    let max_abs_err_f64 = cases.iter().fold(0.0f64, |m, c| m.max(c.max_abs_err_f64));
    let max_rel_err_f32 = cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel_err_f32));
    let io_exact = cases
        .iter()
        .all(|c| c.key_reads == c.expected_reads && c.value_reads == c.expected_reads);
    let failures = cases.iter().filter(|c| !c.pass).count();
    Ok(EquivReport {
        cases,
        max_abs_err_f64,
        max_rel_err_f32,
        io_exact,
        failures,
        tolerance: F32_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_sweep_passes() {
        let spec = SweepSpec {
            cases: 25,
            seed: 3,
            ..SweepSpec::default()
        };
        let r = run_equivalence(&spec, Fault::None).unwrap();
        assert!(r.passed(), "{:?}", r.cases.iter().find(|c| !c.pass));
        assert_eq!(r.max_abs_err_f64, 0.0);
    }

    #[test]
    fn per_branch_softmax_is_caught() {
        let spec = SweepSpec {
            cases: 25,
            m_c: vec![4, 8],
            m_d: vec![2, 3],
            ..SweepSpec::default()
        };
        let r = run_equivalence(&spec, Fault::PerBranchSoftmax).unwrap();
        assert!(r.failures > 0);
    }

    #[test]
    fn shapes_are_reproducible_and_valid() {
        let spec = SweepSpec::default();
        let a = spec.shapes().unwrap();
        assert_eq!(a, spec.shapes().unwrap());
        assert_eq!(a.len(), 200);
        for s in &a {
            assert_eq!(s.h % s.g, 0);
            assert!(s.n <= s.m_c + s.m_d && s.n >= 1);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let empty = SweepSpec {
            b: vec![],
            ..SweepSpec::default()
        };
        assert!(empty.validate().is_err());
        let too_many = SweepSpec {
            cases: 10,
            cap: 5,
            ..SweepSpec::default()
        };
        assert!(too_many.validate().is_err());
    }
}
