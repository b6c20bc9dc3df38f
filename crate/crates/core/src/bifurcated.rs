//! Context-aware bifurcated attention and the naive/bifurcated path switch.
//!
//! Decode-time attention is split into a context branch that contracts
//! against the shared `[g, m_c, k]` keys and values without a batch axis,
//! and a decode branch over the per-sequence `[b, g, m_d, k]` part. Logits
//! are joined before a single softmax, so both paths compute the same
//! function with the same FLOPs; only the KV traffic differs.

use serde::{Deserialize, Serialize};

use crate::attention::{
    attend_naive, check_query, finish_logits, merge_heads, CausalSpec, ModelConfig,
};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor_core::{
    concat_lastaxis, contract_qk, contract_qk_shared, contract_wv_accumulate, contract_wv_shared,
    softmax_lastaxis, IoLedger, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    AlwaysNaive,
    AlwaysBifurcated,
    Auto,
}

/// The attention path used for one decode step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionPath {
    Naive,
    Bifurcated,
}

/// Chooses between the two attention paths. Bifurcation lowers KV traffic
/// but splits each contraction in two, which only pays off once the
/// replicated context `b·m_c` is large.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionPathPolicy {
    pub mode: PathMode,
    pub auto_threshold: usize,
}

impl AttentionPathPolicy {
    pub const DEFAULT_AUTO_THRESHOLD: usize = 16_384;

    pub fn naive() -> Self {
        Self {
            mode: PathMode::AlwaysNaive,
            auto_threshold: Self::DEFAULT_AUTO_THRESHOLD,
        }
    }

    pub fn bifurcated() -> Self {
        Self {
            mode: PathMode::AlwaysBifurcated,
            auto_threshold: Self::DEFAULT_AUTO_THRESHOLD,
        }
    }

    pub fn auto(auto_threshold: usize) -> Self {
        Self {
            mode: PathMode::Auto,
            auto_threshold,
        }
    }
}

impl Default for AttentionPathPolicy {
    fn default() -> Self {
        Self::auto(Self::DEFAULT_AUTO_THRESHOLD)
    }
}

/// Auto mode picks bifurcated when `b·m_c >= auto_threshold`.
pub fn select_path(
    policy: &AttentionPathPolicy,
    b: usize,
    m_c: usize,
    _m_d: usize,
) -> AttentionPath {
    match policy.mode {
        PathMode::AlwaysNaive => AttentionPath::Naive,
        PathMode::AlwaysBifurcated => AttentionPath::Bifurcated,
        PathMode::Auto if b.saturating_mul(m_c) >= policy.auto_threshold => {
            AttentionPath::Bifurcated
        }
        PathMode::Auto => AttentionPath::Naive,
    }
}

/// Key (or value) elements read per layer in one decode step:
/// `g·k·b·(m_c + m_d)` naive, `g·k·(m_c + b·m_d)` bifurcated.
pub fn kv_read_elements(
    b: usize,
    g: usize,
    k: usize,
    m_c: usize,
    m_d: usize,
    bifurcated: bool,
) -> u64 {
    let (b, g, k, m_c, m_d) = (b as u64, g as u64, k as u64, m_c as u64, m_d as u64);
    if bifurcated {
        g * k * (m_c + b * m_d)
    } else {
        g * k * b * (m_c + m_d)
    }
}

/// Splits softmax weights `[b, g, p, n, m_c + m_d]` at column `m_c` and
/// combines them with the shared and per-sequence values. The decode
/// branch continues each output element's sum from the context partial,
/// so the result matches a single contraction over the joined values.
///
/// Returns `[b, g, p, n, v]`.
pub fn join_values<T: Scalar>(
    weights: &Tensor<T>,
    values_ctx: &Tensor<T>,
    values_dec: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    let r = weights.rank();
    if r != 5 {
        return Err(Error::RankMismatch {
            op: "join_values",
            expected: 5,
            found: r,
        });
    }
    let m = weights.shape()[4];
    let m_c = values_ctx.shape().get(1).copied().unwrap_or(0);
    if m_c > m {
        return Err(Error::ShapeMismatch {
            op: "join_values",
            axis: "m",
            expected: m,
            found: m_c,
        });
    }
    let m_d = m - m_c;
    let w_ctx = weights.slice_lastaxis(0, m_c)?;
    let w_dec = weights.slice_lastaxis(m_c, m)?;
    if m_c == 0 {
        let v = values_dec.shape().get(3).copied().unwrap_or(0);
        let s = weights.shape();
        let mut acc =
            Tensor::zeros([s[0], s[1], s[2], s[3], v]).with_elem_width(weights.elem_width_bytes());
        contract_wv_accumulate(&w_dec, values_dec, &mut acc, ledger)?;
        return Ok(acc);
    }
    let mut acc = contract_wv_shared(&w_ctx, values_ctx, ledger)?;
    if m_d > 0 {
        contract_wv_accumulate(&w_dec, values_dec, &mut acc, ledger)?;
    }
    Ok(acc)
}

/// Bifurcated attention over explicit context and decode tensors.
///
/// `keys_ctx`/`values_ctx` are `[g, m_c, k]`; `keys_dec`/`values_dec` are
/// `[b, g, m_d, k]`. Returns merged head outputs `[b, n, d]`.
#[allow(clippy::too_many_arguments)]
pub fn attend_split<T: Scalar>(
    q: &Tensor<T>,
    keys_ctx: &Tensor<T>,
    values_ctx: &Tensor<T>,
    keys_dec: &Tensor<T>,
    values_dec: &Tensor<T>,
    mask: CausalSpec,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    check_query(q, cfg)?;
    let n = q.shape()[3];
    if n > 1 && mask == CausalSpec::Unmasked {
        return Err(Error::MissingMask { queries: n });
    }
    let m_c = keys_ctx.shape().get(1).copied().unwrap_or(0);
    let m_d = keys_dec.shape().get(2).copied().unwrap_or(0);
    if m_c + m_d == 0 {
        return Err(Error::EmptyKeys);
    }
    let logits = match (m_c > 0, m_d > 0) {
        (true, true) => concat_lastaxis(
            &contract_qk_shared(q, keys_ctx, ledger)?,
            &contract_qk(q, keys_dec, ledger)?,
        )?,
        (true, false) => contract_qk_shared(q, keys_ctx, ledger)?,
        _ => contract_qk(q, keys_dec, ledger)?,
    };
    let logits = finish_logits(logits, mask, cfg)?;
    let weights = softmax_lastaxis(&logits, ledger)?;
    let out = join_values(&weights, values_ctx, values_dec, ledger)?;
    Ok(merge_heads(&out))
}

/// Bifurcated attention for `layer` of a two-part cache.
pub fn attend_bifurcated<T: Scalar>(
    q: &Tensor<T>,
    cache: &KvCache<T>,
    layer: usize,
    mask: CausalSpec,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    if q.rank() == 5 && q.shape()[0] != cache.batch() {
        return Err(Error::BatchMismatch {
            expected: cache.batch(),
            found: q.shape()[0],
        });
    }
    let lc = cache.layer(layer);
    attend_split(
        q,
        lc.context_keys(),
        lc.context_values(),
        &cache.decode_keys(layer),
        &cache.decode_values(layer),
        mask,
        cfg,
        ledger,
    )
}

/// Attention for `layer` along the chosen path. The naive path first
/// materializes the context part once per sequence.
pub fn attend_cached<T: Scalar>(
    q: &Tensor<T>,
    cache: &KvCache<T>,
    layer: usize,
    mask: CausalSpec,
    path: AttentionPath,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    match path {
        AttentionPath::Bifurcated => attend_bifurcated(q, cache, layer, mask, cfg, ledger),
        AttentionPath::Naive => {
            let n = q.shape().get(3).copied().unwrap_or(0);
            if n > 1 && mask == CausalSpec::Unmasked {
                return Err(Error::MissingMask { queries: n });
            }
            let (keys, values) = cache.materialize_full(layer)?;
            attend_naive(q, &keys, &values, mask, cfg, ledger)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_core::Operand;

    fn cfg(d: usize, h: usize, g: usize) -> ModelConfig {
        let mut c = ModelConfig::new(d, h, g, 1).unwrap();
        c.scale_qk = false;
        c
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn read_counts() {
        assert_eq!(kv_read_elements(4, 2, 8, 8, 2, false), 640);
        assert_eq!(kv_read_elements(4, 2, 8, 8, 2, true), 256);
        assert_eq!(
            kv_read_elements(1, 3, 5, 7, 2, false),
            kv_read_elements(1, 3, 5, 7, 2, true)
        );
        assert_eq!(
            kv_read_elements(16, 1, 4, 10, 0, false) / kv_read_elements(16, 1, 4, 10, 0, true),
            16
        );
    }

    #[test]
    fn path_selection() {
        let auto = AttentionPathPolicy::auto(4096);
        assert_eq!(select_path(&auto, 1, 128, 0), AttentionPath::Naive);
        assert_eq!(select_path(&auto, 16, 8192, 0), AttentionPath::Bifurcated);
        assert_eq!(
            select_path(&AttentionPathPolicy::bifurcated(), 1, 0, 0),
            AttentionPath::Bifurcated
        );
        assert_eq!(
            select_path(&AttentionPathPolicy::naive(), 64, 1 << 20, 0),
            AttentionPath::Naive
        );
        assert_eq!(
            select_path(&AttentionPathPolicy::auto(0), 1, 0, 0),
            AttentionPath::Bifurcated
        );
    }

    #[test]
    fn joined_logits_match_hand_values() {
        let q = t(&[2, 1, 1, 1, 2], &[2., 0., 0., 2.]);
        let kc = t(&[1, 2, 2], &[1., 0., 0., 1.]);
        let kd = t(&[2, 1, 1, 2], &[1., 1., 0., 0.]);
        let mut l = IoLedger::new();
        let lc = contract_qk_shared(&q, &kc, &mut l).unwrap();
        let ld = contract_qk(&q, &kd, &mut l).unwrap();
        let joined = concat_lastaxis(&lc, &ld).unwrap();
        assert_eq!(joined.data(), &[2., 0., 2., 0., 2., 0.]);
    }

    #[test]
    fn value_join_hand_example() {
        let w = t(&[1, 1, 1, 1, 3], &[0.5, 0.25, 0.25]);
        let vc = t(&[1, 2, 2], &[4., 0., 0., 4.]);
        let vd = t(&[1, 1, 1, 2], &[8., 8.]);
        let out = join_values(&w, &vc, &vd, &mut IoLedger::new()).unwrap();
        assert_eq!(out.data(), &[4., 3.]);
    }

    fn split_case(b: usize, m_c: usize, m_d: usize) -> (Tensor<f64>, KvCache<f64>) {
        let c = cfg(4, 2, 1);
        let k = c.head_dim;
        let gen = |len: usize, s: f64| {
            (0..len)
                .map(|i| ((i as f64 + s) * 0.37).sin())
                .collect::<Vec<_>>()
        };
        let q = t(&[b, 1, 2, 1, k], &gen(b * 2 * k, 0.5));
        let prefill = vec![(
            t(&[1, 1, m_c, k], &gen(m_c * k, 1.0)),
            t(&[1, 1, m_c, k], &gen(m_c * k, 2.0)),
        )];
        let mut cache =
            KvCache::init_from_prefill(prefill, b, m_d.max(1), &mut IoLedger::new()).unwrap();
        if m_d > 0 {
            let kd = t(&[b, 1, m_d, k], &gen(b * m_d * k, 3.0));
            let vd = t(&[b, 1, m_d, k], &gen(b * m_d * k, 4.0));
            cache
                .append_decode(0, &kd, &vd, &mut IoLedger::new())
                .unwrap();
        }
        (q, cache)
    }

    #[test]
    fn matches_naive_and_reads_less() {
        let c = cfg(4, 2, 1);
        let (q, cache) = split_case(3, 5, 2);
        let mut lb = IoLedger::new();
        let mut ln = IoLedger::new();
        let bif = attend_cached(
            &q,
            &cache,
            0,
            CausalSpec::Unmasked,
            AttentionPath::Bifurcated,
            &c,
            &mut lb,
        )
        .unwrap();
        let nav = attend_cached(
            &q,
            &cache,
            0,
            CausalSpec::Unmasked,
            AttentionPath::Naive,
            &c,
            &mut ln,
        )
        .unwrap();
        assert_eq!(bif, nav);
        assert_eq!(
            lb.reads_of(Operand::Key),
            kv_read_elements(3, 1, 2, 5, 2, true)
        );
        assert_eq!(
            ln.reads_of(Operand::Key),
            kv_read_elements(3, 1, 2, 5, 2, false)
        );
        assert_eq!(
            lb.reads_of(Operand::Value),
            kv_read_elements(3, 1, 2, 5, 2, true)
        );
        assert_eq!(lb.flops, ln.flops);
    }

    #[test]
    fn degenerate_splits() {
        let c = cfg(4, 2, 1);
        for (m_c, m_d) in [(4, 0), (0, 3)] {
            let (q, cache) = split_case(2, m_c, m_d);
            let mut l = IoLedger::new();
            let bif = attend_bifurcated(&q, &cache, 0, CausalSpec::Unmasked, &c, &mut l).unwrap();
            let (keys, values) = cache.materialize_full(0).unwrap();
            let nav = attend_naive(&q, &keys, &values, CausalSpec::Unmasked, &c, &mut l).unwrap();
            assert_eq!(bif, nav);
        }
        let (q, cache) = split_case(2, 0, 0);
        assert!(matches!(
            attend_bifurcated(
                &q,
                &cache,
                0,
                CausalSpec::Unmasked,
                &c,
                &mut IoLedger::new()
            ),
            Err(Error::EmptyKeys)
        ));
    }

    #[test]
    fn multi_query_needs_mask() {
        let c = cfg(4, 2, 1);
        let (_, cache) = split_case(1, 3, 2);
        let q = t(&[1, 1, 2, 2, 2], &[0.1; 8]);
        assert!(matches!(
            attend_bifurcated(
                &q,
                &cache,
                0,
                CausalSpec::Unmasked,
                &c,
                &mut IoLedger::new()
            ),
            Err(Error::MissingMask { queries: 2 })
        ));
        let mask = CausalSpec::trailing(2, 5);
        let bif = attend_cached(
            &q,
            &cache,
            0,
            mask,
            AttentionPath::Bifurcated,
            &c,
            &mut IoLedger::new(),
        )
        .unwrap();
        let nav = attend_cached(
            &q,
            &cache,
            0,
            mask,
            AttentionPath::Naive,
            &c,
            &mut IoLedger::new(),
        )
        .unwrap();
        assert_eq!(bif, nav);
    }

    #[test]
    fn rejects_batch_mismatch() {
        let c = cfg(4, 2, 1);
        let (_, cache) = split_case(2, 3, 1);
        let q = t(&[3, 1, 2, 1, 2], &[0.0; 12]);
        assert!(matches!(
            attend_bifurcated(
                &q,
                &cache,
                0,
                CausalSpec::Unmasked,
                &c,
                &mut IoLedger::new()
            ),
            Err(Error::BatchMismatch { .. })
        ));
    }
}

#[cfg(test)]
mod proptests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor_core::Operand;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn bifurcated_equals_naive(
            b in 1usize..9, h_pow in 0u32..4, g_pow in 0u32..4, k in 1usize..9,
            m_c in 0usize..33, m_d in 0usize..9, n in 1usize..5, seed: u64,
        ) {
            let h = 1usize << h_pow;
            let g = 1usize << g_pow.min(h_pow);
            let m_d = if m_c + m_d == 0 { 1 } else { m_d };
            let n = n.min(m_c + m_d);
            let cfg = ModelConfig::new(h * k, h, g, 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&[b, g, h / g, n, k], &mut rng);
            let prefill = vec![(random(&[1, g, m_c, k], &mut rng), random(&[1, g, m_c, k], &mut rng))];
            let mut cache = KvCache::init_from_prefill(prefill, b, m_d, &mut IoLedger::new()).unwrap();
            if m_d > 0 {
                let kd = random(&[b, g, m_d, k], &mut rng);
                let vd = random(&[b, g, m_d, k], &mut rng);
                cache.append_decode(0, &kd, &vd, &mut IoLedger::new()).unwrap();
            }
            let mask = CausalSpec::trailing(n, m_c + m_d);
            let mut lb = IoLedger::new();
            let mut ln = IoLedger::new();
            let bif = attend_cached(&q, &cache, 0, mask, AttentionPath::Bifurcated, &cfg, &mut lb).unwrap();
            let nav = attend_cached(&q, &cache, 0, mask, AttentionPath::Naive, &cfg, &mut ln).unwrap();
            prop_assert_eq!(bif.data(), nav.data());
            prop_assert_eq!(lb.flops, ln.flops);
            prop_assert_eq!(lb.reads_of(Operand::Key), kv_read_elements(b, g, k, m_c, m_d, true));
            prop_assert_eq!(ln.reads_of(Operand::Key), kv_read_elements(b, g, k, m_c, m_d, false));
            prop_assert_eq!(lb.reads_of(Operand::Value), kv_read_elements(b, g, k, m_c, m_d, true));
            if b >= 2 && m_c >= 1 {
                prop_assert!(lb.kv_reads() < ln.kv_reads());
            }
        }
    }
}
