//! Multi-group attention: multi-head (`groups == heads`), multi-query
//! (`groups == 1`) and everything in between, in the ordinary
//! (non-bifurcated) form used for prefill and as the decode-time oracle.
//!
//! The group size `p = heads / groups` is always an explicit tensor axis, so
//! the same kernels serve every member of the family.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{
    contract_qk, contract_wv, softmax_lastaxis, Access, IoLedger, Operand, Scalar, Tensor,
};

/// Architecture record for one multi-group decoder model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden dimension `d`.
    pub hidden: usize,
    /// Query heads `h`.
    pub heads: usize,
    /// Key/value groups `g`.
    pub groups: usize,
    /// Head dimension `k = d / h`; the value head dimension is the same.
    pub head_dim: usize,
    pub layers: usize,
    /// MLP intermediate width as a multiple of `hidden` (2 or 4).
    pub fanout: usize,
    pub vocab: usize,
    pub max_positions: usize,
    /// Scale logits by `1/sqrt(head_dim)`.
    pub scale_qk: bool,
}

impl ModelConfig {
    /// Byte-level vocabulary plus one begin-of-sequence marker.
    pub const BYTE_VOCAB: usize = 257;

    pub fn new(hidden: usize, heads: usize, groups: usize, layers: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "hidden {hidden} is not a multiple of heads {heads}"
            )));
        }
        let cfg = Self {
            hidden,
            heads,
            groups,
            head_dim: hidden / heads,
            layers,
            fanout: 4,
            vocab: Self::BYTE_VOCAB,
            max_positions: 512,
            scale_qk: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_fanout(mut self, fanout: usize) -> Result<Self> {
        self.fanout = fanout;
        self.validate()?;
        Ok(self)
    }

    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn with_max_positions(mut self, max_positions: usize) -> Self {
        self.max_positions = max_positions;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Result<Self> {
        self.groups = groups;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != heads {} * head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.groups == 0 || self.groups > self.heads || !self.heads.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "groups {} must divide heads {}",
                self.groups, self.heads
            )));
        }
        if !matches!(self.fanout, 2 | 4) {
            return Err(Error::Config(format!(
                "fanout {} not in {{2, 4}}",
                self.fanout
            )));
        }
        if self.head_dim == 0 || self.layers == 0 {
            return Err(Error::Config("head_dim and layers must be positive".into()));
        }
        Ok(())
    }

    /// Query heads per group, `p = h / g`.
    pub fn group_size(&self) -> usize {
        self.heads / self.groups
    }

    pub fn value_dim(&self) -> usize {
        self.head_dim
    }

    /// Per-layer parameters in the four attention projections.
    pub fn attention_params_per_layer(&self) -> usize {
        let (d, k) = (self.hidden, self.head_dim);
        self.heads * d * k + 2 * self.groups * d * k + self.heads * k * d
    }

    pub fn mlp_params_per_layer(&self) -> usize {
        2 * self.hidden * self.fanout * self.hidden
    }

    /// Parameter count excluding embeddings, position table and norms.
    pub fn non_embedding_params(&self) -> usize {
        self.layers * (self.attention_params_per_layer() + self.mlp_params_per_layer())
    }

    /// KV-cache elements stored per position per sequence (keys and values, all layers).
    pub fn kv_elements_per_position(&self) -> usize {
        2 * self.layers * self.groups * self.head_dim
    }

    pub fn logit_scale(&self) -> f64 {
        if self.scale_qk {
            1.0 / (self.head_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Projection weights of one attention layer. The key and value projections
/// carry `groups` heads, not `heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// `[h, d, k]`
    pub q_proj: Tensor<T>,
    /// `[g, d, k]`
    pub k_proj: Tensor<T>,
    /// `[g, d, v]`
    pub v_proj: Tensor<T>,
    /// `[h, v, d]`
    pub o_proj: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, h, g, k) = (cfg.hidden, cfg.heads, cfg.groups, cfg.head_dim);
        Self {
            q_proj: Tensor::zeros([h, d, k]),
            k_proj: Tensor::zeros([g, d, k]),
            v_proj: Tensor::zeros([g, d, k]),
            o_proj: Tensor::zeros([h, k, d]),
        }
    }

    pub fn random<R: Rng>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, std).expect("positive std");
        for t in p.tensors_mut() {
            for x in t.data_mut() {
                *x = T::from_f64_lossy(normal.sample(rng));
            }
        }
        p
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.q_proj, &self.k_proj, &self.v_proj, &self.o_proj]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [
            &mut self.q_proj,
            &mut self.k_proj,
            &mut self.v_proj,
            &mut self.o_proj,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Output of the q/K/V projections in group layout.
#[derive(Clone, Debug)]
pub struct QkvProjection<T> {
    /// `[b, g, p, n, k]`
    pub q: Tensor<T>,
    /// `[b, g, n, k]`
    pub k_new: Tensor<T>,
    /// `[b, g, n, v]`
    pub v_new: Tensor<T>,
}

/// `out[b, j, n, e] = Σ_d x[b, n, d] · w[j, d, e]`, laid out as
/// `[b, heads_w, n, e]`.
fn project_heads<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Vec<T> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (heads, e) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![T::zero(); b * heads * n * e];
    let (xd, wd) = (x.data(), w.data());
    for bi in 0..b {
        for hi in 0..heads {
            for ni in 0..n {
                let x_row = &xd[(bi * n + ni) * d..][..d];
                let o = &mut out[((bi * heads + hi) * n + ni) * e..][..e];
                for (ei, slot) in o.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for (di, &xv) in x_row.iter().enumerate() {
                        acc = acc + xv * wd[(hi * d + di) * e + ei];
                    }
                    *slot = acc;
                }
            }
        }
    }
    out
}

fn check_input<T: Scalar>(op: &'static str, x: &Tensor<T>, d: usize) -> Result<(usize, usize)> {
    if x.rank() != 3 {
        return Err(Error::RankMismatch {
            op,
            expected: 3,
            found: x.rank(),
        });
    }
    if x.shape()[2] != d {
        return Err(Error::ShapeMismatch {
            op,
            axis: "d",
            expected: d,
            found: x.shape()[2],
        });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Linear q/K/V projections of `x: [b, n, d]`, with q reshaped to
/// `[b, g, p, n, k]`.
pub fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<QkvProjection<T>> {
    cfg.validate()?;
    let (d, g, p, k) = (cfg.hidden, cfg.groups, cfg.group_size(), cfg.head_dim);
    let (b, n) = check_input("project_qkv", x, d)?;
    let w = x.elem_width_bytes();
    let mut project = |label: &str, weights: &Tensor<T>, heads: usize| {
        let out = project_heads(x, weights);
        ledger.record(
            label,
            &[
                Access::new(Operand::Activation, x.len(), w),
                Access::new(Operand::Param, weights.len(), weights.elem_width_bytes()),
            ],
            &[Access::new(Operand::Activation, out.len(), w)],
            2 * (b * n * d * heads * k) as u64,
        );
        out
    };
    // [b, h, n, k] with h = g·p is already [b, g, p, n, k] in row-major order.
    let q = project("q_proj", &params.q_proj, cfg.heads);
    let k_new = project("k_proj", &params.k_proj, g);
    let v_new = project("v_proj", &params.v_proj, g);
    Ok(QkvProjection {
        q: Tensor::new([b, g, p, n, k], q)?.with_elem_width(w),
        k_new: Tensor::new([b, g, n, k], k_new)?.with_elem_width(w),
        v_new: Tensor::new([b, g, n, k], v_new)?.with_elem_width(w),
    })
}

/// Output projection of merged heads `[b, n, d]` through `P_O: [h, v, d]`.
pub fn project_out<T: Scalar>(
    o: &Tensor<T>,
    params: &AttentionParams<T>,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    let d = cfg.hidden;
    let (b, n) = check_input("project_out", o, d)?;
    let po = params.o_proj.data();
    let mut out = vec![T::zero(); b * n * d];
    for (row, y) in out.chunks_exact_mut(d).enumerate() {
        let o_row = &o.data()[row * d..][..d];
        for (e, slot) in y.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (j, &ov) in o_row.iter().enumerate() {
                acc = acc + ov * po[j * d + e];
            }
            *slot = acc;
        }
    }
    let w = o.elem_width_bytes();
    ledger.record(
        "o_proj",
        &[
            Access::new(Operand::Activation, o.len(), w),
            Access::new(
                Operand::Param,
                params.o_proj.len(),
                params.o_proj.elem_width_bytes(),
            ),
        ],
        &[Access::new(Operand::Activation, out.len(), w)],
        2 * (b * n * d * d) as u64,
    );
    Ok(Tensor::new([b, n, d], out)?.with_elem_width(w))
}

/// Which query/key pairs are visible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CausalSpec {
    /// Every query sees every key. Only meaningful for a single query
    /// positioned after all keys.
    Unmasked,
    /// Query `i` sits at absolute position `offset + i` and sees keys `j <= offset + i`.
    Causal { offset: usize },
}

impl CausalSpec {
    /// Mask for `n` queries that are the last `n` of `m` keys.
    pub fn trailing(n: usize, m: usize) -> Self {
        CausalSpec::Causal {
            offset: m.saturating_sub(n),
        }
    }
}

/// Sets `logits[.., i, j]` to the mask value wherever `j > offset + i`.
pub fn causal_mask<T: Scalar>(logits: &Tensor<T>, offset: usize) -> Result<Tensor<T>> {
    if logits.rank() < 2 {
        return Err(Error::RankMismatch {
            op: "causal_mask",
            expected: 2,
            found: logits.rank(),
        });
    }
    let r = logits.rank();
    let (n, m) = (logits.shape()[r - 2], logits.shape()[r - 1]);
    if offset + n > m {
        return Err(Error::MaskOffset {
            offset,
            queries: n,
            keys: m,
        });
    }
    let mut out = logits.clone();
    if m > 0 {
        for (row, vals) in out.data_mut().chunks_exact_mut(m).enumerate() {
            let visible = offset + row % n.max(1);
            for v in &mut vals[visible + 1..] {
                *v = T::mask_value();
            }
        }
    }
    Ok(out)
}

/// Applies the optional logit scale and the causal mask.
pub(crate) fn finish_logits<T: Scalar>(
    mut logits: Tensor<T>,
    mask: CausalSpec,
    cfg: &ModelConfig,
) -> Result<Tensor<T>> {
    if cfg.scale_qk {
        let s = T::from_f64_lossy(cfg.logit_scale());
        for x in logits.data_mut() {
            *x = *x * s;
        }
    }
    match mask {
        CausalSpec::Unmasked => Ok(logits),
        CausalSpec::Causal { offset } => causal_mask(&logits, offset),
    }
}

/// `[b, g, p, n, v]` → `[b, n, d]` with head index `g_i·p + p_i`.
pub fn merge_heads<T: Scalar>(out: &Tensor<T>) -> Tensor<T> {
    let s = out.shape();
    let (b, g, p, n, v) = (s[0], s[1], s[2], s[3], s[4]);
    let d = g * p * v;
    let mut merged = vec![T::zero(); b * n * d];
    let src = out.data();
    for bi in 0..b {
        for hi in 0..g * p {
            for ni in 0..n {
                let from = &src[((bi * g * p + hi) * n + ni) * v..][..v];
                merged[(bi * n + ni) * d + hi * v..][..v].copy_from_slice(from);
            }
        }
    }
    Tensor::new([b, n, d], merged)
        .expect("merged length")
        .with_elem_width(out.elem_width_bytes())
}

pub(crate) fn check_query<T: Scalar>(q: &Tensor<T>, cfg: &ModelConfig) -> Result<()> {
    const OP: &str = "attend";
    if q.rank() != 5 {
        return Err(Error::RankMismatch {
            op: OP,
            expected: 5,
            found: q.rank(),
        });
    }
    let s = q.shape();
    for (axis, expected, found) in [
        ("g", cfg.groups, s[1]),
        ("p", cfg.group_size(), s[2]),
        ("k", cfg.head_dim, s[4]),
    ] {
        if expected != found {
            return Err(Error::ShapeMismatch {
                op: OP,
                axis,
                expected,
                found,
            });
        }
    }
    Ok(())
}

/// Ordinary multi-group attention over per-batch keys and values.
///
/// Returns the merged head outputs `[b, n, d]` (before the output projection).
pub fn attend_naive<T: Scalar>(
    q: &Tensor<T>,
    keys: &Tensor<T>,
    values: &Tensor<T>,
    mask: CausalSpec,
    cfg: &ModelConfig,
    ledger: &mut IoLedger,
) -> Result<Tensor<T>> {
    check_query(q, cfg)?;
    if keys.rank() == 4 && keys.shape()[2] == 0 {
        return Err(Error::EmptyKeys);
    }
    let logits = contract_qk(q, keys, ledger)?;
    let logits = finish_logits(logits, mask, cfg)?;
    let weights = softmax_lastaxis(&logits, ledger)?;
    let out = contract_wv(&weights, values, ledger)?;
    Ok(merge_heads(&out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: usize, h: usize, g: usize) -> ModelConfig {
        let mut c = ModelConfig::new(d, h, g, 1).unwrap();
        c.scale_qk = false;
        c
    }

    #[test]
    fn config_invariants() {
        assert!(ModelConfig::new(8, 2, 1, 1).is_ok());
        assert!(ModelConfig::new(8, 4, 3, 1).is_err());
        assert!(ModelConfig::new(8, 3, 1, 1).is_err());
        assert!(ModelConfig::new(8, 2, 4, 1).is_err());
        assert!(ModelConfig::new(8, 2, 2, 1)
            .unwrap()
            .with_fanout(3)
            .is_err());
        assert!(ModelConfig::new(8, 2, 2, 1).unwrap().with_fanout(2).is_ok());
    }

    #[test]
    fn kv_projection_has_group_heads() {
        let c = ModelConfig::new(8, 4, 2, 1).unwrap();
        let p = AttentionParams::<f64>::zeros(&c);
        assert_eq!(p.k_proj.len(), 8 * 2 * 2);
        assert_eq!(p.v_proj.len(), 8 * 2 * 2);
        assert_eq!(p.q_proj.len(), 8 * 8);
    }

    #[test]
    fn project_two_heads_by_hand() {
        // d=2, h=2, g=1, k=1: q_h = Σ_d x_d · P_q[h, d, 0].
        let c = cfg(2, 2, 1);
        let mut p = AttentionParams::<f64>::zeros(&c);
        p.q_proj = Tensor::<f64>::from_f64([2, 2, 1], &[1., 2., 3., 4.]).unwrap();
        p.k_proj = Tensor::<f64>::from_f64([1, 2, 1], &[1., -1.]).unwrap();
        p.v_proj = Tensor::<f64>::from_f64([1, 2, 1], &[0.5, 0.5]).unwrap();
        let x = Tensor::<f64>::from_f64([1, 1, 2], &[1., 1.]).unwrap();
        let mut l = IoLedger::new();
        let out = project_qkv(&x, &p, &c, &mut l).unwrap();
        assert_eq!(out.q.shape(), &[1, 1, 2, 1, 1]);
        assert_eq!(out.q.data(), &[3., 7.]);
        assert_eq!(out.k_new.data(), &[0.]);
        assert_eq!(out.v_new.data(), &[1.]);
        assert_eq!(l.kernel("q_proj").flops, 2 * 2 * 2);
        assert_eq!(l.reads_of(Operand::Param), 4 + 2 + 2);
    }

    #[test]
    fn one_hot_input_selects_projection_row() {
        let c = cfg(4, 2, 2);
        let mut p = AttentionParams::<f64>::zeros(&c);
        for (i, x) in p.q_proj.data_mut().iter_mut().enumerate() {
            *x = i as f64;
        }
        let x = Tensor::<f64>::from_f64([1, 1, 4], &[0., 0., 1., 0.]).unwrap();
        let out = project_qkv(&x, &p, &c, &mut IoLedger::new()).unwrap();
        // head 0 row d=2 is [4, 5]; head 1 row d=2 is [12, 13]
        assert_eq!(out.q.data(), &[4., 5., 12., 13.]);
        let zero = Tensor::zeros([2, 3, 4]);
        let out = project_qkv(&zero, &p, &c, &mut IoLedger::new()).unwrap();
        assert!(out.q.data().iter().all(|&v| v == 0.0));
        assert!(out.k_new.data().iter().all(|&v| v == 0.0));
        assert!(out.v_new.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_key_returns_its_value() {
        let c = cfg(4, 2, 1);
        let q = Tensor::<f64>::from_f64([1, 1, 2, 1, 2], &[0.3, -0.2, 1.5, 2.0]).unwrap();
        let k = Tensor::<f64>::from_f64([1, 1, 1, 2], &[1., 1.]).unwrap();
        let v = Tensor::<f64>::from_f64([1, 1, 1, 2], &[7., -3.]).unwrap();
        let out = attend_naive(&q, &k, &v, CausalSpec::Unmasked, &c, &mut IoLedger::new()).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4]);
        assert_eq!(out.data(), &[7., -3., 7., -3.]);
    }

    #[test]
    fn equal_logits_average_values() {
        let c = cfg(2, 1, 1);
        let q = Tensor::<f64>::from_f64([1, 1, 1, 1, 2], &[1., 1.]).unwrap();
        let k = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let v = Tensor::<f64>::from_f64([1, 1, 2, 2], &[2., 0., 0., 2.]).unwrap();
        let out = attend_naive(&q, &k, &v, CausalSpec::Unmasked, &c, &mut IoLedger::new()).unwrap();
        assert_eq!(out.data(), &[1., 1.]);
    }

    #[test]
    fn multi_query_matches_replicated_multi_head() {
        let (h, k, m) = (4, 3, 5);
        let d = h * k;
        let mq = cfg(d, h, 1);
        let mh = cfg(d, h, h);
        let q_data: Vec<f64> = (0..h * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let k_data: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let v_data: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.25 - 1.0).collect();
        let q_mq = Tensor::<f64>::from_f64([1, 1, h, 1, k], &q_data).unwrap();
        let q_mh = Tensor::<f64>::from_f64([1, h, 1, 1, k], &q_data).unwrap();
        let rep = |data: &[f64]| data.repeat(h);
        let out_mq = attend_naive(
            &q_mq,
            &Tensor::<f64>::from_f64([1, 1, m, k], &k_data).unwrap(),
            &Tensor::<f64>::from_f64([1, 1, m, k], &v_data).unwrap(),
            CausalSpec::Unmasked,
            &mq,
            &mut IoLedger::new(),
        )
        .unwrap();
        let out_mh = attend_naive(
            &q_mh,
            &Tensor::<f64>::from_f64([1, h, m, k], &rep(&k_data)).unwrap(),
            &Tensor::<f64>::from_f64([1, h, m, k], &rep(&v_data)).unwrap(),
            CausalSpec::Unmasked,
            &mh,
            &mut IoLedger::new(),
        )
        .unwrap();
        assert_eq!(out_mq.data(), out_mh.data());
    }

    #[test]
    fn empty_keys_rejected() {
        let c = cfg(2, 1, 1);
        let q = Tensor::<f64>::zeros([1, 1, 1, 1, 2]);
        let kv = Tensor::<f64>::zeros([1, 1, 0, 2]);
        let err = attend_naive(&q, &kv, &kv, CausalSpec::Unmasked, &c, &mut IoLedger::new());
        assert!(matches!(err, Err(Error::EmptyKeys)));
    }

    fn visibility(n: usize, m: usize, offset: usize) -> Vec<Vec<bool>> {
        let logits = Tensor::<f64>::zeros([n, m]);
        let masked = causal_mask(&logits, offset).unwrap();
        masked
            .data()
            .chunks(m)
            .map(|r| r.iter().map(|&v| v == 0.0).collect())
            .collect()
    }

    #[test]
    fn causal_mask_examples() {
        assert_eq!(
            visibility(2, 2, 0),
            vec![vec![true, false], vec![true, true]]
        );
        assert_eq!(visibility(1, 4, 3), vec![vec![true; 4]]);
        assert_eq!(
            visibility(2, 3, 1),
            vec![vec![true, true, false], vec![true, true, true]]
        );
        assert!(matches!(
            causal_mask(&Tensor::<f64>::zeros([2, 3]), 2),
            Err(Error::MaskOffset { .. })
        ));
    }

    #[test]
    fn masked_softmax_has_no_nan() {
        let c = cfg(2, 1, 1);
        let q = Tensor::<f64>::from_f64([1, 1, 1, 2, 2], &[1., 2., -3., 4.]).unwrap();
        let k = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let v = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let out = attend_naive(
            &q,
            &k,
            &v,
            CausalSpec::Causal { offset: 0 },
            &c,
            &mut IoLedger::new(),
        )
        .unwrap();
        assert!(out.data().iter().all(|x| x.is_finite()));
        // first query sees only key 0
        assert_eq!(&out.data()[..2], &[1., 2.]);
    }

    #[test]
    fn logits_flops_independent_of_groups() {
        let (b, n, m, h, k) = (2, 3, 7, 8, 8);
        let d = h * k;
        let mut flops = Vec::new();
        for g in [1, 2, 4, 8] {
            let c = cfg(d, h, g);
            let mut l = IoLedger::new();
            let q = Tensor::<f64>::zeros([b, g, h / g, n, k]);
            let kv = Tensor::<f64>::zeros([b, g, m, k]);
            attend_naive(&q, &kv, &kv, CausalSpec::Unmasked, &c, &mut l).unwrap();
            flops.push(l.kernel("qk").flops);
        }
        assert!(flops.iter().all(|&f| f == (2 * b * d * n * m) as u64));
    }

    #[test]
    fn scaling_preserves_argmax() {
        let mut c = cfg(4, 1, 1);
        let q = Tensor::<f64>::from_f64([1, 1, 1, 1, 4], &[0.5, -1., 2., 0.1]).unwrap();
        let k = Tensor::<f64>::from_f64(
            [1, 1, 3, 4],
            &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 1.],
        )
        .unwrap();
        let mut l = IoLedger::new();
        let raw = finish_logits(
            contract_qk(&q, &k, &mut l).unwrap(),
            CausalSpec::Unmasked,
            &c,
        )
        .unwrap();
        c.scale_qk = true;
        let scaled = finish_logits(
            contract_qk(&q, &k, &mut l).unwrap(),
            CausalSpec::Unmasked,
            &c,
        )
        .unwrap();
        let argmax = |t: &Tensor<f64>| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(argmax(&raw), argmax(&scaled));
        assert_eq!(scaled.data()[1], raw.data()[1] * 0.5);
    }
}
