//! Analytic memory-access and FLOP accounting for one forward step, and a
//! roofline cost model that turns it into predicted latency.
//!
//! `step_io` reproduces, term by term, what the engine's instrumented
//! kernels charge to an [`IoLedger`], grouped into the per-operation rows
//! of the standard incremental-decoding cost table (q, K, V projections,
//! logits, softmax, weighted values, output projection) plus the MLP and
//! the output head.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::attention::ModelConfig;
use crate::bifurcated::kv_read_elements;
use crate::error::{Error, Result};
use crate::tensor_core::{IoLedger, DEFAULT_ELEM_WIDTH};

pub const ROW_Q: &str = "q";
pub const ROW_K: &str = "k";
pub const ROW_V: &str = "v";
pub const ROW_LOGITS: &str = "logits";
pub const ROW_SOFTMAX: &str = "softmax";
pub const ROW_OUT: &str = "out";
pub const ROW_Y: &str = "y";
pub const ROW_MLP: &str = "mlp";
pub const ROW_LM_HEAD: &str = "lm_head";
pub const ROW_OTHER: &str = "other";

const ATTENTION_ROWS: [&str; 7] = [ROW_Q, ROW_K, ROW_V, ROW_LOGITS, ROW_SOFTMAX, ROW_OUT, ROW_Y];

/// Row of the cost table a ledger kernel belongs to.
pub fn row_for_kernel(kernel: &str) -> &'static str {
    match kernel {
        "q_proj" => ROW_Q,
        "k_proj" | "k_append" => ROW_K,
        "v_proj" | "v_append" => ROW_V,
        "qk" | "qk_ctx" => ROW_LOGITS,
        "softmax" => ROW_SOFTMAX,
        "wv" | "wv_ctx" => ROW_OUT,
        "o_proj" => ROW_Y,
        "mlp_up" | "mlp_down" => ROW_MLP,
        "lm_head" => ROW_LM_HEAD,
        _ => ROW_OTHER,
    }
}

/// Element traffic of one row. `activation` counts every access that is
/// not a weight or KV read, including all writes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowIo {
    pub param: u64,
    pub kv: u64,
    pub activation: u64,
    pub flops: u64,
}

impl RowIo {
    pub fn total(&self) -> u64 {
        self.param + self.kv + self.activation
    }

    fn add(&mut self, other: &RowIo) {
        self.param += other.param;
        self.kv += other.kv;
        self.activation += other.activation;
        self.flops += other.flops;
    }

    fn scaled(&self, f: u64) -> RowIo {
        RowIo {
            param: self.param * f,
            kv: self.kv * f,
            activation: self.activation * f,
            flops: self.flops * f,
        }
    }
}

/// Memory traffic and FLOPs of one forward step over all layers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepIoReport {
    /// Weight elements read.
    pub param_elements: u64,
    /// Key and value elements read.
    pub kv_elements: u64,
    /// All other reads plus all writes.
    pub activation_elements: u64,
    pub flops: u64,
    pub breakdown: BTreeMap<String, RowIo>,
    /// Exact attention-block traffic of one layer (q through y rows).
    pub layer_access_exact: u64,
    /// The table's leading-order estimate for one layer, `bnd + kv + d²`
    /// with `kv` the per-tensor KV read term (`bmd` for multi-head).
    pub layer_access_approx: u64,
    pub elem_width_bytes: usize,
}

impl StepIoReport {
    fn from_rows(
        breakdown: BTreeMap<String, RowIo>,
        layers: u64,
        approx: u64,
        width: usize,
    ) -> Self {
        let mut total = RowIo::default();
        for r in breakdown.values() {
            total.add(r);
        }
        let layer_access_exact = ATTENTION_ROWS
            .iter()
            .filter_map(|r| breakdown.get(*r))
            .map(RowIo::total)
            .sum::<u64>()
            / layers.max(1);
        Self {
            param_elements: total.param,
            kv_elements: total.kv,
            activation_elements: total.activation,
            flops: total.flops,
            breakdown,
            layer_access_exact,
            layer_access_approx: approx,
            elem_width_bytes: width,
        }
    }

    /// Groups a ledger (or a ledger delta) into table rows. The
    /// leading-order estimate is not recoverable from a ledger and is left 0.
    pub fn from_ledger(ledger: &IoLedger, layers: usize, elem_width_bytes: usize) -> Self {
        let mut rows: BTreeMap<String, RowIo> = BTreeMap::new();
        for (kernel, io) in &ledger.per_kernel {
            let row = RowIo {
                param: io.param_reads,
                kv: io.kv_reads,
                activation: io.reads - io.param_reads - io.kv_reads + io.writes,
                flops: io.flops,
            };
            rows.entry(row_for_kernel(kernel).to_string())
                .or_default()
                .add(&row);
        }
        Self::from_rows(rows, layers as u64, 0, elem_width_bytes)
    }

    pub fn total_elements(&self) -> u64 {
        self.param_elements + self.kv_elements + self.activation_elements
    }

    pub fn total_bytes(&self) -> u64 {
        self.total_elements() * self.elem_width_bytes as u64
    }

    /// Adds another step's traffic; the per-layer fields keep the larger value.
    pub fn accumulate(&mut self, other: &StepIoReport) {
        self.param_elements += other.param_elements;
        self.kv_elements += other.kv_elements;
        self.activation_elements += other.activation_elements;
        self.flops += other.flops;
        for (k, v) in &other.breakdown {
            self.breakdown.entry(k.clone()).or_default().add(v);
        }
        self.layer_access_exact = self.layer_access_exact.max(other.layer_access_exact);
        self.layer_access_approx = self.layer_access_approx.max(other.layer_access_approx);
        if self.elem_width_bytes == 0 {
            self.elem_width_bytes = other.elem_width_bytes;
        }
    }

    /// Compares everything a ledger can reproduce: totals and every row.
    pub fn matches_ledger(&self, ledger_report: &StepIoReport) -> bool {
        self.param_elements == ledger_report.param_elements
            && self.kv_elements == ledger_report.kv_elements
            && self.activation_elements == ledger_report.activation_elements
            && self.flops == ledger_report.flops
            && self.breakdown == ledger_report.breakdown
    }
}

/// Traffic of one forward step: `b` sequences each feeding `n` new tokens,
/// attending to `m_c` shared context positions and `m_d` per-sequence
/// positions (the latter already including the `n` new ones).
///
/// Prefill is the naive step with `b = 1`, `m_c = 0`, `m_d = n`.
pub fn step_io(
    cfg: &ModelConfig,
    b: usize,
    m_c: usize,
    m_d: usize,
    n: usize,
    bifurcated: bool,
) -> Result<StepIoReport> {
    step_io_with_width(cfg, b, m_c, m_d, n, bifurcated, DEFAULT_ELEM_WIDTH)
}

pub fn step_io_with_width(
    cfg: &ModelConfig,
    b: usize,
    m_c: usize,
    m_d: usize,
    n: usize,
    bifurcated: bool,
    elem_width_bytes: usize,
) -> Result<StepIoReport> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Config("step_io needs n >= 1".into()));
    }
    if m_c + m_d == 0 {
        return Err(Error::EmptyKeys);
    }
    let [b, n, d, h, g, k, f, m_c, m_d] = [
        b,
        n,
        cfg.hidden,
        cfg.heads,
        cfg.groups,
        cfg.head_dim,
        cfg.fanout,
        m_c,
        m_d,
    ]
    .map(|x| x as u64);
    let m = m_c + m_d;
    let bnd = b * n * d;
    let bhn = b * h * n;
    let v = k;

    let proj = |heads: u64, cache_write: bool| RowIo {
        param: heads * d * k,
        kv: 0,
        activation: bnd + b * heads * n * k + if cache_write { b * heads * n * k } else { 0 },
        flops: 2 * bnd * heads * k,
    };
    let q = proj(h, false);
    let kr = proj(g, true);
    let vr = proj(g, true);

    let kv_k = kv_read_elements(
        b as usize,
        g as usize,
        k as usize,
        m_c as usize,
        m_d as usize,
        bifurcated,
    );
    let kv_v = kv_read_elements(
        b as usize,
        g as usize,
        v as usize,
        m_c as usize,
        m_d as usize,
        bifurcated,
    );
    let split = bifurcated && m_c > 0 && m_d > 0;
    // Each branch re-reads the queries.
    let q_reads = if split { 2 } else { 1 } * bhn * k;
    let logits = RowIo {
        param: 0,
        kv: kv_k,
        activation: q_reads + bhn * m,
        flops: 2 * bhn * m * k,
    };
    let softmax = RowIo {
        param: 0,
        kv: 0,
        activation: 2 * bhn * m,
        flops: bhn * m,
    };
    // The decode branch reads and rewrites the context partial output.
    let (acc_reads, out_writes) = match (bifurcated, m_c > 0, m_d > 0) {
        (true, true, true) => (bhn * v, 2 * bhn * v),
        (true, false, true) => (bhn * v, bhn * v),
        _ => (0, bhn * v),
    };
    let out = RowIo {
        param: 0,
        kv: kv_v,
        activation: bhn * m + acc_reads + out_writes,
        flops: 2 * bhn * m * v,
    };
    let y = RowIo {
        param: h * v * d,
        kv: 0,
        activation: 2 * bnd,
        flops: 2 * bnd * d,
    };
    let mlp = RowIo {
        param: 2 * d * f * d,
        kv: 0,
        activation: 2 * (bnd + b * n * f * d),
        flops: 4 * bnd * f * d,
    };
    let vocab = cfg.vocab as u64;
    let lm_head = RowIo {
        param: vocab * d,
        kv: 0,
        activation: bnd + b * n * vocab,
        flops: 2 * bnd * vocab,
    };

    let layers = cfg.layers as u64;
    let mut rows = BTreeMap::new();
    for (label, row) in [
        (ROW_Q, q),
        (ROW_K, kr),
        (ROW_V, vr),
        (ROW_LOGITS, logits),
        (ROW_SOFTMAX, softmax),
        (ROW_OUT, out),
        (ROW_Y, y),
        (ROW_MLP, mlp),
    ] {
        rows.insert(label.to_string(), row.scaled(layers));
    }
    rows.insert(ROW_LM_HEAD.to_string(), lm_head);
    let approx = bnd + kv_k + d * d;
    Ok(StepIoReport::from_rows(
        rows,
        layers,
        approx,
        elem_width_bytes,
    ))
}

/// Forward FLOPs under the `2N` convention, `N` the non-embedding
/// parameter count.
pub fn forward_flops(cfg: &ModelConfig, tokens: usize) -> u64 {
    2 * cfg.non_embedding_params() as u64 * tokens as u64
}

/// FLOPs of both attention contractions over all layers: `4·b·d·n·m·ℓ`
/// (each contraction is `2·b·d·n·m` with a multiply-add counted as 2).
pub fn attention_flops(cfg: &ModelConfig, b: usize, n: usize, m: usize) -> u64 {
    4 * (b * cfg.hidden * n * m * cfg.layers) as u64
}

/// Roofline latency model: `max(bytes / bandwidth, flops / throughput) + overhead`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub bytes_per_second: f64,
    pub flops_per_second: f64,
    pub fixed_overhead_seconds: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::generic_cpu()
    }
}

impl CostModel {
    pub fn new(
        bytes_per_second: f64,
        flops_per_second: f64,
        fixed_overhead_seconds: f64,
    ) -> Result<Self> {
        let cm = Self {
            bytes_per_second,
            flops_per_second,
            fixed_overhead_seconds,
        };
        cm.validate()?;
        Ok(cm)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if ok(self.bytes_per_second)
            && ok(self.flops_per_second)
            && self.fixed_overhead_seconds.is_finite()
            && self.fixed_overhead_seconds >= 0.0
        {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid cost model {self:?}")))
        }
    }

    /// Rough numbers for a desktop CPU running scalar kernels.
    pub fn generic_cpu() -> Self {
        Self {
            bytes_per_second: 2.0e10,
            flops_per_second: 5.0e10,
            fixed_overhead_seconds: 1.0e-6,
        }
    }

    /// An HBM accelerator at realistic attained (not peak) rates.
    pub fn datacenter_gpu() -> Self {
        Self {
            bytes_per_second: 6.5e11,
            flops_per_second: 3.0e14,
            fixed_overhead_seconds: 0.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cpu" => Ok(Self::generic_cpu()),
            "gpu" => Ok(Self::datacenter_gpu()),
            _ => Err(Error::Config(format!("unknown cost model preset {name:?}"))),
        }
    }

    pub fn latency(&self, bytes: f64, flops: f64) -> f64 {
        (bytes / self.bytes_per_second).max(flops / self.flops_per_second)
            + self.fixed_overhead_seconds
    }

    /// Least-squares fit of `seconds ≈ bytes/bw + flops/tp + overhead` to
    /// `(bytes, flops, seconds)` samples, weighted by `1/seconds` so short
    /// and long runs count alike. Coefficients that come out
    /// non-positive are dropped and the rest refitted; a dropped rate is
    /// reported as effectively unlimited. Returns the model and R².
    pub fn fit(samples: &[(f64, f64, f64)]) -> Result<(Self, f64)> {
        if samples.len() < 3 {
            return Err(Error::Calibration(format!(
                "need at least 3 samples, got {}",
                samples.len()
            )));
        }
        let mut active = [true; 3];
        let coef = loop {
            let cols: Vec<usize> = (0..3).filter(|&c| active[c]).collect();
            if cols.is_empty() {
                return Err(Error::Calibration(
                    "no positive coefficient fits the samples".into(),
                ));
            }
            let w = |r: usize| 1.0 / samples[r].2.max(f64::MIN_POSITIVE);
            let a = DMatrix::from_fn(samples.len(), cols.len(), |r, c| {
                w(r) * match cols[c] {
                    0 => samples[r].0,
                    1 => samples[r].1,
                    _ => 1.0,
                }
            });
            // Columns differ by orders of magnitude; normalize before solving.
            let norms: Vec<f64> = (0..cols.len())
                .map(|c| a.column(c).norm().max(f64::MIN_POSITIVE))
                .collect();
            let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |r, c| a[(r, c)] / norms[c]);
            let y = DVector::from_iterator(
                samples.len(),
                (0..samples.len()).map(|r| samples[r].2 * w(r)),
            );
            let x = scaled
                .svd(true, true)
                .solve(&y, 1e-12)
                .map_err(|e| Error::Calibration(e.to_string()))?;
            let mut full = [0.0; 3];
            for (i, &c) in cols.iter().enumerate() {
                full[c] = x[i] / norms[i];
            }
            match cols
                .iter()
                .find(|&&c| full[c] < 0.0 || (c < 2 && full[c] == 0.0))
            {
                Some(&c) => active[c] = false,
                None => break full,
            }
        };
        let rate = |c: f64| if c > 0.0 { 1.0 / c } else { 1.0e30 };
        let model = Self {
            bytes_per_second: rate(coef[0]),
            flops_per_second: rate(coef[1]),
            fixed_overhead_seconds: coef[2].max(0.0),
        };
        let mean = samples.iter().map(|s| s.2).sum::<f64>() / samples.len() as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for s in samples {
            let pred = s.0 * coef[0] + s.1 * coef[1] + coef[2];
            ss_res += (s.2 - pred).powi(2);
            ss_tot += (s.2 - mean).powi(2);
        }
        let r2 = if ss_tot > 0.0 {
            1.0 - ss_res / ss_tot
        } else {
            1.0
        };
        Ok((model, r2))
    }
}

/// Predicted seconds for one step on the roofline.
pub fn predict_step_latency(report: &StepIoReport, cm: &CostModel, elem_width_bytes: usize) -> f64 {
    cm.latency(
        (report.total_elements() * elem_width_bytes as u64) as f64,
        report.flops as f64,
    )
}

/// Predicted seconds for the traffic recorded in a ledger.
pub fn predict_ledger_latency(ledger: &IoLedger, cm: &CostModel) -> f64 {
    cm.latency(
        (ledger.bytes_read + ledger.bytes_written) as f64,
        ledger.flops as f64,
    )
}

/// Named model shapes for analytic sweeps.
pub fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "7b-mh-8k" => Ok(ModelConfig::new(4096, 32, 32, 32)?
            .with_vocab(32_000)
            .with_max_positions(16_384)),
        "7b-mq-8k" => Ok(ModelConfig::new(4096, 32, 1, 32)?
            .with_vocab(32_000)
            .with_max_positions(16_384)),
        "1b-mh" => Ok(ModelConfig::new(2560, 20, 20, 12)?
            .with_vocab(50_000)
            .with_max_positions(16_384)),
        "toy" => ModelConfig::new(64, 8, 2, 2),
        _ => Err(Error::Config(format!("unknown model preset {name:?}"))),
    }
}

pub const MODEL_PRESETS: [&str; 4] = ["7b-mh-8k", "7b-mq-8k", "1b-mh", "toy"];

/// Predicted prefill-plus-decode latency for single-context batch sampling:
/// one batch-1 prefill over `m_c` tokens, then `steps` decode steps for
/// `b` sequences.
pub fn end_to_end_latency(
    cfg: &ModelConfig,
    b: usize,
    m_c: usize,
    steps: usize,
    bifurcated: bool,
    cm: &CostModel,
    elem_width_bytes: usize,
) -> Result<f64> {
    let prefill = step_io_with_width(cfg, 1, 0, m_c, m_c, false, elem_width_bytes)?;
    let mut total = predict_step_latency(&prefill, cm, elem_width_bytes);
    for m_d in 1..=steps {
        let step = step_io_with_width(cfg, b, m_c, m_d, 1, bifurcated, elem_width_bytes)?;
        total += predict_step_latency(&step, cm, elem_width_bytes);
    }
    Ok(total)
}

/// Latency summary of one model in a capability-equivalent comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelLatency {
    pub params: f64,
    pub kv_elements_per_step: f64,
    pub prefill_seconds: f64,
    pub first_step_seconds: f64,
    pub last_step_seconds: f64,
    pub total_seconds: f64,
}

/// A multi-head model against a lower-group counterpart whose parameter
/// count is `size_factor` times larger (to match capability).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityComparison {
    pub size_factor: f64,
    pub groups: usize,
    pub b: usize,
    pub m_c: usize,
    pub steps: usize,
    pub multi_head: ModelLatency,
    pub counterpart: ModelLatency,
}

/// Per-step traffic of the scaled counterpart: weights and activations
/// grow by `F`, KV traffic scales by `(g/h)·F`, FLOPs by `F`.
fn scaled_latency(
    cfg: &ModelConfig,
    scale: [f64; 3],
    b: usize,
    m_c: usize,
    steps: usize,
    cm: &CostModel,
    width: usize,
) -> Result<ModelLatency> {
    let [param_f, kv_f, flop_f] = scale;
    let lat = |r: &StepIoReport| {
        let elements = r.param_elements as f64 * param_f
            + r.kv_elements as f64 * kv_f
            + r.activation_elements as f64 * param_f;
        cm.latency(elements * width as f64, r.flops as f64 * flop_f)
    };
    let prefill = step_io_with_width(cfg, 1, 0, m_c, m_c, false, width)?;
    let prefill_seconds = lat(&prefill);
    let mut total = prefill_seconds;
    let (mut first, mut last, mut kv) = (0.0, 0.0, 0.0);
    for m_d in 1..=steps {
        let r = step_io_with_width(cfg, b, m_c, m_d, 1, false, width)?;
        let t = lat(&r);
        if m_d == 1 {
            first = t;
            kv = r.kv_elements as f64 * kv_f;
        }
        last = t;
        total += t;
    }
    Ok(ModelLatency {
        params: cfg.non_embedding_params() as f64 * param_f,
        kv_elements_per_step: kv,
        prefill_seconds,
        first_step_seconds: first,
        last_step_seconds: last,
        total_seconds: total,
    })
}

/// Compares a multi-head model with a `groups`-group counterpart scaled by
/// `size_factor` (e.g. 1.1 for multi-query) over a prefill of `m_c` tokens
/// and `steps` decode steps at batch `b`.
#[allow(clippy::too_many_arguments)]
pub fn capability_equivalent_compare(
    cfg_mh: &ModelConfig,
    groups: usize,
    size_factor: f64,
    b: usize,
    m_c: usize,
    steps: usize,
    cm: &CostModel,
    elem_width_bytes: usize,
) -> Result<CapabilityComparison> {
    // Also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(size_factor >= 1.0) {
        return Err(Error::Config(format!(
            "size factor {size_factor} must be >= 1"
        )));
    }
    if groups == 0 || !cfg_mh.heads.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "groups {groups} must divide heads {}",
            cfg_mh.heads
        )));
    }
    if cfg_mh.groups != cfg_mh.heads {
        return Err(Error::Config("reference model must be multi-head".into()));
    }
    let kv_f = groups as f64 / cfg_mh.heads as f64 * size_factor;
    let multi_head = scaled_latency(cfg_mh, [1.0; 3], b, m_c, steps, cm, elem_width_bytes)?;
    let counterpart = scaled_latency(
        cfg_mh,
        [size_factor, kv_f, size_factor],
        b,
        m_c,
        steps,
        cm,
        elem_width_bytes,
    )?;
    Ok(CapabilityComparison {
        size_factor,
        groups,
        b,
        m_c,
        steps,
        multi_head,
        counterpart,
    })
}
