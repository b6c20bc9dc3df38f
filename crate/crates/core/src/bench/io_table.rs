//! Analytic naive-vs-bifurcated IO and latency tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CausalSpec, ModelConfig};
use crate::bifurcated::{attend_cached, kv_read_elements, AttentionPath};
use crate::error::{Error, Result};
use crate::io_model::{model_preset, predict_step_latency, step_io_with_width, CostModel};
use crate::kv_cache::KvCache;
use crate::tensor_core::{IoLedger, Operand, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

/// Spot checks run only when one layer's naive KV traffic is at most this
/// many elements.
const SPOT_CHECK_LIMIT: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoSweep {
    pub preset: String,
    pub b: Vec<usize>,
    pub m_c: Vec<usize>,
    pub m_d: Vec<usize>,
    pub elem_width_bytes: usize,
    pub cap: usize,
}

impl IoSweep {
    /// Batch sizes 1 to 32 at 2k and 8k context, one decoded token.
    pub fn table_one(preset: &str) -> Self {
        Self {
            preset: preset.to_string(),
            b: vec![1, 2, 4, 8, 16, 32],
            m_c: vec![2048, 8192],
            m_d: vec![1],
            elem_width_bytes: 2,
            cap: 10_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in [("b", &self.b), ("m_c", &self.m_c), ("m_d", &self.m_d)] {
            if axis.is_empty() {
                return Err(Error::Sweep(format!("axis {name} is empty")));
            }
        }
        if self.b.contains(&0) {
            return Err(Error::Sweep("axis b must be positive".into()));
        }
        let size = self.b.len() * self.m_c.len() * self.m_d.len();
        if size > self.cap {
            return Err(Error::Sweep(format!(
                "{size} rows exceed the cap of {}",
                self.cap
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IoRow {
    pub preset: String,
    pub b: usize,
    pub m_c: usize,
    pub m_d: usize,
    pub g: usize,
    pub h: usize,
    pub k: usize,
    pub layers: usize,
    /// KV elements read per step, all layers, keys plus values.
    pub naive_kv: u64,
    pub bifurcated_kv: u64,
    pub kv_ratio: f64,
    pub naive_ms: f64,
    pub bifurcated_ms: f64,
    pub latency_ratio: f64,
    /// `Some(true)` when an instrumented run reproduced both KV columns.
    pub verified: Option<bool>,
}

/// Runs one layer of instrumented attention for the row's shape and checks
/// the per-tensor KV reads against the formulas.
fn spot_check(cfg: &ModelConfig, b: usize, m_c: usize, m_d: usize) -> Result<bool> {
    let (g, k, p) = (cfg.groups, cfg.head_dim, cfg.group_size());
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut t = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        Tensor::<f32>::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let q = t(vec![b, g, p, 1, k])?;
    let parts = vec![(t(vec![1, g, m_c, k])?, t(vec![1, g, m_c, k])?)];
    let mut cache = KvCache::init_from_prefill(parts, b, m_d.max(1), &mut IoLedger::new())?;
    if m_d > 0 {
        let (kd, vd) = (t(vec![b, g, m_d, k])?, t(vec![b, g, m_d, k])?);
        cache.append_decode(0, &kd, &vd, &mut IoLedger::new())?;
    }
    let mut ok = true;
    for (path, bif) in [
        (AttentionPath::Naive, false),
        (AttentionPath::Bifurcated, true),
    ] {
        let mut l = IoLedger::new();
        attend_cached(&q, &cache, 0, CausalSpec::Unmasked, path, cfg, &mut l)?;
        let expected = kv_read_elements(b, g, k, m_c, m_d, bif);
        ok &= l.reads_of(Operand::Key) == expected && l.reads_of(Operand::Value) == expected;
    }
    Ok(ok)
}

/// One row per `(b, m_c, m_d)` in axis order.
pub fn io_rows(sweep: &IoSweep, cm: &CostModel) -> Result<Vec<IoRow>> {
    sweep.validate()?;
    let cfg = model_preset(&sweep.preset)?;
    let w = sweep.elem_width_bytes;
    let mut rows = Vec::new();
    for &b in &sweep.b {
        for &m_c in &sweep.m_c {
            for &m_d in &sweep.m_d {
                if m_c + m_d == 0 {
                    return Err(Error::Sweep("m_c + m_d must be positive".into()));
                }
                let naive = step_io_with_width(&cfg, b, m_c, m_d, 1, false, w)?;
                let bif = step_io_with_width(&cfg, b, m_c, m_d, 1, true, w)?;
                let naive_s = predict_step_latency(&naive, cm, w);
                let bif_s = predict_step_latency(&bif, cm, w);
                let per_layer = kv_read_elements(b, cfg.groups, cfg.head_dim, m_c, m_d, false);
                let verified = if per_layer <= SPOT_CHECK_LIMIT {
                    Some(spot_check(&cfg, b, m_c, m_d)?)
                } else {
                    None
                };
                rows.push(IoRow {
                    preset: sweep.preset.clone(),
                    b,
                    m_c,
                    m_d,
                    g: cfg.groups,
                    h: cfg.heads,
                    k: cfg.head_dim,
                    layers: cfg.layers,
                    naive_kv: naive.kv_elements,
                    bifurcated_kv: bif.kv_elements,
                    kv_ratio: naive.kv_elements as f64 / bif.kv_elements as f64,
                    naive_ms: naive_s * 1e3,
                    bifurcated_ms: bif_s * 1e3,
                    latency_ratio: naive_s / bif_s,
                    verified,
                });
            }
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[IoRow]) -> String {
    let mut out = format!(
        "# schema {SCHEMA_VERSION}\npreset,b,m_c,m_d,g,h,k,layers,naive_kv,bifurcated_kv,kv_ratio,naive_ms,bifurcated_ms,latency_ratio,verified\n"
    );
    for r in rows {
        let verified = match r.verified {
            Some(true) => "yes",
            Some(false) => "NO",
            None => "skipped",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.preset,
            r.b,
            r.m_c,
            r.m_d,
            r.g,
            r.h,
            r.k,
            r.layers,
            r.naive_kv,
            r.bifurcated_kv,
            r.kv_ratio,
            r.naive_ms,
            r.bifurcated_ms,
            r.latency_ratio,
            verified
        ));
    }
    out
}

#[derive(Serialize)]
struct RowsDoc<'a> {
    schema: u32,
    rows: &'a [IoRow],
}

pub fn rows_to_json(rows: &[IoRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&RowsDoc {
        schema: SCHEMA_VERSION,
        rows,
    })?)
}
