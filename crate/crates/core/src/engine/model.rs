//! A small pre-norm decoder-only transformer over a byte vocabulary.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{project_out, project_qkv, AttentionParams, ModelConfig, QkvProjection};
use crate::error::{Error, Result};
use crate::tensor_core::{Access, IoLedger, Operand, Scalar, Tensor};

/// Begin-of-sequence token, one past the byte range.
pub const BOS: u32 = 256;

/// Byte-level tokenization: every byte is its own token.
pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`encode_bytes`]; the begin token and out-of-range ids are dropped.
pub fn decode_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BFCK";
const CHECKPOINT_VERSION: u32 = 1;
const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// `[d, fanout·d]`
    pub mlp_up: Tensor<T>,
    /// `[fanout·d, d]`
    pub mlp_down: Tensor<T>,
}

/// Learned absolute positions, GELU MLP, output head tied to the token
/// embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel<T> {
    pub cfg: ModelConfig,
    pub seed: u64,
    /// `[vocab, d]`
    pub tok_emb: Tensor<T>,
    /// `[max_positions, d]`
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: Tensor<T>,
    pub final_beta: Tensor<T>,
}

fn normal<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha20Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn filled<T: Scalar>(d: usize, v: f64) -> Tensor<T> {
    Tensor::new([d], vec![T::from_f64_lossy(v); d]).expect("shape matches")
}

impl<T: Scalar> ToyModel<T> {
    /// Deterministic initialization from `(cfg, seed)`: weights drawn from
    /// N(0, 0.02²), norm gains 1 and biases 0.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab <= BOS as usize {
            return Err(Error::Config(format!(
                "vocab {} cannot hold the begin token {BOS}",
                cfg.vocab
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let tok_emb = normal(vec![cfg.vocab, d], &mut rng);
        let pos_emb = normal(vec![cfg.max_positions, d], &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_gamma: filled(d, 1.0),
                ln1_beta: filled(d, 0.0),
                attn: AttentionParams::random(&cfg, INIT_STD, &mut rng),
                ln2_gamma: filled(d, 1.0),
                ln2_beta: filled(d, 0.0),
                mlp_up: normal(vec![d, cfg.fanout * d], &mut rng),
                mlp_down: normal(vec![cfg.fanout * d, d], &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            seed,
            tok_emb,
            pos_emb,
            layers,
            final_gamma: filled(d, 1.0),
            final_beta: filled(d, 0.0),
        })
    }

    /// Parameters in the projections and MLPs, the `N` of the `2N`
    /// FLOPs-per-token rule.
    pub fn non_embedding_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.attn.param_count() + l.mlp_up.len() + l.mlp_down.len())
            .sum()
    }

    pub fn total_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameter tensors in checkpoint order.
    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.ln1_gamma, &l.ln1_beta]);
            out.extend(l.attn.tensors());
            out.extend([&l.ln2_gamma, &l.ln2_beta, &l.mlp_up, &l.mlp_down]);
        }
        out.extend([&self.final_gamma, &self.final_beta]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([&mut l.ln1_gamma, &mut l.ln1_beta]);
            out.extend(l.attn.tensors_mut());
            out.extend([
                &mut l.ln2_gamma,
                &mut l.ln2_beta,
                &mut l.mlp_up,
                &mut l.mlp_down,
            ]);
        }
        out.extend([&mut self.final_gamma, &mut self.final_beta]);
        out
    }

    /// Token plus position embeddings for `tokens[b][n]` starting at
    /// absolute position `start`. Returns `[b, n, d]`.
    pub fn embed(&self, tokens: &[Vec<u32>], start: usize) -> Result<Tensor<T>> {
        let d = self.cfg.hidden;
        let b = tokens.len();
        let n = tokens.first().map_or(0, Vec::len);
        if start + n > self.cfg.max_positions {
            return Err(Error::ContextOverflow {
                len: start + n,
                max: self.cfg.max_positions,
            });
        }
        let mut data = Vec::with_capacity(b * n * d);
        for row in tokens {
            if row.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    axis: "n",
                    expected: n,
                    found: row.len(),
                });
            }
            for (i, &t) in row.iter().enumerate() {
                if t as usize >= self.cfg.vocab {
                    return Err(Error::TokenOutOfRange {
                        token: t,
                        vocab: self.cfg.vocab,
                    });
                }
                let e = &self.tok_emb.data()[t as usize * d..][..d];
                let p = &self.pos_emb.data()[(start + i) * d..][..d];
                data.extend(e.iter().zip(p).map(|(&a, &b)| a + b));
            }
        }
        Tensor::new([b, n, d], data)
    }

    /// One pre-norm block. `attend` receives the projections and returns
    /// merged head outputs `[b, n, d]`; it is where cache handling lives.
    pub fn block(
        &self,
        layer: usize,
        x: &Tensor<T>,
        ledger: &mut IoLedger,
        attend: impl FnOnce(QkvProjection<T>, &mut IoLedger) -> Result<Tensor<T>>,
    ) -> Result<Tensor<T>> {
        let lp = &self.layers[layer];
        let h = layer_norm(x, &lp.ln1_gamma, &lp.ln1_beta);
        let qkv = project_qkv(&h, &lp.attn, &self.cfg, ledger)?;
        let heads = attend(qkv, ledger)?;
        let y = project_out(&heads, &lp.attn, &self.cfg, ledger)?;
        let x = add(x, &y);
        let h = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let up = linear("mlp_up", &h, &lp.mlp_up, ledger);
        let act = up.map(gelu);
        let down = linear("mlp_down", &act, &lp.mlp_down, ledger);
        Ok(add(&x, &down))
    }

    /// Final norm and tied output head: `[b, n, d]` → `[b, n, vocab]`.
    pub fn head(&self, x: &Tensor<T>, ledger: &mut IoLedger) -> Tensor<T> {
        let h = layer_norm(x, &self.final_gamma, &self.final_beta);
        let (b, n, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let vocab = self.cfg.vocab;
        let emb = self.tok_emb.data();
        let mut out = vec![T::zero(); b * n * vocab];
        for (row, o) in out.chunks_exact_mut(vocab).enumerate() {
            let x_row = &h.data()[row * d..][..d];
            for (v, slot) in o.iter_mut().enumerate() {
                let e = &emb[v * d..][..d];
                let mut acc = T::zero();
                for (&a, &w) in x_row.iter().zip(e) {
                    acc = acc + a * w;
                }
                *slot = acc;
            }
        }
        let w = h.elem_width_bytes();
        ledger.record(
            "lm_head",
            &[
                Access::new(Operand::Activation, h.len(), w),
                Access::new(
                    Operand::Param,
                    self.tok_emb.len(),
                    self.tok_emb.elem_width_bytes(),
                ),
            ],
            &[Access::new(Operand::Activation, out.len(), w)],
            2 * (b * n * d * vocab) as u64,
        );
        Tensor::new([b, n, vocab], out).expect("head shape")
    }

    /// Writes a little-endian checkpoint: header, then every parameter
    /// tensor in declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let c = &self.cfg;
        for v in [
            c.hidden,
            c.heads,
            c.groups,
            c.head_dim,
            c.layers,
            c.fanout,
            c.vocab,
            c.max_positions,
            c.scale_qk as usize,
        ] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for t in self.tensors() {
            for &x in t.data() {
                x.write_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let header = 4 + 4 + 4 + 9 * 8 + 8;
        if buf.len() < header || &buf[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().expect("4 bytes"));
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().expect("8 bytes"));
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                u32_at(4)
            )));
        }
        let elem = u32_at(8) as usize;
        if elem != 4 && elem != 8 {
            return Err(Error::Format(format!("unsupported element width {elem}")));
        }
        let f: Vec<usize> = (0..9).map(|i| u64_at(12 + 8 * i) as usize).collect();
        let cfg = ModelConfig {
            hidden: f[0],
            heads: f[1],
            groups: f[2],
            head_dim: f[3],
            layers: f[4],
            fanout: f[5],
            vocab: f[6],
            max_positions: f[7],
            scale_qk: f[8] != 0,
        };
        let seed = u64_at(12 + 72);
        let mut model = Self::new(cfg, seed)?;
        let expected = header + model.total_params() * elem;
        if buf.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint has {} bytes, expected {expected}",
                buf.len()
            )));
        }
        let mut pos = header;
        for t in model.tensors_mut() {
            for x in t.data_mut() {
                let raw = &buf[pos..pos + elem];
                *x = if elem == 8 {
                    T::from_f64_lossy(f64::read_le(raw))
                } else {
                    T::from_f64_lossy(f32::read_le(raw) as f64)
                };
                pos += elem;
            }
        }
        Ok(model)
    }
}

/// `x[.., d] · w[d, e]`, charged to `label`.
fn linear<T: Scalar>(
    label: &str,
    x: &Tensor<T>,
    w: &Tensor<T>,
    ledger: &mut IoLedger,
) -> Tensor<T> {
    let (d, e) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / d;
    let mut out = vec![T::zero(); rows * e];
    let wd = w.data();
    for (r, o) in out.chunks_exact_mut(e).enumerate() {
        let x_row = &x.data()[r * d..][..d];
        for (j, slot) in o.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (i, &xv) in x_row.iter().enumerate() {
                acc = acc + xv * wd[i * e + j];
            }
            *slot = acc;
        }
    }
    let width = x.elem_width_bytes();
    ledger.record(
        label,
        &[
            Access::new(Operand::Activation, x.len(), width),
            Access::new(Operand::Param, w.len(), w.elem_width_bytes()),
        ],
        &[Access::new(Operand::Activation, out.len(), width)],
        2 * (rows * d * e) as u64,
    );
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = e;
    Tensor::new(shape, out).expect("linear shape")
}

fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Tensor<T> {
    let d = gamma.len();
    let eps = T::from_f64_lossy(LN_EPS);
    let dn = T::from_f64_lossy(d as f64);
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / dn;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64_lossy(0.5);
    let k = T::from_f64_lossy(0.044_715);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::new(16, 4, 2, 2)
            .unwrap()
            .with_max_positions(32)
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyModel::<f64>::new(small(), 7).unwrap();
        let b = ToyModel::<f64>::new(small(), 7).unwrap();
        let c = ToyModel::<f64>::new(small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tok_emb, c.tok_emb);
    }

    #[test]
    fn counted_params_match_config() {
        for (d, h, g, f) in [(16, 4, 2, 4), (8, 2, 1, 4), (24, 6, 6, 2)] {
            let cfg = ModelConfig::new(d, h, g, 3)
                .unwrap()
                .with_fanout(f)
                .unwrap();
            let m = ToyModel::<f32>::new(cfg, 1).unwrap();
            assert_eq!(m.non_embedding_params(), cfg.non_embedding_params());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::<f64>::new(small(), 3).unwrap();
        let mut bytes = Vec::new();
        m.write_checkpoint(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"BFCK");
        let back = ToyModel::<f64>::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        assert!(ToyModel::<f64>::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn embed_rejects_bad_input() {
        let m = ToyModel::<f64>::new(small(), 3).unwrap();
        assert!(matches!(
            m.embed(&[vec![300]], 0),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            m.embed(&[vec![1, 2]], 31),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = Tensor::<f64>::from_f64([1, 4], &[1., 2., 3., 4.]).unwrap();
        let y = layer_norm(&x, &filled(4, 1.0), &filled(4, 0.0));
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0f64) + 0.158_808).abs() < 1e-5);
    }
}
