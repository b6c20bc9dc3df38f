//! Single-context batch sampling: one batch-1 prefill, then `b` sequences
//! decoded against the shared context cache.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::attention::{attend_naive, CausalSpec};
use crate::bifurcated::{attend_cached, select_path, AttentionPath, AttentionPathPolicy};
use crate::engine::model::{ToyModel, BOS};
use crate::engine::sampling::{sample_token, SamplingConfig};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor_core::{IoLedger, Operand, Scalar, Tensor};

/// Shared context produced by prefill.
#[derive(Clone, Debug)]
pub struct PrefillOutput<T> {
    /// Per-layer keys and values `[1, g, m_c, k]`.
    pub parts: Vec<(Tensor<T>, Tensor<T>)>,
    /// Vocabulary logits at the last context position.
    pub last_logits: Vec<f64>,
    /// `m_c`, including the begin token.
    pub context_len: usize,
}

/// Runs the begin token followed by `context` through the model in one
/// causal batch-1 pass. Only the last position goes through the output head.
pub fn prefill<T: Scalar>(
    model: &ToyModel<T>,
    context: &[u32],
    ledger: &mut IoLedger,
) -> Result<PrefillOutput<T>> {
    let cfg = &model.cfg;
    let mut tokens = Vec::with_capacity(context.len() + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(context);
    if tokens.len() > cfg.max_positions {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            max: cfg.max_positions,
        });
    }
    let m_c = tokens.len();
    let mut x = model.embed(&[tokens], 0)?;
    let mut parts = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        x = model.block(layer, &x, ledger, |qkv, l| {
            let out = attend_naive(
                &qkv.q,
                &qkv.k_new,
                &qkv.v_new,
                CausalSpec::Causal { offset: 0 },
                cfg,
                l,
            )?;
            parts.push((qkv.k_new, qkv.v_new));
            Ok(out)
        })?;
    }
    let d = cfg.hidden;
    let last = Tensor::new([1, 1, d], x.data()[(m_c - 1) * d..].to_vec())?;
    let logits = model.head(&last, ledger);
    Ok(PrefillOutput {
        parts,
        last_logits: logits.to_f64_vec(),
        context_len: m_c,
    })
}

/// What one forward step over the cache did.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Tokens fed per sequence.
    pub n: usize,
    pub path: AttentionPath,
    pub m_c: usize,
    /// Decode positions attended, including the ones fed this step.
    pub m_d: usize,
    pub kv_reads: u64,
    pub param_reads: u64,
    pub elements_read: u64,
    pub elements_written: u64,
    pub flops: u64,
}

/// Decoding state for `b` sequences sharing one context.
pub struct DecodeSession<'m, T> {
    model: &'m ToyModel<T>,
    cache: KvCache<T>,
    sampling: SamplingConfig,
    policy: AttentionPathPolicy,
    rngs: Vec<ChaCha20Rng>,
    tokens: Vec<Vec<u32>>,
    logprobs: Vec<Vec<f64>>,
    steps: Vec<StepRecord>,
    ledger: IoLedger,
    pool: ThreadPool,
}

/// Counter-based stream for one batch index: same seed, distinct stream id.
pub fn batch_rng(seed: u64, batch_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(batch_index as u64);
    rng
}

impl<'m, T: Scalar> DecodeSession<'m, T> {
    /// Builds the two-part cache for `batch` sequences and samples each
    /// sequence's first token from the prefill logits. Room is reserved
    /// for `capacity` decode positions.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'m ToyModel<T>,
        prefill: &PrefillOutput<T>,
        batch: usize,
        capacity: usize,
        sampling: SamplingConfig,
        policy: AttentionPathPolicy,
        seed: u64,
        workers: usize,
    ) -> Result<Self> {
        sampling.validate()?;
        let mut ledger = IoLedger::new();
        let cache =
            KvCache::init_from_prefill(prefill.parts.clone(), batch, capacity, &mut ledger)?;
        let pool = ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut rngs: Vec<_> = (0..batch).map(|i| batch_rng(seed, i)).collect();
        let mut tokens = Vec::with_capacity(batch);
        let mut logprobs = Vec::with_capacity(batch);
        for rng in &mut rngs {
            let (t, lp) = sample_token(&prefill.last_logits, &sampling, rng)?;
            tokens.push(vec![t]);
            logprobs.push(vec![lp]);
        }
        Ok(Self {
            model,
            cache,
            sampling,
            policy,
            rngs,
            tokens,
            logprobs,
            steps: Vec::new(),
            ledger,
            pool,
        })
    }

    pub fn batch(&self) -> usize {
        self.cache.batch()
    }

    pub fn cache(&self) -> &KvCache<T> {
        &self.cache
    }

    pub fn tokens(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn logprobs(&self) -> &[Vec<f64>] {
        &self.logprobs
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    pub fn ledger(&self) -> &IoLedger {
        &self.ledger
    }

    /// Feeds `tokens[b][n]` at the next `n` positions of every sequence,
    /// appends their keys and values, and returns logits `[b, n, vocab]`.
    /// Queries see the whole context, the earlier decode positions, and
    /// the fed tokens up to their own position.
    pub fn forward(&mut self, tokens: &[Vec<u32>]) -> Result<Tensor<T>> {
        let b = self.cache.batch();
        if tokens.len() != b {
            return Err(Error::BatchMismatch {
                expected: b,
                found: tokens.len(),
            });
        }
        let n = tokens[0].len();
        if n == 0 {
            return Err(Error::Config(
                "forward needs at least one token per sequence".into(),
            ));
        }
        let m_c = self.cache.context_len();
        let m_d = self.cache.decoded_len();
        if self.cache.remaining() < n {
            return Err(Error::CapacityExhausted {
                used: m_d,
                capacity: self.cache.capacity(),
                requested: n,
            });
        }
        let path = select_path(&self.policy, b, m_c, m_d + n);
        let mask = CausalSpec::Causal { offset: m_c + m_d };
        let before = self.ledger.clone();
        let model = self.model;
        let cfg = &model.cfg;
        let (cache, ledger) = (&mut self.cache, &mut self.ledger);
        let logits = self.pool.install(|| -> Result<Tensor<T>> {
            let mut x = model.embed(tokens, m_c + m_d)?;
            for layer in 0..cfg.layers {
                x = model.block(layer, &x, ledger, |qkv, l| {
                    cache.append_decode(layer, &qkv.k_new, &qkv.v_new, l)?;
                    attend_cached(&qkv.q, cache, layer, mask, path, cfg, l)
                })?;
            }
            Ok(model.head(&x, ledger))
        })?;
        let delta = self.ledger.since(&before);
        self.steps.push(StepRecord {
            step: self.steps.len() + 1,
            n,
            path,
            m_c,
            m_d: m_d + n,
            kv_reads: delta.kv_reads(),
            param_reads: delta.reads_of(Operand::Param),
            elements_read: delta.elements_read,
            elements_written: delta.elements_written,
            flops: delta.flops,
        });
        Ok(logits)
    }

    /// Feeds each sequence's latest token and samples the next one.
    pub fn decode_step(&mut self) -> Result<Vec<u32>> {
        let last: Vec<Vec<u32>> = self
            .tokens
            .iter()
            .map(|t| vec![*t.last().expect("sequences start non-empty")])
            .collect();
        let logits = self.forward(&last)?;
        let vocab = self.model.cfg.vocab;
        let all = logits.to_f64_vec();
        let mut sampled = Vec::with_capacity(last.len());
        for (bi, rng) in self.rngs.iter_mut().enumerate() {
            let (t, lp) = sample_token(&all[bi * vocab..][..vocab], &self.sampling, rng)?;
            self.tokens[bi].push(t);
            self.logprobs[bi].push(lp);
            sampled.push(t);
        }
        Ok(sampled)
    }

    /// Verification pass over `n_g` draft tokens per sequence in one step.
    /// Returns per-position logits `[b, n_g, vocab]`; nothing is sampled.
    pub fn decode_multi(&mut self, draft: &[Vec<u32>]) -> Result<Tensor<T>> {
        if let Some(row) = draft.iter().find(|r| r.len() != draft[0].len()) {
            return Err(Error::ShapeMismatch {
                op: "decode_multi",
                axis: "n_g",
                expected: draft[0].len(),
                found: row.len(),
            });
        }
        self.forward(draft)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub batch: usize,
    pub max_new: usize,
    pub sampling: SamplingConfig,
    pub policy: AttentionPathPolicy,
    pub seed: u64,
    /// Threads for the decode kernels. Results do not depend on it, so it
    /// is left out of transcripts.
    #[serde(skip_serializing, default = "one")]
    pub workers: usize,
}

fn one() -> usize {
    1
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            batch: 4,
            max_new: 16,
            sampling: SamplingConfig::default(),
            policy: AttentionPathPolicy::default(),
            seed: 0,
            workers: 1,
        }
    }
}

/// One distinct output sequence after deduplication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedSequence {
    pub tokens: Vec<u32>,
    pub mean_logprob: f64,
    pub multiplicity: usize,
    pub batch_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub cumulative_logprob: f64,
}

/// Everything a generation run produced. Serializes to the transcript.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub options: GenerateOptions,
    pub context_len: usize,
    pub sequences: Vec<SampledSequence>,
    pub ranked: Vec<RankedSequence>,
    pub prefill_io: IoLedger,
    pub steps: Vec<StepRecord>,
    pub ledger: IoLedger,
}

impl Generation {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Collapses identical sequences and orders them by mean log-probability,
/// highest first, then by token ids.
pub fn rank_sequences(sequences: &[SampledSequence]) -> Vec<RankedSequence> {
    let mut ranked: Vec<RankedSequence> = Vec::new();
    for (i, s) in sequences.iter().enumerate() {
        if let Some(r) = ranked.iter_mut().find(|r| r.tokens == s.tokens) {
            r.multiplicity += 1;
            r.batch_indices.push(i);
            continue;
        }
        let mean = if s.tokens.is_empty() {
            0.0
        } else {
            s.cumulative_logprob / s.tokens.len() as f64
        };
        ranked.push(RankedSequence {
            tokens: s.tokens.clone(),
            mean_logprob: mean,
            multiplicity: 1,
            batch_indices: vec![i],
        });
    }
    ranked.sort_by(|a, b| {
        b.mean_logprob
            .total_cmp(&a.mean_logprob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    ranked
}

/// Prefill once, decode `batch` sequences of `max_new` tokens, then
/// deduplicate and rank them.
pub fn generate<T: Scalar>(
    model: &ToyModel<T>,
    context: &[u32],
    opts: &GenerateOptions,
) -> Result<Generation> {
    if opts.max_new == 0 {
        return Err(Error::Config("max_new must be at least 1".into()));
    }
    let needed = context.len() + opts.max_new;
    if needed > model.cfg.max_positions {
        return Err(Error::ContextOverflow {
            len: needed,
            max: model.cfg.max_positions,
        });
    }
    let mut prefill_io = IoLedger::new();
    let pre = prefill(model, context, &mut prefill_io)?;
    let mut session = DecodeSession::new(
        model,
        &pre,
        opts.batch,
        opts.max_new - 1,
        opts.sampling,
        opts.policy,
        opts.seed,
        opts.workers,
    )?;
    for _ in 1..opts.max_new {
        session.decode_step()?;
    }
    let sequences: Vec<SampledSequence> = session
        .tokens()
        .iter()
        .zip(session.logprobs())
        .map(|(t, lp)| SampledSequence {
            tokens: t.clone(),
            logprobs: lp.clone(),
            cumulative_logprob: lp.iter().sum(),
        })
        .collect();
    let mut ledger = prefill_io.clone();
    ledger.merge(session.ledger());
    Ok(Generation {
        options: opts.clone(),
        context_len: pre.context_len,
        ranked: rank_sequences(&sequences),
        sequences,
        prefill_io,
        steps: session.steps().to_vec(),
        ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ModelConfig;
    use crate::engine::model::encode_bytes;

    fn model() -> ToyModel<f64> {
        let cfg = ModelConfig::new(16, 4, 2, 2)
            .unwrap()
            .with_max_positions(64);
        ToyModel::new(cfg, 11).unwrap()
    }

    #[test]
    fn rank_orders_and_dedups() {
        let s = |tokens: Vec<u32>, lps: Vec<f64>| SampledSequence {
            cumulative_logprob: lps.iter().sum(),
            tokens,
            logprobs: lps,
        };
        let ranked = rank_sequences(&[
            s(vec![5, 6], vec![-1.0, -1.0]),
            s(vec![1, 2], vec![-0.5, -0.5]),
            s(vec![5, 6], vec![-1.0, -1.0]),
            s(vec![0, 9], vec![-0.25, -0.75]),
        ]);
        assert_eq!(ranked.len(), 3);
        assert_eq!(ranked[0].tokens, vec![0, 9]);
        assert_eq!(ranked[1].tokens, vec![1, 2]);
        assert_eq!(ranked[2].multiplicity, 2);
        assert_eq!(ranked[2].batch_indices, vec![0, 2]);
    }

    #[test]
    fn greedy_batch_collapses() {
        let opts = GenerateOptions {
            batch: 3,
            max_new: 5,
            sampling: SamplingConfig::greedy(),
            ..GenerateOptions::default()
        };
        let g = generate(&model(), &encode_bytes(b"hello"), &opts).unwrap();
        assert_eq!(g.ranked.len(), 1);
        assert_eq!(g.ranked[0].multiplicity, 3);
        assert_eq!(g.sequences[0].tokens.len(), 5);
        assert_eq!(g.steps.len(), 4);
    }

    #[test]
    fn paths_agree_bitwise() {
        let run = |policy| {
            let opts = GenerateOptions {
                batch: 4,
                max_new: 6,
                policy,
                seed: 5,
                ..GenerateOptions::default()
            };
            generate(&model(), &encode_bytes(b"abc"), &opts).unwrap()
        };
        let naive = run(AttentionPathPolicy::naive());
        let bif = run(AttentionPathPolicy::bifurcated());
        assert_eq!(naive.sequences, bif.sequences);
        assert!(bif.ledger.kv_reads() < naive.ledger.kv_reads());
    }

    #[test]
    fn empty_prompt_uses_begin_token() {
        let mut l = IoLedger::new();
        let p = prefill(&model(), &[], &mut l).unwrap();
        assert_eq!(p.context_len, 1);
        assert_eq!(p.last_logits.len(), 257);
    }

    #[test]
    fn capacity_is_enforced() {
        let m = model();
        let p = prefill(&m, &encode_bytes(b"x"), &mut IoLedger::new()).unwrap();
        let mut s = DecodeSession::new(
            &m,
            &p,
            2,
            1,
            SamplingConfig::greedy(),
            AttentionPathPolicy::bifurcated(),
            0,
            1,
        )
        .unwrap();
        s.decode_step().unwrap();
        assert!(matches!(
            s.decode_step(),
            Err(Error::CapacityExhausted { .. })
        ));
    }
}
