//! Temperature and nucleus (top-p) sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Take the argmax instead of sampling; `temperature` and `top_p` are ignored.
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.95,
            greedy: false,
        }
    }
}

impl SamplingConfig {
    pub fn greedy() -> Self {
        Self {
            greedy: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.greedy {
            return Ok(());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Sampling(format!(
                "temperature {} must be positive (use greedy for the zero limit)",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Sampling(format!(
                "top_p {} not in (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Softmax of `logits / temperature` in double precision.
pub fn softmax_tempered(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() || logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let sum: f64 = p.iter().sum();
    for x in &mut p {
        *x /= sum;
    }
    Ok(p)
}

/// Token ids of the nucleus in descending probability order (ties by
/// lower id), with their renormalized probabilities. The nucleus is the
/// smallest prefix whose cumulative probability reaches `top_p`,
/// including the token that crosses it.
pub fn nucleus(probs: &[f64], top_p: f64) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        probs[b as usize]
            .total_cmp(&probs[a as usize])
            .then(a.cmp(&b))
    });
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for id in order {
        cum += probs[id as usize];
        kept.push(id);
        if cum >= top_p {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|&i| probs[i as usize]).sum();
    kept.into_iter()
        .map(|i| (i, probs[i as usize] / mass))
        .collect()
}

/// Draws one token and returns it with its log-probability.
///
/// Sampled tokens report the log of their renormalized nucleus
/// probability. Greedy picks the argmax (lowest id on ties) and reports
/// the log of its untempered softmax probability, so greedy sequences
/// still rank meaningfully.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<(u32, f64)> {
    cfg.validate()?;
    if cfg.greedy {
        let probs = softmax_tempered(logits, 1.0)?;
        let best =
            (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        return Ok((best as u32, probs[best].ln()));
    }
    let probs = softmax_tempered(logits, cfg.temperature)?;
    let kept = nucleus(&probs, cfg.top_p);
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, p) in &kept {
        cum += p;
        if u < cum {
            return Ok((id, p.ln()));
        }
    }
    // Rounding left the cumulative sum just under u.
    let &(id, p) = kept.last().expect("nucleus is never empty");
    Ok((id, p.ln()))
}
