//! Causal tracing: corrupt the subject span with Gaussian embedding noise,
//! restore clean states one layer at a time, and read off the interference
//! set and the best single restoration site.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{forward_traced, EmbedNoise, HookSet, ModelWeights};
use crate::numerics::softmax;

/// Per-layer restoration effects for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalTraceReport {
    /// Average indirect effect per layer:
    /// `mean_s P_restored(t*) - mean_s P_corrupted(t*)`.
    pub aie: Vec<f64>,
    pub p_clean: f64,
    pub p_corr: f64,
    pub sigma: f64,
    /// Layer whose restoration recovers the target best (argmax of `aie`,
    /// ties to the lower layer).
    pub l_rome: usize,
    /// Interference set: layers with strictly negative AIE.
    pub l_star: Vec<usize>,
    /// Noise seeds that were averaged over.
    pub seeds: Vec<u64>,
}

/// Scale used when the caller does not pin one: three times the empirical
/// standard deviation of the embedding entries.
pub fn default_sigma(weights: &ModelWeights) -> f64 {
    let data = weights.w_embed.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    3.0 * var.sqrt()
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Run the full corruption/restoration sweep.
///
/// For each noise seed the subject-span embeddings are perturbed with
/// `N(0, sigma^2 I)`; per layer, the clean states at every span position
/// are written back simultaneously and the recovered target probability is
/// averaged across seeds. Deterministic given `base_seed`.
pub fn causal_trace(
    weights: &ModelWeights,
    prompt: &[usize],
    subject_span: Range<usize>,
    t_star: usize,
    sigma: f64,
    n_noise_samples: usize,
    base_seed: u64,
) -> Result<CausalTraceReport> {
    if subject_span.is_empty() {
        return Err(CoreError::EmptySpan);
    }
    if subject_span.end > prompt.len() {
        return Err(CoreError::PositionOutOfRange {
            position: subject_span.end - 1,
            len: prompt.len(),
        });
    }
    if t_star >= weights.config.vocab {
        return Err(CoreError::TokenOutOfRange {
            token: t_star,
            vocab: weights.config.vocab,
        });
    }
    if n_noise_samples == 0 {
        return Err(CoreError::InvalidArgument {
            reason: "n_noise_samples must be >= 1".into(),
        });
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(CoreError::InvalidArgument {
            reason: "sigma must be finite and >= 0".into(),
        });
    }

    let layers = weights.config.layers;
    let d = weights.config.hidden;

    // Clean baseline, storing the states to restore.
    let (clean_logits, clean_trace) = forward_traced(weights, prompt, &HookSet::none())?;
    let p_clean = softmax(&clean_logits)?.get(t_star);

    let seeds: Vec<u64> = (0..n_noise_samples as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let mut p_corr_sum = 0.0;
    let mut p_restored_sum = vec![0.0; layers];

    for &seed in &seeds {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let vectors: Vec<Vec<f64>> = subject_span
            .clone()
            .map(|_| (0..d).map(|_| sigma * gaussian(&mut rng)).collect())
            .collect();
        let noise = EmbedNoise {
            start: subject_span.start,
            vectors,
        };

        let mut corrupted = HookSet::none();
        corrupted.embed_noise = Some(noise.clone());
        let (corr_logits, _) = forward_traced(weights, prompt, &corrupted)?;
        p_corr_sum += softmax(&corr_logits)?.get(t_star);

        for layer in 0..layers {
            let mut hooks = HookSet::none();
            hooks.embed_noise = Some(noise.clone());
            for pos in subject_span.clone() {
                hooks
                    .restore_overrides
                    .insert((layer, pos), clean_trace.stream(layer + 1, pos)?.to_vec());
            }
            let (restored_logits, _) = forward_traced(weights, prompt, &hooks)?;
            p_restored_sum[layer] += softmax(&restored_logits)?.get(t_star);
        }
    }

    let n = n_noise_samples as f64;
    let p_corr = p_corr_sum / n;
    let aie: Vec<f64> = p_restored_sum.iter().map(|&s| s / n - p_corr).collect();
    let l_rome = crate::numerics::argmax(&aie);
    let l_star: Vec<usize> = aie
        .iter()
        .enumerate()
        .filter(|(_, &v)| v < 0.0)
        .map(|(l, _)| l)
        .collect();

    Ok(CausalTraceReport {
        aie,
        p_clean,
        p_corr,
        sigma,
        l_rome,
        l_star,
        seeds,
    })
}

/// Fraction of oracle-identified interference layers that the suppressive
/// set covers; 1 when the oracle set is empty.
pub fn localization_recall(l_supp: &[usize], l_star: &[usize]) -> f64 {
    if l_star.is_empty() {
        return 1.0;
    }
    let hits = l_star.iter().filter(|l| l_supp.contains(l)).count();
    hits as f64 / l_star.len() as f64
}
