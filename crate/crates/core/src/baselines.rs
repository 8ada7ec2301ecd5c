//! Output-distribution baselines over the same two-pass machinery:
//! greedy, CAD, AdaCAD, and COIECD.

use serde::{Deserialize, Serialize};

use crate::corect::ConflictPrompt;
use crate::error::{CoreError, Result};
use crate::model::{forward_traced, HookSet, IncrementalRun, ModelWeights};
use crate::numerics::{argmax, jensen_shannon, softmax, ProbDist};

/// Floor for `log P_null` in the contrastive formulas; the appendix-style
/// ratios divide by the null probability, which can underflow.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

/// Which baseline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Greedy,
    Cad,
    AdaCad,
    Coiecd,
}

/// Baseline decoding knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Context-amplification strength for CAD (and COIECD's fallback).
    pub cad_alpha: f64,
    /// Width of COIECD's cross-entropy acceptance band.
    pub coiecd_lambda: f64,
}

impl BaselineConfig {
    pub fn greedy() -> Self {
        Self {
            method: BaselineMethod::Greedy,
            cad_alpha: 0.0,
            coiecd_lambda: 0.0,
        }
    }

    pub fn cad(alpha: f64) -> Self {
        Self {
            method: BaselineMethod::Cad,
            cad_alpha: alpha,
            coiecd_lambda: 0.0,
        }
    }

    pub fn adacad() -> Self {
        Self {
            method: BaselineMethod::AdaCad,
            cad_alpha: 0.0,
            coiecd_lambda: 0.0,
        }
    }

    pub fn coiecd(lambda: f64, cad_alpha: f64) -> Self {
        Self {
            method: BaselineMethod::Coiecd,
            cad_alpha,
            coiecd_lambda: lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cad_alpha < 0.0 {
            return Err(CoreError::InvalidArgument {
                reason: "cad_alpha must be >= 0".into(),
            });
        }
        Ok(())
    }
}

fn floored_ln(p: f64) -> f64 {
    p.max(LOG_PROB_FLOOR).ln()
}

/// CAD step: renormalized `exp((1 + alpha) log P_ctx - alpha log P_null)`.
pub fn cad_step(p_ctx: &ProbDist, p_null: &ProbDist, alpha: f64) -> Result<ProbDist> {
    if p_ctx.len() != p_null.len() {
        return Err(CoreError::DimensionMismatch {
            context: "cad_step",
            expected: p_ctx.len(),
            got: p_null.len(),
        });
    }
    let logits: Vec<f64> = p_ctx
        .probs()
        .iter()
        .zip(p_null.probs())
        .map(|(&pc, &pn)| (1.0 + alpha) * floored_ln(pc) - alpha * floored_ln(pn))
        .collect();
    softmax(&logits)
}

/// AdaCAD step: the contrast strength adapts per instance. The conflict
/// degree is the Jensen-Shannon divergence between the two distributions,
/// normalized by `ln 2` and clamped to `[0, 1]`.
pub fn adacad_step(p_ctx: &ProbDist, p_null: &ProbDist) -> Result<(ProbDist, f64)> {
    let alpha_t = (jensen_shannon(p_ctx, p_null)? / 2.0_f64.ln()).clamp(0.0, 1.0);
    let logits: Vec<f64> = p_ctx
        .probs()
        .iter()
        .zip(p_null.probs())
        .map(|(&pc, &pn)| {
            let lc = floored_ln(pc);
            let ln = floored_ln(pn);
            lc + alpha_t * (lc - ln)
        })
        .collect();
    Ok((softmax(&logits)?, alpha_t))
}

/// COIECD step: the cross-entropy `H(P_ctx, P_null)` is compared against the
/// self-entropy band `(1 + lambda) H(P_ctx, P_ctx)`. Crossing the band flags
/// the step as conflicting and applies the CAD contrast; otherwise the
/// contextual distribution passes through unchanged.
///
/// The published description stops at the cross-entropy diagnostic; the band
/// rule here is this crate's stand-in and is labeled as such in reports.
pub fn coiecd_step(
    p_ctx: &ProbDist,
    p_null: &ProbDist,
    lambda: f64,
    cad_alpha: f64,
) -> Result<(ProbDist, bool)> {
    if p_ctx.len() != p_null.len() {
        return Err(CoreError::DimensionMismatch {
            context: "coiecd_step",
            expected: p_ctx.len(),
            got: p_null.len(),
        });
    }
    let cross: f64 = p_ctx
        .probs()
        .iter()
        .zip(p_null.probs())
        .map(|(&pc, &pn)| if pc > 0.0 { -pc * floored_ln(pn) } else { 0.0 })
        .sum();
    let self_entropy: f64 = p_ctx
        .probs()
        .iter()
        .map(|&pc| if pc > 0.0 { -pc * floored_ln(pc) } else { 0.0 })
        .sum();
    let conflicting = cross > (1.0 + lambda) * self_entropy;
    let dist = if conflicting {
        cad_step(p_ctx, p_null, cad_alpha)?
    } else {
        p_ctx.clone()
    };
    Ok((dist, conflicting))
}

/// Per-step diagnostics shared by every baseline decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStep {
    pub step: usize,
    /// AdaCAD's instance-wise contrast strength, when applicable.
    pub adaptive_alpha: Option<f64>,
    /// COIECD's conflict flag, when applicable.
    pub flagged_conflicting: Option<bool>,
    pub emitted_id: usize,
}

/// Output of a baseline decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDecode {
    pub tokens: Vec<usize>,
    pub steps: Vec<BaselineStep>,
}

/// Greedy decoding on the contextual prompt.
pub fn decode_greedy(weights: &ModelWeights, prompt: &ConflictPrompt, max_new: usize) -> Result<BaselineDecode> {
    decode_baseline(weights, prompt, &BaselineConfig::greedy(), max_new)
}

/// Run any baseline for `max_new` greedy steps.
pub fn decode_baseline(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    cfg: &BaselineConfig,
    max_new: usize,
) -> Result<BaselineDecode> {
    decode_baseline_with(weights, prompt, cfg, max_new, false)
}

/// Like [`decode_baseline`], optionally reusing key/value caches across
/// steps. The cached path matches the cache-free path bit for bit.
pub fn decode_baseline_with(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    cfg: &BaselineConfig,
    max_new: usize,
    kv_cache: bool,
) -> Result<BaselineDecode> {
    if max_new < 1 {
        return Err(CoreError::InvalidArgument {
            reason: "max_new must be >= 1".into(),
        });
    }
    cfg.validate()?;

    let needs_null = cfg.method != BaselineMethod::Greedy;
    let mut tokens = Vec::with_capacity(max_new);
    let mut steps = Vec::with_capacity(max_new);

    if kv_cache {
        let mut ctx_run = IncrementalRun::new(weights);
        ctx_run.commit_all(&prompt.ctx_tokens)?;
        let mut null_run = IncrementalRun::new(weights);
        if needs_null {
            null_run.commit_all(&prompt.null_tokens)?;
        }
        for step in 0..max_new {
            let z_ctx = ctx_run.last().expect("committed").logits.clone();
            let z_null = needs_null.then(|| null_run.last().expect("committed").logits.clone());
            let record = baseline_step(cfg, step, &z_ctx, z_null.as_deref())?;
            tokens.push(record.emitted_id);
            ctx_run.commit(record.emitted_id)?;
            if needs_null {
                null_run.commit(record.emitted_id)?;
            }
            steps.push(record);
        }
    } else {
        let mut ctx = prompt.ctx_tokens.clone();
        let mut null = prompt.null_tokens.clone();
        for step in 0..max_new {
            let (z_ctx, _) = forward_traced(weights, &ctx, &HookSet::none())?;
            let z_null = if needs_null {
                Some(forward_traced(weights, &null, &HookSet::none())?.0)
            } else {
                None
            };
            let record = baseline_step(cfg, step, &z_ctx, z_null.as_deref())?;
            tokens.push(record.emitted_id);
            ctx.push(record.emitted_id);
            null.push(record.emitted_id);
            steps.push(record);
        }
    }
    Ok(BaselineDecode { tokens, steps })
}

fn baseline_step(
    cfg: &BaselineConfig,
    step: usize,
    z_ctx: &[f64],
    z_null: Option<&[f64]>,
) -> Result<BaselineStep> {
    let (emitted, adaptive_alpha, flagged) = match cfg.method {
        BaselineMethod::Greedy => (argmax(z_ctx), None, None),
        BaselineMethod::Cad => {
            let p_ctx = softmax(z_ctx)?;
            let p_null = softmax(z_null.expect("null pass required"))?;
            let dist = cad_step(&p_ctx, &p_null, cfg.cad_alpha)?;
            (dist.argmax(), None, None)
        }
        BaselineMethod::AdaCad => {
            let p_ctx = softmax(z_ctx)?;
            let p_null = softmax(z_null.expect("null pass required"))?;
            let (dist, alpha_t) = adacad_step(&p_ctx, &p_null)?;
            (dist.argmax(), Some(alpha_t), None)
        }
        BaselineMethod::Coiecd => {
            let p_ctx = softmax(z_ctx)?;
            let p_null = softmax(z_null.expect("null pass required"))?;
            let (dist, conflicting) = coiecd_step(&p_ctx, &p_null, cfg.coiecd_lambda, cfg.cad_alpha)?;
            (dist.argmax(), None, Some(conflicting))
        }
    };
    Ok(BaselineStep {
        step,
        adaptive_alpha,
        flagged_conflicting: flagged,
        emitted_id: emitted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: Vec<f64>) -> ProbDist {
        ProbDist::normalize(v).unwrap()
    }

    #[test]
    fn cad_alpha_zero_is_identity() {
        let p = dist(vec![0.5, 0.3, 0.2]);
        let q = dist(vec![0.1, 0.1, 0.8]);
        let out = cad_step(&p, &q, 0.0).unwrap();
        for i in 0..3 {
            assert!((out.get(i) - p.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn cad_equal_passes_is_identity_for_any_alpha() {
        let p = dist(vec![0.5, 0.3, 0.2]);
        for alpha in [0.0, 0.5, 1.0, 3.0] {
            let out = cad_step(&p, &p, alpha).unwrap();
            for i in 0..3 {
                assert!((out.get(i) - p.get(i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cad_matches_hand_computation() {
        // alpha = 1 on a 3-token toy: weights exp(2 ln p - ln q) = p^2 / q.
        let p = dist(vec![0.5, 0.3, 0.2]);
        let q = dist(vec![0.25, 0.5, 0.25]);
        let out = cad_step(&p, &q, 1.0).unwrap();
        let raw = [
            0.5 * 0.5 / 0.25,
            0.3 * 0.3 / 0.5,
            0.2 * 0.2 / 0.25,
        ];
        let z: f64 = raw.iter().sum();
        for i in 0..3 {
            assert!((out.get(i) - raw[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn adacad_agreement_gives_ctx_back() {
        let p = dist(vec![0.6, 0.25, 0.15]);
        let (out, alpha_t) = adacad_step(&p, &p).unwrap();
        assert_eq!(alpha_t, 0.0);
        for i in 0..3 {
            assert!((out.get(i) - p.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn adacad_disjoint_support_maximal_contrast() {
        let p = dist(vec![1.0, 0.0]);
        let q = dist(vec![0.0, 1.0]);
        let (_, alpha_t) = adacad_step(&p, &q).unwrap();
        assert!((alpha_t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adacad_matches_hand_computation() {
        let p = dist(vec![0.5, 0.3, 0.2]);
        let q = dist(vec![0.2, 0.5, 0.3]);
        let alpha_t = (jensen_shannon(&p, &q).unwrap() / 2.0_f64.ln()).clamp(0.0, 1.0);
        let (out, reported) = adacad_step(&p, &q).unwrap();
        assert_eq!(alpha_t, reported);
        let raw: Vec<f64> = (0..3)
            .map(|i| {
                let lc = p.get(i).ln();
                let ln = q.get(i).ln();
                (lc + alpha_t * (lc - ln)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for i in 0..3 {
            assert!((out.get(i) - raw[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn coiecd_no_conflict_when_passes_agree() {
        let p = dist(vec![0.5, 0.3, 0.2]);
        let (out, flagged) = coiecd_step(&p, &p, 0.25, 1.0).unwrap();
        assert!(!flagged);
        assert_eq!(out, p);
    }

    #[test]
    fn coiecd_flags_decisive_null_disagreement() {
        // Null pass nearly deterministic on a token the ctx pass avoids:
        // the cross-entropy blows past the self-entropy band.
        let p = dist(vec![0.05, 0.9, 0.05]);
        let q = dist(vec![0.999, 0.0005, 0.0005]);
        let (_, flagged) = coiecd_step(&p, &q, 0.25, 1.0).unwrap();
        assert!(flagged);
    }

    #[test]
    fn coiecd_huge_band_never_flags() {
        let p = dist(vec![0.05, 0.9, 0.05]);
        let q = dist(vec![0.999, 0.0005, 0.0005]);
        let (out, flagged) = coiecd_step(&p, &q, 1e9, 1.0).unwrap();
        assert!(!flagged);
        assert_eq!(out, p);
    }

    proptest! {
        #[test]
        fn all_step_outputs_are_valid_distributions(
            a in proptest::collection::vec(1e-9..1.0f64, 6),
            b in proptest::collection::vec(1e-9..1.0f64, 6),
            alpha in 0.0..3.0f64,
        ) {
            let p = dist(a);
            let q = dist(b);
            for out in [
                cad_step(&p, &q, alpha).unwrap(),
                adacad_step(&p, &q).unwrap().0,
                coiecd_step(&p, &q, 0.25, alpha).unwrap().0,
            ] {
                prop_assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn cad_shift_invariant_in_logits(
            z1 in proptest::collection::vec(-5.0..5.0f64, 5),
            z2 in proptest::collection::vec(-5.0..5.0f64, 5),
            c1 in -50.0..50.0f64,
            c2 in -50.0..50.0f64,
        ) {
            let p = softmax(&z1).unwrap();
            let q = softmax(&z2).unwrap();
            let z1s: Vec<f64> = z1.iter().map(|v| v + c1).collect();
            let z2s: Vec<f64> = z2.iter().map(|v| v + c2).collect();
            let ps = softmax(&z1s).unwrap();
            let qs = softmax(&z2s).unwrap();
            let a = cad_step(&p, &q, 1.0).unwrap();
            let b = cad_step(&ps, &qs, 1.0).unwrap();
            for i in 0..5 {
                prop_assert!((a.get(i) - b.get(i)).abs() < 1e-9);
            }
        }

        #[test]
        fn adacad_alpha_in_unit_interval(
            a in proptest::collection::vec(1e-9..1.0f64, 6),
            b in proptest::collection::vec(1e-9..1.0f64, 6),
        ) {
            let (_, alpha_t) = adacad_step(&dist(a), &dist(b)).unwrap();
            prop_assert!((0.0..=1.0).contains(&alpha_t));
        }
    }
}
