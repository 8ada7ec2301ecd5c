//! Stage 1: trustworthy token selection.
//!
//! Contrasts logit-lens projections from a contextual and a null pass,
//! aggregates the per-layer boosts over the last `k` layers, and combines
//! the result with final-layer attention evidence to pick a step target.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ResidualTrace;
use crate::numerics::log_softmax;

/// How the null prompt is assembled from the contextual prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullStyle {
    /// Instruction and question kept, context document removed. Keeps the
    /// null pass query-specific so the contrast ranks answer candidates.
    WithQuestion,
    /// Only the tokens before the context span survive.
    InstructionOnly,
}

/// A contextual prompt, its null counterpart, and the span the retrieved
/// context occupies inside the contextual token stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictPrompt {
    pub ctx_tokens: Vec<usize>,
    pub null_tokens: Vec<usize>,
    pub context_span: Range<usize>,
}

impl ConflictPrompt {
    /// Build with the default null style (question kept).
    pub fn new(ctx_tokens: Vec<usize>, context_span: Range<usize>) -> Result<Self> {
        Self::with_null_style(ctx_tokens, context_span, NullStyle::WithQuestion)
    }

    pub fn with_null_style(
        ctx_tokens: Vec<usize>,
        context_span: Range<usize>,
        style: NullStyle,
    ) -> Result<Self> {
        if context_span.is_empty() {
            return Err(CoreError::InvalidArgument {
                reason: "context span is empty".into(),
            });
        }
        if context_span.end > ctx_tokens.len() {
            return Err(CoreError::PositionOutOfRange {
                position: context_span.end - 1,
                len: ctx_tokens.len(),
            });
        }
        let null_tokens = match style {
            NullStyle::WithQuestion => ctx_tokens
                .iter()
                .enumerate()
                .filter(|(i, _)| !context_span.contains(i))
                .map(|(_, &t)| t)
                .collect::<Vec<_>>(),
            NullStyle::InstructionOnly => ctx_tokens[..context_span.start].to_vec(),
        };
        if null_tokens.is_empty() {
            return Err(CoreError::InvalidArgument {
                reason: "null prompt would be empty".into(),
            });
        }
        Ok(Self {
            ctx_tokens,
            null_tokens,
            context_span,
        })
    }
}

/// Stage-1 knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// How many of the deepest layers to aggregate.
    pub k: usize,
    /// Candidate-set size.
    pub m: usize,
    /// Attention-evidence weight.
    pub lambda: f64,
    /// Normalization stabilizer.
    pub epsilon: f64,
}

impl SelectionConfig {
    /// Defaults for extractive tasks.
    pub fn extractive() -> Self {
        Self {
            k: 10,
            m: 10,
            lambda: 1.0,
            epsilon: 1e-6,
        }
    }

    /// Defaults for generative tasks.
    pub fn generative() -> Self {
        Self {
            k: 5,
            m: 10,
            lambda: 0.5,
            epsilon: 1e-6,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.k == 0 || self.k > layers {
            return Err(CoreError::InvalidArgument {
                reason: format!("k must be in 1..={layers}, got {}", self.k),
            });
        }
        if self.m == 0 {
            return Err(CoreError::InvalidArgument {
                reason: "candidate count m must be >= 1".into(),
            });
        }
        if self.lambda < 0.0 {
            return Err(CoreError::InvalidArgument {
                reason: "lambda must be >= 0".into(),
            });
        }
        if self.epsilon <= 0.0 {
            return Err(CoreError::InvalidArgument {
                reason: "epsilon must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// The chosen step target and its supporting scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    /// Top-M candidate token ids, ordered by descending information score.
    pub candidates: Vec<usize>,
    /// Normalized information score per candidate.
    pub s_info_total: Vec<f64>,
    /// Normalized attention evidence per candidate.
    pub s_attn: Vec<f64>,
    /// The selected target token.
    pub target: usize,
    /// Joint score of the target.
    pub joint_score: f64,
}

/// Per-token boost in log-likelihood provided by the context at one layer:
/// `log softmax(z_ctx) - log softmax(z_null)`, elementwise.
pub fn s_info_layer(z_ctx: &[f64], z_null: &[f64]) -> Result<Vec<f64>> {
    if z_ctx.len() != z_null.len() {
        return Err(CoreError::DimensionMismatch {
            context: "s_info_layer",
            expected: z_ctx.len(),
            got: z_null.len(),
        });
    }
    let lc = log_softmax(z_ctx)?;
    let ln = log_softmax(z_null)?;
    Ok(lc.iter().zip(&ln).map(|(a, b)| a - b).collect())
}

/// Mean of the last `k` score vectors followed by sign-preserving
/// max-normalization: `s(v) / (max |s| + eps)`.
pub fn aggregate_and_normalize(s_layers: &[Vec<f64>], k: usize, epsilon: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(CoreError::InvalidArgument {
            reason: "k must be >= 1".into(),
        });
    }
    if k > s_layers.len() {
        return Err(CoreError::InvalidArgument {
            reason: format!("k {} exceeds layer count {}", k, s_layers.len()),
        });
    }
    let tail = &s_layers[s_layers.len() - k..];
    let width = tail[0].len();
    let mut mean = vec![0.0; width];
    for layer in tail {
        if layer.len() != width {
            return Err(CoreError::DimensionMismatch {
                context: "aggregate_and_normalize",
                expected: width,
                got: layer.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(layer) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    Ok(max_normalize(&mean, epsilon))
}

/// Sign-preserving max-normalization.
pub fn max_normalize(scores: &[f64], epsilon: f64) -> Vec<f64> {
    let max_abs = scores.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    scores.iter().map(|&v| v / (max_abs + epsilon)).collect()
}

/// Attention mass the final layer directs from the current position toward
/// occurrences of `candidate` inside the context span, averaged over heads.
/// Zero when the candidate never appears in the context.
pub fn attention_evidence(
    trace: &ResidualTrace,
    candidate: usize,
    prompt: &ConflictPrompt,
) -> Result<f64> {
    let rows: Vec<&[f64]> = (0..trace.heads)
        .map(|h| trace.attn_row(trace.layers - 1, h, trace.current_position()))
        .collect::<Result<Vec<_>>>()?;
    Ok(attention_evidence_rows(&rows, candidate, prompt))
}

/// Same computation over raw final-layer attention rows (used by the
/// KV-cached decode path).
pub fn attention_evidence_rows(rows: &[&[f64]], candidate: usize, prompt: &ConflictPrompt) -> f64 {
    let positions: Vec<usize> = prompt
        .context_span
        .clone()
        .filter(|&j| prompt.ctx_tokens.get(j) == Some(&candidate))
        .collect();
    if positions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for row in rows {
        for &j in &positions {
            if j < row.len() {
                total += row[j];
            }
        }
    }
    total / rows.len() as f64
}

/// Pick the step target from normalized information scores plus attention
/// evidence. Ties (in the top-M cut and in the final argmax) go to the
/// lower token id.
pub fn select_target(
    scores: &[f64],
    trace: &ResidualTrace,
    prompt: &ConflictPrompt,
    cfg: &SelectionConfig,
) -> Result<TargetSelection> {
    let rows: Vec<&[f64]> = (0..trace.heads)
        .map(|h| trace.attn_row(trace.layers - 1, h, trace.current_position()))
        .collect::<Result<Vec<_>>>()?;
    select_target_rows(scores, &rows, prompt, cfg)
}

/// [`select_target`] over raw final-layer attention rows.
pub fn select_target_rows(
    scores: &[f64],
    final_attn_rows: &[&[f64]],
    prompt: &ConflictPrompt,
    cfg: &SelectionConfig,
) -> Result<TargetSelection> {
    if scores.is_empty() {
        return Err(CoreError::InvalidArgument {
            reason: "empty score vector".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let candidates: Vec<usize> = order.into_iter().take(cfg.m).collect();

    let s_info_total: Vec<f64> = candidates.iter().map(|&v| scores[v]).collect();
    let raw_attn: Vec<f64> = candidates
        .iter()
        .map(|&v| attention_evidence_rows(final_attn_rows, v, prompt))
        .collect();
    let s_attn = max_normalize(&raw_attn, cfg.epsilon);

    let mut target = candidates[0];
    let mut joint_score = f64::NEG_INFINITY;
    for (i, &v) in candidates.iter().enumerate() {
        let joint = s_info_total[i] + cfg.lambda * s_attn[i];
        if joint > joint_score || (joint == joint_score && v < target) {
            joint_score = joint;
            target = v;
        }
    }
    Ok(TargetSelection {
        candidates,
        s_info_total,
        s_attn,
        target,
        joint_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_null_styles() {
        let ctx = vec![0, 10, 11, 12, 1, 10, 2];
        let p = ConflictPrompt::new(ctx.clone(), 1..5).unwrap();
        assert_eq!(p.null_tokens, vec![0, 10, 2]);
        let p = ConflictPrompt::with_null_style(ctx, 1..5, NullStyle::InstructionOnly).unwrap();
        assert_eq!(p.null_tokens, vec![0]);
        assert!(ConflictPrompt::new(vec![0, 1], 1..1).is_err());
    }

    #[test]
    fn s_info_zero_when_passes_agree() {
        let z = vec![0.3, -1.0, 2.0];
        let s = s_info_layer(&z, &z).unwrap();
        assert!(s.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn s_info_invariant_to_uniform_shift() {
        let z = vec![0.5, 1.5, -0.25, 3.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 7.25).collect();
        let s = s_info_layer(&shifted, &z).unwrap();
        assert!(s.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn s_info_matches_independent_log_prob_route() {
        use crate::numerics::softmax;
        let z_ctx = vec![1.0, -2.0, 0.5, 0.0];
        let z_null = vec![-1.0, 3.0, 0.0, 0.25];
        let s = s_info_layer(&z_ctx, &z_null).unwrap();
        let pc = softmax(&z_ctx).unwrap();
        let pn = softmax(&z_null).unwrap();
        for i in 0..4 {
            let expected = pc.get(i).ln() - pn.get(i).ln();
            assert!((s[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        // {a: 2, b: -4} with negligible epsilon divides by 4.
        let out = aggregate_and_normalize(&[vec![2.0, -4.0]], 1, 1e-15).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] + 1.0).abs() < 1e-12);
        // All-zero scores survive the epsilon guard.
        let out = aggregate_and_normalize(&[vec![0.0; 3]], 1, 1e-9).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        // k = 1 uses only the last layer.
        let out = aggregate_and_normalize(&[vec![9.0, 9.0], vec![1.0, -2.0]], 1, 1e-15).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] + 1.0).abs() < 1e-12);
        assert!(aggregate_and_normalize(&[vec![1.0]], 0, 1e-9).is_err());
    }

    fn dummy_prompt() -> ConflictPrompt {
        ConflictPrompt::new(vec![0, 5, 6, 5, 1, 9], 1..4).unwrap()
    }

    #[test]
    fn attention_evidence_rows_additive_over_occurrences() {
        let prompt = dummy_prompt();
        // One head, row over 6 positions.
        let row: Vec<f64> = vec![0.05, 0.3, 0.2, 0.25, 0.1, 0.1];
        let rows = [row.as_slice()];
        // Token 5 occurs at context positions 1 and 3.
        let both = attention_evidence_rows(&rows, 5, &prompt);
        assert!((both - 0.55).abs() < 1e-12);
        // Token 6 occurs once at position 2.
        assert!((attention_evidence_rows(&rows, 6, &prompt) - 0.2).abs() < 1e-12);
        // Token 9 sits outside the context span.
        assert_eq!(attention_evidence_rows(&rows, 9, &prompt), 0.0);
        // Absent token.
        assert_eq!(attention_evidence_rows(&rows, 7, &prompt), 0.0);
    }

    #[test]
    fn select_target_degenerate_configs() {
        let prompt = dummy_prompt();
        let row: Vec<f64> = vec![0.0, 0.6, 0.1, 0.2, 0.05, 0.05];
        let rows = [row.as_slice()];
        let scores = vec![0.1, -0.2, 0.9, 0.3, 0.0, 0.8, 0.7, 0.2, 0.1, 0.0];

        // lambda = 0: pure information argmax.
        let cfg = SelectionConfig {
            k: 1,
            m: 4,
            lambda: 0.0,
            epsilon: 1e-9,
        };
        let sel = select_target_rows(&scores, &rows, &prompt, &cfg).unwrap();
        assert_eq!(sel.target, 2);

        // m = 1: the single candidate wins regardless of lambda.
        let cfg = SelectionConfig {
            k: 1,
            m: 1,
            lambda: 100.0,
            epsilon: 1e-9,
        };
        let sel = select_target_rows(&scores, &rows, &prompt, &cfg).unwrap();
        assert_eq!(sel.candidates, vec![2]);
        assert_eq!(sel.target, 2);
    }

    #[test]
    fn select_target_attention_breaks_info_near_ties() {
        let prompt = dummy_prompt();
        // All attention on position 1 (token 5).
        let row: Vec<f64> = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let rows = [row.as_slice()];
        // Token 6 slightly ahead on information, token 5 grounded in context.
        let mut scores = vec![0.0; 10];
        scores[6] = 0.62;
        scores[5] = 0.60;
        let cfg = SelectionConfig {
            k: 1,
            m: 2,
            lambda: 1.0,
            epsilon: 1e-9,
        };
        let sel = select_target_rows(&scores, &rows, &prompt, &cfg).unwrap();
        assert_eq!(sel.target, 5);
    }

    #[test]
    fn select_target_invariant_to_joint_positive_rescaling() {
        let prompt = dummy_prompt();
        let row: Vec<f64> = vec![0.1, 0.4, 0.3, 0.1, 0.05, 0.05];
        let rows = [row.as_slice()];
        let raw = vec![0.3, -0.1, 0.7, 0.25, 0.0, 0.55, 0.1, 0.0, 0.05, -0.3];
        let cfg = SelectionConfig {
            k: 1,
            m: 5,
            lambda: 0.7,
            epsilon: 1e-12,
        };
        let a = select_target_rows(&max_normalize(&raw, cfg.epsilon), &rows, &prompt, &cfg).unwrap();
        let scaled: Vec<f64> = raw.iter().map(|v| v * 37.5).collect();
        let b = select_target_rows(&max_normalize(&scaled, cfg.epsilon), &rows, &prompt, &cfg).unwrap();
        assert_eq!(a.target, b.target);
        assert_eq!(a.candidates, b.candidates);
    }
}
