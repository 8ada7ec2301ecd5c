//! Logit-lens projections, residual decomposition, rank trajectories, and
//! the flip taxonomy.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{ModelWeights, ResidualTrace};
use crate::numerics::{layer_norm, rank_of, LN_EPS};

/// How intermediate states are projected to the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// Apply the model's final layer norm before unembedding. This is the
    /// standard logit lens; at the last layer it reproduces the model's
    /// actual logits exactly.
    FinalLn,
    /// Divide by a single scale measured once from the final state, with no
    /// centering: `W_U (h / s)`. Linear in `h`, which makes the per-source
    /// decomposition an exact identity.
    FrozenLn,
}

/// Per-layer logit-lens projections at one position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LensProjection {
    pub mode: LensMode,
    /// One logit vector per layer output, `layers x vocab`.
    pub z_per_layer: Vec<Vec<f64>>,
}

/// Rank of a tracked token at every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankTrajectory {
    /// 1-based rank of the tracked token at each layer output.
    pub ranks: Vec<usize>,
    /// Rank in the model's actual final logits.
    pub final_rank: usize,
}

/// Outcome labels for the rank-evolution taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipLabel {
    /// Gold reached rank 1 mid-stack but lost it before the top decile.
    MiddleFlip,
    /// Gold still held rank 1 inside the top fraction of layers and was
    /// suppressed at the very end.
    LastLayerFlip,
    /// Gold never reached rank 1.
    NoFlip,
    /// Final prediction matches gold.
    Correct,
}

/// Classification of one example's rank trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipClassification {
    pub label: FlipLabel,
    /// First layer (0-based) where the tracked token held rank 1, if any.
    pub first_rank1_layer: Option<usize>,
}

/// Measure the frozen-lens scale from the final state: the same
/// `sqrt(var + eps)` the final layer norm would divide by.
pub fn frozen_scale(trace: &ResidualTrace) -> f64 {
    let h = trace
        .stream(trace.layers, trace.current_position())
        .expect("final state present");
    let d = h.len() as f64;
    let mean = h.iter().sum::<f64>() / d;
    let var = h.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (var + LN_EPS).sqrt()
}

/// Final-LN projection of an arbitrary residual state.
pub fn project_state(weights: &ModelWeights, state: &[f64]) -> Result<Vec<f64>> {
    let normed = layer_norm(state, &weights.ln_final.gain, &weights.ln_final.bias)?;
    Ok(weights.w_unembed.matvec(&normed))
}

/// Project the output of `layer` (0-based) at the current position onto the
/// vocabulary.
pub fn project(
    trace: &ResidualTrace,
    layer: usize,
    weights: &ModelWeights,
    mode: LensMode,
) -> Result<Vec<f64>> {
    if layer >= trace.layers {
        return Err(CoreError::LayerOutOfRange {
            layer,
            layers: trace.layers,
        });
    }
    let pos = trace.current_position();
    let h = trace.stream(layer + 1, pos)?;
    match mode {
        LensMode::FinalLn => {
            let normed = layer_norm(h, &weights.ln_final.gain, &weights.ln_final.bias)?;
            Ok(weights.w_unembed.matvec(&normed))
        }
        LensMode::FrozenLn => {
            let s = frozen_scale(trace);
            let scaled: Vec<f64> = h.iter().map(|&v| v / s).collect();
            Ok(weights.w_unembed.matvec(&scaled))
        }
    }
}

/// Project every layer output at the current position.
pub fn project_all(
    trace: &ResidualTrace,
    weights: &ModelWeights,
    mode: LensMode,
) -> Result<LensProjection> {
    let z_per_layer = (0..trace.layers)
        .map(|l| project(trace, l, weights, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(LensProjection { mode, z_per_layer })
}

/// Per-source logit contributions in frozen-lens coordinates.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// Contribution of the input embedding.
    pub embed: Vec<f64>,
    /// Contribution of each layer's attention output.
    pub attn: Vec<Vec<f64>>,
    /// Contribution of each layer's FFN output.
    pub ffn: Vec<Vec<f64>>,
}

impl Decomposition {
    /// Sum of all contributions.
    pub fn reconstruction(&self) -> Vec<f64> {
        let mut total = self.embed.clone();
        for a in &self.attn {
            for (t, v) in total.iter_mut().zip(a) {
                *t += v;
            }
        }
        for u in &self.ffn {
            for (t, v) in total.iter_mut().zip(u) {
                *t += v;
            }
        }
        total
    }
}

/// Split the frozen-lens logits into per-source contributions
/// (embedding, each attention block, each FFN block).
///
/// Only valid in frozen-lens mode, where the projection is linear and the
/// contributions sum to the full projection exactly.
pub fn decompose(trace: &ResidualTrace, weights: &ModelWeights, mode: LensMode) -> Result<Decomposition> {
    if mode != LensMode::FrozenLn {
        return Err(CoreError::InvalidArgument {
            reason: "decompose requires frozen-lens mode; the centered final layer norm is not linear".into(),
        });
    }
    let pos = trace.current_position();
    let s = frozen_scale(trace);
    let proj = |v: &[f64]| -> Vec<f64> {
        let scaled: Vec<f64> = v.iter().map(|&x| x / s).collect();
        weights.w_unembed.matvec(&scaled)
    };
    let embed = proj(trace.stream(0, pos)?);
    let mut attn = Vec::with_capacity(trace.layers);
    let mut ffn = Vec::with_capacity(trace.layers);
    for l in 0..trace.layers {
        attn.push(proj(trace.attn_out(l, pos)?));
        ffn.push(proj(trace.ffn_out(l, pos)?));
    }
    Ok(Decomposition { embed, attn, ffn })
}

/// Rank of `token` at every layer output, plus its rank in the actual
/// final logits.
pub fn rank_trajectory(
    trace: &ResidualTrace,
    token: usize,
    weights: &ModelWeights,
    mode: LensMode,
) -> Result<RankTrajectory> {
    if token >= weights.config.vocab {
        return Err(CoreError::TokenOutOfRange {
            token,
            vocab: weights.config.vocab,
        });
    }
    let mut ranks = Vec::with_capacity(trace.layers);
    for l in 0..trace.layers {
        let z = project(trace, l, weights, mode)?;
        ranks.push(rank_of(token, &z)?);
    }
    let final_rank = rank_of(token, trace.final_logits())?;
    Ok(RankTrajectory { ranks, final_rank })
}

/// Classify a rank trajectory against the flip taxonomy.
///
/// `boundary_fraction` splits middle from last-layer flips: if the last
/// layer where gold held rank 1 is at or past `ceil(boundary_fraction * L)`
/// (counting layers from 1), the flip happened in the top of the stack.
pub fn classify_flip(
    trajectory: &RankTrajectory,
    final_pred: usize,
    gold: usize,
    boundary_fraction: f64,
) -> Result<FlipClassification> {
    if !(0.0..1.0).contains(&boundary_fraction) || boundary_fraction == 0.0 {
        return Err(CoreError::InvalidArgument {
            reason: format!("boundary_fraction must be in (0, 1), got {boundary_fraction}"),
        });
    }
    let first_rank1_layer = trajectory.ranks.iter().position(|&r| r == 1);
    if final_pred == gold {
        return Ok(FlipClassification {
            label: FlipLabel::Correct,
            first_rank1_layer,
        });
    }
    let Some(_) = first_rank1_layer else {
        return Ok(FlipClassification {
            label: FlipLabel::NoFlip,
            first_rank1_layer: None,
        });
    };
    let last_rank1_layer = trajectory
        .ranks
        .iter()
        .rposition(|&r| r == 1)
        .expect("some layer had rank 1");
    let layers = trajectory.ranks.len();
    let boundary = (boundary_fraction * layers as f64).ceil() as usize;
    // Compare in 1-based layer numbering.
    let label = if last_rank1_layer + 1 >= boundary {
        FlipLabel::LastLayerFlip
    } else {
        FlipLabel::MiddleFlip
    };
    Ok(FlipClassification {
        label,
        first_rank1_layer,
    })
}

/// One JSONL record of a tracked token's rank evolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankTrajectoryRecord {
    pub example_id: usize,
    pub ranks: Vec<usize>,
    pub final_pred: usize,
    pub gold: usize,
    pub label: FlipLabel,
    pub mode: LensMode,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_traced, Activation, HookSet, ModelConfig, ModelWeights};
    use crate::numerics::argmax;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            ffn: 20,
            vocab: 13,
            max_seq: 6,
            activation: Activation::Gelu,
        }
    }

    fn traced(seed: u64) -> (ModelWeights, ResidualTrace) {
        let w = ModelWeights::random(cfg(), seed).unwrap();
        let (_, trace) = forward_traced(&w, &[1, 5, 9, 2], &HookSet::none()).unwrap();
        (w, trace)
    }

    #[test]
    fn final_layer_final_ln_equals_model_logits_exactly() {
        let (w, trace) = traced(3);
        let z = project(&trace, trace.layers - 1, &w, LensMode::FinalLn).unwrap();
        assert_eq!(z, trace.final_logits());
    }

    #[test]
    fn frozen_projection_matches_bruteforce_and_ranks_agree() {
        let (w, trace) = traced(17);
        let pos = trace.current_position();
        for l in 0..trace.layers {
            let z = project(&trace, l, &w, LensMode::FinalLn).unwrap();
            // Brute-force recompute through the full layer norm.
            let h = trace.stream(l + 1, pos).unwrap();
            let normed = layer_norm(h, &w.ln_final.gain, &w.ln_final.bias).unwrap();
            let z_ref = w.w_unembed.matvec(&normed);
            for tok in 0..w.config.vocab {
                assert!((z[tok] - z_ref[tok]).abs() < 1e-12);
                assert_eq!(
                    rank_of(tok, &z).unwrap(),
                    rank_of(tok, &z_ref).unwrap()
                );
            }
        }
    }

    #[test]
    fn decompose_reconstructs_frozen_projection() {
        let (w, trace) = traced(29);
        let dec = decompose(&trace, &w, LensMode::FrozenLn).unwrap();
        let rec = dec.reconstruction();
        let full = project(&trace, trace.layers - 1, &w, LensMode::FrozenLn).unwrap();
        let scale = full.iter().map(|v| v.abs()).fold(1e-12, f64::max);
        for (a, b) in rec.iter().zip(&full) {
            assert!((a - b).abs() / scale < 1e-5);
        }
    }

    #[test]
    fn decompose_rejects_final_ln_mode() {
        let (w, trace) = traced(31);
        assert!(decompose(&trace, &w, LensMode::FinalLn).is_err());
    }

    #[test]
    fn decompose_zero_ffn_weights_gives_zero_ffn_contributions() {
        let mut w = ModelWeights::random(cfg(), 41).unwrap();
        for layer in &mut w.layers {
            for v in layer.w_down.data_mut() {
                *v = 0.0;
            }
        }
        let (_, trace) = forward_traced(&w, &[3, 4, 5], &HookSet::none()).unwrap();
        let dec = decompose(&trace, &w, LensMode::FrozenLn).unwrap();
        for u in &dec.ffn {
            assert!(u.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rank_trajectory_matches_sort_oracle() {
        let (w, trace) = traced(53);
        let token = 4;
        let traj = rank_trajectory(&trace, token, &w, LensMode::FinalLn).unwrap();
        for l in 0..trace.layers {
            let z = project(&trace, l, &w, LensMode::FinalLn).unwrap();
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
            let oracle = order.iter().position(|&i| i == token).unwrap() + 1;
            assert_eq!(traj.ranks[l], oracle);
        }
    }

    #[test]
    fn all_rank_one_when_token_is_argmax_everywhere() {
        let (w, trace) = traced(61);
        let top = argmax(trace.final_logits());
        let traj = rank_trajectory(&trace, top, &w, LensMode::FinalLn).unwrap();
        if traj.ranks.iter().all(|&r| r == 1) {
            assert_eq!(traj.final_rank, 1);
        }
    }

    #[test]
    fn classify_flip_labels() {
        let traj = |ranks: Vec<usize>| RankTrajectory {
            final_rank: 5,
            ranks,
        };
        // Correct regardless of trajectory.
        let c = classify_flip(&traj(vec![4, 3, 2, 1]), 7, 7, 0.9).unwrap();
        assert_eq!(c.label, FlipLabel::Correct);
        // Rank 1 at the last layer of 10, boundary 0.9 -> ceil(9) = 9 <= 10.
        let t = traj(vec![5, 4, 3, 2, 2, 2, 2, 2, 2, 1]);
        let c = classify_flip(&t, 3, 7, 0.9).unwrap();
        assert_eq!(c.label, FlipLabel::LastLayerFlip);
        assert_eq!(c.first_rank1_layer, Some(9));
        // Rank 1 only mid-stack.
        let t = traj(vec![5, 4, 1, 2, 3, 3, 4, 5, 6, 7]);
        let c = classify_flip(&t, 3, 7, 0.9).unwrap();
        assert_eq!(c.label, FlipLabel::MiddleFlip);
        // Never rank 1.
        let t = traj(vec![5; 10]);
        let c = classify_flip(&t, 3, 7, 0.9).unwrap();
        assert_eq!(c.label, FlipLabel::NoFlip);
        assert_eq!(c.first_rank1_layer, None);
    }

    #[test]
    fn classify_flip_is_total_over_label_space() {
        // Every combination of (trajectory shape, pred == gold) maps to
        // exactly one of the four labels.
        let shapes = [vec![2, 2, 2], vec![1, 2, 2], vec![2, 1, 2], vec![2, 2, 1]];
        for ranks in shapes {
            for (pred, gold) in [(1usize, 1usize), (1, 2)] {
                let t = RankTrajectory {
                    ranks: ranks.clone(),
                    final_rank: 2,
                };
                let c = classify_flip(&t, pred, gold, 0.9).unwrap();
                let labels = [
                    FlipLabel::MiddleFlip,
                    FlipLabel::LastLayerFlip,
                    FlipLabel::NoFlip,
                    FlipLabel::Correct,
                ];
                assert_eq!(labels.iter().filter(|&&l| l == c.label).count(), 1);
            }
        }
    }
}
