//! Stage 2: hidden-state rectification.
//!
//! Layers whose FFN output projects negatively onto the target's
//! unembedding direction are suppressive; each gets an additive patch that
//! cancels (alpha = 1) or overshoots (alpha > 1) that projection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::ResidualTrace;
use crate::numerics::dot;

/// When patches are computed relative to the pass that carries them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// Each layer's patch is derived from that layer's own clean FFN output
    /// during the single rectified pass.
    Online,
    /// Patches are derived wholly from an unpatched trace and injected in a
    /// re-run.
    Frozen,
}

/// A set of per-layer patches aimed at one target direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectificationPlan {
    /// Layers whose clean FFN output suppressed the target.
    pub l_supp: BTreeSet<usize>,
    /// Patch per suppressive layer; each is parallel to the target
    /// direction.
    pub patches: BTreeMap<usize, Vec<f64>>,
    pub alpha: f64,
    pub mode: PatchMode,
}

/// Layers whose clean FFN output at the current position has a strictly
/// negative projection onto `w_target`.
pub fn suppressive_layers(trace: &ResidualTrace, w_target: &[f64]) -> Result<BTreeSet<usize>> {
    let cur = trace.current_position();
    let mut set = BTreeSet::new();
    for l in 0..trace.layers {
        let u = trace.ffn_out_clean(l, cur)?;
        if u.len() != w_target.len() {
            return Err(CoreError::DimensionMismatch {
                context: "suppressive_layers",
                expected: u.len(),
                got: w_target.len(),
            });
        }
        if dot(u, w_target) < 0.0 {
            set.insert(l);
        }
    }
    Ok(set)
}

/// Same check over raw clean FFN outputs (KV-cached decode path).
pub fn suppressive_layers_from(ffn_clean: &[Vec<f64>], w_target: &[f64]) -> BTreeSet<usize> {
    ffn_clean
        .iter()
        .enumerate()
        .filter(|(_, u)| dot(u, w_target) < 0.0)
        .map(|(l, _)| l)
        .collect()
}

/// The rectification patch `phi = -alpha * (u.w / ||w||^2) * w`.
pub fn make_patch(u: &[f64], w_target: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if u.len() != w_target.len() {
        return Err(CoreError::DimensionMismatch {
            context: "make_patch",
            expected: u.len(),
            got: w_target.len(),
        });
    }
    let wn = dot(w_target, w_target);
    if wn <= 0.0 {
        return Err(CoreError::InvalidArgument {
            reason: "zero target direction".into(),
        });
    }
    let coeff = -alpha * dot(u, w_target) / wn;
    Ok(w_target.iter().map(|&wi| coeff * wi).collect())
}

/// Build a frozen-mode plan from an unpatched trace.
pub fn build_plan(
    trace: &ResidualTrace,
    w_target: &[f64],
    alpha: f64,
    mode: PatchMode,
) -> Result<RectificationPlan> {
    let l_supp = suppressive_layers(trace, w_target)?;
    let cur = trace.current_position();
    let mut patches = BTreeMap::new();
    for &l in &l_supp {
        patches.insert(l, make_patch(trace.ffn_out_clean(l, cur)?, w_target, alpha)?);
    }
    Ok(RectificationPlan {
        l_supp,
        patches,
        alpha,
        mode,
    })
}

/// First-order prediction of the target-logit change:
/// `-alpha * sum_{l in L_supp} w.u_l`, using the clean FFN outputs the plan
/// was derived from. Strictly positive whenever the plan is non-empty and
/// `alpha > 0`.
pub fn predicted_shift(
    plan: &RectificationPlan,
    trace: &ResidualTrace,
    w_target: &[f64],
) -> Result<f64> {
    let cur = trace.current_position();
    let mut total = 0.0;
    for &l in &plan.l_supp {
        total += dot(trace.ffn_out_clean(l, cur)?, w_target);
    }
    Ok(-plan.alpha * total)
}

/// [`predicted_shift`] over raw clean FFN outputs.
pub fn predicted_shift_from(plan: &RectificationPlan, ffn_clean: &[Vec<f64>], w_target: &[f64]) -> f64 {
    let total: f64 = plan
        .l_supp
        .iter()
        .map(|&l| dot(&ffn_clean[l], w_target))
        .sum();
    -plan.alpha * total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_patch_cancels_projection_at_alpha_one() {
        let u = vec![1.0, -3.0, 0.5, 2.0];
        let w = vec![0.5, 1.0, -1.0, 0.25];
        let phi = make_patch(&u, &w, 1.0).unwrap();
        let patched: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a + b).collect();
        assert!(dot(&patched, &w).abs() < 1e-12);
    }

    #[test]
    fn make_patch_zero_alpha_is_zero() {
        let phi = make_patch(&[1.0, 2.0], &[1.0, 0.0], 0.0).unwrap();
        assert_eq!(phi, vec![0.0, 0.0]);
    }

    #[test]
    fn make_patch_flips_sign_beyond_one() {
        // u.w = -3, ||w|| = 1, alpha = 2 -> phi = 6 w and (u + phi).w = +3.
        let w = vec![1.0, 0.0];
        let u = vec![-3.0, 4.0];
        let phi = make_patch(&u, &w, 2.0).unwrap();
        assert_eq!(phi, vec![6.0, 0.0]);
        let patched: Vec<f64> = u.iter().zip(&phi).map(|(a, b)| a + b).collect();
        assert!((dot(&patched, &w) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn make_patch_rejects_zero_direction() {
        assert!(make_patch(&[1.0], &[0.0], 1.0).is_err());
    }

    #[test]
    fn suppressive_layers_from_matches_bruteforce() {
        let w = vec![1.0, -0.5, 0.25];
        let ffn = vec![
            vec![0.0, 0.0, 0.0],   // zero: strict inequality keeps it out
            vec![-1.0, 0.5, -0.25], // exactly -w-ish: negative projection
            vec![1.0, 0.0, 0.0],   // positive
        ];
        let set = suppressive_layers_from(&ffn, &w);
        assert!(!set.contains(&0));
        assert!(set.contains(&1));
        assert!(!set.contains(&2));
    }

    #[test]
    fn predicted_shift_examples() {
        let w = vec![1.0, 0.0];
        let ffn = vec![vec![-3.0, 1.0], vec![2.0, 0.0]];
        let plan = RectificationPlan {
            l_supp: [0usize].into_iter().collect(),
            patches: BTreeMap::new(),
            alpha: 1.0,
            mode: PatchMode::Frozen,
        };
        assert!((predicted_shift_from(&plan, &ffn, &w) - 3.0).abs() < 1e-12);
        let empty = RectificationPlan {
            l_supp: BTreeSet::new(),
            patches: BTreeMap::new(),
            alpha: 1.0,
            mode: PatchMode::Frozen,
        };
        assert_eq!(predicted_shift_from(&empty, &ffn, &w), 0.0);
    }
}
