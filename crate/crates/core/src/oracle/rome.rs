//! Rank-one model editing: key covariance, target value search, and the
//! closed-form constrained update.

use crate::error::{CoreError, Result};
use crate::model::{forward_traced, HookSet, ModelWeights, ResidualTrace};
use crate::numerics::{argmax, axpy, cholesky_solve, dot, norm, Mat};

/// Ridge added to the empirical key second moment for invertibility.
pub const COVARIANCE_RIDGE: f64 = 1e-4;

/// A computed rank-one edit of one layer's FFN down-projection.
#[derive(Debug, Clone)]
pub struct RomeEdit {
    pub layer: usize,
    /// Post-activation key the edit is keyed to.
    pub m_star: Vec<f64>,
    /// Desired FFN output for that key.
    pub v_star: Vec<f64>,
    /// Key covariance used for the preservation term.
    pub covariance: Mat,
    /// The rank-one weight update, `hidden x ffn`.
    pub delta_w: Mat,
    /// Steering magnitude found for the target direction.
    pub gamma: f64,
}

/// Empirical second moment of key vectors plus a ridge.
pub fn covariance_from_keys(keys: &[Vec<f64>]) -> Result<Mat> {
    let Some(first) = keys.first() else {
        return Err(CoreError::InvalidArgument {
            reason: "no sample keys".into(),
        });
    };
    let d = first.len();
    let mut c = Mat::zeros(d, d);
    for key in keys {
        if key.len() != d {
            return Err(CoreError::DimensionMismatch {
                context: "covariance_from_keys",
                expected: d,
                got: key.len(),
            });
        }
        c.add_outer(1.0 / keys.len() as f64, key, key);
    }
    for i in 0..d {
        c.set(i, i, c.get(i, i) + COVARIANCE_RIDGE);
    }
    Ok(c)
}

/// Collect post-activation keys at `layer` over every position of every
/// sample prompt and form their ridged second moment.
pub fn key_covariance(
    weights: &ModelWeights,
    sample_prompts: &[Vec<usize>],
    layer: usize,
) -> Result<Mat> {
    if layer >= weights.config.layers {
        return Err(CoreError::LayerOutOfRange {
            layer,
            layers: weights.config.layers,
        });
    }
    let mut keys = Vec::new();
    for prompt in sample_prompts {
        let (_, trace) = forward_traced(weights, prompt, &HookSet::none())?;
        for pos in 0..trace.seq_len {
            keys.push(trace.ffn_keys(layer, pos)?.to_vec());
        }
    }
    covariance_from_keys(&keys)
}

/// Find the edited FFN output `v* = u + gamma * w / ||w||` with the smallest
/// `gamma` that makes `t_star` the argmax of the final logits when the
/// layer's output at the current position is replaced by `v*`.
///
/// The steering direction is fixed to the target's unembedding vector; only
/// the magnitude is searched, by bisection over `(0, 100]` to a `1e-3`
/// tolerance.
pub fn compute_v_star(
    weights: &ModelWeights,
    trace: &ResidualTrace,
    tokens: &[usize],
    layer: usize,
    t_star: usize,
) -> Result<(Vec<f64>, f64)> {
    const GAMMA_MAX: f64 = 100.0;
    const GAMMA_TOL: f64 = 1e-3;

    let cur = trace.current_position();
    let u_orig = trace.ffn_out_clean(layer, cur)?.to_vec();
    let w = weights.unembed_row(t_star)?;
    let wn = norm(w);
    if wn == 0.0 {
        return Err(CoreError::InvalidArgument {
            reason: "target unembedding direction is zero".into(),
        });
    }
    let direction: Vec<f64> = w.iter().map(|&x| x / wn).collect();

    let achieves = |gamma: f64| -> Result<bool> {
        let mut v = u_orig.clone();
        axpy(&mut v, gamma, &direction);
        // Replace u_layer by v*: add (v* - u) as a patch.
        let mut patch = v;
        axpy(&mut patch, -1.0, &u_orig);
        let mut hooks = HookSet::none();
        hooks.ffn_patches.insert(layer, patch);
        let (logits, _) = forward_traced(weights, tokens, &hooks)?;
        Ok(argmax(&logits) == t_star)
    };

    let mut gamma = if achieves(0.0)? {
        0.0
    } else if !achieves(GAMMA_MAX)? {
        return Err(CoreError::GammaSearchFailed {
            token: t_star,
            max: GAMMA_MAX,
        });
    } else {
        let (mut lo, mut hi) = (0.0, GAMMA_MAX);
        while hi - lo > GAMMA_TOL {
            let mid = 0.5 * (lo + hi);
            if achieves(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    // Snap tiny magnitudes to the lower search bound.
    if gamma < GAMMA_TOL {
        gamma = 0.0;
    }
    let mut v_star = u_orig;
    axpy(&mut v_star, gamma, &direction);
    Ok((v_star, gamma))
}

/// Closed-form constrained rank-one update:
/// `delta_W = (v* - W0 m*) (C^{-1} m*)^T / (m*^T C^{-1} m*)`.
///
/// `C x = m*` is solved rather than inverting `C`.
pub fn rome_update(w0: &Mat, m_star: &[f64], v_star: &[f64], covariance: &Mat) -> Result<Mat> {
    if w0.cols() != m_star.len() {
        return Err(CoreError::DimensionMismatch {
            context: "rome_update key width",
            expected: w0.cols(),
            got: m_star.len(),
        });
    }
    if w0.rows() != v_star.len() {
        return Err(CoreError::DimensionMismatch {
            context: "rome_update value width",
            expected: w0.rows(),
            got: v_star.len(),
        });
    }
    let c_inv_m = cholesky_solve(covariance, m_star)?;
    let denom = dot(m_star, &c_inv_m);
    if denom.abs() < 1e-300 || !denom.is_finite() {
        return Err(CoreError::SingularMatrix {
            context: "rome_update",
        });
    }
    let mut residual = v_star.to_vec();
    let w0_m = w0.matvec(m_star);
    axpy(&mut residual, -1.0, &w0_m);
    let mut delta = Mat::zeros(w0.rows(), w0.cols());
    delta.add_outer(1.0 / denom, &residual, &c_inv_m);
    Ok(delta)
}

/// Compute a full edit against a traced prompt: search the steering
/// magnitude, solve the constrained update for the layer's
/// down-projection, and confirm the edited weights actually emit the
/// target on the prompt.
///
/// The bisection bounds the magnitude for an output *replacement*; the
/// weight update additionally moves every other position's FFN output a
/// little (whitened-key overlap), which can eat the replacement margin.
/// When that happens the magnitude is escalated geometrically within the
/// same search cap.
pub fn compute_edit(
    weights: &ModelWeights,
    tokens: &[usize],
    layer: usize,
    t_star: usize,
    covariance: Mat,
) -> Result<RomeEdit> {
    const GAMMA_MAX: f64 = 100.0;
    if layer >= weights.config.layers {
        return Err(CoreError::LayerOutOfRange {
            layer,
            layers: weights.config.layers,
        });
    }
    let (_, trace) = forward_traced(weights, tokens, &HookSet::none())?;
    let cur = trace.current_position();
    let m_star = trace.ffn_keys(layer, cur)?.to_vec();
    let u_orig = trace.ffn_out_clean(layer, cur)?.to_vec();
    let (v0, gamma0) = compute_v_star(weights, &trace, tokens, layer, t_star)?;
    let w_t = weights.unembed_row(t_star)?;
    let wn = norm(w_t);
    let direction: Vec<f64> = w_t.iter().map(|&x| x / wn).collect();

    let build = |gamma: f64| -> Result<(Vec<f64>, Mat)> {
        let mut v = u_orig.clone();
        axpy(&mut v, gamma, &direction);
        let delta = rome_update(&weights.layers[layer].w_down, &m_star, &v, &covariance)?;
        Ok((v, delta))
    };
    let emits_target = |edit: &RomeEdit| -> Result<bool> {
        let edited = apply_edit(weights, edit);
        let (logits, _) = forward_traced(&edited, tokens, &HookSet::none())?;
        Ok(argmax(&logits) == t_star)
    };

    let mut gamma = gamma0;
    loop {
        let (v_star, delta_w) = build(gamma)?;
        let edit = RomeEdit {
            layer,
            m_star: m_star.clone(),
            v_star,
            covariance: covariance.clone(),
            delta_w,
            gamma,
        };
        if emits_target(&edit)? {
            return Ok(edit);
        }
        gamma = if gamma == 0.0 { 1.0 } else { gamma * 1.5 };
        if gamma > GAMMA_MAX {
            return Err(CoreError::GammaSearchFailed {
                token: t_star,
                max: GAMMA_MAX,
            });
        }
    }
}

/// Apply an edit, producing a model whose edited layer's down-projection is
/// `W0 + delta_W`.
pub fn apply_edit(weights: &ModelWeights, edit: &RomeEdit) -> ModelWeights {
    let mut edited = weights.clone();
    let w_down = &mut edited.layers[edit.layer].w_down;
    for r in 0..w_down.rows() {
        for c in 0..w_down.cols() {
            let v = w_down.get(r, c) + edit.delta_w.get(r, c);
            w_down.set(r, c, v);
        }
    }
    edited
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig, ModelWeights};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn covariance_single_key_is_outer_product_plus_ridge() {
        let m = vec![1.0, -2.0, 0.5];
        let c = covariance_from_keys(&[m.clone()]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = m[i] * m[j] + if i == j { COVARIANCE_RIDGE } else { 0.0 };
                assert!((c.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_of_standard_normal_keys_is_near_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 20_000;
        let d = 6;
        let keys: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        // Box-Muller
                        let u1: f64 = rng.gen_range(1e-12..1.0);
                        let u2: f64 = rng.gen::<f64>();
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                    })
                    .collect()
            })
            .collect();
        let c = covariance_from_keys(&keys).unwrap();
        for i in 0..d {
            for j in 0..d {
                let expected = if i == j { 1.0 + COVARIANCE_RIDGE } else { 0.0 };
                assert!(
                    (c.get(i, j) - expected).abs() < 0.05,
                    "C[{i}][{j}] = {}",
                    c.get(i, j)
                );
            }
        }
        // Symmetric positive definite: Cholesky must succeed.
        assert!(cholesky_solve(&c, &vec![1.0; d]).is_ok());
    }

    #[test]
    fn rome_update_satisfies_constraint_and_preserves_orthogonal_keys() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (d_out, d_in) = (5, 7);
        let w0 = Mat::from_fn(d_out, d_in, |_, _| rng.gen::<f64>() - 0.5);
        let m_star: Vec<f64> = (0..d_in).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v_star: Vec<f64> = (0..d_out).map(|_| rng.gen::<f64>() - 0.5).collect();
        let keys: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..d_in).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let c = covariance_from_keys(&keys).unwrap();
        let delta = rome_update(&w0, &m_star, &v_star, &c).unwrap();

        // (W0 + delta) m* == v*.
        let mut out = w0.matvec(&m_star);
        let delta_m = delta.matvec(&m_star);
        for i in 0..d_out {
            out[i] += delta_m[i];
            assert!((out[i] - v_star[i]).abs() < 1e-9);
        }

        // Keys orthogonal to C^{-1} m* are untouched.
        let c_inv_m = cholesky_solve(&c, &m_star).unwrap();
        let mut probe: Vec<f64> = (0..d_in).map(|_| rng.gen::<f64>() - 0.5).collect();
        let coeff = dot(&probe, &c_inv_m) / dot(&c_inv_m, &c_inv_m);
        axpy(&mut probe, -coeff, &c_inv_m);
        let moved = delta.matvec(&probe);
        assert!(norm(&moved) < 1e-10);

        // Rank one.
        let (s1, resid) = crate::numerics::top_singular_value_and_residual(&delta);
        assert!(resid <= 1e-10 * s1);
    }

    #[test]
    fn rome_update_minimizes_covariance_weighted_norm() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (d_out, d_in) = (4, 6);
        let w0 = Mat::from_fn(d_out, d_in, |_, _| rng.gen::<f64>() - 0.5);
        let m_star: Vec<f64> = (0..d_in).map(|_| rng.gen::<f64>() - 0.5).collect();
        let v_star: Vec<f64> = (0..d_out).map(|_| rng.gen::<f64>() - 0.5).collect();
        let keys: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..d_in).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();
        let c = covariance_from_keys(&keys).unwrap();
        let delta = rome_update(&w0, &m_star, &v_star, &c).unwrap();

        let objective = |dw: &Mat| -> f64 {
            // Tr(dW C dW^T)
            let mut total = 0.0;
            for r in 0..dw.rows() {
                let row = dw.row(r);
                let c_row = c.matvec(row);
                total += dot(row, &c_row);
            }
            total
        };
        let base = objective(&delta);

        // Any feasible perturbation (Z with Z m* = 0) must not lower it.
        let mm = dot(&m_star, &m_star);
        for _ in 0..100 {
            let mut z = Mat::from_fn(d_out, d_in, |_, _| rng.gen::<f64>() - 0.5);
            // Project each row to be orthogonal to m*.
            for r in 0..d_out {
                let coeff = dot(z.row(r), &m_star) / mm;
                let m = m_star.clone();
                axpy(z.row_mut(r), -coeff, &m);
            }
            let mut candidate = delta.clone();
            for r in 0..d_out {
                let zr = z.row(r).to_vec();
                axpy(candidate.row_mut(r), 0.3, &zr);
            }
            // Still satisfies the constraint.
            let lhs = candidate.matvec(&m_star);
            let target = delta.matvec(&m_star);
            for i in 0..d_out {
                assert!((lhs[i] - target[i]).abs() < 1e-9);
            }
            assert!(objective(&candidate) >= base - 1e-9);
        }
    }

    #[test]
    fn v_star_search_on_random_model() {
        let cfg = ModelConfig {
            layers: 3,
            hidden: 16,
            heads: 2,
            ffn: 24,
            vocab: 10,
            max_seq: 6,
            activation: Activation::Gelu,
        };
        let w = ModelWeights::random(cfg, 31).unwrap();
        let tokens = [1, 2, 3];
        let (logits, trace) = forward_traced(&w, &tokens, &HookSet::none()).unwrap();

        // Target already argmax: gamma stays at the lower bound.
        let already = argmax(&logits);
        let (v, gamma) = compute_v_star(&w, &trace, &tokens, 1, already).unwrap();
        assert_eq!(gamma, 0.0);
        assert_eq!(v, trace.ffn_out_clean(1, trace.current_position()).unwrap());

        // Some other target: the construction leaves v* - u parallel to w_t.
        let t_star = (already + 1) % cfg.vocab;
        let (v, gamma) = compute_v_star(&w, &trace, &tokens, 1, t_star).unwrap();
        assert!(gamma > 0.0);
        let u = trace.ffn_out_clean(1, trace.current_position()).unwrap();
        let diff: Vec<f64> = v.iter().zip(u).map(|(a, b)| a - b).collect();
        let w_t = w.unembed_row(t_star).unwrap();
        let cos = dot(&diff, w_t) / (norm(&diff) * norm(w_t));
        assert!((cos - 1.0).abs() < 1e-9);

        // The edited forward emits the target.
        let mut patch = v;
        axpy(&mut patch, -1.0, u);
        let mut hooks = HookSet::none();
        hooks.ffn_patches.insert(1, patch);
        let (edited_logits, _) = forward_traced(&w, &tokens, &hooks).unwrap();
        assert_eq!(argmax(&edited_logits), t_star);
    }
}
