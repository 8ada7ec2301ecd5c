//! Instrumented forward pass.
//!
//! One per-position kernel drives both entry points: [`forward_traced`]
//! recomputes a whole sequence and captures a full [`ResidualTrace`];
//! [`IncrementalRun`] keeps per-layer key/value caches so autoregressive
//! decoding can extend a sequence one token at a time. Both paths execute
//! identical floating-point operations per position, so their outputs agree
//! bit for bit.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numerics::{axpy, dot, layer_norm};

use super::hooks::{HookSet, OnlineRectify};
use super::trace::ResidualTrace;
use super::weights::ModelWeights;

/// Per-layer cached attention keys and values, one entry per position.
#[derive(Debug, Clone, Default)]
struct LayerKv {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct KvCache {
    layers: Vec<LayerKv>,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); layers],
        }
    }

    fn push(&mut self, per_layer: Vec<(Vec<f64>, Vec<f64>)>) {
        for (layer, (k, v)) in self.layers.iter_mut().zip(per_layer) {
            layer.k.push(k);
            layer.v.push(v);
        }
    }

    fn truncate(&mut self, len: usize) {
        for layer in &mut self.layers {
            layer.k.truncate(len);
            layer.v.truncate(len);
        }
    }
}

/// Interventions that apply to a single generating position.
#[derive(Debug, Clone, Default)]
pub struct StepHooks {
    /// layer -> vector added to the FFN output.
    pub ffn_patches: BTreeMap<usize, Vec<f64>>,
    /// Dynamic suppression cancelling computed from the pass's own clean
    /// FFN outputs.
    pub online_rectify: Option<OnlineRectify>,
}

impl StepHooks {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Everything the engine observed while computing one position.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Position index within the sequence.
    pub position: usize,
    /// Residual states: level 0 is the embedding, level `l + 1` the output
    /// of layer `l`.
    pub levels: Vec<Vec<f64>>,
    /// Attention-block output per layer.
    pub attn_out: Vec<Vec<f64>>,
    /// FFN output per layer as added to the stream (patched).
    pub ffn_out: Vec<Vec<f64>>,
    /// FFN output per layer before patching.
    pub ffn_clean: Vec<Vec<f64>>,
    /// Post-activation FFN keys per layer.
    pub ffn_keys: Vec<Vec<f64>>,
    /// Attention rows `layer x head x (position + 1)`; each row sums to 1.
    pub attn_rows: Vec<Vec<Vec<f64>>>,
    /// Patches actually added, keyed by layer.
    pub applied_patches: BTreeMap<usize, Vec<f64>>,
    /// Final logits at this position.
    pub logits: Vec<f64>,
    /// New key/value pair per layer (consumed by the cache).
    kv_new: Vec<(Vec<f64>, Vec<f64>)>,
}

fn stable_softmax_inplace(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Compute one position through every layer.
///
/// `prefix_len` positions of cached keys/values are visible; the position
/// being computed has index `prefix_len`. Restore overrides matching this
/// position replace the layer output within this trajectory; later positions
/// see the override through the cached keys/values.
fn position_kernel(
    weights: &ModelWeights,
    cache: &KvCache,
    prefix_len: usize,
    token: usize,
    embed_noise: Option<&[f64]>,
    step_hooks: Option<&StepHooks>,
    overrides: Option<&BTreeMap<(usize, usize), Vec<f64>>>,
) -> Result<StepTrace> {
    let cfg = &weights.config;
    let d = cfg.hidden;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let position = prefix_len;

    // Embedding state.
    let mut state = weights.embedding(token)?;
    axpy(&mut state, 1.0, weights.pos_embed.row(position));
    if let Some(noise) = embed_noise {
        axpy(&mut state, 1.0, noise);
    }

    let mut levels = Vec::with_capacity(cfg.layers + 1);
    levels.push(state.clone());
    let mut attn_out = Vec::with_capacity(cfg.layers);
    let mut ffn_out = Vec::with_capacity(cfg.layers);
    let mut ffn_clean_all = Vec::with_capacity(cfg.layers);
    let mut ffn_keys = Vec::with_capacity(cfg.layers);
    let mut attn_rows = Vec::with_capacity(cfg.layers);
    let mut applied_patches = BTreeMap::new();
    let mut kv_new = Vec::with_capacity(cfg.layers);

    for (l, layer) in weights.layers.iter().enumerate() {
        // Attention sublayer.
        let x = layer_norm(&state, &layer.ln_attn.gain, &layer.ln_attn.bias)?;
        let q = layer.w_q.matvec(&x);
        let k_own = layer.w_k.matvec(&x);
        let v_own = layer.w_v.matvec(&x);

        let kv = &cache.layers[l];
        let mut rows = Vec::with_capacity(heads);
        let mut mixed = vec![0.0; d];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            let q_h = &q[span.clone()];
            let mut scores = Vec::with_capacity(position + 1);
            for j in 0..position {
                scores.push(dot(q_h, &kv.k[j][span.clone()]) * scale);
            }
            scores.push(dot(q_h, &k_own[span.clone()]) * scale);
            stable_softmax_inplace(&mut scores);
            for (j, &w) in scores.iter().enumerate() {
                let v_j = if j < position { &kv.v[j] } else { &v_own };
                axpy(&mut mixed[span.clone()], w, &v_j[span.clone()]);
            }
            rows.push(scores);
        }
        let a = layer.w_o.matvec(&mixed);

        // FFN sublayer on the attention-augmented stream.
        let mut mid = state.clone();
        axpy(&mut mid, 1.0, &a);
        let y = layer_norm(&mid, &layer.ln_ffn.gain, &layer.ln_ffn.bias)?;
        let mut m = layer.w_up.matvec(&y);
        for v in &mut m {
            *v = cfg.activation.apply(*v);
        }
        let u_clean = layer.w_down.matvec(&m);

        let mut u = u_clean.clone();
        if let Some(hooks) = step_hooks {
            let mut patch: Option<Vec<f64>> = None;
            if let Some(p) = hooks.ffn_patches.get(&l) {
                patch = Some(p.clone());
            }
            if let Some(rect) = &hooks.online_rectify {
                let w = &rect.target_direction;
                let wn = dot(w, w);
                let proj = dot(&u_clean, w);
                if proj < 0.0 && wn > 0.0 {
                    let coeff = -rect.alpha * proj / wn;
                    let online: Vec<f64> = w.iter().map(|&wi| coeff * wi).collect();
                    patch = Some(match patch {
                        Some(mut p) => {
                            axpy(&mut p, 1.0, &online);
                            p
                        }
                        None => online,
                    });
                }
            }
            if let Some(p) = patch {
                axpy(&mut u, 1.0, &p);
                applied_patches.insert(l, p);
            }
        }

        let mut h_out = mid;
        axpy(&mut h_out, 1.0, &u);
        if let Some(ovr) = overrides {
            if let Some(replacement) = ovr.get(&(l, position)) {
                h_out = replacement.clone();
            }
        }

        attn_rows.push(rows);
        attn_out.push(a);
        ffn_out.push(u);
        ffn_clean_all.push(u_clean);
        ffn_keys.push(m);
        kv_new.push((k_own, v_own));
        state = h_out.clone();
        levels.push(h_out);
    }

    let normed = layer_norm(&state, &weights.ln_final.gain, &weights.ln_final.bias)?;
    let logits = weights.w_unembed.matvec(&normed);

    Ok(StepTrace {
        position,
        levels,
        attn_out,
        ffn_out,
        ffn_clean: ffn_clean_all,
        ffn_keys,
        attn_rows,
        applied_patches,
        logits,
        kv_new,
    })
}

fn validate_tokens(weights: &ModelWeights, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(CoreError::EmptySequence);
    }
    if tokens.len() > weights.config.max_seq {
        return Err(CoreError::SequenceTooLong {
            len: tokens.len(),
            max_seq: weights.config.max_seq,
        });
    }
    for &t in tokens {
        if t >= weights.config.vocab {
            return Err(CoreError::TokenOutOfRange {
                token: t,
                vocab: weights.config.vocab,
            });
        }
    }
    Ok(())
}

/// Run a full forward pass and capture the residual stream.
///
/// Returns the final-position logits together with the trace. Hooks apply
/// in order: embedding noise at the input, restore overrides after each
/// layer's output, FFN patches (static or online) at the final position
/// before the residual addition.
pub fn forward_traced(
    weights: &ModelWeights,
    tokens: &[usize],
    hooks: &HookSet,
) -> Result<(Vec<f64>, ResidualTrace)> {
    validate_tokens(weights, tokens)?;
    hooks.validate(&weights.config, tokens.len())?;

    let cfg = &weights.config;
    let mut cache = KvCache::new(cfg.layers);
    let mut trace = ResidualTrace::with_capacity(cfg.layers, cfg.hidden, cfg.heads);
    let current = tokens.len() - 1;

    let step_hooks = StepHooks {
        ffn_patches: hooks.ffn_patches.clone(),
        online_rectify: hooks.online_rectify.clone(),
    };
    let overrides = if hooks.restore_overrides.is_empty() {
        None
    } else {
        Some(&hooks.restore_overrides)
    };

    for (t, &token) in tokens.iter().enumerate() {
        let noise = hooks.embed_noise.as_ref().and_then(|n| {
            (t >= n.start && t < n.start + n.vectors.len()).then(|| n.vectors[t - n.start].as_slice())
        });
        let hooks_for_t = (t == current && !(step_hooks.ffn_patches.is_empty() && step_hooks.online_rectify.is_none()))
            .then_some(&step_hooks);
        let step = position_kernel(weights, &cache, t, token, noise, hooks_for_t, overrides)?;

        trace.push_embedding(step.levels[0].clone());
        for l in 0..cfg.layers {
            for (h, row) in step.attn_rows[l].iter().enumerate() {
                trace.push_attn_row(l, h, row.clone());
            }
            trace.push_layer_position(
                l,
                step.attn_out[l].clone(),
                step.ffn_out[l].clone(),
                step.ffn_clean[l].clone(),
                step.ffn_keys[l].clone(),
                step.levels[l + 1].clone(),
            );
        }
        for (&layer, patch) in &step.applied_patches {
            trace.record_patch(layer, patch.clone());
        }
        trace.push_logits(step.logits.clone());
        cache.push(step.kv_new);
    }

    Ok((trace.final_logits().to_vec(), trace))
}

/// Incremental decoding state with per-layer key/value caches.
///
/// `commit` extends the sequence with a clean (unpatched) position;
/// `recompute_last_with` re-derives the newest position under step hooks
/// without touching the cache, which is how a rectified pass reuses the
/// clean prefix. Cached results are bit-identical to re-running
/// [`forward_traced`] over the same tokens.
#[derive(Debug)]
pub struct IncrementalRun<'w> {
    weights: &'w ModelWeights,
    cache: KvCache,
    tokens: Vec<usize>,
    last: Option<StepTrace>,
}

impl<'w> IncrementalRun<'w> {
    pub fn new(weights: &'w ModelWeights) -> Self {
        Self {
            weights,
            cache: KvCache::new(weights.config.layers),
            tokens: Vec::new(),
            last: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// View of the newest committed position.
    pub fn last(&self) -> Option<&StepTrace> {
        self.last.as_ref()
    }

    /// Append one clean position.
    pub fn commit(&mut self, token: usize) -> Result<&StepTrace> {
        if token >= self.weights.config.vocab {
            return Err(CoreError::TokenOutOfRange {
                token,
                vocab: self.weights.config.vocab,
            });
        }
        if self.tokens.len() + 1 > self.weights.config.max_seq {
            return Err(CoreError::SequenceTooLong {
                len: self.tokens.len() + 1,
                max_seq: self.weights.config.max_seq,
            });
        }
        let step = position_kernel(
            self.weights,
            &self.cache,
            self.tokens.len(),
            token,
            None,
            None,
            None,
        )?;
        self.cache.push(step.kv_new.clone());
        self.tokens.push(token);
        self.last = Some(step);
        Ok(self.last.as_ref().unwrap())
    }

    /// Append several clean positions.
    pub fn commit_all(&mut self, tokens: &[usize]) -> Result<&StepTrace> {
        if tokens.is_empty() {
            return Err(CoreError::EmptySequence);
        }
        for &t in tokens {
            self.commit(t)?;
        }
        Ok(self.last.as_ref().unwrap())
    }

    /// Recompute the newest position under step hooks, reusing the cached
    /// prefix. The cache and committed state are left untouched.
    pub fn recompute_last_with(&self, hooks: &StepHooks) -> Result<StepTrace> {
        let len = self.tokens.len();
        if len == 0 {
            return Err(CoreError::EmptySequence);
        }
        let mut view = self.cache.clone();
        view.truncate(len - 1);
        position_kernel(
            self.weights,
            &view,
            len - 1,
            self.tokens[len - 1],
            None,
            Some(hooks),
            None,
        )
    }
}
