//! The full CoRect decoding loop: two diagnosis passes per step, target
//! selection, suppressive-layer patching, and greedy emission from the
//! rectified logits.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::lens::{project, project_state, LensMode};
use crate::model::{
    forward_traced, HookSet, IncrementalRun, ModelWeights, OnlineRectify, StepHooks,
};
use crate::numerics::argmax;

use super::rectify::{
    build_plan, make_patch, predicted_shift, predicted_shift_from, suppressive_layers_from,
    PatchMode, RectificationPlan,
};
use super::selection::{
    aggregate_and_normalize, s_info_layer, select_target, select_target_rows, ConflictPrompt,
    SelectionConfig,
};

/// Stage-2 knobs for the decode loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectifyConfig {
    /// Intervention strength; 1 cancels suppression exactly.
    pub alpha: f64,
    pub mode: PatchMode,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            mode: PatchMode::Online,
        }
    }
}

/// Execution options shared by the decode loops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    /// Reuse per-layer key/value caches across passes and steps. Off by
    /// default; the cache-free path defines correctness and the cached path
    /// must match it bit for bit.
    pub kv_cache: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { kv_cache: false }
    }
}

/// Per-step record of what CoRect saw and did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub target_id: usize,
    pub candidates: Vec<usize>,
    pub s_info: Vec<f64>,
    pub s_attn: Vec<f64>,
    pub l_supp: Vec<usize>,
    pub alpha: f64,
    pub predicted_shift: f64,
    pub realized_shift: f64,
    pub emitted_id: usize,
}

/// Output of a CoRect decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorectDecode {
    /// Newly generated tokens (prompt excluded).
    pub tokens: Vec<usize>,
    pub steps: Vec<StepDiagnostics>,
}

/// Run the two-pass CoRect loop for `max_new` greedy steps.
pub fn decode_corect(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    sel: &SelectionConfig,
    rect: &RectifyConfig,
    max_new: usize,
) -> Result<CorectDecode> {
    decode_corect_with(weights, prompt, sel, rect, max_new, DecodeOptions::default())
}

pub fn decode_corect_with(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    sel: &SelectionConfig,
    rect: &RectifyConfig,
    max_new: usize,
    options: DecodeOptions,
) -> Result<CorectDecode> {
    if max_new < 1 {
        return Err(CoreError::InvalidArgument {
            reason: "max_new must be >= 1".into(),
        });
    }
    sel.validate(weights.config.layers)?;
    if rect.alpha < 0.0 {
        return Err(CoreError::InvalidArgument {
            reason: "alpha must be >= 0".into(),
        });
    }
    if options.kv_cache {
        decode_corect_cached(weights, prompt, sel, rect, max_new)
    } else {
        decode_corect_uncached(weights, prompt, sel, rect, max_new)
    }
}

fn decode_corect_uncached(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    sel: &SelectionConfig,
    rect: &RectifyConfig,
    max_new: usize,
) -> Result<CorectDecode> {
    let layers = weights.config.layers;
    let mut ctx = prompt.ctx_tokens.clone();
    let mut null = prompt.null_tokens.clone();
    let mut tokens = Vec::with_capacity(max_new);
    let mut steps = Vec::with_capacity(max_new);

    for step in 0..max_new {
        let (z_ctx, ctx_trace) = forward_traced(weights, &ctx, &HookSet::none())?;
        let (_, null_trace) = forward_traced(weights, &null, &HookSet::none())?;

        let mut s_layers = Vec::with_capacity(layers);
        for l in 0..layers {
            let zc = project(&ctx_trace, l, weights, LensMode::FinalLn)?;
            let zn = project(&null_trace, l, weights, LensMode::FinalLn)?;
            s_layers.push(s_info_layer(&zc, &zn)?);
        }
        let scores = aggregate_and_normalize(&s_layers, sel.k, sel.epsilon)?;
        let selection = select_target(&scores, &ctx_trace, prompt, sel)?;
        let w_target = weights.unembed_row(selection.target)?.to_vec();

        let (z_rect, plan, predicted) = match rect.mode {
            PatchMode::Online => {
                let mut hooks = HookSet::none();
                hooks.online_rectify = Some(OnlineRectify {
                    target_direction: w_target.clone(),
                    alpha: rect.alpha,
                });
                let (z_rect, rect_trace) = forward_traced(weights, &ctx, &hooks)?;
                let l_supp: std::collections::BTreeSet<usize> =
                    rect_trace.applied_patches().keys().copied().collect();
                let cur = rect_trace.current_position();
                let mut patches = std::collections::BTreeMap::new();
                let mut ffn_clean = Vec::with_capacity(layers);
                for l in 0..layers {
                    ffn_clean.push(rect_trace.ffn_out_clean(l, cur)?.to_vec());
                }
                for &l in &l_supp {
                    patches.insert(l, make_patch(&ffn_clean[l], &w_target, rect.alpha)?);
                }
                let plan = RectificationPlan {
                    l_supp,
                    patches,
                    alpha: rect.alpha,
                    mode: PatchMode::Online,
                };
                let predicted = predicted_shift_from(&plan, &ffn_clean, &w_target);
                (z_rect, plan, predicted)
            }
            PatchMode::Frozen => {
                let plan = build_plan(&ctx_trace, &w_target, rect.alpha, PatchMode::Frozen)?;
                let mut hooks = HookSet::none();
                hooks.ffn_patches = plan.patches.clone();
                let (z_rect, _) = forward_traced(weights, &ctx, &hooks)?;
                let predicted = predicted_shift(&plan, &ctx_trace, &w_target)?;
                (z_rect, plan, predicted)
            }
        };

        let realized = z_rect[selection.target] - z_ctx[selection.target];
        let emitted = argmax(&z_rect);
        steps.push(StepDiagnostics {
            step,
            target_id: selection.target,
            candidates: selection.candidates,
            s_info: selection.s_info_total,
            s_attn: selection.s_attn,
            l_supp: plan.l_supp.iter().copied().collect(),
            alpha: rect.alpha,
            predicted_shift: predicted,
            realized_shift: realized,
            emitted_id: emitted,
        });
        tokens.push(emitted);
        ctx.push(emitted);
        null.push(emitted);
    }
    Ok(CorectDecode { tokens, steps })
}

fn decode_corect_cached(
    weights: &ModelWeights,
    prompt: &ConflictPrompt,
    sel: &SelectionConfig,
    rect: &RectifyConfig,
    max_new: usize,
) -> Result<CorectDecode> {
    let layers = weights.config.layers;
    let mut ctx_run = IncrementalRun::new(weights);
    ctx_run.commit_all(&prompt.ctx_tokens)?;
    let mut null_run = IncrementalRun::new(weights);
    null_run.commit_all(&prompt.null_tokens)?;

    let mut tokens = Vec::with_capacity(max_new);
    let mut steps = Vec::with_capacity(max_new);

    for step in 0..max_new {
        let ctx_step = ctx_run.last().expect("committed").clone();
        let null_step = null_run.last().expect("committed").clone();

        let mut s_layers = Vec::with_capacity(layers);
        for l in 0..layers {
            let zc = project_state(weights, &ctx_step.levels[l + 1])?;
            let zn = project_state(weights, &null_step.levels[l + 1])?;
            s_layers.push(s_info_layer(&zc, &zn)?);
        }
        let scores = aggregate_and_normalize(&s_layers, sel.k, sel.epsilon)?;
        let final_rows: Vec<&[f64]> = ctx_step.attn_rows[layers - 1]
            .iter()
            .map(|r| r.as_slice())
            .collect();
        let selection = select_target_rows(&scores, &final_rows, prompt, sel)?;
        let w_target = weights.unembed_row(selection.target)?.to_vec();

        let (rect_step, plan, predicted) = match rect.mode {
            PatchMode::Online => {
                let hooks = StepHooks {
                    ffn_patches: Default::default(),
                    online_rectify: Some(OnlineRectify {
                        target_direction: w_target.clone(),
                        alpha: rect.alpha,
                    }),
                };
                let rect_step = ctx_run.recompute_last_with(&hooks)?;
                let l_supp: std::collections::BTreeSet<usize> =
                    rect_step.applied_patches.keys().copied().collect();
                let mut patches = std::collections::BTreeMap::new();
                for &l in &l_supp {
                    patches.insert(l, make_patch(&rect_step.ffn_clean[l], &w_target, rect.alpha)?);
                }
                let plan = RectificationPlan {
                    l_supp,
                    patches,
                    alpha: rect.alpha,
                    mode: PatchMode::Online,
                };
                let predicted = predicted_shift_from(&plan, &rect_step.ffn_clean, &w_target);
                (rect_step, plan, predicted)
            }
            PatchMode::Frozen => {
                let l_supp = suppressive_layers_from(&ctx_step.ffn_clean, &w_target);
                let mut patches = std::collections::BTreeMap::new();
                for &l in &l_supp {
                    patches.insert(l, make_patch(&ctx_step.ffn_clean[l], &w_target, rect.alpha)?);
                }
                let plan = RectificationPlan {
                    l_supp,
                    patches,
                    alpha: rect.alpha,
                    mode: PatchMode::Frozen,
                };
                let hooks = StepHooks {
                    ffn_patches: plan.patches.clone(),
                    online_rectify: None,
                };
                let rect_step = ctx_run.recompute_last_with(&hooks)?;
                let predicted = predicted_shift_from(&plan, &ctx_step.ffn_clean, &w_target);
                (rect_step, plan, predicted)
            }
        };

        let realized = rect_step.logits[selection.target] - ctx_step.logits[selection.target];
        let emitted = argmax(&rect_step.logits);
        steps.push(StepDiagnostics {
            step,
            target_id: selection.target,
            candidates: selection.candidates,
            s_info: selection.s_info_total,
            s_attn: selection.s_attn,
            l_supp: plan.l_supp.iter().copied().collect(),
            alpha: rect.alpha,
            predicted_shift: predicted,
            realized_shift: realized,
            emitted_id: emitted,
        });
        tokens.push(emitted);
        ctx_run.commit(emitted)?;
        null_run.commit(emitted)?;
    }
    Ok(CorectDecode { tokens, steps })
}
