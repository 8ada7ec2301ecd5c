//! Deterministic fact implantation.
//!
//! Builds a model whose behaviour under knowledge conflicts is known by
//! construction, so suppression diagnosis, rectification, and causal
//! tracing can be validated against ground truth. Token and positional
//! embeddings are drawn from a seeded RNG and Gram-Schmidt
//! orthonormalized; the unembedding is tied to the embedding, so every
//! token's logit reads its raw coefficient in the residual stream.
//!
//! Constructed circuitry, all other weights small noise:
//!
//! - an *anchor* head at layer 0 writes a constant reference direction
//!   into every position; FFN keys subtract multiples of it to emulate
//!   activation thresholds without biases.
//! - *subject-health* heads at layers 1..L-3 attend subject tokens and
//!   accumulate their post-LN readability into a gate direction at every
//!   position. Embedding noise on the subject span inflates the span's
//!   norm, so corrupted subjects read low and the accumulated signal
//!   separates clean from corrupted runs robustly.
//! - a per-fact *memory* FFN row at the fact's memory layer fires at
//!   subject positions when the subject is present and healthy, writing
//!   the parametric answer's direction plus a protection mark.
//! - a *transfer* head one layer above each memory layer moves
//!   answer/protection content from subject positions to the querying
//!   position. Its query side opens wider the lower the accumulated
//!   health signal, which makes restoring the memory layer's output the
//!   uniquely strongest single-layer restoration in a causal trace.
//! - a *copy* head at the copy layer moves whatever entity appears in the
//!   context into the querying position.
//! - per-entity *suppressor* FFN rows at every layer erode copied entity
//!   coefficients above a floor unless a matching protection mark is
//!   present: parametric answers survive, context evidence is ground
//!   down. This is the suppression that rectification cancels.
//! - a tiny always-on FFN row nudges every entity logit negative at every
//!   layer, and a value-free head at the final layer attends entity
//!   tokens in the context so attention evidence points at them.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::corect::ConflictPrompt;
use crate::error::{CoreError, Result};
use crate::lens::{project, LensMode};
use crate::numerics::{argmax, dot, layer_norm, rank_of};

use super::config::{Activation, ModelConfig};
use super::forward::forward_traced;
use super::hooks::HookSet;
use super::weights::ModelWeights;

/// Filler token at position 0 of every canonical prompt.
pub const TOKEN_INSTR: usize = 0;
/// Filler separating context from question.
pub const TOKEN_SEP: usize = 1;
/// Filler ending the question; generation happens from this position.
pub const TOKEN_QUERY: usize = 2;
/// First token id available for subjects/relations/entities.
pub const FIRST_CONTENT_TOKEN: usize = 3;

/// One fact to implant.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FactSpec {
    pub subject: usize,
    pub relation: usize,
    pub parametric_answer: usize,
    /// Layer whose FFN hosts the fact (0-based).
    pub memory_layer: usize,
    /// Promotion strength of the memorized answer.
    pub memory_strength: f64,
    /// Layer whose attention copies context evidence (0-based).
    pub copy_layer: usize,
    /// Strength of the copied evidence.
    pub copy_strength: f64,
}

impl FactSpec {
    /// Prompt asking the fact's question with no context:
    /// `[INSTR, subject, QUERY]`.
    pub fn no_context_prompt(&self) -> Vec<usize> {
        vec![TOKEN_INSTR, self.subject, TOKEN_QUERY]
    }

    /// Span of the subject token inside [`Self::no_context_prompt`].
    pub fn no_context_subject_span(&self) -> Range<usize> {
        1..2
    }

    /// Contextual prompt stating `subject relation object` before the
    /// question: `[INSTR, s, r, object, SEP, s, QUERY]` with the context
    /// document spanning positions 1..5.
    pub fn conflict_prompt(&self, object: usize) -> Result<ConflictPrompt> {
        ConflictPrompt::new(
            vec![
                TOKEN_INSTR,
                self.subject,
                self.relation,
                object,
                TOKEN_SEP,
                self.subject,
                TOKEN_QUERY,
            ],
            1..5,
        )
    }

    /// Span of the context statement's subject inside the contextual
    /// prompt.
    pub fn context_subject_span(&self) -> Range<usize> {
        1..2
    }
}

// Construction constants. Thresholds are in raw-coefficient units relative
// to the anchor; gains that need run-time magnitudes are calibrated from
// probe passes during construction.
const NOISE_SCALE: f64 = 1e-4;
const HEALTH_CHUNK_GAIN: f64 = 0.1;
const MEMORY_SUBJECT_WEIGHT: f64 = 0.5;
const MEMORY_HEALTH_WEIGHT: f64 = 1.7;
const MEMORY_THRESHOLD: f64 = 1.9;
const SUPPRESSOR_FLOOR: f64 = 2.0;
const SUPPRESSOR_PROTECTION_WEIGHT: f64 = 1.2;
const EROSION_RATE: f64 = 0.8;
const ENTITY_BIAS: f64 = 1e-3;
const COPY_COEF_PER_STRENGTH: f64 = 4.5;
const PROMOTION_PER_STRENGTH: f64 = 0.9;
/// Raw promotion coefficient written at the subject position. Kept below 1
/// so the span's norm (and with it every calibrated post-LN read there)
/// stays where the probe measured it; the transfer channel amplifies.
const PROMOTION_RAW_AT_SPAN: f64 = 0.9;
const TRANSFER_AMPLIFY: f64 = 4.0;
const TRANSFER_SCORE_CLEAN: f64 = 6.0;
const TRANSFER_SINK_SCORE: f64 = 4.0;
const TRANSFER_HEALTH_DAMPING: f64 = 0.8;

/// Calibration measurements and per-fact verification outcomes.
#[derive(Debug, Clone)]
pub struct ImplantReport {
    /// Raw anchor coefficient planted at every position.
    pub anchor_coef: f64,
    /// Per-fact behavioural checks that were run.
    pub checks: Vec<FactCheck>,
}

/// Build-time verification of one fact.
#[derive(Debug, Clone)]
pub struct FactCheck {
    pub subject: usize,
    /// No-context argmax equals the parametric answer.
    pub no_context_ok: Option<bool>,
    /// Under a conflicting context: final argmax still the parametric
    /// answer while the context token holds rank 1 at the copy layer.
    pub conflict_suppressed_ok: Option<bool>,
}

struct Roles {
    subjects: Vec<usize>,
    entities: Vec<usize>,
    entity_idx: BTreeMap<usize, usize>,
}

fn derive_roles(cfg: &ModelConfig, facts: &[FactSpec]) -> Result<Roles> {
    if cfg.activation != Activation::Relu {
        return Err(CoreError::InvalidConfig {
            reason: "implanted models require relu activation".into(),
        });
    }
    let mut subjects = BTreeSet::new();
    let mut entities = BTreeSet::new();
    for fact in facts {
        for &(token, what) in &[
            (fact.subject, "subject"),
            (fact.relation, "relation"),
            (fact.parametric_answer, "answer"),
        ] {
            if token >= cfg.vocab {
                return Err(CoreError::TokenOutOfRange {
                    token,
                    vocab: cfg.vocab,
                });
            }
            if token < FIRST_CONTENT_TOKEN {
                return Err(CoreError::InvalidConfig {
                    reason: format!("{what} token {token} collides with reserved filler ids 0..3"),
                });
            }
        }
        if fact.parametric_answer == fact.subject {
            return Err(CoreError::InvalidConfig {
                reason: format!("fact subject {} equals its answer", fact.subject),
            });
        }
        if fact.memory_strength < 0.0 {
            return Err(CoreError::InvalidConfig {
                reason: "memory_strength must be >= 0".into(),
            });
        }
        if fact.copy_strength <= 0.0 {
            return Err(CoreError::InvalidConfig {
                reason: "copy_strength must be > 0".into(),
            });
        }
        if !subjects.insert(fact.subject) {
            return Err(CoreError::DuplicateSubject {
                subject: fact.subject,
            });
        }
        entities.insert(fact.parametric_answer);
        if fact.copy_layer >= fact.memory_layer {
            return Err(CoreError::InvalidConfig {
                reason: format!(
                    "copy_layer {} must precede memory_layer {}",
                    fact.copy_layer, fact.memory_layer
                ),
            });
        }
        if fact.copy_layer < 2 {
            return Err(CoreError::InvalidConfig {
                reason: "copy_layer must be >= 2; the health signal only exists from layer 1".into(),
            });
        }
        if fact.memory_layer + 1 >= cfg.layers {
            return Err(CoreError::InvalidConfig {
                reason: format!(
                    "memory_layer {} needs a transfer layer below the stack top {}",
                    fact.memory_layer, cfg.layers
                ),
            });
        }
    }
    // Facts sharing a copy layer must agree on the copy strength (the copy
    // head's value path is shared per layer).
    let mut copy_strength_at: BTreeMap<usize, f64> = BTreeMap::new();
    for fact in facts {
        if let Some(&existing) = copy_strength_at.get(&fact.copy_layer) {
            if existing != fact.copy_strength {
                return Err(CoreError::InvalidConfig {
                    reason: format!(
                        "facts sharing copy_layer {} use different copy strengths",
                        fact.copy_layer
                    ),
                });
            }
        } else {
            copy_strength_at.insert(fact.copy_layer, fact.copy_strength);
        }
    }
    // Copy layers cannot double as transfer layers.
    let transfer_layers: BTreeSet<usize> = facts.iter().map(|f| f.memory_layer + 1).collect();
    for fact in facts {
        if transfer_layers.contains(&fact.copy_layer) {
            return Err(CoreError::InvalidConfig {
                reason: format!(
                    "copy_layer {} collides with a transfer layer; move it or the memory layers",
                    fact.copy_layer
                ),
            });
        }
    }

    let entities: Vec<usize> = entities.into_iter().collect();
    let entity_idx = entities.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    Ok(Roles {
        subjects: subjects.into_iter().collect(),
        entities,
        entity_idx,
    })
}

fn check_capacity(cfg: &ModelConfig, facts: &[FactSpec], roles: &Roles) -> Result<()> {
    if facts.len() * 2 > cfg.ffn {
        return Err(CoreError::CapacityExceeded {
            reason: format!("{} facts exceed ffn width {} / 2", facts.len(), cfg.ffn),
        });
    }
    let n_ent = roles.entities.len();
    // Orthonormal direction budget: the reserved all-ones shield, tokens,
    // positions, anchor, gate, and a protection plus a capsule direction
    // per entity.
    let needed = 1 + cfg.vocab + cfg.max_seq + 2 + 2 * n_ent;
    if needed > cfg.hidden {
        return Err(CoreError::CapacityExceeded {
            reason: format!(
                "direction budget {needed} (vocab {} + max_seq {} + 2 + 2x{} entity channels) exceeds hidden {}",
                cfg.vocab, cfg.max_seq, n_ent, cfg.hidden
            ),
        });
    }
    if cfg.heads < 4 {
        return Err(CoreError::CapacityExceeded {
            reason: format!("construction uses 4 head roles, config has {}", cfg.heads),
        });
    }
    if n_ent > cfg.head_dim() {
        return Err(CoreError::CapacityExceeded {
            reason: format!(
                "{} entities exceed the per-head channel width {}",
                n_ent,
                cfg.head_dim()
            ),
        });
    }
    // FFN rows per layer: one bias row, one suppressor per entity, one
    // zero-write tag row per fact, plus the memory rows of facts hosted at
    // that layer.
    let mut facts_at: BTreeMap<usize, usize> = BTreeMap::new();
    for fact in facts {
        *facts_at.entry(fact.memory_layer).or_insert(0) += 1;
    }
    let worst = facts_at.values().copied().max().unwrap_or(0);
    if 1 + n_ent + facts.len() + worst > cfg.ffn {
        return Err(CoreError::CapacityExceeded {
            reason: format!(
                "ffn width {} cannot host bias + {} suppressors + {} tags + {} memory rows",
                cfg.ffn, n_ent, facts.len(), worst
            ),
        });
    }
    Ok(())
}

struct Directions {
    tok: Vec<Vec<f64>>,
    pos: Vec<Vec<f64>>,
    anchor: Vec<f64>,
    gate: Vec<f64>,
    prot: Vec<Vec<f64>>,
    /// Per-entity capsule direction: the only thing a memory row writes,
    /// and the only thing a transfer head reads. Keeping transfer reads
    /// and writes in disjoint subspaces rules out attention feedback
    /// loops through the pass-through channels.
    cap: Vec<Vec<f64>>,
}

fn build_directions(cfg: &ModelConfig, n_ent: usize, seed: u64) -> Result<Directions> {
    let d = cfg.hidden;
    let total = cfg.vocab + cfg.max_seq + 2 + 2 * n_ent;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // The all-ones direction is reserved (never handed out) so every
    // usable direction has zero entry sum. Layer norm's mean subtraction
    // is then invisible to every keyed read: <v, (x - mean)/s> has no
    // mean term for any state x.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total + 1);
    basis.push(vec![1.0 / (d as f64).sqrt(); d]);
    for _ in 0..total {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        // Modified Gram-Schmidt against everything accepted so far.
        for prev in &basis {
            let coeff = dot(&v, prev);
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= coeff * pi;
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-8 {
            return Err(CoreError::CapacityExceeded {
                reason: "degenerate draw while orthonormalizing directions".into(),
            });
        }
        for vi in &mut v {
            *vi /= n;
        }
        basis.push(v);
    }
    let mut it = basis.into_iter().skip(1);
    let tok: Vec<Vec<f64>> = (&mut it).take(cfg.vocab).collect();
    let pos: Vec<Vec<f64>> = (&mut it).take(cfg.max_seq).collect();
    let anchor = it.next().expect("budgeted");
    let gate = it.next().expect("budgeted");
    let prot: Vec<Vec<f64>> = (&mut it).take(n_ent).collect();
    let cap: Vec<Vec<f64>> = it.collect();
    Ok(Directions {
        tok,
        pos,
        anchor,
        gate,
        prot,
        cap,
    })
}

/// Combine weighted read directions into one vector.
fn combine(parts: &[(f64, &[f64])]) -> Vec<f64> {
    let d = parts[0].1.len();
    let mut out = vec![0.0; d];
    for &(w, v) in parts {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Overwrite one attention head with a rank-one query/key pattern: the
/// head's first coordinate reads `q_read` on the query side and `k_read`
/// on the key side; remaining coordinates are zeroed.
fn set_head_qk(
    layer: &mut super::weights::LayerWeights,
    head: usize,
    dh: usize,
    q_read: &[f64],
    k_read: &[f64],
    gain: f64,
) {
    let base = head * dh;
    for i in 0..dh {
        for (dst, src) in [(&mut layer.w_q, q_read), (&mut layer.w_k, k_read)] {
            let row = dst.row_mut(base + i);
            if i == 0 {
                for (r, s) in row.iter_mut().zip(src) {
                    *r = gain * s;
                }
            } else {
                row.fill(0.0);
            }
        }
    }
}

/// Overwrite one attention head's value/output path with a channel map:
/// coordinate `i` reads `reads[i]` from the attended position and writes
/// `writes[i] * gain` into the stream. Unused coordinates are zeroed.
fn set_head_channels(
    layer: &mut super::weights::LayerWeights,
    head: usize,
    dh: usize,
    reads: &[&[f64]],
    writes: &[&[f64]],
    gain: f64,
) {
    let base = head * dh;
    let d = layer.w_o.rows();
    for i in 0..dh {
        let v_row = layer.w_v.row_mut(base + i);
        if i < reads.len() {
            for (r, s) in v_row.iter_mut().zip(reads[i]) {
                *r = *s;
            }
        } else {
            v_row.fill(0.0);
        }
    }
    for r in 0..d {
        for i in 0..dh {
            let val = if i < writes.len() {
                gain * writes[i][r]
            } else {
                0.0
            };
            layer.w_o.set(r, base + i, val);
        }
    }
}

fn set_ffn_row(
    layer: &mut super::weights::LayerWeights,
    row: usize,
    key: &[f64],
    write: &[f64],
) {
    layer.w_up.row_mut(row).copy_from_slice(key);
    for (r, &w) in write.iter().enumerate() {
        layer.w_down.set(r, row, w);
    }
}

/// Raw coefficient of `direction` in a state vector.
fn coef(state: &[f64], direction: &[f64]) -> f64 {
    dot(state, direction)
}

/// Post-LN coefficient scale at a state: how large a unit raw coefficient
/// reads after layer norm. Positional directions always carry raw
/// coefficient 1, so they serve as the meter.
fn ln_gain(state: &[f64], unit_direction: &[f64]) -> Result<f64> {
    let d = state.len();
    let normed = layer_norm(state, &vec![1.0; d], &vec![0.0; d])?;
    Ok(dot(&normed, unit_direction))
}

struct Probe {
    /// Raw anchor coefficient at the query position.
    rho: f64,
    /// Raw gate coefficient at the query position, per level.
    g_query: Vec<f64>,
    /// Post-LN scale (per unit raw coefficient) at the subject position.
    ln_span: Vec<f64>,
    /// Post-LN scale at the query position.
    ln_query: Vec<f64>,
    /// Gate and subject readings at the memory layer's FFN input.
    ffn_in_gate: Vec<f64>,
    ffn_in_subject: Vec<f64>,
    ffn_in_scale: Vec<f64>,
    /// Post-LN read of the instruction token at position 0, per level.
    instr_read: Vec<f64>,
    /// Raw gate coefficient at the contextual prompt's query, per level.
    g_query_ctx: Vec<f64>,
    /// Post-LN scale at the contextual prompt's object position.
    ln_obj_ctx: Vec<f64>,
}

fn probe_fact(
    weights: &ModelWeights,
    dirs: &Directions,
    fact: &FactSpec,
    probe_object: usize,
) -> Result<Probe> {
    let prompt = fact.no_context_prompt();
    let span_pos = 1;
    let query_pos = 2;
    let (_, trace) = forward_traced(weights, &prompt, &HookSet::none())?;
    let layers = weights.config.layers;
    let subj = &dirs.tok[fact.subject];

    let rho = coef(trace.stream(1, query_pos)?, &dirs.anchor);
    let mut g_query = Vec::with_capacity(layers + 1);
    let mut ln_span = Vec::with_capacity(layers + 1);
    let mut ln_query = Vec::with_capacity(layers + 1);
    let mut instr_read = Vec::with_capacity(layers + 1);
    for level in 0..=layers {
        let s = trace.stream(level, span_pos)?;
        let q = trace.stream(level, query_pos)?;
        g_query.push(coef(q, &dirs.gate));
        ln_span.push(ln_gain(s, &dirs.pos[span_pos])?);
        ln_query.push(ln_gain(q, &dirs.pos[query_pos])?);
        instr_read.push(ln_gain(trace.stream(level, 0)?, &dirs.tok[TOKEN_INSTR])?);
    }
    let mut ffn_in_gate = Vec::with_capacity(layers);
    let mut ffn_in_subject = Vec::with_capacity(layers);
    let mut ffn_in_scale = Vec::with_capacity(layers);
    for l in 0..layers {
        let h = trace.stream(l, span_pos)?;
        let a = trace.attn_out(l, span_pos)?;
        let mid: Vec<f64> = h.iter().zip(a).map(|(x, y)| x + y).collect();
        ffn_in_gate.push(coef(&mid, &dirs.gate));
        ffn_in_subject.push(coef(&mid, subj));
        ffn_in_scale.push(ln_gain(&mid, &dirs.pos[span_pos])?);
    }
    // Contextual prompt shape: the query accumulates gate signal from two
    // subject occurrences, so gate-referencing weights must see it too.
    let ctx = fact.conflict_prompt(probe_object)?;
    let (_, ctx_trace) = forward_traced(weights, &ctx.ctx_tokens, &HookSet::none())?;
    let ctx_query = ctx.ctx_tokens.len() - 1;
    let obj_pos = 3;
    let mut g_query_ctx = Vec::with_capacity(layers + 1);
    let mut ln_obj_ctx = Vec::with_capacity(layers + 1);
    for level in 0..=layers {
        g_query_ctx.push(coef(ctx_trace.stream(level, ctx_query)?, &dirs.gate));
        ln_obj_ctx.push(ln_gain(ctx_trace.stream(level, obj_pos)?, &dirs.pos[obj_pos])?);
    }

    Ok(Probe {
        rho,
        g_query,
        ln_span,
        ln_query,
        ffn_in_gate,
        ffn_in_subject,
        ffn_in_scale,
        instr_read,
        g_query_ctx,
        ln_obj_ctx,
    })
}

/// Construct a model hosting `facts`, verified by forward passes before
/// returning.
pub fn implant_model(cfg: ModelConfig, facts: &[FactSpec], seed: u64) -> Result<ModelWeights> {
    implant_model_with_report(cfg, facts, seed).map(|(w, _)| w)
}

pub fn implant_model_with_report(
    cfg: ModelConfig,
    facts: &[FactSpec],
    seed: u64,
) -> Result<(ModelWeights, ImplantReport)> {
    cfg.validate()?;
    let roles = derive_roles(&cfg, facts)?;
    check_capacity(&cfg, facts, &roles)?;
    let dirs = build_directions(&cfg, roles.entities.len(), seed)?;

    let d = cfg.hidden;
    let dh = cfg.head_dim();
    let layers = cfg.layers;
    let sqrt_dh = (dh as f64).sqrt();
    // Conservative post-LN scale estimate used only to saturate attention
    // scores; thresholds never rely on it.
    let ln_low = (d as f64).sqrt() / 3.0;

    // ---- Base: noise everywhere, tied orthonormal embeddings. ----
    let mut w = ModelWeights::zeros(cfg)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6e6f697365);
    for layer in &mut w.layers {
        for m in [
            &mut layer.w_q,
            &mut layer.w_k,
            &mut layer.w_v,
            &mut layer.w_o,
            &mut layer.w_up,
            &mut layer.w_down,
        ] {
            for v in m.data_mut() {
                *v = (rng.gen::<f64>() * 2.0 - 1.0) * NOISE_SCALE;
            }
        }
    }
    for t in 0..cfg.vocab {
        for r in 0..d {
            w.w_embed.set(r, t, dirs.tok[t][r]);
            w.w_unembed.set(t, r, dirs.tok[t][r]);
        }
    }
    for p in 0..cfg.max_seq {
        w.pos_embed.row_mut(p).copy_from_slice(&dirs.pos[p]);
    }

    // ---- Anchor head: layer 0, head 0. Every position attends position 0
    // and receives the anchor direction with a constant raw coefficient.
    let all_pos = combine(&(0..cfg.max_seq).map(|j| (1.0, dirs.pos[j].as_slice())).collect::<Vec<_>>());
    {
        // Exact value of the position-0 read on canonical prompts.
        let h0: Vec<f64> = dirs.tok[TOKEN_INSTR]
            .iter()
            .zip(&dirs.pos[0])
            .map(|(a, b)| a + b)
            .collect();
        let read0 = ln_gain(&h0, &dirs.pos[0])?;
        let qk = 60.0 * sqrt_dh / (ln_low * ln_low);
        let gain = qk.sqrt();
        set_head_qk(&mut w.layers[0], 0, dh, &all_pos, &dirs.pos[0], gain);
        set_head_channels(
            &mut w.layers[0],
            0,
            dh,
            &[&dirs.pos[0]],
            &[&dirs.anchor],
            1.0 / read0,
        );
    }

    // ---- Subject-health heads: head 1 at layers 1..L-3 attend subject
    // tokens and accumulate their post-LN readability into the gate
    // direction at the attending position.
    if !roles.subjects.is_empty() && layers >= 4 {
        let subject_read = combine(
            &roles
                .subjects
                .iter()
                .map(|&s| (1.0, dirs.tok[s].as_slice()))
                .collect::<Vec<_>>(),
        );
        let qk = 40.0 * sqrt_dh / (ln_low * ln_low);
        let gain = qk.sqrt();
        // The value path reads the anchor, not the subject content: a
        // corrupted position's norm inflation halves its anchor read, and
        // a single fixed read direction keeps the noise exposure
        // independent of how many subjects the model hosts.
        for l in 1..layers.saturating_sub(2) {
            set_head_qk(&mut w.layers[l], 1, dh, &dirs.anchor, &subject_read, gain);
            set_head_channels(
                &mut w.layers[l],
                1,
                dh,
                &[&dirs.anchor],
                &[&dirs.gate],
                HEALTH_CHUNK_GAIN,
            );
        }
    }

    // ---- Probe the health machinery per fact before wiring thresholds.
    let mut probes = Vec::with_capacity(facts.len());
    for fact in facts {
        let probe_object = roles
            .entities
            .iter()
            .copied()
            .find(|&e| e != fact.parametric_answer)
            .unwrap_or(fact.parametric_answer);
        probes.push(probe_fact(&w, &dirs, fact, probe_object)?);
    }
    let rho = probes.first().map_or(1.0, |p| p.rho);

    // ---- FFN rows: bias row 0 everywhere, suppressors 1..=n_ent from
    // layer 1 up, memory rows after that.
    let n_ent = roles.entities.len();
    let entity_read_all = if n_ent == 0 {
        vec![0.0; d]
    } else {
        combine(
            &roles
                .entities
                .iter()
                .map(|&t| (1.0, dirs.tok[t].as_slice()))
                .collect::<Vec<_>>(),
        )
    };
    let median_mid_scale = {
        let mut scales: Vec<f64> = probes
            .iter()
            .flat_map(|p| p.ffn_in_scale.iter().copied())
            .collect();
        if scales.is_empty() {
            scales.push((d as f64 / 2.0).sqrt());
        }
        scales.sort_by(|a, b| a.partial_cmp(b).unwrap());
        scales[scales.len() / 2]
    };
    if n_ent > 0 {
        // Always-on bias: every entity logit is nudged negative at every
        // layer, so the suppressive set is well defined at all depths.
        let bias_key = combine(&[(0.1, dirs.anchor.as_slice())]);
        let bias_act = 0.1 * rho * median_mid_scale;
        let bias_write = combine(&[(-ENTITY_BIAS / bias_act, entity_read_all.as_slice())]);
        for l in 0..layers {
            set_ffn_row(&mut w.layers[l], 0, &bias_key, &bias_write);
        }
        // Entity suppressors with a protection override. The erosion gain
        // is sized against the post-copy stream norm at the querying
        // position, where these rows actually fire.
        let max_copy_coef = facts
            .iter()
            .map(|f| COPY_COEF_PER_STRENGTH * f.copy_strength)
            .fold(0.0, f64::max);
        let ln_post_copy = (d as f64).sqrt() / (3.0 + max_copy_coef * max_copy_coef).sqrt();
        let erosion = EROSION_RATE / ln_post_copy;
        for (i, &ent) in roles.entities.iter().enumerate() {
            let key = combine(&[
                (1.0, dirs.tok[ent].as_slice()),
                (-SUPPRESSOR_FLOOR / rho, dirs.anchor.as_slice()),
                (-SUPPRESSOR_PROTECTION_WEIGHT, dirs.prot[i].as_slice()),
            ]);
            let write = combine(&[(-erosion, dirs.tok[ent].as_slice())]);
            for l in 1..layers {
                set_ffn_row(&mut w.layers[l], 1 + i, &key, &write);
            }
        }
    }

    // ---- Per-fact key tags: zero-write rows that fire at the reading
    // position once the fact's protected promotion has arrived. They leave
    // behaviour untouched but give each fact a distinctive key signature,
    // which constrained weight edits rely on.
    for (fi, fact) in facts.iter().enumerate() {
        let ent_i = roles.entity_idx[&fact.parametric_answer];
        let key = combine(&[
            (0.25, dirs.tok[fact.parametric_answer].as_slice()),
            (0.75, dirs.prot[ent_i].as_slice()),
            (-2.0 / rho, dirs.anchor.as_slice()),
        ]);
        let zero_write = vec![0.0; d];
        for l in 1..layers {
            set_ffn_row(&mut w.layers[l], 1 + n_ent + fi, &key, &zero_write);
        }
    }

    // ---- Per-fact memory rows.
    let mut next_row_at: BTreeMap<usize, usize> = BTreeMap::new();
    let mut memory_row_of: Vec<(usize, usize)> = Vec::with_capacity(facts.len());
    for (fi, fact) in facts.iter().enumerate() {
        let probe = &probes[fi];
        let lm = fact.memory_layer;
        let row = {
            let slot = next_row_at.entry(lm).or_insert(1 + n_ent + facts.len());
            let r = *slot;
            *slot += 1;
            r
        };
        let g_at_input = probe.ffn_in_gate[lm].max(1e-9);
        // The query-token term keeps the row silent at the generating
        // position no matter how much health signal accumulates there.
        let key = combine(&[
            (MEMORY_SUBJECT_WEIGHT, dirs.tok[fact.subject].as_slice()),
            (MEMORY_HEALTH_WEIGHT / g_at_input, dirs.gate.as_slice()),
            (-MEMORY_THRESHOLD / rho, dirs.anchor.as_slice()),
            (-3.0, dirs.tok[TOKEN_QUERY].as_slice()),
        ]);
        // Raw activation on the clean canonical prompt.
        let margin = MEMORY_SUBJECT_WEIGHT * probe.ffn_in_subject[lm]
            + MEMORY_HEALTH_WEIGHT
            - MEMORY_THRESHOLD;
        let act_est = (margin * probe.ffn_in_scale[lm]).max(1e-9);
        let ent_i = roles.entity_idx[&fact.parametric_answer];
        // A zero-strength memory hosts the key but writes nothing; the
        // transfer-channel rescale later sets the delivered magnitude for
        // everything else.
        let raw = if fact.memory_strength > 0.0 {
            PROMOTION_RAW_AT_SPAN
        } else {
            0.0
        };
        let write = combine(&[(raw / act_est, dirs.cap[ent_i].as_slice())]);
        set_ffn_row(&mut w.layers[lm], row, &key, &write);
        memory_row_of.push((lm, row));
    }

    // ---- Copy heads (wide pair 2+3) at each copy layer.
    let copy_layers: BTreeSet<usize> = facts.iter().map(|f| f.copy_layer).collect();
    for &lc in &copy_layers {
        let strength = facts
            .iter()
            .find(|f| f.copy_layer == lc)
            .map(|f| f.copy_strength)
            .unwrap_or(1.0);
        let probe = probes
            .iter()
            .zip(facts)
            .find(|(_, f)| f.copy_layer == lc)
            .map(|(p, _)| p)
            .expect("copy layer has a fact");
        // Keyed on the query filler token so only the generating position
        // copies; context positions must stay clean carriers. The sink on
        // the instruction token absorbs the attention when the prompt has
        // no entity tokens, so nothing noisy is injected.
        let qk = 25.0 * sqrt_dh / (probe.ln_query[lc] * ln_low);
        let sink = 4.0 * sqrt_dh / (probe.ln_query[lc] * probe.instr_read[lc]);
        let q_read = combine(&[(1.0, dirs.tok[TOKEN_QUERY].as_slice())]);
        let k_read = combine(&[
            (qk, entity_read_all.as_slice()),
            (sink, dirs.tok[TOKEN_INSTR].as_slice()),
        ]);
        set_head_qk(&mut w.layers[lc], 2, dh, &q_read, &k_read, 1.0);
        set_head_qk(&mut w.layers[lc], 3, dh, &q_read, &k_read, 1.0);
        // Entity channel on head 2; the protection channel on head 3 is
        // inert here (context tokens carry no protection) but keeps the
        // wiring uniform with the transfer heads.
        let ent_reads: Vec<&[f64]> = roles.entities.iter().map(|&t| dirs.tok[t].as_slice()).collect();
        let ent_writes = ent_reads.clone();
        let prot_reads: Vec<&[f64]> = dirs.prot.iter().map(|p| p.as_slice()).collect();
        let prot_writes = prot_reads.clone();
        let obj_scale = probe.ln_obj_ctx[lc];
        let gain = COPY_COEF_PER_STRENGTH * strength / obj_scale;
        set_head_channels(&mut w.layers[lc], 2, dh, &ent_reads, &ent_writes, gain);
        set_head_channels(&mut w.layers[lc], 3, dh, &prot_reads, &prot_writes, gain);
    }

    // ---- Transfer heads (wide pair 2+3) one layer above each memory
    // layer. The query side reads anchor minus accumulated health, so a
    // corrupted-then-restored subject opens the gate widest.
    let transfer_layers: BTreeSet<usize> = facts.iter().map(|f| f.memory_layer + 1).collect();
    for &lt in &transfer_layers {
        let (probe, _) = probes
            .iter()
            .zip(facts)
            .find(|(_, f)| f.memory_layer + 1 == lt)
            .expect("transfer layer has a fact");
        // Query side: fires only at the query filler token, damped by the
        // accumulated subject-health signal. A corrupted subject leaves the
        // gate signal low, so the gate opens wider; a clean run keeps it at
        // `1 - damping` of full. The damping is normalized against the
        // larger of the two prompt shapes so the gate can never close.
        let g_ref = probe.g_query[lt].max(probe.g_query_ctx[lt]).max(1e-9);
        let q_base = 1.0;
        let q_gate = TRANSFER_HEALTH_DAMPING / g_ref;
        // Effective damping on the clean no-context prompt; the score
        // target anchors there so the restore sweep straddles the softmax
        // knee instead of saturating.
        let delta_null = TRANSFER_HEALTH_DAMPING * probe.g_query[lt] / g_ref;
        let clean_factor = probe.ln_query[lt] * (1.0 - delta_null);
        let k_scale = TRANSFER_SCORE_CLEAN * sqrt_dh / (clean_factor * probe.ln_span[lt]);
        // Attention sink: when this head's subjects are absent the mass
        // lands on the instruction token (empty cargo) instead of leaking a
        // uniform mix of whatever entities the prompt carries.
        let sink_scale = TRANSFER_SINK_SCORE * sqrt_dh / (clean_factor * probe.instr_read[lt]);
        let mut k_parts: Vec<(f64, &[f64])> = facts
            .iter()
            .filter(|f| f.memory_layer + 1 == lt)
            .map(|f| (k_scale, dirs.tok[f.subject].as_slice()))
            .collect();
        k_parts.push((sink_scale, dirs.tok[TOKEN_INSTR].as_slice()));
        let k_read = combine(&k_parts);
        let q_read = combine(&[
            (q_base, dirs.tok[TOKEN_QUERY].as_slice()),
            (-q_gate, dirs.gate.as_slice()),
        ]);
        set_head_qk(&mut w.layers[lt], 2, dh, &q_read, &k_read, 1.0);
        set_head_qk(&mut w.layers[lt], 3, dh, &q_read, &k_read, 1.0);
        let cap_reads: Vec<&[f64]> = dirs.cap.iter().map(|c| c.as_slice()).collect();
        let ent_writes: Vec<&[f64]> = roles.entities.iter().map(|&t| dirs.tok[t].as_slice()).collect();
        let prot_writes: Vec<&[f64]> = dirs.prot.iter().map(|p| p.as_slice()).collect();
        let gain = TRANSFER_AMPLIFY / probe.ln_span[lt];
        set_head_channels(&mut w.layers[lt], 2, dh, &cap_reads, &ent_writes, gain);
        set_head_channels(&mut w.layers[lt], 3, dh, &cap_reads, &prot_writes, gain);
    }

    // ---- Attention-evidence head: final layer, head 0, value-free. The
    // querying position attends entity tokens so final-layer attention
    // carries evidence for the copied candidate.
    if n_ent > 0 {
        let qk = 12.0 * sqrt_dh / (ln_low * ln_low);
        let gain = qk.sqrt();
        let last = layers - 1;
        set_head_qk(
            &mut w.layers[last],
            0,
            dh,
            &dirs.tok[TOKEN_QUERY],
            &entity_read_all,
            gain,
        );
        set_head_channels(&mut w.layers[last], 0, dh, &[], &[], 0.0);
    }

    // ---- Rescale each fact's promotion so the answer lands at the query
    // with the intended margin under the contextual prompt shape. The knob
    // is the transfer channel's per-entity coordinate, which leaves the
    // span-side norm (and every calibration that depends on it) alone.
    let mut rescaled: BTreeSet<(usize, usize)> = BTreeSet::new();
    for fact in facts.iter() {
        if fact.memory_strength <= 0.0 {
            continue;
        }
        let ent_i = roles.entity_idx[&fact.parametric_answer];
        let lt = fact.memory_layer + 1;
        if !rescaled.insert((lt, ent_i)) {
            continue;
        }
        let object = roles
            .entities
            .iter()
            .copied()
            .find(|&e| e != fact.parametric_answer)
            .unwrap_or(fact.parametric_answer);
        let prompt = fact.conflict_prompt(object)?;
        let (_, trace) = forward_traced(&w, &prompt.ctx_tokens, &HookSet::none())?;
        let query = trace.current_position();
        let arrived = coef(
            trace.stream(layers, query)?,
            &dirs.tok[fact.parametric_answer],
        );
        let target = PROMOTION_PER_STRENGTH * fact.memory_strength;
        if arrived < 1e-6 {
            return Err(CoreError::ImplantCheckFailed {
                reason: format!(
                    "fact {}: promotion never reached the query position (got {arrived:.2e})",
                    fact.subject
                ),
            });
        }
        let scale = target / arrived;
        if !(0.05..=50.0).contains(&scale) {
            return Err(CoreError::ImplantCheckFailed {
                reason: format!(
                    "fact {}: promotion rescale {scale:.3} outside sane bounds",
                    fact.subject
                ),
            });
        }
        let layer = &mut w.layers[lt];
        for (head, offset) in [(2usize, ent_i), (3usize, ent_i)] {
            let col = head * dh + offset;
            for r in 0..d {
                layer.w_o.set(r, col, layer.w_o.get(r, col) * scale);
            }
        }
    }

    w.quantize_f32();

    // ---- Behavioural verification on the finished artifact.
    let mut checks = Vec::with_capacity(facts.len());
    for fact in facts {
        let mut check = FactCheck {
            subject: fact.subject,
            no_context_ok: None,
            conflict_suppressed_ok: None,
        };
        let strong = fact.memory_strength >= 3.0 * fact.copy_strength;
        if strong {
            let (logits, _) = forward_traced(&w, &fact.no_context_prompt(), &HookSet::none())?;
            let ok = argmax(&logits) == fact.parametric_answer;
            check.no_context_ok = Some(ok);
            if !ok {
                return Err(CoreError::ImplantCheckFailed {
                    reason: format!(
                        "fact {}: no-context argmax is {}, wanted {}",
                        fact.subject,
                        argmax(&logits),
                        fact.parametric_answer
                    ),
                });
            }
            let object = roles
                .entities
                .iter()
                .copied()
                .find(|&e| e != fact.parametric_answer);
            if let Some(object) = object {
                let prompt = fact.conflict_prompt(object)?;
                let (logits, trace) = forward_traced(&w, &prompt.ctx_tokens, &HookSet::none())?;
                let still_parametric = argmax(&logits) == fact.parametric_answer;
                let z_copy = project(&trace, fact.copy_layer, &w, LensMode::FinalLn)?;
                let context_leads_midstack = rank_of(object, &z_copy)? == 1;
                let ok = still_parametric && context_leads_midstack;
                check.conflict_suppressed_ok = Some(ok);
                if !ok {
                    return Err(CoreError::ImplantCheckFailed {
                        reason: format!(
                            "fact {}: conflict check failed (final argmax {} wanted {}, copy-layer rank of {} is {})",
                            fact.subject,
                            argmax(&logits),
                            fact.parametric_answer,
                            object,
                            rank_of(object, &z_copy)?
                        ),
                    });
                }
            }
        }
        checks.push(check);
    }

    Ok((
        w,
        ImplantReport {
            anchor_coef: rho,
            checks,
        },
    ))
}
