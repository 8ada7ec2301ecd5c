//! Residual-stream capture for one forward pass.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};

/// Everything observable about a forward pass.
///
/// Layer indices are 0-based. `stream(0, t)` is the embedding state at
/// position `t`; `stream(l + 1, t)` is the state after layer `l`. For
/// unhooked runs `stream(l+1) == stream(l) + attn(l) + ffn(l)` elementwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub layers: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub heads: usize,
    /// `(layers + 1) x seq_len x hidden` residual states.
    h: Vec<Vec<Vec<f64>>>,
    /// `layers x seq_len x hidden` attention-block outputs.
    a: Vec<Vec<Vec<f64>>>,
    /// `layers x seq_len x hidden` FFN outputs as added to the stream
    /// (patches included).
    u: Vec<Vec<Vec<f64>>>,
    /// `layers x seq_len x hidden` FFN outputs before any patching.
    u_clean: Vec<Vec<Vec<f64>>>,
    /// `layers x seq_len x ffn` post-activation FFN keys.
    m: Vec<Vec<Vec<f64>>>,
    /// `layers x heads`: per query position, the attention row over keys
    /// `0..=query` (causal; rows sum to 1).
    attn: Vec<Vec<Vec<Vec<f64>>>>,
    /// Final logits per position, `seq_len x vocab`.
    z_final: Vec<Vec<f64>>,
    /// Patches that were actually added to the FFN output at the current
    /// position, keyed by layer (static hooks and online rectification both
    /// record here).
    applied_patches: BTreeMap<usize, Vec<f64>>,
}

impl ResidualTrace {
    pub(crate) fn with_capacity(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            seq_len: 0,
            hidden,
            heads,
            h: vec![Vec::new(); layers + 1],
            a: vec![Vec::new(); layers],
            u: vec![Vec::new(); layers],
            u_clean: vec![Vec::new(); layers],
            m: vec![Vec::new(); layers],
            attn: vec![vec![Vec::new(); heads]; layers],
            z_final: Vec::new(),
            applied_patches: BTreeMap::new(),
        }
    }

    pub(crate) fn push_embedding(&mut self, state: Vec<f64>) {
        self.h[0].push(state);
        self.seq_len += 1;
    }

    pub(crate) fn push_layer_position(
        &mut self,
        layer: usize,
        a: Vec<f64>,
        u: Vec<f64>,
        u_clean: Vec<f64>,
        m: Vec<f64>,
        h_out: Vec<f64>,
    ) {
        self.a[layer].push(a);
        self.u[layer].push(u);
        self.u_clean[layer].push(u_clean);
        self.m[layer].push(m);
        self.h[layer + 1].push(h_out);
    }

    pub(crate) fn push_attn_row(&mut self, layer: usize, head: usize, row: Vec<f64>) {
        self.attn[layer][head].push(row);
    }

    pub(crate) fn push_logits(&mut self, z: Vec<f64>) {
        self.z_final.push(z);
    }

    pub(crate) fn record_patch(&mut self, layer: usize, patch: Vec<f64>) {
        self.applied_patches.insert(layer, patch);
    }

    fn check_layer(&self, layer: usize, max: usize) -> Result<()> {
        if layer >= max {
            return Err(CoreError::LayerOutOfRange {
                layer,
                layers: self.layers,
            });
        }
        Ok(())
    }

    /// Residual state: `level` 0 is the embedding, `level` `l + 1` is the
    /// output of layer `l`.
    pub fn stream(&self, level: usize, position: usize) -> Result<&[f64]> {
        self.check_layer(level, self.layers + 1)?;
        self.h[level]
            .get(position)
            .map(|v| v.as_slice())
            .ok_or(CoreError::PositionOutOfRange {
                position,
                len: self.seq_len,
            })
    }

    /// Attention-block output of layer `layer` at `position`.
    pub fn attn_out(&self, layer: usize, position: usize) -> Result<&[f64]> {
        self.check_layer(layer, self.layers)?;
        Ok(&self.a[layer][position])
    }

    /// FFN output of layer `layer` at `position`, as added to the stream.
    pub fn ffn_out(&self, layer: usize, position: usize) -> Result<&[f64]> {
        self.check_layer(layer, self.layers)?;
        Ok(&self.u[layer][position])
    }

    /// FFN output before patching.
    pub fn ffn_out_clean(&self, layer: usize, position: usize) -> Result<&[f64]> {
        self.check_layer(layer, self.layers)?;
        Ok(&self.u_clean[layer][position])
    }

    /// Post-activation FFN keys.
    pub fn ffn_keys(&self, layer: usize, position: usize) -> Result<&[f64]> {
        self.check_layer(layer, self.layers)?;
        Ok(&self.m[layer][position])
    }

    /// Attention row of `head` in `layer` for query position `query`
    /// (length `query + 1`, sums to 1).
    pub fn attn_row(&self, layer: usize, head: usize, query: usize) -> Result<&[f64]> {
        self.check_layer(layer, self.layers)?;
        if head >= self.heads {
            return Err(CoreError::InvalidArgument {
                reason: format!("head {head} out of range for {} heads", self.heads),
            });
        }
        Ok(&self.attn[layer][head][query])
    }

    /// Final logits at a position.
    pub fn logits_at(&self, position: usize) -> Result<&[f64]> {
        self.z_final
            .get(position)
            .map(|v| v.as_slice())
            .ok_or(CoreError::PositionOutOfRange {
                position,
                len: self.seq_len,
            })
    }

    /// Final logits at the last (current) position.
    pub fn final_logits(&self) -> &[f64] {
        self.z_final.last().expect("trace has at least one position")
    }

    /// Index of the last position.
    pub fn current_position(&self) -> usize {
        self.seq_len - 1
    }

    /// Patches that were added to FFN outputs at the current position.
    pub fn applied_patches(&self) -> &BTreeMap<usize, Vec<f64>> {
        &self.applied_patches
    }

    /// Maximum deviation from the additive-stream identity
    /// `h_{l+1} = h_l + a_l + u_l` over all layers and positions.
    pub fn additive_identity_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for l in 0..self.layers {
            for t in 0..self.seq_len {
                for i in 0..self.hidden {
                    let dev =
                        (self.h[l + 1][t][i] - (self.h[l][t][i] + self.a[l][t][i] + self.u[l][t][i])).abs();
                    worst = worst.max(dev);
                }
            }
        }
        worst
    }
}
