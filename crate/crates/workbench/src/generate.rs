//! Synthetic conflict-set generation.
//!
//! One implanted model hosts every fact of a set; examples reuse facts
//! with varying context objects, so entity-swap conflicts and agreeing
//! contexts share the same weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use corect_core::corect::ConflictPrompt;
use corect_core::model::{implant_model, Activation, FactSpec, ModelConfig, ModelWeights};

use crate::error::{Result, WorkbenchError};

/// Token-id layout of the synthetic vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub n_subjects: usize,
    pub n_relations: usize,
    pub n_entities: usize,
}

impl VocabLayout {
    pub fn subject(&self, i: usize) -> usize {
        3 + i
    }

    pub fn relation(&self, i: usize) -> usize {
        3 + self.n_subjects + i
    }

    pub fn entity(&self, i: usize) -> usize {
        3 + self.n_subjects + self.n_relations + i
    }

    pub fn vocab_size(&self) -> usize {
        3 + self.n_subjects + self.n_relations + self.n_entities
    }
}

/// Everything needed to build one implanted conflict testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq: usize,
    pub n_facts: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    pub copy_layer: usize,
    pub memory_layer_min: usize,
    pub memory_layer_max: usize,
    pub copy_strength: f64,
    pub memory_strength_min: f64,
    pub memory_strength_max: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            hidden: 160,
            heads: 4,
            ffn: 80,
            max_seq: 12,
            n_facts: 30,
            n_entities: 34,
            n_relations: 8,
            copy_layer: 2,
            memory_layer_min: 5,
            memory_layer_max: 10,
            copy_strength: 1.0,
            memory_strength_min: 3.0,
            memory_strength_max: 4.2,
        }
    }
}

impl GeneratorConfig {
    /// Smaller testbed for fast runs.
    pub fn small() -> Self {
        Self {
            layers: 10,
            hidden: 96,
            heads: 4,
            ffn: 48,
            max_seq: 12,
            n_facts: 6,
            n_entities: 10,
            n_relations: 3,
            copy_layer: 2,
            memory_layer_min: 4,
            memory_layer_max: 8,
            copy_strength: 1.0,
            memory_strength_min: 3.0,
            memory_strength_max: 4.2,
        }
    }

    pub fn layout(&self) -> VocabLayout {
        VocabLayout {
            n_subjects: self.n_facts,
            n_relations: self.n_relations,
            n_entities: self.n_entities,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            ffn: self.ffn,
            vocab: self.layout().vocab_size(),
            max_seq: self.max_seq,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_facts == 0 {
            return Err(WorkbenchError::validation("n_facts must be >= 1"));
        }
        if self.n_entities < 2 {
            return Err(WorkbenchError::validation(
                "n_entities must be >= 2 so conflicting objects exist",
            ));
        }
        if self.n_relations == 0 {
            return Err(WorkbenchError::validation("n_relations must be >= 1"));
        }
        if self.memory_layer_min > self.memory_layer_max {
            return Err(WorkbenchError::validation("memory layer band is empty"));
        }
        if self.memory_layer_min <= self.copy_layer {
            return Err(WorkbenchError::validation(
                "memory layers must sit above the copy layer",
            ));
        }
        if self.memory_strength_min > self.memory_strength_max {
            return Err(WorkbenchError::validation("memory strength band is empty"));
        }
        self.model_config()
            .validate()
            .map_err(WorkbenchError::from)?;
        Ok(())
    }

    /// Draw the fact set for this seed.
    pub fn draw_facts(&self, rng: &mut ChaCha20Rng) -> Vec<FactSpec> {
        let layout = self.layout();
        (0..self.n_facts)
            .map(|i| {
                let memory_layer =
                    rng.gen_range(self.memory_layer_min..=self.memory_layer_max);
                let memory_strength =
                    rng.gen_range(self.memory_strength_min..=self.memory_strength_max);
                FactSpec {
                    subject: layout.subject(i),
                    relation: layout.relation(rng.gen_range(0..self.n_relations)),
                    parametric_answer: layout.entity(i % self.n_entities),
                    memory_layer,
                    memory_strength,
                    copy_layer: self.copy_layer,
                    copy_strength: self.copy_strength,
                }
            })
            .collect()
    }
}

/// Whether the example's context agrees with the implanted fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleKind {
    Conflict,
    NoConflict,
}

/// One evaluation instance over the shared implanted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictExample {
    pub example_id: usize,
    pub fact: FactSpec,
    pub prompt: ConflictPrompt,
    /// The answer the context supports (what a faithful model should say).
    pub gold: usize,
    /// The implanted parametric answer.
    pub parametric: usize,
    pub kind: ExampleKind,
}

/// A generated conflict set with its shared implanted model.
pub struct ConflictSet {
    pub examples: Vec<ConflictExample>,
    pub weights: ModelWeights,
    pub facts: Vec<FactSpec>,
}

/// Build one implanted model and `n` examples over it. Deterministic under
/// `seed`.
pub fn generate_conflict_set(
    cfg: &GeneratorConfig,
    n: usize,
    seed: u64,
    conflict_fraction: f64,
) -> Result<ConflictSet> {
    cfg.validate()?;
    if n == 0 {
        return Err(WorkbenchError::validation("need at least one example"));
    }
    if !(0.0..=1.0).contains(&conflict_fraction) {
        return Err(WorkbenchError::validation(
            "conflict_fraction must be in [0, 1]",
        ));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let facts = cfg.draw_facts(&mut rng);
    let weights = implant_model(cfg.model_config(), &facts, seed ^ 0x636f7265)?;

    let layout = cfg.layout();
    let n_conflicts = (conflict_fraction * n as f64).round() as usize;
    let mut kinds: Vec<ExampleKind> = (0..n)
        .map(|i| {
            if i < n_conflicts {
                ExampleKind::Conflict
            } else {
                ExampleKind::NoConflict
            }
        })
        .collect();
    kinds.shuffle(&mut rng);

    let mut examples = Vec::with_capacity(n);
    for (example_id, kind) in kinds.into_iter().enumerate() {
        let fact = facts[rng.gen_range(0..facts.len())].clone();
        let object = match kind {
            ExampleKind::NoConflict => fact.parametric_answer,
            ExampleKind::Conflict => loop {
                let candidate = layout.entity(rng.gen_range(0..cfg.n_entities));
                if candidate != fact.parametric_answer {
                    break candidate;
                }
            },
        };
        let prompt = fact.conflict_prompt(object)?;
        examples.push(ConflictExample {
            example_id,
            fact: fact.clone(),
            prompt,
            gold: object,
            parametric: fact.parametric_answer,
            kind,
        });
    }
    Ok(ConflictSet {
        examples,
        weights,
        facts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let cfg = GeneratorConfig::small();
        let a = generate_conflict_set(&cfg, 12, 5, 0.5).unwrap();
        let b = generate_conflict_set(&cfg, 12, 5, 0.5).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_eq!(a.weights, b.weights);
        let c = generate_conflict_set(&cfg, 12, 6, 0.5).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn conflict_fraction_respected_exactly() {
        let cfg = GeneratorConfig::small();
        let set = generate_conflict_set(&cfg, 20, 9, 0.25).unwrap();
        let conflicts = set
            .examples
            .iter()
            .filter(|e| e.kind == ExampleKind::Conflict)
            .count();
        assert_eq!(conflicts, 5);
        for e in &set.examples {
            match e.kind {
                ExampleKind::Conflict => assert_ne!(e.gold, e.parametric),
                ExampleKind::NoConflict => assert_eq!(e.gold, e.parametric),
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = GeneratorConfig::small();
        assert!(generate_conflict_set(&cfg, 0, 1, 0.5).is_err());
        assert!(generate_conflict_set(&cfg, 5, 1, 1.5).is_err());
        let mut bad = GeneratorConfig::small();
        bad.n_entities = 1;
        assert!(generate_conflict_set(&bad, 5, 1, 0.5).is_err());
    }
}
