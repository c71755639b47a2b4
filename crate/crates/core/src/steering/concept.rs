use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Readout, Representation, SoftmaxFamily};
use crate::model::ModelState;

/// Anything that can produce last-position representations for prompts.
pub trait RepresentationSource {
    fn family(&self) -> SoftmaxFamily;

    /// `λ` at the last position of each prompt, in input order.
    fn last_token_representations(&self, prompts: &[Vec<usize>], readout: Readout) -> Result<Vec<Representation>>;
}

impl RepresentationSource for ModelState {
    fn family(&self) -> SoftmaxFamily {
        ModelState::family(self)
    }

    fn last_token_representations(&self, prompts: &[Vec<usize>], readout: Readout) -> Result<Vec<Representation>> {
        // Batch prompts of equal length; results go back in input order.
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            by_len.entry(p.len()).or_default().push(i);
        }
        let mut out: Vec<Option<Representation>> = vec![None; prompts.len()];
        for idx in by_len.values() {
            let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| prompts[i].clone()).collect();
            let reps = self.last_position_lambdas(&seqs, readout)?;
            for (&i, r) in idx.iter().zip(reps) {
                out[i] = Some(r);
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every prompt assigned")).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pole {
    A,
    B,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptMode {
    /// Difference of mean last-token representations over labelled prompts.
    #[default]
    ActivationDiff,
    /// Difference of mean pole embeddings.
    EmbeddingDiff,
}

/// A binary concept: two token poles, optionally with labelled prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub pole_a: Vec<usize>,
    pub pole_b: Vec<usize>,
    pub prompts: Vec<(Vec<usize>, Pole)>,
    pub mode: ConceptMode,
}

impl ConceptSpec {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.pole_a.is_empty() || self.pole_b.is_empty() {
            return Err(Error::Validation(format!("concept '{}' has an empty pole", self.name)));
        }
        if let Some(&t) = self.pole_a.iter().chain(&self.pole_b).find(|&&t| t >= vocab) {
            return Err(Error::Validation(format!(
                "concept '{}' token {t} outside vocabulary {vocab}",
                self.name
            )));
        }
        if self.mode == ConceptMode::ActivationDiff {
            let has = |p: Pole| self.prompts.iter().any(|(s, q)| *q == p && !s.is_empty());
            if !has(Pole::A) || !has(Pole::B) {
                return Err(Error::Validation(format!(
                    "concept '{}' needs non-empty prompts for both poles",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// A unit primal direction and the token set whose mass defines success.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptDirection {
    pub name: String,
    pub v: Vec<f64>,
    /// Sorted, distinct token ids.
    pub target: Vec<usize>,
    pub layer: Readout,
}

impl ConceptDirection {
    /// Normalizes `raw`; a zero vector is a degenerate concept.
    pub fn new(name: impl Into<String>, raw: Vec<f64>, target: Vec<usize>, layer: Readout) -> Result<Self> {
        let name = name.into();
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::DegenerateConcept(format!(
                "concept '{name}' has a zero-norm direction"
            )));
        }
        let mut target = target;
        target.sort_unstable();
        target.dedup();
        if target.is_empty() {
            return Err(Error::Validation(format!("concept '{name}' has an empty target set")));
        }
        Ok(ConceptDirection {
            name,
            v: raw.into_iter().map(|x| x / n).collect(),
            target,
            layer,
        })
    }
}

fn mean(vecs: impl Iterator<Item = Vec<f64>>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for v in vecs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        n += 1;
    }
    acc.iter().map(|a| a / n as f64).collect()
}

/// `v` points from pole b towards pole a; the target set is pole a.
pub fn build_concept(
    source: &dyn RepresentationSource,
    spec: &ConceptSpec,
    layer: Readout,
) -> Result<ConceptDirection> {
    let family = source.family();
    spec.validate(family.vocab())?;
    let d = family.dim();
    let raw: Vec<f64> = match spec.mode {
        ConceptMode::EmbeddingDiff => {
            let ma = mean(spec.pole_a.iter().map(|&t| family.gamma(t).to_vec()), d);
            let mb = mean(spec.pole_b.iter().map(|&t| family.gamma(t).to_vec()), d);
            ma.iter().zip(&mb).map(|(a, b)| a - b).collect()
        }
        ConceptMode::ActivationDiff => {
            let prompts: Vec<Vec<usize>> = spec.prompts.iter().map(|(p, _)| p.clone()).collect();
            let reps = source.last_token_representations(&prompts, layer)?;
            let of = |pole: Pole| {
                reps.iter()
                    .zip(&spec.prompts)
                    .filter(move |(_, (_, q))| *q == pole)
                    .map(|(r, _)| r.lambda.clone())
            };
            let ma = mean(of(Pole::A), d);
            let mb = mean(of(Pole::B), d);
            ma.iter().zip(&mb).map(|(a, b)| a - b).collect()
        }
    };
    ConceptDirection::new(spec.name.clone(), raw, spec.pole_a.clone(), layer)
}
