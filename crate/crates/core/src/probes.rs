//! Projection onto trait directions and ROC evaluation on trait adjectives.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{capture_messages, ActivationBackend, Position};
use crate::chat::{ChatMessage, Decoding};
use crate::directions::{DirectionSet, Method, TraitDirection};
use crate::error::{Error, Result};
use crate::psychometrics::Trait;

const ADJECTIVES_JSON: &str = include_str!("../data/adjectives.json");
const MIN_ADJECTIVES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjectiveSet {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

#[derive(Deserialize)]
struct Lists {
    positive: Vec<String>,
    negative: Vec<String>,
}

impl AdjectiveSet {
    /// Lowercases, trims and checks the lists are disjoint with at least five
    /// entries each.
    pub fn new(trait_: Trait, positive: Vec<String>, negative: Vec<String>) -> Result<Self> {
        let canon = |v: Vec<String>| -> Vec<String> { v.into_iter().map(|a| a.trim().to_lowercase()).collect() };
        let set = AdjectiveSet {
            trait_,
            positive: canon(positive),
            negative: canon(negative),
        };
        for (name, list) in [("positive", &set.positive), ("negative", &set.negative)] {
            if list.len() < MIN_ADJECTIVES {
                return Err(Error::InvalidArgument(format!(
                    "{trait_} {name} list has {} adjectives, need at least {MIN_ADJECTIVES}",
                    list.len()
                )));
            }
            if list.iter().any(String::is_empty) {
                return Err(Error::InvalidArgument(format!("{trait_} {name} list has an empty adjective")));
            }
        }
        if let Some(a) = set.positive.iter().find(|a| set.negative.contains(a)) {
            return Err(Error::InvalidArgument(format!("`{a}` is both positive and negative for {trait_}")));
        }
        Ok(set)
    }
}

/// Parses `{trait: {positive: [...], negative: [...]}}`.
pub fn parse_adjectives_json(text: &str) -> Result<Vec<AdjectiveSet>> {
    let raw: BTreeMap<String, Lists> = serde_json::from_str(text)?;
    let mut sets = raw
        .into_iter()
        .map(|(k, l)| AdjectiveSet::new(k.parse()?, l.positive, l.negative))
        .collect::<Result<Vec<_>>>()?;
    sets.sort_by_key(|s| s.trait_.index());
    Ok(sets)
}

pub fn read_adjectives(path: &Path) -> Result<Vec<AdjectiveSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjectives_json(&text)
}

/// Bundled marker adjectives, one set per trait in canonical order.
pub fn default_adjectives() -> Vec<AdjectiveSet> {
    parse_adjectives_json(ADJECTIVES_JSON).expect("bundled adjectives are valid")
}

pub fn build_adjective_prompt(adjective: &str, instruction: &str) -> Result<Vec<ChatMessage>> {
    let adjective = adjective.trim();
    if adjective.is_empty() {
        return Err(Error::InvalidArgument("adjective is empty".into()));
    }
    Ok(vec![
        ChatMessage::system(format!(
            "Respond like a person with {} personality would.\nBe concise.",
            adjective.to_lowercase()
        )),
        ChatMessage::user(instruction),
    ])
}

/// `w . a`, plus `b` when `include_bias`.
pub fn project<T: Copy + Into<f64>>(vector: &[T], direction: &TraitDirection, include_bias: bool) -> Result<f64> {
    if vector.len() != direction.w.len() {
        return Err(Error::DimensionMismatch {
            expected: direction.w.len(),
            actual: vector.len(),
        });
    }
    let p: f64 = vector.iter().zip(&direction.w).map(|(&a, w)| a.into() * w).sum();
    Ok(if include_bias { p + direction.b } else { p })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// (false-positive rate, true-positive rate), from (0,0) to (1,1).
    pub curve: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Mann-Whitney AUC with ties counted one half, plus the ROC curve.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<RocCurve> {
    if pos.is_empty() {
        return Err(Error::EmptyClass("positive"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyClass("negative"));
    }
    if pos.iter().chain(neg).any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut pooled: Vec<(f64, bool)> = pos.iter().map(|&x| (x, true)).chain(neg.iter().map(|&x| (x, false))).collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    // Descending sweep: each block of tied scores moves the curve diagonally.
    // Twice the area under the curve accumulates exactly in integers.
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0usize, 0usize);
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        twice_area += (dfp as u128) * (2 * tp as u128 + dtp as u128);
        tp += dtp;
        fp += dfp;
        curve.push((fp as f64 / nn, tp as f64 / np));
        i = j;
    }
    Ok(RocCurve {
        auc: twice_area as f64 / (2.0 * np * nn),
        curve,
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub layer: u32,
    pub position: Position,
    #[serde(flatten)]
    pub roc: RocCurve,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Which fitted direction to project onto.
    pub direction_position: Position,
    pub method: Method,
    /// `None` evaluates every layer that has a direction.
    pub layers: Option<Vec<u32>>,
    pub include_bias: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            direction_position: Position::LastInputToken,
            method: Method::Regression,
            layers: None,
            include_bias: false,
        }
    }
}

/// Per-layer ROC of last-input-token projections, positive-loading
/// adjectives as the positive class. Every adjective is paired with every
/// instruction.
pub fn adjective_sweep<B: ActivationBackend + ?Sized>(
    backend: &B,
    directions: &DirectionSet,
    adjectives: &AdjectiveSet,
    instructions: &[String],
    opts: &SweepOptions,
    decoding: &Decoding,
) -> Result<Vec<RocResult>> {
    if directions.model_id != backend.model_id() {
        return Err(Error::ModelMismatch {
            directions: directions.model_id.clone(),
            backend: backend.model_id().to_string(),
        });
    }
    if instructions.is_empty() {
        return Err(Error::InvalidArgument("no instructions".into()));
    }
    let available = directions.layer_vectors(adjectives.trait_, opts.direction_position, opts.method);
    let layers: Vec<u32> = match &opts.layers {
        Some(l) => l.clone(),
        None => available.keys().copied().collect(),
    };
    if layers.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {} {} directions for {}",
            opts.method, opts.direction_position, adjectives.trait_
        )));
    }
    let dirs: Vec<&TraitDirection> = layers
        .iter()
        .map(|&l| {
            if l as usize >= backend.layer_count() {
                return Err(Error::InvalidArgument(format!("layer {l} >= backend layer count {}", backend.layer_count())));
            }
            directions
                .get(adjectives.trait_, l, opts.direction_position, opts.method)
                .ok_or_else(|| Error::InvalidArgument(format!("no direction for {} layer {l}", adjectives.trait_)))
        })
        .collect::<Result<_>>()?;

    // Only the prompt is needed.
    let decoding = Decoding {
        max_tokens: 0,
        ..*decoding
    };
    let jobs: Vec<(bool, &str, &str)> = adjectives
        .positive
        .iter()
        .map(|a| (true, a.as_str()))
        .chain(adjectives.negative.iter().map(|a| (false, a.as_str())))
        .flat_map(|(is_pos, a)| instructions.iter().map(move |i| (is_pos, a, i.as_str())))
        .collect();
    let run = |&(is_pos, adj, instr): &(bool, &str, &str)| -> Result<(bool, Vec<f64>)> {
        let messages = build_adjective_prompt(adj, instr)?;
        let captured = capture_messages(backend, &messages, &[], &decoding)?;
        let scores = layers
            .iter()
            .zip(&dirs)
            .map(|(&l, d)| project(&captured.layers[l as usize].last_input, d, opts.include_bias))
            .collect::<Result<_>>()?;
        Ok((is_pos, scores))
    };
    let projected: Vec<(bool, Vec<f64>)> = if backend.concurrent_safe() {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };

    layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let pos: Vec<f64> = projected.iter().filter(|p| p.0).map(|p| p.1[k]).collect();
            let neg: Vec<f64> = projected.iter().filter(|p| !p.0).map(|p| p.1[k]).collect();
            Ok(RocResult {
                trait_: adjectives.trait_,
                layer,
                position: Position::LastInputToken,
                roc: auc(&pos, &neg)?,
            })
        })
        .collect()
}

/// Plot data with header `fpr,tpr,layer,trait`.
pub fn write_roc_csv<W: Write>(mut w: W, results: &[RocResult]) -> std::io::Result<()> {
    writeln!(w, "fpr,tpr,layer,trait")?;
    for r in results {
        for (fpr, tpr) in &r.roc.curve {
            writeln!(w, "{fpr},{tpr},{},{}", r.layer, r.trait_.code())?;
        }
    }
    Ok(())
}
