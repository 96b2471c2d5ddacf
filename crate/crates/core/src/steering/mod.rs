//! Activation addition `h <- h + alpha * w`, the forced-choice harness and
//! alpha sweeps.

pub mod forced_choice;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationBackend, Intervention, Position, TokenPolicy};
use crate::chat::{ChatMessage, Decoding};
use crate::directions::{DirectionSet, Method};
use crate::error::{Error, Result};
use crate::psychometrics::Trait;

pub use forced_choice::{
    build_forced_choice_prompt, parse_forced_choice, ForcedChoiceOutcome, ForcedChoiceTask, Polarity, Statement,
};

pub const DEFAULT_ALPHA_MAX: f64 = 0.4;
pub const SWEEP_SCHEMA_VERSION: &str = "persona-probe/sweep/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringEntry {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub alpha: f64,
    /// `None` means every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub entries: Vec<SteeringEntry>,
    pub token_policy: TokenPolicy,
    /// Position and method of the fitted directions used as steering vectors.
    pub position: Position,
    pub method: Method,
    /// Use `w / |w|` instead of the raw regression weights.
    pub normalize: bool,
    pub alpha_max: f64,
    pub allow_unsafe_alpha: bool,
}

impl Default for SteeringSpec {
    fn default() -> Self {
        SteeringSpec {
            entries: Vec::new(),
            token_policy: TokenPolicy::LastInputOnly,
            position: Position::MeanInput,
            method: Method::Regression,
            normalize: false,
            alpha_max: DEFAULT_ALPHA_MAX,
            allow_unsafe_alpha: false,
        }
    }
}

pub fn check_alpha(alpha: f64, alpha_max: f64, allow_unsafe: bool) -> Result<()> {
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha {alpha} is not finite")));
    }
    if !allow_unsafe && alpha.abs() > alpha_max {
        return Err(Error::AlphaOutOfRange { alpha, limit: alpha_max });
    }
    Ok(())
}

impl SteeringSpec {
    pub fn single(trait_: Trait, alpha: f64) -> Self {
        SteeringSpec {
            entries: vec![SteeringEntry {
                trait_,
                alpha,
                layers: None,
            }],
            ..SteeringSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_max.is_nan() || self.alpha_max <= 0.0 {
            return Err(Error::InvalidArgument(format!("alpha_max must be positive, got {}", self.alpha_max)));
        }
        for e in &self.entries {
            check_alpha(e.alpha, self.alpha_max, self.allow_unsafe_alpha)?;
        }
        Ok(())
    }

    /// One intervention per (entry, layer), vector `alpha * w`.
    pub fn interventions(&self, directions: &DirectionSet, layer_count: usize, hidden_dim: usize) -> Result<Vec<Intervention>> {
        self.validate()?;
        let mut out = Vec::new();
        for e in &self.entries {
            let available = directions.layer_vectors(e.trait_, self.position, self.method);
            let layers: Vec<u32> = match &e.layers {
                Some(l) => l.clone(),
                None => (0..layer_count as u32).collect(),
            };
            for l in layers {
                if l as usize >= layer_count {
                    return Err(Error::InvalidArgument(format!("layer {l} >= backend layer count {layer_count}")));
                }
                let w = available.get(&l).ok_or_else(|| {
                    Error::InvalidArgument(format!("no {} {} direction for {} at layer {l}", self.method, self.position, e.trait_))
                })?;
                if w.len() != hidden_dim {
                    return Err(Error::DimensionMismatch {
                        expected: hidden_dim,
                        actual: w.len(),
                    });
                }
                let scale = if self.normalize {
                    let n = crate::directions::linalg::norm(w);
                    if n == 0.0 {
                        return Err(Error::ZeroVector);
                    }
                    e.alpha / n
                } else {
                    e.alpha
                };
                out.push(Intervention {
                    layer: l as usize,
                    vector: w.iter().map(|&x| (scale * x) as f32).collect(),
                    policy: self.token_policy,
                });
            }
        }
        Ok(out)
    }
}

fn check_model<B: ActivationBackend + ?Sized>(backend: &B, directions: &DirectionSet) -> Result<()> {
    if directions.model_id != backend.model_id() {
        return Err(Error::ModelMismatch {
            directions: directions.model_id.clone(),
            backend: backend.model_id().to_string(),
        });
    }
    Ok(())
}

pub fn steer_generate<B: ActivationBackend + ?Sized>(
    backend: &B,
    messages: &[ChatMessage],
    spec: &SteeringSpec,
    directions: &DirectionSet,
    decoding: &Decoding,
) -> Result<String> {
    check_model(backend, directions)?;
    let interventions = spec.interventions(directions, backend.layer_count(), backend.hidden_dim())?;
    backend.generate_with_injection(messages, &interventions, decoding)
}

/// `steps` evenly spaced values from `min` to `max` inclusive.
pub fn linear_grid(min: f64, max: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("grid needs at least one step".into()));
    }
    if steps == 1 {
        return Ok(vec![min]);
    }
    Ok((0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            min * (1.0 - t) + max * t
        })
        .collect())
}

pub fn validate_grid(grid: &[f64], alpha_max: f64, allow_unsafe: bool) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty alpha grid".into()));
    }
    for &a in grid {
        check_alpha(a, alpha_max, allow_unsafe)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("alpha grid must be strictly increasing".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub fraction_positive: f64,
    pub fraction_negative: f64,
    pub fraction_invalid: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub model_id: String,
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub method: Method,
    pub position: Position,
    pub token_policy: TokenPolicy,
    pub normalize: bool,
    pub persona: bool,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: String,
    pub grid: Vec<f64>,
    pub outcomes: Vec<SweepPoint>,
    pub metadata: SweepMetadata,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "alpha,frac_pos,frac_neg,frac_invalid")?;
        for p in &self.outcomes {
            writeln!(w, "{},{},{},{}", p.alpha, p.fraction_positive, p.fraction_negative, p.fraction_invalid)?;
        }
        Ok(())
    }
}

/// Runs the forced-choice task at each alpha. `template` supplies the trait
/// (its single entry), layers, policy and direction selection; the entry's
/// alpha is replaced by each grid value. Repeat `r` uses presentation seed
/// `task.seed + r`.
pub fn alpha_sweep<B: ActivationBackend + ?Sized>(
    backend: &B,
    task: &ForcedChoiceTask,
    directions: &DirectionSet,
    template: &SteeringSpec,
    grid: &[f64],
    repeats: usize,
    decoding: &Decoding,
) -> Result<SweepResult> {
    check_model(backend, directions)?;
    task.validate()?;
    validate_grid(grid, template.alpha_max, template.allow_unsafe_alpha)?;
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }
    let [entry] = template.entries.as_slice() else {
        return Err(Error::InvalidArgument("sweep template needs exactly one steering entry".into()));
    };

    let run = |&alpha: &f64| -> Result<SweepPoint> {
        let mut spec = template.clone();
        spec.entries[0].alpha = alpha;
        let interventions = spec.interventions(directions, backend.layer_count(), backend.hidden_dim())?;
        let (mut pos, mut neg, mut inv) = (0.0, 0.0, 0.0);
        for r in 0..repeats {
            let t = task.with_seed(task.seed.wrapping_add(r as u64));
            let messages = build_forced_choice_prompt(&t);
            let text = backend.generate_with_injection(&messages, &interventions, decoding)?;
            let o = parse_forced_choice(&text, &t);
            pos += o.fraction_positive;
            neg += o.fraction_negative;
            inv += o.fraction_invalid;
        }
        let n = repeats as f64;
        Ok(SweepPoint {
            alpha,
            fraction_positive: pos / n,
            fraction_negative: neg / n,
            fraction_invalid: inv / n,
            repeats,
        })
    };
    let outcomes: Vec<SweepPoint> = if backend.concurrent_safe() {
        grid.par_iter().map(run).collect::<Result<_>>()?
    } else {
        grid.iter().map(run).collect::<Result<_>>()?
    };
    Ok(SweepResult {
        schema_version: SWEEP_SCHEMA_VERSION.into(),
        grid: grid.to_vec(),
        outcomes,
        metadata: SweepMetadata {
            model_id: backend.model_id().to_string(),
            trait_: entry.trait_,
            method: template.method,
            position: template.position,
            token_policy: template.token_policy,
            normalize: template.normalize,
            persona: task.persona.is_some(),
            repeats,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_exact() {
        let g = linear_grid(-0.4, 0.4, 17).unwrap();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], -0.4);
        assert_eq!(g[16], 0.4);
        assert!(validate_grid(&g, 0.4, false).is_ok());
        assert_eq!(linear_grid(0.0, 0.0, 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(validate_grid(&[-0.4, 0.5], 0.4, false), Err(Error::AlphaOutOfRange { .. })));
        assert!(validate_grid(&[-0.4, 0.5], 0.4, true).is_ok());
        assert!(matches!(validate_grid(&[0.1, 0.1], 0.4, false), Err(Error::InvalidArgument(_))));
        assert!(validate_grid(&[], 0.4, false).is_err());
    }

    #[test]
    fn alpha_clamp() {
        let spec = SteeringSpec::single(Trait::Extraversion, 0.9);
        assert!(matches!(spec.validate(), Err(Error::AlphaOutOfRange { alpha, limit }) if alpha == 0.9 && limit == 0.4));
        let spec = SteeringSpec {
            allow_unsafe_alpha: true,
            ..spec
        };
        assert!(spec.validate().is_ok());
        assert!(SteeringSpec::single(Trait::Extraversion, -0.4).validate().is_ok());
    }
}
