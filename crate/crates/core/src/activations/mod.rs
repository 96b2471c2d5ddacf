//! Hidden-state capture at three token positions, the backend contract, and
//! activation datasets.

pub mod shard;
#[cfg(feature = "http")]
pub mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatMessage, Decoding};
use crate::error::{Error, Result};
use crate::persona::CharacterProfile;

pub use shard::{read_shard, write_shard, Manifest, Shard};

const INSTRUCTIONS_TXT: &str = include_str!("../../data/instructions.txt");

/// Which token statistic an activation summarizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    LastInputToken,
    MeanInput,
    MeanGenerated,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::LastInputToken, Position::MeanInput, Position::MeanGenerated];

    pub fn as_str(self) -> &'static str {
        match self {
            Position::LastInputToken => "last_input_token",
            Position::MeanInput => "mean_input",
            Position::MeanGenerated => "mean_generated",
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "last_input_token" | "last_token" | "last" => Ok(Position::LastInputToken),
            "mean_input" => Ok(Position::MeanInput),
            "mean_generated" => Ok(Position::MeanGenerated),
            other => Err(Error::InvalidArgument(format!("unknown position `{other}`"))),
        }
    }
}

/// Where an additive intervention is applied along the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPolicy {
    /// Final prompt token during prefill; later tokens see it through context.
    #[default]
    LastInputOnly,
    /// Final prompt token plus every decode step.
    EveryGeneratedToken,
}

/// `h <- h + vector` at the output of `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub layer: usize,
    pub vector: Vec<f32>,
    pub policy: TokenPolicy,
}

/// Raw residual-stream states from one generation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub text: String,
    /// `[layer][prompt token][dim]`
    pub prompt_states: Vec<Vec<Vec<f32>>>,
    /// `[layer][generated token][dim]`, decode-time states.
    pub generated_states: Vec<Vec<Vec<f32>>>,
}

/// A model that exposes post-block residual states and accepts additive
/// interventions.
pub trait ActivationBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn layer_count(&self) -> usize;
    fn hidden_dim(&self) -> usize;

    /// Whether `trace` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }

    fn trace(&self, messages: &[ChatMessage], interventions: &[Intervention], decoding: &Decoding) -> Result<ForwardTrace>;

    fn generate_with_injection(
        &self,
        messages: &[ChatMessage],
        interventions: &[Intervention],
        decoding: &Decoding,
    ) -> Result<String> {
        Ok(self.trace(messages, interventions, decoding)?.text)
    }

    fn generate(&self, messages: &[ChatMessage], decoding: &Decoding) -> Result<String> {
        self.generate_with_injection(messages, &[], decoding)
    }
}

impl<B: ActivationBackend + ?Sized> ActivationBackend for std::sync::Arc<B> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn layer_count(&self) -> usize {
        (**self).layer_count()
    }
    fn hidden_dim(&self) -> usize {
        (**self).hidden_dim()
    }
    fn concurrent_safe(&self) -> bool {
        (**self).concurrent_safe()
    }
    fn trace(&self, messages: &[ChatMessage], interventions: &[Intervention], decoding: &Decoding) -> Result<ForwardTrace> {
        (**self).trace(messages, interventions, decoding)
    }
    fn generate_with_injection(&self, messages: &[ChatMessage], interventions: &[Intervention], decoding: &Decoding) -> Result<String> {
        (**self).generate_with_injection(messages, interventions, decoding)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub character_id: String,
    pub instruction_id: u32,
    pub layer: u32,
    pub position: Position,
    pub vector: Vec<f32>,
    /// Trait totals in canonical order (EXT, EST, AGR, CSN, OPN).
    pub trait_scores: [u32; 5],
}

impl ActivationRecord {
    pub(crate) fn sort_key(&self) -> (&str, u32, u32, Position) {
        (&self.character_id, self.instruction_id, self.layer, self.position)
    }
}

/// The bundled ten instructions.
pub fn default_instructions() -> &'static [String] {
    static INSTRUCTIONS: OnceLock<Vec<String>> = OnceLock::new();
    INSTRUCTIONS.get_or_init(|| {
        INSTRUCTIONS_TXT
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::to_string)
            .collect()
    })
}

pub fn build_collection_prompt(self_description: &str, instruction: &str) -> Result<Vec<ChatMessage>> {
    if self_description.trim().is_empty() {
        return Err(Error::InvalidArgument("self description is empty".into()));
    }
    if instruction.trim().is_empty() {
        return Err(Error::InvalidArgument("instruction is empty".into()));
    }
    Ok(vec![
        ChatMessage::system(format!("Respond in a manner consistent with: {self_description}\nBe concise.")),
        ChatMessage::user(instruction),
    ])
}

/// Per-layer position statistics of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPositions {
    pub last_input: Vec<f32>,
    pub mean_input: Vec<f32>,
    /// `None` when nothing was generated.
    pub mean_generated: Option<Vec<f32>>,
}

impl LayerPositions {
    pub fn get(&self, p: Position) -> Result<&[f32]> {
        match p {
            Position::LastInputToken => Ok(&self.last_input),
            Position::MeanInput => Ok(&self.mean_input),
            Position::MeanGenerated => self.mean_generated.as_deref().ok_or(Error::EmptyGeneration),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Captured {
    pub text: String,
    pub layers: Vec<LayerPositions>,
}

fn mean(states: &[Vec<f32>], d: usize) -> Vec<f32> {
    let mut acc = vec![0f64; d];
    for s in states {
        for (a, &x) in acc.iter_mut().zip(s) {
            *a += f64::from(x);
        }
    }
    let n = states.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// Reduces a trace to the three position statistics per layer.
pub fn reduce_trace(trace: &ForwardTrace, layers: usize, d: usize) -> Result<Vec<LayerPositions>> {
    if trace.prompt_states.len() != layers {
        return Err(Error::Backend(format!(
            "trace has {} layers, backend declares {layers}",
            trace.prompt_states.len()
        )));
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let prompt = &trace.prompt_states[l];
        let Some(last) = prompt.last() else {
            return Err(Error::Backend("empty prompt".into()));
        };
        for s in prompt {
            if s.len() != d {
                return Err(Error::DimensionMismatch { expected: d, actual: s.len() });
            }
        }
        let generated = trace.generated_states.get(l).map(Vec::as_slice).unwrap_or(&[]);
        out.push(LayerPositions {
            last_input: last.clone(),
            mean_input: mean(prompt, d),
            mean_generated: (!generated.is_empty()).then(|| mean(generated, d)),
        });
    }
    Ok(out)
}

pub fn capture_messages<B: ActivationBackend + ?Sized>(
    backend: &B,
    messages: &[ChatMessage],
    interventions: &[Intervention],
    decoding: &Decoding,
) -> Result<Captured> {
    let trace = backend.trace(messages, interventions, decoding)?;
    let layers = reduce_trace(&trace, backend.layer_count(), backend.hidden_dim())?;
    Ok(Captured { text: trace.text, layers })
}

/// Collects `L x 3` records for one character and instruction. When nothing is
/// generated the mean-generated rows are skipped (and logged); the other two
/// positions are still emitted.
pub fn capture<B: ActivationBackend + ?Sized>(
    backend: &B,
    profile: &CharacterProfile,
    instruction_id: u32,
    instructions: &[String],
    decoding: &Decoding,
) -> Result<Vec<ActivationRecord>> {
    let instruction = instructions
        .get(instruction_id as usize)
        .ok_or_else(|| Error::InvalidArgument(format!("instruction {instruction_id} not in the instruction set")))?;
    let messages = build_collection_prompt(&profile.description(), instruction)?;
    let captured = capture_messages(backend, &messages, &[], decoding)?;
    let scores = profile.totals();
    let mut records = Vec::with_capacity(captured.layers.len() * 3);
    for (layer, lp) in captured.layers.into_iter().enumerate() {
        for position in Position::ALL {
            let vector = match position {
                Position::LastInputToken => lp.last_input.clone(),
                Position::MeanInput => lp.mean_input.clone(),
                Position::MeanGenerated => match &lp.mean_generated {
                    Some(v) => v.clone(),
                    None => {
                        if layer == 0 {
                            log::warn!(
                                "{} instruction {instruction_id}: {}; skipping mean_generated rows",
                                profile.character.id,
                                Error::EmptyGeneration
                            );
                        }
                        continue;
                    }
                },
            };
            records.push(ActivationRecord {
                character_id: profile.character.id.clone(),
                instruction_id,
                layer: layer as u32,
                position,
                vector,
                trait_scores: scores,
            });
        }
    }
    Ok(records)
}

/// Captures every (profile, instruction) pair. Runs in parallel when the
/// backend allows concurrent calls.
pub fn collect<B: ActivationBackend + ?Sized>(
    backend: &B,
    profiles: &[CharacterProfile],
    instruction_ids: &[u32],
    instructions: &[String],
    decoding: &Decoding,
) -> Result<Vec<ActivationRecord>> {
    let jobs: Vec<(&CharacterProfile, u32)> = profiles
        .iter()
        .flat_map(|p| instruction_ids.iter().map(move |&i| (p, i)))
        .collect();
    let run = |(p, i): &(&CharacterProfile, u32)| capture(backend, p, *i, instructions, decoding);
    let chunks: Vec<Vec<ActivationRecord>> = if backend.concurrent_safe() {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    Ok(chunks.into_iter().flatten().collect())
}
