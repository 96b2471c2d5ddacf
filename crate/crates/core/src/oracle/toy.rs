//! A deterministic stand-in for a transformer.
//!
//! Tokens are whitespace words plus role markers. Trait adjectives carry a
//! loading `+-u_t`; everything else is neutral. Every prompt token at layer
//! `l` sees the whole-prompt persona feature:
//!
//! ```text
//! h[l][t] = g_l * (persona_gain * P + C_t) + sum_{l' <= l} inj[l'][t] + sigma * eta(l, prefix_t)
//! ```
//!
//! with `P` the summed loadings of the prompt, `g_l = (l + 1) / L`, `C_t` the
//! injections made at earlier tokens (carried context) and `eta` seeded by the
//! token prefix. Prompts listing at least two known forced-choice statements
//! are answered by ranking `polarity * u . h[L-1][last] + prior`; anything
//! else gets a short greedy walk over a neutral vocabulary.

use std::collections::HashMap;
use std::hash::Hasher;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PlantedModel;
use crate::activations::{ActivationBackend, ForwardTrace, Intervention, TokenPolicy};
use crate::chat::{ChatMessage, Decoding, Role};
use crate::error::{Error, Result};
use crate::probes::default_adjectives;
use crate::psychometrics::Trait;
use crate::steering::{ForcedChoiceTask, Polarity};

const NEUTRAL_VOCAB: [&str; 24] = [
    "the", "a", "plan", "day", "idea", "market", "color", "list", "word", "note", "time", "path", "step", "place", "thing",
    "story", "answer", "choice", "point", "way", "simple", "clear", "good", "fine",
];

const POSITIVE_PRIORS: [f64; 5] = [0.9, 0.5, 0.1, -0.3, -0.7];
const NEGATIVE_PRIORS: [f64; 5] = [0.7, 0.3, -0.1, -0.5, -0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub d: usize,
    pub layers: usize,
    /// Per-component state noise.
    pub sigma: f64,
    /// Weight of prompt persona features relative to injected offsets.
    pub persona_gain: f64,
    pub seed: u64,
    /// Scale of the fixed per-statement preferences.
    pub prior_spread: f64,
    /// Free-generation length cap.
    pub response_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d: 64,
            layers: 8,
            sigma: 0.0,
            persona_gain: 1.0,
            seed: 0,
            prior_spread: 1.0,
            response_len: 12,
        }
    }
}

struct FcStatement {
    key: String,
    text: String,
    sign: f64,
    prior: f64,
}

pub struct ToyBackend {
    cfg: ToyConfig,
    model_id: String,
    planted: PlantedModel,
    lexicon: HashMap<String, (usize, f64)>,
    vocab: Vec<(&'static str, Vec<f64>)>,
    fc_trait: Trait,
    statements: Vec<FcStatement>,
}

struct Token {
    text: String,
    lex: Option<(usize, f64)>,
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn normalize_text(s: &str) -> String {
    s.split_whitespace().map(normalize_word).filter(|w| !w.is_empty()).collect::<Vec<_>>().join(" ")
}

fn hash_parts(parts: &[u64]) -> u64 {
    let mut h = FnvHasher::default();
    for p in parts {
        h.write_u64(*p);
    }
    h.finish()
}

impl ToyBackend {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.layers == 0 {
            return Err(Error::InvalidArgument("toy backend needs at least one layer".into()));
        }
        if !(cfg.persona_gain.is_finite() && cfg.prior_spread.is_finite() && cfg.prior_spread >= 0.0) {
            return Err(Error::InvalidArgument("toy gains must be finite".into()));
        }
        let planted = PlantedModel::new(cfg.d, 5, cfg.sigma, cfg.seed)?;
        let mut lexicon = HashMap::new();
        for set in default_adjectives() {
            for a in &set.positive {
                lexicon.insert(a.clone(), (set.trait_.index(), 1.0));
            }
            for a in &set.negative {
                lexicon.insert(a.clone(), (set.trait_.index(), -1.0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x70c4_b0ca);
        let vocab = NEUTRAL_VOCAB
            .iter()
            .map(|&w| {
                let v: Vec<f64> = (0..cfg.d).map(|_| rng.sample(StandardNormal)).collect();
                let n = v.iter().map(|x: &f64| x * x).sum::<f64>().sqrt();
                (w, v.into_iter().map(|x| x / n).collect())
            })
            .collect();
        let task = ForcedChoiceTask::extraversion();
        let mut statements = Vec::new();
        for (polarity, priors) in [(Polarity::Positive, POSITIVE_PRIORS), (Polarity::Negative, NEGATIVE_PRIORS)] {
            let mut texts: Vec<&str> = task
                .statements
                .iter()
                .filter(|s| s.polarity == polarity)
                .map(|s| s.text.as_str())
                .collect();
            texts.sort_unstable();
            for (t, p) in texts.into_iter().zip(priors) {
                statements.push(FcStatement {
                    key: normalize_text(t),
                    text: t.to_string(),
                    sign: if polarity == Polarity::Positive { 1.0 } else { -1.0 },
                    prior: p * cfg.prior_spread,
                });
            }
        }
        let model_id = format!("toy-d{}-l{}-seed{}", cfg.d, cfg.layers, cfg.seed);
        Ok(ToyBackend {
            cfg,
            model_id,
            planted,
            lexicon,
            vocab,
            fc_trait: task.trait_,
            statements,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn planted(&self) -> &PlantedModel {
        &self.planted
    }

    /// Unit loading direction for a trait.
    pub fn trait_direction(&self, t: Trait) -> &[f64] {
        &self.planted.traits[t.index()]
    }

    fn tokenize(&self, messages: &[ChatMessage]) -> Vec<Token> {
        let mut out = Vec::new();
        for m in messages {
            out.push(Token {
                text: format!("<|{}|>", m.role.as_str()),
                lex: None,
            });
            for w in m.content.split_whitespace() {
                let text = normalize_word(w);
                let lex = self.lexicon.get(&text).copied();
                out.push(Token { text, lex });
            }
        }
        out.push(Token {
            text: "<|assistant|>".into(),
            lex: None,
        });
        out
    }

    fn gain(&self, l: usize) -> f64 {
        (l + 1) as f64 / self.cfg.layers as f64
    }

    fn noise(&self, layer: usize, prefix: u64) -> Option<Vec<f64>> {
        if self.cfg.sigma == 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash_parts(&[self.cfg.seed, layer as u64, prefix]));
        Some((0..self.cfg.d).map(|_| self.cfg.sigma * rng.sample::<f64, _>(StandardNormal)).collect())
    }

    /// States of one token at every layer. `own` lists this token's
    /// injections as (layer, vector).
    fn token_states(&self, base: &[f64], own: &[(usize, &[f32])], prefix: u64) -> Vec<Vec<f32>> {
        let d = self.cfg.d;
        let mut injected = vec![0.0f64; d];
        let mut out = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            for (il, v) in own {
                if *il == l {
                    injected.iter_mut().zip(v.iter()).for_each(|(a, &x)| *a += f64::from(x));
                }
            }
            let g = self.gain(l);
            let noise = self.noise(l, prefix);
            out.push(
                (0..d)
                    .map(|k| {
                        let n = noise.as_ref().map_or(0.0, |v| v[k]);
                        (g * base[k] + injected[k] + n) as f32
                    })
                    .collect(),
            );
        }
        out
    }

    fn forced_choice_lines(&self, user: &str, last_top: &[f32]) -> Option<Vec<String>> {
        let key = normalize_text(user);
        let present: Vec<&FcStatement> = self.statements.iter().filter(|s| key.contains(&s.key)).collect();
        if present.len() < 2 {
            return None;
        }
        let u = self.trait_direction(self.fc_trait);
        let x: f64 = u.iter().zip(last_top).map(|(a, &b)| a * f64::from(b)).sum();
        let mut scored: Vec<(f64, &FcStatement)> = present.into_iter().map(|s| (s.sign * x + s.prior, s)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.text.cmp(&b.1.text)));
        Some(scored.into_iter().take(5).map(|(_, s)| format!("- {}", s.text)).collect())
    }

    fn next_word(&self, h: &[f32], step: usize, decoding: &Decoding) -> &'static str {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (k, (_, v)) in self.vocab.iter().enumerate() {
            let mut score: f64 = v.iter().zip(h).map(|(a, &b)| a * f64::from(b)).sum();
            let jitter = hash_parts(&[self.cfg.seed, step as u64, k as u64]) as f64 / u64::MAX as f64;
            score += 0.5 * jitter;
            if decoding.temperature > 0.0 {
                let r = (hash_parts(&[decoding.seed, step as u64, k as u64, 1]) as f64 + 0.5) / (u64::MAX as f64 + 1.0);
                score += f64::from(decoding.temperature) * -(-r.ln()).ln();
            }
            if score > best.0 {
                best = (score, k);
            }
        }
        self.vocab[best.1].0
    }
}

impl ActivationBackend for ToyBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn layer_count(&self) -> usize {
        self.cfg.layers
    }

    fn hidden_dim(&self) -> usize {
        self.cfg.d
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn trace(&self, messages: &[ChatMessage], interventions: &[Intervention], decoding: &Decoding) -> Result<ForwardTrace> {
        let d = self.cfg.d;
        let layers = self.cfg.layers;
        for iv in interventions {
            if iv.layer >= layers {
                return Err(Error::InvalidArgument(format!("intervention layer {} >= {layers}", iv.layer)));
            }
            if iv.vector.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: iv.vector.len(),
                });
            }
        }
        let tokens = self.tokenize(messages);

        let mut persona = vec![0.0f64; d];
        for t in &tokens {
            if let Some((ti, sign)) = t.lex {
                persona
                    .iter_mut()
                    .zip(&self.planted.traits[ti])
                    .for_each(|(a, x)| *a += self.cfg.persona_gain * sign * x);
            }
        }

        let mut hasher = FnvHasher::default();
        let mut prompt_states = vec![Vec::with_capacity(tokens.len()); layers];
        let last_injections: Vec<(usize, &[f32])> = interventions.iter().map(|iv| (iv.layer, iv.vector.as_slice())).collect();
        for (i, t) in tokens.iter().enumerate() {
            hasher.write(t.text.as_bytes());
            hasher.write_u8(0xff);
            let own: &[(usize, &[f32])] = if i + 1 == tokens.len() { &last_injections } else { &[] };
            for (l, s) in self.token_states(&persona, own, hasher.finish()).into_iter().enumerate() {
                prompt_states[l].push(s);
            }
        }

        // Injections on the last prompt token enter later tokens' context.
        let mut context = persona.clone();
        for iv in interventions {
            context.iter_mut().zip(&iv.vector).for_each(|(a, &x)| *a += f64::from(x));
        }
        let every: Vec<(usize, &[f32])> = interventions
            .iter()
            .filter(|iv| iv.policy == TokenPolicy::EveryGeneratedToken)
            .map(|iv| (iv.layer, iv.vector.as_slice()))
            .collect();

        let user = crate::chat::content_of(messages, Role::User).unwrap_or("");
        let last_top = prompt_states[layers - 1].last().expect("prompt has at least the assistant marker").clone();
        let pieces: Vec<String> = match self.forced_choice_lines(user, &last_top) {
            Some(lines) => {
                let mut p = Vec::new();
                for (li, line) in lines.iter().enumerate() {
                    for (wi, w) in line.split(' ').enumerate() {
                        let sep = if wi > 0 {
                            " "
                        } else if li > 0 {
                            "\n"
                        } else {
                            ""
                        };
                        p.push(format!("{sep}{w}"));
                    }
                }
                p.truncate(decoding.max_tokens);
                p
            }
            None => Vec::new(),
        };
        let free = pieces.is_empty() && decoding.max_tokens > 0;
        let n_gen = if free { decoding.max_tokens.min(self.cfg.response_len) } else { pieces.len() };

        let mut generated_states = vec![Vec::with_capacity(n_gen); layers];
        let mut text = String::new();
        let mut h_top = last_top;
        let mut forced = pieces.into_iter();
        for step in 0..n_gen {
            let piece = if free {
                let w = self.next_word(&h_top, step, decoding);
                if step == 0 {
                    w.to_string()
                } else {
                    format!(" {w}")
                }
            } else {
                forced.next().unwrap_or_default()
            };
            text.push_str(&piece);
            hasher.write(piece.trim().as_bytes());
            hasher.write_u8(0xff);
            let states = self.token_states(&context, &every, hasher.finish());
            for (_, v) in &every {
                context.iter_mut().zip(v.iter()).for_each(|(a, &x)| *a += f64::from(x));
            }
            h_top = states[layers - 1].clone();
            for (l, s) in states.into_iter().enumerate() {
                generated_states[l].push(s);
            }
        }
        Ok(ForwardTrace {
            text,
            prompt_states,
            generated_states,
        })
    }
}
