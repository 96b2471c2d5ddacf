//! Deterministic completion provider for the annotation pipeline.
//!
//! Each character gets a latent level per trait. An item's keyed value `k` is
//! the latent level plus noise, and the explanation names `|k - 3|` marker
//! adjectives of matching polarity, so the summed adjective loadings of a
//! trait's self-description equal `total - 30`.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::chat::{ChatMessage, Decoding, Role};
use crate::error::{Error, Result};
use crate::persona::CompletionProvider;
use crate::probes::{default_adjectives, AdjectiveSet};
use crate::psychometrics::{inventory, Keyedness, LikertValue, Trait};

const STATEMENT_OPEN: &str = "Indicate your level of agreement with this statement: '";
const STATEMENT_CLOSE: &str = "'\n\nStick strictly to the format.";

pub struct ToyProvider {
    seed: u64,
    item_noise: f64,
    adjectives: Vec<AdjectiveSet>,
}

fn seed_of(parts: &[&[u8]], seed: u64) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    for p in parts {
        h.write(p);
        h.write_u8(0xff);
    }
    h.finish()
}

impl ToyProvider {
    pub fn new(seed: u64) -> Self {
        ToyProvider {
            seed,
            item_noise: 0.8,
            adjectives: default_adjectives(),
        }
    }

    /// Latent keyed-value level for a character and trait, in [1.2, 4.8].
    pub fn latent(&self, character: &str, t: Trait) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_of(&[character.as_bytes(), t.code().as_bytes()], self.seed));
        rng.random_range(1.2..4.8)
    }
}

fn parse_prompt(content: &str) -> Option<(&str, &str)> {
    let rest = content.strip_prefix("You are ")?;
    let character = &rest[..rest.find(".\n")?];
    let start = content.find(STATEMENT_OPEN)? + STATEMENT_OPEN.len();
    let end = content.rfind(STATEMENT_CLOSE)?;
    Some((character, content.get(start..end)?))
}

impl CompletionProvider for ToyProvider {
    fn model_id(&self) -> &str {
        "toy-provider"
    }

    fn generate(&self, messages: &[ChatMessage], _decoding: &Decoding) -> Result<String> {
        let content = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let (character, statement) =
            parse_prompt(content).ok_or_else(|| Error::Provider("toy provider only answers item prompts".into()))?;
        let item = inventory()
            .iter()
            .find(|i| i.text == statement)
            .ok_or_else(|| Error::Provider(format!("unknown statement {statement:?}")))?;

        let mu = self.latent(character, item.trait_);
        let mut rng = ChaCha8Rng::seed_from_u64(seed_of(&[character.as_bytes(), item.id.as_bytes()], self.seed));
        let noise = Normal::new(0.0, self.item_noise).expect("valid sigma");
        let k = (mu + rng.sample(noise)).round().clamp(1.0, 5.0) as u8;
        let level = match item.keyedness {
            Keyedness::Positive => k,
            Keyedness::Negative => 6 - k,
        };
        let set = &self.adjectives[item.trait_.index()];
        let explanation = match k {
            3 => "It depends on the day and the company.".to_string(),
            _ => {
                let pool = if k > 3 { &set.positive } else { &set.negative };
                let n = usize::from(k.abs_diff(3));
                let picked: Vec<&str> = pool.choose_multiple(&mut rng, n).map(String::as_str).collect();
                format!("I would call myself {}.", picked.join(" and "))
            }
        };
        Ok(format!("{}\n{explanation}", LikertValue::new(level)?.label()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persona::{annotate_character, AnnotateOptions, CharacterRef};

    #[test]
    fn profile_loadings_match_totals() {
        let p = ToyProvider::new(0);
        let profile = annotate_character(&CharacterRef::new("Tony Soprano", "The Sopranos"), &p, &AnnotateOptions::default()).unwrap();
        for set in default_adjectives() {
            let words: Vec<String> = profile
                .trait_description(set.trait_)
                .split_whitespace()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
                .collect();
            let load = words.iter().filter(|w| set.positive.contains(w)).count() as i64
                - words.iter().filter(|w| set.negative.contains(w)).count() as i64;
            assert_eq!(load, i64::from(profile.score(set.trait_).total) - 30, "{}", set.trait_);
        }
    }

    #[test]
    fn deterministic() {
        let p = ToyProvider::new(5);
        let c = CharacterRef::new("Sherlock Holmes", "Sherlock");
        let a = annotate_character(&c, &p, &AnnotateOptions::default()).unwrap();
        let b = annotate_character(&c, &p, &AnnotateOptions::default()).unwrap();
        assert_eq!(a.responses, b.responses);
        assert!(p.generate(&[ChatMessage::user("hello")], &Decoding::default()).is_err());
    }
}
