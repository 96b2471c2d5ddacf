//! Forced-choice personality task: pick five of ten statements.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::error::{Error, Result};
use crate::psychometrics::{inventory, Trait};

pub const SLOTS: usize = 5;

const EXT_POSITIVE: [&str; 5] = [
    "I feel comfortable around people",
    "I make friends easily",
    "I am skilled in handling social situations",
    "I am the life of the party",
    "I know how to captivate people",
];

const EXT_NEGATIVE: [&str; 5] = [
    "I have little to say",
    "I keep in the background",
    "I would describe my experiences as somewhat dull",
    "I don't like to draw attention to myself",
    "I don't talk a lot",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub text: String,
    pub polarity: Polarity,
    /// Whether the text also appears verbatim in the training questionnaire.
    pub in_training_inventory: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedChoiceTask {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub statements: Vec<Statement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona: Option<String>,
    /// Presentation-order seed.
    pub seed: u64,
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
        .replace(['\u{2019}', '\u{2018}'], "'")
}

impl ForcedChoiceTask {
    pub fn new(trait_: Trait, positive: &[&str], negative: &[&str]) -> Result<Self> {
        let known: HashSet<String> = inventory().iter().map(|i| normalize(i.text.trim_end_matches('.'))).collect();
        let mk = |prefix: &str, polarity, list: &[&str]| -> Vec<Statement> {
            list.iter()
                .enumerate()
                .map(|(i, t)| Statement {
                    id: format!("{prefix}{}", i + 1),
                    text: t.to_string(),
                    polarity,
                    in_training_inventory: known.contains(&normalize(t)),
                })
                .collect()
        };
        let mut statements = mk("P", Polarity::Positive, positive);
        statements.extend(mk("N", Polarity::Negative, negative));
        let task = ForcedChoiceTask {
            trait_,
            statements,
            persona: None,
            seed: 0,
        };
        task.validate()?;
        Ok(task)
    }

    /// The ten bundled extraversion statements.
    pub fn extraversion() -> Self {
        Self::new(Trait::Extraversion, &EXT_POSITIVE, &EXT_NEGATIVE).expect("bundled statements are valid")
    }

    pub fn with_persona(mut self, persona: impl Into<String>) -> Self {
        self.persona = Some(persona.into());
        self
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ForcedChoiceTask { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let count = |p| self.statements.iter().filter(|s| s.polarity == p).count();
        if count(Polarity::Positive) != SLOTS || count(Polarity::Negative) != SLOTS {
            return Err(Error::InvalidArgument(format!("forced-choice task needs {SLOTS} statements per polarity")));
        }
        let distinct: HashSet<String> = self.statements.iter().map(|s| normalize(&s.text)).collect();
        if distinct.len() != self.statements.len() || distinct.contains("") {
            return Err(Error::InvalidArgument("forced-choice statements must be distinct and non-empty".into()));
        }
        Ok(())
    }

    /// Statements in the seeded presentation order.
    pub fn presentation_order(&self) -> Vec<&Statement> {
        let mut order: Vec<&Statement> = self.statements.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        order
    }

    fn lookup(&self, line: &str) -> Option<&Statement> {
        let key = normalize(line);
        self.statements.iter().find(|s| normalize(&s.text) == key)
    }
}

pub fn build_forced_choice_prompt(task: &ForcedChoiceTask) -> Vec<ChatMessage> {
    let mut system = String::from("You are a person asked questions about your personality.\n\n");
    if let Some(p) = task.persona.as_deref().map(str::trim).filter(|p| !p.is_empty()) {
        system.push_str(p);
        system.push_str("\n\n");
    }
    system.push_str(
        "Select EXACTLY five statements from the provided list that best describe your personality, \
         no additional text or explanations.\n\nExample format:\n- Statement A\n- Statement B\n- Statement C\n- Statement D\n- Statement E",
    );
    let list: Vec<String> = task.presentation_order().iter().map(|s| format!("- {}", s.text)).collect();
    let user = format!(
        "You are asked to describe your personality. Which of the following statements fit your personality best?\n\n{}\n\nPick five statements that best describe how you see yourself.",
        list.join("\n")
    );
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcedChoiceOutcome {
    /// Ids of the distinct on-list statements selected, in response order.
    pub selections: Vec<String>,
    pub fraction_positive: f64,
    pub fraction_negative: f64,
    pub fraction_invalid: f64,
}

/// Strips a leading bullet (`-`, `*`, `•`, or `1.` / `1)`). Returns `None` for
/// lines that are not list items.
fn strip_bullet(line: &str) -> Option<&str> {
    let t = line.trim();
    for b in ["-", "*", "•", "–", "—"] {
        if let Some(rest) = t.strip_prefix(b) {
            return Some(rest);
        }
    }
    let digits = t.len() - t.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(r);
        }
    }
    None
}

fn clean_item(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '*' | '`' | '\u{201c}' | '\u{201d}'))
        .trim_end_matches(['.', ';', ','])
        .trim()
}

/// Scores a response over five slots. Each bulleted line fills a slot; a slot
/// is invalid when its line is off-list or repeats an earlier selection, and
/// missing slots are invalid. More than five bulleted lines violates the task
/// and the whole response counts as invalid.
pub fn parse_forced_choice(raw: &str, task: &ForcedChoiceTask) -> ForcedChoiceOutcome {
    let items: Vec<&str> = raw.lines().filter_map(strip_bullet).map(clean_item).collect();
    let mut selections: Vec<String> = Vec::new();
    let (mut pos, mut neg) = (0usize, 0usize);
    if items.len() <= SLOTS {
        for item in items {
            let Some(s) = task.lookup(item) else { continue };
            if selections.contains(&s.id) {
                continue;
            }
            selections.push(s.id.clone());
            match s.polarity {
                Polarity::Positive => pos += 1,
                Polarity::Negative => neg += 1,
            }
        }
    }
    let invalid = SLOTS - pos - neg;
    let n = SLOTS as f64;
    ForcedChoiceOutcome {
        selections,
        fraction_positive: pos as f64 / n,
        fraction_negative: neg as f64 / n,
        fraction_invalid: invalid as f64 / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(v: &[&str]) -> String {
        v.iter().map(|s| format!("- {s}")).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn bundled_task() {
        let t = ForcedChoiceTask::extraversion();
        assert_eq!(t.statements.len(), 10);
        let flagged: Vec<&str> = t
            .statements
            .iter()
            .filter(|s| s.in_training_inventory)
            .map(|s| s.id.as_str())
            .collect();
        assert_eq!(flagged, ["P1", "P4", "N1", "N2", "N4", "N5"]);
    }

    #[test]
    fn prompt_contents() {
        let t = ForcedChoiceTask::extraversion();
        let m = build_forced_choice_prompt(&t);
        for s in EXT_POSITIVE.iter().chain(&EXT_NEGATIVE) {
            assert!(m[1].content.contains(&format!("- {s}\n")));
        }
        assert!(m[0].content.starts_with("You are a person asked questions about your personality.\n\nSelect EXACTLY five"));
        assert!(m[1].content.ends_with("Pick five statements that best describe how you see yourself."));
        let p = build_forced_choice_prompt(&t.clone().with_persona("I love parties and crowds."));
        assert!(p[0].content.contains("\n\nI love parties and crowds.\n\nSelect EXACTLY"));
        assert_eq!(build_forced_choice_prompt(&t.with_seed(7)), build_forced_choice_prompt(&t.with_seed(7)));
        let orders: HashSet<Vec<String>> = (0..10)
            .map(|s| t.with_seed(s).presentation_order().iter().map(|x| x.id.clone()).collect())
            .collect();
        assert!(orders.len() > 1);
    }

    #[test]
    fn parse_examples() {
        let t = ForcedChoiceTask::extraversion();
        let o = parse_forced_choice(&lines(&EXT_POSITIVE), &t);
        assert_eq!((o.fraction_positive, o.fraction_negative, o.fraction_invalid), (1.0, 0.0, 0.0));

        let mixed = lines(&[EXT_POSITIVE[0], EXT_NEGATIVE[1], EXT_POSITIVE[2], EXT_NEGATIVE[3], EXT_POSITIVE[4]]);
        let o = parse_forced_choice(&mixed, &t);
        assert_eq!((o.fraction_positive, o.fraction_negative, o.fraction_invalid), (0.6, 0.4, 0.0));

        let fab = lines(&[EXT_POSITIVE[0], EXT_POSITIVE[1], EXT_NEGATIVE[0], EXT_NEGATIVE[1], "I enjoy long walks"]);
        let o = parse_forced_choice(&fab, &t);
        assert_eq!(o.fraction_invalid, 0.2);
        assert_eq!(o.selections, ["P1", "P2", "N1", "N2"]);
    }

    #[test]
    fn parse_tolerates_formatting() {
        let t = ForcedChoiceTask::extraversion();
        let raw = "Here you go:\n* i FEEL   comfortable around people.\n2) \"I make friends easily\"\n- I am skilled in handling social situations\n- **I am the life of the party**\n- I don\u{2019}t talk a lot";
        let o = parse_forced_choice(raw, &t);
        assert_eq!((o.fraction_positive, o.fraction_negative, o.fraction_invalid), (0.8, 0.2, 0.0));
    }

    #[test]
    fn parse_invalid_shapes() {
        let t = ForcedChoiceTask::extraversion();
        let dup = lines(&[EXT_POSITIVE[0], EXT_POSITIVE[0], EXT_POSITIVE[1]]);
        let o = parse_forced_choice(&dup, &t);
        assert_eq!((o.fraction_positive, o.fraction_invalid), (0.4, 0.6));
        let six = lines(&[EXT_POSITIVE[0], EXT_POSITIVE[1], EXT_POSITIVE[2], EXT_POSITIVE[3], EXT_POSITIVE[4], EXT_NEGATIVE[0]]);
        assert_eq!(parse_forced_choice(&six, &t).fraction_invalid, 1.0);
        assert_eq!(parse_forced_choice("", &t).fraction_invalid, 1.0);
    }

    #[test]
    fn invalid_tasks() {
        assert!(ForcedChoiceTask::new(Trait::Extraversion, &EXT_POSITIVE[..4], &EXT_NEGATIVE).is_err());
        let mut neg = EXT_NEGATIVE;
        neg[0] = EXT_POSITIVE[0];
        assert!(ForcedChoiceTask::new(Trait::Extraversion, &EXT_POSITIVE, &neg).is_err());
    }
}
