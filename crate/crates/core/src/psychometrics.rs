//! IPIP 50-item Big Five marker inventory, Likert semantics and keyed scoring.
//!
//! The inventory is a built-in table. Scoring follows the usual IPIP
//! convention: positively keyed items score the Likert level as given,
//! negatively keyed items score `6 - level`. A trait total is the sum over
//! its ten items, so it always lies in `10..=50`.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const INVENTORY_TSV: &str = include_str!("../data/ipip50.tsv");

/// Items per trait in the 50-item inventory.
pub const ITEMS_PER_TRAIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Trait {
    #[serde(rename = "EXT")]
    Extraversion,
    #[serde(rename = "EST")]
    EmotionalStability,
    #[serde(rename = "AGR")]
    Agreeableness,
    #[serde(rename = "CSN")]
    Conscientiousness,
    #[serde(rename = "OPN")]
    Openness,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Extraversion,
        Trait::EmotionalStability,
        Trait::Agreeableness,
        Trait::Conscientiousness,
        Trait::Openness,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Trait::Extraversion => "EXT",
            Trait::EmotionalStability => "EST",
            Trait::Agreeableness => "AGR",
            Trait::Conscientiousness => "CSN",
            Trait::Openness => "OPN",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Trait::Extraversion => "Extraversion",
            Trait::EmotionalStability => "Emotional Stability",
            Trait::Agreeableness => "Agreeableness",
            Trait::Conscientiousness => "Conscientiousness",
            Trait::Openness => "Openness",
        }
    }

    /// Position in the canonical EXT, EST, AGR, CSN, OPN ordering.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Trait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Trait::ALL
            .into_iter()
            .find(|t| t.code().eq_ignore_ascii_case(s) || t.display_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown trait `{s}`")))
    }
}

/// A five-point agreement level, 1 = strongly disagree ... 5 = strongly agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LikertValue(u8);

impl LikertValue {
    pub const LABELS: [&'static str; 5] = [
        "strongly disagree",
        "disagree",
        "neither agree nor disagree",
        "agree",
        "strongly agree",
    ];

    pub fn new(level: u8) -> Result<Self> {
        if (1..=5).contains(&level) {
            Ok(LikertValue(level))
        } else {
            Err(Error::InvalidLikert(level))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn label(self) -> &'static str {
        Self::LABELS[usize::from(self.0) - 1]
    }

    pub fn from_label(label: &str) -> Option<Self> {
        let label = label.trim();
        Self::LABELS
            .iter()
            .position(|l| l.eq_ignore_ascii_case(label))
            .map(|i| LikertValue(i as u8 + 1))
    }

    /// The mirrored level `6 - level`.
    pub fn reversed(self) -> Self {
        LikertValue(6 - self.0)
    }
}

impl TryFrom<u8> for LikertValue {
    type Error = Error;

    fn try_from(level: u8) -> Result<Self> {
        LikertValue::new(level)
    }
}

impl From<LikertValue> for u8 {
    fn from(v: LikertValue) -> u8 {
        v.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Keyedness {
    #[serde(rename = "+")]
    Positive,
    #[serde(rename = "-")]
    Negative,
}

impl Keyedness {
    pub fn sign(self) -> &'static str {
        match self {
            Keyedness::Positive => "+",
            Keyedness::Negative => "-",
        }
    }
}

impl FromStr for Keyedness {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "+" => Ok(Keyedness::Positive),
            "-" | "\u{2212}" => Ok(Keyedness::Negative),
            other => Err(Error::InvalidArgument(format!("bad keyedness `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireItem {
    pub id: String,
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub text: String,
    pub keyedness: Keyedness,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResponse {
    pub item_id: String,
    pub likert: LikertValue,
    pub explanation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraitScore {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub total: u32,
    pub mean: f64,
    pub n_items: usize,
}

/// The built-in 50-item inventory in table order.
pub fn inventory() -> &'static [QuestionnaireItem] {
    static INVENTORY: OnceLock<Vec<QuestionnaireItem>> = OnceLock::new();
    INVENTORY.get_or_init(|| {
        read_inventory_tsv(INVENTORY_TSV.as_bytes()).expect("bundled inventory is well-formed")
    })
}

pub fn item(id: &str) -> Option<&'static QuestionnaireItem> {
    inventory().iter().find(|it| it.id == id)
}

pub fn items_for(trait_: Trait) -> impl Iterator<Item = &'static QuestionnaireItem> {
    inventory().iter().filter(move |it| it.trait_ == trait_)
}

pub fn keyed_value(item: &QuestionnaireItem, response: LikertValue) -> u8 {
    match item.keyedness {
        Keyedness::Positive => response.level(),
        Keyedness::Negative => response.reversed().level(),
    }
}

/// Sums the keyed values of one trait's ten items.
pub fn score_trait(responses: &[ItemResponse], trait_: Trait) -> Result<TraitScore> {
    let mut seen = HashSet::new();
    let mut total = 0u32;
    for r in responses {
        let it = item(&r.item_id).ok_or_else(|| Error::UnknownItem(r.item_id.clone()))?;
        if it.trait_ != trait_ {
            continue;
        }
        if !seen.insert(it.id.as_str()) {
            return Err(Error::DuplicateItem(it.id.clone()));
        }
        total += u32::from(keyed_value(it, r.likert));
    }
    let missing: Vec<String> = items_for(trait_)
        .filter(|it| !seen.contains(it.id.as_str()))
        .map(|it| it.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingItems(missing));
    }
    let n_items = seen.len();
    Ok(TraitScore {
        trait_,
        total,
        mean: f64::from(total) / n_items as f64,
        n_items,
    })
}

/// Scores all five traits in canonical order.
pub fn score_all(responses: &[ItemResponse]) -> Result<[TraitScore; 5]> {
    let scores = Trait::ALL
        .into_iter()
        .map(|t| score_trait(responses, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(scores.try_into().expect("five traits"))
}

pub fn write_inventory_tsv<W: Write>(mut w: W, items: &[QuestionnaireItem]) -> std::io::Result<()> {
    writeln!(w, "id\ttrait\tkeyedness\ttext")?;
    for it in items {
        writeln!(w, "{}\t{}\t{}\t{}", it.id, it.trait_, it.keyedness.sign(), it.text)?;
    }
    Ok(())
}

pub fn read_inventory_tsv<R: BufRead>(r: R) -> Result<Vec<QuestionnaireItem>> {
    let mut items = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<inventory>", e))?;
        if lineno == 0 && line.starts_with("id\t") || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.splitn(4, '\t').collect();
        let [id, trait_, key, text] = cols[..] else {
            return Err(Error::InvalidArgument(format!(
                "inventory line {}: expected 4 tab-separated columns",
                lineno + 1
            )));
        };
        let trait_: Trait = trait_.parse()?;
        if !id.starts_with(trait_.code()) {
            return Err(Error::InvalidArgument(format!(
                "inventory line {}: id `{id}` does not match trait {trait_}",
                lineno + 1
            )));
        }
        items.push(QuestionnaireItem {
            id: id.to_string(),
            trait_,
            text: text.to_string(),
            keyedness: key.parse()?,
        });
    }
    Ok(items)
}
