//! Character annotation: item prompts, response parsing and profile assembly.

pub mod provider;
#[cfg(feature = "http")]
pub mod http;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

pub use provider::CompletionProvider;

use crate::chat::{ChatMessage, Decoding};
use crate::error::{Error, Result};
use crate::psychometrics::{self, inventory, ItemResponse, LikertValue, QuestionnaireItem, Trait, TraitScore};

const ROSTER_TSV: &str = include_str!("../../data/roster.tsv");

pub const PROMPT_TEMPLATE_VERSION: &str = "item-prompt/1";
pub const PROFILE_SCHEMA_VERSION: &str = "persona-probe/profile/1";
pub const DEFAULT_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CharacterRef {
    pub name: String,
    pub franchise: String,
    pub id: String,
}

impl CharacterRef {
    pub fn new(name: impl Into<String>, franchise: impl Into<String>) -> Self {
        let name = name.into();
        let franchise = franchise.into();
        let id = format!("{}--{}", slugify(&franchise), slugify(&name));
        CharacterRef { name, franchise, id }
    }
}

fn slugify(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut dash = false;
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            dash = false;
        } else if !dash && !out.is_empty() {
            out.push('-');
            dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

/// The bundled 406-character roster.
pub fn default_roster() -> Vec<CharacterRef> {
    read_roster_tsv(ROSTER_TSV.as_bytes()).expect("bundled roster is well-formed")
}

/// Reads `name<TAB>franchise` lines; a `name\tfranchise` header is skipped.
pub fn read_roster_tsv<R: BufRead>(r: R) -> Result<Vec<CharacterRef>> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<roster>", e))?;
        if line.trim().is_empty() || (i == 0 && line == "name\tfranchise") {
            continue;
        }
        let Some((name, franchise)) = line.split_once('\t') else {
            return Err(Error::InvalidArgument(format!("roster line {}: expected name<TAB>franchise", i + 1)));
        };
        let c = CharacterRef::new(name.trim(), franchise.trim());
        if !seen.insert((c.name.clone(), c.franchise.clone())) {
            return Err(Error::InvalidArgument(format!("roster line {}: duplicate `{}`", i + 1, c.name)));
        }
        out.push(c);
    }
    Ok(out)
}

/// User-turn text asking `character` to rate `item`.
pub fn build_item_prompt(character: &CharacterRef, item: &QuestionnaireItem) -> Result<String> {
    if character.name.trim().is_empty() {
        return Err(Error::InvalidArgument("character name is empty".into()));
    }
    if character.franchise.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("character `{}` has no franchise", character.name)));
    }
    if item.text.trim().is_empty() {
        return Err(Error::InvalidArgument(format!("item {} has no text", item.id)));
    }
    let labels: String = LikertValue::LABELS
        .iter()
        .map(|l| format!("\n  '{l}'"))
        .collect();
    Ok(format!(
        "You are {name} from {franchise}.\n\n\
         Respond in exactly this format:\n\
         <one of: {labels}>\n\
         <Provide a brief but nuanced explanation that captures how you generally see yourself.>\n\n\
         Indicate your level of agreement with this statement: '{text}'\n\n\
         Stick strictly to the format.",
        name = character.name,
        franchise = character.franchise,
        text = item.text,
    ))
}

pub fn item_messages(character: &CharacterRef, item: &QuestionnaireItem) -> Result<Vec<ChatMessage>> {
    Ok(vec![ChatMessage::user(build_item_prompt(character, item)?)])
}

/// Splits a constrained-format answer into its Likert level and explanation.
pub fn parse_item_response(raw: &str) -> Result<(LikertValue, String)> {
    let text = raw.trim().trim_start_matches(['\'', '"', '*', '<']);
    let lower = text.to_lowercase();
    let mut labels: Vec<(usize, &str)> = LikertValue::LABELS.iter().copied().enumerate().collect();
    // longest label first so "strongly agree" wins over "agree"
    labels.sort_by_key(|(_, l)| std::cmp::Reverse(l.len()));
    for (idx, label) in labels {
        if !lower.starts_with(label) {
            continue;
        }
        let rest = &text[label.len()..];
        if rest.chars().next().is_some_and(char::is_alphanumeric) {
            continue;
        }
        let explanation = rest
            .trim_start_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
            .trim_end();
        if explanation.is_empty() {
            return Err(Error::EmptyExplanation);
        }
        return Ok((LikertValue::new(idx as u8 + 1)?, explanation.to_string()));
    }
    let preview: String = text.chars().take(60).collect();
    Err(Error::Format(preview))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_template_version: String,
    pub timestamp: String,
}

impl Provenance {
    pub fn now(model_id: impl Into<String>) -> Self {
        Provenance {
            model_id: model_id.into(),
            prompt_template_version: PROMPT_TEMPLATE_VERSION.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterProfile {
    pub schema_version: String,
    pub character: CharacterRef,
    pub responses: Vec<ItemResponse>,
    pub trait_scores: Vec<TraitScore>,
    /// Per-trait explanations joined by newlines, keyed by trait code.
    pub self_descriptions: BTreeMap<Trait, String>,
    pub provenance: Provenance,
}

impl CharacterProfile {
    /// Assembles a profile from a complete set of 50 responses.
    pub fn from_responses(character: CharacterRef, mut responses: Vec<ItemResponse>, provenance: Provenance) -> Result<Self> {
        if let Some(r) = responses.iter().find(|r| r.explanation.trim().is_empty()) {
            return Err(Error::InvalidArgument(format!("empty explanation for {}", r.item_id)));
        }
        let scores = psychometrics::score_all(&responses)?;
        let order: BTreeMap<&str, usize> = inventory().iter().enumerate().map(|(i, it)| (it.id.as_str(), i)).collect();
        responses.sort_by_key(|r| order[r.item_id.as_str()]);
        let self_descriptions = Trait::ALL
            .into_iter()
            .map(|t| {
                let text = responses
                    .iter()
                    .filter(|r| psychometrics::item(&r.item_id).is_some_and(|it| it.trait_ == t))
                    .map(|r| r.explanation.as_str())
                    .collect::<Vec<_>>()
                    .join("\n");
                (t, text)
            })
            .collect();
        Ok(CharacterProfile {
            schema_version: PROFILE_SCHEMA_VERSION.to_string(),
            character,
            responses,
            trait_scores: scores.to_vec(),
            self_descriptions,
            provenance,
        })
    }

    pub fn score(&self, t: Trait) -> &TraitScore {
        &self.trait_scores[t.index()]
    }

    /// Integer totals in canonical trait order.
    pub fn totals(&self) -> [u32; 5] {
        Trait::ALL.map(|t| self.score(t).total)
    }

    pub fn trait_description(&self, t: Trait) -> &str {
        self.self_descriptions.get(&t).map(String::as_str).unwrap_or("")
    }

    /// Whole-character description: the per-trait descriptions in canonical order.
    pub fn description(&self) -> String {
        Trait::ALL
            .iter()
            .map(|&t| self.trait_description(t))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Checks that the stored scores match a fresh scoring of the responses.
    pub fn verify(&self) -> Result<()> {
        let fresh = psychometrics::score_all(&self.responses)?;
        if self.trait_scores.len() != 5 {
            return Err(Error::SchemaMismatch(format!("{} trait scores", self.trait_scores.len())));
        }
        for (stored, fresh) in self.trait_scores.iter().zip(&fresh) {
            if stored.trait_ != fresh.trait_ || stored.total != fresh.total || stored.n_items != fresh.n_items {
                return Err(Error::SchemaMismatch(format!(
                    "{}: stored total {} but responses give {}",
                    self.character.id, stored.total, fresh.total
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnnotateOptions {
    pub retries: usize,
    pub decoding: Decoding,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        AnnotateOptions {
            retries: DEFAULT_RETRIES,
            decoding: Decoding {
                max_tokens: 256,
                ..Decoding::default()
            },
        }
    }
}

/// Administers the 50 items to one character. Each item gets `retries + 1`
/// attempts; an item that never parses rejects the whole profile.
pub fn annotate_character<P: CompletionProvider + ?Sized>(
    character: &CharacterRef,
    provider: &P,
    opts: &AnnotateOptions,
) -> Result<CharacterProfile> {
    let mut responses = Vec::with_capacity(inventory().len());
    let mut failed = Vec::new();
    for item in inventory() {
        let messages = item_messages(character, item)?;
        let mut parsed = None;
        let mut last_provider_err = None;
        for attempt in 0..=opts.retries {
            let decoding = Decoding {
                seed: opts.decoding.seed.wrapping_add(attempt as u64),
                ..opts.decoding
            };
            match provider.generate(&messages, &decoding) {
                Ok(raw) => match parse_item_response(&raw) {
                    Ok(p) => {
                        parsed = Some(p);
                        break;
                    }
                    Err(e) => log::debug!("{} {}: attempt {attempt}: {e}", character.id, item.id),
                },
                Err(e) if e.is_retryable() => {
                    log::warn!("{} {}: attempt {attempt}: {e}", character.id, item.id);
                    last_provider_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        match (parsed, last_provider_err) {
            (Some((likert, explanation)), _) => responses.push(ItemResponse {
                item_id: item.id.clone(),
                likert,
                explanation,
            }),
            (None, Some(e)) => return Err(e),
            (None, None) => failed.push(item.id.clone()),
        }
    }
    if !failed.is_empty() {
        return Err(Error::IncompleteProfile {
            character: character.id.clone(),
            items: failed,
        });
    }
    CharacterProfile::from_responses(character.clone(), responses, Provenance::now(provider.model_id()))
}

#[derive(Debug, Default)]
pub struct CorpusSummary {
    pub written: usize,
    pub rejected: Vec<(String, Error)>,
}

/// Annotates `characters` with up to `workers` concurrent provider sessions
/// and streams complete profiles to `out` as JSON lines in roster order.
pub fn annotate_corpus<P, W>(
    characters: &[CharacterRef],
    provider: &P,
    opts: &AnnotateOptions,
    workers: usize,
    out: &mut W,
) -> Result<CorpusSummary>
where
    P: CompletionProvider + ?Sized,
    W: Write,
{
    let workers = workers.clamp(1, characters.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<CharacterProfile>)>();
    let mut summary = CorpusSummary::default();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = characters.get(i) else { break };
                if tx.send((i, annotate_character(c, provider, opts))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer, reorders completions back into roster order
        let mut pending = BTreeMap::new();
        let mut cursor = 0;
        for (i, res) in rx {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&cursor) {
                match res {
                    Ok(profile) => {
                        write_profile(out, &profile)?;
                        summary.written += 1;
                    }
                    Err(e) => {
                        log::warn!("rejected {}: {e}", characters[cursor].id);
                        summary.rejected.push((characters[cursor].id.clone(), e));
                    }
                }
                cursor += 1;
            }
        }
        Ok(())
    })?;
    out.flush().map_err(|e| Error::io("<corpus>", e))?;
    Ok(summary)
}

pub fn write_profile<W: Write>(out: &mut W, profile: &CharacterProfile) -> Result<()> {
    serde_json::to_writer(&mut *out, profile)?;
    out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CharacterProfile>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let profile: CharacterProfile = serde_json::from_str(&line)
            .map_err(|e| Error::SchemaMismatch(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if profile.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "{}:{}: schema {}",
                path.display(),
                i + 1,
                profile.schema_version
            )));
        }
        profile.verify()?;
        out.push(profile);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn tony() -> CharacterRef {
        CharacterRef::new("Tony Soprano", "The Sopranos")
    }

    #[test]
    fn roster_has_406_unique_characters() {
        let r = default_roster();
        assert_eq!(r.len(), 406);
        let ids: std::collections::HashSet<_> = r.iter().map(|c| &c.id).collect();
        assert_eq!(ids.len(), 406);
        assert!(r.iter().any(|c| c.name == "Robert Crawley, 7th Earl of Grantham"));
        assert!(r.iter().any(|c| c.name == "Logan Roy" && c.franchise == "Succession"));
    }

    #[test]
    fn item_prompt_structure() {
        let p = build_item_prompt(&tony(), psychometrics::item("AGR1").unwrap()).unwrap();
        assert!(p.starts_with("You are Tony Soprano from The Sopranos."));
        assert!(p.contains("'I feel little concern for others.'"));
        for l in LikertValue::LABELS {
            assert!(p.contains(&format!("'{l}'")));
        }
        assert!(p.ends_with("Stick strictly to the format."));
    }

    #[test]
    fn item_prompt_keeps_apostrophes() {
        let p = build_item_prompt(&tony(), psychometrics::item("EXT2").unwrap()).unwrap();
        assert!(p.contains("'I don't talk a lot.'"));
    }

    #[test]
    fn item_prompt_requires_franchise() {
        let c = CharacterRef::new("Nobody", "");
        assert!(build_item_prompt(&c, &inventory()[0]).is_err());
    }

    #[test]
    fn prompts_are_injective() {
        let roster = default_roster();
        let mut seen = std::collections::HashSet::new();
        for c in roster.iter().take(20) {
            for it in inventory() {
                assert!(seen.insert(build_item_prompt(c, it).unwrap()));
            }
        }
    }

    #[test]
    fn parse_table_examples() {
        let (l, e) = parse_item_response("Strongly agree. I have a tendency to prioritize my own interests...").unwrap();
        assert_eq!(l.level(), 5);
        assert_eq!(e, "I have a tendency to prioritize my own interests...");
        let (l, e) = parse_item_response("Disagree. I've got a certain loyalty to those around me...").unwrap();
        assert_eq!(l.level(), 2);
        assert_eq!(e, "I've got a certain loyalty to those around me...");
    }

    #[test]
    fn parse_longest_match() {
        assert_eq!(parse_item_response("Neither agree nor disagree - it depends").unwrap().0.level(), 3);
        assert_eq!(parse_item_response("strongly disagree: never").unwrap().0.level(), 1);
        assert_eq!(parse_item_response("  AGREE, mostly").unwrap().0.level(), 4);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_item_response("Probably yes, mostly."), Err(Error::Format(_))));
        assert!(matches!(parse_item_response("agree"), Err(Error::EmptyExplanation)));
        assert!(matches!(parse_item_response("agree. "), Err(Error::EmptyExplanation)));
        assert!(matches!(parse_item_response("agreeable people like me"), Err(Error::Format(_))));
    }

    type Reply = Box<dyn Fn(&str, usize) -> Result<String> + Send + Sync>;

    struct Scripted {
        calls: Mutex<Vec<String>>,
        reply: Reply,
    }

    impl CompletionProvider for Scripted {
        fn model_id(&self) -> &str {
            "scripted"
        }
        fn generate(&self, messages: &[ChatMessage], _: &Decoding) -> Result<String> {
            let prompt = messages[0].content.clone();
            let mut calls = self.calls.lock().unwrap();
            calls.push(prompt.clone());
            let n = calls.iter().filter(|c| **c == prompt).count();
            (self.reply)(&prompt, n)
        }
    }

    fn scripted(f: impl Fn(&str, usize) -> Result<String> + Send + Sync + 'static) -> Scripted {
        Scripted {
            calls: Mutex::new(Vec::new()),
            reply: Box::new(f),
        }
    }

    #[test]
    fn annotate_complete_profile() {
        let p = scripted(|_, _| Ok("Disagree. I've got a certain loyalty to those around me.".into()));
        let profile = annotate_character(&tony(), &p, &AnnotateOptions::default()).unwrap();
        assert_eq!(profile.responses.len(), 50);
        profile.verify().unwrap();
        // all-level-2: + items score 2, - items score 4
        assert_eq!(profile.score(Trait::Extraversion).total, 5 * 2 + 5 * 4);
        assert_eq!(profile.score(Trait::EmotionalStability).total, 2 * 2 + 8 * 4);
        assert_eq!(profile.trait_description(Trait::Openness).lines().count(), 10);
        assert_eq!(profile.description().lines().count(), 50);
    }

    #[test]
    fn annotate_rejects_persistent_garbage() {
        let p = scripted(|prompt, _| {
            if prompt.contains("I feel comfortable around people.") {
                Ok("lol".into())
            } else {
                Ok("Agree. Sure.".into())
            }
        });
        match annotate_character(&tony(), &p, &AnnotateOptions::default()) {
            Err(Error::IncompleteProfile { items, .. }) => assert_eq!(items, vec!["EXT3"]),
            other => panic!("{other:?}"),
        }
        let calls = p.calls.lock().unwrap();
        assert_eq!(calls.iter().filter(|c| c.contains("comfortable around")).count(), 4);
    }

    #[test]
    fn annotate_retries_then_succeeds() {
        let p = scripted(|_, n| if n < 3 { Ok("???".into()) } else { Ok("Agree. Fine.".into()) });
        let profile = annotate_character(&tony(), &p, &AnnotateOptions::default()).unwrap();
        assert_eq!(profile.responses.len(), 50);
    }

    #[test]
    fn zero_retries_single_attempt() {
        let p = scripted(|_, n| if n < 2 { Ok("???".into()) } else { Ok("Agree. Fine.".into()) });
        let opts = AnnotateOptions {
            retries: 0,
            ..AnnotateOptions::default()
        };
        match annotate_character(&tony(), &p, &opts) {
            Err(Error::IncompleteProfile { items, .. }) => assert_eq!(items.len(), 50),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.calls.lock().unwrap().len(), 50);
    }

    #[test]
    fn provider_failure_surfaces() {
        let p = scripted(|_, _| Err(Error::Provider("connection refused".into())));
        let opts = AnnotateOptions {
            retries: 1,
            ..AnnotateOptions::default()
        };
        assert!(matches!(annotate_character(&tony(), &p, &opts), Err(Error::Provider(_))));
    }

    #[test]
    fn corpus_in_roster_order() {
        let p = scripted(|prompt, _| {
            if prompt.starts_with("You are Jim from") {
                Ok("nope".into())
            } else {
                Ok("Agree. Fine.".into())
            }
        });
        let roster: Vec<_> = default_roster().into_iter().take(6).collect();
        let mut buf = Vec::new();
        let s = annotate_corpus(&roster, &p, &AnnotateOptions::default(), 3, &mut buf).unwrap();
        assert_eq!(s.written, 5);
        assert_eq!(s.rejected.len(), 1);
        let text = String::from_utf8(buf).unwrap();
        let ids: Vec<String> = text
            .lines()
            .map(|l| serde_json::from_str::<CharacterProfile>(l).unwrap().character.id)
            .collect();
        let expected: Vec<_> = roster.iter().filter(|c| c.name != "Jim").map(|c| c.id.clone()).collect();
        assert_eq!(ids, expected);
    }
}
