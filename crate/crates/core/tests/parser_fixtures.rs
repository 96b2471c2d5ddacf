use persona_probe::persona::parse_item_response;
use persona_probe::psychometrics::{item, LikertValue};
use serde::Deserialize;

#[derive(Deserialize)]
struct Row {
    character: String,
    item_id: String,
    statement: String,
    response: String,
    expected_label: String,
}

fn rows() -> Vec<Row> {
    include_str!("fixtures/transcript_responses.jsonl")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn all_transcript_responses_parse() {
    let rows = rows();
    assert_eq!(rows.len(), 100);
    for r in &rows {
        let (level, explanation) = parse_item_response(&r.response).unwrap_or_else(|e| panic!("{} {}: {e}", r.character, r.item_id));
        let want = LikertValue::from_label(&r.expected_label).unwrap();
        assert_eq!(level, want, "{} {}", r.character, r.item_id);
        assert!(!explanation.trim().is_empty());
        assert!(!explanation.starts_with(|c: char| c.is_ascii_punctuation() || c.is_whitespace()));
    }
}

#[test]
fn fixture_statements_match_inventory() {
    for r in rows() {
        let it = item(&r.item_id).unwrap();
        assert_eq!(it.text.trim_end_matches('.'), r.statement.trim_end_matches('.'), "{}", r.item_id);
    }
}

#[test]
fn two_characters_fifty_items_each() {
    let rows = rows();
    for name in ["Tony Soprano", "Lady Mary Crawley"] {
        let mut ids: Vec<&str> = rows.iter().filter(|r| r.character == name).map(|r| r.item_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 50, "{name}");
    }
}
