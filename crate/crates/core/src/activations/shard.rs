//! On-disk activation shards.
//!
//! A shard is a directory holding `manifest.json`, `index.jsonl` (one line per
//! row) and `payload.bin` (little-endian f32, row-major, row `i` at byte
//! offset `i * d * 4`). Rows are sorted by (character, instruction, layer,
//! position), so the same record set always produces the same bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ActivationRecord, Position};
use crate::error::{Error, Result};

pub const SHARD_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const INDEX: &str = "index.jsonl";
const PAYLOAD: &str = "payload.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub model_id: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub dtype: String,
    pub row_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexRow {
    character_id: String,
    instruction_id: u32,
    layer: u32,
    position: Position,
    scores: [u32; 5],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub manifest: Manifest,
    pub records: Vec<ActivationRecord>,
}

pub fn write_shard(dir: &Path, model_id: &str, layer_count: usize, hidden_dim: usize, records: &[ActivationRecord]) -> Result<Manifest> {
    for r in records {
        if r.vector.len() != hidden_dim {
            return Err(Error::SchemaMismatch(format!(
                "{} layer {}: vector has {} components, manifest hidden_dim is {hidden_dim}",
                r.character_id,
                r.layer,
                r.vector.len()
            )));
        }
        if r.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("{} layer {}: non-finite component", r.character_id, r.layer)));
        }
        if r.layer as usize >= layer_count {
            return Err(Error::SchemaMismatch(format!("layer {} >= layer_count {layer_count}", r.layer)));
        }
    }
    let mut sorted: Vec<&ActivationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        schema_version: SHARD_SCHEMA_VERSION,
        model_id: model_id.to_string(),
        layer_count,
        hidden_dim,
        dtype: "f32".into(),
        row_count: sorted.len(),
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(INDEX);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for r in &sorted {
        let row = IndexRow {
            character_id: r.character_id.clone(),
            instruction_id: r.instruction_id,
            layer: r.layer,
            position: r.position,
            scores: r.trait_scores,
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(PAYLOAD);
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    for r in &sorted {
        for x in &r.vector {
            w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?;
    if manifest.schema_version != SHARD_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "shard schema {} (expected {SHARD_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(Error::SchemaMismatch(format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

pub fn read_shard(dir: &Path) -> Result<Shard> {
    let manifest = read_manifest(dir)?;
    let d = manifest.hidden_dim;

    let path = dir.join(INDEX);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::with_capacity(manifest.row_count);
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.is_empty() {
            continue;
        }
        let row: IndexRow = serde_json::from_str(&line).map_err(|e| Error::SchemaMismatch(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.len() != manifest.row_count {
        return Err(Error::CorruptPayload(format!(
            "index has {} rows, manifest says {}",
            rows.len(),
            manifest.row_count
        )));
    }

    let path = dir.join(PAYLOAD);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let expected = manifest.row_count * d * 4;
    if bytes.len() != expected {
        return Err(Error::CorruptPayload(format!(
            "payload is {} bytes, expected {expected} ({} rows x {d} x 4)",
            bytes.len(),
            manifest.row_count
        )));
    }
    let records = rows
        .into_iter()
        .zip(bytes.chunks_exact((d * 4).max(1)))
        .map(|(row, chunk)| ActivationRecord {
            character_id: row.character_id,
            instruction_id: row.instruction_id,
            layer: row.layer,
            position: row.position,
            vector: chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
            trait_scores: row.scores,
        })
        .collect();
    Ok(Shard { manifest, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize, d: usize) -> Vec<ActivationRecord> {
        (0..n)
            .map(|i| ActivationRecord {
                character_id: format!("c{}", n - i),
                instruction_id: (i % 3) as u32,
                layer: (i % 2) as u32,
                position: Position::ALL[i % 3],
                vector: (0..d).map(|j| (i * d + j) as f32 * 0.37 - 1.1).collect(),
                trait_scores: [10 + i as u32, 20, 30, 40, 50],
            })
            .collect()
    }

    #[test]
    fn roundtrip_sorted_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let recs = records(10, 8);
        let m = write_shard(dir.path(), "toy", 2, 8, &recs).unwrap();
        assert_eq!(m.row_count, 10);
        let shard = read_shard(dir.path()).unwrap();
        let mut expected = recs.clone();
        expected.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        assert_eq!(shard.records.len(), 10);
        for (a, b) in shard.records.iter().zip(&expected) {
            assert_eq!(a.sort_key(), b.sort_key());
            let bits_a: Vec<u32> = a.vector.iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u32> = b.vector.iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
            assert_eq!(a.trait_scores, b.trait_scores);
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let mut recs = records(12, 4);
        write_shard(a.path(), "toy", 2, 4, &recs).unwrap();
        recs.reverse();
        write_shard(b.path(), "toy", 2, 4, &recs).unwrap();
        for f in [MANIFEST, INDEX, PAYLOAD] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        write_shard(dir.path(), "toy", 2, 8, &records(10, 8)).unwrap();
        let p = dir.path().join(PAYLOAD);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_shard(dir.path()), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn wrong_width_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut recs = records(3, 8);
        recs[1].vector.pop();
        assert!(matches!(write_shard(dir.path(), "toy", 2, 8, &recs), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn schema_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        write_shard(dir.path(), "toy", 2, 8, &records(2, 8)).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&p).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_shard(dir.path()), Err(Error::SchemaMismatch(_))));
    }
}
