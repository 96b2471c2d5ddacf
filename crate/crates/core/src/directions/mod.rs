//! Trait directions: score-grouped averaging, least-squares fits, SVD
//! baselines and direction geometry.

pub mod linalg;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationRecord, Position};
use crate::error::{Error, Result};
use crate::psychometrics::Trait;

pub use linalg::{cosine, least_squares, principal_axes, Solver};

pub const DIRECTIONS_SCHEMA_VERSION: &str = "persona-probe/directions/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Regression,
    Svd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Regression => "regression",
            Method::Svd => "svd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regression" | "reg" => Ok(Method::Regression),
            "svd" => Ok(Method::Svd),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

/// Activations averaged per integer trait total.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedActivations {
    pub trait_: Trait,
    pub layer: u32,
    pub position: Position,
    /// score -> (mean vector, member count)
    pub groups: BTreeMap<u32, (Vec<f64>, usize)>,
}

impl GroupedActivations {
    pub fn hidden_dim(&self) -> usize {
        self.groups.values().next().map_or(0, |(m, _)| m.len())
    }

    pub fn total_count(&self) -> usize {
        self.groups.values().map(|(_, c)| c).sum()
    }
}

/// Groups the records at (`layer`, `position`) by their total for `trait_`.
/// Records at other layers or positions are ignored.
pub fn group_by_score(records: &[ActivationRecord], trait_: Trait, layer: u32, position: Position) -> Result<GroupedActivations> {
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    let mut d = None;
    for r in records.iter().filter(|r| r.layer == layer && r.position == position) {
        let expected = *d.get_or_insert(r.vector.len());
        if r.vector.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: r.vector.len(),
            });
        }
        let (acc, count) = sums
            .entry(r.trait_scores[trait_.index()])
            .or_insert_with(|| (vec![0.0; expected], 0));
        for (a, &x) in acc.iter_mut().zip(&r.vector) {
            *a += f64::from(x);
        }
        *count += 1;
    }
    if sums.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (acc, count) in sums.values_mut() {
        let n = *count as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    Ok(GroupedActivations {
        trait_,
        layer,
        position,
        groups: sums,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub r2_grouped: f64,
    pub residual_var: f64,
    pub n_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitDirection {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub layer: u32,
    pub position: Position,
    pub method: Method,
    /// Set for per-instruction fits only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction_id: Option<u32>,
    pub b: f64,
    pub fit: FitStats,
    /// Stored as 32-bit floats on disk.
    #[serde(serialize_with = "ser_f32", deserialize_with = "de_f32")]
    pub w: Vec<f64>,
}

fn ser_f32<S: serde::Serializer>(w: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(w.iter().map(|&x| x as f32))
}

fn de_f32<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let v: Vec<f32> = Deserialize::deserialize(d)?;
    Ok(v.into_iter().map(f64::from).collect())
}

impl TraitDirection {
    pub fn hidden_dim(&self) -> usize {
        self.w.len()
    }

    pub fn norm(&self) -> f64 {
        linalg::norm(&self.w)
    }
}

fn fit_stats(pairs: &[(&Vec<f64>, f64)], w: &[f64], b: f64) -> FitStats {
    let n = pairs.len() as f64;
    let ym = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in pairs {
        let r = y - (linalg::dot(w, x) + b);
        ss_res += r * r;
        ss_tot += (y - ym) * (y - ym);
    }
    FitStats {
        r2_grouped: if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 },
        residual_var: ss_res / n,
        n_groups: pairs.len(),
    }
}

/// Least-squares fit of score on group mean, `s = w.a + b`.
pub fn fit_regression(grouped: &GroupedActivations, solver: Solver) -> Result<TraitDirection> {
    if grouped.groups.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "{} layer {} {}: need at least 2 score groups, got {}",
            grouped.trait_,
            grouped.layer,
            grouped.position,
            grouped.groups.len()
        )));
    }
    let rows: Vec<Vec<f64>> = grouped.groups.values().map(|(m, _)| m.clone()).collect();
    let y: Vec<f64> = grouped.groups.keys().map(|&s| f64::from(s)).collect();
    let (w, b) = least_squares(&rows, &y, solver).map_err(|e| match e {
        Error::DegenerateInput(_) => Error::DegenerateInput(format!(
            "{} layer {} {}: group means are identical",
            grouped.trait_, grouped.layer, grouped.position
        )),
        other => other,
    })?;
    let pairs: Vec<(&Vec<f64>, f64)> = rows.iter().zip(y.iter().copied()).collect();
    let fit = fit_stats(&pairs, &w, b);
    Ok(TraitDirection {
        trait_: grouped.trait_,
        layer: grouped.layer,
        position: grouped.position,
        method: Method::Regression,
        instruction_id: None,
        b,
        fit,
        w,
    })
}

/// Top-`k` axes of maximal variance of the individual records at
/// (`layer`, `position`), ignoring scores. `b` is 0; the fit statistics
/// describe a univariate regression of the `trait_` total on the projection.
pub fn fit_svd(records: &[ActivationRecord], trait_: Trait, layer: u32, position: Position, k: usize) -> Result<Vec<TraitDirection>> {
    let selected: Vec<&ActivationRecord> = records
        .iter()
        .filter(|r| r.layer == layer && r.position == position)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rows: Vec<Vec<f64>> = selected
        .iter()
        .map(|r| r.vector.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let y: Vec<f64> = selected.iter().map(|r| f64::from(r.trait_scores[trait_.index()])).collect();
    svd_directions(&rows, &y, trait_, layer, position, k)
}

/// As [`fit_svd`] but on score-group means.
pub fn fit_svd_grouped(grouped: &GroupedActivations, k: usize) -> Result<Vec<TraitDirection>> {
    let rows: Vec<Vec<f64>> = grouped.groups.values().map(|(m, _)| m.clone()).collect();
    let y: Vec<f64> = grouped.groups.keys().map(|&s| f64::from(s)).collect();
    svd_directions(&rows, &y, grouped.trait_, grouped.layer, grouped.position, k)
}

fn svd_directions(rows: &[Vec<f64>], y: &[f64], trait_: Trait, layer: u32, position: Position, k: usize) -> Result<Vec<TraitDirection>> {
    let axes = principal_axes(rows, k)?;
    Ok(axes
        .into_iter()
        .map(|w| {
            let proj: Vec<Vec<f64>> = rows.iter().map(|r| vec![linalg::dot(&w, r)]).collect();
            let fit = match least_squares(&proj, y, Solver::MinNorm) {
                Ok((c, b0)) => {
                    let pairs: Vec<(&Vec<f64>, f64)> = proj.iter().zip(y.iter().copied()).collect();
                    fit_stats(&pairs, &c, b0)
                }
                Err(_) => FitStats {
                    r2_grouped: 0.0,
                    residual_var: 0.0,
                    n_groups: rows.len(),
                },
            };
            TraitDirection {
                trait_,
                layer,
                position,
                method: Method::Svd,
                instruction_id: None,
                b: 0.0,
                fit,
                w,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentLabel {
    #[serde(rename = "trait")]
    pub trait_: Trait,
    pub layer: u32,
    pub position: Position,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub labels: Vec<AlignmentLabel>,
    pub values: Vec<Vec<f64>>,
}

/// Pairwise cosines between direction vectors.
pub fn alignment(directions: &[TraitDirection]) -> Result<AlignmentMatrix> {
    let n = directions.len();
    if let Some(first) = directions.first() {
        for d in directions {
            if d.w.len() != first.w.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.w.len(),
                    actual: d.w.len(),
                });
            }
        }
    }
    if directions.iter().any(|d| d.norm() == 0.0) {
        return Err(Error::ZeroVector);
    }
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        values[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&directions[i].w, &directions[j].w)?;
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    let labels = directions
        .iter()
        .map(|d| AlignmentLabel {
            trait_: d.trait_,
            layer: d.layer,
            position: d.position,
            method: d.method,
        })
        .collect();
    Ok(AlignmentMatrix { labels, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    pub schema_version: String,
    pub model_id: String,
    pub entries: Vec<TraitDirection>,
}

impl DirectionSet {
    pub fn new(model_id: impl Into<String>, entries: Vec<TraitDirection>) -> Self {
        DirectionSet {
            schema_version: DIRECTIONS_SCHEMA_VERSION.into(),
            model_id: model_id.into(),
            entries,
        }
    }

    /// The pooled (all-instruction) direction for a triple, first axis for SVD.
    pub fn get(&self, trait_: Trait, layer: u32, position: Position, method: Method) -> Option<&TraitDirection> {
        self.entries.iter().find(|e| {
            e.trait_ == trait_ && e.layer == layer && e.position == position && e.method == method && e.instruction_id.is_none()
        })
    }

    /// Per-layer vectors for one (trait, position, method).
    pub fn layer_vectors(&self, trait_: Trait, position: Position, method: Method) -> BTreeMap<u32, &[f64]> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            if e.trait_ == trait_ && e.position == position && e.method == method && e.instruction_id.is_none() {
                out.entry(e.layer).or_insert(e.w.as_slice());
            }
        }
        out
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.entries.first().map(TraitDirection::hidden_dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: DirectionSet = serde_json::from_str(&text).map_err(|e| Error::SchemaMismatch(format!("{}: {e}", path.display())))?;
        if set.schema_version != DIRECTIONS_SCHEMA_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "{}: schema {} (expected {DIRECTIONS_SCHEMA_VERSION})",
                path.display(),
                set.schema_version
            )));
        }
        if let Some(d) = set.hidden_dim() {
            if let Some(bad) = set.entries.iter().find(|e| e.w.len() != d) {
                return Err(Error::SchemaMismatch(format!("mixed hidden dims {d} and {}", bad.w.len())));
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub traits: Vec<Trait>,
    /// `None` fits every layer present in the records.
    pub layers: Option<Vec<u32>>,
    pub positions: Vec<Position>,
    pub method: Method,
    pub solver: Solver,
    /// Number of SVD axes kept per triple.
    pub svd_k: usize,
    /// Also fit each instruction separately.
    pub per_instruction: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            traits: Trait::ALL.to_vec(),
            layers: None,
            positions: Position::ALL.to_vec(),
            method: Method::Regression,
            solver: Solver::default(),
            svd_k: 1,
            per_instruction: false,
        }
    }
}

fn fit_one(records: &[ActivationRecord], t: Trait, layer: u32, position: Position, opts: &FitOptions) -> Result<Vec<TraitDirection>> {
    match opts.method {
        Method::Regression => Ok(vec![fit_regression(&group_by_score(records, t, layer, position)?, opts.solver)?]),
        Method::Svd => fit_svd(records, t, layer, position, opts.svd_k),
    }
}

/// Fits every requested (trait, layer, position) in parallel. Triples with no
/// records (e.g. mean-generated rows that were skipped) are omitted.
pub fn fit_all(records: &[ActivationRecord], model_id: &str, opts: &FitOptions) -> Result<DirectionSet> {
    let layers: Vec<u32> = match &opts.layers {
        Some(l) => l.clone(),
        None => {
            let mut l: Vec<u32> = records.iter().map(|r| r.layer).collect();
            l.sort_unstable();
            l.dedup();
            l
        }
    };
    let mut instructions: Vec<Option<u32>> = vec![None];
    if opts.per_instruction {
        let mut ids: Vec<u32> = records.iter().map(|r| r.instruction_id).collect();
        ids.sort_unstable();
        ids.dedup();
        instructions.extend(ids.into_iter().map(Some));
    }
    let mut jobs = Vec::new();
    for &instr in &instructions {
        for &t in &opts.traits {
            for &l in &layers {
                for &p in &opts.positions {
                    jobs.push((instr, t, l, p));
                }
            }
        }
    }
    let per_instr: BTreeMap<u32, Vec<ActivationRecord>> = if opts.per_instruction {
        let mut m: BTreeMap<u32, Vec<ActivationRecord>> = BTreeMap::new();
        for r in records {
            m.entry(r.instruction_id).or_default().push(r.clone());
        }
        m
    } else {
        BTreeMap::new()
    };
    let fitted: Vec<Vec<TraitDirection>> = jobs
        .par_iter()
        .map(|&(instr, t, l, p)| {
            let subset = match instr {
                Some(i) => per_instr.get(&i).map(Vec::as_slice).unwrap_or(&[]),
                None => records,
            };
            match fit_one(subset, t, l, p, opts) {
                Ok(mut dirs) => {
                    dirs.iter_mut().for_each(|d| d.instruction_id = instr);
                    Ok(dirs)
                }
                Err(Error::EmptyInput) => Ok(Vec::new()),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok(DirectionSet::new(model_id, fitted.into_iter().flatten().collect()))
}
