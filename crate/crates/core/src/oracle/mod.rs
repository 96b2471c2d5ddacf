//! Synthetic data with known trait directions, plus a deterministic toy
//! backend and completion provider.

pub mod provider;
pub mod toy;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::activations::{ActivationRecord, Position};
use crate::error::{Error, Result};
use crate::psychometrics::Trait;

pub use provider::ToyProvider;
pub use toy::{ToyBackend, ToyConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    /// Unit vector orthogonal to every trait direction.
    pub v: Vec<f64>,
    /// Distractor variance as a multiple of the per-trait score variance.
    pub variance_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedModel {
    pub d: usize,
    /// Orthonormal directions for the first `traits.len()` traits in
    /// canonical order.
    pub traits: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub distractor: Option<Distractor>,
    pub seed: u64,
}

impl PlantedModel {
    /// Orthonormalizes `n_traits + 1` Gaussian columns; the spare column is
    /// kept for an optional distractor.
    pub fn new(d: usize, n_traits: usize, noise_sigma: f64, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&n_traits) {
            return Err(Error::InvalidArgument(format!("n_traits must be 1..=5, got {n_traits}")));
        }
        if d < n_traits + 1 {
            return Err(Error::InvalidArgument(format!("d = {d} is too small for {n_traits} traits and a distractor")));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be finite and >= 0, got {noise_sigma}")));
        }
        let q = orthonormal_columns(d, n_traits + 1, seed);
        Ok(PlantedModel {
            d,
            traits: q[..n_traits].to_vec(),
            noise_sigma,
            distractor: None,
            seed,
        })
    }

    pub fn with_distractor(mut self, variance_ratio: f64) -> Self {
        let q = orthonormal_columns(self.d, self.traits.len() + 1, self.seed);
        self.distractor = Some(Distractor {
            v: q[self.traits.len()].clone(),
            variance_ratio,
        });
        self
    }

    pub fn direction(&self, t: Trait) -> Option<&[f64]> {
        self.traits.get(t.index()).map(Vec::as_slice)
    }
}

/// `k` orthonormal columns of a seeded `d x k` Gaussian matrix.
fn orthonormal_columns(d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Mat::<f64>::from_fn(d, k, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.compute_thin_Q(), qr.thin_R());
    (0..k)
        .map(|j| {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            (0..d).map(|i| q[(i, j)] * sign).collect()
        })
        .collect()
}

/// How synthetic trait totals are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSampling {
    /// Uniform over the integers 10..=50.
    Uniform,
    /// Sum of ten uniform 1..=5 item values.
    Likert,
    /// Uniform choice from the listed totals.
    Levels(Vec<u32>),
}

impl ScoreSampling {
    fn draw(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self {
            ScoreSampling::Uniform => rng.random_range(10..=50),
            ScoreSampling::Likert => (0..10).map(|_| rng.random_range(1..=5u32)).sum(),
            ScoreSampling::Levels(l) => l[rng.random_range(0..l.len())],
        }
    }

    /// Population variance of the drawn totals.
    pub fn variance(&self) -> f64 {
        match self {
            ScoreSampling::Uniform => (41.0 * 41.0 - 1.0) / 12.0,
            ScoreSampling::Likert => 10.0 * 2.0,
            ScoreSampling::Levels(l) => {
                let n = l.len() as f64;
                let m = l.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
                l.iter().map(|&x| (f64::from(x) - m).powi(2)).sum::<f64>() / n
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let ScoreSampling::Levels(l) = self {
            let mut u = l.clone();
            u.sort_unstable();
            u.dedup();
            if u.len() < 2 {
                return Err(Error::InvalidArgument("score levels need at least two distinct values".into()));
            }
            if u.iter().any(|s| !(10..=50).contains(s)) {
                return Err(Error::InvalidArgument("score levels must lie in 10..=50".into()));
            }
        }
        Ok(())
    }
}

/// `a = sum_t s_t u_t + z * sqrt(ratio * var_s) * v + sigma * eta` per
/// character and layer. Scores and `z` are shared across layers; noise is
/// drawn per layer. Traits without a planted direction still get scores.
pub fn generate_dataset(planted: &PlantedModel, n_characters: usize, sampling: &ScoreSampling, layers: usize) -> Result<Vec<ActivationRecord>> {
    if n_characters < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 characters, got {n_characters}")));
    }
    if layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    sampling.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(planted.seed ^ 0x5eed_da7a);
    let dist_scale = planted
        .distractor
        .as_ref()
        .map(|dv| (dv.variance_ratio * sampling.variance()).sqrt());
    let mut characters = Vec::with_capacity(n_characters);
    for _ in 0..n_characters {
        let scores: [u32; 5] = std::array::from_fn(|_| sampling.draw(&mut rng));
        let z: f64 = rng.sample(StandardNormal);
        characters.push((scores, z));
    }
    for t in 0..planted.traits.len() {
        let first = characters[0].0[t];
        if characters.iter().all(|c| c.0[t] == first) {
            return Err(Error::InvalidArgument(format!("trait {} drew a single score; use more characters", Trait::ALL[t])));
        }
    }
    let mut records = Vec::with_capacity(n_characters * layers);
    for (i, (scores, z)) in characters.iter().enumerate() {
        let mut base = vec![0.0f64; planted.d];
        for (t, u) in planted.traits.iter().enumerate() {
            let s = f64::from(scores[t]);
            base.iter_mut().zip(u).for_each(|(a, x)| *a += s * x);
        }
        if let (Some(dv), Some(scale)) = (&planted.distractor, dist_scale) {
            base.iter_mut().zip(&dv.v).for_each(|(a, x)| *a += z * scale * x);
        }
        for layer in 0..layers {
            let vector = base
                .iter()
                .map(|&a| {
                    let eta: f64 = if planted.noise_sigma > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    (a + planted.noise_sigma * eta) as f32
                })
                .collect();
            records.push(ActivationRecord {
                character_id: format!("synthetic-{i:04}"),
                instruction_id: 0,
                layer: layer as u32,
                position: Position::LastInputToken,
                vector,
                trait_scores: *scores,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::directions::{cosine, fit_regression, group_by_score, Solver};

    #[test]
    fn orthonormal() {
        let p = PlantedModel::new(64, 5, 0.1, 0).unwrap().with_distractor(10.0);
        let mut all = p.traits.clone();
        all.push(p.distractor.as_ref().unwrap().v.clone());
        for i in 0..all.len() {
            for j in 0..all.len() {
                let g: f64 = all[i].iter().zip(&all[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g - want).abs() < 1e-10, "gram[{i}][{j}] = {g}");
            }
        }
    }

    #[test]
    fn seed_determinism() {
        let p = PlantedModel::new(16, 5, 0.1, 3).unwrap();
        let a = generate_dataset(&p, 20, &ScoreSampling::Uniform, 2).unwrap();
        let b = generate_dataset(&p, 20, &ScoreSampling::Uniform, 2).unwrap();
        assert_eq!(a, b);
        let q = PlantedModel::new(16, 5, 0.1, 4).unwrap();
        assert_ne!(a, generate_dataset(&q, 20, &ScoreSampling::Uniform, 2).unwrap());
    }

    #[test]
    fn noiseless_single_trait_recovery() {
        let p = PlantedModel::new(8, 1, 0.0, 1).unwrap();
        let recs = generate_dataset(&p, 30, &ScoreSampling::Levels(vec![10, 30, 50]), 1).unwrap();
        let g = group_by_score(&recs, Trait::Extraversion, 0, Position::LastInputToken).unwrap();
        assert_eq!(g.groups.len(), 3);
        let d = fit_regression(&g, Solver::default()).unwrap();
        assert!((cosine(&d.w, &p.traits[0]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_specs() {
        assert!(PlantedModel::new(5, 5, 0.0, 0).is_err());
        assert!(PlantedModel::new(8, 0, 0.0, 0).is_err());
        let p = PlantedModel::new(8, 1, 0.0, 0).unwrap();
        assert!(generate_dataset(&p, 1, &ScoreSampling::Uniform, 1).is_err());
        assert!(generate_dataset(&p, 10, &ScoreSampling::Levels(vec![30, 30]), 1).is_err());
    }
}
