//! Posterior-mean export and an arm-separation permutation test.

use rand::seq::SliceRandom;

use crate::data::DatasetManifest;
use crate::error::{Result, TltError};
use crate::model::TltModel;
use crate::seed;

/// One row per sample: id, label, treatment and posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    pub ids: Vec<String>,
    pub y: Vec<usize>,
    pub t: Vec<u8>,
    pub mu: Vec<Vec<f64>>,
}

impl LatentTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Columns `id,y,t,mu_0,...,mu_{L-1}`.
    pub fn to_csv(&self) -> String {
        let latent = self.mu.first().map_or(0, Vec::len);
        let mut s = String::from("id,y,t");
        for j in 0..latent {
            s.push_str(&format!(",mu_{j}"));
        }
        s.push('\n');
        for i in 0..self.len() {
            s.push_str(&format!("{},{},{}", self.ids[i], self.y[i], self.t[i]));
            for v in &self.mu[i] {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluation-mode posterior means for every record.
pub fn export_latents(model: &TltModel, data: &DatasetManifest) -> Result<LatentTable> {
    Ok(LatentTable {
        ids: data.records.iter().map(|s| s.id.clone()).collect(),
        y: data.records.iter().map(|s| s.y).collect(),
        t: data.records.iter().map(|s| s.t).collect(),
        mu: model.posterior_means(&data.records)?,
    })
}

/// Euclidean distance between the treated and untreated centroids.
pub fn centroid_distance(mu: &[Vec<f64>], t: &[u8]) -> Result<f64> {
    let width = mu.first().map_or(0, Vec::len);
    let mut sums = [vec![0.0; width], vec![0.0; width]];
    let mut counts = [0usize; 2];
    for (row, arm) in mu.iter().zip(t) {
        let a = usize::from(*arm);
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(row) {
            *s += v;
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(TltError::EstimandUndefined("both treatment arms need at least one row".into()));
    }
    Ok(sums[1]
        .iter()
        .zip(&sums[0])
        .map(|(a, b)| (a / counts[1] as f64 - b / counts[0] as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub observed: f64,
    /// 95th percentile of the permuted-label distances.
    pub null_q95: f64,
    /// `(1 + #{null >= observed}) / (1 + permutations)`.
    pub p_value: f64,
}

pub fn centroid_permutation_test(mu: &[Vec<f64>], t: &[u8], permutations: usize, seed_value: u64) -> Result<PermutationTest> {
    if permutations == 0 {
        return Err(TltError::Domain("at least one permutation is needed".into()));
    }
    let observed = centroid_distance(mu, t)?;
    let mut rng = seed::rng(seed::derive(seed_value, &["permutation".into()]));
    let mut labels = t.to_vec();
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(&mut rng);
        null.push(centroid_distance(mu, &labels)?);
    }
    let exceed = null.iter().filter(|d| **d >= observed).count();
    null.sort_by(f64::total_cmp);
    let rank = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations);
    Ok(PermutationTest {
        observed,
        null_q95: null[rank - 1],
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
    })
}
