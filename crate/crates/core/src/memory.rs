//! Momentum memory banks.
//!
//! [`InstanceMemory`] keeps one temporal-ensembling feature per training
//! instance. [`ClusterMemory`] keeps one stochastically updated classifier
//! row per pseudo cluster. Every row is renormalized after a blend.

use crate::clustering::PseudoLabeling;
use crate::dataset::TrainView;
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::numerics::{blend, check_dim, l2_normalize, l2_normalize_in_place, Mat, Rng};

fn check_momentum(mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::InvalidConfig(format!("momentum {mu} outside [0, 1]")));
    }
    Ok(())
}

/// `row <- normalize(mu * row + (1 - mu) * f)`. `mu == 1` leaves the row untouched.
fn momentum_update(bank: &mut Mat, i: usize, mu: f64, f: &[f64]) -> Result<()> {
    if i >= bank.rows() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: bank.rows(),
        });
    }
    check_dim(bank.cols(), f.len())?;
    if mu == 1.0 {
        return Ok(());
    }
    let mut mixed = blend(mu, bank.row(i), 1.0 - mu, f);
    l2_normalize_in_place(&mut mixed)?;
    bank.row_mut(i).copy_from_slice(&mixed);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMemory {
    features: Mat,
    mu_t: f64,
}

impl InstanceMemory {
    /// One forward pass over the training view.
    pub fn init(encoder: &EncoderState, view: &TrainView<'_>, mu_t: f64) -> Result<Self> {
        let rows = (0..view.len())
            .map(|i| encoder.forward(view.input(i)))
            .collect::<Result<Vec<_>>>()?;
        let features = if rows.is_empty() {
            Mat::zeros(0, encoder.d_out())
        } else {
            Mat::from_rows(&rows)?
        };
        Self::from_features(features, mu_t)
    }

    pub fn from_features(features: Mat, mu_t: f64) -> Result<Self> {
        check_momentum(mu_t)?;
        Ok(InstanceMemory { features, mu_t })
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn mu(&self) -> f64 {
        self.mu_t
    }

    pub fn update(&mut self, i: usize, f: &[f64]) -> Result<()> {
        momentum_update(&mut self.features, i, self.mu_t, f)
    }

    /// Overwrites row `i` with `f` (no momentum).
    pub fn replace(&mut self, i: usize, f: &[f64]) -> Result<()> {
        momentum_update(&mut self.features, i, 0.0, f)
    }

    /// Re-encodes the listed rows with the current encoder.
    pub fn refresh_outliers(
        &mut self,
        encoder: &EncoderState,
        view: &TrainView<'_>,
        outliers: &[usize],
    ) -> Result<()> {
        for &i in outliers {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            let f = encoder.forward(view.input(i))?;
            self.features.row_mut(i).copy_from_slice(&f);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterMemory {
    centers: Mat,
    mu_s: f64,
}

impl ClusterMemory {
    /// Each cluster starts from the memory row of one uniformly drawn member.
    pub fn init(
        instances: &InstanceMemory,
        labeling: &PseudoLabeling,
        rng: &mut Rng,
        mu_s: f64,
    ) -> Result<Self> {
        check_momentum(mu_s)?;
        let d = instances.features().cols();
        let mut centers = Mat::zeros(labeling.num_clusters(), d);
        for j in 0..labeling.num_clusters() {
            let members = labeling.members(j);
            assert!(!members.is_empty(), "labeling contract: cluster {j} is empty");
            let r = members[rng.below(members.len())];
            centers.row_mut(j).copy_from_slice(instances.row(r));
        }
        Ok(ClusterMemory { centers, mu_s })
    }

    pub fn from_centers(centers: Mat, mu_s: f64) -> Result<Self> {
        check_momentum(mu_s)?;
        Ok(ClusterMemory { centers, mu_s })
    }

    pub fn centers(&self) -> &Mat {
        &self.centers
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.centers.row(j)
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn mu(&self) -> f64 {
        self.mu_s
    }

    pub fn update(&mut self, j: usize, f: &[f64]) -> Result<()> {
        momentum_update(&mut self.centers, j, self.mu_s, f)
    }
}

/// Normalized mean of memory rows over a uniformly drawn
/// `ceil(rho * |cluster|)`-subset of cluster `j`. `rho == 1` uses every member.
pub fn centroid(
    instances: &InstanceMemory,
    labeling: &PseudoLabeling,
    j: usize,
    rho: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!("centroid fraction {rho} outside (0, 1]")));
    }
    if j >= labeling.num_clusters() {
        return Err(Error::EmptyCluster(j));
    }
    let members = labeling.members(j);
    if members.is_empty() {
        return Err(Error::EmptyCluster(j));
    }
    let subset_len = subset_size(members.len(), rho);
    let mut chosen: Vec<usize> = if subset_len == members.len() {
        members.to_vec()
    } else {
        rng.sample_indices(members.len(), subset_len)
            .into_iter()
            .map(|k| members[k])
            .collect()
    };
    chosen.sort_unstable();
    let d = instances.features().cols();
    let mut sum = vec![0.0; d];
    for &i in &chosen {
        sum.iter_mut()
            .zip(instances.row(i))
            .for_each(|(s, v)| *s += v);
    }
    let n = chosen.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    l2_normalize(&sum)
}

/// `ceil(rho * n)` clamped to `[1, n]`, tolerant of rounding in `rho * n`.
pub fn subset_size(n: usize, rho: f64) -> usize {
    ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1))
}
