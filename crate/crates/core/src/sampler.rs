//! P x K batches over pseudo clusters with camera coverage.

use serde::{Deserialize, Serialize};

use crate::clustering::PseudoLabeling;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Clusters per batch.
    pub p: usize,
    /// Instances per cluster.
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { p: 16, k: 4 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidConfig("sampler p must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig("sampler k must be >= 2".into()));
        }
        Ok(())
    }
}

/// One cluster's slot inside a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub cluster: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub slots: Vec<Slot>,
}

impl Batch {
    /// Instance indices in slot order.
    pub fn indices(&self) -> Vec<usize> {
        self.slots.iter().flat_map(|s| s.members.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles clusters into groups of `p` and draws `k` members per cluster.
///
/// Clusters spanning two or more cameras get one member from each of two
/// distinct cameras before the remaining `k - 2` picks. Clusters smaller
/// than `k` are drawn with replacement.
pub fn epoch_batches(
    labeling: &PseudoLabeling,
    cameras: &[usize],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<Batch>> {
    cfg.validate()?;
    if labeling.num_clusters() == 0 {
        return Err(Error::NoClusters);
    }
    if cameras.len() != labeling.len() {
        return Err(Error::DimMismatch {
            expected: labeling.len(),
            found: cameras.len(),
        });
    }
    let mut order: Vec<usize> = (0..labeling.num_clusters()).collect();
    rng.shuffle(&mut order);
    let batches = order
        .chunks(cfg.p)
        .map(|group| Batch {
            slots: group
                .iter()
                .map(|&j| Slot {
                    cluster: j,
                    members: draw_slot(labeling.members(j), cameras, cfg.k, rng),
                })
                .collect(),
        })
        .collect();
    Ok(batches)
}

fn draw_slot(members: &[usize], cameras: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cams: Vec<usize> = members.iter().map(|&i| cameras[i]).collect();
    cams.sort_unstable();
    cams.dedup();

    if cams.len() < 2 {
        return draw_unconstrained(members, k, &[], rng);
    }
    // Two distinct cameras, then one member from each.
    let picked = rng.sample_indices(cams.len(), 2);
    let seeds: Vec<usize> = picked
        .iter()
        .map(|&c| {
            let pool: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| cameras[i] == cams[c])
                .collect();
            pool[rng.below(pool.len())]
        })
        .collect();
    draw_unconstrained(members, k - 2, &seeds, rng)
}

/// Appends `k` draws to `fixed`: without replacement from the members not in
/// `fixed` when enough remain, otherwise with replacement from all members.
fn draw_unconstrained(members: &[usize], k: usize, fixed: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut out = fixed.to_vec();
    let rest: Vec<usize> = members
        .iter()
        .copied()
        .filter(|i| !fixed.contains(i))
        .collect();
    if rest.len() >= k {
        out.extend(rng.sample_indices(rest.len(), k).into_iter().map(|t| rest[t]));
    } else {
        out.extend((0..k).map(|_| members[rng.below(members.len())]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn distinct_cams(idx: &[usize], cameras: &[usize]) -> usize {
        let mut c: Vec<usize> = idx.iter().map(|&i| cameras[i]).collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    }

    #[test]
    fn single_batch_covers_two_cameras() {
        // 4 clusters of 6 members over cameras 0/1.
        let labels: Vec<Option<usize>> = (0..24).map(|i| Some(i / 6)).collect();
        let cameras: Vec<usize> = (0..24).map(|i| i % 2).collect();
        let l = PseudoLabeling::from_labels(labels).unwrap();
        let cfg = SamplerConfig { p: 4, k: 4 };
        let batches = epoch_batches(&l, &cameras, &cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 16);
        for slot in &batches[0].slots {
            assert_eq!(slot.members.len(), 4);
            assert!(distinct_cams(&slot.members, &cameras) >= 2);
            assert!(slot.members.iter().all(|&i| l.label(i) == Some(slot.cluster)));
            let mut uniq = slot.members.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 4);
        }
    }

    #[test]
    fn singleton_cluster_repeats() {
        let l = PseudoLabeling::from_labels(vec![None, Some(0), None]).unwrap();
        let batches =
            epoch_batches(&l, &[0, 1, 0], &SamplerConfig { p: 2, k: 4 }, &mut Rng::new(2)).unwrap();
        assert_eq!(batches[0].indices(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn deterministic_under_seed() {
        let labels: Vec<Option<usize>> = (0..40).map(|i| if i % 7 == 0 { None } else { Some(i % 5) }).collect();
        let cameras: Vec<usize> = (0..40).map(|i| (i / 3) % 3).collect();
        let l = PseudoLabeling::from_labels(labels).unwrap();
        let cfg = SamplerConfig { p: 2, k: 4 };
        let a = epoch_batches(&l, &cameras, &cfg, &mut Rng::new(9)).unwrap();
        let b = epoch_batches(&l, &cameras, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].len(), 4);
    }

    #[test]
    fn errors() {
        let none = PseudoLabeling::from_labels(vec![None]).unwrap();
        assert!(matches!(
            epoch_batches(&none, &[0], &SamplerConfig::default(), &mut Rng::new(0)),
            Err(Error::NoClusters)
        ));
        let one = PseudoLabeling::from_labels(vec![Some(0)]).unwrap();
        assert!(epoch_batches(&one, &[0], &SamplerConfig { p: 1, k: 1 }, &mut Rng::new(0)).is_err());
    }
}
