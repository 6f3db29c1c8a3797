//! DBSCAN over a precomputed distance matrix.
//!
//! Neighborhoods are `{v : dist[u][v] < eps}` and include `u` itself; `u` is
//! a core point when its neighborhood has at least `min_num` members. Points
//! are visited in ascending index order, so a border point reachable from
//! several clusters joins the one whose smallest core index is lowest.
//! Cluster ids are finally renumbered by ascending smallest member index.

use std::collections::{HashMap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_num: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        DbscanParams { eps: 0.5, min_num: 4 }
    }
}

impl DbscanParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("dbscan eps must be > 0".into()));
        }
        if self.min_num == 0 {
            return Err(Error::InvalidConfig("dbscan min_num must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-instance cluster assignment; `None` marks an outlier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabeling {
    labels: Vec<Option<usize>>,
    members: Vec<Vec<usize>>,
}

impl PseudoLabeling {
    /// Builds a labeling from raw labels, which must already be contiguous in `[0, Y)`.
    pub fn from_labels(labels: Vec<Option<usize>>) -> Result<Self> {
        let y = labels.iter().flatten().map(|&l| l + 1).max().unwrap_or(0);
        let mut members = vec![Vec::new(); y];
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = l {
                members[*l].push(i);
            }
        }
        if let Some(j) = members.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCluster(j));
        }
        Ok(PseudoLabeling { labels, members })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }

    /// Number of instances that belong to some cluster.
    pub fn num_clustered(&self) -> usize {
        self.labels.len() - self.num_outliers()
    }

    pub fn num_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn outliers(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_none())
            .collect()
    }

    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    /// `index,label` rows with `-1` for outliers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            match l {
                Some(l) => out.push_str(&format!("{i},{l}\n")),
                None => out.push_str(&format!("{i},-1\n")),
            }
        }
        out
    }
}

pub fn dbscan(dist: &Mat, params: &DbscanParams) -> Result<PseudoLabeling> {
    params.validate()?;
    let n = dist.rows();
    if dist.cols() != n {
        return Err(Error::DimMismatch {
            expected: n,
            found: dist.cols(),
        });
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|u| {
            let row = dist.row(u);
            (0..n).filter(|&v| v == u || row[v] < params.eps).collect()
        })
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= params.min_num).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !is_core[start] || labels[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        labels[start] = Some(id);
        queue.push_back(start);
        while let Some(u) = queue.pop_front() {
            for &v in &neighbors[u] {
                if labels[v].is_none() {
                    labels[v] = Some(id);
                    if is_core[v] {
                        queue.push_back(v);
                    }
                }
            }
        }
    }
    PseudoLabeling::from_labels(renumber_by_first_member(&labels))
}

/// Relabels clusters in order of their smallest member index.
pub fn renumber_by_first_member(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|l| {
                let k = map.len();
                *map.entry(l).or_insert(k)
            })
        })
        .collect()
}

/// Mean over clusters of the majority-identity fraction. Outliers are ignored.
pub fn clustering_accuracy(labeling: &PseudoLabeling, true_identities: &[i64]) -> Result<f64> {
    if labeling.num_clusters() == 0 {
        return Err(Error::NoClusters);
    }
    if true_identities.len() != labeling.len() {
        return Err(Error::DimMismatch {
            expected: labeling.len(),
            found: true_identities.len(),
        });
    }
    let total: f64 = (0..labeling.num_clusters())
        .map(|j| {
            let members = labeling.members(j);
            let mut counts: HashMap<i64, usize> = HashMap::new();
            for &i in members {
                *counts.entry(true_identities[i]).or_default() += 1;
            }
            let majority = counts.values().copied().max().unwrap_or(0);
            majority as f64 / members.len() as f64
        })
        .sum();
    Ok(total / labeling.num_clusters() as f64)
}
