//! Camera-aware unified distance used for clustering.
//!
//! The camera offset matrix holds the mean similarity of every camera pair.
//! Subtracting `lambda` times the matching offset from each instance-pair
//! similarity removes the shared camera component before clustering.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dim, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    /// `dist = 1 - S~`
    Direct,
    /// Row softmax of `S~`, rescaled by the row maximum and symmetrized.
    #[default]
    #[serde(alias = "softmax")]
    SoftmaxRelative,
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::Direct => "direct",
            DistanceMode::SoftmaxRelative => "softmax",
        })
    }
}

impl FromStr for DistanceMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "direct" => Ok(DistanceMode::Direct),
            "softmax" | "softmax_relative" => Ok(DistanceMode::SoftmaxRelative),
            other => Err(format!("unknown distance mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraOffsetMatrix {
    pub values: Mat,
    /// Camera pairs with no qualifying instance pair; their offset is 0.
    pub empty_pairs: Vec<(usize, usize)>,
}

impl CameraOffsetMatrix {
    pub fn get(&self, ci: usize, cj: usize) -> f64 {
        self.values.get(ci, cj)
    }

    pub fn n_cam(&self) -> usize {
        self.values.rows()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedDistance {
    pub dist: Mat,
    pub mode: DistanceMode,
    pub lambda: f64,
}

/// Mean similarity over instance pairs `u != v` for every camera pair.
pub fn camera_offsets(sim: &Mat, cameras: &[usize], n_cam: usize) -> Result<CameraOffsetMatrix> {
    let n = sim.rows();
    check_dim(n, sim.cols())?;
    check_dim(n, cameras.len())?;
    if let Some(&c) = cameras.iter().find(|&&c| c >= n_cam) {
        return Err(Error::IndexOutOfRange { index: c, len: n_cam });
    }
    let mut sums = Mat::zeros(n_cam, n_cam);
    let mut counts = vec![0usize; n_cam * n_cam];
    for u in 0..n {
        let row = sim.row(u);
        let cu = cameras[u];
        let base = cu * n_cam;
        let acc = sums.row_mut(cu);
        for (v, &s) in row.iter().enumerate() {
            if v != u {
                let cv = cameras[v];
                acc[cv] += s;
                counts[base + cv] += 1;
            }
        }
    }
    let mut empty_pairs = Vec::new();
    let mut values = Mat::zeros(n_cam, n_cam);
    for ci in 0..n_cam {
        for cj in 0..n_cam {
            let c = counts[ci * n_cam + cj];
            if c == 0 {
                if ci <= cj {
                    empty_pairs.push((ci, cj));
                }
            } else {
                values.set(ci, cj, sums.get(ci, cj) / c as f64);
            }
        }
    }
    Ok(CameraOffsetMatrix {
        values,
        empty_pairs,
    })
}

/// Builds the clustering distance from similarities and camera offsets.
pub fn unified(
    sim: &Mat,
    offsets: &CameraOffsetMatrix,
    cameras: &[usize],
    lambda: f64,
    mode: DistanceMode,
) -> Result<UnifiedDistance> {
    let n = sim.rows();
    check_dim(n, sim.cols())?;
    check_dim(n, cameras.len())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be finite and >= 0")));
    }
    if let Some(&c) = cameras.iter().find(|&&c| c >= offsets.n_cam()) {
        return Err(Error::IndexOutOfRange {
            index: c,
            len: offsets.n_cam(),
        });
    }
    let adjusted_row = |u: usize, out: &mut [f64]| {
        let cu = cameras[u];
        for (v, slot) in out.iter_mut().enumerate() {
            *slot = sim.get(u, v) - lambda * offsets.get(cu, cameras[v]);
        }
    };

    let mut dist = Mat::zeros(n, n);
    match mode {
        DistanceMode::Direct => {
            dist.as_mut_slice()
                .par_chunks_mut(n.max(1))
                .enumerate()
                .for_each(|(u, row)| {
                    adjusted_row(u, row);
                    row.iter_mut().for_each(|s| *s = 1.0 - *s);
                    row[u] = 0.0;
                });
        }
        DistanceMode::SoftmaxRelative => {
            // p'[u][v] = softmax_v(S~[u]) / max_w softmax_w(S~[u]) = exp(S~[u][v] - max_w S~[u][w])
            let mut rel = Mat::zeros(n, n);
            rel.as_mut_slice()
                .par_chunks_mut(n.max(1))
                .enumerate()
                .for_each(|(u, row)| {
                    adjusted_row(u, row);
                    let max = row
                        .iter()
                        .enumerate()
                        .filter(|&(v, _)| v != u)
                        .map(|(_, &s)| s)
                        .fold(f64::NEG_INFINITY, f64::max);
                    for (v, s) in row.iter_mut().enumerate() {
                        *s = if v == u { 0.0 } else { (*s - max).exp() };
                    }
                });
            dist.as_mut_slice()
                .par_chunks_mut(n.max(1))
                .enumerate()
                .for_each(|(u, row)| {
                    for (v, slot) in row.iter_mut().enumerate() {
                        *slot = if u == v {
                            0.0
                        } else {
                            1.0 - 0.5 * (rel.get(u, v) + rel.get(v, u))
                        };
                    }
                });
        }
    }
    Ok(UnifiedDistance { dist, mode, lambda })
}
