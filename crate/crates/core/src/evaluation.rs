//! Retrieval metrics (mAP and CMC) under the cross-camera protocol: gallery
//! entries sharing both identity and camera with the query are dropped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Instance, Split, UNKNOWN_IDENTITY};
use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};

/// Ranks reported in the results JSON.
pub const REPORTED_RANKS: [usize; 4] = [1, 5, 10, 20];

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub map: f64,
    /// `cmc[r - 1]` is the fraction of queries with a match in the top `r`.
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub skipped: usize,
}

impl RetrievalResult {
    pub fn rank(&self, r: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(r.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn to_json(&self) -> ResultsJson {
        let ranks: Vec<usize> = REPORTED_RANKS
            .iter()
            .copied()
            .filter(|&r| r <= self.cmc.len())
            .collect();
        ResultsJson {
            map: self.map,
            cmc: ranks.iter().map(|&r| self.rank(r)).collect(),
            cmc_ranks: ranks,
            num_queries: self.num_queries,
            skipped: self.skipped,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsJson {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc: Vec<f64>,
    pub cmc_ranks: Vec<usize>,
    pub num_queries: usize,
    pub skipped: usize,
}

/// Embedded retrieval set: unit feature rows with identity and camera labels.
#[derive(Clone, Debug)]
pub struct LabeledFeatures {
    pub features: Mat,
    pub identities: Vec<i64>,
    pub cameras: Vec<usize>,
}

impl LabeledFeatures {
    pub fn encode(encoder: &EncoderState, items: &[&Instance]) -> Result<Self> {
        if let Some(x) = items.iter().find(|x| x.true_identity == UNKNOWN_IDENTITY) {
            return Err(Error::InvalidConfig(format!(
                "instance {} has no identity; evaluation needs ground truth",
                x.index
            )));
        }
        let rows = items
            .iter()
            .map(|x| encoder.forward((*x).into()))
            .collect::<Result<Vec<_>>>()?;
        let features = if rows.is_empty() {
            Mat::zeros(0, encoder.d_out())
        } else {
            Mat::from_rows(&rows)?
        };
        Ok(LabeledFeatures {
            features,
            identities: items.iter().map(|x| x.true_identity).collect(),
            cameras: items.iter().map(|x| x.camera).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

/// Embeds the query and gallery splits with `encoder` and scores retrieval.
pub fn evaluate(encoder: &EncoderState, dataset: &Dataset) -> Result<RetrievalResult> {
    let query: Vec<&Instance> = dataset.split(Split::Query).collect();
    let gallery: Vec<&Instance> = dataset.split(Split::Gallery).collect();
    evaluate_sets(encoder, &query, &gallery)
}

pub fn evaluate_sets(
    encoder: &EncoderState,
    query: &[&Instance],
    gallery: &[&Instance],
) -> Result<RetrievalResult> {
    let q = LabeledFeatures::encode(encoder, query)?;
    let g = LabeledFeatures::encode(encoder, gallery)?;
    evaluate_features(&q, &g)
}

/// Outcome for one query: `None` when it has no valid match.
fn score_query(qi: usize, query: &LabeledFeatures, gallery: &LabeledFeatures) -> Option<(f64, usize)> {
    let qf = query.features.row(qi);
    let (qid, qcam) = (query.identities[qi], query.cameras[qi]);
    let mut ranked: Vec<(f64, usize)> = (0..gallery.len())
        .filter(|&g| !(gallery.identities[g] == qid && gallery.cameras[g] == qcam))
        .map(|g| (dot(qf, gallery.features.row(g)), g))
        .collect();
    // partial_cmp so that -0.0 and 0.0 tie; scores are never NaN for finite features.
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });

    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = None;
    for (pos, &(_, g)) in ranked.iter().enumerate() {
        if gallery.identities[g] == qid {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            first_hit.get_or_insert(pos);
        }
    }
    first_hit.map(|first| (precision_sum / hits as f64, first))
}

pub fn evaluate_features(query: &LabeledFeatures, gallery: &LabeledFeatures) -> Result<RetrievalResult> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if query.features.cols() != gallery.features.cols() {
        return Err(Error::DimMismatch {
            expected: query.features.cols(),
            found: gallery.features.cols(),
        });
    }
    let outcomes: Vec<Option<(f64, usize)>> = (0..query.len())
        .into_par_iter()
        .map(|qi| score_query(qi, query, gallery))
        .collect();

    let r = gallery.len();
    let mut first_hits = vec![0usize; r];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (ap, first) in outcomes.iter().flatten() {
        ap_sum += ap;
        first_hits[*first] += 1;
        valid += 1;
    }
    let skipped = query.len() - valid;
    if skipped > 0 {
        log_skip(skipped);
    }
    let mut cmc = Vec::with_capacity(r);
    let mut running = 0usize;
    for count in first_hits {
        running += count;
        cmc.push(if valid == 0 { 0.0 } else { running as f64 / valid as f64 });
    }
    Ok(RetrievalResult {
        map: if valid == 0 { 0.0 } else { ap_sum / valid as f64 },
        cmc,
        num_queries: valid,
        skipped,
    })
}

fn log_skip(skipped: usize) {
    if std::env::var_os("STOCHREID_QUIET").is_none() {
        eprintln!("warning: {skipped} queries skipped (no cross-camera match in gallery)");
    }
}
