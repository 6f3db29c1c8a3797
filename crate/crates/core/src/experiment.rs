//! One generate → train → evaluate run, shared by the CLI and the test suites.

use crate::dataset::{generate, Dataset, GenConfig};
use crate::encoder::EncoderState;
use crate::error::Result;
use crate::evaluation::{evaluate, RetrievalResult};
use crate::trainer::{train, EpochReport, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunResult {
    pub reports: Vec<EpochReport>,
    pub retrieval: RetrievalResult,
    pub encoder: EncoderState,
}

impl RunResult {
    /// Clustering accuracy of the last epoch that produced clusters.
    pub fn final_clu_acc(&self) -> Option<f64> {
        self.reports.iter().rev().find_map(|r| r.clu_acc)
    }
}

pub fn run_on(dataset: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    let encoder = cfg.build_encoder(dataset)?;
    let out = train(dataset, encoder, cfg)?;
    let retrieval = evaluate(&out.encoder, dataset)?;
    Ok(RunResult {
        reports: out.reports,
        retrieval,
        encoder: out.encoder,
    })
}

/// Generates data with `seed`, trains with the same seed, and evaluates.
pub fn run_seeded(gen: &GenConfig, cfg: &TrainConfig, seed: u64) -> Result<RunResult> {
    let dataset = generate(&GenConfig { seed, ..gen.clone() })?;
    run_on(&dataset, &TrainConfig { seed, ..cfg.clone() })
}
