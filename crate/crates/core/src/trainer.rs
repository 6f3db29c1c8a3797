//! The alternating cluster-then-train loop and its ablation variants.
//!
//! Each epoch clusters the instance memory, seeds the cluster memory from
//! it, then trains the encoder over P x K batches. Within a batch the loss is
//! computed against a classifier snapshot taken at batch start; memory
//! updates happen after the optimizer step and use the batch's embeddings.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{clustering_accuracy, dbscan, DbscanParams, PseudoLabeling};
use crate::dataset::{Dataset, TrainView};
use crate::distance::{camera_offsets, unified, DistanceMode};
use crate::encoder::{EncoderKind, EncoderState, OptimConfig};
use crate::error::{Error, Result};
use crate::loss::{batch_loss, LossConfig};
use crate::memory::{centroid, ClusterMemory, InstanceMemory};
use crate::numerics::{dot, pairwise_similarity, streams, Mat, Rng};
use crate::sampler::{epoch_batches, Batch, SamplerConfig};

/// How the contrastive classifiers are built and updated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Normalized mean of every member's memory row.
    Baseline,
    /// Cluster memory updated with a random member's instance-memory row.
    StochasticRandom,
    /// Cluster memory updated with each batch embedding ("last seen").
    StochasticOnline,
    /// Cluster memory updated once per batch with the member least similar to it.
    Hard,
    /// Normalized mean over a random `ceil(rho * |cluster|)` subset, redrawn per batch.
    PercentMean(f64),
}

impl Variant {
    pub fn uses_cluster_memory(&self) -> bool {
        matches!(
            self,
            Variant::StochasticRandom | Variant::StochasticOnline | Variant::Hard
        )
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Baseline => "baseline".into(),
            Variant::StochasticRandom => "stochastic_random".into(),
            Variant::StochasticOnline => "stochastic_online".into(),
            Variant::Hard => "hard".into(),
            Variant::PercentMean(rho) => format!("percent_mean({rho})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Linear,
            d_out: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub use_temporal: bool,
    pub use_camera_offset: bool,
    pub lambda: f64,
    pub mu_s: f64,
    pub mu_t: f64,
    pub loss: LossConfig,
    pub dbscan: DbscanParams,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub distance_mode: DistanceMode,
    pub seed: u64,
    /// Write wall-clock seconds into epoch reports. Off keeps reports reproducible.
    pub record_wall_time: bool,
    /// When set, per-epoch camera offsets and pseudo labels are dumped here as CSV.
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::StochasticOnline,
            use_temporal: true,
            use_camera_offset: true,
            lambda: 1.0,
            mu_s: 0.2,
            mu_t: 0.2,
            loss: LossConfig::default(),
            dbscan: DbscanParams::default(),
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            encoder: EncoderConfig::default(),
            epochs: 80,
            distance_mode: DistanceMode::default(),
            seed: 0,
            record_wall_time: false,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if let Variant::PercentMean(rho) = self.variant {
            if !(rho > 0.0 && rho <= 1.0) {
                return Err(Error::InvalidConfig(format!("percent_mean rho {rho} outside (0, 1]")));
            }
        }
        for (name, mu) in [("mu_s", self.mu_s), ("mu_t", self.mu_t)] {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::InvalidConfig(format!("{name} {mu} outside [0, 1]")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if self.encoder.d_out < 2 {
            return Err(Error::InvalidConfig("encoder.d_out must be >= 2".into()));
        }
        self.loss.validate()?;
        self.dbscan.validate()?;
        self.sampler.validate()?;
        self.optim.validate()
    }

    /// Initial encoder for `dataset`, drawn from the config's init stream.
    pub fn build_encoder(&self, dataset: &Dataset) -> Result<EncoderState> {
        let mut rng = Rng::stream(self.seed, streams::INIT);
        match self.encoder.kind {
            EncoderKind::Linear => EncoderState::linear(dataset.d_in, self.encoder.d_out, &mut rng),
            EncoderKind::FreeEmbedding => {
                EncoderState::free_embedding(dataset.len(), self.encoder.d_out, &mut rng)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub num_clusters: usize,
    pub outliers: usize,
    pub clu_acc: Option<f64>,
    pub mean_loss: Option<f64>,
    pub secs: f64,
    pub all_outliers: bool,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,Y,outliers,clu_acc,loss,secs";

impl EpochReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.10}"));
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.num_clusters,
            self.outliers,
            opt(self.clu_acc),
            opt(self.mean_loss),
            self.secs
        )
    }
}

pub fn reports_to_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub mean_loss: f64,
    /// Classifier rows the loss was computed against.
    pub classifiers: Mat,
    /// Pre-step embeddings, in batch order.
    pub embeddings: Vec<Vec<f64>>,
}

/// Stepwise driver for the training loop; [`train`] runs it end to end.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    view: TrainView<'a>,
    cameras: Vec<usize>,
    identities: Option<Vec<i64>>,
    encoder: EncoderState,
    instances: InstanceMemory,
    clusters: Option<ClusterMemory>,
    labeling: Option<PseudoLabeling>,
    memory_rng: Rng,
    sampler_rng: Rng,
    classifier_rng: Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// Validates the config and initializes the instance memory (once per run).
    pub fn new(dataset: &'a Dataset, encoder: EncoderState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let view = dataset.train_view();
        if view.is_empty() {
            return Err(Error::InvalidConfig("training split is empty".into()));
        }
        if dataset.n_cam == 0 {
            return Err(Error::InvalidConfig("dataset has no cameras".into()));
        }
        if encoder.kind() == EncoderKind::Linear && encoder.d_in() != dataset.d_in {
            return Err(Error::DimMismatch {
                expected: dataset.d_in,
                found: encoder.d_in(),
            });
        }
        let instances = InstanceMemory::init(&encoder, &view, cfg.mu_t)?;
        let identities = dataset.has_identities().then(|| dataset.train_identities());
        Ok(Trainer {
            cameras: view.cameras(),
            view,
            identities,
            instances,
            clusters: None,
            labeling: None,
            memory_rng: Rng::stream(cfg.seed, streams::MEMORY),
            sampler_rng: Rng::stream(cfg.seed, streams::SAMPLER),
            classifier_rng: Rng::stream(cfg.seed, streams::CLASSIFIER),
            epoch: 0,
            encoder,
            cfg,
        })
    }

    pub fn encoder(&self) -> &EncoderState {
        &self.encoder
    }

    pub fn into_encoder(self) -> EncoderState {
        self.encoder
    }

    pub fn instance_memory(&self) -> &InstanceMemory {
        &self.instances
    }

    pub fn cluster_memory(&self) -> Option<&ClusterMemory> {
        self.clusters.as_ref()
    }

    pub fn labeling(&self) -> Option<&PseudoLabeling> {
        self.labeling.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Distance matrix the next clustering step would use.
    pub fn clustering_distance(&self) -> Result<Mat> {
        let sim = pairwise_similarity(self.instances.features());
        let offsets = camera_offsets(&sim, &self.cameras, self.view.n_cam())?;
        let lambda = if self.cfg.use_camera_offset { self.cfg.lambda } else { 0.0 };
        if let Some(dir) = &self.cfg.dump_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join(format!("dcam_epoch{:03}.csv", self.epoch)), offsets.to_csv())?;
        }
        Ok(unified(&sim, &offsets, &self.cameras, lambda, self.cfg.distance_mode)?.dist)
    }

    /// Clusters the instance memory and seeds the cluster memory. Returns the
    /// epoch's batches (empty when every instance is an outlier).
    pub fn begin_epoch(&mut self) -> Result<Vec<Batch>> {
        let dist = self.clustering_distance()?;
        let labeling = dbscan(&dist, &self.cfg.dbscan)?;
        if let Some(dir) = &self.cfg.dump_dir {
            fs::write(dir.join(format!("labels_epoch{:03}.csv", self.epoch)), labeling.to_csv())?;
        }
        let batches = if labeling.num_clusters() == 0 {
            self.clusters = None;
            Vec::new()
        } else {
            self.clusters = if self.cfg.variant.uses_cluster_memory() {
                Some(ClusterMemory::init(
                    &self.instances,
                    &labeling,
                    &mut self.memory_rng,
                    self.cfg.mu_s,
                )?)
            } else {
                None
            };
            epoch_batches(&labeling, &self.cameras, &self.cfg.sampler, &mut self.sampler_rng)?
        };
        self.labeling = Some(labeling);
        Ok(batches)
    }

    /// Classifier rows for the next batch's loss.
    pub fn classifiers(&mut self) -> Result<Mat> {
        let labeling = self.labeling.as_ref().ok_or(Error::NoClusters)?;
        match self.cfg.variant {
            Variant::Baseline | Variant::PercentMean(_) => {
                let rho = match self.cfg.variant {
                    Variant::PercentMean(rho) => rho,
                    _ => 1.0,
                };
                let rows = (0..labeling.num_clusters())
                    .map(|j| centroid(&self.instances, labeling, j, rho, &mut self.classifier_rng))
                    .collect::<Result<Vec<_>>>()?;
                Mat::from_rows(&rows)
            }
            _ => Ok(self
                .clusters
                .as_ref()
                .ok_or(Error::NoClusters)?
                .centers()
                .clone()),
        }
    }

    pub fn train_batch(&mut self, batch: &Batch) -> Result<BatchOutcome> {
        let indices = batch.indices();
        if indices.is_empty() {
            return Err(Error::Invariant("empty batch".into()));
        }
        let classifiers = self.classifiers()?;
        let labeling = self.labeling.as_ref().ok_or(Error::NoClusters)?;
        let targets = indices
            .iter()
            .map(|&i| {
                labeling
                    .label(i)
                    .ok_or_else(|| Error::Invariant(format!("outlier {i} sampled into a batch")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let embeddings = indices
            .iter()
            .map(|&i| self.encoder.forward(self.view.input(i)))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<(Vec<f64>, usize)> =
            embeddings.iter().cloned().zip(targets.iter().copied()).collect();
        let loss = batch_loss(&samples, &classifiers, &self.cfg.loss)?;

        let scale = 1.0 / indices.len() as f64;
        let mut grads = self.encoder.zero_grad();
        for (&i, g) in indices.iter().zip(&loss.grads) {
            self.encoder
                .backward_into(self.view.input(i), g, scale, &mut grads)?;
        }
        self.encoder.adam_step(&grads, &self.cfg.optim)?;

        self.update_classifiers(batch, &indices, &targets, &embeddings)?;

        let momentum = self.cfg.use_temporal || !self.cfg.variant.uses_cluster_memory();
        for (&i, f) in indices.iter().zip(&embeddings) {
            if momentum {
                self.instances.update(i, f)?;
            } else {
                self.instances.replace(i, f)?;
            }
        }
        Ok(BatchOutcome {
            mean_loss: loss.mean_loss,
            classifiers,
            embeddings,
        })
    }

    fn update_classifiers(
        &mut self,
        batch: &Batch,
        indices: &[usize],
        targets: &[usize],
        embeddings: &[Vec<f64>],
    ) -> Result<()> {
        let labeling = self.labeling.as_ref().ok_or(Error::NoClusters)?;
        let Some(memory) = self.clusters.as_mut() else {
            return Ok(());
        };
        match self.cfg.variant {
            Variant::StochasticOnline => {
                for (&y, f) in targets.iter().zip(embeddings) {
                    memory.update(y, f)?;
                }
            }
            Variant::StochasticRandom => {
                for &y in targets {
                    let members = labeling.members(y);
                    let r = members[self.classifier_rng.below(members.len())];
                    memory.update(y, self.instances.row(r))?;
                }
            }
            Variant::Hard => {
                let mut offset = 0;
                for slot in &batch.slots {
                    let span = offset..offset + slot.members.len();
                    offset = span.end;
                    let center = memory.row(slot.cluster).to_vec();
                    let hardest = span
                        .clone()
                        .min_by(|&a, &b| {
                            dot(&embeddings[a], &center).total_cmp(&dot(&embeddings[b], &center))
                        })
                        .expect("slot is non-empty");
                    debug_assert_eq!(targets[hardest], slot.cluster);
                    memory.update(slot.cluster, &embeddings[hardest])?;
                }
                debug_assert_eq!(offset, indices.len());
            }
            Variant::Baseline | Variant::PercentMean(_) => {}
        }
        Ok(())
    }

    /// Re-encodes outliers into the instance memory and reports the epoch.
    pub fn end_epoch(&mut self, losses: &[f64], started: Instant) -> Result<EpochReport> {
        let labeling = self.labeling.as_ref().ok_or(Error::NoClusters)?;
        self.instances
            .refresh_outliers(&self.encoder, &self.view, &labeling.outliers())?;
        let clu_acc = match (&self.identities, labeling.num_clusters()) {
            (Some(ids), y) if y > 0 => Some(clustering_accuracy(labeling, ids)?),
            _ => None,
        };
        let report = EpochReport {
            epoch: self.epoch,
            num_clusters: labeling.num_clusters(),
            outliers: labeling.num_outliers(),
            clu_acc,
            mean_loss: (!losses.is_empty())
                .then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            secs: if self.cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
            all_outliers: labeling.num_clusters() == 0,
        };
        self.epoch += 1;
        Ok(report)
    }

    pub fn run_epoch(&mut self) -> Result<EpochReport> {
        let started = Instant::now();
        let batches = self.begin_epoch()?;
        let mut losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            losses.push(self.train_batch(batch)?.mean_loss);
        }
        self.end_epoch(&losses, started)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub encoder: EncoderState,
    pub reports: Vec<EpochReport>,
}

pub fn train(dataset: &Dataset, encoder: EncoderState, cfg: &TrainConfig) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(dataset, encoder, cfg.clone())?;
    let reports = (0..cfg.epochs)
        .map(|_| trainer.run_epoch())
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutput {
        encoder: trainer.into_encoder(),
        reports,
    })
}
