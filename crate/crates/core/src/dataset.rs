//! Synthetic camera-shifted identity data and CSV ingestion of pre-extracted
//! features.
//!
//! Ground-truth identities live on [`Instance`] for evaluation. Training code
//! only ever sees a [`TrainView`], which exposes raw inputs and cameras.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, streams, Rng};

/// Identity value for instances whose ground truth is unknown.
pub const UNKNOWN_IDENTITY: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub index: usize,
    pub raw: Vec<f64>,
    pub camera: usize,
    pub true_identity: i64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub n_cam: usize,
    pub d_in: usize,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub n_identities: usize,
    pub n_cameras: usize,
    pub images_per_id_per_cam: usize,
    pub d_in: usize,
    pub camera_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_identities == 0 {
            return bad("n_identities must be >= 1");
        }
        if self.n_cameras == 0 {
            return bad("n_cameras must be >= 1");
        }
        if self.images_per_id_per_cam == 0 {
            return bad("images_per_id_per_cam must be >= 1");
        }
        if self.d_in == 0 {
            return bad("d_in must be >= 1");
        }
        if !(self.camera_shift >= 0.0 && self.camera_shift.is_finite()) {
            return bad("camera_shift must be finite and >= 0");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and >= 0");
        }
        Ok(())
    }
}

/// Split assigned to image `img` of an (identity, camera) group of `per_group` images.
///
/// Groups of three or more images contribute one query, one gallery image and
/// the remainder to training. Smaller groups go entirely to training.
fn split_for(img: usize, per_group: usize) -> Split {
    if per_group < 3 {
        return Split::Train;
    }
    match img {
        0 => Split::Query,
        1 => Split::Gallery,
        _ => Split::Train,
    }
}

/// Draws a dataset: unit identity prototypes, one offset of norm
/// `camera_shift` per camera, and isotropic gaussian noise with expected
/// squared norm `noise_sigma^2` (per-coordinate std `noise_sigma / sqrt(d_in)`).
/// Each raw vector is the normalized sum.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::stream(cfg.seed, streams::DATA);
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_identities)
        .map(|_| rng.unit_vector(cfg.d_in))
        .collect();
    let offsets: Vec<Vec<f64>> = (0..cfg.n_cameras)
        .map(|_| {
            rng.unit_vector(cfg.d_in)
                .into_iter()
                .map(|x| x * cfg.camera_shift)
                .collect()
        })
        .collect();

    let coord_sigma = cfg.noise_sigma / (cfg.d_in as f64).sqrt();
    let mut instances = Vec::with_capacity(
        cfg.n_identities * cfg.n_cameras * cfg.images_per_id_per_cam,
    );
    for (id, proto) in prototypes.iter().enumerate() {
        for (cam, offset) in offsets.iter().enumerate() {
            for img in 0..cfg.images_per_id_per_cam {
                let v: Vec<f64> = proto
                    .iter()
                    .zip(offset)
                    .map(|(p, o)| p + o + coord_sigma * rng.normal())
                    .collect();
                instances.push(Instance {
                    index: instances.len(),
                    raw: l2_normalize(&v)?,
                    camera: cam,
                    true_identity: id as i64,
                    split: split_for(img, cfg.images_per_id_per_cam),
                });
            }
        }
    }
    Ok(Dataset {
        instances,
        n_cam: cfg.n_cameras,
        d_in: cfg.d_in,
        seed: Some(cfg.seed),
    })
}

/// Unsupervised view of the training split: raw inputs and cameras only.
#[derive(Clone, Debug)]
pub struct TrainView<'a> {
    items: Vec<&'a Instance>,
    n_cam: usize,
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_cam(&self) -> usize {
        self.n_cam
    }

    pub fn raw(&self, i: usize) -> &'a [f64] {
        &self.items[i].raw
    }

    pub fn camera(&self, i: usize) -> usize {
        self.items[i].camera
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.items.iter().map(|x| x.camera).collect()
    }

    /// Position of training sample `i` in the full dataset.
    pub fn dataset_index(&self, i: usize) -> usize {
        self.items[i].index
    }

    pub fn input(&self, i: usize) -> EncoderInput<'a> {
        EncoderInput {
            index: self.items[i].index,
            raw: &self.items[i].raw,
        }
    }
}

/// What an encoder is allowed to see of an instance.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub index: usize,
    pub raw: &'a [f64],
}

impl<'a> From<&'a Instance> for EncoderInput<'a> {
    fn from(x: &'a Instance) -> Self {
        EncoderInput {
            index: x.index,
            raw: &x.raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub train: usize,
    pub query: usize,
    pub gallery: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n_cam: usize,
    pub d_in: usize,
    pub counts: Counts,
    pub seed: Option<u64>,
}

pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.iter().filter(move |x| x.split == split)
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            items: self.split(Split::Train).collect(),
            n_cam: self.n_cam,
        }
    }

    /// Ground-truth identities of the training split, aligned with [`TrainView`].
    pub fn train_identities(&self) -> Vec<i64> {
        self.split(Split::Train).map(|x| x.true_identity).collect()
    }

    pub fn has_identities(&self) -> bool {
        self.instances
            .iter()
            .all(|x| x.true_identity != UNKNOWN_IDENTITY)
    }

    pub fn counts(&self) -> Counts {
        Counts {
            total: self.len(),
            train: self.split(Split::Train).count(),
            query: self.split(Split::Query).count(),
            gallery: self.split(Split::Gallery).count(),
        }
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            n_cam: self.n_cam,
            d_in: self.d_in,
            counts: self.counts(),
            seed: self.seed,
        }
    }

    /// Writes `features.csv`, `labels.csv` and `manifest.json` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut features = String::new();
        let mut labels = String::new();
        for x in &self.instances {
            let row: Vec<String> = x.raw.iter().map(|v| v.to_string()).collect();
            features.push_str(&row.join(","));
            features.push('\n');
            labels.push_str(&format!(
                "{},{},{},{}\n",
                x.index, x.camera, x.true_identity, x.split
            ));
        }
        fs::write(dir.join(FEATURES_FILE), features)?;
        fs::write(dir.join(LABELS_FILE), labels)?;
        let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
        serde_json::to_writer_pretty(&mut f, &self.manifest())
            .map_err(|e| Error::Invariant(e.to_string()))?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Reads a dataset directory written by [`Dataset::export`] (the manifest is optional).
pub fn ingest_dir(dir: &Path) -> Result<Dataset> {
    let mut ds = ingest(&dir.join(FEATURES_FILE), &dir.join(LABELS_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(&manifest_path, e.line(), e.to_string()))?;
        if m.d_in != ds.d_in {
            return Err(Error::DimMismatch {
                expected: m.d_in,
                found: ds.d_in,
            });
        }
        if m.n_cam < ds.n_cam {
            return Err(Error::parse(
                &manifest_path,
                0,
                format!("n_cam {} smaller than cameras present ({})", m.n_cam, ds.n_cam),
            ));
        }
        ds.n_cam = m.n_cam;
        ds.seed = m.seed;
    }
    Ok(ds)
}

/// Reads a features CSV (one row of reals per instance, no header) and a
/// labels CSV with rows `index,camera[,identity[,split]]`.
pub fn ingest(features_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features_text = fs::read_to_string(features_path)?;
    let labels_text = fs::read_to_string(labels_path)?;

    let mut raws: Vec<Vec<f64>> = Vec::new();
    let mut d_in = None;
    for (lineno, line) in non_empty_lines(&features_text) {
        let row = line
            .split(',')
            .enumerate()
            .map(|(k, field)| {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::parse(
                        features_path,
                        lineno,
                        format!("field {} `{}` is not a number", k + 1, field.trim()),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(
                        features_path,
                        lineno,
                        format!("field {} is not finite", k + 1),
                    ));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        match d_in {
            None => d_in = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::parse(
                    features_path,
                    lineno,
                    format!("row {} has {} fields, expected {}", raws.len(), row.len(), d),
                ))
            }
            _ => {}
        }
        raws.push(row);
    }
    let d_in = d_in.ok_or_else(|| Error::parse(features_path, 1, "no feature rows"))?;

    let mut instances = Vec::with_capacity(raws.len());
    let mut raws = raws.into_iter();
    for (lineno, line) in non_empty_lines(&labels_text) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=4).contains(&fields.len()) {
            return Err(Error::parse(
                labels_path,
                lineno,
                format!("expected 2 to 4 fields, found {}", fields.len()),
            ));
        }
        let int_field = |k: usize, name: &str| -> Result<i64> {
            fields[k].parse::<i64>().map_err(|_| {
                Error::parse(labels_path, lineno, format!("{name} `{}` is not an integer", fields[k]))
            })
        };
        let index = int_field(0, "index")?;
        if index != instances.len() as i64 {
            return Err(Error::parse(
                labels_path,
                lineno,
                format!("index {index} out of order, expected {}", instances.len()),
            ));
        }
        let camera = int_field(1, "camera")?;
        if camera < 0 {
            return Err(Error::parse(labels_path, lineno, "negative camera id"));
        }
        let true_identity = if fields.len() >= 3 {
            int_field(2, "identity")?
        } else {
            UNKNOWN_IDENTITY
        };
        let split = if fields.len() == 4 {
            fields[3]
                .parse::<Split>()
                .map_err(|m| Error::parse(labels_path, lineno, m))?
        } else {
            Split::Train
        };
        let raw = raws.next().ok_or_else(|| {
            Error::parse(labels_path, lineno, "more label rows than feature rows")
        })?;
        instances.push(Instance {
            index: index as usize,
            raw,
            camera: camera as usize,
            true_identity,
            split,
        });
    }
    if raws.next().is_some() {
        return Err(Error::parse(
            labels_path,
            instances.len() + 1,
            "fewer label rows than feature rows",
        ));
    }

    let n_cam = instances.iter().map(|x| x.camera + 1).max().unwrap_or(0);
    let mut seen = vec![false; n_cam];
    instances.iter().for_each(|x| seen[x.camera] = true);
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::parse(
            labels_path,
            0,
            format!("camera ids must be contiguous; camera {missing} never appears"),
        ));
    }
    Ok(Dataset {
        instances,
        n_cam,
        d_in,
        seed: None,
    })
}

fn non_empty_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}
