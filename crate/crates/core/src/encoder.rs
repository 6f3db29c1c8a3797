//! Desk-scale trainable encoders mapping raw inputs to unit-norm embeddings,
//! with analytic gradients and an Adam optimizer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::EncoderInput;
use crate::error::{Error, Result};
use crate::numerics::{check_dim, dot, l2_normalize_in_place, Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// `f = normalize(W x)` with `W` of shape `d_out x d_in`.
    Linear,
    /// `f = normalize(T[index])`, one free row per dataset instance.
    FreeEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.00035,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    kind: EncoderKind,
    d_in: usize,
    d_out: usize,
    params: Mat,
    adam_m: Mat,
    adam_v: Mat,
    step_count: u64,
}

impl EncoderState {
    /// Linear encoder with entries uniform in `[-1/sqrt(d_in), 1/sqrt(d_in)]`.
    pub fn linear(d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        if d_out < 2 || d_in == 0 {
            return Err(Error::InvalidConfig("linear encoder needs d_in >= 1, d_out >= 2".into()));
        }
        let scale = 1.0 / (d_in as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Self::from_params(EncoderKind::Linear, d_in, Mat::from_vec(d_out, d_in, data)?)
    }

    /// Free embedding table with `n` random unit rows.
    pub fn free_embedding(n: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        if d_out < 2 || n == 0 {
            return Err(Error::InvalidConfig("free embedding needs n >= 1, d_out >= 2".into()));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.unit_vector(d_out)).collect();
        Self::from_params(EncoderKind::FreeEmbedding, 0, Mat::from_rows(&rows)?)
    }

    /// Wraps explicit parameters. For `Linear`, `params` is `d_out x d_in`;
    /// for `FreeEmbedding` it is `n x d_out` and `d_in` is ignored.
    pub fn from_params(kind: EncoderKind, d_in: usize, params: Mat) -> Result<Self> {
        if params.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("encoder parameters must be finite".into()));
        }
        let (d_in, d_out) = match kind {
            EncoderKind::Linear => {
                check_dim(d_in, params.cols())?;
                (d_in, params.rows())
            }
            EncoderKind::FreeEmbedding => (0, params.cols()),
        };
        let zeros = Mat::zeros(params.rows(), params.cols());
        Ok(EncoderState {
            kind,
            d_in,
            d_out,
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step_count: 0,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn params(&self) -> &Mat {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Mat {
        &mut self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grad(&self) -> Mat {
        Mat::zeros(self.params.rows(), self.params.cols())
    }

    /// Pre-normalization output `z`.
    fn project(&self, input: EncoderInput<'_>) -> Result<Vec<f64>> {
        match self.kind {
            EncoderKind::Linear => {
                check_dim(self.d_in, input.raw.len())?;
                Ok(self.params.row_iter().map(|w| dot(w, input.raw)).collect())
            }
            EncoderKind::FreeEmbedding => {
                if input.index >= self.params.rows() {
                    return Err(Error::IndexOutOfRange {
                        index: input.index,
                        len: self.params.rows(),
                    });
                }
                Ok(self.params.row(input.index).to_vec())
            }
        }
    }

    pub fn forward(&self, input: EncoderInput<'_>) -> Result<Vec<f64>> {
        let mut z = self.project(input)?;
        l2_normalize_in_place(&mut z)?;
        Ok(z)
    }

    /// Accumulates `scale * dL/dθ` into `acc`, given `dL/df` for the
    /// normalized embedding `f`.
    pub fn backward_into(
        &self,
        input: EncoderInput<'_>,
        grad_f: &[f64],
        scale: f64,
        acc: &mut Mat,
    ) -> Result<()> {
        check_dim(self.d_out, grad_f.len())?;
        let mut f = self.project(input)?;
        let z_norm = l2_normalize_in_place(&mut f)?;
        // d normalize(z)/dz = (I - f f^T) / |z|
        let radial = dot(&f, grad_f);
        let grad_z: Vec<f64> = grad_f
            .iter()
            .zip(&f)
            .map(|(g, fi)| scale * (g - radial * fi) / z_norm)
            .collect();
        match self.kind {
            EncoderKind::Linear => {
                for (k, gz) in grad_z.iter().enumerate() {
                    acc.row_mut(k)
                        .iter_mut()
                        .zip(input.raw)
                        .for_each(|(a, x)| *a += gz * x);
                }
            }
            EncoderKind::FreeEmbedding => {
                acc.row_mut(input.index)
                    .iter_mut()
                    .zip(&grad_z)
                    .for_each(|(a, g)| *a += g);
            }
        }
        Ok(())
    }

    pub fn backward(&self, input: EncoderInput<'_>, grad_f: &[f64]) -> Result<Mat> {
        let mut acc = self.zero_grad();
        self.backward_into(input, grad_f, 1.0, &mut acc)?;
        Ok(acc)
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &Mat, cfg: &OptimConfig) -> Result<()> {
        check_dim(self.params.rows(), grads.rows())?;
        check_dim(self.params.cols(), grads.cols())?;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        let params = self.params.as_mut_slice();
        let m = self.adam_m.as_mut_slice();
        let v = self.adam_v.as_mut_slice();
        for (k, &g) in grads.as_slice().iter().enumerate() {
            m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g;
            v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
        Ok(())
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let bin_name = format!(
            "{}.bin",
            manifest_path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("checkpoint")
        );
        let manifest = CheckpointManifest {
            kind: self.kind,
            rows: self.params.rows(),
            cols: self.params.cols(),
            d_in: self.d_in,
            d_out: self.d_out,
            step_count: self.step_count,
            params_file: bin_name.clone(),
        };
        let bytes: Vec<u8> = self
            .params
            .as_slice()
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect();
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        fs::write(dir.join(&bin_name), bytes)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Invariant(e.to_string()))?;
        fs::write(manifest_path, json + "\n")?;
        Ok(())
    }

    /// Loads parameters from a checkpoint. Optimizer moments are not stored
    /// and come back zeroed.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path)?;
        let m: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path, e.line(), e.to_string()))?;
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let bin_path = dir.join(&m.params_file);
        let bytes = fs::read(&bin_path)?;
        if bytes.len() != m.rows * m.cols * 8 {
            return Err(Error::parse(
                &bin_path,
                0,
                format!("expected {} bytes, found {}", m.rows * m.cols * 8, bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut state = Self::from_params(m.kind, m.d_in, Mat::from_vec(m.rows, m.cols, data)?)?;
        check_dim(m.d_out, state.d_out)?;
        state.step_count = m.step_count;
        Ok(state)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: EncoderKind,
    pub rows: usize,
    pub cols: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub step_count: u64,
    pub params_file: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn input(raw: &[f64]) -> EncoderInput<'_> {
        EncoderInput { index: 0, raw }
    }

    #[test]
    fn linear_identity_forward() {
        let p = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = EncoderState::from_params(EncoderKind::Linear, 2, p).unwrap();
        let f = e.forward(input(&[3.0, 4.0])).unwrap();
        assert!((f[0] - 0.6).abs() < 1e-15 && (f[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn free_embedding_forward() {
        let p = Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let e = EncoderState::from_params(EncoderKind::FreeEmbedding, 0, p).unwrap();
        assert_eq!(e.forward(EncoderInput { index: 0, raw: &[] }).unwrap(), vec![0.0, 1.0]);
        assert_eq!(e.forward(EncoderInput { index: 1, raw: &[] }).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            e.forward(EncoderInput { index: 2, raw: &[] }),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn random_forward_is_unit() {
        let mut rng = Rng::new(1);
        let e = EncoderState::linear(10, 6, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
            let f = e.forward(input(&x)).unwrap();
            assert!((norm(&f) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_output_is_error() {
        let e = EncoderState::from_params(EncoderKind::Linear, 2, Mat::zeros(2, 2)).unwrap();
        assert!(matches!(e.forward(input(&[1.0, 1.0])), Err(Error::ZeroVector)));
        assert!(matches!(e.forward(input(&[1.0])), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn radial_gradient_is_killed() {
        let mut rng = Rng::new(2);
        let e = EncoderState::linear(5, 4, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let f = e.forward(input(&x)).unwrap();
        let g: Vec<f64> = f.iter().map(|v| 3.0 * v).collect();
        let grad = e.backward(input(&x), &g).unwrap();
        assert!(grad.as_slice().iter().all(|v| v.abs() < 1e-14));
        let zero = e.backward(input(&x), &[0.0; 4]).unwrap();
        assert!(zero.as_slice().iter().all(|&v| v == 0.0));
    }

    fn linear_objective(e: &EncoderState, x: &[f64], g: &[f64]) -> f64 {
        dot(&e.forward(input(x)).unwrap(), g)
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let d_in = 3 + trial % 4;
            let d_out = 2 + trial % 5;
            let mut e = EncoderState::linear(d_in, d_out, &mut rng).unwrap();
            let x: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
            let g: Vec<f64> = (0..d_out).map(|_| rng.normal()).collect();
            let analytic = e.backward(input(&x), &g).unwrap();
            for k in 0..analytic.as_slice().len() {
                let orig = e.params.as_slice()[k];
                e.params.as_mut_slice()[k] = orig + h;
                let up = linear_objective(&e, &x, &g);
                e.params.as_mut_slice()[k] = orig - h;
                let down = linear_objective(&e, &x, &g);
                e.params.as_mut_slice()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.as_slice()[k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn adam_first_step_scalar() {
        let cfg = OptimConfig::default();
        let mut e =
            EncoderState::from_params(EncoderKind::FreeEmbedding, 0, Mat::from_vec(1, 2, vec![1.0, 0.5]).unwrap())
                .unwrap();
        let g = Mat::from_vec(1, 2, vec![0.25, -2.0]).unwrap();
        e.adam_step(&g, &cfg).unwrap();
        // m_hat = g, v_hat = g^2 on the first step.
        let expected0 = 1.0 - 0.00035 * 0.25 / (0.25 + 1e-8);
        let expected1 = 0.5 + 0.00035 * 2.0 / (2.0 + 1e-8);
        assert!((e.params.get(0, 0) - expected0).abs() < 1e-15);
        assert!((e.params.get(0, 1) - expected1).abs() < 1e-15);
        assert_eq!(e.step_count(), 1);
    }

    #[test]
    fn adam_zero_grad_is_noop_and_deterministic() {
        let mut rng = Rng::new(4);
        let mut a = EncoderState::linear(4, 3, &mut rng).unwrap();
        let before = a.params.clone();
        a.adam_step(&a.zero_grad(), &OptimConfig::default()).unwrap();
        assert_eq!(a.params, before);

        let mut b = a.clone();
        let mut c = a.clone();
        let g = Mat::from_vec(3, 4, (0..12).map(|k| k as f64 - 5.5).collect()).unwrap();
        b.adam_step(&g, &OptimConfig::default()).unwrap();
        c.adam_step(&g, &OptimConfig::default()).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(8);
        let mut e = EncoderState::linear(6, 3, &mut rng).unwrap();
        e.step_count = 17;
        let path = dir.path().join("checkpoint.json");
        e.save(&path).unwrap();
        assert!(dir.path().join("checkpoint.bin").exists());
        let loaded = EncoderState::load(&path).unwrap();
        assert_eq!(loaded.params, e.params);
        assert_eq!(loaded.step_count(), 17);
        assert_eq!(loaded.kind(), EncoderKind::Linear);
        assert_eq!(loaded.d_in(), 6);
    }
}
