//! Seeded Gaussian-mixture benchmarks.
//!
//! Class ids are laid out as `0..P` for pre-training classes, then the known
//! evaluation classes, then the unknown ones, so the pre-training pool never
//! overlaps the evaluation pool. Class means are `N(0, scale²·I)` and samples are
//! `N(mean, std²·I)`. An optional [`DomainShift`] is applied to test samples only.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numeric::{orthonormal_columns, Matrix, Rng};

const ORTHOGONALITY_TOL: f64 = 1e-8;
const STREAM_SHIFT_NOISE: u64 = 1;
const STREAM_SHIFT_PARAMS: u64 = 2;

/// Affine covariate shift `x ↦ R x + bias + noise` applied to test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub rotation: Matrix,
    pub bias: Vec<f64>,
    pub extra_noise_std: f64,
}

impl DomainShift {
    pub fn identity(dim: usize) -> Self {
        Self {
            rotation: Matrix::identity(dim),
            bias: vec![0.0; dim],
            extra_noise_std: 0.0,
        }
    }

    /// Random shift from a [`ShiftSpec`]; deterministic in `seed`.
    pub fn from_spec(dim: usize, spec: &ShiftSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, STREAM_SHIFT_PARAMS);
        let rotation = if spec.rotate {
            random_orthogonal(dim, &mut rng)?
        } else {
            Matrix::identity(dim)
        };
        let bias = (0..dim).map(|_| rng.normal() * spec.bias_scale).collect();
        Ok(Self {
            rotation,
            bias,
            extra_noise_std: spec.noise_std,
        })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rotation.rows() != dim || self.rotation.cols() != dim {
            return Err(Error::Config(format!(
                "shift rotation is {}x{}, input_dim is {dim}",
                self.rotation.rows(),
                self.rotation.cols()
            )));
        }
        let err = self.rotation.orthogonality_error();
        if err > ORTHOGONALITY_TOL {
            return Err(Error::Config(format!(
                "shift rotation is not orthogonal (max |RᵀR − I| = {err:e})"
            )));
        }
        if self.bias.len() != dim {
            return Err(Error::Config(format!("shift bias has length {}", self.bias.len())));
        }
        if !(self.extra_noise_std >= 0.0) || !self.extra_noise_std.is_finite() {
            return Err(Error::Config("extra_noise_std must be a finite value ≥ 0".into()));
        }
        Ok(())
    }

    /// Shifts one point; `rng` supplies the extra noise.
    pub fn apply(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut y = self.rotation.matvec(x).expect("validated shape");
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
            if self.extra_noise_std > 0.0 {
                *v += self.extra_noise_std * rng.normal();
            }
        }
        y
    }
}

/// Textual description of a shift: `rot,bias=0.5,noise=2` (any subset, comma separated).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub rotate: bool,
    pub bias_scale: f64,
    pub noise_std: f64,
}

impl std::str::FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ShiftSpec::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.split_once('=') {
                None if part == "rot" => spec.rotate = true,
                Some(("bias", v)) => {
                    spec.bias_scale = v.parse().map_err(|e| Error::invalid(format!("bias: {e}")))?
                }
                Some(("noise", v)) => {
                    spec.noise_std = v.parse().map_err(|e| Error::invalid(format!("noise: {e}")))?
                }
                _ => return Err(Error::invalid(format!("unknown shift component {part:?}"))),
            }
        }
        if !(spec.noise_std >= 0.0) || !spec.bias_scale.is_finite() {
            return Err(Error::invalid("shift noise must be ≥ 0 and bias finite"));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub input_dim: usize,
    pub n_pretrain_classes: usize,
    pub n_known_classes: usize,
    pub n_unknown_classes: usize,
    pub pretrain_per_class: usize,
    pub support_per_class: usize,
    pub test_per_class: usize,
    pub class_mean_scale: f64,
    pub within_class_std: f64,
    pub shift: Option<DomainShift>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            n_pretrain_classes: 30,
            n_known_classes: 25,
            n_unknown_classes: 25,
            pretrain_per_class: 100,
            support_per_class: 164,
            test_per_class: 20,
            class_mean_scale: 1.0,
            within_class_std: 0.6,
            shift: None,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("n_pretrain_classes", self.n_pretrain_classes),
            ("n_known_classes", self.n_known_classes),
            ("n_unknown_classes", self.n_unknown_classes),
            ("pretrain_per_class", self.pretrain_per_class),
            ("support_per_class", self.support_per_class),
            ("test_per_class", self.test_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be ≥ 1")));
        }
        if self.n_known_classes < 2 {
            return Err(Error::Config(
                "n_known_classes must be ≥ 2 (MSP over fewer prototypes is degenerate)".into(),
            ));
        }
        if !(self.within_class_std > 0.0) || !self.within_class_std.is_finite() {
            return Err(Error::Config("within_class_std must be > 0".into()));
        }
        if !(self.class_mean_scale >= 0.0) || !self.class_mean_scale.is_finite() {
            return Err(Error::Config("class_mean_scale must be ≥ 0".into()));
        }
        if let Some(shift) = &self.shift {
            shift.validate(self.input_dim)?;
        }
        Ok(())
    }

    pub fn pretrain_class_ids(&self) -> std::ops::Range<i32> {
        0..self.n_pretrain_classes as i32
    }

    pub fn known_class_ids(&self) -> std::ops::Range<i32> {
        let start = self.n_pretrain_classes as i32;
        start..start + self.n_known_classes as i32
    }

    pub fn unknown_class_ids(&self) -> std::ops::Range<i32> {
        let start = (self.n_pretrain_classes + self.n_known_classes) as i32;
        start..start + self.n_unknown_classes as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSplit {
    pub pretrain: EmbeddingSet,
    pub support: EmbeddingSet,
    /// Test samples; carries per-sample OOD flags.
    pub test: EmbeddingSet,
}

impl BenchmarkSplit {
    pub fn test_is_ood(&self) -> &[bool] {
        self.test.ood_flags().expect("generated test sets carry flags")
    }
}

fn draw_class(mean: &[f64], n: usize, std: f64, label: i32, rng: &mut Rng, data: &mut Vec<f64>, labels: &mut Vec<i32>) {
    for _ in 0..n {
        data.extend(mean.iter().map(|m| m + std * rng.normal()));
        labels.push(label);
    }
}

fn assemble(dim: usize, data: Vec<f64>, labels: Vec<i32>) -> EmbeddingSet {
    let n = labels.len();
    EmbeddingSet::new(Matrix::from_vec(n, dim, data).expect("generated finite"), labels)
        .expect("lengths agree")
}

/// Generates the pre-training pool, support set and test set for `config`.
pub fn gen_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkSplit> {
    config.validate()?;
    let dim = config.input_dim;
    let mut rng = Rng::new(config.seed);
    let n_classes = config.n_pretrain_classes + config.n_known_classes + config.n_unknown_classes;
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| config.class_mean_scale * rng.normal()).collect())
        .collect();
    let std = config.within_class_std;

    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for y in config.pretrain_class_ids() {
        draw_class(&means[y as usize], config.pretrain_per_class, std, y, &mut rng, &mut data, &mut labels);
    }
    let pretrain = assemble(dim, data, labels);

    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for y in config.known_class_ids() {
        draw_class(&means[y as usize], config.support_per_class, std, y, &mut rng, &mut data, &mut labels);
    }
    let support = assemble(dim, data, labels);

    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for y in config.known_class_ids().chain(config.unknown_class_ids()) {
        draw_class(&means[y as usize], config.test_per_class, std, y, &mut rng, &mut data, &mut labels);
    }
    let flags: Vec<bool> = labels
        .iter()
        .map(|y| config.unknown_class_ids().contains(y))
        .collect();
    let mut test = assemble(dim, data, labels).with_ood_flags(flags)?;
    if let Some(shift) = &config.shift {
        test = apply_shift(&test, shift, config.seed)?;
    }
    Ok(BenchmarkSplit { pretrain, support, test })
}

/// Applies `shift` to every row of `set`, drawing noise from a stream derived from `seed`.
pub fn apply_shift(set: &EmbeddingSet, shift: &DomainShift, seed: u64) -> Result<EmbeddingSet> {
    shift.validate(set.dim())?;
    let mut rng = Rng::derive(seed, STREAM_SHIFT_NOISE);
    set.map_rows(set.dim(), |x| Ok(shift.apply(x, &mut rng)))
}

/// Haar-like random orthogonal matrix: Gram–Schmidt QR of a Gaussian matrix,
/// with the sign convention `diag(R) > 0`.
pub fn random_orthogonal(dim: usize, rng: &mut Rng) -> Result<Matrix> {
    if dim == 0 {
        return Err(Error::invalid("random_orthogonal needs dim ≥ 1"));
    }
    loop {
        let g = Matrix::from_vec(dim, dim, (0..dim * dim).map(|_| rng.normal()).collect())?;
        match orthonormal_columns(&g) {
            Ok(q) => return Ok(q),
            // A singular Gaussian draw has probability zero; redraw if it happens.
            Err(Error::DegenerateGeometry(_)) => continue,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn small() -> BenchmarkConfig {
        BenchmarkConfig {
            input_dim: 6,
            n_pretrain_classes: 4,
            n_known_classes: 5,
            n_unknown_classes: 5,
            pretrain_per_class: 7,
            support_per_class: 3,
            test_per_class: 20,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_benchmark(&small()).unwrap();
        let b = gen_benchmark(&small()).unwrap();
        assert_eq!(a, b);
        let c = gen_benchmark(&BenchmarkConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.pretrain, c.pretrain);
    }

    #[test]
    fn counts_and_flags() {
        let split = gen_benchmark(&small()).unwrap();
        let flags = split.test_is_ood();
        assert_eq!(flags.iter().filter(|f| **f).count(), 100);
        assert_eq!(flags.iter().filter(|f| !**f).count(), 100);
        let support_ids = split.support.class_ids();
        for (y, ood) in split.test.labels().iter().zip(flags) {
            assert_eq!(*ood, !support_ids.contains(y));
        }
        let hist = |s: &EmbeddingSet| -> BTreeMap<i32, usize> {
            s.by_class().into_iter().map(|(k, v)| (k, v.len())).collect()
        };
        assert!(hist(&split.pretrain).values().all(|&c| c == 7));
        assert!(hist(&split.support).values().all(|&c| c == 3));
        assert!(hist(&split.test).values().all(|&c| c == 20));
        let pre = split.pretrain.class_ids();
        assert!(split.test.class_ids().iter().all(|y| !pre.contains(y)));
    }

    #[test]
    fn identity_shift_is_a_no_op() {
        let plain = gen_benchmark(&small()).unwrap();
        let shifted = gen_benchmark(&BenchmarkConfig {
            shift: Some(DomainShift::identity(6)),
            ..small()
        })
        .unwrap();
        assert_eq!(plain, shifted);
    }

    #[test]
    fn rejects_bad_configs() {
        let err = gen_benchmark(&BenchmarkConfig { n_known_classes: 1, ..small() });
        assert!(matches!(err, Err(Error::Config(_))));
        let mut rot = Matrix::identity(6);
        rot.set(0, 1, 0.5);
        let shift = DomainShift { rotation: rot, ..DomainShift::identity(6) };
        let err = gen_benchmark(&BenchmarkConfig { shift: Some(shift), ..small() });
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(gen_benchmark(&BenchmarkConfig { within_class_std: 0.0, ..small() }).is_err());
    }

    #[test]
    fn orthogonal_matrices() {
        let mut rng = Rng::new(3);
        let one = random_orthogonal(1, &mut rng).unwrap();
        assert_eq!(one.get(0, 0).abs(), 1.0);
        let r = random_orthogonal(8, &mut Rng::new(11)).unwrap();
        assert!(r.orthogonality_error() < 1e-8);
        assert_eq!(r, random_orthogonal(8, &mut Rng::new(11)).unwrap());
        assert!(random_orthogonal(0, &mut rng).is_err());
    }

    #[test]
    fn noiseless_shift_preserves_distances() {
        let spec: ShiftSpec = "rot,bias=3".parse().unwrap();
        let shift = DomainShift::from_spec(8, &spec, 5).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let d0 = crate::numeric::squared_distance(&x, &y).sqrt();
            let d1 = crate::numeric::squared_distance(&shift.apply(&x, &mut rng), &shift.apply(&y, &mut rng)).sqrt();
            assert!((d0 - d1).abs() < 1e-8);
        }
    }

    #[test]
    fn shift_spec_parsing() {
        let s: ShiftSpec = "rot,bias=0.5,noise=2".parse().unwrap();
        assert_eq!(s, ShiftSpec { rotate: true, bias_scale: 0.5, noise_std: 2.0 });
        assert_eq!("".parse::<ShiftSpec>().unwrap(), ShiftSpec::default());
        assert!("spin".parse::<ShiftSpec>().is_err());
        assert!("noise=-1".parse::<ShiftSpec>().is_err());
    }
}
