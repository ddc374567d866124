//! Labeled datasets, the two-Gaussian benchmark and CSV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RandomSource;

/// Real vectors of a common dimension with labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.len(), found: labels.len() });
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {num_classes}")));
        }
        if let Some(first) = inputs.first() {
            let n = first.len();
            for x in &inputs {
                if x.len() != n {
                    return Err(Error::DimensionMismatch { expected: n, found: x.len() });
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("non-finite input coordinate".into()));
                }
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidInput(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Self { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Zero for an empty dataset.
    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs.iter().map(Vec::as_slice).zip(self.labels.iter().copied())
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            inputs: self.inputs[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Writes `label,x0,...,x{n-1}` rows with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (x, y) in self.iter() {
            let mut row = vec![y.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("label") {
            return Err(Error::Schema { path: path.to_path_buf(), message: "first column must be `label`".into() });
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Schema { path: path.to_path_buf(), message: format!("row {}: {what}", i + 1) };
            labels.push(rec[0].parse::<usize>().map_err(|_| bad("bad label"))?);
            let x = rec.iter().skip(1).map(|s| s.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>();
            inputs.push(x.map_err(|_| bad("bad coordinate"))?);
        }
        Dataset::new(inputs, labels, num_classes)
    }
}

/// Two isotropic Gaussians in `[0,1]^n` with means `(0.25, 0, ..., 0)` and
/// `(0.75, 0, ..., 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSpec {
    pub n: usize,
    pub sigma: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for GaussianSpec {
    fn default() -> Self {
        Self { n: 25, sigma: 0.125, samples_per_class: 1000, seed: 0 }
    }
}

impl GaussianSpec {
    pub fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.n];
        if self.n > 0 {
            m[0] = if class == 0 { 0.25 } else { 0.75 };
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidInput("gaussian dimension must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidInput("samples_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// Class 0 block followed by class 1, each coordinate clipped to `[0,1]`.
pub fn gen_gaussian(spec: &GaussianSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RandomSource::new(spec.seed);
    let mut inputs = Vec::with_capacity(2 * spec.samples_per_class);
    let mut labels = Vec::with_capacity(2 * spec.samples_per_class);
    for class in 0..2 {
        let mean = spec.mean(class);
        for _ in 0..spec.samples_per_class {
            inputs.push(mean.iter().map(|m| (m + spec.sigma * rng.normal()).clamp(0.0, 1.0)).collect());
            labels.push(class);
        }
    }
    Dataset::new(inputs, labels, 2)
}
