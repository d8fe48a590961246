//! Labeled sample sets and the class-conditional Gaussian-mixture generator.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::{self, standard_normal};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor2,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(x: Tensor2, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        ensure!(
            x.rows() == y.len(),
            Dimension,
            "{} rows but {} labels",
            x.rows(),
            y.len()
        );
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            x: Tensor2::zeros(0, dim),
            y: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn push(&mut self, row: &[f64], label: usize) -> Result<()> {
        ensure!(label < self.num_classes, Domain, "label {label} out of range");
        self.x.push_row(row)?;
        self.y.push(label);
        Ok(())
    }

    pub fn extend(&mut self, other: &LabeledSet) -> Result<()> {
        ensure!(
            other.num_classes == self.num_classes,
            Config,
            "class counts differ"
        );
        for (row, &y) in other.x.iter_rows().zip(&other.y) {
            self.push(row, y)?;
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.y[i] == class).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.y {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `label,x0,x1,...` rows with a header.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        out.write_record(&header).map_err(csv_err)?;
        for (row, &y) in self.x.iter_rows().zip(&self.y) {
            let mut rec = vec![y.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, num_classes: usize) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        ensure!(
            headers.get(0) == Some("label"),
            Format,
            "dataset CSV must start with a label column"
        );
        let dim = headers.len() - 1;
        let mut set = LabeledSet::empty(dim, num_classes);
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let label: usize = parse_field(rec.get(0))?;
            let row = (1..=dim)
                .map(|j| parse_field(rec.get(j)))
                .collect::<Result<Vec<f64>>>()?;
            set.push(&row, label)?;
        }
        Ok(set)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub(crate) fn parse_field<T: std::str::FromStr>(field: Option<&str>) -> Result<T> {
    let s = field.ok_or_else(|| Error::Format("missing CSV field".into()))?;
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("cannot parse CSV field {s:?}")))
}

/// One isotropic Gaussian component owned by a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMode {
    pub class: usize,
    pub mean: Vec<f64>,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub dim: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub modes: Vec<MixtureMode>,
    /// Fraction of each class held out for testing.
    pub test_fraction: f64,
}

impl MixtureSpec {
    /// `classes * modes_per_class` modes spaced evenly on a circle of
    /// `radius` in the first two coordinates, classes interleaved so that
    /// neighbouring modes always belong to different classes. Any further
    /// coordinates are zero-mean noise.
    pub fn ring(
        dim: usize,
        num_classes: usize,
        modes_per_class: usize,
        radius: f64,
        std: f64,
        samples_per_class: usize,
    ) -> Self {
        let total = num_classes * modes_per_class;
        let modes = (0..total)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / total as f64;
                let mut mean = vec![0.0; dim];
                mean[0] = radius * angle.cos();
                if dim > 1 {
                    mean[1] = radius * angle.sin();
                }
                MixtureMode {
                    class: k % num_classes,
                    mean,
                    std,
                }
            })
            .collect();
        Self {
            dim,
            num_classes,
            samples_per_class,
            modes,
            test_fraction: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 1 && self.dim <= 64, Config, "dimension must be in 1..=64");
        ensure!(self.num_classes >= 2, Config, "need at least two classes");
        ensure!(self.samples_per_class >= 2, Config, "need at least two samples per class");
        ensure!(
            (0.0..1.0).contains(&self.test_fraction),
            Config,
            "test fraction must be in [0, 1)"
        );
        for m in &self.modes {
            ensure!(m.class < self.num_classes, Config, "mode class {} out of range", m.class);
            ensure!(m.mean.len() == self.dim, Config, "mode mean has wrong dimension");
            ensure!(
                m.std > 0.0 && m.std.is_finite(),
                Config,
                "singular covariance: mode std must be positive"
            );
        }
        for c in 0..self.num_classes {
            ensure!(
                self.modes.iter().any(|m| m.class == c),
                Config,
                "class {c} has no mixture modes"
            );
        }
        Ok(())
    }

    pub fn modes_of(&self, class: usize) -> Vec<&MixtureMode> {
        self.modes.iter().filter(|m| m.class == class).collect()
    }

    /// Mean of the equal-weight mixture for `class`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let modes = self.modes_of(class);
        let mut mean = vec![0.0; self.dim];
        for m in &modes {
            for (a, b) in mean.iter_mut().zip(&m.mean) {
                *a += b / modes.len() as f64;
            }
        }
        mean
    }

    /// Draws `samples_per_class` points per class (equal mode weights) and
    /// splits each class's draws, in order, into train and test parts.
    pub fn generate(&self, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        self.validate()?;
        let n_test = (self.samples_per_class as f64 * self.test_fraction).round() as usize;
        let mut train = LabeledSet::empty(self.dim, self.num_classes);
        let mut test = LabeledSet::empty(self.dim, self.num_classes);
        for c in 0..self.num_classes {
            let modes = self.modes_of(c);
            let mut rng = rng::stream(seed, "data", &[c as u64]);
            for i in 0..self.samples_per_class {
                let mode = modes[rng.random_range(0..modes.len())];
                let row: Vec<f64> = mode
                    .mean
                    .iter()
                    .map(|&mu| mu + mode.std * standard_normal(&mut rng))
                    .collect();
                if i < self.samples_per_class - n_test {
                    train.push(&row, c)?;
                } else {
                    test.push(&row, c)?;
                }
            }
        }
        Ok((train, test))
    }
}
