//! Synthetic single-object "detection" images whose appearance depends on
//! both the object label and k independent nuisance factors.

mod io;
mod render;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nn_core::Tensor;
use crate::seeds::derive_seed;

pub use io::{load_dataset, save_dataset, DatasetMeta, FORMAT_VERSION};
pub use render::{render_sample, BACKGROUND, FOREGROUND};

/// Tolerance for boxes stored as `f32` touching the unit-square border.
const BOX_EPS: f32 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid dataset spec: {key}: {reason}")]
    InvalidSpec { key: String, reason: String },
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset at record {record}: {reason}")]
    Corrupt { record: usize, reason: String },
    #[error("bad dataset metadata: {0}")]
    Meta(String),
}

fn invalid(key: impl Into<String>, reason: impl Into<String>) -> DataError {
    DataError::InvalidSpec {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Ground-truth object: class id and `(cx, cy, w, h)` box in unit coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLabel {
    pub class_id: usize,
    pub bbox: [f32; 4],
}

impl DetectionLabel {
    pub fn validate(&self, num_classes: usize) -> Result<(), DataError> {
        if self.class_id >= num_classes {
            return Err(DataError::InvalidLabel(format!(
                "class {} out of range for {num_classes} classes",
                self.class_id
            )));
        }
        validate_box(&self.bbox)
    }
}

pub fn validate_box(b: &[f32; 4]) -> Result<(), DataError> {
    let [cx, cy, w, h] = *b;
    let ok = b.iter().all(|v| v.is_finite())
        && w > 0.0
        && h > 0.0
        && cx - w / 2.0 >= -BOX_EPS
        && cx + w / 2.0 <= 1.0 + BOX_EPS
        && cy - h / 2.0 >= -BOX_EPS
        && cy + h / 2.0 <= 1.0 + BOX_EPS;
    if ok {
        Ok(())
    } else {
        Err(DataError::InvalidLabel(format!("box {b:?} not inside the unit square")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NuisanceLabel {
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major `H x W` grayscale in `[0, 1]`.
    pub image: Vec<f32>,
    pub y_o: DetectionLabel,
    pub y_n: NuisanceLabel,
}

/// How a nuisance factor alters the rendered image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceEffect {
    /// Level `v` darkens by `0.35 * v / (cardinality - 1)`.
    Brightness,
    /// Level `v` applies a box blur of radius `v`.
    Blur,
    /// Level `v` overlays a linear ramp (amplitude 0.2) at angle `pi * v / cardinality`.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceSpec {
    pub name: String,
    pub cardinality: usize,
    pub train_marginal: Vec<f64>,
    pub effect: NuisanceEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub nuisances: Vec<NuisanceSpec>,
    pub m_train: usize,
    pub m_test: usize,
    pub seed: u64,
    pub noise_amplitude: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 3,
            nuisances: default_nuisances(),
            m_train: 8000,
            m_test: 2000,
            seed: 0,
            noise_amplitude: 0.02,
        }
    }
}

/// Brightness (2 levels), blur (3) and gradient orientation (3), each
/// heavily skewed toward level 0 at train time.
pub fn default_nuisances() -> Vec<NuisanceSpec> {
    vec![
        NuisanceSpec {
            name: "brightness".into(),
            cardinality: 2,
            train_marginal: vec![0.9, 0.1],
            effect: NuisanceEffect::Brightness,
        },
        NuisanceSpec {
            name: "blur".into(),
            cardinality: 3,
            train_marginal: vec![0.8, 0.1, 0.1],
            effect: NuisanceEffect::Blur,
        },
        NuisanceSpec {
            name: "gradient".into(),
            cardinality: 3,
            train_marginal: vec![0.8, 0.1, 0.1],
            effect: NuisanceEffect::Gradient,
        },
    ]
}

impl DatasetSpec {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.nuisances.iter().map(|n| n.cardinality).collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("H/W", "image dims must be positive"));
        }
        if self.num_classes == 0 || self.num_classes > 3 {
            return Err(invalid("C", "class count must be 1..=3 (square, disc, cross)"));
        }
        if self.m_train == 0 {
            return Err(invalid("M_train", "must be positive"));
        }
        if self.m_test == 0 {
            return Err(invalid("M_test", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return Err(invalid("noise_amplitude", "must lie in [0, 1]"));
        }
        for (i, n) in self.nuisances.iter().enumerate() {
            if n.cardinality < 2 || n.cardinality > usize::from(u16::MAX) {
                return Err(invalid(
                    format!("nuisances[{i}].cardinality"),
                    format!("must be in 2..=65535, got {}", n.cardinality),
                ));
            }
            let key = format!("nuisances[{i}].train_marginal");
            if n.train_marginal.len() != n.cardinality {
                return Err(invalid(
                    key,
                    format!(
                        "has {} entries for cardinality {}",
                        n.train_marginal.len(),
                        n.cardinality
                    ),
                ));
            }
            if n.train_marginal.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
                return Err(invalid(key, "entries must be finite and nonnegative"));
            }
            let sum: f64 = n.train_marginal.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(invalid(key, format!("sums to {sum}, expected 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Test,
}

fn draw_sample(spec: &DatasetSpec, split: Split, index: usize) -> Result<Sample, DataError> {
    let tag = match split {
        Split::Train => 0x7472_6169,
        Split::Test => 0x7465_7374,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(spec.seed, tag), index as u64));
    let class_id = rng.gen_range(0..spec.num_classes);
    let w: f32 = rng.gen_range(0.35..0.75);
    let h: f32 = rng.gen_range(0.35..0.75);
    let cx: f32 = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
    let cy: f32 = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
    let mut values = Vec::with_capacity(spec.nuisances.len());
    for n in &spec.nuisances {
        let v = match split {
            Split::Train => WeightedIndex::new(&n.train_marginal)
                .map_err(|e| invalid(format!("nuisance '{}'", n.name), e.to_string()))?
                .sample(&mut rng),
            Split::Test => rng.gen_range(0..n.cardinality),
        };
        values.push(v);
    }
    let noise_seed: u64 = rng.gen();
    let y_o = DetectionLabel {
        class_id,
        bbox: [cx, cy, w, h],
    };
    let y_n = NuisanceLabel { values };
    let image = render_sample(&y_o, &y_n, spec, noise_seed)?;
    Ok(Sample { image, y_o, y_n })
}

/// Draws the train split from each nuisance's train marginal and the test
/// split uniformly. Class, box and nuisances are drawn independently.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let gen = |split, m: usize| -> Result<Vec<Sample>, DataError> {
        (0..m)
            .into_par_iter()
            .map(|i| draw_sample(spec, split, i))
            .collect()
    };
    Ok(Dataset {
        spec: spec.clone(),
        train: gen(Split::Train, spec.m_train)?,
        test: gen(Split::Test, spec.m_test)?,
    })
}

/// A minibatch laid out for the networks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub y_o: Vec<DetectionLabel>,
    /// `y_n[i][j]`: value of nuisance `i` for row `j`.
    pub y_n: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Batch {
        let samples: Vec<&Sample> = samples.into_iter().collect();
        let pixels = samples.first().map_or(0, |s| s.image.len());
        let k = samples.first().map_or(0, |s| s.y_n.values.len());
        let mut data = Vec::with_capacity(samples.len() * pixels);
        let mut y_n = vec![Vec::with_capacity(samples.len()); k];
        for s in &samples {
            data.extend(s.image.iter().map(|&p| f64::from(p)));
            for (col, &v) in y_n.iter_mut().zip(&s.y_n.values) {
                col.push(v);
            }
        }
        Batch {
            images: Tensor::matrix(samples.len(), pixels, data)
                .expect("all samples share image dims"),
            y_o: samples.iter().map(|s| s.y_o.clone()).collect(),
            y_n,
        }
    }

    pub fn len(&self) -> usize {
        self.y_o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_o.is_empty()
    }
}
