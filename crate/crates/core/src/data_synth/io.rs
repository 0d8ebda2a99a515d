//! Dataset directory: `meta.json` plus `samples.bin`.
//!
//! Each record in `samples.bin` is `H*W` little-endian `f32` pixels, the
//! class id as `u16`, four `f32` box coordinates and `k` `u16` nuisance ids.
//! Train records come first, then test records.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetSpec, DetectionLabel, NuisanceLabel, NuisanceSpec, Sample};

pub const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const SAMPLES_FILE: &str = "samples.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub k: usize,
    pub nuisances: Vec<NuisanceSpec>,
    #[serde(rename = "M_train")]
    pub m_train: usize,
    #[serde(rename = "M_test")]
    pub m_test: usize,
    pub seed: u64,
    pub noise_amplitude: f32,
}

impl DatasetMeta {
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        Self {
            version: FORMAT_VERSION,
            height: spec.height,
            width: spec.width,
            num_classes: spec.num_classes,
            k: spec.nuisances.len(),
            nuisances: spec.nuisances.clone(),
            m_train: spec.m_train,
            m_test: spec.m_test,
            seed: spec.seed,
            noise_amplitude: spec.noise_amplitude,
        }
    }

    pub fn to_spec(&self) -> DatasetSpec {
        DatasetSpec {
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            nuisances: self.nuisances.clone(),
            m_train: self.m_train,
            m_test: self.m_test,
            seed: self.seed,
            noise_amplitude: self.noise_amplitude,
        }
    }

    pub fn record_len(&self) -> usize {
        4 * self.height * self.width + 2 + 16 + 2 * self.k
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode(sample: &Sample, out: &mut Vec<u8>) -> Result<(), DataError> {
    for p in &sample.image {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let class = u16::try_from(sample.y_o.class_id)
        .map_err(|_| DataError::InvalidLabel(format!("class {} exceeds u16", sample.y_o.class_id)))?;
    out.extend_from_slice(&class.to_le_bytes());
    for b in &sample.y_o.bbox {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for &v in &sample.y_n.values {
        let v = u16::try_from(v)
            .map_err(|_| DataError::InvalidLabel(format!("nuisance value {v} exceeds u16")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = DatasetMeta::from_spec(&dataset.spec);
    if dataset.train.len() != meta.m_train || dataset.test.len() != meta.m_test {
        return Err(DataError::Meta(format!(
            "spec counts ({}, {}) disagree with splits ({}, {})",
            meta.m_train,
            meta.m_test,
            dataset.train.len(),
            dataset.test.len()
        )));
    }
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Meta(e.to_string()))?;
    fs::write(&meta_path, json + "\n").map_err(io_err(&meta_path))?;

    let bin_path = dir.join(SAMPLES_FILE);
    let file = fs::File::create(&bin_path).map_err(io_err(&bin_path))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(meta.record_len());
    for (i, s) in dataset.train.iter().chain(&dataset.test).enumerate() {
        if s.image.len() != meta.height * meta.width || s.y_n.values.len() != meta.k {
            return Err(DataError::Corrupt {
                record: i,
                reason: "sample dims disagree with the dataset spec".into(),
            });
        }
        buf.clear();
        encode(s, &mut buf)?;
        w.write_all(&buf).map_err(io_err(&bin_path))?;
    }
    w.flush().map_err(io_err(&bin_path))?;
    Ok(())
}

fn decode(bytes: &[u8], meta: &DatasetMeta, record: usize) -> Result<Sample, DataError> {
    let corrupt = |reason: String| DataError::Corrupt { record, reason };
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
    let pixels = meta.height * meta.width;
    let image: Vec<f32> = (0..pixels).map(|i| f32_at(4 * i)).collect();
    if let Some(p) = image.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(corrupt(format!("pixel {p} outside [0, 1]")));
    }
    let mut o = 4 * pixels;
    let class_id = usize::from(u16_at(o));
    o += 2;
    let bbox = [f32_at(o), f32_at(o + 4), f32_at(o + 8), f32_at(o + 12)];
    o += 16;
    let y_o = DetectionLabel { class_id, bbox };
    y_o.validate(meta.num_classes).map_err(|e| corrupt(e.to_string()))?;
    let values: Vec<usize> = (0..meta.k).map(|i| usize::from(u16_at(o + 2 * i))).collect();
    for (n, &v) in meta.nuisances.iter().zip(&values) {
        if v >= n.cardinality {
            return Err(corrupt(format!("nuisance '{}' value {v} out of range", n.name)));
        }
    }
    Ok(Sample {
        image,
        y_o,
        y_n: NuisanceLabel { values },
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| DataError::Meta(format!("{META_FILE}: {e}")))?;
    if meta.version != FORMAT_VERSION {
        return Err(DataError::Meta(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            meta.version
        )));
    }
    if meta.k != meta.nuisances.len() {
        return Err(DataError::Meta(format!(
            "k = {} but {} nuisances listed",
            meta.k,
            meta.nuisances.len()
        )));
    }
    let spec = meta.to_spec();
    spec.validate()?;

    let bin_path = dir.join(SAMPLES_FILE);
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let rec = meta.record_len();
    let total = meta.m_train + meta.m_test;
    if bytes.len() < total * rec {
        return Err(DataError::Corrupt {
            record: bytes.len() / rec,
            reason: format!(
                "file truncated: {} bytes, header implies {} records of {rec} bytes",
                bytes.len(),
                total
            ),
        });
    }
    if bytes.len() > total * rec {
        return Err(DataError::Meta(format!(
            "{SAMPLES_FILE} has {} bytes but header implies {}",
            bytes.len(),
            total * rec
        )));
    }
    let mut samples = bytes
        .chunks_exact(rec)
        .enumerate()
        .map(|(i, chunk)| decode(chunk, &meta, i))
        .collect::<Result<Vec<_>, _>>()?;
    let test = samples.split_off(meta.m_train);
    Ok(Dataset {
        spec,
        train: samples,
        test,
    })
}
