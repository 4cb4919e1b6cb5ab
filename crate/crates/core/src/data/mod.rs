//! Synthetic oddball fNIRS trials, their on-disk format and input selection.

mod format;
mod paradigm;
mod synth;

pub use format::{read_dataset, sidecar_path, write_dataset, FORMAT_VERSION, MAGIC};
pub use paradigm::{balance, gen_paradigm, gen_run, Event, ParadigmConfig, Run};
pub use synth::{double_gamma, synthesize, HrfConfig, Preset, Region, Sinusoid, SynthConfig, REGIONS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Optode pairs per chromophore; the dual input stacks HbO2 then HbR.
pub const SOURCES: usize = 14;
pub const CHANNELS: usize = 2 * SOURCES;

pub const STANDARD: u8 = 0;
pub const DEVIANT: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub subject: usize,
    pub run: usize,
    pub onset_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub sample_rate_hz: f32,
    pub channel_names: Vec<String>,
    /// Per-trial origin; empty when unknown.
    pub trials: Vec<TrialInfo>,
    /// Generator settings, when the set was synthesized.
    pub generator: Option<SynthConfig>,
    pub seed: Option<u64>,
}

impl TrialMeta {
    pub fn plain(channels: usize, sample_rate_hz: f32) -> Self {
        TrialMeta {
            sample_rate_hz,
            channel_names: (0..channels).map(|c| format!("ch{c:02}")).collect(),
            trials: Vec::new(),
            generator: None,
            seed: None,
        }
    }
}

pub fn channel_names() -> Vec<String> {
    let hbo = (0..SOURCES).map(|c| format!("hbo2_{c:02}"));
    let hbr = (0..SOURCES).map(|c| format!("hbr_{c:02}"));
    hbo.chain(hbr).collect()
}

/// Labeled epochs stored trial-major as `[trials, channels, samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub channels: usize,
    pub samples: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub meta: TrialMeta,
}

impl TrialSet {
    pub fn new(channels: usize, samples: usize, data: Vec<f32>, labels: Vec<u8>, meta: TrialMeta) -> Result<Self> {
        if data.len() != labels.len() * channels * samples {
            return Err(Error::Dataset(format!(
                "{} values for {} trials of {channels}x{samples}",
                data.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > DEVIANT) {
            return Err(Error::Dataset(format!("label {l} is not 0 or 1")));
        }
        if meta.channel_names.len() != channels {
            return Err(Error::Dataset(format!(
                "{} channel names for {channels} channels",
                meta.channel_names.len()
            )));
        }
        Ok(TrialSet {
            channels,
            samples,
            data,
            labels,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial(&self, i: usize) -> &[f32] {
        let n = self.channels * self.samples;
        &self.data[i * n..(i + 1) * n]
    }

    /// `(standards, deviants)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let dev = self.labels.iter().filter(|&&l| l == DEVIANT).count();
        (self.len() - dev, dev)
    }

    /// Batch tensor `[indices.len(), channels, samples, 1]`.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Dataset(format!("trial {i} out of {}", self.len())));
            }
            data.extend(self.trial(i).iter().map(|&v| T::of(f64::from(v))));
        }
        Tensor::new(vec![indices.len(), self.channels, self.samples, 1], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| usize::from(self.labels[i])).collect()
    }

    /// Keeps the trials at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TrialSet {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        let mut meta = self.meta.clone();
        if !meta.trials.is_empty() {
            meta.trials = indices.iter().map(|&i| self.meta.trials[i].clone()).collect();
        }
        TrialSet {
            channels: self.channels,
            samples: self.samples,
            data,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            meta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Hbo2,
    Hbr,
    Both,
}

impl std::str::FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hbo2" => Ok(Modality::Hbo2),
            "hbr" => Ok(Modality::Hbr),
            "both" => Ok(Modality::Both),
            other => Err(format!("unknown input {other:?} (hbo2, hbr, both)")),
        }
    }
}

/// Channel subset of a dual-chromophore set: HbO2 is the first half,
/// HbR the second.
pub fn split_modality(set: &TrialSet, which: Modality) -> Result<TrialSet> {
    if set.channels != CHANNELS {
        return Err(Error::Dataset(format!(
            "modality split needs {CHANNELS} channels, got {}",
            set.channels
        )));
    }
    let range = match which {
        Modality::Both => return Ok(set.clone()),
        Modality::Hbo2 => 0..SOURCES,
        Modality::Hbr => SOURCES..CHANNELS,
    };
    let s = set.samples;
    let mut data = Vec::with_capacity(set.len() * SOURCES * s);
    for i in 0..set.len() {
        let trial = set.trial(i);
        data.extend_from_slice(&trial[range.start * s..range.end * s]);
    }
    let mut meta = set.meta.clone();
    meta.channel_names = meta.channel_names[range].to_vec();
    TrialSet::new(SOURCES, s, data, set.labels.clone(), meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrialSet {
        let n = 3;
        let data = (0..n * CHANNELS * 4).map(|v| v as f32).collect();
        TrialSet::new(CHANNELS, 4, data, vec![0, 1, 1], TrialMeta::plain(CHANNELS, 10.0)).unwrap()
    }

    #[test]
    fn modality_split_partitions_channels() {
        let set = tiny();
        assert_eq!(split_modality(&set, Modality::Both).unwrap(), set);
        let hbo = split_modality(&set, Modality::Hbo2).unwrap();
        let hbr = split_modality(&set, Modality::Hbr).unwrap();
        assert_eq!((hbo.channels, hbo.samples), (14, 4));
        for i in 0..set.len() {
            let mut joined = hbo.trial(i).to_vec();
            joined.extend_from_slice(hbr.trial(i));
            assert_eq!(joined, set.trial(i));
        }
        assert!(split_modality(&hbo, Modality::Hbr).is_err());
    }

    #[test]
    fn batch_layout() {
        let set = tiny();
        let b: Tensor<f32> = set.batch(&[2, 0]).unwrap();
        assert_eq!(b.shape(), &[2, 28, 4, 1]);
        assert_eq!(&b.data()[..112], set.trial(2));
        assert_eq!(set.labels_of(&[2, 0]), vec![1, 0]);
        assert!(set.batch::<f32>(&[3]).is_err());
    }

    #[test]
    fn rejects_inconsistent_sets() {
        let meta = TrialMeta::plain(2, 10.0);
        assert!(TrialSet::new(2, 3, vec![0.0; 5], vec![0], meta.clone()).is_err());
        assert!(TrialSet::new(2, 3, vec![0.0; 6], vec![2], meta).is_err());
    }
}
