//! Binary trial file with a JSON metadata sidecar.
//!
//! ```text
//! "FNID" | version: u32 | n_trials: u32 | n_channels: u32 | n_samples: u32 | sample_rate_hz: f32
//! data: f32 × n_trials·n_channels·n_samples, trial-major
//! labels: u8 × n_trials
//! ```
//! All numbers are little-endian. Metadata goes to `<file>.meta.json`.

use std::path::{Path, PathBuf};

use super::{TrialMeta, TrialSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FNID";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 24;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn encode(set: &TrialSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + set.data.len() * 4 + set.len());
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        set.len() as u32,
        set.channels as u32,
        set.samples as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&set.meta.sample_rate_hz.to_le_bytes());
    for v in &set.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&set.labels);
    out
}

struct Header {
    trials: usize,
    channels: usize,
    samples: usize,
    sample_rate_hz: f32,
}

fn decode(bytes: &[u8]) -> std::result::Result<(Header, Vec<f32>, Vec<u8>), String> {
    if bytes.len() < HEADER {
        return Err(format!("truncated header ({} bytes)", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("bad magic".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    if word(0) != FORMAT_VERSION {
        return Err(format!("unsupported version {}", word(0)));
    }
    let h = Header {
        trials: word(1) as usize,
        channels: word(2) as usize,
        samples: word(3) as usize,
        sample_rate_hz: f32::from_le_bytes(bytes[20..24].try_into().unwrap()),
    };
    let values = h
        .trials
        .checked_mul(h.channels)
        .and_then(|v| v.checked_mul(h.samples))
        .ok_or("header extents overflow")?;
    let expected = HEADER + values * 4 + h.trials;
    if bytes.len() != expected {
        return Err(format!(
            "header declares {} trials of {}x{} ({expected} bytes), file has {}",
            h.trials,
            h.channels,
            h.samples,
            bytes.len()
        ));
    }
    let data_end = HEADER + values * 4;
    let data = bytes[HEADER..data_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, data, bytes[data_end..].to_vec()))
}

pub fn write_dataset(set: &TrialSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(set)).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(&set.meta).map_err(|e| Error::Dataset(format!("metadata: {e}")))?;
    std::fs::write(&sidecar, text + "\n").map_err(|e| Error::io(&sidecar, e))
}

/// Reads a trial file; the sidecar is optional and replaced by generic
/// channel names when missing.
pub fn read_dataset(path: &Path) -> Result<TrialSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let (h, data, labels) = decode(&bytes).map_err(corrupt)?;
    let sidecar = sidecar_path(path);
    let meta = match std::fs::read_to_string(&sidecar) {
        Ok(text) => {
            let meta: TrialMeta = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
                path: sidecar.clone(),
                detail: e.to_string(),
            })?;
            if meta.sample_rate_hz.to_bits() != h.sample_rate_hz.to_bits() {
                return Err(corrupt(format!(
                    "sidecar sample rate {} disagrees with header {}",
                    meta.sample_rate_hz, h.sample_rate_hz
                )));
            }
            meta
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrialMeta::plain(h.channels, h.sample_rate_hz),
        Err(e) => return Err(Error::io(&sidecar, e)),
    };
    TrialSet::new(h.channels, h.samples, data, labels, meta).map_err(|e| corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{synthesize, ParadigmConfig, SynthConfig, CHANNELS};

    fn small_set() -> TrialSet {
        let c = SynthConfig {
            trials_per_class: 25,
            paradigm: ParadigmConfig {
                subjects: 1,
                runs_per_subject: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        synthesize(&c, 4).unwrap()
    }

    #[test]
    fn generated_set_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.fnid");
        let set = small_set();
        write_dataset(&set, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&set.data));
        assert_eq!(back.labels, set.labels);
        assert_eq!(back, set);
        assert!(sidecar_path(&path).ends_with("set.fnid.meta.json"));
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.fnid");
        let set = TrialSet::new(CHANNELS, 150, vec![], vec![], TrialMeta::plain(CHANNELS, 10.0)).unwrap();
        write_dataset(&set, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
        let back = read_dataset(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, set);
    }

    #[test]
    fn missing_sidecar_gets_generic_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fnid");
        write_dataset(&small_set(), &path).unwrap();
        std::fs::remove_file(sidecar_path(&path)).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.meta.channel_names[0], "ch00");
        assert!(back.meta.trials.is_empty());
    }

    #[test]
    fn damage_is_reported() {
        let set = small_set();
        let bytes = encode(&set);
        let err = |b: &[u8]| decode(b).err().unwrap();
        assert!(err(&bytes[..bytes.len() - 1]).contains("header declares"));
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(err(&longer).contains("header declares"));
        let mut bad = bytes.clone();
        bad[0] = b'G';
        assert_eq!(err(&bad), "bad magic");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(err(&bad).contains("version"));
        let mut bad = bytes;
        bad[8] = bad[8].wrapping_add(1);
        assert!(err(&bad).contains("header declares"));
        assert!(err(b"FNID").contains("truncated"));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fnid");
        std::fs::write(&path, b"FNID\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corrupt { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn arbitrary_sets_round_trip(
            values in proptest::collection::vec(any::<f32>(), 0..6),
            seed in any::<u64>(),
        ) {
            // Trials of 1 channel × 2 samples built from raw bit patterns.
            let trials = values.len() / 2;
            let data = values[..trials * 2].to_vec();
            let labels = (0..trials).map(|i| ((seed >> i) & 1) as u8).collect();
            let set = TrialSet::new(1, 2, data, labels, TrialMeta::plain(1, 7.5)).unwrap();
            let bytes = encode(&set);
            let (h, data, labels) = decode(&bytes).unwrap();
            prop_assert_eq!(h.trials, trials);
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&data), bits(&set.data));
            prop_assert_eq!(labels, set.labels);
        }
    }
}
