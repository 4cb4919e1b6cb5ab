//! Continuous hemodynamic signals for each run, cut into labeled epochs.

use std::f64::consts::TAU;
use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::paradigm::{balance, gen_paradigm, ParadigmConfig, Run};
use super::{channel_names, TrialInfo, TrialMeta, TrialSet, CHANNELS, DEVIANT, SOURCES, STANDARD};
use crate::error::{Error, Result};
use crate::rng::{derived, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Frontal,
    LeftAuditory,
    RightAuditory,
}

/// Source channels per region of interest.
pub const REGIONS: [(Region, Range<usize>); 3] = [
    (Region::Frontal, 0..4),
    (Region::LeftAuditory, 4..9),
    (Region::RightAuditory, 9..14),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HrfConfig {
    pub peak_time_s: f64,
    pub undershoot_time_s: f64,
    /// Undershoot gamma weight relative to the peak gamma.
    pub undershoot_ratio: f64,
    pub standard_amplitude: f64,
    pub deviant_amplitude: f64,
    /// Response gain for frontal, left auditory and right auditory sources.
    pub region_gain: [f64; 3],
    /// Scale from HbO2 to HbR; negative.
    pub hbr_ratio: f64,
    pub hbr_delay_s: f64,
    pub white_sigma: f64,
    pub sinusoids: Vec<Sinusoid>,
    /// Relative standard deviation of each tone's response amplitude.
    pub trial_jitter: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Default,
    /// Deviant response 3x the standard one, little noise.
    Easy,
    /// Both classes share one response distribution.
    Null,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "default" => Ok(Preset::Default),
            "easy" => Ok(Preset::Easy),
            "null" => Ok(Preset::Null),
            other => Err(format!("unknown preset {other:?} (default, easy, null)")),
        }
    }
}

impl Default for HrfConfig {
    fn default() -> Self {
        HrfConfig {
            peak_time_s: 6.0,
            undershoot_time_s: 12.0,
            undershoot_ratio: 1.0 / 6.0,
            standard_amplitude: 1.0,
            deviant_amplitude: 1.6,
            region_gain: [0.6, 1.0, 1.0],
            hbr_ratio: -0.3,
            hbr_delay_s: 1.0,
            white_sigma: 0.6,
            sinusoids: vec![
                Sinusoid {
                    freq_hz: 0.1,
                    amplitude: 0.4,
                },
                Sinusoid {
                    freq_hz: 0.3,
                    amplitude: 0.2,
                },
            ],
            trial_jitter: 0.25,
        }
    }
}

impl HrfConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = HrfConfig::default();
        match preset {
            Preset::Default => base,
            Preset::Easy => HrfConfig {
                deviant_amplitude: 3.0 * base.standard_amplitude,
                white_sigma: 0.1,
                sinusoids: base
                    .sinusoids
                    .iter()
                    .map(|s| Sinusoid {
                        amplitude: s.amplitude / 8.0,
                        ..*s
                    })
                    .collect(),
                trial_jitter: 0.1,
                ..base
            },
            Preset::Null => HrfConfig {
                deviant_amplitude: base.standard_amplitude,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_time_s > 0.0 && self.peak_time_s < self.undershoot_time_s) {
            return Err(Error::config("peak_time_s", "need 0 < peak_time_s < undershoot_time_s"));
        }
        if !(self.hbr_ratio < 0.0) {
            return Err(Error::config("hbr_ratio", "must be negative"));
        }
        let non_negative = [
            ("undershoot_ratio", self.undershoot_ratio),
            ("standard_amplitude", self.standard_amplitude),
            ("deviant_amplitude", self.deviant_amplitude),
            ("hbr_delay_s", self.hbr_delay_s),
            ("white_sigma", self.white_sigma),
            ("trial_jitter", self.trial_jitter),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if self
            .sinusoids
            .iter()
            .any(|s| !(s.freq_hz >= 0.0 && s.amplitude.is_finite()))
        {
            return Err(Error::config("sinusoids", "need finite amplitude and freq_hz >= 0"));
        }
        Ok(())
    }

    /// Response of one tone at lag `t` seconds, before amplitude scaling.
    pub fn response(&self, t: f64) -> f64 {
        double_gamma(t, self.peak_time_s, self.undershoot_time_s, self.undershoot_ratio)
    }
}

/// `g(t; a) - c·g(t; b)` with `g(t; m) = (t/m)^m · e^(m - t)`, which peaks at
/// exactly 1 when `t = m`; zero for `t <= 0`.
pub fn double_gamma(t: f64, peak: f64, undershoot: f64, ratio: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let g = |m: f64| (m * (t / m).ln() + m - t).exp();
    g(peak) - ratio * g(undershoot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub paradigm: ParadigmConfig,
    pub hrf: HrfConfig,
    pub trials_per_class: usize,
    pub sample_rate_hz: f64,
    pub epoch_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            paradigm: ParadigmConfig::default(),
            hrf: HrfConfig::default(),
            trials_per_class: 918,
            sample_rate_hz: 10.0,
            epoch_s: 15.0,
        }
    }
}

impl SynthConfig {
    pub fn epoch_samples(&self) -> usize {
        (self.epoch_s * self.sample_rate_hz).round() as usize
    }

    /// Upper bound on trials per class: every deviant of every run.
    pub fn capacity(&self) -> usize {
        let p = &self.paradigm;
        p.subjects * p.runs_per_subject * p.deviants_per_run
    }

    pub fn validate(&self) -> Result<()> {
        self.paradigm.validate()?;
        self.hrf.validate()?;
        if !(self.sample_rate_hz > 0.0 && self.epoch_s > 0.0) {
            return Err(Error::config(
                "sample_rate_hz",
                "rate and epoch length must be positive",
            ));
        }
        if self.epoch_samples() == 0 {
            return Err(Error::config("epoch_s", "epoch shorter than one sample"));
        }
        if self.trials_per_class == 0 {
            return Err(Error::config("trials_per_class", "must be positive"));
        }
        if self.trials_per_class > self.capacity() {
            return Err(Error::config(
                "trials_per_class",
                format!(
                    "{} exceeds the {} deviants the paradigm produces",
                    self.trials_per_class,
                    self.capacity()
                ),
            ));
        }
        Ok(())
    }
}

/// Continuous HbO2 and HbR traces `[SOURCES][samples]` of one run, without
/// the white noise.
pub(crate) struct CleanRun {
    pub hbo: Vec<Vec<f32>>,
    pub hbr: Vec<Vec<f32>>,
}

pub(crate) fn clean_run(config: &SynthConfig, run: &Run, rng: &mut Rng) -> CleanRun {
    let h = &config.hrf;
    let fs = config.sample_rate_hz;
    let delay = (h.hbr_delay_s * fs).round() as usize;
    let len = ((run.duration_s + config.epoch_s) * fs).ceil() as usize + 1;
    // The response is negligible beyond this many undershoot periods.
    let support = ((4.0 * h.undershoot_time_s) * fs).ceil() as usize;
    let kernel: Vec<f64> = (0..support).map(|k| h.response(k as f64 / fs)).collect();

    let mut gain = [0.0f64; SOURCES];
    for (i, (_, chans)) in REGIONS.iter().enumerate() {
        for c in chans.clone() {
            gain[c] = h.region_gain[i];
        }
    }

    let mut drive = vec![0.0f64; len];
    for e in &run.events {
        let base = if e.deviant {
            h.deviant_amplitude
        } else {
            h.standard_amplitude
        };
        let z: f64 = StandardNormal.sample(rng);
        let amp = base * (1.0 + h.trial_jitter * z);
        let start = (e.onset_s * fs).round() as usize;
        for (k, &v) in kernel.iter().enumerate() {
            match drive.get_mut(start + k) {
                Some(d) => *d += amp * v,
                None => break,
            }
        }
    }
    let confound: Vec<f64> = {
        let phases: Vec<f64> = h.sinusoids.iter().map(|_| rng.random_range(0.0..TAU)).collect();
        (0..len)
            .map(|t| {
                let secs = t as f64 / fs;
                h.sinusoids
                    .iter()
                    .zip(&phases)
                    .map(|(s, p)| s.amplitude * (TAU * s.freq_hz * secs + p).sin())
                    .sum()
            })
            .collect()
    };

    let ratio = h.hbr_ratio as f32;
    let hbo: Vec<Vec<f32>> = gain
        .iter()
        .map(|&g| drive.iter().zip(&confound).map(|(d, c)| (g * d + c) as f32).collect())
        .collect();
    let hbr = hbo
        .iter()
        .map(|x| {
            (0..len)
                .map(|t| if t >= delay { ratio * x[t - delay] } else { 0.0 })
                .collect()
        })
        .collect();
    CleanRun { hbo, hbr }
}

struct Epoch {
    run: usize,
    event: usize,
    onset_s: f64,
    label: u8,
    values: Vec<f32>,
}

fn run_epochs(config: &SynthConfig, index: usize, run: &Run, picked: &[usize], seed: u64) -> Vec<Epoch> {
    let mut rng = derived(seed, 10_000 + index as u64);
    let clean = clean_run(config, run, &mut rng);
    let fs = config.sample_rate_hz;
    let n = config.epoch_samples();
    let sigma = config.hrf.white_sigma;
    let mut keep: Vec<usize> = run
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.deviant)
        .map(|(i, _)| i)
        .chain(picked.iter().copied())
        .collect();
    keep.sort_unstable();
    keep.into_iter()
        .map(|i| {
            let e = run.events[i];
            let start = (e.onset_s * fs).round() as usize;
            let mut values = Vec::with_capacity(CHANNELS * n);
            for trace in clean.hbo.iter().chain(&clean.hbr) {
                for &v in &trace[start..start + n] {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    values.push(v + (sigma * noise) as f32);
                }
            }
            Epoch {
                run: index,
                event: i,
                onset_s: e.onset_s,
                label: if e.deviant { DEVIANT } else { STANDARD },
                values,
            }
        })
        .collect()
}

/// Generates the timeline, balances standards against deviants, renders
/// every run and keeps `trials_per_class` epochs of each class.
pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<TrialSet> {
    config.validate()?;
    let runs = gen_paradigm(&config.paradigm, &mut derived(seed, 0))?;
    let picks = runs
        .iter()
        .enumerate()
        .map(|(i, run)| balance(run, &mut derived(seed, 1_000 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let epochs: Vec<Epoch> = runs
        .par_iter()
        .zip(&picks)
        .enumerate()
        .map(|(i, (run, picked))| run_epochs(config, i, run, picked, seed))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();

    let mut rng = derived(seed, 2);
    let mut chosen = Vec::with_capacity(2 * config.trials_per_class);
    for class in [STANDARD, DEVIANT] {
        let members: Vec<usize> = (0..epochs.len()).filter(|&i| epochs[i].label == class).collect();
        if members.len() < config.trials_per_class {
            return Err(Error::Dataset(format!(
                "{} trials of class {class} available, {} requested",
                members.len(),
                config.trials_per_class
            )));
        }
        chosen.extend(
            sample(&mut rng, members.len(), config.trials_per_class)
                .into_iter()
                .map(|k| members[k]),
        );
    }
    chosen.sort_unstable();

    let n = config.epoch_samples();
    let per_subject = config.paradigm.runs_per_subject;
    let mut data = Vec::with_capacity(chosen.len() * CHANNELS * n);
    let mut labels = Vec::with_capacity(chosen.len());
    let mut trials = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        let e = &epochs[i];
        debug_assert!(i == 0 || (epochs[i - 1].run, epochs[i - 1].event) < (e.run, e.event));
        data.extend_from_slice(&e.values);
        labels.push(e.label);
        trials.push(TrialInfo {
            subject: e.run / per_subject,
            run: e.run % per_subject,
            onset_s: e.onset_s,
        });
    }
    let meta = TrialMeta {
        sample_rate_hz: config.sample_rate_hz as f32,
        channel_names: channel_names(),
        trials,
        generator: Some(config.clone()),
        seed: Some(seed),
    };
    TrialSet::new(CHANNELS, n, data, labels, meta)
}
