//! Oddball stimulus timelines and standard-trial balancing.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParadigmConfig {
    pub subjects: usize,
    pub runs_per_subject: usize,
    pub deviants_per_run: usize,
    /// Inclusive range of standard tones per run.
    pub standards_min: usize,
    pub standards_max: usize,
    pub stimulus_ms: u32,
    pub isi_ms: u32,
    /// Fewest standards separating two consecutive deviants.
    pub min_standards_between: usize,
}

impl Default for ParadigmConfig {
    fn default() -> Self {
        ParadigmConfig {
            subjects: 9,
            runs_per_subject: 6,
            deviants_per_run: 20,
            standards_min: 120,
            standards_max: 140,
            stimulus_ms: 500,
            isi_ms: 2000,
            min_standards_between: 2,
        }
    }
}

impl ParadigmConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("subjects", self.subjects),
            ("runs_per_subject", self.runs_per_subject),
            ("stimulus_ms", self.stimulus_ms as usize),
            ("isi_ms", self.isi_ms as usize),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.standards_min > self.standards_max {
            return Err(Error::config(
                "standards_min",
                format!("{} exceeds standards_max {}", self.standards_min, self.standards_max),
            ));
        }
        let needed = self.min_standards_between * self.deviants_per_run.saturating_sub(1);
        if needed > self.standards_min {
            return Err(Error::Infeasible(format!(
                "{} deviants need at least {needed} standards between them, minimum is {}",
                self.deviants_per_run, self.standards_min
            )));
        }
        Ok(())
    }

    /// Onset-to-onset spacing: tone duration plus the silent interval.
    pub fn onset_spacing_s(&self) -> f64 {
        f64::from(self.stimulus_ms + self.isi_ms) / 1000.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub onset_s: f64,
    pub deviant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub events: Vec<Event>,
    pub duration_s: f64,
}

impl Run {
    pub fn deviant_count(&self) -> usize {
        self.events.iter().filter(|e| e.deviant).count()
    }

    /// For each standard, its 1-based position after the preceding deviant,
    /// or `None` when it precedes the first deviant or follows the last.
    pub fn gap_positions(&self) -> Vec<Option<usize>> {
        let last_deviant = self.events.iter().rposition(|e| e.deviant);
        let mut since: Option<usize> = None;
        self.events
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.deviant {
                    since = Some(0);
                    return None;
                }
                since = since.map(|n| n + 1);
                match last_deviant {
                    Some(last) if i < last => since,
                    _ => None,
                }
            })
            .collect()
    }
}

/// One run with `standards` standard tones and the configured deviants.
/// Leftover standards beyond the required minimum spacing are scattered
/// uniformly over the leading, interior and trailing gaps.
pub fn gen_run(config: &ParadigmConfig, standards: usize, rng: &mut Rng) -> Result<Run> {
    let d = config.deviants_per_run;
    let mut gaps = vec![0usize; d + 1];
    let required = config.min_standards_between * d.saturating_sub(1);
    if required > standards {
        return Err(Error::Infeasible(format!(
            "{d} deviants need {required} standards between them, got {standards}"
        )));
    }
    for g in gaps.iter_mut().take(d).skip(1) {
        *g = config.min_standards_between;
    }
    for _ in 0..standards - required {
        let g = rng.random_range(0..=d);
        gaps[g] += 1;
    }
    let spacing = config.onset_spacing_s();
    let mut events = Vec::with_capacity(standards + d);
    for (i, &gap) in gaps.iter().enumerate() {
        events.extend(std::iter::repeat_n(false, gap));
        if i < d {
            events.push(true);
        }
    }
    let events: Vec<Event> = events
        .into_iter()
        .enumerate()
        .map(|(k, deviant)| Event {
            onset_s: k as f64 * spacing,
            deviant,
        })
        .collect();
    Ok(Run {
        duration_s: events.len() as f64 * spacing,
        events,
    })
}

/// Timelines for every subject and run, standards per run drawn uniformly
/// from the configured range.
pub fn gen_paradigm(config: &ParadigmConfig, rng: &mut Rng) -> Result<Vec<Run>> {
    config.validate()?;
    (0..config.subjects * config.runs_per_subject)
        .map(|_| {
            let s = rng.random_range(config.standards_min..=config.standards_max);
            gen_run(config, s, rng)
        })
        .collect()
}

/// Event indices of standards chosen to match the deviant count: only the
/// third or fourth standard after a deviant, strictly between two deviants,
/// is eligible.
pub fn balance(run: &Run, rng: &mut Rng) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = run
        .gap_positions()
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| matches!(p, Some(3 | 4)).then_some(i))
        .collect();
    let need = run.deviant_count();
    if candidates.len() < need {
        return Err(Error::Infeasible(format!(
            "{} eligible standards for {need} deviants",
            candidates.len()
        )));
    }
    let mut picked: Vec<usize> = sample(rng, candidates.len(), need)
        .into_iter()
        .map(|k| candidates[k])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::seeded;

    fn run_from(pattern: &str) -> Run {
        let events = pattern
            .chars()
            .enumerate()
            .map(|(k, c)| Event {
                onset_s: k as f64 * 2.5,
                deviant: c == 'D',
            })
            .collect::<Vec<_>>();
        Run {
            duration_s: events.len() as f64 * 2.5,
            events,
        }
    }

    #[test]
    fn event_count_and_duration() {
        let run = gen_run(&ParadigmConfig::default(), 130, &mut seeded(1)).unwrap();
        assert_eq!(run.events.len(), 150);
        assert_eq!(run.deviant_count(), 20);
        assert_eq!(run.duration_s, 150.0 * 2.5);
        assert_eq!(run.events[1].onset_s, 2.5);
    }

    #[test]
    fn no_deviants() {
        let c = ParadigmConfig {
            deviants_per_run: 0,
            ..Default::default()
        };
        let run = gen_run(&c, 12, &mut seeded(1)).unwrap();
        assert_eq!(run.events.len(), 12);
        assert!(run.events.iter().all(|e| !e.deviant));
        assert!(balance(&run, &mut seeded(2)).unwrap().is_empty());
    }

    #[test]
    fn infeasible_spacing() {
        let c = ParadigmConfig::default();
        assert!(matches!(gen_run(&c, 37, &mut seeded(1)), Err(Error::Infeasible(_))));
        assert!(gen_run(&c, 38, &mut seeded(1)).is_ok());
        let c = ParadigmConfig {
            standards_min: 10,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn gap_positions_follow_definition() {
        let run = run_from("SDSSDSSSSSDSS");
        let pos = run.gap_positions();
        assert_eq!(
            pos,
            vec![
                None,
                None,
                Some(1),
                Some(2),
                None,
                Some(1),
                Some(2),
                Some(3),
                Some(4),
                Some(5),
                None,
                None,
                None
            ]
        );
    }

    #[test]
    fn short_gap_contributes_nothing() {
        let run = run_from("DSSDSSSD");
        let err = balance(&run, &mut seeded(0)).unwrap_err();
        assert!(err.to_string().contains("1 eligible"), "{err}");
        let run = run_from("DSSSSDSSSSD");
        let picked = balance(&run, &mut seeded(0)).unwrap();
        assert_eq!(picked.len(), 3);
        assert!(picked.iter().all(|&i| [3, 4, 8, 9].contains(&i)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn spacing_and_balance_hold(seed in any::<u64>(), standards in 120usize..=140) {
            let c = ParadigmConfig::default();
            let mut rng = seeded(seed);
            let run = gen_run(&c, standards, &mut rng).unwrap();
            let deviants: Vec<usize> = run.events.iter().enumerate()
                .filter(|(_, e)| e.deviant).map(|(i, _)| i).collect();
            for w in deviants.windows(2) {
                prop_assert!(w[1] - w[0] > 2);
            }
            let picked = balance(&run, &mut rng).unwrap();
            prop_assert_eq!(picked.len(), 20);
            let pos = run.gap_positions();
            for &i in &picked {
                prop_assert!(!run.events[i].deviant);
                prop_assert!(matches!(pos[i], Some(3 | 4)));
            }
        }
    }
}
