//! Time-varying network delay models for the star LAN.
//!
//! Every machine hangs off one switch. A message between two distinct
//! machines crosses two links; a message to the same machine costs nothing.

use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, SimRng, Stream};
use crate::Micros;

#[derive(Debug, Error, PartialEq)]
pub enum DelayError {
    #[error("delay schedule is empty")]
    EmptySchedule,
    #[error("delay schedule must start at time 0, starts at {0}")]
    LateStart(Micros),
    #[error("delay schedule times must strictly increase (entry {0})")]
    NotIncreasing(usize),
    #[error("schedule entry {entry} lists {found} link delays for {expected} servers")]
    ServerCount {
        entry: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid lognormal parameters mean={mean} sd={sd}")]
    Lognormal { mean: f64, sd: f64 },
}

/// Per-server one-way link delays from `at` onwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkStep {
    pub at: Micros,
    pub one_way: Vec<Micros>,
}

/// Lognormal per-message delay from `at` onwards, given by its own mean and
/// standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LognormalStep {
    pub at: Micros,
    pub mean: Micros,
    pub sd: Micros,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DelayVariant {
    /// Every link has the same one-way delay.
    Constant { one_way: Micros },
    /// Per-server link delays that change at scheduled instants.
    SharpJump { schedule: Vec<LinkStep> },
    /// Each message independently draws a lognormal delay.
    Lognormal { schedule: Vec<LognormalStep> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    #[serde(flatten)]
    pub variant: DelayVariant,
    #[serde(default)]
    pub seed: u64,
}

impl DelayModel {
    pub fn constant(one_way: Micros) -> Self {
        DelayModel {
            variant: DelayVariant::Constant { one_way },
            seed: 0,
        }
    }

    pub fn zero() -> Self {
        Self::constant(Micros::ZERO)
    }

    /// Instants at which the model changes, starting with zero.
    pub fn change_times(&self) -> Vec<Micros> {
        match &self.variant {
            DelayVariant::Constant { .. } => vec![Micros::ZERO],
            DelayVariant::SharpJump { schedule } => schedule.iter().map(|s| s.at).collect(),
            DelayVariant::Lognormal { schedule } => schedule.iter().map(|s| s.at).collect(),
        }
    }

    pub fn validate(&self, n_servers: usize) -> Result<(), DelayError> {
        let times = self.change_times();
        match times.first() {
            None => return Err(DelayError::EmptySchedule),
            Some(&t) if t != Micros::ZERO => return Err(DelayError::LateStart(t)),
            _ => {}
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(DelayError::NotIncreasing(i + 1));
        }
        match &self.variant {
            DelayVariant::Constant { .. } => {}
            DelayVariant::SharpJump { schedule } => {
                for (entry, step) in schedule.iter().enumerate() {
                    if step.one_way.len() != n_servers {
                        return Err(DelayError::ServerCount {
                            entry,
                            found: step.one_way.len(),
                            expected: n_servers,
                        });
                    }
                }
            }
            DelayVariant::Lognormal { schedule } => {
                for step in schedule {
                    lognormal(step.mean.as_ms_f64(), step.sd.as_ms_f64())?;
                }
            }
        }
        Ok(())
    }

    /// Link delays in force at `at`, or `None` for the stochastic variant.
    pub fn links_at(&self, at: Micros, n_servers: usize) -> Option<Vec<Micros>> {
        match &self.variant {
            DelayVariant::Constant { one_way } => Some(vec![*one_way; n_servers]),
            DelayVariant::SharpJump { schedule } => Some(active(schedule, at, |s| s.at).one_way.clone()),
            DelayVariant::Lognormal { .. } => None,
        }
    }

    pub fn sampler(&self) -> DelaySampler {
        self.sampler_from(rng::stream(self.seed, Stream::Delay))
    }

    pub fn sampler_from(&self, rng: SimRng) -> DelaySampler {
        DelaySampler {
            model: self.clone(),
            rng,
        }
    }
}

fn active<T>(schedule: &[T], at: Micros, time: impl Fn(&T) -> Micros) -> &T {
    let idx = schedule.partition_point(|s| time(s) <= at);
    &schedule[idx.saturating_sub(1)]
}

/// A lognormal over milliseconds with the given mean and standard deviation
/// of the variate itself.
pub fn lognormal(mean: f64, sd: f64) -> Result<LogNormal<f64>, DelayError> {
    if !(mean > 0.0) || !(sd >= 0.0) || !sd.is_finite() || !mean.is_finite() {
        return Err(DelayError::Lognormal { mean, sd });
    }
    LogNormal::from_mean_cv(mean, sd / mean).map_err(|_| DelayError::Lognormal { mean, sd })
}

/// Lognormal processing time with zero meaning "no jitter".
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub mean: Micros,
    #[serde(default)]
    pub sd: Micros,
}

impl Jitter {
    pub fn validate(&self) -> Result<(), DelayError> {
        if self.mean == Micros::ZERO {
            return Ok(());
        }
        lognormal(self.mean.as_ms_f64(), self.sd.as_ms_f64()).map(|_| ())
    }

    pub fn distribution(&self) -> Option<LogNormal<f64>> {
        if self.mean == Micros::ZERO {
            None
        } else {
            lognormal(self.mean.as_ms_f64(), self.sd.as_ms_f64()).ok()
        }
    }
}

/// Stateful sampler; one per simulation run.
#[derive(Clone, Debug)]
pub struct DelaySampler {
    model: DelayModel,
    rng: SimRng,
}

impl DelaySampler {
    /// One-way delay of a message from machine `from` to machine `to` sent
    /// at `at`.
    pub fn sample(&mut self, from: usize, to: usize, at: Micros) -> Micros {
        if from == to {
            return Micros::ZERO;
        }
        match &self.model.variant {
            DelayVariant::Constant { one_way } => *one_way + *one_way,
            DelayVariant::SharpJump { schedule } => {
                let step = active(schedule, at, |s| s.at);
                step.one_way[from] + step.one_way[to]
            }
            DelayVariant::Lognormal { schedule } => {
                let step = active(schedule, at, |s| s.at);
                match lognormal(step.mean.as_ms_f64(), step.sd.as_ms_f64()) {
                    Ok(dist) => Micros::from_ms_f64(dist.sample(&mut self.rng)),
                    Err(_) => Micros::ZERO,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ms(v: u64) -> Micros {
        Micros::from_ms(v)
    }

    fn jump() -> DelayModel {
        let mut after = vec![ms(10); 9];
        for d in after.iter_mut().take(5) {
            *d = ms(26);
        }
        DelayModel {
            variant: DelayVariant::SharpJump {
                schedule: vec![
                    LinkStep { at: ms(0), one_way: vec![ms(10); 9] },
                    LinkStep { at: Micros::from_secs(800), one_way: after },
                ],
            },
            seed: 3,
        }
    }

    #[test]
    fn two_links_per_message_and_free_loopback() {
        let mut s = DelayModel::constant(ms(10)).sampler();
        assert_eq!(s.sample(0, 1, ms(5)), ms(20));
        assert_eq!(s.sample(4, 4, ms(5)), Micros::ZERO);
    }

    #[test]
    fn sharp_jump_switches_exactly_at_boundary() {
        let m = jump();
        m.validate(9).unwrap();
        let mut s = m.sampler();
        let t = Micros::from_secs(800);
        assert_eq!(s.sample(0, 8, t - Micros(1)), ms(20));
        assert_eq!(s.sample(0, 8, t), ms(36));
        assert_eq!(s.sample(0, 1, t), ms(52));
    }

    #[test]
    fn schedules_must_start_at_zero_and_increase() {
        let bad = DelayModel {
            variant: DelayVariant::Lognormal {
                schedule: vec![
                    LognormalStep { at: ms(0), mean: ms(3), sd: ms(1) },
                    LognormalStep { at: ms(0), mean: ms(4), sd: ms(1) },
                ],
            },
            seed: 0,
        };
        assert_eq!(bad.validate(9), Err(DelayError::NotIncreasing(1)));
        let late = DelayModel {
            variant: DelayVariant::Lognormal {
                schedule: vec![LognormalStep { at: ms(1), mean: ms(3), sd: ms(1) }],
            },
            seed: 0,
        };
        assert_eq!(late.validate(9), Err(DelayError::LateStart(ms(1))));
        let mut wrong = jump();
        if let DelayVariant::SharpJump { schedule } = &mut wrong.variant {
            schedule[1].one_way.pop();
        }
        assert!(matches!(wrong.validate(9), Err(DelayError::ServerCount { entry: 1, .. })));
    }

    #[test]
    fn lognormal_moments_match_requested_mean_and_sd() {
        let m = DelayModel {
            variant: DelayVariant::Lognormal {
                schedule: vec![LognormalStep { at: ms(0), mean: ms(3), sd: Micros(300) }],
            },
            seed: 11,
        };
        let mut s = m.sampler();
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.sample(0, 1, ms(1)).as_ms_f64()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 3.0).abs() < 0.01, "mean {mean}");
        assert!((var.sqrt() - 0.3).abs() < 0.01, "sd {}", var.sqrt());
        assert!(xs.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn same_seed_same_stream() {
        let m = DelayModel {
            variant: DelayVariant::Lognormal {
                schedule: vec![LognormalStep { at: ms(0), mean: ms(5), sd: ms(2) }],
            },
            seed: 42,
        };
        let a: Vec<_> = {
            let mut s = m.sampler();
            (0..1000).map(|i| s.sample(i % 9, (i + 1) % 9, ms(i as u64))).collect()
        };
        let b: Vec<_> = {
            let mut s = m.sampler();
            (0..1000).map(|i| s.sample(i % 9, (i + 1) % 9, ms(i as u64))).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn scenario_toml_shapes_parse() {
        let m: DelayModel = toml::from_str(
            "kind = \"lognormal\"\n[[schedule]]\nat = 0\nmean = 3\nsd = 0.3\n[[schedule]]\nat = 600000\nmean = 4\nsd = 0.3\n",
        )
        .unwrap();
        m.validate(9).unwrap();
        let c: DelayModel = toml::from_str("kind = \"constant\"\none_way = 10\n").unwrap();
        assert_eq!(c, DelayModel::constant(ms(10)));
    }
}
