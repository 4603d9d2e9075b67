//! Time discretization: the variance-preserving noise schedule, DDIM
//! coefficients, the resampling variance schedule and the staged timetable
//! that decides where hard data consistency runs.
//!
//! Arrays are 0-based: `t = 0` is the data end, `t = T - 1` the noise end.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    eta: f64,
    /// `delta[t]` drives the stochastic term of the step `t -> t - 1`; `delta[0] = 0`.
    delta: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of the per-step noise rate from `beta_min` to `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "noise rates must satisfy 0 < beta_min <= beta_max < 1 (got {beta_min}, {beta_max})"
            )));
        }
        let last = (steps - 1) as f64;
        let beta = (0..steps)
            .map(|t| beta_min + (beta_max - beta_min) * t as f64 / last)
            .collect();
        Self::from_betas(beta, eta)
    }

    /// Builds a schedule from an explicit non-decreasing rate sequence.
    pub fn from_betas(beta: Vec<f64>, eta: f64) -> Result<Self> {
        if beta.len() < 2 {
            return Err(Error::InvalidArgument(
                "schedule needs at least 2 steps".into(),
            ));
        }
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "eta must be >= 0, got {eta}"
            )));
        }
        if beta.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument(
                "every beta must lie in (0, 1)".into(),
            ));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("beta must be non-decreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let mut delta = vec![0.0; alpha.len()];
        for t in 1..alpha.len() {
            let (prev, cur) = (alpha_bar[t - 1], alpha_bar[t]);
            delta[t] = ((1.0 - prev) / (1.0 - cur)).sqrt() * (1.0 - cur / prev).sqrt();
        }
        for t in 1..alpha.len() {
            let slack = 1.0 - alpha_bar[t - 1] - eta * eta * delta[t] * delta[t];
            if slack < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "eta = {eta} makes the DDIM noise coefficient imaginary at t = {t}"
                )));
            }
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            eta,
            delta,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Domain {
                t,
                range: format!("[0, {})", self.steps()),
            });
        }
        Ok(())
    }

    /// Resampling variance `gamma * (1 - abar[t-1]) / abar[t] * (1 - abar[t] / abar[t-1])`.
    pub fn resample_sigma2(&self, t: usize, gamma: f64) -> Result<f64> {
        if t == 0 || t >= self.steps() {
            return Err(Error::Domain {
                t,
                range: format!("[1, {})", self.steps()),
            });
        }
        if !(gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be >= 0, got {gamma}"
            )));
        }
        let (prev, cur) = (self.alpha_bar[t - 1], self.alpha_bar[t]);
        Ok(gamma * ((1.0 - prev) / cur) * (1.0 - cur / prev))
    }
}

/// Which solver enforces data consistency inside a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    None,
    Pixel,
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimetablePreset {
    /// Three equal thirds.
    Natural,
    /// Boundaries at 75% and 30% of the horizon (`t > 750`, `300 < t <= 750`, `t <= 300` for T = 1000).
    Medical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub steps: Range<usize>,
    pub mode: StageMode,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResampleTimetable {
    /// Ordered from the noise end: `stages[0]` is the earliest stage of sampling.
    pub stages: [Stage; 3],
    pub resample_steps: BTreeSet<usize>,
    pub skip: usize,
}

impl ResampleTimetable {
    pub fn build(schedule: &NoiseSchedule, skip: usize, preset: TimetablePreset) -> Result<Self> {
        if skip == 0 {
            return Err(Error::InvalidArgument("skip stride must be >= 1".into()));
        }
        let steps = schedule.steps();
        let (lower, upper) = match preset {
            TimetablePreset::Natural => (steps / 3, 2 * steps / 3),
            TimetablePreset::Medical => {
                // stage 3 is t <= 0.3 T, stage 2 is 0.3 T < t <= 0.75 T
                (steps * 3 / 10 + 1, steps * 3 / 4 + 1)
            }
        };
        let upper = upper.min(steps);
        let lower = lower.min(upper);
        let stages = [
            Stage {
                steps: upper..steps,
                mode: StageMode::None,
            },
            Stage {
                steps: lower..upper,
                mode: StageMode::Pixel,
            },
            Stage {
                steps: 0..lower,
                mode: StageMode::Latent,
            },
        ];
        // t = 0 is excluded: its resampling variance needs abar[-1].
        let resample_steps = (1..upper).filter(|t| t % skip == 0).collect();
        Ok(Self {
            stages,
            resample_steps,
            skip,
        })
    }

    /// A timetable that never enforces consistency.
    pub fn unconditional(schedule: &NoiseSchedule) -> Self {
        let steps = schedule.steps();
        Self {
            stages: [
                Stage {
                    steps: 0..steps,
                    mode: StageMode::None,
                },
                Stage {
                    steps: 0..0,
                    mode: StageMode::Pixel,
                },
                Stage {
                    steps: 0..0,
                    mode: StageMode::Latent,
                },
            ],
            resample_steps: BTreeSet::new(),
            skip: 1,
        }
    }

    pub fn stage_of(&self, t: usize) -> Option<usize> {
        self.stages.iter().position(|s| s.steps.contains(&t))
    }

    pub fn mode_at(&self, t: usize) -> StageMode {
        self.stage_of(t)
            .map(|i| self.stages[i].mode)
            .unwrap_or(StageMode::None)
    }

    pub fn is_resample_step(&self, t: usize) -> bool {
        self.resample_steps.contains(&t)
    }

    pub fn with_resample_steps(mut self, steps: BTreeSet<usize>) -> Self {
        self.resample_steps = steps;
        self
    }

    /// Overrides the solver of stage `index` (0 = earliest).
    pub fn with_stage_mode(mut self, index: usize, mode: StageMode) -> Self {
        self.stages[index].mode = mode;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_two_step_schedule() {
        let s = NoiseSchedule::linear(2, 0.1, 0.1, 0.0).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02, 0.0).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(499) < 0.01);
        assert!(s.alpha_bar(0) > 0.999);
        for t in 1..500 {
            let recomputed: f64 = s.beta()[..=t].iter().map(|b| 1.0 - b).product();
            assert!((recomputed - s.alpha_bar(t)).abs() / s.alpha_bar(t) < 1e-12);
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha()[t]);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::linear(1, 0.1, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0, 0.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 0.2, -1.0).is_err());
    }

    #[test]
    fn ddim_coefficient_stays_real_for_unit_eta() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02, 1.0).unwrap();
        for t in 1..500 {
            assert!(1.0 - s.alpha_bar(t - 1) - s.delta(t).powi(2) >= 0.0);
        }
    }

    #[test]
    fn sigma2_arithmetic() {
        // abar = [0.8, 0.64]
        let s = NoiseSchedule::from_betas(vec![0.2, 0.2], 0.0).unwrap();
        let v = s.resample_sigma2(1, 1.0).unwrap();
        assert!((v - 0.0625).abs() < 1e-15);
        assert_eq!(s.resample_sigma2(1, 0.0).unwrap(), 0.0);
        assert!(matches!(
            s.resample_sigma2(0, 1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn sigma2_linear_in_gamma() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02, 0.0).unwrap();
        let one = s.resample_sigma2(250, 1.0).unwrap();
        let forty = s.resample_sigma2(250, 40.0).unwrap();
        assert!(one > 0.0);
        assert!((forty - 40.0 * one).abs() <= 1e-15 * forty);
    }

    #[test]
    fn medical_boundaries() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02, 0.0).unwrap();
        let tt = ResampleTimetable::build(&s, 10, TimetablePreset::Medical).unwrap();
        assert_eq!(tt.stages[0].steps, 751..1000);
        assert_eq!(tt.stages[1].steps, 301..751);
        assert_eq!(tt.stages[2].steps, 0..301);
        assert_eq!(tt.mode_at(300), StageMode::Latent);
        assert_eq!(tt.mode_at(301), StageMode::Pixel);
        assert_eq!(tt.mode_at(751), StageMode::None);
    }

    #[test]
    fn natural_skip_ten_counts() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02, 0.0).unwrap();
        let tt = ResampleTimetable::build(&s, 10, TimetablePreset::Natural).unwrap();
        let nominal = 2 * ((500 / 3) / 10);
        assert!(tt.resample_steps.len().abs_diff(nominal) <= 1);
        let first = &tt.stages[0].steps;
        assert!(tt.resample_steps.iter().all(|t| !first.contains(t)));
        for stage in &tt.stages[1..] {
            let inside: Vec<_> = tt
                .resample_steps
                .iter()
                .filter(|t| stage.steps.contains(t))
                .collect();
            assert!(inside.windows(2).all(|w| w[1] - w[0] == 10));
        }
    }

    #[test]
    fn skip_one_covers_later_stages() {
        let s = NoiseSchedule::linear(90, 1e-4, 0.02, 0.0).unwrap();
        let tt = ResampleTimetable::build(&s, 1, TimetablePreset::Natural).unwrap();
        let expected: BTreeSet<usize> = (1..60).collect();
        assert_eq!(tt.resample_steps, expected);
    }

    #[test]
    fn partition_is_exact() {
        for preset in [TimetablePreset::Natural, TimetablePreset::Medical] {
            for steps in [2, 3, 10, 97, 500, 1000] {
                let s = NoiseSchedule::linear(steps, 1e-4, 0.02, 0.0).unwrap();
                let tt = ResampleTimetable::build(&s, 3, preset).unwrap();
                for t in 0..steps {
                    let hits = tt.stages.iter().filter(|st| st.steps.contains(&t)).count();
                    assert_eq!(hits, 1, "t={t} steps={steps}");
                }
                let total: usize = tt.stages.iter().map(|st| st.steps.len()).sum();
                assert_eq!(total, steps);
            }
        }
    }
}
