//! JSON experiment configuration and the problem it describes.
//!
//! Unknown keys are rejected, and every schema error names the offending
//! field as a JSON pointer (`/timetable/skip`). Overrides `key=value` use
//! either dotted paths or pointers; the value is parsed as JSON and falls
//! back to a plain string.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latentmap::{LatentMap, LatentMapSpec};
use crate::metrics::{psnr, ssim, MetricReport, SsimParams};
use crate::operators::{ForwardOperator, Measurement, OperatorSpec};
use crate::optim::ConsistencyConfig;
use crate::prior::{GaussianMixturePrior, PriorSpec};
use crate::rng::stream;
use crate::sampler::{
    latent_dps_solve, resample_solve, LatentDpsConfig, ReconstructionReport, RemapMode,
    SamplerConfig,
};
use crate::schedule::{NoiseSchedule, ResampleTimetable, TimetablePreset};

/// Stream index of the ground truth and measurement noise.
pub const TRUTH_STREAM: u64 = 0;
/// Stream index of the sampler.
pub const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimetableParams {
    pub preset: TimetablePreset,
    pub skip: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Resample,
    LatentDps,
    Fbp,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Resample => "resample",
            Solver::LatentDps => "latent_dps",
            Solver::Fbp => "fbp",
        }
    }
}

/// Where the signal behind the measurement comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthSpec {
    /// Draw `z*` from the prior, then `y = A(D(z*)) + noise`.
    #[default]
    PriorSample,
    /// Fixed `z*`, then `y = A(D(z*)) + noise`.
    Latent { z: Vec<f64> },
    /// A given measurement with no known ground truth.
    Measurement { y: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub prior: PriorSpec,
    pub latent_map: LatentMapSpec,
    pub operator: OperatorSpec,
    pub sigma_y: f64,
    pub schedule: ScheduleParams,
    pub timetable: TimetableParams,
    pub gamma: f64,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub solver: Solver,
    #[serde(default)]
    pub remap_mode: RemapMode,
    /// Step size of the Latent-DPS solver.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dps: Option<LatentDpsConfig>,
    /// Also apply the `latent_dps` gradient step inside ReSample.
    #[serde(default)]
    pub resample_dps_addon: bool,
    #[serde(default)]
    pub truth: TruthSpec,
    /// `[height, width]` of the pixel signal, for SSIM and PGM renders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub check_tweedie: bool,
}

/// Turns `a.b` or `/a/b` into a JSON pointer.
fn to_pointer(key: &str) -> String {
    if key.starts_with('/') {
        key.to_string()
    } else {
        format!("/{}", key.replace('.', "/"))
    }
}

/// Splits `key=value`; the value is JSON if it parses, a string otherwise.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) = raw.split_once('=').ok_or_else(|| Error::Config {
        pointer: String::new(),
        message: format!("override `{raw}` is not of the form key=value"),
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config {
            pointer: String::new(),
            message: format!("override `{raw}` has an empty key"),
        });
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((to_pointer(key), value))
}

/// Sets `pointer` inside `doc`, creating intermediate objects.
pub fn apply_override(doc: &mut Value, pointer: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<String> = pointer
        .split('/')
        .skip(1)
        .map(|p| p.replace("~1", "/").replace("~0", "~"))
        .collect();
    let Some((last, parents)) = parts.split_last() else {
        *node = value;
        return Ok(());
    };
    for part in parents {
        node = match node {
            Value::Object(map) => map
                .entry(part.clone())
                .or_insert_with(|| Value::Object(Default::default())),
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::Config {
                    pointer: pointer.to_string(),
                    message: format!("`{part}` is not an array index"),
                })?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| Error::Config {
                    pointer: pointer.to_string(),
                    message: format!("index {idx} out of bounds (length {len})"),
                })?
            }
            _ => {
                return Err(Error::Config {
                    pointer: pointer.to_string(),
                    message: format!("cannot descend into a scalar at `{part}`"),
                })
            }
        };
    }
    match node {
        Value::Object(map) => {
            map.insert(last.clone(), value);
        }
        Value::Array(items) => {
            let idx: usize = last.parse().map_err(|_| Error::Config {
                pointer: pointer.to_string(),
                message: format!("`{last}` is not an array index"),
            })?;
            let len = items.len();
            *items.get_mut(idx).ok_or_else(|| Error::Config {
                pointer: pointer.to_string(),
                message: format!("index {idx} out of bounds (length {len})"),
            })? = value;
        }
        _ => {
            return Err(Error::Config {
                pointer: pointer.to_string(),
                message: "cannot set a field on a scalar".into(),
            })
        }
    }
    Ok(())
}

fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{key}")),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn backticked(message: &str, prefix: &str) -> Option<String> {
    let rest = message.strip_prefix(prefix)?;
    let rest = rest.strip_prefix('`')?;
    rest.split('`').next().map(str::to_string)
}

impl ExperimentConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let result: std::result::Result<Self, _> = serde_path_to_error::deserialize(doc);
        result.map_err(|err| {
            let mut pointer = path_to_pointer(err.path());
            let message = err.inner().to_string();
            // a missing key is reported at its parent; point at the key itself
            if let Some(field) = backticked(&message, "missing field ") {
                pointer = format!("{pointer}/{field}");
            } else if let Some(field) = backticked(&message, "unknown field ") {
                if !pointer.ends_with(&format!("/{field}")) {
                    pointer = format!("{pointer}/{field}");
                }
            }
            if pointer.is_empty() {
                pointer = "/".into();
            }
            Error::Config { pointer, message }
        })
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).map_err(|e| Error::Config {
            pointer: "/".into(),
            message: format!("invalid JSON: {e}"),
        })?;
        for raw in overrides {
            let (pointer, value) = parse_override(raw)?;
            apply_override(&mut doc, &pointer, value)?;
        }
        Self::from_value(doc)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        let p = &self.schedule;
        let schedule = NoiseSchedule::linear(p.steps, p.beta_min, p.beta_max, p.eta)?;
        let timetable =
            ResampleTimetable::build(&schedule, self.timetable.skip, self.timetable.preset)?;
        let cfg = SamplerConfig {
            schedule,
            timetable,
            gamma: self.gamma,
            consistency: self.consistency.clone(),
            latent_dps: if self.resample_dps_addon {
                self.latent_dps
            } else {
                None
            },
            remap_mode: self.remap_mode,
            check_tweedie: self.check_tweedie,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Problem> {
        if !(self.sigma_y >= 0.0) {
            return Err(Error::Config {
                pointer: "/sigma_y".into(),
                message: format!("must be >= 0, got {}", self.sigma_y),
            });
        }
        let prior =
            GaussianMixturePrior::try_from(self.prior.clone()).map_err(|e| Error::Config {
                pointer: "/prior".into(),
                message: e.to_string(),
            })?;
        let map = LatentMap::from_spec(&self.latent_map).map_err(|e| Error::Config {
            pointer: "/latent_map".into(),
            message: e.to_string(),
        })?;
        let op = ForwardOperator::from_spec(&self.operator).map_err(|e| Error::Config {
            pointer: "/operator".into(),
            message: e.to_string(),
        })?;
        let sampler = self.sampler_config().map_err(|e| match e {
            e @ Error::Config { .. } => e,
            e => Error::Config {
                pointer: "/schedule".into(),
                message: e.to_string(),
            },
        })?;
        if let Some([h, w]) = self.image_shape {
            if h * w != map.d_pixel() {
                return Err(Error::Config {
                    pointer: "/image_shape".into(),
                    message: format!("{h}x{w} does not match {} pixels", map.d_pixel()),
                });
            }
        }
        let mut rng = stream(self.seed, TRUTH_STREAM);
        let (truth_latent, measurement) = match &self.truth {
            TruthSpec::Measurement { y } => {
                let m = Measurement {
                    y: y.clone(),
                    sigma_y: self.sigma_y,
                    operator_id: op.kind_name().into(),
                };
                (None, m)
            }
            spec => {
                let z = match spec {
                    TruthSpec::Latent { z } => DVector::from_column_slice(z),
                    _ => prior.sample(&mut rng),
                };
                let x = map.decode(&z).map_err(|e| Error::Config {
                    pointer: "/truth".into(),
                    message: e.to_string(),
                })?;
                let m = op.measure(&x, self.sigma_y, &mut rng)?;
                (Some(z), m)
            }
        };
        let truth_pixel = truth_latent.as_ref().map(|z| map.decode(z)).transpose()?;
        let problem = Problem {
            prior,
            map,
            op,
            measurement,
            truth_latent,
            truth_pixel,
            sampler,
            dps: self.latent_dps.unwrap_or_default(),
            image_shape: self.image_shape,
        };
        problem.check_dims()?;
        Ok(problem)
    }
}

pub fn hash_json(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("value serializes");
    Sha256::digest(&bytes)
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything needed to run a solver, assembled from a config.
#[derive(Clone, Debug)]
pub struct Problem {
    pub prior: GaussianMixturePrior,
    pub map: LatentMap,
    pub op: ForwardOperator,
    pub measurement: Measurement,
    pub truth_latent: Option<DVector<f64>>,
    pub truth_pixel: Option<DVector<f64>>,
    pub sampler: SamplerConfig,
    /// Step size used by the Latent-DPS solver.
    pub dps: LatentDpsConfig,
    pub image_shape: Option<[usize; 2]>,
}

impl Problem {
    fn check_dims(&self) -> Result<()> {
        if self.map.d_latent() != self.prior.dim() {
            return Err(Error::Config {
                pointer: "/latent_map".into(),
                message: format!(
                    "latent dimension {} differs from the prior's {}",
                    self.map.d_latent(),
                    self.prior.dim()
                ),
            });
        }
        if self.op.n() != self.map.d_pixel() {
            return Err(Error::Config {
                pointer: "/operator".into(),
                message: format!(
                    "operator input {} differs from the decoder output {}",
                    self.op.n(),
                    self.map.d_pixel()
                ),
            });
        }
        if self.measurement.y.len() != self.op.m() {
            return Err(Error::Config {
                pointer: "/truth/y".into(),
                message: format!(
                    "measurement has {} entries, operator produces {}",
                    self.measurement.y.len(),
                    self.op.m()
                ),
            });
        }
        Ok(())
    }

    pub fn solve<R: Rng + ?Sized>(
        &self,
        solver: Solver,
        rng: &mut R,
    ) -> Result<ReconstructionReport> {
        match solver {
            Solver::Resample => resample_solve(
                &self.prior,
                &self.map,
                &self.op,
                &self.measurement,
                &self.sampler,
                rng,
            ),
            Solver::LatentDps => {
                let sampler = SamplerConfig {
                    latent_dps: Some(self.dps),
                    ..self.sampler.clone()
                };
                latent_dps_solve(
                    &self.prior,
                    &self.map,
                    &self.op,
                    &self.measurement,
                    &sampler,
                    rng,
                )
            }
            Solver::Fbp => {
                let y = DVector::from_column_slice(&self.measurement.y);
                let x = self.op.fbp_reconstruct(&y)?;
                let residual = 0.5 * (&y - self.op.apply(&x)?).norm_squared();
                Ok(ReconstructionReport {
                    solver: "fbp".into(),
                    z0: Vec::new(),
                    x0: x.iter().copied().collect(),
                    residual,
                    consistency_iterations: 0,
                    steps: Vec::new(),
                })
            }
        }
    }

    pub fn metrics(&self, x0: &[f64]) -> Result<MetricReport> {
        let x = DVector::from_column_slice(x0);
        let y = DVector::from_column_slice(&self.measurement.y);
        let residual = 0.5 * (&y - self.op.apply(&x)?).norm_squared();
        let psnr = match &self.truth_pixel {
            Some(t) => Some(psnr(x0, t.as_slice(), 1.0)?),
            None => None,
        };
        let ssim = match (&self.truth_pixel, self.image_shape) {
            (Some(t), Some([h, w])) if h >= 11 && w >= 11 => {
                Some(ssim(x0, t.as_slice(), h, w, SsimParams::default())?)
            }
            _ => None,
        };
        Ok(MetricReport {
            psnr,
            ssim,
            residual,
        })
    }
}

/// Ready-made configurations used by the experiment suites.
pub mod presets {
    use super::*;

    fn schedule(steps: usize) -> ScheduleParams {
        ScheduleParams {
            steps,
            beta_min: 1e-4,
            beta_max: 0.02,
            eta: 0.0,
        }
    }

    /// Two unit-variance modes at `(+-3, 0)`, identity decoder, and a
    /// measurement of coordinate 0 only.
    pub fn two_mode(seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            prior: PriorSpec {
                weights: vec![0.5, 0.5],
                means: vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
                covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2],
            },
            latent_map: LatentMapSpec::Identity { dim: 2 },
            operator: OperatorSpec::Mask {
                n: 2,
                keep: Some(vec![0]),
                keep_fraction: None,
                seed: 0,
            },
            sigma_y: 0.01,
            schedule: schedule(500),
            timetable: TimetableParams {
                preset: TimetablePreset::Natural,
                skip: 10,
            },
            gamma: 40.0,
            consistency: ConsistencyConfig::default(),
            solver: Solver::Resample,
            remap_mode: RemapMode::Resample,
            latent_dps: None,
            resample_dps_addon: false,
            truth: TruthSpec::Measurement { y: vec![3.02] },
            image_shape: None,
            output_dir: None,
            check_tweedie: false,
        }
    }

    /// Random-pixel inpainting of a 4x4 image generated from a 4-dimensional
    /// three-component latent mixture through a fixed affine decoder.
    pub fn inpainting(seed: u64, sigma_y: f64) -> ExperimentConfig {
        ExperimentConfig {
            seed,
            prior: PriorSpec {
                weights: vec![0.3, 0.3, 0.4],
                means: vec![
                    vec![1.0, 0.5, -0.5, 0.0],
                    vec![-1.0, 0.0, 0.5, 0.5],
                    vec![0.0, -0.8, 0.0, -0.6],
                ],
                covariances: (0..3)
                    .map(|_| {
                        (0..4)
                            .map(|i| (0..4).map(|j| if i == j { 0.25 } else { 0.0 }).collect())
                            .collect()
                    })
                    .collect(),
            },
            latent_map: LatentMapSpec::RandomLinear {
                d_latent: 4,
                d_pixel: 16,
                seed: 17,
                scale: 0.5,
            },
            operator: OperatorSpec::Mask {
                n: 16,
                keep: None,
                keep_fraction: Some(0.5),
                seed: 23,
            },
            sigma_y,
            schedule: schedule(500),
            timetable: TimetableParams {
                preset: TimetablePreset::Natural,
                skip: 10,
            },
            gamma: 40.0,
            consistency: ConsistencyConfig::default(),
            solver: Solver::Resample,
            remap_mode: RemapMode::Resample,
            latent_dps: None,
            resample_dps_addon: false,
            truth: TruthSpec::PriorSample,
            image_shape: Some([4, 4]),
            output_dir: None,
            check_tweedie: false,
        }
    }

    /// 33x33 disk-ellipse phantoms, 25 parallel-beam angles over 180 degrees.
    pub fn ct(seed: u64) -> ExperimentConfig {
        let d = crate::phantom::BASIS_SIZE;
        let diag = |v: f64| -> Vec<Vec<f64>> {
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { v } else { 0.0 }).collect())
                .collect()
        };
        ExperimentConfig {
            seed,
            prior: PriorSpec {
                weights: vec![0.5, 0.5],
                means: vec![
                    vec![0.45, 0.3, 0.15, 0.2, 0.1, 0.0, 0.15, 0.0],
                    vec![0.5, 0.1, 0.3, 0.0, 0.0, 0.15, 0.0, 0.1],
                ],
                covariances: vec![diag(0.0025), diag(0.0025)],
            },
            latent_map: LatentMapSpec::PhantomBasis { grid: 33 },
            operator: OperatorSpec::Radon {
                grid: 33,
                n_angles: 25,
                n_detectors: None,
            },
            sigma_y: 0.01,
            schedule: schedule(1000),
            timetable: TimetableParams {
                preset: TimetablePreset::Medical,
                skip: 10,
            },
            gamma: 40.0,
            consistency: ConsistencyConfig::default(),
            solver: Solver::Resample,
            remap_mode: RemapMode::Resample,
            latent_dps: Some(LatentDpsConfig { zeta_scale: 2.5 }),
            resample_dps_addon: false,
            truth: TruthSpec::PriorSample,
            image_shape: Some([33, 33]),
            output_dir: None,
            check_tweedie: false,
        }
    }

    pub fn by_name(name: &str, seed: u64) -> Option<ExperimentConfig> {
        match name {
            "two-mode" => Some(two_mode(seed)),
            "inpainting" => Some(inpainting(seed, 0.05)),
            "ct" => Some(ct(seed)),
            _ => None,
        }
    }

    pub const NAMES: [&str; 3] = ["two-mode", "inpainting", "ct"];
}
