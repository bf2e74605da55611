use std::path::{Path, PathBuf};

use clap::Args;
use manipdiff::diffusion::{Horizons, LrDecay, SampleOptions, SamplerKind, TrainConfig};
use manipdiff::Metric;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Every knob of a run. Values come from built-in defaults, then the JSON
/// config file, then command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenario: Option<PathBuf>,
    pub demos: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub num_demos: usize,
    /// Overrides the scenario's probability of posture-aware demonstrations.
    pub posture_attention: Option<f64>,
    pub components: usize,
    pub metric: Metric,
    /// Also fit the Euclidean mixture and report it alongside.
    pub baseline: bool,
    pub em_max_iter: usize,
    pub em_tol: f64,
    pub horizons: Horizons,
    pub train: TrainConfig,
    /// Reverse steps at sampling time; fewer than the schedule length selects
    /// the accelerated sampler.
    pub denoise_steps: usize,
    /// Overrides the scenario's guidance scale.
    pub lambda: Option<f64>,
    pub guidance: bool,
    pub trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            scenario: None,
            demos: None,
            model: None,
            checkpoint: None,
            out: PathBuf::from("out"),
            num_demos: 5,
            posture_attention: None,
            components: 5,
            metric: Metric::AffineInvariant,
            baseline: false,
            em_max_iter: 200,
            em_tol: 1e-6,
            horizons: Horizons { m: 2, n: 8 },
            train: TrainConfig::default(),
            denoise_steps: 100,
            lambda: None,
            guidance: true,
            trials: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MetricArg {
    AffineInvariant,
    Euclidean,
}

/// Command-line overrides; unset flags leave the file or default value.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Directory of demonstration files.
    #[arg(long, global = true)]
    pub demos: Option<PathBuf>,
    /// Fitted ellipsoid model.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Trained policy checkpoint.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub num_demos: Option<usize>,
    #[arg(long, global = true)]
    pub posture_attention: Option<f64>,
    /// Mixture components.
    #[arg(long, global = true)]
    pub components: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long, global = true)]
    pub baseline: bool,
    #[arg(long, global = true)]
    pub train_steps: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    /// Length of the noise schedule.
    #[arg(long, global = true)]
    pub diffusion_steps: Option<usize>,
    #[arg(long, global = true)]
    pub denoise_steps: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub no_guidance: bool,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))
    }

    /// Defaults, then the config file named by the flags, then the flags.
    pub fn resolve(flags: &Overrides) -> Result<Self, CliError> {
        let mut c = match &flags.config {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        c.apply(flags);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, f: &Overrides) {
        fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
            if let Some(v) = src {
                *dst = v.clone();
            }
        }
        fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        set_opt(&mut self.seed, &f.seed);
        set(&mut self.out, &f.out);
        set_opt(&mut self.scenario, &f.scenario);
        set_opt(&mut self.demos, &f.demos);
        set_opt(&mut self.model, &f.model);
        set_opt(&mut self.checkpoint, &f.checkpoint);
        set(&mut self.num_demos, &f.num_demos);
        set_opt(&mut self.posture_attention, &f.posture_attention);
        set(&mut self.components, &f.components);
        if let Some(m) = f.metric {
            self.metric = match m {
                MetricArg::AffineInvariant => Metric::AffineInvariant,
                MetricArg::Euclidean => Metric::Euclidean,
            };
        }
        self.baseline |= f.baseline;
        set(&mut self.train.steps, &f.train_steps);
        set(&mut self.train.learning_rate, &f.learning_rate);
        set(&mut self.train.diffusion_steps, &f.diffusion_steps);
        set(&mut self.denoise_steps, &f.denoise_steps);
        set_opt(&mut self.lambda, &f.lambda);
        if f.no_guidance {
            self.guidance = false;
        }
        set(&mut self.trials, &f.trials);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: &str| Err(CliError::Validation(m.into()));
        if self.seed.is_none() {
            return bad("a seed is required (--seed or \"seed\" in the config file)");
        }
        if self.components == 0 {
            return bad("components must be positive");
        }
        if self.trials == 0 {
            return bad("trials must be positive");
        }
        if self.denoise_steps == 0 || self.denoise_steps > self.train.diffusion_steps {
            return bad("denoise_steps must lie in 1..=diffusion_steps");
        }
        if let Some(a) = self.posture_attention {
            if !(0.0..=1.0).contains(&a) {
                return bad("posture_attention must lie in [0, 1]");
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad("lambda must be a non-negative number");
            }
        }
        if self.train.lr_decay == LrDecay::Cosine && self.train.steps == 0 {
            return bad("train.steps must be positive");
        }
        self.train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("validated")
    }

    pub fn sample_options(&self, schedule_steps: usize) -> SampleOptions {
        let sampler = if self.denoise_steps >= schedule_steps {
            SamplerKind::Ancestral
        } else {
            SamplerKind::Accelerated {
                steps: self.denoise_steps,
            }
        };
        SampleOptions {
            sampler,
            ..SampleOptions::default()
        }
    }

    /// Resolves a path option, failing when it is missing or does not exist.
    pub fn input(&self, which: &str, value: &Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = value
            .clone()
            .ok_or_else(|| CliError::Validation(format!("--{which} is required")))?;
        if !p.exists() {
            return Err(CliError::Validation(format!(
                "{which} path {} does not exist",
                p.display()
            )));
        }
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = std::env::temp_dir().join(format!("manipdiff-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"seed": 4, "components": 3, "trials": 7}"#).unwrap();
        let flags = Overrides {
            config: Some(path),
            trials: Some(9),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(&flags).unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.components, 3);
        assert_eq!(c.trials, 9);
        assert_eq!(c.num_demos, RunConfig::default().num_demos);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn seed_is_required() {
        let err = RunConfig::resolve(&Overrides::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).unwrap_err();
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig {
            seed: Some(1),
            lambda: Some(2.5),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
