//! Run configuration as flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys and bad values are
//! parse errors carrying the line number. [`RunConfig::to_text`] writes every
//! key with its current value, so a dumped default file documents itself.

use std::path::{Path, PathBuf};

use icd_core::boundaries::{make_plan, BoundaryPlan};
use icd_core::data::{Dataset, GaussianMixture};
use icd_core::denoiser::DenoiserConfig;
use icd_core::distill::{CfgDistillConfig, DistillConfig, Distance, GuidanceWeighting, TrainMode, DEFAULT_W_SET};
use icd_core::rng::{derive_seed, stream};
use icd_core::schedule::{NoiseSchedule, ScheduleParams};
use icd_core::solver::{GuidanceMode, GuidanceSchedule};
use icd_core::teacher::TeacherConfig;
use icd_core::{IcdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub modes: usize,
    pub radius: f64,
    pub sigma: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleParams,
    pub model: DenoiserConfig,
    pub teacher: TeacherConfig,
    pub cfg: CfgDistillConfig,
    pub icd: DistillConfig,
    pub plan_m: usize,
    pub plan_tau: Option<f64>,
    pub guidance: GuidanceSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig {
                modes: 8,
                radius: 4.0,
                sigma: 0.3,
                train_samples: 8192,
                test_samples: 1024,
            },
            schedule: ScheduleParams::default(),
            model: DenoiserConfig::default(),
            teacher: TeacherConfig::default(),
            cfg: CfgDistillConfig::default(),
            icd: DistillConfig::default(),
            plan_m: 4,
            plan_tau: Some(0.7),
            guidance: GuidanceSchedule::step(8.0, 0.7).expect("valid default"),
        }
    }
}

/// Every key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed; every stochastic choice derives from it"),
    ("out_dir", "directory for checkpoints, CSV and SVG output"),
    ("data.modes", "mixture modes on the circle (= classes)"),
    ("data.radius", "circle radius"),
    ("data.sigma", "per-mode standard deviation"),
    ("data.train_samples", "training set size"),
    ("data.test_samples", "held-out evaluation set size"),
    ("schedule.n_steps", "grid intervals N (grid has N+1 points)"),
    ("schedule.t_max", "number of diffusion timesteps T_max"),
    ("schedule.beta_start", "first beta of the linear schedule"),
    ("schedule.beta_end", "last beta of the linear schedule"),
    ("schedule.t_min", "first grid timestep"),
    ("model.time_dim", "sinusoidal time-embedding width"),
    ("model.class_dim", "class-embedding width"),
    ("model.guidance_dim", "guidance-embedding width"),
    ("model.hidden", "hidden-layer width"),
    ("model.depth", "number of hidden layers"),
    ("model.activation", "tanh or silu"),
    ("teacher.steps", "teacher training steps"),
    ("teacher.batch", "teacher minibatch size"),
    ("teacher.lr", "teacher Adam learning rate"),
    ("teacher.final_lr_fraction", "cosine decay floor as a fraction of lr"),
    ("teacher.cond_drop", "probability of training with the null class"),
    ("cfg.steps", "guidance-distillation steps"),
    ("cfg.batch", "guidance-distillation minibatch size"),
    ("cfg.lr", "guidance-distillation learning rate"),
    ("cfg.final_lr_fraction", "cosine decay floor as a fraction of lr"),
    ("cfg.null_fraction", "share of null-class rows in distillation batches"),
    ("cfg.grid_t", "draw distillation timesteps from the grid (true) or the continuum"),
    ("icd.steps", "consistency-distillation steps"),
    ("icd.batch", "consistency-distillation minibatch size"),
    ("icd.lr", "consistency-distillation learning rate"),
    ("icd.final_lr_fraction", "cosine decay floor as a fraction of lr"),
    ("icd.lambda_f", "forward preservation weight"),
    ("icd.lambda_r", "reverse preservation weight"),
    ("icd.w_set", "guidance scales, space separated; must contain 1"),
    ("icd.mode", "joint or sequential"),
    ("icd.distance", "l2 or huber:<c>"),
    ("icd.w_weighting", "reverse consistency row weight: uniform or inverse_square (1/w^2)"),
    ("icd.forward_cd", "train the forward student with its consistency loss"),
    ("plan.m", "number of boundary segments"),
    ("plan.tau", "normalized top interior edge, or none for even spacing"),
    ("guidance.mode", "constant, step or ramp"),
    ("guidance.w_max", "guidance scale where guidance is on"),
    ("guidance.tau1", "step threshold, or ramp end of full guidance"),
    ("guidance.tau2", "ramp start of no guidance (equals tau1 for step)"),
];

fn bad(line: usize, reason: impl Into<String>) -> IcdError {
    IcdError::Parse {
        line,
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(v: &str, key: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| bad(line, format!("{key}: cannot parse {v:?}")))
}

fn boolean(v: &str, key: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn fmt_distance(d: Distance) -> String {
    match d {
        Distance::SquaredL2 => "l2".into(),
        Distance::PseudoHuber(c) => format!("huber:{c}"),
    }
}

fn fmt_mode(m: GuidanceMode) -> &'static str {
    match m {
        GuidanceMode::Constant => "constant",
        GuidanceMode::Step => "step",
        GuidanceMode::Ramp => "ramp",
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment; `line` only labels errors.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = num(v, key, line)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.modes" => self.data.modes = num(v, key, line)?,
            "data.radius" => self.data.radius = num(v, key, line)?,
            "data.sigma" => self.data.sigma = num(v, key, line)?,
            "data.train_samples" => self.data.train_samples = num(v, key, line)?,
            "data.test_samples" => self.data.test_samples = num(v, key, line)?,
            "schedule.n_steps" => self.schedule.n_steps = num(v, key, line)?,
            "schedule.t_max" => self.schedule.t_max = num(v, key, line)?,
            "schedule.beta_start" => self.schedule.beta_start = num(v, key, line)?,
            "schedule.beta_end" => self.schedule.beta_end = num(v, key, line)?,
            "schedule.t_min" => self.schedule.t_min = num(v, key, line)?,
            "model.time_dim" => self.model.time_dim = num(v, key, line)?,
            "model.class_dim" => self.model.class_dim = num(v, key, line)?,
            "model.guidance_dim" => self.model.guidance_dim = num(v, key, line)?,
            "model.hidden" => self.model.hidden = num(v, key, line)?,
            "model.depth" => self.model.depth = num(v, key, line)?,
            "model.activation" => {
                self.model.activation = match v {
                    "tanh" => icd_core::autodiff::Activation::Tanh,
                    "silu" => icd_core::autodiff::Activation::Silu,
                    _ => return Err(bad(line, format!("{key}: unknown activation {v:?}"))),
                }
            }
            "teacher.steps" => self.teacher.steps = num(v, key, line)?,
            "teacher.batch" => self.teacher.batch = num(v, key, line)?,
            "teacher.lr" => self.teacher.optim.adam.lr = num(v, key, line)?,
            "teacher.final_lr_fraction" => self.teacher.optim.final_lr_fraction = num(v, key, line)?,
            "teacher.cond_drop" => self.teacher.cond_drop = num(v, key, line)?,
            "cfg.steps" => self.cfg.steps = num(v, key, line)?,
            "cfg.batch" => self.cfg.batch = num(v, key, line)?,
            "cfg.lr" => self.cfg.optim.adam.lr = num(v, key, line)?,
            "cfg.final_lr_fraction" => self.cfg.optim.final_lr_fraction = num(v, key, line)?,
            "cfg.null_fraction" => self.cfg.null_fraction = num(v, key, line)?,
            "cfg.grid_t" => self.cfg.grid_t = boolean(v, key, line)?,
            "icd.steps" => self.icd.steps = num(v, key, line)?,
            "icd.batch" => self.icd.batch = num(v, key, line)?,
            "icd.lr" => self.icd.optim.adam.lr = num(v, key, line)?,
            "icd.final_lr_fraction" => self.icd.optim.final_lr_fraction = num(v, key, line)?,
            "icd.lambda_f" => self.icd.lambda_f = num(v, key, line)?,
            "icd.lambda_r" => self.icd.lambda_r = num(v, key, line)?,
            "icd.w_set" => {
                self.icd.w_set = v
                    .split_whitespace()
                    .map(|w| num(w, key, line))
                    .collect::<Result<_>>()?
            }
            "icd.mode" => {
                self.icd.mode = match v {
                    "joint" => TrainMode::Joint,
                    "sequential" => TrainMode::Sequential,
                    _ => return Err(bad(line, format!("{key}: unknown mode {v:?}"))),
                }
            }
            "icd.distance" => {
                self.icd.distance = if v == "l2" {
                    Distance::SquaredL2
                } else if let Some(c) = v.strip_prefix("huber:") {
                    Distance::PseudoHuber(num(c, key, line)?)
                } else {
                    return Err(bad(line, format!("{key}: expected l2 or huber:<c>, got {v:?}")));
                }
            }
            "icd.w_weighting" => {
                self.icd.guidance_weighting = match v {
                    "uniform" => GuidanceWeighting::Uniform,
                    "inverse_square" => GuidanceWeighting::InverseSquare,
                    _ => return Err(bad(line, format!("{key}: expected uniform or inverse_square, got {v:?}"))),
                }
            }
            "icd.forward_cd" => self.icd.forward_cd = boolean(v, key, line)?,
            "plan.m" => self.plan_m = num(v, key, line)?,
            "plan.tau" => {
                self.plan_tau = if v == "none" {
                    None
                } else {
                    Some(num(v, key, line)?)
                }
            }
            "guidance.mode" => {
                self.guidance.mode = match v {
                    "constant" => GuidanceMode::Constant,
                    "step" => GuidanceMode::Step,
                    "ramp" => GuidanceMode::Ramp,
                    _ => return Err(bad(line, format!("{key}: unknown mode {v:?}"))),
                }
            }
            "guidance.w_max" => self.guidance.w_max = num(v, key, line)?,
            "guidance.tau1" => self.guidance.tau1 = num(v, key, line)?,
            "guidance.tau2" => self.guidance.tau2 = num(v, key, line)?,
            other => return Err(bad(line, format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` as it would be written to a file.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "data.modes" => self.data.modes.to_string(),
            "data.radius" => self.data.radius.to_string(),
            "data.sigma" => self.data.sigma.to_string(),
            "data.train_samples" => self.data.train_samples.to_string(),
            "data.test_samples" => self.data.test_samples.to_string(),
            "schedule.n_steps" => self.schedule.n_steps.to_string(),
            "schedule.t_max" => self.schedule.t_max.to_string(),
            "schedule.beta_start" => self.schedule.beta_start.to_string(),
            "schedule.beta_end" => self.schedule.beta_end.to_string(),
            "schedule.t_min" => self.schedule.t_min.to_string(),
            "model.time_dim" => self.model.time_dim.to_string(),
            "model.class_dim" => self.model.class_dim.to_string(),
            "model.guidance_dim" => self.model.guidance_dim.to_string(),
            "model.hidden" => self.model.hidden.to_string(),
            "model.depth" => self.model.depth.to_string(),
            "model.activation" => match self.model.activation {
                icd_core::autodiff::Activation::Tanh => "tanh".into(),
                icd_core::autodiff::Activation::Silu => "silu".into(),
            },
            "teacher.steps" => self.teacher.steps.to_string(),
            "teacher.batch" => self.teacher.batch.to_string(),
            "teacher.lr" => self.teacher.optim.adam.lr.to_string(),
            "teacher.final_lr_fraction" => self.teacher.optim.final_lr_fraction.to_string(),
            "teacher.cond_drop" => self.teacher.cond_drop.to_string(),
            "cfg.steps" => self.cfg.steps.to_string(),
            "cfg.batch" => self.cfg.batch.to_string(),
            "cfg.lr" => self.cfg.optim.adam.lr.to_string(),
            "cfg.final_lr_fraction" => self.cfg.optim.final_lr_fraction.to_string(),
            "cfg.null_fraction" => self.cfg.null_fraction.to_string(),
            "cfg.grid_t" => self.cfg.grid_t.to_string(),
            "icd.steps" => self.icd.steps.to_string(),
            "icd.batch" => self.icd.batch.to_string(),
            "icd.lr" => self.icd.optim.adam.lr.to_string(),
            "icd.final_lr_fraction" => self.icd.optim.final_lr_fraction.to_string(),
            "icd.lambda_f" => self.icd.lambda_f.to_string(),
            "icd.lambda_r" => self.icd.lambda_r.to_string(),
            "icd.w_set" => self
                .icd
                .w_set
                .iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(" "),
            "icd.mode" => match self.icd.mode {
                TrainMode::Joint => "joint".into(),
                TrainMode::Sequential => "sequential".into(),
            },
            "icd.distance" => fmt_distance(self.icd.distance),
            "icd.w_weighting" => match self.icd.guidance_weighting {
                GuidanceWeighting::Uniform => "uniform".into(),
                GuidanceWeighting::InverseSquare => "inverse_square".into(),
            },
            "icd.forward_cd" => self.icd.forward_cd.to_string(),
            "plan.m" => self.plan_m.to_string(),
            "plan.tau" => self.plan_tau.map_or("none".into(), |t| t.to_string()),
            "guidance.mode" => fmt_mode(self.guidance.mode).into(),
            "guidance.w_max" => self.guidance.w_max.to_string(),
            "guidance.tau1" => self.guidance.tau1.to_string(),
            "guidance.tau2" => self.guidance.tau2.to_string(),
            _ => return None,
        };
        Some(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("expected key = value, got {line:?}")))?;
            cfg.set(k, v, i + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides; errors name the override by position.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| bad(i + 1, format!("override {o:?} is not key=value")))?;
            self.set(k, v, i + 1)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        self.icd.validate()?;
        if self.data.modes == 0 || self.data.train_samples == 0 {
            return Err(IcdError::Contract("dataset needs modes and samples".into()));
        }
        if self.model.num_classes != self.data.modes {
            return Err(IcdError::Contract(format!(
                "model has {} classes but data has {} modes",
                self.model.num_classes, self.data.modes
            )));
        }
        Ok(())
    }

    /// Keeps `model.num_classes` in step with `data.modes`.
    pub fn sync(&mut self) {
        self.model.num_classes = self.data.modes;
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        GaussianMixture::circle(self.data.modes, self.data.radius, self.data.sigma)
    }

    pub fn train_set(&self) -> Result<Dataset> {
        Ok(self.mixture()?.sample(self.data.train_samples, &mut stream(self.seed, "train-set")))
    }

    pub fn test_set(&self) -> Result<Dataset> {
        Ok(self.mixture()?.sample(self.data.test_samples, &mut stream(self.seed, "test-set")))
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(self.schedule)
    }

    pub fn plan(&self) -> Result<BoundaryPlan> {
        let s = self.noise_schedule()?;
        make_plan(s.grid(), self.schedule.t_max, self.plan_m, self.plan_tau)
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            seed: derive_seed(self.seed, "teacher"),
            ..self.teacher
        }
    }

    pub fn cfg_config(&self) -> CfgDistillConfig {
        CfgDistillConfig {
            seed: derive_seed(self.seed, "cfg"),
            ..self.cfg
        }
    }

    pub fn icd_config(&self) -> DistillConfig {
        DistillConfig {
            seed: derive_seed(self.seed, "icd"),
            ..self.icd.clone()
        }
    }

    pub fn w_set(&self) -> &[f64] {
        if self.icd.w_set.is_empty() {
            &DEFAULT_W_SET
        } else {
            &self.icd.w_set
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_parses_back_to_the_same_config() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.plan_tau = None;
        c.icd.distance = Distance::PseudoHuber(0.03);
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_listed_key_round_trips() {
        let c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v, 1).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        match RunConfig::parse("seed = 1\n\n# c\nplan.m = x\n") {
            Err(IcdError::Parse { line: 4, .. }) => {}
            other => panic!("{other:?}"),
        }
        match RunConfig::parse("nonsense = 3") {
            Err(IcdError::Parse { line: 1, reason }) => assert!(reason.contains("unknown key")),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("seed 3").is_err());
    }

    #[test]
    fn defaults_match_reference_weights() {
        let c = RunConfig::default();
        assert_eq!((c.icd.lambda_f, c.icd.lambda_r), (1.5, 1.5));
        assert_eq!(c.w_set(), &[1.0, 8.0, 12.0, 16.0, 20.0]);
    }
}
