//! Experiment configuration file. Every block except the training set is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use schemars::JsonSchema;
use serde::Deserialize;

use singlab_core::samplers::SamplerConfig as CoreSampler;
use singlab_core::verify::{BrightnessConfig, ConsistencySpec, QuadConfig, SweepGrid, SweepKind};
use singlab_core::{
    FinalMode, GuidanceConfig, InitMode, LrDecay, Method, MixtureModel, NegativeLabel, NoiseSchedule, Record,
    TrainConfig, TrainingSet,
};

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; overridden by `SINGLAB_SEED`, which `--seed` overrides.
    #[serde(default)]
    pub seed: u64,
    /// Report directory; relative paths resolve against the working directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleBlock,
    pub training_set: DataSource,
    #[serde(default)]
    pub sampler: SamplerBlock,
    #[serde(default)]
    pub guidance: Option<GuidanceBlock>,
    #[serde(default)]
    pub train: TrainBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("singlab-out")
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleBlock {
    /// `α = cos(π t'/2)` on the offset-normalised time.
    Cosine {
        #[serde(default)]
        offset: f64,
    },
    /// `α² = 1 - t`.
    LinearAlphaSquared,
    /// Piecewise-linear α through the given knots.
    Tabular { times: Vec<f64>, alphas: Vec<f64> },
}

impl Default for ScheduleBlock {
    fn default() -> Self {
        ScheduleBlock::Cosine { offset: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// `two-point`, `brightness-toy` or `grid-9`.
    Builtin(String),
    Inline {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        labels: Option<Vec<u32>>,
    },
    /// CSV file, one point per row; an optional trailing `label` column.
    /// Relative paths resolve against the config file's directory.
    Csv(PathBuf),
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Ddpm,
    DdpmEps,
    Ddim,
    SdeEm,
    OdeEuler,
    OdeRk4,
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    NaiveGaussian,
    SingStep,
    TrueForward,
    /// The configured method takes the `1 → 1-ε` step itself.
    Direct,
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FinalName {
    YbarCollapse,
    PlainLastStep,
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RecordName {
    Full,
    Endpoints,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerBlock {
    pub method: MethodName,
    pub steps: usize,
    /// Defaults to `1/steps`.
    pub epsilon: Option<f64>,
    pub init_mode: InitName,
    pub final_mode: FinalName,
    pub chains: usize,
    pub record: RecordName,
    /// Class to sample; `null` samples the whole set.
    pub label: Option<u32>,
    /// Fitted `t = 1` predictor written by `train-init`; without it the
    /// one-step start uses the exact class mean.
    pub init_model: Option<PathBuf>,
    /// Distance to the nearest training point counted as a hit.
    pub tolerance: f64,
}

impl Default for SamplerBlock {
    fn default() -> Self {
        Self {
            method: MethodName::Ddpm,
            steps: 1000,
            epsilon: None,
            init_mode: InitName::SingStep,
            final_mode: FinalName::YbarCollapse,
            chains: 100,
            record: RecordName::Endpoints,
            label: None,
            init_model: None,
            tolerance: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct GuidanceBlock {
    pub scale: f64,
    #[serde(default = "yes")]
    pub normalize_initial: bool,
    pub pos_label: u32,
    /// `null` = unconditional.
    #[serde(default)]
    pub neg_label: Option<u32>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DecayName {
    Constant,
    InverseTime,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainBlock {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub decay: DecayName,
    /// Pass threshold on `|fitted - class mean|` (max over coordinates).
    pub tolerance: f64,
}

impl Default for TrainBlock {
    fn default() -> Self {
        Self { learning_rate: 0.1, steps: 5000, batch_size: 32, decay: DecayName::InverseTime, tolerance: 1e-2 }
    }
}

#[derive(Debug, Clone, Default, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyBlock {
    pub bounds: BoundsBlock,
    pub quadrature: QuadBlock,
    pub prop3: Prop3Block,
    pub consistency: ConsistencyBlock,
    pub lipschitz: LipschitzBlock,
    pub brightness: BrightnessBlock,
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SweepName {
    Prop1,
    Prop2,
    TerminalMarginal,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsBlock {
    pub which: SweepName,
    /// Per-kind defaults apply when omitted.
    pub s: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    /// `x_t` probes; a scalar-per-probe list is broadcast to every coordinate.
    pub probes: Option<Vec<Vec<f64>>>,
    /// Pass threshold on max/min of the bound ratio per probe.
    pub max_ratio_band: f64,
    /// Pass threshold on the gap's decrease across the sweep.
    pub min_gap_fall: f64,
}

impl Default for BoundsBlock {
    fn default() -> Self {
        Self { which: SweepName::Prop1, s: None, t: None, probes: None, max_ratio_band: 3.0, min_gap_fall: 5.0 }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct QuadBlock {
    pub panels: usize,
    pub max_panels: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub mc_samples: usize,
}

impl Default for QuadBlock {
    fn default() -> Self {
        let q = QuadConfig::default();
        Self { panels: q.panels, max_panels: q.max_panels, rel_tol: q.rel_tol, abs_tol: q.abs_tol, mc_samples: q.mc_samples }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Prop3Block {
    pub epsilon: f64,
    pub samples: usize,
    pub label: Option<u32>,
}

impl Default for Prop3Block {
    fn default() -> Self {
        Self { epsilon: 0.05, samples: 100_000, label: None }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, JsonSchema, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyName {
    Bayes,
    Marginal,
    ReverseFromOne,
    TerminalGaussian,
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyBlock {
    pub checks: Vec<ConsistencyName>,
    pub samples: usize,
    /// KS times for `marginal`, `s` values for `reverse_from_one`.
    pub times: Vec<f64>,
    /// Increasing times toward 1 for `terminal_gaussian`.
    pub terminal_times: Vec<f64>,
    /// `x_1` probes for `reverse_from_one`.
    pub probes: Vec<f64>,
    /// Evaluation coordinates; `g` stands for the point `(g, …, g)`.
    pub grid: Vec<f64>,
}

impl Default for ConsistencyBlock {
    fn default() -> Self {
        let d = ConsistencySpec::default();
        Self {
            checks: vec![
                ConsistencyName::Bayes,
                ConsistencyName::Marginal,
                ConsistencyName::ReverseFromOne,
                ConsistencyName::TerminalGaussian,
            ],
            samples: d.samples,
            times: d.times,
            terminal_times: vec![0.9, 0.99, 0.999],
            probes: d.probes,
            grid: d.grid,
        }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LipschitzBlock {
    /// Decreasing toward 0.
    pub t_list: Vec<f64>,
    /// Probe points; default is a uniform line through the origin.
    pub grid: Option<Vec<Vec<f64>>>,
    /// Finite-difference step relative to `σ_t²`.
    pub h_rel: f64,
    /// Pass threshold on the growth from the first to the last time.
    pub min_growth: f64,
    /// Pass threshold on the finite-difference vs analytic relative error.
    pub fd_tolerance: f64,
}

impl Default for LipschitzBlock {
    fn default() -> Self {
        Self { t_list: vec![0.2, 0.02], grid: None, h_rel: 1e-4, min_growth: 50.0, fd_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BrightnessBlock {
    pub epsilon: f64,
    pub init_modes: Vec<InitName>,
    pub samples: usize,
    pub energy_samples: usize,
    pub chains: usize,
    pub steps: usize,
    /// Pass threshold on `|mean brightness|` of the naive start.
    pub naive_tolerance: f64,
    /// Relative pass threshold on the true and one-step brightness.
    pub relative_tolerance: f64,
    /// Required ratio of the naive to the one-step energy distance.
    pub min_energy_ratio: f64,
}

impl Default for BrightnessBlock {
    fn default() -> Self {
        let d = BrightnessConfig::default();
        Self {
            epsilon: d.epsilon,
            init_modes: vec![InitName::NaiveGaussian, InitName::SingStep, InitName::TrueForward],
            samples: d.n,
            energy_samples: d.n_energy,
            chains: d.n_chains,
            steps: d.steps,
            naive_tolerance: 0.01,
            relative_tolerance: 0.01,
            min_energy_ratio: 10.0,
        }
    }
}

/// Parses the config, naming the path of the first offending key.
pub fn parse(text: &str) -> anyhow::Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("config invalid at `{path}`: {}", e.into_inner())
    })
}

pub fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse(&text)?;
    if let DataSource::Csv(p) = &mut cfg.training_set {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    if let Some(p) = &mut cfg.sampler.init_model {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}

pub fn schema_json() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(ExperimentConfig)).expect("schema serialises")
}

impl ScheduleBlock {
    pub fn build(&self) -> anyhow::Result<NoiseSchedule> {
        Ok(match self {
            ScheduleBlock::Cosine { offset } => NoiseSchedule::cosine_with_offset(*offset)?,
            ScheduleBlock::LinearAlphaSquared => NoiseSchedule::linear_alpha_squared(),
            ScheduleBlock::Tabular { times, alphas } => NoiseSchedule::tabular(times.clone(), alphas.clone())?,
        })
    }
}

impl DataSource {
    pub fn build(&self) -> anyhow::Result<TrainingSet> {
        Ok(match self {
            DataSource::Builtin(name) => match name.as_str() {
                "two-point" => TrainingSet::two_point(),
                "brightness-toy" => TrainingSet::brightness_toy(),
                "grid-9" => TrainingSet::grid_9(),
                other => bail!("config invalid at `training_set.builtin`: unknown builtin `{other}` (expected two-point, brightness-toy or grid-9)"),
            },
            DataSource::Inline { points, labels } => TrainingSet::new(points.clone(), labels.clone())?,
            DataSource::Csv(path) => {
                let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
                TrainingSet::from_csv(f)?
            }
        })
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> anyhow::Result<MixtureModel> {
        Ok(MixtureModel::new(self.training_set.build()?, self.schedule.build()?))
    }

    pub fn sampler_config(&self, seed: u64) -> anyhow::Result<CoreSampler<f64>> {
        let s = &self.sampler;
        let mut c = CoreSampler::new(method(s.method), s.steps);
        c.epsilon = s.epsilon;
        c.init_mode = init_mode(s.init_mode);
        c.final_mode = match s.final_mode {
            FinalName::YbarCollapse => FinalMode::YbarCollapse,
            FinalName::PlainLastStep => FinalMode::PlainLastStep,
        };
        c.record = match s.record {
            RecordName::Full => Record::Full,
            RecordName::Endpoints => Record::Endpoints,
        };
        c.chains = s.chains;
        c.seed = seed;
        c.guidance = match &self.guidance {
            Some(g) => Some(GuidanceConfig::new(
                g.scale,
                g.normalize_initial,
                g.pos_label,
                g.neg_label.map_or(NegativeLabel::Unconditional, NegativeLabel::Class),
            )?),
            None => None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig<f64> {
        let t = &self.train;
        let mut c = TrainConfig::new(t.learning_rate, t.steps, t.batch_size, seed);
        c.decay = match t.decay {
            DecayName::Constant => LrDecay::Constant,
            DecayName::InverseTime => LrDecay::InverseTime,
        };
        c
    }

    pub fn quad_config(&self, seed: u64) -> QuadConfig {
        let q = &self.verify.quadrature;
        QuadConfig {
            panels: q.panels,
            max_panels: q.max_panels,
            rel_tol: q.rel_tol,
            abs_tol: q.abs_tol,
            mc_samples: q.mc_samples,
            seed,
        }
    }

    pub fn sweep(&self, dim: usize) -> (SweepKind, SweepGrid) {
        let b = &self.verify.bounds;
        let default_probes = vec![vec![-2.0], vec![0.0], vec![2.0]];
        let probes = b
            .probes
            .clone()
            .unwrap_or(default_probes)
            .into_iter()
            .map(|p| if p.len() == 1 && dim > 1 { vec![p[0]; dim] } else { p })
            .collect();
        let (kind, s, t) = match b.which {
            SweepName::Prop1 => (
                SweepKind::Prop1,
                b.s.clone().unwrap_or_else(|| vec![0.5]),
                b.t.clone().unwrap_or_else(|| (1..=20).map(|i| 0.5 + 0.01 * i as f64).collect()),
            ),
            SweepName::Prop2 => (
                SweepKind::Prop2,
                b.s.clone().unwrap_or_else(|| {
                    let mut v: Vec<f64> = (0..10).map(|i| 0.9 + 0.01 * i as f64).collect();
                    v.extend([0.995, 0.999]);
                    v
                }),
                b.t.clone().unwrap_or_else(|| vec![1.0]),
            ),
            SweepName::TerminalMarginal => (
                SweepKind::TerminalMarginal,
                Vec::new(),
                b.t.clone().unwrap_or_else(|| vec![0.9, 0.95, 0.99, 0.995, 0.999]),
            ),
        };
        (kind, SweepGrid { s, t, probes })
    }

    pub fn consistency_spec(&self, seed: u64, terminal: bool) -> ConsistencySpec {
        let c = &self.verify.consistency;
        ConsistencySpec {
            samples: c.samples,
            seed,
            times: if terminal { c.terminal_times.clone() } else { c.times.clone() },
            probes: c.probes.clone(),
            grid: c.grid.clone(),
        }
    }

    pub fn brightness_config(&self, seed: u64) -> BrightnessConfig {
        let b = &self.verify.brightness;
        BrightnessConfig {
            epsilon: b.epsilon,
            init_modes: b.init_modes.iter().map(|&m| init_mode(m)).collect(),
            n: b.samples,
            n_energy: b.energy_samples,
            n_chains: b.chains,
            steps: b.steps,
            seed,
        }
    }
}

pub fn method(m: MethodName) -> Method {
    match m {
        MethodName::Ddpm => Method::Ddpm,
        MethodName::DdpmEps => Method::DdpmEps,
        MethodName::Ddim => Method::Ddim,
        MethodName::SdeEm => Method::SdeEm,
        MethodName::OdeEuler => Method::OdeEuler,
        MethodName::OdeRk4 => Method::OdeRk4,
    }
}

pub fn init_mode(m: InitName) -> InitMode {
    match m {
        InitName::NaiveGaussian => InitMode::NaiveGaussian,
        InitName::SingStep => InitMode::SingStep,
        InitName::TrueForward => InitMode::TrueForward,
        InitName::Direct => InitMode::Direct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(r#"{"training_set": {"builtin": "two-point"}}"#).unwrap();
        assert_eq!(c.seed, 0);
        assert_eq!(c.sampler.steps, 1000);
        assert!(matches!(c.schedule, ScheduleBlock::Cosine { offset } if offset == 0.0));
        assert_eq!(c.model().unwrap().dim(), 1);
    }

    #[test]
    fn unknown_key_is_reported_with_path() {
        let err = parse(r#"{"training_set": {"builtin": "two-point"}, "sampler": {"stepz": 3}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sampler"), "{msg}");
        assert!(msg.contains("stepz"), "{msg}");
    }

    #[test]
    fn schedule_variants() {
        let c = parse(r#"{"training_set": {"inline": {"points": [[0.0, 1.0]]}}, "schedule": {"kind": "tabular", "times": [0, 1], "alphas": [1, 0]}}"#).unwrap();
        assert!((c.schedule.build().unwrap().alpha(0.25).unwrap() - 0.75).abs() < 1e-15);
        let c = parse(r#"{"training_set": {"builtin": "grid-9"}, "schedule": {"kind": "cosine", "offset": 0.008}}"#).unwrap();
        assert_eq!(c.model().unwrap().dim(), 2);
        assert!(parse(r#"{"training_set": {"builtin": "x"}, "schedule": {"kind": "quadratic"}}"#).is_err());
    }

    #[test]
    fn unknown_builtin() {
        let c = parse(r#"{"training_set": {"builtin": "three-point"}}"#).unwrap();
        assert!(c.model().is_err());
    }

    #[test]
    fn schema_lists_blocks() {
        let s = schema_json();
        for key in ["training_set", "sampler", "verify", "additionalProperties"] {
            assert!(s.contains(key), "{key}");
        }
    }
}
