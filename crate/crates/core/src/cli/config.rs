//! Run configuration: parsing, validation and construction of the run
//! ingredients.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RngStream;
use crate::lora::LoraConfig;
use crate::models::{ModelKind, ModelSpec};
use crate::regularizers::{OrthPenalty, RegWeights};
use crate::tasks::{
    gen_quadratic_pair, gen_rotated_gaussians, load_csv, QuadraticPair, RotatedGaussians,
    SubsetPlan, SubsetSize, TaskSpec, TaskStream,
};
use crate::trainer::{BaseInit, OptimConfig, RunSetup, Stage2Init, Strategy, StrategyName};

/// Variable that supplies the output directory when a config names none.
pub const OUTPUT_DIR_ENV: &str = "ORTHOCL_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub stream: StreamConfig,
    pub model: ModelSpec,
    #[serde(default)]
    pub lora: LoraConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub reg: RegWeights,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub subset: SubsetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StreamConfig {
    RotatedGaussians(RotatedGaussians),
    QuadraticPair(QuadraticPair),
    /// A pair drawn by [`QuadraticPair::random`] from `pair_seed`.
    RandomQuadraticPair {
        dim: usize,
        samples: usize,
        #[serde(default)]
        noise_std: f64,
        pair_seed: u64,
    },
    /// Labelled CSV files, one train/eval pair per task. Relative paths are
    /// taken from the config file's directory.
    Csv {
        label_column: String,
        tasks: Vec<CsvTask>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub train: PathBuf,
    pub eval: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseConfig {
    pub init: BaseInit,
    pub gain: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            init: BaseInit::Gaussian,
            gain: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyName,
    pub two_stage: bool,
    pub stage2_init: Stage2Init,
    pub orth_penalty: OrthPenalty,
    pub normalize_gpwc: bool,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            name: StrategyName::HifgoProxy,
            two_stage: true,
            stage2_init: Stage2Init::Copy,
            orth_penalty: OrthPenalty::Abs,
            normalize_gpwc: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetConfig {
    pub d2: SubsetSize,
    /// Seed for drawing the stage-2 subsets; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        Self {
            d2: SubsetSize::Fraction(0.1),
            seed: None,
        }
    }
}

fn field(path: &str, e: Error) -> Error {
    let msg = match e {
        Error::Config(m) => m,
        other => other.to_string(),
    };
    Error::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| {
                Error::Config(format!("invalid config: {}", e.to_string().trim_end()))
            })?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let StreamConfig::Csv { tasks, .. } = &mut cfg.stream {
            let dir = path.parent().unwrap_or(Path::new(""));
            for t in tasks {
                for p in [&mut t.train, &mut t.eval] {
                    if p.is_relative() {
                        *p = dir.join(&*p);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| field("model", e))?;
        self.optim.validate().map_err(|e| field("optim", e))?;
        self.reg.validate().map_err(|e| field("reg", e))?;
        self.subset_plan()
            .validate()
            .map_err(|e| field("subset.d2", e))?;
        if self.lora.rank == 0 {
            return Err(field(
                "lora.rank",
                Error::Config("must be at least 1".into()),
            ));
        }
        if !(self.lora.scale > 0.0) {
            return Err(field("lora.scale", Error::Config("must be > 0".into())));
        }
        if !(self.base.gain >= 0.0) {
            return Err(field("base.gain", Error::Config("must be >= 0".into())));
        }
        let (inputs, outputs, regression) = match &self.stream {
            StreamConfig::RotatedGaussians(p) => (Some(p.dim), Some(p.classes), false),
            StreamConfig::QuadraticPair(p) => (Some(p.dim()), Some(1), true),
            StreamConfig::RandomQuadraticPair { dim, samples, .. } => {
                if *dim == 0 || *samples == 0 {
                    return Err(field(
                        "stream",
                        Error::Config("dim and samples must be positive".into()),
                    ));
                }
                (Some(*dim), Some(1), true)
            }
            StreamConfig::Csv { tasks, .. } => {
                if tasks.is_empty() {
                    return Err(field(
                        "stream.tasks",
                        Error::Config("needs at least one task".into()),
                    ));
                }
                (None, None, false)
            }
        };
        let model_regression = self.model.kind == ModelKind::LinearRegression;
        if regression != model_regression {
            return Err(field(
                "model.kind",
                Error::Config(format!(
                    "{:?} does not fit a {} stream",
                    self.model.kind,
                    if regression {
                        "regression"
                    } else {
                        "classification"
                    }
                )),
            ));
        }
        if let Some(d) = inputs {
            if d != self.model.input_dim {
                return Err(field(
                    "model.input_dim",
                    Error::Config(format!(
                        "stream has {d} features, model expects {}",
                        self.model.input_dim
                    )),
                ));
            }
        }
        if let Some(o) = outputs {
            if o != self.model.output_dim {
                return Err(field(
                    "model.output_dim",
                    Error::Config(format!(
                        "stream has {o} outputs, model has {}",
                        self.model.output_dim
                    )),
                ));
            }
        }
        Ok(())
    }

    pub fn strategy(&self) -> Strategy {
        Strategy {
            name: self.strategy.name,
            reg: self.reg,
            two_stage: self.strategy.two_stage,
            stage2_init: self.strategy.stage2_init,
            orth_penalty: self.strategy.orth_penalty,
            normalize_gpwc: self.strategy.normalize_gpwc,
        }
        .canonical()
    }

    pub fn setup(&self) -> RunSetup {
        RunSetup {
            model: self.model.clone(),
            base_init: self.base.init,
            base_gain: self.base.gain,
            lora: self.lora.clone(),
        }
    }

    pub fn subset_plan(&self) -> SubsetPlan {
        SubsetPlan {
            d2: self.subset.d2,
            seed: self.subset.seed.unwrap_or(self.seed),
        }
    }

    pub fn build_stream(&self) -> Result<TaskStream> {
        match &self.stream {
            StreamConfig::RotatedGaussians(p) => gen_rotated_gaussians(p, self.seed),
            StreamConfig::QuadraticPair(p) => gen_quadratic_pair(p, self.seed),
            StreamConfig::RandomQuadraticPair {
                dim,
                samples,
                noise_std,
                pair_seed,
            } => {
                let mut rng = RngStream::new(*pair_seed, 0x5041_4952);
                gen_quadratic_pair(
                    &QuadraticPair::random(*dim, *samples, *noise_std, &mut rng),
                    self.seed,
                )
            }
            StreamConfig::Csv {
                label_column,
                tasks,
            } => {
                let mut specs = Vec::with_capacity(tasks.len());
                for (k, t) in tasks.iter().enumerate() {
                    let train = load_csv(&t.train, label_column)?;
                    let eval = load_csv(&t.eval, label_column)?;
                    for (b, p) in [(&train, &t.train), (&eval, &t.eval)] {
                        if b.inputs.cols() != self.model.input_dim {
                            return Err(Error::Config(format!(
                                "model.input_dim: {} has {} features, model expects {}",
                                p.display(),
                                b.inputs.cols(),
                                self.model.input_dim
                            )));
                        }
                    }
                    specs.push(TaskSpec {
                        id: k + 1,
                        train,
                        eval,
                        optimum: None,
                        hessian: None,
                    });
                }
                TaskStream::new(specs, self.seed)
            }
        }
    }

    /// Output path: the configured one, else `report.json` under the
    /// directory named by [`OUTPUT_DIR_ENV`] or the working directory.
    pub fn output_path(&self) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        let dir = std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_default();
        dir.join("report.json")
    }
}
