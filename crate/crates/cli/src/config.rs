//! Experiment configuration: a single TOML document with strict parsing
//! (unknown keys are errors) and full default materialization, so an
//! emitted resolved config re-parses to exactly the same experiment.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use widthlab_core::data::{AugConfig, SamplerMode, SyntheticSpec};
use widthlab_core::losses::{SimclrParams, VicregParams};
use widthlab_core::model::{NetworkConfig, ProjectorSpec};
use widthlab_core::training::{Method, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub n_classes: usize,
    pub per_class_base: usize,
    pub eval_per_class: usize,
    pub input_dim: usize,
    pub class_sep: f64,
    pub within_std: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_classes: 10,
            per_class_base: 200,
            eval_per_class: 50,
            input_dim: 64,
            class_sep: 3.0,
            within_std: 1.0,
            zipf_exponent: 0.0,
            seed: 7,
        }
    }
}

impl DatasetSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.n_classes,
            per_class_base: self.per_class_base,
            input_dim: self.input_dim,
            class_sep: self.class_sep,
            within_std: self.within_std,
            zipf_exponent: self.zipf_exponent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorSection {
    pub kind: String,
    pub out_dim: usize,
    pub widths: Vec<usize>,
    pub batchnorm: bool,
}

impl Default for ProjectorSection {
    fn default() -> Self {
        ProjectorSection {
            kind: "mlp".into(),
            out_dim: 64,
            widths: vec![64, 64, 64],
            batchnorm: true,
        }
    }
}

impl ProjectorSection {
    pub fn spec(&self) -> Result<ProjectorSpec> {
        match self.kind.as_str() {
            "none" => Ok(ProjectorSpec::None),
            "linear" => Ok(ProjectorSpec::Linear {
                out_dim: self.out_dim,
            }),
            "mlp" => Ok(ProjectorSpec::Mlp {
                widths: self.widths.clone(),
                batchnorm: self.batchnorm,
            }),
            other => bail!("unknown projector kind `{other}` (expected none|linear|mlp)"),
        }
    }

    /// Same spec with the first layer width replaced (the swept `K`).
    pub fn spec_with_first_width(&self, k: usize) -> Result<ProjectorSpec> {
        match self.spec()? {
            ProjectorSpec::None => bail!("cannot sweep projector width without a projector"),
            ProjectorSpec::Linear { .. } => Ok(ProjectorSpec::Linear { out_dim: k }),
            ProjectorSpec::Mlp { mut widths, batchnorm } => {
                widths[0] = k;
                Ok(ProjectorSpec::Mlp { widths, batchnorm })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub backbone_hidden: Vec<usize>,
    pub repr_dim: usize,
    pub projector: ProjectorSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone_hidden: vec![64],
            repr_dim: 64,
            projector: ProjectorSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub mode: String,
    pub classes_per_batch: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            mode: "class_restricted".into(),
            classes_per_batch: 2,
        }
    }
}

impl SamplerSection {
    pub fn mode(&self) -> Result<SamplerMode> {
        match self.mode.as_str() {
            "uniform" => Ok(SamplerMode::Uniform),
            "class_restricted" => Ok(SamplerMode::ClassRestricted {
                classes_per_batch: self.classes_per_batch,
            }),
            other => bail!("unknown sampler mode `{other}` (expected uniform|class_restricted)"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: String,
    pub epochs: usize,
    pub batch_size: usize,
    /// Omitted: 0.05 for simclr/supervised, 0.02 for vicreg.
    pub base_lr: Option<f64>,
    pub weight_decay: f64,
    pub momentum: f64,
    pub cosine_schedule: bool,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub sim_coeff: f64,
    pub std_coeff: f64,
    pub cov_coeff: f64,
    pub sampler: SamplerSection,
    pub aug: AugConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            method: "simclr".into(),
            epochs: 30,
            batch_size: 128,
            base_lr: None,
            weight_decay: 1e-6,
            momentum: 0.9,
            cosine_schedule: true,
            warmup_epochs: 2,
            temperature: SimclrParams::default().temperature,
            sim_coeff: 25.0,
            std_coeff: 25.0,
            cov_coeff: 1.0,
            sampler: SamplerSection::default(),
            aug: AugConfig::default(),
        }
    }
}

impl TrainSection {
    pub fn method_for(&self, name: &str, temperature: f64) -> Result<Method> {
        match name {
            "simclr" => Ok(Method::Simclr(SimclrParams { temperature })),
            "vicreg" => Ok(Method::Vicreg(VicregParams {
                sim_coeff: self.sim_coeff,
                std_coeff: self.std_coeff,
                cov_coeff: self.cov_coeff,
                ..VicregParams::default()
            })),
            "supervised" => Ok(Method::Supervised),
            other => bail!("unknown method `{other}` (expected simclr|vicreg|supervised)"),
        }
    }

    pub fn base_lr_for(&self, name: &str) -> f64 {
        self.base_lr.unwrap_or(match name {
            "vicreg" => 0.02,
            _ => 0.05,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mlp: bool,
    pub label_fraction: f64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: 50,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 0.04,
            mlp: true,
            label_fraction: 1.0,
        }
    }
}

impl ProbeSection {
    pub fn probe_config(&self, seed: u64) -> widthlab_core::evaluation::ProbeConfig {
        widthlab_core::evaluation::ProbeConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            label_fraction: self.label_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub sparsity: bool,
    pub binarized_probe: bool,
    pub jacobian: bool,
    pub jacobian_batch: usize,
    pub transfer_tasks: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            sparsity: true,
            binarized_probe: true,
            jacobian: true,
            jacobian_batch: 64,
            transfer_tasks: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Methods to sweep; empty means just `train.method`.
    pub methods: Vec<String>,
    pub repr_dims: Vec<usize>,
    /// Optional sweep over the projector's first-layer width.
    pub projector_first_widths: Vec<usize>,
    /// Optional sweep over the SimCLR temperature.
    pub temperatures: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: vec![],
            repr_dims: vec![16, 64, 256],
            projector_first_widths: vec![],
            temperatures: vec![],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub probe: ProbeSection,
    pub analysis: AnalysisSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweep.repr_dims.is_empty() {
            bail!("sweep.repr_dims must not be empty");
        }
        if self.sweep.seeds.is_empty() {
            bail!("sweep.seeds must not be empty");
        }
        for m in self.effective_methods() {
            self.train.method_for(&m, self.train.temperature)?;
        }
        self.train.sampler.mode()?;
        self.model.projector.spec()?;
        if self.train.warmup_epochs >= self.train.epochs {
            bail!("train.warmup_epochs must be < train.epochs");
        }
        Ok(())
    }

    pub fn effective_methods(&self) -> Vec<String> {
        if self.sweep.methods.is_empty() {
            vec![self.train.method.clone()]
        } else {
            self.sweep.methods.clone()
        }
    }

    /// Network config for one sweep point.
    pub fn network_config(
        &self,
        method: &str,
        repr_dim: usize,
        proj_first_width: Option<usize>,
        seed: u64,
    ) -> Result<NetworkConfig> {
        let projector = if method == "supervised" {
            ProjectorSpec::None
        } else {
            match proj_first_width {
                Some(k) => self.model.projector.spec_with_first_width(k)?,
                None => self.model.projector.spec()?,
            }
        };
        Ok(NetworkConfig {
            input_dim: self.dataset.input_dim,
            backbone_hidden: self.model.backbone_hidden.clone(),
            repr_dim,
            projector,
            head: (method == "supervised").then_some(self.dataset.n_classes),
            init_seed: seed,
        })
    }

    /// Training config for one sweep point.
    pub fn train_config(&self, method: &str, temperature: f64, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            method: self.train.method_for(method, temperature)?,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr_for(method),
            weight_decay: self.train.weight_decay,
            momentum: self.train.momentum,
            cosine_schedule: self.train.cosine_schedule,
            warmup_epochs: self.train.warmup_epochs,
            sampler_mode: self.train.sampler.mode()?,
            aug: self.train.aug,
            seed,
        })
    }

    /// Emit the fully resolved document (every default made explicit).
    pub fn resolved_toml(&self) -> Result<String> {
        let mut resolved = self.clone();
        resolved.train.base_lr = Some(self.train.base_lr_for(&self.train.method));
        if resolved.sweep.methods.is_empty() {
            resolved.sweep.methods = vec![self.train.method.clone()];
        }
        if resolved.sweep.projector_first_widths.is_empty() {
            if let Some(k) = self.model.projector.spec()?.first_width() {
                resolved.sweep.projector_first_widths = vec![k];
            }
        }
        if resolved.sweep.temperatures.is_empty() {
            resolved.sweep.temperatures = vec![self.train.temperature];
        }
        toml::to_string_pretty(&resolved).context("serializing resolved config")
    }
}

/// Strictly parse a config file: a missing file, an unknown key, or a type
/// mismatch is an error naming the problem.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
    cfg.validate()?;
    Ok(cfg)
}
