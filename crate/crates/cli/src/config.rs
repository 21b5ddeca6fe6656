//! Experiment configuration: JSON schema, validation, and assembly of
//! the sampling-ready target bundle.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use mcmc_swindles::data_io::{self, TabularDataset};
use mcmc_swindles::experiment::{fit_bundle, TargetBundle};
use mcmc_swindles::integrator::LeapfrogConfig;
use mcmc_swindles::preconditioner::{TransportMap, VIConfig, VIFit};
use mcmc_swindles::samplers::{KernelConfig, KernelKind};
use mcmc_swindles::swindles::EstimatorKind;
use mcmc_swindles::targets::{
    Gaussian, ItemResponse, LogisticRegression, SparseLogisticRegression, TargetDensity,
};
use ndarray::{Array1, Array2};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    #[serde(default)]
    pub preconditioner: PreconditionerSpec,
    pub kernel: KernelSpec,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorName>,
    #[serde(default = "default_functionals")]
    pub functionals: Vec<FunctionalName>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_chains")]
    pub chains: usize,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_surrogate_cost_weight")]
    pub surrogate_cost_weight: f64,
    #[serde(default = "default_eq_budget")]
    pub eq_budget: usize,
    #[serde(default)]
    pub diagonal_beta: bool,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub predict: Option<PredictSpec>,
}

fn default_estimators() -> Vec<EstimatorName> {
    vec![
        EstimatorName::Plain,
        EstimatorName::Antithetic,
        EstimatorName::Control,
        EstimatorName::Cva,
    ]
}

fn default_functionals() -> Vec<FunctionalName> {
    vec![FunctionalName::Mean]
}

fn default_steps() -> usize {
    1000
}

fn default_burn_in() -> usize {
    500
}

fn default_chains() -> usize {
    64
}

fn default_replications() -> usize {
    10
}

fn default_surrogate_cost_weight() -> f64 {
    0.2
}

fn default_eq_budget() -> usize {
    100_000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Standard-normal benchmark target with a deliberately perturbed
    /// Gaussian surrogate for coupling studies.
    Gaussian {
        dim: usize,
        #[serde(default)]
        surrogate_mean_shift: f64,
        #[serde(default = "one")]
        surrogate_cov_scale: f64,
    },
    Logistic {
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synth: Option<SynthTabular>,
    },
    SparseLogistic {
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synth: Option<SynthTabular>,
    },
    Irt {
        #[serde(default)]
        data: Option<PathBuf>,
        #[serde(default)]
        synth: Option<SynthIrt>,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTabular {
    pub rows: usize,
    pub covariates: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthIrt {
    pub students: usize,
    pub questions: usize,
    #[serde(default = "one")]
    pub keep_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreconditionerSpec {
    #[serde(default)]
    pub kind: PreconditionerKind,
    #[serde(default = "default_vi_steps")]
    pub steps: usize,
    #[serde(default = "default_vi_batch")]
    pub batch: usize,
    #[serde(default = "default_vi_lr")]
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PreconditionerKind {
    #[default]
    Full,
    Diagonal,
    None,
}

impl Default for PreconditionerSpec {
    fn default() -> Self {
        PreconditionerSpec {
            kind: PreconditionerKind::Full,
            steps: default_vi_steps(),
            batch: default_vi_batch(),
            learning_rate: default_vi_lr(),
        }
    }
}

fn default_vi_steps() -> usize {
    3000
}

fn default_vi_batch() -> usize {
    8
}

fn default_vi_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelSpec {
    Hmc {
        step_size: f64,
        leapfrog_steps: usize,
    },
    Mala {
        step_size: f64,
    },
    Rwm {
        step_size: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorName {
    Plain,
    Antithetic,
    Control,
    Cva,
}

impl EstimatorName {
    pub fn to_kind(self) -> EstimatorKind {
        match self {
            EstimatorName::Plain => EstimatorKind::Plain,
            EstimatorName::Antithetic => EstimatorKind::Antithetic,
            EstimatorName::Control => EstimatorKind::Control,
            EstimatorName::Cva => EstimatorKind::Cva,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalName {
    Mean,
    Variance,
}

impl FunctionalName {
    pub fn as_str(self) -> &'static str {
        match self {
            FunctionalName::Mean => "mean",
            FunctionalName::Variance => "variance",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub trajectory_length: f64,
    pub leapfrog_steps: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSpec {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_split_seed")]
    pub split_seed: u64,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<usize>,
}

fn default_test_fraction() -> f64 {
    0.1
}

fn default_split_seed() -> u64 {
    0
}

fn default_budgets() -> Vec<usize> {
    vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024]
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| "config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!("steps must be positive");
        }
        if self.burn_in >= self.steps {
            bail!(
                "burn_in ({}) must be smaller than steps ({})",
                self.burn_in,
                self.steps
            );
        }
        if self.chains == 0 || self.replications == 0 {
            bail!("chains and replications must be positive");
        }
        if self.estimators.is_empty() {
            bail!("at least one estimator kind is required");
        }
        if self.functionals.is_empty() {
            bail!("at least one functional is required");
        }
        if !(self.surrogate_cost_weight >= 0.0) {
            bail!("surrogate_cost_weight must be non-negative");
        }
        match &self.kernel {
            KernelSpec::Hmc {
                step_size,
                leapfrog_steps,
            } => {
                if !(*step_size > 0.0) {
                    bail!("HMC step_size must be positive");
                }
                if *leapfrog_steps == 0 {
                    bail!("HMC leapfrog_steps must be at least 1");
                }
            }
            KernelSpec::Mala { step_size } | KernelSpec::Rwm { step_size } => {
                if !(*step_size >= 0.0) {
                    bail!("step_size must be non-negative");
                }
            }
        }
        match &self.target {
            TargetSpec::Gaussian { dim, .. } => {
                if *dim == 0 {
                    bail!("gaussian target dimension must be positive");
                }
            }
            TargetSpec::Logistic { data, synth } | TargetSpec::SparseLogistic { data, synth } => {
                if data.is_none() && synth.is_none() {
                    bail!("logistic targets need either a data path or synth parameters");
                }
                if let Some(path) = data {
                    if !path.exists() {
                        bail!("dataset file {} does not exist", path.display());
                    }
                }
            }
            TargetSpec::Irt { data, synth } => {
                if data.is_none() && synth.is_none() {
                    bail!("the item-response target needs either a data path or synth parameters");
                }
                if let Some(path) = data {
                    if !path.exists() {
                        bail!("dataset file {} does not exist", path.display());
                    }
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.leapfrog_steps.is_empty() {
                bail!("sweep grid must be non-empty");
            }
            if sweep.leapfrog_steps.contains(&0) {
                bail!("sweep grid contains a leapfrog step count of 0");
            }
            if !(sweep.trajectory_length > 0.0) {
                bail!("sweep trajectory_length must be positive");
            }
        }
        if let Some(predict) = &self.predict {
            if !(predict.test_fraction > 0.0 && predict.test_fraction < 1.0) {
                bail!("predict.test_fraction must lie in (0,1)");
            }
        }
        Ok(())
    }

    pub fn kernel_config(&self) -> Result<KernelConfig> {
        let kind = match &self.kernel {
            KernelSpec::Hmc {
                step_size,
                leapfrog_steps,
            } => KernelKind::Hmc(LeapfrogConfig::new(*step_size, *leapfrog_steps)?),
            KernelSpec::Mala { step_size } => KernelKind::Mala {
                step_size: *step_size,
            },
            KernelSpec::Rwm { step_size } => KernelKind::Rwm {
                step_size: *step_size,
            },
        };
        Ok(KernelConfig::new(kind, self.steps, self.burn_in)?)
    }

    pub fn estimator_kinds(&self) -> Vec<EstimatorKind> {
        self.estimators.iter().map(|e| e.to_kind()).collect()
    }

    /// Loads or synthesizes the tabular dataset backing a logistic
    /// target, if the target is tabular.
    pub fn tabular_dataset(&self) -> Result<Option<TabularDataset>> {
        match &self.target {
            TargetSpec::Logistic { data, synth } | TargetSpec::SparseLogistic { data, synth } => {
                let ds = match (data, synth) {
                    (Some(path), _) => data_io::load_german_credit(path)?,
                    (None, Some(s)) => {
                        data_io::synth_logistic(s.rows, s.covariates, s.seed)?.dataset
                    }
                    (None, None) => bail!("logistic targets need data or synth parameters"),
                };
                Ok(Some(ds))
            }
            _ => Ok(None),
        }
    }

    /// Builds the raw target density from a tabular dataset or the
    /// target spec.
    pub fn build_target(&self, tabular: Option<&TabularDataset>) -> Result<Arc<dyn TargetDensity>> {
        Ok(match &self.target {
            TargetSpec::Gaussian { dim, .. } => Arc::new(Gaussian::standard(*dim)),
            TargetSpec::Logistic { .. } => {
                let ds = tabular.context("logistic target needs its dataset")?;
                Arc::new(LogisticRegression::new(
                    ds.design_matrix(),
                    ds.labels.clone(),
                )?)
            }
            TargetSpec::SparseLogistic { .. } => {
                let ds = tabular.context("sparse-logistic target needs its dataset")?;
                Arc::new(SparseLogisticRegression::new(
                    ds.design_matrix(),
                    ds.labels.clone(),
                )?)
            }
            TargetSpec::Irt { data, synth } => {
                let ds = match (data, synth) {
                    (Some(path), _) => data_io::load_irt(path)?,
                    (None, Some(s)) => {
                        data_io::synth_irt(s.students, s.questions, s.keep_fraction, s.seed)?
                            .dataset
                    }
                    (None, None) => {
                        bail!("the item-response target needs data or synth parameters")
                    }
                };
                Arc::new(ItemResponse::new(ds.responses, ds.students, ds.questions)?)
            }
        })
    }

    pub fn vi_config(&self, seed: u64) -> VIConfig {
        VIConfig {
            steps: self.preconditioner.steps,
            batch: self.preconditioner.batch,
            learning_rate: self.preconditioner.learning_rate,
            seed,
            diagonal: self.preconditioner.kind == PreconditionerKind::Diagonal,
        }
    }

    /// Assembles the sampling bundle: for Gaussian benchmark targets the
    /// surrogate is the configured perturbation; data targets are fitted
    /// by VI (or run raw when preconditioning is disabled, which limits
    /// the estimator suite to plain/antithetic).
    pub fn build_bundle(
        &self,
        target: Arc<dyn TargetDensity>,
        seed: u64,
        map: Option<TransportMap>,
    ) -> Result<(TargetBundle, Option<VIFit>)> {
        if let TargetSpec::Gaussian {
            dim,
            surrogate_mean_shift,
            surrogate_cov_scale,
        } = &self.target
        {
            let surrogate = Gaussian::from_mean_cov(
                Array1::from_elem(*dim, *surrogate_mean_shift),
                (Array2::eye(*dim) * *surrogate_cov_scale).view(),
            )?;
            return Ok((
                TargetBundle::with_gaussian_surrogate(target, surrogate)?,
                None,
            ));
        }
        match self.preconditioner.kind {
            PreconditionerKind::None => Ok((TargetBundle::raw(target), None)),
            PreconditionerKind::Full | PreconditionerKind::Diagonal => {
                if let Some(map) = map {
                    Ok((TargetBundle::preconditioned(target, map)?, None))
                } else {
                    let (bundle, fit) = fit_bundle(target, &self.vi_config(seed), true)?;
                    Ok((bundle, Some(fit)))
                }
            }
        }
    }
}
