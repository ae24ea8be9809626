//! Flags, the flat configuration file, and how they merge.
//!
//! Every flag except `--config` has a file key of the same name in
//! snake_case. A value given as a flag beats the file, which beats the
//! built-in default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ddc_core::engine::{EngineConfig, WeightMapping};
use ddc_core::synthetic::{Family, GeneratorSpec};
use ddc_core::Execution;
use ddc_gateway::{ApiMode, EndpointConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Parses a snake_case enum value the same way the config file does.
pub fn snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

macro_rules! overrides {
    (
        $(#[$meta:meta])*
        $name:ident => $target:ty {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty => $($path:ident).+ ),* $(,)?
        }
    ) => {
        overrides! { $(#[$meta])* $name { $( $(#[$fmeta])* $field : $ty ),* } }

        impl $name {
            pub fn apply(&self, target: &mut $target) {
                $(
                    if let Some(v) = &self.$field {
                        target.$($path).+ = v.clone().into();
                    }
                )*
            }
        }
    };
    (
        $(#[$meta:meta])*
        $name:ident {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(
                $(#[$fmeta])*
                #[arg(long)]
                #[serde(default)]
                pub $field: Option<$ty>,
            )*
        }

        impl $name {
            /// Field-wise: `self` where set, else `file`.
            pub fn or(self, file: Self) -> Self {
                Self { $( $field: self.$field.or(file.$field), )* }
            }
        }
    };
}

overrides! {
    EngineArgs => EngineConfig {
        /// Maximum number of paths per query, calibration included.
        budget: usize => budget,
        /// Calibration paths, never pruned.
        b_init: usize => init_budget,
        /// Sliding window length in tokens.
        window: usize => window,
        /// Posterior threshold on the leader's vote share.
        gamma: f64 => gamma,
        /// Stop once the leader's share exceeds gamma with this probability.
        tau_stop: f64 => tau_stop,
        /// Penalty on trend reversals in the instability score.
        eta: f64 => eta,
        /// Log-probabilities per token; also requested from the endpoint.
        top_k: usize => top_k,
        /// Calibration percentile above which a window passes without further checks.
        pass_percentile: f64 => pass_percentile,
        /// Calibration percentile below which a window is pruned outright.
        drop_percentile: f64 => drop_percentile,
        /// IQR multiplier of the instability fence.
        tukey_multiplier: f64 => tukey_multiplier,
        /// Token cap per path; also sent as the request's max_tokens.
        max_tokens_per_path: usize => max_tokens_per_path,
        /// Gate every `stride` tokens once the window is full.
        stride: usize => stride,
        /// Pool every `calibration_stride`-th calibration window.
        calibration_stride: usize => calibration_stride,
        /// Concurrent paths.
        parallelism: usize => parallelism,
        /// init_min_max, identity or fixed_range.
        #[arg(value_parser = snake::<WeightMapping>)]
        weight_mapping: WeightMapping => weight_mapping,
        /// Lowest weight init_min_max may assign.
        weight_floor: f64 => weight_floor,
        /// Confidence mapped to weight 0 by fixed_range.
        weight_lo: f64 => weight_lo,
        /// Confidence mapped to weight 1 by fixed_range.
        weight_hi: f64 => weight_hi,
    }
}

overrides! {
    GeneratorArgs => GeneratorSpec {
        /// Probability a path is correct.
        p: f64 => p,
        /// Mean weight of correct paths.
        mu_c: f64 => mu_c,
        /// Mean weight of incorrect paths.
        mu_i: f64 => mu_i,
        /// Weight variance as a fraction of mu (1 - mu); 0 is a point mass.
        weight_spread: f64 => weight_spread,
        /// Distinct wrong answers.
        distractors: usize => distractors,
        /// Trajectory family of post-calibration paths.
        #[arg(value_parser = snake::<Family>)]
        family: Family => family,
        /// Tokens per path.
        path_len: usize => path_len,
        /// Path length varies by up to this many tokens.
        path_len_jitter: usize => path_len_jitter,
        /// Confidence level of a weight-0 path.
        level_lo: f64 => level_lo,
        /// Confidence level of a weight-1 path.
        level_hi: f64 => level_hi,
        /// Per-token noise on confidence trajectories.
        noise: f64 => noise,
        /// Noise on stable_high paths.
        stable_noise: f64 => stable_noise,
        /// Noise on isotropic_noise paths.
        jitter: f64 => jitter,
        /// Depth of the transient dip on dip_recover paths.
        dip_depth: f64 => dip_depth,
        /// Dip length in tokens.
        dip_width: usize => dip_width,
        /// Total decline of a degenerating path.
        drift: f64 => drift,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Stopping counts of weighted, frequency-only and fixed-budget voting.
    #[default]
    Stopping,
    /// `stopping` over a (p, mu_c, mu_i) grid against the sufficient condition.
    Grid,
    /// Pruning rates per trajectory family.
    Pruning,
    /// Full engine runs on synthetic paths.
    Engine,
}

overrides! {
    SimArgs {
        /// stopping, grid, pruning or engine.
        #[arg(value_parser = snake::<Experiment>)]
        experiment: Experiment,
        /// Monte Carlo trials.
        trials: usize,
        /// Votes drawn at most per trial before giving up.
        max_votes: usize,
        /// Votes used by the fixed-budget reference.
        sc_budget: usize,
        /// Multiplies every weight before the weighted update.
        weight_scale: f64,
        /// Comma-separated grid values of p.
        #[arg(value_delimiter = ',')]
        grid_p: Vec<f64>,
        #[arg(value_delimiter = ',')]
        grid_mu_c: Vec<f64>,
        #[arg(value_delimiter = ',')]
        grid_mu_i: Vec<f64>,
        /// Calibration paths per family in the pruning experiment.
        init_paths_per_family: usize,
        /// Scored paths per family in the pruning experiment.
        paths_per_family: usize,
        /// parallel or sequential.
        #[arg(value_parser = snake::<Execution>)]
        execution: Execution,
    }
}

overrides! {
    EndpointArgs => EndpointConfig {
        /// Base URL with version prefix; DDC_BASE_URL is used when neither
        /// flag nor file sets it.
        base_url: String => base_url,
        /// Model name sent with each request.
        model: String => model,
        /// completions or chat.
        #[arg(value_parser = snake::<ApiMode>)]
        api: ApiMode => api,
        /// Sampling temperature.
        temperature: f64 => temperature,
        /// Nucleus sampling mass.
        top_p: f64 => top_p,
        /// Idle timeout on every read.
        request_timeout_secs: u64 => request_timeout_secs,
        connect_timeout_secs: u64 => connect_timeout_secs,
        /// Retries before the first streamed event.
        retries: u32 => retry.retries,
        /// Initial retry delay.
        backoff_ms: u64 => retry.backoff_ms,
        /// Delay multiplier per retry.
        backoff_factor: f64 => retry.backoff_factor,
        /// `{prompt}` is replaced by the query prompt.
        prompt_template: String => prompt_template,
        /// System message in chat mode.
        system_prompt: String => system_prompt,
    }
}

overrides! {
    OutArgs {
        /// Output directory.
        out: PathBuf,
    }
}

overrides! {
    DataArgs {
        /// JSON lines of {id, prompt, gold?}.
        dataset: PathBuf,
        /// Trace directory: written by `run`, read by `replay`.
        traces: PathBuf,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Table,
    Json,
}

overrides! {
    FormatArgs {
        /// table or json.
        #[arg(value_parser = snake::<Format>)]
        format: Format,
    }
}

overrides! {
    MomentArgs {
        p: f64,
        mu_c: f64,
        mu_i: f64,
        /// Sets both second moments from the weight spread.
        weight_spread: f64,
        /// Second moment of correct weights; defaults to mu_c^2 + spread terms.
        m2_c: f64,
        /// Second moment of incorrect weights.
        m2_i: f64,
    }
}

overrides! {
    SeedArgs {
        /// Master seed for simulations, and the base sampling seed for
        /// endpoints.
        #[arg(global = true)]
        seed: u64,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddc", version, about = "Confidence-weighted early stopping for sampled reasoning paths")]
pub struct Cli {
    /// Flat TOML file; keys are the long flag names in snake_case.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo experiments on synthetic paths.
    Simulate(SimulateCmd),
    /// Run the engine against a live endpoint for every dataset query.
    Run(RunCmd),
    /// Re-run the engine over recorded traces.
    Replay(ReplayCmd),
    /// Tabulate accuracy and tokens from run or replay outputs.
    Report(ReportCmd),
    /// Evaluate the sufficient condition for weighted voting to stop sooner.
    CheckCondition(CheckCmd),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub generator: GeneratorArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RunCmd {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayCmd {
    #[command(flatten)]
    pub engine: EngineArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReportCmd {
    /// Aggregate files or output directories of `run`/`replay`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[command(flatten)]
    pub format: FormatArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CheckCmd {
    #[command(flatten)]
    pub moments: MomentArgs,
}

/// Flag ids of an argument group, which double as file keys.
pub fn keys<T: Args>() -> Vec<String> {
    T::augment_args(clap::Command::new("keys"))
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .filter(|id| id != "help" && id != "version")
        .collect()
}

pub fn all_keys() -> BTreeSet<String> {
    [
        keys::<EngineArgs>(),
        keys::<GeneratorArgs>(),
        keys::<SimArgs>(),
        keys::<EndpointArgs>(),
        keys::<OutArgs>(),
        keys::<DataArgs>(),
        keys::<FormatArgs>(),
        keys::<MomentArgs>(),
        keys::<SeedArgs>(),
    ]
    .into_iter()
    .flatten()
    .collect()
}

/// Parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct FileConfig {
    table: toml::Table,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let known = all_keys();
        if let Some(bad) = table.keys().find(|k| !known.contains(*k)) {
            return Err(CliError::Usage(format!("config: unknown key {bad:?}")));
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The keys belonging to group `T`, deserialized.
    pub fn group<T: Args + DeserializeOwned>(&self) -> Result<T, CliError> {
        let wanted = keys::<T>();
        let sub: toml::Table = self
            .table
            .iter()
            .filter(|(k, _)| wanted.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        toml::Value::Table(sub)
            .try_into()
            .map_err(|e| CliError::Usage(format!("config: {e}")))
    }
}

/// Flags over file over default for one group.
pub fn resolve<T>(flags: T, file: &FileConfig) -> Result<T, CliError>
where
    T: Args + DeserializeOwned,
    T: Merge,
{
    Ok(flags.merge(file.group::<T>()?))
}

pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

macro_rules! merge_impl {
    ($($t:ty),*) => { $( impl Merge for $t { fn merge(self, file: Self) -> Self { self.or(file) } } )* };
}

merge_impl!(EngineArgs, GeneratorArgs, SimArgs, EndpointArgs, OutArgs, DataArgs, FormatArgs, MomentArgs, SeedArgs);
