//! `fh` — run the synthetic experiments and free-form samplers from the
//! command line, emitting deterministic CSV tables and a JSON summary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rand::SeedableRng;

use fh_core::config::{parse_config, CustomMethod, ExperimentKind, RunConfig};
use fh_core::error::FhError;
use fh_core::experiments::{
    run_correlated_dims, run_cov_error, run_custom_sample, run_guidance_norm, run_toy_posterior,
    CustomSampleRun, ExperimentReport,
};
use fh_core::guidance::{BaselineRule, ClipConfig};
use fh_core::report::{write_csv, write_summary};
use fh_core::sampler::{JacobianKind, MomentsSource, SamplingMethod};
use fh_core::tracker::{InitStrategy, TrackerConfig};

#[derive(Parser)]
#[command(
    name = "fh",
    about = "Denoiser-covariance tracking experiments for diffusion posterior sampling",
    version
)]
struct Cli {
    /// Experiment to run: toy-posterior | correlated-dims | cov-error |
    /// guidance-norm | custom-sample
    experiment: String,

    /// TOML configuration file; defaults apply where keys are absent
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key (dotted path), e.g. --set sampler.steps=200
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory for the CSV table and summary.json
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Random seed (overrides the config file)
    #[arg(long)]
    seed: Option<u64>,
}

fn build_custom_run(config: &RunConfig) -> Result<CustomSampleRun, FhError> {
    let custom = &config.custom;
    let clip = if custom.clip {
        ClipConfig {
            enabled: true,
            lo: custom.clip_range.0,
            hi: custom.clip_range.1,
        }
    } else {
        ClipConfig::disabled()
    };
    let jacobian = JacobianKind::ExactOracle {
        fallback_threshold: custom.fallback_threshold,
    };
    let tracked = || {
        let mut init_rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
        let samples = config
            .mixture
            .sample_n(&mut init_rng, config.tracker_init_samples);
        TrackerConfig::new(InitStrategy::DataCovariance { samples }, config.sigma_max)
            .with_space_update_range(config.sigma_min, config.sigma_max)
            .with_mean_transfer(config.mean_transfer)
    };
    let guided = |rule: BaselineRule, moments: MomentsSource| SamplingMethod::Guided {
        observation: config.observation.clone(),
        rule,
        jacobian,
        clip,
        cg: config.cg,
        moments,
    };
    let (method, use_conditional) = match custom.method {
        CustomMethod::None => (SamplingMethod::ScoreOnly, false),
        CustomMethod::ExactConditional => (SamplingMethod::ScoreOnly, true),
        CustomMethod::Dps => (
            guided(BaselineRule::Dps { xi: custom.dps_xi }, MomentsSource::ExactOracle),
            false,
        ),
        CustomMethod::PiGdm => (guided(BaselineRule::PiGdm, MomentsSource::ExactOracle), false),
        CustomMethod::PiGdmNoScale => (
            guided(BaselineRule::PiGdmNoScale, MomentsSource::ExactOracle),
            false,
        ),
        CustomMethod::HeuristicSigma => (
            guided(BaselineRule::HeuristicSigma, MomentsSource::ExactOracle),
            false,
        ),
        CustomMethod::FreeHunch => (
            guided(BaselineRule::FreeHunch, MomentsSource::Tracked(tracked())),
            false,
        ),
        CustomMethod::OptimalCovariance => (
            guided(BaselineRule::FreeHunch, MomentsSource::ExactOracle),
            false,
        ),
    };
    Ok(CustomSampleRun {
        mixture: config.mixture.clone(),
        observation: config.observation.clone(),
        method,
        use_conditional_oracle: use_conditional,
        solver: config.solver,
        n_steps: config.steps,
        sigma_min: config.sigma_min,
        sigma_max: config.sigma_max,
        rho: config.rho,
        heun_tracker_both_evals: config.heun_tracker_both_evals,
        n_samples: custom.n_samples,
        seed: config.seed,
    })
}

fn dispatch(config: &RunConfig) -> Result<ExperimentReport, FhError> {
    match config.experiment {
        ExperimentKind::ToyPosterior => run_toy_posterior(&config.toy_posterior_config()?),
        ExperimentKind::CorrelatedDims => run_correlated_dims(&config.correlated_dims_config()),
        ExperimentKind::CovError => run_cov_error(&config.cov_error_config()),
        ExperimentKind::GuidanceNorm => run_guidance_norm(&config.guidance_norm_config()),
        ExperimentKind::CustomSample => run_custom_sample(&build_custom_run(config)?),
    }
}

fn run() -> Result<(), FhError> {
    let cli = Cli::parse();

    if let Ok(threads) = std::env::var("FH_THREADS") {
        let n: usize = threads.parse().map_err(|_| {
            FhError::InvalidConfig(vec![format!(
                "FH_THREADS must be an integer (got '{threads}')"
            )])
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| FhError::InvalidConfig(vec![format!("FH_THREADS: {e}")]))?;
    }

    let experiment = ExperimentKind::parse(&cli.experiment)?;
    let config = parse_config(experiment, cli.config.as_deref(), &cli.set, cli.seed)?;
    let echo = config.to_toml_string();

    let report = dispatch(&config)?;
    let csv_path = write_csv(&report, &cli.out)?;
    let summary_path = write_summary(&report, &echo, &cli.out)?;

    eprintln!(
        "{}: {} rows -> {} ({} ms); summary -> {}",
        report.experiment,
        report.rows.len(),
        csv_path.display(),
        report.wall_ms,
        summary_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // one human-readable line plus a machine-readable record
            eprintln!("error: {e}");
            let record = serde_json::json!({
                "error": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
