//! Command-line interface: train, impute, evaluate, and built-in toy
//! experiments. Exit codes: 0 success, 1 runtime failure, 2 usage/config
//! error. Verbosity via CLWF_LOG ∈ {quiet, info, debug}.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clwf::config::RunConfig;
use clwf::data::{
    infer_csv_layout, load_csv, load_mask_csv, load_samples_csv, merge_imputation, metrics,
    save_csv, save_mask_csv, save_samples_csv, CsvLayout, MetricReport, SeriesBatch,
};
use clwf::experiments;
use clwf::model::ModelParams;
use clwf::sampler::{impute, SampleConfig, VaePotential};
use clwf::tensor::Tensor;
use clwf::train::{train_flow, train_vae};
use clwf::vae::VaeParams;
use clwf::{Error, Result};

#[derive(Parser)]
#[command(name = "clwf", version, about = "Conditional Lagrangian Wasserstein Flow for time-series imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the velocity field (and the VAE potential when enabled).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// exact | sinkhorn | independent
        #[arg(long)]
        coupling: Option<String>,
        /// Also train the VAE potential for Rao-Blackwellized sampling.
        #[arg(long)]
        rao_blackwell: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Impute a CSV using a trained checkpoint.
    Impute {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// VAE checkpoint for the Rao-Blackwellized sampler.
        #[arg(long)]
        vae_checkpoint: Option<PathBuf>,
        /// Normalization statistics written by `train` (feature, mean, std).
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Euler steps N (overrides config).
        #[arg(long)]
        steps: Option<usize>,
        /// Monte-Carlo samples M (overrides config).
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        rao_blackwell: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an imputed CSV against ground truth over a mask.
    Eval {
        #[arg(long)]
        imputed: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Samples sidecar for CRPS.
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Run a built-in experiment (gauss2d, mixture_ke, rb_ablation, sinusoid).
    Toy {
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_logging() {
    let level = match std::env::var("CLWF_LOG").as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            threads,
            coupling,
            rao_blackwell,
            out,
        } => {
            let mut cfg = RunConfig::parse(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(c) = &coupling {
                cfg.set_coupling_by_name(c)?;
            }
            if rao_blackwell {
                cfg.rao_blackwell = true;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cmd_train(&cfg)
        }
        Command::Impute {
            config,
            checkpoint,
            input,
            vae_checkpoint,
            stats,
            steps,
            mc,
            rao_blackwell,
            seed,
            threads,
            out,
        } => {
            let mut cfg = RunConfig::parse(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(t) = threads {
                cfg.threads = t;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            if let Some(m) = mc {
                cfg.mc_samples = m;
            }
            if rao_blackwell {
                cfg.rao_blackwell = true;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cmd_impute(&cfg, &checkpoint, &input, vae_checkpoint.as_deref(), stats.as_deref())
        }
        Command::Eval {
            imputed,
            truth,
            mask,
            samples,
        } => cmd_eval(&imputed, &truth, &mask, samples.as_deref()),
        Command::Toy { name, seed, out } => cmd_toy(&name, seed, out.as_deref()),
    }
}

fn load_training_batch(cfg: &RunConfig) -> Result<SeriesBatch> {
    let train_csv = cfg
        .train_csv
        .as_ref()
        .ok_or_else(|| Error::Config("train_csv not set in config".to_string()))?;
    let (k, l) = match (cfg.features, cfg.seq_len) {
        (Some(k), Some(l)) => (k, l),
        _ => {
            return Err(Error::Config(
                "features and seq_len must be set in config".to_string(),
            ))
        }
    };
    let mut batch = load_csv(train_csv, &CsvLayout { k, l })?;
    batch.compute_stats();
    Ok(batch)
}

fn write_stats(batch: &SeriesBatch, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "feature\tmean\tstd")?;
    for (i, (m, s)) in batch
        .feature_means
        .iter()
        .zip(batch.feature_stds.iter())
        .enumerate()
    {
        writeln!(w, "{i}\t{m}\t{s}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_stats(path: &Path, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let content = std::fs::read_to_string(path)?;
    let mut means = vec![0.0; k];
    let mut stds = vec![1.0; k];
    for (i, line) in content.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("{}: line {}: bad stats row", path.display(), i + 1)));
        }
        let feat: usize = fields[0]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad feature index", path.display())))?;
        if feat >= k {
            return Err(Error::Data(format!(
                "{}: feature {feat} out of range for {k} features",
                path.display()
            )));
        }
        means[feat] = fields[1]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad mean", path.display())))?;
        stds[feat] = fields[2]
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad std", path.display())))?;
    }
    Ok((means, stds))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let batch = load_training_batch(cfg)?;
    let norm = batch.normalize()?;
    write_stats(&batch, &cfg.out_dir.join("stats.tsv"))?;

    let train_cfg = cfg.train_config(Some(cfg.out_dir.join("train_log.tsv")));
    log::info!(
        "training velocity field on {} series ({} x {})",
        norm.len(),
        norm.k(),
        norm.l()
    );
    let run = train_flow(&norm, &train_cfg)?;
    let vel_path = cfg.out_dir.join("velocity.ckpt");
    run.params.save(&vel_path)?;
    log::info!(
        "velocity checkpoint: {} (final loss {:.6})",
        vel_path.display(),
        run.epoch_losses.last().unwrap()
    );

    if cfg.rao_blackwell {
        let mut vae_cfg = cfg.train_config(Some(cfg.out_dir.join("vae_log.tsv")));
        vae_cfg.epochs = cfg.vae_epochs;
        let vae_run = train_vae(&norm, &vae_cfg)?;
        let vae_path = cfg.out_dir.join("vae.ckpt");
        vae_run.params.save(&vae_path)?;
        log::info!(
            "vae checkpoint: {} (final loss {:.6})",
            vae_path.display(),
            vae_run.epoch_losses.last().unwrap()
        );
    }
    Ok(())
}

fn cmd_impute(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    vae_checkpoint: Option<&Path>,
    stats: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let params = ModelParams::load(checkpoint)?;
    let layout = CsvLayout {
        k: params.k,
        l: params.l,
    };
    let mut batch = load_csv(input, &layout).map_err(|e| {
        Error::Data(format!(
            "{e} (checkpoint expects {} features x {} steps)",
            params.k, params.l
        ))
    })?;
    match stats {
        Some(path) => {
            let (means, stds) = read_stats(path, params.k)?;
            batch.feature_means = means;
            batch.feature_stds = stds;
        }
        None => {
            batch.compute_stats();
            log::info!("no --stats given; deriving normalization from the input's observed entries");
        }
    }
    let norm = batch.normalize()?;

    let vae_params: Option<VaeParams> = match (cfg.rao_blackwell, vae_checkpoint) {
        (true, Some(path)) => Some(VaeParams::load(path)?),
        (true, None) => {
            return Err(Error::Config(
                "--rao-blackwell requires --vae-checkpoint".to_string(),
            ))
        }
        (false, _) => None,
    };
    let corrector = vae_params.as_ref().map(|p| VaePotential {
        params: p,
        cfg: cfg.potential(),
    });

    let icfg = cfg.interpolant();
    let mut merged_points = Vec::with_capacity(norm.len());
    let mut merged_samples: Vec<Vec<Tensor>> = Vec::with_capacity(norm.len());
    for i in 0..norm.len() {
        let x_cond = norm.values[i].mul(&norm.obs_mask[i])?;
        let cond_mask = norm.obs_mask[i].clone();
        let scfg = SampleConfig {
            seed: cfg.seed.wrapping_mul(10_000).wrapping_add(i as u64),
            ..cfg.sample_config()
        };
        let imp = impute(
            &params,
            &x_cond,
            &cond_mask,
            &icfg,
            &scfg,
            corrector.as_ref().map(|c| c as &dyn clwf::sampler::Corrector),
        )?;
        let raw_point = batch.denormalize_state(&imp.point)?;
        merged_points.push(merge_imputation(
            &batch.values[i],
            &batch.obs_mask[i],
            &raw_point,
        )?);
        let mut sample_states = Vec::with_capacity(imp.samples.len());
        for s in &imp.samples {
            let raw = batch.denormalize_state(s)?;
            sample_states.push(merge_imputation(&batch.values[i], &batch.obs_mask[i], &raw)?);
        }
        merged_samples.push(sample_states);
    }

    let ones: Vec<Tensor> = merged_points
        .iter()
        .map(|p| Tensor::full(p.shape(), 1.0))
        .collect();
    let out_batch = SeriesBatch::new(merged_points, ones)?;
    let out_csv = cfg.out_dir.join("imputed.csv");
    save_csv(&out_batch, &out_csv)?;
    let sidecar = cfg.out_dir.join("samples.csv");
    save_samples_csv(&merged_samples, &sidecar)?;
    let mask_out = cfg.out_dir.join("obs_mask.csv");
    save_mask_csv(&batch.obs_mask, &mask_out)?;
    log::info!("imputed csv: {}", out_csv.display());
    log::info!("samples sidecar: {}", sidecar.display());
    Ok(())
}

fn print_report(report: &MetricReport) {
    let crps = match report.crps {
        Some(c) => format!("{c}"),
        None => "null".to_string(),
    };
    println!(
        "{{\"rmse\": {}, \"mae\": {}, \"crps\": {}, \"count\": {}}}",
        report.rmse, report.mae, crps, report.count
    );
}

fn cmd_eval(imputed: &Path, truth: &Path, mask: &Path, samples: Option<&Path>) -> Result<()> {
    let layout = infer_csv_layout(imputed)?;
    let imputed_batch = load_csv(imputed, &layout)?;
    let truth_batch = load_csv(truth, &layout)?;
    let masks = load_mask_csv(mask, &layout)?;
    let sample_sets = match samples {
        Some(path) => Some(load_samples_csv(path, &layout)?),
        None => None,
    };
    let report = metrics(
        &imputed_batch.values,
        &truth_batch.values,
        &masks,
        sample_sets.as_deref(),
    )?;
    print_report(&report);
    Ok(())
}

fn cmd_toy(name: &str, seed: u64, out: Option<&Path>) -> Result<()> {
    match name {
        "gauss2d" => {
            let r = experiments::gauss2d(seed, out)?;
            println!(
                "{{\"field_mse\": {}, \"mean_error\": {}, \"cov_rel_err\": {}, \"final_train_loss\": {}}}",
                r.field_mse, r.mean_error, r.cov_rel_err, r.final_train_loss
            );
        }
        "mixture_ke" => {
            let r = experiments::mixture_ke(seed, out)?;
            println!(
                "{{\"ke_ot_mean\": {}, \"ke_independent_mean\": {}, \"t_stat\": {}, \"n_pairs\": {}}}",
                r.ke_ot_mean, r.ke_independent_mean, r.t_stat, r.n_pairs
            );
        }
        "rb_ablation" => {
            let r = experiments::rb_ablation(seed, 5, out)?;
            println!(
                "{{\"mean_base_mse\": {}, \"mean_rb_mse\": {}, \"mean_diff\": {}}}",
                r.mean_base_mse, r.mean_rb_mse, r.mean_diff
            );
        }
        "sinusoid" => {
            let r = experiments::sinusoid(seed, out)?;
            println!(
                "{{\"rmse\": {}, \"mae\": {}, \"crps\": {}, \"baseline_rmse\": {}, \"m1_rmse\": {}}}",
                r.clwf.rmse,
                r.clwf.mae,
                r.clwf.crps.unwrap_or(f64::NAN),
                r.baseline.rmse,
                r.m1_rmse
            );
        }
        other => {
            return Err(Error::Config(format!(
                "unknown experiment '{other}'; available: {}",
                experiments::EXPERIMENT_NAMES.join(", ")
            )))
        }
    }
    Ok(())
}
