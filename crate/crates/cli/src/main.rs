#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcagmm::baselines::psnr;
use pcagmm::degrade::degrade;
use pcagmm::em::EmConfig;
use pcagmm::error::Error;
use pcagmm::gmm::fit_gmm;
use pcagmm::io::{load_model, read_image, save_model, write_image, ModelFile};
use pcagmm::palm::SolverConfig;
use pcagmm::patches::{extract_pairs, PatchGeometry};
use pcagmm::pcagmm::fit_pcagmm;
use pcagmm::superres::{reconstruct, Mixture};

/// Train patch mixture models and upscale images with them.
#[derive(Parser)]
#[command(name = "pcagmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gmm,
    Pcagmm,
}

#[derive(Subcommand)]
enum Command {
    /// Blur, downsample and add noise to an image.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long, default_value_t = 0.5)]
        blur_std: f64,
        #[arg(long, default_value_t = 0.02)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit a mixture model to joint high/low resolution patches.
    Train {
        #[arg(long)]
        high: PathBuf,
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Pcagmm)]
        kind: Kind,
        #[arg(long, default_value_t = 100)]
        components: usize,
        #[arg(long, default_value_t = 4)]
        tau: usize,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long, default_value_t = 20)]
        reduced_dim: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1_000_000)]
        max_patches: usize,
        #[arg(long, default_value_t = 100)]
        em_iters: usize,
        #[arg(long, default_value_t = 1e-5)]
        em_tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run on one thread so results are bit-reproducible.
        #[arg(long)]
        deterministic: bool,
    },
    /// Upscale a low resolution image with a trained model.
    Superres {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
    },
    /// Peak signal-to-noise ratio of a test image against a reference.
    Psnr {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Print a model header and per-component summaries.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 4 } else { 3 })
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Degrade { input, output, factor, blur_std, noise_std, seed } => {
            let x = read_image(&input)?;
            let y = degrade(&x, factor, blur_std, noise_std, seed)?;
            write_image(&output, &y)?;
            log::info!("wrote {:?} image to {}", y.dims(), output.display());
        }
        Command::Train {
            high,
            low,
            model,
            kind,
            components,
            tau,
            factor,
            reduced_dim,
            sigma,
            stride,
            max_patches,
            em_iters,
            em_tol,
            seed,
            deterministic,
        } => {
            if deterministic {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(1)
                    .build_global()
                    .map_err(|e| Failure::Usage(e.to_string()))?;
            }
            if components == 0 || stride == 0 || max_patches == 0 || !(sigma > 0.0) || !(em_tol >= 0.0) {
                return Err(Failure::Usage(
                    "components, stride and max-patches must be positive; sigma > 0; em-tol >= 0".into(),
                ));
            }
            let high = read_image(&high)?;
            let low = read_image(&low)?;
            let geom = PatchGeometry::new(tau, factor, high.ndim())
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let patches = extract_pairs(&high, &low, &geom, stride, max_patches, seed)?;
            log::info!("training on {} patches of dimension {}", patches.data.nrows(), geom.n());
            let config = EmConfig { max_iters: em_iters, tol: em_tol, ..Default::default() };
            let (mixture, log) = match kind {
                Kind::Gmm => {
                    let (g, log) = fit_gmm(&patches.data, components, &config, seed)?;
                    (Mixture::Gmm(g), log)
                }
                Kind::Pcagmm => {
                    if reduced_dim == 0 || reduced_dim > geom.n() {
                        return Err(Failure::Usage(format!(
                            "reduced-dim must lie in 1..={}",
                            geom.n()
                        )));
                    }
                    let (m, log) = fit_pcagmm(
                        &patches.data,
                        components,
                        reduced_dim,
                        sigma,
                        &config,
                        &SolverConfig::default(),
                        seed,
                    )?;
                    (Mixture::PcaGmm(m), log)
                }
            };
            for (i, it) in log.iterations.iter().enumerate() {
                log::info!("em iteration {i}: objective {:.6}", it.objective);
            }
            if !log.converged {
                log::warn!("EM stopped after {} iterations without converging", log.iterations.len());
            }
            save_model(&model, &ModelFile { model: mixture, geometry: Some(geom) })?;
            log::info!("saved model to {}", model.display());
        }
        Command::Superres { low, model, output, gamma } => {
            if !(gamma >= 0.0) {
                return Err(Failure::Usage("gamma must be nonnegative".into()));
            }
            let file = load_model(&model)?;
            let geom = file
                .geometry
                .ok_or_else(|| Error::CorruptHeader("model file carries no patch geometry".into()))?;
            let low = read_image(&low)?;
            let out = reconstruct(&low, &file.model, &geom, gamma)?;
            write_image(&output, &out.clipped())?;
            log::info!("wrote {:?} image to {}", out.dims(), output.display());
        }
        Command::Psnr { reference, test } => {
            let value = psnr(&read_image(&reference)?, &read_image(&test)?)?;
            println!("psnr={value}");
        }
        Command::Inspect { model } => {
            let file = load_model(&model)?;
            println!("{}", file.header());
            match &file.model {
                Mixture::Gmm(g) => {
                    for (k, a) in g.alpha.iter().enumerate() {
                        println!("component {k}: alpha={a:.6e}");
                    }
                }
                Mixture::PcaGmm(m) => {
                    for (k, (a, c)) in m.alpha.iter().zip(&m.components).enumerate() {
                        // mu = U^T d / alpha at the stored frame
                        println!("component {k}: alpha={a:.6e} offset={:.6e}", c.mu.norm());
                    }
                }
            }
        }
    }
    Ok(())
}
