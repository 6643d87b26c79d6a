//! `mossaw`: batch front-end for the SAW-modulated Mössbauer reduction.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mossbauer_saw::config::RunConfig;
use mossbauer_saw::error::{Error, Result};
use mossbauer_saw::io::to_json_string;
use mossbauer_saw::pipeline;

#[derive(Parser)]
#[command(name = "mossaw", version, about = "Sideband reduction of SAW-driven Mössbauer spectra")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every stage's files.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw count spectra for the drive-power grid.
    Synth,
    /// Fit the sideband template to every spectrum.
    Fit,
    /// Calibrate the velocity axis of every fit.
    Calibrate,
    /// Integrate peaks and invert for sideband powers.
    Extract,
    /// Fit the standing-wave model across drive powers.
    Globalfit,
    /// Write model and noisy S-parameter traces of the configured device.
    IdtModel,
    /// Fit the transducer model to S-parameter traces.
    IdtFit {
        /// Trace CSV; overrides `idt.traces`.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Every stage in order.
    Pipeline,
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::IdtFit { traces: Some(t) } = &cli.command {
        cfg.idt.traces = Some(t.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if cli.dry_run {
        print!("{}", to_json_string(&cfg)?);
        return Ok(());
    }
    let out = &cli.out_dir;
    match &cli.command {
        Command::Synth => {
            let index = pipeline::run_synth(&cfg, out)?;
            println!("wrote {} spectra to {}", index.entries.len(), out.join("spectra").display());
        }
        Command::Fit => {
            let fits = pipeline::run_fit(&cfg, out)?;
            let worst = fits.iter().map(|f| f.chi2_reduced).fold(0.0, f64::max);
            println!("fitted {} spectra, largest chi2_nu {worst:.3}", fits.len());
        }
        Command::Calibrate => {
            let cals = pipeline::run_calibrate(&cfg, out)?;
            let worst = cals.iter().map(|c| c.rms_mm_s).fold(0.0, f64::max);
            println!("calibrated {} spectra, largest residual rms {worst:.4} mm/s", cals.len());
        }
        Command::Extract => {
            let powers = pipeline::run_extract(&cfg, out)?;
            println!("extracted sideband powers at {} drive powers", powers.len());
        }
        Command::Globalfit => {
            let report = pipeline::run_globalfit(&cfg, out)?;
            println!("{}", report.summary);
        }
        Command::IdtModel => {
            let ea = pipeline::run_idt_model(&cfg, out)?;
            println!("eta = {:.4}, alpha = {:.4}", ea.eta, ea.alpha);
        }
        Command::IdtFit { .. } => {
            let rep = pipeline::run_idt_fit(&cfg, out)?;
            println!(
                "eta = {:.4} ± {:.4}, alpha = {:.4} ± {:.4}, chi2_nu = {:.3}",
                rep.eta_alpha.eta, rep.eta_sigma, rep.eta_alpha.alpha, rep.alpha_sigma, rep.chi2_reduced
            );
        }
        Command::Pipeline => {
            let s = pipeline::run_all(&cfg, out)?;
            println!("processed {} spectra", s.spectra);
            println!("{}", s.global.summary);
        }
    }
    Ok(())
}

fn error_document(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }).to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_document(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
