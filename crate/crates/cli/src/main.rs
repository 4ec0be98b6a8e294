//! `psic` command-line tool.
//!
//! Every command reads all of its inputs before writing anything, and every
//! file is written atomically, so a failed run leaves no partial outputs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use psic::dcnn::param_count;
use psic::io::{export_psic, fit_volume_sh, interior_voxels, load_subjects, write_atomic, DcbContainer, ModelFile, RoiMask};
use psic::phantom::{gen_cohort, write_cohort, PhantomSpec};
use psic::pipeline::{evaluate, metrics_csv, predict_map, train_model, voxel_metrics, PipelineConfig};
use psic::sh::DEFAULT_REG;
use psic::training::history_csv;

#[derive(Parser, Debug)]
#[command(name = "psic", version, about = "Pathology-specific imaging contrast from diffusion MRI")]
struct Cli {
    /// Seed for every random stream; overrides seeds in spec/config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort from a phantom spec (JSON).
    GenPhantom {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit SH coefficients at every voxel; writes `sh.dcb` and `centers.csv`.
    FitSh {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = 6)]
        nmax: usize,
        /// Neighbourhood radius used to list diffusion-cube centres.
        #[arg(long, default_value_t = 1)]
        radius: usize,
        #[arg(long, default_value_t = DEFAULT_REG)]
        reg: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-voxel DTI and model-free metrics as CSV.
    Metrics {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on one ROI of a cohort.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        roi: String,
        /// Pipeline config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every interior ROI voxel; writes a one-channel map plus PGM slices.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// DNN vs metric classifiers; writes the CSV report and a JSON companion.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for held-out PSIC maps, one subdirectory per ROI.
        #[arg(long)]
        psic_dir: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn pipeline_config(path: Option<&Path>, seed: Option<u64>) -> Result<PipelineConfig> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// `dir/stem<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenPhantom { spec, out } => {
            let mut spec: PhantomSpec = read_json(&spec)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let cohort = gen_cohort(&spec)?;
            let manifest = write_cohort(&cohort, &out)?;
            log::info!("wrote {} subjects, manifest {}", cohort.subjects.len(), manifest.display());
        }
        Command::FitSh {
            input,
            mask,
            nmax,
            radius,
            reg,
            out,
        } => {
            let volume = DcbContainer::read(&input)?;
            let mask = RoiMask::read(&mask)?;
            if mask.dims != volume.dims {
                bail!("mask dims {:?} differ from volume dims {:?}", mask.dims, volume.dims);
            }
            let sh = fit_volume_sh(&volume, nmax, reg)?;
            let mut centers = String::from("x,y,z\n");
            for c in interior_voxels(&mask, radius) {
                centers.push_str(&format!("{},{},{}\n", c[0], c[1], c[2]));
            }
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            sh.to_container()?.write(&out.join("sh.dcb"))?;
            write_atomic(&out.join("centers.csv"), centers.as_bytes())?;
        }
        Command::Metrics { input, mask, out } => {
            let volume = DcbContainer::read(&input)?;
            let mask = RoiMask::read(&mask)?;
            let rows = voxel_metrics(&volume, &mask)?;
            write_atomic(&out, metrics_csv(&rows).as_bytes())?;
        }
        Command::Train {
            manifest,
            roi,
            config,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), cli.seed)?;
            let subjects = load_subjects(&manifest)?;
            log::info!("{} parameters", param_count(&cfg.network)?.total);
            let (model, history) = train_model(&subjects, &roi, &cfg)?;
            model.write(&out)?;
            write_atomic(&sibling(&out, "_history.csv"), history_csv(&history).as_bytes())?;
        }
        Command::Predict {
            model,
            input,
            mask,
            out,
        } => {
            let model = ModelFile::read(&model)?;
            let volume = DcbContainer::read(&input)?;
            let mask = RoiMask::read(&mask)?;
            let map = predict_map(&model.params, &volume, &mask)?;
            let slices = export_psic(&map, &out)?;
            log::info!("wrote {} and {} slice images", out.display(), slices.len());
        }
        Command::Evaluate {
            manifest,
            config,
            psic_dir,
            out,
        } => {
            let cfg = pipeline_config(config.as_deref(), cli.seed)?;
            let subjects = load_subjects(&manifest)?;
            let result = evaluate(&subjects, &cfg)?;
            if let Some(dir) = psic_dir {
                for (roi, id, map) in &result.psic {
                    let d = dir.join(roi);
                    std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
                    export_psic(map, &d.join(format!("{id}.dcb")))?;
                }
            }
            write_atomic(&sibling(&out, ".json"), result.report.json().as_bytes())?;
            write_atomic(&out, result.report.csv().as_bytes())?;
            print!("{}", result.report.csv());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    run(cli)
}
