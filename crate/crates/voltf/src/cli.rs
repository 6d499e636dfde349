//! Command line interface.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. All
//! diagnostics go to standard error.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use voltf_core::autoplace::{
    autoplace_filters, learning_curve, load_dataset, save_dataset, synthetic_cases, synthetic_dataset,
    TrainingSample,
};
use voltf_core::histogram::{render_histogram_image, REDUCED_LEN};
use voltf_core::neural::{load_model, save_model, train, Pair, TrainConfig, TrainMode};
use voltf_core::png::{encode_gray, encode_rgb, encode_rgba};
use voltf_core::renderer::{Camera, RenderSettings, Shading};
use voltf_core::transfer_function::{rasterize, FilterSpec};
use voltf_core::volume::{make_phantom, PhantomSpec, Volume};

use crate::service::DEFAULT_MAX_VOXELS;
use crate::store::Store;
use crate::Prepared;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "voltf", version, about = "Semi-automatic 2D transfer functions for volume rendering")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Batch,
    Online,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Batch => TrainMode::Batch,
            ModeArg::Online => TrainMode::Online,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ShadingArg {
    None,
    Lambert,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Learning rate
    #[arg(long, default_value_t = 0.2)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "batch")]
    pub mode: ModeArg,
    /// Maximum number of epochs
    #[arg(long, default_value_t = 5000)]
    pub epochs: usize,
    /// Stop once the training MSE falls below this value
    #[arg(long, default_value_t = 1e-4)]
    pub error_limit: f64,
    /// Seed for weight initialization and sample shuffling
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hidden layer size
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            mode: self.mode.into(),
            max_epochs: self.epochs,
            error_limit: self.error_limit,
            shuffle_seed: self.seed,
            init_seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom volume
    Phantom {
        #[arg(long)]
        spec: PathBuf,
        /// Output prefix; writes <prefix>.json and <prefix>.raw
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the joint attenuation / gradient-magnitude histogram
    Histogram {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Rasterize a filter list into an RGBA lookup-table image
    Lut {
        #[arg(long)]
        filters: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic training set of heart-like phantoms
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Phantom edge length in voxels
        #[arg(long, default_value_t = 32)]
        edge: usize,
        /// Also write each phantom volume into this directory
        #[arg(long)]
        phantoms: Option<PathBuf>,
    },
    /// Train a filter-placement network
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Continue training an existing model
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict filters for a volume
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a classified volume
    Render {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        filters: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        step: f64,
        #[arg(long, value_enum, default_value = "none")]
        shading: ShadingArg,
    },
    /// Learning-curve experiment over 2, 4, 6, 8 and 10 training samples
    Curve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the HTTP service
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "VOLTF_DATA")]
        data: PathBuf,
        #[arg(long, env = "VOLTF_MAX_VOXELS", default_value_t = DEFAULT_MAX_VOXELS)]
        max_voxels: usize,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_volume(prefix: &Path) -> anyhow::Result<Volume> {
    Volume::read(prefix).with_context(|| format!("loading volume {}", prefix.display()))
}

/// Standard render settings for the CLI flags.
pub fn cli_settings(step: f64, shading: ShadingArg) -> RenderSettings {
    RenderSettings {
        step_size: step,
        shading: match shading {
            ShadingArg::None => Shading::None,
            ShadingArg::Lambert => Shading::Lambert,
        },
        ..RenderSettings::default()
    }
}

fn placement_pairs(samples: &[TrainingSample]) -> Vec<Pair<'_>> {
    samples.iter().map(TrainingSample::as_pair).collect()
}

/// Runs a parsed command.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Phantom { spec, out } => {
            let spec: PhantomSpec = read_json(&spec)?;
            let v = make_phantom(&spec)?;
            v.write(&out)?;
            eprintln!("wrote {:?} phantom to {}", v.dims(), out.display());
        }
        Command::Histogram { volume, out, image } => {
            let p = Prepared::new(read_volume(&volume)?);
            write_file(&out, p.histogram.to_json())?;
            if let Some(image) = image {
                write_file(&image, encode_gray(&render_histogram_image(&p.histogram)))?;
            }
            eprintln!(
                "histogram of {} voxels, gradient scale {:.4e}",
                p.histogram.total(),
                p.histogram.gradient_scale()
            );
        }
        Command::Lut { filters, out } => {
            let filters: Vec<FilterSpec> = read_json(&filters)?;
            write_file(&out, encode_rgba(&rasterize(&filters)?.to_image()))?;
        }
        Command::Synth {
            out,
            count,
            seed,
            edge,
            phantoms,
        } => {
            if edge < 8 {
                bail!("edge must be at least 8 voxels");
            }
            let samples = synthetic_dataset(count, seed, edge)?;
            save_dataset(&out, &samples)?;
            if let Some(dir) = phantoms {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (i, case) in synthetic_cases(count, seed, edge).iter().enumerate() {
                    make_phantom(&case.phantom)?.write(&dir.join(format!("phantom_{i:03}")))?;
                    write_file(
                        &dir.join(format!("phantom_{i:03}.filters.json")),
                        serde_json::to_string_pretty(&voltf_core::transfer_function::heart_preset(case.filters))?,
                    )?;
                }
            }
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            data,
            out,
            train: args,
            resume,
        } => {
            let samples = load_dataset(&data)?;
            let cfg = args.config();
            let net = match resume {
                Some(path) => {
                    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                    load_model(&bytes).with_context(|| format!("loading {}", path.display()))?
                }
                None => cfg.init_network(&[REDUCED_LEN, args.hidden, 8])?,
            };
            let (net, report) = train(net, &placement_pairs(&samples), None, &cfg)?;
            write_file(&out, save_model(&net))?;
            eprintln!(
                "trained on {} samples: {} epochs, final mse {:.4e} ({:?})",
                samples.len(),
                report.epochs_run,
                report.final_train_mse(),
                report.stop_reason
            );
        }
        Command::Predict { model, volume, out } => {
            let bytes = fs::read(&model).with_context(|| format!("reading {}", model.display()))?;
            let net = load_model(&bytes)?;
            let p = Prepared::new(read_volume(&volume)?);
            let filters = autoplace_filters(&net, &p.histogram)?;
            write_file(&out, serde_json::to_string_pretty(&filters)?)?;
        }
        Command::Render {
            volume,
            filters,
            camera,
            out,
            step,
            shading,
        } => {
            let p = Prepared::new(read_volume(&volume)?);
            let filters: Vec<FilterSpec> = read_json(&filters)?;
            let camera: Camera = read_json(&camera)?;
            write_file(&out, p.render_png(&filters, &camera, &cli_settings(step, shading))?)?;
        }
        Command::Curve {
            data,
            out,
            plot,
            train: args,
        } => {
            let samples = load_dataset(&data)?;
            let curve = learning_curve(&samples, &[REDUCED_LEN, args.hidden, 8], &args.config())?;
            write_file(&out, curve.to_csv())?;
            write_file(&plot, encode_rgb(&curve.plot()))?;
            for p in &curve.points {
                eprintln!("n={:>2} train_mse={:.4e} val_mse={:.4e}", p.n, p.train_mse, p.val_mse);
            }
        }
        Command::Serve { port, data, max_voxels } => {
            let store = Store::open(&data).with_context(|| format!("opening data dir {}", data.display()))?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(crate::service::serve(store, port, max_voxels))?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DATA
        }
    }
}
