use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use autofocus::autodiff::GradCheckOptions;
use autofocus::data::{self, NormMask, PhantomSpec, VolumeRecord};
use autofocus::loss::ClassMap;
use autofocus::models::{self, ArchOptions, ArchSpec, CountMode, Model};
use autofocus::train::{self, TrainConfig, Trainer, EVAL_OVERLAP};
use autofocus::verify;
use clap::{Parser, Subcommand, ValueEnum};

/// Autofocus network training, evaluation and inspection.
#[derive(Parser)]
#[command(name = "afn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Whole,
    Nonzero,
    None,
}

impl Norm {
    fn mask(self) -> Option<NormMask> {
        match self {
            Norm::Whole => Some(NormMask::Whole),
            Norm::Nonzero => Some(NormMask::Nonzero),
            Norm::None => None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Kernels,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; logs one JSON line per epoch.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Stop after this many optimizer steps in total.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Continue from the checkpoint in the config's output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Per-class dice of full-volume predictions as CSV.
    Eval {
        #[arg(short, long)]
        weights: PathBuf,
        #[arg(short, long)]
        manifest: PathBuf,
        /// Class names, one `name = label[,label]` per line.
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = EVAL_OVERLAP)]
        overlap: usize,
        #[arg(long, value_enum, default_value_t = Norm::Whole)]
        normalize: Norm,
    },
    /// Parameter counts per tensor as CSV.
    Params {
        /// Architecture name (basic, afn1..afn6, aspp-s, aspp-c) or JSON file.
        #[arg(short, long)]
        arch: String,
        #[arg(long, value_enum, default_value_t = Mode::Kernels)]
        mode: Mode,
    },
    /// Receptive field after every layer as CSV.
    Rf {
        #[arg(short, long)]
        arch: String,
    },
    /// Generate synthetic phantoms plus a manifest.
    GenPhantoms {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        n: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Write the attention maps of one autofocus layer as AFNV volumes.
    ExportAttention {
        #[arg(short, long)]
        weights: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        /// Layer name (`layer8`) or 1-based hidden-layer index.
        #[arg(short, long)]
        layer: String,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Norm::Whole)]
        normalize: Norm,
    },
    /// Finite-difference checks of every registered op and layer.
    Gradcheck {
        #[arg(long, default_value_t = verify::DEFAULT_SEEDS)]
        seeds: u64,
        /// Only run cases whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    autofocus::exec::init_from_env();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn arch_from_arg(arg: &str) -> Result<ArchSpec> {
    if arg.ends_with(".json") {
        let text = std::fs::read_to_string(arg).map_err(|e| format!("{arg}: {e}"))?;
        return Ok(ArchSpec::from_json(&text)?);
    }
    Ok(ArchSpec::by_name(arg, &ArchOptions::default())?)
}

fn load_volumes(manifest: &Path, model: &Model, norm: Norm) -> Result<Vec<VolumeRecord>> {
    let classes = model.arch().num_classes;
    let mut out = Vec::new();
    for p in data::read_manifest(manifest)? {
        out.push(prepare(VolumeRecord::read(&p)?, classes, norm)?);
    }
    Ok(out)
}

fn prepare(v: VolumeRecord, classes: usize, norm: Norm) -> Result<VolumeRecord> {
    let v = match norm.mask() {
        Some(m) => data::normalize(&v, m)?,
        None => v,
    };
    Ok(v.with_num_classes(classes)?)
}

/// Writes every line to stdout and a log file.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        io::stdout().flush()
    }
}

fn run(cmd: Command) -> Result<()> {
    let mut out = io::stdout().lock();
    match cmd {
        Command::Train { config, max_steps, resume } => {
            let cfg = TrainConfig::from_file(&config)?;
            let dir = cfg.data.out_dir.clone();
            std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
            let vols = cfg.load_volumes()?;
            let mut trainer = if resume {
                Trainer::resume(cfg, vols, &dir)?
            } else {
                Trainer::new(cfg, vols)?
            };
            let log = File::options().create(true).append(resume).write(true).truncate(!resume).open(dir.join("train_log.jsonl"))?;
            drop(out);
            let summary = trainer.run(&mut Tee(log), Some(&dir), max_steps)?;
            eprintln!(
                "trained {} steps ({} epochs), final epoch loss {:.5}{}; checkpoint in {}",
                summary.steps,
                summary.epochs,
                summary.final_loss,
                match summary.reached_target_at {
                    Some(s) => format!(", target reached at step {s}"),
                    None => String::new(),
                },
                dir.display()
            );
        }
        Command::Eval { weights, manifest, classes, window, overlap, normalize } => {
            let model = Model::load_with_arch(&weights)?;
            let vols = load_volumes(&manifest, &model, normalize)?;
            let map = match classes {
                Some(p) => Some(ClassMap::parse(&std::fs::read_to_string(&p)?, model.arch().num_classes)?),
                None => None,
            };
            let report = train::evaluate(&model, &vols, window, overlap, map.as_ref())?;
            write!(out, "{}", report.to_csv())?;
            eprintln!("{} volumes, mean foreground dice {:.4}", vols.len(), report.overall_mean);
        }
        Command::Params { arch, mode } => {
            let arch = arch_from_arg(&arch)?;
            let mode = match mode {
                Mode::Kernels => CountMode::Kernels,
                Mode::All => CountMode::All,
            };
            let table = arch.param_count(mode);
            write!(out, "{}", models::param_table_csv(&table))?;
            eprintln!("{}: {} parameters", arch.name, table.total());
        }
        Command::Rf { arch } => {
            let arch = arch_from_arg(&arch)?;
            let rows = models::receptive_field(&arch);
            writeln!(out, "layer,phi_min_z,phi_min_y,phi_min_x,phi_max_z,phi_max_y,phi_max_x")?;
            for r in &rows {
                let [a, b, c] = r.phi_min;
                let [d, e, f] = r.phi_max;
                writeln!(out, "{},{a},{b},{c},{d},{e},{f}", r.layer)?;
            }
            let hidden = rows.iter().rev().find(|r| r.layer.starts_with("layer")).unwrap_or(&rows[0]);
            eprintln!(
                "{}: receptive field {:?}..{:?} after {}",
                arch.name, hidden.phi_min, hidden.phi_max, hidden.layer
            );
        }
        Command::GenPhantoms { config, n, out: dir } => {
            let spec = PhantomSpec::from_toml(&std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?)?;
            let mut paths = Vec::new();
            for i in 0..n {
                let (vol, instances) = data::generate_phantom(&spec, i)?;
                let path = dir.join(format!("{}.afnv", vol.id));
                vol.write(&path)?;
                let line = serde_json::json!({ "id": vol.id, "path": path, "instances": instances });
                writeln!(out, "{line}")?;
                paths.push(path);
            }
            let manifest = dir.join("manifest.txt");
            data::write_manifest(&manifest, &paths)?;
            eprintln!("wrote {n} phantoms and {}", manifest.display());
        }
        Command::ExportAttention { weights, input, layer, out: dir, normalize } => {
            let model = Model::load_with_arch(&weights)?;
            let vol = prepare(VolumeRecord::read(&input)?, model.arch().num_classes, normalize)?;
            let paths = train::export_attention(&model, &vol, &layer, &dir)?;
            for p in &paths {
                writeln!(out, "{}", serde_json::json!({ "path": p }))?;
            }
            eprintln!("wrote {} attention maps to {}", paths.len(), dir.display());
        }
        Command::Gradcheck { seeds, filter, tolerance } => {
            let opts = GradCheckOptions { tolerance, ..GradCheckOptions::default() };
            let results = verify::run_all(filter.as_deref(), seeds, &opts)?;
            if results.is_empty() {
                return Err("no gradient check matches the filter".into());
            }
            for r in &results {
                writeln!(out, "{}", serde_json::to_string(r)?)?;
            }
            let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            let worst = results.iter().fold(0.0f64, |m, r| m.max(r.max_rel_error));
            eprintln!(
                "{} cases × {seeds} seeds, worst relative error {worst:.2e} (tolerance {tolerance:e})",
                results.len()
            );
            if !failed.is_empty() {
                return Err(format!("gradient check failed: {}", failed.join(", ")).into());
            }
        }
    }
    Ok(())
}
