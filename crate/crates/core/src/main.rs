use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;

use dir3d::data::{load_dataset, write_synth, Dataset, SynthSpec, Windowing};
use dir3d::evaluation::{run_cross_database, run_subject_independent, ProtocolOptions};
use dir3d::gradcheck::{check_model, random_inputs, GradCheckConfig};
use dir3d::landmark::{rasterize_weight_map, read_landmark_csv, rescale_landmarks, temporal_source};
use dir3d::layers::Mode;
use dir3d::model::{format_trace, TraceRow};
use dir3d::training::{derived_rng, load_checkpoint, save_checkpoint, MetricsLog, Trainer};
use dir3d::{Error, Network, Result, RunConfig, Tape};

/// Landmark-weighted 3D Inception-ResNet + LSTM video expression classifier.
///
/// Frames are read as PGM/PPM only. Convert other formats first, for
/// example `ffmpeg -i clip.mp4 frames/%04d.pgm` or ImageMagick's `convert`.
#[derive(Parser)]
#[command(name = "dir3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: reference, toy or tiny.
    #[arg(long)]
    preset: Option<String>,
    /// Override one config key, e.g. `--set mask.enabled=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, default_preset: &str) -> Result<RunConfig> {
        let mut text = match (&self.config, &self.preset) {
            (Some(p), _) => fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?,
            (None, Some(name)) => format!("preset = {name}\n"),
            (None, None) => format!("preset = {default_preset}\n"),
        };
        for o in &self.overrides {
            text.push('\n');
            text.push_str(o);
        }
        RunConfig::parse(&text)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on a manifest, checkpointing after every epoch.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Hold out this fraction of subjects for validation; the best
        /// epoch by validation accuracy is saved as best.ckpt.
        #[arg(long, default_value_t = 0.0)]
        val_fraction: f64,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// k-fold cross-validation with subjects kept disjoint between train and test.
    EvalSubjectIndependent {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        /// Evaluate only the first N folds (one fold of five approximates a
        /// random 20% subject holdout).
        #[arg(long)]
        max_folds: Option<usize>,
        /// Train folds concurrently; results are unchanged.
        #[arg(long)]
        parallel_folds: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Train on every database but one, test on the held-out database.
    EvalCrossDatabase {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Repeatable; samples carry their database id from the manifest.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        test_database: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
    /// Write a synthetic dataset: PGM frames, landmark CSVs and manifest.json.
    GenSynth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 30)]
        videos_per_class: usize,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        frames: usize,
        /// Frame size, HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_hw)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        distractors: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value = "synth")]
        database: String,
        /// sliding or last_ten.
        #[arg(long, default_value = "last_ten", value_parser = parse_windowing)]
        windowing: Windowing,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Render landmark weight maps as PGM images at the masked stages'
    /// resolutions.
    MaskPreview {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Landmark CSV, one row per frame.
        #[arg(long)]
        landmarks: PathBuf,
        /// Source frame size HxW; defaults to the config's input size.
        #[arg(long, value_parser = parse_hw)]
        source: Option<(usize, usize)>,
        /// Raster size HxW instead of the masked stages' feature maps.
        #[arg(long, value_parser = parse_hw)]
        resolution: Option<(usize, usize)>,
        #[arg(long, default_value = "masks")]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter gradient at 64-bit.
    GradCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Coordinates per parameter tensor; 0 checks all.
        #[arg(long, default_value_t = 0)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the per-stage tensor sizes of a config.
    ShapeTrace {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also run one forward pass and check it against the table.
        #[arg(long)]
        execute: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|_| "bad height")?;
    let w = w.trim().parse().map_err(|_| "bad width")?;
    Ok((h, w))
}

fn parse_windowing(s: &str) -> std::result::Result<Windowing, String> {
    match s {
        "sliding" => Ok(Windowing::Sliding),
        "last_ten" => Ok(Windowing::LastTen),
        _ => Err(format!("unknown windowing {s:?}")),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })
}

fn write(p: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(p, body).map_err(|e| Error::Io {
        path: p.into(),
        source: e,
    })
}

fn load(manifest: &Path, config: &mut RunConfig) -> Result<Dataset> {
    let m = &config.model;
    let data = load_dataset(manifest, (m.height, m.width))?;
    let k = data.labels.values().max().map_or(0, |v| v + 1);
    if k != config.model.num_classes {
        eprintln!("note: classes set to {k} from {}", manifest.display());
        config.model.num_classes = k;
    }
    if let Some(s) = data.samples.first() {
        let c = s.clip.shape()[3];
        if c != config.model.channels {
            return Err(Error::Config {
                stage: "input.channels".into(),
                msg: format!("manifest frames have {c} channels"),
            });
        }
    }
    Ok(data)
}

fn train(
    cfg: &ConfigArgs,
    manifest: &Path,
    val_fraction: f64,
    resume: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut config = cfg.load("toy")?;
    let data = load(manifest, &mut config)?;
    create_dir(out)?;
    write(&out.join("config.cfg"), config.to_text())?;

    let (train, val) = if val_fraction > 0.0 {
        let mut subjects: Vec<&String> = data
            .samples
            .iter()
            .map(|s| &s.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if subjects.len() < 2 {
            return Err(Error::Data("validation split needs at least two subjects".into()));
        }
        subjects.shuffle(&mut derived_rng(&[seed, 0x76616c]));
        let n = ((subjects.len() as f64 * val_fraction).round() as usize).clamp(1, subjects.len() - 1);
        let held: Vec<&String> = subjects[..n].to_vec();
        let (v, t): (Vec<_>, Vec<_>) = data.samples.iter().cloned().partition(|s| held.contains(&&s.subject_id));
        (t, Some(v))
    } else {
        (data.samples.clone(), None)
    };

    let mut trainer = match resume {
        Some(p) => Trainer::<f32>::resume(config, load_checkpoint(p)?)?,
        None => Trainer::<f32>::new(config, seed)?,
    };
    let log = MetricsLog::append_to(&out.join("metrics.csv"))?;
    let ckpt = out.join("last.ckpt");
    let summary = trainer.fit_with(&train, val.as_deref(), Some(&log), |t, m| {
        println!("epoch {:>4}  loss {:.4}  accuracy {:.4}", m.epoch, m.mean_loss, m.accuracy);
        save_checkpoint(&ckpt, &t.checkpoint())
    })?;
    if let Some(a) = summary.train_accuracy {
        println!("eval-mode training accuracy {a:.4}");
    }
    if let Some(best) = &trainer.best {
        println!("best validation accuracy {:.4} at epoch {}", best.accuracy, best.epoch);
        let mut snapshot = trainer.checkpoint();
        snapshot.params = best.params.clone();
        snapshot.epoch = best.epoch;
        save_checkpoint(&out.join("best.ckpt"), &snapshot)?;
    }
    Ok(())
}

fn mask_preview(
    cfg: &ConfigArgs,
    landmarks: &Path,
    source: Option<(usize, usize)>,
    resolution: Option<(usize, usize)>,
    out: &Path,
) -> Result<()> {
    let config = cfg.load("toy")?;
    let source = source.unwrap_or((config.model.height, config.model.width));
    let frames: Vec<_> = read_landmark_csv(landmarks, source)?.into_iter().map(|(_, f)| f).collect();
    if frames.is_empty() {
        return Err(Error::Data(format!("{} has no landmark rows", landmarks.display())));
    }
    create_dir(out)?;
    let targets: Vec<(String, [usize; 4])> = match resolution {
        Some((h, w)) => vec![("custom".into(), [frames.len(), h, w, 1])],
        None => {
            let net = Network::new(config.model.clone())?;
            ["block_a.0", "block_b.0"]
                .iter()
                .filter_map(|s| net.stage_shape(s).map(|sh| (s.to_string(), [sh[0], sh[1], sh[2], sh[3]])))
                .collect()
        }
    };
    for (stage, shape) in targets {
        let t_out = shape[0].min(frames.len());
        for t in 0..t_out {
            let src = temporal_source(t, frames.len(), t_out);
            let cells = rescale_landmarks(&frames[src], (shape[1], shape[2]))?;
            let map = rasterize_weight_map(&cells, (shape[1], shape[2]), &config.model.mask)?;
            write(&out.join(format!("{stage}_t{t:02}_frame{src:02}.pgm")), map.to_pgm())?;
        }
        println!("{stage}: {t_out} maps of {}x{}", shape[1], shape[2]);
    }
    Ok(())
}

fn grad_check(cfg: &ConfigArgs, seeds: u64, per_tensor: usize, tolerance: f64, seed: u64) -> Result<bool> {
    let config = cfg.load("tiny")?;
    let opts = GradCheckConfig {
        per_tensor: (per_tensor > 0).then_some(per_tensor),
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for s in seed..seed + seeds {
        let r = check_model(&config.model, s, &opts)?;
        let worst = r.worst();
        let pass = r.max_rel_error() < tolerance;
        ok &= pass;
        println!(
            "seed {s}: {} coordinates, {} skipped at kinks, max relative error {:.3e}{} {}",
            r.checks.len(),
            r.skipped,
            r.max_rel_error(),
            worst.map_or(String::new(), |w| format!(" ({}[{}])", w.tensor, w.index)),
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn shape_trace(cfg: &ConfigArgs, execute: bool, seed: u64) -> Result<bool> {
    let config = cfg.load("reference")?;
    let net = Network::new(config.model.clone())?;
    print!("{}", format_trace(net.shape_trace()));
    println!("parameters: {}", net.param_count());
    if !execute {
        return Ok(true);
    }
    let params = net.init_params::<f32>(seed);
    let (clips, landmarks, _) = random_inputs(&config.model, 1, seed)?;
    let refs: Vec<&[_]> = landmarks.iter().map(Vec::as_slice).collect();
    let tape = Tape::new();
    let vars = dir3d::layers::register(&tape, params.as_map());
    let mut executed: Vec<TraceRow> = Vec::new();
    let mut rng = derived_rng(&[seed]);
    net.forward_traced(&tape, &vars, &clips.cast(), &refs, Mode::Eval, &mut rng, &mut executed)?;
    let same = executed == net.shape_trace();
    println!("executed forward {} the table", if same { "matches" } else { "DIFFERS from" });
    if !same {
        print!("{}", format_trace(&executed));
    }
    Ok(same)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            cfg,
            manifest,
            val_fraction,
            resume,
            seed,
            out,
        } => train(&cfg, &manifest, val_fraction, resume.as_deref(), seed, &out).map(|_| true),
        Command::EvalSubjectIndependent {
            cfg,
            manifest,
            folds,
            max_folds,
            parallel_folds,
            seed,
            out,
        } => {
            let mut config = cfg.load("toy")?;
            let data = load(&manifest, &mut config)?;
            let opts = ProtocolOptions {
                k: folds,
                seed,
                max_folds,
                parallel_folds,
                log_dir: Some(out.clone()),
            };
            let report = run_subject_independent(&data, &config, &opts)?;
            report.write_to(&out)?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::EvalCrossDatabase {
            cfg,
            manifest,
            test_database,
            seed,
            out,
        } => {
            let config = cfg.load("toy")?;
            let (h, w) = (config.model.height, config.model.width);
            let datasets = manifest
                .iter()
                .map(|m| load_dataset(m, (h, w)))
                .collect::<Result<Vec<_>>>()?;
            create_dir(&out)?;
            let report = run_cross_database(&datasets, &test_database, &config, seed, Some(&out.join("metrics.csv")))?;
            for n in &report.notes {
                eprintln!("note: {n}");
            }
            report.write_to(&out)?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::GenSynth {
            classes,
            videos_per_class,
            subjects,
            frames,
            size,
            distractors,
            noise,
            database,
            windowing,
            seed,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                videos_per_class,
                subjects,
                frames,
                height: size.0,
                width: size.1,
                distractors,
                noise,
                seed,
                database,
                windowing,
            };
            let path = write_synth(&spec, &out)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
        Command::MaskPreview {
            cfg,
            landmarks,
            source,
            resolution,
            out,
        } => mask_preview(&cfg, &landmarks, source, resolution, &out).map(|_| true),
        Command::GradCheck {
            cfg,
            seeds,
            per_tensor,
            tolerance,
            seed,
        } => grad_check(&cfg, seeds, per_tensor, tolerance, seed),
        Command::ShapeTrace { cfg, execute, seed } => shape_trace(&cfg, execute, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
