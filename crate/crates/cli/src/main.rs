use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contextalign::data::{ingest_imagecode, read_dataset, write_dataset, DatasetEntry, TokenMap};
use contextalign::eval::{evaluate, mask_dump, mask_overlap, EvalMode};
use contextalign::pipeline::{sensitivity_grid, synthetic_splits, GridAxis};
use contextalign::training::checkpoint::Checkpoint;
use contextalign::training::config::RunConfig;
use contextalign::training::{run_stage, transplant, LogRecord, MaskSettings, Observer};
use contextalign::{Error, Model, ParamGroup, Result};

#[derive(Parser)]
#[command(name = "contextalign", version, about = "Text-guided masked adapter training for contextual image retrieval")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Settings file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Extra `key=value` setting, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and held-out splits.
    Gen,
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=3))]
        stage: u8,
        /// Checkpoint of the previous stage.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Dataset directory; the synthetic training split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out sets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// zeroshot, match or finetuned; chosen from the checkpoint stage when omitted.
        #[arg(long)]
        mode: Option<EvalMode>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Instances used for the mask-cue overlap of stage-1 checkpoints.
        #[arg(long, default_value_t = 200)]
        overlap: usize,
    },
    /// Sensitivity grid over one adapter setting.
    Grid {
        #[arg(long)]
        axis: GridAxis,
        /// Grid value; repeat for several. The published grid when omitted.
        #[arg(long = "value")]
        values: Vec<String>,
    },
    /// Write golden images with their text-guided mask applied.
    Maskdump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        limit: usize,
    },
    /// Convert an IMAGECODE-style directory into a dataset.
    Ingest {
        /// Directory holding `images/<set>/img<k>.ppm`.
        #[arg(long)]
        root: PathBuf,
        /// JSON file mapping set names to `{index: description}`.
        #[arg(long)]
        split: PathBuf,
        /// Word-to-id table, one `word id` pair per line.
        #[arg(long)]
        tokens: PathBuf,
    },
}

/// Writes log records as JSON lines and epoch summaries to stderr.
struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
    failed: Option<std::io::Error>,
}

impl JsonlLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path,
            failed: None,
        })
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Observer for JsonlLog {
    fn record(&mut self, r: &LogRecord) {
        if self.failed.is_none() {
            if let Err(e) = writeln!(self.out, "{}", r.to_json()) {
                self.failed = Some(e);
            }
        }
    }

    fn epoch(&mut self, stage: u8, epoch: usize, mean_loss: f64) {
        eprintln!("stage {stage} epoch {epoch}: mean loss {mean_loss:.6}");
    }
}

struct Progress;

impl Observer for Progress {
    fn epoch(&mut self, stage: u8, epoch: usize, mean_loss: f64) {
        eprintln!("stage {stage} epoch {epoch}: mean loss {mean_loss:.6}");
    }
}

fn settings(global: &Global, checkpoint: Option<&Checkpoint>) -> Result<RunConfig> {
    let mut cfg = match (&global.config, checkpoint) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ck)) => {
            let mut c = RunConfig::default();
            for (k, v) in &ck.config {
                c.set(k, v)?;
            }
            c
        }
        (None, None) => RunConfig::default(),
    };
    for kv in &global.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("`--set {kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(ck: &Checkpoint, cfg: &RunConfig) -> Result<Model<f32>> {
    let adapted = ck.tensors.iter().any(|t| t.group == ParamGroup::Adapter);
    let arch = if adapted { cfg.arch() } else { cfg.arch().without_adapter() };
    ck.restore(arch)
}

fn dataset(dir: Option<&Path>, cfg: &RunConfig, held_out: bool) -> Result<Vec<DatasetEntry>> {
    match dir {
        Some(d) => read_dataset(d),
        None => {
            let (train, eval) = synthetic_splits(cfg)?;
            Ok(if held_out { eval } else { train })
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(global: &Global, stage: u8, from: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let previous = from.map(Checkpoint::load).transpose()?;
    let cfg = settings(global, previous.as_ref())?;
    let model = match (stage, &previous) {
        (0, _) => Model::new(cfg.arch().without_adapter(), cfg.seed)?,
        (_, None) => return Err(Error::Usage(format!("stage {stage} needs --from <checkpoint>"))),
        (_, Some(ck)) => {
            let expected: &[u8] = match stage {
                1 => &[0],
                2 if cfg.adapter => &[1],
                2 => &[0],
                _ => &[2],
            };
            if !expected.contains(&ck.stage) {
                return Err(Error::Usage(format!(
                    "stage {stage} continues from a stage {} checkpoint, got stage {}",
                    expected[0], ck.stage
                )));
            }
            if stage == 1 && !cfg.adapter {
                return Err(Error::Config("stage 1 trains the adapter, but `adapter = false`".into()));
            }
            let loaded = load_model(ck, &cfg)?;
            let arch = if cfg.adapter { cfg.arch() } else { cfg.arch().without_adapter() };
            transplant(&cfg, arch, &loaded)?
        }
    };
    let entries = dataset(data, &cfg, false)?;
    create_dir(&global.out)?;
    let mut log = JsonlLog::create(global.out.join(format!("stage{stage}.log.jsonl")))?;
    let outcome = run_stage(stage, &cfg, &entries, model, &mut log)?;
    log.finish()?;
    let path = global.out.join(format!("stage{stage}.ckpt"));
    Checkpoint::from_model(&outcome.model, stage, &outcome.rng, cfg.entries()).save(&path)?;
    println!("{} ({} steps)", path.display(), outcome.steps);
    Ok(())
}

fn eval(global: &Global, checkpoint: &Path, mode: Option<EvalMode>, data: Option<&Path>, overlap: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = settings(global, Some(&ck))?;
    let model = load_model(&ck, &cfg)?;
    let mode = mode.unwrap_or(match ck.stage {
        0 | 1 => EvalMode::ZeroShot,
        2 => EvalMode::Match,
        _ => EvalMode::Finetuned,
    });
    let entries = dataset(data, &cfg, true)?;
    let overlap = if ck.stage == 1 && overlap > 0 {
        let settings = MaskSettings {
            ratio: cfg.mask_ratio,
            reduction: cfg.attention_reduction,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        mask_overlap(&model, &entries, settings, overlap, &mut rng)?
    } else {
        None
    };
    let report = evaluate(&model, &entries, mode, cfg.seed, cfg.fingerprint(), overlap)?;
    create_dir(&global.out)?;
    let path = global.out.join(format!("metrics_{mode}.txt"));
    report.save(&path)?;
    println!(
        "{}: accuracy {:.6} (video {:.6}, static {:.6})",
        path.display(),
        report.accuracy_all,
        report.accuracy_video,
        report.accuracy_static
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Gen => {
            let cfg = settings(g, None)?;
            let (train, eval) = synthetic_splits(&cfg)?;
            for (name, split) in [("train", &train), ("eval", &eval)] {
                let dir = g.out.join(name);
                create_dir(&dir)?;
                write_dataset(split, &dir)?;
                println!("{} ({} sets)", dir.display(), split.len());
            }
        }
        Command::Train { stage, from, data } => train(g, stage, from.as_deref(), data.as_deref())?,
        Command::Eval {
            checkpoint,
            mode,
            data,
            overlap,
        } => eval(g, &checkpoint, mode, data.as_deref(), overlap)?,
        Command::Grid { axis, values } => {
            let cfg = settings(g, None)?;
            let values = if values.is_empty() {
                axis.default_values(cfg.model.vit_depth)
            } else {
                values
            };
            let (train, held_out) = synthetic_splits(&cfg)?;
            let table = sensitivity_grid(&cfg, axis, &values, &train, &held_out, &mut Progress)?;
            create_dir(&g.out)?;
            let path = g.out.join(format!("grid_{axis}.tsv"));
            write_file(&path, &table.to_text())?;
            print!("{}", table.to_text());
        }
        Command::Maskdump {
            checkpoint,
            data,
            limit,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if ck.stage == 0 {
                return Err(Error::Usage("mask dumps need a stage 1 or later checkpoint".into()));
            }
            let cfg = settings(g, Some(&ck))?;
            let model = load_model(&ck, &cfg)?;
            let entries = dataset(data.as_deref(), &cfg, true)?;
            let subset = &entries[..limit.min(entries.len())];
            let settings = MaskSettings {
                ratio: cfg.mask_ratio,
                reduction: cfg.attention_reduction,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let items = mask_dump(&model, subset, settings, &g.out, &mut rng)?;
            for item in items {
                match item.overlap {
                    Some(o) => println!("{} masked {:?} overlap {o:.6}", item.set_id, item.masked),
                    None => println!("{} masked {:?}", item.set_id, item.masked),
                }
            }
        }
        Command::Ingest { root, split, tokens } => {
            let cfg = settings(g, None)?;
            let map = TokenMap::load(&tokens)?;
            let entries = ingest_imagecode(&root, &split, &map, cfg.model.max_tokens)?;
            create_dir(&g.out)?;
            write_dataset(&entries, &g.out)?;
            println!("{} ({} sets)", g.out.display(), entries.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
