mod config;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ssmradnet::bench::{measure_latency, ComputeReport, LatencyMode};
use ssmradnet::dataset::{read_dataset, write_scenes, DatasetReader};
use ssmradnet::model::{checkpoint, forward_frame, BevMaps, ModelConfig, ParamStore};
use ssmradnet::sim::{synthesize_frame, Dims, Scene};
use ssmradnet::stream::{Event, StreamSession};
use ssmradnet::train::eval::thread_cap;
use ssmradnet::train::export::write_pgm;
use ssmradnet::train::{evaluate, RunFiles, Trainer};
use ssmradnet::Error;

use config::{BenchMode, RunConfig};

#[derive(Parser)]
#[command(
    name = "ssmradnet",
    version,
    about = "Streaming SSM segmentation of raw radar samples"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `section.key = value` file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override, e.g. `--set train.epochs=5`. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(RunConfig::parse(&text, &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ADCC dataset.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write config.echo, checkpoint.ssmc and log.csv to the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print an evaluation report for a checkpoint on a dataset.
    Eval {
        /// When given, the checkpoint's model config must match it.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write one PGM mask per frame into `<run_dir>/masks/`.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Replay every frame tick by tick through a streaming session.
        #[arg(long, conflicts_with = "batch")]
        stream: bool,
        /// Whole-frame forward (the default).
        #[arg(long)]
        batch: bool,
    },
    /// Parameter and MAC counts plus measured latency.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Measure this checkpoint instead of freshly initialised weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// key=value report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the header of a checkpoint or dataset file.
    Inspect { path: PathBuf },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Format { .. }) => 3,
        Some(Error::Numerical(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate { cfg, frames, out } => simulate(&cfg.load()?, frames, &out),
        Command::Train {
            cfg,
            train,
            val,
            run_dir,
        } => train_cmd(&cfg.load()?, &train, val.as_deref(), &run_dir),
        Command::Eval { cfg, checkpoint, data } => {
            let (model, params) = load_checkpoint(&cfg, &checkpoint)?;
            let samples = read_dataset(&data)?;
            print!("{}", evaluate(&params, &model, &samples, thread_cap())?);
            Ok(())
        }
        Command::Infer {
            cfg,
            checkpoint,
            data,
            run_dir,
            stream,
            batch: _,
        } => infer(&cfg, &checkpoint, &data, &run_dir, stream),
        Command::Bench { cfg, checkpoint, out } => bench(&cfg.load()?, checkpoint.as_deref(), out.as_deref()),
        Command::Inspect { path } => inspect(&path),
    }
}

fn scenes(rc: &RunConfig, n: usize) -> Vec<Scene> {
    let m = &rc.model;
    let dims = Dims::new(m.chirps_per_frame, m.s_per_chirp, m.n_rx);
    let mut rng = ChaCha8Rng::seed_from_u64(rc.sim.seed);
    (0..n)
        .map(|_| Scene::random(&mut rng, dims, (rc.sim.min_targets, rc.sim.max_targets), rc.sim.snr_db))
        .collect()
}

fn simulate(rc: &RunConfig, frames: usize, out: &Path) -> anyhow::Result<()> {
    let scenes = scenes(rc, frames);
    write_scenes(out, &scenes, rc.model.output_grid()).with_context(|| format!("writing {}", out.display()))?;
    for (i, s) in scenes.iter().enumerate() {
        println!("frame {i}: {} targets", s.targets().len());
    }
    Ok(())
}

fn train_cmd(rc: &RunConfig, train: &Path, val: Option<&Path>, run_dir: &Path) -> anyhow::Result<()> {
    let train = read_dataset(train)?;
    let val = match val {
        Some(p) => read_dataset(p)?,
        None => Vec::new(),
    };
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.echo"), rc.echo())?;
    let files = RunFiles {
        checkpoint: run_dir.join("checkpoint.ssmc"),
        log_csv: run_dir.join("log.csv"),
    };
    let params = ParamStore::<f32>::init(&rc.model);
    let trainer = Trainer::new(&rc.model, &rc.train, params, &train)?.with_eval_threads(thread_cap());
    let outcome = trainer.run(&val, Some(&files), |e| println!("{}", e.csv_row()))?;
    println!("best_epoch={}", outcome.best_epoch);
    if let Some(r) = outcome.best_report {
        print!("{r}");
    }
    Ok(())
}

/// The checkpoint's own config, or an error listing the keys that differ
/// from an explicitly given run config.
fn load_checkpoint(cfg: &ConfigArgs, path: &Path) -> anyhow::Result<(ModelConfig, ParamStore<f32>)> {
    if cfg.config.is_none() && cfg.overrides.is_empty() {
        return Ok(checkpoint::load(path)?);
    }
    let model = cfg.load()?.model;
    let params = checkpoint::load_matching(path, &model)?;
    Ok((model, params))
}

fn infer(cfg: &ConfigArgs, ckpt: &Path, data: &Path, run_dir: &Path, stream: bool) -> anyhow::Result<()> {
    let (model, params) = load_checkpoint(cfg, ckpt)?;
    if !model.heads.segmentation {
        bail!(Error::Config("model has no segmentation head; nothing to write".into()));
    }
    let masks = run_dir.join("masks");
    fs::create_dir_all(&masks)?;
    let mut session = StreamSession::new(&params, &model)?;
    let mut written = 0usize;
    for (i, sample) in DatasetReader::open(data)?.enumerate() {
        let frame = sample?.frame;
        let maps: BevMaps<f32> = if stream {
            let mut out = None;
            for t in 0..frame.ticks() {
                if let Event::FrameOutput { maps, .. } = session.ingest_interleaved(frame.tick(t))? {
                    out = Some(maps);
                }
            }
            out.ok_or_else(|| Error::Format {
                offset: 0,
                msg: format!("frame {i} ended before the model's frame boundary"),
            })?
        } else {
            forward_frame(&frame, &params, &model)?
        };
        let mask = maps.seg_mask().expect("segmentation head present");
        write_pgm(&masks.join(format!("frame_{i:05}.pgm")), &mask, maps.h, maps.w)?;
        written += 1;
    }
    println!("wrote {written} masks to {}", masks.display());
    Ok(())
}

fn bench(rc: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let model = &rc.model;
    let params = match ckpt {
        Some(p) => checkpoint::load_matching(p, model)?,
        None => ParamStore::<f32>::init(model),
    };
    let mut report = ComputeReport::analytic(&params, model)?;
    let modes: &[LatencyMode] = match rc.bench.mode {
        BenchMode::None => &[],
        BenchMode::Batch => &[LatencyMode::Batch],
        BenchMode::Streaming => &[LatencyMode::Streaming],
        BenchMode::Both => &[LatencyMode::Batch, LatencyMode::Streaming],
    };
    if !modes.is_empty() {
        let inputs: Vec<_> = scenes(rc, 4).iter().map(synthesize_frame).collect();
        for &mode in modes {
            report
                .latency
                .push(measure_latency(&params, model, &inputs, rc.bench.frames, mode)?);
        }
    }
    print!("{report}");
    if let Some(out) = out {
        fs::write(out, report.to_kv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let mut magic = [0u8; 4];
    fs::File::open(path)?
        .read_exact(&mut magic)
        .map_err(|_| Error::Format {
            offset: 0,
            msg: "file shorter than a 4-byte magic".into(),
        })?;
    match &magic {
        m if m == checkpoint::MAGIC => {
            let (cfg, params) = checkpoint::load(path)?;
            println!("format=SSMC");
            println!("version={}", checkpoint::VERSION);
            print!("{}", cfg.to_kv());
            println!("entries={}", params.len());
            println!("elements={}", params.element_count());
            for (name, a) in params.iter() {
                println!("  {name} {:?}", a.shape());
            }
        }
        m if m == ssmradnet::dataset::MAGIC => {
            let reader = DatasetReader::open(path)?;
            println!("format=ADCC");
            println!("version={}", ssmradnet::dataset::VERSION);
            println!("frames={}", reader.frame_count);
            let mut shapes: Vec<(Dims, (usize, usize), usize)> = Vec::new();
            for s in reader {
                let s = s?;
                let key = (s.frame.dims, (s.labels.h, s.labels.w));
                match shapes.last_mut() {
                    Some(last) if (last.0, last.1) == key => last.2 += 1,
                    _ => shapes.push((key.0, key.1, 1)),
                }
            }
            for (d, (h, w), n) in shapes {
                println!(
                    "  {n} frames: C={} S={} N_Rx={} grid={h}x{w}",
                    d.chirps, d.samples, d.n_rx
                );
            }
        }
        _ => bail!(Error::Format {
            offset: 0,
            msg: format!("unrecognised magic {magic:?}"),
        }),
    }
    Ok(())
}
