use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{checkpoint_dir, latest_checkpoint, load_checkpoint, save_checkpoint, RngState, TrainState};
use super::config::Config;
use crate::data::{load_directory, make_toy_range, Batch, BatchPlan, Sample};
use crate::error::{Error, Result};
use crate::manipulation::ManipTrainer;
use crate::synthesis::SynthTrainer;
use crate::tensor::Tensor;

pub const LOSS_LOG: &str = "loss_log.csv";
pub const LOCK_FILE: &str = ".lock";

/// Salt for the augmentation rng, kept apart from the training streams.
const FLIP_SALT: u64 = 0x6f6c_6966;

pub enum Trainer {
    Manipulation(Box<ManipTrainer>),
    Synthesis(Box<SynthTrainer>),
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        Ok(match config {
            Config::Manipulation(c) => Trainer::Manipulation(Box::new(ManipTrainer::new(
                c.model.clone(),
                c.loss.clone(),
                c.optim,
                c.seed,
            )?)),
            Config::Synthesis(c) => Trainer::Synthesis(Box::new(SynthTrainer::new(
                c.model.clone(),
                c.loss.clone(),
                c.optim,
                c.seed,
            )?)),
        })
    }

    pub fn from_state(state: &TrainState) -> Result<Self> {
        let mut t = Self::new(&state.config)?;
        let map: BTreeMap<String, Tensor> = state.tensors.iter().cloned().collect();
        let rng = state.rng.restore()?;
        match &mut t {
            Trainer::Manipulation(m) => {
                m.load_tensors(&map, state.step)?;
                m.rng = rng;
            }
            Trainer::Synthesis(s) => {
                s.load_tensors(&map, state.step)?;
                s.rng = rng;
            }
        }
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        match self {
            Trainer::Manipulation(m) => m.step,
            Trainer::Synthesis(s) => s.step,
        }
    }

    pub fn train_step(&mut self, batches: &[Batch]) -> Result<Vec<(&'static str, f64)>> {
        Ok(match self {
            Trainer::Manipulation(m) => m.train_step(batches)?.fields(),
            Trainer::Synthesis(s) => s.train_step(batches)?.fields(),
        })
    }

    pub fn state(&self, config: &Config) -> TrainState {
        let (tensors, rng) = match self {
            Trainer::Manipulation(m) => (m.tensors(), &m.rng),
            Trainer::Synthesis(s) => (s.tensors(), &s.rng),
        };
        TrainState {
            config: config.clone(),
            step: self.step(),
            rng: RngState::capture(rng),
            tensors,
        }
    }
}

/// Training and test splits named by the config.
pub fn load_splits(config: &Config) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = config.dataset();
    if let Some(toy) = &d.toy {
        let spec = config.toy_spec(toy);
        let train = make_toy_range(&spec, 0, toy.train_size)?;
        let test = if toy.test_size > 0 {
            make_toy_range(&spec, toy.train_size, toy.test_size)?
        } else {
            Vec::new()
        };
        return Ok((train, test));
    }
    let dir = d
        .directory
        .as_ref()
        .ok_or_else(|| Error::Usage("config names no dataset".into()))?;
    let images = matches!(config, Config::Synthesis(_));
    let train = load_directory(&dir.root, config.num_classes(), &dir.columns, images)?;
    let test = match &dir.test_root {
        Some(root) => load_directory(root, config.num_classes(), &dir.columns, images)?,
        None => Vec::new(),
    };
    Ok((train, test))
}

/// Micro-batches for one update; flips are drawn per (seed, micro-batch).
pub fn step_batches(config: &Config, plan: &BatchPlan, samples: &[Sample], step: u64) -> Result<Vec<Batch>> {
    let acc = config.optim().accumulate as u64;
    let mut out = Vec::with_capacity(acc as usize);
    for j in 0..acc {
        let k = step * acc + j;
        if !config.dataset().flip {
            out.push(plan.batch(samples, k)?);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed() ^ FLIP_SALT);
        rng.set_stream(k);
        let picked: Vec<Sample> = plan
            .indices(k)
            .into_iter()
            .map(|i| {
                if rng.random::<bool>() {
                    samples[i].flip_horizontal()
                } else {
                    samples[i].clone()
                }
            })
            .collect();
        let refs: Vec<&Sample> = picked.iter().collect();
        out.push(Batch::from_samples(&refs)?);
    }
    Ok(out)
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run: &Path) -> Result<Self> {
        std::fs::create_dir_all(run).map_err(|e| Error::io(run, e))?;
        let path = run.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is held by another process (remove it if that process is gone)",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Appends rows; on resume, rows at or past the resume step are dropped
/// first so a replayed step is logged once.
struct LossLog {
    file: File,
    header_written: bool,
}

impl LossLog {
    fn open(run: &Path, from_step: u64) -> Result<Self> {
        let path = run.join(LOSS_LOG);
        let mut kept = String::new();
        if from_step > 0 {
            if let Ok(text) = std::fs::read_to_string(&path) {
                for (i, line) in text.lines().enumerate() {
                    let keep = i == 0
                        || line
                            .split(',')
                            .next()
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s < from_step);
                    if keep {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        std::fs::write(&path, &kept).map_err(|e| Error::io(&path, e))?;
        let file = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            file,
            header_written: !kept.is_empty(),
        })
    }

    fn row(&mut self, step: u64, fields: &[(&str, f64)]) -> Result<()> {
        let mut line = String::new();
        if !self.header_written {
            line.push_str("step");
            for (name, _) in fields {
                line.push(',');
                line.push_str(name);
            }
            line.push('\n');
            self.header_written = true;
        }
        line.push_str(&step.to_string());
        for (_, v) in fields {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| Error::Format(format!("writing the loss log: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub step: u64,
    pub last_checkpoint: Option<PathBuf>,
}

/// Fresh run into `run`; refuses a directory that already has checkpoints.
pub fn train(config: &Config, run: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let _lock = RunLock::acquire(run)?;
    if latest_checkpoint(run).is_some() {
        return Err(Error::Usage(format!(
            "{} already has checkpoints; use resume",
            run.display()
        )));
    }
    std::fs::write(run.join("config.toml"), config.to_toml_string()).map_err(|e| Error::io(run, e))?;
    let trainer = Trainer::new(config)?;
    run_loop(config, trainer, run, None)
}

/// Continues from a checkpoint directory (or the latest one in a run
/// directory). `steps` raises the total step budget.
pub fn resume(from: &Path, run: Option<&Path>, steps: Option<u64>) -> Result<TrainOutcome> {
    let ckpt = if from.join(super::checkpoint::MANIFEST).is_file() {
        from.to_path_buf()
    } else {
        latest_checkpoint(from).ok_or_else(|| Error::Usage(format!("no checkpoint under {}", from.display())))?
    };
    let mut state = load_checkpoint(&ckpt)?;
    if let Some(n) = steps {
        state.config.optim_mut().steps = n;
    }
    let run = match run {
        Some(r) => r.to_path_buf(),
        None => ckpt
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .ok_or_else(|| Error::Usage(format!("cannot infer the run directory of {}", ckpt.display())))?,
    };
    let _lock = RunLock::acquire(&run)?;
    let trainer = Trainer::from_state(&state)?;
    run_loop(&state.config, trainer, &run, Some(ckpt))
}

fn run_loop(config: &Config, mut trainer: Trainer, run: &Path, last: Option<PathBuf>) -> Result<TrainOutcome> {
    let (train, _) = load_splits(config)?;
    let plan = BatchPlan::new(train.len(), config.optim().batch_size, config.seed())?;
    let mut log = LossLog::open(run, trainer.step())?;
    let total = config.optim().steps;
    let every = config.run().checkpoint_every;
    let mut last_checkpoint = last;
    while trainer.step() < total {
        let step = trainer.step();
        let batches = step_batches(config, &plan, &train, step)?;
        let fields = trainer.train_step(&batches)?;
        log.row(step, &fields)?;
        let done = trainer.step();
        if done % every == 0 || done == total {
            let dir = checkpoint_dir(run, done);
            save_checkpoint(&dir, &trainer.state(config))?;
            last_checkpoint = Some(dir);
        }
    }
    Ok(TrainOutcome {
        step: trainer.step(),
        last_checkpoint,
    })
}
