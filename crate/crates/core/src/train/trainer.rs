use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mode, ParamStore, Session};
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{tile, AugmentConfig, Normalization, Sample, TileSpec};
use crate::error::{Error, Result};
use crate::network::{Cvmh, NetworkConfig};
use crate::tensor::Tensor;

use super::{segmentation_loss, AdamW, AdamWConfig, LossConfig};

pub const LOSS_CSV_HEADER: &str = "step,ce,dice,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub epochs: u64,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<u64>,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub tile: TileSpec,
    /// Also write `step_NNNNNN.cvck` every this many steps.
    pub checkpoint_every: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            batch_size: 5,
            epochs: 300,
            steps: None,
            seed: 0,
            augment: AugmentConfig::default(),
            tile: TileSpec::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.tile.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based optimizer step.
    pub step: u64,
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

impl StepLog {
    /// Shortest round-trip formatting, so equal runs give equal bytes.
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.ce, self.dice, self.total)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub steps_run: u64,
    pub last: Option<StepLog>,
    pub best: Option<StepLog>,
}

/// Mini-batch AdamW over fixed-size training tiles.
///
/// Batch order and augmentation are pure functions of `(seed, step)`, so a
/// resumed run continues exactly as an uninterrupted one would.
pub struct Trainer {
    pub model: Cvmh,
    pub store: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub cfg: TrainConfig,
    pub norm: Normalization,
    pub palette: Vec<[u8; 3]>,
    tiles: Vec<Sample>,
}

impl Trainer {
    pub fn new(network: NetworkConfig, cfg: TrainConfig, samples: &[Sample], norm: Normalization) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Cvmh::new(&mut store, network, cfg.seed)?;
        let opt = AdamW::new(cfg.optimizer, &store);
        Self::assemble(model, store, opt, cfg, samples, norm)
    }

    /// Continue from a checkpoint written by [`Trainer::save`], including
    /// its optimizer state and step counter.
    pub fn resume(path: &Path, cfg: TrainConfig, samples: &[Sample]) -> Result<Self> {
        cfg.validate()?;
        let loaded = checkpoint::load(path)?;
        let mut opt = AdamW::new(cfg.optimizer, &loaded.store);
        let opt_path = checkpoint::optimizer_path(path);
        opt.load_state(&loaded.store, loaded.meta.step, &checkpoint::read_tensors(&opt_path)?)
            .map_err(|e| Error::format(&opt_path, e.to_string()))?;
        let mut t = Self::assemble(loaded.model, loaded.store, opt, cfg, samples, loaded.meta.normalization)?;
        t.palette = loaded.meta.palette;
        Ok(t)
    }

    fn assemble(
        model: Cvmh,
        store: ParamStore<f32>,
        opt: AdamW<f32>,
        cfg: TrainConfig,
        samples: &[Sample],
        norm: Normalization,
    ) -> Result<Self> {
        norm.validate()?;
        if samples.is_empty() {
            return Err(Error::config("no training samples"));
        }
        let ignore = cfg.loss.ignore_index;
        let pad = ignore.unwrap_or(u32::MAX);
        let mut tiles = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            for t in tile(s, cfg.tile, pad)? {
                if ignore.is_none() && t.sample.labels.contains(&u32::MAX) {
                    return Err(Error::config(format!(
                        "sample {i} ({}x{}) needs padding to tile size {}; set loss.ignore_index or use a tile that divides it",
                        s.height(),
                        s.width(),
                        cfg.tile.size
                    )));
                }
                tiles.push(t.sample);
            }
        }
        Ok(Trainer {
            model,
            store,
            opt,
            cfg,
            norm,
            palette: Vec::new(),
            tiles,
        })
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles.len()
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.tiles.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg.steps.unwrap_or(self.cfg.epochs * self.steps_per_epoch())
    }

    /// Tile indices of the 0-based step `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.tiles.len()).collect();
        order.shuffle(&mut rng);
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    /// One optimizer update.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let step = self.opt.step_count() + 1;
        let idx = self.batch_indices(step - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_a0a0_a0a0_5eed);
        rng.set_stream(step);
        let shape = self.tiles[0].image.shape().to_vec();
        let mut data = Vec::with_capacity(idx.len() * self.tiles[0].image.numel());
        let mut labels = Vec::with_capacity(idx.len() * shape[1] * shape[2]);
        for &i in &idx {
            let s = self.cfg.augment.apply(&self.tiles[i], &mut rng);
            data.extend_from_slice(self.norm.apply(&s.image)?.data());
            labels.extend_from_slice(&s.labels);
        }
        let x = Tensor::new(vec![idx.len(), shape[0], shape[1], shape[2]], data)?;

        self.store.zero_grad();
        let log = {
            let mut s = Session::new(&mut self.store, Mode::Train);
            let xv = s.constant(x);
            let logits = self.model.forward(&mut s, &xv)?;
            let l = segmentation_loss(&mut s, &logits, &labels, &self.cfg.loss)?;
            let total = l.total.value().item() as f64;
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {total} at step {step} (ce {}, dice {})",
                    l.ce, l.dice
                )));
            }
            s.backward(&l.total)?;
            StepLog { step, ce: l.ce, dice: l.dice, total }
        };
        if let Some(p) = self.store.params().iter().find(|p| p.grad.as_ref().is_some_and(|g| !g.all_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{}` at step {step}", p.name)));
        }
        self.opt.step(&mut self.store);
        Ok(log)
    }

    pub fn meta(&self, loss: Option<f64>) -> CheckpointMeta {
        CheckpointMeta {
            version: checkpoint::VERSION,
            network: self.model.config.clone(),
            step: self.step_count(),
            loss,
            normalization: self.norm.clone(),
            ignore_index: self.cfg.loss.ignore_index,
            palette: self.palette.clone(),
        }
    }

    /// Model, optimizer state and sidecar.
    pub fn save(&self, path: &Path, loss: Option<f64>) -> Result<()> {
        checkpoint::save(path, &self.store, &self.meta(loss), Some(&self.opt))
    }

    /// Run until [`Trainer::total_steps`]. With an output directory, appends
    /// to `loss.csv` and writes `last.cvck`, `best.cvck` (lowest step loss)
    /// and the periodic checkpoints.
    pub fn fit(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<FitSummary> {
        let mut csv = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("loss.csv");
                let fresh = std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let best_path = out.map(|d| d.join("best.cvck"));
        let mut best_loss = best_path
            .as_deref()
            .filter(|p| p.exists())
            .and_then(|p| checkpoint::load_meta(p).ok())
            .and_then(|m| m.loss)
            .unwrap_or(f64::INFINITY);
        let mut best_snapshot: Option<(ParamStore<f32>, CheckpointMeta)> = None;
        let mut summary = FitSummary::default();

        let flush_best = |snap: &mut Option<(ParamStore<f32>, CheckpointMeta)>| -> Result<()> {
            if let (Some(path), Some((store, meta))) = (&best_path, snap.take()) {
                checkpoint::save(path, &store, &meta, None)?;
            }
            Ok(())
        };

        while self.step_count() < self.total_steps() {
            let log = self.train_step()?;
            if let Some((f, path)) = &mut csv {
                writeln!(f, "{}", log.csv_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            summary.steps_run += 1;
            summary.last = Some(log);
            if log.total < best_loss {
                best_loss = log.total;
                summary.best = Some(log);
                if out.is_some() {
                    // parameter tensors are shared until the next update writes them
                    best_snapshot = Some((self.store.clone(), self.meta(Some(log.total))));
                }
            }
            on_step(&log);
            if let (Some(dir), Some(every)) = (out, self.cfg.checkpoint_every) {
                if log.step % every == 0 {
                    self.save(&dir.join(format!("step_{:06}.cvck", log.step)), Some(log.total))?;
                    flush_best(&mut best_snapshot)?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join("last.cvck"), summary.last.map(|l| l.total))?;
            flush_best(&mut best_snapshot)?;
        }
        Ok(summary)
    }
}

