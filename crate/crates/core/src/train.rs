//! Joint training of both levels with AdamW, metrics and resumable
//! checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{Dataset, DatasetContent, DatasetHeader};
use crate::env::POINT_FEATURES;
use crate::equinet::checkpoint::Checkpoint;
use crate::equinet::params::grad_norm;
use crate::equinet::{AdamW, Tape};
use crate::error::{Error, Result};
use crate::high_level::make_target;
use crate::low_level::{low_example, LowBatch};
use crate::model::Model;
use crate::scene::{extract_keyframes, make_training_pairs, segment_boundaries, TrainingPair};

pub const METRICS_HEADER: &str = "iter,loss_high,loss_low,grad_norm,wallclock_s";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: u64,
    pub loss_high: f64,
    pub loss_low: f64,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{:.3}", self.iter, self.loss_high, self.loss_low, self.grad_norm, self.wallclock_s)
    }
}

/// Header the dataset must carry to train a model built from `cfg`.
pub fn expected_header(cfg: &RunConfig) -> DatasetHeader {
    DatasetHeader { kf: POINT_FEATURES, m: cfg.m, t_hist: cfg.t_hist, t_act: cfg.t_act }
}

/// Training pairs for `cfg.mode`: demos are split at their keyframe segment
/// boundaries; stored pairs are used as they are.
pub fn pairs_from_dataset(ds: &Dataset, cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let want = expected_header(cfg);
    if ds.header != want {
        return Err(Error::Config(format!("dataset header {:?} does not match config {want:?}", ds.header)));
    }
    let pairs = match &ds.content {
        DatasetContent::Pairs(p) => p.clone(),
        DatasetContent::Demos(demos) => {
            let mut out = Vec::new();
            for d in demos {
                let keys = segment_boundaries(&extract_keyframes(d, &cfg.keyframes)?);
                out.extend(make_training_pairs(d, cfg.mode, cfg.m, &keys)?);
            }
            out
        }
    };
    if pairs.is_empty() {
        return Err(Error::InvalidDemo("no training pairs".into()));
    }
    Ok(pairs)
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub pairs: Vec<TrainingPair>,
    /// Completed optimizer steps.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, pairs: Vec<TrainingPair>) -> Result<Self> {
        let model = Model::build(cfg)?;
        let o = &cfg.optim;
        let opt = AdamW::new(&model.store, o.lr, o.weight_decay, (o.beta1, o.beta2), o.eps);
        Self::assemble(cfg, model, opt, pairs, 0)
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(cfg: &RunConfig, pairs: Vec<TrainingPair>, ck: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(cfg, ck)?;
        let opt = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::CheckpointMismatch("checkpoint has no optimizer state to resume from".into()))?;
        Self::assemble(cfg, model, opt, pairs, ck.iteration)
    }

    fn assemble(cfg: &RunConfig, model: Model, opt: AdamW, pairs: Vec<TrainingPair>, iteration: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidDemo("no training pairs".into()));
        }
        for p in &pairs {
            make_target(&model.high.spec, p.target_keypose)?;
            if p.target_chunk.len() != cfg.m {
                return Err(Error::ShapeMismatch(format!("pair chunk length {} vs m = {}", p.target_chunk.len(), cfg.m)));
            }
        }
        Ok(Self { cfg: cfg.clone(), model, opt, pairs, iteration })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.model.checkpoint(self.iteration, Some(self.opt.clone()))
    }

    /// Randomness for iteration `iter` depends only on the seed and `iter`,
    /// so a resumed run replays the same batches.
    fn iteration_rng(&self, iter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7EA1_17E5);
        rng.set_stream(iter);
        rng
    }

    /// One iteration: a high-level batch and a low-level batch, then one
    /// AdamW step on the summed gradients (the two levels share no
    /// parameters, so this equals stepping each level on its own loss).
    /// Returns the pre-update losses and gradient norm.
    pub fn step(&mut self) -> Result<(f64, f64, f64)> {
        let iter = self.iteration + 1;
        let mut rng = self.iteration_rng(iter);
        let b = self.cfg.optim.batch;
        let w = 1.0 / b as f64;
        let store = &self.model.store;
        let mut grads = store.zero_grads();

        let mut loss_high = 0.0;
        for _ in 0..b {
            let p = &self.pairs[rng.gen_range(0..self.pairs.len())];
            let mut tape = Tape::<f64>::new();
            let l = self.model.high.loss(&mut tape, store, &p.obs, p.target_keypose)?;
            loss_high += w * tape.value(l)[0];
            let g = tape.backward(l)?;
            store.accumulate(&tape, &g, w, &mut grads);
        }

        let mut batch = LowBatch::default();
        for _ in 0..self.cfg.optim.low_batch {
            let p = &self.pairs[rng.gen_range(0..self.pairs.len())];
            low_example(&self.model.low, p, &mut rng, &mut batch)?;
        }
        let mut tape = Tape::<f64>::new();
        let l = self.model.low.loss(&mut tape, store, &batch)?;
        let loss_low = tape.value(l)[0];
        let g = tape.backward(l)?;
        store.accumulate(&tape, &g, 1.0, &mut grads);

        let gn = grad_norm(&grads);
        if !loss_high.is_finite() || !loss_low.is_finite() || !gn.is_finite() {
            return Err(Error::NonFiniteLoss(iter as usize));
        }
        self.opt.lr = self.cfg.optim.lr_at(iter, self.cfg.train.iterations);
        self.opt.step(&mut self.model.store, &grads)?;
        self.iteration = iter;
        Ok((loss_high, loss_low, gn))
    }

    /// Trains until `cfg.train.iterations` steps are done, reporting each
    /// row to `log` and writing a checkpoint every `checkpoint_every` steps
    /// and at the end. A non-finite loss aborts before anything is written,
    /// so the last checkpoint on disk stays the last good one.
    pub fn run(&mut self, checkpoint: Option<&Path>, log: &mut dyn FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let start = Instant::now();
        let every = self.cfg.train.checkpoint_every;
        while self.iteration < self.cfg.train.iterations {
            let (loss_high, loss_low, grad_norm) = self.step()?;
            log(&MetricsRow {
                iter: self.iteration,
                loss_high,
                loss_low,
                grad_norm,
                wallclock_s: start.elapsed().as_secs_f64(),
            })?;
            if let Some(path) = checkpoint {
                if self.iteration % every == 0 || self.iteration == self.cfg.train.iterations {
                    self.checkpoint().save(path)?;
                }
            }
        }
        Ok(())
    }
}
