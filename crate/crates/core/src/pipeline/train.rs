//! Training loop with data-dependent flow init, validation-based best
//! checkpoint, and bit-exact resume.

use std::path::PathBuf;

use numcore::{Adam, Tape};
use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::evaluate::evaluate_scenes;
use super::stream_rng;
use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::model::StGlow;

const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const VALIDATION_STREAM: u64 = 1 << 40;
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean flow NLL per behavior vector (nats).
    pub nll: f64,
    /// Mean trajectory loss per target.
    pub traj: f64,
    pub val_ade: Option<f64>,
    pub skipped_steps: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    /// Lowest validation ADE seen, when a validation split exists.
    pub best: Option<Checkpoint>,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Print one line per epoch to stderr.
    pub log: bool,
}

/// Deterministic (train, validation) split of the windows.
pub fn split_validation(windows: &[SceneWindow], fraction: f64, seed: u64) -> (Vec<SceneWindow>, Vec<SceneWindow>) {
    let n = windows.len();
    let n_val = (n as f64 * fraction).floor() as usize;
    if n_val == 0 || n_val >= n {
        return (windows.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, SPLIT_STREAM));
    let (val, train) = order.split_at(n_val);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| windows[i].clone()).collect()
    };
    (pick(train), pick(val))
}

/// Fresh model for `config`, initialized from the config seed.
pub fn init_model(config: &Config) -> Result<StGlow> {
    StGlow::new(&config.model, &mut stream_rng(config.seed, INIT_STREAM))
}

/// Trains on `windows` for `config.train.epochs` epochs (resuming from
/// `opts.resume` if given). A non-finite loss aborts with an error; the
/// last checkpoint written to `opts.out_dir` is left untouched.
pub fn train(config: &Config, windows: &[SceneWindow], opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let tc = &config.train;
    let (train_set, val_set) = split_validation(windows, tc.validation_fraction, config.seed);
    if train_set.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
    }

    let (mut model, mut adam, mut rng, start, mut best_val, mut skipped) = match &opts.resume {
        Some(ck) => {
            if ck.config.model != config.model {
                return Err(Error::Config("resumed checkpoint was trained with a different model config".into()));
            }
            let model = ck.model()?;
            let mut adam = ck.optimizer(&model.store)?;
            adam.lr = tc.lr;
            (model, adam, ck.rng.restore(), ck.epoch, ck.best_val_ade, ck.skipped_steps)
        }
        None => {
            let model = init_model(config)?;
            let adam = Adam::new(&model.store, tc.lr, tc.betas, tc.weight_decay);
            (model, adam, stream_rng(config.seed, SAMPLE_STREAM), 0, f64::INFINITY, 0)
        }
    };

    let capture = |model: &StGlow, adam: &Adam, rng: &_, epoch: u64, best: f64, skipped: u64| {
        let mut ck = Checkpoint::capture(config, model, adam, rng, epoch);
        ck.best_val_ade = best;
        ck.skipped_steps = skipped;
        ck
    };
    let mut best = None;
    let mut history = Vec::new();
    let n = train_set.len();
    for epoch in start..tc.epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM + epoch));
        if !model.flow().is_initialized() {
            let first: Vec<&SceneWindow> = order[..tc.batch.max(2).min(n)].iter().map(|&i| &train_set[i]).collect();
            model.initialize_flow(&first)?;
        }
        let (mut nll_sum, mut traj_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(tc.batch) {
            let scenes: Vec<&SceneWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut grads = {
                let mut tape = Tape::with_params(&model.store);
                let parts = model.training_loss(&mut tape, &scenes, tc.k, &tc.loss, &mut rng)?;
                nll_sum += tape.value(parts.nll).data()[0];
                traj_sum += parts.traj.iter().map(|&v| tape.value(v).data()[0]).sum::<f64>();
                tape.backward(parts.total)?;
                tape.param_grads()
            };
            if !grads.is_finite() {
                return Err(Error::Num(numcore::NumError::NonFinite { op: "gradient" }));
            }
            if tc.grad_clip > 0.0 {
                grads.clip_norm(tc.grad_clip);
            }
            let saved = (model.store.clone(), adam.clone());
            adam.step(&mut model.store, &grads)?;
            if let Err(e) = model.flow().check_weights(&model.store) {
                if !matches!(e, Error::SingularWeight { .. }) {
                    return Err(e);
                }
                (model.store, adam) = saved;
                skipped += 1;
            }
            batches += 1;
        }
        let val_ade = if val_set.is_empty() {
            None
        } else {
            let per = evaluate_scenes(&model, &val_set, config.eval.k, config.eval.sigma, config.seed, VALIDATION_STREAM)?;
            Some(per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64)
        };
        let log = EpochLog {
            epoch: epoch + 1,
            nll: nll_sum / batches as f64,
            traj: traj_sum / n as f64,
            val_ade,
            skipped_steps: skipped,
        };
        if opts.log {
            let val = val_ade.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "epoch {:>4}  L_p {:>10.4}  L_traj {:>9.4}  val_ade {val}  skipped {}",
                log.epoch, log.nll, log.traj, skipped
            );
        }
        history.push(log);
        let improved = val_ade.is_some_and(|v| v < best_val);
        if improved {
            best_val = val_ade.unwrap_or(best_val);
        }
        let done = epoch + 1 == tc.epochs as u64;
        let periodic = tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every as u64 == 0;
        if improved || (opts.out_dir.is_some() && (done || periodic)) {
            let ck = capture(&model, &adam, &rng, epoch + 1, best_val, skipped);
            if let Some(dir) = &opts.out_dir {
                if improved {
                    ck.save(dir.join("best.ckpt"))?;
                }
                if done || periodic {
                    ck.save(dir.join("last.ckpt"))?;
                }
            }
            if improved {
                best = Some(ck);
            }
        }
    }
    let last = capture(&model, &adam, &rng, start.max(tc.epochs as u64), best_val, skipped);
    if let Some(dir) = &opts.out_dir {
        last.save(dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome { last, best, history })
}
