use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{adam_step, bce_loss, cosine_lr, hflip, AdamState, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::network::SaliencyNet;
use crate::nn::ParameterStore;
use crate::tensor::{Tape, Tensor};

/// Stream of the training generator; parameter initialization uses
/// path-derived streams.
const TRAIN_STREAM: u64 = 1;

pub const EPOCH_LOG_HEADER: &str = "epoch,step,lr,loss,f_beta,mae,e_measure,s_measure";
pub const STEP_LOG_HEADER: &str = "epoch,step,batch,lr,loss";

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParameterStore,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    /// Lowest epoch MAE so far (infinite before the first epoch).
    pub best_mae: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// 0-based global step.
    pub step: usize,
    /// 0-based batch within the epoch.
    pub batch: usize,
    pub lr: f64,
    /// Mean loss over the batch before the update.
    pub loss: f64,
}

/// Per-epoch summary. Metrics are averaged over the predictions made during
/// the epoch's own training steps (on the augmented inputs).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Global steps completed at the end of the epoch.
    pub step: usize,
    /// Rate used by the epoch's last step.
    pub lr: f64,
    pub loss: f64,
    pub report: EvalReport,
    pub steps: Vec<StepRecord>,
    /// Whether this epoch set a new best MAE.
    pub improved: bool,
}

impl EpochLog {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.step, self.lr, self.loss, r.f_beta, r.mae, r.e_measure, r.s_measure
        )
    }

    pub fn step_lines(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(out, "{},{},{},{:e},{:e}", s.epoch, s.step, s.batch, s.lr, s.loss);
        }
        out
    }
}

pub struct Trainer<'a> {
    net: &'a SaliencyNet,
    config: TrainConfig,
    samples: &'a [Sample],
}

struct StepOutcome {
    record: StepRecord,
    predictions: Vec<(Tensor, Tensor)>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a SaliencyNet, config: TrainConfig, samples: &'a [Sample]) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let [h, w] = net.config.input_size;
        for s in samples {
            if s.image.shape() != [3, h, w] || s.mask.shape() != [1, h, w] {
                return Err(Error::Data(format!(
                    "sample {}: image {:?} / mask {:?} do not match the {h}×{w} model input",
                    s.id,
                    s.image.shape(),
                    s.mask.shape()
                )));
            }
        }
        Ok(Self {
            net,
            config,
            samples,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn total_steps(&self) -> usize {
        self.config.total_steps(self.samples.len())
    }

    /// Fresh parameters and optimizer state from the configured seed.
    pub fn init_state(&self) -> Result<TrainState> {
        let store = self.net.init_params(self.config.seed)?;
        let adam = AdamState::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(TrainState {
            store,
            adam,
            rng,
            epoch: 0,
            step: 0,
            best_mae: f64::INFINITY,
        })
    }

    /// Learning rate of global step `step`; the first step uses `lr_start`
    /// and the last `lr_end`.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        let last = self.total_steps().saturating_sub(1);
        cosine_lr(step, last, self.config.lr_start, self.config.lr_end)
    }

    /// One optimizer step on the given samples. Returns the batch loss
    /// measured before the update.
    pub fn train_step(&self, state: &mut TrainState, indices: &[usize]) -> Result<f64> {
        let epoch = state.epoch + 1;
        Ok(self.step(state, indices, epoch, 0)?.record.loss)
    }

    fn step(&self, state: &mut TrainState, indices: &[usize], epoch: usize, batch: usize) -> Result<StepOutcome> {
        let step = state.step;
        let lr = self.lr_at(step)?;
        let diverged = |loss: f64| Error::Diverged {
            epoch,
            step,
            batch,
            loss,
        };
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut predictions = Vec::with_capacity(indices.len());
        let mut tape = Tape::new();
        for &i in indices {
            let sample = self.samples.get(i).ok_or_else(|| {
                Error::Usage(format!("sample index {i} out of range ({})", self.samples.len()))
            })?;
            let flip = state.rng.gen_bool(self.config.flip_prob);
            let (image, mask) = if flip {
                hflip(&sample.image, &sample.mask)?
            } else {
                (sample.image.clone(), sample.mask.clone())
            };
            tape.clear();
            let params = state.store.bind(&mut tape);
            let x = tape.constant(image);
            let run = |tape: &mut Tape| -> Result<_> {
                let y = self.net.forward(tape, &params, x)?;
                let l = bce_loss(tape, y, &mask)?;
                tape.backward(l)?;
                Ok((y, l))
            };
            let (y, l) = match run(&mut tape) {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let loss = tape.value(l).item()?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            loss_sum += loss;
            for (path, g) in params.grads(&tape) {
                match sum.get_mut(&path) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        sum.insert(path, g);
                    }
                }
            }
            predictions.push((tape.value(y).clone(), mask));
        }
        let scale = 1.0 / indices.len() as f64;
        for g in sum.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        let loss = loss_sum * scale;
        adam_step(&mut state.store, &sum, &mut state.adam, lr)?;
        if state.store.iter().any(|(_, t)| !t.is_finite()) {
            return Err(diverged(loss));
        }
        state.step += 1;
        Ok(StepOutcome {
            record: StepRecord {
                epoch,
                step,
                batch,
                lr,
                loss,
            },
            predictions,
        })
    }

    /// Shuffle, run every batch of one epoch and update the best MAE.
    pub fn run_epoch(&self, state: &mut TrainState) -> Result<EpochLog> {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut state.rng);
        let mut steps = Vec::new();
        let mut reports = Vec::with_capacity(order.len());
        for (batch, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let out = self.step(state, chunk, epoch, batch)?;
            for (pred, mask) in &out.predictions {
                reports.push(evaluate(pred, mask)?);
            }
            steps.push(out.record);
        }
        let n = reports.len() as f64;
        let mut report = EvalReport::default();
        for r in &reports {
            report.f_beta += r.f_beta / n;
            report.mae += r.mae / n;
            report.e_measure += r.e_measure / n;
            report.s_measure += r.s_measure / n;
        }
        let loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        let improved = report.mae < state.best_mae;
        if improved {
            state.best_mae = report.mae;
        }
        state.epoch = epoch;
        Ok(EpochLog {
            epoch,
            step: state.step,
            lr: steps.last().map_or(0.0, |s| s.lr),
            loss,
            report,
            steps,
            improved,
        })
    }

    /// Run the remaining epochs, handing each log to `on_epoch`.
    pub fn run<F>(&self, state: &mut TrainState, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&TrainState, &EpochLog) -> Result<()>,
    {
        while state.epoch < self.config.epochs {
            let log = self.run_epoch(state)?;
            log::info!("{}", log.csv_line());
            on_epoch(state, &log)?;
        }
        Ok(())
    }
}
