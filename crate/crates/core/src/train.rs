//! Retraining of a derived discrete network from scratch.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::search::{assemble_batch, evaluate_forward, EpochRecord, DICE_SMOOTH};
use crate::search_space::Genotype;
use crate::optim::Adam;
use crate::supernet::{DiscreteNet, NetworkConfig};
use crate::tensor::Tape;

/// Retraining hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::config("retraining needs epochs >= 1 and batch_size >= 1"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Trainer for a discrete network with Adam and Dice loss.
pub struct Trainer<S: Scalar> {
    pub net: DiscreteNet<S>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub(crate) opt: Adam<S>,
    abort_streak: usize,
    pub aborted_steps: usize,
}

impl<S: Scalar> Trainer<S> {
    /// Fresh-weight trainer (retraining is from scratch by construction).
    pub fn new(
        genotype_down: Genotype,
        genotype_up: Genotype,
        net_config: NetworkConfig,
        config: TrainConfig,
    ) -> Result<Trainer<S>> {
        config.validate()?;
        let net = DiscreteNet::build(genotype_down, genotype_up, net_config, config.seed)?;
        let opt = Adam::new(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay);
        Ok(Trainer { net, config, history: Vec::new(), opt, abort_streak: 0, aborted_steps: 0 })
    }

    /// One Adam update on a batch; returns the Dice loss.
    pub fn train_step(&mut self, batch: &[&ImageSample]) -> Result<f64> {
        let (data, labels, shape) = assemble_batch::<S>(batch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(data, shape, false)?;
        let pass = self.net.forward(&mut tape, x, true)?;
        let loss = tape.dice_loss(pass.logits, &labels, DICE_SMOOTH)?;
        let loss_value = tape.scalar_value(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!("train step produced non-finite loss {loss_value}")));
        }
        tape.backward(loss)?;
        self.opt.begin_step();
        for (id, var) in pass.params.materialized() {
            if let Some(grad) = tape.grad(var) {
                let param = self.net.store.get_mut(id);
                self.opt.step(id.index(), &mut param.data, grad);
            }
        }
        Ok(loss_value)
    }

    /// One epoch over the training split plus a metric pass on `eval_set`.
    pub fn run_epoch(&mut self, epoch: usize, train: &[ImageSample], eval_set: &[ImageSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::data("retraining requires a non-empty training split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng64::derive(self.config.seed, &[0x7265_7472, epoch as u64]).shuffle(&mut order);

        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &train[i]).collect();
            match self.train_step(&batch) {
                Ok(l) => {
                    self.abort_streak = 0;
                    losses.push(l);
                }
                Err(Error::Numeric(msg)) => {
                    self.abort_streak += 1;
                    self.aborted_steps += 1;
                    if self.abort_streak >= 3 {
                        return Err(Error::numeric(format!("three consecutive diverged steps; last: {msg}")));
                    }
                }
                Err(e) => return Err(e),
            }
        }

        let (metrics, _) = evaluate_forward::<S, _>(
            eval_set,
            self.config.batch_size,
            self.net.config.num_classes,
            |tape, x| self.net.forward(tape, x, false).map(|p| p.logits),
        )?;
        let genotype_hash =
            self.net.genotype_down.content_hash() ^ self.net.genotype_up.content_hash().rotate_left(1);
        let record = EpochRecord {
            epoch,
            train_loss: if losses.is_empty() { f64::NAN } else { losses.iter().sum::<f64>() / losses.len() as f64 },
            pixel_accuracy: metrics.pixel_accuracy,
            miou: metrics.miou,
            dsc: metrics.dsc,
            lr: self.config.lr,
            genotype_hash,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Run the remaining epochs; `after_epoch` fires once per epoch.
    pub fn run<F>(&mut self, train: &[ImageSample], eval_set: &[ImageSample], mut after_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer<S>, &EpochRecord) -> Result<()>,
    {
        for epoch in self.epochs_done()..self.config.epochs {
            let record = self.run_epoch(epoch, train, eval_set)?;
            after_epoch(self, &record)?;
        }
        Ok(())
    }
}
