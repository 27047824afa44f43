//! Bilevel alternating architecture search.
//!
//! Each epoch runs two phases. Weight phase: for every training batch,
//! binary gates are sampled per edge from softmax(alpha), one gated path is
//! computed, and momentum SGD (cosine learning rate) updates only the
//! active path's weights; alpha stays fixed. Architecture phase: for every
//! validation batch, the continuous softmax-weighted forward is evaluated
//! and Adam updates alpha alone; weights stay fixed. Validation metrics are
//! recorded per epoch under the current argmax gates, and the final
//! genotypes are read off alpha by redundant-path removal.

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::metrics::{argmax_channels, compute_metrics, ConfusionMatrix, MetricsRecord};
use crate::optim::{cosine_lr, Adam, SgdMomentum};
use crate::rng::Rng64;
use crate::scalar::Scalar;
use crate::search_space::{argmax_gates, sample_binary_gates, Genotype};
use crate::supernet::{Supernet, SupernetMode};
use crate::tensor::{Shape, Tape, Var};

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1.0;

/// Hyper-parameters of one search run.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    /// Fraction of the training portion carved off as the architecture
    /// validation set.
    pub val_fraction: f64,
    pub seed: u64,
    /// Re-hash alpha and weights around every phase to prove the frozen
    /// side never moves.
    pub verify_phase_separation: bool,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::config("search needs at least one epoch"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(Error::config(format!(
                "cosine range requires lr_max > lr_min > 0, got {} .. {}",
                self.lr_max, self.lr_min
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One row of the search history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub dsc: f64,
    pub lr: f64,
    pub genotype_hash: u64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,pixel_acc,miou,dsc,lr";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.train_loss, self.pixel_accuracy, self.miou, self.dsc, self.lr
        )
    }
}

/// Assemble a mini-batch into a contiguous (N,1,H,W) tensor plus labels.
pub fn assemble_batch<S: Scalar>(samples: &[&ImageSample]) -> Result<(Vec<S>, Vec<u16>, Shape)> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let (h, w) = (first.h, first.w);
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.h != h || s.w != w {
            return Err(Error::data(format!("sample {} has size {}x{}, expected {h}x{w}", s.id, s.h, s.w)));
        }
        data.extend(s.image.iter().map(|&v| S::from_f64(v)));
        labels.extend_from_slice(&s.label);
    }
    Ok((data, labels, Shape::new(samples.len(), 1, h, w)))
}

/// Run a frozen forward over a dataset and compute global metrics.
pub fn evaluate_forward<S, F>(
    samples: &[ImageSample],
    batch_size: usize,
    num_classes: usize,
    mut forward: F,
) -> Result<(MetricsRecord, ConfusionMatrix)>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, Var) -> Result<Var>,
{
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    let refs: Vec<&ImageSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let (data, labels, shape) = assemble_batch::<S>(chunk)?;
        let mut tape = Tape::new();
        let x = tape.leaf(data, shape, false)?;
        let logits = forward(&mut tape, x)?;
        let preds = argmax_channels(tape.data(logits), tape.shape(logits));
        cm.accumulate(&preds, &labels)?;
    }
    Ok((compute_metrics(&cm)?, cm))
}

/// Deterministically carve the architecture validation set out of the
/// training portion (by sample order, shuffled by seed).
pub fn carve_val_split(
    train: Vec<ImageSample>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    if train.is_empty() {
        return Err(Error::data("no training samples to carve a validation split from"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng64::derive(seed, &[0x7661_6c]);
    rng.shuffle(&mut order);
    let n_val = ((train.len() as f64 * val_fraction).floor() as usize).max(1);
    if n_val >= train.len() {
        return Err(Error::data("validation fraction leaves no training samples"));
    }
    let val_set: std::collections::BTreeSet<usize> = order[..n_val].iter().copied().collect();
    let mut tr = Vec::with_capacity(train.len() - n_val);
    let mut va = Vec::with_capacity(n_val);
    for (i, s) in train.into_iter().enumerate() {
        if val_set.contains(&i) {
            va.push(s);
        } else {
            tr.push(s);
        }
    }
    Ok((tr, va))
}

/// The search loop state: supernet, both optimizers, history.
pub struct SearchEngine<S: Scalar> {
    pub net: Supernet<S>,
    pub config: SearchConfig,
    pub history: Vec<EpochRecord>,
    pub(crate) weight_opt: SgdMomentum<S>,
    pub(crate) arch_opt: Adam<S>,
    /// Consecutive non-finite steps; three in a row abort the run.
    abort_streak: usize,
    /// Total aborted steps over the run, for reporting.
    pub aborted_steps: usize,
}

impl<S: Scalar> SearchEngine<S> {
    pub fn new(net: Supernet<S>, config: SearchConfig) -> Result<SearchEngine<S>> {
        config.validate()?;
        let weight_opt = SgdMomentum::new(config.momentum, config.weight_decay);
        let arch_opt = Adam::new(
            config.arch_lr,
            config.arch_beta1,
            config.arch_beta2,
            1e-8,
            config.arch_weight_decay,
        );
        Ok(SearchEngine { net, config, history: Vec::new(), weight_opt, arch_opt, abort_streak: 0, aborted_steps: 0 })
    }

    /// One gated weight update on a training batch. Alpha is frozen; only
    /// parameters on the sampled paths move.
    pub fn weight_step(&mut self, batch: &[&ImageSample], lr: f64, gate_rng: &mut Rng64) -> Result<f64> {
        let (data, labels, shape) = assemble_batch::<S>(batch)?;
        let down = sample_binary_gates(&self.net.alpha_down, gate_rng);
        let up = sample_binary_gates(&self.net.alpha_up, gate_rng);

        let mut tape = Tape::new();
        let x = tape.leaf(data, shape, false)?;
        let pass = self
            .net
            .forward(&mut tape, x, &SupernetMode::Binarized { down: &down, up: &up }, true)?;
        let loss = tape.dice_loss(pass.logits, &labels, DICE_SMOOTH)?;
        let loss_value = tape.scalar_value(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!("weight step produced non-finite loss {loss_value}")));
        }
        tape.backward(loss)?;

        for (id, var) in pass.params.materialized() {
            if let Some(grad) = tape.grad(var) {
                let param = self.net.store.get_mut(id);
                self.weight_opt.step(id.index(), &mut param.data, grad, lr);
            }
        }
        Ok(loss_value)
    }

    /// One continuous-relaxation update of alpha on a validation batch.
    /// Weights are frozen (inserted without gradients).
    pub fn arch_step(&mut self, batch: &[&ImageSample]) -> Result<f64> {
        let (data, labels, shape) = assemble_batch::<S>(batch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(data, shape, false)?;
        let pass = self.net.forward(&mut tape, x, &SupernetMode::Continuous, false)?;
        let loss = tape.dice_loss(pass.logits, &labels, DICE_SMOOTH)?;
        let loss_value = tape.scalar_value(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::numeric(format!("arch step produced non-finite loss {loss_value}")));
        }
        tape.backward(loss)?;

        let (down_rows, up_rows) = pass.alpha_vars.as_ref().expect("continuous mode leaves alpha rows");
        let key_base = down_rows.len();
        self.arch_opt.begin_step();
        for (e, &var) in down_rows.iter().enumerate() {
            if let Some(grad) = tape.grad(var) {
                self.arch_opt.step(e, self.net.alpha_down.row_mut(e), grad);
            }
        }
        for (e, &var) in up_rows.iter().enumerate() {
            if let Some(grad) = tape.grad(var) {
                self.arch_opt.step(key_base + e, self.net.alpha_up.row_mut(e), grad);
            }
        }
        Ok(loss_value)
    }

    fn absorb_step(&mut self, result: Result<f64>) -> Result<Option<f64>> {
        match result {
            Ok(loss) => {
                self.abort_streak = 0;
                Ok(Some(loss))
            }
            Err(Error::Numeric(msg)) => {
                // abort the step, keep previous state; three in a row is fatal
                self.abort_streak += 1;
                self.aborted_steps += 1;
                if self.abort_streak >= 3 {
                    Err(Error::numeric(format!("three consecutive diverged steps; last: {msg}")))
                } else {
                    Ok(None)
                }
            }
            Err(e) => Err(e),
        }
    }

    /// One full epoch: all training batches through the weight phase, then
    /// all validation batches through the architecture phase, then a gated
    /// metric pass over the validation set.
    pub fn run_epoch(&mut self, epoch: usize, train: &[ImageSample], val: &[ImageSample]) -> Result<EpochRecord> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::data("search requires non-empty train and validation splits"));
        }
        let lr = cosine_lr(epoch, self.config.epochs, self.config.lr_max, self.config.lr_min)?;
        let seed = self.config.seed;

        let alpha_before = self.config.verify_phase_separation.then(|| self.net.alpha_hash());
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng64::derive(seed, &[0x7368_7566, epoch as u64]).shuffle(&mut order);

        let mut train_losses = Vec::new();
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut gate_rng = Rng64::derive(seed, &[0x6761_7465, epoch as u64, bi as u64]);
            let result = self.weight_step(&batch, lr, &mut gate_rng);
            if let Some(loss) = self.absorb_step(result)? {
                train_losses.push(loss);
            }
        }
        if let Some(h) = alpha_before {
            assert_eq!(h, self.net.alpha_hash(), "weight phase must not move alpha");
        }

        let weights_before = self.config.verify_phase_separation.then(|| self.net.weights_hash());
        for chunk in (0..val.len()).collect::<Vec<_>>().chunks(self.config.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &val[i]).collect();
            let result = self.arch_step(&batch);
            self.absorb_step(result)?;
        }
        if let Some(h) = weights_before {
            assert_eq!(h, self.net.weights_hash(), "arch phase must not move weights");
        }

        // gated validation metrics under the current best (argmax) paths
        let down = argmax_gates(&self.net.alpha_down);
        let up = argmax_gates(&self.net.alpha_up);
        let (metrics, _) = evaluate_forward::<S, _>(
            val,
            self.config.batch_size,
            self.net.config.num_classes,
            |tape, x| {
                self.net
                    .forward(tape, x, &SupernetMode::Binarized { down: &down, up: &up }, false)
                    .map(|p| p.logits)
            },
        )?;

        let (gd, gu) = self.net.derive_genotypes();
        let train_loss = if train_losses.is_empty() {
            f64::NAN
        } else {
            train_losses.iter().sum::<f64>() / train_losses.len() as f64
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            pixel_accuracy: metrics.pixel_accuracy,
            miou: metrics.miou,
            dsc: metrics.dsc,
            lr,
            genotype_hash: gd.content_hash() ^ gu.content_hash().rotate_left(1),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Epochs already completed (supports resuming).
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Run the remaining epochs; `after_epoch` fires once per epoch (for
    /// checkpointing and progress reporting).
    pub fn run<F>(
        &mut self,
        train: &[ImageSample],
        val: &[ImageSample],
        mut after_epoch: F,
    ) -> Result<(Genotype, Genotype)>
    where
        F: FnMut(&SearchEngine<S>, &EpochRecord) -> Result<()>,
    {
        for epoch in self.epochs_done()..self.config.epochs {
            let record = self.run_epoch(epoch, train, val)?;
            after_epoch(self, &record)?;
        }
        let (gd, gu) = self.net.derive_genotypes();
        gd.validate()?;
        gu.validate()?;
        Ok((gd, gu))
    }
}

#[cfg(test)]
mod tests;
