use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use super::{
    apply_bn_mode, blend_running_stats, evaluate, init_params, loss_and_grad, running_stats, set_running_stats, BnMode,
    ModelSpec,
};
use crate::avg::Averager;
use crate::checkpoint::write_checkpoint;
use crate::config::RunConfig;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::optim::{LrSchedule, Optimizer};
use crate::param::{Checkpoint, ParameterSet};
use crate::rng;

pub fn checkpoint_path(dir: &Path, slot: u64) -> PathBuf {
    dir.join(format!("ckpt_e{slot:05}.lawa"))
}

pub fn averaged_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("lawa_e{epoch:05}.lawa"))
}

/// What the observer of [`train_run_observed`] sees at the end of each epoch.
pub struct EpochEvent<'a> {
    pub epoch: usize,
    pub params: &'a ParameterSet,
    /// Output of the averaging scheme, before batch-norm handling.
    pub averaged_raw: Option<&'a ParameterSet>,
    /// The averaged model that was evaluated.
    pub averaged: Option<&'a ParameterSet>,
    pub record: &'a MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub spec: ModelSpec,
    pub metrics: Vec<MetricsRecord>,
    pub params: ParameterSet,
    pub averaged: Option<ParameterSet>,
}

struct Trainer<'a> {
    config: &'a RunConfig,
    dataset: &'a Dataset,
    spec: ModelSpec,
    bn_mode: BnMode,
    schedule: LrSchedule,
    optimizer: Optimizer,
    averager: Averager,
    params: ParameterSet,
    train: Batch,
    val: Batch,
    step: u64,
    slot: u64,
    latest_avg: Option<ParameterSet>,
    newest_saved: Option<ParameterSet>,
    out: Option<PathBuf>,
}

impl Trainer<'_> {
    fn save(&mut self) -> Result<()> {
        let ckpt = Checkpoint::new(self.params.clone(), self.slot, self.step);
        if let Some(dir) = &self.out {
            write_checkpoint(&ckpt, checkpoint_path(dir, self.slot))?;
        }
        if let Some(avg) = self.averager.push(ckpt)? {
            self.latest_avg = Some(avg);
        }
        self.newest_saved = Some(self.params.clone());
        self.slot += 1;
        Ok(())
    }

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let mut order = self.dataset.train_indices().to_vec();
        order.shuffle(&mut rng::stream(self.config.seed, "shuffle", epoch as u64));
        let bs = self.config.batch_size;
        let mut lr = self.schedule.lr_at(self.step);
        // the trailing partial batch is dropped
        for chunk in order.chunks_exact(bs) {
            let batch = self.dataset.batch(chunk);
            let (_, grads, cache) = loss_and_grad(&self.params, &self.spec, &batch)?;
            let previous = running_stats(&self.params, &self.spec);
            lr = self.schedule.lr_at(self.step);
            self.optimizer.step(&mut self.params, &grads, lr)?;
            set_running_stats(&mut self.params, &self.spec, &blend_running_stats(&previous, &cache));
            self.step += 1;
            if let Some(every) = self.config.save_every_steps {
                if self.step.is_multiple_of(every) {
                    self.save()?;
                }
            }
        }
        if self.config.save_every_steps.is_none() {
            self.save()?;
        }
        Ok(lr)
    }
}

/// Runs a full training job, writing checkpoints and `metrics.csv` into
/// `config.out`.
pub fn train_run(config: &RunConfig, dataset: &Dataset) -> Result<RunOutput> {
    train_run_observed(config, dataset, Some(&config.out), |_| {})
}

/// [`train_run`] with an end-of-epoch observer. With `out = None` nothing
/// is written to disk.
pub fn train_run_observed(
    config: &RunConfig,
    dataset: &Dataset,
    out: Option<&Path>,
    mut observer: impl FnMut(&EpochEvent<'_>),
) -> Result<RunOutput> {
    config.validate()?;
    let spec = config.model_spec(dataset)?;
    let steps_per_epoch = dataset.train_indices().len() / config.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "batch size {} exceeds the {} training rows",
            config.batch_size,
            dataset.train_indices().len()
        )));
    }
    let schedule = config.schedule((steps_per_epoch * config.epochs) as u64);
    schedule.validate()?;
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(MetricsWriter::create(&dir.join("metrics.csv"))?)
        }
        None => None,
    };

    let mut t = Trainer {
        config,
        dataset,
        bn_mode: config.bn_mode(spec.has_bn()),
        schedule,
        optimizer: config.optimizer_config().build()?,
        averager: Averager::new(config.scheme())?,
        params: init_params(&spec),
        train: dataset.train_batch(),
        val: dataset.val_batch(),
        spec,
        step: 0,
        slot: 0,
        latest_avg: None,
        newest_saved: None,
        out: out.map(Path::to_path_buf),
    };
    let started = Instant::now();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut final_avg = None;

    for epoch in 0..config.epochs {
        let result = (|| -> Result<()> {
            let lr = t.train_epoch(epoch)?;
            let train_eval = evaluate(&t.params, &t.spec, &t.train, config.eval_batch_size)?;
            let val_eval = evaluate(&t.params, &t.spec, &t.val, config.eval_batch_size)?;
            let averaged = match (&t.latest_avg, &t.newest_saved) {
                (Some(avg), Some(newest)) => Some(apply_bn_mode(avg.clone(), &t.spec, t.bn_mode, newest, &t.train)?),
                _ => None,
            };
            let avg_eval = averaged
                .as_ref()
                .map(|p| evaluate(p, &t.spec, &t.val, config.eval_batch_size))
                .transpose()?;
            if let (Some(dir), Some(avg)) = (&t.out, &averaged) {
                if config.save_averaged {
                    let ckpt = Checkpoint::new(avg.clone(), t.slot - 1, t.step);
                    write_checkpoint(&ckpt, averaged_path(dir, epoch))?;
                }
            }
            let record = MetricsRecord {
                epoch,
                step: t.step,
                lr,
                train_loss: train_eval.loss,
                train_acc: train_eval.accuracy,
                val_loss: val_eval.loss,
                val_acc: val_eval.accuracy,
                avg_val_loss: avg_eval.map(|e| e.loss),
                avg_val_acc: avg_eval.and_then(|e| e.accuracy),
                wall_seconds: config.wall_clock.then(|| started.elapsed().as_secs_f64()),
            };
            if let Some(w) = &mut metrics_file {
                w.append(&record)?;
            }
            observer(&EpochEvent {
                epoch,
                params: &t.params,
                averaged_raw: t.latest_avg.as_ref(),
                averaged: averaged.as_ref(),
                record: &record,
            });
            metrics.push(record);
            final_avg = averaged;
            Ok(())
        })();
        result.map_err(|e| Error::RunAborted {
            epoch,
            source: Box::new(e),
        })?;
    }

    Ok(RunOutput {
        spec: t.spec,
        metrics,
        params: t.params,
        averaged: final_avg,
    })
}
