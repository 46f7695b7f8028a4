//! Training over seen-class labels with AdamW, and dataset evaluation.

use crate::config::{Config, TrainConfig};
use crate::data::{Dataset, GzlssSplit, Sample};
use crate::error::{Error, Result, TensorError};
use crate::graph::Graph;
use crate::loss::{one_hot, pixel_probabilities, total_loss};
use crate::metrics::{ConfusionMatrix, LabelMap, SegMetrics};
use crate::model::{forward, segment};
use crate::params::{Binder, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

/// Decoupled-weight-decay Adam over the trainable entries of a store.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Frozen parameters are never touched, even if a gradient
    /// for them is supplied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            if !store.param(name).is_some_and(|p| p.trainable) {
                continue;
            }
            let p = store.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Batch-mean loss terms at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub focal: f64,
    pub ssim: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,focal,ssim,total";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.step, self.focal, self.ssim, self.total)
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(out, "{}", r.csv_line()).unwrap();
    }
    out
}

/// Loss terms and trainable-parameter gradients for one sample.
pub struct SampleGrad {
    pub focal: f64,
    pub ssim: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Forward and backward pass for one training sample. Logits cover seen
/// classes only and pixels labelled with an unseen class carry no target.
pub fn sample_gradients(store: &ParamStore, cfg: &Config, split: &GzlssSplit, sample: &Sample) -> Result<SampleGrad> {
    let targets: Arc<[Option<usize>]> = split.training_targets(&sample.labels)?.into();
    let (h, w) = (sample.labels.height(), sample.labels.width());
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let logits = forward(&mut g, &mut b, cfg, &sample.image, split.seen())?;
    let probs = pixel_probabilities(&mut g, logits, cfg.encoder.grid_side(), h)?;
    if h != w {
        return Err(TensorError::shape("train", format!("image must be square, got {h}×{w}")).into());
    }
    let onehot = g.constant(one_hot(&targets, split.seen().len(), h, w));
    let terms = total_loss(&mut g, probs, onehot, targets, &cfg.loss)?;
    let value = |v| g.value(v).data()[0];
    let (focal, ssim, total) = (value(terms.focal), value(terms.ssim), value(terms.total));
    let gr = g.backward(terms.total)?;
    let grads = b
        .trainable()
        .into_iter()
        .map(|(name, v)| (name, gr.wrt_or_zero(v)))
        .collect();
    Ok(SampleGrad { focal, ssim, total, grads })
}

fn non_finite(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss { step, term: op },
        other => other,
    }
}

/// Trains the trainable entries of `store` in place. `on_step` sees every
/// loss record as it is produced.
pub fn train(
    store: &mut ParamStore,
    cfg: &Config,
    split: &GzlssSplit,
    data: &Dataset,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let tc = &cfg.train;
    let mut sampler = rng::stream(tc.seed, rng::TRAIN);
    let mut opt = AdamW::new(tc);
    let fixed: Vec<usize> = (0..tc.batch).map(|_| sampler.random_range(0..data.len())).collect();
    let mut log = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let batch: Vec<usize> = if tc.overfit {
            fixed.clone()
        } else {
            (0..tc.batch).map(|_| sampler.random_range(0..data.len())).collect()
        };
        let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut focal, mut ssim, mut total) = (0.0, 0.0, 0.0);
        for &i in &batch {
            let sg = sample_gradients(store, cfg, split, &data.samples[i]).map_err(|e| non_finite(step, e))?;
            focal += sg.focal;
            ssim += sg.ssim;
            total += sg.total;
            for (name, gt) in sg.grads {
                match acc.get_mut(&name) {
                    Some(a) => a.data_mut().iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y),
                    None => {
                        acc.insert(name, gt);
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let rec = LossRecord {
            step,
            focal: focal / n,
            ssim: ssim / n,
            total: total / n,
        };
        for (term, v) in [("focal", rec.focal), ("ssim", rec.ssim), ("total", rec.total)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { step, term });
            }
        }
        acc.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x /= n));
        opt.step(store, &acc);
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Predictions for every sample plus dataset-level metrics, restricting the
/// argmax to `subset`.
pub fn evaluate(store: &ParamStore, cfg: &Config, split: &GzlssSplit, data: &Dataset, subset: &[usize]) -> Result<(SegMetrics, Vec<LabelMap>)> {
    let mut cm = ConfusionMatrix::new(split.num_classes());
    let mut preds = Vec::with_capacity(data.len());
    for s in &data.samples {
        let pred = segment(store, cfg, &s.image, subset)?;
        cm.add(&pred, &s.labels)?;
        preds.push(pred);
    }
    Ok((cm.metrics(split.seen(), split.unseen()), preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_skips_frozen_and_moves_against_gradient() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), true);
        s.insert("b", Tensor::new(&[1], vec![5.0]).unwrap(), false);
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::new(&[2], vec![0.5, -0.5]).unwrap());
        grads.insert("b".to_string(), Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(&TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        });
        opt.step(&mut s, &grads);
        // first step moves each coordinate by lr · sign(g)
        assert!((s.get("a").unwrap().data()[0] - 0.9).abs() < 1e-6);
        assert!((s.get("a").unwrap().data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.get("b").unwrap().data()[0], 5.0);
    }

    #[test]
    fn csv_has_header() {
        let csv = loss_csv(&[LossRecord {
            step: 0,
            focal: 0.5,
            ssim: 0.25,
            total: 0.75,
        }]);
        assert_eq!(csv, "step,focal,ssim,total\n0,0.5,0.25,0.75\n");
    }
}
