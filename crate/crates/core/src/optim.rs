//! LAMB and the epoch/batch training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::ForwardCtx;
use crate::autodiff::Gradients;
use crate::dataio::{self, SampleSource};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::{self, Purpose};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        LambConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            clamp_lo: 0.0,
            clamp_hi: 10.0,
        }
    }
}

/// Moments are stored per parameter in the store's declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct LambState<T: Element = f32> {
    pub config: LambConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Fail with [`Error::NonFinite`] instead of writing non-finite values.
    pub strict_finite: bool,
}

impl<T: Element> LambState<T> {
    pub fn new(config: LambConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.tensor.shape().to_vec()))
                .collect()
        };
        LambState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            strict_finite: false,
        }
    }
}

/// One LAMB update of every parameter in `params`.
///
/// Per tensor: Adam moments with bias correction, `u = m̂ / (√v̂ + ε) + λw`
/// (no `λw` for decay-exempt tensors), trust ratio `‖w‖ / ‖u‖` clamped to
/// the configured bounds (1 if either norm is 0), then `w -= lr · ratio · u`.
/// Arithmetic is done in 64-bit and rounded to `T` on store.
pub fn lamb_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut LambState<T>,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::dim(
            "lamb_step",
            format!(
                "optimizer state has {} tensors, store has {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    for (i, e) in params.entries().iter().enumerate() {
        let g = grads
            .get(&e.name)
            .ok_or_else(|| Error::arg(format!("no gradient for parameter {}", e.name)))?;
        if g.shape() != e.tensor.shape() || state.m[i].shape() != e.tensor.shape() {
            return Err(Error::dim(
                "lamb_step",
                format!(
                    "{}: parameter {:?}, gradient {:?}",
                    e.name,
                    e.tensor.shape(),
                    g.shape()
                ),
            ));
        }
    }
    let c = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    let mut updates = Vec::with_capacity(params.len());
    for (i, e) in params.entries().iter().enumerate() {
        let g = grads.get(&e.name).expect("checked above").data();
        let decay = if e.decay_exempt { 0.0 } else { c.weight_decay };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let w = e.tensor.data();
        let mut u = Vec::with_capacity(w.len());
        for j in 0..w.len() {
            let gj = g[j].as_f64();
            let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
            let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            u.push((mj / bc1) / ((vj / bc2).sqrt() + c.epsilon) + decay * w[j].as_f64());
        }
        let w_norm = w.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ratio = if w_norm == 0.0 || u_norm == 0.0 {
            1.0
        } else {
            (w_norm / u_norm).clamp(c.clamp_lo, c.clamp_hi)
        };
        updates.push((u, ratio));
    }
    for (e, (u, ratio)) in params.entries_mut().iter_mut().zip(updates) {
        for (w, uj) in e.tensor.data_mut().iter_mut().zip(u) {
            *w = T::of(w.as_f64() - c.learning_rate * ratio * uj);
        }
    }
    state.step = t;
    if state.strict_finite {
        let bad = params.entries().iter().any(|e| !e.tensor.is_finite())
            || state.m.iter().chain(&state.v).any(|x| !x.is_finite());
        if bad {
            return Err(Error::NonFinite { op: "lamb_step" });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy over the epoch's training batches as they were seen
    /// (augmented, dropout active).
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,seconds";

impl TrainRecord {
    /// CSV row; missing validation values are left empty.
    pub fn csv(&self, with_time: bool) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let secs = if with_time {
            format!("{:.3}", self.seconds)
        } else {
            "0".into()
        };
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_acc,
            opt(self.val_loss),
            opt(self.val_acc),
            secs
        )
    }
}

/// Writes the training curves. With `with_time = false` the seconds column is
/// written as 0 so that reruns produce identical files.
pub fn write_curves(path: &Path, records: &[TrainRecord], with_time: bool) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(CURVES_HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&r.csv(with_time));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lamb: LambConfig,
    pub seed: u64,
    pub augment: bool,
    /// Also return the parameters of the best validation-accuracy epoch.
    pub keep_best: bool,
    /// Stop early once an epoch's training accuracy reaches this value.
    pub stop_at_train_acc: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 100,
            batch_size: 32,
            lamb: LambConfig::default(),
            seed: 0,
            augment: true,
            keep_best: false,
            stop_at_train_acc: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub history: Vec<TrainRecord>,
    /// `(epoch, parameters)` of the best validation accuracy, when requested.
    pub best: Option<(usize, ParamStore<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn argmax_rows<T: Element>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Eval-mode pass over every sample of `source`.
pub fn evaluate(
    model: &Model<f32>,
    source: &dyn SampleSource,
    batch_size: usize,
) -> Result<EvalResult> {
    if source.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(source.len());
    let mut labels = Vec::with_capacity(source.len());
    let all: Vec<usize> = (0..source.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (images, y) = dataio::assemble_batch(source, chunk, None)?;
        let logits = model.logits(&images)?;
        let (loss, _) = crate::tensor::sparse_cross_entropy(&logits, &y)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        predictions.extend(argmax_rows(&logits));
        labels.extend(y);
    }
    let correct = predictions
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(EvalResult {
        loss: loss_sum / source.len() as f64,
        accuracy: correct as f64 / source.len() as f64,
        predictions,
        labels,
    })
}

/// Trains `model` in place; see [`fit_with`].
pub fn fit(
    model: &mut Model<f32>,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    fit_with(model, train, val, cfg, |_| {})
}

/// Mini-batch LAMB training. Shuffle order, augmentation and dropout masks
/// all come from streams keyed by `cfg.seed`, so runs are bit-reproducible.
/// `on_epoch` sees every record as it is produced.
pub fn fit_with(
    model: &mut Model<f32>,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    cfg: &FitConfig,
    mut on_epoch: impl FnMut(&TrainRecord),
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut state = LambState::new(cfg.lamb, &model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            Purpose::Shuffle,
            &[epoch as u64],
        ));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let aug = cfg.augment.then_some((cfg.seed, epoch as u64));
            let (images, labels) = dataio::assemble_batch(train, chunk, aug)?;
            let mut drop_rng = rng::stream(cfg.seed, Purpose::Dropout, &[epoch as u64, b as u64]);
            let mut ctx = ForwardCtx {
                training: true,
                dropout: model.config.dropout,
                rng: &mut drop_rng,
            };
            let (loss, logits, grads) = model.loss_and_grads(&images, &labels, &mut ctx)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss",
                });
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
            lamb_step(&mut model.params, &grads, &mut state)?;
        }
        let (val_loss, val_acc) = match val {
            Some(v) if !v.is_empty() => {
                let r = evaluate(model, v, cfg.batch_size)?;
                (Some(r.loss), Some(r.accuracy))
            }
            _ => (None, None),
        };
        let record = TrainRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            seconds: start.elapsed().as_secs_f64(),
        };
        if cfg.keep_best {
            if let Some(acc) = val_acc {
                if best.as_ref().is_none_or(|b| acc > b.1) {
                    best = Some((epoch, acc, model.params.clone()));
                }
            }
        }
        on_epoch(&record);
        let stop = cfg.stop_at_train_acc.is_some_and(|t| record.train_acc >= t);
        history.push(record);
        if stop {
            break;
        }
    }
    Ok(FitOutcome {
        history,
        best: best.map(|(e, _, p)| (e, p)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(items: &[(&str, Vec<f64>, bool)]) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        for (n, v, exempt) in items {
            s.insert(*n, Tensor::from_f64(vec![v.len()], v).unwrap(), *exempt)
                .unwrap();
        }
        s
    }

    fn grads(items: &[(&str, Vec<f64>)]) -> Gradients<f64> {
        let mut g = Gradients::default();
        for (n, v) in items {
            g.insert(*n, Tensor::from_f64(vec![v.len()], v).unwrap());
        }
        g
    }

    /// Straight transcription of the update equations for one tensor.
    fn oracle(
        w: &[f64],
        g: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        t: i32,
        c: &LambConfig,
        decay: bool,
    ) -> Vec<f64> {
        let lambda = if decay { c.weight_decay } else { 0.0 };
        let mut u = vec![0.0; w.len()];
        for i in 0..w.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - c.beta1.powi(t));
            let vh = v[i] / (1.0 - c.beta2.powi(t));
            u[i] = mh / (vh.sqrt() + c.epsilon) + lambda * w[i];
        }
        let wn: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let un: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = if wn == 0.0 || un == 0.0 {
            1.0
        } else {
            (wn / un).clamp(c.clamp_lo, c.clamp_hi)
        };
        w.iter()
            .zip(&u)
            .map(|(a, b)| a - c.learning_rate * r * b)
            .collect()
    }

    #[test]
    fn scalar_step_matches_oracle() {
        let c = LambConfig::default();
        let mut p = store(&[("w", vec![1.0], false)]);
        let mut s = LambState::new(c, &p);
        lamb_step(&mut p, &grads(&[("w", vec![1.0])]), &mut s).unwrap();
        // m̂ = 1, v̂ = 1, u = 1/(1 + 1e-6) + 1e-4, ratio = 1/|u|, so w = 1 - lr
        let want = oracle(&[1.0], &[1.0], &mut [0.0], &mut [0.0], 1, &c, true)[0];
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-10);
        assert!((want - 0.999).abs() < 1e-12);
    }

    #[test]
    fn vector_steps_match_oracle() {
        let c = LambConfig {
            learning_rate: 0.01,
            weight_decay: 0.05,
            ..LambConfig::default()
        };
        let mut w = vec![0.5, -1.5, 2.0, 0.25];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        let mut p = store(&[("w", w.clone(), false)]);
        let mut s = LambState::new(c, &p);
        for t in 1..=3 {
            let g = vec![0.3 * t as f64, -0.1, 0.7, -2.0 / t as f64];
            w = oracle(&w, &g, &mut m, &mut v, t, &c, true);
            lamb_step(&mut p, &grads(&[("w", g)]), &mut s).unwrap();
            for (a, b) in p.get("w").unwrap().data().iter().zip(&w) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let c = LambConfig {
            weight_decay: 0.0,
            ..LambConfig::default()
        };
        let mut p = store(&[("a", vec![1.0, -2.0], false), ("b", vec![0.5], true)]);
        let before = p.clone();
        let mut s = LambState::new(c, &p);
        lamb_step(
            &mut p,
            &grads(&[("a", vec![0.0, 0.0]), ("b", vec![0.0])]),
            &mut s,
        )
        .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn exempt_parameters_ignore_decay() {
        let mut p = store(&[("bias", vec![1.0, 2.0], true), ("w", vec![1.0, 2.0], false)]);
        let mut s = LambState::new(
            LambConfig {
                weight_decay: 0.5,
                ..LambConfig::default()
            },
            &p,
        );
        lamb_step(
            &mut p,
            &grads(&[("bias", vec![0.0, 0.0]), ("w", vec![0.0, 0.0])]),
            &mut s,
        )
        .unwrap();
        assert_eq!(p.get("bias").unwrap().data(), &[1.0, 2.0]);
        assert!(p.get("w").unwrap().data()[1] < 2.0);
    }

    #[test]
    fn shape_and_coverage_errors() {
        let mut p = store(&[("w", vec![1.0, 2.0], false)]);
        let mut s = LambState::new(LambConfig::default(), &p);
        assert!(matches!(
            lamb_step(&mut p, &grads(&[("w", vec![1.0])]), &mut s),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            lamb_step(&mut p, &grads(&[]), &mut s),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn quadratic_step_shrinks_magnitude() {
        // loss ½w², gradient w
        let mut p = store(&[("w", vec![1.0], true)]);
        let mut s = LambState::new(LambConfig::default(), &p);
        lamb_step(&mut p, &grads(&[("w", vec![1.0])]), &mut s).unwrap();
        let w = p.get("w").unwrap().data()[0];
        assert!(w.abs() < 1.0 && w > 0.0);
    }

    #[test]
    fn strict_mode_rejects_overflow() {
        let mut p = store(&[("w", vec![1.0], false)]);
        let mut s = LambState::new(LambConfig::default(), &p);
        s.strict_finite = true;
        let r = lamb_step(&mut p, &grads(&[("w", vec![f64::INFINITY])]), &mut s);
        assert!(matches!(r, Err(Error::NonFinite { op: "lamb_step" })));
    }

    proptest! {
        #[test]
        fn joint_scaling_keeps_the_ratio(
            w in proptest::collection::vec(-3.0f64..3.0, 1..6),
            k in 0.1f64..10.0,
        ) {
            prop_assume!(w.iter().any(|x| x.abs() > 1e-3));
            let g: Vec<f64> = w.iter().map(|x| 0.5 - x).collect();
            prop_assume!(g.iter().all(|x| x.abs() > 1e-2));
            // ε is the only scale-dependent term, so make it negligible
            let c = LambConfig { weight_decay: 0.0, epsilon: 1e-14, clamp_hi: 1e9, ..LambConfig::default() };
            let run = |scale: f64| {
                let ws: Vec<f64> = w.iter().map(|x| x * scale).collect();
                let gs: Vec<f64> = g.iter().map(|x| x * scale).collect();
                let mut p = store(&[("w", ws.clone(), false)]);
                let mut s = LambState::new(c, &p);
                lamb_step(&mut p, &grads(&[("w", gs)]), &mut s).unwrap();
                let delta: Vec<f64> = p.get("w").unwrap().data().iter().zip(&ws).map(|(a, b)| b - a).collect();
                (delta, ws)
            };
            // the Adam direction is scale-free up to ε, so the step is
            // proportional to ‖w‖, i.e. delta / ‖w‖ is unchanged
            let (d1, w1) = run(1.0);
            let (dk, wk) = run(k);
            let n1 = w1.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nk = wk.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (a, b) in d1.iter().zip(&dk) {
                prop_assert!((a / n1 - b / nk).abs() <= 1e-9 * (a / n1).abs() + 1e-15);
            }
        }

        #[test]
        fn moments_stay_finite_and_v_nonnegative(
            steps in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 3), 1..20),
        ) {
            let mut p = store(&[("w", vec![0.1, -0.2, 0.3], false)]);
            let mut s = LambState::new(LambConfig::default(), &p);
            s.strict_finite = true;
            for g in steps {
                lamb_step(&mut p, &grads(&[("w", g)]), &mut s).unwrap();
                prop_assert!(s.v[0].data().iter().all(|&x| x >= 0.0));
            }
        }
    }

    fn tiny_setup() -> (Model<f32>, dataio::InMemorySource) {
        let cfg = crate::model::ModelConfig {
            image_size: 8,
            patch_size: 4,
            ..crate::model::ModelConfig::tiny()
        };
        (
            Model::new(cfg).unwrap(),
            dataio::synthetic_blobs(6, 2, 8, 1),
        )
    }

    #[test]
    fn fit_is_deterministic() {
        let (m0, data) = tiny_setup();
        let cfg = FitConfig {
            epochs: 3,
            batch_size: 4,
            seed: 9,
            ..FitConfig::default()
        };
        let (mut a, mut b) = (m0.clone(), m0);
        let ha = fit(&mut a, &data, Some(&data), &cfg).unwrap().history;
        let hb = fit(&mut b, &data, Some(&data), &cfg).unwrap().history;
        let strip = |h: &[TrainRecord]| h.iter().map(|r| r.csv(false)).collect::<Vec<_>>();
        assert_eq!(strip(&ha), strip(&hb));
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (mut m, data) = tiny_setup();
        let before = m.params.clone();
        let cfg = FitConfig {
            epochs: 3,
            batch_size: 12,
            augment: false,
            lamb: LambConfig {
                learning_rate: 0.0,
                ..LambConfig::default()
            },
            ..FitConfig::default()
        };
        let h = fit(&mut m, &data, None, &cfg).unwrap().history;
        for r in &h {
            assert!((r.train_loss - h[0].train_loss).abs() <= 1e-6);
        }
        assert_eq!(m.params, before);
    }

    #[test]
    fn fit_rejects_empty_data_and_keeps_best() {
        let (mut m, data) = tiny_setup();
        let empty = dataio::InMemorySource::default();
        assert!(fit(&mut m, &empty, None, &FitConfig::default()).is_err());
        let cfg = FitConfig {
            epochs: 2,
            batch_size: 6,
            keep_best: true,
            ..FitConfig::default()
        };
        let out = fit(&mut m, &data, Some(&data), &cfg).unwrap();
        assert!(out.best.is_some());
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn curves_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let r = TrainRecord {
            epoch: 0,
            train_loss: 0.5,
            train_acc: 0.75,
            val_loss: None,
            val_acc: Some(1.0),
            seconds: 1.25,
        };
        write_curves(&path, &[r], false).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, format!("{CURVES_HEADER}\n0,0.5,0.75,,1,0\n"));
    }
}
