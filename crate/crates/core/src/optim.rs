//! Adam, a halve-on-plateau learning-rate schedule, early stopping, and the
//! epoch loop shared by every training stage.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{seeded_rng, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("{0}")]
    Step(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Utterances whose gradients are averaged per optimizer step.
    pub accumulate: usize,
    pub max_epochs: usize,
    /// Consecutive stalled epochs before the learning rate is halved; 0 disables.
    pub scheduler_patience: usize,
    /// Consecutive stalled epochs before training stops; 0 disables.
    pub early_stop_patience: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.accumulate == 0 {
            return bad("accumulate must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.epsilon,
            t: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    /// One bias-corrected update; frozen parameters are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let frozen: Vec<bool> = store.params().iter().map(|p| p.frozen).collect();
        for (i, g) in grads.iter().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(crate::params::ParamId::from_index(i)).data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the monitored loss, then starts counting again.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    patience: usize,
    best: f64,
    stalled: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        PlateauScheduler { patience, best: f64::INFINITY, stalled: 0 }
    }

    /// Returns the factor to apply to the learning rate (1 or 0.5).
    pub fn observe(&mut self, loss: f64) -> f64 {
        if self.patience == 0 {
            return 1.0;
        }
        if loss < self.best {
            self.best = loss;
            self.stalled = 0;
            return 1.0;
        }
        self.stalled += 1;
        if self.stalled >= self.patience {
            self.stalled = 0;
            0.5
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, stalled: 0 }
    }

    /// Records a validation loss; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.stalled = 0;
            return (true, false);
        }
        self.stalled += 1;
        (false, self.patience > 0 && self.stalled >= self.patience)
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub si_sdri: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidStats {
    pub loss: f64,
    pub si_sdri: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub epochs_run: usize,
}

/// Runs epochs until `max_epochs` or early stopping and leaves `store` at the
/// best-validation parameters.
///
/// Epoch 0 only evaluates the initial parameters. Each later epoch visits the
/// training items in a seeded shuffled order, in groups of `accumulate`;
/// item gradients inside a group may be computed in parallel but are summed
/// in item order, so results do not depend on thread count.
pub fn fit<S, V, L>(
    store: &mut ParamStore,
    cfg: &TrainConfig,
    seed: u64,
    n_train: usize,
    step: S,
    validate: V,
    mut log: L,
) -> Result<TrainOutcome, TrainError>
where
    S: Fn(&ParamStore, usize) -> Result<(f64, Vec<Matrix>), TrainError> + Sync,
    V: Fn(&ParamStore) -> Result<ValidStats, TrainError>,
    L: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = Adam::new(cfg, store);
    let mut sched = PlateauScheduler::new(cfg.scheduler_patience);
    let mut stop = EarlyStopping::new(cfg.early_stop_patience);
    let mut records = Vec::new();
    let mut emit = |r: EpochRecord, records: &mut Vec<EpochRecord>| {
        log(&r);
        records.push(r);
    };

    let v0 = validate(store)?;
    if !v0.loss.is_finite() {
        return Err(TrainError::NonFinite { what: "validation loss", epoch: 0 });
    }
    emit(EpochRecord { epoch: 0, split: "valid".into(), loss: v0.loss, lr: adam.lr, si_sdri: v0.si_sdri }, &mut records);
    stop.observe(v0.loss);
    sched.observe(v0.loss);
    let mut best = store.clone();
    let mut best_epoch = 0;
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        order.shuffle(&mut seeded_rng(seed, epoch as u64));
        let mut total = 0.0;
        for group in order.chunks(cfg.accumulate) {
            let results: Vec<(f64, Vec<Matrix>)> =
                group.par_iter().map(|&i| step(store, i)).collect::<Result<_, _>>()?;
            let mut sum = store.zero_grads();
            for (loss, grads) in &results {
                total += loss;
                for (s, g) in sum.iter_mut().zip(grads) {
                    s.add_assign(g);
                }
            }
            let scale = 1.0 / group.len() as f64;
            for s in &mut sum {
                s.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            if !sum.iter().all(Matrix::is_finite) {
                return Err(TrainError::NonFinite { what: "gradient", epoch });
            }
            adam.step(store, &sum);
        }
        let train_loss = total / n_train as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite { what: "training loss", epoch });
        }
        emit(EpochRecord { epoch, split: "train".into(), loss: train_loss, lr: adam.lr, si_sdri: None }, &mut records);
        let v = validate(store)?;
        if !v.loss.is_finite() {
            return Err(TrainError::NonFinite { what: "validation loss", epoch });
        }
        emit(EpochRecord { epoch, split: "valid".into(), loss: v.loss, lr: adam.lr, si_sdri: v.si_sdri }, &mut records);
        let (improved, halt) = stop.observe(v.loss);
        if improved {
            best = store.clone();
            best_epoch = epoch;
        }
        adam.lr *= sched.observe(v.loss);
        if halt {
            break;
        }
    }
    store.load_values(&best).expect("same table");
    Ok(TrainOutcome { records, best_epoch, best_valid: stop.best(), epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            accumulate: 2,
            max_epochs: 200,
            scheduler_patience: 0,
            early_stop_patience: 0,
        }
    }

    #[test]
    fn halves_exactly_after_patience_stalls() {
        let mut s = PlateauScheduler::new(5);
        let losses = [1.0, 0.9, 0.95, 0.95, 0.91, 0.92, 0.93, 0.94, 0.8, 0.85];
        let factors: Vec<f64> = losses.iter().map(|&l| s.observe(l)).collect();
        assert_eq!(factors, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1.0, 1.0]);
        let mut off = PlateauScheduler::new(0);
        assert!((0..20).all(|_| off.observe(1.0) == 1.0));
    }

    #[test]
    fn early_stop_after_patience() {
        let mut e = EarlyStopping::new(3);
        assert_eq!(e.observe(1.0), (true, false));
        assert_eq!(e.observe(1.0), (false, false));
        assert_eq!(e.observe(2.0), (false, false));
        assert_eq!(e.observe(1.5), (false, true));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new("t");
        store.add("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut adam = Adam::new(&cfg(), &store);
        adam.step(&mut store, &[Matrix::from_vec(1, 2, vec![3.0, -0.5])]);
        let w = store.by_name("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_never_move() {
        let mut store = ParamStore::new("t");
        store.add("w", Matrix::from_vec(1, 1, vec![2.0]));
        store.set_frozen(true);
        let before = store.clone();
        let out = fit(
            &mut store,
            &TrainConfig { max_epochs: 5, ..cfg() },
            0,
            4,
            |_, _| Ok((1.0, vec![Matrix::scalar(1.0)])),
            |_| Ok(ValidStats { loss: 1.0, si_sdri: None }),
            |_| {},
        )
        .unwrap();
        assert_eq!(store, before);
        assert_eq!(out.epochs_run, 5);
    }

    #[test]
    fn fits_a_quadratic_and_keeps_best() {
        // minimize mean over targets t_i of (w - t_i)^2
        let targets = [1.0, 2.0, 3.0, 4.0];
        let mut store = ParamStore::new("t");
        store.add("w", Matrix::scalar(-5.0));
        let loss_at = |w: f64| targets.iter().map(|t| (w - t) * (w - t)).sum::<f64>() / 4.0;
        let out = fit(
            &mut store,
            &TrainConfig { early_stop_patience: 10, ..cfg() },
            3,
            4,
            |s, i| {
                let w = s.by_name("w").unwrap().get(0, 0);
                Ok(((w - targets[i]).powi(2), vec![Matrix::scalar(2.0 * (w - targets[i]))]))
            },
            |s| Ok(ValidStats { loss: loss_at(s.by_name("w").unwrap().get(0, 0)), si_sdri: None }),
            |_| {},
        )
        .unwrap();
        let w = store.by_name("w").unwrap().get(0, 0);
        assert!((w - 2.5).abs() < 0.05, "w = {w}");
        assert!((loss_at(w) - out.best_valid).abs() < 1e-15);
        let train: Vec<f64> = out.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
        assert!(train[0] > train[5]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut store = ParamStore::new("t");
        store.add("w", Matrix::scalar(0.0));
        let err = fit(
            &mut store,
            &cfg(),
            0,
            1,
            |_, _| Ok((f64::NAN, vec![Matrix::scalar(0.0)])),
            |_| Ok(ValidStats { loss: 1.0, si_sdri: None }),
            |_| {},
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }));
    }
}
