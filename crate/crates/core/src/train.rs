//! Bag-level training loop: one Adam step per bag, shuffled each epoch,
//! early stopping on validation loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss, Adam, LossMode, ModelDims, ModelParams, Objective};
use crate::seed;
use crate::slide::Bag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub loss_mode: LossMode,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Attention hidden width `L`.
    pub attention_dim: usize,
    /// Head hidden width; `None` means half the embedding width.
    pub hidden_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0038,
            weight_decay: 0.00079,
            dropout: 0.020,
            loss_mode: LossMode::CrossEntropy,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            attention_dim: 256,
            hidden_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and nonnegative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight decay must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if self.attention_dim == 0 || self.hidden_dim == Some(0) {
            return Err(Error::config("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self, embedding_dim: usize) -> ModelDims {
        ModelDims {
            l: self.attention_dim,
            m: embedding_dim,
            hidden: vec![self.hidden_dim.unwrap_or((embedding_dim / 2).max(1))],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochRecord>,
}

pub fn class_counts(bags: &[Bag]) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for b in bags {
        counts[usize::from(b.label.min(1))] += 1;
    }
    counts
}

/// Mean loss over `bags` with dropout disabled.
pub fn mean_loss(params: &ModelParams, bags: &[Bag], objective: &Objective) -> Result<f64> {
    if bags.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for bag in bags {
        let fwd = params.forward(&bag.features)?;
        total += loss(fwd.logits, bag.label, objective)?;
    }
    Ok(total / bags.len() as f64)
}

/// Train from a fresh seeded initialisation.
pub fn train(train_bags: &[Bag], val_bags: &[Bag], config: &TrainConfig) -> Result<TrainOutcome> {
    let dim = train_bags
        .first()
        .map(Bag::dim)
        .ok_or_else(|| Error::config("training set is empty"))?;
    let init = ModelParams::init(&config.dims(dim), seed::derive(config.seed, &["init".into()]))?;
    train_from(init, train_bags, val_bags, config)
}

/// Train starting from `params`. Returns the parameters with the lowest
/// validation loss seen (training loss when there is no validation set).
pub fn train_from(
    mut params: ModelParams,
    train_bags: &[Bag],
    val_bags: &[Bag],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    params.validate()?;
    let counts = class_counts(train_bags);
    if counts.contains(&0) {
        return Err(Error::config(format!(
            "training set needs both classes, has {} / {}",
            counts[0], counts[1]
        )));
    }
    for b in train_bags.iter().chain(val_bags) {
        if b.dim() != params.embedding_dim() {
            return Err(Error::shape(format!(
                "slide {} has feature width {}, model expects {}",
                b.slide_id,
                b.dim(),
                params.embedding_dim()
            )));
        }
    }
    let objective = Objective {
        mode: config.loss_mode,
        class_counts: counts,
    };

    let mut adam = Adam::new(&params);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    for epoch in 0..config.max_epochs {
        let mut rng = seed::rng_for(config.seed, &["epoch".into(), epoch.into()]);
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for &i in &order {
            let bag = &train_bags[i];
            let masks = params.dropout_masks(config.dropout, &mut rng);
            let g = params.gradients(&bag.features, bag.label, &objective, Some(&masks))?;
            train_loss += g.loss;
            adam.step(&mut params, &g.params, config.learning_rate, config.weight_decay)?;
        }
        train_loss /= train_bags.len() as f64;
        let val_loss = if val_bags.is_empty() {
            train_loss
        } else {
            mean_loss(&params, val_bags, &objective)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best_epoch = epoch;
            best = params.clone();
        } else if epoch - best_epoch >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        best_epoch,
        best_val_loss: best_loss,
        log,
    })
}

pub fn write_log(log: &[EpochRecord], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auc;
    use crate::slide::{generate_cohort, CohortSpec, SynthSpec};

    fn cohort(seed: u64, slides: usize) -> Vec<Bag> {
        let spec = CohortSpec {
            slides,
            patients: slides,
            positive_fraction: 0.5,
            slide: SynthSpec {
                width: 12,
                height: 10,
                dim: 8,
                signal_fraction: 0.1,
                signal_shift: 3.0,
                ..SynthSpec::default()
            },
            seed,
        };
        generate_cohort(&spec).unwrap().into_iter().map(|s| s.bag).collect()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            attention_dim: 8,
            max_epochs: 30,
            patience: 30,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initial_parameters() {
        let bags = cohort(1, 8);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 3,
            ..quick()
        };
        let init = ModelParams::init(&cfg.dims(8), 77).unwrap();
        let out = train_from(init.clone(), &bags, &[], &cfg).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn same_seed_trains_bit_identically() {
        let bags = cohort(2, 10);
        let cfg = TrainConfig {
            max_epochs: 4,
            ..quick()
        };
        let a = train(&bags[..6], &bags[6..], &cfg).unwrap();
        let b = train(&bags[..6], &bags[6..], &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
        let c = train(&bags[..6], &bags[6..], &TrainConfig { seed: 5, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn separable_bags_are_learned() {
        let train_bags = cohort(3, 24);
        let test_bags = cohort(30, 20);
        let out = train(&train_bags, &[], &quick()).unwrap();
        let scores: Vec<f64> = test_bags
            .iter()
            .map(|b| out.params.forward(&b.features).unwrap().positive_probability())
            .collect();
        let labels: Vec<u8> = test_bags.iter().map(|b| b.label).collect();
        let a = auc(&scores, &labels).unwrap();
        assert!(a >= 0.95, "AUC {a}");
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let bags = cohort(4, 12);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            max_epochs: 60,
            patience: 3,
            ..quick()
        };
        let out = train(&bags[..8], &bags[8..], &cfg).unwrap();
        let best = out
            .log
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, best);
        assert_eq!(out.log[out.best_epoch].val_loss, best);
        assert!(out.log.len() <= out.best_epoch + 1 + cfg.patience);
        let again = mean_loss(&out.params, &bags[8..], &Objective::plain()).unwrap();
        assert!((again - best).abs() < 1e-12);
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let bags: Vec<Bag> = cohort(5, 8).into_iter().filter(|b| b.label == 1).collect();
        assert!(matches!(train(&bags, &[], &quick()), Err(Error::Config(_))));
        assert!(matches!(train(&[], &[], &quick()), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            TrainConfig { dropout: 1.0, ..quick() },
            TrainConfig { learning_rate: -1.0, ..quick() },
            TrainConfig { weight_decay: f64::NAN, ..quick() },
            TrainConfig { attention_dim: 0, ..quick() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
