//! Empirical-risk-minimisation training of the small CNN with a linear head.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc;
use crate::image::{Image, LabeledImage};
use crate::model::{softmax, AugmentationPolicy, ClassifierHead, CnnConfig, Extractor, LinearHead, SmallCnn, SplitModel, Transform};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Stop after this many epochs without a better validation AUC.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Random transforms applied to each training image every epoch.
    pub augmentation: Vec<Transform>,
    pub cnn: CnnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            patience: Some(15),
            seed: 0,
            augmentation: vec![Transform::HorizontalFlip, Transform::VerticalFlip],
            cnn: CnnConfig::desk_scale(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid optimiser settings lr={} momentum={} wd={}",
                self.learning_rate, self.momentum, self.weight_decay
            )));
        }
        self.cnn.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SplitModel,
    /// Epoch of the returned weights (1-based).
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub history: Vec<EpochStats>,
}

struct Best {
    epoch: usize,
    /// Validation AUC and loss.
    val: Option<(f64, f64)>,
    model: SplitModel,
}

struct Params {
    net: SmallCnn,
    head_w: Array2<f32>,
    head_b: Array1<f32>,
}

impl Params {
    fn to_model(&self) -> Result<SplitModel> {
        let head = LinearHead::new(self.head_w.clone(), self.head_b.clone())?;
        SplitModel::new(Extractor::Cnn(self.net.clone()), ClassifierHead::Linear(head))
    }
}

/// Train on `train`, keeping the weights with the best AUC on `val`. Without
/// a two-class validation set the final epoch is kept.
pub fn train_erm(train: &[LabeledImage], val: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let input = cfg.cnn.input_size;
    let inputs: Vec<(Image, usize)> = train
        .iter()
        .map(|s| (s.image.resized(input), s.label.index()))
        .collect();
    let val_labels: Vec<bool> = val.iter().map(|s| s.label.is_positive()).collect();
    let validate = val_labels.iter().any(|&l| l) && val_labels.iter().any(|&l| !l);

    let (channels, _, _) = cfg.cnn.feature_shape();
    let mut params = Params {
        net: SmallCnn::new(cfg.cnn.clone(), &mut rng)?,
        head_w: {
            let bound = (1.0 / channels as f32).sqrt();
            let dist = rand::distributions::Uniform::new_inclusive(-bound, bound);
            Array2::from_shape_simple_fn((2, channels), || rand::Rng::sample(&mut rng, dist))
        },
        head_b: Array1::zeros(2),
    };
    let mut velocity_conv = params.net.zero_grads();
    let mut velocity_w = Array2::<f32>::zeros(params.head_w.dim());
    let mut velocity_b = Array1::<f32>::zeros(2);
    let augment = AugmentationPolicy {
        replica_count: 1,
        transforms: cfg.augmentation.clone(),
        seed: cfg.seed,
    };

    let mut history = Vec::new();
    let mut best: Option<Best> = None;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = params.net.zero_grads();
            let mut grad_w = Array2::<f32>::zeros(params.head_w.dim());
            let mut grad_b = Array1::<f32>::zeros(2);
            for &i in batch {
                let (img, label) = &inputs[i];
                let x = if augment.is_identity() {
                    img.clone()
                } else {
                    augment.apply(img, &mut rng)
                };
                let (fmap, caches) = params.net.forward_cached(x.data())?;
                let (c, h, w) = fmap.dim();
                let area = (h * w) as f32;
                let pooled: Array1<f32> = fmap
                    .outer_iter()
                    .map(|ch| ch.sum() / area)
                    .collect();
                let logits: Vec<f64> = params
                    .head_w
                    .dot(&pooled)
                    .iter()
                    .zip(params.head_b.iter())
                    .map(|(&z, &b)| f64::from(z + b))
                    .collect();
                let probs = softmax(&logits);
                let loss = -probs[*label].ln();
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        loss: loss as f32,
                    });
                }
                loss_sum += loss;
                let d_logits: Array1<f32> = probs
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| (p - if k == *label { 1.0 } else { 0.0 }) as f32)
                    .collect();
                for k in 0..2 {
                    grad_w.row_mut(k).scaled_add(d_logits[k], &pooled);
                }
                grad_b += &d_logits;
                let d_pooled = params.head_w.t().dot(&d_logits);
                let d_fmap = Array3::from_shape_fn((c, h, w), |(ci, _, _)| d_pooled[ci] / area);
                params.net.backward(&caches, d_fmap, &mut grads);
            }
            let scale = 1.0 / batch.len() as f32;
            sgd_step(
                &mut params.head_w,
                &grad_w,
                &mut velocity_w,
                scale,
                cfg,
                true,
            );
            sgd_step(&mut params.head_b, &grad_b, &mut velocity_b, scale, cfg, false);
            for ((layer, g), v) in params
                .net
                .layers_mut()
                .iter_mut()
                .zip(&grads)
                .zip(velocity_conv.iter_mut())
            {
                sgd_step(&mut layer.weight, &g.weight, &mut v.weight, scale, cfg, true);
                sgd_step(&mut layer.bias, &g.bias, &mut v.bias, scale, cfg, false);
            }
        }
        let train_loss = loss_sum / inputs.len() as f64;
        if !train_loss.is_finite() || !weights_finite(&params) {
            return Err(Error::Training {
                epoch,
                loss: train_loss as f32,
            });
        }

        let model = params.to_model()?;
        let (val_auc, val_loss) = if validate {
            let probs = val
                .iter()
                .map(|s| model.predict(&s.image))
                .collect::<Result<Vec<_>>>()?;
            let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
            let loss = probs
                .iter()
                .zip(val)
                .map(|(p, s)| -p[s.label.index()].max(1e-12).ln())
                .sum::<f64>()
                / val.len() as f64;
            (Some(auc(&scores, &val_labels)?), Some(loss))
        } else {
            (None, None)
        };
        log::debug!("epoch {epoch}: loss {train_loss:.4} val_auc {val_auc:?} val_loss {val_loss:?}");
        history.push(EpochStats {
            epoch,
            train_loss,
            val_auc,
            val_loss,
        });

        // Higher AUC wins; equal AUC falls back to lower validation loss.
        let improved = match (&best, val_auc.zip(val_loss)) {
            (Some(b), Some((auc_now, loss_now))) => match b.val {
                Some((auc_best, loss_best)) => auc_now > auc_best || (auc_now == auc_best && loss_now < loss_best),
                None => true,
            },
            _ => true,
        };
        if improved {
            best = Some(Best {
                epoch,
                val: val_auc.zip(val_loss),
                model,
            });
        } else if let (Some(p), Some(b)) = (cfg.patience, &best) {
            if epoch - b.epoch >= p {
                break;
            }
        }
    }

    let best = best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        model: best.model,
        best_epoch: best.epoch,
        best_val_auc: best.val.map(|v| v.0),
        history,
    })
}

fn sgd_step<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f32, D>,
    grad: &ndarray::Array<f32, D>,
    velocity: &mut ndarray::Array<f32, D>,
    scale: f32,
    cfg: &TrainConfig,
    decay: bool,
) {
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    ndarray::Zip::from(&mut *param)
        .and(grad)
        .and(&mut *velocity)
        .for_each(|p, &g, v| {
            *v = cfg.momentum * *v + g * scale + wd * *p;
            *p -= cfg.learning_rate * *v;
        });
}

fn weights_finite(params: &Params) -> bool {
    params.head_w.iter().chain(params.head_b.iter()).all(|v| v.is_finite())
        && params
            .net
            .layers()
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvSpec;
    use crate::trapset::Label;

    fn tiny_cnn() -> CnnConfig {
        CnnConfig {
            input_size: (8, 8),
            in_channels: 3,
            layers: vec![
                ConvSpec {
                    out_channels: 4,
                    pool: true,
                },
                ConvSpec {
                    out_channels: 4,
                    pool: false,
                },
            ],
        }
    }

    /// Red images are melanoma, blue ones benign, with per-image brightness noise.
    fn separable(n: usize, seed: u64) -> Vec<LabeledImage> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let a = rng.gen_range(0.5..1.0);
                let b = rng.gen_range(0.0..0.3);
                let rgb = if positive { [a, 0.2, b] } else { [b, 0.2, a] };
                LabeledImage {
                    image_id: format!("s{i}"),
                    image: Image::filled(8, 8, rgb),
                    label: if positive { Label::Melanoma } else { Label::Benign },
                }
            })
            .collect()
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            patience: Some(10),
            seed,
            cnn: tiny_cnn(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_set_is_learned() {
        let train = separable(64, 1);
        let val = separable(20, 2);
        let out = train_erm(&train, &val, &cfg(3)).unwrap();
        let correct = train
            .iter()
            .filter(|s| {
                let p = out.model.predict(&s.image).unwrap();
                (p[1] > 0.5) == s.label.is_positive()
            })
            .count();
        assert!(correct as f64 / train.len() as f64 >= 0.95, "{correct}/64");
        assert_eq!(out.best_val_auc, Some(1.0));
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(train_erm(&[], &[], &cfg(0)), Err(Error::Precondition(_))));
    }

    #[test]
    fn repeat_runs_agree() {
        let train = separable(32, 5);
        let val = separable(12, 6);
        let mut c = cfg(9);
        c.epochs = 5;
        c.patience = None;
        let a = train_erm(&train, &val, &c).unwrap();
        let b = train_erm(&train, &val, &c).unwrap();
        assert_eq!(a.best_epoch, b.best_epoch);
        assert!((a.best_val_auc.unwrap() - b.best_val_auc.unwrap()).abs() < 1e-3);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_reports_epoch() {
        let train = separable(16, 7);
        let mut c = cfg(1);
        c.learning_rate = 1e30;
        c.momentum = 0.0;
        match train_erm(&train, &[], &c) {
            Err(Error::Training { epoch, .. }) => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
