//! Run orchestration: the training loop, dataset evaluation, and the
//! three-variant ablation. File handling stays in the CLI layer; everything
//! here works on in-memory samples so tests can drive it directly.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, epoch_order, mix_seed, split, stack_batch, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::loss::combined_loss_with;
use crate::metrics::{aggregate, binarize, compute_metrics, mask_to_bytes, DatasetMetrics, SegMetrics};
use crate::model::{build_model, parameter_count, Model};
use crate::optim::Adam;
use crate::tensor::{activation, Activation, Mode, Scalar, Tape, Tensor};

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// One line of the per-epoch training log.
#[derive(Debug, Clone)]
pub struct EpochRow {
    /// 1-based epoch number.
    pub epoch: u64,
    /// Mean combined loss over the training split.
    pub train_loss: f64,
    /// Validation IoU/F1 as fractions; NaN when the validation split is empty.
    pub val_iou: f64,
    pub val_f1: f64,
    pub wall_s: f64,
}

impl EpochRow {
    /// Comma-separated row. Every column except the trailing wall-time one
    /// is deterministic for a fixed seed in reference mode.
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.val_iou, self.val_f1, self.wall_s
        )
    }
}

/// Snapshot of the best-validation-IoU epoch.
#[derive(Debug, Clone)]
pub struct BestEpoch {
    pub epoch: u64,
    pub val_iou: f64,
    pub val_f1: f64,
    /// Fully serialized checkpoint taken at that epoch.
    pub bytes: Vec<u8>,
}

pub struct TrainResult<T: Scalar> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub rows: Vec<EpochRow>,
    /// None when the validation split is empty or epochs is 0.
    pub best: Option<BestEpoch>,
    pub split: SplitPlan,
}

fn to_dtype<T: Scalar>(t: &Tensor<f32>) -> Tensor<T> {
    let data: Vec<T> = t.data().iter().map(|&v| T::from_f64(v as f64)).collect();
    Tensor::from_vec(data, t.shape()).expect("shape unchanged")
}

fn index_by_id<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    let by_id: HashMap<&str, &Sample> =
        samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                Error::Data(format!("split references unknown sample id '{id}'"))
            })
        })
        .collect()
}

/// Eval-mode forward over `samples`, returning per-image metrics in input
/// order plus their aggregate.
pub fn evaluate_samples<T: Scalar>(
    model: &Model<T>,
    samples: &[&Sample],
    threshold: f64,
) -> Result<(Vec<(String, SegMetrics)>, DatasetMetrics)> {
    let mut per_image = Vec::with_capacity(samples.len());
    for sample in samples {
        let (x, y) = stack_batch(&[(&sample.image, &sample.mask)])?;
        let mut tape = Tape::no_grad();
        let logits = model.forward(&mut tape, &to_dtype::<T>(&x), Mode::Eval)?;
        let probs = activation(&mut tape, &logits, Activation::Sigmoid);
        let pred = binarize(&probs, threshold);
        let target = mask_to_bytes(&to_dtype::<T>(&y))?;
        per_image.push((sample.id.clone(), compute_metrics(&pred, &target)?));
    }
    let aggregate = aggregate(&per_image.iter().map(|(_, m)| *m).collect::<Vec<_>>())?;
    Ok((per_image, aggregate))
}

/// Run the full training loop on `samples`: shuffled 80/20 split, per-epoch
/// augmentation, Adam updates, per-epoch validation, best-IoU tracking.
/// `on_epoch` fires after each epoch with the freshly appended row.
pub fn train<T: Scalar>(
    config: &RunConfig,
    samples: &[Sample],
    with_optimizer: bool,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainResult<T>> {
    config.validate()?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let plan = split(&ids, config.seed, TRAIN_FRACTION)?;
    let train_samples = index_by_id(samples, &plan.train)?;
    let val_samples = index_by_id(samples, &plan.val)?;

    let model = build_model::<T>(&config.model, config.seed)?;
    let mut adam = Adam::with_hyperparams(
        model.parameters(),
        config.lr,
        config.beta1,
        config.beta2,
        config.eps,
    );

    let mut rows = Vec::with_capacity(config.epochs);
    let mut best: Option<BestEpoch> = None;

    for epoch in 0..config.epochs as u64 {
        let start = Instant::now();
        let order = epoch_order(train_samples.len(), config.seed, epoch);
        let mut loss_sum = 0.0;

        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            let augmented: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        config.seed,
                        epoch,
                        i as u64,
                    ));
                    augment(train_samples[i], &mut rng)
                })
                .collect();
            let items: Vec<(&Tensor<f32>, &Tensor<f32>)> =
                augmented.iter().map(|s| (&s.image, &s.mask)).collect();
            let (x, y) = stack_batch(&items)?;

            let mut tape = Tape::new();
            let logits = model.forward(&mut tape, &to_dtype::<T>(&x), Mode::Train)?;
            let loss = combined_loss_with(
                &mut tape,
                &logits,
                &to_dtype::<T>(&y),
                config.bce_weight,
                config.dice_smooth,
            )?;
            let loss_value = loss.data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss ({loss_value}) at epoch {}, batch {batch_id}",
                    epoch + 1
                )));
            }
            tape.backward(&loss)?;
            adam.step()?;
            model.zero_grad();
            loss_sum += loss_value * batch.len() as f64;
        }

        let train_loss = loss_sum / train_samples.len() as f64;
        let (val_iou, val_f1) = if val_samples.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let (_, agg) = evaluate_samples(&model, &val_samples, config.threshold)?;
            (agg.iou, agg.f1)
        };

        let row = EpochRow {
            epoch: epoch + 1,
            train_loss,
            val_iou,
            val_f1,
            wall_s: start.elapsed().as_secs_f64(),
        };
        if val_iou.is_finite() && best.as_ref().map_or(true, |b| val_iou > b.val_iou) {
            let adam_ref = with_optimizer.then_some(&adam);
            best = Some(BestEpoch {
                epoch: row.epoch,
                val_iou,
                val_f1,
                bytes: checkpoint::to_bytes(config, row.epoch, &model, adam_ref),
            });
        }
        on_epoch(&row);
        rows.push(row);
    }

    Ok(TrainResult { model, adam, rows, best, split: plan })
}

/// One row of the ablation report.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: &'static str,
    pub parameters: usize,
    /// Best validation IoU and the F1 at that epoch, as fractions.
    pub val_iou: f64,
    pub val_f1: f64,
    /// Seed of the split plan; identical across rows by construction.
    pub split_seed: u64,
}

/// The three toggle variants, in reporting order.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 3] = [
    ("baseline", false, false),
    ("+convmixer", true, false),
    ("+convmixer+msag", true, true),
];

/// Train the three ablation variants under the same seed, data, and split,
/// reporting the best validation metrics of each.
pub fn ablate<T: Scalar>(
    config: &RunConfig,
    samples: &[Sample],
    mut on_epoch: impl FnMut(&'static str, &EpochRow),
) -> Result<Vec<AblationRow>> {
    let mut report = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (variant, use_convmixer, use_msag) in ABLATION_VARIANTS {
        let mut variant_config = config.clone();
        variant_config.model.use_convmixer = use_convmixer;
        variant_config.model.use_msag = use_msag;
        let result = train::<T>(&variant_config, samples, false, |row| on_epoch(variant, row))?;
        let best = result.best.ok_or_else(|| {
            Error::Validation(
                "ablation needs a non-empty validation split and at least one epoch".to_string(),
            )
        })?;
        report.push(AblationRow {
            variant,
            parameters: parameter_count(&variant_config.model),
            val_iou: best.val_iou,
            val_f1: best.val_f1,
            split_seed: result.split.seed,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate;
    use crate::model::ModelConfig;

    fn small_config(epochs: usize) -> RunConfig {
        let mut config = RunConfig::default();
        config.model = ModelConfig::downsized();
        config.model.input_size = 32;
        config.epochs = epochs;
        config.batch_size = 4;
        config.lr = 1e-3;
        config
    }

    #[test]
    fn zero_epochs_leaves_model_at_initialization() {
        let config = small_config(0);
        let samples = generate(6, 32, 1, 3);
        let result = train::<f32>(&config, &samples, false, |_| {}).unwrap();
        assert!(result.rows.is_empty());
        assert!(result.best.is_none());

        let fresh = build_model::<f32>(&config.model, config.seed).unwrap();
        for (a, b) in fresh.named_tensors().iter().zip(result.model.named_tensors()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data().iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
            }
        }
        assert!(!result.model.bn_ready());
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let config = small_config(2);
        let samples = generate(6, 32, 1, 3);
        let a = train::<f32>(&config, &samples, true, |_| {}).unwrap();
        let b = train::<f32>(&config, &samples, true, |_| {}).unwrap();
        assert_eq!(a.split.train, b.split.train);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.train_loss.to_bits(), rb.train_loss.to_bits());
            assert_eq!(ra.val_iou.to_bits(), rb.val_iou.to_bits());
            assert_eq!(ra.val_f1.to_bits(), rb.val_f1.to_bits());
        }
        let ba = a.best.unwrap();
        let bb = b.best.unwrap();
        assert_eq!(ba.epoch, bb.epoch);
        assert_eq!(ba.bytes, bb.bytes);
    }

    #[test]
    fn loss_decreases_over_a_short_run() {
        let config = small_config(8);
        let samples = generate(8, 32, 2, 3);
        let result = train::<f32>(&config, &samples, false, |_| {}).unwrap();
        let first = result.rows.first().unwrap().train_loss;
        let last = result.rows.last().unwrap().train_loss;
        assert!(
            last < first,
            "training made no progress: first {first}, last {last}"
        );
        assert!(result.best.is_some());
    }

    #[test]
    fn best_checkpoint_restores_and_evaluates() {
        let config = small_config(3);
        let samples = generate(10, 32, 3, 3);
        let result = train::<f32>(&config, &samples, false, |_| {}).unwrap();
        let best = result.best.unwrap();

        let file = checkpoint::from_bytes(&best.bytes).unwrap();
        assert_eq!(file.epoch, best.epoch);
        let restored = build_model::<f32>(&file.config.model, 0).unwrap();
        file.apply_to_model(&restored).unwrap();

        let val_samples = index_by_id(&samples, &result.split.val).unwrap();
        let (_, agg) = evaluate_samples(&restored, &val_samples, config.threshold).unwrap();
        assert!((agg.iou - best.val_iou).abs() < 1e-12);
    }

    #[test]
    fn ablation_report_has_expected_structure() {
        let mut config = small_config(1);
        config.model.use_convmixer = true;
        config.model.use_msag = true;
        let samples = generate(6, 32, 4, 3);
        let report = ablate::<f32>(&config, &samples, |_, _| {}).unwrap();
        assert_eq!(report.len(), 3);
        assert_eq!(
            report.iter().map(|r| r.variant).collect::<Vec<_>>(),
            vec!["baseline", "+convmixer", "+convmixer+msag"]
        );
        assert!(report[0].parameters < report[1].parameters);
        assert!(report[1].parameters < report[2].parameters);
        assert!(report.iter().all(|r| r.split_seed == config.seed));
        assert!(report.iter().all(|r| r.val_iou.is_finite()));
    }

    #[test]
    fn epoch_row_csv_shape() {
        let row = EpochRow {
            epoch: 3,
            train_loss: 0.51234567,
            val_iou: 0.75,
            val_f1: 0.8,
            wall_s: 1.25,
        };
        assert_eq!(row.csv(), "3,0.512346,0.750000,0.800000,1.250");
    }
}
