//! Loss, metric, optimizer, the training loop, and the ablation runner.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::tensor::{Tape, Tensor};

// ── Dice ────────────────────────────────────────────────────────────────

/// Overlap counts and the resulting coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DiceResult {
    pub intersection: usize,
    pub size_pred: usize,
    pub size_true: usize,
    pub dc: f64,
}

/// Dice coefficient `2|A n B| / (|A| + |B|)` over binary masks. Two empty
/// masks count as perfect agreement (`dc = 1`).
pub fn dice_coefficient(pred: &Tensor, truth: &Tensor) -> Result<DiceResult> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(
            "dice_coefficient",
            format!("{:?} vs {:?}", pred.shape(), truth.shape()),
        ));
    }
    let binary = |v: f64| v == 0.0 || v == 1.0;
    if !pred.data().iter().all(|&v| binary(v)) || !truth.data().iter().all(|&v| binary(v)) {
        return Err(Error::contract("dice_coefficient", "masks must be exactly 0/1"));
    }
    let mut intersection = 0;
    let mut size_pred = 0;
    let mut size_true = 0;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p == 1.0, t == 1.0);
        intersection += usize::from(p && t);
        size_pred += usize::from(p);
        size_true += usize::from(t);
    }
    let dc = if size_pred + size_true == 0 {
        1.0
    } else {
        2.0 * intersection as f64 / (size_pred + size_true) as f64
    };
    Ok(DiceResult { intersection, size_pred, size_true, dc })
}

/// Differentiable surrogate of `1 - DC` with Laplace smoothing:
/// `1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)`, `eps = 1`.
pub fn soft_dice_loss(tape: &Tape, prob: &Tensor, truth: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1.0;
    if prob.shape() != truth.shape() {
        return Err(Error::shape(
            "soft_dice_loss",
            format!("{:?} vs {:?}", prob.shape(), truth.shape()),
        ));
    }
    let overlap = tape.sum(&tape.mul(prob, truth)?)?;
    let numerator = tape.add_const(&tape.scale(&overlap, 2.0)?, EPS)?;
    let denominator = tape.add_const(&tape.add(&tape.sum(prob)?, &tape.sum(truth)?)?, EPS)?;
    let ratio = tape.div(&numerator, &denominator)?;
    tape.add_const(&tape.scale(&ratio, -1.0)?, 1.0)
}

/// Binarizes probabilities at a threshold.
pub fn binarize(prob: &Tensor, threshold: f64) -> Tensor {
    let data = prob.data().iter().map(|&p| f64::from(p >= threshold)).collect();
    Tensor::from_vec(data, prob.shape()).expect("same shape")
}

// ── Optimizer ───────────────────────────────────────────────────────────

/// Classic momentum SGD: `v = mu*v + g`, `p -= lr*v`.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, model: &Model) -> Result<Sgd> {
        if lr <= 0.0 && lr != 0.0 {
            return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        let velocity = (0..model.store().len())
            .map(|i| vec![0.0; model.store().values(i).len()])
            .collect();
        Ok(Sgd { lr, momentum, velocity })
    }

    /// Applies one update. `grads` is aligned with the store; `None` means
    /// no gradient flowed to that parameter this step.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), self.velocity.len(), "gradient/parameter count mismatch");
        let lr = self.lr;
        let momentum = self.momentum;
        for (i, grad) in grads.iter().enumerate() {
            let v = &mut self.velocity[i];
            match grad {
                Some(g) => {
                    model.store_mut().update(i, |p| {
                        for ((vi, pi), &gi) in v.iter_mut().zip(p).zip(g.data()) {
                            *vi = momentum * *vi + gi;
                            *pi -= lr * *vi;
                        }
                    });
                }
                None => {
                    model.store_mut().update(i, |p| {
                        for (vi, pi) in v.iter_mut().zip(p) {
                            *vi *= momentum;
                            *pi -= lr * *vi;
                        }
                    });
                }
            }
        }
    }
}

// ── Training ────────────────────────────────────────────────────────────

/// Training-loop hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Probability threshold for validation masks.
    pub threshold: f64,
    /// Shuffling seed; the loop is bit-deterministic given this.
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            threshold: 0.5,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dc: f64,
}

/// One training run's record. `wall_clock_secs` is informational only and
/// deliberately left out of the serialized report so reports stay
/// byte-identical across reruns.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub report_version: u32,
    pub variant: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_dc_mean: f64,
    pub final_dc_std: f64,
    #[serde(skip_serializing, default)]
    pub wall_clock_secs: f64,
}

pub const REPORT_VERSION: u32 = 1;

fn stack_batch(samples: &[&Sample]) -> (Tensor, Tensor) {
    let shape = samples[0].image.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    (
        Tensor::from_vec(images, &[samples.len(), 1, h, w]).expect("stacked image batch"),
        Tensor::from_vec(masks, &[samples.len(), 1, h, w]).expect("stacked mask batch"),
    )
}

/// Per-sample validation Dice of a model over samples, at a threshold.
/// Samples run through the model in batches; the coefficient stays
/// per-sample.
pub fn validation_dice(model: &Model, samples: &[Sample], threshold: f64) -> Result<Vec<f64>> {
    const VAL_BATCH: usize = 8;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(VAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = stack_batch(&refs);
        let prob = model.predict(&x)?;
        let plane: usize = prob.shape()[2] * prob.shape()[3];
        for (i, s) in chunk.iter().enumerate() {
            let slice = &prob.data()[i * plane..(i + 1) * plane];
            let pred: Vec<f64> = slice.iter().map(|&p| f64::from(p >= threshold)).collect();
            let pred = Tensor::from_vec(pred, s.mask.shape())?;
            out.push(dice_coefficient(&pred, &s.mask)?.dc);
        }
    }
    Ok(out)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean Dice of the better constant predictor (all-foreground or
/// all-background) over a sample set; the floor any trained model must beat.
pub fn best_constant_baseline(samples: &[Sample]) -> Result<f64> {
    let mut fg = Vec::with_capacity(samples.len());
    let mut bg = Vec::with_capacity(samples.len());
    for s in samples {
        let ones = Tensor::full(s.mask.shape(), 1.0);
        let zeros = Tensor::zeros(s.mask.shape());
        fg.push(dice_coefficient(&ones, &s.mask)?.dc);
        bg.push(dice_coefficient(&zeros, &s.mask)?.dc);
    }
    let (fg_mean, _) = mean_std(&fg);
    let (bg_mean, _) = mean_std(&bg);
    Ok(fg_mean.max(bg_mean))
}

/// Epoch shuffling order: a pure function of `(seed, epoch)`.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64),
    );
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains in place: epochs of minibatch soft-Dice descent with per-epoch
/// validation Dice at the configured threshold. Deterministic for a fixed
/// seed. A non-finite loss aborts with a diagnostic carrying the recent
/// loss history.
pub fn train(model: &mut Model, dataset: &Dataset, params: &TrainParams) -> Result<RunReport> {
    if dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if params.batch_size == 0 || params.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be >= 1".into()));
    }
    let started = std::time::Instant::now();
    let mut sgd = Sgd::new(params.learning_rate, params.momentum, model)?;
    let mut epochs = Vec::with_capacity(params.epochs);
    let mut recent = std::collections::VecDeque::with_capacity(5);

    for epoch in 1..=params.epochs {
        let order = epoch_order(dataset.train.len(), params.seed, epoch);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(params.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let (x, y) = stack_batch(&batch);
            let tape = Tape::new();
            let trace = model.run(&tape, &x, &Default::default())?;
            let loss = soft_dice_loss(&tape, &trace.prob, &y)?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: loss_value,
                    recent: recent.iter().copied().collect(),
                });
            }
            if recent.len() == 5 {
                recent.pop_front();
            }
            recent.push_back(loss_value);
            tape.backward(&loss)?;
            let grads: Vec<Option<Tensor>> =
                trace.param_leaves.iter().map(|leaf| tape.grad(leaf)).collect();
            sgd.step(model, &grads);
            loss_sum += loss_value;
            steps += 1;
        }
        let dcs = validation_dice(model, &dataset.val, params.threshold)?;
        let (val_dc, _) = if dcs.is_empty() { (f64::NAN, 0.0) } else { mean_std(&dcs) };
        epochs.push(EpochRecord { epoch, train_loss: loss_sum / steps as f64, val_dc });
    }

    let final_dcs = validation_dice(model, &dataset.val, params.threshold)?;
    let (final_dc_mean, final_dc_std) = mean_std(&final_dcs);
    Ok(RunReport {
        report_version: REPORT_VERSION,
        variant: variant_name_of(model.config()),
        seed: params.seed,
        epochs,
        final_dc_mean,
        final_dc_std,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Maps a configuration's flags back to the variant name, or a descriptive
/// fallback for off-grid flag combinations.
fn variant_name_of(cfg: &ModelConfig) -> String {
    let flags = (cfg.use_attention_gate, cfg.use_lstm_attention, cfg.use_bdlstm);
    Variant::ALL
        .into_iter()
        .find(|v| v.flags() == flags)
        .map(|v| v.name().to_string())
        .unwrap_or_else(|| format!("custom(ag={}, lstm_attn={}, bdlstm={})", flags.0, flags.1, flags.2))
}

// ── Ablation harness ────────────────────────────────────────────────────

/// Published full-scale Dice for a variant, attached to ablation reports as
/// explicitly non-reproducible reference metadata.
pub fn reference_dc(variant: Variant) -> (Option<f64>, &'static str) {
    match variant {
        Variant::BdlstmDenseUnet => (Some(0.8435), "published full-scale result for this variant"),
        Variant::BDenseUnet1 => (Some(0.8482), "published full-scale result for this variant"),
        Variant::BDenseUnet2 => (Some(0.8498), "published full-scale result for this variant"),
        Variant::DaBDenseUnet => (Some(0.8520), "published full-scale result for this variant"),
        Variant::SkipConcat => {
            (Some(0.7989), "closest published counterpart (plain-concat dense U-Net)")
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    /// Full-scale reference Dice; not reproducible on the synthetic
    /// desk-scale benchmark.
    pub reference_dc: Option<f64>,
    pub reference_note: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub report_version: u32,
    pub seed: u64,
    pub reference_disclaimer: &'static str,
    pub rows: Vec<AblationRow>,
}

pub const REFERENCE_DISCLAIMER: &str =
    "reference_dc values are published full-scale results on private clinical data; \
     they are context only and are not reproducible on this synthetic benchmark";

/// Trains every requested variant with the same seed and data order and
/// collects the rows. A variant that aborts is marked failed; the others
/// still run.
pub fn run_ablation(
    base_cfg: &ModelConfig,
    dataset: &Dataset,
    variants: &[Variant],
    params: &TrainParams,
) -> Result<AblationReport> {
    if variants.len() < 2 {
        return Err(Error::Config("ablation needs at least 2 variants".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let (reference, note) = reference_dc(variant);
        let row = match Model::build_variant(variant, base_cfg)
            .and_then(|mut model| train(&mut model, dataset, params))
        {
            Ok(report) => AblationRow {
                variant: variant.name().to_string(),
                failed: false,
                error: None,
                report: Some(report),
                reference_dc: reference,
                reference_note: note,
            },
            Err(e) => AblationRow {
                variant: variant.name().to_string(),
                failed: true,
                error: Some(e.to_string()),
                report: None,
                reference_dc: reference,
                reference_note: note,
            },
        };
        rows.push(row);
    }
    Ok(AblationReport {
        report_version: REPORT_VERSION,
        seed: params.seed,
        reference_disclaimer: REFERENCE_DISCLAIMER,
        rows,
    })
}

/// Renders the aligned `Model | DC` table with the reference column.
pub fn ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let name_w = report
        .rows
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(5)
        .max("Model".len());
    out.push_str(&format!("{:<name_w$}  {:>8}  {:>12}\n", "Model", "DC", "reference DC"));
    for row in &report.rows {
        let dc = match (&row.report, row.failed) {
            (Some(r), _) => format!("{:.4}", r.final_dc_mean),
            (None, true) => "FAILED".to_string(),
            (None, false) => "-".to_string(),
        };
        let reference = row.reference_dc.map_or_else(|| "-".to_string(), |v| format!("{v:.4}*"));
        out.push_str(&format!("{:<name_w$}  {:>8}  {:>12}\n", row.variant, dc, reference));
    }
    out.push_str("* published full-scale reference; not reproducible at this scale\n");
    out
}
