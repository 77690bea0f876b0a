//! AdamW + one-cycle training loop for the grounder.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{training_prompt, ImageSample};
use super::{GrounderError, GrounderModel, GrounderNet};
use crate::detect2seg::{yolo_to_xyxy, BBox};
use crate::lora::LoraConfig;
use crate::metrics::iou_box;
use crate::tensor::{Matrix, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    FullFinetune,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate of the one-cycle schedule.
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub mode: TrainMode,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 200,
            warmup_frac: 0.10,
            max_grad_norm: 5.0,
            batch_size: 16,
            weight_decay: 0.01,
            mode: TrainMode::FullFinetune,
            lora: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GrounderError> {
        let bad = |m: &str| Err(GrounderError::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return bad("warmup_frac must lie in (0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.mode == TrainMode::Lora && self.lora.is_none() {
            return bad("lora mode needs a lora section");
        }
        Ok(())
    }
}

/// Linear warmup from `peak/25` to `peak` over the first `warmup_steps`,
/// then cosine annealing to `peak/25/1e4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub initial: f64,
    pub last: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl OneCycle {
    pub fn new(peak: f64, total_steps: usize, warmup_frac: f64) -> Self {
        let initial = peak / 25.0;
        let warmup_steps = ((total_steps as f64 * warmup_frac).round() as usize).clamp(1, total_steps.max(1));
        Self {
            peak,
            initial,
            last: initial / 1e4,
            total_steps,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step <= self.warmup_steps {
            let remaining = 1.0 - step as f64 / self.warmup_steps as f64;
            return self.peak - (self.peak - self.initial) * remaining;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = (std::f64::consts::PI * progress).cos();
        self.peak - (self.peak - self.last) * (1.0 - cos) / 2.0
    }
}

/// AdamW with decoupled weight decay. Only trainable parameters move.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(p.value.rows(), p.value.cols()));
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(p.value.rows(), p.value.cols()));
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for k in 0..theta.len() {
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (1.0 - b1) * g[k];
                let mhat = *mk / c1;
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (1.0 - b2) * g[k] * g[k];
                let vhat = *vk / c2;
                theta[k] -= lr * self.weight_decay * theta[k];
                theta[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipStats {
    /// Global L2 norm over trainable gradients before clipping.
    pub norm: f64,
    /// Factor applied to every gradient (1 when unclipped).
    pub scale: f64,
}

/// Rescales trainable gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> ClipStats {
    let norm = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.grad.sq_norm())
        .sum::<f64>()
        .sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    if scale != 1.0 {
        for p in store.iter_mut().filter(|p| p.trainable) {
            p.grad = p.grad.scale(scale);
        }
    }
    ClipStats { norm, scale }
}

/// `mse(box, gt)·[present] + bce(score, present)`.
pub fn sample_loss(
    net: &GrounderNet,
    tape: &mut Tape,
    store: &ParamStore,
    sample: &ImageSample,
    prompt: &str,
) -> Result<Var, GrounderError> {
    let out = net.forward(tape, store, &sample.pixels, prompt)?;
    let target = tape.constant(Matrix::scalar(if sample.present { 1.0 } else { 0.0 }));
    let cls = tape.bce_logits(out.score_logit, target)?;
    if !sample.present {
        return Ok(cls);
    }
    let gt = tape.constant(Matrix::row_vector(sample.gt_box.to_vec())?);
    let reg = tape.mse(out.boxes, gt)?;
    Ok(tape.add(reg, cls)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub clipped_steps: usize,
    pub lr_trace_peak_step: usize,
}

/// Trains `model` in place. In lora mode adapters are attached first when
/// the model has none; host tensors stay frozen throughout.
pub fn train(model: &mut GrounderModel, data: &[ImageSample], cfg: &TrainConfig) -> Result<TrainReport, GrounderError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(GrounderError::Config("training set is empty".into()));
    }
    match cfg.mode {
        TrainMode::Lora => {
            let lora = cfg.lora.as_ref().expect("validated");
            match &model.lora {
                None => model.apply_lora(lora)?,
                Some(existing) if existing == lora => {}
                Some(_) => return Err(GrounderError::Config("model carries a different adapter config".into())),
            }
        }
        TrainMode::FullFinetune => {
            if model.lora.is_some() {
                return Err(GrounderError::Config(
                    "full fine-tuning expects a plain host model".into(),
                ));
            }
            model.store.set_all_trainable(true);
        }
    }

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = OneCycle::new(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac);
    let mut adam = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
        clipped_steps: 0,
        lr_trace_peak_step: schedule.warmup_steps,
    };

    let GrounderModel { net, store, .. } = model;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            for &i in batch {
                let sample = &data[i];
                let mut tape = Tape::new();
                let loss = sample_loss(net, &mut tape, store, sample, training_prompt(sample, i))?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(GrounderError::NonFiniteLoss {
                        loss: value,
                        epoch,
                        step: report.steps,
                        case_id: sample.case_id.clone(),
                    });
                }
                total += value;
                tape.backward(loss, store)?;
            }
            let inv = 1.0 / batch.len() as f64;
            for p in store.iter_mut().filter(|p| p.trainable) {
                p.grad = p.grad.scale(inv);
            }
            if clip_grad_norm(store, cfg.max_grad_norm).scale < 1.0 {
                report.clipped_steps += 1;
            }
            adam.step(store, schedule.lr(report.steps));
            report.steps += 1;
        }
        report.epoch_losses.push(total / data.len() as f64);
    }
    Ok(report)
}

/// Mean IoU between the predicted and true box over present samples,
/// prompting with the true class.
pub fn evaluate_iou(model: &GrounderModel, data: &[ImageSample]) -> Result<f64, GrounderError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for s in data.iter().filter(|s| s.present) {
        let (b, _) = model.forward(&s.pixels, &s.gt_class)?;
        let side = super::IMAGE_SIZE;
        let to_box = |c: [f64; 4]| -> Result<BBox, GrounderError> {
            let [x1, y1, x2, y2] =
                yolo_to_xyxy(c[0], c[1], c[2], c[3], side, side).map_err(|e| GrounderError::Config(e.to_string()))?;
            Ok(BBox {
                x1,
                y1,
                x2,
                y2,
                score: 1.0,
                label: String::new(),
            })
        };
        sum += iou_box(&to_box(b)?, &to_box(s.gt_box)?);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
