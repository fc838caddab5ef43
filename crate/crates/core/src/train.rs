//! Training loop and evaluation over in-memory samples.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{resize_bilinear, resize_mask, SegmentationSample};
use crate::loss::combined_loss;
use crate::metrics::{dsc, nsd, Mask, MetricsReport, SampleMetrics};
use crate::model::{DbSamModel, ModelInput};
use crate::nn::Session;
use crate::optim::{poly_lr, AdamW};
use crate::prompt::{perturb_box, shift_for_resolution, BoxPrompt};
use crate::{Error, Result, Rng, Tensor};

/// A sample resized once to both branch resolutions and to the mask size.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub vit: Tensor,
    pub conv: Tensor,
    /// Label at decoder resolution.
    pub mask: Mask,
    pub bbox: BoxPrompt,
    /// Side of the frame `bbox` lives in.
    pub frame: usize,
}

pub fn prepare(samples: &[SegmentationSample], model: &DbSamModel) -> Result<Vec<PreparedSample>> {
    let c = &model.config;
    let m = c.mask_size();
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            let (h, w) = s.size();
            if h != w {
                return Err(Error::dim("prepare", alloc::format!("sample {} is {h}x{w}, expected square", s.id)));
            }
            Ok(PreparedSample {
                id: s.id.clone(),
                vit: resize_bilinear(&s.image, (c.image_size_vit, c.image_size_vit))?,
                conv: resize_bilinear(&s.image, (c.image_size_conv, c.image_size_conv))?,
                mask: resize_mask(&s.mask, (m, m))?,
                bbox: s.bbox,
                frame: h,
            })
        })
        .collect()
}

fn batch_input(batch: &[&PreparedSample], boxes: Vec<BoxPrompt>) -> Result<ModelInput> {
    let frame = batch[0].frame;
    if batch.iter().any(|s| s.frame != frame) {
        return Err(Error::dim("batch", "samples in a batch must share one frame size"));
    }
    let vit: Vec<Tensor> = batch.iter().map(|s| s.vit.clone()).collect();
    let conv: Vec<Tensor> = batch.iter().map(|s| s.conv.clone()).collect();
    ModelInput::new(&vit, &conv, boxes, frame)
}

fn batch_target(batch: &[&PreparedSample]) -> Result<Tensor> {
    let m = batch[0].mask.height;
    let mut data = Vec::with_capacity(batch.len() * m * m);
    for s in batch {
        data.extend(s.mask.data.iter().map(|&v| v as u8 as f64));
    }
    Tensor::new(&[batch.len(), 1, m, m], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub model: DbSamModel,
    pub optimizer: AdamW,
    rng: Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: DbSamModel) -> Self {
        let c = &model.config;
        let optimizer = AdamW::new(c.beta1, c.beta2, c.weight_decay);
        // separate stream from the one that initialized the weights
        let rng = crate::seeded_rng(c.seed ^ 0x5e_ed0f_da7a);
        Trainer {
            model,
            optimizer,
            rng,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// `epochs · ⌈n / batch_size⌉`.
    pub fn total_steps(&self, n: usize) -> usize {
        let bs = self.model.config.batch_size;
        self.model.config.epochs * n.div_ceil(bs)
    }

    /// Forward, backward and one AdamW update on `batch`; returns the loss.
    pub fn train_step(&mut self, batch: &[&PreparedSample], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::dim("train_step", "empty batch"));
        }
        let shift = shift_for_resolution(self.model.config.max_shift, batch[0].frame);
        let boxes = batch
            .iter()
            .map(|s| perturb_box(&s.bbox, shift, s.frame, s.frame, &mut self.rng))
            .collect();
        let input = batch_input(batch, boxes)?;
        let target = batch_target(batch)?;
        let (loss, out) = {
            let mut s = Session::train(&self.model.store, &mut self.rng);
            let logits = self.model.forward(&mut s, &input)?;
            let loss = combined_loss(&mut s.tape, logits, &target)?;
            let value = s.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step });
            }
            s.tape.backward(loss)?;
            (value, s.finish())
        };
        let store = &mut self.model.store;
        store.zero_grad();
        out.accumulate_grads(store);
        out.apply_buffer_updates(store)?;
        self.optimizer.step(store, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs every epoch of the configured schedule, reshuffling each epoch.
    pub fn fit(&mut self, data: &[PreparedSample], mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let c = self.model.config.clone();
        let total = self.total_steps(data.len());
        let mut log = Vec::with_capacity(total);
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..c.epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(c.batch_size) {
                let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
                let lr = poly_lr(self.step, total, c.lr0, c.poly_power);
                let step = self.step;
                let loss = self.train_step(&batch, lr)?;
                let entry = StepLog { step, epoch, lr, loss };
                on_step(&entry);
                log.push(entry);
            }
        }
        Ok(log)
    }
}

/// DSC and NSD of one prediction.
pub fn score(id: &str, pred: &Mask, gt: &Mask, tolerance: f64) -> Result<SampleMetrics> {
    Ok(SampleMetrics {
        id: id.into(),
        dsc: dsc(pred, gt)?,
        nsd: nsd(pred, gt, tolerance)?,
    })
}

/// Eval-mode predictions with unperturbed boxes, binarized at probability 0.5.
pub fn predict_masks(model: &DbSamModel, data: &[PreparedSample]) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(data.len());
    let bs = model.config.batch_size.max(1);
    for chunk in data.chunks(bs) {
        let batch: Vec<&PreparedSample> = chunk.iter().collect();
        let input = batch_input(&batch, batch.iter().map(|s| s.bbox).collect())?;
        for logits in model.predict(&input)? {
            out.push(Mask::from_logits(&logits)?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &DbSamModel, data: &[PreparedSample], tolerance: f64) -> Result<MetricsReport> {
    let preds = predict_masks(model, data)?;
    let rows = preds
        .iter()
        .zip(data)
        .map(|(p, s)| score(&s.id, p, &s.mask, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(rows))
}
