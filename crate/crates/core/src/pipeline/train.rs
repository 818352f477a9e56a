use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chromalink_autograd::optim::{AdamW, AdamWConfig};
use chromalink_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::block_ranges;
use super::model::{stack_ab, stack_l, ColorizationModel, SPATIAL_MULTIPLE};
use crate::colorspace::{lab_to_rgb_graph, LabFrame};
use crate::data::Clip;
use crate::error::{ensure_shape, Error, Result};
use crate::flowlab::{FlowField, OcclusionMask};
use crate::losses::{
    l1_loss, lsgan_discriminator_loss, lsgan_generator_loss, perceptual_loss, smooth_loss, temporal_loss, total_loss,
    LossTerms,
};

pub const GENERATOR_GROUPS: [&str; 2] = ["backbone", "others"];
pub const FROZEN_FOR_GENERATOR: [&str; 2] = ["disc", "frozen"];

/// Graph-level objective of one clip.
pub struct ClipObjective {
    pub terms: LossTerms,
    pub total: Var,
    /// `L×3×H×W` predicted and ground-truth scaled Lab.
    pub pred_lab: Var,
    pub real_lab: Var,
}

/// Streams a clip through the model in blocks of `n` with the first frame as
/// reference and assembles every weighted loss term over the whole clip.
/// Terms with zero weight are skipped.
pub fn clip_objective<T: Scalar>(
    model: &ColorizationModel<T>,
    g: &Graph<'_, T>,
    frames: &[LabFrame<T>],
    pairs: Option<&[(FlowField, OcclusionMask)]>,
    n: usize,
) -> Result<ClipObjective> {
    let cfg = &model.config;
    let first = frames.first().ok_or_else(|| Error::Input("empty clip".into()))?;
    let (h, w) = (first.height(), first.width());
    ensure_shape(h % SPATIAL_MULTIPLE == 0 && w % SPATIAL_MULTIPLE == 0, || {
        format!("training frames must be multiples of {SPATIAL_MULTIPLE}, got {w}×{h}")
    })?;
    let l_all = g.constant(stack_l(frames)?);
    let gt_ab = g.constant(stack_ab(frames)?);
    let ref_lab = g.constant(first.to_lab_tensor().reshape(&[1, 3, h, w])?);

    let mut info = None;
    let mut abs = Vec::new();
    for r in block_ranges(frames.len(), n)? {
        let block_l = g.slice(l_all, 0, r.start, r.len());
        let out = model.forward_block(g, block_l, ref_lab, info)?;
        info = model.store_linkage(g, info, &out)?;
        abs.push(out.ab);
    }
    let ab = if abs.len() == 1 { abs[0] } else { g.concat(&abs, 0) };
    let weights = cfg.loss_weights();
    let pred_lab = g.concat(&[l_all, ab], 1);
    let real_lab = g.concat(&[l_all, gt_ab], 1);

    let mut terms = LossTerms::default();
    if weights.l1 > 0.0 {
        terms.l1 = Some(l1_loss(g, ab, gt_ab)?);
    }
    if weights.perc > 0.0 {
        let pred_rgb = lab_to_rgb_graph(g, l_all, ab);
        let gt_rgb = lab_to_rgb_graph(g, l_all, gt_ab);
        terms.perc = Some(perceptual_loss(g, &model.perceptual, pred_rgb, gt_rgb)?);
    }
    if weights.temp > 0.0 {
        if let Some(pairs) = pairs {
            ensure_shape(pairs.len() + 1 == frames.len(), || {
                format!("{} flow pairs for {} frames", pairs.len(), frames.len())
            })?;
            let per_frame = |t: usize| g.reshape(g.slice(ab, 0, t, 1), &[2, h, w]);
            let mut parts = Vec::with_capacity(pairs.len());
            for (t, (flow, mask)) in pairs.iter().enumerate() {
                parts.push(temporal_loss(g, per_frame(t), per_frame(t + 1), flow, mask)?);
            }
            if !parts.is_empty() {
                terms.temp = Some(g.scale(g.add_n(&parts), T::of(1.0 / parts.len() as f64)));
            }
        }
    }
    if weights.adv > 0.0 {
        terms.adv = Some(lsgan_generator_loss(g, model.disc.forward(g, pred_lab)?));
    }
    if weights.smooth > 0.0 {
        terms.smooth = Some(smooth_loss(g, ab, l_all, cfg.smooth_sigma)?);
    }
    let total = total_loss(g, &terms, &weights)?;
    Ok(ClipObjective { terms, total, pred_lab, real_lab })
}

/// One optimizer step's losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub clip: usize,
    pub total: f64,
    pub l1: Option<f64>,
    pub perceptual: Option<f64>,
    pub temporal: Option<f64>,
    pub adversarial: Option<f64>,
    pub smooth: Option<f64>,
    pub discriminator: Option<f64>,
    pub lr_scale: f64,
    pub seconds: f64,
}

type FlowPair = (FlowField, OcclusionMask);
type Window<T> = (Vec<LabFrame<T>>, Option<Vec<FlowPair>>);

pub struct Trainer<T> {
    pub model: ColorizationModel<T>,
    opt_g: AdamW<T>,
    opt_d: AdamW<T>,
    pub step: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ColorizationModel<T>) -> Self {
        let cfg = &model.config;
        let adam = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, eps: 1e-8, weight_decay: cfg.weight_decay };
        let opt_g = AdamW::new(adam)
            .with_group("backbone", cfg.group_lr("backbone"))
            .with_group("others", cfg.group_lr("others"));
        let opt_d = AdamW::new(adam).with_group("disc", cfg.group_lr("disc"));
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_DA7A);
        Trainer { model, opt_g, opt_d, step: 0, rng, order: Vec::new() }
    }

    pub fn steps_per_epoch(&self, n_clips: usize) -> usize {
        match self.model.config.steps_per_epoch {
            0 => n_clips.max(1),
            s => s,
        }
    }

    pub fn total_steps(&self, n_clips: usize) -> usize {
        match self.model.config.max_steps {
            0 => self.model.config.epochs * self.steps_per_epoch(n_clips),
            s => s,
        }
    }

    /// Restricts a clip to at most `max_clip_len` frames from a random start.
    fn window(&mut self, clip: &Clip) -> Result<Window<T>> {
        let max = self.model.config.max_clip_len.max(1);
        let len = clip.len();
        let start = if len > max { self.rng.gen_range(0..=len - max) } else { 0 };
        let end = (start + max).min(len);
        let frames = clip.frames[start..end].iter().map(|f| f.cast()).collect();
        let pairs = clip
            .temporal_pairs(self.model.config.occlusion_thresholds())?
            .map(|p| p[start..end - 1].to_vec());
        Ok((frames, pairs))
    }

    /// Generator update on the clip followed by a discriminator update on
    /// the detached prediction.
    pub fn train_step(&mut self, clip: &Clip, epoch: usize, clip_index: usize) -> Result<StepRecord> {
        let started = Instant::now();
        let (frames, pairs) = self.window(clip)?;
        let lr_scale = self.model.config.lr_multiplier(epoch);
        let step = self.step;
        let with_step = |e: Error| match e {
            Error::NonFinite { component, .. } => Error::NonFinite { component, step },
            e => e,
        };
        let (rec, fake, real) = {
            let g = Graph::with_params(&self.model.store).freeze_groups(&FROZEN_FOR_GENERATOR);
            let obj = clip_objective(&self.model, &g, &frames, pairs.as_deref(), self.model.config.block_size)
                .map_err(with_step)?;
            let v = |x: Option<Var>| x.map(|x| g.scalar_value(x).as_f64());
            let rec = StepRecord {
                step,
                epoch,
                clip: clip_index,
                total: g.scalar_value(obj.total).as_f64(),
                l1: v(obj.terms.l1),
                perceptual: v(obj.terms.perc),
                temporal: v(obj.terms.temp),
                adversarial: v(obj.terms.adv),
                smooth: v(obj.terms.smooth),
                discriminator: None,
                lr_scale,
                seconds: 0.0,
            };
            let grads = g.backward(obj.total);
            let fake: Tensor<T> = (*g.value(obj.pred_lab)).clone();
            let real: Tensor<T> = (*g.value(obj.real_lab)).clone();
            drop(g);
            self.opt_g.step(&mut self.model.store, &grads, &GENERATOR_GROUPS, lr_scale);
            (rec, fake, real)
        };
        let mut rec = rec;
        if self.model.config.lambda_adv > 0.0 {
            let grads = {
                let g = Graph::with_params(&self.model.store);
                let d_real = self.model.disc.forward(&g, g.constant(real))?;
                let d_fake = self.model.disc.forward(&g, g.constant(fake))?;
                let loss = lsgan_discriminator_loss(&g, d_real, d_fake);
                let value = g.scalar_value(loss).as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFinite { component: "discriminator", step });
                }
                rec.discriminator = Some(value);
                g.backward(loss)
            };
            self.opt_d.step(&mut self.model.store, &grads, &["disc"], lr_scale);
        }
        rec.seconds = started.elapsed().as_secs_f64();
        self.step += 1;
        Ok(rec)
    }

    /// Runs the configured schedule over `clips`. With `out_dir`, writes
    /// `train_log.jsonl`, periodic `ckpt_XXXXXX.ckpt` files and `final.ckpt`.
    pub fn fit(&mut self, clips: &[Clip], out_dir: Option<&Path>, mut on_step: impl FnMut(&StepRecord)) -> Result<Vec<StepRecord>> {
        if clips.is_empty() {
            return Err(Error::Input("no training clips".into()));
        }
        let mut log = match out_dir {
            Some(d) => {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let p = d.join("train_log.jsonl");
                Some((BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?), p))
            }
            None => None,
        };
        let spe = self.steps_per_epoch(clips.len());
        let total = self.total_steps(clips.len());
        let mut records = Vec::with_capacity(total);
        while self.step < total {
            let epoch = self.step / spe;
            let k = self.step % spe;
            if self.order.is_empty() || k == 0 {
                self.order = (0..clips.len()).collect();
                self.order.shuffle(&mut self.rng);
            }
            let ci = self.order[k % self.order.len()];
            let rec = self.train_step(&clips[ci], epoch, ci)?;
            if let Some((w, p)) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            let every = self.model.config.log_every;
            if every > 0 && rec.step % every == 0 {
                log::info!("step {} epoch {} total {:.5} ({:.2}s)", rec.step, rec.epoch, rec.total, rec.seconds);
            }
            on_step(&rec);
            records.push(rec);
            let ck = self.model.config.checkpoint_every;
            if let (Some(d), true) = (out_dir, ck > 0 && self.step.is_multiple_of(ck)) {
                self.model.save(&checkpoint_path(d, self.step))?;
            }
        }
        if let Some((mut w, p)) = log {
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        if let Some(d) = out_dir {
            self.model.save(&d.join("final.ckpt"))?;
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.ckpt"))
}
