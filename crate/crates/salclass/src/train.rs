//! Joint training under `L = alpha * L_C + L_S`: SGD with momentum and
//! weight decay, 1/t learning-rate decay, seeded shuffling, early
//! stopping on stagnant validation metrics, and checkpointing.

use crate::checkpoint::{Checkpoint, TrainLog, TrainStateScalars};
use crate::classifier::ParamGroup;
use crate::data::{augment, center_crop, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::model::SalClassNet;
use crate::rng::indexed_rng;
use crate::saliency::SaliencyMap;
use crate::tensor::{BatchNormMode, Graph, Tensor};
use rand::seq::SliceRandom;
use std::path::Path;

// ------------------------------------------------------------ pure losses

/// Cross-entropy `-log(y_t)` for one softmax row, clamped at 1e-12.
pub fn cross_entropy(y: &[f64], t: usize, n: usize) -> Result<f64> {
    if t >= n || y.len() != n {
        return Err(Error::Contract(format!(
            "cross_entropy: class {t} out of range for {n} classes (row len {})",
            y.len()
        )));
    }
    Ok(-y[t].max(1e-12).ln())
}

/// Mean square error between two same-shaped maps, `1/(h*w) * sum((Y-T)^2)`.
pub fn mse_saliency(y: &SaliencyMap, t: &SaliencyMap) -> Result<f64> {
    if y.h != t.h || y.w != t.w {
        return Err(Error::Contract(format!(
            "mse_saliency: shape mismatch {}x{} vs {}x{}",
            y.h, y.w, t.h, t.w
        )));
    }
    let m = (y.h * y.w) as f64;
    Ok(y
        .values
        .iter()
        .zip(&t.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / m)
}

/// `L = alpha * L_C + L_S`; all three returned for logging.
pub fn multi_loss(
    y: &[f64],
    pred: &SaliencyMap,
    t: usize,
    target: &SaliencyMap,
    alpha: f64,
) -> Result<(f64, f64, f64)> {
    let l_c = cross_entropy(y, t, y.len())?;
    let l_s = mse_saliency(pred, target)?;
    Ok((alpha * l_c + l_s, l_c, l_s))
}

/// 1/t decay: `l / (1 + decay_constant * i)`.
pub fn lr_at(l: f64, i: u64, decay_constant: f64) -> f64 {
    l / (1.0 + decay_constant * i as f64)
}

/// Classical momentum SGD update with L2 weight decay:
/// `v = mu*v + (g + wd*p); p = p - lr*v`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
}

// -------------------------------------------------------------- accuracy

/// Mean class accuracy: per-class accuracy averaged over classes.
/// Classes with no samples are excluded; the second return value counts
/// them.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], n_classes: usize) -> (f64, usize) {
    let mut correct = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        total[l] += 1;
        if p == l {
            correct[l] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..n_classes {
        if total[c] > 0 {
            acc += correct[c] as f64 / total[c] as f64;
            present += 1;
        }
    }
    let empty = n_classes - present;
    if present == 0 {
        (0.0, empty)
    } else {
        (acc / present as f64, empty)
    }
}

// --------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSelection {
    /// Best validation mean class accuracy (full model, classifier).
    Mca,
    /// Best validation saliency MSE (saliency-only runs).
    Mse,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: f64,
    pub base_lr: f64,
    pub lr_fresh: f64,
    pub lr_pretrained: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub decay_constant: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub selection: ModelSelection,
    pub augment: AugmentConfig,
    /// Validation stagnation threshold: a metric counts as improved only
    /// when it moves by more than this.
    pub improvement_tol: f64,
}

impl TrainConfig {
    /// Reference hyperparameters with a desk-scale augmentation geometry.
    pub fn desk(seed: u64, image_size: usize) -> Self {
        TrainConfig {
            alpha: 0.2,
            base_lr: 0.001,
            lr_fresh: 0.001,
            lr_pretrained: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 16,
            decay_constant: 1e-5,
            patience_epochs: 10,
            max_epochs: 100,
            seed,
            selection: ModelSelection::Mca,
            augment: AugmentConfig::identity(image_size),
            improvement_tol: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        if self.patience_epochs < 1 || self.batch_size < 1 || self.max_epochs < 1 {
            return Err(Error::Config(
                "patience, batch size and max epochs must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- state

/// Mutable optimizer state carried across epochs.
pub struct TrainState {
    pub scalars: TrainStateScalars,
    /// Momentum buffers aligned with the model's parameter order.
    pub velocity: Vec<Vec<f64>>,
    /// Snapshot of the best model (params + bridge running stats).
    pub best: Option<Vec<(String, Tensor)>>,
    /// Per-epoch mean (L, L_C, L_S).
    pub loss_trace: Vec<(f64, f64, f64)>,
}

impl TrainState {
    pub fn new(model: &SalClassNet) -> Self {
        let velocity = model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        TrainState {
            scalars: TrainStateScalars {
                best_val_mca: f64::NEG_INFINITY,
                best_val_mse: f64::INFINITY,
                ..Default::default()
            },
            velocity,
            best: None,
            loss_trace: Vec::new(),
        }
    }
}

/// Per-epoch losses plus validation metrics.
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub mean_loss: f64,
    pub mean_loss_class: f64,
    pub mean_loss_sal: f64,
    pub val_mca: f64,
    pub val_mse: f64,
}

// -------------------------------------------------------------- trainer

pub struct Trainer {
    pub model: SalClassNet,
    pub config: TrainConfig,
    pub state: TrainState,
    decay_mask: Vec<bool>,
    group_lr: Vec<f64>,
}

impl Trainer {
    pub fn new(model: SalClassNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::new(&model);
        let (decay_mask, group_lr) = Self::param_meta(&model, &config);
        Ok(Trainer {
            model,
            config,
            state,
            decay_mask,
            group_lr,
        })
    }

    /// Weight decay is exempted for batch-norm gamma/beta; learning-rate
    /// base per parameter follows its group.
    fn param_meta(model: &SalClassNet, config: &TrainConfig) -> (Vec<bool>, Vec<f64>) {
        let names: Vec<String> = model
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let groups = model.parameter_groups();
        let decay_mask = names
            .iter()
            .map(|n| !(n.ends_with(".gamma") || n.ends_with(".beta")))
            .collect();
        let group_lr = groups
            .iter()
            .map(|g| match g {
                ParamGroup::Fresh => config.lr_fresh,
                ParamGroup::Pretrained => config.lr_pretrained,
            })
            .collect();
        (decay_mask, group_lr)
    }

    /// One pass over the training set in seeded shuffle order.
    pub fn train_epoch(&mut self, train_set: &[Sample]) -> Result<(f64, f64, f64)> {
        if train_set.is_empty() {
            return Err(Error::Contract("empty training set".into()));
        }
        let epoch = self.state.scalars.epoch;
        let cfg = &self.config;
        let size = cfg.augment.crop_size;

        // augment in sample order, then shuffle the variants
        let mut variants: Vec<(Tensor, SaliencyMap, usize)> = Vec::new();
        for (si, sample) in train_set.iter().enumerate() {
            let mut rng = indexed_rng(cfg.seed, "augment", epoch * 1_000_003 + si as u64);
            for (img, hm) in augment(sample, &cfg.augment, &mut rng)? {
                variants.push((img, hm, sample.label));
            }
        }
        let mut order: Vec<usize> = (0..variants.len()).collect();
        order.shuffle(&mut indexed_rng(cfg.seed, "shuffle", epoch));

        let mut sums = (0.0, 0.0, 0.0);
        let mut n_batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let b = chunk.len();
            let mut images = Vec::with_capacity(b * 3 * size * size);
            let mut maps = Vec::with_capacity(b * size * size);
            let mut labels = Vec::with_capacity(b);
            for &vi in chunk {
                let (img, hm, label) = &variants[vi];
                images.extend_from_slice(&img.data);
                maps.extend_from_slice(&hm.values);
                labels.push(*label);
            }
            let images = Tensor::new(&[b, 3, size, size], images)?;
            let targets = Tensor::new(&[b, 1, size, size], maps)?;

            let (l, l_c, l_s) = self.step(&images, &targets, &labels, bi)?;
            sums.0 += l;
            sums.1 += l_c;
            sums.2 += l_s;
            n_batches += 1;
        }
        let n = n_batches as f64;
        let losses = (sums.0 / n, sums.1 / n, sums.2 / n);
        self.state.loss_trace.push(losses);
        self.state.scalars.epoch += 1;
        Ok(losses)
    }

    /// One mini-batch: forward, multi-loss, backward, SGD update.
    fn step(
        &mut self,
        images: &Tensor,
        map_targets: &Tensor,
        labels: &[usize],
        batch_index: usize,
    ) -> Result<(f64, f64, f64)> {
        let cfg_alpha = self.config.alpha;
        let mut g = Graph::new();
        let x = g.leaf(images);
        let out = self.model.forward(&mut g, x, BatchNormMode::Train)?;
        let t = g.leaf(map_targets);
        let l_c = g.cross_entropy_mean(out.probs, labels)?;
        let l_s = g.mse_mean(out.full, t)?;
        let weighted = g.scale(l_c, cfg_alpha);
        let l = g.add(weighted, l_s)?;

        let (lv, lcv, lsv) = (g.data(l)[0], g.data(l_c)[0], g.data(l_s)[0]);
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {lv} at batch {batch_index}, iteration {}",
                self.state.scalars.iteration
            )));
        }
        g.backward(l)?;

        let iter = self.state.scalars.iteration;
        let momentum = self.config.momentum;
        let wd = self.config.weight_decay;
        let decay_constant = self.config.decay_constant;
        let ids = out.bindings.ids.clone();
        let mut params = self.model.params_mut();
        debug_assert_eq!(ids.len(), params.len());
        for (pi, (param, id)) in params.iter_mut().zip(&ids).enumerate() {
            let Some(grad) = g.grad(*id) else { continue };
            let lr = lr_at(self.group_lr[pi], iter, decay_constant);
            let pwd = if self.decay_mask[pi] { wd } else { 0.0 };
            sgd_step(
                &mut param.data,
                grad,
                &mut self.state.velocity[pi],
                lr,
                momentum,
                pwd,
            );
        }
        self.state.scalars.iteration += 1;
        Ok((lv, lcv, lsv))
    }

    /// Validation on center crops in eval mode: (MCA, saliency MSE).
    pub fn evaluate(&mut self, val_set: &[Sample]) -> Result<(f64, f64)> {
        let size = self.config.augment.crop_size;
        let batch = self.config.batch_size;
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        let mut mse_sum = 0.0;
        let mut n = 0usize;
        let crops: Vec<(Tensor, SaliencyMap, usize)> = val_set
            .iter()
            .map(|s| {
                center_crop(s, &self.config.augment).map(|(img, hm)| (img, hm, s.label))
            })
            .collect::<Result<_>>()?;
        for chunk in crops.chunks(batch) {
            let b = chunk.len();
            let mut images = Vec::with_capacity(b * 3 * size * size);
            for (img, _, _) in chunk {
                images.extend_from_slice(&img.data);
            }
            let images = Tensor::new(&[b, 3, size, size], images)?;
            let mut g = Graph::new();
            let x = g.leaf(&images);
            let out = self.model.forward(&mut g, x, BatchNormMode::Eval)?;
            let probs = g.data(out.probs);
            let full = g.data(out.full);
            let n_classes = self.model.classifier.config.n_classes;
            for (i, (_, hm, label)) in chunk.iter().enumerate() {
                let row = &probs[i * n_classes..(i + 1) * n_classes];
                let pred = argmax(row);
                predictions.push(pred);
                labels.push(*label);
                let pm = SaliencyMap::new(size, size, full[i * size * size..(i + 1) * size * size].to_vec())?;
                mse_sum += mse_saliency(&pm, hm)?;
                n += 1;
            }
        }
        let (mca, _) = mean_class_accuracy(&predictions, &labels, self.model.classifier.config.n_classes);
        Ok((mca, mse_sum / n as f64))
    }

    /// Full training loop with early stopping and model selection.
    /// Returns the per-epoch reports. The best snapshot (per the
    /// configured selection metric) lands in `state.best`.
    pub fn train(
        &mut self,
        train_set: &[Sample],
        val_set: &[Sample],
        mut log: Option<&mut TrainLog>,
    ) -> Result<Vec<EpochReport>> {
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Contract("train and val sets must be non-empty".into()));
        }
        let mut reports = Vec::new();
        while (self.state.scalars.epoch as usize) < self.config.max_epochs {
            let (l, l_c, l_s) = self.train_epoch(train_set)?;
            let (val_mca, val_mse) = self.evaluate(val_set)?;
            let epoch = self.state.scalars.epoch; // already incremented
            let tol = self.config.improvement_tol;

            let mca_improved = val_mca > self.state.scalars.best_val_mca + tol;
            if mca_improved {
                self.state.scalars.best_val_mca = val_mca;
                self.state.scalars.epochs_since_mca_improved = 0;
            } else {
                self.state.scalars.epochs_since_mca_improved += 1;
            }
            let mse_improved = val_mse < self.state.scalars.best_val_mse - tol;
            if mse_improved {
                self.state.scalars.best_val_mse = val_mse;
                self.state.scalars.epochs_since_mse_improved = 0;
            } else {
                self.state.scalars.epochs_since_mse_improved += 1;
            }

            let selected = match self.config.selection {
                ModelSelection::Mca => mca_improved,
                ModelSelection::Mse => mse_improved,
            };
            if selected || self.state.best.is_none() {
                self.state.best = Some(self.snapshot_model());
            }

            if let Some(log) = log.as_deref_mut() {
                log.row(
                    epoch,
                    self.state.scalars.iteration,
                    lr_at(self.config.base_lr, self.state.scalars.iteration, self.config.decay_constant),
                    l,
                    l_c,
                    l_s,
                    val_mca,
                    val_mse,
                )?;
            }
            reports.push(EpochReport {
                mean_loss: l,
                mean_loss_class: l_c,
                mean_loss_sal: l_s,
                val_mca,
                val_mse,
            });

            let patience = self.config.patience_epochs as u64;
            if self.state.scalars.epochs_since_mca_improved >= patience
                && self.state.scalars.epochs_since_mse_improved >= patience
            {
                break;
            }
        }
        Ok(reports)
    }

    fn snapshot_model(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .model
            .named_params()
            .iter()
            .map(|(n, t)| (n.clone(), (*t).clone()))
            .collect();
        out.push((
            "bridge.running_mean".into(),
            Tensor::new(&[1], self.model.bridge.running.mean.clone()).unwrap(),
        ));
        out.push((
            "bridge.running_var".into(),
            Tensor::new(&[1], self.model.bridge.running.var.clone()).unwrap(),
        ));
        out
    }

    // ---------------------------------------------------------- persist

    /// Checkpoint of the *current* model plus optimizer state and the
    /// best snapshot; suitable for exact resume.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.snapshot_model() {
            tensors.push((format!("model.{name}"), t));
        }
        for ((name, _), v) in self.model.named_params().iter().zip(&self.state.velocity) {
            tensors.push((
                format!("momentum.{name}"),
                Tensor::new(&[v.len()], v.clone()).unwrap(),
            ));
        }
        if let Some(best) = &self.state.best {
            for (name, t) in best {
                tensors.push((format!("best.{name}"), t.clone()));
            }
        }
        Checkpoint {
            tensors,
            state: self.state.scalars.clone(),
        }
    }

    /// Restores current params, running stats, momentum and state from a
    /// checkpoint produced by `to_checkpoint`.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        restore_model(&mut self.model, ckpt, "model.")?;
        let names: Vec<String> = self
            .model
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        for (name, v) in names.iter().zip(self.state.velocity.iter_mut()) {
            let t = ckpt
                .get(&format!("momentum.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing momentum.{name}")))?;
            if t.data.len() != v.len() {
                return Err(Error::Checkpoint(format!("momentum.{name} length mismatch")));
            }
            v.copy_from_slice(&t.data);
        }
        let mut best = Vec::new();
        for name in names.iter().chain(
            ["bridge.running_mean".to_string(), "bridge.running_var".to_string()].iter(),
        ) {
            if let Some(t) = ckpt.get(&format!("best.{name}")) {
                best.push((name.clone(), t.clone()));
            }
        }
        self.state.best = if best.is_empty() { None } else { Some(best) };
        self.state.scalars = ckpt.state.clone();
        Ok(())
    }

    /// Swaps the best snapshot into the live model (for evaluation).
    pub fn load_best_into_model(&mut self) -> Result<()> {
        let Some(best) = self.state.best.clone() else {
            return Err(Error::Checkpoint("no best snapshot recorded".into()));
        };
        apply_named(&mut self.model, &best)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }
}

/// Applies `prefix`-named tensors from a checkpoint onto a model.
pub fn restore_model(model: &mut SalClassNet, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let named: Vec<(String, Tensor)> = {
        let names: Vec<String> = model
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut out = Vec::new();
        for name in names.iter().chain(
            ["bridge.running_mean".to_string(), "bridge.running_var".to_string()].iter(),
        ) {
            let t = ckpt
                .get(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing {prefix}{name}")))?;
            out.push((name.clone(), t.clone()));
        }
        out
    };
    apply_named(model, &named)
}

fn apply_named(model: &mut SalClassNet, named: &[(String, Tensor)]) -> Result<()> {
    let n_params = model.named_params().len();
    {
        let mut params = model.params_mut();
        for (i, (name, src)) in named.iter().take(n_params).enumerate() {
            if params[i].shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    params[i].shape, src.shape
                )));
            }
            params[i].data.copy_from_slice(&src.data);
        }
    }
    for (name, src) in named.iter().skip(n_params) {
        match name.as_str() {
            "bridge.running_mean" => model.bridge.running.mean.copy_from_slice(&src.data),
            "bridge.running_var" => model.bridge.running.var.copy_from_slice(&src.data),
            other => {
                return Err(Error::Checkpoint(format!("unexpected tensor {other}")));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------- classifier-only trainer

/// Trains a standalone classifier on fixed input tensors (`[C,S,S]` per
/// sample) under cross-entropy only. Used for RGB-vs-RGBS comparisons
/// where the saliency channel is precomputed.
pub struct ClassifierTrainer {
    pub model: crate::classifier::RgbsClassifier,
    pub config: TrainConfig,
    pub iteration: u64,
    velocity: Vec<Vec<f64>>,
    group_lr: Vec<f64>,
    best: Option<Vec<Tensor>>,
    best_val_mca: f64,
    epochs_since_improved: usize,
}

impl ClassifierTrainer {
    pub fn new(model: crate::classifier::RgbsClassifier, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .named_params()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let group_lr = model
            .parameter_groups()
            .iter()
            .map(|g| match g {
                ParamGroup::Fresh => config.lr_fresh,
                ParamGroup::Pretrained => config.lr_pretrained,
            })
            .collect();
        Ok(ClassifierTrainer {
            model,
            config,
            iteration: 0,
            velocity,
            group_lr,
            best: None,
            best_val_mca: f64::NEG_INFINITY,
            epochs_since_improved: 0,
        })
    }

    fn batch_tensor(chunk: &[&(Tensor, usize)]) -> Result<(Tensor, Vec<usize>)> {
        let shape = &chunk[0].0.shape;
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let b = chunk.len();
        let mut data = Vec::with_capacity(b * c * h * w);
        let mut labels = Vec::with_capacity(b);
        for (img, label) in chunk {
            data.extend_from_slice(&img.data);
            labels.push(*label);
        }
        Ok((Tensor::new(&[b, c, h, w], data)?, labels))
    }

    pub fn train_epoch(&mut self, data: &[(Tensor, usize)], epoch: u64) -> Result<f64> {
        // with flips enabled each sample contributes both orientations
        let variants: Vec<(Tensor, usize)> = if self.config.augment.horizontal_flips {
            data.iter()
                .flat_map(|(t, l)| [(crate::data::flip_horizontal_image(t), *l), (t.clone(), *l)])
                .collect()
        } else {
            Vec::new()
        };
        let data: &[(Tensor, usize)] = if variants.is_empty() { data } else { &variants };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut indexed_rng(self.config.seed, "shuffle", epoch));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let refs: Vec<&(Tensor, usize)> = chunk.iter().map(|&i| &data[i]).collect();
            let (images, labels) = Self::batch_tensor(&refs)?;
            let mut g = Graph::new();
            let mut b = crate::nn::Bindings::default();
            let x = g.leaf(&images);
            let out = self.model.forward(&mut g, &mut b, x)?;
            let l = g.cross_entropy_mean(out.probs, &labels)?;
            let lv = g.data(l)[0];
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "classifier loss {lv} at iteration {}",
                    self.iteration
                )));
            }
            g.backward(l)?;
            let iter = self.iteration;
            let momentum = self.config.momentum;
            let wd = self.config.weight_decay;
            let decay = self.config.decay_constant;
            let ids = b.ids.clone();
            let mut params = self.model.params_mut();
            for (pi, (param, id)) in params.iter_mut().zip(&ids).enumerate() {
                let Some(grad) = g.grad(*id) else { continue };
                let lr = lr_at(self.group_lr[pi], iter, decay);
                sgd_step(&mut param.data, grad, &mut self.velocity[pi], lr, momentum, wd);
            }
            self.iteration += 1;
            loss_sum += lv;
            n_batches += 1;
        }
        Ok(loss_sum / n_batches as f64)
    }

    pub fn evaluate(&mut self, data: &[(Tensor, usize)]) -> Result<f64> {
        let mut predictions = Vec::new();
        let mut labels = Vec::new();
        let n_classes = self.model.config.n_classes;
        for chunk in data.chunks(self.config.batch_size) {
            let refs: Vec<&(Tensor, usize)> = chunk.iter().collect();
            let (images, batch_labels) = Self::batch_tensor(&refs)?;
            let mut g = Graph::new();
            let mut b = crate::nn::Bindings::default();
            let x = g.leaf(&images);
            let out = self.model.forward(&mut g, &mut b, x)?;
            let probs = g.data(out.probs);
            for (i, label) in batch_labels.iter().enumerate() {
                predictions.push(argmax(&probs[i * n_classes..(i + 1) * n_classes]));
                labels.push(*label);
            }
        }
        Ok(mean_class_accuracy(&predictions, &labels, n_classes).0)
    }

    /// Trains with best-MCA selection and patience-based early stopping;
    /// the best parameters are restored into the model at the end.
    pub fn train(
        &mut self,
        train_set: &[(Tensor, usize)],
        val_set: &[(Tensor, usize)],
    ) -> Result<()> {
        for epoch in 0..self.config.max_epochs as u64 {
            self.train_epoch(train_set, epoch)?;
            let mca = self.evaluate(val_set)?;
            if mca > self.best_val_mca + self.config.improvement_tol {
                self.best_val_mca = mca;
                self.epochs_since_improved = 0;
            } else {
                self.epochs_since_improved += 1;
            }
            if self.epochs_since_improved == 0 || self.best.is_none() {
                self.best = Some(
                    self.model
                        .named_params()
                        .iter()
                        .map(|(_, t)| (*t).clone())
                        .collect(),
                );
            }
            if self.epochs_since_improved >= self.config.patience_epochs {
                break;
            }
        }
        if let Some(best) = self.best.clone() {
            let mut params = self.model.params_mut();
            for (p, src) in params.iter_mut().zip(&best) {
                p.data.copy_from_slice(&src.data);
            }
        }
        Ok(())
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_120() {
        let y = vec![1.0 / 120.0; 120];
        let v = cross_entropy(&y, 17, 120).unwrap();
        assert!((v - 120.0f64.ln()).abs() < 1e-12);
        assert!((v - 4.7875).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_certain_and_direct() {
        let mut y = vec![0.0; 5];
        y[2] = 1.0;
        assert_eq!(cross_entropy(&y, 2, 5).unwrap(), 0.0);

        let y = vec![0.7, 0.2, 0.1];
        let v = cross_entropy(&y, 0, 3).unwrap();
        assert!((v - (-0.7f64.ln())).abs() < 1e-15);
        assert!((v - 0.35667).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_out_of_range() {
        assert!(cross_entropy(&[0.5, 0.5], 2, 2).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = SaliencyMap::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(mse_saliency(&a, &a).unwrap(), 0.0);

        let b = SaliencyMap::new(2, 2, a.values.iter().map(|v| v + 0.5).collect()).unwrap();
        assert!((mse_saliency(&a, &b).unwrap() - 0.25).abs() < 1e-12);

        let c = SaliencyMap::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(mse_saliency(&a, &c).is_err());
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let mut rng = crate::rng::stream_rng(8, "mse-test");
        use rand::Rng;
        let y = SaliencyMap::new(10, 10, (0..100).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let t = SaliencyMap::new(10, 10, (0..100).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                let d = y.at(i, j) - t.at(i, j);
                acc += d * d;
            }
        }
        assert!((mse_saliency(&y, &t).unwrap() - acc / 100.0).abs() < 1e-12);
    }

    #[test]
    fn multi_loss_arithmetic() {
        let y = vec![1.0, 0.0];
        let m = SaliencyMap::new(1, 1, vec![0.5]).unwrap();
        let t = SaliencyMap::new(1, 1, vec![0.5]).unwrap();
        // alpha = 0 -> L == L_S
        let (l, _, l_s) = multi_loss(&y, &m, 1, &t, 0.0).unwrap();
        assert_eq!(l, l_s);
        // alpha = 0.2, L_C = 5, L_S = 0.1 -> 1.1
        assert!((0.2 * 5.0 + 0.1 - 1.1f64).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_points() {
        assert_eq!(lr_at(0.001, 0, 1e-5), 0.001);
        assert!((lr_at(0.001, 100_000, 1e-5) - 0.0005).abs() < 1e-15);
        assert!((lr_at(0.001, 300_000, 1e-5) - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn lr_strictly_decreasing() {
        let mut prev = lr_at(0.01, 0, 1e-5);
        for i in 1..1000u64 {
            let v = lr_at(0.01, i * 37, 1e-5);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn sgd_basic_steps() {
        // zero grad, zero wd: unchanged
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p, vec![1.0, -2.0]);

        // single scalar, mu=0, wd=0, lr=0.1, grad=1: p -= 0.1
        let mut p = vec![0.5];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.0, 0.0);
        assert!((p[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_hand_recursion() {
        // two steps, mu=0.9, grad 1, lr 0.1, p0=0 -> -0.1 then -0.29
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn mca_examples() {
        // perfect
        assert_eq!(mean_class_accuracy(&[0, 1, 2], &[0, 1, 2], 3).0, 1.0);
        // one class fully right, one fully wrong
        let (v, _) = mean_class_accuracy(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(v, 0.5);
        // empty class excluded with count
        let (v, empty) = mean_class_accuracy(&[0, 0], &[0, 0], 3);
        assert_eq!(v, 1.0);
        assert_eq!(empty, 2);
    }

    #[test]
    fn mca_equals_sample_accuracy_on_balanced_sets() {
        let labels = vec![0, 0, 1, 1, 2, 2];
        let preds = vec![0, 1, 1, 1, 0, 2];
        let (mca, _) = mean_class_accuracy(&preds, &labels, 3);
        let sample_acc = preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count() as f64
            / labels.len() as f64;
        assert!((mca - sample_acc).abs() < 1e-15);
    }
}
