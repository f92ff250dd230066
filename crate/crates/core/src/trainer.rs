//! SGD training: schedule, optimizer state, and the epoch loop over sampled
//! crops.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctio::{extract_crop, sample_training_crops, stack_crops, CropPolicy, CtVolume, VoxelNodule};
use crate::error::{Error, Result};
use crate::kernels::ConvEngine;
use crate::net::{Network, ParamStore};
use crate::objective::{assign_targets, multitask_loss, AnchorSpec, TargetAssignment};

/// Optimization schedule and loop sizing.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub epochs: usize,
    /// Epochs at which the rate is multiplied by `lr_drop_factor`, ascending.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub crops_per_epoch: usize,
    pub rng_seed: u64,
    /// Checkpoint every this many epochs (plus always after the last).
    pub checkpoint_every: usize,
    /// Probability that a sampled crop centers on an annotated nodule.
    pub nodule_fraction: f64,
    /// Nodule-crop jitter, as a fraction of the crop side per axis.
    pub jitter_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.01,
            epochs: 100,
            lr_drop_epochs: vec![50, 80],
            lr_drop_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 1,
            crops_per_epoch: 16,
            rng_seed: 0,
            checkpoint_every: 10,
            nodule_fraction: 0.7,
            jitter_frac: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed so a frozen run can serve as a control.
        if self.initial_lr < 0.0 || !self.initial_lr.is_finite() {
            return Err(Error::Config(format!(
                "initial lr {} must be non-negative",
                self.initial_lr
            )));
        }
        if self.lr_drop_factor <= 0.0 {
            return Err(Error::Config(format!(
                "lr drop factor {} must be positive",
                self.lr_drop_factor
            )));
        }
        let strictly_increasing =
            self.lr_drop_epochs.windows(2).all(|w| w[0] < w[1]);
        if !strictly_increasing || self.lr_drop_epochs.iter().any(|&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "drop epochs {:?} must be strictly increasing and below {}",
                self.lr_drop_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.crops_per_epoch == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batch size and crops per epoch must be ≥ 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: the initial rate times one factor per drop
/// epoch already reached. Repeated multiplication keeps the conventional
/// decimal values (0.01 → 0.001 → 0.0001) bit-exact.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr_drop_epochs
        .iter()
        .filter(|&&d| d <= epoch)
        .fold(cfg.initial_lr, |lr, _| lr * cfg.lr_drop_factor)
}

/// Momentum buffers for every trainable parameter, keyed by name.
#[derive(Debug)]
pub struct SgdState {
    velocity: HashMap<String, Vec<f32>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        let mut velocity = HashMap::new();
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            if store.is_trainable(&name) {
                velocity.insert(name.clone(), vec![0.0; store.value_slice(&name).len()]);
            }
        }
        Self { velocity }
    }
}

/// One SGD-with-momentum update:
/// `v ← momentum·v − lr·(grad + weight_decay·param)`, `param ← param + v`.
/// Gradients are zeroed afterwards.
pub fn sgd_step(store: &mut ParamStore, state: &mut SgdState, cfg: &TrainConfig, lr: f64) {
    store.for_each_trainable(|name, values, grads| {
        let vel = state
            .velocity
            .get_mut(name)
            .expect("velocity buffer exists for every trainable parameter");
        for ((p, &g), v) in values.iter_mut().zip(grads).zip(vel.iter_mut()) {
            let step = cfg.momentum * *v as f64 - lr * (g as f64 + cfg.weight_decay * *p as f64);
            *v = step as f32;
            *p += *v;
        }
    });
    store.zero_grads();
}

/// One training scan with its nodules in voxel coordinates. The volume must
/// already be resampled and intensity-normalized.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub volume: CtVolume,
    pub nodules: Vec<VoxelNodule>,
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_loc: f64,
    pub lr: f64,
}

/// Writes the loss curve as `epoch,loss_total,loss_cls,loss_loc,lr`.
pub fn write_loss_records<W: Write>(records: &[LossRecord], mut w: W) -> Result<()> {
    writeln!(w, "epoch,loss_total,loss_cls,loss_loc,lr")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.loss_total, r.loss_cls, r.loss_loc, r.lr)?;
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs the full schedule over the training items. Each batch samples crops
/// (volume chosen uniformly, placement per the crop policy), assigns anchor
/// targets, and takes one SGD step. `on_checkpoint` fires every
/// `checkpoint_every` epochs and after the last. Deterministic for a fixed
/// (seed, config, data) regardless of thread count.
pub fn train(
    net: &Network,
    store: &mut ParamStore,
    cfg: &TrainConfig,
    data: &[TrainItem],
    engine: ConvEngine,
    mut on_checkpoint: impl FnMut(usize, &ParamStore) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Degenerate("no training volumes".into()));
    }
    let m = net.config().crop_side;
    let grid_side = net.config().head_side();
    let policy = CropPolicy {
        side: m,
        nodule_fraction: cfg.nodule_fraction,
        jitter_vox: (cfg.jitter_frac * m as f64) as f32,
    };
    // Per-item anchor sizes: diameters scale with each volume's spacing.
    let anchor_specs: Vec<AnchorSpec> = data
        .iter()
        .map(|item| {
            let spacing = item.volume.isotropic_spacing().ok_or_else(|| {
                Error::Geometry("training volumes must be isotropic".into())
            })?;
            AnchorSpec::from_mm(&net.config().anchors_mm, spacing)
        })
        .collect::<Result<_>>()?;

    let mut state = SgdState::new(store);
    let mut records = Vec::with_capacity(cfg.epochs);
    let batches_per_epoch = cfg.crops_per_epoch.div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut rng = epoch_rng(cfg.rng_seed, epoch);
        let (mut sum_total, mut sum_cls, mut sum_loc) = (0.0, 0.0, 0.0);

        for batch in 0..batches_per_epoch {
            let mut crops = Vec::with_capacity(cfg.batch_size);
            let mut assignments: Vec<TargetAssignment> = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let vi = rng.gen_range(0..data.len());
                let item = &data[vi];
                let spec =
                    sample_training_crops(&item.volume, &item.nodules, &policy, 1, &mut rng)[0];
                let (crop, local) = extract_crop(&item.volume, &spec, &item.nodules);
                let tuples: Vec<([f32; 3], f32)> =
                    local.iter().map(|n| (n.center_vox, n.diameter_vox)).collect();
                assignments.push(assign_targets(&tuples, &anchor_specs[vi], grid_side)?);
                crops.push(crop);
            }
            let x = stack_crops(&crops)?;
            let (head, trace) = net.forward_train(store, x, engine)?;
            let loss = multitask_loss(&head, &assignments)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite { epoch, batch, cls: loss.cls, loc: loss.loc });
            }
            net.backward(store, trace, &loss.head_grad, engine)?;
            sgd_step(store, &mut state, cfg, lr);
            sum_total += loss.total;
            sum_cls += loss.cls;
            sum_loc += loss.loc;
        }

        let n = batches_per_epoch as f64;
        records.push(LossRecord {
            epoch,
            loss_total: sum_total / n,
            loss_cls: sum_cls / n,
            loss_loc: sum_loc / n,
            lr,
        });
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            on_checkpoint(epoch, store)?;
        }
    }
    Ok(records)
}
