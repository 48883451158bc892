//! Losses, uncertainty-guided sampling, Adam with max-norm, and the two-stage
//! training driver.
//!
//! Targets are scaled by [`TrainConfig::target_scale`] before they reach the
//! networks (mm to dm by default, roughly unit variance). Losses are always
//! evaluated in meters, the unit `λ` is balanced for; logged MPJPE is in mm.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::PoseSample;
use crate::error::{shape_mismatch, Error, Result};
use crate::metrics;
use crate::model::{Checkpoint, PotModel, UgrnModel};
use crate::nn::{ParamKind, ParamStore};
use crate::numerics::{Gradients, Rng, Tape, Tensor, Var};

/// Floor applied to σ inside [`ug_sample`] and [`sigma_loss`], in the
/// units of their inputs.
pub const SIGMA_MIN: f64 = 1e-4;

/// Millimeters per loss unit (meters).
pub const LOSS_UNIT_MM: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub epochs_per_stage: usize,
    /// Fixed optimizer steps per epoch; `None` means one pass over the data.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Weight of the uncertainty loss in stage II.
    pub lambda: f64,
    /// Max-norm cap on each output unit's incoming weights; `None` disables it.
    pub max_norm: Option<f64>,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Multiplier from dataset units (mm) to network units.
    pub target_scale: f64,
    /// Feed `Ỹ + σ·ε` to the refiner during stage II instead of `Ỹ`.
    pub ug_sampling: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.96,
            decay_every: 4,
            epochs_per_stage: 25,
            steps_per_epoch: None,
            batch_size: 256,
            lambda: 1e-3,
            max_norm: Some(1.0),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            target_scale: 1e-2,
            ug_sampling: true,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: batch 32, 200 steps per stage.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            steps_per_epoch: Some(8),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("lambda", self.lambda),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
            ("target_scale", self.target_scale),
            ("max_norm", self.max_norm.unwrap_or(1.0)),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("{name} = {v} must be positive")));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::InvalidConfig("Adam betas must be below 1".into()));
        }
        if self.decay_every == 0
            || self.epochs_per_stage == 0
            || self.batch_size == 0
            || self.steps_per_epoch == Some(0)
        {
            return Err(Error::InvalidConfig(
                "decay_every, epochs_per_stage, batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Factor from network units to loss units.
    pub fn loss_factor(&self) -> f64 {
        1.0 / (self.target_scale * LOSS_UNIT_MM)
    }

    /// Optimizer steps in one stage for a dataset of `n` samples.
    pub fn steps_per_stage(&self, n: usize) -> usize {
        self.epochs_per_stage * self.epoch_steps(n)
    }

    fn epoch_steps(&self, n: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n.div_ceil(self.batch_size.min(n.max(1))))
    }
}

/// `lr0 · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powf((epoch / cfg.decay_every) as f64)
}

fn check_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_mismatch(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

fn check_sigma(sigma: &Var<'_>) -> Result<()> {
    match sigma.value().data().iter().find(|s| s.is_nan() || **s <= 0.0) {
        Some(&s) => Err(Error::NonPositiveSigma(s)),
        None => Ok(()),
    }
}

/// Mean over joints (and batch) of `‖Ỹᵢ − Yᵢ‖²`.
pub fn stage1_loss<'t>(pred: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    check_same("stage1_loss", pred, target)?;
    pred.sub(target)?.square()?.sum_last()?.mean()
}

/// The refinement term has the same form as the stage-I loss.
pub fn refine_loss<'t>(refined: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    check_same("refine_loss", refined, target)?;
    stage1_loss(refined, target)
}

/// Mean over joints of `‖(Ỹᵢ − Yᵢ) / σᵢ‖² + ln ‖σᵢ‖²`, with σ floored at
/// [`SIGMA_MIN`]. `first_stage` should be a constant.
pub fn sigma_loss<'t>(first_stage: &Var<'t>, target: &Var<'t>, sigma: &Var<'t>) -> Result<Var<'t>> {
    check_same("sigma_loss", first_stage, target)?;
    check_same("sigma_loss", first_stage, sigma)?;
    check_sigma(sigma)?;
    let s = sigma.clamp_min(SIGMA_MIN)?;
    let fit = first_stage.sub(target)?.div(&s)?.square()?.sum_last()?;
    let barrier = s.square()?.sum_last()?.ln()?;
    fit.add(&barrier)?.mean()
}

/// `L_refine + λ·L_σ`.
pub fn stage2_loss<'t>(
    refined: &Var<'t>,
    target: &Var<'t>,
    first_stage: &Var<'t>,
    sigma: &Var<'t>,
    lambda: f64,
) -> Result<Var<'t>> {
    let refine = refine_loss(refined, target)?;
    let unc = sigma_loss(first_stage, target, sigma)?;
    refine.add(&unc.scale(lambda)?)
}

/// Training: `Ỹ + max(σ, σ_min) ⊙ ε` with `ε ~ N(0, 1)`. Eval: `Ỹ` itself.
pub fn ug_sample<'t>(first_stage: &Var<'t>, sigma: &Var<'t>, rng: &mut Rng, training: bool) -> Result<Var<'t>> {
    check_same("ug_sample", first_stage, sigma)?;
    check_sigma(sigma)?;
    if !training {
        return Ok(*first_stage);
    }
    let eps = first_stage.tape().constant(rng.gaussian(&first_stage.shape()));
    first_stage.add(&sigma.clamp_min(SIGMA_MIN)?.mul(&eps)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam accumulators keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_norm: Option<f64>,
}

impl From<&TrainConfig> for AdamParams {
    fn from(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            max_norm: cfg.max_norm,
        }
    }
}

impl OptimizerState {
    /// Stores moments as `adam.m.<name>` / `adam.v.<name>` and the step count
    /// in the manifest's `extra`.
    pub fn insert_into(&self, ckpt: &mut Checkpoint) {
        for (name, mo) in &self.moments {
            ckpt.tensors.insert(format!("adam.m.{name}"), mo.m.clone());
            ckpt.tensors.insert(format!("adam.v.{name}"), mo.v.clone());
        }
        let mut extra = match ckpt.manifest.extra.take() {
            serde_json::Value::Object(map) => map,
            _ => serde_json::Map::new(),
        };
        extra.insert("adam_step".into(), self.step.into());
        ckpt.manifest.extra = serde_json::Value::Object(extra);
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let step = ckpt
            .manifest
            .extra
            .get("adam_step")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        let mut moments = BTreeMap::new();
        for (key, m) in &ckpt.tensors {
            let Some(name) = key.strip_prefix("adam.m.") else {
                continue;
            };
            let v = ckpt
                .tensors
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing second moment for {name}")))?;
            moments.insert(
                name.to_string(),
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        Ok(Self { step, moments })
    }
}

/// Rescales each output unit's incoming weight vector of an `[in, out]`
/// matrix (a row of the `[out, in]` layout) to norm at most `cap`.
pub fn max_norm_project(w: &mut Tensor, cap: f64) {
    if w.rank() != 2 {
        return;
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let data = w.data_mut();
    for c in 0..cols {
        let norm = (0..rows).map(|r| data[r * cols + c].powi(2)).sum::<f64>().sqrt();
        if norm > cap {
            let k = cap / norm;
            for r in 0..rows {
                data[r * cols + c] *= k;
            }
        }
    }
}

/// One bias-corrected Adam update of every unfrozen parameter that has a
/// gradient, then max-norm projection of the updated weight matrices.
/// Shapes are checked before anything is modified.
pub fn adam_step(
    stores: &mut [&mut ParamStore],
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamParams,
) -> Result<()> {
    for store in stores.iter() {
        for p in store.params().iter().filter(|p| !p.frozen) {
            if let Some(g) = grads.get(&p.name) {
                if g.shape() != p.value.shape() {
                    return Err(shape_mismatch("adam_step", p.value.shape(), g.shape()));
                }
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for store in stores.iter_mut() {
        for p in store.params_mut().iter_mut().filter(|p| !p.frozen) {
            let Some(g) = grads.get(&p.name) else {
                continue;
            };
            let mo = state.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
            });
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for (i, (x, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            }
            if let (ParamKind::Weight, Some(cap)) = (p.kind, hp.max_norm) {
                max_norm_project(&mut p.value, cap);
            }
        }
    }
    Ok(())
}

/// A mini-batch: inputs `[B, J, 2]`, targets in network units and in mm.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub y_mm: Tensor,
}

impl Batch {
    pub fn new(samples: &[PoseSample], indices: &[usize], target_scale: f64) -> Result<Self> {
        let Some(first) = indices.first() else {
            return Err(Error::EmptyDataset);
        };
        let j = samples[*first].num_joints();
        let mut x = Vec::with_capacity(indices.len() * j * 2);
        let mut y = Vec::with_capacity(indices.len() * j * 3);
        for &i in indices {
            let s = &samples[i];
            if s.joints_2d.len() != j || s.joints_3d.len() != j {
                return Err(Error::JointCountMismatch {
                    expected: j,
                    found: s.joints_2d.len().min(s.joints_3d.len()),
                });
            }
            x.extend(s.joints_2d.iter().flatten());
            y.extend(s.joints_3d.iter().flatten());
        }
        let b = indices.len();
        let y_mm = Tensor::new(&[b, j, 3], y)?;
        Ok(Self {
            x: Tensor::new(&[b, j, 2], x)?,
            y: y_mm.map(|v| v * target_scale),
            y_mm,
        })
    }

    pub fn all(samples: &[PoseSample], target_scale: f64) -> Result<Self> {
        Self::new(samples, &(0..samples.len()).collect::<Vec<_>>(), target_scale)
    }
}

/// Loss value, prediction (network units) and parameter gradients of one
/// forward/backward pass.
#[derive(Debug)]
pub struct Objective {
    pub loss: f64,
    pub prediction: Tensor,
    pub grads: Gradients,
}

/// Stage-I loss and gradients for `pot` on `batch`.
pub fn stage1_objective(
    pot: &PotModel,
    batch: &Batch,
    rng: &mut Rng,
    cfg: &TrainConfig,
    training: bool,
) -> Result<Objective> {
    let k = cfg.loss_factor();
    let tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let out = pot.forward(&tape, &x, rng, training)?;
    let loss = stage1_loss(&out.pose.scale(k)?, &y.scale(k)?)?;
    let (value, prediction) = (loss.value().item(), out.pose.value());
    let grads = tape.backward(loss)?;
    Ok(Objective {
        loss: value,
        prediction,
        grads,
    })
}

/// Stage-II loss and gradients. The POT forward runs in eval mode; its
/// parameters receive gradients only where they are not frozen (see
/// [`freeze_for_stage2`]).
pub fn stage2_objective(
    pot: &PotModel,
    ugrn: &UgrnModel,
    batch: &Batch,
    rng: &mut Rng,
    cfg: &TrainConfig,
    training: bool,
) -> Result<Objective> {
    let tape = Tape::new();
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let out = pot.forward(&tape, &x, rng, false)?;
    let sigma = pot.uncertainty(&tape, &out.features)?;
    let first_stage = tape.constant(out.pose.value());
    let y_bar = if cfg.ug_sampling {
        ug_sample(&first_stage, &sigma, rng, training)?
    } else {
        first_stage
    };
    let refined = ugrn.forward(&tape, &x, &y_bar, &sigma, rng, training)?;
    let k = cfg.loss_factor();
    let loss = stage2_loss(
        &refined.scale(k)?,
        &y.scale(k)?,
        &first_stage.scale(k)?,
        &sigma.scale(k)?,
        cfg.lambda,
    )?;
    let (value, prediction) = (loss.value().item(), refined.value());
    let grads = tape.backward(loss)?;
    Ok(Objective {
        loss: value,
        prediction,
        grads,
    })
}

/// Freezes the encoder, embeddings and regression head; the uncertainty
/// head stays trainable.
pub fn freeze_for_stage2(pot: &mut PotModel) {
    pot.store.set_frozen(PotModel::is_stage1_param);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One = 1,
    Two = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::InvalidConfig(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub stage: u8,
    pub lr: f64,
    pub loss: f64,
    pub mpjpe: f64,
}

/// The networks a stage updates.
pub enum StageModels<'m> {
    One(&'m mut PotModel),
    Two(&'m mut PotModel, &'m mut UgrnModel),
}

impl StageModels<'_> {
    pub fn stage(&self) -> Stage {
        match self {
            StageModels::One(_) => Stage::One,
            StageModels::Two(..) => Stage::Two,
        }
    }

    pub fn pot(&self) -> &PotModel {
        match self {
            StageModels::One(p) | StageModels::Two(p, _) => p,
        }
    }

    pub fn ugrn(&self) -> Option<&UgrnModel> {
        match self {
            StageModels::One(_) => None,
            StageModels::Two(_, u) => Some(u),
        }
    }
}

/// Callbacks from [`run_stage`]. Both default to doing nothing.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after `epochs_done` complete epochs of the stage.
    fn on_epoch_end(&mut self, _epochs_done: usize, _models: &StageModels<'_>, _state: &OptimizerState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Random stream for one epoch of one stage, so a resumed run draws exactly
/// what an uninterrupted one would.
pub fn epoch_rng(cfg: &TrainConfig, stage: Stage, epoch: usize) -> Rng {
    Rng::new(cfg.seed).split(((stage.number() as u64) << 32) | epoch as u64)
}

/// Sample indices of each step in an epoch. Without a fixed step count this
/// is one shuffled pass with a short final batch; with one, shuffled passes
/// are concatenated and cut into full batches.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    let b = cfg.batch_size.min(n);
    let shuffled = |rng: &mut Rng| {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order
    };
    match cfg.steps_per_epoch {
        None => shuffled(rng).chunks(b).map(<[usize]>::to_vec).collect(),
        Some(steps) => {
            let mut pool: Vec<usize> = Vec::new();
            let mut pos = 0;
            (0..steps)
                .map(|_| {
                    if pos + b > pool.len() {
                        pool = shuffled(rng);
                        pos = 0;
                    }
                    pos += b;
                    pool[pos - b..pos].to_vec()
                })
                .collect()
        }
    }
}

/// Trains one stage from `start_epoch` to `cfg.epochs_per_stage`, returning
/// the log rows. Stage II freezes the POT backbone first.
pub fn run_stage(
    mut models: StageModels<'_>,
    data: &[PoseSample],
    cfg: &TrainConfig,
    start_epoch: usize,
    state: &mut OptimizerState,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let j = models.pot().cfg.num_joints;
    if let Some(s) = data.iter().find(|s| s.num_joints() != j || s.joints_2d.len() != j) {
        return Err(Error::JointCountMismatch {
            expected: j,
            found: s.num_joints(),
        });
    }
    let stage = models.stage();
    let root = models.pot().cfg.skeleton.root();
    match &mut models {
        StageModels::One(pot) => pot.store.set_frozen(|_| false),
        StageModels::Two(pot, _) => freeze_for_stage2(pot),
    }
    let hp = AdamParams::from(cfg);
    let mut log = Vec::new();
    let mut step = start_epoch * cfg.epoch_steps(data.len());
    for epoch in start_epoch..cfg.epochs_per_stage {
        let lr = lr_at(epoch, cfg);
        let mut rng = epoch_rng(cfg, stage, epoch);
        for indices in epoch_batches(data.len(), cfg, &mut rng) {
            let batch = Batch::new(data, &indices, cfg.target_scale)?;
            let obj = match &mut models {
                StageModels::One(pot) => {
                    let obj = stage1_objective(pot, &batch, &mut rng, cfg, true)?;
                    adam_step(&mut [&mut pot.store], &obj.grads, state, lr, &hp)?;
                    obj
                }
                StageModels::Two(pot, ugrn) => {
                    let obj = stage2_objective(pot, ugrn, &batch, &mut rng, cfg, true)?;
                    adam_step(&mut [&mut pot.store, &mut ugrn.store], &obj.grads, state, lr, &hp)?;
                    obj
                }
            };
            if !obj.loss.is_finite() {
                return Err(Error::NonFiniteInput("training loss"));
            }
            let pred_mm = obj.prediction.map(|v| v / cfg.target_scale);
            let record = StepRecord {
                epoch,
                step,
                stage: stage.number(),
                lr,
                loss: obj.loss,
                mpjpe: metrics::mpjpe(&pred_mm, &batch.y_mm, root)?,
            };
            observer.on_step(&record)?;
            log.push(record);
            step += 1;
        }
        observer.on_epoch_end(epoch + 1, &models, state)?;
    }
    Ok(log)
}

/// Stage I from scratch with a fresh optimizer.
pub fn train_stage1(pot: &mut PotModel, data: &[PoseSample], cfg: &TrainConfig) -> Result<Vec<StepRecord>> {
    run_stage(
        StageModels::One(pot),
        data,
        cfg,
        0,
        &mut OptimizerState::default(),
        &mut (),
    )
}

/// Stage II from scratch: trains the refiner and the uncertainty head with
/// the rest of `pot` frozen.
pub fn train_stage2(
    pot: &mut PotModel,
    ugrn: &mut UgrnModel,
    data: &[PoseSample],
    cfg: &TrainConfig,
) -> Result<Vec<StepRecord>> {
    run_stage(
        StageModels::Two(pot, ugrn),
        data,
        cfg,
        0,
        &mut OptimizerState::default(),
        &mut (),
    )
}

/// Eval-mode predictions over a dataset, in mm, batched `batch_size` at a time.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub first_stage: Tensor,
    pub refined: Tensor,
    pub sigma: Tensor,
    pub target: Tensor,
}

pub fn predict(
    pot: &PotModel,
    ugrn: &UgrnModel,
    data: &[PoseSample],
    target_scale: f64,
    batch_size: usize,
) -> Result<Predictions> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let j = data[0].num_joints();
    let mut first = Vec::new();
    let mut refined = Vec::new();
    let mut sigma = Vec::new();
    let mut target = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = Batch::new(data, chunk, target_scale)?;
        let out = crate::model::infer(pot, ugrn, &batch.x)?;
        first.extend(out.first_stage.data().iter().map(|v| v / target_scale));
        refined.extend(out.refined.data().iter().map(|v| v / target_scale));
        sigma.extend(out.sigma.data().iter().map(|v| v / target_scale));
        target.extend_from_slice(batch.y_mm.data());
    }
    let shape = [data.len(), j, 3];
    Ok(Predictions {
        first_stage: Tensor::new(&shape, first)?,
        refined: Tensor::new(&shape, refined)?,
        sigma: Tensor::new(&shape, sigma)?,
        target: Tensor::new(&shape, target)?,
    })
}
