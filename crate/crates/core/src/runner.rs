//! Config-driven commands: dataset synthesis, two-stage training with
//! checkpoints and resume, evaluation, the ablation grid and parameter
//! inspection. Every command writes its resolved config next to its outputs.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::data::{load_dataset, save_dataset, synth_generate, PoseSample, SynthConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{build_models, param_count, Checkpoint, ModelConfig, ParamReport, PotModel, UgrnModel};
use crate::numerics::Rng;
use crate::training::{predict, run_stage, OptimizerState, Stage, StageModels, StepRecord, TrainConfig, TrainObserver};

/// Everything a run depends on. Ablation switches live in `model`
/// (attention per stage, group embedding) and `train` (UG-sampling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    /// JSONL training set; the synthetic train split when absent.
    pub train_data: Option<PathBuf>,
    /// JSONL evaluation set; the synthetic test split when absent.
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub eval_batch: usize,
    /// Keep one checkpoint per epoch instead of only the latest.
    pub keep_epoch_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale preset: C=32, 4 + 2 layers, batch 32, 200 steps per stage.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            synth: SynthConfig::default(),
            train_data: None,
            test_data: None,
            out_dir: PathBuf::from("runs"),
            eval_batch: 256,
            keep_epoch_checkpoints: false,
        }
    }

    /// Parses a possibly partial config; absent fields, at any depth, keep
    /// their desk-preset values.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut merged = serde_json::to_value(Self::desk())?;
        merge(&mut merged, serde_json::from_str(text)?);
        Ok(serde_json::from_value(merged)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train_data.is_none() || self.test_data.is_none() {
            self.synth.validate()?;
        }
        if self.eval_batch == 0 {
            return Err(Error::InvalidConfig("eval_batch must be positive".into()));
        }
        Ok(())
    }

    /// Writes the config verbatim as `<out_dir>/config.json`.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    fn prepare(&self) -> Result<()> {
        self.validate()?;
        self.write_resolved()?;
        Ok(())
    }

    pub fn train_set(&self) -> Result<Vec<PoseSample>> {
        match &self.train_data {
            Some(p) => load_dataset(p, self.model.num_joints),
            None => Ok(synth_generate(&self.synth)?.0),
        }
    }

    pub fn test_set(&self) -> Result<Vec<PoseSample>> {
        match &self.test_data {
            Some(p) => load_dataset(p, self.model.num_joints),
            None => Ok(synth_generate(&self.synth)?.1),
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Writes `<out_dir>/<name>.train.jsonl` and `<out_dir>/<name>.test.jsonl`.
pub fn cmd_synth(cfg: &RunConfig, name: &str) -> Result<(PathBuf, PathBuf)> {
    cfg.synth.validate()?;
    cfg.write_resolved()?;
    let (train, test) = synth_generate(&cfg.synth)?;
    let train_path = cfg.out_dir.join(format!("{name}.train.jsonl"));
    let test_path = cfg.out_dir.join(format!("{name}.test.jsonl"));
    save_dataset(&train_path, &train)?;
    save_dataset(&test_path, &test)?;
    Ok((train_path, test_path))
}

pub const LOG_HEADER: [&str; 6] = ["epoch", "step", "stage", "lr", "loss", "mpjpe"];

/// Result of [`cmd_train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub log: PathBuf,
    /// Checkpoint written at the end of the last stage that ran.
    pub checkpoint: PathBuf,
}

fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("checkpoints")
}

/// Path of the checkpoint that closes `stage`.
pub fn stage_checkpoint(cfg: &RunConfig, stage: Stage) -> PathBuf {
    checkpoint_dir(cfg).join(format!("stage{}.json", stage.number()))
}

/// Path of the most recent per-epoch checkpoint.
pub fn latest_checkpoint(cfg: &RunConfig) -> PathBuf {
    checkpoint_dir(cfg).join("latest.json")
}

/// Snapshot of both networks and the optimizer after `epoch` epochs of `stage`.
pub fn snapshot(
    pot: &PotModel,
    ugrn: &UgrnModel,
    stage: Stage,
    epoch: usize,
    seed: u64,
    state: &OptimizerState,
) -> Checkpoint {
    let mut ckpt = Checkpoint::new(&pot.cfg, stage.number(), epoch, &Rng::new(seed));
    ckpt.insert_store(&pot.store);
    ckpt.insert_store(&ugrn.store);
    state.insert_into(&mut ckpt);
    ckpt
}

fn check_model(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.manifest.config_hash != cfg.hash() {
        return Err(Error::CheckpointMismatch(format!(
            "checkpoint config hash {} differs from run config hash {}",
            ckpt.manifest.config_hash,
            cfg.hash()
        )));
    }
    Ok(())
}

/// Networks restored from `ckpt`, which must match `cfg`.
pub fn restore_models(cfg: &ModelConfig, ckpt: &Checkpoint) -> Result<(PotModel, UgrnModel)> {
    check_model(cfg, ckpt)?;
    let (mut pot, mut ugrn) = build_models(cfg, 0)?;
    ckpt.restore_store(&mut pot.store)?;
    ckpt.restore_store(&mut ugrn.store)?;
    Ok((pot, ugrn))
}

struct Checkpointer<'a> {
    cfg: &'a RunConfig,
    log: csv::Writer<std::fs::File>,
    /// The refiner as it stands during stage I, for stage-I snapshots.
    idle_ugrn: &'a UgrnModel,
}

impl TrainObserver for Checkpointer<'_> {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        self.log.serialize(r)?;
        self.log.flush()?;
        Ok(())
    }

    fn on_epoch_end(&mut self, epochs_done: usize, models: &StageModels<'_>, state: &OptimizerState) -> Result<()> {
        let ugrn = models.ugrn().unwrap_or(self.idle_ugrn);
        let stage = models.stage();
        let mut ckpt = snapshot(models.pot(), ugrn, stage, epochs_done, self.cfg.train.seed, state);
        ckpt.save(&latest_checkpoint(self.cfg))?;
        if self.cfg.keep_epoch_checkpoints {
            let name = format!("stage{}-epoch{:03}.json", stage.number(), epochs_done);
            ckpt.save(&checkpoint_dir(self.cfg).join(name))?;
        }
        if epochs_done == self.cfg.train.epochs_per_stage {
            ckpt.save(&stage_checkpoint(self.cfg, stage))?;
        }
        Ok(())
    }
}

fn open_log(path: &Path, append: bool) -> Result<csv::Writer<std::fs::File>> {
    let fresh = !append || !path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(LOG_HEADER)?;
    }
    Ok(w)
}

/// Trains stage I then stage II, or only `only_stage`. With `resume`, the
/// networks, optimizer moments and epoch counter come from the checkpoint
/// and the learning-rate schedule continues where it stopped.
pub fn cmd_train(cfg: &RunConfig, only_stage: Option<Stage>, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.prepare()?;
    let data = cfg.train_set()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(checkpoint_dir(cfg))?;

    let (mut pot, mut ugrn, resumed) = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (pot, ugrn) = restore_models(&cfg.model, &ckpt)?;
            let stage = Stage::from_number(ckpt.manifest.stage)?;
            let state = OptimizerState::from_checkpoint(&ckpt)?;
            (pot, ugrn, Some((stage, ckpt.manifest.epoch, state)))
        }
        None => {
            if only_stage == Some(Stage::Two) {
                return Err(Error::InvalidConfig(
                    "stage 2 alone needs a stage-1 checkpoint to resume from".into(),
                ));
            }
            let (pot, ugrn) = build_models(&cfg.model, cfg.train.seed)?;
            (pot, ugrn, None)
        }
    };

    let log_path = cfg.out_dir.join("train_log.csv");
    let log = open_log(&log_path, resumed.is_some())?;
    let stages: Vec<Stage> = match only_stage {
        Some(s) => vec![s],
        None => vec![Stage::One, Stage::Two],
    };
    let mut records = Vec::new();
    // Stage I leaves the refiner untouched, so its snapshots use this copy.
    let idle = ugrn.clone();
    let mut observer = Checkpointer {
        cfg,
        log,
        idle_ugrn: &idle,
    };
    let mut last = None;
    for stage in stages {
        let (start, mut state) = match &resumed {
            Some((s, epoch, state)) if *s == stage => (*epoch, state.clone()),
            Some((Stage::Two, ..)) if stage == Stage::One => continue,
            _ => (0, OptimizerState::default()),
        };
        let rows = match stage {
            Stage::One => run_stage(
                StageModels::One(&mut pot),
                &data,
                &cfg.train,
                start,
                &mut state,
                &mut observer,
            )?,
            Stage::Two => run_stage(
                StageModels::Two(&mut pot, &mut ugrn),
                &data,
                &cfg.train,
                start,
                &mut state,
                &mut observer,
            )?,
        };
        records.extend(rows);
        if start >= cfg.train.epochs_per_stage {
            // Nothing left to train; the stage-end checkpoint may not exist yet.
            snapshot(&pot, &ugrn, stage, start, cfg.train.seed, &state).save(&stage_checkpoint(cfg, stage))?;
        }
        last = Some(stage_checkpoint(cfg, stage));
    }
    Ok(TrainSummary {
        records,
        log: log_path,
        checkpoint: last.expect("at least one stage runs"),
    })
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?)
}

/// Evaluates a checkpoint on `dataset` (or the configured test set) and
/// writes `eval.json` and `eval_groups.csv`.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    first_stage_only: bool,
) -> Result<EvalReport> {
    cfg.prepare()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (pot, ugrn) = restore_models(&cfg.model, &ckpt)?;
    let j = ckpt.manifest.model.num_joints;
    let data = match dataset.or(cfg.test_data.as_deref()) {
        Some(p) => load_dataset(p, j).map_err(|e| match e {
            Error::JointCountMismatch { expected, found } => {
                Error::CheckpointMismatch(format!("checkpoint expects {expected} joints, dataset has {found}"))
            }
            other => other,
        })?,
        None => cfg.test_set()?,
    };
    let report = evaluate(&pot, &ugrn, &data, cfg, first_stage_only)?;
    report.write_json(&cfg.out_dir.join("eval.json"))?;
    report.write_group_csv(&cfg.out_dir.join("eval_groups.csv"))?;
    Ok(report)
}

/// Metrics of the refined (or first-stage) predictions on `data`.
pub fn evaluate(
    pot: &PotModel,
    ugrn: &UgrnModel,
    data: &[PoseSample],
    cfg: &RunConfig,
    first_stage_only: bool,
) -> Result<EvalReport> {
    let p = predict(pot, ugrn, data, cfg.train.target_scale, cfg.eval_batch)?;
    let pred = if first_stage_only { &p.first_stage } else { &p.refined };
    EvalReport::compute(pred, &p.target, pot.cfg.skeleton.root(), &pot.topo.groups)
}

/// Parameter counts per submodule for `cfg.model`.
pub fn cmd_inspect(cfg: &RunConfig) -> Result<ParamReport> {
    cfg.model.validate()?;
    let (pot, ugrn) = build_models(&cfg.model, cfg.train.seed)?;
    Ok(param_count(&[&pot.store, &ugrn.store]))
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub variant: String,
    pub mpjpe_mm: f64,
    /// Trainable scalars of the evaluated networks at the run's scale.
    pub params: usize,
    /// The same variant at full scale (C=96, 12 + 3 layers).
    pub params_full: usize,
}

#[derive(Clone, Debug)]
struct Cell {
    table: &'static str,
    variant: &'static str,
    model: ModelConfig,
    ug_sampling: bool,
    /// Evaluate `Ỹ` and count only the first-stage network.
    first_stage: bool,
}

fn ablation_cells(base: &ModelConfig) -> Vec<Cell> {
    let with = |pot: AttentionKind, group: bool, ugrn: AttentionKind| ModelConfig {
        pot_attention: pot,
        group_embedding: group,
        ugrn_attention: ugrn,
        ..base.clone()
    };
    use AttentionKind::{PoseOriented as Po, Standard as Mh, UncertaintyGuided as Ug};
    let cell = |table, variant, model, ug_sampling, first_stage| Cell {
        table,
        variant,
        model,
        ug_sampling,
        first_stage,
    };
    vec![
        cell(
            "pose-oriented design",
            "keypoint embedding",
            with(Mh, false, Ug),
            false,
            true,
        ),
        cell(
            "pose-oriented design",
            "+ group embedding",
            with(Mh, true, Ug),
            false,
            true,
        ),
        cell("pose-oriented design", "+ PO-SA", with(Po, false, Ug), false, true),
        cell(
            "pose-oriented design",
            "+ group embedding + PO-SA",
            with(Po, true, Ug),
            false,
            true,
        ),
        cell("refinement", "POT", with(Po, true, Ug), false, true),
        cell("refinement", "+ UGRN", with(Po, true, Ug), false, false),
        cell("refinement", "+ UG-sampling", with(Po, true, Ug), true, false),
        cell("refiner attention", "MH-SA", with(Po, true, Mh), true, false),
        cell("refiner attention", "PO-SA", with(Po, true, Po), true, false),
        cell("refiner attention", "UG-SA", with(Po, true, Ug), true, false),
    ]
}

fn cell_params(model: &ModelConfig, first_stage: bool) -> Result<usize> {
    let (pot, ugrn) = build_models(model, 0)?;
    let pot_only = pot.store.num_scalars() - pot.store.count_prefix("uncertainty");
    Ok(if first_stage {
        pot_only
    } else {
        param_count(&[&pot.store, &ugrn.store]).total
    })
}

/// Trains and evaluates every cell of the grid (4 + 3 + 3 rows), reusing
/// identical stage-I and stage-II runs, and writes `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.prepare()?;
    let train = cfg.train_set()?;
    let test = cfg.test_set()?;
    let mut stage1: BTreeMap<String, (PotModel, UgrnModel)> = BTreeMap::new();
    let mut stage2: BTreeMap<String, (PotModel, UgrnModel)> = BTreeMap::new();
    let mut rows = Vec::new();
    for cell in ablation_cells(&cfg.model) {
        let tcfg = TrainConfig {
            ug_sampling: cell.ug_sampling,
            ..cfg.train.clone()
        };
        // The first stage depends only on the encoder-side switches.
        let pot_key = ModelConfig {
            ugrn_attention: AttentionKind::UncertaintyGuided,
            ..cell.model.clone()
        }
        .hash();
        if !stage1.contains_key(&pot_key) {
            let (mut pot, ugrn) = build_models(&cell.model, cfg.train.seed)?;
            run_stage(
                StageModels::One(&mut pot),
                &train,
                &tcfg,
                0,
                &mut OptimizerState::default(),
                &mut (),
            )?;
            stage1.insert(pot_key.clone(), (pot, ugrn));
        }
        let (pot, ugrn) = if cell.first_stage {
            stage1[&pot_key].clone()
        } else {
            let key = format!("{}-{}", cell.model.hash(), cell.ug_sampling);
            if !stage2.contains_key(&key) {
                let mut pot = stage1[&pot_key].0.clone();
                let (_, mut ugrn) = build_models(&cell.model, cfg.train.seed)?;
                run_stage(
                    StageModels::Two(&mut pot, &mut ugrn),
                    &train,
                    &tcfg,
                    0,
                    &mut OptimizerState::default(),
                    &mut (),
                )?;
                stage2.insert(key.clone(), (pot, ugrn));
            }
            stage2[&key].clone()
        };
        let report = evaluate(&pot, &ugrn, &test, cfg, cell.first_stage)?;
        let full = ModelConfig {
            num_joints: cell.model.num_joints,
            skeleton: cell.model.skeleton.clone(),
            num_groups: cell.model.num_groups,
            pot_attention: cell.model.pot_attention,
            ugrn_attention: cell.model.ugrn_attention,
            group_embedding: cell.model.group_embedding,
            ..ModelConfig::large()
        };
        rows.push(AblationRow {
            table: cell.table.into(),
            variant: cell.variant.into(),
            mpjpe_mm: report.mpjpe_mm,
            params: cell_params(&cell.model, cell.first_stage)?,
            params_full: cell_params(&full, cell.first_stage)?,
        });
    }
    let mut w = csv::Writer::from_path(cfg.out_dir.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_ten_cells() {
        let cells = ablation_cells(&ModelConfig::desk());
        let per_table: Vec<usize> = ["pose-oriented design", "refinement", "refiner attention"]
            .iter()
            .map(|t| cells.iter().filter(|c| c.table == *t).count())
            .collect();
        assert_eq!(per_table, vec![4, 3, 3]);
    }

    #[test]
    fn full_scale_parameter_column() {
        let full = cell_params(&ModelConfig::large(), false).unwrap();
        assert!((full as f64 - 0.98e6).abs() <= 0.098e6, "{full}");
    }

    #[test]
    fn config_roundtrips_and_rejects_unknown_fields() {
        let cfg = RunConfig::desk();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert!(RunConfig::from_json("{\"modle\": {}}").is_err());
        let partial = RunConfig::from_json("{\"train\": {\"seed\": 9}}").unwrap();
        assert_eq!(partial.train.seed, 9);
        assert_eq!(partial.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(partial.model, ModelConfig::desk());
    }
}
