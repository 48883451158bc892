//! The two-stage network: the pose-oriented encoder with its regression and
//! uncertainty heads, and the uncertainty-guided refiner.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionKind, EncoderLayer, Guidance};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{embedding_init, Ctx, LayerNorm, Linear, ParamId, ParamKind, ParamStore};
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::skeleton::{assign_groups, DistMatrix, GroupAssignment, Skeleton, DEFAULT_GROUPS};

/// Architecture hyperparameters and ablation switches that change the
/// parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_joints: usize,
    pub dim: usize,
    pub num_heads: usize,
    pub pot_layers: usize,
    pub ugrn_layers: usize,
    pub num_groups: usize,
    pub dropout: f64,
    pub ffn_ratio: f64,
    pub pot_attention: AttentionKind,
    pub ugrn_attention: AttentionKind,
    pub group_embedding: bool,
    pub skeleton: Skeleton,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_joints: 17,
            dim: 96,
            num_heads: 6,
            pot_layers: 12,
            ugrn_layers: 3,
            num_groups: DEFAULT_GROUPS,
            dropout: 0.25,
            ffn_ratio: 1.5,
            pot_attention: AttentionKind::PoseOriented,
            ugrn_attention: AttentionKind::UncertaintyGuided,
            group_embedding: true,
            skeleton: Skeleton::h36m(),
        }
    }
}

impl ModelConfig {
    /// The full-size configuration (C=96, 12 + 3 layers).
    pub fn large() -> Self {
        Self::default()
    }

    /// The small configuration (C=48).
    pub fn small() -> Self {
        Self {
            dim: 48,
            ..Self::default()
        }
    }

    /// Desk-scale preset that trains in minutes on a CPU.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            num_heads: 4,
            pot_layers: 4,
            ugrn_layers: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_heads == 0 || !self.dim.is_multiple_of(self.num_heads) {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.num_heads));
        }
        if self.skeleton.num_joints() != self.num_joints {
            return bad(format!(
                "skeleton has {} joints, config says {}",
                self.skeleton.num_joints(),
                self.num_joints
            ));
        }
        if self.num_groups == 0 {
            return bad("num_groups must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_ratio <= 0.0 || self.pot_layers == 0 {
            return bad("ffn_ratio and pot_layers must be positive".into());
        }
        if self.pot_attention == AttentionKind::UncertaintyGuided {
            return bad("the first-stage encoder has no uncertainty to attend with".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; checkpoints carry it.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Skeleton-derived tables shared by both networks.
#[derive(Clone, Debug)]
pub struct Topology {
    pub dist: DistMatrix,
    pub groups: GroupAssignment,
}

impl Topology {
    pub fn new(cfg: &ModelConfig) -> Self {
        let dist = cfg.skeleton.distance_matrix();
        let groups = assign_groups(&dist, cfg.skeleton.root(), cfg.num_groups);
        Self { dist, groups }
    }
}

/// Input projection plus keypoint and (optional) group position embeddings.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub input: Linear,
    pub keypoint: ParamId,
    pub group: Option<ParamId>,
}

impl Embedding {
    fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &ModelConfig, in_features: usize) -> Self {
        let input = Linear::new(store, rng, "input", in_features, cfg.dim);
        let keypoint = store.add(
            "keypoint_embed",
            embedding_init(rng, cfg.num_joints, cfg.dim),
            ParamKind::Embedding,
        );
        let group = cfg.group_embedding.then(|| {
            store.add(
                "group_embed",
                embedding_init(rng, cfg.num_groups, cfg.dim),
                ParamKind::Embedding,
            )
        });
        Self { input, keypoint, group }
    }

    /// `Z⁰_i = proj(x_i) + K_i + G_φ(i)` over a `[B, J, F]` input.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>, groups: &GroupAssignment) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != groups.group.len() || s[2] != self.input.fan_in {
            return Err(shape_mismatch("embed", &s, &[groups.group.len(), self.input.fan_in]));
        }
        let z = self.input.forward(ctx, x)?.add(&ctx.bind(self.keypoint))?;
        match self.group {
            Some(g) => z.add(&ctx.bind(g).gather_rows(&groups.group)?),
            None => Ok(z),
        }
    }
}

/// LayerNorm followed by one linear map to 3 outputs per joint.
#[derive(Clone, Debug)]
pub struct Head {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            linear: Linear::new(store, rng, &format!("{name}.linear"), dim, 3),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, z: &Var<'t>) -> Result<Var<'t>> {
        self.linear.forward(ctx, &self.norm.forward(ctx, z)?)
    }
}

fn build_layers(
    store: &mut ParamStore,
    rng: &mut Rng,
    cfg: &ModelConfig,
    count: usize,
    kind: AttentionKind,
) -> Vec<EncoderLayer> {
    (0..count)
        .map(|l| {
            EncoderLayer::new(
                store,
                rng,
                &format!("layers.{l}"),
                kind,
                cfg.dim,
                cfg.num_heads,
                cfg.ffn_ratio,
                cfg.dropout,
            )
        })
        .collect()
}

/// Stage-I network: embeddings, encoder stack, regression and uncertainty heads.
#[derive(Clone, Debug)]
pub struct PotModel {
    pub cfg: ModelConfig,
    pub topo: Topology,
    pub store: ParamStore,
    pub embed: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub regression: Head,
    pub uncertainty: Head,
}

/// Output of the first-stage encoder for a batch.
pub struct PotOutput<'t> {
    /// Encoder output `Z^{L₁}`, `[B, J, C]`.
    pub features: Var<'t>,
    /// First-stage pose `Ỹ`, `[B, J, 3]`.
    pub pose: Var<'t>,
}

/// Prefix of the uncertainty-head parameters inside the POT store.
pub const UNCERTAINTY_PREFIX: &str = "pot.uncertainty.";

impl PotModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new("pot");
        let embed = Embedding::new(&mut store, rng, cfg, 2);
        let layers = build_layers(&mut store, rng, cfg, cfg.pot_layers, cfg.pot_attention);
        let regression = Head::new(&mut store, rng, "regression", cfg.dim);
        let uncertainty = Head::new(&mut store, rng, "uncertainty", cfg.dim);
        Ok(Self {
            cfg: cfg.clone(),
            topo: Topology::new(cfg),
            store,
            embed,
            layers,
            regression,
            uncertainty,
        })
    }

    /// Embedding, encoder stack and regression head over `x: [B, J, 2]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>, rng: &mut Rng, training: bool) -> Result<PotOutput<'t>> {
        let mut ctx = Ctx {
            tape,
            store: &self.store,
            rng,
            training,
        };
        let mut z = self.embed.forward(&ctx, x, &self.topo.groups)?;
        let guidance = match self.cfg.pot_attention {
            AttentionKind::PoseOriented => Guidance::Distance(&self.topo.dist),
            _ => Guidance::None,
        };
        for layer in &self.layers {
            z = layer.forward(&mut ctx, &z, &guidance)?;
        }
        let pose = self.regression.forward(&ctx, &z)?;
        Ok(PotOutput { features: z, pose })
    }

    /// Raw uncertainty-head output `s = log σ²`, `[B, J, 3]`.
    pub fn log_variance<'t>(&self, tape: &'t Tape, features: &Var<'t>) -> Result<Var<'t>> {
        let mut rng = Rng::new(0);
        let ctx = Ctx {
            tape,
            store: &self.store,
            rng: &mut rng,
            training: false,
        };
        self.uncertainty.forward(&ctx, features)
    }

    /// `σ = exp(s / 2)`, strictly positive.
    pub fn uncertainty<'t>(&self, tape: &'t Tape, features: &Var<'t>) -> Result<Var<'t>> {
        self.log_variance(tape, features)?.scale(0.5)?.exp()
    }

    /// True for the parameters updated in stage I (everything but the
    /// uncertainty head).
    pub fn is_stage1_param(name: &str) -> bool {
        name.starts_with("pot.") && !name.starts_with(UNCERTAINTY_PREFIX)
    }

    /// Digest of the encoder and regression-head parameters.
    pub fn frozen_digest(&self) -> String {
        self.store.digest(Self::is_stage1_param)
    }
}

/// Stage-II refiner over `concat(Ȳ, X)`.
#[derive(Clone, Debug)]
pub struct UgrnModel {
    pub cfg: ModelConfig,
    pub topo: Topology,
    pub store: ParamStore,
    pub embed: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub refine: Head,
}

impl UgrnModel {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new("ugrn");
        let embed = Embedding::new(&mut store, rng, cfg, 5);
        let layers = build_layers(&mut store, rng, cfg, cfg.ugrn_layers, cfg.ugrn_attention);
        let refine = Head::new(&mut store, rng, "refine", cfg.dim);
        Ok(Self {
            cfg: cfg.clone(),
            topo: Topology::new(cfg),
            store,
            embed,
            layers,
            refine,
        })
    }

    /// Refined pose `Ŷ` from the 2D input `x: [B, J, 2]`, the (sampled)
    /// first-stage pose `y_bar: [B, J, 3]` and `sigma: [B, J, 3]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x: &Var<'t>,
        y_bar: &Var<'t>,
        sigma: &Var<'t>,
        rng: &mut Rng,
        training: bool,
    ) -> Result<Var<'t>> {
        if y_bar.shape() != sigma.shape() || x.shape()[..2] != y_bar.shape()[..2] {
            return Err(shape_mismatch("ugrn_forward", &x.shape(), &y_bar.shape()));
        }
        let mut ctx = Ctx {
            tape,
            store: &self.store,
            rng,
            training,
        };
        let input = tape.concat_last(&[*y_bar, *x])?;
        let mut z = self.embed.forward(&ctx, &input, &self.topo.groups)?;
        let guidance = match self.cfg.ugrn_attention {
            AttentionKind::Standard => Guidance::None,
            AttentionKind::PoseOriented => Guidance::Distance(&self.topo.dist),
            AttentionKind::UncertaintyGuided => Guidance::Uncertainty(*sigma),
        };
        for layer in &self.layers {
            z = layer.forward(&mut ctx, &z, &guidance)?;
        }
        self.refine.forward(&ctx, &z)
    }
}

/// Eval-mode predictions for a batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub first_stage: Tensor,
    pub sigma: Tensor,
    pub refined: Tensor,
}

/// Runs both stages without sampling: the refiner sees `Ȳ = Ỹ`.
pub fn infer(pot: &PotModel, ugrn: &UgrnModel, x: &Tensor) -> Result<Inference> {
    let tape = Tape::new();
    let mut rng = Rng::new(0);
    let xv = tape.constant(x.clone());
    let out = pot.forward(&tape, &xv, &mut rng, false)?;
    let sigma = pot.uncertainty(&tape, &out.features)?;
    let refined = ugrn.forward(&tape, &xv, &out.pose, &sigma, &mut rng, false)?;
    Ok(Inference {
        first_stage: out.pose.value(),
        sigma: sigma.value(),
        refined: refined.value(),
    })
}

/// Trainable scalar counts, per submodule and in total.
#[derive(Clone, Debug, Serialize)]
pub struct ParamReport {
    pub submodules: Vec<(String, usize)>,
    pub total: usize,
}

/// Groups parameters by their first two name components (`pot.layers`,
/// `ugrn.refine`, ...).
pub fn param_count(stores: &[&ParamStore]) -> ParamReport {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for store in stores {
        for p in store.params() {
            let key: String = p.name.splitn(3, '.').take(2).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, n)) => *n += p.value.len(),
                None => groups.push((key, p.value.len())),
            }
        }
    }
    let total = groups.iter().map(|(_, n)| n).sum();
    ParamReport {
        submodules: groups,
        total,
    }
}

/// Builds both networks for `cfg` from one seed, in a fixed order.
pub fn build_models(cfg: &ModelConfig, seed: u64) -> Result<(PotModel, UgrnModel)> {
    let root = Rng::new(seed);
    let pot = PotModel::new(cfg, &mut root.split(1))?;
    let ugrn = UgrnModel::new(cfg, &mut root.split(2))?;
    Ok((pot, ugrn))
}

pub const CHECKPOINT_FORMAT: &str = "poselift-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in scalars.
    pub offset: usize,
}

/// JSON side of a checkpoint. Tensor data lives in a sibling `.bin` file of
/// little-endian `f64`s, in `tensors` order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub model: ModelConfig,
    pub config_hash: String,
    pub stage: u8,
    pub epoch: usize,
    pub rng: Rng,
    /// Free-form training state (optimizer step counts and similar).
    #[serde(default)]
    pub extra: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

fn blob_path(json: &Path) -> PathBuf {
    json.with_extension("bin")
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, stage: u8, epoch: usize, rng: &Rng) -> Self {
        Self {
            manifest: Manifest {
                format: CHECKPOINT_FORMAT.into(),
                dtype: "f64-le".into(),
                model: model.clone(),
                config_hash: model.hash(),
                stage,
                epoch,
                rng: rng.clone(),
                extra: serde_json::Value::Null,
                tensors: Vec::new(),
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_store(&mut self, store: &ParamStore) {
        for p in store.params() {
            self.tensors.insert(p.name.clone(), p.value.clone());
        }
    }

    /// Copies every parameter of `store` out of the checkpoint.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Writes `<path>` (manifest) and `<path>.bin` (blob). `path` should end in `.json`.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut offset = 0;
        self.manifest.tensors.clear();
        for (name, t) in &self.tensors {
            self.manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        std::fs::write(blob_path(path), blob)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::CheckpointMismatch(format!("unknown format {}", manifest.format)));
        }
        if manifest.config_hash != manifest.model.hash() {
            return Err(Error::CheckpointMismatch(
                "config hash does not match embedded config".into(),
            ));
        }
        let bytes = std::fs::read(blob_path(path))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::CheckpointMismatch("blob length is not a multiple of 8".into()));
        }
        let scalars: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = scalars
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::CheckpointMismatch(format!("{} runs past the blob", e.name)))?;
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data.to_vec())?);
        }
        Ok(Self { manifest, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            num_joints: 5,
            dim: 8,
            num_heads: 2,
            pot_layers: 2,
            ugrn_layers: 1,
            skeleton: Skeleton::new(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0).unwrap(),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn large_and_small_parameter_totals() {
        let (pot, ugrn) = build_models(&ModelConfig::large(), 0).unwrap();
        let total = param_count(&[&pot.store, &ugrn.store]).total;
        assert!((total as f64 - 0.98e6).abs() <= 0.098e6, "{total}");
        // The encoder alone is the first row of the refinement ablation.
        let pot_only = pot.store.num_scalars() - pot.store.count_prefix("uncertainty");
        assert!((pot_only as f64 - 0.79e6).abs() <= 0.079e6, "{pot_only}");

        let (pot, ugrn) = build_models(&ModelConfig::small(), 0).unwrap();
        let total = param_count(&[&pot.store, &ugrn.store]).total;
        assert!((total as f64 - 0.25e6).abs() <= 0.0375e6, "{total}");
    }

    #[test]
    fn default_shapes() {
        let (pot, _) = build_models(&ModelConfig::large(), 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 17, 2]));
        let out = pot.forward(&tape, &x, &mut Rng::new(0), false).unwrap();
        assert_eq!(out.features.shape(), vec![1, 17, 96]);
        assert_eq!(out.pose.shape(), vec![1, 17, 3]);
    }

    #[test]
    fn zero_uncertainty_head_gives_unit_sigma() {
        let (mut pot, _) = build_models(&tiny(), 1).unwrap();
        for p in pot.store.params_mut() {
            if p.name.starts_with("pot.uncertainty.linear") {
                p.value = Tensor::zeros(p.value.shape());
            }
        }
        let tape = Tape::new();
        let x = tape.constant(Rng::new(3).gaussian(&[2, 5, 2]));
        let out = pot.forward(&tape, &x, &mut Rng::new(0), false).unwrap();
        let sigma = pot.uncertainty(&tape, &out.features).unwrap().value();
        assert!(sigma.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn embedding_zero_projection_is_keypoint_plus_group() {
        let (mut pot, _) = build_models(&tiny(), 2).unwrap();
        let w = pot.embed.input.weight;
        pot.store.get_mut(w).value = Tensor::zeros(&[2, 8]);
        let tape = Tape::new();
        let mut rng = Rng::new(0);
        let ctx = Ctx {
            tape: &tape,
            store: &pot.store,
            rng: &mut rng,
            training: false,
        };
        let x = tape.constant(Rng::new(1).gaussian(&[1, 5, 2]));
        let z = pot.embed.forward(&ctx, &x, &pot.topo.groups).unwrap().value();
        let k = &pot.store.get(pot.embed.keypoint).value;
        let g = &pot.store.get(pot.embed.group.unwrap()).value;
        for i in 0..5 {
            let gi = pot.topo.groups.group[i];
            for c in 0..8 {
                assert_eq!(z.at(&[0, i, c]), k.at(&[i, c]) + g.at(&[gi, c]));
            }
        }
        // Joints 1 and 3 both sit one hop from the root.
        assert_eq!(pot.topo.groups.group[1], pot.topo.groups.group[3]);
    }

    #[test]
    fn embed_rejects_wrong_joint_count() {
        let (pot, _) = build_models(&tiny(), 2).unwrap();
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 2]));
        assert!(matches!(
            pot.forward(&tape, &x, &mut Rng::new(0), false),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn inference_composes_stages() {
        let (pot, ugrn) = build_models(&tiny(), 4).unwrap();
        let x = Rng::new(5).gaussian(&[3, 5, 2]);
        let a = infer(&pot, &ugrn, &x).unwrap();
        let b = infer(&pot, &ugrn, &x).unwrap();
        assert_eq!(a.refined, b.refined);
        assert_eq!(a.refined.shape(), &[3, 5, 3]);
        let tape = Tape::new();
        let y = pot
            .forward(&tape, &tape.constant(x), &mut Rng::new(99), false)
            .unwrap()
            .pose
            .value();
        assert_eq!(a.first_stage, y);
        assert!(a.sigma.data().iter().all(|&s| s > 0.0 && s.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (pot, ugrn) = build_models(&tiny(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ck = Checkpoint::new(&pot.cfg, 1, 3, &Rng::new(8));
        ck.insert_store(&pot.store);
        ck.insert_store(&ugrn.store);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.manifest.epoch, 3);
        assert_eq!(back.manifest.rng, Rng::new(8));
        let (mut pot2, mut ugrn2) = build_models(&tiny(), 7).unwrap();
        back.restore_store(&mut pot2.store).unwrap();
        back.restore_store(&mut ugrn2.store).unwrap();
        assert_eq!(pot2.store.digest(|_| true), pot.store.digest(|_| true));
        assert_eq!(ugrn2.store.digest(|_| true), ugrn.store.digest(|_| true));

        let mut other = tiny();
        other.dim = 4;
        let (mut small, _) = build_models(&other, 0).unwrap();
        assert!(matches!(
            back.restore_store(&mut small.store),
            Err(Error::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.num_joints = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.pot_attention = AttentionKind::UncertaintyGuided;
        assert!(cfg.validate().is_err());
    }
}
