//! Straight-line reference implementations over plain `Vec<f64>` rows, used
//! as oracles for the tape-based modules. Eval mode only (no dropout).

#![allow(dead_code)]

use poselift::attention::{AttentionKind, UG_EPS};
use poselift::data::PoseSample;
use poselift::model::{ModelConfig, PotModel, UgrnModel};
use poselift::nn::{ParamStore, LN_EPS};
use poselift::numerics::{Rng, Tensor};
use poselift::skeleton::{DistMatrix, Skeleton};

pub type Rows = Vec<Vec<f64>>;

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    &store
        .by_name(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .value
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

pub fn linear(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), fan_in);
            (0..fan_out)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for (i, xi) in row.iter().enumerate() {
                        acc += xi * w.data()[i * fan_out + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore, name: &str, x: &Rows) -> Rows {
    let g = param(store, &format!("{name}.gamma"));
    let b = param(store, &format!("{name}.beta"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + LN_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / sd * g.data()[c] + b.data()[c])
                .collect()
        })
        .collect()
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Attention guidance for the naive layer.
pub enum NaiveGuide<'a> {
    None,
    Distance(&'a DistMatrix),
    /// Per-joint σ rows of one sample, `[J][3]`.
    Sigma(&'a Rows),
}

/// Multi-head attention on one sample `z: [J][C]`.
pub fn attention(store: &ParamStore, name: &str, heads: usize, z: &Rows, guide: &NaiveGuide<'_>) -> Rows {
    let q = linear(store, &format!("{name}.query"), z);
    let k = linear(store, &format!("{name}.key"), z);
    let v = linear(store, &format!("{name}.value"), z);
    let (j, c) = (z.len(), z[0].len());
    let d = c / heads;
    let mut concat = vec![vec![0.0; c]; j];
    for h in 0..heads {
        for a in 0..j {
            let mut logits = vec![0.0; j];
            for b in 0..j {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[a][h * d + t] * k[b][h * d + t];
                }
                let mut l = dot / (d as f64).sqrt();
                match guide {
                    NaiveGuide::None => {}
                    NaiveGuide::Distance(dist) => {
                        let hop = vec![vec![dist.get(a, b) as f64]];
                        let hidden: Rows = linear(store, &format!("{name}.dist_bias.hidden"), &hop)
                            .into_iter()
                            .map(|r| r.into_iter().map(gelu).collect())
                            .collect();
                        l += linear(store, &format!("{name}.dist_bias.out"), &hidden)[0][h];
                    }
                    NaiveGuide::Sigma(sigma) => {
                        let total: f64 = sigma[b].iter().sum();
                        l /= total.max(UG_EPS);
                    }
                }
                logits[b] = l;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for t in 0..d {
                concat[a][h * d + t] = (0..j).map(|b| e[b] / s * v[b][h * d + t]).sum();
            }
        }
    }
    linear(store, &format!("{name}.output"), &concat)
}

/// Pre-LN encoder layer on one sample.
pub fn encoder_layer(store: &ParamStore, name: &str, heads: usize, z: &Rows, guide: &NaiveGuide<'_>) -> Rows {
    let h = layer_norm(store, &format!("{name}.norm1"), z);
    let z1 = add_rows(z, &attention(store, &format!("{name}.attn"), heads, &h, guide));
    let h2 = layer_norm(store, &format!("{name}.norm2"), &z1);
    let hidden: Rows = linear(store, &format!("{name}.ffn.fc1"), &h2)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add_rows(&z1, &linear(store, &format!("{name}.ffn.fc2"), &hidden))
}

fn embed(store: &ParamStore, cfg: &ModelConfig, input: &Rows, groups: &[usize]) -> Rows {
    let p = store.prefix();
    let mut z = linear(store, &format!("{p}.input"), input);
    let key = param(store, &format!("{p}.keypoint_embed"));
    let group = cfg.group_embedding.then(|| param(store, &format!("{p}.group_embed")));
    for (i, row) in z.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += key.data()[i * cfg.dim + c];
            if let Some(g) = group {
                *v += g.data()[groups[i] * cfg.dim + c];
            }
        }
    }
    z
}

fn head(store: &ParamStore, name: &str, z: &Rows) -> Rows {
    linear(
        store,
        &format!("{name}.linear"),
        &layer_norm(store, &format!("{name}.norm"), z),
    )
}

fn guide_for<'a>(kind: AttentionKind, dist: &'a DistMatrix, sigma: &'a Rows) -> NaiveGuide<'a> {
    match kind {
        AttentionKind::Standard => NaiveGuide::None,
        AttentionKind::PoseOriented => NaiveGuide::Distance(dist),
        AttentionKind::UncertaintyGuided => NaiveGuide::Sigma(sigma),
    }
}

/// First-stage pose and σ for one sample `x: [J][2]`.
pub fn pot_forward(pot: &PotModel, x: &Rows) -> (Rows, Rows) {
    let cfg = &pot.cfg;
    let mut z = embed(&pot.store, cfg, x, &pot.topo.groups.group);
    let none = Vec::new();
    for l in 0..cfg.pot_layers {
        let guide = guide_for(cfg.pot_attention, &pot.topo.dist, &none);
        z = encoder_layer(&pot.store, &format!("pot.layers.{l}"), cfg.num_heads, &z, &guide);
    }
    let pose = head(&pot.store, "pot.regression", &z);
    let sigma = head(&pot.store, "pot.uncertainty", &z)
        .into_iter()
        .map(|r| r.into_iter().map(|s| (0.5 * s).exp()).collect())
        .collect();
    (pose, sigma)
}

/// Refined pose for one sample.
pub fn ugrn_forward(ugrn: &UgrnModel, x: &Rows, y_bar: &Rows, sigma: &Rows) -> Rows {
    let cfg = &ugrn.cfg;
    let input: Rows = y_bar
        .iter()
        .zip(x)
        .map(|(y, x)| y.iter().chain(x).copied().collect())
        .collect();
    let mut z = embed(&ugrn.store, cfg, &input, &ugrn.topo.groups.group);
    for l in 0..cfg.ugrn_layers {
        let guide = guide_for(cfg.ugrn_attention, &ugrn.topo.dist, sigma);
        z = encoder_layer(&ugrn.store, &format!("ugrn.layers.{l}"), cfg.num_heads, &z, &guide);
    }
    head(&ugrn.store, "ugrn.refine", &z)
}

/// Rows of sample `s` of a `[B, J, F]` tensor.
pub fn sample_rows(t: &Tensor, s: usize) -> Rows {
    let (j, f) = (t.shape()[1], t.shape()[2]);
    (0..j)
        .map(|i| t.data()[(s * j + i) * f..(s * j + i + 1) * f].to_vec())
        .collect()
}

pub fn max_abs_rows(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Overwrites every parameter with `N(0, scale²)` values, so zero-initialized
/// biases and unit LayerNorm gains are exercised too.
pub fn randomize(store: &mut ParamStore, rng: &mut Rng, scale: f64) {
    for p in store.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::from_fn(&shape, |_| scale * rng.normal());
    }
}

/// A random tree over `n` joints rooted at 0.
pub fn random_tree(n: usize, rng: &mut Rng) -> Skeleton {
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.below(i), i)).collect();
    Skeleton::new(n, &edges, 0).unwrap()
}

/// A small tree on five joints: a root with two two-joint branches.
pub fn five_joint_skeleton() -> Skeleton {
    Skeleton::new(5, &[(0, 1), (1, 2), (0, 3), (3, 4)], 0).unwrap()
}

/// The tiny configuration used by the gradient and oracle checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_joints: 5,
        dim: 8,
        num_heads: 2,
        pot_layers: 2,
        ugrn_layers: 1,
        num_groups: 3,
        skeleton: five_joint_skeleton(),
        ..ModelConfig::default()
    }
}

/// Random normalized-looking samples with targets in mm.
pub fn random_samples(n: usize, joints: usize, rng: &mut Rng) -> Vec<PoseSample> {
    (0..n)
        .map(|i| {
            let joints_2d = (0..joints)
                .map(|_| [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)])
                .collect();
            let joints_3d = (0..joints)
                .map(|j| {
                    if j == 0 {
                        [0.0; 3]
                    } else {
                        [300.0 * rng.normal(), 300.0 * rng.normal(), 300.0 * rng.normal()]
                    }
                })
                .collect();
            PoseSample {
                joints_2d,
                joints_3d,
                subject: "random".into(),
                action: format!("pose-{i}"),
                frame: Default::default(),
            }
        })
        .collect()
}

/// Plain nested-loop losses over flat `[B, J, 3]` buffers.
pub mod naive_loss {
    pub fn squared_error(pred: &[f64], target: &[f64]) -> f64 {
        let joints = pred.len() / 3;
        let mut total = 0.0;
        for i in 0..joints {
            for c in 0..3 {
                let d = pred[i * 3 + c] - target[i * 3 + c];
                total += d * d;
            }
        }
        total / joints as f64
    }

    pub fn sigma(first: &[f64], target: &[f64], sigma: &[f64]) -> f64 {
        let joints = first.len() / 3;
        let mut total = 0.0;
        for i in 0..joints {
            let mut fit = 0.0;
            let mut norm = 0.0;
            for c in 0..3 {
                let s = sigma[i * 3 + c].max(1e-4);
                let r = (first[i * 3 + c] - target[i * 3 + c]) / s;
                fit += r * r;
                norm += s * s;
            }
            total += fit + norm.ln();
        }
        total / joints as f64
    }

    pub fn stage2(refined: &[f64], target: &[f64], first: &[f64], sig: &[f64], lambda: f64) -> f64 {
        squared_error(refined, target) + lambda * sigma(first, target, sig)
    }
}

/// Plain-loop pose metrics over flat `[N, J, 3]` buffers.
pub mod naive_metric {
    pub fn errors(pred: &[f64], gt: &[f64], joints: usize, root: usize) -> Vec<f64> {
        let n = pred.len() / (joints * 3);
        let mut out = Vec::new();
        for s in 0..n {
            for j in 0..joints {
                let mut sq = 0.0;
                for c in 0..3 {
                    let at = |buf: &[f64], k: usize| buf[(s * joints + k) * 3 + c];
                    let d = (at(pred, j) - at(pred, root)) - (at(gt, j) - at(gt, root));
                    sq += d * d;
                }
                out.push(sq.sqrt());
            }
        }
        out
    }

    pub fn mpjpe(pred: &[f64], gt: &[f64], joints: usize, root: usize) -> f64 {
        let e = errors(pred, gt, joints, root);
        e.iter().sum::<f64>() / e.len() as f64
    }

    pub fn pck(pred: &[f64], gt: &[f64], joints: usize, root: usize, threshold: f64) -> f64 {
        let e = errors(pred, gt, joints, root);
        let hits = e.iter().filter(|&&x| x < threshold).count();
        100.0 * hits as f64 / e.len() as f64
    }

    pub fn auc(pred: &[f64], gt: &[f64], joints: usize, root: usize) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        let mut t = 5.0;
        while t <= 150.0 {
            total += pck(pred, gt, joints, root, t);
            count += 1;
            t += 5.0;
        }
        total / count as f64 / 100.0
    }
}

/// All-pairs hop counts by Floyd–Warshall over an undirected edge list.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<u32>> {
    const INF: u32 = u32::MAX / 4;
    let mut d = vec![vec![INF; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

/// A random connected graph: a random spanning tree plus extra edges.
pub fn random_connected_edges(n: usize, extra: usize, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.below(i), i)).collect();
    for _ in 0..extra {
        let (a, b) = (rng.below(n), rng.below(n));
        if a != b && !edges.iter().any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)) {
            edges.push((a, b));
        }
    }
    edges
}

/// A run small enough to train both stages in well under a second: the
/// 17-joint skeleton with a narrow, shallow network.
pub fn quick_run(out_dir: &std::path::Path) -> poselift::runner::RunConfig {
    let mut cfg = poselift::runner::RunConfig::desk();
    cfg.model = ModelConfig {
        dim: 8,
        num_heads: 2,
        pot_layers: 1,
        ugrn_layers: 1,
        ..ModelConfig::desk()
    };
    cfg.train.epochs_per_stage = 3;
    cfg.train.steps_per_epoch = Some(2);
    cfg.train.batch_size = 8;
    cfg.synth.count = 16;
    cfg.synth.test_count = 8;
    cfg.out_dir = out_dir.to_path_buf();
    cfg
}
