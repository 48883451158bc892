//! Self-attention variants, the position-wise feed-forward block and the
//! pre-LN encoder layer.
//!
//! All three attention variants share the projections and differ only in how
//! the pre-softmax logits are formed, per head `h`:
//!
//! * standard: `A = Q·Kᵀ / √d`
//! * pose-oriented: `A[i][j] = Q_i·K_jᵀ / √d + Φ(D[i][j])[h]`, where `D` is the
//!   skeleton hop distance and `Φ` a small learned MLP
//! * uncertainty-guided: `A[i][j] = Q_i·K_jᵀ / (√d · max(Σσ_j, ε_u))`, so keys of
//!   joints with a large predicted σ get flatter, weaker logits

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear, ParamStore};
use crate::numerics::{Rng, Tensor, Var};
use crate::skeleton::DistMatrix;

/// Floor on the summed per-joint σ in uncertainty-guided attention.
pub const UG_EPS: f64 = 1e-3;
/// Hidden width of the distance-bias MLP.
pub const BIAS_HIDDEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Standard,
    PoseOriented,
    UncertaintyGuided,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Standard => "MH-SA",
            AttentionKind::PoseOriented => "PO-SA",
            AttentionKind::UncertaintyGuided => "UG-SA",
        }
    }
}

/// Runtime attention mode of one layer.
#[derive(Clone, Copy)]
pub enum AttentionMode<'a, 't> {
    Standard,
    PoseOriented {
        dist: &'a DistMatrix,
        net: &'a DistanceBiasNet,
    },
    /// `sigma` is `[B, J, 3]` (or `[J, 3]` for an unbatched input).
    UncertaintyGuided {
        sigma: Var<'t>,
    },
}

/// Maps a scalar hop distance to one additive logit bias per head.
#[derive(Clone, Debug)]
pub struct DistanceBiasNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl DistanceBiasNet {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, num_heads: usize) -> Self {
        Self {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), 1, BIAS_HIDDEN),
            out: Linear::new(store, rng, &format!("{name}.out"), BIAS_HIDDEN, num_heads),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.out.fan_out
    }
}

/// Bias table `[H, J, J]` with `bias[h][i][j] = Φ(d[i][j])[h]`.
///
/// Recomputed on every call so `Φ` is trained through the tape.
pub fn po_bias_table<'t>(ctx: &Ctx<'_, 't>, dist: &DistMatrix, net: &DistanceBiasNet) -> Result<Var<'t>> {
    let j = dist.len();
    let input = Tensor::new(&[j * j, 1], dist.as_slice().iter().map(|&h| h as f64).collect())?;
    let hidden = net.hidden.forward(ctx, &ctx.tape.constant(input))?.gelu()?;
    net.out
        .forward(ctx, &hidden)?
        .reshape(&[j, j, net.num_heads()])?
        .permute(&[2, 0, 1])
}

/// Query/key/value/output projections for `num_heads` heads over width `dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub num_heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

/// Splits `[B, J, C]` into `[B, H, J, d]`.
fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], heads, s[2] / heads])?.permute(&[0, 2, 1, 3])
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, num_heads: usize, dropout: f64) -> Self {
        assert!(
            num_heads > 0 && dim.is_multiple_of(num_heads),
            "dim {dim} not divisible by {num_heads} heads"
        );
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim),
            num_heads,
            dim,
            dropout,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    fn check_input(&self, z: &Var<'_>) -> Result<()> {
        let s = z.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(shape_mismatch("attend", &s, &[self.dim]));
        }
        if !z.is_finite() {
            return Err(Error::NonFiniteInput("attend"));
        }
        Ok(())
    }

    /// Pre-softmax logits `[B, H, J, J]` and the per-head values `[B, H, J, d]`.
    fn logits_and_values<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        z: &Var<'t>,
        mode: &AttentionMode<'_, 't>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.check_input(z)?;
        let (b, j) = (z.shape()[0], z.shape()[1]);
        let q = split_heads(&self.query.forward(ctx, z)?, self.num_heads)?;
        let k = split_heads(&self.key.forward(ctx, z)?, self.num_heads)?;
        let v = split_heads(&self.value.forward(ctx, z)?, self.num_heads)?;
        let scores = q
            .matmul(&k.transpose()?)?
            .scale(1.0 / (self.head_dim() as f64).sqrt())?;
        let logits = match mode {
            AttentionMode::Standard => scores,
            AttentionMode::PoseOriented { dist, net } => {
                if dist.len() != j || net.num_heads() != self.num_heads {
                    return Err(shape_mismatch(
                        "po-sa bias",
                        &[dist.len(), net.num_heads()],
                        &[j, self.num_heads],
                    ));
                }
                scores.add(&po_bias_table(ctx, dist, net)?)?
            }
            AttentionMode::UncertaintyGuided { sigma } => {
                let s = sigma.shape();
                let sigma = if s.len() == 2 {
                    sigma.reshape(&[1, s[0], s[1]])?
                } else {
                    *sigma
                };
                if sigma.shape()[..2] != [b, j] {
                    return Err(shape_mismatch("ug-sa sigma", &sigma.shape(), &[b, j]));
                }
                if !sigma.is_finite() {
                    return Err(Error::NonFiniteInput("ug-sa sigma"));
                }
                let divisor = sigma.sum_last()?.clamp_min(UG_EPS)?.reshape(&[b, 1, 1, j])?;
                scores.div(&divisor)?
            }
        };
        Ok((logits, v))
    }

    /// Raw pre-softmax attention logits, `[B, H, J, J]`.
    pub fn logits<'t>(&self, ctx: &Ctx<'_, 't>, z: &Var<'t>, mode: &AttentionMode<'_, 't>) -> Result<Var<'t>> {
        Ok(self.logits_and_values(ctx, &batched(z)?, mode)?.0)
    }

    /// Attention probabilities (softmax of [`Self::logits`]), before dropout.
    pub fn probabilities<'t>(&self, ctx: &Ctx<'_, 't>, z: &Var<'t>, mode: &AttentionMode<'_, 't>) -> Result<Var<'t>> {
        self.logits(ctx, z, mode)?.softmax()
    }

    /// Multi-head attention over `[B, J, C]` (or `[J, C]`), output the same shape.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, z: &Var<'t>, mode: &AttentionMode<'_, 't>) -> Result<Var<'t>> {
        let unbatched = z.shape().len() == 2;
        let zb = batched(z)?;
        let (logits, v) = self.logits_and_values(ctx, &zb, mode)?;
        let probs = logits.softmax()?.dropout(self.dropout, ctx.rng, ctx.training)?;
        let s = zb.shape();
        let heads = probs.matmul(&v)?.permute(&[0, 2, 1, 3])?.reshape(&s)?;
        let out = self.output.forward(ctx, &heads)?;
        if unbatched {
            out.reshape(&[s[1], s[2]])
        } else {
            Ok(out)
        }
    }
}

fn batched<'t>(z: &Var<'t>) -> Result<Var<'t>> {
    let s = z.shape();
    match s.len() {
        2 => z.reshape(&[1, s[0], s[1]]),
        3 => Ok(*z),
        _ => Err(shape_mismatch("attend", &s, &[])),
    }
}

/// Two-layer position-wise MLP with a GELU between, hidden width `⌊ratio·C⌋`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub fn ffn_hidden(dim: usize, ratio: f64) -> usize {
    (ratio * dim as f64).floor() as usize
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, ratio: f64) -> Self {
        let hidden = ffn_hidden(dim, ratio);
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    /// `MLP₂(GELU(MLP₁(x)))`, without a residual.
    pub fn inner<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(ctx, x)?.gelu()?;
        self.fc2.forward(ctx, &h)
    }

    /// `MLP₂(GELU(MLP₁(x))) + x`.
    pub fn forward<'t>(&self, ctx: &Ctx<'_, 't>, x: &Var<'t>) -> Result<Var<'t>> {
        self.inner(ctx, x)?.add(x)
    }
}

/// What guides attention across a whole layer stack.
#[derive(Clone, Copy)]
pub enum Guidance<'a, 't> {
    None,
    Distance(&'a DistMatrix),
    Uncertainty(Var<'t>),
}

/// One pre-LN transformer layer:
///
/// ```text
/// z' = Drop(Attn(LN(z))) + z
/// out = Drop(FFN_inner(LN(z'))) + z'
/// ```
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub bias_net: Option<DistanceBiasNet>,
    pub kind: AttentionKind,
    pub dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        kind: AttentionKind,
        dim: usize,
        num_heads: usize,
        ffn_ratio: f64,
        dropout: f64,
    ) -> Self {
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, num_heads, dropout);
        let bias_net = (kind == AttentionKind::PoseOriented)
            .then(|| DistanceBiasNet::new(store, rng, &format!("{name}.attn.dist_bias"), num_heads));
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let ffn = FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ffn_ratio);
        Self {
            norm1,
            attn,
            norm2,
            ffn,
            bias_net,
            kind,
            dropout,
        }
    }

    pub fn mode<'a, 't>(&'a self, guidance: &Guidance<'a, 't>) -> Result<AttentionMode<'a, 't>> {
        Ok(match (self.kind, guidance) {
            (AttentionKind::Standard, _) => AttentionMode::Standard,
            (AttentionKind::PoseOriented, Guidance::Distance(dist)) => AttentionMode::PoseOriented {
                dist,
                net: self.bias_net.as_ref().expect("pose-oriented layer has a bias net"),
            },
            (AttentionKind::UncertaintyGuided, Guidance::Uncertainty(sigma)) => {
                AttentionMode::UncertaintyGuided { sigma: *sigma }
            }
            (kind, _) => {
                return Err(Error::InvalidConfig(format!(
                    "{} layer given the wrong guidance",
                    kind.label()
                )))
            }
        })
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'_, 't>, z: &Var<'t>, guidance: &Guidance<'_, 't>) -> Result<Var<'t>> {
        let mode = self.mode(guidance)?;
        let h = self.norm1.forward(ctx, z)?;
        let a = self
            .attn
            .forward(ctx, &h, &mode)?
            .dropout(self.dropout, ctx.rng, ctx.training)?;
        let z1 = a.add(z)?;
        let h2 = self.norm2.forward(ctx, &z1)?;
        let f = self.ffn.inner(ctx, &h2)?.dropout(self.dropout, ctx.rng, ctx.training)?;
        f.add(&z1)
    }
}
