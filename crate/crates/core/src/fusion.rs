//! Late fusion of frozen text, vision and font features.
//!
//! Most mechanisms first "dock" each modality with an affine map and ReLU to
//! a shared joint width, then combine the three docked vectors. The
//! combined vector goes through optional dense blocks and a 4-way head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::{Label, Modality, ParagraphRecord};
use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, Graph, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const JOINT_DIM: usize = 1280;
pub const BILINEAR_RANK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalDims {
    pub text: usize,
    pub vision: usize,
    pub font: usize,
}

impl Default for ModalDims {
    fn default() -> Self {
        ModalDims {
            text: Modality::Text.dim(),
            vision: Modality::Vision.dim(),
            font: Modality::Font.dim(),
        }
    }
}

impl ModalDims {
    pub fn as_array(&self) -> [usize; 3] {
        [self.text, self.vision, self.font]
    }

    pub fn total(&self) -> usize {
        self.text + self.vision + self.font
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbraceWeights {
    /// (1/3, 1/3, 1/3).
    Balanced,
    /// Proportional to raw modality widths.
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    /// Raw features concatenated in (text, vision, font) order.
    Concat,
    DockConcat,
    /// Docked concatenation followed by dense ReLU blocks of these widths.
    DockFusion { widths: Vec<usize> },
    /// Pairwise low-rank products of the raw features.
    Bilinear,
    DockBilinearGated,
    DockGmu,
    DockAttention,
    DockMultiHead { heads: usize },
    Embrace { weights: EmbraceWeights },
}

impl Mechanism {
    pub fn docks(&self) -> bool {
        !matches!(self, Mechanism::Concat | Mechanism::Bilinear)
    }

    pub fn name(&self) -> String {
        match self {
            Mechanism::Concat => "concat".into(),
            Mechanism::DockConcat => "dock_concat".into(),
            Mechanism::DockFusion { widths } => {
                let w: Vec<String> = widths.iter().map(usize::to_string).collect();
                format!("fusion@{}", w.join("+"))
            }
            Mechanism::Bilinear => "bilinear".into(),
            Mechanism::DockBilinearGated => "bilinear_gated".into(),
            Mechanism::DockGmu => "gmu".into(),
            Mechanism::DockAttention => "xattn".into(),
            Mechanism::DockMultiHead { heads } => format!("multihead{heads}"),
            Mechanism::Embrace { weights } => match weights {
                EmbraceWeights::Balanced => "embrace".into(),
                EmbraceWeights::Weighted => "embrace_weighted".into(),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub mechanism: Mechanism,
    pub dims: ModalDims,
    pub joint_dim: usize,
    pub rank: usize,
    /// Dense ReLU blocks applied after the mechanism.
    #[serde(default)]
    pub post: Vec<usize>,
}

impl FusionConfig {
    pub fn new(mechanism: Mechanism) -> Self {
        FusionConfig {
            mechanism,
            dims: ModalDims::default(),
            joint_dim: JOINT_DIM,
            rank: BILINEAR_RANK,
            post: Vec::new(),
        }
    }

    pub fn with_post(mut self, post: Vec<usize>) -> Self {
        self.post = post;
        self
    }

    /// Same mechanism at reduced widths, for gradient checks and tests.
    pub fn scaled(mut self, dims: ModalDims, joint_dim: usize, rank: usize) -> Self {
        self.dims = dims;
        self.joint_dim = joint_dim;
        self.rank = rank;
        self
    }

    /// Looks up a mechanism by its CLI name (`concat`, `gmu`, `xattn`, ...).
    pub fn from_name(name: &str) -> Result<Self> {
        fusion_rows()
            .into_iter()
            .find(|r| r.key == name)
            .map(|r| r.config)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mechanism {name:?}")))
    }

    /// Width of the mechanism output before `post`.
    pub fn mechanism_dim(&self) -> usize {
        let j = self.joint_dim;
        match &self.mechanism {
            Mechanism::Concat => self.dims.total(),
            Mechanism::DockConcat => 3 * j,
            Mechanism::DockFusion { widths } => widths.last().copied().unwrap_or(3 * j),
            _ => j,
        }
    }

    /// Width of the joint embedding fed to the classifier.
    pub fn output_dim(&self) -> usize {
        self.post.last().copied().unwrap_or_else(|| self.mechanism_dim())
    }

    pub fn embrace_probs(&self) -> Option<[f64; 3]> {
        match self.mechanism {
            Mechanism::Embrace {
                weights: EmbraceWeights::Balanced,
            } => Some([1.0 / 3.0; 3]),
            Mechanism::Embrace {
                weights: EmbraceWeights::Weighted,
            } => {
                let t = self.dims.total() as f64;
                let [a, b, c] = self.dims.as_array();
                Some([a as f64 / t, b as f64 / t, c as f64 / t])
            }
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        let [a, b, c] = self.dims.as_array();
        if a == 0 || b == 0 || c == 0 || self.joint_dim == 0 || self.rank == 0 {
            return Err(Error::invalid(format!("invalid fusion config {self:?}")));
        }
        if let Mechanism::DockMultiHead { heads } = self.mechanism {
            check_heads(self.joint_dim, heads)?;
        }
        if let Mechanism::DockFusion { widths } = &self.mechanism {
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::invalid("dense fusion needs non-zero widths"));
            }
        }
        if self.post.contains(&0) {
            return Err(Error::invalid("post-fusion widths must be non-zero"));
        }
        Ok(())
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::invalid(format!("{heads} heads do not divide width {dim}")));
    }
    Ok(())
}

/// One row of the fusion comparison table.
#[derive(Clone, Debug)]
pub struct FusionRow {
    pub key: &'static str,
    pub label: &'static str,
    pub config: FusionConfig,
    pub advertised_dim: usize,
}

/// Every fusion configuration with the width its row advertises.
pub fn fusion_rows() -> Vec<FusionRow> {
    use Mechanism::*;
    let row = |key, label, config: FusionConfig, advertised_dim| FusionRow {
        key,
        label,
        config,
        advertised_dim,
    };
    vec![
        row("concat", "Concatenated raw features (@2176)", FusionConfig::new(Concat), 2176),
        row("dock_concat", "docker layers (@1280) + concat (@3840)", FusionConfig::new(DockConcat), 3840),
        row(
            "fusion768",
            "docker layers (@1280) + fusion (@768)",
            FusionConfig::new(DockFusion { widths: vec![768] }),
            768,
        ),
        row(
            "fusion1280",
            "docker layers (@1280) + fusion (@1280)",
            FusionConfig::new(DockFusion { widths: vec![1280] }),
            1280,
        ),
        row(
            "fusion2304",
            "docker layers (@1280) + fusion (@2304)",
            FusionConfig::new(DockFusion { widths: vec![2304] }),
            2304,
        ),
        row("bilinear", "bilinear mechanism (@1280)", FusionConfig::new(Bilinear), 1280),
        row(
            "bilinear_gated",
            "docker layers (@1280) + bilinear gated (@1280)",
            FusionConfig::new(DockBilinearGated),
            1280,
        ),
        row("gmu", "docker layers (@1280) + GMU (@1280)", FusionConfig::new(DockGmu), 1280),
        row(
            "xattn",
            "docker layers (@1280) + attention (@1280)",
            FusionConfig::new(DockAttention),
            1280,
        ),
        row(
            "multihead",
            "docker layers (@1280) + multihead attention (@1280, 8 heads)",
            FusionConfig::new(DockMultiHead { heads: 8 }),
            1280,
        ),
        row(
            "embrace",
            "EmbraceNet (@1280) balanced",
            FusionConfig::new(Embrace {
                weights: EmbraceWeights::Balanced,
            }),
            1280,
        ),
        row(
            "embrace_weighted",
            "EmbraceNet (@1280) weighted",
            FusionConfig::new(Embrace {
                weights: EmbraceWeights::Weighted,
            }),
            1280,
        ),
        row(
            "fusion2304_768",
            "docker layers (@1280) + fusion (@2304) + fusion (@768)",
            FusionConfig::new(DockFusion {
                widths: vec![2304, 768],
            }),
            768,
        ),
        row(
            "xattn_fusion768",
            "docker layers (@1280) + cross-modal attention (@1280) + fusion (@768)",
            FusionConfig::new(DockAttention).with_post(vec![768]),
            768,
        ),
        row(
            "gmu_fusion768",
            "docker layers (@1280) + GMU (@1280) + fusion (@768)",
            FusionConfig::new(DockGmu).with_post(vec![768]),
            768,
        ),
    ]
}

/// Raw per-paragraph features of one batch, rows aligned across modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionBatch<T> {
    pub text: Tensor<T>,
    pub vision: Tensor<T>,
    pub font: Tensor<T>,
}

impl<T: Real> FusionBatch<T> {
    pub fn new(text: Tensor<T>, vision: Tensor<T>, font: Tensor<T>) -> Result<Self> {
        let rows = text.shape()[0];
        for t in [&text, &vision, &font] {
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::shape("fusion batch", text.shape(), t.shape()));
            }
        }
        Ok(FusionBatch { text, vision, font })
    }

    /// Stacks precomputed embeddings of `records`.
    pub fn from_records(records: &[&ParagraphRecord]) -> Result<Self> {
        let stack = |m: Modality| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(records.len() * m.dim());
            for r in records {
                let e = r.embedding(m).ok_or_else(|| {
                    Error::invalid(format!(
                        "paragraph {}/{} has no {} embedding",
                        r.doc_id,
                        r.para_index,
                        m.name()
                    ))
                })?;
                data.extend(e.iter().map(|&x| T::of(x as f64)));
            }
            Tensor::new(&[records.len(), m.dim()], data)
        };
        FusionBatch::new(stack(Modality::Text)?, stack(Modality::Vision)?, stack(Modality::Font)?)
    }

    pub fn rows(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn parts(&self) -> [&Tensor<T>; 3] {
        [&self.text, &self.vision, &self.font]
    }

    /// Rows of several batches stacked in order.
    pub fn concat(parts: &[&FusionBatch<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("no fusion batches to stack"))?;
        let stack = |m: usize| -> Result<Tensor<T>> {
            let cols = first.parts()[m].shape()[1];
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts.iter().flat_map(|p| p.parts()[m].data().iter().copied()).collect();
            Tensor::new(&[rows, cols], data)
        };
        FusionBatch::new(stack(0)?, stack(1)?, stack(2)?)
    }
}

#[derive(Clone, Copy, Debug)]
struct BilinearPair {
    u: ParamId,
    v: ParamId,
    /// Gate offset on the `v` side; gated variant only.
    gate_bias: Option<ParamId>,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    heads: usize,
    out_proj: Option<Linear>,
    fuse: Linear,
}

#[derive(Clone, Debug)]
enum Body {
    None,
    Dense(Vec<Linear>),
    Bilinear { pairs: Vec<BilinearPair>, combine: Linear },
    Gmu { transforms: [Linear; 3], gate: Linear },
    Attention(Attention),
}

/// Forward-pass results; `gates` and `attention` are set by the mechanisms
/// that have them.
pub struct FusionOutput<'t, T: Real> {
    pub joint: Var<'t, T>,
    pub logits: Var<'t, T>,
    /// GMU gates `[b, 3, joint]`.
    pub gates: Option<Var<'t, T>>,
    /// Attention weights `[b·heads, 3, 3]`; row m attends over the others.
    pub attention: Option<Var<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct FusionModel<T> {
    pub config: FusionConfig,
    pub store: ParamStore<T>,
    docks: Option<[Linear; 3]>,
    body: Body,
    post: Vec<Linear>,
    pub head: Linear,
}

const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

impl<T: Real> FusionModel<T> {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let j = config.joint_dim;
        let dims = config.dims.as_array();
        let names = ["text", "vision", "font"];
        let docks = config.mechanism.docks().then(|| {
            [0, 1, 2].map(|m| Linear::new(&mut store, &mut rng, &format!("fusion.dock.{}", names[m]), dims[m], j))
        });
        // widths seen by the body: docked or raw
        let inner = if docks.is_some() { [j; 3] } else { dims };
        let body = match &config.mechanism {
            Mechanism::Concat | Mechanism::DockConcat | Mechanism::Embrace { .. } => Body::None,
            Mechanism::DockFusion { widths } => {
                let mut layers = Vec::new();
                let mut width = 3 * j;
                for (i, &w) in widths.iter().enumerate() {
                    layers.push(Linear::new(&mut store, &mut rng, &format!("fusion.dense{i}"), width, w));
                    width = w;
                }
                Body::Dense(layers)
            }
            Mechanism::Bilinear | Mechanism::DockBilinearGated => {
                let gated = config.mechanism == Mechanism::DockBilinearGated;
                let r = config.rank;
                let pairs = PAIRS
                    .iter()
                    .map(|&(a, b)| {
                        let name = format!("fusion.bilinear.{}_{}", names[a], names[b]);
                        let u = store.add(format!("{name}.u"), glorot_uniform(&mut rng, inner[a], r));
                        let v = store.add(format!("{name}.v"), glorot_uniform(&mut rng, inner[b], r));
                        let gate_bias = gated.then(|| store.add(format!("{name}.gate_b"), Tensor::zeros(&[1, r])));
                        // plain products stay rank-r until the shared combine map
                        let out_dim = if gated { j } else { r };
                        let out = Linear::new(&mut store, &mut rng, &format!("{name}.out"), r, out_dim);
                        BilinearPair { u, v, gate_bias, out }
                    })
                    .collect::<Vec<_>>();
                let width = pairs.iter().map(|p| p.out.fan_out).sum();
                let combine = Linear::new(&mut store, &mut rng, "fusion.bilinear.combine", width, j);
                Body::Bilinear { pairs, combine }
            }
            Mechanism::DockGmu => Body::Gmu {
                transforms: [0, 1, 2]
                    .map(|m| Linear::new(&mut store, &mut rng, &format!("fusion.gmu.h.{}", names[m]), j, j)),
                gate: Linear::new(&mut store, &mut rng, "fusion.gmu.gate", 3 * j, 3 * j),
            },
            Mechanism::DockAttention | Mechanism::DockMultiHead { .. } => {
                let heads = match config.mechanism {
                    Mechanism::DockMultiHead { heads } => heads,
                    _ => 1,
                };
                let q = Linear::new(&mut store, &mut rng, "fusion.attn.q", j, j);
                let k = Linear::new(&mut store, &mut rng, "fusion.attn.k", j, j);
                let v = Linear::new(&mut store, &mut rng, "fusion.attn.v", j, j);
                let out_proj = matches!(config.mechanism, Mechanism::DockMultiHead { .. })
                    .then(|| Linear::new(&mut store, &mut rng, "fusion.attn.o", j, j));
                let fuse = Linear::new(&mut store, &mut rng, "fusion.attn.fuse", j, j);
                Body::Attention(Attention {
                    q,
                    k,
                    v,
                    heads,
                    out_proj,
                    fuse,
                })
            }
        };
        let mut post = Vec::new();
        let mut width = config.mechanism_dim();
        for (i, &w) in config.post.iter().enumerate() {
            post.push(Linear::new(&mut store, &mut rng, &format!("fusion.post{i}"), width, w));
            width = w;
        }
        let head = Linear::new(&mut store, &mut rng, "fusion.head", width, Label::COUNT);
        Ok(FusionModel {
            config,
            store,
            docks,
            body,
            post,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Per-modality affine map and ReLU to the joint width.
    pub fn dock<'t>(&self, g: &Graph<'t, T>, raw: [Var<'t, T>; 3]) -> Result<[Var<'t, T>; 3]> {
        let docks = self
            .docks
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("{} has no docking layers", self.config.mechanism.name())))?;
        Ok([
            docks[0].forward(g, raw[0])?.relu(),
            docks[1].forward(g, raw[1])?.relu(),
            docks[2].forward(g, raw[2])?.relu(),
        ])
    }

    /// Joint embedding and logits. EmbraceNet samples its coordinate masks
    /// from `rng` when given one and uses the expectation otherwise.
    pub fn forward<'t>(
        &self,
        g: &Graph<'t, T>,
        batch: &FusionBatch<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<FusionOutput<'t, T>> {
        let dims = self.config.dims.as_array();
        for (t, d) in batch.parts().iter().zip(dims) {
            if t.shape()[1] != d {
                return Err(Error::shape("fusion input", &[batch.rows(), d], t.shape()));
            }
        }
        let raw = batch.parts().map(|t| g.input(t.clone()));
        let mut gates = None;
        let mut attention = None;
        let mechanism_out = match (&self.config.mechanism, &self.body) {
            (Mechanism::Concat, _) => fuse_concat(raw)?,
            (Mechanism::DockConcat, _) => fuse_concat(self.dock(g, raw)?)?,
            (Mechanism::DockFusion { .. }, Body::Dense(layers)) => {
                let mut x = fuse_concat(self.dock(g, raw)?)?;
                for l in layers {
                    x = l.forward(g, x)?.relu();
                }
                x
            }
            (Mechanism::Bilinear, Body::Bilinear { pairs, combine }) => {
                let parts = pairs
                    .iter()
                    .zip(PAIRS)
                    .map(|(p, (a, b))| low_rank_product(g, p, raw[a], raw[b]))
                    .collect::<Result<Vec<_>>>()?;
                combine.forward(g, g.tape().concat(&parts, 1)?)?
            }
            (Mechanism::DockBilinearGated, Body::Bilinear { pairs, combine }) => {
                let docked = self.dock(g, raw)?;
                let parts = pairs
                    .iter()
                    .zip(PAIRS)
                    .map(|(p, (a, b))| bilinear_gated_pair(g, p, docked[a], docked[b]))
                    .collect::<Result<Vec<_>>>()?;
                combine.forward(g, g.tape().concat(&parts, 1)?)?
            }
            (Mechanism::DockGmu, Body::Gmu { transforms, gate }) => {
                let docked = self.dock(g, raw)?;
                let (out, z) = fuse_gmu(g, transforms, gate, docked)?;
                gates = Some(z);
                out
            }
            (Mechanism::DockAttention | Mechanism::DockMultiHead { .. }, Body::Attention(att)) => {
                let docked = self.dock(g, raw)?;
                let (out, w) = cross_attention(g, att, docked)?;
                attention = Some(w);
                out
            }
            (Mechanism::Embrace { .. }, _) => {
                let docked = self.dock(g, raw)?;
                let probs = self.config.embrace_probs().expect("embrace probs");
                fuse_embrace(g, docked, probs, rng)?
            }
            _ => unreachable!("body matches mechanism by construction"),
        };
        let mut joint = mechanism_out;
        for l in &self.post {
            joint = l.forward(g, joint)?.relu();
        }
        let logits = self.head.forward(g, joint)?;
        Ok(FusionOutput {
            joint,
            logits,
            gates,
            attention,
        })
    }

    pub fn loss<'t>(
        &self,
        g: &Graph<'t, T>,
        batch: &FusionBatch<T>,
        labels: &[Label],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let out = self.forward(g, batch, rng)?;
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        out.logits.cross_entropy(&targets, None, None)
    }
}

/// Concatenation in (text, vision, font) order.
pub fn fuse_concat<'t, T: Real>(parts: [Var<'t, T>; 3]) -> Result<Var<'t, T>> {
    parts[0].tape().concat(&parts, 1)
}

fn low_rank_product<'t, T: Real>(
    g: &Graph<'t, T>,
    p: &BilinearPair,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ua = a.matmul(g.p(p.u))?;
    let vb = b.matmul(g.p(p.v))?;
    p.out.forward(g, ua.mul(vb)?)
}

/// `P[(aU) ⊙ σ(bV + c)] + bias`.
fn bilinear_gated_pair<'t, T: Real>(
    g: &Graph<'t, T>,
    p: &BilinearPair,
    a: Var<'t, T>,
    b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let ua = a.matmul(g.p(p.u))?;
    let mut gate = b.matmul(g.p(p.v))?;
    if let Some(c) = p.gate_bias {
        gate = gate.add(g.p(c))?;
    }
    p.out.forward(g, ua.mul(gate.sigmoid())?)
}

/// Stacks three `[b, d]` rows into `[b, 3, d]`.
fn stack_modalities<'t, T: Real>(parts: [Var<'t, T>; 3]) -> Result<Var<'t, T>> {
    let (b, d) = {
        let s = parts[0].shape();
        (s[0], s[1])
    };
    let rows = parts
        .iter()
        .map(|p| p.reshape(&[b, 1, d]))
        .collect::<Result<Vec<_>>>()?;
    parts[0].tape().concat(&rows, 1)
}

fn fuse_gmu<'t, T: Real>(
    g: &Graph<'t, T>,
    transforms: &[Linear; 3],
    gate: &Linear,
    docked: [Var<'t, T>; 3],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (b, j) = {
        let s = docked[0].shape();
        (s[0], s[1])
    };
    let h = [
        transforms[0].forward(g, docked[0])?.tanh(),
        transforms[1].forward(g, docked[1])?.tanh(),
        transforms[2].forward(g, docked[2])?.tanh(),
    ];
    let z = gate
        .forward(g, fuse_concat(docked)?)?
        .reshape(&[b, 3, j])?
        .softmax(1)?;
    let out = z.mul(stack_modalities(h)?)?.sum_axis(1)?.reshape(&[b, j])?;
    Ok((out, z))
}

fn cross_attention<'t, T: Real>(
    g: &Graph<'t, T>,
    att: &Attention,
    docked: [Var<'t, T>; 3],
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (b, j) = {
        let s = docked[0].shape();
        (s[0], s[1])
    };
    let h = att.heads;
    let dh = j / h;
    let x = stack_modalities(docked)?.reshape(&[b * 3, j])?;
    // [b·3, j] → [b·h, 3, dh]
    let split = |l: &Linear| -> Result<Var<'t, T>> {
        l.forward(g, x)?
            .reshape(&[b, 3, h, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * h, 3, dh])
    };
    let (q, k, v) = (split(&att.q)?, split(&att.k)?, split(&att.v)?);
    let scores = q.bmm(k.transpose()?)?.scale(T::of(1.0 / (dh as f64).sqrt()));
    // a modality attends only over the other two
    let mask: Vec<bool> = (0..b * h * 9).map(|i| (i % 9) / 3 != i % 3).collect();
    let w = scores.masked_softmax(2, Some(&mask))?;
    let attended = w
        .bmm(v)?
        .reshape(&[b, h, 3, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, 3, j])?
        .sum_axis(1)?
        .reshape(&[b, j])?;
    let attended = match &att.out_proj {
        Some(o) => o.forward(g, attended)?,
        None => attended,
    };
    Ok((att.fuse.forward(g, attended)?.relu(), w))
}

/// Per-coordinate modality selection. With `rng` each output coordinate is
/// copied from one modality drawn from `probs`; without, the output is the
/// expectation `Σ probs_m · docked_m`.
pub fn fuse_embrace<'t, T: Real>(
    g: &Graph<'t, T>,
    docked: [Var<'t, T>; 3],
    probs: [f64; 3],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var<'t, T>> {
    check_simplex(&probs)?;
    let shape = docked[0].shape();
    let n = shape.iter().product::<usize>();
    let masks: [Tensor<T>; 3] = match rng {
        Some(rng) => {
            let picks = embrace_selection(rng, n, probs);
            [0, 1, 2].map(|m| {
                let data = picks.iter().map(|&p| if p == m { T::one() } else { T::zero() }).collect();
                Tensor::new(&shape, data).expect("shape")
            })
        }
        None => [0, 1, 2].map(|m| Tensor::full(&[1, 1], T::of(probs[m]))),
    };
    let mut out: Option<Var<'t, T>> = None;
    for (d, mask) in docked.iter().zip(masks) {
        let term = d.mul(g.input(mask))?;
        out = Some(match out {
            Some(o) => o.add(term)?,
            None => term,
        });
    }
    Ok(out.expect("three modalities"))
}

/// Draws one modality index per coordinate.
pub fn embrace_selection<R: Rng>(rng: &mut R, n: usize, probs: [f64; 3]) -> Vec<usize> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < probs[0] {
                0
            } else if u < probs[0] + probs[1] {
                1
            } else if probs[2] > 0.0 {
                2
            } else if probs[1] > 0.0 {
                1
            } else {
                0
            }
        })
        .collect()
}

fn check_simplex(probs: &[f64; 3]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("modality probabilities {probs:?} are not a simplex")));
    }
    Ok(())
}
