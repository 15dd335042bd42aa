//! Font modality: embedded font-id sequences through an LSTM, GRU or BiLSTM.
//!
//! PAD positions carry the recurrent state through unchanged, so any amount
//! of left padding yields the same feature vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::{encode_font_sequence, FontVocab, Label, Modality, ParagraphRecord};
use crate::error::{Error, Result};
use crate::nn::{embedding_table, eval_graph, glorot_uniform, orthogonal, Graph, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::vision::EmbeddingProvider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    Bilstm,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            "bilstm" => Ok(CellKind::Bilstm),
            _ => Err(Error::invalid(format!("unknown recurrent cell {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FontEncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub cell: CellKind,
    pub hidden: usize,
    pub maxlen: usize,
    pub num_classes: usize,
}

impl FontEncoderConfig {
    /// 128-cell LSTM over sequences of up to 1000 font ids.
    pub fn new(vocab_size: usize) -> Self {
        FontEncoderConfig {
            vocab_size,
            embed_dim: 364,
            cell: CellKind::Lstm,
            hidden: 128,
            maxlen: 1000,
            num_classes: Label::COUNT,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.hidden == 0 || self.maxlen == 0 {
            return Err(Error::invalid(format!("invalid font encoder config {self:?}")));
        }
        Ok(())
    }
}

/// One direction of a gated recurrence.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentLayer {
    pub kind: GateKind,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    /// Hidden-side bias; GRU only (applied inside the reset gate).
    pub b_hh: Option<ParamId>,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Lstm,
    Gru,
}

impl RecurrentLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: GateKind,
        input: usize,
        hidden: usize,
    ) -> Self {
        let gates = match kind {
            GateKind::Lstm => 4,
            GateKind::Gru => 3,
        };
        let w_ih = store.add(format!("{name}.w_ih"), glorot_uniform(rng, input, gates * hidden));
        let w_hh = store.add(format!("{name}.w_hh"), orthogonal(rng, hidden, gates * hidden));
        let mut bias = Tensor::zeros(&[1, gates * hidden]);
        if kind == GateKind::Lstm {
            // forget-gate bias 1
            bias.data_mut()[hidden..2 * hidden]
                .iter_mut()
                .for_each(|b| *b = T::one());
        }
        let b_ih = store.add(format!("{name}.b_ih"), bias);
        let b_hh = (kind == GateKind::Gru)
            .then(|| store.add(format!("{name}.b_hh"), Tensor::zeros(&[1, gates * hidden])));
        RecurrentLayer {
            kind,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
        }
    }

    /// One step from state `(h, c)`; `c` is ignored for GRU.
    pub fn step<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        x_proj: Var<'t, T>,
        h: Var<'t, T>,
        c: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let hd = self.hidden;
        match self.kind {
            GateKind::Lstm => {
                let gates = x_proj.add(h.matmul(g.p(self.w_hh))?)?;
                let i = gates.slice(1, 0, hd)?.sigmoid();
                let f = gates.slice(1, hd, hd)?.sigmoid();
                let cand = gates.slice(1, 2 * hd, hd)?.tanh();
                let o = gates.slice(1, 3 * hd, hd)?.sigmoid();
                let c_new = f.mul(c)?.add(i.mul(cand)?)?;
                let h_new = o.mul(c_new.tanh())?;
                Ok((h_new, c_new))
            }
            GateKind::Gru => {
                let hh = h
                    .matmul(g.p(self.w_hh))?
                    .add(g.p(self.b_hh.expect("gru hidden bias")))?;
                let r = x_proj.slice(1, 0, hd)?.add(hh.slice(1, 0, hd)?)?.sigmoid();
                let z = x_proj.slice(1, hd, hd)?.add(hh.slice(1, hd, hd)?)?.sigmoid();
                let n = x_proj
                    .slice(1, 2 * hd, hd)?
                    .add(r.mul(hh.slice(1, 2 * hd, hd)?)?)?
                    .tanh();
                // h' = n + z ⊙ (h − n)
                let h_new = n.add(z.mul(h.sub(n)?)?)?;
                Ok((h_new, c))
            }
        }
    }

    /// Runs the recurrence over time-major inputs. `steps[t]` holds the
    /// projected input rows for step `t` and the per-row keep mask.
    fn run<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        proj: Var<'t, T>,
        masks: &[Vec<bool>],
        order: impl Iterator<Item = usize>,
    ) -> Result<Var<'t, T>> {
        let batch = masks[0].len();
        let zeros = g.input(Tensor::zeros(&[batch, self.hidden]));
        let (mut h, mut c) = (zeros, zeros);
        for t in order {
            let mask = &masks[t];
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let x = proj.slice(0, t * batch, batch)?;
            let (h_new, c_new) = self.step(g, x, h, c)?;
            if mask.iter().all(|&m| m) {
                h = h_new;
                c = c_new;
            } else {
                let m = g.input(Tensor::new(
                    &[batch, 1],
                    mask.iter().map(|&k| if k { T::one() } else { T::zero() }).collect(),
                )?);
                h = h.add(m.mul(h_new.sub(h)?)?)?;
                if self.kind == GateKind::Lstm {
                    c = c.add(m.mul(c_new.sub(c)?)?)?;
                }
            }
        }
        Ok(h)
    }
}

pub struct FontOutput<'t, T: Real> {
    /// `[batch, hidden]`
    pub feature: Var<'t, T>,
    /// `[batch, num_classes]`
    pub logits: Var<'t, T>,
}

#[derive(Clone, Debug)]
pub struct FontEncoder<T> {
    pub config: FontEncoderConfig,
    pub store: ParamStore<T>,
    pub embedding: ParamId,
    pub forward_layer: RecurrentLayer,
    pub backward_layer: Option<RecurrentLayer>,
    /// BiLSTM only: maps the 2·hidden concatenation back to hidden.
    pub merge: Option<Linear>,
    pub head: Linear,
}

impl<T: Real> FontEncoder<T> {
    pub fn new(config: FontEncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = store.add(
            "font.embedding",
            embedding_table(&mut rng, config.vocab_size, config.embed_dim, 0.1),
        );
        let kind = match config.cell {
            CellKind::Gru => GateKind::Gru,
            CellKind::Lstm | CellKind::Bilstm => GateKind::Lstm,
        };
        let forward_layer =
            RecurrentLayer::new(&mut store, &mut rng, "font.fwd", kind, config.embed_dim, config.hidden);
        let (backward_layer, merge) = if config.cell == CellKind::Bilstm {
            let bwd = RecurrentLayer::new(
                &mut store,
                &mut rng,
                "font.bwd",
                GateKind::Lstm,
                config.embed_dim,
                config.hidden,
            );
            let merge = Linear::new(&mut store, &mut rng, "font.merge", 2 * config.hidden, config.hidden);
            (Some(bwd), Some(merge))
        } else {
            (None, None)
        };
        let head = Linear::new(&mut store, &mut rng, "font.head", config.hidden, config.num_classes);
        Ok(FontEncoder {
            config,
            store,
            embedding,
            forward_layer,
            backward_layer,
            merge,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Feature vectors and logits for a batch of equal-length id sequences.
    pub fn forward<'t>(&self, g: &Graph<'t, T>, batch: &[Vec<u32>]) -> Result<FontOutput<'t, T>> {
        let b = batch.len();
        let len = batch.first().map_or(0, Vec::len);
        if b == 0 || len == 0 {
            return Err(Error::invalid("font encoder needs a non-empty batch"));
        }
        let mut ids = Vec::with_capacity(b * len);
        let mut masks = vec![vec![false; b]; len];
        for t in 0..len {
            for (r, seq) in batch.iter().enumerate() {
                if seq.len() != len {
                    return Err(Error::shape("font batch", &[len], &[seq.len()]));
                }
                let id = seq[t] as usize;
                if id >= self.config.vocab_size {
                    return Err(Error::invalid(format!(
                        "font id {id} out of range [0, {})",
                        self.config.vocab_size
                    )));
                }
                ids.push(id);
                masks[t][r] = id != FontVocab::PAD as usize;
            }
        }
        let hidden = self.direction(g, &self.forward_layer, &ids, &masks, false)?;
        let feature = match (&self.backward_layer, &self.merge) {
            (Some(bwd), Some(merge)) => {
                let back = self.direction(g, bwd, &ids, &masks, true)?;
                merge.forward(g, g.tape().concat(&[hidden, back], 1)?)?
            }
            _ => hidden,
        };
        let logits = self.head.forward(g, feature)?;
        Ok(FontOutput { feature, logits })
    }

    fn direction<'t>(
        &self,
        g: &Graph<'t, T>,
        layer: &RecurrentLayer,
        ids: &[usize],
        masks: &[Vec<bool>],
        reverse: bool,
    ) -> Result<Var<'t, T>> {
        let batch = masks[0].len();
        // only project steps that carry at least one real id
        let active: Vec<usize> = (0..masks.len()).filter(|&t| masks[t].iter().any(|&m| m)).collect();
        if active.is_empty() {
            return Ok(g.input(Tensor::zeros(&[batch, layer.hidden])));
        }
        let rows: Vec<usize> = active
            .iter()
            .flat_map(|&t| ids[t * batch..(t + 1) * batch].iter().copied())
            .collect();
        let x = g.tape().gather_rows(g.p(self.embedding), &rows)?;
        let proj = x.matmul(g.p(layer.w_ih))?.add(g.p(layer.b_ih))?;
        let active_masks: Vec<Vec<bool>> = active.iter().map(|&t| masks[t].clone()).collect();
        let n = active.len();
        if reverse {
            layer.run(g, proj, &active_masks, (0..n).rev())
        } else {
            layer.run(g, proj, &active_masks, 0..n)
        }
    }

    pub fn loss<'t>(&self, g: &Graph<'t, T>, batch: &[Vec<u32>], labels: &[Label]) -> Result<Var<'t, T>> {
        let out = self.forward(g, batch)?;
        let targets: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        out.logits.cross_entropy(&targets, None, None)
    }

    /// Inference without gradients: `(features, logits)`.
    pub fn encode(&self, batch: &[Vec<u32>]) -> Result<(Tensor<T>, Tensor<T>)> {
        eval_graph(&self.store, |g| {
            let out = self.forward(g, batch)?;
            Ok((out.feature.value().as_ref().clone(), out.logits.value().as_ref().clone()))
        })
    }
}

/// The trained font encoder as the 128-dim font feature backbone.
pub struct FontFeatureProvider<'a> {
    pub encoder: &'a FontEncoder<f32>,
    pub vocab: &'a FontVocab,
}

impl EmbeddingProvider for FontFeatureProvider<'_> {
    fn modality(&self) -> Modality {
        Modality::Font
    }

    fn dim(&self) -> usize {
        self.encoder.config.hidden
    }

    fn embed(&self, record: &ParagraphRecord) -> Result<Vec<f32>> {
        let ids = encode_font_sequence(record, self.vocab, self.encoder.config.maxlen);
        let (feat, _) = self.encoder.encode(&[ids])?;
        Ok(feat.into_data())
    }
}
