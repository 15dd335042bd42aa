//! Sliding-window transformer: attention restricted to consecutive,
//! non-overlapping windows of `k` paragraphs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_docs, EncoderBlock, SeqInput, SequenceModel};
use crate::autodiff::Var;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::nn::{embedding_table, eval_graph, Graph, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwConfig {
    /// Content columns per paragraph (geometry excluded).
    pub input_dim: usize,
    pub geo_width: usize,
    pub model_dim: usize,
    pub window: usize,
    pub heads: usize,
    pub ff_multiplier: f64,
    pub encoder_blocks: usize,
    pub maxlen: usize,
}

impl SwConfig {
    /// Window 16, one block, ff 1.5×, maxlen 1024 and model width equal to
    /// the content width. Uses 20 heads when they divide the width, else 8,
    /// else 1.
    pub fn new(input_dim: usize, geo_width: usize) -> Self {
        let heads = [20, 8, 4, 2]
            .into_iter()
            .find(|h| input_dim.is_multiple_of(*h))
            .unwrap_or(1);
        SwConfig {
            input_dim,
            geo_width,
            model_dim: input_dim,
            window: 16,
            heads,
            ff_multiplier: 1.5,
            encoder_blocks: 1,
            maxlen: 1024,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::invalid("window size must be at least 1"));
        }
        if self.window > self.maxlen {
            return Err(Error::invalid(format!(
                "window {} exceeds maxlen {}",
                self.window, self.maxlen
            )));
        }
        if self.input_dim == 0 || self.model_dim == 0 || self.encoder_blocks == 0 {
            return Err(Error::invalid(format!("invalid sliding-window config {self:?}")));
        }
        Ok(())
    }
}

/// Content projection (when widths differ) plus projected geometry.
#[derive(Clone, Copy, Debug)]
pub(crate) struct InputEmbed {
    proj: Option<Linear>,
    geo: Option<Linear>,
}

impl InputEmbed {
    pub(crate) fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        input_dim: usize,
        geo_width: usize,
        model_dim: usize,
    ) -> Self {
        InputEmbed {
            proj: (input_dim != model_dim)
                .then(|| Linear::new(store, rng, &format!("{name}.proj"), input_dim, model_dim)),
            geo: (geo_width > 0).then(|| Linear::new(store, rng, &format!("{name}.geo"), geo_width, model_dim)),
        }
    }

    /// `content`: `[R, input_dim]`, `geo`: `[R, geo_width]` → `[R, model_dim]`.
    pub(crate) fn forward<'t, T: Real>(
        &self,
        g: &Graph<'t, T>,
        content: Tensor<T>,
        geo: Option<Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let c = g.input(content);
        let mut h = match &self.proj {
            Some(p) => p.forward(g, c)?,
            None => c,
        };
        if let (Some(lin), Some(geo)) = (&self.geo, geo) {
            h = h.add(lin.forward(g, g.input(geo))?)?;
        }
        Ok(h)
    }
}

/// Rows of a batch laid out in fixed-size slots, padding marked in `mask`.
pub(crate) struct SlotLayout<T> {
    pub content: Tensor<T>,
    pub geo: Option<Tensor<T>>,
    pub mask: Vec<bool>,
    /// Slot index of every real paragraph, in document order.
    pub real: Vec<usize>,
    /// Number of windows per document.
    pub windows: Vec<usize>,
}

/// Splits every document into windows of `k` slots, each preceded by
/// `lead` reserved slots (zero content, always unmasked).
pub(crate) fn layout<T: Real>(docs: &[&SeqInput<T>], k: usize, lead: usize) -> Result<SlotLayout<T>> {
    let (c, gw) = (docs[0].content_dim(), docs[0].geo_width());
    let slot = k + lead;
    let windows: Vec<usize> = docs.iter().map(|d| d.len().div_ceil(k)).collect();
    let total = windows.iter().sum::<usize>() * slot;
    let mut content = vec![T::zero(); total * c];
    let mut geo = vec![T::zero(); total * gw];
    let mut mask = vec![false; total];
    let mut real = Vec::new();
    let mut base = 0;
    for (d, &w) in docs.iter().zip(&windows) {
        for wi in 0..w {
            let start = base + wi * slot;
            mask[start..start + lead].iter_mut().for_each(|m| *m = true);
            for j in 0..k {
                let i = wi * k + j;
                if i >= d.len() {
                    break;
                }
                let s = start + lead + j;
                content[s * c..(s + 1) * c].copy_from_slice(d.content_row(i));
                geo[s * gw..(s + 1) * gw].copy_from_slice(d.geo_row(i));
                mask[s] = true;
                real.push(s);
            }
        }
        base += w * slot;
    }
    Ok(SlotLayout {
        content: Tensor::new(&[total, c], content)?,
        geo: if gw > 0 { Some(Tensor::new(&[total, gw], geo)?) } else { None },
        mask,
        real,
        windows,
    })
}

#[derive(Clone, Debug)]
pub struct SwModel<T> {
    pub config: SwConfig,
    pub store: ParamStore<T>,
    embed: InputEmbed,
    position: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNorm,
    head: Linear,
}

/// Forward results of one batch.
pub struct SwOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    /// Per block, `[windows·heads, k, k]`.
    pub weights: Vec<Var<'t, T>>,
    pub attention_flops: u64,
}

impl<T: Real> SwModel<T> {
    pub fn new(config: SwConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let embed = InputEmbed::new(&mut store, &mut rng, "sw.input", config.input_dim, config.geo_width, d);
        let position = store.add("sw.position", embedding_table(&mut rng, config.window, d, 0.02));
        let blocks = (0..config.encoder_blocks)
            .map(|i| {
                EncoderBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("sw.block{i}"),
                    d,
                    config.heads,
                    config.ff_multiplier,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&mut store, "sw.final_ln", d);
        let head = Linear::new(&mut store, &mut rng, "sw.head", d, Label::COUNT);
        Ok(SwModel {
            config,
            store,
            embed,
            position,
            blocks,
            final_ln,
            head,
        })
    }

    pub fn forward<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<SwOutput<'t, T>> {
        let cfg = &self.config;
        check_docs(docs, cfg.input_dim + cfg.geo_width, cfg.geo_width)?;
        let (k, d) = (cfg.window, cfg.model_dim);
        let slots = layout(docs, k, 0)?;
        let w: usize = slots.windows.iter().sum();
        let pos = g.p(self.position).reshape(&[1, k, d])?;
        let mut x = self
            .embed
            .forward(g, slots.content, slots.geo)?
            .reshape(&[w, k, d])?
            .add(pos)?;
        let mut weights = Vec::with_capacity(self.blocks.len());
        let mut flops = 0;
        for block in &self.blocks {
            let out = block.forward(g, x, &slots.mask)?;
            x = out.out;
            weights.push(out.weights);
            flops += out.attention_flops;
        }
        let states = self.final_ln.forward(g, x.reshape(&[w * k, d])?)?;
        let rows = g.tape().gather_rows(states, &slots.real)?;
        Ok(SwOutput {
            logits: self.head.forward(g, rows)?,
            weights,
            attention_flops: flops,
        })
    }

    /// Head-averaged `[N, N]` attention of block `block` for one document.
    pub fn attention_map(&self, doc: &SeqInput<T>, block: usize) -> Result<Tensor<T>> {
        if block >= self.blocks.len() {
            return Err(Error::invalid(format!("no encoder block {block}")));
        }
        let w = eval_graph(&self.store, |g| Ok(self.forward(g, &[doc])?.weights[block].value()))?;
        let (k, h, n) = (self.config.window, self.config.heads, doc.len());
        let mut map = Tensor::zeros(&[n, n]);
        let scale = T::of(1.0 / h as f64);
        for win in 0..n.div_ceil(k) {
            for head in 0..h {
                let base = (win * h + head) * k * k;
                for qi in 0..k {
                    for kj in 0..k {
                        let (a, b) = (win * k + qi, win * k + kj);
                        if a < n && b < n {
                            map.data_mut()[a * n + b] += w.data()[base + qi * k + kj] * scale;
                        }
                    }
                }
            }
        }
        Ok(map)
    }

    /// Attention FLOPs of one forward pass over a document of `n` rows.
    pub fn attention_flops(&self, n: usize) -> u64 {
        let windows = n.div_ceil(self.config.window) as u64;
        let k = self.config.window as u64;
        4 * windows * k * k * self.config.model_dim as u64 * self.blocks.len() as u64
    }
}

impl<T: Real> SequenceModel<T> for SwModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn logits<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<Var<'t, T>> {
        Ok(self.forward(g, docs)?.logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(n: usize, dim: usize, geo: usize, seed: u64) -> SeqInput<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * (dim + geo)).map(|_| rng.random_range(-1.0..1.0)).collect();
        SeqInput::new(Tensor::new(&[n, dim + geo], data).unwrap(), geo).unwrap()
    }

    fn cfg(dim: usize, geo: usize, k: usize) -> SwConfig {
        SwConfig {
            heads: 2,
            window: k,
            ..SwConfig::new(dim, geo)
        }
    }

    #[test]
    fn zero_window_is_rejected() {
        assert!(SwModel::<f32>::new(cfg(4, 0, 0), 0).is_err());
    }

    #[test]
    fn windows_do_not_mix() {
        let m = SwModel::<f64>::new(cfg(6, 4, 4), 1).unwrap();
        let x = doc(10, 6, 4, 2);
        let map = m.attention_map(&x, 0).unwrap();
        for a in 0..10 {
            let row: f64 = (0..10).map(|b| map.at(a, b)).sum();
            assert!((row - 1.0).abs() < 1e-12);
            for b in 0..10 {
                if a / 4 != b / 4 {
                    assert_eq!(map.at(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn logits_cover_every_paragraph() {
        let m = SwModel::<f64>::new(cfg(6, 0, 4), 3).unwrap();
        let (a, b) = (doc(7, 6, 0, 4), doc(3, 6, 0, 5));
        let preds = m.predict(&[&a, &b]).unwrap();
        assert_eq!(preds.iter().map(Vec::len).collect::<Vec<_>>(), vec![7, 3]);
    }

    #[test]
    fn flops_are_linear_in_length() {
        let m = SwModel::<f32>::new(cfg(8, 0, 16), 0).unwrap();
        assert_eq!(m.attention_flops(512), 2 * m.attention_flops(256));
    }
}
