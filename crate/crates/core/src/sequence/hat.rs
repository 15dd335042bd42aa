//! Hierarchical attention transformer with interleaved segment-wise (SWE)
//! and context-wise (CWE) encoders.
//!
//! Each segment of `k` paragraphs is led by a learned summary token. A
//! repetition runs the SWE inside every segment, then the CWE across the
//! document's summary tokens; the change the CWE makes to a summary is
//! added to every member of its segment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::{layout, InputEmbed};
use super::{check_docs, EncoderBlock, SeqInput, SequenceModel};
use crate::autodiff::Var;
use crate::corpus::Label;
use crate::error::{Error, Result};
use crate::nn::{embedding_table, Graph, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HatConfig {
    pub input_dim: usize,
    pub geo_width: usize,
    pub model_dim: usize,
    /// Paragraphs per segment.
    pub segment: usize,
    pub heads: usize,
    pub ff_multiplier: f64,
    /// SWE+CWE repetitions.
    pub reps: usize,
}

impl HatConfig {
    pub fn new(input_dim: usize, geo_width: usize) -> Self {
        let heads = [20, 8, 4, 2]
            .into_iter()
            .find(|h| input_dim.is_multiple_of(*h))
            .unwrap_or(1);
        HatConfig {
            input_dim,
            geo_width,
            model_dim: input_dim,
            segment: 16,
            heads,
            ff_multiplier: 1.5,
            reps: 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HatLayer {
    pub swe: EncoderBlock,
    pub cwe: EncoderBlock,
}

#[derive(Clone, Debug)]
pub struct HatModel<T> {
    pub config: HatConfig,
    pub store: ParamStore<T>,
    embed: InputEmbed,
    summary: ParamId,
    position: ParamId,
    pub layers: Vec<HatLayer>,
    final_ln: LayerNorm,
    head: Linear,
}

impl<T: Real> HatModel<T> {
    pub fn new(config: HatConfig, seed: u64) -> Result<Self> {
        if config.segment == 0 || config.reps == 0 || config.input_dim == 0 || config.model_dim == 0 {
            return Err(Error::invalid(format!("invalid HAT config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let embed = InputEmbed::new(&mut store, &mut rng, "hat.input", config.input_dim, config.geo_width, d);
        let summary = store.add("hat.summary", embedding_table(&mut rng, 1, d, 0.02));
        let position = store.add("hat.position", embedding_table(&mut rng, config.segment + 1, d, 0.02));
        let layers = (0..config.reps)
            .map(|i| {
                let mut block = |part: &str| {
                    EncoderBlock::new(
                        &mut store,
                        &mut rng,
                        &format!("hat.layer{i}.{part}"),
                        d,
                        config.heads,
                        config.ff_multiplier,
                    )
                };
                Ok(HatLayer {
                    swe: block("swe")?,
                    cwe: block("cwe")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNorm::new(&mut store, "hat.final_ln", d);
        let head = Linear::new(&mut store, &mut rng, "hat.head", d, Label::COUNT);
        Ok(HatModel {
            config,
            store,
            embed,
            summary,
            position,
            layers,
            final_ln,
            head,
        })
    }

    /// Names of every CWE parameter, for ablations.
    pub fn cwe_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .iter()
            .filter(|n| n.contains(".cwe."))
            .cloned()
            .collect()
    }

    /// Final `[N, model_dim]` paragraph states for one document.
    pub fn states<'t>(&self, g: &Graph<'t, T>, doc: &SeqInput<T>) -> Result<Var<'t, T>> {
        let (k, d) = (self.config.segment, self.config.model_dim);
        let slots = layout(&[doc], k, 1)?;
        let s = slots.windows[0];
        let embedded = self
            .embed
            .forward(g, slots.content, slots.geo)?
            .reshape(&[s, k + 1, d])?;
        let summary = g
            .input(Tensor::zeros(&[s, 1, d]))
            .add(g.p(self.summary).reshape(&[1, 1, d])?)?;
        let members = embedded.slice(1, 1, k)?;
        let mut x = g
            .tape()
            .concat(&[summary, members], 1)?
            .add(g.p(self.position).reshape(&[1, k + 1, d])?)?;
        for layer in &self.layers {
            let y = layer.swe.forward(g, x, &slots.mask)?.out;
            let c = y.slice(1, 0, 1)?;
            let c_new = layer
                .cwe
                .forward(g, c.reshape(&[1, s, d])?, &vec![true; s])?
                .out
                .reshape(&[s, 1, d])?;
            let members = y.slice(1, 1, k)?.add(c_new.sub(c)?)?;
            x = g.tape().concat(&[c_new, members], 1)?;
        }
        let flat = x.reshape(&[s * (k + 1), d])?;
        let rows = g.tape().gather_rows(flat, &slots.real)?;
        self.final_ln.forward(g, rows)
    }
}

impl<T: Real> SequenceModel<T> for HatModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn logits<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        check_docs(docs, cfg.input_dim + cfg.geo_width, cfg.geo_width)?;
        let per_doc = docs
            .iter()
            .map(|d| self.states(g, d))
            .collect::<Result<Vec<_>>>()?;
        let states = if per_doc.len() == 1 {
            per_doc[0]
        } else {
            g.tape().concat(&per_doc, 0)?
        };
        self.head.forward(g, states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::eval_graph;
    use rand::Rng;

    fn doc(n: usize, dim: usize, seed: u64) -> SeqInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        SeqInput::new(Tensor::new(&[n, dim], data).unwrap(), 0).unwrap()
    }

    fn cfg(reps: usize) -> HatConfig {
        HatConfig {
            heads: 2,
            segment: 4,
            reps,
            ..HatConfig::new(6, 0)
        }
    }

    #[test]
    fn more_reps_more_params() {
        let two = HatModel::<f32>::new(cfg(2), 0).unwrap();
        let three = HatModel::<f32>::new(cfg(3), 0).unwrap();
        assert!(three.num_params() > two.num_params());
    }

    #[test]
    fn zeroed_cwe_moves_nothing() {
        let mut m = HatModel::<f64>::new(cfg(2), 1).unwrap();
        for name in m.cwe_param_names() {
            let id = m.store.find(&name).unwrap();
            m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let x = doc(11, 6, 2);
        // reference: the same stack with the CWE step skipped
        let (k, d) = (4, 6);
        let (got, want) = eval_graph(&m.store, |g| {
            let got = m.states(g, &x)?.value();
            let slots = layout(&[&x], k, 1)?;
            let s = slots.windows[0];
            let emb = m.embed.forward(g, slots.content, slots.geo)?.reshape(&[s, k + 1, d])?;
            let summary = g.input(Tensor::zeros(&[s, 1, d])).add(g.p(m.summary).reshape(&[1, 1, d])?)?;
            let mut h = g
                .tape()
                .concat(&[summary, emb.slice(1, 1, k)?], 1)?
                .add(g.p(m.position).reshape(&[1, k + 1, d])?)?;
            for layer in &m.layers {
                h = layer.swe.forward(g, h, &slots.mask)?.out;
            }
            let rows = g.tape().gather_rows(h.reshape(&[s * (k + 1), d])?, &slots.real)?;
            Ok((got, m.final_ln.forward(g, rows)?.value()))
        })
        .unwrap();
        assert_eq!(got.data(), want.data());
    }

    #[test]
    fn batch_order_permutes_outputs() {
        let m = HatModel::<f64>::new(cfg(2), 3).unwrap();
        let (a, b) = (doc(5, 6, 4), doc(9, 6, 5));
        let ab = eval_graph(&m.store, |g| Ok(m.logits(g, &[&a, &b])?.value())).unwrap();
        let ba = eval_graph(&m.store, |g| Ok(m.logits(g, &[&b, &a])?.value())).unwrap();
        assert_eq!(&ab.data()[..20], &ba.data()[36..]);
        assert_eq!(&ab.data()[20..], &ba.data()[..36]);
    }
}
