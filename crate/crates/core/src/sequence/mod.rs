//! Block-sequential heads over per-paragraph feature vectors.
//!
//! Every model reads one [`SeqInput`] per document and returns one row of
//! 4-class logits per paragraph, documents concatenated in batch order.

pub mod crf;
pub mod encoder;
pub mod hat;
pub mod window;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::{compute_geom_features, DocumentSequence, GeomMode, Label, Modality};
use crate::error::{Error, Result};
use crate::nn::{eval_graph, Graph, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

pub use crf::{CrfConfig, CrfModel};
pub use encoder::{BlockOutput, EncoderBlock};
pub use hat::{HatConfig, HatModel};
pub use window::{SwConfig, SwModel};

/// Paragraph features of one document. When geometry is enabled it fills
/// the trailing `geo_width` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput<T> {
    features: Tensor<T>,
    geo_width: usize,
}

impl<T: Real> SeqInput<T> {
    pub fn new(features: Tensor<T>, geo_width: usize) -> Result<Self> {
        if features.rank() != 2 || geo_width >= features.shape()[1] {
            return Err(Error::invalid(format!(
                "sequence features {:?} cannot hold {geo_width} geometry columns",
                features.shape()
            )));
        }
        Ok(SeqInput { features, geo_width })
    }

    /// Stacks the `modality` embedding of every paragraph, appending layout
    /// features when `geo` is set.
    pub fn from_document(doc: &DocumentSequence, modality: Modality, geo: Option<GeomMode>) -> Result<Self> {
        let geom = match geo {
            Some(_) => Some(compute_geom_features(doc)?),
            None => None,
        };
        let geo_width = geo.map_or(0, GeomMode::width);
        let dim = modality.dim() + geo_width;
        let mut data = Vec::with_capacity(doc.len() * dim);
        for (i, p) in doc.paragraphs.iter().enumerate() {
            let e = p.embedding(modality).ok_or_else(|| {
                Error::invalid(format!(
                    "paragraph {}/{} has no {} embedding",
                    p.doc_id,
                    p.para_index,
                    modality.name()
                ))
            })?;
            data.extend(e.iter().map(|&x| T::of(x as f64)));
            if let (Some(g), Some(mode)) = (&geom, geo) {
                data.extend(g[i].to_vec(mode).into_iter().map(T::of));
            }
        }
        SeqInput::new(Tensor::new(&[doc.len(), dim], data)?, geo_width)
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total columns, geometry included.
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn content_dim(&self) -> usize {
        self.dim() - self.geo_width
    }

    pub fn geo_width(&self) -> usize {
        self.geo_width
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn content_row(&self, i: usize) -> &[T] {
        &self.features.row(i)[..self.content_dim()]
    }

    pub fn geo_row(&self, i: usize) -> &[T] {
        &self.features.row(i)[self.content_dim()..]
    }

    /// Rows `range` as a standalone document.
    pub fn chunk(&self, range: Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::invalid(format!("chunk {range:?} out of range for {} rows", self.len())));
        }
        let d = self.dim();
        let data = self.features.data()[range.start * d..range.end * d].to_vec();
        SeqInput::new(Tensor::new(&[range.len(), d], data)?, self.geo_width)
    }

    /// Drops the geometry columns.
    pub fn without_geo(&self) -> Self {
        let c = self.content_dim();
        let data = (0..self.len()).flat_map(|i| self.content_row(i).to_vec()).collect();
        SeqInput {
            features: Tensor::new(&[self.len(), c], data).expect("shape"),
            geo_width: 0,
        }
    }

    pub fn cast<U: Real>(&self) -> SeqInput<U> {
        SeqInput {
            features: self.features.cast(),
            geo_width: self.geo_width,
        }
    }
}

/// Consecutive chunks of at most `maxlen` paragraphs covering `0..n`.
pub fn split_long_documents(n: usize, maxlen: usize) -> Result<Vec<Range<usize>>> {
    if maxlen == 0 {
        return Err(Error::invalid("maxlen must be at least 1"));
    }
    Ok((0..n).step_by(maxlen).map(|s| s..(s + maxlen).min(n)).collect())
}

/// Splits every document longer than `maxlen`, keeping labels aligned.
pub fn split_inputs<T: Real>(
    docs: &[(SeqInput<T>, Vec<Label>)],
    maxlen: usize,
) -> Result<Vec<(SeqInput<T>, Vec<Label>)>> {
    let mut out = Vec::new();
    for (input, labels) in docs {
        for r in split_long_documents(input.len(), maxlen)? {
            out.push((input.chunk(r.clone())?, labels[r].to_vec()));
        }
    }
    Ok(out)
}

fn check_docs<T: Real>(docs: &[&SeqInput<T>], dim: usize, geo_width: usize) -> Result<()> {
    if docs.is_empty() {
        return Err(Error::invalid("empty document batch"));
    }
    for d in docs {
        if d.is_empty() {
            return Err(Error::invalid("empty document"));
        }
        if d.dim() != dim || d.geo_width() != geo_width {
            return Err(Error::shape(
                "sequence input",
                &[dim, geo_width],
                &[d.dim(), d.geo_width()],
            ));
        }
    }
    Ok(())
}

/// Concatenated gold label indices of a batch.
pub fn flat_targets(labels: &[&[Label]]) -> Vec<usize> {
    labels.iter().flat_map(|l| l.iter().map(|x| x.index())).collect()
}

/// Shared surface of the paragraph-sequence classifiers.
pub trait SequenceModel<T: Real> {
    fn store(&self) -> &ParamStore<T>;

    fn store_mut(&mut self) -> &mut ParamStore<T>;

    /// `[Σ N_i, 4]` logits, documents concatenated in order.
    fn logits<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<Var<'t, T>>;

    /// Mean per-paragraph training loss.
    fn loss<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>], labels: &[&[Label]]) -> Result<Var<'t, T>> {
        let logits = self.logits(g, docs)?;
        logits.cross_entropy(&flat_targets(labels), None, None)
    }

    /// One label per paragraph of each document.
    fn predict(&self, docs: &[&SeqInput<T>]) -> Result<Vec<Vec<Label>>> {
        let logits = eval_graph(self.store(), |g| Ok(self.logits(g, docs)?.value()))?;
        let flat = logits.argmax_rows();
        let mut out = Vec::with_capacity(docs.len());
        let mut at = 0;
        for d in docs {
            out.push(
                flat[at..at + d.len()]
                    .iter()
                    .map(|&i| Label::from_index(i).expect("4 classes"))
                    .collect(),
            );
            at += d.len();
        }
        Ok(out)
    }

    fn num_params(&self) -> usize {
        self.store().num_scalars()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParaConfig {
    pub input_dim: usize,
    pub geo_width: usize,
    pub hidden: usize,
}

/// Per-paragraph MLP over the same features, ignoring neighbours.
#[derive(Clone, Debug)]
pub struct ParaModel<T> {
    pub config: ParaConfig,
    pub store: ParamStore<T>,
    hidden: Linear,
    head: Linear,
}

impl<T: Real> ParaModel<T> {
    pub fn new(config: ParaConfig, seed: u64) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 {
            return Err(Error::invalid(format!("invalid per-paragraph config {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let width = config.input_dim + config.geo_width;
        let hidden = Linear::new(&mut store, &mut rng, "para.hidden", width, config.hidden);
        let head = Linear::new(&mut store, &mut rng, "para.head", config.hidden, Label::COUNT);
        Ok(ParaModel {
            config,
            store,
            hidden,
            head,
        })
    }
}

impl<T: Real> SequenceModel<T> for ParaModel<T> {
    fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn logits<'t>(&self, g: &Graph<'t, T>, docs: &[&SeqInput<T>]) -> Result<Var<'t, T>> {
        check_docs(docs, self.config.input_dim + self.config.geo_width, self.config.geo_width)?;
        let x = g.input(stack_rows(docs)?);
        self.head.forward(g, self.hidden.forward(g, x)?.relu())
    }
}

/// All paragraphs of a batch as one `[Σ N_i, D]` matrix.
pub(crate) fn stack_rows<T: Real>(docs: &[&SeqInput<T>]) -> Result<Tensor<T>> {
    let d = docs[0].dim();
    let n: usize = docs.iter().map(|x| x.len()).sum();
    let mut data = Vec::with_capacity(n * d);
    for doc in docs {
        data.extend_from_slice(doc.features().data());
    }
    Tensor::new(&[n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_arithmetic() {
        let lens = |n, m| -> Vec<usize> { split_long_documents(n, m).unwrap().iter().map(|r| r.len()).collect() };
        assert_eq!(lens(10, 4), vec![4, 4, 2]);
        assert_eq!(lens(3, 4), vec![3]);
        assert_eq!(lens(8, 4), vec![4, 4]);
        assert!(split_long_documents(5, 0).is_err());
        let r = split_long_documents(10, 3).unwrap();
        assert_eq!(r.iter().map(|r| r.len()).sum::<usize>(), 10);
        assert!(r.windows(2).all(|w| w[0].end == w[1].start));
    }

    #[test]
    fn geo_columns_trail() {
        let t = Tensor::<f64>::from_f64(&[2, 5], &[1., 2., 3., 9., 8., 4., 5., 6., 7., 6.]).unwrap();
        let s = SeqInput::new(t, 2).unwrap();
        assert_eq!(s.content_row(1), &[4., 5., 6.]);
        assert_eq!(s.geo_row(0), &[9., 8.]);
        let plain = s.without_geo();
        assert_eq!(plain.dim(), 3);
        assert_eq!(s.dim() - plain.dim(), 2);
        assert!(SeqInput::new(Tensor::<f64>::zeros(&[2, 2]), 2).is_err());
    }
}
