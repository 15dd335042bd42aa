//! Training loop, evaluation, baselines, checkpoints and synthetic data.

pub mod baseline;
pub mod checkpoint;
pub mod metrics;
pub mod models;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{encode_font_sequence, DocumentSequence, FontVocab, GeomMode, Label, Modality};
use crate::error::{Error, Result};
use crate::font_encoder::FontEncoder;
use crate::fusion::{FusionBatch, FusionModel};
use crate::nn::{Graph, ParamStore};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::sequence::{split_long_documents, CrfModel, HatModel, ParaModel, SeqInput, SequenceModel, SwModel};
use crate::tensor::Tensor;

pub use metrics::{evaluate, Metrics};

/// A model the generic loop can fit. Items are whole documents.
pub trait Trainable {
    type Item;

    fn params(&self) -> &ParamStore<f32>;

    fn params_mut(&mut self) -> &mut ParamStore<f32>;

    fn batch_loss<'t>(
        &self,
        g: &Graph<'t, f32>,
        batch: &[&Self::Item],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t, f32>>;

    /// Flattened predictions, items in order.
    fn batch_predict(&self, batch: &[&Self::Item]) -> Result<Vec<Label>>;

    fn item_labels(item: &Self::Item) -> &[Label];
}

/// One document as a feature sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqItem {
    pub input: SeqInput<f32>,
    pub labels: Vec<Label>,
}

/// One document's paragraphs as fusion rows.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionItem {
    pub batch: FusionBatch<f32>,
    pub labels: Vec<Label>,
}

/// One document's paragraphs as left-padded font-id sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct FontItem {
    pub ids: Vec<Vec<u32>>,
    pub labels: Vec<Label>,
}

/// Feature sequences, split into chunks of at most `maxlen` paragraphs.
pub fn seq_items(
    docs: &[DocumentSequence],
    modality: Modality,
    geo: Option<GeomMode>,
    maxlen: usize,
) -> Result<Vec<SeqItem>> {
    let mut out = Vec::new();
    for d in docs {
        let input = SeqInput::from_document(d, modality, geo)?;
        let labels = d.labels();
        for r in split_long_documents(d.len(), maxlen)? {
            out.push(SeqItem {
                input: input.chunk(r.clone())?,
                labels: labels[r].to_vec(),
            });
        }
    }
    Ok(out)
}

pub fn fusion_items(docs: &[DocumentSequence]) -> Result<Vec<FusionItem>> {
    docs.iter()
        .map(|d| {
            let refs: Vec<_> = d.paragraphs.iter().collect();
            Ok(FusionItem {
                batch: FusionBatch::from_records(&refs)?,
                labels: d.labels(),
            })
        })
        .collect()
}

pub fn font_items(docs: &[DocumentSequence], vocab: &FontVocab, maxlen: usize) -> Vec<FontItem> {
    docs.iter()
        .map(|d| FontItem {
            ids: d
                .paragraphs
                .iter()
                .map(|p| encode_font_sequence(p, vocab, maxlen))
                .collect(),
            labels: d.labels(),
        })
        .collect()
}

fn split_flat(flat: Vec<Vec<Label>>) -> Vec<Label> {
    flat.into_iter().flatten().collect()
}

macro_rules! trainable_sequence {
    ($($ty:ident),*) => {$(
        impl Trainable for $ty<f32> {
            type Item = SeqItem;

            fn params(&self) -> &ParamStore<f32> {
                SequenceModel::store(self)
            }

            fn params_mut(&mut self) -> &mut ParamStore<f32> {
                SequenceModel::store_mut(self)
            }

            fn batch_loss<'t>(
                &self,
                g: &Graph<'t, f32>,
                batch: &[&SeqItem],
                _rng: &mut ChaCha8Rng,
            ) -> Result<Var<'t, f32>> {
                let inputs: Vec<_> = batch.iter().map(|i| &i.input).collect();
                let labels: Vec<&[Label]> = batch.iter().map(|i| i.labels.as_slice()).collect();
                self.loss(g, &inputs, &labels)
            }

            fn batch_predict(&self, batch: &[&SeqItem]) -> Result<Vec<Label>> {
                let inputs: Vec<_> = batch.iter().map(|i| &i.input).collect();
                Ok(split_flat(self.predict(&inputs)?))
            }

            fn item_labels(item: &SeqItem) -> &[Label] {
                &item.labels
            }
        }
    )*};
}

trainable_sequence!(SwModel, CrfModel, HatModel, ParaModel);

impl Trainable for FusionModel<f32> {
    type Item = FusionItem;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn batch_loss<'t>(
        &self,
        g: &Graph<'t, f32>,
        batch: &[&FusionItem],
        rng: &mut ChaCha8Rng,
    ) -> Result<Var<'t, f32>> {
        let rows = FusionBatch::concat(&batch.iter().map(|i| &i.batch).collect::<Vec<_>>())?;
        let labels: Vec<Label> = batch.iter().flat_map(|i| i.labels.iter().copied()).collect();
        self.loss(g, &rows, &labels, Some(rng))
    }

    fn batch_predict(&self, batch: &[&FusionItem]) -> Result<Vec<Label>> {
        let rows = FusionBatch::concat(&batch.iter().map(|i| &i.batch).collect::<Vec<_>>())?;
        let logits = crate::nn::eval_graph(&self.store, |g| Ok(self.forward(g, &rows, None)?.logits.value()))?;
        Ok(labels_of(&logits))
    }

    fn item_labels(item: &FusionItem) -> &[Label] {
        &item.labels
    }
}

impl Trainable for FontEncoder<f32> {
    type Item = FontItem;

    fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    fn batch_loss<'t>(&self, g: &Graph<'t, f32>, batch: &[&FontItem], _rng: &mut ChaCha8Rng) -> Result<Var<'t, f32>> {
        let ids: Vec<Vec<u32>> = batch.iter().flat_map(|i| i.ids.iter().cloned()).collect();
        let labels: Vec<Label> = batch.iter().flat_map(|i| i.labels.iter().copied()).collect();
        self.loss(g, &ids, &labels)
    }

    fn batch_predict(&self, batch: &[&FontItem]) -> Result<Vec<Label>> {
        let ids: Vec<Vec<u32>> = batch.iter().flat_map(|i| i.ids.iter().cloned()).collect();
        let (_, logits) = self.encode(&ids)?;
        Ok(labels_of(&logits))
    }

    fn item_labels(item: &FontItem) -> &[Label] {
        &item.labels
    }
}

pub(crate) fn labels_of(logits: &Tensor<f32>) -> Vec<Label> {
    logits
        .argmax_rows()
        .into_iter()
        .map(|i| Label::from_index(i).expect("4 classes"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Documents per optimizer step.
    pub docs_per_batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Epochs without a validation mean-F1 gain before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            docs_per_batch: 8,
            seed: 0,
            adam: AdamConfig::default(),
            patience: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best: Metrics,
}

pub fn evaluate_items<M: Trainable>(model: &M, items: &[M::Item], batch_docs: usize) -> Result<Metrics> {
    if items.is_empty() {
        return Err(Error::invalid("no documents to evaluate"));
    }
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    let refs: Vec<&M::Item> = items.iter().collect();
    for chunk in refs.chunks(batch_docs.max(1)) {
        pred.extend(model.batch_predict(chunk)?);
        gold.extend(chunk.iter().flat_map(|i| M::item_labels(i).iter().copied()));
    }
    evaluate(&pred, &gold)
}

/// Adam over shuffled document batches with early stopping on validation
/// mean F1; the best epoch's parameters are restored at the end.
pub fn fit<M: Trainable>(model: &mut M, train: &[M::Item], val: &[M::Item], cfg: &TrainConfig) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation sets"));
    }
    if cfg.epochs == 0 || cfg.docs_per_batch == 0 {
        return Err(Error::invalid("epochs and docs_per_batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, Metrics, Vec<Tensor<f32>>)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.docs_per_batch) {
            let batch: Vec<&M::Item> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = {
                let tape = Tape::new();
                let g = Graph::new(&tape, model.params());
                let loss = model.batch_loss(&g, &batch, &mut rng)?;
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(Error::Divergence { epoch, loss: value });
                }
                loss_sum += value;
                batches += 1;
                g.backward(loss)?
            };
            adam_step(model.params_mut().tensors_mut(), &grads, &mut state, &cfg.adam)?;
        }
        let metrics = evaluate_items(model, val, cfg.docs_per_batch)?;
        let train_loss = loss_sum / batches as f64;
        log::info!(
            "epoch {epoch}: loss {train_loss:.4}, val accuracy {:.4}, mean F1 {:.4}",
            metrics.accuracy,
            metrics.mean_f1
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            val: metrics.clone(),
        });
        let improved = best.as_ref().is_none_or(|(_, m, _)| metrics.mean_f1 > m.mean_f1);
        if improved {
            best = Some((epoch, metrics, model.params().tensors().to_vec()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("no mean-F1 gain for {stale} epochs; stopping");
                break;
            }
        }
    }
    let (best_epoch, best, params) = best.expect("at least one epoch");
    model
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .zip(params)
        .for_each(|(slot, p)| *slot = p);
    Ok(TrainReport {
        history,
        best_epoch,
        best,
    })
}
