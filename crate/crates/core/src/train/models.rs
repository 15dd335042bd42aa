//! Every trainable or baseline predictor behind one type, with conversion
//! to and from checkpoints.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::baseline::TopKFirstWord;
use super::checkpoint::ModelCheckpoint;
use super::labels_of;
use crate::corpus::{encode_font_sequence, DocumentSequence, FontVocab, GeomMode, Label, Modality};
use crate::error::{Error, Result};
use crate::font_encoder::{FontEncoder, FontEncoderConfig};
use crate::fusion::{FusionBatch, FusionModel};
use crate::nn::{eval_graph, ParamStore};
use crate::sequence::{
    split_long_documents, CrfConfig, CrfModel, HatConfig, HatModel, ParaConfig, ParaModel, SeqInput, SequenceModel,
    SwConfig, SwModel,
};
use crate::tensor::Tensor;

/// How a sequence model's inputs are built from a document.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqInputSpec {
    pub modality: Modality,
    pub geo: Option<GeomMode>,
    pub maxlen: usize,
}

impl SeqInputSpec {
    pub fn geo_width(&self) -> usize {
        self.geo.map_or(0, GeomMode::width)
    }
}

#[derive(Clone, Debug)]
pub enum SeqModel {
    Sw(SwModel<f32>),
    Crf(CrfModel<f32>),
    Hat(HatModel<f32>),
    Para(ParaModel<f32>),
}

impl SeqModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SeqModel::Sw(_) => "sw",
            SeqModel::Crf(_) => "crf",
            SeqModel::Hat(_) => "hat",
            SeqModel::Para(_) => "para",
        }
    }

    pub fn as_dyn(&self) -> &dyn SequenceModel<f32> {
        match self {
            SeqModel::Sw(m) => m,
            SeqModel::Crf(m) => m,
            SeqModel::Hat(m) => m,
            SeqModel::Para(m) => m,
        }
    }

    fn config_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            SeqModel::Sw(m) => serde_json::to_value(&m.config)?,
            SeqModel::Crf(m) => serde_json::to_value(&m.config)?,
            SeqModel::Hat(m) => serde_json::to_value(&m.config)?,
            SeqModel::Para(m) => serde_json::to_value(&m.config)?,
        })
    }

    fn from_config(kind: &str, config: serde_json::Value) -> Result<Self> {
        Ok(match kind {
            "sw" => SeqModel::Sw(SwModel::new(serde_json::from_value::<SwConfig>(config)?, 0)?),
            "crf" => SeqModel::Crf(CrfModel::new(serde_json::from_value::<CrfConfig>(config)?, 0)?),
            "hat" => SeqModel::Hat(HatModel::new(serde_json::from_value::<HatConfig>(config)?, 0)?),
            "para" => SeqModel::Para(ParaModel::new(serde_json::from_value::<ParaConfig>(config)?, 0)?),
            _ => return Err(Error::Checkpoint(format!("unknown sequence model kind {kind:?}"))),
        })
    }
}

#[derive(Clone, Debug)]
pub enum AnyModel {
    Dummy,
    TopK(TopKFirstWord),
    Font { encoder: FontEncoder<f32>, vocab: FontVocab },
    Fusion(FusionModel<f32>),
    Seq { spec: SeqInputSpec, model: SeqModel },
}

fn tensors_of(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
}

fn field<T: serde::de::DeserializeOwned>(config: &serde_json::Value, key: &str) -> Result<T> {
    let v = config
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("config is missing {key:?}")))?;
    Ok(serde_json::from_value(v.clone())?)
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Dummy => "dummy",
            AnyModel::TopK(_) => "topk",
            AnyModel::Font { .. } => "font",
            AnyModel::Fusion(_) => "fusion",
            AnyModel::Seq { model, .. } => model.kind(),
        }
    }

    pub fn store(&self) -> Option<&ParamStore<f32>> {
        match self {
            AnyModel::Dummy | AnyModel::TopK(_) => None,
            AnyModel::Font { encoder, .. } => Some(&encoder.store),
            AnyModel::Fusion(m) => Some(&m.store),
            AnyModel::Seq { model, .. } => Some(model.as_dyn().store()),
        }
    }

    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let config = match self {
            AnyModel::Dummy => json!({}),
            AnyModel::TopK(b) => serde_json::to_value(b)?,
            AnyModel::Font { encoder, vocab } => json!({"encoder": encoder.config, "vocab": vocab}),
            AnyModel::Fusion(m) => serde_json::to_value(&m.config)?,
            AnyModel::Seq { spec, model } => json!({"input": spec, "model": model.config_json()?}),
        };
        Ok(ModelCheckpoint {
            kind: self.kind().to_string(),
            config,
            tensors: self.store().map(tensors_of).unwrap_or_default(),
        })
    }

    /// Rebuilds the model from its config and loads the stored tensors,
    /// checking names and shapes.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let mut model = match ckpt.kind.as_str() {
            "dummy" => AnyModel::Dummy,
            "topk" => AnyModel::TopK(serde_json::from_value(ckpt.config.clone())?),
            "font" => {
                let cfg: FontEncoderConfig = field(&ckpt.config, "encoder")?;
                AnyModel::Font {
                    encoder: FontEncoder::new(cfg, 0)?,
                    vocab: field(&ckpt.config, "vocab")?,
                }
            }
            "fusion" => AnyModel::Fusion(FusionModel::new(serde_json::from_value(ckpt.config.clone())?, 0)?),
            kind => AnyModel::Seq {
                spec: field(&ckpt.config, "input")?,
                model: SeqModel::from_config(kind, field(&ckpt.config, "model")?)?,
            },
        };
        let store = match &mut model {
            AnyModel::Dummy | AnyModel::TopK(_) => None,
            AnyModel::Font { encoder, .. } => Some(&mut encoder.store),
            AnyModel::Fusion(m) => Some(&mut m.store),
            AnyModel::Seq { model, .. } => Some(match model {
                SeqModel::Sw(m) => &mut m.store,
                SeqModel::Crf(m) => &mut m.store,
                SeqModel::Hat(m) => &mut m.store,
                SeqModel::Para(m) => &mut m.store,
            }),
        };
        match store {
            Some(s) => s.load_from(&ckpt.tensors)?,
            None if !ckpt.tensors.is_empty() => {
                return Err(Error::Checkpoint(format!("{} checkpoints carry no tensors", ckpt.kind)))
            }
            None => {}
        }
        Ok(model)
    }

    /// One label per paragraph of every document, in input order.
    pub fn predict(&self, docs: &[DocumentSequence]) -> Result<Vec<Vec<Label>>> {
        docs.iter().map(|d| self.predict_document(d)).collect()
    }

    fn predict_document(&self, doc: &DocumentSequence) -> Result<Vec<Label>> {
        match self {
            AnyModel::Dummy => Ok(vec![Label::Basic; doc.len()]),
            AnyModel::TopK(b) => Ok(doc
                .paragraphs
                .iter()
                .map(|p| {
                    b.predict(p).unwrap_or_else(|| {
                        log::warn!("{}/{} has no text; predicting basic", p.doc_id, p.para_index);
                        Label::Basic
                    })
                })
                .collect()),
            AnyModel::Font { encoder, vocab } => {
                let ids: Vec<Vec<u32>> = doc
                    .paragraphs
                    .iter()
                    .map(|p| encode_font_sequence(p, vocab, encoder.config.maxlen))
                    .collect();
                Ok(labels_of(&encoder.encode(&ids)?.1))
            }
            AnyModel::Fusion(m) => {
                let refs: Vec<_> = doc.paragraphs.iter().collect();
                let batch = FusionBatch::from_records(&refs)?;
                let logits = eval_graph(&m.store, |g| Ok(m.forward(g, &batch, None)?.logits.value()))?;
                Ok(labels_of(&logits))
            }
            AnyModel::Seq { spec, model } => {
                let input = SeqInput::<f32>::from_document(doc, spec.modality, spec.geo)?;
                let mut out = Vec::with_capacity(doc.len());
                for r in split_long_documents(doc.len(), spec.maxlen)? {
                    let chunk = input.chunk(r)?;
                    out.extend(model.as_dyn().predict(&[&chunk])?.remove(0));
                }
                Ok(out)
            }
        }
    }
}
