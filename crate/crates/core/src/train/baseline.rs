//! Non-learned reference predictors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentSequence, Label, ParagraphRecord};
use crate::error::{Error, Result};

/// Always Basic.
pub fn dummy_predict(docs: &[DocumentSequence]) -> Vec<Vec<Label>> {
    docs.iter().map(|d| vec![Label::Basic; d.len()]).collect()
}

/// Lowercased first whitespace token with surrounding punctuation removed.
pub fn first_word(text: &str) -> Option<String> {
    let token = text.split_whitespace().next()?;
    let word: String = token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    (!word.is_empty()).then_some(word)
}

/// Per-class lexicons of the `k` most frequent training first words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKFirstWord {
    pub k: usize,
    pub basic: Vec<String>,
    pub theorem: Vec<String>,
    pub proof: Vec<String>,
}

impl TopKFirstWord {
    /// Paragraphs without text are skipped with a warning.
    pub fn fit(train: &[DocumentSequence], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("top-k lexicon size must be positive"));
        }
        let mut counts: [HashMap<String, usize>; 3] = Default::default();
        let mut skipped = 0usize;
        for p in train.iter().flat_map(|d| &d.paragraphs) {
            let slot = match p.label {
                Label::Basic => 0,
                Label::Theorem => 1,
                Label::Proof => 2,
                Label::Overlap => continue,
            };
            match p.text.as_deref() {
                Some(t) => {
                    if let Some(w) = first_word(t) {
                        *counts[slot].entry(w).or_default() += 1;
                    }
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("top-k baseline: skipped {skipped} training paragraphs without text");
        }
        let top = |m: &HashMap<String, usize>| {
            let mut v: Vec<(&String, &usize)> = m.iter().collect();
            v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
            v.into_iter().take(k).map(|(w, _)| w.clone()).collect::<Vec<_>>()
        };
        Ok(TopKFirstWord {
            k,
            basic: top(&counts[0]),
            theorem: top(&counts[1]),
            proof: top(&counts[2]),
        })
    }

    /// Theorem wins over proof, proof over basic; no hit means Basic.
    /// `None` when the paragraph has no text.
    pub fn predict(&self, record: &ParagraphRecord) -> Option<Label> {
        let text = record.text.as_deref()?;
        let Some(w) = first_word(text) else {
            return Some(Label::Basic);
        };
        let hit = |lex: &[String]| lex.contains(&w);
        Some(if hit(&self.theorem) {
            Label::Theorem
        } else if hit(&self.proof) {
            Label::Proof
        } else {
            Label::Basic
        })
    }

    /// `(predictions, gold)` over the paragraphs that carry text.
    pub fn predict_corpus(&self, docs: &[DocumentSequence]) -> (Vec<Label>, Vec<Label>) {
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        let mut skipped = 0usize;
        for p in docs.iter().flat_map(|d| &d.paragraphs) {
            match self.predict(p) {
                Some(l) => {
                    pred.push(l);
                    gold.push(p.label);
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("top-k baseline: skipped {skipped} paragraphs without text");
        }
        (pred, gold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::record;

    fn para(label: Label, text: Option<&str>) -> ParagraphRecord {
        let mut r = record("d", 0, 1, &[]);
        r.label = label;
        r.text = text.map(str::to_string);
        r
    }

    fn doc(paras: Vec<ParagraphRecord>) -> DocumentSequence {
        let paragraphs = paras
            .into_iter()
            .enumerate()
            .map(|(i, mut p)| {
                p.para_index = i;
                p
            })
            .collect();
        DocumentSequence {
            doc_id: "d".into(),
            total_pages: 1,
            paragraphs,
        }
    }

    #[test]
    fn first_word_normalizes() {
        assert_eq!(first_word("  Theorem 3.1. Let"), Some("theorem".into()));
        assert_eq!(first_word("Proof."), Some("proof".into()));
        assert_eq!(first_word("(i)"), Some("i".into()));
        assert_eq!(first_word("..."), None);
    }

    #[test]
    fn lexicon_lookup_and_fallback() {
        let train = vec![doc(vec![
            para(Label::Theorem, Some("Theorem 1. x")),
            para(Label::Theorem, Some("Lemma 2. y")),
            para(Label::Proof, Some("Proof. z")),
            para(Label::Basic, Some("We show")),
            para(Label::Basic, None),
        ])];
        let b = TopKFirstWord::fit(&train, 5).unwrap();
        assert_eq!(b.predict(&para(Label::Basic, Some("Theorem 4"))), Some(Label::Theorem));
        assert_eq!(b.predict(&para(Label::Basic, Some("Zebra"))), Some(Label::Basic));
        assert_eq!(b.predict(&para(Label::Basic, None)), None);
    }

    #[test]
    fn theorem_wins_ties() {
        let train = vec![doc(vec![
            para(Label::Theorem, Some("Claim a")),
            para(Label::Proof, Some("Claim b")),
        ])];
        let b = TopKFirstWord::fit(&train, 1).unwrap();
        assert_eq!(b.predict(&para(Label::Basic, Some("claim"))), Some(Label::Theorem));
    }

    #[test]
    fn dummy_is_constant() {
        let d = doc(vec![para(Label::Proof, None), para(Label::Theorem, None)]);
        assert_eq!(dummy_predict(&[d]), vec![vec![Label::Basic; 2]]);
    }
}
