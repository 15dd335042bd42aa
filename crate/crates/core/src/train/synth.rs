//! Seeded synthetic corpora: Markov label chains, class-conditional
//! features, paginated layout, font runs and class-flavoured first words.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, DocumentSequence, FontRun, Label, Modality, ParagraphRecord};
use crate::error::{Error, Result};

const L: usize = Label::COUNT;

/// Class counts of the reference arXiv corpus (basic, theorem, proof,
/// overlap).
pub const REFERENCE_CLASS_COUNTS: [u64; L] = [314_501, 125_524, 85_801, 3_470];

const PAGE_W: f64 = 612.0;
const PAGE_H: f64 = 792.0;
const MARGIN: f64 = 72.0;
const LINE: f64 = 12.0;

pub fn reference_prevalence() -> [f64; L] {
    let total: u64 = REFERENCE_CLASS_COUNTS.iter().sum();
    REFERENCE_CLASS_COUNTS.map(|c| c as f64 / total as f64)
}

/// `P = (1 − r)·I + r·1πᵀ` with `π` the reference prevalence and `r` set so
/// the theorem self-transition is 0.85. Its stationary distribution is `π`.
pub fn default_transition() -> [[f64; L]; L] {
    let pi = reference_prevalence();
    let r = 0.15 / (1.0 - pi[Label::Theorem.index()]);
    let mut p = [[0.0; L]; L];
    for (i, row) in p.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = r * pi[j] + if i == j { 1.0 - r } else { 0.0 };
        }
    }
    p
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub docs: usize,
    /// Document lengths are uniform in `[mean/2, 3·mean/2]`, at least 2.
    pub mean_len: usize,
    pub transition: [[f64; L]; L],
    pub initial: [f64; L],
    /// Modalities that receive class-conditional embeddings.
    pub modalities: Vec<Modality>,
    /// Expected distance between two class means.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    /// Chance that a paragraph opens with another class's word.
    pub word_noise: f64,
    /// Exact per-class totals; labels are then a shuffled multiset instead of
    /// a Markov chain.
    pub class_counts: Option<[usize; L]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            docs: 200,
            mean_len: 40,
            transition: default_transition(),
            initial: reference_prevalence(),
            modalities: vec![Modality::Font],
            separation: 2.0,
            noise: 1.0,
            word_noise: 0.2,
            class_counts: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.transition.iter().enumerate() {
            check_distribution(row, &format!("transition row {i}"))?;
        }
        check_distribution(&self.initial, "initial distribution")?;
        if self.docs == 0 || self.mean_len == 0 {
            return Err(Error::invalid("synthetic corpus needs docs ≥ 1 and mean_len ≥ 1"));
        }
        if !(self.noise >= 0.0 && self.separation >= 0.0 && (0.0..=1.0).contains(&self.word_noise)) {
            return Err(Error::invalid("noise, separation and word_noise out of range"));
        }
        if let Some(c) = self.class_counts {
            if c.iter().sum::<usize>() < self.docs {
                return Err(Error::invalid("class counts leave some documents empty"));
            }
        }
        Ok(())
    }
}

fn check_distribution(p: &[f64; L], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("{what} {p:?} does not sum to 1")));
    }
    Ok(())
}

fn draw<R: Rng>(rng: &mut R, p: &[f64; L]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // rounding slack: last class with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// One label path of length `n` from the chain.
pub fn sample_chain<R: Rng>(rng: &mut R, cfg: &SynthConfig, n: usize) -> Vec<Label> {
    let mut out = Vec::with_capacity(n);
    let mut s = draw(rng, &cfg.initial);
    for t in 0..n {
        if t > 0 {
            s = draw(rng, &cfg.transition[s]);
        }
        out.push(Label::from_index(s).expect("4 classes"));
    }
    out
}

const WORDS: [&[&str]; L] = [
    &["The", "We", "In", "This", "Recall", "For", "Note"],
    &["Theorem", "Lemma", "Proposition", "Corollary", "Definition"],
    &["Proof", "Hence", "Suppose", "Conversely", "Indeed"],
    &["Remark", "Proof", "Lemma"],
];

const FILLER: &[&str] = &["the", "set", "of", "all", "maps", "is", "finite", "and", "every", "element", "holds"];

fn font_runs<R: Rng>(rng: &mut R, label: Label) -> Vec<FontRun> {
    let n = rng.random_range(3..24);
    let (lead, body): (&str, &[&str]) = match label {
        Label::Basic => ("cmr10", &["cmr10", "cmr10", "cmmi10"]),
        Label::Theorem => ("cmbx10", &["cmti10", "cmti10", "cmmi10"]),
        Label::Proof => ("cmti10", &["cmr10", "cmr10", "cmsy10"]),
        Label::Overlap => ("cmbx10", &["cmr10", "cmti10"]),
    };
    let mut runs = vec![FontRun {
        name: lead.into(),
        size: 10.0,
    }];
    for _ in 1..n {
        let name = body[rng.random_range(0..body.len())];
        let size = if rng.random_bool(0.1) { 7.0 } else { 10.0 };
        runs.push(FontRun { name: name.into(), size });
    }
    runs
}

fn text<R: Rng>(rng: &mut R, label: Label, word_noise: f64) -> String {
    let class = if rng.random_bool(word_noise) {
        rng.random_range(0..L)
    } else {
        label.index()
    };
    let words = WORDS[class];
    let mut s = words[rng.random_range(0..words.len())].to_string();
    for _ in 0..rng.random_range(3..10) {
        s.push(' ');
        s.push_str(FILLER[rng.random_range(0..FILLER.len())]);
    }
    s.push('.');
    s
}

/// Random class means with expected pairwise distance `separation`.
fn class_means<R: Rng>(rng: &mut R, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let scale = separation / (2.0 * dim as f64).sqrt();
    (0..L)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * scale
                })
                .collect()
        })
        .collect()
}

pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<DocumentSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: BTreeMap<Modality, Vec<Vec<f64>>> = cfg
        .modalities
        .iter()
        .map(|&m| (m, class_means(&mut rng, m.dim(), cfg.separation)))
        .collect();
    let label_paths: Vec<Vec<Label>> = match cfg.class_counts {
        None => (0..cfg.docs)
            .map(|_| {
                let lo = (cfg.mean_len / 2).max(2);
                let hi = (cfg.mean_len * 3 / 2).max(lo);
                let n = rng.random_range(lo..=hi);
                sample_chain(&mut rng, cfg, n)
            })
            .collect(),
        Some(counts) => {
            let mut all: Vec<Label> = counts
                .iter()
                .enumerate()
                .flat_map(|(i, &c)| std::iter::repeat_n(Label::from_index(i).expect("4 classes"), c))
                .collect();
            all.shuffle(&mut rng);
            let (base, extra) = (all.len() / cfg.docs, all.len() % cfg.docs);
            let mut at = 0;
            (0..cfg.docs)
                .map(|d| {
                    let n = base + usize::from(d < extra);
                    at += n;
                    all[at - n..at].to_vec()
                })
                .collect()
        }
    };
    let mut docs = Vec::with_capacity(cfg.docs);
    for (d, labels) in label_paths.into_iter().enumerate() {
        let doc_id = format!("synth-{d:05}");
        let mut paragraphs = Vec::with_capacity(labels.len());
        let (mut page, mut y) = (1usize, MARGIN);
        for (i, &label) in labels.iter().enumerate() {
            let height = LINE * rng.random_range(2..9) as f64;
            if y + height > PAGE_H - MARGIN {
                page += 1;
                y = MARGIN;
            }
            let bbox = BBox {
                x0: MARGIN,
                y0: y,
                x1: PAGE_W - MARGIN,
                y1: y + height,
                page_width: PAGE_W,
                page_height: PAGE_H,
            };
            y += height + LINE;
            let embeddings = means
                .iter()
                .map(|(&m, mu)| {
                    let v = mu[label.index()]
                        .iter()
                        .map(|&c| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            (c + cfg.noise * z) as f32
                        })
                        .collect();
                    (m, v)
                })
                .collect();
            paragraphs.push(ParagraphRecord {
                doc_id: doc_id.clone(),
                para_index: i,
                page_number: page,
                total_pages: 0,
                bbox,
                label,
                font_runs: font_runs(&mut rng, label),
                text: Some(text(&mut rng, label, cfg.word_noise)),
                bitmap_ref: None,
                embeddings,
            });
        }
        for p in &mut paragraphs {
            p.total_pages = page;
        }
        docs.push(DocumentSequence {
            doc_id,
            total_pages: page,
            paragraphs,
        });
    }
    Ok(docs)
}

/// Paragraph totals per class.
pub fn class_counts(docs: &[DocumentSequence]) -> [u64; L] {
    let mut c = [0u64; L];
    for p in docs.iter().flat_map(|d| &d.paragraphs) {
        c[p.label.index()] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_chain_rows_and_stationarity() {
        let p = default_transition();
        let pi = reference_prevalence();
        for row in &p {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((p[1][1] - 0.85).abs() < 1e-12);
        for j in 0..L {
            let v: f64 = (0..L).map(|i| pi[i] * p[i][j]).sum();
            assert!((v - pi[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.transition[2][0] += 0.1;
        assert!(synth_corpus(&cfg, 0).is_err());
    }

    #[test]
    fn simulated_frequencies_match_prevalence() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let path = sample_chain(&mut rng, &cfg, 100_000);
        let mut c = [0usize; L];
        path.iter().for_each(|l| c[l.index()] += 1);
        for (i, want) in reference_prevalence().iter().enumerate() {
            assert!((c[i] as f64 / 1e5 - want).abs() < 0.02, "class {i}: {c:?}");
        }
    }

    #[test]
    fn run_lengths_follow_self_transition() {
        let mut cfg = SynthConfig::default();
        cfg.transition[2] = [0.1 / 3.0, 0.1 / 3.0, 0.9, 0.1 / 3.0];
        cfg.initial = [0.0, 0.0, 1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0usize;
        let trials = 20_000;
        for _ in 0..trials {
            let path = sample_chain(&mut rng, &cfg, 400);
            total += path.iter().take_while(|&&l| l == Label::Proof).count();
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 10.0).abs() < 0.3, "{mean}");
    }

    #[test]
    fn corpus_is_valid_and_deterministic() {
        let cfg = SynthConfig {
            docs: 5,
            mean_len: 30,
            ..SynthConfig::default()
        };
        let a = synth_corpus(&cfg, 3).unwrap();
        assert_eq!(a, synth_corpus(&cfg, 3).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        crate::corpus::write_corpus(&path, &a).unwrap();
        let back = crate::corpus::load_corpus(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert!(a.iter().any(|d| d.total_pages > 1));
    }

    #[test]
    fn exact_counts_are_honoured() {
        let cfg = SynthConfig {
            docs: 7,
            class_counts: Some([30, 12, 9, 1]),
            modalities: vec![],
            ..SynthConfig::default()
        };
        assert_eq!(class_counts(&synth_corpus(&cfg, 1).unwrap()), [30, 12, 9, 1]);
    }
}
