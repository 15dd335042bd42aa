//! Paragraph records, JSONL ingestion, layout features, the font vocabulary
//! and document-level train/validation splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Basic = 0,
    Theorem = 1,
    Proof = 2,
    /// Reject class for blocks straddling categories. Trained on, but never
    /// part of the mean-F1 average.
    Overlap = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Basic, Label::Theorem, Label::Proof, Label::Overlap];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Basic => "basic",
            Label::Theorem => "theorem",
            Label::Proof => "proof",
            Label::Overlap => "overlap",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown label {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
    Font,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Vision, Modality::Font];

    /// Feature width delivered by the frozen backbone of this modality.
    pub fn dim(self) -> usize {
        match self {
            Modality::Text => 768,
            Modality::Vision => 1280,
            Modality::Font => 128,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Vision => "vision",
            Modality::Font => "font",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

/// Page-relative block coordinates in points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub page_width: f64,
    pub page_height: f64,
}

impl BBox {
    fn check(&self) -> std::result::Result<(), String> {
        let ok = self.page_width > 0.0
            && self.page_height > 0.0
            && 0.0 <= self.x0
            && self.x0 <= self.x1
            && self.x1 <= self.page_width
            && 0.0 <= self.y0
            && self.y0 <= self.y1
            && self.y1 <= self.page_height;
        if ok {
            Ok(())
        } else {
            Err(format!("{self:?} is not inside the page"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FontRun {
    pub name: String,
    pub size: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphRecord {
    pub doc_id: String,
    pub para_index: usize,
    /// 1-based.
    pub page_number: usize,
    pub total_pages: usize,
    pub bbox: BBox,
    pub label: Label,
    pub font_runs: Vec<FontRun>,
    pub text: Option<String>,
    pub bitmap_ref: Option<String>,
    pub embeddings: BTreeMap<Modality, Vec<f32>>,
}

impl ParagraphRecord {
    pub fn embedding(&self, m: Modality) -> Option<&[f32]> {
        self.embeddings.get(&m).map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DocumentSequence {
    pub doc_id: String,
    pub total_pages: usize,
    pub paragraphs: Vec<ParagraphRecord>,
}

impl DocumentSequence {
    pub fn len(&self) -> usize {
        self.paragraphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paragraphs.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.paragraphs.iter().map(|p| p.label).collect()
    }
}

/// One JSONL line, field for field.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    doc_id: String,
    para_index: usize,
    page_number: usize,
    total_pages: usize,
    bbox: [f64; 4],
    page_size: [f64; 2],
    label: Label,
    font_runs: Vec<(String, f64)>,
    text: Option<String>,
    bitmap_ref: Option<String>,
    emb_text: Option<Vec<f32>>,
    emb_vision: Option<Vec<f32>>,
    emb_font: Option<Vec<f32>>,
}

impl From<RecordLine> for ParagraphRecord {
    fn from(l: RecordLine) -> Self {
        let mut embeddings = BTreeMap::new();
        for (m, v) in [
            (Modality::Text, l.emb_text),
            (Modality::Vision, l.emb_vision),
            (Modality::Font, l.emb_font),
        ] {
            if let Some(v) = v {
                embeddings.insert(m, v);
            }
        }
        ParagraphRecord {
            doc_id: l.doc_id,
            para_index: l.para_index,
            page_number: l.page_number,
            total_pages: l.total_pages,
            bbox: BBox {
                x0: l.bbox[0],
                y0: l.bbox[1],
                x1: l.bbox[2],
                y1: l.bbox[3],
                page_width: l.page_size[0],
                page_height: l.page_size[1],
            },
            label: l.label,
            font_runs: l
                .font_runs
                .into_iter()
                .map(|(name, size)| FontRun { name, size })
                .collect(),
            text: l.text,
            bitmap_ref: l.bitmap_ref,
            embeddings,
        }
    }
}

impl From<&ParagraphRecord> for RecordLine {
    fn from(r: &ParagraphRecord) -> Self {
        RecordLine {
            doc_id: r.doc_id.clone(),
            para_index: r.para_index,
            page_number: r.page_number,
            total_pages: r.total_pages,
            bbox: [r.bbox.x0, r.bbox.y0, r.bbox.x1, r.bbox.y1],
            page_size: [r.bbox.page_width, r.bbox.page_height],
            label: r.label,
            font_runs: r
                .font_runs
                .iter()
                .map(|f| (f.name.clone(), f.size))
                .collect(),
            text: r.text.clone(),
            bitmap_ref: r.bitmap_ref.clone(),
            emb_text: r.embeddings.get(&Modality::Text).cloned(),
            emb_vision: r.embeddings.get(&Modality::Vision).cloned(),
            emb_font: r.embeddings.get(&Modality::Font).cloned(),
        }
    }
}

fn invariant(doc_id: &str, field: &str, msg: impl Into<String>) -> Error {
    Error::Invariant {
        doc_id: doc_id.to_string(),
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn validate_record(r: &ParagraphRecord) -> Result<()> {
    if r.total_pages == 0 {
        return Err(invariant(&r.doc_id, "total_pages", "must be positive"));
    }
    if r.page_number == 0 || r.page_number > r.total_pages {
        return Err(invariant(
            &r.doc_id,
            "page_number",
            format!("{} not in 1..={}", r.page_number, r.total_pages),
        ));
    }
    r.bbox
        .check()
        .map_err(|m| invariant(&r.doc_id, "bbox", m))?;
    for (m, v) in &r.embeddings {
        if v.len() != m.dim() {
            return Err(invariant(
                &r.doc_id,
                &format!("emb_{}", m.name()),
                format!("expected {} values, found {}", m.dim(), v.len()),
            ));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invariant(&r.doc_id, &format!("emb_{}", m.name()), "non-finite value"));
        }
    }
    Ok(())
}

/// Parses one JSONL line into a validated record.
pub fn parse_record(line: &str) -> Result<ParagraphRecord> {
    let raw: RecordLine = serde_json::from_str(line)?;
    let rec = ParagraphRecord::from(raw);
    validate_record(&rec)?;
    Ok(rec)
}

pub fn record_to_json(r: &ParagraphRecord) -> Result<String> {
    Ok(serde_json::to_string(&RecordLine::from(r))?)
}

/// Reads records in file order. Blank lines are skipped.
pub fn read_records(path: &Path) -> Result<Vec<ParagraphRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                line: i + 1,
                msg: j.to_string(),
            },
            other => other,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Groups records by `doc_id` (documents in order of first appearance) and
/// checks every per-document invariant.
pub fn group_documents(records: Vec<ParagraphRecord>) -> Result<Vec<DocumentSequence>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<ParagraphRecord>> = HashMap::new();
    for r in records {
        validate_record(&r)?;
        let slot = groups.entry(r.doc_id.clone()).or_insert_with(|| {
            order.push(r.doc_id.clone());
            Vec::new()
        });
        slot.push(r);
    }
    let mut docs = Vec::with_capacity(order.len());
    for id in order {
        let mut paras = groups.remove(&id).expect("grouped");
        paras.sort_by_key(|p| p.para_index);
        let total_pages = paras[0].total_pages;
        for (i, p) in paras.iter().enumerate() {
            if p.total_pages != total_pages {
                return Err(invariant(&id, "total_pages", "differs between paragraphs"));
            }
            if p.para_index < i {
                return Err(invariant(
                    &id,
                    "para_index",
                    format!("duplicate paragraph {}", p.para_index),
                ));
            }
            if p.para_index != i {
                return Err(invariant(
                    &id,
                    "para_index",
                    format!("missing paragraph {i} (indices must be contiguous from 0)"),
                ));
            }
            if i > 0 && p.page_number < paras[i - 1].page_number {
                return Err(invariant(
                    &id,
                    "page_number",
                    format!("paragraph {i} goes back to page {}", p.page_number),
                ));
            }
        }
        docs.push(DocumentSequence {
            doc_id: id,
            total_pages,
            paragraphs: paras,
        });
    }
    Ok(docs)
}

pub fn load_corpus(path: &Path) -> Result<Vec<DocumentSequence>> {
    group_documents(read_records(path)?)
}

pub fn write_corpus(path: &Path, docs: &[DocumentSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in docs {
        for p in &d.paragraphs {
            writeln!(w, "{}", record_to_json(p)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Vocabulary key: font name and size rounded to one decimal (in tenths).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FontKey {
    pub name: String,
    pub tenths: i64,
}

impl FontKey {
    pub fn new(name: &str, size: f64) -> Self {
        FontKey {
            name: name.to_string(),
            tenths: (size * 10.0).round() as i64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<FontKey>", into = "Vec<FontKey>")]
pub struct FontVocab {
    /// `fonts[i]` has id `i + 2`.
    fonts: Vec<FontKey>,
    index: HashMap<FontKey, u32>,
}

impl From<Vec<FontKey>> for FontVocab {
    fn from(fonts: Vec<FontKey>) -> Self {
        FontVocab::from_fonts(fonts)
    }
}

impl From<FontVocab> for Vec<FontKey> {
    fn from(v: FontVocab) -> Self {
        v.fonts
    }
}

impl FontVocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;

    pub fn from_fonts(fonts: Vec<FontKey>) -> Self {
        let index = fonts
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i as u32 + 2))
            .collect();
        FontVocab { fonts, index }
    }

    /// Number of ids including PAD and UNK.
    pub fn len(&self) -> usize {
        self.fonts.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, name: &str, size: f64) -> u32 {
        self.index
            .get(&FontKey::new(name, size))
            .copied()
            .unwrap_or(Self::UNK)
    }

    pub fn fonts(&self) -> &[FontKey] {
        &self.fonts
    }
}

/// Most frequent (font, size) pairs first; ties in lexicographic order.
pub fn build_font_vocab(corpus: &[DocumentSequence], max_size: usize) -> Result<FontVocab> {
    if max_size == 0 {
        return Err(Error::invalid("font vocabulary cap must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a font vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<FontKey, usize> = HashMap::new();
    for d in corpus {
        for p in &d.paragraphs {
            for f in &p.font_runs {
                *counts.entry(FontKey::new(&f.name, f.size)).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(FontKey, usize)> = counts.into_iter().collect();
    ranked.sort_by(|(ka, ca), (kb, cb)| cb.cmp(ca).then_with(|| ka.cmp(kb)));
    ranked.truncate(max_size);
    Ok(FontVocab::from_fonts(ranked.into_iter().map(|(k, _)| k).collect()))
}

/// Left-padded id sequence of exactly `maxlen`; longer runs keep the tail.
pub fn encode_font_sequence(record: &ParagraphRecord, vocab: &FontVocab, maxlen: usize) -> Vec<u32> {
    let ids: Vec<u32> = record
        .font_runs
        .iter()
        .map(|f| vocab.id(&f.name, f.size))
        .collect();
    let tail = &ids[ids.len().saturating_sub(maxlen)..];
    let mut out = vec![FontVocab::PAD; maxlen - tail.len()];
    out.extend_from_slice(tail);
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeomMode {
    /// page, x0, y0, same-page flag.
    #[default]
    Four,
    /// Adds x1/page_width and y1/page_height.
    Six,
}

impl GeomMode {
    pub fn width(self) -> usize {
        match self {
            GeomMode::Four => 4,
            GeomMode::Six => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomFeatures {
    pub page_norm: f64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub same_page_as_prev: f64,
    pub x1_norm: f64,
    pub y1_norm: f64,
}

impl GeomFeatures {
    pub fn to_vec(&self, mode: GeomMode) -> Vec<f64> {
        let mut v = vec![self.page_norm, self.x_norm, self.y_norm, self.same_page_as_prev];
        if mode == GeomMode::Six {
            v.extend([self.x1_norm, self.y1_norm]);
        }
        v
    }
}

pub fn compute_geom_features(doc: &DocumentSequence) -> Result<Vec<GeomFeatures>> {
    if doc.total_pages == 0 {
        return Err(invariant(&doc.doc_id, "total_pages", "must be positive"));
    }
    let pages = doc.total_pages as f64;
    Ok(doc
        .paragraphs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let b = &p.bbox;
            let same = i > 0 && doc.paragraphs[i - 1].page_number == p.page_number;
            GeomFeatures {
                page_norm: p.page_number as f64 / pages,
                x_norm: b.x0 / b.page_width,
                y_norm: b.y0 / b.page_height,
                same_page_as_prev: if same { 1.0 } else { 0.0 },
                x1_norm: b.x1 / b.page_width,
                y1_norm: b.y1 / b.page_height,
            }
        })
        .collect())
}

/// Document-level split. Each side keeps the input order of its documents.
pub fn split_corpus(
    corpus: &[DocumentSequence],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<DocumentSequence>, Vec<DocumentSequence>)> {
    if corpus.len() < 2 {
        return Err(Error::invalid("splitting needs at least two documents"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n = corpus.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::invalid(format!(
            "val_fraction {val_fraction} leaves one side of a {n}-document split empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = corpus
        .iter()
        .cloned()
        .zip(is_val)
        .partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(d, _)| d).collect(),
        val.into_iter().map(|(d, _)| d).collect(),
    ))
}
