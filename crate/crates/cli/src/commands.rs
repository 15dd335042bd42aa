use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use thmseq::corpus::{
    build_font_vocab, group_documents, load_corpus, read_records, split_corpus, write_corpus,
    DocumentSequence, Label, Modality,
};
use thmseq::font_encoder::{FontEncoder, FontEncoderConfig, FontFeatureProvider};
use thmseq::fusion::{FusionConfig, FusionModel};
use thmseq::optim::AdamConfig;
use thmseq::sequence::{CrfConfig, CrfModel, HatConfig, HatModel, ParaConfig, ParaModel, SwConfig, SwModel};
use thmseq::train::baseline::TopKFirstWord;
use thmseq::train::checkpoint::{load_checkpoint, save_checkpoint};
use thmseq::train::models::{AnyModel, SeqInputSpec, SeqModel};
use thmseq::train::synth::{class_counts, synth_corpus, SynthConfig};
use thmseq::train::{
    evaluate, fit, font_items, fusion_items, seq_items, Metrics, TrainConfig, TrainReport, Trainable,
};
use thmseq::vision::EmbeddingProvider;

use crate::{
    Baseline, Common, EvalArgs, Failure, IngestArgs, PredictArgs, SeqKind, Source, SynthArgs, TrainArgs,
    TrainFontArgs, TrainFusionArgs, TrainSeqArgs,
};

pub type CmdResult = Result<(), Failure>;

/// File name of the per-run record that `report` collects.
pub const RUN_SUFFIX: &str = "run.json";

/// What `report` needs from a training or evaluation run.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RunRecord {
    pub command: String,
    /// Row of the report grid, e.g. `font`, `fusion:gmu`, `dummy`.
    pub modality: String,
    /// Column of the report grid: `none`, `crf`, `sw` or `hat`.
    pub approach: String,
    pub seed: u64,
    pub metrics: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub train_loss: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn corpus_path(common: &Common) -> Result<&Path, Failure> {
    common
        .corpus
        .as_deref()
        .ok_or_else(|| invalid("--corpus is required for this command"))
}

fn out_dir(common: &Common) -> Result<Option<&Path>, Failure> {
    match common.out.as_deref() {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn require_out(common: &Common) -> Result<&Path, Failure> {
    out_dir(common)?.ok_or_else(|| invalid("--out is required for this command"))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn check_fraction(f: f64) -> CmdResult {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("--val-fraction {f} must lie in (0, 1)")))
    }
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let out = require_out(&a.common)?;
    check_fraction(a.val_fraction)?;
    let mut cfg: SynthConfig = SynthConfig::default();
    if let Some(v) = a.docs {
        cfg.docs = v;
    }
    if let Some(v) = a.mean_len {
        cfg.mean_len = v;
    }
    if let Some(v) = &a.modalities {
        cfg.modalities = v.clone();
    }
    if let Some(v) = a.separation {
        cfg.separation = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    if let Some(v) = a.word_noise {
        cfg.word_noise = v;
    }
    if let Some(v) = &a.class_counts {
        cfg.class_counts = Some(four(v, "--class-counts")?);
    }
    if let Some(v) = &a.transition {
        cfg.transition = serde_json::from_str(v).map_err(|e| invalid(format!("--transition: {e}")))?;
    }
    if let Some(v) = &a.initial {
        cfg.initial = four(v, "--initial")?;
    }
    cfg.validate()?;
    let docs = synth_corpus(&cfg, a.common.seed)?;
    let (train, val) = split_corpus(&docs, a.val_fraction, a.common.seed)?;
    write_corpus(&out.join("corpus.jsonl"), &docs)?;
    write_corpus(&out.join("train.jsonl"), &train)?;
    write_corpus(&out.join("val.jsonl"), &val)?;
    let counts = class_counts(&docs);
    let manifest = json!({
        "generator": "synth",
        "seed": a.common.seed,
        "config": cfg,
        "val_fraction": a.val_fraction,
        "documents": {"all": docs.len(), "train": train.len(), "val": val.len()},
        "paragraphs": counts.iter().sum::<u64>(),
        "class_counts": label_map(&counts),
        "files": ["corpus.jsonl", "train.jsonl", "val.jsonl"],
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    emit(&format!(
        "wrote {} documents ({} paragraphs) to {}",
        docs.len(),
        counts.iter().sum::<u64>(),
        out.display()
    ))
}

fn label_map(counts: &[u64; Label::COUNT]) -> BTreeMap<&'static str, u64> {
    Label::ALL.iter().map(|l| (l.name(), counts[l.index()])).collect()
}

pub fn ingest_check(a: &IngestArgs) -> CmdResult {
    let docs = read_corpus(corpus_path(&a.common)?)?;
    if docs.is_empty() {
        return Err(invalid("corpus has no paragraphs"));
    }
    let paras = || docs.iter().flat_map(|d| &d.paragraphs);
    let mut modalities = BTreeMap::new();
    for m in Modality::ALL {
        modalities.insert(m.name(), paras().filter(|p| p.embedding(m).is_some()).count());
    }
    let fonts = build_font_vocab(&docs, usize::MAX)?;
    let summary = json!({
        "documents": docs.len(),
        "paragraphs": paras().count(),
        "class_counts": label_map(&class_counts(&docs)),
        "longest_document": docs.iter().map(DocumentSequence::len).max().unwrap_or(0),
        "with_text": paras().filter(|p| p.text.is_some()).count(),
        "with_bitmap": paras().filter(|p| p.bitmap_ref.is_some()).count(),
        "embeddings": modalities,
        "distinct_fonts": fonts.fonts().len(),
    });
    emit(&serde_json::to_string_pretty(&summary)?)?;
    if let Some(out) = out_dir(&a.common)? {
        write_json(&out.join("ingest.json"), &summary)?;
    }
    Ok(())
}

/// Train and validation documents: `--val` if given, else a seeded split.
fn train_val(common: &Common, t: &TrainArgs) -> Result<(Vec<DocumentSequence>, Vec<DocumentSequence>), Failure> {
    let corpus = read_corpus(corpus_path(common)?)?;
    match &t.val {
        Some(v) => Ok((corpus, read_corpus(v)?)),
        None => {
            check_fraction(t.val_fraction)?;
            Ok(split_corpus(&corpus, t.val_fraction, common.seed)?)
        }
    }
}

fn train_config(common: &Common, t: &TrainArgs) -> Result<TrainConfig, Failure> {
    if t.epochs == 0 || t.batch_docs == 0 || t.patience == 0 {
        return Err(invalid("--epochs, --batch-docs and --patience must be positive"));
    }
    if !(t.lr.is_finite() && t.lr >= 0.0) {
        return Err(invalid(format!("--lr {} must be a non-negative number", t.lr)));
    }
    Ok(TrainConfig {
        epochs: t.epochs,
        docs_per_batch: t.batch_docs,
        seed: common.seed,
        adam: AdamConfig {
            lr: t.lr,
            ..AdamConfig::default()
        },
        patience: t.patience,
    })
}

fn train_and_save<M: Trainable>(
    mut model: M,
    train: &[M::Item],
    val: &[M::Item],
    cfg: &TrainConfig,
    wrap: impl FnOnce(M) -> AnyModel,
) -> Result<(AnyModel, TrainReport), Failure> {
    let report = fit(&mut model, train, val, cfg)?;
    Ok((wrap(model), report))
}

fn finish(
    out: &Path,
    command: &str,
    modality: String,
    approach: &str,
    seed: u64,
    model: &AnyModel,
    report: TrainReport,
) -> CmdResult {
    save_checkpoint(&out.join("model.ckpt"), &model.to_checkpoint()?)?;
    write_json(&out.join("metrics.json"), &report.best)?;
    let record = RunRecord {
        command: command.into(),
        modality,
        approach: approach.into(),
        seed,
        params: model.store().map(|s| s.num_scalars()),
        best_epoch: Some(report.best_epoch),
        train_loss: report.history.iter().map(|r| r.train_loss).collect(),
        metrics: report.best.clone(),
    };
    write_json(&out.join(RUN_SUFFIX), &record)?;
    emit(&format!(
        "best epoch {}: accuracy {:.2}%, mean F1 {:.2}%; checkpoint in {}",
        report.best_epoch,
        100.0 * report.best.accuracy,
        100.0 * report.best.mean_f1,
        out.display()
    ))
}

pub fn train_font(a: &TrainFontArgs) -> CmdResult {
    let out = require_out(&a.common)?;
    let cfg = train_config(&a.common, &a.train)?;
    let (train, val) = train_val(&a.common, &a.train)?;
    if a.vocab_size < 3 {
        return Err(invalid("--vocab-size must leave room for PAD, UNK and one font"));
    }
    if a.emit_corpus && a.hidden != Modality::Font.dim() {
        return Err(invalid(format!(
            "--emit-corpus writes font embeddings of width --hidden, which must be {}",
            Modality::Font.dim()
        )));
    }
    let vocab = build_font_vocab(&train, a.vocab_size - 2)?;
    let enc_cfg = FontEncoderConfig {
        cell: a.cell,
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        maxlen: a.maxlen,
        ..FontEncoderConfig::new(vocab.len())
    };
    let encoder = FontEncoder::<f32>::new(enc_cfg, a.common.seed)?;
    log::info!("font encoder with {} parameters", encoder.num_params());
    let items = (
        font_items(&train, &vocab, a.maxlen),
        font_items(&val, &vocab, a.maxlen),
    );
    let wrap_vocab = vocab.clone();
    let (model, report) = train_and_save(encoder, &items.0, &items.1, &cfg, move |encoder| AnyModel::Font {
        encoder,
        vocab: wrap_vocab,
    })?;
    if a.emit_corpus {
        let AnyModel::Font { encoder, vocab } = &model else {
            unreachable!("font model")
        };
        let provider = FontFeatureProvider { encoder, vocab };
        let mut all = read_corpus(corpus_path(&a.common)?)?;
        if let Some(v) = &a.train.val {
            all.extend(read_corpus(v)?);
        }
        for p in all.iter_mut().flat_map(|d| d.paragraphs.iter_mut()) {
            let feature = provider.embed(p)?;
            p.embeddings.insert(Modality::Font, feature);
        }
        write_corpus(&out.join("font_features.jsonl"), &all)?;
    }
    finish(out, "train-font", "font".into(), "none", a.common.seed, &model, report)
}

pub fn train_fusion(a: &TrainFusionArgs) -> CmdResult {
    let out = require_out(&a.common)?;
    let cfg = train_config(&a.common, &a.train)?;
    let fusion_cfg = FusionConfig::from_name(&a.mechanism)?;
    let (train, val) = train_val(&a.common, &a.train)?;
    let model = FusionModel::<f32>::new(fusion_cfg, a.common.seed)?;
    log::info!("fusion model {} with {} parameters", a.mechanism, model.num_params());
    let (model, report) = train_and_save(model, &fusion_items(&train)?, &fusion_items(&val)?, &cfg, AnyModel::Fusion)?;
    finish(out, "train-fusion", format!("fusion:{}", a.mechanism), "none", a.common.seed, &model, report)
}

pub fn train_seq(a: &TrainSeqArgs) -> CmdResult {
    let out = require_out(&a.common)?;
    let cfg = train_config(&a.common, &a.train)?;
    if a.window == 0 || a.maxlen == 0 {
        return Err(invalid("--window and --maxlen must be positive"));
    }
    if a.window > a.maxlen {
        return Err(invalid(format!("--window {} exceeds --maxlen {}", a.window, a.maxlen)));
    }
    let spec = SeqInputSpec {
        modality: a.features,
        geo: (!a.no_geo).then(|| a.geo.into()),
        maxlen: a.maxlen,
    };
    let (dim, geo) = (a.features.dim(), spec.geo_width());
    let seed = a.common.seed;
    let (train, val) = train_val(&a.common, &a.train)?;
    let items = (
        seq_items(&train, spec.modality, spec.geo, spec.maxlen)?,
        seq_items(&val, spec.modality, spec.geo, spec.maxlen)?,
    );
    let wrap = |model: SeqModel| AnyModel::Seq { spec, model };
    let (model, report) = match a.model {
        SeqKind::Sw => {
            let base = SwConfig::new(dim, geo);
            let c = SwConfig {
                model_dim: a.model_dim.unwrap_or(base.model_dim),
                window: a.window,
                heads: a.heads.unwrap_or(base.heads),
                ff_multiplier: a.ff_mult,
                encoder_blocks: a.blocks,
                maxlen: a.maxlen,
                ..base
            };
            train_and_save(SwModel::new(c, seed)?, &items.0, &items.1, &cfg, |m| wrap(SeqModel::Sw(m)))?
        }
        SeqKind::Hat => {
            let base = HatConfig::new(dim, geo);
            let c = HatConfig {
                model_dim: a.model_dim.unwrap_or(base.model_dim),
                segment: a.window,
                heads: a.heads.unwrap_or(base.heads),
                ff_multiplier: a.ff_mult,
                reps: a.reps,
                ..base
            };
            train_and_save(HatModel::new(c, seed)?, &items.0, &items.1, &cfg, |m| wrap(SeqModel::Hat(m)))?
        }
        SeqKind::Crf => {
            let c = CrfConfig {
                input_dim: dim,
                geo_width: geo,
            };
            train_and_save(CrfModel::new(c, seed)?, &items.0, &items.1, &cfg, |m| wrap(SeqModel::Crf(m)))?
        }
        SeqKind::Para => {
            let c = ParaConfig {
                input_dim: dim,
                geo_width: geo,
                hidden: a.hidden.unwrap_or(dim),
            };
            train_and_save(ParaModel::new(c, seed)?, &items.0, &items.1, &cfg, |m| wrap(SeqModel::Para(m)))?
        }
    };
    let approach = match a.model {
        SeqKind::Para => "none",
        SeqKind::Sw => "sw",
        SeqKind::Crf => "crf",
        SeqKind::Hat => "hat",
    };
    finish(out, "train-seq", a.features.name().into(), approach, seed, &model, report)
}

/// The model behind `--checkpoint` or `--baseline`, with its report-grid cell.
fn load_source(s: &Source) -> Result<(AnyModel, String, String), Failure> {
    match (&s.checkpoint, s.baseline) {
        (Some(path), None) => {
            let ckpt = load_checkpoint(path)
                .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let model = AnyModel::from_checkpoint(&ckpt)?;
            let (modality, approach) = match &model {
                AnyModel::Seq { spec, model } => (
                    spec.modality.name().to_string(),
                    if model.kind() == "para" { "none" } else { model.kind() }.to_string(),
                ),
                AnyModel::Fusion(m) => (format!("fusion:{}", m.config.mechanism.name()), "none".into()),
                other => (other.kind().to_string(), "none".into()),
            };
            Ok((model, modality, approach))
        }
        (None, Some(Baseline::Dummy)) => Ok((AnyModel::Dummy, "dummy".into(), "none".into())),
        (None, Some(Baseline::Topk)) => {
            let train = s
                .train
                .as_deref()
                .ok_or_else(|| invalid("--baseline topk needs --train"))?;
            let lexicon = TopKFirstWord::fit(&read_corpus(train)?, s.k)?;
            Ok((AnyModel::TopK(lexicon), "topk".into(), "none".into()))
        }
        (None, None) => Err(invalid("give either --checkpoint or --baseline")),
        (Some(_), Some(_)) => Err(invalid("--checkpoint and --baseline are mutually exclusive")),
    }
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let corpus = corpus_path(&a.common)?;
    let out = out_dir(&a.common)?;
    let (model, modality, approach) = load_source(&a.source)?;
    let docs = read_corpus(corpus)?;
    let pred: Vec<Label> = model.predict(&docs)?.into_iter().flatten().collect();
    let gold: Vec<Label> = docs.iter().flat_map(|d| d.labels()).collect();
    let metrics = evaluate(&pred, &gold)?;
    emit(&metrics.to_json()?)?;
    if let Some(out) = out {
        write_json(&out.join("metrics.json"), &metrics)?;
        let record = RunRecord {
            command: "eval".into(),
            modality,
            approach,
            seed: a.common.seed,
            metrics,
            params: model.store().map(|s| s.num_scalars()),
            best_epoch: None,
            train_loss: Vec::new(),
        };
        write_json(&out.join(format!("eval.{RUN_SUFFIX}")), &record)?;
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> CmdResult {
    let corpus = corpus_path(&a.common)?;
    let out = out_dir(&a.common)?;
    let (model, _, _) = load_source(&a.source)?;
    let records = read_records(corpus).map_err(|e| with_path(corpus, e))?;
    let order: Vec<(String, usize)> = records.iter().map(|r| (r.doc_id.clone(), r.para_index)).collect();
    let docs = group_documents(records)?;
    let mut labels: BTreeMap<(&str, usize), Label> = BTreeMap::new();
    for (doc, pred) in docs.iter().zip(model.predict(&docs)?) {
        for (p, l) in doc.paragraphs.iter().zip(pred) {
            labels.insert((p.doc_id.as_str(), p.para_index), l);
        }
    }
    let mut sink: Box<dyn Write> = match out {
        Some(dir) => Box::new(std::io::BufWriter::new(fs::File::create(dir.join("predictions.jsonl"))?)),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    };
    let written = order.iter().try_for_each(|(doc_id, idx)| {
        let label = labels[&(doc_id.as_str(), *idx)];
        let line = json!({"doc_id": doc_id, "para_index": idx, "label": label.name()});
        writeln!(sink, "{line}")
    });
    closed_pipe_is_ok(written.and_then(|()| sink.flush()))
}

/// Every run record under `dir`, in path order.
pub fn collect_runs(dir: &Path) -> Result<Vec<(PathBuf, RunRecord)>, Failure> {
    let mut stack = vec![dir.to_path_buf()];
    let mut found = Vec::new();
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(RUN_SUFFIX)) {
                let text = fs::read_to_string(&path)?;
                match serde_json::from_str::<RunRecord>(&text) {
                    Ok(r) => found.push((path, r)),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}

fn with_path(path: &Path, e: thmseq::Error) -> Failure {
    match Failure::from(e) {
        Failure::Invalid(m) => Failure::Invalid(format!("{}: {m}", path.display())),
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
    }
}

fn read_corpus(path: &Path) -> Result<Vec<DocumentSequence>, Failure> {
    load_corpus(path).map_err(|e| with_path(path, e))
}

fn four<T: Copy>(v: &[T], flag: &str) -> Result<[T; 4], Failure> {
    <[T; 4]>::try_from(v).map_err(|_| invalid(format!("{flag} needs exactly 4 comma-separated values, got {}", v.len())))
}

/// Prints one line to stdout; a reader that hung up early is not an error.
pub fn emit(text: &str) -> CmdResult {
    closed_pipe_is_ok(writeln!(std::io::stdout().lock(), "{text}"))
}

fn closed_pipe_is_ok(r: std::io::Result<()>) -> CmdResult {
    match r {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}
