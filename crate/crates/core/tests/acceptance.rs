//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 2 6`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use thmseq::autodiff::Tape;
use thmseq::corpus::{
    encode_font_sequence, split_corpus, DocumentSequence, FontVocab, GeomMode, Label, Modality,
};
use thmseq::font_encoder::{CellKind, FontEncoder, FontEncoderConfig};
use thmseq::fusion::{
    embrace_selection, fuse_embrace, fusion_rows, FusionBatch, FusionConfig, FusionModel, Mechanism, ModalDims,
};
use thmseq::gradcheck::{check_params, GradCheckReport};
use thmseq::nn::{eval_graph, ParamStore};
use thmseq::sequence::crf::{crf_log_partition, crf_viterbi, CrfScores};
use thmseq::sequence::encoder::EncoderBlock;
use thmseq::sequence::{
    CrfConfig, CrfModel, HatConfig, HatModel, ParaConfig, ParaModel, SeqInput, SequenceModel, SwConfig, SwModel,
};
use thmseq::tensor::Tensor;
use thmseq::train::checkpoint::{read_checkpoint, write_checkpoint};
use thmseq::train::metrics::{dummy_confusion, metrics_from_confusion};
use thmseq::train::models::{AnyModel, SeqInputSpec, SeqModel};
use thmseq::train::synth::{synth_corpus, SynthConfig, REFERENCE_CLASS_COUNTS};
use thmseq::train::{evaluate_items, fit, seq_items, Metrics, TrainConfig, Trainable};
use thmseq::vision::{invert_colors, normalize_bitmap, GrayBitmap, TARGET_HEIGHT, TARGET_WIDTH};
use thmseq::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(usize, &str, Duration, Check); 8] = [
        (1, "dummy baseline", Duration::from_secs(1), dummy_baseline),
        (2, "crf oracle", Duration::from_secs(30), crf_oracle),
        (3, "gradient suite", Duration::from_secs(300), gradient_suite),
        (4, "window masking and cost", Duration::MAX, window_masking),
        (5, "fusion dimensions", Duration::MAX, fusion_dimensions),
        (6, "sequential gain", Duration::from_secs(900), sequential_gain),
        (7, "parameter efficiency", Duration::MAX, parameter_efficiency),
        (8, "preprocessing exactness", Duration::MAX, preprocessing_exactness),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let took = t0.elapsed();
        let in_time = took <= limit;
        let pass = outcome.pass && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if limit == Duration::MAX {
            String::new()
        } else {
            format!(" / limit {:.0}s", limit.as_secs_f64())
        };
        println!(
            "[{}] criterion {id} {name}: {} ({:.2}s{budget})",
            if pass { "PASS" } else { "FAIL" },
            outcome.detail,
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(rng) * scale).collect()).unwrap()
}

/// Moves every parameter off its initial value so zero biases and unit
/// gains do not hide gradient errors.
fn jitter(store: &mut ParamStore<f64>, rng: &mut impl Rng, scale: f64) {
    for t in store.tensors_mut() {
        for x in t.data_mut() {
            *x += normal(rng) * scale;
        }
    }
}

fn random_label(rng: &mut impl Rng) -> Label {
    Label::from_index(rng.random_range(0..Label::COUNT)).unwrap()
}

fn dummy_baseline() -> Result<Outcome> {
    let m = metrics_from_confusion(dummy_confusion(REFERENCE_CLASS_COUNTS))?;
    let (acc, f1) = (100.0 * m.accuracy, 100.0 * m.mean_f1);
    let pass = (acc - 59.41).abs() <= 0.01 && (f1 - 24.85).abs() <= 0.01;
    Ok(Outcome::new(pass, format!("accuracy {acc:.4}% (59.41 ± 0.01), mean F1 {f1:.4}% (24.85 ± 0.01)")))
}

fn path_score(em: &[f64], trans: &[f64], start: &[f64], stop: &[f64], path: &[usize]) -> f64 {
    let mut s = start[path[0]] + stop[path[path.len() - 1]];
    for (t, &y) in path.iter().enumerate() {
        s += em[t * 4 + y];
    }
    for w in path.windows(2) {
        s += trans[w[0] * 4 + w[1]];
    }
    s
}

fn crf_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut viterbi_hits = 0;
    let cases = 200;
    for case in 0..cases {
        let n = 1 + case % 6;
        let scale = [0.5, 2.0, 8.0][case % 3];
        let em = random_tensor(&mut rng, &[n, 4], scale);
        let trans = random_tensor(&mut rng, &[4, 4], scale);
        let start = random_tensor(&mut rng, &[1, 4], scale);
        let stop = random_tensor(&mut rng, &[1, 4], scale);
        let tape = Tape::new();
        let scores = CrfScores {
            transition: tape.constant(trans.clone()),
            start: tape.constant(start.clone()),
            stop: tape.constant(stop.clone()),
        };
        let log_z = crf_log_partition(tape.constant(em.clone()), &scores)?.item();

        // exhaustive enumeration over 4^n paths, first maximum kept
        let mut all = Vec::with_capacity(4usize.pow(n as u32));
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for code in 0..4usize.pow(n as u32) {
            let path: Vec<usize> = (0..n).map(|t| (code / 4usize.pow((n - 1 - t) as u32)) % 4).collect();
            let s = path_score(em.data(), trans.data(), start.data(), stop.data(), &path);
            if s > best.0 {
                best = (s, path);
            }
            all.push(s);
        }
        let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let brute = max + all.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        worst = worst.max((log_z - brute).abs());
        if crf_viterbi(&em, &trans, start.data(), stop.data())? == best.1 {
            viterbi_hits += 1;
        }
    }
    let pass = worst < 1e-8 && viterbi_hits == cases;
    Ok(Outcome::new(
        pass,
        format!("max |log Z − brute force| {worst:.2e} (< 1e-8), Viterbi exact {viterbi_hits}/{cases}"),
    ))
}

const GRAD_INSTANCES: u64 = 20;
const GRAD_TOL: f64 = 1e-5;

/// ReLU inputs closer to zero than this make central differences straddle
/// a kink; such instances are redrawn.
const KINK_MARGIN: f64 = 1e-3;

struct Family {
    name: String,
    worst: f64,
    redrawn: usize,
}

/// Worst relative error over `GRAD_INSTANCES` instances that stay clear of
/// ReLU kinks.
fn grad_family(name: impl Into<String>, make: impl Fn(u64) -> Result<GradCheckReport>) -> Result<Family> {
    let mut fam = Family {
        name: name.into(),
        worst: 0.0,
        redrawn: 0,
    };
    let mut accepted = 0;
    let mut seed = 0;
    while accepted < GRAD_INSTANCES {
        let r = make(seed)?;
        seed += 1;
        if r.kink_margin < KINK_MARGIN {
            fam.redrawn += 1;
            if fam.redrawn > 10 * GRAD_INSTANCES as usize {
                return Err(thmseq::Error::InvalidArgument(format!("{}: no kink-free instances", fam.name)));
            }
            continue;
        }
        fam.worst = fam.worst.max(r.rel_error);
        accepted += 1;
    }
    Ok(fam)
}

fn font_batch(rng: &mut impl Rng, vocab: usize, len: usize, rows: usize) -> Vec<Vec<u32>> {
    (0..rows)
        .map(|_| {
            let real = rng.random_range(1..=len);
            let mut s = vec![FontVocab::PAD; len - real];
            s.extend((0..real).map(|_| rng.random_range(1..vocab as u32)));
            s
        })
        .collect()
}

fn grad_recurrent(cell: CellKind, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let cfg = FontEncoderConfig {
        vocab_size: 7,
        embed_dim: 4,
        cell,
        hidden: 3,
        maxlen: 12,
        num_classes: Label::COUNT,
    };
    let enc = FontEncoder::<f64>::new(cfg, seed)?;
    let mut store = enc.store.clone();
    jitter(&mut store, &mut rng, 0.3);
    let batch = font_batch(&mut rng, 7, 12, 3);
    let labels: Vec<Label> = (0..3).map(|_| random_label(&mut rng)).collect();
    check_params(&mut store, |g| enc.loss(g, &batch, &labels), 8, &mut rng)
}

fn small_modal_dims() -> ModalDims {
    ModalDims {
        text: 5,
        vision: 6,
        font: 4,
    }
}

/// The same mechanism with every width shrunk for finite differences.
fn shrink(cfg: &FusionConfig) -> FusionConfig {
    let mut c = cfg.clone().scaled(small_modal_dims(), 8, 3);
    if let Mechanism::DockFusion { widths } = &mut c.mechanism {
        *widths = widths.iter().map(|w| 3 + w / 512).collect();
    }
    c.post = c.post.iter().map(|_| 5).collect();
    c
}

fn random_fusion_batch(rng: &mut impl Rng, dims: ModalDims, rows: usize) -> FusionBatch<f64> {
    FusionBatch::new(
        random_tensor(rng, &[rows, dims.text], 1.0),
        random_tensor(rng, &[rows, dims.vision], 1.0),
        random_tensor(rng, &[rows, dims.font], 1.0),
    )
    .unwrap()
}

fn grad_fusion(cfg: &FusionConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let cfg = shrink(cfg);
    let model = FusionModel::<f64>::new(cfg.clone(), seed)?;
    let mut store = model.store.clone();
    jitter(&mut store, &mut rng, 0.1);
    let batch = random_fusion_batch(&mut rng, cfg.dims, 3);
    let labels: Vec<Label> = (0..3).map(|_| random_label(&mut rng)).collect();
    // a fixed mask seed keeps sampled EmbraceNet selections identical across evaluations
    check_params(
        &mut store,
        |g| {
            let mut masks = ChaCha8Rng::seed_from_u64(seed);
            model.loss(g, &batch, &labels, Some(&mut masks))
        },
        6,
        &mut rng,
    )
}

fn grad_encoder_block(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let mut store = ParamStore::<f64>::new();
    let block = EncoderBlock::new(&mut store, &mut rng, "block", 8, 2, 1.5)?;
    let (b, l) = (2, 5);
    let x = store.add("x", random_tensor(&mut rng, &[b, l, 8], 1.0));
    jitter(&mut store, &mut rng, 0.1);
    let mut mask = vec![true; b * l];
    mask[l + 3] = false;
    mask[l + 4] = false;
    let proj = random_tensor(&mut rng, &[b, l, 8], 1.0);
    check_params(
        &mut store,
        |g| {
            let out = block.forward(g, g.p(x), &mask)?.out;
            Ok(out.mul(g.input(proj.clone()))?.sum())
        },
        8,
        &mut rng,
    )
}

fn random_seq_docs(rng: &mut impl Rng, dims: (usize, usize), lens: &[usize]) -> Vec<(SeqInput<f64>, Vec<Label>)> {
    lens.iter()
        .map(|&n| {
            let input = SeqInput::new(random_tensor(rng, &[n, dims.0 + dims.1], 1.0), dims.1).unwrap();
            (input, (0..n).map(|_| random_label(rng)).collect())
        })
        .collect()
}

fn seq_loss_check<M: SequenceModel<f64>>(model: &M, rng: &mut ChaCha8Rng, lens: &[usize]) -> Result<GradCheckReport> {
    let docs = random_seq_docs(rng, (6, 2), lens);
    let inputs: Vec<&SeqInput<f64>> = docs.iter().map(|d| &d.0).collect();
    let labels: Vec<&[Label]> = docs.iter().map(|d| d.1.as_slice()).collect();
    let mut store = model.store().clone();
    jitter(&mut store, rng, 0.1);
    check_params(&mut store, |g| model.loss(g, &inputs, &labels), 8, rng)
}

fn grad_hat(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
    let cfg = HatConfig {
        model_dim: 8,
        segment: 3,
        heads: 2,
        reps: 2,
        ..HatConfig::new(6, 2)
    };
    let model = HatModel::<f64>::new(cfg, seed)?;
    let lens = [rng.random_range(1..9), rng.random_range(1..9)];
    seq_loss_check(&model, &mut rng, &lens)
}

fn grad_crf(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
    let model = CrfModel::<f64>::new(
        CrfConfig {
            input_dim: 6,
            geo_width: 2,
        },
        seed,
    )?;
    let lens = [rng.random_range(1..8), rng.random_range(1..8)];
    seq_loss_check(&model, &mut rng, &lens)
}

fn grad_sw(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
    let cfg = SwConfig {
        model_dim: 8,
        window: 4,
        heads: 2,
        ..SwConfig::new(6, 2)
    };
    let model = SwModel::<f64>::new(cfg, seed)?;
    let lens = [rng.random_range(1..11), rng.random_range(1..11)];
    seq_loss_check(&model, &mut rng, &lens)
}

fn gradient_suite() -> Result<Outcome> {
    let mut families = vec![
        grad_family("lstm", |s| grad_recurrent(CellKind::Lstm, s))?,
        grad_family("gru", |s| grad_recurrent(CellKind::Gru, s))?,
        grad_family("bilstm", |s| grad_recurrent(CellKind::Bilstm, s))?,
    ];
    for row in fusion_rows() {
        families.push(grad_family(format!("fusion:{}", row.key), |s| grad_fusion(&row.config, s))?);
    }
    families.push(grad_family("encoder block", grad_encoder_block)?);
    families.push(grad_family("sw model", grad_sw)?);
    families.push(grad_family("hat", grad_hat)?);
    families.push(grad_family("crf nll", grad_crf)?);
    let worst = families
        .iter()
        .max_by(|a, b| a.worst.total_cmp(&b.worst))
        .expect("families");
    let bad: Vec<&str> = families
        .iter()
        .filter(|f| !(f.worst < GRAD_TOL))
        .map(|f| f.name.as_str())
        .collect();
    let redrawn: usize = families.iter().map(|f| f.redrawn).sum();
    let detail = format!(
        "{} families × {GRAD_INSTANCES} instances ({redrawn} redrawn near ReLU kinks), worst relative error {:.2e} ({}) (< {GRAD_TOL:.0e}){}",
        families.len(),
        worst.worst,
        worst.name,
        if bad.is_empty() {
            String::new()
        } else {
            format!("; failing: {}", bad.join(", "))
        }
    );
    Ok(Outcome::new(bad.is_empty(), detail))
}

fn window_masking() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut leaks = 0usize;
    let mut padded_mass = 0.0f64;
    for k in [4, 8, 16, 32] {
        let cfg = SwConfig {
            model_dim: 8,
            window: k,
            heads: 2,
            encoder_blocks: 2,
            ..SwConfig::new(6, 2)
        };
        let model = SwModel::<f64>::new(cfg, k as u64)?;
        let n = 3 * k + rng.random_range(1..k);
        let doc = SeqInput::new(random_tensor(&mut rng, &[n, 8], 1.0), 2)?;

        for block in 0..2 {
            let map = model.attention_map(&doc, block)?;
            for a in 0..n {
                for b in 0..n {
                    if a / k != b / k && map.data()[a * n + b] != 0.0 {
                        leaks += 1;
                    }
                }
            }
        }

        // padded keys of the last window receive no weight in any block
        let weights = eval_graph(&model.store, |g| {
            Ok(model.forward(g, &[&doc])?.weights.iter().map(|w| w.value().as_ref().clone()).collect::<Vec<_>>())
        })?;
        let windows = n.div_ceil(k);
        let real_in_last = n - (windows - 1) * k;
        for w in &weights {
            for head in 0..2 {
                let base = ((windows - 1) * 2 + head) * k * k;
                for q in 0..k {
                    for key in real_in_last..k {
                        padded_mass += w.data()[base + q * k + key].abs();
                    }
                }
            }
        }

        // changing one window leaves every other window's logits bit-identical
        let logits = |d: &SeqInput<f64>| eval_graph(&model.store, |g| Ok(model.logits(g, &[d])?.value()));
        let before = logits(&doc)?;
        let mut changed = doc.features().clone();
        for c in 0..8 {
            changed.data_mut()[k * 8 + c] += 1.0;
        }
        let after = logits(&SeqInput::new(changed, 2)?)?;
        for row in 0..n {
            if row / k == 1 {
                continue;
            }
            if (0..4).any(|c| before.data()[row * 4 + c].to_bits() != after.data()[row * 4 + c].to_bits()) {
                leaks += 1;
            }
        }
    }

    let k = 16;
    let cfg = SwConfig {
        model_dim: 8,
        window: k,
        heads: 2,
        ..SwConfig::new(8, 0)
    };
    let model = SwModel::<f32>::new(cfg, 0)?;
    let mut flops = Vec::new();
    for n in [250, 500, 1000, 2000] {
        let doc = SeqInput::new(Tensor::full(&[n, 8], 0.5f32), 0)?;
        let measured = eval_graph(&model.store, |g| Ok(model.forward(g, &[&doc])?.attention_flops))?;
        flops.push(measured);
    }
    let growth: Vec<f64> = flops.windows(2).map(|w| w[1] as f64 / w[0] as f64 / 2.0).collect();
    let worst_growth = growth.iter().cloned().fold(0.0, f64::max);
    let pass = leaks == 0 && padded_mass == 0.0 && worst_growth <= 1.2;
    Ok(Outcome::new(
        pass,
        format!(
            "cross-window leaks {leaks}, padded-key weight {padded_mass:e}, FLOPs per doubling ÷ 2 = {} (≤ 1.2)",
            growth.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn fusion_dimensions() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let dims = ModalDims::default();
    let rows = 2;
    let batch = FusionBatch::new(
        Tensor::<f32>::from_f64(&[rows, dims.text], random_tensor(&mut rng, &[rows, dims.text], 1.0).data())?,
        Tensor::<f32>::from_f64(&[rows, dims.vision], random_tensor(&mut rng, &[rows, dims.vision], 1.0).data())?,
        Tensor::<f32>::from_f64(&[rows, dims.font], random_tensor(&mut rng, &[rows, dims.font], 1.0).data())?,
    )?;
    let mut mismatched = Vec::new();
    let mut seen = Vec::new();
    let mut copy_errors = 0usize;
    let mut copies = 0usize;
    let mut gate_err = 0.0f64;
    for row in fusion_rows() {
        let model = FusionModel::<f32>::new(row.config.clone(), 1)?;
        let (joint, gate_sums, embrace) = eval_graph(&model.store, |g| {
            let mut masks = ChaCha8Rng::seed_from_u64(5);
            let out = model.forward(g, &batch, Some(&mut masks))?;
            let gate_sums = match out.gates {
                Some(z) => Some(z.sum_axis(1)?.value()),
                None => None,
            };
            let embrace = match row.config.embrace_probs() {
                Some(probs) => {
                    let raw = batch.parts().map(|t| g.input(t.clone()));
                    let docked = model.dock(g, raw)?;
                    let fused = fuse_embrace(g, docked, probs, Some(&mut ChaCha8Rng::seed_from_u64(9)))?;
                    Some((docked.map(|d| d.value()), fused.value(), probs))
                }
                None => None,
            };
            Ok((out.joint.value(), gate_sums, embrace))
        })?;
        let width = joint.shape()[1];
        if width != row.advertised_dim || width != row.config.output_dim() {
            mismatched.push(format!("{} gave {width}, expected {}", row.key, row.advertised_dim));
        }
        if !seen.contains(&width) {
            seen.push(width);
        }
        if let Some(sums) = gate_sums {
            for s in sums.data() {
                gate_err = gate_err.max((*s as f64 - 1.0).abs());
            }
        }
        if let Some((docked, fused, probs)) = embrace {
            let picks = embrace_selection(&mut ChaCha8Rng::seed_from_u64(9), fused.numel(), probs);
            for (i, &m) in picks.iter().enumerate() {
                copies += 1;
                if fused.data()[i].to_bits() != docked[m].data()[i].to_bits() {
                    copy_errors += 1;
                }
            }
        }
    }
    seen.sort_unstable();
    let expected = [768, 1280, 2176, 2304, 3840];
    let pass = mismatched.is_empty() && seen == expected && copy_errors == 0 && copies > 0 && gate_err <= 1e-6;
    Ok(Outcome::new(
        pass,
        format!(
            "{} rows, widths {seen:?}{}; EmbraceNet copies {}/{copies} exact; GMU gate-sum error {gate_err:.1e} (≤ 1e-6)",
            fusion_rows().len(),
            if mismatched.is_empty() {
                String::new()
            } else {
                format!(" mismatches: {}", mismatched.join("; "))
            },
            copies - copy_errors
        ),
    ))
}

struct SeqRun {
    name: &'static str,
    metrics: Metrics,
    epochs: usize,
}

fn train_seq<M: Trainable<Item = thmseq::train::SeqItem>>(
    name: &'static str,
    mut model: M,
    items: &[Vec<thmseq::train::SeqItem>; 3],
    cfg: &TrainConfig,
) -> Result<SeqRun> {
    let report = fit(&mut model, &items[0], &items[1], cfg)?;
    Ok(SeqRun {
        name,
        metrics: evaluate_items(&model, &items[2], 16)?,
        epochs: report.history.len(),
    })
}

fn sequential_gain() -> Result<Outcome> {
    let synth = SynthConfig {
        docs: 500,
        mean_len: 40,
        separation: 2.0,
        noise: 1.0,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&synth, 7)?;
    let (train_val, test) = split_corpus(&corpus, 0.2, 1)?;
    let (train, val) = split_corpus(&train_val, 0.125, 2)?;
    let geo = Some(GeomMode::Four);
    let maxlen = 1024;
    let items = [
        seq_items(&train, Modality::Font, geo, maxlen)?,
        seq_items(&val, Modality::Font, geo, maxlen)?,
        seq_items(&test, Modality::Font, geo, maxlen)?,
    ];
    let input_dim = Modality::Font.dim();
    let cfg = TrainConfig {
        epochs: 25,
        docs_per_batch: 8,
        seed: 3,
        patience: 4,
        ..TrainConfig::default()
    };
    let para = train_seq(
        "per-paragraph",
        ParaModel::<f32>::new(
            ParaConfig {
                input_dim,
                geo_width: 4,
                hidden: input_dim,
            },
            1,
        )?,
        &items,
        &cfg,
    )?;
    let sw = train_seq(
        "sw",
        SwModel::<f32>::new(
            SwConfig {
                window: 16,
                heads: 8,
                ..SwConfig::new(input_dim, 4)
            },
            1,
        )?,
        &items,
        &cfg,
    )?;
    let crf = train_seq(
        "crf",
        CrfModel::<f32>::new(
            CrfConfig {
                input_dim,
                geo_width: 4,
            },
            1,
        )?,
        &items,
        &cfg,
    )?;
    let pts = |m: &Metrics| (100.0 * m.accuracy, 100.0 * m.mean_f1);
    let (pa, pf) = pts(&para.metrics);
    let (sa, sf) = pts(&sw.metrics);
    let (ca, cf) = pts(&crf.metrics);
    let pass = sa - pa >= 3.0 && sf - pf >= 3.0 && ca - pa >= 1.0 && cf - pf >= 1.0;
    let runs: Vec<String> = [&para, &sw, &crf]
        .iter()
        .map(|r| {
            let (a, f) = pts(&r.metrics);
            format!("{} {a:.2}/{f:.2} ({} epochs)", r.name, r.epochs)
        })
        .collect();
    Ok(Outcome::new(
        pass,
        format!(
            "test accuracy/mean F1: {}; sw gain {:+.2}/{:+.2} (≥ 3), crf gain {:+.2}/{:+.2} (≥ 1)",
            runs.join(", "),
            sa - pa,
            sf - pf,
            ca - pa,
            cf - pf
        ),
    ))
}

fn parameter_efficiency() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let count = |mult: f64, rng: &mut ChaCha8Rng| -> Result<usize> {
        let mut store = ParamStore::<f32>::new();
        EncoderBlock::new(&mut store, rng, "b", 1280, 20, mult)?;
        Ok(store.num_scalars())
    };
    let (lean, wide) = (count(1.5, &mut rng)?, count(4.0, &mut rng)?);
    let formula_ok = lean == EncoderBlock::param_count(1280, 1.5) && wide == EncoderBlock::param_count(1280, 4.0);
    let hat = |reps: usize| -> Result<usize> {
        let cfg = HatConfig {
            model_dim: 256,
            heads: 8,
            reps,
            ..HatConfig::new(128, 4)
        };
        Ok(HatModel::<f32>::new(cfg, 0)?.num_params())
    };
    let (two, three) = (hat(2)?, hat(3)?);
    let pass = lean < wide && formula_ok && three > two;
    Ok(Outcome::new(
        pass,
        format!(
            "encoder block at width 1280: ff 1.5× {lean} < ff 4× {wide} params; HAT reps 3 {three} > reps 2 {two} params"
        ),
    ))
}

fn seq_logits(model: &AnyModel, docs: &[DocumentSequence]) -> Result<Vec<u32>> {
    let mut bits = Vec::new();
    for doc in docs {
        let t: Tensor<f32> = match model {
            AnyModel::Seq { spec, model } => {
                let input = SeqInput::<f32>::from_document(doc, spec.modality, spec.geo)?;
                let m = model.as_dyn();
                eval_graph(m.store(), |g| Ok(m.logits(g, &[&input])?.value().as_ref().clone()))?
            }
            AnyModel::Fusion(m) => {
                let refs: Vec<_> = doc.paragraphs.iter().collect();
                let batch = FusionBatch::from_records(&refs)?;
                eval_graph(&m.store, |g| Ok(m.forward(g, &batch, None)?.logits.value().as_ref().clone()))?
            }
            AnyModel::Font { encoder, vocab } => {
                let ids: Vec<Vec<u32>> = doc
                    .paragraphs
                    .iter()
                    .map(|p| encode_font_sequence(p, vocab, encoder.config.maxlen))
                    .collect();
                encoder.encode(&ids)?.1
            }
            _ => unreachable!("only learned models"),
        };
        bits.extend(t.data().iter().map(|x| x.to_bits()));
    }
    Ok(bits)
}

fn preprocessing_exactness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);

    let mut bad_shape = 0;
    let mut bad_inversion = 0;
    let sizes = [(1, 1), (400, 1400), (399, 1401), (401, 1399), (900, 3000), (12, 2800)];
    for i in 0..60 {
        let (h, w) = sizes.get(i).copied().unwrap_or_else(|| (rng.random_range(1..900), rng.random_range(1..3000)));
        let pixels = (0..h * w).map(|_| rng.random()).collect();
        let img = GrayBitmap::new(h, w, pixels)?;
        let out = normalize_bitmap(&img);
        if out.height() != TARGET_HEIGHT || out.width() != TARGET_WIDTH || out.pixels().len() != TARGET_HEIGHT * TARGET_WIDTH
        {
            bad_shape += 1;
        }
        if invert_colors(&invert_colors(&img)).pixels() != img.pixels() {
            bad_inversion += 1;
        }
    }

    // the same ids behind different amounts of padding give identical features
    let mut pad_mismatch = 0;
    for cell in [CellKind::Lstm, CellKind::Gru, CellKind::Bilstm] {
        let cfg = FontEncoderConfig {
            cell,
            hidden: 16,
            embed_dim: 12,
            maxlen: 40,
            ..FontEncoderConfig::new(30)
        };
        let enc = FontEncoder::<f32>::new(cfg, 3)?;
        for _ in 0..20 {
            let len = rng.random_range(1..=12);
            let ids: Vec<u32> = (0..len).map(|_| rng.random_range(1..30)).collect();
            let other: Vec<u32> = (0..25).map(|_| rng.random_range(1..30)).collect();
            let padded = |total: usize| {
                let mut v = vec![FontVocab::PAD; total - len];
                v.extend(&ids);
                v
            };
            let alone = enc.encode(std::slice::from_ref(&ids))?.0;
            let short = enc.encode(&[padded(len + 3), padded(len + 3)])?.0;
            let mut batch = vec![padded(25), other];
            batch.swap(0, rng.random_range(0..2));
            let pos = batch.iter().position(|s| s[..25 - len].iter().all(|&x| x == FontVocab::PAD) && s[25 - len..] == ids[..]);
            let long = enc.encode(&batch)?.0;
            let h = alone.shape()[1];
            let row = |t: &Tensor<f32>, r: usize| t.data()[r * h..(r + 1) * h].iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            let reference = row(&alone, 0);
            if row(&short, 0) != reference || row(&long, pos.unwrap_or(0)) != reference {
                pad_mismatch += 1;
            }
        }
    }

    // checkpoint round trip for every learned model family
    let synth = SynthConfig {
        docs: 4,
        mean_len: 10,
        modalities: vec![Modality::Text, Modality::Vision, Modality::Font],
        ..SynthConfig::default()
    };
    let docs = synth_corpus(&synth, 4)?;
    let vocab = thmseq::corpus::build_font_vocab(&docs, 50)?;
    let spec = SeqInputSpec {
        modality: Modality::Font,
        geo: Some(GeomMode::Four),
        maxlen: 64,
    };
    let d = Modality::Font.dim();
    let small_fusion = FusionConfig::from_name("gmu")?.scaled(ModalDims::default(), 32, 8);
    let models = vec![
        AnyModel::Seq {
            spec,
            model: SeqModel::Sw(SwModel::new(
                SwConfig {
                    window: 4,
                    heads: 8,
                    ..SwConfig::new(d, 4)
                },
                7,
            )?),
        },
        AnyModel::Seq {
            spec,
            model: SeqModel::Crf(CrfModel::new(CrfConfig { input_dim: d, geo_width: 4 }, 7)?),
        },
        AnyModel::Seq {
            spec,
            model: SeqModel::Hat(HatModel::new(
                HatConfig {
                    segment: 4,
                    heads: 8,
                    ..HatConfig::new(d, 4)
                },
                7,
            )?),
        },
        AnyModel::Seq {
            spec,
            model: SeqModel::Para(ParaModel::new(
                ParaConfig {
                    input_dim: d,
                    geo_width: 4,
                    hidden: 32,
                },
                7,
            )?),
        },
        AnyModel::Fusion(FusionModel::new(small_fusion, 7)?),
        AnyModel::Font {
            encoder: FontEncoder::new(
                FontEncoderConfig {
                    embed_dim: 16,
                    hidden: 8,
                    maxlen: 32,
                    ..FontEncoderConfig::new(vocab.len())
                },
                7,
            )?,
            vocab,
        },
    ];
    let mut ckpt_mismatch = Vec::new();
    for m in &models {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m.to_checkpoint()?)?;
        let back = AnyModel::from_checkpoint(&read_checkpoint(&buf[..])?)?;
        if seq_logits(&back, &docs)? != seq_logits(m, &docs)? {
            ckpt_mismatch.push(m.kind());
        }
    }

    let pass = bad_shape == 0 && bad_inversion == 0 && pad_mismatch == 0 && ckpt_mismatch.is_empty();
    Ok(Outcome::new(
        pass,
        format!(
            "normalize shape errors {bad_shape}/60, inversion errors {bad_inversion}/60, left-pad mismatches {pad_mismatch}/60, checkpoint logit mismatches {} of {} model kinds{}",
            ckpt_mismatch.len(),
            models.len(),
            if ckpt_mismatch.is_empty() {
                String::new()
            } else {
                format!(" ({})", ckpt_mismatch.join(", "))
            }
        ),
    ))
}
