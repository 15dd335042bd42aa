use thmseq::corpus::{split_corpus, GeomMode, Label, Modality};
use thmseq::optim::AdamConfig;
use thmseq::sequence::{CrfConfig, CrfModel, ParaConfig, ParaModel, SwConfig, SwModel};
use thmseq::train::synth::{synth_corpus, SynthConfig};
use thmseq::train::{fit, seq_items, SeqItem, TrainConfig, Trainable};

fn corpus(noise: f64, docs: usize) -> (Vec<SeqItem>, Vec<SeqItem>) {
    let cfg = SynthConfig {
        docs,
        mean_len: 20,
        noise,
        ..SynthConfig::default()
    };
    let docs = synth_corpus(&cfg, 5).unwrap();
    let (train, val) = split_corpus(&docs, 0.25, 0).unwrap();
    (
        seq_items(&train, Modality::Font, Some(GeomMode::Four), 64).unwrap(),
        seq_items(&val, Modality::Font, Some(GeomMode::Four), 64).unwrap(),
    )
}

fn para(seed: u64) -> ParaModel<f32> {
    ParaModel::new(
        ParaConfig {
            input_dim: 128,
            geo_width: 4,
            hidden: 32,
        },
        seed,
    )
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        docs_per_batch: 4,
        seed: 9,
        patience: epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let (train, val) = corpus(1.0, 12);
    let mut model = para(0);
    let before = model.params().tensors().to_vec();
    let cfg = TrainConfig {
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
        ..quick(3)
    };
    let report = fit(&mut model, &train, &val, &cfg).unwrap();
    assert_eq!(model.params().tensors(), &before[..]);
    assert!(report.history.windows(2).all(|w| w[0].val == w[1].val));
}

#[test]
fn noiseless_synthetic_features_are_separable() {
    let cfg = SynthConfig {
        docs: 6,
        noise: 0.0,
        ..SynthConfig::default()
    };
    let docs = synth_corpus(&cfg, 1).unwrap();
    let mut prototypes: Vec<(Label, Vec<f32>)> = Vec::new();
    for p in docs.iter().flat_map(|d| &d.paragraphs) {
        let e = p.embedding(Modality::Font).unwrap().to_vec();
        match prototypes.iter().find(|(l, _)| *l == p.label) {
            Some((_, proto)) => assert_eq!(proto, &e),
            None => {
                assert!(prototypes.iter().all(|(_, q)| *q != e));
                prototypes.push((p.label, e));
            }
        }
    }
}

#[test]
fn separable_toy_reaches_perfect_accuracy() {
    let (train, val) = corpus(0.0, 16);
    let mut model = para(2);
    let report = fit(&mut model, &train, &val, &quick(50)).unwrap();
    assert_eq!(report.best.accuracy, 1.0, "{:?}", report.history.last().map(|r| r.val.accuracy));
    assert!(report.history.len() <= 50);
}

#[test]
fn same_seed_gives_identical_history() {
    let (train, val) = corpus(1.0, 12);
    let run = || {
        let mut model = SwModel::<f32>::new(
            SwConfig {
                model_dim: 16,
                heads: 2,
                window: 4,
                ..SwConfig::new(128, 4)
            },
            4,
        )
        .unwrap();
        let report = fit(&mut model, &train, &val, &quick(3)).unwrap();
        (report, model.params().tensors().to_vec())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    let bits = |r: &thmseq::train::TrainReport| r.history.iter().map(|e| e.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a, b);
    assert_eq!(pa, pb);
}

#[test]
fn training_leaves_frozen_features_untouched() {
    let (train, val) = corpus(1.0, 12);
    let (train_before, val_before) = (train.clone(), val.clone());
    let mut model = CrfModel::<f32>::new(
        CrfConfig {
            input_dim: 128,
            geo_width: 4,
        },
        0,
    )
    .unwrap();
    fit(&mut model, &train, &val, &quick(2)).unwrap();
    assert_eq!(train, train_before);
    assert_eq!(val, val_before);
}

#[test]
fn best_epoch_parameters_are_restored() {
    let (train, val) = corpus(1.0, 12);
    let mut model = para(3);
    let report = fit(&mut model, &train, &val, &quick(4)).unwrap();
    let again = thmseq::train::evaluate_items(&model, &val, 4).unwrap();
    assert_eq!(again, report.best);
    assert_eq!(report.history[report.best_epoch - 1].val, report.best);
}

#[test]
fn empty_splits_are_rejected() {
    let (train, _) = corpus(1.0, 4);
    assert!(fit(&mut para(0), &train, &[], &quick(1)).is_err());
    assert!(fit(&mut para(0), &[], &train, &quick(1)).is_err());
}
