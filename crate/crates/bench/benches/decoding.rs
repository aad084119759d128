use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use metadan_core::decode::decode;
use metadan_core::masks::{fasterdan_mask, windowed_mask, LineLayout};
use metadan_core::metrics::levenshtein;
use metadan_core::synthdoc::render_document;
use metadan_core::train::{TrainSample, Trainer};
use metadan_core::{
    DecodeCaps, Model, ModelConfig, PredictionPolicy, Strategy, SynthConfig, TrainConfig, Variant,
    Vocab,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn setup(heads: usize) -> (Model<f32>, Vocab, SynthConfig) {
    let synth = SynthConfig {
        min_lines: 3,
        max_lines: 3,
        ..Default::default()
    };
    let vocab = Vocab::build(&[synth.alphabet_text()]).unwrap();
    let cfg = ModelConfig {
        num_classes: vocab.num_classes(),
        heads,
        ..Default::default()
    };
    (Model::new(cfg, 1).unwrap(), vocab, synth)
}

fn strategies(c: &mut Criterion) {
    let (model, vocab, synth) = setup(3);
    let doc = render_document(&synth, &mut StdRng::seed_from_u64(5)).unwrap();
    let caps = DecodeCaps {
        max_tokens: 60,
        max_iterations: 60,
    };
    let newline = vocab.id_of('\n').unwrap();
    let k3 = PredictionPolicy::Static { k: 3 };
    let cases = [
        Strategy::Dan,
        Strategy::Wdan { w: 3 },
        Strategy::Mtdan { policy: k3 },
        Strategy::Meta {
            w: 3,
            m: 3,
            policy: k3,
        },
        Strategy::Meta {
            w: 3,
            m: 3,
            policy: PredictionPolicy::Dynamic { tau: 0.9 },
        },
        Strategy::Fasterdan { newline },
    ];
    let mut group = c.benchmark_group("decode_60_tokens");
    group.sample_size(10);
    for s in &cases {
        group.bench_with_input(BenchmarkId::from_parameter(s), s, |b, s| {
            b.iter(|| decode(&model, black_box(&doc.image), s, &caps).unwrap())
        });
    }
    group.finish();
}

fn masks(c: &mut Criterion) {
    c.bench_function("windowed_mask_600_w5", |b| {
        b.iter(|| windowed_mask(black_box(600), 5))
    });
    let lines = 8;
    let layout = LineLayout {
        n_stage1: lines + 1,
        line_of: (0..lines)
            .flat_map(|l| std::iter::repeat_n(l, 20))
            .collect(),
        pos_in_line: (0..lines).flat_map(|_| 0..20).collect(),
    };
    c.bench_function("fasterdan_mask_8x20", |b| {
        b.iter(|| fasterdan_mask(black_box(&layout)).unwrap())
    });
}

fn edit_distance(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(9);
    let mut text = |n: usize| -> Vec<u8> { (0..n).map(|_| rng.gen_range(b'a'..=b'p')).collect() };
    let (a, b) = (text(500), text(500));
    c.bench_function("levenshtein_500", |bn| {
        bn.iter(|| levenshtein(black_box(&a), black_box(&b)))
    });
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_batch2");
    group.sample_size(10);
    for (variant, w, m) in [
        (Variant::Dan, 1, 1),
        (Variant::Meta, 2, 2),
        (Variant::Fasterdan, 1, 1),
    ] {
        let (model, vocab, synth) = setup(m);
        let mut rng = StdRng::seed_from_u64(3);
        let batch: Vec<TrainSample> = (0..2)
            .map(|_| {
                TrainSample::from_document(&vocab, &render_document(&synth, &mut rng).unwrap())
                    .unwrap()
            })
            .collect();
        let config = TrainConfig {
            variant,
            window: w,
            heads: m,
            ..Default::default()
        };
        let mut trainer = Trainer::new(model, vocab, config, Some(synth), Vec::new()).unwrap();
        group.bench_function(variant.to_string(), |b| {
            b.iter(|| trainer.train_step(black_box(&batch)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, strategies, masks, edit_distance, training);
criterion_main!(benches);
