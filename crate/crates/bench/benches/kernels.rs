use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dcgm::gradcheck::{random_example, random_model};
use dcgm::metrics::bleu_stats;
use dcgm::rescore::{mert_iteration, Hypothesis};
use dcgm::retrieval::{query, Field, Provenance, Reference};
use dcgm::{Family, FeatureRegistry, LogLinearWeights, NBestList, ReferenceSet, Triple, TripleIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn words(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grad");
    for (vocab, hidden, encoder) in [(50, 16, vec![16, 16]), (1000, 64, vec![64, 32, 64])] {
        for family in Family::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let enc: &[usize] = if family == Family::Rlmt { &[] } else { &encoder };
            let model = random_model(family, vocab, hidden, enc, 0.1, &mut rng).unwrap();
            let ex = random_example(vocab, 12, &mut rng);
            group.bench_with_input(BenchmarkId::new(family.name(), format!("V{vocab}-K{hidden}")), &ex, |b, ex| {
                b.iter(|| model.loss_and_grad(black_box(ex), None, &mut rng, usize::MAX).unwrap())
            });
        }
    }
    group.finish();
}

fn bm25(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let triples: Vec<Triple> = (0..5000)
        .map(|i| Triple::new(format!("d{i}"), words(&mut rng, 2000, 8), words(&mut rng, 2000, 10), words(&mut rng, 2000, 10)))
        .collect();
    let index = TripleIndex::build(triples);
    let q = query(&words(&mut rng, 2000, 10));
    c.bench_function("bm25_score_all_5000", |b| b.iter(|| index.score_all(Field::Message, black_box(&q))));
}

fn bleu(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hyp = words(&mut rng, 30, 20);
    let refs: Vec<Vec<String>> = (0..4).map(|_| words(&mut rng, 30, 20)).collect();
    c.bench_function("bleu_stats_4refs", |b| b.iter(|| bleu_stats(black_box(&hyp), black_box(&refs))));
}

fn mert(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = (0..10).map(|j| format!("f{j}")).collect();
    let registry = FeatureRegistry::new(names).unwrap();
    let pool: Vec<Vec<String>> = (0..50).map(|_| words(&mut rng, 40, 8)).collect();
    let mut lists = Vec::new();
    let mut refsets = Vec::new();
    for i in 0..100 {
        let hypotheses = (0..20)
            .map(|_| Hypothesis {
                tokens: pool.choose(&mut rng).unwrap().clone(),
                features: (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                score: 0.0,
            })
            .collect();
        lists.push(NBestList { item: format!("q{i}"), context: vec![], message: vec![], hypotheses });
        let references = (0..3)
            .map(|_| Reference { tokens: pool.choose(&mut rng).unwrap().clone(), provenance: Provenance::Original, rating: None })
            .collect();
        refsets.push(ReferenceSet { item: format!("q{i}"), references });
    }
    let w0 = LogLinearWeights::zeros(registry.clone());
    c.bench_function("mert_iteration_100x20x10", |b| b.iter(|| mert_iteration(&lists, &registry, &refsets, &w0).unwrap()));
}

criterion_group!(benches, forward_backward, bm25, bleu, mert);
criterion_main!(benches);
