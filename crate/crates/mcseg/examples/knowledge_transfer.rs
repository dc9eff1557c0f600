//! Transfer a trained shared tower to a brand-new segmentation criterion:
//! only the new private tower and CRF head train, and the result is
//! compared against the same budget spent on a randomly initialized frozen
//! shared tower.

use mcseg::data::{build_vocab, generate_synthetic_corpora, SegRule};
use mcseg::layers::EmbeddingTable;
use mcseg::multitask::{ArchitectureKind, SharedPrivateModel};
use mcseg::training::{eval_test, prepare_tasks, transfer_train, two_phase_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let corpora = generate_synthetic_corpora(
        20,
        300,
        &[SegRule::ClassRuns, SegRule::SplitDigits, SegRule::SplitLetters],
        4,
    )
    .unwrap();
    let vocab = build_vocab(&corpora, 1).unwrap();
    let tasks = prepare_tasks(&corpora, &vocab);
    let (source_tasks, target) = (&tasks[..2], &tasks[2]);

    let mut cfg = TrainConfig::default();
    cfg.architecture = ArchitectureKind::ModelI;
    cfg.d_e = 16;
    cfg.d_h = 16;
    cfg.batch_size = 64;
    cfg.phase1_epochs = 80;
    cfg.phase2_max_epochs = 150;
    cfg.eval_every = 15;
    cfg.patience = 5;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let embedding = EmbeddingTable::new_random(
        vocab.n_chars(),
        vocab.n_bigrams(),
        cfg.d_e,
        -cfg.init_scale,
        cfg.init_scale,
        &mut rng,
    );
    let model = SharedPrivateModel::new(
        cfg.architecture,
        source_tasks.iter().map(|t| t.name.clone()).collect(),
        embedding,
        cfg.d_h,
        cfg.use_bigram,
        -cfg.init_scale,
        cfg.init_scale,
        &mut rng,
    );
    let control = model.clone(); // never trained: the random-shared baseline
    let trained = two_phase_train(model, source_tasks, &cfg, &mut rng, None)
        .unwrap()
        .model;

    let mut rng_a = ChaCha20Rng::seed_from_u64(9);
    let mut rng_b = ChaCha20Rng::seed_from_u64(9);
    let transferred = transfer_train(&trained, target, &cfg, &mut rng_a).unwrap();
    let random_base = transfer_train(&control, target, &cfg, &mut rng_b).unwrap();

    let f_t = eval_test(&transferred.model, target, 2).unwrap().f1;
    let f_r = eval_test(&random_base.model, target, 2).unwrap().f1;
    println!("target criterion: {}", target.name);
    println!("transfer from trained shared tower: test F {f_t:.4}");
    println!("same budget, random frozen shared:  test F {f_r:.4}");
}
