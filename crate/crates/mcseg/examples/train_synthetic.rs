//! Train a single-criterion Bi-LSTM-CRF segmenter on synthetic data and
//! report dev/test F as training progresses.

use mcseg::data::{build_vocab, generate_synthetic_corpora, SegRule};
use mcseg::layers::EmbeddingTable;
use mcseg::multitask::SharedPrivateModel;
use mcseg::training::{eval_test, prepare_tasks, two_phase_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let corpora =
        generate_synthetic_corpora(20, 300, &[SegRule::ClassRuns, SegRule::SplitDigits], 1)
            .unwrap();
    let corpora = vec![corpora.into_iter().next().unwrap()];
    let vocab = build_vocab(&corpora, 1).unwrap();
    let tasks = prepare_tasks(&corpora, &vocab);

    let mut cfg = TrainConfig::default();
    cfg.d_e = 16;
    cfg.d_h = 16;
    cfg.batch_size = 64;
    cfg.adversarial = false;
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
        vec![tasks[0].name.clone()],
        embedding,
        cfg.d_h,
        cfg.use_bigram,
        -cfg.init_scale,
        cfg.init_scale,
        &mut rng,
    );
    let mut log = std::io::stdout();
    let out = two_phase_train(model, &tasks, &cfg, &mut rng, Some(&mut log)).unwrap();
    let test = eval_test(&out.model, &tasks[0], 0).unwrap();
    println!(
        "criterion {}: best dev F {:.4}, test P {:.4} R {:.4} F {:.4}",
        tasks[0].name, out.best_dev_f, test.precision, test.recall, test.f1
    );
}
