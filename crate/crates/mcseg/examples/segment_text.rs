//! Train a tiny model, checkpoint it, reload it, and segment fresh text —
//! the full round trip a deployment would take.

use mcseg::checkpoint;
use mcseg::data::{build_vocab, generate_synthetic_corpora, SegRule, TaggedSentence};
use mcseg::layers::EmbeddingTable;
use mcseg::multitask::SharedPrivateModel;
use mcseg::training::{decode_sentence, prepare_tasks, two_phase_train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let corpora =
        generate_synthetic_corpora(20, 300, &[SegRule::ClassRuns, SegRule::SplitDigits], 6)
            .unwrap();
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
        tasks.iter().map(|t| t.name.clone()).collect(),
        embedding,
        cfg.d_h,
        cfg.use_bigram,
        -cfg.init_scale,
        cfg.init_scale,
        &mut rng,
    );
    let out = two_phase_train(model, &tasks, &cfg, &mut rng, None).unwrap();

    let dir = std::env::temp_dir().join("mcseg-example.ckpt");
    checkpoint::save(&dir, &out.model, &vocab).unwrap();
    let (loaded, loaded_vocab) = checkpoint::load(&dir).unwrap();
    println!("checkpoint round trip ok ({} criteria)", loaded.n_criteria());

    for raw in ["abc123de", "77xy9", "q4"] {
        let chars: Vec<char> = raw.chars().collect();
        let enc = loaded_vocab.encode_chars(&chars);
        for (m, name) in loaded.criteria.iter().enumerate() {
            let spans = decode_sentence(&loaded, &enc, m).unwrap();
            let sent = TaggedSentence::from_spans(chars.clone(), spans).unwrap();
            println!("{raw:>10} under {name}: {}", sent.to_line());
        }
    }
}
