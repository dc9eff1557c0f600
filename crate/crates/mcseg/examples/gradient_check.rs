//! Verify the tape's gradients against central finite differences for a
//! complete shared-private model, parameter by parameter.

use mcseg::data::EncodedSentence;
use mcseg::layers::EmbeddingTable;
use mcseg::multitask::{loss_seg, ArchitectureKind, SharedPrivateModel};
use mcseg::tensor::{finite_difference_gradient, max_relative_error, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let embedding = EmbeddingTable::new_random(6, 8, 4, -0.4, 0.4, &mut rng);
    let model = SharedPrivateModel::new(
        ArchitectureKind::ModelIII,
        vec!["a".into(), "b".into()],
        embedding,
        4,
        true,
        -0.4,
        0.4,
        &mut rng,
    );
    let batch = [EncodedSentence {
        char_ids: vec![2, 3, 4, 5],
        bigram_ids: vec![0, 2, 3, 4],
        tags: vec![0, 1, 2, 3],
    }];

    let tape = Tape::new();
    let vars = model.bind(&tape, |_| true);
    let mut r = ChaCha20Rng::seed_from_u64(0);
    let loss = loss_seg(&vars, &batch, 0, false, 1.0, &mut r).unwrap();
    tape.backward(loss).unwrap();
    let mut graded = model.clone();
    graded.zero_grads();
    graded.write_grads(&vars);

    for (name, _, tensor) in graded.params() {
        let Some(analytic) = tensor.grad() else { continue };
        if analytic.iter().all(|&g| g == 0.0) {
            continue; // untouched by criterion 0's loss
        }
        let fd = finite_difference_gradient(
            |probe| {
                let mut m2 = model.clone();
                for (n2, _, t2) in m2.params_mut() {
                    if n2 == name {
                        *t2 = probe.clone().with_grad();
                    }
                }
                let tape = Tape::new();
                let vars = m2.bind(&tape, |_| true);
                let mut r = ChaCha20Rng::seed_from_u64(0);
                Ok(loss_seg(&vars, &batch, 0, false, 1.0, &mut r)?.scalar_value())
            },
            tensor,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic, fd.data());
        println!("{name:24} rel err {err:.3e}");
        assert!(err < 1e-4, "{name} gradient mismatch");
    }
    println!("all gradients match finite differences (rel err < 1e-4)");
}
