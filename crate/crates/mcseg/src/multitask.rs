//! Shared-private multi-task architectures, the criterion discriminator, and
//! the segmentation / adversarial objective terms.
//!
//! Model-I runs the shared and private Bi-LSTMs in parallel over the
//! embeddings and feeds the CRF their concatenation. Model-II stacks the
//! private tower on top of the shared one (private input is e_x ⊕ h^s) and
//! feeds the CRF the private states only. Model-III wires like Model-II but
//! feeds the CRF the concatenation as in Model-I.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::crf::{self, CrfHead, CrfVars};
use crate::data::EncodedSentence;
use crate::error::{Error, Result};
use crate::layers::{
    bilstm_forward, dropout, embed_sequence, BiLstmParams, BiLstmVars, EmbeddingTable,
    EmbeddingVars,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchitectureKind {
    ModelI,
    ModelII,
    ModelIII,
}

impl ArchitectureKind {
    /// CRF feature width: 4·d_h where the head sees [h^s; h^m], 2·d_h for
    /// Model-II which sees the private states only.
    pub fn d_feat(&self, d_h: usize) -> usize {
        match self {
            ArchitectureKind::ModelII => 2 * d_h,
            _ => 4 * d_h,
        }
    }

    /// Private tower input width; stacked variants consume e_x ⊕ h^s.
    pub fn private_d_in(&self, d_emb: usize, d_h: usize) -> usize {
        match self {
            ArchitectureKind::ModelI => d_emb,
            _ => d_emb + 2 * d_h,
        }
    }
}

impl std::str::FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model1" | "model-i" => Ok(ArchitectureKind::ModelI),
            "model2" | "model-ii" => Ok(ArchitectureKind::ModelII),
            "model3" | "model-iii" => Ok(ArchitectureKind::ModelIII),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Criterion discriminator: softmax(W_dᵀ · mean_i h^s_i + b_d) over M
/// criteria. The input width is 2·d_h, the Bi-LSTM concatenation width.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub w_d: Tensor,
    pub b_d: Tensor,
}

impl DiscriminatorParams {
    pub fn new_random(d_h: usize, m: usize, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        DiscriminatorParams {
            w_d: Tensor::uniform(2 * d_h, m, low, high, rng).with_grad(),
            b_d: Tensor::uniform(1, m, low, high, rng).with_grad(),
        }
    }
}

/// Which of the three disjoint parameter partitions a tensor belongs to:
/// Θ^s (shared tower + embedding), Θ^m (private towers + CRF heads), or
/// Θ^d (discriminator).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Shared,
    Private(usize),
    Discriminator,
}

/// The full multi-criteria model: one shared Bi-LSTM, one private Bi-LSTM
/// and CRF head per criterion, a single shared embedding table, and the
/// criterion discriminator.
#[derive(Clone, Debug)]
pub struct SharedPrivateModel {
    pub arch: ArchitectureKind,
    pub d_h: usize,
    pub use_bigram: bool,
    pub criteria: Vec<String>,
    pub embedding: EmbeddingTable,
    pub shared: BiLstmParams,
    pub private: Vec<BiLstmParams>,
    pub heads: Vec<CrfHead>,
    pub discriminator: DiscriminatorParams,
}

impl SharedPrivateModel {
    pub fn new(
        arch: ArchitectureKind,
        criteria: Vec<String>,
        embedding: EmbeddingTable,
        d_h: usize,
        use_bigram: bool,
        low: f64,
        high: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let m = criteria.len();
        let d_emb = embedding.d_e * if use_bigram { 2 } else { 1 };
        let shared = BiLstmParams::new_random(d_emb, d_h, low, high, rng);
        let private = (0..m)
            .map(|_| BiLstmParams::new_random(arch.private_d_in(d_emb, d_h), d_h, low, high, rng))
            .collect();
        let heads = (0..m)
            .map(|_| CrfHead::new_random(arch.d_feat(d_h), low, high, rng))
            .collect();
        let discriminator = DiscriminatorParams::new_random(d_h, m, low, high, rng);
        SharedPrivateModel {
            arch,
            d_h,
            use_bigram,
            criteria,
            embedding,
            shared,
            private,
            heads,
            discriminator,
        }
    }

    pub fn n_criteria(&self) -> usize {
        self.criteria.len()
    }

    pub fn criterion_index(&self, name: &str) -> Option<usize> {
        self.criteria.iter().position(|c| c == name)
    }

    pub fn d_emb(&self) -> usize {
        self.embedding.d_e * if self.use_bigram { 2 } else { 1 }
    }

    /// Every trainable tensor with its canonical name and group, in a fixed
    /// order. The groups partition the parameter set.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor)> {
        let mut out: Vec<(String, ParamGroup, &Tensor)> = vec![
            ("embedding.unigram".into(), ParamGroup::Shared, &self.embedding.unigram),
            ("embedding.bigram".into(), ParamGroup::Shared, &self.embedding.bigram),
            ("shared.fwd.w_g".into(), ParamGroup::Shared, &self.shared.forward.w_g),
            ("shared.fwd.b_g".into(), ParamGroup::Shared, &self.shared.forward.b_g),
            ("shared.bwd.w_g".into(), ParamGroup::Shared, &self.shared.backward.w_g),
            ("shared.bwd.b_g".into(), ParamGroup::Shared, &self.shared.backward.b_g),
        ];
        for (m, p) in self.private.iter().enumerate() {
            let g = ParamGroup::Private(m);
            out.push((format!("private.{m}.fwd.w_g"), g, &p.forward.w_g));
            out.push((format!("private.{m}.fwd.b_g"), g, &p.forward.b_g));
            out.push((format!("private.{m}.bwd.w_g"), g, &p.backward.w_g));
            out.push((format!("private.{m}.bwd.b_g"), g, &p.backward.b_g));
        }
        for (m, h) in self.heads.iter().enumerate() {
            let g = ParamGroup::Private(m);
            out.push((format!("head.{m}.w_s"), g, &h.w_s));
            out.push((format!("head.{m}.b_s"), g, &h.b_s));
            out.push((format!("head.{m}.transitions"), g, &h.transitions));
        }
        out.push(("disc.w_d".into(), ParamGroup::Discriminator, &self.discriminator.w_d));
        out.push(("disc.b_d".into(), ParamGroup::Discriminator, &self.discriminator.b_d));
        out
    }

    /// Same ordering as [`params`](Self::params), with mutable references.
    pub fn params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Tensor)> {
        let mut out: Vec<(String, ParamGroup, &mut Tensor)> = vec![
            ("embedding.unigram".into(), ParamGroup::Shared, &mut self.embedding.unigram),
            ("embedding.bigram".into(), ParamGroup::Shared, &mut self.embedding.bigram),
            ("shared.fwd.w_g".into(), ParamGroup::Shared, &mut self.shared.forward.w_g),
            ("shared.fwd.b_g".into(), ParamGroup::Shared, &mut self.shared.forward.b_g),
            ("shared.bwd.w_g".into(), ParamGroup::Shared, &mut self.shared.backward.w_g),
            ("shared.bwd.b_g".into(), ParamGroup::Shared, &mut self.shared.backward.b_g),
        ];
        for (m, p) in self.private.iter_mut().enumerate() {
            let g = ParamGroup::Private(m);
            out.push((format!("private.{m}.fwd.w_g"), g, &mut p.forward.w_g));
            out.push((format!("private.{m}.fwd.b_g"), g, &mut p.forward.b_g));
            out.push((format!("private.{m}.bwd.w_g"), g, &mut p.backward.w_g));
            out.push((format!("private.{m}.bwd.b_g"), g, &mut p.backward.b_g));
        }
        for (m, h) in self.heads.iter_mut().enumerate() {
            let g = ParamGroup::Private(m);
            out.push((format!("head.{m}.w_s"), g, &mut h.w_s));
            out.push((format!("head.{m}.b_s"), g, &mut h.b_s));
            out.push((format!("head.{m}.transitions"), g, &mut h.transitions));
        }
        out.push(("disc.w_d".into(), ParamGroup::Discriminator, &mut self.discriminator.w_d));
        out.push(("disc.b_d".into(), ParamGroup::Discriminator, &mut self.discriminator.b_d));
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, _, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Bind every parameter onto a tape. Only groups for which `trainable`
    /// returns true receive gradients; the rest are treated as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(ParamGroup) -> bool) -> ModelVars<'t> {
        let frozen = |t: &Tensor, on: bool| {
            if on {
                tape.leaf(t)
            } else {
                let mut c = t.clone();
                c = Tensor::from_vec(c.rows(), c.cols(), c.data().to_vec()).expect("same shape");
                tape.leaf(&c)
            }
        };
        let embedding = EmbeddingVars {
            unigram: frozen(&self.embedding.unigram, trainable(ParamGroup::Shared)),
            bigram: frozen(&self.embedding.bigram, trainable(ParamGroup::Shared)),
            d_e: self.embedding.d_e,
        };
        let bind_bilstm = |p: &BiLstmParams, on: bool| BiLstmVars {
            forward: crate::layers::LstmVars {
                w_g: frozen(&p.forward.w_g, on),
                b_g: frozen(&p.forward.b_g, on),
                d_h: p.forward.d_h,
            },
            backward: crate::layers::LstmVars {
                w_g: frozen(&p.backward.w_g, on),
                b_g: frozen(&p.backward.b_g, on),
                d_h: p.backward.d_h,
            },
        };
        let shared = bind_bilstm(&self.shared, trainable(ParamGroup::Shared));
        let private = self
            .private
            .iter()
            .enumerate()
            .map(|(m, p)| bind_bilstm(p, trainable(ParamGroup::Private(m))))
            .collect();
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(m, h)| CrfVars {
                w_s: frozen(&h.w_s, trainable(ParamGroup::Private(m))),
                b_s: frozen(&h.b_s, trainable(ParamGroup::Private(m))),
                transitions: frozen(&h.transitions, trainable(ParamGroup::Private(m))),
            })
            .collect();
        let w_d = frozen(&self.discriminator.w_d, trainable(ParamGroup::Discriminator));
        let b_d = frozen(&self.discriminator.b_d, trainable(ParamGroup::Discriminator));
        ModelVars {
            arch: self.arch,
            d_h: self.d_h,
            use_bigram: self.use_bigram,
            n_criteria: self.criteria.len(),
            embedding,
            shared,
            private,
            heads,
            w_d,
            b_d,
        }
    }

    /// Read accumulated gradients off the tape back into the parameter
    /// tensors, in binding order.
    pub fn write_grads(&mut self, vars: &ModelVars<'_>) {
        let bound = vars.binding_list();
        for ((_, _, t), v) in self.params_mut().into_iter().zip(bound) {
            if t.requires_grad() {
                t.accumulate_grad(&v.grad());
            }
        }
    }
}

/// Tape-bound view of a [`SharedPrivateModel`].
pub struct ModelVars<'t> {
    pub arch: ArchitectureKind,
    pub d_h: usize,
    pub use_bigram: bool,
    pub n_criteria: usize,
    pub embedding: EmbeddingVars<'t>,
    pub shared: BiLstmVars<'t>,
    pub private: Vec<BiLstmVars<'t>>,
    pub heads: Vec<CrfVars<'t>>,
    pub w_d: Var<'t>,
    pub b_d: Var<'t>,
}

impl<'t> ModelVars<'t> {
    fn binding_list(&self) -> Vec<Var<'t>> {
        let mut out = vec![
            self.embedding.unigram,
            self.embedding.bigram,
            self.shared.forward.w_g,
            self.shared.forward.b_g,
            self.shared.backward.w_g,
            self.shared.backward.b_g,
        ];
        for p in &self.private {
            out.extend([p.forward.w_g, p.forward.b_g, p.backward.w_g, p.backward.b_g]);
        }
        for h in &self.heads {
            out.extend([h.w_s, h.b_s, h.transitions]);
        }
        out.extend([self.w_d, self.b_d]);
        out
    }

    /// Embed one sentence, with dropout on the embedding layer output in
    /// train mode.
    pub fn embed(
        &self,
        sent: &EncodedSentence,
        train: bool,
        keep_rate: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var<'t>>> {
        let embedded = embed_sequence(
            &sent.char_ids,
            &sent.bigram_ids,
            &self.embedding,
            self.use_bigram,
        )?;
        embedded
            .iter()
            .map(|e| dropout(e, keep_rate, train, rng))
            .collect()
    }
}

/// Run the towers for criterion `m` per the architecture wiring. Returns the
/// per-position CRF features and the shared tower's states (the
/// discriminator input).
pub fn forward_features<'t>(
    vars: &ModelVars<'t>,
    embedded: &[Var<'t>],
    m: usize,
) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
    if m >= vars.n_criteria {
        return Err(Error::Invalid(format!(
            "criterion index {m} out of range for {} criteria",
            vars.n_criteria
        )));
    }
    let shared_states = bilstm_forward(embedded, &vars.shared)?;
    let private_inputs: Vec<Var<'t>> = match vars.arch {
        ArchitectureKind::ModelI => embedded.to_vec(),
        _ => embedded
            .iter()
            .zip(&shared_states)
            .map(|(e, s)| e.concat_cols(s))
            .collect::<Result<_>>()?,
    };
    let private_states = bilstm_forward(&private_inputs, &vars.private[m])?;
    let task_features = match vars.arch {
        ArchitectureKind::ModelII => private_states,
        _ => shared_states
            .iter()
            .zip(&private_states)
            .map(|(s, p)| s.concat_cols(p))
            .collect::<Result<_>>()?,
    };
    Ok((task_features, shared_states))
}

/// Averaged shared states through softmax: p(·|X) over the M criteria.
pub fn discriminator_forward<'t>(
    shared_states: &[Var<'t>],
    w_d: &Var<'t>,
    b_d: &Var<'t>,
) -> Result<Var<'t>> {
    if shared_states.is_empty() {
        return Err(Error::Invalid("discriminator_forward on empty sequence".into()));
    }
    let mean = Var::concat_rows(shared_states)?.mean_rows();
    Ok(mean.matmul(w_d)?.add_row(b_d)?.softmax())
}

fn check_batch(batch: &[EncodedSentence]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if batch.iter().any(|s| s.is_empty()) {
        return Err(Error::Invalid("empty sentence in batch".into()));
    }
    Ok(())
}

/// J_seg on one batch of criterion `m`: Σ log p(Y|X) under head `m`.
/// A quantity to maximize.
pub fn loss_seg<'t>(
    vars: &ModelVars<'t>,
    batch: &[EncodedSentence],
    m: usize,
    train: bool,
    keep_rate: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    check_batch(batch)?;
    let mut total: Option<Var<'t>> = None;
    for sent in batch {
        let embedded = vars.embed(sent, train, keep_rate, rng)?;
        let (features, _) = forward_features(vars, &embedded, m)?;
        let scores = crf::emission_scores(&features, &vars.heads[m])?;
        let ll = crf::log_likelihood(&scores, &vars.heads[m].transitions, &sent.tags)?;
        total = Some(match total {
            None => ll,
            Some(t) => t.add(&ll)?,
        });
    }
    Ok(total.expect("non-empty batch"))
}

/// Shared tower only, for the discriminator objectives.
fn shared_states_for<'t>(
    vars: &ModelVars<'t>,
    sent: &EncodedSentence,
    train: bool,
    keep_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Var<'t>>> {
    let embedded = vars.embed(sent, train, keep_rate, rng)?;
    bilstm_forward(&embedded, &vars.shared)
}

/// J¹_adv on one batch: Σ log p(m|X). Maximized w.r.t. Θ^d only; callers
/// bind Θ^s as constant when optimizing it.
pub fn loss_adv_discriminator<'t>(
    vars: &ModelVars<'t>,
    batch: &[EncodedSentence],
    m: usize,
    train: bool,
    keep_rate: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    check_batch(batch)?;
    let mut total: Option<Var<'t>> = None;
    for sent in batch {
        let states = shared_states_for(vars, sent, train, keep_rate, rng)?;
        let p = discriminator_forward(&states, &vars.w_d, &vars.b_d)?;
        let logp = p.ln().pick_sum(&[(0, m)])?;
        total = Some(match total {
            None => logp,
            Some(t) => t.add(&logp)?,
        });
    }
    Ok(total.expect("non-empty batch"))
}

/// J²_adv on one batch: Σ H(p(·|X)) with H(p) = −Σ p_i log p_i. Maximized
/// w.r.t. Θ^s only; callers bind Θ^d as constant.
pub fn loss_adv_entropy<'t>(
    vars: &ModelVars<'t>,
    batch: &[EncodedSentence],
    train: bool,
    keep_rate: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    check_batch(batch)?;
    let mut total: Option<Var<'t>> = None;
    for sent in batch {
        let states = shared_states_for(vars, sent, train, keep_rate, rng)?;
        let p = discriminator_forward(&states, &vars.w_d, &vars.b_d)?;
        let h = p.mul(&p.ln())?.sum().scale(-1.0);
        total = Some(match total {
            None => h,
            Some(t) => t.add(&h)?,
        });
    }
    Ok(total.expect("non-empty batch"))
}

/// J = J_seg + J¹_adv + λ·J²_adv on one batch. Gradient routing between the
/// terms is the trainer's job; this just evaluates the combined value.
pub fn combined_objective<'t>(
    vars: &ModelVars<'t>,
    batch: &[EncodedSentence],
    m: usize,
    lambda: f64,
    train: bool,
    keep_rate: f64,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda {lambda} must be ≥ 0")));
    }
    let seg = loss_seg(vars, batch, m, train, keep_rate, rng)?;
    let disc = loss_adv_discriminator(vars, batch, m, train, keep_rate, rng)?;
    let ent = loss_adv_entropy(vars, batch, train, keep_rate, rng)?;
    seg.add(&disc)?.add(&ent.scale(lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, CriterionCorpus, TaggedSentence};
    use crate::tensor::{finite_difference_gradient, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_model(arch: ArchitectureKind, m: usize, rng: &mut ChaCha20Rng) -> SharedPrivateModel {
        let embedding = EmbeddingTable::new_random(6, 8, 3, -0.3, 0.3, rng);
        SharedPrivateModel::new(
            arch,
            (0..m).map(|i| format!("c{i}")).collect(),
            embedding,
            3,
            false,
            -0.3,
            0.3,
            rng,
        )
    }

    fn zero_model(arch: ArchitectureKind, m: usize) -> SharedPrivateModel {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = tiny_model(arch, m, &mut rng);
        for (_, _, t) in model.params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        model
    }

    fn sentence(ids: &[usize], tags: &[usize]) -> EncodedSentence {
        EncodedSentence {
            char_ids: ids.to_vec(),
            bigram_ids: vec![0; ids.len()],
            tags: tags.to_vec(),
        }
    }

    #[test]
    fn parameter_partition_is_disjoint_and_total() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let model = tiny_model(ArchitectureKind::ModelI, 3, &mut rng);
        let params = model.params();
        let mut names: Vec<&str> = params.iter().map(|(n, _, _)| n.as_str()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), params.len());
        // shared + 3×(4 private + 3 head) + 2 disc + 6 shared/embedding
        assert_eq!(params.len(), 6 + 3 * 7 + 2);
        for g in [ParamGroup::Shared, ParamGroup::Discriminator] {
            assert!(params.iter().any(|(_, pg, _)| *pg == g));
        }
    }

    #[test]
    fn task_feature_widths_per_architecture() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for (arch, width) in [
            (ArchitectureKind::ModelI, 12),
            (ArchitectureKind::ModelII, 6),
            (ArchitectureKind::ModelIII, 12),
        ] {
            let model = tiny_model(arch, 2, &mut rng);
            let tape = Tape::new();
            let vars = model.bind(&tape, |_| true);
            let sent = sentence(&[2, 3, 4], &[0, 1, 2]);
            let embedded = vars.embed(&sent, false, 1.0, &mut rng).unwrap();
            let (features, shared) = forward_features(&vars, &embedded, 0).unwrap();
            assert_eq!(features[0].cols(), width, "{arch:?}");
            assert_eq!(shared[0].cols(), 6);
        }
    }

    #[test]
    fn model2_zero_shared_gives_zero_shared_states() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut model = tiny_model(ArchitectureKind::ModelII, 2, &mut rng);
        for name in ["shared.fwd.w_g", "shared.fwd.b_g", "shared.bwd.w_g", "shared.bwd.b_g"] {
            for (n, _, t) in model.params_mut() {
                if n == name {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let sent = sentence(&[2, 3], &[0, 2]);
        let embedded = vars.embed(&sent, false, 1.0, &mut rng).unwrap();
        let (_, shared) = forward_features(&vars, &embedded, 0).unwrap();
        for s in &shared {
            assert!(s.value().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn model3_shares_model1_shared_half() {
        // with identical shared parameters, Model-III task features restricted
        // to their shared half equal Model-I's shared half
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let m1 = tiny_model(ArchitectureKind::ModelI, 2, &mut rng);
        let mut m3 = m1.clone();
        m3.arch = ArchitectureKind::ModelIII;
        // Model-III private towers have a wider input
        let mut rng2 = ChaCha20Rng::seed_from_u64(5);
        m3.private = (0..2)
            .map(|_| BiLstmParams::new_random(m3.arch.private_d_in(m3.d_emb(), 3), 3, -0.3, 0.3, &mut rng2))
            .collect();

        let sent = sentence(&[2, 3, 4], &[0, 1, 2]);
        let shared_of = |model: &SharedPrivateModel| {
            let tape = Tape::new();
            let vars = model.bind(&tape, |_| true);
            let mut rng = ChaCha20Rng::seed_from_u64(0);
            let embedded = vars.embed(&sent, false, 1.0, &mut rng).unwrap();
            let (features, shared) = forward_features(&vars, &embedded, 0).unwrap();
            (
                features.iter().map(|f| f.value()[..6].to_vec()).collect::<Vec<_>>(),
                shared.iter().map(|s| s.value()).collect::<Vec<_>>(),
            )
        };
        let (f1, s1) = shared_of(&m1);
        let (f3, s3) = shared_of(&m3);
        assert_eq!(s1, s3);
        assert_eq!(f1, f3);
    }

    #[test]
    fn discriminator_uniform_at_zero_params() {
        let model = zero_model(ArchitectureKind::ModelI, 4);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let states: Vec<_> = (0..3)
            .map(|_| tape.constant(1, 6, vec![0.2; 6]).unwrap())
            .collect();
        let p = discriminator_forward(&states, &vars.w_d, &vars.b_d).unwrap();
        for v in p.value() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn discriminator_mean_is_order_invariant() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let model = tiny_model(ArchitectureKind::ModelI, 3, &mut rng);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let states: Vec<_> = rows
            .iter()
            .map(|r| tape.constant(1, 6, r.clone()).unwrap())
            .collect();
        let permuted: Vec<_> = [2, 0, 3, 1]
            .iter()
            .map(|&i| states[i])
            .collect();
        let p1 = discriminator_forward(&states, &vars.w_d, &vars.b_d).unwrap();
        let p2 = discriminator_forward(&permuted, &vars.w_d, &vars.b_d).unwrap();
        let (a, b) = (p1.value(), p2.value());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discriminator_empty_rejected() {
        let model = zero_model(ArchitectureKind::ModelI, 2);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        assert!(discriminator_forward(&[], &vars.w_d, &vars.b_d).is_err());
    }

    #[test]
    fn loss_seg_zero_model_single_char() {
        let model = zero_model(ArchitectureKind::ModelI, 2);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = [sentence(&[2], &[3])];
        let l = loss_seg(&vars, &batch, 0, false, 1.0, &mut rng).unwrap();
        assert!((l.scalar_value() + 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_seg_is_additive_over_batch() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let model = tiny_model(ArchitectureKind::ModelIII, 2, &mut rng);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let s = sentence(&[2, 4, 5], &[0, 1, 2]);
        let one = loss_seg(&vars, &[s.clone()], 1, false, 1.0, &mut rng).unwrap();
        let two = loss_seg(&vars, &[s.clone(), s], 1, false, 1.0, &mut rng).unwrap();
        assert!((two.scalar_value() - 2.0 * one.scalar_value()).abs() < 1e-10);
    }

    #[test]
    fn loss_seg_rejects_empty_batch() {
        let model = zero_model(ArchitectureKind::ModelI, 1);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(loss_seg(&vars, &[], 0, false, 1.0, &mut rng).is_err());
    }

    #[test]
    fn loss_adv_discriminator_zero_model() {
        let model = zero_model(ArchitectureKind::ModelI, 4);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = [sentence(&[2], &[0]), sentence(&[3, 4], &[0, 2])];
        let l = loss_adv_discriminator(&vars, &batch, 1, false, 1.0, &mut rng).unwrap();
        assert!((l.scalar_value() + 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        // H(uniform over M) = ln M; H(one-hot) = 0
        for m in [2usize, 4, 8] {
            let p: Vec<f64> = vec![1.0 / m as f64; m];
            let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
            assert!((h - (m as f64).ln()).abs() < 1e-12);
        }
        let onehot = [1.0f64, 0.0, 0.0];
        let h: f64 = -onehot
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|x| x * x.ln())
            .sum::<f64>();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn loss_adv_entropy_zero_model_is_ln_m() {
        let model = zero_model(ArchitectureKind::ModelI, 4);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = [sentence(&[2, 3], &[0, 2])];
        let l = loss_adv_entropy(&vars, &batch, false, 1.0, &mut rng).unwrap();
        assert!((l.scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounded_by_ln_m() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        for m in [2usize, 4, 8] {
            let model = tiny_model(ArchitectureKind::ModelI, m, &mut rng);
            let tape = Tape::new();
            let vars = model.bind(&tape, |_| true);
            let batch = [sentence(&[2, 3, 4], &[0, 1, 2])];
            let l = loss_adv_entropy(&vars, &batch, false, 1.0, &mut rng).unwrap();
            assert!(l.scalar_value() <= (m as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn combined_objective_composes() {
        let model = zero_model(ArchitectureKind::ModelI, 4);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = [sentence(&[2], &[1])];
        let lam = 0.05;
        let j = combined_objective(&vars, &batch, 0, lam, false, 1.0, &mut rng).unwrap();
        let expect = -4.0f64.ln() - 4.0f64.ln() + lam * 4.0f64.ln();
        assert!((j.scalar_value() - expect).abs() < 1e-12);

        let j0 = combined_objective(&vars, &batch, 0, 0.0, false, 1.0, &mut rng).unwrap();
        let seg = loss_seg(&vars, &batch, 0, false, 1.0, &mut rng).unwrap();
        let disc = loss_adv_discriminator(&vars, &batch, 0, false, 1.0, &mut rng).unwrap();
        assert!((j0.scalar_value() - seg.scalar_value() - disc.scalar_value()).abs() < 1e-12);
    }

    #[test]
    fn entropy_has_no_gradient_on_private_or_discriminator_path() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let model = tiny_model(ArchitectureKind::ModelI, 2, &mut rng);
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let batch = [sentence(&[2, 3], &[0, 2])];
        let l = loss_adv_entropy(&vars, &batch, false, 1.0, &mut rng).unwrap();
        tape.backward(l).unwrap();
        for p in &vars.private {
            assert!(p.forward.w_g.grad().iter().all(|&g| g == 0.0));
        }
        for h in &vars.heads {
            assert!(h.w_s.grad().iter().all(|&g| g == 0.0));
        }
        // shared parameters do receive gradient
        assert!(vars.shared.forward.w_g.grad().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn loss_seg_gradients_match_finite_differences_all_architectures() {
        let batch = [sentence(&[2, 3, 4], &[0, 2, 3]), sentence(&[5, 2], &[0, 2])];
        for arch in [
            ArchitectureKind::ModelI,
            ArchitectureKind::ModelII,
            ArchitectureKind::ModelIII,
        ] {
            let mut rng = ChaCha20Rng::seed_from_u64(10);
            let model = tiny_model(arch, 2, &mut rng);
            let value = |model: &SharedPrivateModel| -> crate::error::Result<f64> {
                let tape = Tape::new();
                let vars = model.bind(&tape, |_| true);
                let mut r = ChaCha20Rng::seed_from_u64(0);
                Ok(loss_seg(&vars, &batch, 0, false, 1.0, &mut r)?.scalar_value())
            };

            let tape = Tape::new();
            let vars = model.bind(&tape, |_| true);
            let mut r = ChaCha20Rng::seed_from_u64(0);
            let l = loss_seg(&vars, &batch, 0, false, 1.0, &mut r).unwrap();
            tape.backward(l).unwrap();
            let grads: Vec<Vec<f64>> = vars.binding_list().iter().map(|v| v.grad()).collect();

            for (idx, (name, group, tensor)) in model.params().into_iter().enumerate() {
                // criterion 1's tower and the discriminator are untouched
                let expect_zero = matches!(group, ParamGroup::Private(1) | ParamGroup::Discriminator);
                if expect_zero {
                    assert!(grads[idx].iter().all(|&g| g == 0.0), "{arch:?} {name}");
                    continue;
                }
                let fd = finite_difference_gradient(
                    |probe| {
                        let mut m2 = model.clone();
                        for (n2, _, t2) in m2.params_mut() {
                            if n2 == name {
                                *t2 = probe.clone().with_grad();
                            }
                        }
                        value(&m2)
                    },
                    tensor,
                    1e-5,
                )
                .unwrap();
                let err = max_relative_error(&grads[idx], fd.data());
                assert!(err < 1e-4, "{arch:?} {name}: rel err {err}");
            }
        }
    }

    #[test]
    fn vocab_pipeline_smoke() {
        // end-to-end: corpus → vocab → encode → loss under a real model
        let train = vec![
            TaggedSentence::from_words(&["ab", "1"]).unwrap(),
            TaggedSentence::from_words(&["a", "b1"]).unwrap(),
        ];
        let corpus = CriterionCorpus::new("t", train, vec![], vec![]);
        let vocab = build_vocab(&[corpus.clone()], 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let embedding = EmbeddingTable::new_random(vocab.n_chars(), vocab.n_bigrams(), 3, -0.3, 0.3, &mut rng);
        let model = SharedPrivateModel::new(
            ArchitectureKind::ModelI,
            vec!["t".into()],
            embedding,
            3,
            true,
            -0.3,
            0.3,
            &mut rng,
        );
        let tape = Tape::new();
        let vars = model.bind(&tape, |_| true);
        let batch: Vec<_> = corpus.train.iter().map(|s| vocab.encode(s)).collect();
        let l = loss_seg(&vars, &batch, 0, false, 1.0, &mut rng).unwrap();
        assert!(l.scalar_value() < 0.0);
    }
}
