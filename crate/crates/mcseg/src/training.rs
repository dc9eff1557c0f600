//! Optimization: Adam (ascent form), the alternating adversarial schedule,
//! the two-phase training procedure, and knowledge transfer to a new
//! criterion with the shared tower frozen.
//!
//! All objectives here are maximized, so the Adam update adds the step:
//! θ += α·m̂/(√v̂+ε). Gradient routing is done by binding only the parameter
//! groups an objective is declared over; everything else enters the tape as
//! a constant.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as IoWrite;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crf;
use crate::data::{bmes_to_spans, CriterionCorpus, EncodedSentence, TaggedSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{score, SegmentationScore};
use crate::layers::BiLstmParams;
use crate::multitask::{
    loss_adv_discriminator, loss_adv_entropy, loss_seg, ArchitectureKind, ParamGroup,
    SharedPrivateModel,
};
use crate::tensor::{Tape, Tensor};

fn default_d_e() -> usize {
    100
}
fn default_d_h() -> usize {
    100
}
fn default_true() -> bool {
    true
}
fn default_arch() -> ArchitectureKind {
    ArchitectureKind::ModelIII
}
fn default_lr() -> f64 {
    0.01
}
fn default_lambda() -> f64 {
    0.05
}
fn default_keep() -> f64 {
    0.8
}
fn default_init() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_phase1() -> usize {
    2400
}
fn default_phase2() -> usize {
    2000
}
fn default_eval_every() -> usize {
    20
}
fn default_patience() -> usize {
    10
}
fn default_batch() -> usize {
    128
}
fn default_seed() -> u64 {
    42
}
fn default_min_freq() -> usize {
    1
}

/// Full training configuration. Loadable from TOML; unknown keys are
/// rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_arch")]
    pub architecture: ArchitectureKind,
    #[serde(default = "default_d_e")]
    pub d_e: usize,
    #[serde(default = "default_d_h")]
    pub d_h: usize,
    #[serde(default = "default_true")]
    pub use_bigram: bool,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_keep")]
    pub keep_rate: f64,
    /// Parameters start from U(−init_scale, init_scale).
    #[serde(default = "default_init")]
    pub init_scale: f64,
    #[serde(default = "default_true")]
    pub adversarial: bool,
    /// Phase-1 epochs (fixed count, no early stopping).
    #[serde(default = "default_phase1")]
    pub phase1_epochs: usize,
    /// Phase-2 epoch budget; early stopping may end it sooner.
    #[serde(default = "default_phase2")]
    pub phase2_max_epochs: usize,
    /// Dev evaluation cadence during phase 2, in epochs.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Evaluations without dev-F improvement before stopping phase 2.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    /// Per-criterion batch sizes; criteria not listed use `batch_size`.
    #[serde(default)]
    pub batch_sizes: BTreeMap<String, usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_min_freq")]
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("d_e", self.d_e as f64),
            ("d_h", self.d_h as f64),
            ("learning_rate", self.learning_rate),
            ("batch_size", self.batch_size as f64),
            ("eval_every", self.eval_every as f64),
        ];
        for (name, v) in positives {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0 < self.keep_rate && self.keep_rate <= 1.0) {
            return Err(Error::Config(format!(
                "keep_rate must be in (0, 1], got {}",
                self.keep_rate
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.init_scale <= 0.0 {
            return Err(Error::Config(format!(
                "init_scale must be positive, got {}",
                self.init_scale
            )));
        }
        for (b, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{b} must be in [0, 1), got {v}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some((name, &v)) = self.batch_sizes.iter().find(|(_, &v)| v == 0) {
            return Err(Error::Config(format!("batch size for {name:?} must be positive, got {v}")));
        }
        Ok(())
    }

    pub fn batch_size_for(&self, criterion: &str) -> usize {
        self.batch_sizes.get(criterion).copied().unwrap_or(self.batch_size)
    }
}

/// Per-parameter Adam accumulators.
#[derive(Clone, Debug, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam in ascent form, keyed by canonical parameter name so that slots
/// survive between tapes.
#[derive(Clone, Debug)]
pub struct Adam {
    alpha: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    slots: HashMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(alpha: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam {
            alpha,
            beta1,
            beta2,
            epsilon,
            slots: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// Apply one ascent step to every parameter whose group passes the
    /// filter. Gradients must have been written back first.
    pub fn step(
        &mut self,
        model: &mut SharedPrivateModel,
        filter: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        for (name, group, tensor) in model.params_mut() {
            if !filter(group) {
                continue;
            }
            let n = tensor.len();
            // a parameter the objective never touched has no gradient slot;
            // that is a zero gradient, not an error
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; n],
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite("adam gradient"));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if slot.m.len() != n {
                return Err(Error::Invalid(format!(
                    "parameter {name} changed size: {} vs {}",
                    slot.m.len(),
                    n
                )));
            }
            slot.t += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.t as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.t as i32);
            let data = tensor.data_mut();
            for i in 0..n {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] += self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One criterion's data, encoded and ready for training.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub name: String,
    pub train: Vec<EncodedSentence>,
    pub dev_gold: Vec<TaggedSentence>,
    pub dev_enc: Vec<EncodedSentence>,
    pub test_gold: Vec<TaggedSentence>,
    pub test_enc: Vec<EncodedSentence>,
    pub train_words: std::collections::HashSet<String>,
}

/// Encode every split of every corpus under one vocabulary. Empty sentences
/// are dropped from the training split.
pub fn prepare_tasks(corpora: &[CriterionCorpus], vocab: &Vocabulary) -> Vec<PreparedTask> {
    corpora
        .iter()
        .map(|c| PreparedTask {
            name: c.name.clone(),
            train: c
                .train
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| vocab.encode(s))
                .collect(),
            dev_gold: c.dev.iter().filter(|s| !s.is_empty()).cloned().collect(),
            dev_enc: c
                .dev
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| vocab.encode(s))
                .collect(),
            test_gold: c.test.iter().filter(|s| !s.is_empty()).cloned().collect(),
            test_enc: c
                .test
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| vocab.encode(s))
                .collect(),
            train_words: c.train_word_set.clone(),
        })
        .collect()
}

/// Decode one encoded sentence under criterion `m` with the model in
/// inference mode. The Viterbi tag sequence is repaired into spans.
pub fn decode_sentence(
    model: &SharedPrivateModel,
    sent: &EncodedSentence,
    m: usize,
) -> Result<Vec<(usize, usize)>> {
    if sent.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let vars = model.bind(&tape, |_| false);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let embedded = vars.embed(sent, false, 1.0, &mut rng)?;
    let (features, _) = crate::multitask::forward_features(&vars, &embedded, m)?;
    let scores = crf::emission_scores(&features, &vars.heads[m])?;
    let tags = crf::viterbi_decode(&scores.to_tensor(), &model.heads[m].transitions)?;
    Ok(bmes_to_spans(&tags))
}

/// Decode a list of sentences, pairing each with its gold chars to build
/// comparable [`TaggedSentence`]s.
pub fn decode_corpus(
    model: &SharedPrivateModel,
    gold: &[TaggedSentence],
    enc: &[EncodedSentence],
    m: usize,
) -> Result<Vec<TaggedSentence>> {
    gold.iter()
        .zip(enc)
        .map(|(g, e)| {
            let spans = decode_sentence(model, e, m)?;
            TaggedSentence::from_spans(g.chars.clone(), spans)
        })
        .collect()
}

/// Dev-set score for one task.
pub fn eval_dev(model: &SharedPrivateModel, task: &PreparedTask, m: usize) -> Result<SegmentationScore> {
    let pred = decode_corpus(model, &task.dev_gold, &task.dev_enc, m)?;
    score(&task.dev_gold, &pred, &task.train_words)
}

/// Test-set score for one task.
pub fn eval_test(model: &SharedPrivateModel, task: &PreparedTask, m: usize) -> Result<SegmentationScore> {
    let pred = decode_corpus(model, &task.test_gold, &task.test_enc, m)?;
    score(&task.test_gold, &pred, &task.train_words)
}

/// Mean dev F1 across tasks (the early-stopping signal).
pub fn mean_dev_f(model: &SharedPrivateModel, tasks: &[PreparedTask]) -> Result<f64> {
    let mut total = 0.0;
    for (m, t) in tasks.iter().enumerate() {
        total += eval_dev(model, t, m)?.f1;
    }
    Ok(total / tasks.len() as f64)
}

/// Objective values and discriminator accuracy observed over one epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-sentence log-likelihood (J_seg / #sentences).
    pub j_seg: f64,
    /// Mean per-sentence discriminator log-likelihood, if phase B ran.
    pub j_adv_disc: f64,
    /// Mean per-sentence discriminator entropy, if the entropy term ran.
    pub j_entropy: f64,
    /// Discriminator argmax accuracy over the epoch's sentences.
    pub disc_accuracy: f64,
    pub n_sentences: usize,
    /// Phase-A batches this epoch (one per criterion).
    pub n_batches: usize,
}

/// Discriminator argmax accuracy over a set of sentences with known
/// criterion labels.
pub fn discriminator_accuracy(
    model: &SharedPrivateModel,
    tasks: &[PreparedTask],
    split: impl Fn(&PreparedTask) -> Vec<EncodedSentence>,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.bind(&tape, |_| false);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (m, task) in tasks.iter().enumerate() {
        for sent in split(task) {
            if sent.is_empty() {
                continue;
            }
            let embedded = vars.embed(&sent, false, 1.0, &mut rng)?;
            let states = crate::layers::bilstm_forward(&embedded, &vars.shared)?;
            let p = crate::multitask::discriminator_forward(&states, &vars.w_d, &vars.b_d)?;
            let probs = p.value();
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == m {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no sentences to score discriminator on".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Without-replacement batch sampler for one criterion: a shuffled pass
/// over the training sentences, reshuffled on exhaustion. State persists
/// across epochs so every sentence is visited before any repeats.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(n: usize, rng: &mut ChaCha20Rng) -> Result<Self> {
        if n == 0 {
            return Err(Error::Data("cannot sample batches from an empty corpus".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Ok(BatchSampler { order, cursor: 0 })
    }

    /// Next batch of up to `batch_size` indices; the tail of a pass may be
    /// shorter.
    pub fn next_batch(&mut self, batch_size: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}

/// One sampler per task, in task order.
pub fn make_samplers(tasks: &[PreparedTask], rng: &mut ChaCha20Rng) -> Result<Vec<BatchSampler>> {
    tasks.iter().map(|t| BatchSampler::new(t.train.len(), rng)).collect()
}

/// Phase A of the alternating schedule on one batch: maximize
/// J_seg + λ·J²_adv over Θ^s and Θ^m (criterion `m`), Θ^d held constant.
/// With `adversarial` off the entropy term is skipped.
pub fn phase_a_step(
    model: &mut SharedPrivateModel,
    opt: &mut Adam,
    batch: &[EncodedSentence],
    m: usize,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, f64)> {
    model.zero_grads();
    let trainable = |g: ParamGroup| matches!(g, ParamGroup::Shared) || g == ParamGroup::Private(m);
    let tape = Tape::new();
    let vars = model.bind(&tape, trainable);
    let seg = loss_seg(&vars, batch, m, true, config.keep_rate, rng)?;
    let (objective, ent_value) = if config.adversarial && config.lambda > 0.0 {
        let ent = loss_adv_entropy(&vars, batch, true, config.keep_rate, rng)?;
        (seg.add(&ent.scale(config.lambda))?, ent.scalar_value())
    } else {
        (seg, 0.0)
    };
    let seg_value = seg.scalar_value();
    tape.backward(objective)?;
    model.write_grads(&vars);
    opt.step(model, trainable)?;
    Ok((seg_value, ent_value))
}

/// Phase B on one batch: maximize J¹_adv = Σ log p(m|X) over Θ^d only.
pub fn phase_b_step(
    model: &mut SharedPrivateModel,
    opt: &mut Adam,
    batch: &[EncodedSentence],
    m: usize,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    model.zero_grads();
    let trainable = |g: ParamGroup| g == ParamGroup::Discriminator;
    let tape = Tape::new();
    let vars = model.bind(&tape, trainable);
    let disc = loss_adv_discriminator(&vars, batch, m, true, config.keep_rate, rng)?;
    let value = disc.scalar_value();
    tape.backward(disc)?;
    model.write_grads(&vars);
    opt.step(model, trainable)?;
    Ok(value)
}

/// A segmentation-only step restricted to criterion `m`'s private tower and
/// head (phase 2 and transfer training).
pub fn private_only_step(
    model: &mut SharedPrivateModel,
    opt: &mut Adam,
    batch: &[EncodedSentence],
    m: usize,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    model.zero_grads();
    let trainable = |g: ParamGroup| g == ParamGroup::Private(m);
    let tape = Tape::new();
    let vars = model.bind(&tape, trainable);
    let seg = loss_seg(&vars, batch, m, true, config.keep_rate, rng)?;
    let value = seg.scalar_value();
    tape.backward(seg)?;
    model.write_grads(&vars);
    opt.step(model, trainable)?;
    Ok(value)
}

fn gather_batch(task: &PreparedTask, idx: &[usize]) -> Vec<EncodedSentence> {
    idx.iter().map(|&i| task.train[i].clone()).collect()
}

/// One epoch of the alternating schedule: Phase A draws one batch per
/// criterion and updates Θ^s ∪ Θ^m; with adversarial training on, Phase B
/// then draws one fresh batch per criterion and updates Θ^d. An epoch
/// therefore touches exactly M batches per phase.
pub fn train_epoch(
    model: &mut SharedPrivateModel,
    opt: &mut Adam,
    disc_opt: &mut Adam,
    samplers: &mut [BatchSampler],
    tasks: &[PreparedTask],
    config: &TrainConfig,
    epoch: usize,
    rng: &mut ChaCha20Rng,
) -> Result<EpochReport> {
    if tasks.is_empty() || samplers.len() != tasks.len() {
        return Err(Error::Data("task/sampler mismatch in train_epoch".into()));
    }
    let mut report = EpochReport {
        epoch,
        ..Default::default()
    };
    let mut disc_sentences = 0usize;
    for (m, task) in tasks.iter().enumerate() {
        let idx = samplers[m].next_batch(config.batch_size_for(&task.name), rng);
        let batch = gather_batch(task, &idx);
        let (seg, ent) = phase_a_step(model, opt, &batch, m, config, rng)?;
        report.j_seg += seg;
        report.j_entropy += ent;
        report.n_sentences += batch.len();
        report.n_batches += 1;
    }
    if config.adversarial {
        for (m, task) in tasks.iter().enumerate() {
            let idx = samplers[m].next_batch(config.batch_size_for(&task.name), rng);
            let batch = gather_batch(task, &idx);
            report.j_adv_disc += phase_b_step(model, disc_opt, &batch, m, config, rng)?;
            disc_sentences += batch.len();
        }
    }
    let n = report.n_sentences as f64;
    report.j_seg /= n;
    report.j_entropy /= n;
    if disc_sentences > 0 {
        report.j_adv_disc /= disc_sentences as f64;
    }
    Ok(report)
}

/// Everything produced by a training run.
pub struct TrainOutcome {
    pub model: SharedPrivateModel,
    pub history: Vec<EpochReport>,
    /// (epoch, mean dev F) pairs observed during phase 2.
    pub dev_curve: Vec<(usize, f64)>,
    pub best_dev_f: f64,
}

/// Write one epoch report as a TSV row; `header` first when starting a log.
pub fn write_log_row(w: &mut dyn IoWrite, r: &EpochReport, dev_f: Option<f64>) -> Result<()> {
    writeln!(
        w,
        "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
        r.epoch,
        r.j_seg,
        r.j_adv_disc,
        r.j_entropy,
        dev_f.map(|f| format!("{f:.6}")).unwrap_or_else(|| "-".into())
    )?;
    Ok(())
}

pub fn write_log_header(w: &mut dyn IoWrite) -> Result<()> {
    writeln!(w, "epoch\tj_seg\tj_adv_disc\tj_entropy\tdev_f")?;
    Ok(())
}

/// The full two-phase procedure.
///
/// Phase 1 runs `phase1_epochs` of the alternating schedule (with the
/// adversarial terms when enabled). Phase 2 continues with J_seg only while
/// the shared tower, embeddings, and discriminator stay frozen; mean dev F
/// is evaluated every `eval_every` epochs and the best checkpoint is
/// returned, stopping after `patience` evaluations without improvement.
pub fn two_phase_train(
    mut model: SharedPrivateModel,
    tasks: &[PreparedTask],
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
    mut log: Option<&mut dyn IoWrite>,
) -> Result<TrainOutcome> {
    if tasks.len() != model.n_criteria() {
        return Err(Error::Invalid(format!(
            "{} tasks but model has {} criteria",
            tasks.len(),
            model.n_criteria()
        )));
    }
    let mut opt = Adam::from_config(config);
    let mut disc_opt = Adam::from_config(config);
    let mut samplers = make_samplers(tasks, rng)?;
    let mut history = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        write_log_header(w)?;
    }

    for epoch in 0..config.phase1_epochs {
        let report = train_epoch(
            &mut model,
            &mut opt,
            &mut disc_opt,
            &mut samplers,
            tasks,
            config,
            epoch,
            rng,
        )?;
        if let Some(w) = log.as_deref_mut() {
            write_log_row(w, &report, None)?;
        }
        history.push(report);
    }

    // phase 2: segmentation only, shared side frozen
    let mut best_model = model.clone();
    let mut best_f = mean_dev_f(&model, tasks)?;
    let mut dev_curve = vec![(config.phase1_epochs, best_f)];
    let mut since_best = 0usize;
    for e in 0..config.phase2_max_epochs {
        let epoch = config.phase1_epochs + e;
        let mut report = EpochReport {
            epoch,
            ..Default::default()
        };
        for (m, task) in tasks.iter().enumerate() {
            let idx = samplers[m].next_batch(config.batch_size_for(&task.name), rng);
            let batch = gather_batch(task, &idx);
            report.j_seg += private_only_step(&mut model, &mut opt, &batch, m, config, rng)?;
            report.n_sentences += batch.len();
            report.n_batches += 1;
        }
        report.j_seg /= report.n_sentences as f64;
        let mut dev_f = None;
        if (e + 1) % config.eval_every == 0 || e + 1 == config.phase2_max_epochs {
            let f = mean_dev_f(&model, tasks)?;
            dev_curve.push((epoch + 1, f));
            dev_f = Some(f);
            if f > best_f {
                best_f = f;
                best_model = model.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    if let Some(w) = log.as_deref_mut() {
                        write_log_row(w, &report, dev_f)?;
                    }
                    history.push(report);
                    break;
                }
            }
        }
        if let Some(w) = log.as_deref_mut() {
            write_log_row(w, &report, dev_f)?;
        }
        history.push(report);
    }

    Ok(TrainOutcome {
        model: best_model,
        history,
        dev_curve,
        best_dev_f: best_f,
    })
}

/// Transfer a trained model's shared tower (and embeddings) to a new
/// criterion. The shared side and the existing criteria's towers are
/// frozen; only the fresh private tower and CRF head train, on J_seg. The
/// discriminator gains a random column for the new criterion but does not
/// train.
pub fn transfer_train(
    source: &SharedPrivateModel,
    target: &PreparedTask,
    config: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<TrainOutcome> {
    let mut model = source.clone();
    let m_new = model.n_criteria();
    model.criteria.push(target.name.clone());
    let d_emb = model.d_emb();
    model.private.push(BiLstmParams::new_random(
        model.arch.private_d_in(d_emb, model.d_h),
        model.d_h,
        -config.init_scale,
        config.init_scale,
        rng,
    ));
    model.heads.push(crf::CrfHead::new_random(
        model.arch.d_feat(model.d_h),
        -config.init_scale,
        config.init_scale,
        rng,
    ));
    // widen the discriminator so its output dimension still matches the
    // criterion count
    let old = &model.discriminator.w_d;
    let (rows, cols) = (old.rows(), old.cols());
    let mut w = Tensor::zeros(rows, cols + 1);
    let mut b = Tensor::zeros(1, cols + 1);
    for r in 0..rows {
        for c in 0..cols {
            w.set(r, c, old.get(r, c));
        }
        w.set(r, cols, rng.gen_range(-config.init_scale..config.init_scale));
    }
    for c in 0..cols {
        b.set(0, c, model.discriminator.b_d.get(0, c));
    }
    b.set(0, cols, rng.gen_range(-config.init_scale..config.init_scale));
    model.discriminator.w_d = w.with_grad();
    model.discriminator.b_d = b.with_grad();

    let mut opt = Adam::from_config(config);
    let mut history = Vec::new();
    let mut best_model = model.clone();
    let mut best_f = eval_dev(&model, target, m_new)?.f1;
    let mut dev_curve = vec![(0usize, best_f)];
    let mut since_best = 0usize;
    let mut sampler = BatchSampler::new(target.train.len(), rng)?;
    for epoch in 0..config.phase2_max_epochs {
        let mut report = EpochReport {
            epoch,
            ..Default::default()
        };
        let idx = sampler.next_batch(config.batch_size_for(&target.name), rng);
        let batch = gather_batch(target, &idx);
        report.j_seg += private_only_step(&mut model, &mut opt, &batch, m_new, config, rng)?;
        report.n_sentences += batch.len();
        report.n_batches += 1;
        report.j_seg /= report.n_sentences as f64;
        history.push(report);
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.phase2_max_epochs {
            let f = eval_dev(&model, target, m_new)?.f1;
            dev_curve.push((epoch + 1, f));
            if f > best_f {
                best_f = f;
                best_model = model.clone();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
    }
    Ok(TrainOutcome {
        model: best_model,
        history,
        dev_curve,
        best_dev_f: best_f,
    })
}
