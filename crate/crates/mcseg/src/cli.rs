//! Command-line front end: `train`, `eval`, `segment`, and `gen-synth`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 data error.

use std::collections::HashMap;
use std::io::{BufRead, Write as IoWrite};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{
    build_vocab, generate_synthetic_corpora, read_segmented_corpus, split_dev,
    write_segmented_corpus, CriterionCorpus, SegRule, TaggedSentence,
};
use crate::error::{Error, Result};
use crate::layers::EmbeddingTable;
use crate::multitask::SharedPrivateModel;
use crate::training::{
    decode_corpus, eval_test, prepare_tasks, two_phase_train, TrainConfig,
};

#[derive(Parser)]
#[command(name = "mcseg", about = "Multi-criteria word segmentation toolkit", version)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on one or more segmentation criteria.
    Train(TrainArgs),
    /// Score a trained model against a gold corpus.
    Eval(EvalArgs),
    /// Segment raw text with a trained model.
    Segment(SegmentArgs),
    /// Generate synthetic multi-criteria corpora.
    GenSynth(GenSynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus as name=path; repeatable, one per criterion.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<String>,
    /// Optional dev corpus as name=path; criteria without one get a 10%
    /// split carved from their training data.
    #[arg(long = "dev")]
    dev: Vec<String>,
    /// Optional test corpus as name=path, recorded for final metrics.
    #[arg(long = "test")]
    test: Vec<String>,
    /// Output directory for the checkpoint, train log, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Gold corpus as name=path; the name selects the criterion head.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<String>,
    /// Training corpus as name=path for OOV bookkeeping (optional).
    #[arg(long = "train-corpus")]
    train_corpora: Vec<String>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// Criterion whose conventions to segment under.
    #[arg(long)]
    criterion: String,
    /// Input file of raw text, one sentence per line; "-" for stdin.
    #[arg(long, default_value = "-")]
    input: String,
    /// Output file; "-" for stdout.
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Sentences per criterion (train); test gets a fifth of this.
    #[arg(long, default_value_t = 500)]
    sentences: usize,
    /// Distinct letter characters in the synthetic alphabet.
    #[arg(long, default_value_t = 20)]
    alphabet: usize,
    /// Comma-separated rules: class-runs, split-digits, split-letters.
    #[arg(long, default_value = "class-runs,split-digits")]
    rules: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// A record of one training run, written next to its checkpoint.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub corpora: Vec<CorpusRecord>,
    pub vocab_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub best_dev_f: f64,
    pub test_scores: Vec<CriterionScore>,
}

#[derive(Serialize, Deserialize)]
pub struct CorpusRecord {
    pub name: String,
    pub path: String,
    pub sha256: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

#[derive(Serialize, Deserialize)]
pub struct CriterionScore {
    pub criterion: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub oov_recall: Option<f64>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Write JSON atomically: temp file in the same directory, then rename.
fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Invalid(format!("manifest encode: {e}")))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &json)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parse_named(args: &[String]) -> Result<Vec<(String, PathBuf)>> {
    args.iter()
        .map(|a| {
            let (name, path) = a.split_once('=').ok_or_else(|| {
                Error::Config(format!("expected name=path, got {a:?}"))
            })?;
            if name.is_empty() {
                return Err(Error::Config(format!("empty corpus name in {a:?}")));
            }
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn rule_from_name(name: &str) -> Result<SegRule> {
    match name {
        "class-runs" => Ok(SegRule::ClassRuns),
        "split-digits" => Ok(SegRule::SplitDigits),
        "split-letters" => Ok(SegRule::SplitLetters),
        other => Err(Error::Config(format!("unknown rule {other:?}"))),
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let started = unix_now();
    let config = match &args.config {
        Some(p) => TrainConfig::from_path(p)?,
        None => TrainConfig::default(),
    };
    let train_paths = parse_named(&args.corpora)?;
    let dev_paths: HashMap<String, PathBuf> = parse_named(&args.dev)?.into_iter().collect();
    let test_paths: HashMap<String, PathBuf> = parse_named(&args.test)?.into_iter().collect();

    let mut corpora = Vec::new();
    let mut records = Vec::new();
    for (name, path) in &train_paths {
        let train_all = read_segmented_corpus(path)?;
        let (train, dev) = match dev_paths.get(name) {
            Some(p) => (train_all, read_segmented_corpus(p)?),
            None => split_dev(&train_all, 0.1, config.seed)?,
        };
        let test = match test_paths.get(name) {
            Some(p) => read_segmented_corpus(p)?,
            None => Vec::new(),
        };
        records.push(CorpusRecord {
            name: name.clone(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            n_train: train.len(),
            n_dev: dev.len(),
            n_test: test.len(),
        });
        corpora.push(CriterionCorpus::new(name.clone(), train, dev, test));
    }

    let vocab = build_vocab(&corpora, config.min_freq)?;
    let tasks = prepare_tasks(&corpora, &vocab);
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let embedding = EmbeddingTable::new_random(
        vocab.n_chars(),
        vocab.n_bigrams(),
        config.d_e,
        -config.init_scale,
        config.init_scale,
        &mut rng,
    );
    let model = SharedPrivateModel::new(
        config.architecture,
        tasks.iter().map(|t| t.name.clone()).collect(),
        embedding,
        config.d_h,
        config.use_bigram,
        -config.init_scale,
        config.init_scale,
        &mut rng,
    );

    std::fs::create_dir_all(&args.out_dir)?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(args.out_dir.join("train_log.tsv"))?);
    let outcome = two_phase_train(model, &tasks, &config, &mut rng, Some(&mut log))?;
    log.flush()?;

    checkpoint::save(&args.out_dir.join("model.ckpt"), &outcome.model, &vocab)?;

    let mut test_scores = Vec::new();
    for (m, task) in tasks.iter().enumerate() {
        if task.test_gold.is_empty() {
            continue;
        }
        let s = eval_test(&outcome.model, task, m)?;
        test_scores.push(CriterionScore {
            criterion: task.name.clone(),
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            oov_recall: s.oov_recall,
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        config,
        corpora: records,
        vocab_hash: vocab.hash(),
        started_unix: started,
        finished_unix: unix_now(),
        best_dev_f: outcome.best_dev_f,
        test_scores,
    };
    write_json_atomic(&args.out_dir.join("manifest.json"), &manifest)?;
    eprintln!(
        "trained {} epochs, best dev F {:.4}; artifacts in {}",
        manifest.config.phase1_epochs,
        manifest.best_dev_f,
        args.out_dir.display()
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load(&args.model)?;
    let train_paths: HashMap<String, PathBuf> =
        parse_named(&args.train_corpora)?.into_iter().collect();
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion\tprecision\trecall\tf1\toov_recall")?;
    for (name, path) in parse_named(&args.corpora)? {
        let m = model.criterion_index(&name).ok_or_else(|| {
            Error::Config(format!(
                "model has no criterion {name:?}; available: {:?}",
                model.criteria
            ))
        })?;
        let gold = read_segmented_corpus(&path)?;
        let train_words: std::collections::HashSet<String> = match train_paths.get(&name) {
            Some(p) => read_segmented_corpus(p)?
                .iter()
                .flat_map(|s| s.words())
                .collect(),
            None => Default::default(),
        };
        let gold: Vec<TaggedSentence> = gold.into_iter().filter(|s| !s.is_empty()).collect();
        let enc: Vec<_> = gold.iter().map(|s| vocab.encode(s)).collect();
        let pred = decode_corpus(&model, &gold, &enc, m)?;
        let s = crate::eval::score(&gold, &pred, &train_words)?;
        writeln!(
            out,
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{}",
            s.precision,
            s.recall,
            s.f1,
            s.oov_recall.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into())
        )?;
    }
    Ok(())
}

fn run_segment(args: &SegmentArgs) -> Result<()> {
    let (model, vocab) = checkpoint::load(&args.model)?;
    let m = model.criterion_index(&args.criterion).ok_or_else(|| {
        Error::Config(format!(
            "model has no criterion {:?}; available: {:?}",
            args.criterion, model.criteria
        ))
    })?;
    let input: Box<dyn BufRead> = if args.input == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        Box::new(std::io::BufReader::new(std::fs::File::open(&args.input)?))
    };
    let mut output: Box<dyn IoWrite> = if args.output == "-" {
        Box::new(std::io::stdout().lock())
    } else {
        Box::new(std::io::BufWriter::new(std::fs::File::create(&args.output)?))
    };
    let start = Instant::now();
    let mut n_sentences = 0usize;
    for line in input.lines() {
        let line = line?;
        let chars: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
        if chars.is_empty() {
            writeln!(output)?;
            continue;
        }
        n_sentences += 1;
        let enc = vocab.encode_chars(&chars);
        let spans = crate::training::decode_sentence(&model, &enc, m)?;
        let sent = TaggedSentence::from_spans(chars, spans)?;
        writeln!(output, "{}", sent.to_line())?;
    }
    output.flush()?;
    let secs = start.elapsed().as_secs_f64();
    if n_sentences > 0 && secs > 0.0 {
        eprintln!(
            "segmented {n_sentences} sentences in {secs:.2}s ({:.2} sentences/s)",
            n_sentences as f64 / secs
        );
    }
    Ok(())
}

fn run_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let rules: Vec<SegRule> = args
        .rules
        .split(',')
        .map(|r| rule_from_name(r.trim()))
        .collect::<Result<_>>()?;
    let corpora = generate_synthetic_corpora(args.alphabet, args.sentences, &rules, args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;
    for c in &corpora {
        for (split, sentences) in [("train", &c.train), ("dev", &c.dev), ("test", &c.test)] {
            let path = args.out_dir.join(format!("{}.{split}.txt", c.name));
            write_segmented_corpus(&path, sentences)?;
        }
        eprintln!(
            "{}: {} train / {} dev / {} test sentences",
            c.name,
            c.train.len(),
            c.dev.len(),
            c.test.len()
        );
    }
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        _ => 1,
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version through this path too
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Segment(a) => run_segment(a),
        Command::GenSynth(a) => run_gen_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_named_accepts_pairs_and_rejects_garbage() {
        let ok = parse_named(&["as=/tmp/a.txt".into(), "msr=b.txt".into()]).unwrap();
        assert_eq!(ok[0].0, "as");
        assert_eq!(ok[1].1, PathBuf::from("b.txt"));
        assert!(parse_named(&["nopath".into()]).is_err());
        assert!(parse_named(&["=x".into()]).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for r in [SegRule::ClassRuns, SegRule::SplitDigits, SegRule::SplitLetters] {
            assert_eq!(rule_from_name(r.name()).unwrap(), r);
        }
        assert!(rule_from_name("bogus").is_err());
    }

    #[test]
    fn exit_codes_map_error_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Invalid("x".into())), 1);
    }

    #[test]
    fn usage_error_exits_2_help_exits_0() {
        assert_eq!(run(["mcseg", "not-a-command"]), 2);
        assert_eq!(run(["mcseg", "--help"]), 0);
    }

    #[test]
    fn manifest_write_is_atomic_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let manifest = RunManifest {
            tool_version: "0".into(),
            seed: 1,
            config: TrainConfig::default(),
            corpora: vec![],
            vocab_hash: "h".into(),
            started_unix: 10,
            finished_unix: 20,
            best_dev_f: 0.5,
            test_scores: vec![],
        };
        write_json_atomic(&path, &manifest).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let back: RunManifest =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back.seed, 1);
    }
}
