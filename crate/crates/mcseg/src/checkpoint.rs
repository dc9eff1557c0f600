//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE JSON header length,
//! the JSON header, then every tensor's values as little-endian `f64` in
//! header order. The header records the architecture, criteria, vocabulary,
//! and each tensor's name and shape, so a load can validate before touching
//! the blob.

use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::CrfHead;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::layers::{BiLstmParams, EmbeddingTable, LstmParams};
use crate::multitask::{ArchitectureKind, DiscriminatorParams, SharedPrivateModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MCSEGCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchitectureKind,
    d_e: usize,
    d_h: usize,
    use_bigram: bool,
    criteria: Vec<String>,
    vocab: Vocabulary,
    vocab_hash: String,
    tensors: Vec<TensorMeta>,
}

/// Write a model (and the vocabulary it was trained with) to `path`.
pub fn save(path: &Path, model: &SharedPrivateModel, vocab: &Vocabulary) -> Result<()> {
    let params = model.params();
    let header = Header {
        arch: model.arch,
        d_e: model.embedding.d_e,
        d_h: model.d_h,
        use_bigram: model.use_bigram,
        criteria: model.criteria.clone(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        tensors: params
            .iter()
            .map(|(name, _, t)| TensorMeta {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Invalid(format!("header encode: {e}")))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, _, t) in &params {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a model and vocabulary. Fails on a bad magic, unsupported version,
/// shape mismatch, truncated blob, or non-finite values.
pub fn load(path: &Path) -> Result<(SharedPrivateModel, Vocabulary)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data(format!("{}: not a checkpoint file", path.display())));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut v8 = [0u8; 8];
    r.read_exact(&mut v8)?;
    let header_len = u64::from_le_bytes(v8) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n = meta.rows * meta.cols;
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| {
            Error::Data(format!("checkpoint truncated while reading tensor {}", meta.name))
        })?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint tensor"));
        }
        tensors.push(Tensor::from_vec(meta.rows, meta.cols, data)?.with_grad());
    }

    let model = assemble(&header, tensors)?;
    if header.vocab.hash() != header.vocab_hash {
        return Err(Error::Data("checkpoint vocabulary hash mismatch".into()));
    }
    Ok((model, header.vocab))
}

fn take(
    iter: &mut std::vec::IntoIter<Tensor>,
    metas: &mut std::slice::Iter<'_, TensorMeta>,
    want: &str,
) -> Result<Tensor> {
    let meta = metas
        .next()
        .ok_or_else(|| Error::Data(format!("checkpoint missing tensor {want}")))?;
    if meta.name != want {
        return Err(Error::Data(format!(
            "checkpoint tensor order mismatch: expected {want}, found {}",
            meta.name
        )));
    }
    iter.next()
        .ok_or_else(|| Error::Data(format!("checkpoint missing data for {want}")))
}

fn assemble(header: &Header, tensors: Vec<Tensor>) -> Result<SharedPrivateModel> {
    let m = header.criteria.len();
    if header.tensors.len() != 6 + 7 * m + 2 {
        return Err(Error::Data(format!(
            "checkpoint has {} tensors; {} criteria need {}",
            header.tensors.len(),
            m,
            6 + 7 * m + 2
        )));
    }
    let mut it = tensors.into_iter();
    let mut metas = header.tensors.iter();
    let d_h = header.d_h;

    let unigram = take(&mut it, &mut metas, "embedding.unigram")?;
    let bigram = take(&mut it, &mut metas, "embedding.bigram")?;
    let embedding = EmbeddingTable {
        unigram,
        bigram,
        d_e: header.d_e,
    };
    let bilstm = |prefix: &str, it: &mut std::vec::IntoIter<Tensor>, metas: &mut std::slice::Iter<'_, TensorMeta>| -> Result<BiLstmParams> {
        Ok(BiLstmParams {
            forward: LstmParams {
                w_g: take(it, metas, &format!("{prefix}.fwd.w_g"))?,
                b_g: take(it, metas, &format!("{prefix}.fwd.b_g"))?,
                d_h,
            },
            backward: LstmParams {
                w_g: take(it, metas, &format!("{prefix}.bwd.w_g"))?,
                b_g: take(it, metas, &format!("{prefix}.bwd.b_g"))?,
                d_h,
            },
        })
    };
    let shared = bilstm("shared", &mut it, &mut metas)?;
    let mut private = Vec::with_capacity(m);
    for i in 0..m {
        private.push(bilstm(&format!("private.{i}"), &mut it, &mut metas)?);
    }
    let mut heads = Vec::with_capacity(m);
    for i in 0..m {
        heads.push(CrfHead {
            w_s: take(&mut it, &mut metas, &format!("head.{i}.w_s"))?,
            b_s: take(&mut it, &mut metas, &format!("head.{i}.b_s"))?,
            transitions: take(&mut it, &mut metas, &format!("head.{i}.transitions"))?,
        });
    }
    let discriminator = DiscriminatorParams {
        w_d: take(&mut it, &mut metas, "disc.w_d")?,
        b_d: take(&mut it, &mut metas, "disc.b_d")?,
    };

    let model = SharedPrivateModel {
        arch: header.arch,
        d_h,
        use_bigram: header.use_bigram,
        criteria: header.criteria.clone(),
        embedding,
        shared,
        private,
        heads,
        discriminator,
    };
    // shape sanity against the architecture
    let d_emb = model.d_emb();
    if model.shared.forward.w_g.rows() != d_emb + d_h
        || model.heads.iter().any(|h| h.w_s.rows() != model.arch.d_feat(d_h))
    {
        return Err(Error::Data("checkpoint tensor shapes inconsistent with header".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, generate_synthetic_corpora, SegRule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::io::{Seek, SeekFrom};

    fn sample() -> (SharedPrivateModel, Vocabulary) {
        let corpora =
            generate_synthetic_corpora(8, 10, &[SegRule::ClassRuns, SegRule::SplitDigits], 1).unwrap();
        let vocab = build_vocab(&corpora, 1).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let embedding =
            EmbeddingTable::new_random(vocab.n_chars(), vocab.n_bigrams(), 4, -0.1, 0.1, &mut rng);
        let model = SharedPrivateModel::new(
            ArchitectureKind::ModelIII,
            corpora.iter().map(|c| c.name.clone()).collect(),
            embedding,
            4,
            true,
            -0.1,
            0.1,
            &mut rng,
        );
        (model, vocab)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let (model, vocab) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &model, &vocab).unwrap();
        let (loaded, loaded_vocab) = load(&path).unwrap();
        assert_eq!(loaded.arch, model.arch);
        assert_eq!(loaded.criteria, model.criteria);
        assert_eq!(loaded_vocab.hash(), vocab.hash());
        for ((n1, _, t1), (n2, _, t2)) in model.params().iter().zip(loaded.params().iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "{n1}");
            assert!(t2.requires_grad());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("not a checkpoint"), "{err}");
    }

    #[test]
    fn rejects_wrong_version() {
        let (model, vocab) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save(&path, &model, &vocab).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(8)).unwrap();
        f.write_all(&999u32.to_le_bytes()).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncation() {
        let (model, vocab) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save(&path, &model, &vocab).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn loaded_model_decodes_identically() {
        let (model, vocab) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save(&path, &model, &vocab).unwrap();
        let (loaded, _) = load(&path).unwrap();
        let sent = vocab.encode_chars(&['a', '1', 'b']);
        let a = crate::training::decode_sentence(&model, &sent, 0).unwrap();
        let b = crate::training::decode_sentence(&loaded, &sent, 0).unwrap();
        assert_eq!(a, b);
    }
}
