//! Word-level segmentation scoring: precision, recall, F1, and OOV recall.
//!
//! A predicted word counts as correct only if its exact span (start, end)
//! appears in the gold segmentation. OOV recall is recall restricted to gold
//! words absent from the training word set.

use std::collections::HashSet;

use crate::data::TaggedSentence;
use crate::error::{Error, Result};

/// Aggregated counts plus derived scores for one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall over gold words not present in the training word set; `None`
    /// when the gold side has no OOV words.
    pub oov_recall: Option<f64>,
    pub n_gold: usize,
    pub n_pred: usize,
    pub n_correct: usize,
    pub n_oov_gold: usize,
    pub n_oov_correct: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        // no words on that side: vacuously perfect
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl SegmentationScore {
    fn from_counts(
        n_gold: usize,
        n_pred: usize,
        n_correct: usize,
        n_oov_gold: usize,
        n_oov_correct: usize,
    ) -> Self {
        let precision = ratio(n_correct, n_pred);
        let recall = ratio(n_correct, n_gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let oov_recall = (n_oov_gold > 0).then(|| n_oov_correct as f64 / n_oov_gold as f64);
        SegmentationScore {
            precision,
            recall,
            f1,
            oov_recall,
            n_gold,
            n_pred,
            n_correct,
            n_oov_gold,
            n_oov_correct,
        }
    }
}

/// Micro-averaged score over sentence pairs. `train_words` drives OOV
/// bookkeeping; pass an empty set to skip it (OOV recall then covers every
/// gold word).
pub fn score(
    gold: &[TaggedSentence],
    pred: &[TaggedSentence],
    train_words: &HashSet<String>,
) -> Result<SegmentationScore> {
    if gold.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "gold has {} sentences, prediction has {}",
            gold.len(),
            pred.len()
        )));
    }
    let mut n_gold = 0;
    let mut n_pred = 0;
    let mut n_correct = 0;
    let mut n_oov_gold = 0;
    let mut n_oov_correct = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g.chars != p.chars {
            return Err(Error::Invalid(format!(
                "character mismatch between gold and prediction: {:?} vs {:?}",
                g.chars.iter().collect::<String>(),
                p.chars.iter().collect::<String>()
            )));
        }
        let pred_spans: HashSet<(usize, usize)> = p.spans.iter().copied().collect();
        n_gold += g.spans.len();
        n_pred += p.spans.len();
        for &(s, e) in &g.spans {
            let hit = pred_spans.contains(&(s, e));
            if hit {
                n_correct += 1;
            }
            let word: String = g.chars[s..e].iter().collect();
            if !train_words.contains(&word) {
                n_oov_gold += 1;
                if hit {
                    n_oov_correct += 1;
                }
            }
        }
    }
    Ok(SegmentationScore::from_counts(
        n_gold,
        n_pred,
        n_correct,
        n_oov_gold,
        n_oov_correct,
    ))
}

/// F1 of a single sentence pair, for per-sentence diagnostics.
pub fn per_sentence_f(gold: &TaggedSentence, pred: &TaggedSentence) -> Result<f64> {
    let empty = HashSet::new();
    Ok(score(
        std::slice::from_ref(gold),
        std::slice::from_ref(pred),
        &empty,
    )?
    .f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(words: &[&str]) -> TaggedSentence {
        TaggedSentence::from_words(words).unwrap()
    }

    #[test]
    fn hand_worked_example() {
        // gold: "ab c def" (3 words); pred: "ab cd ef" splits differently:
        // pred has words (0,2),(2,4),(4,6); only (0,2) matches.
        // But we want the documented P=1/2, R=1/3, F=0.4 case:
        // gold 3 words, pred 2 words, 1 correct.
        let gold = sent(&["a", "bc", "def"]);
        let pred = sent(&["a", "bcdef"]);
        let s = score(&[gold], &[pred], &HashSet::new()).unwrap();
        assert_eq!(s.n_gold, 3);
        assert_eq!(s.n_pred, 2);
        assert_eq!(s.n_correct, 1);
        assert!((s.precision - 0.5).abs() < 1e-15);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_zero() {
        let g = sent(&["ab", "c"]);
        let s = score(&[g.clone()], &[g.clone()], &HashSet::new()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));

        let p = sent(&["a", "bc"]);
        let s = score(&[g], &[p], &HashSet::new()).unwrap();
        assert_eq!(s.n_correct, 0);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn empty_corpora_are_vacuously_perfect() {
        let s = score(&[], &[], &HashSet::new()).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(s.oov_recall, None);
    }

    #[test]
    fn char_mismatch_rejected() {
        let g = sent(&["ab"]);
        let p = sent(&["ac"]);
        assert!(score(&[g], &[p], &HashSet::new()).is_err());
    }

    #[test]
    fn length_mismatch_rejected() {
        let g = sent(&["ab"]);
        assert!(score(&[g], &[], &HashSet::new()).is_err());
    }

    #[test]
    fn symmetry_swaps_precision_and_recall() {
        let g = sent(&["a", "bc", "def"]);
        let p = sent(&["a", "bcdef"]);
        let s1 = score(&[g.clone()], &[p.clone()], &HashSet::new()).unwrap();
        let s2 = score(&[p], &[g], &HashSet::new()).unwrap();
        assert!((s1.precision - s2.recall).abs() < 1e-15);
        assert!((s1.recall - s2.precision).abs() < 1e-15);
        assert!((s1.f1 - s2.f1).abs() < 1e-15);
    }

    #[test]
    fn oov_recall_counts_only_unseen_words() {
        let train: HashSet<String> = ["ab".to_string()].into_iter().collect();
        let gold = sent(&["ab", "cd"]);
        let pred = sent(&["ab", "c", "d"]);
        let s = score(&[gold], &[pred], &train).unwrap();
        // "cd" is OOV and was missed; "ab" is in-vocabulary
        assert_eq!(s.n_oov_gold, 1);
        assert_eq!(s.n_oov_correct, 0);
        assert_eq!(s.oov_recall, Some(0.0));

        let gold = sent(&["ab", "cd"]);
        let pred = sent(&["a", "b", "cd"]);
        let train: HashSet<String> = ["ab".to_string()].into_iter().collect();
        let s = score(&[gold], &[pred], &train).unwrap();
        assert_eq!(s.oov_recall, Some(1.0));
    }

    #[test]
    fn no_oov_words_yields_none() {
        let train: HashSet<String> = ["ab".to_string(), "c".to_string()].into_iter().collect();
        let g = sent(&["ab", "c"]);
        let s = score(&[g.clone()], &[g], &train).unwrap();
        assert_eq!(s.oov_recall, None);
    }

    #[test]
    fn counts_add_across_sentences_micro_average() {
        let g1 = sent(&["a", "bc"]);
        let p1 = sent(&["a", "b", "c"]);
        let g2 = sent(&["de"]);
        let p2 = sent(&["de"]);
        let joint = score(
            &[g1.clone(), g2.clone()],
            &[p1.clone(), p2.clone()],
            &HashSet::new(),
        )
        .unwrap();
        let a = score(&[g1], &[p1], &HashSet::new()).unwrap();
        let b = score(&[g2], &[p2], &HashSet::new()).unwrap();
        assert_eq!(joint.n_correct, a.n_correct + b.n_correct);
        assert_eq!(joint.n_gold, a.n_gold + b.n_gold);
        assert_eq!(joint.n_pred, a.n_pred + b.n_pred);
        // micro ≠ macro here: sentence F1s are 0.4 and 1.0, micro F is
        // 2·(2/4)·(2/3)/((2/4)+(2/3)) ≈ 0.571
        let macro_f = (a.f1 + b.f1) / 2.0;
        assert!((joint.f1 - macro_f).abs() > 0.05);
        assert!((joint.f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn per_sentence_matches_corpus_of_one() {
        let g = sent(&["a", "bc", "def"]);
        let p = sent(&["a", "bcdef"]);
        assert!((per_sentence_f(&g, &p).unwrap() - 0.4).abs() < 1e-15);
    }
}
