//! First-order linear-chain CRF: emission scores, exact log-partition via the
//! forward recursion, gold-sequence scoring, log-likelihood, Viterbi decoding,
//! and a brute-force enumeration oracle for small instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp_slice, Tensor, Var};

/// Fixed label order used everywhere: B=0, M=1, E=2, S=3.
pub const NUM_LABELS: usize = 4;
pub const LABEL_NAMES: [&str; NUM_LABELS] = ["B", "M", "E", "S"];
pub const B: usize = 0;
pub const M: usize = 1;
pub const E: usize = 2;
pub const S: usize = 3;

/// Per-criterion CRF head.
///
/// `w_s` is d_feat × |L|, `b_s` is 1 × |L|, `transitions[y', y]` is the score
/// of moving from label y' to label y. There are no start/stop transition
/// vectors; the emission term enters at every position and transition terms
/// from position 2 on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrfHead {
    pub w_s: Tensor,
    pub b_s: Tensor,
    pub transitions: Tensor,
}

impl CrfHead {
    pub fn new_random(d_feat: usize, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        CrfHead {
            w_s: Tensor::uniform(d_feat, NUM_LABELS, low, high, rng).with_grad(),
            b_s: Tensor::uniform(1, NUM_LABELS, low, high, rng).with_grad(),
            transitions: Tensor::uniform(NUM_LABELS, NUM_LABELS, low, high, rng).with_grad(),
        }
    }

    pub fn d_feat(&self) -> usize {
        self.w_s.rows()
    }
}

pub struct CrfVars<'t> {
    pub w_s: Var<'t>,
    pub b_s: Var<'t>,
    pub transitions: Var<'t>,
}

impl CrfHead {
    pub fn bind<'t>(&self, tape: &'t crate::tensor::Tape) -> CrfVars<'t> {
        CrfVars {
            w_s: tape.leaf(&self.w_s),
            b_s: tape.leaf(&self.b_s),
            transitions: tape.leaf(&self.transitions),
        }
    }
}

/// Stack per-position features into n × |L| emission scores:
/// row i = W_sᵀ h_i + b_s.
pub fn emission_scores<'t>(hidden: &[Var<'t>], head: &CrfVars<'t>) -> Result<Var<'t>> {
    if hidden.is_empty() {
        return Err(Error::Invalid("emission_scores on empty sequence".into()));
    }
    let h = Var::concat_rows(hidden)?;
    if h.cols() != head.w_s.rows() {
        return Err(Error::shape(
            "emission_scores",
            (h.rows(), h.cols()),
            (head.w_s.rows(), head.w_s.cols()),
        ));
    }
    h.matmul(&head.w_s)?.add_row(&head.b_s)
}

fn check_labels(y: &[usize], n: usize) -> Result<()> {
    if y.len() != n || n == 0 {
        return Err(Error::Invalid(format!(
            "label sequence length {} does not match {} positions",
            y.len(),
            n
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= NUM_LABELS) {
        return Err(Error::Invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Σ_i scores[i, y_i] + Σ_{i≥2} transitions[y_{i−1}, y_i].
pub fn sequence_score<'t>(
    scores: &Var<'t>,
    transitions: &Var<'t>,
    y: &[usize],
) -> Result<Var<'t>> {
    check_labels(y, scores.rows())?;
    let emit_picks: Vec<(usize, usize)> = y.iter().enumerate().map(|(i, &l)| (i, l)).collect();
    let emit = scores.pick_sum(&emit_picks)?;
    if y.len() == 1 {
        return Ok(emit);
    }
    let trans_picks: Vec<(usize, usize)> = y.windows(2).map(|w| (w[0], w[1])).collect();
    let trans = transitions.pick_sum(&trans_picks)?;
    emit.add(&trans)
}

/// log Σ_{Y ∈ L^n} exp(sequence_score(Y)), by the forward recursion
/// α_{i,y} = scores[i,y] + logΣexp_{y'}(α_{i−1,y'} + transitions[y',y]).
pub fn log_partition<'t>(scores: &Var<'t>, transitions: &Var<'t>) -> Result<Var<'t>> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::Invalid("log_partition on empty sequence".into()));
    }
    let mut alpha = scores.slice_rows(0, 1)?;
    for i in 1..n {
        // m[y', y] = α[y'] + transitions[y', y]
        let m = transitions.add_col(&alpha.transpose())?;
        // logΣexp over y' for each y
        let lse = m.transpose().log_sum_exp();
        alpha = lse.transpose().add(&scores.slice_rows(i, 1)?)?;
    }
    Ok(alpha.log_sum_exp())
}

/// sequence_score(y_gold) − log_partition; always ≤ 0.
pub fn log_likelihood<'t>(
    scores: &Var<'t>,
    transitions: &Var<'t>,
    y_gold: &[usize],
) -> Result<Var<'t>> {
    let gold = sequence_score(scores, transitions, y_gold)?;
    let log_z = log_partition(scores, transitions)?;
    gold.add(&log_z.scale(-1.0))
}

/// Maximum-score label sequence; ties broken toward the lowest label index.
pub fn viterbi_decode(scores: &Tensor, transitions: &Tensor) -> Result<Vec<usize>> {
    let n = scores.rows();
    if n == 0 {
        return Err(Error::Invalid("viterbi_decode on empty sequence".into()));
    }
    if scores.cols() != NUM_LABELS || transitions.rows() != NUM_LABELS {
        return Err(Error::shape(
            "viterbi_decode",
            (scores.rows(), scores.cols()),
            (transitions.rows(), transitions.cols()),
        ));
    }
    let mut delta: Vec<f64> = (0..NUM_LABELS).map(|y| scores.get(0, y)).collect();
    let mut back: Vec<[usize; NUM_LABELS]> = Vec::with_capacity(n);
    for i in 1..n {
        let mut next = [f64::NEG_INFINITY; NUM_LABELS];
        let mut bp = [0usize; NUM_LABELS];
        for y in 0..NUM_LABELS {
            for yp in 0..NUM_LABELS {
                let cand = delta[yp] + transitions.get(yp, y);
                // strict > keeps the lowest y' on ties
                if cand > next[y] {
                    next[y] = cand;
                    bp[y] = yp;
                }
            }
            next[y] += scores.get(i, y);
        }
        delta = next.to_vec();
        back.push(bp);
    }
    let mut best = 0;
    for y in 1..NUM_LABELS {
        if delta[y] > delta[best] {
            best = y;
        }
    }
    let mut path = vec![best];
    for bp in back.iter().rev() {
        best = bp[*path.last().unwrap()];
        path.push(best);
    }
    path.reverse();
    Ok(path)
}

/// Plain-f64 sequence score, shared by the oracle and decoding checks.
pub fn sequence_score_f64(scores: &Tensor, transitions: &Tensor, y: &[usize]) -> f64 {
    let mut s = scores.get(0, y[0]);
    for i in 1..y.len() {
        s += scores.get(i, y[i]) + transitions.get(y[i - 1], y[i]);
    }
    s
}

/// Exhaustive enumeration over all |L|ⁿ label sequences (n ≤ 8).
///
/// Returns (log_partition, best sequence, best score). Independent of the
/// forward recursion and of Viterbi; lives here as the test oracle.
pub fn brute_force_oracle(
    scores: &Tensor,
    transitions: &Tensor,
) -> Result<(f64, Vec<usize>, f64)> {
    let n = scores.rows();
    if n == 0 || n > 8 {
        return Err(Error::Invalid(format!(
            "brute_force_oracle supports 1 ≤ n ≤ 8, got {n}"
        )));
    }
    let total = NUM_LABELS.pow(n as u32);
    let mut all_scores = Vec::with_capacity(total);
    let mut best_seq = vec![0; n];
    let mut best_score = f64::NEG_INFINITY;
    let mut y = vec![0usize; n];
    for code in 0..total {
        let mut c = code;
        for pos in 0..n {
            y[pos] = c % NUM_LABELS;
            c /= NUM_LABELS;
        }
        let s = sequence_score_f64(scores, transitions, &y);
        all_scores.push(s);
        if s > best_score {
            best_score = s;
            best_seq.copy_from_slice(&y);
        }
    }
    Ok((log_sum_exp_slice(&all_scores), best_seq, best_score))
}
