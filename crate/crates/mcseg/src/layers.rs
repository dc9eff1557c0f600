//! Feature layers: embedding lookup, LSTM recurrence, Bi-LSTM, dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Shared character and bigram embedding matrices.
///
/// Row 0 is reserved for padding and row 1 for unknown tokens, in both tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub unigram: Tensor,
    pub bigram: Tensor,
    pub d_e: usize,
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

impl EmbeddingTable {
    pub fn new_random(
        n_chars: usize,
        n_bigrams: usize,
        d_e: usize,
        low: f64,
        high: f64,
        rng: &mut impl Rng,
    ) -> Self {
        EmbeddingTable {
            unigram: Tensor::uniform(n_chars, d_e, low, high, rng).with_grad(),
            bigram: Tensor::uniform(n_bigrams, d_e, low, high, rng).with_grad(),
            d_e,
        }
    }
}

/// One direction of LSTM parameters.
///
/// `w_g` is (d_in + d_h) × 4·d_h with the gate blocks laid out in the fixed
/// column order: input gate, output gate, forget gate, candidate. `b_g` is
/// 1 × 4·d_h with the same layout. No peephole connections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub d_h: usize,
}

impl LstmParams {
    pub fn new_random(d_in: usize, d_h: usize, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        LstmParams {
            w_g: Tensor::uniform(d_in + d_h, 4 * d_h, low, high, rng).with_grad(),
            b_g: Tensor::uniform(1, 4 * d_h, low, high, rng).with_grad(),
            d_h,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_g.rows() - self.d_h
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiLstmParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

impl BiLstmParams {
    pub fn new_random(d_in: usize, d_h: usize, low: f64, high: f64, rng: &mut impl Rng) -> Self {
        BiLstmParams {
            forward: LstmParams::new_random(d_in, d_h, low, high, rng),
            backward: LstmParams::new_random(d_in, d_h, low, high, rng),
        }
    }

    pub fn d_h(&self) -> usize {
        self.forward.d_h
    }
}

/// Embedding tables bound onto a tape.
pub struct EmbeddingVars<'t> {
    pub unigram: Var<'t>,
    pub bigram: Var<'t>,
    pub d_e: usize,
}

impl EmbeddingTable {
    pub fn bind<'t>(&self, tape: &'t Tape) -> EmbeddingVars<'t> {
        EmbeddingVars {
            unigram: tape.leaf(&self.unigram),
            bigram: tape.leaf(&self.bigram),
            d_e: self.d_e,
        }
    }
}

/// LSTM parameters bound onto a tape.
pub struct LstmVars<'t> {
    pub w_g: Var<'t>,
    pub b_g: Var<'t>,
    pub d_h: usize,
}

impl LstmParams {
    pub fn bind<'t>(&self, tape: &'t Tape) -> LstmVars<'t> {
        LstmVars {
            w_g: tape.leaf(&self.w_g),
            b_g: tape.leaf(&self.b_g),
            d_h: self.d_h,
        }
    }
}

pub struct BiLstmVars<'t> {
    pub forward: LstmVars<'t>,
    pub backward: LstmVars<'t>,
}

impl BiLstmParams {
    pub fn bind<'t>(&self, tape: &'t Tape) -> BiLstmVars<'t> {
        BiLstmVars {
            forward: self.forward.bind(tape),
            backward: self.backward.bind(tape),
        }
    }
}

/// Look up one 1×d_e (or 1×2·d_e with bigrams) row per position.
pub fn embed_sequence<'t>(
    char_ids: &[usize],
    bigram_ids: &[usize],
    table: &EmbeddingVars<'t>,
    use_bigram: bool,
) -> Result<Vec<Var<'t>>> {
    if use_bigram && bigram_ids.len() != char_ids.len() {
        return Err(Error::Invalid(format!(
            "bigram_ids length {} != char_ids length {}",
            bigram_ids.len(),
            char_ids.len()
        )));
    }
    let uni = table.unigram.gather_rows(char_ids)?;
    let mut out = Vec::with_capacity(char_ids.len());
    if use_bigram {
        let bi = table.bigram.gather_rows(bigram_ids)?;
        for i in 0..char_ids.len() {
            let u = uni.slice_rows(i, 1)?;
            let b = bi.slice_rows(i, 1)?;
            out.push(u.concat_cols(&b)?);
        }
    } else {
        for i in 0..char_ids.len() {
            out.push(uni.slice_rows(i, 1)?);
        }
    }
    Ok(out)
}

/// One LSTM step:
/// [i; o; f; c̃] = [σ; σ; σ; φ](W_gᵀ [x; h_{i−1}] + b_g),
/// c = c_{i−1} ⊙ f + c̃ ⊙ i,  h = o ⊙ φ(c).
pub fn lstm_step<'t>(
    x: &Var<'t>,
    h_prev: &Var<'t>,
    c_prev: &Var<'t>,
    p: &LstmVars<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let d_h = p.d_h;
    if x.cols() + d_h != p.w_g.rows() {
        return Err(Error::shape("lstm_step", (1, x.cols()), (p.w_g.rows(), p.w_g.cols())));
    }
    if h_prev.cols() != d_h || c_prev.cols() != d_h {
        return Err(Error::shape("lstm_step", (1, h_prev.cols()), (1, d_h)));
    }
    let xh = x.concat_cols(h_prev)?;
    let pre = xh.matmul(&p.w_g)?.add_row(&p.b_g)?;
    let i_gate = pre.slice_cols(0, d_h)?.sigmoid();
    let o_gate = pre.slice_cols(d_h, d_h)?.sigmoid();
    let f_gate = pre.slice_cols(2 * d_h, d_h)?.sigmoid();
    let cand = pre.slice_cols(3 * d_h, d_h)?.tanh();
    let c = c_prev.mul(&f_gate)?.add(&cand.mul(&i_gate)?)?;
    let h = o_gate.mul(&c.tanh())?;
    Ok((h, c))
}

/// Run both directions from zero initial states and concatenate per position.
/// Output width is 2·d_h.
pub fn bilstm_forward<'t>(inputs: &[Var<'t>], p: &BiLstmVars<'t>) -> Result<Vec<Var<'t>>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Invalid("bilstm_forward on empty sequence".into()))?;
    let tape = first.tape();
    let d_h = p.forward.d_h;
    let n = inputs.len();
    let zero_state = || tape.constant(1, d_h, vec![0.0; d_h]);

    let mut fwd = Vec::with_capacity(n);
    let mut h = zero_state()?;
    let mut c = zero_state()?;
    for x in inputs {
        let (nh, nc) = lstm_step(x, &h, &c, &p.forward)?;
        fwd.push(nh);
        h = nh;
        c = nc;
    }

    let mut bwd = vec![None; n];
    let mut h = zero_state()?;
    let mut c = zero_state()?;
    for (i, x) in inputs.iter().enumerate().rev() {
        let (nh, nc) = lstm_step(x, &h, &c, &p.backward)?;
        bwd[i] = Some(nh);
        h = nh;
        c = nc;
    }

    (0..n)
        .map(|i| fwd[i].concat_cols(&bwd[i].unwrap()))
        .collect()
}

/// Inverted dropout on the embedding layer output.
///
/// Train mode zeroes each coordinate with probability 1−keep_rate and scales
/// survivors by 1/keep_rate; eval mode is the identity.
pub fn dropout<'t>(
    x: &Var<'t>,
    keep_rate: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Var<'t>> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Invalid(format!("keep_rate {keep_rate} out of (0, 1]")));
    }
    if !train || keep_rate == 1.0 {
        return Ok(*x);
    }
    let mask: Vec<f64> = (0..x.rows() * x.cols())
        .map(|_| {
            if rng.gen::<f64>() < keep_rate {
                1.0 / keep_rate
            } else {
                0.0
            }
        })
        .collect();
    let m = x.tape().constant(x.rows(), x.cols(), mask)?;
    x.mul(&m)
}
