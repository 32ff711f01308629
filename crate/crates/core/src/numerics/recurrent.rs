use rand::Rng;

use super::{glorot, LstmParams, NumericsError, ParameterStore, Tape, Tensor, Var};

/// Parameter names of one recurrent cell inside a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct LstmNames {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
}

impl LstmNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            w_input: format!("{prefix}.w_input"),
            w_hidden: format!("{prefix}.w_hidden"),
            bias: format!("{prefix}.bias"),
        }
    }

    /// Glorot weights; zero bias except the forget gate, which starts at 1.
    pub fn init<R: Rng>(
        &self,
        store: &mut ParameterStore,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<(), NumericsError> {
        store.insert(&self.w_input, glorot(input, 4 * hidden, rng))?;
        store.insert(&self.w_hidden, glorot(hidden, 4 * hidden, rng))?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        store.insert(&self.bias, Tensor::vector(bias))?;
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> Result<LstmParams, NumericsError> {
        Ok(LstmParams {
            w_input: tape.param(store, &self.w_input)?,
            w_hidden: tape.param(store, &self.w_hidden)?,
            bias: tape.param(store, &self.bias)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmNames {
    pub forward: LstmNames,
    pub backward: LstmNames,
}

impl BiLstmNames {
    pub fn new(prefix: &str) -> Self {
        Self { forward: LstmNames::new(&format!("{prefix}.fwd")), backward: LstmNames::new(&format!("{prefix}.bwd")) }
    }

    pub fn init<R: Rng>(
        &self,
        store: &mut ParameterStore,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<(), NumericsError> {
        self.forward.init(store, input, hidden, rng)?;
        self.backward.init(store, input, hidden, rng)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParameterStore) -> Result<(LstmParams, LstmParams), NumericsError> {
        Ok((self.forward.bind(tape, store)?, self.backward.bind(tape, store)?))
    }
}

/// Bidirectional encoding of a batch of token-id sequences.
///
/// Row `i` of the result is `[h_fwd | h_bwd]`: the final hidden state of the
/// forward cell over `seqs[i]` and of the backward cell over its reversal.
/// Sequences of unequal length are handled by freezing finished rows, so no
/// padding token ever reaches a cell. An empty sequence encodes to zeros.
pub fn encode_sequences(
    tape: &mut Tape,
    table: Var,
    seqs: &[Vec<usize>],
    forward: LstmParams,
    backward: LstmParams,
) -> Result<Var, NumericsError> {
    if seqs.is_empty() {
        return Err(NumericsError::InvalidArgument("no sequences to encode".into()));
    }
    let hidden = tape.value(forward.w_hidden).rows();
    let fwd = run_direction(tape, table, seqs, forward, hidden, false)?;
    let bwd = run_direction(tape, table, seqs, backward, hidden, true)?;
    let h_fwd = tape.slice_cols(fwd, 0, hidden)?;
    let h_bwd = tape.slice_cols(bwd, 0, hidden)?;
    tape.concat_cols(&[h_fwd, h_bwd])
}

fn run_direction(
    tape: &mut Tape,
    table: Var,
    seqs: &[Vec<usize>],
    params: LstmParams,
    hidden: usize,
    reverse: bool,
) -> Result<Var, NumericsError> {
    let batch = seqs.len();
    let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut state = tape.constant(Tensor::zeros(&[batch, 2 * hidden]));
    for t in 0..max_len {
        let mut ids = Vec::with_capacity(batch);
        let mut active = Vec::with_capacity(batch);
        for s in seqs {
            if t < s.len() {
                ids.push(if reverse { s[s.len() - 1 - t] } else { s[t] });
                active.push(true);
            } else {
                ids.push(0);
                active.push(false);
            }
        }
        let x = tape.gather_rows(table, ids)?;
        state = tape.lstm_step(x, state, params, Some(&active))?;
    }
    Ok(state)
}
