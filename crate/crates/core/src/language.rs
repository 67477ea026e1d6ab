//! Question tokenization, vocabulary, and the LSTM question encoder producing `e_q`.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};
use crate::params::{Forward, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids preceding the first real token.
pub const RESERVED: usize = 3;

/// Width of the optional frozen random word table.
pub const FROZEN_TABLE_WIDTH: usize = 30;

/// Lowercase `text` and split it into alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token ↔ id map with `PAD`, `UNK`, `EOS` reserved at ids 0, 1, 2.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from arbitrary tokens; duplicates collapse and ids follow sorted order.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let sorted: BTreeSet<String> = tokens.into_iter().map(Into::into).collect();
        let tokens: Vec<String> = sorted.into_iter().collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i + RESERVED)).collect();
        Self { tokens, ids }
    }

    /// Every token appearing in `texts` after [`tokenize`].
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_tokens(texts.into_iter().flat_map(tokenize))
    }

    /// Total id range including the reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            UNK => Some("<unk>"),
            EOS => Some("<eos>"),
            _ => self.tokens.get(id - RESERVED).map(String::as_str),
        }
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line in id order; the id of line `i` is `i + RESERVED`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || tokenize(t) != [t.to_string()] {
                return Err(Error::Load(format!("vocabulary line {}: `{t}` is not a normalized token", i + 1)));
            }
            if i > 0 && tokens[i - 1] >= *t {
                return Err(Error::Load(format!("vocabulary line {}: tokens are not strictly sorted", i + 1)));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    /// Tokenize, map unknown tokens to `UNK`, and append `EOS`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.push(EOS);
        ids
    }
}

/// Free-function form of [`Vocabulary::encode`].
pub fn encode_tokens(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(text)
}

/// Id sequences right-padded with `PAD` to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub rows: usize,
    pub steps: usize,
    /// Row-major `[rows, steps]`.
    pub ids: Vec<usize>,
}

impl PaddedBatch {
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(usage_err("cannot pad an empty batch"));
        }
        let steps = sequences.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; sequences.len() * steps];
        for (r, s) in sequences.iter().enumerate() {
            ids[r * steps..r * steps + s.len()].copy_from_slice(s);
        }
        Ok(Self { rows: sequences.len(), steps, ids })
    }

    /// Pad to exactly `steps` columns; longer sequences are an error.
    pub fn with_steps(sequences: &[Vec<usize>], steps: usize) -> Result<Self> {
        let mut b = Self::new(sequences)?;
        if b.steps > steps {
            return Err(usage_err(format!("sequence of length {} exceeds {steps} steps", b.steps)));
        }
        let mut ids = vec![PAD; b.rows * steps];
        for r in 0..b.rows {
            ids[r * steps..r * steps + b.steps].copy_from_slice(&b.ids[r * b.steps..(r + 1) * b.steps]);
        }
        b.ids = ids;
        b.steps = steps;
        Ok(b)
    }

    pub fn column(&self, t: usize) -> Vec<usize> {
        (0..self.rows).map(|r| self.ids[r * self.steps + t]).collect()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.steps..(r + 1) * self.steps]
    }
}

/// Hidden and cell state, each `[N, H]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros<T: Scalar>(g: &mut Graph<T>, rows: usize, hidden: usize) -> Self {
        let h = g.constant(Tensor::zeros(&[rows, hidden]));
        let c = g.constant(Tensor::zeros(&[rows, hidden]));
        Self { h, c }
    }
}

/// Graph handles for one LSTM cell. Gate columns are ordered `i, f, g, o`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[D, 4H]`
    pub input: Var,
    /// `[H, 4H]`
    pub recurrent: Var,
    /// `[4H]`
    pub bias: Var,
}

/// One LSTM transition: `c' = f∘c + i∘g`, `h' = o∘tanh(c')`.
pub fn lstm_step<T: Scalar>(g: &mut Graph<T>, state: LstmState, x: Var, w: &LstmWeights) -> Result<LstmState> {
    let hidden = g.shape(state.h)[1];
    if g.shape(w.recurrent) != [hidden, 4 * hidden] {
        return Err(config_err(format!(
            "recurrent weight {:?} does not match hidden size {hidden}",
            g.shape(w.recurrent)
        )));
    }
    let from_x = g.affine(x, w.input, Some(w.bias))?;
    let from_h = g.affine(state.h, w.recurrent, None)?;
    let z = g.add(from_x, from_h)?;
    let zi = g.slice_cols(z, 0, hidden)?;
    let zf = g.slice_cols(z, hidden, hidden)?;
    let zg = g.slice_cols(z, 2 * hidden, hidden)?;
    let zo = g.slice_cols(z, 3 * hidden, hidden)?;
    let i = g.sigmoid(zi)?;
    let f = g.sigmoid(zf)?;
    let cand = g.tanh(zg)?;
    let o = g.sigmoid(zo)?;
    let keep = g.mul(f, state.c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Run `cells` over a padded batch. Each row's state is carried unchanged through its
/// `PAD` positions, so the result is the top hidden state at the last real token.
pub fn encode_question<T: Scalar>(
    g: &mut Graph<T>,
    batch: &PaddedBatch,
    tables: &[Var],
    cells: &[LstmWeights],
) -> Result<Var> {
    if tables.is_empty() || cells.is_empty() {
        return Err(config_err("question encoder needs an embedding table and at least one cell"));
    }
    for r in 0..batch.rows {
        if batch.row(r).iter().all(|&id| id == PAD) {
            return Err(usage_err(format!("question {r} contains only padding")));
        }
    }
    let vocab = g.shape(tables[0])[0];
    if let Some(&bad) = batch.ids.iter().find(|&&id| id >= vocab) {
        return Err(usage_err(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let last_step = (0..batch.steps).rev().find(|&t| batch.column(t).iter().any(|&id| id != PAD)).unwrap_or(0);

    let mut states: Vec<LstmState> =
        cells.iter().map(|w| LstmState::zeros(g, batch.rows, g.shape(w.recurrent)[0])).collect();
    for t in 0..=last_step {
        let ids = batch.column(t);
        let live: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
        let mut parts = Vec::with_capacity(tables.len());
        for &table in tables {
            parts.push(g.gather_rows(table, &ids)?);
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        for (layer, w) in cells.iter().enumerate() {
            let prev = states[layer];
            let next = lstm_step(g, prev, x, w)?;
            states[layer] = if live.iter().all(|&l| l) {
                next
            } else {
                LstmState { h: g.blend_rows(next.h, prev.h, &live)?, c: g.blend_rows(next.c, prev.c, &live)? }
            };
            x = states[layer].h;
        }
    }
    Ok(states[cells.len() - 1].h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    pub embedding_width: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Concatenate a frozen random table of width [`FROZEN_TABLE_WIDTH`] to the learned one.
    pub frozen_table: bool,
}

impl Default for LanguageConfig {
    fn default() -> Self {
        Self { embedding_width: 32, hidden: 64, layers: 1, frozen_table: false }
    }
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_width == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(config_err("language widths and layer count must be positive"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.embedding_width + if self.frozen_table { FROZEN_TABLE_WIDTH } else { 0 }
    }
}

#[derive(Clone, Debug)]
struct CellParams {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
}

/// Word embedding plus stacked LSTM cells registered under `language.`.
#[derive(Clone, Debug)]
pub struct QuestionEncoder {
    pub config: LanguageConfig,
    pub vocab_size: usize,
    table: ParamId,
    frozen_table: Option<ParamId>,
    cells: Vec<CellParams>,
}

/// Name of the frozen random word table; never trained.
pub const FROZEN_TABLE_NAME: &str = "language.frozen_embedding";

impl QuestionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &LanguageConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab_size <= RESERVED {
            return Err(config_err("vocabulary has no tokens"));
        }
        let table = store.add("language.embedding", Tensor::uniform(&[vocab_size, config.embedding_width], 0.5, rng))?;
        let frozen_table = if config.frozen_table {
            let id = store.add(FROZEN_TABLE_NAME, Tensor::uniform(&[vocab_size, FROZEN_TABLE_WIDTH], 0.5, rng))?;
            store.get_mut(id).frozen = true;
            Some(id)
        } else {
            None
        };
        let h = config.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        let mut cells = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let d = if l == 0 { config.input_width() } else { h };
            cells.push(CellParams {
                input: store.add(format!("language.lstm{l}.input_weight"), Tensor::uniform(&[d, 4 * h], bound, rng))?,
                recurrent: store
                    .add(format!("language.lstm{l}.recurrent_weight"), Tensor::uniform(&[h, 4 * h], bound, rng))?,
                bias: store.add(format!("language.lstm{l}.bias"), Tensor::uniform(&[4 * h], bound, rng))?,
            });
        }
        Ok(Self { config: config.clone(), vocab_size, table, frozen_table, cells })
    }

    /// Width of `e_q`.
    pub fn output_width(&self) -> usize {
        self.config.hidden
    }

    /// `e_q` of shape `[N, hidden]`.
    pub fn encode<T: Scalar>(&self, fwd: &mut Forward<'_, T>, batch: &PaddedBatch) -> Result<Var> {
        let mut tables = vec![fwd.param(self.table)];
        if let Some(id) = self.frozen_table {
            tables.push(fwd.param(id));
        }
        let cells: Vec<LstmWeights> = self
            .cells
            .iter()
            .map(|c| LstmWeights { input: fwd.param(c.input), recurrent: fwd.param(c.recurrent), bias: fwd.param(c.bias) })
            .collect();
        encode_question(&mut fwd.graph, batch, &tables, &cells)
    }
}
