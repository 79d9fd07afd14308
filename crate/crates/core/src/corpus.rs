//! Synthetic prompt/response corpora.
//!
//! Each sequence carries a modular arithmetic chain in its response: the
//! prompt holds a start value `a` and a step `s`, and the response reads
//! `a+s, a+2s, ...` over the ordinary sub-vocabulary, followed by a single
//! rare delimiter token and the answer (the next chain value). Two to four
//! syntax tokens are scattered through the prompt.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, LabError, Result};
use crate::rng::RngStream;

/// Token-id layout of the synthetic vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub ordinary: usize,
    pub syntax_ids: Vec<u32>,
    pub delimiter_ids: Vec<u32>,
    pub mask_id: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Self {
            size: 32,
            ordinary: 24,
            syntax_ids: (24..28).collect(),
            delimiter_ids: (28..31).collect(),
            mask_id: 31,
        }
    }
}

impl Vocab {
    pub fn is_delimiter(&self, id: u32) -> bool {
        self.delimiter_ids.contains(&id)
    }

    pub fn is_syntax(&self, id: u32) -> bool {
        self.syntax_ids.contains(&id)
    }
}

/// Which positions may be masked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eligibility {
    Pretrain,
    Sft,
    Syrm,
}

impl std::str::FromStr for Eligibility {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "sft" => Ok(Self::Sft),
            "syrm" => Ok(Self::Syrm),
            other => invalid(format!("unknown eligibility mode `{other}`")),
        }
    }
}

/// A prompt followed by a response, with role annotations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    /// Prompt positions holding syntax tokens (sorted).
    pub syntax_positions: Vec<usize>,
    /// Response positions holding delimiter tokens (sorted).
    pub rare_positions: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Positions that may be masked under `mode`, sorted ascending.
    pub fn eligibility(&self, mode: Eligibility) -> Vec<usize> {
        match mode {
            Eligibility::Pretrain => (0..self.len()).collect(),
            Eligibility::Sft => (self.prompt_len..self.len()).collect(),
            Eligibility::Syrm => self
                .syntax_positions
                .iter()
                .copied()
                .chain(self.prompt_len..self.len())
                .collect(),
        }
    }
}

/// Positions eligible for masking (free-function form).
pub fn eligibility(seq: &TokenSeq, mode: Eligibility) -> Vec<usize> {
    seq.eligibility(mode)
}

fn prompt_len_for(seq_len: usize) -> usize {
    (seq_len / 4).max(4)
}

/// Generate `n` sequences of length `seq_len`; sequence `i` depends only on
/// `(stream, i)`.
pub fn generate_corpus(n: usize, seq_len: usize, stream: &RngStream) -> Result<Vec<TokenSeq>> {
    if n == 0 {
        return invalid("corpus size must be at least 1");
    }
    if seq_len < 8 {
        return invalid(format!("seq_len must be at least 8, got {seq_len}"));
    }
    let vocab = Vocab::default();
    Ok((0..n)
        .map(|i| generate_one(&vocab, seq_len, &stream.derive("corpus-seq", i as u64)))
        .collect())
}

fn generate_one(vocab: &Vocab, seq_len: usize, stream: &RngStream) -> TokenSeq {
    let mut rng = stream.clone();
    let ord = vocab.ordinary as u64;
    let prompt_len = prompt_len_for(seq_len);
    let start = rng.below(ord) as u32;
    let step = 1 + rng.below(ord - 1) as u32;

    let mut tokens = Vec::with_capacity(seq_len);
    tokens.push(start);
    tokens.push(step);
    for _ in 2..prompt_len {
        tokens.push(rng.below(ord) as u32);
    }

    let free = prompt_len - 2;
    let n_syntax = (2 + rng.below(3) as usize).min(free);
    let mut slots: Vec<usize> = (2..prompt_len).collect();
    for k in 0..n_syntax {
        let pick = k + rng.below((slots.len() - k) as u64) as usize;
        slots.swap(k, pick);
    }
    let mut syntax_positions: Vec<usize> = slots[..n_syntax].to_vec();
    syntax_positions.sort_unstable();
    for &p in &syntax_positions {
        let id = vocab.syntax_ids[rng.below(vocab.syntax_ids.len() as u64) as usize];
        tokens[p] = id;
    }

    let response_len = seq_len - prompt_len;
    let chain_len = response_len - 2;
    let mut value = (start + step) % vocab.ordinary as u32;
    for _ in 0..chain_len {
        tokens.push(value);
        value = (value + step) % vocab.ordinary as u32;
    }
    let delimiter = vocab.delimiter_ids[rng.below(vocab.delimiter_ids.len() as u64) as usize];
    let rare = tokens.len();
    tokens.push(delimiter);
    tokens.push(value);

    TokenSeq {
        tokens,
        prompt_len,
        syntax_positions,
        rare_positions: vec![rare],
    }
}

const HEADER: &str = "tokens\tprompt_len\tsyntax_positions\trare_positions";

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(" ")
}

/// Write a corpus as tab-separated records with a header line.
pub fn dump_corpus<W: Write>(corpus: &[TokenSeq], mut out: W) -> Result<()> {
    let mut buf = String::new();
    writeln!(buf, "{HEADER}").unwrap();
    for seq in corpus {
        writeln!(
            buf,
            "{}\t{}\t{}\t{}",
            join(&seq.tokens),
            seq.prompt_len,
            join(&seq.syntax_positions),
            join(&seq.rare_positions)
        )
        .unwrap();
    }
    out.write_all(buf.as_bytes())?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(field: &str, line: usize) -> Result<Vec<T>> {
    field
        .split_whitespace()
        .map(|x| {
            x.parse()
                .map_err(|_| LabError::Invalid(format!("line {line}: bad value `{x}`")))
        })
        .collect()
}

/// Read a corpus written by [`dump_corpus`], validating the vocabulary
/// invariants.
pub fn load_corpus<R: BufRead>(input: R) -> Result<Vec<TokenSeq>> {
    let vocab = Vocab::default();
    let mut lines = input.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim_end) != Some(HEADER) {
        return invalid("corpus file is missing its header line");
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        let lineno = k + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return invalid(format!("line {lineno}: expected 4 fields"));
        }
        let seq = TokenSeq {
            tokens: parse_list(fields[0], lineno)?,
            prompt_len: fields[1]
                .trim()
                .parse()
                .map_err(|_| LabError::Invalid(format!("line {lineno}: bad prompt_len")))?,
            syntax_positions: parse_list(fields[2], lineno)?,
            rare_positions: parse_list(fields[3], lineno)?,
        };
        if seq.prompt_len >= seq.len()
            || seq.tokens.iter().any(|&t| t as usize >= vocab.size || t == vocab.mask_id)
            || seq.syntax_positions.iter().any(|&p| p >= seq.prompt_len)
            || seq.rare_positions.iter().any(|&p| p < seq.prompt_len || p >= seq.len())
        {
            return invalid(format!("line {lineno}: record violates the corpus layout"));
        }
        out.push(seq);
    }
    Ok(out)
}
