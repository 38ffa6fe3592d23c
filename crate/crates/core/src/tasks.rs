//! Synthetic datasets: ListOps, majority-vote classification and sequence
//! matching, plus padding/batching and the text dataset format.
//!
//! Token ids 0 and 1 are reserved for CLS and PAD by every generator.
//!
//! Text format, one example per line:
//!
//! ```text
//! label<TAB>tok tok tok            # single sequence
//! label<TAB>tok tok<TAB>tok tok    # pair
//! ```

use std::io::{BufRead, Write};
use std::ops::Range;

use crate::model::{CLS_ID, PAD_ID};
use crate::{Error, Result, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub tokens_b: Option<Vec<u32>>,
    pub label: usize,
}

impl Example {
    pub fn single(tokens: Vec<u32>, label: usize) -> Self {
        Example {
            tokens,
            tokens_b: None,
            label,
        }
    }

    /// Length before padding, without the CLS slot. For pairs this is the
    /// longer of the two sequences.
    pub fn true_length(&self) -> usize {
        self.tokens.len().max(self.tokens_b.as_ref().map_or(0, Vec::len))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub vocab_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn is_pair(&self) -> bool {
        self.examples.first().is_some_and(|e| e.tokens_b.is_some())
    }

    pub fn max_true_length(&self) -> usize {
        self.examples.iter().map(Example::true_length).max().unwrap_or(0)
    }

    /// Splits off the last `n` examples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.examples.len().saturating_sub(n);
        let tail = self.examples.split_off(at);
        let test = Dataset {
            examples: tail,
            ..self.clone()
        };
        (self, test)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------- ListOps

pub const LISTOPS_DIGIT0: u32 = 2;
pub const LISTOPS_CLOSE: u32 = 16;
pub const LISTOPS_VOCAB: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ListOp {
    Max,
    Min,
    /// Lower median for even arity.
    Med,
    /// Sum modulo 10.
    Sm,
}

impl ListOp {
    pub const ALL: [ListOp; 4] = [ListOp::Max, ListOp::Min, ListOp::Med, ListOp::Sm];

    pub fn name(self) -> &'static str {
        match self {
            ListOp::Max => "MAX",
            ListOp::Min => "MIN",
            ListOp::Med => "MED",
            ListOp::Sm => "SM",
        }
    }

    pub fn token(self) -> u32 {
        12 + self as u32
    }

    fn from_token(t: u32) -> Option<ListOp> {
        ListOp::ALL.into_iter().find(|op| op.token() == t)
    }

    fn from_name(s: &str) -> Option<ListOp> {
        ListOp::ALL.into_iter().find(|op| op.name() == s)
    }

    pub fn apply(self, args: &[u8]) -> u8 {
        match self {
            ListOp::Max => *args.iter().max().unwrap(),
            ListOp::Min => *args.iter().min().unwrap(),
            ListOp::Med => {
                let mut sorted = args.to_vec();
                sorted.sort_unstable();
                sorted[(sorted.len() - 1) / 2]
            }
            ListOp::Sm => (args.iter().map(|&a| a as u32).sum::<u32>() % 10) as u8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListOpsExpr {
    Digit(u8),
    Apply(ListOp, Vec<ListOpsExpr>),
}

impl ListOpsExpr {
    pub fn depth(&self) -> usize {
        match self {
            ListOpsExpr::Digit(_) => 0,
            ListOpsExpr::Apply(_, args) => 1 + args.iter().map(Self::depth).max().unwrap_or(0),
        }
    }

    pub fn tokens(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.write_tokens(&mut out);
        out
    }

    fn write_tokens(&self, out: &mut Vec<u32>) {
        match self {
            ListOpsExpr::Digit(d) => out.push(LISTOPS_DIGIT0 + *d as u32),
            ListOpsExpr::Apply(op, args) => {
                out.push(op.token());
                for a in args {
                    a.write_tokens(out);
                }
                out.push(LISTOPS_CLOSE);
            }
        }
    }

    fn token_len(&self) -> usize {
        match self {
            ListOpsExpr::Digit(_) => 1,
            ListOpsExpr::Apply(_, args) => 2 + args.iter().map(Self::token_len).sum::<usize>(),
        }
    }
}

impl std::fmt::Display for ListOpsExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ListOpsExpr::Digit(d) => write!(f, "{d}"),
            ListOpsExpr::Apply(op, args) => {
                write!(f, "({}", op.name())?;
                for a in args {
                    write!(f, " {a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

pub fn eval_listops_oracle(expr: &ListOpsExpr) -> u8 {
    match expr {
        ListOpsExpr::Digit(d) => *d,
        ListOpsExpr::Apply(op, args) => {
            let vals: Vec<u8> = args.iter().map(eval_listops_oracle).collect();
            op.apply(&vals)
        }
    }
}

/// Parses `(MAX 2 4 (MIN 5 3))`. Square brackets work too, and a closing
/// bracket may follow a space (`[MAX 2 ]`).
pub fn parse_listops(s: &str) -> Result<ListOpsExpr> {
    let spaced = s.replace(['(', '['], " ( ").replace([')', ']'], " ) ");
    let words: Vec<&str> = spaced.split_whitespace().collect();
    let mut pos = 0;
    let expr = parse_words(&words, &mut pos)?;
    if pos != words.len() {
        return Err(Error::Parse(format!("trailing input after expression: `{}`", words[pos..].join(" "))));
    }
    Ok(expr)
}

fn parse_words(words: &[&str], pos: &mut usize) -> Result<ListOpsExpr> {
    let word = *words.get(*pos).ok_or_else(|| Error::Parse("unexpected end of expression".into()))?;
    *pos += 1;
    if word == "(" {
        let name = *words.get(*pos).ok_or_else(|| Error::Parse("missing operator".into()))?;
        let op = ListOp::from_name(name).ok_or_else(|| Error::Parse(format!("unknown operator `{name}`")))?;
        *pos += 1;
        let mut args = Vec::new();
        while words.get(*pos) != Some(&")") {
            if *pos >= words.len() {
                return Err(Error::Parse("unclosed bracket".into()));
            }
            args.push(parse_words(words, pos)?);
        }
        *pos += 1;
        if args.is_empty() {
            return Err(Error::Parse(format!("{name} has no arguments")));
        }
        return Ok(ListOpsExpr::Apply(op, args));
    }
    match word.parse::<u8>() {
        Ok(d) if d <= 9 => Ok(ListOpsExpr::Digit(d)),
        _ => Err(Error::Parse(format!("unexpected `{word}`"))),
    }
}

/// Inverse of [`ListOpsExpr::tokens`].
pub fn parse_listops_tokens(tokens: &[u32]) -> Result<ListOpsExpr> {
    fn go(tokens: &[u32], pos: &mut usize) -> Result<ListOpsExpr> {
        let t = *tokens.get(*pos).ok_or_else(|| Error::Parse("unexpected end of tokens".into()))?;
        *pos += 1;
        if (LISTOPS_DIGIT0..LISTOPS_DIGIT0 + 10).contains(&t) {
            return Ok(ListOpsExpr::Digit((t - LISTOPS_DIGIT0) as u8));
        }
        let op = ListOp::from_token(t).ok_or_else(|| Error::Parse(format!("unexpected token {t}")))?;
        let mut args = Vec::new();
        loop {
            match tokens.get(*pos) {
                None => return Err(Error::Parse("unclosed operator".into())),
                Some(&LISTOPS_CLOSE) => {
                    *pos += 1;
                    break;
                }
                Some(_) => args.push(go(tokens, pos)?),
            }
        }
        if args.is_empty() {
            return Err(Error::Parse(format!("{} has no arguments", op.name())));
        }
        Ok(ListOpsExpr::Apply(op, args))
    }
    let mut pos = 0;
    let expr = go(tokens, &mut pos)?;
    if pos != tokens.len() {
        return Err(Error::Parse("trailing tokens after expression".into()));
    }
    Ok(expr)
}

/// Renders ListOps token ids in bracket form, e.g. `[MAX 2 4 ]`.
pub fn listops_tokens_to_string(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| match t {
            _ if (LISTOPS_DIGIT0..LISTOPS_DIGIT0 + 10).contains(&t) => (t - LISTOPS_DIGIT0).to_string(),
            LISTOPS_CLOSE => "]".to_string(),
            _ => match ListOp::from_token(t) {
                Some(op) => format!("[{}", op.name()),
                None => format!("<{t}>"),
            },
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListOpsSpec {
    pub max_depth: usize,
    pub max_args: usize,
    /// Token budget of a serialized expression (CLS excluded).
    pub max_length: usize,
}

impl Default for ListOpsSpec {
    fn default() -> Self {
        ListOpsSpec {
            max_depth: 3,
            max_args: 5,
            max_length: 128,
        }
    }
}

impl ListOpsSpec {
    fn validate(&self) -> Result<()> {
        if self.max_length == 0 {
            return Err(Error::Config("ListOps max_length must be positive".into()));
        }
        if self.max_depth > 0 {
            if self.max_args < 2 {
                return Err(Error::Config("ListOps operators need max_args ≥ 2".into()));
            }
            // Smallest operator tree: `[OP d d ]`.
            if self.max_length < 4 {
                return Err(Error::Config(format!(
                    "no ListOps tree of depth ≥ 1 fits in {} tokens",
                    self.max_length
                )));
            }
        }
        Ok(())
    }
}

fn gen_tree(depth_left: usize, max_args: usize, force_op: bool, rng: &mut Rng) -> ListOpsExpr {
    if depth_left == 0 || (!force_op && rng.bernoulli(0.5)) {
        return ListOpsExpr::Digit(rng.below(10) as u8);
    }
    let op = ListOp::ALL[rng.below(4)];
    let n_args = 2 + rng.below(max_args - 1);
    let args = (0..n_args).map(|_| gen_tree(depth_left - 1, max_args, false, rng)).collect();
    ListOpsExpr::Apply(op, args)
}

/// Random expressions whose root is an operator (a bare digit when
/// `max_depth` is 0), rejected and redrawn when longer than `max_length`.
pub fn gen_listops_exprs(spec: &ListOpsSpec, n: usize, rng: &mut Rng) -> Result<Vec<ListOpsExpr>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let e = gen_tree(spec.max_depth, spec.max_args, spec.max_depth > 0, rng);
        if e.token_len() <= spec.max_length {
            out.push(e);
        }
    }
    Ok(out)
}

pub fn gen_listops(spec: &ListOpsSpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    let examples = gen_listops_exprs(spec, n, rng)?
        .into_iter()
        .map(|e| Example::single(e.tokens(), eval_listops_oracle(&e) as usize))
        .collect();
    Ok(Dataset {
        examples,
        n_classes: 10,
        vocab_size: LISTOPS_VOCAB,
    })
}

// ---------------------------------------------------------------- majority

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MajoritySpec {
    pub vocab_size: usize,
    pub length: usize,
    pub n_classes: usize,
    /// Probability that a token is drawn from the label's group; otherwise
    /// it is uniform over all symbols.
    pub bias: f64,
}

impl MajoritySpec {
    pub fn new(vocab_size: usize, length: usize, n_classes: usize) -> Self {
        MajoritySpec {
            vocab_size,
            length,
            n_classes,
            bias: 0.25,
        }
    }

    pub fn group_size(&self) -> usize {
        (self.vocab_size.saturating_sub(2)) / self.n_classes.max(1)
    }

    /// Group of a symbol id, `None` for reserved ids.
    pub fn group_of(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        (t >= 2 && t < self.vocab_size).then(|| (t - 2) / self.group_size())
    }

    fn validate(&self) -> Result<()> {
        let symbols = self.vocab_size.saturating_sub(2);
        if self.n_classes == 0 || symbols == 0 || symbols % self.n_classes != 0 {
            return Err(Error::Config(format!(
                "{symbols} symbols cannot be split evenly into {} groups",
                self.n_classes
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("sequences must be non-empty to have a plurality".into()));
        }
        if !(0.0..=1.0).contains(&self.bias) {
            return Err(Error::Config(format!("bias {} outside [0, 1]", self.bias)));
        }
        Ok(())
    }

    /// Group holding the strict plurality of `tokens`, if any.
    pub fn plurality(&self, tokens: &[u32]) -> Option<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &t in tokens {
            counts[self.group_of(t)?] += 1;
        }
        let best = *counts.iter().max()?;
        let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
        let (label, _) = winners.next()?;
        winners.next().is_none().then_some(label)
    }
}

/// Label is the symbol group with the strict plurality of tokens; draws
/// without one are rejected.
pub fn gen_majority_classification(spec: &MajoritySpec, n: usize, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let g = spec.group_size();
    let symbols = spec.vocab_size - 2;
    let mut examples = Vec::with_capacity(n);
    while examples.len() < n {
        let target = rng.below(spec.n_classes);
        let tokens: Vec<u32> = (0..spec.length)
            .map(|_| {
                let sym = if rng.bernoulli(spec.bias) {
                    target * g + rng.below(g)
                } else {
                    rng.below(symbols)
                };
                (sym + 2) as u32
            })
            .collect();
        if let Some(label) = spec.plurality(&tokens) {
            examples.push(Example::single(tokens, label));
        }
    }
    Ok(Dataset {
        examples,
        n_classes: spec.n_classes,
        vocab_size: spec.vocab_size,
    })
}

// ---------------------------------------------------------------- matching

/// Uniform random sequences over `symbols`.
pub fn uniform_sequences(symbols: Range<u32>, length: usize) -> impl FnMut(&mut Rng) -> Vec<u32> {
    move |rng| {
        (0..length)
            .map(|_| symbols.start + rng.below((symbols.end - symbols.start) as usize) as u32)
            .collect()
    }
}

/// Label 1 pairs `(s, s')` where `s'` has `⌊rate·len⌋` positions redrawn
/// from `noise_symbols`; label 0 pairs are two independent draws. Labels
/// are fair coin flips.
pub fn gen_matching_pairs(
    mut base: impl FnMut(&mut Rng) -> Vec<u32>,
    noise_symbols: Range<u32>,
    corruption_rate: f64,
    n: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&corruption_rate) {
        return Err(Error::Config(format!("corruption rate {corruption_rate} outside [0, 1)")));
    }
    if noise_symbols.is_empty() || noise_symbols.start < 2 {
        return Err(Error::Config("noise symbols must be a non-empty range above the reserved ids".into()));
    }
    let span = (noise_symbols.end - noise_symbols.start) as usize;
    let mut examples = Vec::with_capacity(n);
    let mut vocab = noise_symbols.end as usize;
    for _ in 0..n {
        let a = base(rng);
        let label = rng.bernoulli(0.5) as usize;
        let b = if label == 1 {
            let mut b = a.clone();
            let mut positions: Vec<usize> = (0..b.len()).collect();
            rng.shuffle(&mut positions);
            let k = (corruption_rate * b.len() as f64).floor() as usize;
            for &p in &positions[..k] {
                b[p] = noise_symbols.start + rng.below(span) as u32;
            }
            b
        } else {
            base(rng)
        };
        if a.is_empty() || b.is_empty() {
            return Err(Error::Config("base generator produced an empty sequence".into()));
        }
        vocab = vocab.max(1 + *a.iter().chain(&b).max().unwrap() as usize);
        examples.push(Example {
            tokens: a,
            tokens_b: Some(b),
            label,
        });
    }
    Ok(Dataset {
        examples,
        n_classes: 2,
        vocab_size: vocab,
    })
}

// ---------------------------------------------------------------- batching

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSide {
    /// CLS-prefixed, PAD-filled rows of equal length.
    pub ids: Vec<Vec<u32>>,
    /// `true` on CLS and real tokens.
    pub mask: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
    /// Second sequences of a matching batch.
    pub pair: Option<PaddedSide>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }
}

fn pad_side<'a>(seqs: impl Iterator<Item = &'a [u32]> + Clone, max_len: usize) -> Result<PaddedSide> {
    let longest = seqs.clone().map(<[u32]>::len).max().unwrap_or(0);
    if longest + 1 > max_len {
        return Err(Error::TooLong {
            len: longest + 1,
            max_len,
        });
    }
    let width = longest + 1;
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Param("empty sequence in batch".into()));
        }
        let mut row = Vec::with_capacity(width);
        row.push(CLS_ID);
        row.extend_from_slice(s);
        row.resize(width, PAD_ID);
        let mut m = vec![false; width];
        m[..=s.len()].fill(true);
        ids.push(row);
        mask.push(m);
    }
    Ok(PaddedSide { ids, mask })
}

/// Prepends CLS and right-pads with PAD to the longest sequence in the
/// batch. `max_len` counts the CLS slot.
pub fn batch(examples: &[Example], max_len: usize) -> Result<Batch> {
    let pairs = examples.iter().filter(|e| e.tokens_b.is_some()).count();
    if pairs != 0 && pairs != examples.len() {
        return Err(Error::Param("batch mixes single and pair examples".into()));
    }
    let side = pad_side(examples.iter().map(|e| e.tokens.as_slice()), max_len)?;
    let pair = if pairs > 0 {
        Some(pad_side(examples.iter().map(|e| e.tokens_b.as_deref().unwrap()), max_len)?)
    } else {
        None
    };
    Ok(Batch {
        ids: side.ids,
        mask: side.mask,
        labels: examples.iter().map(|e| e.label).collect(),
        pair,
    })
}

fn strip(ids: &[u32], mask: &[bool]) -> Vec<u32> {
    ids.iter().zip(mask).skip(1).filter(|(_, &m)| m).map(|(&t, _)| t).collect()
}

pub fn unbatch(b: &Batch) -> Vec<Example> {
    (0..b.len())
        .map(|i| Example {
            tokens: strip(&b.ids[i], &b.mask[i]),
            tokens_b: b.pair.as_ref().map(|p| strip(&p.ids[i], &p.mask[i])),
            label: b.labels[i],
        })
        .collect()
}

// ---------------------------------------------------------------- text I/O

fn join(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    for e in &ds.examples {
        match &e.tokens_b {
            None => writeln!(w, "{}\t{}", e.label, join(&e.tokens))?,
            Some(b) => writeln!(w, "{}\t{}\t{}", e.label, join(&e.tokens), join(b))?,
        }
    }
    Ok(())
}

/// Reads the text format. `n_classes` and `vocab_size` are inferred as one
/// past the largest label and token seen.
pub fn read_dataset(r: impl BufRead) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Parse(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(bad("expected 2 or 3 tab-separated fields"));
        }
        let label = fields[0].trim().parse::<usize>().map_err(|_| bad("bad label"))?;
        let toks = |s: &str| -> Result<Vec<u32>> {
            let v = s
                .split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| bad(&format!("bad token `{t}`"))))
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(bad("empty sequence"));
            }
            Ok(v)
        };
        examples.push(Example {
            tokens: toks(fields[1])?,
            tokens_b: fields.get(2).map(|s| toks(s)).transpose()?,
            label,
        });
    }
    if examples.iter().any(|e| e.tokens_b.is_some()) && examples.iter().any(|e| e.tokens_b.is_none()) {
        return Err(Error::Parse("file mixes single and pair examples".into()));
    }
    let n_classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let vocab_size = examples
        .iter()
        .flat_map(|e| e.tokens.iter().chain(e.tokens_b.iter().flatten()))
        .map(|&t| t as usize + 1)
        .max()
        .unwrap_or(0);
    Ok(Dataset {
        examples,
        n_classes,
        vocab_size,
    })
}
