//! Vocabularies, synthetic tasks, tokenization and batching.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Number of ids reserved below the payload range.
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id map. Ids `0..4` are PAD, BOS, EOS, UNK; payload tokens follow;
/// `mem_count` decoder memory ids occupy the top of the range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    mem_count: usize,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from payload tokens in the given order.
    pub fn new<S: AsRef<str>>(payload: &[S], mem_count: usize) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(payload.iter().map(|s| s.as_ref().to_string()));
        tokens.extend((0..mem_count).map(|k| format!("[mem]{k}")));
        let mut v = Self {
            tokens,
            mem_count,
            index: BTreeMap::new(),
        };
        v.reindex()?;
        Ok(v)
    }

    /// Payload tokens are the decimal strings `"0".."payload-1"`. Used by the
    /// synthetic tasks, where a vocabulary of `size` ids has `size - 4` payload
    /// symbols.
    pub fn numeric(size: usize, mem_count: usize) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::config(format!(
                "vocabulary size {size} leaves no payload ids"
            )));
        }
        let payload: Vec<String> = (0..size - RESERVED).map(|i| i.to_string()).collect();
        Self::new(&payload, mem_count)
    }

    /// Rebuilds the lookup table (needed after deserializing).
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, t) in self.tokens.iter().enumerate() {
            if self.index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate token {t:?}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn payload_range(&self) -> core::ops::Range<usize> {
        RESERVED..self.tokens.len() - self.mem_count
    }

    pub fn mem_count(&self) -> usize {
        self.mem_count
    }

    pub fn mem_ids(&self) -> Vec<usize> {
        (self.tokens.len() - self.mem_count..self.tokens.len()).collect()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("<unk>", |s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, pieces: &[String]) -> Vec<usize> {
        pieces.iter().map(|p| self.id(p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl core::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }
}

impl TaskKind {
    pub fn target(self, src: &[usize]) -> Vec<usize> {
        let mut t = src.to_vec();
        match self {
            Self::Copy => {}
            Self::Reverse => t.reverse(),
            Self::Sort => t.sort_unstable(),
        }
        t
    }
}

pub type Pair = (Vec<usize>, Vec<usize>);

/// `count` random pairs with lengths drawn uniformly from `len_min..=len_max`
/// and payload ids uniform over `4..vocab_size`.
pub fn gen_task(
    kind: TaskKind,
    len_min: usize,
    len_max: usize,
    vocab_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Pair>> {
    let mut rng = Rng::derive(seed, 0x7a5c, 0);
    task_pairs(kind, len_min, len_max, vocab_size, count, &mut rng)
}

pub(crate) fn task_pairs(
    kind: TaskKind,
    len_min: usize,
    len_max: usize,
    vocab_size: usize,
    count: usize,
    rng: &mut Rng,
) -> Result<Vec<Pair>> {
    if vocab_size <= RESERVED {
        return Err(Error::config(format!(
            "vocab_size {vocab_size} must exceed the {RESERVED} reserved ids"
        )));
    }
    if len_min == 0 || len_min > len_max {
        return Err(Error::config(format!("bad length range {len_min}..={len_max}")));
    }
    let payload = (vocab_size - RESERVED) as u64;
    Ok((0..count)
        .map(|_| {
            let len = len_min + rng.below((len_max - len_min + 1) as u64) as usize;
            let src: Vec<usize> = (0..len)
                .map(|_| RESERVED + rng.below(payload) as usize)
                .collect();
            let tgt = kind.target(&src);
            (src, tgt)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabMode {
    Word,
    Char,
}

impl core::str::FromStr for VocabMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(Error::config(format!("unknown vocab mode {other:?}"))),
        }
    }
}

pub fn tokenize(text: &str, mode: VocabMode) -> Vec<String> {
    match mode {
        VocabMode::Word => text.split_whitespace().map(|s| s.to_string()).collect(),
        VocabMode::Char => text.chars().map(|c| c.to_string()).collect(),
    }
}

pub fn detokenize(pieces: &[&str], mode: VocabMode) -> String {
    match mode {
        VocabMode::Word => pieces.join(" "),
        VocabMode::Char => pieces.concat(),
    }
}

/// A parsed parallel corpus with its two vocabularies.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<Pair>,
    pub vocab_src: Vocab,
    pub vocab_tgt: Vocab,
}

/// Parses `source<TAB>target` lines. Vocabularies are ordered by descending
/// frequency, ties broken by first appearance.
pub fn parse_tsv_corpus(
    text: &str,
    max_pairs: Option<usize>,
    mode: VocabMode,
    tgt_mem_count: usize,
) -> Result<Corpus> {
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if max_pairs.is_some_and(|m| raw.len() >= m) {
            break;
        }
        let line = line.strip_suffix('\r').unwrap_or(line);
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected exactly one tab, found {tabs}"),
            });
        }
        let (s, t) = line.split_once('\t').expect("one tab");
        raw.push((tokenize(s, mode), tokenize(t, mode)));
    }
    let vocab_src = frequency_vocab(raw.iter().map(|p| &p.0), 0)?;
    let vocab_tgt = frequency_vocab(raw.iter().map(|p| &p.1), tgt_mem_count)?;
    let pairs = raw
        .iter()
        .map(|(s, t)| (vocab_src.encode(s), vocab_tgt.encode(t)))
        .collect();
    Ok(Corpus {
        pairs,
        vocab_src,
        vocab_tgt,
    })
}

fn frequency_vocab<'a>(
    seqs: impl Iterator<Item = &'a Vec<String>>,
    mem_count: usize,
) -> Result<Vocab> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut order = 0;
    for seq in seqs {
        for tok in seq {
            let e = counts.entry(tok.as_str()).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut items: Vec<(&str, usize, usize)> =
        counts.into_iter().map(|(t, (c, o))| (t, c, o)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    let payload: Vec<&str> = items
        .into_iter()
        .map(|(t, _, _)| t)
        .filter(|t| !RESERVED_TOKENS.contains(t))
        .collect();
    Vocab::new(&payload, mem_count)
}

/// Row-major `[rows, width]` id matrix padded with [`PAD`] at row tails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub width: usize,
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl TokenGrid {
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Self {
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut pad = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend_from_slice(s);
            pad.extend(core::iter::repeat_n(false, s.len()));
            ids.extend(core::iter::repeat_n(PAD, width - s.len()));
            pad.extend(core::iter::repeat_n(true, width - s.len()));
        }
        Self {
            rows: seqs.len(),
            width,
            ids,
            pad,
        }
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.ids[r * self.width..(r + 1) * self.width]
    }

    pub fn row_pad(&self, r: usize) -> &[bool] {
        &self.pad[r * self.width..(r + 1) * self.width]
    }

    /// Row contents with tail padding removed.
    pub fn unpadded(&self, r: usize) -> Vec<usize> {
        self.row(r)
            .iter()
            .zip(self.row_pad(r))
            .filter(|(_, &p)| !p)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// One training batch. `tgt_in = [mem ids] + BOS + target` and
/// `tgt_out = [PAD per mem id] + target + EOS`, so memory positions carry no
/// loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: TokenGrid,
    pub tgt_in: TokenGrid,
    pub tgt_out: TokenGrid,
}

impl Batch {
    pub fn new(pairs: &[Pair], dec_mem_ids: &[usize]) -> Self {
        let srcs: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let mut tin = Vec::with_capacity(pairs.len());
        let mut tout = Vec::with_capacity(pairs.len());
        for (_, t) in pairs {
            let mut seq = dec_mem_ids.to_vec();
            seq.push(BOS);
            seq.extend_from_slice(t);
            let mut out = vec![PAD; dec_mem_ids.len()];
            out.extend_from_slice(t);
            out.push(EOS);
            tin.push(seq);
            tout.push(out);
        }
        Self {
            src: TokenGrid::from_sequences(&srcs),
            tgt_in: TokenGrid::from_sequences(&tin),
            tgt_out: TokenGrid::from_sequences(&tout),
        }
    }

    pub fn len(&self) -> usize {
        self.src.rows
    }

    pub fn is_empty(&self) -> bool {
        self.src.rows == 0
    }

    /// Count of non-pad target positions (the loss denominator).
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.ids.iter().filter(|&&id| id != PAD).count()
    }
}

/// Splits `pairs` into batches, optionally shuffled with a seed-determined
/// permutation.
pub fn batchify<'a>(
    pairs: &'a [Pair],
    batch_size: usize,
    dec_mem_ids: &[usize],
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    if shuffle {
        Rng::derive(seed, 0xba7c, 0).shuffle(&mut order);
    }
    let mem = dec_mem_ids.to_vec();
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let sel: Vec<Pair> = idx.iter().map(|&i| pairs[i].clone()).collect();
        Batch::new(&sel, &mem)
    }))
}

/// Endless stream of freshly generated task batches. Batch `step` depends only
/// on `(seed, step)`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: TaskKind,
    pub len_min: usize,
    pub len_max: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dec_mem_ids: Vec<usize>,
}

impl TaskStream {
    pub fn pairs_at(&self, step: u64) -> Result<Vec<Pair>> {
        let mut rng = Rng::derive(self.seed, 0x57e4, step);
        task_pairs(
            self.kind,
            self.len_min,
            self.len_max,
            self.vocab_size,
            self.batch_size,
            &mut rng,
        )
    }
}

/// Pairs cycled in seed-shuffled epochs; batch `step` depends only on
/// `(seed, step)`.
#[derive(Debug, Clone)]
pub struct CorpusStream {
    pub pairs: Vec<Pair>,
    pub batch_size: usize,
    pub seed: u64,
    pub dec_mem_ids: Vec<usize>,
}

impl CorpusStream {
    pub fn pairs_at(&self, step: u64) -> Vec<Pair> {
        let n = self.pairs.len();
        if n == 0 {
            return Vec::new();
        }
        let per_epoch = n.div_ceil(self.batch_size) as u64;
        let epoch = step / per_epoch;
        let within = (step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(self.seed, 0xe90c, epoch).shuffle(&mut order);
        let start = within * self.batch_size;
        let end = (start + self.batch_size).min(n);
        order[start..end].iter().map(|&i| self.pairs[i].clone()).collect()
    }
}

/// Source of training batches indexed by step.
pub trait BatchSource {
    fn batch(&self, step: u64) -> Result<Batch>;
}

impl BatchSource for TaskStream {
    fn batch(&self, step: u64) -> Result<Batch> {
        Ok(Batch::new(&self.pairs_at(step)?, &self.dec_mem_ids))
    }
}

impl BatchSource for CorpusStream {
    fn batch(&self, step: u64) -> Result<Batch> {
        let pairs = self.pairs_at(step);
        if pairs.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        Ok(Batch::new(&pairs, &self.dec_mem_ids))
    }
}

/// A fixed set of pre-built batches, cycled.
impl BatchSource for Vec<Batch> {
    fn batch(&self, step: u64) -> Result<Batch> {
        if self.is_empty() {
            return Err(Error::contract("no batches"));
        }
        Ok(self[step as usize % self.len()].clone())
    }
}

/// Parses `source<TAB>target` lines against existing vocabularies; unknown
/// tokens map to [`UNK`].
pub fn encode_tsv(text: &str, src: &Vocab, tgt: &Vocab, mode: VocabMode) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let tabs = line.matches('\t').count();
        if tabs != 1 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected exactly one tab, found {tabs}"),
            });
        }
        let (s, t) = line.split_once('\t').expect("one tab");
        pairs.push((src.encode(&tokenize(s, mode)), tgt.encode(&tokenize(t, mode))));
    }
    Ok(pairs)
}

/// Renders pairs as `src<TAB>tgt` lines using each side's vocabulary.
pub fn pairs_to_tsv(pairs: &[Pair], src: &Vocab, tgt: &Vocab, mode: VocabMode) -> String {
    let mut out = String::new();
    for (s, t) in pairs {
        let s: Vec<&str> = s.iter().map(|&i| src.token(i)).collect();
        let t: Vec<&str> = t.iter().map(|&i| tgt.token(i)).collect();
        out.push_str(&detokenize(&s, mode));
        out.push('\t');
        out.push_str(&detokenize(&t, mode));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_targets() {
        assert_eq!(TaskKind::Copy.target(&[5, 3, 9]), vec![5, 3, 9]);
        assert_eq!(TaskKind::Reverse.target(&[5, 3, 9]), vec![9, 3, 5]);
        assert_eq!(TaskKind::Sort.target(&[5, 3, 9]), vec![3, 5, 9]);
    }

    #[test]
    fn gen_task_is_deterministic_and_in_range() {
        let a = gen_task(TaskKind::Reverse, 2, 6, 20, 50, 11).unwrap();
        let b = gen_task(TaskKind::Reverse, 2, 6, 20, 50, 11).unwrap();
        assert_eq!(a, b);
        for (s, t) in &a {
            assert!((2..=6).contains(&s.len()));
            assert!(s.iter().all(|&i| (RESERVED..20).contains(&i)));
            assert_eq!(&TaskKind::Reverse.target(s), t);
        }
        assert!(gen_task(TaskKind::Copy, 2, 6, 4, 1, 0).is_err());
    }

    #[test]
    fn vocab_reserved_layout() {
        let v = Vocab::numeric(20, 3).unwrap();
        assert_eq!(v.len(), 23);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.payload_range(), 4..20);
        assert_eq!(v.mem_ids(), vec![20, 21, 22]);
        assert_eq!(v.token(20), "[mem]0");
        assert_eq!(v.id("nope"), UNK);
    }

    #[test]
    fn tsv_word_pair() {
        let c = parse_tsv_corpus("hallo\thello\n", None, VocabMode::Word, 0).unwrap();
        assert_eq!(c.pairs.len(), 1);
        assert_eq!(c.vocab_src.token(c.pairs[0].0[0]), "hallo");
        assert_eq!(c.vocab_tgt.token(c.pairs[0].1[0]), "hello");
    }

    #[test]
    fn tsv_empty_and_errors() {
        let c = parse_tsv_corpus("", None, VocabMode::Word, 0).unwrap();
        assert!(c.pairs.is_empty());
        assert_eq!(c.vocab_src.len(), RESERVED);
        let e = parse_tsv_corpus("a\tb\nno tab here\n", None, VocabMode::Word, 0).unwrap_err();
        assert_eq!(
            e,
            Error::Parse {
                line: 2,
                msg: "expected exactly one tab, found 0".into()
            }
        );
        assert!(matches!(
            parse_tsv_corpus("a\tb\tc", None, VocabMode::Char, 0),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn encode_tsv_round_trip() {
        let pairs = gen_task(TaskKind::Sort, 1, 5, 12, 20, 2).unwrap();
        let (vs, vt) = (Vocab::numeric(12, 0).unwrap(), Vocab::numeric(12, 2).unwrap());
        let text = pairs_to_tsv(&pairs, &vs, &vt, VocabMode::Word);
        assert_eq!(encode_tsv(&text, &vs, &vt, VocabMode::Word).unwrap(), pairs);
        let unk = encode_tsv("zz\t0\n", &vs, &vt, VocabMode::Word).unwrap();
        assert_eq!(unk, vec![(vec![UNK], vec![RESERVED])]);
        assert!(encode_tsv("a b\n", &vs, &vt, VocabMode::Word).is_err());
    }

    #[test]
    fn tsv_vocab_is_frequency_ordered_and_stable() {
        let text = "b a a\tx\nc a b\ty y\n";
        let c1 = parse_tsv_corpus(text, None, VocabMode::Word, 0).unwrap();
        let c2 = parse_tsv_corpus(text, None, VocabMode::Word, 0).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(&c1.vocab_src.tokens()[4..], &["a", "b", "c"]);
        assert_eq!(&c1.vocab_tgt.tokens()[4..], &["y", "x"]);
        let limited = parse_tsv_corpus(text, Some(1), VocabMode::Word, 0).unwrap();
        assert_eq!(limited.pairs.len(), 1);
    }

    #[test]
    fn char_round_trip() {
        let s = "grüße, Welt!";
        let pieces = tokenize(s, VocabMode::Char);
        let refs: Vec<&str> = pieces.iter().map(|p| p.as_str()).collect();
        assert_eq!(detokenize(&refs, VocabMode::Char), s);
        let w = tokenize("  a   b\tc ", VocabMode::Word);
        let refs: Vec<&str> = w.iter().map(|p| p.as_str()).collect();
        assert_eq!(detokenize(&refs, VocabMode::Word), "a b c");
    }

    #[test]
    fn batch_shapes_and_shift() {
        let pairs = vec![(vec![5, 6, 7], vec![5, 6, 7]), (vec![8, 9, 10, 11, 12], vec![8; 5])];
        let b = Batch::new(&pairs, &[30, 31]);
        assert_eq!(b.src.width, 5);
        assert_eq!(b.src.pad.iter().filter(|&&p| p).count(), 2);
        assert_eq!(b.tgt_in.row(0)[..4], [30, 31, BOS, 5]);
        for r in 0..2 {
            let tin = b.tgt_in.unpadded(r);
            let tout = b.tgt_out.unpadded(r);
            assert_eq!(tin.len(), tout.len());
            assert_eq!(tout[..2], [PAD, PAD]);
            assert_eq!(&tin[3..], &tout[2..tout.len() - 1]);
            assert_eq!(*tout.last().unwrap(), EOS);
        }
        assert_eq!(b.target_tokens(), 4 + 6);
        let single = Batch::new(&pairs[..1], &[]);
        assert!(single.src.pad.iter().all(|&p| !p));
    }

    #[test]
    fn batchify_counts_tokens() {
        let pairs = gen_task(TaskKind::Copy, 1, 9, 30, 103, 4).unwrap();
        let total: usize = pairs.iter().map(|p| p.0.len()).sum();
        for bs in [1, 7, 64, 200] {
            let batches: Vec<Batch> = batchify(&pairs, bs, &[], 9, true).unwrap().collect();
            let seen: usize = batches
                .iter()
                .map(|b| b.src.pad.iter().filter(|&&p| !p).count())
                .sum();
            assert_eq!(seen, total);
            assert_eq!(batches.len(), 103usize.div_ceil(bs));
        }
        let a: Vec<Batch> = batchify(&pairs, 10, &[], 1, true).unwrap().collect();
        let b: Vec<Batch> = batchify(&pairs, 10, &[], 1, true).unwrap().collect();
        assert_eq!(a, b);
        assert!(batchify(&pairs, 0, &[], 1, false).is_err());
    }

    #[test]
    fn corpus_stream_covers_epoch() {
        let pairs = gen_task(TaskKind::Copy, 1, 3, 10, 10, 0).unwrap();
        let s = CorpusStream {
            pairs: pairs.clone(),
            batch_size: 4,
            seed: 2,
            dec_mem_ids: vec![],
        };
        let mut seen: Vec<Pair> = (0..3).flat_map(|st| s.pairs_at(st)).collect();
        let mut want = pairs;
        seen.sort();
        want.sort();
        assert_eq!(seen, want);
    }
}
