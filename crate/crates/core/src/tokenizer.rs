//! Byte-pair subword vocabulary trained from plain text.
//!
//! The base alphabet is the set of bytes observed in the corpus; whitespace is
//! a hard split boundary and merges never cross it, so every subword belongs
//! to exactly one word. The first piece of each word carries a word-start
//! marker (`▁`) in its identity, which is what lets `decode` reinsert single
//! spaces and reproduce whitespace-normalized text exactly.
//!
//! Merge selection is deterministic: highest pair frequency wins, ties broken
//! by the lexicographically smaller (left, right) display pair.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Display marker carried by word-initial pieces.
pub const WORD_START: char = '\u{2581}';

pub const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

const VOCAB_HEADER_PREFIX: &str = "longenc-vocab v1 target_size=";

/// Ids of the special tokens; these always occupy the lowest ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
    pub mask: u32,
}

impl SpecialIds {
    const fn fixed() -> Self {
        Self {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
            mask: 4,
        }
    }

    pub const fn count() -> usize {
        SPECIAL_NAMES.len()
    }
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("target size {target} is below the floor {floor} (specials + base alphabet)")]
    TargetTooSmall { target: usize, floor: usize },
    #[error("vocab file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("vocab io: {0}")]
    Io(#[from] std::io::Error),
}

/// A non-special vocabulary entry: raw bytes plus the word-start flag.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Piece {
    word_start: bool,
    bytes: Vec<u8>,
}

impl Piece {
    fn display(&self) -> String {
        let mut s = String::new();
        if self.word_start {
            s.push(WORD_START);
        }
        for &b in &self.bytes {
            escape_byte(b, &mut s);
        }
        s
    }
}

fn escape_byte(b: u8, out: &mut String) {
    match b {
        b'\\' => out.push_str("\\\\"),
        b'\n' => out.push_str("\\n"),
        b'\r' => out.push_str("\\r"),
        b'\t' => out.push_str("\\t"),
        0x20..=0x7e => out.push(b as char),
        _ => {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
}

fn unescape(s: &str, line: usize) -> Result<Vec<u8>, TokenizerError> {
    let mut out = Vec::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0u8; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('\\') => out.push(b'\\'),
            Some('n') => out.push(b'\n'),
            Some('r') => out.push(b'\r'),
            Some('t') => out.push(b'\t'),
            Some('x') => {
                let hi = chars.next();
                let lo = chars.next();
                let (Some(hi), Some(lo)) = (hi, lo) else {
                    return Err(TokenizerError::Parse {
                        line,
                        reason: "truncated \\x escape".into(),
                    });
                };
                let v = u8::from_str_radix(&format!("{hi}{lo}"), 16).map_err(|_| {
                    TokenizerError::Parse {
                        line,
                        reason: format!("bad \\x escape \\x{hi}{lo}"),
                    }
                })?;
                out.push(v);
            }
            other => {
                return Err(TokenizerError::Parse {
                    line,
                    reason: format!("unknown escape {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

/// Immutable subword vocabulary. Safe to share across threads once trained.
#[derive(Clone, Debug)]
pub struct Vocab {
    /// Display form per id; specials first.
    id_to_token: Vec<String>,
    /// Piece per id (`None` for specials).
    pieces: Vec<Option<Piece>>,
    piece_ids: HashMap<Piece, u32>,
    specials: SpecialIds,
    target_size: usize,
    max_piece_len: usize,
}

impl Vocab {
    /// Trains a vocabulary of (at most) `target_size` entries.
    ///
    /// Training is deterministic given corpus order and `target_size`. If the
    /// corpus is fully merged before the target is reached the vocabulary
    /// stops growing early.
    pub fn train<I, T>(corpus: I, target_size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        // word -> occurrence count, in first-seen order for determinism.
        let mut word_counts: Vec<(Vec<u8>, u64)> = Vec::new();
        let mut word_index: HashMap<Vec<u8>, usize> = HashMap::new();
        for doc in corpus {
            for word in doc.as_ref().split_whitespace() {
                let bytes = word.as_bytes().to_vec();
                match word_index.get(&bytes) {
                    Some(&i) => word_counts[i].1 += 1,
                    None => {
                        word_index.insert(bytes.clone(), word_counts.len());
                        word_counts.push((bytes, 1));
                    }
                }
            }
        }
        if word_counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }

        // Base alphabet: every (word-start?, byte) symbol observed.
        let mut alphabet: Vec<Piece> = Vec::new();
        {
            let mut seen: HashMap<Piece, ()> = HashMap::new();
            for (word, _) in &word_counts {
                for (i, &b) in word.iter().enumerate() {
                    let p = Piece {
                        word_start: i == 0,
                        bytes: vec![b],
                    };
                    if seen.insert(p.clone(), ()).is_none() {
                        alphabet.push(p);
                    }
                }
            }
        }
        alphabet.sort_by_key(|p| p.display());
        let floor = SpecialIds::count() + alphabet.len();
        if target_size < floor {
            return Err(TokenizerError::TargetTooSmall {
                target: target_size,
                floor,
            });
        }

        let mut vocab = Self::with_pieces(alphabet, target_size);

        // Words as symbol-id sequences.
        let mut seqs: Vec<(Vec<u32>, u64)> = word_counts
            .iter()
            .map(|(word, count)| {
                let ids = word
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| {
                        vocab.piece_ids[&Piece {
                            word_start: i == 0,
                            bytes: vec![b],
                        }]
                    })
                    .collect();
                (ids, *count)
            })
            .collect();

        while vocab.id_to_token.len() < target_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (seq, count) in &seqs {
                for w in seq.windows(2) {
                    *pair_counts.entry((w[0], w[1])).or_insert(0) += count;
                }
            }
            // Argmax with a total order: count desc, then display pair asc.
            let best = pair_counts.into_iter().max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    let da = (
                        vocab.id_to_token[a.0 .0 as usize].as_str(),
                        vocab.id_to_token[a.0 .1 as usize].as_str(),
                    );
                    let db = (
                        vocab.id_to_token[b.0 .0 as usize].as_str(),
                        vocab.id_to_token[b.0 .1 as usize].as_str(),
                    );
                    db.cmp(&da) // reversed: smaller pair wins ties
                })
            });
            let Some(((left, right), _count)) = best else {
                break; // nothing left to merge
            };
            let merged = {
                let lp = vocab.pieces[left as usize].as_ref().expect("piece");
                let rp = vocab.pieces[right as usize].as_ref().expect("piece");
                let mut bytes = lp.bytes.clone();
                bytes.extend_from_slice(&rp.bytes);
                Piece {
                    word_start: lp.word_start,
                    bytes,
                }
            };
            let new_id = vocab.push_piece(merged);
            for (seq, _) in seqs.iter_mut() {
                let mut i = 0;
                let mut out = Vec::with_capacity(seq.len());
                while i < seq.len() {
                    if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(seq[i]);
                        i += 1;
                    }
                }
                *seq = out;
            }
        }
        Ok(vocab)
    }

    fn with_pieces(alphabet: Vec<Piece>, target_size: usize) -> Self {
        let mut vocab = Self {
            id_to_token: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            pieces: vec![None; SpecialIds::count()],
            piece_ids: HashMap::new(),
            specials: SpecialIds::fixed(),
            target_size,
            max_piece_len: 0,
        };
        for p in alphabet {
            vocab.push_piece(p);
        }
        vocab
    }

    fn push_piece(&mut self, piece: Piece) -> u32 {
        let id = self.id_to_token.len() as u32;
        self.max_piece_len = self.max_piece_len.max(piece.bytes.len());
        self.id_to_token.push(piece.display());
        self.piece_ids.insert(piece.clone(), id);
        self.pieces.push(Some(piece));
        id
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SpecialIds::count()
    }

    pub fn token_display(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    /// Lookup by display form, e.g. `"▁ab"`. Used mostly by tests and tools.
    pub fn id_of_display(&self, display: &str) -> Option<u32> {
        self.id_to_token
            .iter()
            .position(|t| t == display)
            .map(|i| i as u32)
    }

    /// Encodes one whitespace-delimited word into subword ids by greedy
    /// longest-prefix matching; unknown bytes map to `<unk>`.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let bytes = word.as_bytes();
        let mut out = Vec::new();
        let mut pos = 0;
        let mut word_start = true;
        while pos < bytes.len() {
            let max_n = self.max_piece_len.min(bytes.len() - pos).max(1);
            let mut matched = None;
            for n in (1..=max_n).rev() {
                let key = Piece {
                    word_start,
                    bytes: bytes[pos..pos + n].to_vec(),
                };
                if let Some(&id) = self.piece_ids.get(&key) {
                    matched = Some((id, n));
                    break;
                }
            }
            match matched {
                Some((id, n)) => {
                    out.push(id);
                    pos += n;
                }
                None => {
                    out.push(self.specials.unk);
                    pos += 1;
                }
            }
            word_start = false;
        }
        out
    }

    /// Encodes text; the output never contains `<pad>`.
    pub fn encode(&self, text: &str, add_cls_sep: bool) -> Vec<u32> {
        let mut out = Vec::new();
        if add_cls_sep {
            out.push(self.specials.cls);
        }
        for word in text.split_whitespace() {
            out.extend(self.encode_word(word));
        }
        if add_cls_sep {
            out.push(self.specials.sep);
        }
        out
    }

    /// Inverse of [`Vocab::encode`] up to whitespace normalization.
    ///
    /// Structural specials (`<pad>`, `<cls>`, `<sep>`) are dropped; `<mask>`
    /// renders literally and `<unk>` as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.specials.pad || id == self.specials.cls || id == self.specials.sep {
                continue;
            }
            if id == self.specials.unk {
                out.push('\u{fffd}');
                continue;
            }
            if id == self.specials.mask {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str("<mask>");
                continue;
            }
            match self.pieces.get(id as usize).and_then(|p| p.as_ref()) {
                Some(piece) => {
                    if piece.word_start && !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&String::from_utf8_lossy(&piece.bytes));
                }
                None => out.push('\u{fffd}'),
            }
        }
        out
    }

    /// Writes the vocabulary: a header line, then one token per line in id
    /// order (specials first).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), TokenizerError> {
        writeln!(w, "{VOCAB_HEADER_PREFIX}{}", self.target_size)?;
        for token in &self.id_to_token {
            writeln!(w, "{token}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, TokenizerError> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(TokenizerError::Parse {
            line: 1,
            reason: "empty vocab file".into(),
        })?;
        let header = header?;
        let target_size: usize = header
            .strip_prefix(VOCAB_HEADER_PREFIX)
            .and_then(|s| s.parse().ok())
            .ok_or(TokenizerError::Parse {
                line: 1,
                reason: format!("bad header {header:?}"),
            })?;

        let mut id_to_token = Vec::new();
        let mut pieces: Vec<Option<Piece>> = Vec::new();
        let mut piece_ids = HashMap::new();
        let mut max_piece_len = 0;
        for (lineno, line) in lines {
            let line = line?;
            let id = id_to_token.len();
            if id < SpecialIds::count() {
                if line != SPECIAL_NAMES[id] {
                    return Err(TokenizerError::Parse {
                        line: lineno + 1,
                        reason: format!("expected special {:?}, got {line:?}", SPECIAL_NAMES[id]),
                    });
                }
                id_to_token.push(line);
                pieces.push(None);
                continue;
            }
            let (word_start, rest) = match line.strip_prefix(WORD_START) {
                Some(rest) => (true, rest),
                None => (false, line.as_str()),
            };
            let bytes = unescape(rest, lineno + 1)?;
            if bytes.is_empty() {
                return Err(TokenizerError::Parse {
                    line: lineno + 1,
                    reason: "empty token".into(),
                });
            }
            let piece = Piece { word_start, bytes };
            max_piece_len = max_piece_len.max(piece.bytes.len());
            piece_ids.insert(piece.clone(), id as u32);
            id_to_token.push(piece.display());
            pieces.push(Some(piece));
        }
        if id_to_token.len() < SpecialIds::count() {
            return Err(TokenizerError::Parse {
                line: id_to_token.len() + 1,
                reason: "vocab file truncated before specials".into(),
            });
        }
        Ok(Self {
            id_to_token,
            pieces,
            piece_ids,
            specials: SpecialIds::fixed(),
            target_size,
            max_piece_len,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let file = fs::File::open(path)?;
        Self::read_from(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn normalize(text: &str) -> String {
        text.split_whitespace().collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn merges_repeated_pair_into_single_token() {
        // Hand-run BPE: corpus "ab ab ab" has base symbols {▁a, b}; the only
        // pair (▁a, b) occurs three times, so one merge yields "▁ab".
        let floor = SpecialIds::count() + 2;
        let vocab = Vocab::train(["ab ab ab"], floor + 1).unwrap();
        assert_eq!(vocab.size(), floor + 1);
        assert!(vocab.id_of_display("▁ab").is_some());
        assert_eq!(vocab.encode("ab", false).len(), 1);
    }

    #[test]
    fn floor_target_yields_alphabet_without_merges() {
        let floor = SpecialIds::count() + 2;
        let vocab = Vocab::train(["ab ab ab"], floor).unwrap();
        assert_eq!(vocab.size(), floor);
        assert!(vocab.id_of_display("▁a").is_some());
        assert!(vocab.id_of_display("b").is_some());
        assert!(vocab.id_of_display("▁ab").is_none());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = Vocab::train(Vec::<&str>::new(), 100).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
        let err = Vocab::train(["   \n\t "], 100).unwrap_err();
        assert!(matches!(err, TokenizerError::EmptyCorpus));
    }

    #[test]
    fn target_below_floor_is_an_error() {
        let err = Vocab::train(["ab ab"], 6).unwrap_err();
        match err {
            TokenizerError::TargetTooSmall { target, floor } => {
                assert_eq!(target, 6);
                assert_eq!(floor, SpecialIds::count() + 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_with_flag_wraps_in_cls_sep() {
        let vocab = Vocab::train(["ab ab ab"], 8).unwrap();
        let ids = vocab.encode("", true);
        assert_eq!(ids, vec![vocab.specials().cls, vocab.specials().sep]);
        let ids = vocab.encode("ab", true);
        assert_eq!(ids.first(), Some(&vocab.specials().cls));
        assert_eq!(ids.last(), Some(&vocab.specials().sep));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the cat sat on the mat", "the dog sat on the log"];
        let a = Vocab::train(corpus, 40).unwrap();
        let b = Vocab::train(corpus, 40).unwrap();
        assert_eq!(a.id_to_token, b.id_to_token);
    }

    #[test]
    fn corpus_round_trips_through_encode_decode() {
        let corpus = ["the cat sat on the mat", "a mat is not a cat", "dogs dig"];
        let vocab = Vocab::train(corpus, 60).unwrap();
        for doc in corpus {
            let ids = vocab.encode(doc, true);
            assert!(!ids.contains(&vocab.specials().pad));
            assert_eq!(vocab.decode(&ids), normalize(doc));
        }
    }

    #[test]
    fn unknown_bytes_map_to_unk() {
        let vocab = Vocab::train(["ab ab"], 8).unwrap();
        let ids = vocab.encode("az", false);
        assert!(ids.contains(&vocab.specials().unk));
    }

    #[test]
    fn vocab_file_round_trips() {
        let corpus = ["hello world", "tab\tand newline", "hello again"];
        let vocab = Vocab::train(corpus, 50).unwrap();
        let mut buf = Vec::new();
        vocab.write_to(&mut buf).unwrap();
        let loaded = Vocab::read_from(&buf[..]).unwrap();
        assert_eq!(vocab.id_to_token, loaded.id_to_token);
        assert_eq!(vocab.target_size(), loaded.target_size());
        for doc in corpus {
            assert_eq!(vocab.encode(doc, false), loaded.encode(doc, false));
        }
    }

    proptest! {
        #[test]
        fn random_ascii_round_trips(words in proptest::collection::vec("[a-z]{1,8}", 1..12)) {
            // Train on a corpus where every lowercase letter occurs both
            // word-initially and mid-word so no byte falls back to <unk>.
            let alphabet: String = ('a'..='z').map(|c| format!("{c} x{c}")).collect::<Vec<_>>().join(" ");
            let vocab = Vocab::train([alphabet.as_str(), "the quick brown fox"], 120).unwrap();
            let text = words.join(" ");
            let ids = vocab.encode(&text, false);
            prop_assert!(!ids.contains(&vocab.specials().pad));
            prop_assert_eq!(vocab.decode(&ids), normalize(&text));
        }
    }
}
