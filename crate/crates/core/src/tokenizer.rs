//! Byte-level BPE tokenizer.
//!
//! The alphabet is all 256 bytes, so encoding is total over arbitrary UTF-8
//! and `decode(encode(s)) == s` holds byte for byte. Special tokens are
//! atomic: they are matched before chunking and never participate in merges.
//! Merge training is greedy highest-count pair selection; ties go to the
//! lexicographically smallest merged byte string, then to the smaller
//! (left, right) pair, so training is deterministic for a fixed corpus.
//!
//! Merges never cross chunk boundaries. A chunk is either a whitespace run
//! or a word with at most one leading space ("the cat" chunks as "the",
//! " cat"), which keeps merged tokens word-shaped.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

/// Specials every vocabulary in this crate must carry.
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";
pub const SEP: &str = "[SEP]";
pub const NOEVT: &str = "[NOEVT]";
pub const CORE_SPECIALS: [&str; 5] = [BOS, EOS, PAD, SEP, NOEVT];

#[derive(Error, Debug)]
pub enum TokenizerError {
    #[error("tokenizer config: {0}")]
    Config(String),

    #[error("token id {0} out of range (vocab size {1})")]
    UnknownId(u32, usize),

    #[error("vocab file line {line}: {msg}")]
    VocabFile { line: usize, msg: String },

    #[error("vocab io: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Clone, Debug)]
pub struct Vocab {
    /// Literal text of each special, in id order (ids 0..specials.len()).
    specials: Vec<String>,
    /// Byte string of every token, indexed by id. Specials hold their
    /// literal text bytes; base ids specials.len()..+256 hold single bytes.
    token_bytes: Vec<Vec<u8>>,
    /// Merge rules in training order; entry k merges the two ids into token
    /// id specials.len() + 256 + k.
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
    special_ids: HashMap<String, u32>,
    bos: u32,
    eos: u32,
    pad: u32,
    sep: u32,
    noevt: u32,
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.token_bytes.len()
    }

    pub fn num_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn bos_id(&self) -> u32 {
        self.bos
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn sep_id(&self) -> u32 {
        self.sep
    }

    pub fn noevt_id(&self) -> u32 {
        self.noevt
    }

    pub fn special_id(&self, text: &str) -> Option<u32> {
        self.special_ids.get(text).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    /// Token text for display; special tokens render their literal form.
    pub fn token_text(&self, id: u32) -> Result<String> {
        let bytes = self
            .token_bytes
            .get(id as usize)
            .ok_or(TokenizerError::UnknownId(id, self.size()))?;
        Ok(String::from_utf8_lossy(bytes).into_owned())
    }

    fn base_id(&self, b: u8) -> u32 {
        self.specials.len() as u32 + b as u32
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for seg in split_on_specials(text, &self.specials) {
            match seg {
                Segment::Special(idx) => out.push(idx),
                Segment::Text(t) => {
                    for chunk in chunk_text(t.as_bytes()) {
                        self.encode_chunk(chunk, &mut out);
                    }
                }
            }
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut seq: Vec<u32> = chunk.iter().map(|&b| self.base_id(b)).collect();
        loop {
            // Lowest-rank merge present anywhere in the sequence fires next.
            let mut best: Option<(u32, usize)> = None;
            for i in 0..seq.len().saturating_sub(1) {
                if let Some(&rank) = self.merge_rank.get(&(seq[i], seq[i + 1])) {
                    if best.map_or(true, |(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let new_id = (self.specials.len() + 256) as u32 + rank;
            seq = apply_merge(&seq, a, b, new_id);
        }
        out.extend_from_slice(&seq);
    }

    /// Byte-concatenation of the id sequence. Ids produced by `encode`
    /// always decode to the original text; arbitrary generated ids may
    /// splice bytes into invalid UTF-8, which is replaced, not an error.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_bytes
                .get(id as usize)
                .ok_or(TokenizerError::UnknownId(id, self.size()))?;
            bytes.extend_from_slice(tok);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Like `decode` but drops the given special ids first (text cleanup
    /// after generation).
    pub fn decode_skipping(&self, ids: &[u32], skip: &[u32]) -> Result<String> {
        let kept: Vec<u32> = ids.iter().copied().filter(|i| !skip.contains(i)).collect();
        self.decode(&kept)
    }

    // ── Vocab file ────────────────────────────────────────────────────────

    /// Line-oriented form: a `#specials` section with one literal special
    /// per line, a `#base` section listing the 256 byte symbols in order,
    /// and a `#merges` section with one `left right` rule per line. Token
    /// bytes outside printable ASCII (and the space and backslash) are
    /// escaped as \xNN, so "e s" means merge "e" with "s" while "e\x20s"
    /// would be a token containing a space.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("#specials\n");
        for s in &self.specials {
            out.push_str(&escape_bytes(s.as_bytes()));
            out.push('\n');
        }
        out.push_str("#base\n");
        for b in 0u16..256 {
            out.push_str(&escape_bytes(&[b as u8]));
            out.push('\n');
        }
        out.push_str("#merges\n");
        for &(a, b) in &self.merges {
            out.push_str(&escape_bytes(&self.token_bytes[a as usize]));
            out.push(' ');
            out.push_str(&escape_bytes(&self.token_bytes[b as usize]));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let mut specials: Vec<String> = Vec::new();
        let mut merges_src: Vec<(usize, Vec<u8>, Vec<u8>)> = Vec::new();
        let mut base_seen = 0usize;

        #[derive(PartialEq)]
        enum Section {
            None,
            Specials,
            Base,
            Merges,
        }
        let mut section = Section::None;
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            match line {
                "#specials" => section = Section::Specials,
                "#base" => section = Section::Base,
                "#merges" => section = Section::Merges,
                "" => {}
                _ => match section {
                    Section::None => {
                        return Err(TokenizerError::VocabFile {
                            line: lineno,
                            msg: "content before #specials header".into(),
                        })
                    }
                    Section::Specials => {
                        let bytes = unescape(line).map_err(|msg| TokenizerError::VocabFile { line: lineno, msg })?;
                        let s = String::from_utf8(bytes).map_err(|_| TokenizerError::VocabFile {
                            line: lineno,
                            msg: "special token is not UTF-8".into(),
                        })?;
                        specials.push(s);
                    }
                    Section::Base => {
                        let bytes = unescape(line).map_err(|msg| TokenizerError::VocabFile { line: lineno, msg })?;
                        if bytes.len() != 1 || bytes[0] as usize != base_seen {
                            return Err(TokenizerError::VocabFile {
                                line: lineno,
                                msg: format!("base symbol {base_seen} out of order"),
                            });
                        }
                        base_seen += 1;
                    }
                    Section::Merges => {
                        let (l, r) = line.split_once(' ').ok_or_else(|| TokenizerError::VocabFile {
                            line: lineno,
                            msg: "merge rule needs `left right`".into(),
                        })?;
                        let lb = unescape(l).map_err(|msg| TokenizerError::VocabFile { line: lineno, msg })?;
                        let rb = unescape(r).map_err(|msg| TokenizerError::VocabFile { line: lineno, msg })?;
                        merges_src.push((lineno, lb, rb));
                    }
                },
            }
        }
        if base_seen != 256 {
            return Err(TokenizerError::VocabFile {
                line: 0,
                msg: format!("base section lists {base_seen} symbols, expected 256"),
            });
        }
        let mut vocab = Vocab::from_parts(specials)?;
        // Replay merges in file order; each rule must name byte strings that
        // already exist as tokens.
        let mut by_bytes: HashMap<Vec<u8>, u32> = vocab
            .token_bytes
            .iter()
            .enumerate()
            .map(|(i, b)| (b.clone(), i as u32))
            .collect();
        for (lineno, lb, rb) in merges_src {
            let (Some(&a), Some(&b)) = (by_bytes.get(&lb), by_bytes.get(&rb)) else {
                return Err(TokenizerError::VocabFile {
                    line: lineno,
                    msg: "merge rule names an unknown token".into(),
                });
            };
            let merged: Vec<u8> = [lb.as_slice(), rb.as_slice()].concat();
            if by_bytes.contains_key(&merged) {
                return Err(TokenizerError::VocabFile {
                    line: lineno,
                    msg: "merge output collides with an existing token".into(),
                });
            }
            let new_id = vocab.token_bytes.len() as u32;
            vocab.merge_rank.insert((a, b), vocab.merges.len() as u32);
            vocab.merges.push((a, b));
            by_bytes.insert(merged.clone(), new_id);
            vocab.token_bytes.push(merged);
        }
        Ok(vocab)
    }

    fn from_parts(specials: Vec<String>) -> Result<Vocab> {
        let mut special_ids = HashMap::new();
        let mut token_bytes = Vec::with_capacity(specials.len() + 256);
        for (i, s) in specials.iter().enumerate() {
            if s.is_empty() {
                return Err(TokenizerError::Config("empty special token".into()));
            }
            if s.len() == 1 {
                return Err(TokenizerError::Config(format!(
                    "special `{s}` collides with the base byte symbol of the same text"
                )));
            }
            if special_ids.insert(s.clone(), i as u32).is_some() {
                return Err(TokenizerError::Config(format!("duplicate special `{s}`")));
            }
            token_bytes.push(s.as_bytes().to_vec());
        }
        for b in 0u16..256 {
            token_bytes.push(vec![b as u8]);
        }
        let mut need = |name: &str| -> Result<u32> {
            special_ids
                .get(name)
                .copied()
                .ok_or_else(|| TokenizerError::Config(format!("required special `{name}` missing")))
        };
        let (bos, eos, pad, sep, noevt) = (need(BOS)?, need(EOS)?, need(PAD)?, need(SEP)?, need(NOEVT)?);
        Ok(Vocab {
            specials,
            token_bytes,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            special_ids,
            bos,
            eos,
            pad,
            sep,
            noevt,
        })
    }
}

/// Trains merges on `corpus` until the vocabulary reaches `target_size`
/// or no adjacent pair occurs at least twice. `specials` must include the
/// five core tokens; relation tokens ride along as extra specials.
pub fn train_bpe(corpus: &[&str], target_size: usize, specials: &[String]) -> Result<Vocab> {
    let mut vocab = Vocab::from_parts(specials.to_vec())?;
    let floor = vocab.size();
    if target_size < floor {
        return Err(TokenizerError::Config(format!(
            "target size {target_size} is below the {floor} reserved ids ({} specials + 256 base symbols)",
            specials.len()
        )));
    }

    // Chunk frequency table; merges operate inside chunks only.
    let mut chunk_freq: HashMap<Vec<u8>, u64> = HashMap::new();
    for text in corpus {
        for seg in split_on_specials(text, &vocab.specials) {
            if let Segment::Text(t) = seg {
                for chunk in chunk_text(t.as_bytes()) {
                    *chunk_freq.entry(chunk.to_vec()).or_insert(0) += 1;
                }
            }
        }
    }
    // Deterministic order for iteration: sort unique chunks.
    let mut chunks: Vec<(Vec<u32>, u64)> = {
        let mut items: Vec<(Vec<u8>, u64)> = chunk_freq.into_iter().collect();
        items.sort();
        items
            .into_iter()
            .map(|(bytes, f)| (bytes.iter().map(|&b| vocab.base_id(b)).collect(), f))
            .collect()
    };

    let mut by_bytes: HashMap<Vec<u8>, u32> = vocab
        .token_bytes
        .iter()
        .enumerate()
        .map(|(i, b)| (b.clone(), i as u32))
        .collect();

    while vocab.size() < target_size {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (seq, freq) in &chunks {
            for w in seq.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_insert(0) += freq;
            }
        }
        // Candidates sorted best-first: highest count, then smallest merged
        // byte string, then smallest (left, right).
        let mut candidates: Vec<((u32, u32), u64)> =
            pair_counts.into_iter().filter(|&(_, c)| c >= 2).collect();
        candidates.sort_by(|&((a1, b1), c1), &((a2, b2), c2)| {
            c2.cmp(&c1)
                .then_with(|| {
                    let m1: Vec<u8> = [
                        vocab.token_bytes[a1 as usize].as_slice(),
                        vocab.token_bytes[b1 as usize].as_slice(),
                    ]
                    .concat();
                    let m2: Vec<u8> = [
                        vocab.token_bytes[a2 as usize].as_slice(),
                        vocab.token_bytes[b2 as usize].as_slice(),
                    ]
                    .concat();
                    m1.cmp(&m2)
                })
                .then_with(|| {
                    (
                        vocab.token_bytes[a1 as usize].clone(),
                        vocab.token_bytes[b1 as usize].clone(),
                    )
                        .cmp(&(
                            vocab.token_bytes[a2 as usize].clone(),
                            vocab.token_bytes[b2 as usize].clone(),
                        ))
                })
        });
        // A merge whose byte string already names a token would break the
        // id<->bytes bijection; such candidates are skipped.
        let chosen = candidates.into_iter().find(|&((a, b), _)| {
            let merged: Vec<u8> = [
                vocab.token_bytes[a as usize].as_slice(),
                vocab.token_bytes[b as usize].as_slice(),
            ]
            .concat();
            !by_bytes.contains_key(&merged)
        });
        let Some(((a, b), _)) = chosen else { break };

        let merged: Vec<u8> = [
            vocab.token_bytes[a as usize].as_slice(),
            vocab.token_bytes[b as usize].as_slice(),
        ]
        .concat();
        let new_id = vocab.token_bytes.len() as u32;
        vocab.merge_rank.insert((a, b), vocab.merges.len() as u32);
        vocab.merges.push((a, b));
        by_bytes.insert(merged.clone(), new_id);
        vocab.token_bytes.push(merged);
        for (seq, _) in chunks.iter_mut() {
            *seq = apply_merge(seq, a, b, new_id);
        }
    }
    Ok(vocab)
}

/// Left-to-right single-pass replacement of adjacent (a, b) with `new_id`.
fn apply_merge(seq: &[u32], a: u32, b: u32, new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == a && seq[i + 1] == b {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

enum Segment<'a> {
    Text(&'a str),
    Special(u32),
}

/// Splits text around special-token occurrences, longest special first at
/// each position so overlapping specials resolve deterministically.
fn split_on_specials<'a>(text: &'a str, specials: &[String]) -> Vec<Segment<'a>> {
    let mut order: Vec<usize> = (0..specials.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(specials[i].len()));

    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut seg_start = 0;
    let mut pos = 0;
    'outer: while pos < bytes.len() {
        for &si in &order {
            let s = specials[si].as_bytes();
            if bytes[pos..].starts_with(s) {
                if seg_start < pos {
                    out.push(Segment::Text(&text[seg_start..pos]));
                }
                out.push(Segment::Special(si as u32));
                pos += s.len();
                seg_start = pos;
                continue 'outer;
            }
        }
        pos += 1;
    }
    if seg_start < bytes.len() {
        out.push(Segment::Text(&text[seg_start..]));
    }
    out
}

/// Word-shaped chunks: a word claims one preceding plain space; other
/// whitespace forms its own chunks.
fn chunk_text(bytes: &[u8]) -> Vec<&[u8]> {
    let is_ws = |b: u8| b == b' ' || b == b'\t' || b == b'\n' || b == b'\r';
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_ws(bytes[i]) {
            let mut j = i;
            while j < bytes.len() && is_ws(bytes[j]) {
                j += 1;
            }
            // Last byte of the run attaches to a following word if it is a
            // plain space.
            let attach = j < bytes.len() && bytes[j - 1] == b' ';
            let ws_end = if attach { j - 1 } else { j };
            if i < ws_end {
                out.push(&bytes[i..ws_end]);
            }
            if attach {
                let mut k = j;
                while k < bytes.len() && !is_ws(bytes[k]) {
                    k += 1;
                }
                out.push(&bytes[ws_end..k]);
                i = k;
            } else {
                i = j;
            }
        } else {
            let mut j = i;
            while j < bytes.len() && !is_ws(bytes[j]) {
                j += 1;
            }
            out.push(&bytes[i..j]);
            i = j;
        }
    }
    out
}

fn escape_bytes(bytes: &[u8]) -> String {
    let mut out = String::new();
    for &b in bytes {
        if (0x21..=0x7e).contains(&b) && b != b'\\' {
            out.push(b as char);
        } else {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<Vec<u8>, String> {
    let mut out = Vec::new();
    let bytes = s.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            if i + 3 >= bytes.len() || bytes[i + 1] != b'x' {
                return Err(format!("bad escape at byte {i}"));
            }
            let hex = std::str::from_utf8(&bytes[i + 2..i + 4]).map_err(|_| "bad escape".to_string())?;
            let v = u8::from_str_radix(hex, 16).map_err(|_| format!("bad hex escape `\\x{hex}`"))?;
            out.push(v);
            i += 4;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    Ok(out)
}

/// The core specials plus one bracketed token per relation label, the set a
/// path-aware vocabulary needs.
pub fn specials_with_relations(relations: &[String]) -> Vec<String> {
    let mut out: Vec<String> = CORE_SPECIALS.iter().map(|s| s.to_string()).collect();
    for r in relations {
        let tok = format!("[{r}]");
        if !out.contains(&tok) {
            out.push(tok);
        }
    }
    out
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_round_trips_arbitrary_text(s in "\\PC*") {
            let specials: Vec<String> = CORE_SPECIALS.iter().map(|x| x.to_string()).collect();
            let vocab = train_bpe(&["seed corpus text"], CORE_SPECIALS.len() + 256 + 4, &specials).unwrap();
            prop_assert_eq!(vocab.decode(&vocab.encode(&s)).unwrap(), s);
        }

        #[test]
        fn encode_is_total_and_ids_in_range(s in ".*") {
            let specials: Vec<String> = CORE_SPECIALS.iter().map(|x| x.to_string()).collect();
            let vocab = train_bpe(&["seed corpus text"], CORE_SPECIALS.len() + 256 + 4, &specials).unwrap();
            let ids = vocab.encode(&s);
            prop_assert!(ids.iter().all(|&i| (i as usize) < vocab.size()));
        }
    }
}
