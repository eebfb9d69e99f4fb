//! Deterministic word-level tokenizer with byte offsets.
//!
//! Tokens are maximal runs of alphanumeric characters (lowercased for vocab
//! lookup) or single punctuation characters, so a URL like
//! `http://10.44.3.7/verify` splits into the word and punctuation pieces the
//! attention analysis wants to see individually. Offsets always point into
//! the original text so attributions and heatmaps can be rendered over it.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const BOS: u32 = 3;
pub const CLS_SPAM: u32 = 4;
pub const CLS_LEGIT: u32 = 5;
pub const N_SPECIALS: usize = 6;

const SPECIAL_SURFACES: [(&str, u32); 6] = [
    ("<pad>", PAD),
    ("<unk>", UNK),
    ("<mask>", MASK),
    ("<bos>", BOS),
    ("SPAM", CLS_SPAM),
    ("LEGIT", CLS_LEGIT),
];

/// Token vocabulary. Ids are dense in [0, len); ids 0..5 are the fixed
/// specials and are never produced by text tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from the most frequent tokens across the given
    /// corpora. Ties break lexicographically; rebuilding from the same
    /// corpora yields an identical vocabulary.
    pub fn build(corpora: &[&Corpus], max_size: usize) -> Result<Vocab> {
        let extra: [&str; 0] = [];
        Vocab::build_with_extra_text(corpora, &extra, max_size)
    }

    /// Like [`Vocab::build`] but with supplementary documents counted as if
    /// they were corpus text; used to guarantee coverage of the prompt
    /// template and chain-of-thought tag words.
    pub fn build_with_extra_text(
        corpora: &[&Corpus],
        extra_texts: &[&str],
        max_size: usize,
    ) -> Result<Vocab> {
        if max_size <= N_SPECIALS {
            return Err(Error::new(
                "tokenizer",
                "TOKENIZER_BAD_CONFIG",
                alloc::format!("max_size must exceed {N_SPECIALS}, got {max_size}"),
            ));
        }
        if corpora.iter().all(|c| c.is_empty()) && extra_texts.is_empty() {
            return Err(Error::new(
                "tokenizer",
                "TOKENIZER_EMPTY_CORPORA",
                "cannot build a vocabulary from empty corpora",
            ));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut count_text = |text: &str| {
            for piece in split_pieces(text) {
                *counts.entry(piece.lower).or_insert(0) += 1;
            }
        };
        for c in corpora {
            for r in &c.records {
                count_text(&r.text);
            }
        }
        for t in extra_texts {
            count_text(t);
        }

        // Highest count first, then lexicographic. BTreeMap iteration is
        // already lexicographic, so a stable sort by count finishes the job.
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - N_SPECIALS);

        let mut token_to_id = BTreeMap::new();
        let mut id_to_token = Vec::with_capacity(N_SPECIALS + ranked.len());
        for (surface, id) in SPECIAL_SURFACES {
            token_to_id.insert(surface.to_string(), id);
            id_to_token.push(surface.to_string());
        }
        for (i, (tok, _)) in ranked.into_iter().enumerate() {
            token_to_id.insert(tok.clone(), (N_SPECIALS + i) as u32);
            id_to_token.push(tok);
        }
        Ok(Vocab { token_to_id, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn surface(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }
}

/// A tokenized text: ids plus byte spans into the source. Spans are
/// non-overlapping and increasing; synthetic positions (BOS, tokens taken
/// from template text rather than the source) carry empty spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Positions holding ordinary text tokens (everything except specials).
    pub fn text_positions(&self) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id as usize >= N_SPECIALS)
            .map(|(i, _)| i)
            .collect()
    }
}

struct Piece {
    lower: String,
    start: usize,
    end: usize,
}

fn split_pieces(text: &str) -> Vec<Piece> {
    let mut pieces = Vec::new();
    let bytes = text.char_indices().collect::<Vec<_>>();
    let mut i = 0;
    while i < bytes.len() {
        let (start, ch) = bytes[i];
        if ch.is_whitespace() {
            i += 1;
            continue;
        }
        if ch.is_alphanumeric() {
            let mut j = i;
            while j < bytes.len() && bytes[j].1.is_alphanumeric() {
                j += 1;
            }
            let end = if j < bytes.len() { bytes[j].0 } else { text.len() };
            pieces.push(Piece {
                lower: text[start..end].to_lowercase(),
                start,
                end,
            });
            i = j;
        } else {
            let end = start + ch.len_utf8();
            pieces.push(Piece {
                lower: text[start..end].to_string(),
                start,
                end,
            });
            i += 1;
        }
    }
    pieces
}

/// Encodes text: BOS first, unknown words as UNK, truncated to `max_len`
/// tokens total. Offsets cover the retained words only.
pub fn encode(vocab: &Vocab, text: &str, max_len: usize) -> TokenSeq {
    debug_assert!(max_len >= 1);
    let mut ids = Vec::new();
    let mut offsets = Vec::new();
    ids.push(BOS);
    offsets.push((0, 0));
    for piece in split_pieces(text) {
        if ids.len() >= max_len {
            break;
        }
        ids.push(vocab.id_of(&piece.lower).unwrap_or(UNK));
        offsets.push((piece.start, piece.end));
    }
    TokenSeq { ids, offsets }
}

/// Replaces every text position not in `keep` with MASK. BOS (and any other
/// special position) is always kept; length is unchanged.
pub fn mask_subset(seq: &TokenSeq, keep: &[usize]) -> Result<TokenSeq> {
    for &k in keep {
        if k >= seq.len() {
            return Err(Error::new(
                "tokenizer",
                "TOKENIZER_INDEX_RANGE",
                alloc::format!("keep index {k} out of range for length {}", seq.len()),
            ));
        }
    }
    let mut out = seq.clone();
    for (pos, id) in out.ids.iter_mut().enumerate() {
        if (*id as usize) >= N_SPECIALS && !keep.contains(&pos) {
            *id = MASK;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusStyle, EmailRecord, Label};

    fn corpus_of(texts: &[&str]) -> Corpus {
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| EmailRecord {
                id: alloc::format!("m{i}"),
                text: (*t).into(),
                label: Label::Spam,
                source: "test".into(),
                split: None,
            })
            .collect();
        Corpus::new("test", CorpusStyle::External, records).unwrap()
    }

    #[test]
    fn vocab_keeps_most_frequent_tokens() {
        let c = corpus_of(&["free free money"]);
        let v = Vocab::build(&[&c], 8).unwrap();
        assert!(v.id_of("free").is_some());
        assert!(v.id_of("money").is_some());
        // "free" occurs twice so it outranks "money".
        assert!(v.id_of("free").unwrap() < v.id_of("money").unwrap());
    }

    #[test]
    fn vocab_breaks_ties_lexicographically() {
        let c = corpus_of(&["b a"]);
        let v = Vocab::build(&[&c], 8).unwrap();
        assert!(v.id_of("a").unwrap() < v.id_of("b").unwrap());
    }

    #[test]
    fn vocab_specials_are_fixed_and_reserved() {
        let c = corpus_of(&["hello world"]);
        let v = Vocab::build(&[&c], 10).unwrap();
        assert_eq!(v.id_of("<pad>"), Some(PAD));
        assert_eq!(v.id_of("SPAM"), Some(CLS_SPAM));
        assert_eq!(v.id_of("LEGIT"), Some(CLS_LEGIT));
        assert_eq!(v.surface(CLS_SPAM), "SPAM");
        // Lowercasing means text tokens can never collide with the
        // uppercase label surfaces.
        let seq = encode(&v, "SPAM LEGIT", 16);
        assert!(seq.ids.iter().all(|&id| id != CLS_SPAM && id != CLS_LEGIT));
    }

    #[test]
    fn vocab_is_deterministic() {
        let c = corpus_of(&["one two three two three three"]);
        let a = Vocab::build(&[&c], 12).unwrap();
        let b = Vocab::build(&[&c], 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn vocab_rejects_tiny_max_size_and_empty_corpora() {
        let c = corpus_of(&["hello"]);
        assert_eq!(Vocab::build(&[&c], 6).unwrap_err().code, "TOKENIZER_BAD_CONFIG");
        let empty = Corpus::new("e", CorpusStyle::External, alloc::vec![]).unwrap();
        assert_eq!(Vocab::build(&[&empty], 10).unwrap_err().code, "TOKENIZER_EMPTY_CORPORA");
    }

    #[test]
    fn encode_empty_text_is_just_bos() {
        let c = corpus_of(&["x"]);
        let v = Vocab::build(&[&c], 8).unwrap();
        let seq = encode(&v, "", 16);
        assert_eq!(seq.ids, alloc::vec![BOS]);
    }

    #[test]
    fn encode_marks_unknown_words_and_keeps_offsets() {
        let c = corpus_of(&["known words only"]);
        let v = Vocab::build(&[&c], 16).unwrap();
        let text = "known zzzunseen words";
        let seq = encode(&v, text, 16);
        assert_eq!(seq.ids[2], UNK);
        let (s, e) = seq.offsets[2];
        assert_eq!(&text[s..e], "zzzunseen");
    }

    #[test]
    fn encode_slicing_offsets_recovers_lowercased_words() {
        let c = corpus_of(&["The Quick brown-fox jumps http://10.0.0.1/x"]);
        let v = Vocab::build(&[&c], 64).unwrap();
        let text = "The Quick brown-fox jumps http://10.0.0.1/x";
        let seq = encode(&v, text, 64);
        for (pos, &(s, e)) in seq.offsets.iter().enumerate() {
            if pos == 0 {
                continue;
            }
            let slice = text[s..e].to_lowercase();
            assert_eq!(v.surface(seq.ids[pos]), slice, "offset slice should match token surface");
        }
    }

    #[test]
    fn encode_truncates_to_max_len() {
        let c = corpus_of(&["a b c d e f g h"]);
        let v = Vocab::build(&[&c], 32).unwrap();
        let seq = encode(&v, "a b c d e f g h", 4);
        assert_eq!(seq.len(), 4);
        assert_eq!(seq.ids[0], BOS);
    }

    #[test]
    fn offsets_are_monotone_and_non_overlapping() {
        let c = corpus_of(&["hello, world! visit http://192.168.12.34/verify now"]);
        let v = Vocab::build(&[&c], 64).unwrap();
        let seq = encode(&v, "hello, world! visit http://192.168.12.34/verify now", 64);
        for w in seq.offsets.windows(2).skip(1) {
            assert!(w[0].1 <= w[1].0, "offsets must be increasing: {:?}", w);
        }
        assert_eq!(seq.ids.len(), seq.offsets.len());
    }

    #[test]
    fn mask_subset_edge_cases() {
        let c = corpus_of(&["a b c d"]);
        let v = Vocab::build(&[&c], 16).unwrap();
        let seq = encode(&v, "a b c d", 16);
        // keep everything -> identity
        let keep_all: Vec<usize> = (0..seq.len()).collect();
        assert_eq!(mask_subset(&seq, &keep_all).unwrap(), seq);
        // keep nothing -> every non-BOS position masked
        let masked = mask_subset(&seq, &[]).unwrap();
        assert_eq!(masked.ids[0], BOS);
        assert!(masked.ids[1..].iter().all(|&id| id == MASK));
        assert_eq!(masked.len(), seq.len());
        // arithmetic: masked count = len - keep - 1 (the BOS)
        let partial = mask_subset(&seq, &[1, 3]).unwrap();
        let n_masked = partial.ids.iter().filter(|&&id| id == MASK).count();
        assert_eq!(n_masked, seq.len() - 2 - 1);
        // out of range -> error
        assert_eq!(mask_subset(&seq, &[99]).unwrap_err().code, "TOKENIZER_INDEX_RANGE");
    }

    #[test]
    fn mask_subset_is_idempotent_and_intersects() {
        let c = corpus_of(&["a b c d e"]);
        let v = Vocab::build(&[&c], 16).unwrap();
        let seq = encode(&v, "a b c d e", 16);
        let keep = alloc::vec![2usize, 4];
        let once = mask_subset(&seq, &keep).unwrap();
        let twice = mask_subset(&once, &keep).unwrap();
        assert_eq!(once, twice);
        // masking with K1 then K2 equals masking with K1 ∩ K2
        let k1 = alloc::vec![1usize, 2, 3];
        let k2 = alloc::vec![2usize, 3, 4];
        let seq12 = mask_subset(&mask_subset(&seq, &k1).unwrap(), &k2).unwrap();
        let inter = alloc::vec![2usize, 3];
        assert_eq!(seq12, mask_subset(&seq, &inter).unwrap());
    }
}
