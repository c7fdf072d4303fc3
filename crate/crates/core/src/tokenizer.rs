//! Byte-pair-encoding subword vocabulary.
//!
//! Text is NFC-normalized and lowercased, split on whitespace, and every word
//! is prefixed with the boundary marker `▁` and cut into letter/digit runs and
//! single punctuation marks; merges stay inside those units. Merges are learned
//! greedily by pair frequency with lexicographic tie-breaking, and applied at
//! encode time in training order. Six special tokens occupy ids `0..6`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Word-initial boundary marker.
pub const WORD_MARKER: char = '\u{2581}';
pub const VOCAB_VERSION: u32 = 1;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab size {requested} must exceed {required} (specials + base alphabet)")]
    VocabTooSmall { requested: usize, required: usize },
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercased NFC form with whitespace collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Splits a word into merge units: letter/digit runs and single other
/// characters. The first unit carries the boundary marker. Merges never
/// cross unit boundaries, so "grill?" and "grill:" share the piece "▁grill".
fn merge_units(word: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut cur = String::from(WORD_MARKER);
    let mut prev_alnum: Option<bool> = None;
    for c in word.chars() {
        let alnum = c.is_alphanumeric();
        if prev_alnum.is_some_and(|p| !(p && alnum)) {
            units.push(std::mem::take(&mut cur));
        }
        cur.push(c);
        prev_alnum = Some(alnum);
    }
    units.push(cur);
    units
}

fn unit_symbols(unit: &str) -> Vec<String> {
    unit.chars().map(String::from).collect()
}

/// A trained subword vocabulary. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
}

impl Vocab {
    fn assemble(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(alphabet.iter().map(|c| c.to_string()));
        let mut token_to_id: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for (a, b) in &merges {
            let joined = format!("{a}{b}");
            if !token_to_id.contains_key(&joined) {
                token_to_id.insert(joined.clone(), tokens.len() as u32);
                tokens.push(joined);
            }
        }
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Self {
            alphabet,
            merges,
            tokens,
            token_to_id,
            merge_rank,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIAL
    }

    /// Encodes text into subword ids. Never emits CLS, SEP, BOS, EOS or PAD.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in normalize(text).split(' ').filter(|w| !w.is_empty()) {
            for unit in merge_units(word) {
                self.encode_unit(&unit, &mut out);
            }
        }
        out
    }

    fn encode_unit(&self, unit: &str, out: &mut Vec<u32>) {
        // Unknown characters become UNK and swallow a preceding marker.
        let mut pieces: Vec<Option<String>> = Vec::new();
        for sym in unit_symbols(unit) {
            if self.token_to_id.contains_key(&sym) {
                pieces.push(Some(sym));
            } else {
                if matches!(pieces.last(), Some(Some(p)) if p.starts_with(WORD_MARKER) && p.chars().count() == 1)
                {
                    pieces.pop();
                }
                pieces.push(None);
            }
        }
        // Merge within each run of known symbols.
        let mut run: Vec<String> = Vec::new();
        for piece in pieces {
            match piece {
                Some(p) => run.push(p),
                None => {
                    self.flush_run(&mut run, out);
                    out.push(UNK);
                }
            }
        }
        self.flush_run(&mut run, out);
    }

    fn flush_run(&self, run: &mut Vec<String>, out: &mut Vec<u32>) {
        if run.is_empty() {
            return;
        }
        let mut symbols = std::mem::take(run);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_rank
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        out.extend(symbols.iter().map(|s| self.token_to_id[s]));
    }

    /// Concatenates surface forms, drops special tokens and restores word
    /// boundaries from the marker.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut text = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if Self::is_special(id) {
                continue;
            }
            text.push_str(tok);
        }
        let spaced = text.replace(WORD_MARKER, " ");
        Ok(spaced.split_whitespace().collect::<Vec<_>>().join(" "))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            alphabet: self.alphabet.clone(),
            merges: self.merges.clone(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != VOCAB_VERSION {
            return Err(TokenizerError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if file.specials != SPECIAL_TOKENS {
            return Err(TokenizerError::Format("special token list differs".into()));
        }
        Ok(Self::assemble(file.alphabet, file.merges))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Learns BPE merges until the vocabulary holds `vocab_size` tokens or no
/// adjacent pair occurs at least twice.
pub fn train_bpe<S: AsRef<str>>(texts: &[S], vocab_size: usize) -> Result<Vocab, TokenizerError> {
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for t in texts {
        for w in normalize(t.as_ref()).split(' ').filter(|w| !w.is_empty()) {
            for unit in merge_units(w) {
                *word_freq.entry(unit).or_default() += 1;
            }
        }
    }
    let mut alphabet: Vec<char> = word_freq
        .keys()
        .flat_map(|w| w.chars())
        .collect();
    alphabet.sort_unstable();
    alphabet.dedup();
    let required = NUM_SPECIAL + alphabet.len();
    if vocab_size <= required {
        return Err(TokenizerError::VocabTooSmall {
            requested: vocab_size,
            required,
        });
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (unit_symbols(&w), f))
        .collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut known: std::collections::HashSet<String> =
        alphabet.iter().map(|c| c.to_string()).collect();
    let mut size = required;

    while size < vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(joined.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = merged;
        }
        if known.insert(joined) {
            size += 1;
        }
        merges.push((a, b));
    }
    Ok(Vocab::assemble(alphabet, merges))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_vocab() -> Vocab {
        let corpus = [
            "Is parking available at the Amber Lodge?",
            "yes, parking is free at amber lodge.",
            "does the cedar inn allow pets",
            "pets are not allowed at the cedar inn",
        ];
        train_bpe(&corpus, 120).unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = train_bpe(&["aaab", "aaab"], 20).unwrap();
        // pair counts: (▁,a)=2, (a,a)=4, (a,b)=2
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn ties_break_lexicographically() {
        // (▁,x)=2, (x,y)=2, (y,z)=2: smallest pair wins.
        let v = train_bpe(&["xyz", "xyz"], 30).unwrap();
        assert_eq!(v.merges()[0], ("x".to_string(), "y".to_string()));
    }

    #[test]
    fn punctuation_never_merges_into_words() {
        let v = train_bpe(&["grill? grill: grill. grill", "grill? grill?"], 60).unwrap();
        let head = |t: &str| v.encode(t)[0];
        assert_eq!(head("grill?"), head("grill:"));
        assert_eq!(head("grill?"), head("grill"));
        assert_eq!(v.token(head("grill")), Some("\u{2581}grill"));
        assert_eq!(v.decode(&v.encode("grill? grill.")).unwrap(), "grill? grill.");
    }

    #[test]
    fn too_small_vocab_rejected() {
        let err = train_bpe(&["abc"], 5).unwrap_err();
        assert!(matches!(err, TokenizerError::VocabTooSmall { .. }));
    }

    #[test]
    fn retraining_is_deterministic() {
        assert_eq!(sample_vocab().merges(), sample_vocab().merges());
    }

    #[test]
    fn empty_and_unknown_inputs() {
        let v = sample_vocab();
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("ζ ω"), vec![UNK, UNK]);
    }

    #[test]
    fn decode_drops_specials_and_checks_range() {
        let v = sample_vocab();
        assert_eq!(v.decode(&[]).unwrap(), "");
        let mut ids = vec![BOS];
        ids.extend(v.encode("free parking"));
        ids.extend([EOS, PAD]);
        assert_eq!(v.decode(&ids).unwrap(), "free parking");
        let bad = v.len() as u32;
        assert!(matches!(
            v.decode(&[bad]),
            Err(TokenizerError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn json_roundtrip() {
        let v = sample_vocab();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn token_ids_are_a_bijection() {
        let v = sample_vocab();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    proptest! {
        #[test]
        fn roundtrip_over_training_alphabet(words in prop::collection::vec("[a-z?.,]{1,8}", 0..6)) {
            let v = sample_vocab();
            let text = words.join(" ");
            let known: String = text.chars().filter(|c| *c == ' ' || v.alphabet().contains(c)).collect();
            let ids = v.encode(&known);
            prop_assert!(ids.iter().all(|&i| i == UNK || !Vocab::is_special(i)));
            prop_assert_eq!(v.decode(&ids).unwrap(), normalize(&known));
        }
    }
}
