//! Tone-stripped romanization of Chinese text and its alignment with
//! subword tokens.
//!
//! Romanization comes from a bundled lookup table so builds stay hermetic.
//! The table has one entry per line, `key<TAB>reading[,reading...]`:
//! a single-character key lists alternative readings (most common first),
//! a multi-character key lists exactly one syllable per character and is
//! used to resolve heteronyms when the surrounding text matches.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of distinct symbols a [`PinyinSequence`] can contain:
/// pad, no-pinyin placeholder, syllable separator, and `a`–`z`.
pub const ALPHABET_SIZE: usize = 29;

/// Default per-token romanization length (two syllables plus separator,
/// padded).
pub const DEFAULT_PINYIN_LEN: usize = 12;

const MAX_WORD_LEN: usize = 4;

/// One symbol of a romanization sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinyinSymbol {
    Pad,
    /// Token (or character) with no romanization.
    NoPinyin,
    /// Boundary between the syllables of a multi-character token.
    Separator,
    /// Lowercase letter `a`–`z`.
    Letter(u8),
}

impl PinyinSymbol {
    /// Dense id for embedding lookup, `< ALPHABET_SIZE`.
    pub fn id(self) -> usize {
        match self {
            PinyinSymbol::Pad => 0,
            PinyinSymbol::NoPinyin => 1,
            PinyinSymbol::Separator => 2,
            PinyinSymbol::Letter(b) => 3 + (b - b'a') as usize,
        }
    }
}

/// Romanization of one token, padded or truncated to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinyinSequence {
    symbols: Vec<PinyinSymbol>,
    token_text: String,
}

impl PinyinSequence {
    pub fn symbols(&self) -> &[PinyinSymbol] {
        &self.symbols
    }

    pub fn token_text(&self) -> &str {
        &self.token_text
    }

    pub fn ids(&self) -> Vec<usize> {
        self.symbols.iter().map(|s| s.id()).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// A sequence of `len` pad symbols.
    pub fn all_pad(len: usize) -> Self {
        PinyinSequence {
            symbols: vec![PinyinSymbol::Pad; len],
            token_text: String::new(),
        }
    }

    /// Readable form with pads trimmed, e.g. `dou|fu`.
    pub fn syllable_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            match s {
                PinyinSymbol::Pad => break,
                PinyinSymbol::NoPinyin => out.push('?'),
                PinyinSymbol::Separator => out.push('|'),
                PinyinSymbol::Letter(b) => out.push(*b as char),
            }
        }
        out
    }
}

impl fmt::Display for PinyinSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.syllable_string())
    }
}

/// CJK ideograph test used throughout the toolkit.
pub fn is_chinese_char(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

/// Character and word romanization table.
pub struct PinyinLexicon {
    /// char -> readings, most common first
    chars: HashMap<char, Vec<String>>,
    /// word -> one syllable per char
    words: HashMap<String, Vec<String>>,
}

impl PinyinLexicon {
    /// The lexicon shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../assets/pinyin_lexicon.tsv"), "<bundled>")
            .expect("bundled lexicon is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut chars = HashMap::new();
        let mut words = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, readings) = line.split_once('\t').ok_or_else(|| Error::Lexicon(
                format!("{origin}:{}: expected key<TAB>readings", lineno + 1),
            ))?;
            let readings: Vec<String> = readings.split(',').map(|r| r.trim().to_string()).collect();
            for r in &readings {
                if r.is_empty() || !r.bytes().all(|b| b.is_ascii_lowercase()) {
                    return Err(Error::Lexicon(format!(
                        "{origin}:{}: reading {r:?} is not plain a-z",
                        lineno + 1
                    )));
                }
            }
            let key_chars: Vec<char> = key.chars().collect();
            if key_chars.len() == 1 {
                chars.insert(key_chars[0], readings);
            } else {
                if readings.len() != key_chars.len() {
                    return Err(Error::Lexicon(format!(
                        "{origin}:{}: word {key:?} needs {} syllables, got {}",
                        lineno + 1,
                        key_chars.len(),
                        readings.len()
                    )));
                }
                words.insert(key.to_string(), readings);
            }
        }
        Ok(PinyinLexicon { chars, words })
    }

    pub fn contains(&self, c: char) -> bool {
        self.chars.contains_key(&c)
    }

    /// All known tone-stripped readings of a character.
    pub fn readings(&self, c: char) -> &[String] {
        self.chars.get(&c).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Context-aware romanization of a single character. The context is the
    /// surrounding text; when it contains the character inside a known word,
    /// the word-level reading wins, otherwise the character's most common
    /// reading is used. Characters outside the table yield `None`.
    pub fn romanize(&self, c: char, context: &str) -> Option<String> {
        let chars: Vec<char> = context.chars().collect();
        let pos = chars.iter().position(|&x| x == c);
        match pos {
            Some(i) => self.romanize_at(&chars, i),
            None => self.readings(c).first().cloned(),
        }
    }

    /// Romanization of `chars[i]` given its sentence.
    pub fn romanize_at(&self, chars: &[char], i: usize) -> Option<String> {
        let c = chars[i];
        if !self.chars.contains_key(&c) {
            return None;
        }
        // longest word containing position i wins
        for len in (2..=MAX_WORD_LEN.min(chars.len())).rev() {
            let lo = (i + 1).saturating_sub(len);
            for start in lo..=i.min(chars.len() - len) {
                let word: String = chars[start..start + len].iter().collect();
                if let Some(sylls) = self.words.get(&word) {
                    return Some(sylls[i - start].clone());
                }
            }
        }
        self.readings(c).first().cloned()
    }

    /// Whether two characters share a tone-stripped reading. Symmetric, and
    /// reflexive for characters present in the table.
    pub fn same_pinyin(&self, a: char, b: char) -> bool {
        self.shared_pinyin(a, b).is_some()
    }

    /// First reading of `a` (in preference order) that `b` also has.
    pub fn shared_pinyin(&self, a: char, b: char) -> Option<String> {
        let rb = self.readings(b);
        self.readings(a).iter().find(|r| rb.contains(r)).cloned()
    }

    /// Romanization of one token: syllables of its Chinese characters joined
    /// by separators, padded or right-truncated to `pinyin_len`. A token with
    /// no Chinese characters yields a single no-pinyin placeholder; a Chinese
    /// character missing from the table contributes a placeholder in place of
    /// its syllable.
    pub fn token_pinyin(&self, token: &str, context: &str, pinyin_len: usize) -> PinyinSequence {
        let ctx_chars: Vec<char> = context.chars().collect();
        let token_start = context
            .find(token)
            .map(|byte| context[..byte].chars().count());
        let mut symbols = Vec::new();
        let mut any_chinese = false;
        for (k, c) in token.chars().enumerate() {
            if !is_chinese_char(c) {
                continue;
            }
            if any_chinese {
                symbols.push(PinyinSymbol::Separator);
            }
            any_chinese = true;
            let pos = match token_start {
                Some(s) => Some(s + k),
                None => ctx_chars.iter().position(|&x| x == c),
            };
            let syll = pos
                .and_then(|i| self.romanize_at(&ctx_chars, i))
                .or_else(|| self.readings(c).first().cloned());
            match syll {
                Some(s) => symbols.extend(s.bytes().map(PinyinSymbol::Letter)),
                None => symbols.push(PinyinSymbol::NoPinyin),
            }
        }
        if !any_chinese {
            symbols.push(PinyinSymbol::NoPinyin);
        }
        symbols.truncate(pinyin_len);
        symbols.resize(pinyin_len, PinyinSymbol::Pad);
        PinyinSequence {
            symbols,
            token_text: token.to_string(),
        }
    }

    /// One `PinyinSequence` per token, positionally aligned. `token_ids` is
    /// only used to check alignment with `token_texts`.
    pub fn align(
        &self,
        token_ids: &[usize],
        token_texts: &[String],
        context: &str,
        pinyin_len: usize,
    ) -> Result<Vec<PinyinSequence>> {
        if token_ids.len() != token_texts.len() {
            return Err(Error::InvalidInput(format!(
                "token ids ({}) and texts ({}) differ in length",
                token_ids.len(),
                token_texts.len()
            )));
        }
        Ok(token_texts
            .iter()
            .map(|t| self.token_pinyin(t, context, pinyin_len))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lex() -> PinyinLexicon {
        PinyinLexicon::bundled()
    }

    #[test]
    fn heteronym_resolved_by_word_context() {
        let lex = lex();
        assert_eq!(lex.romanize('乐', "快乐").as_deref(), Some("le"));
        assert_eq!(lex.romanize('乐', "乐器").as_deref(), Some("yue"));
    }

    #[test]
    fn homophone_pair_shares_reading() {
        let lex = lex();
        assert_eq!(lex.romanize('言', "有言在先").as_deref(), Some("yan"));
        assert_eq!(lex.romanize('盐', "盐").as_deref(), Some("yan"));
        assert_eq!(lex.shared_pinyin('言', '盐').as_deref(), Some("yan"));
    }

    #[test]
    fn unknown_character_yields_placeholder() {
        let lex = lex();
        assert_eq!(lex.romanize('㚻', "㚻"), None);
        let seq = lex.token_pinyin("㚻", "㚻", 12);
        assert_eq!(seq.symbols()[0], PinyinSymbol::NoPinyin);
    }

    #[test]
    fn token_pinyin_multi_character() {
        let lex = lex();
        let seq = lex.token_pinyin("豆腐", "咸菜烧豆腐", 12);
        assert_eq!(seq.syllable_string(), "dou|fu");
        assert_eq!(seq.len(), 12);
        let seq = lex.token_pinyin("咸菜", "咸菜烧豆腐", 12);
        assert_eq!(seq.syllable_string(), "xian|cai");
    }

    #[test]
    fn ascii_token_is_single_placeholder() {
        let lex = lex();
        let seq = lex.token_pinyin("id", "subject id", 12);
        assert_eq!(seq.symbols()[0], PinyinSymbol::NoPinyin);
        assert!(seq.symbols()[1..].iter().all(|s| *s == PinyinSymbol::Pad));
    }

    #[test]
    fn syllable_count_matches_chinese_char_count() {
        let lex = lex();
        // 3 chars -> 3 syllables, 2 separators (before padding)
        let seq = lex.token_pinyin("稻草人", "稻草人救人", 16);
        let seps = seq
            .symbols()
            .iter()
            .filter(|s| **s == PinyinSymbol::Separator)
            .count();
        assert_eq!(seps, 2);
        assert_eq!(seq.syllable_string(), "dao|cao|ren");
    }

    #[test]
    fn long_romanization_truncates_right() {
        let lex = lex();
        let seq = lex.token_pinyin("稻草人", "稻草人", 6);
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.syllable_string(), "dao|ca");
    }

    #[test]
    fn align_checks_lengths_and_is_positional() {
        let lex = lex();
        let texts: Vec<String> = ["咸菜", "烧", "豆腐"].iter().map(|s| s.to_string()).collect();
        let seqs = lex.align(&[0, 1, 2], &texts, "咸菜烧豆腐", 12).unwrap();
        assert_eq!(seqs.len(), 3);
        assert_eq!(seqs[0].syllable_string(), "xian|cai");
        assert_eq!(seqs[1].syllable_string(), "shao");
        assert_eq!(seqs[2].syllable_string(), "dou|fu");
        assert!(lex.align(&[0, 1], &texts, "咸菜烧豆腐", 12).is_err());

        let ascii: Vec<String> = ["abc", "12"].iter().map(|s| s.to_string()).collect();
        let seqs = lex.align(&[0, 1], &ascii, "abc 12", 12).unwrap();
        assert!(seqs
            .iter()
            .all(|s| s.symbols()[0] == PinyinSymbol::NoPinyin));
    }

    #[test]
    fn no_tone_marks_in_bundled_lexicon() {
        let lex = lex();
        for readings in lex.chars.values() {
            for r in readings {
                assert!(r.bytes().all(|b| b.is_ascii_lowercase()));
            }
        }
    }

    proptest! {
        #[test]
        fn same_pinyin_symmetric(i in 0usize..500, j in 0usize..500) {
            let lex = lex();
            let chars: Vec<char> = lex.chars.keys().copied().collect();
            let a = chars[i % chars.len()];
            let b = chars[j % chars.len()];
            prop_assert_eq!(lex.same_pinyin(a, b), lex.same_pinyin(b, a));
            prop_assert!(lex.same_pinyin(a, a));
        }

        #[test]
        fn sequences_contain_only_alphabet_symbols(s in "\\PC{1,8}") {
            let lex = lex();
            let seq = lex.token_pinyin(&s, &s, 12);
            prop_assert_eq!(seq.len(), 12);
            for sym in seq.symbols() {
                prop_assert!(sym.id() < ALPHABET_SIZE);
            }
        }
    }
}
