//! Word segmentation with part-of-speech tags.
//!
//! Metric tokenization and subject extraction both go through the
//! [`Segmenter`] trait so callers can plug in their own tooling. The bundled
//! implementation is a forward-maximum-match segmenter over a word list with
//! ICTCLAS-style POS tags; characters not covered by the list become
//! single-character tokens tagged `x`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pinyin::is_chinese_char;

/// A segmented word with its part-of-speech tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub pos: String,
}

impl Word {
    /// Noun-like tags form subject candidates.
    pub fn is_noun(&self) -> bool {
        matches!(self.pos.as_str(), "n" | "nr" | "ns" | "nt" | "nz" | "vn" | "s")
    }
}

/// Pluggable word segmenter with shallow POS information.
pub trait Segmenter: Send + Sync {
    fn segment(&self, text: &str) -> Vec<Word>;

    /// Plain tokens, for metric computation.
    fn tokenize(&self, text: &str) -> Vec<String> {
        self.segment(text).into_iter().map(|w| w.text).collect()
    }
}

/// Forward maximum matching over a bundled word list.
pub struct LexiconSegmenter {
    words: HashMap<String, String>,
    max_len: usize,
}

impl LexiconSegmenter {
    pub fn bundled() -> Self {
        Self::parse(include_str!("../assets/word_lexicon.tsv"), "<bundled>")
            .expect("bundled word lexicon is valid")
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut words = HashMap::new();
        let mut max_len = 1;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, pos) = line.split_once('\t').ok_or_else(|| {
                Error::Lexicon(format!("{origin}:{}: expected word<TAB>pos", lineno + 1))
            })?;
            max_len = max_len.max(word.chars().count());
            words.insert(word.to_string(), pos.trim().to_string());
        }
        Ok(LexiconSegmenter { words, max_len })
    }
}

impl Segmenter for LexiconSegmenter {
    fn segment(&self, text: &str) -> Vec<Word> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            // runs of ASCII alphanumerics stay together (ids, latin words)
            if c.is_ascii_alphanumeric() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                out.push(Word {
                    text: chars[start..i].iter().collect(),
                    pos: if chars[start].is_ascii_digit() { "m" } else { "eng" }.to_string(),
                });
                continue;
            }
            let mut matched = false;
            let longest = self.max_len.min(chars.len() - i);
            for len in (2..=longest).rev() {
                let cand: String = chars[i..i + len].iter().collect();
                if let Some(pos) = self.words.get(&cand) {
                    out.push(Word {
                        text: cand,
                        pos: pos.clone(),
                    });
                    i += len;
                    matched = true;
                    break;
                }
            }
            if !matched {
                let single: String = chars[i..i + 1].iter().collect();
                let pos = self
                    .words
                    .get(&single)
                    .cloned()
                    .unwrap_or_else(|| if is_chinese_char(c) { "x" } else { "w" }.to_string());
                out.push(Word { text: single, pos });
                i += 1;
            }
        }
        out
    }
}

/// Subject of a riddle clause: the head noun phrase, falling back to the
/// first noun, then to the first token.
pub fn extract_subject(riddle: &str, segmenter: &dyn Segmenter) -> Result<String> {
    if riddle.trim().is_empty() {
        return Err(Error::InvalidInput("riddle is empty".into()));
    }
    let words = segmenter.segment(riddle);
    if words.is_empty() {
        return Err(Error::InvalidInput(format!(
            "riddle {riddle:?} yields no tokens"
        )));
    }
    // head noun phrase: the leading noun run, skipping numerals, quantifiers
    // and attributive particles that precede it
    let mut i = 0;
    while i < words.len() && matches!(words[i].pos.as_str(), "m" | "q" | "t" | "u" | "a" | "d") {
        i += 1;
    }
    if i < words.len() && words[i].is_noun() {
        let mut phrase = String::new();
        while i < words.len() && words[i].is_noun() {
            phrase.push_str(&words[i].text);
            i += 1;
        }
        return Ok(phrase);
    }
    if let Some(noun) = words.iter().find(|w| w.is_noun()) {
        return Ok(noun.text.clone());
    }
    Ok(words[0].text.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg() -> LexiconSegmenter {
        LexiconSegmenter::bundled()
    }

    #[test]
    fn segments_with_longest_match() {
        let s = seg();
        let words = s.tokenize("咸菜烧豆腐");
        assert_eq!(words, vec!["咸菜", "烧", "豆腐"]);
    }

    #[test]
    fn clause_subject_is_head_noun_phrase() {
        let s = seg();
        assert_eq!(extract_subject("稻草人救人", &s).unwrap(), "稻草人");
        assert_eq!(extract_subject("外甥打灯笼", &s).unwrap(), "外甥");
        assert_eq!(extract_subject("咸菜烧豆腐", &s).unwrap(), "咸菜");
    }

    #[test]
    fn leading_quantifiers_are_skipped() {
        let s = seg();
        assert_eq!(extract_subject("十五个吊桶打水", &s).unwrap(), "吊桶");
    }

    #[test]
    fn single_token_riddle_is_its_own_subject() {
        let s = seg();
        assert_eq!(extract_subject("豆腐", &s).unwrap(), "豆腐");
    }

    #[test]
    fn verb_initial_riddle_falls_back_to_first_noun() {
        let s = seg();
        // 打破 is not in the lexicon as a noun; first noun is 砂锅
        assert_eq!(extract_subject("打破砂锅", &s).unwrap(), "砂锅");
    }

    #[test]
    fn no_noun_at_all_falls_back_to_first_token() {
        let s = seg();
        let subject = extract_subject("打打打", &s).unwrap();
        assert_eq!(subject, "打");
    }

    #[test]
    fn empty_riddle_is_rejected() {
        let s = seg();
        assert!(extract_subject("  ", &s).is_err());
    }

    #[test]
    fn ascii_runs_stay_together() {
        let s = seg();
        let words = s.tokenize("豆腐 12");
        assert_eq!(words, vec!["豆腐", "12"]);
    }
}
