//! Subword tokenization.
//!
//! The bundled implementation is a unigram language model over character
//! n-gram pieces, trained on the corpus with hard-EM (Viterbi counts) and
//! pruned to a target vocabulary. Frequent multi-character words (豆腐,
//! 灯笼...) end up as single pieces, which is what the Pinyin alignment
//! relies on. Alternative tokenizers plug in through [`Tokenizer`].

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Ids reserved at the bottom of every vocabulary.
pub const PAD_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SPACE_ID: usize = 3;
/// First sentinel id; sentinels occupy a contiguous block.
pub const SENTINEL_BASE: usize = 4;

const UNK_SCORE: f64 = -20.0;

/// A tokenized unit: id plus the piece text it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub text: String,
}

/// Pluggable subword tokenizer.
pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> Vec<Token>;
    fn decode(&self, ids: &[usize]) -> String;
    fn vocab_size(&self) -> usize;
    fn sentinel_count(&self) -> usize;

    fn encode_ids(&self, text: &str) -> Vec<usize> {
        self.encode(text).into_iter().map(|t| t.id).collect()
    }

    fn sentinel_id(&self, k: usize) -> usize {
        assert!(k < self.sentinel_count(), "sentinel {k} out of budget");
        SENTINEL_BASE + k
    }

    fn is_special(&self, id: usize) -> bool {
        id < SENTINEL_BASE + self.sentinel_count()
    }
}

#[derive(Debug, Clone)]
struct Piece {
    text: String,
    score: f64,
}

/// Unigram-LM tokenizer trained on a line corpus.
pub struct UnigramTokenizer {
    pieces: Vec<Piece>,
    lookup: HashMap<String, usize>,
    max_piece_chars: usize,
    sentinels: usize,
}

/// Training knobs for [`UnigramTokenizer::train`].
#[derive(Debug, Clone)]
pub struct UnigramTrainerConfig {
    /// Target vocabulary size including specials and sentinels.
    pub vocab_size: usize,
    pub max_piece_chars: usize,
    /// Minimum raw count for a multi-character candidate piece.
    pub min_count: usize,
    pub em_iterations: usize,
    pub sentinels: usize,
}

impl Default for UnigramTrainerConfig {
    fn default() -> Self {
        UnigramTrainerConfig {
            vocab_size: 1536,
            max_piece_chars: 4,
            min_count: 2,
            em_iterations: 3,
            sentinels: 32,
        }
    }
}

impl UnigramTokenizer {
    /// Train on text lines. Single characters seen in the corpus (plus ASCII
    /// digits) are always kept so any corpus text stays encodable.
    pub fn train(lines: &[String], config: &UnigramTrainerConfig) -> Result<Self> {
        if lines.is_empty() {
            return Err(Error::Tokenizer("training corpus is empty".into()));
        }
        let segments: Vec<Vec<char>> = lines
            .iter()
            .flat_map(|l| l.split_whitespace())
            .map(|s| s.chars().collect())
            .collect();
        if segments.is_empty() {
            return Err(Error::Tokenizer("training corpus is blank".into()));
        }

        // candidate pieces: all substrings up to max_piece_chars
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for seg in &segments {
            for start in 0..seg.len() {
                for len in 1..=config.max_piece_chars.min(seg.len() - start) {
                    let piece: String = seg[start..start + len].iter().collect();
                    *counts.entry(piece).or_insert(0) += 1;
                }
            }
        }
        for d in '0'..='9' {
            counts.entry(d.to_string()).or_insert(1);
        }
        counts.retain(|piece, count| piece.chars().count() == 1 || *count >= config.min_count);

        let total: f64 = counts.values().map(|&c| c as f64).sum();
        let mut scores: BTreeMap<String, f64> = counts
            .iter()
            .map(|(p, &c)| (p.clone(), (c as f64 / total).ln()))
            .collect();

        // hard EM: Viterbi-segment the corpus, re-estimate from piece usage
        for _ in 0..config.em_iterations {
            let mut usage: BTreeMap<&str, usize> = BTreeMap::new();
            for seg in &segments {
                for piece in viterbi_pieces(seg, &scores, config.max_piece_chars) {
                    *usage.entry(piece).or_insert(0) += 1;
                }
            }
            let total_usage: f64 = usage.values().map(|&c| c as f64).sum();
            let floor = (0.5 / total_usage).ln();
            let new_scores: BTreeMap<String, f64> = scores
                .keys()
                .filter_map(|p| {
                    let used = usage.get(p.as_str()).copied().unwrap_or(0);
                    if used == 0 && p.chars().count() > 1 {
                        None // prune unused multi-char pieces
                    } else if used == 0 {
                        Some((p.clone(), floor))
                    } else {
                        Some((p.clone(), (used as f64 / total_usage).ln()))
                    }
                })
                .collect();
            scores = new_scores;
        }

        // prune to the vocab target: specials and single chars always stay,
        // multi-char pieces ranked by score
        let n_special = SENTINEL_BASE + config.sentinels;
        let singles: Vec<(String, f64)> = scores
            .iter()
            .filter(|(p, _)| p.chars().count() == 1)
            .map(|(p, s)| (p.clone(), *s))
            .collect();
        let mut multis: Vec<(String, f64)> = scores
            .iter()
            .filter(|(p, _)| p.chars().count() > 1)
            .map(|(p, s)| (p.clone(), *s))
            .collect();
        multis.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = config
            .vocab_size
            .saturating_sub(n_special + singles.len());
        multis.truncate(budget);

        let mut pieces: Vec<Piece> = Vec::new();
        for k in 0..n_special {
            let text = match k {
                PAD_ID => "<pad>".to_string(),
                EOS_ID => "</s>".to_string(),
                UNK_ID => "<unk>".to_string(),
                SPACE_ID => "<sp>".to_string(),
                _ => format!("<mask_{}>", k - SENTINEL_BASE),
            };
            pieces.push(Piece { text, score: 0.0 });
        }
        for (text, score) in singles.into_iter().chain(multis) {
            pieces.push(Piece { text, score });
        }

        Ok(Self::from_pieces(pieces, config.max_piece_chars, config.sentinels))
    }

    fn from_pieces(pieces: Vec<Piece>, max_piece_chars: usize, sentinels: usize) -> Self {
        let lookup = pieces
            .iter()
            .enumerate()
            .skip(SENTINEL_BASE + sentinels)
            .map(|(i, p)| (p.text.clone(), i))
            .collect();
        UnigramTokenizer {
            pieces,
            lookup,
            max_piece_chars,
            sentinels,
        }
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(|p| p.text.as_str())
    }

    pub fn piece_id(&self, text: &str) -> Option<usize> {
        self.lookup.get(text).copied()
    }

    /// Persist as TSV: `piece<TAB>score<TAB>kind`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        writeln!(file, "# unigram vocabulary\t{}\t{}", self.max_piece_chars, self.sentinels)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let n_special = SENTINEL_BASE + self.sentinels;
        for (i, p) in self.pieces.iter().enumerate() {
            let kind = if i < n_special { "special" } else { "piece" };
            writeln!(file, "{}\t{}\t{}", p.text, p.score, kind)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Tokenizer("empty vocabulary file".into()))?;
        let mut header_fields = header.split('\t');
        if header_fields.next() != Some("# unigram vocabulary") {
            return Err(Error::Tokenizer("missing vocabulary header".into()));
        }
        let max_piece_chars: usize = header_fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Tokenizer("bad max piece length in header".into()))?;
        let sentinels: usize = header_fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Tokenizer("bad sentinel count in header".into()))?;
        let mut pieces = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(text), Some(score), Some(_kind)) =
                (fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::Tokenizer(format!(
                    "{}:{}: expected piece<TAB>score<TAB>kind",
                    path.display(),
                    lineno + 2
                )));
            };
            let score: f64 = score.parse().map_err(|_| {
                Error::Tokenizer(format!("{}:{}: bad score", path.display(), lineno + 2))
            })?;
            pieces.push(Piece {
                text: text.to_string(),
                score,
            });
        }
        if pieces.len() < SENTINEL_BASE + sentinels {
            return Err(Error::Tokenizer("vocabulary too small for specials".into()));
        }
        Ok(Self::from_pieces(pieces, max_piece_chars, sentinels))
    }
}

impl Tokenizer for UnigramTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for chunk in split_keeping_spaces(text) {
            match chunk {
                Chunk::Space => out.push(Token {
                    id: SPACE_ID,
                    text: " ".to_string(),
                }),
                Chunk::Segment(chars) => {
                    for piece in self.viterbi(&chars) {
                        out.push(piece);
                    }
                }
            }
        }
        out
    }

    fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == SPACE_ID {
                out.push(' ');
            } else if self.is_special(id) {
                continue;
            } else if let Some(p) = self.pieces.get(id) {
                out.push_str(&p.text);
            }
        }
        out
    }

    fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    fn sentinel_count(&self) -> usize {
        self.sentinels
    }
}

impl UnigramTokenizer {
    fn viterbi(&self, chars: &[char]) -> Vec<Token> {
        // dp[j]: best (score, prev index, piece id) for prefix of length j
        let n = chars.len();
        let mut dp: Vec<Option<(f64, usize, usize)>> = vec![None; n + 1];
        dp[0] = Some((0.0, 0, usize::MAX));
        for i in 0..n {
            let Some((base, _, _)) = dp[i] else { continue };
            for len in 1..=self.max_piece_chars.min(n - i) {
                let cand: String = chars[i..i + len].iter().collect();
                let (id, score) = match self.lookup.get(&cand) {
                    Some(&id) => (id, self.pieces[id].score),
                    None if len == 1 => (UNK_ID, UNK_SCORE),
                    None => continue,
                };
                let total = base + score;
                let better = match dp[i + len] {
                    None => true,
                    Some((best, _, _)) => total > best,
                };
                if better {
                    dp[i + len] = Some((total, i, id));
                }
            }
        }
        let mut rev = Vec::new();
        let mut j = n;
        while j > 0 {
            let (_, prev, id) = dp[j].expect("viterbi lattice is connected");
            let text = if id == UNK_ID {
                chars[prev..j].iter().collect()
            } else {
                self.pieces[id].text.clone()
            };
            rev.push(Token { id, text });
            j = prev;
        }
        rev.reverse();
        rev
    }
}

enum Chunk {
    Space,
    Segment(Vec<char>),
}

fn split_keeping_spaces(text: &str) -> Vec<Chunk> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                out.push(Chunk::Segment(std::mem::take(&mut current)));
            }
            out.push(Chunk::Space);
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        out.push(Chunk::Segment(current));
    }
    out
}

fn viterbi_pieces<'a>(
    chars: &[char],
    scores: &'a BTreeMap<String, f64>,
    max_len: usize,
) -> Vec<&'a str> {
    let n = chars.len();
    let mut dp: Vec<Option<(f64, usize, Option<&'a str>)>> = vec![None; n + 1];
    dp[0] = Some((0.0, 0, None));
    for i in 0..n {
        let Some((base, _, _)) = dp[i] else { continue };
        for len in 1..=max_len.min(n - i) {
            let cand: String = chars[i..i + len].iter().collect();
            let Some((key, score)) = scores.get_key_value(&cand) else {
                if len == 1 {
                    let total = base + UNK_SCORE;
                    if dp[i + 1].map_or(true, |(b, _, _)| total > b) {
                        dp[i + 1] = Some((total, i, None));
                    }
                }
                continue;
            };
            let total = base + score;
            if dp[i + len].map_or(true, |(b, _, _)| total > b) {
                dp[i + len] = Some((total, i, Some(key.as_str())));
            }
        }
    }
    let mut rev = Vec::new();
    let mut j = n;
    while j > 0 {
        let (_, prev, piece) = dp[j].expect("viterbi lattice is connected");
        if let Some(p) = piece {
            rev.push(p);
        }
        j = prev;
    }
    rev.reverse();
    rev
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_sayings;
    use crate::pinyin::PinyinLexicon;
    use std::path::Path;

    fn fixture_lines() -> Vec<String> {
        let lex = PinyinLexicon::bundled();
        let fixture = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../fixtures/corpus/xiehouyu_500.jsonl"
        );
        let sayings = load_sayings(Path::new(fixture), &lex).unwrap();
        sayings.iter().map(|s| s.full_text()).collect()
    }

    fn trained() -> UnigramTokenizer {
        UnigramTokenizer::train(&fixture_lines(), &UnigramTrainerConfig::default()).unwrap()
    }

    #[test]
    fn corpus_text_round_trips() {
        let tok = trained();
        for line in fixture_lines().iter().take(60) {
            let ids = tok.encode_ids(line);
            assert_eq!(&tok.decode(&ids), line, "round trip failed for {line}");
        }
    }

    #[test]
    fn frequent_words_become_single_pieces() {
        let tok = trained();
        let tokens = tok.encode("咸菜烧豆腐");
        let texts: Vec<&str> = tokens.iter().map(|t| t.text.as_str()).collect();
        assert!(texts.contains(&"豆腐"), "豆腐 should be one piece, got {texts:?}");
    }

    #[test]
    fn spaces_and_digits_encode_for_scratch_inputs() {
        let tok = trained();
        let ids = tok.encode_ids("豆腐 12");
        assert!(ids.contains(&SPACE_ID));
        assert_eq!(tok.decode(&ids), "豆腐 12");
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let tok = trained();
        let tokens = tok.encode("咸菜㚻");
        assert!(tokens.iter().any(|t| t.id == UNK_ID));
    }

    #[test]
    fn training_is_deterministic() {
        let lines = fixture_lines();
        let a = UnigramTokenizer::train(&lines, &UnigramTrainerConfig::default()).unwrap();
        let b = UnigramTokenizer::train(&lines, &UnigramTrainerConfig::default()).unwrap();
        assert_eq!(a.vocab_size(), b.vocab_size());
        for id in 0..a.vocab_size() {
            assert_eq!(a.piece(id), b.piece(id));
        }
    }

    #[test]
    fn save_load_round_trips() {
        let tok = trained();
        let tmp = tempfile::NamedTempFile::new().unwrap();
        tok.save(tmp.path()).unwrap();
        let loaded = UnigramTokenizer::load(tmp.path()).unwrap();
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
        assert_eq!(loaded.sentinel_count(), tok.sentinel_count());
        let line = "外甥打灯笼——照旧（舅）";
        assert_eq!(tok.encode_ids(line), loaded.encode_ids(line));
    }

    #[test]
    fn specials_occupy_reserved_ids() {
        let tok = trained();
        assert_eq!(tok.piece(PAD_ID), Some("<pad>"));
        assert_eq!(tok.piece(EOS_ID), Some("</s>"));
        assert_eq!(tok.piece(UNK_ID), Some("<unk>"));
        assert_eq!(tok.piece(SPACE_ID), Some("<sp>"));
        assert_eq!(tok.sentinel_id(0), SENTINEL_BASE);
        assert!(tok.is_special(tok.sentinel_id(tok.sentinel_count() - 1)));
        // special literals in plain text must not map to special ids
        let ids = tok.encode_ids("<pad>");
        assert!(!ids.contains(&PAD_ID));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(UnigramTokenizer::train(&[], &UnigramTrainerConfig::default()).is_err());
        assert!(
            UnigramTokenizer::train(&["   ".to_string()], &UnigramTrainerConfig::default())
                .is_err()
        );
    }
}
