//! Corpus of two-part allegorical sayings: loading, deterministic splits,
//! subject assignment, and formatting for the two generation tasks.
//!
//! The on-disk format is UTF-8 JSON lines with `riddle` and `explanation`
//! fields (plus `subject`, `id`, `split` and `seed` once assigned). Homophone
//! markup in explanations uses full-width parentheses, `本字（谐音字）`;
//! half-width parentheses are normalized on load.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pinyin::{is_chinese_char, PinyinLexicon};
use crate::segment::{extract_subject, Segmenter};

/// Separator between riddle and explanation when a saying is printed whole.
pub const SAYING_SEPARATOR: &str = "——";

/// A surface/intended character pair sharing a tone-stripped romanization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Homophone {
    /// Character written in the explanation proper.
    pub surface: char,
    /// Punned character shown in parentheses.
    pub intended: char,
    /// The shared tone-stripped romanization.
    pub pinyin: String,
}

/// One riddle/explanation pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllegoricalSaying {
    pub riddle: String,
    /// Explanation text with homophone markup preserved.
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub homophones: Vec<Homophone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Index within the subject group, 0-based in corpus order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

impl AllegoricalSaying {
    /// `riddle——explanation`, the whole-saying rendering.
    pub fn full_text(&self) -> String {
        format!("{}{}{}", self.riddle, SAYING_SEPARATOR, self.explanation)
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    riddle: String,
    explanation: String,
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    id: Option<u32>,
}

#[derive(Debug, Serialize)]
struct SplitRecord<'a> {
    #[serde(flatten)]
    saying: &'a AllegoricalSaying,
    split: &'a str,
    seed: u64,
}

/// Train/validation/test partition of a corpus.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<AllegoricalSaying>,
    pub validation: Vec<AllegoricalSaying>,
    pub test: Vec<AllegoricalSaying>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Normalize half-width parentheses to the canonical full-width markers.
fn normalize_parens(text: &str) -> String {
    text.replace('(', "（").replace(')', "）")
}

/// Extract homophone triples from `本字（谐音字）` markup. A parenthesized
/// group only counts as homophone markup when every inner character pairs
/// with the character at the same offset before the group and the two share
/// a tone-stripped reading; anything else is ordinary parenthetical text.
pub fn parse_homophones(explanation: &str, lexicon: &PinyinLexicon) -> Vec<Homophone> {
    let chars: Vec<char> = explanation.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] != '（' {
            i += 1;
            continue;
        }
        let Some(close) = chars[i + 1..].iter().position(|&c| c == '）') else {
            break;
        };
        let close = close + i + 1;
        let inner = &chars[i + 1..close];
        if !inner.is_empty() && i >= inner.len() {
            let surface = &chars[i - inner.len()..i];
            let pairs: Vec<Option<Homophone>> = surface
                .iter()
                .zip(inner)
                .map(|(&s, &t)| {
                    if !is_chinese_char(s) || !is_chinese_char(t) {
                        return None;
                    }
                    lexicon.shared_pinyin(s, t).map(|pinyin| Homophone {
                        surface: s,
                        intended: t,
                        pinyin,
                    })
                })
                .collect();
            if pairs.iter().all(|p| p.is_some()) {
                out.extend(pairs.into_iter().flatten());
            }
        }
        i = close + 1;
    }
    out
}

/// Load sayings from a JSON-lines corpus file. Each record must provide
/// non-empty `riddle` and `explanation` fields; malformed records fail with
/// their line number. An empty file yields an empty list.
pub fn load_sayings(path: &Path, lexicon: &PinyinLexicon) -> Result<Vec<AllegoricalSaying>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let riddle = raw.riddle.trim().to_string();
        let explanation = normalize_parens(raw.explanation.trim());
        if riddle.is_empty() || explanation.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "riddle and explanation must be non-empty".into(),
            });
        }
        let homophones = parse_homophones(&explanation, lexicon);
        out.push(AllegoricalSaying {
            riddle,
            explanation,
            homophones,
            subject: raw.subject,
            id: raw.id,
        });
    }
    Ok(out)
}

/// Serialize sayings back to the corpus format, one JSON object per line.
pub fn save_sayings(path: &Path, sayings: &[AllegoricalSaying]) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for s in sayings {
        let line = serde_json::to_string(&SerializedSaying::from(s))
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Round-trip serialization keeps only the source fields so reloading
/// reproduces riddle/explanation byte-for-byte.
#[derive(Serialize)]
struct SerializedSaying<'a> {
    riddle: &'a str,
    explanation: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    subject: &'a Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    id: &'a Option<u32>,
}

impl<'a> From<&'a AllegoricalSaying> for SerializedSaying<'a> {
    fn from(s: &'a AllegoricalSaying) -> Self {
        SerializedSaying {
            riddle: &s.riddle,
            explanation: &s.explanation,
            subject: &s.subject,
            id: &s.id,
        }
    }
}

/// Write one split file (corpus format plus `split` and `seed` fields).
pub fn save_split_manifest(
    path: &Path,
    sayings: &[AllegoricalSaying],
    split: &str,
    seed: u64,
) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for saying in sayings {
        let line = serde_json::to_string(&SplitRecord {
            saying,
            split,
            seed,
        })
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Deterministic shuffle by seed, then contiguous partition. Sizes are
/// floor-allocated from the ratios with the remainder going to train.
pub fn split_dataset(
    sayings: &[AllegoricalSaying],
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    if ratios.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            ratios.iter().sum::<f64>()
        )));
    }
    if sayings.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "cannot split {} sayings into three non-empty parts",
            sayings.len()
        )));
    }
    let mut shuffled: Vec<AllegoricalSaying> = sayings.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let n = shuffled.len();
    let n_val = (n as f64 * ratios[1]).floor() as usize;
    let n_test = (n as f64 * ratios[2]).floor() as usize;
    let n_train = n - n_val - n_test;

    let test = shuffled.split_off(n - n_test);
    let validation = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train: shuffled,
        validation,
        test,
        seed,
        ratios,
    })
}

/// Assign subjects (via the segmenter) and 0-based per-subject ids in corpus
/// order. `(subject, id)` pairs are unique across the dataset afterwards.
pub fn assign_subjects(
    sayings: &mut [AllegoricalSaying],
    segmenter: &dyn Segmenter,
) -> Result<()> {
    let mut counters: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    for saying in sayings.iter_mut() {
        let subject = extract_subject(&saying.riddle, segmenter)?;
        let counter = counters.entry(subject.clone()).or_insert(0);
        saying.subject = Some(subject);
        saying.id = Some(*counter);
        *counter += 1;
    }
    Ok(())
}

/// Completion task: input is the riddle, target the explanation (homophone
/// markup preserved verbatim).
pub fn format_completion_example(saying: &AllegoricalSaying) -> (String, String) {
    (saying.riddle.clone(), saying.explanation.clone())
}

/// Scratch task: input is `{subject} id`, target the whole saying.
pub fn format_scratch_example(saying: &AllegoricalSaying) -> Result<(String, String)> {
    let subject = saying.subject.as_ref().ok_or_else(|| {
        Error::InvalidInput(
            "saying has no subject; run subject extraction (assign_subjects) first".into(),
        )
    })?;
    let id = saying.id.ok_or_else(|| {
        Error::InvalidInput(
            "saying has no id; run subject extraction (assign_subjects) first".into(),
        )
    })?;
    Ok((format!("{subject} {id}"), saying.full_text()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::LexiconSegmenter;
    use proptest::prelude::*;
    use std::io::Write as _;

    fn lex() -> PinyinLexicon {
        PinyinLexicon::bundled()
    }

    fn saying(riddle: &str, explanation: &str) -> AllegoricalSaying {
        AllegoricalSaying {
            riddle: riddle.into(),
            explanation: explanation.into(),
            homophones: vec![],
            subject: None,
            id: None,
        }
    }

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn homophone_markup_is_parsed() {
        let lex = lex();
        let h = parse_homophones("有言（盐）在先", &lex);
        assert_eq!(
            h,
            vec![Homophone {
                surface: '言',
                intended: '盐',
                pinyin: "yan".into()
            }]
        );
        assert!(parse_homophones("自身难保", &lex).is_empty());
    }

    #[test]
    fn multi_char_markup_pairs_positionally() {
        let lex = lex();
        let h = parse_homophones("游（油）手好闲（弦）", &lex);
        assert_eq!(h.len(), 2);
        assert_eq!(h[0].surface, '游');
        assert_eq!(h[0].intended, '油');
        assert_eq!(h[0].pinyin, "you");
        assert_eq!(h[1].surface, '闲');
        assert_eq!(h[1].intended, '弦');
        assert_eq!(h[1].pinyin, "xian");
        // two-character group
        let h = parse_homophones("藕燃（偶然）", &lex);
        assert_eq!(h.len(), 2);
        assert_eq!((h[0].surface, h[0].intended), ('藕', '偶'));
        assert_eq!((h[1].surface, h[1].intended), ('燃', '然'));
    }

    #[test]
    fn non_homophone_parenthetical_is_ignored() {
        let lex = lex();
        // 好/人 do not share a reading, so this is ordinary annotation text
        assert!(parse_homophones("好（人）", &lex).is_empty());
    }

    #[test]
    fn load_parses_records_and_markup() {
        let lex = lex();
        let f = write_corpus(&[
            r#"{"riddle": "咸菜烧豆腐", "explanation": "有言（盐）在先"}"#,
            r#"{"riddle": "稻草人救人", "explanation": "自身难保"}"#,
        ]);
        let sayings = load_sayings(f.path(), &lex).unwrap();
        assert_eq!(sayings.len(), 2);
        assert_eq!(sayings[0].homophones[0].pinyin, "yan");
        assert!(sayings[1].homophones.is_empty());
    }

    #[test]
    fn half_width_parens_are_normalized() {
        let lex = lex();
        let f = write_corpus(&[r#"{"riddle": "咸菜烧豆腐", "explanation": "有言(盐)在先"}"#]);
        let sayings = load_sayings(f.path(), &lex).unwrap();
        assert_eq!(sayings[0].explanation, "有言（盐）在先");
        assert_eq!(sayings[0].homophones.len(), 1);
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let lex = lex();
        let f = write_corpus(&[
            r#"{"riddle": "好", "explanation": "好"}"#,
            r#"{"riddle": "缺字段"}"#,
        ]);
        let err = load_sayings(f.path(), &lex).unwrap_err();
        match err {
            Error::MalformedRecord { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn empty_file_yields_empty_list() {
        let lex = lex();
        let f = write_corpus(&[]);
        assert!(load_sayings(f.path(), &lex).unwrap().is_empty());
    }

    #[test]
    fn load_then_save_round_trips_bytes() {
        let lex = lex();
        let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/corpus/xiehouyu_500.jsonl");
        let sayings = load_sayings(Path::new(fixture), &lex).unwrap();
        assert_eq!(sayings.len(), 500);
        let tmp = tempfile::NamedTempFile::new().unwrap();
        save_sayings(tmp.path(), &sayings).unwrap();
        let reloaded = load_sayings(tmp.path(), &lex).unwrap();
        for (a, b) in sayings.iter().zip(&reloaded) {
            assert_eq!(a.riddle, b.riddle);
            assert_eq!(a.explanation, b.explanation);
        }
    }

    #[test]
    fn split_sizes_use_floor_with_remainder_to_train() {
        let sayings: Vec<_> = (0..10)
            .map(|i| saying(&format!("谜{i}"), &format!("解{i}")))
            .collect();
        let split = split_dataset(&sayings, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(split.sizes(), (8, 1, 1));

        // 14,032 records: floor gives 1403 + 1403, remainder to train
        let many: Vec<_> = (0..14_032)
            .map(|i| saying(&format!("谜{i}"), &format!("解{i}")))
            .collect();
        let split = split_dataset(&many, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(split.sizes(), (11_226, 1_403, 1_403));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let sayings: Vec<_> = (0..57)
            .map(|i| saying(&format!("谜{i}"), &format!("解{i}")))
            .collect();
        let a = split_dataset(&sayings, [0.8, 0.1, 0.1], 42).unwrap();
        let b = split_dataset(&sayings, [0.8, 0.1, 0.1], 42).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);

        let mut all: Vec<String> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .map(|s| s.riddle.clone())
            .collect();
        all.sort();
        let mut orig: Vec<String> = sayings.iter().map(|s| s.riddle.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn too_few_sayings_cannot_split() {
        let sayings = vec![saying("一", "二"), saying("三", "四")];
        assert!(split_dataset(&sayings, [0.8, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let sayings: Vec<_> = (0..10)
            .map(|i| saying(&format!("谜{i}"), &format!("解{i}")))
            .collect();
        assert!(split_dataset(&sayings, [0.8, 0.1, 0.2], 0).is_err());
        assert!(split_dataset(&sayings, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn completion_format_is_verbatim() {
        let s = saying("咸菜烧豆腐", "有言（盐）在先");
        assert_eq!(
            format_completion_example(&s),
            ("咸菜烧豆腐".to_string(), "有言（盐）在先".to_string())
        );
        let s = saying("稻草人救人", "自身难保");
        assert_eq!(
            format_completion_example(&s),
            ("稻草人救人".to_string(), "自身难保".to_string())
        );
        let s = saying("被窝里放屁", "能文（闻）能武（捂）");
        let (_, target) = format_completion_example(&s);
        assert_eq!(target.matches('（').count(), 2);
    }

    #[test]
    fn scratch_format_and_id_assignment() {
        let seg = LexiconSegmenter::bundled();
        let mut sayings = vec![
            saying("稻草人救人", "自身难保"),
            saying("豆腐掉进灰堆里", "吹也吹不得打也打不得"),
            saying("豆腐渣上船", "不是好货"),
        ];
        // make the two 豆腐-initial riddles share a subject for the test
        assign_subjects(&mut sayings, &seg).unwrap();
        let (input, target) = format_scratch_example(&sayings[0]).unwrap();
        assert_eq!(input, "稻草人 0");
        assert_eq!(target, "稻草人救人——自身难保");

        // ids are 0-based per subject group in corpus order
        let mut dupes = vec![saying("豆腐", "一"), saying("豆腐", "二")];
        assign_subjects(&mut dupes, &seg).unwrap();
        assert_eq!(format_scratch_example(&dupes[0]).unwrap().0, "豆腐 0");
        assert_eq!(format_scratch_example(&dupes[1]).unwrap().0, "豆腐 1");

        let mut many = vec![saying("豆腐", "解")];
        assign_subjects(&mut many, &seg).unwrap();
        many[0].id = Some(12);
        assert!(format_scratch_example(&many[0]).unwrap().0.ends_with(" 12"));
    }

    #[test]
    fn scratch_without_subject_errors() {
        let s = saying("豆腐", "解");
        let err = format_scratch_example(&s).unwrap_err();
        assert!(err.to_string().contains("subject"));
    }

    #[test]
    fn scratch_inputs_unique_across_fixture() {
        let lex = lex();
        let seg = LexiconSegmenter::bundled();
        let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/corpus/xiehouyu_500.jsonl");
        let mut sayings = load_sayings(Path::new(fixture), &lex).unwrap();
        assign_subjects(&mut sayings, &seg).unwrap();
        let mut inputs: Vec<String> = sayings
            .iter()
            .map(|s| format_scratch_example(s).unwrap().0)
            .collect();
        let before = inputs.len();
        inputs.sort();
        inputs.dedup();
        assert_eq!(inputs.len(), before);
    }

    #[test]
    fn fixture_homophones_all_satisfy_predicate() {
        let lex = lex();
        let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/corpus/xiehouyu_500.jsonl");
        let sayings = load_sayings(Path::new(fixture), &lex).unwrap();
        let mut n = 0;
        for s in &sayings {
            for h in &s.homophones {
                assert!(lex.same_pinyin(h.surface, h.intended));
                n += 1;
            }
        }
        assert!(n >= 20, "expected a rich homophone sample, got {n}");
    }

    proptest! {
        #[test]
        fn split_partition_property(n in 3usize..120, seed in 0u64..1000) {
            let sayings: Vec<_> = (0..n)
                .map(|i| saying(&format!("谜{i}"), &format!("解{i}")))
                .collect();
            let split = split_dataset(&sayings, [0.8, 0.1, 0.1], seed).unwrap();
            let (tr, va, te) = split.sizes();
            prop_assert_eq!(tr + va + te, n);
            // disjointness via unique riddles
            let mut seen = std::collections::HashSet::new();
            for s in split.train.iter().chain(&split.validation).chain(&split.test) {
                prop_assert!(seen.insert(s.riddle.clone()));
            }
        }
    }
}
