use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{io_err, CoreError, Result};
use crate::Language;

pub const BLANK: usize = 0;
pub const UNK: usize = 1;
const ZH_SUFFIX: &str = "_cn";
/// Mandarin strings longer than this are segmented before lookup.
const ZH_DIRECT_MAX_CHARS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconEntry {
    pub word: String,
    pub phonemes: Vec<String>,
    pub language: Language,
}

/// Parses `word<TAB>ph ph ...` lines. Mandarin phonemes get the `_cn`
/// suffix so they never collide with English ones.
pub fn parse_lexicon(text: &str, language: Language) -> Result<Vec<LexiconEntry>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (word, phones) = line.split_once('\t').ok_or_else(|| CoreError::Parse {
            line: i + 1,
            message: "expected word<TAB>phonemes".into(),
        })?;
        let phonemes: Vec<String> = phones
            .split_whitespace()
            .map(|p| match language {
                Language::Zh if !p.ends_with(ZH_SUFFIX) => format!("{p}{ZH_SUFFIX}"),
                _ => p.to_string(),
            })
            .collect();
        if word.trim().is_empty() || phonemes.is_empty() {
            return Err(CoreError::Parse {
                line: i + 1,
                message: format!("entry {word:?} has no phonemes"),
            });
        }
        entries.push(LexiconEntry {
            word: word.trim().to_string(),
            phonemes,
            language,
        });
    }
    Ok(entries)
}

pub fn load_lexicon(path: &Path, language: Language) -> Result<Vec<LexiconEntry>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_lexicon(&text, language)
}

/// Word lookup tables for both languages.
#[derive(Clone, Debug, Default)]
pub struct Lexicon {
    en: HashMap<String, Vec<String>>,
    zh: HashMap<String, Vec<String>>,
    zh_max_chars: usize,
}

impl Lexicon {
    pub fn new(entries: &[LexiconEntry]) -> Self {
        let mut lex = Lexicon::default();
        for e in entries {
            match e.language {
                Language::En => {
                    lex.en.entry(e.word.clone()).or_insert_with(|| e.phonemes.clone());
                }
                Language::Zh => {
                    lex.zh_max_chars = lex.zh_max_chars.max(e.word.chars().count());
                    lex.zh.entry(e.word.clone()).or_insert_with(|| e.phonemes.clone());
                }
            }
        }
        lex
    }

    pub fn zh_words(&self) -> impl Iterator<Item = &str> {
        self.zh.keys().map(String::as_str)
    }

    fn lookup_en(&self, word: &str) -> Option<&Vec<String>> {
        self.en.get(word).or_else(|| self.en.get(&word.to_uppercase()))
    }
}

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

/// Greedy longest-match segmentation against the Mandarin word list.
/// Characters no word covers become single-character pieces.
pub fn segment_longest_match(text: &str, lexicon: &Lexicon) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let longest = (1..=lexicon.zh_max_chars.min(chars.len() - i))
            .rev()
            .find(|&n| lexicon.zh.contains_key(&chars[i..i + n].iter().collect::<String>()))
            .unwrap_or(1);
        pieces.push(chars[i..i + longest].iter().collect());
        i += longest;
    }
    pieces
}

/// Phoneme inventory: index 0 is the CTC blank, 1 is UNK, then phonemes in
/// sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[BLANK] != "<blank>" || tokens[UNK] != "<unk>" {
            return Err(CoreError::InvalidArgument("vocabulary must start with <blank>, <unk>".into()));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

pub fn build_vocab(lexicons: &[&[LexiconEntry]]) -> Result<Vocab> {
    let phonemes: BTreeSet<&str> = lexicons
        .iter()
        .flat_map(|l| l.iter())
        .flat_map(|e| e.phonemes.iter().map(String::as_str))
        .collect();
    if phonemes.is_empty() {
        return Err(CoreError::InvalidArgument("no lexicon entries to build a vocabulary from".into()));
    }
    let tokens = ["<blank>", "<unk>"]
        .into_iter()
        .chain(phonemes)
        .map(String::from)
        .collect();
    Vocab::from_tokens(tokens)
}

/// CTC target: indices in `1..vocab_size`, never the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub vocab_size: usize,
}

/// Maps a whitespace-split transcript to phoneme indices. Words containing
/// CJK characters go through the Mandarin path, everything else through the
/// English one; anything unknown becomes one UNK.
pub fn tokenize_transcript(words: &[String], lexicon: &Lexicon, vocab: &Vocab) -> TokenSequence {
    let mut tokens = Vec::new();
    let mut push_phones = |phones: Option<&Vec<String>>| match phones {
        Some(ps) => tokens.extend(ps.iter().map(|p| vocab.id(p).unwrap_or(UNK))),
        None => tokens.push(UNK),
    };
    for word in words {
        if word.chars().any(is_cjk) {
            if word.chars().count() > ZH_DIRECT_MAX_CHARS {
                for piece in segment_longest_match(word, lexicon) {
                    push_phones(lexicon.zh.get(&piece));
                }
            } else {
                push_phones(lexicon.zh.get(word));
            }
        } else {
            push_phones(lexicon.lookup_en(word));
        }
    }
    TokenSequence {
        tokens,
        vocab_size: vocab.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> (Vec<LexiconEntry>, Vec<LexiconEntry>) {
        let en = parse_lexicon("CAT\tK AE T\nMA\tM AA\n", Language::En).unwrap();
        let zh = parse_lexicon("你好\tn i3 h ao3\n我们\tw o3 m en5\n学习\tx ve2 x i2\n中文\tzh ong1 w en2\n我\tw o3\n们学习\tm en5 x ve2 x i2\n吗\tm a5\nma\tm a\n", Language::Zh).unwrap();
        (en, zh)
    }

    #[test]
    fn english_lookup() {
        let (en, zh) = lex();
        let vocab = build_vocab(&[&en, &zh]).unwrap();
        let lexicon = Lexicon::new(&[en, zh].concat());
        let seq = tokenize_transcript(&["CAT".into()], &lexicon, &vocab);
        let expected: Vec<usize> = ["K", "AE", "T"].iter().map(|p| vocab.id(p).unwrap()).collect();
        assert_eq!(seq.tokens, expected);
        assert_eq!(tokenize_transcript(&["cat".into()], &lexicon, &vocab).tokens, expected);
    }

    #[test]
    fn mandarin_gets_suffix() {
        let zh = parse_lexicon("你好\tni3 hao3\n", Language::Zh).unwrap();
        assert_eq!(zh[0].phonemes, vec!["ni3_cn", "hao3_cn"]);
        let vocab = build_vocab(&[&zh]).unwrap();
        let seq = tokenize_transcript(&["你好".into()], &Lexicon::new(&zh), &vocab);
        assert_eq!(seq.tokens, vec![vocab.id("ni3_cn").unwrap(), vocab.id("hao3_cn").unwrap()]);
    }

    #[test]
    fn vocab_size_and_order_independence() {
        let a = parse_lexicon("A\tp0 p1 p2 p3 p4\nB\tp5 p6 p7 p8 p9\n", Language::En).unwrap();
        let b = parse_lexicon("B\tp5 p6 p7 p8 p9\nA\tp0 p1 p2 p3 p4\n", Language::En).unwrap();
        let va = build_vocab(&[&a]).unwrap();
        assert_eq!(va.len(), 12);
        assert_eq!(va, build_vocab(&[&b]).unwrap());
        assert!(build_vocab(&[]).is_err());
    }

    #[test]
    fn shared_string_stays_distinct_across_languages() {
        let en = parse_lexicon("MA\tma\n", Language::En).unwrap();
        let zh = parse_lexicon("妈\tma\n", Language::Zh).unwrap();
        let v = build_vocab(&[&en, &zh]).unwrap();
        assert!(v.id("ma").is_some() && v.id("ma_cn").is_some());
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn unknown_and_empty() {
        let (en, zh) = lex();
        let vocab = build_vocab(&[&en, &zh]).unwrap();
        let lexicon = Lexicon::new(&[en, zh].concat());
        assert_eq!(tokenize_transcript(&["DOG".into(), "猫".into()], &lexicon, &vocab).tokens, vec![UNK, UNK]);
        assert!(tokenize_transcript(&[], &lexicon, &vocab).tokens.is_empty());
    }

    #[test]
    fn long_mandarin_string_is_segmented() {
        let (en, zh) = lex();
        let vocab = build_vocab(&[&en, &zh]).unwrap();
        let lexicon = Lexicon::new(&[en, zh].concat());
        assert_eq!(segment_longest_match("我们学习中文", &lexicon), vec!["我们", "学习", "中文"]);
        let seq = tokenize_transcript(&["我们学习中文".into()], &lexicon, &vocab);
        assert_eq!(seq.tokens.len(), 12);
        assert!(!seq.tokens.contains(&BLANK));
    }

    #[test]
    fn malformed_line_reports_position() {
        assert!(matches!(
            parse_lexicon("A\tx\nbroken line\n", Language::En),
            Err(CoreError::Parse { line: 2, .. })
        ));
    }
}
