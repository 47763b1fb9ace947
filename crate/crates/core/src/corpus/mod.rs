//! Utterance manifests, silver code-mix synthesis, class up-sampling and
//! transcript tokenization.

mod codemix;
mod lexicon;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};
use crate::Language;

pub use codemix::{synthesize_codemix, CodemixConfig};
pub use lexicon::{
    build_vocab, is_cjk, load_lexicon, parse_lexicon, segment_longest_match, tokenize_transcript, Lexicon,
    LexiconEntry, TokenSequence, Vocab, BLANK, UNK,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    pub audio_path: String,
    pub offset_s: f64,
    pub duration_s: f64,
    pub language: Language,
    #[serde(default)]
    pub transcript: Vec<String>,
    pub corpus_tag: String,
    /// Speed-perturbation factor applied when features are computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<Utterance>,
    pub provenance: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    provenance: String,
}

/// Options applied while reading a manifest.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions {
    /// Remove markup tags such as `<unk>` or `</s>` from transcripts, keeping
    /// the surrounding words.
    pub strip_tags: bool,
}

static TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"</?[A-Za-z_]+>").expect("valid regex"));

pub fn strip_tags(word: &str) -> String {
    TAG.replace_all(word, "").into_owned()
}

impl Manifest {
    pub fn new(entries: Vec<Utterance>, provenance: impl Into<String>) -> Result<Self> {
        let m = Self {
            entries,
            provenance: provenance.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.entries.iter().map(|u| u.duration_s).sum()
    }

    pub fn duration_s(&self, language: Language) -> f64 {
        self.of(language).map(|u| u.duration_s).sum()
    }

    pub fn count(&self, language: Language) -> usize {
        self.of(language).count()
    }

    pub fn of(&self, language: Language) -> impl Iterator<Item = &Utterance> {
        self.entries.iter().filter(move |u| u.language == language)
    }

    /// Entries of one language, as a new manifest.
    pub fn filter_language(&self, language: Language) -> Manifest {
        Manifest {
            entries: self.of(language).cloned().collect(),
            provenance: format!("{} [{language}]", self.provenance),
        }
    }

    pub fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.entries.len());
        for u in &self.entries {
            if !seen.insert(u.id.as_str()) {
                return Err(CoreError::Integrity(format!("duplicate utterance id {:?}", u.id)));
            }
        }
        Ok(())
    }

    /// Concatenation; ids must stay unique.
    pub fn concat(parts: &[&Manifest], provenance: impl Into<String>) -> Result<Manifest> {
        let entries = parts.iter().flat_map(|m| m.entries.iter().cloned()).collect();
        Manifest::new(entries, provenance)
    }
}

fn validate(u: &Utterance) -> std::result::Result<(), String> {
    if u.id.is_empty() {
        return Err("empty id".into());
    }
    if !(u.duration_s > 0.0) || !u.duration_s.is_finite() {
        return Err(format!("duration_s must be positive, got {}", u.duration_s));
    }
    if !(u.offset_s >= 0.0) || !u.offset_s.is_finite() {
        return Err(format!("offset_s must be non-negative, got {}", u.offset_s));
    }
    if let Some(s) = u.speed {
        if !(s > 0.0) {
            return Err(format!("speed must be positive, got {s}"));
        }
    }
    Ok(())
}

/// Reads a JSON Lines manifest. An optional first line `{"provenance": ...}`
/// carries the free-form description; every other line is one utterance.
pub fn load_manifest(path: &Path, options: &LoadOptions) -> Result<Manifest> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut manifest = Manifest::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if lineno == 1 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                manifest.provenance = h.provenance;
                continue;
            }
        }
        let mut u: Utterance = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        validate(&u).map_err(|message| CoreError::Parse { line: lineno, message })?;
        if options.strip_tags {
            u.transcript = u
                .transcript
                .iter()
                .map(|w| strip_tags(w))
                .filter(|w| !w.trim().is_empty())
                .collect();
        }
        manifest.entries.push(u);
    }
    manifest.check_ids()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    if !manifest.provenance.is_empty() {
        let header = Header {
            provenance: manifest.provenance.clone(),
        };
        serde_json::to_writer(&mut out, &header).expect("serializable");
        out.push(b'\n');
    }
    for u in &manifest.entries {
        serde_json::to_writer(&mut out, u).expect("serializable");
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

/// Repeats every `language` utterance `factor` times; copies get ids
/// `{id}#up{k}`. Other entries and the order are kept.
pub fn upsample_class(manifest: &Manifest, language: Language, factor: u32) -> Result<Manifest> {
    if factor == 0 {
        return Err(CoreError::InvalidArgument("up-sampling factor must be at least 1".into()));
    }
    let mut entries = Vec::with_capacity(manifest.len());
    for u in &manifest.entries {
        entries.push(u.clone());
        if u.language == language {
            for k in 1..factor {
                let mut copy = u.clone();
                copy.id = format!("{}#up{k}", u.id);
                entries.push(copy);
            }
        }
    }
    let provenance = if factor == 1 {
        manifest.provenance.clone()
    } else {
        format!("{} [{language} x{factor}]", manifest.provenance)
    };
    Manifest::new(entries, provenance)
}

/// Adds speed-perturbed copies (ids `{id}#sp{factor}`), whose durations are
/// divided by the factor.
pub fn speed_expand(manifest: &Manifest, factors: &[f64]) -> Result<Manifest> {
    let mut entries = manifest.entries.clone();
    for &f in factors {
        if !(f > 0.0) {
            return Err(CoreError::InvalidArgument(format!("speed factor {f} must be positive")));
        }
        if f == 1.0 {
            continue;
        }
        for u in &manifest.entries {
            let mut copy = u.clone();
            copy.id = format!("{}#sp{f}", u.id);
            copy.duration_s = u.duration_s / f;
            copy.speed = Some(u.speed.unwrap_or(1.0) * f);
            entries.push(copy);
        }
    }
    Manifest::new(entries, format!("{} [speed {factors:?}]", manifest.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn utt(id: &str, language: Language, duration_s: f64) -> Utterance {
        Utterance {
            id: id.into(),
            audio_path: format!("{id}.wav"),
            offset_s: 0.0,
            duration_s,
            language,
            transcript: vec![],
            corpus_tag: "test".into(),
            speed: None,
        }
    }

    #[test]
    fn empty_file_is_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, &LoadOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn missing_language_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let good = serde_json::to_string(&utt("a", Language::En, 1.0)).unwrap();
        let bad = r#"{"id":"b","audio_path":"b.wav","offset_s":0,"duration_s":1,"transcript":[],"corpus_tag":"x"}"#;
        std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
        match load_manifest(&p, &LoadOptions::default()) {
            Err(CoreError::Parse { line: 2, message }) => assert!(message.contains("language"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_integrity_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let line = serde_json::to_string(&utt("a", Language::En, 1.0)).unwrap();
        std::fs::write(&p, format!("{line}\n{line}\n")).unwrap();
        assert!(matches!(load_manifest(&p, &LoadOptions::default()), Err(CoreError::Integrity(_))));
    }

    #[test]
    fn round_trip_keeps_provenance_and_unicode() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut u = utt("z1", Language::Zh, 0.1 + 0.2);
        u.transcript = vec!["你好".into(), "world".into(), "\"quoted\"".into()];
        u.speed = Some(0.9);
        let m = Manifest::new(vec![u, utt("e1", Language::En, 2.5)], "unit test").unwrap();
        save_manifest(&m, &p).unwrap();
        assert_eq!(load_manifest(&p, &LoadOptions::default()).unwrap(), m);
    }

    #[test]
    fn tags_are_stripped_on_request() {
        assert_eq!(strip_tags("<unk>"), "");
        assert_eq!(strip_tags("hello<noise>"), "hello");
        assert_eq!(strip_tags("a</s>b"), "ab");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut u = utt("a", Language::En, 1.0);
        u.transcript = vec!["<SPK/>".into(), "<unk>".into(), "ok".into(), "(ppl)".into()];
        save_manifest(&Manifest::new(vec![u], "").unwrap(), &p).unwrap();
        let m = load_manifest(&p, &LoadOptions { strip_tags: true }).unwrap();
        assert_eq!(m.entries[0].transcript, vec!["<SPK/>", "ok", "(ppl)"]);
    }

    #[test]
    fn upsampling_counts_and_ids() {
        let mut entries: Vec<Utterance> = (0..100).map(|i| utt(&format!("z{i}"), Language::Zh, 1.5)).collect();
        entries.extend((0..30).map(|i| utt(&format!("e{i}"), Language::En, 2.0)));
        let m = Manifest::new(entries, "").unwrap();
        let up = upsample_class(&m, Language::Zh, 2).unwrap();
        assert_eq!(up.count(Language::Zh), 200);
        assert_eq!(up.count(Language::En), 30);
        assert_eq!(up.entries[1].id, "z0#up1");
        assert_eq!(upsample_class(&m, Language::Zh, 1).unwrap(), m);
        assert!(upsample_class(&m, Language::Zh, 0).is_err());
    }

    #[test]
    fn upsampling_table_value() {
        let hours = 5.36;
        let m = Manifest::new(
            (0..536).map(|i| utt(&format!("z{i}"), Language::Zh, hours * 3600.0 / 536.0)).collect(),
            "",
        )
        .unwrap();
        let up = upsample_class(&m, Language::Zh, 3).unwrap();
        assert_eq!(format!("{:.1}", up.duration_s(Language::Zh) / 3600.0), "16.1");
    }

    #[test]
    fn speed_expansion_triples() {
        let m = Manifest::new(vec![utt("a", Language::En, 1.8)], "").unwrap();
        let x = speed_expand(&m, &[0.9, 1.0, 1.1]).unwrap();
        assert_eq!(x.len(), 3);
        assert!((x.entries[1].duration_s - 2.0).abs() < 1e-12);
        assert_eq!(x.entries[2].speed, Some(1.1));
    }
}
