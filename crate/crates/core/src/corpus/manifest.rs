//! Line-delimited corpus manifests.
//!
//! ```text
//! #accinv-manifest v1
//! #feature_dim<TAB>16
//! #accents<TAB>A0<TAB>A1<TAB>A2
//! utt0001<TAB>features/utt0001.aipf<TAB>0<TAB>w3 w17 w2
//! utt0002<TAB>features/utt0002.aipf<TAB>2<TAB>
//! utt0003<TAB>features/utt0003.aipf<TAB>1<TAB>w5 w5<TAB>pseudo
//! ```
//!
//! Feature paths are written relative to the manifest's directory. The
//! transcript is a space-separated token list; an empty or absent field means
//! no transcript. A fifth field `pseudo` marks machine-generated transcripts.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path, PathBuf};

use crate::error::{Error, Result};

use super::{features, AccentId, Corpus, Utterance};

pub const HEADER: &str = "#accinv-manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    /// Resolved (absolute, normalized) location of the feature file.
    pub feature_path: PathBuf,
    pub accent: AccentId,
    pub transcript: Option<Vec<String>>,
    pub pseudo: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub accent_names: Vec<String>,
    pub feature_dim: usize,
    pub records: Vec<Record>,
}

impl CorpusManifest {
    pub fn num_accents(&self) -> usize {
        self.accent_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.accent_names.is_empty() {
            return Err(Error::validation("accents", "at least one accent is required"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim", "must be at least 1"));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.accent >= self.accent_names.len() {
                return Err(Error::validation(
                    "accent_id",
                    format!("record `{}` has accent {} of {}", r.id, r.accent, self.num_accents()),
                ));
            }
            if r.pseudo && r.transcript.is_none() {
                return Err(Error::validation(
                    "pseudo",
                    format!("record `{}` is marked pseudo without a transcript", r.id),
                ));
            }
        }
        Ok(())
    }

    /// Parses manifest text. Relative feature paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: origin.to_string(),
            line,
            reason,
        };
        let base = absolute(base_dir);
        let mut accent_names: Option<Vec<String>> = None;
        let mut feature_dim: Option<usize> = None;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let mut fields = meta.split('\t');
                match fields.next().unwrap_or("") {
                    "accinv-manifest v1" => saw_header = true,
                    "feature_dim" => {
                        let v = fields
                            .next()
                            .and_then(|s| s.parse::<usize>().ok())
                            .filter(|&v| v > 0)
                            .ok_or_else(|| parse_err(lineno, "bad feature_dim".into()))?;
                        feature_dim = Some(v);
                    }
                    "accents" => {
                        let names: Vec<String> = fields.map(str::to_string).collect();
                        if names.is_empty() || names.iter().any(String::is_empty) {
                            return Err(parse_err(lineno, "empty accent name".into()));
                        }
                        accent_names = Some(names);
                    }
                    _ => {}
                }
                continue;
            }
            if !saw_header {
                return Err(parse_err(lineno, format!("missing `{HEADER}` header")));
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 || fields.len() > 5 {
                return Err(parse_err(
                    lineno,
                    format!("expected 3 to 5 tab-separated fields, found {}", fields.len()),
                ));
            }
            let id = fields[0];
            if id.is_empty() || id.contains(char::is_whitespace) {
                return Err(parse_err(lineno, "empty or whitespace-bearing id".into()));
            }
            if fields[1].is_empty() {
                return Err(parse_err(lineno, "empty feature path".into()));
            }
            let accent: AccentId = fields[2]
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad accent id `{}`", fields[2])))?;
            if let Some(names) = &accent_names {
                if accent >= names.len() {
                    return Err(parse_err(
                        lineno,
                        format!("accent id {accent} out of range for {} accents", names.len()),
                    ));
                }
            }
            let transcript = match fields.get(3) {
                Some(t) if !t.is_empty() => {
                    let toks: Vec<String> = t.split(' ').map(str::to_string).collect();
                    if toks.iter().any(String::is_empty) {
                        return Err(parse_err(lineno, "empty token in transcript".into()));
                    }
                    Some(toks)
                }
                _ => None,
            };
            let pseudo = match fields.get(4) {
                None | Some(&"") => false,
                Some(&"pseudo") => true,
                Some(other) => return Err(parse_err(lineno, format!("unknown flag `{other}`"))),
            };
            if pseudo && transcript.is_none() {
                return Err(parse_err(lineno, "pseudo flag without transcript".into()));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::DuplicateId(id.to_string()));
            }
            records.push(Record {
                id: id.to_string(),
                feature_path: normalize(&base.join(fields[1])),
                accent,
                transcript,
                pseudo,
            });
        }
        if !saw_header {
            return Err(parse_err(1, format!("missing `{HEADER}` header")));
        }
        let accent_names = accent_names.ok_or_else(|| parse_err(1, "missing #accents line".into()))?;
        let feature_dim = feature_dim.ok_or_else(|| parse_err(1, "missing #feature_dim line".into()))?;
        let m = CorpusManifest {
            accent_names,
            feature_dim,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Renders the manifest as it would be saved at `path`.
    pub fn render(&self, path: &Path) -> String {
        let dir = absolute(path.parent().unwrap_or(Path::new(".")));
        let mut out = String::new();
        out.push_str(HEADER);
        out.push('\n');
        out.push_str(&format!("#feature_dim\t{}\n", self.feature_dim));
        out.push_str("#accents");
        for a in &self.accent_names {
            out.push('\t');
            out.push_str(a);
        }
        out.push('\n');
        for r in &self.records {
            let rel = pathdiff::diff_paths(&r.feature_path, &dir).unwrap_or_else(|| r.feature_path.clone());
            let rel = rel.to_string_lossy().replace('\\', "/");
            out.push_str(&format!("{}\t{}\t{}\t", r.id, rel, r.accent));
            if let Some(t) = &r.transcript {
                out.push_str(&t.join(" "));
            }
            if r.pseudo {
                out.push_str("\tpseudo");
            }
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(path, self.render(path)).map_err(|e| Error::io(path, e))
    }

    /// Reads every referenced feature file.
    pub fn load_corpus(&self) -> Result<Corpus> {
        self.validate()?;
        let mut utterances = Vec::with_capacity(self.records.len());
        for r in &self.records {
            if !r.feature_path.is_file() {
                return Err(Error::MissingFeatures {
                    id: r.id.clone(),
                    path: r.feature_path.clone(),
                });
            }
            let features = features::read(&r.feature_path)?;
            if features.dim() != self.feature_dim {
                return Err(Error::shape(
                    "feature file dimension",
                    self.feature_dim,
                    format!("{} in `{}`", features.dim(), r.id),
                ));
            }
            utterances.push(Utterance {
                id: r.id.clone(),
                features,
                accent: r.accent,
                transcript: r.transcript.clone(),
                pseudo: r.pseudo,
                alignment: None,
            });
        }
        Ok(Corpus {
            accent_names: self.accent_names.clone(),
            feature_dim: self.feature_dim,
            utterances,
            feature_paths: self.records.iter().map(|r| r.feature_path.clone()).collect(),
        })
    }
}

pub(crate) fn absolute(p: &Path) -> PathBuf {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    normalize(&std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()))
}

/// Lexically resolves `.` and `..` components.
pub(crate) fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "#accinv-manifest v1\n#feature_dim\t4\n#accents\tUS\tGB\nu1\tf/u1.aipf\t0\ta b\nu2\tf/u2.aipf\t1\t\nu3\tf/u3.aipf\t1\tc\tpseudo\nu4\tf/u4.aipf\t0\n";

    #[test]
    fn parses_optional_transcripts_and_pseudo_flag() {
        let m = CorpusManifest::parse(SAMPLE, Path::new("/data"), "m").unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.records[0].transcript, Some(vec!["a".into(), "b".into()]));
        assert_eq!(m.records[1].transcript, None);
        assert!(m.records[2].pseudo);
        assert_eq!(m.records[3].transcript, None);
        assert_eq!(m.records[0].feature_path, PathBuf::from("/data/f/u1.aipf"));
    }

    #[test]
    fn render_parse_round_trip() {
        let m = CorpusManifest::parse(SAMPLE, Path::new("/data"), "m").unwrap();
        let text = m.render(Path::new("/data/m.tsv"));
        assert_eq!(text, SAMPLE.replace("\tf/u4.aipf\t0\n", "\tf/u4.aipf\t0\t\n"));
        let back = CorpusManifest::parse(&text, Path::new("/data"), "m").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn paths_are_relative_to_the_output_location() {
        let m = CorpusManifest::parse(SAMPLE, Path::new("/data/gen"), "m").unwrap();
        let text = m.render(Path::new("/data/pl/out.tsv"));
        assert!(text.contains("\t../gen/f/u1.aipf\t"));
        let back = CorpusManifest::parse(&text, Path::new("/data/pl"), "m").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn duplicate_id_rejected() {
        let text = format!("{SAMPLE}u1\tf/x.aipf\t0\t\n");
        assert!(matches!(
            CorpusManifest::parse(&text, Path::new("/"), "m"),
            Err(Error::DuplicateId(id)) if id == "u1"
        ));
    }

    #[test]
    fn malformed_record_reports_line_number() {
        let text = SAMPLE.replace("u2\tf/u2.aipf\t1", "u2\tf/u2.aipf\tX");
        match CorpusManifest::parse(&text, Path::new("/"), "m") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        let text = SAMPLE.replace("u2\tf/u2.aipf\t1\t", "u2");
        assert!(matches!(
            CorpusManifest::parse(&text, Path::new("/"), "m"),
            Err(Error::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn out_of_range_accent_rejected() {
        let text = SAMPLE.replace("u2\tf/u2.aipf\t1", "u2\tf/u2.aipf\t2");
        assert!(CorpusManifest::parse(&text, Path::new("/"), "m").is_err());
    }

    #[test]
    fn missing_feature_file_names_the_utterance() {
        let dir = tempfile::tempdir().unwrap();
        let m = CorpusManifest::parse(SAMPLE, dir.path(), "m").unwrap();
        match m.load_corpus() {
            Err(Error::MissingFeatures { id, .. }) => assert_eq!(id, "u1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_resolves_parent_components() {
        assert_eq!(normalize(Path::new("/a/b/../c/./d")), PathBuf::from("/a/c/d"));
    }
}
