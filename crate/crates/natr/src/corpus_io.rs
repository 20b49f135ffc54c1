//! Tab-separated corpus files and the synthetic task's `task.meta`.
//!
//! One pair per line: the source, then one or more references, separated
//! by single tabs. Tokens are separated by single spaces.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use natr_core::data::{Pair, SyntheticCorpora, SyntheticTaskConfig};
use natr_core::Corpus;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: not valid UTF-8 text")]
    Encoding { path: PathBuf },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|_| CorpusError::Encoding {
        path: path.to_path_buf(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CorpusError> {
    fs::write(path, text).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn tokens(field: &str, line: usize, what: &str) -> Result<Vec<String>, CorpusError> {
    if field.is_empty() {
        return Err(CorpusError::Malformed {
            line,
            reason: format!("empty {what}"),
        });
    }
    let toks: Vec<String> = field.split(' ').map(str::to_owned).collect();
    if toks.iter().any(|t| t.is_empty()) {
        return Err(CorpusError::Malformed {
            line,
            reason: format!("{what} has an empty token (double or edge space)"),
        });
    }
    Ok(toks)
}

/// Parses corpus text. Line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Corpus, CorpusError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        let mut fields = raw.split('\t');
        let source = tokens(fields.next().unwrap_or(""), line, "source")?;
        let references = fields
            .map(|f| tokens(f, line, "reference"))
            .collect::<Result<Vec<_>, _>>()?;
        if references.is_empty() {
            return Err(CorpusError::Malformed {
                line,
                reason: "no reference field".into(),
            });
        }
        pairs.push(Pair { source, references });
    }
    Ok(Corpus { pairs })
}

pub fn format_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for p in &corpus.pairs {
        out.push_str(&p.source.join(" "));
        for r in &p.references {
            out.push('\t');
            out.push_str(&r.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    parse_corpus(&read_text(path)?)
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    write_text(path, &format_corpus(corpus))
}

/// Source sentences, one per line, for decoding. Blank lines are rejected.
pub fn load_sources(path: &Path) -> Result<Vec<Vec<String>>, CorpusError> {
    read_text(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| tokens(l.strip_suffix('\r').unwrap_or(l), i + 1, "source"))
        .collect()
}

pub fn task_meta(cfg: &SyntheticTaskConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "content_vocab = {}", cfg.content_vocab);
    let _ = writeln!(s, "min_len = {}", cfg.min_len);
    let _ = writeln!(s, "max_len = {}", cfg.max_len);
    let _ = writeln!(s, "modes = identity,rotate");
    let _ = writeln!(s, "rotate_prob = {}", cfg.rotate_prob);
    let _ = writeln!(s, "train_size = {}", cfg.train_size);
    let _ = writeln!(s, "valid_size = {}", cfg.valid_size);
    let _ = writeln!(s, "test_size = {}", cfg.test_size);
    let _ = writeln!(s, "seed = {}", cfg.seed);
    s
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `task.meta` into `dir`.
pub fn write_synthetic(
    dir: &Path,
    cfg: &SyntheticTaskConfig,
    c: &SyntheticCorpora,
) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    save_corpus(&c.train, &dir.join("train.tsv"))?;
    save_corpus(&c.valid, &dir.join("valid.tsv"))?;
    save_corpus(&c.test, &dir.join("test.tsv"))?;
    write_text(&dir.join("task.meta"), &task_meta(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_split_into_source_and_references() {
        let c = parse_corpus("a b c\td e f\n").unwrap();
        assert_eq!(c.pairs[0].source, ["a", "b", "c"]);
        assert_eq!(c.pairs[0].references, [vec!["d", "e", "f"]]);
        let c = parse_corpus("a\tb\tc\n").unwrap();
        assert_eq!(c.pairs[0].references.len(), 2);
    }

    #[test]
    fn empty_source_reports_its_line() {
        let err = parse_corpus("a\tb\n\tc\n").unwrap_err();
        assert!(
            matches!(err, CorpusError::Malformed { line: 2, .. }),
            "{err}"
        );
    }
}
