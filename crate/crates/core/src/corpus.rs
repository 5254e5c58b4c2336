// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled assertion corpora.
//!
//! File format: UTF-8, one record per line, `id<TAB>label<TAB>text`. Lines
//! starting with `#` and blank lines are skipped. The text field runs to the
//! end of the line and may itself contain tabs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::rng;

/// One (assertion, culture label) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub id: String,
    pub label: String,
    pub text: String,
}

/// An ordered collection of assertions with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    records: Vec<Assertion>,
    labels: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus, checking id uniqueness and non-empty fields.
    pub fn from_records(records: Vec<Assertion>) -> Result<Self> {
        let mut seen = HashMap::with_capacity(records.len());
        let mut labels = BTreeSet::new();
        for (pos, r) in records.iter().enumerate() {
            if r.id.is_empty() || r.label.is_empty() || r.text.is_empty() {
                return Err(CueError::invalid(format!(
                    "record {pos} has an empty field"
                )));
            }
            if let Some(prev) = seen.insert(r.id.as_str(), pos) {
                return Err(CueError::invalid(format!(
                    "duplicate id {:?} at records {prev} and {pos}",
                    r.id
                )));
            }
            labels.insert(r.label.clone());
        }
        Ok(Self { records, labels })
    }

    /// Reads a corpus file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(CueError::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CueError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses corpus text; `origin` is only used in error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut records = Vec::new();
        let mut labels = BTreeSet::new();
        let mut ids: HashMap<String, usize> = HashMap::new();
        let err = |line: usize, reason: String| CueError::Parse {
            path: origin.to_path_buf(),
            line,
            reason,
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.strip_suffix('\r').unwrap_or(raw);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(id), Some(label), Some(body)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(err(line_no, "expected id<TAB>label<TAB>text".into()));
            };
            if id.is_empty() {
                return Err(err(line_no, "empty id".into()));
            }
            if label.is_empty() {
                return Err(err(line_no, "empty label".into()));
            }
            if body.is_empty() {
                return Err(err(line_no, "empty text".into()));
            }
            if let Some(first) = ids.insert(id.to_owned(), line_no) {
                return Err(err(
                    line_no,
                    format!("duplicate id {id:?} (first seen on line {first})"),
                ));
            }
            labels.insert(label.to_owned());
            records.push(Assertion {
                id: id.to_owned(),
                label: label.to_owned(),
                text: body.to_owned(),
            });
        }
        Ok(Self { records, labels })
    }

    /// Serializes back to the line format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.id);
            out.push('\t');
            out.push_str(&r.label);
            out.push('\t');
            out.push_str(&r.text);
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| CueError::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes())
            .map_err(|e| CueError::io(path, e))
    }

    pub fn records(&self) -> &[Assertion] {
        &self.records
    }

    pub fn labels(&self) -> &BTreeSet<String> {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record count per label.
    pub fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Keeps `n` records per label, chosen uniformly without replacement.
    ///
    /// One generator ([`rng::seeded`]) is shared by all labels, which are
    /// visited in lexicographic order; each oversupplied label draws `n`
    /// positions by partial Fisher-Yates over its records in file order.
    /// Kept records stay in file order. Labels with fewer than `n` records
    /// are kept whole and listed in [`Sampled::undersupplied`].
    pub fn sample_per_label(&self, n: usize, seed: u64) -> Result<Sampled> {
        if n == 0 {
            return Err(CueError::invalid("n must be at least 1"));
        }
        let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (pos, r) in self.records.iter().enumerate() {
            by_label.entry(r.label.as_str()).or_default().push(pos);
        }
        let mut rng = rng::seeded(seed);
        let mut keep = vec![false; self.records.len()];
        let mut undersupplied = Vec::new();
        for (label, positions) in &by_label {
            if positions.len() <= n {
                if positions.len() < n {
                    undersupplied.push(((*label).to_owned(), positions.len()));
                }
                positions.iter().for_each(|&p| keep[p] = true);
            } else {
                for k in rng::choose_distinct(&mut rng, positions.len(), n) {
                    keep[positions[k]] = true;
                }
            }
        }
        let records: Vec<Assertion> = self
            .records
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect();
        Ok(Sampled {
            corpus: Corpus {
                labels: self.labels.clone(),
                records,
            },
            undersupplied,
        })
    }
}

/// Output of [`Corpus::sample_per_label`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sampled {
    pub corpus: Corpus,
    /// `(label, available)` for labels with fewer records than requested.
    pub undersupplied: Vec<(String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str) -> Result<Corpus> {
        Corpus::parse(text, &PathBuf::from("mem.tsv"))
    }

    fn big(label_sizes: &[(&str, usize)]) -> Corpus {
        let mut recs = Vec::new();
        for (label, n) in label_sizes {
            for i in 0..*n {
                recs.push(Assertion {
                    id: format!("{label}-{i}"),
                    label: (*label).into(),
                    text: format!("assertion {i}"),
                });
            }
        }
        Corpus::from_records(recs).unwrap()
    }

    #[test]
    fn three_lines_two_labels() {
        let c = parse("a\tJapan\tRice is eaten daily\nb\tUS\tBaseball is popular\nc\tJapan\tTea\n")
            .unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.labels().len(), 2);
        assert_eq!(c.records()[1].id, "b");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let c = parse("").unwrap();
        assert!(c.is_empty());
        assert!(c.labels().is_empty());
    }

    #[test]
    fn comments_skipped_and_text_keeps_tabs() {
        let c = parse("# header\na\tUK\tTea\tand scones\n").unwrap();
        assert_eq!(c.records()[0].text, "Tea\tand scones");
    }

    #[test]
    fn duplicate_id_names_line() {
        let e = parse("a\tX\tt1\nb\tX\tt2\n# c\na\tY\tt3\n").unwrap_err();
        match e {
            CueError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_number() {
        let e = parse("a\tX\tt\nbroken line\n").unwrap_err();
        assert!(matches!(e, CueError::Parse { line: 2, .. }));
    }

    #[test]
    fn missing_file() {
        let e = Corpus::load("/nonexistent/corpus.tsv").unwrap_err();
        assert!(matches!(e, CueError::MissingInput(_)));
    }

    #[test]
    fn sample_caps_each_label() {
        let c = big(&[("A", 500), ("B", 3)]);
        let s = c.sample_per_label(100, 42).unwrap();
        let counts = s.corpus.label_counts();
        assert_eq!(counts["A"], 100);
        assert_eq!(counts["B"], 3);
        assert_eq!(s.undersupplied, vec![("B".to_string(), 3)]);
    }

    #[test]
    fn sample_is_deterministic() {
        let c = big(&[("A", 50), ("B", 70)]);
        let a = c.sample_per_label(10, 9).unwrap().corpus.to_tsv();
        let b = c.sample_per_label(10, 9).unwrap().corpus.to_tsv();
        assert_eq!(a.as_bytes(), b.as_bytes());
        let other = c.sample_per_label(10, 10).unwrap().corpus.to_tsv();
        assert_ne!(a, other);
    }

    #[test]
    fn sample_rejects_zero() {
        assert!(big(&[("A", 2)]).sample_per_label(0, 1).is_err());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let c = big(&[("A", 4), ("B", 2)]);
        c.save(&p).unwrap();
        assert_eq!(Corpus::load(&p).unwrap(), c);
    }
}
