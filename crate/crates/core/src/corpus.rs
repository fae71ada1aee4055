//! API documentation corpus and code-example extraction.
//!
//! The corpus is the retrieval unit store: one [`ApiRecord`] per documented
//! API, read from JSONL produced by out-of-band documentation converters.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::jsonl;

/// Minimum number of distinct corpus APIs a code example must call to enter
/// the example bank.
pub const DEFAULT_MIN_API_COUNT: usize = 3;

static MARKUP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>]*>").unwrap());

/// Strips markup tags and collapses whitespace runs to a single space.
pub fn normalize_description(text: &str) -> String {
    let stripped = MARKUP.replace_all(text, " ");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiRecord {
    pub id: String,
    pub library: String,
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_url: Option<String>,
}

impl ApiRecord {
    fn normalized(mut self) -> Result<Self> {
        if self.id.trim().is_empty() {
            return Err(Error::InvalidRecord {
                id: self.id,
                message: "empty id".into(),
            });
        }
        self.description = normalize_description(&self.description);
        if self.description.is_empty() {
            return Err(Error::InvalidRecord {
                id: self.id,
                message: "empty description".into(),
            });
        }
        Ok(self)
    }
}

/// Immutable, validated set of API records. Lookup by id is total over
/// `records`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    library_scope: Vec<String>,
    records: Vec<ApiRecord>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Validates and indexes `records`. When `library_scope` is non-empty,
    /// records from other libraries are left out; otherwise the scope is the
    /// set of libraries seen, in first-seen order.
    pub fn new(library_scope: Vec<String>, records: Vec<ApiRecord>) -> Result<Self> {
        let records = records
            .into_iter()
            .filter(|r| library_scope.is_empty() || library_scope.contains(&r.library))
            .map(ApiRecord::normalized)
            .collect::<Result<Vec<_>>>()?;

        let mut by_id = HashMap::with_capacity(records.len());
        let mut dups = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if by_id.insert(r.id.clone(), i).is_some() && !dups.contains(&r.id) {
                dups.push(r.id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(Error::DuplicateIds(dups));
        }

        let library_scope = if library_scope.is_empty() {
            let mut seen = Vec::new();
            for r in &records {
                if !seen.contains(&r.library) {
                    seen.push(r.library.clone());
                }
            }
            seen
        } else {
            library_scope
        };

        Ok(Self {
            library_scope,
            records,
            by_id,
        })
    }

    pub fn library_scope(&self) -> &[String] {
        &self.library_scope
    }

    pub fn records(&self) -> &[ApiRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, id: &str) -> Option<&ApiRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn get(&self, id: &str) -> Result<&ApiRecord> {
        self.lookup(id).ok_or_else(|| Error::UnknownApi(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    /// Position of `id` in corpus order.
    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        jsonl::to_string(&self.records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.records)
    }

    /// Loads a corpus previously written by [`Corpus::write_jsonl`] (or any
    /// single file in the corpus format) with no library filter.
    pub fn load(path: &Path) -> Result<Self> {
        parse_api_docs(&[path.to_path_buf()], &[])
    }
}

/// Reads every file in order and builds a validated corpus. Record order is
/// input order.
pub fn parse_api_docs(paths: &[PathBuf], library_scope: &[String]) -> Result<Corpus> {
    let mut records: Vec<ApiRecord> = Vec::new();
    for path in paths {
        records.extend(jsonl::read::<ApiRecord>(path)?);
    }
    Corpus::new(library_scope.to_vec(), records)
}

/// Code example as found in documentation, before filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub code: String,
    pub api_ids: Vec<String>,
    #[serde(default)]
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeExample {
    pub id: String,
    pub code: String,
    /// Distinct corpus APIs in first-invocation order.
    pub api_ids: Vec<String>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnresolvedRef {
    pub example_id: String,
    pub api_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Extraction {
    pub examples: Vec<CodeExample>,
    /// Ids of examples with fewer distinct resolvable APIs than the minimum.
    pub below_threshold: Vec<String>,
    /// References that did not resolve in the corpus and were dropped.
    pub unresolved: Vec<UnresolvedRef>,
}

/// Keeps the examples that call at least `min_api_count` distinct corpus
/// APIs. Unresolvable references are dropped and reported; repeated calls
/// collapse to their first occurrence. Input order is preserved.
pub fn extract_code_examples(
    corpus: &Corpus,
    raw_examples: Vec<RawExample>,
    min_api_count: usize,
) -> Extraction {
    let mut out = Extraction::default();
    for raw in raw_examples {
        let mut seen = HashSet::new();
        let mut api_ids = Vec::new();
        for api in raw.api_ids {
            if !corpus.contains(&api) {
                warn!(example = %raw.id, api = %api, "dropping unresolved api reference");
                out.unresolved.push(UnresolvedRef {
                    example_id: raw.id.clone(),
                    api_id: api,
                });
                continue;
            }
            if seen.insert(api.clone()) {
                api_ids.push(api);
            }
        }
        if api_ids.len() < min_api_count {
            out.below_threshold.push(raw.id);
            continue;
        }
        out.examples.push(CodeExample {
            id: raw.id,
            code: raw.code,
            api_ids,
            source: raw.source,
        });
    }
    out
}

pub fn load_raw_examples(path: &Path) -> Result<Vec<RawExample>> {
    jsonl::read(path)
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use proptest::prelude::*;

    use super::*;

    fn rec(id: &str, desc: &str) -> ApiRecord {
        ApiRecord {
            id: id.into(),
            library: "lib".into(),
            name: id.rsplit('.').next().unwrap().into(),
            description: desc.into(),
            signature: None,
            source_url: None,
        }
    }

    fn write_tmp(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_set_gives_empty_corpus() {
        let corpus = parse_api_docs(&[], &[]).unwrap();
        assert!(corpus.is_empty());
    }

    #[test]
    fn single_record_lookup() {
        let f = write_tmp(
            r#"{"id":"torchdata.FileLister","library":"torchdata","name":"FileLister","description":"Lists files..."}"#,
        );
        let corpus = parse_api_docs(&[f.path().to_path_buf()], &[]).unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.lookup("torchdata.FileLister").unwrap().name, "FileLister");
        assert_eq!(corpus.library_scope(), ["torchdata".to_string()]);
    }

    #[test]
    fn duplicate_ids_are_named() {
        let line = r#"{"id":"a.B","library":"a","name":"B","description":"d"}"#;
        let f = write_tmp(&format!("{line}\n{line}\n"));
        match parse_api_docs(&[f.path().to_path_buf()], &[]) {
            Err(Error::DuplicateIds(ids)) => assert_eq!(ids, vec!["a.B".to_string()]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_file_and_line() {
        let f = write_tmp("{\"id\":\"a\",\"library\":\"l\",\"name\":\"a\",\"description\":\"x\"}\n\nnot json\n");
        let err = parse_api_docs(&[f.path().to_path_buf()], &[]).unwrap_err();
        match &err {
            Error::Parse { file, line, .. } => {
                assert_eq!(file, f.path());
                assert_eq!(*line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blank_description_is_rejected() {
        let err = Corpus::new(vec![], vec![rec("a.b", " <br/>  ")]).unwrap_err();
        assert!(matches!(err, Error::InvalidRecord { .. }));
    }

    #[test]
    fn description_markup_and_whitespace_normalized() {
        assert_eq!(
            normalize_description("Yields  <code>file</code>\n names."),
            "Yields file names."
        );
    }

    #[test]
    fn library_scope_filters_records() {
        let mut other = rec("b.X", "other lib");
        other.library = "b".into();
        let corpus = Corpus::new(vec!["lib".into()], vec![rec("lib.A", "a"), other]).unwrap();
        assert_eq!(corpus.len(), 1);
        assert!(corpus.lookup("b.X").is_none());
    }

    fn small_corpus() -> Corpus {
        Corpus::new(
            vec![],
            ["l.A", "l.B", "l.C", "l.D"].iter().map(|id| rec(id, "desc")).collect(),
        )
        .unwrap()
    }

    fn raw(id: &str, apis: &[&str]) -> RawExample {
        RawExample {
            id: id.into(),
            code: "code".into(),
            api_ids: apis.iter().map(|s| s.to_string()).collect(),
            source: "doc".into(),
        }
    }

    #[test]
    fn single_api_example_excluded() {
        let out = extract_code_examples(&small_corpus(), vec![raw("e", &["l.A"])], 3);
        assert!(out.examples.is_empty());
        assert_eq!(out.below_threshold, vec!["e".to_string()]);
    }

    #[test]
    fn four_api_example_kept_in_order() {
        let out = extract_code_examples(&small_corpus(), vec![raw("e", &["l.D", "l.A", "l.C", "l.B"])], 3);
        assert_eq!(out.examples[0].api_ids, ["l.D", "l.A", "l.C", "l.B"]);
    }

    #[test]
    fn repeated_call_dedups_to_first_occurrence() {
        // A, A, B, C -> distinct count 3, kept as [A, B, C]
        let out = extract_code_examples(&small_corpus(), vec![raw("e", &["l.A", "l.A", "l.B", "l.C"])], 3);
        assert_eq!(out.examples.len(), 1);
        assert_eq!(out.examples[0].api_ids, ["l.A", "l.B", "l.C"]);
    }

    #[test]
    fn unresolved_refs_dropped_and_counted() {
        let out = extract_code_examples(
            &small_corpus(),
            vec![raw("e", &["l.A", "zz.Nope", "l.B"]), raw("f", &["l.A", "l.B", "x.Y", "l.C"])],
            3,
        );
        assert_eq!(out.unresolved.len(), 2);
        assert_eq!(out.below_threshold, vec!["e".to_string()]);
        assert_eq!(out.examples[0].api_ids, ["l.A", "l.B", "l.C"]);
    }

    fn arb_record() -> impl Strategy<Value = ApiRecord> {
        (
            "[a-z]{1,6}(\\.[A-Za-z_]{1,8}){1,2}",
            "[a-z]{1,5}",
            "[A-Za-z ]{0,8}",
            "[A-Za-z0-9]{1,6}( [A-Za-z0-9,.]{1,6}){0,6}",
            proptest::option::of("[a-z(), ]{0,12}"),
        )
            .prop_map(|(id, library, name, description, signature)| ApiRecord {
                id,
                library,
                name,
                description,
                signature,
                source_url: None,
            })
    }

    proptest! {
        #[test]
        fn serialize_parse_roundtrip(records in proptest::collection::vec(arb_record(), 0..12)) {
            let mut seen = HashSet::new();
            let records: Vec<_> = records.into_iter().filter(|r| seen.insert(r.id.clone())).collect();
            let corpus = Corpus::new(vec![], records).unwrap();
            let f = write_tmp(&corpus.to_jsonl().unwrap());
            let again = Corpus::load(f.path()).unwrap();
            prop_assert_eq!(again.records(), corpus.records());
        }

        #[test]
        fn extraction_is_ordered_subset(picks in proptest::collection::vec(proptest::collection::vec(0usize..6, 0..7), 0..10)) {
            let names = ["l.A", "l.B", "l.C", "l.D", "q.X", "q.Y"];
            let raws: Vec<_> = picks.iter().enumerate()
                .map(|(i, p)| raw(&format!("e{i}"), &p.iter().map(|&j| names[j]).collect::<Vec<_>>()))
                .collect();
            let out = extract_code_examples(&small_corpus(), raws.clone(), 3);
            let mut cursor = 0;
            for ex in &out.examples {
                let pos = raws[cursor..].iter().position(|r| r.id == ex.id).unwrap();
                cursor += pos + 1;
                prop_assert!(ex.api_ids.len() >= 3);
            }
            prop_assert_eq!(out.examples.len() + out.below_threshold.len(), raws.len());
        }
    }
}
