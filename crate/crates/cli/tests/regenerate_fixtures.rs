//! Rebuilds the recorded torchdata fixtures (LLM cassette and example bank)
//! from an authored stand-in model, then checks the recorded runs.
//!
//! cargo test -p apirec-cli --test regenerate_fixtures -- --ignored

use std::collections::HashMap;
use std::path::PathBuf;

use apirec::corpus::{extract_code_examples, load_raw_examples, Corpus, DEFAULT_MIN_API_COUNT};
use apirec::decompose::TaskQuery;
use apirec::embedding::{build_index, EmbedText, HashingEmbedder};
use apirec::eval::{load_benchmark, Benchmark, BenchmarkFormat};
use apirec::example_bank::build_example_bank;
use apirec::llm::scripted::{listed_candidates, prompt_task};
use apirec::llm::{LlmContext, LlmRequest, LlmSettings, RecordingProvider, ScriptedLlm, Stage};
use apirec::pipeline::{Engine, Mode, PipelineConfig};
use apirec::prompts::PromptTemplates;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/torchdata")
}

const SUMMARIES: &[(&str, &str)] = &[
    (
        "csv-folder",
        r#"{"task": "Load and only parse CSV files in the folder", "subtasks": ["List all files in the folder", "Filter out non-CSV files", "Open the CSV files", "Parse the CSV files"]}"#,
    ),
    (
        "tar-images",
        "Here is the summary:\n{\"task\": \"Load images stored in tar archives in a folder and batch them\", \"subtasks\": [\"List the tar files in the folder\", \"Open the tar files\", \"Extract the files from the tar archives\", \"Decode the images\", \"Group the images into batches\"]}",
    ),
    (
        "http-json",
        r#"{"task": "Download JSON files from URLs and extract the label of each record", "subtasks": ["Wrap the list of URLs", "Send HTTP requests to the URLs", "Parse the JSON responses", "Extract the label from each record"]}"#,
    ),
    (
        "zip-lines",
        r#"{"task": "Read text lines from zip archives in a folder and shuffle them", "subtasks": ["List the zip files in the folder", "Open the zip files", "Extract the files from the zip archives", "Read the files line by line", "Shuffle the lines"]}"#,
    ),
    (
        "s3-decompress",
        r#"{"task": "Load and decompress the objects stored under an S3 prefix", "subtasks": ["Wrap the S3 prefix", "List the objects under the prefix", "Load the objects", "Decompress the object streams"]}"#,
    ),
    (
        "cache-download",
        r#"{"task": "Download a file once and cache it on local disk", "subtasks": ["Wrap the URL", "Check the on-disk cache", "Download the file over HTTP", "Save the downloaded file to the cache", "Open the cached file"]}"#,
    ),
    (
        "parallel-loading",
        r#"{"task": "Shuffle, shard and batch samples and load them with worker processes", "subtasks": ["Wrap the samples", "Shuffle the samples", "Shard the samples across workers", "Group the samples into batches", "Create a multiprocessing reading service", "Load the batches with a data loader"]}"#,
    ),
    ("hash-check", "This snippet checks some downloaded files."),
    (
        "csv-dict-batches",
        r#"{"task": "Read CSV files in a folder as dictionaries and batch the rows", "subtasks": ["List the CSV files in the folder", "Open the CSV files", "Parse each row as a dictionary", "Group the rows into batches"]}"#,
    ),
];

const DECOMPOSITIONS: &[(&str, &[&str])] = &[
    (
        "Load and only parse CSV files in the folder using Torchdata",
        &[
            "List all files in the folder",
            "Filter out non-CSV files",
            "Open the CSV files",
            "Parse the CSV files",
        ],
    ),
    (
        "Decompress and yield files with their paths from a given source DataPipe",
        &[
            "Get the file paths and compressed streams from the source DataPipe",
            "Decompress each compressed file stream",
            "Wrap the decompressed streams so they are closed automatically",
            "Yield each file path together with its stream from a custom DataPipe",
        ],
    ),
    (
        "Download a tar archive from a URL, extract its files and read them line by line",
        &[
            "Wrap a list of URLs in an iterable DataPipe",
            "Download the tar archive over HTTP",
            "Extract every member file from the tar archives",
            "Read each file line by line",
        ],
    ),
    (
        "Shuffle the records of the JSON files in a folder and group them into batches",
        &[
            "List the JSON files in the folder",
            "Open the JSON files",
            "Parse the JSON records",
            "Shuffle the records",
            "Group consecutive records into batches",
        ],
    ),
];

const WITHIN: &[(&str, &[&str])] = &[
    ("List all files in the folder", &["FileLister"]),
    ("Filter out non-CSV files", &["Filter"]),
    ("Open the CSV files", &["FileOpener"]),
    ("Parse the CSV files", &["parse_csv", "CSVDictParser"]),
    (
        "Get the file paths and compressed streams from the source DataPipe",
        &["FileOpener", "StreamReader"],
    ),
    (
        "Decompress each compressed file stream",
        &["Decompressor", "XzFileLoader", "Bz2FileLoader"],
    ),
    ("Wrap the decompressed streams so they are closed automatically", &["StreamWrapper"]),
    (
        "Yield each file path together with its stream from a custom DataPipe",
        &["IterDataPipe", "Mapper"],
    ),
    ("Wrap a list of URLs in an iterable DataPipe", &["IterableWrapper"]),
    ("Download the tar archive over HTTP", &["HttpReader", "OnlineReader"]),
    ("Extract every member file from the tar archives", &["TarArchiveLoader"]),
    ("Read each file line by line", &["LineReader"]),
    ("List the JSON files in the folder", &["FileLister"]),
    ("Open the JSON files", &["FileOpener"]),
    ("Parse the JSON records", &["JsonParser"]),
    ("Shuffle the records", &["Shuffler"]),
    ("Group consecutive records into batches", &["Batcher"]),
];

const ACROSS: &[(&str, &[&str])] = &[
    (
        "Load and only parse CSV files in the folder using Torchdata",
        &[
            "FileLister", "Filter", "FileOpener", "parse_csv", "CSVDictParser", "FSSpecFileLister", "LineReader",
            "IoPathFileLister", "FSSpecFileOpener", "Mapper", "StreamReader", "Header", "Saver", "Shuffler", "Batcher",
        ],
    ),
    (
        "Decompress and yield files with their paths from a given source DataPipe",
        &[
            "TarArchiveLoader", "Decompressor", "FileOpener", "StreamWrapper", "ZipArchiveLoader", "IterDataPipe",
            "XzFileLoader", "Bz2FileLoader", "StreamReader", "Mapper", "RarArchiveLoader", "IterableWrapper",
            "FlatMapper", "HttpReader", "Saver",
        ],
    ),
    (
        "Download a tar archive from a URL, extract its files and read them line by line",
        &[
            "IterableWrapper", "HttpReader", "TarArchiveLoader", "LineReader", "OnlineReader", "FileOpener",
            "StreamReader", "ZipArchiveLoader", "GDriveReader", "Decompressor", "ParagraphAggregator", "Mapper",
            "FileLister", "Saver", "Header",
        ],
    ),
    (
        "Shuffle the records of the JSON files in a folder and group them into batches",
        &[
            "FileLister", "FileOpener", "JsonParser", "Shuffler", "Batcher", "BucketBatcher", "InBatchShuffler",
            "Grouper", "FSSpecFileLister", "LineReader", "Mapper", "UnBatcher", "Collator", "CSVDictParser",
            "IterableWrapper",
        ],
    ),
];

fn lookup<'a>(table: &'a [(&str, &'a [&str])], key: &str) -> Option<&'a [&'a str]> {
    table.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn line_after<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix(prefix))
}

/// `names` first (as ids, when listed), then the rest of `listed`.
fn prefer(listed: &[String], names: &[&str], by_name: &HashMap<String, String>) -> Vec<String> {
    let mut out: Vec<String> = names
        .iter()
        .filter_map(|n| by_name.get(*n))
        .filter(|id| listed.contains(id))
        .cloned()
        .collect();
    for id in listed {
        if !out.contains(id) {
            out.push(id.clone());
        }
    }
    out
}

fn numbered(ids: &[String]) -> String {
    ids.iter()
        .enumerate()
        .map(|(i, id)| format!("{}. {id}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn authored_model(corpus: &Corpus, raw_codes: Vec<(String, String)>) -> ScriptedLlm {
    let mut by_name = HashMap::new();
    for r in corpus.records() {
        by_name.entry(r.name.clone()).or_insert_with(|| r.id.clone());
    }
    ScriptedLlm::from_fn(move |req: &LlmRequest| {
        let p = &req.prompt;
        Ok(match req.stage {
            Stage::Summarize => {
                let (id, _) = raw_codes
                    .iter()
                    .find(|(_, code)| p.contains(code.trim_end()))
                    .expect("summary for an unknown example");
                SUMMARIES.iter().find(|(k, _)| k == id).unwrap().1.to_string()
            }
            Stage::Decompose => {
                let task = prompt_task(p).unwrap();
                let subtasks = lookup(DECOMPOSITIONS, &task).unwrap_or_else(|| panic!("no decomposition for {task}"));
                numbered(&subtasks.iter().map(|s| s.to_string()).collect::<Vec<_>>())
            }
            Stage::RerankWithin => {
                let subtask = line_after(p, "Subtask: ").unwrap();
                let names = lookup(WITHIN, subtask).unwrap_or(&[]);
                numbered(&prefer(&listed_candidates(p), names, &by_name))
            }
            Stage::RerankAcross => {
                let task = line_after(p, "Task: ").unwrap();
                let k: usize = line_after(p, "Final top-")
                    .and_then(|l| l.strip_suffix(" APIs:"))
                    .unwrap()
                    .parse()
                    .unwrap();
                let listed = listed_candidates(p);
                let names = lookup(ACROSS, task).unwrap_or_else(|| panic!("no final order for {task}"));
                let mut ids: Vec<String> = names
                    .iter()
                    .filter_map(|n| by_name.get(*n))
                    .filter(|id| listed.contains(id))
                    .cloned()
                    .collect();
                ids.truncate(k);
                numbered(&ids)
            }
            Stage::Other => String::new(),
        })
    })
}

#[test]
#[ignore]
fn regenerate_torchdata_fixtures() {
    let dir = fixtures();
    let corpus = Corpus::load(&dir.join("corpus.jsonl")).unwrap();
    let raws = load_raw_examples(&dir.join("raw_examples.jsonl")).unwrap();
    let codes = raws.iter().map(|r| (r.id.clone(), r.code.clone())).collect();
    let cassette = dir.join("cassette.jsonl");
    let _ = std::fs::remove_file(&cassette);
    let llm = RecordingProvider::open(authored_model(&corpus, codes), &cassette).unwrap();
    let settings = LlmSettings::default();
    let templates = PromptTemplates::default();
    let ctx = LlmContext::new(&llm, &settings, &templates);
    let embedder = HashingEmbedder::new();

    let extraction = extract_code_examples(&corpus, raws, DEFAULT_MIN_API_COUNT);
    let built = build_example_bank(&extraction.examples, &corpus, &ctx, &embedder, 1).unwrap();
    assert_eq!(built.failures.len(), 1);
    built.bank.save(&dir.join("bank.jsonl")).unwrap();

    let index = build_index(&corpus, &embedder, EmbedText::default(), 1).unwrap();
    let engine = Engine::new(&corpus, &index, &built.bank, &embedder, ctx, PipelineConfig::default()).unwrap();
    let Benchmark::ApiRec(samples) = load_benchmark(&dir.join("benchmark.jsonl"), BenchmarkFormat::ApiRec).unwrap()
    else {
        unreachable!()
    };
    for s in &samples {
        let task = TaskQuery::new(&s.task);
        for k in [5, 10, 15] {
            for mode in Mode::ALL {
                engine.run(&task, k, mode).unwrap();
            }
        }
        let rec = engine.recommend(&task, 15).unwrap();
        for g in &s.gold_api_ids {
            assert!(
                rec.per_subtask.iter().any(|t| t.retrieved.iter().any(|r| &r.api_id == g)),
                "{g} not retrieved for {}",
                s.id
            );
        }
        assert!(!rec.flags.decompose_fallback && rec.flags.within_fallback.is_empty());
    }

    let csv_folder = engine.recommend(&TaskQuery::new(&samples[0].task), 5).unwrap();
    let names: Vec<&str> = csv_folder.ids().iter().map(|id| corpus.get(id).unwrap().name.as_str()).collect();
    assert_eq!(names[..4], ["FileLister", "Filter", "FileOpener", "parse_csv"]);

    let decompress = engine.recommend(&TaskQuery::new(&samples[1].task), 10).unwrap();
    let pos = |name: &str| decompress.ids().iter().position(|id| corpus.get(id).unwrap().name == name).unwrap() + 1;
    assert_eq!((pos("Decompressor"), pos("StreamWrapper"), pos("IterDataPipe")), (2, 4, 6));
}
