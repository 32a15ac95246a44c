use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mggraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mggraph"))
        .args(args)
        .env_remove("MGGRAPH_CONFIG")
        .output()
        .expect("binary runs")
}

fn jsonl(path: &Path, rows: &[Value]) {
    let body: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, body).unwrap();
}

fn token(i: usize, text: &str, lemma: &str, pos: &str, dep: &str, head: usize) -> Value {
    json!({"index": i, "text": text, "lemma": lemma, "pos": pos, "dep": dep, "head": head})
}

/// Two chunks: "Apple operates in California" with a photo of the Apple
/// logo, and "Paris hosts the Louvre".
fn write_corpus(dir: &Path) {
    fs::create_dir_all(dir.join("embeddings")).unwrap();
    jsonl(
        &dir.join("chunks.jsonl"),
        &[
            json!({"chunkId": "c1", "text": "Apple operates in California.", "sentenceIds": ["s1"], "imageIds": ["i1"]}),
            json!({"chunkId": "c2", "text": "Paris hosts the Louvre.", "sentenceIds": ["s2"]}),
        ],
    );
    jsonl(
        &dir.join("sentences.jsonl"),
        &[
            json!({"sentenceId": "s1", "chunkId": "c1", "tokens": [
                token(0, "Apple", "Apple", "PROPN", "nsubj", 1),
                token(1, "operates", "operate", "VERB", "ROOT", 1),
                token(2, "in", "in", "ADP", "prep", 1),
                token(3, "California", "California", "PROPN", "pobj", 2),
            ]}),
            json!({"sentenceId": "s2", "chunkId": "c2", "tokens": [
                token(0, "Paris", "Paris", "PROPN", "nsubj", 1),
                token(1, "hosts", "host", "VERB", "ROOT", 1),
                token(2, "the", "the", "DET", "det", 3),
                token(3, "Louvre", "Louvre", "PROPN", "dobj", 1),
            ]}),
        ],
    );
    jsonl(
        &dir.join("entities.jsonl"),
        &[
            json!({"sentenceId": "s1", "tokenSpan": [0, 0], "surface": "Apple", "label": "ORG", "rootIndex": 0}),
            json!({"sentenceId": "s1", "tokenSpan": [3, 3], "surface": "California", "label": "GPE", "rootIndex": 3}),
            json!({"sentenceId": "s2", "tokenSpan": [0, 0], "surface": "Paris", "label": "GPE", "rootIndex": 0}),
            json!({"sentenceId": "s2", "tokenSpan": [3, 3], "surface": "Louvre", "label": "FAC", "rootIndex": 3}),
        ],
    );
    jsonl(
        &dir.join("images.jsonl"),
        &[json!({"imageId": "i1", "chunkId": "c1", "ref": "img/apple-logo.jpg"})],
    );
    jsonl(
        &dir.join("groundings.jsonl"),
        &[
            json!({"entityKey": "apple", "imageId": "i1", "objectId": "o1", "regionRef": "masks/o1.png", "confidence": 0.92}),
        ],
    );
    let mut overrides = serde_json::Map::new();
    let axis = |i: usize| {
        let mut v = vec![0.0; 8];
        v[i] = 1.0;
        json!(v)
    };
    overrides.insert("s1".into(), axis(0));
    overrides.insert("s2".into(), axis(1));
    overrides.insert("q-apple".into(), axis(0));
    fs::write(
        dir.join("embeddings/overrides.json"),
        Value::Object(overrides).to_string(),
    )
    .unwrap();
}

fn config(dir: &Path, extra: Value) -> String {
    let mut cfg = json!({"provider": {"kind": "fixture", "dim": 8}});
    if let (Some(base), Some(more)) = (cfg.as_object_mut(), extra.as_object()) {
        base.extend(more.clone());
    }
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

struct Fixture {
    _tmp: tempfile::TempDir,
    corpus: String,
    index: String,
    config: String,
}

fn built() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus);
    let config = config(tmp.path(), json!({}));
    let index = tmp.path().join("index").to_string_lossy().into_owned();
    let corpus = corpus.to_string_lossy().into_owned();
    let out = mggraph(&[
        "--config", &config, "build", "--corpus", &corpus, "--index", &index,
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["manifest"]["chunks"], 2);
    assert_eq!(summary["manifest"]["multimodalNodes"], 4);
    Fixture {
        _tmp: tmp,
        corpus,
        index,
        config,
    }
}

#[test]
fn build_inspect_query() {
    let f = built();
    let stats = stdout_json(&mggraph(&["inspect", "--index", &f.index]));
    assert_eq!(stats["chunks"], 2);
    assert_eq!(stats["images"], 1);
    assert_eq!(stats["edges"]["semantic"], 2);
    assert_eq!(stats["edges"]["grounding"], 1);
    assert_eq!(stats["edges"]["contextual"], 5);

    let out = mggraph(&[
        "--config",
        &f.config,
        "query",
        "--index",
        &f.index,
        "--text",
        "Where does Apple operate?",
        "--query-id",
        "q-apple",
        "--top-k",
        "2",
    ]);
    let result = stdout_json(&out);
    assert_eq!(result["chunks"][0]["chunkId"], "c1");
    assert_eq!(result["chunks"].as_array().unwrap().len(), 2);
    assert_eq!(result["converged"], true);
    let context = result["context"]["text"].as_str().unwrap();
    assert!(context.starts_with("Query: Where does Apple operate?\n\n[1] chunk c1 (score "));
    assert!(context.contains("Apple operates in California."));
}

#[test]
fn eval_writes_report_and_csv() {
    let f = built();
    let dir = Path::new(&f.index).parent().unwrap();
    let queries = dir.join("queries.jsonl");
    let gold = dir.join("gold.jsonl");
    let csv = dir.join("recall.csv");
    jsonl(
        &queries,
        &[json!({"queryId": "q-apple", "textQuery": "Where does Apple operate?"})],
    );
    jsonl(
        &gold,
        &[json!({"queryId": "q-apple", "goldChunkIds": ["c1"]})],
    );
    let out = mggraph(&[
        "--config",
        &f.config,
        "eval",
        "--index",
        &f.index,
        "--queries",
        queries.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
        "--ks",
        "1,2",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["recallAtK"]["1"], 1.0);
    assert_eq!(
        fs::read_to_string(&csv).unwrap(),
        "k,recall\n1,1.000000\n2,1.000000\n"
    );

    jsonl(
        &gold,
        &[json!({"queryId": "q-apple", "goldChunkIds": ["c404"]})],
    );
    let out = mggraph(&[
        "--config",
        &f.config,
        "eval",
        "--index",
        &f.index,
        "--queries",
        queries.to_str().unwrap(),
        "--gold",
        gold.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("c404"));
}

#[test]
fn usage_errors_exit_2() {
    let f = built();
    assert_eq!(
        mggraph(&["query", "--index", &f.index]).status.code(),
        Some(2)
    );
    assert_eq!(mggraph(&["inspect"]).status.code(), Some(2));
    assert_eq!(mggraph(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        mggraph(&["--provider", "magic", "inspect", "--index", &f.index])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unknown_preset_lists_available() {
    let out = mggraph(&["--preset", "vqa", "inspect", "--index", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("evqa") && err.contains("task-mc"), "{err}");
}

#[test]
fn no_convergence_exits_3() {
    let f = built();
    let dir = Path::new(&f.index).parent().unwrap();
    let cfg = config(dir, json!({"retrieval": {"maxIters": 1, "epsilon": 1e-15}}));
    let out = mggraph(&[
        "--config",
        &cfg,
        "query",
        "--index",
        &f.index,
        "--text",
        "Apple",
        "--query-id",
        "q-apple",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["converged"], false);
    assert_eq!(result["iterations"], 1);
}

#[test]
fn corrupt_index_is_reported() {
    let f = built();
    let edges = Path::new(&f.index).join("edges.jsonl");
    let text = fs::read_to_string(&edges).unwrap();
    fs::write(&edges, &text[..text.len() / 2]).unwrap();
    let out = mggraph(&["inspect", "--index", &f.index]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt index"));
}

#[test]
fn empty_corpus_builds_empty_index() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    fs::write(corpus.join("chunks.jsonl"), "").unwrap();
    fs::write(corpus.join("sentences.jsonl"), "").unwrap();
    let index = tmp.path().join("index");
    stdout_json(&mggraph(&[
        "build",
        "--corpus",
        corpus.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
    ]));
    let stats = stdout_json(&mggraph(&["inspect", "--index", index.to_str().unwrap()]));
    for key in [
        "chunks",
        "images",
        "multimodalNodes",
        "sentences",
        "objects",
        "danglingNodes",
    ] {
        assert_eq!(stats[key], 0, "{key}");
    }
    assert_eq!(stats["degree"]["max"], 0);
}

#[test]
fn schema_error_names_file_and_line() {
    let f = built();
    let corpus = Path::new(&f.corpus);
    let mut ents = fs::read_to_string(corpus.join("entities.jsonl")).unwrap();
    ents.push_str("{\"sentenceId\": \"s9\"}\n");
    fs::write(corpus.join("entities.jsonl"), ents).unwrap();
    let out = mggraph(&[
        "--config", &f.config, "build", "--corpus", &f.corpus, "--index", &f.index,
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("entities.jsonl:5"), "{err}");
}

#[cfg(feature = "remote")]
#[test]
fn remote_provider_round_trip() {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    // answers every POST with a vector derived from the id's length
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap();
            assert!(req.get("text").is_some() || req.get("imageRef").is_some());
            let n = req["id"].as_str().unwrap().len();
            let reply = json!([1.0, n as f64, 0.5, 0.25]).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
        }
    });

    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    write_corpus(&corpus);
    let cfg = config(
        tmp.path(),
        json!({"provider": {"kind": "remote", "dim": 4, "endpoint": format!("http://{addr}/embed")}}),
    );
    let index = tmp.path().join("index");
    let summary = stdout_json(&mggraph(&[
        "--config",
        &cfg,
        "build",
        "--corpus",
        corpus.to_str().unwrap(),
        "--index",
        index.to_str().unwrap(),
    ]));
    assert_eq!(summary["manifest"]["dim"], 4);
    assert!(summary["manifest"]["providerId"]
        .as_str()
        .unwrap()
        .starts_with("remote:"));
    let result = stdout_json(&mggraph(&[
        "--config",
        &cfg,
        "query",
        "--index",
        index.to_str().unwrap(),
        "--text",
        "apple",
    ]));
    assert!(!result["chunks"].as_array().unwrap().is_empty());
}
