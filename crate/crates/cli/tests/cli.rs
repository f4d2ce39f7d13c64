//! End-to-end command tests driving the `mlmatch` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const DICT: &str = "\
BAH  B AA1
BEE  B IY0
BOE  B OW1
BOO  B UW2
KAY  K EY1
KED  K EH0 D
KITE  K AY1 T
KAW  K AW0
";

const WORDS: [&str; 8] = ["bah", "bee", "boe", "boo", "kay", "ked", "kite", "kaw"];
const DURS: [f64; 4] = [0.25, 0.6, 1.3, 2.6];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mlmatch"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn mlmatch")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Deterministic synthetic song: lyric words are a function of each note's
/// pitch-change sign and duration class.
fn song_json(rng: &mut StdRng, id: &str, line_count: usize) -> String {
    let first_pitch = 60i64;
    let mut onset = 0.0;
    let mut next_pitch = first_pitch;
    let mut lines = Vec::new();
    for _ in 0..line_count {
        let notes_in_line = rng.gen_range(4..=7);
        let mut notes = Vec::new();
        let mut words = Vec::new();
        for _ in 0..notes_in_line {
            let pitch = next_pitch;
            let class = rng.gen_range(0..4);
            let dur = DURS[class];
            notes.push(format!(
                r#"{{"pitch":{pitch},"onset":{onset},"duration":{dur}}}"#
            ));
            let sign = usize::from(pitch >= first_pitch);
            words.push(WORDS[sign * 4 + class]);
            onset += dur;
            next_pitch = rng.gen_range(48..=72);
        }
        lines.push(format!(
            r#"{{"notes":[{}],"text":"{}"}}"#,
            notes.join(","),
            words.join(" ")
        ));
    }
    format!(
        r#"{{"song_id":"{id}","language":"en","lines":[{}]}}"#,
        lines.join(",")
    )
}

struct Fixture {
    dir: PathBuf,
}

impl Fixture {
    fn new(name: &str) -> Self {
        let dir = std::env::temp_dir().join(format!("mlmatch-cli-{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    fn write_corpus(&self, name: &str, songs: usize, lines: usize, seed: u64) -> PathBuf {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut text = String::new();
        for i in 0..songs {
            text.push_str(&song_json(&mut rng, &format!("song{i:03}"), lines));
            text.push('\n');
        }
        self.write(name, &text)
    }

    fn write_tiny_config(&self) -> PathBuf {
        self.write(
            "config.toml",
            "[data]\nrare_min_count = 1\n\n[encoder]\nmodel_dim = 16\nheads = 2\n\
             feedforward_dim = 32\nmax_len = 64\n\n[train]\nbatch_size = 2\nepochs = 2\n\
             warmup_epochs = 1\nbase_lr = 1e-3\n",
        )
    }

    fn ingest(&self, corpus: &Path, out: &str, extra: &[&str]) -> PathBuf {
        let dict = self.write("dict.txt", DICT);
        let config = self.write_tiny_config();
        let out_dir = self.path(out);
        let output = run(bin()
            .args(["ingest", "--corpus"])
            .arg(corpus)
            .arg("--cmudict")
            .arg(&dict)
            .args(["--lines", "4", "--seed", "1", "--out"])
            .arg(&out_dir)
            .arg("--config")
            .arg(&config)
            .args(extra));
        assert_success(&output, "ingest");
        out_dir
    }

    fn train(&self, data: &Path, out: &str, seed: u64) -> PathBuf {
        let config = self.write_tiny_config();
        let ckpt = self.path(out);
        let output = run(bin()
            .args(["train", "--data"])
            .arg(data)
            .arg("--out")
            .arg(&ckpt)
            .args(["--seed", &seed.to_string()])
            .arg("--config")
            .arg(&config));
        assert_success(&output, "train");
        ckpt
    }
}

#[test]
fn ingest_counts_match_hand_computed_windows() {
    let fx = Fixture::new("ingest-counts");
    // 10 songs: six with 9 lines (2 windows each, line 9 dropped), four
    // with 4 lines (1 window each) -> 16 segments.
    let mut rng = StdRng::seed_from_u64(7);
    let mut corpus = String::new();
    for i in 0..6 {
        corpus.push_str(&song_json(&mut rng, &format!("nine{i}"), 9));
        corpus.push('\n');
    }
    for i in 0..4 {
        corpus.push_str(&song_json(&mut rng, &format!("four{i}"), 4));
        corpus.push('\n');
    }
    let corpus = fx.write("corpus.jsonl", &corpus);
    let data = fx.ingest(&corpus, "data", &[]);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["songs_loaded"], 10);
    assert_eq!(summary["segments_raw"], 16);
    let train = summary["train_segments"].as_u64().unwrap();
    let val = summary["val_segments"].as_u64().unwrap();
    assert_eq!(train + val, 16);
    // Song-level 8:2 split over 10 songs.
    assert_eq!(summary["train_songs"], 8);
    assert_eq!(summary["val_songs"], 2);
}

#[test]
fn ingest_without_cmudict_is_usage_error() {
    let fx = Fixture::new("ingest-usage");
    let corpus = fx.write_corpus("corpus.jsonl", 2, 4, 0);
    let output = run(bin()
        .args(["ingest", "--corpus"])
        .arg(&corpus)
        .args(["--lines", "4", "--out"])
        .arg(fx.path("data")));
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn ingest_missing_corpus_is_data_error() {
    let fx = Fixture::new("ingest-missing");
    let dict = fx.write("dict.txt", DICT);
    let output = run(bin()
        .args(["ingest", "--corpus"])
        .arg(fx.path("nonexistent.jsonl"))
        .arg("--cmudict")
        .arg(&dict)
        .args(["--lines", "4", "--out"])
        .arg(fx.path("data")));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn ingest_reruns_are_byte_identical() {
    let fx = Fixture::new("ingest-determinism");
    let corpus = fx.write_corpus("corpus.jsonl", 8, 4, 3);
    let a = fx.ingest(&corpus, "data_a", &[]);
    let b = fx.ingest(&corpus, "data_b", &[]);
    for file in ["train.jsonl", "val.jsonl", "quantizer.json", "summary.json"] {
        let ba = std::fs::read(a.join(file)).unwrap();
        let bb = std::fs::read(b.join(file)).unwrap();
        assert_eq!(ba, bb, "{file} differs between identical runs");
    }
    // The manifest exists and records the inputs.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "ingest");
    assert_eq!(manifest["seed"], 1);
    assert!(manifest["input_hashes"].as_object().unwrap().len() >= 2);
}

#[test]
fn train_writes_checkpoint_and_monotone_log() {
    let fx = Fixture::new("train-basic");
    let corpus = fx.write_corpus("corpus.jsonl", 10, 4, 11);
    let data = fx.ingest(&corpus, "data", &[]);
    let ckpt = fx.train(&data, "ckpt.json", 5);

    assert!(ckpt.exists());
    let log_path = fx.path("ckpt.log.jsonl");
    let log = std::fs::read_to_string(&log_path).unwrap();
    let epochs: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, vec![1, 2]);
    let manifest = fx.path("ckpt.json.manifest.json");
    assert!(manifest.exists());
}

#[test]
fn train_rejects_invalid_alpha() {
    let fx = Fixture::new("train-alpha");
    let corpus = fx.write_corpus("corpus.jsonl", 8, 4, 13);
    let data = fx.ingest(&corpus, "data", &[]);
    let bad = fx.write(
        "bad.toml",
        "[data]\nrare_min_count = 1\n\n[train]\nalpha = 1.5\nbatch_size = 2\nepochs = 1\n",
    );
    let output = run(bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(fx.path("ckpt.json"))
        .arg("--config")
        .arg(&bad));
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn train_is_seed_deterministic_across_runs() {
    let fx = Fixture::new("train-determinism");
    let corpus = fx.write_corpus("corpus.jsonl", 8, 4, 17);
    let data = fx.ingest(&corpus, "data", &[]);
    let a = fx.train(&data, "ckpt_a.json", 9);
    let b = fx.train(&data, "ckpt_b.json", 9);
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "checkpoints differ for identical seeds"
    );
}

#[test]
fn retrieve_emits_topk_lines_and_grid() {
    let fx = Fixture::new("retrieve");
    let corpus = fx.write_corpus("corpus.jsonl", 12, 4, 19);
    let data = fx.ingest(&corpus, "data", &[]);
    let ckpt = fx.train(&data, "ckpt.json", 3);

    // Melody-only query: the notes of the first corpus song.
    let first_song = std::fs::read_to_string(&corpus)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    let song: serde_json::Value = serde_json::from_str(&first_song).unwrap();
    let lines: Vec<serde_json::Value> = song["lines"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| serde_json::json!({ "notes": l["notes"] }))
        .collect();
    let query = serde_json::json!({ "song_id": "q0", "lines": lines });
    let query_path = fx.write("query.jsonl", &format!("{query}\n"));

    let out = fx.path("ranked.jsonl");
    let output = run(bin()
        .args(["retrieve", "--ckpt"])
        .arg(&ckpt)
        .arg("--query")
        .arg(&query_path)
        .arg("--db")
        .arg(&data)
        .args(["--topk", "5", "--out"])
        .arg(&out));
    assert_success(&output, "retrieve");

    let ranked = std::fs::read_to_string(&out).unwrap();
    assert_eq!(ranked.lines().count(), 5, "expected exactly 5 ranked lines");
    for (i, line) in ranked.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["rank"], (i + 1) as u64);
        for key in [
            "candidate_id",
            "cost",
            "raw_sdtw",
            "length_penalty",
            "path",
            "provenance",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["path"][0][0].is_u64());
    }

    // Human-readable grid: three tiers under the notes.
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("notes"));
    assert!(stdout.contains("words"));
    assert!(stdout.contains("sylphones"));
}

#[test]
fn retrieve_accepts_raw_corpus_database() {
    let fx = Fixture::new("retrieve-rawdb");
    let corpus = fx.write_corpus("corpus.jsonl", 12, 4, 47);
    let raw_db = fx.write_corpus("db.jsonl", 6, 4, 53);
    let data = fx.ingest(&corpus, "data", &[]);
    let ckpt = fx.train(&data, "ckpt.json", 3);
    let dict = fx.path("dict.txt");

    let query = serde_json::json!({
        "song_id": "q0",
        "lines": [{ "notes": [
            {"pitch": 60, "onset": 0.0, "duration": 0.6},
            {"pitch": 64, "onset": 0.6, "duration": 1.3},
            {"pitch": 55, "onset": 1.9, "duration": 0.25},
            {"pitch": 62, "onset": 2.15, "duration": 2.6},
        ]}]
    });
    let query_path = fx.write("query.jsonl", &format!("{query}\n"));
    let out = fx.path("ranked.jsonl");

    // Without --cmudict a raw-corpus db is a usage error.
    let output = run(bin()
        .args(["retrieve", "--ckpt"])
        .arg(&ckpt)
        .arg("--query")
        .arg(&query_path)
        .arg("--db")
        .arg(&raw_db)
        .args(["--topk", "2", "--out"])
        .arg(&out));
    assert_eq!(output.status.code(), Some(1));

    let output = run(bin()
        .args(["retrieve", "--ckpt"])
        .arg(&ckpt)
        .arg("--query")
        .arg(&query_path)
        .arg("--db")
        .arg(&raw_db)
        .arg("--cmudict")
        .arg(&dict)
        .args(["--topk", "2", "--out"])
        .arg(&out));
    assert_success(&output, "retrieve with raw db");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn retrieve_lyrics_to_melody_direction() {
    let fx = Fixture::new("retrieve-bidir");
    let corpus = fx.write_corpus("corpus.jsonl", 12, 4, 43);
    let data = fx.ingest(&corpus, "data", &[]);
    let ckpt = fx.train(&data, "ckpt.json", 3);
    let dict = fx.path("dict.txt");

    // Text-only query: find melodies for these lyrics.
    let query = serde_json::json!({
        "song_id": "lyricq",
        "lines": [
            { "text": "bah bee boe boo" },
            { "text": "kay ked kite kaw" },
            { "text": "bah kay bee ked" },
            { "text": "boe kite boo kaw" },
        ]
    });
    let query_path = fx.write("query.jsonl", &format!("{query}\n"));
    let out = fx.path("ranked.jsonl");
    let output = run(bin()
        .args(["retrieve", "--ckpt"])
        .arg(&ckpt)
        .arg("--query")
        .arg(&query_path)
        .arg("--db")
        .arg(&data)
        .arg("--cmudict")
        .arg(&dict)
        .args(["--direction", "lyrics2melody", "--topk", "3", "--out"])
        .arg(&out));
    assert_success(&output, "retrieve lyrics2melody");
    let ranked = std::fs::read_to_string(&out).unwrap();
    assert_eq!(ranked.lines().count(), 3);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("sylphones"));
}

#[test]
fn evaluate_with_plain_doubles_pool_and_is_deterministic() {
    let fx = Fixture::new("evaluate");
    let corpus = fx.write_corpus("corpus.jsonl", 10, 4, 23);
    let test = fx.write_corpus("test.jsonl", 6, 4, 29);
    let data = fx.ingest(&corpus, "data", &[]);
    let ckpt = fx.train(&data, "ckpt.json", 3);
    let dict = fx.path("dict.txt");

    let eval = |out: &str, with_plain: bool| -> serde_json::Value {
        let out_path = fx.path(out);
        let mut cmd = bin();
        cmd.args(["evaluate", "--ckpt"])
            .arg(&ckpt)
            .arg("--test")
            .arg(&test)
            .arg("--cmudict")
            .arg(&dict)
            .args(["--method", "mlm", "--seed", "4", "--out"])
            .arg(&out_path);
        if with_plain {
            cmd.arg("--with-plain");
        }
        let output = run(&mut cmd);
        assert_success(&output, "evaluate");
        serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap()
    };

    let plain = eval("report_plain.json", true);
    let bare = eval("report_bare.json", false);
    let original = bare["original_pool_size"].as_u64().unwrap();
    assert_eq!(bare["pool_size"].as_u64().unwrap(), original);
    assert_eq!(
        plain["pool_size"].as_u64().unwrap(),
        2 * original,
        "--with-plain must double the candidate pool"
    );
    assert_eq!(plain["method"], "mlm");
    assert_eq!(plain["queries"].as_u64().unwrap(), original);

    // Same inputs and seed -> identical report bytes.
    let again = eval("report_plain2.json", true);
    assert_eq!(
        serde_json::to_string(&plain).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
}

#[test]
fn evaluate_random_and_length_methods_run_without_checkpoint() {
    let fx = Fixture::new("evaluate-baselines");
    let test = fx.write_corpus("test.jsonl", 6, 4, 31);
    let dict = fx.write("dict.txt", DICT);
    for method in ["random", "length"] {
        let out = fx.path(&format!("report_{method}.json"));
        let dump = fx.path(&format!("ranked_{method}"));
        let output = run(bin()
            .args(["evaluate", "--test"])
            .arg(&test)
            .arg("--cmudict")
            .arg(&dict)
            .args(["--method", method, "--with-plain", "--lines", "4", "--out"])
            .arg(&out)
            .arg("--dump-ranked")
            .arg(&dump));
        assert_success(&output, method);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert!(report["fem_notes"].as_f64().unwrap() >= 1.0);
        // Ranked dumps carry the method tag.
        let a_dump = std::fs::read_dir(&dump).unwrap().next().unwrap().unwrap();
        let first_line = std::fs::read_to_string(a_dump.path())
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        let v: serde_json::Value = serde_json::from_str(&first_line).unwrap();
        assert!(v["method"].is_string());
    }
}

#[test]
fn mlm_beats_random_on_learnable_corpus() {
    let fx = Fixture::new("evaluate-quality");
    let corpus = fx.write_corpus("corpus.jsonl", 24, 4, 37);
    let test = fx.write_corpus("test.jsonl", 10, 4, 41);
    let data = fx.ingest(&corpus, "data", &[]);
    let config = fx.write(
        "train6.toml",
        "[data]\nrare_min_count = 1\n\n[encoder]\nmodel_dim = 16\nheads = 2\n\
         feedforward_dim = 32\nmax_len = 64\n\n[train]\nbatch_size = 4\nepochs = 6\n\
         warmup_epochs = 1\nbase_lr = 2e-3\n",
    );
    let ckpt = fx.path("ckpt.json");
    let output = run(bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .args(["--seed", "5"])
        .arg("--config")
        .arg(&config));
    assert_success(&output, "train");

    let dict = fx.path("dict.txt");
    let run_eval = |method: &str| -> f64 {
        let out = fx.path(&format!("q_{method}.json"));
        let mut cmd = bin();
        cmd.args(["evaluate", "--test"])
            .arg(&test)
            .arg("--cmudict")
            .arg(&dict)
            .args(["--method", method, "--with-plain", "--seed", "2", "--out"])
            .arg(&out);
        if method == "mlm" {
            cmd.arg("--ckpt").arg(&ckpt);
        } else {
            cmd.args(["--lines", "4"]);
        }
        let output = run(&mut cmd);
        assert_success(&output, method);
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        report["hit_at_5_percent"].as_f64().unwrap()
    };
    let mlm = run_eval("mlm");
    let random = run_eval("random");
    assert!(
        mlm > random,
        "trained model (Hit@5% {mlm}) should beat random ({random})"
    );
    assert!(mlm >= 0.5, "trained model Hit@5% {mlm} unexpectedly low");
}
