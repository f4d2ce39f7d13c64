//! Implementations of the four commands: ingest, train, retrieve, evaluate.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use mlmatch_core::align::AlignmentPath;
use mlmatch_core::baselines::{length_informed_rank, random_rank, BaselineResult, SimpleCandidate};
use mlmatch_core::checkpoint::{Checkpoint, DataConfig, VocabHashes, CHECKPOINT_VERSION};
use mlmatch_core::corpus::{
    filter_line_lengths, filter_rare_vocabulary, load_corpus, segment_song, split_dev, NoteEvent,
    Segment, SongRecord, VocabularyReport,
};
use mlmatch_core::encoder::{ParameterSet, Side};
use mlmatch_core::melody::{fit_quantizers, melody_feature_matrix, QuantizerStats};
use mlmatch_core::metrics::{
    fem_of_path, hit_at_k, rhyme_density, rhyme_distance, rhyme_strength,
    stress_matching_rate_parts, KahanMean, LineEndings, MetricsReport, QueryMetrics, RankedPool,
    SmrValues,
};
use mlmatch_core::phonetics::{
    parse_pronouncing_dictionary, sylphone_feature_matrix, text_to_sylphones,
    PronouncingDictionary, StopwordList, Sylphone, STOPWORDS_TEXT,
};
use mlmatch_core::retrieval::{
    build_index, make_plain_variant, plain_id, rank, CandidateIndex, CandidateSource, Direction,
    Provenance, RankedMatch, SylphonePool,
};
use mlmatch_core::training::{featurize_segment, train, TrainConfig, TrainItem};
use mlmatch_core::Real;

use crate::config::FileConfig;
use crate::manifest::{sha256_hex, ManifestBuilder};
use crate::render::alignment_grid;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const QUANTIZER_FILE: &str = "quantizer.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Deterministic per-stage counts and hashes written with every dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSummary {
    pub songs_loaded: usize,
    pub songs_non_english: usize,
    pub segments_raw: usize,
    pub segments_after_rare_filter: usize,
    pub segments_after_length_filter: usize,
    pub train_segments: usize,
    pub val_segments: usize,
    pub train_songs: usize,
    pub val_songs: usize,
    pub data: DataConfig,
    pub vocabulary: VocabularyReport,
    pub cmudict_sha256: String,
    pub stopwords_sha256: String,
}

fn write_segments_jsonl(path: &Path, segments: &[Segment]) -> Result<()> {
    let mut out = String::new();
    for seg in segments {
        out.push_str(&serde_json::to_string(seg)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn read_segments_jsonl(path: &Path) -> Result<Vec<Segment>> {
    let file =
        std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut segments = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        segments.push(serde_json::from_str(&line)?);
    }
    Ok(segments)
}

pub fn run_ingest(
    corpus: &Path,
    cmudict: &Path,
    lines: usize,
    out: &Path,
    seed: u64,
    config: &FileConfig,
    config_json: &str,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("ingest", config_json, seed);
    manifest.input(corpus)?;
    manifest.input(cmudict)?;

    let dict = parse_pronouncing_dictionary(cmudict)?;
    let stopwords = StopwordList::default();
    let songs = load_corpus(corpus)?;
    let songs_loaded = songs.len();
    let english: Vec<SongRecord> = songs
        .into_iter()
        .filter(|s| {
            let keep = s.language == "en";
            if !keep {
                log::info!("skipping song {:?}: language {:?}", s.song_id, s.language);
            }
            keep
        })
        .collect();
    let songs_non_english = songs_loaded - english.len();

    let mut segments: Vec<Segment> = english
        .iter()
        .flat_map(|s| segment_song(s, lines, &dict, &stopwords))
        .collect();
    let segments_raw = segments.len();

    let data_cfg = DataConfig {
        lines_per_segment: lines,
        rare_min_count: config.data.rare_min_count,
        melody_line_range: config.data.melody_line_range,
        lyrics_line_range: config.data.lyrics_line_range,
        split_ratio: config.data.split_ratio,
    };

    let (filtered, vocabulary) = filter_rare_vocabulary(segments, data_cfg.rare_min_count)?;
    segments = filtered;
    let segments_after_rare_filter = segments.len();
    segments = filter_line_lengths(
        segments,
        data_cfg.melody_line_range,
        data_cfg.lyrics_line_range,
    );
    let segments_after_length_filter = segments.len();

    let (train_segs, val_segs) = split_dev(segments, data_cfg.split_ratio, seed)?;
    let quantizer = fit_quantizers(&train_segs)?;

    let count_songs = |segs: &[Segment]| {
        segs.iter()
            .map(|s| s.song_id.as_str())
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    };
    let summary = IngestSummary {
        songs_loaded,
        songs_non_english,
        segments_raw,
        segments_after_rare_filter,
        segments_after_length_filter,
        train_segments: train_segs.len(),
        val_segments: val_segs.len(),
        train_songs: count_songs(&train_segs),
        val_songs: count_songs(&val_segs),
        data: data_cfg,
        vocabulary,
        cmudict_sha256: crate::manifest::hash_path(cmudict)?,
        stopwords_sha256: sha256_hex(STOPWORDS_TEXT.as_bytes()),
    };

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_segments_jsonl(&out.join(TRAIN_FILE), &train_segs)?;
    write_segments_jsonl(&out.join(VAL_FILE), &val_segs)?;
    std::fs::write(
        out.join(QUANTIZER_FILE),
        serde_json::to_string_pretty(&quantizer)?,
    )?;
    std::fs::write(
        out.join(SUMMARY_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    manifest.write(out)?;

    println!(
        "ingested {} songs -> {} segments ({} train / {} val) into {}",
        songs_loaded,
        summary.segments_after_length_filter,
        summary.train_segments,
        summary.val_segments,
        out.display()
    );
    println!(
        "segment counts: raw {}, after rare-vocabulary filter {}, after line-length filter {}",
        summary.segments_raw,
        summary.segments_after_rare_filter,
        summary.segments_after_length_filter
    );
    Ok(())
}

pub fn run_train(
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    config: &FileConfig,
    config_json: &str,
) -> Result<()> {
    let mut train_cfg: TrainConfig = config.train.to_train_config();
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;

    let mut manifest = ManifestBuilder::new("train", config_json, train_cfg.seed);
    manifest.input(data)?;

    let train_segs = read_segments_jsonl(&data.join(TRAIN_FILE))?;
    let val_segs = read_segments_jsonl(&data.join(VAL_FILE))?;
    let quantizer: QuantizerStats =
        serde_json::from_str(&std::fs::read_to_string(data.join(QUANTIZER_FILE))?)?;
    let summary: IngestSummary =
        serde_json::from_str(&std::fs::read_to_string(data.join(SUMMARY_FILE))?)?;

    let (melody_cfg, lyrics_cfg) = config.encoder.encoder_configs()?;
    let train_items: Vec<TrainItem<Real>> = train_segs
        .iter()
        .map(|s| featurize_segment(s, &quantizer))
        .collect();
    let val_items: Vec<TrainItem<Real>> = val_segs
        .iter()
        .map(|s| featurize_segment(s, &quantizer))
        .collect();
    log::info!(
        "training on {} segments, validating on {}",
        train_items.len(),
        val_items.len()
    );

    let outcome = train(&train_items, &val_items, melody_cfg, lyrics_cfg, &train_cfg)?;

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        melody_encoder: melody_cfg,
        lyrics_encoder: lyrics_cfg,
        train: train_cfg,
        data: summary.data,
        quantizer,
        hashes: VocabHashes {
            cmudict_sha256: summary.cmudict_sha256.clone(),
            stopwords_sha256: summary.stopwords_sha256.clone(),
        },
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        params: outcome.params.to_f64_vec(),
    };
    checkpoint.save(out)?;

    let log_path = {
        let mut name = out.file_stem().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        out.with_file_name(name)
    };
    let mut log_text = String::new();
    for entry in &outcome.logs {
        log_text.push_str(&serde_json::to_string(entry)?);
        log_text.push('\n');
    }
    std::fs::write(&log_path, log_text)?;
    manifest.write(out)?;

    println!(
        "trained {} epochs; best validation loss {:.6} at epoch {}; checkpoint {}",
        outcome.logs.len(),
        outcome.best_val_loss,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

/// One query: a song-shaped record whose lines need only the side being
/// queried (notes for melody queries, text for lyric queries).
#[derive(Debug, Clone, Deserialize)]
pub struct QueryLine {
    #[serde(default)]
    pub notes: Vec<NoteEvent>,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct QueryRecord {
    pub song_id: String,
    pub lines: Vec<QueryLine>,
}

fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let file =
        std::fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut queries = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        queries.push(serde_json::from_str::<QueryRecord>(&line)?);
    }
    if queries.is_empty() {
        bail!("query file {} holds no records", path.display());
    }
    Ok(queries)
}

/// Candidate payload kept beside the index for rendering and metrics.
#[derive(Debug, Clone)]
pub struct CandidatePayload {
    pub sylphones: Vec<Sylphone>,
    pub notes: Vec<NoteEvent>,
    pub line_ends: Vec<usize>,
    pub length: usize,
    pub provenance: Provenance,
}

/// Load retrieval candidates from `--db`: either a dataset directory
/// produced by `ingest` (train + validation segments) or a raw corpus JSONL
/// (requires a dictionary for phonetic processing).
pub fn load_db_segments(
    db: &Path,
    dict: Option<&PronouncingDictionary>,
    data_cfg: &DataConfig,
) -> Result<Vec<Segment>> {
    if db.is_dir() {
        let mut segments = read_segments_jsonl(&db.join(TRAIN_FILE))?;
        segments.extend(read_segments_jsonl(&db.join(VAL_FILE))?);
        mlmatch_core::corpus::sort_segments(&mut segments);
        Ok(segments)
    } else {
        let dict = dict.ok_or_else(|| {
            mlmatch_core::CoreError::Config(
                "a raw-corpus --db needs --cmudict for phonetic processing".into(),
            )
        })?;
        let stopwords = StopwordList::default();
        let songs = load_corpus(db)?;
        let mut segments: Vec<Segment> = songs
            .iter()
            .filter(|s| s.language == "en")
            .flat_map(|s| segment_song(s, data_cfg.lines_per_segment, dict, &stopwords))
            .collect();
        mlmatch_core::corpus::sort_segments(&mut segments);
        Ok(segments)
    }
}

/// Exact ranked-output line schema.
#[derive(Debug, Serialize)]
struct RankedLine<'a> {
    rank: usize,
    candidate_id: &'a str,
    cost: f64,
    raw_sdtw: f64,
    length_penalty: f64,
    path: &'a [(usize, usize)],
    provenance: Provenance,
}

/// Ranked-output line for baseline dumps: same shape plus the method tag;
/// costs are null where a method does not define them.
#[derive(Debug, Serialize)]
struct MethodRankedLine<'a> {
    rank: usize,
    candidate_id: &'a str,
    cost: Option<f64>,
    raw_sdtw: Option<f64>,
    length_penalty: Option<f64>,
    path: &'a [(usize, usize)],
    provenance: Provenance,
    method: &'a str,
}

#[allow(clippy::too_many_arguments)]
pub fn run_retrieve(
    ckpt_path: &Path,
    query_path: &Path,
    db: &Path,
    cmudict: Option<&Path>,
    alpha: Option<f64>,
    topk: usize,
    direction: Direction,
    keep_fraction: f64,
    out: &Path,
    config_json: &str,
) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt_path)?;
    let params: ParameterSet<Real> = checkpoint.parameter_set()?;
    let alpha = alpha.unwrap_or(checkpoint.train.alpha);
    let mut manifest = ManifestBuilder::new("retrieve", config_json, checkpoint.train.seed);
    manifest.input(ckpt_path)?;
    manifest.input(query_path)?;
    manifest.input(db)?;

    let dict = match cmudict {
        Some(p) => {
            manifest.input(p)?;
            let dict = parse_pronouncing_dictionary(p)?;
            let actual = crate::manifest::hash_path(p)?;
            if actual != checkpoint.hashes.cmudict_sha256 {
                log::warn!(
                    "dictionary hash {actual} differs from the checkpoint's {}",
                    checkpoint.hashes.cmudict_sha256
                );
            }
            Some(dict)
        }
        None => None,
    };

    let segments = load_db_segments(db, dict.as_ref(), &checkpoint.data)?;
    if segments.is_empty() {
        bail!("candidate database {} holds no usable segments", db.display());
    }

    let mut payloads: BTreeMap<String, CandidatePayload> = BTreeMap::new();
    let mut sources: Vec<CandidateSource<Real>> = Vec::new();
    for seg in &segments {
        let (features, line_ends, length) = match direction {
            Direction::MelodyToLyrics => (
                sylphone_feature_matrix::<Real>(&seg.sylphones),
                seg.lyrics_line_ends.clone(),
                seg.m,
            ),
            Direction::LyricsToMelody => (
                melody_feature_matrix::<Real>(&seg.notes, &checkpoint.quantizer),
                seg.melody_line_ends.clone(),
                seg.n,
            ),
        };
        payloads.insert(
            seg.segment_id.clone(),
            CandidatePayload {
                sylphones: seg.sylphones.clone(),
                notes: seg.notes.clone(),
                line_ends: line_ends.clone(),
                length,
                provenance: Provenance::Original,
            },
        );
        sources.push(CandidateSource {
            id: seg.segment_id.clone(),
            features,
            line_ends,
            provenance: Provenance::Original,
        });
    }
    let index = build_index(&params, direction.candidate_side(), sources)?;

    let queries = read_queries(query_path)?;
    let single = queries.len() == 1;
    if !single {
        std::fs::create_dir_all(out)
            .with_context(|| format!("creating output dir {}", out.display()))?;
    }

    let stopwords = StopwordList::default();
    for query in &queries {
        let (features, query_notes, query_sylphones) = match direction {
            Direction::MelodyToLyrics => {
                let notes: Vec<NoteEvent> =
                    query.lines.iter().flat_map(|l| l.notes.clone()).collect();
                if notes.is_empty() {
                    bail!("melody query {:?} has no notes", query.song_id);
                }
                (
                    melody_feature_matrix::<Real>(&notes, &checkpoint.quantizer),
                    notes,
                    Vec::new(),
                )
            }
            Direction::LyricsToMelody => {
                let dict = dict.as_ref().ok_or_else(|| {
                    mlmatch_core::CoreError::Config(
                        "lyric queries need --cmudict for phonetic processing".into(),
                    )
                })?;
                let mut sylphones = Vec::new();
                for line in &query.lines {
                    let line_syl = text_to_sylphones(&line.text, dict, &stopwords)
                        .map_err(|e| anyhow::anyhow!("query {:?}: {e}", query.song_id))?;
                    sylphones.extend(line_syl);
                }
                if sylphones.is_empty() {
                    bail!("lyric query {:?} has no sylphones", query.song_id);
                }
                (
                    sylphone_feature_matrix::<Real>(&sylphones),
                    Vec::new(),
                    sylphones,
                )
            }
        };

        let ranked = rank(
            &params,
            &features,
            direction,
            &index,
            checkpoint.train.gamma,
            alpha,
            checkpoint.train.epsilon,
            keep_fraction,
        )?;
        let top: Vec<&RankedMatch> = ranked.iter().take(topk).collect();

        let mut jsonl = String::new();
        for (i, m) in top.iter().enumerate() {
            let line = RankedLine {
                rank: i + 1,
                candidate_id: &m.candidate_id,
                cost: m.regularized_cost,
                raw_sdtw: m.raw_sdtw,
                length_penalty: m.length_penalty,
                path: &m.path.pairs,
                provenance: m.provenance,
            };
            jsonl.push_str(&serde_json::to_string(&line)?);
            jsonl.push('\n');
        }
        let target = if single {
            out.to_path_buf()
        } else {
            out.join(format!(
                "{}.ranked.jsonl",
                query.song_id.replace(['/', '\\'], "_")
            ))
        };
        if let Some(parent) = target.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(&target, jsonl)?;

        println!("query {} -> {}", query.song_id, target.display());
        for (i, m) in top.iter().enumerate() {
            let payload = &payloads[&m.candidate_id];
            println!(
                "rank {:>2}  candidate {}  cost {:.6}  raw {:.6}  penalty {:.6}",
                i + 1,
                m.candidate_id,
                m.regularized_cost,
                m.raw_sdtw,
                m.length_penalty
            );
            // The grid always reads (note, sylphone); swap the pairs when
            // the query is the lyrics side.
            let (notes, sylphones, path) = match direction {
                Direction::MelodyToLyrics => {
                    (&query_notes, &payload.sylphones, m.path.clone())
                }
                Direction::LyricsToMelody => {
                    let swapped = AlignmentPath::new(
                        m.path.pairs.iter().map(|&(i, j)| (j, i)).collect(),
                    );
                    (&payload.notes, &query_sylphones, swapped)
                }
            };
            print!("{}", alignment_grid(notes, sylphones, &path));
        }
    }

    manifest.write(out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    Mlm,
    Random,
    Length,
}

impl EvalMethod {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMethod::Mlm => "mlm",
            EvalMethod::Random => "random",
            EvalMethod::Length => "length_informed",
        }
    }
}

struct EvalCandidates {
    payloads: BTreeMap<String, CandidatePayload>,
    index: Option<CandidateIndex<Real>>,
    simple: Vec<SimpleCandidate>,
    original_count: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn run_evaluate(
    ckpt_path: Option<&Path>,
    test_path: &Path,
    cmudict: &Path,
    method: EvalMethod,
    with_plain: bool,
    lines_flag: Option<usize>,
    top_matches: usize,
    keep_fraction: f64,
    seed: u64,
    out: &Path,
    dump_ranked: Option<&Path>,
    config: &FileConfig,
    config_json: &str,
) -> Result<()> {
    let mut manifest = ManifestBuilder::new("evaluate", config_json, seed);
    manifest.input(test_path)?;
    manifest.input(cmudict)?;

    let checkpoint = match ckpt_path {
        Some(p) => {
            manifest.input(p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    if method == EvalMethod::Mlm && checkpoint.is_none() {
        return Err(
            mlmatch_core::CoreError::Config("--method mlm requires --ckpt".into()).into(),
        );
    }

    let mut data_cfg = checkpoint
        .as_ref()
        .map(|c| c.data)
        .unwrap_or_else(|| config.data.to_data_config());
    if let Some(lines) = lines_flag {
        data_cfg.lines_per_segment = lines;
    }

    let dict = parse_pronouncing_dictionary(cmudict)?;
    let stopwords = StopwordList::default();
    let songs = load_corpus(test_path)?;
    let test_segments: Vec<Segment> = songs
        .iter()
        .filter(|s| s.language == "en")
        .flat_map(|s| segment_song(s, data_cfg.lines_per_segment, &dict, &stopwords))
        .collect();
    if test_segments.len() < 2 {
        bail!(
            "test corpus produced {} segments; need at least 2",
            test_segments.len()
        );
    }

    // Candidate pool: every test lyrics side, optionally doubled with
    // plain-text distractors sampled from the test set's sylphones.
    let params = checkpoint
        .as_ref()
        .map(|c| c.parameter_set::<Real>())
        .transpose()?;
    let original_count = test_segments.len();
    let mut payloads: BTreeMap<String, CandidatePayload> = BTreeMap::new();
    let mut sources: Vec<CandidateSource<Real>> = Vec::new();
    let pool = SylphonePool::from_segments(test_segments.iter().map(|s| s.sylphones.as_slice()));
    let mut plain_rng = StdRng::seed_from_u64(seed);
    for seg in &test_segments {
        payloads.insert(
            seg.segment_id.clone(),
            CandidatePayload {
                sylphones: seg.sylphones.clone(),
                notes: seg.notes.clone(),
                line_ends: seg.lyrics_line_ends.clone(),
                length: seg.m,
                provenance: Provenance::Original,
            },
        );
        sources.push(CandidateSource {
            id: seg.segment_id.clone(),
            features: sylphone_feature_matrix::<Real>(&seg.sylphones),
            line_ends: seg.lyrics_line_ends.clone(),
            provenance: Provenance::Original,
        });
        if with_plain {
            let plain = make_plain_variant(&seg.sylphones, &pool, &mut plain_rng);
            let pid = plain_id(&seg.segment_id);
            payloads.insert(
                pid.clone(),
                CandidatePayload {
                    sylphones: plain.clone(),
                    notes: seg.notes.clone(),
                    line_ends: seg.lyrics_line_ends.clone(),
                    length: seg.m,
                    provenance: Provenance::Plain,
                },
            );
            sources.push(CandidateSource {
                id: pid,
                features: sylphone_feature_matrix::<Real>(&plain),
                line_ends: seg.lyrics_line_ends.clone(),
                provenance: Provenance::Plain,
            });
        }
    }
    let simple: Vec<SimpleCandidate> = payloads
        .iter()
        .map(|(id, p)| SimpleCandidate {
            id: id.clone(),
            length: p.length,
        })
        .collect();
    let index = match (&params, method) {
        (Some(p), EvalMethod::Mlm) => Some(build_index(p, Side::Lyrics, sources)?),
        _ => None,
    };
    let candidates = EvalCandidates {
        payloads,
        index,
        simple,
        original_count,
    };

    if let Some(dir) = dump_ranked {
        std::fs::create_dir_all(dir)?;
    }

    let mut pools: Vec<RankedPool> = Vec::new();
    let mut query_metrics: Vec<QueryMetrics> = Vec::new();
    let mut eval_rng = StdRng::seed_from_u64(seed ^ 0x5eed);
    for seg in &test_segments {
        // Ranked list of (id, path) for this query's melody.
        let ranked: Vec<(String, AlignmentPath)> = match method {
            EvalMethod::Mlm => {
                let ckpt = checkpoint.as_ref().unwrap();
                let query = melody_feature_matrix::<Real>(&seg.notes, &ckpt.quantizer);
                rank(
                    params.as_ref().unwrap(),
                    &query,
                    Direction::MelodyToLyrics,
                    candidates.index.as_ref().unwrap(),
                    ckpt.train.gamma,
                    ckpt.train.alpha,
                    ckpt.train.epsilon,
                    keep_fraction,
                )?
                .into_iter()
                .map(|m| (m.candidate_id, m.path))
                .collect()
            }
            EvalMethod::Random => random_rank(seg.n, &candidates.simple, &mut eval_rng)
                .into_iter()
                .map(|r: BaselineResult| (r.candidate_id, r.path))
                .collect(),
            EvalMethod::Length => length_informed_rank(seg.n, &candidates.simple)
                .into_iter()
                .map(|r| (r.candidate_id, r.path))
                .collect(),
        };

        if let Some(dir) = dump_ranked {
            let mut jsonl = String::new();
            for (i, (id, path)) in ranked.iter().enumerate() {
                let provenance = candidates.payloads[id].provenance;
                let line = MethodRankedLine {
                    rank: i + 1,
                    candidate_id: id,
                    cost: None,
                    raw_sdtw: None,
                    length_penalty: None,
                    path: &path.pairs,
                    provenance,
                    method: method.name(),
                };
                jsonl.push_str(&serde_json::to_string(&line)?);
                jsonl.push('\n');
            }
            std::fs::write(
                dir.join(format!(
                    "{}.ranked.jsonl",
                    seg.segment_id.replace(['/', '\\', ':'], "_")
                )),
                jsonl,
            )?;
        }

        pools.push(RankedPool {
            ranked_ids: ranked.iter().map(|(id, _)| id.clone()).collect(),
            original_count: candidates.original_count,
            reference_id: seg.segment_id.clone(),
        });

        // Alignment quality over the top matches.
        let reference_endings =
            LineEndings::from_lyrics(&seg.sylphones, &seg.lyrics_line_ends);
        let mut smr_lv = KahanMean::default();
        let mut smr_st = KahanMean::default();
        let mut smr_ns = KahanMean::default();
        let mut rden = KahanMean::default();
        let mut rstr = KahanMean::default();
        let mut rdis = KahanMean::default();
        let mut femn = KahanMean::default();
        let mut fems = KahanMean::default();
        for (id, path) in ranked.iter().take(top_matches) {
            let payload = &candidates.payloads[id];
            if let Some(smr) =
                stress_matching_rate_parts(&seg.notes, &payload.sylphones, path)
            {
                smr_lv.add(smr.longvowel);
                smr_st.add(smr.stress);
                smr_ns.add(smr.nonstop);
            }
            let endings = LineEndings::from_lyrics(&payload.sylphones, &payload.line_ends);
            rden.add(rhyme_density(&endings));
            if let Some(rs) = rhyme_strength(&endings) {
                rstr.add(rs);
            }
            rdis.add(rhyme_distance(&reference_endings, &endings)?);
            let (fem_notes, fem_sylphones) = fem_of_path(path);
            femn.add(fem_notes as f64);
            fems.add(fem_sylphones as f64);
        }
        query_metrics.push(QueryMetrics {
            id: seg.segment_id.clone(),
            smr: match (smr_lv.mean(), smr_st.mean(), smr_ns.mean()) {
                (Some(lv), Some(st), Some(ns)) => Some(SmrValues {
                    longvowel: lv,
                    stress: st,
                    nonstop: ns,
                }),
                _ => None,
            },
            rhyme_density: rden.mean().unwrap_or(0.0),
            rhyme_strength: rstr.mean(),
            rhyme_distance: rdis.mean().unwrap_or(0.0),
            fem_notes: femn.mean().unwrap_or(f64::NAN),
            fem_sylphones: fems.mean().unwrap_or(f64::NAN),
        });
    }

    let hits = (
        hit_at_k(&pools, 1.0)?,
        hit_at_k(&pools, 3.0)?,
        hit_at_k(&pools, 5.0)?,
    );
    let pool_size = candidates.payloads.len();
    let report = MetricsReport::aggregate(
        method.name(),
        hits,
        pool_size,
        candidates.original_count,
        &query_metrics,
    );
    std::fs::write(out, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing report {}", out.display()))?;
    manifest.write(out)?;

    println!(
        "evaluated {} queries against {} candidates ({} original): \
         Hit@1% {:.4}, Hit@3% {:.4}, Hit@5% {:.4} -> {}",
        report.queries,
        report.pool_size,
        report.original_pool_size,
        report.hit_at_1_percent,
        report.hit_at_3_percent,
        report.hit_at_5_percent,
        out.display()
    );
    let mut stdout = std::io::stdout();
    stdout.flush().ok();
    Ok(())
}
