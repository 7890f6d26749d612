//! Command implementations behind the `granenc` binary: train, predict,
//! evaluate, gradcheck and synthetic-corpus generation.
//!
//! Configuration is a flat `key = value` text file; unknown keys are
//! rejected. `GRANENC_SEED` overrides the configured seed. Exit codes:
//! 0 success, 2 configuration error, 3 data error, 4 checkpoint/config
//! mismatch, 5 prediction coverage error, 1 anything else.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{load_checkpoint, restore_params, CheckpointError};
use crate::datasets::{parse_snips, parse_squad, DataError, MrcExample, SluExample, SnipsSplit};
use crate::evaluation::{evaluate_squad, EvalError};
use crate::model::JointModel;
use crate::mrc_head::InjectScope;
use crate::training::gradcheck::{run_check, CheckModule};
use crate::training::{
    build_vocabularies, predict_mrc_answers, run_training, TrainConfig, TrainError,
};

/// Every recognized configuration key, with its documentation line.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("alpha", "weight of the intent+slot loss terms (float >= 0, default 0.5)"),
    ("epochs", "training epochs over the MRC stream (int >= 1, default 11)"),
    ("lr", "SGD learning rate (float > 0, default 0.001)"),
    ("batch_size_mrc", "MRC mini-batch size (int >= 1, default 32)"),
    ("batch_size_slu", "SLU mini-batch size (int >= 1, default 32)"),
    ("seed", "RNG seed (u64, default 42; GRANENC_SEED overrides)"),
    ("h", "LSTM hidden units everywhere (int >= 1, default 256)"),
    ("d_word", "word embedding width (int >= 1, default 512)"),
    ("d_char", "character embedding width (int >= 1, default 16)"),
    ("char_filters", "character CNN filter count (int >= 1, default 100)"),
    ("kernel_width", "character CNN kernel width (int >= 1, default 5)"),
    ("d_attn", "self-attention width; 0 disables the branch (default 256)"),
    ("d_ctx", "contextual feature width; 0 disables (default 0)"),
    ("inject_scope", "disabled | question | both (default both)"),
    ("null_threshold", "no-answer decision margin (float, default 0.0)"),
    ("max_answer_len", "span length cap at decode time (int >= 1, default 30)"),
    ("detach_injection", "true to stop gradients through injected states (default false)"),
    ("max_passage_len", "passage token cap (int >= 1, default 400)"),
    ("min_count", "vocabulary frequency threshold (int >= 1, default 1)"),
    ("grad_clip", "global gradient-norm clip (float > 0, default 5.0)"),
    ("warm_start_slu", "SLU-only steps before alternating (int, default 0)"),
    ("glove", "optional path to a text embedding file"),
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("config key \"{key}\": cannot parse {value:?} ({expected})")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey(_) | CliError::BadValue { .. } | CliError::BadConfig(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(TrainError::Data(_)) => 3,
            CliError::Checkpoint(CheckpointError::DimMismatch { .. })
            | CliError::Checkpoint(CheckpointError::Precision { .. })
            | CliError::Checkpoint(CheckpointError::MissingTensor(_)) => 4,
            CliError::Eval(EvalError::MissingQids { .. }) => 5,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Parses flat `key = value` config text over [`TrainConfig::default`].
pub fn parse_config(text: &str) -> Result<TrainConfig, CliError> {
    let mut config = TrainConfig::default();
    for raw in text.lines() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::BadConfig(format!("expected key=value, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        set_key(&mut config, key, value)?;
    }
    config.validate().map_err(CliError::BadConfig)?;
    Ok(config)
}

fn set_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<(), CliError> {
    macro_rules! parse {
        ($ty:ty, $expected:expr) => {
            value.parse::<$ty>().map_err(|_| CliError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected: $expected,
            })?
        };
    }
    match key {
        "alpha" => config.alpha = parse!(f64, "float"),
        "epochs" => config.epochs = parse!(usize, "integer"),
        "lr" => config.lr = parse!(f64, "float"),
        "batch_size_mrc" => config.batch_size_mrc = parse!(usize, "integer"),
        "batch_size_slu" => config.batch_size_slu = parse!(usize, "integer"),
        "seed" => config.seed = parse!(u64, "integer"),
        "h" => config.h = parse!(usize, "integer"),
        "d_word" => config.d_word = parse!(usize, "integer"),
        "d_char" => config.d_char = parse!(usize, "integer"),
        "char_filters" => config.char_filters = parse!(usize, "integer"),
        "kernel_width" => config.kernel_width = parse!(usize, "integer"),
        "d_attn" => config.d_attn = parse!(usize, "integer"),
        "d_ctx" => config.d_ctx = parse!(usize, "integer"),
        "inject_scope" => {
            config.inject_scope = InjectScope::parse(value).ok_or(CliError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected: "disabled | question | both",
            })?
        }
        "null_threshold" => config.null_threshold = parse!(f64, "float"),
        "max_answer_len" => config.max_answer_len = parse!(usize, "integer"),
        "detach_injection" => config.detach_injection = parse!(bool, "true | false"),
        "max_passage_len" => config.max_passage_len = parse!(usize, "integer"),
        "min_count" => config.min_count = parse!(usize, "integer"),
        "grad_clip" => config.grad_clip = parse!(f64, "float"),
        "warm_start_slu" => config.warm_start_slu = parse!(usize, "integer"),
        "glove" => config.glove = Some(PathBuf::from(value)),
        other => return Err(CliError::UnknownKey(other.to_string())),
    }
    Ok(())
}

/// Loads a config file (missing path = defaults) and applies the
/// `GRANENC_SEED` override.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            parse_config(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Ok(seed) = std::env::var("GRANENC_SEED") {
        config.seed = seed.parse::<u64>().map_err(|_| CliError::BadValue {
            key: "GRANENC_SEED".into(),
            value: seed,
            expected: "integer",
        })?;
    }
    Ok(config)
}

/// Reproducibility record written before training starts.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub code_hash: String,
    pub seed: u64,
    pub squad_path: String,
    pub snips_path: String,
    pub out_dir: String,
    pub config: TrainConfig,
}

/// 40-hex-character content hash of the crate version string.
pub fn code_hash() -> String {
    let version = format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let digest = Sha256::digest(version.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..40].to_string()
}

fn load_squad_dir(
    squad: &Path,
    cap: usize,
) -> Result<(Vec<MrcExample>, Option<Vec<MrcExample>>), CliError> {
    if squad.is_file() {
        let (train, _) = parse_squad(squad, cap)?;
        return Ok((train, None));
    }
    let train_path = squad.join("train-v2.0.json");
    let (train, stats) = parse_squad(&train_path, cap)?;
    if stats.dropped_unalignable > 0 {
        eprintln!(
            "note: dropped {} of {} questions with unalignable answer spans",
            stats.dropped_unalignable, stats.total_qas
        );
    }
    let dev_path = squad.join("dev-v2.0.json");
    let dev = if dev_path.exists() { Some(parse_squad(&dev_path, cap)?.0) } else { None };
    Ok((train, dev))
}

fn load_snips_dir(snips: &Path) -> Result<(Vec<SluExample>, Option<Vec<SluExample>>), CliError> {
    let train = parse_snips(snips, SnipsSplit::Train)?;
    let valid = if snips.join("valid").exists() {
        Some(parse_snips(snips, SnipsSplit::Valid)?)
    } else {
        None
    };
    Ok((train, valid))
}

/// `train`: parse corpora, write the manifest, run the alternating loop.
pub fn cmd_train(
    config_path: Option<&Path>,
    squad: &Path,
    snips: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let config = load_config(config_path)?;
    let (mrc_train, mrc_dev) = load_squad_dir(squad, config.max_passage_len)?;
    let (slu_train, slu_dev) = load_snips_dir(snips)?;

    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let manifest = RunManifest {
        version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        code_hash: code_hash(),
        seed: config.seed,
        squad_path: squad.display().to_string(),
        snips_path: snips.display().to_string(),
        out_dir: out.display().to_string(),
        config: config.clone(),
    };
    let manifest_path = out.join("manifest.json");
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest encode") + "\n",
    )
    .map_err(io_err(&manifest_path))?;

    let (word_vocab, char_vocab, intents, slots) =
        build_vocabularies(&mrc_train, &slu_train, config.min_count).map_err(TrainError::Data)?;
    let pretrained = match &config.glove {
        Some(path) => {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
            let (table, hits) =
                crate::embedding::load_glove::<f32>(path, &word_vocab, config.d_word, &mut rng)
                    .map_err(|e| CliError::BadConfig(e.to_string()))?;
            eprintln!("loaded {hits} pretrained vectors");
            Some(table)
        }
        None => None,
    };
    let mut model =
        JointModel::<f32>::new(&config, word_vocab, char_vocab, intents, slots, pretrained);
    let summary = run_training(
        &mut model,
        &config,
        out,
        &mrc_train,
        &slu_train,
        mrc_dev.as_deref(),
        slu_dev.as_deref(),
    )?;
    println!(
        "trained {} epochs, {} steps; last checkpoint {}",
        config.epochs,
        summary.steps.len(),
        summary.last_checkpoint().map(|p| p.display().to_string()).unwrap_or_default()
    );
    Ok(())
}

/// `predict`: rebuild the model from a checkpoint and write the
/// qid -> answer JSON for every question in the file.
pub fn cmd_predict(checkpoint: &Path, squad_dev: &Path, out: &Path) -> Result<(), CliError> {
    let (meta, tensors) = load_checkpoint::<f32>(checkpoint)?;
    let config = meta.config.clone();
    let mut model = JointModel::<f32>::new(
        &config,
        meta.word_vocab,
        meta.char_vocab,
        meta.intents,
        meta.slots,
        None,
    );
    restore_params(&mut model.store, &tensors)?;
    let questions = crate::datasets::parse_squad_questions(squad_dev, config.max_passage_len)?;
    let answers: BTreeMap<String, String> =
        predict_mrc_answers(&model, &questions, &config)?.into_iter().collect();
    let json = serde_json::to_string_pretty(&answers).expect("prediction encode") + "\n";
    std::fs::write(out, json).map_err(io_err(out))?;
    println!("wrote {} predictions to {}", answers.len(), out.display());
    Ok(())
}

/// `evaluate`: score a prediction file against a gold SQuAD file and print
/// the report as JSON.
pub fn cmd_evaluate(pred: &Path, gold: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(pred).map_err(io_err(pred))?;
    let predictions: std::collections::HashMap<String, String> = serde_json::from_str(&text)
        .map_err(|e| {
            CliError::Data(DataError::Schema {
                at: pred.display().to_string(),
                message: format!("prediction file: {e}"),
            })
        })?;
    let (examples, _) = parse_squad(gold, usize::MAX)?;
    let report = evaluate_squad(&predictions, &examples)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report encode"));
    Ok(())
}

/// `gradcheck`: verify analytic gradients against central differences.
pub fn cmd_gradcheck(module: Option<&str>, seed: u64) -> Result<bool, CliError> {
    let modules: Vec<CheckModule> = match module {
        Some(name) => {
            vec![CheckModule::parse(name).ok_or_else(|| CliError::BadValue {
                key: "module".into(),
                value: name.to_string(),
                expected: "one of the gradcheck module names",
            })?]
        }
        None => CheckModule::ALL.to_vec(),
    };
    let mut all_pass = true;
    for m in modules {
        let report = run_check(m, seed, None);
        for e in &report.entries {
            println!(
                "{:<18} {:<24} max rel err {:10.3e}  {}",
                report.module,
                e.name,
                e.max_rel_err,
                if e.pass() { "ok" } else { "FAIL" }
            );
        }
        println!("{:<18} {}", report.module, if report.pass { "PASS" } else { "FAIL" });
        all_pass &= report.pass;
    }
    Ok(all_pass)
}

/// `synth`: write rule-based toy corpora in the real on-disk formats.
pub fn cmd_synth(out: &Path, n_mrc: usize, n_slu: usize, seed: u64) -> Result<(), CliError> {
    let squad_dir = out.join("squad");
    let snips_dir = out.join("snips");
    std::fs::create_dir_all(&squad_dir).map_err(io_err(&squad_dir))?;
    let train = crate::synth::synthetic_mrc(n_mrc, seed);
    let dev = crate::synth::synthetic_mrc((n_mrc / 4).max(4), seed.wrapping_add(7));
    write_squad_json(&squad_dir.join("train-v2.0.json"), &train)?;
    write_squad_json(&squad_dir.join("dev-v2.0.json"), &dev)?;
    crate::datasets::write_snips_split(
        &snips_dir,
        SnipsSplit::Train,
        &crate::synth::synthetic_slu(n_slu, seed),
    )?;
    crate::datasets::write_snips_split(
        &snips_dir,
        SnipsSplit::Valid,
        &crate::synth::synthetic_slu((n_slu / 4).max(4), seed.wrapping_add(13)),
    )?;
    println!("wrote toy corpora under {}", out.display());
    Ok(())
}

/// Serializes examples into the standard SQuAD 2.0 JSON layout. Contexts are
/// space-joined tokens, so `answer_start` offsets align exactly.
pub fn write_squad_json(path: &Path, examples: &[MrcExample]) -> Result<(), CliError> {
    use serde_json::json;
    let qas: Vec<serde_json::Value> = examples
        .iter()
        .map(|ex| {
            let answers: Vec<serde_json::Value> = match (ex.answer_start_token, ex.answer_end_token)
            {
                (Some(s), Some(_)) => {
                    let offset: usize =
                        ex.passage_tokens[..s].iter().map(|t| t.chars().count() + 1).sum();
                    vec![json!({ "text": ex.raw_answer_text, "answer_start": offset })]
                }
                _ => vec![],
            };
            json!({
                "id": ex.qid,
                "question": ex.question_tokens.join(" "),
                "is_impossible": ex.is_impossible,
                "answers": answers,
            })
        })
        .collect();
    // one paragraph per example keeps contexts independent
    let paragraphs: Vec<serde_json::Value> = examples
        .iter()
        .zip(qas)
        .map(|(ex, qa)| json!({ "context": ex.raw_context, "qas": [qa] }))
        .collect();
    let root = json!({ "version": "v2.0", "data": [{ "title": "synthetic", "paragraphs": paragraphs }] });
    std::fs::write(path, serde_json::to_string(&root).expect("squad encode"))
        .map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_unknown_key() {
        let cfg = parse_config("alpha = 0.25\nepochs=2\ninject_scope = question\n").unwrap();
        assert_eq!(cfg.alpha, 0.25);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.inject_scope, InjectScope::Question);

        let err = parse_config("aplha = 0.5\n").unwrap_err();
        assert!(matches!(&err, CliError::UnknownKey(k) if k == "aplha"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_bad_value_names_key() {
        let err = parse_config("epochs = soon\n").unwrap_err();
        assert!(matches!(&err, CliError::BadValue { key, .. } if key == "epochs"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn config_comments_and_blank_lines() {
        let cfg = parse_config("# a comment\n\nlr = 0.5 # inline\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn config_keys_list_is_exhaustive() {
        // every documented key parses; every parsed key is documented
        let mut config = TrainConfig::default();
        for (key, _) in CONFIG_KEYS {
            let value = match *key {
                "inject_scope" => "both",
                "detach_injection" => "false",
                "glove" => "/tmp/vectors.txt",
                _ => "1",
            };
            set_key(&mut config, key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
        assert!(matches!(
            set_key(&mut config, "not_a_key", "1"),
            Err(CliError::UnknownKey(_))
        ));
    }

    #[test]
    fn synth_squad_roundtrips_through_parser() {
        let tmp = tempfile::tempdir().unwrap();
        let examples = crate::synth::synthetic_mrc(12, 3);
        let path = tmp.path().join("train.json");
        write_squad_json(&path, &examples).unwrap();
        let (parsed, stats) = parse_squad(&path, 400).unwrap();
        assert_eq!(stats.dropped_unalignable, 0);
        assert_eq!(parsed.len(), examples.len());
        for (a, b) in parsed.iter().zip(&examples) {
            assert_eq!(a.qid, b.qid);
            assert_eq!(a.passage_tokens, b.passage_tokens);
            assert_eq!(a.answer_start_token, b.answer_start_token);
            assert_eq!(a.answer_end_token, b.answer_end_token);
            assert_eq!(a.is_impossible, b.is_impossible);
        }
    }

    #[test]
    fn code_hash_is_git_shaped() {
        let h = code_hash();
        assert_eq!(h.len(), 40);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    }
}
