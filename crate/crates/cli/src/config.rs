//! Run configuration: one JSON document that pins an entire run, archived
//! next to the artifacts it produced. Precedence is flags > file > defaults.

use std::path::{Path, PathBuf};

use cauesc_core::model::ModelConfig;
use cauesc_core::optim::OptimConfig;
use cauesc_core::sample::DecodeConfig;
use cauesc_core::train::TrainConfig;
use cauesc_core::{Error, Result};
use serde::{Deserialize, Serialize};

// Default artifact names under the output directory.
pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EFFECTS_FILE: &str = "effects.cesc";
pub const CHECKPOINT_FILE: &str = "model.cesc";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const GENERATION_FILE: &str = "generation.json";
pub const DISTRIBUTION_FILE: &str = "strategy_distribution.csv";
pub const PROGRESS_FILE: &str = "strategy_progress.csv";
pub const AB_FILE: &str = "ab_summary.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dialogue corpus: a JSON array of conversations.
    pub corpus: Option<PathBuf>,
    /// Cause annotations (JSON lines). Input override for train/eval, and
    /// an optional externally produced file to ingest for annotate.
    pub annotations: Option<PathBuf>,
    /// Cached effect bundles.
    pub effects: Option<PathBuf>,
    /// Model checkpoint (read by eval/generate, written by train).
    pub checkpoint: Option<PathBuf>,
    /// Output directory for all artifacts.
    pub out: Option<PathBuf>,
    /// Extra cause cue words, one per line.
    pub lexicon: Option<PathBuf>,
    /// A/B vote file (CSV: item_id,rater_id,choice) for analyze.
    pub votes: Option<PathBuf>,
    /// Master seed; the split, parameter initialization, batch shuffling,
    /// and sampling seeds all derive from it.
    pub seed: u64,
    /// train/dev/test shares; must be positive and sum to 1.
    pub split_ratios: (f64, f64, f64),
    /// Minimum token count for vocabulary inclusion.
    pub vocab_min_count: usize,
    /// Number of conversation-progress intervals for analyze.
    pub progress_intervals: usize,
    pub model: ModelConfig,
    pub optimizer: OptimConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            corpus: None,
            annotations: None,
            effects: None,
            checkpoint: None,
            out: None,
            lexicon: None,
            votes: None,
            seed: 0,
            split_ratios: (0.8, 0.1, 0.1),
            vocab_min_count: 1,
            progress_intervals: 6,
            model: ModelConfig::default(),
            optimizer: OptimConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| io_with_path(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("config {}: {e}", path.display())))
    }

    /// One seed pins the whole run: broadcast it to every component that
    /// consumes randomness.
    pub fn derive_seeds(&mut self) {
        self.model.seed = self.seed;
        self.train.shuffle_seed = self.seed;
        self.decode.seed = self.seed;
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Usage("an output directory is required (--out)".into()))
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| Error::Usage("a corpus file is required (--corpus)".into()))
    }

    /// Annotations to read: the explicit path or the default artifact.
    pub fn annotations_path(&self) -> Result<PathBuf> {
        match &self.annotations {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(ANNOTATIONS_FILE)),
        }
    }

    pub fn effects_path(&self) -> Result<PathBuf> {
        match &self.effects {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(EFFECTS_FILE)),
        }
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf> {
        match &self.checkpoint {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join(CHECKPOINT_FILE)),
        }
    }

    /// Create the output directory and archive this config inside it.
    pub fn archive(&self) -> Result<()> {
        let out = self.out_dir()?;
        std::fs::create_dir_all(out).map_err(|e| io_with_path(out, e))?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let path = out.join(CONFIG_FILE);
        std::fs::write(&path, text).map_err(|e| io_with_path(&path, e))?;
        Ok(())
    }
}

/// Attach the offending path to a bare io error.
pub fn io_with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}

/// Wrap the io errors of a fallible load with the path they concern.
pub fn with_path<T>(path: &Path, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Io(io) => io_with_path(path, io),
        other => other,
    })
}

/// Parse "a,b,c" into split ratios.
pub fn parse_ratios(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!(
            "expected three comma-separated split ratios, got '{text}'"
        )));
    }
    let mut vals = [0.0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|e| Error::Usage(format!("bad split ratio '{p}': {e}")))?;
    }
    Ok((vals[0], vals[1], vals[2]))
}

/// One line of structured progress on stderr.
pub fn log(value: serde_json::Value) {
    eprintln!("{value}");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let rc = RunConfig::default();
        let text = serde_json::to_string(&rc).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.split_ratios, rc.split_ratios);
        assert_eq!(back.seed, rc.seed);
        assert_eq!(back.model, rc.model);
    }

    #[test]
    fn partial_file_fills_from_defaults() {
        let rc: RunConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(rc.seed, 9);
        assert_eq!(rc.split_ratios, (0.8, 0.1, 0.1));
        assert_eq!(rc.train.steps, 500);
    }

    #[test]
    fn derive_seeds_broadcasts_the_master_seed() {
        let mut rc = RunConfig::default();
        rc.seed = 42;
        rc.derive_seeds();
        assert_eq!(rc.model.seed, 42);
        assert_eq!(rc.train.shuffle_seed, 42);
        assert_eq!(rc.decode.seed, 42);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratios("0.8,0.1,0.1").unwrap(), (0.8, 0.1, 0.1));
        assert_eq!(parse_ratios(" 0.5, 0.25,0.25 ").unwrap(), (0.5, 0.25, 0.25));
        assert!(matches!(parse_ratios("0.8,0.2"), Err(Error::Usage(_))));
        assert!(matches!(parse_ratios("a,b,c"), Err(Error::Usage(_))));
    }

    #[test]
    fn missing_paths_are_usage_errors() {
        let rc = RunConfig::default();
        assert!(matches!(rc.out_dir(), Err(Error::Usage(_))));
        assert!(matches!(rc.corpus_path(), Err(Error::Usage(_))));
    }
}
