//! Subcommand implementations and the run configuration they share.
//!
//! Each `cmd_*` function takes fully resolved settings, writes its artifacts
//! plus a `*.config.json` snapshot of those settings, and stamps the snapshot
//! hash into every JSON report it produces.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audio::{
    read_annotations, read_corpus_manifest, read_wav, resolve_relative, write_annotations,
    write_corpus_manifest, write_wav, AnnotatedClip, Consonant, CorpusEntry,
};
use crate::augment::{augment_corpus, DistortionFamily, GateTable, SeedToken};
use crate::baseline::{
    asr_snr90, bias_variance, cv_word, BaselineResult, BiasVariance, Lexicon, MockAsr, MockShape,
};
use crate::cnn::{
    evaluate, load_checkpoint, save_checkpoint, train, write_training_log, CnnArchitecture,
    DataSplit, LabeledFeatures, Residual, TrainConfig,
};
use crate::error::{Error, Result};
use crate::features::{extract_features, read_feature_cache, write_feature_cache};
use crate::jsonl::{read_json, read_jsonl, write_json, write_jsonl};
use crate::noise::{
    estimate_ltass, measured_snr_db, mix_at_snr, synth_noise, LtassProfile, SnrLadder,
    DEFAULT_LTASS_BINS,
};
use crate::psychometrics::{cohort, derive_seed, measure_snr90, ResponseCurve, SimulatedListener};
use crate::synthetic::{generate_class, SyntheticConfig};

// ---------------------------------------------------------------------------
// Configuration file
// ---------------------------------------------------------------------------

/// Contents of a `--config` file (TOML or JSON). Every field is optional and
/// command-line flags take precedence. Relative paths are taken from the
/// working directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: Option<u64>,
    pub ladder_db: Option<Vec<f64>>,
    #[serde(default)]
    pub paths: PathsConfig,
    pub families: Option<Vec<DistortionFamily>>,
    pub noise_duration_s: Option<f64>,
    #[serde(default)]
    pub train: TrainDefaults,
    /// Per-consonant overrides of the published hyper-parameters.
    #[serde(default)]
    pub models: BTreeMap<Consonant, ModelConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Root for every default artifact location.
    pub work_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub gates: Option<PathBuf>,
    pub listeners: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub noise: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDefaults {
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub dev_fraction: Option<f64>,
    pub test_fraction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_conv: Option<usize>,
    pub kernel_widths: Option<Vec<usize>>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dropout_p: Option<f64>,
}

impl PipelineConfig {
    /// Parse a `.toml` file, or JSON for any other extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: String| Error::Config(format!("{}: {e}", path.display()));
        let value: Value = if path.extension().is_some_and(|e| e == "toml") {
            let table: toml::Value = toml::from_str(&text).map_err(|e| bad(e.to_string()))?;
            serde_json::to_value(table).map_err(|e| bad(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?
        };
        serde_json::from_value(value).map_err(|e| bad(e.to_string()))
    }

    /// `rel` under the work directory.
    pub fn in_work_dir(&self, rel: impl AsRef<Path>) -> PathBuf {
        match &self.paths.work_dir {
            Some(dir) => dir.join(rel),
            None => rel.as_ref().to_path_buf(),
        }
    }

    pub fn ladder(&self) -> Result<SnrLadder> {
        match &self.ladder_db {
            Some(levels) => SnrLadder::new(levels.clone()),
            None => Ok(SnrLadder::default()),
        }
    }

    pub fn corpus(&self) -> PathBuf {
        self.paths
            .corpus
            .clone()
            .unwrap_or_else(|| self.in_work_dir("corpus/manifest.jsonl"))
    }

    pub fn annotations(&self) -> PathBuf {
        self.paths
            .annotations
            .clone()
            .unwrap_or_else(|| self.in_work_dir("corpus/annotations.json"))
    }

    pub fn gates(&self) -> PathBuf {
        self.paths
            .gates
            .clone()
            .unwrap_or_else(|| self.in_work_dir("gates.json"))
    }

    pub fn profile(&self) -> PathBuf {
        self.paths
            .profile
            .clone()
            .unwrap_or_else(|| self.in_work_dir("ltass.json"))
    }

    pub fn noise(&self) -> PathBuf {
        self.paths
            .noise
            .clone()
            .unwrap_or_else(|| self.in_work_dir("noise.wav"))
    }

    pub fn model_dir(&self, consonant: Consonant) -> PathBuf {
        self.in_work_dir(format!("models/{consonant}"))
    }
}

// ---------------------------------------------------------------------------
// Provenance
// ---------------------------------------------------------------------------

/// The resolved settings of one run and their SHA-256 hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub command: &'static str,
    pub config_hash: String,
    snapshot: Value,
}

impl Provenance {
    pub fn new(command: &'static str, settings: &impl Serialize) -> Result<Self> {
        let settings =
            serde_json::to_value(settings).map_err(|e| Error::json("resolved config", e))?;
        let snapshot = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "settings": settings,
        });
        let digest = Sha256::digest(snapshot.to_string().as_bytes());
        Ok(Self {
            command,
            config_hash: format!("{digest:x}"),
            snapshot,
        })
    }

    pub fn snapshot(&self) -> Value {
        let mut v = self.snapshot.clone();
        v["config_hash"] = json!(self.config_hash);
        v
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        write_json(path, &self.snapshot())
    }

    /// Snapshot location for a run writing into `dir`.
    pub fn write_into_dir(&self, dir: &Path) -> Result<()> {
        self.write_snapshot(&dir.join(format!("{}.config.json", self.command)))
    }

    /// Snapshot location for a run writing the single file `output`.
    pub fn write_beside(&self, output: &Path) -> Result<()> {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".config.json");
        self.write_snapshot(&output.with_file_name(name))
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

/// Fail early, naming the path, if an input is missing.
pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found"),
        ))
    }
}

fn with_hash(report: &impl Serialize, prov: &Provenance) -> Result<Value> {
    let mut v = serde_json::to_value(report).map_err(|e| Error::json("report", e))?;
    v["config_hash"] = json!(prov.config_hash);
    Ok(v)
}

fn write_report(path: &Path, report: &impl Serialize, prov: &Provenance) -> Result<()> {
    ensure_parent(path)?;
    write_json(path, &with_hash(report, prov)?)
}

// ---------------------------------------------------------------------------
// Noise commands
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtassSettings {
    pub corpus: Option<PathBuf>,
    pub wavs: Vec<PathBuf>,
    pub fft_bins: usize,
    pub out: PathBuf,
}

pub fn cmd_ltass(s: &LtassSettings) -> Result<LtassProfile> {
    let prov = Provenance::new("ltass", s)?;
    let mut clips = Vec::new();
    if let Some(corpus) = &s.corpus {
        require_file(corpus)?;
        for row in read_corpus_manifest(corpus)? {
            clips.push(read_wav(&resolve_relative(corpus, &row.path))?);
        }
    }
    for path in &s.wavs {
        clips.push(read_wav(path)?);
    }
    let profile = estimate_ltass(&clips, s.fft_bins)?;
    write_report(&s.out, &profile, &prov)?;
    prov.write_beside(&s.out)?;
    Ok(profile)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthnoiseSettings {
    /// `None` synthesizes white noise.
    pub profile: Option<PathBuf>,
    pub duration_s: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_synthnoise(s: &SynthnoiseSettings) -> Result<()> {
    let prov = Provenance::new("synthnoise", s)?;
    let profile = match &s.profile {
        Some(path) => {
            require_file(path)?;
            LtassProfile::load(path)?
        }
        None => LtassProfile::flat(DEFAULT_LTASS_BINS),
    };
    let noise = synth_noise(&profile, s.duration_s, s.seed)?;
    ensure_parent(&s.out)?;
    write_wav(&noise, &s.out)?;
    prov.write_beside(&s.out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSettings {
    pub speech: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
    /// Level-measurement interval in seconds.
    pub interval: Option<(f64, f64)>,
    /// Take the interval from the speech token's annotation instead.
    pub annotations: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixReport {
    pub target_snr_db: f64,
    /// Re-measured on the written file.
    pub measured_snr_db: f64,
    pub interval: Option<(f64, f64)>,
}

pub fn cmd_mix(s: &MixSettings) -> Result<MixReport> {
    let prov = Provenance::new("mix", s)?;
    require_file(&s.speech)?;
    require_file(&s.noise)?;
    let speech = read_wav(&s.speech)?;
    let noise = read_wav(&s.noise)?;
    let interval = match (&s.annotations, s.interval) {
        (Some(path), _) => {
            require_file(path)?;
            let annotations = read_annotations(path)?;
            let ann = annotations
                .get(speech.id())
                .ok_or_else(|| Error::MissingAnnotation(speech.id().to_string()))?;
            Some(ann.interval())
        }
        (None, interval) => interval,
    };
    let mixture = mix_at_snr(&speech, &noise, s.snr_db, interval)?;
    ensure_parent(&s.out)?;
    write_wav(&mixture, &s.out)?;
    let written = read_wav(&s.out)?;
    let report = MixReport {
        target_snr_db: s.snr_db,
        measured_snr_db: measured_snr_db(&speech, &written, interval)?,
        interval,
    };
    prov.write_beside(&s.out)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Listening tests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseSettings {
    pub listeners: PathBuf,
    pub tokens: Vec<String>,
    pub ladder_db: Vec<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSnr90 {
    pub token_id: String,
    /// `None` when the averaged curve never reaches 0.90.
    pub snr90_db: Option<f64>,
    pub floor: bool,
    pub curve: Option<ResponseCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaircaseReport {
    pub ladder_db: Vec<f64>,
    pub n_listeners: usize,
    pub tokens: Vec<TokenSnr90>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ListenerFile {
    List(Vec<SimulatedListener>),
    Cohort { template: Value, count: usize },
}

/// Listener file: a JSON array of listeners, or `{"template": {...}, "count": n}`.
/// Listener seeds are derived from the master seed and the subject id.
pub fn load_listeners(path: &Path, master_seed: u64) -> Result<Vec<SimulatedListener>> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::InsufficientData(format!(
            "listener file {} is empty",
            path.display()
        )));
    }
    let parsed: ListenerFile =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let listeners = match parsed {
        ListenerFile::List(list) => list
            .into_iter()
            .map(|l| SimulatedListener {
                seed: derive_seed(master_seed, &l.subject_id, "listener"),
                ..l
            })
            .collect(),
        ListenerFile::Cohort {
            mut template,
            count,
        } => {
            if let Value::Object(map) = &mut template {
                map.entry("subject_id").or_insert_with(|| json!("template"));
            }
            let template: SimulatedListener = serde_json::from_value(template)
                .map_err(|e| Error::json(format!("{} template", path.display()), e))?;
            cohort(&template, count, master_seed)
        }
    };
    if listeners.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no listeners in {}",
            path.display()
        )));
    }
    let mut ids = HashSet::new();
    for l in &listeners {
        l.validate()?;
        if !ids.insert(l.subject_id.as_str()) {
            return Err(Error::InvalidParameter(format!(
                "duplicate subject id '{}'",
                l.subject_id
            )));
        }
    }
    Ok(listeners)
}

pub fn cmd_staircase(s: &StaircaseSettings) -> Result<StaircaseReport> {
    let prov = Provenance::new("staircase", s)?;
    let listeners = load_listeners(&s.listeners, s.seed)?;
    let ladder = SnrLadder::new(s.ladder_db.clone())?;
    if s.tokens.is_empty() {
        return Err(Error::InvalidParameter("no token ids to measure".into()));
    }
    let mut trials = Vec::new();
    let mut tokens = Vec::new();
    for token_id in &s.tokens {
        match measure_snr90(token_id, &listeners, &ladder) {
            Ok(m) => {
                trials.extend(m.trials);
                tokens.push(TokenSnr90 {
                    token_id: token_id.clone(),
                    snr90_db: Some(m.estimate.snr90_db),
                    floor: m.estimate.floor,
                    curve: Some(m.curve),
                });
            }
            Err(Error::NoThreshold) => {
                log::warn!("{token_id}: response curve never reaches 0.90");
                tokens.push(TokenSnr90 {
                    token_id: token_id.clone(),
                    snr90_db: None,
                    floor: false,
                    curve: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    let report = StaircaseReport {
        ladder_db: s.ladder_db.clone(),
        n_listeners: listeners.len(),
        tokens,
    };
    ensure_dir(&s.out_dir)?;
    write_jsonl(&s.out_dir.join("trials.jsonl"), &trials)?;
    write_report(&s.out_dir.join("staircase_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Corpus, augmentation and features
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusSettings {
    pub consonants: Vec<Consonant>,
    pub tokens_per_class: usize,
    pub n_talkers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub n_tokens: usize,
    pub per_group: BTreeMap<String, usize>,
}

/// Write a labeled synthetic corpus: `wav/`, `manifest.jsonl`, `annotations.json`.
pub fn cmd_synth_corpus(s: &SynthCorpusSettings) -> Result<CountReport> {
    let prov = Provenance::new("synth-corpus", s)?;
    let wav_dir = s.out_dir.join("wav");
    ensure_dir(&wav_dir)?;
    let mut rows = Vec::new();
    let mut annotations = Vec::new();
    let mut per_group = BTreeMap::new();
    for &consonant in &s.consonants {
        let config = SyntheticConfig {
            tokens_per_class: s.tokens_per_class,
            n_talkers: s.n_talkers,
            seed: s.seed,
            ..SyntheticConfig::default()
        };
        for token in generate_class(consonant, &config)? {
            let id = token.audio.annotation.token_id.clone();
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            write_wav(&token.audio.clip, &s.out_dir.join(&rel))?;
            rows.push(CorpusEntry {
                path: rel,
                talker: token.label.talker,
                consonant,
                snr90_db: token.label.snr90_db,
            });
            annotations.push(token.audio.annotation);
        }
        per_group.insert(consonant.to_string(), s.tokens_per_class);
    }
    write_corpus_manifest(&s.out_dir.join("manifest.jsonl"), &rows)?;
    write_annotations(&s.out_dir.join("annotations.json"), &annotations)?;
    let report = CountReport {
        n_tokens: rows.len(),
        per_group,
    };
    write_report(&s.out_dir.join("synth_corpus_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub corpus: PathBuf,
    pub annotations: PathBuf,
    pub gates: PathBuf,
    pub families: Vec<DistortionFamily>,
    pub out_dir: PathBuf,
}

fn load_seeds(corpus: &Path, annotations: &Path) -> Result<Vec<SeedToken>> {
    require_file(corpus)?;
    require_file(annotations)?;
    let annotations = read_annotations(annotations)?;
    read_corpus_manifest(corpus)?
        .into_iter()
        .map(|row| {
            let token_id = row.token_id();
            let clip = read_wav(&resolve_relative(corpus, &row.path))?.with_id(token_id.clone());
            let annotation = annotations
                .get(&token_id)
                .cloned()
                .ok_or_else(|| Error::MissingAnnotation(token_id.clone()))?;
            Ok(SeedToken {
                token_id,
                label: row.label(),
                audio: AnnotatedClip::new(clip, annotation)?,
            })
        })
        .collect()
}

/// Write seeds plus every valid continuum: `wav/`, `manifest.jsonl`, `annotations.json`.
pub fn cmd_augment(s: &AugmentSettings) -> Result<CountReport> {
    let prov = Provenance::new("augment", s)?;
    let seeds = load_seeds(&s.corpus, &s.annotations)?;
    require_file(&s.gates)?;
    let gates = GateTable::load(&s.gates)?;
    let wav_dir = s.out_dir.join("wav");
    ensure_dir(&wav_dir)?;
    let mut annotations = Vec::new();
    let rows = augment_corpus(&seeds, &gates, &s.families, |token_id, audio| {
        let rel = PathBuf::from("wav").join(format!("{token_id}.wav"));
        write_wav(&audio.clip, &s.out_dir.join(&rel))?;
        annotations.push(audio.annotation.clone());
        Ok(rel)
    })?;
    write_jsonl(&s.out_dir.join("manifest.jsonl"), &rows)?;
    write_annotations(&s.out_dir.join("annotations.json"), &annotations)?;
    let mut per_group = BTreeMap::new();
    for row in &rows {
        *per_group.entry(row.family.clone()).or_insert(0) += 1;
    }
    let report = CountReport {
        n_tokens: rows.len(),
        per_group,
    };
    write_report(&s.out_dir.join("augment_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}

/// The fields featurization needs from a corpus or augmented manifest row.
#[derive(Debug, Clone, Deserialize)]
struct ManifestRow {
    path: PathBuf,
    #[serde(default)]
    token_id: Option<String>,
    talker: String,
    consonant: Consonant,
    #[serde(alias = "snr90_db")]
    label_snr90_db: f64,
}

/// One row of the feature manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub token_id: String,
    pub path: PathBuf,
    pub talker: String,
    pub consonant: Consonant,
    pub label_snr90_db: f64,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeSettings {
    pub manifest: PathBuf,
    pub annotations: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeReport {
    pub n_tokens: usize,
    /// Tokens whose interval is shorter than one analysis window.
    pub skipped: Vec<String>,
}

/// Write one feature cache per token under `feat/` and `features.jsonl`.
pub fn cmd_featurize(s: &FeaturizeSettings) -> Result<FeaturizeReport> {
    let prov = Provenance::new("featurize", s)?;
    require_file(&s.manifest)?;
    require_file(&s.annotations)?;
    let annotations = read_annotations(&s.annotations)?;
    let rows: Vec<ManifestRow> = read_jsonl(&s.manifest)?;
    let feat_dir = s.out_dir.join("feat");
    ensure_dir(&feat_dir)?;
    let mut out = Vec::with_capacity(rows.len());
    let mut skipped = Vec::new();
    for row in rows {
        let token_id = row
            .token_id
            .clone()
            .unwrap_or_else(|| crate::audio::token_id_from_path(&row.path));
        let clip = read_wav(&resolve_relative(&s.manifest, &row.path))?.with_id(token_id.clone());
        let annotation = annotations
            .get(&token_id)
            .ok_or_else(|| Error::MissingAnnotation(token_id.clone()))?;
        let features = match extract_features(&clip, annotation) {
            Ok(f) => f,
            Err(Error::IntervalTooShort { .. }) => {
                log::warn!("{token_id}: interval shorter than one window; skipped");
                skipped.push(token_id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let rel = PathBuf::from("feat").join(format!("{token_id}.feat"));
        write_feature_cache(&features, &s.out_dir.join(&rel))?;
        out.push(FeatureRow {
            token_id,
            path: rel,
            talker: row.talker,
            consonant: row.consonant,
            label_snr90_db: row.label_snr90_db,
            n_frames: features.n_frames(),
        });
    }
    write_jsonl(&s.out_dir.join("features.jsonl"), &out)?;
    let report = FeaturizeReport {
        n_tokens: out.len(),
        skipped,
    };
    write_report(&s.out_dir.join("featurize_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}

/// Load the cached features of one consonant (or all, for `None`).
pub fn load_features(
    manifest: &Path,
    consonant: Option<Consonant>,
) -> Result<Vec<LabeledFeatures>> {
    require_file(manifest)?;
    let rows: Vec<FeatureRow> = read_jsonl(manifest)?;
    rows.into_iter()
        .filter(|r| consonant.is_none_or(|c| r.consonant == c))
        .map(|r| {
            Ok(LabeledFeatures {
                features: read_feature_cache(&resolve_relative(manifest, &r.path))?,
                label_snr90_db: r.label_snr90_db,
                talker: r.talker,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

fn drop_too_short(items: &mut Vec<LabeledFeatures>, receptive_field: usize) -> usize {
    let before = items.len();
    items.retain(|i| i.features.n_frames() >= receptive_field);
    let dropped = before - items.len();
    if dropped > 0 {
        log::warn!(
            "{dropped} tokens shorter than the {receptive_field}-frame receptive field left out"
        );
    }
    dropped
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub features: PathBuf,
    pub consonant: Consonant,
    pub architecture: CnnArchitecture,
    pub config: TrainConfig,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub out_dir: PathBuf,
}

/// Token ids of each partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub consonant: Consonant,
    pub architecture: CnnArchitecture,
    pub train_config: TrainConfig,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Tokens with fewer frames than the receptive field, left out.
    pub n_too_short: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_dev_mse: f64,
}

/// Write `model.ckpt`, `training_log.csv`, `split.json` and `train_report.json`.
pub fn cmd_train(s: &TrainSettings) -> Result<TrainReport> {
    let prov = Provenance::new("train", s)?;
    let mut items = load_features(&s.features, Some(s.consonant))?;
    let n_too_short = drop_too_short(&mut items, s.architecture.receptive_field());
    if items.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no /{}/ tokens in {}",
            s.consonant,
            s.features.display()
        )));
    }
    let split = DataSplit::by_talker(items, s.dev_fraction, s.test_fraction, s.config.seed)?;
    let ids = |part: &[LabeledFeatures]| part.iter().map(|i| i.features.token_id.clone()).collect();
    let split_file = SplitFile {
        train: ids(&split.train),
        dev: ids(&split.dev),
        test: ids(&split.test),
    };
    let outcome = train(&split, Some(s.consonant), &s.architecture, &s.config)?;
    let mut model = outcome.model;
    let meta = model.meta.as_mut().expect("trained models carry metadata");
    meta.config_hash = Some(prov.config_hash.clone());
    let report = TrainReport {
        consonant: s.consonant,
        architecture: s.architecture.clone(),
        train_config: s.config.clone(),
        n_train: split.train.len(),
        n_dev: split.dev.len(),
        n_test: split.test.len(),
        n_too_short,
        epochs_run: outcome.log.len(),
        best_epoch: meta.epoch,
        best_dev_mse: meta.dev_mse,
    };
    ensure_dir(&s.out_dir)?;
    save_checkpoint(&model, &s.out_dir.join("model.ckpt"))?;
    write_training_log(&outcome.log, &s.out_dir.join("training_log.csv"))?;
    write_report(&s.out_dir.join("split.json"), &split_file, &prov)?;
    write_report(&s.out_dir.join("train_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Dev,
    Test,
    /// Every token of the model's consonant; no split file needed.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub features: PathBuf,
    pub split: Option<PathBuf>,
    pub partition: Partition,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub consonant: Option<Consonant>,
    pub partition: Partition,
    /// Hash recorded in the checkpoint by the training run.
    pub model_config_hash: Option<String>,
    pub n: usize,
    pub n_too_short: usize,
    pub mse: f64,
    pub residuals: Vec<Residual>,
}

pub fn cmd_eval(s: &EvalSettings) -> Result<EvalReport> {
    let prov = Provenance::new("eval", s)?;
    require_file(&s.checkpoint)?;
    let model = load_checkpoint(&s.checkpoint)?;
    let consonant = model.meta.as_ref().and_then(|m| m.consonant);
    let mut items = load_features(&s.features, consonant)?;
    if s.partition != Partition::All {
        let path = s.split.as_ref().ok_or_else(|| {
            Error::Config(
                format!("partition '{:?}' needs a split file", s.partition).to_lowercase(),
            )
        })?;
        require_file(path)?;
        let split: SplitFile = read_json(path)?;
        let wanted: HashSet<String> = match s.partition {
            Partition::Train => split.train,
            Partition::Dev => split.dev,
            Partition::Test => split.test,
            Partition::All => unreachable!(),
        }
        .into_iter()
        .collect();
        items.retain(|i| wanted.contains(&i.features.token_id));
    }
    let n_too_short = drop_too_short(&mut items, model.architecture.receptive_field());
    let evaluation = evaluate(&model, &items)?;
    let report = EvalReport {
        consonant,
        partition: s.partition,
        model_config_hash: model.meta.as_ref().and_then(|m| m.config_hash.clone()),
        n: evaluation.residuals.len(),
        n_too_short,
        mse: evaluation.mse,
        residuals: evaluation.residuals,
    };
    write_report(&s.out, &report, &prov)?;
    prov.write_beside(&s.out)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ASR baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockSettings {
    pub shape: MockShape,
    /// Threshold applied to every token without an entry in `thresholds`.
    pub threshold_db: Option<f64>,
    /// JSON object mapping token id to threshold (dB).
    pub thresholds: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSettings {
    pub corpus: PathBuf,
    pub noise: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub ladder_db: Vec<f64>,
    pub seed: u64,
    pub mock: MockSettings,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsonantBaseline {
    pub n_tokens: usize,
    pub summary: Option<BiasVariance>,
    /// Why no summary could be computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub backend: String,
    pub consonants: BTreeMap<Consonant, ConsonantBaseline>,
}

/// Run the ASR baseline against the labeled corpus with the mock backend.
pub fn cmd_baseline(s: &BaselineSettings) -> Result<BaselineReport> {
    let prov = Provenance::new("baseline", s)?;
    require_file(&s.corpus)?;
    require_file(&s.noise)?;
    let lexicon = match &s.lexicon {
        Some(path) => {
            require_file(path)?;
            Lexicon::load(path)?
        }
        None => Lexicon::builtin(),
    };
    let per_token: HashMap<String, f64> = match &s.mock.thresholds {
        Some(path) => {
            require_file(path)?;
            read_json(path)?
        }
        None => HashMap::new(),
    };
    let ladder = SnrLadder::new(s.ladder_db.clone())?;
    let noise = read_wav(&s.noise)?;
    let mut results = Vec::new();
    for row in read_corpus_manifest(&s.corpus)? {
        let token_id = row.token_id();
        let threshold = per_token
            .get(&token_id)
            .copied()
            .or(s.mock.threshold_db)
            .ok_or_else(|| Error::Config(format!("no mock threshold for token '{token_id}'")))?;
        let clip = read_wav(&resolve_relative(&s.corpus, &row.path))?;
        let mut backend = MockAsr::new(
            clip.clone(),
            threshold,
            s.mock.shape,
            derive_seed(s.seed, &token_id, "asr"),
        )
        .answering(cv_word(row.consonant));
        let asr = asr_snr90(
            &clip,
            row.consonant,
            &noise,
            &ladder,
            &mut backend,
            &lexicon,
        )?;
        results.push(BaselineResult {
            token_id,
            consonant: row.consonant,
            talker: Some(row.talker),
            asr_snr90: asr,
            human_snr90: row.snr90_db,
        });
    }
    let mut consonants = BTreeMap::new();
    for c in Consonant::ALL {
        let n_tokens = results.iter().filter(|r| r.consonant == c).count();
        if n_tokens == 0 {
            continue;
        }
        let entry = match bias_variance(&results, c) {
            Ok(bv) => ConsonantBaseline {
                n_tokens,
                summary: Some(bv),
                note: None,
            },
            Err(e) => ConsonantBaseline {
                n_tokens,
                summary: None,
                note: Some(e.to_string()),
            },
        };
        consonants.insert(c, entry);
    }
    let report = BaselineReport {
        backend: "mock".into(),
        consonants,
    };
    ensure_dir(&s.out_dir)?;
    write_jsonl(&s.out_dir.join("results.jsonl"), &results)?;
    write_report(&s.out_dir.join("baseline_report.json"), &report, &prov)?;
    prov.write_into_dir(&s.out_dir)?;
    Ok(report)
}
