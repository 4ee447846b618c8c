//! Command-line front end: flag parsing, config merging and exit codes.
//!
//! Every setting resolves as flag, then config file, then built-in default.

use std::ffi::OsString;
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::audio::Consonant;
use crate::augment::DistortionFamily;
use crate::baseline::MockShape;
use crate::cnn::{CnnArchitecture, Table6Row, TrainConfig};
use crate::error::{Error, Result};
use crate::noise::DEFAULT_LTASS_BINS;
use crate::pipeline::*;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

const DEFAULT_NOISE_DURATION_S: f64 = 30.0;
const DEFAULT_DEV_FRACTION: f64 = 0.15;
const DEFAULT_TEST_FRACTION: f64 = 0.15;

#[derive(Debug, Parser)]
#[command(
    name = "snr90",
    version,
    about = "Estimate the SNR at which listeners recognize a CV token 90% of the time",
    after_help = "Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 internal error."
)]
struct Cli {
    /// TOML or JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the long-term average speech spectrum of a corpus.
    Ltass(LtassArgs),
    /// Synthesize speech-shaped noise from a spectrum profile.
    Synthnoise(SynthnoiseArgs),
    /// Mix a speech file with noise at a target SNR.
    Mix(MixArgs),
    /// Run simulated listeners through the adaptive test and estimate SNR90.
    Staircase(StaircaseArgs),
    /// Write a labeled synthetic CV corpus with a known cue-to-label mapping.
    SynthCorpus(SynthCorpusArgs),
    /// Expand seed tokens into labeled distortion continua.
    Augment(AugmentArgs),
    /// Extract log-magnitude spectrogram features over each token's interval.
    Featurize(FeaturizeArgs),
    /// Train a per-consonant SNR90 regressor.
    Train(TrainArgs),
    /// Evaluate a checkpoint and report MSE with per-token residuals.
    Eval(EvalArgs),
    /// Score an ASR backend against the corpus SNR90 labels.
    Baseline(BaselineArgs),
}

fn missing(what: &str, flag: &str) -> Error {
    Error::Config(format!(
        "missing {what}: pass {flag} or set it in the config file"
    ))
}

fn seed(flag: Option<u64>, cfg: &PipelineConfig) -> Result<u64> {
    flag.or(cfg.master_seed)
        .ok_or_else(|| missing("master seed", "--seed"))
}

fn ladder(flag: Option<Vec<f64>>, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    match flag {
        Some(levels) => Ok(crate::noise::SnrLadder::new(levels)?.levels_db),
        None => Ok(cfg.ladder()?.levels_db),
    }
}

#[derive(Debug, Args)]
struct LtassArgs {
    /// Corpus manifest (JSON lines); defaults to the configured corpus when no --wav is given.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Individual WAV files to include.
    #[arg(long = "wav")]
    wavs: Vec<PathBuf>,
    /// Number of frequency intervals between 0 Hz and Nyquist.
    #[arg(long)]
    fft_bins: Option<usize>,
    /// Output profile (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl LtassArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<LtassSettings> {
        let corpus = match (self.corpus, self.wavs.is_empty()) {
            (Some(c), _) => Some(c),
            (None, true) => Some(cfg.corpus()),
            (None, false) => None,
        };
        Ok(LtassSettings {
            corpus,
            wavs: self.wavs,
            fft_bins: self.fft_bins.unwrap_or(DEFAULT_LTASS_BINS),
            out: self.out.unwrap_or_else(|| cfg.profile()),
        })
    }
}

#[derive(Debug, Args)]
struct SynthnoiseArgs {
    /// Spectrum profile written by `ltass`.
    #[arg(long, conflicts_with = "flat")]
    profile: Option<PathBuf>,
    /// Synthesize white noise instead of shaping it.
    #[arg(long)]
    flat: bool,
    /// Duration in seconds [default: 30].
    #[arg(long)]
    duration: Option<f64>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output WAV.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SynthnoiseArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<SynthnoiseSettings> {
        Ok(SynthnoiseSettings {
            profile: (!self.flat).then(|| self.profile.unwrap_or_else(|| cfg.profile())),
            duration_s: self
                .duration
                .or(cfg.noise_duration_s)
                .unwrap_or(DEFAULT_NOISE_DURATION_S),
            seed: seed(self.seed, cfg)?,
            out: self.out.unwrap_or_else(|| cfg.noise()),
        })
    }
}

#[derive(Debug, Args)]
struct MixArgs {
    /// Speech WAV.
    #[arg(long)]
    speech: Option<PathBuf>,
    /// Noise WAV, at least as long as the speech.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// Target SNR in dB.
    #[arg(long, allow_negative_numbers = true)]
    snr: Option<f64>,
    /// Measure levels over [T0, T1] seconds instead of the whole clip.
    #[arg(long, num_args = 2, value_names = ["T0", "T1"], conflicts_with = "annotations")]
    interval: Option<Vec<f64>>,
    /// Measure levels over the speech token's annotated interval.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Output WAV.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl MixArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<MixSettings> {
        Ok(MixSettings {
            speech: self
                .speech
                .ok_or_else(|| missing("speech file", "--speech"))?,
            noise: self.noise.unwrap_or_else(|| cfg.noise()),
            snr_db: self.snr.ok_or_else(|| missing("target SNR", "--snr"))?,
            interval: self.interval.map(|v| (v[0], v[1])),
            annotations: self.annotations,
            out: self.out.ok_or_else(|| missing("output file", "--out"))?,
        })
    }
}

#[derive(Debug, Args)]
struct StaircaseArgs {
    /// Listener file: a JSON array of listeners or {"template": {...}, "count": n}.
    #[arg(long)]
    listeners: Option<PathBuf>,
    /// Token ids to measure [default: token].
    #[arg(long = "token")]
    tokens: Vec<String>,
    /// Comma-separated SNR ladder in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    ladder: Option<Vec<f64>>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl StaircaseArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<StaircaseSettings> {
        Ok(StaircaseSettings {
            listeners: self
                .listeners
                .or_else(|| cfg.paths.listeners.clone())
                .ok_or_else(|| missing("listener file", "--listeners"))?,
            tokens: if self.tokens.is_empty() {
                vec!["token".into()]
            } else {
                self.tokens
            },
            ladder_db: ladder(self.ladder, cfg)?,
            seed: seed(self.seed, cfg)?,
            out_dir: self.out_dir.unwrap_or_else(|| cfg.in_work_dir("staircase")),
        })
    }
}

#[derive(Debug, Args)]
struct SynthCorpusArgs {
    /// Comma-separated consonants [default: all six].
    #[arg(long, value_delimiter = ',')]
    consonants: Vec<Consonant>,
    /// Tokens per consonant class.
    #[arg(long, default_value_t = 2000)]
    tokens_per_class: usize,
    /// Number of synthetic talkers.
    #[arg(long, default_value_t = 40)]
    talkers: usize,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl SynthCorpusArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<SynthCorpusSettings> {
        let out_dir = self.out_dir.unwrap_or_else(|| {
            cfg.paths
                .corpus
                .as_ref()
                .and_then(|c| c.parent().map(PathBuf::from))
                .unwrap_or_else(|| cfg.in_work_dir("corpus"))
        });
        Ok(SynthCorpusSettings {
            consonants: if self.consonants.is_empty() {
                Consonant::ALL.to_vec()
            } else {
                self.consonants
            },
            tokens_per_class: self.tokens_per_class,
            n_talkers: self.talkers,
            seed: seed(self.seed, cfg)?,
            out_dir,
        })
    }
}

#[derive(Debug, Args)]
struct AugmentArgs {
    /// Seed corpus manifest (JSON lines).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Segment annotations of the seed tokens.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Gate file: most-distorted SNR90 per (token, family).
    #[arg(long)]
    gates: Option<PathBuf>,
    /// Comma-separated families [default: all].
    #[arg(long, value_delimiter = ',')]
    families: Vec<DistortionFamily>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl AugmentArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<AugmentSettings> {
        let families = if !self.families.is_empty() {
            self.families
        } else {
            cfg.families
                .clone()
                .unwrap_or_else(|| DistortionFamily::ALL.to_vec())
        };
        Ok(AugmentSettings {
            corpus: self.corpus.unwrap_or_else(|| cfg.corpus()),
            annotations: self.annotations.unwrap_or_else(|| cfg.annotations()),
            gates: self.gates.unwrap_or_else(|| cfg.gates()),
            families,
            out_dir: self.out_dir.unwrap_or_else(|| cfg.in_work_dir("augmented")),
        })
    }
}

#[derive(Debug, Args)]
struct FeaturizeArgs {
    /// Corpus or augmented manifest (JSON lines).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Segment annotations of the manifest's tokens.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl FeaturizeArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<FeaturizeSettings> {
        Ok(FeaturizeSettings {
            manifest: self
                .manifest
                .unwrap_or_else(|| cfg.in_work_dir("augmented/manifest.jsonl")),
            annotations: self
                .annotations
                .unwrap_or_else(|| cfg.in_work_dir("augmented/annotations.json")),
            out_dir: self.out_dir.unwrap_or_else(|| cfg.in_work_dir("features")),
        })
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Consonant class: p, t, k, b, d or g.
    #[arg(long)]
    consonant: Consonant,
    /// Feature manifest written by `featurize`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Start from the published architecture and hyper-parameters for the consonant.
    #[arg(long)]
    arch_from_table6: bool,
    /// Number of convolutional layers (3, 5 or 7).
    #[arg(long)]
    n_conv: Option<usize>,
    /// Three comma-separated kernel widths.
    #[arg(long, value_delimiter = ',')]
    kernel_widths: Option<Vec<usize>>,
    /// Minibatch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Dropout rate on the fully connected layer.
    #[arg(long)]
    dropout: Option<f64>,
    /// [default: 100]
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Epochs without dev improvement before stopping [default: 10].
    #[arg(long)]
    patience: Option<usize>,
    /// Fraction of talkers held out for early stopping [default: 0.15].
    #[arg(long)]
    dev_fraction: Option<f64>,
    /// Fraction of talkers held out for testing [default: 0.15].
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl TrainArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<TrainSettings> {
        let c = self.consonant;
        let table = self.arch_from_table6.then(|| Table6Row::for_consonant(c));
        let file = cfg.models.get(&c).cloned().unwrap_or_default();
        let need = |what: &str, flag: &str| {
            Error::Config(format!(
                "missing {what} for /{c}/: pass {flag}, set models.{c} in the config file, or use --arch-from-table6"
            ))
        };
        let n_conv = self
            .n_conv
            .or(file.n_conv)
            .or(table.map(|t| t.n_conv))
            .ok_or_else(|| need("layer count", "--n-conv"))?;
        let widths = match self.kernel_widths.or(file.kernel_widths) {
            Some(w) => <[usize; 3]>::try_from(w.as_slice())
                .map_err(|_| Error::Config(format!("expected 3 kernel widths, got {}", w.len())))?,
            None => table
                .map(|t| t.kernel_widths)
                .ok_or_else(|| need("kernel widths", "--kernel-widths"))?,
        };
        let architecture = CnnArchitecture::table5(n_conv, widths)?;
        let config = TrainConfig {
            batch_size: self
                .batch_size
                .or(file.batch_size)
                .or(table.map(|t| t.batch_size))
                .ok_or_else(|| need("batch size", "--batch-size"))?,
            learning_rate: self
                .learning_rate
                .or(file.learning_rate)
                .or(table.map(|t| t.learning_rate))
                .ok_or_else(|| need("learning rate", "--learning-rate"))?,
            dropout_p: self
                .dropout
                .or(file.dropout_p)
                .or(table.map(|t| t.dropout_p))
                .ok_or_else(|| need("dropout rate", "--dropout"))?,
            max_epochs: self.max_epochs.or(cfg.train.max_epochs).unwrap_or(100),
            seed: seed(self.seed, cfg)?,
            patience: self.patience.or(cfg.train.patience).unwrap_or(10),
        };
        config.validate()?;
        Ok(TrainSettings {
            features: self
                .features
                .unwrap_or_else(|| cfg.in_work_dir("features/features.jsonl")),
            consonant: c,
            architecture,
            config,
            dev_fraction: self
                .dev_fraction
                .or(cfg.train.dev_fraction)
                .unwrap_or(DEFAULT_DEV_FRACTION),
            test_fraction: self
                .test_fraction
                .or(cfg.train.test_fraction)
                .unwrap_or(DEFAULT_TEST_FRACTION),
            out_dir: self.out_dir.unwrap_or_else(|| cfg.model_dir(c)),
        })
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Locate the checkpoint, split and report under the consonant's model directory.
    #[arg(long)]
    consonant: Option<Consonant>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Feature manifest written by `featurize`.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Split file written by `train`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Split partition to score.
    #[arg(long, value_enum, default_value_t = Partition::Test)]
    partition: Partition,
    /// Report (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<EvalSettings> {
        let model_dir = self.consonant.map(|c| cfg.model_dir(c));
        let checkpoint = self
            .checkpoint
            .or_else(|| model_dir.as_ref().map(|d| d.join("model.ckpt")))
            .ok_or_else(|| missing("checkpoint", "--checkpoint or --consonant"))?;
        let dir = checkpoint.parent().map(PathBuf::from).unwrap_or_default();
        let partition = self.partition;
        let name = format!("eval_{}.json", format!("{partition:?}").to_lowercase());
        Ok(EvalSettings {
            features: self
                .features
                .unwrap_or_else(|| cfg.in_work_dir("features/features.jsonl")),
            split: match partition {
                Partition::All => None,
                _ => Some(self.split.unwrap_or_else(|| dir.join("split.json"))),
            },
            partition,
            out: self.out.unwrap_or_else(|| dir.join(name)),
            checkpoint,
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MockKind {
    Step,
    Logistic,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// Labeled corpus manifest (JSON lines).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Noise WAV, at least as long as each token.
    #[arg(long)]
    noise: Option<PathBuf>,
    /// ARPAbet pronouncing dictionary [default: built in].
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Comma-separated SNR ladder in dB.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    ladder: Option<Vec<f64>>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Mock recognizer response shape.
    #[arg(long, value_enum, default_value_t = MockKind::Step)]
    mock: MockKind,
    /// Logistic mock slope (1/dB).
    #[arg(long, default_value_t = 1.0)]
    mock_slope: f64,
    /// Recognition threshold (dB) for every token.
    #[arg(long, allow_negative_numbers = true)]
    mock_threshold: Option<f64>,
    /// JSON object of per-token thresholds, overriding --mock-threshold.
    #[arg(long)]
    mock_thresholds: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl BaselineArgs {
    fn resolve(self, cfg: &PipelineConfig) -> Result<BaselineSettings> {
        if self.mock_threshold.is_none() && self.mock_thresholds.is_none() {
            return Err(missing(
                "mock threshold",
                "--mock-threshold or --mock-thresholds",
            ));
        }
        Ok(BaselineSettings {
            corpus: self.corpus.unwrap_or_else(|| cfg.corpus()),
            noise: self.noise.unwrap_or_else(|| cfg.noise()),
            lexicon: self.lexicon.or_else(|| cfg.paths.lexicon.clone()),
            ladder_db: ladder(self.ladder, cfg)?,
            seed: seed(self.seed, cfg)?,
            mock: MockSettings {
                shape: match self.mock {
                    MockKind::Step => MockShape::Step,
                    MockKind::Logistic => MockShape::Logistic {
                        slope: self.mock_slope,
                    },
                },
                threshold_db: self.mock_threshold,
                thresholds: self.mock_thresholds,
            },
            out_dir: self.out_dir.unwrap_or_else(|| cfg.in_work_dir("baseline")),
        })
    }
}

fn dispatch(command: Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::Ltass(a) => {
            let s = a.resolve(cfg)?;
            let profile = cmd_ltass(&s)?;
            println!(
                "wrote {} ({} points)",
                s.out.display(),
                profile.freqs_hz.len()
            );
        }
        Command::Synthnoise(a) => {
            let s = a.resolve(cfg)?;
            cmd_synthnoise(&s)?;
            println!("wrote {}", s.out.display());
        }
        Command::Mix(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_mix(&s)?;
            println!(
                "wrote {}: measured SNR {:.3} dB",
                s.out.display(),
                r.measured_snr_db
            );
        }
        Command::Staircase(a) => {
            let s = a.resolve(cfg)?;
            for t in cmd_staircase(&s)?.tokens {
                match t.snr90_db {
                    Some(v) => println!("{}: SNR90 {v:.3} dB", t.token_id),
                    None => println!("{}: no threshold", t.token_id),
                }
            }
        }
        Command::SynthCorpus(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_synth_corpus(&s)?;
            println!("wrote {} tokens to {}", r.n_tokens, s.out_dir.display());
        }
        Command::Augment(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_augment(&s)?;
            println!("wrote {} tokens to {}", r.n_tokens, s.out_dir.display());
        }
        Command::Featurize(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_featurize(&s)?;
            println!(
                "featurized {} tokens ({} skipped)",
                r.n_tokens,
                r.skipped.len()
            );
        }
        Command::Train(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_train(&s)?;
            println!(
                "/{}/: best dev MSE {:.4} dB² at epoch {} of {}",
                r.consonant, r.best_dev_mse, r.best_epoch, r.epochs_run
            );
        }
        Command::Eval(a) => {
            let s = a.resolve(cfg)?;
            let r = cmd_eval(&s)?;
            println!("MSE {:.4} dB² over {} tokens", r.mse, r.n);
        }
        Command::Baseline(a) => {
            let s = a.resolve(cfg)?;
            for (c, entry) in cmd_baseline(&s)?.consonants {
                match entry.summary {
                    Some(bv) => println!("/{c}/: {bv}"),
                    None => println!("/{c}/: {}", entry.note.unwrap_or_default()),
                }
            }
        }
    }
    Ok(())
}

/// Process exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (program name first), run the command and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        let cfg = match &cli.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        dispatch(cli.command, &cfg)
    }));
    match outcome {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}
