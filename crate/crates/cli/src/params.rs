//! Parameter tables, config files and run manifests.
//!
//! Every subcommand is described by a list of [`Param`]s. Values resolve as
//! built-in defaults, then the config file, then command-line flags. The
//! resolved set is what a manifest records, and a manifest is itself a valid
//! config file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Value,
    Flag,
    Input,
    Output,
}

#[derive(Debug, Clone, Copy)]
pub struct Param {
    pub key: &'static str,
    pub kind: Kind,
    pub default: Option<&'static str>,
    pub required: bool,
    pub help: &'static str,
}

const fn p(key: &'static str, default: &'static str, help: &'static str) -> Param {
    Param { key, kind: Kind::Value, default: Some(default), required: false, help }
}

const fn opt(key: &'static str, help: &'static str) -> Param {
    Param { key, kind: Kind::Value, default: None, required: false, help }
}

const fn req(key: &'static str, help: &'static str) -> Param {
    Param { key, kind: Kind::Value, default: None, required: true, help }
}

const fn flag(key: &'static str, help: &'static str) -> Param {
    Param { key, kind: Kind::Flag, default: Some("false"), required: false, help }
}

const fn input(key: &'static str, required: bool, help: &'static str) -> Param {
    Param { key, kind: Kind::Input, default: None, required, help }
}

const fn output(key: &'static str, required: bool, help: &'static str) -> Param {
    Param { key, kind: Kind::Output, default: None, required, help }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CorpusGen,
    ModelTrain,
    ModelInfo,
    Synth,
    Decode,
    CraftWta,
    CraftWaa,
    ChannelApply,
    DefendTurbulence,
    DefendSqueeze,
    SweepNoise,
    SweepDefense,
}

pub const COMMANDS: [Command; 12] = [
    Command::CorpusGen,
    Command::ModelTrain,
    Command::ModelInfo,
    Command::Synth,
    Command::Decode,
    Command::CraftWta,
    Command::CraftWaa,
    Command::ChannelApply,
    Command::DefendTurbulence,
    Command::DefendSqueeze,
    Command::SweepNoise,
    Command::SweepDefense,
];

const CORPUS: [Param; 11] = [
    p("utterances", "400", "number of utterances"),
    p("corpus_seed", "1", "corpus generator seed"),
    p("words_min", "1", "fewest words per utterance"),
    p("words_max", "3", "most words per utterance"),
    p("noise_prob", "0.5", "probability of additive noise"),
    p("noise_snr_min", "8", "lowest augmentation SNR (dB)"),
    p("noise_snr_max", "30", "highest augmentation SNR (dB)"),
    p("squeeze_prob", "0.4", "probability of a decimate-and-restore pass"),
    p("squeeze_min", "0.6", "lowest augmentation squeeze ratio"),
    p("squeeze_max", "0.9", "highest augmentation squeeze ratio"),
    p("silence_prob", "0.1", "probability of a noise-free background"),
];

const TRAIN: [Param; 7] = [
    p("epochs", "12", "training epochs"),
    p("train_lr", "0.002", "Adam learning rate"),
    p("batch_size", "128", "minibatch size in frames"),
    p("hidden", "64,64", "hidden layer widths"),
    p("context", "4", "frames of context on each side"),
    p("train_seed", "7", "initialization and shuffling seed"),
    p("holdout", "0.1", "trailing fraction of utterances held out"),
];

const CRAFT: [Param; 7] = [
    p("l", "0.15", "per-sample perturbation bound"),
    p("lr", "0.01", "step size"),
    p("max_iters", "5000", "iteration budget"),
    p("seed", "0", "crafting seed"),
    p("surrogate", "cross_entropy", "loss: cross_entropy or literal_l1"),
    p("target_seed", "0", "seed of the synthesized command the target is read from"),
    p("min_repeat", "3", "frames kept per repeated target id"),
];

const WAA: [Param; 9] = [
    p("noise_bound", "0", "training noise bound N"),
    p("noise_draws", "4", "noise draws per iteration"),
    p("validation_draws", "16", "draws checked by the stopping rule"),
    p("validation_target", "0.9", "validation success needed to stop"),
    p("check_every", "25", "iterations between validation checks"),
    opt("eval_n", "held-out channel bound (defaults to noise_bound)"),
    p("eval_seed", "1", "held-out channel seed"),
    p("eval_draws", "20", "held-out channel draws"),
    input("noise_wav", false, "recorded device noise to loop instead of random draws"),
];

impl Command {
    pub fn path(self) -> &'static [&'static str] {
        match self {
            Command::CorpusGen => &["corpus", "gen"],
            Command::ModelTrain => &["model", "train"],
            Command::ModelInfo => &["model", "info"],
            Command::Synth => &["synth"],
            Command::Decode => &["decode"],
            Command::CraftWta => &["craft", "wta"],
            Command::CraftWaa => &["craft", "waa"],
            Command::ChannelApply => &["channel", "apply"],
            Command::DefendTurbulence => &["defend", "turbulence"],
            Command::DefendSqueeze => &["defend", "squeeze"],
            Command::SweepNoise => &["sweep", "noise"],
            Command::SweepDefense => &["sweep", "defense"],
        }
    }

    pub fn name(self) -> String {
        self.path().join(" ")
    }

    pub fn from_name(name: &str) -> Option<Command> {
        let words: Vec<&str> = name.split_whitespace().collect();
        COMMANDS.into_iter().find(|c| c.path() == words.as_slice())
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::CorpusGen => "Generate a labeled toy training corpus",
            Command::ModelTrain => "Train the toy acoustic model",
            Command::ModelInfo => "Print a model file's header",
            Command::Synth => "Synthesize a toy command or a song",
            Command::Decode => "Transcribe a WAV file",
            Command::CraftWta => "Embed a command in a song for direct file input",
            Command::CraftWaa => "Embed a command in a song robust to channel noise",
            Command::ChannelApply => "Pass a WAV file through the noisy playback channel",
            Command::DefendTurbulence => "Check a WAV file by adding noise and comparing transcripts",
            Command::DefendSqueeze => "Check a WAV file by downsampling and comparing transcripts",
            Command::SweepNoise => "Sweep the training noise bound of WAA crafting",
            Command::SweepDefense => "Sweep a defense parameter over labeled samples",
        }
    }

    pub fn params(self) -> Vec<Param> {
        let model = input("model", true, "model file");
        let mut v = match self {
            Command::CorpusGen => {
                let mut v = vec![output("out", true, "output directory")];
                v.extend(CORPUS);
                v
            }
            Command::ModelTrain => {
                let mut v = vec![
                    input("corpus", false, "corpus directory (generated in memory when omitted)"),
                    output("out", true, "model file to write"),
                ];
                v.extend(TRAIN);
                v.extend(CORPUS);
                v
            }
            Command::ModelInfo => vec![model],
            Command::Synth => vec![
                output("out", true, "WAV file to write"),
                opt("words", "command words"),
                flag("song", "synthesize a song instead of a command"),
                p("duration", "5", "song length in seconds"),
                p("seed", "0", "synthesis seed"),
            ],
            Command::Decode => vec![
                model,
                input("in", true, "WAV file"),
                opt("target", "expected words, for per-word scoring"),
                output("out", false, "report file"),
            ],
            Command::CraftWta | Command::CraftWaa => {
                let mut v = vec![
                    model,
                    input("song", true, "carrier song WAV"),
                    req("command", "words to embed"),
                    output("out", true, "adversarial WAV to write"),
                    output("history", false, "per-iteration CSV"),
                    p("instances", "1", "command copies, each crafted into its own equal slice of the song"),
                ];
                v.extend(CRAFT);
                if self == Command::CraftWaa {
                    v.extend(WAA);
                }
                v
            }
            Command::ChannelApply => vec![
                input("in", true, "WAV file"),
                output("out", true, "WAV file to write"),
                req("n", "noise bound N"),
                p("seed", "0", "noise seed"),
                p("draw", "0", "draw index"),
                input("noise_wav", false, "recorded device noise to loop"),
            ],
            Command::DefendTurbulence => vec![
                model,
                input("in", true, "WAV file"),
                p("snr", "15", "noise level in dB"),
                p("seed", "0", "noise seed"),
                output("out", false, "verdict CSV"),
            ],
            Command::DefendSqueeze => vec![
                model,
                input("in", true, "WAV file"),
                p("ratio", "0.7", "downsampling ratio in (0, 1]"),
                output("out", false, "verdict CSV"),
            ],
            Command::SweepNoise => {
                let mut v = vec![
                    model,
                    input("song", true, "carrier song WAV"),
                    req("command", "words to embed"),
                    output("out", true, "sweep CSV"),
                    req("grid", "comma-separated training bounds N"),
                    p("trials", "20", "held-out channel draws per grid point"),
                    p("seed", "0", "target and crafting seed"),
                    req("eval_n", "held-out channel bound"),
                    p("eval_seed", "1", "held-out channel seed"),
                    input("noise_wav", false, "recorded device noise to loop"),
                ];
                v.extend(CRAFT.into_iter().filter(|p| matches!(p.key, "l" | "lr" | "max_iters" | "surrogate")));
                v.extend(WAA.into_iter().filter(|p| {
                    matches!(p.key, "noise_draws" | "validation_draws" | "validation_target" | "check_every")
                }));
                v
            }
            Command::SweepDefense => vec![
                model,
                input("samples", true, "sample list: one `label path` per line"),
                req("defense", "turbulence or squeeze"),
                req("grid", "comma-separated SNRs (dB) or ratios"),
                p("trials", "20", "noise trials per sample (turbulence)"),
                p("seed", "0", "noise seed"),
                output("out", true, "sweep CSV"),
            ],
        };
        v.shrink_to_fit();
        v
    }
}

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key = value` lines. `#` starts a comment line; blank lines are skipped.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!("config line {}: expected key = value", i + 1)));
        };
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::Usage(format!("config line {}: empty key", i + 1)));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Fully resolved parameters of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl Resolved {
    /// Layers `config` then `flags` over the defaults.
    pub fn resolve(
        command: Command,
        config: &[(String, String)],
        flags: &[(String, String)],
    ) -> Result<Self, CliError> {
        let params = command.params();
        let mut values = BTreeMap::new();
        for p in &params {
            if let Some(d) = p.default {
                values.insert(p.key.to_string(), d.to_string());
            }
        }
        for (k, v) in config {
            match k.as_str() {
                "tool_version" => continue,
                "subcommand" => {
                    if Command::from_name(v) != Some(command) {
                        return Err(CliError::Usage(format!(
                            "config is for {v:?}, not {:?}",
                            command.name()
                        )));
                    }
                    continue;
                }
                _ => {}
            }
            if !params.iter().any(|p| p.key == k) {
                return Err(CliError::Usage(format!("unknown key {k:?} for {}", command.name())));
            }
            set(&mut values, k, v);
        }
        for (k, v) in flags {
            set(&mut values, k, v);
        }
        for p in &params {
            let present = values.contains_key(p.key);
            if p.required && !present {
                return Err(CliError::Usage(format!("missing required --{}", flag_name(p.key))));
            }
            if present && matches!(p.kind, Kind::Input | Kind::Output) {
                let abs = absolute(Path::new(&values[p.key]))?;
                values.insert(p.key.to_string(), abs.to_string_lossy().into_owned());
            }
        }
        Ok(Self { command, values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.get(key).ok_or_else(|| CliError::Usage(format!("missing required --{}", flag_name(key))))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.str(key).map(PathBuf::from)
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|_| CliError::Usage(format!("invalid value {raw:?} for --{}", flag_name(key))))
    }

    pub fn opt_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.parse(key).map(Some),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key)
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.str(key)?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("invalid list item {s:?} in --{}", flag_name(key))))
            })
            .collect()
    }

    pub fn words(&self, key: &str) -> Result<Vec<String>, CliError> {
        Ok(self.str(key)?.split_whitespace().map(String::from).collect())
    }

    /// Points every output into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) -> Result<(), CliError> {
        for p in self.command.params() {
            if p.kind != Kind::Output {
                continue;
            }
            if let Some(v) = self.values.get(p.key) {
                let name = Path::new(v)
                    .file_name()
                    .ok_or_else(|| CliError::Usage(format!("output {v:?} has no file name")))?;
                let abs = absolute(&dir.join(name))?;
                self.values.insert(p.key.to_string(), abs.to_string_lossy().into_owned());
            }
        }
        Ok(())
    }

    /// Where the manifest goes: beside the first output, or inside it for
    /// directory outputs.
    pub fn manifest_path(&self) -> Option<PathBuf> {
        let first = self
            .command
            .params()
            .into_iter()
            .find(|p| p.kind == Kind::Output && self.values.contains_key(p.key))?;
        let out = PathBuf::from(&self.values[first.key]);
        Some(if self.command == Command::CorpusGen {
            out.join("corpus.manifest")
        } else {
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push(".manifest");
            out.with_file_name(name)
        })
    }

    pub fn manifest(&self) -> String {
        let mut out = String::from("# songcraft run manifest\n");
        let _ = writeln!(out, "subcommand = {}", self.command.name());
        let _ = writeln!(out, "tool_version = {TOOL_VERSION}");
        for p in self.command.params() {
            match self.values.get(p.key) {
                Some(v) => {
                    let _ = writeln!(out, "{} = {v}", p.key);
                }
                None => {
                    let _ = writeln!(out, "# {} unset", p.key);
                }
            }
        }
        out
    }
}

fn set(values: &mut BTreeMap<String, String>, k: &str, v: &str) {
    if v.is_empty() {
        values.remove(k);
    } else {
        values.insert(k.to_string(), v.to_string());
    }
}

fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::Io(format!("cannot resolve {}: {e}", path.display())))
}

/// Subcommand named by a manifest, plus its key/value pairs.
pub fn read_manifest(path: &Path) -> Result<(Command, Vec<(String, String)>), CliError> {
    let pairs = read_config(path)?;
    let name = pairs
        .iter()
        .find(|(k, _)| k == "subcommand")
        .map(|(_, v)| v.clone())
        .ok_or_else(|| CliError::Usage(format!("{} has no subcommand line", path.display())))?;
    let command =
        Command::from_name(&name).ok_or_else(|| CliError::Usage(format!("unknown subcommand {name:?}")))?;
    Ok((command, pairs))
}
