use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use songcraft::acoustic::corpus::Utterance;
use songcraft::acoustic::{
    generate_synthetic_corpus, load_model, save_model, synthesize_song, train_toy_model, CorpusSpec, ToyCorpus,
    TrainHyper,
};
use songcraft::audio::{load_for_pipeline, write_wav, CANONICAL_RATE};
use songcraft::channel::apply_channel;
use songcraft::crafter::{command_target, craft_waa, craft_wta, Surrogate};
use songcraft::decoder::decode_text;
use songcraft::defense::{detect_squeezing, detect_turbulence, DefenseKind, DefenseVerdict};
use songcraft::lexicon::synthesize_command;
use songcraft::metrics::{run_defense_sweep, run_noise_sweep, sweep_csv, LabeledSample, SampleLabel};
use songcraft::{AcousticModel, AudioBuffer, ChannelConfig, CraftConfig, CraftResult, Lexicon, PhonemeTable};

use crate::error::CliError;
use crate::params::{Command, Resolved};

pub const CORPUS_INDEX: &str = "corpus.txt";

/// What a finished run prints, and whether its outcome counts as a failure.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub failure: Option<String>,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, failure: None }
    }
}

type Run = Result<Outcome, CliError>;

struct Toy {
    table: PhonemeTable,
    lexicon: Lexicon,
}

impl Toy {
    fn new() -> Self {
        let table = PhonemeTable::toy();
        let lexicon = Lexicon::toy(&table);
        Self { table, lexicon }
    }
}

pub fn run(r: &Resolved) -> Run {
    let toy = Toy::new();
    match r.command {
        Command::CorpusGen => corpus_gen(r, &toy),
        Command::ModelTrain => model_train(r, &toy),
        Command::ModelInfo => model_info(r),
        Command::Synth => synth(r, &toy),
        Command::Decode => decode(r, &toy),
        Command::CraftWta | Command::CraftWaa => craft(r, &toy),
        Command::ChannelApply => channel_apply(r),
        Command::DefendTurbulence | Command::DefendSqueeze => defend(r, &toy),
        Command::SweepNoise => sweep_noise(r, &toy),
        Command::SweepDefense => sweep_defense(r, &toy),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn model(r: &Resolved) -> Result<AcousticModel, CliError> {
    Ok(load_model(r.path("model")?)?)
}

fn audio(r: &Resolved, key: &str) -> Result<AudioBuffer, CliError> {
    Ok(load_for_pipeline(r.path(key)?)?)
}

fn words(r: &Resolved, key: &str, toy: &Toy) -> Result<Vec<String>, CliError> {
    let w = r.words(key)?;
    if w.is_empty() {
        return Err(CliError::Usage(format!("--{key} is empty")));
    }
    for word in &w {
        toy.lexicon.pronunciation(word)?;
    }
    Ok(w)
}

fn corpus_spec(r: &Resolved) -> Result<CorpusSpec, CliError> {
    Ok(CorpusSpec {
        utterances: r.parse("utterances")?,
        words_per_utterance: (r.parse("words_min")?, r.parse("words_max")?),
        seed: r.parse("corpus_seed")?,
        noise_prob: r.parse("noise_prob")?,
        noise_snr_db: (r.parse("noise_snr_min")?, r.parse("noise_snr_max")?),
        squeeze_prob: r.parse("squeeze_prob")?,
        squeeze_ratio: (r.parse("squeeze_min")?, r.parse("squeeze_max")?),
        digital_silence_prob: r.parse("silence_prob")?,
        ..CorpusSpec::default()
    })
}

fn check_probability(v: f64, key: &str) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{key} must lie in [0, 1]")))
    }
}

fn generate(r: &Resolved, toy: &Toy) -> Result<ToyCorpus, CliError> {
    let spec = corpus_spec(r)?;
    check_probability(spec.noise_prob, "noise-prob")?;
    check_probability(spec.squeeze_prob, "squeeze-prob")?;
    check_probability(spec.digital_silence_prob, "silence-prob")?;
    Ok(generate_synthetic_corpus(&toy.table, &toy.lexicon, &spec)?)
}

fn corpus_gen(r: &Resolved, toy: &Toy) -> Run {
    let corpus = generate(r, toy)?;
    let dir = r.path("out")?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut index = String::from("# file\twords\tpdf labels\n");
    for (i, u) in corpus.utterances.iter().enumerate() {
        let name = format!("utt_{i:05}.wav");
        write_wav(&u.audio, dir.join(&name))?;
        let labels: Vec<String> = u.labels.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(index, "{name}\t{}\t{}", u.words.join(" "), labels.join(" "));
    }
    write_text(&dir.join(CORPUS_INDEX), &index)?;
    Ok(Outcome::ok(format!("utterances: {}\nframes: {}\n", corpus.utterances.len(), corpus.num_frames())))
}

fn read_corpus(dir: &Path, toy: &Toy) -> Result<ToyCorpus, CliError> {
    let index = dir.join(CORPUS_INDEX);
    let text = fs::read_to_string(&index)
        .map_err(|e| CliError::Io(format!("cannot read {}: {e}", index.display())))?;
    let bad = |n: usize, m: &str| CliError::Io(format!("{} line {}: {m}", index.display(), n + 1));
    let mut utterances = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(file), Some(ws), Some(ls), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
            return Err(bad(n, "expected three tab-separated columns"));
        };
        let labels = ls
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad(n, "bad pdf label")))
            .collect::<Result<Vec<_>, _>>()?;
        if labels.iter().any(|&l: &u32| l as usize >= toy.table.num_pdfs()) {
            return Err(bad(n, "pdf label out of range"));
        }
        let audio = load_for_pipeline(dir.join(file))?;
        let words = ws.split_whitespace().map(String::from).collect();
        utterances.push(Utterance { audio, labels, words });
    }
    Ok(ToyCorpus { utterances, seed: 0, num_pdfs: toy.table.num_pdfs() })
}

fn model_train(r: &Resolved, toy: &Toy) -> Run {
    let corpus = match r.opt_path("corpus") {
        Some(dir) => read_corpus(&dir, toy)?,
        None => generate(r, toy)?,
    };
    let context: usize = r.parse("context")?;
    let hyper = TrainHyper {
        learning_rate: r.parse("train_lr")?,
        epochs: r.parse("epochs")?,
        batch_size: r.parse("batch_size")?,
        hidden: r.list("hidden")?,
        context_left: context,
        context_right: context,
        seed: r.parse("train_seed")?,
        holdout_fraction: r.parse("holdout")?,
        ..TrainHyper::default()
    };
    check_probability(hyper.holdout_fraction, "holdout")?;
    let (model, report) = train_toy_model(&corpus, &hyper)?;
    save_model(&model, r.path("out")?)?;
    Ok(Outcome::ok(format!(
        "epochs: {}\ntrain_frames: {}\nheldout_frames: {}\nfinal_loss: {}\ntrain_accuracy: {}\nheldout_accuracy: {}\n",
        report.epochs,
        report.train_frames,
        report.heldout_frames,
        report.final_loss,
        report.train_accuracy,
        report.heldout_accuracy
    )))
}

fn model_info(r: &Resolved) -> Run {
    let m = model(r)?;
    let shape = m.shape();
    let f = m.feature_config();
    let dims: Vec<String> = shape.dims().iter().map(|d| d.to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "sample_rate: {}", m.sample_rate());
    let _ = writeln!(out, "frame_length_ms: {}", f.frame_length_ms);
    let _ = writeln!(out, "frame_shift_ms: {}", f.frame_shift_ms);
    let _ = writeln!(out, "num_cepstra: {}", f.num_cepstra);
    let _ = writeln!(out, "num_mel_filters: {}", f.num_mel_filters);
    let _ = writeln!(out, "context: {} {}", shape.context_left, shape.context_right);
    let _ = writeln!(out, "dims: {}", dims.join(","));
    let _ = writeln!(out, "num_pdfs: {}", m.num_pdfs());
    let _ = writeln!(out, "seed: {}", m.seed());
    Ok(Outcome::ok(out))
}

fn synth(r: &Resolved, toy: &Toy) -> Run {
    let seed: u64 = r.parse("seed")?;
    let song = r.flag("song")?;
    let audio = match (song, r.get("words")) {
        (true, None) => {
            let d: f64 = r.parse("duration")?;
            if !(d > 0.0 && d <= 3600.0) {
                return Err(CliError::Usage("--duration must lie in (0, 3600]".into()));
            }
            synthesize_song(d, seed, CANONICAL_RATE)
        }
        (false, Some(_)) => synthesize_command(&words(r, "words", toy)?, &toy.table, &toy.lexicon, seed)?,
        _ => return Err(CliError::Usage("give exactly one of --words and --song".into())),
    };
    write_wav(&audio, r.path("out")?)?;
    Ok(Outcome::ok(format!("samples: {}\nduration_s: {}\n", audio.len(), audio.duration_secs())))
}

fn decode(r: &Resolved, toy: &Toy) -> Run {
    let m = model(r)?;
    let a = audio(r, "in")?;
    let mut result = decode_text(&a, &m, &toy.table, &toy.lexicon)?;
    let target = match r.get("target") {
        Some(_) => Some(words(r, "target", toy)?),
        None => None,
    };
    if let Some(t) = &target {
        result = result.scored(t)?;
    }
    let report = result.report(target.as_deref());
    if let Some(out) = r.opt_path("out") {
        write_text(&out, &report)?;
    }
    Ok(Outcome::ok(report))
}

fn captured_noise(r: &Resolved) -> Result<Option<AudioBuffer>, CliError> {
    match r.opt_path("noise_wav") {
        Some(p) => Ok(Some(load_for_pipeline(p)?)),
        None => Ok(None),
    }
}

fn craft_config(r: &Resolved) -> Result<CraftConfig, CliError> {
    let d = CraftConfig::default();
    let waa = r.get("noise_draws").is_some();
    Ok(CraftConfig {
        l: r.parse("l")?,
        learning_rate: r.parse("lr")?,
        max_iters: r.parse("max_iters")?,
        surrogate: Surrogate::parse(r.str("surrogate")?)?,
        seed: r.opt_parse("seed")?.unwrap_or(d.seed),
        noise_bound: r.opt_parse("noise_bound")?.unwrap_or(d.noise_bound),
        noise_draws_per_iter: if waa { r.parse("noise_draws")? } else { d.noise_draws_per_iter },
        eval_noise_draws: r.opt_parse("eval_draws")?.unwrap_or(d.eval_noise_draws),
        validation_draws: r.opt_parse("validation_draws")?.unwrap_or(d.validation_draws),
        validation_target: r.opt_parse("validation_target")?.unwrap_or(d.validation_target),
        check_every: r.opt_parse("check_every")?.unwrap_or(d.check_every),
    })
}

fn craft(r: &Resolved, toy: &Toy) -> Run {
    let m = model(r)?;
    let song = audio(r, "song")?;
    let command = words(r, "command", toy)?;
    let cfg = craft_config(r)?;
    cfg.validate()?;
    let instances: usize = r.parse("instances")?;
    if instances == 0 || instances > song.len() {
        return Err(CliError::Usage("--instances must lie in [1, song samples]".into()));
    }
    let target = command_target(&command, &m, &toy.table, &toy.lexicon, r.parse("target_seed")?, r.parse("min_repeat")?)?;
    let channel = if r.command == Command::CraftWaa {
        Some(ChannelConfig {
            noise_bound: r.opt_parse("eval_n")?.unwrap_or(cfg.noise_bound),
            captured_noise: captured_noise(r)?,
            seed: r.parse("eval_seed")?,
        })
    } else {
        None
    };

    // Disjoint equal slices, one command copy each.
    let chunk = song.len() / instances;
    let mut results: Vec<CraftResult> = Vec::with_capacity(instances);
    for i in 0..instances {
        let end = if i + 1 == instances { song.len() } else { (i + 1) * chunk };
        let part = song.slice(i * chunk, end);
        let cfg = CraftConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        results.push(match &channel {
            Some(ch) => craft_waa(&part, &target, &m, &toy.table, &toy.lexicon, &cfg, ch)?,
            None => craft_wta(&part, &target, &m, &toy.table, &toy.lexicon, &cfg)?,
        });
    }

    let samples: Vec<f64> = results.iter().flat_map(|res| res.audio.samples().iter().copied()).collect();
    write_wav(&AudioBuffer::new(samples, song.sample_rate())?, r.path("out")?)?;
    let (history, report) = if instances == 1 {
        (results[0].history_csv(), results[0].report())
    } else {
        let mut history = String::new();
        let mut report = String::new();
        for (i, res) in results.iter().enumerate() {
            for (n, line) in res.history_csv().lines().enumerate() {
                if n == 0 && i == 0 {
                    let _ = writeln!(history, "segment,{line}");
                } else if n > 0 {
                    let _ = writeln!(history, "{i},{line}");
                }
            }
            let _ = writeln!(report, "segment: {i}");
            report.push_str(&res.report());
        }
        (history, report)
    };
    if let Some(h) = r.opt_path("history") {
        write_text(&h, &history)?;
    }
    let failed: Vec<&CraftResult> = results.iter().filter(|res| !res.clean_success).collect();
    let failure = failed.first().map(|res| {
        if cfg.l == 0.0 {
            "no perturbation budget: l = 0 and the song does not already decode to the command".to_string()
        } else {
            format!(
                "attack did not converge on {} of {instances} segments in {} iterations (decoded: {:?})",
                failed.len(),
                res.iterations,
                res.decoded.join(" ")
            )
        }
    });
    Ok(Outcome { stdout: report, failure })
}

fn channel_apply(r: &Resolved) -> Run {
    let (n, seed, draw) = (r.parse("n")?, r.parse("seed")?, r.parse("draw")?);
    let a = audio(r, "in")?;
    let cfg = ChannelConfig { noise_bound: n, captured_noise: captured_noise(r)?, seed };
    cfg.validate()?;
    let out = apply_channel(&a, &cfg, draw)?;
    write_wav(&out, r.path("out")?)?;
    Ok(Outcome::ok(format!("samples: {}\n", out.len())))
}

fn defend(r: &Resolved, toy: &Toy) -> Run {
    let m = model(r)?;
    let a = audio(r, "in")?;
    let v: DefenseVerdict = if r.command == Command::DefendTurbulence {
        detect_turbulence(&a, &m, &toy.table, &toy.lexicon, r.parse("snr")?, r.parse("seed")?)?
    } else {
        detect_squeezing(&a, &m, &toy.table, &toy.lexicon, r.parse("ratio")?)?
    };
    let csv = format!("{}\n{}\n", DefenseVerdict::CSV_HEADER, v.csv_row(r.str("in")?));
    if let Some(out) = r.opt_path("out") {
        write_text(&out, &csv)?;
    }
    let failure = v.detected.then(|| {
        format!("transcripts diverge: {:?} vs {:?}", v.text1.join(" "), v.text2.join(" "))
    });
    Ok(Outcome { stdout: csv, failure })
}

fn sweep_noise(r: &Resolved, toy: &Toy) -> Run {
    let m = model(r)?;
    let song = audio(r, "song")?;
    let command = words(r, "command", toy)?;
    let grid: Vec<f64> = r.list("grid")?;
    let base = craft_config(r)?;
    let eval = ChannelConfig { noise_bound: r.parse("eval_n")?, captured_noise: captured_noise(r)?, seed: r.parse("eval_seed")? };
    eval.validate()?;
    for &n in &grid {
        CraftConfig { noise_bound: n, ..base.clone() }.validate()?;
    }
    let trials: usize = r.parse("trials")?;
    if trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let rows =
        run_noise_sweep(&song, &command, &m, &toy.table, &toy.lexicon, &grid, trials, r.parse("seed")?, &base, &eval)?;
    let csv = sweep_csv(&rows);
    write_text(&r.path("out")?, &csv)?;
    Ok(Outcome::ok(csv))
}

/// Sample list: `label path` per line; relative paths are taken from the
/// list's directory.
fn read_samples(list: &Path) -> Result<Vec<LabeledSample>, CliError> {
    let text =
        fs::read_to_string(list).map_err(|e| CliError::Io(format!("cannot read {}: {e}", list.display())))?;
    let base = list.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (label, path) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| CliError::Io(format!("{} line {}: expected `label path`", list.display(), n + 1)))?;
        let label = SampleLabel::parse(label)?;
        let audio = load_for_pipeline(base.join(path.trim()))?;
        out.push(LabeledSample { label, audio });
    }
    Ok(out)
}

fn sweep_defense(r: &Resolved, toy: &Toy) -> Run {
    let m = model(r)?;
    let defense = match r.str("defense")? {
        "turbulence" => DefenseKind::Turbulence,
        "squeeze" => DefenseKind::Squeezing,
        other => return Err(CliError::Usage(format!("unknown defense {other:?}"))),
    };
    let samples = read_samples(&r.path("samples")?)?;
    let grid: Vec<f64> = r.list("grid")?;
    let rows =
        run_defense_sweep(&samples, &m, &toy.table, &toy.lexicon, defense, &grid, r.parse("trials")?, r.parse("seed")?)?;
    let csv = sweep_csv(&rows);
    write_text(&r.path("out")?, &csv)?;
    Ok(Outcome::ok(csv))
}
