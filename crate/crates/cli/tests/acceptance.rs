//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use songcraft::acoustic::{
    generate_synthetic_corpus, save_model, synthesize_song, train_toy_model, CorpusSpec, TrainHyper,
};
use songcraft::audio::{signal_power, snr_db, write_wav};
use songcraft::channel::apply_channel;
use songcraft::crafter::{command_target, craft_waa, craft_wta, surrogate_loss, Surrogate};
use songcraft::decoder::{decode_text, most_likely_pdf_sequence, success_rate};
use songcraft::defense::DefenseKind;
use songcraft::lexicon::{phoneme_collapse, reduce_frames, synthesize_command};
use songcraft::matrix::Matrix;
use songcraft::metrics::{run_defense_sweep, run_noise_sweep, LabeledSample, SampleLabel, SweepRow};
use songcraft::{
    AcousticModel, AudioBuffer, ChannelConfig, CraftConfig, CraftResult, Lexicon, PhonemeTable, PosteriorMatrix,
    TargetSequence,
};

const COMMANDS: [&str; 3] = ["open the door", "turn on the light", "okay echo"];
const SONG_SEEDS: [u64; 3] = [10, 11, 12];
const SONG_SECS: f64 = 5.0;
const CHANNEL_SNR_DB: f64 = 10.0;
const CHANNEL_SEED: u64 = 77;
const EVAL_DRAWS: u64 = 20;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

struct Toy {
    table: PhonemeTable,
    lexicon: Lexicon,
    model: AcousticModel,
    heldout_accuracy: f64,
    train_time: Duration,
}

struct Pair {
    command: usize,
    song: AudioBuffer,
    channel: ChannelConfig,
    wta: CraftResult,
    waa: Option<CraftResult>,
}

fn song(i: usize) -> AudioBuffer {
    synthesize_song(SONG_SECS, SONG_SEEDS[i], 8000)
}

fn eval_channel(song: &AudioBuffer) -> ChannelConfig {
    let n = ChannelConfig::bound_for_snr(signal_power(song).unwrap(), CHANNEL_SNR_DB);
    ChannelConfig::uniform(n, CHANNEL_SEED).unwrap()
}

fn target(toy: &Toy, command: usize) -> TargetSequence {
    command_target(&words(COMMANDS[command]), &toy.model, &toy.table, &toy.lexicon, 100 + command as u64, 3).unwrap()
}

fn decodes_to(toy: &Toy, audio: &AudioBuffer, command: &[String]) -> bool {
    let got = decode_text(audio, &toy.model, &toy.table, &toy.lexicon).unwrap().words;
    success_rate(&got, command).unwrap() == 100.0
}

/// Success fraction over held-out draws of the evaluation channel.
fn noisy_success(toy: &Toy, audio: &AudioBuffer, command: &[String], channel: &ChannelConfig) -> f64 {
    let hits = (0..EVAL_DRAWS)
        .filter(|&k| decodes_to(toy, &apply_channel(audio, channel, k).unwrap(), command))
        .count();
    hits as f64 / EVAL_DRAWS as f64
}

fn train() -> Toy {
    let start = Instant::now();
    let table = PhonemeTable::toy();
    let lexicon = Lexicon::toy(&table);
    let corpus = generate_synthetic_corpus(&table, &lexicon, &CorpusSpec::default()).unwrap();
    let (model, report) = train_toy_model(&corpus, &TrainHyper::default()).unwrap();
    Toy { table, lexicon, model, heldout_accuracy: report.heldout_accuracy, train_time: start.elapsed() }
}

fn gradient_soundness(toy: &Toy) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let clip: Vec<f64> = (0..4000).map(|_| rng.gen_range(-0.3..0.3)).collect();
    let frames = toy.model.frame_count(clip.len());
    let target = TargetSequence {
        pdfs: (0..frames).map(|_| rng.gen_range(0..toy.table.num_pdfs() as u32)).collect(),
        command: vec![],
    };
    let loss = |x: &[f64]| {
        let a = toy.model.forward_samples(x).unwrap();
        surrogate_loss(&a, &target, 0, Surrogate::CrossEntropy).unwrap().0
    };
    let (a, trace) = toy.model.forward_traced(&clip).unwrap();
    let (_, grad_logits) = surrogate_loss(&a, &target, 0, Surrogate::CrossEntropy).unwrap();
    let analytic = toy.model.backward(&trace, &grad_logits).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.gen_range(0..clip.len());
        let mut plus = clip.clone();
        plus[i] += h;
        let mut minus = clip.clone();
        minus[i] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let denom = fd.abs().max(analytic[i].abs());
        let rel = if denom == 0.0 { 0.0 } else { (fd - analytic[i]).abs() / denom };
        worst = worst.max(rel);
    }
    Verdict::new(worst <= 1e-4, format!("max relative error {worst:.2e} over 100 coordinates (limit 1e-4)"))
}

fn closed_loop(toy: &Toy) -> Verdict {
    let vocab = toy.lexicon.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ok = 0;
    for i in 0..100u64 {
        let n = rng.gen_range(1..=3);
        let w: Vec<String> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
        let audio = synthesize_command(&w, &toy.table, &toy.lexicon, 1000 + i).unwrap();
        if decode_text(&audio, &toy.model, &toy.table, &toy.lexicon).unwrap().words == w {
            ok += 1;
        }
    }
    let acc = toy.heldout_accuracy;
    Verdict::new(
        acc >= 0.95 && ok >= 95,
        format!("held-out frame accuracy {:.2}%, closed loop {ok}/100 (need 95% and 95)", 100.0 * acc),
    )
}

fn wta(toy: &Toy, pairs: &mut Vec<Pair>) -> Verdict {
    let mut failures = Vec::new();
    let mut min_snr = f64::INFINITY;
    let mut max_iters = 0;
    for c in 0..COMMANDS.len() {
        let b = target(toy, c);
        let command = words(COMMANDS[c]);
        for s in 0..SONG_SEEDS.len() {
            let song = song(s);
            let cfg = CraftConfig { seed: s as u64, ..CraftConfig::default() };
            let res = craft_wta(&song, &b, &toy.model, &toy.table, &toy.lexicon, &cfg).unwrap();
            let delta = AudioBuffer::new(
                res.audio.samples().iter().zip(song.samples()).map(|(a, b)| a - b).collect(),
                8000,
            )
            .unwrap();
            let snr = snr_db(&song, &delta).unwrap();
            min_snr = min_snr.min(snr);
            max_iters = max_iters.max(res.iterations);
            if !(decodes_to(toy, &res.audio, &command) && res.iterations <= 5000 && snr >= 10.0) {
                failures.push(format!("{:?}/song{s}: {} iters, {snr:.1} dB", COMMANDS[c], res.iterations));
            }
            let channel = eval_channel(&song);
            pairs.push(Pair { command: c, song, channel, wta: res, waa: None });
        }
    }
    Verdict::new(
        failures.is_empty(),
        format!(
            "{}/9 pairs decode to the command at 100%, max {max_iters} iterations, min SNR {min_snr:.2} dB{}",
            9 - failures.len(),
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    )
}

fn waa(toy: &Toy, pairs: &mut [Pair]) -> Verdict {
    let mut ok = true;
    let mut cells = Vec::new();
    let mut measured = Vec::new();
    for (i, p) in pairs.iter_mut().enumerate() {
        let b = target(toy, p.command);
        let command = words(COMMANDS[p.command]);
        let cfg = CraftConfig { seed: (i % 3) as u64, noise_bound: p.channel.noise_bound, ..CraftConfig::default() };
        let res = craft_waa(&p.song, &b, &toy.model, &toy.table, &toy.lexicon, &cfg, &p.channel).unwrap();
        let noise = songcraft::channel::sample_noise(p.song.len(), &p.channel, 0, 8000);
        measured.push(snr_db(&p.song, &noise).unwrap());
        let s_waa = noisy_success(toy, &res.audio, &command, &p.channel);
        let s_wta = noisy_success(toy, &p.wta.audio, &command, &p.channel);
        ok &= s_waa >= 0.6 && s_waa > s_wta;
        cells.push(format!("{:.0}/{:.0}", 100.0 * s_waa, 100.0 * s_wta));
        p.waa = Some(res);
    }
    let lo = measured.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = measured.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Verdict::new(
        ok,
        format!(
            "noisy success % WAA/WTA per pair [{}] at channel SNR {lo:.2}..{hi:.2} dB (need WAA >= 60 and > WTA)",
            cells.join(" ")
        ),
    )
}

/// Counts direction violations and their size in points (hundredths for
/// correlations, percentage points for success rates).
fn inversions(values: &[f64], increasing: bool, scale: f64) -> Vec<f64> {
    values
        .windows(2)
        .filter_map(|w| {
            let step = if increasing { w[0] - w[1] } else { w[1] - w[0] };
            (step > 0.0).then_some(step * scale)
        })
        .collect()
}

fn noise_trend(toy: &Toy) -> Verdict {
    let command = words(COMMANDS[0]);
    let mut ok = true;
    let mut parts = Vec::new();
    for s in 0..SONG_SEEDS.len() {
        let song = song(s);
        let channel = eval_channel(&song);
        let grid: Vec<f64> = [0.0, 0.25, 0.5, 1.0, 2.0].iter().map(|f| f * channel.noise_bound).collect();
        let rows: Vec<SweepRow> = run_noise_sweep(
            &song,
            &command,
            &toy.model,
            &toy.table,
            &toy.lexicon,
            &grid,
            100,
            s as u64,
            &CraftConfig::default(),
            &channel,
        )
        .unwrap();
        let corr: Vec<f64> = rows.iter().map(|r| r.corr_song.unwrap()).collect();
        let succ: Vec<f64> = rows.iter().map(|r| r.success_pct.unwrap()).collect();
        let mut inv = inversions(&corr, false, 100.0);
        inv.extend(inversions(&succ, true, 1.0));
        ok &= inv.len() <= 1 && inv.iter().all(|&p| p <= 2.0);
        let fmt = |v: &[f64], d: usize| v.iter().map(|x| format!("{x:.d$}")).collect::<Vec<_>>().join(",");
        parts.push(format!("song{s}: corr [{}] success [{}] inversions {}", fmt(&corr, 3), fmt(&succ, 0), inv.len()));
    }
    Verdict::new(ok, parts.join("; "))
}

fn defenses(toy: &Toy, pairs: &[Pair]) -> Verdict {
    let vocab = toy.lexicon.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let mut samples: Vec<LabeledSample> = (0..30u64)
        .map(|i| {
            let n = rng.gen_range(1..=3);
            let w: Vec<String> = (0..n).map(|_| vocab[rng.gen_range(0..vocab.len())].to_string()).collect();
            let audio = synthesize_command(&w, &toy.table, &toy.lexicon, 5000 + i).unwrap();
            LabeledSample { label: SampleLabel::Clean, audio }
        })
        .collect();
    for p in pairs {
        samples.push(LabeledSample { label: SampleLabel::Wta, audio: p.wta.audio.clone() });
        samples.push(LabeledSample { label: SampleLabel::Waa, audio: p.waa.as_ref().unwrap().audio.clone() });
    }
    let sq = &run_defense_sweep(&samples, &toy.model, &toy.table, &toy.lexicon, DefenseKind::Squeezing, &[0.7], 1, 3)
        .unwrap()[0];
    let tb = &run_defense_sweep(&samples, &toy.model, &toy.table, &toy.lexicon, DefenseKind::Turbulence, &[15.0], 10, 3)
        .unwrap()[0];
    let (sq_wta, sq_clean) = (sq.detect_wta_pct.unwrap(), sq.detect_clean_pct.unwrap());
    let (tb_wta, tb_waa) = (tb.detect_wta_pct.unwrap(), tb.detect_waa_pct.unwrap());
    Verdict::new(
        sq_wta >= 90.0 && sq_clean <= 10.0 && tb_wta >= 90.0 && tb_waa < tb_wta,
        format!(
            "squeeze 0.7: WTA {sq_wta:.1}%, clean FP {sq_clean:.1}% (WAA {:.1}%); turbulence 15 dB: WTA {tb_wta:.1}%, WAA {tb_waa:.1}%, clean FP {:.1}%",
            sq.detect_waa_pct.unwrap(),
            tb.detect_clean_pct.unwrap()
        ),
    )
}

fn exact_math(toy: &Toy) -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // Noise is the signal scaled by a known gain, so the ratio is exact.
    let x: Vec<f64> = (0..5000).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let sig = AudioBuffer::new(x.clone(), 8000).unwrap();
    let mut worst_snr: f64 = 0.0;
    for k in [-12.5, 0.0, 3.0, 10.0, 17.25, 40.0] {
        let g = 10f64.powf(-k / 20.0);
        let noise = AudioBuffer::new(x.iter().map(|v| v * g).collect(), 8000).unwrap();
        worst_snr = worst_snr.max((snr_db(&sig, &noise).unwrap() - k).abs());
    }
    let dc = AudioBuffer::new(vec![0.4; 1000], 8000).unwrap();
    let alt = AudioBuffer::new((0..1000).map(|i| if i % 2 == 0 { 0.004 } else { -0.004 }).collect(), 8000).unwrap();
    worst_snr = worst_snr.max((snr_db(&dc, &alt).unwrap() - 40.0).abs());
    ok &= worst_snr <= 1e-9;
    notes.push(format!("snr err {worst_snr:.1e}"));

    let clip = AudioBuffer::new((0..8000).map(|_| rng.gen_range(-0.4..0.4)).collect(), 8000).unwrap();
    let post = toy.model.forward(&clip).unwrap();
    let row_err = post
        .probs()
        .iter_rows()
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    ok &= row_err <= 1e-6;
    notes.push(format!("row-sum err {row_err:.1e}"));

    let mut reduce_bad = 0;
    for _ in 0..1000 {
        let mut pdfs = Vec::new();
        for _ in 0..rng.gen_range(1..30) {
            let id = rng.gen_range(0..toy.table.num_pdfs() as u32);
            pdfs.extend(std::iter::repeat(id).take(rng.gen_range(1..12)));
        }
        let b = TargetSequence { pdfs, command: vec![] };
        let once = reduce_frames(&b, 3).unwrap();
        let twice = reduce_frames(&once, 3).unwrap();
        if once != twice || phoneme_collapse(&once.pdfs, &toy.table) != phoneme_collapse(&b.pdfs, &toy.table) {
            reduce_bad += 1;
        }
    }
    ok &= reduce_bad == 0;
    notes.push(format!("reduce_frames violations {reduce_bad}/1000"));

    let mut argmax_bad = 0;
    for _ in 0..1000 {
        let (rows, cols) = (rng.gen_range(1..20), rng.gen_range(1..40));
        // Few distinct levels so ties are common.
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(1..6) as f64).collect();
        let probs = Matrix::from_vec(rows, cols, data.clone());
        let got = most_likely_pdf_sequence(&PosteriorMatrix::from_probs(&probs)).unwrap();
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let mut best = 0;
            for j in 0..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if got[r] as usize != best {
                argmax_bad += 1;
            }
        }
    }
    ok &= argmax_bad == 0;
    notes.push(format!("argmax mismatches {argmax_bad}"));

    let song = song(0);
    let b = target(toy, 1);
    let cfg = CraftConfig { seed: 5, max_iters: 300, ..CraftConfig::default() };
    let w = craft_wta(&song, &b, &toy.model, &toy.table, &toy.lexicon, &cfg).unwrap();
    let channel = ChannelConfig::uniform(0.0, 5).unwrap();
    let a = craft_waa(&song, &b, &toy.model, &toy.table, &toy.lexicon, &cfg, &channel).unwrap();
    let bits = |r: &CraftResult| r.audio.samples().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&w) == bits(&a) && w.iterations == a.iterations && w.history_csv() == a.history_csv();
    ok &= same;
    notes.push(format!("waa(N=0) == wta bitwise: {same}"));
    Verdict::new(ok, notes.join(", "))
}

fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_songcraft"))
}

fn run(args: &[&str]) -> i32 {
    let out = Proc::new(bin()).args(args).output().expect("spawn songcraft");
    out.status.code().unwrap_or(-1)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn reproducibility(toy: &Toy) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    save_model(&toy.model, d.join("m.bin")).unwrap();
    write_wav(&song(0), d.join("song.wav")).unwrap();
    fs::write(d.join("samples.txt"), "clean cmd.wav\nwta adv.wav\nwaa waa.wav\n").unwrap();
    let (m, s) = (p("m.bin"), p("song.wav"));
    let n_eval = format!("{}", eval_channel(&song(0)).noise_bound);
    let runs: Vec<Vec<String>> = vec![
        vec!["synth", "--words", "turn on the light", "--seed", "4", "--out", &p("cmd.wav")],
        vec!["synth", "--song", "--seed", "3", "--duration", "2", "--out", &p("song2.wav")],
        vec!["decode", "--model", &m, "--in", &p("cmd.wav"), "--target", "turn on the light", "--out", &p("dec.txt")],
        vec!["craft", "wta", "--model", &m, "--song", &s, "--command", "okay echo", "--out", &p("adv.wav"), "--history", &p("adv.csv")],
        vec![
            "craft", "waa", "--model", &m, "--song", &s, "--command", "okay echo", "--noise-bound", &n_eval,
            "--out", &p("waa.wav"), "--history", &p("waa.csv"),
        ],
        vec!["channel", "apply", "--in", &p("adv.wav"), "--n", "0.05", "--seed", "9", "--draw", "3", "--out", &p("noisy.wav")],
        vec!["defend", "turbulence", "--model", &m, "--in", &p("waa.wav"), "--snr", "15", "--seed", "2", "--out", &p("turb.csv")],
        vec!["defend", "squeeze", "--model", &m, "--in", &p("adv.wav"), "--out", &p("sq.csv")],
        vec![
            "sweep", "noise", "--model", &m, "--song", &s, "--command", "okay echo", "--grid", &format!("0,{n_eval}"),
            "--eval-n", &n_eval, "--trials", "10", "--out", &p("sweep_noise.csv"),
        ],
        vec![
            "sweep", "defense", "--model", &m, "--samples", &p("samples.txt"), "--defense", "turbulence", "--grid",
            "10,20", "--trials", "3", "--out", &p("sweep_def.csv"),
        ],
        vec!["corpus", "gen", "--utterances", "12", "--corpus-seed", "8", "--out", &p("corpus")],
        vec!["model", "train", "--corpus", &p("corpus"), "--epochs", "2", "--out", &p("small.bin")],
    ]
    .into_iter()
    .map(|v| v.into_iter().map(String::from).collect())
    .collect();

    let mut problems = Vec::new();
    let mut compared = 0;
    for (i, args) in runs.iter().enumerate() {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let code = run(&argv);
        if !(code == 0 || code == 1) {
            problems.push(format!("{} exited {code}", argv[..2].join(" ")));
            continue;
        }
        let out_idx = argv.iter().position(|a| *a == "--out").unwrap() + 1;
        let out = PathBuf::from(argv[out_idx]);
        let manifest = if out.is_dir() {
            out.join("corpus.manifest")
        } else {
            PathBuf::from(format!("{}.manifest", out.display()))
        };
        let redo = d.join(format!("replay{i}"));
        let code2 = run(&["replay", manifest.to_str().unwrap(), "--out-dir", redo.to_str().unwrap()]);
        if code2 != code {
            problems.push(format!("{} replay exited {code2}, original {code}", argv[..2].join(" ")));
        }
        // Outputs are the values of --out and --history.
        let mut originals: Vec<PathBuf> = Vec::new();
        for flag in ["--out", "--history"] {
            if let Some(k) = argv.iter().position(|a| *a == flag) {
                let o = PathBuf::from(argv[k + 1]);
                if o.is_dir() {
                    originals.extend(files_under(&o).into_iter().filter(|f| f.extension().is_none_or(|e| e != "manifest")));
                } else {
                    originals.push(o);
                }
            }
        }
        for o in originals {
            let rel = o.strip_prefix(d).unwrap();
            let copy = redo.join(rel);
            compared += 1;
            if fs::read(&o).ok() != fs::read(&copy).ok() {
                problems.push(format!("{} differs", rel.display()));
            }
        }
    }
    Verdict::new(
        problems.is_empty() && compared > 0,
        format!("{} subcommands, {compared} output files re-run byte-identical{}", runs.len(), if problems.is_empty() {
            String::new()
        } else {
            format!("; problems: {}", problems.join(", "))
        }),
    )
}

fn report(id: usize, limit_secs: u64, started: Instant, v: Verdict, all: &mut bool) {
    let secs = started.elapsed().as_secs_f64();
    let in_time = secs <= limit_secs as f64;
    let pass = v.pass && in_time;
    *all &= pass;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {id}: {} [{secs:.1}s of {limit_secs}s{}] {}",
        if pass { "PASS" } else { "FAIL" },
        if in_time { "" } else { ", over time" },
        v.detail
    );
    let _ = out.flush();
}

fn main() {
    let mut all = true;
    let toy = train();
    let mut pairs = Vec::new();

    let t = Instant::now();
    report(1, 120, t, gradient_soundness(&toy), &mut all);

    let t = Instant::now() - toy.train_time;
    report(2, 300, t, closed_loop(&toy), &mut all);

    let t = Instant::now();
    report(3, 1200, t, wta(&toy, &mut pairs), &mut all);

    let t = Instant::now();
    report(4, 1800, t, waa(&toy, &mut pairs), &mut all);

    let t = Instant::now();
    report(5, 2400, t, noise_trend(&toy), &mut all);

    let t = Instant::now();
    report(6, 900, t, defenses(&toy, &pairs), &mut all);

    let t = Instant::now();
    report(7, 120, t, exact_math(&toy), &mut all);

    let t = Instant::now();
    report(8, 600, t, reproducibility(&toy), &mut all);

    println!("acceptance: {}", if all { "all criteria pass" } else { "FAILURES" });
    if !all {
        std::process::exit(1);
    }
}
