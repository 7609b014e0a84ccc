//! End-to-end behaviour with a trained toy model.

use std::sync::OnceLock;

use songcraft::acoustic::{
    generate_synthetic_corpus, load_model, save_model, synthesize_song, train_toy_model, CorpusSpec, TrainHyper,
    TrainReport,
};
use songcraft::audio::signal_power;
use songcraft::channel::apply_channel;
use songcraft::crafter::{command_target, craft_waa, craft_wta, noisy_success_fraction};
use songcraft::decoder::{decode_text, success_rate};
use songcraft::defense::{detect_squeezing, detect_turbulence, DefenseKind};
use songcraft::lexicon::{extract_target_sequence, phoneme_collapse, synthesize_command};
use songcraft::metrics::{run_defense_sweep, run_noise_sweep, sweep_csv, LabeledSample, SampleLabel};
use songcraft::{AcousticModel, AudioBuffer, ChannelConfig, CraftConfig, Lexicon, PhonemeTable};

struct Fixture {
    table: PhonemeTable,
    lexicon: Lexicon,
    model: AcousticModel,
    report: TrainReport,
}

fn fx() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let table = PhonemeTable::toy();
        let lexicon = Lexicon::toy(&table);
        let corpus = generate_synthetic_corpus(&table, &lexicon, &CorpusSpec::default()).unwrap();
        let (model, report) = train_toy_model(&corpus, &TrainHyper::default()).unwrap();
        Fixture { table, lexicon, model, report }
    })
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn decode(audio: &AudioBuffer) -> Vec<String> {
    let f = fx();
    decode_text(audio, &f.model, &f.table, &f.lexicon).unwrap().words
}

#[test]
fn default_training_reaches_accuracy() {
    assert!(fx().report.heldout_accuracy >= 0.95, "{:?}", fx().report);
}

#[test]
fn training_is_seeded() {
    let f = fx();
    let spec = CorpusSpec { utterances: 20, ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&f.table, &f.lexicon, &spec).unwrap();
    let hyper = TrainHyper { epochs: 2, ..TrainHyper::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = train_toy_model(&corpus, &hyper).unwrap();
    let (b, _) = train_toy_model(&corpus, &hyper).unwrap();
    save_model(&a, dir.path().join("a.bin")).unwrap();
    save_model(&b, dir.path().join("b.bin")).unwrap();
    let bytes = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(bytes("a.bin"), bytes("b.bin"));
}

#[test]
fn zero_epochs_stays_near_chance() {
    let f = fx();
    let spec = CorpusSpec { utterances: 40, ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&f.table, &f.lexicon, &spec).unwrap();
    let (_, rep) = train_toy_model(&corpus, &TrainHyper { epochs: 0, ..TrainHyper::default() }).unwrap();
    // Silence frames make up about a third of the labels, so an untrained
    // net can do no better than that share by luck.
    assert!(rep.heldout_accuracy < 0.4, "{rep:?}");
}

#[test]
fn saved_model_decodes_identically() {
    let f = fx();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&f.model, &path).unwrap();
    let back = load_model(&path).unwrap();
    let a = synthesize_command(&words("okay turn on the light"), &f.table, &f.lexicon, 4).unwrap();
    assert_eq!(f.model.forward(&a).unwrap(), back.forward(&a).unwrap());
}

#[test]
fn synthesized_open_the_door_decodes() {
    let f = fx();
    let a = synthesize_command(&words("open the door"), &f.table, &f.lexicon, 0).unwrap();
    assert_eq!(decode(&a), words("open the door"));
    assert!(decode(&AudioBuffer::zeros(8000, 8000)).is_empty());
}

#[test]
fn corpus_utterances_decode_to_their_words() {
    let f = fx();
    let spec = CorpusSpec { utterances: 100, seed: 4242, ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&f.table, &f.lexicon, &spec).unwrap();
    let ok = corpus.utterances.iter().filter(|u| decode(&u.audio) == u.words).count();
    assert!(ok >= 95, "{ok}/100");
}

#[test]
fn echo_target_collapses_to_its_phonemes() {
    let f = fx();
    let a = synthesize_command(&words("echo"), &f.table, &f.lexicon, 9).unwrap();
    let b = extract_target_sequence(&a, &f.model, &words("echo")).unwrap();
    assert_eq!(b.len(), f.model.frame_count(a.len()));
    assert_eq!(phoneme_collapse(&b.pdfs, &f.table), words("eh k ow"));
    let s = extract_target_sequence(&AudioBuffer::zeros(4000, 8000), &f.model, &[]).unwrap();
    assert!(s.pdfs.iter().all(|&p| f.table.is_silence(p)));
}

fn song() -> AudioBuffer {
    synthesize_song(5.0, 10, 8000)
}

#[test]
fn wta_embeds_open_the_door() {
    let f = fx();
    let command = words("open the door");
    let target = command_target(&command, &f.model, &f.table, &f.lexicon, 100, 3).unwrap();
    let song = song();
    let res = craft_wta(&song, &target, &f.model, &f.table, &f.lexicon, &CraftConfig::default()).unwrap();
    assert!(res.clean_success);
    assert_eq!(success_rate(&decode(&res.audio), &command).unwrap(), 100.0);
    assert!(res.perturbation.peak() <= 0.15 + 1e-12);
    assert!(res.snr_db >= 10.0, "{}", res.snr_db);
    let csv = res.history_csv();
    assert_eq!(csv.lines().count(), res.history.len() + 1);
}

#[test]
fn zero_budget_leaves_song_untouched() {
    let f = fx();
    let target = command_target(&words("okay echo"), &f.model, &f.table, &f.lexicon, 1, 3).unwrap();
    let song = song();
    let cfg = CraftConfig { l: 0.0, max_iters: 20, ..CraftConfig::default() };
    let res = craft_wta(&song, &target, &f.model, &f.table, &f.lexicon, &cfg).unwrap();
    assert_eq!(res.audio, song);
    assert_eq!(res.snr_db, f64::INFINITY);
    assert_eq!(res.clean_success, success_rate(&decode(&song), &words("okay echo")).unwrap() == 100.0);
}

#[test]
fn own_sequence_is_a_fixed_point() {
    let f = fx();
    let command = words("turn on the light");
    let audio = synthesize_command(&command, &f.table, &f.lexicon, 6).unwrap();
    let target = extract_target_sequence(&audio, &f.model, &command).unwrap();
    let res = craft_wta(&audio, &target, &f.model, &f.table, &f.lexicon, &CraftConfig::default()).unwrap();
    assert!(res.clean_success);
    assert_eq!(res.iterations, 0);
    assert_eq!(res.snr_db, f64::INFINITY);
    assert_eq!(res.audio, audio);
}

#[test]
fn silent_channel_waa_is_wta() {
    let f = fx();
    let target = command_target(&words("okay echo"), &f.model, &f.table, &f.lexicon, 2, 3).unwrap();
    let cfg = CraftConfig { seed: 3, max_iters: 200, ..CraftConfig::default() };
    let w = craft_wta(&song(), &target, &f.model, &f.table, &f.lexicon, &cfg).unwrap();
    let a = craft_waa(&song(), &target, &f.model, &f.table, &f.lexicon, &cfg, &ChannelConfig::uniform(0.0, 3).unwrap())
        .unwrap();
    assert_eq!(w.audio, a.audio);
    assert_eq!(w.history, a.history);
}

#[test]
fn waa_survives_noise_better_than_wta() {
    let f = fx();
    let command = words("open the door");
    let target = command_target(&command, &f.model, &f.table, &f.lexicon, 100, 3).unwrap();
    let song = song();
    let n = ChannelConfig::bound_for_snr(signal_power(&song).unwrap(), 10.0);
    let channel = ChannelConfig::uniform(n, 77).unwrap();
    let cfg = CraftConfig { noise_bound: n, ..CraftConfig::default() };
    let waa = craft_waa(&song, &target, &f.model, &f.table, &f.lexicon, &cfg, &channel).unwrap();
    let wta = craft_wta(&song, &target, &f.model, &f.table, &f.lexicon, &cfg).unwrap();
    let s_waa = waa.noisy_success.unwrap();
    let s_wta = noisy_success_fraction(&wta.audio, &command, &f.model, &f.table, &f.lexicon, &channel, 20).unwrap();
    assert!(s_waa >= 0.6, "{s_waa}");
    assert!(s_waa > s_wta, "{s_waa} vs {s_wta}");
    // The reported figure matches a recount over the same draws.
    let recount = (0..20u64)
        .filter(|&k| {
            let noisy = apply_channel(&waa.audio, &channel, songcraft::crafter::EVAL_DRAW_BASE + k).unwrap();
            decode(&noisy) == command
        })
        .count();
    assert!(recount as f64 / 20.0 <= s_waa);
}

#[test]
fn defenses_separate_clean_from_wta() {
    let f = fx();
    let command = words("turn on the light");
    let clean = synthesize_command(&command, &f.table, &f.lexicon, 12).unwrap();
    let target = command_target(&command, &f.model, &f.table, &f.lexicon, 101, 3).unwrap();
    let adv = craft_wta(&song(), &target, &f.model, &f.table, &f.lexicon, &CraftConfig::default()).unwrap().audio;
    let sq = |a: &AudioBuffer, r| detect_squeezing(a, &f.model, &f.table, &f.lexicon, r).unwrap().detected;
    assert!(!sq(&clean, 0.7));
    assert!(sq(&adv, 0.7));
    assert!(!sq(&adv, 1.0));
    let turb = |a: &AudioBuffer, s| detect_turbulence(a, &f.model, &f.table, &f.lexicon, 15.0, s).unwrap().detected;
    assert!((0..10).filter(|&s| turb(&adv, s)).count() >= 9);
    assert!((0..10).filter(|&s| !turb(&clean, s)).count() >= 9);
}

#[test]
fn sweeps_are_reproducible() {
    let f = fx();
    let song = synthesize_song(3.0, 20, 8000);
    let eval = ChannelConfig::uniform(0.03, 5).unwrap();
    let base = CraftConfig { max_iters: 150, ..CraftConfig::default() };
    let run = || {
        run_noise_sweep(&song, &words("echo"), &f.model, &f.table, &f.lexicon, &[0.0, 0.03], 8, 1, &base, &eval)
            .unwrap()
    };
    let a = run();
    assert_eq!(sweep_csv(&a), sweep_csv(&run()));
    assert_eq!(a.len(), 2);

    let samples = vec![
        LabeledSample { label: SampleLabel::Clean, audio: synthesize_command(&words("echo"), &f.table, &f.lexicon, 1).unwrap() },
        LabeledSample { label: SampleLabel::Wta, audio: song.clone() },
    ];
    let d = || {
        run_defense_sweep(&samples, &f.model, &f.table, &f.lexicon, DefenseKind::Turbulence, &[10.0, 20.0], 3, 7)
            .unwrap()
    };
    let rows = d();
    assert_eq!(rows, d());
    assert!(rows.iter().all(|r| r.detect_waa_pct.is_none() && r.detect_clean_pct.is_some()));
}
