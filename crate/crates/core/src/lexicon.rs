//! Phoneme / HMM-state / pdf-id / transition-id bookkeeping, the closed toy
//! lexicon, and command target sequences.
//!
//! Text format, one record per line, `#` starts a comment:
//!
//! ```text
//! # phoneme state pdf_id tid_selfloop tid_forward f1_hz f2_hz
//! eh 0 0 1 2 530 1840
//! sil 0 36 73 74 0 0
//! # word: phoneme phoneme ...
//! echo: eh k ow
//! ```
//!
//! Table rows and lexicon rows may share one file; each parser skips the
//! other kind of line.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::acoustic::corpus::{render_words, RenderParams};
use crate::acoustic::AcousticModel;
use crate::audio::AudioBuffer;
use crate::decoder::most_likely_pdf_sequence;
use crate::error::{Error, Result};

pub type PdfId = u32;
pub type TransitionId = u32;

pub const SILENCE: &str = "sil";
pub const STATES_PER_PHONEME: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    SelfLoop,
    /// Transition out of the owning state into HMM state `to`.
    Forward { to: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub id: TransitionId,
    pub kind: TransitionKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Formants {
    pub f1_hz: f64,
    pub f2_hz: f64,
}

/// One `(phoneme, HMM state)` row of the table.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub phoneme: String,
    pub state: u8,
    pub pdf_id: PdfId,
    pub transitions: Vec<Transition>,
    pub formants: Formants,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhonemeTable {
    entries: Vec<StateEntry>,
    by_pdf: HashMap<PdfId, usize>,
    by_tid: HashMap<TransitionId, usize>,
}

/// The twelve toy phonemes with their two formant frequencies (Hz).
/// Everything stays under 2.2 kHz (with jitter) so the inventory survives
/// decimation to 5.6 kHz, whose anti-alias filter starts rolling off
/// around 2.35 kHz.
const TOY_PHONEMES: [(&str, f64, f64); 12] = [
    ("eh", 530.0, 1840.0),
    ("k", 300.0, 2150.0),
    ("ow", 450.0, 900.0),
    ("p", 250.0, 1250.0),
    ("ah", 720.0, 1200.0),
    ("n", 280.0, 1600.0),
    ("dh", 400.0, 1380.0),
    ("d", 350.0, 1950.0),
    ("er", 600.0, 1550.0),
    ("t", 650.0, 2080.0),
    ("l", 250.0, 800.0),
    ("ay", 800.0, 1700.0),
];

const TOY_WORDS: [(&str, &str); 10] = [
    ("echo", "eh k ow"),
    ("open", "ow p ah n"),
    ("the", "dh ah"),
    ("door", "d ow er"),
    ("turn", "t er n"),
    ("on", "ah n"),
    ("light", "l ay t"),
    ("okay", "ow k eh"),
    ("night", "n ay t"),
    ("ten", "t eh n"),
];

impl PhonemeTable {
    pub fn new(entries: Vec<StateEntry>) -> Result<Self> {
        let mut by_pdf = HashMap::new();
        let mut by_tid = HashMap::new();
        let mut seen_state = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_pdf.insert(e.pdf_id, i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate pdf-id {}", e.pdf_id)));
            }
            if seen_state.insert((e.phoneme.clone(), e.state), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate entry for {} state {}",
                    e.phoneme, e.state
                )));
            }
            for t in &e.transitions {
                if by_tid.insert(t.id, i).is_some() {
                    return Err(Error::InvalidConfig(format!("duplicate transition-id {}", t.id)));
                }
            }
        }
        Ok(Self { entries, by_pdf, by_tid })
    }

    /// 12 phonemes × 3 states plus a single-state silence: 37 pdf-ids.
    /// pdf-id of `(p, s)` is `3p + s`; silence is 36. Each state owns a
    /// self-loop id `2·pdf + 1` and a forward id `2·pdf + 2`.
    pub fn toy() -> Self {
        let mut entries = Vec::with_capacity(37);
        let mk = |phoneme: &str, state: u8, pdf: PdfId, f1: f64, f2: f64| StateEntry {
            phoneme: phoneme.to_string(),
            state,
            pdf_id: pdf,
            transitions: vec![
                Transition { id: 2 * pdf + 1, kind: TransitionKind::SelfLoop },
                Transition { id: 2 * pdf + 2, kind: TransitionKind::Forward { to: state + 1 } },
            ],
            formants: Formants { f1_hz: f1, f2_hz: f2 },
        };
        for (p, (label, f1, f2)) in TOY_PHONEMES.iter().enumerate() {
            for s in 0..STATES_PER_PHONEME {
                entries.push(mk(label, s, 3 * p as PdfId + s as PdfId, *f1, *f2));
            }
        }
        entries.push(mk(SILENCE, 0, 36, 0.0, 0.0));
        Self::new(entries).expect("toy table is consistent")
    }

    /// The six rows printed for the "echo" example of a large recognizer
    /// (position-dependent phonemes, first two HMM states each).
    pub fn aspire_excerpt() -> Self {
        let fwd = |id, to| Transition { id, kind: TransitionKind::Forward { to } };
        let selfloop = |id| Transition { id, kind: TransitionKind::SelfLoop };
        let zero = Formants { f1_hz: 0.0, f2_hz: 0.0 };
        let row = |phoneme: &str, state, pdf_id, transitions| StateEntry {
            phoneme: phoneme.to_string(),
            state,
            pdf_id,
            transitions,
            formants: zero,
        };
        Self::new(vec![
            row("eh_B", 0, 6383, vec![fwd(15985, 1), fwd(15986, 2)]),
            row("eh_B", 1, 5760, vec![selfloop(16189), fwd(16190, 2)]),
            row("k_I", 0, 6673, vec![fwd(31223, 1), fwd(31224, 2)]),
            row("k_I", 1, 3787, vec![selfloop(31379), fwd(31380, 2)]),
            row("ow_E", 0, 5316, vec![fwd(39643, 1), fwd(9644, 2)]),
            row("ow_E", 1, 8335, vec![selfloop(39897), fwd(39898, 2)]),
        ])
        .expect("excerpt is consistent")
    }

    pub fn entries(&self) -> &[StateEntry] {
        &self.entries
    }

    pub fn num_pdfs(&self) -> usize {
        self.entries.len()
    }

    pub fn transition_to_pdf(&self, tid: TransitionId) -> Result<PdfId> {
        self.by_tid
            .get(&tid)
            .map(|&i| self.entries[i].pdf_id)
            .ok_or(Error::UnknownTransition(tid))
    }

    /// Transition-ids owned by `pdf`, in table order.
    pub fn pdf_to_transitions(&self, pdf: PdfId) -> Vec<TransitionId> {
        self.entry(pdf).map(|e| e.transitions.iter().map(|t| t.id).collect()).unwrap_or_default()
    }

    pub fn entry(&self, pdf: PdfId) -> Option<&StateEntry> {
        self.by_pdf.get(&pdf).map(|&i| &self.entries[i])
    }

    pub fn is_silence(&self, pdf: PdfId) -> bool {
        self.entry(pdf).is_some_and(|e| e.phoneme == SILENCE)
    }

    pub fn silence_pdf(&self) -> Option<PdfId> {
        self.entries.iter().find(|e| e.phoneme == SILENCE).map(|e| e.pdf_id)
    }

    pub fn pdf_for(&self, phoneme: &str, state: u8) -> Option<PdfId> {
        self.entries
            .iter()
            .find(|e| e.phoneme == phoneme && e.state == state)
            .map(|e| e.pdf_id)
    }

    pub fn formants(&self, phoneme: &str) -> Option<Formants> {
        self.entries.iter().find(|e| e.phoneme == phoneme).map(|e| e.formants)
    }

    pub fn phonemes(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if e.phoneme != SILENCE && !out.contains(&e.phoneme.as_str()) {
                out.push(&e.phoneme);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            if line.is_empty() || line.contains(':') {
                continue;
            }
            let err = |msg: &str| Error::Parse { line: lineno + 1, msg: msg.to_string() };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(err("expected 7 fields: phoneme state pdf tid_self tid_fwd f1 f2"));
            }
            let num = |s: &str| s.parse::<u32>().map_err(|_| err(&format!("bad integer {s:?}")));
            let hz = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad frequency {s:?}")));
            let state = num(fields[1])?;
            if state >= STATES_PER_PHONEME as u32 {
                return Err(err("HMM state must be 0, 1 or 2"));
            }
            let state = state as u8;
            entries.push(StateEntry {
                phoneme: fields[0].to_string(),
                state,
                pdf_id: num(fields[2])?,
                transitions: vec![
                    Transition { id: num(fields[3])?, kind: TransitionKind::SelfLoop },
                    Transition { id: num(fields[4])?, kind: TransitionKind::Forward { to: state + 1 } },
                ],
                formants: Formants { f1_hz: hz(fields[5])?, f2_hz: hz(fields[6])? },
            });
        }
        Self::new(entries)
    }

    /// Inverse of [`PhonemeTable::parse`] for tables whose rows each carry
    /// one self-loop and one forward transition.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# phoneme state pdf_id tid_selfloop tid_forward f1_hz f2_hz\n");
        for e in &self.entries {
            let find = |want_self: bool| {
                e.transitions
                    .iter()
                    .find(|t| (t.kind == TransitionKind::SelfLoop) == want_self)
                    .map_or(0, |t| t.id)
            };
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                e.phoneme,
                e.state,
                e.pdf_id,
                find(true),
                find(false),
                e.formants.f1_hz,
                e.formants.f2_hz
            );
        }
        out
    }
}

fn strip_comment(line: &str) -> &str {
    line.split('#').next().unwrap_or("").trim()
}

/// Closed word → phoneme-string dictionary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    words: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn new(words: BTreeMap<String, Vec<String>>, table: &PhonemeTable) -> Result<Self> {
        let known = table.phonemes();
        for (w, phones) in &words {
            if phones.is_empty() {
                return Err(Error::InvalidConfig(format!("word {w:?} has no phonemes")));
            }
            if let Some(p) = phones.iter().find(|p| !known.contains(&p.as_str())) {
                return Err(Error::InvalidConfig(format!("word {w:?} uses unknown phoneme {p:?}")));
            }
        }
        Ok(Self { words })
    }

    pub fn toy(table: &PhonemeTable) -> Self {
        let words = TOY_WORDS
            .iter()
            .map(|(w, p)| (w.to_string(), p.split_whitespace().map(String::from).collect()))
            .collect();
        Self::new(words, table).expect("toy lexicon matches toy table")
    }

    pub fn pronunciation(&self, word: &str) -> Result<&[String]> {
        self.words
            .get(word)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))
    }

    pub fn words(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.words.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn vocabulary(&self) -> Vec<&str> {
        self.words.keys().map(String::as_str).collect()
    }

    pub fn parse(text: &str, table: &PhonemeTable) -> Result<Self> {
        let mut words = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = strip_comment(raw);
            let Some((word, phones)) = line.split_once(':') else { continue };
            let word = word.trim();
            if word.is_empty() || word.contains(char::is_whitespace) {
                return Err(Error::Parse { line: lineno + 1, msg: "bad word".into() });
            }
            let phones: Vec<String> = phones.split_whitespace().map(String::from).collect();
            words.insert(word.to_string(), phones);
        }
        Self::new(words, table)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# word: phoneme phoneme ...\n");
        for (w, p) in &self.words {
            let _ = writeln!(out, "{w}: {}", p.join(" "));
        }
        out
    }
}

/// A command's per-frame pdf-id target together with the words it encodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub pdfs: Vec<PdfId>,
    pub command: Vec<String>,
}

impl TargetSequence {
    pub fn len(&self) -> usize {
        self.pdfs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pdfs.is_empty()
    }
}

/// Maximal runs of identical values as `(value, run_length)`.
pub fn runs<T: PartialEq + Copy>(seq: &[T]) -> Vec<(T, usize)> {
    let mut out: Vec<(T, usize)> = Vec::new();
    for &v in seq {
        match out.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

/// Caps every run of identical pdf-ids at `min_repeat` frames.
pub fn reduce_frames(b: &TargetSequence, min_repeat: usize) -> Result<TargetSequence> {
    if min_repeat < 3 {
        return Err(Error::OutOfRange(format!("min_repeat {min_repeat} < 3")));
    }
    let pdfs = runs(&b.pdfs)
        .into_iter()
        .flat_map(|(pdf, n)| std::iter::repeat(pdf).take(n.min(min_repeat)))
        .collect();
    Ok(TargetSequence { pdfs, command: b.command.clone() })
}

/// Phoneme string of a pdf sequence: frames mapped to phoneme labels,
/// consecutive repeats merged, silence removed. Unknown ids are skipped.
pub fn phoneme_collapse(pdfs: &[PdfId], table: &PhonemeTable) -> Vec<String> {
    let labels: Vec<&str> =
        pdfs.iter().filter_map(|&p| table.entry(p).map(|e| e.phoneme.as_str())).collect();
    runs(&labels)
        .into_iter()
        .filter(|(l, _)| *l != SILENCE)
        .map(|(l, _)| l.to_string())
        .collect()
}

/// Toy text-to-speech: renders the words with the corpus generator.
pub fn synthesize_command(
    words: &[String],
    table: &PhonemeTable,
    lexicon: &Lexicon,
    seed: u64,
) -> Result<AudioBuffer> {
    if words.is_empty() {
        return Err(Error::EmptyCommand);
    }
    let rendered = render_words(words, table, lexicon, &RenderParams::default(), seed)?;
    Ok(rendered.audio)
}

/// `b_i = argmax_j a_{i,j}` over the command audio.
pub fn extract_target_sequence(
    command_audio: &AudioBuffer,
    model: &AcousticModel,
    command: &[String],
) -> Result<TargetSequence> {
    let posteriors = model.forward(command_audio)?;
    Ok(TargetSequence {
        pdfs: most_likely_pdf_sequence(&posteriors)?,
        command: command.to_vec(),
    })
}
