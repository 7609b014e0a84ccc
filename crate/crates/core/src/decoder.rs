//! Greedy decoding of posterior matrices: per-frame argmax, run collapse,
//! HMM state-order check, longest-match word lookup.

use std::fmt::Write as _;

use crate::acoustic::{AcousticModel, PosteriorMatrix};
use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::lexicon::{runs, Lexicon, PdfId, PhonemeTable, STATES_PER_PHONEME};

/// Runs shorter than this many frames are treated as glitches.
pub const DEFAULT_MIN_RUN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub pdfs: Vec<PdfId>,
    pub phonemes: Vec<String>,
    pub words: Vec<String>,
    /// Per target word: whether it was matched. Set by [`DecodeResult::scored`].
    pub matches: Option<Vec<bool>>,
}

impl DecodeResult {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }

    pub fn scored(mut self, target: &[String]) -> Result<Self> {
        self.matches = Some(word_matches(&self.words, target)?);
        Ok(self)
    }

    /// Line-oriented report: `key: value` lines, stable across runs.
    pub fn report(&self, target: Option<&[String]>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "words: {}", self.words.join(" "));
        let _ = writeln!(out, "phonemes: {}", self.phonemes.join(" "));
        let _ = writeln!(out, "frames: {}", self.pdfs.len());
        if let (Some(flags), Some(target)) = (&self.matches, target) {
            let cells: Vec<String> =
                target.iter().zip(flags).map(|(w, &m)| format!("{w}={}", u8::from(m))).collect();
            let _ = writeln!(out, "matches: {}", cells.join(" "));
            let hit = flags.iter().filter(|&&m| m).count();
            let _ = writeln!(out, "success_pct: {}", 100.0 * hit as f64 / target.len() as f64);
        }
        out
    }
}

/// `m_i = argmax_j a_ij`, ties toward the lower id.
pub fn most_likely_pdf_sequence(posteriors: &PosteriorMatrix) -> Result<Vec<PdfId>> {
    if posteriors.num_frames() == 0 || posteriors.num_pdfs() == 0 {
        return Err(Error::EmptyMatrix);
    }
    // Logits order the same way as probabilities and do not saturate.
    Ok(posteriors.logits().iter_rows().map(|r| argmax(r) as PdfId).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn decode_text(
    audio: &AudioBuffer,
    model: &AcousticModel,
    table: &PhonemeTable,
    lexicon: &Lexicon,
) -> Result<DecodeResult> {
    let posteriors = model.forward(audio)?;
    decode_posteriors(&posteriors, table, lexicon)
}

pub fn decode_posteriors(
    posteriors: &PosteriorMatrix,
    table: &PhonemeTable,
    lexicon: &Lexicon,
) -> Result<DecodeResult> {
    let m = most_likely_pdf_sequence(posteriors)?;
    Ok(decode_pdfs(&m, table, lexicon, DEFAULT_MIN_RUN))
}

/// Decodes a frame-level pdf-id sequence.
pub fn decode_pdfs(pdfs: &[PdfId], table: &PhonemeTable, lexicon: &Lexicon, min_run: usize) -> DecodeResult {
    let kept: Vec<PdfId> = runs(pdfs)
        .into_iter()
        .filter(|&(_, n)| n >= min_run)
        .map(|(p, _)| p)
        .collect();
    let merged: Vec<PdfId> = runs(&kept).into_iter().map(|(p, _)| p).collect();

    // Phonemes per silence-delimited segment.
    let mut segments: Vec<Vec<String>> = vec![Vec::new()];
    let mut partial: Option<(&str, u8)> = None;
    for pdf in merged {
        let Some(entry) = table.entry(pdf) else {
            partial = None;
            continue;
        };
        if table.is_silence(pdf) {
            partial = None;
            if !segments.last().expect("non-empty").is_empty() {
                segments.push(Vec::new());
            }
            continue;
        }
        let ph = entry.phoneme.as_str();
        partial = match partial {
            Some((p, next)) if p == ph && entry.state == next => Some((p, next + 1)),
            _ if entry.state == 0 => Some((ph, 1)),
            _ => None,
        };
        if let Some((p, STATES_PER_PHONEME)) = partial {
            segments.last_mut().expect("non-empty").push(p.to_string());
            partial = None;
        }
    }

    let mut words = Vec::new();
    for seg in &segments {
        words.extend(greedy_words(seg, lexicon));
    }
    DecodeResult { pdfs: pdfs.to_vec(), phonemes: segments.concat(), words, matches: None }
}

/// Longest pronunciation match at each position; unmatched phonemes dropped.
fn greedy_words(phonemes: &[String], lexicon: &Lexicon) -> Vec<String> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < phonemes.len() {
        let best = lexicon
            .words()
            .filter(|(_, pron)| !pron.is_empty() && phonemes[i..].starts_with(pron))
            .max_by_key(|(_, pron)| pron.len());
        match best {
            Some((w, pron)) => {
                out.push(w.to_string());
                i += pron.len();
            }
            None => i += 1,
        }
    }
    out
}

/// Target-word match flags from an order-preserving LCS alignment.
pub fn word_matches(decoded: &[String], target: &[String]) -> Result<Vec<bool>> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let (n, m) = (decoded.len(), target.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            dp[i][j] = if decoded[i] == target[j] {
                dp[i + 1][j + 1] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let mut flags = vec![false; m];
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if decoded[i] == target[j] {
            flags[j] = true;
            i += 1;
            j += 1;
        } else if dp[i + 1][j] >= dp[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    Ok(flags)
}

/// Percentage of target words matched, in `[0, 100]`.
pub fn success_rate(decoded: &[String], target: &[String]) -> Result<f64> {
    let flags = word_matches(decoded, target)?;
    Ok(100.0 * flags.iter().filter(|&&m| m).count() as f64 / target.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn frames_for(text: &str, table: &PhonemeTable, lex: &Lexicon, per_state: usize) -> Vec<PdfId> {
        let sil = table.silence_pdf().unwrap();
        let mut out = vec![sil; 5];
        for w in words(text) {
            for ph in lex.pronunciation(&w).unwrap() {
                for s in 0..3 {
                    out.extend(std::iter::repeat(table.pdf_for(ph, s).unwrap()).take(per_state));
                }
            }
            out.extend([sil; 4]);
        }
        out
    }

    #[test]
    fn argmax_examples() {
        let a = PosteriorMatrix::from_probs(&Matrix::from_rows(&[vec![0.1, 0.7, 0.2]]));
        assert_eq!(most_likely_pdf_sequence(&a).unwrap(), vec![1]);
        let b = PosteriorMatrix::from_probs(&Matrix::from_rows(&[vec![0.5, 0.5]]));
        assert_eq!(most_likely_pdf_sequence(&b).unwrap(), vec![0]);
        let e = PosteriorMatrix::from_probs(&Matrix::zeros(0, 3));
        assert!(matches!(most_likely_pdf_sequence(&e), Err(Error::EmptyMatrix)));
    }

    #[test]
    fn decodes_clean_frames() {
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let r = decode_pdfs(&frames_for("open the door", &t, &lex, 4), &t, &lex, 3);
        assert_eq!(r.words, words("open the door"));
        assert_eq!(r.phonemes, words("ow p ah n dh ah d ow er"));
    }

    #[test]
    fn short_runs_are_ignored() {
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let mut f = frames_for("echo", &t, &lex, 5);
        // Two-frame glitch inside a state run.
        f.splice(8..8, [30, 30]);
        assert_eq!(decode_pdfs(&f, &t, &lex, 3).words, words("echo"));
        let thin = frames_for("echo", &t, &lex, 2);
        assert!(decode_pdfs(&thin, &t, &lex, 3).words.is_empty());
    }

    #[test]
    fn out_of_order_states_reject_phoneme() {
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let sil = t.silence_pdf().unwrap();
        let mut f = vec![sil; 3];
        for (ph, s) in [("dh", 0), ("dh", 2), ("dh", 1), ("ah", 0), ("ah", 1), ("ah", 2)] {
            f.extend([t.pdf_for(ph, s).unwrap(); 3]);
        }
        let r = decode_pdfs(&f, &t, &lex, 3);
        assert_eq!(r.phonemes, words("ah"));
        assert!(r.words.is_empty());
    }

    #[test]
    fn silence_only_is_empty() {
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let r = decode_pdfs(&[36; 50], &t, &lex, 3);
        assert!(r.words.is_empty() && r.phonemes.is_empty());
    }

    #[test]
    fn success_rate_examples() {
        let target = words("open the door");
        assert_eq!(success_rate(&target, &target).unwrap(), 100.0);
        // One character off counts as a miss: 2 of 3 words.
        let r = success_rate(&words("open the floor"), &target).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-12);
        let r = success_rate(&words("turn on the night"), &words("turn on the light")).unwrap();
        assert_eq!(r, 75.0);
        assert_eq!(success_rate(&[], &target).unwrap(), 0.0);
        assert!(matches!(success_rate(&target, &[]), Err(Error::EmptyTarget)));
    }

    #[test]
    fn lcs_handles_insertions() {
        let f = word_matches(&words("the open x the door"), &words("open the door")).unwrap();
        assert_eq!(f, vec![true, true, true]);
        let f = word_matches(&words("door the open"), &words("open the door")).unwrap();
        assert_eq!(f.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn report_lines() {
        let t = PhonemeTable::toy();
        let lex = Lexicon::toy(&t);
        let target = words("open the door");
        let r = decode_pdfs(&frames_for("open the", &t, &lex, 3), &t, &lex, 3).scored(&target).unwrap();
        let rep = r.report(Some(&target));
        assert!(rep.contains("words: open the\n"));
        assert!(rep.contains("matches: open=1 the=1 door=0\n"));
    }

    fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
        // Exhaustive over subsets of `b`.
        let mut best = 0;
        for mask in 0u32..(1 << b.len()) {
            let sub: Vec<u8> = (0..b.len()).filter(|i| mask >> i & 1 == 1).map(|i| b[i]).collect();
            let mut it = a.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    proptest! {
        #[test]
        fn argmax_matches_scan(rows in 1usize..20, cols in 1usize..40, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Coarse values so ties occur.
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(0..5) as f64).collect();
            let m = Matrix::from_vec(rows, cols, data.clone());
            let got = most_likely_pdf_sequence(&PosteriorMatrix::from_logits(m)).unwrap();
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let first = row.iter().position(|&v| v == max).unwrap();
                prop_assert_eq!(got[r] as usize, first);
            }
        }

        #[test]
        fn success_rate_bounds(a in proptest::collection::vec(0u8..4, 0..8), b in proptest::collection::vec(0u8..4, 1..8)) {
            let aw: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            let bw: Vec<String> = b.iter().map(|x| x.to_string()).collect();
            let r = success_rate(&aw, &bw).unwrap();
            prop_assert!((0.0..=100.0).contains(&r));
            prop_assert_eq!(r == 100.0, brute_lcs(&a, &b) == b.len());
            let hits = word_matches(&aw, &bw).unwrap().iter().filter(|&&m| m).count();
            prop_assert_eq!(hits, brute_lcs(&a, &b));
        }

        #[test]
        fn one_hot_target_inverts(idx in proptest::collection::vec(0usize..10, 1..4), per_state in 3usize..9) {
            let t = PhonemeTable::toy();
            let lex = Lexicon::toy(&t);
            let vocab = lex.vocabulary();
            let text: Vec<&str> = idx.iter().map(|&i| vocab[i]).collect();
            let b = frames_for(&text.join(" "), &t, &lex, per_state);
            let reduced = crate::lexicon::reduce_frames(
                &crate::lexicon::TargetSequence { pdfs: b, command: vec![] }, 3).unwrap();
            let k = t.num_pdfs();
            let mut onehot = Matrix::zeros(reduced.len(), k);
            for (r, &p) in reduced.pdfs.iter().enumerate() {
                onehot.set(r, p as usize, 1.0);
            }
            let posts = PosteriorMatrix::from_probs(&onehot);
            let r = decode_posteriors(&posts, &t, &lex).unwrap();
            prop_assert_eq!(r.words.join(" "), text.join(" "));
        }
    }
}
