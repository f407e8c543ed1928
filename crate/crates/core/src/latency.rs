//! Word-level latency: Mean Alignment Delay and Mean End Delay.
//!
//! Only correctly recognized words count. Hypothesis and reference words are
//! paired by a unit-cost Levenshtein alignment of the word strings; pairs
//! where the strings agree are the matches.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TimedWord {
    pub word: String,
    /// Seconds.
    pub time: f64,
}

impl TimedWord {
    pub fn new(word: impl Into<String>, time: f64) -> Self {
        Self {
            word: word.into(),
            time,
        }
    }
}

/// One utterance: hypothesis and reference sequences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UtterancePair {
    pub hyp: Vec<TimedWord>,
    pub reference: Vec<TimedWord>,
}

impl UtterancePair {
    pub fn new(hyp: Vec<TimedWord>, reference: Vec<TimedWord>) -> Self {
        Self { hyp, reference }
    }
}

/// Which utterances contribute to MED.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EndWordPolicy {
    /// Only utterances whose last hypothesis and reference words are matched.
    #[default]
    MatchedOnly,
    /// Every utterance with a non-empty hypothesis and reference.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub mad: f64,
    pub med: f64,
    /// Total matched words over all utterances.
    pub matched_pairs: usize,
    pub matches: Vec<Vec<(usize, usize)>>,
    /// Utterances that entered the MED average.
    pub med_utterances: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Pairs `(hyp index, ref index)` whose words are equal on a minimum-edit
/// alignment. Ties prefer match, then substitution, deletion (reference word
/// dropped), insertion (extra hypothesis word), traced from the start so the
/// earliest hypothesis index wins.
pub fn match_words(hyp: &[TimedWord], reference: &[TimedWord]) -> Vec<(usize, usize)> {
    let (n, m) = (hyp.len(), reference.len());
    // cost[i][j]: edit distance between hyp[i..] and reference[j..]
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..=n).rev() {
        for j in (0..=m).rev() {
            cost[i][j] = if i == n {
                m - j
            } else if j == m {
                n - i
            } else {
                let diag = cost[i + 1][j + 1] + usize::from(hyp[i].word != reference[j].word);
                diag.min(cost[i][j + 1] + 1).min(cost[i + 1][j] + 1)
            };
        }
    }

    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        let here = cost[i][j];
        let step = [Step::Match, Step::Substitute, Step::Delete, Step::Insert]
            .into_iter()
            .find(|s| match s {
                Step::Match => {
                    i < n && j < m && hyp[i].word == reference[j].word && cost[i + 1][j + 1] == here
                }
                Step::Substitute => i < n && j < m && cost[i + 1][j + 1] + 1 == here,
                Step::Delete => j < m && cost[i][j + 1] + 1 == here,
                Step::Insert => i < n && cost[i + 1][j] + 1 == here,
            })
            .expect("some step realizes the optimal cost");
        match step {
            Step::Match => {
                pairs.push((i, j));
                i += 1;
                j += 1;
            }
            Step::Substitute => {
                i += 1;
                j += 1;
            }
            Step::Delete => j += 1,
            Step::Insert => i += 1,
        }
    }
    pairs
}

/// Pooled mean of `hyp.time - ref.time` over every matched word.
pub fn mad(utterances: &[UtterancePair]) -> Result<f64> {
    let (sum, count) = utterances.iter().fold((0.0, 0usize), |(s, c), utt| {
        let pairs = match_words(&utt.hyp, &utt.reference);
        let d: f64 = pairs
            .iter()
            .map(|&(h, r)| utt.hyp[h].time - utt.reference[r].time)
            .sum();
        (s + d, c + pairs.len())
    });
    if count == 0 {
        return Err(Error::NoData("no matched words in any utterance".into()));
    }
    Ok(sum / count as f64)
}

fn end_delay(utt: &UtterancePair, policy: EndWordPolicy) -> Option<f64> {
    let last_h = utt.hyp.len().checked_sub(1)?;
    let last_r = utt.reference.len().checked_sub(1)?;
    if policy == EndWordPolicy::MatchedOnly
        && !match_words(&utt.hyp, &utt.reference).contains(&(last_h, last_r))
    {
        return None;
    }
    Some(utt.hyp[last_h].time - utt.reference[last_r].time)
}

/// Mean over utterances of the last-word time difference.
pub fn med(utterances: &[UtterancePair], policy: EndWordPolicy) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::NoData("empty utterance list".into()));
    }
    let ends: Vec<f64> = utterances
        .iter()
        .filter_map(|u| end_delay(u, policy))
        .collect();
    if ends.is_empty() {
        return Err(Error::NoData("no utterance has a usable last word".into()));
    }
    Ok(ends.iter().sum::<f64>() / ends.len() as f64)
}

pub fn latency_report(
    utterances: &[UtterancePair],
    policy: EndWordPolicy,
) -> Result<LatencyReport> {
    let matches: Vec<_> = utterances
        .iter()
        .map(|u| match_words(&u.hyp, &u.reference))
        .collect();
    let matched_pairs = matches.iter().map(Vec::len).sum();
    let med_utterances = utterances
        .iter()
        .filter(|u| end_delay(u, policy).is_some())
        .count();
    Ok(LatencyReport {
        mad: mad(utterances)?,
        med: med(utterances, policy)?,
        matched_pairs,
        matches,
        med_utterances,
    })
}

/// Parses `utt_id<TAB>word:time word:time ...` records. Blank lines and
/// lines starting with `#` are skipped. The time is everything after the
/// last `:` of each item.
pub fn parse_timestamps(text: &str) -> Result<Vec<(String, Vec<TimedWord>)>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
        let id = id.trim();
        if id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                detail: "missing utterance id".into(),
            });
        }
        let mut words = Vec::new();
        for item in rest.split_whitespace() {
            let (word, time) = item.rsplit_once(':').ok_or_else(|| Error::Parse {
                line: line_no,
                detail: format!("expected word:time, got {item:?}"),
            })?;
            let time: f64 = time.parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("bad time in {item:?}"),
            })?;
            if word.is_empty() || !time.is_finite() || time < 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("invalid entry {item:?}"),
                });
            }
            words.push(TimedWord::new(word, time));
        }
        out.push((id.to_string(), words));
    }
    Ok(out)
}

/// Pairs hypothesis records with reference records by utterance id, in
/// reference order. A reference without a hypothesis gets an empty one.
pub fn pair_by_id(
    hyps: Vec<(String, Vec<TimedWord>)>,
    refs: Vec<(String, Vec<TimedWord>)>,
) -> Vec<(String, UtterancePair)> {
    let mut by_id: HashMap<String, Vec<TimedWord>> = hyps.into_iter().collect();
    refs.into_iter()
        .map(|(id, reference)| {
            let hyp = by_id.remove(&id).unwrap_or_default();
            (id, UtterancePair::new(hyp, reference))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn words(pairs: &[(&str, f64)]) -> Vec<TimedWord> {
        pairs.iter().map(|&(w, t)| TimedWord::new(w, t)).collect()
    }

    fn plain(text: &str) -> Vec<TimedWord> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| TimedWord::new(w, i as f64))
            .collect()
    }

    #[test]
    fn identical_sequences_match_everywhere() {
        let a = plain("the cat sat on the mat");
        assert_eq!(
            match_words(&a, &a),
            (0..6).map(|i| (i, i)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn substitution_is_not_a_match() {
        assert_eq!(
            match_words(&plain("a b c"), &plain("a x c")),
            vec![(0, 0), (2, 2)]
        );
    }

    #[test]
    fn duplicate_hyp_word_matches_earliest() {
        assert_eq!(match_words(&plain("a a"), &plain("a")), vec![(0, 0)]);
    }

    #[test]
    fn empty_sides() {
        assert!(match_words(&[], &plain("a b")).is_empty());
        assert!(match_words(&plain("a b"), &[]).is_empty());
    }

    #[test]
    fn mad_hand_cases() {
        let one = UtterancePair::new(
            words(&[("a", 0.5), ("b", 1.2)]),
            words(&[("a", 0.4), ("b", 1.0)]),
        );
        assert_abs_diff_eq!(
            mad(std::slice::from_ref(&one)).unwrap(),
            0.15,
            epsilon = 1e-12
        );

        let same = UtterancePair::new(one.reference.clone(), one.reference.clone());
        assert_eq!(mad(&[same]).unwrap(), 0.0);

        let second = UtterancePair::new(words(&[("c", 0.9)]), words(&[("c", 1.0)]));
        let pooled = mad(&[one, second]).unwrap();
        assert_abs_diff_eq!(pooled, 0.2 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn mad_without_matches_is_an_error() {
        let u = UtterancePair::new(plain("a"), plain("b"));
        assert!(matches!(mad(&[u]), Err(Error::NoData(_))));
        assert!(mad(&[]).is_err());
    }

    #[test]
    fn med_hand_cases() {
        let u1 = UtterancePair::new(words(&[("x", 2.0)]), words(&[("x", 1.8)]));
        assert_abs_diff_eq!(
            med(std::slice::from_ref(&u1), EndWordPolicy::MatchedOnly).unwrap(),
            0.2,
            epsilon = 1e-12
        );
        let u2 = UtterancePair::new(words(&[("y", 3.0)]), words(&[("y", 3.1)]));
        assert_abs_diff_eq!(
            med(&[u1, u2], EndWordPolicy::MatchedOnly).unwrap(),
            0.05,
            epsilon = 1e-12
        );
        assert!(med(&[], EndWordPolicy::All).is_err());
    }

    #[test]
    fn med_policy_controls_unmatched_last_words() {
        let matched = UtterancePair::new(words(&[("x", 2.0)]), words(&[("x", 1.8)]));
        let unmatched = UtterancePair::new(words(&[("p", 5.0)]), words(&[("q", 4.0)]));
        let both = [matched, unmatched];
        assert_abs_diff_eq!(
            med(&both, EndWordPolicy::MatchedOnly).unwrap(),
            0.2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            med(&both, EndWordPolicy::All).unwrap(),
            0.6,
            epsilon = 1e-12
        );
    }

    #[test]
    fn parse_and_pair() {
        let hyp = "u1\ta:0.500 b:1.200\n\n# comment\nu3\tz:1.000\n";
        let reference = "u1\ta:0.400 b:1.000\nu2\tc:0.100\n";
        let pairs = pair_by_id(
            parse_timestamps(hyp).unwrap(),
            parse_timestamps(reference).unwrap(),
        );
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0, "u1");
        assert_eq!(pairs[0].1.hyp.len(), 2);
        assert!(pairs[1].1.hyp.is_empty());
        let utts: Vec<_> = pairs.into_iter().map(|(_, u)| u).collect();
        let report = latency_report(&utts, EndWordPolicy::MatchedOnly).unwrap();
        assert_eq!(report.matched_pairs, 2);
        assert_eq!(report.med_utterances, 1);
        assert_abs_diff_eq!(report.mad, 0.15, epsilon = 1e-12);
    }

    #[test]
    fn parse_errors() {
        assert!(parse_timestamps("u1\ta0.5\n").is_err());
        assert!(parse_timestamps("u1\ta:x\n").is_err());
        assert!(parse_timestamps("u1\ta:-1.0\n").is_err());
        assert!(parse_timestamps("\tx:1.0\n").is_err());
        let ok = parse_timestamps("u1\tnote:12:0.250\n").unwrap();
        assert_eq!(ok[0].1[0].word, "note:12");
    }
}
