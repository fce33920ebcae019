//! Object hallucination metrics at toy scale.
//!
//! Objects are tokens from a fixed object vocabulary; a caption mentions an
//! object whenever the object's token appears in it. CHAIR_S is the share of
//! captions with at least one hallucinated mention and CHAIR_I the share of
//! hallucinated mentions, counted with multiplicity. When no caption mentions
//! any object CHAIR_I is undefined and reported as `None`.
//!
//! POPE-style scores treat "yes" (object present) as the positive class.
//! Precision is `None` without predicted positives and recall is `None`
//! without actual positives; F1 is 0 whenever either is undefined or both
//! are zero.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VceError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectVocab {
    tokens: BTreeSet<u32>,
}

impl ObjectVocab {
    pub fn new(tokens: impl IntoIterator<Item = u32>) -> Self {
        Self {
            tokens: tokens.into_iter().collect(),
        }
    }

    pub fn contains(&self, token: u32) -> bool {
        self.tokens.contains(&token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Object tokens of a caption in order, repeats kept.
pub fn extract_objects(caption: &[u32], vocab: &ObjectVocab) -> Vec<u32> {
    caption.iter().copied().filter(|&t| vocab.contains(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub chair_s: f64,
    pub chair_i: Option<f64>,
    pub captions: usize,
    pub hallucinated_captions: usize,
    pub mentions: usize,
    pub hallucinated_mentions: usize,
}

pub fn chair(mentions: &[Vec<u32>], truths: &[BTreeSet<u32>]) -> Result<ChairReport> {
    if mentions.len() != truths.len() {
        return Err(VceError::LengthMismatch(format!(
            "{} captions vs {} truth sets",
            mentions.len(),
            truths.len()
        )));
    }
    if mentions.is_empty() {
        return Err(VceError::Empty("no captions".into()));
    }
    let mut hallucinated_captions = 0;
    let mut total = 0;
    let mut hallucinated = 0;
    for (caption, truth) in mentions.iter().zip(truths) {
        let bad = caption.iter().filter(|o| !truth.contains(o)).count();
        total += caption.len();
        hallucinated += bad;
        if bad > 0 {
            hallucinated_captions += 1;
        }
    }
    Ok(ChairReport {
        chair_s: hallucinated_captions as f64 / mentions.len() as f64,
        chair_i: (total > 0).then(|| hallucinated as f64 / total as f64),
        captions: mentions.len(),
        hallucinated_captions,
        mentions: total,
        hallucinated_mentions: hallucinated,
    })
}

impl fmt::Display for ChairReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "CHAIR_S {:.6} ({}/{} captions)",
            self.chair_s, self.hallucinated_captions, self.captions
        )?;
        match self.chair_i {
            Some(v) => writeln!(
                f,
                "CHAIR_I {:.6} ({}/{} mentions)",
                v, self.hallucinated_mentions, self.mentions
            ),
            None => writeln!(f, "CHAIR_I undefined (no object mentions)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
    pub yes_ratio: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn pope_scores(answers: &[bool], labels: &[bool]) -> Result<PopeReport> {
    if answers.len() != labels.len() {
        return Err(VceError::LengthMismatch(format!(
            "{} answers vs {} labels",
            answers.len(),
            labels.len()
        )));
    }
    if answers.is_empty() {
        return Err(VceError::Empty("no POPE questions".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&a, &l) in answers.iter().zip(labels) {
        match (a, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let n = answers.len() as f64;
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    };
    Ok(PopeReport {
        accuracy: (tp + tn) as f64 / n,
        precision,
        recall,
        f1,
        yes_ratio: (tp + fp) as f64 / n,
        tp,
        fp,
        tn,
        fn_,
    })
}

/// One presence question per (caption, vocabulary object): the answer is
/// "yes" when the caption mentions the object, the label when the image
/// contains it.
pub fn pope_questions(
    mentions: &[Vec<u32>],
    truths: &[BTreeSet<u32>],
    vocab: &ObjectVocab,
) -> Result<(Vec<bool>, Vec<bool>)> {
    if mentions.len() != truths.len() {
        return Err(VceError::LengthMismatch(format!(
            "{} captions vs {} truth sets",
            mentions.len(),
            truths.len()
        )));
    }
    let mut answers = Vec::with_capacity(mentions.len() * vocab.len());
    let mut labels = Vec::with_capacity(answers.capacity());
    for (caption, truth) in mentions.iter().zip(truths) {
        for o in vocab.tokens() {
            answers.push(caption.contains(&o));
            labels.push(truth.contains(&o));
        }
    }
    Ok((answers, labels))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

impl fmt::Display for PopeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy  {:.6}", self.accuracy)?;
        writeln!(f, "precision {}", opt(self.precision))?;
        writeln!(f, "recall    {}", opt(self.recall))?;
        writeln!(f, "F1        {:.6}", self.f1)?;
        writeln!(f, "yes ratio {:.6}", self.yes_ratio)?;
        writeln!(
            f,
            "tp {} fp {} tn {} fn {}",
            self.tp, self.fp, self.tn, self.fn_
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DOG: u32 = 1;
    const FRISBEE: u32 = 2;
    const CAT: u32 = 3;

    fn set(xs: &[u32]) -> BTreeSet<u32> {
        xs.iter().copied().collect()
    }

    #[test]
    fn extraction_keeps_order_and_repeats() {
        let vocab = ObjectVocab::new([1, 2]);
        assert_eq!(extract_objects(&[9, 1, 7, 1], &vocab), vec![1, 1]);
        assert!(extract_objects(&[9, 7], &vocab).is_empty());
    }

    #[test]
    fn single_hallucinated_caption() {
        let r = chair(&[vec![DOG, FRISBEE]], &[set(&[DOG])]).unwrap();
        assert_eq!(r.chair_s, 1.0);
        assert_eq!(r.chair_i, Some(0.5));
    }

    #[test]
    fn clean_captions() {
        let r = chair(&[vec![DOG], vec![CAT, CAT]], &[set(&[DOG]), set(&[CAT])]).unwrap();
        assert_eq!(r.chair_s, 0.0);
        assert_eq!(r.chair_i, Some(0.0));
    }

    #[test]
    fn hand_count_two_captions() {
        let r = chair(
            &[vec![DOG, FRISBEE, CAT], vec![DOG]],
            &[set(&[DOG, FRISBEE, CAT]), set(&[CAT])],
        )
        .unwrap();
        assert_eq!(r.chair_s, 0.5);
        assert_eq!(r.chair_i, Some(0.25));
    }

    #[test]
    fn all_empty_captions_leave_chair_i_undefined() {
        let r = chair(&[vec![], vec![]], &[set(&[DOG]), set(&[])]).unwrap();
        assert_eq!(r.chair_s, 0.0);
        assert_eq!(r.chair_i, None);
        assert!(r.to_string().contains("undefined"));
    }

    #[test]
    fn chair_errors() {
        assert!(matches!(chair(&[vec![]], &[]), Err(VceError::LengthMismatch(_))));
        assert!(matches!(chair(&[], &[]), Err(VceError::Empty(_))));
    }

    #[test]
    fn pope_hand_cases() {
        let all = pope_scores(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.f1), (1.0, Some(1.0), 1.0));

        let yes = pope_scores(&[true; 4], &[true, false, true, false]).unwrap();
        assert_eq!(yes.accuracy, 0.5);
        assert_eq!(yes.precision, Some(0.5));
        assert_eq!(yes.recall, Some(1.0));
        assert!((yes.f1 - 2.0 / 3.0).abs() < 1e-15);

        let none = pope_scores(&[false, false], &[true, false]).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.f1, 0.0);
        assert!(pope_scores(&[true], &[]).is_err());
    }

    #[test]
    fn questions_cover_vocab() {
        let vocab = ObjectVocab::new([1, 2, 3]);
        let (a, l) = pope_questions(&[vec![1, 1], vec![3]], &[set(&[1]), set(&[2])], &vocab).unwrap();
        assert_eq!(a, vec![true, false, false, false, false, true]);
        assert_eq!(l, vec![true, false, false, false, true, false]);
    }

    fn caption_strategy() -> impl Strategy<Value = (Vec<Vec<u32>>, Vec<BTreeSet<u32>>)> {
        prop::collection::vec(
            (
                prop::collection::vec(1u32..6, 0..5),
                prop::collection::btree_set(1u32..6, 0..4),
            ),
            1..12,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn chair_ratios_bounded_and_order_free((m, t) in caption_strategy(), rot in 0usize..12) {
            let r = chair(&m, &t).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.chair_s));
            if let Some(ci) = r.chair_i { prop_assert!((0.0..=1.0).contains(&ci)); }
            let k = rot % m.len();
            let mut m2 = m.clone();
            let mut t2 = t.clone();
            m2.rotate_left(k);
            t2.rotate_left(k);
            prop_assert_eq!(chair(&m2, &t2).unwrap(), r);
        }

        #[test]
        fn adding_a_hallucination_never_lowers_chair((m, t) in caption_strategy(), idx in 0usize..12) {
            let before = chair(&m, &t).unwrap();
            let i = idx % m.len();
            let absent = (1u32..10).find(|o| !t[i].contains(o)).unwrap();
            let mut m2 = m.clone();
            m2[i].push(absent);
            let after = chair(&m2, &t).unwrap();
            prop_assert!(after.chair_s >= before.chair_s);
            prop_assert!(after.chair_i.unwrap() >= before.chair_i.unwrap_or(0.0));
        }

        #[test]
        fn pope_matches_confusion_counts(
            pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..=100)
        ) {
            let (a, l): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let r = pope_scores(&a, &l).unwrap();
            let count = |x: bool, y: bool| a.iter().zip(&l).filter(|(p, q)| **p == x && **q == y).count();
            prop_assert_eq!((r.tp, r.fp, r.tn, r.fn_), (count(true, true), count(true, false), count(false, false), count(false, true)));
            prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, a.len());
            prop_assert!((r.accuracy - (r.tp + r.tn) as f64 / a.len() as f64).abs() < 1e-15);
        }
    }
}
