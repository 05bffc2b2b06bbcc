//! IOU-based syntax checking of original against reconstructed detections.
//!
//! For every original part, every reconstructed part overlapping it with
//! IOU strictly above `t` and carrying a different label is a part mismatch;
//! an original part that no reconstructed part overlaps above `t` is an extra
//! part. Reconstructed parts that match nothing are ignored, so omissions are
//! never errors. Any overlapping disagreement counts even if a same-label
//! match overlaps too; no one-to-one assignment is attempted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, Detection, Label};
use crate::grammar::Grammar;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("IOU threshold {0} is outside [0, 1]")]
pub struct InvalidThreshold(pub f64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntaxErrorKind {
    PartMismatch,
    ExtraPart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntaxError {
    /// An original part sits where the reconstruction has a different part.
    PartMismatch {
        original_label: Label,
        original_box: BBox,
        reconstructed_label: Label,
        reconstructed_box: BBox,
    },
    /// An original part that the reconstruction erased.
    ExtraPart {
        original_label: Label,
        original_box: BBox,
    },
}

impl SyntaxError {
    pub fn kind(&self) -> SyntaxErrorKind {
        match self {
            SyntaxError::PartMismatch { .. } => SyntaxErrorKind::PartMismatch,
            SyntaxError::ExtraPart { .. } => SyntaxErrorKind::ExtraPart,
        }
    }

    /// Explanation line, with labels rendered through `name`.
    pub fn describe_with<'a>(&'a self, name: impl Fn(&'a Label) -> &'a str) -> String {
        match self {
            SyntaxError::PartMismatch {
                original_label,
                reconstructed_label,
                ..
            } => format!("{} in place of {}", name(original_label), name(reconstructed_label)),
            SyntaxError::ExtraPart { original_label, .. } => {
                format!("{} in place of no specific part", name(original_label))
            }
        }
    }

    pub fn describe(&self) -> String {
        self.describe_with(|l| l.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxVerdict {
    pub correct: bool,
    pub errors: Vec<SyntaxError>,
}

impl SyntaxVerdict {
    pub fn from_errors(errors: Vec<SyntaxError>) -> Self {
        Self {
            correct: errors.is_empty(),
            errors,
        }
    }

    pub fn count(&self, kind: SyntaxErrorKind) -> usize {
        self.errors.iter().filter(|e| e.kind() == kind).count()
    }
}

pub fn check_syntax(
    original: &[Detection],
    reconstructed: &[Detection],
    t: f64,
) -> Result<SyntaxVerdict, InvalidThreshold> {
    if !(0.0..=1.0).contains(&t) {
        return Err(InvalidThreshold(t));
    }
    let mut errors = Vec::new();
    for o in original {
        let mut matched = false;
        for r in reconstructed {
            if iou(&o.bbox, &r.bbox) > t {
                matched = true;
                if o.label != r.label {
                    errors.push(SyntaxError::PartMismatch {
                        original_label: o.label.clone(),
                        original_box: o.bbox,
                        reconstructed_label: r.label.clone(),
                        reconstructed_box: r.bbox,
                    });
                }
            }
        }
        if !matched {
            errors.push(SyntaxError::ExtraPart {
                original_label: o.label.clone(),
                original_box: o.bbox,
            });
        }
    }
    Ok(SyntaxVerdict::from_errors(errors))
}

/// One line per error, or `syntactically correct`.
pub fn explain(verdict: &SyntaxVerdict) -> Vec<String> {
    if verdict.errors.is_empty() {
        return vec!["syntactically correct".to_owned()];
    }
    verdict.errors.iter().map(SyntaxError::describe).collect()
}

/// Like [`explain`] but names parts by their grammar word class (`eye_left` -> `eye`).
pub fn explain_in(verdict: &SyntaxVerdict, grammar: &Grammar) -> Vec<String> {
    if verdict.errors.is_empty() {
        return vec!["syntactically correct".to_owned()];
    }
    verdict
        .errors
        .iter()
        .map(|e| e.describe_with(|l| grammar.word_class(l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn det(label: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Detection {
        Detection::certain(label, BBox::new(x0, y0, x1, y1).unwrap())
    }

    /// Flag-only transliteration: double loop, `flag` per original part, `c` overall.
    fn naive_flag(bo: &[BBox], lo: &[&str], br: &[BBox], lr: &[&str], t: f64) -> bool {
        let mut c = 1;
        for i in 0..bo.len() {
            let box1 = bo[i];
            let mut flag = 0;
            for j in 0..br.len() {
                let box2 = br[j];
                if iou(&box1, &box2) > t {
                    flag = 1;
                    if lo[i] != lr[j] {
                        c = 0;
                    }
                }
            }
            if flag == 0 {
                c = 0;
            }
        }
        c == 1
    }

    #[test]
    fn happy_path() {
        // A' shifted by 1 in x of a 10x10 box: inter 90 / union 110 > 0.8
        let o = [det("eye", 0., 0., 10., 10.)];
        let r = [det("eye", 1., 0., 11., 10.)];
        let v = check_syntax(&o, &r, 0.3).unwrap();
        assert!(v.correct && v.errors.is_empty());
        assert_eq!(explain(&v), vec!["syntactically correct"]);
    }

    #[test]
    fn part_mismatch() {
        let o = [det("eye", 0., 0., 10., 10.)];
        let r = [det("nose", 0., 0., 10., 10.)];
        let v = check_syntax(&o, &r, 0.3).unwrap();
        assert!(!v.correct);
        assert_eq!(v.count(SyntaxErrorKind::PartMismatch), 1);
        assert_eq!(explain(&v), vec!["eye in place of nose"]);
    }

    #[test]
    fn extra_part() {
        let o = [det("ear", 5., 5., 9., 9.)];
        for t in [0.0, 0.3, 1.0] {
            let v = check_syntax(&o, &[], t).unwrap();
            assert!(!v.correct);
            assert_eq!(explain(&v), vec!["ear in place of no specific part"]);
        }
    }

    #[test]
    fn omission_tolerated() {
        let v = check_syntax(&[], &[det("nose", 0., 0., 3., 3.)], 0.3).unwrap();
        assert!(v.correct);
    }

    #[test]
    fn any_overlapping_disagreement_counts() {
        let a = BBox::new(0., 0., 10., 10.).unwrap();
        // eye: 10x5 inside A -> iou 0.5; nose: 10x4 inside A -> iou 0.4
        let a1 = det("eye", 0., 0., 10., 5.);
        let a2 = det("nose", 0., 6., 10., 10.);
        assert!((iou(&a, &a1.bbox) - 0.5).abs() < 1e-12);
        assert!((iou(&a, &a2.bbox) - 0.4).abs() < 1e-12);
        let v = check_syntax(&[Detection::certain("eye", a)], &[a1, a2], 0.3).unwrap();
        assert!(!v.correct);
        assert_eq!(v.errors.len(), 1);
        assert_eq!(v.count(SyntaxErrorKind::PartMismatch), 1);
    }

    #[test]
    fn strict_threshold() {
        // iou exactly 0.5
        let o = [det("eye", 0., 0., 10., 10.)];
        let r = [det("eye", 0., 0., 10., 5.)];
        assert!(check_syntax(&o, &r, 0.5).unwrap().count(SyntaxErrorKind::ExtraPart) == 1);
        assert!(check_syntax(&o, &r, 0.49).unwrap().correct);
    }

    #[test]
    fn not_symmetric() {
        let o = [det("ear", 0., 0., 4., 4.)];
        let r: [Detection; 0] = [];
        assert!(!check_syntax(&o, &r, 0.3).unwrap().correct);
        assert!(check_syntax(&r, &o, 0.3).unwrap().correct);
    }

    #[test]
    fn rejects_bad_threshold() {
        assert!(check_syntax(&[], &[], -0.1).is_err());
        assert!(check_syntax(&[], &[], f64::NAN).is_err());
    }

    #[test]
    fn word_class_explanations() {
        let g = Grammar::bundled("face").unwrap();
        let o = [det("eye_left", 0., 0., 10., 10.)];
        let r = [det("mouth", 0., 0., 10., 10.)];
        let v = check_syntax(&o, &r, 0.3).unwrap();
        assert_eq!(explain_in(&v, &g), vec!["eye in place of mouth"]);
        assert_eq!(explain(&v), vec!["eye_left in place of mouth"]);
    }

    fn random_instance(rng: &mut impl Rng) -> (Vec<Detection>, Vec<Detection>) {
        let labels = ["eye", "ear", "nose"];
        let side = |rng: &mut dyn rand::RngCore| {
            let n = rng.random_range(0..=8);
            (0..n)
                .map(|_| {
                    let x = rng.random_range(0..20) as f64;
                    let y = rng.random_range(0..20) as f64;
                    let w = rng.random_range(1..10) as f64;
                    let h = rng.random_range(1..10) as f64;
                    det(labels[rng.random_range(0..3)], x, y, x + w, y + h)
                })
                .collect::<Vec<_>>()
        };
        (side(rng), side(rng))
    }

    #[test]
    fn agrees_with_naive_transliteration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..2000 {
            let (o, r) = random_instance(&mut rng);
            let t = [0.1, 0.3, 0.5][trial % 3];
            let bo: Vec<BBox> = o.iter().map(|d| d.bbox).collect();
            let lo: Vec<&str> = o.iter().map(|d| d.label.as_str()).collect();
            let br: Vec<BBox> = r.iter().map(|d| d.bbox).collect();
            let lr: Vec<&str> = r.iter().map(|d| d.label.as_str()).collect();
            let v = check_syntax(&o, &r, t).unwrap();
            assert_eq!(v.correct, naive_flag(&bo, &lo, &br, &lr, t), "trial {trial}");
        }
    }

    fn mismatch_keys(v: &SyntaxVerdict) -> Vec<String> {
        let mut k: Vec<String> = v
            .errors
            .iter()
            .filter(|e| e.kind() == SyntaxErrorKind::PartMismatch)
            .map(|e| format!("{e:?}"))
            .collect();
        k.sort();
        k
    }

    proptest! {
        #[test]
        fn mismatches_shrink_as_threshold_rises(seed in any::<u64>(), t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (o, r) = random_instance(&mut rng);
            let t2 = (t1 + dt).min(1.0);
            let low = mismatch_keys(&check_syntax(&o, &r, t1).unwrap());
            let high = mismatch_keys(&check_syntax(&o, &r, t2).unwrap());
            for k in &high {
                prop_assert!(low.contains(k));
            }
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>(), rot_o in 0usize..8, rot_r in 0usize..8) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (o, r) = random_instance(&mut rng);
            let v = check_syntax(&o, &r, 0.3).unwrap();
            let (mut o2, mut r2) = (o.clone(), r.clone());
            if !o2.is_empty() { let n = o2.len(); o2.rotate_left(rot_o % n); o2.reverse(); }
            if !r2.is_empty() { let n = r2.len(); r2.rotate_left(rot_r % n); }
            let w = check_syntax(&o2, &r2, 0.3).unwrap();
            prop_assert_eq!(v.correct, w.correct);
            let mut a: Vec<String> = v.errors.iter().map(|e| format!("{e:?}")).collect();
            let mut b: Vec<String> = w.errors.iter().map(|e| format!("{e:?}")).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
