//! Score bookkeeping, equal error rate and DET curves.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dtw::{AlignedPair, PairLabel};
use crate::autodiff::Real;
use crate::model::SiameseModel;
use crate::{Error, Result};

/// Scores routed by comparison type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor_random: Vec<f64>,
    pub impostor_skilled: Vec<f64>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: PairLabel, score: f64) {
        match label {
            PairLabel::Match => self.genuine.push(score),
            PairLabel::NonmatchRandom => self.impostor_random.push(score),
            PairLabel::NonmatchSkilled => self.impostor_skilled.push(score),
        }
    }

    /// Random and skilled impostor scores pooled.
    pub fn impostor_all(&self) -> Vec<f64> {
        let mut v = self.impostor_random.clone();
        v.extend_from_slice(&self.impostor_skilled);
        v
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.genuine.len(), self.impostor_random.len(), self.impostor_skilled.len())
    }

    pub fn len(&self) -> usize {
        self.genuine.len() + self.impostor_random.len() + self.impostor_skilled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Serialises non-finite thresholds as the strings `"inf"` / `"-inf"`.
pub mod threshold_serde {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct ThresholdVisitor;

    impl Visitor<'_> for ThresholdVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
            f.write_str("a number, \"inf\" or \"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(alloc::format!("bad threshold {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(ThresholdVisitor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub far: f64,
    pub frr: f64,
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

/// Operating points in ascending threshold order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

impl DetCurve {
    /// FAR never rises and FRR never falls along the curve.
    pub fn is_monotone(&self) -> bool {
        self.points
            .windows(2)
            .all(|w| w[1].far <= w[0].far && w[1].frr >= w[0].frr && w[1].threshold > w[0].threshold)
    }
}

fn sorted_checked(name: &str, v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Validation(format!("{name} score list is empty")));
    }
    if v.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation(format!("{name} score list contains NaN")));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Walks every distinct score plus ±inf in ascending order, calling `f` with
/// (threshold, #impostor >= t, #genuine < t).
fn sweep(genuine: &[f64], impostor: &[f64], mut f: impl FnMut(f64, usize, usize)) -> Result<()> {
    let g = sorted_checked("genuine", genuine)?;
    let i = sorted_checked("impostor", impostor)?;
    let mut thresholds: Vec<f64> = Vec::with_capacity(g.len() + i.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend_from_slice(&g);
    thresholds.extend_from_slice(&i);
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (mut gi, mut ii) = (0, 0);
    for t in thresholds {
        while gi < g.len() && g[gi] < t {
            gi += 1;
        }
        while ii < i.len() && i[ii] < t {
            ii += 1;
        }
        f(t, i.len() - ii, gi);
    }
    Ok(())
}

/// Equal error rate by explicit threshold sweep.
///
/// FAR(t) is the fraction of impostor scores `>= t`, FRR(t) the fraction of
/// genuine scores `< t`. The reported value is `(FAR + FRR) / 2` at the
/// threshold minimising `|FAR - FRR|`, the lowest such threshold on ties.
pub fn compute_eer(genuine: &[f64], impostor: &[f64]) -> Result<EerResult> {
    let (ng, ni) = (genuine.len(), impostor.len());
    let mut best: Option<(u128, EerResult)> = None;
    sweep(genuine, impostor, |t, fa, fr| {
        // |fa/ni - fr/ng| compared exactly as |fa*ng - fr*ni|, so equal gaps
        // tie and the lowest threshold wins.
        let gap = ((fa as u128) * (ng as u128)).abs_diff((fr as u128) * (ni as u128));
        if best.as_ref().is_none_or(|(b, _)| gap < *b) {
            best = Some((
                gap,
                EerResult {
                    eer: (fa as f64 / ni as f64 + fr as f64 / ng as f64) / 2.0,
                    threshold: t,
                },
            ));
        }
    })?;
    Ok(best.expect("sweep visits at least two thresholds").1)
}

pub fn det_curve(genuine: &[f64], impostor: &[f64]) -> Result<DetCurve> {
    let (ng, ni) = (genuine.len() as f64, impostor.len() as f64);
    let mut points = Vec::new();
    sweep(genuine, impostor, |t, fa, fr| {
        points.push(DetPoint {
            far: fa as f64 / ni,
            frr: fr as f64 / ng,
            threshold: t,
        })
    })?;
    Ok(DetCurve { points })
}

/// Symmetrised scores of labelled aligned pairs.
pub fn compute_scores<'a, F: Real>(
    model: &SiameseModel<F>,
    comparisons: impl IntoIterator<Item = &'a AlignedPair>,
) -> Result<ScoreSet> {
    let mut set = ScoreSet::new();
    for pair in comparisons {
        let label = pair
            .label
            .ok_or_else(|| Error::Validation("comparison has no label".into()))?;
        set.push(label, model.score_pair(pair)?);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurves {
    pub random: Option<DetCurve>,
    pub skilled: Option<DetCurve>,
    pub overall: DetCurve,
}

/// Random, skilled and overall error rates of one scored protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub eer_random: Option<EerResult>,
    pub eer_skilled: Option<EerResult>,
    pub eer_overall: EerResult,
    /// How the overall figure combines impostor types.
    pub overall_pooling: alloc::string::String,
    pub num_genuine: usize,
    pub num_impostor_random: usize,
    pub num_impostor_skilled: usize,
    pub det_curves: DetCurves,
}

/// Builds a report; random or skilled entries are `None` when that impostor
/// list is empty. Overall pools both impostor lists.
pub fn evaluate_scores(scores: &ScoreSet) -> Result<EvaluationReport> {
    let pooled = scores.impostor_all();
    let per_type = |imp: &[f64]| -> Result<Option<(EerResult, DetCurve)>> {
        if imp.is_empty() {
            return Ok(None);
        }
        Ok(Some((compute_eer(&scores.genuine, imp)?, det_curve(&scores.genuine, imp)?)))
    };
    let random = per_type(&scores.impostor_random)?;
    let skilled = per_type(&scores.impostor_skilled)?;
    let eer_overall = compute_eer(&scores.genuine, &pooled)?;
    let overall = det_curve(&scores.genuine, &pooled)?;
    Ok(EvaluationReport {
        eer_random: random.as_ref().map(|r| r.0),
        eer_skilled: skilled.as_ref().map(|s| s.0),
        eer_overall,
        overall_pooling: "pooled_impostors".into(),
        num_genuine: scores.genuine.len(),
        num_impostor_random: scores.impostor_random.len(),
        num_impostor_skilled: scores.impostor_skilled.len(),
        det_curves: DetCurves {
            random: random.map(|r| r.1),
            skilled: skilled.map(|s| s.1),
            overall,
        },
    })
}
