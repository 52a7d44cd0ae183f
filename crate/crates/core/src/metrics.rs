//! Equal error rate and DET curves.
//!
//! Scores are oriented so that higher means more likely fake. At threshold
//! `t` an utterance is called fake when `score >= t`, so
//! `FAR = P(called fake | real)` and `FRR = P(called real | fake)`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("score {i} is not finite: {}", scores[i])));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(reals, fakes)`
    pub fn class_counts(&self) -> (usize, usize) {
        let fakes = self.labels.iter().filter(|&&l| l == Label::Fake).count();
        (self.labels.len() - fakes, fakes)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        match self.class_counts() {
            (r, f) if r > 0 && f > 0 => Ok((r, f)),
            (r, f) => Err(Error::MetricUndefined(format!(
                "EER undefined: both classes required, got {r} real and {f} fake"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// Operating points at `-inf`, at every distinct score, and at `+inf`, in
/// ascending threshold order. A point whose `(far, frr)` repeats its
/// predecessor is dropped, so all-tied scores yield only the two sentinels.
pub fn det_points(set: &ScoredSet) -> Result<Vec<DetPoint>> {
    let (n_real, n_fake) = set.require_both_classes()?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Counts of items strictly below the current threshold.
    let (mut real_below, mut fake_below) = (0usize, 0usize);
    let point = |threshold: f64, real_below: usize, fake_below: usize| DetPoint {
        threshold,
        far: (n_real - real_below) as f64 / n_real as f64,
        frr: fake_below as f64 / n_fake as f64,
    };
    let mut points = vec![point(f64::NEG_INFINITY, 0, 0)];
    let mut i = 0;
    while i < order.len() {
        let t = set.scores[order[i]];
        let p = point(t, real_below, fake_below);
        let last = points.last().expect("sentinel");
        if (p.far, p.frr) != (last.far, last.frr) {
            points.push(p);
        }
        while i < order.len() && set.scores[order[i]] == t {
            match set.labels[order[i]] {
                Label::Real => real_below += 1,
                Label::Fake => fake_below += 1,
            }
            i += 1;
        }
    }
    points.push(point(f64::INFINITY, n_real, n_fake));
    Ok(points)
}

/// FAR at the crossing of the FAR and FRR curves, interpolating linearly
/// between the two DET points that bracket the sign change of `far - frr`.
pub fn compute_eer(set: &ScoredSet) -> Result<f64> {
    eer_from_points(&det_points(set)?)
}

pub fn eer_from_points(points: &[DetPoint]) -> Result<f64> {
    let gap = |p: &DetPoint| p.far - p.frr;
    let i = points
        .iter()
        .position(|p| gap(p) <= 0.0)
        .ok_or_else(|| Error::MetricUndefined("DET curve never crosses".into()))?;
    let cur = &points[i];
    if gap(cur) == 0.0 || i == 0 {
        return Ok(cur.far);
    }
    let prev = &points[i - 1];
    let t = gap(prev) / (gap(prev) - gap(cur));
    Ok(prev.far + t * (cur.far - prev.far))
}

/// `threshold,far,frr` rows with a header; sentinels print as `-inf`/`inf`.
pub fn det_csv(points: &[DetPoint]) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        writeln!(out, "{},{},{}", p.threshold, p.far, p.frr).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub utterance_id: String,
    pub score: f64,
    pub label: Label,
}

/// One `utterance_id score label` line per entry. Scores print with the
/// shortest representation that reads back exactly.
pub fn format_scores(lines: &[ScoreLine]) -> String {
    let mut out = String::new();
    for l in lines {
        writeln!(out, "{} {} {}", l.utterance_id, l.score, l.label).unwrap();
    }
    out
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let bad = |m: String| Error::Data(format!("score line {}: {m}", i + 1));
        if f.len() != 3 {
            return Err(bad(format!("expected 3 fields, found {}", f.len())));
        }
        out.push(ScoreLine {
            utterance_id: f[0].to_string(),
            score: f[1].parse().map_err(|e| bad(format!("score {:?}: {e}", f[1])))?,
            label: f[2].parse().map_err(|e| bad(format!("{e}")))?,
        });
    }
    Ok(out)
}

impl ScoredSet {
    pub fn from_score_lines(lines: &[ScoreLine]) -> Result<Self> {
        ScoredSet::new(
            lines.iter().map(|l| l.score).collect(),
            lines.iter().map(|l| l.label).collect(),
        )
    }
}
