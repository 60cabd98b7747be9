//! Loss balancing for objectives that mix likelihood terms with small
//! positive regularizers.
//!
//! Negative-log-likelihood terms are shifted by their running minimum and
//! divided by their running span so they land roughly in `[0, 1]`; every term
//! is then multiplied by a fixed weight. The running statistics only ever
//! expand. Until `warmup` observations have been made, likelihood terms get
//! weight zero.

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};

const SPAN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermKind {
    /// Passed through unscaled.
    Plain,
    /// Shifted and span-normalized before weighting.
    Likelihood,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub name: String,
    pub kind: TermKind,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBalancer {
    terms: Vec<TermSpec>,
    min: Vec<f64>,
    max: Vec<f64>,
    observations: u64,
    warmup: u64,
}

impl LossBalancer {
    pub fn new(terms: Vec<TermSpec>, warmup: u64) -> Self {
        let n = terms.len();
        Self { terms, min: vec![f64::INFINITY; n], max: vec![f64::NEG_INFINITY; n], observations: 0, warmup }
    }

    /// Lifter weighting: `L_2D`, `L_bone` x10, `L_limbs` x0.1, the rest x1.
    pub fn liftnet(warmup: u64) -> Self {
        Self::new(
            vec![
                term("l2d", TermKind::Plain, 10.0),
                term("l3d", TermKind::Plain, 1.0),
                term("nf", TermKind::Likelihood, 1.0),
                term("bone", TermKind::Plain, 10.0),
                term("limbs", TermKind::Plain, 0.1),
                term("def", TermKind::Plain, 1.0),
            ],
            warmup,
        )
    }

    /// Regressor weighting: `L_RLE` x10, `L_limbs` x0.1, the rest x1.
    pub fn regnet(warmup: u64) -> Self {
        Self::new(
            vec![
                term("bone", TermKind::Plain, 1.0),
                term("limbs", TermKind::Plain, 0.1),
                term("nf", TermKind::Likelihood, 1.0),
                term("rle", TermKind::Likelihood, 10.0),
            ],
            warmup,
        )
    }

    pub fn terms(&self) -> &[TermSpec] {
        &self.terms
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name == name)
    }

    pub fn set_weight(&mut self, name: &str, weight: f64) {
        if let Some(i) = self.term_index(name) {
            self.terms[i].weight = weight;
        }
    }

    pub fn observations(&self) -> u64 {
        self.observations
    }

    pub fn warmed_up(&self) -> bool {
        self.observations >= self.warmup && self.observations > 0
    }

    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.min[i], self.max[i])
    }

    /// Overrides the running range of term `i`.
    pub fn set_range(&mut self, i: usize, min: f64, max: f64) {
        self.min[i] = min;
        self.max[i] = max;
    }

    /// Effective multiplier and shift applied to term `i` right now:
    /// contribution = `scale * (value - shift)`.
    pub fn affine(&self, i: usize) -> (f64, f64) {
        let spec = &self.terms[i];
        match spec.kind {
            TermKind::Plain => (spec.weight, 0.0),
            TermKind::Likelihood => {
                if !self.warmed_up() || !self.min[i].is_finite() || !self.max[i].is_finite() {
                    (0.0, 0.0)
                } else {
                    let span = self.max[i] - self.min[i] + SPAN_EPS;
                    (spec.weight / span, self.min[i])
                }
            }
        }
    }

    /// Weighted total on the tape; statistics are read, never written.
    pub fn combine<'t>(&self, tape: &'t Tape, values: &[Var<'t>]) -> Var<'t> {
        assert_eq!(values.len(), self.terms.len(), "one value per balanced term");
        let mut total = tape.scalar(0.0);
        for (i, v) in values.iter().enumerate() {
            let (scale, shift) = self.affine(i);
            if scale != 0.0 {
                total = total + (*v - shift) * scale;
            }
        }
        total
    }

    /// Plain-number version of [`combine`](Self::combine).
    pub fn total(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.terms.len(), "one value per balanced term");
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (scale, shift) = self.affine(i);
                if scale == 0.0 {
                    0.0
                } else {
                    scale * (v - shift)
                }
            })
            .sum()
    }

    /// Folds one step's term values into the running statistics.
    pub fn observe(&mut self, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            if v.is_finite() {
                self.min[i] = self.min[i].min(v);
                self.max[i] = self.max[i].max(v);
            }
        }
        self.observations += 1;
    }
}

fn term(name: &str, kind: TermKind, weight: f64) -> TermSpec {
    TermSpec { name: name.to_string(), kind, weight }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warmed(values: &[&[f64]]) -> LossBalancer {
        let mut b = LossBalancer::liftnet(2);
        for v in values {
            b.observe(v);
        }
        b
    }

    #[test]
    fn likelihood_terms_are_silent_during_warmup() {
        let mut b = LossBalancer::liftnet(3);
        b.observe(&[0.0, 0.0, -50.0, 0.0, 0.0, 0.0]);
        let t = b.total(&[0.0, 0.0, -20.0, 0.0, 0.0, 0.0]);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn shift_and_span_map_running_extremes_to_zero_and_one() {
        let b = warmed(&[&[0.0; 6], &[0.0, 0.0, -40.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]]);
        let at_min = b.total(&[0.0, 0.0, -40.0, 0.0, 0.0, 0.0]);
        let at_max = b.total(&[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        assert_eq!(at_min, 0.0);
        assert!((at_max - 1.0).abs() < 1e-9);
    }

    #[test]
    fn liftnet_weights_match_hand_sum() {
        let b = warmed(&[&[0.0; 6], &[1.0; 6]]);
        // Likelihood term at 0.5 of its [0, 1] span.
        let terms = [0.2, 3.0, 0.5, 0.04, 1.5, 0.7];
        let want = 10.0 * 0.2 + 3.0 + 0.5 / (1.0 + SPAN_EPS) + 10.0 * 0.04 + 0.1 * 1.5 + 0.7;
        assert!((b.total(&terms) - want).abs() < 1e-12);

        let tape = Tape::new();
        let vars: Vec<_> = terms.iter().map(|&t| tape.scalar(t)).collect();
        assert!((b.combine(&tape, &vars).item() - want).abs() < 1e-12);
    }

    #[test]
    fn statistics_expand_monotonically() {
        let mut b = LossBalancer::regnet(0);
        b.observe(&[0.0, 0.0, 5.0, 1.0]);
        b.observe(&[0.0, 0.0, 3.0, 2.0]);
        b.observe(&[0.0, 0.0, 4.0, 1.5]);
        assert_eq!(b.range(2), (3.0, 5.0));
        assert_eq!(b.range(3), (1.0, 2.0));
    }

    #[test]
    fn total_is_finite_for_degenerate_span() {
        let mut b = LossBalancer::regnet(0);
        b.observe(&[1.0, 1.0, 1.0, 1.0]);
        assert!(b.total(&[1.0, 1.0, 1.0, 1.0]).is_finite());
    }
}
