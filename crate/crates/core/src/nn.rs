//! Dense layers over [`ParamSet`] slots.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffopt::{ParamSet, Tensor, Var};
use crate::error::{Error, Result};

/// Slots of one affine layer `x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub inputs: usize,
    pub outputs: usize,
}

/// Weight initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in` (suits relu inputs).
    He,
    /// Uniform with variance `gain^2 / fan_in`.
    Scaled(f64),
    Zeros,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let gain = match init {
            Init::He => 2f64.sqrt(),
            Init::Scaled(g) => g,
            Init::Zeros => 0.0,
        };
        let w = if gain == 0.0 {
            Tensor::zeros(inputs, outputs)
        } else {
            // Uniform(-a, a) has variance a^2 / 3.
            let a = gain * (3.0 / inputs as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
            Tensor::from_fn(inputs, outputs, |_, _| dist.sample(rng))
        };
        let weight = params.insert(format!("{name}.weight"), w);
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(1, outputs));
        Self { weight, bias, inputs, outputs }
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(bound[self.weight])?.try_add(bound[self.bias])
    }
}

/// Fixed per-feature standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Self { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    /// Column statistics of `rows`; constant columns are only centered.
    pub fn fit<P: AsRef<[f64]>>(rows: &[P]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("cannot fit input statistics on an empty dataset"));
        };
        let width = first.as_ref().len();
        if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != width) {
            return Err(Error::DimensionMismatch { expected: width, actual: bad.as_ref().len() });
        }
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..width).map(|c| rows.iter().map(|r| r.as_ref()[c]).sum::<f64>() / n).collect();
        let std = (0..width)
            .map(|c| {
                let var = rows.iter().map(|r| (r.as_ref()[c] - mean[c]).powi(2)).sum::<f64>() / n;
                let sd = var.sqrt();
                if sd > 1e-12 * mean[c].abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.width() || self.std.len() != self.width() {
            return Err(Error::DimensionMismatch { expected: self.width(), actual: x.cols() });
        }
        let tape = x.tape();
        let mean = tape.constant(Tensor::row(self.mean.clone()));
        let inv = tape.constant(Tensor::row(self.std.iter().map(|s| 1.0 / s).collect()));
        Ok((x - mean) * inv)
    }
}

/// Stack of relu layers followed by a linear read-out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; the last layer uses `last_init`.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::He };
                Linear::new(params, &format!("{name}.{i}"), widths[i], widths[i + 1], init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, bound: &[Var<'t>], mut x: Var<'t>) -> Result<Var<'t>> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(bound, x)?;
            if i + 1 < n {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffopt::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let l = Linear::new(&mut p, "l", 200, 300, Init::He, &mut rng);
        let w = p.get(l.weight);
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 200.0).abs() < 1e-3, "{var}");
        assert_eq!(p.get(l.bias).sum(), 0.0);
    }

    #[test]
    fn mlp_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let m = Mlp::new(&mut p, "m", &[3, 4, 2], Init::He, &mut rng);
        let x = Tensor::from_fn(2, 3, |r, c| r as f64 - c as f64 * 0.5);
        let tape = Tape::new();
        let bound = p.bind_constant(&tape);
        let out = m.forward(&bound, tape.constant(x.clone())).unwrap().value().clone();
        let h = x.matmul(p.get(0)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let expect: f64 =
                    (0..4).map(|k| (h.get(r, k) + p.get(1).get(0, k)).max(0.0) * p.get(2).get(k, c)).sum::<f64>()
                        + p.get(3).get(0, c);
                assert!((out.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }
}
