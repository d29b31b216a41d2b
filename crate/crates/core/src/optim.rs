//! Adafactor with factored second moments and update clipping.
//!
//! Matrices keep exponential averages of the row and column sums of the
//! squared gradient; vectors keep a full average. There is no momentum and
//! no relative step size: the caller supplies the learning rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPS1: f64 = 1e-30;
pub const CLIP_THRESHOLD: f64 = 1.0;
pub const DECAY_EXPONENT: f64 = 0.8;

#[derive(Clone, Debug)]
enum Moments {
    Factored { rows: Vec<f64>, cols: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct Adafactor {
    moments: Vec<Moments>,
    step: u64,
}

/// `β₂` at step `t` (1-based): `1 - t^-0.8`, so the first step uses the raw
/// squared gradient.
pub fn decay(t: u64) -> f64 {
    1.0 - (t as f64).powf(-DECAY_EXPONENT)
}

impl Adafactor {
    pub fn new(params: &[Tensor]) -> Self {
        let moments = params
            .iter()
            .map(|p| match p.shape() {
                [r, c] if *r > 1 && *c > 1 => Moments::Factored {
                    rows: vec![0.0; *r],
                    cols: vec![0.0; *c],
                },
                _ => Moments::Full(vec![0.0; p.len()]),
            })
            .collect();
        Self { moments, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adafactor",
                lhs: vec![self.moments.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adafactor",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let beta = decay(self.step);
        let mut update = Vec::new();
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let gd = g.data();
            update.clear();
            match m {
                Moments::Factored { rows, cols } => {
                    let nc = cols.len();
                    let mut row_sum = vec![0.0; rows.len()];
                    let mut col_sum = vec![0.0; nc];
                    for (i, row) in gd.chunks(nc).enumerate() {
                        for (j, x) in row.iter().enumerate() {
                            let sq = x * x + EPS1;
                            row_sum[i] += sq;
                            col_sum[j] += sq;
                        }
                    }
                    for (r, s) in rows.iter_mut().zip(&row_sum) {
                        *r = beta * *r + (1.0 - beta) * s;
                    }
                    for (c, s) in cols.iter_mut().zip(&col_sum) {
                        *c = beta * *c + (1.0 - beta) * s;
                    }
                    let total: f64 = rows.iter().sum();
                    for (i, row) in gd.chunks(nc).enumerate() {
                        for (j, x) in row.iter().enumerate() {
                            let v = rows[i] * cols[j] / total;
                            update.push(x / v.sqrt());
                        }
                    }
                }
                Moments::Full(v) => {
                    for (vi, x) in v.iter_mut().zip(gd) {
                        *vi = beta * *vi + (1.0 - beta) * (x * x + EPS1);
                        update.push(x / vi.sqrt());
                    }
                }
            }
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
            let scale = lr / (rms / CLIP_THRESHOLD).max(1.0);
            for (w, u) in p.data_mut().iter_mut().zip(&update) {
                *w -= scale * u;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn random(shape: &[usize], rng: &mut Prng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = Prng::new(1);
        let mut params = vec![random(&[3, 4], &mut rng), random(&[5], &mut rng)];
        let before = params.clone();
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut opt = Adafactor::new(&params);
        for _ in 0..3 {
            opt.step(&mut params, &zeros, 0.1).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut rng = Prng::new(2);
        let g = random(&[4, 6], &mut rng);
        let mut params = vec![Tensor::zeros(&[4, 6])];
        let mut opt = Adafactor::new(&params);
        let lr = 0.01;
        for _ in 0..200 {
            let before = params[0].clone();
            opt.step(&mut params, std::slice::from_ref(&g), lr).unwrap();
            let rms = (params[0]
                .data()
                .iter()
                .zip(before.data())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                / 24.0)
                .sqrt();
            assert!(rms <= lr * (1.0 + 1e-12));
        }
        let v = g.clone();
        let mut vec_params = vec![Tensor::zeros(&[6])];
        let mut vopt = Adafactor::new(&vec_params);
        let gv = Tensor::vector(v.data()[..6].to_vec()).unwrap();
        for _ in 0..50 {
            let before = vec_params[0].clone();
            vopt.step(&mut vec_params, std::slice::from_ref(&gv), lr).unwrap();
            for ((a, b), x) in vec_params[0].data().iter().zip(before.data()).zip(gv.data()) {
                assert!(((b - a) - lr * x.signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(&[2, 2])];
        let mut opt = Adafactor::new(&params);
        assert!(opt.step(&mut params, &[Tensor::zeros(&[4])], 0.1).is_err());
        assert!(opt.step(&mut params, &[], 0.1).is_err());
    }
}
