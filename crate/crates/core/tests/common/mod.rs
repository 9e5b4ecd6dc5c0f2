//! Helpers shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use mmte::optimizer::{Adafactor, AdafactorState, Schedule};
use mmte::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Adafactor written directly from the update equations, on nested vectors.
pub struct Reference {
    r: Vec<f64>,
    c: Vec<f64>,
    v: Vec<f64>,
    m: Vec<Vec<f64>>,
    mv: Vec<f64>,
}

impl Reference {
    fn new(rows: usize, cols: usize) -> Self {
        Reference {
            r: vec![0.0; rows],
            c: vec![0.0; cols],
            v: vec![0.0; cols],
            m: vec![vec![0.0; cols]; rows],
            mv: vec![0.0; cols],
        }
    }

    fn clip(g: &[f64]) -> Vec<f64> {
        let n = g.len() as f64;
        let norm = (g.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        if norm > 1.0 {
            g.iter().map(|x| x / norm).collect()
        } else {
            g.to_vec()
        }
    }

    fn step(&mut self, t: u64, lr: f64, w: &mut [Vec<f64>], gw: &[Vec<f64>], b: &mut [f64], gb: &[f64]) {
        let eps = 1e-30;
        let beta2 = 1.0 - (t as f64).powf(-0.8);
        let (rows, cols) = (w.len(), w[0].len());
        let flat: Vec<f64> = gw.iter().flatten().copied().collect();
        let g = Reference::clip(&flat);
        let g = |i: usize, j: usize| g[i * cols + j];
        for i in 0..rows {
            let mean = (0..cols).map(|j| g(i, j) * g(i, j) + eps).sum::<f64>() / cols as f64;
            self.r[i] = beta2 * self.r[i] + (1.0 - beta2) * mean;
        }
        for j in 0..cols {
            let mean = (0..rows).map(|i| g(i, j) * g(i, j) + eps).sum::<f64>() / rows as f64;
            self.c[j] = beta2 * self.c[j] + (1.0 - beta2) * mean;
        }
        let r_mean = self.r.iter().sum::<f64>() / rows as f64;
        let mut u = vec![vec![0.0; cols]; rows];
        for i in 0..rows {
            for j in 0..cols {
                u[i][j] = g(i, j) / (self.r[i] * self.c[j] / r_mean).sqrt();
            }
        }
        let u = Reference::clip(&u.into_iter().flatten().collect::<Vec<_>>());
        for i in 0..rows {
            for j in 0..cols {
                self.m[i][j] = 0.9 * self.m[i][j] + 0.1 * u[i * cols + j];
                w[i][j] -= lr * self.m[i][j];
            }
        }

        let gb = Reference::clip(gb);
        for j in 0..gb.len() {
            self.v[j] = beta2 * self.v[j] + (1.0 - beta2) * (gb[j] * gb[j] + eps);
        }
        let ub: Vec<f64> = (0..gb.len()).map(|j| gb[j] / self.v[j].sqrt()).collect();
        let ub = Reference::clip(&ub);
        for j in 0..gb.len() {
            self.mv[j] = 0.9 * self.mv[j] + 0.1 * ub[j];
            b[j] -= lr * self.mv[j];
        }
    }
}

pub fn random(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Runs 10 library steps beside the reference on random 3×4 and length-4 parameters.
/// Returns the largest per-element difference seen.
pub fn adafactor_oracle_error<F: Float>() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w0 = random(&mut rng, 12, 1.0);
    let b0 = random(&mut rng, 4, 1.0);
    let schedule = Schedule::new(0.05, 4).unwrap();

    let mut params = BTreeMap::new();
    params.insert("w".to_string(), Tensor::<F>::new(vec![3, 4], w0.iter().map(|&x| F::of(x)).collect()).unwrap());
    params.insert("b".to_string(), Tensor::<F>::new(vec![4], b0.iter().map(|&x| F::of(x)).collect()).unwrap());
    let mut state = AdafactorState::default();

    let mut w: Vec<Vec<f64>> = w0.chunks(4).map(|r| r.to_vec()).collect();
    let mut b = b0.clone();
    let mut reference = Reference::new(3, 4);
    let mut worst = 0f64;

    for t in 1..=10u64 {
        // Gradients vary in scale so that both clipping paths are exercised.
        let scale = if t % 3 == 0 { 5.0 } else { 0.3 };
        let gw = random(&mut rng, 12, scale);
        let gb = random(&mut rng, 4, scale);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::<F>::new(vec![3, 4], gw.iter().map(|&x| F::of(x)).collect()).unwrap());
        grads.insert("b".to_string(), Tensor::<F>::new(vec![4], gb.iter().map(|&x| F::of(x)).collect()).unwrap());
        let gw_rows: Vec<Vec<f64>> = gw.chunks(4).map(|r| r.iter().map(|&x| F::of(x).f64()).collect()).collect();
        let gb: Vec<f64> = gb.iter().map(|&x| F::of(x).f64()).collect();

        let lr = Adafactor::default().step(&mut params, &grads, &mut state, &schedule).unwrap();
        assert_eq!(lr, schedule.lr(t).unwrap());
        reference.step(t, lr, &mut w, &gw_rows, &mut b, &gb);

        for (k, x) in params["w"].data().iter().enumerate() {
            worst = worst.max((x.f64() - w[k / 4][k % 4]).abs());
        }
        for (k, x) in params["b"].data().iter().enumerate() {
            worst = worst.max((x.f64() - b[k]).abs());
        }
    }
    worst
}

