//! Adafactor with momentum, factored second moments and per-parameter clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamMap;
use crate::tensor::{Float, Tensor};

/// Linear warmup to `peak`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
}

impl Schedule {
    pub fn new(peak: f64, warmup: u64) -> Result<Self> {
        if !(peak > 0.0) || !peak.is_finite() {
            return Err(Error::Config(format!("schedule peak must be positive, got {peak}")));
        }
        if warmup == 0 {
            return Err(Error::Config("schedule warmup must be ≥ 1".into()));
        }
        Ok(Schedule { peak, warmup })
    }

    pub fn lr(&self, step: u64) -> Result<f64> {
        if step == 0 {
            return Err(Error::Invalid("learning-rate steps start at 1".into()));
        }
        let (s, w) = (step as f64, self.warmup as f64);
        Ok(if step <= self.warmup {
            self.peak * s / w
        } else {
            self.peak * (w / s).sqrt()
        })
    }

    /// The large-scale pretraining schedule (3.0, 40k).
    pub fn reference_pretrain() -> Self {
        Schedule { peak: 3.0, warmup: 40_000 }
    }

    /// Pretraining at desk scale.
    pub fn desk_pretrain() -> Self {
        Schedule { peak: 0.005, warmup: 1000 }
    }

    /// Scales a reference-size schedule by the same factors that map
    /// (3.0, 40k) onto the desk pretraining schedule.
    pub fn desk_scaled(reference: Schedule) -> Self {
        let d = Self::desk_pretrain();
        let r = Self::reference_pretrain();
        Schedule {
            peak: reference.peak / r.peak * d.peak,
            warmup: ((reference.warmup as f64 * d.warmup as f64 / r.warmup as f64).round() as u64).max(1),
        }
    }

    /// Reference downstream schedule for a task family.
    pub fn reference_downstream(family: &str) -> Result<Self> {
        let (peak, warmup) = match family {
            "nli" | "pair" => (0.2, 90_000),
            "document" => (0.2, 5_000),
            "intent" => (0.1, 100_000),
            "tagging" => (0.1, 40_000),
            other => return Err(Error::Config(format!("no schedule preset for `{other}`"))),
        };
        Ok(Schedule { peak, warmup })
    }
}

/// Root-mean-square of a tensor.
pub fn rms<F: Float>(t: &Tensor<F>) -> f64 {
    if t.len() == 0 {
        return 0.0;
    }
    (t.sum_sq().f64() / t.len() as f64).sqrt()
}

/// Rescales `grad` so its RMS is at most `threshold`.
pub fn clip<F: Float>(grad: &Tensor<F>, threshold: f64) -> Result<Tensor<F>> {
    if !(threshold > 0.0) {
        return Err(Error::Invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let r = rms(grad);
    if r > threshold {
        let s = F::of(threshold / r);
        Ok(grad.map(|x| x * s))
    } else {
        Ok(grad.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adafactor {
    pub beta1: f64,
    pub eps1: f64,
    pub decay: f64,
    /// Per-parameter RMS threshold applied to raw gradients; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl Default for Adafactor {
    fn default() -> Self {
        Adafactor {
            beta1: 0.9,
            eps1: 1e-30,
            decay: 0.8,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Slot<F: Float = f32> {
    Factored { r: Vec<F>, c: Vec<F>, m: Tensor<F> },
    Full { v: Tensor<F>, m: Tensor<F> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdafactorState<F: Float = f32> {
    pub t: u64,
    pub slots: BTreeMap<String, Slot<F>>,
}

impl<F: Float> Default for AdafactorState<F> {
    fn default() -> Self {
        AdafactorState {
            t: 0,
            slots: BTreeMap::new(),
        }
    }
}

impl Adafactor {
    /// One update of every parameter that has a gradient. Returns the learning rate used.
    pub fn step<F: Float>(
        &self,
        params: &mut ParamMap<F>,
        grads: &BTreeMap<String, Tensor<F>>,
        state: &mut AdafactorState<F>,
        schedule: &Schedule,
    ) -> Result<f64> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter `{name}`")))?;
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.dims(),
                    p.dims()
                )));
            }
        }
        let t = state.t + 1;
        let lr = schedule.lr(t)?;
        let beta2 = 1.0 - (t as f64).powf(-self.decay);
        let mut u: Vec<f64> = Vec::new();
        for (name, g) in grads {
            let g_scale = match self.grad_clip {
                Some(th) if !(th > 0.0) => {
                    return Err(Error::Invalid(format!("clip threshold must be positive, got {th}")));
                }
                Some(th) => {
                    let r = rms(g);
                    if r > th {
                        th / r
                    } else {
                        1.0
                    }
                }
                None => 1.0,
            };
            let p = params.get_mut(name).expect("checked above");
            let slot = state.slots.entry(name.clone()).or_insert_with(|| new_slot(p));
            u.clear();
            let gd = g.data();
            match slot {
                Slot::Factored { r, c, .. } => {
                    let (rows, cols) = (p.dims()[0], p.dims()[1]);
                    let mut row_mean = vec![0f64; rows];
                    let mut col_mean = vec![0f64; cols];
                    for (i, row) in gd.chunks_exact(cols).enumerate() {
                        let mut acc = 0.0;
                        for (cm, x) in col_mean.iter_mut().zip(row) {
                            let gx = x.f64() * g_scale;
                            let sq = gx * gx + self.eps1;
                            acc += sq;
                            *cm += sq;
                        }
                        row_mean[i] = acc;
                    }
                    for (ri, s) in r.iter_mut().zip(&row_mean) {
                        *ri = F::of(beta2 * ri.f64() + (1.0 - beta2) * s / cols as f64);
                    }
                    for (cj, s) in c.iter_mut().zip(&col_mean) {
                        *cj = F::of(beta2 * cj.f64() + (1.0 - beta2) * s / rows as f64);
                    }
                    // v̂_ij = r_i c_j / mean(r), so g / sqrt(v̂) = g · a_i · b_j.
                    let r_mean = r.iter().map(|x| x.f64()).sum::<f64>() / rows as f64;
                    let b: Vec<f64> = c.iter().map(|x| 1.0 / x.f64().sqrt()).collect();
                    for (row, ri) in gd.chunks_exact(cols).zip(r.iter()) {
                        let a = (r_mean / ri.f64()).sqrt() * g_scale;
                        u.extend(row.iter().zip(&b).map(|(x, bj)| x.f64() * a * bj));
                    }
                }
                Slot::Full { v, .. } => {
                    for (vi, gi) in v.data_mut().iter_mut().zip(gd) {
                        let gx = gi.f64() * g_scale;
                        *vi = F::of(beta2 * vi.f64() + (1.0 - beta2) * (gx * gx + self.eps1));
                        u.push(gx / vi.f64().sqrt());
                    }
                }
            }
            let u_rms = if u.is_empty() { 0.0 } else { (u.iter().map(|x| x * x).sum::<f64>() / u.len() as f64).sqrt() };
            let u_scale = if u_rms > 1.0 { 1.0 / u_rms } else { 1.0 };
            let m = match slot {
                Slot::Factored { m, .. } | Slot::Full { m, .. } => m,
            };
            for ((mi, ui), pi) in m.data_mut().iter_mut().zip(&u).zip(p.data_mut()) {
                let next = self.beta1 * mi.f64() + (1.0 - self.beta1) * ui * u_scale;
                *mi = F::of(next);
                *pi = F::of(pi.f64() - lr * next);
            }
        }
        state.t = t;
        Ok(lr)
    }
}

fn new_slot<F: Float>(p: &Tensor<F>) -> Slot<F> {
    let m = Tensor::zeros(p.dims());
    if p.rank() == 2 {
        Slot::Factored {
            r: vec![F::zero(); p.dims()[0]],
            c: vec![F::zero(); p.dims()[1]],
            m,
        }
    } else {
        Slot::Full {
            v: Tensor::zeros(p.dims()),
            m,
        }
    }
}

impl AdafactorState<f32> {
    /// Flattens the accumulators into named tensors for checkpointing.
    pub fn to_tensors(&self) -> ParamMap {
        let mut out = ParamMap::new();
        for (name, slot) in &self.slots {
            match slot {
                Slot::Factored { r, c, m } => {
                    out.insert(format!("opt.r/{name}"), Tensor::new(vec![r.len()], r.clone()).expect("length matches"));
                    out.insert(format!("opt.c/{name}"), Tensor::new(vec![c.len()], c.clone()).expect("length matches"));
                    out.insert(format!("opt.m/{name}"), m.clone());
                }
                Slot::Full { v, m } => {
                    out.insert(format!("opt.v/{name}"), v.clone());
                    out.insert(format!("opt.m/{name}"), m.clone());
                }
            }
        }
        out
    }

    pub fn from_tensors(tensors: &ParamMap, t: u64) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (key, m) in tensors {
            let Some(name) = key.strip_prefix("opt.m/") else { continue };
            let get = |kind: &str| {
                tensors
                    .get(&format!("opt.{kind}/{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for `{name}` lacks `{kind}`")))
            };
            let slot = if m.rank() == 2 {
                let (r, c) = (get("r")?, get("c")?);
                if r.len() != m.dims()[0] || c.len() != m.dims()[1] {
                    return Err(Error::Checkpoint(format!("optimizer accumulators of `{name}` mismatch")));
                }
                Slot::Factored {
                    r: r.data().to_vec(),
                    c: c.data().to_vec(),
                    m: m.clone(),
                }
            } else {
                let v = get("v")?;
                if v.dims() != m.dims() {
                    return Err(Error::Checkpoint(format!("optimizer accumulator of `{name}` mismatch")));
                }
                Slot::Full { v: v.clone(), m: m.clone() }
            };
            slots.insert(name.to_string(), slot);
        }
        Ok(AdafactorState { t, slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(2.0, 100).unwrap();
        assert_eq!(s.lr(100).unwrap(), 2.0);
        assert_eq!(s.lr(400).unwrap(), 1.0);
        assert_eq!(s.lr(50).unwrap(), 1.0);
        assert!(s.lr(0).is_err());
        assert!(Schedule::new(0.0, 10).is_err());
    }

    #[test]
    fn desk_scaling_maps_reference_onto_desk() {
        assert_eq!(Schedule::desk_scaled(Schedule::reference_pretrain()), Schedule::desk_pretrain());
        let t = Schedule::desk_scaled(Schedule::reference_downstream("tagging").unwrap());
        assert!((t.peak - 0.1 * 0.005 / 3.0).abs() < 1e-12);
        assert_eq!(t.warmup, 1000);
    }

    #[test]
    fn clip_examples() {
        let z = Tensor::<f64>::zeros(&[3]);
        assert_eq!(clip(&z, 1.0).unwrap(), z);
        let one = Tensor::<f64>::full(&[4], 1.0);
        assert_eq!(clip(&one, 1.0).unwrap(), one);
        let two = Tensor::<f64>::full(&[2, 2], 2.0);
        assert_eq!(clip(&two, 1.0).unwrap(), Tensor::full(&[2, 2], 1.0));
        assert!(clip(&two, 0.0).is_err());
    }

    #[test]
    fn rank_one_second_moment_is_exact() {
        let mut params = ParamMap::<f64>::new();
        params.insert("w".into(), Tensor::zeros(&[3, 4]));
        let mut grads = BTreeMap::new();
        grads.insert("w".into(), Tensor::full(&[3, 4], 1.0));
        let opt = Adafactor {
            grad_clip: None,
            ..Adafactor::default()
        };
        let mut st = AdafactorState::default();
        let s = Schedule::new(1.0, 1).unwrap();
        opt.step(&mut params, &grads, &mut st, &s).unwrap();
        // v̂ = 1 so u = 1 and m = 0.1 after the first step.
        for &p in params["w"].data() {
            assert!((p + 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut params = ParamMap::<f32>::new();
        params.insert("b".into(), Tensor::zeros(&[2]));
        let mut grads = BTreeMap::new();
        grads.insert("b".into(), Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap());
        let mut st = AdafactorState::default();
        let r = Adafactor::default().step(&mut params, &grads, &mut st, &Schedule::desk_pretrain());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn state_tensors_round_trip() {
        let mut params = ParamMap::<f32>::new();
        params.insert("w".into(), Tensor::full(&[2, 3], 0.5));
        params.insert("b".into(), Tensor::full(&[3], 0.5));
        let grads: BTreeMap<_, _> = params.iter().map(|(k, v)| (k.clone(), v.map(|x| x * 3.0))).collect();
        let mut st = AdafactorState::default();
        Adafactor::default()
            .step(&mut params, &grads, &mut st, &Schedule::desk_pretrain())
            .unwrap();
        let back = AdafactorState::from_tensors(&st.to_tensors(), st.t).unwrap();
        assert_eq!(back, st);
    }
}
