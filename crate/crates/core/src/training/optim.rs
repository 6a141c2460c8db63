use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Bytes held by the moment buffers.
    pub fn nbytes(&self) -> usize {
        self.first.iter().chain(&self.second).map(Tensor::nbytes).sum()
    }

    /// One update of every parameter. Nothing is modified when any gradient
    /// is non-finite or misshaped.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGrad(name.to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, ((_, p), g)) in params.tensors_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv as f64;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gv;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gv * gv;
                *mv = mn as f32;
                *vv = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *w = (*w as f64 * decay - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their global Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::full(&[1], w));
        s
    }

    #[test]
    fn hand_computed_first_step() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, 0.9, 0.9, 1e-8, 0.0);
        opt.step(&mut p, &[Tensor::full(&[1], 0.1)], 2e-4).unwrap();
        // m = 0.01, v = 0.001, m_hat = 0.1, v_hat = 0.01
        let expected = 1.0 - 2e-4 * 0.1 / (0.1 + 1e-8);
        assert!((p.get(p.ids().next().unwrap()).data()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_and_decay() {
        let mut p = single(0.5);
        let mut opt = AdamW::new(&p, 0.9, 0.9, 1e-8, 0.0);
        opt.step(&mut p, &[Tensor::zeros(&[1])], 1e-3).unwrap();
        assert_eq!(p.iter().next().unwrap().1.data()[0], 0.5);
        let mut opt = AdamW::new(&p, 0.9, 0.9, 1e-8, 0.1);
        opt.step(&mut p, &[Tensor::zeros(&[1])], 1e-2).unwrap();
        assert!((p.iter().next().unwrap().1.data()[0] - 0.5 * (1.0 - 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(0.5);
        let mut opt = AdamW::new(&p, 0.9, 0.9, 1e-8, 0.0);
        let err = opt.step(&mut p, &[Tensor::full(&[1], f32::NAN)], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGrad(ref n) if n == "w"));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::full(&[1], 3.0f32), Tensor::full(&[1], 4.0f32)];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
    }
}
