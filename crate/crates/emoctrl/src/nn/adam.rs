//! Adam with bias correction and optional global-norm gradient clipping.
//!
//! State is positional: callers must pass parameters in the same order on
//! every step.

use ndarray::ArrayD;

use super::Scalar;

pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_norm: Option<f64>,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<T>], grads: &[ArrayD<T>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(ArrayD::zeros(p.raw_dim()));
                self.v.push(ArrayD::zeros(p.raw_dim()));
            }
        }
        assert_eq!(self.m.len(), params.len(), "optimizer was built for a different parameter set");

        let gscale = match self.clip_norm {
            Some(clip) => {
                let mut sq = 0.0f64;
                for g in grads {
                    for &e in g.iter() {
                        let e = e.to_f64();
                        sq += e * e;
                    }
                }
                let norm = sq.sqrt();
                if norm > clip {
                    clip / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ib1, ib2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let gs = T::from_f64(gscale);
        let step = T::from_f64(self.lr / bc1);
        let denom_scale = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(self.eps);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            for ((pe, &ge), (me, ve)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let ge = ge * gs;
                *me = b1 * *me + ib1 * ge;
                *ve = b2 * *ve + ib2 * ge * ge;
                let vhat = (*ve * denom_scale * denom_scale).sqrt();
                *pe = *pe - step * *me / (vhat + eps);
            }
        }
    }
}
