//! Per-stage projection heads: 2-layer MLP over pooled features followed by
//! row L2-normalization. Global and local heads are separate instances with
//! non-shared weights.

use super::nn::{
    l2_normalize_backward, l2_normalize_rows, relu2, relu2_backward, L2NormCache, Linear,
    LinearCache,
};
use crate::error::Result;
use ndarray::{Array2, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct HeadCache {
    c1: LinearCache,
    hidden: Array2<f64>, // post-relu
    c2: LinearCache,
    norm: L2NormCache,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            fc1: Linear::new(in_dim, hidden_dim, rng),
            fc2: Linear::new(hidden_dim, out_dim, rng),
        }
    }

    pub fn infer(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let h = relu2(&self.fc1.infer(x));
        let (y, _) = l2_normalize_rows(&self.fc2.infer(&h))?;
        Ok(y)
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, HeadCache)> {
        let (a, c1) = self.fc1.forward(x);
        let hidden = relu2(&a);
        let (z, c2) = self.fc2.forward(&hidden);
        let (y, norm) = l2_normalize_rows(&z)?;
        Ok((
            y,
            HeadCache {
                c1,
                hidden,
                c2,
                norm,
            },
        ))
    }

    pub fn backward(&mut self, cache: &HeadCache, dy: &Array2<f64>) -> Array2<f64> {
        let dz = l2_normalize_backward(&cache.norm, dy);
        let dh = self.fc2.backward(&cache.c2, &dz);
        let da = relu2_backward(&cache.hidden, &dh);
        self.fc1.backward(&cache.c1, &da)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'_, f64>)) {
        f(format!("{prefix}.fc1.w"), self.fc1.w.view().into_dyn());
        f(format!("{prefix}.fc1.b"), self.fc1.b.view().into_dyn());
        f(format!("{prefix}.fc2.w"), self.fc2.w.view().into_dyn());
        f(format!("{prefix}.fc2.b"), self.fc2.b.view().into_dyn());
    }

    pub fn visit_params_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>),
    ) {
        f(format!("{prefix}.fc1.w"), self.fc1.w.view_mut().into_dyn());
        f(format!("{prefix}.fc1.b"), self.fc1.b.view_mut().into_dyn());
        f(format!("{prefix}.fc2.w"), self.fc2.w.view_mut().into_dyn());
        f(format!("{prefix}.fc2.b"), self.fc2.b.view_mut().into_dyn());
    }

    pub fn visit_train(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, ArrayViewMutD<'_, f64>, ArrayViewD<'_, f64>, bool),
    ) {
        f(
            format!("{prefix}.fc1.w"),
            self.fc1.w.view_mut().into_dyn(),
            self.fc1.gw.view().into_dyn(),
            self.fc1.touched,
        );
        f(
            format!("{prefix}.fc1.b"),
            self.fc1.b.view_mut().into_dyn(),
            self.fc1.gb.view().into_dyn(),
            self.fc1.touched,
        );
        f(
            format!("{prefix}.fc2.w"),
            self.fc2.w.view_mut().into_dyn(),
            self.fc2.gw.view().into_dyn(),
            self.fc2.touched,
        );
        f(
            format!("{prefix}.fc2.b"),
            self.fc2.b.view_mut().into_dyn(),
            self.fc2.gb.view().into_dyn(),
            self.fc2.touched,
        );
    }

    pub fn zero_grads(&mut self) {
        self.fc1.zero_grads();
        self.fc2.zero_grads();
    }
}
