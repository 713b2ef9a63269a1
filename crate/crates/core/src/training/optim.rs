use tch::Tensor;

use crate::error::Result;
use crate::nets::TensorArchive;

/// Adam with bias correction; its moments live in checkpoints.
#[derive(Debug)]
pub struct Adam {
    params: Vec<(String, Tensor)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, beta1: f64, beta2: f64) -> Self {
        let first = params.iter().map(|(_, p)| p.zeros_like()).collect();
        let second = params.iter().map(|(_, p)| p.zeros_like()).collect();
        Self {
            params,
            first,
            second,
            steps: 0,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, lr: f64) {
        let _guard = tch::no_grad_guard();
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (((_, p), m), v) in self.params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad();
            if !g.defined() {
                continue;
            }
            let _ = m.g_mul_scalar_(self.beta1).g_add_(&(&g * (1.0 - self.beta1)));
            let _ = v.g_mul_scalar_(self.beta2).g_add_(&(g.square() * (1.0 - self.beta2)));
            let update = (&*m / c1) / ((&*v / c2).sqrt() + self.eps) * lr;
            let _ = p.g_sub_(&update);
        }
    }

    pub fn write_into(&self, archive: &mut TensorArchive, prefix: &str) {
        for ((name, _), (m, v)) in self.params.iter().zip(self.first.iter().zip(&self.second)) {
            archive.insert(format!("{prefix}m/{name}"), m);
            archive.insert(format!("{prefix}v/{name}"), v);
        }
        archive.insert(format!("{prefix}steps"), &Tensor::from_slice(&[self.steps as i64]));
    }

    pub fn restore_from(&mut self, archive: &TensorArchive, prefix: &str) -> Result<()> {
        let _guard = tch::no_grad_guard();
        for ((name, _), (m, v)) in self.params.iter().zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            m.copy_(archive.get(&format!("{prefix}m/{name}"))?);
            v.copy_(archive.get(&format!("{prefix}v/{name}"))?);
        }
        self.steps = archive.get(&format!("{prefix}steps"))?.int64_value(&[0]) as u64;
        Ok(())
    }
}
