use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

/// Adam with bias correction; moment estimates are keyed by parameter name so
/// they can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, var) in &params {
            let z = var.as_tensor().zeros_like()?;
            moments.insert(name.clone(), (z.clone(), z));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            params,
            moments,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            // Leaf gradients can still reference the forward graph; keeping them
            // in the moments would retain every step's graph.
            let g = &g.detach();
            let (m, v) = self.moments.get_mut(name).expect("moment per parameter");
            let m_next = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v_next = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&m_next / c1)? / ((&v_next / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            *m = m_next;
            *v = v_next;
        }
        Ok(())
    }

    /// Moments as `m/<name>` and `v/<name>` tensors.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m/{name}"), m.copy()?);
            out.insert(format!("v/{name}"), v.copy()?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, steps: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, (m, v)) in self.moments.iter_mut() {
            let get = |k: String| {
                state
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::LayerTable(format!("optimizer state is missing `{k}`")))
            };
            let m_new = get(format!("m/{name}"))?;
            let v_new = get(format!("v/{name}"))?;
            if m_new.dims() != m.dims() || v_new.dims() != v.dims() {
                return Err(Error::ShapeMismatch(format!("optimizer moments for `{name}`")));
            }
            *m = m_new.to_dtype(m.dtype())?;
            *v = v_new.to_dtype(v.dtype())?;
        }
        self.step = steps;
        Ok(())
    }
}
