use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::ModelParameters;
use crate::tape::Gradients;

/// Adaptive-moment optimizer with a non-decreasing second-moment maximum
/// and bias correction on both moments.
pub struct Amsgrad {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
    second_moment_max: BTreeMap<String, Vec<f64>>,
}

impl Default for Amsgrad {
    fn default() -> Self {
        Amsgrad {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            second_moment_max: BTreeMap::new(),
        }
    }
}

impl Amsgrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    #[cfg(test)]
    fn moment_state(&self, path: &str) -> (&[f64], &[f64]) {
        (&self.second_moment[path], &self.second_moment_max[path])
    }

    /// Apply one update to every trainable parameter that has a gradient.
    pub fn step(
        &mut self,
        params: &mut ModelParameters,
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let paths: Vec<String> = params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(p, _)| p.clone())
            .collect();
        for path in paths {
            let Some(grad) = grads.by_path(&path) else { continue };
            let grad = grad.data();
            let n = grad.len();
            let m = self.first_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let vmax = self.second_moment_max.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
            let theta = params.get_mut(&path)?.data_mut();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                if v[i] > vmax[i] {
                    vmax[i] = v[i];
                }
                let denom = (vmax[i] / bc2).sqrt() + self.eps;
                theta[i] -= lr * (m[i] / bc1) / denom;
            }
        }
        Ok(())
    }
}
