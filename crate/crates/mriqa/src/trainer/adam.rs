//! Bias-corrected Adam over a parameter set.

use crate::autodiff::Scalar;
use crate::backbone::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![T::ZERO; e.value.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with per-parameter gradients (dense, one slot per
    /// registered parameter, same order as the set).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient slot count mismatch");
        self.t += 1;
        let b1 = T::from_f64(BETA1);
        let b2 = T::from_f64(BETA2);
        let one_m_b1 = T::from_f64(1.0 - BETA1);
        let one_m_b2 = T::from_f64(1.0 - BETA2);
        let bc1 = T::from_f64(1.0 - BETA1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - BETA2.powi(self.t as i32));
        let eps = T::from_f64(EPS);
        let lr = T::from_f64(lr);
        for (pid, grad) in grads.iter().enumerate() {
            assert_eq!(grad.len(), self.m[pid].len(), "gradient shape mismatch");
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let data = params.values_mut(pid);
            for e in 0..grad.len() {
                let gr = grad[e];
                m[e] = b1 * m[e] + one_m_b1 * gr;
                v[e] = b2 * v[e] + one_m_b2 * gr * gr;
                let mhat = m[e] / bc1;
                let vhat = v[e] / bc2;
                data[e] = data[e] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::TensorData;

    fn one_param(values: Vec<f64>) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let n = values.len();
        p.add("w", TensorData::new(vec![n], values));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(vec![1.5, -2.0, 0.25]);
        let mut adam = Adam::new(&params);
        for _ in 0..5 {
            adam.step(&mut params, &[vec![0.0, 0.0, 0.0]], 0.1);
        }
        assert_eq!(params.entry(0).value.data.as_slice(), &[1.5, -2.0, 0.25]);
    }

    // analytic first step: bias correction makes mhat/sqrt(vhat) = g/|g|
    #[test]
    fn first_step_has_unit_normalized_magnitude() {
        let mut params = one_param(vec![1.0, 1.0]);
        let mut adam = Adam::new(&params);
        let lr = 0.05;
        adam.step(&mut params, &[vec![3.0, -0.004]], lr);
        let got = params.entry(0).value.data.clone();
        for (i, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let expect = 1.0 - sign * lr; // minus lr * sign(g), up to eps
            assert!((got[i] - expect).abs() < 1e-5, "elem {i}: {}", got[i]);
        }
    }

    // independent reference trace on a 2-parameter quadratic
    #[test]
    fn quadratic_converges_and_matches_reference_trace() {
        // f(w) = 2 (w0 - 3)^2 + 0.5 (w1 + 1)^2, minimizer (3, -1)
        let grad = |w: &[f64]| vec![4.0 * (w[0] - 3.0), 1.0 * (w[1] + 1.0)];

        let mut params = one_param(vec![0.0, 0.0]);
        let mut adam = Adam::new(&params);
        let lr = 0.1;

        // reference recurrence computed independently of the implementation
        let mut rw = [0.0f64, 0.0];
        let mut rm = [0.0f64, 0.0];
        let mut rv = [0.0f64, 0.0];
        for t in 1..=600 {
            let w = params.entry(0).value.data.as_slice().to_vec();
            let g = grad(&w);
            adam.step(&mut params, &[g], lr);

            let rg = grad(&rw);
            for i in 0..2 {
                rm[i] = BETA1 * rm[i] + (1.0 - BETA1) * rg[i];
                rv[i] = BETA2 * rv[i] + (1.0 - BETA2) * rg[i] * rg[i];
                let mhat = rm[i] / (1.0 - BETA1.powi(t));
                let vhat = rv[i] / (1.0 - BETA2.powi(t));
                rw[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
            let got = params.entry(0).value.data.as_slice();
            assert!((got[0] - rw[0]).abs() < 1e-12 && (got[1] - rw[1]).abs() < 1e-12);
        }
        let final_w = params.entry(0).value.data.as_slice();
        assert!((final_w[0] - 3.0).abs() < 1e-3, "w0 = {}", final_w[0]);
        assert!((final_w[1] + 1.0).abs() < 1e-3, "w1 = {}", final_w[1]);
    }
}
