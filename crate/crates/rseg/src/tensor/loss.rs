//! Loss heads: softmax cross-entropy for classification, smooth L1 for box
//! regression, per-pixel binary cross-entropy for masks. All reduce to a
//! scalar mean and reject non-finite inputs.

use super::tape::{BackwardFn, Tape, Var};
use super::{Element, Tensor, TensorError};

impl<T: Element> Tape<T> {
    /// Mean softmax cross-entropy over rows of an (N, K) logit matrix against
    /// integer class targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let (n, k) = self.value(logits).dims2("softmax_cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{n} rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("target class {bad} out of range for {k} classes"),
            });
        }
        if !self.value(logits).is_all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_cross_entropy" });
        }
        let lv = self.value(logits).data();
        let mut total = T::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut lse = T::ZERO;
            for &v in row {
                lse += (v - mx).exp();
            }
            total += lse.ln() + mx - row[t];
        }
        let loss = total * T::from_f64(1.0 / n as f64);
        let requires = self.requires_grad(logits);
        let step: Option<BackwardFn<T>> = if requires {
            let targets = targets.to_vec();
            Some(Box::new(move |vals, gout, grads| {
                let lv = vals.value(logits).data();
                let g = gout.item() * T::from_f64(1.0 / n as f64);
                if let Some(dl) = grads.buf(logits, &[n, k]) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * k..(r + 1) * k];
                        let mut mx = row[0];
                        for &v in row {
                            mx = mx.maximum(v);
                        }
                        let mut denom = T::ZERO;
                        for &v in row {
                            denom += (v - mx).exp();
                        }
                        for c in 0..k {
                            let p = (row[c] - mx).exp() / denom;
                            let ind = if c == t { T::ONE } else { T::ZERO };
                            dl[r * k + c] += g * (p - ind);
                        }
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), requires, step))
    }

    /// Smooth L1 (Huber with delta 1) between two same-shape tensors, mean
    /// over all elements: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
    pub fn smooth_l1(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        if self.value(pred).shape() != self.value(target).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(pred).shape(),
                    self.value(target).shape()
                ),
            });
        }
        if !self.value(pred).is_all_finite() || !self.value(target).is_all_finite() {
            return Err(TensorError::NonFinite { op: "smooth_l1" });
        }
        let numel = self.value(pred).len();
        let half = T::from_f64(0.5);
        let mut total = T::ZERO;
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let d = (p - t).abs();
            total += if d < T::ONE { half * d * d } else { d - half };
        }
        let loss = total * T::from_f64(1.0 / numel as f64);
        let shape = self.value(pred).shape().to_vec();
        let requires = self.requires_grad(pred) || self.requires_grad(target);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let g = gout.item() * T::from_f64(1.0 / numel as f64);
                let pv = vals.value(pred).data();
                let tv = vals.value(target).data();
                // d/dpred = clamp(pred - target, -1, 1); d/dtarget is its negation
                if grads.needs(pred) {
                    let dp = grads.buf(pred, &shape).unwrap();
                    for (i, (&p, &t)) in pv.iter().zip(tv).enumerate() {
                        let d = (p - t).maximum(-T::ONE).minimum(T::ONE);
                        dp[i] += g * d;
                    }
                }
                if grads.needs(target) {
                    let dt = grads.buf(target, &shape).unwrap();
                    for (i, (&p, &t)) in pv.iter().zip(tv).enumerate() {
                        let d = (p - t).maximum(-T::ONE).minimum(T::ONE);
                        dt[i] -= g * d;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), requires, step))
    }

    /// Per-element binary cross-entropy on logits against targets in [0, 1],
    /// mean over all elements. Computed in the standard overflow-safe form.
    pub fn binary_cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: Var,
    ) -> Result<Var, TensorError> {
        if self.value(logits).shape() != self.value(targets).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "binary_cross_entropy",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(logits).shape(),
                    self.value(targets).shape()
                ),
            });
        }
        if !self.value(logits).is_all_finite() || !self.value(targets).is_all_finite() {
            return Err(TensorError::NonFinite { op: "binary_cross_entropy" });
        }
        if self.value(targets).data().iter().any(|&t| t < T::ZERO || t > T::ONE) {
            return Err(TensorError::InvalidArgument {
                op: "binary_cross_entropy",
                detail: "targets must lie in [0, 1]".into(),
            });
        }
        let numel = self.value(logits).len();
        let mut total = T::ZERO;
        for (&x, &t) in self.value(logits).data().iter().zip(self.value(targets).data()) {
            // max(x, 0) - x * t + ln(1 + exp(-|x|))
            total += x.maximum(T::ZERO) - x * t + (T::ONE + (-x.abs()).exp()).ln();
        }
        let loss = total * T::from_f64(1.0 / numel as f64);
        let shape = self.value(logits).shape().to_vec();
        let requires = self.requires_grad(logits);
        let step: Option<BackwardFn<T>> = if requires {
            Some(Box::new(move |vals, gout, grads| {
                let g = gout.item() * T::from_f64(1.0 / numel as f64);
                let xv = vals.value(logits).data();
                let tv = vals.value(targets).data();
                if let Some(dl) = grads.buf(logits, &shape) {
                    for (i, (&x, &t)) in xv.iter().zip(tv).enumerate() {
                        let s = if x >= T::ZERO {
                            T::ONE / (T::ONE + (-x).exp())
                        } else {
                            let e = x.exp();
                            e / (T::ONE + e)
                        };
                        dl[i] += g * (s - t);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::scalar(loss), requires, step))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_zero_at_equality() {
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let t = tape.constant(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let l = tape.smooth_l1(p, t).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn smooth_l1_quadratic_and_linear_regions() {
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(Tensor::from_vec(vec![0.5, 3.0]));
        let t = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let l = tape.smooth_l1(p, t).unwrap();
        // (0.5 * 0.25 + (3 - 0.5)) / 2
        assert!((tape.value(l).item() - (0.125 + 2.5) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn bce_saturates_on_confident_correct_logit() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(20.0));
        let t = tape.constant(Tensor::scalar(1.0));
        let l = tape.binary_cross_entropy_logits(x, t).unwrap();
        assert!(tape.value(l).item() < 1e-6);
    }

    #[test]
    fn bce_rejects_non_finite() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(f32::NAN));
        let t = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.binary_cross_entropy_logits(x, t),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        assert!((tape.value(l).item() - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn losses_are_non_negative_on_random_inputs() {
        let mut tape = Tape::<f32>::new();
        let logits: Vec<f32> = (0..20).map(|i| ((i * 37) as f32).sin() * 3.0).collect();
        let x = tape.constant(Tensor::new(vec![10, 2], logits).unwrap());
        let tgt: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let l = tape.softmax_cross_entropy(x, &tgt).unwrap();
        assert!(tape.value(l).item() >= 0.0);
    }
}
