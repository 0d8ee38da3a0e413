//! Central finite-difference verification of tape gradients.
//!
//! The check runs entirely in f64: analytic gradients come from one tape
//! backward pass, numeric ones from `(f(x+h) - f(x-h)) / 2h` with fresh
//! forward-only evaluations, so the two routes share no code path beyond the
//! forward rules themselves. Default step 1e-4, default tolerance 1e-3 on
//! `|ad - fd| / max(|ad|, |fd|, 1e-6)`.
//!
//! Inputs should be sampled away from kinks (relu at 0, smooth L1 at |d| = 1,
//! pooling ties); the helpers here nudge random draws off those points.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Tape, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input index, element index) of the worst probe.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare tape gradients of `f` (a scalar-valued graph builder over the
/// given leaves) against central finite differences.
///
/// `probes_per_input` bounds how many elements of each leaf are perturbed;
/// `None` sweeps every element. Probe positions are drawn from `rng`, so the
/// sweep is reproducible under a fixed seed.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    mut f: F,
    step: f64,
    probes_per_input: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> GradCheckReport
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Var,
{
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &vars);
    tape.backward(root).expect("gradcheck root must be scalar");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>], f: &mut F| -> f64 {
        let mut tape = Tape::<f64>::new_inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars);
        tape.value(root).item()
    };

    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let probe_ids: Vec<usize> = match probes_per_input {
            Some(p) if p < n => (0..p).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for ei in probe_ids {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work, &mut f);
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work, &mut f);
            work[ti].data_mut()[ei] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic[ti].data()[ei];
            let e = rel_err(ad, fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((ti, ei));
            }
        }
    }
    report
}

/// Uniform draw in [-1, 1] pushed away from zero by `margin` — keeps relu
/// and pooling comparisons off their kinks.
pub fn smooth_random<T: Element>(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            let v = if v.abs() < margin {
                if v >= 0.0 { margin } else { -margin }
            } else {
                v
            };
            T::from_f64(v)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[2, 3, 8, 8], 0.05, &mut r);
        let w = smooth_random::<f64>(&[4, 3, 3, 3], 0.05, &mut r);
        let b = smooth_random::<f64>(&[4], 0.05, &mut r);
        let report = check_gradients(
            &[x, w, b],
            |tape, v| {
                let c = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
                tape.sum(c)
            },
            DEFAULT_STEP,
            Some(40),
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn strided_conv_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[1, 2, 9, 9], 0.05, &mut r);
        let w = smooth_random::<f64>(&[3, 2, 3, 3], 0.05, &mut r);
        let b = smooth_random::<f64>(&[3], 0.05, &mut r);
        let report = check_gradients(
            &[x, w, b],
            |tape, v| {
                let c = tape.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
                tape.sum(c)
            },
            DEFAULT_STEP,
            Some(30),
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_conv_relu_sum_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[1, 2, 6, 6], 0.05, &mut r);
        let w = smooth_random::<f64>(&[2, 2, 3, 3], 0.05, &mut r);
        let b = smooth_random::<f64>(&[2], 0.05, &mut r);
        let report = check_gradients(
            &[x, w, b],
            |tape, v| {
                let c = tape.conv2d(v[0], v[1], v[2], 1, 0).unwrap();
                let a = tape.relu(c);
                tape.sum(a)
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn softmax_ce_gradients() {
        let mut r = rng();
        let logits = smooth_random::<f64>(&[6, 2], 0.0, &mut r);
        let report = check_gradients(
            &[logits],
            |tape, v| tape.softmax_cross_entropy(v[0], &[0, 1, 1, 0, 1, 0]).unwrap(),
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn group_norm_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[2, 4, 3, 3], 0.0, &mut r);
        let gamma = smooth_random::<f64>(&[4], 0.3, &mut r);
        let beta = smooth_random::<f64>(&[4], 0.0, &mut r);
        let report = check_gradients(
            &[x, gamma, beta],
            |tape, v| {
                let y = tape.group_norm(v[0], 2, v[1], v[2]).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn bilinear_resize_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[1, 2, 5, 5], 0.0, &mut r);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let y = tape.bilinear_resize(v[0], 9, 7).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn linear_and_bce_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[3, 5], 0.0, &mut r);
        let w = smooth_random::<f64>(&[4, 5], 0.0, &mut r);
        let b = smooth_random::<f64>(&[4], 0.0, &mut r);
        let tgt: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let target = Tensor::new(vec![3, 4], tgt).unwrap();
        let report = check_gradients(
            &[x, w, b],
            |tape, v| {
                let y = tape.linear(v[0], v[1], v[2]).unwrap();
                let t = tape.constant(target.clone());
                tape.binary_cross_entropy_logits(y, t).unwrap()
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn smooth_l1_gradients_off_kink() {
        let mut r = rng();
        // keep |pred - target| away from the |d| = 1 kink
        let pred = smooth_random::<f64>(&[8], 0.0, &mut r);
        let report = check_gradients(
            &[pred],
            |tape, v| {
                let t = tape.constant(Tensor::from_vec(vec![3.0, 3.0, 3.0, 3.0, 0.1, 0.1, 0.1, 0.1]));
                tape.smooth_l1(v[0], t).unwrap()
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn max_pool_gradients() {
        let mut r = rng();
        let x = smooth_random::<f64>(&[1, 2, 6, 6], 0.1, &mut r);
        let report = check_gradients(
            &[x],
            |tape, v| {
                let y = tape.max_pool_2x2(v[0]).unwrap();
                tape.sum(y)
            },
            DEFAULT_STEP,
            None,
            &mut r,
        );
        assert!(report.passes(DEFAULT_TOLERANCE), "max rel err {}", report.max_rel_err);
    }
}
