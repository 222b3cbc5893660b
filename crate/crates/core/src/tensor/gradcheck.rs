//! Finite-difference gradient checking.
//!
//! Analytic gradients from [`Tensor::backward`] are compared against central
//! differences with step `h = 1e-5` at 64-bit precision. A failing check is a
//! report, not an error; callers decide what to do with it.

use super::{ops, Tensor};
use crate::rng::Rng;

/// Central-difference step.
pub const STEP: f64 = 1e-5;

/// Outcome of checking one op at one or more input points.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} over {} points, max relative error {:.3e} (tolerance {:.1e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.op,
            self.points,
            self.max_rel_err,
            self.tolerance
        )
    }
}

/// Checks one scalar-valued function at one input point.
///
/// `f` rebuilds the graph from the given leaves on every call; every leaf is
/// differentiated. Returns the max relative error across all elements.
pub fn grad_check<F>(name: &str, f: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    GradCheckReport {
        op: name.to_string(),
        points: 1,
        max_rel_err: max_rel_error(&f, inputs),
        tolerance,
    }
}

fn max_rel_error<F>(f: &F, inputs: &[Tensor<f64>]) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs);
    assert_eq!(loss.numel(), 1, "grad_check requires a scalar function");
    loss.backward().expect("grad_check loss must be differentiable");

    let mut worst = 0.0f64;
    for t in inputs {
        let analytic = t
            .grad()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let base = t.to_vec();
        for j in 0..base.len() {
            let mut plus = base.clone();
            plus[j] += STEP;
            t.replace_data(|d| d.copy_from_slice(&plus));
            let f_plus = f(inputs).item();

            let mut minus = base.clone();
            minus[j] -= STEP;
            t.replace_data(|d| d.copy_from_slice(&minus));
            let f_minus = f(inputs).item();

            t.replace_data(|d| d.copy_from_slice(&base));
            let numeric = (f_plus - f_minus) / (2.0 * STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[j] - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

fn leaf(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::<f64>::randn(shape, 1.0, rng).with_requires_grad(true)
}

/// Random probe coefficients turning a tensor-valued op into a scalar.
fn probe(numel: usize, rng: &mut Rng) -> Vec<f64> {
    (0..numel).map(|_| rng.normal()).collect()
}

/// Samples with magnitude bounded away from zero (for kinked activations).
fn leaf_away_from_zero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let mut v = rng.normal();
            while v.abs() < margin {
                v = rng.normal();
            }
            v
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap().with_requires_grad(true)
}

/// Pool input whose 2x2 windows have a clear argmax margin, so the finite
/// difference never crosses a tie.
fn pool_input(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut data = vec![0.0f64; n * c * h * w];
    for img in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                loop {
                    let vals: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                    let mut sorted = vals.clone();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if sorted[0] - sorted[1] > 1e-2 {
                        let base = img * h * w;
                        data[base + (2 * oy) * w + 2 * ox] = vals[0];
                        data[base + (2 * oy) * w + 2 * ox + 1] = vals[1];
                        data[base + (2 * oy + 1) * w + 2 * ox] = vals[2];
                        data[base + (2 * oy + 1) * w + 2 * ox + 1] = vals[3];
                        break;
                    }
                }
            }
        }
    }
    Tensor::from_vec(shape, data).unwrap().with_requires_grad(true)
}

/// Runs the finite-difference oracle over every differentiable op at
/// `points` random input points each. All checks share one tolerance.
pub fn standard_suite(points: usize, tolerance: f64, seed: u64) -> Vec<GradCheckReport> {
    let mut rng = Rng::from_seed(seed);
    let mut reports = Vec::new();

    // conv2d: gradients for input, weight and bias.
    reports.push(run_points("conv2d", points, tolerance, &mut rng, |rng| {
        let (cin, cout) = (1 + rng.uniform_usize(0, 2), 1 + rng.uniform_usize(0, 2));
        let (h, w) = (4 + rng.uniform_usize(0, 2), 4 + rng.uniform_usize(0, 2));
        let stride = 1 + rng.uniform_usize(0, 2);
        let padding = rng.uniform_usize(0, 2);
        let x = leaf(&[1, cin, h, w], rng);
        let wt = leaf(&[cout, cin, 3, 3], rng);
        let b = leaf(&[cout], rng);
        let out = ops::conv2d(&x, &wt, &b, stride, padding).unwrap();
        let coeffs = probe(out.numel(), rng);
        (vec![x, wt, b], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::conv2d(&ins[0], &ins[1], &ins[2], stride, padding).unwrap();
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    // conv_transpose2d with the 2x upsampling geometry and a stride-1 variant.
    reports.push(run_points("conv_transpose2d", points, tolerance, &mut rng, |rng| {
        let (cin, cout) = (1 + rng.uniform_usize(0, 2), 1 + rng.uniform_usize(0, 2));
        let (h, w) = (3 + rng.uniform_usize(0, 2), 3 + rng.uniform_usize(0, 2));
        let (stride, padding, output_padding) = if rng.uniform() < 0.5 {
            (2, 1, 1)
        } else {
            (1, 1, 0)
        };
        let x = leaf(&[1, cin, h, w], rng);
        let wt = leaf(&[cin, cout, 3, 3], rng);
        let b = leaf(&[cout], rng);
        let out = ops::conv_transpose2d(&x, &wt, &b, stride, padding, output_padding).unwrap();
        let coeffs = probe(out.numel(), rng);
        (vec![x, wt, b], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::conv_transpose2d(&ins[0], &ins[1], &ins[2], stride, padding, output_padding).unwrap();
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    // maxpool2d on inputs with unambiguous window maxima.
    reports.push(run_points("maxpool2d", points, tolerance, &mut rng, |rng| {
        let c = 1 + rng.uniform_usize(0, 2);
        let x = pool_input(&[1, c, 4, 4], rng);
        let coeffs = probe(c * 4, rng);
        (vec![x], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::maxpool2d(&ins[0]).unwrap();
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    // prelu at points bounded away from the kink; slope gets gradient too.
    reports.push(run_points("prelu", points, tolerance, &mut rng, |rng| {
        let x = leaf_away_from_zero(&[2, 3], 0.1, rng);
        let slope = Tensor::scalar(0.25 + 0.1 * rng.normal()).with_requires_grad(true);
        let coeffs = probe(6, rng);
        (vec![x, slope], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::prelu(&ins[0], &ins[1]).unwrap();
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    // relu at points bounded away from the kink.
    reports.push(run_points("relu", points, tolerance, &mut rng, |rng| {
        let x = leaf_away_from_zero(&[2, 4], 0.1, rng);
        let coeffs = probe(8, rng);
        (vec![x], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::relu(&ins[0]);
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    // mse_loss: both sides receive gradient.
    reports.push(run_points("mse_loss", points, tolerance, &mut rng, |rng| {
        let a = leaf(&[2, 5], rng);
        let b = leaf(&[2, 5], rng);
        let c = rng.normal();
        (vec![a, b], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::mse_loss(&ins[0], &ins[1]).unwrap();
            ops::dot(&y, &[c]).unwrap()
        }))
    }));

    // power_normalize: the scaling itself is differentiated.
    reports.push(run_points("power_normalize", points, tolerance, &mut rng, |rng| {
        let x = leaf(&[1, 2, 2, 3], rng);
        let coeffs = probe(12, rng);
        (vec![x], Box::new(move |ins: &[Tensor<f64>]| {
            let y = ops::power_normalize(&ins[0]).unwrap();
            ops::dot(&y, &coeffs).unwrap()
        }))
    }));

    reports
}

type PointFn = Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>;

fn run_points<G>(
    name: &str,
    points: usize,
    tolerance: f64,
    rng: &mut Rng,
    mut make_point: G,
) -> GradCheckReport
where
    G: FnMut(&mut Rng) -> (Vec<Tensor<f64>>, PointFn),
{
    let mut worst = 0.0f64;
    for _ in 0..points {
        let (inputs, f) = make_point(rng);
        let err = max_rel_error(&|ins: &[Tensor<f64>]| f(ins), &inputs);
        if err > worst {
            worst = err;
        }
    }
    GradCheckReport {
        op: name.to_string(),
        points,
        max_rel_err: worst,
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_gradcheck_is_essentially_exact() {
        let mut rng = Rng::from_seed(21);
        let a = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng).with_requires_grad(true);
        let b = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng).with_requires_grad(true);
        let report = grad_check(
            "mse_loss",
            |ins| ops::mse_loss(&ins[0], &ins[1]).unwrap(),
            &[a, b],
            1e-8,
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn prelu_away_from_kink_is_tight() {
        let mut rng = Rng::from_seed(22);
        for _ in 0..5 {
            let x = leaf_away_from_zero(&[2, 3], 0.1, &mut rng);
            let slope = Tensor::scalar(0.25).with_requires_grad(true);
            let coeffs = probe(6, &mut rng);
            let report = grad_check(
                "prelu",
                move |ins| {
                    let y = ops::prelu(&ins[0], &ins[1]).unwrap();
                    ops::dot(&y, &coeffs).unwrap()
                },
                &[x, slope],
                1e-6,
            );
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn standard_suite_passes_quickly() {
        for report in standard_suite(3, 1e-4, 99) {
            assert!(report.passed(), "{report}");
        }
    }
}
