//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward passes (under [`no_grad`]),
//! so it is independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

/// Leaves whose true gradient is zero (a bias feeding straight into a norm,
/// say) only see round-off in the numeric estimate; this keeps that noise from
/// reading as a 100% error.
pub const NORM_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-leaf relative error
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, NORM_FLOOR)`.
    pub max_rel_error: f64,
    /// Number of coordinates that were perturbed.
    pub coords_checked: usize,
    /// Coordinates re-measured with a smaller step (see [`GradCheckOptions::kink_tolerance`]).
    pub coords_refined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Perturb at most this many randomly chosen coordinates per leaf.
    pub max_coords: Option<usize>,
    /// For piecewise-smooth losses (ReLU): a coordinate whose own relative
    /// error exceeds this is re-measured with step `h/10`, keeping the better
    /// estimate. A step that straddles a kink stops doing so as the step
    /// shrinks; a wrong analytic gradient does not.
    pub kink_tolerance: Option<f64>,
}

impl GradCheckOptions {
    pub fn new(h: f64) -> Self {
        GradCheckOptions {
            h,
            max_coords: None,
            kink_tolerance: None,
        }
    }
}

/// Compares analytic gradients of the scalar returned by `loss_fn` with
/// respect to `leaves` against central differences with step `h`.
///
/// When `max_coords` is set, at most that many randomly chosen coordinates per
/// leaf are perturbed; otherwise every coordinate is.
pub fn check_gradients<R: Rng>(
    loss_fn: impl Fn() -> Result<Tensor>,
    leaves: &[Tensor],
    h: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        max_coords,
        ..GradCheckOptions::new(h)
    };
    check_gradients_with(loss_fn, leaves, &opts, rng)
}

pub fn check_gradients_with<R: Rng>(
    loss_fn: impl Fn() -> Result<Tensor>,
    leaves: &[Tensor],
    opts: &GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    loss_fn()?.backward()?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        coords_refined: 0,
    };
    for leaf in leaves {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let base = leaf.to_vec();
        let central = |i: usize, h: f64| -> Result<f64> {
            let eval = |v: f64| -> Result<f64> {
                let mut d = base.clone();
                d[i] = v;
                leaf.set_data(d)?;
                Ok(no_grad(&loss_fn)?.item())
            };
            Ok((eval(base[i] + h)? - eval(base[i] - h)?) / (2.0 * h))
        };
        let coord_error = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(NORM_FLOOR);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let a = analytic[i];
            let mut numeric = central(i, opts.h)?;
            if let Some(tol) = opts.kink_tolerance {
                if coord_error(a, numeric) > tol {
                    report.coords_refined += 1;
                    let fine = central(i, opts.h / 10.0)?;
                    if coord_error(a, fine) < coord_error(a, numeric) {
                        numeric = fine;
                    }
                }
            }
            diff2 += (a - numeric).powi(2);
            a2 += a.powi(2);
            n2 += numeric.powi(2);
        }
        leaf.set_data(base)?;
        report.coords_checked += coords.len();
        let scale = a2.sqrt().max(n2.sqrt()).max(NORM_FLOOR);
        report.max_rel_error = report.max_rel_error.max(diff2.sqrt() / scale);
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
    Ok(report)
}

/// Directional check over all `leaves` at once: for `directions` random unit
/// directions `v`, compares `∇L · v` with `(L(θ + h·v) − L(θ − h·v)) / 2h`.
/// Returns the largest relative error `|a − n| / max(|a|, |n|, NORM_FLOOR)`.
///
/// Projecting onto a direction sums many gradient coordinates, so the
/// comparison stays well above the loss's round-off even when individual
/// coordinates do not.
pub fn check_directional<R: Rng>(
    loss_fn: impl Fn() -> Result<Tensor>,
    leaves: &[Tensor],
    h: f64,
    directions: usize,
    rng: &mut R,
) -> Result<f64> {
    for leaf in leaves {
        leaf.zero_grad();
    }
    loss_fn()?.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let bases: Vec<Vec<f64>> = leaves.iter().map(|l| l.to_vec()).collect();
    let shift = |dirs: &[Vec<f64>], step: f64| -> Result<f64> {
        for ((leaf, base), dir) in leaves.iter().zip(&bases).zip(dirs) {
            leaf.set_data(base.iter().zip(dir).map(|(b, d)| b + step * d).collect())?;
        }
        Ok(no_grad(&loss_fn)?.item())
    };
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let mut dirs: Vec<Vec<f64>> = bases
            .iter()
            .map(|b| b.iter().map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        dirs.iter_mut().flatten().for_each(|v| *v /= norm);
        let analytic: f64 = grads
            .iter()
            .flatten()
            .zip(dirs.iter().flatten())
            .map(|(g, d)| g * d)
            .sum();
        let numeric = (shift(&dirs, h)? - shift(&dirs, -h)?) / (2.0 * h);
        worst = worst
            .max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(NORM_FLOOR));
    }
    for (leaf, base) in leaves.iter().zip(bases) {
        leaf.set_data(base)?;
        leaf.zero_grad();
    }
    Ok(worst)
}

/// `sum(output ⊙ weights)` with fixed random weights, turning any tensor-valued
/// function into a scalar loss with a well-conditioned gradient.
pub fn random_projection<R: Rng>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a =
                Tensor::param((0..3).map(|_| rng.random_range(-2.0..2.0)).collect(), &[3]).unwrap();
            let b =
                Tensor::param((0..3).map(|_| rng.random_range(0.5..2.0)).collect(), &[3]).unwrap();
            let ops: Vec<Box<dyn Fn() -> Result<Tensor>>> = vec![
                Box::new(|| a.silu()?.sum()),
                Box::new(|| a.softplus()?.sum()),
                Box::new(|| a.sigmoid()?.sum()),
                Box::new(|| a.exp()?.sum()),
                Box::new(|| a.relu()?.mul(&b)?.sum()),
                Box::new(|| a.mul(&b)?.sum()),
                Box::new(|| a.div(&b)?.sum()),
                Box::new(|| a.sub(&b)?.mul(&a)?.sum()),
                Box::new(|| a.softmax(0)?.mul(&b)?.sum()),
            ];
            for f in &ops {
                let r = check_gradients(f, &[a.clone(), b.clone()], 1e-5, None, &mut rng).unwrap();
                assert!(r.max_rel_error < 1e-6, "seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn kink_refinement_recovers_relu_slope() {
        // x sits 0.3·h from the ReLU kink, so the plain central difference is 0.65
        let x = Tensor::param(vec![3e-6], &[1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plain = check_gradients(
            || x.relu()?.sum(),
            std::slice::from_ref(&x),
            1e-5,
            None,
            &mut rng,
        )
        .unwrap();
        assert!((plain.max_rel_error - 0.35).abs() < 1e-9);
        let opts = GradCheckOptions {
            kink_tolerance: Some(1e-6),
            ..GradCheckOptions::new(1e-5)
        };
        let refined = check_gradients_with(
            || x.relu()?.sum(),
            std::slice::from_ref(&x),
            &opts,
            &mut rng,
        )
        .unwrap();
        assert_eq!(refined.coords_refined, 1);
        assert!(refined.max_rel_error < 1e-9);
    }

    #[test]
    fn directional_check_catches_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::param(vec![0.4, -1.2, 0.9], &[3]).unwrap();
        assert!(
            check_directional(
                || a.silu()?.mul(&a)?.sum(),
                std::slice::from_ref(&a),
                1e-5,
                5,
                &mut rng
            )
            .unwrap()
                < 1e-8
        );
        // detach hides one factor from backward, so the analytic gradient is wrong
        let wrong = check_directional(
            || a.silu()?.mul(&a.detach())?.sum(),
            std::slice::from_ref(&a),
            1e-5,
            5,
            &mut rng,
        )
        .unwrap();
        assert!(wrong > 0.1);
    }

    #[test]
    fn independent_subgraphs_backprop_separately() {
        let x = Tensor::param(vec![0.3, -0.7], &[2]).unwrap();
        let y = Tensor::param(vec![1.1, 0.4], &[2]).unwrap();
        let fx = || x.silu()?.mul(&x)?.sum();
        let fy = || y.exp()?.sum();
        fx().unwrap().backward().unwrap();
        fy().unwrap().backward().unwrap();
        let (gx, gy) = (x.grad().unwrap(), y.grad().unwrap());
        x.zero_grad();
        y.zero_grad();
        fx().unwrap()
            .add(&fy().unwrap())
            .unwrap()
            .backward()
            .unwrap();
        assert_eq!(x.grad().unwrap(), gx);
        assert_eq!(y.grad().unwrap(), gy);
    }
}
