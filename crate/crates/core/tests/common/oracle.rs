//! Reference implementations written without the library's helpers.

use lcs_core::train::{soft_dice_loss, soft_dice_loss_grad};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Soft-dice loss by explicit triple loop over a `n^3` grid.
pub fn soft_dice_brute(pred: &[f64], gt: &[f64], n: usize, eps: f64) -> f64 {
    let (mut inter, mut total) = (0.0f64, 0.0f64);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let i = (z * n + y) * n + x;
                inter += pred[i] * gt[i];
                total += pred[i] + gt[i];
            }
        }
    }
    1.0 - (2.0 * inter + eps) / (total + eps)
}

/// Largest absolute difference between the library loss and the oracle on
/// `cases` random 4^3 grids.
pub fn loss_oracle_max_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let pred: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let density = rng.random::<f64>();
        // Every few cases use an empty or a full target.
        let gt: Vec<f64> = (0..64)
            .map(|_| match case % 10 {
                0 => 0.0,
                1 => 1.0,
                _ => (rng.random::<f64>() < density) as u8 as f64,
            })
            .collect();
        let eps = [1e-5, 1e-3, 1.0][case % 3];
        let got = soft_dice_loss(&pred, &gt, eps).unwrap();
        worst = worst.max((got - soft_dice_brute(&pred, &gt, 4, eps)).abs());
    }
    worst
}

/// Largest relative error between the analytic gradient and central finite
/// differences over `cases` random instances.
pub fn loss_gradient_max_rel_error(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(8..=64);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
        let eps = 1e-5;
        let mut grad = vec![0.0; n];
        soft_dice_loss_grad(&pred, &gt, eps, &mut grad).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut p = pred.clone();
            p[i] = pred[i] + h;
            let up = soft_dice_brute_flat(&p, &gt, eps);
            p[i] = pred[i] - h;
            let down = soft_dice_brute_flat(&p, &gt, eps);
            let fd = (up - down) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs()).max(1e-8);
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    worst
}

fn soft_dice_brute_flat(pred: &[f64], gt: &[f64], eps: f64) -> f64 {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().chain(gt).sum();
    1.0 - (2.0 * inter + eps) / (total + eps)
}

/// Two-sided Student-t tail probability by quadrature. With
/// `x = sqrt(df) tan(theta)` the density becomes proportional to
/// `cos(theta)^(df - 1)` on `[0, pi/2)`, which Simpson's rule handles well.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    let f = |theta: f64| theta.cos().powf(df - 1.0);
    let simpson = |a: f64, b: f64, steps: usize| {
        let h = (b - a) / steps as f64;
        let mut s = f(a) + f(b);
        for k in 1..steps {
            s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let upto = (t.abs() / df.sqrt()).atan();
    let steps = 20_000;
    let inner = simpson(0.0, upto, steps);
    let whole = simpson(0.0, half, steps);
    (1.0 - inner / whole).clamp(0.0, 1.0)
}

/// Paired t statistic from first principles.
pub fn paired_t(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    mean / (var / n).sqrt()
}

/// Largest absolute p-value error of `paired_t_test` against the quadrature
/// oracle, and the largest relative error of `t`, over `cases` random pairs.
pub fn t_test_oracle_errors(cases: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_p, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.random_range(2..=30);
        let shift = rng.random_range(-0.2..0.2);
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = a
            .iter()
            .map(|x| x + shift + rng.random_range(-0.3..0.3))
            .collect();
        let got = lcs_core::eval::paired_t_test(&a, &b).unwrap();
        let t = paired_t(&a, &b);
        let p = t_two_sided_p(t, (n - 1) as f64);
        worst_t = worst_t.max((got.t.unwrap() - t).abs() / t.abs().max(1e-12));
        worst_p = worst_p.max((got.p_value.unwrap() - p).abs());
    }
    (worst_p, worst_t)
}
