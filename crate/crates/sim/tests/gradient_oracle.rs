//! Central finite differences as an independent check of the analytic
//! task gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softmerge_core::Mat;
use softmerge_sim::world::{task_gradient, task_loss};

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

/// Entry-wise central differences of the loss, step `h`.
fn finite_difference_gradient(w: &Mat, target: &Mat, x: &Mat, h: f64) -> Mat {
    Mat::from_fn(w.rows(), w.cols(), |i, j| {
        let mut plus = w.clone();
        plus[(i, j)] += h;
        let mut minus = w.clone();
        minus[(i, j)] -= h;
        let lp = task_loss(&plus, target, x).unwrap();
        let lm = task_loss(&minus, target, x).unwrap();
        (lp - lm) / (2.0 * h)
    })
}

#[test]
fn analytic_gradient_matches_central_differences_on_50_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let m = rng.random_range(2..=8);
        let n = rng.random_range(2..=8);
        let samples = rng.random_range(1..=12);
        let w = random_mat(&mut rng, m, n);
        let target = random_mat(&mut rng, m, n);
        let x = random_mat(&mut rng, n, samples);

        let analytic = task_gradient(&w, &target, &x).unwrap();
        let fd = finite_difference_gradient(&w, &target, &x, 1e-5);

        let denom = analytic.frob_norm();
        assert!(denom > 0.0, "trial {trial}: degenerate instance");
        let rel = fd.sub(&analytic).frob_norm() / denom;
        assert!(rel <= 1e-5, "trial {trial}: relative error {rel:.3e}");
    }
}

#[test]
fn finite_differences_also_confirm_the_mixture_chain_rule() {
    // Perturbing B must move the loss by <grad_W, dB * A>; checks the
    // factored update direction used in training.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (m, n, r, samples) = (6, 5, 2, 10);
    let b = random_mat(&mut rng, m, r);
    let a = random_mat(&mut rng, r, n);
    let base = random_mat(&mut rng, m, n);
    let target = random_mat(&mut rng, m, n);
    let x = random_mat(&mut rng, n, samples);

    let w_eff = base.add(&b.matmul(&a));
    let g = task_gradient(&w_eff, &target, &x).unwrap();
    let grad_b = g.matmul_t(&a);

    let h = 1e-6;
    for i in 0..m {
        for j in 0..r {
            let mut b2 = b.clone();
            b2[(i, j)] += h;
            let lp = task_loss(&base.add(&b2.matmul(&a)), &target, &x).unwrap();
            let mut b3 = b.clone();
            b3[(i, j)] -= h;
            let lm = task_loss(&base.add(&b3.matmul(&a)), &target, &x).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad_b[(i, j)]).abs() <= 1e-5 * grad_b.frob_norm().max(1.0),
                "entry ({i},{j}): fd {fd:.6e} vs analytic {:.6e}",
                grad_b[(i, j)]
            );
        }
    }
}
