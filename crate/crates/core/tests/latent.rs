mod common;

use common::random_stack;
use flowvi::flows::{FlowKind, FlowStack};
use flowvi::latent::{
    gaussian_kl, gaussian_logpdf, kl_term, log_density, sample_latent, InferenceNet,
};
use flowvi::numcore::{grad_check, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean and standard error of the per-row KL estimate over `n` draws.
fn mc_kl(mu: &[f64], ls: &[f64], stack: &FlowStack, n: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let l = mu.len();
    let mut tape = Tape::new();
    let rep = |v: &[f64]| Tensor::new(vec![n, l], v.iter().cycle().take(n * l).copied().collect());
    let m = tape.constant(rep(mu).unwrap()).unwrap();
    let s = tape.constant(rep(ls).unwrap()).unwrap();
    let draw = sample_latent(&mut tape, m, s, stack, rng).unwrap();
    let kl = kl_term(&mut tape, &draw).unwrap();
    let v = tape.data(kl);
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[test]
fn unit_shift_kl_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mean, _) = mc_kl(&[1.0, 0.0, 0.0], &[0.0; 3], &FlowStack::identity(3), 100_000, &mut rng);
    assert!((mean - 0.5).abs() <= 0.01, "{mean}");
}

#[test]
fn monte_carlo_kl_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let l = rng.random_range(1..5);
        let mu: Vec<f64> = (0..l).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ls: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..0.5)).collect();
        let exact = gaussian_kl(&mu, &ls);
        let (mean, _) = mc_kl(&mu, &ls, &FlowStack::identity(l), 100_000, &mut rng);
        assert!((mean - exact).abs() <= 0.02 * exact, "{mean} vs {exact}");
    }
}

#[test]
fn kl_is_nonnegative_in_expectation_through_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [FlowKind::Planar, FlowKind::Realnvp, FlowKind::Rqnsf, FlowKind::Iaf] {
        let stack = random_stack(kind, 3, 2, &mut rng);
        let mu: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ls: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (mean, se) = mc_kl(&mu, &ls, &stack, 20_000, &mut rng);
        assert!(mean >= -3.0 * se, "{kind}: {mean} ± {se}");
    }
}

#[test]
fn change_of_variables_is_self_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in FlowKind::INVERTIBLE {
        let stack = random_stack(kind, 4, 2, &mut rng);
        let mu = [0.3, -0.2, 0.1, 0.0];
        let sigma = [1.2, 0.8, 1.0, 0.5];
        let z = Tensor::randn(&[10, 4], 1.0, &mut rng);
        let (x, lds) = stack.forward_values(&z).unwrap();
        let dens = log_density(&stack, &mu, &sigma, &x).unwrap();
        for r in 0..10 {
            let sum_ld: f64 = lds.iter().map(|l| l[r]).sum();
            let base = gaussian_logpdf(z.row(r), &mu, &sigma);
            assert!((dens[r] + sum_ld - base).abs() <= 1e-8, "{kind} row {r}");
        }
    }
}

#[test]
fn planar_stack_has_no_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stack = random_stack(FlowKind::Planar, 2, 1, &mut rng);
    let err = log_density(&stack, &[0.0; 2], &[1.0; 2], &Tensor::zeros(&[1, 2])).unwrap_err();
    assert!(matches!(err.root(), flowvi::Error::Capability(_)));
}

#[test]
fn realnvp_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let stack = random_stack(FlowKind::Realnvp, 2, 4, &mut rng);
    let step = 0.1;
    let pts: Vec<f64> = (0..200)
        .flat_map(|i| (0..200).flat_map(move |j| [-10.0 + (i as f64 + 0.5) * step, -10.0 + (j as f64 + 0.5) * step]))
        .collect();
    let x = Tensor::new(vec![40_000, 2], pts).unwrap();
    let d = log_density(&stack, &[0.0; 2], &[1.0; 2], &x).unwrap();
    let mass: f64 = d.iter().map(|v| v.exp()).sum::<f64>() * step * step;
    assert!((mass - 1.0).abs() <= 0.01, "{mass}");
}

#[test]
fn kl_gradient_wrt_mean_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ls = Tensor::matrix(1, 3, vec![0.2, -0.3, 0.1]).unwrap();
    let eps = Tensor::randn(&[64, 3], 1.0, &mut rng);
    let mu = Tensor::vector(vec![0.5, -1.0, 0.25]);
    let report = grad_check(
        |t, m| {
            let m = t.reshape(m, &[1, 3])?;
            let m = t.broadcast_to(m, &[64, 3])?;
            let s = t.constant(ls.clone())?;
            let s = t.broadcast_to(s, &[64, 3])?;
            let draw = flowvi::latent::sample_latent_with_noise(t, m, s, &FlowStack::identity(3), eps.clone())?;
            let kl = kl_term(t, &draw)?;
            t.mean(kl)
        },
        &mu,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error <= 1e-3, "{}", report.max_rel_error);
}

#[test]
fn fixed_seed_gives_identical_samples() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let stack = random_stack(FlowKind::Rqnsf, 4, 2, &mut rng);
        let net = InferenceNet::new(6, 8, 4, 0.1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[1, 6], 1.0, &mut rng)).unwrap();
        let (mu, ls) = net.forward(&mut tape, x, true, &mut rng).unwrap();
        let d = sample_latent(&mut tape, mu, ls, &stack, &mut rng).unwrap();
        d.to_samples(&tape)
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a[0].logdets.len(), 2);
}

#[test]
fn eval_mode_posterior_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = InferenceNet::new(6, 8, 4, 0.5, &mut rng).unwrap();
    let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
    let a = flowvi::latent::infer_posterior(&net, &x, false, &mut rng).unwrap();
    let b = flowvi::latent::infer_posterior(&net, &x, false, &mut rng).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.shape(), &[2, 4]);
}
