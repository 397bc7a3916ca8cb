//! Numerical oracle checks that can run from a release binary.

use crate::datagen::{analytic_resample_params, weighted_resample};
use crate::model::{
    init_covariance_bank, init_generator, init_navigator, CovarianceBank, ParamTensors,
};
use crate::numcore::{finite_diff_grad, sample_gaussian, DiagMat, RngStream};
use crate::objectives::{
    covariance_loss_and_grad, gaussian_logits, personal_loss_and_grad, shared_loss_and_grads,
    Prototypes,
};
use crate::personalize::{
    fuse_observations, fused_params, fusion_logits, fusion_loss_and_grads, FusionHead, Lbfgs,
    LbfgsConfig, PersonalContext,
};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, err: f64, tol: f64) -> Check {
    Check {
        name,
        passed: err.is_finite() && err <= tol,
        detail: format!("max error {err:.3e} (tol {tol:.0e})"),
    }
}

/// Largest `|a−b| / max(1, |a|, |b|)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn random_vec(n: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

fn random_context(k: usize, d: usize, n: usize, rng: &mut RngStream) -> PersonalContext {
    let nav = init_navigator(k, d, rng);
    let bank = CovarianceBank {
        precisions: (0..k)
            .map(|_| DiagMat::new((0..d).map(|_| 0.5 + rng.uniform()).collect()).unwrap())
            .collect(),
    };
    let z: Vec<Vec<f64>> = (0..n).map(|_| random_vec(d, 1.0, rng)).collect();
    // Class k−1 stays absent so masking is exercised.
    let y: Vec<usize> = (0..n).map(|i| i % (k - 1).max(1)).collect();
    PersonalContext::from_representations(0, z, y, nav, bank, 0.5 + rng.uniform())
}

fn random_head(k: usize, d: usize, rng: &mut RngStream) -> FusionHead {
    FusionHead {
        mean_offsets: (0..k).map(|_| random_vec(d, 0.3, rng)).collect(),
        bias_offsets: random_vec(k, 0.3, rng),
        gain_global: (0..d).map(|_| 0.5 + rng.uniform()).collect(),
        gain_local: (0..d).map(|_| 0.5 + rng.uniform()).collect(),
    }
}

fn resample_check() -> Check {
    let mut rng = RngStream::new(1);
    let d = 3;
    let mean = random_vec(d, 1.0, &mut rng);
    let cov = DiagMat::new((0..d).map(|_| 0.5 + rng.uniform()).collect()).unwrap();
    let center = random_vec(d, 1.0, &mut rng);
    let w = DiagMat::new((0..d).map(|_| 0.5 + 2.0 * rng.uniform()).collect()).unwrap();
    let (m_star, s_star) = analytic_resample_params(&mean, &cov, &center, &w);
    let pool: Vec<Vec<f64>> = (0..100_000)
        .map(|_| sample_gaussian(&mean, &cov, &mut rng))
        .collect();
    let out = weighted_resample(
        &pool,
        &crate::datagen::ResampleWeight { center, cov: w },
        50_000,
        &mut rng,
    )
    .unwrap();
    let n = out.len() as f64;
    let mut err: f64 = 0.0;
    for j in 0..d {
        let m = out.iter().map(|x| x[j]).sum::<f64>() / n;
        let v = out.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / n;
        err = err
            .max((m - m_star[j]).abs())
            .max((v - s_star.diag()[j]).abs());
    }
    check("resampling limit", err, 0.03)
}

fn objective_gradient_check() -> Check {
    let mut rng = RngStream::new(2);
    let (k, d, n) = (3, 4, 5);
    let nav = init_navigator(k, d, &mut rng);
    let z: Vec<Vec<f64>> = (0..n).map(|_| random_vec(d, 1.0, &mut rng)).collect();
    let y: Vec<usize> = (0..n).map(|i| i % k).collect();
    let g = shared_loss_and_grads(&z, &y, &nav);
    let fd = finite_diff_grad(
        |x| {
            let zz: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            shared_loss_and_grads(&zz, &y, &nav).loss
        },
        &z.concat(),
        1e-5,
    );
    let mut err = max_rel_err(&g.dz.concat(), &fd);

    let mut bank = init_covariance_bank(k, d);
    for p in &mut bank.precisions {
        *p = DiagMat::new((0..d).map(|_| 0.5 + rng.uniform()).collect()).unwrap();
    }
    let cg = covariance_loss_and_grad(&z, &y, &nav, &bank);
    let fd = finite_diff_grad(
        |x| {
            let b = CovarianceBank {
                precisions: x
                    .chunks(d)
                    .map(|c| DiagMat::new(c.to_vec()).unwrap())
                    .collect(),
            };
            covariance_loss_and_grad(&z, &y, &nav, &b).loss
        },
        &bank.tensors().concat(),
        1e-5,
    );
    err = err.max(max_rel_err(&cg.dprecisions.concat(), &fd));

    let protos = Prototypes::from_representations(&z, &y, k, 0.1);
    let pg = personal_loss_and_grad(&z, &y, &protos, d);
    let fd = finite_diff_grad(
        |x| {
            let zz: Vec<Vec<f64>> = x.chunks(d).map(<[f64]>::to_vec).collect();
            personal_loss_and_grad(&zz, &y, &protos, d).loss
        },
        &z.concat(),
        1e-5,
    );
    err = err.max(max_rel_err(&pg.dz.concat(), &fd));
    check("objective gradients", err, 1e-4)
}

fn fusion_gradient_check() -> Check {
    let mut rng = RngStream::new(3);
    let (k, d) = (4, 3);
    let ctx = random_context(k, d, 12, &mut rng);
    let head = random_head(k, d, &mut rng);
    let g = fusion_loss_and_grads(&ctx.z, &ctx.y, &ctx, &head);
    let fd = finite_diff_grad(
        |x| {
            let mut h = head.clone();
            let mut off = 0;
            for t in h.tensors_mut() {
                t.copy_from_slice(&x[off..off + t.len()]);
                off += t.len();
            }
            fusion_loss_and_grads(&ctx.z, &ctx.y, &ctx, &h).loss
        },
        &head.tensors().concat(),
        1e-5,
    );
    check(
        "fusion head gradients",
        max_rel_err(&g.head.tensors().concat(), &fd),
        1e-4,
    )
}

fn generator_gradient_check() -> Check {
    let mut rng = RngStream::new(4);
    let gen = init_generator(&[5, 7, 3], &mut rng).unwrap();
    let x: Vec<Vec<f64>> = (0..4).map(|_| random_vec(5, 1.0, &mut rng)).collect();
    let w = random_vec(12, 1.0, &mut rng);
    let loss = |g: &crate::model::GeneratorParams| -> f64 {
        let z = g.embed(&x).unwrap();
        z.concat().iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = gen.forward(&x).unwrap();
    let up: Vec<Vec<f64>> = w.chunks(3).map(<[f64]>::to_vec).collect();
    let (g, _) = gen.backward(&tape, &up).unwrap();
    let fd = finite_diff_grad(
        |p| {
            let mut gg = gen.clone();
            let mut off = 0;
            for t in gg.tensors_mut() {
                t.copy_from_slice(&p[off..off + t.len()]);
                off += t.len();
            }
            loss(&gg)
        },
        &gen.tensors().concat(),
        1e-5,
    );
    check(
        "generator backprop",
        max_rel_err(&g.tensors().concat(), &fd),
        1e-4,
    )
}

fn reduction_check() -> Check {
    let mut rng = RngStream::new(5);
    let mut ctx = random_context(4, 3, 10, &mut rng);
    ctx.lambda = 0.0;
    let head = FusionHead::init(4, 3);
    let err = (0..200)
        .map(|_| {
            let z = random_vec(3, 2.0, &mut rng);
            let a = fusion_logits(&z, &ctx, &head);
            let b = gaussian_logits(&z, &ctx.nav, &ctx.bank);
            a.iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    check("init head equals global classifier", err, 1e-12)
}

fn fused_consistency_check() -> Check {
    let mut rng = RngStream::new(6);
    let ctx = random_context(4, 3, 10, &mut rng);
    let head = random_head(4, 3, &mut rng);
    let fused = fused_params(&ctx, &head);
    let mut spread: f64 = 0.0;
    let zs: Vec<Vec<f64>> = (0..100).map(|_| random_vec(3, 2.0, &mut rng)).collect();
    for (i, f) in fused.iter().enumerate() {
        let diffs: Vec<f64> = zs
            .iter()
            .map(|z| f.score(z) - fusion_logits(z, &ctx, &head)[i])
            .collect();
        let (lo, hi) = diffs
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        spread = spread.max(hi - lo);
    }
    check("fused Gaussian completes the square", spread, 1e-8)
}

fn fusion_grid_check() -> Check {
    let (m0, a0, a) = (0.4, 2.0, 3.0);
    let obs = vec![vec![1.0], vec![1.5], vec![0.2]];
    let (mean, prec, combined) = fuse_observations(&[m0], &[a0], &obs, &[a]);
    let h = 1e-4;
    let (mut z, mut s0, mut s1) = (0.0, 0.0, 0.0);
    for i in 0..200_000 {
        let x = -10.0 + i as f64 * h;
        let mut lp = -0.5 * a0 * (x - m0) * (x - m0);
        for o in &obs {
            lp -= 0.5 * a * (x - o[0]) * (x - o[0]);
        }
        let p = lp.exp();
        z += p;
        s0 += p * x;
        s1 += p * x * x;
    }
    let gm = s0 / z;
    let gv = s1 / z - gm * gm;
    let err = (gm - mean[0]).abs().max((gv - 1.0 / prec[0]).abs());
    let mut c = check("Bayesian fusion vs grid", err, 1e-6);
    c.passed &= combined[0] == 3.0 * a;
    c
}

fn lbfgs_check() -> Check {
    let mut rng = RngStream::new(7);
    let n = 8;
    let a: Vec<f64> = (0..n).map(|_| 1.0 + 9.0 * rng.uniform()).collect();
    let c = random_vec(n, 1.0, &mut rng);
    let mut x = vec![0.0; n];
    let rep = Lbfgs::new(LbfgsConfig::default()).minimize(&mut x, |x| {
        let g: Vec<f64> = (0..n).map(|i| a[i] * (x[i] - c[i])).collect();
        let f = (0..n).map(|i| 0.5 * a[i] * (x[i] - c[i]).powi(2)).sum();
        (f, g)
    });
    let err = x
        .iter()
        .zip(&c)
        .map(|(u, v)| (u - v).abs())
        .fold(0.0, f64::max);
    let mut chk = check("L-BFGS quadratic minimizer", err, 1e-8);
    chk.passed &= rep.iterations <= 10;
    chk
}

pub fn run_all() -> Vec<Check> {
    vec![
        resample_check(),
        objective_gradient_check(),
        fusion_gradient_check(),
        generator_gradient_check(),
        reduction_check(),
        fused_consistency_check(),
        fusion_grid_check(),
        lbfgs_check(),
    ]
}
