//! Reference implementations shared by the integration tests. Nothing here
//! calls into the library's numerics, so agreement is meaningful.
#![allow(dead_code)]

use adabatch::autodiff::{evaluate, loss};
use adabatch::data::{Batch, Dataset};
use adabatch::models::{Activation, LossKind, ModelSpec};
use adabatch::{Model, ParamVector, SchedulerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use proptest::prelude::*;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖a − b‖ / ‖b‖`, falling back to the absolute error when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-12)
}

pub fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn jacobi_eigenvalues(a: &[Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    let mut m = a.to_vec();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().max(1e-300);
    for _ in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m[i][j] * m[i][j];
                }
            }
        }
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in m.iter_mut() {
                    let (kp, kq) = (row[p], row[q]);
                    row[p] = c * kp - s * kq;
                    row[q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (m[p][k], m[q][k]);
                    m[p][k] = c * pk - s * qk;
                    m[q][k] = s * pk + c * qk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn dominant_magnitude(a: &[Vec<f64>]) -> f64 {
    jacobi_eigenvalues(a).iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Orthonormal basis from Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v = gaussian_vec(&mut r, n);
        for u in &q {
            let d = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let nv = norm(&v);
        if nv > 1e-8 {
            q.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    q
}

/// `Q diag(eigs) Qᵀ`.
pub fn with_spectrum(eigs: &[f64], seed: u64) -> Vec<Vec<f64>> {
    let n = eigs.len();
    let q = random_orthogonal(n, seed);
    let mut a = vec![vec![0.0; n]; n];
    for (k, lam) in eigs.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += lam * q[k][i] * q[k][j];
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[i][j] + a[j][i]);
            a[i][j] = s;
            a[j][i] = s;
        }
    }
    a
}

/// Central difference step scaled to the point.
pub fn fd_step(x: &[f64]) -> f64 {
    1e-6 * (1.0 + x.iter().fold(0.0, |m: f64, v| m.max(v.abs())))
}

pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let h = fd_step(x);
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// `(∇L(θ + hv) − ∇L(θ − hv)) / 2h`.
pub fn fd_hvp(model: &Model, params: &ParamVector, batch: &Batch, v: &[f64]) -> Vec<f64> {
    let h = fd_step(params.values());
    let shifted = |sign: f64| {
        let vals: Vec<f64> = params.values().iter().zip(v).map(|(p, d)| p + sign * h * d).collect();
        evaluate(model, &params.with_values(vals).unwrap(), batch).unwrap().grad
    };
    let (gp, gm) = (shifted(1.0), shifted(-1.0));
    gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
}

/// Dense Hessian by finite differences of the gradient along each axis,
/// symmetrized.
pub fn fd_hessian(model: &Model, params: &ParamVector, batch: &Batch) -> Vec<Vec<f64>> {
    let n = params.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            fd_hvp(model, params, batch, &e)
        })
        .collect();
    (0..n).map(|i| (0..n).map(|j| 0.5 * (cols[i][j] + cols[j][i])).collect()).collect()
}

pub fn fd_loss_gradient(model: &Model, params: &ParamVector, batch: &Batch) -> Vec<f64> {
    central_gradient(|x| loss(model, &params.with_values(x.to_vec()).unwrap(), batch).unwrap(), params.values())
}

pub fn tanh_mlp() -> Model {
    Model::from_spec(&ModelSpec::mlp(vec![4, 8, 2], Activation::Tanh, LossKind::CrossEntropy)).unwrap()
}

/// Small random classification batch; labels are class indices.
pub fn class_batch(n: usize, d: usize, classes: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let x = gaussian_vec(&mut r, n * d);
    let y = (0..n).map(|i| (i % classes) as f64).collect();
    Batch::new(x, y, d).unwrap()
}

pub fn dataset(batch: Batch) -> Dataset {
    Dataset::new("test", batch).unwrap()
}

pub fn random_params(model: &Model, seed: u64, scale: f64) -> ParamVector {
    let mut r = rng(seed);
    let v = gaussian_vec(&mut r, model.num_params()).into_iter().map(|x| x * scale).collect();
    model.init_params(0).with_values(v).unwrap()
}

/// `(B + Bᵀ)/2` with `B` drawn entrywise from `U[0, 1)`.
pub fn sym_uniform(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random::<f64>()).collect()).collect();
    (0..n).map(|i| (0..n).map(|j| 0.5 * (b[i][j] + b[j][i])).collect()).collect()
}

/// `(B + Bᵀ)/2` with standard normal entries.
pub fn sym_gaussian(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    let b: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, n)).collect();
    (0..n).map(|i| (0..n).map(|j| 0.5 * (b[i][j] + b[j][i])).collect()).collect()
}

/// Drives a scheduler through `lambdas` (one measurement per epoch, epochs
/// from 1) and checks the conformance rules event by event.
pub fn check_scheduler_run(
    lambdas: &[f64],
    cfg: &adabatch::SchedulerConfig,
) -> std::result::Result<Vec<adabatch::ScaleEvent>, String> {
    use adabatch::{FlagReason, SchedulerState};
    let mut st = SchedulerState::init(cfg).map_err(|e| e.to_string())?;
    let mut events: Vec<adabatch::ScaleEvent> = Vec::new();
    let mut recorded: Option<f64> = None;
    let mut last_scale = 1usize;
    let (mut batch, mut gamma, mut lr) = (st.batch, st.gamma, st.lr);
    for (k, &lam) in lambdas.iter().enumerate() {
        let m = k + 1;
        st.epoch = m;
        st.enforce_tau(cfg);
        let ev = st.on_epoch_end(lam, cfg);
        let fail = |msg: String| Err(format!("measurement {m}: {msg}"));
        if ev.batch < batch || ev.batch > cfg.b_max {
            return fail(format!("batch {} after {batch} (b_max {})", ev.batch, cfg.b_max));
        }
        if ev.gamma > gamma {
            return fail(format!("gamma rose {gamma} -> {}", ev.gamma));
        }
        if m >= cfg.tau && ev.gamma != 0.0 {
            return fail(format!("gamma {} at or after tau", ev.gamma));
        }
        if ev.lambda_old != recorded {
            return fail(format!("lambda_old {:?}, expected {recorded:?}", ev.lambda_old));
        }
        let decayed = recorded.is_some_and(|old| lam.abs() < old / cfg.alpha);
        let expected = match recorded {
            None => FlagReason::None,
            Some(_) if decayed => FlagReason::Eigen,
            Some(_) if m - last_scale >= cfg.kappa => FlagReason::Duration,
            Some(_) => FlagReason::None,
        };
        if ev.flag_reason != expected {
            return fail(format!("flag {:?}, expected {expected:?}", ev.flag_reason));
        }
        if expected == FlagReason::Duration && m - last_scale != cfg.kappa {
            return fail(format!("duration fired after {} measurements", m - last_scale));
        }
        if ev.scaled() {
            let want = (batch * cfg.beta).min(cfg.b_max);
            if ev.batch != want {
                return fail(format!("batch {} expected {want}", ev.batch));
            }
            let ratio = want as f64 / batch as f64;
            if (ev.lr - lr * ratio).abs() > 1e-12 * ev.lr {
                return fail(format!("lr {} expected {}", ev.lr, lr * ratio));
            }
            last_scale = m;
        } else if ev.batch != batch || ev.lr != lr {
            return fail("batch or lr changed without a flag".into());
        }
        if recorded.is_none() || decayed {
            recorded = Some(lam.abs());
        }
        batch = ev.batch;
        gamma = ev.gamma;
        lr = ev.lr;
        events.push(ev);
    }
    Ok(events)
}

/// `l_i(θ) = ½(θ − z_i)ᵀA(θ − z_i)` with `A = Q diag(eigs) Qᵀ` and Gaussian
/// `z_i` of scale `noise`, plus its exact constants: per-example gradient
/// variance is `mean‖A(z_i − z̄)‖²` at every θ, so `M_v = 0`, and
/// `L_* = mean ½(z_i − z̄)ᵀA(z_i − z̄)`.
pub fn noisy_quadratic(
    eigs: &[f64],
    n: usize,
    noise: f64,
    seed: u64,
) -> (Model, Dataset, adabatch::ConvexConstants) {
    let d = eigs.len();
    let a = with_spectrum(eigs, seed);
    let mut r = rng(seed ^ 0xabc);
    let z: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut r, d).into_iter().map(|v| v * noise).collect()).collect();
    let mut zbar = vec![0.0; d];
    for row in &z {
        zbar.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let (mut m, mut lstar) = (0.0, 0.0);
    for row in &z {
        let dz: Vec<f64> = row.iter().zip(&zbar).map(|(x, y)| x - y).collect();
        let adz = matvec(&a, &dz);
        m += dot(&adz, &adz) / n as f64;
        lstar += 0.5 * dot(&dz, &adz) / n as f64;
    }
    let model = Model::from_spec(&ModelSpec::quadratic(a)).unwrap();
    let ds = Dataset::new("noisy-quadratic", Batch::new(z.concat(), vec![0.0; n], d).unwrap()).unwrap();
    let lg = eigs.iter().cloned().fold(f64::MIN, f64::max);
    let cs = eigs.iter().cloned().fold(f64::MAX, f64::min);
    (model, ds, adabatch::ConvexConstants::new(lg, cs, m, 0.0, lstar).unwrap())
}

pub fn arb_scheduler_config() -> impl proptest::strategy::Strategy<Value = SchedulerConfig> {
    (1usize..300, 0u32..8, 1.05f64..5.0, 2usize..5, 1usize..12, 1.1f64..4.0, 0usize..80, 0.0f64..1.0).prop_map(
        |(b_init, doublings, alpha, beta, kappa, omega, tau, gamma0)| SchedulerConfig {
            eta0: 0.1,
            b_init,
            b_max: b_init << doublings,
            alpha,
            beta,
            kappa,
            omega,
            tau,
            gamma0,
            ..Default::default()
        },
    )
}

/// Log-curvature random walk: mostly small moves with occasional sharp
/// drops, so both triggers are exercised.
pub fn arb_lambdas() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![4 => -0.3f64..0.3, 1 => -2.5f64..-0.5], 1..80).prop_map(|steps| {
        let mut x = 3.0f64;
        steps
            .into_iter()
            .map(|s| {
                x += s;
                x.exp()
            })
            .collect()
    })
}
