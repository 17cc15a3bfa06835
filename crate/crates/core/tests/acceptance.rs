//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release -p attn-pca --test acceptance`.

use std::time::Instant;

use attn_pca::cli::{self, load_config, run_experiment, run_to_dir, Experiment, ResolvedConfig, ResultRow};
use attn_pca::icl::{
    alpha_star, icl_coefficients, predicted_rate_icl, risk_icl_inf, wishart_moments, wishart_sample, IclInfObjective, SpikedWishartModel,
};
use attn_pca::landscape::{ascending_spectrum, critical_points_lin, critical_points_soft_inf, predicted_rate_soft_inf};
use attn_pca::optim::{fit_exponential_rate, gradient_descent, oja_equivalence_check, random_unit_vector, sequential_pca, OptimizerConfig, SoftInfObjective, TraceStatus};
use attn_pca::risk::{empirical_soft_risk, risk_lin_finite, risk_soft_inf, risk_soft_inf_mc, RiskEval};
use attn_pca::{build_experiment_covariance, sample_prompt, AttnParam, CovarianceModel, RngStream};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fd_gradient(f: &dyn Fn(&DVector<f64>) -> f64, mu: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(mu.len(), |i, _| {
        let (mut p, mut m) = (mu.clone(), mu.clone());
        p[i] += h;
        m[i] -= h;
        (f(&p) - f(&m)) / (2.0 * h)
    })
}

fn fd_hessian(g: &dyn Fn(&DVector<f64>) -> DVector<f64>, mu: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let d = mu.len();
    let mut out = DMatrix::zeros(d, d);
    for j in 0..d {
        let (mut p, mut m) = (mu.clone(), mu.clone());
        p[j] += h;
        m[j] -= h;
        out.set_column(j, &((g(&p) - g(&m)) / (2.0 * h)));
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn config(json: &str) -> ResolvedConfig {
    load_config(json, "acceptance", None).expect("valid config")
}

fn metric<'a>(rows: &'a [ResultRow], name: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
    rows.iter().filter(move |r| r.metric == name)
}

/// Average ranks, ties sharing the mean rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Mean over runs of `final_alignment`, per sweep value in ascending order.
fn sweep_means(rows: &[ResultRow]) -> (Vec<f64>, Vec<f64>) {
    let mut steps: Vec<u64> = metric(rows, "final_alignment").map(|r| r.step).collect();
    steps.dedup();
    let means = steps
        .iter()
        .map(|&s| {
            let v: Vec<f64> = metric(rows, "final_alignment").filter(|r| r.step == s).map(|r| r.value).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    (steps.iter().map(|&s| s as f64).collect(), means)
}

fn mean_final_alignment(rows: &[ResultRow]) -> f64 {
    let v: Vec<f64> = metric(rows, "final_alignment").map(|r| r.value).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Stable step for deterministic GD: half the inverse curvature `8 lambda sigma_1^2`
/// along `u_1` at the minimiser.
fn soft_step(cov: &CovarianceModel, lambda: f64) -> f64 {
    0.5 / (8.0 * lambda * cov.eigenvalues()[0].powi(2))
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let s = RngStream::new(101, case);
        let d = 1 + (case % 6) as usize;
        let cov = build_experiment_covariance(d, s.substream(0)).map_err(|e| e.to_string())?;
        let lambda = 0.05 + 0.05 * case as f64;
        let mu = random_unit_vector(d, s.substream(1)) * (0.3 + 0.06 * case as f64);
        let p = AttnParam::new(mu, lambda).map_err(|e| e.to_string())?;
        let exact = risk_soft_inf(&p, &cov).unwrap().value;
        let mc = risk_soft_inf_mc(&p, &cov, 1_000_000, s.substream(2)).unwrap();
        let z = (mc.value - exact).abs() / mc.mc_std_error.unwrap();
        worst = worst.max(z);
        ensure(z < 4.0, || format!("case {case}: |MC - closed form| = {z:.2} SE"))?;
    }
    Ok(format!("20 cases, worst deviation {worst:.2} SE"))
}

fn check_derivs(r: &RiskEval, f: &dyn Fn(&DVector<f64>) -> RiskEval, mu: &DVector<f64>, hess: bool) -> Result<(f64, f64), String> {
    let h = 1e-5 * (1.0 + mu.norm());
    let g = fd_gradient(&|x| f(x).value, mu, h);
    let ge = (r.grad() - &g).norm() / g.norm();
    let he = if hess {
        let fh = fd_hessian(&|x| f(x).grad().clone(), mu, h);
        (r.hess() - &fh).norm() / fh.norm()
    } else {
        0.0
    };
    Ok((ge, he))
}

fn criterion_2() -> Outcome {
    let (mut gw, mut hw): (f64, f64) = (0.0, 0.0);
    for case in 0..10u64 {
        let s = RngStream::new(202, case);
        let d = 2 + (case % 5) as usize;
        let cov = build_experiment_covariance(d, s.substream(0)).unwrap();
        let lambda = 0.05 + 0.04 * case as f64;
        let mu = random_unit_vector(d, s.substream(1)) * 0.8;
        let len = 3 + 7 * case as usize;

        let soft = |x: &DVector<f64>| risk_soft_inf(&AttnParam::new(x.clone(), lambda).unwrap(), &cov).unwrap();
        let lin = |x: &DVector<f64>| risk_lin_finite(&AttnParam::new(x.clone(), lambda).unwrap(), &cov, len).unwrap();
        let model = SpikedWishartModel::new(0.5 + 0.1 * case as f64, 1.0 + 0.2 * case as f64, random_unit_vector(d, s.substream(2)), d + case as usize).unwrap();
        let icl = |x: &DVector<f64>| risk_icl_inf(x, &model, lambda).unwrap();
        let prompts: Vec<_> = (0..16).map(|j| sample_prompt(&cov, len, s.substream(10 + j)).unwrap()).collect();
        let emp = |x: &DVector<f64>| empirical_soft_risk(&prompts, &AttnParam::new(x.clone(), lambda).unwrap()).unwrap();

        for (name, f, hess) in [
            ("risk_soft_inf", &soft as &dyn Fn(&DVector<f64>) -> RiskEval, true),
            ("risk_lin_finite", &lin, true),
            ("risk_icl_inf", &icl, true),
            ("empirical softmax batch", &emp, false),
        ] {
            let (ge, he) = check_derivs(&f(&mu), f, &mu, hess)?;
            gw = gw.max(ge);
            hw = hw.max(he);
            ensure(ge < 1e-6, || format!("case {case} {name}: gradient rel err {ge:.2e}"))?;
            ensure(he < 1e-5, || format!("case {case} {name}: Hessian rel err {he:.2e}"))?;
        }
    }
    Ok(format!("40 checks, worst gradient rel err {gw:.1e}, worst Hessian rel err {hw:.1e}"))
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn spectra_match(got: &[f64], want: Vec<f64>) -> f64 {
    let want = sorted(want);
    got.iter().zip(&want).map(|(a, b)| (a - b).abs() / b.abs().max(1.0)).fold(0.0, f64::max)
}

fn criterion_3() -> Outcome {
    let mut worst_spec: f64 = 0.0;
    for case in 0..5u64 {
        let d = 2 + case as usize;
        let cov = build_experiment_covariance(d, RngStream::new(303, case)).unwrap();
        let s = cov.eigenvalues().to_vec();
        let tr = cov.trace();
        let lambda = 0.1 + 0.1 * case as f64;
        let points = critical_points_soft_inf(&cov, lambda).unwrap();
        ensure(points.len() == 2 * d + 1, || format!("softmax: {} points", points.len()))?;
        for p in &points {
            ensure(p.grad_norm < 1e-10, || format!("softmax point grad norm {:.2e}", p.grad_norm))?;
            let want = match p.eigenindex {
                None => s.iter().map(|x| -4.0 * lambda * x * x).collect(),
                Some(i) => (0..d).map(|j| if j == i { 8.0 * lambda * s[i] * s[i] } else { 2.0 * lambda * s[j] * (s[i] - s[j]) }).collect(),
            };
            let e = spectra_match(&p.hessian_spectrum, want);
            worst_spec = worst_spec.max(e);
            ensure(e < 1e-8, || format!("softmax spectrum mismatch {e:.2e} at {:?}", p.eigenindex))?;
        }
        let min = points.iter().map(|p| p.value).fold(f64::INFINITY, f64::min);
        ensure((min - (tr - s[0])).abs() < 1e-10, || format!("minimum value {min} vs {}", tr - s[0]))?;

        for len in [5usize, 100] {
            let l = len as f64;
            let points = critical_points_lin(&cov, lambda, len).unwrap();
            ensure(points.len() == 2 * d + 1, || format!("linear: {} points", points.len()))?;
            for p in points.iter().filter(|p| p.eigenindex.is_some()) {
                let i = p.eigenindex.unwrap();
                ensure(p.grad_norm < 1e-10, || format!("linear point grad norm {:.2e}", p.grad_norm))?;
                let want = (0..d)
                    .map(|j| {
                        if j == i {
                            8.0 * (lambda / l) * s[i] * (tr + (l + 1.0) * s[i])
                        } else {
                            2.0 * (lambda / l) * s[j] * (s[i] - s[j]) * ((l - 1.0) * tr + (l + 1.0) * (l + 3.0) * s[i]) / (tr + (l + 3.0) * s[i])
                        }
                    })
                    .collect();
                let e = spectra_match(&p.hessian_spectrum, want);
                worst_spec = worst_spec.max(e);
                ensure(e < 1e-8, || format!("linear L={len} spectrum mismatch {e:.2e} at u{i}"))?;
            }
        }
    }
    Ok(format!("5 covariances, softmax and linear (L = 5, 100), worst spectrum error {worst_spec:.1e}"))
}

fn criterion_4() -> Outcome {
    let probe = config(r#"{"experiment": "align_soft_inf"}"#);
    let cov = cli::experiment_covariance(probe.d, probe.master_seed).unwrap();
    let step = soft_step(&cov, probe.lambda);
    let cfg = config(&format!(r#"{{"experiment": "align_soft_inf", "runs": 100, "step_size": {step:e}, "iters": 1000000, "record_every": 1000000}}"#));
    let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
    let star = 1.0 / (cfg.lambda * cov.eigenvalues()[0]).sqrt();
    let good = (0..100)
        .filter(|&run| {
            let a = metric(&rows, "final_alignment").find(|r| r.run == run).unwrap().value;
            let n = metric(&rows, "final_norm").find(|r| r.run == run).unwrap().value;
            a > 0.999 && (n - star).abs() < 1e-6
        })
        .count();
    ensure(good >= 99, || format!("only {good}/100 runs converged"))?;
    Ok(format!("{good}/100 runs with alignment > 0.999 and norm within 1e-6 (step {step:.3e})"))
}

fn criterion_5() -> Outcome {
    let probe = config(r#"{"experiment": "align_soft_finite"}"#);
    let rate = probe.predicted_rate.unwrap();
    // Three slowest time constants shrink a misalignment angle below
    // (pi / 2) e^{-3}, i.e. alignment above 0.997.
    let iters = (3.0 / (probe.step_size * rate)).ceil() as usize;
    let cfg = config(&format!(r#"{{"experiment": "align_soft_finite", "iters": {iters}, "record_every": {iters}}}"#));
    let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
    let mean = mean_final_alignment(&rows);
    ensure(mean > 0.99, || format!("mean final alignment {mean:.5}"))?;
    Ok(format!("mean final alignment {mean:.5} over {} runs of {iters} SGD steps", cfg.runs))
}

fn criterion_6() -> Outcome {
    let mut details = Vec::new();
    for case in 0..5u64 {
        let d = 2 + (case % 4) as usize;
        let cov = build_experiment_covariance(d, RngStream::new(606, case)).unwrap();
        let lambda = 0.1;
        let obj = SoftInfObjective { cov: &cov, lambda };
        let cfg = OptimizerConfig::deterministic(soft_step(&cov, lambda), 2_000_000);
        let (s1, u1) = cov.principal();
        let t = gradient_descent(&obj, &random_unit_vector(d, RngStream::new(607, case)), &cfg, &u1).map_err(|e| e.to_string())?;
        ensure(t.status == TraceStatus::Converged, || format!("case {case}: {:?}", t.status))?;
        let sign = t.final_mu.dot(&u1).signum();
        let star = &u1 * (sign / (lambda * s1).sqrt());
        let fit = fit_exponential_rate(&t, &star).map_err(|e| e.to_string())?;
        let pred = predicted_rate_soft_inf(&cov, lambda).unwrap();
        let ratio = fit.rate / pred;
        ensure((0.7..=1.3).contains(&ratio), || format!("case {case} (d = {d}): fitted {:.4} vs predicted {pred:.4}", fit.rate))?;
        details.push(format!("{ratio:.3}"));
    }
    Ok(format!("fitted / predicted rate: {}", details.join(", ")))
}

fn criterion_7() -> Outcome {
    let cov = build_experiment_covariance(5, RngStream::new(707, 0)).unwrap();
    let lambda = 0.1;
    let cfg = OptimizerConfig::deterministic(soft_step(&cov, lambda), 2_000_000).with_rng(RngStream::new(707, 1));
    let pca = sequential_pca(&cov, lambda, 5, &cfg).map_err(|e| e.to_string())?;
    ensure(pca.failure.is_none(), || format!("{:?}", pca.failure))?;
    let mut used = [false; 5];
    let (mut vec_err, mut val_err): (f64, f64) = (0.0, 0.0);
    for c in &pca.components {
        let (j, dot) = (0..5).map(|j| (j, c.direction.dot(&cov.eigenvector(j)))).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
        ensure(!used[j], || format!("eigenvector {j} recovered twice"))?;
        used[j] = true;
        let e = (&c.direction * dot.signum() - cov.eigenvector(j)).norm();
        vec_err = vec_err.max(e);
        val_err = val_err.max(rel(c.eigenvalue, cov.eigenvalues()[j]));
    }
    ensure(vec_err < 1e-4, || format!("eigenvector error {vec_err:.2e}"))?;
    ensure(val_err < 1e-5, || format!("eigenvalue rel error {val_err:.2e}"))?;
    Ok(format!("5 eigenpairs, vector error {vec_err:.1e}, eigenvalue rel error {val_err:.1e}"))
}

fn criterion_8() -> Outcome {
    let cov = build_experiment_covariance(5, RngStream::new(808, 0)).unwrap();
    let r = oja_equivalence_check(&cov, 0.1, &random_unit_vector(5, RngStream::new(808, 1)), 2.0, 1e-3).map_err(|e| e.to_string())?;
    ensure((1.7..=2.3).contains(&r.richardson_ratio), || format!("Richardson ratio {:.3}", r.richardson_ratio))?;
    Ok(format!(
        "Euler error {:.3e} at dt, {:.3e} at dt/2, ratio {:.3}; same-scheme gap {:.2e}",
        r.euler_error, r.euler_error_half, r.richardson_ratio, r.same_scheme_gap
    ))
}

fn criterion_9() -> Outcome {
    let model = SpikedWishartModel::new(1.0, 2.0, random_unit_vector(5, RngStream::new(909, 0)), 10).unwrap();
    let mu = random_unit_vector(5, RngStream::new(909, 1)) * 0.7;
    let (m1, m2, m3) = wishart_moments(&model, &mu).unwrap();
    let n = 100_000;
    let mut sums = [[0.0f64; 2]; 3];
    for i in 0..n {
        let s = wishart_sample(&model, RngStream::new(910, i)).unwrap();
        let sm = s.matrix() * &mu;
        let vals = [s.trace(), sm.norm_squared(), mu.dot(&sm) * sm.norm_squared()];
        for (acc, v) in sums.iter_mut().zip(vals) {
            acc[0] += v;
            acc[1] += v * v;
        }
    }
    let mut z = Vec::new();
    for (acc, want) in sums.iter().zip([m1, m2, m3]) {
        let mean = acc[0] / n as f64;
        let var = (acc[1] / n as f64 - mean * mean) * n as f64 / (n as f64 - 1.0);
        z.push((mean - want).abs() / (var / n as f64).sqrt());
    }
    ensure(z.iter().all(|&x| x < 4.0), || format!("deviations in SE: {z:.2?}"))?;
    Ok(format!("deviations {:.2} / {:.2} / {:.2} SE over 1e5 draws", z[0], z[1], z[2]))
}

fn criterion_10() -> Outcome {
    let lambda = 0.1;
    let model = SpikedWishartModel::canonical(5, 1.0, 2.0, 10).unwrap();
    let c = icl_coefficients(&model, lambda);
    let a = alpha_star(&c);
    let mut h_at_star = None;
    for sign in [1.0, -1.0] {
        let r = risk_icl_inf(&(&model.spike * (sign * a)), &model, lambda).unwrap();
        ensure(r.grad().norm() < 1e-10, || format!("gradient {:.2e} at alpha_star", r.grad().norm()))?;
        h_at_star = Some(r.hess().clone());
    }
    let h = h_at_star.unwrap();
    let along = model.spike.dot(&(&h * &model.spike));
    ensure(rel(along, 4.0 * (c.a3 + c.b3)) < 1e-9, || format!("curvature along v {along} vs {}", 4.0 * (c.a3 + c.b3)))?;
    let smin = ascending_spectrum(&h).unwrap()[0];
    let (exact, _) = predicted_rate_icl(&model, lambda);
    ensure(rel(exact, smin) < 1e-9, || format!("rate {exact} vs smallest eigenvalue {smin}"))?;
    let small = SpikedWishartModel::canonical(5, 1e-4, 2.0, 10).unwrap();
    let (e, asym) = predicted_rate_icl(&small, lambda);
    ensure(rel(e, asym) < 0.01, || format!("small-xi ratio {}", e / asym))?;
    let mut rng = RngStream::new(1010, 0).rng();
    for draw in 0..100 {
        let d = rng.gen_range(1..=8);
        let n = rng.gen_range(d..=d + 10);
        let m = SpikedWishartModel::new(rng.gen_range(0.05..3.0), rng.gen_range(0.05..5.0), random_unit_vector(d, RngStream::new(1011, draw)), n).unwrap();
        let conds = icl_coefficients(&m, rng.gen_range(0.01..1.0)).conditions();
        ensure(conds == (true, true), || format!("draw {draw}: conditions {conds:?}"))?;
    }
    Ok(format!("alpha_star = {a:.6}, rate = {exact:.6}, small-xi ratio {:.5}, 100/100 draws satisfy both conditions", e / asym))
}

fn criterion_11() -> Outcome {
    let lambda = 0.1;
    let model = SpikedWishartModel::canonical(5, 1.0, 2.0, 10).unwrap();
    let c = icl_coefficients(&model, lambda);
    let star = &model.spike * alpha_star(&c);
    let h = risk_icl_inf(&star, &model, lambda).unwrap();
    let step = 0.5 / ascending_spectrum(h.hess()).unwrap()[4];
    let obj = IclInfObjective { model: &model, lambda };
    let mut worst: f64 = 0.0;
    for run in 0..10 {
        let cfg = OptimizerConfig::deterministic(step, 2_000_000);
        let t = gradient_descent(&obj, &random_unit_vector(5, RngStream::new(1111, run)), &cfg, &model.spike).map_err(|e| e.to_string())?;
        let dist = (&t.final_mu - &star).norm().min((&t.final_mu + &star).norm());
        worst = worst.max(dist);
    }
    ensure(worst < 1e-6, || format!("GD lands {worst:.2e} from alpha_star v"))?;
    let cfg = config(r#"{"experiment": "icl_align_finite", "record_every": 100000}"#);
    let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
    let mean = mean_final_alignment(&rows);
    ensure(mean > 0.99, || format!("SGD mean final alignment {mean:.5}"))?;
    Ok(format!("GD distance {worst:.1e}; SGD mean final alignment {mean:.5} after {} steps", cfg.iters))
}

fn criterion_12() -> Outcome {
    // Every sub-check runs so one failure does not hide the others.
    let (mut notes, mut failures) = (Vec::new(), Vec::new());
    let mut check = |ok: bool, note: String| if ok { notes.push(note) } else { failures.push(note) };
    let cfg = config(r#"{"experiment": "concentration"}"#);
    let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
    for k in 0..=2 {
        let est: Vec<f64> = metric(&rows, &format!("error_k{k}")).map(|r| r.value).collect();
        let slope = metric(&rows, &format!("slope_k{k}")).next().unwrap().value;
        check(est.windows(2).all(|w| w[1] < w[0]), format!("order {k} estimates {est:.4?}, log-log slope {slope:.2}"));
    }
    let cfg = config(r#"{"experiment": "w2_probe"}"#);
    let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
    for m in ["bures_surrogate", "projected_exact"] {
        let v: Vec<f64> = metric(&rows, m).map(|r| r.value).collect();
        check(v[0] > 0.0 && v.windows(2).all(|w| w[1] < w[0]), format!("{m} {v:.4?} decreasing"));
    }
    let v: Vec<f64> = metric(&rows, "projected_exact").map(|r| r.value).collect();
    check(v[2] * 10.0 < v[0], format!("1-D probe L=10 / L=1000 ratio {:.2} (need > 10)", v[0] / v[2]));
    for name in ["sweep_L", "icl_sweep_L"] {
        let cfg = config(&format!(r#"{{"experiment": "{name}"}}"#));
        let rows = run_experiment(&cfg, None).map_err(|e| e.to_string())?.rows;
        let (ls, means) = sweep_means(&rows);
        let rho = spearman(&ls, &means);
        check(ls.len() == 20 && rho > 0.8, format!("{name} Spearman {rho:.3} over {} lengths", ls.len()));
    }
    if failures.is_empty() {
        Ok(notes.join("; "))
    } else {
        Err(format!("failed: {}; passed: {}", failures.join("; "), notes.join("; ")))
    }
}

fn criterion_13() -> Outcome {
    let small = |e: Experiment| -> String {
        let extra = match e {
            Experiment::AlignSoftFinite | Experiment::AlignLinFinite | Experiment::IclAlignFinite => r#", "iters": 50, "batch": 16, "prompt_length": 20, "runs": 3"#,
            Experiment::AlignSoftInf | Experiment::AlignLinInf | Experiment::IclAlignInf => r#", "iters": 500, "runs": 3"#,
            Experiment::SweepL | Experiment::IclSweepL => r#", "iters": 10, "batch": 8, "l_list": [3, 10, 30], "runs": 3"#,
            Experiment::SweepD | Experiment::IclSweepD => r#", "iters": 10, "batch": 8, "prompt_length": 10, "d_list": [2, 4], "runs": 3"#,
            Experiment::LandscapeReport => r#", "l_list": [20], "samples": 64"#,
            Experiment::Concentration => r#", "l_list": [10, 30, 100], "samples": 100"#,
            Experiment::W2Probe => r#", "l_list": [10, 30], "samples": 100"#,
            Experiment::OjaCheck => r#", "horizon": 0.5, "dt": 0.001"#,
        };
        format!(r#"{{"experiment": "{}", "master_seed": 13{extra}}}"#, e.name())
    };
    for e in Experiment::ALL {
        let cfg = config(&small(e));
        let mut bytes = Vec::new();
        for workers in [1, 2, 1] {
            let dir = tempfile::tempdir().unwrap();
            let path = run_to_dir(&cfg, dir.path(), Some(workers), None).map_err(|err| format!("{}: {err}", e.name()))?;
            bytes.push(std::fs::read(path).unwrap());
        }
        ensure(bytes[0] == bytes[1] && bytes[1] == bytes[2], || format!("{}: CSV differs between re-runs", e.name()))?;
    }
    Ok("all 14 experiments byte-identical across 3 runs (1 and 2 workers)".into())
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 13] = [
        (1, "closed-form softmax risk vs Monte Carlo", criterion_1),
        (2, "gradient and Hessian vs finite differences", criterion_2),
        (3, "landscape exactness", criterion_3),
        (4, "global convergence of deterministic GD", criterion_4),
        (5, "SGD finite-prompt recovery", criterion_5),
        (6, "rate prediction", criterion_6),
        (7, "sequential PCA", criterion_7),
        (8, "Oja equivalence", criterion_8),
        (9, "Wishart moments", criterion_9),
        (10, "ICL landscape and rate", criterion_10),
        (11, "ICL recovery", criterion_11),
        (12, "monotone decay and sweep trends", criterion_12),
        (13, "determinism", criterion_13),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {n:>2} PASS ({secs:.1} s) {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n:>2} FAIL ({secs:.1} s) {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
