//! Built-in correctness checks: finite-difference gradient checks and
//! comparisons of the fast kernels against direct brute-force loops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gacn::datagen::TrainingSample;
use gacn::gradcheck;
use gacn::imgproc::{spatial_frequency, GuidedFilterPlan};
use gacn::losses::{dice_loss, qg_loss, QgConfig};
use gacn::metrics::qg_eval;
use gacn::net::Bound;
use gacn::trainer::{sample_loss, TrainConfig};
use gacn::{Tape, Tensor, WeightStore};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

fn result(name: &'static str, value: gacn::Result<(bool, String)>) -> CheckResult {
    match value {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run every check; none of them take more than a few seconds.
pub fn run_all() -> Vec<CheckResult> {
    vec![
        result("conv2d gradient", conv_gradient()),
        result("sigmoid gradient", sigmoid_gradient()),
        result("spatial frequency oracle", sf_oracle()),
        result("guided filter oracle", guided_oracle()),
        result("dice closed form", dice_closed_form()),
        result("Q_g closed form", qg_closed_form()),
        result("Q_g smooth vs exact", qg_smooth_vs_exact()),
        result("weight file round trip", weight_round_trip()),
        result("pipeline gradient", pipeline_gradient()),
    ]
}

fn summarize(report: gradcheck::GradcheckReport, tol: f64) -> (bool, String) {
    (
        report.passes(tol),
        format!(
            "max rel error {:.2e} over {} entries (tol {tol:.0e})",
            report.max_rel_error, report.checked
        ),
    )
}

fn conv_gradient() -> gacn::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = vec![
        random(&[1, 2, 5, 5], -1.0, 1.0, &mut rng),
        random(&[3, 2, 3, 3], -1.0, 1.0, &mut rng),
        random(&[3], -1.0, 1.0, &mut rng),
    ];
    let report = gradcheck::check(
        &params,
        |_, v| Ok(v[0].conv2d(&v[1], &v[2])?.sum()),
        1e-5,
        |_, _| true,
    )?;
    Ok(summarize(report, 1e-6))
}

fn sigmoid_gradient() -> gacn::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = vec![
        random(&[1, 1, 4, 4], -3.0, 3.0, &mut rng),
        random(&[1, 1, 4, 4], -1.0, 1.0, &mut rng),
    ];
    let report = gradcheck::check(
        &params,
        |t, v| {
            let w = t.constant(v[1].value().clone());
            Ok(v[0].sigmoid().mul(&w)?.sum())
        },
        1e-5,
        |p, _| p == 0,
    )?;
    Ok(summarize(report, 1e-6))
}

/// Spatial frequency by direct window loops with replicate padding.
pub fn naive_spatial_frequency(f: &[f64], c: usize, h: usize, w: usize, r: usize) -> Vec<f64> {
    let at = |ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        f[(ch * h + y) * w + x]
    };
    let r = r as isize;
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let (mut rf, mut cf) = (0.0, 0.0);
            for y in i - r..=i + r {
                for x in j - r..=j + r {
                    for ch in 0..c {
                        rf += (at(ch, y, x) - at(ch, y, x - 1)).powi(2);
                        cf += (at(ch, y, x) - at(ch, y - 1, x)).powi(2);
                    }
                }
            }
            out[i as usize * w + j as usize] = ((rf + cf) / n).sqrt();
        }
    }
    out
}

/// Guided filter with every window mean taken by direct summation.
pub fn naive_guided_filter(
    guide: &[f64],
    p: &[f64],
    h: usize,
    w: usize,
    r: usize,
    eps: f64,
) -> Vec<f64> {
    let mean = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (mut s, mut n) = (0.0, 0.0);
                for y in i.saturating_sub(r)..(i + r + 1).min(h) {
                    for x in j.saturating_sub(r)..(j + r + 1).min(w) {
                        s += v[y * w + x];
                        n += 1.0;
                    }
                }
                out[i * w + j] = s / n;
            }
        }
        out
    };
    let mi = mean(guide);
    let mp = mean(p);
    let mii = mean(&guide.iter().map(|g| g * g).collect::<Vec<_>>());
    let mip = mean(&guide.iter().zip(p).map(|(g, p)| g * p).collect::<Vec<_>>());
    let a: Vec<f64> = (0..h * w)
        .map(|k| (mip[k] - mi[k] * mp[k]) / (mii[k] - mi[k] * mi[k] + eps))
        .collect();
    let b: Vec<f64> = (0..h * w).map(|k| mp[k] - a[k] * mi[k]).collect();
    let ma = mean(&a);
    let mb = mean(&b);
    (0..h * w).map(|k| ma[k] * guide[k] + mb[k]).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn sf_oracle() -> gacn::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (c, h, w, r) = (
            rng.gen_range(1..4),
            rng.gen_range(1..14),
            rng.gen_range(1..14),
            rng.gen_range(0..6),
        );
        let f: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        worst = worst.max(max_abs_diff(
            &spatial_frequency(&f, c, h, w, r),
            &naive_spatial_frequency(&f, c, h, w, r),
        ));
    }
    Ok((worst < 1e-9, format!("max abs diff {worst:.2e}")))
}

fn guided_oracle() -> gacn::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let (h, w, r) = (
            rng.gen_range(1..16),
            rng.gen_range(1..16),
            rng.gen_range(1..6),
        );
        let eps = rng.gen_range(0.001..0.5);
        let g: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let fast = GuidedFilterPlan::new(&g, h, w, r, eps).apply(&p);
        worst = worst.max(max_abs_diff(
            &fast,
            &naive_guided_filter(&g, &p, h, w, r, eps),
        ));
    }
    Ok((worst < 1e-10, format!("max abs diff {worst:.2e}")))
}

fn dice_closed_form() -> gacn::Result<(bool, String)> {
    let tape = Tape::no_grad();
    let p = tape.constant(Tensor::new([1, 1, 1, 4], vec![1.0, 1.0, 0.0, 0.0])?);
    let g = Tensor::new([1, 1, 1, 4], vec![1.0, 0.0, 0.0, 0.0])?;
    let v = dice_loss(&p, &g)?.value().item();
    Ok(((v - 0.25).abs() < 1e-15, format!("{v} (expected 0.25)")))
}

fn ramp(n: usize) -> Tensor {
    Tensor::from_fn([1, 1, n, n], |i| {
        let (y, x) = ((i / n) as f64, (i % n) as f64);
        (0.5 + 0.3 * (0.7 * x).sin() * (0.4 * y).cos()).clamp(0.0, 1.0)
    })
}

fn qg_closed_form() -> gacn::Result<(bool, String)> {
    let cfg = QgConfig::default();
    let a = ramp(16);
    let q = qg_eval(&a, &a, &a, &cfg)?;
    let expected = (1.0 / (1.0 + (-5.0f64).exp())).powi(2);
    Ok((
        (q - expected).abs() < 1e-4,
        format!("{q:.6} (expected {expected:.6})"),
    ))
}

fn qg_smooth_vs_exact() -> gacn::Result<(bool, String)> {
    let cfg = QgConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let a = random(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let b = random(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let f = random(&[1, 1, 16, 16], 0.0, 1.0, &mut rng);
        let exact = qg_eval(&a, &b, &f, &cfg)?;
        let tape = Tape::no_grad();
        let (va, vb, vf) = (tape.constant(a), tape.constant(b), tape.constant(f));
        let smooth = 1.0 - qg_loss(&va, &vb, &vf, &cfg)?.value().item();
        worst = worst.max((exact - smooth).abs());
    }
    Ok((worst < 1e-3, format!("max |exact - smooth| {worst:.2e}")))
}

fn weight_round_trip() -> gacn::Result<(bool, String)> {
    let cfg = gacn::FusionConfig::default();
    let w = cfg.init_weights(6);
    let mut bytes = Vec::new();
    w.write_to(&mut bytes)
        .map_err(|e| gacn::Error::io("<memory>", e))?;
    let (back, _) = WeightStore::read_from(&mut bytes.as_slice(), "<memory>".as_ref())?;
    Ok((
        back == w,
        format!("{} tensors, {} bytes", w.len(), bytes.len()),
    ))
}

fn pipeline_gradient() -> gacn::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 12;
    let sample = TrainingSample {
        near: random(&[1, 1, n, n], 0.0, 1.0, &mut rng),
        far: random(&[1, 1, n, n], 0.0, 1.0, &mut rng),
        mask: Tensor::from_fn([1, 1, n, n], |i| ((i % n) < n / 2) as u8 as f64),
        fused: Tensor::zeros([1, 1, n, n]),
    };
    let cfg = TrainConfig::desk();
    let weights = cfg.net.init_weights(8);
    let names: Vec<String> = weights.iter().map(|(k, _)| k.clone()).collect();
    let params: Vec<Tensor> = weights.iter().map(|(_, t)| t.clone()).collect();
    let report = gradcheck::check(
        &params,
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().cloned()));
            Ok(sample_loss(tape, &bound, &sample, &cfg)?.0)
        },
        1e-5,
        // a spread-out subset keeps this fast; the full sweep lives in the test suite
        |p, e| (p * 31 + e) % 97 == 0,
    )?;
    Ok(summarize(report, 1e-3))
}
