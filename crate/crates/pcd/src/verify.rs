//! Self-checks run by `pcd verify`: head invariance, CW-ReLU commutation,
//! gradient uniformity, the loss against a direct per-pixel loop, finite
//! difference gradient checks and queue semantics.

use pcd_core::adaptor::{adapt_head, random_grammar_head, verify_invariance};
use pcd_core::autodiff::{finite_diff_check, ScalarFn};
use pcd_core::distill::{gradient_uniformity_check, level_loss, pcd_loss, LossLevel, MemoryQueue};
use pcd_core::layers::{self, BnLayout, BnMode, MhsaParams, RunningStats};
use pcd_core::real::Real;
use pcd_core::rng::{tag, Rng};
use pcd_core::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn check(name: &'static str, r: Result<(bool, String)>) -> Check {
    match r {
        Ok((pass, detail)) => Check { name, pass, detail },
        Err(e) => Check {
            name,
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all(seed: u64) -> Vec<Check> {
    vec![
        check("head invariance", head_invariance(seed)),
        check("cw-relu commutation", cw_relu_commutation(seed)),
        check("gradient uniformity", uniformity(seed)),
        check("loss oracle", loss_oracle(seed)),
        check("gradient checks", gradient_checks()),
        check("queue semantics", queue_semantics()),
    ]
}

fn rng(seed: u64, which: u64) -> Rng {
    Rng::stream(seed, tag::VERIFY, &[which])
}

fn head_invariance(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let in_dim = r.range_usize(1, 9);
        let head = random_grammar_head(&mut r, in_dim, 5, 8)?;
        let adapted = adapt_head(&head, false)?;
        let rep = verify_invariance(&head, &adapted, 4, 7, 1e-5, &mut r)?;
        worst = worst.max(rep.max_abs_dev);
    }
    Ok((worst <= 1e-5, format!("100 heads, max |dev| {worst:.3e}")))
}

fn pool_pair(x: &Tensor, channel_wise: bool) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let p = layers::global_avg_pool(&mut tape, xv)?;
    let lhs = layers::relu(&mut tape, p)?;
    let y = if channel_wise {
        layers::cw_relu(&mut tape, xv)?
    } else {
        layers::relu(&mut tape, xv)?
    };
    let rhs = layers::global_avg_pool(&mut tape, y)?;
    Ok(tape.value(lhs).max_abs_diff(tape.value(rhs)))
}

fn cw_relu_commutation(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Tensor::gaussian_from(&[2, 4, 3, 3], &mut r, 1.0)?;
        worst = worst.max(pool_pair(&x, true)?);
    }
    // mean 1 with one negative pixel: relu changes the mean, cw-relu does not
    let counter = Tensor::new(&[1, 1, 1, 2], vec![-1.0, 3.0])?;
    let relu_dev = pool_pair(&counter, false)?;
    let cw_dev = pool_pair(&counter, true)?;
    let pass = worst <= 1e-6 && cw_dev == 0.0 && relu_dev > 0.1;
    Ok((pass, format!("max |dev| {worst:.3e}; plain relu counterexample dev {relu_dev}")))
}

fn unit_rows(k: usize, d: usize, r: &mut Rng) -> Result<Tensor> {
    let mut q = MemoryQueue::new(k, d)?;
    q.push_rows(&Tensor::gaussian_from(&[k, d], r, 1.0)?)?;
    Ok(q.snapshot().expect("non-empty"))
}

fn uniformity(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 2);
    let s = Tensor::gaussian_from(&[2, 6, 3, 3], &mut r, 1.0)?;
    let t = Tensor::gaussian_from(&[2, 6, 3, 3], &mut r, 1.0)?;
    let negs = unit_rows(8, 6, &mut r)?;
    let image = gradient_uniformity_check(LossLevel::Image, &s, &t, Some(&negs), 0.2)?.relative();
    let pixel = gradient_uniformity_check(LossLevel::Pixel, &s, &t, Some(&negs), 0.2)?.relative();
    Ok((image <= 1e-6 && pixel > 1e-3, format!("image-level spread {image:.2e}, pixel-level spread {pixel:.2e}")))
}

fn unit(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn per_pixel_loop(s: &Tensor, t: &Tensor, negs: &Tensor, tau: f64) -> f64 {
    let (n, d, h, w) = (s.shape()[0], s.shape()[1], s.shape()[2], s.shape()[3]);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let negs: Vec<Vec<f64>> = negs.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let mut total = 0.0;
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let sv = unit((0..d).map(|c| s.at(&[b, c, i, j]) as f64));
                let tv = unit((0..d).map(|c| t.at(&[b, c, i, j]) as f64));
                let pos = (dot(&sv, &tv) / tau).exp();
                let neg: f64 = negs.iter().map(|k| (dot(&sv, k) / tau).exp()).sum();
                total -= (pos / (pos + neg)).ln();
            }
        }
    }
    total / (n * h * w) as f64
}

fn loss_value(s: &Tensor, t: &Tensor, negs: Option<&Tensor>, tau: f64) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let (sv, tv) = (tape.leaf(s.clone()), tape.constant(t.clone()));
    let l = pcd_loss(&mut tape, sv, tv, negs, tau)?;
    Ok(tape.value(l).item() as f64)
}

fn loss_oracle(seed: u64) -> Result<(bool, String)> {
    let mut r = rng(seed, 3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, d) = (r.range_usize(1, 3), r.range_usize(2, 7));
        let (h, w) = (r.range_usize(1, 5), r.range_usize(1, 5));
        let k = r.range_usize(1, 9);
        let s = Tensor::gaussian_from(&[n, d, h, w], &mut r, 1.0)?;
        let t = Tensor::gaussian_from(&[n, d, h, w], &mut r, 1.0)?;
        let negs = unit_rows(k, d, &mut r)?;
        let got = loss_value(&s, &t, Some(&negs), 0.2)?;
        worst = worst.max((got - per_pixel_loop(&s, &t, &negs, 0.2)).abs());
    }
    let e = Tensor::new(&[1, 2, 1, 1], vec![1.0, 0.0])?;
    let neg = Tensor::new(&[1, 2], vec![0.0, 1.0])?;
    let analytic = loss_value(&e, &e, Some(&neg), 0.2)?;
    let exact = (-5f64).exp().ln_1p();
    let adev = (analytic - exact).abs();
    Ok((worst <= 1e-6 && adev <= 1e-7, format!("50 instances max |dev| {worst:.2e}; log1p(e^-5) dev {adev:.2e}")))
}

fn weighted<S: Real>(tape: &mut Tape<S>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::<f32>::gaussian(&shape, seed, 1.0)?.cast());
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

fn cst<S: Real>(tape: &mut Tape<S>, shape: &[usize], seed: u64) -> Result<Var> {
    Ok(tape.constant(Tensor::<f32>::gaussian(shape, seed, 1.0)?.cast()))
}

#[derive(Clone, Copy)]
enum Probe {
    Conv,
    BnTrain,
    BnInference,
    CwRelu,
    Bilinear,
    Mhsa,
    L2,
    PixelLoss,
    ImageLoss,
}

impl Probe {
    const ALL: [(Probe, &'static str, &'static [usize]); 9] = [
        (Probe::Conv, "conv", &[2, 3, 5, 5]),
        (Probe::BnTrain, "bn-train", &[4, 3, 2, 2]),
        (Probe::BnInference, "bn-inference", &[2, 3, 2, 2]),
        (Probe::CwRelu, "cw-relu", &[2, 4, 3, 3]),
        (Probe::Bilinear, "bilinear", &[1, 2, 3, 3]),
        (Probe::Mhsa, "mhsa", &[2, 4, 2, 3]),
        (Probe::L2, "l2-normalize", &[3, 5, 2, 2]),
        (Probe::PixelLoss, "pixel-loss", &[2, 4, 3, 3]),
        (Probe::ImageLoss, "image-loss", &[2, 4, 3, 3]),
    ];
}

impl ScalarFn for Probe {
    fn eval<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let (m, v) = ([0.3f32, -1.0, 2.0], [0.5f32, 2.0, 1.0]);
        let y = match self {
            Probe::Conv => {
                let w = cst(tape, &[4, 3, 3, 3], 11)?;
                let b = cst(tape, &[4], 12)?;
                layers::conv2d(tape, x, w, Some(b), 2, 1)?
            }
            Probe::BnTrain | Probe::BnInference => {
                let g = cst(tape, &[3], 13)?;
                let b = cst(tape, &[3], 14)?;
                let mode = if matches!(self, Probe::BnTrain) { BnMode::Train } else { BnMode::Inference };
                let stats = RunningStats { mean: &m, var: &v };
                layers::batchnorm(tape, x, Some(g), Some(b), stats, 1e-5, mode, BnLayout::Map)?.0
            }
            Probe::CwRelu => layers::cw_relu(tape, x)?,
            Probe::Bilinear => layers::bilinear_resize(tape, x, 5, 7)?,
            Probe::Mhsa => {
                let p = MhsaParams::random(4, 2, 3, &mut Rng::seed_from_u64(15))?;
                let vars = p.bind(tape, false);
                layers::mhsa(tape, x, &vars)?.output
            }
            Probe::L2 => layers::l2_normalize(tape, x, 1)?,
            Probe::PixelLoss | Probe::ImageLoss => {
                let level = if matches!(self, Probe::PixelLoss) { LossLevel::Pixel } else { LossLevel::Image };
                let t = cst(tape, &[2, 4, 3, 3], 16)?;
                let negs = unit_rows(6, 4, &mut Rng::seed_from_u64(17))?;
                return level_loss(tape, level, x, t, Some(&negs), 0.2);
            }
        };
        weighted(tape, y, 18)
    }
}

fn gradient_checks() -> Result<(bool, String)> {
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for (i, (probe, name, shape)) in Probe::ALL.iter().enumerate() {
        let x = Tensor::gaussian(shape, 100 + i as u64, 1.0)?;
        let rep = finite_diff_check(probe, &x, 1e-3)?;
        worst = worst.max(rep.max_rel_err);
        if rep.max_rel_err > 1e-3 {
            failed.push(format!("{name} ({:.2e})", rep.max_rel_err));
        }
    }
    let detail = if failed.is_empty() {
        format!("{} probes, max rel err {worst:.2e}", Probe::ALL.len())
    } else {
        format!("failed: {}", failed.join(", "))
    };
    Ok((failed.is_empty(), detail))
}

fn queue_semantics() -> Result<(bool, String)> {
    let mut q = MemoryQueue::new(4, 3)?;
    let pushes: Vec<[f32; 3]> = (0..11).map(|i| [i as f32 + 1.0, (i % 3) as f32 - 1.0, 0.5]).collect();
    let mut ok = true;
    for (n, v) in pushes.iter().enumerate() {
        q.push_vector(v)?;
        let n = n + 1;
        ok &= q.len() == n.min(4);
        for (slot, src) in (n.saturating_sub(4)..n).enumerate() {
            let got = q.get(slot).expect("in range");
            let want = unit(pushes[src].iter().map(|&x| x as f64));
            ok &= got.iter().zip(&want).all(|(a, b)| (*a as f64 - b).abs() < 1e-6);
            ok &= (got.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs() <= 1e-5;
        }
    }
    // negatives enter the loss as constants
    let before = q.snapshot().expect("non-empty");
    let mut tape = Tape::<f32>::new();
    let s = tape.leaf(Tensor::gaussian(&[1, 3, 2, 2], 19, 1.0)?);
    let t = tape.leaf(Tensor::gaussian(&[1, 3, 2, 2], 20, 1.0)?);
    let t = tape.detach(t);
    let l = pcd_loss(&mut tape, s, t, Some(&before), 0.2)?;
    tape.backward(l)?;
    ok &= tape.grad(s).is_some() && q.snapshot().expect("non-empty").bit_eq(&before);
    Ok((ok, "capacity 4, 11 pushes".into()))
}
