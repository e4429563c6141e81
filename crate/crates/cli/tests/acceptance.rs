//! Acceptance suite. Prints one `PASS` / `FAIL` / `SKIP` line per criterion
//! and exits non-zero if any criterion fails.
//!
//! A6 needs inputs that are not shipped with the repository; set
//! `PGLR_A6_PREPROCESSED` (guide image for the noisy cameraman at σ = 25,
//! seed 1) and `PGLR_A6_MODEL` (a 250-component, 8×8 prior) to run it.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use pglr::gmm::{sample_training_patches, train_em};
use pglr::image::{encode_pfmg, read_image};
use pglr::linalg::symmetric_eigen;
use pglr::lowrank::{gnnm_objective, gnnm_shrink, nnp_shrink, svd, wnnp_shrink};
use pglr::metrics::{mse, psnr, ssim};
use pglr::noise::{add_noise, GaussianStream, SplitMix64};
use pglr::patches::{aggregate, assign_classes, balance_classes, build_stacks, extract_patches};
use pglr::pipeline::run;
use pglr::preprocess::local_denoise;
use pglr::{GmmModel, Image, Matrix, PipelineConfig, ShrinkageSpec, TrainOptions, TrainReport};

const SIGMA: f64 = 25.0;

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/assets")
}

/// Uniform and normal samples for test data.
struct Rng {
    bits: SplitMix64,
    normal: GaussianStream,
}

impl Rng {
    fn new(seed: u64) -> Self {
        Rng { bits: SplitMix64::new(seed ^ 0xA5A5_A5A5), normal: GaussianStream::new(seed) }
    }

    fn uniform(&mut self) -> f64 {
        (self.bits.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.uniform() * (hi - lo + 1) as f64) as usize
    }

    fn normal(&mut self) -> f64 {
        self.normal.next_standard()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    /// Random direction scaled to a Frobenius norm drawn from `(0, radius]`.
    fn perturbation(&mut self, rows: usize, cols: usize, radius: f64) -> Matrix {
        let dir = self.matrix(rows, cols);
        let norm = dir.frobenius_norm().max(f64::MIN_POSITIVE);
        dir.scale(radius * (1.0 - self.uniform()) / norm)
    }
}

/// Singular values from the eigenvalues of the smaller Gram matrix, descending.
fn singular_values_by_eigen(x: &Matrix) -> Vec<f64> {
    let gram = if x.rows() <= x.cols() { x.outer_gram() } else { x.inner_gram() };
    let (values, _) = symmetric_eigen(&gram).unwrap();
    values.iter().map(|v| v.max(0.0).sqrt()).collect()
}

fn wnnp_objective(y: &Matrix, x: &Matrix, thresholds: &[f64]) -> f64 {
    let penalty: f64 = singular_values_by_eigen(x)
        .iter()
        .zip(thresholds)
        .map(|(s, t)| s * t)
        .sum();
    0.5 * y.sub(x).frobenius_norm_sq() + penalty
}

// A1
fn gnnm_optimality() -> Result<String, String> {
    let mut rng = Rng::new(101);
    let mut worst = f64::NEG_INFINITY;
    for case in 0..100 {
        let (q, d) = (rng.range(1, 10), rng.range(1, 10));
        let y = rng.matrix(q, d);
        for mu in [0.1, 1.0, 10.0] {
            let (x, _) = gnnm_shrink(&y, mu).unwrap();
            let best = gnnm_objective(&y, &x, mu).unwrap();
            for _ in 0..1000 {
                let other = x.add(&rng.perturbation(q, d, 0.1));
                let gap = best - gnnm_objective(&y, &other, mu).unwrap();
                worst = worst.max(gap);
                if gap > 1e-9 {
                    return Err(format!("case {case} ({q}x{d}, mu {mu}): perturbation beats shrinkage by {gap:e}"));
                }
            }
        }
    }
    Ok(format!("300 problems x 1000 perturbations, largest objective excess of the optimum {worst:.2e}"))
}

// A2
fn closed_forms() -> Result<String, String> {
    let mut rng = Rng::new(202);
    let mut worst_sv = 0.0f64;
    for _ in 0..100 {
        let (q, d) = (rng.range(1, 10), rng.range(1, 10));
        let y = rng.matrix(q, d);
        for mu in [0.1, 1.0, 10.0] {
            let lambda = svd(&y).unwrap().singular_values;
            let out = svd(&nnp_shrink(&y, mu).unwrap()).unwrap().singular_values;
            for (l, o) in lambda.iter().zip(&out) {
                let err = (o - (l - mu).max(0.0)).abs() / lambda[0].max(1.0);
                worst_sv = worst_sv.max(err);
                if err > 1e-10 {
                    return Err(format!("nnp singular value {o} vs max({l} - {mu}, 0)"));
                }
            }
        }
    }
    let mut worst_gap = f64::NEG_INFINITY;
    for case in 0..100 {
        let (q, d) = (rng.range(1, 10), rng.range(1, 10));
        let y = rng.matrix(q, d);
        let n = q.min(d);
        let mut weights: Vec<f64> = (0..n).map(|_| rng.uniform() * 2.0).collect();
        weights.sort_by(f64::total_cmp);
        for mu in [0.1, 1.0, 10.0] {
            let spec = ShrinkageSpec::weighted(mu, weights.clone()).unwrap();
            let thresholds: Vec<f64> = weights.iter().map(|w| mu * w).collect();
            let x = wnnp_shrink(&y, &spec).unwrap();
            let best = wnnp_objective(&y, &x, &thresholds);
            for _ in 0..1000 {
                let other = x.add(&rng.perturbation(q, d, 0.1));
                let gap = best - wnnp_objective(&y, &other, &thresholds);
                worst_gap = worst_gap.max(gap);
                if gap > 1e-9 {
                    return Err(format!("wnnp case {case}: perturbation beats shrinkage by {gap:e}"));
                }
            }
        }
    }
    Ok(format!(
        "nnp singular values within {worst_sv:.1e} (relative); wnnp largest objective excess {worst_gap:.2e}"
    ))
}

// A3
fn eigenvalue_shift() -> Result<String, String> {
    let (rows, cols, sigma) = (64usize, 4096usize, 10.0);
    let m = cols as f64;
    let noise_eig = m * sigma * sigma;
    let signal = [20.0 * noise_eig, 8.0 * noise_eig, 3.0 * noise_eig];
    let mut worst_top = 0.0f64;
    let mut worst_tail = 0.0f64;
    for seed in 1..=20u64 {
        let mut rng = Rng::new(seed);
        // Orthonormal left factors via Gram-Schmidt, orthonormal right factors likewise.
        let orthonormal = |rng: &mut Rng, len: usize| -> Vec<Vec<f64>> {
            let mut basis: Vec<Vec<f64>> = Vec::new();
            for _ in 0..3 {
                let mut v: Vec<f64> = (0..len).map(|_| rng.normal()).collect();
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                    v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
                }
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.iter_mut().for_each(|a| *a /= n);
                basis.push(v);
            }
            basis
        };
        let u = orthonormal(&mut rng, rows);
        let v = orthonormal(&mut rng, cols);
        let y = Matrix::from_fn(rows, cols, |r, c| {
            let clean: f64 = (0..3).map(|k| signal[k].sqrt() * u[k][r] * v[k][c]).sum();
            clean + sigma * rng.normal()
        });
        let (by_eigen, _) = symmetric_eigen(&y.outer_gram()).map_err(|e| e.to_string())?;
        let by_svd: Vec<f64> = svd(&y).map_err(|e| e.to_string())?.singular_values.iter().map(|s| s * s).collect();
        for (route, eig) in [("eigen", &by_eigen), ("svd", &by_svd)] {
            for k in 0..3 {
                let expected = signal[k] + noise_eig;
                let rel = (eig[k] - expected).abs() / expected;
                worst_top = worst_top.max(rel);
                if rel > 0.10 {
                    return Err(format!("seed {seed} {route}: eigenvalue {k} is {:.4e}, expected {expected:.4e}", eig[k]));
                }
            }
            let tail = eig[3..].iter().sum::<f64>() / (rows - 3) as f64;
            let rel = (tail - noise_eig).abs() / noise_eig;
            worst_tail = worst_tail.max(rel);
            if rel > 0.10 {
                return Err(format!("seed {seed} {route}: trailing mean {tail:.4e}, expected {noise_eig:.4e}"));
            }
        }
        for (a, b) in by_eigen.iter().zip(&by_svd) {
            if (a - b).abs() > 1e-8 * by_eigen[0] {
                return Err(format!("seed {seed}: eigen and svd routes disagree ({a} vs {b})"));
            }
        }
    }
    Ok(format!("20 seeds, worst relative error top-3 {worst_top:.3}, trailing mean {worst_tail:.3}"))
}

fn synthetic_images() -> Vec<(&'static str, Image)> {
    vec![
        ("gradient", Image::from_fn(64, 64, |r, c| 40.0 + 1.5 * r as f64 + 1.2 * c as f64)),
        ("checkerboard", Image::from_fn(64, 64, |r, c| if (r / 8 + c / 8) % 2 == 0 { 60.0 } else { 190.0 })),
        (
            "disk",
            Image::from_fn(64, 64, |r, c| {
                let (y, x) = (r as f64 - 31.5, c as f64 - 31.5);
                if x * x + y * y < 400.0 { 200.0 } else { 50.0 }
            }),
        ),
    ]
}

// A4
fn preprocessor_gain() -> Result<String, String> {
    let mut parts = Vec::new();
    let mut failed = false;
    for (name, clean) in synthetic_images() {
        let noisy = add_noise(&clean, SIGMA, 1).unwrap();
        let out = local_denoise(&noisy, SIGMA, &Default::default()).unwrap();
        let gain = psnr(&clean, &out).unwrap() - psnr(&clean, &noisy).unwrap();
        failed |= gain < 3.0;
        parts.push(format!("{name} +{gain:.2} dB"));
    }
    let msg = parts.join(", ");
    if failed { Err(msg) } else { Ok(msg) }
}

struct Shared {
    clean: Image,
    noisy: Image,
    model: GmmModel,
    reports: Vec<TrainReport>,
}

fn train_prior() -> (GmmModel, TrainReport) {
    let mut paths: Vec<PathBuf> = fs::read_dir(assets().join("train"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    let images: Vec<Image> = paths.iter().map(|p| read_image(p).unwrap()).collect();
    assert!(images.len() >= 5);
    let patches = sample_training_patches(&images, 8, 20_000, 1).unwrap();
    train_em(&patches, &TrainOptions { k: 32, max_iters: 30, seed: 1, ..Default::default() }).unwrap()
}

// A5
fn end_to_end(shared: &Shared) -> Result<String, String> {
    let cfg = PipelineConfig { k_components: 32, ..Default::default() };
    let (out, trace) = run(&shared.noisy, SIGMA, &shared.model, &cfg, None, Some(&shared.clean)).unwrap();
    let noisy_psnr = psnr(&shared.clean, &shared.noisy).unwrap();
    let final_psnr = psnr(&shared.clean, &out).unwrap();
    let per_iter: Vec<f64> = trace.iterations.iter().map(|r| r.psnr.unwrap()).collect();
    let sigmas = trace.sigmas();
    let msg = format!(
        "noisy {noisy_psnr:.2} dB -> {final_psnr:.2} dB (SSIM {:.4}); per iteration {:?}; sigma {:?}",
        ssim(&shared.clean, &out).unwrap(),
        per_iter.iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>(),
        sigmas.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>(),
    );
    let ok = trace.len() == 5
        && final_psnr >= noisy_psnr + 6.0
        && per_iter[4] >= per_iter[0]
        && sigmas[1..].windows(2).all(|w| w[1] <= w[0]);
    if ok { Ok(msg) } else { Err(msg) }
}

// A6
fn paper_anchor(shared: &Shared) -> Option<Result<String, String>> {
    let guide = std::env::var_os("PGLR_A6_PREPROCESSED")?;
    let model = std::env::var_os("PGLR_A6_MODEL")?;
    let guide = read_image(&guide).ok()?;
    let model = GmmModel::load(&model).ok()?;
    let cfg = PipelineConfig { k_components: model.k(), ..Default::default() };
    let (out, _) = run(&shared.noisy, SIGMA, &model, &cfg, Some(&guide), Some(&shared.clean)).ok()?;
    let p = psnr(&shared.clean, &out).ok()?;
    Some(Ok(format!("PSNR {p:.2} dB, {:+.2} dB from 29.90 dB (informational)", p - 29.90)))
}

// A7
fn aggregation_exactness(shared: &Shared) -> Result<String, String> {
    let grid = extract_patches(&shared.clean, 8, 2).unwrap();
    let noisy_grid = extract_patches(&shared.noisy, 8, 2).unwrap();
    let labels = assign_classes(&shared.model, &grid, SIGMA).unwrap();
    let (assignment, _) = balance_classes(&labels, &grid.rows(), 64, 360, 0).unwrap();
    // Realistic, non-uniform weights: ranks from shrinking the noisy stacks.
    let ranks: Vec<usize> = build_stacks(&noisy_grid, &assignment)
        .unwrap()
        .iter()
        .map(|s| gnnm_shrink(&s.matrix, s.len() as f64 * SIGMA * SIGMA).unwrap().1)
        .collect();
    let stacks = build_stacks(&grid, &assignment).unwrap();
    let start = Instant::now();
    let out = aggregate(&stacks, &ranks, 256, 256).unwrap();
    let elapsed = start.elapsed();
    let err = out
        .pixels()
        .iter()
        .zip(shared.clean.pixels())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let msg = format!("{} classes, max abs error {err:e}, aggregation {:.3} s", stacks.len(), elapsed.as_secs_f64());
    if err == 0.0 && elapsed < Duration::from_secs(1) { Ok(msg) } else { Err(msg) }
}

// A8
fn determinism(shared: &Shared) -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let crop = Image::from_fn(128, 128, |r, c| shared.noisy.get(64 + r, 64 + c));
    let input = dir.path().join("noisy.pfmg");
    let model = dir.path().join("prior.gmm");
    fs::write(&input, encode_pfmg(&crop)).unwrap();
    shared.model.save(&model).unwrap();
    let mut outputs = Vec::new();
    for (i, threads) in [1, 4, 1, 4].iter().enumerate() {
        for ext in ["pgm", "pfmg"] {
            let out = dir.path().join(format!("out{i}.{ext}"));
            let status = Command::new(env!("CARGO_BIN_EXE_pglr"))
                .env("RAYON_NUM_THREADS", threads.to_string())
                .args(["denoise", "--sigma", "25", "--seed", "3"])
                .arg("--in")
                .arg(&input)
                .arg("--model")
                .arg(&model)
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            if !status.success() {
                return Err(format!("denoise run {i} failed with {status}"));
            }
            outputs.push((ext, *threads, fs::read(&out).unwrap()));
        }
    }
    for ext in ["pgm", "pfmg"] {
        let same: Vec<&Vec<u8>> = outputs.iter().filter(|o| o.0 == ext).map(|o| &o.2).collect();
        if same.windows(2).any(|w| w[0] != w[1]) {
            return Err(format!("{ext} outputs differ between runs"));
        }
    }
    Ok("8-bit and f64 outputs bit-identical across 2 runs each at 1 and 4 threads".into())
}

// A9
fn metrics_checks(shared: &Shared) -> Result<String, String> {
    let mut rng = Rng::new(909);
    for img in [&shared.clean, &shared.noisy] {
        let s = ssim(img, img).unwrap();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("ssim(a, a) = {s}"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (w, h) = (rng.range(11, 40), rng.range(11, 40));
        let a = Image::from_fn(w, h, |_, _| rng.uniform() * 255.0);
        let b = Image::from_fn(w, h, |_, _| rng.uniform() * 255.0);
        let oracle_mse = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (w * h) as f64;
        let oracle = 10.0 * (255.0f64.powi(2) / oracle_mse).log10();
        let err = (psnr(&a, &b).unwrap() - oracle).abs().max((mse(&a, &b).unwrap() - oracle_mse).abs() / oracle_mse);
        worst = worst.max(err);
        if err > 1e-9 {
            return Err(format!("psnr/mse disagree with the direct formula by {err:e}"));
        }
    }
    let mut levels = Vec::new();
    for seed in 1..=10 {
        let p = psnr(&shared.clean, &add_noise(&shared.clean, SIGMA, seed).unwrap()).unwrap();
        levels.push(p);
        if (p - 20.17).abs() > 0.15 {
            return Err(format!("seed {seed}: noisy PSNR {p:.3} dB outside 20.17 +- 0.15"));
        }
    }
    let lo = levels.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(format!("ssim(a,a) = 1; psnr/mse within {worst:.1e}; sigma 25 PSNR in [{lo:.3}, {hi:.3}] over 10 seeds"))
}

// A10
fn mixture_checks(shared: &Shared) -> Result<String, String> {
    for (i, report) in shared.reports.iter().enumerate() {
        let worst = report.worst_decrease();
        if worst > 1e-6 {
            return Err(format!("training run {i}: log-likelihood dropped by {worst:e}"));
        }
    }
    let inflated = shared.model.inflate_covariances(SIGMA).unwrap();
    let grid = extract_patches(&shared.noisy, 8, 7).unwrap();
    let mut worst = 0.0f64;
    for i in 0..grid.len() {
        for m in [&shared.model, &inflated] {
            let p = m.posterior(grid.vector(i)).unwrap();
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            if p.iter().any(|v| *v < 0.0) {
                return Err("negative posterior".into());
            }
        }
    }
    if worst > 1e-9 {
        return Err(format!("posterior sums off by {worst:e}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prior.gmm");
    shared.model.save(&path).unwrap();
    let back = GmmModel::load(&path).unwrap();
    if back.to_bytes() != shared.model.to_bytes() || back != shared.model {
        return Err("model file round trip is not bit-exact".into());
    }
    Ok(format!(
        "{} training runs monotone; {} posteriors sum to 1 within {worst:.1e}; model file round trip bit-exact",
        shared.reports.len(),
        2 * grid.len()
    ))
}

enum Outcome {
    Pass,
    Fail,
    Skip,
}

fn report(id: &str, limit: Option<Duration>, f: impl FnOnce() -> Option<Result<String, String>>) -> Outcome {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Some(Err(format!("panicked: {msg}")))
    });
    let elapsed = start.elapsed();
    let over = limit.is_some_and(|l| elapsed > l);
    let (outcome, word, detail) = match result {
        None => (Outcome::Skip, "SKIP", "external inputs not provided".to_string()),
        Some(Ok(msg)) if !over => (Outcome::Pass, "PASS", msg),
        Some(Ok(msg)) => (Outcome::Fail, "FAIL", format!("{msg}; over the {:?} budget", limit.unwrap())),
        Some(Err(msg)) => (Outcome::Fail, "FAIL", msg),
    };
    println!("{id:<4} {word} [{:.1} s] {detail}", elapsed.as_secs_f64());
    outcome
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let mut outcomes = vec![
        report("A1", Some(Duration::from_secs(10)), || Some(gnnm_optimality())),
        report("A2", Some(Duration::from_secs(10)), || Some(closed_forms())),
        report("A3", Some(Duration::from_secs(30)), || Some(eigenvalue_shift())),
        report("A4", Some(Duration::from_secs(60)), || Some(preprocessor_gain())),
    ];

    let start = Instant::now();
    let clean = read_image(assets().join("cameraman256.pgm")).unwrap();
    let noisy = add_noise(&clean, SIGMA, 1).unwrap();
    let (model, report_a5) = train_prior();
    // A second, small training run so the monotonicity check covers more than one fit.
    let (_, report_small) = train_em(
        &sample_training_patches(std::slice::from_ref(&clean), 8, 4000, 2).unwrap(),
        &TrainOptions { k: 8, max_iters: 20, seed: 2, ..Default::default() },
    )
    .unwrap();
    let shared = Shared { clean, noisy, model, reports: vec![report_a5, report_small] };
    let training = start.elapsed();

    outcomes.push(report("A5", Some(Duration::from_secs(600).saturating_sub(training)), || Some(end_to_end(&shared))));
    outcomes.push(report("A6", None, || paper_anchor(&shared)));
    outcomes.push(report("A7", None, || Some(aggregation_exactness(&shared))));
    outcomes.push(report("A8", Some(Duration::from_secs(600)), || Some(determinism(&shared))));
    outcomes.push(report("A9", None, || Some(metrics_checks(&shared))));
    outcomes.push(report("A10", None, || Some(mixture_checks(&shared))));

    println!("(prior training for A5/A7/A8/A10 took {:.1} s)", training.as_secs_f64());
    let failed = outcomes.iter().filter(|o| matches!(o, Outcome::Fail)).count();
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
