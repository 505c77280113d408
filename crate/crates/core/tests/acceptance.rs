//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Oracles here are written independently of the library.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dynad_core::diffusion::{
    ddim_step, forward_sample, guided_eps, make_subsequence, to_vec_f32, x0_estimate, GuidanceConfig, NoiseSchedule,
};
use dynad_core::dic::{build_bins, dynamic_step, mean_knn_distance, training_mean_distances, FeatureIndex, StepRounding};
use dynad_core::domain_adapt::lda_loss_features;
use dynad_core::grid::{Map, Mask};
use dynad_core::metrics::{auroc, pro};
use dynad_core::nets::{denoising_loss, LinearDenoiser};
use dynad_core::pipeline::{self, AblationMode, RunDir};
use dynad_core::RunConfig;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn tensor(v: Vec<f32>) -> Tensor {
    let n = v.len();
    Tensor::from_vec(v, n, &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    to_vec_f32(t).unwrap().iter().map(|v| v.to_bits()).collect()
}

// ---------------------------------------------------------------- 1

fn diffusion_algebra() -> Outcome {
    let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // x0_estimate inverts forward_sample at every step
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let x0 = randn(32, &mut rng);
        let eps = randn(32, &mut rng);
        let xt = forward_sample(&tensor(x0.clone()), t, &tensor(eps.clone()), &s, 1.0).map_err(e)?;
        let back = to_vec_f32(&x0_estimate(&xt, &tensor(eps), t, &s).map_err(e)?).map_err(e)?;
        let cond = 1.0 / (s.alpha_bar(t).unwrap() as f64).sqrt();
        for (a, b) in x0.iter().zip(&back) {
            let rel = (*a as f64 - *b as f64).abs() / ((1.0 + a.abs() as f64) * cond);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-5, || format!("round trip error {worst:e}"))?;

    // noiseless scaling ignores the noise bit for bit
    for t in [1, 37, 80, 500, 1000] {
        let x0 = tensor(randn(64, &mut rng));
        let a = forward_sample(&x0, t, &tensor(randn(64, &mut rng)), &s, 0.0).map_err(e)?;
        let b = forward_sample(&x0, t, &tensor(randn(64, &mut rng)), &s, 0.0).map_err(e)?;
        ensure(bits(&a) == bits(&b), || format!("omega=0 output depends on noise at t={t}"))?;
    }

    // eta = 0 is the identity on the prediction
    let off = GuidanceConfig { eta: 0.0, sigma: 0.0 };
    for t in [1, 80, 1000] {
        let eps = tensor(randn(64, &mut rng));
        let out = guided_eps(&eps, &tensor(randn(64, &mut rng)), &tensor(randn(64, &mut rng)), t, &s, &off).map_err(e)?;
        ensure(bits(&out) == bits(&eps), || format!("eta=0 changed the prediction at t={t}"))?;
    }

    // deterministic sampler loop is a pure function of its inputs
    let z0 = tensor(randn(64, &mut rng));
    let rollout = || -> dynad_core::Result<Vec<u32>> {
        let seq = make_subsequence(80, 10)?;
        let guide = GuidanceConfig { eta: 8.0, sigma: 0.0 };
        let mut z = forward_sample(&z0, 80, &z0.zeros_like()?, &s, 0.0)?;
        for (tau, prev) in seq.reverse_pairs() {
            let pred = (z.affine(0.3, 0.1))?;
            let eps = guided_eps(&pred, &z, &z0, tau, &s, &guide)?;
            z = ddim_step(&z, &eps, tau, prev, &s, 0.0, None)?;
        }
        Ok(bits(&z))
    };
    ensure(rollout().map_err(e)? == rollout().map_err(e)?, || "sigma=0 rollout not bitwise repeatable".into())?;

    // chain of single steps vs the direct formula, 10^4 draws, 3 standard errors
    const N: usize = 10_000;
    let x0v = 1.5f64;
    let mut report = Vec::new();
    for t in [1usize, 10, 80, 400, 1000] {
        let mut chain = Vec::with_capacity(N);
        for _ in 0..N {
            let mut x = x0v;
            for step in 1..=t {
                let beta = s.beta(step).unwrap() as f64;
                x = (1.0 - beta).sqrt() * x + beta.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            chain.push(x);
        }
        let eps = tensor(randn(N, &mut rng));
        let direct: Vec<f64> = to_vec_f32(&forward_sample(&tensor(vec![x0v as f32; N]), t, &eps, &s, 1.0).map_err(e)?)
            .map_err(e)?
            .iter()
            .map(|&v| v as f64)
            .collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
            (m, var, m4)
        };
        let (m1, v1, k1) = stats(&chain);
        let (m2, v2, k2) = stats(&direct);
        let se_mean = (v1 / N as f64 + v2 / N as f64).sqrt();
        let se_var = ((k1 - v1 * v1) / N as f64 + (k2 - v2 * v2) / N as f64).sqrt();
        ensure((m1 - m2).abs() <= 3.0 * se_mean, || format!("t={t}: means {m1:.4} vs {m2:.4} (se {se_mean:.4})"))?;
        ensure((v1 - v2).abs() <= 3.0 * se_var, || format!("t={t}: variances {v1:.4} vs {v2:.4} (se {se_var:.4})"))?;
        report.push(format!("t={t} dmean={:.1}se", (m1 - m2).abs() / se_mean));
    }
    Ok(format!("round-trip max rel {worst:.1e}; chain/direct {}", report.join(", ")))
}

// ---------------------------------------------------------------- 2

fn auroc_oracle(scores: &[f32], labels: &[bool]) -> f64 {
    let mut num = 0u64;
    let mut den = 0u64;
    for (i, &p) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (j, &n) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            den += 2;
            if p > n {
                num += 2;
            } else if p == n {
                num += 1;
            }
        }
    }
    num as f64 / den as f64
}

/// Union-find over 8-neighbours.
fn regions_oracle(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = mask.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut Vec<usize>, mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for (dy, dx) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < h as i64 && nx >= 0 && nx < w as i64 && mask.get(ny as usize, nx as usize) {
                    let a = find(&mut parent, y * w + x);
                    let b = find(&mut parent, ny as usize * w + nx as usize);
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..h * w {
        if mask.data()[i] {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
    }
    groups.into_values().collect()
}

/// Recomputes (FPR, mean region overlap) from scratch at every distinct
/// threshold and integrates up to the limit.
fn pro_oracle(maps: &[Map], masks: &[Mask], limit: f64) -> f64 {
    let regions: Vec<(usize, Vec<usize>)> = masks
        .iter()
        .enumerate()
        .flat_map(|(i, m)| regions_oracle(m).into_iter().map(move |r| (i, r)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.data().iter().filter(|b| !**b).count()).sum();
    let mut thresholds: Vec<f32> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut pts = vec![(0.0f64, 0.0f64)];
    for th in thresholds {
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|(m, k)| m.data().iter().zip(k.data()).filter(|(v, b)| !**b && **v >= th).count())
            .sum();
        let overlap: f64 = regions
            .iter()
            .map(|(i, px)| px.iter().filter(|&&p| maps[*i].data()[p] >= th).count() as f64 / px.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        pts.push((fp as f64 / negatives as f64, overlap));
    }
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        let (xe, ye) = if x1 > limit { (limit, y0 + (y1 - y0) * (limit - x0) / (x1 - x0)) } else { (x1, y1) };
        area += (xe - x0) * (y0 + ye) / 2.0;
    }
    area / limit
}

fn knn_oracle(y0: &[f32], vectors: &[Vec<f32>], k: usize, exclude_self: bool) -> f64 {
    let mut d: Vec<f64> = vectors
        .iter()
        .map(|v| v.iter().zip(y0).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum())
        .collect();
    d.sort_by(f64::total_cmp);
    let skip = if exclude_self && d.first() == Some(&0.0) { 1 } else { 0 };
    d[skip..skip + k].iter().sum::<f64>() / k as f64
}

fn bin_oracle(v: f64, edges: &[f64], min_bin: usize) -> usize {
    let nb = edges.len() - 1;
    let mut raw = 1;
    for i in 0..nb {
        if v >= edges[i] {
            raw = i + 1;
        }
    }
    if v >= edges[nb] {
        raw = nb;
    }
    raw.max(min_bin)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for inst in 0..500 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let coarse = inst % 2 == 0;
        let scores: Vec<f32> = (0..n)
            .map(|_| if coarse { rng.random_range(0..5) as f32 } else { rng.random::<f32>() })
            .collect();
        let a = auroc(&scores, &labels).map_err(e)?;
        let o = auroc_oracle(&scores, &labels);
        ensure(a == o, || format!("auroc instance {inst}: {a} vs oracle {o}"))?;
    }

    let mut pro_cases = 0;
    let mut worst = 0.0f64;
    // every mixed mask on every shape of at most 16 pixels, plus random masks
    // on every shape up to 8x8
    for h in 1..=8usize {
        for w in 1..=8usize {
            let n = h * w;
            if n < 2 || n > 16 {
                continue;
            }
            for code in 1u32..(1 << n) - 1 {
                let mask = Mask::from_fn(h, w, |y, x| code >> (y * w + x) & 1 == 1);
                let map = Map::from_fn(h, w, |_, _| rng.random_range(0..4) as f32 / 3.0);
                let a = pro(&[map.clone()], &[mask.clone()], 0.3).map_err(e)?;
                let o = pro_oracle(&[map], &[mask], 0.3);
                worst = worst.max((a - o).abs());
                pro_cases += 1;
            }
        }
    }
    for h in 1..=8 {
        for w in 1..=8 {
            for rep in 0..6 {
                let p = rng.random_range(0.1..0.6);
                let mut mask = Mask::from_fn(h, w, |_, _| rng.random_bool(p));
                let total = h * w;
                if total < 2 {
                    continue;
                }
                let data = mask.data_mut();
                data[0] = true;
                data[total - 1] = false;
                let levels = if rep % 2 == 0 { 5 } else { 1000 };
                let map = Map::from_fn(h, w, |_, _| rng.random_range(0..levels) as f32 / levels as f32);
                let limit = [0.3, 0.05, 1.0][rep % 3];
                let a = pro(&[map.clone()], &[mask.clone()], limit).map_err(e)?;
                let o = pro_oracle(&[map], &[mask], limit);
                worst = worst.max((a - o).abs());
                pro_cases += 1;
            }
        }
    }
    ensure(worst <= 1e-9, || format!("pro deviates from oracle by {worst:e}"))?;

    for inst in 0..300 {
        let n = rng.random_range(3..40);
        let dim = rng.random_range(1..12);
        let k = rng.random_range(1..n);
        let vectors: Vec<Vec<f32>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let index = FeatureIndex::from_vectors(vectors.clone(), k, 2).map_err(e)?;
        let q: Vec<f32> = if inst % 3 == 0 { vectors[0].clone() } else { (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect() };
        let ex = inst % 2 == 0 && inst % 3 == 0;
        let a = mean_knn_distance(&q, &index, ex).map_err(e)?;
        let o = knn_oracle(&q, &vectors, k, ex);
        ensure(a == o, || format!("knn instance {inst}: {a} vs {o}"))?;
    }

    for inst in 0..500 {
        let nb = rng.random_range(1..16);
        let lo = rng.random_range(-5.0..5.0);
        let means: Vec<f64> = (0..rng.random_range(2..30)).map(|_| lo + rng.random_range(0.0..10.0)).collect();
        let min_bin = rng.random_range(1..=nb);
        let table = match build_bins(&means, nb, 80, min_bin) {
            Ok(t) => t,
            Err(_) => continue,
        };
        for _ in 0..20 {
            let v = if rng.random_bool(0.2) {
                table.edges()[rng.random_range(0..=nb)]
            } else {
                lo + rng.random_range(-3.0..14.0)
            };
            let a = table.assign_bin(v);
            let o = bin_oracle(v, table.edges(), min_bin);
            ensure(a == o, || format!("bin instance {inst}: value {v} -> {a}, oracle {o}"))?;
        }
    }
    Ok(format!("auroc 500/500 exact; pro {pro_cases} cases max dev {worst:.1e}; knn 300 exact; bins exact"))
}

// ---------------------------------------------------------------- 3

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / norm
}

fn gradient_checks() -> Outcome {
    let h = 1e-3;
    let s = NoiseSchedule::linear(0.0015, 0.0195, 1000).map_err(e)?;
    let z0 = Tensor::new(&[[[[0.3f64, -0.7], [1.1, 0.2]]]], &Device::Cpu).map_err(e)?;
    let eps = Tensor::new(&[[[[0.5f64, 1.2], [-0.4, -1.0]]]], &Device::Cpu).map_err(e)?;
    let ts = [250usize];
    let loss_at = |scale: f64, shift: f64| -> f64 {
        let d = LinearDenoiser::new(scale, shift, DType::F64).unwrap();
        denoising_loss(&d, &z0, &ts, &eps, &s).unwrap().to_scalar::<f64>().unwrap()
    };
    let (a0, b0) = (0.4, -0.2);
    let d = LinearDenoiser::new(a0, b0, DType::F64).map_err(e)?;
    let loss = denoising_loss(&d, &z0, &ts, &eps, &s).map_err(e)?;
    let grads = loss.backward().map_err(e)?;
    let vars = d.params().vars();
    let names: Vec<&str> = d.params().names().collect();
    let mut analytic = Vec::new();
    for name in ["scale", "shift"] {
        let i = names.iter().position(|n| *n == name).ok_or("missing parameter")?;
        let g = grads.get(vars[i].as_tensor()).ok_or("no gradient")?;
        analytic.push(g.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?[0]);
    }
    let numeric = [
        (loss_at(a0 + h, b0) - loss_at(a0 - h, b0)) / (2.0 * h),
        (loss_at(a0, b0 + h) - loss_at(a0, b0 - h)) / (2.0 * h),
    ];
    let r6 = rel_err(&analytic, &numeric);
    ensure(r6 < 1e-4, || format!("noise objective gradient rel error {r6:e}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fa: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let fb: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (1, 3, 2, 2), &Device::Cpu).unwrap();
    let var = Var::from_tensor(&t(&fa)).map_err(e)?;
    let l = lda_loss_features(&[var.as_tensor().clone()], &[t(&fb)]).map_err(e)?;
    let g = l.backward().map_err(e)?;
    let analytic: Vec<f64> =
        g.get(var.as_tensor()).ok_or("no gradient")?.flatten_all().map_err(e)?.to_vec1::<f64>().map_err(e)?;
    let f = |v: &[f64]| lda_loss_features(&[t(v)], &[t(&fb)]).unwrap().to_scalar::<f64>().unwrap();
    let numeric: Vec<f64> = (0..12)
        .map(|i| {
            let mut p = fa.clone();
            let mut m = fa.clone();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect();
    let r10 = rel_err(&analytic, &numeric);
    ensure(r10 < 1e-4, || format!("feature loss gradient rel error {r10:e}"))?;
    Ok(format!("noise objective rel {r6:.1e}; feature loss rel {r10:.1e}"))
}

// ---------------------------------------------------------------- 4

fn dic_behaviour() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut tables = 0;
    while tables < 1000 {
        let nb = rng.random_range(1..=20);
        let t_max = rng.random_range(1..=200);
        let min_bin = rng.random_range(1..=nb);
        let means: Vec<f64> = (0..rng.random_range(2..40)).map(|_| rng.random_range(0.0..50.0)).collect();
        let Ok(table) = build_bins(&means, nb, t_max, min_bin) else { continue };
        tables += 1;
        let rounding = StepRounding { multiple: [1, 5, 10][tables % 3], ..Default::default() };
        let mut values: Vec<f64> = (0..50).map(|_| rng.random_range(-10.0..70.0)).collect();
        values.extend_from_slice(table.edges());
        values.sort_by(f64::total_cmp);
        let floor = dynamic_step(min_bin, &table, &rounding);
        let mut prev = (0, 0);
        for v in values {
            let b = table.assign_bin(v);
            let step = dynamic_step(b, &table, &rounding);
            ensure(b >= prev.0 && step >= prev.1, || format!("non-monotone at {v}: ({b}, {step}) after {prev:?}"))?;
            ensure(step >= floor, || format!("step {step} below floor {floor}"))?;
            ensure(step <= t_max, || format!("step {step} above T_max {t_max}"))?;
            prev = (b, step);
        }
    }
    let means: Vec<f64> = (0..=10).map(|i| i as f64).collect();
    let table = build_bins(&means, 10, 80, 2).map_err(e)?;
    let r = StepRounding::default();
    let floor = dynamic_step(table.assign_bin(-100.0), &table, &r);
    let ceiling = dynamic_step(table.assign_bin(1e9), &table, &r);
    ensure(floor == 20, || format!("floor with default constants is {floor}, expected 20"))?;
    ensure(ceiling == 80, || format!("ceiling is {ceiling}, expected 80"))?;
    Ok(format!("{tables} random tables monotone; floor {floor}, ceiling {ceiling}"))
}

// ---------------------------------------------------------------- 5-8

/// The shared synthetic run.
struct EndToEnd {
    cfg: RunConfig,
    run: RunDir,
    _dir: tempfile::TempDir,
    report: dynad_core::CategoryReport,
    by_defect: BTreeMap<String, dynad_core::CategoryReport>,
    train_mean: f64,
    test_mean: f64,
    train_seconds: f64,
}

fn build_e2e() -> std::result::Result<EndToEnd, String> {
    let cfg = RunConfig::toy();
    cfg.validate().map_err(e)?;
    let dir = tempfile::tempdir().map_err(e)?;
    let run = RunDir::new(dir.path());
    run.snapshot(&cfg).map_err(e)?;
    let cat = cfg.data.synthetic.category.clone();
    let splits = pipeline::load_splits(&cfg, &cat).map_err(e)?;
    let summary = pipeline::train_stage(&cfg, &run, &splits).map_err(e)?;
    let dic = pipeline::build_index_stage(&cfg, &run, &splits).map_err(e)?;
    let p = pipeline::Pipeline::load(&cfg, &run, &cat).map_err(e)?;
    let ev = pipeline::evaluate_split(&cfg, &p, &splits, cfg.dic.mode(), &cfg.sampler).map_err(e)?;

    let train_means = training_mean_distances(&dic.index).map_err(e)?;
    let test: Vec<_> = splits.test.iter().map(|s| s.image.clone()).collect();
    let choices = dic.choose_for_images(&p.phi, &test).map_err(e)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test_means: Vec<f64> = choices.iter().map(|c| c.mean_distance).collect();
    Ok(EndToEnd {
        train_mean: mean(&train_means),
        test_mean: mean(&test_means),
        cfg,
        run,
        _dir: dir,
        report: ev.report,
        by_defect: ev.by_defect,
        train_seconds: summary.seconds,
    })
}

fn end_to_end(ctx: &EndToEnd) -> Outcome {
    let r = &ctx.report;
    let detail = format!(
        "I-AUROC {:.3} P-AUROC {:.3} PRO {:.3} (denoiser training {:.0}s)",
        r.i_auroc, r.p_auroc, r.pro, ctx.train_seconds
    );
    ensure(r.i_auroc >= 0.90 && r.p_auroc >= 0.85 && r.pro >= 0.80, || detail.clone())?;
    let per: Vec<String> = ctx.by_defect.iter().map(|(k, v)| format!("{k} PRO {:.3}", v.pro)).collect();
    Ok(format!("{detail}; {}", per.join(", ")))
}

fn ablation_directions(ctx: &EndToEnd) -> Outcome {
    let large = "missing_component";
    let sd = pipeline::ablate(&ctx.cfg, &ctx.run, AblationMode::StaticVsDic, &[25.0]).map_err(e)?;
    let pro_of = |t: &dynad_core::AblationTable, label: &str, subset: Option<&str>| -> std::result::Result<f64, String> {
        let row = t.row(label).ok_or_else(|| format!("no ablation row {label}"))?;
        match subset {
            Some(d) => row.pro_by_defect.get(d).copied().ok_or_else(|| format!("no {d} subset in {label}")),
            None => Ok(row.pro),
        }
    };
    let dic_large = pro_of(&sd, "DIC", Some(large))?;
    let static_large = pro_of(&sd, "25%(20)", Some(large))?;

    let om = pipeline::ablate(&ctx.cfg, &ctx.run, AblationMode::Omega, &[0.0, 1.0]).map_err(e)?;
    let ds_on = pro_of(&om, "omega=0", None)?;
    let ds_off = pro_of(&om, "omega=1", None)?;

    let dd = pipeline::ablate(&ctx.cfg, &ctx.run, AblationMode::DsDa, &[]).map_err(e)?;
    let da_on = pro_of(&dd, "DS=on DA=on", None)?;
    let da_off = pro_of(&dd, "DS=on DA=off", None)?;

    let detail = format!(
        "(a) large-subset PRO DIC {dic_large:.3} vs static-20 {static_large:.3}; \
         (b) PRO omega=0 {ds_on:.3} vs omega=1 {ds_off:.3}; \
         (c) PRO adapted {da_on:.3} vs unadapted {da_off:.3}"
    );
    let mut failed = Vec::new();
    if dic_large < static_large {
        failed.push("a");
    }
    if ds_on - ds_off <= 0.0 {
        failed.push("b");
    }
    if da_on < da_off {
        failed.push("c");
    }
    if failed.is_empty() {
        Ok(detail)
    } else {
        Err(format!("failed {}: {detail}", failed.join(",")))
    }
}

fn histogram_shift(ctx: &EndToEnd) -> Outcome {
    let detail = format!("test mean distance {:.4} vs train {:.4}", ctx.test_mean, ctx.train_mean);
    ensure(ctx.test_mean > ctx.train_mean, || detail.clone())?;
    Ok(detail)
}

fn timing(ctx: &EndToEnd) -> Outcome {
    let a = pipeline::bench(&ctx.cfg, &ctx.run).map_err(e)?;
    let text = std::fs::read_to_string(ctx.run.root().join("bench.txt")).map_err(e)?;
    let b = pipeline::bench(&ctx.cfg, &ctx.run).map_err(e)?;
    let (ra, rb) = (&a[0], &b[0]);
    ensure(ra.batch_size == 30, || format!("batch size {}", ra.batch_size))?;
    ensure(ra.seconds_per_image > 0.0 && (ra.fps * ra.seconds_per_image - 1.0).abs() < 1e-9, || "fps inconsistent".into())?;
    ensure(ra.t_hats == rb.t_hats && ra.t_hats.len() == 30, || "chosen steps differ between runs".into())?;
    ensure(text.contains("Inference Time") && text.contains("FPS"), || "bench.txt lacks the expected columns".into())?;
    Ok(format!("{:.4} s/image, {:.1} FPS at batch 30", ra.seconds_per_image, ra.fps))
}

fn main() {
    // `cargo test` passes harness flags; listing mode must not run anything
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    let mut report = |id: usize, name: &str, start: Instant, out: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(d) => println!("criterion {id} [{name}]: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failures += 1;
                println!("criterion {id} [{name}]: FAIL ({secs:.1}s) {d}");
            }
        }
    };
    let quick: [(usize, &str, fn() -> Outcome); 4] = [
        (1, "diffusion algebra", diffusion_algebra),
        (2, "oracle equivalence", oracle_equivalence),
        (3, "gradient checks", gradient_checks),
        (4, "conditioning behaviour", dic_behaviour),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        report(id, name, t, f());
    }

    let t = Instant::now();
    match build_e2e() {
        Ok(ctx) => {
            report(5, "end-to-end synthetic", t, end_to_end(&ctx));
            let t = Instant::now();
            report(6, "ablation directions", t, ablation_directions(&ctx));
            let t = Instant::now();
            report(7, "distance shift", t, histogram_shift(&ctx));
            let t = Instant::now();
            report(8, "timing harness", t, timing(&ctx));
        }
        Err(err) => {
            for (id, name) in [(5, "end-to-end synthetic"), (6, "ablation directions"), (7, "distance shift"), (8, "timing harness")] {
                report(id, name, t, Err(format!("pipeline failed: {err}")));
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
