//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Positional arguments select
//! criteria by number, e.g. `cargo test --test acceptance -- 2 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use dbsam::config_file;
use dbsam::report::{ablation_table, AblationRow};
use dbsam_core::config::Ablation;
use dbsam_core::data::synth_dataset;
use dbsam_core::fusion::{DeformableAttention, FusionGate};
use dbsam_core::gradcheck::{grad_check_suite, SUITE_TOLERANCE};
use dbsam_core::metrics::{dsc, nsd, Mask};
use dbsam_core::model::ModelInput;
use dbsam_core::nn::{Builder, Linear, Session};
use dbsam_core::prompt::{perturb_box, shift_for_resolution, BoxPrompt};
use dbsam_core::train::{evaluate, prepare, PreparedSample, StepLog, Trainer};
use dbsam_core::{seeded_rng, DbSamModel, ModelConfig, ParamRole, ParamStore, Tensor};
use rand::Rng as _;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("gradient suite", gradient_suite),
    ("deformable-attention oracle", deformable_oracle),
    ("identity at init", identity_at_init),
    ("fusion convexity", fusion_convexity),
    ("metric oracles", metric_oracles),
    ("freezing policy", freezing_policy),
    ("overfit fidelity", overfit_fidelity),
    ("perturbation contract", perturbation_contract),
    ("determinism and serialization", determinism_and_serialization),
    ("ablation harness", ablation_harness),
];

fn main() -> ExitCode {
    let picks: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !picks.is_empty() && !picks.contains(&n) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name}: {why} [{secs:.1} s]");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// 1

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let results = ok(grad_check_suite(None))?;
    let secs = t.elapsed().as_secs_f64();
    let bad: Vec<_> = results.iter().filter(|r| !(r.check.max_rel_err < SUITE_TOLERANCE)).map(|r| r.name).collect();
    ensure!(bad.is_empty(), "rel-err ≥ {SUITE_TOLERANCE:e} in {bad:?}");
    ensure!(results.iter().all(|r| r.passed), "suite verdict disagrees with its errors");
    ensure!(secs < 300.0, "took {secs:.0} s");
    let worst = results.iter().max_by(|a, b| a.check.max_rel_err.total_cmp(&b.check.max_rel_err)).unwrap();
    Ok(format!("{} blocks below {SUITE_TOLERANCE:e}, worst {} at {:.2e}", results.len(), worst.name, worst.check.max_rel_err))
}

// 2

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = seeded_rng(seed);
    for p in store.iter_mut() {
        let v = Tensor::randn(p.value.shape(), 0.5, &mut rng);
        p.value = v;
    }
}

fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.value(l.weight);
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let b = store.value(l.bias.expect("projection has a bias"));
    (0..dout)
        .map(|o| b.data()[o] + (0..din).map(|i| x[i] * w.data()[i * dout + o]).sum::<f64>())
        .collect()
}

/// Zero-padded, align-corners-false bilinear read of a channel-last `h×w` map.
fn bilinear(map: &[Vec<f64>], (h, w): (usize, usize), c: usize, x: f64, y: f64) -> f64 {
    let (px, py) = (x * w as f64 - 0.5, y * h as f64 - 0.5);
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                acc += wy * wx * map[yi as usize * w + xi as usize][c];
            }
        }
    }
    acc
}

/// out_q = W_o Σ_h Σ_k softmax_k(A_hk · q) · V_h(p_q + Δ_hk(q))
fn deformable_brute_force(store: &ParamStore, m: &DeformableAttention, query: &Tensor, value: &Tensor, reference: &Tensor, grid: (usize, usize)) -> Vec<f64> {
    let (b, n, d) = (query.shape()[0], query.shape()[1], query.shape()[2]);
    let (heads, k) = (m.heads, m.points);
    let dh = d / heads;
    let (gh, gw) = grid;
    let hw = gh * gw;
    let mut out = Vec::new();
    for bi in 0..b {
        let v: Vec<Vec<f64>> = (0..hw)
            .map(|p| affine(store, &m.value_proj, &value.data()[(bi * hw + p) * d..(bi * hw + p + 1) * d]))
            .collect();
        for q in 0..n {
            let qv = &query.data()[(bi * n + q) * d..(bi * n + q + 1) * d];
            let off = affine(store, &m.sampling_offsets, qv);
            let logits = affine(store, &m.attention_weights, qv);
            let (rx, ry) = (reference.data()[2 * q], reference.data()[2 * q + 1]);
            let mut mixed = vec![0.0; d];
            for h in 0..heads {
                let l = &logits[h * k..(h + 1) * k];
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = l.iter().map(|x| (x - mx).exp()).sum();
                for p in 0..k {
                    let a = (l[p] - mx).exp() / z;
                    let j = (h * k + p) * 2;
                    let x = rx + off[j] * m.offset_scale / gw as f64;
                    let y = ry + off[j + 1] * m.offset_scale / gh as f64;
                    for c in 0..dh {
                        mixed[h * dh + c] += a * bilinear(&v, grid, h * dh + c, x, y);
                    }
                }
            }
            out.extend(affine(store, &m.output_proj, &mixed));
        }
    }
    out
}

fn deformable_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = seeded_rng(7000 + seed);
        let heads = rng.random_range(1..=4);
        let dh = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let n = rng.random_range(1..=16);
        let grid = (rng.random_range(1..=4), rng.random_range(1..=4));
        let b = rng.random_range(1..=2);
        let d = heads * dh;
        let config = ModelConfig {
            embed_dim: d,
            deform_heads: heads,
            num_points: k,
            offset_scale: rng.random_range(0.5..2.0),
            ..ModelConfig::tiny()
        };
        let mut store = ParamStore::new();
        let m = ok(DeformableAttention::new(&mut Builder::new(&mut store, &mut rng, ParamRole::Trainable), "da", &config))?;
        randomize(&mut store, 9000 + seed);
        let query = Tensor::randn(&[b, n, d], 1.0, &mut rng);
        let value = Tensor::randn(&[b, grid.0 * grid.1, d], 1.0, &mut rng);
        let reference = Tensor::rand_uniform(&[n, 2], 0.0, 1.0, &mut rng);

        let mut s = Session::eval(&store);
        let q = s.tape.constant(query.clone());
        let v = s.tape.constant(value.clone());
        let y = ok(m.forward(&mut s, q, &reference, v, grid))?;
        let want = deformable_brute_force(&store, &m, &query, &value, &reference, grid);
        let got = s.tape.value(y).data();
        ensure!(got.len() == want.len(), "instance {seed}: {} outputs, oracle has {}", got.len(), want.len());
        let err = got.iter().zip(&want).map(|(g, w)| (g - w).abs()).fold(0.0, f64::max);
        ensure!(err <= 1e-10, "instance {seed} (heads {heads}, K {k}, N {n}): max |Δ| {err:.2e}");
        worst = worst.max(err);
    }
    Ok(format!("100 instances, max |Δ| {worst:.1e} ≤ 1e-10"))
}

// 3

fn random_images(config: &ModelConfig, b: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = seeded_rng(seed);
    let (sv, sc) = (config.image_size_vit, config.image_size_conv);
    (Tensor::rand_uniform(&[b, 3, sv, sv], 0.0, 1.0, &mut rng), Tensor::rand_uniform(&[b, 3, sc, sc], 0.0, 1.0, &mut rng))
}

fn zero_param(store: &mut ParamStore, name: &str) -> Result<(), String> {
    let id = store.id(name).ok_or_else(|| format!("no parameter {name}"))?;
    let z = Tensor::zeros(store.value(id).shape());
    ok(store.set_value(id, z))
}

fn identity_at_init() -> Outcome {
    let config = ModelConfig::default();
    let full = ok(DbSamModel::new(config.clone()))?;
    let no_fusion = ok(DbSamModel::new(ModelConfig { use_fusion: false, ..config.clone() }))?;
    // zeroed gate output layers pin M = σ(0) = 1/2
    let mut half = full.clone();
    for n in ["fusion.deep.fc2.weight", "fusion.deep.fc2.bias", "fusion.shallow.fc2.weight", "fusion.shallow.fc2.bias"] {
        zero_param(&mut half.store, n)?;
    }
    for i in 0..10u64 {
        let (vi, ci) = random_images(&config, 1 + (i as usize % 2), 300 + i);
        let encode = |m: &DbSamModel| {
            let mut s = Session::eval(&m.store);
            let (v, c) = (s.tape.constant(vi.clone()), s.tape.constant(ci.clone()));
            let e = m.encode(&mut s, v, c).map_err(|e| e.to_string())?;
            let frozen = m.encode_frozen(&mut s, v).map_err(|e| e.to_string())?;
            let shallow = e.shallow.map(|x| s.tape.value(x).clone());
            Ok::<_, String>((s.tape.value(e.deep).clone(), shallow, s.tape.value(e.embedding).clone(), s.tape.value(frozen).clone()))
        };
        let (deep, _, _, frozen) = encode(&full)?;
        ensure!(deep.bit_eq(&frozen), "input {i}: deep stream differs from the frozen ViT by {:.2e}", deep.max_abs_diff(&frozen));
        let (_, _, emb, frozen_nf) = encode(&no_fusion)?;
        ensure!(frozen_nf.bit_eq(&frozen), "input {i}: frozen encoders differ between models");
        ensure!(emb.bit_eq(&frozen), "input {i}: no-fusion encoder output differs from the frozen ViT by {:.2e}", emb.max_abs_diff(&frozen));
        let (hd, hs, hemb, _) = encode(&half)?;
        let hs = hs.ok_or("full model has no shallow stream")?;
        let mean = Tensor::from_fn(hd.shape(), |j| hd.data()[j] * 0.5 + hs.data()[j] * 0.5);
        ensure!(hd.bit_eq(&frozen), "input {i}: deep stream changed after zeroing the gate");
        ensure!(hemb.bit_eq(&mean), "input {i}: gated output is not (F_d + F_s)/2");
    }
    Ok("10 inputs: deep stream and no-fusion output bit-identical to the frozen ViT; zeroed gate gives (F_d + F_s)/2 exactly".into())
}

// 4

fn fusion_convexity() -> Outcome {
    let c = ModelConfig::default();
    let d = c.embed_dim;
    let mut rng = seeded_rng(404);
    let mut store = ParamStore::new();
    let gate = ok(FusionGate::new(&mut Builder::new(&mut store, &mut rng, ParamRole::Trainable), &c))?;
    let mut checked = 0usize;
    for i in 0..1000u64 {
        if i % 50 == 0 {
            randomize(&mut store, 500 + i);
        }
        let n = rng.random_range(1..=16);
        let b = rng.random_range(1..=2);
        let scale = [0.1, 1.0, 10.0][i as usize % 3];
        let fd = Tensor::randn(&[b, n, d], scale, &mut rng);
        let fs = Tensor::randn(&[b, n, d], scale, &mut rng);
        let mut s = Session::eval(&store);
        let (vd, vs) = (s.tape.constant(fd.clone()), s.tape.constant(fs.clone()));
        let y = ok(gate.forward(&mut s, vd, vs))?;
        for (j, &v) in s.tape.value(y).data().iter().enumerate() {
            let (a, e) = (fd.data()[j], fs.data()[j]);
            ensure!(a.min(e) <= v && v <= a.max(e), "tensor {i}, element {j}: {v} outside [{}, {}]", a.min(e), a.max(e));
            checked += 1;
        }
    }
    // forced logits: a huge output bias drives σ to exactly 1 or 0
    let fd = Tensor::randn(&[2, c.num_tokens(), d], 1.0, &mut rng);
    let fs = Tensor::randn(&[2, c.num_tokens(), d], 1.0, &mut rng);
    let bias = store.id("fusion.deep.fc2.bias").ok_or("no gate bias")?;
    for (logit, want, which) in [(1e3, &fd, "deep"), (-1e3, &fs, "shallow")] {
        let mut forced = store.clone();
        ok(forced.set_value(bias, Tensor::full(&[d], logit)))?;
        let mut s = Session::eval(&forced);
        let (vd, vs) = (s.tape.constant(fd.clone()), s.tape.constant(fs.clone()));
        let y = ok(gate.forward(&mut s, vd, vs))?;
        ensure!(s.tape.value(y).bit_eq(want), "logit {logit}: output is not the {which} branch");
    }
    Ok(format!("1000 tensors ({checked} elements) inside the hull; σ → 1 and σ → 0 reproduce each branch bitwise"))
}

// 5

fn brute_dsc(p: &Mask, g: &Mask) -> f64 {
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for y in 0..p.height {
        for x in 0..p.width {
            inter += (p.get(y, x) && g.get(y, x)) as usize;
            sp += p.get(y, x) as usize;
            sg += g.get(y, x) as usize;
        }
    }
    if sp + sg == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sp + sg) as f64
    }
}

/// Foreground pixels with a 4-neighbour outside the foreground (or the image).
fn brute_surface(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height as i64 {
        for x in 0..m.width as i64 {
            if !m.get(y as usize, x as usize) {
                continue;
            }
            let bg = |yy: i64, xx: i64| yy < 0 || xx < 0 || yy >= m.height as i64 || xx >= m.width as i64 || !m.get(yy as usize, xx as usize);
            if bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn brute_nsd(p: &Mask, g: &Mask, tol: f64) -> f64 {
    let (sp, sg) = (brute_surface(p), brute_surface(g));
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let close = |a: &[(usize, usize)], b: &[(usize, usize)]| {
        a.iter()
            .filter(|&&(ay, ax)| {
                b.iter().any(|&(by, bx)| {
                    let (dy, dx) = (ay as f64 - by as f64, ax as f64 - bx as f64);
                    (dy * dy + dx * dx).sqrt() <= tol
                })
            })
            .count()
    };
    (close(&sp, &sg) + close(&sg, &sp)) as f64 / (sp.len() + sg.len()) as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = seeded_rng(55);
    for i in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let density: f64 = rng.random_range(0.0..1.0);
        let mut draw = || Mask::from_fn(h, w, |_, _| rng.random_range(0.0..1.0) < density);
        let (p, g) = (draw(), draw());
        let tol = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0][i % 7];
        let (a, b) = (ok(dsc(&p, &g))?, brute_dsc(&p, &g));
        ensure!(a == b, "pair {i} ({h}x{w}): DSC {a} vs oracle {b}");
        let (a, b) = (ok(nsd(&p, &g, tol))?, brute_nsd(&p, &g, tol));
        ensure!(a == b, "pair {i} ({h}x{w}, τ {tol}): NSD {a} vs oracle {b}");
    }
    let block = |y0: usize, x0: usize| Mask::from_fn(8, 8, move |y, x| (y0..y0 + 3).contains(&y) && (x0..x0 + 3).contains(&x));
    let m = block(1, 1);
    ensure!(ok(dsc(&m, &m))? == 1.0 && ok(nsd(&m, &m, 1.0))? == 1.0, "identical masks are not 1.0/1.0");
    ensure!(ok(dsc(&m, &block(5, 5)))? == 0.0, "disjoint masks have nonzero DSC");
    let a = Mask::from_fn(1, 3, |_, x| x == 0);
    let b = Mask::from_fn(1, 3, |_, x| x == 2);
    let below = ok(nsd(&a, &b, 2.0 - 1e-9))?;
    let at = ok(nsd(&a, &b, 2.0))?;
    ensure!(below == 0.0 && at == 1.0, "two-pixel flip: NSD {below} just below τ = 2, {at} at τ = 2");
    Ok("1000 random pairs up to 16x16 match brute force exactly; identical, disjoint and τ = 2 flip cases hold".into())
}

// 6

fn freezing_policy() -> Outcome {
    let config = ModelConfig {
        batch_size: 2,
        epochs: 100,
        ..ModelConfig::default()
    };
    let model = ok(DbSamModel::new(config))?;
    let init = model.store.clone();
    let data = ok(prepare(&synth_dataset(4, 64, 66), &model))?;
    let mut t = Trainer::new(model);
    let log = ok(t.fit(&data, |_| {}))?;
    ensure!(log.len() == 200, "{} steps instead of 200", log.len());
    let (mut frozen, mut trainable) = (0, 0);
    for ((_, a), (_, b)) in init.iter().zip(t.model.store.iter()) {
        match a.role {
            ParamRole::Frozen => {
                ensure!(DbSamModel::is_frozen_name(&a.name), "{} is frozen but outside the frozen set", a.name);
                ensure!(a.value.bit_eq(&b.value), "frozen {} changed", a.name);
                frozen += 1;
            }
            ParamRole::Trainable => {
                ensure!(!DbSamModel::is_frozen_name(&a.name), "{} is trainable but inside the frozen set", a.name);
                ensure!(!a.value.bit_eq(&b.value), "trainable {} unchanged", a.name);
                trainable += 1;
            }
            ParamRole::Buffer => {}
        }
    }
    Ok(format!("200 steps: {frozen} frozen tensors bit-identical, {trainable} trainable tensors all changed"))
}

// 7

fn overfit_fidelity() -> Outcome {
    let config = ModelConfig {
        epochs: 500,
        ..ModelConfig::default()
    };
    let model = ok(DbSamModel::new(config))?;
    let data = ok(prepare(&synth_dataset(8, 64, 42), &model))?;
    let t0 = Instant::now();
    let mut t = Trainer::new(model);
    let log = ok(t.fit(&data, |_| {}))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure!(log.len() == 500, "{} steps instead of 500", log.len());
    ensure!(log.iter().all(|l| l.loss.is_finite()), "non-finite loss");
    let r = ok(evaluate(&t.model, &data, 1.0))?;
    let (l10, l500) = (log[9].loss, log[499].loss);
    let detail = format!("DSC {:.4}, NSD {:.4}, loss {l10:.4} at step 10 → {l500:.4} at step 500, {secs:.0} s of training", r.mean_dsc, r.mean_nsd);
    ensure!(r.mean_dsc >= 0.95, "{detail}: DSC below 0.95");
    ensure!(r.mean_nsd >= 0.90, "{detail}: NSD below 0.90");
    ensure!(l500 < l10, "{detail}: loss did not fall");
    ensure!(secs < 1800.0, "{detail}: over 30 minutes");
    Ok(detail)
}

// 8

fn perturbation_contract() -> Outcome {
    let mut rng = seeded_rng(88);
    let random_box = |rng: &mut dbsam_core::Rng, size: i64| {
        let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
        BoxPrompt::new(x0, y0, rng.random_range(x0 + 1..=size), rng.random_range(y0 + 1..=size))
    };
    for _ in 0..1000 {
        let size = rng.random_range(1..=300);
        let b = random_box(&mut rng, size);
        let shift = shift_for_resolution(0.0, size as usize);
        let p = perturb_box(&b, shift, size as usize, size as usize, &mut rng);
        ensure!(p == b, "max_shift 0 moved {b:?} to {p:?}");
    }
    for i in 0..100_000 {
        let size = rng.random_range(1..=300);
        let b = random_box(&mut rng, size);
        let shift = shift_for_resolution(20.0, size as usize).max(rng.random_range(0..=25));
        let p = perturb_box(&b, shift, size as usize, size as usize, &mut rng);
        ensure!(p.validate(size as usize, size as usize).is_ok(), "draw {i}: {b:?} → invalid {p:?} in {size}x{size}");
    }
    // a central box far from the border is never clamped, so each coordinate shift is a raw draw
    let (s, size) = (20i64, 1024usize);
    let b = BoxPrompt::new(400, 420, 600, 640);
    let bins = (2 * s + 1) as usize;
    let mut counts = vec![0u64; bins];
    let draws = 100_000;
    for _ in 0..draws {
        let p = perturb_box(&b, s, size, size, &mut rng);
        for d in [p.x0 - b.x0, p.y0 - b.y0, p.x1 - b.x1, p.y1 - b.y1] {
            ensure!(d.abs() <= s, "shift {d} outside ±{s}");
            counts[(d + s) as usize] += 1;
        }
    }
    let expected = (4 * draws) as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let critical = ChiSquared::new((bins - 1) as f64).map_err(|e| e.to_string())?.inverse_cdf(0.99);
    ensure!(chi2 < critical, "χ² = {chi2:.1} ≥ {critical:.1} (1% level, {} dof)", bins - 1);
    Ok(format!("zero shift exact on 1000 boxes; 100000 jittered boxes valid; χ² = {chi2:.1} < {critical:.1} ({} dof, 1%)", bins - 1))
}

// 9

fn short_run(seed: u64) -> Result<(DbSamModel, Vec<StepLog>, Vec<PreparedSample>), String> {
    let config = ModelConfig {
        batch_size: 2,
        epochs: 3,
        seed,
        ..ModelConfig::default()
    };
    let model = ok(DbSamModel::new(config))?;
    let data = ok(prepare(&synth_dataset(5, 64, 99), &model))?;
    let mut t = Trainer::new(model);
    let log = ok(t.fit(&data, |_| {}))?;
    Ok((t.model, log, data))
}

fn determinism_and_serialization() -> Outcome {
    let (model, a, data) = short_run(3)?;
    let (_, b, _) = short_run(3)?;
    let (_, c, _) = short_run(4)?;
    ensure!(a == b, "same seed gave different loss logs");
    ensure!(a != c, "different seeds gave identical loss logs");

    let dir = ok(tempfile::tempdir())?;
    let (p1, p2) = (dir.path().join("a.dbsm"), dir.path().join("b.dbsm"));
    ok(dbsam::checkpoint::save(&p1, &model))?;
    let loaded = ok(dbsam::checkpoint::load(&p1, &model.config))?;
    ok(dbsam::checkpoint::save(&p2, &loaded))?;
    let (f1, f2) = (ok(std::fs::read(&p1))?, ok(std::fs::read(&p2))?);
    ensure!(f1 == f2, "save → load → save changed the bytes");
    for ((_, x), (_, y)) in model.store.iter().zip(loaded.store.iter()) {
        ensure!(x.name == y.name && x.role == y.role && x.value.bit_eq(&y.value), "{} did not round-trip", x.name);
    }
    let refs: Vec<&PreparedSample> = data.iter().collect();
    let input = ok(ModelInput::new(
        &refs.iter().map(|s| s.vit.clone()).collect::<Vec<_>>(),
        &refs.iter().map(|s| s.conv.clone()).collect::<Vec<_>>(),
        refs.iter().map(|s| s.bbox).collect(),
        refs[0].frame,
    ))?;
    let (y0, y1) = (ok(model.predict(&input))?, ok(loaded.predict(&input))?);
    ensure!(y0.iter().zip(&y1).all(|(u, v)| u.bit_eq(v)), "loaded model's forward differs");
    let bad = dir.path().join("bad.dbsm");
    let mut bytes = f1.clone();
    bytes[..4].copy_from_slice(b"NOPE");
    ok(std::fs::write(&bad, bytes))?;
    let e = dbsam::checkpoint::load(&bad, &model.config).err().ok_or("wrong magic accepted")?;
    ensure!(matches!(e.root(), dbsam::Error::Format(_)), "wrong magic gave {e}");
    Ok(format!("{}-step logs identical per seed; {} byte checkpoint round-trips bitwise with forward outputs", a.len(), f1.len()))
}

// 10

fn ablation_harness() -> Outcome {
    let base = ModelConfig {
        batch_size: 4,
        epochs: 75,
        ..ModelConfig::default()
    };
    let samples = synth_dataset(8, 64, 42);
    let mut rows = Vec::new();
    for a in Ablation::ALL {
        let want = a.apply(&base);
        let flags = format!(
            "use_channel_attention = {}\nuse_bilateral = {}\nuse_fusion = {}\n",
            want.use_channel_attention, want.use_bilateral, want.use_fusion
        );
        let config = ok(config_file::parse_onto(base.clone(), &flags))?;
        ensure!(config == want, "{}: config flags do not select the row", a.name());
        let model = ok(DbSamModel::new(config))?;
        let data = ok(prepare(&samples, &model))?;
        let mut t = Trainer::new(model);
        let log = ok(t.fit(&data, |_| {}))?;
        let r = ok(evaluate(&t.model, &data, base.tolerance))?;
        let row = AblationRow {
            config: a.name().into(),
            dsc: r.mean_dsc,
            nsd: r.mean_nsd,
            final_loss: log.last().map_or(f64::NAN, |l| l.loss),
        };
        ensure!(row.dsc.is_finite() && row.nsd.is_finite() && row.final_loss.is_finite(), "{}: non-finite result", a.name());
        rows.push(row);
    }
    let table = ablation_table(&rows);
    for line in table.lines() {
        println!("        {line}");
    }
    Ok(format!("four rows trained {} steps each and scored (table above)", base.epochs * 2))
}
