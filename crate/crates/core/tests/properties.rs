//! Property tests against brute-force oracles.

use dbsam_core::config::ModelConfig;
use dbsam_core::data::{resize_bilinear, synth_dataset, tight_box, volume_slice_axial};
use dbsam_core::fusion::FusionGate;
use dbsam_core::loss::{bce_loss, combined_loss, dice_loss};
use dbsam_core::metrics::{dsc, nsd, surface, Mask};
use dbsam_core::nn::{Builder, ParamRole, ParamStore, Session};
use dbsam_core::prompt::{perturb_box, BoxPrompt};
use dbsam_core::vit::ChannelAttention;
use dbsam_core::{seeded_rng, Tape, Tensor};
use proptest::prelude::*;

fn mask_strategy(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max, 0.0..1.0f64).prop_flat_map(|(h, w, density)| {
        let cells = proptest::collection::vec(0.0..1.0f64, h * w);
        (cells.clone(), cells).prop_map(move |(a, b)| {
            let m = |v: Vec<f64>| Mask::new(h, w, v.into_iter().map(|x| x < density).collect()).unwrap();
            (m(a), m(b))
        })
    })
}

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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_match_brute_force((p, g) in mask_strategy(16), tol in prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0])) {
        prop_assert_eq!(dsc(&p, &g).unwrap(), brute_dsc(&p, &g));
        prop_assert_eq!(nsd(&p, &g, tol).unwrap(), brute_nsd(&p, &g, tol));
        let mut s = surface(&p);
        s.sort();
        prop_assert_eq!(s, brute_surface(&p));
    }

    #[test]
    fn metrics_are_symmetric((p, g) in mask_strategy(12), tol in 0.0..4.0f64) {
        prop_assert_eq!(dsc(&p, &g).unwrap(), dsc(&g, &p).unwrap());
        prop_assert_eq!(nsd(&p, &g, tol).unwrap(), nsd(&g, &p, tol).unwrap());
    }

    #[test]
    fn nsd_is_monotone_in_tolerance((p, g) in mask_strategy(12), a in 0.0..5.0f64, b in 0.0..5.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nsd(&p, &g, lo).unwrap() <= nsd(&p, &g, hi).unwrap());
    }

    #[test]
    fn metrics_are_fractions((p, g) in mask_strategy(10)) {
        let d = dsc(&p, &g).unwrap();
        let n = nsd(&p, &g, 1.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&n));
    }

    #[test]
    fn blend_is_convex(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = seeded_rng(seed);
        let a = Tensor::randn(&[n], 3.0, &mut rng);
        let b = Tensor::randn(&[n], 3.0, &mut rng);
        let m = Tensor::rand_uniform(&[n], 0.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let (va, vb, vm) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(m));
        let y = t.blend(va, vb, vm).unwrap();
        for ((&y, &x), &z) in t.value(y).data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(x.min(z) <= y && y <= x.max(z));
        }
    }

    #[test]
    fn gate_is_convex_and_in_open_interval(seed in any::<u64>()) {
        let c = ModelConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let gate = FusionGate::new(&mut Builder::new(&mut store, &mut rng, ParamRole::Trainable), &c).unwrap();
        let mut s = Session::eval(&store);
        let d = s.tape.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let f = s.tape.constant(Tensor::randn(&[2, 4, 8], 1.0, &mut rng));
        let m = gate.gate(&mut s, d, f).unwrap();
        prop_assert!(s.tape.value(m).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let y = gate.forward(&mut s, d, f).unwrap();
        let (y, d, f) = (s.tape.value(y), s.tape.value(d), s.tape.value(f));
        for i in 0..y.numel() {
            let (a, b) = (d.data()[i], f.data()[i]);
            prop_assert!(a.min(b) <= y.data()[i] && y.data()[i] <= a.max(b));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, d in 1usize..9) {
        let x = Tensor::randn(&[rows, d], 10.0, &mut seeded_rng(seed));
        let mut t = Tape::new();
        let v = t.constant(x);
        let y = t.softmax(v);
        for row in t.value(y).data().chunks(d) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perturbed_boxes_stay_valid(
        seed in any::<u64>(),
        (w, h) in (1usize..64, 1usize..64),
        shift in 0i64..25,
        corner in any::<(u8, u8, u8, u8)>(),
    ) {
        let (w64, h64) = (w as i64, h as i64);
        let x0 = corner.0 as i64 % w64;
        let y0 = corner.1 as i64 % h64;
        let x1 = x0 + 1 + corner.2 as i64 % (w64 - x0);
        let y1 = y0 + 1 + corner.3 as i64 % (h64 - y0);
        let b = BoxPrompt::new(x0, y0, x1, y1);
        b.validate(w, h).unwrap();
        let mut rng = seeded_rng(seed);
        for _ in 0..20 {
            let p = perturb_box(&b, shift, w, h, &mut rng);
            prop_assert!(p.validate(w, h).is_ok(), "{:?} from {:?}", p, b);
        }
        prop_assert_eq!(perturb_box(&b, 0, w, h, &mut rng), b);
    }

    #[test]
    fn channel_attention_preserves_shape(heads in 1usize..3, per_head in 1usize..3, grid in 1usize..4, batch in 1usize..3, r in 1usize..3) {
        let d = 4 * heads * per_head;
        let c = ModelConfig {
            embed_dim: d, num_heads: heads, out_channels: d,
            image_size_vit: 8 * grid, patch_size: 8, image_size_conv: 4 * grid,
            se_reduction: r, ..ModelConfig::tiny()
        };
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(0);
        let ca = ChannelAttention::new(&mut Builder::new(&mut store, &mut rng, ParamRole::Trainable), "ca", &c).unwrap();
        let mut s = Session::train(&store, &mut rng);
        let x = s.tape.constant(Tensor::zeros(&[batch, grid * grid, d]));
        let y = ca.forward(&mut s, x).unwrap();
        prop_assert_eq!(s.tape.shape(y), &[batch, grid * grid, d]);
    }

    #[test]
    fn combined_loss_dominates_each_term(seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let logits = Tensor::randn(&[1, 1, 4, 4], 3.0, &mut rng);
        let target = Tensor::rand_uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut rng).map(|v| (v < 0.5) as u8 as f64);
        let mut t = Tape::new();
        let x = t.constant(logits);
        let (c, d, b) = (combined_loss(&mut t, x, &target).unwrap(), dice_loss(&mut t, x, &target).unwrap(), bce_loss(&mut t, x, &target).unwrap());
        let (c, d, b) = (t.value(c).item(), t.value(d).item(), t.value(b).item());
        prop_assert!(d >= 0.0 && b >= 0.0 && c >= d && c >= b);
        prop_assert_eq!(c, b + d);
    }
}

/// Bilinear read of one channel-first plane, zero padded, align-corners-false.
fn oracle_resize(img: &Tensor, out: (usize, usize)) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut t = Tape::new();
    let x = t.constant(img.clone().reshaped(&[1, c, h, w]).unwrap());
    let pts = Tensor::from_fn(&[1, out.0 * out.1, 2], |i| {
        let (p, axis) = (i / 2, i % 2);
        if axis == 0 {
            ((p % out.1) as f64 + 0.5) / out.1 as f64
        } else {
            ((p / out.1) as f64 + 0.5) / out.0 as f64
        }
    });
    let p = t.constant(pts);
    let y = t.bilinear_sample(x, p).unwrap();
    let v = t.value(y);
    Tensor::from_fn(&[c, out.0, out.1], |i| v.data()[(i % (out.0 * out.1)) * c + i / (out.0 * out.1)])
}

#[test]
fn checkerboard_downscale_matches_sampling_oracle() {
    for (h, w) in [(8, 8), (16, 12), (6, 10)] {
        let img = Tensor::from_fn(&[2, h, w], |i| (((i % w) + (i / w) % h + i / (h * w)) % 2) as f64);
        let got = resize_bilinear(&img, (h / 2, w / 2)).unwrap();
        assert!(got.bit_eq(&oracle_resize(&img, (h / 2, w / 2))), "{h}x{w}");
    }
}

#[test]
fn resize_of_constant_and_identity() {
    let img = Tensor::full(&[3, 7, 5], 0.25);
    assert!(resize_bilinear(&img, (11, 3)).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let r = Tensor::randn(&[3, 5, 5], 1.0, &mut seeded_rng(0));
    assert!(resize_bilinear(&r, (5, 5)).unwrap().bit_eq(&r));
}

#[test]
fn generated_samples_satisfy_invariants() {
    let data = synth_dataset(200, 24, 11);
    assert_eq!(data.len(), 200);
    for s in &data {
        s.validate().unwrap();
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(Some(s.bbox), tight_box(&s.mask));
    }
    let again = synth_dataset(200, 24, 11);
    for (a, b) in data.iter().zip(&again) {
        assert!(a.image.bit_eq(&b.image));
        assert_eq!((&a.mask, a.bbox), (&b.mask, b.bbox));
    }
    assert!(synth_dataset(0, 24, 11).is_empty());
}

#[test]
fn axial_slicing_keeps_order() {
    let (dz, h, w) = (5, 6, 6);
    let vol = Tensor::from_fn(&[dz, h, w], |i| i as f64);
    let mask = Tensor::from_fn(&[dz, h, w], |i| ((i % (h * w)) < 8) as u8 as f64);
    let slices = volume_slice_axial(&vol, &mask, 1, 12, "v").unwrap();
    assert_eq!(slices.len(), 5);
    for (z, s) in slices.iter().enumerate() {
        assert_eq!(s.id, format!("v{z:04}"));
        assert_eq!(s.size(), (12, 12));
        s.validate().unwrap();
    }
    // intensities rise with depth
    assert!(slices.windows(2).all(|p| p[0].image.data()[0] < p[1].image.data()[0]));
}

#[test]
fn dice_limit_at_saturated_logits() {
    let target = Tensor::from_fn(&[1, 1, 6, 6], |i| (i % 3 == 0) as u8 as f64);
    let logits = target.map(|t| if t > 0.5 { 40.0 } else { -40.0 });
    let mut t = Tape::new();
    let x = t.constant(logits);
    let d = dice_loss(&mut t, x, &target).unwrap();
    assert!(t.value(d).item() < 1e-4);
}

#[test]
fn backward_leaves_constants_untouched() {
    let mut t = Tape::new();
    let sentinel = Tensor::full(&[3], 7.0);
    let c = t.constant(sentinel.clone());
    let x = t.variable(Tensor::ones(&[3]));
    let y = t.mul(c, x).unwrap();
    let l = t.sum(y);
    t.backward(l).unwrap();
    assert!(t.grad(c).is_none());
    assert!(t.value(c).bit_eq(&sentinel));
    assert_eq!(t.grad(x).unwrap(), &[7.0; 3]);
}
