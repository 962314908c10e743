//! Loss against a naive per-box loop and analytic gradients against central
//! finite differences.

use std::f64::consts::PI;

use bev_erpn_core::class::ObjectClass;
use bev_erpn_core::erpn::{ErpnHead, RawPrediction, BOX_FEATURES, T_CLASS, T_O};
use bev_erpn_core::geometry::{rotated_iou, OrientedBox};
use bev_erpn_core::loss::{assign, loss_gradient, loss_gradient_terms, total_loss, GroundTruthBox, HyperParams, Term};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_pred(rng: &mut ChaCha8Rng) -> RawPrediction {
    let mut p = RawPrediction::zeros(16, 32, 5);
    for v in p.data.chunks_mut(BOX_FEATURES) {
        v[0] = rng.random_range(-1.5..1.5);
        v[1] = rng.random_range(-1.5..1.5);
        v[2] = rng.random_range(-0.5..0.5);
        v[3] = rng.random_range(-0.5..0.5);
        v[4] = rng.random_range(-1.0..1.0);
        v[5] = rng.random_range(-1.0..1.0);
        v[6] = rng.random_range(-2.0..2.0);
        for z in &mut v[7..] {
            *z = rng.random_range(-2.0..2.0);
        }
    }
    p
}

fn random_gt(rng: &mut ChaCha8Rng) -> GroundTruthBox {
    let class = ObjectClass::from_index(rng.random_range(0..8)).unwrap();
    GroundTruthBox::new(
        OrientedBox::new(
            rng.random_range(0.5..39.5),
            rng.random_range(-39.5..39.5),
            rng.random_range(0.5..2.5),
            rng.random_range(0.6..5.0),
            rng.random_range(-PI..PI),
        ),
        class,
    )
}

/// A ground truth placed near some cell center so that several anchors overlap it.
fn overlapping_gt(rng: &mut ChaCha8Rng) -> GroundTruthBox {
    let (r, c) = (rng.random_range(0..16), rng.random_range(0..32));
    let mut g = random_gt(rng);
    g.bbox.cx = (r as f64 + rng.random_range(0.2..0.8)) * 2.5;
    g.bbox.cy = -40.0 + (c as f64 + rng.random_range(0.2..0.8)) * 2.5;
    g
}

/// Independent decode: cell units to meters, sensor axes.
fn decode(v: &[f64], row: usize, col: usize, anchor: usize, head: &ErpnHead) -> OrientedBox {
    let a = head.anchors[anchor];
    OrientedBox::new(
        (row as f64 + sig(v[1])) * 2.5,
        -40.0 + (col as f64 + sig(v[0])) * 2.5,
        a.p_w * v[2].exp() * 2.5,
        a.p_l * v[3].exp() * 2.5,
        v[4].atan2(v[5]),
    )
}

fn naive_loss(head: &ErpnHead, p: &RawPrediction, gts: &[GroundTruthBox], hp: &HyperParams) -> [f64; 7] {
    // responsibility: containing cell, best decoded overlap, lowest anchor on ties
    let resp: Vec<(usize, usize, usize)> = gts
        .iter()
        .map(|g| {
            let row = (g.bbox.cx / 2.5).floor() as usize;
            let col = ((g.bbox.cy + 40.0) / 2.5).floor() as usize;
            let mut best = 0;
            let mut best_iou = -1.0;
            for a in 0..5 {
                let iou = rotated_iou(&decode(p.box_slice(row, col, a), row, col, a, head), &g.bbox);
                if iou > best_iou {
                    best = a;
                    best_iou = iou;
                }
            }
            (row, col, best)
        })
        .collect();
    let (mut coord, mut size, mut euler, mut obj, mut noobj, mut class) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 0..16 {
        for c in 0..32 {
            for a in 0..5 {
                let v = p.box_slice(r, c, a);
                let mut responsible = false;
                for (g, &(gr, gc, ga)) in gts.iter().zip(&resp) {
                    if (gr, gc, ga) != (r, c, a) {
                        continue;
                    }
                    responsible = true;
                    let b = g.bbox;
                    let prior = head.anchors[a];
                    let ox = (b.cy + 40.0) / 2.5 - c as f64;
                    let oy = b.cx / 2.5 - r as f64;
                    coord += (sig(v[0]) - ox).powi(2) + (sig(v[1]) - oy).powi(2);
                    size +=
                        (v[2] - (b.w / 2.5 / prior.p_w).ln()).powi(2) + (v[3] - (b.l / 2.5 / prior.p_l).ln()).powi(2);
                    euler += (v[4] - b.phi.sin()).powi(2) + (v[5] - b.phi.cos()).powi(2);
                    obj += (sig(v[6]) - rotated_iou(&decode(v, r, c, a, head), &b)).powi(2);
                    let m = v[7..].iter().copied().fold(f64::MIN, f64::max);
                    let z: f64 = v[7..].iter().map(|x| (x - m).exp()).sum();
                    for k in 0..8 {
                        let pk = (v[7 + k] - m).exp() / z;
                        let y = if k == g.class.index() { 1.0 } else { 0.0 };
                        class += (pk - y).powi(2);
                    }
                }
                if !responsible {
                    noobj += sig(v[6]).powi(2);
                }
            }
        }
    }
    let lc = hp.lambda_coord;
    let parts = [lc * coord, lc * size, lc * euler, obj, hp.lambda_noobj * noobj, class];
    [
        parts[0],
        parts[1],
        parts[2],
        parts[3],
        parts[4],
        parts[5],
        parts.iter().sum(),
    ]
}

#[test]
fn loss_matches_naive_loop() {
    let head = ErpnHead::default();
    let hp = HyperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..40 {
        let p = random_pred(&mut rng);
        let n = rng.random_range(0..5);
        let gts: Vec<GroundTruthBox> = (0..n)
            .map(|_| {
                if rng.random_bool(0.5) {
                    overlapping_gt(&mut rng)
                } else {
                    random_gt(&mut rng)
                }
            })
            .collect();
        let l = total_loss(&head, &p, &gts, &hp).unwrap();
        let want = naive_loss(&head, &p, &gts, &hp);
        let got = [l.coord, l.size, l.euler, l.obj, l.noobj, l.class, l.total];
        for (g, w) in got.iter().zip(want) {
            assert!(
                (g - w).abs() <= 1e-9 * w.abs().max(1.0),
                "case {case}: {got:?} vs {want:?}"
            );
        }
        let weighted = l.coord + l.size + l.euler + l.obj + l.noobj + l.class;
        assert!((l.total - weighted).abs() < 1e-9);
    }
}

#[test]
fn assignment_matches_exhaustive_scan_at_neutral_regressors() {
    let head = ErpnHead::default();
    let p = RawPrediction::neutral(16, 32, &head.anchors);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let g = overlapping_gt(&mut rng);
        let t = assign(&head, &p, &[g]).unwrap()[0];
        let ious: Vec<f64> = (0..5)
            .map(|a| rotated_iou(&decode(p.box_slice(t.row, t.col, a), t.row, t.col, a, &head), &g.bbox))
            .collect();
        let best = ious.iter().copied().fold(f64::MIN, f64::max);
        let first = ious.iter().position(|&v| v == best).unwrap();
        assert_eq!(t.anchor, first, "{ious:?}");
    }
}

#[test]
fn permutation_invariant() {
    let head = ErpnHead::default();
    let hp = HyperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = random_pred(&mut rng);
        let mut gts: Vec<GroundTruthBox> = (0..4).map(|_| overlapping_gt(&mut rng)).collect();
        // two ground truths sharing one cell
        let mut twin = gts[0];
        twin.bbox.cx += 0.01;
        gts.push(twin);
        let a = total_loss(&head, &p, &gts, &hp).unwrap().total;
        gts.reverse();
        gts.swap(1, 3);
        let b = total_loss(&head, &p, &gts, &hp).unwrap().total;
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

/// Per-term central differences with one Richardson step; every touched entry plus a sample of the
/// others. The relative error is taken against `max(|analytic|, |numeric|, 1e-4)`.
#[test]
fn gradients_match_finite_differences() {
    let head = ErpnHead::default();
    let hp = HyperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut scenes = 0;
    while scenes < 20 {
        let p = random_pred(&mut rng);
        let gts = vec![overlapping_gt(&mut rng), overlapping_gt(&mut rng)];
        let base = assign(&head, &p, &gts).unwrap();
        let (_, grads) = loss_gradient_terms(&head, &p, &gts, &hp).unwrap();
        let (_, total_grad) = loss_gradient(&head, &p, &gts, &hp).unwrap();

        let mut entries: Vec<usize> = (0..p.data.len() / BOX_FEATURES)
            .map(|b| b * BOX_FEATURES + T_O)
            .collect();
        for t in &base {
            let o = p.offset(t.row, t.col, t.anchor);
            entries.extend(o..o + BOX_FEATURES);
        }
        let untouched: Vec<usize> = (0..60)
            .map(|_| {
                let b = rng.random_range(0..p.data.len() / BOX_FEATURES);
                b * BOX_FEATURES + T_CLASS + rng.random_range(0..8)
            })
            .filter(|i| !entries.contains(i))
            .collect();

        let mut stable = true;
        let mut errs = Vec::new();
        for &i in entries.iter().chain(&untouched) {
            let shifted = |d: f64| {
                let mut q = p.clone();
                q.data[i] += d;
                q
            };
            if [-h, h]
                .iter()
                .any(|&d| assign(&head, &shifted(d), &gts).unwrap() != base)
            {
                stable = false;
                break;
            }
            let eval = |d: f64| total_loss(&head, &shifted(d), &gts, &hp).unwrap();
            let (lp, lm, lp2, lm2) = (eval(h), eval(-h), eval(h / 2.0), eval(-h / 2.0));
            // one Richardson step cancels the h^2 term of the central difference
            let fd = |f: &dyn Fn(&bev_erpn_core::loss::LossBreakdown) -> f64| {
                let d1 = (f(&lp) - f(&lm)) / (2.0 * h);
                let d2 = (f(&lp2) - f(&lm2)) / h;
                (4.0 * d2 - d1) / 3.0
            };
            for (k, term) in Term::ALL.iter().enumerate() {
                errs.push((term.name(), i, grads[k].data[i], fd(&|l| l.get(*term))));
            }
            errs.push(("total", i, total_grad.data[i], fd(&|l| l.total)));
        }
        if !stable {
            continue;
        }
        for &i in &untouched {
            assert_eq!(total_grad.data[i], 0.0);
        }
        for (name, i, a, n) in errs {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{name} entry {i}: analytic {a} numeric {n} rel {rel}");
        }
        scenes += 1;
    }
    eprintln!("worst relative error {worst:e}");
}
