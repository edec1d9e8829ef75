//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use freqtrack::autodiff::Tape;
use freqtrack::backbone::{Backbone, BackboneConfig, Layer, TrackInputs};
use freqtrack::bbox::BBox;
use freqtrack::eval::{
    sr_thresholds, track_sequence, train_toy, OracleTracker, SequenceResult, TrainConfig, PR_MAX_RADIUS,
};
use freqtrack::event::{event_voxel, synth_sequence, SimConfig};
use freqtrack::gradcheck::GradCheckConfig;
use freqtrack::gradsuite::{run_suite, SuiteModule};
use freqtrack::head::{focal_loss, giou_loss, total_loss, LossWeights};
use freqtrack::model::{FreqTrack, ModelConfig};
use freqtrack::params::{Graph, ParamStore};
use freqtrack::spectral::dft::{dft_1d, dft_complex, dft_reference, idft_1d};
use freqtrack::spectral::{DffConfig, SpectralFilterBank};
use freqtrack::wavelet::{dwt, idwt, DwfConfig, DwfParams, WaveletKernel, WerBlock, WerConfig};
use freqtrack::Tensor;

type Outcome = freqtrack::Result<(bool, String)>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn within_time(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.2}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

fn spectral() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut round_trip = 0.0f64;
    for n in [1, 2, 3, 7, 16, 33] {
        for c in [1, 4] {
            let x = random(&[n, c], &mut rng);
            let back = idft_1d(&dft_1d(&x), n)?;
            round_trip = round_trip.max(back.max_abs_diff(&x)?);
        }
    }

    let mut parseval = 0.0f64;
    for n in (1..=33).chain([64, 100, 128]) {
        let x = random(&[n, 1], &mut rng);
        let s = dft_1d(&x);
        let spec: f64 = (0..s.re.rows())
            .map(|k| {
                let w = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                w * (s.re.data()[k].powi(2) + s.im.data()[k].powi(2))
            })
            .sum::<f64>()
            / n as f64;
        let energy: f64 = x.data().iter().map(|v| v * v).sum();
        parseval = parseval.max((spec - energy).abs());
    }

    let mut fast = 0.0f64;
    for bits in 0..=10 {
        let n = 1usize << bits;
        let x: Vec<Complex64> = (0..n)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        for inverse in [false, true] {
            let a = dft_complex(&x, inverse);
            let b = dft_reference(&x, inverse);
            fast = a.iter().zip(&b).map(|(p, q)| (p - q).norm()).fold(fast, f64::max);
        }
        // real one-sided path against the reference on the same signal
        let xr = random(&[n, 1], &mut rng);
        let full = dft_reference(&xr.data().iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>(), false);
        let one = dft_1d(&xr);
        for k in 0..one.re.rows() {
            fast = fast.max((Complex64::new(one.re.data()[k], one.im.data()[k]) - full[k]).norm());
        }
    }

    let (t_ok, t_msg) = within_time(start.elapsed(), Duration::from_secs(5));
    let ok = round_trip <= 1e-10 && parseval <= 1e-10 && fast <= 1e-10 && t_ok;
    Ok((
        ok,
        format!("round trip {round_trip:.1e}, Parseval {parseval:.1e}, fast vs direct {fast:.1e}, {t_msg}"),
    ))
}

fn wavelet() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let kernel = WaveletKernel::new(&mut store, "wav");
    let d = 3;

    let mut recon = 0.0f64;
    let mut energy = 0.0f64;
    let thetas: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    for theta in std::iter::once(None).chain(thetas.into_iter().map(Some)) {
        match theta {
            None => kernel.reset_haar(&mut store)?,
            Some(t) => {
                let (lo, hi) = WaveletKernel::rotated(t);
                store.set(kernel.lo, lo)?;
                store.set(kernel.hi, hi)?;
            }
        }
        for n in (1..=9).chain([16, 33]) {
            let x = random(&[n, d], &mut rng);
            let tape = Tape::new();
            let g = Graph::frozen(&tape, &store);
            let s = dwt(&g, g.constant(x.clone()), &kernel)?;
            let back = idwt(&g, &s, &kernel)?;
            recon = recon.max(back.value().max_abs_diff(&x)?);
            if theta.is_none() && n % 2 == 0 {
                let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
                energy = energy.max((sq(&x) - sq(&s.ca.value()) - sq(&s.cd.value())).abs());
            }
        }
    }

    // zero detail filter at Haar init: both outputs of each pair are the
    // pair's smoothed value
    kernel.reset_haar(&mut store)?;
    let cfg = DwfConfig {
        routed: false,
        ..DwfConfig::default()
    };
    let n = 16;
    let dwf = DwfParams::new(&mut store, "dwf", n, d, &cfg, &mut rng)?;
    store.set(dwf.cd_basis, Tensor::zeros([1, n / 2, d]))?;
    let x = random(&[n, d], &mut rng);
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &store);
    let s = dwt(&g, g.constant(x.clone()), &kernel)?;
    let y = idwt(&g, &dwf.apply(&g, &s, g.constant(x.clone()))?, &kernel)?.value();
    let lo = WaveletKernel::haar_lo();
    let (l0, l1) = (lo.data()[0], lo.data()[1]);
    let mut exact = true;
    let mut avg_dev = 0.0f64;
    for k in 0..n / 2 {
        for c in 0..d {
            let (a, b) = (x.at2(2 * k, c), x.at2(2 * k + 1, c));
            let ca = l0 * a + l1 * b;
            let (even, odd) = (l0 * ca, l1 * ca);
            exact &= y.at2(2 * k, c) == even && y.at2(2 * k + 1, c) == odd;
            let scale = f64::EPSILON * a.abs().max(b.abs());
            avg_dev = avg_dev.max((y.at2(2 * k, c) - 0.5 * (a + b)).abs() / scale);
            avg_dev = avg_dev.max((y.at2(2 * k + 1, c) - 0.5 * (a + b)).abs() / scale);
        }
    }

    let (t_ok, t_msg) = within_time(start.elapsed(), Duration::from_secs(5));
    let ok = recon <= 1e-10 && energy <= 1e-10 && exact && avg_dev <= 2.0 && t_ok;
    Ok((
        ok,
        format!(
            "reconstruction {recon:.1e}, energy split {energy:.1e}, detail-zeroing {} vs Haar smoothing \
             (|y - (a+b)/2| <= {avg_dev:.2} eps·max|a|,|b|), {t_msg}",
            if exact { "bit-exact" } else { "MISMATCH" }
        ),
    ))
}

fn identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (dim, len) = (8, 40);
    let x = random(&[len, dim], &mut rng);
    let mut worst: Vec<(String, f64)> = Vec::new();

    for k in [1, 4] {
        let mut store = ParamStore::new();
        let cfg = DffConfig {
            heads: 2,
            k,
            router_hidden: 6,
        };
        let bank = SpectralFilterBank::new(&mut store, "dff", dim, len, &cfg, &mut rng)?;
        bank.set_identity(&mut store)?;
        let mut err = 0.0f64;
        for n in [len, 33, 1] {
            let xi = Tensor::new([n, dim], x.data()[..n * dim].to_vec())?;
            let tape = Tape::new();
            let g = Graph::frozen(&tape, &store);
            err = err.max(bank.forward(&g, g.constant(xi.clone()))?.value().max_abs_diff(&xi)?);
        }
        worst.push((format!("DFF K={k}"), err));
    }

    {
        let mut store = ParamStore::new();
        let wer = WerBlock::new(&mut store, "wer", 21, dim, &WerConfig::default(), &mut rng)?;
        wer.set_identity(&mut store)?;
        let e = random(&[21, dim], &mut rng);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        worst.push(("WER".into(), wer.forward(&g, g.constant(e.clone()))?.value().max_abs_diff(&e)?));
    }

    let dff = DffConfig {
        heads: 2,
        k: 4,
        router_hidden: 6,
    };
    for spectral in [true, false] {
        let mut store = ParamStore::new();
        let layer = Layer::new(&mut store, "l", dim, 2, 4, spectral.then_some((&dff, len)), &mut rng)?;
        layer.zero_residual(&mut store)?;
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let name = if spectral { "SET layer" } else { "standard layer" };
        worst.push((name.into(), layer.forward(&g, g.constant(x.clone()))?.value().max_abs_diff(&x)?));
    }

    {
        let cfg = BackboneConfig::tiny();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, "bb", &cfg, &mut rng)?;
        bb.set_identity(&mut store)?;
        let (t, s) = (cfg.template_side, cfg.search_side);
        let inputs = TrackInputs {
            rgb_t: random(&[3, t, t], &mut rng),
            ev_t: random(&[cfg.bins, cfg.event_side(t), cfg.event_side(t)], &mut rng),
            rgb_s: random(&[3, s, s], &mut rng),
            ev_s: random(&[cfg.bins, cfg.event_side(s), cfg.event_side(s)], &mut rng),
        };
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let out = bb.forward(&g, &inputs)?;
        worst.push(("backbone".into(), out.h.value().max_abs_diff(&out.h0.value())?));
    }

    let ok = worst.iter().all(|(_, e)| *e <= 1e-9);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        step: 1e-6,
        tol: 1e-4,
        ..GradCheckConfig::default()
    };
    let entries = run_suite(SuiteModule::All, &cfg)?;
    let ok = entries.iter().all(|e| e.report.passed);
    let (t_ok, t_msg) = within_time(start.elapsed(), Duration::from_secs(120));
    let detail = entries
        .iter()
        .map(|e| {
            format!(
                "{} {:.1e}/{}{}",
                e.name,
                e.report.max_rel_err,
                e.report.checked(),
                if e.report.passed { "" } else { " FAILED" }
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((ok && t_ok, format!("max rel err/coords: {detail}; {t_msg}")))
}

fn routing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (dim, len) = (8, 40);

    let mut min_alpha = f64::INFINITY;
    let mut sum_err = 0.0f64;
    let mut perm_exact = true;
    for trial in 0..20 {
        let mut store = ParamStore::new();
        let cfg = DffConfig {
            heads: 2,
            k: 4,
            router_hidden: 6,
        };
        let bank = SpectralFilterBank::new(&mut store, "dff", dim, len, &cfg, &mut rng)?;
        // larger router weights than the init so α is far from uniform
        for id in [bank.router.w1, bank.router.w2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 100.0);
        }
        let n = 1 + trial * 2;
        let h = random(&[n, dim], &mut rng).map(|v| 3.0 * v);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let alpha = bank.routing_weights(&g, g.constant(h.clone()))?.value();
        min_alpha = alpha.data().iter().cloned().fold(min_alpha, f64::min);
        sum_err = sum_err.max((alpha.sum() - 1.0).abs());
        for _ in 0..5 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let data: Vec<f64> = order.iter().flat_map(|&r| h.row(r).to_vec()).collect();
            let hp = Tensor::new([n, dim], data)?;
            let ap = bank.routing_weights(&g, g.constant(hp))?.value();
            perm_exact &= *ap == *alpha;
        }
    }

    // K=2 forced onto its second filter against a K=1 bank holding only it
    let cfg2 = DffConfig {
        heads: 2,
        k: 2,
        router_hidden: 6,
    };
    let cfg1 = DffConfig { k: 1, ..cfg2.clone() };
    let mut s2 = ParamStore::new();
    let b2 = SpectralFilterBank::new(&mut s2, "dff", dim, len, &cfg2, &mut rng)?;
    let mut s1 = ParamStore::new();
    let b1 = SpectralFilterBank::new(&mut s1, "dff", dim, len, &cfg1, &mut rng)?;
    for id in [b2.basis_re, b2.basis_im] {
        s2.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    s2.set(b2.router.b2, Tensor::new([2], vec![-1e3, 1e3])?)?;
    let per = b2.max_bins() * dim;
    for (src, dst) in [(b2.basis_re, b1.basis_re), (b2.basis_im, b1.basis_im)] {
        let second = s2.get(src).data()[per..].to_vec();
        s1.set(dst, Tensor::new([1, b2.max_bins(), dim], second)?)?;
    }
    for (src, dst) in [
        (b2.proj_in_w, b1.proj_in_w),
        (b2.proj_in_b, b1.proj_in_b),
        (b2.proj_out_w, b1.proj_out_w),
        (b2.proj_out_b, b1.proj_out_b),
    ] {
        s1.set(dst, s2.get(src).clone())?;
    }
    let mut one_hot = 0.0f64;
    for n in [len, 17, 2] {
        let h = random(&[n, dim], &mut rng);
        let (t1, t2) = (Tape::new(), Tape::new());
        let (g1, g2) = (Graph::frozen(&t1, &s1), Graph::frozen(&t2, &s2));
        let y1 = b1.forward(&g1, g1.constant(h.clone()))?.value();
        let y2 = b2.forward(&g2, g2.constant(h))?.value();
        one_hot = one_hot.max(y1.max_abs_diff(&y2)?);
    }

    let ok = min_alpha >= 0.0 && sum_err <= 1e-12 && one_hot <= 1e-9 && perm_exact;
    Ok((
        ok,
        format!(
            "min α {min_alpha:.2e}, |Σα - 1| {sum_err:.1e}, one-hot vs single filter {one_hot:.1e}, \
             permuted tokens {}",
            if perm_exact { "identical α" } else { "α CHANGED" }
        ),
    ))
}

fn losses() -> Outcome {
    let focal = focal_loss(&Tensor::full([1, 1], 0.5), &Tensor::full([1, 1], 1.0))?;
    let focal_err = (focal - 0.25 * std::f64::consts::LN_2).abs();
    let giou = giou_loss(&BBox::from_corners(0.0, 0.0, 2.0, 2.0), &BBox::from_corners(1.0, 1.0, 3.0, 3.0))?;
    let giou_err = (giou - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))).abs();
    let w = LossWeights::default();
    let weighted = total_loss(0.2, 0.05, 0.3, &w);
    let weights_ok = (w.focal, w.l1, w.giou) == (1.0, 14.0, 1.0);
    let ok = focal_err <= 1e-12 && giou_err <= 1e-12 && weighted == 1.2 && weights_ok;
    Ok((
        ok,
        format!(
            "focal err {focal_err:.1e}, GIoU err {giou_err:.1e}, weighted sum {weighted:?} with λ = ({}, {}, {})",
            w.focal, w.l1, w.giou
        ),
    ))
}

/// Box pairs with real and integer coordinates; integer boxes exercise exact
/// ties at thresholds.
fn random_box(rng: &mut ChaCha8Rng, integer: bool) -> BBox {
    if integer {
        let x1 = rng.random_range(0..40) as f64;
        let y1 = rng.random_range(0..40) as f64;
        BBox::from_corners(x1, y1, x1 + rng.random_range(1..30) as f64, y1 + rng.random_range(1..30) as f64)
    } else {
        BBox::new(
            rng.random_range(0.0..60.0),
            rng.random_range(0.0..60.0),
            rng.random_range(0.5..40.0),
            rng.random_range(0.5..40.0),
        )
    }
}

fn brute_iou(a: &BBox, b: &BBox) -> f64 {
    let ca = [a.cx - a.w / 2.0, a.cy - a.h / 2.0, a.cx + a.w / 2.0, a.cy + a.h / 2.0];
    let cb = [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0];
    let w = f64::max(0.0, f64::min(ca[2], cb[2]) - f64::max(ca[0], cb[0]));
    let h = f64::max(0.0, f64::min(ca[3], cb[3]) - f64::max(ca[1], cb[1]));
    let inter = w * h;
    let union = (ca[2] - ca[0]) * (ca[3] - ca[1]) + (cb[2] - cb[0]) * (cb[3] - cb[1]) - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for i in 0..1000 {
        let integer = i % 2 == 0;
        let g = random_box(&mut rng, integer);
        let p = match i % 10 {
            3 => BBox::new(g.cx, g.cy, g.w * 0.5, g.h),
            7 => g,
            _ => random_box(&mut rng, integer),
        };
        pred.push(p);
        gt.push(g);
    }
    let res = SequenceResult::new(&pred, &gt)?;

    let n = pred.len() as f64;
    let mut sr = Vec::new();
    for t in sr_thresholds() {
        let mut hits = 0usize;
        for (p, g) in pred.iter().zip(&gt) {
            let v = brute_iou(p, g);
            if v > t || v >= 1.0 {
                hits += 1;
            }
        }
        sr.push(hits as f64 / n);
    }
    let mut pr = Vec::new();
    for r in 0..=PR_MAX_RADIUS {
        let mut hits = 0usize;
        for (p, g) in pred.iter().zip(&gt) {
            let d = ((p.cx - g.cx).powi(2) + (p.cy - g.cy).powi(2)).sqrt();
            if d < r as f64 || d == 0.0 {
                hits += 1;
            }
        }
        pr.push(hits as f64 / n);
    }
    let auc = sr.iter().sum::<f64>() / sr.len() as f64;
    let match_exact = res.sr_curve == sr && res.pr_curve == pr && res.sr_auc() == auc;

    let seq = synth_sequence(&SimConfig::default(), 0)?;
    let (_, perfect) = track_sequence(&mut OracleTracker, &seq)?;
    let oracle_ok = perfect.sr_auc() == 1.0 && perfect.pr_at(20.0)? == 1.0;

    Ok((
        match_exact && oracle_ok,
        format!(
            "1000 pairs: curves and AUC {} (AUC {auc:.4}); oracle tracker SR AUC {} PR {}",
            if match_exact { "identical" } else { "DIFFER" },
            perfect.sr_auc(),
            perfect.pr_at(20.0)?
        ),
    ))
}

fn training() -> Outcome {
    let cfg = TrainConfig::default();
    let limit = Duration::from_secs(300);
    let start = Instant::now();
    let (model_a, a) = train_toy(&cfg, 0)?;
    let first = start.elapsed();
    let (model_b, b) = train_toy(&cfg, 0)?;
    let same = a == b && model_a.store.tensors() == model_b.store.tensors();
    let initial = a.initial();
    let last = a.history.last().map_or(f64::NAN, |h| h.total);
    let (t_ok, t_msg) = within_time(first, limit);
    let ok = a.history.len() == 200 && last <= 0.5 * initial && same && t_ok;
    Ok((
        ok,
        format!(
            "loss {initial:.4} -> {last:.4} ({:.1}% of step 0; last-10 mean {:.4}), repeat run {}, {t_msg}",
            100.0 * last / initial,
            a.final_mean(10),
            if same { "identical" } else { "DIFFERS" }
        ),
    ))
}

fn shapes() -> Outcome {
    let model = FreqTrack::new(&ModelConfig::toy())?;
    let bb = &model.cfg.backbone;
    let seq = synth_sequence(&SimConfig::default(), 0)?;
    let frame = &seq.frames[0];
    let gt = frame.bbox_gt.expect("first frame box");
    let voxel = event_voxel(&seq.events, frame, seq.sensor, bb.bins)?;
    let t = model.template(&seq.images[0], &voxel, &gt)?;
    let next = &seq.frames[1];
    let voxel1 = event_voxel(&seq.events, next, seq.sensor, bb.bins)?;
    let s = model.search(&seq.images[1], &voxel1, &gt)?;
    let tape = Tape::new();
    let g = Graph::frozen(&tape, &model.store);
    let inputs = TrackInputs {
        rgb_t: t.rgb.clone(),
        ev_t: t.ev.clone(),
        rgb_s: s.rgb.clone(),
        ev_s: s.ev.clone(),
    };
    let out = model.backbone.forward(&g, &inputs)?;
    let maps = model.outputs(&t, &s)?;
    let h0 = out.h0.shape();
    let score = maps.score.shape().to_vec();
    let size = maps.size.shape().to_vec();
    let ok = h0 == [160, 32] && out.h.shape() == [160, 32] && score == [8, 8] && size == [2, 8, 8];
    Ok((ok, format!("H0 {h0:?}, H {:?}, score map {score:?}, size map {size:?}", out.h.shape())))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("spectral identities", spectral),
        ("wavelet identities", wavelet),
        ("identity configurations", identities),
        ("gradient suite", gradients),
        ("routing properties", routing),
        ("loss values", losses),
        ("metric oracle", metrics),
        ("toy training", training),
        ("shape contract", shapes),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let (ok, detail) = run().unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!(
            "{} {name:<24} [{:>6.1}s] {detail}",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
