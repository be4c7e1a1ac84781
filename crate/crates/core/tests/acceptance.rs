//! One line per acceptance criterion. Exits non-zero if any fails.
//!
//! Run with `cargo test -p vip-core --test acceptance`.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vip_core::complexity::count_params_flops;
use vip_core::config::LossConfig;
use vip_core::data::generate_dataset;
use vip_core::frequency::{band_split, dct2, idct2};
use vip_core::model::{declarations, predict, Model};
use vip_core::objectives::{auc, f1_metric, focal_loss, miou_loss, miou_metric};
use vip_core::perturb::{perturb_gaussian, perturb_jpeg, psnr, Perturbation};
use vip_core::train::{evaluate, load_data, model_gradcheck, EvalReport, Trainer};
use vip_core::{ExperimentConfig, ModelConfig};
use vip_tensor::suite::primitive_suite;
use vip_tensor::{GradCheckOptions, Graph, ParamStore, Tensor};

type Outcome = (bool, String);

fn overfit_config() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/overfit.cfg");
    ExperimentConfig::load(&path).expect("configs/overfit.cfg")
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for seed in 0..10 {
        let opts = GradCheckOptions { eps: 1e-6, tol: 1e-5, seed, ..GradCheckOptions::default() };
        for (name, r) in primitive_suite(seed, &opts).unwrap() {
            worst = worst.max(r.max_rel_err);
            if !r.pass {
                failed.push(format!("{name}@{seed}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        failed.is_empty() && secs < 60.0,
        format!("10 seeds, max rel err {worst:.2e}, {secs:.1} s, failed {failed:?}"),
    )
}

fn full_model_gradient() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions { eps: 1e-4, tol: 1e-3, max_coords: 100, seed: 0 };
    let r = model_gradcheck(&ExperimentConfig::default(), &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (
        r.pass && r.checked == 100 && secs < 600.0,
        format!("{} parameters, max rel err {:.2e} at {}, {secs:.1} s", r.checked, r.max_rel_err, r.worst),
    )
}

fn dct_invariants() -> Outcome {
    let (mut rt, mut parseval, mut bands): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seed in 0..10 {
        let x = common::rand(&[32, 32], 100 + seed);
        let d = dct2(&x).unwrap();
        rt = rt.max(idct2(&d).unwrap().max_abs_diff(&x));
        let e = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        parseval = parseval.max((e(&x) - e(&d)).abs());
        let [a, b, c] = band_split(&x, 1.0 / 3.0, 2.0 / 3.0).unwrap();
        let sum = a.zip_map(&b, |p, q| p + q).unwrap().zip_map(&c, |p, q| p + q).unwrap();
        bands = bands.max(sum.max_abs_diff(&x));
    }
    (
        rt <= 1e-8 && parseval <= 1e-8 && bands <= 1e-8,
        format!("round trip {rt:.1e}, Parseval {parseval:.1e}, band sum {bands:.1e}"),
    )
}

fn dwti_degeneracy() -> Outcome {
    let err = (0..8).map(|s| common::zero_offset_error(s, [1, 2, 4][s as usize % 3])).fold(0.0, f64::max);
    let bad: usize = (0..4).map(|s| common::locality_violations(s).len()).sum();
    (err <= 1e-6 && bad == 0, format!("zero-offset err {err:.1e}, locality violations {bad}"))
}

fn block_identity() -> Outcome {
    let mut id: f64 = 0.0;
    for seed in 0..6 {
        id = id.max(common::neutral_pair_error(seed, 1 + seed as usize % 2, [4, 8][seed as usize % 2]));
    }
    let mass = (0..4).map(common::cross_region_mass).fold(0.0, f64::max);
    (id <= 1e-12 && mass <= 1e-6, format!("identity err {id:.1e}, cross-region mass {mass:.1e}"))
}

fn loss_value(pred: &[f64], gt: &[f64], f: impl Fn(&mut Graph, vip_tensor::Var, &Tensor) -> vip_tensor::Var) -> f64 {
    let mut g = Graph::new();
    let m = g.constant(Tensor::new(&[pred.len()], pred.to_vec()).unwrap());
    let gt = Tensor::new(&[gt.len()], gt.to_vec()).unwrap();
    let out = f(&mut g, m, &gt);
    g.value(out).item()
}

fn loss_identities() -> Outcome {
    let iou = |p: &[f64], y: &[f64]| loss_value(p, y, |g, m, gt| miou_loss(g, m, gt, 1e-7).unwrap());
    let mask = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let examples = [
        iou(&mask, &mask),
        iou(&[1.0; 6], &[0.0; 6]) - 1.0,
        iou(&[0.5; 6], &[1.0; 6]) - 0.5,
    ];
    let ex_err = examples.iter().fold(0.0f64, |a, e| a.max(e.abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let half = LossConfig { alpha: 0.5, gamma: 0.0, ..LossConfig::default() };
    let mut bce_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..50);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let got = loss_value(&p, &y, |g, m, gt| focal_loss(g, m, gt, &half).unwrap());
        let want = 0.5 * p.iter().zip(&y).map(|(&a, &b)| common::bce(a, b, half.eps)).sum::<f64>() / n as f64;
        bce_err = bce_err.max((got - want).abs());
    }

    let cfg = LossConfig { alpha: 0.25, gamma: 2.0, ..LossConfig::default() };
    let focal = loss_value(&[0.5], &[1.0], |g, m, gt| focal_loss(g, m, gt, &cfg).unwrap());
    let calc = common::focal_scalar(0.5, 1.0, 0.25, 2.0, cfg.eps);
    (
        ex_err <= 1e-12 && bce_err <= 1e-10 && (focal - calc).abs() <= 1e-4 && (focal - 0.0433).abs() <= 1e-4,
        format!("iou examples {ex_err:.1e}, focal vs BCE {bce_err:.1e}, focal example {focal:.5} (calculator {calc:.5})"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        if miou_metric(&p, &y, 0.5) != common::brute_miou(&p, &y, 0.5) || f1_metric(&p, &y, 0.5) != common::brute_f1(&p, &y, 0.5) {
            mismatches += 1;
        }
    }
    let mut auc_mismatches = 0;
    let mut sets = 0;
    while sets < 200 {
        let n = rng.random_range(2..60);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 11.0).collect();
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if l.iter().all(|&v| v) || l.iter().all(|&v| !v) {
            continue;
        }
        sets += 1;
        if auc(&s, &l).unwrap() != common::pairwise_auc(&s, &l) {
            auc_mismatches += 1;
        }
    }
    (
        mismatches == 0 && auc_mismatches == 0,
        format!("1000 mask pairs: {mismatches} mismatches; 200 score sets: {auc_mismatches} mismatches"),
    )
}

fn overfit(model: &mut Option<Model>) -> Outcome {
    let cfg = overfit_config();
    let data = load_data(&cfg).unwrap();
    let start = Instant::now();
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.run().unwrap();
    let secs = start.elapsed().as_secs_f64();
    let r = evaluate(&t.model, &data, Perturbation::None).unwrap();
    let a = r.auc.unwrap_or(0.0);
    *model = Some(t.model.clone());
    (
        data.inpainted.len() == 8 && cfg.optim.iters <= 500 && r.miou >= 0.95 && r.f1 >= 0.97 && a >= 0.99 && secs <= 900.0,
        format!("{} iters: {}, {secs:.0} s", cfg.optim.iters, r.summary()),
    )
}

/// Names of `a` missing from `b`.
fn missing(a: &ParamStore, b: &ParamStore) -> Vec<String> {
    a.names().filter(|n| !b.contains(n)).map(str::to_owned).collect()
}

fn ablations() -> Outcome {
    let full = ModelConfig::desk();
    let full_params = declarations(&full).build(0).unwrap();
    let mut dwti = full.clone();
    dwti.dwti.enabled = false;
    let mut freq = full.clone();
    freq.frequency.enabled = false;
    let mut tff = full.clone();
    tff.decoder.tff_enabled = false;
    let clip = generate_dataset(&full, 1, 3).unwrap().inpainted[0].clip.clone();
    let full_pred = predict(&Model::from_params(full.clone(), full_params.clone()).unwrap(), &clip).unwrap();

    let mut ok = true;
    let mut notes = Vec::new();
    for (name, cfg, prefixes, recoverable) in [
        ("dwti", dwti, vec!["enc.dwti."], true),
        ("frequency", freq, vec!["dec.freq."], true),
        ("tff", tff, vec!["dec.tff."], false),
    ] {
        let p = declarations(&cfg).build(0).unwrap();
        let changed: Vec<String> = missing(&full_params, &p).into_iter().chain(missing(&p, &full_params)).collect();
        let outside: Vec<&String> = changed.iter().filter(|n| !prefixes.iter().any(|pre| n.starts_with(pre))).collect();
        let shared_equal = p
            .iter()
            .filter(|q| full_params.contains(&q.name))
            .all(|q| full_params.value(&q.name).unwrap() == &q.value);

        let mut ecfg = ExperimentConfig::default();
        ecfg.model = cfg.clone();
        ecfg.train.clips = 2;
        ecfg.optim.iters = 2;
        ecfg.optim.batch = 2;
        ecfg.train.eval_every = 0;
        let data = load_data(&ecfg).unwrap();
        let mut t = Trainer::new(&ecfg, &data).unwrap();
        let runs = t.run().is_ok() && evaluate(&t.model, &data, Perturbation::None).is_ok();

        let mut line = format!("{name}: {} names differ, {} outside prefix", changed.len(), outside.len());
        let mut pass = runs && !changed.is_empty() && outside.is_empty() && shared_equal;
        if recoverable {
            // restrict the full model's parameters to the ablated declaration set
            let mut sub = ParamStore::new();
            for q in full_params.iter().filter(|q| p.contains(&q.name)) {
                sub.insert(q.name.clone(), q.value.clone()).unwrap();
            }
            let d = predict(&Model::from_params(cfg, sub).unwrap(), &clip).unwrap().max_abs_diff(&full_pred);
            line.push_str(&format!(", output diff at init {d:.1e}"));
            pass &= d <= 1e-12;
        }
        ok &= pass;
        notes.push(line);
    }
    (ok, notes.join("; "))
}

fn perturbation(model: Option<&Model>) -> Outcome {
    let cfg = ExperimentConfig::default();
    let data = generate_dataset(&cfg.model, 4, 21).unwrap();
    let mut snr_err: f64 = 0.0;
    let mut psnr_ok = true;
    for (i, s) in data.inpainted.iter().chain(&data.authentic).enumerate() {
        for db in [5.0, 10.0, 20.0, 30.0] {
            let (_, measured) = perturb_gaussian(&s.clip, db, i as u64).unwrap();
            snr_err = snr_err.max((measured - db).abs());
        }
        let [t, h, w, c] = *s.clip.shape() else { unreachable!() };
        let (q90, q70) = (perturb_jpeg(&s.clip, 90).unwrap(), perturb_jpeg(&s.clip, 70).unwrap());
        let frame = |x: &Tensor, f: usize| {
            let n = h * w * c;
            Tensor::new(&[h, w, c], x.data()[f * n..(f + 1) * n].to_vec()).unwrap()
        };
        for f in 0..t {
            let clean = frame(&s.clip, f);
            psnr_ok &= psnr(&clean, &frame(&q90, f)).unwrap() > psnr(&clean, &frame(&q70, f)).unwrap();
        }
    }
    let mut line = format!("max SNR error {snr_err:.3} dB, PSNR(Q90) > PSNR(Q70) on all frames: {psnr_ok}");
    let mut ok = snr_err <= 0.3 && psnr_ok;
    match model {
        Some(m) => {
            let train = load_data(&overfit_config()).unwrap();
            let r = |q| -> EvalReport { evaluate(m, &train, Perturbation::Jpeg(q)).unwrap() };
            let (a, b) = (r(90), r(70));
            line.push_str(&format!(", Q90 miou {:.4} f1 {:.4} vs Q70 miou {:.4} f1 {:.4}", a.miou, a.f1, b.miou, b.f1));
            ok &= a.miou >= b.miou && a.f1 >= b.f1;
        }
        None => {
            line.push_str(", no overfit model");
            ok = false;
        }
    }
    (ok, line)
}

fn complexity() -> Outcome {
    let hand: usize = 7752
        + 4 * (3378 + 7322 + 12802)
        + 4 * (12900 + 28468 + 50180)
        + 2176
        + 4800
        + 8448
        + 6176
        + 12704
        + 2002
        + 2394
        + 3050
        + 3834
        + 45833
        + 142089
        + 2337;
    let desk = count_params_flops(&ModelConfig::desk()).unwrap().params();
    let mut registry = true;
    let mut cfgs = vec![ModelConfig::desk(), ModelConfig::full()];
    for i in 0..3 {
        let mut c = ModelConfig::desk();
        match i {
            0 => c.dwti.enabled = false,
            1 => c.frequency.enabled = false,
            _ => c.decoder.tff_enabled = false,
        }
        cfgs.push(c);
    }
    for c in &cfgs {
        registry &= count_params_flops(c).unwrap().params() == declarations(c).numel();
    }
    (
        desk == hand && hand == 703_795 && registry,
        format!("desk {desk} vs hand {hand}; registry match on {} configs: {registry}", cfgs.len()),
    )
}

fn determinism() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.optim.iters = 8;
    cfg.train.clips = 3;
    cfg.train.eval_every = 4;
    let run = || {
        let data = load_data(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &data).unwrap();
        t.run().unwrap();
        (t.checkpoint().to_bytes().unwrap(), t.log)
    };
    let (a, b) = (run(), run());
    (a == b, format!("checkpoint {} bytes, {} log lines, identical: {}", a.0.len(), a.1.len(), a == b))
}

fn main() -> ExitCode {
    let mut model = None;
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Option<Model>) -> Outcome>)> = vec![
        ("gradient suite", Box::new(|_| gradient_suite())),
        ("full-model gradient", Box::new(|_| full_model_gradient())),
        ("DCT invariants", Box::new(|_| dct_invariants())),
        ("DWTI degeneracy", Box::new(|_| dwti_degeneracy())),
        ("block identity", Box::new(|_| block_identity())),
        ("loss identities", Box::new(|_| loss_identities())),
        ("metric oracle", Box::new(|_| metric_oracle())),
        ("overfit", Box::new(overfit)),
        ("ablations", Box::new(|_| ablations())),
        ("perturbation calibration", Box::new(|m| perturbation(m.as_ref()))),
        ("complexity counter", Box::new(|_| complexity())),
        ("determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.into_iter().enumerate() {
        let (pass, detail) = f(&mut model);
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
        failed += !pass as usize;
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
