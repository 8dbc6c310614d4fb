//! Scratch probes for defense hyperparameters (deleted before ship).
//! Run: cargo test -p detbench-core --lib probe_ -- --ignored --nocapture

use std::time::Instant;

use crate::attack::{attack_batch, AttackConfig, Norm};
use crate::corpus::{generate_corpus, train_eval_split, CorpusSpec};
use crate::data::{Label, LabeledImage, ScoredSample};
use crate::defense::{robust_finetune, RobustFinetuneConfig};
use crate::detector::{
    build_feature_probe, train_detector, Detector, Family, TrainConfig, DEFAULT_FEATURE_DIM,
};
use crate::metrics::auc_roc;
use crate::tensor::Tensor;

fn clean_auc(det: &Detector, images: &[LabeledImage]) -> f64 {
    let scored = det.score_batch(images).unwrap();
    auc_roc(&scored).unwrap()
}

fn attacked_auc(det: &Detector, images: &[LabeledImage], eps_255: f64) -> f64 {
    let cfg = AttackConfig::pgd(Norm::Linf, eps_255 / 255.0, 99);
    let results = attack_batch(det, images, &cfg).unwrap();
    let scored: Vec<ScoredSample> = results
        .iter()
        .map(|r| ScoredSample { score: r.post_score, label: r.label, id: r.original_id.clone() })
        .collect();
    auc_roc(&scored).unwrap()
}

struct World {
    train: Vec<LabeledImage>,
    eval: Vec<LabeledImage>,
    subset: Vec<LabeledImage>,
    pool: Vec<Tensor>,
}

fn world() -> World {
    let spec = CorpusSpec::default();
    let corpus = generate_corpus(&spec).unwrap();
    let (train, eval) = train_eval_split(&corpus, 0.8, spec.seed).unwrap();
    let reals: Vec<_> =
        eval.iter().filter(|s| s.label == Label::Real).take(50).cloned().collect();
    let fakes: Vec<_> =
        eval.iter().filter(|s| s.label == Label::Fake).take(50).cloned().collect();
    let mut subset = reals;
    subset.extend(fakes);
    let pool: Vec<_> = train.iter().take(256).map(|s| s.pixels.clone()).collect();
    World { train, eval, subset, pool }
}

fn report(tag: &str, det: &Detector, w: &World) {
    print!("RES {tag}: clean {:.4}", clean_auc(det, &w.eval));
    for eps in [1.0, 2.0, 8.0] {
        print!(" auc@{eps} {:.4}", attacked_auc(det, &w.subset, eps));
    }
    println!();
}

fn finetune_report(tag: &str, det: &Detector, w: &World, cfg: &RobustFinetuneConfig) {
    let t = Instant::now();
    let r2 = robust_finetune(det, &w.pool, cfg).unwrap();
    print!("RES {tag}: ft {:.0}s", t.elapsed().as_secs_f64());
    print!(" clean {:.4}", clean_auc(&r2, &w.eval));
    for eps in [1.0, 2.0, 8.0] {
        print!(" auc@{eps} {:.4}", attacked_auc(&r2, &w.subset, eps));
    }
    println!();
}

/// Mean embedding per feature over `n` train images (zero-bias responses),
/// used to scale random negative biases to each channel's response level.
fn feature_means(det: &Detector, w: &World, n: usize) -> Vec<f64> {
    let mut sums = vec![0.0; DEFAULT_FEATURE_DIM];
    for img in w.train.iter().take(n) {
        let e = det.embed(&img.pixels).unwrap();
        for (s, v) in sums.iter_mut().zip(e.data()) {
            *s += v;
        }
    }
    sums.iter_mut().for_each(|s| *s /= n as f64);
    sums
}

fn scored(results: &[crate::attack::AdversarialResult]) -> Vec<ScoredSample> {
    results
        .iter()
        .map(|r| ScoredSample { score: r.post_score, label: r.label, id: r.original_id.clone() })
        .collect()
}

/// Feasibility sweep for the shipped default detectors: clean gates, white-box
/// collapse curve, attack orderings, quality orderings, constraint checks,
/// degradation interaction, and the transfer-family gap.
#[test]
#[ignore]
fn probe_accept() {
    use crate::attack::{
        default_linf_grid, sub_quantization_linf_grid, verify_constraint, AdversarialResult,
        Method,
    };
    use crate::corpus::{image_from_png, png_bytes};
    use crate::degrade::{blur_sigma_grid, degrade, Degradation};
    use crate::harness::{prepare, run_transfer_matrix, AttackGrid, ExperimentConfig};
    use crate::metrics::accuracy_at_threshold;

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.output_dir = dir.path().join("out");
    cfg.eval_attack_subset = 32;
    let t0 = Instant::now();
    let prep = prepare(&cfg).unwrap();
    println!("RES prepare {:.0}s", t0.elapsed().as_secs_f64());
    for det in &prep.detectors {
        println!("RES clean {} auc {:.4}", det.name(), clean_auc(det, &prep.eval));
    }

    let mut grid = sub_quantization_linf_grid();
    grid.extend(default_linf_grid());
    grid.sort_by(f64::total_cmp);
    let subset = &prep.attack_set;

    // Criterion 4 + 6 raw material: PGD over the full Linf grid.
    let mut pgd: Vec<Vec<Vec<AdversarialResult>>> = Vec::new(); // [det][eps]
    let t4 = Instant::now();
    for det in &prep.detectors {
        let mut per_eps = Vec::new();
        for (k, &eps) in grid.iter().enumerate() {
            let c = AttackConfig::pgd(Norm::Linf, eps, 40_000 + k as u64);
            per_eps.push(attack_batch(det, subset, &c).unwrap());
        }
        pgd.push(per_eps);
    }
    println!("RES crit4 pgd crafting {:.0}s", t4.elapsed().as_secs_f64());
    for (d, det) in prep.detectors.iter().enumerate() {
        let curve: Vec<f64> = pgd[d].iter().map(|r| auc_roc(&scored(r)).unwrap()).collect();
        let upticks = curve.windows(2).filter(|w| w[1] > w[0] + 1e-9).count();
        let pretty: Vec<String> = curve.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "RES crit4 {} curve [{}] upticks {upticks}/11 auc@8 {:.4}",
            det.name(),
            pretty.join(" "),
            curve.last().unwrap()
        );
    }

    // Criterion 5: BIM vs FGSM at sub-quantization budgets; FGSM everywhere
    // doubles as the criterion-6 comparator.
    let mut fgsm: Vec<Vec<Vec<AdversarialResult>>> = Vec::new();
    let mut bim_subq: Vec<Vec<Vec<AdversarialResult>>> = Vec::new();
    for det in &prep.detectors {
        let mut per_eps = Vec::new();
        for (k, &eps) in grid.iter().enumerate() {
            let c = AttackConfig::fgsm(Norm::Linf, eps, 41_000 + k as u64);
            per_eps.push(attack_batch(det, subset, &c).unwrap());
        }
        fgsm.push(per_eps);
        let mut per_subq = Vec::new();
        for (k, &eps) in sub_quantization_linf_grid().iter().enumerate() {
            let c = AttackConfig::bim(Norm::Linf, eps, 42_000 + k as u64);
            per_subq.push(attack_batch(det, subset, &c).unwrap());
        }
        bim_subq.push(per_subq);
    }
    let grid_index = |eps: f64| grid.iter().position(|g| *g == eps).unwrap();
    for (d, det) in prep.detectors.iter().enumerate() {
        for (k, &eps) in sub_quantization_linf_grid().iter().enumerate() {
            let b = auc_roc(&scored(&bim_subq[d][k])).unwrap();
            let f = auc_roc(&scored(&fgsm[d][grid_index(eps)])).unwrap();
            let flag = if b > f + 0.02 { " VIOLATION" } else { "" };
            println!("RES crit5 {} eps {eps}: bim {b:.4} fgsm {f:.4}{flag}", det.name());
        }
    }

    // Criterion 6: mean SSIM and feature distance, PGD vs FGSM, default grid.
    let mean = |rs: &[AdversarialResult], f: &dyn Fn(&AdversarialResult) -> Option<f64>| {
        let vals: Vec<f64> = rs.iter().filter_map(f).collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    for (d, det) in prep.detectors.iter().enumerate() {
        let mut worst_ssim: f64 = f64::INFINITY;
        let mut worst_fd: f64 = -f64::INFINITY;
        for k in default_linf_grid().into_iter().map(grid_index) {
            let sp = mean(&pgd[d][k], &|r| r.quality.ssim);
            let sf = mean(&fgsm[d][k], &|r| r.quality.ssim);
            worst_ssim = worst_ssim.min(sp - sf);
            if det.name().starts_with("feature_probe") {
                let fp = mean(&pgd[d][k], &|r| r.quality.feature_distance);
                let ff = mean(&fgsm[d][k], &|r| r.quality.feature_distance);
                worst_fd = worst_fd.max(fp - ff);
            }
        }
        println!(
            "RES crit6 {} worst ssim(pgd)-ssim(fgsm) {worst_ssim:.5} worst fd(pgd)-fd(fgsm) {worst_fd:.5}",
            det.name()
        );
    }

    // Criterion 3: continuous zero-slack ball check on everything crafted so
    // far, quantized check after a PNG round trip on a sample.
    let t3 = Instant::now();
    let mut checked = 0usize;
    let mut quantized = 0usize;
    let originals: std::collections::BTreeMap<&str, &Tensor> =
        subset.iter().map(|s| (s.id.as_str(), &s.pixels)).collect();
    let cells: Vec<(&Vec<AdversarialResult>, f64)> = pgd
        .iter()
        .chain(fgsm.iter())
        .flat_map(|per_eps| per_eps.iter().zip(grid.iter().copied()))
        .chain(
            bim_subq
                .iter()
                .flat_map(|per| per.iter().zip(sub_quantization_linf_grid().into_iter())),
        )
        .collect();
    {
        for &(rs, eps) in &cells {
            for r in rs {
                let orig = originals[r.original_id.as_str()];
                assert!(
                    verify_constraint(orig, &r.adversarial, Norm::Linf, eps, false).unwrap(),
                    "continuous ball violated"
                );
                checked += 1;
            }
            for r in rs.iter().take(2) {
                let orig = originals[r.original_id.as_str()];
                let back = image_from_png(&png_bytes(&r.adversarial).unwrap()).unwrap();
                assert!(
                    verify_constraint(orig, &back, Norm::Linf, eps, true).unwrap(),
                    "quantized ball violated"
                );
                quantized += 1;
            }
        }
    }
    println!(
        "RES crit3 continuous {checked} quantized {quantized} ok ({:.0}s)",
        t3.elapsed().as_secs_f64()
    );

    // Criterion 8: post-attack accuracy, undegraded vs JPEG q30, at 8/255.
    for (d, det) in prep.detectors.iter().enumerate() {
        let adv = &pgd[d][grid.len() - 1];
        let plain: Vec<ScoredSample> = scored(adv);
        let mut degraded = Vec::new();
        for r in adv {
            let img = degrade(&r.adversarial, &Degradation::Jpeg { quality: 30 }).unwrap();
            degraded.push(ScoredSample {
                score: det.score(&img).unwrap(),
                label: r.label,
                id: r.original_id.clone(),
            });
        }
        let before = accuracy_at_threshold(&plain, det.threshold()).unwrap();
        let after = accuracy_at_threshold(&degraded, det.threshold()).unwrap();
        println!(
            "RES crit8 {} adv-acc plain {before:.4} jpeg30 {after:.4} gain {:+.4}",
            det.name(),
            after - before
        );
    }
    // Blur-grid benign accuracy trend.
    let bench: Vec<&LabeledImage> = prep.eval.iter().take(200).collect();
    for det in &prep.detectors {
        let mut curve = Vec::new();
        for sigma in blur_sigma_grid() {
            let mut ss = Vec::new();
            for img in &bench {
                let blurred = degrade(&img.pixels, &Degradation::Blur { sigma }).unwrap();
                ss.push(ScoredSample {
                    score: det.score(&blurred).unwrap(),
                    label: img.label,
                    id: img.id.clone(),
                });
            }
            curve.push(accuracy_at_threshold(&ss, det.threshold()).unwrap());
        }
        let upticks = curve.windows(2).filter(|w| w[1] > w[0] + 1e-9).count();
        let pretty: Vec<String> = curve.iter().map(|a| format!("{a:.3}")).collect();
        println!("RES crit8 {} blur curve [{}] upticks {upticks}/9", det.name(), pretty.join(" "));
    }

    // Criterion 7: transfer-family gap at BIM 8/255 over three corpus seeds.
    let mut within_all = Vec::new();
    let mut cross_all = Vec::new();
    for corpus_seed in [101u64, 102, 103] {
        let t = Instant::now();
        let mut tcfg = ExperimentConfig::default();
        tcfg.corpus = crate::harness::CorpusSource::Synthetic(CorpusSpec {
            n_real: 500,
            n_fake: 500,
            seed: corpus_seed,
            ..CorpusSpec::default()
        });
        tcfg.transfer = vec![AttackGrid::new(Method::Bim, Norm::Linf, vec![8.0 / 255.0])];
        tcfg.eval_attack_subset = 32;
        tcfg.output_dir = dir.path().join(format!("t{corpus_seed}"));
        let (_, matrices) = run_transfer_matrix(&tcfg).unwrap();
        let m = &matrices[0];
        let family =
            |name: &str| if name.starts_with("feature_probe") { 0 } else { 1 };
        let (mut within, mut cross) = (Vec::new(), Vec::new());
        for i in 0..m.detectors.len() {
            for j in 0..m.detectors.len() {
                if i == j {
                    continue;
                }
                let v = m.asr[i][j].unwrap();
                if family(&m.detectors[i]) == family(&m.detectors[j]) {
                    within.push(v);
                } else {
                    cross.push(v);
                }
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "RES crit7 seed {corpus_seed}: within {:.4} cross {:.4} gap {:+.4} ({:.0}s)",
            avg(&within),
            avg(&cross),
            avg(&within) - avg(&cross),
            t.elapsed().as_secs_f64()
        );
        within_all.extend(within);
        cross_all.extend(cross);
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "RES crit7 aggregate: within {:.4} cross {:.4} gap {:+.4}",
        avg(&within_all),
        avg(&cross_all),
        avg(&within_all) - avg(&cross_all)
    );
}

/// Supervised adversarial training of the whole probe (extractor + head,
/// labels, BCE). Strictly more informed than the unsupervised drift
/// objective; its attacked AUC is an upper-bound feasibility oracle.
fn supervised_at(
    det: &Detector,
    pool: &[LabeledImage],
    epochs: usize,
    eps: f64,
    steps: usize,
    lr: f64,
) -> Detector {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    let mut out = det.clone();
    let names: Vec<String> = out.graph.param_names();
    let sizes: BTreeMap<String, usize> =
        names.iter().map(|n| (n.clone(), out.graph.param_value(n).unwrap().len())).collect();
    let mut m: BTreeMap<String, Vec<f64>> =
        names.iter().map(|n| (n.clone(), vec![0.0; sizes[n]])).collect();
    let mut v = m.clone();
    let mut t = 0i32;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let batch = 16;

    for _ep in 0..epochs {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch) {
            let mut sums: BTreeMap<String, Vec<f64>> =
                names.iter().map(|n| (n.clone(), vec![0.0; sizes[n]])).collect();
            for &i in chunk {
                let img = &pool[i];
                let target = img.label.target();
                let mut x = img.pixels.clone();
                for (xv, ov) in x.data_mut().iter_mut().zip(img.pixels.data()) {
                    *xv = (*ov + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
                }
                for _ in 0..steps {
                    let (_, _, g) = out.loss_input_gradient(&x, target).unwrap();
                    for ((xv, gv), ov) in
                        x.data_mut().iter_mut().zip(g.data()).zip(img.pixels.data())
                    {
                        *xv = (*xv + 0.5 * eps * gv.signum()).clamp(ov - eps, ov + eps).clamp(0.0, 1.0);
                    }
                }
                let tt = Tensor::new(vec![1], vec![target]).unwrap();
                let feeds = [(out.input, &x), (out.target, &tt)];
                let grads = out.graph.backward_grad(out.loss, &feeds).unwrap();
                for n in &names {
                    if let Some(g) = grads.params.get(n) {
                        for (s, gv) in sums.get_mut(n).unwrap().iter_mut().zip(g.data()) {
                            *s += gv;
                        }
                    }
                }
            }
            t += 1;
            let scale = 1.0 / chunk.len() as f64;
            let bc1 = 1.0 - 0.9f64.powi(t);
            let bc2 = 1.0 - 0.999f64.powi(t);
            for n in &names {
                let (mn, vn) = (m.get_mut(n).unwrap(), v.get_mut(n).unwrap());
                let sn = &sums[n];
                for (k, (mi, vi)) in mn.iter_mut().zip(vn.iter_mut()).enumerate() {
                    let g = sn[k] * scale;
                    *mi = 0.9 * *mi + 0.1 * g;
                    *vi = 0.999 * *vi + 0.001 * g * g;
                }
                let (mn, vn) = (&m[n], &v[n]);
                let mut k = 0;
                out.graph
                    .update_param(n, |p| {
                        for pv in p.iter_mut() {
                            *pv -= lr * (mn[k] / bc1) / ((vn[k] / bc2).sqrt() + 1e-8);
                            k += 1;
                        }
                    })
                    .unwrap();
            }
        }
    }
    out
}

#[test]
#[ignore]
fn probe_v3() {
    let w = world();
    let base = build_feature_probe(11, DEFAULT_FEATURE_DIM).unwrap();
    let tc = TrainConfig { seed: 11, ..TrainConfig::shipped(Family::FeatureProbe) };
    let trained = train_detector(&base, &w.train, &tc).unwrap();
    report("undef", &trained, &w);

    // Upper bound: supervised AT at 2/255, everything trainable.
    let pool: Vec<LabeledImage> = w.train.iter().take(512).cloned().collect();
    let t = Instant::now();
    let at = supervised_at(&trained, &pool, 12, 2.0 / 255.0, 7, 1e-3);
    println!("RES at train {:.0}s", t.elapsed().as_secs_f64());
    report("at eps2 supervised", &at, &w);

    // Gray-box diagnostic: craft on undefended, rescore on a standard R2.
    let r2cfg = RobustFinetuneConfig { outer_epochs: 16, lr: 0.003, ..RobustFinetuneConfig::r2(0) };
    let t = Instant::now();
    let r2 = robust_finetune(&trained, &w.pool, &r2cfg).unwrap();
    println!("RES r2 std16 ft {:.0}s", t.elapsed().as_secs_f64());
    report("r2 std16 whitebox", &r2, &w);
    for eps in [1.0, 2.0] {
        let cfg = AttackConfig::pgd(Norm::Linf, eps / 255.0, 99);
        let results = attack_batch(&trained, &w.subset, &cfg).unwrap();
        let on_undef = auc_roc(&scored(&results)).unwrap();
        let rescored: Vec<ScoredSample> = results
            .iter()
            .map(|r| ScoredSample {
                score: r2.score(&r.adversarial).unwrap(),
                label: r.label,
                id: r.original_id.clone(),
            })
            .collect();
        let on_r2 = auc_roc(&rescored).unwrap();
        println!("RES graybox eps {eps}: undef {on_undef:.4} r2-as-target {on_r2:.4}");
    }
}

#[test]
#[ignore]
fn probe_v2() {
    let w = world();

    // Base probe (shipped init), trained head.
    let t0 = Instant::now();
    let base = build_feature_probe(11, DEFAULT_FEATURE_DIM).unwrap();
    let tc = TrainConfig { seed: 11, ..TrainConfig::shipped(Family::FeatureProbe) };
    let trained = train_detector(&base, &w.train, &tc).unwrap();
    println!("RES base train {:.0}s", t0.elapsed().as_secs_f64());
    report("undef zero-bias", &trained, &w);

    // P2: cheap inner attack, many more epochs, same architecture.
    let cheap_long = RobustFinetuneConfig {
        inner_steps: 3,
        inner_relative_step: 0.5,
        outer_epochs: 100,
        lr: 0.005,
        ..RobustFinetuneConfig::r2(0)
    };
    finetune_report("r2 zero-bias cheap-long", &trained, &w, &cheap_long);

    // P1: random negative biases on conv2 -> thresholded comparator units.
    for tau in [0.75, 1.25] {
        let mut det = build_feature_probe(11, DEFAULT_FEATURE_DIM).unwrap();
        let means = feature_means(&det, &w, 64);
        // E[relu(z)] ~ 0.4 sigma for centered z, so sigma ~ 2.5 * mean.
        let biases: Vec<f64> = means.iter().map(|m| -tau * 2.5 * m).collect();
        det.graph
            .set_param("conv2.b", Tensor::new(vec![DEFAULT_FEATURE_DIM], biases).unwrap())
            .unwrap();
        let trained = train_detector(&det, &w.train, &tc).unwrap();
        report(&format!("undef tau {tau}"), &trained, &w);
        finetune_report(
            &format!("r2 tau {tau} std"),
            &trained,
            &w,
            &RobustFinetuneConfig { outer_epochs: 32, lr: 0.003, ..RobustFinetuneConfig::r2(0) },
        );
        finetune_report(&format!("r2 tau {tau} cheap-long"), &trained, &w, &cheap_long);
    }
}
