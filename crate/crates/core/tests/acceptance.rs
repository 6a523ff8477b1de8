//! Acceptance checks, one line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 3 7`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cinema_core::autograd::{gradcheck, Graph};
use cinema_core::backbone::{apply_mask, masked_mse, sample_mask, MaeModel, MaskPattern, ModelConfig, ViewSpec};
use cinema_core::cli::PhantomSetConfig;
use cinema_core::dataio::{preprocess_study, PreprocessConfig};
use cinema_core::heads::{
    bce_with_logits, ce_label_smooth, dice_ce, encode_full, gaussian_heatmap, heatmap_loss, mse, one_hot, wing_loss,
    LinearHead, UnetrHead, WING_EPS, WING_W,
};
use cinema_core::metrics::{dice, ef_from_series, gls, hd95, heatmap_to_landmarks, lv_length, mapse, VolumeSeries};
use cinema_core::nn::ParamStore;
use cinema_core::phantom::{analytic_ground_truth, generate_study};
use cinema_core::stats::{
    bootstrap_compare, cox_fit, disparity_curve, disparity_ratio, ols_fit, write_records, CoxOptions, Group,
    Significance, SubjectRecord,
};
use cinema_core::study::View;
use cinema_core::training::{
    build_samples, evaluate, finetune, fixed_eval_loss, pretrain, Arm, FinetuneConfig, PretrainState, Task,
    TrainConfig,
};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

/// Outcome of one criterion: pass flag and a short measurement summary.
type Check = (bool, String);

fn tiny() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        encoder_depth: 2,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        conv_channels: [4, 8],
        views: vec![ViewSpec::new(View::Sax, [32, 16, 2]), ViewSpec::new(View::Lax4c, [32, 32, 1])],
        mask_ratio: 0.5,
        sax_conv3d: false,
    }
}

fn images(cfg: &ModelConfig, seed: u64) -> Vec<ArrayD<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfg.views.iter().map(|s| ArrayD::from_shape_fn(IxDyn(&s.input_shape()), |_| rng.random::<f64>())).collect()
}

fn token_bookkeeping() -> Check {
    let cfg = ModelConfig::base();
    let sax = cfg.spec(View::Sax).expect("sax view").n_tokens();
    let lax: Vec<usize> = cfg.views.iter().filter(|s| s.view.is_lax()).map(|s| s.n_tokens()).collect();
    let mut masked = Vec::new();
    for seed in 0..20 {
        let m = sample_mask(256, 0.75, &mut ChaCha8Rng::seed_from_u64(seed));
        masked.push(m.iter().filter(|&&b| b).count());
    }
    let ok = sax == 2304 && !lax.is_empty() && lax.iter().all(|&n| n == 256) && masked.iter().all(|&n| n == 192);
    (ok, format!("sax tokens {sax}, lax tokens {lax:?}, masked {} of 256", masked[0]))
}

fn parameter_budget() -> Check {
    let model = MaeModel::new(&ModelConfig::base(), 0).expect("base model");
    let n = model.store.num_params();
    let rel = (n as f64 - 126e6) / 126e6;
    (rel.abs() <= 0.15, format!("{n} parameters ({:+.1}% of 126M)", rel * 100.0))
}

fn mask_non_leakage() -> Check {
    let cfg = tiny();
    let m = MaeModel::new(&cfg, 0).expect("model");
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let pattern = MaskPattern::sample(&cfg, 0.75, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = images(&cfg, 100 + seed);
        let noise = images(&cfg, 200 + seed);
        let b: Vec<ArrayD<f64>> = cfg
            .views
            .iter()
            .enumerate()
            .map(|(v, spec)| {
                let keep = apply_mask(&ArrayD::from_elem(IxDyn(&spec.input_shape()), 1.0), &pattern.masks[v], spec).unwrap();
                &a[v] * &keep + &(&noise[v] * 100.0 * &keep.mapv(|k| 1.0 - k))
            })
            .collect();
        let run = |imgs: &[ArrayD<f64>]| {
            let mut g = Graph::with_params(&m.store);
            let out = m.encoder.forward(&mut g, imgs, &pattern).unwrap();
            g.value(out.tokens).clone()
        };
        let d = (run(&a) - run(&b)).iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        worst = worst.max(d);
    }
    (worst <= 1e-6, format!("max encoder output change {worst:.3e} over 5 masks"))
}

fn gradient_fidelity() -> Check {
    let cfg = tiny();
    let mut m = MaeModel::new(&cfg, 11).expect("model");
    let imgs = images(&cfg, 12);
    let pattern = MaskPattern::sample(&cfg, 0.5, &mut ChaCha8Rng::seed_from_u64(13));
    let (encoder, decoder) = (m.encoder.clone(), m.decoder.clone());
    let mae = gradcheck::check_params(
        &mut m.store,
        |g| {
            let enc = encoder.forward(g, &imgs, &pattern).unwrap();
            let rec = decoder.forward(g, &encoder, &enc, &pattern).unwrap();
            masked_mse(g, &rec, &imgs, &pattern, &cfg.views).unwrap()
        },
        1e-5,
        Some(6),
        0,
    );
    let mae_all = mae.params_checked == m.store.len();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let enc = cinema_core::backbone::MultiViewEncoder::new(&mut store, &mut rng, &cfg).unwrap();
    let seg = UnetrHead::new(&mut store, &mut rng, "head/seg", &enc, View::Sax, [2, 3, 3, 4], 4).unwrap();
    let heat = UnetrHead::new(&mut store, &mut rng, "head/heat", &enc, View::Lax4c, [2, 3, 3, 4], 3).unwrap();
    let cls = LinearHead::new(&mut store, &mut rng, "head/cls", cfg.embed_dim, 3);
    let bin = LinearHead::new(&mut store, &mut rng, "head/bin", cfg.embed_dim, 1);
    let reg = LinearHead::new(&mut store, &mut rng, "head/reg", cfg.embed_dim, 1);
    let coord = LinearHead::new(&mut store, &mut rng, "head/coord", cfg.embed_dim, 6);
    let imgs = images(&cfg, 4);
    let seg_target =
        one_hot(ArrayD::from_shape_fn(IxDyn(&[2, 32, 16]), |d| ((d[1] / 4 + d[2] / 5 + d[0]) % 4) as u8).view(), 4);
    let heat_target = gaussian_heatmap(&[[3.0, 5.0], [10.0, 20.0], [8.0, 30.0]], [32, 32], [1.0, 1.0], 3.0)
        .unwrap()
        .into_shape_with_order(IxDyn(&[3, 1, 32, 32]))
        .unwrap();
    let coord_target = ArrayD::from_shape_vec(IxDyn(&[6]), vec![3.0, -12.0, 0.5, 4.0, 20.0, -1.0]).unwrap();
    let heads = gradcheck::check_params(
        &mut store,
        |g| {
            let out = encode_full(g, &enc, &imgs).unwrap();
            let y = seg.forward(g, &enc, &out, &imgs[0]).unwrap();
            let mut total = dice_ce(g, y, &seg_target);
            let y = heat.forward(g, &enc, &out, &imgs[1]).unwrap();
            let l = heatmap_loss(g, y, &heat_target);
            total = g.add(total, l);
            let y = cls.forward(g, &enc, &out);
            let l = ce_label_smooth(g, y, 2, 0.1);
            total = g.add(total, l);
            let y = bin.forward(g, &enc, &out);
            let l = bce_with_logits(g, y, &ArrayD::from_elem(IxDyn(&[1]), 1.0));
            total = g.add(total, l);
            let y = reg.forward(g, &enc, &out);
            let l = mse(g, y, &ArrayD::from_elem(IxDyn(&[1]), 0.6));
            total = g.add(total, l);
            let y = coord.forward(g, &enc, &out);
            let y = g.scale(y, 10.0);
            let l = wing_loss(g, y, &coord_target, WING_W, WING_EPS);
            g.add(total, l)
        },
        1e-5,
        Some(4),
        0,
    );
    let heads_all = heads.params_checked == store.len();
    let worst = mae.max_rel_err.max(heads.max_rel_err);
    (
        worst < 1e-4 && mae_all && heads_all,
        format!(
            "max rel err {worst:.2e} (autoencoder {:.2e} over {} tensors, heads and losses {:.2e} over {} tensors)",
            mae.max_rel_err, mae.params_checked, heads.max_rel_err, heads.params_checked
        ),
    )
}

fn learning_sanity() -> Check {
    let set: PhantomSetConfig =
        serde_json::from_value(serde_json::json!({"version": 1, "n_studies": 16, "seed": 0})).unwrap();
    let pc = PreprocessConfig::default();
    let studies: Vec<_> = (0..16)
        .map(|i| {
            let (p, id) = set.study_params(i);
            preprocess_study(&generate_study(&p, &id).unwrap(), &pc).unwrap()
        })
        .collect();
    let cfg = ModelConfig::desk();

    let mut tc = TrainConfig::pretrain();
    tc.epochs = 200;
    tc.warmup_epochs = 10;
    tc.batch_size = 8;
    tc.peak_lr = 3e-3;
    tc.augment.enabled = false;
    let mut state = PretrainState::new(&cfg, &tc).unwrap();
    let before = fixed_eval_loss(&state.model, &studies[..8], 0).unwrap();
    pretrain(&mut state, &studies[..8], None, &mut |_| {}).unwrap();
    let after = fixed_eval_loss(&state.model, &studies[..8], 0).unwrap();
    let reduction = 1.0 - after / before;

    let run = |arm: Arm| {
        let mut ft = FinetuneConfig::new(Task::Segmentation, arm, vec![View::Lax4c], View::Lax4c);
        ft.train.epochs = 100;
        ft.train.warmup_epochs = 5;
        ft.train.validation_frequency = 10;
        ft.train.batch_size = 8;
        ft.train.augment.enabled = false;
        let init = (arm == Arm::FineTune).then_some(&state.model.store);
        let out = finetune(&cfg, &ft, init, &studies[..10], &studies[10..12], &mut |_| {}).unwrap();
        let samples = build_samples(&studies[12..], &out.model.config, &ft).unwrap();
        evaluate(&out.model, &samples).unwrap().1
    };
    let tuned = run(Arm::FineTune);
    let scratch = run(Arm::RandInit);
    (
        reduction >= 0.90 && tuned >= 0.90 && tuned >= scratch,
        format!(
            "masked MSE {before:.4} -> {after:.4} ({:.1}% reduction), held-out Dice fine-tuned {tuned:.4}, random init {scratch:.4}",
            reduction * 100.0
        ),
    )
}

fn ef_pipeline() -> Check {
    let set: PhantomSetConfig = serde_json::from_value(serde_json::json!({
        "version": 1, "n_studies": 5, "seed": 3,
        "base": {
            "lv_semi_axes_ed": [24.0, 24.0, 40.0], "contraction": 0.8, "wall_thickness": 6.0, "rv_offset": 26.0,
            "base_plane_z_ed": 32.0, "base_plane_z_es": 22.0, "n_phases": 12, "noise_sigma": 0.0, "seed": 0,
            "sax_size": [96, 96, 56], "sax_spacing": [1.0, 1.0, 2.0], "lax_size": [96, 112], "lax_spacing": [1.0, 1.0]
        }
    }))
    .unwrap();
    let mut worst = 0.0f64;
    let mut phases_ok = true;
    for i in 0..set.n_studies {
        let (p, id) = set.study_params(i);
        let gt = analytic_ground_truth(&p).unwrap();
        let study = generate_study(&p, &id).unwrap();
        let sax = study.view(View::Sax).unwrap();
        let series = VolumeSeries::from_masks(sax.mask.as_ref().unwrap().view(), sax.spacing).unwrap();
        let s = ef_from_series(&series.lv).unwrap();
        worst = worst.max((s.ef - gt.ef).abs());
        phases_ok &= s.ed_phase == gt.ed_phase && s.es_phase == gt.es_phase;
    }
    (worst <= 2.0 && phases_ok, format!("max |EF error| {worst:.3} points over 5 phantoms, ED/ES phases recovered: {phases_ok}"))
}

/// Face-connected boundary and exhaustive nearest-neighbour distances.
fn brute_hd95(a: &ArrayD<bool>, b: &ArrayD<bool>) -> f64 {
    let n = a.shape()[0] as isize;
    let edge = |m: &ArrayD<bool>| -> Vec<[f64; 3]> {
        let at = |i: isize, j: isize, k: isize| {
            (0..n).contains(&i) && (0..n).contains(&j) && (0..n).contains(&k) && m[[i as usize, j as usize, k as usize]]
        };
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let nbrs = [(i - 1, j, k), (i + 1, j, k), (i, j - 1, k), (i, j + 1, k), (i, j, k - 1), (i, j, k + 1)];
                    if at(i, j, k) && nbrs.iter().any(|&(x, y, z)| !at(x, y, z)) {
                        pts.push([i as f64, j as f64, k as f64]);
                    }
                }
            }
        }
        pts
    };
    let (pa, pb) = (edge(a), edge(b));
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter().map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).collect();
    d.extend(pb.iter().map(|p| nearest(p, &pa)));
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 100 {
        let density = rng.random_range(0.05..0.6);
        let a = ArrayD::from_shape_fn(IxDyn(&[16, 16, 16]), |_| (rng.random::<f64>() < density) as u8);
        let b = ArrayD::from_shape_fn(IxDyn(&[16, 16, 16]), |_| (rng.random::<f64>() < density) as u8);
        if !a.iter().any(|&v| v == 1) || !b.iter().any(|&v| v == 1) {
            continue;
        }
        let fast = hd95(a.view(), b.view(), 1, &[1.0; 3]).unwrap();
        let slow = brute_hd95(&a.mapv(|v| v == 1), &b.mapv(|v| v == 1));
        worst = worst.max((fast - slow).abs());
        cases += 1;
    }

    let mut hand = Vec::new();
    // 100-voxel region against its first half: 2 * 50 / 150
    let full = ArrayD::from_elem(IxDyn(&[10, 10]), 3u8);
    let half = ArrayD::from_shape_fn(IxDyn(&[10, 10]), |d| if d[0] < 5 { 3u8 } else { 0 });
    hand.push(("dice", dice(full.view(), half.view(), 3).unwrap(), 2.0 / 3.0));
    hand.push(("dice of empty regions", dice(half.view(), half.view(), 1).unwrap(), 1.0));
    // valves move 4 mm and 2 mm
    let ed = [[0.0, 0.0], [2.0, 0.0], [1.0, 4.0]];
    let es = [[0.0, 4.0], [2.0, 2.0], [1.0, 4.0]];
    hand.push(("mapse", mapse(&ed, &es), 3.0));
    hand.push(("lv length", lv_length(&ed), 4.0));
    hand.push(("gls", gls(100.0, 80.0).unwrap(), 20.0));
    let maps = gaussian_heatmap(&[[4.0, 6.0], [10.0, 2.0], [0.0, 0.0]], [8, 8], [2.0, 2.0], 3.0).unwrap();
    hand.push(("heatmap peak", maps[[0, 2, 3]], 1.0));
    hand.push(("heatmap one pixel off", maps[[0, 3, 3]], (-1.0f64 / 18.0).exp()));
    let decoded = heatmap_to_landmarks(maps.view(), [2.0, 2.0]);
    hand.push(("decoded landmark x", decoded.points[1][0], 10.0));
    hand.push(("decoded landmark y", decoded.points[1][1], 2.0));
    let mut shifted = ArrayD::<u8>::zeros(IxDyn(&[20, 20, 20]));
    let mut box_a = shifted.clone();
    for i in 4..10 {
        for j in 4..12 {
            for k in 5..9 {
                box_a[[i, j, k]] = 1;
                shifted[[i + 3, j, k]] = 1;
            }
        }
    }
    hand.push(("hd95 of a 3-voxel shift", hd95(box_a.view(), shifted.view(), 1, &[1.0; 3]).unwrap(), 3.0));
    let failed: Vec<String> =
        hand.iter().filter(|(_, got, want)| (got - want).abs() > 1e-12).map(|(n, got, want)| format!("{n}: {got} != {want}")).collect();
    (
        worst <= 1e-9 && failed.is_empty(),
        format!("hd95 max deviation {worst:.1e} over 100 random 16^3 pairs, {} hand examples, mismatches {failed:?}", hand.len()),
    )
}

fn statistics_recovery() -> Check {
    const BETA: f64 = -0.41;
    let mut covered = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let n = 10_000;
        let noise = Normal::new(0.0, 2.0).unwrap();
        let x = Array2::from_shape_fn((n, 4), |(_, j)| match j {
            0 => (rng.random::<f64>() < 0.3) as u8 as f64,
            1 => rng.random_range(40.0..80.0),
            2 => rng.random_range(0..2) as f64,
            _ => rng.random_range(18.0..35.0),
        });
        let y: Vec<f64> = (0..n)
            .map(|i| 55.0 + BETA * x[[i, 0]] - 0.05 * x[[i, 1]] + 1.5 * x[[i, 2]] + 0.1 * x[[i, 3]] + noise.sample(&mut rng))
            .collect();
        let fit = ols_fit(&y, &x, &["disease", "age", "sex", "bmi"]).unwrap();
        let c = fit.get("disease").unwrap();
        covered += (c.ci_low <= BETA && BETA <= c.ci_high) as usize;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 5000;
    let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { (i % 2) as f64 } else { rng.random_range(-1.0..1.0) });
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for i in 0..n {
        let rate = 0.1 * (2f64.ln() * x[[i, 0]] + 0.5 * x[[i, 1]]).exp();
        let t = Exp::new(rate).unwrap().sample(&mut rng);
        let c = Exp::new(0.03).unwrap().sample(&mut rng);
        time.push(t.min(c));
        event.push(t <= c);
    }
    let cox = cox_fit(&time, &event, &x, &["group", "z"], CoxOptions::default()).unwrap();
    let cox_beta = cox.coefficients[0].beta;

    let base: Vec<f64> = (0..50).map(|_| 0.85 + 0.05 * rng.random::<f64>()).collect();
    let shifted: Vec<f64> = base.iter().map(|v| v + 0.05).collect();
    let same = bootstrap_compare("dice", &base, &base, 100, 0).unwrap().significance;
    let apart = bootstrap_compare("dice", &base, &shifted, 100, 0).unwrap().significance;

    (
        covered >= 95 && (cox_beta - 2f64.ln()).abs() <= 0.1 && same == Significance::Ns && apart == Significance::P001,
        format!(
            "OLS interval covered -0.41 in {covered}/100 trials, Cox log HR {cox_beta:.4} (ln 2 = {:.4}), identical arms {}, shifted arms {}",
            2f64.ln(),
            serde_json::to_string(&same).unwrap(),
            serde_json::to_string(&apart).unwrap()
        ),
    )
}

fn fairness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 10_000;
    let values: Vec<f64> = (0..n).map(|_| Normal::new(60.0, 8.0).unwrap().sample(&mut rng)).collect();
    let groups: Vec<Group> = (0..n).map(|_| if rng.random::<f64>() < 0.7 { Group::White } else { Group::NonWhite }).collect();
    let curve = disparity_curve(&values, &groups).unwrap();
    let worst = curve.iter().fold(0.0f64, |a, p| a.max((p.ratio - 1.0).abs()));
    let swapped: Vec<Group> = groups.iter().map(|g| g.other()).collect();
    let mut recip = 0.0f64;
    for p in &curve {
        let q = disparity_ratio(&values, &swapped, p.percentile).unwrap();
        recip = recip.max((p.ratio * q.ratio - 1.0).abs());
    }
    let qs: Vec<f64> = curve.iter().map(|p| p.percentile).collect();
    (
        worst <= 0.05 && recip < 1e-12 && qs.first() == Some(&25.0) && qs.last() == Some(&75.0),
        format!("max |ratio - 1| {worst:.4} over {} percentiles, max |r * r_swapped - 1| {recip:.1e}", qs.len()),
    )
}

const MODEL: &str = r#"{"embed_dim": 16, "encoder_depth": 2, "encoder_heads": 2, "decoder_dim": 16, "decoder_depth": 1,
 "decoder_heads": 2, "mlp_ratio": 2, "conv_channels": [8, 8], "mask_ratio": 0.5,
 "views": [{"view": "sax", "size": [32, 32, 2]}, {"view": "lax4c", "size": [32, 32, 1]}]}"#;

fn write_configs(dir: &Path) {
    let w = |name: &str, text: String| fs::write(dir.join(name), text).unwrap();
    w(
        "phantom.json",
        r#"{"version": 1, "n_studies": 6, "seed": 1, "base": {"lv_semi_axes_ed": [14.0, 14.0, 26.0], "contraction": 0.8,
 "wall_thickness": 6.0, "rv_offset": 18.0, "base_plane_z_ed": 20.0, "base_plane_z_es": 10.0, "n_phases": 4,
 "noise_sigma": 0.02, "seed": 0}}"#
            .into(),
    );
    w("grid.json", r#"{"version": 1, "sax": {"spacing": [3.0, 3.0, 20.0], "size": [32, 32, 2]}, "lax": {"spacing": [3.0, 3.0], "size": [32, 32]}}"#.into());
    w(
        "pretrain.json",
        format!(
            r#"{{"version": 1, "model": {MODEL}, "train": {{"task": "pretrain", "epochs": 4, "warmup_epochs": 1, "peak_lr": 0.001,
 "end_lr": 1e-05, "batch_size": 4, "weight_decay": 0.05, "grad_clip_norm": 5.0, "seed": 0}}}}"#
        ),
    );
    for arm in ["fine_tune", "rand_init"] {
        w(
            &format!("{arm}.json"),
            format!(
                r#"{{"version": 1, "model": {MODEL}, "finetune": {{"train": {{"task": "segmentation", "epochs": 4, "warmup_epochs": 1,
 "peak_lr": 0.001, "end_lr": 1e-05, "batch_size": 2, "weight_decay": 0.05, "grad_clip_norm": 5.0,
 "validation_frequency": 2, "seed": 0}}, "arm": "{arm}", "views": ["sax", "lax4c"], "target_view": "lax4c"}},
 "split": {{"n_val": 1, "n_test": 2}}}}"#
            ),
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<SubjectRecord> = (0..200)
        .map(|i| {
            let disease = (rng.random::<f64>() < 0.3) as u8;
            SubjectRecord {
                id: format!("r{i:03}"),
                age: rng.random_range(40.0..80.0),
                sex: rng.random_range(0..2),
                bmi: rng.random_range(18.0..35.0),
                disease,
                time: rng.random_range(0.5..10.0),
                event: (rng.random::<f64>() < 0.4) as u8,
                group: if rng.random::<f64>() < 0.6 { Group::White } else { Group::NonWhite },
                metrics: [("lvef".to_string(), 60.0 - 5.0 * disease as f64 + rng.random_range(-4.0..4.0))].into(),
            }
        })
        .collect();
    write_records(&records, &dir.join("records.csv")).unwrap();
}

/// Run the whole command chain under `root` and return every `results.json` keyed by path.
fn pipeline(root: &Path, cache: Option<&Path>) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    fs::create_dir_all(root).unwrap();
    write_configs(root);
    let steps: Vec<Vec<&str>> = vec![
        vec!["phantom", "generate", "--config", "phantom.json", "--out", "raw"],
        vec!["data", "preprocess", "--in", "raw", "--out", "data", "--grid", "grid.json"],
        vec!["train", "pretrain", "--config", "pretrain.json", "--data", "data", "--out", "pre"],
        vec!["train", "finetune", "--config", "fine_tune.json", "--data", "data", "--out", "ft", "--checkpoint", "pre/checkpoint.cmrc", "--seeds", "0,1"],
        vec!["train", "finetune", "--config", "rand_init.json", "--data", "data", "--out", "ri", "--seeds", "0,1"],
        vec!["eval", "--pred", "ft", "--gt", "data", "--out", "eval_ft"],
        vec!["eval", "--pred", "ri", "--gt", "data", "--out", "eval_ri"],
        vec!["report", "--runs", "eval_ft", "eval_ri", "--out", "report", "--n-boot", "50"],
        vec!["analyze", "assoc", "--records", "records.csv", "--metric", "lvef", "--out", "assoc"],
        vec!["analyze", "survival", "--records", "records.csv", "--metric", "lvef", "--out", "survival"],
        vec!["analyze", "disparity", "--records", "records.csv", "--metric", "lvef", "--out", "disparity"],
    ];
    for args in &steps {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cinema"));
        cmd.args(args).current_dir(root);
        match cache {
            Some(c) => cmd.env("CINEMA_CACHE", c),
            None => cmd.env_remove("CINEMA_CACHE"),
        };
        let out = cmd.output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    let mut results = Vec::new();
    for step in ["raw", "data", "pre", "ft", "ri", "eval_ft", "eval_ri", "report", "assoc", "survival", "disparity"] {
        let p = PathBuf::from(step).join("results.json");
        let bytes = fs::read(root.join(&p)).map_err(|e| format!("{}: {e}", p.display()))?;
        results.push((p, bytes));
    }
    Ok(results)
}

fn reproducibility() -> Check {
    let tmp = tempfile::tempdir().unwrap();
    let first = pipeline(&tmp.path().join("a"), None);
    let second = pipeline(&tmp.path().join("b"), Some(&tmp.path().join("cache")));
    match (first, second) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<String> =
                a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.display().to_string()).collect();
            let bytes: usize = a.iter().map(|(_, b)| b.len()).sum();
            (
                differing.is_empty() && a.len() == b.len(),
                format!("{} results.json files ({bytes} bytes) compared across two runs, differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => (false, e),
    }
}

fn main() {
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Duration, fn() -> Check); 10] = [
        (1, "token and mask bookkeeping", Duration::from_secs(1), token_bookkeeping),
        (2, "parameter budget", Duration::from_secs(10), parameter_budget),
        (3, "mask non-leakage", Duration::from_secs(30), mask_non_leakage),
        (4, "gradient fidelity", Duration::from_secs(300), gradient_fidelity),
        (5, "learning sanity", Duration::from_secs(1800), learning_sanity),
        (6, "EF pipeline", Duration::from_secs(60), ef_pipeline),
        (7, "metric oracles", Duration::from_secs(120), metric_oracles),
        (8, "statistics recovery", Duration::from_secs(300), statistics_recovery),
        (9, "fairness machinery", Duration::from_secs(60), fairness),
        (10, "reproducibility", Duration::from_secs(1800), reproducibility),
    ];
    let mut failures = 0;
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(e) => (false, format!("panicked: {}", e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())),
        };
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = ok && in_time;
        failures += !pass as usize;
        println!(
            "criterion {id:>2} {}: {name}: {detail}; {:.1} s (limit {} s{})",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
