//! One PASS/FAIL line per acceptance criterion; exits nonzero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use frtm::features::extract_handcrafted_features;
use frtm::frame::LabelMask;
use frtm::memory::{InitialWeighting, Sample, SampleMemory};
use frtm::metrics::{boundary_f, evaluate_sequence, jaccard, EvalOptions};
use frtm::model::init_weights;
use frtm::optim::{cg_solve, gn_step, optimize, pack, pixel_weight_mask, FreeSet, OptimizerSchedule, Phase, Preset};
use frtm::pipeline::{run_sequence, FeatureSource, PipelineConfig, Tracker};
use frtm::tensor::{
    bilinear_upsample, bilinear_upsample_adjoint, conv2d, conv2d_adjoint, kernel_grad_adjoint, BilinearUpsampler,
    KernelShape, ScoreMap,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn solver_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1001);
    let mut worst = 0.0f64;
    let n = 24;
    for trial in 0..n {
        let stride = [1, 2, 4][trial % 3];
        let (fh, fw) = (r.random_range(2..=8), r.random_range(2..=8));
        let c = r.random_range(1..=4);
        let k = r.random_range(1..=3);
        let mem = random_memory(&mut r, fh, fw, c, stride, fh * stride, fw * stride, k);
        let w = random_weights(&mut r, c, c, 1.0);
        let sched = OptimizerSchedule { cg_residual_tol: 1e-12, ..OptimizerSchedule::default_preset() };
        let stepped = gn_step(&w, &mem, &sched, 500, FreeSet::W2Only).map_err(|e| e.to_string())?;
        let (a, y, cw) = w2_design(&w, &mem, sched.kappa_min);
        let ridge = dense_ridge(&a, &y, &cw, sched.lambda2);
        worst = worst.max(vec_rel_err(&pack(&stepped, FreeSet::W2Only), ridge.as_slice()));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, format!("max relative parameter error {worst:.2e} >= 1e-4"))?;
    ensure(secs < 10.0, format!("took {secs:.1} s"))?;
    Ok(format!("{n} problems, max relative error {worst:.2e}, {secs:.2} s"))
}

fn cg_correctness() -> Outcome {
    let mut r = rng(1002);
    let mut worst = 0.0f64;
    for n in [1, 2, 3, 5, 8, 13, 21, 34, 50] {
        for _ in 0..3 {
            let a = random_spd(&mut r, n);
            let b = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
            let want = dense_solve(&a, &b);
            let out =
                cg_solve(|v| Ok((&a * DVector::from_column_slice(v)).as_slice().to_vec()), b.as_slice(), 4 * n, 1e-12)
                    .map_err(|e| e.to_string())?;
            worst = worst.max(vec_rel_err(&out.solution, want.as_slice()));
        }
    }
    ensure(worst < 1e-6, format!("random SPD error {worst:.2e}"))?;
    let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
    let out = cg_solve(|v| Ok((&a * DVector::from_column_slice(v)).as_slice().to_vec()), &[1.0, 2.0], 2, 1e-12)
        .map_err(|e| e.to_string())?;
    let want = [1.0 / 11.0, 7.0 / 11.0];
    let err = vec_rel_err(&out.solution, &want);
    ensure(err < 1e-6, format!("2x2 example gave {:?}", out.solution))?;
    Ok(format!("max error {worst:.2e} up to 50x50; 2x2 example in {} iterations", out.iterations))
}

fn gn_monotonicity() -> Outcome {
    let mut r = rng(1003);
    let sched = OptimizerSchedule::default_preset();
    let mut worst = f64::NEG_INFINITY;
    let mut shortened = 0;
    for trial in 0..100 {
        let stride = [1, 2, 4][trial % 3];
        let (fh, fw) = (r.random_range(2..7), r.random_range(2..7));
        let (c_in, c) = (r.random_range(1..5), r.random_range(1..5));
        let k = r.random_range(1..4);
        let mem = random_memory(&mut r, fh, fw, c_in, stride, fh * stride, fw * stride, k);
        let w = init_weights(c_in, c, trial as u64).map_err(|e| e.to_string())?;
        let rep = optimize(&w, &mem, &sched, Phase::Initial).map_err(|e| e.to_string())?;
        ensure(rep.losses.len() == 6, "expected 5 GN steps")?;
        for p in rep.losses.windows(2) {
            worst = worst.max(p[1] - p[0]);
        }
        shortened += rep.step_scales.iter().filter(|&&s| s < 1.0).count();
    }
    ensure(worst <= 1e-6, format!("largest loss increase {worst:.2e}"))?;
    Ok(format!("100 problems x 5 steps, largest change {worst:.2e}, {shortened} shortened steps"))
}

fn adjoint_suite() -> Outcome {
    let mut r = rng(1004);
    let mut worst = [0.0f64; 4];
    for trial in 0..100 {
        let (h, w) = (r.random_range(1..9), r.random_range(1..9));
        let (cin, cout) = (r.random_range(1..5), r.random_range(1..5));
        let size = if trial % 2 == 0 { 3 } else { 1 };
        let x = random_map(&mut r, h, w, cin, 1);
        let g = random_map(&mut r, h, w, cout, 1);
        let k = random_kernel(&mut r, cout, cin, size);
        let kx = conv2d(&x, &k).map_err(|e| e.to_string())?;
        let lhs = kx.dot(&g);
        let (nk, ng) = (norm_f32(kx.data()), norm_f32(g.data()));
        let rhs = x.dot(&conv2d_adjoint(&g, &k).map_err(|e| e.to_string())?);
        worst[0] = worst[0].max(dot_test_err(lhs, rhs, nk, ng));
        let grad = kernel_grad_adjoint(&x, &g, KernelShape::of(&k)).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(dot_test_err(lhs, k.dot(&grad), nk, ng));
    }
    for trial in 0..100 {
        let factor = [1, 2, 3, 4, 8, 16][trial % 6];
        let (h, w) = (r.random_range(1..8), r.random_range(1..8));
        let s = ScoreMap::new(h, w, factor, random_vec(&mut r, h * w)).unwrap();
        let g = ScoreMap::new(h * factor, w * factor, 1, random_vec(&mut r, h * w * factor * factor)).unwrap();
        let us = bilinear_upsample(&s, factor).map_err(|e| e.to_string())?;
        let rhs = s.dot(&bilinear_upsample_adjoint(&g, factor).map_err(|e| e.to_string())?);
        worst[2] = worst[2].max(dot_test_err(us.dot(&g), rhs, norm_f32(us.data()), norm_f32(g.data())));
    }
    for trial in 0..100 {
        let factor = [2, 4, 8, 16][trial % 4];
        let (h, w) = (r.random_range(1..6), r.random_range(1..6));
        let out_h = r.random_range((h - 1) * factor + 1..=h * factor);
        let out_w = r.random_range((w - 1) * factor + 1..=w * factor);
        let up = BilinearUpsampler::new(h, w, factor, out_h, out_w).map_err(|e| e.to_string())?;
        let s = random_vec(&mut r, h * w);
        let g = random_vec(&mut r, out_h * out_w);
        let us = up.apply(&s);
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum::<f64>();
        let err = dot_test_err(dot(&us, &g), dot(&s, &up.apply_adjoint(&g)), norm_f32(&us), norm_f32(&g));
        worst[3] = worst[3].max(err);
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    ensure(max < 1e-5, format!("conv / kernel-grad / upsample / cropped: {worst:?}"))?;
    Ok(format!("4 x 100 trials, worst {max:.2e}"))
}

fn pixel_weight_identity() -> Outcome {
    let mut r = rng(1005);
    let mut worst = 0.0f64;
    for trial in 0..500 {
        let (h, w) = (r.random_range(1..24), r.random_range(1..24));
        let p = r.random_range(0.0..1.0);
        let bits = (0..h * w).map(|_| u8::from(r.random_bool(p))).collect();
        let m = LabelMask::new(h, w, bits).unwrap();
        let v = pixel_weight_mask(&m, 0.1).map_err(|e| e.to_string())?;
        let kh = m.count_nonzero() as f64 / (h * w) as f64;
        if kh >= 0.1 {
            ensure(
                v.data().iter().all(|&x| x == 1.0),
                format!("trial {trial}: kappa_hat {kh} but mask is not all ones"),
            )?;
        }
        if kh > 0.0 && kh < 1.0 {
            let total: f64 = v.data().iter().sum();
            let target: f64 = m.data().iter().zip(v.data()).filter(|(l, _)| **l != 0).map(|(_, x)| x).sum();
            worst = worst.max((target / total - kh.max(0.1)).abs());
        }
    }
    ensure(worst < 1e-9, format!("target share off by {worst:.2e}"))?;
    Ok(format!("500 masks, max deviation {worst:.2e}"))
}

fn memory_state_machine() -> Outcome {
    let mut r = rng(1006);
    let sample = |v: f32| Sample {
        features: Arc::new(frtm::tensor::FeatureMap::new(1, 1, 1, 2, vec![v]).unwrap()),
        mask: LabelMask::from_fn(2, 2, |y, _| u8::from(y == 0)),
    };
    let mut evictions = 0;
    for _ in 0..50 {
        let n0 = r.random_range(1..=5);
        let eta = r.random_range(0.01..0.5);
        let mut mem = SampleMemory::init(
            (0..n0).map(|k| sample(k as f32)).collect(),
            InitialWeighting::OriginalDouble,
            eta,
            80,
            1,
        )
        .map_err(|e| e.to_string())?;
        for step in 0..r.random_range(0..200) {
            let full = mem.len() == 80;
            let min = mem.raw_weights().iter().cloned().fold(f64::INFINITY, f64::min);
            let victim = mem.entries()[mem.min_weight_position()].insertion_index();
            let victim_raw = mem.entries()[mem.min_weight_position()].raw_weight();
            let s = sample(step as f32);
            mem.extend(s.features, &s.mask).map_err(|e| e.to_string())?;
            ensure(mem.len() <= 80, format!("memory grew to {}", mem.len()))?;
            if full {
                evictions += 1;
                ensure(victim_raw == min, "evicted entry was not a minimum")?;
                ensure(mem.entries().iter().all(|e| e.insertion_index() != victim), "victim still present")?;
            }
            let sum: f64 = mem.normalized_weights().iter().sum();
            ensure((sum - 1.0).abs() < 1e-9, format!("weights sum to {sum}"))?;
        }
    }
    let mut mem = SampleMemory::init(vec![sample(0.0)], InitialWeighting::OriginalDouble, 0.1, 80, 1).unwrap();
    let s = sample(1.0);
    mem.extend(s.features, &s.mask).unwrap();
    let w = mem.normalized_weights();
    ensure((w[0] - 0.4737).abs() < 1e-4 && (w[1] - 0.5263).abs() < 1e-4, format!("two-sample example {w:?}"))?;
    Ok(format!("50 random runs, {evictions} evictions checked; two-sample weights [{:.4}, {:.4}]", w[0], w[1]))
}

fn synthetic_config() -> PipelineConfig {
    PipelineConfig { feature_source: FeatureSource::Builtin { stride: 8 }, ..PipelineConfig::default() }
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let cfg = synthetic_config();
    let opts = EvalOptions::default();

    let (frames, gts) = single_square_sequence();
    let out = run_sequence(&frames, &gts[0], &cfg).map_err(|e| e.to_string())?;
    let rep = evaluate_sequence("square", &out.masks, &gts, &opts).map_err(|e| e.to_string())?;
    let (j1, f1) = (rep.means.j_mean, rep.means.f_mean);
    ensure(rep.per_object[0].frames == (1..24).collect::<Vec<_>>(), "frames 1..23 not evaluated")?;
    ensure(j1 >= 0.8 && f1 >= 0.7, format!("single object J {j1:.3} F {f1:.3}"))?;

    let (frames, gts) = two_square_sequence();
    let out = run_sequence(&frames, &gts[0], &cfg).map_err(|e| e.to_string())?;
    let rep = evaluate_sequence("two", &out.masks, &gts, &opts).map_err(|e| e.to_string())?;
    let js: Vec<f64> = rep.per_object.iter().map(|o| o.j_mean).collect();
    ensure(js.len() == 2 && js.iter().all(|&j| j >= 0.7), format!("per-object J {js:?}"))?;
    let overlap: usize = out
        .masks
        .iter()
        .map(|m| {
            let (a, b) = (m.object_mask(1), m.object_mask(2));
            a.data().iter().zip(b.data()).filter(|(x, y)| **x != 0 && **y != 0).count()
        })
        .sum();
    ensure(overlap == 0, format!("{overlap} pixels claimed by both objects"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("single J {j1:.3} F {f1:.3}; two-object J {:.3} / {:.3}, no overlap; {secs:.1} s", js[0], js[1]))
}

fn runtime_scaling() -> Outcome {
    let (frames, gts) = single_square_sequence();
    let x0 = Arc::new(extract_handcrafted_features(&frames[0], 8).map_err(|e| e.to_string())?);
    let ns = [5usize, 10, 20];
    let mut medians = Vec::new();
    for &n in &ns {
        let cfg = PipelineConfig { n_initial_samples: n, ..synthetic_config() };
        let mut times: Vec<f64> = (0..5)
            .map(|_| {
                let t = Instant::now();
                Tracker::new(Some(&frames[0]), x0.clone(), &gts[0], &cfg).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<frtm::Result<_>>()
            .map_err(|e| e.to_string())?;
        times.sort_by(f64::total_cmp);
        medians.push(times[2]);
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, medians.iter().sum::<f64>() / 3.0);
    let sxy: f64 = xs.iter().zip(&medians).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ss_res: f64 = xs.iter().zip(&medians).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let ss_tot: f64 = medians.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = 1.0 - ss_res / ss_tot;
    let ms: Vec<String> = medians.iter().map(|t| format!("{:.0}", t * 1e3)).collect();
    ensure(slope > 0.0 && r2 > 0.9, format!("medians {ms:?} ms, R^2 {r2:.3}"))?;
    Ok(format!("median init ms at n = 5/10/20: {}, R^2 {r2:.4}", ms.join("/")))
}

fn update_cadence() -> Outcome {
    let (frames, gts) = single_square_sequence();
    let cfg = PipelineConfig { compressed_channels: 16, ..synthetic_config() };
    let out = run_sequence(&frames, &gts[0], &cfg).map_err(|e| e.to_string())?;
    let want: Vec<usize> = (1..frames.len()).filter(|i| i % 8 == 0).collect();
    ensure(out.update_frames == want, format!("updates at {:?}", out.update_frames))?;
    let d = Preset::Default.schedule();
    let f = Preset::Fast.schedule();
    let upd = Phase::Update { free_set: FreeSet::W2Only };
    ensure(d.cg_budget(Phase::Initial) == [5, 10, 10, 10, 10] && d.cg_budget(upd) == [10], "default preset budgets")?;
    ensure(f.cg_budget(Phase::Initial) == [5, 10, 10, 10] && f.cg_budget(upd) == [5], "fast preset budgets")?;
    ensure(PipelineConfig::default().update_interval == 8, "default interval")?;
    Ok(format!("updates at {:?}; presets 5+4x10 / 10 and 5+3x10 / 5", out.update_frames))
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(1010);
    let (mut wj, mut wf) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let a = random_blob_mask(&mut r, h, w);
        let b = random_blob_mask(&mut r, h, w);
        let tol = r.random_range(0..5);
        wj = wj.max((jaccard(&a, &b).unwrap() - brute_jaccard(&a, &b)).abs());
        wf = wf.max((boundary_f(&a, &b, tol).unwrap() - brute_boundary_f(&a, &b, tol)).abs());
    }
    ensure(wj < 1e-9 && wf < 1e-6, format!("J error {wj:.2e}, F error {wf:.2e}"))?;
    let empty = LabelMask::empty(8, 8);
    let left = LabelMask::from_fn(8, 8, |_, x| u8::from(x < 3));
    let right = LabelMask::from_fn(8, 8, |_, x| u8::from(x > 4));
    let conventions = [
        jaccard(&left, &left).unwrap() == 1.0,
        boundary_f(&left, &left, 0).unwrap() == 1.0,
        jaccard(&left, &right).unwrap() == 0.0,
        jaccard(&empty, &empty).unwrap() == 1.0,
        boundary_f(&empty, &empty, 1).unwrap() == 1.0,
        boundary_f(&left, &empty, 1).unwrap() == 0.0,
    ];
    ensure(conventions.iter().all(|&c| c), format!("conventions {conventions:?}"))?;
    Ok(format!("50 pairs, J error {wj:.1e}, F error {wf:.1e}; identical/disjoint/empty conventions hold"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("solver-oracle", solver_oracle),
        ("cg-correctness", cg_correctness),
        ("gn-monotonicity", gn_monotonicity),
        ("adjoint-suite", adjoint_suite),
        ("pixel-weight-identity", pixel_weight_identity),
        ("memory-state-machine", memory_state_machine),
        ("synthetic-end-to-end", synthetic_end_to_end),
        ("runtime-scaling", runtime_scaling),
        ("update-cadence", update_cadence),
        ("metrics-oracle", metrics_oracle),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name:<22} {detail}"),
            Err(detail) => {
                println!("FAIL {name:<22} {detail}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
