//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cmf_core::acmt::{
    correlation, gradcheck_config, toy_gradient_check, transfer_movement, AcmtConfig, AcmtModel, CorrelationMatrix,
    Direction, MovementField, GRADCHECK_SEED,
};
use cmf_core::bony_planner::{plan_case, OraclePlanner};
use cmf_core::config::Config;
use cmf_core::eval::{
    wilcoxon_signed_rank, BaselineConfig, BaselineModel, EvalReport, TestOutcome, BASELINE, BP, BP_FS, IDENTITY,
};
use cmf_core::facial_simulator::{apply_plan, TissueOracleSimulator};
use cmf_core::geom::{fit_rigid_coords, BonyPlan, Mat3, PointSet, RigidTransform, SegmentLabel, Vec3};
use cmf_core::io::{read_ply, to_json, write_ply, Checkpoint, CheckpointModel, PlanFile, PlyData};
use cmf_core::phantom::{build_dataset, generate_case, PhantomCase, PhantomDataset, PhantomSpec};
use cmf_core::pipeline;
use cmf_core::plan_search::{
    self, perturb_case, random_perturbation, relocalize, select_plan, Candidate, Perturbation, SearchConfig,
    SelectionMetric,
};
use cmf_core::tensor_net::{
    finite_diff_check, finite_diff_check_against, Activation, EncoderDecoderConfig, EncoderDecoderParams,
    InputFeatures, LayerParams, LayerStack, Parameters, Tensor2, Trainable,
};
use cmf_core::Error;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
                rng.random_range(-scale..scale),
            )
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Mat3 {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vec3::z() } else { axis.normalize() };
    Rotation3::from_scaled_axis(axis * rng.random_range(-max_angle..max_angle)).into_inner()
}

fn sum_sq(r: &Mat3, t: &Vec3, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter().zip(dst).map(|(s, d)| (r * s + t - d).norm_squared()).sum()
}

/// Smallest squared residual over a rotation grid around `center`; the
/// translation is the closed-form optimum for each grid rotation.
fn grid_oracle(center: &Mat3, src: &[Vec3], dst: &[Vec3]) -> f64 {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let steps: Vec<f64> = (-6..=6).map(|k| (k as f64 * 0.25).to_radians()).collect();
    let mut best = f64::INFINITY;
    for &a in &steps {
        for &b in &steps {
            for &c in &steps {
                let r = Rotation3::from_scaled_axis(Vec3::new(a, b, c)).into_inner() * center;
                best = best.min(sum_sq(&r, &(cd - r * cs), src, dst));
            }
        }
    }
    best
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_recovery: f64 = 0.0;
    for _ in 0..20 {
        let src = random_points(&mut rng, 50, 40.0);
        let r = random_rotation(&mut rng, 0.5);
        let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let clean: Vec<Vec3> = src.iter().map(|p| r * p + t).collect();
        let noisy: Vec<Vec3> = clean
            .iter()
            .map(|p| p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();

        let fit = fit_rigid_coords(&src, &noisy).map_err(|e| e.to_string())?;
        let gap = sum_sq(&fit.rotation, &fit.translation, &src, &noisy) - grid_oracle(&r, &src, &noisy);
        worst_gap = worst_gap.max(gap);
        check(gap <= 1e-6, format!("fit residual exceeds grid oracle by {gap:.3e}"))?;

        let exact = fit_rigid_coords(&src, &clean).map_err(|e| e.to_string())?;
        worst_recovery = worst_recovery
            .max((exact.rotation - r).norm())
            .max((exact.translation - t).norm());
        check(worst_recovery <= 1e-9, format!("noiseless recovery error {worst_recovery:.3e}"))?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 noisy instances, fit - grid oracle <= {worst_gap:.2e}; noiseless error {worst_recovery:.2e}; {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut proper, mut degenerate) = (0usize, 0usize);
    for i in 0..10_000 {
        let n = rng.random_range(3..40);
        let mut src = random_points(&mut rng, n, 30.0);
        match i % 5 {
            // near-planar
            1 => {
                let squash = 10f64.powf(-rng.random_range(2.0..12.0));
                src.iter_mut().for_each(|p| p.z *= squash);
            }
            // exactly planar
            2 => src.iter_mut().for_each(|p| p.z = 0.0),
            // near-collinear
            3 => {
                let squash = 10f64.powf(-rng.random_range(3.0..14.0));
                src.iter_mut().for_each(|p| {
                    p.y *= squash;
                    p.z *= squash;
                });
            }
            _ => {}
        }
        let r = random_rotation(&mut rng, std::f64::consts::PI);
        let mut dst: Vec<Vec3> = src.iter().map(|p| r * p).collect();
        if i % 7 == 0 {
            // mirrored target: the best proper rotation differs from the fit
            dst.iter_mut().for_each(|p| p.x = -p.x);
        }
        if i % 11 == 0 {
            let jitter = rng.random_range(0.0..2.0);
            dst.iter_mut().for_each(|p| *p += Vec3::new(rng.random_range(-jitter..=jitter), 0.0, 0.0));
        }
        match fit_rigid_coords(&src, &dst) {
            Ok(t) => {
                let ortho = (t.rotation.transpose() * t.rotation - Mat3::identity()).norm();
                let det = t.rotation.determinant();
                check(
                    ortho <= 1e-10 && (det - 1.0).abs() <= 1e-10,
                    format!("call {i}: |RtR - I| = {ortho:.3e}, det = {det}"),
                )?;
                proper += 1;
            }
            Err(Error::DegenerateGeometry(_)) => degenerate += 1,
            Err(e) => return Err(format!("call {i}: unexpected error {e}")),
        }
    }
    Ok(format!("10000 calls: {proper} proper rotations, {degenerate} degenerate-geometry errors"))
}

fn jitter(params: &mut impl Parameters, rng: &mut ChaCha8Rng) {
    let p: Vec<f64> = params.flat().iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
    params.set_flat(&p).unwrap();
}

fn mse_upstream(out: &Tensor2, target: &Tensor2) -> (f64, Tensor2) {
    let n = out.data.len() as f64;
    let mut up = out.clone();
    let mut loss = 0.0;
    for (u, t) in up.data.iter_mut().zip(&target.data) {
        let d = *u - t;
        loss += d * d / n;
        *u = 2.0 * d / n;
    }
    (loss, up)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut errors: Vec<(String, f64)> = Vec::new();

    let x = Tensor2::from_fn(5, 9, |_, _| rng.random_range(-1.0..1.0));
    for act in [Activation::ReLU, Activation::Identity] {
        let mut layer = LayerParams::glorot(5, 4, act, &mut rng);
        jitter(&mut layer, &mut rng);
        let y = Tensor2::from_fn(4, 9, |_, _| rng.random_range(-1.0..1.0));
        let f = |p: &[f64]| {
            let mut l = layer.clone();
            l.set_flat(p).unwrap();
            let (out, cache) = l.forward_cached(&x).unwrap();
            let (loss, up) = mse_upstream(&out, &y);
            let mut g = l.zeroed();
            l.backward(&cache, &up, &mut g);
            (loss, g.flat())
        };
        errors.push((format!("dense {act:?}"), finite_diff_check(f, &layer.flat(), h)));
    }

    let mut stack = LayerStack::glorot(5, &[6, 3], Activation::Identity, &mut rng);
    jitter(&mut stack, &mut rng);
    let y = Tensor2::from_fn(3, 9, |_, _| rng.random_range(-1.0..1.0));
    let f = |p: &[f64]| {
        let mut s = stack.clone();
        s.set_flat(p).unwrap();
        let (out, cache) = s.forward_cached(&x).unwrap();
        let (loss, up) = mse_upstream(&out, &y);
        let mut g = s.zeroed();
        s.backward(&cache, &up, &mut g);
        (loss, g.flat())
    };
    errors.push(("layer stack".into(), finite_diff_check(f, &stack.flat(), h)));

    for input in [InputFeatures::Xyz, InputFeatures::XyzNormals] {
        let cfg = EncoderDecoderConfig {
            input,
            ..gradcheck_config().tower
        };
        let mut net = EncoderDecoderParams::glorot(cfg, &mut rng);
        jitter(&mut net, &mut rng);
        let coords = random_points(&mut rng, 24, 30.0);
        let normals = coords.iter().map(|p| p.normalize()).collect();
        let pts = PointSet::with_normals(coords, normals).unwrap();
        let hier = net.hierarchy(&pts).unwrap();
        let feats = net.input_features(&pts).unwrap();
        let target = Tensor2::from_fn(net.output_dim(), pts.len(), |_, _| rng.random_range(-1.0..1.0));
        let f = |p: &[f64]| {
            let mut m = net.clone();
            m.set_flat(p).unwrap();
            let (out, cache) = m.forward_cached(&hier, &feats).unwrap();
            let (loss, up) = mse_upstream(&out, &target);
            let mut g = m.zeroed();
            m.backward(&hier, &cache, &up, &mut g);
            (loss, g.flat())
        };
        errors.push((format!("encoder-decoder {input:?}"), finite_diff_check(f, &net.flat(), h)));
    }

    let mut bcfg = BaselineConfig::scaled(16, 16);
    bcfg.tower = gradcheck_config().tower;
    bcfg.head_dims = vec![4, 3];
    let mut base = BaselineModel::new(&bcfg, 5, false).unwrap();
    jitter(&mut base, &mut rng);
    let bone = PointSet::new(random_points(&mut rng, 24, 30.0)).unwrap();
    let sample = base
        .prepare(&bone, random_points(&mut rng, 24, 3.0))
        .unwrap();
    let f = |p: &[f64]| {
        let mut m = base.clone();
        m.set_flat(p).unwrap();
        m.loss_and_grad(&sample).unwrap()
    };
    errors.push(("baseline".into(), finite_diff_check(f, &base.flat(), h)));

    for standardize in [false, true] {
        let err = toy_gradient_check(GRADCHECK_SEED, standardize, h).map_err(|e| e.to_string())?;
        errors.push((format!("composed transfer model (standardized: {standardize})"), err));
    }

    for (name, err) in &errors {
        check(*err < 1e-4, format!("{name}: relative error {err:.3e}"))?;
    }

    let f = |p: &[f64]| {
        let mut s = stack.clone();
        s.set_flat(p).unwrap();
        let (out, cache) = s.forward_cached(&x).unwrap();
        let (loss, up) = mse_upstream(&out, &y);
        let mut g = s.zeroed();
        s.backward(&cache, &up, &mut g);
        (loss, g.flat())
    };
    let (_, mut corrupted) = f(&stack.flat());
    let k = (0..corrupted.len())
        .max_by(|&a, &b| corrupted[a].abs().total_cmp(&corrupted[b].abs()))
        .unwrap();
    corrupted[k] *= 1.1;
    let mutation = finite_diff_check_against(|p| f(p).0, &corrupted, &stack.flat(), h);
    check(mutation > 1e-2, format!("corrupted gradient only scored {mutation:.3e}"))?;

    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    let worst = errors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}; corrupted gradient scored {mutation:.2e}; {:.1}s",
        errors.len(),
        elapsed.as_secs_f64()
    ))
}

fn naive_dense(layer: &LayerParams, x: &[f64]) -> Vec<f64> {
    (0..layer.out_dim())
        .map(|o| {
            let mut s = layer.bias[o];
            for (i, xi) in x.iter().enumerate() {
                s += layer.weight.get(o, i) * xi;
            }
            match layer.activation {
                Activation::ReLU => s.max(0.0),
                Activation::Identity => s,
            }
        })
        .collect()
}

fn naive_stack(stack: &LayerStack, x: Vec<f64>) -> Vec<f64> {
    stack.layers.iter().fold(x, |h, l| naive_dense(l, &h))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_r: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    for shape in 0..100 {
        let c = rng.random_range(1..12);
        let nt = rng.random_range(1..40);
        let ns = rng.random_range(1..40);
        let at = Tensor2::from_fn(c, nt, |_, _| rng.random_range(-2.0..2.0));
        let as_ = Tensor2::from_fn(c, ns, |_, _| rng.random_range(-2.0..2.0));
        let r = correlation(&at, &as_).map_err(|e| e.to_string())?;
        check(r.0.rows == nt && r.0.cols == ns, format!("shape {shape}: correlation is {}x{}", r.0.rows, r.0.cols))?;
        for i in 0..nt {
            for j in 0..ns {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += at.get(k, i) * as_.get(k, j);
                }
                worst_r = worst_r.max((r.0.get(i, j) - acc / ns as f64).abs());
            }
        }

        let mut cfg = AcmtConfig::scaled(16, 16);
        cfg.theta_dims = vec![rng.random_range(1..10), rng.random_range(1..10)];
        cfg.phi_dims = vec![rng.random_range(1..10), 3];
        let model = AcmtModel::new(Direction::FaceToBone, cfg, shape as u64, false).map_err(|e| e.to_string())?;
        let src = PointSet::new(random_points(&mut rng, ns, 50.0)).unwrap();
        let moves = MovementField::new(src.clone(), random_points(&mut rng, ns, 5.0)).unwrap();
        let rm = CorrelationMatrix(Tensor2::from_fn(nt, ns, |_, _| rng.random_range(-1.0..1.0)));
        let got = transfer_movement(&model, &src, &moves, &rm).map_err(|e| e.to_string())?;
        let cs = model.config.tower.coord_scale;
        let ms = model.config.movement_scale;
        let encoded: Vec<Vec<f64>> = (0..ns)
            .map(|j| {
                let p = src.coords[j] * cs;
                let v = moves.vectors[j] * ms;
                naive_stack(&model.theta, vec![p.x, p.y, p.z, v.x, v.y, v.z])
            })
            .collect();
        check(got.len() == nt, format!("shape {shape}: {} transferred vectors for {nt} targets", got.len()))?;
        for (i, g) in got.iter().enumerate() {
            let mut pooled = vec![0.0; encoded[0].len()];
            for (j, e) in encoded.iter().enumerate() {
                for (ch, val) in e.iter().enumerate() {
                    pooled[ch] += val * rm.0.get(i, j);
                }
            }
            let out = naive_stack(&model.phi, pooled);
            for k in 0..3 {
                worst_m = worst_m.max((g[k] - out[k] / ms).abs());
            }
        }
    }
    check(worst_r <= 1e-12, format!("correlation differs from the loop by {worst_r:.3e}"))?;
    check(worst_m <= 1e-12, format!("transfer differs from the loop by {worst_m:.3e}"))?;
    Ok(format!("100 shapes; correlation error {worst_r:.2e}, transfer error {worst_m:.2e}"))
}

fn desk_cases(range: std::ops::Range<u64>) -> Vec<PhantomCase> {
    let spec = PhantomSpec::desk();
    range.map(|s| generate_case(&spec, s).unwrap()).collect()
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    for pc in desk_cases(5000..5050) {
        let plan = plan_case(&OraclePlanner, &pc.case).map_err(|e| e.to_string())?;
        check(plan.segments() == pc.gt_plan.segments(), format!("case {}: segment sets differ", pc.seed))?;
        let (rot, trans) = plan.max_difference(&pc.gt_plan);
        worst = worst.max(rot).max(trans);
    }
    check(worst <= 1e-9, format!("plan error {worst:.3e}"))?;
    Ok(format!("50 cases, worst rotation/translation error {worst:.2e}"))
}

/// `plan` with every segment nudged by a small random rigid motion.
fn nudged(plan: &BonyPlan, rng: &mut ChaCha8Rng) -> BonyPlan {
    let mut out = BonyPlan::new();
    for (seg, t) in plan.iter() {
        let d = RigidTransform::new(random_rotation(rng, 0.05), random_points(rng, 1, 2.0)[0]).unwrap();
        out.insert(seg, d.compose(t)).unwrap();
    }
    out
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_gt: f64 = 0.0;
    for pc in desk_cases(6000..6050) {
        let sim = TissueOracleSimulator { sigma: pc.sigma_mm };
        let slot = rng.random_range(0..10);
        let candidates: Vec<Candidate> = (0..10)
            .map(|i| {
                let plan = if i == slot { pc.gt_plan.clone() } else { nudged(&pc.gt_plan, &mut rng) };
                Candidate::unperturbed(plan)
            })
            .collect();
        let sel = select_plan(&pc.case, &candidates, &sim, &pc.case.desired_face, SelectionMetric::Corresponded)
            .map_err(|e| e.to_string())?;
        check(sel.winner == slot, format!("case {}: picked {} instead of {slot}", pc.seed, sel.winner))?;
        let score = sel.results[sel.winner].score;
        worst_gt = worst_gt.max(score);
        check(score < 1e-9, format!("case {}: ground-truth score {score:.3e}", pc.seed))?;
        check(
            sel.results.iter().all(|r| score <= r.score),
            format!("case {}: winner is not the minimum", pc.seed),
        )?;

        let run = plan_search::run(
            &OraclePlanner,
            &sim,
            &pc.case,
            &SearchConfig {
                candidates: 10,
                seed: pc.seed,
                metric: SelectionMetric::Corresponded,
            },
        )
        .map_err(|e| e.to_string())?;
        check(
            run.results[run.winner].score <= run.results[0].score,
            format!("case {}: search winner scores above candidate 0", pc.seed),
        )?;
    }
    Ok(format!("50 cases, ground truth always picked (worst score {worst_gt:.2e}); winner <= candidate 0 on every run"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst: f64 = 0.0;
    let mut flips = 0;
    for (k, pc) in desk_cases(7000..7050).into_iter().enumerate() {
        let mut p = random_perturbation(&mut rng, 10.0);
        // every other case flips, so both kinds are covered evenly
        p = Perturbation::new(k % 2 == 0, p.translation).unwrap();
        let moved = perturb_case(&pc.case, &p);
        if p.flip {
            flips += 1;
            let bone = &pc.case.pre_bone;
            let swapped = |a: SegmentLabel, b: SegmentLabel| {
                (0..bone.len())
                    .filter(|&i| bone.labels[i] == a && moved.pre_bone.labels[i] == b)
                    .count()
            };
            check(
                swapped(SegmentLabel::RightProximal, SegmentLabel::LeftProximal) == bone.count(SegmentLabel::RightProximal)
                    && swapped(SegmentLabel::LeftProximal, SegmentLabel::RightProximal)
                        == bone.count(SegmentLabel::LeftProximal)
                    && moved.pre_bone.count(SegmentLabel::RightProximal) == bone.count(SegmentLabel::LeftProximal),
                format!("case {}: proximal labels not swapped", pc.seed),
            )?;
        }
        let direct = plan_case(&OraclePlanner, &pc.case).map_err(|e| e.to_string())?;
        let back = relocalize(&plan_case(&OraclePlanner, &moved).map_err(|e| e.to_string())?, &p);
        check(back.segments() == direct.segments(), format!("case {}: segment sets differ", pc.seed))?;
        let (rot, trans) = back.max_difference(&direct);
        worst = worst.max(rot).max(trans);
    }
    check(worst <= 1e-10, format!("relocalized plan differs by {worst:.3e}"))?;
    Ok(format!("50 perturbations ({flips} with flips), worst difference {worst:.2e}"))
}

fn experiment_config() -> Config {
    let mut cfg = Config::desk();
    cfg.train.epochs = 100;
    cfg.eval.exact_max_n = 20;
    cfg
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let cfg = experiment_config();
    let exp = pipeline::run_experiment(&cfg, 200, 20, 1000, |_, _, _| {}).map_err(|e| e.to_string())?;
    let report = &exp.report;
    println!("{}", report.table());
    let entire = |name: &str| report.method(name).map(|m| m.entire.mean).ok_or(format!("{name} missing"));
    let (id, base, bp, bpfs) = (entire(IDENTITY)?, entire(BASELINE)?, entire(BP)?, entire(BP_FS)?);
    let summary = format!(
        "entire-bone MAE: BP+FS {bpfs:.3}, BP {bp:.3}, Baseline {base:.3}, Identity {id:.3} mm; {:.0}s",
        start.elapsed().as_secs_f64()
    );
    check(bpfs <= bp, format!("BP+FS > BP; {summary}"))?;
    check(bp < base, format!("BP >= Baseline; {summary}"))?;
    check(base < id, format!("Baseline >= Identity; {summary}"))?;
    check(bp <= 0.5 * id, format!("BP reduces identity MAE by less than 50%; {summary}"))?;
    match &report.comparison(BP, BASELINE).ok_or("BP vs Baseline missing")?.outcome {
        TestOutcome::Done(w) => {
            check(w.exact, "BP vs Baseline did not use the exact branch")?;
            check(w.p_less < w.p_greater, format!("Wilcoxon favours Baseline (p_less {})", w.p_less))?;
            Ok(format!("{summary}; BP vs Baseline one-sided exact p = {:.2e}", w.p_less))
        }
        other => Err(format!("BP vs Baseline: {other:?}")),
    }
}

/// Ranks of `values` (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|v| {
            let below = values.iter().filter(|u| *u < v).count() as f64;
            let equal = values.iter().filter(|u| *u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn enumerated_p(diffs: &[f64]) -> (f64, f64) {
    let r = ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let observed: f64 = diffs.iter().zip(&r).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let n = diffs.len();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| r[i]).sum();
        le += (w <= observed + 1e-9) as u64;
        ge += (w >= observed - 1e-9) as u64;
    }
    let total = (1u64 << n) as f64;
    (le as f64 / total, ge as f64 / total)
}

fn criterion_9() -> Outcome {
    let mut datasets = 0usize;
    let mut worst: f64 = 0.0;
    let mut compare = |diffs: &[f64]| -> Result<(), String> {
        let w = wilcoxon_signed_rank(diffs, &vec![0.0; diffs.len()]).map_err(|e| e.to_string())?;
        check(w.exact, format!("{diffs:?}: not exact"))?;
        let (le, ge) = enumerated_p(diffs);
        worst = worst
            .max((w.p_less - le).abs())
            .max((w.p_greater - ge).abs())
            .max((w.p_two_sided - (2.0 * le.min(ge)).min(1.0)).abs());
        datasets += 1;
        Ok(())
    };
    for n in 5..=10usize {
        // every sign pattern with distinct magnitudes
        for mask in 0u32..(1 << n) {
            let diffs: Vec<f64> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { (i + 1) as f64 } else { -((i + 1) as f64) })
                .collect();
            compare(&diffs)?;
        }
        // every sign pattern over every tie structure of magnitudes 1..3
        for mags in 0..3u32.pow(n as u32).min(729) {
            let m: Vec<f64> = (0..n).map(|i| (mags / 3u32.pow(i as u32) % 3 + 1) as f64).collect();
            for mask in (0u32..(1 << n)).step_by(7) {
                let diffs: Vec<f64> = m.iter().enumerate().map(|(i, v)| if mask >> i & 1 == 1 { *v } else { -v }).collect();
                compare(&diffs)?;
            }
        }
    }
    check(worst <= 1e-12, format!("p differs from enumeration by {worst:.3e}"))?;
    Ok(format!("{datasets} datasets at n = 5..10, worst difference {worst:.2e}"))
}

struct Artifacts {
    dataset: String,
    checkpoints: Vec<String>,
    plans: Vec<String>,
    report: String,
}

fn artifacts(cfg: &Config) -> Result<(Artifacts, PhantomDataset, EvalReport), String> {
    let exp = pipeline::run_experiment(cfg, 3, 3, 77, |_, _, _| {}).map_err(|e| e.to_string())?;
    let checkpoints = vec![
        to_json(&Checkpoint::new(CheckpointModel::Acmt(exp.bp.clone()))).unwrap(),
        to_json(&Checkpoint::new(CheckpointModel::Acmt(exp.fs.clone()))).unwrap(),
        to_json(&Checkpoint::new(CheckpointModel::Baseline(exp.baseline.clone()))).unwrap(),
    ];
    let mut plans = Vec::new();
    for pc in &exp.dataset.test {
        let sel = plan_search::run(&exp.bp, &exp.fs, &pc.case, &cfg.search).map_err(|e| e.to_string())?;
        plans.push(to_json(&PlanFile::new(sel.plan().clone())).unwrap());
        plans.push(to_json(&sel).unwrap());
    }
    Ok((
        Artifacts {
            dataset: to_json(&exp.dataset).unwrap(),
            checkpoints,
            plans,
            report: to_json(&exp.report).unwrap(),
        },
        exp.dataset,
        exp.report,
    ))
}

fn reserialized<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq>(text: &str) -> Result<(), String> {
    let value: T = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let again = to_json(&value).map_err(|e| e.to_string())?;
    check(again == text, "JSON re-serialization differs")?;
    let back: T = serde_json::from_str(&again).map_err(|e| e.to_string())?;
    check(back == value, "JSON round-trip changed the value")
}

fn criterion_10() -> Outcome {
    let mut cfg = Config::desk();
    cfg.train.epochs = 2;
    let (a, dataset, _) = artifacts(&cfg)?;
    let (b, _, _) = artifacts(&cfg)?;
    check(a.dataset == b.dataset, "datasets differ between runs")?;
    check(a.checkpoints == b.checkpoints, "checkpoints differ between runs")?;
    check(a.plans == b.plans, "plans or audit logs differ between runs")?;
    check(a.report == b.report, "reports differ between runs")?;
    let again = build_dataset(&cfg.phantom, 3, 3, true, 77).map_err(|e| e.to_string())?;
    check(to_json(&again).unwrap() == a.dataset, "regenerated dataset differs")?;

    reserialized::<PhantomDataset>(&a.dataset)?;
    reserialized::<EvalReport>(&a.report)?;
    for c in &a.checkpoints {
        reserialized::<Checkpoint>(c)?;
    }
    for (i, p) in a.plans.iter().enumerate() {
        if i % 2 == 0 {
            reserialized::<PlanFile>(p)?;
        } else {
            reserialized::<plan_search::Selection>(p)?;
        }
    }

    let mut ply_files = 0;
    for pc in dataset.train.iter().chain(&dataset.test) {
        let bone = &pc.case.pre_bone;
        for data in [
            PlyData {
                vertices: bone.points.coords.clone(),
                normals: bone.points.normals.clone(),
                labels: Some(bone.labels.clone()),
                faces: vec![],
            },
            PlyData {
                vertices: pc.case.face_mesh.vertices.clone(),
                faces: pc.case.face_mesh.triangles.clone(),
                ..PlyData::default()
            },
            PlyData {
                vertices: apply_plan(bone, &pc.gt_plan).map_err(|e| e.to_string())?.coords,
                ..PlyData::default()
            },
        ] {
            let mut first = Vec::new();
            write_ply(&mut first, &data).map_err(|e| e.to_string())?;
            let back = read_ply(first.as_slice()).map_err(|e| e.to_string())?;
            check(back == data, "PLY round-trip changed the data")?;
            let mut second = Vec::new();
            write_ply(&mut second, &back).map_err(|e| e.to_string())?;
            check(first == second, "PLY rewrite differs")?;
            ply_files += 1;
        }
    }
    Ok(format!(
        "two runs byte-identical (dataset, {} checkpoints, {} plan/audit files, report); JSON and {ply_files} PLY round-trips exact",
        a.checkpoints.len(),
        a.plans.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("rigid-fit optimality", criterion_1),
        ("rotation validity", criterion_2),
        ("gradient correctness", criterion_3),
        ("correlation and transfer fidelity", criterion_4),
        ("oracle round-trip", criterion_5),
        ("selection correctness", criterion_6),
        ("re-localization exactness", criterion_7),
        ("end-to-end learning experiment", criterion_8),
        ("Wilcoxon exactness", criterion_9),
        ("determinism and serialization", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
