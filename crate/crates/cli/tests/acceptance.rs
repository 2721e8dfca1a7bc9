//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#[path = "../../core/tests/common/gates.rs"]
mod gates;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use aerocap::ablation;
use aerocap::bundle::ModelBundle;
use aerocap::camera::{self, CropParams, Intrinsics};
use aerocap::estimator::{EstimatorConfig, EstimatorMode, RefinerKind};
use aerocap::fusion::codec::{BODY_FLOATS, BODY_LEN};
use aerocap::fusion::session::{self, SessionConfig, SessionOutput};
use aerocap::fusion::timing::{JitterModel, TimingModel};
use aerocap::geom::rot;
use aerocap::metrics;
use aerocap::rotation::{self, Rotation6D};
use aerocap::sequence_refine::{self as seqref, OptimizerConfig};
use aerocap::synthgen::{self, Dataset, NoiseConfig, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn model() -> &'static ModelBundle {
    ModelBundle::builtin()
}

fn dataset(frames: usize, seed: u64, noise: NoiseConfig) -> Dataset {
    let scene = SceneConfig {
        frames,
        seed,
        ..Default::default()
    };
    synthgen::generate_sequence(&scene, &noise, model()).expect("dataset")
}

fn noisy(occlusion: [f64; 2]) -> NoiseConfig {
    NoiseConfig {
        occlusion_prob: occlusion.to_vec(),
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn camera_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xca3e4a);
    let (mut trip, mut row) = (0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let cx = rng.random_range(200.0..1000.0);
        let cy = rng.random_range(200.0..800.0);
        let k = Intrinsics {
            fx: rng.random_range(500.0..3000.0),
            fy: rng.random_range(500.0..3000.0),
            cx,
            cy,
            width: (2.0 * cx) as u32 + 1,
            height: (2.0 * cy) as u32 + 1,
        };
        let p = CropParams {
            bx: rng.random_range(-0.9..0.9),
            by: rng.random_range(-0.9..0.9),
            s: rng.random_range(0.2..8.0),
        };
        let tau = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.5..50.0)];
        let c = camera::full_to_crop(tau, &p, &k).map_err(|e| e.to_string())?;
        let back = camera::crop_to_full(c, &p, &k).map_err(|e| e.to_string())?;
        for i in 0..3 {
            trip = trip.max((back[i] - tau[i]).abs());
        }
        row = row.max((k.fx * tau[0] / tau[2] - (k.fx / p.s * c[0] / c[2] + p.bx * k.cx)).abs());
        row = row.max((k.fy * tau[1] / tau[2] - (k.fy / p.s * c[1] / c[2] + p.by * k.cy)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        trip <= 1e-12 && row <= 1e-9 && secs < 1.0,
        format!("10000 cases, round trip {trip:.2e} (<= 1e-12), row identity {row:.2e} (<= 1e-9), {secs:.3} s"),
    )
}

fn rotation_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d);
    let (mut ortho, mut det, mut trip) = (0.0f64, 0.0f64, 0.0f64);
    let mut n = 0;
    while n < 10_000 {
        let r: [f64; 6] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let Ok(m) = Rotation6D(r).decode() else { continue };
        ortho = ortho.max(rotation::orthonormality_residual(&m));
        det = det.max((rotation::det3(&m) - 1.0).abs());
        let axis = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if rot::norm(&axis) < 1e-3 {
            continue;
        }
        let q = rot::axis_angle(axis, rng.random_range(-3.1..3.1));
        let back = Rotation6D::encode(&q).map_err(|e| e.to_string())?.decode().map_err(|e| e.to_string())?;
        for i in 0..3 {
            for j in 0..3 {
                trip = trip.max((back[i][j] - q[i][j]).abs());
            }
        }
        n += 1;
    }
    let zero = Rotation6D::ZERO.decode().map_err(|e| e.to_string())? == rot::identity();
    check(
        ortho < 1e-9 && det < 1e-9 && trip < 1e-9 && zero,
        format!("orthonormality {ortho:.2e}, |det - 1| {det:.2e}, round trip {trip:.2e}, zero -> identity {zero}"),
    )
}

fn gradient_gate() -> Outcome {
    let t = Instant::now();
    let results = gates::run_all(100, 0);
    let secs = t.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|r| format!("{} {:.1e} ({} points)", r.name, r.max_rel, r.points))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst < gates::GATE_TOLERANCE && secs < 120.0,
        format!("{detail}; {secs:.1} s"),
    )
}

fn long_session() -> SessionOutput {
    let d = dataset(500, 11, noisy([0.0, 0.0]));
    let mut cfg = SessionConfig {
        seed: 11,
        ..Default::default()
    };
    cfg.estimator.refiner = RefinerKind::Oracle;
    session::run_session(&d, model(), &cfg).expect("session")
}

fn communication_budget(s: &SessionOutput) -> Outcome {
    let r = &s.report;
    let done: Vec<_> = r.frames.iter().filter(|f| f.completed).collect();
    let exact = done.iter().all(|f| {
        f.messages == [2, 2]
            && f.floats == [2 * BODY_FLOATS as u32; 2]
            && f.body_bytes == [2 * BODY_LEN as u32; 2]
    });
    check(
        exact && done.len() == r.completed && r.completed > 0 && r.completed + r.dropped == r.matched,
        format!(
            "{} matched, {} completed: every completed frame has 2 messages, {} floats, {} body bytes per agent",
            r.matched,
            r.completed,
            2 * BODY_FLOATS,
            2 * BODY_LEN
        ),
    )
}

fn timing_reproduction(s: &SessionOutput) -> Outcome {
    let nominal = TimingModel::calibrated().nominal_total_ms();
    let zero = SessionConfig {
        timing: TimingModel {
            jitter: JitterModel { scale: 0.0 },
            ..TimingModel::calibrated()
        },
        seed: 5,
        estimator: EstimatorConfig {
            refiner: RefinerKind::Oracle,
            ..Default::default()
        },
        ..Default::default()
    };
    let z = session::run_session(&dataset(40, 5, noisy([0.0, 0.0])), model(), &zero).map_err(|e| e.to_string())?;
    let zfps = z.report.effective_fps;
    let fps = s.report.effective_fps;
    check(
        nominal == 238.0
            && nominal <= 240.0
            && z.report.dropped == 0
            && (zfps - 1000.0 / 240.0).abs() < 1e-12
            && format!("{zfps:.2}") == "4.17"
            && (2.7..=3.3).contains(&fps),
        format!(
            "nominal {nominal} ms of a 240 ms window; zero jitter {zfps:.4} fps; calibrated jitter {:.1}% dropped, {fps:.3} fps",
            100.0 * s.report.drop_rate
        ),
    )
}

fn decentralization_audit(s: &SessionOutput) -> Outcome {
    let r = s.reads;
    check(
        r[0][1] == 0 && r[1][0] == 0 && r[0][0] > 0 && r[1][1] > 0,
        format!("reads[reader][owner] = {r:?} over {} matched pairs", s.report.matched),
    )
}

fn two_view_oracle() -> Outcome {
    let m = model();
    let d = dataset(30, 0, NoiseConfig::noiseless(2));
    let est = ablation::estimate_dataset(&d, &EstimatorConfig::default(), m).map_err(|e| e.to_string())?;
    let init = seqref::init_from_airpose(&est, &m.prior).map_err(|e| e.to_string())?;
    let obs = seqref::dataset_observations(&d);
    let t = Instant::now();
    let out = seqref::refine(&m.template, &m.prior, &init, &obs, &OptimizerConfig::default()).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let rep = metrics::evaluate(
        "airpose_plus",
        &out.estimate.frame_estimates(&m.prior),
        &d,
        &m.template,
        serde_json::Value::Null,
        0,
    )
    .map_err(|e| e.to_string())?;
    let monotone = out.losses.windows(2).all(|w| w[1] <= w[0]);
    check(
        rep.mpjpe_m < 0.02 && rep.mpe_m < 0.01 && monotone && secs < 60.0,
        format!(
            "T=30 noiseless: MPJPE {:.4} m, world tau error {:.4} m, {} iterations, monotone {monotone}, {secs:.1} s",
            rep.mpjpe_m, rep.mpe_m, out.iterations
        ),
    )
}

fn noise_robustness() -> Outcome {
    let m = model();
    let mut improved = 0;
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for seed in 0..50 {
        let d = dataset(10, seed, noisy([0.0, 0.0]));
        let est = ablation::estimate_dataset(&d, &EstimatorConfig::default(), m).map_err(|e| e.to_string())?;
        let e0 = metrics::evaluate("init", &est, &d, &m.template, serde_json::Value::Null, seed)
            .map_err(|e| e.to_string())?;
        let init = seqref::init_from_airpose(&est, &m.prior).map_err(|e| e.to_string())?;
        let out = seqref::refine(
            &m.template,
            &m.prior,
            &init,
            &seqref::dataset_observations(&d),
            &OptimizerConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        let e1 = metrics::evaluate(
            "refined",
            &out.estimate.frame_estimates(&m.prior),
            &d,
            &m.template,
            serde_json::Value::Null,
            seed,
        )
        .map_err(|e| e.to_string())?;
        improved += usize::from(e1.mpe_m < e0.mpe_m);
        before.push(e0.mpe_m);
        after.push(e1.mpe_m);
    }
    check(
        improved * 100 >= 95 * 50,
        format!(
            "final MPE < initial MPE on {improved}/50 sequences (median {:.3} -> {:.3} m)",
            median(before),
            median(after)
        ),
    )
}

fn ablation_direction() -> Outcome {
    let m = model();
    let seeds = 50;
    let (mut a_mpjpe, mut f_mpjpe, mut f_mpe, mut b_mpe) = (vec![], vec![], vec![], vec![]);
    let (mut ok_pose, mut ok_pos) = (0, 0);
    for seed in 0..seeds {
        let d = dataset(4, seed, noisy([0.3, 0.0]));
        let r = ablation::run_ablation(&d, &EstimatorConfig::default(), m).map_err(|e| e.to_string())?;
        let get = |mode| r.report(mode).cloned().ok_or_else(|| format!("missing {mode}"));
        let (b, f, a) = (
            get(EstimatorMode::Baseline)?,
            get(EstimatorMode::BaselineFullcam)?,
            get(EstimatorMode::AirPose)?,
        );
        ok_pose += usize::from(a.mpjpe_m <= f.mpjpe_m);
        ok_pos += usize::from(f.mpe_m < b.mpe_m);
        a_mpjpe.push(a.mpjpe_m);
        f_mpjpe.push(f.mpjpe_m);
        f_mpe.push(f.mpe_m);
        b_mpe.push(b.mpe_m);
    }
    let (ma, mf, mfp, mb) = (median(a_mpjpe), median(f_mpjpe), median(f_mpe), median(b_mpe));
    check(
        ma <= mf && mfp < mb && ok_pose * 10 >= 9 * seeds as usize && ok_pos * 10 >= 9 * seeds as usize,
        format!(
            "{seeds} seeds: median MPJPE airpose {ma:.3} <= fullcam {mf:.3} ({ok_pose}/{seeds}); \
             median MPE fullcam {mfp:.3} < baseline {mb:.3} ({ok_pos}/{seeds})"
        ),
    )
}

fn run_cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_aerocap"))
        .args(["--seed", "21", "--out"])
        .arg(out)
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("aerocap {args:?}: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = root.path().join("data");
    run_cli(&data, &["generate", "--frames", "12"])?;
    let ds = data.join("dataset.jsonl");
    let ds = ds.to_str().ok_or("path")?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = root.path().join(format!("run{k}"));
        run_cli(&out, &["simulate", "--dataset", ds])?;
        let est = out.join("estimates.jsonl");
        run_cli(&out, &["refine", "--dataset", ds, "--estimates", est.to_str().ok_or("path")?])?;
        runs.push(out);
    }
    let mut names: Vec<_> = std::fs::read_dir(&runs[0])
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let a = std::fs::read(runs[0].join(n)).map_err(|e| e.to_string())?;
        let b = std::fs::read(runs[1].join(n)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(n.to_string_lossy().into_owned());
        }
    }
    check(
        names.len() >= 7 && differing.is_empty(),
        format!("{} output files compared, differing: {differing:?}", names.len()),
    )
}

fn main() {
    let t = Instant::now();
    let session = long_session();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("camera round trip", Box::new(camera_round_trip)),
        ("rotation suite", Box::new(rotation_suite)),
        ("gradient gate", Box::new(gradient_gate)),
        ("communication budget", Box::new(|| communication_budget(&session))),
        ("timing reproduction", Box::new(|| timing_reproduction(&session))),
        ("two-view oracle", Box::new(two_view_oracle)),
        ("noise robustness", Box::new(noise_robustness)),
        ("ablation direction", Box::new(ablation_direction)),
        ("determinism", Box::new(determinism)),
        ("decentralization audit", Box::new(|| decentralization_audit(&session))),
    ];
    let mut failed = 0;
    for (name, f) in &criteria {
        match f() {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.0} s)",
        criteria.len() - failed,
        t.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
