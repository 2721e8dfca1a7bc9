use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aerocap::ablation::{self, run_ablation};
use aerocap::bundle::ModelBundle;
use aerocap::estimator::{EstimatorMode, RefinerKind};
use aerocap::fusion::session::{self, SessionConfig};
use aerocap::metrics::evaluate;
use aerocap::sequence_refine::{self as seqref, FrameEstimate, OptimizerConfig};
use aerocap::synthgen::{self, Dataset, NoiseConfig, SceneConfig};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "aerocap", version, about = "Two-agent body pose fusion on synthetic aerial footage")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with optional `scene`, `noise`, `session` and `refine` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic two-camera sequence to `dataset.jsonl`.
    Generate {
        #[arg(long)]
        frames: Option<usize>,
        /// Keypoint noise std in pixels.
        #[arg(long)]
        noise_px: Option<f64>,
        /// Per-camera occlusion probabilities, comma separated.
        #[arg(long, value_delimiter = ',')]
        occlusion: Option<Vec<f64>>,
        #[arg(long)]
        noiseless: bool,
    },
    /// Replay a dataset through the two-agent session.
    Simulate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        mode: Option<EstimatorMode>,
        #[arg(long)]
        refiner: Option<RefinerKind>,
        #[arg(long)]
        pipelined: bool,
        /// One OS thread per agent instead of the event loop.
        #[arg(long)]
        threaded: bool,
    },
    /// Temporal multi-view refinement of per-frame estimates.
    Refine {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Score estimates against the dataset's ground truth.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long, default_value = "estimates")]
        label: String,
    },
    /// Run all four estimator modes on the same data.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        refiner: Option<RefinerKind>,
    },
    /// Per-frame x/y/z of each camera's estimate next to the ground truth.
    ExportCsv {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        estimates: PathBuf,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    scene: SceneConfig,
    noise: Option<NoiseConfig>,
    session: SessionConfig,
    refine: OptimizerConfig,
}

impl RunConfig {
    fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| aerocap::Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.scene.seed = s;
            cfg.session.seed = s;
            cfg.session.estimator.seed = s;
        }
        Ok(cfg)
    }
}

fn read_dataset(p: &Path) -> anyhow::Result<Dataset> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(Dataset::read_jsonl(BufReader::new(f))?)
}

fn read_estimates(p: &Path) -> anyhow::Result<Vec<FrameEstimate>> {
    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
    Ok(seqref::read_frame_estimates_jsonl(BufReader::new(f))?)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let p = dir.join(name);
    let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> anyhow::Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Restricts the dataset to the frames that have estimates, in estimate order.
fn observed_frames(d: &Dataset, est: &[FrameEstimate]) -> anyhow::Result<Dataset> {
    let frames = est
        .iter()
        .map(|e| {
            d.frame(e.frame_id)
                .cloned()
                .ok_or_else(|| aerocap::Error::Dataset(format!("frame {} not in dataset", e.frame_id)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { frames, ..d.clone() })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    let model = ModelBundle::builtin();
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Generate {
            frames,
            noise_px,
            occlusion,
            noiseless,
        } => {
            let mut scene = cfg.scene;
            if let Some(n) = frames {
                scene.frames = n;
            }
            let cams = scene.motion.len();
            let mut noise = if noiseless {
                NoiseConfig::noiseless(cams)
            } else {
                cfg.noise.unwrap_or_else(|| NoiseConfig {
                    occlusion_prob: vec![0.0; cams],
                    ..Default::default()
                })
            };
            if let Some(s) = noise_px {
                noise.keypoint_sigma_px = s;
            }
            if let Some(o) = occlusion {
                noise.occlusion_prob = o;
            }
            let d = synthgen::generate_sequence(&scene, &noise, model)?;
            let mut w = create(out, "dataset.jsonl")?;
            d.write_jsonl(&mut w)?;
            w.flush()?;
            println!("{} frames x {} cameras -> {}", d.frames.len(), d.num_cameras(), out.join("dataset.jsonl").display());
        }
        Command::Simulate {
            dataset,
            mode,
            refiner,
            pipelined,
            threaded,
        } => {
            let d = read_dataset(&dataset)?;
            let mut sc = cfg.session;
            if let Some(m) = mode {
                sc.estimator.mode = m;
            }
            if let Some(r) = refiner {
                sc.estimator.refiner = r;
            }
            sc.pipelined |= pipelined;
            let res = if threaded {
                session::run_session_threaded(&d, model, &sc)?
            } else {
                session::run_session(&d, model, &sc)?
            };
            let mut w = create(out, "estimates.jsonl")?;
            session::write_estimates_jsonl(&res, &mut w)?;
            w.flush()?;
            let mut w = create(out, "session_report.json")?;
            res.report.write_json(&mut w)?;
            writeln!(w)?;
            w.flush()?;
            let mut w = create(out, "session_report.csv")?;
            res.report.write_csv(&mut w)?;
            w.flush()?;
            let r = &res.report;
            println!(
                "{}: {}/{} frames completed ({:.1}% dropped), {:.3} fps, {} bytes sent",
                r.mode,
                r.completed,
                r.matched,
                100.0 * r.drop_rate,
                r.effective_fps,
                r.bytes_sent.iter().sum::<u64>()
            );
        }
        Command::Refine { dataset, estimates } => {
            let d = read_dataset(&dataset)?;
            let est = read_estimates(&estimates)?;
            if est.is_empty() {
                bail!(aerocap::Error::Dataset("no estimates to refine".into()));
            }
            let obs = seqref::dataset_observations(&observed_frames(&d, &est)?);
            let init = seqref::init_from_airpose(&est, &model.prior)?;
            let res = seqref::refine(&model.template, &model.prior, &init, &obs, &cfg.refine)?;

            let mut w = create(out, "refined_estimates.jsonl")?;
            seqref::write_frame_estimates_jsonl(&res.estimate.frame_estimates(&model.prior), &mut w)?;
            w.flush()?;
            let mut w = create(out, "sequence.jsonl")?;
            res.estimate.write_jsonl(&mut w)?;
            w.flush()?;
            let mut w = create(out, "loss_trace.csv")?;
            seqref::write_loss_trace_csv(&res.losses, &mut w)?;
            w.flush()?;
            let mut w = create(out, "relative_trajectory.csv")?;
            seqref::write_trajectory_csv(&seqref::relative_camera_trajectory(&res.estimate)?, &mut w)?;
            w.flush()?;
            write_json(
                out,
                "refine_report.json",
                &serde_json::json!({
                    "iterations": res.iterations,
                    "stop": res.stop,
                    "initial_loss": res.losses.first(),
                    "final_loss": res.losses.last(),
                    "final_breakdown": res.final_breakdown,
                }),
            )?;
            println!(
                "{} frames, {} iterations, loss {:.6e} -> {:.6e} ({:?})",
                est.len(),
                res.iterations,
                res.losses[0],
                res.losses.last().copied().unwrap_or(f64::NAN),
                res.stop
            );
        }
        Command::Eval {
            dataset,
            estimates,
            label,
        } => {
            let d = read_dataset(&dataset)?;
            let est = read_estimates(&estimates)?;
            let echo = serde_json::json!({ "dataset": dataset, "estimates": estimates });
            let r = evaluate(&label, &est, &d, &model.template, echo, cfg.session.seed)?;
            write_json(out, &format!("eval_{label}.json"), &r)?;
            println!("{label}: MPE {:.4} m, MPJPE {:.4} m over {} frames", r.mpe_m, r.mpjpe_m, r.frame_ids.len());
        }
        Command::Ablate { dataset, refiner } => {
            let d = read_dataset(&dataset)?;
            let mut ec = cfg.session.estimator;
            if let Some(r) = refiner {
                ec.refiner = r;
            }
            let r = run_ablation(&d, &ec, model)?;
            write_json(out, "ablation.json", &r)?;
            print!("{}", r.table());
            println!("input sha256 {}", r.input_sha256);
            log::debug!("dataset hash {}", ablation::dataset_sha256(&d)?);
        }
        Command::ExportCsv { dataset, estimates } => {
            let d = read_dataset(&dataset)?;
            let est = read_estimates(&estimates)?;
            let mut w = create(out, "trajectory.csv")?;
            writeln!(w, "frame_id,camera,x,y,z,gt_x,gt_y,gt_z")?;
            for e in &est {
                let rec = d
                    .frame(e.frame_id)
                    .ok_or_else(|| aerocap::Error::Dataset(format!("frame {} not in dataset", e.frame_id)))?;
                if rec.cameras.len() != e.cameras.len() {
                    bail!(aerocap::Error::Dataset(format!(
                        "frame {}: {} estimates for {} cameras",
                        e.frame_id,
                        e.cameras.len(),
                        rec.cameras.len()
                    )));
                }
                for (c, p) in e.cameras.iter().enumerate() {
                    let g = rec.camera_ground_truth_params(c).tau;
                    let t = p.tau;
                    writeln!(w, "{},{c},{},{},{},{},{},{}", e.frame_id, t[0], t[1], t[2], g[0], g[1], g[2])?;
                }
            }
            w.flush()?;
            println!("{} frames -> {}", est.len(), out.join("trajectory.csv").display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<aerocap::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
