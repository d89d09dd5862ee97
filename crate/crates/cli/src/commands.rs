//! Subcommands. Each one loads its inputs, calls into the library and
//! writes the results.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use meshsplat::binding::{init_splats, InitOptions};
use meshsplat::fitting::{fit_sequence, init_camera, FitOptions};
use meshsplat::imaging::Image;
use meshsplat::io::{self, AnimationClip, FileObserver};
use meshsplat::kinematics::{fill_all_gaps, DEFAULT_THRESHOLD};
use meshsplat::raster::Background;
use meshsplat::synthetic::{icosphere, stick_body, BodyOptions};
use meshsplat::trainer::{evaluate, train_with, AvatarRenderer, TrainFrame, TrainOptions};
use meshsplat::types::{Camera, SkinnedMesh, Splat};
use meshsplat::{Error, Result};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "meshsplat", version, about = "Mesh-bound Gaussian splat avatars")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Articulated stick figure with a face patch.
    Body,
    /// Single-joint icosphere.
    Sphere,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect missing hands in a keypoint sequence and fill bracketed gaps.
    Preprocess {
        #[arg(long)]
        keypoints: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Filled keypoint sequence. Defaults to `<keypoints>.filled.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Gap report; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit body poses to a keypoint sequence.
    Fit {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        keypoints: PathBuf,
        /// Camera file with one camera, or one per frame. Defaults to a
        /// camera framing a `--width`×`--height` image.
        #[arg(long)]
        cameras: Option<PathBuf>,
        #[arg(long, default_value_t = 1080)]
        width: u32,
        #[arg(long, default_value_t = 1080)]
        height: u32,
        #[arg(long)]
        face_targets: Option<PathBuf>,
        /// Pose to start the first frame from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fitting options as JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        /// Fitted poses as an animation clip.
        #[arg(long)]
        out: PathBuf,
        /// Per-frame fitting report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Place initial splats on every triangle of a mesh.
    InitSplats {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long, default_value_t = 1)]
        per_polygon: usize,
        #[arg(long, default_value_t = 0.5)]
        scale_fraction: f64,
        #[arg(long, default_value_t = 0.5)]
        opacity: f64,
        #[arg(long, default_value = "0.5,0.5,0.5")]
        color: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize splats against posed views.
    Train {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        splats: PathBuf,
        /// Animation clip with one pose per image.
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        /// Foreground masks, one per image.
        #[arg(long, num_args = 1..)]
        masks: Vec<PathBuf>,
        /// Training options as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Refined poses, when pose refinement is enabled.
        #[arg(long)]
        poses_out: Option<PathBuf>,
    },
    /// Render one posed frame.
    Render {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        splats: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every pose of an animation clip.
    Animate {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        splats: PathBuf,
        #[arg(long)]
        animation: PathBuf,
        #[command(flatten)]
        view: ViewArgs,
        /// Receives frame_00000.png, frame_00001.png, ...
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare renders of posed splats with reference images.
    Metrics {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        splats: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value = "0,0,0")]
        background: String,
        /// Full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Write a viewer bundle.
    ExportViewer {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        splats: PathBuf,
        /// Animation clips to precompute frames for.
        #[arg(long, num_args = 1..)]
        clips: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Serve a viewer bundle and the pose endpoint.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
    },
    /// Write one of the built-in synthetic meshes.
    SynthMesh {
        #[arg(long, value_enum, default_value_t = SynthKind::Body)]
        kind: SynthKind,
        /// Icosphere subdivision level.
        #[arg(long, default_value_t = 2)]
        subdivisions: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, clap::Args)]
pub struct ViewArgs {
    /// Camera file; its first camera is used.
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    width: u32,
    #[arg(long, default_value_t = 512)]
    height: u32,
    #[arg(long, default_value = "0,0,0")]
    background: String,
}

impl ViewArgs {
    fn camera(&self) -> Result<Camera> {
        match &self.camera {
            Some(p) => Ok(io::load_cameras(p)?.remove(0)),
            None => Ok(init_camera(self.width, self.height)),
        }
    }
}

fn parse_rgb(s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("color '{s}': {e}")))?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([r, g, b]),
        _ => Err(Error::Config(format!("color '{s}' must be three values in [0, 1]"))),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    std::fs::write(path, io::to_json(v)?)?;
    Ok(())
}

fn load_asset(mesh: &Path, splats: &Path) -> Result<(SkinnedMesh, Vec<Splat>)> {
    let mesh = io::load_mesh(mesh)?;
    let splats = io::load_splats(splats, Some(mesh.num_triangles()))?;
    Ok((mesh, splats))
}

/// One camera per frame from a file holding one or `n`.
fn cameras_for(path: &Path, n: usize) -> Result<Vec<Camera>> {
    let cams = io::load_cameras(path)?;
    match cams.len() {
        1 => Ok(vec![cams[0].clone(); n]),
        m if m == n => Ok(cams),
        m => Err(Error::Dimension(format!("{m} cameras for {n} frames"))),
    }
}

fn load_view(path: &Path, cam: &Camera) -> Result<Image> {
    let img = io::load_image(path, Some((cam.width as usize, cam.height as usize)))?;
    if img.width != cam.width as usize || img.height != cam.height as usize {
        return Err(Error::Dimension(format!(
            "{} is {}x{}, its camera is {}x{}",
            path.display(),
            img.width,
            img.height,
            cam.width,
            cam.height
        )));
    }
    Ok(img)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { keypoints, threshold, out, report } => {
            let seq = io::load_keypoints(&keypoints)?;
            let filled = fill_all_gaps(&seq, threshold)?;
            let out = out.unwrap_or_else(|| keypoints.with_extension("filled.json"));
            io::store_keypoints(&out, &filled.sequence)?;
            let failed: Vec<_> = filled
                .failed
                .iter()
                .map(|(gap, reason)| json!({"gap": gap, "reason": reason}))
                .collect();
            let summary = json!({
                "gaps": filled.report.gaps,
                "unfillable": filled.report.unfillable,
                "failed": failed,
            });
            match report {
                Some(p) => write_json(&p, &summary),
                None => {
                    println!("{}", serde_json::to_string_pretty(&summary)?);
                    Ok(())
                }
            }
        }
        Command::Fit { mesh, keypoints, cameras, width, height, face_targets, init, config, fps, out, report } => {
            let mesh = io::load_mesh(&mesh)?;
            let seq = io::load_keypoints(&keypoints)?;
            let cams = match cameras {
                Some(p) => io::load_cameras(&p)?,
                None => vec![init_camera(width, height)],
            };
            let targets = match face_targets {
                Some(p) => io::load_face_targets(&p)?.to_vec3(),
                None => Vec::new(),
            };
            let init = init.map(|p| io::load_pose(&p)).transpose()?;
            let opts: FitOptions = config.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
            let fit = fit_sequence(&mesh, &seq, &cams, init.as_ref(), &targets, &opts)?;
            let clip = AnimationClip { name: "fit".into(), fps, poses: fit.poses };
            io::store_animation(&out, &clip)?;
            if let Some(p) = report {
                let frames: Vec<_> = (0..fit.reports.len())
                    .map(|i| match &fit.reports[i] {
                        Some(r) => json!({
                            "frame": i,
                            "iterations": r.iterations,
                            "loss_history": r.loss_history,
                            "loss": r.breakdown.to_json(),
                            "converged": r.converged,
                            "face_visible": r.face_visible,
                            "stop_reason": r.stop_reason,
                            "flagged": fit.flagged[i],
                        }),
                        None => json!({"frame": i, "flagged": fit.flagged[i], "error": fit.errors[i]}),
                    })
                    .collect();
                write_json(&p, &json!({ "frames": frames }))?;
            }
            let flagged = fit.flagged.iter().filter(|f| **f).count();
            eprintln!("fitted {} frames ({flagged} flagged)", clip.poses.len());
            Ok(())
        }
        Command::InitSplats { mesh, per_polygon, scale_fraction, opacity, color, seed, out } => {
            let mesh = io::load_mesh(&mesh)?;
            let opts = InitOptions { scale_fraction, per_polygon, color: parse_rgb(&color)?, opacity, seed };
            let splats = init_splats(&mesh, &opts)?;
            io::store_splats(&out, &splats)?;
            eprintln!("wrote {} splats", splats.len());
            Ok(())
        }
        Command::Train {
            mesh,
            splats,
            poses,
            cameras,
            images,
            masks,
            config,
            iterations,
            seed,
            log,
            checkpoint_dir,
            checkpoint_every,
            out,
            poses_out,
        } => {
            let (mesh, splats) = load_asset(&mesh, &splats)?;
            let clip = io::load_animation(&poses)?;
            let n = images.len();
            if clip.poses.len() != n || (!masks.is_empty() && masks.len() != n) {
                return Err(Error::Dimension(format!(
                    "{n} images, {} masks and {} poses",
                    masks.len(),
                    clip.poses.len()
                )));
            }
            let cams = cameras_for(&cameras, n)?;
            let mut frames = Vec::with_capacity(n);
            for i in 0..n {
                let mut image = load_view(&images[i], &cams[i])?;
                let alpha = match masks.get(i) {
                    Some(m) => {
                        let (w, h, a) = io::load_mask(m)?;
                        if (w, h) != (image.width, image.height) {
                            return Err(Error::Dimension(format!("{} is {w}x{h}", m.display())));
                        }
                        // the trainer expects the foreground premultiplied
                        for (p, a) in a.iter().enumerate() {
                            for c in 0..3 {
                                image.data[3 * p + c] *= a;
                            }
                        }
                        Some(a)
                    }
                    None => None,
                };
                frames.push(TrainFrame { pose: clip.poses[i].clone(), camera: cams[i].clone(), image, alpha });
            }
            let mut opts: TrainOptions = config.map(|p| read_json(&p)).transpose()?.unwrap_or_default();
            if let Some(v) = iterations {
                opts.iterations = v;
            }
            if let Some(v) = seed {
                opts.seed = v;
            }
            if let Some(v) = checkpoint_every {
                opts.checkpoint_every = v;
            }
            if let Some(d) = &checkpoint_dir {
                std::fs::create_dir_all(d)?;
            }
            let sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(std::io::sink()),
            };
            let mut observer = FileObserver { log: sink, checkpoint_dir, written: Vec::new() };
            let outcome = train_with(&mesh, &splats, &frames, &opts, &mut observer)?;
            observer.log.flush()?;
            io::store_splats(&out, &outcome.splats)?;
            if let Some(p) = poses_out {
                io::store_animation(&p, &AnimationClip { poses: outcome.poses.clone(), ..clip })?;
            }
            let last = outcome.log.iter().rev().find_map(|e| e["loss"]["total"].as_f64());
            println!(
                "{}",
                json!({
                    "iterations": outcome.checkpoint.iteration,
                    "final_loss": last,
                    "splats": outcome.splats.len(),
                    "pruned": outcome.pruned,
                    "nan_skips": outcome.nan_skips,
                    "halted": outcome.halted,
                    "checkpoints": observer.written,
                })
            );
            match outcome.halted {
                Some(reason) => Err(Error::Optimization(reason)),
                None => Ok(()),
            }
        }
        Command::Render { mesh, splats, pose, view, out } => {
            let (mesh, splats) = load_asset(&mesh, &splats)?;
            let pose = io::load_pose(&pose)?;
            let cam = view.camera()?;
            let bg = Background::Color(parse_rgb(&view.background)?);
            let r = AvatarRenderer::new(&mesh)?.render(&splats, &pose, &cam, &bg)?;
            io::store_image(&out, &r.output.image.clamped())
        }
        Command::Animate { mesh, splats, animation, view, out_dir } => {
            let (mesh, splats) = load_asset(&mesh, &splats)?;
            let clip = io::load_animation(&animation)?;
            let cam = view.camera()?;
            let bg = Background::Color(parse_rgb(&view.background)?);
            let renderer = AvatarRenderer::new(&mesh)?;
            std::fs::create_dir_all(&out_dir)?;
            for (i, pose) in clip.poses.iter().enumerate() {
                let r = renderer.render(&splats, pose, &cam, &bg)?;
                io::store_image(&out_dir.join(format!("frame_{i:05}.png")), &r.output.image.clamped())?;
            }
            eprintln!("wrote {} frames", clip.poses.len());
            Ok(())
        }
        Command::Metrics { mesh, splats, poses, cameras, images, background, json: json_out } => {
            let (mesh, splats) = load_asset(&mesh, &splats)?;
            let clip = io::load_animation(&poses)?;
            if clip.poses.len() != images.len() {
                return Err(Error::Dimension(format!("{} images for {} poses", images.len(), clip.poses.len())));
            }
            let cams = cameras_for(&cameras, images.len())?;
            let truth = images
                .iter()
                .zip(&cams)
                .map(|(p, c)| load_view(p, c))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate(&mesh, &splats, &clip.poses, &cams, &truth, parse_rgb(&background)?)?;
            println!("{:>6}  {:>9}  {:>7}  {:>9}", "frame", "psnr", "ssim", "ms");
            for (i, f) in report.frames.iter().enumerate() {
                println!("{i:>6}  {:>9.4}  {:>7.4}  {:>9.2}", f.psnr, f.ssim, f.render_ms);
            }
            println!(
                "{:>6}  {:>9.4}  {:>7.4}  {:>9.2}  (lpips {})",
                "mean", report.mean_psnr, report.mean_ssim, report.mean_render_ms, report.lpips
            );
            if let Some(p) = json_out {
                write_json(&p, &serde_json::to_value(&report)?)?;
            }
            Ok(())
        }
        Command::ExportViewer { mesh, splats, clips, out_dir } => {
            let (mesh, splats) = load_asset(&mesh, &splats)?;
            let clips = clips.iter().map(|p| io::load_animation(p)).collect::<Result<Vec<_>>>()?;
            let manifest = io::export_bundle(&out_dir, &mesh, &splats, &clips)?;
            eprintln!("exported {} files to {}", manifest.files().len() + 1, out_dir.display());
            Ok(())
        }
        Command::Serve { bundle, addr } => {
            let bundle = io::load_bundle(&bundle)?;
            crate::server::serve(bundle, &addr)?;
            Ok(())
        }
        Command::SynthMesh { kind, subdivisions, out } => {
            let mesh = match kind {
                SynthKind::Body => stick_body(&BodyOptions::default()),
                SynthKind::Sphere => icosphere(subdivisions),
            };
            io::store_mesh(&out, &mesh)
        }
    }
}
