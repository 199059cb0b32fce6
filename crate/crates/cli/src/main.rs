//! Command line front end for the panomesh library.
//!
//! Exit codes: 0 success, 2 usage or I/O, 3 shape mismatch, 4 nothing to
//! evaluate.

mod io;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use panomesh::bench::{FafBench, MAX_BENCH_MR};
use panomesh::formats::{save_ply, write_checkpoint, DepthMap, MeshFeatureFile};
use panomesh::loss::{evaluate, DepthRange, MetricsInput};
use panomesh::mesh::{AdjacencyCache, MeshHierarchy};
use panomesh::net::{NetworkConfig, Trainer, TrainingSample};
use panomesh::projection::{
    band_limited_test_card, build_projection_table, pointcloud_from_equirect,
    pointcloud_from_faces, rmse, EquirectGrid,
};
use panomesh::synth::{render, SceneParams};
use panomesh::tensor::Tensor;
use panomesh::Error;

use crate::io::Loaded;

const MAX_MESH_MR: usize = 10;

#[derive(Parser)]
#[command(name = "panomesh", version, about = "Spherical mesh tools for panorama depth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh statistics.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
    /// Resample between equirectangular images and mesh faces.
    Project {
        #[command(subcommand)]
        command: ProjectCommand,
    },
    /// Reproject a distance map to an ASCII PLY point cloud.
    Pointcloud {
        /// Colour panorama (PNG).
        #[arg(long)]
        rgb: Option<PathBuf>,
        /// Distances as SFDM (equirectangular) or SFMF (per face).
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Depth metrics of a prediction against ground truth.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        min: f64,
        #[arg(long, default_value_t = 10.0)]
        max: f64,
    },
    /// Render a synthetic box room as rgb.png and depth.sfdm.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        /// Camera position as x,y,z fractions of the room size.
        #[arg(long, value_parser = parse_camera)]
        camera: Option<[f64; 3]>,
    },
    /// Overfit the toy network on one scene and save a checkpoint.
    TrainToy {
        /// Key-value network config; the toy preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding rgb.png and depth.sfdm.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Print metrics of the trained model on the scene.
        #[arg(long)]
        eval: bool,
    },
    /// Benchmarks.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum MeshCommand {
    Info {
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=MAX_MESH_MR as i64))]
        mr: u32,
    },
}

#[derive(Subcommand)]
enum ProjectCommand {
    /// Equirectangular image (PNG or SFDM) to SFMF face values.
    E2s {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mr: u32,
        /// Expected image width.
        #[arg(long)]
        width: Option<usize>,
        /// Expected image height.
        #[arg(long)]
        height: Option<usize>,
    },
    /// SFMF face values to a PNG or SFDM image.
    S2e {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Expected mesh level of the input.
        #[arg(long)]
        mr: Option<u32>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Image to compare against; prints the RMSE.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Write the smooth single-channel test card as SFDM.
    TestCard {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, default_value_t = 512)]
        height: usize,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Mesh convolution passes with and without FAF caching.
    Faf {
        #[arg(long)]
        mr: usize,
        #[arg(long, default_value_t = 10)]
        layers: usize,
        #[arg(long)]
        no_cache: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match core {
        Some(Error::Shape(_)) => 3,
        Some(Error::Evaluation(_)) => 4,
        Some(Error::Topology(..) | Error::Geometry(_)) => 1,
        _ => 2,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mesh {
            command: MeshCommand::Info { mr },
        } => mesh_info(mr as usize),
        Command::Project { command } => match command {
            ProjectCommand::E2s {
                input,
                out,
                mr,
                width,
                height,
            } => project_e2s(&input, &out, mr as usize, width, height),
            ProjectCommand::S2e {
                input,
                out,
                mr,
                width,
                height,
                reference,
            } => project_s2e(&input, &out, mr.map(|m| m as usize), width, height, reference.as_deref()),
            ProjectCommand::TestCard { out, width, height } => {
                let card = band_limited_test_card(&EquirectGrid::new(width, height)?);
                io::save_image(&out, &card)
            }
        },
        Command::Pointcloud { rgb, depth, out } => pointcloud(rgb.as_deref(), &depth, &out),
        Command::Eval { gt, pred, min, max } => eval(&gt, &pred, DepthRange::new(min, max)?),
        Command::Synth {
            seed,
            out,
            width,
            height,
            camera,
        } => synth(seed, &out, width, height, camera),
        Command::TrainToy {
            config,
            scene,
            steps,
            out,
            eval,
        } => train_toy(config.as_deref(), &scene, steps, &out, eval),
        Command::Bench {
            command: BenchCommand::Faf {
                mr,
                layers,
                no_cache,
            },
        } => bench_faf(mr, layers, !no_cache),
    }
}

fn mesh_info(mr: usize) -> Result<()> {
    let hierarchy = MeshHierarchy::new();
    let start = Instant::now();
    let level = hierarchy.level(mr);
    let geometry_time = start.elapsed();
    let cache = AdjacencyCache::new();
    let start = Instant::now();
    let mesh = cache.get_mesh(&hierarchy, mr);
    let faf_time = start.elapsed();
    cache.get_mesh(&hierarchy, mr);
    mesh.check_invariants()?;
    let stats = cache.stats();
    println!("mr={mr}");
    println!("faces={}", level.face_count());
    println!("vertices={}", level.vertex_count());
    println!("geometry_ms={:.3}", geometry_time.as_secs_f64() * 1e3);
    println!("faf_build_ms={:.3}", faf_time.as_secs_f64() * 1e3);
    println!("cache_hits={} cache_misses={}", stats.hits, stats.misses);
    Ok(())
}

fn expect_image(loaded: Loaded, path: &Path) -> Result<Tensor> {
    match loaded {
        Loaded::Image(t) => Ok(t),
        Loaded::Faces(_) => {
            Err(Error::Usage(format!("{} holds face values, not an image", path.display())).into())
        }
    }
}

fn project_e2s(
    input: &Path,
    out: &Path,
    mr: usize,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let image = expect_image(io::load(input)?, input)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if width.is_some_and(|x| x != w) || height.is_some_and(|x| x != h) {
        return Err(Error::Shape(format!(
            "{} is {w}x{h}, expected {}x{}",
            input.display(),
            width.unwrap_or(w),
            height.unwrap_or(h)
        ))
        .into());
    }
    check_mr(mr)?;
    let table = build_projection_table(EquirectGrid::new(w, h)?, &MeshHierarchy::new(), mr)?;
    let faces = table.e2s_resample(&image)?;
    MeshFeatureFile::from_tensor(mr, &faces)?
        .write(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("faces={} channels={}", faces.shape()[0], faces.shape()[1]);
    Ok(())
}

fn check_mr(mr: usize) -> Result<()> {
    if mr > MAX_MESH_MR {
        return Err(Error::Usage(format!("mr {mr} above limit {MAX_MESH_MR}")).into());
    }
    Ok(())
}

fn project_s2e(
    input: &Path,
    out: &Path,
    mr: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    reference: Option<&Path>,
) -> Result<()> {
    let Loaded::Faces(file) = io::load(input)? else {
        return Err(Error::Usage(format!("{} is not an SFMF file", input.display())).into());
    };
    if mr.is_some_and(|m| m != file.mr) {
        return Err(Error::Shape(format!(
            "{} is at mr {}, expected {}",
            input.display(),
            file.mr,
            mr.unwrap_or(file.mr)
        ))
        .into());
    }
    check_mr(file.mr)?;
    let (w, h) = match (width, height) {
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) => (w, w / 2),
        (None, Some(h)) => (2 * h, h),
        (None, None) => (4 << file.mr, 2 << file.mr),
    };
    let table = build_projection_table(EquirectGrid::new(w, h)?, &MeshHierarchy::new(), file.mr)?;
    let image = table.s2e_resample(&file.to_tensor())?;
    io::save_image(out, &image)?;
    println!("width={w} height={h} channels={}", file.channels);
    if let Some(reference) = reference {
        let expected = expect_image(io::load(reference)?, reference)?;
        println!("rmse={:?}", rmse(&expected, &image)?);
    }
    Ok(())
}

fn pointcloud(rgb: Option<&Path>, depth: &Path, out: &Path) -> Result<()> {
    let colors = rgb.map(io::load_png_rgb).transpose()?;
    let cloud = match io::load(depth)? {
        Loaded::Image(t) => {
            let (h, w) = (t.shape()[0], t.shape()[1]);
            if t.shape()[2] != 1 {
                return Err(Error::Usage(format!("{} is not a distance map", depth.display())).into());
            }
            if let Some((cw, ch, _)) = &colors {
                if (*cw, *ch) != (w, h) {
                    return Err(Error::Shape(format!(
                        "colour image {cw}x{ch} vs distance map {w}x{h}"
                    ))
                    .into());
                }
            }
            let rgb = colors.as_ref().map(|c| c.2.as_slice());
            pointcloud_from_equirect(&EquirectGrid::new(w, h)?, t.data(), rgb)?
        }
        Loaded::Faces(file) => {
            if file.channels != 1 {
                return Err(Error::Shape(format!(
                    "face distances need one channel, got {}",
                    file.channels
                ))
                .into());
            }
            check_mr(file.mr)?;
            let hierarchy = MeshHierarchy::new();
            let face_rgb = match &colors {
                Some((w, h, px)) => {
                    let table = build_projection_table(EquirectGrid::new(*w, *h)?, &hierarchy, file.mr)?;
                    let data = px.iter().flat_map(|p| p.map(f64::from)).collect();
                    let sampled = table.e2s_resample(&Tensor::new([*h, *w, 3], data)?)?;
                    Some(
                        sampled
                            .data()
                            .chunks(3)
                            .map(|c| [0, 1, 2].map(|i| c[i].round().clamp(0.0, 255.0) as u8))
                            .collect::<Vec<_>>(),
                    )
                }
                None => None,
            };
            let distances = file.to_tensor();
            let level = hierarchy.level(file.mr);
            pointcloud_from_faces(level.centers(), distances.data(), face_rgb.as_deref())?
        }
    };
    save_ply(out, &cloud).with_context(|| format!("writing {}", out.display()))?;
    println!("points={}", cloud.len());
    Ok(())
}

fn eval(gt: &Path, pred: &Path, range: DepthRange) -> Result<()> {
    let values = |path: &Path| -> Result<Tensor> {
        Ok(match io::load(path)? {
            Loaded::Image(t) => t,
            Loaded::Faces(f) => f.to_tensor(),
        })
    };
    let (g, p) = (values(gt)?, values(pred)?);
    let report = evaluate(MetricsInput {
        gt: g.data(),
        pr: p.data(),
        range,
    })
    .map_err(|e| match e {
        Error::Shape(_) => Error::Shape(format!("{:?} vs {:?}", g.shape(), p.shape())),
        other => other,
    })?;
    println!("{report}");
    Ok(())
}

fn parse_camera(s: &str) -> std::result::Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected x,y,z".to_string())
}

fn synth(seed: u64, out: &Path, width: usize, height: usize, camera: Option<[f64; 3]>) -> Result<()> {
    let scene = render(&SceneParams {
        width,
        height,
        seed,
        camera,
    })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    io::save_png_rgb(&out.join("rgb.png"), width, height, &scene.rgb)?;
    DepthMap::from_tensor(&scene.distance_tensor())?
        .write(out.join("depth.sfdm"))
        .with_context(|| format!("writing into {}", out.display()))?;
    let (lo, hi) = scene
        .distance
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    let [x, y, z] = scene.room.size;
    let [cx, cy, cz] = scene.room.camera;
    println!("room={x:.3}x{y:.3}x{z:.3} camera={cx:.3},{cy:.3},{cz:.3}");
    println!("distance_min={lo:.4} distance_max={hi:.4}");
    Ok(())
}

fn train_toy(config: Option<&Path>, scene: &Path, steps: usize, out: &Path, with_eval: bool) -> Result<()> {
    let config = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            NetworkConfig::parse(&text)?
        }
        None => NetworkConfig::toy(),
    };
    let (w, h, px) = io::load_png_rgb(&scene.join("rgb.png"))?;
    let depth = io::load_depth(&scene.join("depth.sfdm"))?;
    if (depth.width, depth.height) != (w, h) || (w, h) != (config.image_w, config.image_h) {
        return Err(Error::Shape(format!(
            "scene is {w}x{h} rgb / {}x{} depth, network expects {}x{}",
            depth.width, depth.height, config.image_w, config.image_h
        ))
        .into());
    }
    let rgb = Tensor::new([h, w, 3], px.iter().flat_map(|p| p.map(|c| f64::from(c) / 255.0)).collect())?;
    let mut trainer = Trainer::new(&config)?;
    let sample = TrainingSample::new(&rgb, &depth.to_tensor(), trainer.resources(), DepthRange::STANDARD)?;
    let mut initial = None;
    for step in 0..steps {
        let loss = trainer.train_step(&sample)?;
        initial.get_or_insert(loss);
        println!("step={step} loss={loss:?}");
    }
    if let Some(initial) = initial {
        let last = trainer.loss(&sample)?;
        println!("initial_loss={initial:?} final_loss={last:?} ratio={:?}", last / initial);
    }
    if with_eval {
        println!("{}", trainer.evaluate(&sample)?);
    }
    write_checkpoint(out, trainer.params()).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn bench_faf(mr: usize, layers: usize, cached: bool) -> Result<()> {
    if mr > MAX_BENCH_MR {
        return Err(Error::Usage(format!("mr {mr} above limit {MAX_BENCH_MR}")).into());
    }
    let report = FafBench::single(mr, layers, cached).run()?;
    println!(
        "mr={mr} layers={layers} cache={} faf_computations={} wall_ms={:.3}",
        if cached { "on" } else { "off" },
        report.faf_computations,
        report.elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}
