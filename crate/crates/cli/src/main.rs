use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use worldroam::dataset::{load_episode, load_meta, load_pairs, make_pair, save_pair, TrajectoryStyle};
use worldroam::denoiser::{load_checkpoint, save_checkpoint, ChunkDenoiser, Denoiser, DenoiserConfig, TrainingStage};
use worldroam::distill::{build_corpus, causal_init, train_teacher, Distiller, Domain, JdmdConfig, MetricSink, Stage, TeacherRole, TrainPlan};
use worldroam::engine::{evaluate_run, RunData, Session, SessionConfig, WarpCopyModel};
use worldroam::microworld::{build_scene, trajectory_from_commands, Difficulty, Episode};
use worldroam::rng::RngCursor;
use worldroam::{InteractionCommand, Intrinsics};
use worldroam_server::{FrameEncoding, ServerState};

#[derive(Parser)]
#[command(name = "worldroam", version, about = "Interactive world generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render reference/target training pairs from the micro-world.
    Mkdata(MkdataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Roam headlessly along a command script.
    Roam(RoamArgs),
    /// Score a roaming run against oracle renders.
    Eval(EvalArgs),
    /// Serve live sessions over WebSocket.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DifficultyArg {
    Static,
    Dynamic,
    /// Alternate static and dynamic scenes by seed.
    Mixed,
}

impl DifficultyArg {
    fn for_seed(self, seed: u64) -> Difficulty {
        match self {
            DifficultyArg::Static => Difficulty::Static,
            DifficultyArg::Dynamic => Difficulty::Dynamic,
            DifficultyArg::Mixed if seed % 2 == 0 => Difficulty::Static,
            DifficultyArg::Mixed => Difficulty::Dynamic,
        }
    }
}

#[derive(clap::Args)]
struct MkdataArgs {
    /// First scene seed; pair `i` uses `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per episode, a multiple of the chunk length.
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    difficulty: DifficultyArg,
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Square frame edge in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long = "chunk-len", default_value_t = 4)]
    chunk_len: usize,
    #[arg(long, default_value_t = 70.0)]
    fov: f64,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum StageArg {
    Teacher,
    Init,
    Jdmd,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// JSON training configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of pairs written by `mkdata`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding `real/` and `synthetic/` teacher checkpoints.
    #[arg(long)]
    teachers: Option<PathBuf>,
    /// Student checkpoint to continue from.
    #[arg(long)]
    student: Option<PathBuf>,
}

/// Contents of a `train --config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainConfig {
    model: DenoiserConfig,
    plan: TrainPlan,
    jdmd: JdmdConfig,
    teachers: Option<PathBuf>,
    student: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RoamArgs {
    #[arg(long, required_unless_present = "warp_copy")]
    ckpt: Option<PathBuf>,
    /// Use the warp-copy stub instead of a checkpoint.
    #[arg(long)]
    warp_copy: bool,
    /// Episode directory, or a pair directory whose reference is used.
    #[arg(long, required_unless_present = "scene_seed")]
    episode: Option<PathBuf>,
    /// Render a static reference clip for this scene instead of loading one.
    #[arg(long)]
    scene_seed: Option<u64>,
    /// JSON array of `{kind, magnitude}`.
    #[arg(long)]
    script: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the sampling noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Scene to render the oracle from; defaults to the run's own record.
    #[arg(long)]
    scene_seed: Option<u64>,
    #[arg(long, value_enum)]
    difficulty: Option<DifficultyArg>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, required_unless_present = "warp_copy")]
    ckpt: Option<PathBuf>,
    /// Serve the warp-copy stub at the default model shape.
    #[arg(long)]
    warp_copy: bool,
    #[arg(long)]
    episodes: PathBuf,
    /// PNG frame payloads instead of raw `f32`.
    #[arg(long)]
    png: bool,
    /// Static client bundle served at `/`.
    #[arg(long)]
    ui: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Mkdata(a) => mkdata(a),
        Command::Train(a) => train(a),
        Command::Roam(a) => roam(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn mkdata(a: MkdataArgs) -> Result<()> {
    if a.chunk_len == 0 || a.frames == 0 || a.frames % a.chunk_len != 0 {
        bail!("--frames {} must be a positive multiple of --chunk-len {}", a.frames, a.chunk_len);
    }
    let k = Intrinsics::from_fov(a.size, a.size, a.fov);
    let style = TrajectoryStyle::default();
    for i in 0..a.count as u64 {
        let seed = a.seed + i;
        let difficulty = a.difficulty.for_seed(seed);
        let pair = make_pair(seed, difficulty, &k, a.chunk_len, a.frames / a.chunk_len, &style)?;
        save_pair(&pair, &a.out.join(format!("pair_{seed:05}")), seed, difficulty)?;
    }
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

fn checkpoint_stage(stage: TrainingStage) -> Option<Stage> {
    match stage {
        TrainingStage::Untrained => None,
        TrainingStage::Teacher => Some(Stage::Teacher),
        TrainingStage::Init => Some(Stage::Init),
        TrainingStage::Jdmd => Some(Stage::Jdmd),
    }
}

fn load_model(dir: &Path, next: Stage) -> Result<Denoiser> {
    let (model, manifest) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    if let Some(prev) = checkpoint_stage(manifest.stage) {
        if !TrainPlan::can_follow(prev, next) {
            bail!("checkpoint {} is at stage {prev:?}; {next:?} cannot follow it", dir.display());
        }
    }
    Ok(model)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    let stage = match a.stage {
        StageArg::Teacher => Stage::Teacher,
        StageArg::Init => Stage::Init,
        StageArg::Jdmd => Stage::Jdmd,
    };
    cfg.plan.stage = stage;
    if let Some(seed) = a.seed {
        cfg.plan.seed = seed;
    }
    cfg.teachers = a.teachers.or(cfg.teachers);
    cfg.student = a.student.or(cfg.student);
    cfg.plan.validate()?;

    let pairs = load_pairs(&a.data).with_context(|| format!("loading pairs from {}", a.data.display()))?;
    if pairs.is_empty() {
        bail!("no pairs under {}", a.data.display());
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    let mut sink = MetricSink::to_file(&a.out.join("metrics.jsonl"))?;
    let iterations = cfg.plan.iterations as u64;
    let cursor = RngCursor::new(cfg.plan.seed, 0, iterations);
    let teachers = || cfg.teachers.clone().context("this stage needs --teachers");

    match stage {
        Stage::Teacher => {
            for (role, domain) in [(TeacherRole::Synthetic, Domain::Blurred), (TeacherRole::Real, Domain::Sharp)] {
                let corpus = build_corpus(&cfg.model, &pairs, domain)?;
                let mut model = Denoiser::new(cfg.model.clone(), cfg.plan.seed)?;
                let report = train_teacher(&mut model, &corpus, role, &cfg.plan, Some(&mut sink))?;
                save_checkpoint(&model, &a.out.join(role.label()), TrainingStage::Teacher, Some(role.label()), cursor, iterations)?;
                println!("{} teacher: final loss {:.5}", role.label(), report.losses.last().copied().unwrap_or(f64::NAN));
            }
        }
        Stage::Init => {
            let from = cfg.student.clone().map_or_else(|| teachers().map(|t| t.join("synthetic")), Ok)?;
            let mut student = load_model(&from, Stage::Init)?;
            let corpus = build_corpus(&student.config, &pairs, Domain::Blurred)?;
            let report = causal_init(&mut student, &corpus, &cfg.jdmd.student_schedule, &cfg.plan, Some(&mut sink))?;
            save_checkpoint(&student, &a.out.join("student"), TrainingStage::Init, Some("student"), cursor, iterations)?;
            println!("init: final loss {:.5}", report.losses.last().copied().unwrap_or(f64::NAN));
        }
        Stage::Jdmd => {
            let dir = teachers()?;
            let from = cfg.student.clone().context("jdmd needs --student")?;
            let student = load_model(&from, Stage::Jdmd)?;
            let real = Arc::new(load_model(&dir.join("real"), Stage::Jdmd)?);
            let synthetic = Arc::new(load_model(&dir.join("synthetic"), Stage::Jdmd)?);
            let corpus = build_corpus(&student.config, &pairs, Domain::Blurred)?;
            let mut d = Distiller::new(student, real, synthetic, cfg.plan.clone(), cfg.jdmd.clone())?;
            let losses = d.run(&corpus, Some(&mut sink))?;
            save_checkpoint(&d.student, &a.out.join("student"), TrainingStage::Jdmd, Some("student"), cursor, iterations)?;
            println!("jdmd: final loss {:.5}", losses.last().map_or(f64::NAN, |l| l.total));
        }
    }
    Ok(())
}

fn model_from(ckpt: Option<&Path>, warp_copy: bool, shape: DenoiserConfig) -> Result<Arc<dyn ChunkDenoiser>> {
    if warp_copy {
        return Ok(Arc::new(WarpCopyModel { config: shape }));
    }
    let dir = ckpt.context("a checkpoint is required")?;
    let (model, _) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    Ok(Arc::new(model))
}

/// The reference episode of `path`, which is either an episode or a pair.
fn open_episode(path: &Path) -> Result<(Episode, PathBuf)> {
    let dir = if path.join("meta.json").is_file() { path.to_path_buf() } else { path.join("reference") };
    let ep = load_episode(&dir).with_context(|| format!("loading episode {}", path.display()))?;
    Ok((ep, dir))
}

fn roam(a: RoamArgs) -> Result<()> {
    let commands: Vec<InteractionCommand> = serde_json::from_slice(&fs::read(&a.script).with_context(|| format!("reading {}", a.script.display()))?)
        .with_context(|| format!("parsing {}", a.script.display()))?;
    let (episode, name, seed, difficulty) = match (&a.episode, a.scene_seed) {
        (Some(path), _) => {
            let (ep, dir) = open_episode(path)?;
            let meta = load_meta(&dir)?;
            (ep, Some(path.display().to_string()), meta.seed, meta.difficulty)
        }
        (None, Some(seed)) => {
            let shape = match &a.ckpt {
                Some(dir) if !a.warp_copy => load_checkpoint(dir)?.0.config,
                _ => DenoiserConfig::default(),
            };
            let k = Intrinsics::from_fov(shape.frame_width, shape.frame_height, 70.0);
            let chunks = commands.len().max(1);
            let pair = make_pair(seed, Difficulty::Static, &k, shape.chunk_len, chunks, &TrajectoryStyle::default())?;
            (pair.reference, None, Some(seed), Some(Difficulty::Static))
        }
        (None, None) => bail!("--episode or --scene-seed is required"),
    };
    let shape = DenoiserConfig {
        frame_height: episode.intrinsics.height,
        frame_width: episode.intrinsics.width,
        chunk_len: episode.chunk_len,
        ..DenoiserConfig::default()
    };
    let model = model_from(a.ckpt.as_deref(), a.warp_copy, shape)?;
    let mut session = Session::new(model, Arc::new(episode), SessionConfig { seed: a.seed, ..SessionConfig::default() })?;
    let mut run = RunData::generate(&mut session, &commands)?;
    run.record.episode = name;
    run.record.scene_seed = seed;
    run.record.difficulty = difficulty;
    run.save(&a.out)?;
    println!("{} chunks in {:.3}s -> {}", commands.len(), run.record.wall_seconds, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = RunData::load(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let seed = a.scene_seed.or(run.record.scene_seed).context("the run records no scene; pass --scene-seed")?;
    let difficulty = match a.difficulty {
        Some(d) => d.for_seed(seed),
        None => run.record.difficulty.unwrap_or(Difficulty::Static),
    };
    let scene = build_scene(seed, difficulty);
    let origin = run.record.origin.to_pose()?;
    let scripted = trajectory_from_commands(&origin, &run.record.commands, run.record.chunk_len);
    let report = evaluate_run(&run, &scene, &scripted)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.report {
        fs::write(path, &json).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{json}");
    println!("chunks/sec: {:.3}", report.chunks_per_sec);
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut state = if a.warp_copy {
        fs::read_dir(&a.episodes).with_context(|| format!("episode store {}", a.episodes.display()))?;
        let encoding = if a.png { FrameEncoding::Png } else { FrameEncoding::F32 };
        ServerState::new(Arc::new(WarpCopyModel { config: DenoiserConfig::default() }), Some(a.episodes.clone()), encoding)
    } else {
        ServerState::load(a.ckpt.as_deref().context("--ckpt is required")?, &a.episodes, a.png)?
    };
    state.ui = a.ui;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
        println!("listening on ws://{}/ws", listener.local_addr()?);
        worldroam_server::serve(listener, Arc::new(state)).await?;
        Ok(())
    })
}
