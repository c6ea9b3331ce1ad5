//! `anchorloc`: reproducible experiments over the localization toolkit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use anchorloc::align::{
    align_gravity, align_gravity_weighted, align_rigid, read_correspondences, write_alignment_log, AlignmentReport, CorrespondenceWindow,
};
use anchorloc::features::{load_features, synth_features, ImageStyle, LocalFeatureSet, SyntheticWorld};
use anchorloc::fusion::{read_estimates, write_estimates};
use anchorloc::geo::{
    ate, read_geo_trajectory, write_geo_trajectory, write_odom_trajectory, Frame, GeoPoint, GeoStamp, GeoTrajectory,
    GravityVector,
};
use anchorloc::metrics::{summarize, write_detail_jsonl, write_report_csv, EvalRecord};
use anchorloc::pipeline::PipelineOutput;
use anchorloc::retrieval::{db_build, query_topk_named, read_db, write_db, FeatureDirectory, SyntheticSatellite};
use anchorloc::scenario::{vocabulary_training_set, Prepared, ScenarioConfig};
use anchorloc::tiles::{ground_truth_neighbors, read_manifest, write_manifest};
use anchorloc::vlad::{build_vocabulary_with_stats, encode, read_vocabulary, write_vocabulary};

#[derive(Parser)]
#[command(name = "anchorloc", version, about = "Map-anchored localization experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Scenario TOML; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scenario's tile manifest.
    Grid,
    /// Train a k-means vocabulary.
    BuildVocab {
        /// Feature files (.flf) or directories of them. Without any, the
        /// scenario's synthetic training set is used.
        #[arg(long = "features")]
        features: Vec<PathBuf>,
        #[arg(long)]
        n_c: Option<usize>,
    },
    /// Encode every tile of a manifest into a descriptor database.
    EncodeDb {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Directory of `<tile_id>.flf`; the synthetic world otherwise.
        #[arg(long)]
        features_dir: Option<PathBuf>,
    },
    /// Retrieval metrics for a query set.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// CSV `query_id,easting,northing`.
        #[arg(long)]
        queries: PathBuf,
        /// Directory of `<query_id>.flf`; synthetic features otherwise.
        #[arg(long)]
        features_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Style::Camera)]
        style: Style,
        /// Feature noise for synthetic queries; the scenario value when omitted.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Offline alignment of a correspondence CSV.
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Solver::Gravity)]
        solver: Solver,
        /// Gravity weight for the soft solver.
        #[arg(long, default_value_t = 1e9)]
        weight: f64,
    },
    /// Run the closed-loop simulation.
    Simulate {
        /// Also run with filtering toggled and write a paired comparison.
        #[arg(long)]
        ab_filtering: bool,
    },
    /// Absolute trajectory error between two trajectory CSVs.
    Ate {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Association window, seconds.
        #[arg(long, default_value_t = anchorloc::geo::DEFAULT_ATE_WINDOW)]
        window: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    Satellite,
    Camera,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Gravity,
    Rigid,
    Soft,
}

struct Ctx {
    seed: u64,
    config: ScenarioConfig,
    out: Option<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl Ctx {
    fn out_file(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn out_dir(&self, default: &str) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn write(&mut self, path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anchorloc::Result<()>) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        f(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
        self.artifacts.push(path.to_path_buf());
        Ok(())
    }

    fn write_json(&mut self, path: &Path, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(path, |w| Ok(w.write_all(text.as_bytes())?))
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(artifacts) => {
            for a in artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let config = match &cli.global.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("loading scenario {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    let mut ctx = Ctx {
        seed: cli.global.seed,
        config,
        out: cli.global.out,
        artifacts: Vec::new(),
    };
    match cli.command {
        Command::Grid => cmd_grid(&mut ctx)?,
        Command::BuildVocab { features, n_c } => cmd_build_vocab(&mut ctx, &features, n_c)?,
        Command::EncodeDb {
            manifest,
            vocab,
            features_dir,
        } => cmd_encode_db(&mut ctx, &manifest, &vocab, features_dir)?,
        Command::Eval {
            db,
            vocab,
            queries,
            features_dir,
            style,
            noise,
            k,
            n,
        } => cmd_eval(&mut ctx, &db, &vocab, &queries, features_dir, style, noise, k, n)?,
        Command::Align { input, solver, weight } => cmd_align(&mut ctx, &input, solver, weight)?,
        Command::Simulate { ab_filtering } => cmd_simulate(&mut ctx, ab_filtering)?,
        Command::Ate {
            estimate,
            truth,
            window,
        } => cmd_ate(&mut ctx, &estimate, &truth, window)?,
    }
    Ok(ctx.artifacts)
}

fn cmd_grid(ctx: &mut Ctx) -> Result<()> {
    let grid = ctx.config.grid.build()?;
    let path = ctx.out_file("manifest.csv");
    ctx.write(&path, |w| write_manifest(w, &grid))?;
    eprintln!("{} tiles", grid.len());
    Ok(())
}

fn collect_feature_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "flf"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_build_vocab(ctx: &mut Ctx, inputs: &[PathBuf], n_c: Option<usize>) -> Result<()> {
    let sets: Vec<LocalFeatureSet> = if inputs.is_empty() {
        let world = SyntheticWorld::new(ctx.config.world.clone())?;
        let grid = ctx.config.grid.build()?;
        vocabulary_training_set(&world, &grid, ctx.config.vpr.vocab_subsample)?
    } else {
        collect_feature_files(inputs)?
            .iter()
            .map(|f| load_features(f).with_context(|| format!("reading {}", f.display())))
            .collect::<Result<_>>()?
    };
    let n_c = n_c.unwrap_or(ctx.config.vpr.n_c);
    let (vocab, stats) = build_vocabulary_with_stats(&sets, n_c, ctx.seed, ctx.config.vpr.vocab_max_iters)?;
    eprintln!(
        "k-means: {} iterations, converged {}, inertia {:.6}",
        stats.iterations,
        stats.converged,
        stats.final_inertia()
    );
    eprintln!("cluster sizes: {:?}", stats.cluster_sizes);
    let path = ctx.out_file("vocab.flvb");
    ctx.write(&path, |w| write_vocabulary(w, &vocab))
}

fn cmd_encode_db(ctx: &mut Ctx, manifest: &Path, vocab: &Path, features_dir: Option<PathBuf>) -> Result<()> {
    let grid = read_manifest(open(manifest)?).with_context(|| format!("reading manifest {}", manifest.display()))?;
    let vocab = read_vocabulary(open(vocab)?).context("reading vocabulary")?;
    let db = match features_dir {
        Some(dir) => db_build(&grid, &vocab, &FeatureDirectory { dir })?,
        None => {
            let world = SyntheticWorld::new(ctx.config.world.clone())?;
            db_build(&grid, &vocab, &SyntheticSatellite { world: &world })?
        }
    };
    eprintln!("{} descriptors of length {}", db.len(), vocab.n_c() * vocab.d());
    let path = ctx.out_file("db.fldb");
    ctx.write(&path, |w| write_db(w, &db))
}

fn read_queries(path: &Path) -> Result<Vec<(String, GeoPoint)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("query_id,easting,northing") => {}
        other => bail!("{}: expected header query_id,easting,northing, got {other:?}", path.display()),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            bail!("{}: line {}: expected 3 fields", path.display(), i + 2);
        }
        let e: f64 = f[1].parse().with_context(|| format!("line {}", i + 2))?;
        let n: f64 = f[2].parse().with_context(|| format!("line {}", i + 2))?;
        out.push((f[0].to_string(), GeoPoint::new(e, n)));
    }
    if out.is_empty() {
        bail!("{}: no queries", path.display());
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    ctx: &mut Ctx,
    db: &Path,
    vocab: &Path,
    queries: &Path,
    features_dir: Option<PathBuf>,
    style: Style,
    noise: Option<f64>,
    k: usize,
    n: usize,
) -> Result<()> {
    use rand::SeedableRng;
    let db = read_db(open(db)?).context("reading database")?;
    let vocab = read_vocabulary(open(vocab)?).context("reading vocabulary")?;
    let grid = db.tile_grid(ctx.config.grid.fov)?;
    let queries = read_queries(queries)?;
    let world = match features_dir {
        Some(_) => None,
        None => Some(SyntheticWorld::new(ctx.config.world.clone())?),
    };
    let noise = noise.unwrap_or(ctx.config.vpr.query_noise);
    let style = match style {
        Style::Satellite => ImageStyle::Satellite,
        Style::Camera => ImageStyle::Camera,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut records = Vec::with_capacity(queries.len());
    for (id, pos) in &queries {
        let features = match (&features_dir, &world) {
            (Some(dir), _) => load_features(dir.join(format!("{id}.flf")))
                .with_context(|| format!("features for query {id}"))?,
            (None, Some(world)) => synth_features(world, pos, grid.fov(), style, noise, &mut rng)?,
            (None, None) => unreachable!(),
        };
        let q = encode(&features, &vocab).with_context(|| format!("encoding query {id}"))?;
        let result = query_topk_named(&db, &q, n, id.clone())?;
        let gt = ground_truth_neighbors(&grid, pos, n)?;
        let mut rec = EvalRecord::new(id.clone(), result.tile_ids(), gt);
        rec.retrieved_distances = result.matches.iter().map(|m| m.position.distance(pos)).collect();
        records.push(rec);
    }
    let summary = summarize(&records, k, n)?;
    print!("{}", summary.table("anchorloc"));
    let dir = ctx.out_dir("eval")?;
    ctx.write(&dir.join("report.csv"), |w| write_report_csv(w, &summary))?;
    ctx.write(&dir.join("detail.jsonl"), |w| write_detail_jsonl(w, &records, n))?;
    Ok(())
}

#[derive(Serialize)]
struct AlignmentJson {
    solver: &'static str,
    pairs: usize,
    rotation: [[f64; 3]; 3],
    yaw: f64,
    translation: [f64; 3],
    #[serde(flatten)]
    report: AlignmentReport,
}

fn cmd_align(ctx: &mut Ctx, input: &Path, solver: Solver, weight: f64) -> Result<()> {
    let pairs = read_correspondences(open(input)?).with_context(|| format!("reading {}", input.display()))?;
    let n = pairs.len();
    let window = CorrespondenceWindow::from_pairs(pairs, n.max(1))?;
    let (g_l, g_w) = (GravityVector::down(Frame::Local), GravityVector::down(Frame::World));
    let (name, report) = match solver {
        Solver::Gravity => ("gravity", align_gravity(&window, &g_l, &g_w)?),
        Solver::Rigid => ("rigid", align_rigid(&window)?),
        Solver::Soft => ("soft", align_gravity_weighted(&window, &g_l, &g_w, weight)?),
    };
    let m = report.transform.rotation.matrix();
    let t = report.transform.translation;
    let json = AlignmentJson {
        solver: name,
        pairs: n,
        rotation: [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ],
        yaw: report.transform.yaw(),
        translation: [t.x, t.y, t.z],
        report,
    };
    eprintln!(
        "yaw {:.6} rad, translation ({:.3}, {:.3}), rms {:.3} m, degenerate {}",
        json.yaw, t.x, t.y, report.rms_residual, report.degenerate
    );
    let path = ctx.out_file("alignment.json");
    ctx.write_json(&path, &json)
}

#[derive(Serialize)]
struct AteJson {
    mean: f64,
    sd: f64,
    points: usize,
}

fn write_run(ctx: &mut Ctx, dir: &Path, out: &PipelineOutput) -> Result<()> {
    ctx.write(&dir.join("estimates.csv"), |w| write_estimates(w, &out.estimates))?;
    ctx.write(&dir.join("truth.csv"), |w| write_geo_trajectory(w, &out.truth))?;
    ctx.write(&dir.join("odometry.csv"), |w| write_odom_trajectory(w, &out.odometry))?;
    ctx.write(&dir.join("alignment.jsonl"), |w| write_alignment_log(w, &out.alignment_log))?;
    let ate_json = out.ate.as_ref().map(|a| AteJson {
        mean: a.mean,
        sd: a.sd,
        points: a.per_point.len(),
    });
    ctx.write_json(&dir.join("ate.json"), &ate_json)?;
    ctx.write_json(&dir.join("diagnostics.json"), &out.diagnostics)?;
    let mut curve = String::from("timestamp,error\n");
    if let Some(a) = &out.ate {
        for p in &a.per_point {
            curve.push_str(&format!("{},{}\n", p.timestamp, p.error));
        }
    }
    ctx.write(&dir.join("error_over_time.csv"), |w| Ok(w.write_all(curve.as_bytes())?))
}

fn cmd_simulate(ctx: &mut Ctx, ab_filtering: bool) -> Result<()> {
    let mut cfg = ctx.config.clone();
    cfg.drift.seed = ctx.seed;
    let prepared = Prepared::new(&cfg)?;
    let out = prepared.run(&cfg)?;
    let dir = ctx.out_dir("sim")?;
    write_run(ctx, &dir, &out)?;
    match &out.ate {
        Some(a) => eprintln!("ATE mean {:.2} m, sd {:.2} m", a.mean, a.sd),
        None => eprintln!("filter never initialized; no ATE"),
    }

    if ab_filtering {
        let mut other = cfg.clone();
        other.vpr.filtering = !cfg.vpr.filtering;
        let out_b = prepared.run(&other)?;
        let sub = dir.join(if other.vpr.filtering { "filter_on" } else { "filter_off" });
        fs::create_dir_all(&sub)?;
        write_run(ctx, &sub, &out_b)?;
        let (on, off) = if cfg.vpr.filtering { (&out, &out_b) } else { (&out_b, &out) };
        let mut table = String::from("config,filtering,fp_rate,ate_mean,ate_sd,recall_at_1\n");
        for (name, flag, run) in [("filtered", true, on), ("unfiltered", false, off)] {
            let (m, s) = run.ate.as_ref().map_or((f64::NAN, f64::NAN), |a| (a.mean, a.sd));
            let r1 = run.diagnostics.recall.map_or(f64::NAN, |r| r.recall_at_1);
            table.push_str(&format!("{name},{flag},{},{m},{s},{r1}\n", cfg.vpr.fp_rate));
        }
        eprint!("{table}");
        ctx.write(&dir.join("ab_comparison.csv"), |w| Ok(w.write_all(table.as_bytes())?))?;
    }
    Ok(())
}

/// Reads either the estimate stream or a plain geo trajectory.
fn read_any_geo(path: &Path) -> Result<GeoTrajectory> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.starts_with(anchorloc::fusion::ESTIMATE_HEADER) {
        let recs = read_estimates(text.as_bytes())?;
        Ok(GeoTrajectory::new(
            recs.iter().map(|r| GeoStamp::new(r.timestamp, r.position())).collect(),
        )?)
    } else {
        Ok(read_geo_trajectory(text.as_bytes()).with_context(|| format!("parsing {}", path.display()))?)
    }
}

fn cmd_ate(ctx: &mut Ctx, estimate: &Path, truth: &Path, window: f64) -> Result<()> {
    let est = read_any_geo(estimate)?;
    let truth = read_any_geo(truth)?;
    let report = ate(&est, &truth, window)?;
    println!("ATE mean {:.3} m, sd {:.3} m over {} points", report.mean, report.sd, report.per_point.len());
    let path = ctx.out_file("ate.json");
    ctx.write_json(
        &path,
        &AteJson {
            mean: report.mean,
            sd: report.sd,
            points: report.per_point.len(),
        },
    )
}
