use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::info;
use pgspot::eval::{benchmark_timing, evaluate, Lexicon, PredictedWord, Stage, MIN_REPETITIONS};
use pgspot::grm::{refine_results, GrmConfig, GrmWeights};
use pgspot::io::{
    load_checkpoint, load_dataset, load_mapset, parse_results, read_pgm, render_svg,
    save_checkpoint, save_dataset, save_mapset, write_pgm, DatasetEntry, ResultItem, ResultRecord,
};
use pgspot::labels::generate_label_maps;
use pgspot::numerics::OptimizerConfig;
use pgspot::postprocess::{spot, OrderMode, SpotConfig};
use pgspot::synth::{oracle_tcc, render_dataset, NoiseConfig, Scene, SynthConfig};
use pgspot::training::{
    cached_predictions, fit_grm, fit_toy_model, GrmTrainConfig, LossWeights, ToyConfig, ToyModel,
    TrainConfig,
};
use serde::Deserialize;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pgspot",
    version,
    about = "Point-gathering scene text spotting"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes and their annotations.
    Synth(SynthArgs),
    /// Write ground-truth map sets (with oracle character maps) for a dataset.
    Labelgen(LabelgenArgs),
    /// Train the patch model on a dataset.
    Train(TrainArgs),
    /// Train graph refinement on top of a frozen patch model.
    TrainGrm(TrainGrmArgs),
    /// Spot text from images and a model, or from stored map sets.
    Infer(InferArgs),
    /// Re-classify inferred results with graph refinement.
    Refine(RefineArgs),
    /// Score results against ground truth.
    Eval(EvalArgs),
    /// Time the forward, post-processing and refinement stages.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives `annotations.jsonl` and `images/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 192)]
    height: usize,
    #[arg(long, default_value_t = 3)]
    max_words: usize,
    /// Fraction of words turned upside down.
    #[arg(long, default_value_t = 0.0)]
    flip_fraction: f64,
    #[arg(long, default_value_t = 0.3)]
    curved_fraction: f64,
}

#[derive(Args)]
struct LabelgenArgs {
    #[arg(long)]
    data: PathBuf,
    /// Directory for one `<image stem>.pgms` file per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Loss weights for centre line, border, direction and characters.
    #[arg(long, default_value = "1,1,1,5")]
    lw: LossWeights,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    lines: LineArgs,
    /// Input patch side in map cells.
    #[arg(long, default_value_t = ToyConfig::default().patch)]
    patch: usize,
    /// Spotting metrics every N epochs (0: last epoch only).
    #[arg(long, default_value_t = 0)]
    metrics_every: usize,
    /// Training log (JSON lines); defaults to standard output.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimKind {
    Adam,
    Sgd,
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long, value_enum, default_value_t = OptimKind::Adam)]
    optimizer: OptimKind,
    /// Learning rate [default: 0.003 for `train`, 0.001 for `train-grm`].
    #[arg(long)]
    step: Option<f64>,
    /// Heavy-ball momentum, used by `sgd` only.
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
}

impl OptimArgs {
    fn config(&self, default: OptimizerConfig) -> OptimizerConfig {
        let default_step = match default {
            OptimizerConfig::Adam { step } | OptimizerConfig::Sgd { step, .. } => step,
        };
        let step = self.step.unwrap_or(default_step);
        match self.optimizer {
            OptimKind::Adam => OptimizerConfig::Adam { step },
            OptimKind::Sgd => OptimizerConfig::Sgd {
                step,
                momentum: self.momentum,
            },
        }
    }
}

/// Centre lines the character loss is trained on.
#[derive(Args)]
struct LineArgs {
    /// Sideways shift of the extra centre lines (0: centre line only).
    #[arg(long, default_value_t = TrainConfig::default().band_offset)]
    band_offset: f64,
    /// Cells the centre lines run past the word ends.
    #[arg(long, default_value_t = TrainConfig::default().end_margin)]
    end_margin: usize,
}

#[derive(Args)]
struct NoiseArgs {
    /// Gaussian noise on character logits.
    #[arg(long, default_value_t = 0.0)]
    tcc_noise: f64,
    /// Flip probability for centre-line cells.
    #[arg(long, default_value_t = 0.0)]
    tcl_flip: f64,
    /// Gaussian noise on border and direction offsets.
    #[arg(long, default_value_t = 0.0)]
    offset_noise: f64,
}

impl NoiseArgs {
    fn config(&self) -> NoiseConfig {
        NoiseConfig {
            tcl_flip: self.tcl_flip,
            offset_sigma: self.offset_noise,
            tcc_sigma: self.tcc_noise,
        }
    }
}

#[derive(Args)]
struct TrainGrmArgs {
    #[arg(long)]
    data: PathBuf,
    /// Frozen patch model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GrmTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = GrmTrainConfig::default().batch)]
    batch: usize,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    lines: LineArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Order {
    Direction,
    LeftToRight,
}

#[derive(Args)]
struct SpotArgs {
    /// Centre-line probability threshold.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, value_enum, default_value_t = Order::Direction)]
    order: Order,
}

impl SpotArgs {
    fn config(&self) -> SpotConfig {
        SpotConfig {
            threshold: self.threshold,
            order: match self.order {
                Order::Direction => OrderMode::Direction,
                Order::LeftToRight => OrderMode::LeftToRight,
            },
            ..SpotConfig::default()
        }
    }
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    /// Patch model checkpoint.
    #[arg(long, conflicts_with = "maps", required_unless_present = "maps")]
    model: Option<PathBuf>,
    /// Directory of map sets written by `labelgen`.
    #[arg(long)]
    maps: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Directory for one SVG overlay per image.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[command(flatten)]
    spot: SpotArgs,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output of `infer` for the same dataset.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    grm: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed for the optional prediction noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    /// Ground-truth dataset.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// `none`, `strong:FILE` (JSON lines of {"image", "words"}) or
    /// `generic:FILE` (one word per line).
    #[arg(long, default_value = "none")]
    lexicon: String,
    /// Full JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Refinement weights; freshly initialised ones are timed otherwise.
    #[arg(long)]
    grm: Option<PathBuf>,
    #[arg(long, default_value_t = MIN_REPETITIONS)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long)]
    single_thread: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = configure_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e:#}");
        let numeric = e.chain().any(|c| {
            c.downcast_ref::<pgspot::Error>()
                .is_some_and(pgspot::Error::is_numeric)
        });
        return ExitCode::from(if numeric { 3 } else { 2 });
    }
    ExitCode::SUCCESS
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PGSPOT_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PGSPOT_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Labelgen(a) => labelgen(a),
        Command::Train(a) => train(a),
        Command::TrainGrm(a) => train_grm(a),
        Command::Infer(a) => infer(a),
        Command::Refine(a) => refine(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn base_dir(dataset: &Path) -> PathBuf {
    dataset.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn stem(image: &str) -> String {
    Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| image.to_string())
}

fn load_entries(path: &Path) -> Result<Vec<DatasetEntry>> {
    let data = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(data.entries)
}

/// Dataset lines with their images; the line index doubles as the scene seed.
fn load_scenes(path: &Path) -> Result<(Vec<DatasetEntry>, Vec<Scene>)> {
    let entries = load_entries(path)?;
    let dir = base_dir(path);
    let scenes = entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let file = dir.join(&e.image);
            let image = read_pgm(&file).with_context(|| format!("reading {}", file.display()))?;
            if image.dims() != [e.height, e.width] {
                bail!(
                    "{} is {:?}, annotation says {}x{}",
                    file.display(),
                    image.dims(),
                    e.width,
                    e.height
                );
            }
            Ok(Scene {
                image,
                annotations: e.annotations.clone(),
                seed: i as u64,
                shortfall: false,
            })
        })
        .collect::<Result<_>>()?;
    Ok((entries, scenes))
}

fn load_model(path: &Path) -> Result<ToyModel> {
    let named = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ToyModel::from_named(&named)?)
}

fn load_grm(path: &Path) -> Result<GrmWeights> {
    let named = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(GrmWeights::from_named(&named)?)
}

fn write_json_lines<T: serde::Serialize>(out: &mut dyn std::io::Write, record: &T) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

fn log_sink(path: &Option<PathBuf>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(std::io::stdout()),
    })
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        width: a.width,
        height: a.height,
        max_words: a.max_words,
        min_words: SynthConfig::default().min_words.min(a.max_words),
        flip_fraction: a.flip_fraction,
        curved_fraction: a.curved_fraction,
        ..SynthConfig::default()
    };
    let scenes = render_dataset(a.seed, a.count, &cfg)?;
    fs::create_dir_all(a.out.join("images"))?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let image = format!("images/scene_{i:05}.pgm");
        write_pgm(&a.out.join(&image), &s.image)?;
        entries.push(DatasetEntry {
            image,
            width: s.width(),
            height: s.height(),
            annotations: s.annotations.clone(),
        });
    }
    save_dataset(&a.out.join("annotations.jsonl"), &entries)?;
    info!("wrote {} scenes to {}", entries.len(), a.out.display());
    Ok(())
}

fn labelgen(a: LabelgenArgs) -> Result<()> {
    let entries = load_entries(&a.data)?;
    fs::create_dir_all(&a.out)?;
    for e in &entries {
        let (h, w) = (
            pgspot::labels::map_extent(e.height),
            pgspot::labels::map_extent(e.width),
        );
        let mut maps = generate_label_maps(&e.annotations, h, w)?.maps;
        maps.tcc = oracle_tcc(&e.annotations, h, w)?;
        save_mapset(&a.out.join(format!("{}.pgms", stem(&e.image))), &maps)?;
    }
    info!("wrote {} map sets to {}", entries.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (_, scenes) = load_scenes(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        optimizer: a.optim.config(TrainConfig::default().optimizer),
        weights: a.lw,
        band_offset: a.lines.band_offset,
        end_margin: a.lines.end_margin,
        seed: a.seed,
        model: ToyConfig {
            patch: a.patch,
            ..ToyConfig::default()
        },
        metrics_every: a.metrics_every,
    };
    let mut sink = log_sink(&a.log)?;
    let mut log_err = None;
    let (model, _) = fit_toy_model(&scenes, &cfg, |r| {
        if let Err(e) = write_json_lines(&mut sink, r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    save_checkpoint(&a.out, model.params.entries())?;
    Ok(())
}

fn train_grm(a: TrainGrmArgs) -> Result<()> {
    let (_, scenes) = load_scenes(&a.data)?;
    let base = load_model(&a.model)?;
    let cfg = GrmTrainConfig {
        grm: GrmConfig {
            visual_in: base.config.hidden[1],
            ..GrmConfig::default()
        },
        epochs: a.epochs,
        batch: a.batch,
        optimizer: a.optim.config(GrmTrainConfig::default().optimizer),
        seed: a.seed,
        noise: a.noise.config(),
        band_offset: a.lines.band_offset,
        end_margin: a.lines.end_margin,
    };
    let mut sink = log_sink(&a.log)?;
    let mut log_err = None;
    let (weights, _) = fit_grm(&base, &scenes, &cfg, |r| {
        if let Err(e) = write_json_lines(&mut sink, r) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    save_checkpoint(&a.out, weights.params.entries())?;
    Ok(())
}

fn write_results(path: &Path, records: &[ResultRecord]) -> Result<()> {
    fs::write(path, pgspot::io::format_results(records)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn infer(a: InferArgs) -> Result<()> {
    let cfg = a.spot.config();
    let entries = load_entries(&a.data)?;
    let dir = base_dir(&a.data);
    let model = a.model.as_deref().map(load_model).transpose()?;
    let mut records = Vec::with_capacity(entries.len());
    for e in &entries {
        let results = match (&model, &a.maps) {
            (Some(m), _) => m.spot(&read_pgm(&dir.join(&e.image))?, &cfg)?,
            (None, Some(maps_dir)) => {
                let file = maps_dir.join(format!("{}.pgms", stem(&e.image)));
                spot(
                    &load_mapset(&file).with_context(|| format!("loading {}", file.display()))?,
                    &cfg,
                )
            }
            (None, None) => unreachable!("clap requires a model or map directory"),
        };
        records.push(ResultRecord {
            image: e.image.clone(),
            results: results.iter().map(ResultItem::from).collect(),
        });
    }
    write_results(&a.out, &records)?;
    if let Some(svg_dir) = &a.svg {
        fs::create_dir_all(svg_dir)?;
        for (e, r) in entries.iter().zip(&records) {
            let href = fs::canonicalize(dir.join(&e.image)).unwrap_or_else(|_| dir.join(&e.image));
            let svg = render_svg(&href.to_string_lossy(), e.width, e.height, &r.results);
            fs::write(svg_dir.join(format!("{}.svg", stem(&e.image))), svg)?;
        }
    }
    Ok(())
}

fn refine(a: RefineArgs) -> Result<()> {
    let (entries, scenes) = load_scenes(&a.data)?;
    let base = load_model(&a.model)?;
    let weights = load_grm(&a.grm)?;
    let text = fs::read_to_string(&a.results)
        .with_context(|| format!("reading {}", a.results.display()))?;
    let inferred = parse_results(&text)?;
    let noise = a.noise.config();
    let mut out = Vec::with_capacity(inferred.len());
    for rec in inferred {
        let i = entries
            .iter()
            .position(|e| e.image == rec.image)
            .ok_or_else(|| {
                anyhow!(
                    "result image {:?} is not in {}",
                    rec.image,
                    a.data.display()
                )
            })?;
        let (maps, fvis) = cached_predictions(&base, &scenes[i], &noise, a.seed)?;
        let coarse: Vec<_> = rec
            .results
            .iter()
            .enumerate()
            .map(|(k, r)| r.to_spotting(k))
            .collect();
        let refined = refine_results(&coarse, &maps.tcc, &fvis, &weights)?;
        out.push(ResultRecord {
            image: rec.image,
            results: refined.iter().map(ResultItem::from).collect(),
        });
    }
    write_results(&a.out, &out)
}

#[derive(Deserialize)]
struct LexiconLine {
    image: String,
    words: Vec<String>,
}

fn parse_lexicon(choice: &str, images: &[String]) -> Result<Lexicon> {
    if choice == "none" {
        return Ok(Lexicon::None);
    }
    let (kind, file) = choice
        .split_once(':')
        .ok_or_else(|| anyhow!("lexicon must be none, strong:FILE or generic:FILE"))?;
    let text = fs::read_to_string(file).with_context(|| format!("reading lexicon {file}"))?;
    match kind {
        "generic" => Ok(Lexicon::Generic(
            text.split_whitespace().map(str::to_string).collect(),
        )),
        "strong" => {
            let mut lists = vec![Vec::new(); images.len()];
            for (n, line) in text
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let l: LexiconLine = serde_json::from_str(line)
                    .with_context(|| format!("lexicon line {}", n + 1))?;
                if let Some(i) = images.iter().position(|im| *im == l.image) {
                    lists[i] = l.words;
                }
            }
            Ok(Lexicon::Strong(lists))
        }
        other => bail!("unknown lexicon kind {other:?}"),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let entries = load_entries(&a.gt)?;
    let text = fs::read_to_string(&a.results)
        .with_context(|| format!("reading {}", a.results.display()))?;
    let records = parse_results(&text)?;
    let mut preds: Vec<Vec<PredictedWord>> = vec![Vec::new(); entries.len()];
    for rec in &records {
        let i = entries
            .iter()
            .position(|e| e.image == rec.image)
            .ok_or_else(|| anyhow!("result image {:?} is not in the ground truth", rec.image))?;
        preds[i] = rec
            .results
            .iter()
            .map(|r| PredictedWord {
                polygon: r.polygon(),
                transcript: r.text.clone(),
            })
            .collect();
    }
    let images: Vec<String> = entries.iter().map(|e| e.image.clone()).collect();
    let lexicon = parse_lexicon(&a.lexicon, &images)?;
    let gts: Vec<_> = entries.into_iter().map(|e| e.annotations).collect();
    let report = evaluate(&preds, &gts, a.iou, &lexicon)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let (_, scenes) = load_scenes(&a.data)?;
    if scenes.is_empty() {
        bail!("{} has no images", a.data.display());
    }
    let model = load_model(&a.model)?;
    let weights = match &a.grm {
        Some(p) => load_grm(p)?,
        None => GrmWeights::new(
            GrmConfig {
                visual_in: model.config.hidden[1],
                ..GrmConfig::default()
            },
            0,
        ),
    };
    let predictions = scenes
        .iter()
        .map(|s| model.predict(&s.image))
        .collect::<pgspot::Result<Vec<_>>>()?;
    let cfg = SpotConfig::default();
    let coarse: Vec<_> = predictions.iter().map(|(m, _)| spot(m, &cfg)).collect();
    let n = scenes.len();
    let (mut i, mut j, mut k) = (0usize, 0usize, 0usize);
    let stages = vec![
        Stage::new("model forward", || {
            let s = &scenes[i % n];
            i += 1;
            model.predict(&s.image).map(|_| 1)
        }),
        Stage::new("post-processing", || {
            let (m, _) = &predictions[j % n];
            j += 1;
            Ok(spot(m, &cfg).len())
        }),
        Stage::new("graph refinement", || {
            let idx = k % n;
            k += 1;
            let (m, fvis) = &predictions[idx];
            refine_results(&coarse[idx], &m.tcc, fvis, &weights).map(|r| r.len())
        }),
    ];
    let report = benchmark_timing(stages, a.reps, a.warmup, a.single_thread)?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        let mut f = fs::File::create(out)?;
        f.write_all((serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    }
    Ok(())
}
