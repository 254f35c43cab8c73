//! Argument parsing and the subcommands.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cyclecorr::features::{
    attention_map, attention_map_with, hyperpixel, AttentionMap, EncoderParams, EncoderShape,
    FeatureStack, HeadParams, PooledSource,
};
use cyclecorr::matching::match_pair;
use cyclecorr::objectives::{train_step, TrainState};
use cyclecorr::search::{generate_synthetic_pairs, pck, select_layers, PckBasis, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse_basis, parse_pixel_loss, RunConfig};
use crate::dataset::{evaluate_dataset, record_name, render_table, Dataset};
use crate::error::{CliError, Result};
use crate::format::{load_checkpoint, load_stack, save_checkpoint};
use crate::fsio::{self, write_atomic};
use crate::pnm::{palette, pgm, Canvas};
use crate::selftest::{render_report, run_selftest};

#[derive(Debug, Parser)]
#[command(name = "cyclecorr", version, about = "Semantic correspondence matching, evaluation and toy training")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Pipeline settings shared by every subcommand. They override `--config`,
/// which overrides the built-in defaults.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Hyperpixel layer indices, e.g. `0,2,3`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// PCK thresholds, e.g. `0.05,0.10,0.15`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Skip Sinkhorn optimal transport.
    #[arg(long, global = true)]
    pub no_ot: bool,
    /// Skip Hough re-weighting.
    #[arg(long, global = true)]
    pub no_rhm: bool,
    /// Drop the correlation entropy term.
    #[arg(long, global = true)]
    pub no_entropy: bool,
    /// Sample crops uniformly instead of by attention.
    #[arg(long, global = true)]
    pub no_attention: bool,
    /// Pixel cycle loss: off, total or per-cell.
    #[arg(long, global = true, value_name = "MODE")]
    pub pixel_loss: Option<String>,
    /// PCK extent: img or bbox.
    #[arg(long, global = true)]
    pub basis: Option<String>,
    /// Affinity temperature.
    #[arg(long = "t", global = true, value_name = "T")]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Any configuration key, e.g. `--set lambda_p=1`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Match the keypoints of one pair.
    Match(MatchArgs),
    /// PCK table over an annotated dataset.
    Evaluate(EvaluateArgs),
    /// Choose hyperpixel layers by the cycle loss, without keypoint labels.
    Beamsearch(BeamArgs),
    /// Train the projection heads on a small dataset.
    TrainToy(TrainArgs),
    /// Export a stack's self-attention map as PGM.
    Attention(AttentionArgs),
    /// Write a synthetic dataset.
    GenSynth(SynthArgs),
    /// Run the gradient and invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory with `pairs.jsonl` and `<id>.fstk` stacks.
    #[arg(long)]
    pub data: PathBuf,
    /// Annotation file to use instead of `<data>/pairs.jsonl`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long, conflicts_with_all = ["src", "trg", "kps"])]
    pub data: Option<PathBuf>,
    /// Pair index within the dataset.
    #[arg(long, default_value_t = 0, requires = "data")]
    pub pair: usize,
    #[arg(long, requires_all = ["trg", "kps"])]
    pub src: Option<PathBuf>,
    #[arg(long)]
    pub trg: Option<PathBuf>,
    /// Source keypoints as `x,y;x,y;...` in pixels.
    #[arg(long)]
    pub kps: Option<String>,
    /// Ground-truth target keypoints, same syntax; enables PCK.
    #[arg(long, requires = "src")]
    pub trg_kps: Option<String>,
    /// Match through the query head of a training checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Matches JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PPM rendering of the matches over both attention maps.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for `report.json`, `report.txt` and per-pair `records/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BeamArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training pairs; a synthetic dataset from `--seed` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub pairs: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Directory for `checkpoint.fckp`, `loss.csv` and `config.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[arg(long)]
    pub stack: PathBuf,
    /// Pool through the query head of a checkpoint, over the `--layers` hyperpixel.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Keep the feature-grid resolution instead of resampling to image size.
    #[arg(long)]
    pub grid: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub pairs_per_category: Option<usize>,
    /// Feature noise σ.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Object centre jitter in cells.
    #[arg(long)]
    pub jitter: Option<usize>,
    /// Mirror instances at random.
    #[arg(long)]
    pub flip: bool,
}

impl CommonArgs {
    /// Defaults, then `THREADS`, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Ok(v) = std::env::var("THREADS") {
            cfg.set("threads", &v)?;
        }
        if let Some(path) = &self.config {
            cfg.apply_text(&fsio::read_text(path)?)?;
        }
        if let Some(l) = &self.layers {
            cfg.layers = l.clone();
        }
        if let Some(a) = &self.alpha {
            cfg.alphas = a.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.ot &= !self.no_ot;
        cfg.rhm &= !self.no_rhm;
        cfg.entropy &= !self.no_entropy;
        cfg.attention &= !self.no_attention;
        if let Some(p) = &self.pixel_loss {
            cfg.pixel_loss = parse_pixel_loss(p)?;
        }
        if let Some(b) = &self.basis {
            cfg.basis = parse_basis(b)?;
        }
        if let Some(t) = self.temperature {
            cfg.temperature = t;
        }
        if let Some(e) = self.eps {
            cfg.eps = e;
        }
        if let Some(n) = self.threads {
            cfg.threads = Some(n);
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `argv` (program name first) and runs it. Returns the exit code;
/// reports go to `out`, diagnostics to stderr.
pub fn main_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.common.resolve()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let mut report = String::new();
    pool.install(|| match &cli.command {
        Command::Match(a) => run_match(a, &cfg, &mut report),
        Command::Evaluate(a) => run_evaluate(a, &cfg, &mut report),
        Command::Beamsearch(a) => run_beamsearch(a, &cfg, &mut report),
        Command::TrainToy(a) => run_train(a, &cfg, &mut report),
        Command::Attention(a) => run_attention(a, &cfg, &mut report),
        Command::GenSynth(a) => run_gen_synth(a, &cfg, &mut report),
        Command::Selftest => run_selftest_command(&cfg, &mut report),
    })
    .and_then(|()| {
        out.write_all(report.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e))
    })
}

fn query_head(checkpoint: Option<&Path>) -> Result<Option<HeadParams>> {
    checkpoint
        .map(|p| load_checkpoint(p).map(|s| s.params.query))
        .transpose()
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

/// `x,y;x,y;...` in pixels.
pub fn parse_points(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(',')
                .ok_or_else(|| CliError::Usage(format!("keypoint {p:?} is not `x,y`")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Usage(format!("keypoint {p:?} is not numeric")))
            };
            Ok((parse(x)?, parse(y)?))
        })
        .collect()
}

#[derive(Serialize)]
struct MatchedPoint {
    src: (f64, f64),
    pred: (f64, f64),
}

#[derive(Serialize)]
struct PckReport {
    alphas: Vec<f64>,
    basis: PckBasis,
    values: Vec<f64>,
}

#[derive(Serialize)]
struct MatchReport {
    src_id: String,
    trg_id: String,
    matches: Vec<MatchedPoint>,
    diagnostics: cyclecorr::matching::MatchDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pck: Option<PckReport>,
}

fn run_match(a: &MatchArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let head = query_head(a.checkpoint.as_deref())?;
    let owned;
    let (src, trg, src_kps, truth, extent) = match (&a.data, &a.src) {
        (Some(dir), _) => {
            owned = Dataset::load(dir, None)?;
            let (ann, src, trg) = owned.pair(a.pair)?;
            ann.validate(Some(src.image_dims), Some(trg.image_dims))?;
            let extent = ann.pck_extent(cfg.basis, trg.image_dims);
            (src.clone(), trg.clone(), ann.src_kps.clone(), Some(ann.trg_kps.clone()), extent)
        }
        (None, Some(src_path)) => {
            let src = load_stack(src_path)?;
            let trg = load_stack(a.trg.as_ref().expect("clap requires --trg"))?;
            let kps = parse_points(a.kps.as_deref().expect("clap requires --kps"))?;
            let truth = a.trg_kps.as_deref().map(parse_points).transpose()?;
            if cfg.basis == PckBasis::Bbox && truth.is_some() {
                return Err(CliError::Usage("bbox PCK needs a dataset annotation".into()));
            }
            let extent = (trg.image_dims.0 as f64, trg.image_dims.1 as f64);
            (src, trg, kps, truth, extent)
        }
        (None, None) => return Err(CliError::Usage("match needs --data or --src/--trg/--kps".into())),
    };
    let out = match_pair(&src, &trg, &src_kps, &cfg.match_config(), head.as_ref())?;
    let pck = truth
        .as_ref()
        .map(|gt| {
            let values = cfg
                .alphas
                .iter()
                .map(|&alpha| pck(&out.predictions, gt, alpha, extent))
                .collect::<cyclecorr::Result<Vec<_>>>()?;
            Ok::<_, CliError>(PckReport { alphas: cfg.alphas.clone(), basis: cfg.basis, values })
        })
        .transpose()?;
    if let Some(path) = &a.overlay {
        let canvas = overlay(&src, &trg, &src_kps, &out.predictions, truth.as_deref())?;
        write_atomic(path, &canvas.to_ppm())?;
    }
    let body = to_json(&MatchReport {
        src_id: src.source_id.clone(),
        trg_id: trg.source_id.clone(),
        matches: src_kps
            .iter()
            .zip(&out.predictions)
            .map(|(&src, &pred)| MatchedPoint { src, pred })
            .collect(),
        diagnostics: out.diagnostics,
        pck,
    });
    match &a.out {
        Some(path) => write_atomic(path, body.as_bytes()),
        None => {
            report.push_str(&body);
            Ok(())
        }
    }
}

fn attention_image(stack: &FeatureStack) -> Result<Vec<f32>> {
    let (w, h) = stack.image_dims;
    Ok(attention_map(stack)?.rescaled_on(h as usize, w as usize)?)
}

/// Source and target side by side over their attention maps; each match is
/// a coloured line from source keypoint to prediction, truths as white dots.
fn overlay(
    src: &FeatureStack,
    trg: &FeatureStack,
    src_kps: &[(f64, f64)],
    preds: &[(f64, f64)],
    truth: Option<&[(f64, f64)]>,
) -> Result<Canvas> {
    let (sw, sh) = (src.image_dims.0 as usize, src.image_dims.1 as usize);
    let (tw, th) = (trg.image_dims.0 as usize, trg.image_dims.1 as usize);
    let mut canvas = Canvas::new(sw + tw, sh.max(th));
    let dim = |v: Vec<f32>| v.into_iter().map(|x| 0.15 + 0.5 * x).collect::<Vec<_>>();
    canvas.gray(0, 0, sw, &dim(attention_image(src)?));
    canvas.gray(sw, 0, tw, &dim(attention_image(trg)?));
    let px = |p: (f64, f64), dx: usize| ((p.0 + dx as f64).round() as i64, p.1.round() as i64);
    for (i, (&s, &p)) in src_kps.iter().zip(preds).enumerate() {
        let colour = palette(i);
        canvas.line(px(s, 0), px(p, sw), colour);
        canvas.square(px(s, 0), 1, colour);
        canvas.square(px(p, sw), 1, colour);
    }
    for &t in truth.unwrap_or_default() {
        canvas.square(px(t, sw), 0, [255, 255, 255]);
    }
    Ok(canvas)
}

fn run_evaluate(a: &EvaluateArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let head = query_head(a.checkpoint.as_deref())?;
    let ds = Dataset::load(&a.data.data, a.data.pairs.as_deref())?;
    let (table, records) = evaluate_dataset(&ds, &cfg.match_config(), head.as_ref(), &cfg.alphas, cfg.basis)?;
    let text = render_table(&table);
    if let Some(dir) = &a.out {
        let records_dir = dir.join("records");
        use rayon::prelude::*;
        records
            .par_iter()
            .enumerate()
            .try_for_each(|(i, r)| write_atomic(&records_dir.join(record_name(i, r)), to_json(r).as_bytes()))?;
        write_atomic(&dir.join("report.txt"), text.as_bytes())?;
        write_atomic(&dir.join("report.json"), to_json(&table).as_bytes())?;
    }
    report.push_str(&text);
    Ok(())
}

fn run_beamsearch(a: &BeamArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let ds = Dataset::load(&a.data.data, a.data.pairs.as_deref())?;
    let pairs: Vec<_> = (0..ds.annotations.len())
        .map(|i| ds.pair(i).map(|(_, s, t)| (s, t)))
        .collect::<Result<_>>()?;
    let result = select_layers(&pairs, &cfg.beam_config(), &cfg.cycle_config(), cfg.seed)?;
    #[derive(Serialize)]
    struct BeamReport<'a> {
        layers: &'a [usize],
        score: f64,
        evaluated: usize,
        beams: Vec<Vec<(&'a [usize], f64)>>,
    }
    let json = to_json(&BeamReport {
        layers: &result.best.layers,
        score: result.best.score,
        evaluated: result.evaluated,
        beams: result
            .beams
            .iter()
            .map(|b| b.iter().map(|s| (s.layers.as_slice(), s.score)).collect())
            .collect(),
    });
    if let Some(path) = &a.out {
        write_atomic(path, json.as_bytes())?;
    }
    let layers: Vec<String> = result.best.layers.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(
        report,
        "layers {} (cycle loss {:.4}, {} subsets scored)",
        layers.join(","),
        result.best.score,
        result.evaluated
    );
    Ok(())
}

fn run_train(a: &TrainArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let ds = match &a.data {
        Some(dir) => Dataset::load(dir, a.pairs.as_deref())?,
        None => generate_synthetic_pairs(cfg.seed, &SynthConfig::default())?.into(),
    };
    let train = cfg.train_config();
    let (_, first, _) = ds.pair(0)?;
    let layers = cfg.match_config().layer_ids(first);
    let channels = hyperpixel(first, &layers)?.channels();
    let mut state = match &a.resume {
        Some(path) => load_checkpoint(path)?,
        None => TrainState::new(EncoderParams::random(EncoderShape::for_channels(channels), cfg.seed), cfg.queue)?,
    };
    if state.params.query.shape().in_channels != channels {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} input channels, layers {layers:?} give {channels}",
            state.params.query.shape().in_channels
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut csv = String::from("step,total,pixel,image,entropy,lr\n");
    let start = state.step;
    for k in 0..cfg.steps {
        let i = rng.random_range(0..ds.annotations.len());
        let (_, src, trg) = ds.pair(i)?;
        let lr = train.optimizer.rate_at(state.step);
        let (next, loss) = train_step(&state, src, trg, &train, rng.random())?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{lr}",
            start + k,
            loss.total,
            loss.terms.pixel,
            loss.terms.image,
            loss.terms.entropy
        );
        state = next;
    }
    write_atomic(&a.out.join("loss.csv"), csv.as_bytes())?;
    write_atomic(&a.out.join("config.txt"), cfg.render().as_bytes())?;
    save_checkpoint(&a.out.join("checkpoint.fckp"), &state)?;
    let _ = writeln!(report, "trained {} steps; checkpoint at step {}", cfg.steps, state.step);
    Ok(())
}

fn run_attention(a: &AttentionArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let stack = load_stack(&a.stack)?;
    let map: AttentionMap = match query_head(a.checkpoint.as_deref())? {
        Some(head) => {
            let layers = cfg.match_config().layer_ids(&stack);
            let hyper = hyperpixel(&stack, &layers)?;
            let single = FeatureStack::new(vec![hyper], stack.image_dims, stack.source_id.clone())?;
            attention_map_with(&single, PooledSource::Head(&head))?
        }
        None => attention_map(&stack)?,
    };
    let (w, h, values) = if a.grid {
        let (h, w) = map.dims();
        (w, h, map.rescaled().to_vec())
    } else {
        let (w, h) = (stack.image_dims.0 as usize, stack.image_dims.1 as usize);
        (w, h, map.rescaled_on(h, w)?)
    };
    write_atomic(&a.out, &pgm(w, h, &values))?;
    let _ = writeln!(report, "wrote {w}x{h} attention map to {}", a.out.display());
    Ok(())
}

fn run_gen_synth(a: &SynthArgs, cfg: &RunConfig, report: &mut String) -> Result<()> {
    let mut synth = SynthConfig::default();
    if let Some(c) = a.categories {
        synth.categories = c;
    }
    if let Some(p) = a.pairs_per_category {
        synth.pairs_per_category = p;
    }
    if let Some(n) = a.noise {
        synth.noise = n;
    }
    if let Some(j) = a.jitter {
        synth.jitter = j;
    }
    synth.flip |= a.flip;
    let ds: Dataset = generate_synthetic_pairs(cfg.seed, &synth)?.into();
    ds.save(&a.out)?;
    let _ = writeln!(
        report,
        "wrote {} pairs over {} stacks to {}",
        ds.annotations.len(),
        ds.stacks.len(),
        a.out.display()
    );
    Ok(())
}

fn run_selftest_command(cfg: &RunConfig, report: &mut String) -> Result<()> {
    let checks = run_selftest(cfg.seed)?;
    report.push_str(&render_report(&checks));
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        failed => Err(CliError::SelfTest(failed)),
    }
}
