//! The `cfs-curate` command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for data or format errors.
//! `CFS_CURATE_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfs::{check_distance_identity, count_for_ratio, filter_top, score_corpus, ScoreEntry, ScoreTable, TheoremProbe};
use crate::cka::{augment, invariance_report, AugmentKind, AugmentationSpec};
use crate::divergence::{build_stumps, erb_bound_terms, hdh_detail, BoundInputs, BoundTerms, HdhDetail, Hypothesis};
use crate::error::{CurateError, Result};
use crate::gradcheck::{check_model_gradients, perturb_params, GradCheckOptions};
use crate::image::{images_to_tensor, Image};
use crate::io::{
    read_embeddings, read_image_ppm, read_report, synth_corpus, write_embeddings, write_image_ppm, DomainShift,
    Report, SynthConfig,
};
use crate::selection::{compare_strategies, SelectionConfig, SelectionReport, Strategy, TargetSubspaceProxy};
use crate::stems::{StemConfig, StemVariant};
use crate::tensor::Tensor;
use crate::vit::{embed_corpus, init_params, EncodeMode, ModelParams, ViTConfig};

pub const THREADS_ENV: &str = "CFS_CURATE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cfs-curate", version, about = "Curate pre-training data by Catastrophic Forgetting Score")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a directory of PPM images into an embedding file.
    Embed(EmbedArgs),
    /// Score records from source-proxy and target-proxy embeddings.
    Score(ScoreArgs),
    /// Keep the top-ranked ids of a score report.
    Filter(FilterArgs),
    /// Compare random, cluster and CFS selection at equal budget.
    Select(SelectArgs),
    /// CKA between original and augmented features of an image directory.
    Cka(CkaArgs),
    /// Apply one augmentation to a PPM image.
    Augment(AugmentArgs),
    /// Empirical HΔH distance between two embedding files over threshold stumps.
    Hdh(HdhArgs),
    /// Evaluate the excess-risk bound.
    Bound(BoundArgs),
    /// Write a synthetic source/target corpus of PPM images.
    Synth(SynthArgs),
    /// Run the distance-identity and gradient self-tests.
    Check(CheckArgs),
}

fn parse_unit_open(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1)"))
    }
}

fn parse_ratio(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is outside (0, 1]"))
    }
}

fn parse_probability(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn parse_stem(s: &str) -> std::result::Result<StemVariant, String> {
    s.parse().map_err(|e: CurateError| e.to_string())
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    match s {
        "random" => Ok(Strategy::Random),
        "cluster" => Ok(Strategy::Cluster),
        "cfs" => Ok(Strategy::Cfs),
        _ => Err(format!("unknown strategy {s:?} (random, cluster, cfs)")),
    }
}

/// `kind` or `kind=magnitude`.
fn parse_augmentation(s: &str) -> std::result::Result<AugmentationSpec, String> {
    let (kind, magnitude) = match s.split_once('=') {
        Some((k, m)) => (k, Some(m.parse::<f64>().map_err(|e| format!("{e}"))?)),
        None => (s, None),
    };
    let kind: AugmentKind = kind.parse().map_err(|e: CurateError| e.to_string())?;
    let spec = AugmentationSpec::new(kind, magnitude.unwrap_or(kind.default_magnitude()));
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_stem, default_value = "ics")]
    pub stem: StemVariant,
    #[arg(long, default_value_t = 16)]
    pub patch: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
}

impl ModelArgs {
    fn build(&self, height: usize, width: usize) -> Result<(ViTConfig, ModelParams)> {
        let stem = StemConfig::for_variant(self.stem, self.patch, self.dim)?;
        let config = ViTConfig::new(stem, self.depth, self.heads, height, width);
        let params = init_params(self.seed, &config)?;
        Ok((config, params))
    }
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Directory of `.ppm` images; ids are file stems, in sorted order.
    #[arg(long)]
    pub images: PathBuf,
    /// Emit target-adapted features: project onto the principal subspace of
    /// these images' features.
    #[arg(long)]
    pub target_images: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    /// Normalize each image alone instead of the whole directory as one batch.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub per_image: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Embeddings under the source proxy.
    #[arg(long)]
    pub source: PathBuf,
    /// Embeddings of the same records under the target proxy.
    #[arg(long)]
    pub target: PathBuf,
    /// Also count records with score ≥ 1 − ε²/8.
    #[arg(long, value_parser = parse_unit_open)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Score report written by `score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long, value_parser = parse_ratio, conflicts_with = "n_prime", required_unless_present = "n_prime")]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub n_prime: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// Source records under the source proxy.
    #[arg(long)]
    pub source: PathBuf,
    /// Source records under the target proxy.
    #[arg(long)]
    pub adapted: PathBuf,
    /// Target records under the source proxy.
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_parser = parse_ratio, default_value_t = 0.5)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::selection::DEFAULT_CLUSTERS)]
    pub k: usize,
    #[arg(long, value_parser = parse_strategy, value_delimiter = ',', default_value = "random,cluster,cfs")]
    pub strategies: Vec<Strategy>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CkaArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub images: PathBuf,
    /// Comma-separated `kind[=magnitude]`; defaults to all six kinds.
    #[arg(long, value_parser = parse_augmentation, value_delimiter = ',')]
    pub augment: Vec<AugmentationSpec>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, value_parser = parse_augmentation)]
    pub spec: AugmentationSpec,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HdhArgs {
    #[arg(long)]
    pub u1: PathBuf,
    #[arg(long)]
    pub u2: PathBuf,
    /// Feature dimensions to build stumps on; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub max_thresholds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundArgs {
    #[arg(long, value_parser = parse_probability)]
    pub d_hdh: f64,
    #[arg(long, value_parser = parse_probability)]
    pub f_hat_t: f64,
    #[arg(long, value_parser = parse_probability)]
    pub f_t_star: f64,
    #[arg(long, value_parser = parse_probability)]
    pub f_s_star: f64,
    #[arg(long)]
    pub vc_dim: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, value_parser = parse_unit_open, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = DomainShift::default().brightness_offset)]
    pub brightness_offset: f64,
    #[arg(long, default_value_t = DomainShift::default().hue_rotation)]
    pub hue_rotation: f64,
    #[arg(long, default_value_t = DomainShift::default().noise_sigma)]
    pub noise_sigma: f64,
    #[arg(long, value_parser = parse_probability, default_value_t = 0.2)]
    pub extreme_fraction: f64,
    /// Output directory; receives `source/`, `target/` and `manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub pairs: usize,
    #[arg(long, value_parser = parse_unit_open, default_value_t = 0.5)]
    pub epsilon: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// Error raised while running a subcommand.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(CurateError),
}

impl From<CurateError> for CliError {
    fn from(e: CurateError) -> Self {
        CliError::Data(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn emit<C: Serialize, R: Serialize>(report: &Report<C, R>, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => report.write(path)?,
        None => print!("{}", report.to_json()?),
    }
    Ok(())
}

/// `.ppm` files of a directory sorted by file name, with their stems as ids.
fn load_image_dir(dir: &Path) -> Result<(Vec<String>, Vec<Image>)> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CurateError::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| CurateError::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CurateError::EmptyInput(format!("no .ppm files in {}", dir.display())));
    }
    let ids = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let images = paths.iter().map(|p| read_image_ppm(p)).collect::<Result<_>>()?;
    Ok((ids, images))
}

fn embed_dir(model: &ModelArgs, dir: &Path, mode: EncodeMode) -> Result<crate::cfs::EmbeddingSet> {
    let (ids, images) = load_image_dir(dir)?;
    let (config, params) = model.build(images[0].height(), images[0].width())?;
    embed_corpus(ids, &images_to_tensor(&images)?, &config, &params, mode)
}

fn run_embed(args: &EmbedArgs) -> CliResult<()> {
    let mode = if args.per_image { EncodeMode::PerImage } else { EncodeMode::Batch };
    let source = embed_dir(&args.model, &args.images, mode)?;
    let set = match &args.target_images {
        None => source,
        Some(dir) => {
            let target = embed_dir(&args.model, dir, mode)?;
            TargetSubspaceProxy::fit(&target, args.rank)?.apply_set(&source)?
        }
    };
    write_embeddings(&set, &args.out)?;
    eprintln!("wrote {} × {} features to {}", set.len(), set.dim(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreConfigEcho {
    pub source: String,
    pub target: String,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResults {
    pub probe: Option<ProbeSummary>,
    pub entries: Vec<ScoreEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub epsilon: f64,
    pub threshold: f64,
    pub admitted: usize,
}

fn run_score(args: &ScoreArgs) -> CliResult<()> {
    let s = read_embeddings(&args.source)?;
    let t = read_embeddings(&args.target)?;
    let table = score_corpus(&s, &t)?;
    let probe = match args.epsilon {
        Some(eps) => {
            let p = TheoremProbe::new(eps)?;
            Some(ProbeSummary {
                epsilon: eps,
                threshold: p.threshold,
                admitted: table.entries().iter().filter(|e| p.admits(e.score)).count(),
            })
        }
        None => None,
    };
    let report = Report::new(
        "cfs-curate score",
        ScoreConfigEcho {
            source: args.source.display().to_string(),
            target: args.target.display().to_string(),
            epsilon: args.epsilon,
        },
        ScoreResults {
            probe,
            entries: table.entries().to_vec(),
        },
    );
    emit(&report, args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct FilterEcho {
    scores: String,
    ratio: Option<f64>,
    n_prime: usize,
}

fn run_filter(args: &FilterArgs) -> CliResult<()> {
    let report: Report<serde_json::Value, ScoreResults> = read_report(&args.scores)?;
    let table = ScoreTable::from_entries(report.results.entries)?;
    let n_prime = match (args.ratio, args.n_prime) {
        (Some(r), None) => count_for_ratio(table.len(), r)?,
        (None, Some(n)) => n,
        _ => return Err(CliError::Usage("give exactly one of --ratio or --n-prime".into())),
    };
    let ids = filter_top(&table, n_prime)?;
    let out = Report::new(
        "cfs-curate filter",
        FilterEcho {
            scores: args.scores.display().to_string(),
            ratio: args.ratio,
            n_prime,
        },
        ids,
    );
    emit(&out, args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct SelectEcho {
    source: String,
    adapted: String,
    target: String,
    strategies: Vec<SelectionConfig>,
    note: &'static str,
}

fn run_select(args: &SelectArgs) -> CliResult<()> {
    if args.strategies.is_empty() {
        return Err(CliError::Usage("no strategies requested".into()));
    }
    let s = read_embeddings(&args.source)?;
    let a = read_embeddings(&args.adapted)?;
    let t = read_embeddings(&args.target)?;
    let configs: Vec<SelectionConfig> = args
        .strategies
        .iter()
        .map(|&strategy| SelectionConfig {
            k: args.k,
            ..SelectionConfig::new(strategy, args.ratio, args.seed)
        })
        .collect();
    let reports: Vec<SelectionReport> = compare_strategies(&s, &a, &t, &configs)?;
    let echo = SelectEcho {
        source: args.source.display().to_string(),
        adapted: args.adapted.display().to_string(),
        target: args.target.display().to_string(),
        strategies: configs,
        note: "selection quality is measured by mean CFS and mean nearest-target cosine, not by downstream accuracy",
    };
    emit(&Report::new("cfs-curate select", echo, reports), args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct CkaEcho<'a> {
    model: &'a ModelArgs,
    vit: ViTConfig,
    images: String,
}

fn run_cka(args: &CkaArgs) -> CliResult<()> {
    let (_, images) = load_image_dir(&args.images)?;
    let (config, params) = args.model.build(images[0].height(), images[0].width())?;
    let specs: Vec<AugmentationSpec> = if args.augment.is_empty() {
        AugmentKind::ALL.into_iter().map(AugmentationSpec::with_default).collect()
    } else {
        args.augment.clone()
    };
    let name = args.images.display().to_string();
    let model = format!("{:?}", args.model.stem).to_lowercase();
    let report = invariance_report(&config, &params, &images, &specs, &model, &name)?;
    let echo = CkaEcho {
        model: &args.model,
        vit: config,
        images: name,
    };
    emit(&Report::new("cfs-curate cka", echo, report), args.out.as_deref())
}

fn run_augment(args: &AugmentArgs) -> CliResult<()> {
    let image = read_image_ppm(&args.image)?;
    write_image_ppm(&augment(&image, &args.spec)?, &args.out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct HdhEcho {
    u1: String,
    u2: String,
    dims: Vec<usize>,
    max_thresholds: usize,
}

#[derive(Debug, Serialize)]
struct HdhResults {
    #[serde(flatten)]
    detail: HdhDetail,
    class_size: usize,
    h_hypothesis: Hypothesis,
    h_prime_hypothesis: Hypothesis,
}

fn run_hdh(args: &HdhArgs) -> CliResult<()> {
    let a = read_embeddings(&args.u1)?;
    let b = read_embeddings(&args.u2)?;
    if a.dim() != b.dim() {
        return Err(CurateError::Dimension(format!("dims {} and {} differ", a.dim(), b.dim())).into());
    }
    let u1: Vec<Vec<f64>> = a.rows().map(<[f64]>::to_vec).collect();
    let u2: Vec<Vec<f64>> = b.rows().map(<[f64]>::to_vec).collect();
    let dims: Vec<usize> = if args.dims.is_empty() { (0..a.dim()).collect() } else { args.dims.clone() };
    let pooled: Vec<Vec<f64>> = u1.iter().chain(&u2).cloned().collect();
    let class = build_stumps(&pooled, &dims, args.max_thresholds)?;
    let detail = hdh_detail(&u1, &u2, &class)?;
    let results = HdhResults {
        detail,
        class_size: class.len(),
        h_hypothesis: class.hypotheses[detail.h],
        h_prime_hypothesis: class.hypotheses[detail.h_prime],
    };
    let echo = HdhEcho {
        u1: args.u1.display().to_string(),
        u2: args.u2.display().to_string(),
        dims,
        max_thresholds: args.max_thresholds,
    };
    emit(&Report::new("cfs-curate hdh", echo, results), args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct BoundResults {
    rhs: f64,
    terms: BoundTerms,
    notes: [&'static str; 2],
}

fn run_bound(args: &BoundArgs) -> CliResult<()> {
    let inputs = BoundInputs {
        d_hdh: args.d_hdh,
        f_hat_t: args.f_hat_t,
        f_t_star: args.f_t_star,
        f_s_star: args.f_s_star,
        vc_dim: args.vc_dim,
        n: args.n,
        delta: args.delta,
    };
    let terms = erb_bound_terms(&inputs)?;
    let results = BoundResults {
        rhs: terms.total,
        terms,
        notes: [
            "a smaller divergence between the selected source data and the target tightens the bound",
            "fine-tuning with a small learning rate keeps the target-adapted model close to the pre-trained one",
        ],
    };
    emit(&Report::new("cfs-curate bound", args, results), args.out.as_deref())
}

#[derive(Debug, Serialize)]
struct SynthManifest {
    source_ids: Vec<String>,
    target_ids: Vec<String>,
}

fn run_synth(args: &SynthArgs) -> CliResult<()> {
    let config = SynthConfig {
        seed: args.seed,
        n_per_domain: args.n,
        height: args.height,
        width: args.width,
        shift: DomainShift {
            brightness_offset: args.brightness_offset,
            hue_rotation: args.hue_rotation,
            noise_sigma: args.noise_sigma,
        },
        extreme_fraction: args.extreme_fraction,
    };
    let corpus = synth_corpus(&config)?;
    for (sub, ids, images) in [
        ("source", &corpus.source_ids, &corpus.source),
        ("target", &corpus.target_ids, &corpus.target),
    ] {
        let dir = args.out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| CurateError::io(&dir, e))?;
        for (id, im) in ids.iter().zip(images) {
            write_image_ppm(im, &dir.join(format!("{id}.ppm")))?;
        }
    }
    let manifest = SynthManifest {
        source_ids: corpus.source_ids,
        target_ids: corpus.target_ids,
    };
    Report::new("cfs-curate synth", config, manifest).write(&args.out.join("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct IdentityCheck {
    pairs: usize,
    max_residual: f64,
    equivalence_violations: usize,
}

#[derive(Debug, Serialize)]
struct GradientCheck {
    stem: StemVariant,
    max_rel_error: f64,
}

#[derive(Debug, Serialize)]
struct CheckResults {
    passed: bool,
    identity: IdentityCheck,
    gradients: Vec<GradientCheck>,
}

const IDENTITY_TOL: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-4;

fn run_check(args: &CheckArgs) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let probe = TheoremProbe::new(args.epsilon)?;
    let mut max_residual: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..args.pairs {
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let id = check_distance_identity(&a, &b)?;
        max_residual = max_residual.max(id.residual);
        if probe.admits(id.score) != (id.distance <= args.epsilon / 2.0) {
            violations += 1;
        }
    }

    let images = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    let weights = Tensor::from_fn(&[2, 32], |_| rng.random_range(-1.0..1.0));
    let options = GradCheckOptions {
        per_tensor: 4,
        input_coords: 64,
        seed: args.seed,
        ..GradCheckOptions::default()
    };
    let mut gradients = Vec::new();
    for stem in [StemVariant::Patchify, StemVariant::Conv, StemVariant::Ics] {
        let config = ViTConfig::new(StemConfig::for_variant(stem, 16, 32)?, 2, 2, 32, 32);
        let mut params = init_params(args.seed, &config)?;
        perturb_params(&mut params, args.seed.wrapping_add(1), 0.1);
        let report = check_model_gradients(&config, &params, &images, &weights, &options)?;
        gradients.push(GradientCheck {
            stem,
            max_rel_error: report.max_rel_error,
        });
    }
    let passed = max_residual <= IDENTITY_TOL
        && violations == 0
        && gradients.iter().all(|g| g.max_rel_error <= GRADIENT_TOL);
    let results = CheckResults {
        passed,
        identity: IdentityCheck {
            pairs: args.pairs,
            max_residual,
            equivalence_violations: violations,
        },
        gradients,
    };
    emit(&Report::new("cfs-curate check", args, results), args.out.as_deref())?;
    if passed {
        Ok(())
    } else {
        Err(CurateError::Range("self-check failed".into()).into())
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Embed(a) => run_embed(a),
        Command::Score(a) => run_score(a),
        Command::Filter(a) => run_filter(a),
        Command::Select(a) => run_select(a),
        Command::Cka(a) => run_cka(a),
        Command::Augment(a) => run_augment(a),
        Command::Hdh(a) => run_hdh(a),
        Command::Bound(a) => run_bound(a),
        Command::Synth(a) => run_synth(a),
        Command::Check(a) => run_check(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("cfs-curate: {e}");
            e.exit_code()
        }
    }
}
