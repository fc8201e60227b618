use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use ragan::datakit::{self, BuildOptions, FaceSource, KinDataset, KinPair, Split};
use ragan::evalkit::{
    self, csv_report, Ager, BackboneEvaluators, CosineVerifier, FullFrame, IdentityAger, KinMode,
    KinReport,
};
use ragan::imageio;
use ragan::training::{load_checkpoint, run_training, save_checkpoint, RunOptions, TrainState};
use ragan::{AgeValue, Image32, RaceLabel, RaganError};

use crate::run::{self, parse_ages, CliError, CliResult, Outcome, Run};
use crate::Global;

#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    /// Flat directory of `age_gender_race_stamp.ext` images.
    #[arg(long)]
    pub source: PathBuf,
    /// Fail instead of downscaling when a race has too few images.
    #[arg(long)]
    pub strict: bool,
}

pub fn build_dataset(g: &Global, name: &'static str, a: &BuildDatasetArgs) -> CliResult<Outcome> {
    let cfg = run::config(g)?;
    let data =
        datakit::build_balanced_dataset(&a.source, cfg.seed, BuildOptions { strict: a.strict })?;
    let mut r = Run::start(name, &g.out)?;
    r.input(&a.source);
    datakit::write_manifest(&g.out, &data)?;
    r.output(r.out(datakit::MANIFEST_FILE));
    r.output(r.out(datakit::META_FILE));
    r.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct PrepKinfaceArgs {
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: KinDataset,
    /// Benchmark root holding `images/` and `meta_data/`.
    #[arg(long, required_unless_present = "synthetic")]
    pub root: Option<PathBuf>,
    /// Generate a benchmark-shaped synthetic tree under `<out>/kinface`.
    #[arg(long, conflicts_with = "root")]
    pub synthetic: bool,
    /// Crop side of synthetic images.
    #[arg(long, default_value_t = 64)]
    pub side: u32,
}

fn parse_dataset(s: &str) -> Result<KinDataset, String> {
    s.parse().map_err(|e: RaganError| e.to_string())
}

/// Output path of a pair image inside a mirrored tree.
fn mirrored(root: &Path, image: &Path, into: &Path) -> PathBuf {
    let rel = image.strip_prefix(root).unwrap_or(image);
    into.join(rel).with_extension("png")
}

pub fn prep_kinface(g: &Global, name: &'static str, a: &PrepKinfaceArgs) -> CliResult<Outcome> {
    let cfg = run::config(g)?;
    let mut r = Run::start(name, &g.out)?;
    let root = match (&a.root, a.synthetic) {
        (Some(root), _) => root.clone(),
        (None, _) => {
            let root = r.out("kinface");
            datakit::synthesize_kinface(&root, a.dataset, a.side)?;
            root
        }
    };
    r.input(&root);
    let pairs = datakit::load_kin_pairs(&root, a.dataset)?;
    let padded = r.out("padded");
    let mut done = std::collections::BTreeSet::new();
    let mut csv = String::from("relation,fold,kin,parent,child\n");
    for p in &pairs {
        for img in [&p.parent, &p.child] {
            if done.insert(img.clone()) {
                let dst = mirrored(&root, img, &padded);
                run::ensure_dir(dst.parent().unwrap_or(&padded))?;
                let x = datakit::mirror_pad(&imageio::load_normalized::<f32>(img)?)?;
                imageio::save_png(&dst, &x)?;
            }
        }
        let rel = |img: &Path| {
            mirrored(&root, img, Path::new("padded"))
                .display()
                .to_string()
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            p.relation,
            p.fold,
            u8::from(p.kin),
            rel(&p.parent),
            rel(&p.child)
        ));
    }
    let list = r.out("pairs.csv");
    run::write_text(&list, &csv)?;
    r.output(list);
    r.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest written by `build-dataset`.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory the manifest paths are relative to.
    #[arg(long)]
    pub source: PathBuf,
    /// Total steps to reach (counted from step 0, including resumed steps).
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn train(g: &Global, name: &'static str, a: &TrainArgs) -> CliResult<Outcome> {
    let mut cfg = run::config(g)?;
    if let Some(bs) = a.batch_size {
        cfg.batch_size = bs;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    let faces = datakit::read_manifest(&a.manifest)?;
    let data = FaceSource::new(&a.source, &faces, Split::Train);
    if data.faces.is_empty() {
        return Err(RaganError::Config(format!(
            "{} lists no training images",
            a.manifest.display()
        ))
        .into());
    }
    if let Some(missing) = (0..data.faces.len())
        .map(|i| data.path(i))
        .find(|p| !p.is_file())
    {
        return Err(
            RaganError::Integrity(format!("missing training image {}", missing.display())).into(),
        );
    }
    let mut model = run::model(g, &cfg, None)?;
    let mut state = match &a.resume {
        Some(dir) => load_checkpoint(&mut model, dir)?,
        None => TrainState::new(&cfg),
    };
    let mut r = Run::start(name, &g.out)?;
    r.input(&a.manifest);
    if let Some(dir) = &a.resume {
        r.input(dir);
    }
    let log = r.out(TRAIN_LOG);
    if state.step == 0 || !log.exists() {
        // A resumed run into a fresh directory logs only its own steps.
        let _ = std::fs::remove_file(&log);
    }
    let opts = RunOptions {
        steps: a.steps,
        checkpoint_dir: Some(r.out("checkpoints")),
        checkpoint_every: cfg.checkpoint_every,
        log_path: Some(log.clone()),
    };
    let logs = run_training(&mut model, &mut state, &data, &opts)?;
    let final_dir = r.out("final");
    save_checkpoint(&model, &state, &final_dir)?;
    r.output(log);
    for entry in &logs {
        if cfg.checkpoint_every > 0 && entry.step % cfg.checkpoint_every == 0 {
            r.output(r.out(format!(
                "checkpoints/step{}/{}",
                entry.step,
                ragan::training::CHECKPOINT_WEIGHTS
            )));
        }
    }
    r.output(final_dir.join(ragan::training::CHECKPOINT_WEIGHTS));
    r.output(final_dir.join(ragan::training::CHECKPOINT_MANIFEST));
    r.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    /// Images to age; any size, resized to 256×256.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Comma-separated target ages.
    #[arg(long, default_value = "20,30,40,50,60,70,80")]
    pub ages: String,
    /// Source age passed through the forward contract.
    #[arg(long, default_value_t = 30.0)]
    pub source_age: f64,
    /// Trained checkpoint directory or weight file.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write `contact_sheet.png`: one row per input, the input first.
    #[arg(long)]
    pub sheet: bool,
}

pub fn transform(g: &Global, name: &'static str, a: &TransformArgs) -> CliResult<Outcome> {
    let ages = parse_ages(&a.ages)?;
    let cfg = run::config(g)?;
    let model = run::model(g, &cfg, a.checkpoint.as_deref())?;
    let source_age = AgeValue::new(a.source_age)?;
    let mut r = Run::start(name, &g.out)?;
    let mut tiles = Vec::new();
    for input in &a.inputs {
        r.input(input);
        let x = match imageio::load_face::<f32>(input) {
            Ok(x) => x,
            Err(e) => {
                r.failures.push(e.to_string());
                continue;
            }
        };
        let stem = input
            .file_stem()
            .map_or("image".into(), |s| s.to_string_lossy().into_owned());
        tiles.push(x.clone());
        for &age in &ages {
            let (y, _) = model.ra_gan_forward(&x, source_age, AgeValue::new(age as f64)?)?;
            let path = r.out(format!("{stem}_age{age}.png"));
            imageio::save_png(&path, &y)?;
            r.output(path);
            tiles.push(y);
        }
    }
    if a.sheet && !tiles.is_empty() {
        let sheet = imageio::contact_sheet(&tiles, ages.len() + 1)?;
        let path = r.out("contact_sheet.png");
        imageio::save_png(&path, &sheet)?;
        r.output(path);
    }
    r.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value = "20,30,40,50,60,70,80")]
    pub ages: String,
    /// Use at most this many images (manifest order).
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Decoded evaluation images with their race labels; unreadable files are
/// recorded as failures.
fn eval_set(a: &EvalArgs, r: &mut Run) -> CliResult<Vec<(Image32, RaceLabel)>> {
    let faces = datakit::read_manifest(&a.manifest)?;
    let src = FaceSource::new(&a.source, &faces, a.split.into());
    let n = a.limit.unwrap_or(usize::MAX).min(src.faces.len());
    if n == 0 {
        return Err(RaganError::Config(format!(
            "{} has no images in the requested split",
            a.manifest.display()
        ))
        .into());
    }
    r.input(&a.manifest);
    let mut set = Vec::with_capacity(n);
    for i in 0..n {
        match imageio::load_face::<f32>(&src.path(i)) {
            Ok(x) => set.push((x, src.faces[i].race)),
            Err(e) => r.failures.push(e.to_string()),
        }
    }
    Ok(set)
}

pub fn eval_race(g: &Global, name: &'static str, a: &EvalArgs) -> CliResult<Outcome> {
    let ages = parse_ages(&a.ages)?;
    let cfg = run::config(g)?;
    let model = run::model(g, &cfg, a.checkpoint.as_deref())?;
    let mut r = Run::start(name, &g.out)?;
    let set = eval_set(a, &mut r)?;
    let eval = BackboneEvaluators::new(&model);
    let reports = evalkit::racial_accuracy_by_age(&model, &FullFrame, &eval, &set, &ages)?;
    write_report(&mut r, "race", &csv_report::race(&reports), &reports)?;
    r.finish(&cfg)
}

pub fn eval_identity(g: &Global, name: &'static str, a: &EvalArgs) -> CliResult<Outcome> {
    let ages = parse_ages(&a.ages)?;
    let cfg = run::config(g)?;
    let model = run::model(g, &cfg, a.checkpoint.as_deref())?;
    let mut r = Run::start(name, &g.out)?;
    let images: Vec<Image32> = eval_set(a, &mut r)?.into_iter().map(|p| p.0).collect();
    let rows =
        evalkit::identity_preservation(&model, &BackboneEvaluators::new(&model), &images, &ages)?;
    write_report(&mut r, "identity", &csv_report::identity(&rows), &rows)?;
    r.finish(&cfg)
}

#[derive(Args, Debug)]
pub struct EvalAgeArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Images sampled without replacement per age group.
    #[arg(long)]
    pub sample_size: Option<usize>,
}

pub fn eval_age(g: &Global, name: &'static str, a: &EvalAgeArgs) -> CliResult<Outcome> {
    let ages = parse_ages(&a.eval.ages)?;
    let cfg = run::config(g)?;
    let model = run::model(g, &cfg, a.eval.checkpoint.as_deref())?;
    let mut r = Run::start(name, &g.out)?;
    let images: Vec<Image32> = eval_set(&a.eval, &mut r)?
        .into_iter()
        .map(|p| p.0)
        .collect();
    let mut report = evalkit::age_mae(
        &model,
        &BackboneEvaluators::new(&model),
        &images,
        &ages,
        a.sample_size,
        cfg.seed,
    )?;
    if !g
        .backbones
        .iter()
        .any(|s| s.trim_start().starts_with("age=") && !s.trim_end().ends_with("=toy"))
    {
        report.note = Some(evalkit::TOY_ESTIMATOR_NOTE.into());
    }
    if let Some(why) = &report.aborted {
        r.failures.push(format!("age estimator unavailable: {why}"));
    }
    write_report(&mut r, "mae", &csv_report::mae(&report.rows), &report)?;
    r.finish(&cfg)
}

fn write_report(r: &mut Run, stem: &str, csv: &str, json: &impl serde::Serialize) -> CliResult<()> {
    let (c, j) = (r.out(format!("{stem}.csv")), r.out(format!("{stem}.json")));
    run::write_text(&c, csv)?;
    run::write_json(&j, json)?;
    r.output(c);
    r.output(j);
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VerifierArg {
    /// Per-fold threshold on identity-embedding cosine similarity.
    Cosine,
    /// Mean-colour match; only meaningful on the synthetic benchmark.
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AgerArg {
    Model,
    /// Leaves images unchanged (protocol smoke runs).
    Identity,
}

#[derive(Args, Debug)]
pub struct KinshipArgs {
    #[arg(long, value_parser = parse_dataset)]
    pub dataset: KinDataset,
    #[arg(long)]
    pub root: PathBuf,
    /// `base` and/or target ages, comma-separated.
    #[arg(long, default_value = "base,20,30,40,50,60")]
    pub ages: String,
    #[arg(long, value_enum, default_value_t = VerifierArg::Cosine)]
    pub verifier: VerifierArg,
    #[arg(long, value_enum, default_value_t = AgerArg::Model)]
    pub ager: AgerArg,
    /// Skip the full-face reconstruction of mirror-padded crops.
    #[arg(long)]
    pub no_fullface: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_modes(s: &str) -> CliResult<Vec<KinMode>> {
    let modes: Vec<KinMode> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<KinMode>()
                .map_err(|e| CliError::usage(e.to_string()))
        })
        .collect::<CliResult<_>>()?;
    if modes.is_empty() {
        return Err(CliError::usage("no kinship modes given"));
    }
    Ok(modes)
}

pub fn kinship_run(g: &Global, name: &'static str, a: &KinshipArgs) -> CliResult<Outcome> {
    let modes = parse_modes(&a.ages)?;
    let cfg = run::config(g)?;
    let model = run::model(g, &cfg, a.checkpoint.as_deref())?;
    let pairs: Vec<KinPair> = datakit::load_kin_pairs(&a.root, a.dataset)?;
    let mut r = Run::start(name, &g.out)?;
    r.input(&a.root);
    let fullface = matches!(a.ager, AgerArg::Model) && !a.no_fullface;
    let prepare = |p: &Path| -> ragan::Result<Image32> {
        let x = imageio::load_normalized::<f32>(p)?;
        let x = if x.height() == 256 && x.width() == 256 {
            x
        } else {
            datakit::mirror_pad(&x)?
        };
        if fullface {
            model.invert_to_fullface(&x)
        } else {
            Ok(x)
        }
    };
    let ager: &dyn Ager<f32> = match a.ager {
        AgerArg::Model => &model,
        AgerArg::Identity => &IdentityAger,
    };
    let reports: Vec<KinReport> = match a.verifier {
        VerifierArg::Cosine => {
            let mut v = CosineVerifier::new(BackboneEvaluators::new(&model));
            evalkit::kinship_protocol(&pairs, &prepare, ager, &mut v, &modes)?
        }
        VerifierArg::Oracle => evalkit::kinship_protocol(
            &pairs,
            &prepare,
            ager,
            &mut evalkit::MeanColourOracle::default(),
            &modes,
        )?,
    };
    let dataset = a.dataset.name();
    write_report(
        &mut r,
        "kinship",
        &csv_report::kinship(dataset, &reports),
        &reports,
    )?;
    let imp = r.out("kinship_improvements.csv");
    run::write_text(&imp, &csv_report::kinship_improvements(dataset, &reports))?;
    r.output(imp);
    r.finish(&cfg)
}
