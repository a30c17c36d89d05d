use std::path::Path;

use anyhow::{Context, Result};
use fpforensics::alteration::{self, AlterationKind, AlterationSpec};
use fpforensics::dataset::{self, Manifest, Scheme, Severity, SplitAssignment, SplitFractions, SplitMode};
use fpforensics::evaluation::{self, ConfusionMatrix, EvalReport};
use fpforensics::explain::{self, ClassChoice};
use fpforensics::image::load_image;
use fpforensics::loader::DatasetFilter;
use fpforensics::nn::{save_model, Model, ModelConfig, Scalar};
use fpforensics::training::{self, Balance, TrainConfig, TrainMode, TrainReport};
use fpforensics::Task;
use serde::Deserialize;

use crate::*;

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn note(g: &Global, msg: impl std::fmt::Display) {
    if !g.quiet {
        eprintln!("{msg}");
    }
}

pub fn ingest(g: &Global, a: IngestArgs) -> Result<()> {
    let scheme = match a.scheme {
        SchemeArg::Socofing => Scheme::Socofing,
        SchemeArg::Explicit => Scheme::Explicit,
    };
    let built = dataset::build_manifest(&a.root, scheme)?;
    for s in &built.skipped {
        note(g, format_args!("skipped {}: {}", s.path, s.reason));
    }
    built.manifest.save(&a.out)?;
    note(g, format_args!("{} entries, {} skipped -> {}", built.manifest.len(), built.skipped.len(), a.out.display()));
    Ok(())
}

pub fn synth(g: &Global, a: SynthArgs) -> Result<()> {
    let m = alteration::make_synth_dataset(a.subjects, &a.out, g.seed)?;
    note(g, format_args!("{} images -> {}", m.len(), a.out.join(dataset::MANIFEST_FILE).display()));
    Ok(())
}

pub fn alter(g: &Global, a: AlterArgs) -> Result<()> {
    let kind = match a.kind {
        KindArg::Obliteration => AlterationKind::Obliteration,
        KindArg::Rotation => AlterationKind::CentralRotation,
        KindArg::Zcut => AlterationKind::ZCut,
    };
    let severity = match a.severity {
        SeverityArg::Easy => Severity::Easy,
        SeverityArg::Medium => Severity::Medium,
        SeverityArg::Hard => Severity::Hard,
    };
    let src = load_image(&a.input)?;
    let mut spec = AlterationSpec::new(kind, severity, g.seed);
    if let Some(m) = a.magnitude {
        spec = spec.with_magnitude(m);
    }
    if a.no_seam {
        spec = spec.without_seam();
    }
    let out = alteration::apply(&src, &spec)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    out.image.save_png(&a.out)?;
    if let Some(mask_out) = &a.mask_out {
        if let Some(dir) = mask_out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        out.mask.to_image().save_png(mask_out)?;
    }
    note(g, serde_json::to_string(&out.spec)?);
    Ok(())
}

pub fn split(g: &Global, a: SplitArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let fractions = SplitFractions { train: a.train, val: a.val, test: a.test };
    let mode = if a.by_subject { SplitMode::BySubject } else { SplitMode::ByImage };
    let s = dataset::split(&manifest.labels(), fractions, g.seed, mode)?;
    s.save(&a.out)?;
    note(g, format_args!("train {} / val {} / test {}", s.train.len(), s.validation.len(), s.test.len()));
    Ok(())
}

fn train_config(g: &Global, o: &OptimArgs, mode: TrainMode) -> TrainConfig {
    TrainConfig {
        learning_rate: o.lr,
        epochs: o.epochs,
        steps_per_epoch: o.steps_per_epoch,
        batch_size: o.batch_size,
        rmsprop_decay: o.rho,
        rmsprop_epsilon: o.epsilon,
        balance: match o.balance {
            BalanceArg::None => Balance::None,
            BalanceArg::Undersample => Balance::Undersample,
        },
        mode,
        filter: if o.real_only { DatasetFilter::RealOnly } else { DatasetFilter::All },
        seed: g.seed,
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training<T: Scalar>(
    g: &Global,
    model: Model<T>,
    manifest: &Path,
    split: &Path,
    task: Task,
    out: &Path,
    o: &OptimArgs,
    mode: TrainMode,
) -> Result<()> {
    let manifest = Manifest::load(manifest)?;
    let split = SplitAssignment::load(split)?;
    let cfg = train_config(g, o, mode);
    let outcome = training::train(model, &manifest, &split, task, &cfg, |r| note(g, training::progress_line(r)))?;
    save_model(&outcome.model, out)?;
    if let Some(best) = &o.best_out {
        save_model(&outcome.best, best)?;
    }
    let report = TrainReport { checkpoint: Some(out.to_path_buf()), ..outcome.report };
    if let Some(path) = &o.report {
        write_json(path, &report)?;
    }
    note(
        g,
        format_args!(
            "best val_acc={:.4} at epoch {}; {:.1}s -> {}",
            report.best_val_accuracy,
            report.best_epoch,
            report.wall_clock_seconds,
            out.display()
        ),
    );
    Ok(())
}

pub fn train<T: Scalar>(g: &Global, a: TrainArgs) -> Result<()> {
    let model = Model::<T>::build(&ModelConfig::preset(a.preset), &[a.task], g.seed)?;
    run_training(g, model, &a.manifest, &a.split, a.task, &a.out, &a.optim, TrainMode::FromScratch)
}

pub fn finetune<T: Scalar>(g: &Global, a: FinetuneArgs) -> Result<()> {
    let model = training::load_checkpoint::<T>(&a.checkpoint)?;
    run_training(g, model, &a.manifest, &a.split, a.task, &a.out, &a.optim, TrainMode::FinetuneHead)
}

/// Either a bare matrix or an object with optional class names.
#[derive(Deserialize)]
#[serde(untagged)]
enum MatrixFile {
    Bare(Vec<Vec<u64>>),
    Named { classes: Option<Vec<String>>, matrix: Vec<Vec<u64>> },
}

fn checkpoint_id<T: Scalar>(path: &Path, model: &Model<T>) -> String {
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    format!("{name}@{}", &model.backbone_checksum()[..16])
}

pub fn eval<T: Scalar>(g: &Global, a: EvalArgs) -> Result<()> {
    let report = if let Some(path) = &a.matrix_in {
        let raw = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let (classes, matrix) = match serde_json::from_slice::<MatrixFile>(&raw)
            .with_context(|| format!("parsing {}", path.display()))?
        {
            MatrixFile::Bare(m) => (None, m),
            MatrixFile::Named { classes, matrix } => (classes, matrix),
        };
        let classes =
            classes.unwrap_or_else(|| a.task.class_names().iter().map(|s| s.to_string()).collect());
        let m = ConfusionMatrix::new(classes, matrix)?;
        EvalReport::from_matrix(a.task, &m, "offline", "none")?
    } else {
        let (Some(ck), Some(manifest), Some(split)) = (&a.checkpoint, &a.manifest, &a.split) else {
            return Err(UsageError("eval needs --checkpoint, --manifest and --split, or --matrix-in".into()).into());
        };
        let model = training::load_checkpoint::<T>(ck)?;
        let manifest = Manifest::load(manifest)?;
        let split = SplitAssignment::load(split)?;
        let filter = if a.real_only { DatasetFilter::RealOnly } else { DatasetFilter::All };
        evaluation::evaluate(&model, &manifest, &split, a.part, a.task, filter, &checkpoint_id(ck, &model))?
    };
    match &a.out {
        Some(path) => write_json(path, &report)?,
        None => emit(&(serde_json::to_string_pretty(&report)? + "\n"))?,
    }
    if let Some(md) = &a.markdown {
        write_text(md, &evaluation::render_report(std::slice::from_ref(&report)))?;
    }
    let (rates, kind) = report.headline();
    note(
        g,
        format_args!(
            "{}: accuracy {:.4}, precision {:.4}, recall {:.4} ({kind})",
            report.task, report.accuracy, rates.precision, rates.recall
        ),
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| -> Result<EvalReport> {
            let raw = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&raw).with_context(|| format!("parsing {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let md = evaluation::render_report(&reports);
    match &a.out {
        Some(path) => write_text(path, &md),
        None => emit(&md),
    }
}

pub fn cam<T: Scalar>(g: &Global, a: CamArgs) -> Result<()> {
    let model = training::load_checkpoint::<T>(&a.checkpoint)?;
    let img = load_image(&a.image)?;
    let class = a.class.map_or(ClassChoice::Auto, ClassChoice::Index);
    let map = explain::grad_cam(&model, &img, a.task, class, a.layer.as_deref())?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let stem = a.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let overlay_path = a.out_dir.join(format!("{stem}.{}.overlay.png", a.task));
    let heat_path = a.out_dir.join(format!("{stem}.{}.heat.png", a.task));
    explain::overlay(&img, &map, a.alpha)?.save_png(&overlay_path)?;
    map.save_heat_png(&heat_path)?;
    let class_name = a.task.class_names().get(map.class_index).copied().unwrap_or("?");
    note(
        g,
        format_args!(
            "class {} ({class_name}) from {} -> {}, {}",
            map.class_index,
            map.source_layer,
            overlay_path.display(),
            heat_path.display()
        ),
    );
    Ok(())
}
