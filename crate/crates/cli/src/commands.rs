use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cardioprior::align::{build_atlas_named, heatmap_file_stem, AtlasConfig, HeatmapAtlas};
use cardioprior::io::{read_labels, read_volume, write_volume, AnyVolume};
use cardioprior::losses::{gradcheck, GradcheckReport, LossKind, TOLERANCE};
use cardioprior::losses::LossConfig;
use cardioprior::metrics::{evaluate_case, MetricsReport};
use cardioprior::phantom::{case_stem, generate, DatasetCase, DatasetManifest, Jitter, PhantomSpec};
use cardioprior::preprocess::{embed_fov, foreground_centroid, reorient, FovSpec, Interpolation, Orientation};
use cardioprior::report::{load_run, reference_markdown, run_files, run_name, MethodRow, Summary, REPORT_SUFFIX};
use cardioprior::stats::{aggregate, describe_labels, soft_volume, ShapeStats};
use cardioprior::trainer::{self, predict, MicroModel, TrainCase, TrainConfig};
use cardioprior::{argmax_labels, ClassId, Error, LabelVolume, Volume, Voxel};
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use crate::cases::{self, create_dir, id_of, write_text, CaseFiles, IMAGE_SUFFIX, LABEL_SUFFIX};
use crate::manifest::Recorder;
use crate::Failure;

pub type Outcome = std::result::Result<PathBuf, Failure>;

fn manifest_in(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}

/// `stats.json` → `stats.manifest.json`.
fn manifest_beside(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.manifest.json"))
}

fn fov(size: usize, spacing: f64) -> cardioprior::Result<FovSpec> {
    FovSpec::cube(size, spacing)
}

fn label_path(c: &CaseFiles) -> &Path {
    c.label.as_deref().expect("filtered to labeled cases")
}

fn image_path(c: &CaseFiles) -> &Path {
    c.image.as_deref().expect("filtered to paired cases")
}

// ---------------------------------------------------------------- prep

#[derive(Args, Debug, Serialize)]
pub struct PrepArgs {
    /// A volume file, or a directory of `<id>_image.mhd` / `<id>_label.mhd` cases.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Isotropic output spacing (mm).
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    /// Output grid edge length (voxels).
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    /// Interpolation for intensity images, `nearest` or `trilinear` (default).
    /// Label volumes always use nearest.
    #[arg(long)]
    pub mode: Option<String>,
    /// Axis permutation applied first, e.g. `2,0,1`.
    #[arg(long, value_delimiter = ',')]
    pub permute: Option<Vec<usize>>,
    /// Output axes to mirror, e.g. `0,2`.
    #[arg(long, value_delimiter = ',')]
    pub flip: Vec<usize>,
}

fn orientation(a: &PrepArgs) -> std::result::Result<Orientation, Failure> {
    let perm = match a.permute.as_deref() {
        Some(&[x, y, z]) => [x, y, z],
        Some(other) => return Err(Failure::Usage(format!("--permute needs 3 axes, got {other:?}"))),
        None => [0, 1, 2],
    };
    let mut flips = [false; 3];
    for &f in &a.flip {
        if f > 2 {
            return Err(Failure::Usage(format!("--flip axis {f} is not 0, 1 or 2")));
        }
        flips[f] = true;
    }
    Ok(Orientation::new(perm, flips)?)
}

fn embed_any(v: AnyVolume, o: &Orientation, center: &cardioprior::WorldPoint, fov: &FovSpec, mode: Interpolation) -> cardioprior::Result<AnyVolume> {
    fn go<T: Voxel>(v: &Volume<T>, o: &Orientation, c: &cardioprior::WorldPoint, f: &FovSpec, m: Interpolation) -> cardioprior::Result<Volume<T>> {
        embed_fov(&reorient(v, o), c, f, m)
    }
    Ok(match v {
        AnyVolume::UInt8(v) => AnyVolume::UInt8(go(&v, o, center, fov, mode)?),
        AnyVolume::Float32(v) => AnyVolume::Float32(go(&v, o, center, fov, mode)?),
        AnyVolume::Float64(v) => AnyVolume::Float64(go(&v, o, center, fov, mode)?),
    })
}

fn write_any_volume(v: &AnyVolume, path: &Path) -> cardioprior::Result<()> {
    match v {
        AnyVolume::UInt8(v) => write_volume(v, path),
        AnyVolume::Float32(v) => write_volume(v, path),
        AnyVolume::Float64(v) => write_volume(v, path),
    }
}

pub fn prep(a: &PrepArgs, rec: &mut Recorder) -> Outcome {
    let mode: Option<Interpolation> = a.mode.as_deref().map(str::parse).transpose()?;
    let o = orientation(a)?;
    let fov = fov(a.size, a.spacing)?;
    create_dir(&a.out)?;
    let file_name = |p: &Path| a.out.join(p.file_name().expect("volume path has a file name"));

    if a.input.is_file() {
        rec.input(&a.input);
        let v = read_volume(&a.input)?;
        let (center, mode) = match &v {
            AnyVolume::UInt8(l) => {
                if mode == Some(Interpolation::Trilinear) {
                    return Err(Error::LabelInterpolation.into());
                }
                (foreground_centroid(&reorient(l, &o))?, Interpolation::Nearest)
            }
            other => (
                reorient(&other.clone().into_f64(), &o).grid().center(),
                mode.unwrap_or(Interpolation::Trilinear),
            ),
        };
        let out = file_name(&a.input);
        write_any_volume(&embed_any(v, &o, &center, &fov, mode)?, &out)?;
        rec.output(&out);
        return Ok(manifest_in(&a.out, "prep"));
    }

    let cases = cases::discover(&a.input)?;
    if cases.is_empty() {
        return Err(Error::InvalidDocument(format!("no cases in {}", a.input.display())).into());
    }
    let written: Vec<Vec<PathBuf>> = cases
        .par_iter()
        .map(|c| -> cardioprior::Result<Vec<PathBuf>> {
            let mut out = Vec::new();
            let label = c.label.as_deref().map(read_labels).transpose()?;
            let center = match (&label, &c.image) {
                (Some(l), _) => foreground_centroid(&reorient(l, &o))?,
                (None, Some(img)) => reorient(&read_volume(img)?.into_f64(), &o).grid().center(),
                (None, None) => unreachable!("discovered cases have a file"),
            };
            if let (Some(l), Some(p)) = (label, c.label.as_deref()) {
                let path = file_name(p);
                write_volume(&embed_fov(&reorient(&l, &o), &center, &fov, Interpolation::Nearest)?, &path)?;
                out.push(path);
            }
            if let Some(p) = c.image.as_deref() {
                let path = file_name(p);
                let m = mode.unwrap_or(Interpolation::Trilinear);
                write_any_volume(&embed_any(read_volume(p)?, &o, &center, &fov, m)?, &path)?;
                out.push(path);
            }
            Ok(out)
        })
        .collect::<cardioprior::Result<_>>()?;
    for c in &cases {
        c.label.iter().chain(&c.image).for_each(|p| rec.input(p));
    }
    written.iter().flatten().for_each(|p| rec.output(p));
    Ok(manifest_in(&a.out, "prep"))
}

// ---------------------------------------------------------------- stats

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    /// Directory of `<id>_label.mhd` volumes.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output `stats.json`.
    #[arg(long)]
    pub out: PathBuf,
}

fn read_all_labels(cases: &[CaseFiles], rec: &mut Recorder) -> cardioprior::Result<Vec<LabelVolume>> {
    let vols = cases.par_iter().map(|c| read_labels(label_path(c))).collect::<cardioprior::Result<Vec<_>>>()?;
    cases.iter().for_each(|c| rec.input(label_path(c)));
    Ok(vols)
}

pub fn stats(a: &StatsArgs, rec: &mut Recorder) -> Outcome {
    let cases = cases::labeled(&a.labels)?;
    let vols = read_all_labels(&cases, rec)?;
    let descs = vols.par_iter().map(describe_labels).collect::<cardioprior::Result<Vec<_>>>()?;
    let stats = aggregate(&descs);
    stats.save(&a.out)?;
    rec.output(&a.out);
    Ok(manifest_beside(&a.out))
}

// ---------------------------------------------------------------- atlas

#[derive(Args, Debug, Serialize)]
pub struct AtlasArgs {
    /// Directory of `<id>_label.mhd` volumes.
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory for heatmaps and `atlas.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Generalized Procrustes rounds.
    #[arg(long, default_value_t = 2)]
    pub iters: usize,
    /// Fit a similarity (rotation, translation and scale) per case.
    #[arg(long)]
    pub with_scale: bool,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
}

pub fn atlas(a: &AtlasArgs, rec: &mut Recorder) -> Outcome {
    let cases = cases::labeled(&a.labels)?;
    let vols = read_all_labels(&cases, rec)?;
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let cfg = AtlasConfig {
        fov: fov(a.size, a.spacing)?,
        gpa_iters: a.iters,
        with_scale: a.with_scale,
    };
    let atlas = build_atlas_named(&ids, &vols, &cfg)?;
    atlas.save(&a.out)?;
    record_atlas(&a.out, rec, false);
    Ok(manifest_in(&a.out, "atlas"))
}

fn record_atlas(dir: &Path, rec: &mut Recorder, as_input: bool) {
    let mut files = vec![dir.join("atlas.json")];
    files.extend(ClassId::ALL.iter().map(|&c| dir.join(format!("{}.mhd", heatmap_file_stem(c)))));
    for f in &files {
        if as_input {
            rec.input(f);
        } else {
            rec.output(f);
        }
    }
}

// ---------------------------------------------------------------- phantom

#[derive(Args, Debug, Serialize)]
pub struct PhantomArgs {
    /// Number of cases.
    #[arg(long, default_value_t = 20)]
    pub n: u64,
    /// Index of the first case; cases are keyed on (seed, index).
    #[arg(long, default_value_t = 0)]
    pub first_index: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub size: usize,
    #[arg(long, default_value_t = 2.0)]
    pub spacing: f64,
    /// Standard deviation of the additive intensity noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 10.0)]
    pub jitter_rotation: f64,
    /// Per-axis translation bound (mm).
    #[arg(long, default_value_t = 3.0)]
    pub jitter_translation: f64,
    #[arg(long, default_value_t = 0.92)]
    pub jitter_scale_min: f64,
    #[arg(long, default_value_t = 1.08)]
    pub jitter_scale_max: f64,
    /// Per-compartment axis-length variation fraction.
    #[arg(long, default_value_t = 0.1)]
    pub jitter_variation: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn phantom(a: &PhantomArgs, rec: &mut Recorder) -> Outcome {
    let spec = PhantomSpec {
        grid: fov(a.size, a.spacing)?,
        seed: a.seed,
        jitter: Jitter {
            pose_rotation_max_deg: a.jitter_rotation,
            translation_max_mm: a.jitter_translation,
            scale_range: [a.jitter_scale_min, a.jitter_scale_max],
            axis_variation: a.jitter_variation,
        },
        noise_sigma: a.noise,
    };
    spec.validate()?;
    create_dir(&a.out)?;
    let indices: Vec<u64> = (a.first_index..a.first_index + a.n).collect();
    let cases: Vec<DatasetCase> = indices
        .par_iter()
        .map(|&k| -> cardioprior::Result<DatasetCase> {
            let (image, labels) = generate(&spec, k)?;
            let (ip, lp) = (case_stem(k, "image"), case_stem(k, "label"));
            write_volume(&image, a.out.join(&ip))?;
            write_volume(&labels, a.out.join(&lp))?;
            Ok(DatasetCase {
                index: k,
                image: format!("{ip}.mhd"),
                label: format!("{lp}.mhd"),
            })
        })
        .collect::<cardioprior::Result<_>>()?;
    for c in &cases {
        rec.output(&a.out.join(&c.image));
        rec.output(&a.out.join(&c.label));
    }
    let dataset = a.out.join("dataset.json");
    DatasetManifest::new(spec, cases).save(&dataset)?;
    rec.output(&dataset);
    Ok(manifest_in(&a.out, "phantom"))
}

// ---------------------------------------------------------------- gradcheck

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    /// gdice_ce, volume, moment, relation or total.
    #[arg(long)]
    pub loss: String,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct Checked<'a> {
    #[serde(flatten)]
    report: &'a GradcheckReport,
    tolerance: f64,
    passed: bool,
}

pub fn gradcheck_cmd(a: &GradcheckArgs, rec: &mut Recorder) -> Outcome {
    let kind: LossKind = a.loss.parse()?;
    let report = gradcheck(kind, a.size, a.seed)?;
    let passed = report.max_rel_err < TOLERANCE;
    let doc = Checked {
        report: &report,
        tolerance: TOLERANCE,
        passed,
    };
    write_text(&a.out, &(serde_json::to_string_pretty(&doc).map_err(Error::from)? + "\n"))?;
    rec.output(&a.out);
    if !passed {
        return Err(Failure::Check {
            manifest: manifest_beside(&a.out),
            message: format!(
                "{} max relative error {:e} exceeds {TOLERANCE:e}",
                kind.name(),
                report.max_rel_err
            ),
        });
    }
    Ok(manifest_beside(&a.out))
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory of `<id>_image.mhd` / `<id>_label.mhd` training cases.
    #[arg(long)]
    pub data: PathBuf,
    /// Population statistics; required when a shape regularizer is enabled.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Heatmap atlas directory; adds heatmap input features.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Loss configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    pub loss_config: Option<PathBuf>,
    /// Named loss configuration: baseline, volume, moment or relation.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = trainer::DEFAULT_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = trainer::DEFAULT_STEP)]
    pub step: f64,
    /// Recorded in the model; initialization is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gradient norm bound; 0 disables clipping.
    #[arg(long, default_value_t = trainer::DEFAULT_CLIP_NORM)]
    pub clip: f64,
    /// First epoch with shape regularizers enabled.
    #[arg(long, default_value_t = trainer::DEFAULT_REG_START)]
    pub reg_start: usize,
    /// Weight of the auxiliary heatmap head; 0 disables it. Needs --atlas.
    #[arg(long, default_value_t = 0.0)]
    pub aux_weight: f64,
    /// Run directory for `model.json` and `trace.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also segment the images in this directory into `<out>/pred`.
    #[arg(long)]
    pub predict: Option<PathBuf>,
}

fn load_atlas(path: Option<&Path>, rec: &mut Recorder) -> cardioprior::Result<Option<HeatmapAtlas>> {
    path.map(|p| {
        record_atlas(p, rec, true);
        HeatmapAtlas::load(p)
    })
    .transpose()
}

pub fn train(a: &TrainArgs, rec: &mut Recorder) -> Outcome {
    let loss = match (&a.loss_config, &a.preset) {
        (Some(p), _) => {
            rec.input(p);
            LossConfig::load(p)?
        }
        (None, Some(name)) => LossConfig::preset(name)?,
        (None, None) => LossConfig::baseline(),
    };
    let stats = a
        .stats
        .as_deref()
        .map(|p| {
            rec.input(p);
            ShapeStats::load(p)
        })
        .transpose()?;
    let atlas = load_atlas(a.atlas.as_deref(), rec)?;
    if a.aux_weight > 0.0 && atlas.is_none() {
        return Err(Failure::Usage("--aux-weight needs --atlas".into()));
    }
    if a.clip < 0.0 {
        return Err(Failure::Usage(format!("--clip {} is negative", a.clip)));
    }
    let cfg = TrainConfig {
        step: a.step,
        epochs: a.epochs,
        seed: a.seed,
        loss,
        aux_head: a.aux_weight > 0.0,
        aux_weight: a.aux_weight,
        clip_norm: (a.clip > 0.0).then_some(a.clip),
        reg_start: a.reg_start,
    };
    cfg.validate()?;

    let cases = cases::paired(&a.data)?;
    let train_cases: Vec<TrainCase> = cases
        .par_iter()
        .map(|c| {
            let image = read_volume(image_path(c))?.into_f64();
            let labels = read_labels(label_path(c))?;
            TrainCase::new(&image, &labels, atlas.as_ref())
        })
        .collect::<cardioprior::Result<_>>()?;
    for c in &cases {
        rec.input(image_path(c));
        rec.input(label_path(c));
    }
    let model = MicroModel::zeros(atlas.is_some(), cfg);
    let (model, trace) = trainer::train(model, &train_cases, stats.as_ref())?;

    create_dir(&a.out)?;
    let model_path = a.out.join("model.json");
    model.save(&model_path)?;
    let trace_path = a.out.join("trace.csv");
    write_text(&trace_path, &trace.to_csv())?;
    rec.output(&model_path);
    rec.output(&trace_path);

    if let Some(dir) = &a.predict {
        predict_dir(&model, dir, atlas.as_ref(), stats.as_ref(), &a.out, rec)?;
    }
    Ok(manifest_in(&a.out, "train"))
}

/// Writes `<out>/pred/<id>_label.mhd` for every image in `dir`, plus
/// `soft_volumes.csv` with z-scores against `stats` when given.
fn predict_dir(
    model: &MicroModel,
    dir: &Path,
    atlas: Option<&HeatmapAtlas>,
    stats: Option<&ShapeStats>,
    out: &Path,
    rec: &mut Recorder,
) -> cardioprior::Result<()> {
    let cases: Vec<CaseFiles> = cases::discover(dir)?.into_iter().filter(|c| c.image.is_some()).collect();
    if cases.is_empty() {
        return Err(Error::InvalidDocument(format!("no *{IMAGE_SUFFIX} volumes in {}", dir.display())));
    }
    let pred_dir = out.join("pred");
    create_dir(&pred_dir)?;
    let volumes: Vec<[f64; 7]> = cases
        .par_iter()
        .map(|c| -> cardioprior::Result<[f64; 7]> {
            let image = read_volume(image_path(c))?.into_f64();
            let p = predict(model, &image, atlas)?;
            write_volume(&argmax_labels(&p), pred_dir.join(format!("{}_label", c.id)))?;
            Ok(ClassId::FOREGROUND.map(|k| soft_volume(&p, k)))
        })
        .collect::<cardioprior::Result<_>>()?;
    let mut csv = String::from("case,class,soft_volume_mm3,z\n");
    for (c, vols) in cases.iter().zip(&volumes) {
        rec.input(image_path(c));
        rec.output(&pred_dir.join(format!("{}{LABEL_SUFFIX}", c.id)));
        for (k, v) in ClassId::FOREGROUND.iter().zip(vols) {
            let z = stats
                .and_then(|s| s.class(*k))
                .filter(|s| s.volume.std > 0.0)
                .map(|s| format!("{:e}", (v - s.volume.mean) / s.volume.std))
                .unwrap_or_else(|| "NA".into());
            let _ = writeln!(csv, "{},{},{v:e},{z}", c.id, k.name());
        }
    }
    let path = out.join("soft_volumes.csv");
    write_text(&path, &csv)?;
    rec.output(&path);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Predicted label volume, or a directory of `<id>_label.mhd`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label volume, or a directory matched by case id.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory for `<id>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn eval(a: &EvalArgs, rec: &mut Recorder) -> Outcome {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if a.pred.is_dir() {
        let gt: Vec<CaseFiles> = cases::labeled(&a.gt)?;
        cases::labeled(&a.pred)?
            .into_iter()
            .map(|p| {
                let g = gt.iter().find(|g| g.id == p.id).ok_or_else(|| {
                    Error::InvalidDocument(format!("no ground truth for case `{}` in {}", p.id, a.gt.display()))
                })?;
                Ok((p.id.clone(), label_path(&p).to_path_buf(), label_path(g).to_path_buf()))
            })
            .collect::<cardioprior::Result<_>>()?
    } else {
        vec![(id_of(&a.pred), a.pred.clone(), a.gt.clone())]
    };
    create_dir(&a.out)?;
    let reports: Vec<MetricsReport> = pairs
        .par_iter()
        .map(|(id, p, g)| evaluate_case(id, &read_labels(p)?, &read_labels(g)?))
        .collect::<cardioprior::Result<_>>()?;
    for ((id, p, g), r) in pairs.iter().zip(&reports) {
        rec.input(p);
        rec.input(g);
        let path = a.out.join(format!("{id}{REPORT_SUFFIX}"));
        r.save(&path)?;
        rec.output(&path);
    }
    Ok(manifest_in(&a.out, "eval"))
}

// ---------------------------------------------------------------- report

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Run directories holding `*.report.json`; each becomes one row named after the directory.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Directory for `summary.csv` and `summary.md`.
    #[arg(long)]
    pub out: PathBuf,
    /// Add an HD95 column.
    #[arg(long)]
    pub hd95: bool,
    /// Append the published full-scale results to `summary.md`.
    #[arg(long)]
    pub reference: bool,
}

pub fn report(a: &ReportArgs, rec: &mut Recorder) -> Outcome {
    let mut rows = Vec::with_capacity(a.runs.len());
    for dir in &a.runs {
        let reports = load_run(dir)?;
        run_files(dir)?.iter().for_each(|p| rec.input(p));
        rows.push(MethodRow::from_reports(&run_name(dir), &reports));
    }
    let summary = Summary { rows, hd95: a.hd95 };
    create_dir(&a.out)?;
    let csv = a.out.join("summary.csv");
    write_text(&csv, &summary.to_csv())?;
    let mut md = summary.to_markdown();
    if a.reference {
        md.push('\n');
        md.push_str(&reference_markdown());
    }
    let md_path = a.out.join("summary.md");
    write_text(&md_path, &md)?;
    rec.output(&csv);
    rec.output(&md_path);
    Ok(manifest_in(&a.out, "report"))
}
