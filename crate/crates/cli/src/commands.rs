use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use socs::category::{BinCodec, LabelSpace};
use socs::error::{Error, Result};
use socs::metrics::{record_errors, report_from_errors, residuals_csv, MetricsReport, RecordErrors};
use socs::model::{checkpoint, Model};
use socs::pipeline::{
    estimate_pose_from_labels, eval_record, evaluate_views, median_coordinate_error, model_config_for, train_data, views,
    View,
};
use socs::posefit::{fit_robust, RansacConfig};
use socs::synth::{build_dataset, calibrate_spread, family_variation, stride_subsample, variation_degree, Dataset, Split};
use socs::train::{mix, train, METRICS_CSV_HEADER};

use crate::config::ExperimentConfig;
use crate::io;

/// Monte-Carlo samples for box IoU in reports.
const IOU_SAMPLES: usize = 50_000;
/// Observed points per view scored by the coordinate-error metric.
const COORD_POINTS_PER_VIEW: usize = 256;

fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

/// Dataset of an experiment: the generated directory under the output
/// directory if present, otherwise built in memory from the config.
fn experiment_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dir = dataset_dir(&cfg.output_dir);
    if dir.join("manifest.json").exists() {
        let ds = io::load_dataset(&dir)?;
        if ds.config != cfg.dataset && cfg.target_variation.is_none() {
            return Err(Error::Config(format!("{} was generated from a different dataset config", dir.display())));
        }
        Ok(ds)
    } else {
        build_dataset(&cfg.dataset)
    }
}

pub fn synth_gen(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.prepare_output()?;
    let mut dcfg = cfg.dataset.clone();
    let n_inst = dcfg.train_instances + dcfg.test_instances;
    if let Some(target) = cfg.target_variation {
        dcfg.spread = calibrate_spread(dcfg.family, target, n_inst, dcfg.seed, dcfg.surface_points, 0.1)?;
    }
    let ds = build_dataset(&dcfg)?;
    let template = stride_subsample(&ds.template.mean_shape, socs::synth::VARIATION_SUBSAMPLE);
    let shapes: Vec<_> =
        ds.instances.iter().map(|(_, g)| stride_subsample(&g.shape, socs::synth::VARIATION_SUBSAMPLE)).collect();
    let degree = variation_degree(&shapes, &template)?;
    debug_assert!((degree - family_variation(dcfg.family, dcfg.spread, n_inst, dcfg.seed, dcfg.surface_points)?).abs() < 1e-12);
    let dir = dataset_dir(&out);
    std::fs::create_dir_all(&dir)?;
    let m = io::write_dataset(&ds, &dir, degree)?;
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {}", dir.display());
    let _ = writeln!(s, "category: {}", m.category);
    let _ = writeln!(s, "instances: {} ({} train, {} test)", m.instances.len(), dcfg.train_instances, dcfg.test_instances);
    let _ = writeln!(s, "views: {}", m.samples.len());
    let _ = writeln!(s, "spread: {}", dcfg.spread);
    let _ = writeln!(s, "variation_degree: {degree:.6}");
    let _ = writeln!(s, "hash: {}", m.hash);
    Ok(s)
}

pub fn socs_build(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<String> {
    let out = cfg.prepare_output()?;
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(|| dataset_dir(&out));
    let ds = io::load_dataset(&dir)?;
    let records = ds.records(cfg.label_space)?;
    let b = io::bundle(&ds, cfg.label_space, &records);
    let worst = b.warps.iter().map(|w| w.residual).fold(0.0, f64::max);
    let identity = records.iter().all(|r| r.warp.w.iter().all(|v| *v == 0.0) && r.warp.b == nalgebra::Matrix3::identity());
    std::fs::write(out.join("bundle.json"), serde_json::to_vec_pretty(&b)?)?;
    let mut s = String::new();
    let _ = writeln!(s, "bundle: {}", out.join("bundle.json").display());
    let _ = writeln!(s, "label_space: {}", if cfg.label_space == LabelSpace::Socs { "socs" } else { "nocs" });
    let _ = writeln!(s, "warps: {}", b.warps.len());
    let _ = writeln!(s, "identity_warps: {identity}");
    let _ = writeln!(s, "max_keypoint_residual: {worst:e}");
    if cfg.label_space == LabelSpace::Socs && worst > socs::category::InstanceRecord::INTERPOLATION_TOL {
        return Err(Error::SingularSystem(format!("warp keypoint residual {worst:e} exceeds tolerance")));
    }
    Ok(s)
}

struct Prepared {
    dataset: Dataset,
    train_views: Vec<View>,
    test_views: Vec<View>,
    codec: BinCodec,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = experiment_dataset(cfg)?;
    let train_views = views(&dataset, cfg.label_space, Split::Train)?;
    let test_views = views(&dataset, cfg.label_space, Split::Test)?;
    let codec = BinCodec::new(cfg.model.bins);
    Ok(Prepared { dataset, train_views, test_views, codec })
}

/// Trains one model; writes the checkpoints and `metrics.csv` into `out`
/// when given. Returns the final model.
fn train_model(cfg: &ExperimentConfig, p: &Prepared, out: Option<&Path>) -> Result<Model> {
    let mut model = Model::new(model_config_for(&p.dataset, &cfg.model_config()))?;
    let data = train_data(&model, &p.train_views, &p.dataset.template, p.codec)?;
    let tcfg = cfg.train_config();
    let val_views: Vec<View> = p.test_views.iter().take(cfg.validation_views).cloned().collect();
    let codec = p.codec;
    let validate = move |m: &Model| median_coordinate_error(m, &val_views, &codec, COORD_POINTS_PER_VIEW);
    let has_val = cfg.validation_views > 0 && !p.test_views.is_empty();
    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    if let Some(dir) = out {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let outcome = train(&mut model, &data, &tcfg, if has_val { Some(&validate) } else { None }, |rec, m| {
        csv.push_str(&rec.csv_row());
        csv.push('\n');
        if let Some(dir) = out {
            let done = rec.step + 1;
            if tcfg.checkpoint_every > 0 && done % tcfg.checkpoint_every == 0 {
                checkpoint::save(m, &dir.join(format!("checkpoints/step_{done:06}.ckpt")))?;
            }
        }
        Ok(())
    });
    if let Some(dir) = out {
        std::fs::write(dir.join("metrics.csv"), &csv)?;
    }
    let outcome = outcome?;
    if let Some(dir) = out {
        checkpoint::save(&model, &dir.join("model.ckpt"))?;
        if let Some((_, _, params)) = outcome.best {
            let best = Model::with_parameters(model.config.clone(), params)?;
            checkpoint::save(&best, &dir.join("best.ckpt"))?;
        }
    }
    Ok(model)
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<String> {
    let out = cfg.prepare_output()?;
    let p = prepare(cfg)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    train_model(cfg, &p, Some(&out))?;
    let metrics = std::fs::read_to_string(out.join("metrics.csv"))?;
    let last = metrics.lines().last().unwrap_or_default().to_string();
    Ok(format!("checkpoint: {}\nlast: {last}\n", out.join("model.ckpt").display()))
}

fn failed_errors() -> RecordErrors {
    RecordErrors { rotation_deg: 180.0, translation_m: f64::INFINITY, translation_norm: f64::INFINITY, iou: 0.0 }
}

fn score(
    cfg: &ExperimentConfig,
    p: &Prepared,
    model: Option<&Model>,
) -> Result<(MetricsReport, Vec<(usize, RecordErrors)>)> {
    if p.test_views.is_empty() {
        return Err(Error::EmptyEval);
    }
    let icfg = cfg.inference_config();
    let results: Vec<(usize, Option<socs::metrics::EvalRecord>)> = match model {
        Some(m) => evaluate_views(m, &p.test_views, &p.dataset.template, &p.codec, &icfg)?,
        None => p
            .test_views
            .iter()
            .map(|v| {
                let fit = estimate_pose_from_labels(v, &p.dataset.template, &p.codec, &icfg)?;
                Ok((v.id, Some(eval_record(v, &p.dataset.template, fit.transform))))
            })
            .collect::<Result<_>>()?,
    };
    let errs: Vec<(usize, RecordErrors)> = results
        .iter()
        .map(|(id, r)| {
            let e = match r {
                Some(r) => record_errors(std::slice::from_ref(r), IOU_SAMPLES, icfg.seed ^ *id as u64)[0],
                None => failed_errors(),
            };
            (*id, e)
        })
        .collect();
    let only: Vec<RecordErrors> = errs.iter().map(|e| e.1).collect();
    Ok((report_from_errors(&only)?, errs))
}

pub fn eval_cmd(cfg: &ExperimentConfig, ckpt: Option<&Path>, oracle: bool) -> Result<String> {
    let out = cfg.prepare_output()?;
    let p = prepare(cfg)?;
    let model = if oracle {
        None
    } else {
        let path = ckpt.map(Path::to_path_buf).unwrap_or_else(|| out.join("model.ckpt"));
        let m = checkpoint::load(&path).map_err(|e| match e {
            Error::Io(io) => Error::Format(format!("{}: {io}", path.display())),
            other => other,
        })?;
        if m.config.bins != p.codec.num_bins {
            return Err(Error::Config(format!("checkpoint has {} bins, config {}", m.config.bins, p.codec.num_bins)));
        }
        Some(m)
    };
    let (report, errs) = score(cfg, &p, model.as_ref())?;
    let coord = match &model {
        Some(m) => Some(median_coordinate_error(m, &p.test_views, &p.codec, COORD_POINTS_PER_VIEW)?),
        None => None,
    };
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    std::fs::write(out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let per_record = residuals_csv(&errs.iter().map(|e| e.1).collect::<Vec<_>>());
    let mut with_ids = String::new();
    for (i, line) in per_record.lines().enumerate() {
        if i == 0 {
            let _ = writeln!(with_ids, "view_id,{line}");
        } else {
            let _ = writeln!(with_ids, "{},{line}", errs[i - 1].0);
        }
    }
    std::fs::write(out.join("records.csv"), with_ids)?;
    let mut s = report.to_csv();
    if let Some(c) = coord {
        let _ = writeln!(s, "median_coordinate_error: {c:.6}");
    }
    Ok(s)
}

pub fn fitpose_cmd(cfg: &ExperimentConfig, input: &Path) -> Result<String> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::Format(format!("{}: {e}", input.display())))?;
    let set = io::parse_correspondences(&text)?;
    let (lo, hi) = socs::geom::bounds(&set.camera).ok_or(Error::EmptyInput("correspondences"))?;
    let rcfg = RansacConfig { iters: cfg.inference.ransac_iters, ..RansacConfig::for_diagonal((hi - lo).norm(), cfg.seed) };
    let fit = fit_robust(&set, &rcfg)?;
    let json = serde_json::to_string_pretty(&fit)?;
    if cfg.output_dir.as_os_str().is_empty() {
        return Ok(json + "\n");
    }
    let out = cfg.prepare_output()?;
    std::fs::write(out.join("fit.json"), &json)?;
    Ok(json + "\n")
}

pub const ABLATION_HEADER: &str = "cell,kind,label_space,sampling,global_point,consistency_loss,bins,keypoints,seed,median_coordinate_error,deg10_2bin,deg5_cm5,rotation_median_deg,translation_median_norm";

/// Fraction of records within 10 degrees and two bin widths.
fn deg10_two_bins(errs: &[(usize, RecordErrors)], bins: usize) -> f64 {
    let ok = errs.iter().filter(|(_, e)| e.rotation_deg < 10.0 && e.translation_norm < 2.0 / bins as f64).count();
    ok as f64 / errs.len().max(1) as f64
}

fn run_cell(cfg: &ExperimentConfig) -> Result<(f64, MetricsReport, f64)> {
    let p = prepare(cfg)?;
    let model = train_model(cfg, &p, None)?;
    let coord = median_coordinate_error(&model, &p.test_views, &p.codec, COORD_POINTS_PER_VIEW)?;
    let (report, errs) = score(cfg, &p, Some(&model))?;
    Ok((coord, report, deg10_two_bins(&errs, cfg.model.bins)))
}

pub fn ablate_cmd(cfg: &ExperimentConfig, only: Option<usize>) -> Result<String> {
    let out = cfg.prepare_output()?;
    cfg.validate()?;
    let g = &cfg.grid;
    let mut cells = Vec::with_capacity(g.cell_count() + 1);
    for &sampling in &g.sampling {
        for &gp in &g.global_point {
            for &cl in &g.consistency_loss {
                for &bins in &g.bins {
                    for &kp in &g.keypoints {
                        let mut c = cfg.clone();
                        c.train.sampling.kind = sampling;
                        c.ablation.global_point = gp;
                        c.ablation.consistency_loss = cl;
                        c.model.bins = bins;
                        c.dataset.keypoints = kp;
                        c.seed = mix(cfg.seed, cells.len() as u64);
                        cells.push(("grid", c));
                    }
                }
            }
        }
    }
    // label-space comparison at the base settings
    let other = if cfg.label_space == LabelSpace::Socs { LabelSpace::Nocs } else { LabelSpace::Socs };
    for space in [cfg.label_space, other] {
        let mut c = cfg.clone();
        c.label_space = space;
        c.seed = mix(cfg.seed, u64::MAX);
        cells.push(("label_space", c));
    }
    if let Some(i) = only {
        if i >= cells.len() {
            return Err(Error::Config(format!("cell {i} out of range (grid has {} cells)", cells.len())));
        }
    }
    let mut csv = format!("{ABLATION_HEADER}\n");
    for (i, (kind, c)) in cells.iter().enumerate() {
        if only.is_some_and(|o| o != i) {
            continue;
        }
        // cells never reuse the base experiment's dataset directory
        let mut c = c.clone();
        c.output_dir = out.join(format!("cells/{i:04}"));
        let (coord, report, p2) = run_cell(&c)?;
        let _ = writeln!(
            csv,
            "{i},{kind},{},{},{},{},{},{},{},{coord},{p2},{},{},{}",
            if c.label_space == LabelSpace::Socs { "socs" } else { "nocs" },
            c.train.sampling.kind,
            c.ablation.global_point,
            c.ablation.consistency_loss,
            c.model.bins,
            c.dataset.keypoints,
            c.seed,
            report.deg5_cm5,
            report.rotation_median_deg,
            report.translation_median_norm
        );
    }
    let name = match only {
        Some(i) => format!("ablation_cell_{i:04}.csv"),
        None => "ablation.csv".into(),
    };
    std::fs::write(out.join(name), &csv)?;
    Ok(csv)
}
