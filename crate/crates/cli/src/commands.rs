use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use osseon::evalmetrics::{
    classification_error, evaluate_image, extract_surface, render_overlay, summarize, write_metrics_csv,
    SurfacePolyline,
};
use osseon::features::{enhance, predict_bmode, predict_with_pe, EnhancedImages, Prediction, FEATURE_NAMES};
use osseon::imagecore::{
    load_pgm, load_pgm_with_spacing, load_raw, normalize01, read_labels, save_image_raw, save_pgm, save_raw,
    Image2D, RawArray, Spacing, CLASS_NAMES,
};
use osseon::neuralnet::{
    load_model, save_model, train_two_phase, write_loss_log, CuNet, PeNet, TrainSample, TrainingSet,
    FEATURE_CHANNELS,
};
use osseon::phasefeat::phase_invocations;
use osseon::synthdata::{generate_dataset, DatasetManifest, Split};
use rayon::prelude::*;

use crate::config::{hex_digest, RunConfig};

pub const CONFIG_FILE: &str = "config.txt";
const PREDICTIONS_FILE: &str = "predictions.csv";
const PREDICTIONS_HEADER: &str = "filename,class_id,class_name,p_knee,p_femur,p_radius,p_tibia";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn is_pgm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

/// A single PGM, or every PGM of a directory (its `images/` child when the
/// directory is a dataset), sorted by name.
fn gather_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let dir = if input.join("images").is_dir() {
        input.join("images")
    } else {
        input.to_path_buf()
    };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    files.retain(|p| p.is_file() && is_pgm(p));
    files.sort();
    if files.is_empty() {
        bail!("no .pgm images found in {}", dir.display());
    }
    Ok(files)
}

fn load_image(path: &Path, spacing: Option<f64>) -> Result<Image2D> {
    let image = match spacing {
        Some(mm) => load_pgm_with_spacing(path, Spacing::isotropic(mm)?),
        None => load_pgm(path),
    };
    image.with_context(|| format!("loading {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    let manifest = generate_dataset(count, size, seed, out)?;
    let path = manifest.path.unwrap_or_else(|| out.join("manifest.csv"));
    println!("{}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// enhance
// ---------------------------------------------------------------------------

fn write_enhanced(dir: &Path, e: &EnhancedImages) -> Result<()> {
    create_dir(dir)?;
    save_pgm(&e.phase.lpt, dir.join("lpt.pgm"))?;
    save_pgm(&e.phase.lp, dir.join("lp.pgm"))?;
    save_pgm(&e.shadow.bse, dir.join("bse.pgm"))?;
    save_pgm(&e.shadow.cm_lp, dir.join("cm.pgm"))?;
    save_image_raw(&e.phase.phi, dir.join("phi.raw"))?;
    save_image_raw(&e.phase.lpe, dir.join("lpe.raw"))?;
    save_image_raw(&e.phase.lwpa, dir.join("lwpa.raw"))?;
    save_image_raw(&e.shadow.us_a, dir.join("usa.raw"))?;
    save_raw(&e.stack(), dir.join("features.raw"))?;
    let order = format!("{}\n", FEATURE_NAMES.join(","));
    fs::write(dir.join("features.channels"), order).context("writing channel order")?;
    Ok(())
}

pub fn enhance_cmd(input: &Path, out: &Path, spacing: Option<f64>, cfg: &RunConfig) -> Result<()> {
    let inputs = gather_inputs(input)?;
    create_dir(out)?;
    let single = inputs.len() == 1 && input.is_file();
    let reports = inputs
        .par_iter()
        .map(|path| -> Result<String> {
            let image = load_image(path, spacing)?;
            let start = Instant::now();
            let e = enhance(&image, &cfg.filter, &cfg.shadow).with_context(|| format!("enhancing {}", path.display()))?;
            let secs = start.elapsed().as_secs_f64();
            let dir = if single { out.to_path_buf() } else { out.join(stem(path)) };
            write_enhanced(&dir, &e)?;
            Ok(format!(
                "{}: {}x{} enhanced in {secs:.3} s",
                file_name(path),
                image.rows(),
                image.cols()
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for line in reports {
        eprintln!("{line}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Feature stack of one image, read from the cache when the image bytes and
/// the enhancement settings both match an earlier run.
fn cached_features(image_path: &Path, image: &Image2D, cfg: &RunConfig, cache: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(image_path).with_context(|| format!("reading {}", image_path.display()))?;
    let key = hex_digest(&[&bytes, cfg.enhancement_text().as_bytes()]);
    let path = cache.join(format!("{key}.raw"));
    let want = vec![FEATURE_CHANNELS, image.rows(), image.cols()];
    if path.is_file() {
        if let Ok(arr) = load_raw(&path) {
            if arr.dims == want {
                return Ok(arr.values);
            }
        }
    }
    let stack: RawArray = enhance(image, &cfg.filter, &cfg.shadow)?.stack();
    save_raw(&stack, &path)?;
    Ok(stack.values)
}

pub fn train_cmd(data: &Path, out: &Path, cache: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let entries: Vec<_> = manifest.split(Split::Train).cloned().collect();
    if entries.is_empty() {
        bail!("dataset {} has no training entries", data.display());
    }
    create_dir(out)?;
    let cache = cache.map_or_else(|| out.join("feature_cache"), Path::to_path_buf);
    create_dir(&cache)?;

    let start = Instant::now();
    let samples = entries
        .par_iter()
        .map(|e| -> Result<TrainSample> {
            let image_path = data.join("images").join(&e.filename);
            let image = load_image(&image_path, None)?;
            let mask = load_image(&data.join("masks").join(&e.filename), None)?;
            if !mask.same_dims(&image) {
                bail!("mask of {} does not match its image", e.filename);
            }
            Ok(TrainSample {
                features: cached_features(&image_path, &image, cfg, &cache)?,
                mask: mask.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
                class_id: e.class_id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let first = load_image(&data.join("images").join(&entries[0].filename), None)?;
    let set = TrainingSet::new(first.rows(), first.cols(), samples)?;
    eprintln!("features for {} images ready in {:.1} s", set.len(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let phase1 = cfg.train.phase1_iters;
    let output = train_two_phase(&set, &cfg.train, |r| {
        if r.iter % 100 == 0 || r.iter + 1 == cfg.train.total_iters || r.iter == phase1 {
            eprintln!(
                "iter {:>5} seg {:.5} cls {:.5} pe {:.5} total {:.5}",
                r.iter, r.seg_loss, r.cls_loss, r.pe_loss, r.total
            );
        }
    })
    .context("training aborted")?;
    eprintln!("trained {} iterations in {:.1} s", output.log.len(), start.elapsed().as_secs_f64());

    save_model(&output.pe, out.join("pe.model"))?;
    save_model(&output.cunet, out.join("cunet.model"))?;
    write_loss_log(&out.join("loss_log.csv"), &output.log)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).context("writing config.txt")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn prediction_row(name: &str, p: &Prediction) -> String {
    let mut s = format!("{name},{},{}", p.class_id, CLASS_NAMES[p.class_id as usize]);
    for v in p.class_probs {
        let _ = write!(s, ",{v:.6}");
    }
    s
}

pub fn infer_cmd(models: &Path, input: &Path, out: &Path, no_pe: bool, spacing: Option<f64>, cfg: &RunConfig) -> Result<()> {
    let cunet: CuNet<f32> = load_model(models.join("cunet.model")).context("loading cunet.model")?;
    let pe: Option<PeNet<f32>> = if no_pe {
        None
    } else {
        Some(load_model(models.join("pe.model")).context("loading pe.model")?)
    };
    let inputs = gather_inputs(input)?;
    let single = inputs.len() == 1 && input.is_file();
    create_dir(out)?;
    let phase_calls = phase_invocations();

    let mut table = format!("{PREDICTIONS_HEADER}\n");
    for path in &inputs {
        let image = load_image(path, spacing)?;
        let pred = match &pe {
            None => predict_bmode(&cunet, &image),
            Some(pe) => {
                let features = enhance(&image, &cfg.filter, &cfg.shadow)?.to_f32();
                predict_with_pe(pe, &cunet, &image, &features)
            }
        }
        .with_context(|| format!("predicting {}", path.display()))?;
        let dir = if single { out.to_path_buf() } else { out.join(stem(path)) };
        create_dir(&dir)?;
        save_image_raw(&pred.probmap, dir.join("probmap.raw"))?;
        save_pgm(&pred.probmap, dir.join("probmap.pgm"))?;
        if let Some(enhanced) = &pred.enhanced {
            save_pgm(&normalize01(enhanced), dir.join("enhanced.pgm"))?;
        }
        let detected = extract_surface(&pred.probmap, &cfg.eval);
        let none = SurfacePolyline::new(Vec::new(), image.spacing());
        save_pgm(&render_overlay(&image, &none, &detected), dir.join("overlay.pgm"))?;
        let _ = writeln!(table, "{}", prediction_row(&file_name(path), &pred));
    }
    fs::write(out.join(PREDICTIONS_FILE), &table).context("writing predictions.csv")?;
    print!("{table}");
    eprintln!("phase feature evaluations: {}", phase_invocations() - phase_calls);
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Prediction sources under `pred`: probability PGMs named like the ground
/// truth, or per-image directories holding `probmap.raw`.
fn prediction_files(pred: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(pred).with_context(|| format!("reading {}", pred.display()))? {
        let path = entry?.path();
        if path.is_file() && is_pgm(&path) {
            out.insert(file_name(&path), path);
        } else if path.is_dir() && path.join("probmap.raw").is_file() {
            out.insert(format!("{}.pgm", file_name(&path)), path.join("probmap.raw"));
        }
    }
    if out.is_empty() {
        bail!("no predictions found in {}", pred.display());
    }
    Ok(out)
}

fn load_probmap(path: &Path, spacing: Spacing) -> Result<Image2D> {
    if is_pgm(path) {
        Ok(load_pgm_with_spacing(path, spacing)?)
    } else {
        let arr = load_raw(path)?;
        Ok(arr.to_image(spacing)?)
    }
}

fn mask_surface(mask: &Image2D) -> SurfacePolyline {
    let mut points = Vec::new();
    for r in 0..mask.rows() {
        for c in 0..mask.cols() {
            if mask.get(r, c) >= 0.5 {
                points.push((r, c));
            }
        }
    }
    SurfacePolyline::from_contour(&points, mask.spacing())
}

fn read_predicted_classes(path: &Path) -> Result<BTreeMap<String, u8>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let mut cols = line.split(',');
        let name = cols.next().unwrap_or_default().to_string();
        let class: u8 = cols
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| anyhow!("{}: bad line `{line}`", path.display()))?;
        out.insert(name, class);
    }
    Ok(out)
}

pub fn eval_cmd(pred: &Path, gt: &Path, spacing: Option<f64>, out: &Path, overlays: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let spacing = match spacing {
        Some(mm) => Spacing::isotropic(mm)?,
        None => Spacing::default(),
    };
    let mask_dir = if gt.join("masks").is_dir() { gt.join("masks") } else { gt.to_path_buf() };
    let preds = prediction_files(pred)?;
    let missing: Vec<String> = preds
        .keys()
        .filter(|name| !mask_dir.join(name).is_file())
        .map(|name| mask_dir.join(name).display().to_string())
        .collect();
    if !missing.is_empty() {
        bail!("missing ground truth file(s): {}", missing.join(", "));
    }
    if let Some(dir) = overlays {
        create_dir(dir)?;
    }

    let per_image = preds
        .par_iter()
        .map(|(name, path)| {
            let probmap = load_probmap(path, spacing).with_context(|| format!("loading {}", path.display()))?;
            let mask = load_pgm_with_spacing(mask_dir.join(name), spacing)?;
            if !mask.same_dims(&probmap) {
                bail!("{name}: prediction is {:?} but ground truth is {:?}", probmap.dims(), mask.dims());
            }
            let gt_surface = mask_surface(&mask);
            let metrics = evaluate_image(name, &probmap, &gt_surface, &cfg.eval)?;
            if let Some(dir) = overlays {
                let detected = extract_surface(&probmap, &cfg.eval);
                save_pgm(&render_overlay(&probmap, &gt_surface, &detected), dir.join(name))?;
            }
            Ok(metrics)
        })
        .collect::<Result<Vec<_>>>()?;

    let class_error = {
        let pred_classes = pred.join(PREDICTIONS_FILE);
        if pred_classes.is_file() && gt.join("labels.csv").is_file() {
            let predicted = read_predicted_classes(&pred_classes)?;
            let labels: BTreeMap<String, u8> = read_labels(gt)?.into_iter().collect();
            let pairs: Vec<(u8, u8)> = preds
                .keys()
                .filter_map(|n| Some((*predicted.get(n)?, *labels.get(n)?)))
                .collect();
            if pairs.is_empty() {
                None
            } else {
                let (p, l): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
                Some(classification_error(&p, &l)?)
            }
        } else {
            None
        }
    };
    let report = summarize(&per_image, class_error)?;
    write_metrics_csv(out, &per_image, &report)?;
    println!(
        "images {} undetected {} AED {:.4} +- {:.4} mm (CL95 {:.4}) recall {:.4} precision {:.4} F {:.4}{}",
        report.n_images,
        report.n_undetected,
        report.aed_mean_mm,
        report.aed_std_mm,
        report.cl95_mm,
        report.recall,
        report.precision,
        report.f_score,
        report
            .classification_error
            .map_or(String::new(), |e| format!(" classification error {e:.4}"))
    );
    Ok(())
}
