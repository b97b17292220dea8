use std::fs;
use std::path::Path;

use serde_json::json;
use voxbox::io::{read_label, read_nifti, write_label, write_nifti, write_overlay, write_report, LabelVolume, Plane};
use voxbox::model::Model;
use voxbox::preprocess::{center_of_mass, median_inplane_spacing, standardize};
use voxbox::selftest;
use voxbox::train::{dataset_pairs, evaluate, load_dataset, predict_mask, train, Precision, RunConfig, Subject};
use voxbox::{Element, Error};

use crate::manifest::{write_json, JsonLog, RunManifest, Status};
use crate::{require_exists, CliError, CliResult, Command, RunArgs};

pub fn run(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Preprocess { run, data } => {
            with_manifest("preprocess", run, |cfg, log| preprocess(cfg, data, &run.out, log))
        }
        Command::Train { run, data } => {
            with_manifest("train", run, |cfg, log| train_cmd(cfg, data.as_deref(), &run.out, log))
        }
        Command::Eval { run, checkpoint, data } => with_manifest("eval", run, |cfg, log| match cfg.train.precision {
            Precision::F32 => eval_cmd::<f32>(cfg, checkpoint, data, &run.out, log),
            Precision::F64 => eval_cmd::<f64>(cfg, checkpoint, data, &run.out, log),
        }),
        Command::Predict { run, checkpoint, input } => {
            with_manifest("predict", run, |cfg, log| match cfg.train.precision {
                Precision::F32 => predict_cmd::<f32>(cfg, checkpoint, input, &run.out, log),
                Precision::F64 => predict_cmd::<f64>(cfg, checkpoint, input, &run.out, log),
            })
        }
        Command::Selftest { out } => selftest_cmd(out.as_deref()),
    }
}

/// Resolve the config, write the manifest, run `body`, and record the outcome.
fn with_manifest(
    command: &str,
    args: &RunArgs,
    body: impl FnOnce(&mut RunConfig, &mut JsonLog) -> CliResult<()>,
) -> CliResult<()> {
    let mut cfg = args.resolve()?;
    fs::create_dir_all(&args.out)?;
    let mut log = JsonLog::to_dir(&args.out)?;
    let mut manifest = RunManifest::start(command, args.config.as_deref(), &cfg, &args.out);
    manifest.write()?;
    log.event(
        "start",
        json!({"command": command, "seed": cfg.train.seed, "configuration": cfg.label(), "out": args.out}),
    );

    let result = body(&mut cfg, &mut log);
    // The body may fill in values resolved from data, such as the dataset path.
    manifest.config = cfg;
    let status = match &result {
        Ok(()) => Status::Succeeded,
        Err(CliError::Core(Error::NonFinite(_))) => Status::Aborted,
        Err(_) => Status::Failed,
    };
    manifest.finish(status)?;
    match &result {
        Ok(()) => log.event("finish", json!({"status": status})),
        Err(e) => log.event("finish", json!({"status": status, "error": e.to_string()})),
    }
    result
}

fn preprocess(cfg: &mut RunConfig, data: &Path, out: &Path, log: &mut JsonLog) -> CliResult<()> {
    require_exists(data, "dataset directory")?;
    let pairs = dataset_pairs(data)?;
    let raw = pairs
        .iter()
        .map(|(_, img, lbl)| Ok((read_nifti(img)?, read_label(lbl)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let target = match cfg.preprocess.target_spacing {
        Some(t) => t,
        None => {
            let geoms: Vec<_> = raw.iter().map(|(v, _)| v.geometry.clone()).collect();
            let t = median_inplane_spacing(&geoms).ok_or_else(|| Error::Config("empty dataset".into()))?;
            cfg.preprocess.target_spacing = Some(t);
            t
        }
    };
    log.event("target_spacing", json!({"spacing": target}));

    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("labels"))?;
    let mut windows = Vec::with_capacity(raw.len());
    for (image, label) in &raw {
        let s = standardize(image, Some(label), target, &cfg.preprocess)?;
        let id = &image.subject_id;
        write_nifti(&s.image, &out.join("images").join(format!("{id}.nii.gz")))?;
        if let Some(l) = &s.label {
            write_label(l, &out.join("labels").join(format!("{id}.nii.gz")))?;
        }
        log.event(
            "subject",
            json!({"subject": id, "window": s.window, "extents": s.image.extents()}),
        );
        windows.push(json!({"subject": id, "window": s.window}));
    }
    write_json(
        &out.join("preprocess.json"),
        &json!({"target_spacing": target, "subjects": windows}),
    )?;
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, data: Option<&Path>, out: &Path, log: &mut JsonLog) -> CliResult<()> {
    let data = data
        .map(Path::to_path_buf)
        .or_else(|| cfg.train.data_dir.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set train.data_dir".into()))?;
    require_exists(&data, "dataset directory")?;
    cfg.train.data_dir = Some(data.clone());
    let subjects = load_dataset(&data)?;
    let mut emit = |e: &_| log.emit(e);
    let summary = match cfg.train.precision {
        Precision::F32 => train::<f32>(cfg, &subjects, out, &mut emit)?,
        Precision::F64 => train::<f64>(cfg, &subjects, out, &mut emit)?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    log.event("summary", serde_json::to_value(&summary).map_err(Error::from)?);
    Ok(())
}

fn load_model<T: Element>(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Model<T>> {
    require_exists(checkpoint, "checkpoint")?;
    let mut model = Model::<T>::new(&cfg.model)?;
    model.load(checkpoint)?;
    Ok(model)
}

/// Overlay slice through the ground-truth centre, or the middle slice.
fn overlay_index(gt: &LabelVolume, plane: Plane) -> usize {
    let e = gt.extents();
    let axis = plane.fixed_axis();
    center_of_mass(gt.mask().into_iter(), e)
        .map(|c| (c[axis].round() as usize).min(e[axis] - 1))
        .unwrap_or(e[axis] / 2)
}

fn eval_cmd<T: Element>(
    cfg: &mut RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    log: &mut JsonLog,
) -> CliResult<()> {
    let model = load_model::<T>(cfg, checkpoint)?;
    require_exists(data, "dataset directory")?;
    let subjects = load_dataset(data)?;
    let refs: Vec<&Subject> = subjects.iter().collect();
    let (report, masks) = evaluate(&model, &refs, |e| cfg.partition(e), &cfg.label())?;
    write_report(&report, &out.join("report.json"))?;

    let overlays = out.join("overlays");
    fs::create_dir_all(&overlays)?;
    for (s, mask) in subjects.iter().zip(&masks) {
        let pred = LabelVolume::from_mask(s.id(), s.label.geometry.clone(), mask)?;
        for plane in Plane::ALL {
            let index = overlay_index(&s.label, plane);
            let path = overlays.join(format!("{}_{}.ppm", s.id(), plane.name()));
            write_overlay(&s.image, &pred, &s.label, plane, index, &path)?;
        }
    }
    for m in &report.subjects {
        log.event("subject", serde_json::to_value(m).map_err(Error::from)?);
    }
    log.event("mean", serde_json::to_value(&report.mean).map_err(Error::from)?);
    Ok(())
}

fn predict_cmd<T: Element>(
    cfg: &mut RunConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    log: &mut JsonLog,
) -> CliResult<()> {
    let model = load_model::<T>(cfg, checkpoint)?;
    require_exists(input, "input volume")?;
    let image = read_nifti(input)?;
    let target = match cfg.preprocess.target_spacing {
        Some(t) => t,
        None => median_inplane_spacing(std::slice::from_ref(&image.geometry))
            .ok_or_else(|| Error::Config("cannot derive target spacing".into()))?,
    };
    let s = standardize(&image, None, target, &cfg.preprocess)?;
    let partition = cfg.partition(s.image.extents())?;
    let mask = predict_mask(&model, &s.image, &partition)?;
    let id = &image.subject_id;
    let path = out.join(format!("{id}_mask.nii.gz"));
    write_label(&mask, &path)?;
    write_nifti(&s.image, &out.join(format!("{id}_image.nii.gz")))?;
    let foreground = mask.data.iter().filter(|&&v| v == 1).count();
    log.event(
        "prediction",
        json!({"subject": id, "mask": path, "window": s.window, "foreground_voxels": foreground}),
    );
    Ok(())
}

fn selftest_cmd(out: Option<&Path>) -> CliResult<()> {
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            JsonLog::to_dir(dir)?
        }
        None => JsonLog::stdout(),
    };
    let checks = selftest::run()?;
    for c in &checks {
        log.emit(&json!({"event": "check", "suite": c.suite, "name": c.name, "passed": c.passed, "detail": c.detail}));
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    log.event("selftest", json!({"passed": checks.len() - failed, "failed": failed}));
    if let Some(dir) = out {
        write_json(&dir.join("selftest.json"), &checks)?;
    }
    if failed > 0 {
        return Err(CliError::Selftest {
            failed,
            total: checks.len(),
        });
    }
    Ok(())
}
