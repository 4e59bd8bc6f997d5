use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use camoforge::attack::{
    attack_texture, combined_after_texture, evaluate_camouflage, final_texture, history_csv, mean_easr, run_attack,
    AttackConfig, AttackError, AttackMode, AttackOutcome, Camouflage, DetectorEval, ScenePool, SweepPoint,
    SweepResult,
};
use camoforge::camotex::ConstraintFlags;
use camoforge::detectors::{
    calibrate_threshold, eval_csv, evaluate_ap, load_labeled, load_weights, save_weights, train_detector, ArchId,
    DetectorSpec, EvalRow, TrainConfig, MATCH_RADIUS,
};
use camoforge::evalmetrics::{
    attack_label, metrics_csv, p1, practicality_csv, practicality_markdown, practicality_table, AttackKind, MetricsRow,
};
use camoforge::image::RgbImage;
use camoforge::meshgeom::{DisplacementField, VEHICLE_AXES};
use camoforge::render::{generate_dataset, BackgroundSource, DatasetSpec, FidelityProfile, RenderConfig};
use serde_json::json;

use crate::config::FileConfig;
use crate::manifest::{path_digest, Run};
use crate::plot::{unit_chart, Series};
use crate::{AttackArgs, CliError, EvaluateArgs, GenerateArgs, TrainArgs};

const DEFAULT_IMAGE_SIZE: usize = 192;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn parse_profile(s: &str) -> Result<FidelityProfile, CliError> {
    s.parse().map_err(CliError::Usage)
}

fn backgrounds(dir: Option<&Path>) -> Result<BackgroundSource, CliError> {
    match dir {
        None => Ok(BackgroundSource::Procedural),
        Some(d) => BackgroundSource::load_tiles(d).map_err(runtime),
    }
}

pub fn generate_data(a: GenerateArgs) -> Result<PathBuf, CliError> {
    let mut f = FileConfig::load(a.common.config.as_deref())?;
    let n_images = f.resolve("n_images", a.n_images, 2000)?;
    let seed = f.resolve("seed", a.seed, 0)?;
    let empty_fraction = f.resolve("empty_fraction", a.empty_fraction, 0.3)?;
    let profile = parse_profile(&f.resolve("profile", a.profile, "train".to_string())?)?;
    let image_size = f.resolve("image_size", a.image_size, DEFAULT_IMAGE_SIZE)?;
    let max_vehicles = f.resolve("max_vehicles", a.max_vehicles, 5)?;
    let patterned_fraction = f.resolve("patterned_fraction", a.patterned_fraction, 0.5)?;
    let bg_dir: Option<PathBuf> = f.resolve_opt("backgrounds", a.backgrounds)?;
    let jobs = f.resolve("jobs", a.common.jobs, 1)?;
    f.finish()?;
    if n_images == 0 {
        return Err(usage("--n-images must be at least 1"));
    }
    let spec = DatasetSpec {
        n_images,
        seed,
        empty_fraction,
        config: RenderConfig::for_profile(profile, image_size),
        min_vehicles: 1,
        max_vehicles,
        patterned_fraction,
        jobs,
    };
    spec.validate().map_err(usage)?;
    let bg = backgrounds(bg_dir.as_deref())?;
    let info = json!({
        "n_images": n_images,
        "seed": seed,
        "empty_fraction": empty_fraction,
        "fidelity_profile": profile,
        "render": spec.config,
        "min_vehicles": spec.min_vehicles,
        "max_vehicles": max_vehicles,
        "patterned_fraction": patterned_fraction,
        "backgrounds": bg_dir.as_ref().map(|p| path_digest(p)).transpose()?,
    });
    let mut run = Run::start("generate-data", info.clone(), seed, a.common.out.as_deref())?;
    if let Some(d) = &bg_dir {
        run.input(d)?;
    }
    generate_dataset(&spec, &bg, &run.dir).map_err(runtime)?;
    run.write("dataset.json", serde_json::to_string_pretty(&info).map_err(runtime)?)?;
    let dir = run.dir.clone();
    run.finish()?;
    Ok(dir)
}

fn dataset_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

pub fn train(a: TrainArgs) -> Result<PathBuf, CliError> {
    let mut f = FileConfig::load(a.common.config.as_deref())?;
    let data: PathBuf = f.resolve_opt("data", a.data)?.ok_or_else(|| usage("--data is required"))?;
    let val: Option<PathBuf> = f.resolve_opt("val", a.val)?;
    let arch = f.resolve("arch", a.arch, "all".to_string())?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: f.resolve("epochs", a.epochs, defaults.epochs)?,
        batch: f.resolve("batch", a.batch, defaults.batch)?,
        lr: f.resolve("lr", a.lr, defaults.lr)?,
        seed: f.resolve("seed", a.seed, defaults.seed)?,
        augment: !f.switch("no_augment", a.no_augment)?,
        clip: defaults.clip,
    };
    let radius = f.resolve("radius", a.radius, MATCH_RADIUS)?;
    let jobs = f.resolve("jobs", a.common.jobs, 1)?;
    f.finish()?;
    if cfg.epochs == 0 {
        return Err(usage("--epochs must be at least 1; no training performed"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) || !(radius > 0.0) {
        return Err(usage("batch, lr and radius must be positive"));
    }
    let archs: Vec<ArchId> = if arch.eq_ignore_ascii_case("all") {
        ArchId::ALL.to_vec()
    } else {
        arch.split(',').map(|s| s.trim().parse().map_err(usage)).collect::<Result<_, _>>()?
    };
    camoforge::init_workers(jobs);
    let train_set = load_labeled(&data).map_err(|e| runtime(format!("dataset {}: {e}", data.display())))?;
    let val_dir = val.unwrap_or_else(|| data.clone());
    let val_set = if val_dir == data {
        train_set.clone()
    } else {
        load_labeled(&val_dir).map_err(|e| runtime(format!("dataset {}: {e}", val_dir.display())))?
    };
    let config = json!({
        "train": cfg,
        "archs": archs,
        "radius": radius,
        "data": path_digest(&data)?,
        "val": path_digest(&val_dir)?,
    });
    let mut run = Run::start("train", config, cfg.seed, a.common.out.as_deref())?;
    run.input(&data)?;
    run.input(&val_dir)?;
    let mut rows = Vec::new();
    for arch in archs {
        let init = DetectorSpec::new(arch, cfg.seed);
        let (mut det, report) = train_detector(&init, &train_set, &cfg).map_err(runtime)?;
        let threshold = calibrate_threshold(&det, &val_set, radius).map_err(runtime)?;
        det.threshold = Some(threshold);
        let ap = evaluate_ap(&det, &val_set, radius).map_err(runtime)?;
        save_weights(&det, &run.path(&format!("{arch}.cfw"))).map_err(runtime)?;
        let mut curve = String::from("epoch,loss\n");
        for (i, l) in report.loss_curve.iter().enumerate() {
            curve.push_str(&format!("{},{l:.9e}\n", i + 1));
        }
        run.write(&format!("loss_{arch}.csv"), curve)?;
        eprintln!("{arch}: AP {ap:.4} threshold {threshold:.2}");
        rows.push(EvalRow { model: arch.to_string(), dataset: dataset_name(&val_dir), ap, threshold });
    }
    run.write("eval.csv", eval_csv(&rows))?;
    let dir = run.dir.clone();
    run.finish()?;
    Ok(dir)
}

/// Calibrated archives in `dir`, sorted by file name.
fn load_detectors(dir: &Path) -> Result<(Vec<DetectorSpec>, Vec<PathBuf>), CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cfw"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(runtime(format!("no .cfw detectors in {}", dir.display())));
    }
    let dets = paths.iter().map(|p| load_weights(p).map_err(runtime)).collect::<Result<Vec<_>, _>>()?;
    if let Some((_, p)) = dets.iter().zip(&paths).find(|(d, _)| d.threshold.is_none()) {
        return Err(runtime(format!("{} has no calibrated threshold", p.display())));
    }
    Ok((dets, paths))
}

fn attack_error(e: AttackError) -> CliError {
    match e {
        AttackError::Config(m) => CliError::Usage(m),
        other => runtime(other),
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let grid: Vec<f64> =
        s.split(',').map(|x| x.trim().parse().map_err(|_| usage(format!("bad pm grid value {x:?}")))).collect::<Result<_, _>>()?;
    if grid.is_empty() || grid.iter().any(|p| !(0.0..=1.0).contains(p)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(usage(format!("pm grid {grid:?} must be strictly ascending within [0,1]")));
    }
    Ok(grid)
}

fn kind_of(mode: AttackMode) -> AttackKind {
    match mode {
        AttackMode::Texture => AttackKind::Texture,
        AttackMode::Shape => AttackKind::Shape,
        AttackMode::CombinedSeq | AttackMode::CombinedPar => AttackKind::Combined,
    }
}

fn write_artifacts(run: &Run, prefix: &str, cfg: &AttackConfig, out: &AttackOutcome) -> Result<(), CliError> {
    let p = |name: &str| format!("{prefix}{name}");
    run.write(&p("attack.conf"), cfg.to_kv_text())?;
    run.write(&p("loss_history.csv"), history_csv(&out.history))?;
    let summary = json!({
        "label": attack_label(cfg.flags, kind_of(cfg.mode)),
        "mode": cfg.mode,
        "flags": cfg.flags.to_string(),
        "pm": cfg.pm,
        "lambdas": out.lambdas,
        "phases": out.phases,
        "steps": out.history.len(),
        "final_loss": out.history.last().map(|r| r.loss),
    });
    run.write(&p("summary.json"), serde_json::to_string_pretty(&summary).map_err(runtime)?)?;
    if let Some(param) = &out.texture {
        let tex = final_texture(param, cfg.tau).map_err(runtime)?;
        tex.save_png(&run.path(&p("texture.png"))).map_err(runtime)?;
        if let Some(rgb) = &param.latent_rgb {
            let s = rgb.shape();
            RgbImage::new(s[1], s[0], rgb.data().to_vec())
                .map_err(runtime)?
                .save_png(&run.path(&p("latent_rgb.png")))
                .map_err(runtime)?;
        }
        if let Some(csv) = param.probs_to_csv() {
            run.write(&p("probs.csv"), csv)?;
        }
        if let Some(pal) = &param.palette {
            run.write(&p("palette.csv"), pal.to_csv())?;
        }
    }
    if let Some(field) = &out.field {
        run.write(&p("displacement.csv"), field.to_csv())?;
    }
    Ok(())
}

pub fn attack(a: AttackArgs) -> Result<PathBuf, CliError> {
    let mut f = FileConfig::load(a.common.config.as_deref())?;
    let det_dir: PathBuf = f.resolve_opt("detectors", a.detectors)?.ok_or_else(|| usage("--detectors is required"))?;
    let bg_dir: Option<PathBuf> = f.resolve_opt("backgrounds", a.backgrounds)?;
    let grid: Option<String> = f.resolve_opt("pm_grid", a.pm_grid)?;
    let jobs = f.resolve("jobs", a.common.jobs, 1)?;
    let mut cfg = AttackConfig::default();
    for (k, v) in f.drain() {
        cfg.apply_kv(&k, &v).map_err(attack_error)?;
    }
    let mut set = |key: &str, v: Option<String>| -> Result<(), CliError> {
        match v {
            Some(v) => cfg.apply_kv(key, &v).map_err(attack_error),
            None => Ok(()),
        }
    };
    let s = |v: Option<f64>| v.map(|x| x.to_string());
    let u = |v: Option<usize>| v.map(|x| x.to_string());
    set("mode", a.mode)?;
    set("pm", s(a.pm))?;
    set("n_pll", u(a.n_pll))?;
    set("tau", s(a.tau))?;
    set("epochs", u(a.epochs))?;
    set("batch_size", u(a.batch))?;
    set("learning_rate", s(a.lr))?;
    set("shape_learning_rate", s(a.shape_lr))?;
    set("optimizer", a.optimizer)?;
    set("lambdas", a.lambdas)?;
    set("pool_size", u(a.pool_size))?;
    set("scenes_per_epoch", u(a.scenes_per_epoch))?;
    set("image_size", u(a.image_size))?;
    set("n_colors", u(a.n_colors))?;
    set("seed", a.seed.map(|x| x.to_string()))?;
    cfg.flags = ConstraintFlags {
        pix: cfg.flags.pix || a.pix,
        ma: cfg.flags.ma || a.ma,
        lc: cfg.flags.lc || a.lc,
        fc: cfg.flags.fc || a.fc,
    };
    cfg.validate().map_err(attack_error)?;
    let grid = grid.as_deref().map(parse_grid).transpose()?;
    if grid.is_some() && cfg.mode == AttackMode::Texture {
        return Err(usage("--pm-grid needs a shape or combined mode"));
    }
    camoforge::init_workers(jobs);
    let (dets, paths) = load_detectors(&det_dir)?;
    let det_digests: Vec<String> = paths.iter().map(|p| path_digest(p)).collect::<Result<_, _>>()?;
    let config = json!({
        "attack": cfg.to_kv_text(),
        "pm_grid": grid,
        "detectors": det_digests,
        "backgrounds": bg_dir.as_ref().map(|p| path_digest(p)).transpose()?,
    });
    let mut run = Run::start("attack", config, cfg.seed, a.common.out.as_deref())?;
    for p in &paths {
        run.input(p)?;
    }
    let bg = backgrounds(bg_dir.as_deref())?;
    let pool = ScenePool::sample(RenderConfig::train(cfg.image_size), cfg.pool_size, cfg.seed, &bg).map_err(runtime)?;
    let result = (|| -> Result<(), AttackError> {
        match &grid {
            None => {
                let out = run_attack(&cfg, &dets, &pool)?;
                write_artifacts(&run, "", &cfg, &out).map_err(|e| AttackError::Config(e.to_string()))?;
            }
            Some(grid) => {
                let stage = if cfg.mode == AttackMode::CombinedSeq {
                    Some(attack_texture(&AttackConfig { mode: AttackMode::Texture, ..cfg.clone() }, &dets, &pool)?)
                } else {
                    None
                };
                for &pm in grid {
                    let c = AttackConfig { pm, ..cfg.clone() };
                    let out = match &stage {
                        Some(s) => combined_after_texture(&c, &dets, &pool, s)?,
                        None => run_attack(&c, &dets, &pool)?,
                    };
                    write_artifacts(&run, &format!("pm_{pm:.2}/"), &c, &out)
                        .map_err(|e| AttackError::Config(e.to_string()))?;
                }
            }
        }
        Ok(())
    })();
    if let Err(AttackError::Diverged { step, snapshot }) = &result {
        let out = AttackOutcome {
            texture: snapshot.texture.clone(),
            field: snapshot.field.clone(),
            lambdas: Vec::new(),
            history: Vec::new(),
            phases: Vec::new(),
        };
        write_artifacts(&run, "snapshot/", &cfg, &out)?;
        return Err(runtime(format!("attack diverged at step {step}; last finite latents in {}", run.path("snapshot").display())));
    }
    result.map_err(runtime)?;
    let dir = run.dir.clone();
    run.finish()?;
    Ok(dir)
}

struct LoadedCamo {
    run_id: String,
    label: String,
    flags: String,
    kind: Option<AttackKind>,
    pm: Option<f64>,
    camo: Camouflage,
}

fn load_camo(dir: &Path, run_id: String) -> Result<LoadedCamo, CliError> {
    let conf = dir.join("attack.conf");
    let text = fs::read_to_string(&conf).map_err(|e| CliError::io(&conf, e))?;
    let cfg = AttackConfig::from_kv_text(&text).map_err(runtime)?;
    let tex_path = dir.join("texture.png");
    let texture = if tex_path.exists() { Some(RgbImage::load_png(&tex_path).map_err(runtime)?) } else { None };
    let disp = dir.join("displacement.csv");
    let field = if disp.exists() {
        let t = fs::read_to_string(&disp).map_err(|e| CliError::io(&disp, e))?;
        Some(DisplacementField::from_csv(&t, VEHICLE_AXES, cfg.pm).map_err(runtime)?)
    } else {
        None
    };
    let kind = kind_of(cfg.mode);
    if (kind != AttackKind::Texture) != field.is_some() || (kind != AttackKind::Shape) != texture.is_some() {
        return Err(runtime(format!("{}: artifacts do not match mode {}", dir.display(), cfg.mode)));
    }
    Ok(LoadedCamo {
        run_id,
        label: attack_label(cfg.flags, kind),
        flags: cfg.flags.to_string(),
        kind: Some(kind),
        pm: (kind != AttackKind::Texture).then_some(cfg.pm),
        camo: Camouflage { texture, field },
    })
}

/// An attack directory, or a sweep directory holding `pm_*` artifact sets.
fn collect_camos(dir: &Path) -> Result<Vec<(PathBuf, String)>, CliError> {
    let base = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join("attack.conf").exists() {
        return Ok(vec![(dir.to_path_buf(), base)]);
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("attack.conf").exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(runtime(format!("no camouflage artifacts in {}", dir.display())));
    }
    Ok(subs
        .into_iter()
        .map(|p| {
            let id = format!("{base}/{}", p.file_name().unwrap().to_string_lossy());
            (p, id)
        })
        .collect())
}

fn metric_rows(c: &LoadedCamo, evals: &[DetectorEval]) -> Vec<MetricsRow> {
    let pr = c.pm.map(|pm| 1.0 - pm);
    let row = |detector: String, rates: Option<(f64, f64, f64)>, ap_or: f64, ap_adv: f64| MetricsRow {
        run_id: c.run_id.clone(),
        attack: c.label.clone(),
        constraint_flags: c.flags.clone(),
        pm: c.pm,
        pr,
        detector,
        asr: rates.map(|r| r.0),
        er: rates.map(|r| r.1),
        easr: rates.map(|r| r.2),
        ap_or,
        ap_adv,
        apd: ap_or - ap_adv,
        p1: match (rates, pr) {
            (Some(r), Some(pr)) => Some(p1(r.2, pr)),
            _ => None,
        },
    };
    let mut rows: Vec<MetricsRow> = evals
        .iter()
        .map(|e| row(e.detector.clone(), e.rates.map(|r| (r.asr, r.er, r.easr)), e.ap_or, e.ap_adv))
        .collect();
    let defined: Vec<_> = evals.iter().filter_map(|e| e.rates).collect();
    let n = evals.len().max(1) as f64;
    let mean_rates = (!defined.is_empty()).then(|| {
        let k = defined.len() as f64;
        (
            defined.iter().map(|r| r.asr).sum::<f64>() / k,
            defined.iter().map(|r| r.er).sum::<f64>() / k,
            mean_easr(evals).expect("defined"),
        )
    });
    rows.push(row(
        "mean".into(),
        mean_rates,
        evals.iter().map(|e| e.ap_or).sum::<f64>() / n,
        evals.iter().map(|e| e.ap_adv).sum::<f64>() / n,
    ));
    rows
}

pub fn evaluate(a: EvaluateArgs) -> Result<PathBuf, CliError> {
    let mut f = FileConfig::load(a.common.config.as_deref())?;
    let det_dir: PathBuf = f.resolve_opt("detectors", a.detectors)?.ok_or_else(|| usage("--detectors is required"))?;
    let mut camo_dirs = a.camo;
    if camo_dirs.is_empty() {
        if let Some(list) = f.take::<String>("camo")? {
            camo_dirs = list.split(',').map(|s| PathBuf::from(s.trim())).collect();
        }
    }
    let n_scenes = f.resolve("n_scenes", a.n_scenes, 100)?;
    let seed = f.resolve("seed", a.seed, 1000)?;
    let profile = parse_profile(&f.resolve("profile", a.profile, "train".to_string())?)?;
    let image_size = f.resolve("image_size", a.image_size, DEFAULT_IMAGE_SIZE)?;
    let radius = f.resolve("radius", a.radius, MATCH_RADIUS)?;
    let bg_dir: Option<PathBuf> = f.resolve_opt("backgrounds", a.backgrounds)?;
    let jobs = f.resolve("jobs", a.common.jobs, 1)?;
    f.finish()?;
    if n_scenes == 0 || image_size == 0 || !(radius > 0.0) {
        return Err(usage("n-scenes, image-size and radius must be positive"));
    }
    camoforge::init_workers(jobs);
    let (dets, paths) = load_detectors(&det_dir)?;
    let mut camos = Vec::new();
    for d in &camo_dirs {
        for (p, id) in collect_camos(d)? {
            camos.push((p.clone(), load_camo(&p, id)?));
        }
    }
    let mut input_paths: Vec<PathBuf> = paths.clone();
    input_paths.extend(camo_dirs.iter().cloned());
    let config = json!({
        "inputs": input_paths.iter().map(|p| path_digest(p)).collect::<Result<Vec<_>, _>>()?,
        "n_scenes": n_scenes,
        "seed": seed,
        "profile": profile,
        "image_size": image_size,
        "radius": radius,
        "backgrounds": bg_dir.as_ref().map(|p| path_digest(p)).transpose()?,
    });
    let mut run = Run::start("evaluate", config, seed, a.common.out.as_deref())?;
    for p in &input_paths {
        run.input(p)?;
    }
    let bg = backgrounds(bg_dir.as_deref())?;
    let pool = ScenePool::sample(RenderConfig::for_profile(profile, image_size), n_scenes, seed, &bg).map_err(runtime)?;
    let mut loaded: Vec<LoadedCamo> = camos.into_iter().map(|(_, c)| c).collect();
    if loaded.is_empty() {
        loaded.push(LoadedCamo {
            run_id: "identity".into(),
            label: "identity".into(),
            flags: ConstraintFlags::NONE.to_string(),
            kind: None,
            pm: Some(0.0),
            camo: Camouflage::default(),
        });
    }
    let mut rows = Vec::new();
    let mut curves: BTreeMap<String, Vec<SweepPoint>> = BTreeMap::new();
    for c in &loaded {
        let evals = evaluate_camouflage(&c.camo, &dets, &pool, radius).map_err(runtime)?;
        rows.extend(metric_rows(c, &evals));
        if let (Some(pm), Some(AttackKind::Shape | AttackKind::Combined)) = (c.pm, c.kind) {
            curves
                .entry(c.label.clone())
                .or_default()
                .push(SweepPoint::new(pm, evals.iter().map(|e| e.rates.map(|r| r.easr)).collect()));
        }
    }
    run.write("metrics.csv", metrics_csv(&rows))?;
    let table = practicality_table();
    run.write("practicality.md", practicality_markdown(&table))?;
    run.write("practicality.csv", practicality_csv(&table))?;
    let mut report = String::from("# Evaluation\n\n");
    report.push_str(&format!("{n_scenes} scenes, profile {profile:?}, seed {seed}, match radius {radius} px.\n\n"));
    report.push_str("| attack | run | PM | Pr | mean EASR | P1 | P1-optimal |\n|---|---|---|---|---|---|---|\n");
    let mut sweep_csv = String::from("attack,pm,pr,easr_mean,p1,optimal\n");
    let mut series = Vec::new();
    let palette = [[0.85, 0.1, 0.1], [0.1, 0.35, 0.85], [0.1, 0.6, 0.2], [0.6, 0.2, 0.7]];
    for (i, (label, mut pts)) in curves.into_iter().enumerate() {
        pts.sort_by(|a, b| a.pm.total_cmp(&b.pm));
        let sweep = SweepResult::from_points(pts).map_err(runtime)?;
        for (j, p) in sweep.points.iter().enumerate() {
            let e = p.easr_mean.map_or_else(|| "N/A".to_string(), |v| format!("{v:.6}"));
            let opt = j == sweep.optimal_index;
            sweep_csv.push_str(&format!("{label},{:.4},{:.4},{e},{:.6},{opt}\n", p.pm, p.pr, p.p1));
        }
        series.push(Series {
            points: sweep.points.iter().map(|p| [p.pr, p.easr_mean.unwrap_or(0.0).max(0.0)]).collect(),
            color: palette[i % palette.len()],
            highlight: Some(sweep.optimal_index),
        });
    }
    for r in rows.iter().filter(|r| r.detector == "mean") {
        let fmt = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |x| format!("{x:.4}"));
        let optimal = sweep_csv.lines().any(|l| {
            l.ends_with(",true")
                && l.starts_with(&format!("{},", r.attack))
                && r.pm.is_some_and(|pm| l.contains(&format!(",{pm:.4},")))
        });
        report.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.attack,
            r.run_id,
            fmt(r.pm),
            fmt(r.pr),
            fmt(r.easr),
            fmt(r.p1),
            if optimal { "yes" } else { "" }
        ));
    }
    run.write("sweep.csv", &sweep_csv)?;
    if !series.is_empty() {
        unit_chart(&series).save_png(&run.path("easr_vs_pr.png")).map_err(runtime)?;
    }
    run.write("report.md", report)?;
    let dir = run.dir.clone();
    run.finish()?;
    Ok(dir)
}
