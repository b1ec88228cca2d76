use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use smmf_core::diffusion::{ddim_invert, sample as ddim_generate, NoiseSchedule};
use smmf_core::guidance::{
    prepare_source, sdedit, seeded_noise, transfer_from_source, GuidanceConfig, LossKind, LrSchedule,
    PromptChoice, StepLoss, Variant,
};
use smmf_core::io::{self, Checkpoint};
use smmf_core::metrics::{
    edit_fidelity, motion_fidelity, track_block_matching, track_with_fallback, train_probe, MetricReport, Probe, ProbeConfig,
    Seeding, TrackerConfig,
};
use smmf_core::synthvid::{build_dataset, load_dataset, DatasetEntry, DatasetOptions, Split};
use smmf_core::train::{train, Example, LossRecord, TrainConfig};
use smmf_core::{Condition, Denoiser, DenoiserConfig, Error, ShapeKind, TrackletSet, VideoTensor};

use crate::config::RunConfig;
use crate::render::render;

/// Files written by a command, the manifest location and its results.
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
    pub results: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command.as_str() {
        "synthgen" => synthgen(cfg),
        "train" => cmd_train(cfg),
        "sample" => cmd_sample(cfg),
        "invert" => invert(cfg),
        "feature-invert" => feature_invert(cfg),
        "transfer" => transfer(cfg),
        "track" => track(cfg),
        "score" => score(cfg),
        "probe" => probe(cfg),
        "render" => cmd_render(cfg),
        other => Err(bad(format!("unknown command {other:?}"))),
    }
}

fn file_outcome(out: PathBuf, mut extra: Vec<PathBuf>, results: serde_json::Value) -> Outcome {
    let manifest = crate::manifest::RunManifest::location(&out, false);
    extra.insert(0, out);
    Outcome {
        outputs: extra,
        manifest,
        results,
    }
}

fn dir_outcome(dir: &Path, outputs: Vec<PathBuf>, results: serde_json::Value) -> Outcome {
    Outcome {
        outputs,
        manifest: crate::manifest::RunManifest::location(dir, true),
        results,
    }
}

fn parse_mix(s: &str) -> Result<BTreeMap<ShapeKind, f64>> {
    let mut mix = BTreeMap::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, w) = part.split_once('=').ok_or_else(|| bad(format!("mix entry {part:?} is not shape=weight")))?;
        let kind = ShapeKind::parse(k.trim()).ok_or_else(|| bad(format!("unknown shape {k:?}")))?;
        let w: f64 = w.trim().parse().map_err(|_| bad(format!("bad weight in {part:?}")))?;
        mix.insert(kind, w);
    }
    Ok(mix)
}

fn synthgen(cfg: &RunConfig) -> Result<Outcome> {
    let out = cfg.req_path("out")?;
    let mut opts = DatasetOptions::new(cfg.usize("n").unwrap(), cfg.u64("seed").unwrap());
    opts.class_mix = parse_mix(cfg.str("mix").unwrap_or(""))?;
    opts.val_every = cfg.usize("val-every").unwrap();
    opts.frames = cfg.usize("frames").unwrap();
    opts.height = cfg.usize("height").unwrap();
    opts.width = cfg.usize("width").unwrap();
    opts.force = cfg.bool("force");
    let rows = build_dataset(&opts, &out)?;
    let val = rows.iter().filter(|r| r.split == Split::Val).count();
    let mut per_class = BTreeMap::new();
    for r in &rows {
        *per_class.entry(r.shape.name()).or_insert(0usize) += 1;
    }
    let results = json!({ "videos": rows.len(), "train": rows.len() - val, "val": val, "per_class": per_class });
    Ok(dir_outcome(&out, vec![out.join(smmf_core::synthvid::MANIFEST_FILE)], results))
}

fn split(entries: Vec<DatasetEntry>, which: Split) -> Vec<DatasetEntry> {
    entries.into_iter().filter(|e| e.row.split == which).collect()
}

fn cmd_train(cfg: &RunConfig) -> Result<Outcome> {
    let data = cfg.req_path("data")?;
    let out = cfg.req_path("out")?;
    let entries = split(load_dataset(&data)?, Split::Train);
    let first = entries.first().ok_or_else(|| Error::Data("dataset has no training videos".into()))?;
    let d = first.video.dims();
    let model_cfg = DenoiserConfig {
        frames: d.frames,
        height: d.height,
        width: d.width,
        channels: d.channels,
        base_width: cfg.usize("base-width").unwrap(),
        ..DenoiserConfig::default()
    };
    let seed = cfg.u64("seed").unwrap();
    let sched = NoiseSchedule::new(smmf_core::ScheduleParams {
        steps: cfg.usize("diffusion-steps").unwrap(),
        ..Default::default()
    })?;
    let model_cfg = DenoiserConfig {
        velocity_head: cfg.bool("velocity-head").then(|| sched.params()),
        ..model_cfg
    };
    let model = Denoiser::new(model_cfg, seed)?;
    let tc = TrainConfig {
        steps: cfg.usize("steps").unwrap(),
        batch: cfg.usize("batch").unwrap(),
        lr: cfg.f64("lr").unwrap(),
        warmup: cfg.usize("warmup").unwrap(),
        lr_floor: cfg.f64("lr-floor").unwrap(),
        cond_dropout: cfg.f64("cond-dropout").unwrap(),
        grad_clip: cfg.f64("grad-clip").unwrap(),
        ema_decay: cfg.f64("ema-decay").unwrap(),
        augment: cfg.bool("augment"),
        seed,
        log_every: cfg.usize("log-every").unwrap(),
    };
    let examples: Vec<Example> = entries.iter().map(|e| Example::new(&e.video, e.row.class)).collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let log_path = PathBuf::from(format!("{}.log.jsonl", out.display()));
    let mut log_file = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let outcome = train(model, &sched, &examples, &tc, |r: &LossRecord| {
        eprintln!("step {:>6}  loss {:.5}  mean {:.5}", r.step, r.loss, r.running_mean);
        if let Err(e) = serde_json::to_writer(&mut log_file, r).map_err(std::io::Error::from).and_then(|_| writeln!(log_file)) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    log_file.flush()?;
    io::write_checkpoint(
        &out,
        &Checkpoint {
            model: outcome.model,
            schedule: sched.params(),
        },
    )?;
    let results = json!({
        "train_videos": examples.len(),
        "initial_running_mean": outcome.log.first().map(|r| r.running_mean),
        "final_running_mean": outcome.log.last().map(|r| r.running_mean),
    });
    Ok(file_outcome(out, vec![log_path], results))
}

fn read_video(cfg: &RunConfig, key: &str) -> Result<VideoTensor> {
    let path = cfg.req_path(key)?;
    io::read_vten(&path).with_context(|| format!("reading {}", path.display()))
}

fn read_tracks(path: &Path) -> Result<TrackletSet> {
    io::read_tracklets(path).with_context(|| format!("reading {}", path.display()))
}

fn load_model(cfg: &RunConfig) -> Result<(Denoiser<f32>, NoiseSchedule)> {
    let path = cfg.req_path("ckpt")?;
    let ckpt = io::read_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok((ckpt.model, NoiseSchedule::new(ckpt.schedule)?))
}

fn condition(cfg: &RunConfig, key: &str, model: &Denoiser<f32>) -> Result<Condition> {
    let s = cfg.str(key).unwrap_or("null");
    let c = Condition::parse(s).ok_or_else(|| bad(format!("{key}: unknown class {s:?}")))?;
    if let Condition::Class(k) = c {
        if k >= model.config().num_classes {
            return Err(bad(format!("{key}: class {k} outside the model's {} classes", model.config().num_classes)));
        }
    }
    Ok(c)
}

fn class_index(cond: Condition) -> Option<usize> {
    match cond {
        Condition::Class(k) => Some(k),
        Condition::Null => None,
    }
}

fn cmd_sample(cfg: &RunConfig) -> Result<Outcome> {
    let (model, sched) = load_model(cfg)?;
    let cond = condition(cfg, "class", &model)?;
    let out = cfg.req_path("out")?;
    let x_t = seeded_noise::<f32>(&model.config().input_shape(), cfg.u64("seed").unwrap())?;
    let video = ddim_generate(&model, &sched, &x_t, cond, cfg.usize("steps").unwrap(), cfg.f64("cfg-scale").unwrap())?;
    io::write_vten(&out, &video)?;
    Ok(file_outcome(out, vec![], json!({})))
}

fn invert(cfg: &RunConfig) -> Result<Outcome> {
    let (model, sched) = load_model(cfg)?;
    let cond = condition(cfg, "class", &model)?;
    let video = read_video(cfg, "video")?;
    let steps = cfg.usize("steps").unwrap();
    let traj = ddim_invert(&model, &sched, &video.to_latent::<f32>(), cond, steps)?;
    let x_t = traj.last().expect("at least one step");
    let out = cfg.req_path("out")?;
    fs::write(&out, io::encode_latent(x_t)?).with_context(|| format!("writing {}", out.display()))?;
    let mut extra = Vec::new();
    let mut results = json!({ "t": traj.steps.last() });
    if let Some(recon) = cfg.path("recon") {
        let back = ddim_generate(&model, &sched, x_t, cond, steps, 1.0)?;
        io::write_vten(&recon, &back)?;
        results["mse"] = json!(back.mse(&video)?);
        extra.push(recon);
    }
    Ok(file_outcome(out, extra, results))
}

fn guidance_config(cfg: &RunConfig) -> Result<GuidanceConfig> {
    let mut g = match cfg.str("preset").unwrap_or("default") {
        "default" => GuidanceConfig::default(),
        "decay" => GuidanceConfig::decay_preset(),
        other => return Err(bad(format!("unknown preset {other:?}"))),
    };
    g.xi = cfg.usize("xi").unwrap();
    g.n_denoise_steps = cfg.usize("steps").unwrap();
    g.guidance_window = cfg.usize("window").unwrap();
    if let Some(n) = cfg.usize("opt-steps") {
        g.opt_steps = n;
    }
    match (cfg.f64("lr"), cfg.f64("lr-end")) {
        (Some(a), Some(b)) => g.lr = LrSchedule::Linear(a, b),
        (Some(a), None) => g.lr = LrSchedule::Constant(a),
        (None, Some(_)) => return Err(bad("lr-end needs lr")),
        (None, None) => {}
    }
    g.cfg_scale = cfg.f64("cfg-scale").unwrap();
    let loss = cfg.str("loss").unwrap_or("");
    g.loss = LossKind::parse(loss).ok_or_else(|| bad(format!("unknown loss {loss:?}")))?;
    g.inversion_steps = cfg.usize("inversion-steps").unwrap();
    g.lf_init = cfg.bool("lf-init");
    g.gen_features = prompt_choice(cfg, "gen-features")?;
    g.inversion_prompt = prompt_choice(cfg, "inversion-prompt")?;
    Ok(g)
}

fn prompt_choice(cfg: &RunConfig, key: &str) -> Result<PromptChoice> {
    match cfg.str(key) {
        Some("null") => Ok(PromptChoice::Null),
        Some("prompt") => Ok(PromptChoice::Prompt),
        other => Err(bad(format!("{key}: expected prompt or null, got {other:?}"))),
    }
}

fn source_class(cfg: &RunConfig, model: &Denoiser<f32>) -> Result<Option<usize>> {
    if cfg.is_set("source-class") {
        Ok(class_index(condition(cfg, "source-class", model)?))
    } else {
        Ok(None)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn feature_invert(cfg: &RunConfig) -> Result<Outcome> {
    let (model, sched) = load_model(cfg)?;
    let prompt = condition(cfg, "class", &model)?;
    let gcfg = guidance_config(cfg)?;
    let video = read_video(cfg, "video")?;
    let out = cfg.req_path("out")?;
    fs::create_dir_all(&out)?;
    let source = prepare_source(&model, &sched, &video, source_class(cfg, &model)?, &gcfg)?;
    let result = smmf_core::guidance::feature_inversion(
        &model,
        &sched,
        &source.targets,
        prompt,
        &gcfg,
        cfg.u64("seed").unwrap(),
    )?;
    let mut outputs = vec![out.join("video.vten"), out.join("losses.json")];
    io::write_vten(&outputs[0], &result.video)?;
    write_json(&outputs[1], &result.losses)?;
    outputs.extend(render(&result.video, &out, 4, 8)?);
    let (first, last) = objective_span(&result.losses);
    let results = json!({
        "mse": result.video.mse(&video)?,
        "objective_initial": first,
        "objective_final": last,
        "objective_reduction": first.zip(last).map(|(a, b)| if a > 0.0 { 1.0 - b / a } else { 0.0 }),
    });
    Ok(dir_outcome(&out, outputs, results))
}

/// Objective before the first inner optimization and after the last one.
pub fn objective_span(losses: &[StepLoss]) -> (Option<f64>, Option<f64>) {
    (losses.first().map(|l| l.before), losses.last().map(|l| l.after))
}

fn tracker_config(cfg: &RunConfig) -> Result<TrackerConfig> {
    let seeding = match cfg.str("seeding") {
        Some("foreground") => Seeding::Foreground,
        Some("uniform") => Seeding::Uniform,
        other => return Err(bad(format!("seeding: expected foreground or uniform, got {other:?}"))),
    };
    let mut t = TrackerConfig {
        n_points: cfg.usize("points").unwrap(),
        seeding,
        seed: cfg.u64("seed").unwrap(),
        ..TrackerConfig::default()
    };
    if let Some(p) = cfg.usize("patch") {
        t.patch = p;
    }
    if let Some(r) = cfg.usize("radius") {
        t.radius = r;
    }
    if let Some(th) = cfg.f64("fg-threshold") {
        t.fg_threshold = th as f32;
    }
    Ok(t)
}

fn load_probe(cfg: &RunConfig) -> Result<Option<Probe>> {
    cfg.path("probe")
        .map(|p| io::read_probe(&p).with_context(|| format!("loading probe {}", p.display())))
        .transpose()
}

fn transfer(cfg: &RunConfig) -> Result<Outcome> {
    let (model, sched) = load_model(cfg)?;
    let prompt = condition(cfg, "class", &model)?;
    let target = class_index(prompt).ok_or_else(|| bad("transfer needs a target class, not null"))?;
    let variant_name = cfg.str("variant").unwrap_or("");
    let variant = Variant::parse(variant_name).ok_or_else(|| bad(format!("unknown variant {variant_name:?}")))?;
    let base = guidance_config(cfg)?;
    let gcfg = variant.config(&base);
    gcfg.validate(&model, &sched)?;
    let tcfg = tracker_config(cfg)?;
    let probe = load_probe(cfg)?;
    let video = read_video(cfg, "video")?;
    let src_tracks: TrackletSet = match cfg.path("tracks") {
        Some(p) => read_tracks(&p)?,
        None => track_block_matching(&video, &tcfg).context("tracking the source video")?,
    };
    let seed = cfg.u64("seed").unwrap();
    let out = cfg.req_path("out")?;
    fs::create_dir_all(&out)?;

    let (generated, losses) = if variant == Variant::Sdedit {
        let v = sdedit(&model, &sched, &video, prompt, cfg.f64("strength").unwrap(), &gcfg, seed)?;
        (v, Vec::new())
    } else {
        let source = prepare_source(&model, &sched, &video, source_class(cfg, &model)?, &gcfg)?;
        let r = transfer_from_source(&model, &sched, &source, prompt, &gcfg, seed)?;
        (r.video, r.losses)
    };

    let mut outputs = vec![out.join("video.vten"), out.join("losses.json")];
    io::write_vten(&outputs[0], &generated)?;
    write_json(&outputs[1], &losses)?;
    outputs.extend(render(&generated, &out, cfg.usize("scale").unwrap(), cfg.usize("fps").unwrap())?);

    let (gen_tracks, gen_seeding) = track_with_fallback(&generated, &tcfg).context("tracking the generated video")?;
    let score = motion_fidelity(&src_tracks, &gen_tracks)?;
    let ef = probe.as_ref().map(|p| edit_fidelity(p, &generated, target)).transpose()?;
    let report = MetricReport::new(score, ef, json!(cfg.values));
    for (name, value) in [("tracks_src.json", &src_tracks), ("tracks_gen.json", &gen_tracks)] {
        let p = out.join(name);
        io::write_tracklets(&p, value)?;
        outputs.push(p);
    }
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    outputs.push(report_path);
    let results = json!({
        "motion_fidelity": report.motion_fidelity,
        "edit_fidelity": report.edit_fidelity,
        "variant": variant.name(),
        "generated_seeding": gen_seeding,
    });
    Ok(dir_outcome(&out, outputs, results))
}

fn track(cfg: &RunConfig) -> Result<Outcome> {
    let video = read_video(cfg, "video")?;
    let tracks = track_block_matching(&video, &tracker_config(cfg)?)?;
    let out = cfg.req_path("out")?;
    io::write_tracklets(&out, &tracks)?;
    Ok(file_outcome(out, vec![], json!({ "tracks": tracks.len() })))
}

fn score(cfg: &RunConfig) -> Result<Outcome> {
    let src = read_tracks(&cfg.req_path("src")?)?;
    let gen = read_tracks(&cfg.req_path("gen")?)?;
    let score = motion_fidelity(&src, &gen)?;
    let wanted = ["probe", "video", "class"].map(|k| cfg.is_set(k));
    let ef = match wanted {
        [true, true, true] => {
            let probe = load_probe(cfg)?.expect("set");
            let video = read_video(cfg, "video")?;
            let s = cfg.str("class").unwrap_or("");
            let class = match Condition::parse(s) {
                Some(Condition::Class(k)) => k,
                _ => return Err(bad(format!("class: expected a class, got {s:?}"))),
            };
            Some(edit_fidelity(&probe, &video, class)?)
        }
        [false, false, false] => None,
        _ => return Err(bad("edit fidelity needs all of probe, video and class")),
    };
    let report = MetricReport::new(score, ef, json!(cfg.values));
    let out = cfg.req_path("out")?;
    write_json(&out, &report)?;
    let results = json!({ "motion_fidelity": report.motion_fidelity, "edit_fidelity": report.edit_fidelity });
    Ok(file_outcome(out, vec![], results))
}

/// Argmax accuracy of `probe` over labelled videos.
pub fn probe_accuracy(probe: &Probe, videos: &[(VideoTensor, usize)]) -> Result<f64> {
    let mut hits = 0;
    for (v, k) in videos {
        if probe.argmax(v)? == *k {
            hits += 1;
        }
    }
    Ok(hits as f64 / videos.len().max(1) as f64)
}

fn probe(cfg: &RunConfig) -> Result<Outcome> {
    let entries = load_dataset(&cfg.req_path("data")?)?;
    let labelled = |which: Split| -> Vec<(VideoTensor, usize)> {
        entries.iter().filter(|e| e.row.split == which).map(|e| (e.video.clone(), e.row.class)).collect()
    };
    let (train_set, val_set) = (labelled(Split::Train), labelled(Split::Val));
    let out = cfg.req_path("out")?;
    match cfg.str("action") {
        Some("train") => {
            let pc = ProbeConfig {
                width: cfg.usize("width").unwrap(),
                steps: cfg.usize("steps").unwrap(),
                batch: cfg.usize("batch").unwrap(),
                lr: cfg.f64("lr").unwrap(),
                noise: cfg.f64("noise").unwrap(),
                seed: cfg.u64("seed").unwrap(),
                channels: train_set.first().map_or(3, |(v, _)| v.dims().channels),
                ..ProbeConfig::default()
            };
            let (probe, log) = train_probe(&train_set, pc)?;
            io::write_probe(&out, &probe)?;
            let val_accuracy = if val_set.is_empty() { None } else { Some(probe_accuracy(&probe, &val_set)?) };
            let results = json!({
                "final_loss": log.losses.last(),
                "train_accuracy": probe_accuracy(&probe, &train_set)?,
                "val_accuracy": val_accuracy,
            });
            Ok(file_outcome(out, vec![], results))
        }
        Some("eval") => {
            let probe = load_probe(cfg)?.ok_or_else(|| bad("eval needs a probe file"))?;
            let set = if val_set.is_empty() { &train_set } else { &val_set };
            let results = json!({ "accuracy": probe_accuracy(&probe, set)?, "videos": set.len() });
            write_json(&out, &results)?;
            Ok(file_outcome(out, vec![], results))
        }
        other => Err(bad(format!("action: expected train or eval, got {other:?}"))),
    }
}

fn cmd_render(cfg: &RunConfig) -> Result<Outcome> {
    let video = read_video(cfg, "video")?;
    let out = cfg.req_path("out")?;
    let outputs = render(&video, &out, cfg.usize("scale").unwrap(), cfg.usize("fps").unwrap())?;
    Ok(dir_outcome(&out, outputs, json!({})))
}
