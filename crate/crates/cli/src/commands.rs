use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tryon_core::backbone::{init_backbone, BackboneConfig};
use tryon_core::checkpoint::Checkpoint;
use tryon_core::clients::{ClientConfig, RemoteModels};
use tryon_core::conditioning::{SourceTag, VideoTensor};
use tryon_core::media;
use tryon_core::metrics::{self, ExtractorKind, Extractors, Layout, RemoteExtractor, ReportRow};
use tryon_core::model::ModelConfig;
use tryon_core::pipeline::{self, ManifestRecord, PipelineOptions, Provenance, SourceVideo};
use tryon_core::sampling::{generate as gen_video, generate_interpolated, GenerationRequest, Mode, Model};
use tryon_core::toy::{self, figure, garment_image, HELD_OUT};
use tryon_core::training::{Example, Trainer};
use tryon_core::{Error, Result};

use crate::config::{self, require, BuildConfig, EvalConfig, GenerateConfig, InitConfig, ServeConfig, ToyConfig, TrainRunConfig, VideoFormat};
use crate::log;
use crate::{BuildArgs, EvalArgs, GenerateArgs, InitArgs, ServeArgs, ToyArgs, TrainArgs};

pub const BACKBONE_FILE: &str = "backbone.ck";
pub const CHECKPOINT_FILE: &str = "checkpoint.ck";
pub const LOSS_FILE: &str = "losses.jsonl";

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

pub fn init(a: InitArgs) -> Result<()> {
    let mut c: InitConfig = config::load(a.config.as_deref(), "init")?;
    set_opt(&mut c.out, a.out);
    set(&mut c.seed, a.seed);
    let backbone = c.backbone.get_or_insert_with(|| ModelConfig::default().backbone).clone();
    let out = require(&c.out, "--out")?;
    let params = init_backbone(&backbone, c.seed)?;
    let ck = Checkpoint::new(json!({ "kind": "backbone", "backbone": backbone, "seed": c.seed }), params);
    let path = out.join(BACKBONE_FILE);
    ck.save(&path)?;
    config::write_snapshot(&out, "init", &c)?;
    log::event("init", json!({ "checkpoint": path, "hash": ck.params.hash_prefix("backbone.") }));
    Ok(())
}

/// One line of a `build-dataset` input list; paths relative to the list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceEntry {
    pub id: String,
    pub video: String,
    #[serde(default)]
    pub catalog: Vec<String>,
    #[serde(default)]
    pub caption: String,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn toy_record(sample: &tryon_core::conditioning::TripletSample, out: &Path) -> Result<ManifestRecord> {
    Ok(ManifestRecord {
        id: sample.id.clone(),
        mode: "synthetic-toy".into(),
        paths: Some(pipeline::write_sample(out, sample)?),
        prompt: sample.prompt.clone(),
        provenance: Some(Provenance {
            seed: 0,
            source: SourceTag::SyntheticToy,
            human_frame: 0,
            garment_frame: None,
            crop: None,
            inpaint_prompt: None,
        }),
        rejected: false,
        reason: None,
    })
}

/// Training triplets, the held-out recombination, and raw source clips for
/// `build-dataset`.
pub fn make_toy(a: ToyArgs) -> Result<()> {
    let mut c: ToyConfig = config::load(a.config.as_deref(), "make-toy")?;
    set_opt(&mut c.out, a.out);
    set(&mut c.limit, a.limit);
    let out = require(&c.out, "--out")?;
    fs::create_dir_all(&out)?;
    let corpus = toy::toy_corpus(c.limit)?;
    let records = corpus.iter().map(|(_, s)| toy_record(s, &out)).collect::<Result<Vec<_>>>()?;
    pipeline::write_manifest(&out.join(pipeline::MANIFEST_FILE), &records)?;

    let held = figure(HELD_OUT.0, HELD_OUT.1).triplet(format!("held-out-{}-{}", HELD_OUT.0, HELD_OUT.1));
    pipeline::write_manifest(&out.join("held_out.jsonl"), &[toy_record(&held, &out)?])?;

    let src_dir = out.join("sources");
    fs::create_dir_all(&src_dir)?;
    let mut entries = Vec::new();
    for (fig, s) in &corpus {
        let video = format!("sources/{}.raw", s.id);
        media::write_raw(&out.join(&video), &fig.video())?;
        let cat = format!("sources/{}_garment.png", s.id);
        media::save_image(&out.join(&cat), &garment_image(fig.garment))?;
        entries.push(SourceEntry { id: s.id.clone(), video, catalog: vec![cat], caption: s.prompt.clone() });
    }
    write_jsonl(&out.join("sources.jsonl"), &entries)?;
    config::write_snapshot(&out, "make-toy", &c)?;
    log::event("make-toy", json!({ "triplets": records.len(), "out": out }));
    Ok(())
}

fn client_config(path: Option<&Path>) -> Result<ClientConfig> {
    let base = match path {
        None => ClientConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
    };
    Ok(base.with_env())
}

pub fn build_dataset(a: BuildArgs, workers: usize) -> Result<()> {
    let mut c: BuildConfig = config::load(a.config.as_deref(), "build-dataset")?;
    set_opt(&mut c.input, a.input);
    set(&mut c.mode, a.mode);
    set(&mut c.seed, a.seed);
    set_opt(&mut c.clients, a.clients);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.limit, a.limit);
    let input = require(&c.input, "--input")?;
    let out = require(&c.out, "--out")?;
    let clients = client_config(c.clients.as_deref())?;
    let root = input.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<SourceEntry> = read_jsonl(&input)?;
    if let Some(n) = c.limit {
        entries.truncate(n);
    }
    let sources = entries
        .iter()
        .map(|e| {
            Ok(SourceVideo {
                id: e.id.clone(),
                video: media::load_video(&root.join(&e.video))?,
                catalog: e.catalog.iter().map(|p| media::load_video(&root.join(p))).collect::<Result<_>>()?,
                caption: e.caption.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = PipelineOptions {
        n_samples: c.n_samples,
        k_top: c.k_top,
        scales: (c.face_scale, c.body_scale),
        mask_retries: c.mask_retries,
        ..Default::default()
    };
    config::write_snapshot(&out, "build-dataset", &c)?;
    let records = pipeline::run_pipeline(&sources, c.mode, &clients.suite(), &opts, c.seed, workers, &out)?;
    let accepted = records.iter().filter(|r| !r.rejected).count();
    for r in records.iter().filter(|r| r.rejected) {
        log::event("rejected", json!({ "id": r.id, "reason": r.reason }));
    }
    log::event(
        "build-dataset",
        json!({ "accepted": accepted, "rejected": records.len() - accepted, "manifest": out.join(pipeline::MANIFEST_FILE) }),
    );
    if accepted == 0 {
        return Err(Error::Invalid("every sample was rejected".into()));
    }
    Ok(())
}

fn backbone_config(ck: &Checkpoint) -> Result<BackboneConfig> {
    let v = ck
        .meta
        .get("backbone")
        .or_else(|| ck.meta.get("model").and_then(|m| m.get("backbone")))
        .cloned()
        .ok_or_else(|| Error::Config("checkpoint carries no backbone config".into()))?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("backbone config: {e}")))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut c: TrainRunConfig = config::load(a.config.as_deref(), "train")?;
    set_opt(&mut c.manifest, a.manifest);
    set_opt(&mut c.backbone, a.backbone);
    set_opt(&mut c.out, a.out);
    set_opt(&mut c.resume, a.resume);
    set(&mut c.train.variant, a.variant);
    set(&mut c.train.lora_rank, a.rank);
    set(&mut c.train.steps, a.steps);
    set(&mut c.train.seed, a.seed);
    set(&mut c.train.lr, a.lr);
    set(&mut c.train.batch_size, a.batch_size);
    set(&mut c.train.checkpoint_every, a.checkpoint_every);
    c.train.validate()?;
    let out = require(&c.out, "--out")?;
    let manifest = require(&c.manifest, "--manifest")?;
    let samples = pipeline::load_manifest_samples(&manifest)?;
    let examples = samples.iter().map(|s| Example::prepare(s, c.train.variant)).collect::<Result<Vec<_>>>()?;

    let mut trainer = match &c.resume {
        Some(p) => {
            let t = Trainer::resume(&Checkpoint::load(p)?, examples)?;
            if t.cfg.variant != c.train.variant || t.cfg.seed != c.train.seed {
                return Err(Error::Config("resume checkpoint was trained with another variant or seed".into()));
            }
            let mut t = t;
            t.cfg.steps = c.train.steps;
            t
        }
        None => {
            let bk = Checkpoint::load(&require(&c.backbone, "--backbone")?)?;
            let model = ModelConfig { backbone: backbone_config(&bk)?, variant: c.train.variant, lora_rank: c.train.lora_rank };
            model.validate()?;
            Trainer::new(model, c.train.clone(), bk.params, examples)?
        }
    };
    config::write_snapshot(&out, "train", &c)?;
    let hash0 = trainer.frozen_hash();
    log::event(
        "train-start",
        json!({
            "variant": trainer.cfg.variant,
            "step": trainer.step,
            "trainable": trainer.params.trainable_count(),
            "frozen_hash": hash0,
        }),
    );
    let mut losses = Vec::new();
    if c.resume.is_some() && out.join(LOSS_FILE).exists() {
        losses = read_jsonl::<serde_json::Value>(&out.join(LOSS_FILE))?
            .into_iter()
            .filter(|r| r["step"].as_u64().is_some_and(|s| s < trainer.step))
            .collect();
    }
    while trainer.step < c.train.steps {
        let rec = trainer.train_step()?;
        if c.log_every > 0 && (rec.step % c.log_every == 0 || rec.step + 1 == c.train.steps) {
            log::event("step", json!({ "step": rec.step, "loss": rec.loss, "grad_norms": rec.grad_norms }));
        }
        losses.push(serde_json::to_value(&rec)?);
        if c.train.checkpoint_every > 0 && trainer.step % c.train.checkpoint_every == 0 {
            let p = out.join(format!("step_{:06}.ck", trainer.step));
            trainer.checkpoint()?.save(&p)?;
            log::event("checkpoint", json!({ "path": p, "step": trainer.step }));
        }
    }
    let hash1 = trainer.frozen_hash();
    let path = out.join(CHECKPOINT_FILE);
    trainer.checkpoint()?.save(&path)?;
    write_jsonl(&out.join(LOSS_FILE), &losses)?;
    log::event(
        "train-end",
        json!({ "checkpoint": path, "step": trainer.step, "frozen_hash": hash1, "frozen_unchanged": hash0 == hash1 }),
    );
    if hash0 != hash1 {
        return Err(Error::NonFinite("frozen parameters changed during training".into()));
    }
    Ok(())
}

fn write_video(out: &Path, v: &VideoTensor, format: VideoFormat) -> Result<PathBuf> {
    match format {
        VideoFormat::Frames => media::write_video_dir(&out.join("video"), v),
        VideoFormat::Raw => {
            fs::create_dir_all(out)?;
            let p = out.join("video.raw");
            media::write_raw(&p, v)?;
            Ok(p)
        }
    }
}

pub fn generate(a: GenerateArgs, interpolate: bool) -> Result<()> {
    let command = if interpolate { "interpolate" } else { "generate" };
    let mut c: GenerateConfig = config::load(a.config.as_deref(), command)?;
    set_opt(&mut c.checkpoint, a.checkpoint);
    set_opt(&mut c.human, a.human);
    if !a.garments.is_empty() {
        c.garments = a.garments;
    }
    set_opt(&mut c.pose, a.pose);
    set(&mut c.prompt, a.prompt);
    set(&mut c.alpha, a.alpha);
    set(&mut c.beta, a.beta);
    set_opt(&mut c.gamma, a.gamma);
    set(&mut c.steps, a.steps);
    set(&mut c.seed, a.seed);
    set_opt(&mut c.out, a.out);
    set(&mut c.format, a.format);
    let out = require(&c.out, "--out")?;
    let ck_path = require(&c.checkpoint, "--checkpoint")?;
    if !ck_path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", ck_path.display())));
    }
    let model = Model::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    let load = |p: &Path| media::load_video(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
    let human = load(&require(&c.human, "--human")?)?;
    let garments = c.garments.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let pose = media::read_pose(&require(&c.pose, "--pose")?)?;
    let mut req = GenerationRequest::new(human, garments, pose);
    req.prompt = c.prompt.clone();
    req.steps = c.steps;
    req.seed = c.seed;
    req.alpha = c.alpha;
    req.beta = c.beta;
    let video = if interpolate {
        let gamma = c.gamma.ok_or_else(|| Error::Config("interpolate needs --gamma".into()))?;
        req.mode = Mode::Interpolate { gamma };
        generate_interpolated(&req, &model)?
    } else {
        if c.gamma.is_some() {
            return Err(Error::Config("--gamma only applies to interpolate".into()));
        }
        gen_video(&req, &model)?
    };
    let path = write_video(&out, &video, c.format)?;
    config::write_snapshot(&out, command, &c)?;
    log::event(command, json!({ "output": path, "frames": video.frames(), "steps": c.steps, "seed": c.seed }));
    Ok(())
}

/// One line of an evaluation pairs list; paths relative to the list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    pub method: String,
    pub dataset: String,
    pub pred: String,
    pub truth: String,
}

fn extractors(c: &config::ExtractorConfig) -> Result<Extractors> {
    if c.backend == "stub" {
        return Ok(Extractors::stubs());
    }
    if !c.backend.starts_with("http://") && !c.backend.starts_with("https://") {
        return Err(Error::Config(format!("extractor backend `{}` is neither `stub` nor a URL", c.backend)));
    }
    let remote = || RemoteModels::new(&c.backend, 3, Duration::from_secs(30));
    Ok(Extractors {
        image: Box::new(RemoteExtractor::new(remote(), "features.image", ExtractorKind::Image, c.image_dim)),
        clip_i3d: Box::new(RemoteExtractor::new(remote(), "features.clip.i3d", ExtractorKind::VideoClip, c.i3d_dim)),
        clip_resnext: Box::new(RemoteExtractor::new(
            remote(),
            "features.clip.resnext",
            ExtractorKind::VideoClip,
            c.resnext_dim,
        )),
    })
}

pub fn evaluate(a: EvalArgs) -> Result<()> {
    let mut c: EvalConfig = config::load(a.config.as_deref(), "evaluate")?;
    set_opt(&mut c.pairs, a.pairs);
    set_opt(&mut c.out, a.out);
    set(&mut c.layout, a.layout);
    let layout: Layout = c.layout.parse()?;
    let pairs_path = require(&c.pairs, "--pairs")?;
    let out = require(&c.out, "--out")?;
    let root = pairs_path.parent().unwrap_or(Path::new("."));
    let entries: Vec<PairEntry> = read_jsonl(&pairs_path)?;
    let fx = extractors(&c.extractors)?;
    let mut groups: Vec<((String, String), Vec<(String, VideoTensor, VideoTensor)>)> = Vec::new();
    for e in entries.iter().filter(|e| c.datasets.is_empty() || c.datasets.contains(&e.dataset)) {
        let key = (e.method.clone(), e.dataset.clone());
        let item = (e.id.clone(), media::load_video(&root.join(&e.pred))?, media::load_video(&root.join(&e.truth))?);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(item),
            None => groups.push((key, vec![item])),
        }
    }
    if groups.is_empty() {
        return Err(Error::Config("no evaluation pairs selected".into()));
    }
    let reports = groups
        .iter()
        .map(|((m, d), items)| metrics::evaluate(m, d, items, &fx))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    let (txt, csv) = metrics::render_report(&rows, layout)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("report.txt"), &txt)?;
    fs::write(out.join("report.csv"), &csv)?;
    fs::write(out.join("report.json"), serde_json::to_vec_pretty(&reports)?)?;
    config::write_snapshot(&out, "evaluate", &c)?;
    let summary: BTreeMap<String, f64> = rows
        .iter()
        .flat_map(|r| {
            metrics::COLUMNS
                .iter()
                .zip(r.scores.values())
                .map(move |(col, v)| (format!("{}/{}/{col}", r.method, r.dataset), v))
        })
        .collect();
    log::event("evaluate", json!({ "report": out.join("report.txt"), "scores": summary }));
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let mut c: ServeConfig = config::load(a.config.as_deref(), "serve-stubs")?;
    set(&mut c.addr, a.addr);
    set_opt(&mut c.max_requests, a.max_requests);
    let server = tiny_http::Server::http(&c.addr).map_err(|e| Error::Config(format!("cannot bind {}: {e}", c.addr)))?;
    log::event("serve", json!({ "addr": server.server_addr().to_string() }));
    tryon_core::clients::serve(&server, c.max_requests)
}
