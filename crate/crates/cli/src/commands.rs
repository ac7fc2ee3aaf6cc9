use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use spikegrid::dataset::encode_clips;
use spikegrid::encoder::{encode_clip, write_tensor};
use spikegrid::eval::{
    evaluate, grad_cam, write_eval_outputs, write_heat_csv, write_pgm, write_trace_csv,
};
use spikegrid::experiment::{
    cluster_sensors, make_layout, prepare_synthetic, train_and_evaluate, ClipSets,
    ExperimentConfig, LayoutSource,
};
use spikegrid::model::{architecture_report, count_params, load_checkpoint, Model, ModelConfig};
use spikegrid::preprocess::{run_pipeline, segment, PreprocessConfig};
use spikegrid::recording::{
    read_recording, write_recording, Clip, DatasetManifest, ManifestEntry, SensorArray,
};
use spikegrid::seed::derive_seed;
use spikegrid::spatial::{
    load_layout, permute_layout, save_layout, IntraStrategy, PermutationKind,
};
use spikegrid::synth::load_sensor_array;
use spikegrid::train::train_loop;

use crate::{
    ClusterArgs, ConfigArgs, EncodeArgs, EvalArgs, ExplainArgs, InspectArgs, PreprocessArgs,
    SweepArgs, SynthArgs, TrainArgs,
};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn args_hash<A: Serialize>(args: &A) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(args)?))
}

/// `run.json` beside a command's outputs. No timestamps, so identical runs
/// write identical records.
pub fn write_run<A: Serialize>(
    dir: &Path,
    command: &str,
    config_hash: &str,
    seed: Option<u64>,
    args: &A,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let record = json!({
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "versions": {
            "spikegrid": spikegrid::VERSION,
            "spikegrid-cli": env!("CARGO_PKG_VERSION"),
        },
        "args": args,
    });
    write_json(&dir.join("run.json"), &record)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))
        }
        None => Ok(ExperimentConfig::preset(&args.preset)?),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Clips of a manifest, each recording whole or cut into `clip_ms` pieces
/// that inherit its label.
fn load_clips(manifest: &Path, clip_ms: Option<f64>) -> Result<Vec<Clip>> {
    let m = DatasetManifest::load(manifest)?;
    let mut clips = Vec::new();
    for e in &m.entries {
        let rec = read_recording(&e.path)?;
        let id = e.path.to_string_lossy().into_owned();
        match clip_ms {
            None => clips.push(Clip::from_recording(&rec, Some(e.label), id)),
            Some(ms) => {
                for mut clip in segment(&rec, ms, &id)? {
                    clip.label = Some(e.label);
                    clip.recording_id = format!("{id}@{}", clip.start_sample);
                    clips.push(clip);
                }
            }
        }
    }
    ensure!(
        !clips.is_empty(),
        "manifest {} yields no clips",
        manifest.display()
    );
    Ok(clips)
}

fn sensor_array(clips: &[Clip]) -> Arc<SensorArray> {
    clips[0].sensor_array.clone()
}

fn sibling_val(manifest: &Path) -> Option<PathBuf> {
    let candidate = manifest.with_file_name("val.jsonl");
    (candidate.exists() && candidate != manifest).then_some(candidate)
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let data = prepare_synthetic(&cfg, &a.out_dir)?;
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    write_run(&a.out_dir, "synth", &cfg.hash(), Some(cfg.seed), &a)?;
    println!(
        "{} sensors, {} train / {} val / {} test clips in {}",
        data.sensor_array.n_sensors(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn preprocess_config(a: &PreprocessArgs, rate: f64) -> Result<PreprocessConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => PreprocessConfig::standard(a.target_hz.unwrap_or(rate)),
    };
    if a.no_ica {
        cfg.ica = None;
    }
    Ok(cfg)
}

fn file_name(path: &Path) -> Result<PathBuf> {
    path.file_name()
        .map(PathBuf::from)
        .with_context(|| format!("{} has no file name", path.display()))
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    create_dir(&a.out_dir)?;
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    let mut entries = Vec::new();
    if let Some(manifest) = &a.manifest {
        for e in DatasetManifest::load(manifest)?.entries {
            let rel = Path::new("clips").join(file_name(&e.path)?);
            jobs.push((e.path.clone(), a.out_dir.join(&rel)));
            entries.push(ManifestEntry { path: rel, ..e });
        }
    } else {
        ensure!(!a.input.is_empty(), "give --input or --manifest");
        for p in &a.input {
            jobs.push((p.clone(), a.out_dir.join(file_name(p)?)));
        }
    }
    let mut records = Vec::new();
    for (input, output) in &jobs {
        let rec = read_recording(input)?;
        let cfg = preprocess_config(&a, rec.sample_rate_hz)?;
        let (clean, steps) = run_pipeline(&rec, &cfg, None)
            .with_context(|| format!("preprocessing {}", input.display()))?;
        write_recording(&clean, output)?;
        records.push(json!({
            "input": input,
            "output": output,
            "config": cfg,
            "steps": steps,
        }));
    }
    if let Some(manifest) = &a.manifest {
        let out = DatasetManifest {
            entries,
            split: None,
        };
        out.save(&a.out_dir.join(file_name(manifest)?))?;
    }
    write_json(&a.out_dir.join("preprocess.json"), &records)?;
    write_run(&a.out_dir, "preprocess", &args_hash(&a)?, None, &a)?;
    println!(
        "cleaned {} recordings into {}",
        jobs.len(),
        a.out_dir.display()
    );
    Ok(())
}

pub fn cluster(a: ClusterArgs) -> Result<()> {
    let array = match (&a.sensors, &a.recording) {
        (Some(p), _) => load_sensor_array(p)?,
        (None, Some(p)) => (*read_recording(p)?.sensor_array).clone(),
        (None, None) => bail!("give --sensors or --recording"),
    };
    let intra: IntraStrategy = a.intra.parse()?;
    let (clusters, mut layout) = cluster_sensors(&array, a.g, a.l, intra, a.seed, a.restarts)?;
    if let Some(s) = a.shuffle_channels {
        layout = permute_layout(&layout, PermutationKind::ShuffleChannels, s);
    } else if let Some(s) = a.shuffle_clusters {
        layout = permute_layout(&layout, PermutationKind::ShuffleClusters, s);
    }
    create_dir(&a.out_dir)?;
    save_layout(&layout, &a.out_dir.join("layout.json"))?;
    write_json(&a.out_dir.join("clusters.json"), &clusters)?;
    write_run(&a.out_dir, "cluster", &args_hash(&a)?, Some(a.seed), &a)?;
    println!(
        "{} sensors in a {} x {} grid, row sizes {:?}, {} empty slots, inertia {:.6}",
        layout.n_sensors(),
        layout.g(),
        layout.l,
        layout.row_counts(),
        layout.empty_slots(),
        clusters.inertia
    );
    Ok(())
}

pub fn encode(a: EncodeArgs) -> Result<()> {
    let clips = load_clips(&a.manifest, a.clip_ms)?;
    let layout = load_layout(&a.layout, &sensor_array(&clips))?;
    create_dir(&a.out_dir)?;
    let mut index = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let tensor = encode_clip(clip, &layout)?;
        let name = format!("{i:05}.tensor");
        write_tensor(&tensor, &a.out_dir.join(&name))?;
        let line = json!({
            "tensor": name,
            "clip": clip.recording_id,
            "label": clip.label,
            "dims": tensor.dims,
        });
        index.push_str(&serde_json::to_string(&line)?);
        index.push('\n');
    }
    let path = a.out_dir.join("index.jsonl");
    fs::write(&path, index).with_context(|| format!("writing {}", path.display()))?;
    write_run(&a.out_dir, "encode", &args_hash(&a)?, None, &a)?;
    println!("encoded {} clips into {}", clips.len(), a.out_dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(d) = a.depth {
        cfg.model.depth = d;
    }
    if let Some(g) = a.g {
        cfg.layout.g = g;
    }
    if a.l.is_some() {
        cfg.layout.l = a.l;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(ms) = a.clip_ms {
        cfg.synth.clip_ms = ms;
    }
    if let Some(p) = &a.layout {
        cfg.layout.source = LayoutSource::File { path: p.clone() };
    }
    let train_clips = load_clips(&a.manifest, a.clip_ms)?;
    let val_clips = match a.val.clone().or_else(|| sibling_val(&a.manifest)) {
        Some(p) => load_clips(&p, a.clip_ms)?,
        None => Vec::new(),
    };
    let layout = make_layout(
        &cfg.layout,
        &sensor_array(&train_clips),
        cfg.stage_seed("kmeans"),
    )?;
    let train = encode_clips(&train_clips, &layout)?;
    let val = encode_clips(&val_clips, &layout)?;
    cfg.model.input = train[0].dims;

    create_dir(&a.out_dir)?;
    save_layout(&layout, &a.out_dir.join("layout.json"))?;
    write_json(&a.out_dir.join("config.json"), &cfg)?;
    let model = Model::new(cfg.model.clone(), derive_seed(cfg.train.seed, "init", 0))?;
    log::info!(
        "{} train / {} val clips, input {:?}, {} parameters",
        train.len(),
        val.len(),
        cfg.model.input,
        model.n_params()
    );
    let outcome = train_loop(model, &train, &val, &cfg.train, Some(&a.out_dir))?;
    write_run(&a.out_dir, "train", &cfg.hash(), Some(cfg.train.seed), &a)?;
    let best = &outcome.history[outcome.best_epoch - 1];
    println!(
        "best epoch {}/{}: val F1 {:.4}, checkpoints in {}",
        outcome.best_epoch,
        cfg.train.epochs,
        best.val_f1,
        a.out_dir.display()
    );
    Ok(())
}

fn load_model_and_samples(
    checkpoint: &Path,
    manifest: &Path,
    layout: &Path,
    clip_ms: Option<f64>,
) -> Result<(
    Model,
    Vec<spikegrid::dataset::Sample>,
    spikegrid::spatial::ClusterLayout,
)> {
    let model = load_checkpoint(checkpoint)?.model;
    let clips = load_clips(manifest, clip_ms)?;
    let layout = load_layout(layout, &sensor_array(&clips))?;
    let samples = encode_clips(&clips, &layout)?;
    ensure!(
        samples[0].dims == model.config.input,
        "encoded clips are {:?} but the network expects {:?}",
        samples[0].dims,
        model.config.input
    );
    Ok((model, samples, layout))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (model, samples, _) =
        load_model_and_samples(&a.checkpoint, &a.manifest, &a.layout, a.clip_ms)?;
    let (report, rows) = evaluate(&model, &samples, a.threshold)?;
    write_eval_outputs(&report, &rows, &a.out_dir)?;
    write_run(&a.out_dir, "eval", &args_hash(&a)?, None, &a)?;
    let auroc = report
        .auroc
        .map_or_else(|| "undefined".into(), |v| format!("{v:.4}"));
    println!(
        "{} clips: F1 {:.4}, AUROC {auroc}, TPR {:.4}, TNR {:.4}",
        rows.len(),
        report.f1,
        report.tpr,
        report.tnr
    );
    Ok(())
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let (model, samples, layout) =
        load_model_and_samples(&a.checkpoint, &a.manifest, &a.layout, a.clip_ms)?;
    create_dir(&a.out_dir)?;
    let mut index = String::from("file,clip_id,label,predicted_class,argmax_row\n");
    let chosen = samples
        .iter()
        .filter(|s| !a.positives || s.label == 1)
        .take(a.limit.unwrap_or(usize::MAX));
    let mut n = 0;
    for (i, s) in chosen.enumerate() {
        let map = grad_cam(&model, &s.input, a.class, &s.id)?;
        let stem = format!("{i:05}");
        write_pgm(&map, a.cell, &a.out_dir.join(format!("{stem}.pgm")))?;
        write_heat_csv(&map, &layout, &a.out_dir.join(format!("{stem}.heat.csv")))?;
        write_trace_csv(
            &map,
            &layout,
            s,
            &a.out_dir.join(format!("{stem}.trace.csv")),
        )?;
        index.push_str(&format!(
            "{stem},{},{},{},{}\n",
            s.id,
            s.label,
            map.predicted_class,
            map.argmax_row()
        ));
        n += 1;
    }
    let path = a.out_dir.join("index.csv");
    fs::write(&path, index).with_context(|| format!("writing {}", path.display()))?;
    write_run(&a.out_dir, "explain", &args_hash(&a)?, None, &a)?;
    println!("{n} activation maps in {}", a.out_dir.display());
    Ok(())
}

/// `a..b` and `a..=b` both include `b`; `a,b,c` lists values.
pub fn parse_g_range(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    let values: Vec<usize> = if let Some((lo, hi)) = text.split_once("..") {
        let hi = hi.strip_prefix('=').unwrap_or(hi);
        let (lo, hi): (usize, usize) = (
            lo.trim()
                .parse()
                .with_context(|| format!("bad range start in '{text}'"))?,
            hi.trim()
                .parse()
                .with_context(|| format!("bad range end in '{text}'"))?,
        );
        ensure!(lo <= hi, "empty range '{text}'");
        (lo..=hi).collect()
    } else {
        text.split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .with_context(|| format!("bad value in '{text}'"))
            })
            .collect::<Result<_>>()?
    };
    ensure!(
        values.iter().all(|&g| g > 0),
        "cluster counts must be positive"
    );
    Ok(values)
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let gs = parse_g_range(&a.g)?;
    let mut cfg = load_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.l.is_some() {
        cfg.layout.l = a.l;
    }
    create_dir(&a.out_dir)?;
    let clips = match &a.data_dir {
        Some(dir) => ClipSets {
            train: load_clips(&dir.join("train.jsonl"), None)?,
            val: load_clips(&dir.join("val.jsonl"), None)?,
            test: load_clips(&dir.join("test.jsonl"), None)?,
        },
        None => ClipSets::load(&prepare_synthetic(&cfg, &a.out_dir.join("data"))?)?,
    };
    let array = sensor_array(&clips.train);
    let mut csv = String::from("g,f1,auroc\n");
    for g in gs {
        let mut c = cfg.clone();
        c.layout.g = g;
        let dir = a.out_dir.join(format!("g{g}"));
        create_dir(&dir)?;
        let layout = make_layout(&c.layout, &array, c.stage_seed("kmeans"))?;
        save_layout(&layout, &dir.join("layout.json"))?;
        let run = train_and_evaluate(&c, &clips, layout, Some(&dir))?;
        write_eval_outputs(&run.report, &run.scores, &dir)?;
        write_json(&dir.join("config.json"), &c)?;
        write_run(&dir, "sweep", &c.hash(), Some(c.train.seed), &a)?;
        let auroc = run.report.auroc.map_or_else(String::new, |v| v.to_string());
        println!("g {g}: F1 {:.4}, AUROC {auroc}", run.report.f1);
        csv.push_str(&format!("{g},{},{auroc}\n", run.report.f1));
    }
    let path = a.out_dir.join("sweep.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    write_run(&a.out_dir, "sweep", &cfg.hash(), Some(cfg.train.seed), &a)?;
    Ok(())
}

fn parse_input(text: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .with_context(|| format!("bad input dims '{text}'"))
        })
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|_| anyhow::anyhow!("input needs four values g,l,t,c, got '{text}'"))
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    let mut mcfg: ModelConfig = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model.config,
        None => load_config(&a.cfg)?.model,
    };
    if let Some(d) = a.depth {
        mcfg.depth = d;
    }
    if let Some(s) = &a.input {
        mcfg.input = parse_input(s)?;
    }
    let rows = architecture_report(&mcfg)?;
    println!(
        "{:<12} {:<22} {:>12} {:>16}",
        "layer", "output", "params", "MACs"
    );
    for r in &rows {
        let shape = r
            .output
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{:<12} {:<22} {:>12} {:>16}",
            r.name, shape, r.params, r.macs
        );
    }
    let total = count_params(&mcfg)?;
    println!(
        "depth {}, input {:?}, {total} parameters",
        mcfg.depth, mcfg.input
    );
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("architecture.json"), &rows)?;
        write_run(dir, "inspect", &args_hash(&a)?, None, &a)?;
    }
    Ok(())
}
