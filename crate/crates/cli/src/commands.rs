//! The six pipeline subcommands. Every command materializes its output
//! directory and writes `manifest.json` before any other artifact, so a run
//! can always be reproduced from the manifest alone.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::Serialize;

use volprop_core::ctio::{
    annotations_to_voxel, extract_crop, generate_synthetic_volume, normalize_intensity,
    read_annotations, read_nvol, resample_isotropic, write_annotations, write_nvol, CropSpec,
    CtVolume, NoduleAnnotation, SynthParams,
};
use volprop_core::error::{Error, Result};
use volprop_core::net::{build_network, Network, NetworkConfig, ParamStore};
use volprop_core::objective::AnchorSpec;
use volprop_core::parallel;
use volprop_core::perflab::{bench_batchnorm, bench_conv, estimate_memory, max_feasible_input};
use volprop_core::proposals::{
    decode_proposals, froc, nms_3d, write_candidates, write_froc, Candidate, CropFrame,
};
use volprop_core::trainer::{train, write_loss_records, TrainItem};

use crate::config::Settings;

/// Written as `manifest.json` into the output directory before any artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config_path: Option<String>,
    pub config: BTreeMap<String, String>,
    pub out_dir: String,
}

impl RunManifest {
    fn new(command: &str, out_dir: &Path) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: None,
            config_path: None,
            config: BTreeMap::new(),
            out_dir: out_dir.display().to_string(),
        }
    }

    fn with_settings(mut self, path: Option<&Path>, settings: &Settings) -> Self {
        self.config_path = path.map(|p| p.display().to_string());
        self.config = settings.snapshot().clone();
        self
    }

    fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.config.insert(format!("arg.{key}"), value.to_string());
        self
    }

    /// Creates the directory and writes the manifest, first of all artifacts.
    fn write(self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let file = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(file, &self)
            .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
        Ok(())
    }
}

/// One stored study: the series id (the file stem) and its volume.
struct Study {
    series: String,
    volume: CtVolume,
}

fn read_dataset(dir: &Path) -> Result<(Vec<Study>, Vec<NoduleAnnotation>)> {
    if !dir.is_dir() {
        return Err(Error::Format(format!("{} is not a dataset directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "nvol"))
        .collect();
    paths.sort();
    let studies = paths
        .iter()
        .map(|path| {
            let series = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format(format!("bad volume name {}", path.display())))?
                .to_string();
            let volume = read_nvol(BufReader::new(File::open(path)?))?;
            Ok(Study { series, volume })
        })
        .collect::<Result<Vec<_>>>()?;
    let ann_path = dir.join("annotations.csv");
    let annotations = if ann_path.is_file() {
        read_annotations(BufReader::new(File::open(ann_path)?))?
    } else {
        Vec::new()
    };
    Ok((studies, annotations))
}

fn write_volume(dir: &Path, series: &str, volume: &CtVolume) -> Result<()> {
    let file = BufWriter::new(File::create(dir.join(format!("{series}.nvol")))?);
    write_nvol(volume, file)
}

pub fn cmd_synth(
    seed: u64,
    volumes: usize,
    nodules_per_volume: usize,
    spacing: f32,
    side_mm: f32,
    out: &Path,
) -> Result<()> {
    RunManifest::new("synth", out)
        .arg("seed", seed)
        .arg("volumes", volumes)
        .arg("nodules_per_volume", nodules_per_volume)
        .arg("spacing", spacing)
        .arg("side_mm", side_mm)
        .write(out)?;

    let mut annotations = Vec::new();
    for i in 0..volumes {
        let series = format!("vol{i:03}");
        let params = SynthParams::new(side_mm, spacing, nodules_per_volume, &series);
        let (volume, annos) = generate_synthetic_volume(seed + i as u64, &params)?;
        write_volume(out, &series, &volume)?;
        annotations.extend(annos);
    }
    write_annotations(&annotations, BufWriter::new(File::create(out.join("annotations.csv"))?))?;
    println!(
        "synth: wrote {volumes} volumes / {} annotations to {}",
        annotations.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_preprocess(input: &Path, spacing_mm: f32, out: &Path) -> Result<()> {
    let (studies, annotations) = read_dataset(input)?;
    RunManifest::new("preprocess", out)
        .arg("in", input.display())
        .arg("spacing_mm", spacing_mm)
        .write(out)?;

    let processed: Vec<Result<()>> = parallel::map_range(studies.len(), |i| {
        let study = &studies[i];
        let resampled = resample_isotropic(&study.volume, spacing_mm)?;
        write_volume(out, &study.series, &normalize_intensity(&resampled))
    });
    processed.into_iter().collect::<Result<Vec<_>>>()?;
    // World coordinates are spacing-independent; annotations pass through.
    write_annotations(&annotations, BufWriter::new(File::create(out.join("annotations.csv"))?))?;
    println!(
        "preprocess: {} volumes resampled to {spacing_mm} mm and normalized into {}",
        studies.len(),
        out.display()
    );
    Ok(())
}

fn items_from_dataset(studies: &[Study], annotations: &[NoduleAnnotation]) -> Result<Vec<TrainItem>> {
    studies
        .iter()
        .map(|study| {
            let own: Vec<NoduleAnnotation> = annotations
                .iter()
                .filter(|a| a.series_id == study.series)
                .cloned()
                .collect();
            let nodules = annotations_to_voxel(&study.volume, &own)?;
            Ok(TrainItem { volume: study.volume.clone(), nodules })
        })
        .collect()
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ckpt"))
        .collect();
    found.sort();
    found.pop()
}

pub fn cmd_train(
    data: &Path,
    config_path: Option<&Path>,
    settings: &Settings,
    out: &Path,
    resume: bool,
) -> Result<()> {
    let (studies, annotations) = read_dataset(data)?;
    if studies.is_empty() {
        return Err(Error::Format(format!("no volumes found in {}", data.display())));
    }
    RunManifest::new("train", out)
        .with_settings(config_path, settings)
        .arg("data", data.display())
        .arg("resume", resume)
        .write(out)?;

    let items = items_from_dataset(&studies, &annotations)?;
    let net_cfg = settings.network()?;
    let train_cfg = settings.trainer()?;
    let engine = settings.engine()?;
    let (net, mut store) = build_network(&net_cfg, settings.init_seed()?)?;

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    if resume {
        let Some(path) = latest_checkpoint(&ckpt_dir) else {
            return Err(Error::Checkpoint(format!(
                "--resume requested but {} holds no checkpoints",
                ckpt_dir.display()
            )));
        };
        store.load_checkpoint(BufReader::new(File::open(&path)?))?;
        println!("train: resumed parameters from {}", path.display());
    }

    let records = train(&net, &mut store, &train_cfg, &items, engine, |epoch, store| {
        let path = ckpt_dir.join(format!("epoch_{epoch:04}.ckpt"));
        store.save_checkpoint(BufWriter::new(File::create(path)?))
    })?;
    write_loss_records(&records, BufWriter::new(File::create(out.join("loss.csv"))?))?;

    let last = records.last().expect("at least one epoch");
    println!(
        "train: {} epochs over {} volumes, final loss {:.4} (cls {:.4} loc {:.4}), artifacts in {}",
        records.len(),
        items.len(),
        last.loss_total,
        last.loss_cls,
        last.loss_loc,
        out.display()
    );
    Ok(())
}

/// Crop starts covering `[0, ext)` with stride m/2, the final crop clamped to
/// the trailing edge.
fn tile_starts(ext: usize, m: usize) -> Vec<usize> {
    if ext <= m {
        return vec![0];
    }
    let stride = (m / 2).max(1);
    let mut starts: Vec<usize> =
        (0..).map(|i| i * stride).take_while(|s| s + m < ext).collect();
    starts.push(ext - m);
    starts
}

/// Owned cell range of one tile: the central half, widened to the volume
/// border on terminal tiles so every voxel has exactly one owner.
fn owned_range(start: usize, m: usize, first: usize, last: usize) -> (f32, f32) {
    let lo = if start == first { f32::NEG_INFINITY } else { (start + m / 4) as f32 };
    let hi = if start == last { f32::INFINITY } else { (start + 3 * m / 4) as f32 };
    (lo, hi)
}

fn eval_volume(
    net: &Network,
    store: &ParamStore,
    settings: &Settings,
    study: &Study,
) -> Result<Vec<Candidate>> {
    let engine = settings.engine()?;
    let threshold = settings.score_threshold()?;
    let m = net.config().crop_side;
    let spacing = study.volume.isotropic_spacing().ok_or_else(|| {
        Error::Geometry(format!("volume {} is not isotropic; preprocess first", study.series))
    })?;
    let anchors = AnchorSpec::from_mm(&net.config().anchors_mm, spacing)?;
    let (d, h, w) = study.volume.dims();
    let (zs, ys, xs) = (tile_starts(d, m), tile_starts(h, m), tile_starts(w, m));

    let mut kept = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let half = m as f32 / 2.0;
                let spec = CropSpec {
                    side: m,
                    center_vox: [z as f32 + half, y as f32 + half, x as f32 + half],
                };
                let (crop, _) = extract_crop(&study.volume, &spec, &[]);
                let head = net.forward_infer(store, &crop, engine)?;
                let frame = CropFrame::new(&study.volume, &spec)?;
                let decoded =
                    decode_proposals(&head, 0, &anchors, &frame, threshold, &study.series)?;
                // Keep only candidates in this tile's owned region; the m/2
                // overlap means border cells are someone else's center.
                let bounds = [
                    owned_range(z, m, zs[0], *zs.last().expect("nonempty")),
                    owned_range(y, m, ys[0], *ys.last().expect("nonempty")),
                    owned_range(x, m, xs[0], *xs.last().expect("nonempty")),
                ];
                kept.extend(decoded.into_iter().filter(|c| {
                    let v = study.volume.world_to_voxel(c.center_mm);
                    (0..3).all(|ax| bounds[ax].0 <= v[ax] && v[ax] < bounds[ax].1)
                }));
            }
        }
    }
    Ok(kept)
}

pub fn cmd_eval(
    data: &Path,
    checkpoint: &Path,
    config_path: Option<&Path>,
    settings: &Settings,
    out: &Path,
    no_nms: bool,
) -> Result<()> {
    let (studies, annotations) = read_dataset(data)?;
    if studies.is_empty() {
        return Err(Error::Format(format!("no volumes found in {}", data.display())));
    }
    RunManifest::new("eval", out)
        .with_settings(config_path, settings)
        .arg("data", data.display())
        .arg("checkpoint", checkpoint.display())
        .arg("no_nms", no_nms)
        .write(out)?;

    let net_cfg = settings.network()?;
    let (net, mut store) = build_network(&net_cfg, settings.init_seed()?)?;
    store.load_checkpoint(BufReader::new(File::open(checkpoint)?))?;

    let per_volume: Vec<Result<Vec<Candidate>>> =
        parallel::map_range(studies.len(), |i| eval_volume(&net, &store, settings, &studies[i]));
    let mut candidates = Vec::new();
    for found in per_volume {
        candidates.extend(found?);
    }
    if !no_nms {
        candidates = nms_3d(candidates, settings.nms_iou()?);
    }
    write_candidates(&candidates, BufWriter::new(File::create(out.join("candidates.csv"))?))?;

    if annotations.is_empty() {
        println!(
            "eval: {} candidates over {} volumes (no annotations, FROC skipped), artifacts in {}",
            candidates.len(),
            studies.len(),
            out.display()
        );
        return Ok(());
    }
    let curve = froc(&candidates, &annotations, studies.len())?;
    write_froc(&curve, BufWriter::new(File::create(out.join("froc.csv"))?))?;
    println!(
        "eval: {} candidates over {} volumes, mean FROC score {:.4}, artifacts in {}",
        candidates.len(),
        studies.len(),
        curve.mean_score,
        out.display()
    );
    Ok(())
}

fn emit_report(
    out: Option<&Path>,
    manifest: Option<RunManifest>,
    name: &str,
    text: String,
    json: Option<String>,
) -> Result<()> {
    if let (Some(dir), Some(manifest)) = (out, manifest) {
        manifest.write(dir)?;
        fs::write(dir.join(name), json.as_deref().unwrap_or(&text))?;
    }
    println!("{}", json.unwrap_or(text));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_bench(
    suite: &str,
    crop_side: usize,
    batch: usize,
    reps: usize,
    json: bool,
    config_path: Option<&Path>,
    settings: &Settings,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = NetworkConfig { crop_side, ..settings.network()? };
    let report = match suite {
        "conv" => bench_conv(
            &cfg,
            batch,
            &[
                volprop_core::kernels::ConvEngine::GemmLowering,
                volprop_core::kernels::ConvEngine::SliceDecomposed,
            ],
            reps,
        )?,
        "bn" => bench_batchnorm(&cfg, batch, reps)?,
        other => return Err(Error::Config(format!("suite {other:?} is not conv or bn"))),
    };
    let manifest = out.map(|dir| {
        RunManifest::new("bench", dir)
            .with_settings(config_path, settings)
            .arg("suite", suite)
            .arg("crop_side", crop_side)
            .arg("batch", batch)
            .arg("reps", reps)
    });
    let payload = json.then(|| {
        serde_json::to_string_pretty(&report).expect("report serializes")
    });
    emit_report(out, manifest, if json { "bench.json" } else { "bench.csv" }, report.to_csv(), payload)?;
    if !json {
        println!("{}", report.text_table());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_mem(
    crop_side: usize,
    batch: usize,
    budget: Option<u64>,
    json: bool,
    config_path: Option<&Path>,
    settings: &Settings,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = settings.network()?;
    let engine = settings.engine()?;
    let estimate = estimate_memory(&cfg, crop_side, batch, engine)?;
    let manifest = out.map(|dir| {
        RunManifest::new("mem", dir)
            .with_settings(config_path, settings)
            .arg("crop_side", crop_side)
            .arg("batch", batch)
            .arg("budget", budget.map_or("none".to_string(), |b| b.to_string()))
    });
    let payload = json.then(|| {
        serde_json::to_string_pretty(&estimate).expect("estimate serializes")
    });
    emit_report(out, manifest, if json { "mem.json" } else { "mem.csv" }, estimate.to_csv(), payload)?;
    if !json {
        println!("{}", estimate.text_table());
    }
    if let Some(budget) = budget {
        let side = max_feasible_input(&cfg, budget, batch)?;
        println!("max feasible crop side within {budget} bytes at batch {batch}: {side}");
    }
    Ok(())
}
