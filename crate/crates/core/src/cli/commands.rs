//! Subcommand implementations shared by the binary and its tests.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::config::RunConfig;
use super::manifest::{
    write_f32, ConditionEntry, Manifest, Provenance, TensorDesc, SCHEMA_VERSION,
};
use super::CliError;
use crate::afferents::{FRAME_RATE_HZ, MARKERS, PX_PER_MM};
use crate::drumsim::{
    condition_dir_name, flatten_frames, generate_dataset, texture_set, SPEEDS_MM_S,
};
use crate::evalharness::{
    self, evaluate_family, family_samples, make_folds, run_family, verify_gradients,
    FamilyResult, FeatureStore, FoldSpec, ModelFamily, FAMILIES, REL32_LIMIT, REL64_LIMIT,
};
use crate::ingest::{
    read_condition_dir, rest_from_frames, write_wav, BLOB_MIN_AREA, BLOB_THRESHOLD,
};

/// Synthesizes the 130-condition dataset under `out`.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = generate_dataset(out, &cfg.sim)?;
    let first = &manifest.conditions[0];
    println!(
        "wrote {} conditions ({} marker frames, {} audio samples each) under {}",
        manifest.conditions.len(),
        first.marker_frames,
        first.audio_samples,
        out.display()
    );
    Ok(())
}

/// Converts raw recordings (`cond_<class>_<speed>/frame_<i>.pgm` sequences
/// plus `audio.wav`) into a standard dataset with a manifest.
pub fn ingest(raw: &Path, out: &Path) -> Result<(), CliError> {
    let mut sources = scan_raw_conditions(raw)?;
    sources.sort_by(|a, b| (a.class_id, a.speed_mm_s as u64).cmp(&(b.class_id, b.speed_mm_s as u64)));
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let entries: Vec<(ConditionEntry, Vec<TensorDesc>)> = sources
        .par_iter()
        .map(|src| -> Result<_, CliError> {
            let (frames, audio) =
                read_condition_dir::<f32>(&raw.join(&src.dir), BLOB_THRESHOLD, BLOB_MIN_AREA)?;
            let rest = rest_from_frames(&frames)?;
            let dir = out.join(&src.dir);
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
            write_f32(&dir.join("rest.f32"), &flatten_frames(&[rest]))?;
            write_f32(&dir.join("markers.f32"), &flatten_frames(&frames))?;
            let wav = dir.join("audio.wav");
            std::fs::write(&wav, write_wav(&audio))
                .map_err(|e| CliError::Io(format!("{}: {e}", wav.display())))?;
            let entry = ConditionEntry {
                class_id: src.class_id,
                class_label: src.class_label,
                speed_mm_s: src.speed_mm_s,
                dir: src.dir.clone(),
                marker_frames: frames.len(),
                audio_samples: audio.len(),
            };
            let tensors = vec![
                TensorDesc::f32le(
                    &format!("{}/rest", src.dir),
                    &format!("{}/rest.f32", src.dir),
                    vec![MARKERS, 2],
                ),
                TensorDesc::f32le(
                    &format!("{}/markers", src.dir),
                    &format!("{}/markers.f32", src.dir),
                    vec![frames.len(), MARKERS, 2],
                ),
            ];
            Ok((entry, tensors))
        })
        .collect::<Result<_, _>>()?;
    let mut manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance::Ingested,
        seed: 0,
        generator_version: env!("CARGO_PKG_VERSION").into(),
        frame_rate_hz: FRAME_RATE_HZ,
        px_per_mm: PX_PER_MM,
        conditions: Vec::with_capacity(entries.len()),
        tensors: Vec::with_capacity(entries.len() * 2),
    };
    for (entry, tensors) in entries {
        manifest.conditions.push(entry);
        manifest.tensors.extend(tensors);
    }
    manifest.save(out)?;
    println!(
        "ingested {} conditions under {}",
        manifest.conditions.len(),
        out.display()
    );
    Ok(())
}

struct RawCondition {
    dir: String,
    class_id: u8,
    class_label: char,
    speed_mm_s: f64,
}

fn scan_raw_conditions(raw: &Path) -> Result<Vec<RawCondition>, CliError> {
    let classes = texture_set();
    let mut out = Vec::new();
    let entries =
        std::fs::read_dir(raw).map_err(|e| CliError::Io(format!("{}: {e}", raw.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Io(format!("{}: {e}", raw.display())))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(rest) = name.strip_prefix("cond_") else {
            continue;
        };
        let Some((label, speed)) = rest.split_once('_') else {
            return Err(CliError::Run(format!(
                "{name}: expected cond_<class>_<speed>"
            )));
        };
        let mut chars = label.chars();
        let (Some(class_label), None) = (chars.next(), chars.next()) else {
            return Err(CliError::Run(format!(
                "{name}: class label must be a single letter"
            )));
        };
        let Some(class) = classes.iter().find(|t| t.label() == class_label) else {
            return Err(CliError::Run(format!(
                "{name}: unknown texture class `{class_label}`"
            )));
        };
        let speed_mm_s: u32 = speed.parse().map_err(|_| {
            CliError::Run(format!("{name}: speed `{speed}` is not a whole number of mm/s"))
        })?;
        out.push(RawCondition {
            dir: name,
            class_id: class.class_id,
            class_label,
            speed_mm_s: speed_mm_s as f64,
        });
    }
    if out.is_empty() {
        return Err(CliError::Run(format!(
            "no cond_<class>_<speed> directories under {}",
            raw.display()
        )));
    }
    Ok(out)
}

/// Extracts the afferent feature store from a dataset, optionally exporting
/// per-family sample tensors beside it.
pub fn extract(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    families: &[ModelFamily],
) -> Result<(), CliError> {
    let store = FeatureStore::extract(dataset)?;
    store.save(out)?;
    let (sa, ra, vib) = store.conditions.iter().fold((0, 0, 0), |(s, r, v), c| {
        (s + c.n_sa(), r + c.n_ra(), v + c.n_vib())
    });
    println!(
        "{} conditions: {sa} SA images, {ra} RA images, {vib} vibration spectra -> {}",
        store.conditions.len(),
        out.display()
    );
    for &family in families {
        let (count, vol) = export_family(&store, family, cfg.features.clip_len, out)?;
        println!(
            "{}: {count} samples of {vol} values -> {0}.f32 with {0}_index.csv",
            family.id(),
        );
    }
    Ok(())
}

/// Writes one family's raw sample tensor and its per-row provenance index.
fn export_family(
    store: &FeatureStore,
    family: ModelFamily,
    clip_len: usize,
    out: &Path,
) -> Result<(usize, usize), CliError> {
    let vol = family.sample_volume(clip_len);
    let mut data: Vec<f32> = Vec::new();
    let mut index = String::from("sample,class_id,class_label,speed_mm_s,index\n");
    let mut row = 0usize;
    for cond in &store.conditions {
        let (chan, raw) = cond.channel(family.channel());
        let n = family_samples(family, raw, clip_len);
        data.extend_from_slice(&chan[..n * vol]);
        for i in 0..n {
            index.push_str(&format!(
                "{row},{},{},{},{i}\n",
                cond.class_id, cond.class_label, cond.speed_mm_s
            ));
            row += 1;
        }
    }
    write_f32(&out.join(format!("{}.f32", family.id())), &data)?;
    let csv = out.join(format!("{}_index.csv", family.id()));
    std::fs::write(&csv, index).map_err(|e| CliError::Io(format!("{}: {e}", csv.display())))?;
    Ok((row, vol))
}

/// Trains the requested families across the requested folds.
pub fn train(
    cfg: &RunConfig,
    features: &Path,
    results: &Path,
    families: &[ModelFamily],
    folds: &[f64],
) -> Result<(), CliError> {
    let store = FeatureStore::load(features)?;
    let folds = select_folds(cfg.seed, folds)?;
    for &family in families {
        let started = Instant::now();
        let result = run_family(family, &store, &folds, &cfg.run_options(family), results)?;
        print_family(&result, started.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Re-scores saved checkpoints on freshly assembled test splits.
pub fn eval(
    cfg: &RunConfig,
    features: &Path,
    results: &Path,
    families: &[ModelFamily],
    folds: &[f64],
) -> Result<(), CliError> {
    let store = FeatureStore::load(features)?;
    let folds = select_folds(cfg.seed, folds)?;
    for &family in families {
        let started = Instant::now();
        let result = evaluate_family(family, &store, &folds, &cfg.run_options(family), results)?;
        print_family(&result, started.elapsed().as_secs_f64());
    }
    Ok(())
}

fn print_family(r: &FamilyResult, wall_s: f64) {
    let accs: Vec<String> = r
        .folds
        .iter()
        .map(|f| format!("{}:{:.3}", f.heldout_speed as u32, f.accuracy))
        .collect();
    println!(
        "{}: [{}] mean {:.3} in {wall_s:.1} s",
        r.family.label(),
        accs.join(" "),
        r.mean_accuracy
    );
}

/// Summarizes persisted results into `summary.csv`, an SVG heatmap grid,
/// and a table printed beside the published reference accuracies.
pub fn report(results: &Path, families: &[ModelFamily]) -> Result<(), CliError> {
    let list: Vec<ModelFamily> = if families.is_empty() {
        FAMILIES
            .into_iter()
            .filter(|f| family_complete(results, *f))
            .collect()
    } else {
        families.to_vec()
    };
    if list.is_empty() {
        return Err(CliError::Run(format!(
            "no family has all {} folds under {}",
            SPEEDS_MM_S.len(),
            results.display()
        )));
    }
    let rows = evalharness::report(results, &list)?;
    println!("{:<12} {:>14} {:>10}", "family", "synthetic mean", "reference");
    for row in &rows {
        println!(
            "{:<12} {:>14.3} {:>10.2}",
            row.family.label(),
            row.mean_accuracy,
            row.family.reference_accuracy()
        );
    }
    println!("reference: published accuracy on the physical sensor's recordings (context, not a target)");
    println!(
        "wrote {} and {}",
        results.join("summary.csv").display(),
        results.join("confusion_grid.svg").display()
    );
    Ok(())
}

fn family_complete(results: &Path, family: ModelFamily) -> bool {
    SPEEDS_MM_S.iter().all(|&s| {
        results
            .join(family.id())
            .join(format!("fold_{}", s as u32))
            .join("confusion.csv")
            .exists()
    })
}

/// Checks analytic gradients of each architecture kind against central
/// finite differences at toy size, in both precisions.
pub fn gradcheck(seed: u64) -> Result<(), CliError> {
    let outcomes = verify_gradients(seed)?;
    let mut failed = false;
    for o in &outcomes {
        println!(
            "{:<16} {:>5} weights: max rel error {:.3e} at 64-bit (limit {REL64_LIMIT:.0e}), {:.3e} at 32-bit (limit {REL32_LIMIT:.0e}) {}",
            o.name,
            o.weights,
            o.rel64,
            o.rel32,
            if o.passed() { "ok" } else { "FAILED" }
        );
        failed |= !o.passed();
    }
    if failed {
        return Err(CliError::Run("gradient verification failed".into()));
    }
    Ok(())
}

/// Parses family ids or labels; empty means every family.
pub fn parse_families(names: &[String]) -> Result<Vec<ModelFamily>, CliError> {
    if names.is_empty() {
        return Ok(FAMILIES.to_vec());
    }
    let mut out = Vec::new();
    for name in names {
        let family = ModelFamily::parse(name).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown family `{name}` (expected sa-se, ra-se, sa-ste, ra-ste, vib-te, or vib-te-aug)"
            ))
        })?;
        if !out.contains(&family) {
            out.push(family);
        }
    }
    Ok(out)
}

/// Builds the fold list for the given master seed, keeping only the
/// requested held-out speeds; empty means all ten.
fn select_folds(seed: u64, speeds: &[f64]) -> Result<Vec<FoldSpec>, CliError> {
    let all = make_folds(seed);
    if speeds.is_empty() {
        return Ok(all);
    }
    let mut picked: Vec<FoldSpec> = Vec::new();
    for &s in speeds {
        let fold = all.iter().find(|f| f.heldout_speed == s).ok_or_else(|| {
            CliError::Usage(format!(
                "--folds: {s} is not a drum speed (10..=100 mm/s in steps of 10)"
            ))
        })?;
        if !picked.iter().any(|f| f.heldout_speed == s) {
            picked.push(fold.clone());
        }
    }
    Ok(picked)
}
