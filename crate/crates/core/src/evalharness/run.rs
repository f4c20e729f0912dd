use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::assemble::assemble;
use super::confusion::ConfusionMatrix;
use super::family::ModelFamily;
use super::folds::{mix_seed, FoldSpec};
use super::features::FeatureStore;
use super::EvalError;
use crate::drumsim::SPEEDS_MM_S;
use crate::nn::{
    load_checkpoint, predict_classes, save_checkpoint, train, ModelParams, TrainConfig,
};

/// Salts separating a fold's derived seeds: weight initialization and the
/// training shuffle stream.
const MODEL_SALT: u64 = 0x0D01;
const TRAIN_SALT: u64 = 0x0702;

/// Knobs for one family's harness run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Frames per spatio-temporal clip.
    pub clip_len: usize,
    /// L2 penalty on opted-in dense kernels.
    pub l2_factor: f64,
    /// Dropout rates: feature stack, then the two hidden dense layers.
    pub dropouts: [f64; 3],
    /// Training loop settings; the seed field is ignored (fold seeds rule).
    pub train: TrainConfig,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            clip_len: crate::afferents::CLIP_LEN,
            l2_factor: 0.005,
            dropouts: super::family::DEFAULT_DROPOUTS,
            train: TrainConfig::default(),
        }
    }
}

/// One fold's outcome.
#[derive(Debug)]
pub struct FoldResult {
    pub heldout_speed: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub val_accuracy: f64,
}

/// A family's outcome across folds.
#[derive(Debug)]
pub struct FamilyResult {
    pub family: ModelFamily,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
}

/// Arithmetic mean of per-fold accuracies.
pub fn mean_accuracy(matrices: &[ConfusionMatrix]) -> f64 {
    if matrices.is_empty() {
        return 0.0;
    }
    matrices.iter().map(|m| m.accuracy()).sum::<f64>() / matrices.len() as f64
}

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fold_err(fold: &FoldSpec, source: EvalError) -> EvalError {
    EvalError::Fold {
        fold: fold.dir_name(),
        source: Box::new(source),
    }
}

/// Trains one model per fold, evaluates it on the fold's test split, and
/// persists checkpoints plus confusion matrices under
/// `results/<family>/fold_<speed>/`. Deterministic given the folds' seeds.
pub fn run_family(
    family: ModelFamily,
    store: &FeatureStore,
    folds: &[FoldSpec],
    opts: &RunOptions,
    results_dir: &Path,
) -> Result<FamilyResult, EvalError> {
    let mut results = Vec::with_capacity(folds.len());
    for fold in folds {
        let r = run_fold(family, store, fold, opts, results_dir)
            .map_err(|e| fold_err(fold, e))?;
        log::info!(
            "{} {}: test accuracy {:.3} (best epoch {}, stopped {})",
            family.id(),
            fold.dir_name(),
            r.accuracy,
            r.best_epoch,
            r.stopped_epoch,
        );
        results.push(r);
    }
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len().max(1) as f64;
    Ok(FamilyResult {
        family,
        folds: results,
        mean_accuracy: mean,
    })
}

fn run_fold(
    family: ModelFamily,
    store: &FeatureStore,
    fold: &FoldSpec,
    opts: &RunOptions,
    results_dir: &Path,
) -> Result<FoldResult, EvalError> {
    let sets = assemble(family, fold, store, opts.clip_len)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(fold.seed, MODEL_SALT));
    let model = ModelParams::<f32>::new(
        family.architecture_with(opts.dropouts),
        &family.input_shape(opts.clip_len),
        opts.l2_factor,
        &mut init_rng,
    )?;
    let cfg = TrainConfig {
        seed: mix_seed(fold.seed, TRAIN_SALT),
        ..opts.train.clone()
    };
    let outcome = train(model, &sets.train, &sets.val, &cfg)?;
    let preds = predict_classes(&outcome.model, &sets.test.x, cfg.batch_size)?;
    let confusion = ConfusionMatrix::from_predictions(&preds, &sets.test.y)?;
    let val_accuracy = outcome.history[outcome.best_epoch].val_accuracy;
    let result = FoldResult {
        heldout_speed: fold.heldout_speed,
        accuracy: confusion.accuracy(),
        confusion,
        best_epoch: outcome.best_epoch,
        stopped_epoch: outcome.stopped_epoch,
        val_accuracy,
    };
    let dir = results_dir.join(family.id()).join(fold.dir_name());
    let meta = serde_json::json!({
        "family": family.id(),
        "heldout_speed_mm_s": fold.heldout_speed,
        "fold_seed": fold.seed,
        "clip_len": opts.clip_len,
        "l2_factor": opts.l2_factor,
        "batch_size": cfg.batch_size,
        "max_epochs": cfg.max_epochs,
        "patience": cfg.patience,
        "steps_per_epoch": cfg.steps_per_epoch,
        "divisor": sets.divisor,
        "best_epoch": result.best_epoch,
        "stopped_epoch": result.stopped_epoch,
        "val_accuracy": result.val_accuracy,
        "test_accuracy": result.accuracy,
    });
    save_checkpoint(&dir, &outcome.model, meta)?;
    write_matrix(&dir, &result.confusion)?;
    Ok(result)
}

/// Re-evaluates persisted checkpoints on freshly assembled test splits,
/// rewriting each fold's confusion files. The assembly replays the fold
/// seeds, so a re-evaluation of an undisturbed run is byte-identical.
pub fn evaluate_family(
    family: ModelFamily,
    store: &FeatureStore,
    folds: &[FoldSpec],
    opts: &RunOptions,
    results_dir: &Path,
) -> Result<FamilyResult, EvalError> {
    let mut results = Vec::with_capacity(folds.len());
    for fold in folds {
        let r = eval_fold(family, store, fold, opts, results_dir)
            .map_err(|e| fold_err(fold, e))?;
        log::info!(
            "{} {}: test accuracy {:.3} (from checkpoint)",
            family.id(),
            fold.dir_name(),
            r.accuracy,
        );
        results.push(r);
    }
    let mean = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len().max(1) as f64;
    Ok(FamilyResult {
        family,
        folds: results,
        mean_accuracy: mean,
    })
}

fn eval_fold(
    family: ModelFamily,
    store: &FeatureStore,
    fold: &FoldSpec,
    opts: &RunOptions,
    results_dir: &Path,
) -> Result<FoldResult, EvalError> {
    let dir = results_dir.join(family.id()).join(fold.dir_name());
    let (model, meta) = load_checkpoint(&dir)?;
    let sets = assemble(family, fold, store, opts.clip_len)?;
    let preds = predict_classes(&model, &sets.test.x, opts.train.batch_size)?;
    let confusion = ConfusionMatrix::from_predictions(&preds, &sets.test.y)?;
    let result = FoldResult {
        heldout_speed: fold.heldout_speed,
        accuracy: confusion.accuracy(),
        confusion,
        best_epoch: meta["best_epoch"].as_u64().unwrap_or(0) as usize,
        stopped_epoch: meta["stopped_epoch"].as_u64().unwrap_or(0) as usize,
        val_accuracy: meta["val_accuracy"].as_f64().unwrap_or(f64::NAN),
    };
    write_matrix(&dir, &result.confusion)?;
    Ok(result)
}

fn write_matrix(dir: &Path, m: &ConfusionMatrix) -> Result<(), EvalError> {
    let csv = dir.join("confusion.csv");
    std::fs::write(&csv, m.to_csv()).map_err(|e| io_err(&csv, e))?;
    let pgm = dir.join("confusion.pgm");
    std::fs::write(&pgm, m.to_pgm()).map_err(|e| io_err(&pgm, e))
}

/// One family's row in the summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub family: ModelFamily,
    /// (held-out speed, accuracy), ascending by speed.
    pub fold_accuracies: Vec<(f64, f64)>,
    pub mean_accuracy: f64,
}

/// Collects persisted confusion matrices into `summary.csv` and a single
/// SVG grid of heatmaps (families by rows, held-out speeds by columns).
/// Every listed family must have all ten folds on disk.
pub fn report(results_dir: &Path, families: &[ModelFamily]) -> Result<Vec<ReportRow>, EvalError> {
    let mut rows = Vec::with_capacity(families.len());
    let mut matrices: Vec<Vec<ConfusionMatrix>> = Vec::with_capacity(families.len());
    for &family in families {
        let mut fold_accuracies = Vec::with_capacity(SPEEDS_MM_S.len());
        let mut fam_matrices = Vec::with_capacity(SPEEDS_MM_S.len());
        for &speed in &SPEEDS_MM_S {
            let path = results_dir
                .join(family.id())
                .join(format!("fold_{}", speed as u32))
                .join("confusion.csv");
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let m = ConfusionMatrix::from_csv(&text)?;
            fold_accuracies.push((speed, m.accuracy()));
            fam_matrices.push(m);
        }
        let mean = mean_accuracy(&fam_matrices);
        rows.push(ReportRow {
            family,
            fold_accuracies,
            mean_accuracy: mean,
        });
        matrices.push(fam_matrices);
    }
    let csv_path = results_dir.join("summary.csv");
    std::fs::write(&csv_path, summary_csv(&rows)).map_err(|e| io_err(&csv_path, e))?;
    let svg_path = results_dir.join("confusion_grid.svg");
    std::fs::write(&svg_path, matrix_grid_svg(families, &matrices))
        .map_err(|e| io_err(&svg_path, e))?;
    Ok(rows)
}

fn summary_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("family");
    for &speed in &SPEEDS_MM_S {
        out.push_str(&format!(",acc_{}", speed as u32));
    }
    out.push_str(",mean\n");
    for row in rows {
        out.push_str(row.family.id());
        for &(_, acc) in &row.fold_accuracies {
            out.push_str(&format!(",{acc:.6}"));
        }
        out.push_str(&format!(",{:.6}\n", row.mean_accuracy));
    }
    out
}

fn matrix_grid_svg(families: &[ModelFamily], matrices: &[Vec<ConfusionMatrix>]) -> String {
    const CELL: f64 = 4.0;
    const MAT: f64 = 13.0 * CELL;
    const GAP: f64 = 12.0;
    const LEFT: f64 = 90.0;
    const TOP: f64 = 36.0;
    let width = LEFT + SPEEDS_MM_S.len() as f64 * (MAT + GAP);
    let height = TOP + families.len() as f64 * (MAT + GAP);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         font-family=\"monospace\" font-size=\"10\">\n<rect width=\"100%\" height=\"100%\" \
         fill=\"white\"/>\n"
    );
    for (col, &speed) in SPEEDS_MM_S.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\">{} mm/s</text>\n",
            LEFT + col as f64 * (MAT + GAP) + MAT / 2.0,
            speed as u32,
        ));
    }
    for (row, family) in families.iter().enumerate() {
        let y0 = TOP + row as f64 * (MAT + GAP);
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8.0,
            y0 + MAT / 2.0 + 3.0,
            family.label(),
        ));
        for (col, m) in matrices[row].iter().enumerate() {
            s.push_str(&m.to_svg_group(LEFT + col as f64 * (MAT + GAP), y0, CELL));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drumsim::{generate_dataset, SimConfig, CLASSES};
    use crate::evalharness::folds::make_folds;
    use rand::Rng;

    fn tiny_store() -> FeatureStore {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig {
            marker_duration_s: 1.0,
            audio_duration_s: 2.0,
            ..SimConfig::default()
        };
        generate_dataset(dir.path(), &cfg).unwrap();
        FeatureStore::extract(dir.path()).unwrap()
    }

    fn smoke_opts() -> RunOptions {
        RunOptions {
            train: TrainConfig {
                max_epochs: 2,
                patience: 2,
                steps_per_epoch: 2,
                ..TrainConfig::default()
            },
            ..RunOptions::default()
        }
    }

    /// Mean accuracy over stub folds: an oracle gives 1.0, uniform noise
    /// sits at chance across >= 1000 samples.
    #[test]
    fn stub_classifiers_bracket_the_accuracy_range() {
        let labels: Vec<u16> = (0..130).map(|i| (i % CLASSES) as u16).collect();
        let oracle: Vec<ConfusionMatrix> = (0..10)
            .map(|_| ConfusionMatrix::from_predictions(&labels, &labels).unwrap())
            .collect();
        assert_eq!(mean_accuracy(&oracle), 1.0);
        for m in &oracle {
            assert_eq!(m.trace(), 130);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let noise: Vec<ConfusionMatrix> = (0..10)
            .map(|_| {
                let preds: Vec<u16> =
                    labels.iter().map(|_| rng.random_range(0..13u16)).collect();
                ConfusionMatrix::from_predictions(&preds, &labels).unwrap()
            })
            .collect();
        let mean = mean_accuracy(&noise);
        assert!((mean - 1.0 / 13.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn one_fold_trains_persists_and_reloads_identically() {
        let store = tiny_store();
        let folds = make_folds(21);
        let fold = &folds[0..1];
        let opts = smoke_opts();
        let out_dir = tempfile::tempdir().unwrap();
        let run = run_family(ModelFamily::SaSe, &store, fold, &opts, out_dir.path()).unwrap();
        assert_eq!(run.folds.len(), 1);
        let r = &run.folds[0];
        assert!(r.accuracy >= 0.0 && r.accuracy <= 1.0);
        // 100 images per held-out condition, split 50:50 across 13 classes.
        assert_eq!(r.confusion.row_sums(), vec![50; 13]);
        let fold_dir = out_dir.path().join("sa-se/fold_10");
        assert!(fold_dir.join("model.json").exists());
        assert!(fold_dir.join("weights").read_dir().unwrap().next().is_some());
        let csv1 = std::fs::read(fold_dir.join("confusion.csv")).unwrap();
        let matrix = ConfusionMatrix::from_csv(std::str::from_utf8(&csv1).unwrap()).unwrap();
        assert_eq!(matrix, r.confusion);
        // Re-evaluating the persisted checkpoint reproduces the matrix.
        let eval = evaluate_family(ModelFamily::SaSe, &store, fold, &opts, out_dir.path())
            .unwrap();
        assert_eq!(eval.folds[0].confusion, r.confusion);
        assert_eq!(
            std::fs::read(fold_dir.join("confusion.csv")).unwrap(),
            csv1
        );
        // And a fresh run into another directory is byte-identical.
        let out_dir2 = tempfile::tempdir().unwrap();
        run_family(ModelFamily::SaSe, &store, fold, &opts, out_dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(out_dir2.path().join("sa-se/fold_10/confusion.csv")).unwrap(),
            csv1
        );
    }

    #[test]
    fn missing_checkpoint_names_the_fold() {
        let store = tiny_store();
        let folds = make_folds(4);
        let out_dir = tempfile::tempdir().unwrap();
        let err = evaluate_family(
            ModelFamily::VibTe,
            &store,
            &folds[2..3],
            &smoke_opts(),
            out_dir.path(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("fold_30"), "{err}");
    }

    #[test]
    fn report_summarizes_and_renders_written_matrices() {
        let results = tempfile::tempdir().unwrap();
        let labels: Vec<u16> = (0..130).map(|i| (i % CLASSES) as u16).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let families = [ModelFamily::SaSe, ModelFamily::VibTe];
        for family in families {
            for &speed in &SPEEDS_MM_S {
                let preds: Vec<u16> = if family == ModelFamily::SaSe {
                    labels.clone()
                } else {
                    labels.iter().map(|_| rng.random_range(0..13u16)).collect()
                };
                let m = ConfusionMatrix::from_predictions(&preds, &labels).unwrap();
                let dir = results
                    .path()
                    .join(family.id())
                    .join(format!("fold_{}", speed as u32));
                std::fs::create_dir_all(&dir).unwrap();
                write_matrix(&dir, &m).unwrap();
            }
        }
        let rows = report(results.path(), &families).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_accuracy, 1.0);
        assert!((rows[1].mean_accuracy - 1.0 / 13.0).abs() < 0.03);
        let mean_check: f64 = rows[1]
            .fold_accuracies
            .iter()
            .map(|(_, a)| a)
            .sum::<f64>()
            / 10.0;
        assert!((rows[1].mean_accuracy - mean_check).abs() < 1e-9);
        let summary = std::fs::read_to_string(results.path().join("summary.csv")).unwrap();
        let mut lines = summary.lines();
        assert_eq!(
            lines.next().unwrap(),
            "family,acc_10,acc_20,acc_30,acc_40,acc_50,acc_60,acc_70,acc_80,acc_90,acc_100,mean"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("sa-se,1.000000,"));
        assert!(first.ends_with(",1.000000"));
        assert_eq!(lines.count(), 1);
        let svg = std::fs::read_to_string(results.path().join("confusion_grid.svg")).unwrap();
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<g ").count(), 20);
        assert!(svg.contains(">SA-SE</text>"));
        assert!(svg.contains(">100 mm/s</text>"));
        // Reporting a family with no results names the missing file.
        assert!(report(results.path(), &[ModelFamily::RaSe]).is_err());
    }
}
