//! The four subcommands. Every artifact write happens here, sequentially,
//! so a run's file set is deterministic byte for byte.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use lunar_cnn::augment::{normalize, quantize};
use lunar_cnn::data::{
    gen_synthetic, load_dataset, load_pgm, make_query_pair, save_pgm, split_train_test,
    CLASS_NAMES,
};
use lunar_cnn::rng::stream_rng;
use lunar_cnn::train::{
    evaluate_rotations, evaluate_testset, load_checkpoint, save_checkpoint, train_ensemble,
    write_history, Checkpoint, Ensemble, TestReport, TAG_KFOLD, TAG_SPLIT,
};
use lunar_cnn::{Dataset, GrayImage};

use crate::config::RunConfig;

/// Exit code contract: 0 success, 2 configuration, 3 data or checkpoint,
/// 4 input image.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_IMAGE: i32 = 4;

/// A command failure with the exit code it maps to.
#[derive(Debug)]
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

impl CmdError {
    fn config(e: impl Display) -> CmdError {
        CmdError {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn data(e: impl Display) -> CmdError {
        CmdError {
            code: EXIT_DATA,
            message: e.to_string(),
        }
    }

    fn image(e: impl Display) -> CmdError {
        CmdError {
            code: EXIT_IMAGE,
            message: e.to_string(),
        }
    }
}

fn write_text(path: &Path, text: &str, code: i32) -> Result<(), CmdError> {
    fs::write(path, text).map_err(|e| CmdError {
        code,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn make_dir(path: &Path, code: i32) -> Result<(), CmdError> {
    fs::create_dir_all(path).map_err(|e| CmdError {
        code,
        message: format!("cannot create {}: {e}", path.display()),
    })
}

// ---------------------------------------------------------------------------
// gen-data

/// Writes the synthetic dataset tree (manifest + one directory of PGMs per
/// class) and the tailed/ablated query pair, then prints per-class counts.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<(), CmdError> {
    let synth = cfg.synth_config();
    let ds = gen_synthetic(&synth).map_err(CmdError::config)?;

    let root = &cfg.data;
    make_dir(root, EXIT_CONFIG)?;
    let manifest: String = ds
        .class_names()
        .iter()
        .map(|n| format!("{n}\n"))
        .collect();
    write_text(&root.join("manifest.txt"), &manifest, EXIT_CONFIG)?;

    let mut written = vec![0usize; ds.class_count()];
    for class in 0..ds.class_count() {
        let dir = root.join(&ds.class_names()[class]);
        make_dir(&dir, EXIT_CONFIG)?;
        for ex in ds.examples().iter().filter(|ex| ex.label == class) {
            let path = dir.join(format!("{:04}.pgm", written[class]));
            save_pgm(&quantize(&ex.image), &path).map_err(CmdError::config)?;
            written[class] += 1;
        }
    }

    let (full, ablated) = make_query_pair(&synth).map_err(CmdError::config)?;
    save_pgm(&quantize(&full), &root.join("query_full.pgm")).map_err(CmdError::config)?;
    save_pgm(&quantize(&ablated), &root.join("query_ablated.pgm")).map_err(CmdError::config)?;

    for (name, count) in ds.class_names().iter().zip(&written) {
        println!("{name}: {count}");
    }
    println!(
        "wrote {} images and the query pair to {}",
        ds.len(),
        root.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// The one-file machine summary of a training run.
#[derive(Debug, Serialize)]
struct Summary {
    test_accuracy: f64,
    test_correct: usize,
    test_total: usize,
    per_fold_best_val_loss: Vec<f64>,
    per_fold_best_epoch: Vec<usize>,
    confusion: Vec<Vec<usize>>,
}

fn split_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, Dataset), CmdError> {
    let mut rng = stream_rng(cfg.seed, TAG_SPLIT);
    split_train_test(ds, cfg.train_per_class, &mut rng).map_err(CmdError::data)
}

/// Splits, trains the 4-fold ensemble, and writes `fold{i}.ckpt`,
/// `fold{i}_history.csv` and `summary.json` into the artifact directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<(), CmdError> {
    let tc = cfg.train_config();
    tc.validate().map_err(CmdError::config)?;

    let ds = load_dataset(&cfg.data).map_err(CmdError::data)?;
    let (train_ds, test_ds) = split_dataset(cfg, &ds)?;

    let mut kfold_rng = stream_rng(cfg.seed, TAG_KFOLD);
    let (ensemble, histories) =
        train_ensemble(&train_ds, &tc, &mut kfold_rng).map_err(CmdError::data)?;

    make_dir(&cfg.out, EXIT_DATA)?;
    for fold in 0..4 {
        let ckpt = ensemble.fold(fold);
        save_checkpoint(ckpt, cfg.out.join(format!("fold{fold}.ckpt")))
            .map_err(CmdError::data)?;
        write_history(
            &histories[fold],
            cfg.out.join(format!("fold{fold}_history.csv")),
        )
        .map_err(CmdError::data)?;
        let at_best = &histories[fold][ckpt.epoch_of_best - 1];
        println!(
            "fold {fold}: best epoch {}, val loss {:.4}, val acc {:.3}",
            ckpt.epoch_of_best, ckpt.best_val_loss, at_best.val_acc
        );
    }

    let report = evaluate_testset(&ensemble, &test_ds).map_err(CmdError::data)?;
    let summary = Summary {
        test_accuracy: report.accuracy,
        test_correct: report.correct,
        test_total: report.total,
        per_fold_best_val_loss: (0..4)
            .map(|f| ensemble.fold(f).best_val_loss)
            .collect(),
        per_fold_best_epoch: (0..4).map(|f| ensemble.fold(f).epoch_of_best).collect(),
        confusion: report.confusion.clone(),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&cfg.out.join("summary.json"), &(json + "\n"), EXIT_DATA)?;

    println!(
        "test accuracy {:.3} ({}/{})",
        report.accuracy, report.correct, report.total
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn load_ensemble(out: &Path) -> Result<Ensemble, CmdError> {
    let mut checkpoints: Vec<Checkpoint> = Vec::with_capacity(4);
    for fold in 0..4 {
        let path = out.join(format!("fold{fold}.ckpt"));
        checkpoints.push(load_checkpoint(&path).map_err(CmdError::data)?);
    }
    Ensemble::new(checkpoints).map_err(CmdError::data)
}

fn print_report(report: &TestReport, names: &[String]) {
    println!(
        "test accuracy {:.3} ({}/{})",
        report.accuracy, report.correct, report.total
    );
    let width = names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    print!("{:>width$}", "");
    for name in names {
        print!("  {name:>width$}");
    }
    println!("  (predicted)");
    for (row, name) in report.confusion.iter().zip(names) {
        print!("{name:>width$}");
        for &count in row {
            print!("  {count:>width$}");
        }
        println!();
    }
}

/// Reloads the saved checkpoints, recomputes the seeded train/test split,
/// and prints test accuracy and the confusion matrix. Writes nothing.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CmdError> {
    let ensemble = load_ensemble(&cfg.out)?;
    let ds = load_dataset(&cfg.data).map_err(CmdError::data)?;
    let (_, test_ds) = split_dataset(cfg, &ds)?;
    let report = evaluate_testset(&ensemble, &test_ds).map_err(CmdError::data)?;
    print_report(&report, &padded_names(ds.class_names(), report.confusion.len()));
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

/// Class labels for display: manifest names when they fit, protocol names
/// otherwise, indexed fallbacks past that.
fn padded_names(manifest: &[String], classes: usize) -> Vec<String> {
    let mut names: Vec<String> = if manifest.len() == classes {
        manifest.to_vec()
    } else {
        CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    };
    while names.len() < classes {
        names.push(format!("class{}", names.len()));
    }
    names.truncate(classes);
    names
}

fn display_names(cfg: &RunConfig, classes: usize) -> Vec<String> {
    let manifest = cfg.data.join("manifest.txt");
    let from_file: Vec<String> = fs::read_to_string(manifest)
        .map(|text| {
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    padded_names(&from_file, classes)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    angle_deg: u32,
    probs: Vec<f64>,
}

/// Classifies one PGM with the saved ensemble, prints the rotation table
/// (two significant digits), and writes full precision to CSV and JSON.
pub fn cmd_predict(cfg: &RunConfig, image: &PathBuf, rotations: bool) -> Result<(), CmdError> {
    let ensemble = load_ensemble(&cfg.out)?;
    let raw = load_pgm(image).map_err(CmdError::image)?;
    let img: GrayImage = normalize(&raw);

    let mut report = evaluate_rotations(&ensemble, &img).map_err(CmdError::image)?;
    if !rotations {
        report.rows.truncate(1);
    }

    let names = display_names(cfg, ensemble.network().classes);
    let table = report.display_table(&names).map_err(CmdError::config)?;
    print!("{table}");

    make_dir(&cfg.out, EXIT_DATA)?;
    write_text(&cfg.out.join("prediction.csv"), &report.to_csv(), EXIT_DATA)?;
    let rows: Vec<ReportRow> = report
        .rows
        .iter()
        .map(|r| ReportRow {
            angle_deg: r.angle_deg,
            probs: r.probs.clone(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&rows).expect("report serializes");
    write_text(&cfg.out.join("prediction.json"), &(json + "\n"), EXIT_DATA)?;
    Ok(())
}
