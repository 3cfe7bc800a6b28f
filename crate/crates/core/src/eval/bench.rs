use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::landmarks::{naed, LandmarkSet};
use crate::eval::metrics::{psnr, ssim};
use crate::imaging::{load_image, warp};
use crate::registration::{register, RegistrationConfig};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "raw"];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub config: RegistrationConfig,
    /// Read `landmarks.txt` in the FIRE layout instead of `landmarks.csv`.
    pub fire_format: bool,
}

/// Metrics of one pair. Failed pairs carry the error and NaN metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub pair: String,
    pub naed: Option<f64>,
    pub ssim: f64,
    pub psnr: f64,
    pub iterations: usize,
    pub final_objective: f64,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.exists())
}

fn run_pair(dir: &Path, opts: &BenchOptions) -> Result<BenchRow> {
    let start = Instant::now();
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let fixed_path = find_image(dir, "fixed")
        .ok_or_else(|| Error::format(dir, "no fixed.{png,pgm,ppm,raw}"))?;
    let moving_path = find_image(dir, "moving")
        .ok_or_else(|| Error::format(dir, "no moving.{png,pgm,ppm,raw}"))?;
    let fixed = load_image(&fixed_path)?;
    let moving = load_image(&moving_path)?;
    let result = register(&fixed, &moving, &opts.config)?;
    let registered = warp(&moving, &result.h, fixed.dims())?;
    let (fd, md) = (fixed.dims().to_vec(), moving.dims().to_vec());
    let landmarks = if opts.fire_format {
        let p = dir.join("landmarks.txt");
        p.exists()
            .then(|| LandmarkSet::read_fire(&p, fd, md))
            .transpose()?
    } else {
        let p = dir.join("landmarks.csv");
        p.exists()
            .then(|| LandmarkSet::read_csv(&p, fd, md))
            .transpose()?
    };
    let naed = landmarks.map(|l| naed(&l, &result.h_inv)).transpose()?;
    Ok(BenchRow {
        pair: name,
        naed,
        ssim: ssim(&fixed, &registered)?,
        psnr: psnr(&fixed, &registered)?,
        iterations: result.iterations_run,
        final_objective: result.loss_history.last().copied().unwrap_or(f64::NAN),
        wall_time_s: start.elapsed().as_secs_f64(),
        error: None,
    })
}

/// Registers every pair directory under `dir` (sorted by name), in parallel.
pub fn run_bench(dir: &Path, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let mut pairs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    pairs.sort();
    if pairs.is_empty() {
        return Err(Error::format(dir, "no pair directories found"));
    }
    Ok(pairs
        .par_iter()
        .map(|p| {
            run_pair(p, opts).unwrap_or_else(|e| BenchRow {
                pair: p
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                naed: None,
                ssim: f64::NAN,
                psnr: f64::NAN,
                iterations: 0,
                final_objective: f64::NAN,
                wall_time_s: 0.0,
                error: Some(e.to_string()),
            })
        })
        .collect())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Per-pair rows followed by `mean` and `std` (population) rows computed
/// over the successful pairs.
pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "pair",
        "naed",
        "ssim",
        "psnr",
        "iterations",
        "final_objective",
        "wall_time_s",
        "error",
    ])?;
    for r in rows {
        w.write_record([
            r.pair.clone(),
            fmt_opt(r.naed),
            r.ssim.to_string(),
            r.psnr.to_string(),
            r.iterations.to_string(),
            r.final_objective.to_string(),
            r.wall_time_s.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    let ok: Vec<&BenchRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let column = |f: &dyn Fn(&BenchRow) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        let vals: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
        if vals.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&vals);
            (Some(m), Some(s))
        }
    };
    let stats = [
        column(&|r| r.naed),
        column(&|r| Some(r.ssim)),
        column(&|r| Some(r.psnr)),
        column(&|r| Some(r.iterations as f64)),
        column(&|r| Some(r.final_objective)),
        column(&|r| Some(r.wall_time_s)),
    ];
    for (label, pick) in [("mean", 0usize), ("std", 1)] {
        let mut rec = vec![label.to_string()];
        for s in &stats {
            rec.push(fmt_opt(if pick == 0 { s.0 } else { s.1 }));
        }
        rec.push(String::new());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, naed: f64, ssim: f64) -> BenchRow {
        BenchRow {
            pair: name.into(),
            naed: Some(naed),
            ssim,
            psnr: 30.0,
            iterations: 10,
            final_objective: -0.5,
            wall_time_s: 1.0,
            error: None,
        }
    }

    #[test]
    fn aggregate_rows_are_recomputable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let mut failed = row("c", 0.0, 0.0);
        failed.error = Some("boom".into());
        write_bench_csv(&[row("a", 0.1, 0.8), row("b", 0.3, 0.6), failed], &path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let recs: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(recs.len(), 5);
        assert_eq!(&recs[3][0], "mean");
        let mean: f64 = recs[3][1].parse().unwrap();
        let std: f64 = recs[4][1].parse().unwrap();
        assert!((mean - 0.2).abs() < 1e-15);
        assert!((std - 0.1).abs() < 1e-15);
        assert_eq!(&recs[2][7], "boom");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let opts = BenchOptions {
            config: RegistrationConfig::default(),
            fire_format: false,
        };
        assert!(run_bench(dir.path(), &opts).is_err());
    }
}
