//! Per-frame CSV reports and the derived experiment tables: drift curves,
//! rate-distortion pairs, the PSNR↔gradient-EMA correlation, and
//! run-to-run stability statistics.

use std::path::Path;

use crate::pipeline::FrameReport;
use crate::{Error, Result};

pub const REPORT_SCHEMA: &str = "# schema: solar-report v1";
const REPORT_COLUMNS: &str = "frame,psnr_db,ssim,bytes,grad_ema,recal,active_anchors";

/// Serialize per-frame rows; `config_echo` (e.g. the flag set that
/// produced the run) goes into a comment line for reproducibility.
pub fn report_to_csv(reports: &[FrameReport], config_echo: &str) -> String {
    let mut s = String::new();
    s.push_str(REPORT_SCHEMA);
    s.push('\n');
    if !config_echo.is_empty() {
        s.push_str("# config: ");
        s.push_str(config_echo);
        s.push('\n');
    }
    s.push_str(REPORT_COLUMNS);
    s.push('\n');
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.frame,
            r.psnr_db,
            r.ssim,
            r.bytes,
            r.grad_ema,
            u8::from(r.recal),
            r.active_anchors
        ));
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<FrameReport>> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty report".into() })?;
    if first.trim() != REPORT_SCHEMA {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unknown report schema '{}'", first.trim()),
        });
    }
    let mut out = Vec::new();
    for (i, raw) in lines {
        let ln = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line == REPORT_COLUMNS {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 7 {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 7 columns, got {}", cols.len()),
            });
        }
        let f = |idx: usize| -> Result<f64> {
            cols[idx]
                .parse::<f64>()
                .map_err(|_| Error::Parse { line: ln, msg: format!("bad number '{}'", cols[idx]) })
        };
        out.push(FrameReport {
            frame: f(0)? as u32,
            psnr_db: f(1)?,
            ssim: f(2)?,
            bytes: f(3)? as usize,
            grad_ema: f(4)?,
            recal: f(5)? != 0.0,
            active_anchors: f(6)? as usize,
        });
    }
    Ok(out)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<FrameReport>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_report_csv(&text)
}

/// PSNR-vs-frame table.
pub fn drift_table(reports: &[FrameReport]) -> String {
    let mut s = String::from("# schema: solar-drift v1\nframe,psnr_db\n");
    for r in reports {
        s.push_str(&format!("{},{}\n", r.frame, r.psnr_db));
    }
    s
}

/// One (mean bytes/frame, mean PSNR) point per run.
pub fn rd_table(runs: &[(String, Vec<FrameReport>)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::InvalidConfig("rd mode needs at least one run".into()));
    }
    let mut s = String::from("# schema: solar-rd v1\nrun,bytes_per_frame,psnr_db\n");
    for (name, rs) in runs {
        if rs.is_empty() {
            return Err(Error::InvalidConfig(format!("run '{name}' has no frames")));
        }
        let n = rs.len() as f64;
        let bytes = rs.iter().map(|r| r.bytes as f64).sum::<f64>() / n;
        let psnr = rs.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        s.push_str(&format!("{name},{bytes},{psnr}\n"));
    }
    Ok(s)
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "pearson needs two equal-length series of >= 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidConfig("pearson undefined for a constant series".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson r between per-frame PSNR and the end-of-frame gradient EMA,
/// over P-frames (I-frames carry no BTC statistic and are skipped).
pub fn correlation_table(reports: &[FrameReport]) -> Result<String> {
    let rows: Vec<&FrameReport> = reports.iter().filter(|r| r.grad_ema > 0.0).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.psnr_db).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.grad_ema).collect();
    let r = pearson(&xs, &ys)?;
    Ok(format!("# schema: solar-correlation v1\nn,pearson_r\n{},{r}\n", rows.len()))
}

/// The three stability statistics over repeated seeded runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    /// mean PSNR over all runs and frames
    pub mu_seq: f64,
    /// per-frame standard deviation across runs, averaged over frames
    pub sigma_run: f64,
    /// temporal standard deviation within a run, averaged over runs
    pub sigma_temp: f64,
}

fn pop_std(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
}

pub fn stability(runs: &[Vec<FrameReport>]) -> Result<Stability> {
    if runs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "stability needs >= 2 runs, got {}",
            runs.len()
        )));
    }
    let n_frames = runs[0].len();
    if n_frames == 0 {
        return Err(Error::InvalidConfig("stability runs are empty".into()));
    }
    for (i, r) in runs.iter().enumerate() {
        if r.len() != n_frames {
            return Err(Error::InvalidConfig(format!(
                "run {i} has {} frames, expected {n_frames}",
                r.len()
            )));
        }
    }
    let mu_seq = runs
        .iter()
        .flat_map(|r| r.iter().map(|f| f.psnr_db))
        .sum::<f64>()
        / (runs.len() * n_frames) as f64;
    let sigma_run = (0..n_frames)
        .map(|t| pop_std(&runs.iter().map(|r| r[t].psnr_db).collect::<Vec<_>>()))
        .sum::<f64>()
        / n_frames as f64;
    let sigma_temp = runs
        .iter()
        .map(|r| pop_std(&r.iter().map(|f| f.psnr_db).collect::<Vec<_>>()))
        .sum::<f64>()
        / runs.len() as f64;
    Ok(Stability { mu_seq, sigma_run, sigma_temp })
}

pub fn stability_table(runs: &[Vec<FrameReport>]) -> Result<String> {
    let s = stability(runs)?;
    Ok(format!(
        "# schema: solar-stability v1\nmu_seq,sigma_run,sigma_temp\n{},{},{}\n",
        s.mu_seq, s.sigma_run, s.sigma_temp
    ))
}
