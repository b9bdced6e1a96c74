//! Loss and temperature curves from a history CSV, rendered as SVG.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::trainer::HISTORY_HEADER;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: u64,
    pub recon: f64,
    pub kl_occ: f64,
    pub kl_app: f64,
    pub tau: f64,
}

fn csv_err(line: u64, message: impl Into<String>) -> Error {
    Error::Csv {
        line: line as usize,
        message: message.into(),
    }
}

pub fn parse_history_csv(text: &str) -> Result<Vec<HistoryRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| csv_err(1, e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != HISTORY_HEADER {
        return Err(csv_err(1, format!("expected header {HISTORY_HEADER:?}, found {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|_| csv_err(line, format!("column {} is not a number: {:?}", i + 1, &rec[i])))
        };
        let step = rec[0].trim().parse::<u64>().map_err(|_| csv_err(line, format!("step {:?} is not an integer", &rec[0])))?;
        rows.push(HistoryRow {
            step,
            recon: field(1)?,
            kl_occ: field(2)?,
            kl_app: field(3)?,
            tau: field(4)?,
        });
    }
    Ok(rows)
}

pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
    parse_history_csv(&text)
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn line_chart(path: &Path, title: &str, y_desc: &str, rows: &[HistoryRow], series: &[(&str, fn(&HistoryRow) -> f64, RGBColor)]) -> Result<()> {
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let x_max = rows.last().map_or(1, |r| r.step.max(1)) as f64;
    let (y0, y1) = range(series.iter().flat_map(|(_, f, _)| rows.iter().map(f)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(48)
        .y_label_area_size(72)
        .build_cartesian_2d(0f64..x_max, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("step")
        .y_desc(y_desc)
        .draw()
        .map_err(plot_err)?;
    for &(name, f, colour) in series {
        chart
            .draw_series(LineSeries::new(rows.iter().map(|r| (r.step as f64, f(r))), colour.stroke_width(2)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Write `loss_curves.svg` and `temperature.svg` into `out_dir`.
pub fn plot_history(rows: &[HistoryRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(csv_err(2, "history has no rows; nothing to plot"));
    }
    std::fs::create_dir_all(out_dir)?;
    let loss = out_dir.join("loss_curves.svg");
    line_chart(
        &loss,
        "training losses",
        "loss (per pixel value)",
        rows,
        &[
            ("recon", |r| r.recon, RED),
            ("kl_occ", |r| r.kl_occ, BLUE),
            ("kl_app", |r| r.kl_app, RGBColor(0, 140, 0)),
        ],
    )?;
    let tau = out_dir.join("temperature.svg");
    line_chart(&tau, "relaxation temperature", "temperature tau", rows, &[("tau", |r| r.tau, BLACK)])?;
    Ok(vec![loss, tau])
}

pub fn emit_plots(history_csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    plot_history(&read_history_csv(history_csv)?, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn malformed_rows_report_their_line() {
        let text = "step,recon,kl_occ,kl_app,tau\n0,1,2,3,1\n1,0.5,oops,3,0.9\n";
        match parse_history_csv(text).unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        let short = "step,recon,kl_occ,kl_app,tau\n0,1,2,3,1\n1,2\n";
        match parse_history_csv(short).unwrap_err() {
            Error::Csv { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse_history_csv("a,b\n1,2\n").unwrap_err(), Error::Csv { line: 1, .. }));
    }

    #[test]
    fn empty_history_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(plot_history(&[], dir.path()).is_err());
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
