//! Report artifacts: the per-class metric table (text + CSV), prediction
//! files, training-curve CSV/SVG emission, and the prediction gallery.
//!
//! Numeric CSV cells use Rust's shortest round-trip float formatting, so
//! render -> parse -> render is byte-identical. The text table shows four
//! decimals and mirrors the fixed class order plus Average and STD rows.

use std::path::Path;

use base64::Engine;

use crate::data::{Dataset, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{
    accuracy_of, column_mean_std, ovr_auc_pair_count, per_class_prf, ConfusionMatrix, PrfRow,
};
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::EpochLog;

// ---------------------------------------------------------------------------
// prediction files
// ---------------------------------------------------------------------------

/// Parsed `id,actual,predicted,score_0..score_6` rows.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub ids: Vec<String>,
    pub actual: Vec<usize>,
    pub predicted: Vec<usize>,
    /// Softmax probabilities, one row of `NUM_CLASSES` scores per sample.
    pub scores: Vec<Vec<f64>>,
}

fn prediction_header() -> String {
    let mut h = String::from("id,actual,predicted");
    for k in 0..NUM_CLASSES {
        h.push_str(&format!(",score_{k}"));
    }
    h
}

pub fn predictions_to_csv(p: &Predictions) -> String {
    let mut out = prediction_header();
    out.push('\n');
    for i in 0..p.ids.len() {
        out.push_str(&format!("{},{},{}", p.ids[i], p.actual[i], p.predicted[i]));
        for s in &p.scores[i] {
            out.push_str(&format!(",{s}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Predictions> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == prediction_header() => {}
        other => {
            return Err(Error::Schema(format!(
                "prediction header must be '{}', got {other:?}",
                prediction_header()
            )))
        }
    }
    let mut p = Predictions {
        ids: Vec::new(),
        actual: Vec::new(),
        predicted: Vec::new(),
        scores: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + NUM_CLASSES {
            return Err(Error::Schema(format!(
                "prediction line {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                3 + NUM_CLASSES
            )));
        }
        let parse_label = |s: &str| -> Result<usize> {
            let v: usize = s
                .parse()
                .map_err(|_| Error::Schema(format!("bad label '{s}' on line {}", lineno + 2)))?;
            if v >= NUM_CLASSES {
                return Err(Error::Schema(format!(
                    "label {v} out of range on line {}",
                    lineno + 2
                )));
            }
            Ok(v)
        };
        p.ids.push(fields[0].to_string());
        p.actual.push(parse_label(fields[1])?);
        p.predicted.push(parse_label(fields[2])?);
        let mut row = Vec::with_capacity(NUM_CLASSES);
        for f in &fields[3..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Schema(format!("bad score '{f}' on line {}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite score on line {}",
                    lineno + 2
                )));
            }
            row.push(v);
        }
        p.scores.push(row);
    }
    if p.ids.is_empty() {
        return Err(Error::Schema("prediction file has no rows".into()));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// the class report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRow {
    pub name: String,
    pub prf: PrfRow,
    pub auc: Option<f64>,
    pub support: u64,
}

/// Summary over the per-class columns. AUC is macro-averaged over classes
/// where it is defined; None if it is defined nowhere (or, for the deviation,
/// fewer than twice).
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub rows: Vec<ClassRow>,
    pub accuracy: f64,
    pub average: SummaryRow,
    pub std: SummaryRow,
}

/// Assemble the report table from a confusion matrix and per-class AUCs.
pub fn class_report(cm: &ConfusionMatrix, aucs: &[Option<f64>]) -> Result<ClassReport> {
    if aucs.len() != cm.k() {
        return Err(Error::Contract(format!(
            "{} AUC entries for {} classes",
            aucs.len(),
            cm.k()
        )));
    }
    let prf = per_class_prf(cm);
    let rows: Vec<ClassRow> = (0..cm.k())
        .map(|c| ClassRow {
            name: CLASS_NAMES
                .get(c)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("class{c}")),
            prf: prf[c],
            auc: aucs[c],
            support: cm.row_total(c),
        })
        .collect();
    let col = |f: fn(&PrfRow) -> f64| -> Vec<f64> { prf.iter().map(f).collect() };
    let (p_mean, p_std) = column_mean_std(&col(|r| r.precision))?;
    let (r_mean, r_std) = column_mean_std(&col(|r| r.recall))?;
    let (f_mean, f_std) = column_mean_std(&col(|r| r.f1))?;
    let defined_aucs: Vec<f64> = aucs.iter().flatten().copied().collect();
    let (a_mean, a_std) = if defined_aucs.is_empty() {
        (None, None)
    } else {
        let (m, s) = column_mean_std(&defined_aucs)?;
        (Some(m), s)
    };
    Ok(ClassReport {
        rows,
        accuracy: accuracy_of(cm)?,
        average: SummaryRow {
            precision: p_mean,
            recall: r_mean,
            f1: f_mean,
            auc: a_mean,
        },
        std: SummaryRow {
            precision: p_std.unwrap_or(0.0),
            recall: r_std.unwrap_or(0.0),
            f1: f_std.unwrap_or(0.0),
            auc: a_std,
        },
    })
}

/// Report + confusion matrix straight from a prediction set, computing
/// one-vs-rest AUC per class from the score columns.
pub fn report_from_predictions(p: &Predictions) -> Result<(ClassReport, ConfusionMatrix)> {
    let cm = ConfusionMatrix::from_labels(&p.actual, &p.predicted, NUM_CLASSES)?;
    let mut aucs = Vec::with_capacity(NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        let scores: Vec<f64> = p.scores.iter().map(|row| row[class]).collect();
        let is_pos: Vec<bool> = p.actual.iter().map(|&a| a == class).collect();
        aucs.push(ovr_auc_pair_count(&scores, &is_pos)?);
    }
    Ok((class_report(&cm, &aucs)?, cm))
}

fn fmt_opt4(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

/// Fixed-width text table: accuracy header, one row per class, Average and
/// STD rows, the confusion matrix with its diagonal called out, and a footer
/// listing any metrics that were undefined on this input.
pub fn render_text(report: &ClassReport, cm: Option<&ConfusionMatrix>) -> String {
    let mut out = String::new();
    out.push_str(&format!("Accuracy: {:.2}%\n\n", report.accuracy * 100.0));
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10} {:>8}\n",
        "Class Label", "Precision", "Recall", "F1 Score", "AUC"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>8}\n",
            row.name,
            row.prf.precision,
            row.prf.recall,
            row.prf.f1,
            fmt_opt4(row.auc)
        ));
    }
    out.push_str(&format!(
        "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>8}\n",
        "Average",
        report.average.precision,
        report.average.recall,
        report.average.f1,
        fmt_opt4(report.average.auc)
    ));
    out.push_str(&format!(
        "{:<12} {:>10.4} {:>10.4} {:>10.4} {:>8}\n",
        "STD", report.std.precision, report.std.recall, report.std.f1, fmt_opt4(report.std.auc)
    ));
    if let Some(cm) = cm {
        out.push_str("\nConfusion matrix (rows = actual, columns = predicted):\n");
        out.push_str(&format!("{:<8}", ""));
        for j in 0..cm.k() {
            out.push_str(&format!("{:>7}", report.rows[j].name));
        }
        out.push('\n');
        for i in 0..cm.k() {
            out.push_str(&format!("{:<8}", report.rows[i].name));
            for j in 0..cm.k() {
                out.push_str(&format!("{:>7}", cm.entry(i, j)));
            }
            out.push('\n');
        }
        let diag: Vec<String> = cm.diagonal().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("Confusion diagonal: {}\n", diag.join(", ")));
    }
    let mut flags = Vec::new();
    for row in &report.rows {
        if !row.prf.precision_defined {
            flags.push(format!("{} precision", row.name));
        }
        if !row.prf.recall_defined {
            flags.push(format!("{} recall", row.name));
        }
        if !row.prf.f1_defined {
            flags.push(format!("{} f1", row.name));
        }
        if row.auc.is_none() {
            flags.push(format!("{} auc", row.name));
        }
    }
    if flags.is_empty() {
        out.push_str("\nUndefined metrics: none\n");
    } else {
        out.push_str(&format!("\nUndefined metrics: {}\n", flags.join(", ")));
    }
    out
}

const REPORT_CSV_HEADER: &str = "row,precision,recall,f1,auc,support,flags";

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Full-precision CSV of the report table.
pub fn report_to_csv(report: &ClassReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        let mut flags = Vec::new();
        if !row.prf.precision_defined {
            flags.push("p");
        }
        if !row.prf.recall_defined {
            flags.push("r");
        }
        if !row.prf.f1_defined {
            flags.push("f1");
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.name,
            row.prf.precision,
            row.prf.recall,
            row.prf.f1,
            csv_opt(row.auc),
            row.support,
            flags.join("|")
        ));
    }
    out.push_str(&format!(
        "average,{},{},{},{},,\n",
        report.average.precision,
        report.average.recall,
        report.average.f1,
        csv_opt(report.average.auc)
    ));
    out.push_str(&format!(
        "std,{},{},{},{},,\n",
        report.std.precision,
        report.std.recall,
        report.std.f1,
        csv_opt(report.std.auc)
    ));
    out.push_str(&format!("accuracy,{},,,,,\n", report.accuracy));
    out
}

/// Inverse of [`report_to_csv`]; `parse -> render` reproduces the input bytes.
pub fn parse_report_csv(text: &str) -> Result<ClassReport> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == REPORT_CSV_HEADER => {}
        other => {
            return Err(Error::Schema(format!(
                "report header must be '{REPORT_CSV_HEADER}', got {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    let mut average = None;
    let mut std = None;
    let mut accuracy = None;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Schema(format!("report line '{line}' has {} fields", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Schema(format!("bad number '{s}' in report CSV")))
        };
        let opt_num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        match f[0] {
            "average" => {
                average = Some(SummaryRow {
                    precision: num(f[1])?,
                    recall: num(f[2])?,
                    f1: num(f[3])?,
                    auc: opt_num(f[4])?,
                })
            }
            "std" => {
                std = Some(SummaryRow {
                    precision: num(f[1])?,
                    recall: num(f[2])?,
                    f1: num(f[3])?,
                    auc: opt_num(f[4])?,
                })
            }
            "accuracy" => accuracy = Some(num(f[1])?),
            name => {
                let flags = f[6];
                rows.push(ClassRow {
                    name: name.to_string(),
                    prf: PrfRow {
                        precision: num(f[1])?,
                        recall: num(f[2])?,
                        f1: num(f[3])?,
                        precision_defined: !flags.split('|').any(|x| x == "p"),
                        recall_defined: !flags.split('|').any(|x| x == "r"),
                        f1_defined: !flags.split('|').any(|x| x == "f1"),
                    },
                    auc: opt_num(f[4])?,
                    support: f[5]
                        .parse()
                        .map_err(|_| Error::Schema(format!("bad support '{}'", f[5])))?,
                })
            }
        }
    }
    Ok(ClassReport {
        rows,
        accuracy: accuracy.ok_or_else(|| Error::Schema("report CSV missing accuracy row".into()))?,
        average: average.ok_or_else(|| Error::Schema("report CSV missing average row".into()))?,
        std: std.ok_or_else(|| Error::Schema("report CSV missing std row".into()))?,
    })
}

// ---------------------------------------------------------------------------
// training curves
// ---------------------------------------------------------------------------

struct Panel {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        // degenerate: pad so the viewport never collapses
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.06;
        (lo - pad, hi + pad)
    }
}

fn draw_series(
    svg: &mut String,
    panel: &Panel,
    epochs: &[usize],
    values: &[f64],
    (ylo, yhi): (f64, f64),
    xmax: f64,
    color: &str,
) {
    let to_x = |e: usize| panel.x0 + (e as f64 - 1.0) / (xmax - 1.0).max(1.0) * panel.w;
    let to_y = |v: f64| panel.y0 + panel.h - (v - ylo) / (yhi - ylo) * panel.h;
    if values.len() >= 2 {
        let pts: Vec<String> = epochs
            .iter()
            .zip(values)
            .map(|(&e, &v)| format!("{:.2},{:.2}", to_x(e), to_y(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    for (&e, &v) in epochs.iter().zip(values) {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>\n",
            to_x(e),
            to_y(v)
        ));
    }
}

fn draw_panel(
    svg: &mut String,
    panel: &Panel,
    title: &str,
    epochs: &[usize],
    train: &[f64],
    val: Option<&[f64]>,
) {
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for &v in train.iter().chain(val.unwrap_or(&[])) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let (ylo, yhi) = nice_range(lo, hi);
    let xmax = *epochs.last().expect("at least one row") as f64;
    svg.push_str(&format!(
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333\"/>\n",
        panel.x0, panel.y0, panel.w, panel.h
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"15\" font-family=\"sans-serif\">{title}</text>\n",
        panel.x0 + panel.w / 2.0,
        panel.y0 - 12.0
    ));
    // y ticks
    for t in 0..=4 {
        let v = ylo + (yhi - ylo) * t as f64 / 4.0;
        let y = panel.y0 + panel.h - panel.h * t as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#ccc\"/>\n",
            panel.x0,
            panel.x0 + panel.w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"10\" font-family=\"sans-serif\">{v:.3}</text>\n",
            panel.x0 - 6.0,
            y + 3.5
        ));
    }
    // x ticks: up to 5, integer epochs
    let last = *epochs.last().unwrap();
    let tick_count = last.min(5).max(1);
    for t in 0..tick_count {
        let e = if tick_count == 1 {
            last
        } else {
            1 + t * (last - 1) / (tick_count - 1)
        };
        let x = panel.x0 + (e as f64 - 1.0) / (xmax - 1.0).max(1.0) * panel.w;
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"10\" font-family=\"sans-serif\">{e}</text>\n",
            panel.y0 + panel.h + 16.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">epoch</text>\n",
        panel.x0 + panel.w / 2.0,
        panel.y0 + panel.h + 32.0
    ));
    draw_series(svg, panel, epochs, train, (ylo, yhi), xmax, "#d62728");
    if let Some(val) = val {
        draw_series(svg, panel, epochs, val, (ylo, yhi), xmax, "#1f77b4");
    }
    // legend
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" font-family=\"sans-serif\" fill=\"#d62728\">train</text>\n",
        panel.x0 + panel.w - 62.0,
        panel.y0 + 14.0
    ));
    if val.is_some() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" font-family=\"sans-serif\" fill=\"#1f77b4\">val</text>\n",
            panel.x0 + panel.w - 28.0,
            panel.y0 + 14.0
        ));
    }
}

/// Two-panel SVG (accuracy left, loss right) over the epoch axis.
pub fn curves_svg(logs: &[EpochLog]) -> Result<String> {
    if logs.is_empty() {
        return Err(Error::Contract("curve emission needs at least one epoch".into()));
    }
    let epochs: Vec<usize> = logs.iter().map(|l| l.epoch).collect();
    let ta: Vec<f64> = logs.iter().map(|l| l.train_acc).collect();
    let va: Vec<f64> = logs.iter().map(|l| l.val_acc).collect();
    let tl: Vec<f64> = logs.iter().map(|l| l.train_loss).collect();
    let vl: Vec<f64> = logs.iter().map(|l| l.val_loss).collect();
    let has_val = logs.iter().any(|l| l.val_acc != 0.0 || l.val_loss != 0.0);
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"960\" height=\"420\" viewBox=\"0 0 960 420\">\n<rect width=\"960\" height=\"420\" fill=\"white\"/>\n",
    );
    let left = Panel {
        x0: 60.0,
        y0: 40.0,
        w: 380.0,
        h: 320.0,
    };
    let right = Panel {
        x0: 540.0,
        y0: 40.0,
        w: 380.0,
        h: 320.0,
    };
    draw_panel(
        &mut svg,
        &left,
        "Accuracy",
        &epochs,
        &ta,
        has_val.then_some(va.as_slice()),
    );
    draw_panel(
        &mut svg,
        &right,
        "Loss",
        &epochs,
        &tl,
        has_val.then_some(vl.as_slice()),
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Write `curves.csv` (the epoch log) and `curves.svg` under `out_dir`.
pub fn emit_curves(logs: &[EpochLog], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let csv = crate::trainer::epoch_logs_to_csv(logs);
    std::fs::write(out_dir.join("curves.csv"), csv)
        .map_err(|e| Error::io("writing curves.csv", e))?;
    std::fs::write(out_dir.join("curves.svg"), curves_svg(logs)?)
        .map_err(|e| Error::io("writing curves.svg", e))
}

// ---------------------------------------------------------------------------
// prediction gallery
// ---------------------------------------------------------------------------

/// Encode a [C,H,W] image in [0,1] as a base64 PNG data URI.
fn image_data_uri(t: &Tensor<f32>) -> Result<String> {
    let shape = t.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |ch: usize| {
                (t.data()[ch * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            let p = if c >= 3 {
                [px(0), px(1), px(2)]
            } else {
                [px(0), px(0), px(0)]
            };
            rgb.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    let mut buf = Vec::new();
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(rgb.as_raw(), w as u32, h as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Format(format!("png encoding failed: {e}")))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(buf)
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GallerySummary {
    pub shown: usize,
    /// Cells whose predicted class differs from the actual class.
    pub flagged: usize,
}

/// SVG grid of `n` test images captioned "Actual i || Predicted j", with
/// misclassified cells flagged in red. Selection is the first `n` positions
/// of a seeded shuffle of the test set.
pub fn prediction_gallery(
    test: &Dataset,
    predictions: &[usize],
    n: usize,
    seed: u64,
    out_path: &Path,
) -> Result<GallerySummary> {
    if predictions.len() != test.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} test samples",
            predictions.len(),
            test.len()
        )));
    }
    if n > test.len() {
        return Err(Error::Contract(format!(
            "gallery of {n} cells from only {} samples",
            test.len()
        )));
    }
    let mut order: Vec<usize> = (0..test.len()).collect();
    rng::shuffle(&mut order, &mut rng::stream(seed, "gallery", 0));
    order.truncate(n);

    let cols = 4usize;
    let cell_w = 140.0;
    let cell_h = 170.0;
    let img_size = 112.0;
    let rows = n.div_ceil(cols).max(1);
    let width = cols as f64 * cell_w + 20.0;
    let height = rows as f64 * cell_h + 50.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n"
    );
    let map: Vec<String> = (0..NUM_CLASSES)
        .map(|i| format!("{i}={}", CLASS_NAMES[i]))
        .collect();
    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-size=\"12\" font-family=\"sans-serif\">{}</text>\n",
        map.join(", ")
    ));
    let mut flagged = 0usize;
    for (cell, &idx) in order.iter().enumerate() {
        let sample = &test.samples()[idx];
        let pred = predictions[idx];
        let wrong = pred != sample.label;
        if wrong {
            flagged += 1;
        }
        let cx = 10.0 + (cell % cols) as f64 * cell_w;
        let cy = 34.0 + (cell / cols) as f64 * cell_h;
        let uri = image_data_uri(&sample.image)?;
        svg.push_str(&format!(
            "<image x=\"{:.0}\" y=\"{:.0}\" width=\"{img_size:.0}\" height=\"{img_size:.0}\" style=\"image-rendering:pixelated\" href=\"{uri}\"/>\n",
            cx + 9.0,
            cy
        ));
        let stroke = if wrong { "#cc0000" } else { "#444444" };
        let stroke_w = if wrong { 3 } else { 1 };
        svg.push_str(&format!(
            "<rect x=\"{:.0}\" y=\"{cy:.0}\" width=\"{img_size:.0}\" height=\"{img_size:.0}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{stroke_w}\"/>\n",
            cx + 9.0
        ));
        let color = if wrong { "#cc0000" } else { "#000000" };
        svg.push_str(&format!(
            "<text x=\"{:.0}\" y=\"{:.0}\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\" fill=\"{color}\">Actual {} || Predicted {}</text>\n",
            cx + 9.0 + img_size / 2.0,
            cy + img_size + 18.0,
            sample.label,
            pred
        ));
    }
    svg.push_str("</svg>\n");
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(out_path, svg)
        .map_err(|e| Error::io(format!("writing {}", out_path.display()), e))?;
    Ok(GallerySummary {
        shown: n,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, Sample};

    fn sample_predictions() -> Predictions {
        // 3 samples per class, one global confusion nv->mel
        let mut p = Predictions {
            ids: vec![],
            actual: vec![],
            predicted: vec![],
            scores: vec![],
        };
        let mut n = 0;
        for class in 0..NUM_CLASSES {
            for i in 0..3 {
                let predicted = if class == 5 && i == 0 { 4 } else { class };
                p.ids.push(format!("t{n:03}"));
                p.actual.push(class);
                p.predicted.push(predicted);
                let mut row = vec![0.03; NUM_CLASSES];
                row[predicted] = 0.82;
                p.scores.push(row);
                n += 1;
            }
        }
        p
    }

    #[test]
    fn prediction_csv_round_trips() {
        let p = sample_predictions();
        let csv = predictions_to_csv(&p);
        let back = parse_predictions(&csv).unwrap();
        assert_eq!(predictions_to_csv(&back), csv);
    }

    #[test]
    fn report_csv_render_parse_render_is_byte_identical() {
        let p = sample_predictions();
        let (report, _) = report_from_predictions(&p).unwrap();
        let csv = report_to_csv(&report);
        let parsed = parse_report_csv(&csv).unwrap();
        assert_eq!(report_to_csv(&parsed), csv);
        assert_eq!(parsed, report);
    }

    #[test]
    fn text_report_mirrors_published_table_shape() {
        let p = sample_predictions();
        let (report, cm) = report_from_predictions(&p).unwrap();
        let text = render_text(&report, Some(&cm));
        assert!(text.starts_with("Accuracy: "));
        for name in CLASS_NAMES {
            assert!(text.contains(name));
        }
        assert!(text.contains("Average"));
        assert!(text.contains("STD"));
        assert!(text.contains("Confusion diagonal: "));
    }

    #[test]
    fn single_class_report_emits_undefined_markers_without_crashing() {
        let p = Predictions {
            ids: vec!["a".into(), "b".into()],
            actual: vec![0, 0],
            predicted: vec![0, 0],
            scores: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]; 2],
        };
        let (report, cm) = report_from_predictions(&p).unwrap();
        let text = render_text(&report, Some(&cm));
        assert!(text.contains("n/a"));
        assert!(text.contains("Undefined metrics:"));
        assert!(report.rows[1].auc.is_none());
        assert!(report.average.auc.is_none());
    }

    #[test]
    fn curves_svg_handles_single_row_and_constant_logs() {
        let one = vec![EpochLog {
            epoch: 1,
            train_loss: 0.5,
            train_acc: 0.3,
            val_loss: 0.6,
            val_acc: 0.25,
            seconds: 1.0,
        }];
        let svg = curves_svg(&one).unwrap();
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));

        let constant: Vec<EpochLog> = (1..=5)
            .map(|e| EpochLog {
                epoch: e,
                train_loss: 1.0,
                train_acc: 0.5,
                val_loss: 1.0,
                val_acc: 0.5,
                seconds: 0.0,
            })
            .collect();
        let svg = curves_svg(&constant).unwrap();
        // degenerate range must be padded, not collapsed
        assert!(svg.contains("<polyline"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn curves_svg_is_deterministic() {
        let logs: Vec<EpochLog> = (1..=40)
            .map(|e| EpochLog {
                epoch: e,
                train_loss: 2.0 / e as f64,
                train_acc: 1.0 - 1.0 / e as f64,
                val_loss: 2.2 / e as f64,
                val_acc: 0.95 - 1.0 / e as f64,
                seconds: e as f64 * 0.1,
            })
            .collect();
        assert_eq!(curves_svg(&logs).unwrap(), curves_svg(&logs).unwrap());
    }

    #[test]
    fn gallery_flags_exactly_the_mismatches() {
        let samples: Vec<Sample> = (0..8)
            .map(|i| Sample {
                id: format!("g{i}"),
                image: Tensor::filled(vec![3, 8, 8], i as f32 / 8.0),
                label: i % NUM_CLASSES,
            })
            .collect();
        let ds = Dataset::new(samples, Provenance::Synthetic).unwrap();
        // two wrong predictions
        let mut preds: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
        preds[1] = (preds[1] + 1) % NUM_CLASSES;
        preds[5] = (preds[5] + 2) % NUM_CLASSES;
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("gallery.svg");
        let summary = prediction_gallery(&ds, &preds, 8, 3, &out).unwrap();
        assert_eq!(summary.shown, 8);
        assert_eq!(summary.flagged, 2);
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.contains("Actual 0 || Predicted"));
        assert_eq!(svg.matches("#cc0000").count(), 4); // border + caption per flagged cell
    }

    #[test]
    fn gallery_with_all_correct_predictions_has_no_flags() {
        let samples: Vec<Sample> = (0..4)
            .map(|i| Sample {
                id: format!("g{i}"),
                image: Tensor::filled(vec![3, 8, 8], 0.2),
                label: i,
            })
            .collect();
        let ds = Dataset::new(samples, Provenance::Synthetic).unwrap();
        let preds: Vec<usize> = ds.samples().iter().map(|s| s.label).collect();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("gallery.svg");
        let summary = prediction_gallery(&ds, &preds, 4, 1, &out).unwrap();
        assert_eq!(summary.flagged, 0);
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(!svg.contains("#cc0000"));
    }
}
