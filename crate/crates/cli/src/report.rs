//! CSV reports and the sweep chart.

use std::fmt::Write as _;
use std::path::Path;

use csvmasr_core::eval::{LayerAccuracy, PromptSweepResult, TwoHotEntry, WerReport};
use csvmasr_core::routing::RoutingVariant;
use csvmasr_core::trainer::EpochLog;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Language column value for corpus-wide rows.
pub const ALL_LANGUAGES: &str = "all";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerRow {
    pub variant: String,
    pub prompt: String,
    pub decode_mode: String,
    pub language: String,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcaRow {
    pub variant: String,
    pub layer: usize,
    pub language: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCsvRow {
    pub variant: String,
    pub language: usize,
    pub k: usize,
    pub mean_wer: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoHotRow {
    pub variant: String,
    pub decode_mode: String,
    pub ground_truth: usize,
    pub added: usize,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub ctc: f64,
    pub att: f64,
    pub lang: f64,
    pub val_token_acc: f64,
    pub val_lang_acc: Option<f64>,
}

impl From<&EpochLog> for TrainLogRow {
    fn from(e: &EpochLog) -> Self {
        Self {
            epoch: e.epoch,
            train_loss: e.train_loss,
            ctc: e.ctc,
            att: e.att,
            lang: e.lang,
            val_token_acc: e.val_token_acc,
            val_lang_acc: e.val_lang_acc,
        }
    }
}

pub fn wer_rows(report: &WerReport) -> Vec<WerRow> {
    let row = |language: String, wer| WerRow {
        variant: report.variant.name().into(),
        prompt: report.prompt.descriptor(),
        decode_mode: report.mode.name().into(),
        language,
        wer,
    };
    report
        .per_language
        .iter()
        .map(|l| row(l.language.to_string(), l.wer))
        .chain(std::iter::once(row(ALL_LANGUAGES.into(), report.aggregate)))
        .collect()
}

pub fn lca_rows(variant: RoutingVariant, layers: &[LayerAccuracy]) -> Vec<LcaRow> {
    layers
        .iter()
        .flat_map(|l| {
            let row = |language: String, accuracy| LcaRow {
                variant: variant.name().into(),
                layer: l.layer,
                language,
                accuracy,
            };
            l.per_language
                .iter()
                .map(move |&(lang, acc)| row(lang.to_string(), acc))
                .chain(std::iter::once(row(ALL_LANGUAGES.into(), l.overall)))
        })
        .collect()
}

pub fn sweep_rows(sweep: &PromptSweepResult) -> Vec<SweepCsvRow> {
    sweep
        .rows
        .iter()
        .map(|r| SweepCsvRow {
            variant: sweep.variant.name().into(),
            language: sweep.language,
            k: r.k,
            mean_wer: r.mean_wer,
            ci95: r.ci95,
        })
        .collect()
}

pub fn two_hot_rows(variant: RoutingVariant, mode: &str, entries: &[TwoHotEntry]) -> Vec<TwoHotRow> {
    entries
        .iter()
        .map(|e| TwoHotRow {
            variant: variant.name().into(),
            decode_mode: mode.into(),
            ground_truth: e.ground_truth,
            added: e.added,
            wer: e.wer,
        })
        .collect()
}

pub const WER_HEADER: [&str; 5] = ["variant", "prompt", "decode_mode", "language", "wer"];
pub const LCA_HEADER: [&str; 4] = ["variant", "layer", "language", "accuracy"];
pub const SWEEP_HEADER: [&str; 5] = ["variant", "language", "k", "mean_wer", "ci95"];
pub const TWO_HOT_HEADER: [&str; 5] = ["variant", "decode_mode", "ground_truth", "added", "wer"];
pub const TRAIN_LOG_HEADER: [&str; 7] = ["epoch", "train_loss", "ctc", "att", "lang", "val_token_acc", "val_lang_acc"];

/// Writes the header even when there are no rows.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of mean WER against the number of extra prompted languages,
/// one series per sweep, with 95% interval whiskers.
pub fn sweep_svg(sweeps: &[PromptSweepResult]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 160.0, 30.0, 50.0);
    let max_k = sweeps.iter().flat_map(|s| s.rows.iter().map(|r| r.k)).max().unwrap_or(0).max(1) as f64;
    let hi = sweeps.iter().flat_map(|s| s.rows.iter().map(|r| r.mean_wer + r.ci95)).fold(0.0f64, f64::max);
    let y_max = if hi > 0.0 { hi * 1.1 } else { 1.0 };
    let px = |k: f64| left + k / max_k * (w - left - right);
    let py = |v: f64| h - bottom - v / y_max * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = left,
        t = top,
        b = h - bottom,
        r = w - right
    );
    for k in 0..=max_k as usize {
        let x = px(k as f64);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{k}</text>"#, h - bottom + 18.0);
    }
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
        let _ = writeln!(svg, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - right);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">additional prompted languages</text>"#,
        (left + w - right) / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">WER (%)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, s) in sweeps.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> =
            s.rows.iter().map(|r| format!("{:.1},{:.1}", px(r.k as f64), py(r.mean_wer))).collect();
        let _ =
            writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" "));
        for r in &s.rows {
            let x = px(r.k as f64);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                py(r.mean_wer - r.ci95),
                py(r.mean_wer + r.ci95),
                py(r.mean_wer)
            );
        }
        let ly = top + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{} L{} {}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            s.variant.name(),
            s.language,
            s.mode.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}
