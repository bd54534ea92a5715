//! Tab-separated audit tables and the ablation report.
//!
//! Floats are written in shortest round-trip form so a table read back yields
//! the exact values that were written; undefined values are `NA`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cmada_core::history::LossHistory;
use cmada_core::metrics::{EvalReport, Summary};
use cmada_core::selection::CandidateScore;

use crate::error::{format_err, io_err, Result};

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x}"))
}

fn parse_opt(path: &Path, s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| format_err(path, format!("bad number {s:?}")))
}

/// `# key=value ...` provenance line.
fn provenance(pairs: &[(&str, &str)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("# {}\n", body.join(" "))
}

fn parse_provenance(line: &str) -> Vec<(String, String)> {
    line.trim_start_matches('#')
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

pub fn write_history(path: &Path, h: &LossHistory, stage: &str, hash: &str) -> Result<()> {
    let mut s = provenance(&[("stage", stage), ("config_hash", hash)]);
    s.push_str("step\tname\tvalue\n");
    for r in &h.records {
        let _ = writeln!(s, "{}\t{}\t{}", r.step, r.name, r.value);
    }
    fs::write(path, s).map_err(io_err(path))
}

/// `checkpoint id, step, r_c…, diceLoss_c…, validation loss`; excluded ratios are `NA`.
pub fn write_scores(path: &Path, scores: &[CandidateScore], stage: &str, hash: &str) -> Result<()> {
    let mut s = provenance(&[("stage", stage), ("config_hash", hash)]);
    let nr = scores.first().map_or(0, |c| c.ratios.len());
    let nd = scores.first().map_or(0, |c| c.dice_losses.len());
    s.push_str("checkpoint\tstep");
    for c in 1..=nr {
        let _ = write!(s, "\tr_{c}");
    }
    for c in 1..=nd {
        let _ = write!(s, "\tdiceLoss_{c}");
    }
    s.push_str("\tvalidation_loss\n");
    for c in scores {
        let _ = write!(s, "{}\t{}", c.id, c.step);
        for r in &c.ratios {
            let _ = write!(s, "\t{}", opt(*r));
        }
        for d in &c.dice_losses {
            let _ = write!(s, "\t{d}");
        }
        let _ = writeln!(s, "\t{}", c.loss);
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Per-volume scores of one method as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub method: String,
    pub variant: String,
    pub config_hash: String,
    pub classes: Vec<u8>,
    /// `(volume id, class, dice, assd)`.
    pub rows: Vec<(String, u8, f64, Option<f64>)>,
}

impl EvalTable {
    pub fn summaries(&self) -> Vec<(u8, Summary, Summary)> {
        self.classes
            .iter()
            .map(|&c| {
                let rows = self.rows.iter().filter(|r| r.1 == c);
                let dice: Vec<Option<f64>> = rows.clone().map(|r| Some(r.2)).collect();
                let assd: Vec<Option<f64>> = rows.map(|r| r.3).collect();
                (c, Summary::of(&dice), Summary::of(&assd))
            })
            .collect()
    }

    /// Mean over classes of the per-class mean Dice.
    pub fn mean_foreground_dice(&self) -> f64 {
        let m: Vec<f64> = self.summaries().iter().filter_map(|s| s.1.mean).collect();
        m.iter().sum::<f64>() / m.len().max(1) as f64
    }
}

pub fn write_eval(
    path: &Path,
    ids: &[String],
    r: &EvalReport,
    variant: &str,
    hash: &str,
) -> Result<()> {
    let mut s = provenance(&[
        ("stage", "evaluate"),
        ("config_hash", hash),
        ("variant", variant),
        ("method", &r.method),
    ]);
    s.push_str("volume\tclass\tdice\tassd\n");
    for (id, row) in ids.iter().zip(&r.volumes) {
        for (&c, sc) in r.classes.iter().zip(row) {
            let _ = writeln!(s, "{id}\t{c}\t{}\t{}", sc.dice, opt(sc.assd));
        }
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_eval(path: &Path) -> Result<EvalTable> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let prov = parse_provenance(lines.next().unwrap_or_default());
    let get = |k: &str| {
        prov.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| format_err(path, format!("provenance lacks {k}")))
    };
    if get("stage")? != "evaluate" {
        return Err(format_err(path, "not an evaluation table"));
    }
    let mut t = EvalTable {
        method: get("method")?,
        variant: get("variant")?,
        config_hash: get("config_hash")?,
        classes: Vec::new(),
        rows: Vec::new(),
    };
    if lines.next() != Some("volume\tclass\tdice\tassd") {
        return Err(format_err(path, "unexpected column header"));
    }
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let [id, c, d, a] = f[..] else {
            return Err(format_err(path, format!("malformed row {line:?}")));
        };
        let c: u8 = c
            .parse()
            .map_err(|_| format_err(path, format!("bad class {c:?}")))?;
        let d = parse_opt(path, d)?.ok_or_else(|| format_err(path, "dice cannot be NA"))?;
        if !t.classes.contains(&c) {
            t.classes.push(c);
        }
        t.rows.push((id.to_string(), c, d, parse_opt(path, a)?));
    }
    Ok(t)
}

fn class_name(c: u8) -> String {
    match c {
        1 => "VS".into(),
        2 => "Cochlea".into(),
        _ => format!("Class {c}"),
    }
}

fn mean_std(s: &Summary) -> String {
    match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.3}±{sd:.3}"),
        _ => "n/a".into(),
    }
}

/// Aligned text table with one row per method, plus notes on undefined distances.
pub fn render_report(tables: &[EvalTable], hash: &str) -> String {
    let classes: Vec<u8> = tables
        .first()
        .map(|t| t.classes.clone())
        .unwrap_or_default();
    let mut header = vec!["Method".to_string()];
    for &c in &classes {
        header.push(format!("{} Dice", class_name(c)));
        header.push(format!("{} ASSD", class_name(c)));
    }
    header.push("Mean Dice".into());
    let mut rows = vec![header];
    let mut notes = Vec::new();
    for t in tables {
        let mut row = vec![t.method.clone()];
        for (c, dice, assd) in t.summaries() {
            row.push(mean_std(&dice));
            row.push(mean_std(&assd));
            if assd.excluded > 0 {
                notes.push(format!(
                    "{}: {} ASSD excludes {} of {} volumes with an empty mask",
                    t.method,
                    class_name(c),
                    assd.excluded,
                    assd.excluded + assd.count
                ));
            }
        }
        row.push(format!("{:.3}", t.mean_foreground_dice()));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = format!("Target-domain segmentation (config {hash})\n\n");
    for r in &rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
    }
    if !notes.is_empty() {
        s.push('\n');
        for n in notes {
            let _ = writeln!(s, "{n}");
        }
    }
    s
}

/// Full-precision companion of [`render_report`].
pub fn render_report_tsv(tables: &[EvalTable], hash: &str) -> String {
    let mut s = provenance(&[("stage", "report"), ("config_hash", hash)]);
    s.push_str("method\tclass\tdice_mean\tdice_std\tassd_mean\tassd_std\tassd_excluded\n");
    for t in tables {
        for (c, d, a) in t.summaries() {
            let _ = writeln!(
                s,
                "{}\t{c}\t{}\t{}\t{}\t{}\t{}",
                t.method,
                opt(d.mean),
                opt(d.std),
                opt(a.mean),
                opt(a.std),
                a.excluded
            );
        }
    }
    s
}
