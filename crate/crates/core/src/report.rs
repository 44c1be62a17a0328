//! Result tables and learning curves.
//!
//! Evaluation reports are stored in a long tab-separated layout, one row per
//! accent or pooled group, so several reports concatenate into one table
//! that [`load_reports`] reads back.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::decode_eval::{AccentScore, EditCounts, EvalReport};
use crate::error::{Error, Result};
use crate::training::parse_log_line;

pub const TABLE_HEADER: &str = "section\tsystem\trow\tname\tutterances\tref_len\tsub\tins\tdel\trate";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    TextTable,
    Delimited,
    Plot,
}

impl ReportFormat {
    pub fn name(self) -> &'static str {
        match self {
            ReportFormat::TextTable => "text-table",
            ReportFormat::Delimited => "delimited",
            ReportFormat::Plot => "plot",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text-table" | "text" => Ok(ReportFormat::TextTable),
            "delimited" | "tsv" => Ok(ReportFormat::Delimited),
            "plot" => Ok(ReportFormat::Plot),
            _ => Err(Error::validation("format", format!("unknown report format `{s}`"))),
        }
    }
}

/// A report with the table section it belongs to (e.g. `w/o PL`).
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEntry {
    pub section: String,
    pub report: EvalReport,
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

fn count_row(out: &mut String, e: &ReportEntry, row: &str, name: &str, utts: usize, c: &EditCounts) {
    let _ = writeln!(
        out,
        "{}\t{}\t{row}\t{}\t{utts}\t{}\t{}\t{}\t{}\t{:.6}",
        clean(&e.section),
        clean(&e.report.system),
        clean(name),
        c.ref_len,
        c.sub,
        c.ins,
        c.del,
        c.rate()
    );
}

fn meta_row(out: &mut String, e: &ReportEntry, row: &str, name: &str, utts: impl std::fmt::Display) {
    let _ = writeln!(
        out,
        "{}\t{}\t{row}\t{}\t{utts}\t\t\t\t\t",
        clean(&e.section),
        clean(&e.report.system),
        clean(name)
    );
}

/// The delimited table for `entries`, header included.
pub fn render_delimited(entries: &[ReportEntry]) -> String {
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push('\n');
    for e in entries {
        let r = &e.report;
        meta_row(&mut out, e, "units", &r.units, "");
        for &a in &r.labeled_accents {
            meta_row(&mut out, e, "labeled_accent", &a.to_string(), "");
        }
        for a in &r.accents {
            count_row(&mut out, e, "accent", &format!("{}:{}", a.accent, a.name), a.utterances, &a.counts);
        }
        let total: usize = r.accents.iter().map(|a| a.utterances).sum();
        count_row(&mut out, e, "overall", "Ave.", total, &r.overall);
        for (row, g) in [("labeled", &r.labeled), ("rest", &r.rest)] {
            if let Some(c) = g {
                let n = r
                    .accents
                    .iter()
                    .filter(|a| r.labeled_accents.contains(&a.accent) == (row == "labeled"))
                    .map(|a| a.utterances)
                    .sum();
                count_row(&mut out, e, row, row, n, c);
            }
        }
        meta_row(&mut out, e, "partial", "", r.partial);
        for w in &r.warnings {
            meta_row(&mut out, e, "warning", w, "");
        }
    }
    out
}

/// Reads a delimited table back. Rate columns are recomputed, not trusted.
pub fn parse_delimited(text: &str, origin: &str) -> Result<Vec<ReportEntry>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TABLE_HEADER => {}
        _ => return Err(err(1, "missing report table header".into())),
    }
    let mut entries: Vec<ReportEntry> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 10 {
            return Err(err(n, format!("expected 10 columns, found {}", f.len())));
        }
        let (section, system, row, name) = (f[0], f[1], f[2], f[3]);
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(n, format!("bad {what} `{s}`")));
        let counts = || -> Result<EditCounts> {
            Ok(EditCounts {
                ref_len: num(f[5], "ref_len")?,
                sub: num(f[6], "sub")?,
                ins: num(f[7], "ins")?,
                del: num(f[8], "del")?,
            })
        };
        // A `units` row opens each report.
        if row == "units" {
            entries.push(ReportEntry {
                section: section.to_string(),
                report: EvalReport {
                    system: system.to_string(),
                    units: name.to_string(),
                    accents: Vec::new(),
                    overall: EditCounts::default(),
                    labeled_accents: Vec::new(),
                    labeled: None,
                    rest: None,
                    partial: 0,
                    warnings: Vec::new(),
                },
            });
            continue;
        }
        let Some(e) = entries.last_mut() else {
            return Err(err(n, "row before any `units` row".into()));
        };
        if e.section != section || e.report.system != system {
            return Err(err(n, "row does not belong to the current report".into()));
        }
        let r = &mut e.report;
        match row {
            "labeled_accent" => r.labeled_accents.push(num(name, "accent index")?),
            "accent" => {
                let (idx, nm) = name
                    .split_once(':')
                    .ok_or_else(|| err(n, format!("accent name `{name}` lacks an index")))?;
                r.accents.push(AccentScore {
                    accent: num(idx, "accent index")?,
                    name: nm.to_string(),
                    utterances: num(f[4], "utterances")?,
                    counts: counts()?,
                });
            }
            "overall" => r.overall = counts()?,
            "labeled" => r.labeled = Some(counts()?),
            "rest" => r.rest = Some(counts()?),
            "partial" => r.partial = num(f[4], "partial")?,
            "warning" => r.warnings.push(name.to_string()),
            _ => return Err(err(n, format!("unknown row kind `{row}`"))),
        }
    }
    Ok(entries)
}

pub fn load_reports(path: &Path) -> Result<Vec<ReportEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_delimited(&text, &path.display().to_string())
}

fn pct(c: &EditCounts) -> String {
    let r = c.rate();
    if r.is_finite() {
        format!("{:.1}", 100.0 * r)
    } else {
        "-".to_string()
    }
}

/// Fixed-width table: one row per system, a column per accent, then the
/// pooled average and, when any report defines groups, labeled and rest
/// columns. Sections are printed in first-seen order. Rates in percent.
pub fn render_text_table(entries: &[ReportEntry]) -> Result<String> {
    if entries.is_empty() {
        return Err(Error::validation("reports", "at least one report is needed"));
    }
    let mut accents: Vec<(usize, String)> = Vec::new();
    for e in entries {
        for a in &e.report.accents {
            if !accents.iter().any(|(i, _)| *i == a.accent) {
                accents.push((a.accent, a.name.clone()));
            }
        }
    }
    accents.sort();
    let grouped = entries.iter().any(|e| e.report.labeled.is_some() && e.report.rest.is_some());
    let mut header = vec!["System".to_string()];
    header.extend(accents.iter().map(|(_, n)| n.clone()));
    header.push("Ave.".into());
    if grouped {
        header.push("Labeled".into());
        header.push("Rest".into());
    }
    let mut sections: Vec<&str> = Vec::new();
    for e in entries {
        if !sections.contains(&e.section.as_str()) {
            sections.push(&e.section);
        }
    }
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    for (si, s) in sections.iter().enumerate() {
        for e in entries.iter().filter(|e| e.section == *s) {
            let r = &e.report;
            let mut row = vec![r.system.clone()];
            for (idx, _) in &accents {
                row.push(
                    r.accents
                        .iter()
                        .find(|a| a.accent == *idx)
                        .map_or_else(|| "-".to_string(), |a| pct(&a.counts)),
                );
            }
            row.push(pct(&r.overall));
            if grouped {
                for g in [&r.labeled, &r.rest] {
                    row.push(g.as_ref().map_or_else(|| "-".to_string(), pct));
                }
            }
            rows.push((si, row));
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|(_, r)| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));
    let mut out = String::new();
    let _ = writeln!(out, "Token error rate (%)");
    let _ = writeln!(out, "{}", line(&header));
    let _ = writeln!(out, "{rule}");
    let mut current = None;
    for (si, row) in &rows {
        if current != Some(*si) {
            current = Some(*si);
            if !sections[*si].is_empty() {
                let _ = writeln!(out, "[{}]", sections[*si]);
            }
        }
        let _ = writeln!(out, "{}", line(row));
    }
    for e in entries {
        for w in &e.report.warnings {
            let _ = writeln!(out, "note ({}): {w}", e.report.system);
        }
    }
    Ok(out)
}

/// One validation record of a training log.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub epoch: u64,
    pub metric: String,
    /// The value exactly as written in the log.
    pub value: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub run: String,
    pub points: Vec<CurvePoint>,
}

/// Extracts the `phase=valid` records of a training log.
pub fn curve_from_log(run: &str, log: &str) -> Result<Curve> {
    let mut points = Vec::new();
    for line in log.lines().filter(|l| !l.is_empty()) {
        let fields = parse_log_line(line)?;
        let get = |k: &str| fields.iter().find(|(f, _)| f == k).map(|(_, v)| v.as_str());
        if get("phase") != Some("valid") {
            continue;
        }
        let num = |k: &str| -> Result<u64> {
            get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("log record without `{k}`: {line}")))
        };
        let (step, epoch) = (num("step")?, num("epoch")?);
        for (k, v) in &fields {
            if !matches!(k.as_str(), "step" | "epoch" | "phase") {
                points.push(CurvePoint {
                    step,
                    epoch,
                    metric: k.clone(),
                    value: v.clone(),
                });
            }
        }
    }
    Ok(Curve {
        run: run.to_string(),
        points,
    })
}

pub const CURVE_HEADER: &str = "run\tstep\tepoch\tmetric\tvalue";

pub fn render_curves(curves: &[Curve]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for c in curves {
        for p in &c.points {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", clean(&c.run), p.step, p.epoch, p.metric, p.value);
        }
    }
    out
}

pub fn parse_curves(text: &str, origin: &str) -> Result<Vec<Curve>> {
    let err = |line: usize, reason: String| Error::Parse {
        path: origin.to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CURVE_HEADER => {}
        _ => return Err(err(1, "missing curve header".into())),
    }
    let mut curves: Vec<Curve> = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(err(i + 1, format!("expected 5 columns, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| err(i + 1, format!("bad number `{s}`")));
        let p = CurvePoint {
            step: num(f[1])?,
            epoch: num(f[2])?,
            metric: f[3].to_string(),
            value: f[4].to_string(),
        };
        match curves.last_mut() {
            Some(c) if c.run == f[0] => c.points.push(p),
            _ => curves.push(Curve {
                run: f[0].to_string(),
                points: vec![p],
            }),
        }
    }
    Ok(curves)
}

/// A minimal line chart of `metric` against step, one polyline per run.
pub fn render_svg(curves: &[Curve], metric: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let series: Vec<(&str, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|c| {
            let pts = c
                .points
                .iter()
                .filter(|p| p.metric == metric)
                .filter_map(|p| p.value.parse::<f64>().ok().map(|v| (p.step as f64, v)))
                .collect();
            (c.run.as_str(), pts)
        })
        .collect();
    let xmax = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.0))
        .fold(1.0f64, f64::max);
    let (lo, hi) = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let sx = |x: f64| M + x / xmax * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - lo) / (hi - lo) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">{metric}</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" text-anchor="end">{lo:.3}</text>"#, H - M + 4.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" text-anchor="end">{hi:.3}</text>"#, M + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{xmax}</text>"#, W - M, H - M + 16.0);
    for (k, (run, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if !pts.is_empty() {
            let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - M - 100.0,
            M + 16.0 * (k as f64 + 1.0),
            xml_escape(run)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Files written by [`emit_report`], by name.
pub type ReportFiles = Vec<(&'static str, String)>;

/// Renders the requested formats. `plot` needs curves and yields the curve
/// table plus an SVG of validation token accuracy.
pub fn emit_report(entries: &[ReportEntry], curves: &[Curve], formats: &[ReportFormat]) -> Result<ReportFiles> {
    if entries.is_empty() {
        return Err(Error::validation("reports", "at least one report is needed"));
    }
    let mut out = Vec::new();
    for f in formats {
        match f {
            ReportFormat::TextTable => out.push(("table.txt", render_text_table(entries)?)),
            ReportFormat::Delimited => out.push(("table.tsv", render_delimited(entries))),
            ReportFormat::Plot => {
                out.push(("curves.tsv", render_curves(curves)));
                out.push(("curves.svg", render_svg(curves, "token_acc")));
            }
        }
    }
    Ok(out)
}

pub fn parse_formats(list: &str) -> Result<Vec<ReportFormat>> {
    let v: Vec<ReportFormat> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if v.is_empty() {
        return Err(Error::validation("format", "no report format given"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(ref_len: usize, sub: usize, ins: usize, del: usize) -> EditCounts {
        EditCounts { sub, ins, del, ref_len }
    }

    fn report(system: &str, groups: bool) -> EvalReport {
        let accents = vec![
            AccentScore {
                accent: 0,
                name: "A0".into(),
                utterances: 4,
                counts: counts(20, 1, 0, 1),
            },
            AccentScore {
                accent: 2,
                name: "A2".into(),
                utterances: 3,
                counts: counts(15, 2, 1, 0),
            },
        ];
        let mut overall = EditCounts::default();
        accents.iter().for_each(|a| overall.add(&a.counts));
        EvalReport {
            system: system.into(),
            units: crate::decode_eval::UNITS.into(),
            overall,
            labeled_accents: if groups { vec![0] } else { vec![] },
            labeled: groups.then(|| accents[0].counts),
            rest: groups.then(|| accents[1].counts),
            accents,
            partial: 1,
            warnings: vec!["accent `A1` has no test utterances; omitted".into()],
        }
    }

    #[test]
    fn delimited_round_trip() {
        let entries = vec![
            ReportEntry {
                section: "w/o PL".into(),
                report: report("B1", true),
            },
            ReportEntry {
                section: "w/ PL".into(),
                report: report("F2", false),
            },
        ];
        let text = render_delimited(&entries);
        assert_eq!(parse_delimited(&text, "t").unwrap(), entries);
    }

    #[test]
    fn single_report_gives_one_table_row() {
        let e = [ReportEntry {
            section: String::new(),
            report: report("F1", false),
        }];
        let t = render_text_table(&e).unwrap();
        let rows: Vec<&str> = t.lines().filter(|l| l.starts_with("F1")).collect();
        assert_eq!(rows.len(), 1);
        // 2/20, 3/15, then 5 errors over 35 reference tokens.
        let cells: Vec<&str> = rows[0].split_whitespace().collect();
        assert_eq!(cells, ["F1", "10.0", "20.0", "14.3"]);
        assert!(render_text_table(&[]).is_err());
        assert!(emit_report(&[], &[], &[ReportFormat::TextTable]).is_err());
    }

    #[test]
    fn sections_and_group_columns() {
        let e = [
            ReportEntry {
                section: "w/o PL".into(),
                report: report("B1", true),
            },
            ReportEntry {
                section: "w/ PL".into(),
                report: report("F2", true),
            },
        ];
        let t = render_text_table(&e).unwrap();
        let pos = |s: &str| t.find(s).unwrap();
        assert!(pos("[w/o PL]") < pos("B1") && pos("B1") < pos("[w/ PL]") && pos("[w/ PL]") < pos("F2"));
        assert!(t.contains("Labeled") && t.contains("Rest"));
    }

    #[test]
    fn unknown_format_is_rejected() {
        assert!("html".parse::<ReportFormat>().is_err());
        assert!(parse_formats("text-table, plot").is_ok());
        assert!(parse_formats(" , ").is_err());
    }

    #[test]
    fn malformed_tables_are_rejected() {
        let good = render_delimited(&[ReportEntry {
            section: "s".into(),
            report: report("B1", false),
        }]);
        assert!(parse_delimited("nope", "t").is_err());
        let body: Vec<&str> = good.lines().collect();
        let orphan = format!("{}\n{}", body[0], body[2]);
        assert!(parse_delimited(&orphan, "t").is_err());
        let short = format!("{good}s\tB1\taccent\tA9\n");
        assert!(parse_delimited(&short, "t").is_err());
    }

    #[test]
    fn curves_equal_validation_log_records() {
        let log = "step=1\tepoch=0\tphase=G\tl_g=1.0\n\
                   step=1\tepoch=0\tphase=valid\ttoken_acc=2.5000000000e-1\n\
                   step=2\tepoch=1\tphase=valid\ttoken_acc=5.0000000000e-1\td_ai_acc=1.0e0\n";
        let c = curve_from_log("f1", log).unwrap();
        assert_eq!(c.points.len(), 3);
        assert_eq!(c.points[0].value, "2.5000000000e-1");
        let text = render_curves(&[c.clone()]);
        assert_eq!(parse_curves(&text, "t").unwrap(), vec![c.clone()]);
        let svg = render_svg(&[c], "token_acc");
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
