use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{difficulty_ladder_stats, ed_score, even_ranges, layer_range_totals};
use crate::allocation::{AllocationPlan, ModuleGroup};
use crate::error::Result;

/// ED histogram bins; the last one is closed at 1.
pub const ED_BINS: [&str; 4] = ["[0,0.25)", "[0.25,0.5)", "[0.5,0.75)", "[0.75,1.0]"];

pub fn ed_bin(score: f64) -> usize {
    match score {
        s if s < 0.25 => 0,
        s if s < 0.5 => 1,
        s if s < 0.75 => 2,
        _ => 3,
    }
}

/// One scalar produced by an experiment, e.g. eval accuracy of a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetric {
    pub plan: String,
    pub metric: String,
    pub value: f64,
}

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];

/// Writes `ed_bins.csv`, `layer_totals.csv`, `ladder.csv` and `metrics.csv`
/// plus SVG bar and pie charts into `out_dir`. Returns the written paths.
pub fn emit_report(plans: &[(String, AllocationPlan)], metrics: &[ReportMetric], out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let mut ed_counts = Vec::with_capacity(plans.len());
    let path = out_dir.join("ed_bins.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["plan", "bin", "count"])?;
    for (name, plan) in plans {
        let mut counts = [0usize; 4];
        for (_, _, m) in plan.modules() {
            counts[ed_bin(ed_score(&m.ranks)?)] += 1;
        }
        for (bin, c) in ED_BINS.iter().zip(counts) {
            w.write_record([name.as_str(), bin, &c.to_string()])?;
        }
        ed_counts.push((name.clone(), counts));
    }
    w.flush()?;
    written.push(path);

    let mut range_rows = Vec::new();
    let path = out_dir.join("layer_totals.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["plan", "group", "start", "end", "total_rank", "total_experts"])?;
    for (name, plan) in plans {
        let ranges = even_ranges(plan.layers.len(), 4);
        for (group, label) in [(ModuleGroup::Mha, "mha"), (ModuleGroup::Ffn, "ffn")] {
            for t in layer_range_totals(plan, &ranges, group)? {
                w.write_record([
                    name.clone(),
                    label.to_string(),
                    t.start.to_string(),
                    t.end.to_string(),
                    t.total_rank.to_string(),
                    t.total_experts.to_string(),
                ])?;
                range_rows.push((format!("{name} {label} {}-{}", t.start, t.end), t.total_rank as f64));
            }
        }
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("ladder.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["level", "avg_experts", "avg_rank"])?;
    if !plans.is_empty() {
        for row in difficulty_ladder_stats(plans)? {
            w.serialize(row)?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["plan", "metric", "value"])?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    written.push(path);

    let bars: Vec<(String, f64)> = ed_counts
        .iter()
        .flat_map(|(name, c)| ED_BINS.iter().zip(c).map(move |(b, &v)| (format!("{name} {b}"), v as f64)))
        .collect();
    let path = out_dir.join("ed_bins.svg");
    fs::write(&path, bar_chart("Expert diversity bins", &bars))?;
    written.push(path);

    let mut pooled = [0usize; 4];
    for (_, c) in &ed_counts {
        for (p, v) in pooled.iter_mut().zip(c) {
            *p += v;
        }
    }
    let path = out_dir.join("ed_pie.svg");
    fs::write(&path, pie_chart("Expert diversity (all plans)", &ED_BINS, &pooled))?;
    written.push(path);

    let path = out_dir.join("layer_totals.svg");
    fs::write(&path, bar_chart("Total rank per layer range", &range_rows))?;
    written.push(path);

    Ok(written)
}

fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let row_h = 18.0;
    let label_w = 220.0;
    let plot_w = 360.0;
    let height = 40.0 + row_h * bars.len() as f64;
    let max = bars.iter().map(|b| b.1).fold(0.0, f64::max).max(1e-12);
    let mut s = svg_open(label_w + plot_w + 60.0, height, title);
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = 30.0 + row_h * i as f64;
        let w = plot_w * v / max;
        let _ = write!(
            s,
            r#"<text x="{x}" y="{ty}" font-size="11" text-anchor="end">{label}</text><rect x="{rx}" y="{y}" width="{w:.2}" height="{h}" fill="{c}"/><text x="{vx:.2}" y="{ty}" font-size="11">{v}</text>"#,
            x = label_w - 6.0,
            ty = y + 12.0,
            label = escape(label),
            rx = label_w,
            h = row_h - 4.0,
            c = PALETTE[i % PALETTE.len()],
            vx = label_w + w + 4.0,
        );
        s.push('\n');
    }
    s.push_str("</svg>\n");
    s
}

fn pie_chart(title: &str, labels: &[&str], counts: &[usize]) -> String {
    let (cx, cy, r) = (130.0, 150.0, 100.0);
    let total: usize = counts.iter().sum();
    let mut s = svg_open(420.0, 280.0, title);
    if total == 0 {
        let _ = writeln!(s, r##"<circle cx="{cx}" cy="{cy}" r="{r}" fill="#dddddd"/>"##);
    }
    let mut angle = -std::f64::consts::FRAC_PI_2;
    for (i, (&label, &c)) in labels.iter().zip(counts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c > 0 {
            let sweep = std::f64::consts::TAU * c as f64 / total as f64;
            if c == total {
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="{r}" fill="{color}"/>"#);
            } else {
                let (x0, y0) = (cx + r * angle.cos(), cy + r * angle.sin());
                let (x1, y1) = (cx + r * (angle + sweep).cos(), cy + r * (angle + sweep).sin());
                let large = u8::from(sweep > std::f64::consts::PI);
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx},{cy} L{x0:.3},{y0:.3} A{r},{r} 0 {large} 1 {x1:.3},{y1:.3} Z" fill="{color}"/>"#
                );
            }
            angle += sweep;
        }
        let ly = 60.0 + 22.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="260" y="{ry}" width="12" height="12" fill="{color}"/><text x="278" y="{ly}" font-size="12">{} ({c})</text>"#,
            escape(label),
            ry = ly - 10.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(width: f64, height: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\">\n<text x=\"10\" y=\"18\" font-size=\"14\">{}</text>\n",
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{uniform_allocation, PlanShape, Target};

    #[test]
    fn bins_cover_unit_interval() {
        assert_eq!(ed_bin(0.2), 0);
        assert_eq!(ed_bin(0.25), 1);
        assert_eq!(ed_bin(0.74), 2);
        assert_eq!(ed_bin(1.0), 3);
    }

    #[test]
    fn empty_inputs_write_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(&[], &[], dir.path()).unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics, "plan,metric,value\n");
        let ed = fs::read_to_string(dir.path().join("ed_bins.csv")).unwrap();
        assert_eq!(ed, "plan,bin,count\n");
    }

    #[test]
    fn csvs_are_deterministic_and_bins_partition() {
        let shape = PlanShape::new(4, &Target::ALL, 8, 8).unwrap();
        let plans = vec![("uniform".to_string(), uniform_allocation(&shape, 2, 4).unwrap())];
        let metrics = vec![ReportMetric {
            plan: "uniform".into(),
            metric: "accuracy".into(),
            value: 0.5,
        }];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        emit_report(&plans, &metrics, a.path()).unwrap();
        emit_report(&plans, &metrics, b.path()).unwrap();
        for f in ["ed_bins.csv", "layer_totals.csv", "ladder.csv", "metrics.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
        let ed = fs::read_to_string(a.path().join("ed_bins.csv")).unwrap();
        let total: usize = ed.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 28);
    }
}
