//! CSV and static SVG report writers.

use std::fmt::Write as _;

use super::{ClusterMetrics, ConfusionMatrix, MetricsRow};
use crate::trainer::{EpochRecord, SystemId};

pub const NMI_NOTE: &str = "# nmi = I(cluster;label) / max(H(cluster), H(label)), bits";

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("system,params,best_epoch,train_mse,val_mse,test_mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.system, r.params, r.best_epoch, r.train_mse, r.val_mse, r.test_mse);
    }
    out
}

/// Per-label usage rows followed by one summary row per system.
pub fn cluster_report_csv(systems: &[(SystemId, ClusterMetrics)]) -> String {
    let mut out = format!("{NMI_NOTE}\nsystem,label,indices_used,entropy_bits\n");
    for (id, m) in systems {
        for u in &m.per_label {
            let _ = writeln!(out, "{id},{},{},{}", u.label, u.indices_used, u.entropy_bits);
        }
    }
    out.push_str("system,total_indices,purity,nmi\n");
    for (id, m) in systems {
        let _ = writeln!(out, "{id},{},{},{}", m.total_indices, m.purity, m.nmi);
    }
    out
}

pub fn confusion_csv(m: &ConfusionMatrix) -> String {
    let k = m.size();
    let mut out = String::from("prompted");
    for j in 0..k {
        let _ = write!(out, ",classified_{j}");
    }
    out.push('\n');
    for (i, row) in m.rows.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub system: SystemId,
    pub id: usize,
    pub label: usize,
    pub z: Vec<f64>,
    pub pc: [f64; 2],
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let d = rows.iter().map(|r| r.z.len()).max().unwrap_or(0);
    let mut out = String::from("system,id,label");
    for i in 1..=d {
        let _ = write!(out, ",z_{i}");
    }
    out.push_str(",pc1,pc2\n");
    for r in rows {
        let _ = write!(out, "{},{},{}", r.system, r.id, r.label);
        for i in 0..d {
            match r.z.get(i) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        let _ = writeln!(out, ",{},{}", r.pc[0], r.pc[1]);
    }
    out
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / span(self.xr) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / span(self.yr) * self.h
    }

    fn axes(&self, out: &mut String, title: &str) {
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
            self.x0, self.y0, self.w, self.h
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="12">{title}</text>"#, self.x0, self.y0 - 6.0);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="9">{:.3}</text><text x="{:.1}" y="{:.1}" font-size="9">{:.3}</text>"#,
            self.x0 - 40.0,
            self.y0 + 9.0,
            self.yr.1,
            self.x0 - 40.0,
            self.y0 + self.h,
            self.yr.0
        );
    }
}

fn span(r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        r.1 - r.0
    } else {
        1.0
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn svg_open(w: usize, h: usize) -> String {
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\">\n")
}

/// Validation MSE against epoch, one line per system.
pub fn learning_curves_svg(curves: &[(SystemId, Vec<EpochRecord>)]) -> String {
    let mut out = svg_open(640, 400);
    let epochs = curves.iter().flat_map(|(_, h)| h.iter().map(|r| r.epoch as f64));
    let (_, emax) = range(epochs);
    let yr = range(curves.iter().flat_map(|(_, h)| h.iter().map(|r| r.val_mse)));
    if !yr.0.is_finite() {
        out.push_str("</svg>\n");
        return out;
    }
    let frame = Frame { x0: 60.0, y0: 30.0, w: 460.0, h: 320.0, xr: (1.0, emax.max(2.0)), yr };
    frame.axes(&mut out, "validation MSE per frame");
    for (i, (id, h)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            h.iter().map(|r| format!("{:.2},{:.2}", frame.px(r.epoch as f64), frame.py(r.val_mse))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="530" y="{:.1}" font-size="11" fill="{color}">{id}</text>"#,
            40.0 + 16.0 * i as f64
        );
    }
    let _ = writeln!(out, r#"<text x="270" y="385" font-size="11">epoch (1 to {emax})</text>"#);
    out.push_str("</svg>\n");
    out
}

/// One panel per system of projected latents coloured by label.
pub fn scatter_svg(rows: &[ScatterRow]) -> String {
    let mut systems: Vec<SystemId> = rows.iter().map(|r| r.system).collect();
    systems.dedup();
    let panel = 300.0;
    let mut out = svg_open((panel as usize + 20) * systems.len().max(1) + 40, panel as usize + 60);
    for (p, id) in systems.iter().enumerate() {
        let pts: Vec<&ScatterRow> = rows.iter().filter(|r| r.system == *id).collect();
        let frame = Frame {
            x0: 50.0 + p as f64 * (panel + 20.0),
            y0: 30.0,
            w: panel - 40.0,
            h: panel - 40.0,
            xr: range(pts.iter().map(|r| r.pc[0])),
            yr: range(pts.iter().map(|r| r.pc[1])),
        };
        frame.axes(&mut out, &id.to_string());
        for r in pts {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"#,
                frame.px(r.pc[0]),
                frame.py(r.pc[1]),
                PALETTE[r.label % PALETTE.len()]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
