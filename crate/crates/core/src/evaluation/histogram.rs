//! Shared-bin score histograms with CSV and SVG output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest positive edge used on a log axis.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges.
    pub edges: Vec<f64>,
    pub log_x: bool,
    pub groups: Vec<String>,
    /// `counts[g][b]`
    pub counts: Vec<Vec<usize>>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi");
        for g in &self.groups {
            out.push(',');
            out.push_str(g);
        }
        out.push('\n');
        for b in 0..self.bins() {
            let _ = write!(out, "{},{}", self.edges[b], self.edges[b + 1]);
            for c in &self.counts {
                let _ = write!(out, ",{}", c[b]);
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Step plot of per-group densities (counts divided by group size).
    pub fn to_svg(&self, title: &str) -> String {
        const W: f64 = 640.0;
        const H: f64 = 360.0;
        const PAD: f64 = 48.0;
        const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
        let xmap = |v: f64| -> f64 {
            let (lo, hi, v) = if self.log_x {
                (self.edges[0].ln(), self.edges[self.bins()].ln(), v.ln())
            } else {
                (self.edges[0], self.edges[self.bins()], v)
            };
            let span = if hi > lo { hi - lo } else { 1.0 };
            PAD + (v - lo) / span * (W - 2.0 * PAD)
        };
        let dens: Vec<Vec<f64>> = self
            .counts
            .iter()
            .map(|c| {
                let n = c.iter().sum::<usize>().max(1) as f64;
                c.iter().map(|&k| k as f64 / n).collect()
            })
            .collect();
        let top = dens.iter().flatten().copied().fold(0.0, f64::max).max(1e-12);
        let ymap = |d: f64| H - PAD - d / top * (H - 2.0 * PAD);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            s,
            r#"<path d="M{PAD},{PAD} V{y} H{x}" stroke="black" fill="none"/>"#,
            y = H - PAD,
            x = W - PAD
        );
        for (label, v) in [("lo", self.edges[0]), ("hi", self.edges[self.bins()])] {
            let anchor = if label == "lo" { "start" } else { "end" };
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{v:.3e}</text>"#,
                xmap(v),
                H - PAD + 16.0
            );
        }
        for (g, d) in dens.iter().enumerate() {
            let color = COLORS[g % COLORS.len()];
            let mut path = format!("M{:.2},{:.2}", xmap(self.edges[0]), ymap(0.0));
            for (b, &v) in d.iter().enumerate() {
                let _ = write!(
                    path,
                    " V{:.2} H{:.2}",
                    ymap(v),
                    xmap(self.edges[b + 1])
                );
            }
            let _ = write!(path, " V{:.2}", ymap(0.0));
            let _ = writeln!(s, r#"<path d="{path}" stroke="{color}" fill="none" stroke-width="1.5"/>"#);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}" font-family="sans-serif" font-size="12">{}</text>"#,
                W - PAD - 140.0,
                PAD + 16.0 * g as f64,
                escape(&self.groups[g])
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path, title: &str) -> Result<()> {
        std::fs::write(path, self.to_svg(title)).map_err(|e| Error::io(path, e))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Bins every group on one shared grid spanning all scores. With `log_x`
/// the edges are geometric and scores at or below the first edge land in
/// the first bin. All-equal scores give a single bin.
pub fn score_histogram(groups: &[(&str, &[f64])], bins: usize, log_x: bool) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    if groups.is_empty() || groups.iter().any(|(_, s)| s.is_empty()) {
        return Err(Error::invalid("histogram groups must be nonempty"));
    }
    let all = groups.iter().flat_map(|(_, s)| s.iter().copied());
    if all.clone().any(|v| !v.is_finite()) {
        return Err(Error::invalid("histogram scores must be finite"));
    }
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.clone().fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = if hi == lo {
        vec![lo, hi]
    } else if log_x {
        let min_pos = all.filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
        let first = if min_pos.is_finite() { min_pos.max(LOG_FLOOR) } else { LOG_FLOOR };
        let last = hi.max(first * (1.0 + 1e-9));
        let (a, b) = (first.ln(), last.ln());
        (0..=bins).map(|i| (a + (b - a) * i as f64 / bins as f64).exp()).collect()
    } else {
        (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
    };
    let nb = edges.len() - 1;
    let locate = |v: f64| -> usize {
        // right-closed last bin, below-range values in the first bin
        let i = edges.partition_point(|&e| e <= v);
        i.saturating_sub(1).min(nb - 1)
    };
    let counts = groups
        .iter()
        .map(|(_, s)| {
            let mut c = vec![0usize; nb];
            for &v in s.iter() {
                c[locate(v)] += 1;
            }
            c
        })
        .collect();
    Ok(Histogram {
        edges,
        log_x,
        groups: groups.iter().map(|(g, _)| g.to_string()).collect(),
        counts,
    })
}
