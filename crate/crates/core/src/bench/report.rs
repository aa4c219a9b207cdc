use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const PSNR_CONVENTION: &str = "D1 point-to-point, peak 3*(2^depth-1)^2, max of both directions, 999 = identical";

/// One (instance, config) measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub instance: String,
    pub corpus: String,
    pub config: String,
    pub depth: u8,
    pub s_loss: u8,
    pub points: usize,
    pub total_bits: u64,
    pub weight_bits: u64,
    pub geometry_bits: u64,
    pub header_bits: u64,
    /// `sum -log2 q` of the geometry stream; coded bits never exceed it by
    /// more than 64 per stream.
    pub ideal_geometry_bits: f64,
    pub bpp: f64,
    pub anchor_bpp: f64,
    pub cr_gain: f64,
    pub psnr: f64,
    pub iaft_accepted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub encode_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decode_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub config: String,
    pub instances: usize,
    /// Total bits over total points.
    pub bpp: f64,
    pub mean_cr_gain: f64,
    pub mean_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub anchor: String,
    pub psnr_convention: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Per-config aggregates in first-appearance order.
    pub fn summary(&self) -> Vec<ConfigSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.config.as_str()) {
                order.push(&r.config);
            }
        }
        order
            .into_iter()
            .map(|cfg| {
                let rows: Vec<&EvalRow> = self.rows.iter().filter(|r| r.config == cfg).collect();
                let n = rows.len() as f64;
                let bits: u64 = rows.iter().map(|r| r.total_bits).sum();
                let points: usize = rows.iter().map(|r| r.points).sum();
                ConfigSummary {
                    config: cfg.to_string(),
                    instances: rows.len(),
                    bpp: bits as f64 / points.max(1) as f64,
                    mean_cr_gain: rows.iter().map(|r| r.cr_gain).sum::<f64>() / n,
                    mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
                }
            })
            .collect()
    }

    /// Aligned text table followed by per-config totals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# anchor: {}", self.anchor);
        let _ = writeln!(s, "# psnr: {}", PSNR_CONVENTION);
        let timed = self.rows.iter().any(|r| r.encode_ms.is_some());
        let mut head = format!(
            "{:<24} {:<16} {:>6} {:>8} {:>10} {:>10} {:>10} {:>9} {:>9} {:>8}",
            "instance", "config", "s_loss", "points", "weights_b", "geom_b", "header_b", "bpp", "cr_gain%", "psnr"
        );
        if timed {
            head.push_str(&format!(" {:>9} {:>9}", "enc_ms", "dec_ms"));
        }
        let _ = writeln!(s, "{head}");
        for r in &self.rows {
            let _ = write!(
                s,
                "{:<24} {:<16} {:>6} {:>8} {:>10} {:>10} {:>10} {:>9.4} {:>9.2} {:>8.2}",
                r.instance, r.config, r.s_loss, r.points, r.weight_bits, r.geometry_bits, r.header_bits, r.bpp, r.cr_gain, r.psnr
            );
            if timed {
                let _ = write!(s, " {:>9.1} {:>9.1}", r.encode_ms.unwrap_or(0.0), r.decode_ms.unwrap_or(0.0));
            }
            s.push('\n');
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>9} {:>9} {:>8}",
            "config", "instances", "bpp", "cr_gain%", "psnr"
        );
        for c in self.summary() {
            let _ = writeln!(
                s,
                "{:<16} {:>9} {:>9.4} {:>9.2} {:>8.2}",
                c.config, c.instances, c.bpp, c.mean_cr_gain, c.mean_psnr
            );
        }
        s
    }

    /// JSON document with the rows and the per-config summary.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            #[serde(flatten)]
            report: &'a EvalReport,
            summary: Vec<ConfigSummary>,
        }
        serde_json::to_string_pretty(&Doc {
            report: self,
            summary: self.summary(),
        })
        .expect("report serializes")
    }
}

/// One rate-distortion point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub instance: String,
    pub s_loss: u8,
    pub bpp: f64,
    pub psnr: f64,
}

pub fn rd_points(report: &EvalReport) -> Vec<RdPoint> {
    report
        .rows
        .iter()
        .map(|r| RdPoint {
            instance: r.instance.clone(),
            s_loss: r.s_loss,
            bpp: r.bpp,
            psnr: r.psnr,
        })
        .collect()
}

/// Adjacent `s_loss` pairs per instance, and how many of them have both bpp
/// and PSNR non-increasing as `s_loss` goes down.
pub fn rd_monotone_pairs(points: &[RdPoint]) -> (usize, usize) {
    let mut instances: Vec<&str> = points.iter().map(|p| p.instance.as_str()).collect();
    instances.sort_unstable();
    instances.dedup();
    let (mut good, mut total) = (0, 0);
    for inst in instances {
        let mut pts: Vec<&RdPoint> = points.iter().filter(|p| p.instance == inst).collect();
        pts.sort_by_key(|p| p.s_loss);
        for w in pts.windows(2) {
            total += 1;
            if w[0].bpp <= w[1].bpp && w[0].psnr <= w[1].psnr {
                good += 1;
            }
        }
    }
    (good, total)
}
