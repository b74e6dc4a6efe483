//! Iteration manifests and the report files rendered from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::metrics::VideoQuality;
use super::Layout;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rl::{read_curve, CurvePoint};
use crate::sans;
use crate::worldmodel::WorldModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUCCESS_CSV: &str = "success_by_iteration.csv";
pub const CURVE_CSV: &str = "rl_curve.csv";
pub const CURVES_SVG: &str = "curves.svg";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub video: VideoQuality,
    pub visual_alignment_pct: f64,
    /// `None` when the reward head is disabled.
    pub reward_alignment_pct: Option<f64>,
    pub gt_success_sft_pct: Option<f64>,
    pub gt_success_rl_pct: Option<f64>,
    pub delta_pct: Option<f64>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let pcts = [
            Some(self.visual_alignment_pct),
            self.reward_alignment_pct,
            self.gt_success_sft_pct,
            self.gt_success_rl_pct,
        ];
        if pcts.into_iter().flatten().any(|p| !(0.0..=100.0).contains(&p)) {
            return Err(Error::InvariantViolation("percentage outside [0, 100]".into()));
        }
        let v = &self.video;
        if !(-1.0..=1.0).contains(&v.ssim) || !(v.psnr_db <= super::metrics::PSNR_CAP_DB) || !(v.mse >= 0.0) {
            return Err(Error::InvariantViolation(format!("video metrics out of range: {v:?}")));
        }
        Ok(())
    }
}

/// Wall-clock seconds per phase. Not part of any report file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseDurations {
    pub curate_s: f64,
    pub train_wm_s: f64,
    pub rl_s: f64,
    pub deploy_s: f64,
    pub eval_s: f64,
}

/// Everything one iteration produced. Paths are relative to the run root;
/// `sans_path` names the augmented dataset the next iteration consumes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub iteration_index: u64,
    pub sans_path: String,
    pub heldout_path: String,
    pub wm_path: String,
    pub sft_path: String,
    pub rl_path: String,
    pub rl_curve_path: String,
    pub metrics: MetricsReport,
    pub durations: PhaseDurations,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl IterationManifest {
    pub fn new(iteration_index: u64) -> Self {
        Self {
            iteration_index,
            ..Self::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Loads every referenced artifact and checks the cross-references: the
    /// augmented SANS is one iteration ahead of the manifest.
    pub fn verify(&self, layout: &Layout) -> Result<()> {
        if let Some(phase) = &self.failed_phase {
            return Err(Error::InvariantViolation(format!(
                "iteration {} failed in phase {phase}",
                self.iteration_index
            )));
        }
        let ds = sans::load(layout.resolve(&self.sans_path))?;
        if ds.iteration_index != self.iteration_index + 1 {
            return Err(Error::InvariantViolation(format!(
                "manifest {} references SANS with iteration_index {}",
                self.iteration_index, ds.iteration_index
            )));
        }
        sans::load(layout.resolve(&self.heldout_path))?;
        WorldModel::load(layout.resolve(&self.wm_path))?;
        Policy::load(layout.resolve(&self.sft_path))?;
        Policy::load(layout.resolve(&self.rl_path))?;
        read_curve(layout.resolve(&self.rl_curve_path))?;
        self.metrics.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration_index: u64,
    pub metrics: MetricsReport,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub iterations: Vec<IterationMetrics>,
    /// Ablation variant name to its metrics.
    #[serde(default)]
    pub ablations: BTreeMap<String, MetricsReport>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn success_csv(manifests: &[IterationManifest]) -> String {
    let mut s = String::from("iteration,policy,gt_success_pct\n");
    for m in manifests {
        let k = m.iteration_index;
        let _ = writeln!(s, "{k},sft,{}", fmt_opt(m.metrics.gt_success_sft_pct));
        let _ = writeln!(s, "{k},rl,{}", fmt_opt(m.metrics.gt_success_rl_pct));
    }
    s
}

const SVG_W: f64 = 760.0;
const SVG_H: f64 = 320.0;
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Panel<'a> {
    left: f64,
    title: &'a str,
    x_label: &'a str,
    x_max: f64,
}

impl Panel<'_> {
    const TOP: f64 = 50.0;

    fn point(&self, x: f64, pct: f64) -> (f64, f64) {
        let px = self.left + PANEL_W * if self.x_max > 0.0 { x / self.x_max } else { 0.5 };
        let py = Self::TOP + PANEL_H * (1.0 - pct.clamp(0.0, 100.0) / 100.0);
        (px, py)
    }

    fn frame(&self, out: &mut String) {
        let (l, t) = (self.left, Self::TOP);
        let _ = writeln!(
            out,
            r##"<rect x="{l}" y="{t}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#,
            l + PANEL_W / 2.0,
            t - 12.0,
            self.title
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
            l + PANEL_W / 2.0,
            t + PANEL_H + 32.0,
            self.x_label
        );
        for pct in [0.0, 50.0, 100.0] {
            let (_, y) = self.point(0.0, pct);
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{pct}%</text>"#,
                l - 4.0,
                y + 3.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{l}" y="{}" font-size="10">0</text><text x="{}" y="{}" text-anchor="end" font-size="10">{}</text>"#,
            t + PANEL_H + 14.0,
            l + PANEL_W,
            t + PANEL_H + 14.0,
            self.x_max
        );
    }

    fn polyline(&self, out: &mut String, label: &str, color: &str, pts: &[(f64, f64)]) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, p)| {
                let (px, py) = self.point(x, p);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{label}</title></polyline>"#,
            coords.join(" ")
        );
    }

    fn legend(&self, out: &mut String, row: usize, label: &str, color: &str) {
        let y = Self::TOP + 12.0 + 14.0 * row as f64;
        let x = self.left + 8.0;
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="10">{label}</text>"#,
            x + 16.0,
            x + 20.0,
            y + 3.0
        );
    }
}

/// Two panels: world-model success against RL step (one polyline per
/// iteration) and ground-truth success against iteration (SFT and RL).
pub fn curves_svg(manifests: &[IterationManifest], curves: &[Vec<CurvePoint>]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" font-family="sans-serif">
<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    let max_step = curves.iter().flatten().map(|p| p.step).max().unwrap_or(0) as f64;
    let steps = Panel {
        left: 60.0,
        title: "World-model success vs RL step",
        x_label: "RL step",
        x_max: max_step,
    };
    steps.frame(&mut out);
    for (i, (m, c)) in manifests.iter().zip(curves).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let label = format!("iteration {}", m.iteration_index);
        let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.step as f64, 100.0 * p.wm_success_rate)).collect();
        steps.polyline(&mut out, &label, color, &pts);
        steps.legend(&mut out, i, &label, color);
    }

    let max_iter = manifests.iter().map(|m| m.iteration_index).max().unwrap_or(0) as f64;
    let iters = Panel {
        left: 420.0,
        title: "Ground-truth success vs iteration",
        x_label: "iteration",
        x_max: max_iter,
    };
    iters.frame(&mut out);
    let series = |f: fn(&MetricsReport) -> Option<f64>| -> Vec<(f64, f64)> {
        manifests
            .iter()
            .filter_map(|m| f(&m.metrics).map(|v| (m.iteration_index as f64, v)))
            .collect()
    };
    for (row, (label, color, pts)) in [
        ("SFT", PALETTE[0], series(|m| m.gt_success_sft_pct)),
        ("RL", PALETTE[1], series(|m| m.gt_success_rl_pct)),
    ]
    .into_iter()
    .enumerate()
    {
        iters.polyline(&mut out, label, color, &pts);
        iters.legend(&mut out, row, label, color);
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the report files into `layout.root` and returns what went into
/// `report.json`. Ablation metrics present under the root are included.
pub fn emit_report(manifests: &[IterationManifest], layout: &Layout) -> Result<Vec<PathBuf>> {
    if manifests.is_empty() {
        return Err(Error::contract("emit_report needs at least one manifest"));
    }
    let mut ablations = BTreeMap::new();
    for v in [super::Ablation::NoNearSuccess, super::Ablation::NoRewardHead] {
        let path = layout.ablation(v).join("metrics.json");
        if path.exists() {
            ablations.insert(v.name().to_string(), read_json(&path)?);
        }
    }
    let report = Report {
        iterations: manifests
            .iter()
            .map(|m| IterationMetrics {
                iteration_index: m.iteration_index,
                metrics: m.metrics,
            })
            .collect(),
        ablations,
    };
    let curves = manifests
        .iter()
        .map(|m| read_curve(layout.resolve(&m.rl_curve_path)))
        .collect::<Result<Vec<_>>>()?;

    let root = &layout.root;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let json = root.join(REPORT_FILE);
    write_json(&json, &report)?;
    let csv = root.join(SUCCESS_CSV);
    fs::write(&csv, success_csv(manifests)).map_err(|e| Error::io(&csv, e))?;
    // The newest iteration's curve, byte for byte.
    let last = manifests.last().expect("non-empty");
    let curve = root.join(CURVE_CSV);
    fs::copy(layout.resolve(&last.rl_curve_path), &curve).map_err(|e| Error::io(&curve, e))?;
    let svg = root.join(CURVES_SVG);
    fs::write(&svg, curves_svg(manifests, &curves)).map_err(|e| Error::io(&svg, e))?;
    Ok(vec![json, csv, curve, svg])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(k: u64, sft: f64, rl: f64) -> IterationManifest {
        let mut m = IterationManifest::new(k);
        m.metrics.gt_success_sft_pct = Some(sft);
        m.metrics.gt_success_rl_pct = Some(rl);
        m.metrics.delta_pct = Some(rl - sft);
        m
    }

    #[test]
    fn one_manifest_gives_two_rows() {
        let csv = success_csv(&[manifest(0, 15.0, 27.5)]);
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows, ["0,sft,15", "0,rl,27.5"]);
    }

    #[test]
    fn svg_has_one_polyline_per_curve() {
        let ms = [manifest(0, 15.0, 20.0), manifest(1, 15.0, 30.0)];
        let curve = |r: f64| {
            (0..5)
                .map(|step| CurvePoint {
                    step,
                    wm_success_rate: r,
                    mean_ratio: 1.0,
                    clip_fraction: 0.0,
                    loss: 0.0,
                })
                .collect::<Vec<_>>()
        };
        let svg = curves_svg(&ms, &[curve(0.2), curve(0.4)]);
        // Two RL-step curves plus the SFT and RL iteration curves.
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches("</polyline>").count(), 4);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn metrics_reject_out_of_range() {
        let mut m = MetricsReport::default();
        assert!(m.validate().is_ok());
        m.visual_alignment_pct = 101.0;
        assert!(m.validate().is_err());
    }
}
