//! One training run per swept value, shared seeds, evaluated on base and
//! novel classes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, Guidance, TrainConfig};
use crate::descriptions::DescriptionRecord;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    #[serde(rename = "N")]
    Prompts,
    #[serde(rename = "lambda_div")]
    LambdaDiv,
    #[serde(rename = "guidance")]
    Guidance,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "N" | "n" | "prompts" => Ok(Self::Prompts),
            "lambda_div" | "lambda-div" => Ok(Self::LambdaDiv),
            "guidance" => Ok(Self::Guidance),
            other => Err(Error::InvalidConfig(format!(
                "axis must be N, lambda_div or guidance, got {other:?}"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Prompts => "N",
            Self::LambdaDiv => "lambda_div",
            Self::Guidance => "guidance",
        }
    }

    fn apply(self, config: &mut TrainConfig, value: &str) -> Result<()> {
        match self {
            Self::Prompts => config.set("prompts", value),
            Self::LambdaDiv => config.set("lambda_div", value),
            Self::Guidance => {
                config.guidance = value.parse::<Guidance>()?;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    pub base: f64,
    pub novel: f64,
    pub hm: f64,
    /// Final-epoch losses; `l_div` is measured even when `λ_div = 0`.
    pub l_ce: f64,
    pub l_sg: f64,
    pub l_div: f64,
    pub l_total: f64,
    pub diversity_disabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

type Series = (&'static str, &'static str, fn(&AblationRow) -> f64);

pub const ABLATION_HEADER: &str = "axis,value,base,novel,hm,l_ce,l_sg,l_div,l_total,diversity";

/// Trains and evaluates one model per entry of `values`; every other
/// setting, seeds included, comes from `config`.
pub fn ablate(
    config: &TrainConfig,
    axis: AblationAxis,
    values: &[String],
    encoder: &FrozenEncoder,
    dataset: &SyntheticDataset,
    records: &[DescriptionRecord],
    threads: usize,
) -> Result<AblationTable> {
    if values.is_empty() {
        return Err(Error::Empty("ablation value list"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = config.clone();
        axis.apply(&mut cfg, value)?;
        log::info!("ablation {}={value}", axis.name());
        let ck = train(&cfg, encoder, dataset, records, threads)?;
        let report = evaluate(&ck.bank, encoder, dataset, cfg.tau, threads)?;
        let last = ck.history.last().expect("at least one epoch");
        rows.push(AblationRow {
            value: value.trim().to_string(),
            base: report.base,
            novel: report.novel,
            hm: report.hm,
            l_ce: last.l_ce,
            l_sg: last.l_sg,
            l_div: last.l_div,
            l_total: last.l_total,
            diversity_disabled: ck.diversity_disabled,
        });
    }
    Ok(AblationTable { axis, rows })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.2},{:.2},{:.2},{},{},{},{},{}",
                self.axis.name(),
                r.value,
                r.base,
                r.novel,
                r.hm,
                r.l_ce,
                r.l_sg,
                r.l_div,
                r.l_total,
                if r.diversity_disabled { "disabled" } else { "enabled" }
            );
        }
        out
    }

    /// Line chart of base, novel and HM accuracy against the swept value,
    /// values evenly spaced in input order.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 400.0;
        const LEFT: f64 = 60.0;
        const RIGHT: f64 = 130.0;
        const TOP: f64 = 30.0;
        const BOTTOM: f64 = 50.0;
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let n = self.rows.len();
        let x = |i: usize| {
            if n == 1 {
                LEFT + pw / 2.0
            } else {
                LEFT + pw * i as f64 / (n - 1) as f64
            }
        };
        let y = |acc: f64| TOP + ph * (1.0 - acc.clamp(0.0, 100.0) / 100.0);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
            let ty = y(tick);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" y1="{ty}" x2="{}" y2="{ty}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{tick}</text>"##,
                LEFT + pw,
                LEFT - 6.0,
                ty + 4.0
            );
        }
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x(i),
                TOP + ph + 18.0,
                r.value
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 10.0,
            self.axis.name()
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">accuracy (%)</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0
        );
        let series: [Series; 3] = [
            ("base", "#1f77b4", |r| r.base),
            ("novel", "#ff7f0e", |r| r.novel),
            ("HM", "#2ca02c", |r| r.hm),
        ];
        for (k, (label, color, get)) in series.iter().enumerate() {
            let pts: Vec<String> = self
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| format!("{:.2},{:.2}", x(i), y(get(r))))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
            for p in &pts {
                let (px, py) = p.split_once(',').expect("point");
                let _ = writeln!(s, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
            }
            let ly = TOP + 10.0 + 20.0 * k as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{label}</text>"#,
                W - RIGHT + 15.0,
                W - RIGHT + 40.0,
                W - RIGHT + 46.0,
                ly + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_svg()).map_err(|e| Error::io(path, e))
    }
}
