//! Experiment specs, sweep execution, result tables and grouped-bar figures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{DeviceConfig, PimOrg};
use crate::sim::{speedup, ExecMode, SimError, SimParams, System};
use crate::workload::{InferenceRequest, ModelConfig, WorkloadError};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_DIR_ENV: &str = "PIMSIM_OUT_DIR";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("invalid experiment spec: {0}")]
    Invalid(String),
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("unknown device preset {0:?}")]
    UnknownDevice(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("spec parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("no rows match {0}")]
    NoRows(String),
    #[error("unknown figure {0:?} (expected fig6, fig7 or fig8)")]
    UnknownFigure(String),
}

/// A preset name or an inline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeviceSpec {
    Preset(String),
    Custom(DeviceConfig),
}

impl DeviceSpec {
    pub fn resolve(&self) -> Result<DeviceConfig, ReportError> {
        match self {
            DeviceSpec::Preset(name) => {
                DeviceConfig::preset(name).ok_or_else(|| ReportError::UnknownDevice(name.clone()))
            }
            DeviceSpec::Custom(d) => Ok(d.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(String),
    Custom(ModelConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<ModelConfig, ReportError> {
        match self {
            ModelSpec::Preset(name) => Ok(ModelConfig::preset(name)?),
            ModelSpec::Custom(m) => {
                m.validate()?;
                Ok(m.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub schema_version: u32,
    pub devices: Vec<DeviceSpec>,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub org: PimOrg,
    #[serde(default)]
    pub params: SimParams,
    /// The first mode is the speedup baseline.
    pub modes: Vec<ExecMode>,
    pub lin: Vec<u64>,
    pub lout: Vec<u64>,
    pub batch: Vec<u64>,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            schema_version: SCHEMA_VERSION,
            devices: DeviceConfig::PRESETS.iter().map(|s| DeviceSpec::Preset(s.to_string())).collect(),
            models: ModelConfig::PRESETS.iter().map(|s| ModelSpec::Preset(s.to_string())).collect(),
            org: PimOrg::default(),
            params: SimParams::default(),
            modes: ExecMode::ALL.to_vec(),
            lin: vec![128, 2048],
            lout: vec![128, 2048],
            batch: vec![1],
            out_dir: PathBuf::from("results"),
            seed: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Applies the output-directory environment override, if set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
            self.out_dir = PathBuf::from(dir);
        }
        self
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ReportError::Schema(self.schema_version));
        }
        let lists = [
            ("devices", self.devices.len()),
            ("models", self.models.len()),
            ("modes", self.modes.len()),
            ("lin", self.lin.len()),
            ("lout", self.lout.len()),
            ("batch", self.batch.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(ReportError::Invalid(format!("{name} list is empty")));
        }
        if self.modes.iter().collect::<BTreeSet<_>>().len() != self.modes.len() {
            return Err(ReportError::Invalid("modes contain duplicates".into()));
        }
        if self.lin.contains(&0) {
            return Err(ReportError::Invalid("Lin values must be at least 1".into()));
        }
        if self.batch.contains(&0) {
            return Err(ReportError::Invalid("batch values must be at least 1".into()));
        }
        self.params.validate()?;
        for d in &self.devices {
            d.resolve()?;
        }
        for m in &self.models {
            m.resolve()?;
        }
        Ok(())
    }

    /// Resolves every device x model pair into a validated system.
    pub fn systems(&self) -> Result<Vec<System>, ReportError> {
        let mut out = Vec::new();
        for d in &self.devices {
            for m in &self.models {
                out.push(System::new(d.resolve()?, self.org.clone(), m.resolve()?, self.params)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub device: String,
    pub model: String,
    pub mode: ExecMode,
    pub lin: u64,
    pub lout: u64,
    pub batch: u64,
    pub ttft_s: f64,
    pub decode_s: f64,
    pub end_to_end_s: f64,
    pub speedup_vs_baseline: f64,
    pub internal_bw_used: f64,
    pub pim_utilization: f64,
}

impl ResultRow {
    pub const HEADER: &'static str = "device,model,mode,lin,lout,batch,ttft_s,decode_s,end_to_end_s,speedup_vs_baseline,internal_bw_used,pim_utilization";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub schema_version: u32,
    pub seed: u64,
    pub baseline: ExecMode,
    pub rows: Vec<ResultRow>,
}

/// Simulates every (device, model, Lin, Lout, batch, mode) cell without touching the filesystem.
pub fn run_in_memory(spec: &ExperimentSpec) -> Result<ResultTable, ReportError> {
    spec.validate()?;
    let systems = spec.systems()?;
    let mut points = Vec::new();
    for (si, _) in systems.iter().enumerate() {
        for &lin in &spec.lin {
            for &lout in &spec.lout {
                for &batch in &spec.batch {
                    points.push((si, InferenceRequest::new(lin, lout, batch)?));
                }
            }
        }
    }
    let order: BTreeMap<ExecMode, usize> = spec.modes.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let chunks: Result<Vec<Vec<ResultRow>>, ReportError> = points
        .par_iter()
        .map(|(si, req)| {
            let sys = &systems[*si];
            let reports = spec
                .modes
                .iter()
                .map(|&m| sys.simulate(m, req))
                .collect::<Result<Vec<_>, _>>()?;
            let base = &reports[0];
            reports
                .iter()
                .map(|rep| {
                    Ok(ResultRow {
                        device: sys.device.name.clone(),
                        model: sys.model.name.clone(),
                        mode: rep.mode,
                        lin: req.lin,
                        lout: req.lout,
                        batch: req.batch,
                        ttft_s: rep.mean_ttft_s(),
                        decode_s: rep.mean_decode_s(),
                        end_to_end_s: rep.end_to_end_s,
                        speedup_vs_baseline: speedup(rep, base)?,
                        internal_bw_used: rep.internal_bw_used(),
                        pim_utilization: rep.pim_utilization(),
                    })
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<ResultRow> = chunks?.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (&a.device, &a.model, a.lin, a.lout, a.batch, order[&a.mode])
            .cmp(&(&b.device, &b.model, b.lin, b.lout, b.batch, order[&b.mode]))
    });
    Ok(ResultTable {
        schema_version: SCHEMA_VERSION,
        seed: spec.seed,
        baseline: spec.modes[0],
        rows,
    })
}

/// Runs the sweep and writes `results.csv` and `results.json` into the spec's output directory.
pub fn run(spec: &ExperimentSpec) -> Result<ResultTable, ReportError> {
    let table = run_in_memory(spec)?;
    write_results(&table, &spec.out_dir)?;
    Ok(table)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    fs::write(path, bytes).map_err(|source| ReportError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn table_csv(table: &ResultTable) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &table.rows {
        w.serialize(row)?;
    }
    if table.rows.is_empty() {
        return Ok(format!("{}\n", ResultRow::HEADER));
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_results(table: &ResultTable, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    write_file(&dir.join("results.csv"), table_csv(table)?.as_bytes())?;
    write_file(&dir.join("results.json"), serde_json::to_string_pretty(table)?.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    /// Batch-1 comparison, one chart per device.
    Fig6,
    /// Batch-4 chart for the Jetson preset.
    Fig7,
    /// Batch-4 chart for the iPhone preset.
    Fig8,
}

impl FromStr for Figure {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fig6" => Ok(Figure::Fig6),
            "fig7" => Ok(Figure::Fig7),
            "fig8" => Ok(Figure::Fig8),
            _ => Err(ReportError::UnknownFigure(s.to_string())),
        }
    }
}

impl Figure {
    fn selects(self, row: &ResultRow) -> bool {
        match self {
            Figure::Fig6 => row.batch == 1,
            Figure::Fig7 => row.batch == 4 && row.device == "jetson-agx-orin",
            Figure::Fig8 => row.batch == 4 && row.device == "iphone-15-pro",
        }
    }

    fn name(self) -> &'static str {
        match self {
            Figure::Fig6 => "fig6",
            Figure::Fig7 => "fig7",
            Figure::Fig8 => "fig8",
        }
    }
}

/// Bars of one chart: group label to per-mode normalised value (`None` = missing cell).
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub modes: Vec<ExecMode>,
    pub groups: Vec<(String, Vec<Option<f64>>)>,
}

/// Builds the charts of `figure` from `table`; fig6 yields one chart per device.
pub fn figure_charts(table: &ResultTable, figure: Figure) -> Result<Vec<Chart>, ReportError> {
    let rows: Vec<&ResultRow> = table.rows.iter().filter(|r| figure.selects(r)).collect();
    if rows.is_empty() {
        return Err(ReportError::NoRows(figure.name().to_string()));
    }
    let mut modes: Vec<ExecMode> = Vec::new();
    for r in &rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    let devices: BTreeSet<&str> = rows.iter().map(|r| r.device.as_str()).collect();
    let mut charts = Vec::new();
    for device in devices {
        let mut groups: BTreeMap<(String, u64, u64), Vec<Option<f64>>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.device == device) {
            let cells = groups
                .entry((r.model.clone(), r.lin, r.lout))
                .or_insert_with(|| vec![None; modes.len()]);
            let i = modes.iter().position(|m| *m == r.mode).expect("mode collected above");
            cells[i] = Some(r.speedup_vs_baseline);
        }
        let groups = groups
            .into_iter()
            .map(|((model, lin, lout), cells)| {
                let label = format!("{model} ({lin},{lout})");
                for (m, c) in modes.iter().zip(&cells) {
                    if c.is_none() {
                        log::warn!("{} {device}: no {m} result for {label}; leaving a gap", figure.name());
                    }
                }
                (label, cells)
            })
            .collect();
        charts.push(Chart {
            title: format!("{} {device} (normalised to {})", figure.name(), table.baseline),
            modes: modes.clone(),
            groups,
        });
    }
    Ok(charts)
}

const PALETTE: [&str; 3] = ["#4c72b0", "#dd8452", "#55a868"];

pub fn render_svg(chart: &Chart) -> String {
    let bar_w = 18.0;
    let gap = 14.0;
    let group_w = bar_w * chart.modes.len() as f64 + gap;
    let (left, top, plot_h) = (60.0, 40.0, 260.0);
    let width = left + group_w * chart.groups.len() as f64 + 160.0;
    let height = top + plot_h + 120.0;
    let max = chart
        .groups
        .iter()
        .flat_map(|(_, v)| v.iter().flatten())
        .fold(1.0f64, |a, &b| a.max(b))
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, xml_escape(&chart.title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
        y(1.0),
        width - 160.0
    );
    for (gi, (label, cells)) in chart.groups.iter().enumerate() {
        let gx = left + gap / 2.0 + gi as f64 * group_w;
        for (mi, cell) in cells.iter().enumerate() {
            let Some(v) = cell else { continue };
            let x = gx + mi as f64 * bar_w;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{}"><title>{}: {v:.3}</title></rect>"#,
                y(*v),
                top + plot_h - y(*v),
                PALETTE[mi % PALETTE.len()],
                chart.modes[mi]
            );
        }
        let _ = writeln!(
            s,
            r#"<text transform="translate({:.1},{:.1}) rotate(40)">{}</text>"#,
            gx,
            top + plot_h + 14.0,
            xml_escape(label)
        );
    }
    for (mi, m) in chart.modes.iter().enumerate() {
        let ly = top + 14.0 * mi as f64;
        let lx = width - 140.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{m}</text>"#,
            PALETTE[mi % PALETTE.len()],
            lx + 14.0,
            ly + 9.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the figure's SVG files into `dir` and returns their paths.
pub fn emit_figure(table: &ResultTable, figure: Figure, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    let charts = figure_charts(table, figure)?;
    let single = charts.len() == 1 && figure != Figure::Fig6;
    let mut paths = Vec::new();
    for chart in &charts {
        let name = if single {
            format!("{}.svg", figure.name())
        } else {
            let device = chart.title.split_whitespace().nth(1).unwrap_or("device");
            format!("{}_{device}.svg", figure.name())
        };
        let path = dir.join(name);
        write_file(&path, render_svg(chart).as_bytes())?;
        paths.push(path);
    }
    Ok(paths)
}
