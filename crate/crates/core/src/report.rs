//! Per-layer measure curves, transition detection, run comparison and the
//! CSV / JSON / SVG outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dump::{self, HiddenStateDump, Setting};
use crate::error::{Error, Result};
use crate::logistic::ClassifierConfig;
use crate::measures::{self, Aggregation, MeasureContext, MeasureName, MeasureValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSeries {
    pub run_id: String,
    pub measure: MeasureName,
    pub aggregation: Aggregation,
    /// One value per layer, `0..=num_layers`.
    pub values: Vec<f64>,
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub measures: Vec<MeasureName>,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    pub singular_top: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            measures: MeasureName::CORE.to_vec(),
            seed: 0,
            classifier: ClassifierConfig::default(),
            singular_top: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub series: Vec<MeasureSeries>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SuiteResult {
    pub fn get(&self, name: MeasureName) -> Option<&MeasureSeries> {
        self.series.iter().find(|s| s.measure == name)
    }
}

/// Degeneracies on one measure become a flagged 0 plus a warning instead of
/// failing the layer.
fn layer_values(
    dump: &HiddenStateDump,
    l: usize,
    names: &[MeasureName],
    ctx: &MeasureContext<'_>,
) -> Result<(Vec<MeasureValue>, Vec<String>)> {
    let m = dump.layer_matrix(l)?;
    match measures::measure_suite(&m, names, ctx) {
        Ok(values) => {
            let warnings = values
                .iter()
                .filter(|v| v.degenerate)
                .map(|v| {
                    format!(
                        "layer {l}: {} is undefined on some label pair, reported as {}",
                        v.name, v.value
                    )
                })
                .collect();
            Ok((values, warnings))
        }
        Err(Error::Degenerate(_)) => {
            let mut values = Vec::with_capacity(names.len());
            let mut warnings = Vec::new();
            for &name in names {
                match measures::aggregate_pairwise(&m, name, ctx) {
                    Ok(v) => {
                        if v.degenerate {
                            warnings.push(format!(
                                "layer {l}: {name} is undefined on some label pair, reported as {}",
                                v.value
                            ));
                        }
                        values.push(v)
                    }
                    Err(Error::Degenerate(msg)) => {
                        warnings.push(format!("layer {l}: {name}: {msg}"));
                        values.push(MeasureValue {
                            name,
                            value: 0.0,
                            layer_index: l,
                            aggregation: if m.label_set().len() == 2 {
                                Aggregation::Binary
                            } else {
                                Aggregation::PairwiseMean
                            },
                            degenerate: true,
                            pair_values: None,
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((values, warnings))
        }
        Err(e) => Err(e),
    }
}

/// Every requested measure on every layer. Layers run in parallel; the
/// result is assembled in layer order, so it depends only on the dump and
/// the options.
///
/// Without an unembedding the alignment measures are dropped with a
/// warning.
pub fn run_suite(dump: &HiddenStateDump, run_id: &str, opts: &SuiteOptions) -> Result<SuiteResult> {
    let e = dump.unembedding_view();
    let mut warnings = Vec::new();
    let names: Vec<MeasureName> = if e.is_some() {
        opts.measures.clone()
    } else {
        let (kept, dropped): (Vec<MeasureName>, Vec<MeasureName>) = opts
            .measures
            .iter()
            .copied()
            .partition(|n| !n.needs_unembedding());
        if !dropped.is_empty() {
            let list: Vec<&str> = dropped.iter().map(|n| n.as_str()).collect();
            warnings.push(format!(
                "no unembedding stored; skipped {}",
                list.join(", ")
            ));
        }
        kept
    };
    let ctx = MeasureContext {
        unembedding: e.as_ref(),
        seed: opts.seed,
        classifier: opts.classifier,
        singular_top: opts.singular_top,
    };
    let per_layer = (0..=dump.num_layers())
        .into_par_iter()
        .map(|l| layer_values(dump, l, &names, &ctx))
        .collect::<Result<Vec<_>>>()?;

    let mut series: Vec<MeasureSeries> = names
        .iter()
        .map(|&measure| MeasureSeries {
            run_id: run_id.to_string(),
            measure,
            aggregation: Aggregation::Binary,
            values: Vec::with_capacity(per_layer.len()),
            degenerate: Vec::with_capacity(per_layer.len()),
        })
        .collect();
    for (values, w) in per_layer {
        warnings.extend(w);
        for (s, v) in series.iter_mut().zip(values) {
            s.aggregation = v.aggregation;
            s.values.push(v.value);
            s.degenerate.push(v.degenerate);
        }
    }
    Ok(SuiteResult { series, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionConfig {
    /// Fraction of the composite-alignment maximum a layer must reach.
    pub threshold: f64,
    /// Fraction of the separability maximum the same layer must reach.
    pub separability_fraction: f64,
    /// A composite curve whose range is at most this fraction of its
    /// largest magnitude counts as flat and has no transition.
    pub flat_rtol: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            separability_fraction: 0.9,
            flat_rtol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub transition_layer: Option<usize>,
    pub criterion: TransitionConfig,
    pub composite_max: Option<f64>,
    pub separability_max: Option<f64>,
    /// Why no layer was found, when none was.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub composite_alignment: Vec<f64>,
    pub separability_score: Vec<f64>,
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Earliest layer where composite alignment reaches `threshold` of its
/// maximum while separability is within `separability_fraction` of its own.
pub fn detect_transition(suite: &SuiteResult, cfg: &TransitionConfig) -> TransitionReport {
    let composite = suite
        .get(MeasureName::CompositeAlignment)
        .map(|s| s.values.clone())
        .unwrap_or_default();
    let separability = suite
        .get(MeasureName::SeparabilityScore)
        .map(|s| s.values.clone())
        .unwrap_or_default();
    let mut report = TransitionReport {
        transition_layer: None,
        criterion: *cfg,
        composite_max: None,
        separability_max: None,
        reason: None,
        composite_alignment: composite.clone(),
        separability_score: separability.clone(),
    };
    if composite.is_empty() || separability.is_empty() {
        report.reason = Some("composite_alignment and separability_score are both required".into());
        return report;
    }
    let cmax = max_of(&composite);
    let smax = max_of(&separability);
    report.composite_max = Some(cmax);
    report.separability_max = Some(smax);
    let cmin = composite.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = composite.iter().map(|x| x.abs()).fold(0.0, f64::max);
    if cmax <= 0.0 {
        report.reason = Some("composite alignment never exceeds 0".into());
    } else if cmax - cmin <= cfg.flat_rtol * scale {
        report.reason = Some("composite alignment is flat".into());
    } else {
        report.transition_layer = composite.iter().zip(&separability).position(|(&c, &s)| {
            c >= cfg.threshold * cmax && s >= cfg.separability_fraction * smax
        });
        if report.transition_layer.is_none() {
            report.reason = Some("no layer meets both conditions".into());
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_name: String,
    pub dataset_name: String,
    pub setting: Setting,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_queries: usize,
}

/// Everything `analyze` writes about one dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub run: RunSummary,
    pub seed: u64,
    pub suite: SuiteResult,
    pub transition: TransitionReport,
}

pub fn analyze(
    dump: &HiddenStateDump,
    run_id: &str,
    opts: &SuiteOptions,
    transition: &TransitionConfig,
) -> Result<RunReport> {
    let suite = run_suite(dump, run_id, opts)?;
    let m = &dump.manifest;
    Ok(RunReport {
        run_id: run_id.to_string(),
        run: RunSummary {
            model_name: m.model_name.clone(),
            dataset_name: m.dataset_name.clone(),
            setting: m.setting.clone(),
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            num_queries: m.num_queries,
        },
        seed: opts.seed,
        transition: detect_transition(&suite, transition),
        suite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSeries {
    pub run_id: String,
    pub measure: MeasureName,
    /// `run − baseline` per layer.
    pub deltas: Vec<f64>,
    pub final_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub num_layers: usize,
    pub deltas: Vec<DeltaSeries>,
}

impl Comparison {
    pub fn final_delta(&self, run_id: &str, measure: MeasureName) -> Option<f64> {
        self.deltas
            .iter()
            .find(|d| d.run_id == run_id && d.measure == measure)
            .map(|d| d.final_delta)
    }
}

/// Deltas of every later run against the first, for measures both have.
pub fn compare_runs(runs: &[RunReport]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::invalid("comparison needs at least two runs"));
    }
    let base = &runs[0];
    for r in &runs[1..] {
        if r.run.num_layers != base.run.num_layers {
            return Err(Error::invalid(format!(
                "run {} has {} layers, {} has {}",
                r.run_id, r.run.num_layers, base.run_id, base.run.num_layers
            )));
        }
    }
    let mut deltas = Vec::new();
    for r in &runs[1..] {
        for s in &r.suite.series {
            let Some(b) = base.suite.get(s.measure) else {
                continue;
            };
            let d: Vec<f64> = s.values.iter().zip(&b.values).map(|(x, y)| x - y).collect();
            deltas.push(DeltaSeries {
                run_id: r.run_id.clone(),
                measure: s.measure,
                final_delta: *d.last().expect("at least one layer"),
                deltas: d,
            });
        }
    }
    Ok(Comparison {
        baseline: base.run_id.clone(),
        num_layers: base.run.num_layers,
        deltas,
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (run, measure, layer). Floats use Rust's shortest
/// round-trip formatting.
pub fn series_csv(runs: &[RunReport]) -> String {
    let mut out = String::from("run_id,measure,layer,value,aggregation,degenerate\n");
    for r in runs {
        for s in &r.suite.series {
            for (l, (v, d)) in s.values.iter().zip(&s.degenerate).enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{l},{v},{},{d}",
                    csv_field(&s.run_id),
                    s.measure,
                    s.aggregation.as_str()
                );
            }
        }
    }
    out
}

pub fn comparison_csv(c: &Comparison) -> String {
    let mut out = String::from("baseline,run_id,measure,layer,delta\n");
    for d in &c.deltas {
        for (l, v) in d.deltas.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{l},{v}",
                csv_field(&c.baseline),
                csv_field(&d.run_id),
                d.measure
            );
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A line chart of one measure, one polyline per run that has it.
pub fn chart_svg(runs: &[RunReport], measure: MeasureName) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 160.0;
    const TOP: f64 = 30.0;
    const BOTTOM: f64 = 50.0;
    let lines: Vec<(&str, &[f64])> = runs
        .iter()
        .filter_map(|r| {
            r.suite
                .get(measure)
                .map(|s| (r.run_id.as_str(), s.values.as_slice()))
        })
        .collect();
    let last_layer = lines
        .iter()
        .map(|(_, v)| v.len())
        .max()
        .unwrap_or(1)
        .saturating_sub(1);
    let (mut lo, mut hi) = lines
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo <= 1e-12 * hi.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let x_of = |l: usize| LEFT + pw * l as f64 / last_layer.max(1) as f64;
    let y_of = |v: f64| TOP + ph * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        measure
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT:.2},{TOP:.2}V{:.2}H{:.2}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    );
    for (v, anchor_y) in [(hi, TOP), (lo, TOP + ph)] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.4}</text>"#,
            LEFT - 6.0,
            anchor_y + 4.0
        );
    }
    for l in [0, last_layer] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{l}</text>"#,
            x_of(l),
            TOP + ph + 16.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">layer</text>"#,
        LEFT + pw / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        measure
    );
    for (k, (run_id, values)) in lines.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(l, &v)| format!("{:.2},{:.2}", x_of(l), y_of(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            xml_escape(run_id)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Measures present in any run, in first-seen order.
fn measures_of(runs: &[RunReport]) -> Vec<MeasureName> {
    let mut names = Vec::new();
    for r in runs {
        for s in &r.suite.series {
            if !names.contains(&s.measure) {
                names.push(s.measure);
            }
        }
    }
    names
}

#[derive(Serialize)]
struct ReportFile<'a> {
    runs: &'a [RunReport],
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<&'a Comparison>,
}

/// Writes `measures.csv`, `measures.json`, `report.json`, `charts/*.svg`
/// and, given a comparison, `comparison.csv`.
pub fn write_outputs(
    dir: &Path,
    runs: &[RunReport],
    comparison: Option<&Comparison>,
) -> Result<()> {
    let charts = dir.join("charts");
    fs::create_dir_all(&charts).map_err(|e| Error::io(&charts, e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    };
    write("measures.csv", series_csv(runs))?;
    let series: Vec<&MeasureSeries> = runs.iter().flat_map(|r| &r.suite.series).collect();
    dump::write_json_file(&dir.join("measures.json"), &series)?;
    dump::write_json_file(&dir.join("report.json"), &ReportFile { runs, comparison })?;
    if let Some(c) = comparison {
        write("comparison.csv", comparison_csv(c))?;
    }
    for name in measures_of(runs) {
        let path = charts.join(format!("{name}.svg"));
        fs::write(&path, chart_svg(runs, name)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
