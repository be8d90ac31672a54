//! Report artifacts: summary tables, size-bin curves, heatmaps and scatter
//! data. Every emitter is a pure function of its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::CorrelationGrid;
use crate::metrics::{AggregateReport, ScoredPair};
use crate::perturb::{sort_kinds, PerturbationKind};
use crate::store::{write_atomic, StoreError};

pub const DEFAULT_CAP: usize = 150;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("bad bins: {0}")]
    BadBins(String),
    #[error("aggregates do not include the Original run")]
    MissingOriginal,
    #[error("instance {id:?} has {cells} cells, outside every bin")]
    UncoveredInstance { id: String, cells: usize },
    #[error("no cell count known for instance {0:?}")]
    UnknownInstance(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ReportError {
    pub fn is_io(&self) -> bool {
        matches!(self, ReportError::Store(e) if e.is_io())
    }
}

/// Half-open `[lo, hi)` cell-count bins, contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeBins(Vec<(usize, usize)>);

impl SizeBins {
    /// Six equal-width bins under the 150-cell cap.
    pub fn default_bins() -> Self {
        Self((0..6).map(|i| (i * 25, (i + 1) * 25)).collect())
    }

    pub fn new(bins: Vec<(usize, usize)>, cap: usize) -> Result<Self, ReportError> {
        let bad = |m: String| Err(ReportError::BadBins(m));
        if bins.is_empty() {
            return bad("no bins".into());
        }
        let mut expected_lo = 0;
        for &(lo, hi) in &bins {
            if hi <= lo {
                return bad(format!("empty bin [{lo}, {hi})"));
            }
            if lo < expected_lo {
                return bad(format!("bin [{lo}, {hi}) overlaps the previous bin"));
            }
            if lo > expected_lo {
                return bad(format!("gap [{expected_lo}, {lo}) is not covered"));
            }
            expected_lo = hi;
        }
        if expected_lo != cap {
            return bad(format!("bins end at {expected_lo}, cap is {cap}"));
        }
        Ok(Self(bins))
    }

    /// `"default"` or comma-separated edges such as `0,50,100,150`.
    pub fn parse(spec: &str, cap: usize) -> Result<Self, ReportError> {
        if spec.trim() == "default" {
            return Self::new(Self::default_bins().0, cap);
        }
        let edges = spec
            .split(',')
            .map(|e| e.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ReportError::BadBins(format!("{spec:?}: {e}")))?;
        if edges.len() < 2 {
            return Err(ReportError::BadBins("need at least two edges".into()));
        }
        Self::new(edges.windows(2).map(|w| (w[0], w[1])).collect(), cap)
    }

    pub fn bins(&self) -> &[(usize, usize)] {
        &self.0
    }

    fn index_of(&self, cells: usize) -> Option<usize> {
        self.0.iter().position(|&(lo, hi)| (lo..hi).contains(&cells))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub lo: usize,
    pub hi: usize,
    pub kind: PerturbationKind,
    pub count: usize,
    pub em_mean: Option<f64>,
    pub f1_mean: Option<f64>,
}

/// Mean EM/F1 per (bin, kind); instances are placed by the cell count of
/// their source table. Empty bins are kept with count 0.
pub fn size_bin_report(
    scored: &[ScoredPair],
    cell_counts: &BTreeMap<String, usize>,
    bins: &SizeBins,
) -> Result<Vec<BinRow>, ReportError> {
    let mut kinds: Vec<PerturbationKind> = scored.iter().map(|s| s.kind).collect();
    sort_kinds(&mut kinds);
    kinds.dedup();
    let mut acc: BTreeMap<(usize, PerturbationKind), (usize, f64, f64)> = BTreeMap::new();
    for s in scored {
        let cells = *cell_counts
            .get(&s.instance_id)
            .ok_or_else(|| ReportError::UnknownInstance(s.instance_id.clone()))?;
        let bin = bins
            .index_of(cells)
            .ok_or_else(|| ReportError::UncoveredInstance {
                id: s.instance_id.clone(),
                cells,
            })?;
        let e = acc.entry((bin, s.kind)).or_default();
        e.0 += 1;
        e.1 += f64::from(s.em);
        e.2 += s.f1;
    }
    let mut rows = Vec::new();
    for &kind in &kinds {
        for (i, &(lo, hi)) in bins.bins().iter().enumerate() {
            let (count, em, f1) = acc.get(&(i, kind)).copied().unwrap_or_default();
            let mean = |total: f64| (count > 0).then(|| total / count as f64);
            rows.push(BinRow {
                lo,
                hi,
                kind,
                count,
                em_mean: mean(em),
                f1_mean: mean(f1),
            });
        }
    }
    Ok(rows)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn bins_csv(rows: &[BinRow]) -> String {
    let mut out = String::from("bin_lo,bin_hi,kind,count,em_mean,f1_mean\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.lo,
            r.hi,
            r.kind,
            r.count,
            opt(r.em_mean),
            opt(r.f1_mean)
        );
    }
    out
}

/// Layers as rows, heads as columns; undefined cells are empty fields.
pub fn heatmap_csv(grid: &CorrelationGrid) -> String {
    let mut out = String::new();
    for row in grid.rho_grid() {
        let fields: Vec<String> = row.into_iter().map(opt).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

const NEGATIVE: (f64, f64, f64) = (33.0, 102.0, 172.0);
const NEUTRAL: (f64, f64, f64) = (247.0, 247.0, 247.0);
const POSITIVE: (f64, f64, f64) = (178.0, 24.0, 43.0);

/// Diverging blue–white–red scale over `[-1, 1]`.
pub fn diverging_color(rho: f64) -> String {
    let t = rho.clamp(-1.0, 1.0);
    let (end, f) = if t < 0.0 { (NEGATIVE, -t) } else { (POSITIVE, t) };
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(NEUTRAL.0, end.0),
        lerp(NEUTRAL.1, end.1),
        lerp(NEUTRAL.2, end.2)
    )
}

const CELL: usize = 18;
const MARGIN_LEFT: usize = 40;
const MARGIN_TOP: usize = 40;
const LEGEND_HEIGHT: usize = 40;

/// Self-contained SVG heatmap. Undefined cells are hatched.
pub fn heatmap_svg(grid: &CorrelationGrid, title: &str) -> String {
    let width = MARGIN_LEFT + grid.heads * CELL + 10;
    let height = MARGIN_TOP + grid.layers * CELL + LEGEND_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="9">"#
    );
    s.push_str(
        r##"<defs><pattern id="hatch" width="4" height="4" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="4" height="4" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="4" stroke="#999999" stroke-width="1.5"/></pattern></defs>
"##,
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="14" font-size="11">{}</text>"#,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="{}">head</text>"#,
        MARGIN_TOP - 16
    );
    let _ = writeln!(s, r#"<text x="2" y="{}">layer</text>"#, MARGIN_TOP - 4);
    for h in 0..grid.heads {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{h}</text>"#,
            MARGIN_LEFT + h * CELL + CELL / 2,
            MARGIN_TOP - 4
        );
    }
    for l in 0..grid.layers {
        let y = MARGIN_TOP + l * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#,
            MARGIN_LEFT - 4,
            y + CELL / 2 + 3
        );
        for h in 0..grid.heads {
            let cell = grid.get(l, h);
            let x = MARGIN_LEFT + h * CELL;
            let (fill, label) = match cell.rho {
                Some(rho) => (diverging_color(rho), format!("layer {l} head {h}: rho={rho:.4}")),
                None => ("url(#hatch)".to_owned(), format!("layer {l} head {h}: undefined")),
            };
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff" stroke-width="0.5"><title>{label}</title></rect>"##
            );
        }
    }
    let legend_y = MARGIN_TOP + grid.layers * CELL + 12;
    for (i, rho) in [-1.0, -0.5, 0.0, 0.5, 1.0].iter().enumerate() {
        let x = MARGIN_LEFT + i * 28;
        let _ = writeln!(
            s,
            r#"<rect x="{x}" y="{legend_y}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{rho}</text>"#,
            diverging_color(*rho),
            x + 14,
            legend_y + 10
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Writes `heatmap_{name}.csv` and `heatmap_{name}.svg` into `dir`.
pub fn heatmap_emit(grid: &CorrelationGrid, dir: &Path, name: &str) -> Result<Vec<PathBuf>, ReportError> {
    let csv_path = dir.join(format!("heatmap_{name}.csv"));
    let svg_path = dir.join(format!("heatmap_{name}.svg"));
    write_atomic(&csv_path, heatmap_csv(grid).as_bytes())?;
    write_atomic(
        &svg_path,
        heatmap_svg(
            grid,
            &format!("Spearman rho: entropy change vs EM difference ({name})"),
        )
        .as_bytes(),
    )?;
    Ok(vec![csv_path, svg_path])
}

/// One row of per-instance scatter data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub instance_id: String,
    pub mean_delta: f64,
    pub em_diff: f64,
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    let mut out = String::from("instance_id,mean_delta,em_diff\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{}",
            csv_field(&r.instance_id),
            r.mean_delta,
            r.em_diff
        );
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub operation: String,
    pub kind: PerturbationKind,
    pub n: usize,
    pub em: f64,
    pub f1: f64,
    pub vp: Option<f64>,
    pub emd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Fixed-width text table; the Original row shows `-` for VP and Emd.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}"));
        let mut out = format!(
            "{:<14} {:>6} {:>6} {:>6} {:>6} {:>6}\n",
            "Operation", "N", "EM", "F1", "VP", "Emd"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<14} {:>6} {:>6.2} {:>6.2} {:>6} {:>6}",
                r.operation,
                r.n,
                r.em,
                r.f1,
                cell(r.vp),
                cell(r.emd)
            );
        }
        out
    }
}

/// Orders aggregates as Original, Column, Row, Transpose, Transpose Row,
/// Transpose Col, NT, DVP, RVP, NVP.
pub fn summary_table(aggregates: &[AggregateReport]) -> Result<Summary, ReportError> {
    if !aggregates.iter().any(|a| a.kind == PerturbationKind::Original) {
        return Err(ReportError::MissingOriginal);
    }
    let rows = PerturbationKind::ALL
        .iter()
        .filter_map(|k| aggregates.iter().find(|a| a.kind == *k))
        .map(|a| {
            let original = a.kind == PerturbationKind::Original;
            SummaryRow {
                operation: a.kind.label().to_owned(),
                kind: a.kind,
                n: a.n,
                em: a.em_mean,
                f1: a.f1_mean,
                vp: if original { None } else { a.vp },
                emd: if original { None } else { a.emd },
            }
        })
        .collect();
    Ok(Summary { rows })
}

/// Scored pairs as CSV: `instance_id,kind,em,f1`.
pub fn scored_csv(pairs: &[ScoredPair]) -> String {
    let mut out = String::from("instance_id,kind,em,f1\n");
    for p in pairs {
        let _ = writeln!(out, "{},{},{},{}", csv_field(&p.instance_id), p.kind, p.em, p.f1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CorrelationCell;

    fn grid(rhos: &[Option<f64>], heads: usize) -> CorrelationGrid {
        CorrelationGrid {
            layers: rhos.len() / heads,
            heads,
            cells: rhos
                .iter()
                .map(|r| CorrelationCell {
                    rho: *r,
                    p: r.map(|_| 0.1),
                    n_points: 5,
                })
                .collect(),
        }
    }

    #[test]
    fn default_bins() {
        let bins = SizeBins::parse("default", DEFAULT_CAP).unwrap();
        assert_eq!(bins.bins().len(), 6);
        assert_eq!(bins.bins()[5], (125, 150));
    }

    #[test]
    fn bad_bins() {
        assert!(matches!(
            SizeBins::new(vec![(0, 50), (40, 150)], 150),
            Err(ReportError::BadBins(_))
        ));
        assert!(matches!(
            SizeBins::new(vec![(0, 50), (60, 150)], 150),
            Err(ReportError::BadBins(_))
        ));
        assert!(matches!(
            SizeBins::new(vec![(0, 50)], 150),
            Err(ReportError::BadBins(_))
        ));
        assert!(matches!(
            SizeBins::parse("0,x", 150),
            Err(ReportError::BadBins(_))
        ));
        assert!(SizeBins::parse("0,100,150", 150).is_ok());
    }

    fn pair(id: &str, kind: PerturbationKind, em: u8) -> ScoredPair {
        ScoredPair {
            instance_id: id.into(),
            kind,
            em,
            f1: f64::from(em),
        }
    }

    #[test]
    fn one_bin_populated() {
        let scored = vec![
            pair("a", PerturbationKind::Original, 1),
            pair("b", PerturbationKind::Original, 0),
            pair("a", PerturbationKind::RowSwap, 0),
        ];
        let cells: BTreeMap<String, usize> = [("a".into(), 10), ("b".into(), 12)].into_iter().collect();
        let rows = size_bin_report(&scored, &cells, &SizeBins::default_bins()).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), 3);
        assert_eq!(rows[0].count, 2);
        assert_eq!(rows[0].em_mean, Some(0.5));
        assert!(rows[1..6].iter().all(|r| r.count == 0 && r.em_mean.is_none()));
        let big: BTreeMap<String, usize> = [("a".into(), 200), ("b".into(), 1)].into_iter().collect();
        assert!(matches!(
            size_bin_report(&scored, &big, &SizeBins::default_bins()),
            Err(ReportError::UncoveredInstance { .. })
        ));
    }

    #[test]
    fn heatmap_csv_and_colors() {
        let g = grid(&[Some(1.0); 4], 2);
        assert_eq!(heatmap_csv(&g), "1,1\n1,1\n");
        let svg = heatmap_svg(&g, "t");
        assert_eq!(
            svg.matches(&format!("fill=\"{}\"", diverging_color(1.0))).count(),
            5
        );
        assert_eq!(diverging_color(1.0), "#b2182b");
        assert_eq!(diverging_color(-1.0), "#2166ac");
        assert_eq!(diverging_color(0.0), "#f7f7f7");
    }

    #[test]
    fn undefined_cells_are_blank_and_hatched() {
        let g = grid(&[None, Some(-0.5)], 2);
        assert_eq!(heatmap_csv(&g), ",-0.5\n");
        let svg = heatmap_svg(&g, "t");
        assert_eq!(svg.matches("fill=\"url(#hatch)\"").count(), 1);
        assert_eq!(svg, heatmap_svg(&g, "t"));
    }

    fn agg(kind: PerturbationKind) -> AggregateReport {
        AggregateReport {
            kind,
            n: 4,
            em_mean: 0.5,
            f1_mean: 0.6,
            emd: Some(-0.25),
            vp: Some(0.25),
            c2w: 1,
            w2c: 0,
        }
    }

    #[test]
    fn summary_rows() {
        let s = summary_table(&[agg(PerturbationKind::Original)]).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!((s.rows[0].vp, s.rows[0].emd), (None, None));
        assert!(s.to_text().lines().nth(1).unwrap().ends_with("     -      -"));

        let mut all: Vec<_> = PerturbationKind::ALL.iter().rev().map(|&k| agg(k)).collect();
        all.rotate_left(3);
        let s = summary_table(&all).unwrap();
        let labels: Vec<_> = s.rows.iter().map(|r| r.operation.as_str()).collect();
        assert_eq!(
            labels,
            [
                "Original",
                "Column",
                "Row",
                "Transpose",
                "Transpose Row",
                "Transpose Col",
                "NT",
                "DVP",
                "RVP",
                "NVP"
            ]
        );
        assert!(matches!(
            summary_table(&[agg(PerturbationKind::Nt)]),
            Err(ReportError::MissingOriginal)
        ));
    }
}
