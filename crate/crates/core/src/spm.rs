//! System performance maps: AP over (MTF50 or illuminance) × distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::APCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpmAxis {
    Mtf50,
    Lux,
}

impl SpmAxis {
    pub fn label(self) -> &'static str {
        match self {
            SpmAxis::Mtf50 => "MTF50 (cycles/mm)",
            SpmAxis::Lux => "Illuminance (lux)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SpmAxis::Mtf50 => "mtf50_cyc_per_mm",
            SpmAxis::Lux => "lux",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtf50" => Ok(SpmAxis::Mtf50),
            "lux" => Ok(SpmAxis::Lux),
            _ => Err(Error::Config(format!("unknown SPM axis `{s}` (expected mtf50 or lux)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub y: f64,
    pub distance_m: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpmGrid {
    pub axis: SpmAxis,
    /// Rows are interpolated in log10(y).
    pub log_y: bool,
    /// Lattice of observed values, ascending.
    pub lattice_x: Vec<f64>,
    pub lattice_y: Vec<f64>,
    /// `lattice[row][col]`, rows follow `lattice_y`.
    pub lattice: Vec<Vec<f64>>,
    /// Curves averaged into each lattice row.
    pub multiplicity: Vec<usize>,
    /// Dense axes; every lattice node is also a dense node.
    pub x_axis: Vec<f64>,
    pub y_axis: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub samples: Vec<SamplePoint>,
}

/// Values spanning at least this ratio get a log-spaced y axis.
pub const LOG_SPAN: f64 = 100.0;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 1.0 {
        b
    } else {
        a + (b - a) * t
    }
}

/// `k` equal steps per interval, keeping the end points exact.
fn refine(nodes: &[f64], k: usize, log: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity((nodes.len() - 1) * k + 1);
    for w in nodes.windows(2) {
        out.push(w[0]);
        for i in 1..k {
            let t = i as f64 / k as f64;
            out.push(if log { 10f64.powf(lerp(w[0].log10(), w[1].log10(), t)) } else { lerp(w[0], w[1], t) });
        }
    }
    out.push(*nodes.last().unwrap());
    out
}

/// Lattice from `(y, curve)` pairs, refined `subdivisions` times per cell.
///
/// Curves with the same y are averaged into one row. Every curve must
/// cover the same distances.
pub fn build_grid(curves: &[(f64, &APCurve)], axis: SpmAxis, subdivisions: usize) -> Result<SpmGrid> {
    if subdivisions == 0 {
        return Err(Error::Config("SPM subdivisions must be >= 1".into()));
    }
    let first = curves.first().ok_or_else(|| Error::DegenerateGrid("no curves".into()))?;
    let lattice_x: Vec<f64> = first.1.points.iter().map(|p| p.distance_m).collect();
    let mut rows: BTreeMap<u64, (f64, Vec<f64>, usize)> = BTreeMap::new();
    let mut samples = Vec::new();
    for (y, c) in curves {
        c.validate()?;
        if !(y.is_finite() && *y > 0.0) {
            return Err(Error::Data(format!("{}: SPM y value must be finite and > 0, got {y}", c.camera_id)));
        }
        let xs: Vec<f64> = c.points.iter().map(|p| p.distance_m).collect();
        if xs != lattice_x {
            return Err(Error::Data(format!("{}: distances differ from {}", c.camera_id, first.1.camera_id)));
        }
        let row = rows.entry(y.to_bits()).or_insert_with(|| (*y, vec![0.0; xs.len()], 0));
        for (s, p) in row.1.iter_mut().zip(&c.points) {
            *s += p.ap;
            samples.push(SamplePoint { y: *y, distance_m: p.distance_m, ap: p.ap });
        }
        row.2 += 1;
    }
    let mut rows: Vec<(f64, Vec<f64>, usize)> = rows.into_values().collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if rows.len() < 2 || lattice_x.len() < 2 {
        return Err(Error::DegenerateGrid(format!("{} row(s) × {} column(s); need at least 2 × 2", rows.len(), lattice_x.len())));
    }
    let lattice_y: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let multiplicity: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let lattice: Vec<Vec<f64>> = rows
        .iter()
        .map(|(_, sum, n)| if *n == 1 { sum.clone() } else { sum.iter().map(|s| s / *n as f64).collect() })
        .collect();
    let log_y = lattice_y[lattice_y.len() - 1] / lattice_y[0] >= LOG_SPAN;
    let x_axis = refine(&lattice_x, subdivisions, false);
    let y_axis = refine(&lattice_y, subdivisions, log_y);
    let mut grid = SpmGrid {
        axis,
        log_y,
        lattice_x,
        lattice_y,
        lattice,
        multiplicity,
        x_axis,
        y_axis,
        values: Vec::new(),
        samples,
    };
    let k = subdivisions;
    grid.values = (0..grid.y_axis.len())
        .map(|j| (0..grid.x_axis.len()).map(|i| grid.node_value(j, i, k)).collect())
        .collect();
    Ok(grid)
}

impl SpmGrid {
    /// Dense node (j, i) with its cell and fractions fixed by index, so
    /// lattice nodes are copied exactly.
    fn node_value(&self, j: usize, i: usize, k: usize) -> f64 {
        let (cj, tj) = (j / k, (j % k) as f64 / k as f64);
        let (ci, ti) = (i / k, (i % k) as f64 / k as f64);
        let cj1 = (cj + 1).min(self.lattice_y.len() - 1);
        let ci1 = (ci + 1).min(self.lattice_x.len() - 1);
        let top = lerp(self.lattice[cj][ci], self.lattice[cj][ci1], ti);
        let bot = lerp(self.lattice[cj1][ci], self.lattice[cj1][ci1], ti);
        lerp(top, bot, tj)
    }

    fn y_coord(&self, y: f64) -> f64 {
        if self.log_y {
            y.log10()
        } else {
            y
        }
    }

    /// Bilinear AP at (y, distance); `None` outside the lattice.
    pub fn eval(&self, y: f64, x: f64) -> Option<f64> {
        let (j, tj) = locate(&self.lattice_y.iter().map(|v| self.y_coord(*v)).collect::<Vec<_>>(), self.y_coord(y))?;
        let (i, ti) = locate(&self.lattice_x, x)?;
        let top = lerp(self.lattice[j][i], self.lattice[j][i + 1], ti);
        let bot = lerp(self.lattice[j + 1][i], self.lattice[j + 1][i + 1], ti);
        Some(lerp(top, bot, tj))
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }
}

/// Cell index and fraction of `v` in ascending `nodes`.
fn locate(nodes: &[f64], v: f64) -> Option<(usize, f64)> {
    let n = nodes.len();
    if !(v >= nodes[0] && v <= nodes[n - 1]) {
        return None;
    }
    let i = nodes.partition_point(|&x| x <= v).clamp(1, n - 1) - 1;
    Some((i, (v - nodes[i]) / (nodes[i + 1] - nodes[i])))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub level: f64,
    /// `(distance_m, y)` vertices.
    pub points: Vec<(f64, f64)>,
    pub closed: bool,
}

/// Edge of the dense grid: (horizontal?, row, col) of its first node.
type EdgeKey = (bool, usize, usize);

/// Marching-squares iso-lines of the dense grid. Vertices lie on dense cell
/// edges, interpolated linearly in (distance, y or log y).
pub fn contours(grid: &SpmGrid, levels: &[f64]) -> Vec<Contour> {
    let mut out = Vec::new();
    for &level in levels {
        out.extend(level_contours(grid, level));
    }
    out
}

fn level_contours(grid: &SpmGrid, level: f64) -> Vec<Contour> {
    let v = &grid.values;
    let (ny, nx) = (grid.y_axis.len(), grid.x_axis.len());
    let above = |j: usize, i: usize| v[j][i] >= level;
    let mut points: BTreeMap<EdgeKey, (f64, f64)> = BTreeMap::new();
    let ycoord: Vec<f64> = grid.y_axis.iter().map(|y| grid.y_coord(*y)).collect();
    let from_coord = |c: f64| if grid.log_y { 10f64.powf(c) } else { c };
    let mut crossing = |key: EdgeKey| -> Option<EdgeKey> {
        let (horiz, j, i) = key;
        let (j1, i1) = if horiz { (j, i + 1) } else { (j + 1, i) };
        if above(j, i) == above(j1, i1) {
            return None;
        }
        points.entry(key).or_insert_with(|| {
            let t = (level - v[j][i]) / (v[j1][i1] - v[j][i]);
            if horiz {
                (lerp(grid.x_axis[i], grid.x_axis[i1], t), grid.y_axis[j])
            } else {
                (grid.x_axis[i], from_coord(lerp(ycoord[j], ycoord[j1], t)))
            }
        });
        Some(key)
    };
    let mut segments: Vec<(EdgeKey, EdgeKey)> = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            // edges: top, right, bottom, left
            let e = [(true, j, i), (false, j, i + 1), (true, j + 1, i), (false, j, i)];
            let hits: Vec<EdgeKey> = e.iter().filter_map(|k| crossing(*k)).collect();
            match hits.len() {
                2 => segments.push((hits[0], hits[1])),
                4 => {
                    // saddle: split by the cell-center value
                    let center = (v[j][i] + v[j][i + 1] + v[j + 1][i] + v[j + 1][i + 1]) / 4.0;
                    if (center >= level) == above(j, i) {
                        segments.push((e[0], e[1]));
                        segments.push((e[2], e[3]));
                    } else {
                        segments.push((e[0], e[3]));
                        segments.push((e[1], e[2]));
                    }
                }
                _ => {}
            }
        }
    }
    chain(&segments)
        .into_iter()
        .map(|(keys, closed)| Contour {
            level,
            points: keys.iter().map(|k| points[k]).collect(),
            closed,
        })
        .collect()
}

/// Joins segments sharing edge keys into polylines.
fn chain(segments: &[(EdgeKey, EdgeKey)]) -> Vec<(Vec<EdgeKey>, bool)> {
    let mut adj: BTreeMap<EdgeKey, Vec<usize>> = BTreeMap::new();
    for (s, (a, b)) in segments.iter().enumerate() {
        adj.entry(*a).or_default().push(s);
        adj.entry(*b).or_default().push(s);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    let walk = |start: EdgeKey, used: &mut Vec<bool>| -> Vec<EdgeKey> {
        let mut line = vec![start];
        let mut at = start;
        while let Some(&s) = adj[&at].iter().find(|&&s| !used[s]) {
            used[s] = true;
            let (a, b) = segments[s];
            at = if a == at { b } else { a };
            line.push(at);
        }
        line
    };
    // open lines start at degree-1 endpoints
    let ends: Vec<EdgeKey> = adj.iter().filter(|(_, s)| s.len() == 1).map(|(k, _)| *k).collect();
    for k in ends {
        if adj[&k].iter().all(|&s| used[s]) {
            continue;
        }
        lines.push((walk(k, &mut used), false));
    }
    for s in 0..segments.len() {
        if !used[s] {
            let line = walk(segments[s].0, &mut used);
            lines.push((line, true));
        }
    }
    lines
}

const CSV_CORNER: &str = "distance_m";

/// Dense grid as CSV: header of distances, first column of y values.
pub fn grid_csv(grid: &SpmGrid) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![format!("{}\\{}", grid.axis.key(), CSV_CORNER)];
    header.extend(grid.x_axis.iter().map(|x| x.to_string()));
    w.write_record(&header)?;
    for (y, row) in grid.y_axis.iter().zip(&grid.values) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))
}

/// Parsed SPM CSV: `(y values, distances, values[row][col])`.
pub type ParsedGrid = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>);

pub fn parse_grid_csv(bytes: &[u8]) -> Result<ParsedGrid> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes);
    let mut recs = r.records();
    let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{s}` in SPM CSV")));
    let header = recs.next().ok_or_else(|| Error::Data("empty SPM CSV".into()))??;
    let xs = header.iter().skip(1).map(num).collect::<Result<Vec<_>>>()?;
    let mut ys = Vec::new();
    let mut values = Vec::new();
    for rec in recs {
        let rec = rec?;
        if rec.len() != xs.len() + 1 {
            return Err(Error::Data("ragged SPM CSV".into()));
        }
        ys.push(num(&rec[0])?);
        values.push(rec.iter().skip(1).map(num).collect::<Result<Vec<_>>>()?);
    }
    Ok((ys, xs, values))
}

/// Dashed vertical marker at an OD50 distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Od50Marker {
    pub label: String,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvgStyle {
    pub width: f64,
    pub height: f64,
    pub margin: f64,
    pub contour_color: String,
    pub marker_color: String,
}

impl Default for SvgStyle {
    fn default() -> Self {
        SvgStyle {
            width: 640.0,
            height: 480.0,
            margin: 64.0,
            contour_color: "#d62728".into(),
            marker_color: "#1f77b4".into(),
        }
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grayscale map (AP 0 black, 1 white) with contours, ticks and markers.
pub fn grid_svg(grid: &SpmGrid, contours: &[Contour], markers: &[Od50Marker], style: &SvgStyle) -> String {
    let m = style.margin;
    let (pw, ph) = (style.width - 2.0 * m, style.height - 2.0 * m);
    let (x0, x1) = (grid.x_axis[0], *grid.x_axis.last().unwrap());
    let (y0, y1) = (grid.y_coord(grid.y_axis[0]), grid.y_coord(*grid.y_axis.last().unwrap()));
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * pw;
    // larger y at the top
    let sy = |y: f64| m + ph - (grid.y_coord(y) - y0) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        style.width, style.height, style.width, style.height
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, style.width, style.height);
    let _ = writeln!(s, r#"<g id="cells" shape-rendering="crispEdges">"#);
    // each dense node shades the region halfway to its neighbours
    let half = |axis: &[f64], k: usize, f: &dyn Fn(f64) -> f64| {
        let lo = if k == 0 { f(axis[0]) } else { (f(axis[k - 1]) + f(axis[k])) / 2.0 };
        let hi = if k + 1 == axis.len() { f(axis[k]) } else { (f(axis[k]) + f(axis[k + 1])) / 2.0 };
        (lo, hi)
    };
    for (j, row) in grid.values.iter().enumerate() {
        let (ya, yb) = half(&grid.y_axis, j, &|y| sy(y));
        for (i, v) in row.iter().enumerate() {
            let (xa, xb) = half(&grid.x_axis, i, &|x| sx(x));
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="rgb({g},{g},{g})"/>"#,
                xa,
                yb.min(ya),
                (xb - xa).abs(),
                (yb - ya).abs()
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="contours" fill="none" stroke="{}" stroke-width="1.5">"#, xml_escape(&style.contour_color));
    for c in contours {
        let mut d = String::new();
        for (k, (x, y)) in c.points.iter().enumerate() {
            let _ = write!(d, "{}{:.3} {:.3} ", if k == 0 { "M" } else { "L" }, sx(*x), sy(*y));
        }
        if c.closed {
            d.push('Z');
        }
        let _ = writeln!(s, r#"<path data-level="{}" d="{}"/>"#, c.level, d.trim_end());
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="markers" stroke="{}" stroke-width="1.5" stroke-dasharray="6 4">"#, xml_escape(&style.marker_color));
    for mk in markers.iter().filter(|mk| mk.distance_m >= x0 && mk.distance_m <= x1) {
        let x = sx(mk.distance_m);
        let _ = writeln!(s, r#"<line x1="{x:.3}" y1="{m:.3}" x2="{x:.3}" y2="{:.3}"><title>{}</title></line>"#, m + ph, xml_escape(&mk.label));
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="axes" stroke="black" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none"/>"#);
    for x in &grid.lattice_x {
        let px = sx(*x);
        let _ = writeln!(s, r#"<line x1="{px:.3}" y1="{:.3}" x2="{px:.3}" y2="{:.3}"/>"#, m + ph, m + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{px:.3}" y="{:.3}" text-anchor="middle" stroke="none">{}</text>"#, m + ph + 18.0, x);
    }
    for y in &grid.lattice_y {
        let py = sy(*y);
        let _ = writeln!(s, r#"<line x1="{:.3}" y1="{py:.3}" x2="{m:.3}" y2="{py:.3}"/>"#, m - 5.0);
        let _ = writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="end" stroke="none">{}</text>"#, m - 8.0, py + 4.0, tick_label(*y));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" stroke="none">Distance (m)</text>"#,
        m + pw / 2.0,
        style.height - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.3}" text-anchor="middle" stroke="none" transform="rotate(-90 16 {:.3})">{}</text>"#,
        m + ph / 2.0,
        m + ph / 2.0,
        xml_escape(grid.axis.label())
    );
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

fn tick_label(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v}")
    } else if v.abs() >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}").trim_end_matches('0').to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Svg,
}

/// Writes the grid as CSV, or as SVG with contours and markers.
pub fn emit(grid: &SpmGrid, contours: &[Contour], markers: &[Od50Marker], format: EmitFormat, style: &SvgStyle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        EmitFormat::Csv => grid_csv(grid)?,
        EmitFormat::Svg => grid_svg(grid, contours, markers, style).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
