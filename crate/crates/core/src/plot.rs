//! SVG drawings of jet fields, fan diagrams and trajectories.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dsl::{Expr, SymbolTable};
use crate::io::TrajectoryTable;
use crate::jet::{extract_ab, JetPoint};
use crate::model::{pushforward_at, JetField, ModelError};
use crate::quantile::{FanPoint, FanReport};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("unsupported plot: {0}")]
    Unsupported(String),
    #[error("invalid plot specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    fn check(&self) -> Result<(), PlotError> {
        if !(self.xmax > self.xmin && self.ymax > self.ymin) {
            return Err(PlotError::Spec(format!("empty bounds {self:?}")));
        }
        Ok(())
    }

    fn including(points: impl Iterator<Item = [f64; 2]>) -> Option<Self> {
        let mut b: Option<Bounds> = None;
        for [x, y] in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            b = Some(match b {
                None => Bounds {
                    xmin: x,
                    xmax: x,
                    ymin: y,
                    ymax: y,
                },
                Some(b) => Bounds {
                    xmin: b.xmin.min(x),
                    xmax: b.xmax.max(x),
                    ymin: b.ymin.min(y),
                    ymax: b.ymax.max(y),
                },
            });
        }
        b.map(|b| b.padded())
    }

    fn padded(self) -> Self {
        let px = 0.05 * (self.xmax - self.xmin).max(1e-9);
        let py = 0.05 * (self.ymax - self.ymin).max(1e-9);
        Bounds {
            xmin: self.xmin - px,
            xmax: self.xmax + px,
            ymin: self.ymin - py,
            ymax: self.ymax + py,
        }
    }
}

/// Anchor points of a rectangular grid, row by row from the bottom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorGrid {
    pub bounds: Bounds,
    pub nx: usize,
    pub ny: usize,
}

impl AnchorGrid {
    pub fn anchors(&self) -> Result<Vec<[f64; 2]>, PlotError> {
        self.bounds.check()?;
        if self.nx < 2 || self.ny < 2 {
            return Err(PlotError::Spec("grid needs at least two points per axis".into()));
        }
        let b = &self.bounds;
        let at = |lo: f64, hi: f64, k: usize, n: usize| lo + (hi - lo) * k as f64 / (n - 1) as f64;
        Ok((0..self.ny)
            .flat_map(|j| (0..self.nx).map(move |i| [at(b.xmin, b.xmax, i, self.nx), at(b.ymin, b.ymax, j, self.ny)]))
            .collect())
    }
}

/// A jet to draw and the point it is drawn at.
#[derive(Debug, Clone)]
pub struct Glyph {
    pub anchor: [f64; 2],
    pub jet: JetPoint,
}

fn planar(field: &dyn JetField) -> Result<(), PlotError> {
    if field.n() != 2 {
        return Err(PlotError::Unsupported(format!("field plots need two states, got {}", field.n())));
    }
    Ok(())
}

/// The field's jets at the grid anchors.
pub fn glyphs(field: &dyn JetField, grid: &AnchorGrid, t: f64) -> Result<Vec<Glyph>, PlotError> {
    planar(field)?;
    grid.anchors()?
        .into_iter()
        .map(|anchor| {
            Ok(Glyph {
                anchor,
                jet: field.jet(&anchor, t)?,
            })
        })
        .collect()
}

/// Jets of the field pushed through `map`, drawn at the images of the anchors.
pub fn pushed_glyphs(
    field: &dyn JetField,
    map: &[Expr],
    symbols: &SymbolTable,
    grid: &AnchorGrid,
    t: f64,
) -> Result<Vec<Glyph>, PlotError> {
    planar(field)?;
    if map.len() != 2 {
        return Err(PlotError::Unsupported("the map must be planar".into()));
    }
    grid.anchors()?
        .into_iter()
        .map(|x| {
            let jet = pushforward_at(field, map, symbols, &x, t)?;
            let v = jet.value();
            Ok(Glyph {
                anchor: [v[0], v[1]],
                jet,
            })
        })
        .collect()
}

const DEGENERATE: f64 = 1e-14;

/// Quadratic Taylor arcs `x + b_α s + ½ H_αα s²`, `s ∈ [−ε, ε]`, one per driver;
/// drivers with vanishing first and second order parts draw nothing.
pub fn curve_arcs(glyph: &Glyph, eps: f64, samples: usize) -> Vec<Vec<[f64; 2]>> {
    let coords = glyph.jet.coords();
    let mut arcs = Vec::new();
    for alpha in 0..glyph.jet.d() {
        let first: Vec<f64> = coords.iter().map(|c| c.grad()[alpha]).collect();
        let second: Vec<f64> = coords.iter().map(|c| c.hess(alpha, alpha)).collect();
        if first.iter().chain(&second).all(|v| v.abs() < DEGENERATE) {
            continue;
        }
        arcs.push(
            (0..=samples)
                .map(|k| {
                    let s = eps * (2.0 * k as f64 / samples as f64 - 1.0);
                    let p = |i: usize| glyph.anchor[i] + first[i] * s + 0.5 * second[i] * s * s;
                    [p(0), p(1)]
                })
                .collect(),
        );
    }
    arcs
}

/// Image of the ε-sphere of driver space under the canonical representative,
/// and its centre `x + a ε²/d` (the drift marker).
pub fn ellipse(glyph: &Glyph, eps: f64, samples: usize) -> (Vec<[f64; 2]>, [f64; 2]) {
    let (a, b) = extract_ab(&glyph.jet);
    let d = glyph.jet.d();
    let centre = [
        glyph.anchor[0] + a[0] * eps * eps / d as f64,
        glyph.anchor[1] + a[1] * eps * eps / d as f64,
    ];
    let outline = (0..samples)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / samples as f64;
            let u = [eps * theta.cos(), eps * theta.sin()];
            let image = |i: usize| centre[i] + (0..d.min(2)).map(|al| b[(i, al)] * u[al]).sum::<f64>();
            [image(0), image(1)]
        })
        .collect();
    (outline, centre)
}

const WIDTH: f64 = 800.0;
const MARGIN: f64 = 40.0;
/// Room for the y tick labels.
const LEFT: f64 = 80.0;
const GRAPH_HEIGHT: f64 = 500.0;

struct Canvas {
    bounds: Bounds,
    height: f64,
    body: String,
}

impl Canvas {
    /// Equal axis scales for geometric plots, a fixed height for graphs.
    fn new(bounds: Bounds, equal_scales: bool) -> Self {
        let aspect = (bounds.ymax - bounds.ymin) / (bounds.xmax - bounds.xmin);
        let height = if equal_scales {
            ((WIDTH - LEFT - MARGIN) * aspect).clamp(200.0, 1600.0) + 2.0 * MARGIN
        } else {
            GRAPH_HEIGHT
        };
        Self {
            bounds,
            height,
            body: String::new(),
        }
    }

    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let b = &self.bounds;
        let x = LEFT + (p[0] - b.xmin) / (b.xmax - b.xmin) * (WIDTH - LEFT - MARGIN);
        let y = self.height - MARGIN - (p[1] - b.ymin) / (b.ymax - b.ymin) * (self.height - 2.0 * MARGIN);
        (x, y)
    }

    fn path(&mut self, points: &[[f64; 2]], closed: bool, style: &str) {
        let mut d = String::new();
        for (k, p) in points.iter().filter(|p| p[0].is_finite() && p[1].is_finite()).enumerate() {
            let (x, y) = self.px(*p);
            let _ = write!(d, "{}{x:.3},{y:.3}", if k == 0 { "M" } else { " L" });
        }
        if d.is_empty() {
            return;
        }
        if closed {
            d.push_str(" Z");
        }
        let _ = writeln!(self.body, r#"<path d="{d}" {style}/>"#);
    }

    /// Anchor dot carrying its data coordinates.
    fn anchor(&mut self, p: [f64; 2]) {
        let (x, y) = self.px(p);
        let _ = writeln!(
            self.body,
            r#"<circle class="anchor" cx="{x:.3}" cy="{y:.3}" r="1.5" data-x="{}" data-y="{}"/>"#,
            p[0], p[1]
        );
    }

    fn star(&mut self, p: [f64; 2], r: f64) {
        let (cx, cy) = self.px(p);
        let mut d = String::new();
        for k in 0..10 {
            let radius = if k % 2 == 0 { r } else { 0.4 * r };
            let angle = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
            let (x, y) = (cx + radius * angle.cos(), cy + radius * angle.sin());
            let _ = write!(d, "{}{x:.3},{y:.3}", if k == 0 { "M" } else { " L" });
        }
        let _ = writeln!(
            self.body,
            r#"<path class="drift" d="{d} Z" fill="crimson" data-x="{}" data-y="{}"/>"#,
            p[0], p[1]
        );
    }

    fn text(&mut self, p: (f64, f64), s: &str, anchor: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.3}" y="{:.3}" font-size="12" text-anchor="{anchor}">{}</text>"#,
            p.0,
            p.1,
            escape(s)
        );
    }

    fn finish(mut self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let b = self.bounds;
        let frame = [[b.xmin, b.ymin], [b.xmax, b.ymin], [b.xmax, b.ymax], [b.xmin, b.ymax]];
        self.path(&frame, true, r##"fill="none" stroke="#999" stroke-width="0.5""##);
        let (x0, y0) = self.px([b.xmin, b.ymin]);
        let (x1, y1) = self.px([b.xmax, b.ymax]);
        self.text((x0, y0 + 16.0), &format!("{:.4}", b.xmin), "start");
        self.text((x1, y0 + 16.0), &format!("{:.4}", b.xmax), "end");
        self.text((x0 - 4.0, y0), &format!("{:.4}", b.ymin), "end");
        self.text((x0 - 4.0, y1 + 10.0), &format!("{:.4}", b.ymax), "end");
        self.text(((x0 + x1) / 2.0, y0 + 30.0), xlabel, "middle");
        self.text((x0 - 4.0, (y0 + y1) / 2.0), ylabel, "end");
        self.text(((LEFT + WIDTH - MARGIN) / 2.0, MARGIN / 2.0), title, "middle");
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{h:.0}\" viewBox=\"0 0 {WIDTH} {h:.0}\" data-format-version=\"1\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            h = self.height
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const ARC_SAMPLES: usize = 24;
const ELLIPSE_SAMPLES: usize = 48;

fn glyph_bounds(glyphs: &[Glyph], extra: impl Fn(&Glyph) -> Vec<[f64; 2]>) -> Result<Bounds, PlotError> {
    Bounds::including(glyphs.iter().flat_map(|g| {
        let mut pts = extra(g);
        pts.push(g.anchor);
        pts
    }))
    .ok_or_else(|| PlotError::Spec("nothing to draw".into()))
}

/// Quadratic arcs at every anchor, with a dot at each anchor.
pub fn render_field_of_curves(glyphs: &[Glyph], eps: f64, title: &str, labels: [&str; 2]) -> Result<String, PlotError> {
    if !(eps > 0.0) {
        return Err(PlotError::Spec(format!("eps must be positive, got {eps}")));
    }
    let arcs: Vec<Vec<Vec<[f64; 2]>>> = glyphs.iter().map(|g| curve_arcs(g, eps, ARC_SAMPLES)).collect();
    let bounds = glyph_bounds(glyphs, |_| Vec::new())?;
    let bounds = Bounds::including(
        arcs.iter()
            .flatten()
            .flatten()
            .copied()
            .chain(glyphs.iter().map(|g| g.anchor))
            .chain([[bounds.xmin, bounds.ymin], [bounds.xmax, bounds.ymax]]),
    )
    .unwrap_or(bounds);
    let mut c = Canvas::new(bounds, true);
    for (g, arcs) in glyphs.iter().zip(&arcs) {
        for arc in arcs {
            c.path(arc, false, r#"class="arc" fill="none" stroke="steelblue" stroke-width="1""#);
        }
        c.anchor(g.anchor);
    }
    Ok(c.finish(title, labels[0], labels[1]))
}

/// Images of ε-circles under the canonical representatives, with the drift
/// marked by a star at the centre.
pub fn render_ellipse_field(glyphs: &[Glyph], eps: f64, title: &str, labels: [&str; 2]) -> Result<String, PlotError> {
    if !(eps > 0.0) {
        return Err(PlotError::Spec(format!("eps must be positive, got {eps}")));
    }
    let shapes: Vec<(Vec<[f64; 2]>, [f64; 2])> = glyphs.iter().map(|g| ellipse(g, eps, ELLIPSE_SAMPLES)).collect();
    let bounds = Bounds::including(
        shapes
            .iter()
            .flat_map(|(o, c)| o.iter().copied().chain([*c]))
            .chain(glyphs.iter().map(|g| g.anchor)),
    )
    .ok_or_else(|| PlotError::Spec("nothing to draw".into()))?;
    let mut c = Canvas::new(bounds, true);
    for (g, (outline, centre)) in glyphs.iter().zip(&shapes) {
        c.path(outline, true, r#"class="ellipse" fill="none" stroke="steelblue" stroke-width="1""#);
        c.anchor(g.anchor);
        c.star(*centre, 4.0);
    }
    Ok(c.finish(title, labels[0], labels[1]))
}

/// Fan curves per level, and Monte Carlo quantiles with their intervals.
pub fn render_fan(curves: &[FanPoint], report: Option<&FanReport>, title: &str, ylabel: &str) -> Result<String, PlotError> {
    let mut alphas: Vec<f64> = curves.iter().map(|p| p.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let mut pts: Vec<[f64; 2]> = curves.iter().map(|p| [p.t, p.value]).collect();
    if let Some(r) = report {
        for row in &r.rows {
            pts.push([row.t, row.monte_carlo - row.half_width]);
            pts.push([row.t, row.monte_carlo + row.half_width]);
            pts.push([row.t, row.expansion]);
        }
    }
    let bounds = Bounds::including(pts.into_iter()).ok_or_else(|| PlotError::Spec("nothing to draw".into()))?;
    let mut c = Canvas::new(bounds, false);
    for &alpha in &alphas {
        let mut line: Vec<[f64; 2]> = curves
            .iter()
            .filter(|p| p.alpha == alpha)
            .map(|p| [p.t, p.value])
            .collect();
        line.sort_by(|p, q| p[0].total_cmp(&q[0]));
        c.path(&line, false, r#"class="fan" fill="none" stroke="steelblue" stroke-width="1.5""#);
    }
    if let Some(r) = report {
        let mut levels: Vec<f64> = r.rows.iter().map(|row| row.alpha).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for alpha in levels {
            let mut line: Vec<[f64; 2]> = r.rows.iter().filter(|x| x.alpha == alpha).map(|x| [x.t, x.expansion]).collect();
            line.sort_by(|p, q| p[0].total_cmp(&q[0]));
            c.path(&line, false, r#"class="expansion" fill="none" stroke="gray" stroke-dasharray="4 3""#);
        }
        for row in &r.rows {
            c.path(
                &[[row.t, row.monte_carlo - row.half_width], [row.t, row.monte_carlo + row.half_width]],
                false,
                r#"class="band" stroke="crimson" stroke-width="2""#,
            );
        }
    }
    Ok(c.finish(title, "t", ylabel))
}

/// Trajectories: the first two states against each other, or the single
/// state against time.
pub fn render_trajectories(table: &TrajectoryTable, max_paths: usize, title: &str) -> Result<String, PlotError> {
    let planar = table.states.len() >= 2;
    let point = |row: &(f64, Vec<f64>)| if planar { [row.1[0], row.1[1]] } else { [row.0, row.1[0]] };
    let shown: Vec<&Vec<(f64, Vec<f64>)>> = table.paths.iter().take(max_paths).collect();
    let bounds = Bounds::including(shown.iter().flat_map(|p| p.iter().map(point)))
        .ok_or_else(|| PlotError::Spec("no finite trajectory points".into()))?;
    let mut c = Canvas::new(bounds, planar);
    for path in shown {
        let line: Vec<[f64; 2]> = path.iter().map(point).collect();
        c.path(&line, false, r#"class="trajectory" fill="none" stroke="steelblue" stroke-width="0.6""#);
    }
    let (xl, yl) = if planar {
        (table.states[0].as_str(), table.states[1].as_str())
    } else {
        ("t", table.states[0].as_str())
    };
    Ok(c.finish(title, xl, yl))
}

/// Data coordinates of the anchors in an SVG written by this module.
pub fn svg_anchors(svg: &str) -> Vec<[f64; 2]> {
    let attr = |line: &str, key: &str| -> Option<f64> {
        let start = line.find(key)? + key.len();
        let end = start + line[start..].find('"')?;
        line[start..end].parse().ok()
    };
    svg.lines()
        .filter(|l| l.contains(r#"class="anchor""#))
        .filter_map(|l| Some([attr(l, "data-x=\"")?, attr(l, "data-y=\"")?]))
        .collect()
}
