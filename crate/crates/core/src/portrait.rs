//! Phase portraits of models with a two-dimensional hidden state.
//!
//! A portrait shows the autonomous field `h ↦ βΞ(h)` on a grid, the forced
//! trajectories of selected samples, and the decision regions
//! `argmax_j (A h + b)_j`. With two classes and an invertible `A` the regions
//! are split by a line through `h₀ = −A⁻¹b`; that anchor and the rows of `A`
//! are drawn as an overlay.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dictionary::DictionarySpec;
use crate::error::{NaedError, Result};
use crate::integrator::{solve_forward, RhsWork, SolverConfig};
use crate::model::{argmax, Parameters};
use crate::signal::Dataset;

pub const CSV_HEADER: &str = "kind,h1,h2,v1,v2,class,sample_id,t";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortraitFormat {
    #[default]
    Svg,
    Csv,
}

impl FromStr for PortraitFormat {
    type Err = NaedError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "svg" => Ok(PortraitFormat::Svg),
            "csv" => Ok(PortraitFormat::Csv),
            _ => Err(NaedError::invalid("portrait format", format!("expected `svg` or `csv`, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub h1_min: f64,
    pub h1_max: f64,
    pub h2_min: f64,
    pub h2_max: f64,
}

impl Window {
    pub fn new(h1_min: f64, h1_max: f64, h2_min: f64, h2_max: f64) -> Result<Self> {
        let w = Self {
            h1_min,
            h1_max,
            h2_min,
            h2_max,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.h1_min, self.h1_max, self.h2_min, self.h2_max];
        if all.iter().any(|v| !v.is_finite()) || self.h1_min >= self.h1_max || self.h2_min >= self.h2_max {
            return Err(NaedError::invalid("window", "bounds must be finite with min < max"));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.h1_max - self.h1_min
    }

    pub fn height(&self) -> f64 {
        self.h2_max - self.h2_min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortraitSpec {
    pub window: Window,
    /// Grid points per axis, at least 2.
    pub grid_resolution: usize,
    /// Samples whose trajectories are drawn; empty picks the first two of
    /// each class.
    pub sample_ids: Vec<String>,
    pub format: PortraitFormat,
    pub substeps: usize,
}

impl PortraitSpec {
    pub fn new(window: Window, grid_resolution: usize) -> Self {
        Self {
            window,
            grid_resolution,
            sample_ids: Vec::new(),
            format: PortraitFormat::Svg,
            substeps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.grid_resolution < 2 {
            return Err(NaedError::invalid("grid resolution", "must be at least 2"));
        }
        if self.substeps == 0 {
            return Err(NaedError::invalid("substeps", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub h: [f64; 2],
    /// `βΞ(h)`, unscaled.
    pub v: [f64; 2],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrajectory {
    pub id: String,
    pub label: Option<usize>,
    pub predicted: usize,
    pub times: Vec<f64>,
    pub states: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub anchor: [f64; 2],
    pub rows: [[f64; 2]; 2],
}

impl Overlay {
    /// Class from the geometric construction: which side of the line through
    /// the anchor, normal to `a₀ − a₁`, the point lies on.
    pub fn class_of(&self, h: [f64; 2]) -> usize {
        let normal = [self.rows[0][0] - self.rows[1][0], self.rows[0][1] - self.rows[1][1]];
        let side = normal[0] * (h[0] - self.anchor[0]) + normal[1] * (h[1] - self.anchor[1]);
        if side >= 0.0 {
            0
        } else {
            1
        }
    }
}

/// Complex number as `(re, im)`.
pub type Eigenvalue = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portrait {
    pub window: Window,
    pub resolution: usize,
    /// Row-major, `h2` varying slowest.
    pub grid: Vec<GridPoint>,
    pub trajectories: Vec<SampleTrajectory>,
    pub overlay: Option<Overlay>,
    /// Eigenvalues of `β D_hΞ(0)`, the linear part of the field.
    pub eigenvalues: [Eigenvalue; 2],
    pub max_speed: f64,
    pub classes: usize,
}

/// `argmax_j (A h + b)_j`.
pub fn region_class(params: &Parameters, h: &[f64]) -> usize {
    argmax(&params.logits(h))
}

/// Anchor `−A⁻¹b` and rows of `A`, when `|Y| = 2` and `A` is invertible.
pub fn overlay(params: &Parameters) -> Option<Overlay> {
    if params.num_classes() != 2 || params.hidden_dim() != 2 {
        return None;
    }
    let a = &params.readout;
    let (a11, a12, a21, a22) = (a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1));
    let det = a11 * a22 - a12 * a21;
    let scale = (a11.abs() + a12.abs()).max(a21.abs() + a22.abs());
    if det == 0.0 || det.abs() <= 1e-12 * scale * scale {
        return None;
    }
    let (b1, b2) = (params.bias[0], params.bias[1]);
    let anchor = [-(a22 * b1 - a12 * b2) / det, -(-a21 * b1 + a11 * b2) / det];
    Some(Overlay {
        anchor,
        rows: [[a11, a12], [a21, a22]],
    })
}

/// Eigenvalues of the 2×2 matrix `β D_hΞ(0)`.
pub fn linear_part_eigenvalues(params: &Parameters, spec: &DictionarySpec) -> Result<[Eigenvalue; 2]> {
    require_planar(spec)?;
    let mut work = RhsWork::new(spec);
    let mut j = [0.0; 4];
    work.linearization(params, spec, &[0.0, 0.0], &mut j);
    let half_trace = 0.5 * (j[0] + j[3]);
    let det = j[0] * j[3] - j[1] * j[2];
    let disc = half_trace * half_trace - det;
    Ok(if disc >= 0.0 {
        let r = disc.sqrt();
        [(half_trace + r, 0.0), (half_trace - r, 0.0)]
    } else {
        let r = (-disc).sqrt();
        [(half_trace, r), (half_trace, -r)]
    })
}

fn require_planar(spec: &DictionarySpec) -> Result<()> {
    if spec.hidden_dim() != 2 {
        return Err(NaedError::UnsupportedHiddenDim(spec.hidden_dim()));
    }
    Ok(())
}

fn select_ids(dataset: &Dataset, requested: &[String]) -> Result<Vec<usize>> {
    if requested.is_empty() {
        let mut taken = vec![0usize; dataset.num_classes];
        let mut picked = Vec::new();
        for (i, ts) in dataset.series.iter().enumerate() {
            if let Some(c) = ts.label() {
                if taken[c] < 2 {
                    taken[c] += 1;
                    picked.push(i);
                }
            }
        }
        return Ok(picked);
    }
    requested
        .iter()
        .map(|id| {
            dataset
                .series
                .iter()
                .position(|ts| ts.id() == id)
                .ok_or_else(|| NaedError::invalid("sample ids", format!("no sample `{id}` in the dataset")))
        })
        .collect()
}

/// Window around the selected trajectories and the origin, padded by 10%.
pub fn fitted_window(
    params: &Parameters,
    spec: &DictionarySpec,
    dataset: &Dataset,
    sample_ids: &[String],
    substeps: usize,
) -> Result<Window> {
    require_planar(spec)?;
    params.check_shapes(spec)?;
    let cfg = SolverConfig::with_substeps(substeps.max(1));
    let (mut lo, mut hi) = ([0.0f64; 2], [0.0f64; 2]);
    for i in select_ids(dataset, sample_ids)? {
        let traj = solve_forward(params, spec, &dataset.series[i], cfg)?;
        for st in traj.states.chunks(2) {
            for a in 0..2 {
                lo[a] = lo[a].min(st[a]);
                hi[a] = hi[a].max(st[a]);
            }
        }
    }
    let mut w = [0.0; 4];
    for a in 0..2 {
        let pad = (0.1 * (hi[a] - lo[a])).max(1e-3);
        w[2 * a] = lo[a] - pad;
        w[2 * a + 1] = hi[a] + pad;
    }
    Window::new(w[0], w[1], w[2], w[3])
}

pub fn compute_portrait(params: &Parameters, spec: &DictionarySpec, dataset: &Dataset, pspec: &PortraitSpec) -> Result<Portrait> {
    require_planar(spec)?;
    pspec.validate()?;
    params.check_shapes(spec)?;
    let res = pspec.grid_resolution;
    let w = pspec.window;
    let step = [w.width() / (res - 1) as f64, w.height() / (res - 1) as f64];

    let grid: Vec<GridPoint> = (0..res * res)
        .into_par_iter()
        .map_init(
            || RhsWork::new(spec),
            |work, idx| {
                let (row, col) = (idx / res, idx % res);
                let h = [w.h1_min + col as f64 * step[0], w.h2_min + row as f64 * step[1]];
                let mut v = [0.0; 2];
                work.rhs(params, spec, &h, &vec![0.0; params.input_dim()], &mut v);
                GridPoint {
                    h,
                    v,
                    class: region_class(params, &h),
                }
            },
        )
        .collect();
    let max_speed = grid.iter().map(|g| g.v[0].hypot(g.v[1])).fold(0.0, f64::max);

    let cfg = SolverConfig::with_substeps(pspec.substeps);
    let trajectories = select_ids(dataset, &pspec.sample_ids)?
        .into_iter()
        .map(|i| {
            let ts = &dataset.series[i];
            let traj = solve_forward(params, spec, ts, cfg)?;
            let states: Vec<[f64; 2]> = traj.states.chunks(2).map(|s| [s[0], s[1]]).collect();
            Ok(SampleTrajectory {
                id: ts.id().to_string(),
                label: ts.label(),
                predicted: region_class(params, traj.final_state()),
                times: traj.grid.times().to_vec(),
                states,
            })
        })
        .collect::<Result<_>>()?;

    Ok(Portrait {
        window: w,
        resolution: res,
        grid,
        trajectories,
        overlay: overlay(params),
        eigenvalues: linear_part_eigenvalues(params, spec)?,
        max_speed,
        classes: params.num_classes(),
    })
}

impl Portrait {
    fn cell(&self) -> f64 {
        let n = (self.resolution - 1) as f64;
        (self.window.width() / n).min(self.window.height() / n)
    }

    /// Arrow vector scaled so the fastest arrow spans 80% of a grid cell.
    pub fn scaled_arrow(&self, g: &GridPoint) -> [f64; 2] {
        if self.max_speed == 0.0 {
            return [0.0, 0.0];
        }
        let s = 0.8 * self.cell() / self.max_speed;
        [g.v[0] * s, g.v[1] * s]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for g in &self.grid {
            let _ = writeln!(out, "grid,{},{},{},{},{},,", g.h[0], g.h[1], g.v[0], g.v[1], g.class);
        }
        for tr in &self.trajectories {
            for (t, s) in tr.times.iter().zip(&tr.states) {
                let _ = writeln!(out, "trajectory,{},{},,,{},{},{}", s[0], s[1], tr.predicted, tr.id, t);
            }
        }
        if let Some(o) = &self.overlay {
            let _ = writeln!(out, "anchor,{},{},,,,,", o.anchor[0], o.anchor[1]);
            for (j, r) in o.rows.iter().enumerate() {
                let _ = writeln!(out, "readout,{},{},{},{},{},,", o.anchor[0], o.anchor[1], r[0], r[1], j);
            }
        }
        for (re, im) in &self.eigenvalues {
            let _ = writeln!(out, "eigenvalue,,,{re},{im},,,");
        }
        out
    }

    pub fn to_svg(&self) -> String {
        let w = &self.window;
        let cell = self.cell();
        let font = 0.03 * w.width().max(w.height());
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{} {} {} {}" width="640" height="{}">"#,
            w.h1_min,
            -w.h2_max,
            w.width(),
            w.height(),
            (640.0 * w.height() / w.width()).round()
        );
        s.push_str(r#"<g transform="scale(1,-1)">"#);
        s.push('\n');

        let half = [0.5 * w.width() / (self.resolution - 1) as f64, 0.5 * w.height() / (self.resolution - 1) as f64];
        for g in &self.grid {
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="0.18" stroke="none"/>"#,
                g.h[0] - half[0],
                g.h[1] - half[1],
                2.0 * half[0],
                2.0 * half[1],
                PALETTE[g.class % PALETTE.len()]
            );
        }
        for g in &self.grid {
            let a = self.scaled_arrow(g);
            if a == [0.0, 0.0] {
                continue;
            }
            let tip = [g.h[0] + a[0], g.h[1] + a[1]];
            let len = a[0].hypot(a[1]);
            let head = 0.3 * len;
            let (ux, uy) = (a[0] / len, a[1] / len);
            let left = [tip[0] - head * (ux - 0.5 * uy), tip[1] - head * (uy + 0.5 * ux)];
            let right = [tip[0] - head * (ux + 0.5 * uy), tip[1] - head * (uy - 0.5 * ux)];
            let _ = writeln!(
                s,
                r##"<path d="M{} {} L{} {} M{} {} L{} {} L{} {}" stroke="#444" stroke-width="1" fill="none" vector-effect="non-scaling-stroke"/>"##,
                g.h[0], g.h[1], tip[0], tip[1], left[0], left[1], tip[0], tip[1], right[0], right[1]
            );
        }
        for tr in &self.trajectories {
            let color = PALETTE[tr.label.unwrap_or(tr.predicted) % PALETTE.len()];
            let mut d = String::new();
            for (k, p) in tr.states.iter().enumerate() {
                let _ = write!(d, "{}{} {} ", if k == 0 { "M" } else { "L" }, p[0], p[1]);
            }
            let _ = writeln!(
                s,
                r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none" vector-effect="non-scaling-stroke"><title>{}</title></path>"#,
                d.trim_end(),
                tr.id
            );
            let end = tr.states.last().copied().unwrap_or([0.0, 0.0]);
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="{}" fill="{}" stroke="black" stroke-width="1" vector-effect="non-scaling-stroke"/>"#,
                end[0],
                end[1],
                0.25 * cell,
                PALETTE[tr.predicted % PALETTE.len()]
            );
        }
        if let Some(o) = &self.overlay {
            let diag = 0.25 * w.width().hypot(w.height());
            for r in &o.rows {
                let n = r[0].hypot(r[1]).max(f64::MIN_POSITIVE);
                let _ = writeln!(
                    s,
                    r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2" vector-effect="non-scaling-stroke"/>"#,
                    o.anchor[0],
                    o.anchor[1],
                    o.anchor[0] + diag * r[0] / n,
                    o.anchor[1] + diag * r[1] / n
                );
            }
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{}" r="{}" fill="black"/>"#,
                o.anchor[0],
                o.anchor[1],
                0.3 * cell
            );
        }
        s.push_str("</g>\n");

        // legend and labels live in unflipped coordinates
        let x0 = w.h1_min + 0.02 * w.width();
        let y0 = -w.h2_max + 1.5 * font;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="white" fill-opacity="0.8"/>"#,
            x0 - 0.5 * font,
            y0 - 1.2 * font,
            18.0 * font,
            3.6 * font
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="#444" stroke-width="1" vector-effect="non-scaling-stroke"/>"##,
            x0 + 0.8 * cell
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="{font}" font-family="sans-serif">|βΞ(h)| = {:.4}</text>"#,
            x0 + cell,
            y0 + 0.35 * font,
            self.max_speed
        );
        let eig: Vec<String> = self
            .eigenvalues
            .iter()
            .map(|(re, im)| format!("{re:.4}{}{:.4}i", if *im < 0.0 { "-" } else { "+" }, im.abs()))
            .collect();
        let _ = writeln!(
            s,
            r#"<text x="{x0}" y="{}" font-size="{font}" font-family="sans-serif">eig: {}</text>"#,
            y0 + 1.6 * font,
            eig.join(", ")
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn render(&self, format: PortraitFormat) -> Vec<u8> {
        match format {
            PortraitFormat::Svg => self.to_svg().into_bytes(),
            PortraitFormat::Csv => self.to_csv().into_bytes(),
        }
    }
}

pub fn render_portrait(params: &Parameters, spec: &DictionarySpec, dataset: &Dataset, pspec: &PortraitSpec) -> Result<Vec<u8>> {
    Ok(compute_portrait(params, spec, dataset, pspec)?.render(pspec.format))
}
