//! Distribution metrics, identity-residual sweeps, and SVG plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TfmError};
use crate::flowcore::{interpolate_rows, CouplingBatch, Schedule, TimePair};
use crate::nets::TfmModel;
use crate::objectives::identity_residuals;
use crate::oracles::Oracle;
use crate::sampling::{fmt_f64, Trajectory};
use crate::tensor::Tensor;

/// Quantile levels compared per projection.
pub const QUANTILE_GRID: usize = 512;
pub const DEFAULT_PROJECTIONS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
}

/// Worker count from `TFM_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("TFM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn random_directions<R: Rng + ?Sized>(d: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Linearly interpolated quantiles of `values` at `(k + 1/2) / QUANTILE_GRID`.
fn quantiles(mut values: Vec<f64>) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    let last = values.len() - 1;
    (0..QUANTILE_GRID)
        .map(|k| {
            let pos = (k as f64 + 0.5) / QUANTILE_GRID as f64 * last as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            values[lo] + frac * (values[hi] - values[lo])
        })
        .collect()
}

fn project(points: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..points.rows()).map(|i| points.row(i).iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

fn projected_w2_sq(a: &Tensor, b: &Tensor, dir: &[f64]) -> f64 {
    let (qa, qb) = (quantiles(project(a, dir)), quantiles(project(b, dir)));
    qa.iter().zip(&qb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / QUANTILE_GRID as f64
}

/// Square root of the mean over random unit directions of the 1-D squared
/// W2 distance between the projected clouds.
pub fn sliced_w2<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, n_projections: usize, rng: &mut R) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(TfmError::Shape(format!("point clouds {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(TfmError::Precondition("empty point cloud".into()));
    }
    if n_projections == 0 {
        return Err(TfmError::Precondition("need at least one projection".into()));
    }
    let dirs = random_directions(a.cols(), n_projections, rng);
    let workers = worker_count().min(n_projections);
    let per_dir: Vec<f64> = if workers <= 1 {
        dirs.iter().map(|d| projected_w2_sq(a, b, d)).collect()
    } else {
        let chunk = n_projections.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = dirs
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|d| projected_w2_sq(a, b, d)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("projection worker")).collect()
        })
    };
    Ok((per_dir.iter().sum::<f64>() / n_projections as f64).sqrt())
}

/// One `(t, r)` cell of a residual sweep; values are means over samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub t: f64,
    pub r: f64,
    /// Residual against the posterior-mean transition state.
    pub residual_cond: f64,
    /// Residual against the ODE flow map, where the oracle defines one.
    pub residual_ode: Option<f64>,
}

/// `t_i = i / n_t` and `r_j = t_i + (1 - t_i) j / (n_r - 1)`; the `j = 0`
/// row has `r = t`.
pub fn sweep_grid(n_t: usize, n_r: usize) -> Result<Vec<TimePair>> {
    if n_t == 0 || n_r < 2 {
        return Err(TfmError::Precondition("sweep grid needs n_t >= 1 and n_r >= 2".into()));
    }
    let mut out = Vec::with_capacity(n_t * n_r);
    for i in 0..n_t {
        let t = i as f64 / n_t as f64;
        for j in 0..n_r {
            out.push(TimePair::from_offset(t, j as f64 / (n_r - 1) as f64)?);
        }
    }
    Ok(out)
}

/// Identity residuals of `model` on every pair, at states `x_t` obtained by
/// interpolating the endpoint pairs in `samples`.
pub fn residual_sweep<O: Oracle + ?Sized>(
    model: &TfmModel,
    oracle: &O,
    pairs: &[TimePair],
    samples: &CouplingBatch,
) -> Result<Vec<SweepCell>> {
    if samples.is_empty() {
        return Err(TfmError::Precondition("no sweep samples".into()));
    }
    let n = samples.len();
    let lin = Schedule::linear();
    let mut cells = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.t() >= 1.0 {
            return Err(TfmError::Precondition("sweep times must satisfy t < 1".into()));
        }
        let (t, r) = (vec![pair.t(); n], vec![pair.r(); n]);
        let x = interpolate_rows(&samples.x0, &samples.x1, &t, &lin)?;
        let velocity = oracle.velocity(&x, pair.t())?;
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / n as f64;
        let cond = oracle.transition(&x, pair.t(), pair.r())?;
        let residual_cond = mean(identity_residuals(model, &x, &t, &r, &cond, &velocity, None)?);
        let residual_ode = match oracle.flow_map(&x, pair.t(), pair.r()) {
            Ok(ode) => Some(mean(identity_residuals(model, &x, &t, &r, &ode, &velocity, None)?)),
            Err(TfmError::Precondition(_)) => None,
            Err(e) => return Err(e),
        };
        cells.push(SweepCell { t: pair.t(), r: pair.r(), residual_cond, residual_ode });
    }
    Ok(cells)
}

/// Columns `t,r,residual_cond,residual_ode`; an undefined ODE residual is
/// left empty.
pub fn write_sweep_csv<W: Write>(out: W, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "r", "residual_cond", "residual_ode"])?;
    for c in cells {
        let ode = c.residual_ode.map(fmt_f64).unwrap_or_default();
        w.write_record([fmt_f64(c.t), fmt_f64(c.r), fmt_f64(c.residual_cond), ode])?;
    }
    w.flush().map_err(|e| TfmError::io("<sweep csv>", e))?;
    Ok(())
}

pub const SOURCE_COLOR: &str = "#1f5fbf";
pub const GENERATED_COLOR: &str = "#d0312d";
pub const TARGET_COLOR: &str = "#9a9a9a";

const PANEL: f64 = 320.0;
const MARGIN: f64 = 12.0;
const TITLE_BAND: f64 = 22.0;

/// Maps data coordinates into one square panel.
struct Frame {
    lo: [f64; 2],
    span: f64,
    x0: f64,
    y0: f64,
}

impl Frame {
    fn fit(clouds: &[&Tensor], x0: f64, y0: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in clouds {
            for i in 0..c.rows() {
                for k in 0..2 {
                    lo[k] = lo[k].min(c.row(i)[k]);
                    hi[k] = hi[k].max(c.row(i)[k]);
                }
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        Self { lo, span, x0, y0 }
    }

    fn map(&self, p: &[f64]) -> (f64, f64) {
        let inner = PANEL - 2.0 * MARGIN;
        let x = self.x0 + MARGIN + (p[0] - self.lo[0]) / self.span * inner;
        let y = self.y0 + PANEL - MARGIN - (p[1] - self.lo[1]) / self.span * inner;
        (x, y)
    }
}

fn require_2d(t: &Tensor) -> Result<()> {
    if t.rank() != 2 || t.cols() != 2 {
        return Err(TfmError::Unsupported(format!("plots need [n, 2] data, got {:?}", t.shape())));
    }
    Ok(())
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn dots(out: &mut String, frame: &Frame, pts: &Tensor, color: &str, radius: f64) {
    for i in 0..pts.rows() {
        let (x, y) = frame.map(pts.row(i));
        let _ =
            writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{radius}\" fill=\"{color}\" fill-opacity=\"0.6\"/>");
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlaid scatter plots, one color per set.
pub fn render_scatter_svg(sets: &[(&Tensor, &str)]) -> Result<String> {
    for (t, _) in sets {
        require_2d(t)?;
    }
    let clouds: Vec<&Tensor> = sets.iter().map(|(t, _)| *t).collect();
    let frame = Frame::fit(&clouds, 0.0, 0.0);
    let mut out = svg_open(PANEL, PANEL);
    for (t, color) in sets {
        dots(&mut out, &frame, t, color, 1.5);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn trajectory_body(out: &mut String, frame: &Frame, traj: &Trajectory) {
    let states = traj.states();
    for i in 0..traj.n_points() {
        out.push_str(
            "<polyline fill=\"none\" stroke=\"#555555\" stroke-opacity=\"0.35\" stroke-width=\"0.6\" points=\"",
        );
        for (k, (_, batch)) in states.iter().enumerate() {
            let (x, y) = frame.map(batch.row(i));
            let sep = if k == 0 { "" } else { " " };
            let _ = write!(out, "{sep}{x:.2},{y:.2}");
        }
        out.push_str("\"/>\n");
    }
    if let (Some((_, first)), Some((_, last))) = (states.first(), states.last()) {
        dots(out, frame, first, SOURCE_COLOR, 1.5);
        dots(out, frame, last, GENERATED_COLOR, 1.5);
    }
}

/// One polyline per point through all snapshots, with start and end markers.
pub fn render_trajectory_svg(traj: &Trajectory) -> Result<String> {
    if traj.is_empty() {
        return Ok(format!("{}</svg>\n", svg_open(PANEL, PANEL)));
    }
    for (_, b) in traj.states() {
        require_2d(b)?;
    }
    let clouds: Vec<&Tensor> = traj.states().iter().map(|(_, b)| b).collect();
    let frame = Frame::fit(&clouds, 0.0, 0.0);
    let mut out = svg_open(PANEL, PANEL);
    trajectory_body(&mut out, &frame, traj);
    out.push_str("</svg>\n");
    Ok(out)
}

/// One titled panel of a side-by-side figure.
pub struct Panel<'a> {
    pub title: String,
    pub trajectory: &'a Trajectory,
    pub target: Option<&'a Tensor>,
}

/// Panels in a row sharing one coordinate frame: source points in blue,
/// generated points in red, paths in gray.
pub fn render_panel_svg(panels: &[Panel]) -> Result<String> {
    let mut clouds = Vec::new();
    for p in panels {
        for (_, b) in p.trajectory.states() {
            require_2d(b)?;
            clouds.push(b);
        }
        if let Some(t) = p.target {
            require_2d(t)?;
            clouds.push(t);
        }
    }
    let width = PANEL * panels.len().max(1) as f64;
    let mut out = svg_open(width, PANEL + TITLE_BAND);
    for (k, p) in panels.iter().enumerate() {
        let x0 = PANEL * k as f64;
        let frame = Frame::fit(&clouds, x0, TITLE_BAND);
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"16\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
            x0 + PANEL / 2.0,
            escape(&p.title)
        );
        if let Some(t) = p.target {
            dots(&mut out, &frame, t, TARGET_COLOR, 1.0);
        }
        trajectory_body(&mut out, &frame, p.trajectory);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| TfmError::io(path, e))
}

pub fn write_scatter_svg(sets: &[(&Tensor, &str)], path: &Path) -> Result<()> {
    write_text(path, &render_scatter_svg(sets)?)
}

pub fn write_trajectory_svg(traj: &Trajectory, path: &Path) -> Result<()> {
    write_text(path, &render_trajectory_svg(traj)?)
}

pub fn write_panel_svg(panels: &[Panel], path: &Path) -> Result<()> {
    write_text(path, &render_panel_svg(panels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut r = rng(seed);
        let data = (0..n * d).map(|_| shift + r.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = cloud(300, 2, 0.0, 1);
        assert_eq!(sliced_w2(&a, &a, 64, &mut rng(0)).unwrap(), 0.0);
    }

    #[test]
    fn dirac_distance_is_gap() {
        let a = Tensor::matrix(1, 1, vec![0.25]).unwrap();
        let b = Tensor::matrix(1, 1, vec![-1.5]).unwrap();
        assert!((sliced_w2(&a, &b, 8, &mut rng(0)).unwrap() - 1.75).abs() < 1e-12);
    }

    #[test]
    fn shifted_gaussians_in_1d() {
        let a = cloud(10_000, 1, 0.0, 2);
        let b = cloud(10_000, 1, 0.7, 3);
        let w = sliced_w2(&a, &b, 16, &mut rng(0)).unwrap();
        assert!((w - 0.7).abs() < 0.03, "{w}");
    }

    #[test]
    fn symmetric_under_same_seed() {
        let a = cloud(200, 2, 0.0, 4);
        let b = cloud(150, 2, 0.5, 5);
        assert_eq!(sliced_w2(&a, &b, 32, &mut rng(7)).unwrap(), sliced_w2(&b, &a, 32, &mut rng(7)).unwrap());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let a = cloud(10, 2, 0.0, 1);
        assert!(sliced_w2(&a, &Tensor::zeros(&[0, 2]), 8, &mut rng(0)).is_err());
        assert!(sliced_w2(&a, &a, 0, &mut rng(0)).is_err());
        assert!(sliced_w2(&a, &cloud(10, 3, 0.0, 1), 8, &mut rng(0)).is_err());
    }

    #[test]
    fn grid_has_boundary_row() {
        let g = sweep_grid(10, 10).unwrap();
        assert_eq!(g.len(), 100);
        assert!(g.iter().step_by(10).all(|p| p.t() == p.r()));
        assert!(g.iter().skip(9).step_by(10).all(|p| p.r() == 1.0));
        assert_eq!(g.last().unwrap().t(), 0.9);
    }

    fn traj(n: usize, k: usize) -> Trajectory {
        let mut tr = Trajectory::new();
        for j in 0..k {
            let data = (0..2 * n).map(|i| (i + j) as f64 * 0.1).collect();
            tr.push(j as f64 / (k - 1).max(1) as f64, Tensor::matrix(n, 2, data).unwrap()).unwrap();
        }
        tr
    }

    #[test]
    fn trajectory_svg_structure() {
        let empty = render_trajectory_svg(&Trajectory::new()).unwrap();
        assert!(empty.starts_with("<svg") && empty.trim_end().ends_with("</svg>"));
        let svg = render_trajectory_svg(&traj(7, 4)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 7);
        let first = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts = first.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
        assert_eq!(pts.split(' ').count(), 4);
        assert_eq!(svg, render_trajectory_svg(&traj(7, 4)).unwrap());
    }

    #[test]
    fn plots_reject_non_planar_data() {
        let mut tr = Trajectory::new();
        tr.push(0.0, Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(render_trajectory_svg(&tr), Err(TfmError::Unsupported(_))));
        let p = Tensor::zeros(&[2, 1]);
        assert!(render_scatter_svg(&[(&p, "red")]).is_err());
    }

    #[test]
    fn panel_has_titles() {
        let t = traj(3, 2);
        let svg = render_panel_svg(&[
            Panel { title: "steps=1".into(), trajectory: &t, target: None },
            Panel { title: "steps=<2>".into(), trajectory: &t, target: None },
        ])
        .unwrap();
        assert!(svg.contains(">steps=1<") && svg.contains("steps=&lt;2&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 6);
    }
}
