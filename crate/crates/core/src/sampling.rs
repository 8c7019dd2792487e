//! Generation: multi-step and one-step transition sampling, guidance, and
//! the Euler baseline for velocity models.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;

use crate::error::{Result, TfmError};
use crate::flowcore::VelocityField;
use crate::nets::{Label, TfmModel};
use crate::tensor::Tensor;

/// A learned map `X(x, t, r)` on `[n, d]` batches with shared times.
pub trait TransitionModel {
    fn data_dim(&self) -> usize;
    fn n_classes(&self) -> usize;
    fn transition(&self, x: &Tensor, t: f64, r: f64, labels: Option<&[Label]>) -> Result<Tensor>;
}

impl TransitionModel for TfmModel {
    fn data_dim(&self) -> usize {
        TfmModel::data_dim(self)
    }

    fn n_classes(&self) -> usize {
        TfmModel::n_classes(self)
    }

    fn transition(&self, x: &Tensor, t: f64, r: f64, labels: Option<&[Label]>) -> Result<Tensor> {
        let n = x.rows();
        self.forward(x, &vec![t; n], &vec![r; n], labels)
    }
}

/// Wraps a model and counts transition calls.
pub struct CountingModel<'m, M: ?Sized> {
    inner: &'m M,
    calls: Cell<usize>,
}

impl<'m, M: TransitionModel + ?Sized> CountingModel<'m, M> {
    pub fn new(inner: &'m M) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<M: TransitionModel + ?Sized> TransitionModel for CountingModel<'_, M> {
    fn data_dim(&self) -> usize {
        self.inner.data_dim()
    }

    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    fn transition(&self, x: &Tensor, t: f64, r: f64, labels: Option<&[Label]>) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.transition(x, t, r, labels)
    }
}

/// Strictly increasing knots from 0 to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || knots[knots.len() - 1] != 1.0 {
            return Err(TfmError::Precondition(format!("grid {knots:?} must run from 0 to 1")));
        }
        if knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(TfmError::Precondition(format!("grid {knots:?} is not strictly increasing")));
        }
        Ok(Self { knots })
    }

    /// `k / steps` for `k = 0..=steps`.
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(TfmError::Precondition("a grid needs at least one interval".into()));
        }
        let mut knots: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
        knots[steps] = 1.0;
        Self::new(knots)
    }

    /// Parses a comma-separated knot list such as `0,0.5,1`.
    pub fn parse(text: &str) -> Result<Self> {
        let knots = text
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| TfmError::Precondition(format!("bad grid knot `{}`", s.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(knots)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn intervals(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Snapshots of a batch at increasing times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    states: Vec<(f64, Tensor)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, batch: Tensor) -> Result<()> {
        if let Some((last_t, last)) = self.states.last() {
            if !(time > *last_t) {
                return Err(TfmError::Precondition(format!("trajectory time {time} after {last_t}")));
            }
            batch.ensure_same_shape(last, "trajectory snapshot")?;
        }
        self.states.push((time, batch));
        Ok(())
    }

    pub fn states(&self) -> &[(f64, Tensor)] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.states.first().map_or(0, |(_, b)| b.rows())
    }

    /// Rows `(knot_index, time, point_index, x1..xd)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.states.first().map_or(0, |(_, b)| b.cols());
        let mut header = vec!["knot_index".to_string(), "time".into(), "point_index".into()];
        header.extend((1..=d).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for (k, (time, batch)) in self.states.iter().enumerate() {
            for i in 0..batch.rows() {
                let mut rec = vec![k.to_string(), fmt_f64(*time), i.to_string()];
                rec.extend(batch.row(i).iter().map(|&v| fmt_f64(v)));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| TfmError::io("<trajectory csv>", e))?;
        Ok(())
    }
}

/// Shortest round-trip representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// `omega * X(x | c) + (1 - omega) * X(x | null)`.
pub fn cfg_forward<M: TransitionModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t: f64,
    r: f64,
    classes: &[usize],
    omega: f64,
) -> Result<Tensor> {
    if model.n_classes() == 0 {
        return Err(TfmError::Unsupported("guidance needs a class-conditional model".into()));
    }
    let labels: Vec<Label> = classes.iter().map(|&c| Some(c)).collect();
    let cond = model.transition(x, t, r, Some(&labels))?;
    let uncond = model.transition(x, t, r, Some(&vec![None; x.rows()]))?;
    if omega == 1.0 {
        return Ok(cond);
    }
    if omega == 0.0 {
        return Ok(uncond);
    }
    cond.zip_map(&uncond, |c, u| omega * c + (1.0 - omega) * u)
}

fn step<M: TransitionModel + ?Sized>(
    model: &M,
    x: &Tensor,
    t: f64,
    r: f64,
    classes: Option<&[usize]>,
    cfg_scale: Option<f64>,
) -> Result<Tensor> {
    match (classes, cfg_scale) {
        (Some(c), Some(omega)) => cfg_forward(model, x, t, r, c, omega),
        (None, Some(_)) => Err(TfmError::Precondition("guidance needs class ids".into())),
        (Some(c), None) => {
            let labels: Vec<Label> = c.iter().map(|&c| Some(c)).collect();
            model.transition(x, t, r, Some(&labels))
        }
        (None, None) => model.transition(x, t, r, None),
    }
}

/// Applies the model across consecutive knots, recording every state.
pub fn sample_multistep<M: TransitionModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    grid: &TimeGrid,
    classes: Option<&[usize]>,
    cfg_scale: Option<f64>,
) -> Result<(Tensor, Trajectory)> {
    if x0.rank() != 2 || x0.cols() != model.data_dim() {
        return Err(TfmError::Shape(format!("batch {:?} for dimension {}", x0.shape(), model.data_dim())));
    }
    if let Some(c) = classes {
        if c.len() != x0.rows() {
            return Err(TfmError::Shape(format!("{} class ids for {} points", c.len(), x0.rows())));
        }
    }
    let mut traj = Trajectory::new();
    let mut x = x0.clone();
    traj.push(grid.knots[0], x.clone())?;
    for w in grid.knots.windows(2) {
        x = step(model, &x, w[0], w[1], classes, cfg_scale)?;
        traj.push(w[1], x.clone())?;
    }
    Ok((x, traj))
}

pub fn sample_onestep<M: TransitionModel + ?Sized>(
    model: &M,
    x0: &Tensor,
    classes: Option<&[usize]>,
    cfg_scale: Option<f64>,
) -> Result<Tensor> {
    let grid = TimeGrid::uniform(1)?;
    Ok(sample_multistep(model, x0, &grid, classes, cfg_scale)?.0)
}

/// Forward Euler with uniform steps from 0 to 1.
pub fn euler_ode_sample<V: VelocityField + ?Sized>(vel: &V, x0: &Tensor, n_steps: usize) -> Result<Tensor> {
    Ok(euler_ode_trajectory(vel, x0, n_steps)?.0)
}

/// [`euler_ode_sample`] with every intermediate state.
pub fn euler_ode_trajectory<V: VelocityField + ?Sized>(
    vel: &V,
    x0: &Tensor,
    n_steps: usize,
) -> Result<(Tensor, Trajectory)> {
    euler_grid_trajectory(vel, x0, &TimeGrid::uniform(n_steps)?)
}

/// Forward Euler across the knots of `grid`.
pub fn euler_grid_trajectory<V: VelocityField + ?Sized>(
    vel: &V,
    x0: &Tensor,
    grid: &TimeGrid,
) -> Result<(Tensor, Trajectory)> {
    let mut traj = Trajectory::new();
    let mut x = x0.clone();
    traj.push(grid.knots[0], x.clone())?;
    for (k, w) in grid.knots.windows(2).enumerate() {
        let v = vel.velocity(&x, w[0])?;
        x = x.axpy(w[1] - w[0], &v)?;
        if !x.all_finite() {
            return Err(TfmError::Integration { step: k });
        }
        traj.push(w[1], x.clone())?;
    }
    Ok((x, traj))
}

/// Rows `x1..xd[,label]`.
pub fn write_samples_csv<W: Write>(out: W, points: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if let Some(l) = labels {
        if l.len() != points.rows() {
            return Err(TfmError::Shape(format!("{} labels for {} points", l.len(), points.rows())));
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (1..=points.cols()).map(|k| format!("x{k}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..points.rows() {
        let mut rec: Vec<String> = points.row(i).iter().map(|&v| fmt_f64(v)).collect();
        if let Some(l) = labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| TfmError::io("<samples csv>", e))?;
    Ok(())
}

/// Inverse of [`write_samples_csv`].
pub fn read_samples_csv(path: &Path) -> Result<(Tensor, Option<Vec<usize>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => TfmError::io(path, io),
        other => TfmError::Contract(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers()?.clone();
    let has_label = headers.iter().next_back() == Some("label");
    let d = headers.len() - usize::from(has_label);
    if d == 0 {
        return Err(TfmError::Contract(format!("{}: no coordinate columns", path.display())));
    }
    let (mut data, mut labels) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |field: &str| TfmError::Contract(format!("{} row {}: bad value `{field}`", path.display(), line + 1));
        for field in rec.iter().take(d) {
            data.push(field.parse::<f64>().map_err(|_| bad(field))?);
        }
        if has_label {
            let field = rec.get(d).unwrap_or("");
            labels.push(field.parse::<usize>().map_err(|_| bad(field))?);
        }
    }
    let n = data.len() / d;
    Ok((Tensor::new(vec![n, d], data)?, has_label.then_some(labels)))
}
