//! Two-dimensional synthetic targets, source distributions, and the
//! independent coupling sampler.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TfmError};
use crate::flowcore::{CouplingBatch, CouplingSample};
use crate::sampling::{read_samples_csv, write_samples_csv};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "LETTER_GLYPH")]
    LetterGlyph,
    #[serde(rename = "GAUSSIAN_MIXTURE")]
    GaussianMixture,
    #[serde(rename = "MOONS")]
    Moons,
    #[serde(rename = "CHECKERBOARD")]
    Checkerboard,
    #[serde(rename = "GAUSSIAN")]
    Gaussian,
}

/// A target family and its parameters. Family-specific fields left unset
/// take the family default; setting a field the family does not use is an
/// error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetKind,
    #[serde(default)]
    pub n_classes: usize,
    /// Size of the fixed target point cloud.
    #[serde(default = "default_points")]
    pub n_points: usize,
    /// Max-abs coordinate after normalization; ignored by `GAUSSIAN`.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glyph: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

fn default_points() -> usize {
    20_000
}

fn default_scale() -> f64 {
    2.0
}

impl DatasetSpec {
    pub fn new(name: DatasetKind) -> Self {
        Self {
            name,
            n_classes: 0,
            n_points: default_points(),
            scale: default_scale(),
            glyph: None,
            components: None,
            component_std: None,
            noise: None,
            mean: None,
            std: None,
        }
    }

    pub fn letter(glyph: &str) -> Self {
        Self { glyph: Some(glyph.into()), ..Self::new(DatasetKind::LetterGlyph) }
    }

    pub fn mixture(components: usize, labelled: bool) -> Self {
        Self {
            components: Some(components),
            n_classes: if labelled { components } else { 0 },
            ..Self::new(DatasetKind::GaussianMixture)
        }
    }

    pub fn glyph_text(&self) -> &str {
        self.glyph.as_deref().unwrap_or("M")
    }

    pub fn component_count(&self) -> usize {
        self.components.unwrap_or(8)
    }

    pub fn component_spread(&self) -> f64 {
        self.component_std.unwrap_or(0.1)
    }

    pub fn moon_noise(&self) -> f64 {
        self.noise.unwrap_or(0.05)
    }

    pub fn gaussian_mean(&self) -> f64 {
        self.mean.unwrap_or(0.0)
    }

    pub fn gaussian_std(&self) -> f64 {
        self.std.unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        use DatasetKind::*;
        let set: [(&str, bool, &[DatasetKind]); 6] = [
            ("glyph", self.glyph.is_some(), &[LetterGlyph]),
            ("components", self.components.is_some(), &[GaussianMixture]),
            ("component_std", self.component_std.is_some(), &[GaussianMixture]),
            ("noise", self.noise.is_some(), &[Moons]),
            ("mean", self.mean.is_some(), &[Gaussian]),
            ("std", self.std.is_some(), &[Gaussian]),
        ];
        for (key, present, families) in set {
            if present && !families.contains(&self.name) {
                return Err(TfmError::config(format!("dataset.{key}"), format!("not used by {:?}", self.name)));
            }
        }
        if self.n_points == 0 {
            return Err(TfmError::config("dataset.n_points", "must be positive"));
        }
        if !(self.scale > 0.0) {
            return Err(TfmError::config("dataset.scale", "must be positive"));
        }
        let allowed_classes: &[usize] = match self.name {
            LetterGlyph => &[0, self.glyph_text().chars().count()],
            GaussianMixture => &[0, self.component_count()],
            Moons => &[0, 2],
            Checkerboard | Gaussian => &[0],
        };
        if !allowed_classes.contains(&self.n_classes) {
            return Err(TfmError::config(
                "dataset.n_classes",
                format!("{} not in {allowed_classes:?} for {:?}", self.n_classes, self.name),
            ));
        }
        match self.name {
            LetterGlyph => {
                let text = self.glyph_text();
                if text.is_empty() {
                    return Err(TfmError::config("dataset.glyph", "empty glyph string"));
                }
                if let Some(c) = text.chars().find(|c| !(c.is_ascii_uppercase() || *c == ' ')) {
                    return Err(TfmError::config("dataset.glyph", format!("no glyph for `{c}` (A-Z and space only)")));
                }
            }
            GaussianMixture => {
                if self.component_count() == 0 {
                    return Err(TfmError::config("dataset.components", "must be positive"));
                }
                if !(self.component_spread() > 0.0) {
                    return Err(TfmError::config("dataset.component_std", "must be positive"));
                }
            }
            Moons => {
                if !(self.moon_noise() >= 0.0) {
                    return Err(TfmError::config("dataset.noise", "must be nonnegative"));
                }
            }
            Gaussian => {
                if !(self.gaussian_std() > 0.0) {
                    return Err(TfmError::config("dataset.std", "must be positive"));
                }
                if !self.gaussian_mean().is_finite() {
                    return Err(TfmError::config("dataset.mean", "must be finite"));
                }
            }
            Checkerboard => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    #[serde(rename = "STD_GAUSSIAN")]
    StdGaussian,
    #[serde(rename = "RING")]
    Ring,
}

/// Source distribution. A ring draws a uniform angle and radius
/// `radius + width * N(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub kind: SourceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self { kind: SourceKind::StdGaussian, radius: None, width: None }
    }
}

impl SourceSpec {
    pub fn ring(radius: f64, width: f64) -> Self {
        Self { kind: SourceKind::Ring, radius: Some(radius), width: Some(width) }
    }

    pub fn ring_radius(&self) -> f64 {
        self.radius.unwrap_or(1.0)
    }

    pub fn ring_width(&self) -> f64 {
        self.width.unwrap_or(0.1)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SourceKind::StdGaussian => {
                if self.radius.is_some() || self.width.is_some() {
                    return Err(TfmError::config("source.radius", "only a RING source takes radius/width"));
                }
            }
            SourceKind::Ring => {
                if !(self.ring_radius() > 0.0) {
                    return Err(TfmError::config("source.radius", "must be positive"));
                }
                if !(self.ring_width() >= 0.0) {
                    return Err(TfmError::config("source.width", "must be nonnegative"));
                }
            }
        }
        Ok(())
    }

    /// `n` draws in dimension `d` (a ring needs `d = 2`).
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, d: usize, rng: &mut R) -> Result<Tensor> {
        self.validate()?;
        let mut data = Vec::with_capacity(n * d);
        match self.kind {
            SourceKind::StdGaussian => {
                data.extend((0..n * d).map(|_| -> f64 { StandardNormal.sample(rng) }));
            }
            SourceKind::Ring => {
                if d != 2 {
                    return Err(TfmError::Unsupported(format!("a ring source is 2-D, asked for {d}-D")));
                }
                let (radius, width) = (self.ring_radius(), self.ring_width());
                for _ in 0..n {
                    let theta = 2.0 * PI * rng.gen::<f64>();
                    let g: f64 = StandardNormal.sample(rng);
                    let rho = radius + width * g;
                    data.push(rho * theta.cos());
                    data.push(rho * theta.sin());
                }
            }
        }
        Tensor::new(vec![n, d], data)
    }
}

/// A target point cloud with optional class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl TargetSet {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Points whose label is `class`.
    pub fn class_points(&self, class: usize) -> Option<Tensor> {
        let labels = self.labels.as_ref()?;
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        Some(self.points.select_rows(&idx))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| TfmError::io(path, e))?;
        write_samples_csv(file, &self.points, self.labels.as_deref())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let (points, labels) = read_samples_csv(path)?;
        Ok(Self { points, labels })
    }
}

/// Rows of a 5x7 bitmap font, most significant bit leftmost.
fn glyph_rows(c: char) -> Option<[u8; 7]> {
    let rows = match c {
        'A' => [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'B' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
        'C' => [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
        'D' => [0b11110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b11110],
        'E' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
        'F' => [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
        'G' => [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
        'H' => [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
        'I' => [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'J' => [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
        'K' => [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
        'L' => [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
        'M' => [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
        'N' => [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
        'O' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'P' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
        'Q' => [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
        'R' => [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
        'S' => [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
        'T' => [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
        'U' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
        'V' => [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'W' => [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'X' => [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
        'Y' => [0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100],
        'Z' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
        ' ' => [0; 7],
        _ => return None,
    };
    Some(rows)
}

/// Raster resolution per letter.
pub const GLYPH_RASTER: usize = 64;

/// `GLYPH_RASTER x GLYPH_RASTER` ink mask of one letter, row 0 at the top.
pub fn rasterize_glyph(c: char) -> Result<Vec<bool>> {
    let rows = glyph_rows(c).ok_or_else(|| TfmError::config("dataset.glyph", format!("no glyph for `{c}`")))?;
    let n = GLYPH_RASTER;
    let mut mask = vec![false; n * n];
    for i in 0..n {
        let fr = i * 7 / n;
        for j in 0..n {
            let fc = j * 5 / n;
            mask[i * n + j] = rows[fr] >> (4 - fc) & 1 == 1;
        }
    }
    Ok(mask)
}

/// Horizontal advance between letters, in letter widths.
const LETTER_ADVANCE: f64 = 1.25;

fn glyph_points<R: Rng + ?Sized>(text: &str, n: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    let masks = text.chars().map(rasterize_glyph).collect::<Result<Vec<_>>>()?;
    if masks.iter().all(|m| !m.iter().any(|&b| b)) {
        return Err(TfmError::Precondition(format!("glyph string `{text}` has no ink")));
    }
    let inked: Vec<usize> = (0..masks.len()).filter(|&k| masks[k].iter().any(|&b| b)).collect();
    let g = GLYPH_RASTER as f64;
    let (mut pts, mut labels) = (Vec::with_capacity(2 * n), Vec::with_capacity(n));
    while labels.len() < n {
        let k = inked[rng.gen_range(0..inked.len())];
        let (u, v): (f64, f64) = (rng.gen(), rng.gen());
        let (col, row) = ((u * g) as usize, (v * g) as usize);
        if masks[k][row * GLYPH_RASTER + col] {
            pts.push(k as f64 * LETTER_ADVANCE + u);
            pts.push(1.0 - v);
            labels.push(k);
        }
    }
    Ok((pts, labels))
}

fn mixture_points<R: Rng + ?Sized>(k: usize, std: f64, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let (mut pts, mut labels) = (Vec::with_capacity(2 * n), Vec::with_capacity(n));
    for _ in 0..n {
        let c = rng.gen_range(0..k);
        let angle = 2.0 * PI * c as f64 / k as f64;
        let (gx, gy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        pts.push(angle.cos() + std * gx);
        pts.push(angle.sin() + std * gy);
        labels.push(c);
    }
    (pts, labels)
}

fn moon_points<R: Rng + ?Sized>(noise: f64, n: usize, rng: &mut R) -> (Vec<f64>, Vec<usize>) {
    let (mut pts, mut labels) = (Vec::with_capacity(2 * n), Vec::with_capacity(n));
    for _ in 0..n {
        let lower = rng.gen::<bool>();
        let theta = PI * rng.gen::<f64>();
        let (x, y) = if lower { (1.0 - theta.cos(), 0.5 - theta.sin()) } else { (theta.cos(), theta.sin()) };
        let (gx, gy): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        pts.push(x + noise * gx);
        pts.push(y + noise * gy);
        labels.push(usize::from(lower));
    }
    (pts, labels)
}

/// Uniform over the dark squares of a 4x4 board on `[-2, 2]^2`.
fn checkerboard_points<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut pts = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let row = rng.gen_range(0..4usize);
        let col = 2 * rng.gen_range(0..2usize) + (row % 2);
        pts.push(-2.0 + col as f64 + rng.gen::<f64>());
        pts.push(-2.0 + row as f64 + rng.gen::<f64>());
    }
    pts
}

/// Shifts to zero mean, then scales so the largest coordinate magnitude is `s`.
pub fn normalize(points: &mut Tensor, s: f64) {
    let (n, d) = (points.rows(), points.cols());
    for k in 0..d {
        let mean = (0..n).map(|i| points.row(i)[k]).sum::<f64>() / n as f64;
        for i in 0..n {
            points.row_mut(i)[k] -= mean;
        }
    }
    let m = points.max_abs();
    if m > 0.0 {
        let c = s / m;
        points.data_mut().iter_mut().for_each(|v| *v *= c);
    }
}

/// Draws `n` target points. All families except `GAUSSIAN` are normalized.
pub fn make_target<R: Rng + ?Sized>(spec: &DatasetSpec, n: usize, rng: &mut R) -> Result<TargetSet> {
    spec.validate()?;
    if n == 0 {
        return Err(TfmError::Precondition("target size must be positive".into()));
    }
    let (data, labels) = match spec.name {
        DatasetKind::LetterGlyph => {
            let (p, l) = glyph_points(spec.glyph_text(), n, rng)?;
            (p, Some(l))
        }
        DatasetKind::GaussianMixture => {
            let (p, l) = mixture_points(spec.component_count(), spec.component_spread(), n, rng);
            (p, Some(l))
        }
        DatasetKind::Moons => {
            let (p, l) = moon_points(spec.moon_noise(), n, rng);
            (p, Some(l))
        }
        DatasetKind::Checkerboard => (checkerboard_points(n, rng), None),
        DatasetKind::Gaussian => {
            let (m, s) = (spec.gaussian_mean(), spec.gaussian_std());
            let p = (0..2 * n).map(|_| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
            (p, None)
        }
    };
    let mut points = Tensor::new(vec![n, 2], data)?;
    if spec.name != DatasetKind::Gaussian {
        normalize(&mut points, spec.scale);
    }
    let labels = if spec.n_classes > 0 { labels } else { None };
    Ok(TargetSet { points, labels })
}

/// `batch` independent pairs: `x0` from the source, `x1` uniform with
/// replacement from the target cloud.
pub fn sample_coupling_batch<R: Rng + ?Sized>(
    source: &SourceSpec,
    target: &TargetSet,
    batch: usize,
    rng: &mut R,
) -> Result<CouplingBatch> {
    if batch == 0 {
        return Err(TfmError::Precondition("batch size must be positive".into()));
    }
    if target.is_empty() {
        return Err(TfmError::Precondition("empty target set".into()));
    }
    let d = target.points.cols();
    let x0 = source.sample(batch, d, rng)?;
    let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..target.len())).collect();
    let x1 = target.points.select_rows(&idx);
    let labels = match &target.labels {
        Some(l) => idx.iter().map(|&i| Some(l[i])).collect(),
        None => vec![None; batch],
    };
    Ok(CouplingBatch { x0, x1, labels })
}

pub fn sample_coupling<R: Rng + ?Sized>(
    source: &SourceSpec,
    target: &TargetSet,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<CouplingSample>> {
    let b = sample_coupling_batch(source, target, batch, rng)?;
    (0..batch)
        .map(|i| {
            CouplingSample::new(Tensor::vector(b.x0.row(i).to_vec()), Tensor::vector(b.x1.row(i).to_vec()), b.labels[i])
        })
        .collect()
}
