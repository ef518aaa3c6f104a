//! Synthetic binary classification data: samples of zero-mean Gaussian
//! processes on a regular grid over `[-2, 2]^d`, labelled by kernel family.
//!
//! Both kernels are products of one-dimensional factors over the axes, so
//! the grid covariance is a Kronecker power of one small matrix. The
//! generator samples through that structure; the dense routines
//! ([`covariance`], [`psd_clip`], [`sample_gp`]) work on explicit matrices.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::io::{read_str, read_tensor, read_u32, read_u64, write_str, write_tensor};
use crate::tensor::Tensor;

/// Eigenvalue floor applied by [`psd_clip`].
pub const PSD_CLIP_EPS: f64 = 1e-6;
/// First diagonal jitter tried by [`cholesky_with_jitter`].
pub const JITTER_START: f64 = 1e-10;
pub const JITTER_ATTEMPTS: usize = 3;
const MAX_SWEEPS: usize = 100;

pub const RNG_NAME: &str = "ChaCha8";

pub const LENGTH_RANGE: (f64, f64) = (0.1, 0.6);
pub const SCALE_RANGE: (f64, f64) = (0.1, 1.0);
pub const PERIOD_RANGE: (f64, f64) = (0.1, 0.5);

/// Regular grid of `side` points per axis, `step` apart, centred on the
/// origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub side: usize,
    pub step: f64,
}

/// Default points per axis: `2^(7 - d)`, which keeps every grid at 1024 or
/// 4096 points.
pub fn default_side(dim: usize) -> Result<usize> {
    check_dim(dim)?;
    Ok(1 << (7 - dim))
}

fn check_dim(dim: usize) -> Result<()> {
    if !(2..=5).contains(&dim) {
        return Err(Error::invalid(format!("dimension must be in 2..=5, got {dim}")));
    }
    Ok(())
}

/// The default grid: `2^(7 - d)` points spanning `[-2, 2]` on every axis.
pub fn make_grid(dim: usize) -> Result<Grid> {
    Grid::new(dim, default_side(dim)?)
}

impl Grid {
    /// `side` points spanning `[-2, 2]` on every axis, endpoints included.
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::invalid("grid side must be at least 2"));
        }
        Self::with_step(dim, side, 4.0 / (side - 1) as f64)
    }

    /// A central `side`-point crop of the default grid: same spacing, fewer
    /// points. This is the reduced grid used for quick runs, since the
    /// kernels are stationary and only point offsets matter.
    pub fn cropped(dim: usize, side: usize) -> Result<Self> {
        let full = make_grid(dim)?;
        Self::with_step(dim, side, full.step)
    }

    pub fn with_step(dim: usize, side: usize, step: f64) -> Result<Self> {
        check_dim(dim)?;
        if side == 0 || !(step > 0.0) || !step.is_finite() {
            return Err(Error::invalid("grid needs a positive side and step"));
        }
        Ok(Self { dim, side, step })
    }

    /// Coordinates along one axis.
    pub fn axis(&self) -> Vec<f64> {
        let mid = (self.side - 1) as f64 / 2.0;
        (0..self.side).map(|i| (i as f64 - mid) * self.step).collect()
    }

    pub fn len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tensor shape of one sample, with a single trailing channel.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.side; self.dim];
        s.push(1);
        s
    }

    /// All points in row-major order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let axis = self.axis();
        (0..self.len())
            .map(|mut flat| {
                let mut p = vec![0.0; self.dim];
                for a in (0..self.dim).rev() {
                    p[a] = axis[flat % self.side];
                    flat /= self.side;
                }
                p
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Rbf,
    Periodic,
}

impl KernelKind {
    /// Class label: periodic is 0, RBF is 1.
    pub fn label(self) -> u8 {
        match self {
            Self::Periodic => 0,
            Self::Rbf => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub length: f64,
    pub scale: f64,
    /// Ignored by the RBF kernel.
    pub period: f64,
}

impl KernelSpec {
    pub fn rbf(length: f64, scale: f64) -> Self {
        Self {
            kind: KernelKind::Rbf,
            length,
            scale,
            period: 1.0,
        }
    }

    pub fn periodic(length: f64, scale: f64, period: f64) -> Self {
        Self {
            kind: KernelKind::Periodic,
            length,
            scale,
            period,
        }
    }

    /// Draws hyperparameters uniformly from the benchmark ranges.
    pub fn sample(kind: KernelKind, rng: &mut impl Rng) -> Self {
        let length = rng.gen_range(LENGTH_RANGE.0..=LENGTH_RANGE.1);
        let scale = rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let period = match kind {
            KernelKind::Periodic => rng.gen_range(PERIOD_RANGE.0..=PERIOD_RANGE.1),
            KernelKind::Rbf => 1.0,
        };
        Self {
            kind,
            length,
            scale,
            period,
        }
    }

    /// Correlation contributed by one axis at offset `delta`.
    pub fn axis_factor(&self, delta: f64) -> f64 {
        match self.kind {
            KernelKind::Rbf => (-delta * delta / (2.0 * self.length * self.length)).exp(),
            KernelKind::Periodic => {
                let s = (PI * delta.abs() / self.period).sin();
                (-2.0 * s * s / (self.length * self.length)).exp()
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let corr: f64 = x.iter().zip(y).map(|(a, b)| self.axis_factor(a - b)).product();
        self.scale * self.scale * corr
    }
}

/// Dense square matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `V diag(values) Vᵀ`, symmetrised.
    pub fn from_eigen(values: &[f64], vectors: &Matrix) -> Self {
        let n = vectors.n;
        let mut m = Self::from_fn(n, |i, j| {
            (0..n)
                .map(|k| vectors.get(i, k) * values[k] * vectors.get(j, k))
                .sum()
        });
        m.symmetrize();
        m
    }

    fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in 0..i {
                let v = 0.5 * (self.get(i, j) + self.get(j, i));
                self.set(i, j, v);
                self.set(j, i, v);
            }
        }
    }
}

/// Grid covariance; each entry is evaluated once and mirrored, so the result
/// is exactly symmetric.
pub fn covariance(points: &[Vec<f64>], spec: &KernelSpec) -> Matrix {
    let n = points.len();
    let mut k = Matrix::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(&points[i], &points[j]);
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

/// Eigenvalues (ascending) and column eigenvectors of a symmetric matrix by
/// cyclic Jacobi rotations.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.n;
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = a.data.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                s += a.get(p, q) * a.get(p, q);
            }
        }
        s.sqrt()
    };
    let tol = 1e-15 * scale.max(f64::MIN_POSITIVE);
    let mut sweeps = 0;
    loop {
        let residual = off(&a);
        if residual <= tol {
            break;
        }
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, residual });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a.get(k, p), a.get(k, q));
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let (apk, aqk) = (a.get(p, k), a.get(q, k));
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = Matrix::from_fn(n, |r, c| v.get(r, order[c]));
    Ok((values, vectors))
}

/// Floors every eigenvalue at [`PSD_CLIP_EPS`] and rebuilds the matrix.
pub fn psd_clip(k: &Matrix) -> Result<Matrix> {
    let asym = k.max_asymmetry();
    if asym > 1e-10 {
        return Err(Error::invalid(format!("matrix is not symmetric (off by {asym:e})")));
    }
    let (values, vectors) = symmetric_eigen(k)?;
    let clipped: Vec<f64> = values.iter().map(|&l| l.max(PSD_CLIP_EPS)).collect();
    Ok(Matrix::from_eigen(&clipped, &vectors))
}

fn cholesky(k: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = k.n;
    let mut l = Matrix::zeros(n);
    for j in 0..n {
        let mut d = k.get(j, j) + jitter;
        for p in 0..j {
            d -= l.get(j, p) * l.get(j, p);
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = k.get(i, j);
            for p in 0..j {
                s -= l.get(i, p) * l.get(j, p);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Lower Cholesky factor of `k + jitter·I`, trying jitters
/// `1e-10, 1e-9, 1e-8` in turn.
pub fn cholesky_with_jitter(k: &Matrix) -> Result<Matrix> {
    let mut jitter = JITTER_START;
    for attempt in 0..JITTER_ATTEMPTS {
        if let Some(l) = cholesky(k, jitter) {
            return Ok(l);
        }
        if attempt + 1 < JITTER_ATTEMPTS {
            jitter *= 10.0;
        }
    }
    Err(Error::NotPositiveDefinite { jitter })
}

/// One draw `L z` with `L` the Cholesky factor of `k_psd`, shaped as `shape`.
pub fn sample_gp(k_psd: &Matrix, shape: &[usize], rng: &mut impl Rng) -> Result<Tensor> {
    let l = cholesky_with_jitter(k_psd)?;
    let n = l.n;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let x = (0..n)
        .map(|i| (0..=i).map(|j| l.get(i, j) * z[j]).sum())
        .collect();
    let expected: usize = shape.iter().product();
    if expected != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: shape.to_vec(),
        });
    }
    Tensor::new(shape.to_vec(), x)
}

/// Shifts and scales one sample to zero mean and unit standard deviation
/// (population form, floored at `1e-8`).
pub fn normalize(x: &Tensor) -> Tensor {
    let n = x.len().max(1) as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    x.map(|v| (v - mean) / std)
}

/// Sampler for the clipped grid covariance built from the eigenpairs of the
/// one-axis factor. Draws are `V diag(sqrt μ) z` with `V` the Kronecker
/// power of the axis eigenvectors and `μ` the clipped product eigenvalues.
#[derive(Clone, Debug)]
pub struct KroneckerSampler {
    grid: Grid,
    axis_vectors: Matrix,
    root_values: Vec<f64>,
}

impl KroneckerSampler {
    pub fn new(grid: Grid, spec: &KernelSpec) -> Result<Self> {
        let axis = grid.axis();
        let factor = Matrix::from_fn(grid.side, |i, j| spec.axis_factor(axis[i] - axis[j]));
        let (values, axis_vectors) = symmetric_eigen(&factor)?;
        let s2 = spec.scale * spec.scale;
        let root_values = (0..grid.len())
            .map(|mut flat| {
                let mut mu = s2;
                for _ in 0..grid.dim {
                    mu *= values[flat % grid.side];
                    flat /= grid.side;
                }
                mu.max(PSD_CLIP_EPS).sqrt()
            })
            .collect();
        Ok(Self {
            grid,
            axis_vectors,
            root_values,
        })
    }

    /// Applies `V` along every grid axis of a flat row-major vector.
    fn apply_vectors(&self, mut x: Vec<f64>) -> Vec<f64> {
        let (n, v) = (self.grid.side, &self.axis_vectors);
        let mut out = vec![0.0; x.len()];
        for a in 0..self.grid.dim {
            let inner = n.pow((self.grid.dim - 1 - a) as u32);
            let outer = x.len() / (inner * n);
            for o in 0..outer {
                for r in 0..inner {
                    let base = o * n * inner + r;
                    for i in 0..n {
                        out[base + i * inner] =
                            (0..n).map(|j| v.get(i, j) * x[base + j * inner]).sum();
                    }
                }
            }
            std::mem::swap(&mut x, &mut out);
        }
        x
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor> {
        let z = self
            .root_values
            .iter()
            .map(|r| r * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(self.grid.shape(), self.apply_vectors(z))
    }

    /// The covariance of [`KroneckerSampler::sample`] as a dense matrix.
    pub fn covariance(&self) -> Matrix {
        let n = self.grid.len();
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                let mut e = vec![0.0; n];
                e[k] = self.root_values[k];
                self.apply_vectors(e)
            })
            .collect();
        let mut m = Matrix::from_fn(n, |i, j| (0..n).map(|k| cols[k][i] * cols[k][j]).sum());
        m.symmetrize();
        m
    }
}

/// Labelled samples on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GpDataset {
    pub grid: Grid,
    pub seed: u64,
    pub samples: Vec<(Tensor, u8)>,
}

/// Draws `n_per_class` samples of each kernel family on the default grid.
pub fn generate_dataset(dim: usize, n_per_class: usize, seed: u64) -> Result<GpDataset> {
    generate_on_grid(make_grid(dim)?, n_per_class, seed)
}

/// Sample `i` uses its own ChaCha stream `i` under `seed`; even indices are
/// periodic, odd are RBF, so any prefix is balanced to within one.
pub fn generate_on_grid(grid: Grid, n_per_class: usize, seed: u64) -> Result<GpDataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let samples = (0..2 * n_per_class)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let kind = if i % 2 == 0 { KernelKind::Periodic } else { KernelKind::Rbf };
            let spec = KernelSpec::sample(kind, &mut rng);
            let x = KroneckerSampler::new(grid, &spec)?.sample(&mut rng)?;
            Ok((normalize(&x), kind.label()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GpDataset {
        grid,
        seed,
        samples,
    })
}

const MAGIC: &[u8; 4] = b"XNND";
const VERSION: u32 = 1;

impl GpDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let ones = self.samples.iter().filter(|(_, y)| *y == 1).count();
        [self.len() - ones, ones]
    }

    /// First `round(len · train_frac)` samples for training, the rest for
    /// validation.
    pub fn split(&self, train_frac: f64) -> Result<(GpDataset, GpDataset)> {
        if !(0.0..=1.0).contains(&train_frac) {
            return Err(Error::invalid("train fraction must be in [0, 1]"));
        }
        let cut = (self.len() as f64 * train_frac).round() as usize;
        let part = |s: &[(Tensor, u8)]| GpDataset {
            grid: self.grid,
            seed: self.seed,
            samples: s.to_vec(),
        };
        Ok((part(&self.samples[..cut]), part(&self.samples[cut..])))
    }

    /// `XNND`: magic, `u32` version, `u32` dimension, `u64` count, then per
    /// sample a `u8` label and an `XNNT` record, then a `u32`-prefixed
    /// metadata block naming the grid side, seed and generator.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.grid.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (x, y) in &self.samples {
            w.write_all(&[*y])?;
            write_tensor(w, x)?;
        }
        let meta = format!(
            "side={}\nstep={:e}\nseed={}\nrng={RNG_NAME}\n",
            self.grid.side, self.grid.step, self.seed
        );
        write_str(w, &meta)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: String| Error::format("XNND", reason);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u64(r)?;
        let mut samples = Vec::new();
        for _ in 0..count {
            let mut label = [0u8; 1];
            r.read_exact(&mut label)?;
            if label[0] > 1 {
                return Err(bad(format!("label {} is not 0 or 1", label[0])));
            }
            samples.push((read_tensor(r)?, label[0]));
        }
        let meta = read_str(r, "XNND")?;
        let field = |key: &str| -> Result<&str> {
            meta.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| bad(format!("missing `{key}` in metadata")))
        };
        let number = |key: &str| -> Result<f64> {
            field(key)?.parse().map_err(|_| bad(format!("bad `{key}` in metadata")))
        };
        let grid = Grid::with_step(dim, number("side")? as usize, number("step")?)
            .map_err(|e| bad(e.to_string()))?;
        if let Some((x, _)) = samples.iter().find(|(x, _)| x.shape() != grid.shape()) {
            return Err(bad(format!(
                "sample shape {:?} does not match grid {:?}",
                x.shape(),
                grid.shape()
            )));
        }
        Ok(Self {
            grid,
            seed: field("seed")?
                .parse()
                .map_err(|_| bad("bad `seed` in metadata".into()))?,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, SymmetricEigen};

    fn to_na(m: &Matrix) -> DMatrix<f64> {
        DMatrix::from_row_slice(m.n(), m.n(), m.data())
    }

    #[test]
    fn grid_shapes_and_endpoints() {
        let shapes = [
            vec![32, 32, 1],
            vec![16, 16, 16, 1],
            vec![8, 8, 8, 8, 1],
            vec![4, 4, 4, 4, 4, 1],
        ];
        for (d, shape) in (2..=5).zip(shapes) {
            let g = make_grid(d).unwrap();
            assert_eq!(g.shape(), shape);
            let axis = g.axis();
            assert!((axis[0] + 2.0).abs() < 1e-14 && (axis[g.side - 1] - 2.0).abs() < 1e-14);
        }
        assert_eq!(make_grid(2).unwrap().len(), 1024);
        assert_eq!(make_grid(5).unwrap().len(), 1024);
        assert!(make_grid(1).is_err() && make_grid(6).is_err());
        let pts = Grid::new(2, 3).unwrap().points();
        assert_eq!(pts[1], vec![-2.0, 0.0]);
        assert_eq!(pts[3], vec![0.0, -2.0]);
        let crop = Grid::cropped(4, 4).unwrap();
        assert_eq!(crop.step, make_grid(4).unwrap().step);
        let axis = crop.axis();
        assert!((axis[1] - axis[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!((axis[0] + axis[3]).abs() < 1e-15);
    }

    #[test]
    fn kernel_closed_forms() {
        let rbf = KernelSpec::rbf(0.4, 0.7);
        let per = KernelSpec::periodic(0.3, 0.7, 0.25);
        let x = [0.3, -1.1];
        for k in [rbf, per] {
            assert!((k.eval(&x, &x) - 0.49).abs() < 1e-15);
        }
        let at_length = rbf.eval(&[0.0, 0.0], &[0.4, 0.0]);
        assert!((at_length - 0.49 * (-0.5f64).exp()).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let v = rbf.eval(&[0.0, 0.0], &[0.05 * i as f64, 0.0]);
            assert!(v < last);
            last = v;
        }
        let shifted = per.eval(&[0.0, 0.5], &[0.25, 0.0]);
        assert!((shifted - per.eval(&[0.0, 0.5], &[0.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn kernels_are_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [KernelKind::Rbf, KernelKind::Periodic] {
            for _ in 0..100 {
                let k = KernelSpec::sample(kind, &mut rng);
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let y: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let t: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let xs: Vec<f64> = x.iter().zip(&t).map(|(a, b)| a + b).collect();
                let ys: Vec<f64> = y.iter().zip(&t).map(|(a, b)| a + b).collect();
                assert!((k.eval(&x, &y) - k.eval(&xs, &ys)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sampled_hyperparameters_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let k = KernelSpec::sample(KernelKind::Periodic, &mut rng);
            assert!((0.1..=0.6).contains(&k.length));
            assert!((0.1..=1.0).contains(&k.scale));
            assert!((0.1..=0.5).contains(&k.period));
        }
    }

    #[test]
    fn covariance_is_exactly_symmetric() {
        let g = Grid::new(2, 6).unwrap();
        let k = covariance(&g.points(), &KernelSpec::periodic(0.2, 0.9, 0.3));
        assert_eq!(k.max_asymmetry(), 0.0);
    }

    #[test]
    fn eigen_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(30, |_, _| rng.gen_range(-1.0..1.0));
        let sym = Matrix::from_fn(30, |i, j| a.get(i, j) + a.get(j, i));
        let (values, vectors) = symmetric_eigen(&sym).unwrap();
        let mut oracle: Vec<f64> = SymmetricEigen::new(to_na(&sym)).eigenvalues.iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(Matrix::from_eigen(&values, &vectors).max_abs_diff(&sym) < 1e-10);
    }

    #[test]
    fn clip_leaves_psd_matrix_alone() {
        let m = Matrix::from_fn(3, |i, j| if i == j { 2.0 } else { 0.5 });
        assert!(psd_clip(&m).unwrap().max_abs_diff(&m) < 1e-9);
    }

    #[test]
    fn clip_diagonal() {
        let m = Matrix::from_fn(2, |i, j| match (i, j) {
            (0, 0) => 1.0,
            (1, 1) => -0.5,
            _ => 0.0,
        });
        let c = psd_clip(&m).unwrap();
        let want = Matrix::from_fn(2, |i, j| match (i, j) {
            (0, 0) => 1.0,
            (1, 1) => PSD_CLIP_EPS,
            _ => 0.0,
        });
        assert!(c.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn clip_matches_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::from_fn(50, |_, _| rng.gen_range(-1.0..1.0));
        let sym = Matrix::from_fn(50, |i, j| a.get(i, j) + a.get(j, i));
        let c = psd_clip(&sym).unwrap();
        let eig = SymmetricEigen::new(to_na(&sym));
        let clipped = eig.eigenvalues.map(|l| l.max(PSD_CLIP_EPS));
        let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        let diff = (to_na(&c) - oracle).abs().max();
        assert!(diff <= 1e-8, "{diff}");
        let min = SymmetricEigen::new(to_na(&c)).eigenvalues.min();
        assert!(min >= PSD_CLIP_EPS / 2.0, "{min}");
    }

    #[test]
    fn clip_rejects_asymmetric_input() {
        let m = Matrix::from_fn(2, |i, j| (i * 2 + j) as f64);
        assert!(psd_clip(&m).is_err());
    }

    #[test]
    fn cholesky_reconstructs_and_escalates() {
        let m = Matrix::from_fn(3, |i, j| if i == j { 4.0 } else { 1.0 });
        let l = cholesky_with_jitter(&m).unwrap();
        let back = Matrix::from_fn(3, |i, j| (0..3).map(|k| l.get(i, k) * l.get(j, k)).sum());
        assert!(back.max_abs_diff(&m) < 1e-9);
        let singular = Matrix::from_fn(2, |_, _| 1.0);
        assert!(cholesky_with_jitter(&singular).is_ok());
        let negative = Matrix::from_fn(2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(matches!(
            cholesky_with_jitter(&negative),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn identity_covariance_gives_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Matrix::identity(1024);
        for _ in 0..8 {
            let x = sample_gp(&k, &[32, 32, 1], &mut rng).unwrap();
            let var = x.data().iter().map(|v| v * v).sum::<f64>() / 1024.0;
            // standard error of the variance estimate is sqrt(2/1024) ≈ 0.044
            assert!((var - 1.0).abs() < 3.0 * (2.0f64 / 1024.0).sqrt() + 0.05, "{var}");
        }
    }

    #[test]
    fn normalize_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::random(&[7, 9, 1], &mut rng).unwrap().map(|v| 3.0 * v + 11.0);
        let y = normalize(&x);
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let std = (y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-12 && (std - 1.0).abs() <= 1e-12);
        assert!(normalize(&Tensor::full(&[3, 1], 2.0).unwrap()).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn kronecker_route_matches_dense_clip() {
        for d in [2, 3] {
            let g = Grid::new(d, if d == 2 { 7 } else { 4 }).unwrap();
            for spec in [KernelSpec::rbf(0.6, 0.8), KernelSpec::periodic(0.5, 0.4, 0.35)] {
                let dense = psd_clip(&covariance(&g.points(), &spec)).unwrap();
                let kron = KroneckerSampler::new(g, &spec).unwrap().covariance();
                assert!(kron.max_abs_diff(&dense) < 1e-9, "d={d} {spec:?}");
            }
        }
    }

    #[test]
    fn dataset_is_balanced_deterministic_and_round_trips() {
        let grid = Grid::new(2, 8).unwrap();
        let a = generate_on_grid(grid, 10, 9).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.label_counts(), [10, 10]);
        assert_eq!(a, generate_on_grid(grid, 10, 9).unwrap());
        assert_ne!(a, generate_on_grid(grid, 10, 10).unwrap());
        let (tr, va) = a.split(0.8).unwrap();
        assert_eq!((tr.len(), va.len()), (16, 4));
        let mut bytes = Vec::new();
        a.write(&mut bytes).unwrap();
        let back = GpDataset::read(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, a);
        let mut again = Vec::new();
        back.write(&mut again).unwrap();
        assert_eq!(again, bytes);
        bytes[0] = b'Y';
        assert!(GpDataset::read(&mut bytes.as_slice()).is_err());
        assert!(generate_on_grid(grid, 0, 1).is_err());
    }

    #[test]
    fn default_dataset_shape() {
        let set = generate_dataset(5, 1, 0).unwrap();
        assert_eq!(set.samples[0].0.shape(), &[4, 4, 4, 4, 4, 1]);
    }
}
