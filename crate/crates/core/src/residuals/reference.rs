//! Reference solutions on tensor grids and their binary file format.

use std::f64::consts::PI;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Pde, ProblemSpec};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::network::MlpNetwork;

const MAGIC: &[u8; 8] = b"SGREF\0\0\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Burgers1d,
    Poisson2d,
    Helmholtz3d,
}

impl FieldKind {
    fn code(self) -> u32 {
        match self {
            FieldKind::Burgers1d => 1,
            FieldKind::Poisson2d => 2,
            FieldKind::Helmholtz3d => 3,
        }
    }

    /// Axis count of the field: `(x, t)`, `(x, y)` or `(x, y, z)`.
    pub fn ndim(self) -> usize {
        match self {
            FieldKind::Helmholtz3d => 3,
            _ => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(FieldKind::Burgers1d),
            2 => Some(FieldKind::Poisson2d),
            3 => Some(FieldKind::Helmholtz3d),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldHeader {
    pub kind: FieldKind,
    /// `(lo, hi, n)` per axis; nodes include both ends.
    pub axes: Vec<(f64, f64, usize)>,
    /// `[ν, 0, 0]` for Burgers, `[k, m, 0]` for Helmholtz.
    pub params: [f64; 3],
}

/// Samples of a field on a tensor grid, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceField {
    pub header: FieldHeader,
    pub values: Vec<f64>,
}

fn axis_nodes(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl ReferenceField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// All grid points, one per row, in storage order.
    pub fn points(&self) -> DenseMatrix {
        let axes: Vec<Vec<f64>> = self.header.axes.iter().map(|&(lo, hi, n)| axis_nodes(lo, hi, n)).collect();
        let d = axes.len();
        let total: usize = axes.iter().map(Vec::len).product();
        let mut m = DenseMatrix::zeros(total, d);
        for flat in 0..total {
            let mut rem = flat;
            for j in (0..d).rev() {
                let n = axes[j].len();
                m[(flat, j)] = axes[j][rem % n];
                rem /= n;
            }
        }
        m
    }

    /// Closed-form field for Poisson or Helmholtz with `n` nodes per axis.
    pub fn analytic(spec: &ProblemSpec, n: usize) -> Result<Self> {
        let (kind, params) = match spec.pde {
            Pde::Poisson2d => (FieldKind::Poisson2d, [0.0; 3]),
            Pde::Helmholtz3d { k, m, .. } => (FieldKind::Helmholtz3d, [k, m, 0.0]),
            Pde::Burgers1d { .. } => {
                return Err(Error::Contract("Burgers has no closed-form field; use burgers_reference".into()))
            }
        };
        if n < 2 {
            return Err(Error::Config("reference grid needs at least two nodes per axis".into()));
        }
        let header = FieldHeader {
            kind,
            axes: spec.bounds().into_iter().map(|(lo, hi)| (lo, hi, n)).collect(),
            params,
        };
        let mut field = ReferenceField { header, values: Vec::new() };
        let pts = field.points();
        field.values = (0..pts.rows()).map(|i| spec.exact(pts.row(i)).unwrap_or(0.0)).collect();
        Ok(field)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.header.kind.code().to_le_bytes())?;
        w.write_all(&(self.header.axes.len() as u32).to_le_bytes())?;
        for &(lo, hi, n) in &self.header.axes {
            w.write_all(&lo.to_le_bytes())?;
            w.write_all(&hi.to_le_bytes())?;
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for p in self.header.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut rd = Reader { inner: r, offset: 0 };
        let mut magic = [0u8; 8];
        rd.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "bad magic; not a reference field file".into(),
            });
        }
        let code_at = rd.offset;
        let kind = FieldKind::from_code(rd.u32()?).ok_or_else(|| Error::Format {
            offset: code_at,
            message: "unknown field kind".into(),
        })?;
        let ndim_at = rd.offset;
        let ndim = rd.u32()? as usize;
        if ndim != kind.ndim() {
            return Err(Error::Format {
                offset: ndim_at,
                message: format!("{kind:?} field needs {} axes, header says {ndim}", kind.ndim()),
            });
        }
        let mut axes = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let lo = rd.f64()?;
            let hi = rd.f64()?;
            let n = rd.u64()? as usize;
            axes.push((lo, hi, n));
        }
        let params = [rd.f64()?, rd.f64()?, rd.f64()?];
        let count_at = rd.offset;
        let count = rd.u64()? as usize;
        let expected: usize = axes.iter().map(|a| a.2).product();
        if count != expected {
            return Err(Error::Format {
                offset: count_at,
                message: format!("value count {count} does not match grid size {expected}"),
            });
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(rd.f64()?);
        }
        Ok(ReferenceField {
            header: FieldHeader { kind, axes, params },
            values,
        })
    }
}

struct Reader<'a, R: Read> {
    inner: &'a mut R,
    offset: u64,
}

impl<R: Read> Reader<'_, R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                offset: self.offset,
                message: "unexpected end of file".into(),
            },
            _ => Error::Io(e),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Cole–Hopf solution of viscous Burgers with `u(x,0) = −sin(πx)`,
/// evaluated by trapezoidal quadrature of the heat-kernel convolution.
pub fn burgers_cole_hopf(nu: f64, x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return -(PI * x).sin();
    }
    let a = (4.0 * nu * t).sqrt();
    let c = 1.0 / (2.0 * PI * nu);
    // the cosine factor spans at most 2c in the exponent
    let half = (40.0 + 2.0 * c).sqrt();
    let n = 2001;
    let h = 2.0 * half / (n - 1) as f64;
    let expo = |s: f64| -s * s - c * (PI * (x - a * s)).cos();
    let shift = (0..n).map(|j| expo(-half + h * j as f64)).fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..n {
        let s = -half + h * j as f64;
        let w = (expo(s) - shift).exp();
        num += (PI * (x - a * s)).sin() * w;
        den += w;
    }
    -num / den
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MolConfig {
    /// Grid nodes on `[-1, 1]`, walls included.
    pub nx: usize,
    /// Output snapshots on `[0, 1]`, both ends included.
    pub nt: usize,
    /// Time step; defaults to 90% of the stability bound.
    pub dt: Option<f64>,
    /// Drop the advection term (heat equation).
    #[serde(default = "advect")]
    pub advection: bool,
}

fn advect() -> bool {
    true
}

impl MolConfig {
    pub fn new(nx: usize, nt: usize) -> Self {
        MolConfig {
            nx,
            nt,
            dt: None,
            advection: true,
        }
    }
}

/// Method-of-lines Burgers solve: second-order central differences in
/// space, classical RK4 in time.
pub fn burgers_mol(nu: f64, cfg: &MolConfig) -> Result<ReferenceField> {
    if cfg.nx < 3 || cfg.nt < 2 || !(nu > 0.0) {
        return Err(Error::Config(format!(
            "method of lines needs nx >= 3, nt >= 2 and nu > 0 (got {}, {}, {nu})",
            cfg.nx, cfg.nt
        )));
    }
    let nx = cfg.nx;
    let dx = 2.0 / (nx - 1) as f64;
    let xs = axis_nodes(-1.0, 1.0, nx);
    let mut u: Vec<f64> = xs.iter().map(|&x| -(PI * x).sin()).collect();
    u[0] = 0.0;
    u[nx - 1] = 0.0;

    // the maximum principle bounds |u| by max|u0| = 1
    let diffusion_bound = 0.696 * dx * dx / nu;
    let advection_bound = if cfg.advection { 2.8 * dx } else { f64::INFINITY };
    let bound = diffusion_bound.min(advection_bound);
    let dt = match cfg.dt {
        Some(dt) if !(dt > 0.0) => return Err(Error::Config(format!("time step must be positive, got {dt}"))),
        Some(dt) if dt > bound => {
            let which = if diffusion_bound <= advection_bound {
                format!("diffusion bound 0.696*dx^2/nu = {diffusion_bound:.3e}")
            } else {
                format!("advection bound 2.8*dx/max|u| = {advection_bound:.3e}")
            };
            return Err(Error::Config(format!("time step {dt:.3e} violates the {which}")));
        }
        Some(dt) => dt,
        None => 0.9 * bound,
    };

    let rhs = |u: &[f64], out: &mut [f64]| {
        out[0] = 0.0;
        out[nx - 1] = 0.0;
        for i in 1..nx - 1 {
            let diff = nu * (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (dx * dx);
            let adv = if cfg.advection {
                (u[i + 1] * u[i + 1] - u[i - 1] * u[i - 1]) / (4.0 * dx)
            } else {
                0.0
            };
            out[i] = diff - adv;
        }
    };

    let mut k1 = vec![0.0; nx];
    let mut k2 = vec![0.0; nx];
    let mut k3 = vec![0.0; nx];
    let mut k4 = vec![0.0; nx];
    let mut tmp = vec![0.0; nx];
    let mut step = |u: &mut Vec<f64>, h: f64| {
        rhs(u, &mut k1);
        for i in 0..nx {
            tmp[i] = u[i] + 0.5 * h * k1[i];
        }
        rhs(&tmp, &mut k2);
        for i in 0..nx {
            tmp[i] = u[i] + 0.5 * h * k2[i];
        }
        rhs(&tmp, &mut k3);
        for i in 0..nx {
            tmp[i] = u[i] + h * k3[i];
        }
        rhs(&tmp, &mut k4);
        for i in 0..nx {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    };

    let snap_dt = 1.0 / (cfg.nt - 1) as f64;
    let sub = (snap_dt / dt).ceil().max(1.0) as usize;
    let h = snap_dt / sub as f64;
    let mut snaps = vec![u.clone()];
    for _ in 1..cfg.nt {
        for _ in 0..sub {
            step(&mut u, h);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericAbort {
                step: snaps.len(),
                reason: "method-of-lines solution became non-finite".into(),
            });
        }
        snaps.push(u.clone());
    }

    // storage is x-major with t fastest
    let mut values = Vec::with_capacity(nx * cfg.nt);
    for i in 0..nx {
        for s in &snaps {
            values.push(s[i]);
        }
    }
    Ok(ReferenceField {
        header: FieldHeader {
            kind: FieldKind::Burgers1d,
            axes: vec![(-1.0, 1.0, nx), (0.0, 1.0, cfg.nt)],
            params: [nu, 0.0, 0.0],
        },
        values,
    })
}

/// Burgers reference on an `nx × nt` grid: Cole–Hopf for `ν ≥ 0.05`,
/// method of lines below.
pub fn burgers_reference(nu: f64, nx: usize, nt: usize) -> Result<ReferenceField> {
    if nu < 0.05 {
        return burgers_mol(nu, &MolConfig::new(nx, nt));
    }
    if nx < 2 || nt < 2 {
        return Err(Error::Config("reference grid needs at least two nodes per axis".into()));
    }
    let xs = axis_nodes(-1.0, 1.0, nx);
    let ts = axis_nodes(0.0, 1.0, nt);
    let mut values = Vec::with_capacity(nx * nt);
    for &x in &xs {
        for &t in &ts {
            values.push(burgers_cole_hopf(nu, x, t));
        }
    }
    Ok(ReferenceField {
        header: FieldHeader {
            kind: FieldKind::Burgers1d,
            axes: vec![(-1.0, 1.0, nx), (0.0, 1.0, nt)],
            params: [nu, 0.0, 0.0],
        },
        values,
    })
}

/// `‖u_θ − u_ref‖ / ‖u_ref‖` over the grid, evaluated `chunk` points at a time.
pub fn relative_l2(net: &MlpNetwork, field: &ReferenceField, chunk: usize) -> Result<f64> {
    if net.coords() != field.header.axes.len() {
        return Err(Error::shape("relative_l2 coordinates", field.header.axes.len(), net.coords()));
    }
    let pts = field.points();
    let d = pts.cols();
    let chunk = chunk.max(1);
    let (mut num, mut den) = (0.0, 0.0);
    let mut start = 0;
    while start < pts.rows() {
        let end = (start + chunk).min(pts.rows());
        let block = DenseMatrix::from_vec(end - start, d, pts.as_slice()[start * d..end * d].to_vec())?;
        let pred = net.predict(&block)?;
        for (i, p) in pred.as_slice().iter().enumerate() {
            let r = field.values[start + i];
            num += (p - r) * (p - r);
            den += r * r;
        }
        start = end;
    }
    if den == 0.0 {
        return Err(Error::Domain("reference field is identically zero".into()));
    }
    Ok((num / den).sqrt())
}
