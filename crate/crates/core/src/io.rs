//! Serialization of wavefunctions, records, histograms and trajectories.
//!
//! Binary wavefunction layout, all little-endian:
//!
//! ```text
//! magic   b"SAWF"
//! version u32 = 1
//! dim     u32 (1 or 2)
//! per axis: topology u32 (0 line, 1 periodic), n u64, min f64, max f64
//! data    n0·n1 pairs (re f64, im f64), row-major with axis 1 fastest
//! ```

use num_complex::Complex64;
use serde::Serialize;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::{Axis, Topology};
use crate::madelung::Stencils;
use crate::trajectory::Trajectory;
use crate::wavefunction::WaveFunction;

const MAGIC: &[u8; 4] = b"SAWF";
const VERSION: u32 = 1;

/// `x[,y],re,im` with one row per grid point.
pub fn write_wavefunction_csv<W: Write>(mut w: W, psi: &WaveFunction) -> Result<()> {
    let st = Stencils::new(psi.axes());
    if psi.dim() == 1 {
        writeln!(w, "x,re,im")?;
    } else {
        writeln!(w, "x,y,re,im")?;
    }
    for (k, a) in psi.amplitudes().iter().enumerate() {
        let q = st.point(k);
        if psi.dim() == 1 {
            writeln!(w, "{},{},{}", q[0], a.re, a.im)?;
        } else {
            writeln!(w, "{},{},{},{}", q[0], q[1], a.re, a.im)?;
        }
    }
    Ok(())
}

pub fn write_wavefunction_binary<W: Write>(mut w: W, psi: &WaveFunction) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(psi.dim() as u32).to_le_bytes())?;
    for a in psi.axes() {
        let topo: u32 = if a.is_periodic() { 1 } else { 0 };
        w.write_all(&topo.to_le_bytes())?;
        w.write_all(&(a.n as u64).to_le_bytes())?;
        w.write_all(&a.min.to_le_bytes())?;
        w.write_all(&a.max.to_le_bytes())?;
    }
    for z in psi.amplitudes() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_wavefunction_binary<R: Read>(mut r: R) -> Result<WaveFunction> {
    if &read_array::<4, _>(&mut r)? != MAGIC {
        return Err(Error::InvalidParameter("not a wavefunction dump (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != VERSION {
        return Err(Error::InvalidParameter(format!("unsupported dump version {version}")));
    }
    let dim = u32::from_le_bytes(read_array(&mut r)?);
    if !(1..=2).contains(&dim) {
        return Err(Error::InvalidParameter(format!("dump dimension {dim} is not 1 or 2")));
    }
    let mut axes = Vec::new();
    for _ in 0..dim {
        let topology = match u32::from_le_bytes(read_array(&mut r)?) {
            0 => Topology::Line,
            1 => Topology::Periodic,
            t => return Err(Error::InvalidParameter(format!("unknown axis topology {t}"))),
        };
        let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let min = f64::from_le_bytes(read_array(&mut r)?);
        let max = f64::from_le_bytes(read_array(&mut r)?);
        axes.push(match topology {
            Topology::Line => Axis::line(min, max, n)?,
            Topology::Periodic => Axis::periodic(min, max - min, n)?,
        });
    }
    let len: usize = axes.iter().map(|a| a.n).product();
    let mut amps = Vec::with_capacity(len);
    for _ in 0..len {
        let re = f64::from_le_bytes(read_array(&mut r)?);
        let im = f64::from_le_bytes(read_array(&mut r)?);
        amps.push(Complex64::new(re, im));
    }
    WaveFunction::new(axes, amps)
}

/// One JSON document per line.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::InvalidParameter(format!("serialization: {e}")))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::InvalidParameter(format!("serialization: {e}")))?;
    w.write_all(b"\n")?;
    Ok(())
}

/// A fixed-width histogram of a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<u64>,
    /// Optional reference probability per bin.
    pub reference: Option<Vec<f64>>,
}

impl Histogram {
    pub fn new(samples: impl IntoIterator<Item = f64>, min: f64, max: f64, n_bins: usize) -> Self {
        let mut counts = vec![0u64; n_bins];
        let w = (max - min) / n_bins as f64;
        for x in samples {
            let u = (x - min) / w;
            if u >= 0.0 && u < n_bins as f64 {
                counts[u as usize] += 1;
            }
        }
        Self { min, max, counts, reference: None }
    }

    pub fn with_reference(mut self, reference: Vec<f64>) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let w = (self.max - self.min) / self.counts.len() as f64;
        (self.min + k as f64 * w, self.min + (k + 1) as f64 * w)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let total: u64 = self.counts.iter().sum();
        let head = if self.reference.is_some() { "lo,hi,count,frequency,reference" } else { "lo,hi,count,frequency" };
        writeln!(w, "{head}")?;
        for (k, &c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(k);
            let f = c as f64 / total.max(1) as f64;
            match &self.reference {
                Some(r) => writeln!(w, "{lo},{hi},{c},{f},{}", r[k])?,
                None => writeln!(w, "{lo},{hi},{c},{f}")?,
            }
        }
        Ok(())
    }
}

/// `trial,t,theta,q2,lambda_sign`; the sign column is 0 for effective runs.
pub fn write_trajectories_csv<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    writeln!(w, "trial,t,theta,q2,lambda_sign")?;
    for tr in trajs {
        for (k, (t, q)) in tr.times.iter().zip(&tr.configs).enumerate() {
            let s = tr.lambda_signs.get(k).copied().unwrap_or(0);
            writeln!(w, "{},{},{},{},{}", tr.trial, t, q[0], q[1], s)?;
        }
    }
    Ok(())
}
