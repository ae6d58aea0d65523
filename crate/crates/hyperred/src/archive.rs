//! Binary containers for pipeline artifacts.
//!
//! Every stage output lives in one file with a fixed little-endian layout:
//! a 4-byte magic, a format version, a kind tag, then the kind-specific
//! payload. Strings and arrays are length-prefixed, matrices carry explicit
//! shapes, and optional blocks use a single presence byte. Readers validate
//! the header and turn any short read into a [`Error::Format`] naming the
//! file, so a truncated or mislabeled artifact fails loudly instead of
//! feeding garbage into later stages.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::dataset::{Provenance, Snapshot, SnapshotSet};
use crate::error::{Error, Result};
use crate::pann::{IcnnArch, PannModel, Standardizer};
use crate::reduction::{PodBasis, ReducedDataset};
use crate::refmodel::RegimeLabel;
use crate::tpwl::{TpwlModel, TpwlPoint};

const MAGIC: &[u8; 4] = b"HRSN";
const VERSION: u32 = 1;

/// Payload discriminator stored in the header.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Snapshots = 1,
    Reduced = 2,
    Basis = 3,
    Tpwl = 4,
    Pann = 5,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Snapshots => "snapshot set",
            Kind::Reduced => "reduced dataset",
            Kind::Basis => "reduction basis",
            Kind::Tpwl => "piecewise-linear surrogate",
            Kind::Pann => "convex energy surrogate",
        }
    }
}

/// Upper bound on any single length prefix; a corrupt header that claims
/// more than this is rejected before the allocation is attempted.
const MAX_LEN: u64 = 1 << 33;

// ---------------------------------------------------------------------------
// Encoder / decoder
// ---------------------------------------------------------------------------

struct Sink {
    w: BufWriter<File>,
    path: PathBuf,
}

impl Sink {
    fn create(path: &Path, kind: Kind) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut sink = Sink {
            w: BufWriter::new(File::create(path)?),
            path: path.to_path_buf(),
        };
        sink.bytes(MAGIC)?;
        sink.u32(VERSION)?;
        sink.u32(kind as u32)?;
        Ok(sink)
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            detail: detail.into(),
        }
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b)?;
        Ok(())
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn len(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }

    fn string(&mut self, s: &str) -> Result<()> {
        self.len(s.len())?;
        self.bytes(s.as_bytes())
    }

    fn floats(&mut self, xs: &[f64]) -> Result<()> {
        self.len(xs.len())?;
        for &x in xs {
            self.f64(x)?;
        }
        Ok(())
    }

    fn vector(&mut self, v: &DVector<f64>) -> Result<()> {
        self.floats(v.as_slice())
    }

    /// Shape header plus column-major entries (nalgebra's native order).
    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        self.len(m.nrows())?;
        self.len(m.ncols())?;
        for &x in m.as_slice() {
            self.f64(x)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

struct Source {
    r: BufReader<File>,
    path: PathBuf,
}

impl Source {
    fn open(path: &Path, kind: Kind) -> Result<Self> {
        let mut src = Source {
            r: BufReader::new(File::open(path)?),
            path: path.to_path_buf(),
        };
        let mut magic = [0u8; 4];
        src.exact(&mut magic, "magic header")?;
        if &magic != MAGIC {
            return Err(src.fail("not an artifact container (bad magic)"));
        }
        let version = src.u32("format version")?;
        if version != VERSION {
            return Err(src.fail(format!(
                "unsupported container version {version} (expected {VERSION})"
            )));
        }
        let tag = src.u32("payload kind")?;
        if tag != kind as u32 {
            return Err(src.fail(format!(
                "payload kind {tag} is not a {}",
                kind.name()
            )));
        }
        Ok(src)
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.display().to_string(),
            detail: detail.into(),
        }
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.r
            .read_exact(buf)
            .map_err(|e| self.fail(format!("truncated while reading {what}: {e}")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        if v > MAX_LEN {
            return Err(self.fail(format!("implausible length {v} for {what}")));
        }
        Ok(v as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let mut buf = vec![0u8; n];
        self.exact(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| self.fail(format!("{what} is not valid UTF-8")))
    }

    fn floats(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.len(what)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64(what)?);
        }
        Ok(out)
    }

    fn vector(&mut self, what: &str) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.floats(what)?))
    }

    fn matrix(&mut self, what: &str) -> Result<DMatrix<f64>> {
        let rows = self.len(what)?;
        let cols = self.len(what)?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(self.f64(what)?);
        }
        Ok(DMatrix::from_vec(rows, cols, data))
    }

    /// Fails if trailing bytes follow the payload.
    fn expect_eof(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.r.read(&mut b) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.fail("trailing bytes after payload")),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

// ---------------------------------------------------------------------------
// Snapshot sets
// ---------------------------------------------------------------------------

pub fn save_snapshots(path: &Path, set: &SnapshotSet) -> Result<()> {
    let mut s = Sink::create(path, Kind::Snapshots)?;
    s.string(&set.name)?;
    s.u8(set.label.tag())?;
    s.matrix(&set.input_matrix)?;
    s.len(set.load_values.len())?;
    for u in &set.load_values {
        s.vector(u)?;
    }
    if set.states.len() != set.load_values.len() {
        return Err(s.fail("state and load counts disagree"));
    }
    s.len(set.states.len())?;
    for st in &set.states {
        s.vector(&st.x)?;
        s.f64(st.e)?;
        s.vector(&st.f)?;
        match &st.k {
            Some(k) => {
                s.u8(1)?;
                s.matrix(k)?;
            }
            None => s.u8(0)?,
        }
    }
    s.string(&set.provenance.geometry_fingerprint)?;
    s.f64(set.provenance.tolerance)?;
    s.u64(set.provenance.max_iterations as u64)?;
    s.finish()
}

pub fn load_snapshots(path: &Path) -> Result<SnapshotSet> {
    let mut s = Source::open(path, Kind::Snapshots)?;
    let name = s.string("set name")?;
    let label = RegimeLabel::from_tag(s.u8("regime label")?)?;
    let input_matrix = s.matrix("input matrix")?;
    let n_loads = s.len("load count")?;
    let mut load_values = Vec::with_capacity(n_loads);
    for _ in 0..n_loads {
        load_values.push(s.vector("load vector")?);
    }
    let n_states = s.len("state count")?;
    if n_states != n_loads {
        return Err(s.fail("state and load counts disagree"));
    }
    let mut states = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let x = s.vector("state")?;
        let e = s.f64("energy")?;
        let f = s.vector("force")?;
        let k = match s.u8("tangent presence flag")? {
            0 => None,
            1 => Some(s.matrix("tangent")?),
            other => return Err(s.fail(format!("bad presence flag {other}"))),
        };
        states.push(Snapshot { x, e, f, k });
    }
    let provenance = Provenance {
        geometry_fingerprint: s.string("geometry fingerprint")?,
        tolerance: s.f64("solver tolerance")?,
        max_iterations: s.u64("iteration cap")? as usize,
    };
    s.expect_eof()?;
    Ok(SnapshotSet {
        name,
        label,
        input_matrix,
        load_values,
        states,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Reduced datasets
// ---------------------------------------------------------------------------

pub fn save_reduced(path: &Path, data: &ReducedDataset) -> Result<()> {
    let mut s = Sink::create(path, Kind::Reduced)?;
    s.len(data.r)?;
    s.len(data.x_r.len())?;
    for i in 0..data.x_r.len() {
        s.vector(&data.x_r[i])?;
        s.f64(data.e[i])?;
        s.vector(&data.f_r[i])?;
        match &data.k_r[i] {
            Some(k) => {
                s.u8(1)?;
                s.matrix(k)?;
            }
            None => s.u8(0)?,
        }
        s.u8(data.labels[i].tag())?;
    }
    s.finish()
}

pub fn load_reduced(path: &Path) -> Result<ReducedDataset> {
    let mut s = Source::open(path, Kind::Reduced)?;
    let r = s.len("reduced dimension")?;
    let m = s.len("sample count")?;
    let mut data = ReducedDataset {
        r,
        x_r: Vec::with_capacity(m),
        e: Vec::with_capacity(m),
        f_r: Vec::with_capacity(m),
        k_r: Vec::with_capacity(m),
        labels: Vec::with_capacity(m),
    };
    for _ in 0..m {
        data.x_r.push(s.vector("reduced state")?);
        data.e.push(s.f64("energy")?);
        data.f_r.push(s.vector("reduced force")?);
        let k = match s.u8("tangent presence flag")? {
            0 => None,
            1 => Some(s.matrix("reduced tangent")?),
            other => return Err(s.fail(format!("bad presence flag {other}"))),
        };
        data.k_r.push(k);
        data.labels.push(RegimeLabel::from_tag(s.u8("regime label")?)?);
    }
    s.expect_eof()?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Reduction basis
// ---------------------------------------------------------------------------

pub fn save_basis(path: &Path, basis: &PodBasis) -> Result<()> {
    let mut s = Sink::create(path, Kind::Basis)?;
    s.matrix(&basis.v)?;
    s.floats(&basis.sigma_normalized)?;
    s.f64(basis.cumulative_energy)?;
    s.u8(basis.rank_warning as u8)?;
    s.finish()
}

pub fn load_basis(path: &Path) -> Result<PodBasis> {
    let mut s = Source::open(path, Kind::Basis)?;
    let v = s.matrix("basis matrix")?;
    let sigma_normalized = s.floats("singular value spectrum")?;
    let cumulative_energy = s.f64("cumulative energy")?;
    let rank_warning = match s.u8("rank warning flag")? {
        0 => false,
        1 => true,
        other => return Err(s.fail(format!("bad boolean byte {other}"))),
    };
    s.expect_eof()?;
    Ok(PodBasis {
        v,
        sigma_normalized,
        cumulative_energy,
        rank_warning,
    })
}

// ---------------------------------------------------------------------------
// Piecewise-linear surrogate
// ---------------------------------------------------------------------------

pub fn save_tpwl(path: &Path, model: &TpwlModel) -> Result<()> {
    let mut s = Sink::create(path, Kind::Tpwl)?;
    s.f64(model.beta)?;
    s.f64(model.epsilon)?;
    s.len(model.source_indices.len())?;
    for &i in &model.source_indices {
        s.u64(i as u64)?;
    }
    s.len(model.points.len())?;
    for p in &model.points {
        s.vector(&p.x_r)?;
        s.vector(&p.f_r)?;
        s.matrix(&p.k_r)?;
        s.vector(&p.f_tilde)?;
    }
    s.finish()
}

pub fn load_tpwl(path: &Path) -> Result<TpwlModel> {
    let mut s = Source::open(path, Kind::Tpwl)?;
    let beta = s.f64("weight decay rate")?;
    let epsilon = s.f64("distance floor")?;
    let n_src = s.len("source index count")?;
    let mut source_indices = Vec::with_capacity(n_src);
    for _ in 0..n_src {
        source_indices.push(s.u64("source index")? as usize);
    }
    let n_pts = s.len("linearization point count")?;
    let mut points = Vec::with_capacity(n_pts);
    for _ in 0..n_pts {
        points.push(TpwlPoint {
            x_r: s.vector("expansion state")?,
            f_r: s.vector("expansion force")?,
            k_r: s.matrix("expansion tangent")?,
            f_tilde: s.vector("expansion affine term")?,
        });
    }
    s.expect_eof()?;
    Ok(TpwlModel {
        points,
        beta,
        epsilon,
        source_indices,
    })
}

// ---------------------------------------------------------------------------
// Convex energy surrogate
// ---------------------------------------------------------------------------

pub fn save_pann(path: &Path, model: &PannModel) -> Result<()> {
    let mut s = Sink::create(path, Kind::Pann)?;
    s.len(model.arch.input_dim)?;
    s.len(model.arch.width)?;
    s.len(model.arch.hidden_layers)?;
    s.vector(&model.standardizer.mean)?;
    s.vector(&model.standardizer.std)?;
    s.floats(&model.params)?;
    s.f64(model.energy_offset)?;
    s.vector(&model.force_offset)?;
    s.u64(model.init_seed)?;
    s.finish()
}

pub fn load_pann(path: &Path) -> Result<PannModel> {
    let mut s = Source::open(path, Kind::Pann)?;
    let arch = IcnnArch {
        input_dim: s.len("input dimension")?,
        width: s.len("layer width")?,
        hidden_layers: s.len("hidden layer count")?,
    };
    let standardizer = Standardizer {
        mean: s.vector("standardizer mean")?,
        std: s.vector("standardizer scale")?,
    };
    let params = s.floats("parameter vector")?;
    if params.len() != arch.parameter_count() {
        return Err(s.fail(format!(
            "parameter vector has {} entries, architecture needs {}",
            params.len(),
            arch.parameter_count()
        )));
    }
    let energy_offset = s.f64("energy offset")?;
    let force_offset = s.vector("force offset")?;
    let init_seed = s.u64("initializer seed")?;
    s.expect_eof()?;
    Ok(PannModel {
        arch,
        standardizer,
        params,
        energy_offset,
        force_offset,
        init_seed,
    })
}

// ---------------------------------------------------------------------------
// Sidecars and fingerprints
// ---------------------------------------------------------------------------

/// Writes a JSON sidecar with stable key order (callers use sorted maps) and
/// a trailing newline.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        detail: format!("cannot serialize sidecar: {e}"),
    })?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Content hash of a file on disk, for provenance tracking across stages.
pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

/// FNV-1a, the 64-bit variant: small, dependency-free, and stable across
/// platforms. Used for change detection, not security.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
