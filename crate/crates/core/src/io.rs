//! Versioned binary artifact formats (VFLK kernel tables, VFLP particle
//! trajectories, VFLW noise paths, VFLF field snapshots) plus the CSV and
//! JSON result emitters. All scalars are little-endian 64-bit floats; counts
//! are little-endian u32/u64.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::kernel::KernelTable;
use crate::spde::NoisePathRecord;
use crate::spectral::{FourierField, SpectralGrid};
use crate::stats::PairingSeries;
use crate::torus::TorusPoint;
use crate::{Result, VflError};

pub const KERNEL_MAGIC: &[u8; 4] = b"VFLK";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"VFLP";
pub const NOISE_MAGIC: &[u8; 4] = b"VFLW";
pub const FIELD_MAGIC: &[u8; 4] = b"VFLF";
pub const FORMAT_VERSION: u32 = 1;

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r)?))
}

fn check_magic(r: &mut impl Read, want: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = read_exact(r)?;
    if &got != want {
        return Err(VflError::Format(format!(
            "bad magic {:?}, expected {:?}",
            got, want
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(VflError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    Ok(())
}

fn write_header(w: &mut impl Write, magic: &[u8; 4]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

/// Write a kernel correction table: magic, version, resolution, then
/// row-major (k1, k2) float pairs.
pub fn write_kernel_table(w: &mut impl Write, table: &KernelTable) -> Result<()> {
    write_header(w, KERNEL_MAGIC)?;
    w.write_all(&(table.resolution() as u32).to_le_bytes())?;
    for v in table.data() {
        w.write_all(&v[0].to_le_bytes())?;
        w.write_all(&v[1].to_le_bytes())?;
    }
    Ok(())
}

pub fn read_kernel_table(r: &mut impl Read) -> Result<KernelTable> {
    check_magic(r, KERNEL_MAGIC)?;
    let res = read_u32(r)? as usize;
    if res == 0 || res > 1 << 16 {
        return Err(VflError::Format(format!("implausible table resolution {res}")));
    }
    let mut data = Vec::with_capacity(res * res);
    for _ in 0..res * res {
        data.push([read_f64(r)?, read_f64(r)?]);
    }
    KernelTable::from_data(res, data)
}

/// A stored particle trajectory: times and positions per stored step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// One position vector (length N) per stored step.
    pub steps: Vec<Vec<TorusPoint>>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory { times: Vec::new(), steps: Vec::new() }
    }

    pub fn push(&mut self, time: f64, positions: Vec<TorusPoint>) -> Result<()> {
        if let Some(first) = self.steps.first() {
            if first.len() != positions.len() {
                return Err(VflError::InvalidInput(format!(
                    "snapshot particle count {} does not match {}",
                    positions.len(),
                    first.len()
                )));
            }
        }
        self.times.push(time);
        self.steps.push(positions);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.steps.first().map_or(0, Vec::len)
    }
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

/// Write a trajectory: magic, version, N, stored-step count, then
/// (t, x1, x2) triples for every particle of every stored step.
pub fn write_trajectory(w: &mut impl Write, traj: &Trajectory) -> Result<()> {
    if traj.steps.is_empty() {
        return Err(VflError::InvalidInput("empty trajectory".into()));
    }
    write_header(w, TRAJECTORY_MAGIC)?;
    w.write_all(&(traj.n() as u64).to_le_bytes())?;
    w.write_all(&(traj.steps.len() as u64).to_le_bytes())?;
    for (t, step) in traj.times.iter().zip(&traj.steps) {
        for p in step {
            let [x1, x2] = p.coords();
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&x1.to_le_bytes())?;
            w.write_all(&x2.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_trajectory(r: &mut impl Read) -> Result<Trajectory> {
    check_magic(r, TRAJECTORY_MAGIC)?;
    let n = read_u64(r)? as usize;
    let steps = read_u64(r)? as usize;
    if n == 0 || steps == 0 {
        return Err(VflError::Format("empty trajectory file".into()));
    }
    let mut traj = Trajectory::new();
    for _ in 0..steps {
        let mut t = 0.0;
        let mut positions = Vec::with_capacity(n);
        for i in 0..n {
            let ti = read_f64(r)?;
            if i == 0 {
                t = ti;
            } else if ti != t {
                return Err(VflError::Format(format!(
                    "inconsistent timestamps within a stored step: {t} vs {ti}"
                )));
            }
            let x1 = read_f64(r)?;
            let x2 = read_f64(r)?;
            positions.push(TorusPoint::wrap_unchecked([x1, x2]));
        }
        traj.push(t, positions)?;
    }
    Ok(traj)
}

/// Write a common-noise path: magic, version, dt, step count, the W
/// increments, then the master seed for regenerating the M and eta-0 streams.
pub fn write_noise_path(w: &mut impl Write, rec: &NoisePathRecord) -> Result<()> {
    write_header(w, NOISE_MAGIC)?;
    w.write_all(&rec.dt.to_le_bytes())?;
    w.write_all(&(rec.dw.len() as u64).to_le_bytes())?;
    for &x in &rec.dw {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&rec.master_seed.to_le_bytes())?;
    Ok(())
}

pub fn read_noise_path(r: &mut impl Read) -> Result<NoisePathRecord> {
    check_magic(r, NOISE_MAGIC)?;
    let dt = read_f64(r)?;
    if !(dt > 0.0) {
        return Err(VflError::Format(format!("nonpositive dt {dt}")));
    }
    let n = read_u64(r)? as usize;
    let mut dw = Vec::with_capacity(n);
    for _ in 0..n {
        dw.push(read_f64(r)?);
    }
    let master_seed = read_u64(r)?;
    Ok(NoisePathRecord {
        version: crate::spde::NOISE_PATH_VERSION,
        master_seed,
        dt,
        dw,
    })
}

/// Write a spectral field snapshot: magic, version, M, then interleaved
/// (re, im) pairs in the field's row-major wavevector order.
pub fn write_field(w: &mut impl Write, field: &FourierField) -> Result<()> {
    write_header(w, FIELD_MAGIC)?;
    w.write_all(&(field.grid().modes_per_axis() as u32).to_le_bytes())?;
    for c in field.coeffs() {
        w.write_all(&c.re.to_le_bytes())?;
        w.write_all(&c.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_field(r: &mut impl Read) -> Result<FourierField> {
    check_magic(r, FIELD_MAGIC)?;
    let m = read_u32(r)? as usize;
    let grid = SpectralGrid::new(m)?;
    let mut coeffs = Vec::with_capacity(m * m);
    for _ in 0..m * m {
        coeffs.push(Complex64::new(read_f64(r)?, read_f64(r)?));
    }
    FourierField::from_coeffs(grid, coeffs)
}

/// Fixed CSV schema for observable series.
pub const SERIES_CSV_HEADER: &str = "time,value,N,ensemble_id,w_path_id,seed";

/// Append one series to a CSV writer, emitting the header if requested.
pub fn write_series_csv(w: &mut impl Write, series: &PairingSeries, header: bool) -> Result<()> {
    if header {
        writeln!(w, "{SERIES_CSV_HEADER}")?;
    }
    for (t, v) in series.times.iter().zip(&series.values) {
        writeln!(
            w,
            "{t:.17e},{v:.17e},{},{},{},{}",
            series.n, series.ensemble_id, series.w_path_id, series.seed
        )?;
    }
    Ok(())
}

/// Write several series into one CSV file.
pub fn write_series_file(path: &Path, series: &[&PairingSeries]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (i, s) in series.iter().enumerate() {
        write_series_csv(&mut f, s, i == 0)?;
    }
    f.flush()?;
    Ok(())
}

/// FNV-1a 64 content hash, hex-encoded; used for manifest file inventories.
pub fn fnv64_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Serialize any summary structure as pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| VflError::Format(format!("json serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| VflError::Format(format!("json parse failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Kernel, KernelBuildParams, KernelSpec};
    use crate::spectral::default_density;

    #[test]
    fn kernel_table_roundtrip() {
        let kernel = Kernel::with_build_params(
            KernelSpec::FreeSpacePlusCorrection { table_resolution: 32 },
            KernelBuildParams { fft_resolution: 256, table_resolution: 32 },
        )
        .unwrap();
        let table = kernel.k0_table().unwrap();
        let mut buf = Vec::new();
        write_kernel_table(&mut buf, table).unwrap();
        assert_eq!(&buf[..4], KERNEL_MAGIC);
        let back = read_kernel_table(&mut buf.as_slice()).unwrap();
        assert_eq!(back.resolution(), 32);
        assert_eq!(back.data(), table.data());
    }

    #[test]
    fn trajectory_roundtrip_is_bitwise() {
        let mut traj = Trajectory::new();
        for s in 0..3 {
            let pts: Vec<TorusPoint> = (0..4)
                .map(|i| {
                    TorusPoint::wrap_unchecked([
                        0.1 * (i as f64 + 1.0) * (s as f64 + 1.0),
                        -0.2 * (i as f64 - 1.5),
                    ])
                })
                .collect();
            traj.push(s as f64 * 0.25, pts).unwrap();
        }
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &traj).unwrap();
        let back = read_trajectory(&mut buf.as_slice()).unwrap();
        assert_eq!(back, traj);
        let mut buf2 = Vec::new();
        write_trajectory(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn trajectory_rejects_mismatched_counts() {
        let mut traj = Trajectory::new();
        let p = TorusPoint::wrap_unchecked([0.0, 0.0]);
        traj.push(0.0, vec![p; 4]).unwrap();
        assert!(traj.push(0.1, vec![p; 3]).is_err());
    }

    #[test]
    fn noise_path_roundtrip_is_bitwise() {
        let rec = NoisePathRecord::record(7, 20, 0.0025).unwrap();
        let mut buf = Vec::new();
        write_noise_path(&mut buf, &rec).unwrap();
        let back = read_noise_path(&mut buf.as_slice()).unwrap();
        assert_eq!(back.master_seed, rec.master_seed);
        assert_eq!(back.dt, rec.dt);
        assert_eq!(back.dw, rec.dw);
        let mut buf2 = Vec::new();
        write_noise_path(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn field_roundtrip_is_bitwise() {
        let grid = SpectralGrid::new(16).unwrap();
        let f = default_density(grid);
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let back = read_field(&mut buf.as_slice()).unwrap();
        assert_eq!(back.coeffs(), f.coeffs());
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let grid = SpectralGrid::new(8).unwrap();
        let f = FourierField::uniform_density(grid);
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        let mut corrupted = buf.clone();
        corrupted[0] = b'X';
        assert!(matches!(
            read_field(&mut corrupted.as_slice()),
            Err(VflError::Format(_))
        ));
        let mut wrong_version = buf.clone();
        wrong_version[4] = 99;
        assert!(read_field(&mut wrong_version.as_slice()).is_err());
        // cross-format magic confusion
        assert!(read_trajectory(&mut buf.as_slice()).is_err());
        // truncation
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_field(&mut &short[..]), Err(VflError::Io(_))));
    }

    #[test]
    fn series_csv_has_fixed_schema() {
        let mut s = PairingSeries::new("eta_phi", 128, 3, 2, 77);
        s.push(0.0, 1.5).unwrap();
        s.push(0.25, -0.75).unwrap();
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &s, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SERIES_CSV_HEADER);
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row.len(), 6);
        assert_eq!(row[0].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[1].parse::<f64>().unwrap(), 1.5);
        assert_eq!(row[2], "128");
        assert_eq!(row[3], "2");
        assert_eq!(row[4], "77");
        assert_eq!(row[5], "3");
        // full f64 precision survives the round trip
        let row2: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row2[1].parse::<f64>().unwrap(), -0.75);
    }

    #[test]
    fn json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("summary.json");
        let rec = NoisePathRecord::record(3, 5, 0.01).unwrap();
        write_json(&path, &rec).unwrap();
        let back: NoisePathRecord = read_json(&path).unwrap();
        assert_eq!(back.dw, rec.dw);
    }
}
