//! On-disk artifact formats: plain CSV tables and a little-endian binary
//! container for complex field images.
//!
//! Floats are written in scientific notation with the shortest digits that
//! parse back to the exact same bits, so every table round-trips losslessly
//! and reruns with the same seed produce byte-identical files. Writes are
//! atomic (write to a temp file, then rename).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::calibration::{HistogramBin, SnrModel};
use crate::error::{Error, Result};
use crate::estimator::{RefractiveIndexEstimate, SizeEstimate};
use crate::similarity::SimilarityMatrix;
use crate::types::{Dimensionality, RytovImage, Trajectory};

/// Shortest exact representation of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    what: &str,
    s: &str,
) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        format: "csv",
        line,
        message: format!("bad {what}: {s:?}"),
    })
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        format: "csv",
        line,
        message,
    }
}

/// Write bytes atomically: temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a CSV file, check its header, and return the split data rows with
/// their one-based line numbers.
fn read_csv(path: &Path, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first == header => {}
        Some((_, first)) => {
            return Err(parse_error(
                path,
                1,
                format!("expected header {header:?}, got {first:?}"),
            ))
        }
        None => return Err(parse_error(path, 1, "empty file".to_string())),
    }
    let n_cols = header.split(',').count();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != n_cols {
            return Err(parse_error(
                path,
                idx + 1,
                format!("expected {n_cols} fields, got {}", fields.len()),
            ));
        }
        rows.push((idx + 1, fields));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// tracks.csv
// ---------------------------------------------------------------------------

pub const TRACKS_HEADER: &str = "particle_id,frame,t_s,x_m,y_m,z_m";

/// Write trajectories as `particle_id,frame,t_s,x_m,y_m,z_m`; the axial
/// column is empty in 2D mode.
pub fn write_tracks(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut out = String::new();
    out.push_str(TRACKS_HEADER);
    out.push('\n');
    for traj in trajectories {
        for (frame, pos) in traj.positions.iter().enumerate() {
            let t = frame as f64 * traj.dt;
            let z = match traj.dim {
                Dimensionality::Two => String::new(),
                Dimensionality::Three => fmt_f64(pos[2]),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                traj.particle_id,
                frame,
                fmt_f64(t),
                fmt_f64(pos[0]),
                fmt_f64(pos[1]),
                z
            )
            .expect("string write");
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Read tracks back, grouped by particle id (ascending), frames sorted.
pub fn read_tracks(path: &Path) -> Result<Vec<Trajectory>> {
    let rows = read_csv(path, TRACKS_HEADER)?;
    if rows.is_empty() {
        return Err(parse_error(path, 1, "no data rows".to_string()));
    }
    struct Acc {
        frames: Vec<(u32, f64, [f64; 3])>,
        has_z: bool,
    }
    let mut by_id: BTreeMap<u64, Acc> = BTreeMap::new();
    for (line, fields) in rows {
        let id: u64 = parse_field(path, line, "particle_id", &fields[0])?;
        let frame: u32 = parse_field(path, line, "frame", &fields[1])?;
        let t: f64 = parse_field(path, line, "t_s", &fields[2])?;
        let x: f64 = parse_field(path, line, "x_m", &fields[3])?;
        let y: f64 = parse_field(path, line, "y_m", &fields[4])?;
        let z_raw = fields[5].trim();
        let (z, has_z) = if z_raw.is_empty() {
            (0.0, false)
        } else {
            (parse_field(path, line, "z_m", z_raw)?, true)
        };
        let acc = by_id.entry(id).or_insert(Acc {
            frames: Vec::new(),
            has_z,
        });
        if acc.has_z != has_z {
            return Err(parse_error(
                path,
                line,
                format!("particle {id} mixes 2D and 3D rows"),
            ));
        }
        acc.frames.push((frame, t, [x, y, z]));
    }
    let mut out = Vec::with_capacity(by_id.len());
    for (id, mut acc) in by_id {
        acc.frames.sort_by_key(|f| f.0);
        if acc.frames.len() < 2 {
            return Err(parse_error(
                path,
                1,
                format!("particle {id} has fewer than 2 frames"),
            ));
        }
        let dt = acc.frames[1].1 - acc.frames[0].1;
        let dim = if acc.has_z {
            Dimensionality::Three
        } else {
            Dimensionality::Two
        };
        let positions = acc.frames.iter().map(|f| f.2).collect();
        out.push(Trajectory::new(id, dt, positions, dim)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// truth.csv
// ---------------------------------------------------------------------------

pub const TRUTH_HEADER: &str = "particle_id,population,label,diameter_m,n,k";

/// Ground truth of one simulated particle.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub particle_id: u64,
    pub population: usize,
    pub label: String,
    pub diameter_m: f64,
    pub n: f64,
    pub k: f64,
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(TRUTH_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.particle_id,
            r.population,
            r.label,
            fmt_f64(r.diameter_m),
            fmt_f64(r.n),
            fmt_f64(r.k)
        )
        .expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let rows = read_csv(path, TRUTH_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(TruthRow {
                particle_id: parse_field(path, line, "particle_id", &f[0])?,
                population: parse_field(path, line, "population", &f[1])?,
                label: f[2].clone(),
                diameter_m: parse_field(path, line, "diameter_m", &f[3])?,
                n: parse_field(path, line, "n", &f[4])?,
                k: parse_field(path, line, "k", &f[5])?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Field image binary container
// ---------------------------------------------------------------------------

const RYTV_MAGIC: &[u8; 4] = b"RYTV";
const RYTV_VERSION: u32 = 1;

/// Serialize an image: magic `RYTV`, version u32, width u32, height u32,
/// pixel size f64, epsilon f64 (NaN when unset), then row-major
/// interleaved `(re, im)` f64 pairs. Everything little-endian.
pub fn write_rytov(path: &Path, image: &RytovImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(32 + image.values.len() * 16);
    bytes.extend_from_slice(RYTV_MAGIC);
    bytes.extend_from_slice(&RYTV_VERSION.to_le_bytes());
    bytes.extend_from_slice(&image.width.to_le_bytes());
    bytes.extend_from_slice(&image.height.to_le_bytes());
    bytes.extend_from_slice(&image.pixel_size.to_le_bytes());
    bytes.extend_from_slice(&image.epsilon.unwrap_or(f64::NAN).to_le_bytes());
    for v in &image.values {
        bytes.extend_from_slice(&v.re.to_le_bytes());
        bytes.extend_from_slice(&v.im.to_le_bytes());
    }
    atomic_write(path, &bytes)
}

pub fn read_rytov(path: &Path) -> Result<RytovImage> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let fail = |message: String| Error::Parse {
        path: path.to_path_buf(),
        format: "rytov",
        line: 0,
        message,
    };
    if bytes.len() < 32 {
        return Err(fail("file shorter than header".to_string()));
    }
    if &bytes[0..4] != RYTV_MAGIC {
        return Err(fail("bad magic".to_string()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != RYTV_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let width = u32_at(8);
    let height = u32_at(12);
    let pixel_size = f64_at(16);
    let epsilon = f64_at(24);
    let n = width as usize * height as usize;
    if bytes.len() != 32 + n * 16 {
        return Err(fail(format!(
            "payload length {} does not match {width}x{height}",
            bytes.len() - 32
        )));
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let o = 32 + i * 16;
        values.push(Complex64::new(f64_at(o), f64_at(o + 8)));
    }
    let mut image = RytovImage::new(width, height, pixel_size, values)?;
    if !epsilon.is_nan() {
        image = image.with_epsilon(epsilon)?;
    }
    Ok(image)
}

/// Canonical file name of a particle's averaged image.
pub fn image_filename(particle_id: u64) -> String {
    format!("particle_{particle_id:05}.ryt")
}

/// Canonical file name of one raw frame of a particle stack.
pub fn frame_filename(particle_id: u64, frame: u32) -> String {
    format!("particle_{particle_id:05}_frame_{frame:05}.ryt")
}

/// Load every `particle_*.ryt` in a directory, keyed by particle id.
/// Frame files (containing `_frame_`) are ignored.
pub fn read_images_dir(dir: &Path) -> Result<BTreeMap<u64, RytovImage>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("particle_") || !name.ends_with(".ryt") || name.contains("_frame_") {
            continue;
        }
        let id_part = &name["particle_".len()..name.len() - ".ryt".len()];
        let id: u64 = id_part.parse().map_err(|_| Error::Parse {
            path: entry.path(),
            format: "rytov",
            line: 0,
            message: format!("cannot parse particle id from {name:?}"),
        })?;
        out.insert(id, read_rytov(&entry.path())?);
    }
    Ok(out)
}

/// Frames of one particle stack, tagged with their frame index.
pub type FrameStack = Vec<(u32, RytovImage)>;

/// Load the raw frame stacks of a directory: id -> frames sorted by index.
pub fn read_frames_dir(dir: &Path) -> Result<BTreeMap<u64, FrameStack>> {
    let mut out: BTreeMap<u64, FrameStack> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !name.starts_with("particle_") || !name.ends_with(".ryt") {
            continue;
        }
        let stem = &name["particle_".len()..name.len() - ".ryt".len()];
        let Some((id_part, frame_part)) = stem.split_once("_frame_") else {
            continue;
        };
        let bad = |what: &str| Error::Parse {
            path: entry.path(),
            format: "rytov",
            line: 0,
            message: format!("cannot parse {what} from {name:?}"),
        };
        let id: u64 = id_part.parse().map_err(|_| bad("particle id"))?;
        let frame: u32 = frame_part.parse().map_err(|_| bad("frame index"))?;
        out.entry(id)
            .or_default()
            .push((frame, read_rytov(&entry.path())?));
    }
    for frames in out.values_mut() {
        frames.sort_by_key(|f| f.0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// offsets.csv (input of noise estimation)
// ---------------------------------------------------------------------------

pub const OFFSETS_HEADER: &str = "particle_id,frame,off_x_m,off_y_m";

pub fn write_offsets(path: &Path, rows: &[(u64, u32, f64, f64)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(OFFSETS_HEADER);
    out.push('\n');
    for &(id, frame, x, y) in rows {
        writeln!(out, "{},{},{},{}", id, frame, fmt_f64(x), fmt_f64(y)).expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

/// Recentering offsets of one particle stack, tagged with frame indices.
pub type OffsetTable = Vec<(u32, [f64; 2])>;

/// id -> offsets sorted by frame index.
pub fn read_offsets(path: &Path) -> Result<BTreeMap<u64, OffsetTable>> {
    let rows = read_csv(path, OFFSETS_HEADER)?;
    let mut out: BTreeMap<u64, OffsetTable> = BTreeMap::new();
    for (line, f) in rows {
        let id: u64 = parse_field(path, line, "particle_id", &f[0])?;
        let frame: u32 = parse_field(path, line, "frame", &f[1])?;
        let x: f64 = parse_field(path, line, "off_x_m", &f[2])?;
        let y: f64 = parse_field(path, line, "off_y_m", &f[3])?;
        out.entry(id).or_default().push((frame, [x, y]));
    }
    for offs in out.values_mut() {
        offs.sort_by_key(|o| o.0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sizes.csv
// ---------------------------------------------------------------------------

pub const SIZES_HEADER: &str = "particle_id,snr,classic_diameter_m,classic_slope_m2_s,classic_intercept_m2,classic_valid,weighted_diameter_m,weighted_slope_m2_s,weighted_intercept_m2,weighted_valid,weighted_fallback,n_w";

/// Per-particle pair of estimates as written to `sizes.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SizesRow {
    pub particle_id: u64,
    pub snr: Option<f64>,
    pub classic: SizeEstimate,
    pub weighted: SizeEstimate,
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_opt_f64(path: &Path, line: usize, what: &str, s: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse_field(path, line, what, s).map(Some)
    }
}

fn fmt_n_w(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        fmt_f64(v)
    }
}

pub fn write_sizes(path: &Path, rows: &[SizesRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(SIZES_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.particle_id,
            opt_f64(r.snr),
            opt_f64(r.classic.diameter),
            fmt_f64(r.classic.slope),
            fmt_f64(r.classic.intercept),
            r.classic.is_valid(),
            opt_f64(r.weighted.diameter),
            fmt_f64(r.weighted.slope),
            fmt_f64(r.weighted.intercept),
            r.weighted.is_valid(),
            r.weighted.fallback,
            fmt_n_w(r.weighted.n_w_used),
        )
        .expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_sizes(path: &Path) -> Result<Vec<SizesRow>> {
    use crate::estimator::FitMethod;
    let rows = read_csv(path, SIZES_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            let particle_id: u64 = parse_field(path, line, "particle_id", &f[0])?;
            let n_w = crate::config::parse_n_w(f[11].trim())
                .map_err(|e| parse_error(path, line, e.to_string()))?;
            Ok(SizesRow {
                particle_id,
                snr: parse_opt_f64(path, line, "snr", &f[1])?,
                classic: SizeEstimate {
                    particle_id,
                    diameter: parse_opt_f64(path, line, "classic_diameter_m", &f[2])?,
                    slope: parse_field(path, line, "classic_slope", &f[3])?,
                    intercept: parse_field(path, line, "classic_intercept", &f[4])?,
                    method: FitMethod::Classic,
                    n_w_used: f64::INFINITY,
                    fallback: false,
                },
                weighted: SizeEstimate {
                    particle_id,
                    diameter: parse_opt_f64(path, line, "weighted_diameter_m", &f[6])?,
                    slope: parse_field(path, line, "weighted_slope", &f[7])?,
                    intercept: parse_field(path, line, "weighted_intercept", &f[8])?,
                    method: if n_w == 0.0 {
                        FitMethod::Arithmetic
                    } else {
                        FitMethod::Weighted
                    },
                    n_w_used: n_w,
                    fallback: parse_field(path, line, "weighted_fallback", &f[10])?,
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// similarity.csv
// ---------------------------------------------------------------------------

/// Full matrix with a leading id column and one column per particle.
pub fn write_similarity(path: &Path, ids: &[u64], matrix: &SimilarityMatrix) -> Result<()> {
    let mut out = String::new();
    out.push_str("particle_id");
    for id in ids {
        write!(out, ",{id}").expect("string write");
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        write!(out, "{id}").expect("string write");
        for j in 0..ids.len() {
            write!(out, ",{}", fmt_f64(matrix.get(i, j))).expect("string write");
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_similarity(path: &Path) -> Result<(Vec<u64>, SimilarityMatrix)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "empty file".to_string()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("particle_id") {
        return Err(parse_error(path, 1, "bad header".to_string()));
    }
    let ids: Vec<u64> = cols
        .map(|s| parse_field(path, 1, "header id", s))
        .collect::<Result<_>>()?;
    let p = ids.len();
    let mut values = vec![0.0; p * p];
    let mut row_count = 0usize;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let row_id: u64 = parse_field(path, idx + 1, "particle_id", fields.next().unwrap())?;
        if row_count >= p || row_id != ids[row_count] {
            return Err(parse_error(
                path,
                idx + 1,
                format!("unexpected row id {row_id}"),
            ));
        }
        for j in 0..p {
            let s = fields.next().ok_or_else(|| {
                parse_error(path, idx + 1, format!("missing column {j}"))
            })?;
            values[row_count * p + j] = parse_field(path, idx + 1, "similarity", s)?;
        }
        row_count += 1;
    }
    if row_count != p {
        return Err(parse_error(path, 1, "missing rows".to_string()));
    }
    Ok((ids, SimilarityMatrix::from_rows(p, values)?))
}

// ---------------------------------------------------------------------------
// histogram.csv
// ---------------------------------------------------------------------------

pub const HISTOGRAM_HEADER: &str = "bin_lo_m,bin_hi_m,classic_count,weighted_count";

pub fn write_histogram(
    path: &Path,
    classic: &[HistogramBin],
    weighted: &[HistogramBin],
) -> Result<()> {
    assert_eq!(classic.len(), weighted.len(), "histograms share bins");
    let mut out = String::new();
    out.push_str(HISTOGRAM_HEADER);
    out.push('\n');
    for (c, w) in classic.iter().zip(weighted) {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(c.lo),
            fmt_f64(c.hi),
            c.count,
            w.count
        )
        .expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_histogram(path: &Path) -> Result<Vec<(f64, f64, usize, usize)>> {
    let rows = read_csv(path, HISTOGRAM_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok((
                parse_field(path, line, "bin_lo_m", &f[0])?,
                parse_field(path, line, "bin_hi_m", &f[1])?,
                parse_field(path, line, "classic_count", &f[2])?,
                parse_field(path, line, "weighted_count", &f[3])?,
            ))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// sweep.csv and snr_model.csv
// ---------------------------------------------------------------------------

pub const SWEEP_HEADER: &str = "n_w,mean_rel_diff,sd_rel_diff,gain";

pub fn write_sweep(path: &Path, result: &crate::calibration::SweepResult) -> Result<()> {
    let mut out = String::new();
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for (((&g, &m), &s), &gain) in result
        .grid
        .iter()
        .zip(&result.mean_rel_diff)
        .zip(&result.sd_rel_diff)
        .zip(&result.gain)
    {
        writeln!(
            out,
            "{},{},{},{}",
            fmt_n_w(g),
            fmt_f64(m),
            fmt_f64(s),
            fmt_f64(gain)
        )
        .expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_sweep(path: &Path) -> Result<Vec<(f64, f64, f64, f64)>> {
    let rows = read_csv(path, SWEEP_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            let n_w = crate::config::parse_n_w(f[0].trim())
                .map_err(|e| parse_error(path, line, e.to_string()))?;
            Ok((
                n_w,
                parse_field(path, line, "mean_rel_diff", &f[1])?,
                parse_field(path, line, "sd_rel_diff", &f[2])?,
                parse_field(path, line, "gain", &f[3])?,
            ))
        })
        .collect()
}

pub const SNR_MODEL_HEADER: &str = "snr,inv_snr,n_w_opt,fit_slope,fit_intercept,fit_r2";

pub fn write_snr_model(path: &Path, points: &[(f64, f64)], model: &SnrModel) -> Result<()> {
    let mut out = String::new();
    out.push_str(SNR_MODEL_HEADER);
    out.push('\n');
    for &(snr, n_w_opt) in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(snr),
            fmt_f64(1.0 / snr),
            fmt_f64(n_w_opt),
            fmt_f64(model.slope),
            fmt_f64(model.intercept),
            fmt_f64(model.r_squared)
        )
        .expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_snr_model(path: &Path) -> Result<(Vec<(f64, f64)>, SnrModel)> {
    let rows = read_csv(path, SNR_MODEL_HEADER)?;
    let mut points = Vec::new();
    let mut model = None;
    for (line, f) in rows {
        points.push((
            parse_field(path, line, "snr", &f[0])?,
            parse_field(path, line, "n_w_opt", &f[2])?,
        ));
        model = Some(SnrModel {
            slope: parse_field(path, line, "fit_slope", &f[3])?,
            intercept: parse_field(path, line, "fit_intercept", &f[4])?,
            r_squared: parse_field(path, line, "fit_r2", &f[5])?,
            n_points: 0,
        });
    }
    let mut model = model.ok_or_else(|| parse_error(path, 1, "no rows".to_string()))?;
    model.n_points = points.len();
    Ok((points, model))
}

// ---------------------------------------------------------------------------
// refindex.csv
// ---------------------------------------------------------------------------

pub const REFINDEX_HEADER: &str =
    "particle_id,method,diameter_m,n,k,integral_re_m3,integral_im_m3,volume_m3";

/// One row of `refindex.csv`; `estimate` is `None` for warning rows where
/// the particle had no usable size.
#[derive(Debug, Clone, PartialEq)]
pub struct RefIndexRow {
    pub particle_id: u64,
    pub method: String,
    pub diameter_m: Option<f64>,
    pub estimate: Option<RefractiveIndexEstimate>,
}

pub fn write_refindex(path: &Path, rows: &[RefIndexRow]) -> Result<()> {
    let mut out = String::new();
    out.push_str(REFINDEX_HEADER);
    out.push('\n');
    for r in rows {
        match &r.estimate {
            Some(e) => writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.particle_id,
                r.method,
                opt_f64(r.diameter_m),
                fmt_f64(e.n),
                fmt_f64(e.k),
                fmt_f64(e.integral_re),
                fmt_f64(e.integral_im),
                fmt_f64(e.volume_used)
            )
            .expect("string write"),
            None => writeln!(out, "{},{},,,,,,", r.particle_id, r.method).expect("string write"),
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_refindex(path: &Path) -> Result<Vec<RefIndexRow>> {
    let rows = read_csv(path, REFINDEX_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            let particle_id: u64 = parse_field(path, line, "particle_id", &f[0])?;
            let diameter_m = parse_opt_f64(path, line, "diameter_m", &f[2])?;
            let estimate = match parse_opt_f64(path, line, "n", &f[3])? {
                None => None,
                Some(n) => Some(RefractiveIndexEstimate {
                    particle_id,
                    n,
                    k: parse_field(path, line, "k", &f[4])?,
                    integral_re: parse_field(path, line, "integral_re_m3", &f[5])?,
                    integral_im: parse_field(path, line, "integral_im_m3", &f[6])?,
                    volume_used: parse_field(path, line, "volume_m3", &f[7])?,
                }),
            };
            Ok(RefIndexRow {
                particle_id,
                method: f[1].clone(),
                diameter_m,
                estimate,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// noise.csv (output of noise estimation)
// ---------------------------------------------------------------------------

pub const NOISE_HEADER: &str = "particle_id,epsilon_m2,snr,n_frames";

pub fn write_noise(path: &Path, rows: &[(u64, f64, f64, usize)]) -> Result<()> {
    let mut out = String::new();
    out.push_str(NOISE_HEADER);
    out.push('\n');
    for &(id, eps, snr, n) in rows {
        writeln!(out, "{},{},{},{}", id, fmt_f64(eps), fmt_f64(snr), n).expect("string write");
    }
    atomic_write(path, out.as_bytes())
}

/// Resolve a path inside an output directory.
pub fn artifact_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
