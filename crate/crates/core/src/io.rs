//! File formats: JSON documents, CSV tables, PLY point clouds, buffer dumps
//! and the binary visibility-matrix file. Every finished output is written to
//! a temporary file in the target directory and renamed into place.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::diffvis::ScoreBundle;
use crate::error::{Error, Result};
use crate::eval::{json_hash, AblationRow, CompareRow, EvalReport};
use crate::ipopt::{build_rows, column_map, CandidateGrid, ColumnKey, VisibilityMatrix};
use crate::raster::{fragment_code, DepthBuffer, FragmentBuffer, PointCloud};
use crate::scene::{CanonicalPose, RailPose, Scenario};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        // Temp files are created owner-only; outputs should be ordinary files.
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let s: Scenario = read_json(path)?;
    s.validate()?;
    Ok(s)
}

/// Sensor poses given on rails, directly in the world, or both.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(default)]
    pub rail_poses: Vec<RailPose>,
    #[serde(default)]
    pub canonical_poses: Vec<CanonicalPose>,
}

impl PoseFile {
    /// Rail poses first, then the world poses.
    pub fn resolve(&self, scenario: &Scenario) -> Result<Vec<CanonicalPose>> {
        let mut poses = scenario.canonical_all(&self.rail_poses)?;
        poses.extend_from_slice(&self.canonical_poses);
        Ok(poses)
    }
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

pub fn report_csv(report: &EvalReport) -> String {
    csv(
        "object_id,frame_id,visibility",
        report
            .objects
            .iter()
            .map(|o| format!("{},{},{}", o.object_id, o.frame_id, o.visibility)),
    )
}

pub fn ecdf_csv(report: &EvalReport) -> String {
    csv(
        "visibility,cum_fraction",
        report.ecdf.iter().map(|(v, f)| format!("{v},{f}")),
    )
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    csv(
        "method,N,coverage_pct,min_visibility",
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.method, r.n, r.coverage_pct, r.min_visibility)),
    )
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    csv(
        "seed,occlusion_aware,frustum_only",
        rows.iter()
            .map(|r| format!("{},{},{}", r.seed, r.occlusion_aware, r.frustum_only)),
    )
}

/// Combined score of every sampled point.
pub fn scores_csv(bundle: &ScoreBundle) -> String {
    csv(
        "frame_id,x,y,z,psi",
        bundle.frames.iter().flat_map(|f| {
            f.points.iter().zip(&f.combined).map(move |(p, s)| {
                format!("{},{},{},{},{}", f.frame_id, p.x, p.y, p.z, s)
            })
        }),
    )
}

/// ASCII PLY with the fragment code and sensor index of every point.
pub fn cloud_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty int object_id\nproperty int sensor_id\nend_header\n",
        cloud.points.len()
    );
    for p in &cloud.points {
        let _ = writeln!(
            out,
            "{} {} {} {} {}",
            p.position.x as f32,
            p.position.y as f32,
            p.position.z as f32,
            fragment_code(Some(p.source)),
            p.sensor
        );
    }
    out
}

/// JSON header line, then row-major little-endian `f32` depths. Background
/// is `+inf`.
pub fn depth_dump(db: &DepthBuffer) -> Vec<u8> {
    let mut out = format!(
        "{{\"kind\":\"depth\",\"width\":{},\"height\":{},\"dtype\":\"f32le\",\"background\":\"inf\"}}\n",
        db.width, db.height
    )
    .into_bytes();
    for d in &db.depth {
        out.extend_from_slice(&(*d as f32).to_le_bytes());
    }
    out
}

/// JSON header line, then row-major little-endian `i32` fragment codes:
/// object id, `-1` background, `-2` ground, `-3 - k` static box `k`.
pub fn fragment_dump(fb: &FragmentBuffer) -> Vec<u8> {
    let mut out = format!(
        "{{\"kind\":\"fragment\",\"width\":{},\"height\":{},\"dtype\":\"i32le\",\"background\":-1}}\n",
        fb.width, fb.height
    )
    .into_bytes();
    for id in &fb.ids {
        out.extend_from_slice(&fragment_code(*id).to_le_bytes());
    }
    out
}

/// First line of a visibility-matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisHeader {
    pub format: String,
    pub grid: CandidateGrid,
    pub columns: Vec<ColumnKey>,
    pub width: u32,
    pub height: u32,
    pub scenario_hash: String,
}

const VIS_FORMAT: &str = "vismatrix-v1";

impl VisHeader {
    pub fn new(grid: &CandidateGrid, scenario: &Scenario, intr: &Intrinsics) -> Self {
        Self {
            format: VIS_FORMAT.into(),
            grid: grid.clone(),
            columns: column_map(scenario),
            width: intr.width,
            height: intr.height,
            scenario_hash: json_hash(&(scenario, intr)),
        }
    }

    fn line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("serializable");
        s.push('\n');
        s
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Header plus the number of complete rows stored after it.
fn read_header(path: &Path) -> Result<(VisHeader, u64, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let total = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    if !line.ends_with('\n') {
        return Err(format_err(path, "missing header line"));
    }
    let header: VisHeader = serde_json::from_str(line.trim_end()).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    if header.format != VIS_FORMAT {
        return Err(format_err(path, format!("unknown format {:?}", header.format)));
    }
    let offset = line.len() as u64;
    let row_bytes = 4 * header.columns.len() as u64;
    let rows = if row_bytes == 0 {
        header.grid.len()
    } else {
        ((total - offset) / row_bytes) as usize
    };
    Ok((header, offset, rows))
}

pub fn write_vismatrix(path: &Path, header: &VisHeader, v: &VisibilityMatrix) -> Result<()> {
    let mut bytes = header.line().into_bytes();
    for c in &v.counts {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_vismatrix(path: &Path) -> Result<(VisHeader, VisibilityMatrix)> {
    let (header, offset, rows) = read_header(path)?;
    if rows != header.grid.len() {
        return Err(format_err(
            path,
            format!("expected {} rows, found {rows}", header.grid.len()),
        ));
    }
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    file.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let expected = 4 * rows * header.columns.len();
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("expected {expected} count bytes, found {}", bytes.len()),
        ));
    }
    let counts = bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let v = VisibilityMatrix {
        rows,
        columns: header.columns.clone(),
        counts,
    };
    Ok((header, v))
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Builds the matrix into `<path>.partial`, appending each row as it is
/// finished, and renames the file once complete. An existing partial file
/// with the same header is resumed from its last complete row.
pub fn build_vismatrix_checkpointed(
    path: &Path,
    grid: &CandidateGrid,
    scenario: &Scenario,
    intr: &Intrinsics,
) -> Result<VisibilityMatrix> {
    let header = VisHeader::new(grid, scenario, intr);
    let partial = partial_path(path);
    let mut start = 0;
    if partial.exists() {
        match read_header(&partial) {
            Ok((h, offset, rows)) if h == header => {
                let keep = offset + 4 * (rows * header.columns.len()) as u64;
                let f = OpenOptions::new()
                    .write(true)
                    .open(&partial)
                    .map_err(|e| Error::io(&partial, e))?;
                f.set_len(keep).map_err(|e| Error::io(&partial, e))?;
                start = rows.min(grid.len());
            }
            _ => {}
        }
    }
    if start == 0 {
        if let Some(dir) = partial.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&partial, header.line()).map_err(|e| Error::io(&partial, e))?;
    }
    let mut file = OpenOptions::new()
        .append(true)
        .open(&partial)
        .map_err(|e| Error::io(&partial, e))?;
    build_rows(grid, scenario, intr, start, |_, row| {
        let bytes: Vec<u8> = row.iter().flat_map(|c| c.to_le_bytes()).collect();
        file.write_all(&bytes).map_err(|e| Error::io(&partial, e))?;
        file.flush().map_err(|e| Error::io(&partial, e))
    })?;
    file.sync_all().map_err(|e| Error::io(&partial, e))?;
    drop(file);
    fs::rename(&partial, path).map_err(|e| Error::io(path, e))?;
    let (_, v) = read_vismatrix(path)?;
    Ok(v)
}
