//! On-disk format for value functions.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "HJRS"
//! version u32      currently 1
//! dims    u32      dimension count
//! per dim          min f64, max f64, node_count u32, periodic u8
//! frames  u32      frame count
//! per frame        time f64, node_count-product f64 values, row-major
//! ```
//!
//! A static value function is stored as a single frame with time 0. Writes go
//! through a temp file in the same directory and a rename, so a failure mid
//! write never leaves a readable partial cache entry.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{DimSpec, Grid, TimeIndexedValueFunction, ValueFunction};

const MAGIC: &[u8; 4] = b"HJRS";
const VERSION: u32 = 1;

fn format_err(path: &Path, what: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        what: what.into(),
    }
}

/// Serialize a frame sequence to `path`.
pub fn write_time_indexed(path: &Path, tivf: &TimeIndexedValueFunction) -> Result<()> {
    let tmp = temp_sibling(path)?;
    let result = (|| -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let grid = tivf.grid();
        w.write_all(&(grid.dim_count() as u32).to_le_bytes())?;
        for d in grid.dims() {
            w.write_all(&d.min.to_le_bytes())?;
            w.write_all(&d.max.to_le_bytes())?;
            w.write_all(&(d.nodes as u32).to_le_bytes())?;
            w.write_all(&[d.periodic as u8])?;
        }
        w.write_all(&(tivf.len() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(grid.len() * 8);
        for (t, frame) in tivf.times().iter().zip(tivf.frames()) {
            w.write_all(&t.to_le_bytes())?;
            buf.clear();
            for v in frame.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Serialize a static value function as a single frame at time 0.
pub fn write_value_function(path: &Path, vf: &ValueFunction) -> Result<()> {
    write_time_indexed(path, &TimeIndexedValueFunction::from_static(vf.clone()))
}

/// Read a frame sequence from `path`.
pub fn read_time_indexed(path: &Path) -> Result<TimeIndexedValueFunction> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_all(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic, not a value-function cache"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let dim_count = read_u32(&mut r, path)? as usize;
    if dim_count == 0 || dim_count > 16 {
        return Err(format_err(
            path,
            format!("implausible dim count {dim_count}"),
        ));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        let min = read_f64(&mut r, path)?;
        let max = read_f64(&mut r, path)?;
        let nodes = read_u32(&mut r, path)? as usize;
        let mut flag = [0u8; 1];
        read_all(&mut r, &mut flag, path)?;
        dims.push(DimSpec {
            min,
            max,
            nodes,
            periodic: flag[0] != 0,
        });
    }
    let grid = Grid::new(dims).map_err(|e| format_err(path, e.to_string()))?;
    let frame_count = read_u32(&mut r, path)? as usize;
    if frame_count == 0 {
        return Err(format_err(path, "zero frames"));
    }
    let mut times = Vec::with_capacity(frame_count);
    let mut frames = Vec::with_capacity(frame_count);
    let mut buf = vec![0u8; grid.len() * 8];
    for _ in 0..frame_count {
        times.push(read_f64(&mut r, path)?);
        read_all(&mut r, &mut buf, path)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(
            ValueFunction::new(grid.clone(), data).map_err(|e| format_err(path, e.to_string()))?,
        );
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err(path, "trailing bytes after last frame"));
    }
    TimeIndexedValueFunction::new(times, frames).map_err(|e| format_err(path, e.to_string()))
}

/// Read a cache entry that must hold exactly one static frame.
pub fn read_value_function(path: &Path) -> Result<ValueFunction> {
    let tivf = read_time_indexed(path)?;
    if tivf.len() != 1 {
        return Err(format_err(
            path,
            format!("expected a single static frame, found {}", tivf.len()),
        ));
    }
    Ok(tivf.frames()[0].clone())
}

/// Write solver metadata next to a cache entry as `key=value` lines.
pub fn write_sidecar(cache_path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    fs::write(sidecar_path(cache_path), text)?;
    Ok(())
}

/// Read a sidecar written by [`write_sidecar`]. Missing file is an error.
pub fn read_sidecar(cache_path: &Path) -> Result<Vec<(String, String)>> {
    let path = sidecar_path(cache_path);
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                return Err(format_err(&path, format!("line {}: missing '='", ln + 1)));
            }
        }
    }
    Ok(out)
}

pub fn sidecar_path(cache_path: &Path) -> std::path::PathBuf {
    let mut s = cache_path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

fn temp_sibling(path: &Path) -> Result<std::path::PathBuf> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::argument("cache path has no file name"))?;
    let mut tmp = name.to_os_string();
    tmp.push(format!(".tmp.{}", std::process::id()));
    Ok(dir.join(tmp))
}

fn read_all(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(path, "truncated file"))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_all(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_all(r, &mut b, path)?;
    Ok(f64::from_le_bytes(b))
}

#[allow(unused)]
fn grid_of(vf: &ValueFunction) -> &Arc<Grid> {
    vf.grid()
}
