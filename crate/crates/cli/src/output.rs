//! Report files: JSON with 17 significant digits, CSV tables and the run
//! manifest.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::ser::{Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Pretty JSON whose floats carry 17 significant digits, enough to round-trip
/// any `f64` exactly.
pub struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Default for ExactFloats<'_> {
    fn default() -> Self {
        Self(PrettyFormatter::new())
    }
}

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats::default());
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Infra(format!("serializing report: {e}")))?;
    buf.push(b'\n');
    Ok(buf)
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::Infra(format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let bytes = to_json_bytes(value)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Output directory with a `fields/` subdirectory.
pub struct OutDir {
    pub root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("fields")).map_err(|e| io_err(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let p = self.path(name);
        fs::File::create(&p).map(BufWriter::new).map_err(|e| io_err(&p, e))
    }

    pub fn write_csv<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<(), CliError> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).map_err(|e| CliError::Infra(format!("{}: {e}", p.display())))?;
        for r in rows {
            w.serialize(r).map_err(|e| CliError::Infra(format!("{}: {e}", p.display())))?;
        }
        w.flush().map_err(|e| io_err(&p, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub config: &'a serde_json::Value,
}
