//! Encoder checkpoints: a binary file of named matrices plus two text
//! sidecars.
//!
//! Binary layout (little-endian): magic `TENC`, u32 version, u32 section
//! count, then per section u32 name length, UTF-8 name, u64 rows, u64 cols
//! and row-major f64 data. `<path>.config` holds the encoder config as
//! `key=value` lines; `<path>.entities` lists entity names one per line when
//! a linker is present.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{decays, Encoder, EncoderConfig, LinkerState};
use crate::error::{Error, Result};
use crate::optim::ParamStore;

const MAGIC: &[u8; 4] = b"TENC";
const VERSION: u32 = 1;
const ENTITY_SECTION: &str = "linker.entity_table";

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn config_path(path: &Path) -> PathBuf {
    with_suffix(path, ".config")
}

pub fn entities_path(path: &Path) -> PathBuf {
    with_suffix(path, ".entities")
}

fn put_section(buf: &mut Vec<u8>, name: &str, m: &Array2<f64>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for x in m.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_encoder(encoder: &Encoder, path: &Path) -> Result<()> {
    let sections = encoder.params.len() + usize::from(encoder.linker.is_some());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sections as u32).to_le_bytes());
    for (name, m) in encoder.params.iter() {
        put_section(&mut buf, name, m);
    }
    if let Some(l) = &encoder.linker {
        put_section(&mut buf, ENTITY_SECTION, &l.entity_table);
    }
    fs::write(path, buf)?;

    let mut cfg = fs::File::create(config_path(path))?;
    for (k, v) in encoder.config.to_pairs() {
        writeln!(cfg, "{k}={v}")?;
    }
    if let Some(l) = &encoder.linker {
        let mut f = fs::File::create(entities_path(path))?;
        for n in &l.entity_names {
            writeln!(f, "{n}")?;
        }
    }
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptData("encoder checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()) as usize)
    }
}

pub fn read_encoder(path: &Path) -> Result<Encoder> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::CorruptData(format!(
            "{} is not an encoder checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CorruptData(format!(
            "unsupported encoder checkpoint version {version}"
        )));
    }
    let count = r.u32()?;
    let mut params = ParamStore::new();
    let mut entity_table = None;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::CorruptData("section name is not UTF-8".into()))?
            .to_string();
        let (rows, cols) = (r.u64()?, r.u64()?);
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::CorruptData("section size overflows".into()))?;
        let data: Vec<f64> = r
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::CorruptData(e.to_string()))?;
        if name == ENTITY_SECTION {
            entity_table = Some(m);
        } else {
            let decay = decays(&name);
            params.add(name, m, decay);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptData(
            "trailing bytes after last section".into(),
        ));
    }

    let mut config = EncoderConfig::default();
    let text = fs::read_to_string(config_path(path))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            what: "encoder config",
            line: i + 1,
            detail: "expected key=value".into(),
        })?;
        config.apply(k.trim(), v)?;
    }
    let linker = match entity_table {
        Some(t) => {
            let names = fs::read_to_string(entities_path(path))?
                .lines()
                .map(str::to_string)
                .collect();
            Some(LinkerState::new(t, names)?)
        }
        None => None,
    };
    Encoder::from_params(config, params, linker)
}
