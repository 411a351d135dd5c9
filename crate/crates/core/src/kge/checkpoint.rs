//! Binary KGE checkpoint plus a TSV id/name sidecar.
//!
//! Layout (little-endian): magic `TKGE`, u32 version, u32 kind code,
//! u64 |E|, u64 |R|, u64 d, then the entity table and the relation table as
//! row-major f64. The sidecar `<path>.ids.tsv` lists
//! `entity|relation<TAB>id<TAB>name`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{KgeKind, KgeModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TKGE";
const VERSION: u32 = 1;

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.tsv");
    PathBuf::from(s)
}

pub fn write_checkpoint(model: &KgeModel, path: &Path) -> Result<()> {
    let mut buf =
        Vec::with_capacity(32 + 8 * (model.entity_table.len() + model.relation_table.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&model.kind.code().to_le_bytes());
    buf.extend_from_slice(&(model.num_entities() as u64).to_le_bytes());
    buf.extend_from_slice(&(model.num_relations() as u64).to_le_bytes());
    buf.extend_from_slice(&(model.dim() as u64).to_le_bytes());
    for x in model.entity_table.iter().chain(model.relation_table.iter()) {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;

    let mut f = std::io::BufWriter::new(fs::File::create(sidecar_path(path))?);
    for (i, n) in model.entity_names().iter().enumerate() {
        writeln!(f, "entity\t{i}\t{n}")?;
    }
    for (i, n) in model.relation_names().iter().enumerate() {
        writeln!(f, "relation\t{i}\t{n}")?;
    }
    f.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptData(msg.into())
}

pub fn read_checkpoint(path: &Path) -> Result<KgeModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 36 || &bytes[..4] != MAGIC {
        return Err(corrupt(format!(
            "{} is not a KGE checkpoint",
            path.display()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    if u32_at(4) != VERSION {
        return Err(corrupt(format!(
            "unsupported KGE checkpoint version {}",
            u32_at(4)
        )));
    }
    let kind = KgeKind::from_code(u32_at(8)).ok_or_else(|| corrupt("unknown model kind"))?;
    let (ne, nr, d) = (u64_at(12), u64_at(20), u64_at(28));
    let expected = 36 + 8 * (ne * d + nr * d);
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[36..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let entity = Array2::from_shape_vec((ne, d), floats[..ne * d].to_vec())
        .map_err(|e| corrupt(e.to_string()))?;
    let relation = Array2::from_shape_vec((nr, d), floats[ne * d..].to_vec())
        .map_err(|e| corrupt(e.to_string()))?;

    let mut ent_names = vec![String::new(); ne];
    let mut rel_names = vec![String::new(); nr];
    let side = sidecar_path(path);
    for (i, line) in BufReader::new(fs::File::open(&side)?).lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        let bad = || Error::Parse {
            what: "KGE id map",
            line: i + 1,
            detail: "expected kind<TAB>id<TAB>name".into(),
        };
        if parts.len() != 3 {
            return Err(bad());
        }
        let id: usize = parts[1].parse().map_err(|_| bad())?;
        let slot = match parts[0] {
            "entity" => ent_names.get_mut(id),
            "relation" => rel_names.get_mut(id),
            _ => None,
        }
        .ok_or_else(bad)?;
        *slot = parts[2].to_string();
    }
    KgeModel::from_tables(kind, entity, relation, ent_names, rel_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("tkge-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.bin");
        let names = |n: usize, p: &str| (0..n).map(|i| format!("{p} {i}")).collect::<Vec<_>>();
        let m =
            KgeModel::random_sized(KgeKind::SimplE, names(7, "C"), names(2, "rel"), 6, 9).unwrap();
        write_checkpoint(&m, &p).unwrap();
        let back = read_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        fs::write(&p, b"TKGE").unwrap();
        assert!(read_checkpoint(&p).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
