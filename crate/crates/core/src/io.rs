//! Output files. Every file starts with the config hash; writes go through a
//! temporary file and a rename so a failed run leaves nothing half-written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Profile;

/// Column-oriented numeric table.
#[derive(Clone, Debug, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn column(mut self, name: &str, values: Vec<f64>) -> Self {
        self.headers.push(name.to_string());
        self.columns.push(values);
        self
    }

    /// `x` followed by one column per component of each profile.
    pub fn from_profiles(named: &[(&str, &Profile)]) -> Result<Self> {
        let Some((_, first)) = named.first() else {
            return Err(Error::InvalidParameter("no profiles".into()));
        };
        let mut t = Table::new().column("x", first.grid().xs());
        for (name, p) in named {
            if p.grid() != first.grid() {
                return Err(Error::GridMismatch);
            }
            for c in 0..p.ncomp() {
                let label = if p.ncomp() == 1 {
                    name.to_string()
                } else {
                    format!("{name}_{c}")
                };
                t = t.column(&label, p.component(c).to_vec());
            }
        }
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.columns.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn render(&self, hash: &str) -> Result<Vec<u8>> {
        let mut out = format!("# config_sha256 = {hash}\n").into_bytes();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for r in 0..self.rows() {
            let row: Vec<String> = self
                .columns
                .iter()
                .map(|c| c.get(r).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            w.write_record(&row)?;
        }
        out.extend(w.into_inner().map_err(|e| Error::Io(e.into_error()))?);
        Ok(out)
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    tmp.set_file_name(format!(".{name}.partial"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_table(path: &Path, hash: &str, table: &Table) -> Result<()> {
    atomic_write(path, &table.render(hash)?)
}

/// Reads a table written by [`write_table`]; returns the hash too.
pub fn read_table(path: &Path) -> Result<(String, Table)> {
    let text = fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let hash = first
        .strip_prefix("# config_sha256 = ")
        .ok_or_else(|| Error::Config(format!("{} has no hash line", path.display())))?
        .trim()
        .to_string();
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for rec in r.records() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            if !field.is_empty() {
                let v = field
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                columns[c].push(v);
            }
        }
    }
    Ok((hash, Table { headers, columns }))
}

/// Writes `value` as TOML with the hash as first key.
pub fn write_manifest<T: Serialize>(path: &Path, hash: &str, value: &T) -> Result<()> {
    let body = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    atomic_write(path, format!("config_sha256 = \"{hash}\"\n{body}").as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::dirichlet(1.0, 16).unwrap();
        let p = Profile::from_fn(g, 2, |c, x| x + c as f64 / 3.0);
        let t = Table::from_profiles(&[("phi", &p)]).unwrap();
        assert_eq!(t.headers, ["x", "phi_0", "phi_1"]);
        let path = dir.path().join("p.csv");
        write_table(&path, "abc", &t).unwrap();
        let (h, back) = read_table(&path).unwrap();
        assert_eq!(h, "abc");
        assert_eq!(back.columns, t.columns);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
