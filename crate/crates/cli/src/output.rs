//! File writers. Everything is rendered in memory first and written only
//! once a command has succeeded, so a failure never leaves partial output.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use qfpat_core::{AngularField, Mesh, OrdinateSet, ScalarField};

/// Pending output files, keyed by path relative to the output directory.
#[derive(Default)]
pub struct Bundle {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Bundle {
    pub fn add(&mut self, rel: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (rel, bytes) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }
}

/// `cell,x,y,<name_0>,...`: one row per cell, centroid coordinates, one
/// column per field. `f64` values use the shortest round-trip form.
pub fn cell_table(mesh: &Mesh, columns: &[(&str, &ScalarField)]) -> String {
    let mut s = String::from("cell,x,y");
    for (name, _) in columns {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (c, p) in mesh.cell_centroids().iter().enumerate() {
        let _ = write!(s, "{c},{},{}", p[0], p[1]);
        for (_, f) in columns {
            let _ = write!(s, ",{}", f.values()[c]);
        }
        s.push('\n');
    }
    s
}

/// `cell,ordinate,theta,value`, cell-major.
pub fn angular_table(ords: &OrdinateSet, u: &AngularField) -> String {
    let mut s = String::from("cell,ordinate,theta,value\n");
    for c in 0..u.n_cells() {
        for k in 0..u.n_ords() {
            let v = ords.direction(k);
            let _ = writeln!(s, "{c},{k},{},{}", v[1].atan2(v[0]), u.get(c, k));
        }
    }
    s
}

pub fn json(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}
