// SPDX-License-Identifier: Apache-2.0

//! Output directory handling. JSON documents carry the provenance block;
//! CSV tables stay plain for plotting and sit next to `provenance.json`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{Format, Provenance};
use crate::fail::Failure;

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub struct Out {
    pub dir: PathBuf,
    pub format: Format,
    pub provenance: Provenance,
}

impl Out {
    pub fn create(dir: PathBuf, format: Format, provenance: Provenance) -> Result<Self, Failure> {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        let out = Out {
            dir,
            format,
            provenance,
        };
        out.json_plain("provenance.json", &out.provenance)?;
        Ok(out)
    }

    /// Same format and provenance, writing under `dir/name`.
    pub fn sub(&self, name: &str) -> Result<Self, Failure> {
        let dir = self.dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
        Ok(Out {
            dir,
            format: self.format,
            provenance: self.provenance.clone(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(
        &self,
        name: &str,
        body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
    ) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Failure::io(&path, e))?;
        let mut w = BufWriter::new(file);
        body(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }

    /// Writes through a library writer, reporting failures against the file.
    pub fn write_with(&self, name: &str, body: impl FnOnce(File) -> g2kin::Result<()>) -> Result<PathBuf, Failure> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| Failure::io(&path, e))?;
        body(file).map_err(|e| Failure::at(&path, e))?;
        Ok(path)
    }

    fn json_plain<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, Failure> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }

    /// JSON object with the provenance block merged in; `body` must
    /// serialize as a map.
    pub fn json<T: Serialize>(&self, name: &str, body: &T) -> Result<PathBuf, Failure> {
        self.json_plain(
            name,
            &Stamped {
                provenance: &self.provenance,
                body,
            },
        )
    }

    pub fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, Failure> {
        self.write(name, |w| {
            writeln!(w, "{}", header.join(","))?;
            for row in rows {
                writeln!(w, "{}", row.join(","))?;
            }
            Ok(())
        })
    }

    /// `stem.json` or `stem.csv` by the chosen format.
    pub fn table<T: Serialize>(
        &self,
        stem: &str,
        body: &T,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<PathBuf, Failure> {
        match self.format {
            Format::Json => self.json(&format!("{stem}.json"), body),
            Format::Csv => self.csv(&format!("{stem}.csv"), header, rows),
        }
    }
}

/// CSV cell for an optional number: empty when absent.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// File stem used to name per-input outputs.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}
