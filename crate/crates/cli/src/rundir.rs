// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output directory handling and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use qkcircuit::bundle::sha256_hex;
use qkcircuit::{Error, Result};
use serde::Serialize;

pub const RUN_MANIFEST: &str = "run.json";

pub struct RunDir {
    root: PathBuf,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a [String],
    seed: u64,
    outputs: BTreeMap<String, String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl RunDir {
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        let nonempty = match fs::read_dir(root) {
            Ok(mut it) => it.next().is_some(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
            Err(e) => return Err(io(root)(e)),
        };
        if nonempty && !force {
            return Err(Error::DirectoryNotEmpty(root.to_path_buf()));
        }
        fs::create_dir_all(root).map_err(io(root))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        fs::write(&p, contents).map_err(io(&p))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        self.write(name, out)
    }

    fn collect(&self, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(io(dir))?
            .collect::<std::result::Result<_, _>>()
            .map_err(io(dir))?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                self.collect(&p, out)?;
            } else {
                let rel = p.strip_prefix(&self.root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
                if rel != RUN_MANIFEST {
                    out.insert(rel, sha256_hex(&fs::read(&p).map_err(io(&p))?));
                }
            }
        }
        Ok(())
    }

    /// Hashes every output file and writes `run.json`.
    pub fn finish(&self, command: &str, args: &[String], seed: u64) -> Result<()> {
        let mut outputs = BTreeMap::new();
        self.collect(&self.root, &mut outputs)?;
        self.write_json(
            RUN_MANIFEST,
            &Manifest {
                tool: "qkcircuit",
                version: env!("CARGO_PKG_VERSION"),
                command,
                args,
                seed,
                outputs,
            },
        )?;
        Ok(())
    }
}
