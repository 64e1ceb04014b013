use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_token_file, read_token_header, TokenHeader};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MOS_MIN: f64 = 0.0;
pub const MOS_MAX: f64 = 4.0;

/// One manifest row: `id,mos,path` with `path` relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mos: f64,
    pub path: String,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["id", "mos", "path"] {
            return Err(Error::Data(format!(
                "{}: manifest header must be id,mos,path, got {:?}",
                path.display(),
                headers
            )));
        }
        let records = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        let manifest = Self {
            path: path.to_path_buf(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self) -> Result<()> {
        let mut w = csv::Writer::from_path(&self.path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Data(format!("{}: manifest is empty", self.path.display())));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {:?}", r.id)));
            }
            if !(MOS_MIN..=MOS_MAX).contains(&r.mos) {
                return Err(Error::Data(format!(
                    "sample {:?} has mos {} outside [{MOS_MIN}, {MOS_MAX}]",
                    r.id, r.mos
                )));
            }
        }
        Ok(())
    }

    pub fn base_dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir().join(&record.path)
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Checks that every referenced file exists and all share one `(P, d)`.
    pub fn token_shape(&self) -> Result<TokenHeader> {
        let mut shape: Option<(TokenHeader, &str)> = None;
        for r in &self.records {
            let h = read_token_header(&self.resolve(r))?;
            match shape {
                None => shape = Some((h, &r.id)),
                Some((first, first_id)) if first != h => {
                    return Err(Error::config(format!(
                        "sample {:?} has P={} d={}, but {:?} has P={} d={}",
                        r.id, h.tokens, h.channels, first_id, first.tokens, first.channels
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(shape.expect("validated non-empty").0)
    }
}

/// Tokens and labels for every manifest record, loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub shape: TokenHeader,
    tokens: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        Self::from_manifest(Manifest::load(manifest_path)?)
    }

    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let shape = manifest.token_shape()?;
        let tokens = manifest
            .records
            .iter()
            .map(|r| read_token_file(&manifest.resolve(r)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            manifest,
            shape,
            tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.manifest.records[i].id
    }

    pub fn mos(&self, i: usize) -> f64 {
        self.manifest.records[i].mos
    }

    pub fn tokens(&self, i: usize) -> &Tensor<f32> {
        &self.tokens[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.manifest.records.iter().position(|r| r.id == id)
    }

    /// Stacks the selected samples into a `B x P x d` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.tokens[i]).collect();
        Tensor::stack(&items)
    }
}
