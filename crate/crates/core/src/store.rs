//! On-disk formats: per-server storage files, source manifests and the
//! deployment catalog, plus byte ingestion.
//!
//! A deployment directory looks like
//!
//! ```text
//! catalog.json
//! sources/file-{i}.json
//! storage/block-{b}/server-{t}.json
//! ```
//!
//! Each block is an independent system instance holding one `lambda x K`
//! source block of every file. Random deployments have a single block.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gf::FieldElement;
use crate::scheme::{encode_system, ParamsHeader, SchemeError, ServerStorage, SourceFile, SystemParams};

pub const STORAGE_FORMAT: &str = "pir-mds-storage/1";
pub const SOURCE_FORMAT: &str = "pir-mds-source/1";
pub const CATALOG_FORMAT: &str = "pir-mds-catalog/1";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error("byte ingestion needs p >= 256, got p={0}")]
    FieldTooSmall(u64),
}

/// JSON form of [`ServerStorage`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageFile {
    pub format: String,
    pub params: ParamsHeader,
    pub server_index: usize,
    pub fragments: Vec<Vec<u64>>,
}

impl StorageFile {
    pub fn new(params: &SystemParams, storage: &ServerStorage) -> Self {
        Self {
            format: STORAGE_FORMAT.into(),
            params: params.header(),
            server_index: storage.server_index(),
            fragments: storage
                .fragments()
                .iter()
                .map(|f| f.iter().map(|e| e.value()).collect())
                .collect(),
        }
    }

    pub fn into_storage(self) -> Result<(SystemParams, ServerStorage), SchemeError> {
        if self.format != STORAGE_FORMAT {
            return Err(SchemeError::Params(format!("unsupported storage format {:?}", self.format)));
        }
        let params = self.params.validate()?;
        let fragments = to_elements(&params, self.fragments)?;
        let storage = ServerStorage::new(&params, self.server_index, fragments)?;
        Ok((params, storage))
    }
}

/// JSON form of one file's source blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub format: String,
    pub params: ParamsHeader,
    pub file_index: usize,
    /// Length of the ingested byte string, absent for random contents.
    pub byte_len: Option<u64>,
    /// `blocks[b][j]` is row `j` (`K` symbols) of block `b`.
    pub blocks: Vec<Vec<Vec<u64>>>,
}

impl SourceManifest {
    pub fn source_blocks(&self) -> Result<Vec<SourceFile>, SchemeError> {
        let params = self.params.validate()?;
        self.blocks
            .iter()
            .map(|rows| SourceFile::new(&params, to_elements(&params, rows.clone())?))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub file_index: usize,
    pub name: Option<String>,
    pub byte_len: Option<u64>,
}

/// Public description of a deployment. Holds nothing a server could use to
/// learn which file a user wants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub format: String,
    pub params: ParamsHeader,
    pub blocks: usize,
    pub files: Vec<CatalogEntry>,
}

fn to_elements(params: &SystemParams, rows: Vec<Vec<u64>>) -> Result<Vec<Vec<FieldElement>>, SchemeError> {
    let field = params.field();
    rows.into_iter()
        .map(|r| r.into_iter().map(|v| field.try_elem(v).map_err(SchemeError::from)).collect())
        .collect()
}

/// All content of a system before it is split across servers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Deployment {
    pub params: SystemParams,
    /// `files[i][b]`: block `b` of file `i`. Every file has the same block count.
    pub files: Vec<Vec<SourceFile>>,
    pub entries: Vec<CatalogEntry>,
}

impl Deployment {
    /// `M` single-block files with uniform random symbols.
    pub fn random<R: Rng + ?Sized>(params: SystemParams, rng: &mut R) -> Self {
        let files = (0..params.m_files()).map(|_| vec![SourceFile::random(&params, rng)]).collect();
        let entries = (0..params.m_files())
            .map(|i| CatalogEntry {
                file_index: i,
                name: None,
                byte_len: None,
            })
            .collect();
        Self { params, files, entries }
    }

    /// One file per byte string. Each byte is one field element; files are cut
    /// into `lambda x K` blocks and zero-padded to a common block count.
    pub fn from_bytes(params: SystemParams, inputs: &[(Option<String>, Vec<u8>)]) -> Result<Self, StoreError> {
        if params.prime() < 256 {
            return Err(StoreError::FieldTooSmall(params.prime()));
        }
        if inputs.len() != params.m_files() {
            return Err(SchemeError::Dimension(format!(
                "expected {} input files, got {}",
                params.m_files(),
                inputs.len()
            ))
            .into());
        }
        let block_len = params.file_len();
        let blocks = inputs
            .iter()
            .map(|(_, b)| b.len().div_ceil(block_len))
            .max()
            .unwrap_or(0)
            .max(1);
        let field = params.field();
        let files = inputs
            .iter()
            .map(|(_, bytes)| {
                (0..blocks)
                    .map(|b| {
                        let rows = (0..params.lambda())
                            .map(|j| {
                                (0..params.k_mds())
                                    .map(|c| {
                                        let at = b * block_len + j * params.k_mds() + c;
                                        field.elem(bytes.get(at).copied().unwrap_or(0) as u64)
                                    })
                                    .collect()
                            })
                            .collect();
                        SourceFile::new(&params, rows)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let entries = inputs
            .iter()
            .enumerate()
            .map(|(i, (name, bytes))| CatalogEntry {
                file_index: i,
                name: name.clone(),
                byte_len: Some(bytes.len() as u64),
            })
            .collect();
        Ok(Self { params, files, entries })
    }

    pub fn blocks(&self) -> usize {
        self.files.first().map_or(0, Vec::len)
    }

    /// Source files of block `b`, one per file index.
    pub fn block_sources(&self, b: usize) -> Vec<SourceFile> {
        self.files.iter().map(|f| f[b].clone()).collect()
    }

    pub fn storages(&self, b: usize) -> Result<Vec<ServerStorage>, SchemeError> {
        Ok(encode_system(&self.params, &self.block_sources(b))?.1)
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            format: CATALOG_FORMAT.into(),
            params: self.params.header(),
            blocks: self.blocks(),
            files: self.entries.clone(),
        }
    }

    /// Writes the catalog, `M` source manifests and `N` storage files per block.
    pub fn write(&self, out_dir: &Path) -> Result<(), StoreError> {
        write_json(&out_dir.join("catalog.json"), &self.catalog())?;
        for (i, blocks) in self.files.iter().enumerate() {
            let manifest = SourceManifest {
                format: SOURCE_FORMAT.into(),
                params: self.params.header(),
                file_index: i,
                byte_len: self.entries[i].byte_len,
                blocks: blocks
                    .iter()
                    .map(|src| src.rows().iter().map(|r| r.iter().map(|e| e.value()).collect()).collect())
                    .collect(),
            };
            write_json(&source_path(out_dir, i), &manifest)?;
        }
        for b in 0..self.blocks() {
            for storage in self.storages(b)? {
                let path = storage_path(out_dir, b, storage.server_index());
                write_json(&path, &StorageFile::new(&self.params, &storage))?;
            }
        }
        Ok(())
    }
}

pub fn storage_path(dir: &Path, block: usize, server: usize) -> PathBuf {
    dir.join("storage").join(format!("block-{block}")).join(format!("server-{server}.json"))
}

pub fn source_path(dir: &Path, file: usize) -> PathBuf {
    dir.join("sources").join(format!("file-{file}.json"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let io_err = |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let text = serde_json::to_string(value).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_storage(path: &Path) -> Result<(SystemParams, ServerStorage), StoreError> {
    let file: StorageFile = read_json(path)?;
    file.into_storage().map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_catalog(dir: &Path) -> Result<Catalog, StoreError> {
    let path = dir.join("catalog.json");
    let catalog: Catalog = read_json(&path)?;
    if catalog.format != CATALOG_FORMAT {
        return Err(StoreError::Format {
            path,
            msg: format!("unsupported catalog format {:?}", catalog.format),
        });
    }
    Ok(catalog)
}

/// Loads the `N` storages of one block, checking they agree on parameters.
pub fn load_block(dir: &Path, block: usize, params: &SystemParams) -> Result<Vec<ServerStorage>, StoreError> {
    (0..params.n_servers())
        .map(|t| {
            let path = storage_path(dir, block, t);
            let (p, storage) = read_storage(&path)?;
            if p != *params || storage.server_index() != t {
                return Err(StoreError::Format {
                    path,
                    msg: format!("expected server {t} of {params}, found server {} of {p}", storage.server_index()),
                });
            }
            Ok(storage)
        })
        .collect()
}

/// Concatenates decoded blocks back into bytes, truncated to `byte_len`.
pub fn blocks_to_bytes(blocks: &[SourceFile], byte_len: u64) -> Result<Vec<u8>, SchemeError> {
    let mut out = Vec::new();
    for v in blocks.iter().flat_map(SourceFile::symbols) {
        let byte = u8::try_from(v.value())
            .map_err(|_| SchemeError::Params(format!("symbol {} is not a byte", v.value())))?;
        out.push(byte);
    }
    if (out.len() as u64) < byte_len {
        return Err(SchemeError::Dimension(format!(
            "decoded {} bytes, catalog says {byte_len}",
            out.len()
        )));
    }
    out.truncate(byte_len as usize);
    Ok(out)
}
