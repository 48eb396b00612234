//! On-disk job store: content-addressed blobs plus one manifest per job.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Fgn,
    Blur,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Fgn => "fgn",
            Backend::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fgn" => Some(Backend::Fgn),
            "blur" => Some(Backend::Blur),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobKey {
    /// Content hash of the decoded source image.
    pub source_hash: String,
    pub backend: Backend,
    pub grid_n: usize,
    pub fovea_radius: f64,
}

const JOB_NAMESPACE: Uuid = Uuid::from_u128(0x6c1f_2d2e_8a7b_4d0c_9e35_1b47_a6f0_c3d9);

impl JobKey {
    /// Deterministic id, so repeated uploads land on the same job.
    pub fn job_id(&self) -> Uuid {
        let name = format!(
            "{}|{}|{}|{:016x}",
            self.source_hash,
            self.backend.as_str(),
            self.grid_n,
            self.fovea_radius.to_bits()
        );
        Uuid::new_v5(&JOB_NAMESPACE, name.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Done,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub gx: usize,
    pub gy: usize,
    pub fx: f64,
    pub fy: f64,
    /// sha256 of the PNG bytes; also the blob name and the ETag.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub job_id: Uuid,
    pub key: JobKey,
    pub width: usize,
    pub height: usize,
    pub status: JobStatus,
    /// Row-major, `grid_n * grid_n` entries.
    pub tiles: Vec<Option<TileRecord>>,
    pub error: Option<String>,
}

impl JobManifest {
    pub fn new(key: JobKey, height: usize, width: usize) -> Self {
        let n = key.grid_n * key.grid_n;
        Self {
            job_id: key.job_id(),
            key,
            width,
            height,
            status: JobStatus::Pending,
            tiles: vec![None; n],
            error: None,
        }
    }

    pub fn completed(&self) -> usize {
        self.tiles.iter().filter(|t| t.is_some()).count()
    }

    pub fn total(&self) -> usize {
        self.tiles.len()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        for sub in ["tiles", "jobs", "sources"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn blob_path(&self, kind: &str, name: &str) -> PathBuf {
        self.root.join(kind).join(format!("{name}.png"))
    }

    pub fn tile_path(&self, hash: &str) -> PathBuf {
        self.blob_path("tiles", hash)
    }

    pub fn source_path(&self, source_hash: &str) -> PathBuf {
        self.blob_path("sources", source_hash)
    }

    fn manifest_path(&self, id: Uuid) -> PathBuf {
        self.root.join("jobs").join(format!("{id}.json"))
    }

    /// Writes through a temporary file so readers never see a partial file.
    fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }

    /// Stores a tile under its content hash and returns the hash.
    pub fn put_tile(&self, png: &[u8]) -> io::Result<String> {
        let hash = sha256_hex(png);
        let path = self.tile_path(&hash);
        if !path.exists() {
            Self::write_atomic(&path, png)?;
        }
        Ok(hash)
    }

    pub fn put_source(&self, source_hash: &str, png: &[u8]) -> io::Result<()> {
        let path = self.source_path(source_hash);
        if !path.exists() {
            Self::write_atomic(&path, png)?;
        }
        Ok(())
    }

    pub fn read_tile(&self, hash: &str) -> io::Result<Vec<u8>> {
        fs::read(self.tile_path(hash))
    }

    pub fn read_source(&self, source_hash: &str) -> io::Result<Vec<u8>> {
        fs::read(self.source_path(source_hash))
    }

    pub fn save_manifest(&self, m: &JobManifest) -> io::Result<()> {
        let json = serde_json::to_vec_pretty(m).map_err(io::Error::other)?;
        Self::write_atomic(&self.manifest_path(m.job_id), &json)
    }

    /// Every readable manifest; unparsable files are skipped with a warning.
    pub fn load_manifests(&self) -> io::Result<Vec<JobManifest>> {
        let mut out = Vec::new();
        let mut paths: Vec<_> = fs::read_dir(self.root.join("jobs"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            match fs::read(&path).map(|b| serde_json::from_slice::<JobManifest>(&b)) {
                Ok(Ok(m)) => out.push(m),
                Ok(Err(e)) => tracing::warn!(path = %path.display(), error = %e, "skipping manifest"),
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "skipping manifest"),
            }
        }
        Ok(out)
    }
}
