//! On-disk volume and model store.
//!
//! Files are named by a hash of their content, so re-uploading identical data
//! yields the same id. Writes go to a temporary file that is renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use voltf_core::neural::{load_model, MlpNetwork, NeuralError};
use voltf_core::volume::{file_pair, load_volume, Volume, VolumeError, VolumeHeader};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] NeuralError),
    #[error("store i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn content_id(parts: &[&[u8]]) -> String {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p);
    }
    hex::encode(&hasher.finalize()[..16])
}

fn valid_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("volumes"))?;
        fs::create_dir_all(root.join("models"))?;
        Ok(Store { root })
    }

    fn volume_prefix(&self, id: &str) -> PathBuf {
        self.root.join("volumes").join(id)
    }

    fn model_path(&self, id: &str) -> PathBuf {
        self.root.join("models").join(format!("{id}.json"))
    }

    /// Validates and stores a raw volume; returns its id.
    pub fn put_volume(&self, header: &VolumeHeader, raw: &[u8]) -> Result<(String, Volume), StoreError> {
        let volume = load_volume(raw, header)?;
        let header_json = serde_json::to_vec(header).expect("header serializes");
        let id = content_id(&[&header_json, raw]);
        let (header_path, raw_path) = file_pair(&self.volume_prefix(&id));
        // raw first: a header without its raw file is never visible
        write_atomic(&raw_path, raw)?;
        write_atomic(&header_path, &header_json)?;
        Ok((id, volume))
    }

    pub fn get_volume(&self, id: &str) -> Result<Volume, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(format!("volume {id}")));
        }
        let prefix = self.volume_prefix(id);
        if !file_pair(&prefix).0.exists() {
            return Err(StoreError::NotFound(format!("volume {id}")));
        }
        Ok(Volume::read(&prefix)?)
    }

    pub fn list_volumes(&self) -> Result<Vec<String>, StoreError> {
        self.list("volumes", ".json")
    }

    /// Validates and stores a model file; returns its id.
    pub fn put_model(&self, bytes: &[u8]) -> Result<(String, MlpNetwork), StoreError> {
        let net = load_model(bytes)?;
        let id = content_id(&[bytes]);
        write_atomic(&self.model_path(&id), bytes)?;
        Ok((id, net))
    }

    pub fn get_model(&self, id: &str) -> Result<MlpNetwork, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(format!("model {id}")));
        }
        let path = self.model_path(id);
        match fs::read(&path) {
            Ok(bytes) => Ok(load_model(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(format!("model {id}"))),
            Err(e) => Err(e.into()),
        }
    }

    pub fn list_models(&self) -> Result<Vec<String>, StoreError> {
        self.list("models", ".json")
    }

    fn list(&self, dir: &str, suffix: &str) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join(dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(str::to_owned))
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use voltf_core::neural::save_model;
    use voltf_core::volume::Dtype;

    #[test]
    fn volumes_persist_under_content_ids() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let header = VolumeHeader { dims: [2, 2, 2], spacing: [1.0; 3], dtype: Dtype::U8 };
        let raw = [0u8, 10, 20, 30, 40, 50, 60, 255];
        let (id, v) = store.put_volume(&header, &raw).unwrap();
        let (again, _) = store.put_volume(&header, &raw).unwrap();
        assert_eq!(id, again);
        let reopened = Store::open(dir.path()).unwrap();
        assert_eq!(reopened.get_volume(&id).unwrap(), v);
        assert_eq!(reopened.list_volumes().unwrap(), vec![id]);
        assert!(matches!(reopened.get_volume("../etc"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn models_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let net = MlpNetwork::random(&[3, 2], 1, 0.1).unwrap();
        let (id, _) = store.put_model(&save_model(&net)).unwrap();
        assert_eq!(store.get_model(&id).unwrap(), net);
        assert!(store.put_model(b"{").is_err());
        assert!(matches!(store.get_model(&"0".repeat(32)), Err(StoreError::NotFound(_))));
    }
}
