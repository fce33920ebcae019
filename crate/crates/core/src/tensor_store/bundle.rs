use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Result, VceError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.bin";
pub const FORMAT_VERSION: u32 = 1;

const F32_TAG: &str = "f32";
const CHUNK: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub offset: u64,
    pub length: u64,
    pub sha256: String,
}

impl ManifestEntry {
    fn element_count(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestSummary {
    pub dir: PathBuf,
    pub tensors: usize,
    pub bytes: u64,
}

/// Name-addressed tensors read from a bundle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tensor: Tensor) -> Result<()> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(VceError::DuplicateName(tensor.name().to_string()));
        }
        self.tensors.insert(tensor.name().to_string(), tensor);
        Ok(())
    }

    /// Replaces an existing tensor of the same name, or inserts it.
    pub fn replace(&mut self, tensor: Tensor) {
        self.tensors.insert(tensor.name().to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| VceError::MissingTensor(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.values()
    }
}

impl FromIterator<Tensor> for TensorMap {
    /// Later tensors win on name collisions.
    fn from_iter<I: IntoIterator<Item = Tensor>>(iter: I) -> Self {
        let mut map = TensorMap::new();
        for t in iter {
            map.replace(t);
        }
        map
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_file_name(dir: &Path, file: &str) -> Result<()> {
    let ok = !file.is_empty()
        && !file.contains('/')
        && !file.contains('\\')
        && file != "."
        && file != "..";
    if ok {
        Ok(())
    } else {
        Err(VceError::Manifest {
            path: dir.join(MANIFEST_FILE),
            reason: format!("blob file name `{file}` must be a plain file name"),
        })
    }
}

/// Writes `tensors`, in the given order, to `dir/data.bin` and `dir/manifest.json`.
pub fn write_bundle<'a, I>(tensors: I, dir: impl AsRef<Path>) -> Result<ManifestSummary>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let dir = dir.as_ref();
    let tensors: Vec<&Tensor> = tensors.into_iter().collect();
    let mut seen = HashSet::new();
    for t in &tensors {
        if !seen.insert(t.name()) {
            return Err(VceError::DuplicateName(t.name().to_string()));
        }
    }

    fs::create_dir_all(dir).map_err(|e| VceError::io(dir, e))?;
    let data_path = dir.join(DATA_FILE);
    let file = File::create(&data_path).map_err(|e| VceError::io(&data_path, e))?;
    let mut writer = BufWriter::new(file);

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in &tensors {
        let bytes = t.to_le_bytes();
        writer
            .write_all(&bytes)
            .map_err(|e| VceError::io(&data_path, e))?;
        entries.push(ManifestEntry {
            name: t.name().to_string(),
            dtype: F32_TAG.to_string(),
            shape: t.shape().to_vec(),
            file: DATA_FILE.to_string(),
            offset,
            length: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        offset += bytes.len() as u64;
    }
    writer.flush().map_err(|e| VceError::io(&data_path, e))?;

    let manifest = Manifest {
        version: FORMAT_VERSION,
        tensors: entries,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| VceError::io(&manifest_path, e))?;

    Ok(ManifestSummary {
        dir: dir.to_path_buf(),
        tensors: tensors.len(),
        bytes: offset,
    })
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| VceError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| VceError::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        return Err(VceError::Manifest {
            path,
            reason: format!("unsupported version {}", manifest.version),
        });
    }
    for entry in &manifest.tensors {
        check_file_name(dir, &entry.file)?;
    }
    Ok(manifest)
}

/// Static checks that need no blob access.
fn check_entry_layout(entry: &ManifestEntry) -> std::result::Result<(), String> {
    if entry.dtype != F32_TAG {
        return Err(format!("unsupported dtype `{}`", entry.dtype));
    }
    if entry.shape.is_empty() {
        return Err("shape has rank 0".to_string());
    }
    let expected = 4 * entry.element_count();
    if entry.length != expected {
        return Err(format!(
            "byte length {} does not match 4 x {} elements",
            entry.length,
            entry.element_count()
        ));
    }
    Ok(())
}

/// Reads every tensor of a bundle, verifying layout and hashes first.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<TensorMap> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut blobs: HashMap<String, Option<Vec<u8>>> = HashMap::new();
    let mut out = TensorMap::new();

    for entry in &manifest.tensors {
        check_entry_layout(entry).map_err(|reason| VceError::Inconsistent {
            name: entry.name.clone(),
            reason,
        })?;
        if !blobs.contains_key(&entry.file) {
            let path = dir.join(&entry.file);
            let blob = match fs::read(&path) {
                Ok(b) => Some(b),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(VceError::io(&path, e)),
            };
            blobs.insert(entry.file.clone(), blob);
        }
        let blob = blobs[&entry.file]
            .as_ref()
            .ok_or_else(|| VceError::MissingBlob {
                name: entry.name.clone(),
                file: entry.file.clone(),
            })?;
        let end = entry.offset.checked_add(entry.length);
        let region = match end {
            Some(end) if end <= blob.len() as u64 => &blob[entry.offset as usize..end as usize],
            _ => {
                return Err(VceError::Inconsistent {
                    name: entry.name.clone(),
                    reason: format!(
                        "region {}+{} exceeds blob `{}` of {} bytes",
                        entry.offset,
                        entry.length,
                        entry.file,
                        blob.len()
                    ),
                })
            }
        };
        if sha256_hex(region) != entry.sha256 {
            return Err(VceError::HashMismatch {
                name: entry.name.clone(),
            });
        }
        let data = region
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(Tensor::new(entry.name.clone(), entry.shape.clone(), data)?)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryStatus {
    Ok,
    MissingBlob,
    /// Declared length disagrees with dtype and shape.
    ShapeLengthMismatch(String),
    /// The blob is shorter than the declared region.
    ByteLengthMismatch,
    HashMismatch,
    DuplicateName,
    Io(String),
}

impl std::fmt::Display for EntryStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EntryStatus::Ok => write!(f, "ok"),
            EntryStatus::MissingBlob => write!(f, "missing blob"),
            EntryStatus::ShapeLengthMismatch(r) => write!(f, "shape/length inconsistency: {r}"),
            EntryStatus::ByteLengthMismatch => write!(f, "byte-length mismatch"),
            EntryStatus::HashMismatch => write!(f, "hash mismatch"),
            EntryStatus::DuplicateName => write!(f, "duplicate name"),
            EntryStatus::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationEntry {
    pub name: String,
    pub status: EntryStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub dir: PathBuf,
    /// Set when the manifest itself cannot be read; no entries then.
    pub manifest_error: Option<String>,
    pub entries: Vec<ValidationEntry>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.manifest_error.is_none() && self.entries.iter().all(|e| e.status == EntryStatus::Ok)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if let Some(err) = &self.manifest_error {
            return writeln!(f, "{}: manifest error: {err}", self.dir.display());
        }
        for e in &self.entries {
            writeln!(f, "{:<40} {}", e.name, e.status)?;
        }
        let bad = self
            .entries
            .iter()
            .filter(|e| e.status != EntryStatus::Ok)
            .count();
        write!(
            f,
            "{}: {} tensors, {} ok, {} failed",
            self.dir.display(),
            self.entries.len(),
            self.entries.len() - bad,
            bad
        )
    }
}

fn hash_region(file: &mut File, offset: u64, length: u64) -> std::io::Result<String> {
    file.seek(SeekFrom::Start(offset))?;
    let mut hasher = Sha256::new();
    let mut remaining = length;
    let mut buf = vec![0u8; CHUNK];
    while remaining > 0 {
        let want = remaining.min(CHUNK as u64) as usize;
        file.read_exact(&mut buf[..want])?;
        hasher.update(&buf[..want]);
        remaining -= want as u64;
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Checks every manifest entry, streaming blob regions instead of loading them.
pub fn validate_bundle(dir: impl AsRef<Path>) -> ValidationReport {
    let dir = dir.as_ref();
    let manifest = match read_manifest(dir) {
        Ok(m) => m,
        Err(e) => {
            return ValidationReport {
                dir: dir.to_path_buf(),
                manifest_error: Some(e.to_string()),
                entries: Vec::new(),
            }
        }
    };

    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let status = if !seen.insert(entry.name.as_str()) {
            EntryStatus::DuplicateName
        } else if let Err(reason) = check_entry_layout(entry) {
            EntryStatus::ShapeLengthMismatch(reason)
        } else {
            check_region(dir, entry)
        };
        entries.push(ValidationEntry {
            name: entry.name.clone(),
            status,
        });
    }
    ValidationReport {
        dir: dir.to_path_buf(),
        manifest_error: None,
        entries,
    }
}

fn check_region(dir: &Path, entry: &ManifestEntry) -> EntryStatus {
    let path = dir.join(&entry.file);
    let mut file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return EntryStatus::MissingBlob,
        Err(e) => return EntryStatus::Io(e.to_string()),
    };
    let size = match file.metadata() {
        Ok(m) => m.len(),
        Err(e) => return EntryStatus::Io(e.to_string()),
    };
    match entry.offset.checked_add(entry.length) {
        Some(end) if end <= size => {}
        _ => return EntryStatus::ByteLengthMismatch,
    }
    match hash_region(&mut file, entry.offset, entry.length) {
        Ok(h) if h == entry.sha256 => EntryStatus::Ok,
        Ok(_) => EntryStatus::HashMismatch,
        Err(e) => EntryStatus::Io(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Tensor> {
        vec![
            Tensor::from_vec("v", vec![1.0, 2.0]),
            Tensor::new("m", vec![2, 3], (0..6).map(|i| i as f32 * 0.5).collect()).unwrap(),
        ]
    }

    #[test]
    fn manifest_records_four_bytes_per_element() {
        let dir = tempfile::tempdir().unwrap();
        let summary = write_bundle(&sample(), dir.path()).unwrap();
        assert_eq!(summary.tensors, 2);
        assert_eq!(summary.bytes, 32);
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.version, 1);
        assert_eq!(m.tensors[0].name, "v");
        assert_eq!(m.tensors[0].length, 8);
        assert_eq!(m.tensors[1].offset, 8);
        assert_eq!(m.tensors[1].dtype, "f32");
    }

    #[test]
    fn empty_collection_gives_valid_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&[], dir.path()).unwrap();
        assert!(read_manifest(dir.path()).unwrap().tensors.is_empty());
        assert!(read_bundle(dir.path()).unwrap().is_empty());
        assert!(validate_bundle(dir.path()).is_ok());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::scalar("x", 1.0);
        let err = write_bundle(&[t.clone(), t], dir.path()).unwrap_err();
        assert!(matches!(err, VceError::DuplicateName(n) if n == "x"));
    }

    #[test]
    fn manifest_keys_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        let top: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(top, ["tensors", "version"]);
        let mut keys: Vec<_> = value["tensors"][0]
            .as_object()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        keys.sort();
        assert_eq!(
            keys,
            ["dtype", "file", "length", "name", "offset", "sha256", "shape"]
        );
    }

    #[test]
    fn flipped_byte_is_reported_as_hash_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[12] ^= 0x01; // inside "m"
        fs::write(&path, bytes).unwrap();
        match read_bundle(dir.path()).unwrap_err() {
            VceError::HashMismatch { name } => assert_eq!(name, "m"),
            e => panic!("unexpected error {e}"),
        }
        let report = validate_bundle(dir.path());
        assert_eq!(report.entries[0].status, EntryStatus::Ok);
        assert_eq!(report.entries[1].status, EntryStatus::HashMismatch);
    }

    #[test]
    fn inconsistent_length_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[0].length = 12;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        match read_bundle(dir.path()).unwrap_err() {
            VceError::Inconsistent { name, .. } => assert_eq!(name, "v"),
            e => panic!("unexpected error {e}"),
        }
        assert!(matches!(
            validate_bundle(dir.path()).entries[0].status,
            EntryStatus::ShapeLengthMismatch(_)
        ));
    }

    #[test]
    fn missing_blob_is_reported_per_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(DATA_FILE)).unwrap();
        match read_bundle(dir.path()).unwrap_err() {
            VceError::MissingBlob { name, file } => {
                assert_eq!(name, "v");
                assert_eq!(file, DATA_FILE);
            }
            e => panic!("unexpected error {e}"),
        }
        let report = validate_bundle(dir.path());
        assert!(report
            .entries
            .iter()
            .all(|e| e.status == EntryStatus::MissingBlob));
    }

    #[test]
    fn truncated_blob_is_a_byte_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let path = dir.path().join(DATA_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let report = validate_bundle(dir.path());
        assert_eq!(report.entries[0].status, EntryStatus::Ok);
        assert_eq!(report.entries[1].status, EntryStatus::ByteLengthMismatch);
        assert!(!report.is_ok());
        assert!(matches!(
            read_bundle(dir.path()).unwrap_err(),
            VceError::Inconsistent { name, .. } if name == "m"
        ));
    }

    #[test]
    fn manifest_order_does_not_change_result() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let before = read_bundle(dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors.reverse();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), before);
    }

    #[test]
    fn blobs_may_be_split_across_files() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let data = fs::read(dir.path().join(DATA_FILE)).unwrap();
        fs::write(dir.path().join("data.bin"), &data[..8]).unwrap();
        fs::write(dir.path().join("extra.bin"), &data[8..]).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[1].file = "extra.bin".into();
        m.tensors[1].offset = 0;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(validate_bundle(dir.path()).is_ok());
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.get("m").unwrap(), &sample()[1]);
    }

    #[test]
    fn path_escaping_file_names_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&sample(), dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.tensors[0].file = "../data.bin".into();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_string(&m).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            read_bundle(dir.path()).unwrap_err(),
            VceError::Manifest { .. }
        ));
        assert!(validate_bundle(dir.path()).manifest_error.is_some());
    }
}
