use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use super::manifest::{AssetEntry, AssetManifest, AssetRole, Digest, DigestWriter};
use super::StoreError;

const OBJECTS: &str = "objects";
const MANIFESTS: &str = "manifests";
const TMP: &str = "tmp";
const ACTIVE: &str = "ACTIVE";
const LOCK: &str = "LOCK";

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// On-disk boot-asset store.
///
/// Layout under the root:
///
/// ```text
/// objects/<sha256-hex>     content-addressed blobs, never rewritten
/// manifests/<version>.json one manifest per activated or staged version
/// ACTIVE                   decimal version number of the live manifest
/// LOCK                     present while a sync or gc holds the store
/// tmp/                     staging area for in-progress downloads
/// ```
///
/// Readers only ever go through [`Snapshot`], which has no mutating
/// methods. Writes happen through the sync path and `gc`, both of which
/// must hold the [`StoreLock`].
#[derive(Debug)]
pub struct AssetStore {
    root: PathBuf,
    mutations: AtomicU64,
    manifests: Mutex<HashMap<u64, Arc<AssetManifest>>>,
}

impl AssetStore {
    /// Opens an existing store.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.join(OBJECTS).is_dir() || !root.join(MANIFESTS).is_dir() {
            return Err(StoreError::NotInitialized(root));
        }
        Ok(Self::at(root))
    }

    /// Opens a store, creating the directory layout if needed.
    pub fn init(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in [OBJECTS, MANIFESTS, TMP] {
            let path = root.join(dir);
            fs::create_dir_all(&path).map_err(io_err(&path))?;
        }
        Ok(Self::at(root))
    }

    fn at(root: PathBuf) -> Self {
        AssetStore { root, mutations: AtomicU64::new(0), manifests: Mutex::new(HashMap::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of filesystem mutations this handle has performed. Serving
    /// paths never bump it; tests use it to check the read-only contract.
    pub fn mutation_count(&self) -> u64 {
        self.mutations.load(Ordering::Relaxed)
    }

    fn note_mutation(&self) {
        self.mutations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn object_path(&self, digest: &Digest) -> PathBuf {
        self.root.join(OBJECTS).join(digest.to_hex())
    }

    pub fn has_object(&self, digest: &Digest) -> bool {
        self.object_path(digest).is_file()
    }

    pub fn active_version(&self) -> Result<Option<u64>, StoreError> {
        let path = self.root.join(ACTIVE);
        match fs::read_to_string(&path) {
            Ok(text) => text
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| StoreError::ManifestMalformed(format!("corrupt ACTIVE marker {text:?}"))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Versions with a manifest on disk, ascending.
    pub fn versions(&self) -> Result<Vec<u64>, StoreError> {
        let dir = self.root.join(MANIFESTS);
        let mut out = BTreeSet::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            if let Some(v) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|n| n.parse().ok()) {
                out.insert(v);
            }
        }
        Ok(out.into_iter().collect())
    }

    pub fn manifest(&self, version: u64) -> Result<Arc<AssetManifest>, StoreError> {
        if let Some(m) = self.manifests.lock().unwrap().get(&version) {
            return Ok(m.clone());
        }
        let path = self.manifest_path(version);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::UnknownVersion(version))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let manifest = Arc::new(AssetManifest::from_json(&bytes)?);
        if manifest.version != version {
            return Err(StoreError::ManifestMalformed(format!(
                "{} declares version {}",
                path.display(),
                manifest.version
            )));
        }
        self.manifests.lock().unwrap().insert(version, manifest.clone());
        Ok(manifest)
    }

    fn manifest_path(&self, version: u64) -> PathBuf {
        self.root.join(MANIFESTS).join(format!("{version}.json"))
    }

    /// Snapshot of the currently active version.
    pub fn open_snapshot(&self) -> Result<Snapshot, StoreError> {
        let version = self.active_version()?.ok_or(StoreError::NoActiveVersion)?;
        self.snapshot_at(version)
    }

    pub fn snapshot_at(&self, version: u64) -> Result<Snapshot, StoreError> {
        Ok(Snapshot {
            manifest: self.manifest(version)?,
            objects: Arc::new(self.root.join(OBJECTS)),
        })
    }

    pub fn verify_active(&self) -> Result<VerificationReport, StoreError> {
        let snapshot = self.open_snapshot()?;
        Ok(verify(snapshot.manifest(), &self.root.join(OBJECTS)))
    }

    /// Takes the store-wide writer marker.
    pub fn lock(&self) -> Result<StoreLock, StoreError> {
        let path = self.root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::SyncInProgress(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Opens a staging file for a blob being downloaded.
    pub(crate) fn stage(&self, _lock: &StoreLock) -> Result<StagedObject, StoreError> {
        let dir = self.root.join(TMP);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("obj-{}-{}", std::process::id(), unique_suffix()));
        let file = File::create(&path).map_err(io_err(&path))?;
        self.note_mutation();
        Ok(StagedObject { path, file: Some(file), digest: DigestWriter::new() })
    }

    pub(crate) fn write_staged(&self, staged: &mut StagedObject, chunk: &[u8]) -> Result<(), StoreError> {
        let file = staged.file.as_mut().expect("staged file open");
        file.write_all(chunk).map_err(io_err(&staged.path))?;
        staged.digest.update(chunk);
        self.note_mutation();
        Ok(())
    }

    /// Moves a fully written staging file into `objects/` under its digest.
    /// The caller has already compared the digest against the manifest.
    pub(crate) fn commit_staged(&self, mut staged: StagedObject, digest: &Digest) -> Result<(), StoreError> {
        let file = staged.file.take().expect("staged file open");
        file.sync_all().map_err(io_err(&staged.path))?;
        drop(file);
        let dest = self.object_path(digest);
        fs::rename(&staged.path, &dest).map_err(io_err(&dest))?;
        self.note_mutation();
        Ok(())
    }

    pub(crate) fn write_manifest(&self, _lock: &StoreLock, manifest: &AssetManifest) -> Result<(), StoreError> {
        self.write_atomically(&self.manifest_path(manifest.version), &manifest.to_json())
    }

    /// Switches the live version. The marker file is replaced by rename, so
    /// readers see either the old or the new number, never a mix.
    pub(crate) fn activate(&self, _lock: &StoreLock, version: u64) -> Result<(), StoreError> {
        if let Some(active) = self.active_version()? {
            if version <= active {
                return Err(StoreError::VersionNotIncreasing { active, candidate: version });
            }
        }
        self.manifest(version)?;
        self.write_atomically(&self.root.join(ACTIVE), format!("{version}\n").as_bytes())
    }

    fn write_atomically(&self, dest: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        let tmp = dest.with_extension(format!("tmp-{}", unique_suffix()));
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        drop(f);
        fs::rename(&tmp, dest).map_err(io_err(dest))?;
        self.note_mutation();
        Ok(())
    }

    /// Deletes blobs no longer referenced by the `keep` most recent versions
    /// (the active one always counts), along with manifests of older
    /// versions. Snapshots of pruned versions held elsewhere become invalid,
    /// which is why this is never run automatically.
    pub fn gc(&self, keep: usize) -> Result<GcReport, StoreError> {
        let lock = self.lock()?;
        let active = self.active_version()?;
        let mut versions = self.versions()?;
        if let Some(a) = active {
            versions.retain(|&v| v <= a);
        }
        let split = versions.len().saturating_sub(keep.max(1));
        let (pruned, kept) = versions.split_at(split);

        let mut live = BTreeSet::new();
        for &v in kept {
            for entry in &self.manifest(v)?.assets {
                live.insert(entry.digest.to_hex());
            }
        }
        // Staged-but-not-activated manifests newer than ACTIVE keep their blobs.
        for v in self.versions()?.into_iter().filter(|v| active.is_some_and(|a| *v > a)) {
            for entry in &self.manifest(v)?.assets {
                live.insert(entry.digest.to_hex());
            }
        }

        let mut report = GcReport { kept_versions: kept.to_vec(), ..GcReport::default() };
        let dir = self.root.join(OBJECTS);
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !live.contains(&name) {
                let len = entry.metadata().map(|m| m.len()).unwrap_or(0);
                fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
                self.note_mutation();
                report.removed_objects += 1;
                report.freed_bytes += len;
            }
        }
        for &v in pruned {
            let path = self.manifest_path(v);
            fs::remove_file(&path).map_err(io_err(&path))?;
            self.manifests.lock().unwrap().remove(&v);
            self.note_mutation();
            report.removed_versions.push(v);
        }
        drop(lock);
        Ok(report)
    }
}

fn unique_suffix() -> u64 {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}

/// Exclusive writer marker; released on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub(crate) struct StagedObject {
    path: PathBuf,
    file: Option<File>,
    digest: DigestWriter,
}

impl StagedObject {
    pub(crate) fn digest_so_far(&self) -> (Digest, u64) {
        self.digest.clone().finish()
    }
}

impl Drop for StagedObject {
    fn drop(&mut self) {
        if self.file.take().is_some() {
            let _ = fs::remove_file(&self.path);
        }
    }
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct GcReport {
    pub kept_versions: Vec<u64>,
    pub removed_versions: Vec<u64>,
    pub removed_objects: usize,
    pub freed_bytes: u64,
}

/// An immutable view of one manifest version.
///
/// Cloning is cheap. Blobs are content-addressed and never rewritten, so a
/// snapshot keeps reading the bytes of its own version after a newer one is
/// activated.
#[derive(Debug, Clone)]
pub struct Snapshot {
    manifest: Arc<AssetManifest>,
    objects: Arc<PathBuf>,
}

impl Snapshot {
    pub fn version(&self) -> u64 {
        self.manifest.version
    }

    pub fn manifest(&self) -> &AssetManifest {
        &self.manifest
    }

    pub fn entry(&self, path: &str) -> Option<&AssetEntry> {
        self.manifest.entry(path)
    }

    pub fn by_role(&self, role: AssetRole) -> Option<&AssetEntry> {
        self.manifest.by_role(role)
    }

    pub fn open(&self, path: &str) -> Result<AssetReader, StoreError> {
        let entry = self.entry(path).ok_or_else(|| StoreError::UnknownPath(path.to_string()))?;
        let blob = self.objects.join(entry.digest.to_hex());
        let file = File::open(&blob).map_err(io_err(&blob))?;
        Ok(AssetReader { file, entry: entry.clone(), version: self.version(), position: 0 })
    }

    pub fn read_asset(&self, path: &str, offset: u64, len: u64) -> Result<Vec<u8>, StoreError> {
        let mut reader = self.open(path)?;
        let size = reader.size();
        if offset.checked_add(len).is_none_or(|end| end > size) {
            return Err(StoreError::OutOfBounds { path: path.to_string(), offset, len, size });
        }
        let mut buf = vec![0u8; len as usize];
        reader.read_exact_at(offset, &mut buf)?;
        Ok(buf)
    }
}

/// Read handle on one asset of one version.
#[derive(Debug)]
pub struct AssetReader {
    file: File,
    entry: AssetEntry,
    version: u64,
    position: u64,
}

impl AssetReader {
    pub fn entry(&self) -> &AssetEntry {
        &self.entry
    }

    pub fn size(&self) -> u64 {
        self.entry.size
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Fills `buf` from `offset`, stopping early only at end of asset.
    /// Returns the number of bytes read.
    pub fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<usize, StoreError> {
        let want = buf.len().min(self.size().saturating_sub(offset) as usize);
        self.read_exact_at(offset, &mut buf[..want])?;
        Ok(want)
    }

    fn read_exact_at(&mut self, offset: u64, buf: &mut [u8]) -> Result<(), StoreError> {
        let path = PathBuf::from(self.entry.digest.to_hex());
        if self.position != offset {
            self.file.seek(SeekFrom::Start(offset)).map_err(io_err(&path))?;
        }
        self.file.read_exact(buf).map_err(io_err(&path))?;
        self.position = offset + buf.len() as u64;
        Ok(())
    }

    pub fn into_file(self) -> File {
        self.file
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AssetStatus {
    Ok,
    Missing,
    SizeMismatch { expected: u64, actual: u64 },
    DigestMismatch { expected: String, actual: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct AssetCheck {
    pub path: String,
    pub role: AssetRole,
    #[serde(flatten)]
    pub status: AssetStatus,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub version: u64,
    pub ok: bool,
    pub assets: Vec<AssetCheck>,
}

impl VerificationReport {
    pub fn failures(&self) -> impl Iterator<Item = &AssetCheck> {
        self.assets.iter().filter(|c| c.status != AssetStatus::Ok)
    }
}

/// Re-hashes every blob a manifest references under `objects`.
pub fn verify(manifest: &AssetManifest, objects: &Path) -> VerificationReport {
    let assets: Vec<AssetCheck> = manifest
        .assets
        .iter()
        .map(|entry| AssetCheck {
            path: entry.path.clone(),
            role: entry.role,
            status: check_blob(entry, &objects.join(entry.digest.to_hex())),
        })
        .collect();
    VerificationReport {
        version: manifest.version,
        ok: assets.iter().all(|c| c.status == AssetStatus::Ok),
        assets,
    }
}

fn check_blob(entry: &AssetEntry, blob: &Path) -> AssetStatus {
    let mut file = match File::open(blob) {
        Ok(f) => f,
        Err(_) => return AssetStatus::Missing,
    };
    let actual_len = file.metadata().map(|m| m.len()).unwrap_or(0);
    if actual_len != entry.size {
        return AssetStatus::SizeMismatch { expected: entry.size, actual: actual_len };
    }
    let mut hasher = DigestWriter::new();
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match file.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => hasher.update(&buf[..n]),
            Err(_) => return AssetStatus::Missing,
        }
    }
    let (digest, _) = hasher.finish();
    if digest == entry.digest {
        AssetStatus::Ok
    } else {
        AssetStatus::DigestMismatch { expected: entry.digest.to_hex(), actual: digest.to_hex() }
    }
}
