use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use chrono::Utc;
use colaboot_core::asset_store::{
    missing_digests, publish_directory, sync_once, AssetManifest, AssetRole, AssetStatus, AssetStore,
    ByteStream, Digest, DirRemote, PublishedAsset, RemoteError, RemoteSource, StoreError, SyncError,
};
use futures::StreamExt;
use proptest::prelude::*;

fn asset(path: &str, role: AssetRole, bytes: Vec<u8>) -> PublishedAsset {
    PublishedAsset { path: path.into(), role, bytes: Bytes::from(bytes) }
}

fn fill(len: usize, tag: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(tag)).collect()
}

/// A boot chain whose kernel varies with `kernel_tag`.
fn chain(kernel_tag: u8) -> Vec<PublishedAsset> {
    vec![
        asset("pxelinux.0", AssetRole::Bootloader, fill(3000, 1)),
        asset("pxelinux.cfg/default", AssetRole::Config, b"DEFAULT x\n".to_vec()),
        asset("vmlinuz", AssetRole::Kernel, fill(70_000, kernel_tag)),
        asset("initrd.img", AssetRole::Initrd, fill(90_000, 3)),
        asset("os-image.sqfs", AssetRole::Image, fill(300_000, 4)),
    ]
}

fn publish(remote: &Path, version: u64, assets: &[PublishedAsset]) -> AssetManifest {
    publish_directory(remote, version, Utc::now(), assets).unwrap()
}

/// Path, size and content digest of every file under `root`.
fn fingerprint(root: &Path) -> BTreeMap<String, (u64, Digest)> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).unwrap();
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, (bytes.len() as u64, Digest::of(&bytes)));
            }
        }
    }
    out
}

fn tmp_is_empty(store: &AssetStore) -> bool {
    fs::read_dir(store.root().join("tmp")).unwrap().next().is_none()
}

/// Counts object fetches and optionally slows each chunk down.
struct CountingRemote {
    inner: DirRemote,
    fetches: AtomicUsize,
    chunk_delay: Option<Duration>,
}

impl CountingRemote {
    fn new(root: &Path) -> Self {
        CountingRemote { inner: DirRemote::new(root), fetches: AtomicUsize::new(0), chunk_delay: None }
    }
}

#[async_trait]
impl RemoteSource for CountingRemote {
    fn describe(&self) -> String {
        self.inner.describe()
    }

    async fn fetch_manifest(&self) -> Result<Vec<u8>, RemoteError> {
        self.inner.fetch_manifest().await
    }

    async fn fetch_object(&self, digest: &Digest) -> Result<ByteStream, RemoteError> {
        self.fetches.fetch_add(1, Ordering::SeqCst);
        let stream = self.inner.fetch_object(digest).await?;
        Ok(match self.chunk_delay {
            Some(d) => stream
                .then(move |c| async move {
                    tokio::time::sleep(d).await;
                    c
                })
                .boxed(),
            None => stream,
        })
    }
}

#[tokio::test]
async fn sync_activates_and_serves_the_published_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    let assets = chain(2);
    publish(&remote, 1, &assets);
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    assert_eq!(store.active_version().unwrap(), None);

    let report = sync_once(&DirRemote::new(&remote), &store).await.unwrap();
    assert_eq!(report.new_version, Some(1));
    assert_eq!(report.fetched, 5);
    assert_eq!(report.bytes, assets.iter().map(|a| a.bytes.len() as u64).sum::<u64>());
    assert_eq!(store.active_version().unwrap(), Some(1));

    let snap = store.open_snapshot().unwrap();
    for a in &assets {
        let got = snap.read_asset(&a.path, 0, a.bytes.len() as u64).unwrap();
        assert_eq!(got, a.bytes.as_ref(), "{}", a.path);
    }
    assert!(store.verify_active().unwrap().ok);
    assert!(tmp_is_empty(&store));

    // A reopened handle sees the same state.
    let again = AssetStore::open(store.root()).unwrap();
    assert_eq!(again.active_version().unwrap(), Some(1));
}

#[tokio::test]
async fn resync_of_same_version_changes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();

    let (count, print) = (store.mutation_count(), fingerprint(store.root()));
    let report = sync_once(&DirRemote::new(&remote), &store).await.unwrap();
    assert_eq!((report.fetched, report.new_version), (0, None));
    assert_eq!(store.mutation_count(), count);
    assert_eq!(fingerprint(store.root()), print);
}

#[tokio::test]
async fn delta_sync_fetches_only_the_changed_blob() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();

    let v2 = publish(&remote, 2, &chain(9));
    assert_eq!(missing_digests(&v2, &store), vec![v2.by_role(AssetRole::Kernel).unwrap().digest]);
    let counting = CountingRemote::new(&remote);
    let report = sync_once(&counting, &store).await.unwrap();
    assert_eq!(counting.fetches.load(Ordering::SeqCst), 1);
    assert_eq!((report.fetched, report.bytes, report.new_version), (1, 70_000, Some(2)));
    assert_eq!(store.open_snapshot().unwrap().read_asset("vmlinuz", 0, 70_000).unwrap(), fill(70_000, 9));
}

#[tokio::test]
async fn corrupted_remote_blob_rolls_back() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();

    let v2 = publish(&remote, 2, &chain(9));
    let kernel = v2.by_role(AssetRole::Kernel).unwrap().digest;
    let blob = remote.join("objects").join(kernel.to_hex());
    let mut bytes = fs::read(&blob).unwrap();
    bytes[1234] ^= 0x40;
    fs::write(&blob, bytes).unwrap();

    let print = fingerprint(store.root());
    match sync_once(&DirRemote::new(&remote), &store).await {
        Err(SyncError::VerificationFailed { path, .. }) => assert_eq!(path, "vmlinuz"),
        other => panic!("expected verification failure, got {other:?}"),
    }
    assert_eq!(store.active_version().unwrap(), Some(1));
    assert!(!store.has_object(&kernel));
    assert!(tmp_is_empty(&store));
    assert_eq!(fingerprint(store.root()), print);
    assert_eq!(store.open_snapshot().unwrap().read_asset("vmlinuz", 0, 70_000).unwrap(), fill(70_000, 2));
}

#[tokio::test]
async fn truncated_remote_blob_rolls_back() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    let v1 = publish(&remote, 1, &chain(2));
    let image = v1.by_role(AssetRole::Image).unwrap().digest;
    let blob = remote.join("objects").join(image.to_hex());
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();

    let store = AssetStore::init(dir.path().join("store")).unwrap();
    let err = sync_once(&DirRemote::new(&remote), &store).await.unwrap_err();
    assert!(matches!(err, SyncError::VerificationFailed { ref path, .. } if path == "os-image.sqfs"), "{err}");
    assert_eq!(store.active_version().unwrap(), None);
    assert!(tmp_is_empty(&store));
}

#[tokio::test]
async fn unreachable_remote_leaves_store_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();

    let (count, print) = (store.mutation_count(), fingerprint(store.root()));
    let gone = DirRemote::new(dir.path().join("nowhere"));
    assert!(matches!(sync_once(&gone, &store).await, Err(SyncError::RemoteUnreachable(_))));
    assert_eq!(store.mutation_count(), count);
    assert_eq!(fingerprint(store.root()), print);
}

#[tokio::test]
async fn malformed_remote_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    fs::create_dir_all(&remote).unwrap();
    fs::write(remote.join("manifest.json"), br#"{"version": 1, "created_at": "2024-01-01T00:00:00Z", "assets": []}"#).unwrap();
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    assert!(matches!(sync_once(&DirRemote::new(&remote), &store).await, Err(SyncError::RemoteManifest(_))));
    assert_eq!(store.active_version().unwrap(), None);
}

#[tokio::test]
async fn verify_reports_flipped_and_missing_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    let v1 = publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();

    let initrd = store.object_path(&v1.by_role(AssetRole::Initrd).unwrap().digest);
    let mut bytes = fs::read(&initrd).unwrap();
    bytes[0] ^= 1;
    fs::write(&initrd, bytes).unwrap();
    fs::remove_file(store.object_path(&v1.by_role(AssetRole::Image).unwrap().digest)).unwrap();

    let report = store.verify_active().unwrap();
    assert!(!report.ok);
    let bad: BTreeMap<&str, &AssetStatus> = report.failures().map(|c| (c.path.as_str(), &c.status)).collect();
    assert_eq!(bad.len(), 2);
    assert!(matches!(bad["initrd.img"], AssetStatus::DigestMismatch { .. }));
    assert_eq!(bad["os-image.sqfs"], &AssetStatus::Missing);
}

#[tokio::test]
async fn gc_keeps_the_newest_versions() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    let mut manifests = Vec::new();
    for v in 1..=4u64 {
        manifests.push(publish(&remote, v, &chain(10 + v as u8)));
        sync_once(&DirRemote::new(&remote), &store).await.unwrap();
    }
    assert_eq!(store.versions().unwrap(), vec![1, 2, 3, 4]);

    let report = store.gc(2).unwrap();
    assert_eq!(report.kept_versions, vec![3, 4]);
    assert_eq!(report.removed_versions, vec![1, 2]);
    assert_eq!(report.removed_objects, 2);
    assert_eq!(report.freed_bytes, 2 * 70_000);
    assert_eq!(store.versions().unwrap(), vec![3, 4]);
    for m in &manifests[..2] {
        assert!(!store.has_object(&m.by_role(AssetRole::Kernel).unwrap().digest));
    }
    assert!(store.verify_active().unwrap().ok);
    assert!(store.snapshot_at(3).unwrap().read_asset("vmlinuz", 0, 10).is_ok());
    assert!(matches!(store.snapshot_at(1), Err(StoreError::UnknownVersion(1))));

    // keep 0 still leaves the active version.
    assert_eq!(store.gc(0).unwrap().kept_versions, vec![4]);
    assert!(store.verify_active().unwrap().ok);
}

#[tokio::test]
async fn second_writer_is_refused_while_locked() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    let lock = store.lock().unwrap();
    assert!(matches!(
        sync_once(&DirRemote::new(&remote), &store).await,
        Err(SyncError::Store(StoreError::SyncInProgress(_)))
    ));
    assert!(matches!(store.gc(1), Err(StoreError::SyncInProgress(_))));
    drop(lock);
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn readers_keep_their_version_during_sync() {
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = Arc::new(AssetStore::init(dir.path().join("store")).unwrap());
    sync_once(&DirRemote::new(&remote), &store).await.unwrap();
    publish(&remote, 2, &chain(9));

    let syncing = {
        let (store, remote) = (store.clone(), remote.clone());
        tokio::spawn(async move {
            let slow = CountingRemote { chunk_delay: Some(Duration::from_millis(20)), ..CountingRemote::new(&remote) };
            sync_once(&slow, &store).await
        })
    };
    let expect = fill(70_000, 2);
    let mut reads = 0;
    while !syncing.is_finished() {
        // Every snapshot taken before activation is v1; the one held across
        // the switch keeps reading v1 too.
        let snap = store.open_snapshot().unwrap();
        let got = snap.read_asset("vmlinuz", 0, 70_000).unwrap();
        if snap.version() == 1 {
            assert_eq!(got, expect);
        }
        reads += 1;
        tokio::time::sleep(Duration::from_millis(2)).await;
    }
    assert!(reads > 1);
    assert_eq!(syncing.await.unwrap().unwrap().new_version, Some(2));
    let held = store.snapshot_at(1).unwrap();
    assert_eq!(held.read_asset("vmlinuz", 0, 70_000).unwrap(), expect);
    assert_eq!(store.open_snapshot().unwrap().read_asset("vmlinuz", 0, 70_000).unwrap(), fill(70_000, 9));
}

#[test]
fn snapshot_reads_are_bounds_checked() {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let remote = dir.path().join("remote");
    publish(&remote, 1, &chain(2));
    let store = AssetStore::init(dir.path().join("store")).unwrap();
    rt.block_on(sync_once(&DirRemote::new(&remote), &store)).unwrap();
    let snap = store.open_snapshot().unwrap();
    assert_eq!(snap.read_asset("vmlinuz", 69_990, 10).unwrap(), fill(70_000, 2)[69_990..]);
    assert!(matches!(snap.read_asset("vmlinuz", 69_991, 10), Err(StoreError::OutOfBounds { .. })));
    assert!(matches!(snap.read_asset("nope", 0, 1), Err(StoreError::UnknownPath(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever gets published comes back byte-for-byte after a sync.
    #[test]
    fn published_bytes_survive_sync(
        sizes in prop::array::uniform5(0usize..20_000),
        tags in prop::array::uniform5(any::<u8>()),
    ) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let remote = dir.path().join("remote");
        let roles = [AssetRole::Bootloader, AssetRole::Config, AssetRole::Kernel, AssetRole::Initrd, AssetRole::Image];
        let assets: Vec<PublishedAsset> = roles
            .iter()
            .enumerate()
            .map(|(i, &role)| asset(&format!("a/{i}"), role, fill(sizes[i], tags[i])))
            .collect();
        publish(&remote, 1, &assets);
        let store = AssetStore::init(dir.path().join("store")).unwrap();
        rt.block_on(sync_once(&DirRemote::new(&remote), &store)).unwrap();
        let snap = store.open_snapshot().unwrap();
        for a in &assets {
            prop_assert_eq!(snap.read_asset(&a.path, 0, a.bytes.len() as u64).unwrap(), a.bytes.to_vec());
        }
        prop_assert!(store.verify_active().unwrap().ok);
    }
}
