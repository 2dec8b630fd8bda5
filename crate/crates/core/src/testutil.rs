//! Builders shared by unit tests.

use std::path::Path;

use bytes::Bytes;
use chrono::{TimeZone, Utc};

use crate::asset_store::{publish_directory, sync_once, AssetRole, AssetStore, DirRemote, PublishedAsset};

pub fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u32).wrapping_mul(2_654_435_761).to_le_bytes()[0] ^ seed).collect()
}

pub fn minimal_assets(seed: u8) -> Vec<PublishedAsset> {
    let mk = |path: &str, role, len| PublishedAsset { path: path.into(), role, bytes: Bytes::from(pattern(len, seed)) };
    vec![
        mk("pxelinux.0", AssetRole::Bootloader, 3000),
        mk("vmlinuz", AssetRole::Kernel, 5000),
        mk("initrd.img", AssetRole::Initrd, 7000),
        mk("os-image.sqfs", AssetRole::Image, 20_000),
    ]
}

/// Publishes `assets` as `version` under `remote` and syncs it into `store`.
pub fn publish_and_sync(remote: &Path, store: &AssetStore, version: u64, assets: &[PublishedAsset]) {
    let created = Utc.with_ymd_and_hms(2024, 5, 1, 12, 0, 0).unwrap();
    publish_directory(remote, version, created, assets).unwrap();
    // Own thread so this also works from inside an async test.
    std::thread::scope(|s| {
        s.spawn(|| {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(sync_once(&DirRemote::new(remote), store)).unwrap();
        });
    });
}

/// A fresh store under `dir` with `minimal_assets(1)` active as version 1.
pub fn populated_store(dir: &Path) -> AssetStore {
    let store = AssetStore::init(dir.join("store")).unwrap();
    publish_and_sync(&dir.join("remote"), &store, 1, &minimal_assets(1));
    store
}
