use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use super::StoreError;

/// SHA-256 of an asset's bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl FromStr for Digest {
    type Err = StoreError;

    /// Accepts exactly 64 hex characters. Upper case is tolerated on input;
    /// output is always lower case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 {
            return Err(StoreError::DigestFieldInvalid(s.to_string()));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|_| StoreError::DigestFieldInvalid(s.to_string()))?;
        Ok(Digest(out))
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

/// Streaming SHA-256 over an asset.
#[derive(Default, Clone)]
pub struct DigestWriter {
    hasher: Sha256,
    len: u64,
}

impl DigestWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.hasher.update(bytes);
        self.len += bytes.len() as u64;
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn finish(self) -> (Digest, u64) {
        (Digest(self.hasher.finalize().into()), self.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetRole {
    Bootloader,
    Kernel,
    Initrd,
    Image,
    Config,
}

impl AssetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AssetRole::Bootloader => "bootloader",
            AssetRole::Kernel => "kernel",
            AssetRole::Initrd => "initrd",
            AssetRole::Image => "image",
            AssetRole::Config => "config",
        }
    }
}

impl fmt::Display for AssetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssetEntry {
    pub path: String,
    pub size: u64,
    pub digest: Digest,
    pub role: AssetRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssetManifest {
    pub version: u64,
    pub created_at: DateTime<Utc>,
    pub assets: Vec<AssetEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    version: u64,
    created_at: DateTime<Utc>,
    assets: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    path: String,
    size: u64,
    digest: String,
    role: AssetRole,
}

impl AssetManifest {
    /// Builds a manifest and checks its invariants.
    pub fn new(
        version: u64,
        created_at: DateTime<Utc>,
        assets: Vec<AssetEntry>,
    ) -> Result<Self, StoreError> {
        let manifest = AssetManifest { version, created_at, assets };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, StoreError> {
        let raw: RawManifest = serde_json::from_slice(bytes)
            .map_err(|e| StoreError::ManifestMalformed(e.to_string()))?;
        let assets = raw
            .assets
            .into_iter()
            .map(|e| {
                Ok(AssetEntry {
                    path: e.path,
                    size: e.size,
                    digest: e.digest.parse()?,
                    role: e.role,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Self::new(raw.version, raw.created_at, assets)
    }

    /// Canonical JSON form: two-space indentation, fields in declaration
    /// order, trailing newline.
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("manifest serializes");
        out.push(b'\n');
        out
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.version == 0 {
            return Err(StoreError::ManifestMalformed("version must be at least 1".into()));
        }
        let mut paths = HashSet::new();
        for entry in &self.assets {
            let normalized = normalize_virtual_path(&entry.path).ok_or_else(|| {
                StoreError::ManifestMalformed(format!("invalid asset path {:?}", entry.path))
            })?;
            if normalized != entry.path {
                return Err(StoreError::ManifestMalformed(format!(
                    "asset path {:?} is not in normal form",
                    entry.path
                )));
            }
            if !paths.insert(entry.path.as_str()) {
                return Err(StoreError::ManifestMalformed(format!(
                    "duplicate asset path {:?}",
                    entry.path
                )));
            }
        }
        for role in [AssetRole::Kernel, AssetRole::Initrd, AssetRole::Image] {
            let count = self.assets.iter().filter(|e| e.role == role).count();
            if count != 1 {
                return Err(StoreError::ManifestMalformed(format!(
                    "expected exactly one {role} entry, found {count}"
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, path: &str) -> Option<&AssetEntry> {
        self.assets.iter().find(|e| e.path == path)
    }

    /// The single entry for a role. For bootloaders (which may exist once
    /// per firmware family) this is the first one listed.
    pub fn by_role(&self, role: AssetRole) -> Option<&AssetEntry> {
        self.assets.iter().find(|e| e.role == role)
    }

    pub fn total_size(&self) -> u64 {
        self.assets.iter().map(|e| e.size).sum()
    }
}

/// Maps a client-supplied path onto the store's virtual namespace.
///
/// Backslashes are treated as separators and leading slashes are dropped.
/// Returns `None` for anything that would leave the root (`..`) or that has
/// empty or `.` components.
pub fn normalize_virtual_path(path: &str) -> Option<String> {
    let unified = path.replace('\\', "/");
    let trimmed = unified.trim_start_matches('/');
    if trimmed.is_empty() {
        return None;
    }
    let mut parts = Vec::new();
    for part in trimmed.split('/') {
        match part {
            "" | "." | ".." => return None,
            p if p.contains('\0') => return None,
            p => parts.push(p),
        }
    }
    Some(parts.join("/"))
}
