//! Server configuration: a flat TOML file overlaid with `COLABOOT_<KEY>`
//! environment variables, validated before anything binds.

use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

use crate::dhcp_server::{BootConfig, DhcpSettings, Ipv4Range, OFFER_HOLD};
use crate::netproto::{ArchClass, BLKSIZE_MAX, BLKSIZE_MIN};
use crate::tftp_server::TftpPolicy;

pub const ENV_PREFIX: &str = "COLABOOT_";
/// Variables with the prefix that are read by the CLI, not the config.
pub const RESERVED_ENV: &[&str] = &["COLABOOT_CONFIG", "COLABOOT_LOG"];
pub const DEFAULT_IMAGE_URL: &str = "http://{server}:{port}/assets/{path}";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Str,
    Int,
    Bool,
    StrList,
}

/// Every accepted key and how its environment override is parsed.
const KEYS: &[(&str, Kind)] = &[
    ("bind_address", Kind::Str),
    ("dhcp_bind_address", Kind::Str),
    ("dhcp_port", Kind::Int),
    ("tftp_port", Kind::Int),
    ("image_port", Kind::Int),
    ("pool_start", Kind::Str),
    ("pool_end", Kind::Str),
    ("subnet_mask", Kind::Str),
    ("router", Kind::Str),
    ("dns", Kind::StrList),
    ("next_server", Kind::Str),
    ("bootfile_bios", Kind::Str),
    ("bootfile_uefi", Kind::Str),
    ("bootfile_uefi_ia32", Kind::Str),
    ("lease_seconds", Kind::Int),
    ("pxe_only", Kind::Bool),
    ("image_url_template", Kind::Str),
    ("tftp_blksize_max", Kind::Int),
    ("tftp_timeout_ms", Kind::Int),
    ("tftp_retries", Kind::Int),
    ("store_root", Kind::Str),
    ("sync_source", Kind::Str),
    ("sync_interval_seconds", Kind::Int),
    ("event_log", Kind::Str),
];

pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|(k, _)| *k)
}

pub fn env_var_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase())
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(String),
    #[error("{var}: {reason}")]
    Env { var: String, reason: String },
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Raw {
    bind_address: Option<String>,
    dhcp_bind_address: Option<String>,
    dhcp_port: Option<i64>,
    tftp_port: Option<i64>,
    image_port: Option<i64>,
    pool_start: Option<String>,
    pool_end: Option<String>,
    subnet_mask: Option<String>,
    router: Option<String>,
    dns: Option<Vec<String>>,
    next_server: Option<String>,
    bootfile_bios: Option<String>,
    bootfile_uefi: Option<String>,
    bootfile_uefi_ia32: Option<String>,
    lease_seconds: Option<i64>,
    pxe_only: Option<bool>,
    image_url_template: Option<String>,
    tftp_blksize_max: Option<i64>,
    tftp_timeout_ms: Option<i64>,
    tftp_retries: Option<i64>,
    store_root: Option<String>,
    sync_source: Option<String>,
    sync_interval_seconds: Option<i64>,
    event_log: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    /// The server's static address; TFTP and HTTP listen here.
    pub bind_address: Ipv4Addr,
    /// DHCP must see broadcasts, so by default it listens on all interfaces.
    pub dhcp_bind_address: Ipv4Addr,
    pub dhcp_port: u16,
    pub tftp_port: u16,
    pub image_port: u16,
    pub dhcp: DhcpSettings,
    pub tftp: TftpPolicy,
    pub store_root: PathBuf,
    pub sync_source: Option<String>,
    pub sync_interval: Duration,
    pub event_log: Option<PathBuf>,
}

impl ServerConfig {
    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_parts(&text, std::env::vars(), base)
    }

    /// Parses `text`, overlays matching `COLABOOT_*` pairs from `env`, and
    /// validates. Relative paths resolve against `base_dir`.
    pub fn from_parts(
        text: &str,
        env: impl IntoIterator<Item = (String, String)>,
        base_dir: &Path,
    ) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let env: BTreeMap<String, String> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !RESERVED_ENV.contains(&k.as_str()))
            .collect();
        for (key, kind) in KEYS {
            let var = env_var_name(key);
            if let Some(raw) = env.get(&var) {
                table.insert((*key).to_string(), env_value(&var, raw, *kind)?);
            }
        }
        if let Some(var) = env.keys().find(|v| !KEYS.iter().any(|(k, _)| env_var_name(k) == **v)) {
            return Err(ConfigError::Env { var: var.clone(), reason: "not a configuration key".into() });
        }
        let raw: Raw = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        raw.validate(base_dir)
    }

    /// Image URL handed to clients, with `{path}` left for the client.
    pub fn image_url(&self, actual_port: u16) -> String {
        self.dhcp
            .boot
            .image_url_template
            .replace("{server}", &self.dhcp.boot.next_server.to_string())
            .replace("{port}", &actual_port.to_string())
    }
}

fn env_value(var: &str, raw: &str, kind: Kind) -> Result<toml::Value, ConfigError> {
    let bad = |reason: &str| ConfigError::Env { var: var.into(), reason: reason.into() };
    Ok(match kind {
        Kind::Str => toml::Value::String(raw.into()),
        Kind::Int => toml::Value::Integer(raw.trim().parse().map_err(|_| bad("expected an integer"))?),
        Kind::Bool => toml::Value::Boolean(match raw.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => true,
            "0" | "false" | "no" | "off" => false,
            _ => return Err(bad("expected true or false")),
        }),
        Kind::StrList => toml::Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| toml::Value::String(s.into()))
                .collect(),
        ),
    })
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key, reason: reason.into() }
}

fn ipv4(key: &'static str, v: Option<String>) -> Result<Option<Ipv4Addr>, ConfigError> {
    v.map(|s| s.trim().parse::<Ipv4Addr>().map_err(|_| invalid(key, format!("{s:?} is not an IPv4 address"))))
        .transpose()
}

fn required<T>(key: &'static str, v: Option<T>) -> Result<T, ConfigError> {
    v.ok_or_else(|| invalid(key, "missing"))
}

fn int_in(key: &'static str, v: Option<i64>, default: i64, lo: i64, hi: i64) -> Result<i64, ConfigError> {
    let v = v.unwrap_or(default);
    if !(lo..=hi).contains(&v) {
        return Err(invalid(key, format!("{v} is outside {lo}..={hi}")));
    }
    Ok(v)
}

fn non_empty(key: &'static str, v: Option<String>) -> Result<Option<String>, ConfigError> {
    match v {
        Some(s) if s.trim().is_empty() => Err(invalid(key, "must not be empty")),
        other => Ok(other),
    }
}

impl Raw {
    fn validate(self, base_dir: &Path) -> Result<ServerConfig, ConfigError> {
        let bind_address = required("bind_address", ipv4("bind_address", self.bind_address)?)?;
        if bind_address.is_unspecified() || bind_address.is_broadcast() {
            return Err(invalid("bind_address", "must be the server's static address"));
        }
        let dhcp_bind_address = ipv4("dhcp_bind_address", self.dhcp_bind_address)?.unwrap_or(Ipv4Addr::UNSPECIFIED);
        let port = |key, v| int_in(key, v, 0, 0, 65535).map(|p| p as u16);
        let dhcp_port = if self.dhcp_port.is_some() { port("dhcp_port", self.dhcp_port)? } else { 67 };
        let tftp_port = if self.tftp_port.is_some() { port("tftp_port", self.tftp_port)? } else { 69 };
        let image_port = if self.image_port.is_some() { port("image_port", self.image_port)? } else { 8080 };

        let pool_start = required("pool_start", ipv4("pool_start", self.pool_start)?)?;
        let pool_end = required("pool_end", ipv4("pool_end", self.pool_end)?)?;
        let pool = Ipv4Range::new(pool_start, pool_end)
            .ok_or_else(|| invalid("pool_end", format!("{pool_end} is below pool_start {pool_start}")))?;
        let subnet_mask = required("subnet_mask", ipv4("subnet_mask", self.subnet_mask)?)?;
        let m = u32::from(subnet_mask);
        if m.leading_ones() + m.trailing_zeros() != 32 {
            return Err(invalid("subnet_mask", format!("{subnet_mask} is not a contiguous mask")));
        }
        let router = ipv4("router", self.router)?.unwrap_or(bind_address);
        let dns = self
            .dns
            .unwrap_or_default()
            .into_iter()
            .map(|s| s.trim().parse::<Ipv4Addr>().map_err(|_| invalid("dns", format!("{s:?} is not an IPv4 address"))))
            .collect::<Result<Vec<_>, _>>()?;
        let next_server = ipv4("next_server", self.next_server)?.unwrap_or(bind_address);

        let mut files = BTreeMap::new();
        files.insert(ArchClass::LegacyBios, required("bootfile_bios", non_empty("bootfile_bios", self.bootfile_bios)?)?);
        files.insert(ArchClass::UefiX64, required("bootfile_uefi", non_empty("bootfile_uefi", self.bootfile_uefi)?)?);
        if let Some(f) = non_empty("bootfile_uefi_ia32", self.bootfile_uefi_ia32)? {
            files.insert(ArchClass::UefiIa32, f);
        }
        let template = non_empty("image_url_template", self.image_url_template)?.unwrap_or_else(|| DEFAULT_IMAGE_URL.into());
        if !template.contains("{path}") {
            return Err(invalid("image_url_template", "must contain {path}"));
        }
        let boot = BootConfig::new(next_server, files, template).map_err(|e| invalid("bootfile_bios", e.to_string()))?;

        let lease_seconds = int_in("lease_seconds", self.lease_seconds, 3600, 1, u32::MAX as i64)?;
        let blksize_max = int_in(
            "tftp_blksize_max",
            self.tftp_blksize_max,
            1428,
            i64::from(BLKSIZE_MIN),
            i64::from(BLKSIZE_MAX),
        )?;
        let timeout_ms = int_in("tftp_timeout_ms", self.tftp_timeout_ms, 1000, 1, 255_000)?;
        let retries = int_in("tftp_retries", self.tftp_retries, 5, 0, 100)?;
        let timeout = Duration::from_millis(timeout_ms as u64);

        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base_dir.join(p) }
        };
        let store_root = resolve(required("store_root", non_empty("store_root", self.store_root)?)?);
        let sync_source = non_empty("sync_source", self.sync_source)?;
        let sync_interval = Duration::from_secs(int_in("sync_interval_seconds", self.sync_interval_seconds, 300, 1, 86_400 * 365)? as u64);
        let event_log = non_empty("event_log", self.event_log)?.map(resolve);

        Ok(ServerConfig {
            bind_address,
            dhcp_bind_address,
            dhcp_port,
            tftp_port,
            image_port,
            dhcp: DhcpSettings {
                server_id: bind_address,
                pool,
                subnet_mask,
                router,
                dns,
                lease_time: Duration::from_secs(lease_seconds as u64),
                offer_hold: OFFER_HOLD,
                pxe_only: self.pxe_only.unwrap_or(false),
                boot,
            },
            tftp: TftpPolicy {
                blksize_max: blksize_max as u16,
                timeout,
                max_timeout: Duration::from_secs(8).max(timeout),
                retries: retries as u32,
            },
            store_root,
            sync_source,
            sync_interval,
            event_log,
        })
    }
}

impl ServerConfig {
    pub fn bind_ip(&self) -> IpAddr {
        IpAddr::V4(self.bind_address)
    }
}
