//! Deployment artifacts for a boot server host: firewall rules, an
//! installer script for the CIFS share, and the server config file.
//!
//! Everything here is text generation. Nothing is executed.

use std::fmt::{self, Write as _};
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netproto::ArchClass;

pub const DHCP_PORTS: [u16; 2] = [67, 68];
pub const TFTP_PORT: u16 = 69;
pub const CIFS_PORTS: [u16; 4] = [137, 138, 139, 445];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeployError {
    #[error("unsupported script dialect {0:?} (expected windows_batch or posix_shell)")]
    UnsupportedDialect(String),
    #[error("no bootfile given for {0:?}")]
    MissingBootfile(ArchClass),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptDialect {
    WindowsBatch,
    PosixShell,
}

impl FromStr for ScriptDialect {
    type Err = DeployError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "windows_batch" => Ok(ScriptDialect::WindowsBatch),
            "posix_shell" => Ok(ScriptDialect::PosixShell),
            other => Err(DeployError::UnsupportedDialect(other.into())),
        }
    }
}

impl ScriptDialect {
    pub fn script_name(self) -> &'static str {
        match self {
            ScriptDialect::WindowsBatch => "install.bat",
            ScriptDialect::PosixShell => "install.sh",
        }
    }

    fn default_store_root(self) -> &'static str {
        match self {
            ScriptDialect::WindowsBatch => r"C:\colaboot\store",
            ScriptDialect::PosixShell => "/srv/colaboot/store",
        }
    }
}

/// Bootloader file names per firmware family.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootAssets {
    pub bios: Option<String>,
    pub uefi: Option<String>,
    pub uefi_ia32: Option<String>,
}

fn default_image_port() -> u16 {
    8080
}

fn default_user() -> String {
    "colaboot".into()
}

/// Read from the `--profile` TOML file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployProfile {
    pub server_ip: Ipv4Addr,
    #[serde(default = "default_image_port")]
    pub image_port: u16,
    #[serde(default = "default_user")]
    pub cifs_user: String,
    /// Kept as text so an unknown dialect surfaces as UnsupportedDialect
    /// when a script is generated, not as a parse error.
    pub target_os: String,
    #[serde(default = "default_user")]
    pub share_name: String,
    pub store_root: Option<String>,
    pub pool_start: Option<Ipv4Addr>,
    pub pool_end: Option<Ipv4Addr>,
    pub subnet_mask: Option<Ipv4Addr>,
    pub sync_source: Option<String>,
    #[serde(default)]
    pub bootfiles: BootAssets,
}

impl DeployProfile {
    pub fn from_toml(text: &str) -> Result<Self, DeployError> {
        let p: DeployProfile = toml::from_str(text).map_err(|e| DeployError::InvalidProfile(e.message().to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// A profile with defaults for everything but the address and dialect.
    pub fn new(server_ip: Ipv4Addr, target_os: &str) -> Self {
        DeployProfile {
            server_ip,
            image_port: default_image_port(),
            cifs_user: default_user(),
            target_os: target_os.into(),
            share_name: default_user(),
            store_root: None,
            pool_start: None,
            pool_end: None,
            subnet_mask: None,
            sync_source: None,
            bootfiles: BootAssets::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DeployError> {
        let bad = |m: String| Err(DeployError::InvalidProfile(m));
        let ip = self.server_ip;
        if ip.is_unspecified() || ip.is_broadcast() || ip.is_multicast() {
            return bad(format!("server_ip {ip} is not a host address"));
        }
        for (what, name) in [("cifs_user", &self.cifs_user), ("share_name", &self.share_name)] {
            let ok = !name.is_empty()
                && name.len() <= 20
                && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-');
            if !ok {
                return bad(format!("{what} {name:?} must be 1-20 of [A-Za-z0-9_-]"));
            }
        }
        if let Some(root) = &self.store_root {
            if root.is_empty() || root.contains(['"', '\n', '\r', '%', '\'', '`', '$']) {
                return bad(format!("store_root {root:?} is empty or has characters unsafe in scripts"));
            }
        }
        if self.image_port == 0 {
            return bad("image_port must not be 0".into());
        }
        Ok(())
    }

    pub fn dialect(&self) -> Result<ScriptDialect, DeployError> {
        self.target_os.parse()
    }

    pub fn store_root(&self) -> Result<String, DeployError> {
        Ok(match &self.store_root {
            Some(r) => r.clone(),
            None => self.dialect()?.default_store_root().into(),
        })
    }

    /// (start, end, mask): as given, or .100-.199 of the server's /24.
    pub fn pool(&self) -> Result<(Ipv4Addr, Ipv4Addr, Ipv4Addr), DeployError> {
        let o = self.server_ip.octets();
        let start = self.pool_start.unwrap_or(Ipv4Addr::new(o[0], o[1], o[2], 100));
        let end = self.pool_end.unwrap_or(Ipv4Addr::new(o[0], o[1], o[2], 199));
        let mask = self.subnet_mask.unwrap_or(Ipv4Addr::new(255, 255, 255, 0));
        if u32::from(start) > u32::from(end) {
            return Err(DeployError::InvalidProfile(format!("pool_start {start} is above pool_end {end}")));
        }
        if (u32::from(start)..=u32::from(end)).contains(&u32::from(self.server_ip)) {
            return Err(DeployError::InvalidProfile(format!("pool {start}-{end} contains server_ip")));
        }
        Ok((start, end, mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FirewallRule {
    pub protocol: Protocol,
    pub port: u16,
    pub service: &'static str,
}

/// One inbound-allow rule per (protocol, port), in a fixed order.
pub fn firewall_rules(profile: &DeployProfile) -> Vec<FirewallRule> {
    let rule = |protocol, port, service| FirewallRule { protocol, port, service };
    let mut rules = vec![
        rule(Protocol::Udp, DHCP_PORTS[0], "dhcp"),
        rule(Protocol::Udp, DHCP_PORTS[1], "dhcp"),
        rule(Protocol::Udp, TFTP_PORT, "tftp"),
    ];
    for port in CIFS_PORTS {
        rules.push(rule(Protocol::Tcp, port, "cifs"));
        rules.push(rule(Protocol::Udp, port, "cifs"));
    }
    rules.push(rule(Protocol::Tcp, profile.image_port, "image"));
    rules
}

/// The rules as commands for the profile's platform.
pub fn generate_firewall_rules(profile: &DeployProfile) -> Result<String, DeployError> {
    let dialect = profile.dialect()?;
    let mut out = String::new();
    for r in firewall_rules(profile) {
        let line = match dialect {
            ScriptDialect::WindowsBatch => format!(
                "netsh advfirewall firewall add rule name=\"colaboot {svc} {p} {port}\" dir=in action=allow protocol={p} localport={port}\r\n",
                svc = r.service,
                p = r.protocol,
                port = r.port,
            ),
            ScriptDialect::PosixShell => format!(
                "iptables -A INPUT -p {p} --dport {port} -m comment --comment \"colaboot {svc}\" -j ACCEPT\n",
                p = r.protocol.to_string().to_lowercase(),
                port = r.port,
                svc = r.service,
            ),
        };
        out.push_str(&line);
    }
    Ok(out)
}

/// Installer: enable SMB/CIFS, create the share user, share the store
/// root, start the file-sharing service.
pub fn generate_installer_script(profile: &DeployProfile) -> Result<String, DeployError> {
    profile.validate()?;
    let root = profile.store_root()?;
    let (user, share, ip) = (&profile.cifs_user, &profile.share_name, profile.server_ip);
    let text = match profile.dialect()? {
        ScriptDialect::WindowsBatch => format!(
            r#"@echo off
REM colaboot boot server setup for {ip}
REM Run from an elevated command prompt.
setlocal

echo [1/4] Enabling SMB 1.0/CIFS file sharing support
dism /online /norestart /enable-feature /all /featurename:SMB1Protocol
if errorlevel 1 goto fail

echo [2/4] Creating share user {user}
net user {user} * /add /passwordchg:no /expires:never
if errorlevel 1 goto fail

echo [3/4] Sharing {root} as {share}
if not exist "{root}" mkdir "{root}"
net share {share}="{root}" /grant:{user},READ
if errorlevel 1 goto fail

echo [4/4] Starting the file sharing service
sc config lanmanserver start= auto
net start lanmanserver

echo Done.
exit /b 0

:fail
echo Setup failed at the step above.
exit /b 1
"#
        )
        .replace('\n', "\r\n"),
        ScriptDialect::PosixShell => format!(
            r#"#!/bin/sh
# colaboot boot server setup for {ip}
# Run as root.
set -eu

echo "[1/4] Installing SMB/CIFS support"
if command -v apt-get >/dev/null 2>&1; then
    apt-get install -y samba cifs-utils
elif command -v dnf >/dev/null 2>&1; then
    dnf install -y samba cifs-utils
else
    echo "no supported package manager" >&2
    exit 1
fi
grep -q '^[[:space:]]*server min protocol' /etc/samba/smb.conf ||
    sed -i '/^\[global\]/a\   server min protocol = NT1' /etc/samba/smb.conf

echo "[2/4] Creating share user {user}"
id -u {user} >/dev/null 2>&1 || useradd --system --no-create-home --shell /usr/sbin/nologin {user}
smbpasswd -a {user}

echo "[3/4] Sharing {root} as {share}"
mkdir -p '{root}'
cat >>/etc/samba/smb.conf <<'EOF'

[{share}]
   path = {root}
   read only = yes
   valid users = {user}
EOF

echo "[4/4] Starting the file sharing service"
systemctl enable --now smbd

echo "Done."
"#
        ),
    };
    Ok(text)
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

/// The config file for `colaboot serve`.
pub fn generate_server_config(profile: &DeployProfile, assets: &BootAssets) -> Result<String, DeployError> {
    profile.validate()?;
    let bios = assets.bios.as_deref().filter(|s| !s.is_empty()).ok_or(DeployError::MissingBootfile(ArchClass::LegacyBios))?;
    let uefi = assets.uefi.as_deref().filter(|s| !s.is_empty()).ok_or(DeployError::MissingBootfile(ArchClass::UefiX64))?;
    let (start, end, mask) = profile.pool()?;
    let ip = profile.server_ip;

    let mut out = String::new();
    let _ = writeln!(out, "# colaboot server configuration for {ip}");
    let _ = writeln!(out, "bind_address = \"{ip}\"");
    let _ = writeln!(out, "next_server = \"{ip}\"");
    let _ = writeln!(out, "router = \"{ip}\"");
    let _ = writeln!(out, "image_port = {}", profile.image_port);
    let _ = writeln!(out);
    let _ = writeln!(out, "pool_start = \"{start}\"");
    let _ = writeln!(out, "pool_end = \"{end}\"");
    let _ = writeln!(out, "subnet_mask = \"{mask}\"");
    let _ = writeln!(out);
    let _ = writeln!(out, "bootfile_bios = {}", toml_str(bios));
    let _ = writeln!(out, "bootfile_uefi = {}", toml_str(uefi));
    if let Some(ia32) = assets.uefi_ia32.as_deref().filter(|s| !s.is_empty()) {
        let _ = writeln!(out, "bootfile_uefi_ia32 = {}", toml_str(ia32));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "store_root = {}", toml_str(&profile.store_root()?));
    if let Some(src) = &profile.sync_source {
        let _ = writeln!(out, "sync_source = {}", toml_str(src));
    }
    Ok(out)
}
