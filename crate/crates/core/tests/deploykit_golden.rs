//! Generated deployment files compared byte-for-byte with checked-in
//! copies. Set UPDATE_GOLDEN=1 to rewrite them after an intended change.

use std::path::{Path, PathBuf};

use colaboot_core::config::ServerConfig;
use colaboot_core::deploykit::{
    generate_firewall_rules, generate_installer_script, generate_server_config, DeployProfile,
};

const PROFILE_WINDOWS: &str = r#"
server_ip = "192.168.10.1"
target_os = "windows_batch"
cifs_user = "bootshare"
image_port = 8080

[bootfiles]
bios = "pxelinux.0"
uefi = "bootx64.efi"
"#;

const PROFILE_POSIX: &str = r#"
server_ip = "10.20.0.2"
target_os = "posix_shell"
image_port = 8088
store_root = "/srv/netboot/store"
pool_start = "10.20.0.50"
pool_end = "10.20.0.250"
sync_source = "/mnt/shared-drive/colaboot"

[bootfiles]
bios = "pxelinux.0"
uefi = "syslinux.efi"
uefi_ia32 = "syslinux32.efi"
"#;

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn check(name: &str, actual: &str) {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} differs from its golden copy");
}

fn all_for(tag: &str, profile_text: &str) {
    let p = DeployProfile::from_toml(profile_text).unwrap();
    let script = generate_installer_script(&p).unwrap();
    let ext = if tag == "windows" { "bat" } else { "sh" };
    check(&format!("{tag}_install.{ext}"), &script);
    check(&format!("{tag}_firewall.txt"), &generate_firewall_rules(&p).unwrap());
    let config = generate_server_config(&p, &p.bootfiles).unwrap();
    check(&format!("{tag}_colaboot.toml"), &config);

    let loaded = ServerConfig::from_parts(&config, std::iter::empty(), Path::new("/")).unwrap();
    assert_eq!(loaded.dhcp.boot.next_server, p.server_ip);
    assert_eq!(loaded.image_port, p.image_port);
}

#[test]
fn windows_profile_matches_golden() {
    all_for("windows", PROFILE_WINDOWS);
}

#[test]
fn posix_profile_matches_golden() {
    all_for("posix", PROFILE_POSIX);
}
