use bytes::Bytes;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asset_store::{AssetRole, PublishedAsset};

pub const BIOS_BOOTFILE: &str = "pxelinux.0";
pub const UEFI_BOOTFILE: &str = "bootx64.efi";
pub const CONFIG_PATH: &str = "pxelinux.cfg/default";
pub const KERNEL_PATH: &str = "vmlinuz";
pub const INITRD_PATH: &str = "initrd.img";
pub const IMAGE_PATH: &str = "os-image.sqfs";

const KIB: u64 = 1024;
const MIB: u64 = 1024 * KIB;

/// Sizes of the generated boot chain, in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetSizes {
    pub bootloader: u64,
    pub config: u64,
    pub kernel: u64,
    pub initrd: u64,
    pub image: u64,
}

impl Default for AssetSizes {
    fn default() -> Self {
        AssetSizes { bootloader: 64 * KIB, config: KIB, kernel: 8 * MIB, initrd: 16 * MIB, image: 64 * MIB }
    }
}

impl AssetSizes {
    /// Small enough that lossy runs with many retransmits stay quick.
    pub fn small() -> Self {
        AssetSizes { bootloader: 16 * KIB, config: KIB, kernel: 96 * KIB, initrd: 160 * KIB, image: 2 * MIB }
    }
}

/// Seeded byte stream; `stream` separates the assets of one seed.
pub fn synthetic_bytes(len: u64, seed: u64, stream: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut out = vec![0u8; len as usize];
    rng.fill_bytes(&mut out);
    out
}

/// pxelinux-style config naming the kernel, initrd and image URL, padded
/// with comment lines to exactly `len` bytes when `len` allows it.
pub fn boot_config_text(image_url: &str, len: u64) -> String {
    let mut text = format!(
        "DEFAULT colaboot\nLABEL colaboot\n  KERNEL {KERNEL_PATH}\n  APPEND initrd={INITRD_PATH} colaboot.image={image_url}\n"
    );
    let len = len as usize;
    while text.len() < len {
        let room = len - text.len();
        if room < 2 {
            text.push('\n');
            continue;
        }
        let n = (room - 2).min(71);
        text.push('#');
        text.extend(std::iter::repeat_n('-', n));
        text.push('\n');
    }
    text
}

/// The full boot chain for one version. `image_url` is the URL the image
/// is served from, written into the config's kernel command line.
pub fn synthetic_assets(sizes: AssetSizes, seed: u64, image_url: &str) -> Vec<PublishedAsset> {
    let gen = |path: &str, role, len, stream| PublishedAsset {
        path: path.into(),
        role,
        bytes: Bytes::from(synthetic_bytes(len, seed, stream)),
    };
    vec![
        gen(BIOS_BOOTFILE, AssetRole::Bootloader, sizes.bootloader, 1),
        gen(UEFI_BOOTFILE, AssetRole::Bootloader, sizes.bootloader, 2),
        PublishedAsset {
            path: CONFIG_PATH.into(),
            role: AssetRole::Config,
            bytes: Bytes::from(boot_config_text(image_url, sizes.config)),
        },
        gen(KERNEL_PATH, AssetRole::Kernel, sizes.kernel, 3),
        gen(INITRD_PATH, AssetRole::Initrd, sizes.initrd, 4),
        gen(IMAGE_PATH, AssetRole::Image, sizes.image, 5),
    ]
}

/// What the bootloader takes from its config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootEntry {
    pub kernel: String,
    pub initrd: String,
    pub image_url: String,
}

/// Reads the first KERNEL and APPEND lines of a pxelinux config.
pub fn parse_boot_config(text: &str) -> Option<BootEntry> {
    let mut kernel = None;
    let mut append = None;
    for line in text.lines().map(str::trim) {
        let Some((word, rest)) = line.split_once(char::is_whitespace) else { continue };
        match word.to_ascii_uppercase().as_str() {
            "KERNEL" | "LINUX" if kernel.is_none() => kernel = Some(rest.trim().to_string()),
            "APPEND" if append.is_none() => append = Some(rest.trim().to_string()),
            _ => {}
        }
    }
    let append = append?;
    let arg = |key: &str| append.split_whitespace().find_map(|a| a.strip_prefix(key)).map(str::to_string);
    Some(BootEntry { kernel: kernel?, initrd: arg("initrd=")?, image_url: arg("colaboot.image=")? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asset_store::Digest;

    #[test]
    fn default_sizes() {
        let s = AssetSizes::default();
        assert_eq!((s.bootloader, s.config, s.kernel, s.initrd, s.image), (65_536, 1024, 8_388_608, 16_777_216, 67_108_864));
    }

    #[test]
    fn generation_is_seeded() {
        let a = synthetic_assets(AssetSizes::small(), 9, "http://h/x");
        let b = synthetic_assets(AssetSizes::small(), 9, "http://h/x");
        let c = synthetic_assets(AssetSizes::small(), 10, "http://h/x");
        for ((x, y), z) in a.iter().zip(&b).zip(&c) {
            assert_eq!(Digest::of(&x.bytes), Digest::of(&y.bytes));
            if x.role != AssetRole::Config {
                assert_ne!(Digest::of(&x.bytes), Digest::of(&z.bytes));
            }
        }
        // Streams keep same-sized assets distinct.
        assert_ne!(a[0].bytes, a[1].bytes);
        assert_eq!(a[5].bytes.len(), 2 * 1024 * 1024);
    }

    #[test]
    fn config_pads_to_size_and_parses_back() {
        for len in [0u64, 100, 130, 131, 1024, 4096] {
            let url = "http://127.0.0.1:8080/assets/os-image.sqfs";
            let text = boot_config_text(url, len);
            assert!(text.len() as u64 >= len);
            if len as usize >= boot_config_text(url, 0).len() {
                assert_eq!(text.len() as u64, len, "{len}");
            }
            let entry = parse_boot_config(&text).unwrap();
            assert_eq!(entry, BootEntry { kernel: "vmlinuz".into(), initrd: "initrd.img".into(), image_url: url.into() });
        }
    }

    #[test]
    fn config_parser_rejects_incomplete() {
        assert!(parse_boot_config("KERNEL vmlinuz\n").is_none());
        assert!(parse_boot_config("APPEND initrd=a colaboot.image=b\n").is_none());
        assert!(parse_boot_config("KERNEL k\nAPPEND quiet\n").is_none());
        let e = parse_boot_config("label x\n  linux k2\n  append root=/dev/nfs initrd=i2 colaboot.image=u\n").unwrap();
        assert_eq!((e.kernel.as_str(), e.initrd.as_str(), e.image_url.as_str()), ("k2", "i2", "u"));
    }
}
