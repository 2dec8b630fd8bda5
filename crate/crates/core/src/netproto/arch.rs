use serde::{Deserialize, Serialize};

/// Client system architecture as announced in DHCP option 93.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClientArch {
    pub code: u16,
}

/// Boot firmware family, which decides the bootfile we hand out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchClass {
    LegacyBios,
    UefiX64,
    UefiIa32,
    Unknown,
}

impl ClientArch {
    pub const LEGACY_BIOS: ClientArch = ClientArch { code: 0 };
    pub const UEFI_X64: ClientArch = ClientArch { code: 7 };

    pub fn new(code: u16) -> Self {
        ClientArch { code }
    }

    /// Parses the payload of option 93. The option may list several
    /// architectures; the first one is the one the firmware is running.
    pub fn from_option(payload: &[u8]) -> Option<Self> {
        match payload {
            [hi, lo, ..] => Some(ClientArch::new(u16::from_be_bytes([*hi, *lo]))),
            _ => None,
        }
    }

    pub fn to_option(self) -> [u8; 2] {
        self.code.to_be_bytes()
    }

    pub fn class(self) -> ArchClass {
        match self.code {
            0 => ArchClass::LegacyBios,
            6 => ArchClass::UefiIa32,
            7 | 9 => ArchClass::UefiX64,
            _ => ArchClass::Unknown,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_mapping() {
        assert_eq!(ClientArch::new(0).class(), ArchClass::LegacyBios);
        assert_eq!(ClientArch::new(6).class(), ArchClass::UefiIa32);
        assert_eq!(ClientArch::new(7).class(), ArchClass::UefiX64);
        assert_eq!(ClientArch::new(9).class(), ArchClass::UefiX64);
        for code in [1u16, 2, 5, 8, 10, 16, 0xffff] {
            assert_eq!(ClientArch::new(code).class(), ArchClass::Unknown, "code {code}");
        }
    }

    #[test]
    fn option_payload() {
        assert_eq!(ClientArch::from_option(&[0, 7]), Some(ClientArch::UEFI_X64));
        assert_eq!(ClientArch::from_option(&[0, 0, 0, 7]), Some(ClientArch::LEGACY_BIOS));
        assert_eq!(ClientArch::from_option(&[7]), None);
    }
}
