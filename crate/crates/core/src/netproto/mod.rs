//! Wire formats spoken by the boot services.
//!
//! Everything in here is a pure function over byte slices: DHCP (RFC 2131
//! layout, RFC 2132 options) and TFTP (RFC 1350 with the RFC 2347/2348/2349
//! option extensions). The servers and the simulated client share these
//! codecs, so a bug here shows up on both ends of every loopback test.

mod arch;
mod dhcp;
mod mac;
mod tftp;

pub use arch::{ArchClass, ClientArch};
pub use dhcp::{
    is_pxe_client, opt, BootOp, DhcpDecodeError, DhcpEncodeError, DhcpMessage, DhcpOption,
    MessageType, DHCP_MIN_LEN, MAGIC_COOKIE, PXE_CLIENT_PREFIX,
};
pub use mac::{MacAddr, ParseMacError};
pub use tftp::{
    Opcode, TftpDecodeError, TftpEncodeError, TftpErrorCode, TftpOption, TftpPacket,
    TftpRequest, BLKSIZE_MAX, BLKSIZE_MIN, DEFAULT_BLKSIZE,
};
