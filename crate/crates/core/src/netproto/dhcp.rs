// See https://tools.ietf.org/html/rfc2131 for the message layout and
// https://tools.ietf.org/html/rfc2132 for the option encoding.

use std::net::Ipv4Addr;

use super::arch::ClientArch;
use super::mac::MacAddr;

pub const MAGIC_COOKIE: [u8; 4] = [99, 130, 83, 99];
/// Shortest datagram we emit; BOOTP relays drop anything below this.
pub const DHCP_MIN_LEN: usize = 300;
pub const PXE_CLIENT_PREFIX: &[u8] = b"PXEClient";

const FIXED_LEN: usize = 236;
const OPTIONS_OFFSET: usize = FIXED_LEN + 4;

/// Option tags this crate cares about by name.
pub mod opt {
    pub const PAD: u8 = 0;
    pub const SUBNET_MASK: u8 = 1;
    pub const ROUTER: u8 = 3;
    pub const DNS: u8 = 6;
    pub const VENDOR_SPECIFIC: u8 = 43;
    pub const REQUESTED_IP: u8 = 50;
    pub const LEASE_TIME: u8 = 51;
    pub const OVERLOAD: u8 = 52;
    pub const MESSAGE_TYPE: u8 = 53;
    pub const SERVER_ID: u8 = 54;
    pub const PARAMETER_LIST: u8 = 55;
    pub const MAX_MESSAGE_SIZE: u8 = 57;
    pub const VENDOR_CLASS: u8 = 60;
    pub const CLIENT_ID: u8 = 61;
    pub const TFTP_SERVER_NAME: u8 = 66;
    pub const BOOTFILE_NAME: u8 = 67;
    pub const CLIENT_ARCH: u8 = 93;
    pub const CLIENT_NDI: u8 = 94;
    pub const CLIENT_UUID: u8 = 97;
    pub const END: u8 = 255;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootOp {
    Request = 1,
    Reply = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Discover = 1,
    Offer = 2,
    Request = 3,
    Decline = 4,
    Ack = 5,
    Nak = 6,
    Release = 7,
    Inform = 8,
}

impl MessageType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => MessageType::Discover,
            2 => MessageType::Offer,
            3 => MessageType::Request,
            4 => MessageType::Decline,
            5 => MessageType::Ack,
            6 => MessageType::Nak,
            7 => MessageType::Release,
            8 => MessageType::Inform,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhcpOption {
    pub tag: u8,
    pub payload: Vec<u8>,
}

impl DhcpOption {
    pub fn new(tag: u8, payload: impl Into<Vec<u8>>) -> Self {
        DhcpOption { tag, payload: payload.into() }
    }
}

/// A BOOTP/DHCP message. Options are kept in wire order, unknown tags
/// included, so that re-encoding reproduces what was received.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhcpMessage {
    pub op: BootOp,
    pub htype: u8,
    pub hlen: u8,
    pub hops: u8,
    pub xid: u32,
    pub secs: u16,
    pub flags: u16,
    pub ciaddr: Ipv4Addr,
    pub yiaddr: Ipv4Addr,
    /// The "next server" the client fetches its bootfile from.
    pub siaddr: Ipv4Addr,
    pub giaddr: Ipv4Addr,
    pub chaddr: [u8; 16],
    pub sname: [u8; 64],
    pub file: [u8; 128],
    pub options: Vec<DhcpOption>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DhcpDecodeError {
    #[error("datagram of {0} bytes is shorter than the fixed header and cookie")]
    Truncated(usize),
    #[error("bad magic cookie {0:02x?}")]
    BadCookie([u8; 4]),
    #[error("option area ends without an END tag")]
    UnterminatedOptions,
    #[error("invalid op code {0}")]
    InvalidOp(u8),
    #[error("message type option appears more than once")]
    DuplicateMessageType,
    #[error("option overload (52) is not supported")]
    OptionOverload,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DhcpEncodeError {
    #[error("option {tag} payload is {len} bytes; the limit is 255")]
    OversizedOption { tag: u8, len: usize },
    #[error("option tag {0} cannot be carried as an option")]
    ReservedTag(u8),
    #[error("message type option appears more than once")]
    DuplicateMessageType,
}

pub const BROADCAST_FLAG: u16 = 0x8000;

impl DhcpMessage {
    /// An empty message of the given direction with Ethernet hardware type.
    pub fn new(op: BootOp, xid: u32, mac: MacAddr) -> Self {
        let mut chaddr = [0u8; 16];
        chaddr[..6].copy_from_slice(&mac.0);
        DhcpMessage {
            op,
            htype: 1,
            hlen: 6,
            hops: 0,
            xid,
            secs: 0,
            flags: 0,
            ciaddr: Ipv4Addr::UNSPECIFIED,
            yiaddr: Ipv4Addr::UNSPECIFIED,
            siaddr: Ipv4Addr::UNSPECIFIED,
            giaddr: Ipv4Addr::UNSPECIFIED,
            chaddr,
            sname: [0; 64],
            file: [0; 128],
            options: Vec::new(),
        }
    }

    pub fn client_mac(&self) -> MacAddr {
        let mut mac = [0u8; 6];
        mac.copy_from_slice(&self.chaddr[..6]);
        MacAddr(mac)
    }

    pub fn option(&self, tag: u8) -> Option<&[u8]> {
        self.options.iter().find(|o| o.tag == tag).map(|o| o.payload.as_slice())
    }

    /// Replaces every instance of `tag` with a single option at the position
    /// of the first instance, or appends it.
    pub fn set_option(&mut self, tag: u8, payload: impl Into<Vec<u8>>) {
        let payload = payload.into();
        match self.options.iter().position(|o| o.tag == tag) {
            Some(idx) => {
                self.options[idx].payload = payload;
                let mut seen = false;
                self.options.retain(|o| {
                    if o.tag != tag {
                        return true;
                    }
                    let keep = !seen;
                    seen = true;
                    keep
                });
            }
            None => self.options.push(DhcpOption { tag, payload }),
        }
    }

    pub fn msg_type(&self) -> Option<MessageType> {
        match self.option(opt::MESSAGE_TYPE)? {
            [code] => MessageType::from_code(*code),
            _ => None,
        }
    }

    pub fn option_ipv4(&self, tag: u8) -> Option<Ipv4Addr> {
        match self.option(tag)? {
            [a, b, c, d] => Some(Ipv4Addr::new(*a, *b, *c, *d)),
            _ => None,
        }
    }

    pub fn client_arch(&self) -> Option<ClientArch> {
        self.option(opt::CLIENT_ARCH).and_then(ClientArch::from_option)
    }

    pub fn is_broadcast(&self) -> bool {
        self.flags & BROADCAST_FLAG != 0
    }

    /// The `file` field as text, up to its first NUL.
    pub fn file_name(&self) -> String {
        c_field(&self.file)
    }

    pub fn server_name(&self) -> String {
        c_field(&self.sname)
    }

    /// Stores `name` in the `file` field. Names longer than 127 bytes are
    /// truncated so the field stays NUL-terminated.
    pub fn set_file_name(&mut self, name: &str) {
        self.file = [0; 128];
        let n = name.len().min(127);
        self.file[..n].copy_from_slice(&name.as_bytes()[..n]);
    }

    pub fn set_server_name(&mut self, name: &str) {
        self.sname = [0; 64];
        let n = name.len().min(63);
        self.sname[..n].copy_from_slice(&name.as_bytes()[..n]);
    }

    pub fn decode(raw: &[u8]) -> Result<Self, DhcpDecodeError> {
        if raw.len() < OPTIONS_OFFSET {
            return Err(DhcpDecodeError::Truncated(raw.len()));
        }
        let cookie: [u8; 4] = raw[FIXED_LEN..OPTIONS_OFFSET].try_into().unwrap();
        if cookie != MAGIC_COOKIE {
            return Err(DhcpDecodeError::BadCookie(cookie));
        }
        let op = match raw[0] {
            1 => BootOp::Request,
            2 => BootOp::Reply,
            other => return Err(DhcpDecodeError::InvalidOp(other)),
        };
        let ip = |at: usize| Ipv4Addr::new(raw[at], raw[at + 1], raw[at + 2], raw[at + 3]);

        let mut options = Vec::new();
        let mut seen_type = false;
        let mut pos = OPTIONS_OFFSET;
        loop {
            let tag = *raw.get(pos).ok_or(DhcpDecodeError::UnterminatedOptions)?;
            pos += 1;
            match tag {
                opt::END => break,
                opt::PAD => continue,
                _ => {}
            }
            let len = *raw.get(pos).ok_or(DhcpDecodeError::UnterminatedOptions)? as usize;
            pos += 1;
            let payload = raw
                .get(pos..pos + len)
                .ok_or(DhcpDecodeError::UnterminatedOptions)?;
            pos += len;
            match tag {
                opt::OVERLOAD => return Err(DhcpDecodeError::OptionOverload),
                opt::MESSAGE_TYPE if seen_type => {
                    return Err(DhcpDecodeError::DuplicateMessageType)
                }
                opt::MESSAGE_TYPE => seen_type = true,
                _ => {}
            }
            options.push(DhcpOption { tag, payload: payload.to_vec() });
        }

        Ok(DhcpMessage {
            op,
            htype: raw[1],
            hlen: raw[2],
            hops: raw[3],
            xid: u32::from_be_bytes(raw[4..8].try_into().unwrap()),
            secs: u16::from_be_bytes([raw[8], raw[9]]),
            flags: u16::from_be_bytes([raw[10], raw[11]]),
            ciaddr: ip(12),
            yiaddr: ip(16),
            siaddr: ip(20),
            giaddr: ip(24),
            chaddr: raw[28..44].try_into().unwrap(),
            sname: raw[44..108].try_into().unwrap(),
            file: raw[108..236].try_into().unwrap(),
            options,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, DhcpEncodeError> {
        let mut seen_type = false;
        for o in &self.options {
            match o.tag {
                opt::PAD | opt::END => return Err(DhcpEncodeError::ReservedTag(o.tag)),
                opt::MESSAGE_TYPE if seen_type => {
                    return Err(DhcpEncodeError::DuplicateMessageType)
                }
                opt::MESSAGE_TYPE => seen_type = true,
                _ => {}
            }
            if o.payload.len() > 255 {
                return Err(DhcpEncodeError::OversizedOption { tag: o.tag, len: o.payload.len() });
            }
        }

        let options_len: usize = self.options.iter().map(|o| 2 + o.payload.len()).sum();
        let mut out = Vec::with_capacity((OPTIONS_OFFSET + options_len + 1).max(DHCP_MIN_LEN));
        out.extend_from_slice(&[self.op as u8, self.htype, self.hlen, self.hops]);
        out.extend_from_slice(&self.xid.to_be_bytes());
        out.extend_from_slice(&self.secs.to_be_bytes());
        out.extend_from_slice(&self.flags.to_be_bytes());
        for addr in [self.ciaddr, self.yiaddr, self.siaddr, self.giaddr] {
            out.extend_from_slice(&addr.octets());
        }
        out.extend_from_slice(&self.chaddr);
        out.extend_from_slice(&self.sname);
        out.extend_from_slice(&self.file);
        out.extend_from_slice(&MAGIC_COOKIE);
        for o in &self.options {
            out.push(o.tag);
            out.push(o.payload.len() as u8);
            out.extend_from_slice(&o.payload);
        }
        out.push(opt::END);
        if out.len() < DHCP_MIN_LEN {
            out.resize(DHCP_MIN_LEN, 0);
        }
        Ok(out)
    }
}

/// True iff the vendor-class identifier (option 60) starts with "PXEClient".
pub fn is_pxe_client(msg: &DhcpMessage) -> bool {
    msg.option(opt::VENDOR_CLASS)
        .is_some_and(|v| v.starts_with(PXE_CLIENT_PREFIX))
}

fn c_field(field: &[u8]) -> String {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    String::from_utf8_lossy(&field[..end]).into_owned()
}
