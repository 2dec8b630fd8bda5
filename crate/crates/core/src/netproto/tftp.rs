// RFC 1350 packet layouts, with the option extension of RFC 2347 (OACK)
// and the blksize/timeout/tsize options of RFC 2348 and RFC 2349.

pub const DEFAULT_BLKSIZE: u16 = 512;
pub const BLKSIZE_MIN: u16 = 8;
pub const BLKSIZE_MAX: u16 = 65464;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Opcode {
    Rrq = 1,
    Wrq = 2,
    Data = 3,
    Ack = 4,
    Error = 5,
    Oack = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TftpErrorCode {
    NotDefined = 0,
    FileNotFound = 1,
    AccessViolation = 2,
    DiskFull = 3,
    IllegalOperation = 4,
    UnknownTid = 5,
    FileExists = 6,
    NoSuchUser = 7,
    OptionNegotiation = 8,
}

impl TftpErrorCode {
    pub fn from_code(code: u16) -> Option<Self> {
        use TftpErrorCode::*;
        Some(match code {
            0 => NotDefined,
            1 => FileNotFound,
            2 => AccessViolation,
            3 => DiskFull,
            4 => IllegalOperation,
            5 => UnknownTid,
            6 => FileExists,
            7 => NoSuchUser,
            8 => OptionNegotiation,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TftpOption {
    pub name: String,
    pub value: String,
}

impl TftpOption {
    pub fn new(name: impl Into<String>, value: impl ToString) -> Self {
        TftpOption { name: name.into(), value: value.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TftpRequest {
    pub filename: String,
    pub mode: String,
    pub options: Vec<TftpOption>,
}

impl TftpRequest {
    /// Looks an option up by name, ignoring ASCII case.
    pub fn option(&self, name: &str) -> Option<&str> {
        self.options
            .iter()
            .find(|o| o.name.eq_ignore_ascii_case(name))
            .map(|o| o.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TftpPacket {
    Rrq(TftpRequest),
    Wrq(TftpRequest),
    Data { block: u16, payload: Vec<u8> },
    Ack { block: u16 },
    Error { code: TftpErrorCode, message: String },
    Oack { options: Vec<TftpOption> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TftpDecodeError {
    #[error("packet shorter than its fixed fields")]
    Truncated,
    #[error("unknown opcode {0}")]
    UnknownOpcode(u16),
    #[error("string field missing its NUL terminator or not valid text")]
    MalformedNetascii,
    #[error("option name without a value")]
    DanglingOption,
    #[error("unknown error code {0}")]
    UnknownErrorCode(u16),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TftpEncodeError {
    #[error("string field contains a NUL byte")]
    EmbeddedNul,
    #[error("DATA payload of {0} bytes exceeds the largest block size")]
    PayloadTooLarge(usize),
}

impl TftpPacket {
    pub fn opcode(&self) -> Opcode {
        match self {
            TftpPacket::Rrq(_) => Opcode::Rrq,
            TftpPacket::Wrq(_) => Opcode::Wrq,
            TftpPacket::Data { .. } => Opcode::Data,
            TftpPacket::Ack { .. } => Opcode::Ack,
            TftpPacket::Error { .. } => Opcode::Error,
            TftpPacket::Oack { .. } => Opcode::Oack,
        }
    }

    pub fn error(code: TftpErrorCode, message: impl Into<String>) -> Self {
        TftpPacket::Error { code, message: message.into() }
    }

    pub fn decode(raw: &[u8]) -> Result<Self, TftpDecodeError> {
        let (op, body) = match raw {
            [hi, lo, body @ ..] => (u16::from_be_bytes([*hi, *lo]), body),
            _ => return Err(TftpDecodeError::Truncated),
        };
        match op {
            1 | 2 => {
                let mut fields = Fields(body);
                let filename = fields.next_str()?;
                let mode = fields.next_str()?;
                let options = fields.options()?;
                let req = TftpRequest { filename, mode, options };
                Ok(if op == 1 { TftpPacket::Rrq(req) } else { TftpPacket::Wrq(req) })
            }
            3 => match body {
                [hi, lo, payload @ ..] => Ok(TftpPacket::Data {
                    block: u16::from_be_bytes([*hi, *lo]),
                    payload: payload.to_vec(),
                }),
                _ => Err(TftpDecodeError::Truncated),
            },
            4 => match body {
                [hi, lo] => Ok(TftpPacket::Ack { block: u16::from_be_bytes([*hi, *lo]) }),
                _ => Err(TftpDecodeError::Truncated),
            },
            5 => match body {
                [hi, lo, rest @ ..] => {
                    let raw_code = u16::from_be_bytes([*hi, *lo]);
                    let code = TftpErrorCode::from_code(raw_code)
                        .ok_or(TftpDecodeError::UnknownErrorCode(raw_code))?;
                    let mut fields = Fields(rest);
                    let message = fields.next_str()?;
                    if !fields.0.is_empty() {
                        return Err(TftpDecodeError::MalformedNetascii);
                    }
                    Ok(TftpPacket::Error { code, message })
                }
                _ => Err(TftpDecodeError::Truncated),
            },
            6 => Ok(TftpPacket::Oack { options: Fields(body).options()? }),
            other => Err(TftpDecodeError::UnknownOpcode(other)),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>, TftpEncodeError> {
        let mut out = Vec::with_capacity(match self {
            TftpPacket::Data { payload, .. } => 4 + payload.len(),
            _ => 32,
        });
        out.extend_from_slice(&(self.opcode() as u16).to_be_bytes());
        match self {
            TftpPacket::Rrq(req) | TftpPacket::Wrq(req) => {
                put_str(&mut out, &req.filename)?;
                put_str(&mut out, &req.mode)?;
                put_options(&mut out, &req.options)?;
            }
            TftpPacket::Data { block, payload } => {
                if payload.len() > BLKSIZE_MAX as usize {
                    return Err(TftpEncodeError::PayloadTooLarge(payload.len()));
                }
                out.extend_from_slice(&block.to_be_bytes());
                out.extend_from_slice(payload);
            }
            TftpPacket::Ack { block } => out.extend_from_slice(&block.to_be_bytes()),
            TftpPacket::Error { code, message } => {
                out.extend_from_slice(&(*code as u16).to_be_bytes());
                put_str(&mut out, message)?;
            }
            TftpPacket::Oack { options } => put_options(&mut out, options)?,
        }
        Ok(out)
    }
}

struct Fields<'a>(&'a [u8]);

impl Fields<'_> {
    fn next_str(&mut self) -> Result<String, TftpDecodeError> {
        let nul = self
            .0
            .iter()
            .position(|&b| b == 0)
            .ok_or(TftpDecodeError::MalformedNetascii)?;
        let s = std::str::from_utf8(&self.0[..nul])
            .map_err(|_| TftpDecodeError::MalformedNetascii)?
            .to_owned();
        self.0 = &self.0[nul + 1..];
        Ok(s)
    }

    fn options(&mut self) -> Result<Vec<TftpOption>, TftpDecodeError> {
        let mut options = Vec::new();
        while !self.0.is_empty() {
            let name = self.next_str()?;
            if self.0.is_empty() {
                return Err(TftpDecodeError::DanglingOption);
            }
            let value = self.next_str()?;
            options.push(TftpOption { name, value });
        }
        Ok(options)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<(), TftpEncodeError> {
    if s.as_bytes().contains(&0) {
        return Err(TftpEncodeError::EmbeddedNul);
    }
    out.extend_from_slice(s.as_bytes());
    out.push(0);
    Ok(())
}

fn put_options(out: &mut Vec<u8>, options: &[TftpOption]) -> Result<(), TftpEncodeError> {
    for o in options {
        put_str(out, &o.name)?;
        put_str(out, &o.value)?;
    }
    Ok(())
}
