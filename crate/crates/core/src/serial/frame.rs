use super::crc::crc16;

/// Largest body carried in one frame.
pub const MAX_BODY: usize = 4096;
/// Largest line, excluding the terminating newline: `$` + body + `*HHHH`.
pub const MAX_LINE: usize = MAX_BODY + 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("body longer than {MAX_BODY} bytes")]
    BodyTooLarge,
    #[error("body contains a newline")]
    BodyHasNewline,
    #[error("malformed frame")]
    Malformed,
    #[error("checksum mismatch")]
    BadCrc,
    #[error("line longer than {MAX_LINE} bytes")]
    Oversize,
}

const HEX: &[u8; 16] = b"0123456789ABCDEF";

pub fn encode_frame(body: &[u8]) -> Result<Vec<u8>, FrameError> {
    if body.len() > MAX_BODY {
        return Err(FrameError::BodyTooLarge);
    }
    if body.contains(&b'\n') {
        return Err(FrameError::BodyHasNewline);
    }
    let crc = crc16(body);
    let mut out = Vec::with_capacity(body.len() + 7);
    out.push(b'$');
    out.extend_from_slice(body);
    out.push(b'*');
    for shift in [12u16, 8, 4, 0] {
        out.push(HEX[((crc >> shift) & 0xF) as usize]);
    }
    out.push(b'\n');
    Ok(out)
}

fn hex_value(b: u8) -> Option<u16> {
    match b {
        b'0'..=b'9' => Some((b - b'0') as u16),
        b'A'..=b'F' => Some((b - b'A' + 10) as u16),
        _ => None,
    }
}

/// Validate one newline-terminated line and return its body.
pub fn decode_frame(line: &[u8]) -> Result<&[u8], FrameError> {
    let Some((&b'\n', content)) = line.split_last() else {
        return Err(if line.len() > MAX_LINE {
            FrameError::Oversize
        } else {
            FrameError::Malformed
        });
    };
    if content.len() > MAX_LINE {
        return Err(FrameError::Oversize);
    }
    if content.len() < 6 || content[0] != b'$' {
        return Err(FrameError::Malformed);
    }
    let (head, trailer) = content.split_at(content.len() - 5);
    if trailer[0] != b'*' {
        return Err(FrameError::Malformed);
    }
    let mut crc = 0u16;
    for &b in &trailer[1..] {
        crc = (crc << 4) | hex_value(b).ok_or(FrameError::Malformed)?;
    }
    let body = &head[1..];
    if body.contains(&b'\n') {
        return Err(FrameError::Malformed);
    }
    if crc16(body) != crc {
        return Err(FrameError::BadCrc);
    }
    Ok(body)
}

/// Splits a byte stream into lines. Lines longer than [`MAX_LINE`] are
/// reported once as [`FrameError::Oversize`] and skipped up to the next
/// newline.
#[derive(Debug, Default)]
pub struct LineAssembler {
    buf: Vec<u8>,
    discarding: bool,
}

impl LineAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feed bytes; returns every line completed by them (each including its
    /// trailing newline).
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<Vec<u8>, FrameError>> {
        let mut out = Vec::new();
        for &b in bytes {
            if self.discarding {
                if b == b'\n' {
                    self.discarding = false;
                }
                continue;
            }
            self.buf.push(b);
            if b == b'\n' {
                out.push(Ok(std::mem::take(&mut self.buf)));
            } else if self.buf.len() > MAX_LINE {
                self.buf.clear();
                self.discarding = true;
                out.push(Err(FrameError::Oversize));
            }
        }
        out
    }
}
