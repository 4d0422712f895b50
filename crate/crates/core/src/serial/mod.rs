//! Newline-delimited, CRC-16 protected frames between gateway and hub.
//!
//! Wire form: `'$' body '*' HHHH '\n'` where `HHHH` is the uppercase hex
//! CRC-16/CCITT-FALSE of `body`. The trailer is fixed width and located from
//! the end of the line, so the body may contain `*` and `$` freely.

mod crc;
mod frame;
mod link;

pub use crc::{crc16, crc16_bitwise};
pub use frame::{decode_frame, encode_frame, FrameError, LineAssembler, MAX_BODY, MAX_LINE};
pub use link::{request_report, FrameFault, LinkConfig, LinkError, SerialLink, StreamLink, Transaction};
