/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no final xor.
const POLY: u16 = 0x1021;
const INIT: u16 = 0xFFFF;

const TABLE: [u16; 256] = build_table();

const fn build_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ POLY } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// Table-driven CRC.
pub fn crc16(bytes: &[u8]) -> u16 {
    bytes
        .iter()
        .fold(INIT, |crc, &b| (crc << 8) ^ TABLE[((crc >> 8) as u8 ^ b) as usize])
}

/// Bit-serial reference, one shift per input bit.
pub fn crc16_bitwise(bytes: &[u8]) -> u16 {
    let mut crc = INIT;
    for &b in bytes {
        for i in (0..8).rev() {
            let input = (b >> i) & 1 == 1;
            let top = crc & 0x8000 != 0;
            crc <<= 1;
            if input ^ top {
                crc ^= POLY;
            }
        }
    }
    crc
}
