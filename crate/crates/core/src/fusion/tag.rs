//! Tagged function pointers.
//!
//! Function addresses are 16-byte aligned, so the low four bits are free.
//! Bit 1 marks a pointer to a fused function and bit 2 carries the `ctrl`
//! value to pass; bits 0 and 3 are never touched.

pub const FUSED_BIT: i64 = 0b0010;
pub const CTRL_BIT: i64 = 0b0100;
pub const TAG_MASK: i64 = FUSED_BIT | CTRL_BIT;

/// The tag bits to OR into an aligned address for the given ctrl side.
pub fn tag_bits(ctrl: bool) -> i64 {
    FUSED_BIT | if ctrl { CTRL_BIT } else { 0 }
}

pub fn encode(addr: i64, ctrl: bool) -> i64 {
    addr | tag_bits(ctrl)
}

/// `Some((address, ctrl))` for a tagged value, `None` for a plain one.
pub fn decode(v: i64) -> Option<(i64, bool)> {
    if v & FUSED_BIT == 0 {
        return None;
    }
    Some((v & !TAG_MASK, v & CTRL_BIT != 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_side_tag_is_binary_11_at_bits_1_and_2() {
        assert_eq!(encode(0x40, true) & 0xF, 0b0110);
        assert_eq!((encode(0x40, true) >> 1) & 0b11, 0b11);
        assert_eq!(encode(0x40, false) & 0xF, 0b0010);
    }

    #[test]
    fn untagged_values_decode_to_none() {
        assert_eq!(decode(0x30), None);
        assert_eq!(decode(0x31), None);
    }
}
