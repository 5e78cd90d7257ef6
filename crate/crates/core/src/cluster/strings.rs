//! Constant strings in the firmware image.

use crate::isa::image::FirmwareImage;

pub const MIN_STRING_LEN: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConstantString {
    pub start: u32,
    /// Address of the NUL terminator.
    pub end: u32,
    pub bytes: Vec<u8>,
}

impl ConstantString {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.bytes).into_owned()
    }

    /// Byte at `addr`, the terminator included.
    pub fn byte_at(&self, addr: u32) -> Option<u8> {
        if addr == self.end {
            return Some(0);
        }
        addr.checked_sub(self.start).and_then(|i| self.bytes.get(i as usize)).copied()
    }

    pub fn contains(&self, addr: u32) -> bool {
        (self.start..=self.end).contains(&addr)
    }

    /// The suffix starting at `addr`.
    pub fn suffix_from(&self, addr: u32) -> ConstantString {
        let skip = (addr - self.start) as usize;
        ConstantString { start: addr, end: self.end, bytes: self.bytes[skip..].to_vec() }
    }
}

/// Maximal runs of printable ASCII immediately followed by a NUL byte.
pub fn identify_strings(image: &FirmwareImage) -> Vec<ConstantString> {
    let code = &image.code;
    let mut out = Vec::new();
    let mut start = 0usize;
    for (i, &b) in code.iter().enumerate() {
        if (0x20..=0x7e).contains(&b) {
            continue;
        }
        if b == 0 && i - start >= MIN_STRING_LEN {
            out.push(ConstantString { start: start as u32, end: i as u32, bytes: code[start..i].to_vec() });
        }
        start = i + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(bytes: &[u8]) -> FirmwareImage {
        FirmwareImage { code: bytes.to_vec(), ..Default::default() }
    }

    #[test]
    fn steer_between_nuls() {
        let s = identify_strings(&image(&[0, 0x73, 0x74, 0x65, 0x65, 0x72, 0]));
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].text().as_str(), s[0].start, s[0].end), ("steer", 1, 6));
        assert_eq!(s[0].byte_at(2), Some(b't'));
        assert_eq!(s[0].byte_at(6), Some(0));
    }

    #[test]
    fn unterminated_dropped() {
        assert!(identify_strings(&image(b"\x01hello")).is_empty());
    }

    #[test]
    fn split_and_minimum_length() {
        let s = identify_strings(&image(&[0x41, 0x42, 0, 0x43, 0]));
        assert_eq!(s.iter().map(|s| s.text()).collect::<Vec<_>>(), vec!["AB"]);
        let s = identify_strings(&image(b"\xffAB\0C\0"));
        assert_eq!(s.iter().map(|s| s.text()).collect::<Vec<_>>(), vec!["AB"]);
    }

    #[test]
    fn suffix() {
        let s = &identify_strings(&image(b"\0Xsteer\0"))[0];
        let t = s.suffix_from(2);
        assert_eq!((t.text().as_str(), t.start, t.end), ("steer", 2, 7));
    }
}
