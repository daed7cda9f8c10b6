/// Fixed-length packed bit vector, LSB-first within each 64-bit word.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitField {
    len: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitField[{}; ", self.len)?;
        for i in 0..self.len.min(64) {
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        if self.len > 64 {
            f.write_str("…")?;
        }
        f.write_str("]")
    }
}

impl BitField {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut b = Self {
            len,
            words: vec![u64::MAX; len.div_ceil(64)],
        };
        b.clear_tail();
        b
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut b = Self::zeros(bits.len());
        for (i, &v) in bits.iter().enumerate() {
            b.set(i, v);
        }
        b
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn count_zeros(&self) -> usize {
        self.len - self.count_ones()
    }

    pub fn all(&self) -> bool {
        self.count_ones() == self.len
    }

    /// Bitwise AND; panics on length mismatch.
    pub fn and(&self, other: &Self) -> Self {
        assert_eq!(self.len, other.len);
        Self {
            len: self.len,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        }
    }

    /// Number of positions where both fields are 0.
    pub fn count_common_zeros(&self, other: &Self) -> usize {
        assert_eq!(self.len, other.len);
        let both_set: usize = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum();
        self.len - both_set
    }

    /// `true` if every 1 in `self` is also 1 in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    /// LSB-first bytes, last byte zero-padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.len.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    /// Inverse of [`BitField::to_bytes`]; `None` if the byte count is wrong
    /// or padding bits are set.
    pub fn from_bytes(len: usize, bytes: &[u8]) -> Option<Self> {
        if bytes.len() != len.div_ceil(8) {
            return None;
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= u64::from(b) << (8 * (i % 8));
        }
        let out = Self { len, words };
        let mut check = out.clone();
        check.clear_tail();
        (check == out).then_some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_masks_tail_bits() {
        let b = BitField::ones(70);
        assert_eq!(b.count_ones(), 70);
        assert_eq!(b.to_bytes().len(), 9);
        assert_eq!(*b.to_bytes().last().unwrap(), 0b0011_1111);
    }

    #[test]
    fn bytes_are_lsb_first() {
        let b = BitField::from_bools(&[true, false, true, true, false, false, false, false, true]);
        assert_eq!(b.to_bytes(), vec![0b0000_1101, 0b0000_0001]);
        assert_eq!(BitField::from_bytes(9, &b.to_bytes()), Some(b));
    }

    #[test]
    fn padding_bits_rejected() {
        assert!(BitField::from_bytes(3, &[0b1000_0000]).is_none());
        assert!(BitField::from_bytes(3, &[0, 0]).is_none());
    }

    #[test]
    fn common_zeros() {
        let a = BitField::from_bools(&[true, false, false, true]);
        let b = BitField::from_bools(&[false, false, true, true]);
        assert_eq!(a.count_common_zeros(&b), 1);
        assert_eq!(a.and(&b), BitField::from_bools(&[false, false, false, true]));
        assert!(a.and(&b).is_subset_of(&a));
    }
}
