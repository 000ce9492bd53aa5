//! Bit-plane packed tensors and the popcount dot products built on them.
//!
//! A k-bit code tensor is stored as k planes; plane `i` holds bit `i` of every
//! element's code. Element `p` lives in word `p / 64`, bit `p % 64`. Bits at
//! positions `>= len` are always zero, so whole-word kernels never need a mask.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{CodeTensor, Tensor};

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => !0,
        r => (1u64 << r) - 1,
    }
}

/// `Σ popcount(a & b)` over two word slices of equal length.
#[inline]
pub fn popcount_and(a: &[u64], b: &[u64]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as u64).sum()
}

/// `Σ popcount(a ^ b)` over two word slices of equal length.
#[inline]
pub fn popcount_xor(a: &[u64], b: &[u64]) -> u64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}

/// A packed bit vector with a masked tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlane {
    len: usize,
    words: Vec<u64>,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        BitPlane { len, words: vec![0; words_for(len)] }
    }

    pub fn ones(len: usize) -> Self {
        let mut plane = BitPlane { len, words: vec![!0; words_for(len)] };
        plane.mask_tail();
        plane
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        Self::from_fn(bits.len(), |i| bits[i])
    }

    pub fn from_fn(len: usize, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut plane = Self::zeros(len);
        for i in 0..len {
            if f(i) {
                plane.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        plane
    }

    /// Builds a plane from raw words; bits beyond `len` are cleared.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch(words.len(), words_for(len)));
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(BitPlane { len, words })
    }

    fn mask_tail(&mut self) {
        let mask = tail_mask(self.len);
        if let Some(last) = self.words.last_mut() {
            *last &= mask;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        let bit = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= bit;
        } else {
            self.words[i / WORD_BITS] &= !bit;
        }
    }

    pub fn complement(&self) -> BitPlane {
        let mut out = BitPlane { len: self.len, words: self.words.iter().map(|w| !w).collect() };
        out.mask_tail();
        out
    }

    pub fn xnor(&self, other: &BitPlane) -> Result<BitPlane> {
        check_len(self, other)?;
        let words = self.words.iter().zip(&other.words).map(|(a, b)| !(a ^ b)).collect();
        let mut out = BitPlane { len: self.len, words };
        out.mask_tail();
        Ok(out)
    }
}

fn check_len(x: &BitPlane, y: &BitPlane) -> Result<()> {
    if x.len != y.len {
        return Err(Error::LengthMismatch(x.len, y.len));
    }
    Ok(())
}

/// Dot product of two {-1, +1} vectors encoded as bits (1 = +1, 0 = -1).
///
/// Equal to `n - 2·popcount(x xor y)`.
pub fn bit_dot_signed(x: &BitPlane, y: &BitPlane) -> Result<i64> {
    check_len(x, y)?;
    let differing = popcount_xor(&x.words, &y.words) as i64;
    Ok(x.len as i64 - 2 * differing)
}

/// Dot product of two {0, 1} vectors: `popcount(x and y)`.
pub fn bit_dot_unsigned(x: &BitPlane, y: &BitPlane) -> Result<u64> {
    check_len(x, y)?;
    Ok(popcount_and(&x.words, &y.words))
}

pub fn plane_popcount(x: &BitPlane) -> u64 {
    x.words.iter().map(|w| w.count_ones() as u64).sum()
}

pub(crate) fn check_bits(k: u32) -> Result<()> {
    if !(1..=8).contains(&k) {
        return Err(Error::BadBitWidth(k));
    }
    Ok(())
}

/// k-bit unsigned codes stored as k bit planes over a `(N, C, H, W)` shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlaneTensor {
    shape: [usize; 4],
    k: u32,
    planes: Vec<BitPlane>,
}

impl BitPlaneTensor {
    pub fn from_planes(shape: [usize; 4], planes: Vec<BitPlane>) -> Result<Self> {
        let k = planes.len() as u32;
        check_bits(k)?;
        let n: usize = shape.iter().product();
        if let Some(p) = planes.iter().find(|p| p.len() != n) {
            return Err(Error::LengthMismatch(p.len(), n));
        }
        Ok(BitPlaneTensor { shape, k, planes })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn bits(&self) -> u32 {
        self.k
    }

    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    pub fn plane(&self, i: usize) -> &BitPlane {
        &self.planes[i]
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a code tensor into `k` bit planes.
pub fn pack(codes: &CodeTensor, k: u32) -> Result<BitPlaneTensor> {
    check_bits(k)?;
    if let Some(&code) = codes.codes.iter().find(|&&c| (c as u32) >> k != 0) {
        return Err(Error::CodeOverflow { code: code as u32, bits: k });
    }
    let n = codes.len();
    let mut planes: Vec<Vec<u64>> = vec![vec![0u64; words_for(n)]; k as usize];
    for (w, chunk) in codes.codes.chunks(WORD_BITS).enumerate() {
        for (b, &code) in chunk.iter().enumerate() {
            let mut c = code;
            let mut i = 0;
            while c != 0 {
                if c & 1 == 1 {
                    planes[i][w] |= 1 << b;
                }
                c >>= 1;
                i += 1;
            }
        }
    }
    let planes = planes.into_iter().map(|words| BitPlane { len: n, words }).collect();
    Ok(BitPlaneTensor { shape: codes.shape, k, planes })
}

/// Reassembles codes: `codes[p] = Σ_i 2^i · plane_i[p]`.
pub fn unpack(t: &BitPlaneTensor) -> CodeTensor {
    let n = t.len();
    let mut codes = vec![0u8; n];
    for (i, plane) in t.planes.iter().enumerate() {
        for (w, &word) in plane.words.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                codes[w * WORD_BITS + b] |= 1 << i;
                bits &= bits - 1;
            }
        }
    }
    CodeTensor { shape: t.shape, codes }
}

const BTSR_MAGIC: &[u8; 4] = b"BTSR";
const BTSR_VERSION: u8 = 1;
/// `k` field value marking a block of raw little-endian `f32` values.
pub const BTSR_FLOAT_SENTINEL: u8 = 255;

/// Payload of one BTSR container block.
#[derive(Clone, Debug, PartialEq)]
pub enum BtsrBlock {
    Planes(BitPlaneTensor),
    Float { shape: [usize; 4], values: Vec<f32> },
}

fn write_header(out: &mut impl Write, k: u8, shape: [usize; 4]) -> Result<()> {
    out.write_all(BTSR_MAGIC)?;
    out.write_all(&[BTSR_VERSION, k])?;
    for d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_btsr(out: &mut impl Write, t: &BitPlaneTensor) -> Result<()> {
    write_header(out, t.k as u8, t.shape)?;
    for plane in &t.planes {
        for w in &plane.words {
            out.write_all(&w.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a real tensor as a float BTSR block (values narrowed to `f32`).
pub fn write_btsr_float(out: &mut impl Write, t: &Tensor) -> Result<()> {
    write_header(out, BTSR_FLOAT_SENTINEL, t.shape)?;
    for &v in &t.data {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_btsr(input: &mut impl Read) -> Result<BtsrBlock> {
    let magic: [u8; 4] = read_array(input)?;
    if &magic != BTSR_MAGIC {
        return Err(Error::Format(format!("bad BTSR magic {magic:?}")));
    }
    let [version, k] = read_array(input)?;
    if version != BTSR_VERSION {
        return Err(Error::Format(format!("unsupported BTSR version {version}")));
    }
    let mut shape = [0usize; 4];
    for d in &mut shape {
        *d = u32::from_le_bytes(read_array(input)?) as usize;
    }
    let n: usize = shape.iter().product();
    if k == BTSR_FLOAT_SENTINEL {
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f32::from_le_bytes(read_array(input)?));
        }
        return Ok(BtsrBlock::Float { shape, values });
    }
    check_bits(k as u32).map_err(|_| Error::Format(format!("bad BTSR bit-width {k}")))?;
    let mut planes = Vec::with_capacity(k as usize);
    for _ in 0..k {
        let mut words = Vec::with_capacity(words_for(n));
        for _ in 0..words_for(n) {
            words.push(u64::from_le_bytes(read_array(input)?));
        }
        if words.last().is_some_and(|w| w & !tail_mask(n) != 0) {
            return Err(Error::Format("nonzero tail bits in BTSR plane".into()));
        }
        planes.push(BitPlane { len: n, words });
    }
    Ok(BtsrBlock::Planes(BitPlaneTensor { shape, k: k as u32, planes }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, len: usize) -> (BitPlane, Vec<bool>) {
        let bits: Vec<bool> = (0..len).map(|_| rng.gen()).collect();
        (BitPlane::from_bits(&bits), bits)
    }

    fn codes(v: Vec<u8>) -> CodeTensor {
        CodeTensor::new([1, 1, 1, v.len()], v).unwrap()
    }

    #[test]
    fn pack_zero_codes() {
        let t = pack(&codes(vec![0; 4]), 2).unwrap();
        assert_eq!(t.bits(), 2);
        assert!(t.planes().iter().all(|p| plane_popcount(p) == 0));
    }

    #[test]
    fn pack_three_sets_both_planes() {
        let t = pack(&codes(vec![3]), 2).unwrap();
        assert!(t.plane(0).get(0));
        assert!(t.plane(1).get(0));
    }

    #[test]
    fn all_four_bit_codes_roundtrip() {
        let c = codes((0..16).collect());
        assert_eq!(unpack(&pack(&c, 4).unwrap()), c);
    }

    #[test]
    fn pack_rejects_bad_input() {
        assert!(matches!(pack(&codes(vec![4]), 2), Err(Error::CodeOverflow { code: 4, bits: 2 })));
        assert!(matches!(pack(&codes(vec![0]), 0), Err(Error::BadBitWidth(0))));
        assert!(matches!(pack(&codes(vec![0]), 9), Err(Error::BadBitWidth(9))));
    }

    #[test]
    fn unpack_by_definition() {
        let zero = BitPlaneTensor::from_planes([1, 1, 1, 5], vec![BitPlane::zeros(5); 3]).unwrap();
        assert_eq!(unpack(&zero).codes, vec![0; 5]);
        let t = BitPlaneTensor::from_planes(
            [1, 1, 1, 2],
            vec![BitPlane::from_bits(&[true, false]), BitPlane::from_bits(&[false, true])],
        )
        .unwrap();
        assert_eq!(unpack(&t).codes, vec![1, 2]);
    }

    #[test]
    fn random_eight_bit_roundtrip_matches_direct_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = codes((0..1000).map(|_| rng.gen()).collect());
        let t = pack(&c, 8).unwrap();
        for p in 0..c.len() {
            let direct: u32 = (0..8).map(|i| (t.plane(i).get(p) as u32) << i).sum();
            assert_eq!(direct, c.codes[p] as u32);
        }
        assert_eq!(unpack(&t), c);
    }

    #[test]
    fn signed_dot_examples() {
        let x = BitPlane::from_fn(64, |i| i % 3 == 0);
        assert_eq!(bit_dot_signed(&x, &x).unwrap(), 64);
        let x = BitPlane::from_bits(&[true, true, false]);
        let y = BitPlane::from_bits(&[true, false, false]);
        assert_eq!(bit_dot_signed(&x, &y).unwrap(), 1);
        assert!(matches!(bit_dot_signed(&x, &BitPlane::zeros(4)), Err(Error::LengthMismatch(3, 4))));
    }

    #[test]
    fn signed_dot_matches_element_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for len in [1000, 63, 64, 65, 1] {
            let (x, xb) = random_plane(&mut rng, len);
            let (y, yb) = random_plane(&mut rng, len);
            let sign = |b: bool| if b { 1i64 } else { -1 };
            let oracle: i64 = xb.iter().zip(&yb).map(|(&a, &b)| sign(a) * sign(b)).sum();
            assert_eq!(bit_dot_signed(&x, &y).unwrap(), oracle);
        }
    }

    #[test]
    fn unsigned_dot_examples() {
        let ones = BitPlane::ones(100);
        assert_eq!(bit_dot_unsigned(&ones, &ones).unwrap(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, _) = random_plane(&mut rng, 100);
        assert_eq!(bit_dot_unsigned(&BitPlane::zeros(100), &y).unwrap(), 0);
        assert!(bit_dot_unsigned(&ones, &BitPlane::ones(99)).is_err());
    }

    #[test]
    fn unsigned_dot_matches_element_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, xb) = random_plane(&mut rng, 777);
        let (y, yb) = random_plane(&mut rng, 777);
        let oracle = xb.iter().zip(&yb).filter(|(&a, &b)| a && b).count() as u64;
        assert_eq!(bit_dot_unsigned(&x, &y).unwrap(), oracle);
    }

    #[test]
    fn popcount_examples() {
        assert_eq!(plane_popcount(&BitPlane::zeros(64)), 0);
        assert_eq!(plane_popcount(&BitPlane::from_fn(64, |i| i % 2 == 1)), 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, xb) = random_plane(&mut rng, 1000);
        assert_eq!(plane_popcount(&x), xb.iter().filter(|&&b| b).count() as u64);
    }

    #[test]
    fn tail_bits_stay_zero() {
        let ones = BitPlane::ones(70);
        assert_eq!(ones.words()[1], 0b11_1111);
        let c = BitPlane::zeros(70).complement();
        assert_eq!(c, ones);
        let x = BitPlane::from_words(3, vec![!0]).unwrap();
        assert_eq!(plane_popcount(&x), 3);
        assert_eq!(plane_popcount(&x.xnor(&BitPlane::zeros(3)).unwrap()), 0);
    }

    #[test]
    fn btsr_roundtrip_and_layout() {
        let c = CodeTensor::new([1, 2, 3, 13], (0..78).map(|i| (i % 8) as u8).collect()).unwrap();
        let t = pack(&c, 3).unwrap();
        let mut buf = Vec::new();
        write_btsr(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"BTSR");
        assert_eq!(buf[4], 1);
        assert_eq!(buf[5], 3);
        assert_eq!(u32::from_le_bytes(buf[10..14].try_into().unwrap()), 2);
        // 78 elements -> 2 words per plane, 3 planes.
        assert_eq!(buf.len(), 4 + 2 + 16 + 3 * 2 * 8);
        assert_eq!(read_btsr(&mut buf.as_slice()).unwrap(), BtsrBlock::Planes(t));

        let f = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -2.0, 3.25]).unwrap();
        let mut buf = Vec::new();
        write_btsr_float(&mut buf, &f).unwrap();
        assert_eq!(buf[5], BTSR_FLOAT_SENTINEL);
        match read_btsr(&mut buf.as_slice()).unwrap() {
            BtsrBlock::Float { shape, values } => {
                assert_eq!(shape, [1, 1, 1, 3]);
                assert_eq!(values, vec![0.5, -2.0, 3.25]);
            }
            other => panic!("unexpected block {other:?}"),
        }
    }

    #[test]
    fn btsr_rejects_garbage() {
        assert!(matches!(read_btsr(&mut &b"XXXX\x01\x01"[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn signed_dot_is_twice_xnor_count_minus_n(
            bits in proptest::collection::vec(any::<(bool, bool)>(), 0..300)
        ) {
            let x = BitPlane::from_fn(bits.len(), |i| bits[i].0);
            let y = BitPlane::from_fn(bits.len(), |i| bits[i].1);
            let n = bits.len() as i64;
            let agree = bit_dot_unsigned(&x.xnor(&y).unwrap(), &BitPlane::ones(bits.len())).unwrap() as i64;
            prop_assert_eq!(bit_dot_signed(&x, &y).unwrap(), 2 * agree - n);
            prop_assert_eq!(bit_dot_signed(&x, &x).unwrap(), n);
            prop_assert_eq!(bit_dot_signed(&x, &x.complement()).unwrap(), -n);
        }

        #[test]
        fn pack_unpack_roundtrip(k in 1u32..=8, raw in proptest::collection::vec(any::<u8>(), 0..200)) {
            let c = codes(raw.into_iter().map(|v| v & ((1u16 << k) - 1) as u8).collect());
            let t = pack(&c, k).unwrap();
            prop_assert!(t.planes().iter().all(|p| plane_popcount(p) as usize <= p.len()));
            prop_assert_eq!(unpack(&t), c);
        }
    }

    #[test]
    fn pack_is_bijective_on_small_tensors() {
        // Every 3-element tensor of 2-bit codes maps to a distinct packing.
        let mut seen = std::collections::HashSet::new();
        for v in 0..64u32 {
            let c = codes(vec![(v & 3) as u8, ((v >> 2) & 3) as u8, ((v >> 4) & 3) as u8]);
            let t = pack(&c, 2).unwrap();
            assert_eq!(unpack(&t), c);
            assert!(seen.insert(t.planes().iter().map(|p| p.words()[0]).collect::<Vec<_>>()));
        }
    }
}
