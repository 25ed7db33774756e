//! Challenge generation, CRP datasets, the experiment split, and the
//! on-disk format.
//!
//! Challenge bits are held packed (component-major, LSB-first within each
//! byte) so that large datasets stay compact and the in-memory layout is
//! the record payload of the binary file format.
//!
//! Binary CRP file, version 1, little-endian:
//!
//! ```text
//! magic "CRPX" | version u8=1 | n u16 | k u8 | source u8 (0=uniform, 1=lcg)
//! | seed u64 | reserved 16 bytes (LCG a, g when source=lcg) | count u64
//! | count records, each k*ceil(n/8) packed challenge bytes + 1 response byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::puf::{read_exact_at, CdcChallenge, CdcXorPuf, Challenge};

const MAGIC: &[u8; 4] = b"CRPX";
const VERSION: u8 = 1;
const HEADER_LEN: u64 = 4 + 1 + 2 + 1 + 1 + 8 + 16 + 8;

/// Parameters of the linear congruential challenge source
/// `C_{i+1} = (a * C_i + g) mod m` with `m = 2^K`, `K` the stage count
/// (capped at 128; the state is held in two words). `a` and `g` are
/// truncated mod m before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LcgParams {
    pub a: u64,
    pub g: u64,
    pub c0: u64,
}

impl LcgParams {
    /// Full-period defaults for power-of-two moduli (a ≡ 1 mod 4, g odd,
    /// preserved under truncation mod 2^K).
    pub const DEFAULT_A: u64 = 6364136223846793005;
    pub const DEFAULT_G: u64 = 1442695040888963407;

    pub fn new(a: u64, g: u64, c0: u64) -> Self {
        Self { a, g, c0 }
    }

    pub fn with_seed(c0: u64) -> Self {
        Self::new(Self::DEFAULT_A, Self::DEFAULT_G, c0)
    }
}

/// The LCG state machine over `m = 2^min(n, 128)`.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u128,
    a: u128,
    g: u128,
    mask: u128,
}

impl Lcg {
    pub fn new(params: &LcgParams, stage_count: usize) -> Result<Self> {
        if stage_count == 0 {
            return Err(Error::invalid("stage count must be >= 1"));
        }
        let bits = stage_count.min(128);
        let mask = if bits == 128 {
            u128::MAX
        } else {
            (1u128 << bits) - 1
        };
        if params.c0 as u128 & !mask != 0 {
            return Err(Error::invalid("LCG seed c0 must satisfy 0 <= c0 < 2^K"));
        }
        Ok(Self {
            state: params.c0 as u128,
            a: params.a as u128 & mask,
            g: params.g as u128 & mask,
            mask,
        })
    }

    /// Advances once and returns the new state.
    pub fn next_state(&mut self) -> u128 {
        self.state = self
            .a
            .wrapping_mul(self.state)
            .wrapping_add(self.g)
            & self.mask;
        self.state
    }
}

/// Where a challenge stream came from; enough to regenerate it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Uniform { seed: u64 },
    Lcg { c0: u64, a: u64, g: u64 },
}

impl Provenance {
    fn source_tag(&self) -> u8 {
        match self {
            Provenance::Uniform { .. } => 0,
            Provenance::Lcg { .. } => 1,
        }
    }
}

/// A packed stream of CDC challenges plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChallengeBatch {
    n: u16,
    k: u8,
    provenance: Provenance,
    bytes: Vec<u8>,
}

fn check_dims(n: usize, k: usize) -> Result<(u16, u8)> {
    if n == 0 || n > u16::MAX as usize {
        return Err(Error::invalid("stage count must be in 1..=65535"));
    }
    if k == 0 || k > u8::MAX as usize {
        return Err(Error::invalid("component count must be in 1..=255"));
    }
    Ok((n as u16, k as u8))
}

impl ChallengeBatch {
    /// Every bit of every sub-challenge is an independent fair coin from
    /// the seeded generator; sampling is with replacement.
    pub fn uniform(n: usize, k: usize, count: u64, seed: u64) -> Result<Self> {
        let (n16, k8) = check_dims(n, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comp_bytes = n.div_ceil(8);
        let mut bytes = Vec::with_capacity((count as usize) * k * comp_bytes);
        for _ in 0..count {
            for _ in 0..k {
                push_random_bits(&mut rng, n, &mut bytes);
            }
        }
        Ok(Self {
            n: n16,
            k: k8,
            provenance: Provenance::Uniform { seed },
            bytes,
        })
    }

    /// XOR-PUF mode: one uniformly random challenge per record, broadcast
    /// to all k components.
    pub fn uniform_broadcast(n: usize, k: usize, count: u64, seed: u64) -> Result<Self> {
        let (n16, k8) = check_dims(n, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comp_bytes = n.div_ceil(8);
        let mut bytes = Vec::with_capacity((count as usize) * k * comp_bytes);
        let mut one = Vec::with_capacity(comp_bytes);
        for _ in 0..count {
            one.clear();
            push_random_bits(&mut rng, n, &mut one);
            for _ in 0..k {
                bytes.extend_from_slice(&one);
            }
        }
        Ok(Self {
            n: n16,
            k: k8,
            provenance: Provenance::Uniform { seed },
            bytes,
        })
    }

    /// Advances the LCG once per sub-challenge; each state value is
    /// expanded to n bits (little-endian bit order, zero-padded above the
    /// modulus width); k consecutive states form one challenge tuple.
    pub fn lcg(n: usize, k: usize, count: u64, params: &LcgParams) -> Result<Self> {
        let (n16, k8) = check_dims(n, k)?;
        let mut lcg = Lcg::new(params, n)?;
        let comp_bytes = n.div_ceil(8);
        let mut bytes = Vec::with_capacity((count as usize) * k * comp_bytes);
        for _ in 0..count {
            for _ in 0..k {
                let state = lcg.next_state();
                let le = state.to_le_bytes();
                let take = comp_bytes.min(le.len());
                bytes.extend_from_slice(&le[..take]);
                bytes.resize(bytes.len() + comp_bytes - take, 0);
                mask_tail_bits(&mut bytes, n);
            }
        }
        Ok(Self {
            n: n16,
            k: k8,
            provenance: Provenance::Lcg {
                c0: params.c0,
                a: params.a,
                g: params.g,
            },
            bytes,
        })
    }

    /// Rebuilds the stream a provenance describes.
    pub fn regenerate(n: usize, k: usize, count: u64, provenance: &Provenance) -> Result<Self> {
        match provenance {
            Provenance::Uniform { seed } => Self::uniform(n, k, count, *seed),
            Provenance::Lcg { c0, a, g } => Self::lcg(n, k, count, &LcgParams::new(*a, *g, *c0)),
        }
    }

    pub fn stage_count(&self) -> usize {
        self.n as usize
    }

    pub fn component_count(&self) -> usize {
        self.k as usize
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn record_len(&self) -> usize {
        self.k as usize * (self.n as usize).div_ceil(8)
    }

    pub fn len(&self) -> usize {
        self.bytes.len() / self.record_len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn record_bytes(&self, i: usize) -> &[u8] {
        let len = self.record_len();
        &self.bytes[i * len..(i + 1) * len]
    }

    pub fn get(&self, i: usize) -> CdcChallenge {
        unpack_challenge(self.record_bytes(i), self.n as usize, self.k as usize)
    }
}

/// Appends `ceil(n/8)` bytes holding n fair-coin bits, LSB-first.
fn push_random_bits(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<u8>) {
    let comp_bytes = n.div_ceil(8);
    let start = out.len();
    let words = n.div_ceil(64);
    for w in 0..words {
        let bits = rng.next_u64().to_le_bytes();
        let take = comp_bytes.saturating_sub(w * 8).min(8);
        out.extend_from_slice(&bits[..take]);
    }
    debug_assert_eq!(out.len(), start + comp_bytes);
    mask_tail_bits(out, n);
}

/// Clears the padding bits above n in the final byte of the last-written
/// component block.
fn mask_tail_bits(bytes: &mut [u8], n: usize) {
    if n % 8 != 0 {
        let last = bytes.len() - 1;
        bytes[last] &= (1u8 << (n % 8)) - 1;
    }
}

fn unpack_challenge(record: &[u8], n: usize, k: usize) -> CdcChallenge {
    let comp_bytes = n.div_ceil(8);
    let sub = (0..k)
        .map(|l| {
            Challenge::from_packed(&record[l * comp_bytes..(l + 1) * comp_bytes], n)
                .expect("stored challenge bytes are valid by construction")
        })
        .collect();
    CdcChallenge::new(sub).expect("stored challenge dims are valid by construction")
}

/// One challenge-response pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrpRecord {
    pub challenge: CdcChallenge,
    pub response: u8,
}

/// A typed, serializable collection of (challenge tuple, response bit)
/// pairs sharing one (n, k) header and one provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrpSet {
    n: u16,
    k: u8,
    provenance: Provenance,
    challenge_bytes: Vec<u8>,
    responses: Vec<u8>,
}

impl CrpSet {
    /// Evaluates the PUF on every challenge of the batch, preserving
    /// order and recording the batch provenance.
    pub fn build(puf: &CdcXorPuf, challenges: &ChallengeBatch) -> Result<Self> {
        if puf.stage_count() != challenges.stage_count()
            || puf.component_count() != challenges.component_count()
        {
            return Err(Error::invalid(format!(
                "PUF is ({}, {}) but challenges are ({}, {})",
                puf.stage_count(),
                puf.component_count(),
                challenges.stage_count(),
                challenges.component_count()
            )));
        }
        let count = challenges.len();
        let mut responses = Vec::with_capacity(count);
        let mut scratch = vec![0i8; puf.stage_count()];
        for i in 0..count {
            responses.push(puf.eval_packed(challenges.record_bytes(i), &mut scratch));
        }
        Ok(Self {
            n: challenges.n,
            k: challenges.k,
            provenance: challenges.provenance,
            challenge_bytes: challenges.bytes.clone(),
            responses,
        })
    }

    /// Assembles a set from already-packed parts. Lengths must be
    /// consistent and responses must be 0/1.
    pub fn from_parts(
        n: usize,
        k: usize,
        provenance: Provenance,
        challenge_bytes: Vec<u8>,
        responses: Vec<u8>,
    ) -> Result<Self> {
        let (n16, k8) = check_dims(n, k)?;
        let record_len = k * n.div_ceil(8);
        if challenge_bytes.len() != record_len * responses.len() {
            return Err(Error::invalid("challenge buffer does not match record count"));
        }
        if responses.iter().any(|&r| r > 1) {
            return Err(Error::invalid("responses must be 0 or 1"));
        }
        Ok(Self {
            n: n16,
            k: k8,
            provenance,
            challenge_bytes,
            responses,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.n as usize
    }

    pub fn component_count(&self) -> usize {
        self.k as usize
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    fn record_len(&self) -> usize {
        self.k as usize * (self.n as usize).div_ceil(8)
    }

    pub(crate) fn record_challenge_bytes(&self, i: usize) -> &[u8] {
        let len = self.record_len();
        &self.challenge_bytes[i * len..(i + 1) * len]
    }

    pub fn response(&self, i: usize) -> u8 {
        self.responses[i]
    }

    pub fn record(&self, i: usize) -> CrpRecord {
        CrpRecord {
            challenge: unpack_challenge(
                self.record_challenge_bytes(i),
                self.n as usize,
                self.k as usize,
            ),
            response: self.responses[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = CrpRecord> + '_ {
        (0..self.len()).map(|i| self.record(i))
    }

    fn gather(&self, indices: &[usize]) -> CrpSet {
        let record_len = self.record_len();
        let mut challenge_bytes = Vec::with_capacity(indices.len() * record_len);
        let mut responses = Vec::with_capacity(indices.len());
        for &i in indices {
            challenge_bytes.extend_from_slice(self.record_challenge_bytes(i));
            responses.push(self.responses[i]);
        }
        CrpSet {
            n: self.n,
            k: self.k,
            provenance: self.provenance,
            challenge_bytes,
            responses,
        }
    }

    /// Splits into (train, validation, test) per the experiment protocol:
    /// a deterministic shuffle under `shuffle_seed`, then
    /// `test = floor((1 − train_frac)·N)` records and
    /// `validation = max(1, floor(val_frac_of_train·(N − test)))` carved
    /// from the training portion. The three parts partition the set.
    pub fn split(
        &self,
        train_frac: f64,
        val_frac_of_train: f64,
        shuffle_seed: u64,
    ) -> Result<(CrpSet, CrpSet, CrpSet)> {
        if self.is_empty() {
            return Err(Error::invalid("cannot split an empty CRP set"));
        }
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::invalid("train fraction must be in (0, 1)"));
        }
        if !(val_frac_of_train > 0.0 && val_frac_of_train < 1.0) {
            return Err(Error::invalid("validation fraction must be in (0, 1)"));
        }
        let total = self.len();
        // floor(frac * len) in integer arithmetic; fractions quantized to
        // parts-per-million so 0.2 * 100_000 is exactly 20_000
        let floor_frac = |frac: f64, len: usize| -> usize {
            let ppm = (frac * 1e6).round() as u128;
            ((ppm * len as u128) / 1_000_000) as usize
        };
        let test_len = floor_frac(1.0 - train_frac, total);
        let train_portion = total - test_len;
        let val_len = floor_frac(val_frac_of_train, train_portion).max(1);
        if val_len > train_portion {
            return Err(Error::invalid("set too small to carve a validation part"));
        }

        let mut indices: Vec<usize> = (0..total).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        shuffle(&mut indices, &mut rng);

        let test = self.gather(&indices[..test_len]);
        let validation = self.gather(&indices[test_len..test_len + val_len]);
        let train = self.gather(&indices[test_len + val_len..]);
        Ok((train, validation, test))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&self.n.to_le_bytes())?;
        w.write_all(&[self.k])?;
        w.write_all(&[self.provenance.source_tag()])?;
        let (seed, reserved) = match self.provenance {
            Provenance::Uniform { seed } => (seed, [0u8; 16]),
            Provenance::Lcg { c0, a, g } => {
                let mut r = [0u8; 16];
                r[..8].copy_from_slice(&a.to_le_bytes());
                r[8..].copy_from_slice(&g.to_le_bytes());
                (c0, r)
            }
        };
        w.write_all(&seed.to_le_bytes())?;
        w.write_all(&reserved)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let record_len = self.record_len();
        for i in 0..self.len() {
            w.write_all(&self.challenge_bytes[i * record_len..(i + 1) * record_len])?;
            w.write_all(&[self.responses[i]])?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, &mut offset)?;
        if &magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected \"CRPX\""));
        }
        let mut byte = [0u8; 1];
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        if byte[0] != VERSION {
            return Err(Error::format(4, format!("unsupported version {}", byte[0])));
        }
        let mut two = [0u8; 2];
        read_exact_at(&mut r, &mut two, &mut offset)?;
        let n = u16::from_le_bytes(two);
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        let k = byte[0];
        if n == 0 || k == 0 {
            return Err(Error::format(5, "stage/component counts must be >= 1"));
        }
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        let source_tag = byte[0];
        if source_tag > 1 {
            return Err(Error::format(8, format!("unknown source tag {source_tag}")));
        }
        let mut eight = [0u8; 8];
        read_exact_at(&mut r, &mut eight, &mut offset)?;
        let seed = u64::from_le_bytes(eight);
        let mut reserved = [0u8; 16];
        read_exact_at(&mut r, &mut reserved, &mut offset)?;
        read_exact_at(&mut r, &mut eight, &mut offset)?;
        let count = u64::from_le_bytes(eight);
        debug_assert_eq!(offset, HEADER_LEN);

        let provenance = match source_tag {
            0 => Provenance::Uniform { seed },
            _ => Provenance::Lcg {
                c0: seed,
                a: u64::from_le_bytes(reserved[..8].try_into().unwrap()),
                g: u64::from_le_bytes(reserved[8..].try_into().unwrap()),
            },
        };

        let record_len = k as usize * (n as usize).div_ceil(8);
        let count = usize::try_from(count)
            .map_err(|_| Error::format(33, "record count exceeds addressable memory"))?;
        let mut challenge_bytes = vec![0u8; count * record_len];
        let mut responses = Vec::with_capacity(count);
        for i in 0..count {
            read_exact_at(
                &mut r,
                &mut challenge_bytes[i * record_len..(i + 1) * record_len],
                &mut offset,
            )?;
            read_exact_at(&mut r, &mut byte, &mut offset)?;
            if byte[0] > 1 {
                return Err(Error::format(
                    offset - 1,
                    format!("response byte must be 0 or 1, found {}", byte[0]),
                ));
            }
            responses.push(byte[0]);
        }
        Ok(Self {
            n,
            k,
            provenance,
            challenge_bytes,
            responses,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    /// Text mirror of the binary content: header `c1_1..c{k}_{n},r`, one
    /// row of bits and the response per record.
    pub fn export_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.n as usize;
        let k = self.k as usize;
        for l in 1..=k {
            for j in 1..=n {
                write!(w, "c{l}_{j},")?;
            }
        }
        writeln!(w, "r")?;
        for rec in self.iter() {
            for c in rec.challenge.components() {
                for &b in c.bits() {
                    write!(w, "{b},")?;
                }
            }
            writeln!(w, "{}", rec.response)?;
        }
        Ok(())
    }

    pub fn export_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.export_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Fisher-Yates with explicit u64 sampling, so the permutation depends
/// only on the ChaCha stream.
pub(crate) fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::puf::ArbiterPuf;
    use num_bigint::BigUint;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_deterministic_and_seed_sensitive() {
        let a = ChallengeBatch::uniform(64, 3, 10, 9).unwrap();
        let b = ChallengeBatch::uniform(64, 3, 10, 9).unwrap();
        let c = ChallengeBatch::uniform(64, 3, 10, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_single_bit_challenges() {
        let batch = ChallengeBatch::uniform(1, 1, 4, 3).unwrap();
        assert_eq!(batch.len(), 4);
        for i in 0..4 {
            let cc = batch.get(i);
            assert_eq!(cc.stage_count(), 1);
            assert!(cc.components()[0].bits()[0] <= 1);
        }
    }

    #[test]
    fn uniform_bit_frequency_is_balanced() {
        // 10^6 bits: empirical frequency within 0.5 ± 0.002.
        let batch = ChallengeBatch::uniform(100, 1, 10_000, 42).unwrap();
        let mut ones = 0u64;
        for i in 0..batch.len() {
            let cc = batch.get(i);
            ones += cc.components()[0].bits().iter().map(|&b| b as u64).sum::<u64>();
        }
        let freq = ones as f64 / 1_000_000.0;
        assert!((freq - 0.5).abs() < 0.002, "bit frequency {freq}");
    }

    #[test]
    fn broadcast_batch_repeats_one_challenge() {
        let batch = ChallengeBatch::uniform_broadcast(33, 4, 20, 5).unwrap();
        for i in 0..batch.len() {
            let cc = batch.get(i);
            let first = &cc.components()[0];
            assert!(cc.components().iter().all(|c| c == first));
        }
    }

    #[test]
    fn lcg_step_matches_modular_arithmetic() {
        let mut lcg = Lcg::new(&LcgParams::new(5, 3, 7), 4).unwrap();
        assert_eq!(lcg.next_state(), 6); // (5*7 + 3) mod 16
        assert_eq!(lcg.next_state(), 1); // (5*6 + 3) mod 16
    }

    #[test]
    fn lcg_identity_params_hold_state_constant() {
        let params = LcgParams::new(1, 0, 11);
        let batch = ChallengeBatch::lcg(4, 2, 6, &params).unwrap();
        let expected = Challenge::new(vec![1, 1, 0, 1]).unwrap(); // 11 = 0b1011, LSB first
        for i in 0..batch.len() {
            for c in batch.get(i).components() {
                assert_eq!(c, &expected);
            }
        }
    }

    #[test]
    fn lcg_full_period_small_modulus() {
        // a=5, g=3, m=16 has full period: one period visits every state.
        let mut lcg = Lcg::new(&LcgParams::new(5, 3, 7), 4).unwrap();
        let mut seen = [false; 16];
        for _ in 0..16 {
            let s = lcg.next_state() as usize;
            assert!(!seen[s], "state {s} repeated within one period");
            seen[s] = true;
        }
        assert!(seen.iter().all(|&v| v));
    }

    #[test]
    fn lcg_default_params_reach_full_period_conditions() {
        // Hull-Dobell for m = 2^K: g odd and a ≡ 1 (mod 4), preserved by
        // truncation; spot-check a small modulus end to end.
        assert_eq!(LcgParams::DEFAULT_A % 4, 1);
        assert_eq!(LcgParams::DEFAULT_G % 2, 1);
        let mut lcg = Lcg::new(&LcgParams::with_seed(0), 8).unwrap();
        let mut seen = vec![false; 256];
        for _ in 0..256 {
            let s = lcg.next_state() as usize;
            assert!(!seen[s]);
            seen[s] = true;
        }
    }

    #[test]
    fn lcg_matches_bigint_reference() {
        // 10^4 steps against an arbitrary-precision evaluation of the
        // recurrence, at both a one-word and a two-word modulus.
        for n in [64usize, 128] {
            let params = LcgParams::with_seed(0xDEAD_BEEF);
            let mut lcg = Lcg::new(&params, n).unwrap();
            let m = BigUint::from(1u8) << n;
            let a = BigUint::from(params.a);
            let g = BigUint::from(params.g);
            let mut state = BigUint::from(params.c0);
            for step in 0..10_000u32 {
                state = (&a * &state + &g) % &m;
                let got = lcg.next_state();
                let want = state.iter_u64_digits().collect::<Vec<_>>();
                let got_lo = (got & u64::MAX as u128) as u64;
                let got_hi = (got >> 64) as u64;
                assert_eq!(want.first().copied().unwrap_or(0), got_lo, "step {step}");
                assert_eq!(want.get(1).copied().unwrap_or(0), got_hi, "step {step}");
            }
        }
    }

    #[test]
    fn build_identical_components_broadcast_gives_zero_responses() {
        let comp = ArbiterPuf::sample(16, 8, 0.0).unwrap();
        let puf = CdcXorPuf::new(vec![comp.clone(), comp]).unwrap();
        let batch = ChallengeBatch::uniform_broadcast(16, 2, 500, 3).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        assert!((0..set.len()).all(|i| set.response(i) == 0));
    }

    #[test]
    fn build_dimension_mismatch_errors() {
        let puf = CdcXorPuf::sample(16, 3, 0, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(16, 2, 5, 0).unwrap();
        assert!(CrpSet::build(&puf, &batch).is_err());
        let batch = ChallengeBatch::uniform(8, 3, 5, 0).unwrap();
        assert!(CrpSet::build(&puf, &batch).is_err());
    }

    #[test]
    fn regeneration_reproduces_identical_set() {
        let puf = CdcXorPuf::sample(32, 3, 17, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(32, 3, 200, 23).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let again = ChallengeBatch::regenerate(32, 3, 200, set.provenance()).unwrap();
        assert_eq!(&again, &batch);
        assert_eq!(CrpSet::build(&puf, &again).unwrap(), set);

        let params = LcgParams::with_seed(99);
        let batch = ChallengeBatch::lcg(32, 3, 200, &params).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let again = ChallengeBatch::regenerate(32, 3, 200, set.provenance()).unwrap();
        assert_eq!(CrpSet::build(&puf, &again).unwrap(), set);
    }

    #[test]
    fn response_mean_is_balanced_on_sampled_instance() {
        // XORed linear-threshold responses over uniform challenges are
        // close to balanced; 10^5 CRPs on a 64-bit CDC-3 instance.
        let puf = CdcXorPuf::sample(64, 3, 7, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(64, 3, 100_000, 8).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let mean =
            (0..set.len()).map(|i| set.response(i) as f64).sum::<f64>() / set.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "response mean {mean}");
    }

    #[test]
    fn split_sizes_follow_the_protocol() {
        let puf = CdcXorPuf::sample(8, 2, 1, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(8, 2, 100_000, 2).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let (train, val, test) = set.split(0.8, 0.01, 5).unwrap();
        assert_eq!(test.len(), 20_000);
        assert_eq!(val.len(), 800);
        assert_eq!(train.len(), 79_200);

        let small = set.gather(&(0..10).collect::<Vec<_>>());
        let (train, val, test) = small.split(0.8, 0.01, 5).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(val.len(), 1);
        assert_eq!(train.len(), 7);
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let puf = CdcXorPuf::sample(9, 2, 4, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(9, 2, 333, 6).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let (train, val, test) = set.split(0.8, 0.01, 41).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), set.len());

        let mut original: Vec<(Vec<u8>, u8)> = (0..set.len())
            .map(|i| (set.record_challenge_bytes(i).to_vec(), set.response(i)))
            .collect();
        let mut rebuilt: Vec<(Vec<u8>, u8)> = Vec::new();
        for part in [&train, &val, &test] {
            for i in 0..part.len() {
                rebuilt.push((part.record_challenge_bytes(i).to_vec(), part.response(i)));
            }
        }
        original.sort();
        rebuilt.sort();
        assert_eq!(original, rebuilt);

        let again = set.split(0.8, 0.01, 41).unwrap();
        assert_eq!(again.0, train);
        assert_eq!(again.1, val);
        assert_eq!(again.2, test);
        let different = set.split(0.8, 0.01, 42).unwrap();
        assert_ne!(different.2, test);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let puf = CdcXorPuf::sample(8, 2, 1, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(8, 2, 50, 2).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        assert!(set.split(0.0, 0.01, 1).is_err());
        assert!(set.split(1.0, 0.01, 1).is_err());
        assert!(set.split(0.8, 0.0, 1).is_err());
        assert!(set.split(0.8, 1.0, 1).is_err());
    }

    #[test]
    fn file_roundtrip_and_layout() {
        let puf = CdcXorPuf::sample(64, 3, 2, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(64, 3, 40, 3).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();

        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        // record payload is k*ceil(n/8) + 1 = 25 bytes for (n=64, k=3)
        assert_eq!(buf.len() as u64, HEADER_LEN + 40 * 25);
        let back = CrpSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, set);

        let mut bad = buf.clone();
        bad[1] = b'!';
        match CrpSet::read_from(bad.as_slice()) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }

        // dropping the final response byte fails exactly at its offset
        match CrpSet::read_from(&buf[..buf.len() - 1]) {
            Err(Error::Format { offset, .. }) => {
                assert_eq!(offset, HEADER_LEN + 40 * 25 - 1)
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn csv_mirrors_records() {
        let puf = CdcXorPuf::sample(5, 2, 3, 0.0).unwrap();
        let batch = ChallengeBatch::uniform(5, 2, 7, 4).unwrap();
        let set = CrpSet::build(&puf, &batch).unwrap();
        let mut out = Vec::new();
        set.export_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("c1_1,"));
        assert!(header.ends_with("c2_5,r"));
        assert_eq!(header.split(',').count(), 11);

        // first data row parses back into record 0
        let row: Vec<u8> = lines
            .next()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        let rec = set.record(0);
        let mut expected: Vec<u8> = rec
            .challenge
            .components()
            .iter()
            .flat_map(|c| c.bits().iter().copied())
            .collect();
        expected.push(rec.response);
        assert_eq!(row, expected);
        assert_eq!(text.lines().count(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn file_roundtrip_property(
            n in 1usize..=128,
            k in 1usize..=10,
            count in 0usize..24,
            seed in any::<u64>(),
            lcg_source in any::<bool>(),
        ) {
            let record_len = k * n.div_ceil(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut challenge_bytes = vec![0u8; record_len * count];
            rng.fill_bytes(&mut challenge_bytes);
            // clear padding bits so the buffer is a valid packed stream
            let comp_bytes = n.div_ceil(8);
            for rec in 0..count {
                for l in 0..k {
                    let end = rec * record_len + (l + 1) * comp_bytes;
                    mask_tail_bits(&mut challenge_bytes[..end], n);
                }
            }
            let responses: Vec<u8> = (0..count).map(|_| (rng.next_u32() & 1) as u8).collect();
            let provenance = if lcg_source {
                Provenance::Lcg { c0: rng.next_u64(), a: rng.next_u64(), g: rng.next_u64() }
            } else {
                Provenance::Uniform { seed: rng.next_u64() }
            };
            let set = CrpSet::from_parts(n, k, provenance, challenge_bytes, responses).unwrap();
            let mut buf = Vec::new();
            set.write_to(&mut buf).unwrap();
            let back = CrpSet::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
