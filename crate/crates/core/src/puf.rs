//! Additive delay-difference model for arbiter-based PUFs.
//!
//! An n-stage arbiter PUF is modeled by n stage weights plus one bias
//! weight. A challenge is mapped to a vector of ±1 parity features, and
//! the response is the sign of the weighted feature sum: `response = 1`
//! iff `w · [Φ(c); 1] > 0` (a delta of exactly 0 maps to 0). XOR and
//! component-differentially-challenged (CDC) variants combine k such
//! arbiters with an XOR over their response bits; the only difference is
//! whether one challenge is broadcast to every component or each
//! component receives its own.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// A challenge: one bit per stage, each exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Challenge {
    bits: Vec<u8>,
}

impl Challenge {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("challenge must have at least one bit"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("challenge bits must be 0 or 1"));
        }
        Ok(Self { bits })
    }

    /// Unpacks `n` bits stored LSB-first (bit 0 of byte 0 is challenge bit 1).
    pub fn from_packed(bytes: &[u8], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("challenge must have at least one bit"));
        }
        if bytes.len() < n.div_ceil(8) {
            return Err(Error::invalid("packed challenge buffer too short"));
        }
        let bits = (0..n).map(|j| (bytes[j / 8] >> (j % 8)) & 1).collect();
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Packs the bits LSB-first into `ceil(n/8)` bytes.
    pub fn pack_into(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.resize(start + self.bits.len().div_ceil(8), 0);
        for (j, &b) in self.bits.iter().enumerate() {
            out[start + j / 8] |= b << (j % 8);
        }
    }
}

/// A full query to a CDC-XOR PUF: one challenge per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdcChallenge {
    sub: Vec<Challenge>,
}

impl CdcChallenge {
    pub fn new(sub: Vec<Challenge>) -> Result<Self> {
        if sub.is_empty() {
            return Err(Error::invalid("need at least one sub-challenge"));
        }
        let n = sub[0].len();
        if sub.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("sub-challenges must share one stage count"));
        }
        Ok(Self { sub })
    }

    /// The XOR-PUF special case: the same challenge for all k components.
    pub fn broadcast(c: Challenge, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("need at least one sub-challenge"));
        }
        Ok(Self {
            sub: vec![c; k],
        })
    }

    pub fn component_count(&self) -> usize {
        self.sub.len()
    }

    pub fn stage_count(&self) -> usize {
        self.sub[0].len()
    }

    pub fn components(&self) -> &[Challenge] {
        &self.sub
    }
}

/// Parity-transformed challenge: n values in {−1.0, +1.0}.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    features: Vec<f64>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Fills `out[i] = Π_{j=i..n-1} (1 − 2·bits[j])`, the suffix-parity features.
pub(crate) fn fill_parity_features(bits: &[u8], out: &mut [i8]) {
    debug_assert_eq!(bits.len(), out.len());
    let mut acc = 1i8;
    for i in (0..bits.len()).rev() {
        acc *= 1 - 2 * bits[i] as i8;
        out[i] = acc;
    }
}

/// Same as [`fill_parity_features`] but reading bits packed LSB-first.
pub(crate) fn fill_parity_features_packed(bytes: &[u8], n: usize, out: &mut [i8]) {
    debug_assert!(bytes.len() >= n.div_ceil(8));
    debug_assert_eq!(out.len(), n);
    let mut acc = 1i8;
    for i in (0..n).rev() {
        let bit = (bytes[i / 8] >> (i % 8)) & 1;
        acc *= 1 - 2 * bit as i8;
        out[i] = acc;
    }
}

/// Maps a challenge to the feature vector under which the arbiter delay
/// difference is linear: Φ_i = Π_{j=i..n} (1 − 2·c_j).
pub fn transform_challenge(c: &Challenge) -> FeatureVector {
    let mut buf = vec![0i8; c.len()];
    fill_parity_features(c.bits(), &mut buf);
    FeatureVector {
        features: buf.into_iter().map(f64::from).collect(),
    }
}

/// One simulated arbiter PUF: n stage weights plus a bias weight, and an
/// optional per-evaluation Gaussian noise level on the delay difference.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbiterPuf {
    weights: Vec<f64>,
    noise_sigma: f64,
}

impl ArbiterPuf {
    pub fn new(weights: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::invalid(
                "weight vector must have n+1 entries with n >= 1",
            ));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be finite and >= 0"));
        }
        Ok(Self {
            weights,
            noise_sigma,
        })
    }

    /// Draws n+1 weights i.i.d. from N(0, 1) using the seeded generator.
    pub fn sample(n: usize, seed: u64, noise_sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("stage count must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::sample_from(n, &mut rng, noise_sigma)
    }

    fn sample_from(n: usize, rng: &mut ChaCha8Rng, noise_sigma: f64) -> Result<Self> {
        let weights = (0..n + 1)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::new(weights, noise_sigma)
    }

    pub fn stage_count(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Evaluates one challenge, returning `(response, delta)` where
    /// `delta = Σ_i w_i·Φ_i(c) + w_{n+1}` plus N(0, σ) noise when σ > 0,
    /// and `response = 1` iff `delta > 0`.
    pub fn eval(&self, c: &Challenge, noise: Option<&mut ChaCha8Rng>) -> Result<(u8, f64)> {
        if c.len() != self.stage_count() {
            return Err(Error::invalid(format!(
                "challenge length {} does not match stage count {}",
                c.len(),
                self.stage_count()
            )));
        }
        let mut feat = vec![0i8; c.len()];
        fill_parity_features(c.bits(), &mut feat);
        let mut delta = self.delta_from_features(&feat);
        if self.noise_sigma > 0.0 {
            let rng = noise.ok_or_else(|| {
                Error::invalid("noise sigma > 0 requires a noise generator")
            })?;
            let eps: f64 = StandardNormal.sample(rng);
            delta += self.noise_sigma * eps;
        }
        Ok(((delta > 0.0) as u8, delta))
    }

    pub(crate) fn delta_from_features(&self, feat: &[i8]) -> f64 {
        let n = self.stage_count();
        let mut delta = self.weights[n];
        for (w, &f) in self.weights[..n].iter().zip(feat) {
            delta += w * f as f64;
        }
        delta
    }
}

/// k component arbiter PUFs whose response bits are XORed. Evaluating with
/// per-component challenges gives the CDC behavior; broadcasting a single
/// challenge gives the plain XOR-PUF.
#[derive(Debug, Clone, PartialEq)]
pub struct CdcXorPuf {
    components: Vec<ArbiterPuf>,
}

impl CdcXorPuf {
    pub fn new(components: Vec<ArbiterPuf>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("component count must be >= 1"));
        }
        let n = components[0].stage_count();
        if components.iter().any(|c| c.stage_count() != n) {
            return Err(Error::invalid("components must share one stage count"));
        }
        Ok(Self { components })
    }

    /// Samples k components of n stages each, all weights i.i.d. N(0, 1)
    /// from the seeded generator. Identical seeds reproduce identical
    /// instances bit for bit.
    pub fn sample(n: usize, k: usize, seed: u64, noise_sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("stage count must be >= 1"));
        }
        if k == 0 {
            return Err(Error::invalid("component count must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let components = (0..k)
            .map(|_| ArbiterPuf::sample_from(n, &mut rng, noise_sigma))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { components })
    }

    pub fn stage_count(&self) -> usize {
        self.components[0].stage_count()
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[ArbiterPuf] {
        &self.components
    }

    /// XOR of the k component responses, component l evaluated on
    /// `cc.components()[l]`.
    pub fn eval_cdc(&self, cc: &CdcChallenge, mut noise: Option<&mut ChaCha8Rng>) -> Result<u8> {
        if cc.component_count() != self.component_count() {
            return Err(Error::invalid(format!(
                "challenge has {} sub-challenges, PUF has {} components",
                cc.component_count(),
                self.component_count()
            )));
        }
        let mut response = 0u8;
        for (puf, c) in self.components.iter().zip(cc.components()) {
            let (bit, _) = puf.eval(c, noise.as_deref_mut())?;
            response ^= bit;
        }
        Ok(response)
    }

    /// XOR-PUF evaluation: the challenge is broadcast to every component.
    pub fn eval_xor(&self, c: &Challenge, mut noise: Option<&mut ChaCha8Rng>) -> Result<u8> {
        if c.len() != self.stage_count() {
            return Err(Error::invalid(format!(
                "challenge length {} does not match stage count {}",
                c.len(),
                self.stage_count()
            )));
        }
        let mut response = 0u8;
        for puf in &self.components {
            let (bit, _) = puf.eval(c, noise.as_deref_mut())?;
            response ^= bit;
        }
        Ok(response)
    }

    /// Noiseless fast path over a packed record: k consecutive blocks of
    /// `ceil(n/8)` challenge bytes, component-major. `scratch` must have
    /// length n.
    pub(crate) fn eval_packed(&self, record: &[u8], scratch: &mut [i8]) -> u8 {
        let n = self.stage_count();
        let comp_bytes = n.div_ceil(8);
        let mut response = 0u8;
        for (l, puf) in self.components.iter().enumerate() {
            let bytes = &record[l * comp_bytes..(l + 1) * comp_bytes];
            fill_parity_features_packed(bytes, n, scratch);
            let delta = puf.delta_from_features(scratch);
            response ^= (delta > 0.0) as u8;
        }
        response
    }

    /// Writes the instance: "PUFI" magic, version, (n, k, noiseSigma)
    /// header, then k·(n+1) weights as little-endian f64. All components
    /// must share one noise sigma.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.stage_count();
        let k = self.component_count();
        if n > u16::MAX as usize {
            return Err(Error::invalid("stage count exceeds format limit (u16)"));
        }
        if k > u8::MAX as usize {
            return Err(Error::invalid("component count exceeds format limit (u8)"));
        }
        let sigma = self.components[0].noise_sigma();
        if self.components.iter().any(|c| c.noise_sigma() != sigma) {
            return Err(Error::invalid(
                "instance file requires one shared noise sigma",
            ));
        }
        w.write_all(b"PUFI")?;
        w.write_all(&[1u8])?;
        w.write_all(&(n as u16).to_le_bytes())?;
        w.write_all(&[k as u8])?;
        w.write_all(&sigma.to_le_bytes())?;
        for comp in &self.components {
            for weight in comp.weights() {
                w.write_all(&weight.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut offset = 0u64;
        let mut magic = [0u8; 4];
        read_exact_at(&mut r, &mut magic, &mut offset)?;
        if &magic != b"PUFI" {
            return Err(Error::format(0, "bad magic, expected \"PUFI\""));
        }
        let mut byte = [0u8; 1];
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        if byte[0] != 1 {
            return Err(Error::format(4, format!("unsupported version {}", byte[0])));
        }
        let mut n_bytes = [0u8; 2];
        read_exact_at(&mut r, &mut n_bytes, &mut offset)?;
        let n = u16::from_le_bytes(n_bytes) as usize;
        read_exact_at(&mut r, &mut byte, &mut offset)?;
        let k = byte[0] as usize;
        if n == 0 || k == 0 {
            return Err(Error::format(5, "stage/component counts must be >= 1"));
        }
        let mut f = [0u8; 8];
        read_exact_at(&mut r, &mut f, &mut offset)?;
        let sigma = f64::from_le_bytes(f);
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::format(8, "noise sigma must be finite and >= 0"));
        }
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let mut weights = Vec::with_capacity(n + 1);
            for _ in 0..n + 1 {
                read_exact_at(&mut r, &mut f, &mut offset)?;
                weights.push(f64::from_le_bytes(f));
            }
            components.push(ArbiterPuf::new(weights, sigma)?);
        }
        Self::new(components)
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
}

pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(*offset, "unexpected end of file")
        } else {
            Error::Io(e)
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}
