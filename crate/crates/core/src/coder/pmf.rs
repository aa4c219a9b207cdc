use crate::{Error, Result};

pub const ALPHABET: usize = 16;
pub const PMF_BITS: u32 = 16;
pub const PMF_TOTAL: u32 = 1 << PMF_BITS;

/// Integer frequencies over 16 symbols; every entry is at least 1 and the
/// entries sum to `PMF_TOTAL`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedPmf {
    freqs: [u32; ALPHABET],
    cum: [u32; ALPHABET + 1],
}

impl QuantizedPmf {
    pub fn from_freqs(freqs: [u32; ALPHABET]) -> Result<Self> {
        if freqs.contains(&0) {
            return Err(Error::InvalidPmf("zero frequency".into()));
        }
        let mut cum = [0u32; ALPHABET + 1];
        for s in 0..ALPHABET {
            cum[s + 1] = cum[s] + freqs[s];
        }
        if cum[ALPHABET] != PMF_TOTAL {
            return Err(Error::InvalidPmf(format!("frequencies sum to {}", cum[ALPHABET])));
        }
        Ok(Self { freqs, cum })
    }

    pub fn uniform() -> Self {
        Self::from_freqs([PMF_TOTAL / ALPHABET as u32; ALPHABET]).unwrap()
    }

    pub fn freqs(&self) -> &[u32; ALPHABET] {
        &self.freqs
    }

    #[inline]
    pub fn freq(&self, s: usize) -> u32 {
        self.freqs[s]
    }

    #[inline]
    pub fn cum(&self, s: usize) -> u32 {
        self.cum[s]
    }

    /// Symbol whose cumulative interval contains `target`.
    #[inline]
    pub fn symbol_for(&self, target: u32) -> usize {
        // cum[0] = 0 <= target < PMF_TOTAL = cum[16]
        let mut s = 0;
        while self.cum[s + 1] <= target {
            s += 1;
        }
        s
    }

    /// Ideal code length of `s` in bits.
    pub fn cost_bits(&self, s: usize) -> f64 {
        f64::from(PMF_BITS) - f64::from(self.freqs[s]).log2()
    }
}

/// Largest-remainder apportionment of `p` onto `PMF_TOTAL` with a floor of
/// one per symbol; remainder ties go to the lower index.
pub fn quantize_pmf(p: &[f32; ALPHABET]) -> Result<QuantizedPmf> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidPmf(format!("non-finite or negative entry in {p:?}")));
    }
    let sum: f64 = p.iter().map(|&v| f64::from(v)).sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidPmf(format!("entries sum to {sum}")));
    }
    let spare = f64::from(PMF_TOTAL - ALPHABET as u32);
    let mut freqs = [1u32; ALPHABET];
    let mut rem = [0f64; ALPHABET];
    let mut given = 0u32;
    for s in 0..ALPHABET {
        let share = f64::from(p[s]) / sum * spare;
        let whole = share.floor();
        freqs[s] += whole as u32;
        given += whole as u32;
        rem[s] = share - whole;
    }
    let mut order: Vec<usize> = (0..ALPHABET).collect();
    order.sort_by(|&a, &b| rem[b].total_cmp(&rem[a]).then(a.cmp(&b)));
    let left = (PMF_TOTAL - ALPHABET as u32) - given;
    for &s in order.iter().cycle().take(left as usize) {
        freqs[s] += 1;
    }
    QuantizedPmf::from_freqs(freqs)
}
