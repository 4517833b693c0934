//! Spectral hyperprior: a uniform box in the complex plane and
//! conjugate-closed eigenvalue sampling with frozen base draws.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Uniform distribution on `{s + iω : s ∈ [−scale_real, scale_real] + bias_real,
/// ω ∈ [−scale_imag, scale_imag] + bias_imag}` (normalized time units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralPrior {
    pub scale_real: f64,
    pub bias_real: f64,
    pub scale_imag: f64,
    pub bias_imag: f64,
}

impl SpectralPrior {
    pub fn new(scale_real: f64, bias_real: f64, scale_imag: f64, bias_imag: f64) -> Result<Self> {
        let p = SpectralPrior {
            scale_real,
            bias_real,
            scale_imag,
            bias_imag,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.scale_real, self.bias_real, self.scale_imag, self.bias_imag];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("spectral prior parameters must be finite"));
        }
        if self.scale_real < 0.0 || self.scale_imag < 0.0 {
            return Err(Error::invalid("spectral prior scales must be nonnegative"));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.scale_real, self.bias_real, self.scale_imag, self.bias_imag]
    }
}

impl Default for SpectralPrior {
    /// `(1, 0, 15, 0)`: real parts in `[−1, 1]`, imaginary parts in `[−15, 15]`.
    fn default() -> Self {
        SpectralPrior {
            scale_real: 1.0,
            bias_real: 0.0,
            scale_imag: 15.0,
            bias_imag: 0.0,
        }
    }
}

/// Role of one eigenvalue relative to its base draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Member {
    /// `s + iω` with `ω = bias_imag + scale_imag·v`.
    Upper,
    /// The conjugate `s − iω`.
    Lower,
    /// Forced real (odd `D`): `s + 0i`.
    Real,
}

/// `D` eigenvalues closed under conjugation.
///
/// Layout: for base draw `k < ⌊D/2⌋` the eigenvalues `2k` and `2k+1` are the
/// upper member and its conjugate; for odd `D` the last eigenvalue is real and
/// comes from the last draw. Base draws `(u, v) ∈ [0,1]²` map to
/// `s = bias_real + scale_real·(2u − 1)`, `ω = bias_imag + scale_imag·v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    /// Empty for fixed spectra that cannot be reparameterized.
    pub base_draws: Vec<[f64; 2]>,
    pub seed: u64,
    pub prior: Option<SpectralPrior>,
}

pub fn sample_spectrum(prior: &SpectralPrior, d: usize, seed: u64) -> Result<Spectrum> {
    if d == 0 {
        return Err(Error::invalid("spectrum needs at least one eigenvalue"));
    }
    prior.validate()?;
    let mut rng = seed::rng(seed::derive(seed, "spectrum"));
    let draws = (0..d.div_ceil(2))
        .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
        .collect();
    Ok(build(prior, d, draws, seed))
}

fn build(prior: &SpectralPrior, d: usize, base_draws: Vec<[f64; 2]>, seed: u64) -> Spectrum {
    let mut eigenvalues = Vec::with_capacity(d);
    for (k, [u, v]) in base_draws.iter().enumerate() {
        let s = prior.bias_real + prior.scale_real * (2.0 * u - 1.0);
        if 2 * k + 1 < d {
            let w = prior.bias_imag + prior.scale_imag * v;
            eigenvalues.push(Complex64::new(s, w));
            eigenvalues.push(Complex64::new(s, -w));
        } else {
            eigenvalues.push(Complex64::new(s, 0.0));
        }
    }
    Spectrum {
        eigenvalues,
        base_draws,
        seed,
        prior: Some(*prior),
    }
}

impl Spectrum {
    /// Fixed spectrum (e.g. a known system spectrum). Must be conjugate-closed.
    pub fn fixed(eigenvalues: Vec<Complex64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::invalid("spectrum needs at least one eigenvalue"));
        }
        let s = Spectrum {
            eigenvalues,
            base_draws: Vec::new(),
            seed: 0,
            prior: None,
        };
        if !s.is_conjugate_closed(1e-12) {
            return Err(Error::invalid("fixed spectrum is not closed under conjugation"));
        }
        Ok(s)
    }

    /// `eigenvalues` repeated cyclically up to length `d`.
    pub fn tiled(eigenvalues: &[Complex64], d: usize) -> Result<Self> {
        if eigenvalues.is_empty() || d % eigenvalues.len() != 0 {
            return Err(Error::invalid("tiled length must be a multiple of the base set"));
        }
        Self::fixed(eigenvalues.iter().cycle().take(d).copied().collect())
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn is_reparameterizable(&self) -> bool {
        !self.base_draws.is_empty()
    }

    /// Affine image of the stored base draws under a new prior.
    pub fn reparameterize(&self, prior: &SpectralPrior) -> Result<Spectrum> {
        if !self.is_reparameterizable() {
            return Err(Error::invalid("spectrum has no base draws to reparameterize"));
        }
        prior.validate()?;
        Ok(build(prior, self.len(), self.base_draws.clone(), self.seed))
    }

    /// Base draw index and member role of eigenvalue `j`.
    pub fn member(&self, j: usize) -> (usize, Member) {
        let k = j / 2;
        if j % 2 == 1 {
            (k, Member::Lower)
        } else if j + 1 < self.len() {
            (k, Member::Upper)
        } else {
            (k, Member::Real)
        }
    }

    /// Multiset equality of the eigenvalues and their conjugates.
    pub fn is_conjugate_closed(&self, tol: f64) -> bool {
        let mut used = vec![false; self.len()];
        for lam in &self.eigenvalues {
            let target = lam.conj();
            let hit = self
                .eigenvalues
                .iter()
                .enumerate()
                .position(|(i, mu)| !used[i] && (mu - target).norm() <= tol);
            match hit {
                Some(i) => used[i] = true,
                None => return false,
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_box_gives_zeros() {
        let prior = SpectralPrior::new(0.0, 0.0, 0.0, 0.0).unwrap();
        for d in [1, 2, 7] {
            let s = sample_spectrum(&prior, d, 3).unwrap();
            assert_eq!(s.len(), d);
            assert!(s.eigenvalues.iter().all(|l| l.re == 0.0 && l.im == 0.0));
        }
    }

    #[test]
    fn default_box_64() {
        let s = sample_spectrum(&SpectralPrior::default(), 64, 11).unwrap();
        assert_eq!(s.len(), 64);
        assert_eq!(s.base_draws.len(), 32);
        for pair in s.eigenvalues.chunks(2) {
            assert_eq!(pair[0], pair[1].conj());
        }
        assert!(s.eigenvalues.iter().all(|l| l.re.abs() <= 1.0 && l.im.abs() <= 15.0));
        assert!(s.is_conjugate_closed(0.0));
    }

    #[test]
    fn odd_count_has_one_real() {
        let prior = SpectralPrior::new(1.0, 0.0, 15.0, 2.0).unwrap();
        let s = sample_spectrum(&prior, 5, 1).unwrap();
        assert_eq!(s.eigenvalues.iter().filter(|l| l.im == 0.0).count(), 1);
        assert_eq!(s.member(4), (2, Member::Real));
        assert!(s.is_conjugate_closed(0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = SpectralPrior::default();
        assert_eq!(sample_spectrum(&p, 9, 5).unwrap(), sample_spectrum(&p, 9, 5).unwrap());
        assert_ne!(sample_spectrum(&p, 9, 5).unwrap(), sample_spectrum(&p, 9, 6).unwrap());
    }

    #[test]
    fn reparameterize_affine_maps() {
        let p = SpectralPrior::new(1.0, 0.2, 15.0, 0.5).unwrap();
        let s = sample_spectrum(&p, 8, 2).unwrap();
        assert_eq!(s.reparameterize(&p).unwrap(), s);

        let mut wide = p;
        wide.scale_imag *= 2.0;
        let w = s.reparameterize(&wide).unwrap();
        for j in (0..8).step_by(2) {
            let before = s.eigenvalues[j].im - p.bias_imag;
            let after = w.eigenvalues[j].im - p.bias_imag;
            assert!((after - 2.0 * before).abs() < 1e-12);
        }

        let mut shifted = p;
        shifted.bias_real += 0.5;
        let sh = s.reparameterize(&shifted).unwrap();
        for (a, b) in s.eigenvalues.iter().zip(&sh.eigenvalues) {
            assert!((b.re - a.re - 0.5).abs() < 1e-12);
            assert_eq!(a.im, b.im);
        }
    }

    #[test]
    fn fixed_spectrum_checks() {
        let six = Complex64::new(0.0, 6.0);
        let t = Spectrum::tiled(&[six, six.conj()], 64).unwrap();
        assert_eq!(t.len(), 64);
        assert!(t.reparameterize(&SpectralPrior::default()).is_err());
        assert!(Spectrum::fixed(vec![six]).is_err());
    }

    #[test]
    fn four_degrees_of_freedom() {
        // Any spectrum with base draws is fully determined by its prior.
        let s = sample_spectrum(&SpectralPrior::default(), 256, 0).unwrap();
        assert_eq!(s.prior.unwrap().as_array().len(), 4);
        assert_eq!(s.reparameterize(&s.prior.unwrap()).unwrap(), s);
    }

    #[test]
    fn json_round_trip() {
        let s = sample_spectrum(&SpectralPrior::default(), 6, 4).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        let back: Spectrum = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    fn prior_strategy() -> impl Strategy<Value = SpectralPrior> {
        (0.0f64..5.0, -3.0f64..3.0, 0.0f64..30.0, -3.0f64..3.0)
            .prop_map(|(a, b, c, d)| SpectralPrior::new(a, b, c, d).unwrap())
    }

    proptest! {
        #[test]
        fn outsourcing_consistency(p in prior_strategy(), q in prior_strategy(), d in 1usize..40, seed in 0u64..1000) {
            let direct = sample_spectrum(&q, d, seed).unwrap();
            let via = sample_spectrum(&p, d, seed).unwrap().reparameterize(&q).unwrap();
            prop_assert_eq!(&direct.eigenvalues, &via.eigenvalues);
            prop_assert!(via.is_conjugate_closed(0.0));
        }
    }
}
