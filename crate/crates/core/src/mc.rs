//! Crude Monte Carlo for the compound annual loss.
//!
//! Annual losses `Z = X₁ + … + X_N` are drawn directly: a count from the
//! frequency law, then that many severities. Large batches are generated in
//! fixed-size chunks, each on its own substream of the run seed, and
//! concatenated in chunk order, so a batch depends only on
//! `(model, count, seed)` and never on the thread count.

use std::io::{BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::dist::{FrequencyModel, SeverityModel};
use crate::error::{Error, Result};
use crate::rng::{substream, UniformSource};

/// Frequency and severity of a single risk cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompoundModel {
    pub frequency: FrequencyModel,
    pub severity: SeverityModel,
}

impl CompoundModel {
    pub fn new(frequency: FrequencyModel, severity: SeverityModel) -> Result<Self> {
        let m = CompoundModel { frequency, severity };
        m.validate()?;
        Ok(m)
    }

    /// Poisson(λ) counts with LogNormal(μ, σ) losses.
    pub fn poisson_lognormal(lambda: f64, mu: f64, sigma: f64) -> Result<Self> {
        Self::new(FrequencyModel::poisson(lambda)?, SeverityModel::lognormal(mu, sigma)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.frequency.validate()?;
        self.severity.validate()
    }

    /// `E[Z] = E[N]·E[X]`.
    pub fn mean(&self) -> f64 {
        let n = self.frequency.mean();
        if n == 0.0 {
            0.0
        } else {
            n * self.severity.mean()
        }
    }

    /// Probability of the no-loss year, the atom of `Z` at zero.
    pub fn zero_mass(&self) -> f64 {
        // severities are a.s. positive
        self.frequency.pgf(0.0)
    }

    /// FNV-1a hash of the canonical JSON form, as 16 hex digits.
    pub fn hash_hex(&self) -> String {
        let text = serde_json::to_string(self).expect("model serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in text.bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    /// `count` annual losses from a single stream.
    pub fn simulate_from<S: UniformSource + ?Sized>(&self, count: usize, src: &mut S) -> Result<Vec<f64>> {
        let counts = self.frequency.sampler()?;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let n = counts.sample(src)?;
            let mut z = 0.0;
            for _ in 0..n {
                z += self.severity.sample(src)?;
            }
            out.push(z);
        }
        Ok(out)
    }

    /// `count` annual losses, generated in parallel chunks keyed by `seed`.
    pub fn simulate(&self, count: usize, seed: u64) -> Result<SampleBatch> {
        if count == 0 {
            return Err(Error::domain("sample count must be at least 1"));
        }
        let chunks: Vec<(usize, usize)> = (0..count)
            .step_by(CHUNK)
            .enumerate()
            .map(|(i, start)| (i, CHUNK.min(count - start)))
            .collect();
        let parts: Result<Vec<Vec<f64>>> = chunks
            .par_iter()
            .map(|&(i, len)| {
                let mut rng = substream(seed, &[STREAM_MC, i as u64]);
                self.simulate_from(len, &mut rng)
            })
            .collect();
        let values = parts?.concat();
        Ok(SampleBatch {
            values,
            seed,
            model_hash: self.hash_hex(),
        })
    }
}

const CHUNK: usize = 1 << 16;
const STREAM_MC: u64 = 0x4d43;

/// Simulated annual losses with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub values: Vec<f64>,
    pub seed: u64,
    pub model_hash: String,
}

/// Quantile point estimate with an order-statistic confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantileCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sorted(&self) -> Result<SortedSample> {
        SortedSample::new(self.values.clone())
    }

    /// See [`SortedSample::quantile_ci`].
    pub fn empirical_quantile_ci(&self, alpha: f64, level: f64) -> Result<QuantileCi> {
        self.sorted()?.quantile_ci(alpha, level)
    }

    /// Fraction of years with loss above `threshold`, and the variance
    /// `p(1 − p)/T` of that fraction.
    pub fn tail_probability(&self, threshold: f64) -> Result<(f64, f64)> {
        if self.values.is_empty() {
            return Err(Error::EmptySample);
        }
        let hits = self.values.iter().filter(|&&z| z > threshold).count();
        let t = self.values.len() as f64;
        let p = hits as f64 / t;
        Ok((p, p * (1.0 - p) / t))
    }

    /// CSV: a `# model_hash=… seed=…` comment, the column name, one value per line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# model_hash={} seed={}", self.model_hash, self.seed)?;
        writeln!(w, "annual_loss")?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Io("missing header".into()))??;
        let mut model_hash = None;
        let mut seed = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            if let Some(v) = field.strip_prefix("model_hash=") {
                model_hash = Some(v.to_string());
            } else if let Some(v) = field.strip_prefix("seed=") {
                seed = v.parse().ok();
            }
        }
        let (Some(model_hash), Some(seed)) = (model_hash, seed) else {
            return Err(Error::Io(format!("malformed header: {header}")));
        };
        match lines.next() {
            Some(Ok(col)) if col.trim() == "annual_loss" => {}
            _ => return Err(Error::Io("missing annual_loss column".into())),
        }
        let mut values = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            values.push(
                line.trim()
                    .parse()
                    .map_err(|e| Error::Io(format!("bad value {line:?}: {e}")))?,
            );
        }
        Ok(SampleBatch {
            values,
            seed,
            model_hash,
        })
    }

    /// Flat little-endian binary: magic `LDAB`, seed, hash, count, values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let hash = u64::from_str_radix(&self.model_hash, 16).unwrap_or(0);
        w.write_all(b"LDAB")?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&hash.to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"LDAB" {
            return Err(Error::Io("not a sample batch file".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let seed = u64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let hash = u64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        Ok(SampleBatch {
            values,
            seed,
            model_hash: format!("{hash:016x}"),
        })
    }
}

/// Ascending sample for repeated quantile queries.
#[derive(Debug, Clone)]
pub struct SortedSample {
    values: Vec<f64>,
}

impl SortedSample {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        values.sort_unstable_by(f64::total_cmp);
        Ok(SortedSample { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// 1-based rank of the generalized inverse: smallest k with k/T ≥ α.
    fn rank(&self, alpha: f64) -> usize {
        let t = self.values.len();
        let mut k = ((alpha * t as f64).ceil() as usize).clamp(1, t);
        while k > 1 && (k - 1) as f64 / t as f64 >= alpha {
            k -= 1;
        }
        while k < t && (k as f64 / t as f64) < alpha {
            k += 1;
        }
        k
    }

    /// `inf{x : F̂(x) ≥ α}`.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!("quantile level {alpha} outside (0, 1)")));
        }
        Ok(self.values[self.rank(alpha) - 1])
    }

    /// Generalized-inverse point estimate with a distribution-free interval
    /// from binomial order-statistic ranks: the number of draws below the
    /// true quantile is Binomial(T, α).
    pub fn quantile_ci(&self, alpha: f64, level: f64) -> Result<QuantileCi> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::domain(format!("confidence level {level} outside (0, 1)")));
        }
        let point = self.quantile(alpha)?;
        let t = self.values.len();
        let binom = Binomial::new(alpha, t as u64).map_err(|e| Error::domain(e.to_string()))?;
        let tail = 0.5 * (1.0 - level);
        let lo_rank = (binom.inverse_cdf(tail) as usize).clamp(1, t);
        let hi_rank = (binom.inverse_cdf(1.0 - tail) as usize + 1).clamp(1, t);
        Ok(QuantileCi {
            point,
            lower: self.values[lo_rank - 1],
            upper: self.values[hi_rank - 1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::root;

    #[test]
    fn zero_rate_gives_zero_losses() {
        let m = CompoundModel::poisson_lognormal(0.0, 2.0, 0.5).unwrap();
        let b = m.simulate(1000, 1).unwrap();
        assert!(b.values.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn degenerate_severity_counts_losses() {
        let m = CompoundModel::new(
            FrequencyModel::poisson(2.0).unwrap(),
            SeverityModel::degenerate(1.0).unwrap(),
        )
        .unwrap();
        let b = m.simulate(200_000, 2).unwrap();
        let n = b.len() as f64;
        let mean = b.values.iter().sum::<f64>() / n;
        assert!(b.values.iter().all(|z| z.fract() == 0.0));
        assert!((mean - 2.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn generalized_inverse_on_uniform_grid() {
        let s = SortedSample::new((1..=100).map(|i| i as f64).collect()).unwrap();
        assert_eq!(s.quantile(0.5).unwrap(), 50.0);
        assert_eq!(s.quantile(0.07).unwrap(), 7.0);
        assert_eq!(s.quantile(0.071).unwrap(), 8.0);
        assert_eq!(s.quantile(0.999).unwrap(), 100.0);
        let ci = s.quantile_ci(0.5, 0.95).unwrap();
        assert!(ci.lower <= 50.0 && ci.upper >= 50.0);
        assert!(ci.lower >= 38.0 && ci.upper <= 62.0);
    }

    #[test]
    fn tail_probability_cases() {
        let b = SampleBatch {
            values: (1..=10).map(|i| i as f64).collect(),
            seed: 0,
            model_hash: "0".into(),
        };
        assert_eq!(b.tail_probability(0.0).unwrap(), (1.0, 0.0));
        let (p, v) = b.tail_probability(7.0).unwrap();
        assert!((p - 0.3).abs() < 1e-15);
        assert!((v - 0.021).abs() < 1e-15);
        let empty = SampleBatch {
            values: vec![],
            seed: 0,
            model_hash: "0".into(),
        };
        assert_eq!(empty.tail_probability(1.0), Err(Error::EmptySample));
        assert_eq!(empty.empirical_quantile_ci(0.5, 0.95).unwrap_err(), Error::EmptySample);
    }

    #[test]
    fn batches_are_deterministic() {
        let m = CompoundModel::poisson_lognormal(2.0, 2.0, 0.5).unwrap();
        let a = m.simulate(150_000, 9).unwrap();
        let b = m.simulate(150_000, 9).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = m.simulate(150_000, 10).unwrap();
        assert_ne!(a.values, c.values);
        let mut r1 = root(4);
        let mut r2 = root(4);
        assert_eq!(
            m.simulate_from(100, &mut r1).unwrap(),
            m.simulate_from(100, &mut r2).unwrap()
        );
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let m = CompoundModel::poisson_lognormal(2.0, 2.0, 0.5).unwrap();
        let b = m.simulate(500, 3).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert!(
            String::from_utf8_lossy(&buf).starts_with(&format!("# model_hash={} seed=3\nannual_loss\n", b.model_hash))
        );
        assert_eq!(SampleBatch::read_csv(&buf[..]).unwrap(), b);
        let mut bin = Vec::new();
        b.write_binary(&mut bin).unwrap();
        assert_eq!(SampleBatch::read_binary(&bin[..]).unwrap(), b);
    }
}
