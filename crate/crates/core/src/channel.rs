//! Synthetic pilot/CSI data.
//!
//! Channels are tapped multipath with per-path Doppler:
//!
//! ```text
//! H[f, t] = sum_p a_p * exp(-j 2 pi f tau_p / F) * exp(j 2 pi nu_p t)
//! ```
//!
//! with `a_p ~ CN(0, 1/P)`, integer delays `tau_p ~ U{0..=max_delay_taps}` and
//! normalized Doppler shifts `nu_p ~ U[-doppler_spread, doppler_spread]`.
//! The network input is the grid observed at a pilot lattice with additive
//! `CN(0, sigma^2)` noise, bilinearly interpolated (edge-clamped) back to the
//! full grid. Complex grids are split into two real channels `[re, im]`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackMode;
use crate::error::{Error, Result};
use crate::nn::TrainingPair;
use crate::rng::{self, SimRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    /// Subcarriers.
    pub grid_height: usize,
    /// OFDM symbols.
    pub grid_width: usize,
    pub path_count: usize,
    pub max_delay_taps: usize,
    /// Normalized Doppler (cycles per OFDM symbol).
    pub doppler_spread: f64,
    pub pilot_noise_stddev: f64,
    pub pilot_row_stride: usize,
    pub pilot_col_stride: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            grid_height: 72,
            grid_width: 14,
            path_count: 4,
            max_delay_taps: 4,
            doppler_spread: 0.01,
            pilot_noise_stddev: 0.05,
            pilot_row_stride: 2,
            pilot_col_stride: 2,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("channel: {m}")));
        if self.pilot_row_stride == 0 || self.pilot_col_stride == 0 {
            return bad("pilot strides must be >= 1");
        }
        if self.grid_height < self.pilot_row_stride || self.grid_width < self.pilot_col_stride {
            return bad("grid dimensions must be >= pilot strides");
        }
        if self.path_count == 0 {
            return bad("path_count must be >= 1");
        }
        if !(self.pilot_noise_stddev >= 0.0) || !self.pilot_noise_stddev.is_finite() {
            return bad("pilot_noise_stddev must be finite and >= 0");
        }
        if !(self.doppler_spread >= 0.0) || !self.doppler_spread.is_finite() {
            return bad("doppler_spread must be finite and >= 0");
        }
        Ok(())
    }

    pub fn sample_dims(&self) -> [usize; 3] {
        [self.grid_height, self.grid_width, 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn get(&self, f: usize, t: usize) -> Complex64 {
        self.data[f * self.width + t]
    }

    /// Real/imaginary split into an `[h, w, 2]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len() * 2);
        for z in &self.data {
            out.push(z.re);
            out.push(z.im);
        }
        Tensor::from_vec(&[self.height, self.width, 2], out).expect("grid dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, 2] => Ok(Self {
                height: h,
                width: w,
                data: t
                    .data()
                    .chunks_exact(2)
                    .map(|c| Complex64::new(c[0], c[1]))
                    .collect(),
            }),
            s => Err(Error::ShapeMismatch {
                left: vec![0, 0, 2],
                right: s.to_vec(),
            }),
        }
    }

    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathTap {
    pub gain: Complex64,
    pub delay: usize,
    pub doppler: f64,
}

/// One drawn channel; can be evaluated at any time offset.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub height: usize,
    pub width: usize,
    pub paths: Vec<PathTap>,
}

impl ChannelRealization {
    pub fn draw(cfg: &ChannelConfig, rng: &mut SimRng) -> Self {
        let scale = (0.5 / cfg.path_count as f64).sqrt();
        let paths = (0..cfg.path_count)
            .map(|_| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                let delay = rng.random_range(0..=cfg.max_delay_taps);
                let doppler = if cfg.doppler_spread > 0.0 {
                    rng.random_range(-cfg.doppler_spread..=cfg.doppler_spread)
                } else {
                    0.0
                };
                PathTap {
                    gain: Complex64::new(re * scale, im * scale),
                    delay,
                    doppler,
                }
            })
            .collect();
        Self {
            height: cfg.grid_height,
            width: cfg.grid_width,
            paths,
        }
    }

    /// The grid with every symbol index shifted by `time_offset`.
    pub fn grid_at(&self, time_offset: f64) -> ComplexGrid {
        let (h, w) = (self.height, self.width);
        let mut data = vec![Complex64::new(0.0, 0.0); h * w];
        for p in &self.paths {
            let freq: Vec<Complex64> = (0..h)
                .map(|f| Complex64::from_polar(1.0, -2.0 * PI * (f * p.delay) as f64 / h as f64))
                .collect();
            let time: Vec<Complex64> = (0..w)
                .map(|t| p.gain * Complex64::from_polar(1.0, 2.0 * PI * p.doppler * (t as f64 + time_offset)))
                .collect();
            for (f, fz) in freq.iter().enumerate() {
                for (cell, tz) in data[f * w..(f + 1) * w].iter_mut().zip(&time) {
                    *cell += fz * tz;
                }
            }
        }
        ComplexGrid {
            height: h,
            width: w,
            data,
        }
    }
}

pub fn synthesize_channel(cfg: &ChannelConfig, rng: &mut SimRng) -> ComplexGrid {
    ChannelRealization::draw(cfg, rng).grid_at(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Authentic,
    Poisoned(AttackMode),
}

impl Provenance {
    pub fn is_poisoned(self) -> bool {
        matches!(self, Provenance::Poisoned(_))
    }

    fn to_byte(self) -> u8 {
        match self {
            Provenance::Authentic => 0,
            Provenance::Poisoned(AttackMode::Outdate) => 1,
            Provenance::Poisoned(AttackMode::Collusion) => 2,
            Provenance::Poisoned(AttackMode::Reverse) => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Provenance::Authentic,
            1 => Provenance::Poisoned(AttackMode::Outdate),
            2 => Provenance::Poisoned(AttackMode::Collusion),
            3 => Provenance::Poisoned(AttackMode::Reverse),
            other => return Err(Error::Format(format!("unknown provenance byte {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub input: Tensor,
    pub label: Tensor,
    pub provenance: Provenance,
    pub origin_mu_id: u32,
    /// The channel the sample was drawn from; used to produce outdated CSI.
    pub channel: Option<Arc<ChannelRealization>>,
}

impl TrainingPair for ChannelSample {
    fn input(&self) -> &Tensor {
        &self.input
    }
    fn target(&self) -> &Tensor {
        &self.label
    }
}

/// Pilot positions along one axis: `0, stride, 2*stride, ...`.
fn pilot_axis(len: usize, stride: usize) -> Vec<usize> {
    (0..len).step_by(stride).collect()
}

/// For each position, `(lower pilot index, upper pilot index, weight of upper)`.
fn interp_weights(len: usize, pilots: &[usize]) -> Vec<(usize, usize, f64)> {
    let last = pilots.len() - 1;
    (0..len)
        .map(|pos| {
            let i = match pilots.binary_search(&pos) {
                Ok(i) => return (i, i, 0.0),
                Err(i) => i,
            };
            if i > last {
                (last, last, 0.0)
            } else {
                let (lo, hi) = (pilots[i - 1], pilots[i]);
                (i - 1, i, (pos - lo) as f64 / (hi - lo) as f64)
            }
        })
        .collect()
}

/// Noisy pilot observation of `grid`, interpolated to the full grid.
pub fn pilot_estimate(cfg: &ChannelConfig, grid: &ComplexGrid, rng: &mut SimRng) -> ComplexGrid {
    let rows = pilot_axis(grid.height, cfg.pilot_row_stride);
    let cols = pilot_axis(grid.width, cfg.pilot_col_stride);
    let sigma = cfg.pilot_noise_stddev * std::f64::consts::FRAC_1_SQRT_2;
    let mut observed = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let mut z = grid.get(r, c);
            if sigma > 0.0 {
                let nr: f64 = rng.sample(StandardNormal);
                let ni: f64 = rng.sample(StandardNormal);
                z += Complex64::new(nr * sigma, ni * sigma);
            }
            observed.push(z);
        }
    }
    let nc = cols.len();
    let rw = interp_weights(grid.height, &rows);
    let cw = interp_weights(grid.width, &cols);
    let mut data = Vec::with_capacity(grid.data.len());
    for &(r0, r1, a) in &rw {
        for &(c0, c1, b) in &cw {
            let v00 = observed[r0 * nc + c0];
            let v01 = observed[r0 * nc + c1];
            let v10 = observed[r1 * nc + c0];
            let v11 = observed[r1 * nc + c1];
            let top = v00 * (1.0 - b) + v01 * b;
            let bottom = v10 * (1.0 - b) + v11 * b;
            data.push(top * (1.0 - a) + bottom * a);
        }
    }
    ComplexGrid {
        height: grid.height,
        width: grid.width,
        data,
    }
}

pub fn make_sample(cfg: &ChannelConfig, rng: &mut SimRng) -> ChannelSample {
    make_sample_with_id(cfg, rng, 0)
}

fn make_sample_with_id(cfg: &ChannelConfig, rng: &mut SimRng, origin_mu_id: u32) -> ChannelSample {
    let channel = ChannelRealization::draw(cfg, rng);
    let truth = channel.grid_at(0.0);
    let estimate = pilot_estimate(cfg, &truth, rng);
    ChannelSample {
        input: estimate.to_tensor(),
        label: truth.to_tensor(),
        provenance: Provenance::Authentic,
        origin_mu_id,
        channel: Some(Arc::new(channel)),
    }
}

/// `count` samples from one RNG stream with ids starting at `first_id`.
pub fn generate_samples(cfg: &ChannelConfig, count: usize, first_id: u32, rng: &mut SimRng) -> Vec<ChannelSample> {
    (0..count)
        .map(|i| make_sample_with_id(cfg, rng, first_id.wrapping_add(i as u32)))
        .collect()
}

/// Labels of the sample's own channel observed `k * lag` symbols earlier, `k = 1..=depth`.
pub fn outdated_labels(sample: &ChannelSample, lag: f64, depth: usize) -> Vec<Tensor> {
    match &sample.channel {
        Some(ch) => (1..=depth).map(|k| ch.grid_at(-(k as f64) * lag).to_tensor()).collect(),
        None => Vec::new(),
    }
}

/// One SBS's cached dataset for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedDataset {
    pub sbs_id: usize,
    pub round: usize,
    pub samples: Vec<ChannelSample>,
}

impl CachedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn authentic(&self) -> impl Iterator<Item = &ChannelSample> {
        self.samples.iter().filter(|s| !s.provenance.is_poisoned())
    }

    pub fn poisoned(&self) -> impl Iterator<Item = &ChannelSample> {
        self.samples.iter().filter(|s| s.provenance.is_poisoned())
    }

    pub fn poisoned_count(&self) -> usize {
        self.poisoned().count()
    }
}

/// Fresh caches of the requested lengths.
///
/// Cache `n` draws from its own stream `derive_seed(seed, [n])`; MU ids run
/// sequentially across caches starting at 0.
pub fn generate_round_caches(cfg: &ChannelConfig, lengths: &[usize], round: usize, seed: u64) -> Vec<CachedDataset> {
    let mut next_id = 0u32;
    lengths
        .iter()
        .enumerate()
        .map(|(sbs_id, &len)| {
            let mut rng = rng::rng_from(seed, &[sbs_id as u64]);
            let samples = generate_samples(cfg, len, next_id, &mut rng);
            next_id = next_id.wrapping_add(len as u32);
            CachedDataset {
                sbs_id,
                round,
                samples,
            }
        })
        .collect()
}

/// Pads `cache` to `min_len` with authentic pre-training samples.
///
/// Draws without replacement when the pre-training set is large enough,
/// otherwise with replacement.
pub fn topup_with_pretrain(cache: &mut CachedDataset, pretrain: &[ChannelSample], min_len: usize, rng: &mut SimRng) {
    if cache.len() >= min_len || pretrain.is_empty() {
        return;
    }
    let deficit = min_len - cache.len();
    let picks: Vec<usize> = if pretrain.len() >= deficit {
        index::sample(rng, pretrain.len(), deficit).into_vec()
    } else {
        (0..deficit).map(|_| rng.random_range(0..pretrain.len())).collect()
    };
    cache.samples.extend(picks.into_iter().map(|i| {
        let mut s = pretrain[i].clone();
        s.provenance = Provenance::Authentic;
        s
    }));
}

const MAGIC: &[u8; 4] = b"FSCH";
const FORMAT_VERSION: u32 = 1;

/// Writes samples in the flat little-endian dump format.
pub fn write_dataset<W: Write>(mut out: W, samples: &[ChannelSample]) -> Result<()> {
    let (h, w) = match samples.first() {
        Some(s) => (s.label.shape()[0], s.label.shape()[1]),
        None => (0, 0),
    };
    out.write_all(MAGIC)?;
    for v in [FORMAT_VERSION, samples.len() as u32, h as u32, w as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for s in samples {
        if s.input.shape() != [h, w, 2] || s.label.shape() != [h, w, 2] {
            return Err(Error::Format("all samples must share one grid size".into()));
        }
        for v in s.input.data().iter().chain(s.label.data()) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&[s.provenance.to_byte()])?;
        out.write_all(&s.origin_mu_id.to_le_bytes())?;
    }
    Ok(())
}

fn read_floats<R: Read>(input: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    input.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Vec<ChannelSample>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, count, h, w] = u32s;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let cells = h as usize * w as usize * 2;
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let dims = [h as usize, w as usize, 2];
        let x = Tensor::from_vec(&dims, read_floats(&mut input, cells)?)?;
        let y = Tensor::from_vec(&dims, read_floats(&mut input, cells)?)?;
        let mut tail = [0u8; 5];
        input.read_exact(&mut tail)?;
        samples.push(ChannelSample {
            input: x,
            label: y,
            provenance: Provenance::from_byte(tail[0])?,
            origin_mu_id: u32::from_le_bytes(tail[1..5].try_into().expect("4 bytes")),
            channel: None,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mse_loss;
    use rand::SeedableRng;

    fn rng(seed: u64) -> SimRng {
        SimRng::seed_from_u64(seed)
    }

    #[test]
    fn single_static_path_is_constant() {
        let ch = ChannelRealization {
            height: 6,
            width: 4,
            paths: vec![PathTap {
                gain: Complex64::new(1.0, 0.0),
                delay: 0,
                doppler: 0.0,
            }],
        };
        let g = ch.grid_at(0.0);
        assert!(g.data.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn unit_average_power() {
        let cfg = ChannelConfig {
            grid_height: 12,
            grid_width: 4,
            ..ChannelConfig::default()
        };
        let mut r = rng(17);
        let total: f64 = (0..1000).map(|_| synthesize_channel(&cfg, &mut r).mean_power()).sum();
        let mean = total / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "mean power {mean}");
    }

    #[test]
    fn synthesis_is_deterministic() {
        let cfg = ChannelConfig::default();
        assert_eq!(synthesize_channel(&cfg, &mut rng(3)), synthesize_channel(&cfg, &mut rng(3)));
    }

    #[test]
    fn dense_noiseless_pilots_reproduce_label() {
        let cfg = ChannelConfig {
            grid_height: 10,
            grid_width: 6,
            pilot_noise_stddev: 0.0,
            pilot_row_stride: 1,
            pilot_col_stride: 1,
            ..ChannelConfig::default()
        };
        let s = make_sample(&cfg, &mut rng(1));
        assert_eq!(s.input, s.label);
    }

    #[test]
    fn split_round_trip() {
        let g = synthesize_channel(&ChannelConfig::default(), &mut rng(5));
        assert_eq!(ComplexGrid::from_tensor(&g.to_tensor()).unwrap(), g);
    }

    #[test]
    fn interpolation_is_exact_for_bilinear_fields() {
        // A field linear in both axes is reproduced exactly between pilots.
        let cfg = ChannelConfig {
            grid_height: 9,
            grid_width: 5,
            pilot_noise_stddev: 0.0,
            pilot_row_stride: 2,
            pilot_col_stride: 2,
            ..ChannelConfig::default()
        };
        let data = (0..9)
            .flat_map(|f| (0..5).map(move |t| Complex64::new(f as f64 * 0.5 + t as f64, -(f as f64))))
            .collect();
        let g = ComplexGrid {
            height: 9,
            width: 5,
            data,
        };
        let est = pilot_estimate(&cfg, &g, &mut rng(0));
        for (a, b) in est.data.iter().zip(&g.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn edge_positions_clamp_to_last_pilot() {
        let cfg = ChannelConfig {
            grid_height: 4,
            grid_width: 2,
            pilot_noise_stddev: 0.0,
            pilot_row_stride: 2,
            pilot_col_stride: 2,
            ..ChannelConfig::default()
        };
        let g = ComplexGrid {
            height: 4,
            width: 2,
            data: (0..8).map(|i| Complex64::new(i as f64, 0.0)).collect(),
        };
        let est = pilot_estimate(&cfg, &g, &mut rng(0));
        // row 3 clamps to pilot row 2, column 1 clamps to pilot column 0.
        assert_eq!(est.get(3, 1), g.get(2, 0));
        assert_eq!(est.get(1, 0), (g.get(0, 0) + g.get(2, 0)) * 0.5);
    }

    #[test]
    fn noisy_input_error_is_bounded() {
        let sigma = 0.1;
        let cfg = ChannelConfig {
            pilot_noise_stddev: sigma,
            ..ChannelConfig::default()
        };
        let mut r = rng(99);
        let mean: f64 = (0..200)
            .map(|_| {
                let s = make_sample(&cfg, &mut r);
                mse_loss(&s.input, &s.label).unwrap()
            })
            .sum::<f64>()
            / 200.0;
        assert!(mean > 0.0 && mean <= 3.0 * sigma * sigma, "mean {mean}");
    }

    #[test]
    fn round_caches_have_requested_lengths() {
        let cfg = ChannelConfig {
            grid_height: 8,
            grid_width: 4,
            ..ChannelConfig::default()
        };
        let caches = generate_round_caches(&cfg, &[3, 5], 1, 77);
        assert_eq!(caches[0].len(), 3);
        assert_eq!(caches[1].len(), 5);
        let ids: Vec<u32> = caches.iter().flat_map(|c| c.samples.iter().map(|s| s.origin_mu_id)).collect();
        assert_eq!(ids, (0..8).collect::<Vec<_>>());
        for a in &caches[0].samples {
            for b in &caches[1].samples {
                assert_ne!(a.label, b.label);
            }
        }
        assert_eq!(caches, generate_round_caches(&cfg, &[3, 5], 1, 77));
    }

    #[test]
    fn topup_cases() {
        let cfg = ChannelConfig {
            grid_height: 4,
            grid_width: 2,
            ..ChannelConfig::default()
        };
        let mut r = rng(4);
        let pretrain = generate_samples(&cfg, 50, 10_000, &mut r);

        let mut big = CachedDataset {
            sbs_id: 0,
            round: 1,
            samples: generate_samples(&cfg, 250, 0, &mut r),
        };
        let before = big.clone();
        topup_with_pretrain(&mut big, &pretrain, 200, &mut r);
        assert_eq!(big, before);

        let mut small = CachedDataset {
            sbs_id: 0,
            round: 1,
            samples: generate_samples(&cfg, 30, 0, &mut r),
        };
        topup_with_pretrain(&mut small, &pretrain, 70, &mut r);
        assert_eq!(small.len(), 70);
        // without replacement when the pool is large enough
        let mut ids: Vec<u32> = small.samples[30..].iter().map(|s| s.origin_mu_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 40);

        let mut empty = CachedDataset {
            sbs_id: 0,
            round: 1,
            samples: Vec::new(),
        };
        topup_with_pretrain(&mut empty, &pretrain, 200, &mut r);
        assert_eq!(empty.len(), 200);
        assert!(empty.samples.iter().all(|s| s.provenance == Provenance::Authentic));
    }

    #[test]
    fn dataset_variety() {
        let cfg = ChannelConfig::default();
        let mut r = rng(8);
        let means: Vec<f64> = generate_samples(&cfg, 100, 0, &mut r).iter().map(|s| s.label.mean()).collect();
        assert!(means.iter().any(|m| (m - means[0]).abs() > 1e-6));
    }

    #[test]
    fn dump_round_trip() {
        let cfg = ChannelConfig {
            grid_height: 6,
            grid_width: 3,
            ..ChannelConfig::default()
        };
        let mut samples = generate_samples(&cfg, 3, 40, &mut rng(2));
        samples[1].provenance = Provenance::Poisoned(AttackMode::Reverse);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &samples).unwrap();
        assert_eq!(&buf[..4], b"FSCH");
        assert_eq!(buf.len(), 4 + 16 + 3 * (2 * 36 * 8 + 5));
        let back = read_dataset(buf.as_slice()).unwrap();
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.input, b.input);
            assert_eq!(a.label, b.label);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.origin_mu_id, b.origin_mu_id);
        }
        buf[0] = b'X';
        assert!(read_dataset(buf.as_slice()).is_err());
    }
}
