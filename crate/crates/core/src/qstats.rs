//! Quantization error statistics per channel and per layer: mean activation
//! shift (MAS), signal and error energies, and the MSSR / rQNSR ratios.
//!
//! All expectations are plain means over every pixel of every image in the
//! batch (population statistics, no Bessel correction).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ActivationTrace;
use crate::par;

/// Which tensor of a layer the statistics are measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Pre,
    #[default]
    Post,
}

impl Site {
    pub fn is_pre(self) -> bool {
        self == Site::Pre
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub layer: usize,
    pub channel: usize,
    pub n_samples: usize,
    /// Mean of `x_q - x`.
    pub mas: f64,
    /// E(x²) of the full-precision activation.
    pub signal_energy: f64,
    /// E(e²).
    pub error_energy: f64,
    pub mssr: f64,
    pub rqnsr: f64,
    /// Zero signal energy; ratios are reported as 0.
    pub degenerate: bool,
}

impl ChannelStats {
    pub fn from_sums(layer: usize, channel: usize, n: usize, sum_e: f64, sum_x2: f64, sum_e2: f64) -> Self {
        let nf = n as f64;
        let mas = sum_e / nf;
        let signal_energy = sum_x2 / nf;
        let error_energy = sum_e2 / nf;
        let degenerate = signal_energy == 0.0;
        let (mssr, rqnsr) = if degenerate {
            (0.0, 0.0)
        } else {
            (mas / signal_energy.sqrt(), (error_energy / signal_energy).sqrt())
        };
        ChannelStats {
            layer,
            channel,
            n_samples: n,
            mas,
            signal_energy,
            error_energy,
            mssr,
            rqnsr,
            degenerate,
        }
    }

    /// Error variance implied by the mean/variance split of the MSE.
    pub fn error_variance(&self) -> f64 {
        self.error_energy - self.mas * self.mas
    }
}

/// Statistics of one channel given its full-precision and quantized samples.
pub fn channel_stats(layer: usize, channel: usize, x: &[f64], xq: &[f64]) -> Result<ChannelStats> {
    if x.len() != xq.len() || x.is_empty() {
        return Err(Error::Invalid(format!(
            "paired samples differ in length ({} vs {}) or are empty",
            x.len(),
            xq.len()
        )));
    }
    let (mut se, mut sx2, mut se2) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(xq) {
        let e = b - a;
        se += e;
        sx2 += a * a;
        se2 += e * e;
    }
    Ok(ChannelStats::from_sums(layer, channel, x.len(), se, sx2, se2))
}

/// Per-(layer, channel) statistics from paired traces of the same batch.
pub fn compute_channel_stats(fp: &ActivationTrace, q: &ActivationTrace, site: Site) -> Result<Vec<ChannelStats>> {
    let layers = fp.layers().min(q.layers());
    if fp.layers() != q.layers() {
        return Err(Error::Invalid(format!(
            "traces cover {} and {} layers",
            fp.layers(),
            q.layers()
        )));
    }
    for l in 0..layers {
        if fp.at(l, site.is_pre()).shape() != q.at(l, site.is_pre()).shape() {
            return Err(Error::Invalid(format!("trace shapes differ at layer {l}")));
        }
    }
    let per_layer = par::map_range(layers, |l| {
        let x = fp.at(l, site.is_pre());
        let xq = q.at(l, site.is_pre());
        let c = x.channels();
        let mut se = vec![0.0; c];
        let mut sx2 = vec![0.0; c];
        let mut se2 = vec![0.0; c];
        for (px, pq) in x.data().chunks_exact(c).zip(xq.data().chunks_exact(c)) {
            for ch in 0..c {
                let e = pq[ch] - px[ch];
                se[ch] += e;
                sx2[ch] += px[ch] * px[ch];
                se2[ch] += e * e;
            }
        }
        let n = x.len() / c;
        (0..c)
            .map(|ch| ChannelStats::from_sums(l, ch, n, se[ch], sx2[ch], se2[ch]))
            .collect::<Vec<_>>()
    });
    Ok(per_layer.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseDecomposition {
    pub mean_sq: f64,
    pub variance: f64,
    pub mse: f64,
}

/// Splits E(e²) into mean² and population variance.
pub fn mse_decomposition(e: &[f64]) -> Result<MseDecomposition> {
    if e.is_empty() {
        return Err(Error::Invalid("empty error vector".into()));
    }
    let n = e.len() as f64;
    let mean = e.iter().sum::<f64>() / n;
    let variance = e.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mse = e.iter().map(|v| v * v).sum::<f64>() / n;
    Ok(MseDecomposition {
        mean_sq: mean * mean,
        variance,
        mse,
    })
}

/// Layer-level RMS aggregation over channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub channels: usize,
    pub mas_rms: f64,
    pub mssr_rms: f64,
    pub rqnsr_rms: f64,
    /// `mssr_rms / rqnsr_rms`; 0 when the layer has no error at all.
    pub ratio: f64,
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

pub fn aggregate_layers(stats: &[ChannelStats]) -> Vec<LayerStats> {
    let mut layers: Vec<usize> = stats.iter().map(|s| s.layer).collect();
    layers.dedup();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|l| {
            let group: Vec<&ChannelStats> = stats.iter().filter(|s| s.layer == l).collect();
            let mas_rms = rms(group.iter().map(|s| s.mas));
            let mssr_rms = rms(group.iter().map(|s| s.mssr));
            let rqnsr_rms = rms(group.iter().map(|s| s.rqnsr));
            LayerStats {
                layer: l,
                channels: group.len(),
                mas_rms,
                mssr_rms,
                rqnsr_rms,
                ratio: if rqnsr_rms > 0.0 { mssr_rms / rqnsr_rms } else { 0.0 },
            }
        })
        .collect()
}
