//! Image-quality metrics: PSNR and single-scale SSIM, plus the per-step
//! evaluation report used by the command line.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR cap reported for identical frames, keeping aggregate tables finite.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("mse on {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}

/// `10 log10(1 / MSE)` for frames with data range 1.0, capped at 100 dB.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Gaussian-weighted window sums via separable 1D passes: horizontal over
/// all rows, then vertical over valid columns. Output is the valid region
/// `(H-10) x (W-10)`.
fn windowed_means(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel_1d();
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * vw];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            horiz[y * vw + x] = acc;
        }
    }
    let mut out = vec![0.0f64; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), data range
/// 1.0, valid-region mean, channels averaged.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("ssim on {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rank() != 3 {
        return Err(Error::ShapeMismatch(format!("ssim expects [C,H,W] frames, got {:?}", a.shape())));
    }
    let (c, h, w) = (a.dim(0), a.dim(1), a.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "frame {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let plane = h * w;
    let mut total = 0.0;
    for ci in 0..c {
        let pa: Vec<f64> = a.data()[ci * plane..(ci + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let pb: Vec<f64> = b.data()[ci * plane..(ci + 1) * plane].iter().map(|v| v.to_f64()).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();

        let mu_a = windowed_means(&pa, h, w);
        let mu_b = windowed_means(&pb, h, w);
        let e_aa = windowed_means(&paa, h, w);
        let e_bb = windowed_means(&pbb, h, w);
        let e_ab = windowed_means(&pab, h, w);

        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

// ── Evaluation report ───────────────────────────────────────────────

/// One (sequence, sample, step) measurement.
#[derive(Clone, Copy, Debug)]
pub struct MetricRow {
    pub sequence: usize,
    pub sample: usize,
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

/// All measurements of one evaluation run.
#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    fn sequences(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.sequence).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn samples(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.sample).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    fn sample_mean_mse(&self, seq: usize, sample: usize) -> f64 {
        mean(
            self.rows
                .iter()
                .filter(|r| r.sequence == seq && r.sample == sample)
                .map(|r| r.mse),
        )
    }

    /// Best-of-N aggregates: per sequence, the sample with the lowest mean
    /// squared error is scored; results are averaged over sequences.
    pub fn best_of_n(&self) -> (f64, f64) {
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for seq in self.sequences() {
            let best = self
                .samples()
                .into_iter()
                .min_by(|&a, &b| {
                    self.sample_mean_mse(seq, a)
                        .partial_cmp(&self.sample_mean_mse(seq, b))
                        .expect("finite mse")
                })
                .expect("non-empty");
            psnrs.push(mean(
                self.rows.iter().filter(|r| r.sequence == seq && r.sample == best).map(|r| r.psnr),
            ));
            ssims.push(mean(
                self.rows.iter().filter(|r| r.sequence == seq && r.sample == best).map(|r| r.ssim),
            ));
        }
        (mean(psnrs.into_iter()), mean(ssims.into_iter()))
    }

    /// Mean metrics per prediction step across sequences and samples.
    pub fn per_step(&self) -> Vec<(usize, f64, f64)> {
        let mut steps: Vec<usize> = self.rows.iter().map(|r| r.step).collect();
        steps.sort_unstable();
        steps.dedup();
        steps
            .into_iter()
            .map(|s| {
                (
                    s,
                    mean(self.rows.iter().filter(|r| r.step == s).map(|r| r.psnr)),
                    mean(self.rows.iter().filter(|r| r.step == s).map(|r| r.ssim)),
                )
            })
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("sequence\tsample\tstep\tpsnr\tssim\tmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.sequence, r.sample, r.step, r.psnr, r.ssim, r.mse
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let (bp, bs) = if self.rows.is_empty() { (0.0, 0.0) } else { self.best_of_n() };
        let mut out = String::new();
        out.push_str(&format!("mean_psnr = {}\n", self.mean_psnr()));
        out.push_str(&format!("mean_ssim = {}\n", self.mean_ssim()));
        out.push_str(&format!("best_of_n_psnr = {bp}\n"));
        out.push_str(&format!("best_of_n_ssim = {bs}\n"));
        out.push_str(&format!("rows = {}\n", self.rows.len()));
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in it {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn psnr_hand_cases() {
        let a = Tensor::<f64>::filled(&[1, 4, 4], 0.25);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);

        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "uniform 0.1 difference gives {p}");

        let zeros = Tensor::<f64>::zeros(&[1, 4, 4]);
        let ones = Tensor::<f64>::filled(&[1, 4, 4], 1.0);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);

        assert!(psnr(&a, &Tensor::<f64>::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_permutation_invariant() {
        let mut rng = CounterRng::keyed(&[64]);
        let a = Tensor::from_fn(&[1, 6, 6], |_| rng.range_f64(0.0, 1.0));
        let b = Tensor::from_fn(&[1, 6, 6], |_| rng.range_f64(0.0, 1.0));
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        // reverse both with the same permutation
        let ar = Tensor::new(vec![1, 6, 6], a.data().iter().rev().copied().collect()).unwrap();
        let br = Tensor::new(vec![1, 6, 6], b.data().iter().rev().copied().collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - psnr(&ar, &br).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = CounterRng::keyed(&[65]);
        let a = Tensor::from_fn(&[1, 16, 16], |_| rng.range_f64(0.0, 1.0));
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-9, "ssim(a,a) = {s}");
    }

    #[test]
    fn ssim_constant_frames_luminance_only() {
        let (v1, v2) = (0.3, 0.7);
        let a = Tensor::<f64>::filled(&[1, 12, 12], v1);
        let b = Tensor::<f64>::filled(&[1, 12, 12], v2);
        let c1 = 0.01f64 * 0.01;
        let want = (2.0 * v1 * v2 + c1) / (v1 * v1 + v2 * v2 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn ssim_rejects_small_frames_and_is_symmetric() {
        let a = Tensor::<f64>::zeros(&[1, 8, 8]);
        assert!(ssim(&a, &a).is_err());

        let mut rng = CounterRng::keyed(&[66]);
        let a = Tensor::from_fn(&[1, 14, 14], |_| rng.range_f64(0.0, 1.0));
        let b = Tensor::from_fn(&[1, 14, 14], |_| rng.range_f64(0.0, 1.0));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_in_range_on_random_pairs() {
        let mut rng = CounterRng::keyed(&[67]);
        for _ in 0..5 {
            let a = Tensor::from_fn(&[1, 12, 12], |_| rng.range_f64(0.0, 1.0));
            let b = Tensor::from_fn(&[1, 12, 12], |_| rng.range_f64(0.0, 1.0));
            let s = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn report_best_of_n_prefers_lower_mse() {
        let mut rep = MetricReport::default();
        for (sample, mse_v, psnr_v) in [(0usize, 0.04, 14.0), (1, 0.01, 20.0)] {
            for step in 0..3 {
                rep.push(MetricRow { sequence: 0, sample, step, psnr: psnr_v, ssim: 0.5, mse: mse_v });
            }
        }
        let (bp, _) = rep.best_of_n();
        assert_eq!(bp, 20.0);
        assert_eq!(rep.per_step().len(), 3);
    }
}
