//! Verification accuracy, reconstruction quality, rate curves and the
//! saturation-point budgeting rule.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageTensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
/// Default saturation tolerance (absolute accuracy).
pub const SATURATION_EPS: f64 = 1e-3;
pub const VERIFICATION_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Cosine,
    /// Squared Euclidean distance between L2-normalized features.
    NormalizedSquaredEuclidean,
}

impl Distance {
    pub fn eval<T: Scalar>(self, a: &[T], b: &[T]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let cos = if na > 0.0 && nb > 0.0 { dot / (na * nb) } else { 0.0 };
        match self {
            Distance::Cosine => 1.0 - cos,
            Distance::NormalizedSquaredEuclidean => 2.0 - 2.0 * cos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Mean held-out fold accuracy.
    pub accuracy: f64,
    pub auc: f64,
    /// Mean of the per-fold thresholds; "same" means distance < threshold.
    pub threshold: f64,
    pub fold_accuracies: Vec<f64>,
}

/// Best threshold on `(distance, same)` samples and its accuracy.
fn best_threshold(samples: &[(f64, bool)]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = s.len() as f64;
    // threshold below everything: all predicted different
    let mut correct = s.iter().filter(|p| !p.1).count() as f64;
    let mut best = (s.first().map_or(0.0, |p| p.0) - 1e-9, correct / n);
    let mut i = 0;
    while i < s.len() {
        let d = s[i].0;
        while i < s.len() && s[i].0 == d {
            correct += if s[i].1 { 1.0 } else { -1.0 };
            i += 1;
        }
        let t = s.get(i).map_or(d + 1e-9, |next| 0.5 * (d + next.0));
        if correct / n > best.1 {
            best = (t, correct / n);
        }
    }
    best
}

/// ROC AUC with "same" as the positive class and `-distance` as the score;
/// ties count one half.
pub fn roc_auc(samples: &[(f64, bool)]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.0.total_cmp(&b.0));
    let pos = s.iter().filter(|p| p.1).count() as f64;
    let neg = s.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    // count (pos, neg) pairs with pos distance < neg distance
    let mut wins = 0.0;
    let mut neg_after = neg;
    let mut i = 0;
    while i < s.len() {
        let d = s[i].0;
        let (mut p, mut q) = (0.0, 0.0);
        while i < s.len() && s[i].0 == d {
            if s[i].1 {
                p += 1.0;
            } else {
                q += 1.0;
            }
            i += 1;
        }
        neg_after -= q;
        wins += p * (neg_after + 0.5 * q);
    }
    wins / (pos * neg)
}

/// Ten-fold protocol: each fold is scored with the threshold that is best
/// on the other folds. Folds are contiguous blocks of `pairs`.
pub fn verification_accuracy<T: Scalar>(pairs: &[Pair], features: &[Vec<T>], distance: Distance) -> Result<Verification> {
    if pairs.len() < 2 {
        return Err(Error::invalid("verification needs at least two pairs"));
    }
    let samples = pairs
        .iter()
        .map(|p| {
            let (Some(a), Some(b)) = (features.get(p.a), features.get(p.b)) else {
                return Err(Error::Data(format!("pair ({}, {}) references a missing feature", p.a, p.b)));
            };
            Ok((distance.eval(a, b), p.same))
        })
        .collect::<Result<Vec<_>>>()?;
    let folds = VERIFICATION_FOLDS.min(samples.len());
    let bounds: Vec<usize> = (0..=folds).map(|k| k * samples.len() / folds).collect();
    let mut accs = Vec::with_capacity(folds);
    let mut thresholds = Vec::with_capacity(folds);
    for k in 0..folds {
        let (lo, hi) = (bounds[k], bounds[k + 1]);
        let train: Vec<(f64, bool)> = samples[..lo].iter().chain(&samples[hi..]).copied().collect();
        let (t, _) = best_threshold(&train);
        let test = &samples[lo..hi];
        let ok = test.iter().filter(|(d, same)| (*d < t) == *same).count();
        accs.push(ok as f64 / test.len() as f64);
        thresholds.push(t);
    }
    Ok(Verification {
        accuracy: accs.iter().sum::<f64>() / folds as f64,
        auc: roc_auc(&samples),
        threshold: thresholds.iter().sum::<f64>() / folds as f64,
        fold_accuracies: accs,
    })
}

/// Balanced pairs over `labels`, alternating positive and negative so every
/// contiguous fold is roughly balanced. Asks for up to `per_class` of each.
pub fn make_pairs(labels: &[usize], per_class: usize, seed: u64) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let p = Pair {
                a: i,
                b: j,
                same: labels[i] == labels[j],
            };
            if p.same {
                pos.push(p);
            } else {
                neg.push(p);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Data("need both same-identity and different-identity pairs".into()));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n = per_class.min(pos.len()).min(neg.len());
    Ok(pos.into_iter().zip(neg).take(n).flat_map(|(p, q)| [p, q]).collect())
}

/// One line of an LFW-style pairs list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedPair {
    pub name_a: String,
    pub index_a: usize,
    pub name_b: String,
    pub index_b: usize,
}

impl NamedPair {
    pub fn same(&self) -> bool {
        self.name_a == self.name_b
    }
}

/// Parses `name i j` (same) and `name_a i name_b j` (different) lines,
/// tab or space separated. A leading header of one or two integers is
/// skipped. Indices are 1-based as in the original list.
pub fn parse_pairs(text: &str) -> Result<Vec<NamedPair>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() || (ln == 0 && f.iter().all(|s| s.parse::<usize>().is_ok())) {
            continue;
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&i| i >= 1)
                .ok_or_else(|| Error::Data(format!("pairs line {}: bad index `{s}`", ln + 1)))
        };
        let p = match f.as_slice() {
            [n, i, j] => NamedPair {
                name_a: n.to_string(),
                index_a: idx(i)?,
                name_b: n.to_string(),
                index_b: idx(j)?,
            },
            [a, i, b, j] => NamedPair {
                name_a: a.to_string(),
                index_a: idx(i)?,
                name_b: b.to_string(),
                index_b: idx(j)?,
            },
            _ => return Err(Error::Data(format!("pairs line {} has {} fields", ln + 1, f.len()))),
        };
        out.push(p);
    }
    Ok(out)
}

pub fn format_pairs(pairs: &[NamedPair]) -> String {
    let mut s = format!("1\t{}\n", pairs.len());
    for p in pairs {
        if p.same() {
            let _ = writeln!(s, "{}\t{}\t{}", p.name_a, p.index_a, p.index_b);
        } else {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", p.name_a, p.index_a, p.name_b, p.index_b);
        }
    }
    s
}

/// PSNR in dB with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len().max(1) as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>() / n;
    Ok(if mse <= 0.0 { PSNR_CAP_DB } else { (-10.0 * mse.log10()).min(PSNR_CAP_DB) })
}

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure SSIM terms of one plane pair.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, 1.5);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
    let (mu_a, ..) = filter_valid(a, h, w, &k);
    let (mu_b, ..) = filter_valid(b, h, w, &k);
    let (aa, ..) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, ..) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, ..) = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len() as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        l += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        cs += (2.0 * cov + c2) / (va + vb + c2);
    }
    (l / n, cs / n)
}

fn avg_pool2(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let out = (0..oh * ow)
        .map(|i| {
            let (y, x) = (2 * (i / ow), 2 * (i % ow));
            0.25 * (p[y * w + x] + p[y * w + x + 1] + p[(y + 1) * w + x] + p[(y + 1) * w + x + 1])
        })
        .collect();
    (out, oh, ow)
}

/// Five-scale MS-SSIM averaged over channels. Scales that would shrink
/// below 2 pixels are dropped and the remaining weights renormalized;
/// the Gaussian window shrinks to fit small scales.
pub fn ms_ssim<T: Scalar>(a: &ImageTensor<T>, b: &ImageTensor<T>) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, c) = a.dims();
    if h.min(w) < 2 {
        return Err(Error::invalid("ms_ssim needs images at least 2x2"));
    }
    let mut scales = 1;
    while scales < 5 && (h.min(w) >> scales) >= 2 {
        scales += 1;
    }
    let wsum: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let mut total = 0.0;
    for ch in 0..c {
        let mut pa: Vec<f64> = a.plane(ch).iter().map(|v| v.as_f64()).collect();
        let mut pb: Vec<f64> = b.plane(ch).iter().map(|v| v.as_f64()).collect();
        let (mut ph, mut pw) = (h, w);
        let mut v = 1.0;
        for s in 0..scales {
            let (l, cs) = ssim_terms(&pa, &pb, ph, pw);
            let wt = MS_SSIM_WEIGHTS[s] / wsum;
            v *= cs.max(0.0).powf(wt);
            if s + 1 == scales {
                v *= l.max(0.0).powf(wt);
            } else {
                let (na, ..) = avg_pool2(&pa, ph, pw);
                let (nb, nh, nw) = avg_pool2(&pb, ph, pw);
                (pa, pb, ph, pw) = (na, nb, nh, nw);
            }
        }
        total += v;
    }
    Ok((total / c as f64).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Base,
    Enhancement,
    Total,
}

impl Layer {
    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Base => "base",
            Layer::Enhancement => "enhancement",
            Layer::Total => "total",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Layer::Base, Layer::Enhancement, Layer::Total]
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown layer `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Auc,
    Psnr,
    MsSsim,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
            Metric::Psnr => "psnr",
            Metric::MsSsim => "ms_ssim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [Metric::Accuracy, Metric::Auc, Metric::Psnr, Metric::MsSsim]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }

    fn in_range(self, v: f64) -> bool {
        match self {
            Metric::Psnr => v >= 0.0,
            _ => (0.0..=1.0).contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub bpp: f64,
    pub layer: Layer,
    pub metric: Metric,
    pub value: f64,
    pub operating_point_id: String,
}

impl RatePoint {
    pub fn new(bpp: f64, layer: Layer, metric: Metric, value: f64, id: impl Into<String>) -> Result<Self> {
        if !(bpp >= 0.0 && bpp.is_finite()) || !metric.in_range(value) {
            return Err(Error::invalid(format!(
                "rate point out of range: bpp {bpp}, {} {value}",
                metric.as_str()
            )));
        }
        Ok(RatePoint {
            bpp,
            layer,
            metric,
            value,
            operating_point_id: id.into(),
        })
    }
}

/// Points of one sweep, sorted by bpp (stable for ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    pub points: Vec<RatePoint>,
}

impl RateCurve {
    /// Needs points from at least two operating points.
    pub fn new(mut points: Vec<RatePoint>) -> Result<Self> {
        let mut ids: Vec<&str> = points.iter().map(|p| p.operating_point_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Err(Error::invalid("a rate curve needs at least two operating points"));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        Ok(RateCurve { points })
    }

    pub fn series(&self, metric: Metric, layer: Layer) -> Vec<&RatePoint> {
        self.points.iter().filter(|p| p.metric == metric && p.layer == layer).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp,layer,metric,value,operating_point_id\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                p.bpp,
                p.layer.as_str(),
                p.metric.as_str(),
                p.value,
                p.operating_point_id
            );
        }
        s
    }

    /// Inverse of [`RateCurve::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("bpp,layer,metric,value,operating_point_id") {
            return Err(Error::invalid("rate point CSV lacks the expected header"));
        }
        let points = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<&str> = line.trim().splitn(5, ',').collect();
                let num = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("row {}: bad number `{s}`", i + 1)));
                if f.len() != 5 {
                    return Err(Error::invalid(format!("row {} has {} fields", i + 1, f.len())));
                }
                RatePoint::new(num(f[0])?, Layer::parse(f[1])?, Metric::parse(f[2])?, num(f[3])?, f[4])
            })
            .collect::<Result<Vec<_>>>()?;
        RateCurve::new(points)
    }

    /// Line plot of one metric, one polyline per layer.
    pub fn to_svg(&self, metric: Metric, title: &str) -> String {
        render_svg(self, metric, title)
    }
}

/// Index into `sweep` of the smallest-bpp point whose value is within `eps`
/// of the sweep maximum.
pub fn saturation_point(sweep: &[RatePoint], eps: f64) -> Result<usize> {
    if sweep.is_empty() {
        return Err(Error::invalid("empty sweep"));
    }
    let max = sweep.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    Ok(sweep
        .iter()
        .enumerate()
        .filter(|(_, p)| p.value >= max - eps)
        .min_by(|a, b| a.1.bpp.total_cmp(&b.1.bpp).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("the maximum qualifies"))
}

/// Base operating point chosen by [`saturation_point`].
pub fn fixed_base_budgeting(base_sweep: &[RatePoint], eps: f64) -> Result<RatePoint> {
    Ok(base_sweep[saturation_point(base_sweep, eps)?].clone())
}

/// Number of adjacent decreases in `values`.
pub fn count_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] < w[0]).count()
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    (0..).map(|i| start + i as f64 * step).take_while(|v| *v <= hi + 1e-12).collect()
}

fn render_svg(curve: &RateCurve, metric: Metric, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 20.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let colors = ["#1f77b4", "#d62728", "#2ca02c"];
    let pts: Vec<&RatePoint> = curve.points.iter().filter(|p| p.metric == metric).collect();
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    );
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.bpp), b.max(p.bpp)));
    let (mut y0, mut y1) =
        pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.value), b.max(p.value)));
    let pad = |lo: &mut f64, hi: &mut f64| {
        let d = (*hi - *lo).max(1e-9 * hi.abs().max(1.0)) * 0.08;
        *lo -= d;
        *hi += d;
    };
    pad(&mut x0, &mut x1);
    pad(&mut y0, &mut y1);
    let px = |v: f64| L + (v - x0) / (x1 - x0) * (W - L - R);
    let py = |v: f64| H - B - (v - y0) / (y1 - y0) * (H - T - B);
    let _ = writeln!(
        s,
        "<rect x=\"{L}\" y=\"{T}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        W - L - R,
        H - T - B
    );
    for t in nice_ticks(x0, x1, 6) {
        let x = px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{T}\" stroke=\"#ddd\"/><text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - B,
            H - B + 16.0,
            fmt_tick(t)
        );
    }
    for t in nice_ticks(y0, y1, 6) {
        let y = py(t);
        let _ = writeln!(
            s,
            "<line x1=\"{L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            W - R,
            L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">bpp</text>\n<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>",
        (L + W - R) / 2.0,
        H - 12.0,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0,
        metric.as_str()
    );
    let mut layers: Vec<Layer> = pts.iter().map(|p| p.layer).collect();
    layers.sort();
    layers.dedup();
    for (li, layer) in layers.iter().enumerate() {
        let color = colors[li % colors.len()];
        let series: Vec<String> = pts
            .iter()
            .filter(|p| p.layer == *layer)
            .map(|p| format!("{:.1},{:.1}", px(p.bpp), py(p.value)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            series.join(" ")
        );
        for xy in &series {
            let (x, y) = xy.split_once(',').expect("formatted pair");
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3.5\" fill=\"{color}\"/>");
        }
        let ly = T + 16.0 + 16.0 * li as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"12\" height=\"3\" fill=\"{color}\"/><text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            W - R - 110.0,
            ly - 4.0,
            W - R - 92.0,
            ly,
            layer.as_str()
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
