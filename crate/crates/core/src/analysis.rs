//! Statistics and evaluation: per-region descriptive stats, one-way ANOVA
//! with Tukey HSD post hoc, SAD motion imaging, confusion matrices and
//! classification metrics, plus CSV/PGM export helpers.
//!
//! The p-value machinery (log-gamma, regularized incomplete beta) is
//! implemented here directly so the crate stays dependency-light; values are
//! pinned against an independent reference implementation in the tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{Region, REGIONS};

// ── Descriptive statistics ──────────────────────────────────────────────────

/// Five-number-ish summary of one region's reach times, seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: Region,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    pub min: f64,
    pub sd: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample SD (n-1 denominator); 0 for a single observation.
fn sample_sd(values: &[f64], m: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Descriptive statistics for one group of reach times.
pub fn describe(region: Region, values: &[f64]) -> Result<RegionStats> {
    if values.is_empty() {
        return Err(Error::validation(format!("region {region}: no reach times to describe")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = mean(values);
    Ok(RegionStats {
        region,
        n: values.len(),
        mean: m,
        median: median_of_sorted(&sorted),
        max: *sorted.last().unwrap(),
        min: sorted[0],
        sd: sample_sd(values, m),
    })
}

/// Group (region, reach time) pairs and describe all nine regions. Errors if
/// any region has no samples.
pub fn region_stats(samples: &[(Region, f64)]) -> Result<Vec<RegionStats>> {
    let mut groups: [Vec<f64>; 9] = Default::default();
    for &(region, t) in samples {
        groups[region.index()].push(t);
    }
    REGIONS
        .iter()
        .map(|&region| describe(region, &groups[region.index()]))
        .collect()
}

// ── Special functions ───────────────────────────────────────────────────────

/// ln Gamma(x) for x > 0, Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let z = x - 1.0;
    let mut sum = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + sum.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * beta_cf(a, b, x) / a
    } else {
        1.0 - bt * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Survival function of the F distribution with (d1, d2) degrees of freedom.
pub fn f_sf(f: f64, d1: usize, d2: usize) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    let (d1, d2) = (d1 as f64, d2 as f64);
    reg_inc_beta(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))
}

// ── One-way ANOVA ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

fn check_groups(groups: &[Vec<f64>]) -> Result<()> {
    if groups.len() < 2 {
        return Err(Error::validation(format!(
            "need at least 2 groups, got {}",
            groups.len()
        )));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.len() < 2) {
        return Err(Error::validation(format!(
            "group {i} has {} observations, need at least 2",
            g.len()
        )));
    }
    Ok(())
}

/// Sums of squares shared by ANOVA and Tukey: (ss_between, ss_within,
/// group means, total n).
fn sums_of_squares(groups: &[Vec<f64>]) -> (f64, f64, Vec<f64>, usize) {
    let n_total: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n_total as f64;
    let means: Vec<f64> = groups.iter().map(|g| mean(g)).collect();
    let ssb: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.len() as f64 * (m - grand) * (m - grand))
        .sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, m)| g.iter().map(|v| (v - m) * (v - m)).sum::<f64>())
        .sum();
    (ssb, ssw, means, n_total)
}

/// F = MS_between / MS_within; p from the F survival function. A dataset
/// with zero variance anywhere (all observations identical) reports F = 0.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    check_groups(groups)?;
    let k = groups.len();
    let (ssb, ssw, _, n_total) = sums_of_squares(groups);
    let df_between = k - 1;
    let df_within = n_total - k;
    let msb = ssb / df_between as f64;
    let msw = ssw / df_within as f64;
    let f = if msw == 0.0 {
        if msb == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        msb / msw
    };
    Ok(AnovaResult { f, df_between, df_within, p: f_sf(f, df_between, df_within) })
}

// ── Tukey HSD ───────────────────────────────────────────────────────────────

/// One pairwise comparison; `q` is Tukey-Kramer studentized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub i: usize,
    pub j: usize,
    pub mean_diff: f64,
    pub q: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub pairs: Vec<TukeyPair>,
    pub df_within: usize,
    /// Critical value q(0.05, k, df) the pairs were judged against.
    pub critical_q: f64,
}

/// Studentized-range critical values q(alpha = 0.05, k, df) for k = 2..=10,
/// rows for df = 10, 20, 30, 60, 120, and infinity. Pinned against an
/// independent statistical implementation.
const Q_TABLE_DF: [f64; 6] = [10.0, 20.0, 30.0, 60.0, 120.0, f64::INFINITY];
const Q_TABLE: [[f64; 9]; 6] = [
    [3.151064, 3.876777, 4.326582, 4.654293, 4.912016, 5.124166, 5.304238, 5.460499, 5.598386],
    [2.949998, 3.577935, 3.958294, 4.231857, 4.445237, 4.619908, 4.767584, 4.895365, 5.007883],
    [2.888209, 3.486420, 3.845401, 4.102079, 4.301464, 4.464177, 4.601415, 4.719938, 4.824141],
    [2.828848, 3.398661, 3.737089, 3.977418, 4.163161, 4.314143, 4.441079, 4.550414, 4.646324],
    [2.800044, 3.356138, 3.684589, 3.916938, 4.095986, 4.241182, 4.363013, 4.467775, 4.559538],
    [2.771808, 3.314493, 3.633160, 3.857656, 4.030092, 4.169554, 4.286309, 4.386509, 4.474124],
];

/// Critical value q(0.05, k, df). Log-df interpolation between table rows;
/// above df 120 the interpolation runs in 1/df toward the asymptotic row;
/// below df 10 the df = 10 row is used as-is.
pub fn critical_q(k: usize, df: usize) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(Error::validation(format!(
            "studentized-range table covers 2..=10 groups, got {k}"
        )));
    }
    let col = k - 2;
    let df = df as f64;
    if df <= Q_TABLE_DF[0] {
        return Ok(Q_TABLE[0][col]);
    }
    // Find the bracketing rows.
    for w in 0..Q_TABLE_DF.len() - 1 {
        let (lo, hi) = (Q_TABLE_DF[w], Q_TABLE_DF[w + 1]);
        if df <= hi {
            let frac = if hi.is_infinite() {
                // Interpolate in 1/df: 1/120 -> 0.
                (1.0 / lo - 1.0 / df) / (1.0 / lo)
            } else {
                (df.ln() - lo.ln()) / (hi.ln() - lo.ln())
            };
            return Ok(Q_TABLE[w][col] + frac * (Q_TABLE[w + 1][col] - Q_TABLE[w][col]));
        }
    }
    Ok(Q_TABLE[Q_TABLE.len() - 1][col])
}

/// All-pairs Tukey HSD at the 0.05 level (the embedded critical table):
/// q_ij = |mean_i - mean_j| / sqrt(MS_within / 2 * (1/n_i + 1/n_j)),
/// significant when q exceeds q(0.05, k, df_within).
pub fn tukey_hsd(groups: &[Vec<f64>]) -> Result<TukeyResult> {
    check_groups(groups)?;
    let k = groups.len();
    let (_, ssw, means, n_total) = sums_of_squares(groups);
    let df_within = n_total - k;
    let msw = ssw / df_within as f64;
    let crit = critical_q(k, df_within)?;
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let se = (msw / 2.0 * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64))
                .sqrt();
            let diff = means[i] - means[j];
            let q = if se == 0.0 {
                if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                diff.abs() / se
            };
            pairs.push(TukeyPair { i, j, mean_diff: diff, q, significant: q > crit });
        }
    }
    Ok(TukeyResult { pairs, df_within, critical_q: crit })
}

// ── SAD imaging ─────────────────────────────────────────────────────────────

/// Sum of absolute differences between consecutive frames, at most `span`
/// difference pairs, min-max normalized to [0, 255]. A constant sequence
/// stays all-zero.
pub fn sad_image(frames: &[&[f32]], span: usize) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::validation(format!(
            "SAD needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let px = frames[0].len();
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != px) {
        return Err(Error::validation(format!(
            "frame {i} has {} pixels, frame 0 has {px}",
            f.len()
        )));
    }
    let steps = span.min(frames.len() - 1);
    let mut sad = vec![0.0f64; px];
    for t in 0..steps {
        for p in 0..px {
            sad[p] += (frames[t + 1][p] - frames[t][p]).abs() as f64;
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &sad {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        for v in &mut sad {
            *v = (*v - lo) / (hi - lo) * 255.0;
        }
    } else {
        sad.fill(0.0);
    }
    Ok(sad)
}

// ── Confusion matrix and classification metrics ─────────────────────────────

/// Square count matrix; rows are actual classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, actual: usize, predicted: usize) -> Result<()> {
        self.add_count(actual, predicted, 1)
    }

    pub fn add_count(&mut self, actual: usize, predicted: usize, count: u64) -> Result<()> {
        if actual >= self.classes || predicted >= self.classes {
            return Err(Error::contract(format!(
                "class pair ({actual}, {predicted}) out of range for {} classes",
                self.classes
            )));
        }
        self.counts[actual * self.classes + predicted] += count;
        Ok(())
    }

    pub fn count(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class test counts.
    pub fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(class, p)).sum()
    }

    /// Per-class prediction counts.
    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|a| self.count(a, class)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    /// Merge another matrix of the same shape into this one.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract(format!(
                "cannot merge a {}-class matrix into a {}-class one",
                other.classes, self.classes
            )));
        }
        for (dst, src) in self.counts.iter_mut().zip(&other.counts) {
            *dst += src;
        }
        Ok(())
    }

    /// CSV with a label header row/column; `labels` must cover every class.
    pub fn to_csv(&self, labels: &[&str]) -> Result<String> {
        if labels.len() != self.classes {
            return Err(Error::contract(format!(
                "{} labels for {} classes",
                labels.len(),
                self.classes
            )));
        }
        let mut out = String::from("actual\\predicted");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (a, l) in labels.iter().enumerate() {
            out.push_str(l);
            for p in 0..self.classes {
                out.push_str(&format!(",{}", self.count(a, p)));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// One-vs-rest scores for a single class. `degenerate` marks a zero
/// denominator (no actuals or no predictions), where the score is defined
/// as 0 rather than NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Accuracy plus one-vs-rest precision/recall/F1 per class, macro-averaged
/// with equal class weights.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::validation("empty confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(cm.classes());
    for c in 0..cm.classes() {
        let tp = cm.count(c, c);
        let fp = cm.col_sum(c) - tp;
        let fn_ = cm.row_sum(c) - tp;
        let p_den = tp + fp;
        let r_den = tp + fn_;
        let precision = if p_den == 0 { 0.0 } else { tp as f64 / p_den as f64 };
        let recall = if r_den == 0 { 0.0 } else { tp as f64 / r_den as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support: cm.row_sum(c),
            degenerate: p_den == 0 || r_den == 0,
        });
    }
    let k = per_class.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: cm.trace() as f64 / total as f64,
        macro_precision: per_class.iter().map(|m| m.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|m| m.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / k,
        per_class,
    })
}

/// Nine-class matrix folded to shelf columns (Left/Center/Right), with
/// one-vs-rest accuracy per column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnCollapse {
    pub matrix: ConfusionMatrix,
    pub accuracy: [f64; 3],
}

pub fn collapse_columns(cm: &ConfusionMatrix) -> Result<ColumnCollapse> {
    if cm.classes() != 9 {
        return Err(Error::contract(format!(
            "column collapse expects the 9-region matrix, got {} classes",
            cm.classes()
        )));
    }
    let mut matrix = ConfusionMatrix::new(3);
    for a in 0..9 {
        for p in 0..9 {
            matrix.add_count(a % 3, p % 3, cm.count(a, p))?;
        }
    }
    let total = matrix.total() as f64;
    let mut accuracy = [0.0; 3];
    for (c, acc) in accuracy.iter_mut().enumerate() {
        let tp = matrix.count(c, c);
        let tn = matrix.total() - matrix.row_sum(c) - matrix.col_sum(c) + tp;
        *acc = if total == 0.0 { 0.0 } else { (tp + tn) as f64 / total };
    }
    Ok(ColumnCollapse { matrix, accuracy })
}

// ── Image export ────────────────────────────────────────────────────────────

/// Write a binary PGM (P5) image; `pixels` are clamped to [0, 255] and
/// rounded.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::contract(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| v.clamp(0.0, 255.0).round() as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

// ── Tests ───────────────────────────────────────────────────────────────────
