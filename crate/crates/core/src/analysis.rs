//! Embedding projections, cluster and trend statistics, SVG plots and the
//! run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UtteranceRecord;
use crate::encoder::{EncoderEpochMetrics, EncoderModel};
use crate::features::{frame, load_spectrogram, LogMel};
use crate::simulate::SimulationEval;
use crate::error::{Error, IoContext, Result};
use crate::trainer::read_metrics;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMethod {
    #[default]
    Pca,
    UmapLike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

/// Top-two principal coordinates. Each axis is signed so that its largest
/// loading is positive.
pub fn pca_2d(data: &[Vec<f32>]) -> Result<Vec<(f64, f64)>> {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if d == 0 || data.iter().any(|v| v.len() != d) {
        return Err(Error::validation("embeddings must share a positive dimension"));
    }
    let mut m = DMatrix::<f64>::from_fn(n, d, |i, j| data[i][j] as f64);
    for j in 0..d {
        let mean = m.column(j).mean();
        m.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = m.transpose() * &m / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Option<Vec<f64>> {
        let col = eig.eigenvectors.column(*order.get(k)?);
        let big = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let s = if big < 0.0 { -1.0 } else { 1.0 };
        Some(col.iter().map(|v| v * s).collect())
    };
    let a0 = axis(0).expect("d ≥ 1");
    let a1 = axis(1).unwrap_or_else(|| vec![0.0; d]);
    Ok((0..n)
        .map(|i| {
            let row = m.row(i);
            let p = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
            (p(&a0), p(&a1))
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbor-graph layout: PCA start, then attraction along k-nearest-neighbor
/// edges and repulsion from random points, with a fixed seed.
pub fn umap_like_2d(data: &[Vec<f32>], k: usize, epochs: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let init = pca_2d(data)?;
    let n = data.len();
    let hi: Vec<Vec<f64>> = data.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
    let k = k.min(n - 1).max(1);
    let mut edges = Vec::new();
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (sq_dist(&hi[i], &hi[j]), j)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(d.iter().take(k).map(|&(_, j)| (i, j)));
    }
    let spread = init.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1e-12, f64::max);
    let mut pos: Vec<[f64; 2]> = init.iter().map(|p| [p.0 / spread * 10.0, p.1 / spread * 10.0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in 0..epochs {
        let alpha = 1.0 - e as f64 / epochs as f64;
        for &(i, j) in &edges {
            let d2 = sq_dist(&pos[i], &pos[j]);
            let pull = -2.0 / (1.0 + d2);
            for a in 0..2 {
                let g = (pull * (pos[i][a] - pos[j][a])).clamp(-4.0, 4.0) * alpha * 0.1;
                pos[i][a] += g;
                pos[j][a] -= g;
            }
            let r = rng.random_range(0..n);
            if r != i {
                let d2 = sq_dist(&pos[i], &pos[r]);
                let push = 2.0 / ((0.001 + d2) * (1.0 + d2));
                for a in 0..2 {
                    pos[i][a] += (push * (pos[i][a] - pos[r][a])).clamp(-4.0, 4.0) * alpha * 0.1;
                }
            }
        }
    }
    Ok(pos.into_iter().map(|p| (p[0], p[1])).collect())
}

pub fn project_2d(embeddings: &[Vec<f32>], labels: &[String], method: ProjectionMethod) -> Result<Vec<ProjectedPoint>> {
    if embeddings.len() < 3 {
        return Err(Error::validation(format!("projection needs ≥3 embeddings, got {}", embeddings.len())));
    }
    if labels.len() != embeddings.len() {
        return Err(Error::validation("one label per embedding"));
    }
    let xy = match method {
        ProjectionMethod::Pca => pca_2d(embeddings)?,
        ProjectionMethod::UmapLike => umap_like_2d(embeddings, 10, 200, 0)?,
    };
    Ok(xy
        .into_iter()
        .zip(labels)
        .map(|((x, y), l)| ProjectedPoint { x, y, label: l.clone() })
        .collect())
}

/// Mean silhouette coefficient with Euclidean distance; points in singleton
/// clusters score 0.
pub fn silhouette(points: &[ProjectedPoint]) -> Result<f64> {
    let labels: Vec<&str> = {
        let mut l: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    if labels.len() < 2 {
        return Err(Error::validation("silhouette needs at least two clusters"));
    }
    let dist = |a: &ProjectedPoint, b: &ProjectedPoint| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let mut total = 0.0;
    for p in points {
        let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for q in points {
            if std::ptr::eq(p, q) {
                continue;
            }
            let e = sums.entry(q.label.as_str()).or_default();
            e.0 += dist(p, q);
            e.1 += 1;
        }
        let own = match sums.get(p.label.as_str()) {
            Some(&(s, c)) if c > 0 => s / c as f64,
            _ => continue,
        };
        let other = sums
            .iter()
            .filter(|(l, _)| **l != p.label)
            .map(|(_, &(s, c))| s / c as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = own.max(other);
        if denom > 0.0 {
            total += (other - own) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::validation("spearman needs two equal-length series of ≥2 values"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::validation("spearman of a constant series"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceCurve {
    /// `(epoch, val_loss, mean_pairwise_distance)`
    pub rows: Vec<(usize, f64, f64)>,
    pub corr_epoch_val_loss: f64,
    pub corr_epoch_distance: f64,
}

pub fn distance_curve(log: &[EncoderEpochMetrics]) -> Result<DistanceCurve> {
    let rows: Vec<(usize, f64, f64)> = log
        .iter()
        .filter_map(|r| r.mean_pairwise_distance.map(|d| (r.epoch, r.val_loss, d)))
        .filter(|r| r.1.is_finite() && r.2.is_finite())
        .collect();
    if rows.len() < 2 {
        return Err(Error::validation("distance curve needs ≥2 epochs with loss and distance"));
    }
    let e: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
    let l: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok(DistanceCurve {
        corr_epoch_val_loss: spearman(&e, &l)?,
        corr_epoch_distance: spearman(&e, &d)?,
        rows,
    })
}

/// Read an encoder pretraining log written by
/// [`crate::encoder::write_encoder_metrics`].
pub fn read_encoder_metrics(path: &Path) -> Result<Vec<EncoderEpochMetrics>> {
    let text = fs::read_to_string(path).with_path(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    let col = |name: &str| {
        header.iter().position(|h| *h == name).ok_or_else(|| {
            Error::validation(format!("{}: missing column {name}", path.display()))
        })
    };
    let (ce, ct, cl, ca, cd) = (
        col("epoch")?,
        col("train_loss")?,
        col("val_loss")?,
        col("val_acc")?,
        col("mean_pairwise_distance")?,
    );
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 2,
            msg: m,
        };
        let get = |c: usize| f.get(c).copied().ok_or_else(|| err(format!("missing field {c}")));
        let num = |c: usize| -> Result<f64> { get(c)?.parse().map_err(|e| err(format!("{e}"))) };
        let dist = get(cd)?;
        out.push(EncoderEpochMetrics {
            epoch: get(ce)?.parse().map_err(|e| err(format!("{e}")))?,
            train_loss: num(ct)?,
            val_loss: num(cl)?,
            val_acc: num(ca)?,
            mean_pairwise_distance: if dist.is_empty() { None } else { Some(num(cd)?) },
        });
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let lo = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
        let hi = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
        let (mut x0, mut x1) = (lo(&mut xs.clone()), hi(&mut xs.clone()));
        let (mut y0, mut y1) = (lo(&mut ys.clone()), hi(&mut ys.clone()));
        if !(x1 > x0) {
            x0 -= 1.0;
            x1 += 1.0;
        }
        if !(y1 > y0) {
            y0 -= 1.0;
            y1 += 1.0;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, xml(title));
    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    s
}

fn xml(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = PAD + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 130.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            W - PAD - 115.0,
            y,
            xml(n)
        );
    }
}

pub fn scatter_svg(points: &[ProjectedPoint], title: &str) -> String {
    let mut labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let fr = Frame::fit(points.iter().map(|p| p.x), points.iter().map(|p| p.y));
    let mut s = svg_open(title);
    for p in points {
        let c = labels.iter().position(|l| *l == p.label).unwrap_or(0);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}" fill-opacity="0.75"/>"#,
            fr.px(p.x),
            fr.py(p.y),
            PALETTE[c % PALETTE.len()]
        );
    }
    legend(&mut s, &labels);
    s.push_str("</svg>\n");
    s
}

/// Line plot; each series is min-max scaled into the frame so curves with
/// different units share one panel.
pub fn lines_svg(series: &[(&str, Vec<(f64, f64)>)], title: &str, x_label: &str) -> String {
    let xs = series.iter().flat_map(|(_, v)| v.iter().map(|p| p.0));
    let fr = Frame::fit(xs.clone(), [0.0, 1.0].into_iter());
    let mut s = svg_open(title);
    for (i, (_, pts)) in series.iter().enumerate() {
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", fr.px(x), fr.py((y - lo) / span)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            path.join(" ")
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, xml(x_label));
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Per-frame embeddings of up to `per_channel` frames from each channel of
/// `records` (taken in record order), projected with `method`.
pub fn analyze_embeddings(
    encoder: &EncoderModel,
    records: &[UtteranceRecord],
    manifest_dir: &Path,
    mel: &LogMel,
    per_channel: usize,
    method: ProjectionMethod,
) -> Result<Vec<ProjectedPoint>> {
    let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for rec in records {
        let n = taken.entry(rec.channel_label.as_str()).or_insert(0);
        if *n >= per_channel {
            continue;
        }
        let frames = frame(&load_spectrogram(rec, manifest_dir, mel)?);
        for f in frames.iter().take(per_channel - *n) {
            embeddings.push(encoder.embed(f)?.vec);
            labels.push(rec.channel_label.clone());
            *n += 1;
        }
    }
    project_2d(&embeddings, &labels, method)
}

/// Files read by [`emit_report`], relative to a run directory.
pub const ENCODER_LOG: &str = "encoder_metrics.csv";
pub const TRAIN_LOG: &str = "train/metrics.csv";
pub const PROJECTION: &str = "embeddings/projection.json";
pub const SIM_METRICS: &str = "sim/metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportSummary {
    pub encoder_final_val_acc: f64,
    pub encoder_best_val_acc: f64,
    pub spearman_epoch_val_loss: f64,
    pub spearman_epoch_distance: f64,
    pub silhouette_pca: Option<f64>,
    pub train_steps: usize,
    pub ch_first_10pct: f64,
    pub ch_last_10pct: f64,
    pub total_identity_holds: bool,
    pub transfer_ratio: Option<f64>,
    pub content_corr_paired: Option<f64>,
    pub content_corr_unrelated: Option<f64>,
}

fn require(run: &Path, rel: &str) -> Result<PathBuf> {
    let p = run.join(rel);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::validation(format!("report input {} is missing", p.display())))
    }
}

/// Mean of the first and last `frac` of a series (at least one value each).
pub fn head_tail_means(v: &[f64], frac: f64) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let k = ((v.len() as f64 * frac).round() as usize).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&v[..k]), mean(&v[v.len() - k..])))
}

/// Build `report/` inside `run`: plots plus `summary.json`. Encoder and
/// training logs are required; projection and simulation results are used
/// when present.
pub fn emit_report(run: &Path) -> Result<PathBuf> {
    let enc_log = read_encoder_metrics(&require(run, ENCODER_LOG)?)?;
    let train_rows = read_metrics(&require(run, TRAIN_LOG)?)?;
    let curve = distance_curve(&enc_log)?;
    let out = run.join("report");
    fs::create_dir_all(&out).with_path(&out)?;

    let points: Option<Vec<ProjectedPoint>> = match run.join(PROJECTION) {
        p if p.is_file() => Some(serde_json::from_slice(&fs::read(&p).with_path(&p)?)?),
        _ => None,
    };
    let sim: Option<SimulationEval> = match run.join(SIM_METRICS) {
        p if p.is_file() => Some(serde_json::from_slice(&fs::read(&p).with_path(&p)?)?),
        _ => None,
    };

    let ch: Vec<f64> = train_rows.iter().map(|r| r.1[4]).collect();
    let (ch_head, ch_tail) = head_tail_means(&ch, 0.1).ok_or_else(|| Error::validation("training log has no rows"))?;
    let identity = train_rows
        .iter()
        .all(|(_, v)| crate::losses::weighted_total(v[1], v[2], v[3], v[4], crate::losses::DEFAULT_LAMBDA_CH) == v[5]);
    let summary = ReportSummary {
        encoder_final_val_acc: enc_log.last().map_or(f64::NAN, |r| r.val_acc),
        encoder_best_val_acc: enc_log.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max),
        spearman_epoch_val_loss: curve.corr_epoch_val_loss,
        spearman_epoch_distance: curve.corr_epoch_distance,
        silhouette_pca: points.as_deref().map(silhouette).transpose()?,
        train_steps: train_rows.len(),
        ch_first_10pct: ch_head,
        ch_last_10pct: ch_tail,
        total_identity_holds: identity,
        transfer_ratio: sim.as_ref().map(|s| s.transfer_ratio),
        content_corr_paired: sim.as_ref().map(|s| s.content_corr_paired),
        content_corr_unrelated: sim.as_ref().map(|s| s.content_corr_unrelated),
    };
    let write = |name: &str, body: &str| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, body).with_path(&p)
    };
    write("summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;

    let epochs = |f: fn(&(usize, f64, f64)) -> f64| curve.rows.iter().map(|r| (r.0 as f64, f(r))).collect::<Vec<_>>();
    write(
        "distance_curve.svg",
        &lines_svg(
            &[("validation loss", epochs(|r| r.1)), ("pairwise distance", epochs(|r| r.2))],
            "Encoder validation loss and pairwise set distance",
            "epoch",
        ),
    )?;
    let col = |i: usize| train_rows.iter().map(|(s, v)| (*s as f64, v[i])).collect::<Vec<_>>();
    write(
        "loss_curves.svg",
        &lines_svg(
            &[("adv_d", col(0)), ("adv_g", col(1)), ("pcl_src", col(2)), ("pcl_tgt", col(3)), ("ch", col(4))],
            "Training losses (each min-max scaled)",
            "step",
        ),
    )?;
    if let Some(p) = &points {
        write("projection.svg", &scatter_svg(p, "Channel embeddings (PCA)"))?;
    }
    Ok(out)
}
