//! Distance statistics, distance-ratio intervals and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::episodes::{oracle_positive, Episode, EpisodeFile, PoolIndex};
use crate::error::{Error, Result};
use crate::manifest::DatasetManifest;
use crate::model::Model;
use crate::training::ImageBank;

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const RAW_DISTANCES_CSV: &str = "raw_distances.csv";
pub const FIG3_EXPORT: &str = "fig3_export.json";

fn euclidean(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Euclidean distance to the positive and to each negative, negatives in
/// support order.
pub fn episode_distances(query: &[f64], support: &[Vec<f64>], positive_index: usize) -> Result<(f64, Vec<f64>)> {
    if positive_index >= support.len() {
        return Err(Error::InvalidArgument(format!(
            "positive index {positive_index} outside a support of {}",
            support.len()
        )));
    }
    let d = support.iter().map(|s| euclidean(query, s)).collect::<Result<Vec<_>>>()?;
    let negs = d.iter().enumerate().filter(|(j, _)| *j != positive_index).map(|(_, v)| *v).collect();
    Ok((d[positive_index], negs))
}

/// Sample mean and normal-approximation 95% half-width `1.96·sd/√n`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Point ratio `|neg − pos| / pos`.
pub fn distance_ratio(pos_mean: f64, neg_mean: f64) -> Result<f64> {
    if !(pos_mean > 0.0) {
        return Err(Error::InvalidArgument(format!("positive distance {pos_mean} must be positive")));
    }
    Ok((neg_mean - pos_mean).abs() / pos_mean)
}

/// Ratio interval from the confidence-interval endpoints: the low end pairs the
/// smallest negative with the largest positive, the high end the reverse.
pub fn distance_ratio_interval(pos_mean: f64, pos_ci: f64, neg_mean: f64, neg_ci: f64) -> Result<(f64, f64)> {
    let pos_lo = pos_mean - pos_ci;
    let pos_hi = pos_mean + pos_ci;
    if !(pos_mean > 0.0) || !(pos_lo > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "positive distance bound {pos_lo} must be positive for a ratio interval"
        )));
    }
    let lo = ((neg_mean - neg_ci) - pos_hi).abs() / pos_hi;
    let hi = ((neg_mean + neg_ci) - pos_lo).abs() / pos_lo;
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub model: String,
    pub split_mode: String,
    pub shared_count: usize,
    pub n_episodes: usize,
    pub avg_pos: f64,
    pub pos_ci95: f64,
    /// Mean over episodes of each episode's mean negative distance.
    pub avg_neg: f64,
    pub neg_ci95: f64,
    pub ratio: f64,
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Fraction of episodes whose nearest support element is the positive.
    pub match_accuracy: f64,
    /// Fraction of episodes whose stored positive agrees with the aspect oracle.
    pub oracle_agreement: f64,
}

/// Per-episode audit row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDistance {
    pub episode: usize,
    pub query_id: String,
    pub aspect_property: String,
    pub shared_count: usize,
    pub positive_index: usize,
    pub predicted_index: usize,
    pub oracle_index: Option<usize>,
    pub pos_distance: f64,
    pub mean_neg_distance: f64,
    /// Distances to every support element in support order, `;`-separated.
    pub distances: String,
}

impl RawDistance {
    pub fn distance_values(&self) -> Result<Vec<f64>> {
        self.distances
            .split(';')
            .map(|s| s.parse::<f64>().map_err(|e| Error::InvalidArgument(format!("bad distance `{s}`: {e}"))))
            .collect()
    }
}

pub struct Evaluation {
    pub reports: Vec<DistanceReport>,
    pub raw: Vec<RawDistance>,
}

fn argmin(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if *v < best.1 { (i, *v) } else { best })
        .0
}

/// Distances for each episode, embedding in batches of `batch_size`.
pub fn score_episodes(
    model: &Model<f32>,
    bank: &ImageBank,
    manifest: &DatasetManifest,
    episodes: &[Episode],
    batch_size: usize,
) -> Result<Vec<RawDistance>> {
    let index = PoolIndex::new(manifest);
    let mut rows = Vec::with_capacity(episodes.len());
    for chunk in episodes.chunks(batch_size.max(1)) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let batch = bank.batch::<f32>(&refs)?;
        let n = batch.support_size;
        let (q, s) = model.embed_batch(&batch.query, &batch.support, n)?;
        for (b, e) in chunk.iter().enumerate() {
            let to64 = |r: &[f32]| r.iter().map(|v| f64::from(*v)).collect::<Vec<_>>();
            let support: Vec<Vec<f64>> = (0..n).map(|j| to64(s.row(b * n + j))).collect();
            let query = to64(q.row(b));
            let all = support.iter().map(|v| euclidean(&query, v)).collect::<Result<Vec<_>>>()?;
            let (pos, negs) = episode_distances(&query, &support, e.positive_index)?;
            rows.push(RawDistance {
                episode: e.index,
                query_id: e.query_id.clone(),
                aspect_property: e.aspect_property.clone(),
                shared_count: e.shared_count,
                positive_index: e.positive_index,
                predicted_index: argmin(&all),
                oracle_index: oracle_positive(&index, e)?,
                pos_distance: pos,
                mean_neg_distance: negs.iter().sum::<f64>() / negs.len() as f64,
                distances: all.iter().map(|d| format!("{d:.6}")).collect::<Vec<_>>().join(";"),
            });
        }
    }
    Ok(rows)
}

/// Groups audit rows by shared count into report rows.
pub fn summarize(model: &str, split_mode: &str, raw: &[RawDistance]) -> Result<Vec<DistanceReport>> {
    let mut groups: BTreeMap<usize, Vec<&RawDistance>> = BTreeMap::new();
    for r in raw {
        groups.entry(r.shared_count).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(s, rows)| {
            let n = rows.len();
            let pos: Vec<f64> = rows.iter().map(|r| r.pos_distance).collect();
            let neg: Vec<f64> = rows.iter().map(|r| r.mean_neg_distance).collect();
            let (avg_pos, pos_ci95) = mean_ci95(&pos);
            let (avg_neg, neg_ci95) = mean_ci95(&neg);
            let (ratio, (ratio_lo, ratio_hi)) = match (distance_ratio(avg_pos, avg_neg), distance_ratio_interval(avg_pos, pos_ci95, avg_neg, neg_ci95)) {
                (Ok(r), Ok(iv)) => (r, iv),
                _ => (f64::NAN, (f64::NAN, f64::NAN)),
            };
            let frac = |k: usize| k as f64 / n as f64;
            Ok(DistanceReport {
                model: model.to_string(),
                split_mode: split_mode.to_string(),
                shared_count: s,
                n_episodes: n,
                avg_pos,
                pos_ci95,
                avg_neg,
                neg_ci95,
                ratio,
                ratio_lo,
                ratio_hi,
                match_accuracy: frac(rows.iter().filter(|r| r.predicted_index == r.positive_index).count()),
                oracle_agreement: frac(rows.iter().filter(|r| r.oracle_index == Some(r.positive_index)).count()),
            })
        })
        .collect()
}

/// Scores a model on an episode file, one report per shared count.
pub fn evaluate(
    model: &Model<f32>,
    model_name: &str,
    episodes: &EpisodeFile,
    bank: &ImageBank,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<Evaluation> {
    if episodes.header.manifest_hash != manifest.content_hash()? {
        return Err(Error::InvalidEpisodes("episode file was built from a different manifest".into()));
    }
    let raw = score_episodes(model, bank, manifest, &episodes.episodes, batch_size)?;
    let reports = summarize(model_name, &episodes.header.split_mode.to_string(), &raw)?;
    Ok(Evaluation { reports, raw })
}

/// Refuses to score a checkpoint on episodes drawn from another dataset.
pub fn check_checkpoint_matches(checkpoint: &Checkpoint, episodes: &EpisodeFile) -> Result<()> {
    if checkpoint.state.manifest_hash != episodes.header.manifest_hash {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on manifest {} but the episodes come from {}",
            crate::fingerprint::short(&checkpoint.state.manifest_hash),
            crate::fingerprint::short(&episodes.header.manifest_hash)
        )));
    }
    Ok(())
}

/// Paper-style text table.
pub fn format_table(reports: &[DistanceReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:<7} {:>2} {:>6} {:>18} {:>18} {:>13} {:>9}",
        "model", "split", "s", "n", "pos. distance", "neg. distance", "ratio", "match acc"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} {:<7} {:>2} {:>6} {:>18} {:>18} {:>13} {:>9.3}",
            r.model,
            r.split_mode,
            r.shared_count,
            r.n_episodes,
            format!("{:.3} ± {:.3}", r.avg_pos, r.pos_ci95),
            format!("{:.3} ± {:.3}", r.avg_neg, r.neg_ci95),
            format!("{:.2}-{:.2}", r.ratio_lo, r.ratio_hi),
            r.match_accuracy
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Support {
    pub sample_id: String,
    pub image_path: String,
    pub distance: f64,
    pub is_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3SupportSet {
    pub episode: usize,
    pub aspect_property: String,
    pub shared_count: usize,
    pub positive_index: usize,
    pub predicted_index: usize,
    pub supports: Vec<Fig3Support>,
}

/// One query shown against several support sets, with the distance to every
/// support image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Export {
    pub model: String,
    pub query_id: String,
    pub query_image: String,
    pub support_sets: Vec<Fig3SupportSet>,
}

/// Builds the figure data for `query_id` (default: the first query in `raw`)
/// from at most `max_sets` of its episodes.
pub fn fig3_export(
    model: &str,
    raw: &[RawDistance],
    episodes: &EpisodeFile,
    manifest: &DatasetManifest,
    query_id: Option<&str>,
    max_sets: usize,
) -> Result<Fig3Export> {
    let query_id = match query_id {
        Some(q) => q.to_string(),
        None => raw.first().map(|r| r.query_id.clone()).ok_or_else(|| Error::InvalidArgument("no episodes".into()))?,
    };
    let image = |id: &str| {
        manifest
            .record(id)
            .map(|r| r.image_path.clone())
            .ok_or_else(|| Error::InvalidEpisodes(format!("unknown sample id `{id}`")))
    };
    let by_index: BTreeMap<usize, &Episode> = episodes.episodes.iter().map(|e| (e.index, e)).collect();
    let mut sets = Vec::new();
    for r in raw.iter().filter(|r| r.query_id == query_id).take(max_sets) {
        let e = by_index
            .get(&r.episode)
            .ok_or_else(|| Error::InvalidEpisodes(format!("episode {} missing from the file", r.episode)))?;
        let d = r.distance_values()?;
        let supports = e
            .support_ids
            .iter()
            .zip(&d)
            .enumerate()
            .map(|(j, (id, dist))| {
                Ok(Fig3Support { sample_id: id.clone(), image_path: image(id)?, distance: *dist, is_positive: j == e.positive_index })
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push(Fig3SupportSet {
            episode: e.index,
            aspect_property: e.aspect_property.clone(),
            shared_count: e.shared_count,
            positive_index: e.positive_index,
            predicted_index: r.predicted_index,
            supports,
        });
    }
    if sets.is_empty() {
        return Err(Error::InvalidArgument(format!("query `{query_id}` has no scored episodes")));
    }
    Ok(Fig3Export { model: model.to_string(), query_image: image(&query_id)?, query_id, support_sets: sets })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<DistanceReport>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawDistance>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes only the report table, as CSV and as text.
pub fn write_table(dir: &Path, reports: &[DistanceReport]) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("nothing to report".into()));
    }
    create_dir(dir)?;
    let csv_path = dir.join(REPORT_CSV);
    write_csv(&csv_path, reports)?;
    let txt_path = dir.join(REPORT_TXT);
    std::fs::write(&txt_path, format_table(reports)).map_err(|e| Error::io(&txt_path, e))?;
    Ok(vec![csv_path, txt_path])
}

/// Writes the report table (CSV and text), the audit rows and optionally the
/// figure data into `dir`. Returns the written paths.
pub fn render_report(
    dir: &Path,
    reports: &[DistanceReport],
    raw: &[RawDistance],
    fig3: Option<&Fig3Export>,
) -> Result<Vec<PathBuf>> {
    let mut written = write_table(dir, reports)?;
    let p = dir.join(RAW_DISTANCES_CSV);
    write_csv(&p, raw)?;
    written.push(p);
    if let Some(fig) = fig3 {
        let p = dir.join(FIG3_EXPORT);
        let mut text = serde_json::to_string_pretty(fig)?;
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round2(v: f64) -> f64 {
        (v * 100.0).round() / 100.0
    }

    #[test]
    fn distance_examples() {
        let (pos, negs) = episode_distances(&[0.0, 0.0], &[vec![3.0, 4.0], vec![6.0, 8.0]], 0).unwrap();
        assert_eq!((pos, negs), (5.0, vec![10.0]));
        let (pos, _) = episode_distances(&[1.0, 2.0], &[vec![0.0, 0.0], vec![1.0, 2.0]], 1).unwrap();
        assert_eq!(pos, 0.0);
        assert!(episode_distances(&[1.0], &[vec![1.0, 2.0], vec![0.0]], 0).is_err());
        assert!(episode_distances(&[1.0], &[vec![1.0], vec![0.0]], 2).is_err());
    }

    #[test]
    fn ratio_interval_examples() {
        let (lo, hi) = distance_ratio_interval(49.0, 0.46, 54.9, 0.28).unwrap();
        assert_eq!((round2(lo), round2(hi)), (0.10, 0.14));
        assert_eq!(distance_ratio_interval(3.0, 0.0, 3.0, 0.0).unwrap(), (0.0, 0.0));
        assert_eq!(distance_ratio_interval(2.0, 0.0, 6.0, 0.0).unwrap(), (2.0, 2.0));
        assert!(distance_ratio_interval(0.0, 0.0, 1.0, 0.0).is_err());
        assert!(distance_ratio_interval(1.0, 1.5, 4.0, 0.0).is_err());
        let (lo, hi) = distance_ratio_interval(5.0, 0.01, 5.0 + 1e-9, 0.0).unwrap();
        assert!(lo < 0.01 && hi < 0.01);
    }

    #[test]
    fn ci_uses_the_sample_standard_deviation() {
        let (m, ci) = mean_ci95(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((ci - 1.96 * sd / 2.0).abs() < 1e-12);
        assert_eq!(mean_ci95(&[7.0]), (7.0, 0.0));
    }

    fn raw(episode: usize, s: usize, pos: f64, d: &[f64], positive: usize) -> RawDistance {
        let negs: Vec<f64> = d.iter().enumerate().filter(|(j, _)| *j != positive).map(|(_, v)| *v).collect();
        RawDistance {
            episode,
            query_id: format!("q{}", episode / 3),
            aspect_property: "color".into(),
            shared_count: s,
            positive_index: positive,
            predicted_index: argmin(d),
            oracle_index: Some(positive),
            pos_distance: pos,
            mean_neg_distance: negs.iter().sum::<f64>() / negs.len() as f64,
            distances: d.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(";"),
        }
    }

    #[test]
    fn summaries_group_by_shared_count_and_round_trip() {
        let rows = vec![
            raw(0, 0, 1.0, &[1.0, 2.0, 3.0], 0),
            raw(1, 1, 2.0, &[3.0, 2.0, 1.0], 1),
            raw(2, 0, 1.5, &[1.5, 4.0, 5.0], 0),
        ];
        let reports = summarize("dstm", "query", &rows).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports.iter().map(|r| r.n_episodes).sum::<usize>(), 3);
        assert_eq!(reports[0].match_accuracy, 1.0);
        assert_eq!(reports[1].match_accuracy, 0.0);
        assert!((reports[0].avg_neg - 3.5).abs() < 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let paths = render_report(dir.path(), &reports, &rows, None).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(read_report_csv(&dir.path().join(REPORT_CSV)).unwrap(), reports);
        assert_eq!(read_raw_csv(&dir.path().join(RAW_DISTANCES_CSV)).unwrap(), rows);
        let text = std::fs::read_to_string(dir.path().join(REPORT_TXT)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(render_report(dir.path(), &[], &rows, None).is_err());
    }

    #[test]
    fn argmin_prefers_the_first_minimum() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
    }
}
