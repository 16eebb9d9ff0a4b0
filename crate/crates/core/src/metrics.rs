//! Frame-level average precision, ROC AUC and the face-size / face-count
//! breakdowns.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::conversim::FaceSize;
use crate::error::{Error, Result};

/// One scored frame of one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: usize,
    pub frame_index: usize,
    pub entity_id: usize,
    /// `logit₁ − logit₀`; positive means predicted speaking.
    pub score: f64,
    pub label: u8,
    pub face_width: usize,
    pub faces_visible: usize,
}

impl PredictionRecord {
    pub fn predicted(&self) -> u8 {
        u8::from(self.score > 0.0)
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.scene_id, self.frame_index, self.entity_id)
    }
}

/// Descending score, ties broken by ascending `(scene, frame, entity)`.
fn ranking_order(a: &PredictionRecord, b: &PredictionRecord) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.key().cmp(&b.key()))
}

fn check_scores(records: &[PredictionRecord]) -> Result<()> {
    match records.iter().find(|r| !r.score.is_finite() || r.label > 1) {
        Some(r) => Err(Error::Data(format!(
            "record (scene {}, frame {}, entity {}) has score {} and label {}",
            r.scene_id, r.frame_index, r.entity_id, r.score, r.label
        ))),
        None => Ok(()),
    }
}

/// Non-interpolated average precision: the mean, over positives, of the
/// precision at each positive's rank.
pub fn average_precision(records: &[PredictionRecord]) -> Result<f64> {
    check_scores(records)?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    if positives == 0 {
        return Err(Error::Data("average precision is undefined without positive records".into()));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| ranking_order(a, b));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, r) in sorted.iter().enumerate() {
        if r.label == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Mann-Whitney estimate of `P(score⁺ > score⁻)`, ties counting one half.
pub fn auc(records: &[PredictionRecord]) -> Result<f64> {
    check_scores(records)?;
    let pos = records.iter().filter(|r| r.label == 1).count();
    let neg = records.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data(format!("AUC needs both classes, got {pos} positive and {neg} negative records")));
    }
    let mut scores: Vec<(f64, u8)> = records.iter().map(|r| (r.score, r.label)).collect();
    scores.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Twice the rank sum keeps tied mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < scores.len() {
        let mut j = i;
        while j < scores.len() && scores[j].0 == scores[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j) as u128;
        let tied_pos = scores[i..j].iter().filter(|s| s.1 == 1).count() as u128;
        twice_rank_sum += twice_mid * tied_pos;
        i = j;
    }
    let twice_u = twice_rank_sum - (pos as u128) * (pos as u128 + 1);
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    /// Absent when the bucket holds no positive record.
    pub map: Option<f64>,
    pub support: usize,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    /// Absent when every record has the same label.
    pub auc: Option<f64>,
    pub records: usize,
    pub positives: usize,
    pub by_face_size: BTreeMap<String, Bucket>,
    pub by_face_count: BTreeMap<String, Bucket>,
}

pub fn face_size_bucket(width: usize) -> &'static str {
    match FaceSize::from_width(width) {
        FaceSize::Small => "small",
        FaceSize::Medium => "medium",
        FaceSize::Large => "large",
    }
}

/// Face-count bucket; three or more faces share the last bucket.
pub fn face_count_bucket(faces: usize) -> &'static str {
    match faces {
        0 | 1 => "1",
        2 => "2",
        _ => "3",
    }
}

fn bucketize(records: &[PredictionRecord], key: impl Fn(&PredictionRecord) -> &'static str) -> Result<BTreeMap<String, Bucket>> {
    let mut groups: BTreeMap<&'static str, Vec<PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key(r)).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (name, rs) in groups {
        let positives = rs.iter().filter(|r| r.label == 1).count();
        let map = if positives > 0 { Some(average_precision(&rs)?) } else { None };
        out.insert(name.to_string(), Bucket { map, support: rs.len(), positives });
    }
    Ok(out)
}

/// Overall and bucketed metrics. Fails when no record is positive.
pub fn evaluate(records: &[PredictionRecord]) -> Result<EvalReport> {
    let mut seen = std::collections::HashSet::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.key()) {
            return Err(Error::Data(format!(
                "duplicate record for scene {}, frame {}, entity {}",
                r.scene_id, r.frame_index, r.entity_id
            )));
        }
    }
    let map = average_precision(records)?;
    let positives = records.iter().filter(|r| r.label == 1).count();
    Ok(EvalReport {
        map,
        auc: if positives < records.len() { Some(auc(records)?) } else { None },
        records: records.len(),
        positives,
        by_face_size: bucketize(records, |r| face_size_bucket(r.face_width))?,
        by_face_count: bucketize(records, |r| face_count_bucket(r.faces_visible))?,
    })
}

impl EvalReport {
    /// Human-readable multi-line summary.
    pub fn to_text(&self) -> String {
        let fmt = |m: Option<f64>| m.map_or_else(|| "n/a".to_string(), |v| format!("{:.4}", v));
        let mut s = format!(
            "mAP {:.4}  AUC {}  ({} records, {} positive)\n",
            self.map,
            fmt(self.auc),
            self.records,
            self.positives
        );
        for (title, buckets) in [("face size", &self.by_face_size), ("faces visible", &self.by_face_count)] {
            s.push_str(&format!("{title}:\n"));
            for (name, b) in buckets {
                s.push_str(&format!("  {name:<7} mAP {}  ({} records)\n", fmt(b.map), b.support));
            }
        }
        s
    }
}

pub fn write_csv<W: Write>(w: W, records: &[PredictionRecord]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    for r in records {
        wr.serialize(r).map_err(|e| Error::Data(format!("writing predictions: {e}")))?;
    }
    if records.is_empty() {
        wr.write_record(["scene_id", "frame_index", "entity_id", "score", "label", "face_width", "faces_visible"])
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<PredictionRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("reading predictions: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: usize, score: f64, label: u8) -> PredictionRecord {
        PredictionRecord { scene_id: 0, frame_index: id, entity_id: 0, score, label, face_width: 100, faces_visible: 2 }
    }

    #[test]
    fn hand_example() {
        let rs = [rec(0, 0.9, 1), rec(1, 0.8, 0), rec(2, 0.7, 1)];
        assert!((average_precision(&rs).unwrap() - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_tied() {
        let rs = [rec(0, 3.0, 1), rec(1, 2.0, 1), rec(2, 1.0, 0)];
        assert_eq!(average_precision(&rs).unwrap(), 1.0);
        assert_eq!(auc(&rs).unwrap(), 1.0);
        let tied: Vec<_> = (0..6).map(|i| rec(i, 0.3, (i % 2) as u8)).collect();
        assert_eq!(auc(&tied).unwrap(), 0.5);
    }

    #[test]
    fn undefined_cases_are_errors() {
        assert!(average_precision(&[rec(0, 1.0, 0)]).is_err());
        assert!(auc(&[rec(0, 1.0, 1)]).is_err());
        assert!(average_precision(&[rec(0, f64::NAN, 1)]).is_err());
    }

    #[test]
    fn ties_broken_by_identity() {
        // Equal scores: frame 0 ranks first regardless of input order.
        let a = [rec(1, 0.5, 0), rec(0, 0.5, 1)];
        let b = [rec(0, 0.5, 1), rec(1, 0.5, 0)];
        assert_eq!(average_precision(&a).unwrap(), 1.0);
        assert_eq!(average_precision(&b).unwrap(), 1.0);
    }

    #[test]
    fn buckets_and_duplicates() {
        assert_eq!(face_size_bucket(50), "small");
        assert_eq!(face_size_bucket(100), "medium");
        assert_eq!(face_size_bucket(200), "large");
        assert_eq!(face_count_bucket(5), "3");
        let rs = [rec(0, 0.9, 1), rec(1, 0.8, 0)];
        let report = evaluate(&rs).unwrap();
        assert_eq!(report.by_face_size["medium"].map, Some(report.map));
        assert!(evaluate(&[rec(0, 0.9, 1), rec(0, 0.8, 0)]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rs = vec![rec(0, 0.1 + 0.2, 1), rec(1, -1e-7, 0)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("scene_id,frame_index,entity_id,score,label,face_width,faces_visible\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rs);
    }
}
