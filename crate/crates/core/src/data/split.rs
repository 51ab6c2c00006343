//! Pose-log frame selection for driving datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::fmt_sig;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub scene_id: String,
    pub camera_id: String,
    /// Microseconds.
    pub timestamp: u64,
    pub position: [f64; 3],
    pub occlusion: f64,
}

impl FrameRecord {
    fn displacement(&self, other: &FrameRecord) -> f64 {
        let d: f64 = (0..3).map(|k| (self.position[k] - other.position[k]).powi(2)).sum();
        d.sqrt()
    }

    pub fn to_line(&self) -> String {
        let [x, y, z] = self.position;
        format!("{}\t{}\t{}\t{x}\t{y}\t{z}\t{}", self.scene_id, self.camera_id, self.timestamp, self.occlusion)
    }
}

/// Parses tab-separated records in field order; blank lines and `#` lines are skipped.
pub fn parse_pose_log(text: &str) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(err(format!("expected 7 tab-separated fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].trim().parse::<f64>().map_err(|_| err(format!("field {} is not a number: {:?}", k + 1, fields[k])))
        };
        let timestamp = fields[2].trim().parse::<u64>().map_err(|_| err(format!("bad timestamp {:?}", fields[2])))?;
        let occlusion = num(6)?;
        if !(0.0..=1.0).contains(&occlusion) {
            return Err(err(format!("occlusion {occlusion} outside [0, 1]")));
        }
        let position = [num(3)?, num(4)?, num(5)?];
        if position.iter().any(|v| !v.is_finite()) {
            return Err(err("non-finite position".into()));
        }
        out.push(FrameRecord {
            scene_id: fields[0].to_string(),
            camera_id: fields[1].to_string(),
            timestamp,
            position,
            occlusion,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_threshold: f64,
    pub test_threshold: f64,
    pub max_occlusion: f64,
    pub crop_width: u32,
    pub crop_height: u32,
    pub top_crop: u32,
    pub depth_cap: f64,
    /// Gate all cameras of a scene on one displacement sequence.
    pub shared_gate: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::argoverse()
    }
}

impl SplitSpec {
    pub fn argoverse() -> Self {
        Self {
            train_threshold: 2.0,
            test_threshold: 50.0,
            max_occlusion: 0.30,
            crop_width: 1920,
            crop_height: 870,
            top_crop: 180,
            depth_cap: 150.0,
            shared_gate: false,
        }
    }

    pub fn ddad() -> Self {
        Self { top_crop: 210, ..Self::argoverse() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_threshold > 0.0 && self.test_threshold >= self.train_threshold) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < train ({}) ≤ test ({})",
                self.train_threshold, self.test_threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.max_occlusion) {
            return Err(Error::Config(format!("max occlusion {} outside [0, 1]", self.max_occlusion)));
        }
        Ok(())
    }

    pub fn header(&self) -> String {
        format!(
            "# train_threshold={} test_threshold={} max_occlusion={} crop={}x{} top_crop={} depth_cap={} shared_gate={}",
            fmt_sig(self.train_threshold),
            fmt_sig(self.test_threshold),
            fmt_sig(self.max_occlusion),
            self.crop_width,
            self.crop_height,
            self.top_crop,
            fmt_sig(self.depth_cap),
            self.shared_gate
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScenePartition {
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl ScenePartition {
    pub fn new<S: Into<String>>(train: impl IntoIterator<Item = S>, test: impl IntoIterator<Item = S>) -> Self {
        Self { train: train.into_iter().map(Into::into).collect(), test: test.into_iter().map(Into::into).collect() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub train: Vec<FrameRecord>,
    pub test: Vec<FrameRecord>,
}

/// Greedy selection from the previously selected frame: the first frame is
/// kept, later ones once the ego has moved at least `threshold` meters.
fn greedy<'a>(frames: impl IntoIterator<Item = &'a FrameRecord>, threshold: f64) -> Vec<&'a FrameRecord> {
    let mut kept: Vec<&FrameRecord> = Vec::new();
    for f in frames {
        if kept.last().map_or(true, |last| f.displacement(last) >= threshold) {
            kept.push(f);
        }
    }
    kept
}

/// Every scene in `records` must appear in exactly one side of `partition`.
/// Cameras whose mean occlusion within a scene exceeds the limit are dropped.
pub fn make_split(records: &[FrameRecord], spec: &SplitSpec, partition: &ScenePartition) -> Result<Split> {
    spec.validate()?;
    if let Some(s) = partition.train.intersection(&partition.test).next() {
        return Err(Error::Config(format!("scene {s:?} is in both train and test")));
    }
    let mut streams: BTreeMap<(&str, &str), Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        let stream = streams.entry((r.scene_id.as_str(), r.camera_id.as_str())).or_default();
        if let Some(prev) = stream.last() {
            if r.timestamp <= prev.timestamp {
                return Err(Error::Contract(format!(
                    "records for scene {:?} camera {:?} are not strictly timestamp-sorted ({} after {})",
                    r.scene_id, r.camera_id, r.timestamp, prev.timestamp
                )));
            }
        }
        stream.push(r);
    }
    streams.retain(|_, frames| {
        let mean = frames.iter().map(|f| f.occlusion).sum::<f64>() / frames.len() as f64;
        mean <= spec.max_occlusion
    });
    let mut scenes: BTreeMap<&str, Vec<&Vec<&FrameRecord>>> = BTreeMap::new();
    for ((scene, _), frames) in &streams {
        scenes.entry(scene).or_default().push(frames);
    }
    for r in records {
        let s = r.scene_id.as_str();
        if !partition.train.contains(s) && !partition.test.contains(s) {
            return Err(Error::Config(format!("scene {s:?} is absent from the partition")));
        }
    }
    let mut split = Split::default();
    for (scene, cams) in scenes {
        let (out, threshold) = if partition.train.contains(scene) {
            (&mut split.train, spec.train_threshold)
        } else {
            (&mut split.test, spec.test_threshold)
        };
        let start = out.len();
        if spec.shared_gate {
            let mut by_time: BTreeMap<u64, Vec<&FrameRecord>> = BTreeMap::new();
            for frames in &cams {
                for f in frames.iter() {
                    by_time.entry(f.timestamp).or_default().push(f);
                }
            }
            let leaders = greedy(by_time.values().map(|fs| fs[0]), threshold);
            let kept: BTreeSet<u64> = leaders.iter().map(|f| f.timestamp).collect();
            for frames in &cams {
                out.extend(frames.iter().filter(|f| kept.contains(&f.timestamp)).map(|f| (*f).clone()));
            }
        } else {
            for frames in &cams {
                out.extend(greedy(frames.iter().copied(), threshold).into_iter().cloned());
            }
        }
        out[start..].sort_by(|a, b| (&a.camera_id, a.timestamp).cmp(&(&b.camera_id, b.timestamp)));
    }
    Ok(split)
}

/// Header line then one `scene\tcamera\ttimestamp` line per frame.
pub fn write_manifest(frames: &[FrameRecord], spec: &SplitSpec) -> String {
    let mut out = spec.header();
    out.push('\n');
    for f in frames {
        writeln!(out, "{}\t{}\t{}", f.scene_id, f.camera_id, f.timestamp).expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(scene: &str, cam: &str, n: usize, spacing: f64, occlusion: f64) -> Vec<FrameRecord> {
        (0..n)
            .map(|i| FrameRecord {
                scene_id: scene.into(),
                camera_id: cam.into(),
                timestamp: 1000 * i as u64,
                position: [spacing * i as f64, 0.0, 0.0],
                occlusion,
            })
            .collect()
    }

    #[test]
    fn unit_spacing_keeps_every_other_frame() {
        let recs = line("a", "front", 9, 1.0, 0.0);
        let split = make_split(&recs, &SplitSpec::default(), &ScenePartition::new(["a"], [])).unwrap();
        let ts: Vec<u64> = split.train.iter().map(|f| f.timestamp / 1000).collect();
        assert_eq!(ts, vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn empty_and_occluded() {
        let split = make_split(&[], &SplitSpec::default(), &ScenePartition::default()).unwrap();
        assert!(split.train.is_empty() && split.test.is_empty());
        let mut recs = line("a", "left", 5, 3.0, 0.31);
        recs.extend(line("a", "right", 5, 3.0, 0.30));
        let split = make_split(&recs, &SplitSpec::default(), &ScenePartition::new(["a"], [])).unwrap();
        assert!(split.train.iter().all(|f| f.camera_id == "right"));
        assert_eq!(split.train.len(), 5);
    }

    #[test]
    fn unsorted_is_a_contract_error() {
        let mut recs = line("a", "front", 3, 1.0, 0.0);
        recs.swap(0, 2);
        let err = make_split(&recs, &SplitSpec::default(), &ScenePartition::new(["a"], [])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn test_scenes_use_wide_threshold() {
        let recs = line("b", "front", 12, 10.0, 0.0);
        let split = make_split(&recs, &SplitSpec::default(), &ScenePartition::new([], ["b"])).unwrap();
        let ts: Vec<u64> = split.test.iter().map(|f| f.timestamp / 1000).collect();
        assert_eq!(ts, vec![0, 5, 10]);
    }

    #[test]
    fn shared_gate_selects_common_timestamps() {
        let mut recs = line("a", "front", 5, 1.0, 0.0);
        recs.extend(line("a", "rear", 5, 1.0, 0.0));
        let spec = SplitSpec { shared_gate: true, ..SplitSpec::default() };
        let split = make_split(&recs, &spec, &ScenePartition::new(["a"], [])).unwrap();
        assert_eq!(split.train.len(), 6);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let recs = line("s", "c", 2, 1.5, 0.1);
        let text: String = recs.iter().map(|r| r.to_line() + "\n").collect();
        assert_eq!(parse_pose_log(&text).unwrap(), recs);
        assert!(matches!(parse_pose_log("a\tb\t1\t0\t0\t0\t1.5"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_pose_log("\na\tb"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn partition_must_cover_scenes() {
        let recs = line("a", "front", 2, 1.0, 0.0);
        assert!(matches!(make_split(&recs, &SplitSpec::default(), &ScenePartition::default()), Err(Error::Config(_))));
        assert!(SplitSpec { test_threshold: 1.0, ..SplitSpec::default() }.validate().is_err());
    }
}
