//! On-disk dataset layout.
//!
//! ```text
//! <dir>/world.json              world parameters, seed and obstacles
//! <dir>/poses.csv               frame_id,timestamp,x,y,yaw
//! <dir>/clouds/<id:06>.bin      little-endian f32 (x, y, z) triplets
//! <dir>/meta.json               format version, counts, generation settings
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_trajectory, simulate_scan, Obstacle, ScanConfig, TrajectoryParams, WorldModel, WorldParams};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose2};
use crate::seed;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const POSES_HEADER: &str = "frame_id,timestamp,x,y,yaw";
/// Seconds between consecutive frames.
pub const FRAME_INTERVAL: f64 = 0.1;

/// Serialized form of a [`WorldModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format_version: u32,
    pub seed: u64,
    pub params: WorldParams,
    pub obstacles: Vec<Obstacle>,
}

impl WorldFile {
    pub fn from_world(w: &WorldModel) -> Self {
        WorldFile {
            format_version: DATASET_FORMAT_VERSION,
            seed: w.seed,
            params: w.params.clone(),
            obstacles: w.obstacles.clone(),
        }
    }

    pub fn to_json(w: &WorldModel) -> String {
        let mut s = serde_json::to_string_pretty(&Self::from_world(w)).expect("world serializes");
        s.push('\n');
        s
    }

    /// Parses and validates a world file.
    pub fn parse(text: &str) -> Result<WorldModel> {
        let f: WorldFile = serde_json::from_str(text).map_err(|e| Error::format("world.json", e.to_string()))?;
        if f.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "world.json",
                format!("unsupported format_version {}", f.format_version),
            ));
        }
        let w = WorldModel {
            seed: f.seed,
            params: f.params,
            obstacles: f.obstacles,
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub frame_count: usize,
    pub point_count: usize,
    pub world_seed: u64,
    pub trajectory_seed: u64,
    pub scan_seed: u64,
    pub frame_interval: f64,
    pub trajectory: TrajectoryParams,
    pub scan: ScanConfig,
}

impl DatasetMeta {
    pub fn parse(text: &str) -> Result<Self> {
        let m: DatasetMeta = serde_json::from_str(text).map_err(|e| Error::format("meta.json", e.to_string()))?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                "meta.json",
                format!("unsupported format_version {}", m.format_version),
            ));
        }
        m.scan.validate()?;
        Ok(m)
    }
}

/// One simulated frame with its ground-truth world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp: f64,
    pub cloud: PointCloud,
    pub pose: Pose2,
}

/// One row of `poses.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRow {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub world: WorldModel,
    pub frames: Vec<FrameRecord>,
}

impl Dataset {
    /// Drives `world` along a trajectory and scans every frame. Frame `i`
    /// uses the scan seed derived from `(scan_seed, i)`.
    pub fn generate(
        world: &WorldModel,
        trajectory: &TrajectoryParams,
        scan: &ScanConfig,
        trajectory_seed: u64,
        scan_seed: u64,
    ) -> Result<Self> {
        scan.validate()?;
        let poses = generate_trajectory(world, trajectory, trajectory_seed)?;
        let frames = poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| {
                let cloud = simulate_scan(world, pose, scan, seed::derive(scan_seed, &[i as u64]))?;
                Ok(FrameRecord {
                    frame_id: i as u64,
                    timestamp: i as f64 * FRAME_INTERVAL,
                    cloud,
                    pose: *pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = DatasetMeta {
            format_version: DATASET_FORMAT_VERSION,
            frame_count: frames.len(),
            point_count: frames.iter().map(|f| f.cloud.len()).sum(),
            world_seed: world.seed,
            trajectory_seed,
            scan_seed,
            frame_interval: FRAME_INTERVAL,
            trajectory: trajectory.clone(),
            scan: scan.clone(),
        };
        Ok(Dataset {
            meta,
            world: world.clone(),
            frames,
        })
    }

    pub fn poses(&self) -> Vec<Pose2> {
        self.frames.iter().map(|f| f.pose).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let world = WorldFile::parse(&read("world.json")?)?;
        let meta = DatasetMeta::parse(&read("meta.json")?)?;
        let rows = parse_poses_csv(&read("poses.csv")?)?;
        if rows.len() != meta.frame_count {
            return Err(Error::format(
                "dataset",
                format!(
                    "meta.json lists {} frames, poses.csv has {}",
                    meta.frame_count,
                    rows.len()
                ),
            ));
        }
        let frames = rows
            .into_iter()
            .map(|r| {
                let p = dir.join("clouds").join(cloud_file_name(r.frame_id));
                let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                Ok(FrameRecord {
                    frame_id: r.frame_id,
                    timestamp: r.timestamp,
                    cloud: parse_cloud_bin(&bytes)?,
                    pose: r.pose,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { meta, world, frames })
    }
}

pub fn cloud_file_name(frame_id: u64) -> String {
    format!("{frame_id:06}.bin")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let clouds = dir.join("clouds");
    fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    let put = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(p, e))
    };
    put("world.json", WorldFile::to_json(&ds.world).as_bytes())?;
    let rows: Vec<PoseRow> = ds
        .frames
        .iter()
        .map(|f| PoseRow {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            pose: f.pose,
        })
        .collect();
    put("poses.csv", write_poses_csv(&rows).as_bytes())?;
    for f in &ds.frames {
        let p = clouds.join(cloud_file_name(f.frame_id));
        fs::write(&p, write_cloud_bin(&f.cloud)).map_err(|e| Error::io(p, e))?;
    }
    let mut meta = serde_json::to_string_pretty(&ds.meta)?;
    meta.push('\n');
    put("meta.json", meta.as_bytes())
}

/// Shortest decimal form of `v` rounded to 9 significant digits.
fn sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn write_poses_csv(rows: &[PoseRow]) -> String {
    let mut s = String::with_capacity(48 * (rows.len() + 1));
    s.push_str(POSES_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.frame_id,
            sig9(r.timestamp),
            sig9(r.pose.x()),
            sig9(r.pose.y()),
            sig9(r.pose.yaw())
        );
    }
    s
}

pub fn parse_poses_csv(text: &str) -> Result<Vec<PoseRow>> {
    let bad = |line: usize, m: String| Error::format("poses.csv", format!("line {line}: {m}"));
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == POSES_HEADER => {}
        Some(h) => return Err(bad(1, format!("expected header {POSES_HEADER:?}, got {h:?}"))),
        None => return Err(bad(1, "empty file".into())),
    }
    let mut rows: Vec<PoseRow> = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(n, format!("expected 5 fields, got {}", fields.len())));
        }
        let frame_id: u64 = fields[0]
            .parse()
            .map_err(|_| bad(n, format!("bad frame_id {:?}", fields[0])))?;
        let mut vals = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| bad(n, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(n, format!("non-finite value {f:?}")));
            }
            vals[k] = v;
        }
        if let Some(prev) = rows.last() {
            if frame_id <= prev.frame_id {
                return Err(bad(n, format!("frame_id {frame_id} not above {}", prev.frame_id)));
            }
        }
        rows.push(PoseRow {
            frame_id,
            timestamp: vals[0],
            pose: Pose2::try_new(vals[1], vals[2], vals[3]).map_err(|e| bad(n, e.to_string()))?,
        });
    }
    Ok(rows)
}

pub fn write_cloud_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 12);
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn parse_cloud_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(12) {
        return Err(Error::format(
            "cloud",
            format!("{} bytes is not a whole number of f32 triplets", bytes.len()),
        ));
    }
    let pts: Vec<[f64; 3]> = bytes
        .chunks_exact(12)
        .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64))
        .collect();
    PointCloud::new(pts).map_err(|e| Error::format("cloud", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::super::generate_world;
    use super::*;

    fn small() -> Dataset {
        let world = generate_world(3, &WorldParams::default()).unwrap();
        let traj = TrajectoryParams {
            frames: 6,
            ..TrajectoryParams::default()
        };
        let scan = ScanConfig {
            beams: 90,
            ..ScanConfig::default()
        };
        Dataset::generate(&world, &traj, &scan, 4, 5).unwrap()
    }

    #[test]
    fn round_trip_through_disk() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.world, ds.world);
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.frames.len(), 6);
        for (a, b) in back.frames.iter().zip(&ds.frames) {
            assert_eq!(a.frame_id, b.frame_id);
            assert!((a.pose.x() - b.pose.x()).abs() < 1e-6 * b.pose.x().abs().max(1.0));
            assert_eq!(a.cloud.len(), b.cloud.len());
            for (p, q) in a.cloud.points().iter().zip(b.cloud.points()) {
                for k in 0..3 {
                    assert_eq!(p[k], q[k] as f32 as f64);
                }
            }
        }
        let csv = fs::read_to_string(dir.path().join("poses.csv")).unwrap();
        assert!(csv.starts_with("frame_id,timestamp,x,y,yaw\n0,0,"));
        assert!(dir.path().join("clouds/000005.bin").exists());
    }

    #[test]
    fn generation_is_reproducible() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(12.345678912345), "12.3456789");
        assert_eq!(sig9(-0.000123456789123), "-0.000123456789");
        assert_eq!(sig9(std::f64::consts::PI), "3.14159265");
    }

    #[test]
    fn csv_rejections() {
        assert!(parse_poses_csv("").is_err());
        assert!(parse_poses_csv("a,b\n").is_err());
        let h = "frame_id,timestamp,x,y,yaw\n";
        assert!(parse_poses_csv(&format!("{h}0,0,1,2\n")).is_err());
        assert!(parse_poses_csv(&format!("{h}0,0,1,2,x\n")).is_err());
        assert!(parse_poses_csv(&format!("{h}1,0,1,2,0\n0,0,1,2,0\n")).is_err());
        assert!(parse_poses_csv(&format!("{h}0,0,NaN,2,0\n")).is_err());
        let ok = parse_poses_csv(&format!("{h}0,0,1,2,0.5\r\n3,0.3,1,2,4\n")).unwrap();
        assert_eq!(ok.len(), 2);
        assert!((ok[1].pose.yaw() - (4.0 - std::f64::consts::TAU)).abs() < 1e-12);
    }

    #[test]
    fn cloud_rejections() {
        assert!(parse_cloud_bin(&[0u8; 13]).is_err());
        let mut nan = Vec::new();
        for v in [1.0f32, f32::NAN, 0.0] {
            nan.extend_from_slice(&v.to_le_bytes());
        }
        assert!(parse_cloud_bin(&nan).is_err());
        assert!(parse_cloud_bin(&[]).unwrap().is_empty());
    }

    #[test]
    fn world_file_rejections() {
        let w = generate_world(1, &WorldParams::default()).unwrap();
        let text = WorldFile::to_json(&w);
        assert_eq!(WorldFile::parse(&text).unwrap(), w);
        assert!(WorldFile::parse(&text.replace("\"format_version\": 1", "\"format_version\": 9")).is_err());
        assert!(WorldFile::parse("{").is_err());
        let mut moved = w.clone();
        moved.obstacles[0].vertices[0] = [1e6, 0.0];
        assert!(WorldFile::parse(&WorldFile::to_json(&moved)).is_err());
    }
}
