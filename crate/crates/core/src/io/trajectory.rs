//! Trajectory text files: `timestamp tx ty tz qx qy qz qw map_id`, one
//! localized frame per line, camera-to-world, `#` comments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::IoError;
use crate::camera::SE3Pose;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// Camera-to-world.
    pub pose_wc: SE3Pose,
    pub map_id: u32,
}

impl TrajectoryEntry {
    pub fn center(&self) -> Vector3<f64> {
        self.pose_wc.translation
    }
}

pub fn write_trajectory<W: Write>(w: &mut W, entries: &[TrajectoryEntry]) -> Result<(), IoError> {
    writeln!(w, "# timestamp tx ty tz qx qy qz qw map_id")?;
    for e in entries {
        let mut q = *e.pose_wc.rotation.quaternion();
        if q.w < 0.0 {
            q = -q;
        }
        let t = e.pose_wc.translation;
        writeln!(
            w,
            "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {}",
            e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w, e.map_id
        )?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(r: R) -> Result<Vec<TrajectoryEntry>, IoError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let l = line.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 8 && toks.len() != 9 {
            return Err(IoError::Parse { line: i + 1, msg: format!("expected 8 or 9 fields, found {}", toks.len()) });
        }
        let mut v = [0.0; 8];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = toks[k]
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| IoError::Parse { line: i + 1, msg: format!("bad number '{}'", toks[k]) })?;
        }
        let map_id = match toks.get(8) {
            Some(t) => t.parse().map_err(|_| IoError::Parse { line: i + 1, msg: format!("bad map id '{t}'") })?,
            None => 0,
        };
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-9 {
            return Err(IoError::Parse { line: i + 1, msg: "zero quaternion".into() });
        }
        out.push(TrajectoryEntry {
            timestamp: v[0],
            pose_wc: SE3Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3])),
            map_id,
        });
    }
    Ok(out)
}

pub fn write_trajectory_file(path: &Path, entries: &[TrajectoryEntry]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trajectory(&mut w, entries)?;
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_file(path: &Path) -> Result<Vec<TrajectoryEntry>, IoError> {
    read_trajectory(BufReader::new(File::open(path)?))
}
