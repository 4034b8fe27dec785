//! Text feature files, one per frame.
//!
//! ```text
//! #features v1
//! <frame_id> <timestamp> <n_keypoints> <has_gt 0|1>
//! <u> <v> <octave> <intensity> <d0> ... <d127> [<landmark id>]
//! ```
//!
//! Descriptors are renormalized on read.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::Vector2;

use super::FeatureError;
use crate::map::{Descriptor, Frame, KeyPoint, LandmarkTag, DESCRIPTOR_LEN};

pub const FEATURE_FILE_HEADER: &str = "#features v1";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub frame_id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<KeyPoint>,
    pub gt_landmarks: Option<Vec<LandmarkTag>>,
}

impl FeatureRecord {
    pub fn into_frame(self) -> Frame {
        let mut f = Frame::new(self.frame_id, self.timestamp, self.keypoints);
        f.gt_landmarks = self.gt_landmarks;
        f
    }
}

fn push_compact(out: &mut String, v: f64) {
    if v == 0.0 {
        out.push('0');
        return;
    }
    let start = out.len();
    let _ = write!(out, "{v:.6}");
    let trimmed = out[start..].trim_end_matches('0').trim_end_matches('.').len();
    out.truncate(start + trimmed);
}

pub fn write_feature_file<W: Write>(w: &mut W, rec: &FeatureRecord) -> Result<(), FeatureError> {
    if let Some(gt) = &rec.gt_landmarks {
        if gt.len() != rec.keypoints.len() {
            return Err(FeatureError::InvalidInput("landmark id count mismatch".into()));
        }
    }
    let mut out = String::with_capacity(64 + rec.keypoints.len() * 600);
    out.push_str(FEATURE_FILE_HEADER);
    out.push('\n');
    let _ = writeln!(
        out,
        "{} {:.6} {} {}",
        rec.frame_id,
        rec.timestamp,
        rec.keypoints.len(),
        rec.gt_landmarks.is_some() as u8
    );
    for (i, kp) in rec.keypoints.iter().enumerate() {
        let _ = write!(out, "{:.4} {:.4} {} {:.4}", kp.pixel.x, kp.pixel.y, kp.octave, kp.intensity);
        for &d in kp.descriptor.values() {
            out.push(' ');
            push_compact(&mut out, d);
        }
        if let Some(gt) = &rec.gt_landmarks {
            let _ = write!(out, " {}", gt[i]);
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

fn parse<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, FeatureError> {
    let tok = tok.ok_or_else(|| FeatureError::Parse { line, msg: format!("missing {what}") })?;
    tok.parse()
        .map_err(|_| FeatureError::Parse { line, msg: format!("bad {what} '{tok}'") })
}

pub fn read_feature_file<R: BufRead>(r: R) -> Result<FeatureRecord, FeatureError> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String), FeatureError> {
        match lines.next() {
            Some((i, l)) => Ok((i + 1, l?)),
            None => Err(FeatureError::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") }),
        }
    };
    let (ln, header) = next("header")?;
    if header.trim() != FEATURE_FILE_HEADER {
        return Err(FeatureError::Parse { line: ln, msg: format!("expected '{FEATURE_FILE_HEADER}'") });
    }
    let (ln, meta) = next("frame line")?;
    let mut toks = meta.split_whitespace();
    let frame_id: u64 = parse(toks.next(), ln, "frame_id")?;
    let timestamp: f64 = parse(toks.next(), ln, "timestamp")?;
    let n: usize = parse(toks.next(), ln, "keypoint count")?;
    let has_gt: u8 = parse(toks.next(), ln, "gt flag")?;
    if !timestamp.is_finite() {
        return Err(FeatureError::Parse { line: ln, msg: "non-finite timestamp".into() });
    }
    let mut keypoints = Vec::with_capacity(n);
    let mut gt = (has_gt == 1).then(|| Vec::with_capacity(n));
    for _ in 0..n {
        let (ln, l) = next("keypoint line")?;
        let mut toks = l.split_whitespace();
        let u: f64 = parse(toks.next(), ln, "u")?;
        let v: f64 = parse(toks.next(), ln, "v")?;
        let octave: u8 = parse(toks.next(), ln, "octave")?;
        let intensity: f32 = parse(toks.next(), ln, "intensity")?;
        let mut d = [0.0; DESCRIPTOR_LEN];
        for (j, slot) in d.iter_mut().enumerate() {
            *slot = parse(toks.next(), ln, &format!("descriptor component {j}"))?;
        }
        if !(u.is_finite() && v.is_finite() && intensity.is_finite()) {
            return Err(FeatureError::Parse { line: ln, msg: "non-finite value".into() });
        }
        let descriptor = Descriptor::normalized(d)
            .map_err(|e| FeatureError::Parse { line: ln, msg: e.to_string() })?;
        if let Some(g) = gt.as_mut() {
            g.push(parse(toks.next(), ln, "landmark id")?);
        }
        if toks.next().is_some() {
            return Err(FeatureError::Parse { line: ln, msg: "trailing tokens".into() });
        }
        keypoints.push(KeyPoint { pixel: Vector2::new(u, v), octave, descriptor, intensity });
    }
    Ok(FeatureRecord { frame_id, timestamp, keypoints, gt_landmarks: gt })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> FeatureRecord {
        let mut d = [0.0; DESCRIPTOR_LEN];
        d[3] = 0.6;
        d[70] = 0.8;
        FeatureRecord {
            frame_id: 7,
            timestamp: 0.233333,
            keypoints: vec![
                KeyPoint {
                    pixel: Vector2::new(12.5, 300.25),
                    octave: 2,
                    descriptor: Descriptor::new(d).unwrap(),
                    intensity: 0.5,
                },
                KeyPoint {
                    pixel: Vector2::new(1.0, 2.0),
                    octave: 0,
                    descriptor: Descriptor::basis(127),
                    intensity: 1.0,
                },
            ],
            gt_landmarks: Some(vec![42, -1]),
        }
    }

    #[test]
    fn round_trip() {
        let rec = record();
        let mut buf = Vec::new();
        write_feature_file(&mut buf, &rec).unwrap();
        let back = read_feature_file(&buf[..]).unwrap();
        assert_eq!(back.frame_id, 7);
        assert_eq!(back.gt_landmarks, rec.gt_landmarks);
        for (a, b) in back.keypoints.iter().zip(&rec.keypoints) {
            assert_eq!(a.octave, b.octave);
            assert!((a.pixel - b.pixel).norm() < 1e-4);
            assert!(a.descriptor.dot(&b.descriptor) > 1.0 - 1e-9);
        }
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        assert!(read_feature_file(&b"features\n1 0 0 0\n"[..]).is_err());
        let rec = record();
        let mut buf = Vec::new();
        write_feature_file(&mut buf, &rec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        let err = read_feature_file(cut.as_bytes()).unwrap_err();
        assert!(matches!(err, FeatureError::Parse { .. }));
    }
}
