//! Flat `key = value` configuration text. Consumers take the keys they
//! know; whatever is left over is reported as unknown.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use super::IoError;
use crate::camera::FisheyeCamera;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigValue {
    pub line: usize,
    pub value: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, ConfigValue>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(IoError::Parse { line: i + 1, msg: "expected 'key = value'".into() });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(IoError::Parse { line: i + 1, msg: format!("bad key '{k}'") });
            }
            if entries.insert(k.to_string(), ConfigValue { line: i + 1, value: v.to_string() }).is_some() {
                return Err(IoError::Parse { line: i + 1, msg: format!("duplicate key '{k}'") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses `key`, leaving `slot` untouched when absent.
    pub fn take<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), IoError> {
        if let Some(v) = self.entries.remove(key) {
            *slot = v
                .value
                .parse()
                .map_err(|_| IoError::BadValue { key: key.into(), msg: format!("cannot parse '{}'", v.value) })?;
        }
        Ok(())
    }

    /// Like [`ConfigFile::take`] for comma-separated lists.
    pub fn take_list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<(), IoError> {
        if let Some(v) = self.entries.remove(key) {
            let mut out = Vec::new();
            for tok in v.value.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                out.push(tok.parse().map_err(|_| IoError::BadValue { key: key.into(), msg: format!("cannot parse '{tok}'") })?);
            }
            *slot = out;
        }
        Ok(())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<(), IoError> {
        match self.entries.into_iter().next() {
            Some((key, v)) => Err(IoError::UnknownKey { key, line: v.line }),
            None => Ok(()),
        }
    }
}

const CAMERA_KEYS: [&str; 10] =
    ["camera.fx", "camera.fy", "camera.cx", "camera.cy", "camera.k1", "camera.k2", "camera.k3", "camera.k4", "camera.width", "camera.height"];

/// Takes the `camera.*` keys: all ten or none.
pub fn take_camera(file: &mut ConfigFile) -> Result<Option<FisheyeCamera>, IoError> {
    let present = CAMERA_KEYS.iter().filter(|k| file.contains(k)).count();
    if present == 0 {
        return Ok(None);
    }
    if present != CAMERA_KEYS.len() {
        let missing = CAMERA_KEYS.iter().find(|k| !file.contains(k)).unwrap();
        return Err(IoError::BadValue { key: (*missing).into(), msg: "incomplete camera calibration".into() });
    }
    let mut v = [0.0f64; 8];
    for (slot, key) in v.iter_mut().zip(&CAMERA_KEYS[..8]) {
        file.take(key, slot)?;
    }
    let (mut w, mut h) = (0u32, 0u32);
    file.take("camera.width", &mut w)?;
    file.take("camera.height", &mut h)?;
    FisheyeCamera::new(v[0], v[1], v[2], v[3], [v[4], v[5], v[6], v[7]], w, h)
        .map(Some)
        .map_err(|e| IoError::BadValue { key: "camera".into(), msg: e.to_string() })
}
