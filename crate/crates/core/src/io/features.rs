//! Binary keypoint feature files.
//!
//! Layout, all little-endian: the 6-byte magic `GMLDF1`, `u32` keypoint
//! count `n`, `u32` descriptor dimension `d`, then `f32` sections for
//! keypoints (`3n`), descriptors (`dn`), covariances (`9n`, row major) and
//! normals (`3n`).

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::descriptor::{FeatureCloud, Features};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"GMLDF1";

pub fn encode_features(f: &FeatureCloud) -> Vec<u8> {
    let (n, d) = (f.len(), f.descriptor_dim());
    let mut out = Vec::with_capacity(14 + 4 * n * (15 + d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    f.keypoints.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).for_each(&mut put);
    f.descriptors.as_slice().iter().copied().for_each(&mut put);
    for c in &f.covariances {
        for r in 0..3 {
            for k in 0..3 {
                put(c[(r, k)]);
            }
        }
    }
    f.normals.iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).for_each(&mut put);
    out
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureCloud, String> {
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err("missing GMLDF1 magic".into());
    }
    let n = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(15 + d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(14))
        .ok_or("feature counts overflow")?;
    if bytes.len() != expected {
        return Err(format!("{n} keypoints of dimension {d} need {expected} bytes, file has {}", bytes.len()));
    }
    let mut values = bytes[14..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    if let Some(bad) = bytes[14..].chunks_exact(4).position(|c| !f32::from_le_bytes(c.try_into().unwrap()).is_finite()) {
        return Err(format!("non-finite value at float {bad}"));
    }
    let vec3 = |it: &mut dyn Iterator<Item = f64>| Vector3::new(it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let keypoints: Vec<_> = (0..n).map(|_| vec3(&mut values)).collect();
    let desc: Vec<f64> = values.by_ref().take(n * d).collect();
    let covariances: Vec<_> = (0..n).map(|_| Matrix3::from_row_iterator(values.by_ref().take(9))).collect();
    let normals: Vec<_> = (0..n).map(|_| vec3(&mut values)).collect();
    let descriptors = Features::from_flat(d, desc).map_err(|e| e.to_string())?;
    FeatureCloud::new(keypoints, descriptors, covariances, normals).map_err(|e| e.to_string())
}

pub fn read_features(path: &Path) -> Result<FeatureCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn write_features(path: &Path, f: &FeatureCloud) -> Result<()> {
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureCloud {
        let kp = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(-0.5, 0.25, 8.0)];
        let desc = Features::from_rows(2, &[[0.5, 0.75], [1.0, 0.0]]).unwrap();
        let cov = vec![Matrix3::new(1.0, 0.125, 0.25, 0.125, 2.0, 0.375, 0.25, 0.375, 3.0), Matrix3::identity()];
        let normals = vec![Vector3::z(), Vector3::x()];
        FeatureCloud::new(kp, desc, cov, normals).unwrap()
    }

    #[test]
    fn round_trip() {
        let f = sample();
        let bytes = encode_features(&f);
        assert_eq!(&bytes[..6], b"GMLDF1");
        assert_eq!(bytes.len(), 14 + 4 * 2 * (15 + 2));
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(encode_features(&back), bytes);
    }

    #[test]
    fn rejects_bad_input() {
        let bytes = encode_features(&sample());
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_features(b"GMLDF2aaaaaaaa").is_err());
        let mut nan = bytes.clone();
        nan[14..18].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_features(&nan).is_err());
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.gmldf");
        assert!(matches!(read_features(&missing), Err(Error::Io { .. })));
    }
}
