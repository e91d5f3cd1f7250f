//! On-disk formats: ASCII PLY clouds, the dataset directory with its
//! content hash, the category bundle and correspondence CSV files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use socs::category::{InstanceRecord, LabelSpace};
use socs::error::{Error, Result};
use socs::geom::Point3;
use socs::posefit::CorrespondenceSet;
use socs::synth::{build_dataset, Dataset, DatasetConfig, Split};
use socs::tps::TpsWarpJson;

pub fn ply_bytes(points: &[Point3]) -> Vec<u8> {
    let mut s = String::with_capacity(32 * points.len() + 128);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s.into_bytes()
}

#[cfg(test)]
pub fn parse_ply(text: &str) -> Result<Vec<Point3>> {
    let bad = |m: &str| Error::Format(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err(bad("missing magic"));
    }
    let mut count = None;
    for line in lines.by_ref() {
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>().map_err(|_| bad("bad vertex count"))?);
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(bad("only ascii 1.0 is supported"));
        }
    }
    let count = count.ok_or_else(|| bad("no vertex element"))?;
    let pts = lines
        .take(count)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().take(3).map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
            if v.len() < 3 {
                return Err(bad("vertex with fewer than 3 coordinates"));
            }
            Ok(Point3::new(v[0], v[1], v[2]))
        })
        .collect::<Result<Vec<_>>>()?;
    if pts.len() != count {
        return Err(bad("truncated vertex list"));
    }
    Ok(pts)
}

#[cfg(test)]
pub fn read_ply(path: &Path) -> Result<socs::geom::PointCloud> {
    Ok(socs::geom::PointCloud::new(parse_ply(&std::fs::read_to_string(path)?)?, socs::geom::Frame::Camera))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub instance_id: usize,
    pub split: Split,
    pub view_seed: u64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub scale: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEntry {
    pub index: usize,
    pub split: Split,
    pub seed: u64,
    pub params: Vec<(String, f64)>,
    pub diagonal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub category: String,
    pub category_diagonal: f64,
    pub variation_degree: f64,
    pub instances: Vec<InstanceEntry>,
    pub samples: Vec<String>,
    /// SHA-256 over every other file in the directory (sorted by path).
    pub hash: String,
}

const MANIFEST: &str = "manifest.json";

/// Every file of the dataset directory except the manifest, sorted by path.
pub fn dataset_files(ds: &Dataset) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = vec![
        (PathBuf::from("template/shape.ply"), ply_bytes(&ds.template.mean_shape.points)),
        (PathBuf::from("template/keypoints.ply"), ply_bytes(&ds.template.template_keypoints.keypoints)),
    ];
    for (i, (_, g)) in ds.instances.iter().enumerate() {
        files.push((PathBuf::from(format!("instances/{i:04}/shape.ply")), ply_bytes(&g.shape.points)));
        files.push((PathBuf::from(format!("instances/{i:04}/keypoints.ply")), ply_bytes(&g.keypoints.keypoints)));
    }
    for s in &ds.samples {
        let dir = format!("samples/{:05}", s.id);
        let r = &s.pose.rigid;
        let pose = PoseJson {
            instance_id: s.instance,
            split: s.split,
            view_seed: s.view_seed,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r.rotation[(i, j)])),
            translation: r.translation.into(),
            scale: s.pose.scale.into(),
        };
        files.push((PathBuf::from(format!("{dir}/cloud.ply")), ply_bytes(&s.cloud.points)));
        files.push((PathBuf::from(format!("{dir}/pose.json")), serde_json::to_vec_pretty(&pose)?));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

pub fn content_hash(files: &[(PathBuf, Vec<u8>)]) -> String {
    let mut h = Sha256::new();
    for (p, bytes) in files {
        h.update(p.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

pub fn manifest(ds: &Dataset, files: &[(PathBuf, Vec<u8>)], variation_degree: f64) -> Manifest {
    let n_train = ds.config.train_instances;
    Manifest {
        format_version: 1,
        config: ds.config.clone(),
        category: ds.template.name.clone(),
        category_diagonal: ds.template.category_diagonal,
        variation_degree,
        instances: ds
            .instances
            .iter()
            .enumerate()
            .map(|(i, (p, g))| InstanceEntry {
                index: i,
                split: if i < n_train { Split::Train } else { Split::Test },
                seed: p.seed,
                params: p.family.param_specs().iter().zip(&p.values).map(|(spec, v)| (spec.0.to_string(), *v)).collect(),
                diagonal: g.diagonal,
            })
            .collect(),
        samples: ds.samples.iter().map(|s| format!("samples/{:05}", s.id)).collect(),
        hash: content_hash(files),
    }
}

pub fn write_dataset(ds: &Dataset, dir: &Path, variation_degree: f64) -> Result<Manifest> {
    let files = dataset_files(ds)?;
    for (rel, bytes) in &files {
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, bytes)?;
    }
    let m = manifest(ds, &files, variation_degree);
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&m)?)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Regenerates the dataset described by the manifest and checks that both
/// the regenerated content and the files on disk match the recorded hash.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let ds = build_dataset(&m.config)?;
    let files = dataset_files(&ds)?;
    if content_hash(&files) != m.hash {
        return Err(Error::Format("regenerated dataset does not match the manifest hash".into()));
    }
    let on_disk = files
        .iter()
        .map(|(rel, _)| Ok((rel.clone(), std::fs::read(dir.join(rel))?)))
        .collect::<Result<Vec<_>>>()?;
    if content_hash(&on_disk) != m.hash {
        return Err(Error::Format(format!("files under {} were modified", dir.display())));
    }
    Ok(ds)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleWarp {
    pub instance: usize,
    pub residual: f64,
    pub warp: TpsWarpJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryBundle {
    pub category: String,
    pub label_space: LabelSpace,
    pub category_diagonal: f64,
    pub template_keypoints: Vec<[f64; 3]>,
    pub warps: Vec<BundleWarp>,
}

pub fn bundle(ds: &Dataset, space: LabelSpace, records: &[InstanceRecord]) -> CategoryBundle {
    CategoryBundle {
        category: ds.template.name.clone(),
        label_space: space,
        category_diagonal: ds.template.category_diagonal,
        template_keypoints: ds.template.template_keypoints.keypoints.iter().map(|p| [p.x, p.y, p.z]).collect(),
        warps: records
            .iter()
            .enumerate()
            .map(|(i, r)| BundleWarp { instance: i, residual: r.warp_residual(&ds.template), warp: r.warp.to_json() })
            .collect(),
    }
}

/// Correspondences either as a JSON object
/// `{"socs": [[x, y, z], ...], "camera": [...], "confidence": [...]}` or as
/// CSV rows `sx,sy,sz,cx,cy,cz[,confidence]`, where a header line starting
/// with a letter is skipped.
pub fn parse_correspondences(text: &str) -> Result<CorrespondenceSet> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| Error::Format(format!("correspondence JSON: {e}")));
    }
    let mut socs = Vec::new();
    let mut cam = Vec::new();
    let mut conf = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with(|c: char| c.is_ascii_alphabetic())) {
            continue;
        }
        let v: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: not a number", n + 1)))?;
        if v.len() != 6 && v.len() != 7 {
            return Err(Error::Format(format!("line {}: expected 6 or 7 columns, got {}", n + 1, v.len())));
        }
        socs.push(Point3::new(v[0], v[1], v[2]));
        cam.push(Point3::new(v[3], v[4], v[5]));
        if let Some(c) = v.get(6) {
            conf.push(*c);
        }
    }
    if !conf.is_empty() && conf.len() != socs.len() {
        return Err(Error::Format("confidence given on some rows only".into()));
    }
    let set = CorrespondenceSet::new(socs, cam);
    Ok(if conf.is_empty() { set } else { set.with_confidence(conf) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ply_roundtrip_is_exact() {
        let pts = vec![Point3::new(0.1, -2.5e-7, 3.0), Point3::new(1.0 / 3.0, f64::MIN_POSITIVE, -0.0)];
        let back = parse_ply(std::str::from_utf8(&ply_bytes(&pts)).unwrap()).unwrap();
        assert_eq!(back, pts);
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nend_header\n1 2 3\n").is_err());
    }

    #[test]
    fn correspondence_json() {
        let set = parse_correspondences(r#"{"socs": [[0, 0, 0], [1, 0, 0]], "camera": [[1, 1, 1], [2, 1, 1]]}"#).unwrap();
        assert_eq!(set.camera[1], Point3::new(2.0, 1.0, 1.0));
        assert!(set.confidence.is_none());
        let back = parse_correspondences(&serde_json::to_string(&set.clone().with_confidence(vec![0.5, 1.0])).unwrap()).unwrap();
        assert_eq!(back.confidence, Some(vec![0.5, 1.0]));
        assert!(matches!(parse_correspondences(r#"{"socs": 3}"#), Err(Error::Format(_))));
    }

    #[test]
    fn correspondence_csv() {
        let c = parse_correspondences("sx,sy,sz,cx,cy,cz\n0,0,0,1,1,1\n1,0,0,2,1,1\n").unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.confidence.is_none());
        let c = parse_correspondences("0,0,0,1,1,1,0.5\n").unwrap();
        assert_eq!(c.confidence, Some(vec![0.5]));
        assert!(parse_correspondences("0,0,0,1,1\n").is_err());
        assert!(parse_correspondences("0,0,0,1,1,1,0.5\n0,0,0,1,1,1\n").is_err());
    }

    #[test]
    fn dataset_dir_roundtrip_and_tamper_detection() {
        let cfg = DatasetConfig {
            train_instances: 2,
            test_instances: 1,
            train_views_per_instance: 1,
            test_views_per_instance: 1,
            surface_points: 800,
            input_points: 64,
            resolution: [64, 64],
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&ds, dir.path(), 0.0).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples, ds.samples);
        let cloud = dir.path().join("samples/00000/cloud.ply");
        assert_eq!(read_ply(&cloud).unwrap().points, ds.samples[0].cloud.points);
        std::fs::write(&cloud, b"ply\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }
}
