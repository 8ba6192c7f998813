use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binary, check_version, read_json, write_json, CameraRecord, DescriptorStorage, SidecarRef};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec2, Vec3};
use crate::map::{
    CameraId, DescriptorMatrix, Keyframe, KeyframeId, Landmark, LandmarkId, Observation, VisualMap,
};

#[derive(Debug, Serialize, Deserialize)]
struct MapDocument {
    version: u32,
    cameras: Vec<CameraRecord>,
    global_descriptor_dim: usize,
    local_descriptor_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptor_sidecar: Option<SidecarRef>,
    keyframes: Vec<KeyframeRecord>,
    landmarks: Vec<LandmarkRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct KeyframeRecord {
    id: u64,
    camera_id: CameraId,
    q_wxyz: [f64; 4],
    t_xyz: [f64; 3],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    global_descriptor: Vec<f32>,
    keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    local_descriptors: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRecord {
    id: u64,
    p_xyz: [f64; 3],
    observations: Vec<(u64, usize)>,
}

/// Writes a map with descriptors in binary sidecars.
pub fn save_map(map: &VisualMap, path: &Path) -> Result<()> {
    save_map_with(map, path, DescriptorStorage::Sidecar)
}

pub fn save_map_with(map: &VisualMap, path: &Path, storage: DescriptorStorage) -> Result<()> {
    let inline = storage == DescriptorStorage::Inline;
    let sidecar = (!inline).then(|| SidecarRef::for_document(path));

    let keyframes = map
        .keyframes()
        .iter()
        .map(|kf| KeyframeRecord {
            id: kf.id.0,
            camera_id: kf.camera_id,
            q_wxyz: kf.pose.wxyz(),
            t_xyz: kf.pose.t_xyz(),
            global_descriptor: if inline {
                kf.global_descriptor.clone()
            } else {
                Vec::new()
            },
            keypoints: kf.keypoints.iter().map(|p| [p.x, p.y]).collect(),
            local_descriptors: if inline {
                kf.local_descriptors.rows().map(<[f32]>::to_vec).collect()
            } else {
                Vec::new()
            },
        })
        .collect();
    let landmarks = map
        .landmarks()
        .iter()
        .map(|lm| LandmarkRecord {
            id: lm.id.0,
            p_xyz: [lm.position.x, lm.position.y, lm.position.z],
            observations: lm
                .observations
                .iter()
                .map(|o| (o.keyframe.0, o.keypoint))
                .collect(),
        })
        .collect();
    let doc = MapDocument {
        version: super::DOCUMENT_VERSION,
        cameras: map
            .cameras()
            .iter()
            .map(|(&id, c)| CameraRecord::from_camera(id, c))
            .collect(),
        global_descriptor_dim: map.global_dim(),
        local_descriptor_dim: map.local_dim(),
        descriptor_sidecar: sidecar.clone(),
        keyframes,
        landmarks,
    };

    if let Some(sidecar) = &sidecar {
        let (global_path, local_path) = sidecar.resolve(path);
        let global: Vec<f32> = map
            .keyframes()
            .iter()
            .flat_map(|kf| kf.global_descriptor.iter().copied())
            .collect();
        binary::write_f32_matrix(&global_path, map.global_dim(), &global)?;
        let local: Vec<f32> = map
            .keyframes()
            .iter()
            .flat_map(|kf| kf.local_descriptors.as_slice().iter().copied())
            .collect();
        binary::write_f32_matrix(&local_path, map.local_dim(), &local)?;
    }
    write_json(path, &doc)
}

/// Reads and validates a map file.
pub fn load_map(path: &Path) -> Result<VisualMap> {
    let doc: MapDocument = read_json(path)?;
    check_version(path, doc.version)?;
    let global_dim = doc.global_descriptor_dim;
    let local_dim = doc.local_descriptor_dim;

    let mut cameras = BTreeMap::new();
    for c in &doc.cameras {
        if cameras.insert(c.id, c.to_camera()).is_some() {
            return Err(Error::DuplicateId {
                context: "cameras".into(),
                id: c.id as u64,
            });
        }
    }

    let sidecar = match &doc.descriptor_sidecar {
        Some(s) => Some(read_sidecars(path, s, &doc, global_dim, local_dim)?),
        None => None,
    };
    let mut global_rows = sidecar.as_ref().map(|(g, _)| g.chunks_exact(global_dim.max(1)));
    let mut local_offset = 0usize;

    let mut keyframes = Vec::with_capacity(doc.keyframes.len());
    for rec in doc.keyframes {
        let entity = format!("keyframe {}", rec.id);
        let pose = Pose::from_wxyz(rec.q_wxyz, rec.t_xyz)
            .map_err(|e| Error::schema(entity.clone(), e.to_string()))?;
        let n = rec.keypoints.len();
        let (global_descriptor, local_descriptors) = match (&sidecar, &mut global_rows) {
            (Some((_, local)), Some(rows)) => {
                let g = rows.next().map(<[f32]>::to_vec).unwrap_or_default();
                let end = local_offset + n * local_dim;
                let l = DescriptorMatrix::new(local_dim, local[local_offset..end].to_vec())?;
                local_offset = end;
                (g, l)
            }
            _ => {
                let mut l = DescriptorMatrix::with_dim(local_dim);
                for (i, row) in rec.local_descriptors.iter().enumerate() {
                    l.push(row).map_err(|_| Error::DimensionMismatch {
                        context: format!("{entity} local descriptor {i}"),
                        expected: local_dim,
                        actual: row.len(),
                    })?;
                }
                (rec.global_descriptor, l)
            }
        };
        keyframes.push(Keyframe {
            id: KeyframeId(rec.id),
            camera_id: rec.camera_id,
            pose,
            global_descriptor,
            keypoints: rec.keypoints.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            local_descriptors,
        });
    }

    let landmarks = doc
        .landmarks
        .into_iter()
        .map(|rec| Landmark {
            id: LandmarkId(rec.id),
            position: Vec3::from(rec.p_xyz),
            observations: rec
                .observations
                .into_iter()
                .map(|(k, p)| Observation {
                    keyframe: KeyframeId(k),
                    keypoint: p,
                })
                .collect(),
        })
        .collect();

    VisualMap::new(cameras, global_dim, local_dim, keyframes, landmarks)
}

fn read_sidecars(
    path: &Path,
    sidecar: &SidecarRef,
    doc: &MapDocument,
    global_dim: usize,
    local_dim: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let (global_path, local_path) = sidecar.resolve(path);
    let (gd, gc, global) = binary::read_f32_matrix(&global_path)?;
    let (ld, lc, local) = binary::read_f32_matrix(&local_path)?;
    if gd != global_dim {
        return Err(Error::DimensionMismatch {
            context: "global descriptor sidecar".into(),
            expected: global_dim,
            actual: gd,
        });
    }
    if ld != local_dim {
        return Err(Error::DimensionMismatch {
            context: "local descriptor sidecar".into(),
            expected: local_dim,
            actual: ld,
        });
    }
    let keypoints: usize = doc.keyframes.iter().map(|k| k.keypoints.len()).sum();
    if gc != doc.keyframes.len() || lc != keypoints {
        return Err(Error::schema(
            path.display().to_string(),
            format!(
                "sidecars hold {gc} global / {lc} local rows, document needs {} / {keypoints}",
                doc.keyframes.len()
            ),
        ));
    }
    Ok((global, local))
}
