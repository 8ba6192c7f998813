use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binary, check_version, read_json, write_json, CameraRecord, DescriptorStorage, SidecarRef};
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, Pose, Vec2};
use crate::map::{CameraId, DescriptorMatrix};
use crate::matching::QueryFrame;

/// Query images with their precomputed descriptors and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub cameras: BTreeMap<CameraId, PinholeCamera>,
    pub global_dim: usize,
    pub local_dim: usize,
    pub queries: Vec<QueryFrame>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryDocument {
    version: u32,
    cameras: Vec<CameraRecord>,
    global_descriptor_dim: usize,
    local_descriptor_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptor_sidecar: Option<SidecarRef>,
    queries: Vec<QueryRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    id: u64,
    camera_id: CameraId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q_wxyz: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    t_xyz: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    global_descriptor: Vec<f32>,
    keypoints: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    local_descriptors: Vec<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    true_place: Option<u32>,
}

pub fn save_queries(set: &QuerySet, path: &Path) -> Result<()> {
    save_queries_with(set, path, DescriptorStorage::Sidecar)
}

pub fn save_queries_with(set: &QuerySet, path: &Path, storage: DescriptorStorage) -> Result<()> {
    let inline = storage == DescriptorStorage::Inline;
    let sidecar = (!inline).then(|| SidecarRef::for_document(path));
    let queries = set
        .queries
        .iter()
        .map(|q| QueryRecord {
            id: q.id,
            camera_id: q.camera_id,
            q_wxyz: q.ground_truth.map(|p| p.wxyz()),
            t_xyz: q.ground_truth.map(|p| p.t_xyz()),
            global_descriptor: if inline {
                q.global_descriptor.clone()
            } else {
                Vec::new()
            },
            keypoints: q.keypoints.iter().map(|p| [p.x, p.y]).collect(),
            local_descriptors: if inline {
                q.local_descriptors.rows().map(<[f32]>::to_vec).collect()
            } else {
                Vec::new()
            },
            true_place: q.true_place,
        })
        .collect();
    let doc = QueryDocument {
        version: super::DOCUMENT_VERSION,
        cameras: set
            .cameras
            .iter()
            .map(|(&id, c)| CameraRecord::from_camera(id, c))
            .collect(),
        global_descriptor_dim: set.global_dim,
        local_descriptor_dim: set.local_dim,
        descriptor_sidecar: sidecar.clone(),
        queries,
    };
    if let Some(sidecar) = &sidecar {
        let (global_path, local_path) = sidecar.resolve(path);
        let global: Vec<f32> = set
            .queries
            .iter()
            .flat_map(|q| q.global_descriptor.iter().copied())
            .collect();
        binary::write_f32_matrix(&global_path, set.global_dim, &global)?;
        let local: Vec<f32> = set
            .queries
            .iter()
            .flat_map(|q| q.local_descriptors.as_slice().iter().copied())
            .collect();
        binary::write_f32_matrix(&local_path, set.local_dim, &local)?;
    }
    write_json(path, &doc)
}

pub fn load_queries(path: &Path) -> Result<QuerySet> {
    let doc: QueryDocument = read_json(path)?;
    check_version(path, doc.version)?;
    let global_dim = doc.global_descriptor_dim;
    let local_dim = doc.local_descriptor_dim;

    let mut cameras = BTreeMap::new();
    for c in &doc.cameras {
        let camera = c.to_camera();
        camera
            .validate()
            .map_err(|e| Error::schema(format!("camera {}", c.id), e.to_string()))?;
        if cameras.insert(c.id, camera).is_some() {
            return Err(Error::DuplicateId {
                context: "cameras".into(),
                id: c.id as u64,
            });
        }
    }

    let sidecar = match &doc.descriptor_sidecar {
        Some(s) => {
            let (global_path, local_path) = s.resolve(path);
            let (gd, gc, global) = binary::read_f32_matrix(&global_path)?;
            let (ld, lc, local) = binary::read_f32_matrix(&local_path)?;
            let keypoints: usize = doc.queries.iter().map(|q| q.keypoints.len()).sum();
            if gd != global_dim || ld != local_dim {
                return Err(Error::DimensionMismatch {
                    context: "query descriptor sidecar".into(),
                    expected: if gd != global_dim { global_dim } else { local_dim },
                    actual: if gd != global_dim { gd } else { ld },
                });
            }
            if gc != doc.queries.len() || lc != keypoints {
                return Err(Error::schema(
                    path.display().to_string(),
                    "sidecar row counts do not match the document",
                ));
            }
            Some((global, local))
        }
        None => None,
    };

    let mut local_offset = 0;
    let mut queries = Vec::with_capacity(doc.queries.len());
    for (qi, rec) in doc.queries.into_iter().enumerate() {
        let entity = format!("query {}", rec.id);
        let camera = *cameras.get(&rec.camera_id).ok_or_else(|| Error::DanglingReference {
            entity: entity.clone(),
            target: format!("camera {}", rec.camera_id),
        })?;
        let ground_truth = match (rec.q_wxyz, rec.t_xyz) {
            (Some(q), Some(t)) => Some(
                Pose::from_wxyz(q, t).map_err(|e| Error::schema(entity.clone(), e.to_string()))?,
            ),
            (None, None) => None,
            _ => return Err(Error::schema(entity, "q_wxyz and t_xyz must come together")),
        };
        let n = rec.keypoints.len();
        let (global_descriptor, local_descriptors) = match &sidecar {
            Some((global, local)) => {
                let g = global[qi * global_dim..(qi + 1) * global_dim].to_vec();
                let end = local_offset + n * local_dim;
                let l = DescriptorMatrix::new(local_dim, local[local_offset..end].to_vec())?;
                local_offset = end;
                (g, l)
            }
            None => (
                rec.global_descriptor,
                DescriptorMatrix::from_rows(local_dim, &rec.local_descriptors).map_err(|_| {
                    Error::DimensionMismatch {
                        context: format!("{entity} local descriptors"),
                        expected: local_dim,
                        actual: rec
                            .local_descriptors
                            .iter()
                            .map(Vec::len)
                            .find(|&l| l != local_dim)
                            .unwrap_or(0),
                    }
                })?,
            ),
        };
        let query = QueryFrame {
            id: rec.id,
            camera_id: rec.camera_id,
            camera,
            keypoints: rec.keypoints.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
            local_descriptors,
            global_descriptor,
            ground_truth,
            true_place: rec.true_place,
        };
        query.validate(global_dim, local_dim)?;
        queries.push(query);
    }
    Ok(QuerySet {
        cameras,
        global_dim,
        local_dim,
        queries,
    })
}
