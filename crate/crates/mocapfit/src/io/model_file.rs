//! Body-model container: JSON with base64 little-endian array blobs, so a
//! write-then-read round trip reproduces every array bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{check_version, read_json, write_json, FORMAT_VERSION};
use crate::body_model::BodyModel;
use crate::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: String,
    bone_names: Vec<String>,
    /// Parent index per bone, `null` for the root.
    parents: Vec<Option<usize>>,
    part_table: BTreeMap<String, Vec<String>>,
    vertex_count: usize,
    face_count: usize,
    bone_count: usize,
    shape_count: usize,
    /// f64 little-endian, V x 3
    template_vertices: String,
    /// u32 little-endian, F x 3
    faces: String,
    /// f64 little-endian, B x 3
    rest_joints: String,
    /// f64 little-endian, V x B
    lbs_weights: String,
    /// f64 little-endian, S x V x 3
    shape_basis: String,
    /// f64 little-endian, S x B x 3
    joint_shape_basis: String,
}

fn encode_f64(values: impl Iterator<Item = f64>) -> String {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn encode_vectors(vectors: &[Vector3<f64>]) -> String {
    encode_f64(vectors.iter().flat_map(|v| [v.x, v.y, v.z]))
}

fn decode_f64(data: &str, expected: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| Error::Parse {
            locus: what.to_string(),
            message: e.to_string(),
        })?;
    if bytes.len() != expected * 8 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {} bytes for {expected} f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn decode_vectors(data: &str, count: usize, what: &str) -> Result<Vec<Vector3<f64>>> {
    let flat = decode_f64(data, count * 3, what)?;
    Ok(flat
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect())
}

pub fn write_model_file(path: &Path, model: &BodyModel) -> Result<()> {
    let v = model.vertex_count();
    let b = model.bone_count();
    let s = model.shape_count();
    let faces_bytes: Vec<u8> = model
        .faces
        .iter()
        .flat_map(|f| f.iter().flat_map(|i| i.to_le_bytes()))
        .collect();
    let file = ModelFile {
        format_version: FORMAT_VERSION.to_string(),
        bone_names: model.bone_names.clone(),
        parents: model.parents.clone(),
        part_table: model.part_table.clone(),
        vertex_count: v,
        face_count: model.faces.len(),
        bone_count: b,
        shape_count: s,
        template_vertices: encode_vectors(&model.template_vertices),
        faces: B64.encode(faces_bytes),
        rest_joints: encode_vectors(&model.rest_joints),
        lbs_weights: encode_f64(model.lbs_weights.iter().copied()),
        shape_basis: encode_f64(
            model
                .shape_basis
                .iter()
                .flat_map(|m| m.iter().flat_map(|v| [v.x, v.y, v.z])),
        ),
        joint_shape_basis: encode_f64(
            model
                .joint_shape_basis
                .iter()
                .flat_map(|m| m.iter().flat_map(|v| [v.x, v.y, v.z])),
        ),
    };
    write_json(path, &file)
}

pub fn read_model_file(path: &Path) -> Result<BodyModel> {
    let file: ModelFile = read_json(path)?;
    check_version(&file.format_version)?;
    let (v, b, s) = (file.vertex_count, file.bone_count, file.shape_count);
    if file.bone_names.len() != b || file.parents.len() != b {
        return Err(Error::ShapeMismatch("bone arrays do not match bone_count".into()));
    }
    let template_vertices = decode_vectors(&file.template_vertices, v, "template_vertices")?;
    let rest_joints = decode_vectors(&file.rest_joints, b, "rest_joints")?;
    let lbs_weights = decode_f64(&file.lbs_weights, v * b, "lbs_weights")?;
    let face_bytes = B64.decode(&file.faces).map_err(|e| Error::Parse {
        locus: "faces".into(),
        message: e.to_string(),
    })?;
    if face_bytes.len() != file.face_count * 12 {
        return Err(Error::ShapeMismatch("face blob size mismatch".into()));
    }
    let faces: Vec<[u32; 3]> = face_bytes
        .chunks_exact(12)
        .map(|c| {
            [
                u32::from_le_bytes(c[0..4].try_into().unwrap()),
                u32::from_le_bytes(c[4..8].try_into().unwrap()),
                u32::from_le_bytes(c[8..12].try_into().unwrap()),
            ]
        })
        .collect();
    let shape_flat = decode_vectors(&file.shape_basis, s * v, "shape_basis")?;
    let shape_basis: Vec<Vec<Vector3<f64>>> = shape_flat.chunks_exact(v.max(1)).map(|c| c.to_vec()).collect();
    let joint_flat = decode_vectors(&file.joint_shape_basis, s * b, "joint_shape_basis")?;
    let joint_shape_basis: Vec<Vec<Vector3<f64>>> =
        joint_flat.chunks_exact(b).map(|c| c.to_vec()).collect();
    BodyModel::new(
        file.bone_names,
        file.parents,
        template_vertices,
        faces,
        rest_joints,
        lbs_weights,
        shape_basis,
        joint_shape_basis,
        file.part_table,
    )
}
