//! Small hand-built models shared by unit tests across the crate.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use super::BodyModel;

/// Three-bone chain along +Y with one weight-1 vertex per bone and one blended
/// vertex, plus a two-coefficient shape basis.
pub(crate) fn toy_chain() -> BodyModel {
    let bone_names = vec!["root".to_string(), "mid".to_string(), "tip".to_string()];
    let parents = vec![None, Some(0), Some(1)];
    let rest_joints = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 2.0, 0.0),
    ];
    let template_vertices = vec![
        Vector3::new(0.1, 0.5, 0.0),  // on root
        Vector3::new(0.1, 1.5, 0.0),  // on mid
        Vector3::new(0.1, 2.5, 0.0),  // on tip
        Vector3::new(0.0, 1.0, 0.2),  // blended root/mid
    ];
    let lbs_weights = vec![
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0, //
        0.5, 0.5, 0.0,
    ];
    let faces = vec![[0, 1, 2]];
    let shape_basis = vec![
        vec![
            Vector3::new(0.0, 0.05, 0.0),
            Vector3::new(0.0, 0.10, 0.0),
            Vector3::new(0.0, 0.15, 0.0),
            Vector3::new(0.0, 0.10, 0.0),
        ],
        vec![
            Vector3::new(0.02, 0.0, 0.0),
            Vector3::new(0.02, 0.0, 0.01),
            Vector3::new(0.02, 0.0, 0.0),
            Vector3::new(0.00, 0.0, 0.02),
        ],
    ];
    let joint_shape_basis = vec![
        vec![
            Vector3::zeros(),
            Vector3::new(0.0, 0.1, 0.0),
            Vector3::new(0.0, 0.2, 0.0),
        ],
        vec![
            Vector3::zeros(),
            Vector3::new(0.01, 0.0, 0.0),
            Vector3::new(0.02, 0.0, 0.0),
        ],
    ];
    BodyModel::new(
        bone_names,
        parents,
        template_vertices,
        faces,
        rest_joints,
        lbs_weights,
        shape_basis,
        joint_shape_basis,
        BTreeMap::new(),
    )
    .unwrap()
}

/// Three-bone chain where each bone carries a cluster of rigid vertices with a
/// bone-specific spread, so chamfer fitting can tell the bones apart.
pub(crate) fn constellation_chain() -> BodyModel {
    let bone_names = vec!["base".to_string(), "mid".to_string(), "end".to_string()];
    let parents = vec![None, Some(0), Some(1)];
    let rest_joints = vec![
        Vector3::new(0.0, 0.0, 0.0),
        Vector3::new(0.0, 0.4, 0.0),
        Vector3::new(0.0, 0.8, 0.0),
    ];
    // four vertices per bone; the spread differs per bone (0.3 / 0.1 / 0.5)
    let spreads = [0.3, 0.1, 0.5];
    let mut template_vertices = Vec::new();
    let mut lbs_weights = Vec::new();
    for (bone, &spread) in spreads.iter().enumerate() {
        let y = 0.4 * bone as f64 + 0.2;
        template_vertices.push(Vector3::new(spread, y, 0.0));
        template_vertices.push(Vector3::new(-spread, y, 0.0));
        template_vertices.push(Vector3::new(0.0, y, spread));
        template_vertices.push(Vector3::new(0.0, y - spread * 0.5, -spread));
        for _ in 0..4 {
            let mut row = [0.0; 3];
            row[bone] = 1.0;
            lbs_weights.extend_from_slice(&row);
        }
    }
    let faces = vec![[0, 1, 2], [4, 5, 6], [8, 9, 10]];
    BodyModel::new(
        bone_names,
        parents,
        template_vertices,
        faces,
        rest_joints,
        lbs_weights,
        vec![],
        vec![],
        BTreeMap::new(),
    )
    .unwrap()
}
