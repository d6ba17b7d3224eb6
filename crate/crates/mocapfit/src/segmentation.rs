//! Rigid-group marker segmentation.
//!
//! Markers riding on the same body part keep near-constant pairwise distances
//! while the body moves, so the standard deviation of each pair's distance
//! across the sequence makes a natural affinity. Agglomerative clustering with
//! average linkage under a millimeter-scale threshold then recovers the rigid
//! groups.

use log::warn;
use nalgebra::Vector3;

use crate::{Error, Result};

/// Default merge threshold for [`cluster_markers`], meters.
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 0.005;

/// Tracked marker positions with a per-frame visibility mask.
///
/// Positions exactly equal to the origin are treated as tracking dropouts and
/// marked invisible at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSequence {
    marker_ids: Vec<String>,
    frame_rate: f64,
    frames: usize,
    positions: Vec<Vector3<f64>>,
    visible: Vec<bool>,
}

impl MarkerSequence {
    pub fn new(
        marker_ids: Vec<String>,
        frame_rate: f64,
        positions: Vec<Vector3<f64>>,
        mut visible: Vec<bool>,
    ) -> Result<Self> {
        let m = marker_ids.len();
        if m == 0 {
            return Err(Error::EmptyInput("marker sequence with zero markers".into()));
        }
        if positions.len() != visible.len() || positions.len() % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "positions ({}) and visibility ({}) must be T x {} arrays",
                positions.len(),
                visible.len(),
                m
            )));
        }
        if !(frame_rate > 0.0) {
            return Err(Error::InvalidParams("frame rate must be positive".into()));
        }
        for (i, (p, vis)) in positions.iter().zip(visible.iter_mut()).enumerate() {
            if *p == Vector3::zeros() {
                *vis = false;
            }
            if *vis && !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::NonFinite(format!("visible marker position at index {i}")));
            }
        }
        let frames = positions.len() / m;
        Ok(Self {
            marker_ids,
            frame_rate,
            frames,
            positions,
            visible,
        })
    }

    pub fn marker_count(&self) -> usize {
        self.marker_ids.len()
    }

    pub fn frame_count(&self) -> usize {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn marker_ids(&self) -> &[String] {
        &self.marker_ids
    }

    pub fn position(&self, frame: usize, marker: usize) -> Vector3<f64> {
        self.positions[frame * self.marker_count() + marker]
    }

    pub fn is_visible(&self, frame: usize, marker: usize) -> bool {
        self.visible[frame * self.marker_count() + marker]
    }

    pub fn visible_in_frame(&self, frame: usize) -> impl Iterator<Item = (usize, Vector3<f64>)> + '_ {
        let m = self.marker_count();
        (0..m).filter_map(move |i| {
            if self.is_visible(frame, i) {
                Some((i, self.position(frame, i)))
            } else {
                None
            }
        })
    }

    pub fn visible_total(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Marker that is visible in at least one frame.
    pub fn ever_visible(&self, marker: usize) -> bool {
        (0..self.frames).any(|t| self.is_visible(t, marker))
    }

    pub fn raw_positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn raw_visibility(&self) -> &[bool] {
        &self.visible
    }

    /// Removes a marker entirely (used by masking-soundness tests).
    pub fn without_marker(&self, marker: usize) -> Self {
        let m = self.marker_count();
        let mut ids = self.marker_ids.clone();
        ids.remove(marker);
        let mut positions = Vec::with_capacity(self.frames * (m - 1));
        let mut visible = Vec::with_capacity(self.frames * (m - 1));
        for t in 0..self.frames {
            for i in 0..m {
                if i != marker {
                    positions.push(self.position(t, i));
                    visible.push(self.is_visible(t, i));
                }
            }
        }
        Self {
            marker_ids: ids,
            frame_rate: self.frame_rate,
            frames: self.frames,
            positions,
            visible,
        }
    }
}

/// Marker-to-cluster assignment with `cluster_count` clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub cluster_count: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Population standard deviation of the distance between every marker pair
/// across frames where both are visible.
///
/// Pairs co-visible in fewer than two frames get `+inf`, which forces the
/// clustering to keep them separated.
pub fn distance_std_affinity(markers: &MarkerSequence) -> Vec<Vec<f64>> {
    let m = markers.marker_count();
    let t = markers.frame_count();
    let mut affinity = vec![vec![0.0; m]; m];
    let mut distances: Vec<f64> = Vec::with_capacity(t);
    for i in 0..m {
        for j in (i + 1)..m {
            distances.clear();
            for frame in 0..t {
                if markers.is_visible(frame, i) && markers.is_visible(frame, j) {
                    distances.push((markers.position(frame, i) - markers.position(frame, j)).norm());
                }
            }
            let std = if distances.len() < 2 {
                warn!(
                    "markers {i} and {j} co-visible in {} frame(s); forcing separation",
                    distances.len()
                );
                f64::INFINITY
            } else {
                let n = distances.len() as f64;
                let mean = distances.iter().sum::<f64>() / n;
                let var = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
                var.max(0.0).sqrt()
            };
            affinity[i][j] = std;
            affinity[j][i] = std;
        }
    }
    affinity
}

/// Bottom-up agglomerative clustering with average linkage.
///
/// Merging continues while the minimum inter-cluster average linkage is at or
/// below `threshold`; ties merge the lowest-index pair first. Cluster labels
/// are ordered by each cluster's smallest member index.
pub fn cluster_markers(affinity: &[Vec<f64>], threshold: f64) -> Result<ClusterAssignment> {
    let m = affinity.len();
    if m == 0 {
        return Err(Error::EmptyInput("affinity matrix is empty".into()));
    }
    for (i, row) in affinity.iter().enumerate() {
        if row.len() != m {
            return Err(Error::ShapeMismatch("affinity matrix must be square".into()));
        }
        for (j, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::InvalidParams("affinity entries must be non-negative".into()));
            }
            if v != affinity[j][i] {
                return Err(Error::InvalidParams("affinity matrix must be symmetric".into()));
            }
        }
    }

    // working linkage matrix updated with the Lance-Williams rule for
    // average linkage; `sizes[i] == 0` marks a dead cluster
    let mut linkage: Vec<Vec<f64>> = affinity.to_vec();
    let mut sizes = vec![1usize; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..m {
            if sizes[a] == 0 {
                continue;
            }
            for b in (a + 1)..m {
                if sizes[b] == 0 {
                    continue;
                }
                let d = linkage[a][b];
                let better = match best {
                    None => true,
                    Some((bd, _, _)) => d < bd,
                };
                if better {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if !(d <= threshold) {
            break;
        }
        // merge b into a
        let (sa, sb) = (sizes[a] as f64, sizes[b] as f64);
        for k in 0..m {
            if sizes[k] == 0 || k == a || k == b {
                continue;
            }
            let merged = (sa * linkage[a][k] + sb * linkage[b][k]) / (sa + sb);
            linkage[a][k] = merged;
            linkage[k][a] = merged;
        }
        sizes[a] += sizes[b];
        sizes[b] = 0;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
    }

    let mut clusters: Vec<Vec<usize>> = members.into_iter().filter(|c| !c.is_empty()).collect();
    for c in &mut clusters {
        c.sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    let mut labels = vec![0usize; m];
    for (idx, cluster) in clusters.iter().enumerate() {
        for &marker in cluster {
            labels[marker] = idx;
        }
    }
    Ok(ClusterAssignment {
        labels,
        cluster_count: clusters.len(),
    })
}
