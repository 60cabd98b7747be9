//! Joint set, bone tree and pose containers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Proximal/distal bone pair of one limb (upper arm + forearm, thigh + shin).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limb {
    pub proximal_bone: usize,
    pub distal_bone: usize,
}

/// Joints spanning the torso plane: `A = left_hip - spine`, `B = right_hip - spine`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaneJoints {
    pub spine: usize,
    pub left_hip: usize,
    pub right_hip: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub joint_names: Vec<String>,
    /// `(parent, child)` joint pairs.
    pub bones: Vec<(usize, usize)>,
    pub limbs: Vec<Limb>,
    pub plane_joints: PlaneJoints,
    pub root_index: usize,
    pub head_index: usize,
    /// Bone whose length normalizes all bone-length ratios.
    pub reference_bone: usize,
}

pub mod h36m {
    //! Index constants for the default 17-joint layout.
    pub const PELVIS: usize = 0;
    pub const RIGHT_HIP: usize = 1;
    pub const RIGHT_KNEE: usize = 2;
    pub const RIGHT_ANKLE: usize = 3;
    pub const LEFT_HIP: usize = 4;
    pub const LEFT_KNEE: usize = 5;
    pub const LEFT_ANKLE: usize = 6;
    pub const SPINE: usize = 7;
    pub const THORAX: usize = 8;
    pub const NECK: usize = 9;
    pub const HEAD: usize = 10;
    pub const LEFT_SHOULDER: usize = 11;
    pub const LEFT_ELBOW: usize = 12;
    pub const LEFT_WRIST: usize = 13;
    pub const RIGHT_SHOULDER: usize = 14;
    pub const RIGHT_ELBOW: usize = 15;
    pub const RIGHT_WRIST: usize = 16;

    pub const NAMES: [&str; 17] = [
        "pelvis",
        "right_hip",
        "right_knee",
        "right_ankle",
        "left_hip",
        "left_knee",
        "left_ankle",
        "spine",
        "thorax",
        "neck",
        "head",
        "left_shoulder",
        "left_elbow",
        "left_wrist",
        "right_shoulder",
        "right_elbow",
        "right_wrist",
    ];
}

impl Default for Topology {
    fn default() -> Self {
        Self::h36m()
    }
}

impl Topology {
    /// The 17-joint Human3.6M layout.
    pub fn h36m() -> Self {
        use h36m::*;
        let bones = vec![
            (PELVIS, RIGHT_HIP),
            (RIGHT_HIP, RIGHT_KNEE),
            (RIGHT_KNEE, RIGHT_ANKLE),
            (PELVIS, LEFT_HIP),
            (LEFT_HIP, LEFT_KNEE),
            (LEFT_KNEE, LEFT_ANKLE),
            (PELVIS, SPINE),
            (SPINE, THORAX),
            (THORAX, NECK),
            (NECK, HEAD),
            (THORAX, LEFT_SHOULDER),
            (LEFT_SHOULDER, LEFT_ELBOW),
            (LEFT_ELBOW, LEFT_WRIST),
            (THORAX, RIGHT_SHOULDER),
            (RIGHT_SHOULDER, RIGHT_ELBOW),
            (RIGHT_ELBOW, RIGHT_WRIST),
        ];
        let limbs = vec![
            Limb { proximal_bone: 11, distal_bone: 12 },
            Limb { proximal_bone: 14, distal_bone: 15 },
            Limb { proximal_bone: 4, distal_bone: 5 },
            Limb { proximal_bone: 1, distal_bone: 2 },
        ];
        Self {
            joint_names: NAMES.iter().map(|s| s.to_string()).collect(),
            bones,
            limbs,
            plane_joints: PlaneJoints { spine: SPINE, left_hip: LEFT_HIP, right_hip: RIGHT_HIP },
            root_index: PELVIS,
            head_index: HEAD,
            reference_bone: 6,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    pub fn joint_name(&self, j: usize) -> &str {
        self.joint_names.get(j).map_or("?", String::as_str)
    }

    /// Checks the structural invariants: index ranges, tree shape, limb adjacency.
    pub fn validate(&self) -> Result<()> {
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::invalid("topology has no joints"));
        }
        let in_range = |i: usize, what: &str| {
            if i < j {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} index {i} out of range for {j} joints")))
            }
        };
        in_range(self.root_index, "root")?;
        in_range(self.head_index, "head")?;
        in_range(self.plane_joints.spine, "spine")?;
        in_range(self.plane_joints.left_hip, "left hip")?;
        in_range(self.plane_joints.right_hip, "right hip")?;
        if self.bones.len() + 1 != j {
            return Err(Error::invalid(format!(
                "a tree over {j} joints needs {} bones, found {}",
                j - 1,
                self.bones.len()
            )));
        }
        let mut parent = vec![None; j];
        for &(p, c) in &self.bones {
            in_range(p, "bone parent")?;
            in_range(c, "bone child")?;
            if c == self.root_index || parent[c].is_some() {
                return Err(Error::invalid(format!("joint {c} has more than one parent")));
            }
            parent[c] = Some(p);
        }
        for start in 0..j {
            let mut cur = start;
            let mut hops = 0;
            while cur != self.root_index {
                cur =
                    parent[cur].ok_or_else(|| Error::invalid(format!("joint {start} is not connected to the root")))?;
                hops += 1;
                if hops > j {
                    return Err(Error::invalid("bone graph contains a cycle"));
                }
            }
        }
        if self.reference_bone >= self.bones.len() {
            return Err(Error::invalid("reference bone out of range"));
        }
        for limb in &self.limbs {
            let (Some(&p), Some(&d)) = (self.bones.get(limb.proximal_bone), self.bones.get(limb.distal_bone)) else {
                return Err(Error::invalid("limb bone out of range"));
            };
            if p.1 != d.0 {
                return Err(Error::invalid(format!(
                    "limb bones {} and {} do not meet at a joint",
                    limb.proximal_bone, limb.distal_bone
                )));
            }
        }
        Ok(())
    }

    /// Joint indices ordered so every parent precedes its children.
    pub fn kinematic_order(&self) -> Vec<usize> {
        let mut order = vec![self.root_index];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend(self.bones.iter().filter(|b| b.0 == p).map(|b| b.1));
            i += 1;
        }
        order
    }

    /// Stable content hash of the topology, used to tag checkpoints.
    pub fn content_hash(&self) -> String {
        crate::checkpoint::content_hash(&serde_json::to_vec(self).expect("topology serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let topo: Topology = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        topo.validate()?;
        Ok(topo)
    }
}

macro_rules! pose_type {
    ($name:ident, $dim:expr, $doc:expr) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub const DIM: usize = $dim;

            pub fn new(coords: Vec<f64>) -> Result<Self> {
                if coords.len() % $dim != 0 || coords.is_empty() {
                    return Err(Error::invalid(format!(
                        "pose length {} is not a positive multiple of {}",
                        coords.len(),
                        $dim
                    )));
                }
                if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("non-finite coordinate at index {i}")));
                }
                Ok(Self(coords))
            }

            /// Builds a pose and checks it against the topology's joint count.
            pub fn for_topology(coords: Vec<f64>, topo: &Topology) -> Result<Self> {
                let expected = $dim * topo.joint_count();
                if coords.len() != expected {
                    return Err(Error::DimensionMismatch { expected, actual: coords.len() });
                }
                Self::new(coords)
            }

            pub fn zeros(joints: usize) -> Self {
                Self(vec![0.0; $dim * joints])
            }

            pub fn from_joints(joints: &[[f64; $dim]]) -> Self {
                Self(joints.iter().flatten().copied().collect())
            }

            pub fn joint_count(&self) -> usize {
                self.0.len() / $dim
            }

            pub fn joint(&self, j: usize) -> [f64; $dim] {
                let mut out = [0.0; $dim];
                out.copy_from_slice(&self.0[$dim * j..$dim * (j + 1)]);
                out
            }

            pub fn set_joint(&mut self, j: usize, v: [f64; $dim]) {
                self.0[$dim * j..$dim * (j + 1)].copy_from_slice(&v);
            }

            pub fn joints(&self) -> impl Iterator<Item = [f64; $dim]> + '_ {
                (0..self.joint_count()).map(move |j| self.joint(j))
            }

            pub fn coords(&self) -> &[f64] {
                &self.0
            }

            pub fn coords_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }

            pub fn into_coords(self) -> Vec<f64> {
                self.0
            }

            pub fn scaled(&self, a: f64) -> Self {
                Self(self.0.iter().map(|v| v * a).collect())
            }

            pub fn translated(&self, offset: [f64; $dim]) -> Self {
                let mut out = self.clone();
                for chunk in out.0.chunks_mut($dim) {
                    for (c, o) in chunk.iter_mut().zip(offset) {
                        *c += o;
                    }
                }
                out
            }

            pub(crate) fn check(&self, topo: &Topology) -> Result<()> {
                let expected = $dim * topo.joint_count();
                if self.0.len() != expected {
                    return Err(Error::DimensionMismatch { expected, actual: self.0.len() });
                }
                Ok(())
            }

            /// Translates the pose so the root joint sits exactly at the origin.
            pub fn root_centered(&self, topo: &Topology) -> Result<Self> {
                self.check(topo)?;
                let root = self.joint(topo.root_index);
                let mut out = self.clone();
                for chunk in out.0.chunks_mut($dim) {
                    for (c, r) in chunk.iter_mut().zip(root) {
                        *c -= r;
                    }
                }
                Ok(out)
            }
        }
    };
}

pose_type!(Pose2D, 2, "Flat image-plane pose `(u_0, v_0, u_1, v_1, ...)`.");
pose_type!(Pose3D, 3, "Flat 3-D pose `(X_0, Y_0, Z_0, X_1, ...)`.");

/// One vector per bone: child position minus parent position.
pub fn bone_vectors(pose: &Pose3D, topo: &Topology) -> Result<Vec<[f64; 3]>> {
    pose.check(topo)?;
    Ok(topo
        .bones
        .iter()
        .map(|&(p, c)| {
            let (a, b) = (pose.joint(p), pose.joint(c));
            [b[0] - a[0], b[1] - a[1], b[2] - a[2]]
        })
        .collect())
}

pub fn bone_lengths(pose: &Pose3D, topo: &Topology) -> Result<Vec<f64>> {
    Ok(bone_vectors(pose, topo)?.iter().map(|v| norm3(*v)).collect())
}

/// Generic root centering for either pose type.
pub fn root_center<P: RootCenter>(pose: &P, topo: &Topology) -> Result<P> {
    pose.root_center(topo)
}

pub trait RootCenter: Sized {
    fn root_center(&self, topo: &Topology) -> Result<Self>;
}

impl RootCenter for Pose2D {
    fn root_center(&self, topo: &Topology) -> Result<Self> {
        self.root_centered(topo)
    }
}

impl RootCenter for Pose3D {
    fn root_center(&self, topo: &Topology) -> Result<Self> {
        self.root_centered(topo)
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[inline]
pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
