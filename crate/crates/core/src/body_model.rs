//! Simplified 22-joint articulated body model.
//!
//! Joints and proxy vertices are posed by forward kinematics over a fixed
//! kinematic tree, with a linear shape basis on the rest geometry and rigid
//! per-segment vertex attachment. The body-local frame is camera-like: `+x`
//! to the body's left as seen by a viewer, `+y` down (feet), `+z` away from a
//! viewer the body is facing. An identity root rotation therefore shows an
//! upright person facing the camera.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geom::{M3, V3};
use crate::rotation::{self, Rotation6D};

pub const NUM_JOINTS: usize = 22;
pub const NUM_BODY_JOINTS: usize = NUM_JOINTS - 1;
pub const THETA_DIM: usize = 6 * NUM_BODY_JOINTS;
pub const BETA_DIM: usize = 10;
pub const VERTS_PER_SEGMENT: usize = 5;
pub const NUM_VERTICES: usize = NUM_JOINTS * VERTS_PER_SEGMENT;
/// Flattened [`BodyParams`] length: τ, φ, θ, β.
pub const PARAM_DIM: usize = 3 + 6 + THETA_DIM + BETA_DIM;

pub const TAU_RANGE: std::ops::Range<usize> = 0..3;
pub const PHI_RANGE: std::ops::Range<usize> = 3..9;
pub const THETA_RANGE: std::ops::Range<usize> = 9..9 + THETA_DIM;
pub const BETA_RANGE: std::ops::Range<usize> = 9 + THETA_DIM..PARAM_DIM;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "spine1",
    "spine2",
    "spine3",
    "neck",
    "head",
    "left_clavicle",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_clavicle",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "left_foot",
    "right_hip",
    "right_knee",
    "right_ankle",
    "right_foot",
];

/// θ for the rest pose: every body joint at the identity rotation.
pub fn identity_theta() -> Vec<f64> {
    Rotation6D::IDENTITY.0.repeat(NUM_BODY_JOINTS)
}

/// Root translation τ, root rotation φ, articulated pose θ, shape β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub tau: [f64; 3],
    pub phi: Rotation6D,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Default for BodyParams {
    fn default() -> Self {
        BodyParams {
            tau: [0.0; 3],
            phi: Rotation6D::IDENTITY,
            theta: identity_theta(),
            beta: vec![0.0; BETA_DIM],
        }
    }
}

impl BodyParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != THETA_DIM {
            return Err(Error::shape("theta", THETA_DIM, self.theta.len()));
        }
        if self.beta.len() != BETA_DIM {
            return Err(Error::shape("beta", BETA_DIM, self.beta.len()));
        }
        let finite = self
            .tau
            .iter()
            .chain(self.phi.0.iter())
            .chain(&self.theta)
            .chain(&self.beta)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteObjective { frame: None });
        }
        Ok(())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PARAM_DIM);
        v.extend_from_slice(&self.tau);
        v.extend_from_slice(&self.phi.0);
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() != PARAM_DIM {
            return Err(Error::shape("flat body parameters", PARAM_DIM, x.len()));
        }
        let mut phi = [0.0; 6];
        phi.copy_from_slice(&x[PHI_RANGE]);
        Ok(BodyParams {
            tau: [x[0], x[1], x[2]],
            phi: Rotation6D(phi),
            theta: x[THETA_RANGE].to_vec(),
            beta: x[BETA_RANGE].to_vec(),
        })
    }
}

/// Fixed rest geometry, kinematic tree and linear shape basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyTemplate {
    pub parent: Vec<Option<usize>>,
    pub rest_joints: Vec<[f64; 3]>,
    /// `[joint][axis][shape component]`
    pub joint_shape_basis: Vec<[[f64; BETA_DIM]; 3]>,
    pub rest_vertices: Vec<[f64; 3]>,
    pub vertex_joint: Vec<usize>,
    /// `[vertex][axis][shape component]`
    pub vertex_shape_basis: Vec<[[f64; BETA_DIM]; 3]>,
}

impl BodyTemplate {
    /// Checks counts, the single-root tree (parents precede children) and
    /// vertex attachments.
    pub fn validate(&self) -> Result<()> {
        let n = self.parent.len();
        if n != NUM_JOINTS {
            return Err(Error::shape("template joints", NUM_JOINTS, n));
        }
        for (what, len) in [
            ("rest_joints", self.rest_joints.len()),
            ("joint_shape_basis", self.joint_shape_basis.len()),
        ] {
            if len != NUM_JOINTS {
                return Err(Error::shape(what, NUM_JOINTS, len));
            }
        }
        for (what, len) in [
            ("rest_vertices", self.rest_vertices.len()),
            ("vertex_joint", self.vertex_joint.len()),
            ("vertex_shape_basis", self.vertex_shape_basis.len()),
        ] {
            if len != NUM_VERTICES {
                return Err(Error::shape(what, NUM_VERTICES, len));
            }
        }
        if self.parent[0].is_some() {
            return Err(Error::Config("joint 0 must be the root".into()));
        }
        for (i, p) in self.parent.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::Config(format!(
                        "joint {i} must have a parent with a smaller index"
                    )))
                }
            }
        }
        if let Some(bad) = self.vertex_joint.iter().find(|&&j| j >= NUM_JOINTS) {
            return Err(Error::Config(format!("vertex attached to joint {bad}")));
        }
        Ok(())
    }

    /// Rest joints after applying the shape blend.
    pub fn shaped_joints<T: Real>(&self, beta: &[T]) -> Vec<V3<T>> {
        shape_blend(&self.rest_joints, &self.joint_shape_basis, beta)
    }

    pub fn shaped_vertices<T: Real>(&self, beta: &[T]) -> Vec<V3<T>> {
        shape_blend(&self.rest_vertices, &self.vertex_shape_basis, beta)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(j))
            .map(|(i, _)| i)
    }
}

fn shape_blend<T: Real>(rest: &[[f64; 3]], basis: &[[[f64; BETA_DIM]; 3]], beta: &[T]) -> Vec<V3<T>> {
    rest.iter()
        .zip(basis)
        .map(|(r, b)| {
            let mut out = [T::cst(r[0]), T::cst(r[1]), T::cst(r[2])];
            for (axis, o) in out.iter_mut().enumerate() {
                for (k, &bk) in beta.iter().enumerate() {
                    let d = b[axis][k];
                    if d != 0.0 {
                        *o += bk * d;
                    }
                }
            }
            V3(out)
        })
        .collect()
}

/// Posed joints (and optionally vertices) for one parameter set.
#[derive(Clone, Debug)]
pub struct Posed<T> {
    pub joints: Vec<V3<T>>,
    pub vertices: Option<Vec<V3<T>>>,
}

/// Forward kinematics on raw parameter slices.
///
/// `j_i = τ + R(φ)·FK_i(θ, J(β))`; vertices follow their joint's world
/// transform rigidly.
pub fn pose<T: Real>(
    template: &BodyTemplate,
    tau: &[T],
    phi: &[T],
    theta: &[T],
    beta: &[T],
    with_vertices: bool,
) -> Result<Posed<T>> {
    if theta.len() != THETA_DIM {
        return Err(Error::shape("theta", THETA_DIM, theta.len()));
    }
    if beta.len() != BETA_DIM {
        return Err(Error::shape("beta", BETA_DIM, beta.len()));
    }
    let root_rot = rotation::decode(phi)?;
    let root_t = V3::from_slice(tau);
    let rest = template.shaped_joints(beta);

    let mut global_rot: Vec<M3<T>> = Vec::with_capacity(NUM_JOINTS);
    let mut local_pos: Vec<V3<T>> = Vec::with_capacity(NUM_JOINTS);
    global_rot.push(M3::identity());
    local_pos.push(rest[0]);
    for i in 1..NUM_JOINTS {
        let p = template.parent[i].expect("validated template");
        let local = rotation::decode(&theta[6 * (i - 1)..6 * i])?;
        let offset = rest[i].sub(&rest[p]);
        local_pos.push(local_pos[p].add(&global_rot[p].mul_vec(&offset)));
        global_rot.push(global_rot[p].mul_mat(&local));
    }

    let to_world = |v: &V3<T>| root_t.add(&root_rot.mul_vec(v));
    let joints = local_pos.iter().map(to_world).collect();

    let vertices = if with_vertices {
        let rest_v = template.shaped_vertices(beta);
        Some(
            rest_v
                .iter()
                .zip(&template.vertex_joint)
                .map(|(v, &j)| {
                    let rel = v.sub(&rest[j]);
                    to_world(&local_pos[j].add(&global_rot[j].mul_vec(&rel)))
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(Posed { joints, vertices })
}

/// Joint positions, `NUM_JOINTS × 3`.
pub fn joints(params: &BodyParams, template: &BodyTemplate) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    let posed = pose::<f64>(template, &params.tau, &params.phi.0, &params.theta, &params.beta, false)?;
    Ok(posed.joints.iter().map(|v| v.values()).collect())
}

/// Proxy vertex positions, `NUM_VERTICES × 3`.
pub fn vertices(params: &BodyParams, template: &BodyTemplate) -> Result<Vec<[f64; 3]>> {
    params.validate()?;
    let posed = pose::<f64>(template, &params.tau, &params.phi.0, &params.theta, &params.beta, true)?;
    Ok(posed
        .vertices
        .expect("requested")
        .iter()
        .map(|v| v.values())
        .collect())
}
