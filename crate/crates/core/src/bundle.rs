//! Versioned model bundle: body template plus latent pose prior.
//!
//! The shipped bundle is a JSON asset so every implementation reads the same
//! bits. [`ModelBundle::generate`] rebuilds it procedurally from a seed; a
//! test keeps the two in agreement.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::body_model::{BodyTemplate, BETA_DIM, NUM_JOINTS, THETA_DIM, VERTS_PER_SEGMENT};
use crate::error::{Error, Result};
use crate::pose_prior::{PriorBasis, LATENT_DIM};

pub const BUNDLE_VERSION: &str = "aerocap-model/1";
pub const BUNDLE_SEED: u64 = 0x5eed_b0d1;

const BUILTIN_JSON: &str = include_str!("../assets/model_v1.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: String,
    pub seed: u64,
    pub template: BodyTemplate,
    pub prior: PriorBasis,
}

impl ModelBundle {
    /// The bundle shipped with the crate.
    pub fn builtin() -> &'static ModelBundle {
        static BUNDLE: OnceLock<ModelBundle> = OnceLock::new();
        BUNDLE.get_or_init(|| ModelBundle::from_json(BUILTIN_JSON).expect("shipped model bundle is valid"))
    }

    pub fn from_json(s: &str) -> Result<ModelBundle> {
        let b: ModelBundle = serde_json::from_str(s).map_err(|e| Error::Config(format!("model bundle: {e}")))?;
        if b.version != BUNDLE_VERSION {
            return Err(Error::Config(format!(
                "unsupported model bundle version {:?}",
                b.version
            )));
        }
        b.template.validate()?;
        b.prior.validate()?;
        Ok(b)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    pub fn generate(seed: u64) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = generate_template(&mut rng);
        let prior = generate_prior(&mut rng);
        ModelBundle {
            version: BUNDLE_VERSION.to_string(),
            seed,
            template,
            prior,
        }
    }
}

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(3),
    Some(6),
    Some(7),
    Some(8),
    Some(3),
    Some(10),
    Some(11),
    Some(12),
    Some(0),
    Some(14),
    Some(15),
    Some(16),
    Some(0),
    Some(18),
    Some(19),
    Some(20),
];

// T-pose, body frame with +y towards the feet and +x to the body's left.
const REST: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, -0.10, 0.01],
    [0.0, -0.22, 0.01],
    [0.0, -0.36, 0.0],
    [0.0, -0.52, 0.01],
    [0.0, -0.64, 0.0],
    [0.07, -0.46, 0.0],
    [0.18, -0.47, 0.0],
    [0.44, -0.47, 0.0],
    [0.69, -0.47, 0.0],
    [-0.07, -0.46, 0.0],
    [-0.18, -0.47, 0.0],
    [-0.44, -0.47, 0.0],
    [-0.69, -0.47, 0.0],
    [0.09, 0.05, 0.0],
    [0.10, 0.45, 0.0],
    [0.10, 0.85, 0.02],
    [0.10, 0.92, -0.12],
    [-0.09, 0.05, 0.0],
    [-0.10, 0.45, 0.0],
    [-0.10, 0.85, 0.02],
    [-0.10, 0.92, -0.12],
];

const RADIUS: [f64; NUM_JOINTS] = [
    0.13, 0.13, 0.12, 0.12, 0.05, 0.09, 0.05, 0.05, 0.04, 0.04, 0.05, 0.05, 0.04, 0.04, 0.07, 0.05, 0.04,
    0.04, 0.07, 0.05, 0.04, 0.04,
];

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn axpy(a: f64, x: [f64; 3], y: [f64; 3]) -> [f64; 3] {
    [y[0] + a * x[0], y[1] + a * x[1], y[2] + a * x[2]]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn generate_template(rng: &mut ChaCha8Rng) -> BodyTemplate {
    let jitter = Normal::new(0.0, 0.002).unwrap();
    let mut rest = REST;
    for r in rest.iter_mut().skip(1) {
        for v in r.iter_mut() {
            *v += jitter.sample(rng);
        }
    }

    let mut jb = vec![[[0.0; BETA_DIM]; 3]; NUM_JOINTS];
    let mut set = |j: usize, k: usize, d: [f64; 3]| {
        for a in 0..3 {
            jb[j][a][k] = d[a];
        }
    };
    for (j, r) in rest.iter().enumerate().skip(1) {
        // overall size
        set(j, 0, [0.05 * r[0], 0.05 * r[1], 0.05 * r[2]]);
    }
    for (hip, leg) in [(14, [15, 16, 17]), (18, [19, 20, 21])] {
        for j in leg {
            let d = sub(rest[j], rest[hip]);
            set(j, 1, [0.06 * d[0], 0.06 * d[1], 0.06 * d[2]]);
        }
    }
    for (sh, arm) in [(7, [8, 9]), (11, [12, 13])] {
        for j in arm {
            let d = sub(rest[j], rest[sh]);
            set(j, 2, [0.06 * d[0], 0.06 * d[1], 0.06 * d[2]]);
        }
    }
    for j in 1..=13 {
        let d = if j <= 3 { rest[j] } else { rest[3] };
        set(j, 3, [0.06 * d[0], 0.06 * d[1], 0.06 * d[2]]);
    }
    for (j, w) in [(6, 0.01), (7, 0.02), (8, 0.02), (9, 0.02)] {
        set(j, 4, [w, 0.0, 0.0]);
        set(j + 4, 4, [-w, 0.0, 0.0]);
    }
    for j in 14..=17 {
        set(j, 5, [0.015, 0.0, 0.0]);
        set(j + 4, 5, [-0.015, 0.0, 0.0]);
    }
    let head = sub(rest[5], rest[4]);
    set(5, 6, [0.08 * head[0], 0.08 * head[1], 0.08 * head[2]]);
    // component 7 only inflates segment girth (vertices)
    let smooth = Normal::new(0.0, 0.006).unwrap();
    for k in [8, 9] {
        let mut acc = vec![[0.0; 3]; NUM_JOINTS];
        for j in 1..NUM_JOINTS {
            let p = PARENTS[j].unwrap();
            let own = [smooth.sample(rng), smooth.sample(rng), smooth.sample(rng)];
            acc[j] = [acc[p][0] + own[0], acc[p][1] + own[1], acc[p][2] + own[2]];
            set(j, k, acc[j]);
        }
    }

    let first_child = |j: usize| (0..NUM_JOINTS).find(|&c| PARENTS[c] == Some(j));
    let mut rest_vertices = Vec::new();
    let mut vertex_joint = Vec::new();
    let mut vertex_shape_basis = Vec::new();
    let vjit = Normal::new(0.0, 0.003).unwrap();
    for j in 0..NUM_JOINTS {
        let (end, end_basis) = match first_child(j) {
            Some(c) => (rest[c], jb[c]),
            None => {
                let p = PARENTS[j].unwrap();
                let dir = normalize(sub(rest[j], rest[p]));
                (axpy(0.08, dir, rest[j]), jb[j])
            }
        };
        let d = normalize(sub(end, rest[j]));
        let helper = if d[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = normalize(cross(d, helper));
        let w = cross(d, u);
        let r = RADIUS[j];
        let placements: [(f64, [f64; 3]); VERTS_PER_SEGMENT] = [
            (0.5, [r * u[0], r * u[1], r * u[2]]),
            (0.5, [-r * u[0], -r * u[1], -r * u[2]]),
            (0.5, [r * w[0], r * w[1], r * w[2]]),
            (0.5, [-r * w[0], -r * w[1], -r * w[2]]),
            (1.0, [0.0; 3]),
        ];
        for (f, radial) in placements {
            let axis_pt = axpy(f, sub(end, rest[j]), rest[j]);
            let mut v = [axis_pt[0] + radial[0], axis_pt[1] + radial[1], axis_pt[2] + radial[2]];
            for x in v.iter_mut() {
                *x += vjit.sample(rng);
            }
            let mut b = [[0.0; BETA_DIM]; 3];
            for a in 0..3 {
                for k in 0..BETA_DIM {
                    b[a][k] = match k {
                        0 => 0.05 * v[a],
                        7 => 0.1 * radial[a],
                        _ => (1.0 - f) * jb[j][a][k] + f * end_basis[a][k],
                    };
                }
            }
            rest_vertices.push(v);
            vertex_joint.push(j);
            vertex_shape_basis.push(b);
        }
    }

    BodyTemplate {
        parent: PARENTS.to_vec(),
        rest_joints: rest.to_vec(),
        joint_shape_basis: jb,
        rest_vertices,
        vertex_joint,
        vertex_shape_basis,
    }
}

fn generate_prior(rng: &mut ChaCha8Rng) -> PriorBasis {
    let raw = DMatrix::<f64>::from_fn(THETA_DIM, LATENT_DIM, |_, _| StandardNormal.sample(rng));
    let qr = raw.qr();
    let r = qr.r();
    let mut q = qr.q();
    for c in 0..LATENT_DIM {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    PriorBasis {
        decoder: (0..THETA_DIM)
            .map(|i| (0..LATENT_DIM).map(|k| q[(i, k)]).collect())
            .collect(),
    }
}
