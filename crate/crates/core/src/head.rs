//! Parametric head model: template mesh, linear expression blendshapes and a
//! single jaw joint blended by linear blend skinning.
//!
//! A vertex is first displaced by the expression basis,
//! `x_i = template_i + Σ_k psi_k · basis_{i,·,k}`, and then skinned over two
//! joints: the identity (head) and a rotation about `jaw_pivot`,
//! `v_i = w_head · x_i + w_jaw · (R(jaw) (x_i - pivot) + pivot)`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::geometry::{self, Mat3, Vec3};
use crate::tensor::Tensor;

/// Minimum triangle area accepted in the template.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadModelError {
    #[error("expression basis has {got} values, expected {expected} (N x 3 x K)")]
    BasisShape { expected: usize, got: usize },
    #[error("expected {expected} expression coefficients, got {got}")]
    ExpressionDim { expected: usize, got: usize },
    #[error("skin weight table has {got} rows, expected {expected}")]
    SkinRows { expected: usize, got: usize },
    #[error("skin weights of vertex {row} sum to {sum}, expected 1")]
    SkinSum { row: usize, sum: f64 },
    #[error("skin weights of vertex {row} contain a negative entry")]
    SkinNegative { row: usize },
    #[error("triangle {tri} references vertex {vertex}, but the model has {count} vertices")]
    FaceIndex { tri: usize, vertex: usize, count: usize },
    #[error("triangle {tri} is degenerate (area {area:e})")]
    DegenerateTriangle { tri: usize, area: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("jaw rotation angle {0} must be below pi")]
    JawAngle(f64),
    #[error("model has no vertices or no faces")]
    Empty,
}

/// Template, expression basis, skinning weights, jaw pivot and faces.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModelAssets {
    template: Vec<Vec3>,
    expr_basis: Vec<f64>,
    num_expr: usize,
    skin_weights: Vec<[f64; 2]>,
    jaw_pivot: Vec3,
    faces: Arc<[[usize; 3]]>,
}

impl HeadModelAssets {
    /// `expr_basis` is laid out `[vertex][axis][k]`.
    pub fn new(
        template: Vec<Vec3>,
        expr_basis: Vec<f64>,
        num_expr: usize,
        skin_weights: Vec<[f64; 2]>,
        jaw_pivot: Vec3,
        faces: Vec<[usize; 3]>,
    ) -> Result<Self, HeadModelError> {
        let n = template.len();
        if n == 0 || faces.is_empty() {
            return Err(HeadModelError::Empty);
        }
        if expr_basis.len() != n * 3 * num_expr {
            return Err(HeadModelError::BasisShape {
                expected: n * 3 * num_expr,
                got: expr_basis.len(),
            });
        }
        if skin_weights.len() != n {
            return Err(HeadModelError::SkinRows {
                expected: n,
                got: skin_weights.len(),
            });
        }
        if template.iter().flatten().any(|v| !v.is_finite()) {
            return Err(HeadModelError::NonFinite("template"));
        }
        if expr_basis.iter().any(|v| !v.is_finite()) {
            return Err(HeadModelError::NonFinite("expr_basis"));
        }
        if jaw_pivot.iter().any(|v| !v.is_finite()) {
            return Err(HeadModelError::NonFinite("jaw_pivot"));
        }
        for (row, w) in skin_weights.iter().enumerate() {
            if !(w[0].is_finite() && w[1].is_finite()) {
                return Err(HeadModelError::NonFinite("skin_weights"));
            }
            if w[0] < 0.0 || w[1] < 0.0 {
                return Err(HeadModelError::SkinNegative { row });
            }
            let sum = w[0] + w[1];
            if (sum - 1.0).abs() > 1e-9 {
                return Err(HeadModelError::SkinSum { row, sum });
            }
        }
        for (tri, f) in faces.iter().enumerate() {
            for &vertex in f {
                if vertex >= n {
                    return Err(HeadModelError::FaceIndex { tri, vertex, count: n });
                }
            }
            let area = triangle_area(&template, f);
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(HeadModelError::DegenerateTriangle { tri, area });
            }
        }
        Ok(Self {
            template,
            expr_basis,
            num_expr,
            skin_weights,
            jaw_pivot,
            faces: faces.into(),
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.template.len()
    }

    pub fn num_expr(&self) -> usize {
        self.num_expr
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn template(&self) -> &[Vec3] {
        &self.template
    }

    pub fn expr_basis(&self) -> &[f64] {
        &self.expr_basis
    }

    pub fn skin_weights(&self) -> &[[f64; 2]] {
        &self.skin_weights
    }

    pub fn jaw_pivot(&self) -> Vec3 {
        self.jaw_pivot
    }

    pub fn faces(&self) -> &Arc<[[usize; 3]]> {
        &self.faces
    }

    /// The undeformed mesh.
    pub fn rest_mesh(&self) -> Mesh {
        Mesh {
            vertices: self.template.clone(),
            faces: self.faces.clone(),
        }
    }

    #[inline]
    fn basis(&self, i: usize, axis: usize, k: usize) -> f64 {
        self.expr_basis[(i * 3 + axis) * self.num_expr + k]
    }

    fn expressed(&self, psi: &[f64]) -> Vec<Vec3> {
        let k = self.num_expr;
        self.template
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut x = *t;
                for (axis, xa) in x.iter_mut().enumerate() {
                    let row = &self.expr_basis[(i * 3 + axis) * k..(i * 3 + axis + 1) * k];
                    *xa += row.iter().zip(psi).map(|(b, p)| b * p).sum::<f64>();
                }
                x
            })
            .collect()
    }

    /// Deformed vertex positions for raw parameters.
    pub fn deform_vertices(&self, psi: &[f64], jaw: Vec3) -> Result<Vec<Vec3>, HeadModelError> {
        if psi.len() != self.num_expr {
            return Err(HeadModelError::ExpressionDim {
                expected: self.num_expr,
                got: psi.len(),
            });
        }
        let r = geometry::rodrigues(jaw);
        Ok(self.skin(&self.expressed(psi), &r))
    }

    fn skin(&self, x: &[Vec3], r: &Mat3) -> Vec<Vec3> {
        let p = self.jaw_pivot;
        x.iter()
            .zip(&self.skin_weights)
            .map(|(xi, w)| {
                // w_head x + w_jaw (R (x - p) + p) with w_head = 1 - w_jaw,
                // written so that the rest pose reproduces x exactly.
                let d = geometry::sub(*xi, p);
                let moved = geometry::sub(geometry::mat_vec(r, d), d);
                geometry::add(*xi, geometry::scale(moved, w[1]))
            })
            .collect()
    }
}

pub fn triangle_area(vertices: &[Vec3], f: &[usize; 3]) -> f64 {
    let e1 = geometry::sub(vertices[f[1]], vertices[f[0]]);
    let e2 = geometry::sub(vertices[f[2]], vertices[f[0]]);
    0.5 * geometry::norm(geometry::cross(e1, e2))
}

/// Expression coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionParams(Vec<f64>);

impl ExpressionParams {
    pub fn new(psi: Vec<f64>) -> Result<Self, HeadModelError> {
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(HeadModelError::NonFinite("expression"));
        }
        Ok(Self(psi))
    }

    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Jaw rotation as an axis-angle vector with angle below pi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JawPose(Vec3);

impl JawPose {
    pub const REST: JawPose = JawPose([0.0; 3]);

    pub fn new(theta: Vec3) -> Result<Self, HeadModelError> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(HeadModelError::NonFinite("jaw"));
        }
        let angle = geometry::norm(theta);
        if angle >= core::f64::consts::PI {
            return Err(HeadModelError::JawAngle(angle));
        }
        Ok(Self(theta))
    }

    pub fn axis_angle(&self) -> Vec3 {
        self.0
    }
}

/// Deformed vertices sharing the model's faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub faces: Arc<[[usize; 3]]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, faces: Arc<[[usize; 3]]>) -> Self {
        Self { vertices, faces }
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Vertices as an `N x 3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.vertices.iter().flatten().copied().collect();
        Tensor::from_parts(vec![self.vertices.len(), 3], data)
    }

    pub fn from_tensor(t: &Tensor, faces: Arc<[[usize; 3]]>) -> Self {
        let vertices = t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self { vertices, faces }
    }

    /// Apply `v -> R v + t` to every vertex.
    pub fn transformed(&self, rot: &Mat3, trans: Vec3) -> Mesh {
        Mesh {
            vertices: self
                .vertices
                .iter()
                .map(|&v| geometry::add(geometry::mat_vec(rot, v), trans))
                .collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn centroid(&self, tri: usize) -> Vec3 {
        let f = self.faces[tri];
        let s = geometry::add(
            geometry::add(self.vertices[f[0]], self.vertices[f[1]]),
            self.vertices[f[2]],
        );
        geometry::scale(s, 1.0 / 3.0)
    }
}

/// Deformed mesh for validated parameters.
pub fn deform_mesh(model: &HeadModelAssets, psi: &ExpressionParams, jaw: &JawPose) -> Result<Mesh, HeadModelError> {
    let vertices = model.deform_vertices(psi.as_slice(), jaw.axis_angle())?;
    Ok(Mesh {
        vertices,
        faces: model.faces.clone(),
    })
}

/// Differentiable mesh deformation: `psi` (K) and `jaw` (3) to `N x 3`
/// vertices.
pub fn deform_mesh_op(g: &mut Graph, model: &Arc<HeadModelAssets>, psi: Var, jaw: Var) -> Result<Var, HeadModelError> {
    let k = model.num_expr;
    let pv = g.value(psi);
    if pv.len() != k {
        return Err(HeadModelError::ExpressionDim {
            expected: k,
            got: pv.len(),
        });
    }
    let jv = g.value(jaw);
    assert_eq!(jv.len(), 3, "jaw pose must have 3 components");
    let theta = [jv.data()[0], jv.data()[1], jv.data()[2]];
    let verts = model.deform_vertices(pv.data(), theta)?;
    let n = verts.len();
    let value = Tensor::from_parts(vec![n, 3], verts.into_iter().flatten().collect());
    let model = model.clone();
    Ok(g.custom(&[psi, jaw], value, move |ctx| {
        let psi = ctx.inputs[0].data();
        let j = ctx.inputs[1].data();
        let theta = [j[0], j[1], j[2]];
        let r = geometry::rodrigues(theta);
        let gv = ctx.grad.data();
        let x = model.expressed(psi);
        let p = model.jaw_pivot;
        let mut gpsi = vec![0.0; k];
        let mut gr = [[0.0; 3]; 3];
        for i in 0..n {
            let w = model.skin_weights[i];
            let gi = [gv[3 * i], gv[3 * i + 1], gv[3 * i + 2]];
            let rt = geometry::mat_t_vec(&r, gi);
            let gx = [
                gi[0] + w[1] * (rt[0] - gi[0]),
                gi[1] + w[1] * (rt[1] - gi[1]),
                gi[2] + w[1] * (rt[2] - gi[2]),
            ];
            for (axis, gxa) in gx.iter().enumerate() {
                if *gxa != 0.0 {
                    for (kk, gp) in gpsi.iter_mut().enumerate() {
                        *gp += model.basis(i, axis, kk) * gxa;
                    }
                }
            }
            if w[1] != 0.0 {
                let d = geometry::sub(x[i], p);
                for a in 0..3 {
                    for b in 0..3 {
                        gr[a][b] += w[1] * gi[a] * d[b];
                    }
                }
            }
        }
        let gjaw = geometry::rodrigues_vjp(theta, &gr);
        vec![
            Some(Tensor::from_parts(ctx.inputs[0].dims().to_vec(), gpsi)),
            Some(Tensor::from_parts(ctx.inputs[1].dims().to_vec(), gjaw.to_vec())),
        ]
    }))
}

/// Differentiable rigid transform `v -> R v + t` of an `N x 3` vertex node.
pub fn rigid_transform_op(g: &mut Graph, verts: Var, rot: &Mat3, trans: Vec3) -> Var {
    let rt = g.constant(Tensor::from_parts(
        vec![3, 3],
        geometry::mat_to_flat(&geometry::transpose(rot)).to_vec(),
    ));
    let t = g.constant(Tensor::from_parts(vec![3], trans.to_vec()));
    let rotated = g.matmul(verts, rt);
    g.add_row(rotated, t)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::autodiff::ParamId;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A bumpy 4x4 grid patch whose lower half follows the jaw.
    pub(crate) fn small_model(k: usize, seed: u64) -> HeadModelAssets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 4;
        let mut template = Vec::new();
        let mut skin = Vec::new();
        for r in 0..side {
            for c in 0..side {
                let x = c as f64 / (side - 1) as f64 - 0.5;
                let y = r as f64 / (side - 1) as f64 - 0.5;
                template.push([x, y, 0.1 * rng.random_range(-1.0..1.0)]);
                let wj = if r >= side / 2 {
                    1.0
                } else if r == side / 2 - 1 {
                    0.5
                } else {
                    0.0
                };
                skin.push([1.0 - wj, wj]);
            }
        }
        let mut faces = Vec::new();
        for r in 0..side - 1 {
            for c in 0..side - 1 {
                let a = r * side + c;
                faces.push([a, a + 1, a + side]);
                faces.push([a + 1, a + side + 1, a + side]);
            }
        }
        let n = template.len();
        let basis = (0..n * 3 * k).map(|_| 0.05 * rng.random_range(-1.0..1.0)).collect();
        HeadModelAssets::new(template, basis, k, skin, [0.0, -0.2, 0.5], faces).unwrap()
    }

    #[test]
    fn rest_pose_is_template() {
        let m = small_model(4, 0);
        let mesh = deform_mesh(&m, &ExpressionParams::zeros(4), &JawPose::REST).unwrap();
        assert_eq!(mesh.vertices, m.template());
    }

    #[test]
    fn unit_expression_adds_basis_column_for_head_vertices() {
        let m = small_model(4, 1);
        for k in 0..4 {
            let mut psi = vec![0.0; 4];
            psi[k] = 1.0;
            let v = m.deform_vertices(&psi, [0.0; 3]).unwrap();
            for i in 0..m.num_vertices() {
                if m.skin_weights()[i] == [1.0, 0.0] {
                    for a in 0..3 {
                        assert_eq!(v[i][a], m.template()[i][a] + m.basis(i, a, k));
                    }
                }
            }
        }
    }

    #[test]
    fn jaw_skinned_vertex_rotates_about_pivot() {
        let m = small_model(3, 2);
        let jaw = [0.3, 0.0, 0.0];
        let v = m.deform_vertices(&[0.0; 3], jaw).unwrap();
        // Independent rigid transform of a fully jaw-skinned vertex.
        let (s, c) = (libm::sin(0.3), libm::cos(0.3));
        let p = m.jaw_pivot();
        for i in 0..m.num_vertices() {
            if m.skin_weights()[i] == [0.0, 1.0] {
                let d = geometry::sub(m.template()[i], p);
                let expect = [d[0] + p[0], c * d[1] - s * d[2] + p[1], s * d[1] + c * d[2] + p[2]];
                for a in 0..3 {
                    assert!((v[i][a] - expect[a]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn blendshapes_are_affine_before_skinning() {
        let m = small_model(5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p1: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p2: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let mix: Vec<f64> = p1.iter().zip(&p2).map(|(x, y)| a * x + b * y).collect();
            let lhs = m.deform_vertices(&mix, [0.0; 3]).unwrap();
            let d1 = m.deform_vertices(&p1, [0.0; 3]).unwrap();
            let d2 = m.deform_vertices(&p2, [0.0; 3]).unwrap();
            for i in 0..m.num_vertices() {
                for ax in 0..3 {
                    let rhs = a * d1[i][ax] + b * d2[i][ax] - (a + b - 1.0) * m.template()[i][ax];
                    assert!((lhs[i][ax] - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn jaw_rotation_preserves_distances() {
        let m = small_model(3, 4);
        let psi = [0.3, -0.2, 0.5];
        let rest = m.deform_vertices(&psi, [0.0; 3]).unwrap();
        let moved = m.deform_vertices(&psi, [0.4, 0.2, -0.1]).unwrap();
        let p = m.jaw_pivot();
        let jaw_only: Vec<usize> = (0..m.num_vertices())
            .filter(|&i| m.skin_weights()[i] == [0.0, 1.0])
            .collect();
        assert!(jaw_only.len() > 2);
        for &i in &jaw_only {
            let d0 = geometry::norm(geometry::sub(rest[i], p));
            let d1 = geometry::norm(geometry::sub(moved[i], p));
            assert!((d0 - d1).abs() < 1e-10);
            for &j in &jaw_only {
                let d0 = geometry::norm(geometry::sub(rest[i], rest[j]));
                let d1 = geometry::norm(geometry::sub(moved[i], moved[j]));
                assert!((d0 - d1).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn validation_reports_row_and_triangle() {
        let m = small_model(2, 5);
        let mut skin = m.skin_weights().to_vec();
        skin[7] = [0.5, 0.4];
        let err = HeadModelAssets::new(
            m.template().to_vec(),
            m.expr_basis().to_vec(),
            2,
            skin,
            m.jaw_pivot(),
            m.faces().to_vec(),
        )
        .unwrap_err();
        assert!(matches!(err, HeadModelError::SkinSum { row: 7, .. }));

        let mut faces = m.faces().to_vec();
        faces[3] = [0, 0, 1];
        let err = HeadModelAssets::new(
            m.template().to_vec(),
            m.expr_basis().to_vec(),
            2,
            m.skin_weights().to_vec(),
            m.jaw_pivot(),
            faces,
        )
        .unwrap_err();
        assert!(matches!(err, HeadModelError::DegenerateTriangle { tri: 3, .. }));

        let mut faces = m.faces().to_vec();
        faces[2] = [0, 1, 99];
        assert!(matches!(
            HeadModelAssets::new(
                m.template().to_vec(),
                m.expr_basis().to_vec(),
                2,
                m.skin_weights().to_vec(),
                m.jaw_pivot(),
                faces
            ),
            Err(HeadModelError::FaceIndex { tri: 2, vertex: 99, .. })
        ));
        assert!(matches!(
            m.deform_vertices(&[0.0; 3], [0.0; 3]),
            Err(HeadModelError::ExpressionDim { expected: 2, got: 3 })
        ));
        assert!(JawPose::new([3.2, 0.0, 0.0]).is_err());
    }

    #[test]
    fn deform_op_passes_gradcheck() {
        let m = Arc::new(small_model(4, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Tensor::new(
            vec![m.num_vertices(), 3],
            (0..m.num_vertices() * 3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let psi0 = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let jaw0 = Tensor::vector(vec![0.2, -0.1, 0.05]).unwrap();
        let eval = |psi: &Tensor, jaw: &Tensor| -> (f64, Tensor, Tensor) {
            let mut g = Graph::new();
            let p = g.param(ParamId(0), psi);
            let j = g.param(ParamId(1), jaw);
            let v = deform_mesh_op(&mut g, &m, p, j).unwrap();
            let wv = g.constant(w.clone());
            let prod = g.mul(v, wv);
            let sq = g.square(prod);
            let l = g.sum(sq);
            let gr = g.backward(l).unwrap();
            (
                g.value(l).item(),
                gr.get(ParamId(0)).unwrap().clone(),
                gr.get(ParamId(1)).unwrap().clone(),
            )
        };
        let e1 = finite_diff_check(|p| Ok(eval(p, &jaw0).0), |p| eval(p, &jaw0).1, &psi0, 1e-5).unwrap();
        let e2 = finite_diff_check(|j| Ok(eval(&psi0, j).0), |j| eval(&psi0, j).2, &jaw0, 1e-5).unwrap();
        assert!(e1 < 1e-4 && e2 < 1e-4, "{e1} {e2}");
        // At the rest pose too.
        let zero = Tensor::vector(vec![0.0; 3]).unwrap();
        let e3 = finite_diff_check(|j| Ok(eval(&psi0, j).0), |j| eval(&psi0, j).2, &zero, 1e-5).unwrap();
        assert!(e3 < 1e-4, "{e3}");
    }
}
