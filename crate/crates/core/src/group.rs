//! Simply connected nilpotent Lie groups in exponential coordinates of the
//! first kind: `g = exp(x)` is stored as the coordinate vector `x`, the
//! identity is the zero vector and the product is the BCH product.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::algebra::{AlgebraFile, AlgebraVector, LieAlgebraSpec, MAX_BCH_STEP};
use crate::error::{check_dim, LabError, Result};
use crate::tolerances::FD_STEP;

/// A point of the group in exponential coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPoint {
    pub coords: DVector<f64>,
}

impl GroupPoint {
    pub fn identity(dim: usize) -> Self {
        Self {
            coords: DVector::zeros(dim),
        }
    }

    pub fn from_coords(coords: DVector<f64>) -> Self {
        Self { coords }
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self {
            coords: DVector::from_column_slice(coords),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// Euclidean norm of the coordinates.
    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }
}

/// A group together with the generators `{X_i}` that drive the flow.
#[derive(Debug, Clone)]
pub struct GroupModel {
    alg: Arc<LieAlgebraSpec>,
    label: String,
    generators: Vec<usize>,
}

impl GroupModel {
    /// `generators` are zero-based basis indices.
    pub fn new(alg: LieAlgebraSpec, label: impl Into<String>, generators: Vec<usize>) -> Result<Self> {
        if alg.step() > MAX_BCH_STEP {
            return Err(LabError::UnsupportedStep(alg.step()));
        }
        if generators.is_empty() {
            return Err(LabError::InvalidModel("generator set is empty".into()));
        }
        let mut seen = vec![false; alg.dim()];
        for &g in &generators {
            if g >= alg.dim() {
                return Err(LabError::InvalidModel(format!(
                    "generator index {} outside 1..={}",
                    g + 1,
                    alg.dim()
                )));
            }
            if std::mem::replace(&mut seen[g], true) {
                return Err(LabError::InvalidModel(format!("duplicate generator {}", g + 1)));
            }
        }
        Ok(Self {
            alg: Arc::new(alg),
            label: label.into(),
            generators,
        })
    }

    /// Resolves a registry label: `abelian:<k>`, `heisenberg`,
    /// `paper-example`, `filiform` or `custom:<file>`.
    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "heisenberg" => Self::new(LieAlgebraSpec::heisenberg(), label, vec![0, 1]),
            "paper-example" => Self::new(LieAlgebraSpec::four_dim_example(), label, vec![0, 1]),
            "filiform" => Self::new(LieAlgebraSpec::filiform(5)?, label, vec![0, 1]),
            _ => {
                if let Some(k) = label.strip_prefix("abelian:") {
                    let k: usize = k.parse().map_err(|_| LabError::UnknownModel(label.to_string()))?;
                    if k == 0 {
                        return Err(LabError::UnknownModel(label.to_string()));
                    }
                    Self::new(LieAlgebraSpec::abelian(k)?, label, (0..k).collect())
                } else if let Some(path) = label.strip_prefix("custom:") {
                    Self::from_file(path, label)
                } else {
                    Err(LabError::UnknownModel(label.to_string()))
                }
            }
        }
    }

    /// Loads an algebra definition file. Without an explicit `generators`
    /// list the generators are the basis elements outside the image of the
    /// bracket.
    pub fn from_file(path: impl AsRef<Path>, label: &str) -> Result<Self> {
        let file = AlgebraFile::load(path)?;
        let alg = file.to_spec()?;
        let generators = match &file.generators {
            Some(list) => list
                .iter()
                .map(|&i| {
                    i.checked_sub(1)
                        .ok_or_else(|| LabError::InvalidModel("generator indices are 1-based".into()))
                })
                .collect::<Result<Vec<_>>>()?,
            None => {
                let derived = file.derived_indices();
                (0..alg.dim()).filter(|i| !derived.contains(i)).collect()
            }
        };
        Self::new(alg, label, generators)
    }

    pub fn alg(&self) -> &LieAlgebraSpec {
        &self.alg
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.alg.dim()
    }

    /// Zero-based generator indices.
    pub fn generators(&self) -> &[usize] {
        &self.generators
    }

    /// Number of driving Brownian components.
    pub fn k(&self) -> usize {
        self.generators.len()
    }

    pub fn identity(&self) -> GroupPoint {
        GroupPoint::identity(self.dim())
    }

    /// `Σ_i X_{gen_i} w_i` for a `k`-vector of weights.
    pub fn driving_vector(&self, weights: &[f64]) -> AlgebraVector {
        let mut v = AlgebraVector::zeros(self.dim());
        for (&g, &w) in self.generators.iter().zip(weights) {
            v[g] += w;
        }
        v
    }

    pub fn multiply(&self, g: &GroupPoint, h: &GroupPoint) -> Result<GroupPoint> {
        check_dim(self.dim(), g.dim())?;
        check_dim(self.dim(), h.dim())?;
        Ok(GroupPoint::from_coords(self.alg.bch_unchecked(&g.coords, &h.coords)))
    }

    /// `g · exp(x)`.
    pub(crate) fn right_step(&self, g: &GroupPoint, x: &AlgebraVector) -> GroupPoint {
        GroupPoint::from_coords(self.alg.bch_unchecked(&g.coords, x))
    }

    /// `exp(x) · g`.
    pub(crate) fn left_step(&self, x: &AlgebraVector, g: &GroupPoint) -> GroupPoint {
        GroupPoint::from_coords(self.alg.bch_unchecked(x, &g.coords))
    }

    pub fn inverse(&self, g: &GroupPoint) -> GroupPoint {
        GroupPoint::from_coords(-&g.coords)
    }

    /// `Ad_g = e^{ad_x}` for `g = exp(x)`.
    pub fn adjoint_of(&self, g: &GroupPoint) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), g.dim())?;
        Ok(self.alg.exp_ad_unchecked(&g.coords))
    }

    /// Coordinate differential of left translation at the identity; column
    /// `i` is the left-invariant field `X̃_i` at `g`.
    pub fn left_frame(&self, g: &GroupPoint) -> DMatrix<f64> {
        // d/dε log(e^x e^{εX}) = X + ½[x,X] + (1/12)[x,[x,X]]  (exact to step 4)
        let ad = self.alg.ad_matrix_unchecked(&g.coords);
        let ad2 = &ad * &ad;
        DMatrix::identity(self.dim(), self.dim()) + ad * 0.5 + ad2 / 12.0
    }

    /// Column `i` is the right-invariant field `X̂_i` at `g`.
    pub fn right_frame(&self, g: &GroupPoint) -> DMatrix<f64> {
        // d/dε log(e^{εX} e^y) = X - ½[y,X] + (1/12)[y,[y,X]]
        let ad = self.alg.ad_matrix_unchecked(&g.coords);
        let ad2 = &ad * &ad;
        DMatrix::identity(self.dim(), self.dim()) - ad * 0.5 + ad2 / 12.0
    }

    /// `d/dε|₀ g · exp(εX_i)` in coordinates (basis index `i`, zero-based).
    pub fn left_invariant_field(&self, i: usize, g: &GroupPoint) -> Result<DVector<f64>> {
        self.check_basis(i, g)?;
        Ok(self.left_frame(g).column(i).into_owned())
    }

    /// `d/dε|₀ exp(εX_i) · g` in coordinates.
    pub fn right_invariant_field(&self, i: usize, g: &GroupPoint) -> Result<DVector<f64>> {
        self.check_basis(i, g)?;
        Ok(self.right_frame(g).column(i).into_owned())
    }

    fn check_basis(&self, i: usize, g: &GroupPoint) -> Result<()> {
        check_dim(self.dim(), g.dim())?;
        if i >= self.dim() {
            return Err(LabError::IndexOutOfRange {
                index: i,
                len: self.dim(),
            });
        }
        Ok(())
    }

    /// `∇̂f(g)`: component `i` is `(X̂_i f)(g)`, basis taken orthonormal.
    pub fn hat_gradient(&self, f: &ScalarField, g: &GroupPoint) -> AlgebraVector {
        match f.coordinate_gradient(g) {
            Some(grad) => self.right_frame(g).tr_mul(&grad),
            None => self.frame_differences(f, g, |x, g| self.left_step(x, g)),
        }
    }

    /// `∇̃f(g)`: component `i` is `(X̃_i f)(g)`.
    pub fn tilde_gradient(&self, f: &ScalarField, g: &GroupPoint) -> AlgebraVector {
        match f.coordinate_gradient(g) {
            Some(grad) => self.left_frame(g).tr_mul(&grad),
            None => self.frame_differences(f, g, |x, g| self.right_step(g, x)),
        }
    }

    fn frame_differences(
        &self,
        f: &ScalarField,
        g: &GroupPoint,
        translate: impl Fn(&AlgebraVector, &GroupPoint) -> GroupPoint,
    ) -> AlgebraVector {
        AlgebraVector::from_fn(self.dim(), |i, _| {
            let x = self.alg.basis(i) * FD_STEP;
            let plus = f.eval(&translate(&x, g));
            let minus = f.eval(&translate(&(-x), g));
            (plus - minus) / (2.0 * FD_STEP)
        })
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A real function on the group, with an optional analytic coordinate gradient.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradientFn>>,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

/// Names accepted by [`ScalarField::bundled`].
pub const BUNDLED_FIELDS: [&str; 3] = ["top", "trig", "gauss"];

impl ScalarField {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(mut self, gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(gradient));
        self
    }

    pub fn without_gradient(mut self) -> Self {
        self.gradient = None;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    pub fn eval(&self, g: &GroupPoint) -> f64 {
        (self.value)(g.coords.as_slice())
    }

    pub fn coordinate_gradient(&self, g: &GroupPoint) -> Option<DVector<f64>> {
        self.gradient
            .as_ref()
            .map(|grad| DVector::from_vec(grad(g.coords.as_slice())))
    }

    pub fn constant(c: f64) -> Self {
        Self::new("const", move |_| c).with_gradient(|x| vec![0.0; x.len()])
    }

    /// Bundled test functions on a `dim`-dimensional group:
    ///
    /// * `top`: the last coordinate,
    /// * `trig`: `Σ_i sin(x_i / (i+1) + i/3)`,
    /// * `gauss`: `exp(-|x|²/8) (1 + Σ_i x_i / (i+1))`.
    pub fn bundled(name: &str, dim: usize) -> Result<Self> {
        let field = match name {
            "top" => Self::new(name, move |x| x[dim - 1]).with_gradient(move |x| {
                let mut g = vec![0.0; x.len()];
                g[dim - 1] = 1.0;
                g
            }),
            "trig" => Self::new(name, |x| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (v / (i + 1) as f64 + i as f64 / 3.0).sin())
                    .sum()
            })
            .with_gradient(|x| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (v / (i + 1) as f64 + i as f64 / 3.0).cos() / (i + 1) as f64)
                    .collect()
            }),
            "gauss" => Self::new(name, |x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let lin: f64 = x.iter().enumerate().map(|(i, v)| v / (i + 1) as f64).sum();
                (-r2 / 8.0).exp() * (1.0 + lin)
            })
            .with_gradient(|x| {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let lin: f64 = x.iter().enumerate().map(|(i, v)| v / (i + 1) as f64).sum();
                let w = (-r2 / 8.0).exp();
                x.iter()
                    .enumerate()
                    .map(|(i, v)| w * (1.0 / (i + 1) as f64 - v / 4.0 * (1.0 + lin)))
                    .collect()
            }),
            "const" => Self::constant(1.0),
            _ => {
                return Err(LabError::UnknownName {
                    what: "scalar field",
                    name: name.to_string(),
                })
            }
        };
        Ok(field)
    }

    /// Largest relative deviation between the analytic gradient and central
    /// differences with step `h`, or `None` when no gradient is attached.
    pub fn gradient_check(&self, g: &GroupPoint, h: f64) -> Option<f64> {
        let grad = self.coordinate_gradient(g)?;
        let mut worst = 0.0f64;
        for i in 0..g.dim() {
            let mut plus = g.clone();
            plus.coords[i] += h;
            let mut minus = g.clone();
            minus.coords[i] -= h;
            let fd = (self.eval(&plus) - self.eval(&minus)) / (2.0 * h);
            worst = worst.max((fd - grad[i]).abs() / grad[i].abs().max(1.0));
        }
        Some(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dvector;

    fn p(c: &[f64]) -> GroupPoint {
        GroupPoint::from_slice(c)
    }

    #[test]
    fn registry_labels() {
        assert_eq!(GroupModel::from_label("abelian:3").unwrap().k(), 3);
        assert_eq!(GroupModel::from_label("heisenberg").unwrap().dim(), 3);
        assert_eq!(GroupModel::from_label("paper-example").unwrap().generators(), &[0, 1]);
        assert_eq!(GroupModel::from_label("filiform").unwrap().alg().step(), 4);
        assert!(matches!(GroupModel::from_label("su2"), Err(LabError::UnknownModel(_))));
        assert!(GroupModel::from_label("abelian:0").is_err());
        assert!(GroupModel::from_label("abelian:x").is_err());
    }

    #[test]
    fn model_validates_generators() {
        let alg = LieAlgebraSpec::heisenberg();
        assert!(GroupModel::new(alg.clone(), "h", vec![]).is_err());
        assert!(GroupModel::new(alg.clone(), "h", vec![0, 0]).is_err());
        assert!(GroupModel::new(alg.clone(), "h", vec![3]).is_err());
        assert!(GroupModel::new(LieAlgebraSpec::filiform(6).unwrap(), "f", vec![0]).is_err());
    }

    #[test]
    fn example_products() {
        let m = GroupModel::from_label("paper-example").unwrap();
        let gh = m
            .multiply(&p(&[1.0, 0.0, 0.0, 0.0]), &p(&[0.0, 1.0, 0.0, 0.0]))
            .unwrap();
        assert_abs_diff_eq!(gh.coords, dvector![1.0, 1.0, 0.5, 1.0 / 12.0], epsilon = 1e-15);
        let hg = m
            .multiply(&p(&[0.0, 1.0, 0.0, 0.0]), &p(&[1.0, 0.0, 0.0, 0.0]))
            .unwrap();
        assert_abs_diff_eq!(hg.coords, dvector![1.0, 1.0, -0.5, 1.0 / 12.0], epsilon = 1e-15);
        let g = p(&[0.3, -2.0, 1.0, 4.0]);
        assert_eq!(m.multiply(&m.identity(), &g).unwrap(), g);
        assert!(m.multiply(&g, &p(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn inverses() {
        let m = GroupModel::from_label("paper-example").unwrap();
        let g = p(&[1.5, -0.5, 2.0, 3.0]);
        let inv = m.inverse(&g);
        assert_eq!(inv.coords, dvector![-1.5, 0.5, -2.0, -3.0]);
        assert!(m.multiply(&g, &inv).unwrap().norm() <= 1e-12);
        assert_eq!(m.inverse(&m.identity()).coords.norm(), 0.0);
        let h = GroupModel::from_label("heisenberg").unwrap();
        assert_eq!(h.inverse(&p(&[1.0, 2.0, 3.0])).coords, dvector![-1.0, -2.0, -3.0]);
    }

    #[test]
    fn adjoint_examples() {
        let ab = GroupModel::from_label("abelian:2").unwrap();
        assert_eq!(ab.adjoint_of(&p(&[3.0, 1.0])).unwrap(), DMatrix::identity(2, 2));
        let h = GroupModel::from_label("heisenberg").unwrap();
        let (a, b) = (0.5, -1.5);
        let ad = h.adjoint_of(&p(&[a, b, 2.0])).unwrap();
        assert_eq!(ad.column(0), dvector![1.0, 0.0, -b]);
        assert_eq!(ad.column(1), dvector![0.0, 1.0, a]);
        let m = GroupModel::from_label("paper-example").unwrap();
        let ad = m.adjoint_of(&p(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(ad.column(1), dvector![0.0, 1.0, 1.0, 0.5]);
    }

    #[test]
    fn invariant_fields() {
        let m = GroupModel::from_label("paper-example").unwrap();
        let x1 = m.left_invariant_field(0, &p(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_abs_diff_eq!(x1, dvector![1.0, 0.0, -1.0, -5.0 / 3.0], epsilon = 1e-15);
        for i in 0..4 {
            let l = m.left_invariant_field(i, &m.identity()).unwrap();
            let r = m.right_invariant_field(i, &m.identity()).unwrap();
            assert_eq!(l, m.alg().basis(i));
            assert_eq!(r, l);
        }
        let h = GroupModel::from_label("heisenberg").unwrap();
        let r = h.right_invariant_field(0, &p(&[0.7, 1.2, -3.0])).unwrap();
        assert_abs_diff_eq!(r, dvector![1.0, 0.0, 0.6], epsilon = 1e-15);
        assert!(h.right_invariant_field(3, &h.identity()).is_err());
    }

    #[test]
    fn gradients_on_heisenberg() {
        let h = GroupModel::from_label("heisenberg").unwrap();
        let f = ScalarField::bundled("top", 3).unwrap();
        let g = p(&[0.8, -0.4, 1.1]);
        let (a, b) = (0.8, -0.4);
        assert_abs_diff_eq!(
            h.hat_gradient(&f, &g),
            dvector![b / 2.0, -a / 2.0, 1.0],
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            h.tilde_gradient(&f, &g),
            dvector![-b / 2.0, a / 2.0, 1.0],
            epsilon = 1e-15
        );

        let fd = f.clone().without_gradient();
        assert_abs_diff_eq!(
            h.hat_gradient(&fd, &g),
            dvector![b / 2.0, -a / 2.0, 1.0],
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            h.tilde_gradient(&fd, &g),
            dvector![-b / 2.0, a / 2.0, 1.0],
            epsilon = 1e-9
        );

        let c = ScalarField::constant(2.0);
        assert_eq!(h.hat_gradient(&c, &g), dvector![0.0, 0.0, 0.0]);
        assert_eq!(h.tilde_gradient(&c, &g), dvector![0.0, 0.0, 0.0]);
    }

    #[test]
    fn abelian_gradients_are_coordinate_gradients() {
        let ab = GroupModel::from_label("abelian:3").unwrap();
        let f = ScalarField::bundled("gauss", 3).unwrap();
        let g = p(&[0.3, 1.0, -0.7]);
        let grad = f.coordinate_gradient(&g).unwrap();
        assert_eq!(ab.hat_gradient(&f, &g), grad);
        assert_eq!(ab.tilde_gradient(&f, &g), grad);
    }

    #[test]
    fn bundled_gradients_match_differences() {
        let g = p(&[0.4, -1.2, 0.9, 2.1]);
        for name in BUNDLED_FIELDS {
            let f = ScalarField::bundled(name, 4).unwrap();
            assert!(f.gradient_check(&g, 1e-5).unwrap() <= 1e-6, "{name}");
        }
        assert!(ScalarField::bundled("nope", 4).is_err());
    }
}
