//! Linear time-invariant plants: representation, zero-order-hold
//! discretization, oscillator-network composition and noisy simulation.

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, stream};

/// Discrete-time plant `x+ = A x + B u + w`, `z^i = C^i x + v^i`.
///
/// Each row of `C` is the output map of one binary sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    sample_time: Option<f64>,
}

impl LtiModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("state dimension must be at least 1".into()));
        }
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        check_dim("C columns", n, c.ncols())?;
        if c.nrows() == 0 {
            return Err(Error::InvalidInput("at least one output row is required".into()));
        }
        for (name, m) in [("A", &a), ("B", &b), ("C", &c)] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} has non-finite entries")));
            }
        }
        Ok(Self {
            a,
            b,
            c,
            sample_time: None,
        })
    }

    /// Plant without inputs (`m = 0`).
    pub fn autonomous(a: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, DMatrix::zeros(n, 0), c)
    }

    pub fn with_sample_time(mut self, ts: f64) -> Self {
        self.sample_time = Some(ts);
        self
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sample_time(&self) -> Option<f64> {
        self.sample_time
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.c.nrows()
    }

    /// Output row `C^i`.
    pub fn output_row(&self, i: usize) -> RowDVector<f64> {
        self.c.row(i).into_owned()
    }

    /// `A x + B u`.
    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut next = &self.a * x;
        if self.m() > 0 {
            next += &self.b * u;
        }
        next
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            n: self.n(),
            m: self.m(),
            p: self.p(),
            ts: self.sample_time,
            a: row_major(&self.a),
            b: row_major(&self.b),
            c: row_major(&self.c),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        let a = from_row_major("A", doc.n, doc.n, &doc.a)?;
        let b = from_row_major("B", doc.n, doc.m, &doc.b)?;
        let c = from_row_major("C", doc.p, doc.n, &doc.c)?;
        let model = Self::new(a, b, c)?;
        Ok(match doc.ts {
            Some(ts) => model.with_sample_time(ts),
            None => model,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::from_document(&doc)
    }
}

/// Serialized form of an [`LtiModel`]; matrices are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    #[serde(rename = "Ts", default, skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(rename = "A")]
    pub a: Vec<f64>,
    #[serde(rename = "B")]
    pub b: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}

fn from_row_major(name: &'static str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    check_dim(name, rows * cols, data.len())?;
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

/// Radii of the compact sets bounding the plant signals.
///
/// `rho_w` is also the half-width of the box from which process noise is
/// sampled component-wise; `rho_v[i]` bounds `|v^i|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub rho_w: f64,
    pub rho_v: Vec<f64>,
    pub rho_x: f64,
    pub rho_u: f64,
}

impl NoiseBounds {
    pub fn new(rho_w: f64, rho_v: Vec<f64>, rho_x: f64, rho_u: f64) -> Result<Self> {
        let bounds = Self {
            rho_w,
            rho_v,
            rho_x,
            rho_u,
        };
        bounds.validate()?;
        Ok(bounds)
    }

    /// Noise-free bounds for `p` sensors.
    pub fn noiseless(p: usize) -> Self {
        Self {
            rho_w: 0.0,
            rho_v: vec![0.0; p],
            rho_x: 0.0,
            rho_u: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.rho_w, self.rho_x, self.rho_u]
            .into_iter()
            .chain(self.rho_v.iter().copied());
        for v in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("noise bound {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    pub fn rho_v_max(&self) -> f64 {
        self.rho_v.iter().copied().fold(0.0, f64::max)
    }

    /// Euclidean radius of the sampled process-noise box in dimension `n`.
    pub fn process_radius(&self, n: usize) -> f64 {
        self.rho_w * (n as f64).sqrt()
    }
}

/// Simulated run: `states` and `outputs` have one more entry than `inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub outputs: Vec<DVector<f64>>,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Zero-order-hold discretization `(exp(Ac Ts), ∫ exp(Ac s) Bc ds)`.
///
/// Both matrices come from one exponential of the augmented block matrix
/// `[[Ac, Bc], [0, 0]] * Ts`.
pub fn discretize(ac: &DMatrix<f64>, bc: &DMatrix<f64>, ts: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::InvalidInput(format!("sample time {ts} must be positive")));
    }
    let n = ac.nrows();
    check_dim("Ac columns", n, ac.ncols())?;
    check_dim("Bc rows", n, bc.nrows())?;
    if ac.iter().chain(bc.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("continuous-time matrices have non-finite entries".into()));
    }
    let m = bc.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(ac * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(bc * ts));
    let e = aug.exp();
    let ad = e.view((0, 0), (n, n)).into_owned();
    let bd = e.view((0, n), (n, m)).into_owned();
    if ad.iter().chain(bd.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix exponential overflowed".into()));
    }
    Ok((ad, bd))
}

/// Couples `q` copies of a node plant through a graph Laplacian:
/// `A = I_q ⊗ A_d - γ L ⊗ I_n`, `C = I_q ⊗ c_node`.
pub fn build_network(
    node: &LtiModel,
    laplacian: &DMatrix<f64>,
    gamma: f64,
    node_output_row: &RowDVector<f64>,
) -> Result<LtiModel> {
    let q = laplacian.nrows();
    if q == 0 {
        return Err(Error::InvalidInput("network needs at least one node".into()));
    }
    check_dim("Laplacian columns", q, laplacian.ncols())?;
    let n = node.n();
    check_dim("node output row", n, node_output_row.len())?;
    for (row, r) in laplacian.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if sum.abs() > 1e-9 {
            return Err(Error::InvalidLaplacian { row, sum });
        }
    }
    if (laplacian - laplacian.transpose()).amax() > 1e-12 {
        return Err(Error::InvalidInput("Laplacian must be symmetric".into()));
    }

    let eye_q = DMatrix::<f64>::identity(q, q);
    let mut a = eye_q.kronecker(node.a());
    if gamma != 0.0 {
        a -= (laplacian * gamma).kronecker(&DMatrix::<f64>::identity(n, n));
    }
    let b = eye_q.kronecker(node.b());
    let c = eye_q.kronecker(node_output_row);
    let model = LtiModel::new(a, b, c)?;
    Ok(match node.sample_time() {
        Some(ts) => model.with_sample_time(ts),
        None => model,
    })
}

/// Simulates the plant from `x0` under `inputs`, drawing bounded uniform
/// noise from streams keyed by `seed` and the time index.
pub fn simulate(
    model: &LtiModel,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    noise: &NoiseBounds,
    seed: u64,
) -> Result<Trajectory> {
    let (n, m, p) = (model.n(), model.m(), model.p());
    check_dim("initial state", n, x0.len())?;
    check_dim("measurement noise bounds", p, noise.rho_v.len())?;
    noise.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidInput("simulation horizon must be at least 1".into()));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial state has non-finite entries".into()));
    }
    for u in inputs {
        check_dim("input", m, u.len())?;
    }

    let mut states = Vec::with_capacity(inputs.len() + 1);
    let mut outputs = Vec::with_capacity(inputs.len() + 1);
    let mut x = x0.clone();
    for t in 0..=inputs.len() {
        let mut vrng = rng::keyed_rng(seed, stream::MEASUREMENT_NOISE, t as u64);
        let mut z = model.c() * &x;
        for (zi, &bound) in z.iter_mut().zip(&noise.rho_v) {
            *zi += uniform(&mut vrng, bound);
        }
        outputs.push(z);
        states.push(x.clone());
        if let Some(u) = inputs.get(t) {
            let mut wrng = rng::keyed_rng(seed, stream::PROCESS_NOISE, t as u64);
            let w = DVector::from_fn(n, |_, _| uniform(&mut wrng, noise.rho_w));
            x = model.propagate(&x, u) + w;
        }
    }
    Ok(Trajectory {
        states,
        inputs: inputs.to_vec(),
        outputs,
    })
}

pub(crate) fn uniform<R: Rng>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Spectral norm `λ_max(M'M)^{1/2}`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn taylor_exp(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
        let n = m.nrows();
        let mut sum = DMatrix::identity(n, n);
        let mut term = DMatrix::identity(n, n);
        for k in 1..terms {
            term = &term * m / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn zero_dynamics_integrate_input() {
        let (ad, bd) = discretize(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), 0.1).unwrap();
        assert_relative_eq!(ad, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert_relative_eq!(bd, DMatrix::identity(2, 2) * 0.1, epsilon = 1e-15);
    }

    #[test]
    fn double_integrator_matches_series() {
        let ac = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let bc = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let (ad, bd) = discretize(&ac, &bc, 1.0).unwrap();
        assert_relative_eq!(ad, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]), epsilon = 1e-14);
        assert_relative_eq!(bd, DMatrix::from_row_slice(2, 1, &[0.5, 1.0]), epsilon = 1e-14);

        // Series oracle on the augmented matrix.
        let mut aug = DMatrix::zeros(3, 3);
        aug.view_mut((0, 0), (2, 2)).copy_from(&ac);
        aug.view_mut((0, 2), (2, 1)).copy_from(&bc);
        let series = taylor_exp(&aug, 30);
        assert_relative_eq!(ad, series.view((0, 0), (2, 2)).into_owned(), epsilon = 1e-14);
        assert_relative_eq!(bd, series.view((0, 2), (2, 1)).into_owned(), epsilon = 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        let ac = DMatrix::from_element(1, 1, f64::NAN);
        assert!(discretize(&ac, &DMatrix::zeros(1, 0), 0.1).is_err());
        assert!(discretize(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 0), 0.0).is_err());
    }

    #[test]
    fn network_of_one_node_is_the_node() {
        let ad = taylor_exp(&DMatrix::from_row_slice(2, 2, &[0.0, 0.1, -0.1, 0.0]), 20);
        let node = LtiModel::autonomous(ad.clone(), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let row = RowDVector::from_row_slice(&[0.0, 1.0]);
        let net = build_network(&node, &DMatrix::zeros(1, 1), 0.3, &row).unwrap();
        assert_eq!(net.a(), &ad);
        assert_eq!(net.c(), &DMatrix::from_row_slice(1, 2, &[0.0, 1.0]));
    }

    #[test]
    fn uncoupled_network_is_block_diagonal() {
        let ad = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.2, 0.8]);
        let node = LtiModel::autonomous(ad.clone(), DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let lap = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        let row = RowDVector::from_row_slice(&[1.0, 0.0]);
        let net = build_network(&node, &lap, 0.0, &row).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let block = net.a().view((2 * i, 2 * j), (2, 2)).into_owned();
                if i == j {
                    assert_eq!(block, ad);
                } else {
                    assert!(block.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn rejects_non_laplacian() {
        let node = LtiModel::autonomous(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap();
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0]);
        let err = build_network(&node, &bad, 0.1, &RowDVector::from_row_slice(&[1.0])).unwrap_err();
        assert!(matches!(err, Error::InvalidLaplacian { row: 0, .. }));
    }

    #[test]
    fn noiseless_fixed_point() {
        let model = LtiModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 1),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        )
        .unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let inputs = vec![DVector::zeros(1); 5];
        let traj = simulate(&model, &x0, &inputs, &NoiseBounds::noiseless(1), 3).unwrap();
        assert_eq!(traj.states.len(), 6);
        for (x, z) in traj.states.iter().zip(&traj.outputs) {
            assert_eq!(x, &x0);
            assert_eq!(z[0], 3.0);
        }
    }

    #[test]
    fn simulation_is_deterministic_and_bounded() {
        let model = LtiModel::autonomous(
            DMatrix::from_row_slice(2, 2, &[0.9, 0.2, -0.2, 0.9]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        )
        .unwrap();
        let noise = NoiseBounds::new(0.1, vec![0.05], 5.0, 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 0.0]);
        let inputs = vec![DVector::zeros(0); 40];
        let a = simulate(&model, &x0, &inputs, &noise, 11).unwrap();
        let b = simulate(&model, &x0, &inputs, &noise, 11).unwrap();
        let c = simulate(&model, &x0, &inputs, &noise, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for t in 0..40 {
            let w = &a.states[t + 1] - model.a() * &a.states[t];
            assert!(w.amax() <= 0.1);
            let v = a.outputs[t][0] - a.states[t][0];
            assert!(v.abs() <= 0.05);
        }
    }

    #[test]
    fn model_document_round_trip_is_exact() {
        let model = LtiModel::new(
            DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-17, 7.0]),
            DMatrix::from_row_slice(2, 1, &[std::f64::consts::PI, 0.0]),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap()
        .with_sample_time(0.1);
        let text = model.to_json().unwrap();
        assert_eq!(LtiModel::from_json(&text).unwrap(), model);
        assert!(LtiModel::from_json(r#"{"n":1,"m":0,"p":1,"A":[1],"B":[],"C":[1],"extra":1}"#).is_err());
    }
}
