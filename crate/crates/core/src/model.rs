//! Feature extractor, regressor, projection head and prototype bank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub proj_hidden: usize,
    pub proj: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input: 16,
            hidden: 64,
            feature: 32,
            proj_hidden: 32,
            proj: 16,
        }
    }
}

/// Affine map `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[fan_in, fan_out], bound, rng),
            bias: Tensor::uniform(&[1, fan_out], bound, rng),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

/// Learnable network parameters (everything except the prototypes).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub dims: ModelDims,
    /// Three tanh layers: input -> hidden -> hidden -> feature.
    pub backbone: Vec<Linear>,
    /// feature -> (pitch, yaw).
    pub regressor: Linear,
    /// feature -> proj_hidden (tanh) -> proj.
    pub projection: Vec<Linear>,
}

impl ModelState {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = vec![
            Linear::init(dims.input, dims.hidden, &mut rng),
            Linear::init(dims.hidden, dims.hidden, &mut rng),
            Linear::init(dims.hidden, dims.feature, &mut rng),
        ];
        let regressor = Linear::init(dims.feature, 2, &mut rng);
        let projection = vec![
            Linear::init(dims.feature, dims.proj_hidden, &mut rng),
            Linear::init(dims.proj_hidden, dims.proj, &mut rng),
        ];
        Self {
            dims,
            backbone,
            regressor,
            projection,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.regressor))
            .chain(self.projection.iter())
    }

    /// Parameters in a fixed order: backbone, regressor, projection; weight before bias.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.regressor))
            .chain(self.projection.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`ModelState::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.backbone.len() {
            names.push(format!("backbone.{i}.weight"));
            names.push(format!("backbone.{i}.bias"));
        }
        names.push("regressor.weight".into());
        names.push("regressor.bias".into());
        for i in 0..self.projection.len() {
            names.push(format!("projection.{i}.weight"));
            names.push(format!("projection.{i}.bias"));
        }
        names
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Inserts every parameter into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut bind_layer = |l: &Linear| LinearVars {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        };
        ModelVars {
            dims: self.dims,
            backbone: self.backbone.iter().map(&mut bind_layer).collect(),
            regressor: bind_layer(&self.regressor),
            projection: self.projection.iter().map(&mut bind_layer).collect(),
        }
    }

    /// Graph-free prediction of (pitch, yaw) for a batch of inputs.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = vars.feature_extract(&mut g, xv)?;
        let out = vars.regress(&mut g, f)?;
        Ok(g.value(out).clone())
    }

    /// Graph-free features and projected embeddings.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = vars.feature_extract(&mut g, xv)?;
        let z = vars.project(&mut g, f)?;
        Ok((g.value(f).clone(), g.value(z).clone()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let rows = g.value(x).dims2()?.0;
        let xw = g.matmul(x, self.weight)?;
        let ones = g.constant(Tensor::filled(&[rows, 1], 1.0));
        let b = g.matmul(ones, self.bias)?;
        g.add(xw, b)
    }
}

/// Graph handles for every parameter of a [`ModelState`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    dims: ModelDims,
    pub backbone: Vec<LinearVars>,
    pub regressor: LinearVars,
    pub projection: Vec<LinearVars>,
}

impl ModelVars {
    /// Reassembles handles from a flat list in [`ModelState::params`] order.
    pub fn from_vars(dims: ModelDims, vars: &[Var]) -> Result<Self> {
        if vars.len() != 12 {
            return Err(Error::InvalidArgument(format!("expected 12 parameter handles, got {}", vars.len())));
        }
        let layer = |i: usize| LinearVars {
            weight: vars[2 * i],
            bias: vars[2 * i + 1],
        };
        Ok(Self {
            dims,
            backbone: (0..3).map(layer).collect(),
            regressor: layer(3),
            projection: (4..6).map(layer).collect(),
        })
    }

    fn all(&self) -> Vec<Var> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.regressor))
            .chain(self.projection.iter())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Gradients in [`ModelState::params`] order; unreached parameters get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.all()
            .into_iter()
            .map(|v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
            })
            .collect()
    }

    fn check_width(&self, g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
        let (_, c) = g.value(x).dims2()?;
        if c != want {
            return Err(Error::InvalidShape(format!("{what}: width {c}, expected {want}")));
        }
        Ok(())
    }

    /// `f = F(x)`, a stack of tanh layers.
    pub fn feature_extract(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.check_width(g, x, self.dims.input, "feature_extract")?;
        let mut h = x;
        for layer in &self.backbone {
            let a = layer.forward(g, h)?;
            h = g.tanh(a)?;
        }
        Ok(h)
    }

    /// `G(f)`: unbounded (pitch, yaw) in radians.
    pub fn regress(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.check_width(g, f, self.dims.feature, "regress")?;
        self.regressor.forward(g, f)
    }

    /// `z = Norm(MLP(f))`, rows on the unit hypersphere.
    pub fn project(&self, g: &mut Graph, f: Var) -> Result<Var> {
        self.check_width(g, f, self.dims.feature, "project")?;
        let last = self.projection.len() - 1;
        let mut h = f;
        for (i, layer) in self.projection.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i != last {
                h = g.tanh(h)?;
            }
        }
        g.row_l2_normalize(h)
    }
}

/// Unit-norm prototypes spanning the semantic manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `K x D_z`, unit rows.
    pub mu: Tensor,
    pub alpha: f64,
    pub tau: f64,
}

impl PrototypeBank {
    /// Normalized standard-normal draws, i.e. uniform on the sphere.
    pub fn random(k: usize, dim: usize, alpha: f64, tau: f64, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need K >= 2 prototypes, got {k}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..k * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let raw = Tensor::matrix(k, dim, v)?;
        Self::new(kernels::row_l2_normalize(&raw)?, alpha, tau)
    }

    pub fn new(mu: Tensor, alpha: f64, tau: f64) -> Result<Self> {
        let (k, _) = mu.dims2()?;
        if k < 2 {
            return Err(Error::InvalidConfig(format!("need K >= 2 prototypes, got {k}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
        }
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {tau}")));
        }
        let norms = kernels::row_norms(&mu, "prototypes")?;
        if let Some(n) = norms.iter().find(|n| (*n - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidConfig(format!("prototype norm {n} is not 1")));
        }
        Ok(Self { mu, alpha, tau })
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    fn check_z(&self, z: &Tensor) -> Result<()> {
        let (_, d) = z.dims2()?;
        if d != self.dim() {
            return Err(Error::InvalidShape(format!(
                "embedding width {d}, prototypes have {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// Soft assignments `softmax(z mu^T / tau)`, `B x K`.
    pub fn assign(&self, z: &Tensor) -> Result<Tensor> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        self.check_z(z)?;
        let logits = kernels::matmul(z, &kernels::transpose(&self.mu)?)?;
        kernels::row_softmax(&kernels::scale(&logits, 1.0 / self.tau))
    }

    /// Moves each prototype toward the assignment-weighted mean of `z`, then
    /// renormalizes. Prototypes with no assignment mass are left alone.
    pub fn ema_update(&mut self, z: &Tensor, r: &Tensor) -> Result<()> {
        self.check_z(z)?;
        let (b, k) = r.dims2()?;
        if b != z.rows() || k != self.k() {
            return Err(Error::InvalidShape(format!(
                "assignments {b}x{k} for {} embeddings and {} prototypes",
                z.rows(),
                self.k()
            )));
        }
        let d = self.dim();
        let alpha = self.alpha;
        for kk in 0..k {
            let mass: f64 = (0..b).map(|i| r.get(i, kk)).sum();
            if mass <= 0.0 {
                continue;
            }
            let mut mean = vec![0.0; d];
            for i in 0..b {
                let w = r.get(i, kk);
                for (m, zv) in mean.iter_mut().zip(z.row(i)) {
                    *m += w * zv;
                }
            }
            let row = &mut self.mu.values_mut()[kk * d..(kk + 1) * d];
            for (mu, m) in row.iter_mut().zip(&mean) {
                *mu = alpha * *mu + (1.0 - alpha) * m / mass;
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::DegenerateInput(format!("prototype {kk} collapsed to zero")));
            }
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        Ok(())
    }

    /// Manifold coordinates `p = z mu^T` with the prototypes held constant.
    pub fn embed_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_z(g.value(z))?;
        let mu_t = g.constant(kernels::transpose(&self.mu)?);
        g.matmul(z, mu_t)
    }

    /// Graph-free [`PrototypeBank::embed_graph`].
    pub fn embed(&self, z: &Tensor) -> Result<Tensor> {
        self.check_z(z)?;
        kernels::matmul(z, &kernels::transpose(&self.mu)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_layer_identity() -> ModelState {
        let dims = ModelDims {
            input: 3,
            hidden: 3,
            feature: 3,
            proj_hidden: 3,
            proj: 3,
        };
        let mut m = ModelState::init(dims, 0);
        for l in m.backbone.iter_mut().chain(m.projection.iter_mut()) {
            *l = Linear::zeros(3, 3);
        }
        m.regressor = Linear::zeros(3, 2);
        m
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let m = one_layer_identity();
        let mut g = Graph::new();
        let v = m.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap());
        let f = v.feature_extract(&mut g, x).unwrap();
        assert_eq!(g.value(f).values(), &[0.0; 3]);
        let y = v.regress(&mut g, f).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_is_tanh() {
        let mut m = one_layer_identity();
        let eye = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        m.backbone.truncate(1);
        m.backbone[0].weight = eye;
        let mut g = Graph::new();
        let v = m.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap());
        let f = v.feature_extract(&mut g, x).unwrap();
        assert_eq!(g.value(f).values(), &[1f64.tanh(), 0.0, 0.0]);
    }

    #[test]
    fn regressor_bias_passes_through() {
        let mut m = one_layer_identity();
        m.regressor.bias = Tensor::from_rows(&[[0.1, -0.2]]).unwrap();
        let y = m.predict(&Tensor::from_rows(&[[0.5, 0.5, 0.5]]).unwrap()).unwrap();
        assert_eq!(y.values(), &[0.1, -0.2]);
    }

    #[test]
    fn equal_inputs_equal_outputs_and_shape_errors() {
        let m = ModelState::init(ModelDims::default(), 4);
        let row = [0.3; 16];
        let x = Tensor::from_rows(&[row, row]).unwrap();
        let y = m.predict(&x).unwrap();
        assert_eq!(y.row(0), y.row(1));
        let (f, z) = m.embed(&x).unwrap();
        assert_eq!(f.row(0), f.row(1));
        for i in 0..2 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let bad = Tensor::zeros(&[2, 5]);
        assert!(matches!(m.predict(&bad), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn projection_normalizes_and_is_scale_invariant() {
        let mut m = one_layer_identity();
        let eye = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        m.projection = vec![Linear::zeros(3, 3), Linear::zeros(3, 3)];
        // a zero pre-normalization row is degenerate
        let mut g = Graph::new();
        let v = m.bind(&mut g, false);
        let f = g.constant(Tensor::from_rows(&[[3.0, 4.0, 0.0]]).unwrap());
        assert!(matches!(v.project(&mut g, f), Err(Error::DegenerateInput(_))));

        m.projection = vec![Linear { weight: eye.clone(), bias: Tensor::zeros(&[1, 3]) }];
        let mut g = Graph::new();
        let v = m.bind(&mut g, false);
        let f = g.constant(Tensor::from_rows(&[[3.0, 4.0, 0.0], [6.0, 8.0, 0.0]]).unwrap());
        let z = v.project(&mut g, f).unwrap();
        let z = g.value(z);
        assert!((z.get(0, 0) - 0.6).abs() < 1e-15 && (z.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn assignment_examples() {
        let mu = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let bank = PrototypeBank::new(mu.clone(), 0.95, 1.0).unwrap();
        let r = bank.assign(&Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert!((r.get(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((r.get(0, 0) - 0.7311).abs() < 1e-4);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = bank.assign(&Tensor::from_rows(&[[h, h]]).unwrap()).unwrap();
        assert!((r.get(0, 0) - 0.5).abs() < 1e-15);

        let sharp = PrototypeBank::new(mu.clone(), 0.95, 0.01).unwrap();
        let r = sharp.assign(&Tensor::from_rows(&[[0.8, 0.6]]).unwrap()).unwrap();
        assert!(r.get(0, 0) > 0.99);

        let mut bad = bank.clone();
        bad.tau = 0.0;
        assert!(matches!(bad.assign(&mu), Err(Error::InvalidConfig(_))));
        assert!(PrototypeBank::new(mu, 0.95, -1.0).is_err());
    }

    #[test]
    fn ema_examples() {
        let mu = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let mut bank = PrototypeBank::new(mu, 0.95, 0.1).unwrap();
        // weighted mean for prototype 0 is (0, 1); prototype 1 sees itself
        let z = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let r = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        bank.ema_update(&z, &r).unwrap();
        let n = (0.95f64 * 0.95 + 0.05 * 0.05).sqrt();
        assert!((n - 0.951314).abs() < 1e-6);
        assert!((bank.mu.get(0, 0) - 0.95 / n).abs() < 1e-15);
        assert!((bank.mu.get(0, 0) - 0.99862).abs() < 1e-5);
        assert!((bank.mu.get(0, 1) - 0.05256).abs() < 1e-5);
        // zero mass: prototype 1 unchanged
        assert_eq!(bank.mu.row(1), &[0.0, 1.0]);

        // fixed point
        let z = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let r = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let before = bank.mu.clone();
        bank.ema_update(&z, &r).unwrap();
        assert_eq!(bank.mu, before);

        assert!(matches!(
            bank.ema_update(&z, &Tensor::zeros(&[1, 3])),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn random_bank_is_unit_and_reproducible() {
        let a = PrototypeBank::random(12, 16, 0.95, 0.1, 5).unwrap();
        let b = PrototypeBank::random(12, 16, 0.95, 0.1, 5).unwrap();
        assert_eq!(a, b);
        assert!(PrototypeBank::random(1, 16, 0.95, 0.1, 5).is_err());
    }

    #[test]
    fn manifold_embedding_examples() {
        let mu = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let bank = PrototypeBank::new(mu, 0.95, 0.1).unwrap();
        let p = bank.embed(&Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(p.values(), &[0.0, 1.0, 0.0]);
        let bank = PrototypeBank::random(5, 3, 0.95, 0.1, 2).unwrap();
        let p = bank.embed(&bank.mu.select_rows(&[0]).unwrap()).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.values().iter().all(|v| v.abs() <= 1.0 + 1e-12));
        assert!(bank.embed(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn embed_graph_gives_no_prototype_gradient_path() {
        let bank = PrototypeBank::random(4, 3, 0.95, 0.1, 2).unwrap();
        let mut g = Graph::new();
        let z = g.param(Tensor::from_rows(&[[0.6, 0.8, 0.0]]).unwrap());
        let p = bank.embed_graph(&mut g, z).unwrap();
        let s = g.mean_all(p).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(z).is_some());
    }
}
