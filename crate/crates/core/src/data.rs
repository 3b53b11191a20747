//! Gaze-angle conventions, synthetic cross-domain data, label noise and CSV I/O.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Unit gaze vector for a (pitch, yaw) pair in radians.
pub fn pitchyaw_to_vec(pitch: f64, yaw: f64) -> [f64; 3] {
    [-pitch.cos() * yaw.sin(), -pitch.sin(), -pitch.cos() * yaw.cos()]
}

/// Inverse of [`pitchyaw_to_vec`] for unit vectors.
pub fn vec_to_pitchyaw(v: [f64; 3]) -> (f64, f64) {
    ((-v[1]).clamp(-1.0, 1.0).asin(), (-v[0]).atan2(-v[2]))
}

/// Angle between two 3D vectors in degrees.
pub fn angular_error_deg(a: [f64; 3], b: [f64; 3]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("angular error of a zero vector".into()));
    }
    let cos = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    Ok(cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Angular error between two (pitch, yaw) pairs.
pub fn pitchyaw_error_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    angular_error_deg(pitchyaw_to_vec(a.0, a.1), pitchyaw_to_vec(b.0, b.1))
        .expect("gaze vectors are unit length")
}

/// Clamps pitch to [-pi/2, pi/2] and wraps yaw into (-pi, pi].
pub fn canonicalize_pitchyaw(pitch: f64, yaw: f64) -> (f64, f64) {
    let p = pitch.clamp(-PI / 2.0, PI / 2.0);
    let mut y = yaw.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    if y == -PI {
        y = PI;
    }
    (p, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeSample {
    pub x: Vec<f64>,
    /// Observed (possibly corrupted) pitch/yaw in radians.
    pub y_obs: (f64, f64),
    /// Hidden ground truth.
    pub y_clean: (f64, f64),
    pub is_noisy: bool,
    pub domain_id: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GazeSample>,
}

impl Dataset {
    pub fn new(samples: Vec<GazeSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    /// Inputs of the listed samples as a `len(idx) x D_in` matrix.
    pub fn inputs(&self, idx: &[usize]) -> Result<Tensor> {
        let d = self.input_dim();
        let mut v = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            v.extend_from_slice(&self.samples[i].x);
        }
        Tensor::matrix(idx.len(), d, v)
    }

    /// Observed pitch/yaw of the listed samples, `len(idx) x 2`.
    pub fn observed(&self, idx: &[usize]) -> Result<Tensor> {
        let v = idx
            .iter()
            .flat_map(|&i| {
                let (p, y) = self.samples[i].y_obs;
                [p, y]
            })
            .collect();
        Tensor::matrix(idx.len(), 2, v)
    }

    /// Observed labels of the listed samples as 3D unit vectors, `len(idx) x 3`.
    pub fn observed_vectors(&self, idx: &[usize]) -> Result<Tensor> {
        let v = idx
            .iter()
            .flat_map(|&i| {
                let (p, y) = self.samples[i].y_obs;
                pitchyaw_to_vec(p, y)
            })
            .collect();
        Tensor::matrix(idx.len(), 3, v)
    }

    pub fn noise_mask(&self) -> Vec<bool> {
        self.samples.iter().map(|s| s.is_noisy).collect()
    }

    pub fn has_noise(&self) -> bool {
        self.samples.iter().any(|s| s.is_noisy)
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }
}

/// Style distribution and size of one synthetic domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub domain_id: String,
    pub n_samples: usize,
    /// Per-dimension mean of the Gaussian style vector.
    pub style_mean: Vec<f64>,
    pub style_std: f64,
    pub sample_seed: u64,
}

/// Shared generative mapping plus one domain to draw from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainConfig {
    pub domain: DomainSpec,
    pub pitch_range_deg: (f64, f64),
    pub yaw_range_deg: (f64, f64),
    pub input_dim: usize,
    pub style_dim: usize,
    /// Width of the hidden tanh layer of the embedding.
    pub embed_hidden: usize,
    /// Gain applied to the gaze block of the first embedding layer.
    pub gaze_gain: f64,
    /// Gain applied to the style block of the first embedding layer.
    pub style_gain: f64,
    pub obs_noise: f64,
    pub embedding_seed: u64,
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.domain.n_samples < 2 {
            return bad(format!("n_samples must be >= 2, got {}", self.domain.n_samples));
        }
        let (plo, phi) = self.pitch_range_deg;
        let (ylo, yhi) = self.yaw_range_deg;
        if !(plo < phi) || plo < -90.0 || phi > 90.0 {
            return bad(format!("pitch_range_deg ({plo}, {phi}) invalid"));
        }
        if !(ylo < yhi) || ylo <= -180.0 || yhi > 180.0 {
            return bad(format!("yaw_range_deg ({ylo}, {yhi}) invalid"));
        }
        if self.domain.style_mean.len() != self.style_dim {
            return bad(format!(
                "style_mean has {} entries, style_dim is {}",
                self.domain.style_mean.len(),
                self.style_dim
            ));
        }
        if self.input_dim == 0 || self.embed_hidden == 0 {
            return bad("input_dim and embed_hidden must be positive".into());
        }
        if !(self.domain.style_std >= 0.0) || !(self.obs_noise >= 0.0) {
            return bad("style_std and obs_noise must be non-negative".into());
        }
        if self.domain.domain_id.is_empty()
            || self.domain.domain_id.contains([',', '\n', '\r'])
        {
            return bad(format!("domain_id {:?} not CSV-safe", self.domain.domain_id));
        }
        Ok(())
    }
}

struct Embedding {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl Embedding {
    fn new(cfg: &SyntheticDomainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding_seed);
        let fan_in = 3 + cfg.style_dim;
        let h = cfg.embed_hidden;
        let mut w1 = Vec::with_capacity(h * fan_in);
        for _ in 0..h {
            for c in 0..fan_in {
                let z: f64 = StandardNormal.sample(&mut rng);
                let gain = if c < 3 { cfg.gaze_gain } else { cfg.style_gain };
                w1.push(z * gain / (fan_in as f64).sqrt());
            }
        }
        let b1 = (0..h).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w2 = (0..cfg.input_dim * h)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / (h as f64).sqrt()
            })
            .collect();
        let b2 = (0..cfg.input_dim).map(|_| rng.random_range(-0.1..0.1)).collect();
        Self { w1, b1, w2, b2 }
    }

    fn apply(&self, input: &[f64], out_dim: usize) -> Vec<f64> {
        let h = self.b1.len();
        let fan_in = input.len();
        let hidden: Vec<f64> = (0..h)
            .map(|r| {
                let row = &self.w1[r * fan_in..(r + 1) * fan_in];
                (row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + self.b1[r]).tanh()
            })
            .collect();
        (0..out_dim)
            .map(|o| {
                let row = &self.w2[o * h..(o + 1) * h];
                row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>() + self.b2[o]
            })
            .collect()
    }
}

/// Draws one synthetic domain. Gaze is sampled uniformly in the configured
/// ranges; the embedding depends only on `embedding_seed`, so domains that
/// share it differ only through their style distributions.
pub fn generate_domain(cfg: &SyntheticDomainConfig) -> Result<Dataset> {
    cfg.validate()?;
    let emb = Embedding::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.domain.sample_seed);
    let obs = Normal::new(0.0, cfg.obs_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let style =
        Normal::new(0.0, cfg.domain.style_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let (plo, phi) = cfg.pitch_range_deg;
    let (ylo, yhi) = cfg.yaw_range_deg;
    let mut samples = Vec::with_capacity(cfg.domain.n_samples);
    let mut input = vec![0.0; 3 + cfg.style_dim];
    for _ in 0..cfg.domain.n_samples {
        let pitch = rng.random_range(plo..=phi).to_radians();
        let yaw = rng.random_range(ylo..=yhi).to_radians();
        let g = pitchyaw_to_vec(pitch, yaw);
        input[..3].copy_from_slice(&g);
        for (k, m) in cfg.domain.style_mean.iter().enumerate() {
            input[3 + k] = m + style.sample(&mut rng);
        }
        let mut x = emb.apply(&input, cfg.input_dim);
        for v in &mut x {
            *v += obs.sample(&mut rng);
        }
        samples.push(GazeSample {
            x,
            y_obs: (pitch, yaw),
            y_clean: (pitch, yaw),
            is_noisy: false,
            domain_id: cfg.domain.domain_id.clone(),
        });
    }
    Ok(Dataset::new(samples))
}

/// Perturbs exactly `round(ratio * N)` randomly chosen labels with independent
/// Gaussian noise of `sigma_deg` on pitch and yaw, then canonicalizes them.
pub fn inject_label_noise(
    mut data: Dataset,
    ratio: f64,
    sigma_deg: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("noise ratio {ratio} outside [0, 1]")));
    }
    if !(sigma_deg >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma_deg {sigma_deg} negative")));
    }
    let n = data.len();
    let k = (ratio * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = index::sample(&mut rng, n, k).into_vec();
    let noise = Normal::new(0.0, sigma_deg.to_radians()).expect("sigma checked");
    for i in chosen {
        let s = &mut data.samples[i];
        let p = s.y_obs.0 + noise.sample(&mut rng);
        let y = s.y_obs.1 + noise.sample(&mut rng);
        s.y_obs = canonicalize_pitchyaw(p, y);
        s.is_noisy = true;
    }
    Ok(data)
}

/// Full synthetic scenario: a shared embedding, a noisy source domain, a
/// clean validation split of the source distribution and a shifted target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub pitch_range_deg: (f64, f64),
    pub yaw_range_deg: (f64, f64),
    pub input_dim: usize,
    pub style_dim: usize,
    pub embed_hidden: usize,
    pub gaze_gain: f64,
    pub style_gain: f64,
    pub obs_noise: f64,
    pub embedding_seed: u64,
    pub source: DomainSpec,
    pub source_val: DomainSpec,
    pub target: DomainSpec,
    pub noise_ratio: f64,
    pub noise_sigma_deg: f64,
    pub noise_seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        let spec = |id: &str, n, mean: f64, seed| DomainSpec {
            domain_id: id.into(),
            n_samples: n,
            style_mean: vec![mean; 4],
            style_std: 1.0,
            sample_seed: seed,
        };
        Self {
            pitch_range_deg: (-40.0, 40.0),
            yaw_range_deg: (-90.0, 90.0),
            input_dim: 16,
            style_dim: 4,
            embed_hidden: 32,
            gaze_gain: 3.0,
            style_gain: 1.0,
            obs_noise: 0.02,
            embedding_seed: 7,
            source: spec("source", 4000, 0.0, 100),
            source_val: spec("source_val", 1000, 0.0, 101),
            target: spec("target", 2000, 0.5, 102),
            noise_ratio: 0.2,
            noise_sigma_deg: 60.0,
            noise_seed: 103,
        }
    }
}

/// Generated splits of a [`GenerateConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub source: Dataset,
    pub source_val: Dataset,
    pub target: Dataset,
}

impl GenerateConfig {
    pub fn domain_config(&self, domain: &DomainSpec) -> SyntheticDomainConfig {
        SyntheticDomainConfig {
            domain: domain.clone(),
            pitch_range_deg: self.pitch_range_deg,
            yaw_range_deg: self.yaw_range_deg,
            input_dim: self.input_dim,
            style_dim: self.style_dim,
            embed_hidden: self.embed_hidden,
            gaze_gain: self.gaze_gain,
            style_gain: self.style_gain,
            obs_noise: self.obs_noise,
            embedding_seed: self.embedding_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for d in [&self.source, &self.source_val, &self.target] {
            self.domain_config(d).validate()?;
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(Error::InvalidConfig(format!("noise_ratio {} outside [0, 1]", self.noise_ratio)));
        }
        if !(self.noise_sigma_deg >= 0.0 && self.noise_sigma_deg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma_deg must be finite and >= 0, got {}",
                self.noise_sigma_deg
            )));
        }
        Ok(())
    }

    /// Draws all three splits; label noise is injected into the source only.
    pub fn generate(&self) -> Result<Scenario> {
        let source = generate_domain(&self.domain_config(&self.source))?;
        let source = inject_label_noise(source, self.noise_ratio, self.noise_sigma_deg, self.noise_seed)?;
        Ok(Scenario {
            source,
            source_val: generate_domain(&self.domain_config(&self.source_val))?,
            target: generate_domain(&self.domain_config(&self.target))?,
        })
    }
}

fn header(d: usize) -> Vec<String> {
    let mut h = vec!["domain_id".to_string()];
    h.extend((0..d).map(|i| format!("x_{i}")));
    h.extend(
        ["pitch_obs", "yaw_obs", "pitch_clean", "yaw_clean", "is_noisy"]
            .iter()
            .map(|s| s.to_string()),
    );
    h
}

/// Serializes to CSV. `f64` values use the shortest round-trip representation.
pub fn dataset_to_csv(data: &Dataset) -> Result<String> {
    let d = data.input_dim();
    let mut out = header(d).join(",");
    out.push('\n');
    for (i, s) in data.samples.iter().enumerate() {
        if s.x.len() != d {
            return Err(Error::InvalidShape(format!("sample {i} has {} inputs, expected {d}", s.x.len())));
        }
        if s.domain_id.is_empty() || s.domain_id.contains([',', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!("domain_id {:?} not CSV-safe", s.domain_id)));
        }
        out.push_str(&s.domain_id);
        for v in &s.x {
            write!(out, ",{v:?}").unwrap();
        }
        let (po, yo) = s.y_obs;
        let (pc, yc) = s.y_clean;
        writeln!(out, ",{po:?},{yo:?},{pc:?},{yc:?},{}", u8::from(s.is_noisy)).unwrap();
    }
    Ok(out)
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, head) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    let cols: Vec<&str> = head.split(',').collect();
    let d = cols.iter().filter(|c| c.starts_with("x_")).count();
    let expected = header(d);
    for name in &expected {
        if !cols.contains(&name.as_str()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing column {name}"),
            });
        }
    }
    if cols != expected {
        let pos = cols
            .iter()
            .zip(&expected)
            .position(|(a, b)| a != b)
            .unwrap_or(cols.len().min(expected.len()));
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "header mismatch at column {pos}: expected {:?}, found {:?}",
                expected.get(pos),
                cols.get(pos)
            ),
        });
    }
    let mut samples = Vec::new();
    for (li, line) in lines {
        let lineno = li + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", expected.len(), fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            fields[k].parse::<f64>().map_err(|e| Error::Parse {
                line: lineno,
                message: format!("column {}: {e}", expected[k]),
            })
        };
        let x = (1..=d).map(num).collect::<Result<Vec<_>>>()?;
        let is_noisy = match fields[d + 5] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("is_noisy must be 0 or 1, found {other:?}"),
                })
            }
        };
        samples.push(GazeSample {
            x,
            y_obs: (num(d + 1)?, num(d + 2)?),
            y_clean: (num(d + 3)?, num(d + 4)?),
            is_noisy,
            domain_id: fields[0].to_string(),
        });
    }
    Ok(Dataset::new(samples))
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset_to_csv(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_csv(&fs::read_to_string(path)?)
}
