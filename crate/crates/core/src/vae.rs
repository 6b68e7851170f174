//! Small convolutional VAE compressing single-channel volumes 4x per axis
//! into a 4-channel diagonal-Gaussian latent, plus the `.lat` latent cache.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, BoundParams, Parameters, Tape, Tensor, Var};
use crate::volume::Volume;

/// Spatial downsampling factor per axis.
pub const COMPRESSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub latent_channels: usize,
    /// Width of the full-resolution stage; halving stages double it.
    pub base_channels: usize,
    pub beta_kl: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            base_channels: 8,
            beta_kl: 1e-3,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.base_channels == 0 || !(self.beta_kl >= 0.0) {
            return Err(Error::ConfigInvalid(format!("bad VAE config {self:?}")));
        }
        Ok(())
    }

    pub fn latent_extents(&self, extents: [usize; 3]) -> Result<[usize; 3]> {
        if extents.iter().any(|&e| e == 0 || e % COMPRESSION != 0) {
            return Err(Error::IndivisibleExtent(format!(
                "volume extents {extents:?} not divisible by {COMPRESSION}"
            )));
        }
        Ok(extents.map(|e| e / COMPRESSION))
    }

    fn widths(&self) -> [usize; 3] {
        let b = self.base_channels;
        [b, 2 * b, 4 * b]
    }
}

/// Diagonal Gaussian stored as mean and log-variance, `[B, C, d, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        mu.expect_same_shape(&logvar)?;
        Ok(Self { mu, logvar })
    }

    pub fn sigma(&self) -> Tensor {
        self.logvar.map(|lv| (0.5 * lv).exp())
    }

    /// `mu + sigma * eps` with `eps ~ N(0, I)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let eps = Tensor::randn(self.mu.shape().to_vec(), 1.0, rng);
        reparameterize_with(&self.mu, &self.logvar, &eps).expect("shapes checked at construction")
    }

    /// Closed-form `KL(q || N(0, I))` summed over elements.
    pub fn kl(&self) -> f64 {
        self.mu
            .data()
            .iter()
            .zip(self.logvar.data())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum()
    }
}

/// `mu + exp(logvar / 2) * eps` for a given noise tensor.
pub fn reparameterize_with(mu: &Tensor, logvar: &Tensor, eps: &Tensor) -> Result<Tensor> {
    mu.expect_same_shape(eps)?;
    let sigma = logvar.map(|lv| (0.5 * lv).exp());
    let scaled = sigma.zip_map(eps, |s, e| s * e)?;
    mu.zip_map(&scaled, |m, s| m + s)
}

/// Differentiable reparameterization; `eps` enters as a constant so the
/// gradient reaches `mu` and `logvar` only.
pub fn reparameterize(mu: &Var, logvar: &Var, eps: &Tensor) -> Result<Var> {
    let sigma = ops::exp(&ops::scale(logvar, 0.5));
    let noise = mu.tape().constant(eps.clone());
    ops::add(mu, &ops::mul(&sigma, &noise)?)
}

/// Differentiable `0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_normal(mu: &Var, logvar: &Var) -> Result<Var> {
    let terms = ops::sub(&ops::add(&ops::mul(mu, mu)?, &ops::exp(logvar))?, logvar)?;
    let n = mu.value().numel() as f64;
    Ok(ops::scale(&ops::add_scalar(&ops::sum(&terms), -n), 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: VaeConfig,
}

impl Vae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    fn layers(&self) -> Vec<(&'static str, usize, usize)> {
        let [a, b, c] = self.config.widths();
        let l = self.config.latent_channels;
        vec![
            ("enc.in", 1, a),
            ("enc.down1", a, b),
            ("enc.mid1", b, b),
            ("enc.down2", b, c),
            ("enc.mid2", c, c),
            ("enc.out", c, 2 * l),
            ("dec.in", l, c),
            ("dec.mid2", c, c),
            ("dec.up2", c, b),
            ("dec.mid1", b, b),
            ("dec.up1", b, a),
            ("dec.out", a, 1),
        ]
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Parameters> {
        let mut p = Parameters::new();
        for (name, cin, cout) in self.layers() {
            let std = (2.0 / (cin * 27) as f64).sqrt();
            let std = if name.ends_with(".out") { 0.5 * std } else { std };
            p.insert_randn(format!("{name}.w"), &[cout, cin, 3, 3, 3], std, rng)?;
            p.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
        }
        Ok(p)
    }

    fn conv(p: &BoundParams, name: &str, x: &Var, stride: usize) -> Result<Var> {
        let y = ops::conv3d(x, p.get(&format!("{name}.w"))?, stride, 1)?;
        ops::add_bias(&y, p.get(&format!("{name}.b"))?)
    }

    fn conv_act(p: &BoundParams, name: &str, x: &Var, stride: usize) -> Result<Var> {
        Ok(ops::silu(&Self::conv(p, name, x, stride)?))
    }

    /// `x[B, 1, D, H, W]` to `(mu, logvar)`, each `[B, C, D/4, H/4, W/4]`.
    pub fn encode_var(&self, p: &BoundParams, x: &Var) -> Result<(Var, Var)> {
        let s = x.shape();
        if s.len() != 5 || s[1] != 1 {
            return Err(shape_err(format!("VAE encoder expects [B, 1, D, H, W], got {s:?}")));
        }
        self.config.latent_extents([s[2], s[3], s[4]])?;
        let h = Self::conv_act(p, "enc.in", x, 1)?;
        let h = Self::conv_act(p, "enc.down1", &h, 2)?;
        let h = Self::conv_act(p, "enc.mid1", &h, 1)?;
        let h = Self::conv_act(p, "enc.down2", &h, 2)?;
        let h = Self::conv_act(p, "enc.mid2", &h, 1)?;
        let h = Self::conv(p, "enc.out", &h, 1)?;
        let l = self.config.latent_channels;
        Ok((ops::slice_channels(&h, 0, l)?, ops::slice_channels(&h, l, l)?))
    }

    /// `z[B, C, d, h, w]` to `[B, 1, 4d, 4h, 4w]`.
    pub fn decode_var(&self, p: &BoundParams, z: &Var) -> Result<Var> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.config.latent_channels {
            return Err(shape_err(format!(
                "VAE decoder expects [B, {}, d, h, w], got {s:?}",
                self.config.latent_channels
            )));
        }
        let h = Self::conv_act(p, "dec.in", z, 1)?;
        let h = Self::conv_act(p, "dec.mid2", &h, 1)?;
        let h = Self::conv_act(p, "dec.up2", &ops::upsample_nearest2x(&h)?, 1)?;
        let h = Self::conv_act(p, "dec.mid1", &h, 1)?;
        let h = Self::conv_act(p, "dec.up1", &ops::upsample_nearest2x(&h)?, 1)?;
        Self::conv(p, "dec.out", &h, 1)
    }

    /// Mean-squared reconstruction of a sampled latent plus
    /// `beta_kl * KL / B`.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        tape: &Tape,
        p: &BoundParams,
        x: &Tensor,
        beta_kl: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let xv = tape.constant(x.clone());
        let (mu, logvar) = self.encode_var(p, &xv)?;
        let eps = Tensor::randn(mu.shape(), 1.0, rng);
        let z = reparameterize(&mu, &logvar, &eps)?;
        let recon = ops::mse_loss(&self.decode_var(p, &z)?, &xv)?;
        if beta_kl == 0.0 {
            return Ok(recon);
        }
        let batch = x.shape()[0] as f64;
        let kl = ops::scale(&kl_normal(&mu, &logvar)?, beta_kl / batch);
        ops::add(&recon, &kl)
    }

    pub fn encode(&self, params: &Parameters, x: &Tensor) -> Result<GaussianPosterior> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let (mu, lv) = self.encode_var(&p, &tape.constant(x.clone()))?;
        GaussianPosterior::new(mu.to_tensor(), lv.to_tensor())
    }

    pub fn decode(&self, params: &Parameters, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        Ok(self.decode_var(&p, &tape.constant(z.clone()))?.to_tensor())
    }

    pub fn encode_volume(&self, params: &Parameters, v: &Volume) -> Result<GaussianPosterior> {
        self.encode(params, &v.to_tensor())
    }

    pub fn decode_volume(&self, params: &Parameters, z: &Tensor) -> Result<Volume> {
        Volume::from_tensor(&self.decode(params, z)?)
    }
}

/// Which input sequence a cached latent belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    T1w,
    Flair,
    T1c,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::T1w, Role::Flair, Role::T1c];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::T1w => "t1w",
            Role::Flair => "flair",
            Role::T1c => "t1c",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct LatHeader {
    format: String,
    case_id: String,
    role: Role,
    /// `[C, d, h, w]`
    geometry: [usize; 4],
}

const LAT_TAG: &str = "lat/1";

/// Cached posterior of one case and role.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentRecord {
    pub case_id: String,
    pub role: Role,
    pub posterior: GaussianPosterior,
}

impl LatentRecord {
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let s = self.posterior.mu.shape();
        let header = LatHeader {
            format: LAT_TAG.into(),
            case_id: self.case_id.clone(),
            role: self.role,
            geometry: [s[1], s[2], s[3], s[4]],
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for t in [&self.posterior.mu, &self.posterior.logvar] {
            for &x in t.data() {
                w.write_f64::<LittleEndian>(x)?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)
            .map_err(|e| Error::Format(format!("lat header: {e}")))?;
        let h: LatHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::BadMagic(format!("lat header: {e}")))?;
        if h.format != LAT_TAG {
            return Err(Error::BadMagic(format!("lat format tag {:?}", h.format)));
        }
        let shape = vec![1, h.geometry[0], h.geometry[1], h.geometry[2], h.geometry[3]];
        let n: usize = h.geometry.iter().product();
        let mut read = |what: &str| -> Result<Tensor> {
            let mut d = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut d)
                .map_err(|e| Error::Format(format!("lat {what}: {e}")))?;
            Tensor::new(shape.clone(), d)
        };
        let mu = read("mu")?;
        let logvar = read("logvar")?;
        if r.read(&mut [0u8]).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after lat payload".into()));
        }
        Ok(Self {
            case_id: h.case_id,
            role: h.role,
            posterior: GaussianPosterior::new(mu, logvar)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DataMissing(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Self::read(&mut BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::tensor::grad_check;

    #[test]
    fn kl_examples() {
        let post = |m: Vec<f64>, lv: Vec<f64>| {
            let n = m.len();
            GaussianPosterior::new(Tensor::new([n], m).unwrap(), Tensor::new([n], lv).unwrap()).unwrap()
        };
        assert_eq!(post(vec![0.0; 5], vec![0.0; 5]).kl(), 0.0);
        assert_eq!(post(vec![1.0], vec![0.0]).kl(), 0.5);
        let mut rng = stream(1, &[]);
        for _ in 0..20 {
            let p = GaussianPosterior::new(Tensor::randn([6], 1.0, &mut rng), Tensor::randn([6], 1.0, &mut rng))
                .unwrap();
            assert!(p.kl() >= 0.0);
        }

        let tape = Tape::new();
        let mu = tape.constant(Tensor::new([2], vec![1.0, -0.5]).unwrap());
        let lv = tape.constant(Tensor::new([2], vec![0.3, -0.2]).unwrap());
        let want = post(vec![1.0, -0.5], vec![0.3, -0.2]).kl();
        assert!((kl_normal(&mu, &lv).unwrap().item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn reparameterize_examples() {
        let mu = Tensor::randn([10], 1.0, &mut stream(2, &[]));
        let eps = Tensor::randn([10], 1.0, &mut stream(3, &[]));
        let zero_sigma = Tensor::full([10], f64::NEG_INFINITY);
        assert_eq!(reparameterize_with(&mu, &zero_sigma, &eps).unwrap(), mu);

        let p = GaussianPosterior::new(Tensor::zeros([100_000]), Tensor::zeros([100_000])).unwrap();
        let z = p.sample(&mut stream(4, &[]));
        let m = z.data().iter().sum::<f64>() / 1e5;
        let v = z.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 1e5;
        assert!(m.abs() < 0.02 && (0.98..=1.02).contains(&v));

        let tape = Tape::new();
        let muv = tape.leaf(mu.clone().with_requires_grad(true));
        let lvv = tape.constant(Tensor::zeros([10]));
        ops::sum(&reparameterize(&muv, &lvv, &eps).unwrap()).backward().unwrap();
        assert_eq!(muv.grad().unwrap(), vec![1.0; 10]);
    }

    #[test]
    fn geometry_contract() {
        let vae = Vae::new(VaeConfig::default()).unwrap();
        let params = vae.init_params(&mut stream(5, &[])).unwrap();
        let x = Tensor::randn([1, 1, 16, 16, 16], 0.5, &mut stream(6, &[]));
        let post = vae.encode(&params, &x).unwrap();
        assert_eq!(post.mu.shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(post.logvar.shape(), &[1, 4, 4, 4, 4]);
        assert_eq!(post, vae.encode(&params, &x).unwrap());
        let x2 = Tensor::randn([1, 1, 16, 16, 16], 0.5, &mut stream(7, &[]));
        assert!(vae.encode(&params, &x2).unwrap().mu.l2_distance(&post.mu).unwrap() > 0.0);
        assert_eq!(vae.decode(&params, &post.mu).unwrap().shape(), x.shape());
        for ext in [[8, 12, 4], [4, 4, 4], [20, 8, 16]] {
            let x = Tensor::zeros([1, 1, ext[0], ext[1], ext[2]]);
            let z = vae.encode(&params, &x).unwrap().mu;
            assert_eq!(&z.shape()[2..], &ext.map(|e| e / 4));
            assert_eq!(vae.decode(&params, &z).unwrap().shape(), x.shape());
        }
        let odd = Tensor::zeros([1, 1, 16, 16, 10]);
        assert!(matches!(vae.encode(&params, &odd), Err(Error::IndivisibleExtent(_))));
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let mut params = Parameters::new();
        let mut rng = stream(8, &[]);
        params.insert("mu", Tensor::randn([2, 3], 0.7, &mut rng)).unwrap();
        params.insert("lv", Tensor::randn([2, 3], 0.3, &mut rng)).unwrap();
        let eps = Tensor::randn([2, 3], 1.0, &mut rng);
        let target = Tensor::randn([2, 3], 1.0, &mut rng);
        let report = grad_check(
            |tape, p| {
                let (mu, lv) = (p.get("mu")?, p.get("lv")?);
                let z = reparameterize(mu, lv, &eps)?;
                let rec = ops::mse_loss(&z, &tape.constant(target.clone()))?;
                ops::add(&rec, &kl_normal(mu, lv)?)
            },
            &params,
            1e-3,
            1e-4,
        )
        .unwrap();
        assert!(report.passed());
    }

    #[test]
    fn elbo_is_nonnegative_and_beta_zero_is_autoencoder() {
        let vae = Vae::new(VaeConfig::default()).unwrap();
        let params = vae.init_params(&mut stream(9, &[])).unwrap();
        let x = Tensor::randn([2, 1, 8, 8, 8], 0.5, &mut stream(10, &[]));
        let tape = Tape::new();
        let p = params.bind(&tape);
        let l = vae.elbo_loss(&tape, &p, &x, 1e-3, &mut stream(11, &[])).unwrap();
        assert!(l.item().unwrap() >= 0.0);

        let run = |beta: f64| {
            let tape = Tape::new();
            let p = params.bind(&tape);
            let (mu, lv) = vae.encode_var(&p, &tape.constant(x.clone())).unwrap();
            let eps = Tensor::randn(mu.shape(), 1.0, &mut stream(12, &[]));
            let z = reparameterize(&mu, &lv, &eps).unwrap();
            let mut loss = ops::mse_loss(&vae.decode_var(&p, &z).unwrap(), &tape.constant(x.clone())).unwrap();
            if beta > 0.0 {
                loss = ops::add(&loss, &ops::scale(&kl_normal(&mu, &lv).unwrap(), beta)).unwrap();
            }
            loss.backward().unwrap();
            p.get("enc.out.b").unwrap().grad().unwrap()
        };
        let plain = run(0.0);
        let via = {
            let tape = Tape::new();
            let p = params.bind(&tape);
            vae.elbo_loss(&tape, &p, &x, 0.0, &mut stream(12, &[])).unwrap().backward().unwrap();
            p.get("enc.out.b").unwrap().grad().unwrap()
        };
        assert_eq!(plain, via);
        assert_ne!(plain, run(1.0));
    }

    #[test]
    fn lat_roundtrip() {
        let mut rng = stream(13, &[]);
        let rec = LatentRecord {
            case_id: "case-007".into(),
            role: Role::Flair,
            posterior: GaussianPosterior::new(
                Tensor::randn([1, 4, 2, 2, 2], 1.0, &mut rng),
                Tensor::randn([1, 4, 2, 2, 2], 1.0, &mut rng),
            )
            .unwrap(),
        };
        let mut buf = Vec::new();
        rec.write(&mut buf).unwrap();
        assert_eq!(LatentRecord::read(&mut &buf[..]).unwrap(), rec);
        buf.push(0);
        assert!(LatentRecord::read(&mut &buf[..]).is_err());
        assert!(matches!(LatentRecord::read(&mut &b"{}\n"[..]), Err(Error::BadMagic(_))));
    }
}
