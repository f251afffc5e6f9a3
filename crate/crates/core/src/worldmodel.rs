//! Low-level generative model over latent states.
//!
//! * posterior `Q(s_t | s_{t-1}, a_{t-1}, o_t)`: strided conv encoder, then a
//!   dense layer over `[features, one-hot action, previous sample]` and a
//!   diagonal-Gaussian head;
//! * prior `P(s_t | s_{t-1}, a_{t-1})`: an LSTM cell over `[sample, action]`
//!   followed by a Gaussian head;
//! * likelihood `P(o_t | s_t)`: dense layers and an upsample/conv decoder with
//!   a sigmoid output and fixed per-pixel noise.
//!
//! The LSTM context travels with every [`Belief`] so that imagination can
//! resume from any filtered state.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gridworld::{Action, Observation, OBS_LEN, OBS_SIDE};
use crate::nn::{init, Adam, ParamId, ParamSet, Real, Tape, Tensor, Var};

pub const ACTION_DIM: usize = 3;
const CHECKPOINT_MAGIC: &[u8; 4] = b"HRCK";
const CHECKPOINT_VERSION: u32 = 1;
const DECODE_CHUNK: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown model preset {0:?}")]
    UnknownPreset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: String,
    pub latent: usize,
    pub hidden: usize,
    /// Output channels of the five stride-2 encoder convolutions.
    pub enc_channels: Vec<usize>,
    /// Output channels of the five decoder stages; the last must be 3.
    pub dec_channels: Vec<usize>,
    pub obs_sigma: f64,
    pub std_floor: f64,
    pub leak: f64,
}

impl ModelConfig {
    pub fn paper() -> Self {
        ModelConfig {
            preset: "paper".into(),
            latent: 30,
            hidden: 200,
            enc_channels: vec![16, 32, 64, 128, 256],
            dec_channels: vec![128, 64, 32, 16, 3],
            obs_sigma: 0.1,
            std_floor: 1e-3,
            leak: 0.1,
        }
    }

    /// Half the channels, smaller latent; for single-core runs and tests.
    pub fn tiny() -> Self {
        ModelConfig {
            preset: "tiny".into(),
            latent: 16,
            hidden: 100,
            enc_channels: vec![8, 16, 32, 64, 128],
            dec_channels: vec![64, 32, 16, 8, 3],
            ..Self::paper()
        }
    }

    /// Minimal network used by gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            preset: "micro".into(),
            latent: 4,
            hidden: 6,
            enc_channels: vec![2, 2, 2, 2, 3],
            dec_channels: vec![2, 2, 2, 2, 3],
            ..Self::paper()
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            "micro" => Ok(Self::micro()),
            other => Err(ModelError::UnknownPreset(other.into())),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.enc_channels.len() != 5 || self.dec_channels.len() != 5 {
            return Err(ModelError::Shape("encoder and decoder need five stages".into()));
        }
        if *self.dec_channels.last().unwrap() != 3 {
            return Err(ModelError::Shape("decoder must end with 3 channels".into()));
        }
        Ok(())
    }

    fn feature_dim(&self) -> usize {
        self.enc_channels[4] * 4
    }
}

// spatial sizes of the decoder stages, mirroring the encoder 56→28→14→7→4→2
const DEC_SIZES: [usize; 5] = [4, 7, 14, 28, 56];

/// Diagonal Gaussian over latent features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentState {
    pub fn standard(dim: usize) -> Self {
        LatentState { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Closed-form KL(self ‖ other).
    pub fn kl(&self, other: &LatentState) -> f64 {
        assert_eq!(self.dim(), other.dim());
        (0..self.dim()).map(|i| kl_gauss(self.mean[i], self.std[i], other.mean[i], other.std[i])).sum()
    }

    /// Moves this distribution toward `obs` by weight `w`.
    pub fn blend(&mut self, obs: &LatentState, w: f64) {
        for i in 0..self.dim() {
            self.mean[i] += w * (obs.mean[i] - self.mean[i]);
            self.std[i] += w * (obs.std[i] - self.std[i]);
        }
    }
}

pub fn kl_gauss(m1: f64, s1: f64, m2: f64, s2: f64) -> f64 {
    (s2 / s1).ln() + (s1 * s1 + (m1 - m2).powi(2)) / (2.0 * s2 * s2) - 0.5
}

/// Filtered belief: posterior, the sample carried forward, and LSTM context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub state: LatentState,
    pub sample: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl Belief {
    pub fn initial(cfg: &ModelConfig) -> Self {
        Belief {
            state: LatentState::standard(cfg.latent),
            sample: vec![0.0; cfg.latent],
            h: vec![0.0; cfg.hidden],
            c: vec![0.0; cfg.hidden],
        }
    }
}

/// One imagined trajectory under the prior.
#[derive(Clone, Debug)]
pub struct RolloutSample {
    pub samples: Vec<Vec<f64>>,
    pub priors: Vec<LatentState>,
    /// Decoded prior means, one frame per step.
    pub frames: Vec<Vec<f32>>,
}

impl RolloutSample {
    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<Dense>,
    post_fc: Dense,
    post_head: Dense,
    lstm: Dense,
    prior_head: Dense,
    dec_fc1: Dense,
    dec_fc2: Dense,
    dec: Vec<Dense>,
}

/// Posterior, prior and likelihood networks with their parameters.
#[derive(Clone, Debug)]
pub struct WorldModel<T: Real = f32> {
    cfg: ModelConfig,
    params: ParamSet<T>,
    layers: Layers,
}

fn dense<T: Real, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, out: usize, inp: usize) -> Dense {
    let w = ps.add(format!("{name}.w"), init::lecun(rng, vec![out, inp], inp));
    let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![out]));
    Dense { w, b }
}

fn conv<T: Real, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, out: usize, inp: usize) -> Dense {
    let w = ps.add(format!("{name}.w"), init::lecun(rng, vec![out, inp, 3, 3], inp * 9));
    let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![out]));
    Dense { w, b }
}

/// Network group a parameter belongs to.
pub fn network_of(param_name: &str) -> &'static str {
    if param_name.starts_with("enc") || param_name.starts_with("post") {
        "posterior"
    } else if param_name.starts_with("lstm") || param_name.starts_with("prior") {
        "prior"
    } else {
        "likelihood"
    }
}

pub fn one_hot<T: Real>(actions: &[Option<Action>]) -> Tensor<T> {
    let mut data = vec![T::zero(); actions.len() * ACTION_DIM];
    for (i, a) in actions.iter().enumerate() {
        if let Some(a) = a {
            data[i * ACTION_DIM + a.index()] = T::one();
        }
    }
    Tensor::new(data, vec![actions.len(), ACTION_DIM])
}

fn to_t<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|x| T::from_f64_lossy(*x)).collect()
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// A batch of equal-length sequences in time-major order.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub batch: usize,
    pub len: usize,
    /// `len * batch` entries; `actions[t * batch + b]` precedes frame `t`.
    pub actions: Vec<Option<Action>>,
    /// `len * batch * OBS_LEN` CHW pixels in `[0, 1]`.
    pub obs: Vec<f32>,
}

/// Loss nodes of one free-energy evaluation.
pub struct FreeEnergy {
    /// `(kl + nll) / batch`.
    pub total: Var,
    pub kl: Var,
    pub nll: Var,
}

impl<T: Real> WorldModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::default();
        let mut enc = Vec::new();
        let mut inp = 3;
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            enc.push(conv(&mut ps, &mut rng, &format!("enc{i}"), c, inp));
            inp = c;
        }
        let (l, h) = (cfg.latent, cfg.hidden);
        let post_fc = dense(&mut ps, &mut rng, "post_fc", h, cfg.feature_dim() + ACTION_DIM + l);
        let post_head = dense(&mut ps, &mut rng, "post_head", 2 * l, h);
        let lstm = {
            let inp = l + ACTION_DIM + h;
            let bound = 1.0 / (h as f64).sqrt();
            let w = ps.add("lstm.w", init::uniform(&mut rng, vec![4 * h, inp], bound));
            // forget-gate bias starts at 1
            let mut b = Tensor::zeros(vec![4 * h]);
            for v in &mut b.data[h..2 * h] {
                *v = T::one();
            }
            let b = ps.add("lstm.b", b);
            Dense { w, b }
        };
        let prior_head = dense(&mut ps, &mut rng, "prior_head", 2 * l, h);
        let dec_fc1 = dense(&mut ps, &mut rng, "dec_fc1", h, l);
        let top = cfg.enc_channels[4];
        let dec_fc2 = dense(&mut ps, &mut rng, "dec_fc2", top * 4, h);
        let mut dec = Vec::new();
        let mut inp = top;
        for (i, &c) in cfg.dec_channels.iter().enumerate() {
            dec.push(conv(&mut ps, &mut rng, &format!("dec{i}"), c, inp));
            inp = c;
        }
        let layers = Layers { enc, post_fc, post_head, lstm, prior_head, dec_fc1, dec_fc2, dec };
        Ok(WorldModel { cfg, params: ps, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> WorldModel<U> {
        WorldModel { cfg: self.cfg.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    /// Draws every bias uniformly from ±`bound`. Zero biases put masked
    /// (black) pixels exactly on the leaky-ReLU kink, which finite-difference
    /// checks cannot handle.
    pub fn jitter_biases(&mut self, seed: u64, bound: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<ParamId> = self.params.iter().filter(|(_, n, _)| n.ends_with(".b")).map(|(id, _, _)| id).collect();
        for id in ids {
            for v in &mut self.params.get_mut(id).data {
                *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
    }

    fn lin(&self, t: &mut Tape<'_, T>, x: Var, d: &Dense) -> Var {
        let (w, b) = (t.param(d.w), t.param(d.b));
        t.linear(x, w, Some(b))
    }

    fn conv(&self, t: &mut Tape<'_, T>, x: Var, d: &Dense, stride: usize) -> Var {
        let (w, b) = (t.param(d.w), t.param(d.b));
        t.conv2d(x, w, Some(b), stride, 1)
    }

    fn gaussian_head(&self, t: &mut Tape<'_, T>, x: Var, d: &Dense) -> (Var, Var) {
        let l = self.cfg.latent;
        let out = self.lin(t, x, d);
        let mean = t.slice_cols(out, 0, l);
        let raw = t.slice_cols(out, l, l);
        let sp = t.softplus(raw);
        let std = t.add_const(sp, self.cfg.std_floor);
        (mean, std)
    }

    /// `[B, 3, 56, 56]` → `[B, features]`.
    pub fn encode(&self, t: &mut Tape<'_, T>, obs: Var) -> Var {
        let mut x = obs;
        for d in &self.layers.enc {
            let y = self.conv(t, x, d, 2);
            x = t.leaky_relu(y, self.cfg.leak);
        }
        let b = t.shape(x)[0];
        t.reshape(x, vec![b, self.cfg.feature_dim()])
    }

    pub fn posterior_from_features(&self, t: &mut Tape<'_, T>, feat: Var, action: Var, prev: Var) -> (Var, Var) {
        let x = t.concat(&[feat, action, prev]);
        let y = self.lin(t, x, &self.layers.post_fc);
        let y = t.leaky_relu(y, self.cfg.leak);
        self.gaussian_head(t, y, &self.layers.post_head)
    }

    /// One LSTM update on `[prev sample, action]`; returns `(h, c)`.
    pub fn lstm_step(&self, t: &mut Tape<'_, T>, prev: Var, action: Var, h: Var, c: Var) -> (Var, Var) {
        let hd = self.cfg.hidden;
        let x = t.concat(&[prev, action, h]);
        let z = self.lin(t, x, &self.layers.lstm);
        let zi = t.slice_cols(z, 0, hd);
        let zf = t.slice_cols(z, hd, hd);
        let zg = t.slice_cols(z, 2 * hd, hd);
        let zo = t.slice_cols(z, 3 * hd, hd);
        let i = t.sigmoid(zi);
        let f = t.sigmoid(zf);
        let g = t.tanh(zg);
        let o = t.sigmoid(zo);
        let fc = t.mul(f, c);
        let ig = t.mul(i, g);
        let c2 = t.add(fc, ig);
        let tc = t.tanh(c2);
        let h2 = t.mul(o, tc);
        (h2, c2)
    }

    pub fn prior_from_context(&self, t: &mut Tape<'_, T>, h: Var) -> (Var, Var) {
        self.gaussian_head(t, h, &self.layers.prior_head)
    }

    /// `[B, latent]` → `[B, 3, 56, 56]` means in `[0, 1]`.
    pub fn decode(&self, t: &mut Tape<'_, T>, s: Var) -> Var {
        let leak = self.cfg.leak;
        let y = self.lin(t, s, &self.layers.dec_fc1);
        let y = t.leaky_relu(y, leak);
        let y = self.lin(t, y, &self.layers.dec_fc2);
        let y = t.leaky_relu(y, leak);
        let b = t.shape(y)[0];
        let mut x = t.reshape(y, vec![b, self.cfg.enc_channels[4], 2, 2]);
        let last = self.layers.dec.len() - 1;
        for (i, d) in self.layers.dec.iter().enumerate() {
            let u = t.upsample(x, DEC_SIZES[i], DEC_SIZES[i]);
            let y = self.conv(t, u, d, 1);
            x = if i == last { t.sigmoid(y) } else { t.leaky_relu(y, leak) };
        }
        x
    }

    /// Free energy of a batch, with reparameterisation noise supplied as
    /// `len * batch * latent` standard normals.
    pub fn free_energy<'p>(&'p self, t: &mut Tape<'p, T>, batch: &SeqBatch, noise: &[T]) -> FreeEnergy {
        let (b, l, hd) = (batch.batch, self.cfg.latent, self.cfg.hidden);
        assert_eq!(batch.actions.len(), batch.len * b);
        assert_eq!(batch.obs.len(), batch.len * b * OBS_LEN);
        assert_eq!(noise.len(), batch.len * b * l);
        let mut prev = t.constant(Tensor::zeros(vec![b, l]));
        let mut h = t.constant(Tensor::zeros(vec![b, hd]));
        let mut c = t.constant(Tensor::zeros(vec![b, hd]));
        let mut kls = Vec::with_capacity(batch.len);
        let mut nlls = Vec::with_capacity(batch.len);
        for step in 0..batch.len {
            let acts = &batch.actions[step * b..(step + 1) * b];
            let a = t.constant(one_hot(acts));
            let pix: Vec<T> = batch.obs[step * b * OBS_LEN..(step + 1) * b * OBS_LEN]
                .iter()
                .map(|v| T::from_f64_lossy(*v as f64))
                .collect();
            let o = t.constant(Tensor::new(pix.clone(), vec![b, 3, OBS_SIDE, OBS_SIDE]));
            let (h2, c2) = self.lstm_step(t, prev, a, h, c);
            let (pm, ps) = self.prior_from_context(t, h2);
            let feat = self.encode(t, o);
            let (qm, qs) = self.posterior_from_features(t, feat, a, prev);
            let eps = t.constant(Tensor::new(noise[step * b * l..(step + 1) * b * l].to_vec(), vec![b, l]));
            let scaled = t.mul(qs, eps);
            let s = t.add(qm, scaled);
            kls.push(t.gauss_kl(qm, qs, pm, ps));
            let recon = self.decode(t, s);
            nlls.push(t.gauss_nll(recon, pix, self.cfg.obs_sigma));
            prev = s;
            h = h2;
            c = c2;
        }
        let kl = sum_scalars(t, &kls);
        let nll = sum_scalars(t, &nlls);
        let both = t.add(kl, nll);
        let total = t.scale(both, 1.0 / b as f64);
        FreeEnergy { total, kl, nll }
    }
}

fn sum_scalars<T: Real>(t: &mut Tape<'_, T>, xs: &[Var]) -> Var {
    let mut acc = xs[0];
    for x in &xs[1..] {
        acc = t.add(acc, *x);
    }
    acc
}

/// Inference helpers; all are pure with respect to the model.
impl WorldModel<f32> {
    /// `Q(s_t | s_{t-1}, a_{t-1}, o_t)`.
    pub fn posterior(&self, prev_sample: &[f64], action: Option<Action>, obs: &Observation) -> LatentState {
        let mut t = Tape::new(&self.params);
        let prev = t.constant(Tensor::new(to_t(prev_sample), vec![1, self.cfg.latent]));
        let a = t.constant(one_hot(&[action]));
        let o = t.constant(Tensor::new(obs.pixels().to_vec(), vec![1, 3, OBS_SIDE, OBS_SIDE]));
        let feat = self.encode(&mut t, o);
        let (m, s) = self.posterior_from_features(&mut t, feat, a, prev);
        LatentState { mean: to_f64(&t.value(m).data), std: to_f64(&t.value(s).data) }
    }

    /// History-free place descriptor: posterior mean with no context.
    pub fn view_feature(&self, obs: &Observation) -> Vec<f64> {
        self.posterior(&vec![0.0; self.cfg.latent], None, obs).mean
    }

    /// `P(s_t | s_{t-1}, a_{t-1})` from a belief; also returns the advanced context.
    pub fn prior(&self, belief: &Belief, action: Option<Action>) -> (LatentState, Vec<f64>, Vec<f64>) {
        let out = self.prior_batch(&belief.sample, &[action], &belief.h, &belief.c);
        (LatentState { mean: out.mean, std: out.std }, out.h, out.c)
    }

    /// Batched prior step over flat `[B, ·]` arrays.
    pub fn prior_batch(&self, samples: &[f64], actions: &[Option<Action>], h: &[f64], c: &[f64]) -> PriorBatch {
        let (b, l, hd) = (actions.len(), self.cfg.latent, self.cfg.hidden);
        assert_eq!(samples.len(), b * l);
        assert_eq!(h.len(), b * hd);
        assert_eq!(c.len(), b * hd);
        let mut t = Tape::new(&self.params);
        let s = t.constant(Tensor::new(to_t(samples), vec![b, l]));
        let a = t.constant(one_hot(actions));
        let hv = t.constant(Tensor::new(to_t(h), vec![b, hd]));
        let cv = t.constant(Tensor::new(to_t(c), vec![b, hd]));
        let (h2, c2) = self.lstm_step(&mut t, s, a, hv, cv);
        let (m, sd) = self.prior_from_context(&mut t, h2);
        PriorBatch {
            mean: to_f64(&t.value(m).data),
            std: to_f64(&t.value(sd).data),
            h: to_f64(&t.value(h2).data),
            c: to_f64(&t.value(c2).data),
        }
    }

    /// One filtering step: advance the context, then condition on `obs`.
    /// The posterior mean is carried forward as the sample.
    pub fn filter(&self, belief: &Belief, action: Option<Action>, obs: &Observation) -> Belief {
        let (_, h, c) = self.prior(belief, action);
        let state = self.posterior(&belief.sample, action, obs);
        Belief { sample: state.mean.clone(), state, h, c }
    }

    /// Filter a whole episode from the initial belief.
    pub fn filter_sequence(&self, actions: &[Option<Action>], frames: &[Observation]) -> Vec<Belief> {
        let mut b = Belief::initial(&self.cfg);
        let mut out = Vec::with_capacity(frames.len());
        for (a, o) in actions.iter().zip(frames) {
            b = self.filter(&b, *a, o);
            out.push(b.clone());
        }
        out
    }

    /// Decoded mean images for flat `[B, latent]` samples.
    pub fn decode_batch(&self, samples: &[f64]) -> Vec<Vec<f32>> {
        let l = self.cfg.latent;
        let n = samples.len() / l;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(DECODE_CHUNK) {
            let end = (start + DECODE_CHUNK).min(n);
            let mut t = Tape::new(&self.params);
            let s = t.constant(Tensor::new(to_t(&samples[start * l..end * l]), vec![end - start, l]));
            let img = self.decode(&mut t, s);
            out.extend(t.value(img).data.chunks_exact(OBS_LEN).map(|c| c.to_vec()));
        }
        out
    }

    pub fn decode_one(&self, sample: &[f64]) -> Vec<f32> {
        self.decode_batch(sample).pop().expect("one frame")
    }

    /// `n` independent prior rollouts of `plan` from `start`.
    ///
    /// Noise for step `k` of sample `i` is keyed by `(seed, i, plan[..=k])`, so
    /// rollouts sharing a plan prefix share their trajectory up to it.
    pub fn imagine(&self, start: &Belief, plan: &[Action], n: usize, seed: u64) -> Vec<RolloutSample> {
        let l = self.cfg.latent;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut samples = Vec::new();
            let mut priors = Vec::new();
            let mut means = Vec::new();
            let mut b = start.clone();
            for k in 0..plan.len() {
                let (p, h, c) = self.prior(&b, Some(plan[k]));
                let eps = step_noise(seed, i, &plan[..=k], l);
                let s: Vec<f64> = (0..l).map(|j| p.mean[j] + p.std[j] * eps[j]).collect();
                means.extend_from_slice(&p.mean);
                samples.push(s.clone());
                priors.push(p.clone());
                b = Belief { state: p, sample: s, h, c };
            }
            let frames = if means.is_empty() { Vec::new() } else { self.decode_batch(&means) };
            out.push(RolloutSample { samples, priors, frames });
        }
        out
    }
}

pub struct PriorBatch {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normals for one imagined step, keyed by the action prefix.
pub fn step_noise(seed: u64, sample: usize, prefix: &[Action], dim: usize) -> Vec<f64> {
    let mut key = splitmix(seed ^ splitmix(sample as u64 + 1));
    for a in prefix {
        key = splitmix(key ^ (a.index() as u64 + 1));
    }
    key = splitmix(key ^ prefix.len() as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Entropy of the per-pixel observation model, in nats per pixel.
///
/// The Gaussian is read as a density over 8-bit intensities, which keeps the
/// entropy of a discretised observation non-negative.
pub fn pixel_entropy(sigma: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln() + 255f64.ln()
}

/// Entropy of one decoded frame.
pub fn frame_entropy(sigma: f64) -> f64 {
    pixel_entropy(sigma) * OBS_LEN as f64
}

/// One recorded episode: `actions[i]` led to frame `i` (none for the first).
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub actions: Vec<Option<Action>>,
    /// `len * OBS_LEN` row-major RGB bytes.
    pub rgb: Vec<u8>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, i: usize) -> Observation {
        Observation::from_rgb_bytes(&self.rgb[i * OBS_LEN..(i + 1) * OBS_LEN]).expect("frame size")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Fraction of recordings used for training; the rest validate.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 300, lr: 1e-4, batch_size: 16, seq_len: 10, seed: 0, grad_clip: None, train_fraction: 2.0 / 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "train_FE")]
    pub train_fe: f64,
    #[serde(rename = "val_FE")]
    pub val_fe: f64,
    #[serde(rename = "KL")]
    pub kl: f64,
    #[serde(rename = "NLL")]
    pub nll: f64,
}

pub fn write_training_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Split recording indices by episode, deterministically from `seed`.
pub fn split_episodes(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5711));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = if n >= 2 { n_train.clamp(1, n - 1) } else { n };
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Window starts `(recording, offset)` of length `len`.
fn windows(recs: &[Recording], which: &[usize], len: usize, shift: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &r in which {
        let n = recs[r].len();
        let mut s = shift.min(n.saturating_sub(len));
        while s + len <= n {
            out.push((r, s));
            s += len;
        }
    }
    out
}

/// Time-major batch of the windows `(recording, offset)`, each `len` frames.
pub fn make_batch(recs: &[Recording], wins: &[(usize, usize)], len: usize) -> SeqBatch {
    let b = wins.len();
    let mut actions = vec![None; len * b];
    let mut obs = vec![0f32; len * b * OBS_LEN];
    for (bi, &(r, s)) in wins.iter().enumerate() {
        let rec = &recs[r];
        for t in 0..len {
            // the window opens with no previous action
            actions[t * b + bi] = if t == 0 { None } else { rec.actions[s + t] };
            let frame = rec.frame(s + t);
            obs[(t * b + bi) * OBS_LEN..(t * b + bi + 1) * OBS_LEN].copy_from_slice(frame.pixels());
        }
    }
    SeqBatch { batch: b, len, actions, obs }
}

fn noise_for(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Mean free energy per sequence, with its KL and NLL parts.
pub fn evaluate(model: &WorldModel<f32>, recs: &[Recording], which: &[usize], seq_len: usize, batch_size: usize, seed: u64) -> (f64, f64, f64) {
    let wins = windows(recs, which, seq_len, 0);
    if wins.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let (mut kl, mut nll) = (0.0, 0.0);
    for (bi, chunk) in wins.chunks(batch_size).enumerate() {
        let batch = make_batch(recs, chunk, seq_len);
        let noise = noise_for(seed.wrapping_add(bi as u64), seq_len * chunk.len() * model.latent_dim());
        let mut t = Tape::new(model.params());
        let fe = model.free_energy(&mut t, &batch, &noise);
        kl += t.scalar(fe.kl) as f64;
        nll += t.scalar(fe.nll) as f64;
    }
    let n = wins.len() as f64;
    ((kl + nll) / n, kl / n, nll / n)
}

/// Fits `model` by Adam on free energy. `on_epoch` sees every finished epoch
/// and may persist the model. On a non-finite loss the model is restored to
/// the last finished epoch and `Divergence` is returned.
pub fn train(
    model: &mut WorldModel<f32>,
    recs: &[Recording],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &WorldModel<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let (train_idx, val_idx) = split_episodes(recs.len(), cfg.train_fraction, cfg.seed);
    train_split(model, recs, &train_idx, &val_idx, cfg, on_epoch)
}

/// As [`train`], with an explicit episode split.
pub fn train_split(
    model: &mut WorldModel<f32>,
    recs: &[Recording],
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &WorldModel<f32>) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if train_idx.iter().all(|&r| recs[r].len() < cfg.seq_len) {
        return Err(ModelError::Dataset(format!("no training recording holds a {}-step window", cfg.seq_len)));
    }
    let mut opt = Adam::new(model.params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut last_good = model.params().clone();
    let val_seed = cfg.seed ^ 0xA11D;
    let (v0, _, _) = evaluate(model, recs, val_idx, cfg.seq_len, cfg.batch_size, val_seed);
    log::info!("initial validation FE {v0:.3}");
    for epoch in 1..=cfg.epochs {
        let shift = rng.gen_range(0..cfg.seq_len);
        let mut wins = windows(recs, train_idx, cfg.seq_len, shift);
        wins.shuffle(&mut rng);
        let (mut sum_kl, mut sum_nll, mut count) = (0.0, 0.0, 0usize);
        for chunk in wins.chunks(cfg.batch_size) {
            let batch = make_batch(recs, chunk, cfg.seq_len);
            let noise = noise_for(rng.gen(), cfg.seq_len * chunk.len() * model.latent_dim());
            let (mut grads, kl, nll) = {
                let mut t = Tape::new(model.params());
                let fe = model.free_energy(&mut t, &batch, &noise);
                let kl = t.scalar(fe.kl) as f64;
                let nll = t.scalar(fe.nll) as f64;
                (t.backward(fe.total), kl, nll)
            };
            if !(kl + nll).is_finite() || grads.global_norm().is_nan() {
                *model.params_mut() = last_good;
                return Err(ModelError::Divergence { epoch });
            }
            if let Some(max) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > max {
                    grads.scale((max / norm) as f32);
                }
            }
            opt.update(model.params_mut(), &grads);
            sum_kl += kl;
            sum_nll += nll;
            count += chunk.len();
        }
        let (val_fe, _, _) = evaluate(model, recs, val_idx, cfg.seq_len, cfg.batch_size, val_seed);
        if !model.params().all_finite() {
            *model.params_mut() = last_good;
            return Err(ModelError::Divergence { epoch });
        }
        let n = count.max(1) as f64;
        let row = EpochLog { epoch, train_fe: (sum_kl + sum_nll) / n, val_fe, kl: sum_kl / n, nll: sum_nll / n };
        log::info!("epoch {epoch}: train {:.3} val {:.3} kl {:.3}", row.train_fe, row.val_fe, row.kl);
        last_good = model.params().clone();
        on_epoch(&row, model)?;
        log.push(row);
    }
    Ok(log)
}

/// Metadata stored next to the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    #[serde(default)]
    pub losses: Vec<EpochLog>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Planner calibration, opaque to this module.
    #[serde(default)]
    pub calibration: Option<serde_json::Value>,
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Binary layout: `HRCK`, u32 version, u32 metadata length, metadata JSON,
/// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
/// u32 dims, little-endian f32 values. All integers little-endian.
pub fn save_checkpoint(path: &Path, model: &WorldModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(&mut w, CHECKPOINT_VERSION)?;
        let json = serde_json::to_vec(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        put_u32(&mut w, json.len() as u32)?;
        w.write_all(&json)?;
        put_u32(&mut w, model.params().len() as u32)?;
        for (_, name, t) in model.params().iter() {
            put_u32(&mut w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, t.shape.len() as u32)?;
            for d in &t.shape {
                put_u32(&mut w, *d as u32)?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(WorldModel<f32>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let len = get_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut model = WorldModel::<f32>::new(meta.model.clone(), 0)?;
    let count = get_u32(&mut r)? as usize;
    if count != model.params().len() {
        return Err(ModelError::Checkpoint(format!("expected {} tensors, found {count}", model.params().len())));
    }
    for _ in 0..count {
        let nlen = get_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let id = model.params().find(&name).ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
        if model.params().get(id).shape != shape {
            return Err(ModelError::Checkpoint(format!("tensor {name} has shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        model.params_mut().get_mut(id).data = data;
    }
    Ok((model, meta))
}
