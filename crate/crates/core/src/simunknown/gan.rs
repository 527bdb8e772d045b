//! Conditional WGAN-GP over spectrograms.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::embednet::{decode_store, encode_store, Dense};
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_bytes, read_json, write_json};
use crate::params::{Adam, ParamId, ParamStore};
use crate::preprocess::RealMatrix;
use crate::seed;
use crate::supcon::class_balanced_batches;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub label_dim: usize,
    /// Generator channels from the seed map down to the last hidden stage.
    pub generator_channels: Vec<usize>,
    pub critic_channels: Vec<usize>,
    pub beta: f64,
    pub n_critic: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Input-space step of the Hessian-vector product in the penalty gradient.
    pub hvp_step: f64,
    pub divergence_threshold: f64,
    pub divergence_patience: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            noise_dim: 32,
            label_dim: 8,
            generator_channels: vec![32, 16, 8],
            critic_channels: vec![8, 16, 32],
            beta: 10.0,
            n_critic: 5,
            epochs: 10,
            batch_size: 32,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            hvp_step: 1e-3,
            divergence_threshold: 1e4,
            divergence_patience: 5,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self, grid: (usize, usize)) -> Result<()> {
        let stages = self.generator_channels.len();
        if stages == 0 || self.critic_channels.len() != stages {
            return Err(Error::Config(
                "generator and critic need the same positive number of stages".into(),
            ));
        }
        if grid.0 == 0 || grid.1 == 0 {
            return Err(Error::Config(format!("empty grid {grid:?}")));
        }
        if self.noise_dim == 0 || self.label_dim == 0 || self.batch_size == 0 || self.n_critic == 0 {
            return Err(Error::Config(
                "noise_dim, label_dim, batch_size and n_critic must be positive".into(),
            ));
        }
        if !(self.beta >= 0.0 && self.lr > 0.0 && self.hvp_step > 0.0) {
            return Err(Error::Config(
                "beta must be non-negative, lr and hvp_step positive".into(),
            ));
        }
        Ok(())
    }

    /// Internal grid: `grid` rounded up to a multiple of `2^stages`. Real
    /// samples are zero-padded to it and generated ones cropped back.
    pub fn work_grid(&self, grid: (usize, usize)) -> (usize, usize) {
        let f = 1 << self.generator_channels.len();
        (grid.0.next_multiple_of(f), grid.1.next_multiple_of(f))
    }
}

/// Anything that scores `(B, 1, H, W)` samples given class labels, one
/// independent score per sample, shape `(B, 1)`.
pub trait Critic {
    fn score(&self, g: &mut Graph, x: Var, labels: &[usize]) -> Var;
    fn ids(&self) -> Vec<ParamId>;
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub embedding: ParamId,
    pub input: Dense,
    pub stages: Vec<(ParamId, ParamId)>,
    pub seed_shape: (usize, usize, usize),
}

impl Generator {
    /// `(B, noise)` noise and labels to `(B, 1, H, W)` samples in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, z: Var, labels: &[usize]) -> Var {
        let table = g.param(self.embedding);
        let e = g.gather_rows(table, labels);
        let h = g.concat(&[z, e], 1);
        let h = self.input.forward(g, h);
        let (c, sh, sw) = self.seed_shape;
        let mut h = g.reshape(h, &[labels.len(), c, sh, sw]);
        for (i, &(w, b)) in self.stages.iter().enumerate() {
            h = g.relu(h);
            let (wv, bv) = (g.param(w), g.param(b));
            h = g.conv_transpose2d(h, wv, Some(bv), 2, 1);
            if i + 1 == self.stages.len() {
                h = g.sigmoid(h);
            }
        }
        h
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.embedding];
        v.extend(self.input.ids());
        v.extend(self.stages.iter().flat_map(|&(w, b)| [w, b]));
        v
    }
}

/// Strided convolutions over the sample stacked with a learned label plane.
#[derive(Clone, Debug)]
pub struct ConvCritic {
    pub label_plane: ParamId,
    pub stages: Vec<(ParamId, ParamId)>,
    pub output: Dense,
    pub grid: (usize, usize),
}

impl Critic for ConvCritic {
    fn score(&self, g: &mut Graph, x: Var, labels: &[usize]) -> Var {
        let table = g.param(self.label_plane);
        let e = g.gather_rows(table, labels);
        let plane = g.expand2d(e, self.grid.0, self.grid.1);
        let mut h = g.concat(&[x, plane], 1);
        for &(w, b) in &self.stages {
            let (wv, bv) = (g.param(w), g.param(b));
            h = g.conv2d(h, wv, Some(bv), 2, 1);
            h = g.leaky_relu(h, 0.2);
        }
        let n: usize = g.shape(h)[1..].iter().product();
        let h = g.reshape(h, &[labels.len(), n]);
        self.output.forward(g, h)
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.label_plane];
        v.extend(self.stages.iter().flat_map(|&(w, b)| [w, b]));
        v.extend(self.output.ids());
        v
    }
}

#[derive(Clone, Debug)]
pub struct GanModel {
    pub config: GanConfig,
    pub grid: (usize, usize),
    pub work: (usize, usize),
    pub classes: usize,
    pub store: ParamStore,
    pub generator: Generator,
    pub critic: ConvCritic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GanState {
    config: GanConfig,
    grid: (usize, usize),
    classes: usize,
}

fn conv_weight(
    store: &mut ParamStore,
    name: &str,
    shape: [usize; 4],
    outputs: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> (ParamId, ParamId) {
    let w = store.add_uniform(format!("{name}.w"), &shape, fan_in, rng);
    let b = store.add_uniform(format!("{name}.b"), &[outputs], fan_in, rng);
    (w, b)
}

impl GanModel {
    pub fn new(config: GanConfig, grid: (usize, usize), classes: usize) -> Result<Self> {
        config.validate(grid)?;
        if classes == 0 {
            return Err(Error::Config("GAN needs at least one class".into()));
        }
        let mut rng = seed::rng(config.seed, 0x4741_4e00);
        let mut store = ParamStore::new();
        let stages = config.generator_channels.len();
        let work = config.work_grid(grid);
        let (sh, sw) = (work.0 >> stages, work.1 >> stages);
        let c0 = config.generator_channels[0];

        let embedding = store.add_uniform("generator.embedding", &[classes, config.label_dim], 1, &mut rng);
        let input = Dense::new(
            &mut store,
            "generator.input",
            config.noise_dim + config.label_dim,
            c0 * sh * sw,
            true,
            &mut rng,
        );
        let outs: Vec<usize> = config.generator_channels[1..].iter().copied().chain([1]).collect();
        let gen_stages = config
            .generator_channels
            .iter()
            .zip(&outs)
            .enumerate()
            .map(|(i, (&cin, &cout))| {
                conv_weight(
                    &mut store,
                    &format!("generator.up{i}"),
                    [cin, cout, 4, 4],
                    cout,
                    cin * 4,
                    &mut rng,
                )
            })
            .collect();
        let generator = Generator {
            embedding,
            input,
            stages: gen_stages,
            seed_shape: (c0, sh, sw),
        };

        let label_plane = store.add_uniform("critic.label_plane", &[classes, 1], 1, &mut rng);
        let ins: Vec<usize> = [2].into_iter().chain(config.critic_channels.iter().copied()).collect();
        let critic_stages = ins
            .iter()
            .zip(&config.critic_channels)
            .enumerate()
            .map(|(i, (&cin, &cout))| {
                conv_weight(
                    &mut store,
                    &format!("critic.down{i}"),
                    [cout, cin, 4, 4],
                    cout,
                    cin * 16,
                    &mut rng,
                )
            })
            .collect();
        let last = *config.critic_channels.last().unwrap();
        let output = Dense::new(&mut store, "critic.output", last * sh * sw, 1, true, &mut rng);
        let critic = ConvCritic {
            label_plane,
            stages: critic_stages,
            output,
            grid: work,
        };
        Ok(GanModel {
            config,
            grid,
            work,
            classes,
            store,
            generator,
            critic,
        })
    }

    pub fn noise(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..n * self.config.noise_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Tensor::new(&[n, self.config.noise_dim], data)
    }

    /// Generated samples for the given labels on the padded grid, `(B, 1, H, W)`.
    pub fn generate_tensor(&self, noise: &Tensor, labels: &[usize]) -> Tensor {
        let mut g = Graph::inference(&self.store);
        let z = g.input(noise.clone());
        let x = self.generator.forward(&mut g, z, labels);
        g.value(x).clone()
    }

    pub fn generate(&self, noise: &Tensor, labels: &[usize]) -> Vec<RealMatrix> {
        let (h, w) = self.grid;
        let (wh, ww) = self.work;
        self.generate_tensor(noise, labels)
            .data()
            .chunks(wh * ww)
            .map(|c| {
                let data = (0..h)
                    .flat_map(|r| c[r * ww..r * ww + w].iter().map(|v| v.clamp(0.0, 1.0)))
                    .collect();
                RealMatrix::new(h, w, data)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &encode_store(&self.store))?;
        write_json(
            &path.with_extension("state.json"),
            &GanState {
                config: self.config.clone(),
                grid: self.grid,
                classes: self.classes,
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: GanState = read_json(&path.with_extension("state.json"))?;
        let mut model = GanModel::new(state.config, state.grid, state.classes)?;
        let entries = decode_store(&read_bytes(path)?, path)?;
        if entries.len() != model.store.len() {
            return Err(Error::format(path, "GAN checkpoint does not match its configuration"));
        }
        for (name, t) in entries {
            let id = model
                .store
                .find(&name)
                .filter(|&id| model.store.get(id).shape() == t.shape())
                .ok_or_else(|| Error::format(path, format!("unexpected or reshaped parameter `{name}`")))?;
            model.store.set(id, t);
        }
        Ok(model)
    }
}

#[derive(Debug)]
pub struct Penalty {
    pub value: f64,
    /// `‖∇_x̂ D(x̂, y)‖` per interpolated sample.
    pub norms: Vec<f64>,
    pub interpolated: Tensor,
    /// `∇_x̂ Σ_b D(x̂_b, y_b)`, same shape as the interpolates.
    pub input_grads: Tensor,
}

/// `x̂ = ε x + (1 − ε) x̃` with one `ε ~ U[0, 1]` per pair.
pub fn interpolate(real: &Tensor, fake: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches differ in shape");
    let b = real.dim(0);
    let per = real.numel() / b;
    let mut out = Vec::with_capacity(real.numel());
    for i in 0..b {
        let eps: f64 = rng.random();
        let (r, f) = (
            &real.data()[i * per..(i + 1) * per],
            &fake.data()[i * per..(i + 1) * per],
        );
        out.extend(r.iter().zip(f).map(|(a, c)| eps * a + (1.0 - eps) * c));
    }
    Tensor::new(real.shape(), out)
}

fn input_gradients(store: &ParamStore, critic: &dyn Critic, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::inference(store);
    g.disable_grad(critic.ids());
    let xv = g.input_with_grad(x.clone());
    let s = critic.score(&mut g, xv, labels);
    let total = g.sum(s);
    let grads = g.backward(total);
    let gx = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !gx.is_finite() {
        return Err(Error::Diverged("non-finite critic input gradient".into()));
    }
    Ok(gx)
}

/// `β · mean_b (‖∇_x̂ D(x̂_b, y_b)‖ − 1)²` at the given interpolates.
pub fn penalty_at(
    store: &ParamStore,
    critic: &dyn Critic,
    x_hat: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<Penalty> {
    let gx = input_gradients(store, critic, x_hat, labels)?;
    let b = labels.len();
    let norms: Vec<f64> = gx
        .data()
        .chunks(gx.numel() / b)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let value = beta * norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / b as f64;
    Ok(Penalty {
        value,
        norms,
        interpolated: x_hat.clone(),
        input_grads: gx,
    })
}

pub fn gradient_penalty(
    store: &ParamStore,
    critic: &dyn Critic,
    real: &Tensor,
    fake: &Tensor,
    labels: &[usize],
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Penalty> {
    let x_hat = interpolate(real, fake, rng);
    penalty_at(store, critic, &x_hat, labels, beta)
}

fn param_grads_of_sum(store: &ParamStore, critic: &dyn Critic, x: Tensor, labels: &[usize]) -> Grads {
    let mut g = Graph::inference(store);
    let xv = g.input(x);
    let s = critic.score(&mut g, xv, labels);
    let total = g.sum(s);
    g.backward(total)
}

/// Parameter gradient of the penalty. With `F = Σ_b D(x̂_b)`, `g_b = ∇_x̂_b F`
/// and `u_b = 2β(‖g_b‖ − 1) g_b / (B ‖g_b‖)`, the gradient is the mixed
/// second derivative `∂_θ (∇_x F · u)`, taken here as a central difference of
/// `∂_θ F` along `u`.
pub fn penalty_param_grads(
    store: &ParamStore,
    critic: &dyn Critic,
    penalty: &Penalty,
    labels: &[usize],
    beta: f64,
    step: f64,
) -> Result<Grads> {
    let x = &penalty.interpolated;
    let b = labels.len();
    let per = x.numel() / b;
    let mut u = penalty.input_grads.data().to_vec();
    for (chunk, &n) in u.chunks_mut(per).zip(&penalty.norms) {
        let f = if n > 0.0 {
            2.0 * beta * (n - 1.0) / (b as f64 * n)
        } else {
            0.0
        };
        chunk.iter_mut().for_each(|v| *v *= f);
    }
    let unorm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Grads::default();
    if unorm == 0.0 {
        return Ok(out);
    }
    let h = step / unorm;
    let shifted = |sign: f64| {
        let data = x.data().iter().zip(&u).map(|(a, d)| a + sign * h * d).collect();
        Tensor::new(x.shape(), data)
    };
    let up = param_grads_of_sum(store, critic, shifted(1.0), labels);
    let down = param_grads_of_sum(store, critic, shifted(-1.0), labels);
    out.axpy(1.0 / (2.0 * h), &up);
    out.axpy(-1.0 / (2.0 * h), &down);
    if !out.is_finite() {
        return Err(Error::Diverged("non-finite penalty gradient".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpochLog {
    pub epoch: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    /// `E[D(real)] − E[D(fake)]`.
    pub score_gap: f64,
    pub penalty: f64,
    pub critic_steps: usize,
    pub generator_steps: usize,
    pub seed: u64,
}

fn gather(items: &[&RealMatrix], idx: &[usize], work: (usize, usize)) -> Tensor {
    let (wh, ww) = work;
    let mut data = vec![0.0; idx.len() * wh * ww];
    for (k, &i) in idx.iter().enumerate() {
        let m = items[i];
        for r in 0..m.rows {
            let at = (k * wh + r) * ww;
            data[at..at + m.cols].copy_from_slice(&m.data[r * m.cols..(r + 1) * m.cols]);
        }
    }
    Tensor::new(&[idx.len(), 1, wh, ww], data)
}

fn mean_score(store: &ParamStore, critic: &ConvCritic, x: Tensor, labels: &[usize]) -> f64 {
    let mut g = Graph::inference(store);
    let xv = g.input(x);
    let s = critic.score(&mut g, xv, labels);
    g.value(s).sum() / labels.len() as f64
}

/// Alternating WGAN-GP training. One epoch is one pass of the critic over the
/// real data; the generator steps after every `n_critic` critic steps.
pub fn train_cdcgan(
    items: &[&RealMatrix],
    labels: &[usize],
    classes: usize,
    cfg: &GanConfig,
    log: &mut dyn FnMut(&GanEpochLog),
) -> Result<(GanModel, Vec<GanEpochLog>)> {
    if items.is_empty() || items.len() != labels.len() {
        return Err(Error::Insufficient(format!(
            "{} samples with {} labels",
            items.len(),
            labels.len()
        )));
    }
    let grid = (items[0].rows, items[0].cols);
    let mut model = GanModel::new(cfg.clone(), grid, classes)?;
    let gen_ids = model.generator.ids();
    let critic_ids = model.critic.ids();
    let adam = |store: &ParamStore, ids: &[ParamId]| {
        let mut a = Adam::new(store, ids);
        a.beta1 = cfg.adam_beta1;
        a.beta2 = cfg.adam_beta2;
        a
    };
    let mut opt_g = adam(&model.store, &gen_ids);
    let mut opt_d = adam(&model.store, &critic_ids);
    let mut rng = seed::rng(cfg.seed, 0x5447_414e);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut streak = 0;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let (mut critic_sum, mut gen_sum, mut gap_sum, mut pen_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut critic_steps, mut gen_steps) = (0usize, 0usize);
        let batches = class_balanced_batches(labels, cfg.batch_size, seed::derive(cfg.seed, epoch as u64));
        for batch in batches {
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let real = gather(items, &batch, model.work);
            let noise = model.noise(y.len(), &mut rng);
            let fake = model.generate_tensor(&noise, &y);

            let penalty = gradient_penalty(&model.store, &model.critic, &real, &fake, &y, cfg.beta, &mut rng)?;
            let mut grads = penalty_param_grads(&model.store, &model.critic, &penalty, &y, cfg.beta, cfg.hvp_step)?;
            let (d_real, d_fake) = {
                let mut g = Graph::new(&model.store);
                g.disable_grad(gen_ids.iter().copied());
                let rv = g.input(real);
                let fv = g.input(fake);
                let sr = model.critic.score(&mut g, rv, &y);
                let sf = model.critic.score(&mut g, fv, &y);
                let mr = g.mean(sr);
                let mf = g.mean(sf);
                let loss = g.sub(mf, mr);
                grads.axpy(1.0, &g.backward(loss));
                (g.value(mr).item(), g.value(mf).item())
            };
            if !grads.is_finite() {
                return Err(Error::Diverged(format!("non-finite critic gradient at epoch {epoch}")));
            }
            opt_d.step(&mut model.store, &grads, cfg.lr);
            critic_sum += d_fake - d_real + penalty.value;
            gap_sum += d_real - d_fake;
            pen_sum += penalty.value;
            critic_steps += 1;
            step += 1;

            if step.is_multiple_of(cfg.n_critic) {
                let gy: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..classes)).collect();
                let noise = model.noise(gy.len(), &mut rng);
                let (value, grads) = {
                    let mut g = Graph::new(&model.store);
                    g.disable_grad(critic_ids.iter().copied());
                    let z = g.input(noise);
                    let x = model.generator.forward(&mut g, z, &gy);
                    let s = model.critic.score(&mut g, x, &gy);
                    let m = g.mean(s);
                    let loss = g.scale(m, -1.0);
                    (g.value(loss).item(), g.backward(loss))
                };
                if !(value.is_finite() && grads.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite generator loss at epoch {epoch}")));
                }
                opt_g.step(&mut model.store, &grads, cfg.lr);
                gen_sum += value;
                gen_steps += 1;
            }
        }
        let entry = GanEpochLog {
            epoch,
            critic_loss: critic_sum / critic_steps.max(1) as f64,
            generator_loss: gen_sum / gen_steps.max(1) as f64,
            score_gap: gap_sum / critic_steps.max(1) as f64,
            penalty: pen_sum / critic_steps.max(1) as f64,
            critic_steps,
            generator_steps: gen_steps,
            seed: cfg.seed,
        };
        log::info!(
            "gan epoch {epoch}: critic {:.4} generator {:.4} gap {:.4}",
            entry.critic_loss,
            entry.generator_loss,
            entry.score_gap
        );
        if !entry.critic_loss.is_finite() || entry.critic_loss.abs() > cfg.divergence_threshold {
            streak += 1;
            if streak >= cfg.divergence_patience {
                return Err(Error::Diverged(format!(
                    "critic loss {} beyond {} for {streak} consecutive epochs",
                    entry.critic_loss, cfg.divergence_threshold
                )));
            }
        } else {
            streak = 0;
        }
        log(&entry);
        history.push(entry);
    }
    Ok((model, history))
}

/// Mean critic score gap `E[D(real)] − E[D(fake)]` on a fixed evaluation draw.
pub fn score_gap(model: &GanModel, items: &[&RealMatrix], labels: &[usize], seed: u64) -> f64 {
    let idx: Vec<usize> = (0..items.len()).collect();
    let real = gather(items, &idx, model.work);
    let noise = model.noise(labels.len(), &mut seed::rng(seed, 0x4556_414c));
    let fake = model.generate_tensor(&noise, labels);
    mean_score(&model.store, &model.critic, real, labels) - mean_score(&model.store, &model.critic, fake, labels)
}
