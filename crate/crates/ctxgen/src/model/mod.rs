//! The three networks: LSTM generator, LSTM encoder with Gaussian heads,
//! and one convolutional discriminator per attribute.

mod discriminator;
mod encoder;
mod generator;
mod lstm;
mod raw;

pub use discriminator::{discriminate, discriminate_probs, DiscInput};
pub use encoder::{encode, encode_soft, encoder_logdensity, gaussian_logdensity, reparameterize};
pub use generator::{decode_soft, decode_teacher_forced, generator_init_state, TeacherForced};
pub use lstm::{lstm_step, LstmVars};
pub use raw::{argmax, decode_greedy, decode_sample, trim_at_eos, RawState};

use crate::data::PAD;
use crate::rng::stream;
use autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Structural hyperparameters shared by all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_emb: usize,
    pub d_hid: usize,
    pub d_z: usize,
    pub max_len: usize,
    /// Concatenate (z, c) onto every generator input, not just the initial
    /// state. Gives the codes a one-hop path to each step's logits.
    pub per_step_code: bool,
    /// Attribute names with category counts, in declaration order; the
    /// structured code c concatenates one one-hot block per entry.
    pub attrs: Vec<(String, usize)>,
    pub disc_windows: Vec<usize>,
    pub disc_feature_maps: usize,
}

impl ModelConfig {
    /// Width of the structured code c.
    pub fn d_c(&self) -> usize {
        self.attrs.iter().map(|(_, k)| k).sum()
    }

    /// Offset of an attribute's one-hot block within c.
    pub fn c_offset(&self, attr: usize) -> usize {
        self.attrs[..attr].iter().map(|(_, k)| k).sum()
    }

    /// Number of soft-decoding steps: fixed at max_len so EOS and anything
    /// after it still reach the discriminator.
    pub fn soft_steps(&self) -> usize {
        self.max_len
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|(n, _)| n == name)
    }

    /// Width of one generator LSTM input row.
    pub fn gen_in_dim(&self) -> usize {
        self.d_emb + if self.per_step_code { self.d_z + self.d_c() } else { 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GenParams {
    pub emb: ParamId,
    pub lstm: LstmParams,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncParams {
    pub emb: ParamId,
    pub lstm: LstmParams,
    pub mu_w: ParamId,
    pub mu_b: ParamId,
    pub lv_w: ParamId,
    pub lv_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    pub window: usize,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct DiscParams {
    pub emb: ParamId,
    pub convs: Vec<ConvParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Whether a forward pass should register parameters on the tape (so they
/// receive gradients) or freeze them as constants. Freezing realizes every
/// stop-gradient in the objectives: a loss built over frozen parameters
/// cannot push gradient into them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Live,
    Frozen,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub gen: GenParams,
    pub enc: EncParams,
    pub discs: Vec<DiscParams>,
}

impl Model {
    /// Build and initialize all parameters from the "init" stream of `seed`.
    /// Registration order is fixed, so identical (config, seed) pairs give
    /// bit-identical models.
    pub fn new(cfg: ModelConfig, seed: u64) -> Model {
        assert!(!cfg.attrs.is_empty(), "at least one attribute required");
        assert!(cfg.vocab_size > 0 && cfg.d_emb > 0 && cfg.d_hid > 0 && cfg.d_z > 0);
        let mut rng = stream(seed, "init", 0);
        let mut store = ParamStore::new();
        let v = cfg.vocab_size;
        let (e, h, dz, dc) = (cfg.d_emb, cfg.d_hid, cfg.d_z, cfg.d_c());

        let gen = GenParams {
            emb: reg_uniform(&mut store, &mut rng, "gen.emb", vec![v, e], 0.1),
            lstm: reg_lstm(&mut store, &mut rng, "gen.lstm", cfg.gen_in_dim(), h),
            init_w: reg_fan_in(&mut store, &mut rng, "gen.init.w", vec![dz + dc, 2 * h]),
            init_b: reg_zeros(&mut store, "gen.init.b", vec![1, 2 * h]),
            out_w: reg_fan_in(&mut store, &mut rng, "gen.out.w", vec![h, v]),
            out_b: reg_zeros(&mut store, "gen.out.b", vec![1, v]),
        };
        let enc = EncParams {
            emb: reg_uniform(&mut store, &mut rng, "enc.emb", vec![v, e], 0.1),
            lstm: reg_lstm(&mut store, &mut rng, "enc.lstm", e, h),
            mu_w: reg_fan_in(&mut store, &mut rng, "enc.mu.w", vec![h, dz]),
            mu_b: reg_zeros(&mut store, "enc.mu.b", vec![1, dz]),
            lv_w: reg_fan_in(&mut store, &mut rng, "enc.logvar.w", vec![h, dz]),
            lv_b: reg_zeros(&mut store, "enc.logvar.b", vec![1, dz]),
        };
        let nf = cfg.disc_feature_maps;
        let discs = cfg
            .attrs
            .iter()
            .map(|(name, k)| {
                let emb =
                    reg_uniform(&mut store, &mut rng, &format!("disc.{name}.emb"), vec![v, e], 0.1);
                let convs = cfg
                    .disc_windows
                    .iter()
                    .map(|&w| ConvParams {
                        window: w,
                        w: reg_fan_in(
                            &mut store,
                            &mut rng,
                            &format!("disc.{name}.conv{w}.w"),
                            vec![w * e, nf],
                        ),
                        b: reg_zeros(&mut store, &format!("disc.{name}.conv{w}.b"), vec![1, nf]),
                    })
                    .collect();
                DiscParams {
                    emb,
                    convs,
                    head_w: reg_fan_in(
                        &mut store,
                        &mut rng,
                        &format!("disc.{name}.head.w"),
                        vec![cfg.disc_windows.len() * nf, *k],
                    ),
                    head_b: reg_zeros(&mut store, &format!("disc.{name}.head.b"), vec![1, *k]),
                }
            })
            .collect();

        let mut m = Model { cfg, store, gen, enc, discs };
        for i in 0..m.discs.len() {
            m.pin_disc_pad_row(i);
        }
        m
    }

    /// Zero the PAD row of a discriminator embedding. Called after every
    /// discriminator update; padding invariance depends on it.
    pub fn pin_disc_pad_row(&mut self, disc: usize) {
        let e = self.cfg.d_emb;
        let t = self.store.get_mut(self.discs[disc].emb);
        t.data_mut()[PAD * e..(PAD + 1) * e].fill(0.0);
    }

    /// Parameter ids of θ_G, in registration order.
    pub fn gen_ids(&self) -> Vec<ParamId> {
        vec![
            self.gen.emb,
            self.gen.lstm.w_x,
            self.gen.lstm.w_h,
            self.gen.lstm.b,
            self.gen.init_w,
            self.gen.init_b,
            self.gen.out_w,
            self.gen.out_b,
        ]
    }

    /// Parameter ids of θ_E, in registration order.
    pub fn enc_ids(&self) -> Vec<ParamId> {
        vec![
            self.enc.emb,
            self.enc.lstm.w_x,
            self.enc.lstm.w_h,
            self.enc.lstm.b,
            self.enc.mu_w,
            self.enc.mu_b,
            self.enc.lv_w,
            self.enc.lv_b,
        ]
    }

    /// Parameter ids of one attribute's θ_D, in registration order.
    pub fn disc_ids(&self, disc: usize) -> Vec<ParamId> {
        let d = &self.discs[disc];
        let mut ids = vec![d.emb];
        for c in &d.convs {
            ids.push(c.w);
            ids.push(c.b);
        }
        ids.push(d.head_w);
        ids.push(d.head_b);
        ids
    }

    /// Put a parameter on the tape according to `mode`.
    pub fn pvar(&self, tape: &mut Tape, id: ParamId, mode: ParamMode) -> Var {
        match mode {
            ParamMode::Live => tape.param(&self.store, id),
            ParamMode::Frozen => tape.constant_tensor(self.store.get(id)),
        }
    }

    pub fn lstm_vars(&self, tape: &mut Tape, p: LstmParams, mode: ParamMode) -> LstmVars {
        LstmVars {
            w_x: self.pvar(tape, p.w_x, mode),
            w_h: self.pvar(tape, p.w_h, mode),
            b: self.pvar(tape, p.b, mode),
        }
    }

    /// One-hot encode a full structured code from per-attribute categories.
    pub fn one_hot_c(&self, cats: &[usize]) -> Vec<f64> {
        assert_eq!(cats.len(), self.cfg.attrs.len());
        let mut c = vec![0.0; self.cfg.d_c()];
        for (ai, &cat) in cats.iter().enumerate() {
            assert!(cat < self.cfg.attrs[ai].1, "category out of range");
            c[self.cfg.c_offset(ai) + cat] = 1.0;
        }
        c
    }

    /// Draw (z, c) from their priors: z standard normal, each attribute
    /// uniform over its categories. Returns flattened row-major batches.
    pub fn sample_prior(&self, rng: &mut ChaCha8Rng, batch: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<usize>>) {
        let mut z = Vec::with_capacity(batch * self.cfg.d_z);
        let mut c = Vec::with_capacity(batch * self.cfg.d_c());
        let mut cats = Vec::with_capacity(batch);
        for _ in 0..batch {
            for _ in 0..self.cfg.d_z {
                z.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            let row: Vec<usize> =
                self.cfg.attrs.iter().map(|(_, k)| rng.gen_range(0..*k)).collect();
            c.extend(self.one_hot_c(&row));
            cats.push(row);
        }
        (z, c, cats)
    }
}

fn reg_uniform(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: Vec<usize>,
    scale: f64,
) -> ParamId {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    store.register(name, Tensor::new(shape, data))
}

fn reg_fan_in(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: Vec<usize>,
) -> ParamId {
    let scale = 1.0 / (shape[0] as f64).sqrt();
    reg_uniform(store, rng, name, shape, scale)
}

fn reg_zeros(store: &mut ParamStore, name: &str, shape: Vec<usize>) -> ParamId {
    let n: usize = shape.iter().product();
    store.register(name, Tensor::new(shape, vec![0.0; n]))
}

/// Gate layout is [input, forget, cell, output] along the 4H axis; the
/// forget gate bias starts at 1 so early training does not wash out state.
fn reg_lstm(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_in: usize, h: usize) -> LstmParams {
    let w_x = reg_fan_in(store, rng, &format!("{prefix}.w_x"), vec![d_in, 4 * h]);
    let w_h = reg_fan_in(store, rng, &format!("{prefix}.w_h"), vec![h, 4 * h]);
    let mut bias = vec![0.0; 4 * h];
    bias[h..2 * h].fill(1.0);
    let b = store.register(&format!("{prefix}.b"), Tensor::new(vec![1, 4 * h], bias));
    LstmParams { w_x, w_h, b }
}

#[cfg(test)]
pub(crate) fn micro_config(attrs: Vec<(String, usize)>) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        d_emb: 8,
        d_hid: 8,
        d_z: 4,
        max_len: 5,
        per_step_code: false,
        attrs,
        disc_windows: vec![3, 4, 5],
        disc_feature_maps: 4,
    }
}
