//! Checkpoints: a JSON envelope with shapes and metadata, plus one
//! base64-encoded blob of little-endian `f64` values holding every
//! parameter, optimizer moment and GP datum.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agent::AgentNets;
use crate::error::{Error, Result};
use crate::gp::{GpDataset, KernelHyperparams};
use crate::nn::{Activation, Layer, MlpGrads, MlpParams, OptimizerState};

pub const FORMAT: &str = "sgddpg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub nets: AgentNets,
    pub gp: GpDataset,
    pub hp: KernelHyperparams,
    pub beta_value: Option<f64>,
    pub step: usize,
    pub episode: usize,
    /// Flat configuration echo of the run that produced it.
    pub config: Value,
}

#[derive(Serialize, Deserialize)]
struct NetShape {
    /// Layer widths, input first.
    sizes: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Serialize, Deserialize)]
struct GpMeta {
    len: usize,
    dim: usize,
    capacity: usize,
    hyperparams: KernelHyperparams,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    step: usize,
    episode: usize,
    beta_value: Option<f64>,
    config: Value,
    action_bound: Vec<f64>,
    tau: f64,
    /// actor, critic, guard, then their targets in the same order.
    networks: Vec<NetShape>,
    /// actor, critic, guard.
    optimizers: Vec<OptMeta>,
    gp: GpMeta,
    blob_len: usize,
    blob: String,
}

fn shape(net: &MlpParams) -> NetShape {
    let mut sizes = vec![net.input_dim()];
    sizes.extend(net.layers.iter().map(|l| l.weight.nrows()));
    NetShape {
        sizes,
        activations: net.layers.iter().map(|l| l.activation).collect(),
    }
}

fn opt_meta(o: &OptimizerState) -> OptMeta {
    OptMeta {
        step: o.step,
        lr: o.lr,
        beta1: o.beta1,
        beta2: o.beta2,
        epsilon: o.epsilon,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.values.len())
            .ok_or_else(|| bad("blob too short"))?;
        let out = &self.values[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn net(&mut self, s: &NetShape) -> Result<MlpParams> {
        if s.sizes.len() < 2 || s.activations.len() != s.sizes.len() - 1 {
            return Err(bad("malformed network shape"));
        }
        // weights of every layer first, then biases, as in MlpParams::params_iter
        let mut weights = Vec::new();
        for w in s.sizes.windows(2) {
            weights.push(DMatrix::from_column_slice(w[1], w[0], self.take(w[0] * w[1])?));
        }
        let mut layers = Vec::new();
        for ((w, out), act) in weights.into_iter().zip(&s.sizes[1..]).zip(&s.activations) {
            layers.push(Layer {
                weight: w,
                bias: DVector::from_column_slice(self.take(*out)?),
                activation: *act,
            });
        }
        MlpParams::from_layers(layers)
    }

    fn moments(&mut self, net: &MlpParams) -> Result<MlpGrads> {
        let mut g = MlpGrads::zeros_like(net);
        let n = net.num_params();
        for (dst, src) in g.iter_mut().zip(self.take(n)?) {
            *dst = *src;
        }
        Ok(g)
    }

    fn optimizer(&mut self, net: &MlpParams, m: &OptMeta) -> Result<OptimizerState> {
        Ok(OptimizerState {
            first_moment: self.moments(net)?,
            second_moment: self.moments(net)?,
            step: m.step,
            lr: m.lr,
            beta1: m.beta1,
            beta2: m.beta2,
            epsilon: m.epsilon,
        })
    }
}

impl Checkpoint {
    fn networks(&self) -> [&MlpParams; 6] {
        let n = &self.nets;
        [
            &n.actor,
            &n.critic,
            &n.guard,
            &n.actor_target,
            &n.critic_target,
            &n.guard_target,
        ]
    }

    pub fn to_json_string(&self) -> Result<String> {
        let n = &self.nets;
        let mut values: Vec<f64> = Vec::new();
        for net in self.networks() {
            values.extend(net.params_iter());
        }
        for o in [&n.actor_opt, &n.critic_opt, &n.guard_opt] {
            values.extend(o.first_moment.iter());
            values.extend(o.second_moment.iter());
        }
        let dim = self.gp.dim().unwrap_or(0);
        for z in &self.gp.inputs {
            values.extend(z);
        }
        values.extend(&self.gp.targets);
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let env = Envelope {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            episode: self.episode,
            beta_value: self.beta_value,
            config: self.config.clone(),
            action_bound: n.action_bound.clone(),
            tau: n.tau,
            networks: self.networks().iter().map(|m| shape(m)).collect(),
            optimizers: [&n.actor_opt, &n.critic_opt, &n.guard_opt]
                .iter()
                .map(|o| opt_meta(o))
                .collect(),
            gp: GpMeta {
                len: self.gp.len(),
                dim,
                capacity: self.gp.capacity,
                hyperparams: self.hp.clone(),
            },
            blob_len: values.len(),
            blob: STANDARD.encode(bytes),
        };
        Ok(serde_json::to_string(&env)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| bad(format!("malformed envelope: {e}")))?;
        if env.format != FORMAT || env.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", env.format, env.version)));
        }
        if env.networks.len() != 6 || env.optimizers.len() != 3 {
            return Err(bad("expected six networks and three optimizers"));
        }
        let bytes = STANDARD
            .decode(env.blob.as_bytes())
            .map_err(|e| bad(format!("blob: {e}")))?;
        if bytes.len() != env.blob_len * 8 {
            return Err(bad("blob length does not match the envelope"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut r = Reader {
            values: &values,
            pos: 0,
        };
        let mut nets = Vec::with_capacity(6);
        for s in &env.networks {
            nets.push(r.net(s)?);
        }
        let opts = [
            r.optimizer(&nets[0], &env.optimizers[0])?,
            r.optimizer(&nets[1], &env.optimizers[1])?,
            r.optimizer(&nets[2], &env.optimizers[2])?,
        ];
        let GpMeta {
            len,
            dim,
            capacity,
            hyperparams,
        } = env.gp;
        let flat = r
            .take(len.checked_mul(dim).ok_or_else(|| bad("gp size overflow"))?)?
            .to_vec();
        let targets = r.take(len)?.to_vec();
        if r.pos != values.len() {
            return Err(bad("trailing data in blob"));
        }
        let inputs: Vec<Vec<f64>> = if dim == 0 {
            vec![Vec::new(); len]
        } else {
            flat.chunks(dim).map(<[f64]>::to_vec).collect()
        };
        hyperparams.validate()?;
        let [actor_opt, critic_opt, guard_opt] = opts;
        let mut it = nets.into_iter();
        let mut next = || it.next().expect("six networks");
        let nets = AgentNets {
            actor: next(),
            critic: next(),
            guard: next(),
            actor_target: next(),
            critic_target: next(),
            guard_target: next(),
            actor_opt,
            critic_opt,
            guard_opt,
            action_bound: env.action_bound,
            tau: env.tau,
        };
        if nets.action_dim() != nets.actor.output_dim() || !nets.actor.same_shape(&nets.actor_target) {
            return Err(Error::ArchitectureMismatch);
        }
        Ok(Self {
            nets,
            gp: GpDataset {
                inputs,
                targets,
                capacity,
            },
            hp: hyperparams,
            beta_value: env.beta_value,
            step: env.step,
            episode: env.episode,
            config: env.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }
}
