//! The shared decentralized policy network: observation encoder (conv stack
//! + scalar branch + LSTM), transformer-based communication block over the
//! previous step's messages, and the output heads (policy, dual value heads,
//! blocking, next message).

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::layers::{
    conv_relu, dense, dense_relu, ffn, gru_gate, init_attention, init_conv, init_dense, init_ffn,
    init_gru_gate, init_layer_norm, init_lstm, layer_norm, lstm_cell, multihead_attention,
};
use crate::numerics::{Graph, Id, ParamStore, Tensor};
use crate::obs::{Observation, N_CHANNELS};
use crate::world::{Action, Coord, N_ACTIONS};

/// How fused messages are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CommMode {
    /// All-to-all attention.
    Global,
    /// Attention restricted to agents within Euclidean `radius`.
    Local { radius: f64 },
    /// Each agent attends only to itself (communication removed, but the
    /// encoder still processes the self-message).
    SelfOnly,
    /// Communication removed entirely; the fused message is the zero vector.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub fov: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub ffn_dim: usize,
    pub n_blocks: usize,
    pub n_actions: usize,
    /// Output channels of the two conv stages and the final conv.
    pub conv_channels: [usize; 3],
    pub scalar_dim: usize,
    pub comm_mode: CommMode,
    /// Sinusoidal agent-ID embedding added to messages; disabled in
    /// equivariance tests.
    pub positional_embedding: bool,
    /// Initial bias of the GRU gates; positive starts the blocks close to
    /// identity.
    pub gru_bias_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            fov: 3,
            d_model: 256,
            n_heads: 8,
            d_k: 32,
            ffn_dim: 1024,
            n_blocks: 1,
            n_actions: N_ACTIONS,
            conv_channels: [32, 64, 128],
            scalar_dim: 32,
            comm_mode: CommMode::Global,
            positional_embedding: true,
            gru_bias_init: 2.0,
        }
    }
}

impl NetConfig {
    /// Small network for desk-scale experiments and fast tests.
    pub fn small(d_model: usize) -> NetConfig {
        NetConfig {
            d_model,
            n_heads: 4,
            d_k: (d_model / 4).max(4),
            ffn_dim: 4 * d_model,
            conv_channels: [8, 16, 32],
            scalar_dim: 8,
            ..NetConfig::default()
        }
    }

    /// Spatial extent after each stage; 2x2 pooling applies only while the
    /// extent is at least 4, so a 3x3 FOV passes through unpooled.
    fn pooled(extent: usize) -> usize {
        if extent >= 4 {
            extent / 2
        } else {
            extent
        }
    }

    pub fn conv_flat_dim(&self) -> usize {
        let s = Self::pooled(Self::pooled(self.fov));
        self.conv_channels[2] * s * s
    }
}

/// Recurrent state carried by one agent between steps: LSTM hidden and cell
/// vectors plus the message it emitted last step. Zeroed at episode start.
#[derive(Debug, Clone)]
pub struct AgentCarry {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
    pub message: Vec<f64>,
}

impl AgentCarry {
    pub fn zeros(d_model: usize) -> AgentCarry {
        AgentCarry {
            hidden: vec![0.0; d_model],
            cell: vec![0.0; d_model],
            message: vec![0.0; d_model],
        }
    }
}

/// Per-agent network outputs for one step.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub policy_logits: Vec<f64>,
    pub value_ext: f64,
    pub value_int: f64,
    pub blocking_prob: f64,
    pub message: Vec<f64>,
}

/// Team-level forward result, including the intermediates the tie-breaking
/// stage needs for hypothetical re-evaluation.
#[derive(Debug, Clone)]
pub struct TeamOutput {
    pub outputs: Vec<NetOutput>,
    pub carries: Vec<AgentCarry>,
    /// LSTM input (the encoded observation) per agent.
    pub lstm_in: Vec<Vec<f64>>,
    /// Fused communication output per agent.
    pub fused: Vec<Vec<f64>>,
}

/// Node ids of a team forward pass on a caller-owned graph.
pub struct ForwardIds {
    pub logits: Id,
    pub probs: Id,
    pub value_ext: Id,
    pub value_int: Id,
    pub blocking_logit: Id,
    pub messages_out: Id,
    pub lstm_in: Id,
    pub hidden_new: Id,
    pub cell_new: Id,
    pub fused: Id,
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub config: NetConfig,
    pub store: ParamStore,
}

impl PolicyNet {
    pub fn new(config: NetConfig, seed: u64) -> PolicyNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let [c1, c2, c3] = config.conv_channels;
        init_conv(&mut store, &mut rng, "enc/conv0", N_CHANNELS, c1, 3);
        init_conv(&mut store, &mut rng, "enc/conv1", c1, c1, 3);
        init_conv(&mut store, &mut rng, "enc/conv2", c1, c1, 3);
        init_conv(&mut store, &mut rng, "enc/conv3", c1, c2, 3);
        init_conv(&mut store, &mut rng, "enc/conv4", c2, c2, 3);
        init_conv(&mut store, &mut rng, "enc/conv5", c2, c2, 3);
        init_conv(&mut store, &mut rng, "enc/conv6", c2, c3, 3);
        init_dense(&mut store, &mut rng, "enc/scal", 7, config.scalar_dim);
        let concat_dim = config.conv_flat_dim() + config.scalar_dim;
        init_dense(&mut store, &mut rng, "enc/fc1", concat_dim, config.d_model);
        init_dense(&mut store, &mut rng, "enc/fc2", config.d_model, config.d_model);
        init_lstm(&mut store, &mut rng, "enc/lstm", config.d_model, config.d_model);
        for b in 0..config.n_blocks {
            init_layer_norm(&mut store, &format!("comm/b{b}/ln1"), config.d_model);
            init_attention(
                &mut store,
                &mut rng,
                &format!("comm/b{b}/attn"),
                config.d_model,
                config.n_heads,
                config.d_k,
            );
            init_gru_gate(
                &mut store,
                &mut rng,
                &format!("comm/b{b}/gate1"),
                config.d_model,
                config.gru_bias_init,
            );
            init_layer_norm(&mut store, &format!("comm/b{b}/ln2"), config.d_model);
            init_ffn(
                &mut store,
                &mut rng,
                &format!("comm/b{b}/ffn"),
                config.d_model,
                config.ffn_dim,
            );
            init_gru_gate(
                &mut store,
                &mut rng,
                &format!("comm/b{b}/gate2"),
                config.d_model,
                config.gru_bias_init,
            );
        }
        init_dense(&mut store, &mut rng, "heads/shared", 3 * config.d_model, config.d_model);
        init_dense(&mut store, &mut rng, "heads/policy", config.d_model, config.n_actions);
        init_dense(&mut store, &mut rng, "heads/ve", config.d_model, 1);
        init_dense(&mut store, &mut rng, "heads/vi", config.d_model, 1);
        init_dense(&mut store, &mut rng, "heads/block", config.d_model, 1);
        init_dense(&mut store, &mut rng, "heads/msg", config.d_model, config.d_model);
        PolicyNet { config, store }
    }

    /// Packs per-agent observations into the [n, C, f, f] and [n, 7] input
    /// tensors.
    pub fn pack_observations(&self, team_obs: &[Observation]) -> (Tensor, Tensor) {
        let n = team_obs.len();
        let f = self.config.fov;
        let mut maps = Vec::with_capacity(n * N_CHANNELS * f * f);
        let mut scalars = Vec::with_capacity(n * 7);
        for o in team_obs {
            assert_eq!(o.fov, f, "observation FOV does not match NetConfig");
            maps.extend_from_slice(&o.maps);
            scalars.extend_from_slice(&o.scalars);
        }
        (
            Tensor::new(vec![n, N_CHANNELS, f, f], maps),
            Tensor::new(vec![n, 7], scalars),
        )
    }

    /// Full team forward for inference: encodes, communicates over the
    /// previous step's messages, and runs the heads. Does not mutate the
    /// carries it is given; fresh carries are part of the result.
    pub fn forward_team(
        &self,
        team_obs: &[Observation],
        carries: &[AgentCarry],
        positions: &[Coord],
    ) -> TeamOutput {
        let n = team_obs.len();
        let (maps_t, scalars_t) = self.pack_observations(team_obs);
        let dm = self.config.d_model;
        let mut h_data = Vec::with_capacity(n * dm);
        let mut c_data = Vec::with_capacity(n * dm);
        let mut m_data = Vec::with_capacity(n * dm);
        for carry in carries {
            h_data.extend_from_slice(&carry.hidden);
            c_data.extend_from_slice(&carry.cell);
            m_data.extend_from_slice(&carry.message);
        }
        let mut g = Graph::new(&self.store);
        let maps = g.input(maps_t);
        let scalars = g.input(scalars_t);
        let h = g.input(Tensor::new(vec![n, dm], h_data));
        let c = g.input(Tensor::new(vec![n, dm], c_data));
        let messages = g.input(Tensor::new(vec![n, dm], m_data));
        let ids = self.forward_graph(&mut g, maps, scalars, h, c, messages, positions);

        let row = |t: &Tensor, i: usize| {
            let c = t.cols();
            t.data()[i * c..(i + 1) * c].to_vec()
        };
        let mut outputs = Vec::with_capacity(n);
        let mut new_carries = Vec::with_capacity(n);
        let mut lstm_in = Vec::with_capacity(n);
        let mut fused = Vec::with_capacity(n);
        for i in 0..n {
            let blocking_logit = g.value(ids.blocking_logit).at2(i, 0);
            outputs.push(NetOutput {
                policy_logits: row(g.value(ids.logits), i),
                value_ext: g.value(ids.value_ext).at2(i, 0),
                value_int: g.value(ids.value_int).at2(i, 0),
                blocking_prob: sigmoid(blocking_logit),
                message: row(g.value(ids.messages_out), i),
            });
            new_carries.push(AgentCarry {
                hidden: row(g.value(ids.hidden_new), i),
                cell: row(g.value(ids.cell_new), i),
                message: row(g.value(ids.messages_out), i),
            });
            lstm_in.push(row(g.value(ids.lstm_in), i));
            fused.push(row(g.value(ids.fused), i));
        }
        TeamOutput {
            outputs,
            carries: new_carries,
            lstm_in,
            fused,
        }
    }

    /// Wires the whole team forward on a caller-owned graph (used by the
    /// trainer, which needs gradients).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        maps: Id,
        scalars: Id,
        hidden: Id,
        cell: Id,
        prev_messages: Id,
        positions: &[Coord],
    ) -> ForwardIds {
        let (lstm_in, h_new, c_new) = self.encode_graph(g, maps, scalars, hidden, cell);
        let fused = self.communicate_graph(g, prev_messages, positions);
        self.heads_graph(g, lstm_in, h_new, c_new, fused)
    }

    /// Observation encoder: conv stack on the maps, dense on the scalars,
    /// two dense layers on the concatenation, one LSTM step.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        maps: Id,
        scalars: Id,
        hidden: Id,
        cell: Id,
    ) -> (Id, Id, Id) {
        let mut x = conv_relu(g, "enc/conv0", maps);
        x = conv_relu(g, "enc/conv1", x);
        x = conv_relu(g, "enc/conv2", x);
        x = self.maybe_pool(g, x);
        x = conv_relu(g, "enc/conv3", x);
        x = conv_relu(g, "enc/conv4", x);
        x = conv_relu(g, "enc/conv5", x);
        x = self.maybe_pool(g, x);
        x = conv_relu(g, "enc/conv6", x);
        let flat = self.flatten_spatial(g, x);
        let s = dense_relu(g, "enc/scal", scalars);
        let cat = g.tape.concat_cols(&[flat, s]);
        let f1 = dense_relu(g, "enc/fc1", cat);
        let lstm_in = dense_relu(g, "enc/fc2", f1);
        let (h_new, c_new) = lstm_cell(g, "enc/lstm", lstm_in, hidden, cell);
        (lstm_in, h_new, c_new)
    }

    fn maybe_pool(&self, g: &mut Graph, x: Id) -> Id {
        let extent = g.value(x).shape()[2];
        if extent >= 4 {
            g.tape.maxpool2d(x)
        } else {
            x
        }
    }

    fn flatten_spatial(&self, g: &mut Graph, x: Id) -> Id {
        // Row-major [n, c, s, s] data is already laid out as [n, c*s*s].
        let shape = g.value(x).shape().to_vec();
        let n = shape[0];
        let flat: usize = shape[1..].iter().product();
        g.tape.reshape(x, vec![n, flat])
    }

    /// Communication block: sinusoidal ID embedding, then L pre-norm
    /// computation blocks (attention + GRU gate, feed-forward + GRU gate).
    /// Local masking and the self-only/none ablations are applied here.
    pub fn communicate_graph(&self, g: &mut Graph, prev_messages: Id, positions: &[Coord]) -> Id {
        let n = g.value(prev_messages).rows();
        let dm = self.config.d_model;
        if self.config.comm_mode == CommMode::None {
            return g.input(Tensor::zeros(vec![n, dm]));
        }
        let mask: Option<Vec<bool>> = match self.config.comm_mode {
            CommMode::Global | CommMode::None => None,
            CommMode::SelfOnly => {
                let mut m = vec![false; n * n];
                for i in 0..n {
                    m[i * n + i] = true;
                }
                Some(m)
            }
            CommMode::Local { radius } => {
                assert_eq!(positions.len(), n, "local comm needs positions");
                let mut m = vec![false; n * n];
                for i in 0..n {
                    for j in 0..n {
                        m[i * n + j] = positions[i].euclidean(positions[j]) <= radius;
                    }
                }
                Some(m)
            }
        };
        let mut x = prev_messages;
        if self.config.positional_embedding {
            let pe = g.input(positional_embedding(n, dm));
            x = g.tape.add(x, pe);
        }
        for b in 0..self.config.n_blocks {
            let normed = layer_norm(g, &format!("comm/b{b}/ln1"), x);
            let attn = multihead_attention(
                g,
                &format!("comm/b{b}/attn"),
                normed,
                self.config.n_heads,
                self.config.d_k,
                mask.as_deref(),
            );
            x = gru_gate(g, &format!("comm/b{b}/gate1"), x, attn);
            let normed2 = layer_norm(g, &format!("comm/b{b}/ln2"), x);
            let ff = ffn(g, &format!("comm/b{b}/ffn"), normed2);
            x = gru_gate(g, &format!("comm/b{b}/gate2"), x, ff);
        }
        x
    }

    /// Output heads over [fused, lstm_out, lstm_in].
    pub fn heads_graph(&self, g: &mut Graph, lstm_in: Id, h_new: Id, c_new: Id, fused: Id) -> ForwardIds {
        let cat = g.tape.concat_cols(&[fused, h_new, lstm_in]);
        let shared = dense_relu(g, "heads/shared", cat);
        let logits = dense(g, "heads/policy", shared);
        let probs = g.tape.softmax(logits, None);
        let value_ext = dense(g, "heads/ve", shared);
        let value_int = dense(g, "heads/vi", shared);
        let blocking_logit = dense(g, "heads/block", shared);
        let messages_out = dense(g, "heads/msg", shared);
        ForwardIds {
            logits,
            probs,
            value_ext,
            value_int,
            blocking_logit,
            messages_out,
            lstm_in,
            hidden_new: h_new,
            cell_new: c_new,
            fused,
        }
    }

    /// Encodes a single agent without touching team state; used by the
    /// tie-breaking stage to evaluate hypothetical positions.
    pub fn encode_single(&self, obs: &Observation, carry: &AgentCarry) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dm = self.config.d_model;
        let (maps_t, scalars_t) = self.pack_observations(std::slice::from_ref(obs));
        let mut g = Graph::new(&self.store);
        let maps = g.input(maps_t);
        let scalars = g.input(scalars_t);
        let h = g.input(Tensor::new(vec![1, dm], carry.hidden.clone()));
        let c = g.input(Tensor::new(vec![1, dm], carry.cell.clone()));
        let (lstm_in, h_new, c_new) = self.encode_graph(&mut g, maps, scalars, h, c);
        (
            g.value(lstm_in).data().to_vec(),
            g.value(h_new).data().to_vec(),
            g.value(c_new).data().to_vec(),
        )
    }

    /// Value heads only, from precomputed intermediates. Returns (ve, vi).
    /// The LSTM cell state does not feed the heads, so it is not needed here.
    pub fn head_values(&self, lstm_in: &[f64], lstm_out: &[f64], fused: &[f64]) -> (f64, f64) {
        let dm = self.config.d_model;
        let mut g = Graph::new(&self.store);
        let li = g.input(Tensor::new(vec![1, dm], lstm_in.to_vec()));
        let h = g.input(Tensor::new(vec![1, dm], lstm_out.to_vec()));
        let c = g.input(Tensor::zeros(vec![1, dm]));
        let f = g.input(Tensor::new(vec![1, dm], fused.to_vec()));
        let ids = self.heads_graph(&mut g, li, h, c, f);
        (g.value(ids.value_ext).item(), g.value(ids.value_int).item())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Sinusoidal embedding of agent IDs 1..n.
pub fn positional_embedding(n: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; n * d_model];
    for i in 0..n {
        let id = (i + 1) as f64;
        for k in 0..d_model {
            let exponent = (2 * (k / 2)) as f64 / d_model as f64;
            let angle = id / 10000f64.powf(exponent);
            data[i * d_model + k] = if k % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n, d_model], data)
}

/// Samples an action from the renormalized softmax over unmasked logits.
/// `forbidden[a] = true` removes action `a`. Returns the action and its log
/// probability under the masked distribution. If everything is forbidden the
/// agent stays, flagged by the boolean.
pub fn act<R: Rng>(logits: &[f64], forbidden: &[bool], rng: &mut R) -> (Action, f64, bool) {
    debug_assert_eq!(logits.len(), forbidden.len());
    if forbidden.iter().all(|&f| f) {
        return (Action::Stay, 0.0, true);
    }
    let probs = masked_softmax(logits, forbidden);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            chosen = Some(a);
            break;
        }
    }
    // Guard against accumulated rounding at u ~ 1.
    let a = chosen.unwrap_or_else(|| {
        (0..probs.len()).rev().find(|&i| probs[i] > 0.0).unwrap()
    });
    (Action::from_index(a).unwrap(), probs[a].ln(), false)
}

/// Greedy argmax over unmasked logits.
pub fn act_greedy(logits: &[f64], forbidden: &[bool]) -> Action {
    let mut best = None;
    for (a, &l) in logits.iter().enumerate() {
        if forbidden[a] {
            continue;
        }
        if best.map_or(true, |(_, bl)| l > bl) {
            best = Some((a, l));
        }
    }
    match best {
        Some((a, _)) => Action::from_index(a).unwrap(),
        None => Action::Stay,
    }
}

/// Softmax over unmasked entries; masked entries get probability 0.
pub fn masked_softmax(logits: &[f64], forbidden: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(forbidden)
        .filter(|(_, &f)| !f)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        if !forbidden[i] {
            out[i] = (logits[i] - max).exp();
            sum += out[i];
        }
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}
