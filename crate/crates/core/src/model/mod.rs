//! CNN front-end, Gaussian range encoding, encoder stacks, the four variant
//! bodies and the Siamese scoring head.

mod config;

use alloc::format;
use alloc::vec::Vec;

pub use config::{ModelConfig, Variant, FRONTEND_KERNELS, FRONTEND_REDUCTION, HEAD_HIDDEN};

use crate::autodiff::nn::{Conv1d, Gru, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::autodiff::{Graph, Mode, ParamId, ParamStore, Real, Tensor, Var};
use crate::dtw::AlignedPair;
use crate::{Error, Result};

/// Learnable Gaussian range encoding over `positions` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRangeEncoding {
    pub mu: ParamId,
    pub rho: ParamId,
    pub emb: ParamId,
    pub positions: usize,
    pub ranges: usize,
}

impl GaussianRangeEncoding {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        positions: usize,
        width: usize,
        ranges: usize,
    ) -> Result<Self> {
        if ranges < 2 {
            return Err(Error::Config(format!("gaussian range encoding needs K >= 2, got {ranges}")));
        }
        let step = positions as f64 / ranges as f64;
        let mu: Vec<F> = (0..ranges).map(|k| F::of(k as f64 * step)).collect();
        let rho = crate::autodiff::inverse_softplus(step);
        Ok(Self {
            mu: store.add(format!("{name}.mu"), Tensor::new(&[ranges], mu)?)?,
            rho: store.add(format!("{name}.rho"), Tensor::new(&[ranges], alloc::vec![F::of(rho); ranges])?)?,
            emb: store.add(format!("{name}.emb"), init.normal(&[ranges, width], 0.02))?,
            positions,
            ranges,
        })
    }

    /// positions×K mixing weights.
    pub fn weights<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let mu = g.param(self.mu);
        let rho = g.param(self.rho);
        g.gre_weights(mu, rho, self.positions)
    }

    /// positions×width encoding.
    pub fn encoding<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let w = self.weights(g)?;
        let e = g.param(self.emb);
        g.matmul(w, e)
    }

    pub fn apply<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let enc = self.encoding(g)?;
        g.add(x, enc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    /// relu(x W1 + b1) W2 + b2
    Dense { fc1: Linear, fc2: Linear },
    /// relu of summed parallel convolutions along the token axis.
    MultiScale(Vec<Conv1d>),
    /// Two kernel-3 convolutions along the token axis with a relu between.
    Conv { conv1: Conv1d, conv2: Conv1d },
}

impl FeedForward {
    fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match self {
            FeedForward::Dense { fc1, fc2 } => {
                let h = fc1.forward(g, x)?;
                let h = g.relu(h);
                fc2.forward(g, h)
            }
            FeedForward::MultiScale(convs) => {
                let mut acc = convs[0].forward(g, x)?;
                for c in &convs[1..] {
                    let y = c.forward(g, x)?;
                    acc = g.add(acc, y)?;
                }
                Ok(g.relu(acc))
            }
            FeedForward::Conv { conv1, conv2 } => {
                let h = conv1.forward(g, x)?;
                let h = g.relu(h);
                conv2.forward(g, h)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FeedForwardKind {
    Dense,
    MultiScale,
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

/// GRE followed by post-norm transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStack {
    pub gre: GaussianRangeEncoding,
    pub blocks: Vec<EncoderBlock>,
    pub dropout: f64,
    pub tokens: usize,
    pub width: usize,
}

impl EncoderStack {
    #[allow(clippy::too_many_arguments)]
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Init,
        name: &str,
        tokens: usize,
        width: usize,
        heads: usize,
        cfg: &ModelConfig,
        kind: FeedForwardKind,
    ) -> Result<Self> {
        let gre = GaussianRangeEncoding::new(store, init, &format!("{name}.gre"), tokens, width, cfg.gre_ranges)?;
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for b in 0..cfg.num_blocks {
            let p = format!("{name}.block{b}");
            let attn = MultiHeadAttention::new(store, init, &format!("{p}.attn"), width, heads)?;
            let norm1 = LayerNorm::new(store, &format!("{p}.ln1"), width)?;
            let ffn = match kind {
                FeedForwardKind::Dense => FeedForward::Dense {
                    fc1: Linear::new(store, init, &format!("{p}.ffn.fc1"), width, cfg.ffn_dim)?,
                    fc2: Linear::new(store, init, &format!("{p}.ffn.fc2"), cfg.ffn_dim, width)?,
                },
                FeedForwardKind::MultiScale => FeedForward::MultiScale(
                    [1usize, 3, 5]
                        .iter()
                        .map(|&k| Conv1d::new(store, init, &format!("{p}.ffn.conv_k{k}"), k, width, width))
                        .collect::<Result<_>>()?,
                ),
                FeedForwardKind::Conv => FeedForward::Conv {
                    conv1: Conv1d::new(store, init, &format!("{p}.ffn.conv1"), 3, width, cfg.ffn_dim)?,
                    conv2: Conv1d::new(store, init, &format!("{p}.ffn.conv2"), 3, cfg.ffn_dim, width)?,
                },
            };
            let norm2 = LayerNorm::new(store, &format!("{p}.ln2"), width)?;
            blocks.push(EncoderBlock { attn, norm1, ffn, norm2 });
        }
        Ok(Self {
            gre,
            blocks,
            dropout: cfg.dropout,
            tokens,
            width,
        })
    }

    /// `x` is tokens×width; output has the same shape.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        if g.shape(x) != [self.tokens, self.width] {
            return Err(Error::shape(
                "encoder_stack",
                format!("input {:?}, expected [{}, {}]", g.shape(x), self.tokens, self.width),
            ));
        }
        let mut h = self.gre.apply(g, x)?;
        for block in &self.blocks {
            let a = block.attn.forward(g, h)?;
            let a = g.dropout(a, self.dropout);
            let r = g.add(h, a)?;
            h = block.norm1.forward(g, r)?;
            let f = block.ffn.forward(g, h)?;
            let f = g.dropout(f, self.dropout);
            let r = g.add(h, f)?;
            h = block.norm2.forward(g, r)?;
        }
        Ok(h)
    }
}

/// Three [conv -> relu -> max-pool 2] stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Frontend {
    pub convs: Vec<Conv1d>,
    input_length: usize,
    input_channels: usize,
}

impl Frontend {
    fn new<F: Real>(store: &mut ParamStore<F>, init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = cfg.input_channels;
        for (i, &k) in FRONTEND_KERNELS.iter().enumerate() {
            convs.push(Conv1d::new(store, init, &format!("frontend.conv{i}"), k, cin, cfg.d_model)?);
            cin = cfg.d_model;
        }
        Ok(Self {
            convs,
            input_length: cfg.input_length,
            input_channels: cfg.input_channels,
        })
    }

    /// Returns the final output and the row count after every pooling stage.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<(Var, Vec<usize>)> {
        if g.shape(x) != [self.input_length, self.input_channels] {
            return Err(Error::shape(
                "cnn_frontend",
                format!("input {:?}, expected [{}, {}]", g.shape(x), self.input_length, self.input_channels),
            ));
        }
        let mut h = x;
        let mut lengths = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let c = conv.forward(g, h)?;
            let r = g.relu(c);
            h = g.max_pool2(r)?;
            lengths.push(g.value(h).rows());
        }
        Ok((h, lengths))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Vanilla and gait: temporal encoder then GRU.
    Recurrent { encoder: EncoderStack, rnn: Gru },
    /// Vanilla temporal branch plus channel branch.
    TemporalChannel {
        encoder: EncoderStack,
        rnn: Gru,
        channel: EncoderStack,
        channel_proj: Linear,
    },
    /// THAT-style two-stream encoder with mean pooling.
    TwoStream {
        temporal: EncoderStack,
        channel: EncoderStack,
        temporal_proj: Linear,
        channel_proj: Linear,
    },
}

/// Shapes observed while embedding one input.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub input: (usize, usize),
    pub frontend_stage_lengths: Vec<usize>,
    pub frontend: (usize, usize),
    pub temporal_tokens: Option<(usize, usize)>,
    pub temporal_embedding: Option<usize>,
    pub channel_tokens: Option<(usize, usize)>,
    pub channel_embedding: Option<usize>,
    pub embedding: usize,
}

fn dims<F: Real>(g: &Graph<'_, F>, v: Var) -> (usize, usize) {
    (g.value(v).rows(), g.value(v).cols())
}

/// Parameter layout of a Siamese model; independent of float width.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseNet {
    config: ModelConfig,
    pub frontend: Frontend,
    pub body: Body,
    pub head_fc1: Linear,
    pub head_fc2: Linear,
}

impl SiameseNet {
    /// Registers all parameters in `store` and returns the layout.
    pub fn build<F: Real>(config: &ModelConfig, store: &mut ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut init = Init::new(cfg.seed);
        let frontend = Frontend::new(store, &mut init, cfg)?;
        let (t, d) = (cfg.frontend_out_length, cfg.d_model);
        let temporal = |store: &mut ParamStore<F>, init: &mut Init, kind| {
            EncoderStack::new(store, init, "temporal", t, d, cfg.heads, cfg, kind)
        };
        let channel = |store: &mut ParamStore<F>, init: &mut Init, kind| {
            EncoderStack::new(store, init, "channel", d, t, cfg.channel_heads, cfg, kind)
        };
        let body = match cfg.variant {
            Variant::Vanilla | Variant::Gait => {
                let kind = if cfg.variant == Variant::Gait {
                    FeedForwardKind::Conv
                } else {
                    FeedForwardKind::Dense
                };
                let encoder = temporal(store, &mut init, kind)?;
                let rnn = Gru::new(store, &mut init, "rnn", d, cfg.rnn_hidden)?;
                Body::Recurrent { encoder, rnn }
            }
            Variant::VanillaTc => {
                let encoder = temporal(store, &mut init, FeedForwardKind::Dense)?;
                let rnn = Gru::new(store, &mut init, "rnn", d, cfg.rnn_hidden)?;
                let channel = channel(store, &mut init, FeedForwardKind::Dense)?;
                let channel_proj = Linear::new(store, &mut init, "channel.proj", t, cfg.channel_branch_out)?;
                Body::TemporalChannel {
                    encoder,
                    rnn,
                    channel,
                    channel_proj,
                }
            }
            Variant::That => {
                let temporal_enc = temporal(store, &mut init, FeedForwardKind::MultiScale)?;
                let channel_enc = channel(store, &mut init, FeedForwardKind::MultiScale)?;
                let temporal_proj = Linear::new(store, &mut init, "temporal.proj", d, d)?;
                let channel_proj = Linear::new(store, &mut init, "channel.proj", t, d)?;
                Body::TwoStream {
                    temporal: temporal_enc,
                    channel: channel_enc,
                    temporal_proj,
                    channel_proj,
                }
            }
        };
        let e = cfg.embedding_size();
        let head_fc1 = Linear::new(store, &mut init, "head.fc1", 2 * e, HEAD_HIDDEN)?;
        let head_fc2 = Linear::new(store, &mut init, "head.fc2", HEAD_HIDDEN, 1)?;
        mirror_head(store, &mut init, &head_fc1, &head_fc2, e)?;
        Ok(Self {
            config: config.clone(),
            frontend,
            body,
            head_fc1,
            head_fc2,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Channel branch of the vanilla-tc variant on a front-end output
    /// (tokens×width): transpose, encode channel tokens, average, project.
    pub fn channel_branch<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        match &self.body {
            Body::TemporalChannel {
                channel, channel_proj, ..
            } => {
                let xt = g.transpose(x);
                let h = channel.forward(g, xt)?;
                let m = g.mean_rows(h);
                channel_proj.forward(g, m)
            }
            _ => Err(Error::Config(format!(
                "variant {} has no channel branch",
                self.config.variant
            ))),
        }
    }

    /// Front-end tokens covering the first `valid_length` input rows.
    pub fn valid_tokens(&self, valid_length: usize) -> usize {
        valid_length
            .div_ceil(FRONTEND_REDUCTION)
            .clamp(1, self.config.frontend_out_length)
    }

    /// Embeds one input_length×channels signature half whose first
    /// `valid_length` rows carry signal; the rest is zero padding.
    pub fn embed<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, valid_length: usize) -> Result<Var> {
        self.embed_traced(g, x, valid_length, &mut ShapeTrace::default())
    }

    /// The recurrent state is read after the last valid token and temporal
    /// mean pooling covers valid tokens only.
    pub fn embed_traced<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        valid_length: usize,
        trace: &mut ShapeTrace,
    ) -> Result<Var> {
        trace.input = dims(g, x);
        let steps = self.valid_tokens(valid_length);
        let (h, lengths) = self.frontend.forward(g, x)?;
        trace.frontend_stage_lengths = lengths;
        trace.frontend = dims(g, h);
        let e = match &self.body {
            Body::Recurrent { encoder, rnn } => {
                let z = encoder.forward(g, h)?;
                trace.temporal_tokens = Some(dims(g, z));
                let s = rnn.forward_steps(g, z, steps)?;
                trace.temporal_embedding = Some(g.value(s).len());
                s
            }
            Body::TemporalChannel {
                encoder,
                rnn,
                channel,
                channel_proj,
            } => {
                let z = encoder.forward(g, h)?;
                trace.temporal_tokens = Some(dims(g, z));
                let s = rnn.forward_steps(g, z, steps)?;
                trace.temporal_embedding = Some(g.value(s).len());
                let xt = g.transpose(h);
                trace.channel_tokens = Some(dims(g, xt));
                let c = channel.forward(g, xt)?;
                let m = g.mean_rows(c);
                let c = channel_proj.forward(g, m)?;
                trace.channel_embedding = Some(g.value(c).len());
                g.concat_cols(&[s, c])?
            }
            Body::TwoStream {
                temporal,
                channel,
                temporal_proj,
                channel_proj,
            } => {
                let z = temporal.forward(g, h)?;
                trace.temporal_tokens = Some(dims(g, z));
                let zv = g.slice(z, 0, steps, 0, self.config.d_model)?;
                let zm = g.mean_rows(zv);
                let s = temporal_proj.forward(g, zm)?;
                trace.temporal_embedding = Some(g.value(s).len());
                let xt = g.transpose(h);
                trace.channel_tokens = Some(dims(g, xt));
                let c = channel.forward(g, xt)?;
                let cm = g.mean_rows(c);
                let c = channel_proj.forward(g, cm)?;
                trace.channel_embedding = Some(g.value(c).len());
                g.concat_cols(&[s, c])?
            }
        };
        trace.embedding = g.value(e).len();
        Ok(e)
    }

    /// Match probability for (enrolled, questioned) embeddings.
    pub fn score<F: Real>(&self, g: &mut Graph<'_, F>, enrolled: Var, questioned: Var) -> Result<Var> {
        let e = self.config.embedding_size();
        if g.value(enrolled).len() != e || g.value(questioned).len() != e {
            return Err(Error::shape(
                "siamese_score",
                format!(
                    "embeddings {:?} and {:?}, expected {e}",
                    g.shape(enrolled),
                    g.shape(questioned)
                ),
            ));
        }
        let cat = g.concat_cols(&[enrolled, questioned])?;
        let h = self.head_fc1.forward(g, cat)?;
        let h = g.relu(h);
        let logit = self.head_fc2.forward(g, h)?;
        Ok(g.sigmoid(logit))
    }
}

/// Initialises the head so that hidden units come in mirrored pairs
/// `relu(u·(e1 - e2))`, `relu(u·(e2 - e1))` and the output weights are
/// negative: at initialisation the logit falls with `sum |u·(e1 - e2)|`.
fn mirror_head<F: Real>(
    store: &mut ParamStore<F>,
    init: &mut Init,
    fc1: &Linear,
    fc2: &Linear,
    e: usize,
) -> Result<()> {
    let base: Tensor<F> = init.xavier(&[e, HEAD_HIDDEN / 2], 2 * e, HEAD_HIDDEN);
    let mut w = alloc::vec![F::zero(); 2 * e * HEAD_HIDDEN];
    for i in 0..e {
        for u in 0..HEAD_HIDDEN / 2 {
            let v = base.get(i, u);
            w[i * HEAD_HIDDEN + 2 * u] = v;
            w[i * HEAD_HIDDEN + 2 * u + 1] = -v;
            w[(e + i) * HEAD_HIDDEN + 2 * u] = -v;
            w[(e + i) * HEAD_HIDDEN + 2 * u + 1] = v;
        }
    }
    store.set_value(fc1.w, Tensor::new(&[2 * e, HEAD_HIDDEN], w)?)?;
    let out: Tensor<F> = init.xavier(&[HEAD_HIDDEN, 1], HEAD_HIDDEN, 1);
    let out = out.data().iter().map(|v| -v.abs()).collect();
    store.set_value(fc2.w, Tensor::new(&[HEAD_HIDDEN, 1], out)?)?;
    Ok(())
}

/// Copies one aligned half into a length×channels tensor.
pub fn half_tensor<F: Real>(values: &[f64], length: usize, channels: usize) -> Result<Tensor<F>> {
    Tensor::from_f64(&[length, channels], values)
}

/// A layout together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel<F: Real> {
    net: SiameseNet,
    params: ParamStore<F>,
}

impl<F: Real> SiameseModel<F> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = SiameseNet::build(&config, &mut params)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn net(&self) -> &SiameseNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same layout in another float width.
    pub fn cast<G: Real>(&self) -> SiameseModel<G> {
        SiameseModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    /// Evaluation-mode embedding of one half.
    pub fn embed(&self, x: Tensor<F>, valid_length: usize) -> Result<Tensor<F>> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let xv = g.input(x);
        let e = self.net.embed(&mut g, xv, valid_length)?;
        Ok(g.value(e).clone())
    }

    /// Shapes seen while embedding `x` with every row valid.
    pub fn trace_shapes(&self, x: Tensor<F>) -> Result<ShapeTrace> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let valid = x.rows();
        let xv = g.input(x);
        let mut trace = ShapeTrace::default();
        self.net.embed_traced(&mut g, xv, valid, &mut trace)?;
        Ok(trace)
    }

    /// Ordered head score.
    pub fn score_embeddings(&self, enrolled: &Tensor<F>, questioned: &Tensor<F>) -> Result<f64> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let a = g.input(enrolled.clone());
        let b = g.input(questioned.clone());
        let s = self.net.score(&mut g, a, b)?;
        Ok(g.value(s).data()[0].as_f64())
    }

    /// Mean of both argument orders.
    pub fn symmetric_score_embeddings(&self, a: &Tensor<F>, b: &Tensor<F>) -> Result<f64> {
        let ab = self.score_embeddings(a, b)?;
        let ba = self.score_embeddings(b, a)?;
        Ok(0.5 * (ab + ba))
    }

    /// Symmetrised evaluation score of an aligned pair.
    pub fn score_pair(&self, pair: &AlignedPair) -> Result<f64> {
        let ea = self.embed(half_tensor(&pair.a, pair.length, pair.channels)?, pair.valid_length)?;
        let eb = self.embed(half_tensor(&pair.b, pair.length, pair.channels)?, pair.valid_length)?;
        self.symmetric_score_embeddings(&ea, &eb)
    }
}
