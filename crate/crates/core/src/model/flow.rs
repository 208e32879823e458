use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::model::params::{ParamGroup, ParamStore};
use crate::model::{
    LatentState, LatentVar, ModelConfig, PartitionSpec, StepOutputs, TokenBatch,
};
use crate::numerics::{AttnShape, Graph, Tensor, Var};
use crate::retrospective::{integrate, xattn_sublayer, IntegrationParams, MechanismKind, XAttnLayer};
use crate::scalar::Scalar;
use crate::seed::SeedStreams;


#[derive(Debug, Clone, PartialEq, Eq)]
struct LayerIx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerIx>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn locate<S: Scalar>(store: &ParamStore<S>, num_layers: usize) -> Result<Self> {
        let ix = |name: String| {
            store
                .index_of(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let p = format!("layers.{i}");
            layers.push(LayerIx {
                ln1_g: ix(format!("{p}.ln1.gamma"))?,
                ln1_b: ix(format!("{p}.ln1.beta"))?,
                wq: ix(format!("{p}.attn.wq"))?,
                bq: ix(format!("{p}.attn.bq"))?,
                wk: ix(format!("{p}.attn.wk"))?,
                bk: ix(format!("{p}.attn.bk"))?,
                wv: ix(format!("{p}.attn.wv"))?,
                bv: ix(format!("{p}.attn.bv"))?,
                wo: ix(format!("{p}.attn.wo"))?,
                bo: ix(format!("{p}.attn.bo"))?,
                ln2_g: ix(format!("{p}.ln2.gamma"))?,
                ln2_b: ix(format!("{p}.ln2.beta"))?,
                ff1_w: ix(format!("{p}.ff.w1"))?,
                ff1_b: ix(format!("{p}.ff.b1"))?,
                ff2_w: ix(format!("{p}.ff.w2"))?,
                ff2_b: ix(format!("{p}.ff.b2"))?,
            });
        }
        Ok(Self {
            tok_emb: ix("embed.tok".into())?,
            pos_emb: ix("embed.pos".into())?,
            layers,
            out_w: ix("out.w".into())?,
            out_b: ix("out.b".into())?,
        })
    }
}

fn init_backbone<S: Scalar>(config: &ModelConfig, seeds: SeedStreams) -> ParamStore<S> {
    let mut rng = seeds.rng("init");
    let mut s = ParamStore::new();
    let g = ParamGroup::Pretrained;
    let (d, f, v) = (config.model_dim, config.ffn_dim(), config.vocab_size);
    let wstd = config.init_std;
    let resid_std = wstd / ((2 * config.num_layers) as f64).sqrt();
    let estd = wstd;
    s.add_normal("embed.tok", &[v, d], estd, g, &mut rng);
    s.add_normal("embed.pos", &[config.max_seq_len, d], estd, g, &mut rng);
    for i in 0..config.num_layers {
        let p = format!("layers.{i}");
        s.add_full(format!("{p}.ln1.gamma"), &[d], 1.0, g);
        s.add_full(format!("{p}.ln1.beta"), &[d], 0.0, g);
        for w in ["wq", "wk", "wv"] {
            s.add_normal(format!("{p}.attn.{w}"), &[d, d], wstd, g, &mut rng);
            s.add_full(format!("{p}.attn.b{}", &w[1..]), &[d], 0.0, g);
        }
        s.add_normal(format!("{p}.attn.wo"), &[d, d], resid_std, g, &mut rng);
        s.add_full(format!("{p}.attn.bo"), &[d], 0.0, g);
        s.add_full(format!("{p}.ln2.gamma"), &[d], 1.0, g);
        s.add_full(format!("{p}.ln2.beta"), &[d], 0.0, g);
        s.add_normal(format!("{p}.ff.w1"), &[d, f], wstd, g, &mut rng);
        s.add_full(format!("{p}.ff.b1"), &[f], 0.0, g);
        s.add_normal(format!("{p}.ff.w2"), &[f, d], resid_std, g, &mut rng);
        s.add_full(format!("{p}.ff.b2"), &[d], 0.0, g);
    }
    s.add_normal("out.w", &[d, v], wstd, g, &mut rng);
    s.add_full("out.b", &[v], 0.0, g);
    s
}

/// A decoder transformer split into head, recursive and tail blocks.
///
/// The head (embeddings + head layers) runs once per forward pass and
/// yields `z0`. The recursive block then runs `num_iterations` times; the
/// first iteration consumes `z0` directly, later ones see `z0` and the
/// previous state through the configured [`MechanismKind`]. Every
/// intermediate state is decoded by the same tail.
#[derive(Debug)]
pub struct FlowModel<S: Scalar> {
    config: ModelConfig,
    partition: PartitionSpec,
    mechanism: MechanismKind,
    params: ParamStore<S>,
    layout: Layout,
    integration: IntegrationParams,
    head_runs: AtomicUsize,
}

impl<S: Scalar> Clone for FlowModel<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            partition: self.partition.clone(),
            mechanism: self.mechanism,
            params: self.params.clone(),
            layout: self.layout.clone(),
            integration: self.integration.clone(),
            head_runs: AtomicUsize::new(0),
        }
    }
}

impl<S: Scalar> FlowModel<S> {
    /// Freshly initialized model. Backbone weights depend only on `seed`
    /// and `config`, never on the mechanism, so models that differ only in
    /// mechanism share their backbone bit for bit.
    pub fn new(config: ModelConfig, partition: PartitionSpec, mechanism: MechanismKind, seed: u64) -> Result<Self> {
        config.validate()?;
        partition.validate(config.num_layers)?;
        let seeds = SeedStreams::new(seed);
        let params = init_backbone(&config, seeds);
        Self::assemble(config, partition, mechanism, params, seeds)
    }

    /// Non-recursive stack (`T = 1`, no retrospective parameters) used for
    /// backbones and teachers.
    pub fn plain(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.num_iterations = 1;
        let partition = PartitionSpec {
            head_layers: 0..0,
            recursive_layers: 0..config.num_layers,
            tail_layers: config.num_layers..config.num_layers,
            head_includes_embedding: true,
            tail_includes_projection: true,
        };
        Self::new(config, partition, MechanismKind::Init, seed)
    }

    /// Recursive model starting from `backbone`'s weights. The backbone
    /// weights form the pretrained group; retrospective weights are new and
    /// drawn from `seed`.
    pub fn from_backbone(
        backbone: &FlowModel<S>,
        partition: PartitionSpec,
        mechanism: MechanismKind,
        num_iterations: usize,
        seed: u64,
    ) -> Result<Self> {
        let config = ModelConfig {
            num_iterations,
            ..backbone.config.clone()
        };
        config.validate()?;
        partition.validate(config.num_layers)?;
        let mut params = ParamStore::new();
        for p in backbone.params.iter().filter(|p| !p.name.starts_with("retro.")) {
            params.add(p.name.clone(), (*p.value).clone(), ParamGroup::Pretrained);
        }
        Self::assemble(config, partition, mechanism, params, SeedStreams::new(seed))
    }

    fn assemble(
        config: ModelConfig,
        partition: PartitionSpec,
        mechanism: MechanismKind,
        mut params: ParamStore<S>,
        seeds: SeedStreams,
    ) -> Result<Self> {
        let layout = Layout::locate(&params, config.num_layers)?;
        let integration = IntegrationParams::init(
            mechanism,
            config.model_dim,
            partition.recursive_layers.len(),
            &mut params,
            &mut seeds.rng("init/retro"),
        );
        Ok(Self {
            config,
            partition,
            mechanism,
            params,
            layout,
            integration,
            head_runs: AtomicUsize::new(0),
        })
    }

    /// Rebuilds a model around stored parameters (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        partition: PartitionSpec,
        mechanism: MechanismKind,
        params: ParamStore<S>,
    ) -> Result<Self> {
        config.validate()?;
        partition.validate(config.num_layers)?;
        let layout = Layout::locate(&params, config.num_layers)?;
        let integration = IntegrationParams::locate(mechanism, partition.recursive_layers.len(), &params)?;
        let expected = config.backbone_param_count()
            + mechanism.added_param_count(config.model_dim, partition.recursive_layers.len());
        if params.numel() != expected {
            return Err(Error::Format(format!(
                "parameter count {} does not match configuration ({expected})",
                params.numel()
            )));
        }
        Ok(Self {
            config,
            partition,
            mechanism,
            params,
            layout,
            integration,
            head_runs: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    pub fn mechanism(&self) -> MechanismKind {
        self.mechanism
    }

    pub fn num_iterations(&self) -> usize {
        self.config.num_iterations
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn integration(&self) -> &IntegrationParams {
        &self.integration
    }

    /// How many times the head block has run since construction.
    pub fn head_runs(&self) -> usize {
        self.head_runs.load(Ordering::Relaxed)
    }

    pub fn bind<'g>(&self, graph: &'g Graph<S>, trainable: bool) -> Vec<Var<'g, S>> {
        self.params.bind(graph, trainable)
    }

    fn attn_shape(&self, batch: &TokenBatch) -> AttnShape {
        AttnShape {
            batch: batch.batch(),
            seq_len: batch.seq_len(),
            heads: self.config.num_heads,
        }
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq_len() > self.config.max_seq_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.seq_len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = batch.tokens().iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::IndexOutOfRange {
                index: t,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn layer<'g>(
        &self,
        p: &[Var<'g, S>],
        index: usize,
        x: Var<'g, S>,
        memory: Option<(&Var<'g, S>, &XAttnLayer)>,
        shape: AttnShape,
    ) -> Result<Var<'g, S>> {
        let l = &self.layout.layers[index];
        let h = x.layer_norm(&p[l.ln1_g], &p[l.ln1_b])?;
        let q = h.linear(&p[l.wq], &p[l.bq])?;
        let k = h.linear(&p[l.wk], &p[l.bk])?;
        let v = h.linear(&p[l.wv], &p[l.bv])?;
        let attn = q.causal_attention(&k, &v, shape)?.linear(&p[l.wo], &p[l.bo])?;
        let mut x = x.add(&attn)?;
        if let Some((mem, xl)) = memory {
            x = xattn_sublayer(&x, mem, xl, p, shape)?;
        }
        let h = x.layer_norm(&p[l.ln2_g], &p[l.ln2_b])?;
        let ff = h
            .linear(&p[l.ff1_w], &p[l.ff1_b])?
            .gelu()
            .linear(&p[l.ff2_w], &p[l.ff2_b])?;
        x.add(&ff)
    }

    /// Embedding plus head layers, producing `z0`.
    pub fn encode_head_graph<'g>(&self, p: &[Var<'g, S>], batch: &TokenBatch) -> Result<LatentVar<'g, S>> {
        self.check_tokens(batch)?;
        self.head_runs.fetch_add(1, Ordering::Relaxed);
        let positions: Vec<usize> = (0..batch.batch()).flat_map(|_| 0..batch.seq_len()).collect();
        let tok = p[self.layout.tok_emb].gather_rows(batch.tokens())?;
        let pos = p[self.layout.pos_emb].gather_rows(&positions)?;
        let mut x = tok.add(&pos)?;
        let shape = self.attn_shape(batch);
        for i in self.partition.head_layers.clone() {
            x = self.layer(p, i, x, None, shape)?;
        }
        Ok(LatentVar {
            values: x,
            iteration_index: 0,
        })
    }

    /// One application of the recursive block. Without `z_prev` the block
    /// runs on `z0` directly; otherwise the history is integrated first
    /// (or, for cross-attention, inside each recursive layer).
    pub fn recursive_step_graph<'g>(
        &self,
        p: &[Var<'g, S>],
        z0: &LatentVar<'g, S>,
        z_prev: Option<&LatentVar<'g, S>>,
        shape: AttnShape,
    ) -> Result<LatentVar<'g, S>> {
        if z0.iteration_index != 0 {
            return Err(Error::InvalidInput(format!(
                "z0 must come from the head (iteration 0), got iteration {}",
                z0.iteration_index
            )));
        }
        let next_index = z_prev.map_or(1, |z| z.iteration_index + 1);
        if next_index > self.config.num_iterations {
            return Err(Error::InvalidInput(format!(
                "iteration {next_index} exceeds configured T = {}",
                self.config.num_iterations
            )));
        }
        if let Some(zp) = z_prev {
            let (a, b) = (z0.values.shape(), zp.values.shape());
            if a != b {
                return Err(Error::LengthMismatch { left: a[0], right: b[0] });
            }
        }
        let rec = self.partition.recursive_layers.clone();
        let mut x = match z_prev {
            Some(zp) if self.mechanism != MechanismKind::XAttn => {
                integrate(self.mechanism, z0, zp, &self.integration, p)?.values
            }
            _ => z0.values,
        };
        let xattn = match (&self.integration, z_prev) {
            (IntegrationParams::XAttn(layers), Some(zp)) => Some((zp.values, layers)),
            _ => None,
        };
        for i in rec.clone() {
            let memory = xattn.as_ref().map(|(m, layers)| (m, &layers[i - rec.start]));
            x = self.layer(p, i, x, memory, shape)?;
        }
        Ok(LatentVar {
            values: x,
            iteration_index: next_index,
        })
    }

    /// Tail layers followed by the shared output projection (pre-softmax).
    pub fn decode_tail_graph<'g>(&self, p: &[Var<'g, S>], z: &LatentVar<'g, S>, shape: AttnShape) -> Result<Var<'g, S>> {
        let mut x = z.values;
        for i in self.partition.tail_layers.clone() {
            x = self.layer(p, i, x, None, shape)?;
        }
        x.linear(&p[self.layout.out_w], &p[self.layout.out_b])
    }

    /// Head once, then `T` recursive steps, decoding every state.
    pub fn forward_flow_graph<'g>(
        &self,
        p: &[Var<'g, S>],
        batch: &TokenBatch,
    ) -> Result<(Vec<Var<'g, S>>, Vec<LatentVar<'g, S>>)> {
        let shape = self.attn_shape(batch);
        let z0 = self.encode_head_graph(p, batch)?;
        let mut logits = Vec::with_capacity(self.config.num_iterations);
        let mut states: Vec<LatentVar<'g, S>> = Vec::with_capacity(self.config.num_iterations);
        for _ in 0..self.config.num_iterations {
            let z = self.recursive_step_graph(p, &z0, states.last(), shape)?;
            logits.push(self.decode_tail_graph(p, &z, shape)?);
            states.push(z);
        }
        Ok((logits, states))
    }

    pub fn encode_head(&self, x: &[usize]) -> Result<LatentState<S>> {
        let batch = TokenBatch::single(x)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let z = self.encode_head_graph(&p, &batch)?;
        Ok(LatentState {
            values: (*z.values.value()).clone(),
            iteration_index: 0,
        })
    }

    fn state_shape(&self, z: &LatentState<S>) -> Result<AttnShape> {
        let (rows, d) = z.values.dims2()?;
        if d != self.config.model_dim {
            return Err(Error::ShapeMismatch {
                op: "latent state",
                left: z.values.shape().to_vec(),
                right: vec![rows, self.config.model_dim],
            });
        }
        Ok(AttnShape {
            batch: 1,
            seq_len: rows,
            heads: self.config.num_heads,
        })
    }

    pub fn recursive_step(&self, z0: &LatentState<S>, z_prev: Option<&LatentState<S>>) -> Result<LatentState<S>> {
        let shape = self.state_shape(z0)?;
        let g = Graph::new();
        let p = self.bind(&g, false);
        let z0v = LatentVar {
            values: g.constant(z0.values.clone()),
            iteration_index: z0.iteration_index,
        };
        let zpv = z_prev.map(|z| LatentVar {
            values: g.constant(z.values.clone()),
            iteration_index: z.iteration_index,
        });
        let out = self.recursive_step_graph(&p, &z0v, zpv.as_ref(), shape)?;
        Ok(LatentState {
            values: (*out.values.value()).clone(),
            iteration_index: out.iteration_index,
        })
    }

    pub fn decode_tail(&self, z: &LatentState<S>) -> Result<Tensor<S>> {
        let shape = self.state_shape(z)?;
        if !z.values.is_finite() {
            return Err(Error::NonFinite { op: "decode_tail" });
        }
        let g = Graph::new();
        let p = self.bind(&g, false);
        let zv = LatentVar {
            values: g.constant(z.values.clone()),
            iteration_index: z.iteration_index,
        };
        Ok((*self.decode_tail_graph(&p, &zv, shape)?.value()).clone())
    }

    pub fn forward_flow(&self, x: &[usize]) -> Result<StepOutputs<S>> {
        self.forward_flow_batch(&TokenBatch::single(x)?)
    }

    /// Batched inference; logits are `(batch * seq_len) x vocab_size`.
    pub fn forward_flow_batch(&self, batch: &TokenBatch) -> Result<StepOutputs<S>> {
        let g = Graph::new();
        let p = self.bind(&g, false);
        let (logits, states) = self.forward_flow_graph(&p, batch)?;
        Ok(StepOutputs {
            per_step_logits: logits.iter().map(|l| (*l.value()).clone()).collect(),
            per_step_states: states
                .iter()
                .map(|z| LatentState {
                    values: (*z.values.value()).clone(),
                    iteration_index: z.iteration_index,
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{partition_model, PartitionCase};

    fn config(t: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            model_dim: 8,
            num_heads: 2,
            num_layers: 4,
            max_seq_len: 6,
            num_iterations: t,
            ffn_mult: 2,
            init_std: 0.02,
        }
    }

    fn model(kind: MechanismKind, t: usize) -> FlowModel<f64> {
        let c = config(t);
        let p = partition_model(&c, PartitionCase::Case2).unwrap();
        FlowModel::new(c, p, kind, 3).unwrap()
    }

    #[test]
    fn head_output_shape_and_purity() {
        let m = model(MechanismKind::Add, 3);
        let z = m.encode_head(&[1, 2, 3]).unwrap();
        assert_eq!(z.values.shape(), &[3, 8]);
        assert_eq!(z.iteration_index, 0);
        assert_eq!(z, m.encode_head(&[1, 2, 3]).unwrap());
    }

    #[test]
    fn head_rejects_bad_input() {
        let m = model(MechanismKind::Add, 3);
        assert!(m.encode_head(&[]).is_err());
        assert!(matches!(m.encode_head(&[1, 11]), Err(Error::IndexOutOfRange { index: 11, .. })));
        assert!(m.encode_head(&[0; 7]).is_err());
    }

    #[test]
    fn add_with_zero_history_repeats_first_step() {
        let m = model(MechanismKind::Add, 3);
        let z0 = m.encode_head(&[4, 5, 6, 7]).unwrap();
        let z1 = m.recursive_step(&z0, None).unwrap();
        assert_eq!(z1.iteration_index, 1);
        let zeros = LatentState {
            values: Tensor::zeros(&[4, 8]),
            iteration_index: 1,
        };
        let z2 = m.recursive_step(&z0, Some(&zeros)).unwrap();
        assert_eq!(z2.values, z1.values);
        assert_eq!(z2.iteration_index, 2);
    }

    #[test]
    fn step_rejects_mismatched_lengths() {
        let m = model(MechanismKind::Gate, 3);
        let z0 = m.encode_head(&[1, 2, 3]).unwrap();
        let zp = LatentState {
            values: Tensor::zeros(&[2, 8]),
            iteration_index: 1,
        };
        assert!(matches!(m.recursive_step(&z0, Some(&zp)), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn forward_flow_contract() {
        let m = model(MechanismKind::XAttn, 3);
        let out = m.forward_flow(&[1, 2, 3]).unwrap();
        assert_eq!(out.per_step_logits.len(), 3);
        assert_eq!(out.per_step_states.len(), 3);
        assert_eq!(out.per_step_logits[0].shape(), &[3, 11]);
        let idx: Vec<usize> = out.per_step_states.iter().map(|s| s.iteration_index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
    }

    #[test]
    fn single_iteration_equals_plain_stack() {
        let plain = FlowModel::<f64>::plain(config(1), 3).unwrap();
        let m = model(MechanismKind::CatProj, 1);
        let a = plain.forward_flow(&[3, 1, 4, 1]).unwrap();
        let b = m.forward_flow(&[3, 1, 4, 1]).unwrap();
        assert_eq!(a.per_step_logits, b.per_step_logits);
    }

    #[test]
    fn head_runs_once_per_forward() {
        let m = model(MechanismKind::ModInj, 3);
        m.forward_flow(&[1, 2]).unwrap();
        assert_eq!(m.head_runs(), 1);
        m.forward_flow(&[1, 2]).unwrap();
        assert_eq!(m.head_runs(), 2);
    }

    #[test]
    fn case2_tail_is_affine() {
        let m = model(MechanismKind::Init, 3);
        let a = m.encode_head(&[1, 2]).unwrap();
        let b = m.encode_head(&[5, 6]).unwrap();
        let mix = |x: &Tensor<f64>, y: &Tensor<f64>, w: f64| {
            let data = x.data().iter().zip(y.data()).map(|(u, v)| w * u + (1.0 - w) * v).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        let z = |v| LatentState { values: v, iteration_index: 1 };
        let da = m.decode_tail(&z(a.values.clone())).unwrap();
        let db = m.decode_tail(&z(b.values.clone())).unwrap();
        let dm = m.decode_tail(&z(mix(&a.values, &b.values, 0.3))).unwrap();
        assert!(dm.max_abs_diff(&mix(&da, &db, 0.3)) < 1e-12);
    }
}
