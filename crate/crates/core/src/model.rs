//! Transformer descriptions and their expansion into operator lists.
//!
//! A [`ModelSpec`] plus a [`ParallelismSpec`] and a [`PhaseWork`] (one
//! iteration's worth of tokens) expand into per-chip [`Operator`]s carrying
//! FLOP and DRAM byte counts. Nothing here knows about hardware; latencies are
//! the business of [`crate::perf`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionVariant {
    MHA,
    GQA,
    /// Multi-head latent attention: the cache holds one compressed latent per
    /// token and layer instead of per-head keys and values.
    MLA {
        kv_latent_dim: u64,
        /// Low-rank query compression; absent means a full-rank query projection.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q_latent_dim: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeSpec {
    pub num_routed_experts: u64,
    pub num_shared_experts: u64,
    pub top_k: u64,
    pub expert_intermediate: u64,
    /// Leading layers that use the dense FFN instead of experts.
    #[serde(default)]
    pub dense_layers: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<u64>,
    pub ffn_intermediate: u64,
    /// Gated FFNs (SwiGLU) carry three weight matrices instead of two.
    #[serde(default)]
    pub ffn_gated: bool,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
    pub attention_variant: AttentionVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeSpec>,
    pub weight_bytes_per_param: u64,
    pub kv_bytes_per_elem: u64,
    pub vocab_size: u64,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    pub fn from_json(src: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(src).map_err(|source| Error::Json {
            context: "model spec".into(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let src = read_to_string(path)?;
        Self::from_json(&src).map_err(|e| match e {
            Error::Json { source, .. } => Error::Json {
                context: path.display().to_string(),
                source,
            },
            e => e,
        })
    }

    pub fn head_dim(&self) -> u64 {
        self.head_dim.unwrap_or(self.hidden_dim / self.num_heads.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("ffn_intermediate", self.ffn_intermediate),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{}: {field} must be positive", self.name)));
            }
        }
        for (field, v) in [
            ("weight_bytes_per_param", self.weight_bytes_per_param),
            ("kv_bytes_per_elem", self.kv_bytes_per_elem),
        ] {
            if ![1, 2, 4].contains(&v) {
                return Err(Error::invalid(format!("{}: {field} must be 1, 2 or 4", self.name)));
            }
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::invalid(format!(
                "{}: num_heads ({}) not divisible by num_kv_heads ({})",
                self.name, self.num_heads, self.num_kv_heads
            )));
        }
        match self.head_dim {
            Some(0) => return Err(Error::invalid(format!("{}: head_dim must be positive", self.name))),
            None if self.hidden_dim % self.num_heads != 0 => {
                return Err(Error::invalid(format!(
                    "{}: hidden_dim not divisible by num_heads and no head_dim given",
                    self.name
                )))
            }
            _ => {}
        }
        match self.attention_variant {
            AttentionVariant::MHA if self.num_kv_heads != self.num_heads => {
                return Err(Error::invalid(format!("{}: MHA requires num_kv_heads == num_heads", self.name)))
            }
            AttentionVariant::MLA { kv_latent_dim, q_latent_dim } => {
                if kv_latent_dim == 0 || q_latent_dim == Some(0) {
                    return Err(Error::invalid(format!("{}: MLA latent dims must be positive", self.name)));
                }
            }
            _ => {}
        }
        if let Some(moe) = &self.moe {
            if moe.num_routed_experts == 0 || moe.top_k == 0 || moe.expert_intermediate == 0 {
                return Err(Error::invalid(format!("{}: MoE counts must be positive", self.name)));
            }
            if moe.top_k > moe.num_routed_experts {
                return Err(Error::invalid(format!(
                    "{}: top_k ({}) exceeds num_routed_experts ({})",
                    self.name, moe.top_k, moe.num_routed_experts
                )));
            }
            if moe.dense_layers > self.num_layers {
                return Err(Error::invalid(format!("{}: dense_layers exceeds num_layers", self.name)));
            }
        }
        Ok(())
    }

    fn ffn_mats(&self) -> u64 {
        if self.ffn_gated {
            3
        } else {
            2
        }
    }

    fn attention_params(&self) -> u64 {
        let h = self.hidden_dim;
        let hd = self.head_dim();
        let q_out = self.num_heads * hd;
        match self.attention_variant {
            AttentionVariant::MHA | AttentionVariant::GQA => {
                h * q_out + 2 * h * self.num_kv_heads * hd + q_out * h
            }
            AttentionVariant::MLA { kv_latent_dim, q_latent_dim } => {
                let q = match q_latent_dim {
                    Some(ql) => h * ql + ql * q_out,
                    None => h * q_out,
                };
                q + h * kv_latent_dim + kv_latent_dim * 2 * q_out + q_out * h
            }
        }
    }

    fn dense_ffn_params(&self) -> u64 {
        self.ffn_mats() * self.hidden_dim * self.ffn_intermediate
    }

    fn moe_ffn_params(&self, moe: &MoeSpec) -> u64 {
        let experts = moe.num_routed_experts + moe.num_shared_experts;
        self.hidden_dim * moe.num_routed_experts
            + experts * self.ffn_mats() * self.hidden_dim * moe.expert_intermediate
    }

    fn num_moe_layers(&self) -> u64 {
        self.moe.map_or(0, |m| self.num_layers - m.dense_layers)
    }

    /// Total parameter count: attention, FFN or experts, norms, embeddings.
    pub fn param_count(&self) -> u64 {
        let norms = 2 * self.hidden_dim;
        let moe_layers = self.num_moe_layers();
        let dense_layers = self.num_layers - moe_layers;
        let mut total = self.num_layers * (self.attention_params() + norms);
        total += dense_layers * self.dense_ffn_params();
        if let Some(moe) = &self.moe {
            total += moe_layers * self.moe_ffn_params(moe);
        }
        let embed_copies = if self.tied_embeddings { 1 } else { 2 };
        total + embed_copies * self.vocab_size * self.hidden_dim + self.hidden_dim
    }

    pub fn total_weight_bytes(&self) -> u64 {
        self.param_count() * self.weight_bytes_per_param
    }
}

/// Per-chip weight bytes of one replica.
pub fn weight_bytes(model: &ModelSpec, par: &ParallelismSpec) -> f64 {
    model.total_weight_bytes() as f64 / par.chips() as f64
}

/// KV-cache bytes added by one token across all layers.
pub fn kv_bytes_per_token(model: &ModelSpec) -> u64 {
    let per_layer = match model.attention_variant {
        AttentionVariant::MHA | AttentionVariant::GQA => 2 * model.num_kv_heads * model.head_dim(),
        AttentionVariant::MLA { kv_latent_dim, .. } => kv_latent_dim,
    };
    model.num_layers * per_layer * model.kv_bytes_per_elem
}

/// Number of KV tokens a replica can hold after weights are resident.
pub fn kv_capacity_tokens(
    machine_mem_bytes: f64,
    model: &ModelSpec,
    par: &ParallelismSpec,
    reserve_frac: f64,
) -> Result<u64> {
    if !(reserve_frac > 0.0 && reserve_frac <= 1.0) {
        return Err(Error::invalid(format!("reserve_frac {reserve_frac} outside (0, 1]")));
    }
    par.validate(model)?;
    let usable = machine_mem_bytes * reserve_frac;
    let weights = model.total_weight_bytes() as f64;
    if weights > usable {
        return Err(Error::infeasible(format!(
            "{} weights ({:.1} GB) exceed reserved memory ({:.1} GB)",
            model.name,
            weights / 1e9,
            usable / 1e9
        )));
    }
    Ok(((usable - weights) / kv_bytes_per_token(model) as f64).floor() as u64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelismSpec {
    pub tp: u64,
    pub pp: u64,
    #[serde(default = "one")]
    pub ep: u64,
}

fn one() -> u64 {
    1
}

impl Default for ParallelismSpec {
    fn default() -> Self {
        ParallelismSpec { tp: 1, pp: 1, ep: 1 }
    }
}

impl ParallelismSpec {
    pub fn new(tp: u64, pp: u64, ep: u64) -> Self {
        ParallelismSpec { tp, pp, ep }
    }

    pub fn tp(tp: u64) -> Self {
        ParallelismSpec { tp, pp: 1, ep: 1 }
    }

    pub fn chips(&self) -> u64 {
        self.tp * self.pp
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.tp == 0 || self.pp == 0 || self.ep == 0 {
            return Err(Error::invalid("tp, pp and ep must be >= 1"));
        }
        let need = |cond: bool, what: String| if cond { Ok(()) } else { Err(Error::invalid(what)) };
        need(
            model.num_heads % self.tp == 0,
            format!("tp={} does not divide num_heads={}", self.tp, model.num_heads),
        )?;
        need(
            model.num_kv_heads % self.tp == 0 || self.tp % model.num_kv_heads == 0,
            format!("tp={} incompatible with num_kv_heads={}", self.tp, model.num_kv_heads),
        )?;
        need(
            model.ffn_intermediate % self.tp == 0,
            format!("tp={} does not divide ffn_intermediate", self.tp),
        )?;
        need(
            self.pp <= model.num_layers,
            format!("pp={} exceeds num_layers={}", self.pp, model.num_layers),
        )?;
        match &model.moe {
            Some(moe) => {
                need(
                    moe.num_routed_experts % self.ep == 0,
                    format!("ep={} does not divide num_routed_experts={}", self.ep, moe.num_routed_experts),
                )?;
                need(self.tp % self.ep == 0, format!("ep={} must divide tp={}", self.ep, self.tp))?;
                need(
                    (moe.expert_intermediate * self.ep) % self.tp == 0,
                    format!("expert_intermediate not divisible across tp/ep={}", self.tp / self.ep),
                )?;
            }
            None => need(self.ep == 1, "ep > 1 requires an MoE model".to_string())?,
        }
        Ok(())
    }

    /// Layer counts per pipeline stage; earlier stages take the remainder.
    pub fn layers_per_stage(&self, num_layers: u64) -> Vec<u64> {
        let base = num_layers / self.pp;
        let extra = num_layers % self.pp;
        (0..self.pp).map(|s| base + u64::from(s < extra)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
    /// Chunked prefill tokens batched with decode tokens in one iteration.
    Mixed,
}

/// One sequence's share of an iteration: `new_tokens` processed against a KV
/// context of `context_len` tokens (which includes the new tokens).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqWork {
    pub new_tokens: u64,
    pub context_len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhaseWork {
    pub phase: Phase,
    pub seqs: Vec<SeqWork>,
}

impl PhaseWork {
    /// Whole-prompt prefill: every sequence processes its full prompt.
    pub fn prefill(prompt_lens: &[u64]) -> Self {
        PhaseWork {
            phase: Phase::Prefill,
            seqs: prompt_lens
                .iter()
                .map(|&l| SeqWork { new_tokens: l, context_len: l })
                .collect(),
        }
    }

    /// One decode step per sequence at the given KV lengths.
    pub fn decode(context_lens: &[u64]) -> Self {
        PhaseWork {
            phase: Phase::Decode,
            seqs: context_lens
                .iter()
                .map(|&l| SeqWork { new_tokens: 1, context_len: l })
                .collect(),
        }
    }

    pub fn mixed(seqs: Vec<SeqWork>) -> Self {
        PhaseWork { phase: Phase::Mixed, seqs }
    }

    pub fn batch(&self) -> usize {
        self.seqs.len()
    }

    pub fn seq_lens(&self) -> impl Iterator<Item = u64> + '_ {
        self.seqs.iter().map(|s| s.context_len)
    }

    pub fn total_new_tokens(&self) -> u64 {
        self.seqs.iter().map(|s| s.new_tokens).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.seqs.iter().enumerate() {
            if s.new_tokens == 0 || s.context_len < s.new_tokens {
                return Err(Error::invalid(format!(
                    "sequence {i}: new_tokens={} context_len={} (need 1 <= new <= context)",
                    s.new_tokens, s.context_len
                )));
            }
        }
        Ok(())
    }

    /// Splits the work into at most `parts` contiguous microbatches.
    pub fn split(&self, parts: usize) -> Vec<PhaseWork> {
        let n = self.seqs.len();
        let parts = parts.clamp(1, n.max(1));
        let base = n / parts;
        let extra = n % parts;
        let mut out = Vec::with_capacity(parts);
        let mut at = 0;
        for p in 0..parts {
            let len = base + usize::from(p < extra);
            out.push(PhaseWork {
                phase: self.phase,
                seqs: self.seqs[at..at + len].to_vec(),
            });
            at += len;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Gemm { m: u64, n: u64, k: u64 },
    AttentionScore { batch: u64, heads: u64, q_len: u64, kv_len: u64, head_dim: u64 },
    AttentionContext { batch: u64, heads: u64, q_len: u64, kv_len: u64, head_dim: u64 },
    Softmax { elements: u64 },
    LayerNorm { elements: u64 },
    Activation { elements: u64 },
    MoERoute { tokens: u64, experts_touched: u64 },
    AllReduce { bytes: u64, group: u64 },
    AllToAll { bytes: u64, group: u64 },
    P2P { bytes: u64 },
}

impl OpKind {
    pub fn is_communication(&self) -> bool {
        matches!(self, OpKind::AllReduce { .. } | OpKind::AllToAll { .. } | OpKind::P2P { .. })
    }

    pub fn is_gemm(&self) -> bool {
        matches!(self, OpKind::Gemm { .. })
    }

    pub fn is_attention(&self) -> bool {
        matches!(self, OpKind::AttentionScore { .. } | OpKind::AttentionContext { .. })
    }
}

/// One unit of work on one chip. `flops` and `dram_bytes` are totals for the
/// operator; `weight_bytes` is the part of `dram_bytes` that is parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Operator {
    pub kind: OpKind,
    pub flops: f64,
    pub dram_bytes: f64,
    pub weight_bytes: f64,
    pub elem_bytes: u64,
}

impl Operator {
    fn gemm(m: u64, n: u64, k: u64, e: u64) -> Self {
        let (mf, nf, kf, ef) = (m as f64, n as f64, k as f64, e as f64);
        let weight = kf * nf * ef;
        Operator {
            kind: OpKind::Gemm { m, n, k },
            flops: 2.0 * mf * nf * kf,
            dram_bytes: weight + mf * kf * ef + mf * nf * ef,
            weight_bytes: weight,
            elem_bytes: e,
        }
    }

    /// Expert GEMM where `rows` token-rows (possibly fractional on average)
    /// are spread over `experts` weight matrices of shape k x n.
    fn grouped_gemm(rows: f64, experts: f64, n: u64, k: u64, e: u64) -> Self {
        let (nf, kf, ef) = (n as f64, k as f64, e as f64);
        let m = if experts > 0.0 { (rows / experts).ceil().max(1.0) as u64 } else { 1 };
        let weight = experts * kf * nf * ef;
        Operator {
            kind: OpKind::Gemm { m, n, k },
            flops: 2.0 * rows * nf * kf,
            dram_bytes: weight + rows * (kf + nf) * ef,
            weight_bytes: weight,
            elem_bytes: e,
        }
    }

    fn vector(kind: OpKind, elements: f64, flops_per_elem: f64, passes: f64, e: u64) -> Self {
        Operator {
            kind,
            flops: flops_per_elem * elements,
            dram_bytes: passes * elements * e as f64,
            weight_bytes: 0.0,
            elem_bytes: e,
        }
    }

    fn comm(kind: OpKind, e: u64) -> Self {
        Operator { kind, flops: 0.0, dram_bytes: 0.0, weight_bytes: 0.0, elem_bytes: e }
    }

    pub fn activation_bytes(&self) -> f64 {
        self.dram_bytes - self.weight_bytes
    }
}

/// Per-element vector FLOP costs.
pub const SOFTMAX_FLOPS_PER_ELEM: f64 = 5.0;
pub const LAYERNORM_FLOPS_PER_ELEM: f64 = 4.0;
pub const ACTIVATION_FLOPS_PER_ELEM: f64 = 2.0;
/// Two reads and one write per element.
pub const VECTOR_PASSES: f64 = 3.0;

/// A run of identical transformer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub repeat: u64,
    pub ops: Vec<Operator>,
}

/// The work one chip of one pipeline stage performs for an iteration.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StageOps {
    pub blocks: Vec<Block>,
    /// Final norm and logits on the last stage, activation send on the others.
    pub tail: Vec<Operator>,
}

impl StageOps {
    /// Every operator with its multiplicity.
    pub fn iter(&self) -> impl Iterator<Item = (u64, &Operator)> {
        self.blocks
            .iter()
            .flat_map(|b| b.ops.iter().map(move |op| (b.repeat, op)))
            .chain(self.tail.iter().map(|op| (1, op)))
    }

    pub fn total_flops(&self, include_comm: bool) -> f64 {
        self.iter()
            .filter(|(_, op)| include_comm || !op.kind.is_communication())
            .map(|(r, op)| r as f64 * op.flops)
            .sum()
    }
}

/// FLOPs and bytes summed over a selection of operators.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpTotals {
    pub flops: f64,
    pub dram_bytes: f64,
    pub weight_bytes: f64,
}

impl OpTotals {
    pub fn intensity(&self) -> f64 {
        self.flops / self.dram_bytes
    }
}

/// Sums matrix-multiplication work across stages. Attention score/context
/// products are included unless `matmul_only` is set.
pub fn matmul_totals(stages: &[StageOps], matmul_only: bool) -> OpTotals {
    let mut t = OpTotals::default();
    for (r, op) in stages.iter().flat_map(|s| s.iter()) {
        if op.kind.is_gemm() || (!matmul_only && op.kind.is_attention()) {
            let r = r as f64;
            t.flops += r * op.flops;
            t.dram_bytes += r * op.dram_bytes;
            t.weight_bytes += r * op.weight_bytes;
        }
    }
    t
}

struct Shard {
    tp: u64,
    ep: u64,
    e: u64,
    hidden: u64,
    heads: u64,
    kv_heads: u64,
    head_dim: u64,
    /// KV-cache bytes per token per layer held by this chip.
    kv_token_bytes: f64,
}

/// Expands one iteration of `work` into per-chip operators for each pipeline stage.
pub fn build_ops(model: &ModelSpec, par: &ParallelismSpec, work: &PhaseWork) -> Result<Vec<StageOps>> {
    model.validate()?;
    par.validate(model)?;
    work.validate()?;

    let tp = par.tp;
    let shard = Shard {
        tp,
        ep: par.ep,
        e: model.weight_bytes_per_param,
        hidden: model.hidden_dim,
        heads: model.num_heads / tp,
        kv_heads: (model.num_kv_heads / tp).max(1),
        head_dim: model.head_dim(),
        kv_token_bytes: kv_bytes_per_token(model) as f64 / (model.num_layers * tp) as f64,
    };
    let tokens = work.total_new_tokens();

    let attention = attention_ops(model, &shard, work);
    let dense_layer = {
        let mut ops = attention.clone();
        ops.extend(dense_ffn_ops(model, &shard, tokens));
        ops
    };
    let moe_layer = model.moe.as_ref().map(|moe| {
        let mut ops = attention.clone();
        ops.extend(moe_ffn_ops(model, moe, &shard, tokens));
        ops
    });
    let first_moe_layer = model.moe.map_or(model.num_layers, |m| m.dense_layers);

    let stage_layers = par.layers_per_stage(model.num_layers);
    let last = stage_layers.len() - 1;
    let mut stages = Vec::with_capacity(stage_layers.len());
    let mut layer_at = 0u64;
    for (s, &n) in stage_layers.iter().enumerate() {
        let start = layer_at;
        let end = start + n;
        layer_at = end;
        let dense = end.min(first_moe_layer).saturating_sub(start);
        let sparse = n - dense;
        let mut blocks = Vec::new();
        if dense > 0 {
            blocks.push(Block { repeat: dense, ops: dense_layer.clone() });
        }
        if sparse > 0 {
            let ops = moe_layer.clone().expect("sparse layers imply an MoE model");
            blocks.push(Block { repeat: sparse, ops });
        }
        let tail = if s == last {
            let e = shard.e;
            vec![
                Operator::vector(
                    OpKind::LayerNorm { elements: tokens * shard.hidden / tp },
                    (tokens * shard.hidden) as f64 / tp as f64,
                    LAYERNORM_FLOPS_PER_ELEM,
                    VECTOR_PASSES,
                    e,
                ),
                // Logits only for the last position of each sequence.
                Operator::gemm(work.batch() as u64, model.vocab_size / tp, shard.hidden, e),
            ]
        } else {
            let bytes = tokens * shard.hidden * shard.e;
            vec![Operator::comm(OpKind::P2P { bytes }, shard.e)]
        };
        stages.push(StageOps { blocks, tail });
    }
    Ok(stages)
}

fn layer_norm(sh: &Shard, tokens: u64) -> Operator {
    let elements = (tokens * sh.hidden) as f64 / sh.tp as f64;
    Operator::vector(
        OpKind::LayerNorm { elements: elements as u64 },
        elements,
        LAYERNORM_FLOPS_PER_ELEM,
        VECTOR_PASSES,
        sh.e,
    )
}

fn all_reduce(sh: &Shard, tokens: u64) -> Operator {
    Operator::comm(
        OpKind::AllReduce { bytes: tokens * sh.hidden * sh.e, group: sh.tp },
        sh.e,
    )
}

fn attention_ops(model: &ModelSpec, sh: &Shard, work: &PhaseWork) -> Vec<Operator> {
    let tokens = work.total_new_tokens();
    let e = sh.e;
    let hd = sh.head_dim;
    let q_width = sh.heads * hd;
    let mut ops = vec![layer_norm(sh, tokens)];

    match model.attention_variant {
        AttentionVariant::MHA | AttentionVariant::GQA => {
            let n = (sh.heads + 2 * sh.kv_heads) * hd;
            ops.push(Operator::gemm(tokens, n, sh.hidden, e));
        }
        AttentionVariant::MLA { kv_latent_dim, q_latent_dim } => {
            match q_latent_dim {
                Some(ql) => {
                    ops.push(Operator::gemm(tokens, ql / sh.tp, sh.hidden, e));
                    ops.push(Operator::gemm(tokens, q_width, ql, e));
                }
                None => ops.push(Operator::gemm(tokens, q_width, sh.hidden, e)),
            }
            ops.push(Operator::gemm(tokens, kv_latent_dim / sh.tp, sh.hidden, e));
            ops.push(Operator::gemm(tokens, 2 * q_width, kv_latent_dim, e));
        }
    }

    // Unfused attention: scores are materialized, normalized, then applied to V.
    let batch = work.batch() as u64;
    let (mut score_flops, mut score_bytes, mut ctx_bytes, mut elements) = (0.0, 0.0, 0.0, 0.0);
    let (mut q_sum, mut kv_sum) = (0u64, 0u64);
    let (hf, hdf, ef) = (sh.heads as f64, hd as f64, e as f64);
    let half_kv = sh.kv_token_bytes / 2.0;
    for s in &work.seqs {
        let q = s.new_tokens as f64;
        let kv = s.context_len as f64;
        let scores = hf * q * kv;
        score_flops += 2.0 * hf * q * kv * hdf;
        // Q read, K read, S write, and the new tokens' KV written back.
        score_bytes += q * hf * hdf * ef + kv * half_kv + scores * ef + q * sh.kv_token_bytes;
        // P read, V read, output write.
        ctx_bytes += scores * ef + kv * half_kv + q * hf * hdf * ef;
        elements += scores;
        q_sum += s.new_tokens;
        kv_sum += s.context_len;
    }
    let q_len = q_sum.div_ceil(batch.max(1)).max(1);
    let kv_len = kv_sum.div_ceil(batch.max(1)).max(1);
    let dims = (batch, sh.heads, q_len, kv_len, hd);
    ops.push(Operator {
        kind: OpKind::AttentionScore { batch: dims.0, heads: dims.1, q_len: dims.2, kv_len: dims.3, head_dim: dims.4 },
        flops: score_flops,
        dram_bytes: score_bytes,
        weight_bytes: 0.0,
        elem_bytes: e,
    });
    ops.push(Operator::vector(
        OpKind::Softmax { elements: elements as u64 },
        elements,
        SOFTMAX_FLOPS_PER_ELEM,
        VECTOR_PASSES,
        e,
    ));
    ops.push(Operator {
        kind: OpKind::AttentionContext { batch: dims.0, heads: dims.1, q_len: dims.2, kv_len: dims.3, head_dim: dims.4 },
        flops: score_flops,
        dram_bytes: ctx_bytes,
        weight_bytes: 0.0,
        elem_bytes: e,
    });

    ops.push(Operator::gemm(tokens, sh.hidden, q_width, e));
    if sh.tp > 1 {
        ops.push(all_reduce(sh, tokens));
    }
    ops
}

fn activation(sh: &Shard, elements: f64) -> Operator {
    Operator::vector(
        OpKind::Activation { elements: elements as u64 },
        elements,
        ACTIVATION_FLOPS_PER_ELEM,
        VECTOR_PASSES,
        sh.e,
    )
}

fn dense_ffn_ops(model: &ModelSpec, sh: &Shard, tokens: u64) -> Vec<Operator> {
    let inter = model.ffn_intermediate / sh.tp;
    let up_n = if model.ffn_gated { 2 * inter } else { inter };
    let mut ops = vec![
        layer_norm(sh, tokens),
        Operator::gemm(tokens, up_n, sh.hidden, sh.e),
        activation(sh, (tokens * inter) as f64),
        Operator::gemm(tokens, sh.hidden, inter, sh.e),
    ];
    if sh.tp > 1 {
        ops.push(all_reduce(sh, tokens));
    }
    ops
}

/// Distinct routed experts hit by `tokens` tokens under uniform routing.
pub fn experts_touched(moe: &MoeSpec, tokens: u64) -> u64 {
    (tokens * moe.top_k).min(moe.num_routed_experts)
}

fn moe_ffn_ops(model: &ModelSpec, moe: &MoeSpec, sh: &Shard, tokens: u64) -> Vec<Operator> {
    let e = sh.e;
    let tp_per_expert = sh.tp / sh.ep;
    let inter = moe.expert_intermediate / tp_per_expert;
    let up_n = if model.ffn_gated { 2 * inter } else { inter };
    let pairs = (tokens * moe.top_k) as f64;
    let touched = experts_touched(moe, tokens);
    let local_rows = pairs / sh.ep as f64;
    let local_experts = touched as f64 / sh.ep as f64;
    let route_elems = (tokens * moe.num_routed_experts) as f64 / sh.tp as f64;

    let mut ops = vec![
        layer_norm(sh, tokens),
        Operator::gemm(tokens, moe.num_routed_experts / sh.tp, sh.hidden, e),
        Operator {
            kind: OpKind::MoERoute { tokens, experts_touched: touched },
            flops: 2.0 * route_elems,
            dram_bytes: 2.0 * route_elems * e as f64,
            weight_bytes: 0.0,
            elem_bytes: e,
        },
    ];
    let dispatch_bytes = (pairs * (sh.hidden * e) as f64 / sh.ep as f64) as u64;
    if sh.ep > 1 {
        ops.push(Operator::comm(OpKind::AllToAll { bytes: dispatch_bytes, group: sh.ep }, e));
    }
    ops.push(Operator::grouped_gemm(local_rows, local_experts, up_n, sh.hidden, e));
    let mut act_elems = local_rows * inter as f64;
    if moe.num_shared_experts > 0 {
        let shared_inter = moe.num_shared_experts * moe.expert_intermediate / sh.tp;
        let shared_up = if model.ffn_gated { 2 * shared_inter } else { shared_inter };
        ops.push(Operator::gemm(tokens, shared_up, sh.hidden, e));
        ops.push(Operator::gemm(tokens, sh.hidden, shared_inter, e));
        act_elems += (tokens * shared_inter) as f64;
    }
    ops.push(activation(sh, act_elems));
    ops.push(Operator::grouped_gemm(local_rows, local_experts, sh.hidden, inter, e));
    if sh.ep > 1 {
        ops.push(Operator::comm(OpKind::AllToAll { bytes: dispatch_bytes, group: sh.ep }, e));
    }
    if sh.tp > 1 && (moe.num_shared_experts > 0 || tp_per_expert > 1) {
        ops.push(all_reduce(sh, tokens));
    }
    ops
}
