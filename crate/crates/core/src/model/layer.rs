//! Transformer block pieces: causal self-attention with rotary embeddings and
//! a KV cache, the router, and the expert sub-layer for each variant.
//!
//! Every function operates on `rows` stacked token vectors. Per-row results do
//! not depend on how many rows are processed together, which is what makes
//! prefill and token-by-token decode agree bit-for-bit.

use crate::error::{Error, Result};
use crate::kernels::{dot, mm_nt, rmsnorm_rows, rotate_head, softmax_in_place, Scalar, Tensor};
use crate::model::config::{ModelConfig, Variant};
use crate::model::params::{Ffn, LayerParams};

pub(crate) struct Geometry<T> {
    pub d: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub span: usize,
    pub eps: T,
    pub scale: T,
}

impl<T: Scalar> Geometry<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let d_head = cfg.d_head();
        Ok(Self {
            d: cfg.d_model,
            n_heads: cfg.n_heads,
            d_head,
            span: cfg.rotary_span()?,
            eps: T::lit(cfg.norm_eps),
            scale: T::one() / T::lit(d_head as f64).sqrt(),
        })
    }
}

/// Keys (already rotated) and values for one layer, `len × d` each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub len: usize,
}

/// Expert selection and weights for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GateResult<T> {
    /// Ascending expert indices.
    pub selected: Vec<usize>,
    /// `gates[i]` weights `selected[i]`.
    pub gates: Vec<T>,
}

impl<T: Scalar> GateResult<T> {
    pub fn gate(&self, expert: usize) -> Option<T> {
        self.selected.iter().position(|&j| j == expert).map(|i| self.gates[i])
    }
}

/// Indices of the `k` largest scores, ties toward the lower index, returned
/// in ascending index order.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Softmax over the scores of `selected` only.
pub fn gates_for_selection<T: Scalar>(scores: &[T], selected: Vec<usize>) -> GateResult<T> {
    let mut gates: Vec<T> = selected.iter().map(|&j| scores[j]).collect();
    softmax_in_place(&mut gates);
    GateResult { selected, gates }
}

/// Router scores `h · r_j` for every expert.
pub fn router_scores<T: Scalar>(layer: &LayerParams<T>, h_normed: &[T]) -> Result<Vec<T>> {
    let router = layer.router.as_ref().ok_or(Error::WrongVariant {
        expected: "moe or mole",
        actual: "dense",
    })?;
    let d = router.row_len();
    if h_normed.len() != d {
        return Err(Error::shape(format!("router input width {} != {d}", h_normed.len())));
    }
    Ok(mm_nt(h_normed, router.data(), 1, d, router.rows()))
}

/// Gate computation: top-k + softmax over the selected scores for `moe`,
/// softmax over all scores for `mole`.
pub fn route<T: Scalar>(layer: &LayerParams<T>, h_normed: &[T], variant: Variant, k: usize) -> Result<GateResult<T>> {
    let scores = router_scores(layer, h_normed)?;
    let n = scores.len();
    let selected = match variant {
        Variant::Moe => top_k_indices(&scores, k.clamp(1, n)),
        Variant::Mole => (0..n).collect(),
        Variant::Dense => {
            return Err(Error::WrongVariant {
                expected: "moe or mole",
                actual: "dense",
            })
        }
    };
    Ok(gates_for_selection(&scores, selected))
}

pub(crate) struct AttnTrace<T> {
    pub x: Vec<T>,
    pub normed: Vec<T>,
    pub inv: Vec<T>,
    /// Rotated queries, `rows × d`.
    pub q: Vec<T>,
    /// Cache contents after the call (rotated keys, values).
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention weights, indexed `t * n_heads + head`, length `pos0 + t + 1`.
    pub probs: Vec<Vec<T>>,
    pub ctx: Vec<T>,
    pub pos0: usize,
}

/// Residual self-attention sub-layer over `rows` new positions appended to
/// `kv`. Returns `x + Attn(input_norm(x))`.
pub(crate) fn attention_block<T: Scalar>(
    layer: &LayerParams<T>,
    g: &Geometry<T>,
    x: &[T],
    rows: usize,
    kv: &mut LayerKv<T>,
    want_trace: bool,
) -> (Vec<T>, Option<AttnTrace<T>>) {
    let d = g.d;
    let dh = g.d_head;
    let pos0 = kv.len;
    let (normed, inv) = rmsnorm_rows(x, layer.input_norm.data(), g.eps);
    let qkv = layer.attn.qkv.forward(&normed, rows);

    let mut q = vec![T::zero(); rows * d];
    for t in 0..rows {
        let row = &qkv[t * 3 * d..(t + 1) * 3 * d];
        let pos = pos0 + t;
        let qt = &mut q[t * d..(t + 1) * d];
        qt.copy_from_slice(&row[..d]);
        let mut kt = row[d..2 * d].to_vec();
        for h in 0..g.n_heads {
            rotate_head(&mut qt[h * dh..(h + 1) * dh], pos, g.span, false);
            rotate_head(&mut kt[h * dh..(h + 1) * dh], pos, g.span, false);
        }
        kv.k.extend_from_slice(&kt);
        kv.v.extend_from_slice(&row[2 * d..]);
    }
    kv.len += rows;

    let mut ctx = vec![T::zero(); rows * d];
    let mut probs = Vec::with_capacity(if want_trace { rows * g.n_heads } else { 0 });
    for t in 0..rows {
        let visible = pos0 + t + 1;
        for h in 0..g.n_heads {
            let head = h * dh..(h + 1) * dh;
            let qh = &q[t * d..(t + 1) * d][head.clone()];
            let mut p: Vec<T> = (0..visible)
                .map(|s| dot(qh, &kv.k[s * d..(s + 1) * d][head.clone()]) * g.scale)
                .collect();
            softmax_in_place(&mut p);
            let out = &mut ctx[t * d..(t + 1) * d][head.clone()];
            for (s, &ps) in p.iter().enumerate() {
                let vs = &kv.v[s * d..(s + 1) * d][head.clone()];
                for (o, &vv) in out.iter_mut().zip(vs) {
                    *o += ps * vv;
                }
            }
            if want_trace {
                probs.push(p);
            }
        }
    }

    let proj = layer.attn.out.forward(&ctx, rows);
    let out: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
    let trace = want_trace.then(|| AttnTrace {
        x: x.to_vec(),
        normed,
        inv,
        q,
        k: kv.k.clone(),
        v: kv.v.clone(),
        probs,
        ctx,
        pos0,
    });
    (out, trace)
}

/// Where the routed-expert outputs come from.
pub enum ExpertSource<'a, T> {
    /// Dense block, no routed experts.
    None,
    /// MoE experts on the normalized hidden state. `select`, when given, sees
    /// the router's top-k choice for every row and returns the experts to use
    /// instead (gates still come from the router scores).
    Moe {
        select: Option<&'a mut dyn FnMut(Vec<Vec<usize>>) -> Result<Vec<Vec<usize>>>>,
    },
    /// MoLE training form: raw embedding rows, `rows × d`.
    MoleEmbeddings(&'a [T]),
    /// MoLE inference form: a deferred fetch of `rows × N × d` table rows,
    /// invoked after the shared expert has been computed.
    MoleRows(&'a mut dyn FnMut() -> Result<Vec<T>>),
}

pub(crate) struct FfnActs<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

pub(crate) struct ExpertTrace<T> {
    pub expert: usize,
    /// Token rows routed to this expert (all rows for mole).
    pub tokens: Vec<usize>,
    pub acts: FfnActs<T>,
    pub y: Vec<T>,
}

pub(crate) struct MoleInputTrace<T> {
    pub e: Vec<T>,
    pub u: Vec<T>,
    pub inv: Vec<T>,
}

pub(crate) struct FfnTrace<T> {
    pub h1: Vec<T>,
    pub x2: Vec<T>,
    pub inv2: Vec<T>,
    pub shared: Option<FfnActs<T>>,
    /// Router scores, `rows × N` (empty for dense).
    pub logits: Vec<T>,
    pub gates: Vec<GateResult<T>>,
    pub experts: Vec<ExpertTrace<T>>,
    pub mole: Option<MoleInputTrace<T>>,
}

fn ffn_with_acts<T: Scalar>(ffn: &Ffn<T>, x: &[T], rows: usize) -> (Vec<T>, FfnActs<T>) {
    let pre = ffn.up.forward(x, rows);
    let act: Vec<T> = pre.iter().map(|v| v.gelu()).collect();
    let y = ffn.down.forward(&act, rows);
    (y, FfnActs { pre, act })
}

/// `Σ_j g_j · y_j`, accumulated over experts in ascending index order.
fn mix_rows<'a, T: Scalar>(gate: &GateResult<T>, rows_of: impl Fn(usize) -> &'a [T], out: &mut [T]) {
    for (i, &j) in gate.selected.iter().enumerate() {
        let y = rows_of(j);
        let gj = gate.gates[i];
        for (o, &v) in out.iter_mut().zip(y) {
            *o += gj * v;
        }
    }
}

/// Expert sub-layer: `h1 + FFN_shared(norm(h1)) + routed`, where the routed
/// term depends on the variant and `source`.
pub(crate) fn ffn_block<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    g: &Geometry<T>,
    h1: &[T],
    rows: usize,
    source: ExpertSource<'_, T>,
    want_trace: bool,
) -> Result<(Vec<T>, Option<FfnTrace<T>>)> {
    let d = g.d;
    let (x2, inv2) = rmsnorm_rows(h1, layer.post_attn_norm.data(), g.eps);

    let mut out = h1.to_vec();
    let mut shared_acts = None;
    if let Some(shared) = &layer.shared {
        let (y, acts) = ffn_with_acts(shared, &x2, rows);
        for (o, v) in out.iter_mut().zip(&y) {
            *o += *v;
        }
        if want_trace {
            shared_acts = Some(acts);
        }
    }

    let mut trace = FfnTrace {
        h1: Vec::new(),
        x2: Vec::new(),
        inv2: Vec::new(),
        shared: shared_acts,
        logits: Vec::new(),
        gates: Vec::new(),
        experts: Vec::new(),
        mole: None,
    };

    let n = layer.n_experts();
    let routed_present = !matches!(source, ExpertSource::None);
    if routed_present {
        let router = layer.router.as_ref().ok_or(Error::WrongVariant {
            expected: "moe or mole",
            actual: "dense",
        })?;
        let logits = mm_nt(&x2, router.data(), rows, d, n);
        let mut routed = vec![T::zero(); rows * d];
        let gates: Vec<GateResult<T>>;

        match source {
            ExpertSource::None => unreachable!(),
            ExpertSource::Moe { select } => {
                let mut chosen: Vec<Vec<usize>> = (0..rows)
                    .map(|t| top_k_indices(&logits[t * n..(t + 1) * n], cfg.top_k))
                    .collect();
                if let Some(select) = select {
                    chosen = select(chosen)?;
                    if chosen.len() != rows || chosen.iter().any(|s| s.is_empty() || s.iter().any(|&j| j >= n)) {
                        return Err(Error::shape("expert selection does not match the batch"));
                    }
                    for s in &mut chosen {
                        s.sort_unstable();
                        s.dedup();
                    }
                }
                gates = chosen
                    .into_iter()
                    .enumerate()
                    .map(|(t, s)| gates_for_selection(&logits[t * n..(t + 1) * n], s))
                    .collect();
                let mut ys: Vec<Option<(Vec<usize>, Vec<T>)>> = Vec::with_capacity(n);
                for (j, expert) in layer.routed.iter().enumerate() {
                    let tokens: Vec<usize> = (0..rows).filter(|&t| gates[t].selected.contains(&j)).collect();
                    if tokens.is_empty() {
                        ys.push(None);
                        continue;
                    }
                    let xin: Vec<T> = tokens
                        .iter()
                        .flat_map(|&t| x2[t * d..(t + 1) * d].iter().copied())
                        .collect();
                    let (y, acts) = ffn_with_acts(expert, &xin, tokens.len());
                    if want_trace {
                        trace.experts.push(ExpertTrace {
                            expert: j,
                            tokens: tokens.clone(),
                            acts,
                            y: y.clone(),
                        });
                    }
                    ys.push(Some((tokens, y)));
                }
                if layer.routed.len() != n {
                    return Err(Error::shape("moe layer expert count differs from router rows"));
                }
                let ys = &ys;
                for t in 0..rows {
                    let lookup = |j: usize| {
                        let (tokens, y) = ys[j].as_ref().expect("selected expert was evaluated");
                        let r = tokens.binary_search(&t).expect("token routed to expert");
                        &y[r * d..(r + 1) * d]
                    };
                    mix_rows(&gates[t], lookup, &mut routed[t * d..(t + 1) * d]);
                }
            }
            ExpertSource::MoleEmbeddings(e) => {
                if layer.routed.len() != n || n == 0 {
                    return Err(Error::WrongVariant {
                        expected: "mole with routed experts (training form)",
                        actual: "mole lookup form",
                    });
                }
                if e.len() != rows * d {
                    return Err(Error::shape("embedding rows do not match hidden rows"));
                }
                let norm = layer.expert_norm.as_ref().ok_or(Error::WrongVariant {
                    expected: "mole",
                    actual: cfg.variant.name(),
                })?;
                let (u, inv) = rmsnorm_rows(e, norm.data(), g.eps);
                gates = softmax_rows(&logits, rows, n);
                let mut ys = Vec::with_capacity(n);
                for (j, expert) in layer.routed.iter().enumerate() {
                    let (y, acts) = ffn_with_acts(expert, &u, rows);
                    if want_trace {
                        trace.experts.push(ExpertTrace {
                            expert: j,
                            tokens: (0..rows).collect(),
                            acts,
                            y: y.clone(),
                        });
                    }
                    ys.push(y);
                }
                let ys = &ys;
                for t in 0..rows {
                    mix_rows(
                        &gates[t],
                        |j| &ys[j][t * d..(t + 1) * d],
                        &mut routed[t * d..(t + 1) * d],
                    );
                }
                if want_trace {
                    trace.mole = Some(MoleInputTrace { e: e.to_vec(), u, inv });
                }
            }
            ExpertSource::MoleRows(fetch) => {
                gates = softmax_rows(&logits, rows, n);
                let table = fetch()?;
                if table.len() != rows * n * d {
                    return Err(Error::shape(format!(
                        "expected {} lookup rows of width {d}, got {} values",
                        rows * n,
                        table.len()
                    )));
                }
                let table = &table;
                for t in 0..rows {
                    let base = t * n * d;
                    mix_rows(
                        &gates[t],
                        |j| &table[base + j * d..base + (j + 1) * d],
                        &mut routed[t * d..(t + 1) * d],
                    );
                }
            }
        }

        for (o, r) in out.iter_mut().zip(&routed) {
            *o += *r;
        }
        if want_trace {
            trace.logits = logits;
            trace.gates = gates;
        }
    }

    if want_trace {
        trace.h1 = h1.to_vec();
        trace.x2 = x2;
        trace.inv2 = inv2;
        Ok((out, Some(trace)))
    } else {
        Ok((out, None))
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], rows: usize, n: usize) -> Vec<GateResult<T>> {
    (0..rows)
        .map(|t| gates_for_selection(&logits[t * n..(t + 1) * n], (0..n).collect()))
        .collect()
}

fn check_width<T: Scalar>(v: &[T], d: usize, what: &str) -> Result<()> {
    if v.len() != d {
        return Err(Error::shape(format!("{what} has width {}, expected {d}", v.len())));
    }
    Ok(())
}

/// Residual attention sub-layer. Without `state` the call starts at position
/// 0 with an empty cache; with `state` the new rows are appended to it.
pub fn attention_forward<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    h: &Tensor<T>,
    state: Option<&mut LayerKv<T>>,
) -> Result<Tensor<T>> {
    let g = Geometry::new(cfg)?;
    if h.row_len() != g.d || h.shape().len() != 2 {
        return Err(Error::shape(format!("attention input {:?}, width {}", h.shape(), g.d)));
    }
    let mut scratch = LayerKv::default();
    let kv = match state {
        Some(kv) => {
            if kv.k.len() != kv.len * g.d || kv.v.len() != kv.len * g.d {
                return Err(Error::CachePosition {
                    cached: kv.k.len() / g.d,
                    position: kv.len,
                });
            }
            kv
        }
        None => &mut scratch,
    };
    let (out, _) = attention_block(layer, &g, h.data(), h.rows(), kv, false);
    Tensor::from_rows(h.rows(), g.d, out)
}

/// Dense feed-forward sub-layer for one token.
pub fn dense_layer_forward<T: Scalar>(layer: &LayerParams<T>, cfg: &ModelConfig, h: &[T]) -> Result<Vec<T>> {
    let g = Geometry::new(cfg)?;
    check_width(h, g.d, "hidden state")?;
    Ok(ffn_block(layer, cfg, &g, h, 1, ExpertSource::None, false)?.0)
}

/// MoE sub-layer for one token: top-k routed experts on `post_attn_norm(h)`,
/// plus the shared expert when the layer has one, plus the residual.
pub fn moe_layer_forward<T: Scalar>(layer: &LayerParams<T>, cfg: &ModelConfig, h: &[T]) -> Result<Vec<T>> {
    let g = Geometry::new(cfg)?;
    check_width(h, g.d, "hidden state")?;
    Ok(ffn_block(layer, cfg, &g, h, 1, ExpertSource::Moe { select: None }, false)?.0)
}

/// MoLE training form for one token with embedding row `e`.
pub fn mole_layer_forward_train<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    h: &[T],
    e: &[T],
) -> Result<Vec<T>> {
    let g = Geometry::new(cfg)?;
    check_width(h, g.d, "hidden state")?;
    Ok(ffn_block(layer, cfg, &g, h, 1, ExpertSource::MoleEmbeddings(e), false)?.0)
}

/// MoLE inference form for one token given its fetched `N × d` table rows.
pub fn mole_layer_forward_infer<T: Scalar>(
    layer: &LayerParams<T>,
    cfg: &ModelConfig,
    h: &[T],
    rows: &Tensor<T>,
) -> Result<Vec<T>> {
    let g = Geometry::new(cfg)?;
    check_width(h, g.d, "hidden state")?;
    let n = layer.n_experts();
    if rows.rows() != n || rows.row_len() != g.d {
        return Err(Error::shape(format!(
            "lookup rows {:?}, expected {n} × {}",
            rows.shape(),
            g.d
        )));
    }
    let mut fetch = || Ok(rows.data().to_vec());
    Ok(ffn_block(layer, cfg, &g, h, 1, ExpertSource::MoleRows(&mut fetch), false)?.0)
}
