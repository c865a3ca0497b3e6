use crate::error::{Error, Result};
use crate::kernels::{mm, rmsnorm_rows, Scalar, Tensor};
use crate::model::config::Variant;
use crate::model::layer::{attention_block, ffn_block, AttnTrace, ExpertSource, FfnTrace, Geometry, LayerKv};
use crate::model::params::ModelParams;

/// Which expert path a MoLE model uses. Dense and MoE models ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    /// Routed experts evaluated on the normalized embedding rows.
    Train,
    /// Routed experts replaced by lookup-table rows.
    Lut,
}

/// `(layer, router top-k per row) -> experts per row`, for MoE runs that
/// replay or override routing.
pub type SelectHook<'a> = dyn FnMut(usize, Vec<Vec<usize>>) -> Result<Vec<Vec<usize>>> + 'a;

/// Rows requested ahead of use; calling it blocks until they are ready.
pub type PendingRows<'a, T> = Box<dyn FnOnce() -> Result<Vec<T>> + 'a>;

/// Anything that can serve `|ids| × N × d` precomputed expert rows for a layer.
pub trait RowSource<T> {
    fn fetch_rows(&self, layer: usize, ids: &[u32]) -> Result<Vec<T>>;

    /// Issues the fetch now and returns a handle to collect it later. The
    /// forward pass calls this at layer entry and collects after the shared
    /// expert. The default serves the request synchronously.
    fn begin_fetch<'a>(&'a self, layer: usize, ids: &[u32]) -> Result<PendingRows<'a, T>>
    where
        T: 'a,
    {
        let rows = self.fetch_rows(layer, ids);
        Ok(Box::new(move || rows))
    }
}

/// Per-session decoding state: one KV cache per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState<T> {
    pub layers: Vec<LayerKv<T>>,
    pub position: usize,
    pub generated: Vec<u32>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n_layers],
            position: 0,
            generated: Vec::new(),
        }
    }

    pub(crate) fn check(&self, n_layers: usize, d: usize) -> Result<()> {
        if self.layers.len() != n_layers {
            return Err(Error::shape(format!(
                "decode state has {} layer caches, model has {n_layers} layers",
                self.layers.len()
            )));
        }
        for kv in &self.layers {
            if kv.len != self.position || kv.k.len() != kv.len * d || kv.v.len() != kv.len * d {
                return Err(Error::CachePosition {
                    cached: kv.len,
                    position: self.position,
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Empty("token ids"));
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::IdOutOfRange { id, vocab });
    }
    Ok(())
}

/// Embedding lookup, `|ids| × d`.
pub fn embed<T: Scalar>(params: &ModelParams<T>, ids: &[u32]) -> Result<Tensor<T>> {
    check_ids(ids, params.config.vocab)?;
    Tensor::from_rows(ids.len(), params.config.d_model, embed_rows(params, ids))
}

pub(crate) fn embed_rows<T: Scalar>(params: &ModelParams<T>, ids: &[u32]) -> Vec<T> {
    ids.iter()
        .flat_map(|&id| params.embedding.row(id as usize).iter().copied())
        .collect()
}

pub(crate) struct SeqTrace<T> {
    pub ids: Vec<u32>,
    pub layers: Vec<(AttnTrace<T>, FfnTrace<T>)>,
    pub final_in: Vec<T>,
    pub final_normed: Vec<T>,
    pub final_inv: Vec<T>,
}

pub(crate) struct RunOutput<T> {
    pub logits: Tensor<T>,
    /// Hidden state after each block, when requested.
    pub hidden: Vec<Vec<T>>,
    pub trace: Option<SeqTrace<T>>,
}

#[derive(Default, Clone, Copy)]
pub(crate) struct RunOpts {
    pub collect_hidden: bool,
    pub trace: bool,
}

pub(crate) fn run<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    state: &mut DecodeState<T>,
    form: Form,
    lut: Option<&dyn RowSource<T>>,
    opts: RunOpts,
    mut moe_select: Option<&mut SelectHook<'_>>,
) -> Result<RunOutput<T>> {
    let cfg = &params.config;
    let g = Geometry::<T>::new(cfg)?;
    check_ids(ids, cfg.vocab)?;
    state.check(cfg.n_layers, g.d)?;
    if state.position + ids.len() > cfg.max_seq {
        return Err(Error::shape(format!(
            "sequence of {} positions exceeds max_seq {}",
            state.position + ids.len(),
            cfg.max_seq
        )));
    }
    let lut_form = cfg.variant == Variant::Mole && (form == Form::Lut || params.is_lut_form());
    if lut_form && form == Form::Train {
        return Err(Error::WrongVariant {
            expected: "mole with routed experts (training form)",
            actual: "mole lookup form",
        });
    }
    if lut_form && lut.is_none() {
        return Err(Error::config(
            "lut",
            "lookup-table form of a mole model needs a row source",
        ));
    }

    let rows = ids.len();
    let e = embed_rows(params, ids);
    let mut x = e.clone();
    let mut hidden = Vec::new();
    let mut layer_traces = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut pending = match lut {
            Some(src) if lut_form => Some(src.begin_fetch(l, ids)?),
            _ => None,
        };
        let (h1, at) = attention_block(layer, &g, &x, rows, &mut state.layers[l], opts.trace);
        let mut fetch = || match pending.take() {
            Some(p) => p(),
            None => Err(Error::shape("lookup rows requested twice")),
        };
        let mut layer_select;
        let source = match cfg.variant {
            Variant::Dense => ExpertSource::None,
            Variant::Moe => match moe_select.as_mut() {
                Some(hook) => {
                    layer_select = move |chosen| hook(l, chosen);
                    ExpertSource::Moe {
                        select: Some(&mut layer_select),
                    }
                }
                None => ExpertSource::Moe { select: None },
            },
            Variant::Mole if lut_form => ExpertSource::MoleRows(&mut fetch),
            Variant::Mole => ExpertSource::MoleEmbeddings(&e),
        };
        let (h2, ft) = ffn_block(layer, cfg, &g, &h1, rows, source, opts.trace)?;
        if opts.collect_hidden {
            hidden.push(h2.clone());
        }
        if let (Some(at), Some(ft)) = (at, ft) {
            layer_traces.push((at, ft));
        }
        x = h2;
    }
    state.position += rows;

    let (normed, inv) = rmsnorm_rows(&x, params.final_norm.data(), g.eps);
    let logits = mm(&normed, params.lm_head.data(), rows, g.d, cfg.vocab);
    let trace = opts.trace.then(|| SeqTrace {
        ids: ids.to_vec(),
        layers: layer_traces,
        final_in: x,
        final_normed: normed,
        final_inv: inv,
    });
    Ok(RunOutput {
        logits: Tensor::from_rows(rows, cfg.vocab, logits)?,
        hidden,
        trace,
    })
}

/// Full-sequence forward pass from position 0, returning `T × vocab` logits.
pub fn model_forward<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    form: Form,
    lut: Option<&dyn RowSource<T>>,
) -> Result<Tensor<T>> {
    let mut state = DecodeState::new(params.config.n_layers);
    Ok(run(params, ids, &mut state, form, lut, RunOpts::default(), None)?.logits)
}

/// Appends `ids` to an existing decode session and returns their logits.
pub fn forward_with_state<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    state: &mut DecodeState<T>,
    form: Form,
    lut: Option<&dyn RowSource<T>>,
) -> Result<Tensor<T>> {
    Ok(run(params, ids, state, form, lut, RunOpts::default(), None)?.logits)
}

/// [`forward_with_state`] for a MoE model where `select` decides, layer by
/// layer, which experts each row uses. It receives the router's own top-k
/// choice, so returning it unchanged reproduces the plain forward pass.
pub fn forward_with_routing<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    state: &mut DecodeState<T>,
    select: &mut SelectHook<'_>,
) -> Result<Tensor<T>> {
    if params.config.variant != Variant::Moe {
        return Err(Error::WrongVariant {
            expected: "moe",
            actual: params.config.variant.name(),
        });
    }
    Ok(run(params, ids, state, Form::Train, None, RunOpts::default(), Some(select))?.logits)
}

/// Forward pass that also returns the hidden state after every block.
pub fn forward_hidden<T: Scalar>(
    params: &ModelParams<T>,
    ids: &[u32],
    form: Form,
    lut: Option<&dyn RowSource<T>>,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    let mut state = DecodeState::new(params.config.n_layers);
    let opts = RunOpts {
        collect_hidden: true,
        trace: false,
    };
    let out = run(params, ids, &mut state, form, lut, opts, None)?;
    Ok((out.logits, out.hidden))
}

pub(crate) fn forward_trace<T: Scalar>(params: &ModelParams<T>, ids: &[u32]) -> Result<(Tensor<T>, SeqTrace<T>)> {
    let mut state = DecodeState::new(params.config.n_layers);
    let opts = RunOpts {
        collect_hidden: false,
        trace: true,
    };
    let out = run(params, ids, &mut state, Form::Train, None, opts, None)?;
    Ok((out.logits, out.trace.expect("trace requested")))
}

/// Index of the largest logit, ties toward the lower id.
pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}
