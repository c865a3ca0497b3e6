//! Re-parameterization of a trained MoLE model into its inference form.
//!
//! Routed experts only ever see `expert_norm(embedding row)`, so their outputs
//! can be evaluated once per vocabulary id and stored. The inference model
//! keeps attention, router and shared expert; the tables replace the rest.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{rmsnorm_rows, Precision, Scalar, Tensor};
use crate::model::{forward_hidden, Form, LayerParams, ModelParams, RowSource, Variant};

/// Precomputed routed-expert outputs of one layer, `vocab × N × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LutTable<T> {
    pub layer: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> LutTable<T> {
    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn vocab(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_experts(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }

    /// Row `v^id_expert`.
    pub fn row(&self, id: usize, expert: usize) -> &[T] {
        let (n, d) = (self.n_experts(), self.d());
        let start = (id * n + expert) * d;
        &self.values.data()[start..start + d]
    }

    pub fn row_mut(&mut self, id: usize, expert: usize) -> &mut [T] {
        let (n, d) = (self.n_experts(), self.d());
        let start = (id * n + expert) * d;
        &mut self.values.data_mut()[start..start + d]
    }

    pub fn cast<U: Scalar>(&self) -> LutTable<U> {
        LutTable {
            layer: self.layer,
            values: self.values.cast(),
        }
    }
}

/// Evaluates every routed expert of `layer` on every normalized embedding
/// row. Vocabulary chunks run on separate threads; each row's arithmetic is
/// independent of the chunking, so the result is bit-identical to a
/// single-token evaluation.
pub fn build_layer_lut<T: Scalar>(
    layer: &LayerParams<T>,
    embedding: &Tensor<T>,
    layer_index: usize,
    eps: f64,
) -> Result<LutTable<T>> {
    let norm = layer.expert_norm.as_ref().ok_or(Error::WrongVariant {
        expected: "mole layer with expert_norm",
        actual: "layer without expert_norm",
    })?;
    if layer.routed.is_empty() {
        return Err(Error::WrongVariant {
            expected: "mole layer with routed experts",
            actual: "mole lookup form",
        });
    }
    let (vocab, d) = (embedding.rows(), embedding.row_len());
    if norm.len() != d {
        return Err(Error::shape(format!(
            "embedding width {d} != expert_norm width {}",
            norm.len()
        )));
    }
    let n = layer.routed.len();
    let mut values = vec![T::zero(); vocab * n * d];
    let threads = crate::runtime_threads().min(vocab).max(1);
    let chunk = vocab.div_ceil(threads);
    let eps = T::lit(eps);

    std::thread::scope(|s| {
        for (c, out) in values.chunks_mut(chunk * n * d).enumerate() {
            let rows = out.len() / (n * d);
            let src = &embedding.data()[c * chunk * d..(c * chunk + rows) * d];
            s.spawn(move || {
                let (u, _) = rmsnorm_rows(src, norm.data(), eps);
                for (j, expert) in layer.routed.iter().enumerate() {
                    let y = expert.forward(&u, rows);
                    for r in 0..rows {
                        out[(r * n + j) * d..(r * n + j + 1) * d].copy_from_slice(&y[r * d..(r + 1) * d]);
                    }
                }
            });
        }
    });

    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        let id = pos / (n * d);
        return Err(Error::NonFinite(format!(
            "layer {layer_index} lookup row for id {id}, expert {} is not finite",
            pos / d % n
        )));
    }
    Ok(LutTable {
        layer: layer_index,
        values: Tensor::new(vec![vocab, n, d], values)?,
    })
}

/// Splits a training-form MoLE model into inference parameters (routed
/// experts and expert norms removed) plus one table per layer.
pub fn reparameterize<T: Scalar>(params: &ModelParams<T>) -> Result<(ModelParams<T>, Vec<LutTable<T>>)> {
    if params.config.variant != Variant::Mole {
        return Err(Error::WrongVariant {
            expected: "mole",
            actual: params.config.variant.name(),
        });
    }
    if params.is_lut_form() {
        return Err(Error::WrongVariant {
            expected: "mole with routed experts (training form)",
            actual: "mole lookup form",
        });
    }
    let eps = params.config.norm_eps;
    let tables = params
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| build_layer_lut(layer, &params.embedding, l, eps))
        .collect::<Result<Vec<_>>>()?;
    let mut infer = params.clone();
    for layer in &mut infer.layers {
        layer.routed.clear();
        layer.expert_norm = None;
    }
    Ok((infer, tables))
}

impl<T: Scalar> RowSource<T> for Vec<LutTable<T>> {
    fn fetch_rows(&self, layer: usize, ids: &[u32]) -> Result<Vec<T>> {
        let table = self.get(layer).ok_or(Error::LayerOutOfRange {
            layer,
            n_layers: self.len(),
        })?;
        let width = table.n_experts() * table.d();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id as usize >= table.vocab() {
                return Err(Error::IdOutOfRange {
                    id,
                    vocab: table.vocab(),
                });
            }
            out.extend_from_slice(&table.values.data()[id as usize * width..(id as usize + 1) * width]);
        }
        Ok(out)
    }
}

/// `max |a − b| / max |a|`; NaN anywhere counts as infinitely wrong.
pub fn relative_error<T: Scalar>(reference: &[T], other: &[T]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (&a, &b) in reference.iter().zip(other) {
        let (a, b) = (a.as_f64(), b.as_f64());
        if a.is_nan() || b.is_nan() {
            return f64::INFINITY;
        }
        diff = diff.max((a - b).abs());
        scale = scale.max(a.abs());
    }
    if diff == 0.0 {
        0.0
    } else if scale == 0.0 {
        f64::INFINITY
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptResult {
    pub prompt: usize,
    pub len: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub prompts: Vec<PromptResult>,
    pub passed: bool,
    /// First layer whose hidden state leaves tolerance on the worst prompt.
    pub first_bad_layer: Option<usize>,
}

impl EquivalenceReport {
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!(
            "{verdict}: {} prompts, max relative error {:.3e} (tolerance {:.3e})",
            self.prompts.len(),
            self.max_rel_error,
            self.tolerance
        );
        if let Some(l) = self.first_bad_layer {
            s.push_str(&format!(", first diverging layer {l}"));
        }
        s
    }
}

/// Compares training-form logits against lookup-form logits prompt by prompt.
pub fn verify_equivalence<T: Scalar>(
    params: &ModelParams<T>,
    infer: &ModelParams<T>,
    lut: &dyn RowSource<T>,
    prompts: &[Vec<u32>],
    tolerance: f64,
) -> Result<EquivalenceReport> {
    if params.config != infer.config {
        return Err(Error::shape("training and inference models have different configs"));
    }
    let mut results = Vec::with_capacity(prompts.len());
    let mut worst: Option<(usize, f64)> = None;
    for (i, ids) in prompts.iter().enumerate() {
        let (a, ha) = forward_hidden(params, ids, Form::Train, None)?;
        let (b, hb) = forward_hidden(infer, ids, Form::Lut, Some(lut))?;
        if a.shape() != b.shape() || ha.len() != hb.len() {
            return Err(Error::shape(format!(
                "logit shapes differ between forms: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let err = relative_error(a.data(), b.data());
        if worst.is_none_or(|(_, w)| err > w || (err.is_nan() && !w.is_nan())) {
            worst = Some((i, err));
        }
        results.push(PromptResult {
            prompt: i,
            len: ids.len(),
            rel_error: err,
        });
    }
    let max_rel_error = worst.map_or(0.0, |(_, e)| e);
    let passed = results.iter().all(|r| r.rel_error <= tolerance);
    let first_bad_layer = match worst {
        Some((i, _)) if !passed => {
            let (_, ha) = forward_hidden(params, &prompts[i], Form::Train, None)?;
            let (_, hb) = forward_hidden(infer, &prompts[i], Form::Lut, Some(lut))?;
            let errs: Vec<f64> = ha.iter().zip(&hb).map(|(a, b)| relative_error(a, b)).collect();
            errs.iter().position(|&e| e > tolerance).or_else(|| {
                errs.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(l, _)| l)
            })
        }
        _ => None,
    };
    Ok(EquivalenceReport {
        tolerance,
        max_rel_error,
        prompts: results,
        passed,
        first_bad_layer,
    })
}

/// Parameters removed from the resident model by re-parameterization:
/// per layer, `N` routed experts (two matrices and two biases each) and the
/// `expert_norm` gain.
pub fn reparam_param_drop(n_layers: usize, d: usize, d_routed: usize, n_experts: usize) -> usize {
    n_layers * (n_experts * (2 * d * d_routed + d_routed + d) + d)
}
