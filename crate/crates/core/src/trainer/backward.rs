use crate::error::{Error, Result};
use crate::kernels::{
    logsumexp, mm, mm_nt, mm_tn_acc, rmsnorm_backward_row, rotate_head, softmax_backward, softmax_in_place, Scalar,
    Tensor,
};
use crate::model::config::Variant;
use crate::model::forward::{forward_trace, SeqTrace};
use crate::model::layer::{AttnTrace, FfnActs, FfnTrace, Geometry};
use crate::model::params::{Ffn, LayerParams, Linear, ModelParams};
use crate::trainer::{balance_loss, z_loss, Batch, GradientSet, LossBreakdown, TrainConfig};

fn linear_backward<T: Scalar>(lin: &Linear<T>, grad: &mut Linear<T>, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
    let (d_in, d_out) = (lin.d_in(), lin.d_out());
    mm_tn_acc(x, dy, rows, d_in, d_out, grad.weight.data_mut());
    if let Some(gb) = &mut grad.bias {
        let gb = gb.data_mut();
        for r in 0..rows {
            for (b, &v) in gb.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                *b += v;
            }
        }
    }
    mm_nt(dy, lin.weight.data(), rows, d_out, d_in)
}

fn ffn_backward<T: Scalar>(
    ffn: &Ffn<T>,
    grad: &mut Ffn<T>,
    x: &[T],
    acts: &FfnActs<T>,
    dy: &[T],
    rows: usize,
) -> Vec<T> {
    let mut dact = linear_backward(&ffn.down, &mut grad.down, &acts.act, dy, rows);
    for (g, &p) in dact.iter_mut().zip(&acts.pre) {
        *g *= p.gelu_grad();
    }
    linear_backward(&ffn.up, &mut grad.up, x, &dact, rows)
}

fn rmsnorm_backward<T: Scalar>(x: &[T], gain: &[T], inv: &[T], dy: &[T], dx: &mut [T], dgain: &mut [T]) {
    let d = gain.len();
    for (r, &iv) in inv.iter().enumerate() {
        let span = r * d..(r + 1) * d;
        rmsnorm_backward_row(&x[span.clone()], gain, iv, &dy[span.clone()], &mut dx[span], dgain);
    }
}

/// Per-layer aux-loss weights shared across every sequence in the batch.
struct AuxGrad<T> {
    /// `z_coeff / tokens`, or `None` when the z-loss is off.
    z_scale: Option<T>,
    /// `balance_coeff · N · f_j / tokens` per layer, or empty when off.
    balance: Vec<Vec<T>>,
}

fn full_probs<T: Scalar>(scores: &[T]) -> Vec<T> {
    let mut p = scores.to_vec();
    softmax_in_place(&mut p);
    p
}

fn ffn_backward_layer<T: Scalar>(
    layer: &LayerParams<T>,
    grad: &mut LayerParams<T>,
    g: &Geometry<T>,
    tr: &FfnTrace<T>,
    dout: &[T],
    rows: usize,
    aux: &AuxGrad<T>,
    layer_idx: usize,
    de: &mut [T],
) -> Vec<T> {
    let d = g.d;
    let mut dh1 = dout.to_vec();
    let mut dx2 = vec![T::zero(); rows * d];

    if let (Some(shared), Some(gs), Some(acts)) = (&layer.shared, &mut grad.shared, &tr.shared) {
        let dx = ffn_backward(shared, gs, &tr.x2, acts, dout, rows);
        add_into(&mut dx2, &dx);
    }

    if let Some(router) = &layer.router {
        let n = router.rows();
        let mut dlogits = vec![T::zero(); rows * n];
        for t in 0..rows {
            let gate = &tr.gates[t];
            let dy = &dout[t * d..(t + 1) * d];
            let mut dg = Vec::with_capacity(gate.selected.len());
            for &j in &gate.selected {
                let ex = tr
                    .experts
                    .iter()
                    .find(|e| e.expert == j)
                    .expect("selected expert traced");
                let r = ex.tokens.binary_search(&t).expect("token routed to expert");
                dg.push(crate::kernels::dot(dy, &ex.y[r * d..(r + 1) * d]));
            }
            let ds = softmax_backward(&gate.gates, &dg);
            for (&j, v) in gate.selected.iter().zip(ds) {
                dlogits[t * n + j] += v;
            }

            let scores = &tr.logits[t * n..(t + 1) * n];
            if aux.z_scale.is_some() || !aux.balance.is_empty() {
                let p = full_probs(scores);
                if let Some(zs) = aux.z_scale {
                    let lse = logsumexp(scores);
                    let two = T::lit(2.0);
                    for j in 0..n {
                        dlogits[t * n + j] += zs * two * lse * p[j];
                    }
                }
                if let Some(w) = aux.balance.get(layer_idx) {
                    for (j, v) in softmax_backward(&p, w).into_iter().enumerate() {
                        dlogits[t * n + j] += v;
                    }
                }
            }
        }
        let grouter = grad.router.as_mut().expect("gradient layout mirrors params");
        mm_tn_acc(&dlogits, &tr.x2, rows, n, d, grouter.data_mut());
        add_into(&mut dx2, &mm(&dlogits, router.data(), rows, n, d));

        let mut du = tr.mole.as_ref().map(|_| vec![T::zero(); rows * d]);
        for ex in &tr.experts {
            let j = ex.expert;
            let k = ex.tokens.len();
            let mut dy = vec![T::zero(); k * d];
            let mut xin = Vec::with_capacity(k * d);
            for (r, &t) in ex.tokens.iter().enumerate() {
                let gj = tr.gates[t].gate(j).expect("token selected this expert");
                for (o, &v) in dy[r * d..(r + 1) * d].iter_mut().zip(&dout[t * d..(t + 1) * d]) {
                    *o = gj * v;
                }
                match &tr.mole {
                    Some(m) => xin.extend_from_slice(&m.u[t * d..(t + 1) * d]),
                    None => xin.extend_from_slice(&tr.x2[t * d..(t + 1) * d]),
                }
            }
            let dx = ffn_backward(&layer.routed[j], &mut grad.routed[j], &xin, &ex.acts, &dy, k);
            let target = du.as_mut().unwrap_or(&mut dx2);
            for (r, &t) in ex.tokens.iter().enumerate() {
                for (o, &v) in target[t * d..(t + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
        }
        if let (Some(m), Some(du)) = (&tr.mole, du) {
            let norm = layer.expert_norm.as_ref().expect("mole layer has expert_norm");
            let gnorm = grad.expert_norm.as_mut().expect("gradient layout mirrors params");
            rmsnorm_backward(&m.e, norm.data(), &m.inv, &du, de, gnorm.data_mut());
        }
    }

    rmsnorm_backward(
        &tr.h1,
        layer.post_attn_norm.data(),
        &tr.inv2,
        &dx2,
        &mut dh1,
        grad.post_attn_norm.data_mut(),
    );
    dh1
}

fn attention_backward_layer<T: Scalar>(
    layer: &LayerParams<T>,
    grad: &mut LayerParams<T>,
    g: &Geometry<T>,
    tr: &AttnTrace<T>,
    dh1: &[T],
    rows: usize,
) -> Vec<T> {
    let (d, dh, nh) = (g.d, g.d_head, g.n_heads);
    let dctx = linear_backward(&layer.attn.out, &mut grad.attn.out, &tr.ctx, dh1, rows);
    let mut dq = vec![T::zero(); rows * d];
    let mut dk = vec![T::zero(); tr.k.len()];
    let mut dv = vec![T::zero(); tr.v.len()];
    for t in 0..rows {
        for h in 0..nh {
            let head = h * dh..(h + 1) * dh;
            let p = &tr.probs[t * nh + h];
            let dc = &dctx[t * d..(t + 1) * d][head.clone()];
            let mut dp = Vec::with_capacity(p.len());
            for (s, &ps) in p.iter().enumerate() {
                let vs = &tr.v[s * d..(s + 1) * d][head.clone()];
                dp.push(crate::kernels::dot(dc, vs));
                for (o, &c) in dv[s * d..(s + 1) * d][head.clone()].iter_mut().zip(dc) {
                    *o += ps * c;
                }
            }
            let ds = softmax_backward(p, &dp);
            let qh = &tr.q[t * d..(t + 1) * d][head.clone()];
            for (s, &dss) in ds.iter().enumerate() {
                let c = dss * g.scale;
                let ks = &tr.k[s * d..(s + 1) * d][head.clone()];
                for (o, &kv) in dq[t * d..(t + 1) * d][head.clone()].iter_mut().zip(ks) {
                    *o += c * kv;
                }
                for (o, &qv) in dk[s * d..(s + 1) * d][head.clone()].iter_mut().zip(qh) {
                    *o += c * qv;
                }
            }
        }
    }

    let mut dqkv = vec![T::zero(); rows * 3 * d];
    for t in 0..rows {
        let pos = tr.pos0 + t;
        let row = &mut dqkv[t * 3 * d..(t + 1) * 3 * d];
        row[..d].copy_from_slice(&dq[t * d..(t + 1) * d]);
        row[d..2 * d].copy_from_slice(&dk[(tr.pos0 + t) * d..(tr.pos0 + t + 1) * d]);
        row[2 * d..].copy_from_slice(&dv[(tr.pos0 + t) * d..(tr.pos0 + t + 1) * d]);
        for h in 0..nh {
            rotate_head(&mut row[h * dh..(h + 1) * dh], pos, g.span, true);
            rotate_head(&mut row[d + h * dh..d + (h + 1) * dh], pos, g.span, true);
        }
    }
    let dnormed = linear_backward(&layer.attn.qkv, &mut grad.attn.qkv, &tr.normed, &dqkv, rows);
    let mut dx = dh1.to_vec();
    rmsnorm_backward(
        &tr.x,
        layer.input_norm.data(),
        &tr.inv,
        &dnormed,
        &mut dx,
        grad.input_norm.data_mut(),
    );
    dx
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn sequence_backward<T: Scalar>(
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
    g: &Geometry<T>,
    trace: &SeqTrace<T>,
    dlogits: &[T],
    aux: &AuxGrad<T>,
) {
    let cfg = &params.config;
    let rows = trace.ids.len();
    let d = g.d;
    mm_tn_acc(
        &trace.final_normed,
        dlogits,
        rows,
        d,
        cfg.vocab,
        grads.lm_head.data_mut(),
    );
    let dnormed = mm_nt(dlogits, params.lm_head.data(), rows, cfg.vocab, d);
    let mut dx = vec![T::zero(); rows * d];
    rmsnorm_backward(
        &trace.final_in,
        params.final_norm.data(),
        &trace.final_inv,
        &dnormed,
        &mut dx,
        grads.final_norm.data_mut(),
    );

    let mut de = vec![T::zero(); rows * d];
    for (l, (at, ft)) in trace.layers.iter().enumerate().rev() {
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];
        let dh1 = ffn_backward_layer(layer, gl, g, ft, &dx, rows, aux, l, &mut de);
        dx = attention_backward_layer(layer, gl, g, at, &dh1, rows);
    }
    add_into(&mut dx, &de);
    for (t, &id) in trace.ids.iter().enumerate() {
        add_into(grads.embedding.row_mut(id as usize), &dx[t * d..(t + 1) * d]);
    }
}

/// Mean cross-entropy and its gradient with respect to the logits, scaled by
/// `1 / denom`.
fn cross_entropy_grad<T: Scalar>(logits: &[T], targets: &[u32], vocab: usize, denom: T) -> (T, Vec<T>) {
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for (t, &y) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let lse = logsumexp(row);
        total += lse - row[y as usize];
        let gr = &mut grad[t * vocab..(t + 1) * vocab];
        for (o, &z) in gr.iter_mut().zip(row) {
            *o = (z - lse).exp() / denom;
        }
        gr[y as usize] -= T::one() / denom;
    }
    (total, grad)
}

/// Total loss and exact gradients for one batch of `(ids, targets)` rows.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    config: &TrainConfig,
) -> Result<(LossBreakdown<T>, GradientSet<T>)> {
    let cfg = &params.config;
    config.check_against(cfg)?;
    batch.check(cfg.vocab)?;
    let g = Geometry::<T>::new(cfg)?;
    let n_tokens: usize = batch.targets.iter().map(Vec::len).sum();
    let denom = T::lit(n_tokens as f64);

    let mut traces = Vec::with_capacity(batch.len());
    let mut lm = T::zero();
    let mut dlogits = Vec::with_capacity(batch.len());
    for (ids, targets) in batch.inputs.iter().zip(&batch.targets) {
        let (logits, trace) = forward_trace(params, ids)?;
        let (l, dl) = cross_entropy_grad(logits.data(), targets, cfg.vocab, denom);
        lm += l;
        dlogits.push(dl);
        traces.push(trace);
    }
    lm /= denom;

    let routed = cfg.variant != Variant::Dense;
    let use_z = routed && config.z_loss_coeff != 0.0;
    let use_balance = cfg.variant == Variant::Moe && config.balance_loss_coeff != 0.0;
    let mut z_total = T::zero();
    let mut balance_total = T::zero();
    let mut balance_w = Vec::new();
    if use_z || use_balance {
        let n = cfg.n_experts;
        for l in 0..cfg.n_layers {
            let mut logits = Vec::with_capacity(n_tokens * n);
            let mut selections = Vec::with_capacity(n_tokens);
            for tr in &traces {
                let ft = &tr.layers[l].1;
                logits.extend_from_slice(&ft.logits);
                selections.extend(ft.gates.iter().map(|g| g.selected.clone()));
            }
            let logits = Tensor::from_rows(n_tokens, n, logits)?;
            if use_z {
                z_total += z_loss(&logits)?;
            }
            if use_balance {
                let mut probs = logits.clone();
                for r in 0..n_tokens {
                    softmax_in_place(probs.row_mut(r));
                }
                balance_total += balance_loss(&probs, &selections, n, cfg.top_k)?;
                let mut counts = vec![0usize; n];
                for s in &selections {
                    for &j in s {
                        counts[j] += 1;
                    }
                }
                let coeff = T::lit(config.balance_loss_coeff);
                let nn = T::lit(n as f64);
                let slots = T::lit((n_tokens * cfg.top_k) as f64);
                balance_w.push(
                    counts
                        .iter()
                        .map(|&c| coeff * nn * (T::lit(c as f64) / slots) / denom)
                        .collect(),
                );
            }
        }
    }
    let aux = AuxGrad {
        z_scale: use_z.then(|| T::lit(config.z_loss_coeff) / denom),
        balance: balance_w,
    };

    let mut total = lm;
    if use_z {
        total += T::lit(config.z_loss_coeff) * z_total;
    }
    if use_balance {
        total += T::lit(config.balance_loss_coeff) * balance_total;
    }
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss is {total} (lm {lm}, z {z_total}, balance {balance_total})"
        )));
    }

    let mut grads = params.zeros_like();
    for (trace, dl) in traces.iter().zip(&dlogits) {
        sequence_backward(params, &mut grads, &g, trace, dl, &aux);
    }
    let grads = GradientSet { grads };
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient has non-finite entries".into()));
    }
    Ok((
        LossBreakdown {
            lm,
            z: z_total,
            balance: balance_total,
            total,
        },
        grads,
    ))
}
