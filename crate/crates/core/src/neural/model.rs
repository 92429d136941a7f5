use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::params::{LMConfig, LMParams, LayerParams};
use crate::error::{Error, Result};
use crate::tokenize::PAD;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// One training input: possibly corrupted ids plus `(position, true id)`
/// targets at the masked slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

struct SeqCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    z: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|c| c * c).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - mean_dxhat.view().insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.view().insert_axis(Axis(1)));
    dx * cache.inv_std.view().insert_axis(Axis(1))
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn check_ids(config: &LMConfig, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::ConfigMismatch("empty input sequence".into()));
    }
    if ids.len() > config.max_seq_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: config.max_seq_len });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::ConfigMismatch(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    if ids.iter().all(|&id| id == PAD) {
        return Err(Error::ConfigMismatch("sequence is all padding".into()));
    }
    Ok(())
}

fn layer_forward(p: &LayerParams, x: Array2<f64>, key_valid: &[bool], heads: usize) -> (Array2<f64>, LayerCache) {
    let (len, d) = x.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b);
    let q = a.dot(&p.wq) + &p.bq;
    let k = a.dot(&p.wk) + &p.bk;
    let v = a.dot(&p.wv) + &p.bv;
    let mut ctx = Array2::zeros((len, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for (j, &valid) in key_valid.iter().enumerate() {
            if !valid {
                scores.column_mut(j).fill(f64::NEG_INFINITY);
            }
        }
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let o = ctx.dot(&p.wo) + &p.bo;
    let x_mid = &x + &o;
    let (b, ln2) = layer_norm(&x_mid, &p.ln2_g, &p.ln2_b);
    let u = b.dot(&p.w1) + &p.b1;
    let g = u.mapv(gelu);
    let out = &x_mid + &(g.dot(&p.w2) + &p.b2);
    let cache = LayerCache { x, ln1, a, q, k, v, probs, ctx, ln2, b, u, g };
    (out, cache)
}

fn layer_backward(
    p: &LayerParams,
    grads: &mut LayerParams,
    c: &LayerCache,
    dout: Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let d = c.x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward branch
    grads.w2 += &c.g.t().dot(&dout);
    grads.b2 += &dout.sum_axis(Axis(0));
    let mut du = dout.dot(&p.w2.t());
    Zip::from(&mut du).and(&c.u).for_each(|d, &u| *d *= gelu_grad(u));
    grads.w1 += &c.b.t().dot(&du);
    grads.b1 += &du.sum_axis(Axis(0));
    let db = du.dot(&p.w1.t());
    let dx_mid = dout + layer_norm_backward(&db, &c.ln2, &p.ln2_g, &mut grads.ln2_g, &mut grads.ln2_b);

    // attention branch
    grads.wo += &c.ctx.t().dot(&dx_mid);
    grads.bo += &dx_mid.sum_axis(Axis(0));
    let dctx = dx_mid.dot(&p.wo.t());
    let mut dq = Array2::zeros(c.q.dim());
    let mut dk = Array2::zeros(c.k.dim());
    let mut dv = Array2::zeros(c.v.dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let row_dot = (&dp * probs).sum_axis(Axis(1));
        let ds = (dp - row_dot.view().insert_axis(Axis(1))) * probs * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    grads.wq += &c.a.t().dot(&dq);
    grads.bq += &dq.sum_axis(Axis(0));
    grads.wk += &c.a.t().dot(&dk);
    grads.bk += &dk.sum_axis(Axis(0));
    grads.wv += &c.a.t().dot(&dv);
    grads.bv += &dv.sum_axis(Axis(0));
    let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    dx_mid + layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut grads.ln1_g, &mut grads.ln1_b)
}

fn encode_sequence(params: &LMParams, ids: &[u32]) -> SeqCache {
    let len = ids.len();
    let d = params.config.model_dim;
    let mut x = Array2::zeros((len, d));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &params.tok_emb.row(id as usize);
        row += &params.pos_emb.row(t);
    }
    let key_valid: Vec<bool> = ids.iter().map(|&id| id != PAD).collect();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, x, &key_valid, params.config.heads);
        layers.push(cache);
        x = next;
    }
    let (z, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    SeqCache { layers, lnf, z }
}

fn output_weights(params: &LMParams) -> &Array2<f64> {
    params.out_w.as_ref().unwrap_or(&params.tok_emb)
}

fn row_probabilities(params: &LMParams, z: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let zr = z.select(Axis(0), rows);
    let mut logits = zr.dot(&output_weights(params).t()) + &params.out_b;
    softmax_rows(&mut logits);
    logits
}

/// Output distributions at every position of every sequence. Sequences may
/// carry PAD tokens; PAD keys are excluded from attention.
pub fn forward(params: &LMParams, batch: &[Vec<u32>]) -> Result<Vec<Array2<f64>>> {
    batch
        .iter()
        .map(|ids| {
            let rows: Vec<usize> = (0..ids.len()).collect();
            predict_rows(params, ids, &rows)
        })
        .collect()
}

/// Output distributions at the requested positions of a single sequence.
pub fn predict_rows(params: &LMParams, ids: &[u32], rows: &[usize]) -> Result<Array2<f64>> {
    check_ids(&params.config, ids)?;
    if let Some(&r) = rows.iter().find(|&&r| r >= ids.len()) {
        return Err(Error::ConfigMismatch(format!("row {r} beyond sequence length {}", ids.len())));
    }
    let cache = encode_sequence(params, ids);
    Ok(row_probabilities(params, &cache.z, rows))
}

fn check_example(params: &LMParams, i: usize, ex: &MaskedExample) -> Result<()> {
    check_ids(&params.config, &ex.input)?;
    if ex.targets.is_empty() {
        return Err(Error::EmptyMask(i));
    }
    for &(pos, target) in &ex.targets {
        if pos >= ex.input.len() || target as usize >= params.config.vocab_size {
            return Err(Error::ConfigMismatch(format!("bad target ({pos}, {target}) in sequence {i}")));
        }
    }
    Ok(())
}

/// Sum of negative log-likelihoods over all targets, and the target count.
pub fn masked_nll(params: &LMParams, batch: &[MaskedExample]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for (i, ex) in batch.iter().enumerate() {
        check_example(params, i, ex)?;
        let rows: Vec<usize> = ex.targets.iter().map(|&(p, _)| p).collect();
        let probs = predict_rows(params, &ex.input, &rows)?;
        for (r, &(_, target)) in ex.targets.iter().enumerate() {
            total -= probs[[r, target as usize]].ln();
        }
        count += ex.targets.len();
    }
    Ok((total, count))
}

/// Mean masked cross-entropy over the batch and its gradient with respect
/// to every parameter.
pub fn loss_and_grads(params: &LMParams, batch: &[MaskedExample]) -> Result<(f64, LMParams)> {
    for (i, ex) in batch.iter().enumerate() {
        check_example(params, i, ex)?;
    }
    let total: usize = batch.iter().map(|ex| ex.targets.len()).sum();
    if total == 0 {
        return Err(Error::EmptyMask(0));
    }
    let inv_n = 1.0 / total as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let heads = params.config.heads;

    for ex in batch {
        let cache = encode_sequence(params, &ex.input);
        let rows: Vec<usize> = ex.targets.iter().map(|&(p, _)| p).collect();
        let zr = cache.z.select(Axis(0), &rows);
        let mut dlogits = row_probabilities(params, &cache.z, &rows);
        for (r, &(_, target)) in ex.targets.iter().enumerate() {
            loss -= dlogits[[r, target as usize]].ln() * inv_n;
            dlogits[[r, target as usize]] -= 1.0;
        }
        dlogits *= inv_n;

        grads.out_b += &dlogits.sum_axis(Axis(0));
        let dw = dlogits.t().dot(&zr);
        match grads.out_w.as_mut() {
            Some(w) => *w += &dw,
            None => grads.tok_emb += &dw,
        }
        let dzr = dlogits.dot(output_weights(params));
        let mut dz = Array2::zeros(cache.z.dim());
        for (r, &row) in rows.iter().enumerate() {
            let mut target_row = dz.row_mut(row);
            target_row += &dzr.row(r);
        }

        let mut dx = layer_norm_backward(&dz, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
        for (l, layer_cache) in cache.layers.iter().enumerate().rev() {
            dx = layer_backward(&params.layers[l], &mut grads.layers[l], layer_cache, dx, heads);
        }
        for (t, &id) in ex.input.iter().enumerate() {
            let row: ArrayView1<f64> = dx.row(t);
            let mut e = grads.tok_emb.row_mut(id as usize);
            e += &row;
            let mut pe = grads.pos_emb.row_mut(t);
            pe += &row;
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::LMConfig;
    use rand::Rng;

    fn tiny(vocab: usize) -> LMConfig {
        LMConfig {
            layers: 2,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            max_seq_len: 16,
            vocab_size: vocab,
            mask_fraction: 0.15,
            seed: 3,
            tie_output: true,
        }
    }

    #[test]
    fn rows_are_distributions_and_deterministic() {
        let p = LMParams::init(&tiny(30)).unwrap();
        let batch = vec![vec![2, 7, 12, 1, 9, 3], vec![2, 8, 3, 0, 0]];
        let out = forward(&p, &batch).unwrap();
        for m in &out {
            for row in m.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&x| x >= 0.0));
            }
        }
        assert_eq!(out, forward(&p, &batch).unwrap());
    }

    #[test]
    fn symmetric_weights_give_uniform_output() {
        let cfg = tiny(25);
        let mut p = LMParams::zeros(&cfg);
        p.tok_emb.fill(0.3);
        for l in &mut p.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
        }
        p.lnf_g.fill(1.0);
        let out = forward(&p, &[vec![2, 5, 1, 6, 3]]).unwrap();
        for &x in out[0].iter() {
            assert!((x - 1.0 / 25.0).abs() < 1e-12);
        }
        let ex = MaskedExample { input: vec![2, 5, 1, 6, 3], targets: vec![(2, 9)] };
        let (loss, _) = loss_and_grads(&p, &[ex]).unwrap();
        assert!((loss - (25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_tail_does_not_change_real_outputs() {
        let p = LMParams::init(&tiny(30)).unwrap();
        let short = forward(&p, &[vec![2, 7, 12, 1, 9]]).unwrap().remove(0);
        let padded = forward(&p, &[vec![2, 7, 12, 1, 9, 0, 0, 0]]).unwrap().remove(0);
        for r in 0..5 {
            for c in 0..30 {
                assert!((short[[r, c]] - padded[[r, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn error_paths() {
        let p = LMParams::init(&tiny(30)).unwrap();
        let no_mask = MaskedExample { input: vec![2, 5, 3], targets: vec![] };
        assert!(matches!(loss_and_grads(&p, &[no_mask]), Err(Error::EmptyMask(0))));
        let too_long = vec![5u32; 17];
        assert!(matches!(predict_rows(&p, &too_long, &[0]), Err(Error::SequenceTooLong { .. })));
        assert!(matches!(predict_rows(&p, &[2, 99], &[0]), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn loss_matches_masked_nll() {
        let p = LMParams::init(&tiny(30)).unwrap();
        let batch = vec![
            MaskedExample { input: vec![2, 7, 1, 9, 3], targets: vec![(2, 12)] },
            MaskedExample { input: vec![2, 1, 8, 1, 3], targets: vec![(1, 7), (3, 20)] },
        ];
        let (loss, _) = loss_and_grads(&p, &batch).unwrap();
        let (sum, n) = masked_nll(&p, &batch).unwrap();
        assert!((loss - sum / n as f64).abs() < 1e-12);
    }

    #[test]
    fn gradient_spot_check() {
        let mut cfg = tiny(30);
        cfg.tie_output = false;
        let mut p = LMParams::init(&cfg).unwrap();
        // break the LN symmetry so gain/offset gradients are non-trivial
        let mut rng = crate::seed::rng(9, "test", 0);
        for t in p.tensors_mut() {
            for x in t.iter_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let batch = vec![MaskedExample { input: vec![2, 7, 1, 9, 1, 3], targets: vec![(2, 12), (4, 5)] }];
        let (_, grads) = loss_and_grads(&p, &batch).unwrap();
        let flat_grads: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        let h = 1e-5;
        for (ti, g) in flat_grads.iter().enumerate() {
            let idx = g.len() / 2;
            let orig = p.tensors()[ti].2[idx];
            p.tensors_mut()[ti][idx] = orig + h;
            let (lp, _) = loss_and_grads(&p, &batch).unwrap();
            p.tensors_mut()[ti][idx] = orig - h;
            let (lm, _) = loss_and_grads(&p, &batch).unwrap();
            p.tensors_mut()[ti][idx] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let err = (numeric - g[idx]).abs();
            assert!(err < 1e-6 + 1e-4 * numeric.abs().max(g[idx].abs()), "tensor {ti}: {numeric} vs {}", g[idx]);
        }
    }
}
