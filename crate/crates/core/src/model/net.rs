//! Forward pass, masked cross-entropy loss and exact analytic
//! gradients.
//!
//! The network is a pre-norm causal transformer over the flat id space.
//! Row 0 of the sequence is the projected speaker vector; row p >= 1
//! embeds `ids[p-1]`, so the logits at row r score the token `ids[r]`.
//! The loss averages cross-entropy over the positions selected by the
//! loss mask (speech tokens and the terminal end marker).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{ModelCheckpoint, ModelConfig, ParamLayout};
use crate::error::{Error, Result};
use crate::sequence::{DatasetRecord, TokenSequence};

const LN_EPS: f64 = 1e-5;

/// One sequence as the network consumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub speaker: Vec<f64>,
    pub ids: Vec<u32>,
    /// Per-token loss mask; all-false inputs are valid for generation
    /// prefixes but rejected by the loss functions.
    pub mask: Vec<bool>,
}

impl ModelInput {
    pub fn from_record(rec: &DatasetRecord) -> Self {
        ModelInput {
            speaker: rec.speaker.clone(),
            ids: rec.ids.clone(),
            mask: rec.mask.clone(),
        }
    }

    pub fn from_sequence(seq: &TokenSequence) -> Self {
        ModelInput {
            speaker: seq.speaker.values.clone(),
            ids: seq.ids.clone(),
            mask: seq.loss_mask(),
        }
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.speaker.len() != cfg.speaker_dim {
            return Err(Error::validation(format!(
                "speaker vector has {} dims, model expects {}",
                self.speaker.len(),
                cfg.speaker_dim
            )));
        }
        if self.ids.is_empty() {
            return Err(Error::validation("empty input sequence"));
        }
        if self.ids.len() + 1 > cfg.max_len {
            return Err(Error::validation(format!(
                "sequence of {} tokens exceeds max_len {}",
                self.ids.len(),
                cfg.max_len
            )));
        }
        if self.mask.len() != self.ids.len() {
            return Err(Error::validation("mask length differs from ids length"));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::validation(format!(
                "id {bad} outside vocab of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Read-only view of the flat parameter vector with named access.
struct Net<'a> {
    cfg: &'a ModelConfig,
    layout: &'a ParamLayout,
    p: &'a [f64],
}

impl<'a> Net<'a> {
    fn mat(&self, name: &str) -> ArrayView2<'a, f64> {
        let s = self.layout.find(name);
        ArrayView2::from_shape(s.shape, &self.p[s.offset..s.offset + s.len])
            .expect("slice length matches shape")
    }

    fn vec(&self, name: &str) -> ArrayView1<'a, f64> {
        let s = self.layout.find(name);
        ArrayView1::from(&self.p[s.offset..s.offset + s.len])
    }
}

/// Accumulates gradients into a flat vector with the same layout.
struct GradBuf<'a> {
    layout: &'a ParamLayout,
    g: &'a mut [f64],
}

impl GradBuf<'_> {
    fn add_mat(&mut self, name: &str, delta: &Array2<f64>) {
        let s = self.layout.find(name);
        debug_assert_eq!(s.shape, delta.dim());
        let out = &mut self.g[s.offset..s.offset + s.len];
        for (o, &d) in out.iter_mut().zip(delta.iter()) {
            *o += d;
        }
    }

    fn add_vec(&mut self, name: &str, delta: &Array1<f64>) {
        let s = self.layout.find(name);
        debug_assert_eq!(s.len, delta.len());
        let out = &mut self.g[s.offset..s.offset + s.len];
        for (o, &d) in out.iter_mut().zip(delta.iter()) {
            *o += d;
        }
    }

    fn add_row(&mut self, name: &str, row: usize, delta: ArrayView1<f64>) {
        let s = self.layout.find(name);
        let cols = s.shape.1;
        let start = s.offset + row * cols;
        let out = &mut self.g[start..start + cols];
        for (o, &d) in out.iter_mut().zip(delta.iter()) {
            *o += d;
        }
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mu = row.mean().expect("non-empty row");
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let h = (row[j] - mu) * r;
            xhat[[i, j]] = h;
            y[[i, j]] = g[j] * h + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates dg/db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: ArrayView1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (n, d) = dy.dim();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let h = cache.xhat[[i, j]];
            let dyij = dy[[i, j]];
            dg[j] += dyij * h;
            db[j] += dyij;
            let dxhat = dyij * g[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * h;
        }
        let inv_d = 1.0 / d as f64;
        for j in 0..d {
            let dxhat = dy[[i, j]] * g[j];
            dx[[i, j]] = cache.rstd[i]
                * (dxhat - inv_d * sum_dxhat - cache.xhat[[i, j]] * inv_d * sum_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    ln1_y: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Causal softmax weights per head, each n x n.
    probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    ctx: Array2<f64>,
    ln2: LnCache,
    ln2_y: Array2<f64>,
    /// Post-ReLU hidden activations.
    act: Array2<f64>,
}

struct ForwardCache {
    /// Embedded sequence entering layer 0.
    x0: Array2<f64>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Array2<f64>,
    logits: Array2<f64>,
}

fn embed(net: &Net, input: &ModelInput) -> Array2<f64> {
    let d = net.cfg.d_model;
    let n = input.ids.len() + 1;
    let tok = net.mat("tok_emb");
    let pos = net.mat("pos_emb");
    let spk_w = net.mat("spk_w");
    let spk_b = net.vec("spk_b");
    let speaker = ArrayView1::from(&input.speaker);
    let mut x = Array2::zeros((n, d));
    let slot = spk_w.dot(&speaker) + spk_b.to_owned() + pos.row(0).to_owned();
    x.row_mut(0).assign(&slot);
    for (p, &id) in input.ids.iter().enumerate() {
        let row = tok.row(id as usize).to_owned() + pos.row(p + 1).to_owned();
        x.row_mut(p + 1).assign(&row);
    }
    x
}

fn forward(net: &Net, input: &ModelInput) -> ForwardCache {
    let cfg = net.cfg;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x0 = embed(net, input);
    let n = x0.nrows();
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = |name: &str| format!("l{l}.{name}");
        let (ln1_y, ln1) = layer_norm(&x, net.vec(&pre("ln1_g")), net.vec(&pre("ln1_b")));
        let q = ln1_y.dot(&net.mat(&pre("wq")).t()) + net.vec(&pre("bq"));
        let k = ln1_y.dot(&net.mat(&pre("wk")).t()) + net.vec(&pre("bk"));
        let v = ln1_y.dot(&net.mat(&pre("wv")).t()) + net.vec(&pre("bv"));
        let mut probs = Vec::with_capacity(n_heads);
        let mut ctx = Array2::zeros((n, d));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut p = Array2::zeros((n, n));
            for i in 0..n {
                // causal: position i attends to 0..=i
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = qh.row(i).dot(&kh.row(j)) * scale;
                    p[[i, j]] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (p[[i, j]] - max).exp();
                    p[[i, j]] = e;
                    z += e;
                }
                for j in 0..=i {
                    p[[i, j]] /= z;
                }
            }
            let ctxh = p.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctxh);
            probs.push(p);
        }
        let attn_out = ctx.dot(&net.mat(&pre("wo")).t()) + net.vec(&pre("bo"));
        let h_res = &x + &attn_out;
        let (ln2_y, ln2) = layer_norm(&h_res, net.vec(&pre("ln2_g")), net.vec(&pre("ln2_b")));
        let mut act = ln2_y.dot(&net.mat(&pre("w1")).t()) + net.vec(&pre("b1"));
        act.mapv_inplace(|u| u.max(0.0));
        let ffn_out = act.dot(&net.mat(&pre("w2")).t()) + net.vec(&pre("b2"));
        x = &h_res + &ffn_out;
        layers.push(LayerCache {
            ln1,
            ln1_y,
            q,
            k,
            v,
            probs,
            ctx,
            ln2,
            ln2_y,
            act,
        });
    }
    let (xf, lnf) = layer_norm(&x, net.vec("lnf_g"), net.vec("lnf_b"));
    let logits = xf.dot(&net.mat("out_w").t()) + net.vec("out_b");
    ForwardCache {
        x0,
        layers,
        lnf,
        xf,
        logits,
    }
}

/// Logits for every position; row r scores the token following row r.
pub fn forward_logits(ckpt: &ModelCheckpoint, input: &ModelInput) -> Result<Array2<f64>> {
    input.validate(&ckpt.config)?;
    let layout = ckpt.layout();
    let net = Net {
        cfg: &ckpt.config,
        layout: &layout,
        p: &ckpt.params,
    };
    Ok(forward(&net, input).logits)
}

fn masked_positions(input: &ModelInput) -> Vec<usize> {
    input
        .mask
        .iter()
        .enumerate()
        .filter_map(|(r, &m)| m.then_some(r))
        .collect()
}

fn cross_entropy(logits: &Array2<f64>, input: &ModelInput, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for &r in targets {
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[input.ids[r] as usize];
    }
    total / targets.len() as f64
}

/// Mean cross-entropy over the masked positions.
pub fn loss(ckpt: &ModelCheckpoint, input: &ModelInput) -> Result<f64> {
    input.validate(&ckpt.config)?;
    let targets = masked_positions(input);
    if targets.is_empty() {
        return Err(Error::validation("loss mask selects no positions"));
    }
    let layout = ckpt.layout();
    let net = Net {
        cfg: &ckpt.config,
        layout: &layout,
        p: &ckpt.params,
    };
    let cache = forward(&net, input);
    Ok(cross_entropy(&cache.logits, input, &targets))
}

/// Loss plus the full analytic gradient, accumulated into `grad`
/// (which must be zeroed by the caller if a fresh gradient is wanted).
pub fn loss_and_grad(ckpt: &ModelCheckpoint, input: &ModelInput, grad: &mut [f64]) -> Result<f64> {
    input.validate(&ckpt.config)?;
    let targets = masked_positions(input);
    if targets.is_empty() {
        return Err(Error::validation("loss mask selects no positions"));
    }
    let layout = ckpt.layout();
    if grad.len() != layout.total {
        return Err(Error::validation(format!(
            "gradient buffer of {} values, expected {}",
            grad.len(),
            layout.total
        )));
    }
    let cfg = &ckpt.config;
    let net = Net {
        cfg,
        layout: &layout,
        p: &ckpt.params,
    };
    let cache = forward(&net, input);
    let loss_value = cross_entropy(&cache.logits, input, &targets);

    let n = cache.logits.nrows();
    let vocab = cfg.vocab_size as usize;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gb = GradBuf {
        layout: &layout,
        g: grad,
    };

    // Softmax + CE gradient at the masked rows only.
    let inv_m = 1.0 / targets.len() as f64;
    let mut dlogits = Array2::zeros((n, vocab));
    for &r in &targets {
        let row = cache.logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        for c in 0..vocab {
            dlogits[[r, c]] = (row[c] - max).exp() / z * inv_m;
        }
        dlogits[[r, input.ids[r] as usize]] -= inv_m;
    }

    gb.add_mat("out_w", &dlogits.t().dot(&cache.xf));
    gb.add_vec("out_b", &dlogits.sum_axis(Axis(0)));
    let dxf = dlogits.dot(&net.mat("out_w"));

    let mut dg = Array1::zeros(d);
    let mut db = Array1::zeros(d);
    let mut dx = layer_norm_backward(&dxf, &cache.lnf, net.vec("lnf_g"), &mut dg, &mut db);
    gb.add_vec("lnf_g", &dg);
    gb.add_vec("lnf_b", &db);

    for l in (0..cfg.n_layers).rev() {
        let pre = |name: &str| format!("l{l}.{name}");
        let lc = &cache.layers[l];
        let ffn = cfg.ffn_dim();

        // FFN branch: x = h + relu(ln2(h) w1^T + b1) w2^T + b2
        let d_ffn_out = dx.clone();
        gb.add_mat(&pre("w2"), &d_ffn_out.t().dot(&lc.act));
        gb.add_vec(&pre("b2"), &d_ffn_out.sum_axis(Axis(0)));
        let mut d_act = d_ffn_out.dot(&net.mat(&pre("w2")));
        for i in 0..n {
            for j in 0..ffn {
                if lc.act[[i, j]] <= 0.0 {
                    d_act[[i, j]] = 0.0;
                }
            }
        }
        gb.add_mat(&pre("w1"), &d_act.t().dot(&lc.ln2_y));
        gb.add_vec(&pre("b1"), &d_act.sum_axis(Axis(0)));
        let d_ln2_y = d_act.dot(&net.mat(&pre("w1")));
        let mut dg2 = Array1::zeros(d);
        let mut db2 = Array1::zeros(d);
        let dh_ffn = layer_norm_backward(&d_ln2_y, &lc.ln2, net.vec(&pre("ln2_g")), &mut dg2, &mut db2);
        gb.add_vec(&pre("ln2_g"), &dg2);
        gb.add_vec(&pre("ln2_b"), &db2);
        let dh_total = &dx + &dh_ffn;

        // Attention branch: h = x_in + ctx wo^T + bo
        let d_attn_out = dh_total.clone();
        gb.add_mat(&pre("wo"), &d_attn_out.t().dot(&lc.ctx));
        gb.add_vec(&pre("bo"), &d_attn_out.sum_axis(Axis(0)));
        let d_ctx = d_attn_out.dot(&net.mat(&pre("wo")));

        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let p = &lc.probs[h];
            let d_ctxh = d_ctx.slice(ndarray::s![.., cols.clone()]).to_owned();
            let vh = lc.v.slice(ndarray::s![.., cols.clone()]);
            let qh = lc.q.slice(ndarray::s![.., cols.clone()]);
            let kh = lc.k.slice(ndarray::s![.., cols.clone()]);
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&p.t().dot(&d_ctxh));
            let d_probs = d_ctxh.dot(&vh.t());
            // softmax backward restricted to the causal triangle
            let mut d_scores = Array2::zeros((n, n));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += d_probs[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    d_scores[[i, j]] = p[[i, j]] * (d_probs[[i, j]] - dot);
                }
            }
            let dqh = d_scores.dot(&kh).mapv(|x| x * scale);
            let dkh = d_scores.t().dot(&qh).mapv(|x| x * scale);
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&dqh);
            dk.slice_mut(ndarray::s![.., cols]).assign(&dkh);
        }
        gb.add_mat(&pre("wq"), &dq.t().dot(&lc.ln1_y));
        gb.add_vec(&pre("bq"), &dq.sum_axis(Axis(0)));
        gb.add_mat(&pre("wk"), &dk.t().dot(&lc.ln1_y));
        gb.add_vec(&pre("bk"), &dk.sum_axis(Axis(0)));
        gb.add_mat(&pre("wv"), &dv.t().dot(&lc.ln1_y));
        gb.add_vec(&pre("bv"), &dv.sum_axis(Axis(0)));
        let d_ln1_y = dq.dot(&net.mat(&pre("wq")))
            + dk.dot(&net.mat(&pre("wk")))
            + dv.dot(&net.mat(&pre("wv")));
        let mut dg1 = Array1::zeros(d);
        let mut db1 = Array1::zeros(d);
        let dx_ln1 =
            layer_norm_backward(&d_ln1_y, &lc.ln1, net.vec(&pre("ln1_g")), &mut dg1, &mut db1);
        gb.add_vec(&pre("ln1_g"), &dg1);
        gb.add_vec(&pre("ln1_b"), &db1);
        dx = dh_total + dx_ln1;
    }

    // Embedding gradients.
    let speaker = ArrayView1::from(&input.speaker);
    let dx0 = dx.row(0).to_owned();
    let mut dspk_w = Array2::zeros((d, cfg.speaker_dim));
    for i in 0..d {
        for j in 0..cfg.speaker_dim {
            dspk_w[[i, j]] = dx0[i] * speaker[j];
        }
    }
    gb.add_mat("spk_w", &dspk_w);
    gb.add_vec("spk_b", &dx0);
    for r in 0..n {
        gb.add_row("pos_emb", r, dx.row(r));
    }
    for (p, &id) in input.ids.iter().enumerate() {
        gb.add_row("tok_emb", id as usize, dx.row(p + 1));
    }
    let _ = cache.x0;
    Ok(loss_value)
}
