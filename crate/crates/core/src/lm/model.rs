//! Pre-norm causal transformer with tied input/output embeddings and
//! hand-written backward pass.
//!
//! Shapes: `T` positions, `d` model width, `V` vocabulary. Weight matrices are
//! stored input-major (`x.dot(w)`), so `w_qkv` is `d x 3d`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LMConfig, Real};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// One input position: a vocabulary token or a row of the soft prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Token(u32),
    Soft(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub w_qkv: Array2<F>,
    pub b_qkv: Array1<F>,
    pub w_o: Array2<F>,
    pub b_o: Array1<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w_fc: Array2<F>,
    pub b_fc: Array1<F>,
    pub w_proj: Array2<F>,
    pub b_proj: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LMParams<F> {
    pub config: LMConfig,
    /// Token embeddings, also the output head. `V x d`.
    pub wte: Array2<F>,
    /// Learned positions. `context_len x d`.
    pub wpe: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
}

impl<F: Real> Block<F> {
    fn zeros(d: usize) -> Self {
        let h = 4 * d;
        Self {
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
            w_fc: Array2::zeros((d, h)),
            b_fc: Array1::zeros(h),
            w_proj: Array2::zeros((h, d)),
            b_proj: Array1::zeros(d),
        }
    }
}

impl<F: Real> LMParams<F> {
    pub fn zeros(config: LMConfig) -> Self {
        let (v, d) = (config.vocab_size, config.model_dim);
        Self {
            wte: Array2::zeros((v, d)),
            wpe: Array2::zeros((config.context_len, d)),
            blocks: (0..config.layers).map(|_| Block::zeros(d)).collect(),
            lnf_g: Array1::zeros(d),
            lnf_b: Array1::zeros(d),
            config,
        }
    }

    /// GPT-2 style init: N(0, 0.02) weights, residual projections scaled by
    /// `1/sqrt(2 * layers)`, unit norm gains.
    pub fn init(config: LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let std = 0.02;
        let resid = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let mut fill = |a: &mut [F], sd: f64| {
            let n = Normal::new(0.0, sd).unwrap();
            for x in a {
                *x = F::from_f64(n.sample(&mut rng)).unwrap();
            }
        };
        fill(p.wte.as_slice_mut().unwrap(), std);
        fill(p.wpe.as_slice_mut().unwrap(), std / 2.0);
        for b in &mut p.blocks {
            fill(b.w_qkv.as_slice_mut().unwrap(), std);
            fill(b.w_o.as_slice_mut().unwrap(), resid);
            fill(b.w_fc.as_slice_mut().unwrap(), std);
            fill(b.w_proj.as_slice_mut().unwrap(), resid);
            b.ln1_g.fill(F::one());
            b.ln2_g.fill(F::one());
        }
        p.lnf_g.fill(F::one());
        Ok(p)
    }

    /// Every tensor as a flat slice, in checkpoint order.
    pub fn tensors(&self) -> Vec<&[F]> {
        let mut out: Vec<&[F]> = vec![self.wte.as_slice().unwrap(), self.wpe.as_slice().unwrap()];
        for b in &self.blocks {
            out.extend([
                b.ln1_g.as_slice().unwrap(),
                b.ln1_b.as_slice().unwrap(),
                b.w_qkv.as_slice().unwrap(),
                b.b_qkv.as_slice().unwrap(),
                b.w_o.as_slice().unwrap(),
                b.b_o.as_slice().unwrap(),
                b.ln2_g.as_slice().unwrap(),
                b.ln2_b.as_slice().unwrap(),
                b.w_fc.as_slice().unwrap(),
                b.b_fc.as_slice().unwrap(),
                b.w_proj.as_slice().unwrap(),
                b.b_proj.as_slice().unwrap(),
            ]);
        }
        out.push(self.lnf_g.as_slice().unwrap());
        out.push(self.lnf_b.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.wte.as_slice_mut().unwrap(),
            self.wpe.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.ln1_g.as_slice_mut().unwrap(),
                b.ln1_b.as_slice_mut().unwrap(),
                b.w_qkv.as_slice_mut().unwrap(),
                b.b_qkv.as_slice_mut().unwrap(),
                b.w_o.as_slice_mut().unwrap(),
                b.b_o.as_slice_mut().unwrap(),
                b.ln2_g.as_slice_mut().unwrap(),
                b.ln2_b.as_slice_mut().unwrap(),
                b.w_fc.as_slice_mut().unwrap(),
                b.b_fc.as_slice_mut().unwrap(),
                b.w_proj.as_slice_mut().unwrap(),
                b.b_proj.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.lnf_g.as_slice_mut().unwrap());
        out.push(self.lnf_b.as_slice_mut().unwrap());
        out
    }

    pub fn cast<G: Real>(&self) -> LMParams<G> {
        let mut out = LMParams::<G>::zeros(self.config);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a = G::from_f64(b.to_f64().unwrap()).unwrap();
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

fn layer_norm<F: Real>(x: &Array2<F>, g: &Array1<F>, b: &Array1<F>) -> (Array2<F>, LnCache<F>) {
    let d = F::from_usize(x.ncols()).unwrap();
    let eps = F::from_f64(LN_EPS).unwrap();
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let s = *r;
        row.mapv_inplace(|v| v * s);
    }
    let out = &xhat * g + b;
    (out, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    g: &Array1<F>,
    dg: Option<(&mut Array1<F>, &mut Array1<F>)>,
) -> Array2<F> {
    if let Some((dg, db)) = dg {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = F::from_usize(dy.ncols()).unwrap();
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.rstd)
        .for_each(|mut dx, dxh, xh, &rstd| {
            let m1 = dxh.sum() / d;
            let m2 = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / d;
            Zip::from(&mut dx).and(&dxh).and(&xh).for_each(|o, &a, &b| {
                *o = rstd * (a - m1 - b * m2);
            });
        });
    dx
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap();
    let k = F::from_f64(0.044715).unwrap();
    let half = F::from_f64(0.5).unwrap();
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt()).unwrap();
    let k = F::from_f64(0.044715).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let t = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

struct LayerCache<F> {
    ln1: LnCache<F>,
    a1: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    concat: Array2<F>,
    ln2: LnCache<F>,
    a2: Array2<F>,
    pre_gelu: Array2<F>,
    post_gelu: Array2<F>,
}

/// Activations kept for the backward pass.
pub struct Trace<F> {
    slots: Vec<Slot>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    /// Final normalized hidden states, `T x d`.
    pub hidden: Array2<F>,
}

impl<F> Trace<F> {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Gradient accumulators. `params` collects backbone gradients, `soft`
/// collects soft-prompt gradients; either may be absent.
pub struct Grads<F> {
    pub params: Option<LMParams<F>>,
    pub soft: Option<Array2<F>>,
}

fn check_soft<F: Real>(p: &LMParams<F>, soft: Option<&Array2<F>>) -> Result<()> {
    if let Some(s) = soft {
        if s.ncols() != p.config.model_dim || s.nrows() > p.config.concept_slots {
            return Err(Error::Config(format!(
                "soft prompt is {}x{}, model allows at most {}x{}",
                s.nrows(),
                s.ncols(),
                p.config.concept_slots,
                p.config.model_dim
            )));
        }
    }
    Ok(())
}

pub fn forward<F: Real>(p: &LMParams<F>, slots: &[Slot], soft: Option<&Array2<F>>) -> Result<Trace<F>> {
    let cfg = &p.config;
    if slots.len() > cfg.context_len {
        return Err(Error::ContextOverflow {
            needed: slots.len(),
            context_len: cfg.context_len,
        });
    }
    check_soft(p, soft)?;
    let (t, d) = (slots.len(), cfg.model_dim);
    let mut x = Array2::<F>::zeros((t, d));
    for (i, slot) in slots.iter().enumerate() {
        let emb = match *slot {
            Slot::Token(id) => {
                let id = id as usize;
                if id >= cfg.vocab_size {
                    return Err(Error::Config(format!("token id {id} outside vocabulary")));
                }
                p.wte.row(id)
            }
            Slot::Soft(j) => soft
                .filter(|s| j < s.nrows())
                .ok_or_else(|| Error::Config(format!("soft slot {j} without soft prompt row")))?
                .row(j),
        };
        let mut row = x.row_mut(i);
        row.assign(&emb);
        row += &p.wpe.row(i);
    }

    let heads = cfg.heads;
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
    let mut layers = Vec::with_capacity(p.blocks.len());
    for b in &p.blocks {
        let (a1, ln1) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
        let qkv = a1.dot(&b.w_qkv) + &b.b_qkv;
        let mut concat = Array2::<F>::zeros((t, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut att = q.dot(&k.t());
            for (i, mut row) in att.rows_mut().into_iter().enumerate() {
                let mut max = F::neg_infinity();
                for j in 0..=i {
                    row[j] = row[j] * scale;
                    max = max.max(row[j]);
                }
                let mut sum = F::zero();
                for j in 0..t {
                    if j <= i {
                        row[j] = (row[j] - max).exp();
                        sum = sum + row[j];
                    } else {
                        row[j] = F::zero();
                    }
                }
                row.mapv_inplace(|e| e / sum);
            }
            concat
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&att.dot(&v));
            probs.push(att);
        }
        x = x + concat.dot(&b.w_o) + &b.b_o;
        let (a2, ln2) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
        let pre_gelu = a2.dot(&b.w_fc) + &b.b_fc;
        let post_gelu = pre_gelu.mapv(gelu);
        x = x + post_gelu.dot(&b.w_proj) + &b.b_proj;
        layers.push(LayerCache {
            ln1,
            a1,
            qkv,
            probs,
            concat,
            ln2,
            a2,
            pre_gelu,
            post_gelu,
        });
    }
    let (hidden, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
    Ok(Trace {
        slots: slots.to_vec(),
        layers,
        lnf,
        hidden,
    })
}

/// Output-head matrix with concept rows replaced by the soft prompt.
fn head<'a, F: Real>(p: &'a LMParams<F>, soft: Option<&Array2<F>>) -> std::borrow::Cow<'a, Array2<F>> {
    match soft {
        Some(s) if s.nrows() > 0 => {
            let mut w = p.wte.clone();
            let base = p.config.concept_base;
            w.slice_mut(s![base..base + s.nrows(), ..]).assign(s);
            std::borrow::Cow::Owned(w)
        }
        _ => std::borrow::Cow::Borrowed(&p.wte),
    }
}

/// Logits for the given hidden rows, `R x V`.
pub fn logits<F: Real>(p: &LMParams<F>, soft: Option<&Array2<F>>, hidden: ArrayView2<F>) -> Array2<F> {
    hidden.dot(&head(p, soft).t())
}

/// Back through the output head: accumulate head gradients and return
/// `dhidden` for the given rows.
pub fn head_backward<F: Real>(
    p: &LMParams<F>,
    soft: Option<&Array2<F>>,
    hidden: ArrayView2<F>,
    dlogits: &Array2<F>,
    grads: &mut Grads<F>,
) -> Array2<F> {
    let w = head(p, soft);
    let dw = dlogits.t().dot(&hidden);
    let c = soft.map_or(0, |s| s.nrows());
    let base = p.config.concept_base;
    if let Some(gp) = grads.params.as_mut() {
        if c == 0 {
            gp.wte += &dw;
        } else {
            // Concept rows belong to the soft prompt while it is attached.
            let mut dw = dw.clone();
            dw.slice_mut(s![base..base + c, ..]).fill(F::zero());
            gp.wte += &dw;
        }
    }
    if let Some(gs) = grads.soft.as_mut() {
        if c > 0 {
            *gs += &dw.slice(s![base..base + c, ..]);
        }
    }
    dlogits.dot(w.as_ref())
}

/// Backward pass from `dhidden` (`T x d`, gradient of the final hidden states).
pub fn backward<F: Real>(
    p: &LMParams<F>,
    trace: &Trace<F>,
    dhidden: &Array2<F>,
    grads: &mut Grads<F>,
) {
    let cfg = &p.config;
    let (t, d) = (trace.len(), cfg.model_dim);
    let heads = cfg.heads;
    let dh = d / heads;
    let scale = F::one() / F::from_usize(dh).unwrap().sqrt();

    let mut dx = {
        let gp = grads.params.as_mut().map(|g| (&mut g.lnf_g, &mut g.lnf_b));
        layer_norm_backward(dhidden, &trace.lnf, &p.lnf_g, gp)
    };

    for (li, (b, c)) in p.blocks.iter().zip(&trace.layers).enumerate().rev() {
        // MLP branch.
        let dpost = dx.dot(&b.w_proj.t());
        let dpre = Zip::from(&dpost)
            .and(&c.pre_gelu)
            .map_collect(|&g, &x| g * gelu_grad(x));
        let da2 = dpre.dot(&b.w_fc.t());
        if let Some(gp) = grads.params.as_mut() {
            let gb = &mut gp.blocks[li];
            gb.w_proj += &c.post_gelu.t().dot(&dx);
            gb.b_proj += &dx.sum_axis(Axis(0));
            gb.w_fc += &c.a2.t().dot(&dpre);
            gb.b_fc += &dpre.sum_axis(Axis(0));
        }
        let dmid = {
            let gp = grads
                .params
                .as_mut()
                .map(|g| {
                    let gb = &mut g.blocks[li];
                    (&mut gb.ln2_g, &mut gb.ln2_b)
                });
            layer_norm_backward(&da2, &c.ln2, &b.ln2_g, gp)
        };
        dx += &dmid;

        // Attention branch.
        let dconcat = dx.dot(&b.w_o.t());
        let mut dqkv = Array2::<F>::zeros((t, 3 * d));
        for h in 0..heads {
            let q = c.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = c.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = c.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let probs = &c.probs[h];
            let dout = dconcat.slice(s![.., h * dh..(h + 1) * dh]);
            let dp = dout.dot(&v.t());
            let dv = probs.t().dot(&dout);
            let mut ds = dp;
            Zip::from(ds.rows_mut())
                .and(probs.rows())
                .for_each(|mut dsr, pr| {
                    let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    Zip::from(&mut dsr).and(&pr).for_each(|g, &pv| *g = pv * (*g - dot) * scale);
                });
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
            dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
        }
        let da1 = dqkv.dot(&b.w_qkv.t());
        if let Some(gp) = grads.params.as_mut() {
            let gb = &mut gp.blocks[li];
            gb.w_o += &c.concat.t().dot(&dx);
            gb.b_o += &dx.sum_axis(Axis(0));
            gb.w_qkv += &c.a1.t().dot(&dqkv);
            gb.b_qkv += &dqkv.sum_axis(Axis(0));
        }
        let din = {
            let gp = grads
                .params
                .as_mut()
                .map(|g| {
                    let gb = &mut g.blocks[li];
                    (&mut gb.ln1_g, &mut gb.ln1_b)
                });
            layer_norm_backward(&da1, &c.ln1, &b.ln1_g, gp)
        };
        dx += &din;
    }

    for (i, slot) in trace.slots.iter().enumerate() {
        match *slot {
            Slot::Token(id) => {
                if let Some(gp) = grads.params.as_mut() {
                    let mut row = gp.wte.row_mut(id as usize);
                    row += &dx.row(i);
                }
            }
            Slot::Soft(j) => {
                if let Some(gs) = grads.soft.as_mut() {
                    let mut row = gs.row_mut(j);
                    row += &dx.row(i);
                }
            }
        }
        if let Some(gp) = grads.params.as_mut() {
            let mut row = gp.wpe.row_mut(i);
            row += &dx.row(i);
        }
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax<F: Real>(row: ndarray::ArrayView1<F>) -> Array1<F> {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln() + max;
    row.mapv(|x| x - lse)
}

/// Negative log-likelihood of `targets` (pairs of predicting position and
/// target id) and, when requested, its gradients.
pub fn nll<F: Real>(
    p: &LMParams<F>,
    soft: Option<&Array2<F>>,
    slots: &[Slot],
    targets: &[(usize, u32)],
    grads: Option<&mut Grads<F>>,
) -> Result<F> {
    let trace = forward(p, slots, soft)?;
    if targets.is_empty() {
        return Ok(F::zero());
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let hidden = trace.hidden.select(Axis(0), &rows);
    let lg = logits(p, soft, hidden.view());
    let mut loss = F::zero();
    let mut dlogits = Array2::<F>::zeros(lg.raw_dim());
    for (r, &(_, target)) in targets.iter().enumerate() {
        let lp = log_softmax(lg.row(r));
        loss = loss - lp[target as usize];
        let mut drow = dlogits.row_mut(r);
        drow.assign(&lp.mapv(F::exp));
        drow[target as usize] = drow[target as usize] - F::one();
    }
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("loss {loss:?}")));
    }
    if let Some(grads) = grads {
        let dh_rows = head_backward(p, soft, hidden.view(), &dlogits, grads);
        let mut dhidden = Array2::<F>::zeros(trace.hidden.raw_dim());
        for (r, &row) in rows.iter().enumerate() {
            let mut dst = dhidden.row_mut(row);
            dst += &dh_rows.row(r);
        }
        backward(p, &trace, &dhidden, grads);
    }
    Ok(loss)
}
