//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once built; an operation records its parents and a
//! backward closure, and [`backward`] replays the graph in reverse
//! topological order. Gradients are accumulated in a side table rather than
//! inside the tensors, which keeps tensors `Send + Sync`. All inner products
//! accumulate in f64 (storage stays f32), and every primitive checks its
//! output for NaN/Inf so long runs fail loudly at the op that produced the
//! bad value.
//!
//! The op set is deliberately small: what the model zoo needs (matmul,
//! embedding lookups, ReLU/GELU, fused causal self-attention, conv2d, fused
//! cross-entropy and KL) plus a few elementwise helpers.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gradvec::{dot_f64, GradVector, IndexMap};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

struct BwdCtx<'a> {
    grad_out: &'a [f32],
    parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BwdCtx) -> Vec<Option<Vec<f32>>> + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Immutable dense tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

impl Tensor {
    fn build(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Tensor> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad { Some(Node { parents, backward }) } else { None };
        Ok(Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad,
            node,
        })))
    }

    /// Leaf tensor without gradient tracking.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} does not cover {} values", shape, data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })))
    }

    /// Leaf tensor that participates in gradient computation.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        Ok(t.requiring_grad())
    }

    /// Same storage, flagged as requiring gradients.
    pub fn requiring_grad(&self) -> Tensor {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape: self.0.shape.clone(),
            data: self.0.data.clone(),
            requires_grad: true,
            node: None,
        }))
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar is finite")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(vec![0.0; n], shape).expect("zeros are finite")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.data.len() == 1
    }

    pub fn item(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar, got shape {:?}",
                self.0.shape
            )));
        }
        Ok(self.0.data[0])
    }

    fn rows(&self) -> usize {
        self.0.shape[0]
    }

    fn cols(&self) -> usize {
        self.0.shape.iter().skip(1).product::<usize>().max(1)
    }

    fn want_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.0.shape.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-d, got {:?}", self.0.shape)));
        }
        Ok((self.0.shape[0], self.0.shape[1]))
    }
}

// ---------------------------------------------------------------------------
// dense kernels (f64 accumulation, f32 storage)
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] * B[k,n]
fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for kk in 0..k {
            let av = a[i * k + kk] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (acc, bv) in row.iter_mut().zip(brow) {
                *acc += av * *bv as f64;
            }
        }
        for (o, acc) in out[i * n..i * n + n].iter_mut().zip(&row) {
            *o = *acc as f32;
        }
    }
    out
}

/// C[m,n] = A^T[m,s] * B[s,n]  with A stored [s,m]
fn mm_tn(a: &[f32], b: &[f32], s: usize, m: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for ss in 0..s {
        let arow = &a[ss * m..ss * m + m];
        let brow = &b[ss * n..ss * n + n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let av = av as f64;
            let dst = &mut acc[i * n..i * n + n];
            for (d, bv) in dst.iter_mut().zip(brow) {
                *d += av * *bv as f64;
            }
        }
    }
    acc.iter().map(|&v| v as f32).collect()
}

/// C[m,n] = A[m,k] * B^T[k,n]  with B stored [n,k]
fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        for j in 0..n {
            let brow = &b[j * k..j * k + k];
            out[i * n + j] = dot_f64(arow, brow) as f32;
        }
    }
    out
}

fn softmax_rows_f64(logits: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut probs = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v as f64 - mx).exp();
            *p = e;
            sum += e;
        }
        for p in &mut probs[r * cols..(r + 1) * cols] {
            *p /= sum;
        }
    }
    probs
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Standard matrix product with gradients to both operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.want_2d("matmul")?;
    let (kb, n) = b.want_2d("matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims disagree: [{m}x{ka}] * [{kb}x{n}]"),
        ));
    }
    let out = mm_nn(a.data(), b.data(), m, ka, n);
    Tensor::build(
        "matmul",
        vec![m, n],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let a = &ctx.parents[0];
            let b = &ctx.parents[1];
            let ga = a
                .requires_grad()
                .then(|| mm_nt(ctx.grad_out, b.data(), m, n, ka));
            let gb = b
                .requires_grad()
                .then(|| mm_tn(a.data(), ctx.grad_out, m, ka, n));
            vec![ga, gb]
        }),
    )
}

/// Elementwise sum of two same-shape tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::build(
        "add",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = |p: &Tensor| p.requires_grad().then(|| ctx.grad_out.to_vec());
            vec![g(&ctx.parents[0]), g(&ctx.parents[1])]
        }),
    )
}

/// Row-broadcast bias: x[n,d] + b[d].
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = x.want_2d("add_bias")?;
    if b.shape() != [d] {
        return Err(Error::shape("add_bias", format!("bias {:?} vs cols {d}", b.shape())));
    }
    let mut out = x.data().to_vec();
    for r in 0..n {
        for (o, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::build(
        "add_bias",
        vec![n, d],
        out,
        vec![x.clone(), b.clone()],
        Box::new(move |ctx| {
            let gx = ctx.parents[0].requires_grad().then(|| ctx.grad_out.to_vec());
            let gb = ctx.parents[1].requires_grad().then(|| {
                let mut g = vec![0.0f64; d];
                for r in 0..n {
                    for (acc, &v) in g.iter_mut().zip(&ctx.grad_out[r * d..(r + 1) * d]) {
                        *acc += v as f64;
                    }
                }
                g.iter().map(|&v| v as f32).collect()
            });
            vec![gx, gb]
        }),
    )
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::build(
        "mul",
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let a = &ctx.parents[0];
            let b = &ctx.parents[1];
            let ga = a.requires_grad().then(|| {
                ctx.grad_out.iter().zip(b.data()).map(|(g, y)| g * y).collect()
            });
            let gb = b.requires_grad().then(|| {
                ctx.grad_out.iter().zip(a.data()).map(|(g, x)| g * x).collect()
            });
            vec![ga, gb]
        }),
    )
}

/// Multiply by a constant.
pub fn scale(x: &Tensor, c: f32) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|v| v * c).collect();
    Tensor::build(
        "scale",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.parents[0]
                .requires_grad()
                .then(|| ctx.grad_out.iter().map(|g| g * c).collect())]
        }),
    )
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::build(
        "relu",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(|ctx| {
            let x = &ctx.parents[0];
            vec![x.requires_grad().then(|| {
                ctx.grad_out
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect()
            })]
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let out: Vec<f32> = x
        .data()
        .iter()
        .map(|&v| {
            let v = v as f64;
            let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
            (0.5 * v * (1.0 + t)) as f32
        })
        .collect();
    Tensor::build(
        "gelu",
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(|ctx| {
            let x = &ctx.parents[0];
            vec![x.requires_grad().then(|| {
                ctx.grad_out
                    .iter()
                    .zip(x.data())
                    .map(|(g, &v)| {
                        let v = v as f64;
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                        (*g as f64 * d) as f32
                    })
                    .collect()
            })]
        }),
    )
}

/// Sum of all entries, as a scalar.
pub fn sum_all(x: &Tensor) -> Result<Tensor> {
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::build(
        "sum_all",
        vec![1],
        vec![s as f32],
        vec![x.clone()],
        Box::new(|ctx| {
            let g = ctx.grad_out[0];
            vec![ctx.parents[0]
                .requires_grad()
                .then(|| vec![g; ctx.parents[0].len()])]
        }),
    )
}

/// Mean of all entries, as a scalar.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.len() as f64;
    let s: f64 = x.data().iter().map(|&v| v as f64).sum();
    Tensor::build(
        "mean_all",
        vec![1],
        vec![(s / n) as f32],
        vec![x.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad_out[0] / n as f32;
            vec![ctx.parents[0]
                .requires_grad()
                .then(|| vec![g; ctx.parents[0].len()])]
        }),
    )
}

/// Mean negative log-softmax of the true class, stabilized by row-max
/// subtraction. `labels[i]` must lie in `[0, cols)`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let mask = vec![true; labels.len()];
    cross_entropy_masked(logits, labels, &mask)
}

/// Cross-entropy averaged over rows where `mask` is true. Rows with a false
/// mask contribute nothing (and get zero gradient).
pub fn cross_entropy_masked(logits: &Tensor, labels: &[u32], mask: &[bool]) -> Result<Tensor> {
    let (n, c) = logits.want_2d("cross_entropy")?;
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows vs {} labels / {} mask", labels.len(), mask.len()),
        ));
    }
    for (&y, &m) in labels.iter().zip(mask) {
        if m && y as usize >= c {
            return Err(Error::validation(format!("label {y} out of range [0, {c})")));
        }
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::validation("cross_entropy over empty mask".into()));
    }
    let data = logits.data();
    let mut total = 0.0f64;
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let row = &data[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v as f64 - mx).exp();
        }
        total += sum.ln() - (row[labels[r] as usize] as f64 - mx);
    }
    let labels = labels.to_vec();
    let mask = mask.to_vec();
    Tensor::build(
        "cross_entropy",
        vec![1],
        vec![(total / active as f64) as f32],
        vec![logits.clone()],
        Box::new(move |ctx| {
            let logits = &ctx.parents[0];
            vec![logits.requires_grad().then(|| {
                let probs = softmax_rows_f64(logits.data(), n, c);
                let g = ctx.grad_out[0] as f64 / active as f64;
                let mut grad = vec![0.0f32; n * c];
                for r in 0..n {
                    if !mask[r] {
                        continue;
                    }
                    for j in 0..c {
                        let p = probs[r * c + j];
                        let target = if j == labels[r] as usize { 1.0 } else { 0.0 };
                        grad[r * c + j] = (g * (p - target)) as f32;
                    }
                }
                grad
            })]
        }),
    )
}

/// Per-row cross-entropy losses (no gradient), for loss-threshold attacks
/// and per-example trajectory logging. f64 accumulation.
pub fn per_row_cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Vec<f64>> {
    let (n, c) = logits.want_2d("per_row_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "per_row_cross_entropy",
            format!("{n} rows vs {} labels", labels.len()),
        ));
    }
    let data = logits.data();
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let y = labels[r] as usize;
        if y >= c {
            return Err(Error::validation(format!("label {y} out of range [0, {c})")));
        }
        let row = &data[r * c..(r + 1) * c];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
        out.push(sum.ln() - (row[y] as f64 - mx));
    }
    Ok(out)
}

/// Mean KL(model || ref) over rows, with both distributions tempered by
/// `temperature`. The reference is a constant (no gradient flows to it).
/// Exactly zero when the logits are bit-identical.
pub fn kl_to_ref(model_logits: &Tensor, ref_logits: &Tensor, temperature: f32) -> Result<Tensor> {
    let (n, c) = model_logits.want_2d("kl_to_ref")?;
    if ref_logits.shape() != model_logits.shape() {
        return Err(Error::shape(
            "kl_to_ref",
            format!("{:?} vs {:?}", model_logits.shape(), ref_logits.shape()),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::validation("temperature must be positive".into()));
    }
    let t = temperature as f64;
    let scale_row = |row: &[f32]| -> Vec<f64> {
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64 / t;
        let zs: Vec<f64> = row.iter().map(|&v| v as f64 / t - mx).collect();
        let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
        zs.iter().map(|z| z - lse).collect() // log-probs
    };
    let md = model_logits.data();
    let rd = ref_logits.data();
    let mut total = 0.0f64;
    let mut q_probs = vec![0.0f64; n * c];
    let mut diffs = vec![0.0f64; n * c]; // log q - log p
    let mut row_kl = vec![0.0f64; n];
    for r in 0..n {
        let lq = scale_row(&md[r * c..(r + 1) * c]);
        let lp = scale_row(&rd[r * c..(r + 1) * c]);
        let mut kl = 0.0f64;
        for j in 0..c {
            let q = lq[j].exp();
            let d = lq[j] - lp[j];
            q_probs[r * c + j] = q;
            diffs[r * c + j] = d;
            kl += q * d;
        }
        row_kl[r] = kl;
        total += kl;
    }
    Tensor::build(
        "kl_to_ref",
        vec![1],
        vec![(total / n as f64) as f32],
        vec![model_logits.clone(), ref_logits.clone()],
        Box::new(move |ctx| {
            // d/dz_k mean KL(q||p) = q_k (log q_k - log p_k - KL_row) / (T n)
            let g = ctx.grad_out[0] as f64 / (n as f64 * t);
            let gm = ctx.parents[0].requires_grad().then(|| {
                let mut grad = vec![0.0f32; n * c];
                for r in 0..n {
                    for j in 0..c {
                        let idx = r * c + j;
                        grad[idx] = (g * q_probs[idx] * (diffs[idx] - row_kl[r])) as f32;
                    }
                }
                grad
            });
            vec![gm, None]
        }),
    )
}

/// Embedding lookup: one table row per id.
pub fn lookup(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = table.want_2d("lookup")?;
    for &id in ids {
        if id as usize >= v {
            return Err(Error::validation(format!("token id {id} out of range [0, {v})")));
        }
    }
    let n = ids.len();
    let mut out = vec![0.0f32; n * d];
    let td = table.data();
    for (r, &id) in ids.iter().enumerate() {
        out[r * d..(r + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
    }
    let ids = ids.to_vec();
    Tensor::build(
        "lookup",
        vec![n, d],
        out,
        vec![table.clone()],
        Box::new(move |ctx| {
            vec![ctx.parents[0].requires_grad().then(|| {
                let mut g = vec![0.0f32; v * d];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                    for (gd, &go) in dst.iter_mut().zip(&ctx.grad_out[r * d..(r + 1) * d]) {
                        *gd += go;
                    }
                }
                g
            })]
        }),
    )
}

/// Sum of `group` consecutive table rows per output row; equivalent to a
/// one-hot-bag times the table, without materializing the one-hots.
pub fn bag_lookup(table: &Tensor, ids: &[u32], group: usize) -> Result<Tensor> {
    let (v, d) = table.want_2d("bag_lookup")?;
    if group == 0 || ids.len() % group != 0 {
        return Err(Error::shape(
            "bag_lookup",
            format!("{} ids not divisible by group {group}", ids.len()),
        ));
    }
    for &id in ids {
        if id as usize >= v {
            return Err(Error::validation(format!("token id {id} out of range [0, {v})")));
        }
    }
    let n = ids.len() / group;
    let mut out = vec![0.0f32; n * d];
    let td = table.data();
    for r in 0..n {
        let dst = &mut out[r * d..(r + 1) * d];
        for &id in &ids[r * group..(r + 1) * group] {
            for (o, &t) in dst.iter_mut().zip(&td[id as usize * d..(id as usize + 1) * d]) {
                *o += t;
            }
        }
    }
    let ids = ids.to_vec();
    Tensor::build(
        "bag_lookup",
        vec![n, d],
        out,
        vec![table.clone()],
        Box::new(move |ctx| {
            vec![ctx.parents[0].requires_grad().then(|| {
                let mut g = vec![0.0f32; v * d];
                for r in 0..n {
                    let go = &ctx.grad_out[r * d..(r + 1) * d];
                    for &id in &ids[r * group..(r + 1) * group] {
                        let dst = &mut g[id as usize * d..(id as usize + 1) * d];
                        for (gd, &gv) in dst.iter_mut().zip(go) {
                            *gd += gv;
                        }
                    }
                }
                g
            })]
        }),
    )
}

/// Select one sequence position from a [batch*seq, d] tensor, yielding
/// [batch, d].
pub fn select_pos(x: &Tensor, seq_len: usize, pos: usize) -> Result<Tensor> {
    let (rows, d) = x.want_2d("select_pos")?;
    if seq_len == 0 || rows % seq_len != 0 || pos >= seq_len {
        return Err(Error::shape(
            "select_pos",
            format!("rows {rows}, seq {seq_len}, pos {pos}"),
        ));
    }
    let b = rows / seq_len;
    let mut out = vec![0.0f32; b * d];
    for i in 0..b {
        let src = (i * seq_len + pos) * d;
        out[i * d..(i + 1) * d].copy_from_slice(&x.data()[src..src + d]);
    }
    Tensor::build(
        "select_pos",
        vec![b, d],
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            vec![ctx.parents[0].requires_grad().then(|| {
                let mut g = vec![0.0f32; rows * d];
                for i in 0..b {
                    let dst = (i * seq_len + pos) * d;
                    g[dst..dst + d].copy_from_slice(&ctx.grad_out[i * d..(i + 1) * d]);
                }
                g
            })]
        }),
    )
}

/// Fused multi-head causal self-attention over already-projected q/k/v,
/// each shaped [batch*seq, d]. Scores are scaled by 1/sqrt(d/heads).
pub fn causal_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    seq_len: usize,
) -> Result<Tensor> {
    let (rows, d) = q.want_2d("causal_attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("causal_attention", "q/k/v shapes differ".into()));
    }
    if heads == 0 || d % heads != 0 || seq_len == 0 || rows % seq_len != 0 {
        return Err(Error::shape(
            "causal_attention",
            format!("d {d}, heads {heads}, rows {rows}, seq {seq_len}"),
        ));
    }
    let b = rows / seq_len;
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let at = |base: usize, s: usize, h: usize| (base + s) * d + h * dh;

    // probs[b][h][s][t] for t <= s, stored dense [b, heads, seq, seq]
    let mut probs = vec![0.0f64; b * heads * seq_len * seq_len];
    let mut out = vec![0.0f32; rows * d];
    for bi in 0..b {
        let base = bi * seq_len;
        for h in 0..heads {
            for s in 0..seq_len {
                let p_off = ((bi * heads + h) * seq_len + s) * seq_len;
                let qrow = &qd[at(base, s, h)..at(base, s, h) + dh];
                let mut mx = f64::NEG_INFINITY;
                let mut scores = vec![0.0f64; s + 1];
                for (t, sc) in scores.iter_mut().enumerate() {
                    let krow = &kd[at(base, t, h)..at(base, t, h) + dh];
                    *sc = dot_f64(qrow, krow) * inv_sqrt;
                    mx = mx.max(*sc);
                }
                let mut sum = 0.0f64;
                for sc in &mut scores {
                    *sc = (*sc - mx).exp();
                    sum += *sc;
                }
                let orow = &mut out[at(base, s, h)..at(base, s, h) + dh];
                for (t, sc) in scores.iter().enumerate() {
                    let p = sc / sum;
                    probs[p_off + t] = p;
                    let vrow = &vd[at(base, t, h)..at(base, t, h) + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += (p * vv as f64) as f32;
                    }
                }
            }
        }
    }
    Tensor::build(
        "causal_attention",
        vec![rows, d],
        out,
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |ctx| {
            let go = ctx.grad_out;
            let (q, k, v) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let need = q.requires_grad() || k.requires_grad() || v.requires_grad();
            if !need {
                return vec![None, None, None];
            }
            let mut gq = vec![0.0f32; rows * d];
            let mut gk = vec![0.0f32; rows * d];
            let mut gv = vec![0.0f32; rows * d];
            for bi in 0..b {
                let base = bi * seq_len;
                for h in 0..heads {
                    for s in 0..seq_len {
                        let p_off = ((bi * heads + h) * seq_len + s) * seq_len;
                        let go_row = &go[at(base, s, h)..at(base, s, h) + dh];
                        // dA[t] = go . v_t ; dV_t += p_t * go
                        let mut da = vec![0.0f64; s + 1];
                        let mut dot_sum = 0.0f64; // sum_t p_t * dA[t]
                        for (t, dat) in da.iter_mut().enumerate() {
                            let vrow = &vd[at(base, t, h)..at(base, t, h) + dh];
                            *dat = dot_f64(go_row, vrow);
                            let p = probs[p_off + t];
                            dot_sum += p * *dat;
                            let gvrow = &mut gv[at(base, t, h)..at(base, t, h) + dh];
                            for (g, &o) in gvrow.iter_mut().zip(go_row) {
                                *g += (p * o as f64) as f32;
                            }
                        }
                        // softmax backward: dS[t] = p_t (dA[t] - sum p dA)
                        let qrow = &qd[at(base, s, h)..at(base, s, h) + dh];
                        for (t, dat) in da.iter().enumerate() {
                            let p = probs[p_off + t];
                            let ds = p * (dat - dot_sum) * inv_sqrt;
                            let krow = &kd[at(base, t, h)..at(base, t, h) + dh];
                            let gqrow = &mut gq[at(base, s, h)..at(base, s, h) + dh];
                            for (g, &kv) in gqrow.iter_mut().zip(krow) {
                                *g += (ds * kv as f64) as f32;
                            }
                            let gkrow = &mut gk[at(base, t, h)..at(base, t, h) + dh];
                            for (g, &qv) in gkrow.iter_mut().zip(qrow) {
                                *g += (ds * qv as f64) as f32;
                            }
                        }
                    }
                }
            }
            vec![
                q.requires_grad().then_some(gq),
                k.requires_grad().then_some(gk),
                v.requires_grad().then_some(gv),
            ]
        }),
    )
}

/// Geometry for [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

/// Direct 2-d convolution. `x` is [n, in_ch*in_h*in_w], `w` is
/// [out_ch, in_ch*k*k], `bias` is [out_ch]; output is [n, out_ch*oh*ow].
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let (n, in_len) = x.want_2d("conv2d")?;
    let ConvGeom { in_ch, in_h, in_w, out_ch, kernel, stride, pad } = geom;
    if in_len != in_ch * in_h * in_w {
        return Err(Error::shape(
            "conv2d",
            format!("input cols {in_len} vs {in_ch}x{in_h}x{in_w}"),
        ));
    }
    if w.shape() != [out_ch, in_ch * kernel * kernel] || bias.shape() != [out_ch] {
        return Err(Error::shape("conv2d", "kernel/bias shape mismatch".into()));
    }
    let (oh, ow) = geom.out_hw();
    let out_len = out_ch * oh * ow;
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let mut out = vec![0.0f32; n * out_len];
    for i in 0..n {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        for oc in 0..out_ch {
            let wrow = &wd[oc * in_ch * kernel * kernel..(oc + 1) * in_ch * kernel * kernel];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bd[oc] as f64;
                    for ic in 0..in_ch {
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= in_h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= in_w as isize {
                                    continue;
                                }
                                let xv = xi[(ic * in_h + iy as usize) * in_w + ix as usize];
                                let wv = wrow[(ic * kernel + ky) * kernel + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[i * out_len + (oc * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::build(
        "conv2d",
        vec![n, out_len],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |ctx| {
            let (x, w, bias) = (&ctx.parents[0], &ctx.parents[1], &ctx.parents[2]);
            let (xd, wd) = (x.data(), w.data());
            let go = ctx.grad_out;
            let klen = in_ch * kernel * kernel;
            let mut gx = x.requires_grad().then(|| vec![0.0f32; n * in_len]);
            let mut gw = w.requires_grad().then(|| vec![0.0f64; out_ch * klen]);
            let mut gb = bias.requires_grad().then(|| vec![0.0f64; out_ch]);
            for i in 0..n {
                let xi = &xd[i * in_len..(i + 1) * in_len];
                for oc in 0..out_ch {
                    let wrow = &wd[oc * klen..(oc + 1) * klen];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = go[i * out_len + (oc * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[oc] += g as f64;
                            }
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= in_h as isize {
                                        continue;
                                    }
                                    for kx in 0..kernel {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= in_w as isize {
                                            continue;
                                        }
                                        let xoff = (ic * in_h + iy as usize) * in_w + ix as usize;
                                        let woff = (ic * kernel + ky) * kernel + kx;
                                        if let Some(gw) = gw.as_mut() {
                                            gw[oc * klen + woff] += g as f64 * xi[xoff] as f64;
                                        }
                                        if let Some(gx) = gx.as_mut() {
                                            gx[i * in_len + xoff] += g * wrow[woff];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                gx,
                gw.map(|g| g.iter().map(|&v| v as f32).collect()),
                gb.map(|g| g.iter().map(|&v| v as f32).collect()),
            ]
        }),
    )
}

// ---------------------------------------------------------------------------
// backward pass
// ---------------------------------------------------------------------------

/// Gradients of a scalar loss with respect to every `requires_grad` tensor
/// reachable from it.
pub struct Gradients {
    grads: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f32]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Flatten into a [`GradVector`] per the index map; leaves that received
    /// no gradient contribute zeros (the loss is constant in them).
    pub fn flatten(
        &self,
        leaves: &[(&str, &Tensor)],
        index_map: &Arc<IndexMap>,
    ) -> Result<GradVector> {
        let mut out = vec![0.0f32; index_map.total_len()];
        for (name, tensor) in leaves {
            let (off, len) = index_map.span(name).ok_or_else(|| {
                Error::shape("Gradients::flatten", format!("no index entry for {name}"))
            })?;
            if tensor.len() != len {
                return Err(Error::shape(
                    "Gradients::flatten",
                    format!("{name}: tensor len {} vs map len {len}", tensor.len()),
                ));
            }
            if let Some(g) = self.wrt(tensor) {
                out[off..off + len].copy_from_slice(g);
            }
        }
        GradVector::new(out, index_map.clone())
    }
}

/// Reverse-mode sweep from a scalar loss. Deterministic for fixed inputs:
/// traversal order depends only on graph construction order.
pub fn backward(loss: &Tensor) -> Result<Gradients> {
    if !loss.is_scalar() {
        return Err(Error::Contract(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    // Topological order via iterative DFS over requires_grad subgraph.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.id());
    while let Some((t, child_idx)) = stack.pop() {
        let parents: &[Tensor] = t.0.node.as_ref().map(|n| n.parents.as_slice()).unwrap_or(&[]);
        if child_idx < parents.len() {
            let next = parents[child_idx].clone();
            stack.push((t, child_idx + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }

    let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
    grads.insert(loss.id(), vec![1.0]);
    for t in order.iter().rev() {
        let Some(node) = t.0.node.as_ref() else { continue };
        let Some(grad_out) = grads.get(&t.id()).cloned() else { continue };
        let ctx = BwdCtx { grad_out: &grad_out, parents: &node.parents };
        let parent_grads = (node.backward)(&ctx);
        debug_assert_eq!(parent_grads.len(), node.parents.len());
        for (parent, g) in node.parents.iter().zip(parent_grads) {
            let Some(g) = g else { continue };
            debug_assert_eq!(g.len(), parent.len());
            match grads.entry(parent.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }
    for g in grads.values() {
        check_finite("backward", g)?;
    }
    Ok(Gradients { grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f32, b: f32, tol: f32) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let i2 = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let out = matmul(&i2, &a).unwrap();
        assert_eq!(out.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::RngState::new(11, 0);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        // independent naive oracle
        let mut expect = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                expect[i * n + j] = acc;
            }
        }
        let out = matmul(
            &Tensor::from_vec(a, &[m, k]).unwrap(),
            &Tensor::from_vec(b, &[k, n]).unwrap(),
        )
        .unwrap();
        for (o, e) in out.data().iter().zip(&expect) {
            assert!(approx(*o, *e, 1e-6), "{o} vs {e}");
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 5, 97] {
            let logits = Tensor::zeros(&[3, c]);
            let loss = cross_entropy(&logits, &[0, 1, 0]).unwrap();
            assert!(approx(loss.item().unwrap(), (c as f32).ln(), 1e-5));
        }
    }

    #[test]
    fn cross_entropy_margin_limit() {
        // one-hot logit margin: loss -> 0 as the margin grows
        let mut prev = f32::INFINITY;
        for margin in [2.0f32, 8.0, 20.0] {
            let logits = Tensor::from_vec(vec![margin, 0.0, 0.0], &[1, 3]).unwrap();
            let loss = cross_entropy(&logits, &[0]).unwrap().item().unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_direct_summation_oracle() {
        let mut rng = crate::rng::RngState::new(3, 1);
        let (n, c) = (4, 3);
        let logits: Vec<f32> = (0..n * c).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let labels = [2u32, 0, 1, 1];
        // direct formula: -log(exp(x_y)/sum exp(x_j)), no max subtraction
        let mut expect = 0.0f64;
        for r in 0..n {
            let row = &logits[r * c..(r + 1) * c];
            let sum: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            expect += sum.ln() - row[labels[r] as usize] as f64;
        }
        expect /= n as f64;
        let loss = cross_entropy(&Tensor::from_vec(logits, &[n, c]).unwrap(), &labels).unwrap();
        assert!(approx(loss.item().unwrap(), expect as f32, 1e-6));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[0, 3]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn backward_of_constant_is_zero_gradvector() {
        let w = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = Tensor::scalar(5.0);
        let grads = backward(&loss).unwrap();
        let map = Arc::new(IndexMap::from_sizes(&[("w".into(), 3)]));
        let gv = grads.flatten(&[("w", &w)], &map).unwrap();
        assert_eq!(gv.values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_of_half_sum_squares_is_w() {
        let w = Tensor::param(vec![1.5, -2.0, 0.25], &[3]).unwrap();
        let sq = mul(&w, &w).unwrap();
        let loss = scale(&sum_all(&sq).unwrap(), 0.5).unwrap();
        let grads = backward(&loss).unwrap();
        let g = grads.wrt(&w).unwrap();
        for (gv, wv) in g.iter().zip(w.data()) {
            assert!(approx(*gv, *wv, 1e-6));
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = scale(&w, 2.0).unwrap();
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_shared_use() {
        // loss = sum(w) + sum(w) => grad = 2
        let w = Tensor::param(vec![1.0, 1.0], &[2]).unwrap();
        let s = sum_all(&w).unwrap();
        let loss = add(&s, &s).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let big = Tensor::from_vec(vec![3.0e38, 3.0e38], &[1, 2]).unwrap();
        let b = Tensor::from_vec(vec![3.0e38, 3.0e38], &[2, 1]).unwrap();
        assert!(matches!(matmul(&big, &b), Err(Error::NonFinite { .. })));
    }

    /// Central finite differences for a scalar function of a flat buffer.
    fn fd_grad(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], i: usize, h: f32) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let actual_h = (xp[i] as f64 - xm[i] as f64) / 2.0;
        (f(&xp) - f(&xm)) / (2.0 * actual_h)
    }

    fn fd_check(f: &mut dyn FnMut(&[f32]) -> f64, x: &[f32], analytic: &[f32]) {
        for i in 0..x.len() {
            let fd = fd_grad(f, x, i, 1e-3);
            let ad = analytic[i] as f64;
            let err = (ad - fd).abs();
            let tol = 1e-4 + 1e-3 * ad.abs().max(fd.abs());
            assert!(err <= tol, "coord {i}: ad={ad} fd={fd} err={err}");
        }
    }

    #[test]
    fn gelu_gradient_matches_fd() {
        let xs = vec![-2.0f32, -0.5, 0.0, 0.3, 1.7];
        let x = Tensor::param(xs.clone(), &[5]).unwrap();
        let loss = sum_all(&gelu(&x).unwrap()).unwrap();
        let grads = backward(&loss).unwrap();
        let analytic = grads.wrt(&x).unwrap().to_vec();
        fd_check(
            &mut |v: &[f32]| {
                let t = Tensor::from_vec(v.to_vec(), &[5]).unwrap();
                sum_all(&gelu(&t).unwrap()).unwrap().item().unwrap() as f64
            },
            &xs,
            &analytic,
        );
    }

    #[test]
    fn attention_gradient_matches_fd() {
        let mut rng = crate::rng::RngState::new(21, 5);
        let (b, s, d, heads) = (2usize, 3usize, 4usize, 2usize);
        let n = b * s * d;
        let qv: Vec<f32> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let kv: Vec<f32> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let vv: Vec<f32> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        // weight the output so the loss is not symmetric
        let wv: Vec<f32> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let w = Tensor::from_vec(wv, &[b * s, d]).unwrap();

        let run = |q: &[f32], k: &[f32], v: &[f32]| -> f64 {
            let qt = Tensor::from_vec(q.to_vec(), &[b * s, d]).unwrap();
            let kt = Tensor::from_vec(k.to_vec(), &[b * s, d]).unwrap();
            let vt = Tensor::from_vec(v.to_vec(), &[b * s, d]).unwrap();
            let o = causal_attention(&qt, &kt, &vt, heads, s).unwrap();
            sum_all(&mul(&o, &w).unwrap()).unwrap().item().unwrap() as f64
        };

        let qt = Tensor::param(qv.clone(), &[b * s, d]).unwrap();
        let kt = Tensor::param(kv.clone(), &[b * s, d]).unwrap();
        let vt = Tensor::param(vv.clone(), &[b * s, d]).unwrap();
        let o = causal_attention(&qt, &kt, &vt, heads, s).unwrap();
        let loss = sum_all(&mul(&o, &w).unwrap()).unwrap();
        let grads = backward(&loss).unwrap();

        fd_check(&mut |q: &[f32]| run(q, &kv, &vv), &qv, grads.wrt(&qt).unwrap());
        fd_check(&mut |k: &[f32]| run(&qv, k, &vv), &kv, grads.wrt(&kt).unwrap());
        fd_check(&mut |v: &[f32]| run(&qv, &kv, v), &vv, grads.wrt(&vt).unwrap());
    }

    #[test]
    fn conv2d_gradient_matches_fd() {
        let mut rng = crate::rng::RngState::new(8, 2);
        let geom = ConvGeom { in_ch: 2, in_h: 4, in_w: 4, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let xlen = 2 * 4 * 4;
        let wlen = 3 * 2 * 3 * 3;
        let xv: Vec<f32> = (0..2 * xlen).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let wv: Vec<f32> = (0..wlen).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        let bv: Vec<f32> = (0..3).map(|_| rng.uniform_range(-0.5, 0.5)).collect();

        let run = |x: &[f32], w: &[f32], b: &[f32]| -> f64 {
            let xt = Tensor::from_vec(x.to_vec(), &[2, xlen]).unwrap();
            let wt = Tensor::from_vec(w.to_vec(), &[3, 2 * 3 * 3]).unwrap();
            let bt = Tensor::from_vec(b.to_vec(), &[3]).unwrap();
            let o = conv2d(&xt, &wt, &bt, geom).unwrap();
            let r = relu(&o).unwrap();
            sum_all(&r).unwrap().item().unwrap() as f64
        };

        let xt = Tensor::param(xv.clone(), &[2, xlen]).unwrap();
        let wt = Tensor::param(wv.clone(), &[3, 2 * 3 * 3]).unwrap();
        let bt = Tensor::param(bv.clone(), &[3]).unwrap();
        let o = conv2d(&xt, &wt, &bt, geom).unwrap();
        let loss = sum_all(&relu(&o).unwrap()).unwrap();
        let grads = backward(&loss).unwrap();

        fd_check(&mut |x: &[f32]| run(x, &wv, &bv), &xv, grads.wrt(&xt).unwrap());
        fd_check(&mut |w: &[f32]| run(&xv, w, &bv), &wv, grads.wrt(&wt).unwrap());
        fd_check(&mut |b: &[f32]| run(&xv, &wv, b), &bv, grads.wrt(&bt).unwrap());
    }

    #[test]
    fn bag_lookup_equals_onehot_matmul() {
        let mut rng = crate::rng::RngState::new(4, 4);
        let (v, d) = (6usize, 3usize);
        let table: Vec<f32> = (0..v * d).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let ids = [1u32, 4, 0, 5];
        let t = Tensor::from_vec(table.clone(), &[v, d]).unwrap();
        let bag = bag_lookup(&t, &ids, 2).unwrap();
        // one-hot oracle
        let mut onehot = vec![0.0f32; 2 * v];
        onehot[1] = 1.0;
        onehot[4] = 1.0;
        onehot[v] = 1.0;
        onehot[v + 5] = 1.0;
        let oh = Tensor::from_vec(onehot, &[2, v]).unwrap();
        let mm = matmul(&oh, &t).unwrap();
        for (a, b) in bag.data().iter().zip(mm.data()) {
            assert!(approx(*a, *b, 1e-6));
        }
    }

    #[test]
    fn kl_to_ref_zero_for_identical_logits() {
        let logits = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.0, 0.5, 0.1], &[2, 3]).unwrap();
        let kl = kl_to_ref(&logits, &logits, 1.0).unwrap();
        assert_eq!(kl.item().unwrap(), 0.0);
    }

    #[test]
    fn kl_to_ref_gradient_matches_fd() {
        let mut rng = crate::rng::RngState::new(13, 7);
        let (n, c) = (3usize, 4usize);
        let model: Vec<f32> = (0..n * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let refv: Vec<f32> = (0..n * c).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let rt = Tensor::from_vec(refv.clone(), &[n, c]).unwrap();
        let mt = Tensor::param(model.clone(), &[n, c]).unwrap();
        let loss = kl_to_ref(&mt, &rt, 2.0).unwrap();
        let grads = backward(&loss).unwrap();
        fd_check(
            &mut |m: &[f32]| {
                let t = Tensor::from_vec(m.to_vec(), &[n, c]).unwrap();
                kl_to_ref(&t, &rt, 2.0).unwrap().item().unwrap() as f64
            },
            &model,
            grads.wrt(&mt).unwrap(),
        );
    }

    #[test]
    fn select_pos_roundtrip_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        // rows = batch 1 * seq 3
        let last = select_pos(&x, 3, 2).unwrap();
        assert_eq!(last.data(), &[5.0, 6.0]);
        let loss = sum_all(&last).unwrap();
        let grads = backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
