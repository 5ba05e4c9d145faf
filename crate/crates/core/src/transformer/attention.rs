use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// Projection handles of one multi-head attention block. Weights are
/// `[d, d]` (input-major), biases `[d]`.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `softmax(Q Kᵀ / √d_k) V` over `[N, T, d_k]` operands. Returns the output
/// and the attention weights `[N, T, T]`.
pub(crate) fn scaled_dot<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
        return Err(Error::Shape(format!("attention operands {qs:?}, {ks:?}, {vs:?}")));
    }
    let scores = g.bmm(q, k, false, true)?;
    let scores = g.scale(scores, T::lit(1.0 / (qs[2] as f64).sqrt()));
    let weights = g.softmax(scores)?;
    let out = g.bmm(weights, v, false, false)?;
    Ok((out, weights))
}

/// `[B·T, d]` → `[B·h, T, d/h]`.
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (tokens, d) = (s[0] / batch, s[1]);
    let x = g.reshape(x, &[batch, tokens, heads, d / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, tokens, d / heads])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (tokens, dk) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, tokens, dk])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * tokens, heads * dk])
}

fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// `Concat(head_1, …, head_h) W_o` where `head_i` attends over column block
/// `i` of the projected inputs. Inputs are `[B·T, d]`.
pub(crate) fn multi_head_graph<T: Scalar>(
    g: &mut Graph<T>,
    xq: Var,
    xk: Var,
    xv: Var,
    p: &MhaVars,
    batch: usize,
    heads: usize,
) -> Result<(Var, Var)> {
    let d = g.shape(xq)[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} dims not divisible into {heads} heads")));
    }
    if batch == 0 || g.shape(xq)[0] % batch != 0 {
        return Err(Error::Shape(format!("{} rows not divisible into {batch} sequences", g.shape(xq)[0])));
    }
    let q = project(g, xq, p.wq, p.bq)?;
    let k = project(g, xk, p.wk, p.bk)?;
    let v = project(g, xv, p.wv, p.bv)?;
    let (q, k, v) = (split_heads(g, q, batch, heads)?, split_heads(g, k, batch, heads)?, split_heads(g, v, batch, heads)?);
    let (out, weights) = scaled_dot(g, q, k, v)?;
    let out = merge_heads(g, out, batch, heads)?;
    Ok((project(g, out, p.wo, p.bo)?, weights))
}

/// Attention over `[tokens, d_k]` matrices.
pub fn attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention_weights(q, k, v)?.0)
}

/// Attention output together with its `[tokens, tokens]` weight matrix.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let lift = |t: &Tensor<T>| -> Result<Tensor<T>> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("attention expects rank-2 operands, got {:?}", t.shape())));
        }
        t.clone().reshape(vec![1, t.shape()[0], t.shape()[1]])
    };
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(lift(q)?), g.constant(lift(k)?), g.constant(lift(v)?));
    let (out, w) = scaled_dot(&mut g, qv, kv, vv)?;
    let o = g.value(out);
    let wt = g.value(w);
    Ok((o.clone().reshape(o.shape()[1..].to_vec())?, wt.clone().reshape(wt.shape()[1..].to_vec())?))
}

/// Eager multi-head attention over `[tokens, d]` inputs. `weights` holds
/// `[W_q, b_q, W_k, b_k, W_v, b_v, W_o, b_o]`.
pub fn multi_head<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, weights: &[Tensor<T>; 8], heads: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (xq, xk, xv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let w: Vec<Var> = weights.iter().map(|t| g.constant(t.clone())).collect();
    let p = MhaVars { wq: w[0], bq: w[1], wk: w[2], bk: w[3], wv: w[4], bv: w[5], wo: w[6], bo: w[7] };
    if q.rank() != 2 || k.shape() != v.shape() || q.shape()[1] != k.shape()[1] {
        return Err(Error::Shape(format!("multi-head operands {:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape())));
    }
    if q.shape()[0] != k.shape()[0] {
        return Err(Error::Shape("multi-head attention over differing token counts is not supported".into()));
    }
    let (out, _) = multi_head_graph(&mut g, xq, xk, xv, &p, 1, heads)?;
    Ok(g.value(out).clone())
}
