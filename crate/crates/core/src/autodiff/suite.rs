use std::collections::HashMap;

use super::gradcheck::{gradcheck, GradcheckReport};
use super::graph::{Graph, NodeId};
use super::index_tensor;
use super::mlp::{Activation, Mlp};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng::{derive_index, derive_seed, normals, seeded, Rng};

/// One gradcheck of one op on one random instance.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub op: &'static str,
    pub instance: usize,
    pub report: GradcheckReport,
}

type Built = (Graph, ParamStore, HashMap<String, Tensor>, NodeId);
type Builder = fn(&mut Rng) -> Result<Built>;

/// Ops covered by [`gradcheck_suite`], in execution order. Detach and
/// gradient reversal are excluded: their gradients intentionally disagree
/// with finite differences.
pub const SUITE_OPS: [&str; 22] = [
    "affine",
    "affine_nobias",
    "tanh",
    "relu",
    "log",
    "softmax",
    "softmax_cross_entropy",
    "add",
    "add_row",
    "add_scalar",
    "mul",
    "mul_row",
    "mul_scalar",
    "scale",
    "concat",
    "concat_rows",
    "sum",
    "mean",
    "squared_error",
    "gather",
    "segment_mean",
    "mlp_composite",
];

const BUILDERS: [Builder; 22] = [
    affine,
    affine_nobias,
    tanh,
    relu,
    log,
    softmax,
    softmax_ce,
    add,
    add_row,
    add_scalar,
    mul,
    mul_row,
    mul_scalar,
    scale,
    concat,
    concat_rows,
    sum,
    mean,
    squared_error,
    gather,
    segment_mean,
    mlp_composite,
];

/// Gradchecks every op in [`SUITE_OPS`] on `instances` random instances.
pub fn gradcheck_suite(instances: usize, seed: u64, epsilon: f64) -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::with_capacity(instances * SUITE_OPS.len());
    for (op, build) in SUITE_OPS.iter().zip(BUILDERS) {
        let base = derive_seed(seed, op);
        for instance in 0..instances {
            let mut rng = seeded(derive_index(base, instance as u64));
            let (graph, store, inputs, out) = build(&mut rng)?;
            let report = gradcheck(&graph, &store, &inputs, out, epsilon)?;
            cases.push(SuiteCase {
                op,
                instance,
                report,
            });
        }
    }
    Ok(cases)
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    use rand::Rng as _;
    (rng.random_range(1..5), rng.random_range(1..5))
}

fn mat(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, normals(rng, r * c)).expect("consistent shape")
}

fn vec(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::vector(normals(rng, n))
}

/// Reduces `y` to a scalar through a random fixed weighting.
fn readout(g: &mut Graph, rng: &mut Rng, y: NodeId, r: usize, c: usize) -> NodeId {
    let w = g.constant(mat(rng, r, c));
    let p = g.mul(y, w);
    g.sum(p)
}

fn unary(
    rng: &mut Rng,
    op: fn(&mut Graph, NodeId) -> NodeId,
    map: fn(f64) -> f64,
) -> Result<Built> {
    let (r, c) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", c);
    let y = op(&mut g, x);
    let out = readout(&mut g, rng, y, r, c);
    let xv = mat(rng, r, c).map(map);
    Ok((
        g,
        ParamStore::new(0),
        HashMap::from([("x".into(), xv)]),
        out,
    ))
}

fn affine_impl(rng: &mut Rng, bias: bool) -> Result<Built> {
    let (r, i) = dims(rng);
    let (_, o) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", i);
    let w = g.param("w");
    let b = bias.then(|| g.param("b"));
    let y = g.affine(x, w, b);
    let out = readout(&mut g, rng, y, r, o);
    let mut store = ParamStore::new(0);
    store.insert("w", mat(rng, i, o));
    if bias {
        store.insert("b", vec(rng, o));
    }
    Ok((g, store, HashMap::from([("x".into(), mat(rng, r, i))]), out))
}

fn affine(rng: &mut Rng) -> Result<Built> {
    affine_impl(rng, true)
}

fn affine_nobias(rng: &mut Rng) -> Result<Built> {
    affine_impl(rng, false)
}

fn tanh(rng: &mut Rng) -> Result<Built> {
    unary(rng, Graph::tanh, |v| v)
}

fn relu(rng: &mut Rng) -> Result<Built> {
    // keep inputs away from the kink
    unary(rng, Graph::relu, |v| v + 0.1 * v.signum())
}

fn log(rng: &mut Rng) -> Result<Built> {
    unary(rng, Graph::log, |v| 0.5 + v.abs())
}

fn softmax(rng: &mut Rng) -> Result<Built> {
    unary(rng, Graph::softmax, |v| v)
}

fn softmax_ce(rng: &mut Rng) -> Result<Built> {
    use rand::Rng as _;
    let (r, c) = dims(rng);
    let c = c + 1;
    let mut g = Graph::new();
    let x = g.input_rows("x", c);
    let labels = g.index_input("labels");
    let out = g.softmax_cross_entropy(x, labels);
    let ids: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
    let inputs = HashMap::from([
        ("x".into(), mat(rng, r, c)),
        ("labels".into(), index_tensor(&ids)),
    ]);
    Ok((g, ParamStore::new(0), inputs, out))
}

#[derive(Clone, Copy)]
enum Shape {
    Same,
    Row,
    Scalar,
}

fn binary(
    rng: &mut Rng,
    op: fn(&mut Graph, NodeId, NodeId) -> NodeId,
    shape: Shape,
) -> Result<Built> {
    let (r, c) = dims(rng);
    let mut g = Graph::new();
    let a = g.input_rows("a", c);
    let b = g.param("b");
    let y = op(&mut g, a, b);
    let out = readout(&mut g, rng, y, r, c);
    let bv = match shape {
        Shape::Same => mat(rng, r, c),
        Shape::Row => vec(rng, c),
        Shape::Scalar => Tensor::scalar(normals(rng, 1)[0]),
    };
    let mut store = ParamStore::new(0);
    store.insert("b", bv);
    Ok((g, store, HashMap::from([("a".into(), mat(rng, r, c))]), out))
}

fn add(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::add, Shape::Same)
}

fn add_row(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::add, Shape::Row)
}

fn add_scalar(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::add, Shape::Scalar)
}

fn mul(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::mul, Shape::Same)
}

fn mul_row(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::mul, Shape::Row)
}

fn mul_scalar(rng: &mut Rng) -> Result<Built> {
    binary(rng, Graph::mul, Shape::Scalar)
}

fn scale(rng: &mut Rng) -> Result<Built> {
    let c = normals(rng, 1)[0];
    let (r, k) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", k);
    let y = g.scale(x, c);
    let out = readout(&mut g, rng, y, r, k);
    Ok((
        g,
        ParamStore::new(0),
        HashMap::from([("x".into(), mat(rng, r, k))]),
        out,
    ))
}

fn concat(rng: &mut Rng) -> Result<Built> {
    let (r, a) = dims(rng);
    let (_, b) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", a);
    let p = g.param("p");
    let y = g.concat(&[x, p]);
    let out = readout(&mut g, rng, y, r, a + b);
    let mut store = ParamStore::new(0);
    store.insert("p", mat(rng, r, b));
    Ok((g, store, HashMap::from([("x".into(), mat(rng, r, a))]), out))
}

fn concat_rows(rng: &mut Rng) -> Result<Built> {
    let (ra, c) = dims(rng);
    let (rb, _) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", c);
    let p = g.param("p");
    let y = g.concat_rows(&[x, p]);
    let out = readout(&mut g, rng, y, ra + rb, c);
    let mut store = ParamStore::new(0);
    store.insert("p", mat(rng, rb, c));
    Ok((
        g,
        store,
        HashMap::from([("x".into(), mat(rng, ra, c))]),
        out,
    ))
}

fn reduce(rng: &mut Rng, op: fn(&mut Graph, NodeId) -> NodeId) -> Result<Built> {
    let (r, c) = dims(rng);
    let mut g = Graph::new();
    let x = g.input_rows("x", c);
    let w = g.constant(mat(rng, r, c));
    let y = g.mul(x, w);
    let out = op(&mut g, y);
    Ok((
        g,
        ParamStore::new(0),
        HashMap::from([("x".into(), mat(rng, r, c))]),
        out,
    ))
}

fn sum(rng: &mut Rng) -> Result<Built> {
    reduce(rng, Graph::sum)
}

fn mean(rng: &mut Rng) -> Result<Built> {
    reduce(rng, Graph::mean)
}

fn squared_error(rng: &mut Rng) -> Result<Built> {
    let (r, c) = dims(rng);
    let mut g = Graph::new();
    let a = g.input_rows("a", c);
    let b = g.param("b");
    let out = g.squared_error(a, b);
    let mut store = ParamStore::new(0);
    store.insert("b", mat(rng, r, c));
    Ok((g, store, HashMap::from([("a".into(), mat(rng, r, c))]), out))
}

fn gather(rng: &mut Rng) -> Result<Built> {
    use rand::Rng as _;
    let (rows, c) = dims(rng);
    let n = rng.random_range(1..7);
    let mut g = Graph::new();
    let table = g.param("table");
    let idx = g.index_input("idx");
    let y = g.gather(table, idx);
    let out = readout(&mut g, rng, y, n, c);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
    let mut store = ParamStore::new(0);
    store.insert("table", mat(rng, rows, c));
    Ok((
        g,
        store,
        HashMap::from([("idx".into(), index_tensor(&ids))]),
        out,
    ))
}

fn segment_mean(rng: &mut Rng) -> Result<Built> {
    use rand::Rng as _;
    let (segs, c) = dims(rng);
    let mut ids: Vec<usize> = (0..segs).collect();
    for _ in 0..rng.random_range(0..5) {
        ids.push(rng.random_range(0..segs));
    }
    ids.sort_unstable();
    let mut g = Graph::new();
    let x = g.input_rows("x", c);
    let s = g.index_input("seg");
    let y = g.segment_mean(x, s);
    let out = readout(&mut g, rng, y, segs, c);
    let inputs = HashMap::from([
        ("x".into(), mat(rng, ids.len(), c)),
        ("seg".into(), index_tensor(&ids)),
    ]);
    Ok((g, ParamStore::new(0), inputs, out))
}

/// Two MLPs (tanh and relu) over an input concatenated with an embedding
/// lookup, pooled per segment and scored with softmax cross-entropy plus
/// a log-softmax penalty.
fn mlp_composite(rng: &mut Rng) -> Result<Built> {
    use rand::Rng as _;
    let (rows, d) = dims(rng);
    let classes = 3;
    let emb = 2;
    let a = Mlp::new("a", &[d + emb, 5, 4], Activation::Tanh);
    let b = Mlp::new("b", &[4, 6, classes], Activation::Relu);
    let mut store = ParamStore::new(rng.random());
    a.init(&mut store);
    b.init(&mut store);
    store.insert("emb", mat(rng, 3, emb));
    // nonzero biases so relu units are not all sitting at the same point
    for name in ["a.b0", "b.b0", "b.b1"] {
        let n = store.get(name)?.len();
        *store.get_mut(name)? = vec(rng, n).scale(0.5);
    }

    let mut g = Graph::new();
    let x = g.input_rows("x", d);
    let ids = g.index_input("ids");
    let seg = g.index_input("seg");
    let labels = g.index_input("labels");
    let table = g.param("emb");
    let e = g.gather(table, ids);
    let h = g.concat(&[x, e]);
    let h = a.build(&mut g, h);
    let pooled = g.segment_mean(h, seg);
    let logits = b.build(&mut g, pooled);
    let ce = g.softmax_cross_entropy(logits, labels);
    let p = g.softmax(logits);
    let lp = g.log(p);
    let pen = g.mean(lp);
    let pen = g.scale(pen, -0.1);
    let out = g.add(ce, pen);

    let n_seg = 2;
    let seg_ids: Vec<usize> = (0..rows.max(n_seg)).map(|i| i % n_seg).collect();
    let mut sorted = seg_ids.clone();
    sorted.sort_unstable();
    let n = sorted.len();
    let id_v: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let lab: Vec<usize> = (0..n_seg).map(|_| rng.random_range(0..classes)).collect();
    let inputs = HashMap::from([
        ("x".into(), mat(rng, n, d)),
        ("ids".into(), index_tensor(&id_v)),
        ("seg".into(), index_tensor(&sorted)),
        ("labels".into(), index_tensor(&lab)),
    ]);
    Ok((g, store, inputs, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = gradcheck_suite(3, 11, 1e-5).unwrap();
        assert_eq!(a.len(), 3 * SUITE_OPS.len());
        for c in &a {
            assert!(
                c.report.passes(1e-4),
                "{} #{}: {}",
                c.op,
                c.instance,
                c.report.max_rel_error()
            );
            assert!(!c.report.entries.is_empty());
        }
        let b = gradcheck_suite(3, 11, 1e-5).unwrap();
        let ea: Vec<f64> = a.iter().map(|c| c.report.max_rel_error()).collect();
        let eb: Vec<f64> = b.iter().map(|c| c.report.max_rel_error()).collect();
        assert_eq!(ea, eb);
    }
}
