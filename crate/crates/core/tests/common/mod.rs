//! Finite-difference and Jacobian checks shared by the integration tests and
//! the acceptance binary.
#![allow(dead_code)]

use std::sync::Arc;

use platevi::diff::check::{log_abs_det, numeric_gradient, relative_error, richardson_jacobian};
use platevi::diff::{Array, ParamStore, Tape, Var};
use platevi::dist::{DistKind, DistSpec};
use platevi::family::{FamilyConfig, Noise, Scheme, VariationalFamily};
use platevi::flows::{Flow, FlowConfig};
use platevi::model::{zoo, BatchLayout, GroundModel, PlateBatch};
use platevi::trainer::{reduced_elbo, rng_stream, sample_batch, Stream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

type Build = fn(&Tape, &[Var]) -> Var;

/// A primitive under test: input shapes, a domain for the random inputs,
/// and the expression built from the input leaves.
pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f64, f64),
    pub build: Build,
}

fn p(name: &'static str, shapes: &[&[usize]], range: (f64, f64), build: Build) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        build,
    }
}

const ANY: (f64, f64) = (-1.5, 1.5);
const POS: (f64, f64) = (0.3, 2.0);

pub fn primitives() -> Vec<Primitive> {
    vec![
        p("add", &[&[3, 2], &[3, 2]], ANY, |t, x| {
            t.add(x[0], x[1]).unwrap()
        }),
        p("add-broadcast", &[&[3, 2], &[2]], ANY, |t, x| {
            t.add(x[0], x[1]).unwrap()
        }),
        p("sub", &[&[4], &[4]], ANY, |t, x| t.sub(x[0], x[1]).unwrap()),
        p("mul", &[&[2, 3], &[2, 3]], ANY, |t, x| {
            t.mul(x[0], x[1]).unwrap()
        }),
        p("mul-broadcast", &[&[2, 3], &[2, 1]], ANY, |t, x| {
            t.mul(x[0], x[1]).unwrap()
        }),
        p("div", &[&[3], &[3]], POS, |t, x| t.div(x[0], x[1]).unwrap()),
        p("neg", &[&[3]], ANY, |t, x| t.neg(x[0])),
        p("scale", &[&[3]], ANY, |t, x| t.scale(x[0], -2.5)),
        p("offset", &[&[3]], ANY, |t, x| t.offset(x[0], 0.7)),
        p("exp", &[&[4]], ANY, |t, x| t.exp(x[0])),
        p("log", &[&[4]], POS, |t, x| t.log(x[0]).unwrap()),
        p("tanh", &[&[4]], ANY, |t, x| t.tanh(x[0])),
        p("softplus", &[&[4]], ANY, |t, x| t.softplus(x[0])),
        p("sigmoid", &[&[4]], ANY, |t, x| t.sigmoid(x[0])),
        p("sqrt", &[&[4]], POS, |t, x| t.sqrt(x[0]).unwrap()),
        p("square", &[&[4]], ANY, |t, x| t.square(x[0])),
        p("matmul", &[&[2, 3], &[3, 4]], ANY, |t, x| {
            t.matmul(x[0], x[1]).unwrap()
        }),
        p("sum", &[&[2, 3]], ANY, |t, x| t.sum(x[0])),
        p("mean", &[&[2, 3]], ANY, |t, x| t.mean(x[0])),
        p("sum-axis", &[&[2, 3]], ANY, |t, x| {
            t.sum_axis(x[0], 1).unwrap()
        }),
        p("mean-axis", &[&[2, 3]], ANY, |t, x| {
            t.mean_axis(x[0], 0).unwrap()
        }),
        p("broadcast", &[&[3]], ANY, |t, x| {
            t.broadcast_to(x[0], &[2, 3]).unwrap()
        }),
        p("reshape", &[&[2, 3]], ANY, |t, x| {
            t.reshape(x[0], &[3, 2]).unwrap()
        }),
        p("concat", &[&[2, 1], &[2, 3]], ANY, |t, x| {
            t.concat(&[x[0], x[1]], 1).unwrap()
        }),
        p("narrow", &[&[2, 4]], ANY, |t, x| {
            t.narrow_last(x[0], 1, 3).unwrap()
        }),
        p("gather", &[&[3, 2]], ANY, |t, x| {
            t.gather_rows(x[0], &[2, 0, 2]).unwrap()
        }),
        p("scatter", &[&[3, 2]], ANY, |t, x| {
            t.scatter_add_rows(x[0], &[1, 1, 0], 2).unwrap()
        }),
        p("rowwise-matvec", &[&[2, 3], &[2, 6]], ANY, |t, x| {
            t.rowwise_matvec(x[0], x[1]).unwrap()
        }),
        p("tril-matvec", &[&[2, 3], &[2, 3]], ANY, |t, x| {
            t.tril_matvec(x[0], x[1]).unwrap()
        }),
        p("normal-log-prob", &[&[3, 2], &[2], &[2]], POS, |t, x| {
            let d = DistSpec::new(t, DistKind::Normal, x[1], x[2]).unwrap();
            d.log_prob(t, x[0]).unwrap()
        }),
        p("lognormal-log-prob", &[&[3, 2], &[2], &[2]], POS, |t, x| {
            let d = DistSpec::new(t, DistKind::LogNormal, x[1], x[2]).unwrap();
            d.log_prob(t, x[0]).unwrap()
        }),
        p("lognormal-rsample", &[&[2, 2], &[2], &[2]], POS, |t, x| {
            let d = DistSpec::new(t, DistKind::LogNormal, x[1], x[2]).unwrap();
            d.rsample(t, x[0]).unwrap()
        }),
    ]
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Array> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let a = Array::new(s.clone(), flat[at..at + n].to_vec()).unwrap();
            at += n;
            a
        })
        .collect()
}

/// Relative error between the tape gradient of `sum(w * f(x))` and central
/// differences, for random `x` and weights `w`.
pub fn primitive_error(prim: &Primitive, rng: &mut ChaCha8Rng) -> f64 {
    let n: usize = prim
        .shapes
        .iter()
        .map(|s| s.iter().product::<usize>())
        .sum();
    let x: Vec<f64> = (0..n)
        .map(|_| rng.random_range(prim.range.0..prim.range.1))
        .collect();
    let out_len = {
        let t = Tape::untracked();
        let leaves: Vec<Var> = split(&x, &prim.shapes)
            .into_iter()
            .map(|a| t.constant(a))
            .collect();
        t.value((prim.build)(&t, &leaves)).len()
    };
    let w: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weighted = |t: &Tape, y: Var| {
        let shape = t.shape(y);
        let wv = t.constant(Array::new(shape, w.clone()).unwrap());
        t.sum(t.mul(y, wv).unwrap())
    };
    let t = Tape::new();
    let leaves: Vec<Var> = split(&x, &prim.shapes)
        .into_iter()
        .map(|a| t.leaf(a))
        .collect();
    let loss = weighted(&t, (prim.build)(&t, &leaves));
    let grads = t.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|&l| grads.wrt(l).into_data())
        .collect();
    let numeric = numeric_gradient(
        |v| {
            let t = Tape::untracked();
            let leaves: Vec<Var> = split(v, &prim.shapes)
                .into_iter()
                .map(|a| t.constant(a))
                .collect();
            t.item(weighted(&t, (prim.build)(&t, &leaves)))
        },
        &x,
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

fn set_flat(store: &mut ParamStore, flat: &[f64]) {
    let mut at = 0;
    for id in store.ids().collect::<Vec<_>>() {
        let mut v = store.value(id).clone();
        let n = v.len();
        v.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
        store.set_value(id, v);
    }
}

/// Relative error of the tape gradient of the negative reduced ELBO on a
/// small GRE, fixed batch and noise, against central differences over every
/// weight of the family.
pub fn reduced_elbo_error(scheme: Scheme, seed: u64) -> f64 {
    let graph = Arc::new(zoo::gre(2, 4, 3, 2, 2).unwrap());
    let full = GroundModel::full(graph.clone());
    let data = full
        .sample_prior(&mut rng_stream(seed, Stream::Data))
        .unwrap()
        .observed_only(&graph);
    let cfg = FamilyConfig {
        scheme,
        flow: FlowConfig {
            hidden: vec![4],
            maf_layers: 1,
            ..FlowConfig::default()
        },
        encoding_dim: 3,
        encoder_hidden: vec![4],
        ..FamilyConfig::default()
    };
    let mut rng = rng_stream(seed, Stream::Init);
    let mut family = VariationalFamily::build(graph.clone(), &cfg, &mut rng).unwrap();
    let x0: Vec<f64> = family
        .store()
        .flat_values()
        .iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect();
    set_flat(family.store_mut(), &x0);
    let batch: PlateBatch = sample_batch(&graph, &mut rng_stream(seed, Stream::Plate)).unwrap();
    let layout = BatchLayout::new(&graph, full.cards(), &batch).unwrap();
    let slice = data.slice(&layout).unwrap();
    let noise = Noise::draw(&graph, &layout, 2, &mut rng_stream(seed, Stream::Noise));

    let loss_of = |family: &VariationalFamily, tape: &Tape| {
        let bound = family.store().bind(tape);
        let per = reduced_elbo(tape, &bound, family, &full, &layout, &slice, &noise).unwrap();
        (tape.neg(tape.mean(per)), bound)
    };
    let tape = Tape::new();
    let (loss, bound) = loss_of(&family, &tape);
    let grads = tape.backward(loss).unwrap();
    family.store_mut().store_grads(&grads, &bound);
    let analytic: Vec<f64> = family
        .store()
        .iter()
        .flat_map(|(_, p)| p.grad.data().to_vec())
        .collect();
    let mut probe = family.clone();
    let numeric = numeric_gradient(
        |v| {
            set_flat(probe.store_mut(), v);
            let t = Tape::untracked();
            t.item(loss_of(&probe, &t).0)
        },
        &x0,
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

/// Largest condition number at which a numeric log-determinant is trusted.
pub const MAX_JACOBIAN_CONDITION: f64 = 1e4;

/// `|logdet - log|det J||` for a random flow configuration, with `J` the
/// extrapolated numeric Jacobian of the flow at a random point. Draws whose
/// Jacobian is too ill-conditioned for a numeric reference are redrawn.
pub fn flow_logdet_error(dim: usize, rng: &mut ChaCha8Rng) -> (String, f64) {
    loop {
        if let Some(found) = flow_logdet_draw(dim, rng) {
            return found;
        }
    }
}

fn condition_number(jac: &[Vec<f64>]) -> f64 {
    let n = jac.len();
    let m = nalgebra::DMatrix::from_fn(n, n, |r, c| jac[r][c]);
    let sv = m.singular_values();
    sv.max() / sv.min()
}

fn flow_logdet_draw(dim: usize, rng: &mut ChaCha8Rng) -> Option<(String, f64)> {
    let ctx_dim = rng.random_range(0..=3);
    let width = rng.random_range(1..=6);
    let cfg = if rng.random_bool(0.5) {
        FlowConfig::affine(vec![width])
    } else {
        FlowConfig {
            hidden: vec![width, rng.random_range(1..=6)],
            maf_layers: rng.random_range(1..=3),
            ..FlowConfig::default()
        }
    };
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(rng.random());
    let flow = Flow::new(&mut store, "f", dim, ctx_dim, &cfg, None, &mut init);
    let sd = rng.random_range(0.1..0.8);
    for id in store.ids().collect::<Vec<_>>() {
        let mut v = store.value(id).clone();
        v.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-sd..sd));
        store.set_value(id, v);
    }
    let u: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ctx: Vec<f64> = (0..ctx_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let eval = |u: &[f64]| {
        let t = Tape::untracked();
        let b = store.bind(&t);
        let uv = t.constant(Array::matrix(1, dim, u.to_vec()).unwrap());
        let cv = t.constant(Array::new(vec![1, ctx_dim], ctx.clone()).unwrap());
        let (y, ld) = flow.forward(&t, &b, uv, cv, None).unwrap();
        (t.value(y).into_data(), t.item(ld))
    };
    let (_, ld) = eval(&u);
    let jac = richardson_jacobian(|v| eval(v).0, &u, 0.1);
    if !(condition_number(&jac) <= MAX_JACOBIAN_CONDITION) {
        return None;
    }
    let label = format!("{:?} D={dim} C={ctx_dim} hidden={:?}", cfg.kind, cfg.hidden);
    Some((label, (ld - log_abs_det(&jac)).abs()))
}
