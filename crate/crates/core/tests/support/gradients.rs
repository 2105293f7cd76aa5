//! Central finite-difference checks for every differentiable graph op and
//! for the detection and caption losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sia_core::geometry::Box3D;
use sia_core::heads::{instance_roles, tgi_roles, CaptionHead, CaptionHeadConfig, LayerDetections};
use sia_core::losses::{detection_loss, mle_loss, CaptionTarget, DetectionWeights, GtSet};
use sia_core::{Graph, NodeId, ParamStore, Real, Tensor};

const CASES: usize = 50;
const STEP: Real = 1e-6;
const TOL: Real = 1e-4;
/// Denominator floor so gradients that are zero up to rounding compare absolutely.
const FLOOR: Real = 1e-3;

/// Runs every group; panics on the first element outside tolerance.
pub fn run_suite() {
    linear_algebra_ops();
    elementwise_binary_ops();
    elementwise_unary_ops();
    reduction_ops();
    shape_ops();
    normalisation_and_loss_ops();
    detection_loss_composite();
    mle_loss_composite();
}

fn rel_err(a: Real, n: Real) -> Real {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

struct Case {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<Real>>,
}

type Build<'a> = &'a dyn Fn(&mut Graph, &[NodeId]) -> NodeId;

/// Projects the output onto fixed random weights so every op reduces to a scalar.
fn scalar_loss(g: &mut Graph, inputs: &[NodeId], build: Build<'_>, weights: &mut Option<Vec<Real>>, rng: &mut ChaCha8Rng) -> NodeId {
    let out = build(g, inputs);
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).clone();
    let wn = g.constant(&shape, w).unwrap();
    let p = g.mul(out, wn).unwrap();
    g.sum(p)
}

fn check_case(name: &str, case: &Case, build: Build<'_>, rng: &mut ChaCha8Rng) -> Real {
    let mut weights = None;
    let mut g = Graph::new();
    let leaves: Vec<NodeId> = case
        .shapes
        .iter()
        .zip(&case.data)
        .map(|(s, d)| g.input(&Tensor::new(s, d.clone()).unwrap().with_grad()))
        .collect();
    let loss = scalar_loss(&mut g, &leaves, build, &mut weights, rng);
    let grads = g.backward(loss).unwrap();

    let eval = |data: &[Vec<Real>], weights: &mut Option<Vec<Real>>, rng: &mut ChaCha8Rng| {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = case.shapes.iter().zip(data).map(|(s, d)| g.constant(s, d.clone()).unwrap()).collect();
        let l = scalar_loss(&mut g, &ids, build, weights, rng);
        g.scalar(l)
    };
    let mut worst: Real = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.node(*leaf).map(<[Real]>::to_vec).unwrap_or_else(|| vec![0.0; case.data[k].len()]);
        for i in 0..case.data[k].len() {
            let mut plus = case.data.clone();
            plus[k][i] += STEP;
            let mut minus = case.data.clone();
            minus[k][i] -= STEP;
            let numeric = (eval(&plus, &mut weights, rng) - eval(&minus, &mut weights, rng)) / (2.0 * STEP);
            let e = rel_err(analytic[i], numeric);
            assert!(e < TOL, "{name}: input {k} element {i}: analytic {} numeric {numeric} (rel {e:e})", analytic[i]);
            worst = worst.max(e);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: Real, hi: Real) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform values whose magnitude is at least `gap`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: Real) -> Vec<Real> {
    (0..n)
        .map(|_| {
            let v: Real = rng.gen_range(gap..2.0);
            if rng.gen() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn run_op(name: &str, seed: u64, make: &dyn Fn(&mut ChaCha8Rng) -> Case, build: Build<'_>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Real = 0.0;
    for _ in 0..CASES {
        let case = make(&mut rng);
        worst = worst.max(check_case(name, &case, build, &mut rng));
    }
    println!("{name}: {CASES} cases, worst rel err {worst:.2e}");
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..6))
}

fn one(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Case {
    let n = shape.iter().product();
    Case { data: vec![uniform(rng, n, lo, hi)], shapes: vec![shape] }
}

fn pair_same(rng: &mut ChaCha8Rng, lo: Real, hi: Real) -> Case {
    let (m, n) = dims(rng);
    Case { shapes: vec![vec![m, n], vec![m, n]], data: vec![uniform(rng, m * n, lo, hi), uniform(rng, m * n, lo, hi)] }
}

fn linear_algebra_ops() {
    run_op(
        "matmul",
        1,
        &|rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            Case { shapes: vec![vec![m, k], vec![k, n]], data: vec![uniform(rng, m * k, -1.0, 1.0), uniform(rng, k * n, -1.0, 1.0)] }
        },
        &|g, x| g.matmul(x[0], x[1]).unwrap(),
    );
    run_op(
        "matmul_nt",
        2,
        &|rng| {
            let (m, k) = dims(rng);
            let n = rng.gen_range(1..5);
            Case { shapes: vec![vec![m, k], vec![n, k]], data: vec![uniform(rng, m * k, -1.0, 1.0), uniform(rng, k * n, -1.0, 1.0)] }
        },
        &|g, x| g.matmul_nt(x[0], x[1]).unwrap(),
    );
    run_op("transpose", 3, &|rng| { let (m, n) = dims(rng); one(vec![m, n], rng, -1.0, 1.0) }, &|g, x| g.transpose(x[0]).unwrap());
}

fn elementwise_binary_ops() {
    run_op("add", 10, &|rng| pair_same(rng, -1.0, 1.0), &|g, x| g.add(x[0], x[1]).unwrap());
    run_op("sub", 11, &|rng| pair_same(rng, -1.0, 1.0), &|g, x| g.sub(x[0], x[1]).unwrap());
    run_op("mul", 12, &|rng| pair_same(rng, -1.0, 1.0), &|g, x| g.mul(x[0], x[1]).unwrap());
    run_op(
        "div",
        13,
        &|rng| {
            let (m, n) = dims(rng);
            Case { shapes: vec![vec![m, n], vec![m, n]], data: vec![uniform(rng, m * n, -1.0, 1.0), away_from_zero(rng, m * n, 0.5)] }
        },
        &|g, x| g.div(x[0], x[1]).unwrap(),
    );
    let separated = |rng: &mut ChaCha8Rng| {
        let (m, n) = dims(rng);
        let a = uniform(rng, m * n, -1.0, 1.0);
        let gap = away_from_zero(rng, m * n, 0.05);
        let b = a.iter().zip(&gap).map(|(x, d)| x + d).collect();
        Case { shapes: vec![vec![m, n], vec![m, n]], data: vec![a, b] }
    };
    run_op("minimum", 14, &separated, &|g, x| g.minimum(x[0], x[1]).unwrap());
    run_op("maximum", 15, &separated, &|g, x| g.maximum(x[0], x[1]).unwrap());
    run_op(
        "add_row",
        16,
        &|rng| {
            let (m, n) = dims(rng);
            Case { shapes: vec![vec![m, n], vec![n]], data: vec![uniform(rng, m * n, -1.0, 1.0), uniform(rng, n, -1.0, 1.0)] }
        },
        &|g, x| g.add_row(x[0], x[1]).unwrap(),
    );
    run_op(
        "scale_rows",
        17,
        &|rng| {
            let (m, n) = dims(rng);
            Case { shapes: vec![vec![m, n], vec![m]], data: vec![uniform(rng, m * n, -1.0, 1.0), uniform(rng, m, -1.0, 1.0)] }
        },
        &|g, x| g.scale_rows(x[0], x[1]).unwrap(),
    );
}

fn elementwise_unary_ops() {
    let shape = |rng: &mut ChaCha8Rng| {
        let (m, n) = dims(rng);
        vec![m, n]
    };
    run_op("scale", 20, &|rng| { let s = shape(rng); one(s, rng, -1.0, 1.0) }, &|g, x| g.scale(x[0], -1.7));
    run_op("add_scalar", 21, &|rng| { let s = shape(rng); one(s, rng, -1.0, 1.0) }, &|g, x| g.add_scalar(x[0], 0.3));
    let kinked = |rng: &mut ChaCha8Rng| {
        let s = shape(rng);
        let n = s.iter().product();
        Case { data: vec![away_from_zero(rng, n, 0.05)], shapes: vec![s] }
    };
    run_op("relu", 22, &kinked, &|g, x| g.relu(x[0]));
    run_op("abs", 23, &kinked, &|g, x| g.abs(x[0]));
    run_op("gelu", 24, &|rng| { let s = shape(rng); one(s, rng, -3.0, 3.0) }, &|g, x| g.gelu(x[0]));
    run_op("softplus", 25, &|rng| { let s = shape(rng); one(s, rng, -3.0, 3.0) }, &|g, x| g.softplus(x[0]));
    run_op("exp", 26, &|rng| { let s = shape(rng); one(s, rng, -2.0, 2.0) }, &|g, x| g.exp(x[0]));
    run_op("log", 27, &|rng| { let s = shape(rng); one(s, rng, 0.2, 3.0) }, &|g, x| g.log(x[0]));
    run_op("pow", 28, &|rng| { let s = shape(rng); one(s, rng, 0.2, 2.0) }, &|g, x| g.pow(x[0], 2.7));
}

fn reduction_ops() {
    let any = |rng: &mut ChaCha8Rng| {
        let (m, n) = dims(rng);
        one(vec![m, n], rng, -1.0, 1.0)
    };
    run_op("sum", 30, &any, &|g, x| g.sum(x[0]));
    run_op("mean", 31, &any, &|g, x| g.mean(x[0]));
    run_op("sum_rows", 32, &any, &|g, x| g.sum_rows(x[0]));
    run_op("l1_norm", 33, &|rng| { let (m, n) = dims(rng); Case { data: vec![away_from_zero(rng, m * n, 0.05)], shapes: vec![vec![m, n]] } }, &|g, x| g.l1_norm(x[0]));
    run_op("l2_normalize", 34, &|rng| { let (m, n) = dims(rng); one(vec![m, n], rng, 0.1, 1.0) }, &|g, x| g.l2_normalize(x[0]));
    run_op(
        "max_over_set",
        35,
        &|rng| {
            let (groups, d) = dims(rng);
            let set = rng.gen_range(1..5);
            // distinct values per column, at least 0.05 apart
            let mut data = vec![0.0; groups * set * d];
            for gi in 0..groups {
                for j in 0..d {
                    let mut vals: Vec<Real> = (0..set).map(|s| s as Real * 0.1).collect();
                    for v in vals.iter_mut() {
                        *v += rng.gen_range(0.0..0.05);
                    }
                    for s in (1..set).rev() {
                        vals.swap(s, rng.gen_range(0..=s));
                    }
                    for s in 0..set {
                        data[(gi * set + s) * d + j] = vals[s];
                    }
                }
            }
            Case { shapes: vec![vec![groups * set, d], vec![1]], data: vec![data, vec![set as Real]] }
        },
        &|g, x| {
            let set = g.value(x[1])[0].round() as usize;
            g.max_over_set(x[0], set).unwrap()
        },
    );
    run_op(
        "mean_over_set",
        36,
        &|rng| {
            let (groups, d) = dims(rng);
            let set = rng.gen_range(1..5);
            Case { shapes: vec![vec![groups * set, d], vec![1]], data: vec![uniform(rng, groups * set * d, -1.0, 1.0), vec![set as Real]] }
        },
        &|g, x| {
            let set = g.value(x[1])[0].round() as usize;
            g.mean_over_set(x[0], set).unwrap()
        },
    );
}

fn shape_ops() {
    run_op(
        "reshape",
        40,
        &|rng| { let (m, n) = dims(rng); one(vec![m, n], rng, -1.0, 1.0) },
        &|g, x| {
            let n: usize = g.shape(x[0]).iter().product();
            g.reshape(x[0], &[n]).unwrap()
        },
    );
    run_op(
        "concat",
        41,
        &|rng| {
            let (m, n) = dims(rng);
            let k = rng.gen_range(1..4);
            Case { shapes: vec![vec![m, n], vec![m, k], vec![1]], data: vec![uniform(rng, m * n, -1.0, 1.0), uniform(rng, m * k, -1.0, 1.0), vec![rng.gen_range(0..2) as Real]] }
        },
        &|g, x| {
            if g.value(x[2])[0] == 0.0 {
                g.concat(&[x[0], x[1]], 1).unwrap()
            } else {
                let t = g.transpose(x[1]).unwrap();
                let u = g.transpose(x[0]).unwrap();
                g.concat(&[u, t], 0).unwrap()
            }
        },
    );
    run_op(
        "slice",
        42,
        &|rng| {
            let m = rng.gen_range(2..6);
            let n = rng.gen_range(2..6);
            one(vec![m, n], rng, -1.0, 1.0)
        },
        &|g, x| {
            let n = g.shape(x[0])[1];
            let a = g.slice(x[0], 1, 1, n).unwrap();
            g.slice(a, 0, 0, 1).unwrap()
        },
    );
    run_op(
        "gather",
        43,
        &|rng| {
            let (m, n) = dims(rng);
            let idx: Vec<Real> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..m) as Real).collect();
            Case { shapes: vec![vec![m, n], vec![idx.len()]], data: vec![uniform(rng, m * n, -1.0, 1.0), idx] }
        },
        &|g, x| {
            let idx: Vec<usize> = g.value(x[1]).iter().map(|v| v.round() as usize).collect();
            g.gather(x[0], &idx).unwrap()
        },
    );
    run_op(
        "embedding_lookup",
        44,
        &|rng| {
            let (m, n) = dims(rng);
            let ids: Vec<Real> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..m) as Real).collect();
            Case { shapes: vec![vec![m, n], vec![ids.len()]], data: vec![uniform(rng, m * n, -1.0, 1.0), ids] }
        },
        &|g, x| {
            let ids: Vec<usize> = g.value(x[1]).iter().map(|v| v.round() as usize).collect();
            g.embedding_lookup(x[0], &ids).unwrap()
        },
    );
}

fn normalisation_and_loss_ops() {
    run_op(
        "softmax",
        50,
        &|rng| {
            let (m, n) = dims(rng);
            Case { shapes: vec![vec![m, n], vec![1]], data: vec![uniform(rng, m * n, -2.0, 2.0), vec![rng.gen_range(0..2) as Real]] }
        },
        &|g, x| {
            let axis = g.value(x[1])[0].round() as usize;
            g.softmax(x[0], axis).unwrap()
        },
    );
    run_op(
        "layer_norm",
        51,
        &|rng| {
            let m = rng.gen_range(1..5);
            let n = rng.gen_range(2..7);
            Case {
                shapes: vec![vec![m, n], vec![n], vec![n]],
                data: vec![uniform(rng, m * n, -2.0, 2.0), uniform(rng, n, 0.5, 1.5), uniform(rng, n, -0.5, 0.5)],
            }
        },
        &|g, x| g.layer_norm(x[0], x[1], x[2], 1, 1e-5).unwrap(),
    );
    run_op(
        "cross_entropy",
        52,
        &|rng| {
            let m = rng.gen_range(1..5);
            let c = rng.gen_range(2..7);
            let t: Vec<Real> = (0..m).map(|_| rng.gen_range(0..c) as Real).collect();
            Case { shapes: vec![vec![m, c], vec![m]], data: vec![uniform(rng, m * c, -2.0, 2.0), t] }
        },
        &|g, x| {
            let t: Vec<usize> = g.value(x[1]).iter().map(|v| v.round() as usize).collect();
            g.cross_entropy_with_logits(x[0], &t).unwrap()
        },
    );
}

fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Box3D> {
    (0..n)
        .map(|_| {
            let c = [rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..1.0)];
            let s = [rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5), rng.gen_range(0.3..1.5)];
            Box3D::new(c, s).unwrap()
        })
        .collect()
}

/// True when no box face of `a` lies within `gap` of a face of `b` on any axis.
fn faces_separated(a: &[Real], b: &Box3D, gap: Real) -> bool {
    let (lo, hi) = (b.min(), b.max());
    (0..3).all(|k| {
        let (plo, phi) = (a[k] - 0.5 * a[k + 3], a[k] + 0.5 * a[k + 3]);
        [plo, phi].iter().all(|p| (p - lo[k]).abs() > gap && (p - hi[k]).abs() > gap)
    })
}

fn detection_loss_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let w = DetectionWeights::default();
    let mut worst: Real = 0.0;
    let mut done = 0;
    while done < CASES {
        let m = rng.gen_range(2..6);
        let n_gt = rng.gen_range(1..=m);
        let classes = 4;
        let gt = random_boxes(&mut rng, n_gt);
        let gt_cls: Vec<usize> = (0..n_gt).map(|_| rng.gen_range(0..classes)).collect();
        let centers = uniform(&mut rng, m * 3, 0.0, 3.0);
        let raw = uniform(&mut rng, m * 3, -0.5, 1.0);
        let logits = uniform(&mut rng, m * (classes + 1), -1.0, 1.0);
        // keep every predicted face clear of every gt face so GIoU is smooth
        let softplus = |x: Real| (1.0 + x.exp()).ln();
        let ok = (0..m).all(|i| {
            let mut a = [0.0; 6];
            for k in 0..3 {
                a[k] = centers[i * 3 + k];
                a[k + 3] = softplus(raw[i * 3 + k]);
            }
            gt.iter().all(|b| faces_separated(&a, b, 0.02))
        });
        if !ok {
            continue;
        }
        let case = Case { shapes: vec![vec![m, 3], vec![m, 3], vec![m, classes + 1]], data: vec![centers, raw, logits] };
        let build = |g: &mut Graph, x: &[NodeId]| {
            let sizes = g.softplus(x[1]);
            let det = LayerDetections { centers: x[0], sizes, logits: x[2] };
            detection_loss(g, &det, GtSet { boxes: &gt, classes: &gt_cls }, &w).unwrap().0.total
        };
        // the assignment is piecewise constant; reject cases where a probe step would flip it
        let assignment = |data: &[Vec<Real>]| {
            let mut g = Graph::inference();
            let ids: Vec<NodeId> = case.shapes.iter().zip(data).map(|(s, d)| g.constant(s, d.clone()).unwrap()).collect();
            let sizes = g.softplus(ids[1]);
            let det = LayerDetections { centers: ids[0], sizes, logits: ids[2] };
            detection_loss(&mut g, &det, GtSet { boxes: &gt, classes: &gt_cls }, &w).unwrap().1
        };
        let base = assignment(&case.data);
        let mut bumped = case.data.clone();
        for d in bumped.iter_mut() {
            for v in d.iter_mut() {
                *v += 10.0 * STEP;
            }
        }
        if assignment(&bumped) != base {
            continue;
        }
        worst = worst.max(check_case("detection_loss", &case, &build, &mut rng));
        done += 1;
    }
    println!("detection_loss: {CASES} cases, worst rel err {worst:.2e}");
}

fn mle_loss_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst: Real = 0.0;
    for case_no in 0..CASES {
        let mut store = ParamStore::new();
        let cfg = CaptionHeadConfig { vocab: 9, feature_dim: 5, dim: 8, layers: 1, heads: 2, ffn: 12, max_len: 5 };
        let head = CaptionHead::new(&mut store, &mut rng, "cap", cfg).unwrap();
        let k = rng.gen_range(0..3);
        let roles = if case_no % 2 == 0 { instance_roles() } else { tgi_roles(k, true) };
        let p = roles.len();
        let n_captions = rng.gen_range(1..3);
        let captions: Vec<Vec<usize>> =
            (0..n_captions).map(|_| (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(4..9)).collect()).collect();
        let prefix = uniform(&mut rng, p * 5, -1.0, 1.0);

        // gradient w.r.t. the prefix features
        let case = Case { shapes: vec![vec![p, 5]], data: vec![prefix.clone()] };
        let build = |g: &mut Graph, x: &[NodeId]| {
            let targets: Vec<CaptionTarget> = captions.iter().map(|c| CaptionTarget { prefix: x[0], roles: roles.clone(), tokens: c.clone() }).collect();
            mle_loss(g, &store, &head, &targets).unwrap()
        };
        worst = worst.max(check_case("mle_loss/prefix", &case, &build, &mut rng));

        // gradient w.r.t. a sample of head parameters
        let loss_of = |store: &ParamStore, grad: bool| {
            let mut g = if grad { Graph::new() } else { Graph::inference() };
            let pre = g.constant(&[p, 5], prefix.clone()).unwrap();
            let targets: Vec<CaptionTarget> = captions.iter().map(|c| CaptionTarget { prefix: pre, roles: roles.clone(), tokens: c.clone() }).collect();
            let l = mle_loss(&mut g, store, &head, &targets).unwrap();
            (g.scalar(l), if grad { Some(g.backward(l).unwrap()) } else { None })
        };
        let grads = loss_of(&store, true).1.unwrap();
        let ids: Vec<_> = store.ids().collect();
        for _ in 0..8 {
            let id = ids[rng.gen_range(0..ids.len())];
            let i = rng.gen_range(0..store.get(id).numel());
            let analytic = grads.param(id).map_or(0.0, |g| g[i]);
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let up = loss_of(&store, false).0;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let down = loss_of(&store, false).0;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic, numeric);
            assert!(e < TOL, "mle_loss/{}[{i}]: analytic {analytic} numeric {numeric}", store.name(id));
            worst = worst.max(e);
        }
    }
    println!("mle_loss: {CASES} cases, worst rel err {worst:.2e}");
}
