use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::{check_params, project, DEFAULT_STEP};
use crate::tensor::kernels;

type Rows = Vec<Vec<f64>>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn to_rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn close(a: &Tensor, b: &Rows, tol: f64) {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.len(), flat.len());
    for (x, y) in a.data().iter().zip(&flat) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn set(store: &mut ParamStore, name: &str, t: Tensor) {
    let p = store
        .get_mut(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(p.tensor.shape(), t.shape());
    p.tensor = t;
}

fn zero(store: &mut ParamStore, name: &str) {
    let shape = store.get(name).unwrap().tensor.shape().to_vec();
    set(store, name, Tensor::zeros(&shape));
}

// Plain loops, independent of the tape.
fn dense_linear(store: &ParamStore, prefix: &str, x: &Rows) -> Rows {
    let w = &store.get(&format!("{prefix}.weight")).unwrap().tensor;
    let b = &store.get(&format!("{prefix}.bias")).unwrap().tensor;
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..fo)
                .map(|j| b.data()[j] + (0..fi).map(|i| r[i] * w.data()[i * fo + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn dense_mhca(
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    q: &Rows,
    k: &Rows,
    v: &Rows,
) -> Rows {
    let qp = dense_linear(store, &format!("{prefix}.q_proj"), q);
    let kp = dense_linear(store, &format!("{prefix}.k_proj"), k);
    let vp = dense_linear(store, &format!("{prefix}.v_proj"), v);
    let d = qp[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for (i, qi) in qp.iter().enumerate() {
            let logits: Vec<f64> = kp
                .iter()
                .map(|kj| {
                    (0..dh)
                        .map(|c| qi[h * dh + c] * kj[h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vp.iter().enumerate() {
                for c in 0..dh {
                    ctx[i][h * dh + c] += e[j] / z * vj[h * dh + c];
                }
            }
        }
    }
    dense_linear(store, &format!("{prefix}.out_proj"), &ctx)
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

#[test]
fn bi_fusion_zero_projections_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let bf = BiFusion::new(&mut store, "bf", 8, 2, &mut rng).unwrap();
    for dir in ["v2t", "t2v"] {
        for p in ["v_proj", "out_proj"] {
            zero(&mut store, &format!("bf.{dir}.{p}.weight"));
        }
    }
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let fv = tape.constant(random(12, 8, &mut rng)).unwrap();
    let rw = tape.constant(random(3, 8, &mut rng)).unwrap();
    let (a, c) = bf.forward(&tape, &b, fv, rw).unwrap();
    assert_eq!(tape.shape(a), vec![12, 8]);
    assert_eq!(tape.shape(c), vec![3, 8]);
    assert_eq!(tape.value(a), tape.value(fv));
    assert_eq!(tape.value(c), tape.value(rw));
}

#[test]
fn bi_fusion_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let bf = BiFusion::new(&mut store, "bf", 4, 1, &mut rng).unwrap();
    let fv_t = random(6, 4, &mut rng);
    let rw_t = random(3, 4, &mut rng);
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let fv = tape.constant(fv_t.clone()).unwrap();
    let rw = tape.constant(rw_t.clone()).unwrap();
    let (a, c) = bf.forward(&tape, &b, fv, rw).unwrap();
    let (fvr, rwr) = (to_rows(&fv_t), to_rows(&rw_t));
    let want_v = add_rows(&fvr, &dense_mhca(&store, "bf.v2t", 1, &fvr, &rwr, &rwr));
    let want_w = add_rows(&rwr, &dense_mhca(&store, "bf.t2v", 1, &rwr, &fvr, &fvr));
    close(&tape.value(a), &want_v, 1e-5);
    close(&tape.value(c), &want_w, 1e-5);
}

fn identity_pyramid(levels: usize, d: usize) -> (ParamStore, Pyramid) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let p = Pyramid::new(&mut store, "pyr", d, levels, &mut rng).unwrap();
    for l in 0..levels {
        set(&mut store, &format!("pyr.{l}.weight"), Tensor::eye(d));
    }
    (store, p)
}

#[test]
fn pyramid_of_constant_map_is_constant() {
    let (store, p) = identity_pyramid(4, 3);
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let map = tape.constant(Tensor::full(&[8, 8, 3], 0.7)).unwrap();
    let levels = p.forward(&tape, &b, map).unwrap();
    let shapes: Vec<Vec<usize>> = levels.iter().map(|&l| tape.shape(l)).collect();
    assert_eq!(
        shapes,
        vec![vec![8, 8, 3], vec![4, 4, 3], vec![2, 2, 3], vec![1, 1, 3]]
    );
    for l in levels {
        assert!(tape
            .value(l)
            .data()
            .iter()
            .all(|&v| (v - 0.7).abs() < 1e-12));
    }
    let small = tape.constant(Tensor::full(&[7, 9, 3], 0.0)).unwrap();
    assert!(p.forward(&tape, &b, small).is_err());
}

#[test]
fn pyramid_pooling_matches_ceil_oracle() {
    let (store, p) = identity_pyramid(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w, c) = (5, 7, 2);
    let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let map = tape
        .constant(Tensor::new(vec![h, w, c], data.clone()).unwrap())
        .unwrap();
    let levels = p.forward(&tape, &b, map).unwrap();
    let l1 = tape.value(levels[1]);
    assert_eq!(l1.shape(), &[3, 4, 2]);
    for i in 0..3 {
        for j in 0..4 {
            for ch in 0..c {
                let mut s = 0.0;
                let mut n = 0.0;
                for r in [2 * i, 2 * i + 1] {
                    for col in [2 * j, 2 * j + 1] {
                        if r < h && col < w {
                            s += data[(r * w + col) * c + ch];
                            n += 1.0;
                        }
                    }
                }
                assert!((l1.data()[(i * 4 + j) * c + ch] - s / n).abs() < 1e-6);
            }
        }
    }
}

fn sampler(
    d: usize,
    heads: usize,
    levels: usize,
    points: usize,
    seed: u64,
) -> (ParamStore, DeformSampler) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let s = DeformSampler::new(&mut store, "ds", d, heads, levels, points, &mut rng).unwrap();
    (store, s)
}

#[test]
fn deform_constant_field() {
    let (mut store, ds) = sampler(8, 8, 4, 4, 5);
    for n in [
        "ds.offset.weight",
        "ds.offset.bias",
        "ds.attn.weight",
        "ds.attn.bias",
    ] {
        zero(&mut store, n);
    }
    set(&mut store, "ds.value_proj.weight", Tensor::eye(8));
    set(&mut store, "ds.out_proj.weight", Tensor::eye(8));
    let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let levels: Vec<Var> = [8usize, 4, 2, 1]
        .iter()
        .map(|&s| {
            let data: Vec<f64> = (0..s * s).flat_map(|_| c.clone()).collect();
            tape.constant(Tensor::new(vec![s, s, 8], data).unwrap())
                .unwrap()
        })
        .collect();
    let values = ds.value_maps(&tape, &b, &levels).unwrap();
    let boxes = [BBox::new(0.3, 0.6, 0.2, 0.3), BBox::new(0.9, 0.1, 0.4, 0.1)];
    let (out, w) = ds.forward(&tape, &b, &levels, &values, &boxes).unwrap();
    let out = tape.value(out);
    for r in 0..2 {
        for (a, e) in out.row(r).iter().zip(&c) {
            assert!((a - e).abs() < 1e-12);
        }
    }
    let w = tape.value(w);
    for r in 0..w.rows() {
        assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn deform_collapses_to_single_sample() {
    let (mut store, ds) = sampler(4, 1, 1, 1, 6);
    zero(&mut store, "ds.offset.weight");
    zero(&mut store, "ds.offset.bias");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let map_t = Tensor::new(
        vec![4, 5, 4],
        (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let map = tape.constant(map_t.clone()).unwrap();
    let values = ds.value_maps(&tape, &b, &[map]).unwrap();
    let bx = BBox::new(0.37, 0.58, 0.2, 0.3);
    let (out, _) = ds.forward(&tape, &b, &[map], &values, &[bx]).unwrap();
    let sample = kernels::bilinear_sample(&map_t, bx.cx, bx.cy).unwrap();
    let want = dense_linear(
        &store,
        "ds.out_proj",
        &dense_linear(&store, "ds.value_proj", &vec![sample.data().to_vec()]),
    );
    close(&tape.value(out), &want, 1e-12);
}

#[test]
fn deform_gradients_match_finite_differences() {
    let (store, ds) = sampler(8, 2, 2, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let l0 = Tensor::new(
        vec![6, 6, 8],
        (0..288).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let l1 = Tensor::new(
        vec![3, 3, 8],
        (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let boxes = [
        BBox::new(0.4, 0.45, 0.3, 0.2),
        BBox::new(0.62, 0.3, 0.15, 0.25),
    ];
    let errs = check_params(&store, DEFAULT_STEP, |tape, b| {
        let levels = [tape.constant(l0.clone())?, tape.constant(l1.clone())?];
        let values = ds.value_maps(tape, b, &levels)?;
        let (out, _) = ds.forward(tape, b, &levels, &values, &boxes)?;
        project(tape, out, 3)
    })
    .unwrap();
    for (name, e) in errs {
        assert!(e <= 1e-4, "{name}: {e}");
    }
}

fn mhca(d: usize, heads: usize, seed: u64) -> (ParamStore, Mhca) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = Mhca::new(&mut store, "m", d, heads, &mut rng).unwrap();
    (store, m)
}

#[test]
fn refer_aggregate_single_key_and_oracle() {
    let (store, m) = mhca(4, 1, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let rs_t = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let rs = tape.constant(rs_t.clone()).unwrap();

    let rw1 = tape.constant(random(1, 4, &mut rng)).unwrap();
    let rv1_t = random(1, 4, &mut rng);
    let rv1 = tape.constant(rv1_t.clone()).unwrap();
    let out = tape.value(refer_aggregate(&tape, &b, &m, rs, rw1, rv1).unwrap());
    let upd = dense_linear(
        &store,
        "m.out_proj",
        &dense_linear(&store, "m.v_proj", &to_rows(&rv1_t)),
    );
    close(&out, &add_rows(&vec![rs_t.data().to_vec()], &upd), 1e-12);

    let rw_t = random(3, 4, &mut rng);
    let rv_t = random(3, 4, &mut rng);
    let rw = tape.constant(rw_t.clone()).unwrap();
    let rv = tape.constant(rv_t.clone()).unwrap();
    let out = tape.value(refer_aggregate(&tape, &b, &m, rs, rw, rv).unwrap());
    let q = vec![rs_t.data().to_vec()];
    let want = add_rows(
        &q,
        &dense_mhca(&store, "m", 1, &q, &to_rows(&rw_t), &to_rows(&rv_t)),
    );
    close(&out, &want, 1e-5);

    // Permuting keys together with values leaves the result unchanged.
    let perm = [2usize, 0, 1];
    let rwp = tape.index_rows(rw, &perm).unwrap();
    let rvp = tape.index_rows(rv, &perm).unwrap();
    let outp = tape.value(refer_aggregate(&tape, &b, &m, rs, rwp, rvp).unwrap());
    close(&outp, &to_rows(&out.reshape(&[1, 4]).unwrap()), 1e-12);
}

#[test]
fn caption_filter_contracts() {
    let (mut store, m) = mhca(4, 1, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cw_t = random(2, 4, &mut rng);
    let rw_t = random(3, 4, &mut rng);
    let rv_t = random(3, 4, &mut rng);
    {
        let tape = Tape::new(Precision::F64);
        let b = store.bind(&tape).unwrap();
        let (cw, rw, rv) = (
            tape.constant(cw_t.clone()).unwrap(),
            tape.constant(rw_t.clone()).unwrap(),
            tape.constant(rv_t.clone()).unwrap(),
        );
        let out = tape.value(caption_filter(&tape, &b, &m, cw, rw, rv).unwrap());
        let cwr = to_rows(&cw_t);
        let want = add_rows(
            &cwr,
            &dense_mhca(&store, "m", 1, &cwr, &to_rows(&rw_t), &to_rows(&rv_t)),
        );
        close(&out, &want, 1e-5);

        // A single referring word gives every caption token the same update.
        let rw1 = tape.index_rows(rw, &[0]).unwrap();
        let rv1 = tape.index_rows(rv, &[0]).unwrap();
        let out = tape.value(caption_filter(&tape, &b, &m, cw, rw1, rv1).unwrap());
        for j in 0..4 {
            let u0 = out.row(0)[j] - cw_t.row(0)[j];
            let u1 = out.row(1)[j] - cw_t.row(1)[j];
            assert!((u0 - u1).abs() < 1e-12);
        }
    }
    zero(&mut store, "m.out_proj.weight");
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let (cw, rw, rv) = (
        tape.constant(cw_t.clone()).unwrap(),
        tape.constant(rw_t).unwrap(),
        tape.constant(rv_t).unwrap(),
    );
    assert_eq!(
        tape.value(caption_filter(&tape, &b, &m, cw, rw, rv).unwrap()),
        cw_t
    );
}

#[test]
fn caption_aggregate_contracts() {
    let (store, m) = mhca(4, 1, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let cs_t = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let cs = tape.constant(cs_t.clone()).unwrap();
    let cw_t = random(3, 4, &mut rng);
    let cv_t = random(3, 4, &mut rng);
    let cw = tape.constant(cw_t.clone()).unwrap();
    let cv = tape.constant(cv_t.clone()).unwrap();
    let out = tape.value(caption_aggregate(&tape, &b, &m, cs, cw, cv).unwrap());
    let q = vec![cs_t.data().to_vec()];
    let want = add_rows(
        &q,
        &dense_mhca(&store, "m", 1, &q, &to_rows(&cw_t), &to_rows(&cv_t)),
    );
    close(&out, &want, 1e-5);

    let cw1 = tape.index_rows(cw, &[1]).unwrap();
    let cv1 = tape.index_rows(cv, &[1]).unwrap();
    let out = tape.value(caption_aggregate(&tape, &b, &m, cs, cw1, cv1).unwrap());
    let upd = dense_linear(
        &store,
        "m.out_proj",
        &dense_linear(&store, "m.v_proj", &vec![cv_t.row(1).to_vec()]),
    );
    close(&out, &add_rows(&q, &upd), 1e-12);
}

#[test]
fn positional_embedding_properties() {
    let a = BBox::new(0.3, 0.4, 0.2, 0.1);
    let e1 = pos_embed(&a, 32).unwrap();
    assert_eq!(e1, pos_embed(&a, 32).unwrap());
    let e2 = pos_embed(&BBox::new(0.7, 0.4, 0.2, 0.1), 32).unwrap();
    for i in 0..32 {
        assert_eq!(i < 8, e1[i] != e2[i], "dim {i}");
    }
    for pair in e1.chunks(2) {
        assert!((pair[0] * pair[0] + pair[1] * pair[1] - 1.0).abs() < 1e-6);
    }
    assert!(pos_embed(&a, 12).is_err());
}

#[test]
fn holistic_projection_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let fuse = store.add_linear("fuse", 4, 4, &mut rng).unwrap();
    let (ov_t, oc_t, op_t) = (
        random(3, 4, &mut rng),
        random(3, 4, &mut rng),
        random(3, 4, &mut rng),
    );
    let bias = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
    set(&mut store, "fuse.bias", bias);
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let (ov, oc, op) = (
        tape.constant(ov_t.clone()).unwrap(),
        tape.constant(oc_t.clone()).unwrap(),
        tape.constant(op_t.clone()).unwrap(),
    );
    let out = tape.value(holistic_project(&tape, &b, &fuse, ov, Some(oc), op).unwrap());
    let sum: Rows = (0..3)
        .map(|i| {
            (0..4)
                .map(|j| ov_t.row(i)[j] + oc_t.row(i)[j] + 2.0 * op_t.row(i)[j])
                .collect()
        })
        .collect();
    close(&out, &dense_linear(&store, "fuse", &sum), 1e-6);

    set(&mut store, "fuse.weight", Tensor::eye(4));
    zero(&mut store, "fuse.bias");
    let tape = Tape::new(Precision::F64);
    let b = store.bind(&tape).unwrap();
    let ov = tape.constant(ov_t.clone()).unwrap();
    let z = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
    assert_eq!(
        tape.value(holistic_project(&tape, &b, &fuse, ov, Some(z), z).unwrap()),
        ov_t
    );
    let oc = tape.constant(oc_t.clone()).unwrap();
    let op = tape.constant(op_t.clone()).unwrap();
    let once = tape.value(holistic_project(&tape, &b, &fuse, ov, Some(oc), op).unwrap());
    let (ov2, oc2, op2) = (
        tape.scale(ov, 2.0).unwrap(),
        tape.scale(oc, 2.0).unwrap(),
        tape.scale(op, 2.0).unwrap(),
    );
    let twice = tape.value(holistic_project(&tape, &b, &fuse, ov2, Some(oc2), op2).unwrap());
    for (a, b) in once.data().iter().zip(twice.data()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

fn tiny_config() -> HmsiConfig {
    HmsiConfig {
        dim: 8,
        heads: 2,
        levels: 4,
        points: 2,
        map_height: 8,
        map_width: 8,
        visual_noise: 0.2,
        ..Default::default()
    }
}

fn random_proposals(n: usize, rng: &mut ChaCha8Rng) -> Vec<Proposal> {
    let g = AttributeGrammar::default();
    (0..n)
        .map(|_| {
            let attrs = g
                .slots
                .iter()
                .map(|s| {
                    let vs = g.values(s);
                    (s.clone(), vs[rng.gen_range(0..vs.len())].clone())
                })
                .collect();
            Proposal {
                bbox: BBox::new(
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.1..0.9),
                    rng.gen_range(0.05..0.2),
                    rng.gen_range(0.05..0.3),
                ),
                caption: g.caption(&attrs).unwrap(),
                detector_score: 0.9,
            }
        })
        .collect()
}

#[test]
fn empty_frame_gives_empty_scores() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let visual = Tensor::zeros(&[8, 8, 8]);
    assert!(model
        .score_frame(&visual, &[], "the red car", Precision::F64)
        .unwrap()
        .is_empty());
    let tape = Tape::new(Precision::F64);
    let b = model.params.bind(&tape).unwrap();
    let ctx = model.frame_context(&tape, &b, &visual, &[]).unwrap();
    let q = model.encode_query(&tape, &b, "the red car").unwrap();
    let out = model.score_query(&tape, &b, &ctx, &q, None).unwrap();
    assert_eq!(tape.shape(out.scores), vec![0]);
}

#[test]
fn proposal_permutation_is_equivariant() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let visual = Tensor::new(
        vec![8, 8, 8],
        (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let props = random_proposals(5, &mut rng);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted: Vec<Proposal> = perm.iter().map(|&i| props[i].clone()).collect();
    for precision in [Precision::F64, Precision::F32] {
        let s = model
            .score_frame(&visual, &props, "the moving red car", precision)
            .unwrap();
        let sp = model
            .score_frame(&visual, &permuted, "the moving red car", precision)
            .unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(sp[k], s[i]);
        }
    }
}

#[test]
fn subset_scores_equal_full_scores() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let visual = Tensor::new(
        vec![8, 8, 8],
        (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let props = random_proposals(4, &mut rng);
    let tape = Tape::new(Precision::F32);
    let b = model.params.bind(&tape).unwrap();
    let ctx = model.frame_context(&tape, &b, &visual, &props).unwrap();
    let q = model.encode_query(&tape, &b, "the white van").unwrap();
    let full = tape.value(model.score_query(&tape, &b, &ctx, &q, None).unwrap().scores);
    let sub = tape.value(
        model
            .score_query(&tape, &b, &ctx, &q, Some(&[2, 0]))
            .unwrap()
            .scores,
    );
    assert_eq!(sub.data(), &[full.data()[2], full.data()[0]]);
}

#[test]
fn scores_are_bounded_on_random_frames() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let texts = [
        "the red car",
        "the parked van on the left",
        "the moving white cyclist",
    ];
    for f in 0..1000 {
        let visual = Tensor::new(
            vec![8, 8, 8],
            (0..512).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let n = rng.gen_range(0..4);
        let props = random_proposals(n, &mut rng);
        let s = model
            .score_frame(&visual, &props, texts[f % 3], Precision::F32)
            .unwrap();
        assert_eq!(s.len(), n);
        assert!(s.iter().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
    }
}

#[test]
fn holistic_representation_depends_on_query() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for seed in 0..3 {
        let model = Hmsi::new(HmsiConfig {
            seed,
            ..tiny_config()
        })
        .unwrap();
        let visual = Tensor::new(
            vec![8, 8, 8],
            (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let props = random_proposals(2, &mut rng);
        let tape = Tape::new(Precision::F64);
        let b = model.params.bind(&tape).unwrap();
        let ctx = model.frame_context(&tape, &b, &visual, &props).unwrap();
        let q1 = model
            .encode_query(&tape, &b, "the red car on the left")
            .unwrap();
        let q2 = model
            .encode_query(&tape, &b, "the white car on the left")
            .unwrap();
        let h1 = tape.value(
            model
                .score_query(&tape, &b, &ctx, &q1, None)
                .unwrap()
                .holistic,
        );
        let h2 = tape.value(
            model
                .score_query(&tape, &b, &ctx, &q2, None)
                .unwrap()
                .holistic,
        );
        let diff: f64 = h1
            .data()
            .iter()
            .zip(h2.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(diff > 0.0);
    }
}

#[test]
fn encoders_receive_no_gradient() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let visual = Tensor::new(
        vec![8, 8, 8],
        (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let props = random_proposals(3, &mut rng);
    let tape = Tape::new(Precision::F64);
    let b = model.params.bind(&tape).unwrap();
    let ctx = model.frame_context(&tape, &b, &visual, &props).unwrap();
    let q = model.encode_query(&tape, &b, "the red car").unwrap();
    let s = model.score_query(&tape, &b, &ctx, &q, None).unwrap().scores;
    let loss = tape.sum(s).unwrap();
    let grads = model.params.gradients(&b, &tape.backward(loss).unwrap());
    assert!(!grads.contains_key(TEXT_TABLE));
    assert!(!grads.contains_key(VISUAL_PROJECTION));
    assert!(grads.keys().all(|k| k.starts_with("hmsi.")));
    assert!(grads["hmsi.deform.offset.weight"].max_abs() > 0.0);
}

#[test]
fn container_round_trip_rebuilds_model() {
    let model = Hmsi::new(tiny_config()).unwrap();
    let file = TensorFile::from_bytes(&model.to_container(Precision::F64).to_bytes()).unwrap();
    let back = Hmsi::from_container(&file).unwrap();
    assert_eq!(back.config, model.config);
    assert_eq!(back.params, model.params);
    assert_eq!(back.text, model.text);
}
