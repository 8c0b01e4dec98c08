use rand::{Rng as _, SeedableRng};

use super::*;
use crate::datagen::rng::Rng;
use crate::gradcheck::{check_gradients, GRAD_TOLERANCE};

const DIM: usize = 10;

fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

fn random(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
}

fn random_centroids(r: &mut Rng, k: usize, extent: f64) -> Vec<[f64; 3]> {
    (0..k)
        .map(|_| [r.gen_range(-extent..extent), r.gen_range(-extent..extent), r.gen_range(0.0..1.0)])
        .collect()
}

fn fusion(store: &mut ParamStore, blocks: usize, bidirectional: bool, seed: u64) -> Fusion {
    Fusion::new(store, DIM, blocks, 1, 2 * DIM, bidirectional, &mut rng(seed)).unwrap()
}

struct Inputs {
    inst: Tensor,
    centroids: Vec<[f64; 3]>,
    words: Tensor,
    pad: Vec<bool>,
}

fn inputs(seed: u64, k: usize, w: usize) -> Inputs {
    let mut r = rng(seed);
    Inputs {
        inst: random(&mut r, k, DIM),
        centroids: random_centroids(&mut r, k, 2.0),
        words: random(&mut r, w, DIM),
        pad: vec![false; w],
    }
}

fn tokens(g: &mut Graph, x: &Inputs) -> (InstanceTokens, WordTokens) {
    let inst = InstanceTokens {
        embeddings: g.variable(x.inst.clone()),
        centroids: x.centroids.clone(),
    };
    let words = WordTokens {
        embeddings: g.variable(x.words.clone()),
        ids: vec![2; x.pad.len()],
        pad: x.pad.clone(),
        attention: Vec::new(),
    };
    (inst, words)
}

fn mask_oracle(c: &[[f64; 3]], r: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for a in c {
        for b in c {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            out.push(if d < r { 0.0 } else { MASK_NEG });
        }
    }
    out
}

#[test]
fn spherical_mask_examples() {
    let m = spherical_mask(&[[0.0; 3], [3.0, 0.0, 0.0]], 2.5);
    assert_eq!(m.data(), &[0.0, MASK_NEG, MASK_NEG, 0.0]);
    let m = spherical_mask(&[[0.0; 3], [30.0, 0.0, 0.0], [1.0, 1.0, 1.0]], f64::INFINITY);
    assert!(m.data().iter().all(|&v| v == 0.0));
    // strict inequality at exactly r
    let m = spherical_mask(&[[0.0; 3], [1.0, 0.0, 0.0]], 1.0);
    assert_eq!(m.get(0, 1), MASK_NEG);
}

#[test]
fn spherical_mask_matches_oracle_and_nests() {
    let mut r = rng(21);
    for _ in 0..100 {
        let k = r.gen_range(1..9);
        let c = random_centroids(&mut r, k, 2.0);
        let radius = r.gen_range(0.2..3.0);
        assert_eq!(spherical_mask(&c, radius).data(), mask_oracle(&c, radius).as_slice());
        let wide = spherical_mask(&c, 2.5);
        let narrow = spherical_mask(&c, 1.0);
        for (n, w) in narrow.data().iter().zip(wide.data()) {
            if *n == 0.0 {
                assert_eq!(*w, 0.0);
            }
        }
        for i in 0..k {
            assert_eq!(narrow.get(i, i), 0.0);
        }
        let t = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)];
        let moved: Vec<[f64; 3]> = c.iter().map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]).collect();
        // translation only perturbs distances by rounding; compare away from the boundary
        let m1 = spherical_mask(&c, radius);
        let m2 = spherical_mask(&moved, radius);
        let o = mask_oracle(&c, radius - 1e-9);
        let o2 = mask_oracle(&c, radius + 1e-9);
        for idx in 0..k * k {
            if o[idx] == o2[idx] {
                assert_eq!(m1.data()[idx], m2.data()[idx]);
            }
        }
    }
}

#[test]
fn schedules() {
    assert!(matches!(
        RadiusSchedule::top_down(vec![1.0, 2.5, f64::INFINITY]),
        Err(Error::IncreasingSchedule(_))
    ));
    let s = RadiusSchedule::standard();
    assert_eq!(s.radii(), &[f64::INFINITY, 2.5, 1.0]);
    let b = s.reversed();
    assert_eq!(b.radii(), &[1.0, 2.5, f64::INFINITY]);
    assert_eq!(b.order(), ScheduleOrder::BottomUp);
    assert!(RadiusSchedule::new(vec![2.5, 1.0], ScheduleOrder::BottomUp).is_err());
    assert!(RadiusSchedule::top_down(vec![0.0]).is_err());
    assert!(RadiusSchedule::top_down(vec![]).is_err());
}

#[test]
fn single_instance_block_is_finite() {
    let mut store = ParamStore::new();
    let block = TbaBlock::new(&mut store, "b", DIM, 1, DIM, &mut rng(1)).unwrap();
    let x = inputs(2, 1, 4);
    let mut g = Graph::with_params(&store);
    let (inst, words) = tokens(&mut g, &x);
    let mask = spherical_mask(&inst.centroids, 1.0);
    let out = block
        .forward(&mut g, inst.embeddings, words.embeddings, Some(&mask), None, true)
        .unwrap();
    for v in [out.instances, out.words, out.offsets] {
        assert!(g.value(v).data().iter().all(|x| x.is_finite()));
    }
    assert_eq!(g.value(out.offsets).shape(), &[1, 3]);
    let a = block.self_attn.forward(&mut g, inst.embeddings, inst.embeddings, Some(&mask)).unwrap();
    assert_eq!(g.value(a.probs[0]).data(), &[1.0]);
}

#[test]
fn zero_offset_head_gives_zero_offsets() {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, true, 3);
    for b in &f.blocks {
        for id in [b.offset_head.w, b.offset_head.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let x = inputs(4, 3, 5);
    let mut g = Graph::with_params(&store);
    let (inst, words) = tokens(&mut g, &x);
    let out = f.run_tba(&mut g, &inst, &words, &RadiusSchedule::standard()).unwrap();
    assert_eq!(out.offsets.len(), 3);
    for &o in &out.offsets {
        assert!(g.value(o).data().iter().all(|&v| v == 0.0));
    }
}

fn weighted_sum(g: &mut Graph, vars: &[Var], seed: u64) -> Var {
    let mut r = rng(seed);
    let mut total: Option<Var> = None;
    for &v in vars {
        let (m, n) = g.value(v).dims2().unwrap();
        let w = g.constant(random(&mut r, m, n));
        let p = g.mul(v, w).unwrap();
        let s = g.sum(p);
        total = Some(match total {
            Some(t) => g.add(t, s).unwrap(),
            None => s,
        });
    }
    total.unwrap()
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let block = TbaBlock::new(&mut store, "b", DIM, 2, DIM, &mut rng(5)).unwrap();
    let mut x = inputs(6, 3, 5);
    x.pad[4] = true;
    let report = check_gradients(&store, None, GRAD_TOLERANCE, |g| {
        let (inst, words) = tokens(g, &x);
        let mask = spherical_mask(&inst.centroids, 2.5);
        let wm = words.key_mask(3);
        let out = block.forward(g, inst.embeddings, words.embeddings, Some(&mask), wm.as_ref(), true)?;
        Ok(weighted_sum(g, &[out.instances, out.words, out.offsets], 7))
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
    assert_eq!(report.checked, store.num_scalars());
}

#[test]
fn infinite_schedule_equals_unmasked_pipeline() {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, true, 8);
    let x = inputs(9, 6, 7);
    let mut g = Graph::with_params(&store);
    let (inst, words) = tokens(&mut g, &x);
    let all_inf = RadiusSchedule::top_down(vec![f64::INFINITY; 3]).unwrap();
    let a = f.run_tba(&mut g, &inst, &words, &all_inf).unwrap();
    let b = f.run_unmasked(&mut g, &inst, &words).unwrap();
    let pairs = [
        (a.selection_logits, b.selection_logits),
        (a.span_logits, b.span_logits),
        (a.offsets[2], b.offsets[2]),
    ];
    for (p, q) in pairs {
        for (u, v) in g.value(p).data().iter().zip(g.value(q).data()) {
            assert!((u - v).abs() <= 1e-10);
        }
    }
}

#[test]
fn fusion_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, true, 10);
    let mut r = rng(11);
    for trial in 0..10 {
        let k = r.gen_range(2..7);
        let x = inputs(100 + trial, k, 5);
        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, r.gen_range(0..=i));
        }
        let px = Inputs {
            inst: Tensor::matrix(k, DIM, perm.iter().flat_map(|&i| x.inst.row(i).to_vec()).collect()),
            centroids: perm.iter().map(|&i| x.centroids[i]).collect(),
            words: x.words.clone(),
            pad: x.pad.clone(),
        };
        let mut g = Graph::with_params(&store);
        let (i1, w1) = tokens(&mut g, &x);
        let (i2, w2) = tokens(&mut g, &px);
        let s = RadiusSchedule::standard();
        let a = f.run_tba(&mut g, &i1, &w1, &s).unwrap();
        let b = f.run_tba(&mut g, &i2, &w2, &s).unwrap();
        for (row, &i) in perm.iter().enumerate() {
            let (u, v) = (g.value(a.selection_logits).get(i, 0), g.value(b.selection_logits).get(row, 0));
            assert!((u - v).abs() <= 1e-10);
            for blk in 0..3 {
                for (u, v) in g.value(a.offsets[blk]).row(i).iter().zip(g.value(b.offsets[blk]).row(row)) {
                    assert!((u - v).abs() <= 1e-10);
                }
            }
        }
        for (u, v) in g.value(a.span_logits).data().iter().zip(g.value(b.span_logits).data()) {
            assert!((u - v).abs() <= 1e-10);
        }
    }
}

fn span_grad_wrt_instances(bidirectional: bool) -> Option<Vec<f64>> {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, bidirectional, 12);
    let x = inputs(13, 4, 6);
    let mut g = Graph::with_params(&store);
    let (inst, words) = tokens(&mut g, &x);
    let out = f.run_tba(&mut g, &inst, &words, &RadiusSchedule::standard()).unwrap();
    let l = g.sum(out.span_logits);
    g.backward(l).unwrap();
    g.grad(inst.embeddings).map(<[f64]>::to_vec)
}

#[test]
fn span_logits_depend_on_instances_only_when_bidirectional() {
    let with = span_grad_wrt_instances(true).expect("gradient reaches instances");
    assert!(with.iter().any(|&v| v.abs() > 1e-8));
    let without = span_grad_wrt_instances(false);
    assert!(without.map_or(true, |g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn early_offsets_do_not_depend_on_later_blocks() {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, true, 14);
    let x = inputs(15, 4, 5);
    let mut g = Graph::with_params(&store);
    let (inst, words) = tokens(&mut g, &x);
    let out = f.run_tba(&mut g, &inst, &words, &RadiusSchedule::standard()).unwrap();
    let l = g.sum(out.offsets[0]);
    g.backward(l).unwrap();
    let mut first_block_touched = false;
    for (id, grad) in g.param_grads() {
        let name = store.name(id);
        if name.starts_with("tba2") || name.starts_with("tba1") {
            assert!(grad.iter().all(|&v| v == 0.0), "{name}");
        }
        if name.starts_with("tba0") && grad.iter().any(|&v| v != 0.0) {
            first_block_touched = true;
        }
    }
    assert!(first_block_touched);
}

#[test]
fn bottom_up_first_block_cannot_see_far_instances() {
    let mut store = ParamStore::new();
    let f = fusion(&mut store, 3, true, 16);
    let mut x = inputs(17, 3, 5);
    // instance 2 is the target; instance 0 is isolated at the first radius
    x.centroids = vec![[0.0, 0.0, 0.5], [2.0, 0.0, 0.5], [2.5, 0.5, 0.5]];
    let schedule = RadiusSchedule::standard().reversed();
    let row_grad_norm = |block: usize, row: usize| -> f64 {
        let mut g = Graph::with_params(&store);
        let (inst, words) = tokens(&mut g, &x);
        let out = f.run_tba(&mut g, &inst, &words, &schedule).unwrap();
        let mut pick = Tensor::zeros(3, 3);
        pick.data_mut()[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let pick = g.constant(pick);
        let first = g.mul(out.offsets[block], pick).unwrap();
        let l = g.sum(first);
        g.backward(l).unwrap();
        g.grad(inst.embeddings).unwrap()[row * DIM..(row + 1) * DIM]
            .iter()
            .map(|v| v.abs())
            .sum()
    };
    assert_eq!(row_grad_norm(0, 2), 0.0);
    assert!(row_grad_norm(0, 0) > 0.0);
    // by the last (global) block the target is visible
    assert!(row_grad_norm(2, 2) > 0.0);
}

#[test]
fn predict_examples_and_scan_oracle() {
    assert_eq!(predict(&[0.1, 0.9, 0.2]), 1);
    assert_eq!(predict(&[0.5; 4]), 0);
    assert_eq!(predict(&[1.0, 3.0, 3.0]), 1);
    let mut r = rng(18);
    for _ in 0..100 {
        let n = r.gen_range(1..10);
        let v: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(-3..3))).collect();
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let oracle = v.iter().position(|&x| x == max).unwrap();
        assert_eq!(predict(&v), oracle);
    }
}

#[test]
fn offsets_csv() {
    let mut g = Graph::new();
    let o1 = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]));
    let s = g.constant(Tensor::zeros(2, 1));
    let out = FusionOutput {
        selection_logits: s,
        offsets: vec![o1],
        span_logits: s,
        instances: s,
        words: s,
    };
    let recs = offset_records(&g, &out, 7, 3);
    let mut buf = Vec::new();
    write_offsets_csv(&mut buf, &recs).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "scene_id,referral_id,block,instance,ox,oy,oz\n7,3,0,0,1,2,3\n7,3,0,1,4,5,6.5\n"
    );
}
