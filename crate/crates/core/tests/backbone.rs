//! SSD core against its quadratic form, SSSD/MSA blocks and the four-stage
//! hierarchy.

mod common;

use ammsm_core::backbone::{
    attention, backbone_forward, msa_block, ssd_core, ssd_core_oracle, sssd_block, Backbone, Block, BlockKind,
    Mixer, StageConfig,
};
use ammsm_core::metrics::Registry;
use ammsm_core::params::{Init, ParamStore};
use ammsm_core::sparse::{importance_scores, ImportanceMap};
use ammsm_core::{Tape, Tensor, Var};
use ammsm_tensor::{finite_diff_check, DEFAULT_EPS};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{assert_fingerprint, normal, rng, tiny_stages, GOLDEN_SEED};

fn gates(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(0.5..2.0))
}

fn core_inputs(seed: u64, l: usize, d: usize, h: usize, n: usize) -> [Tensor<f64>; 4] {
    let mut r = rng(seed);
    [
        normal(&[1, l, d], &mut r),
        gates(&[1, l, h], &mut r),
        normal(&[1, l, n], &mut r),
        normal(&[1, l, n], &mut r),
    ]
}

fn run_core(t: &[Tensor<f64>; 4]) -> Tensor<f64> {
    let tape = Tape::new();
    let v: Vec<Var<f64>> = t.iter().map(|x| tape.constant(x.clone())).collect();
    ssd_core(&v[0], &v[1], &v[2], &v[3]).unwrap().value()
}

fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let scale = b.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale.max(1e-300)
}

#[test]
fn ssd_core_matches_quadratic_oracle() {
    for seed in 0..50 {
        for l in 1..=64 {
            let t = core_inputs(seed * 100 + l as u64, l, 8, 2, 4);
            let oracle = ssd_core_oracle(&t[0], &t[1], &t[2], &t[3]).unwrap();
            let err = rel_err(&run_core(&t), &oracle);
            assert!(err < 1e-6, "seed {seed} L={l}: relative error {err:e}");
        }
    }
}

#[test]
fn ssd_core_is_permutation_equivariant() {
    for seed in 0..20 {
        let l = 24;
        let t = core_inputs(seed, l, 8, 2, 4);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng(seed + 1000));
        let permute = |x: &Tensor<f64>| {
            let w = x.shape()[2];
            let mut data = Vec::with_capacity(x.numel());
            for &p in &perm {
                data.extend_from_slice(&x.data()[p * w..(p + 1) * w]);
            }
            Tensor::from_vec(x.shape(), data).unwrap()
        };
        let y = run_core(&t);
        let yp = run_core(&[permute(&t[0]), permute(&t[1]), permute(&t[2]), permute(&t[3])]);
        assert!(rel_err(&yp, &permute(&y)) < 1e-12, "seed {seed}");
    }
}

#[test]
fn ssd_core_zero_values_give_zero_output() {
    let mut t = core_inputs(9, 10, 8, 2, 4);
    t[0] = Tensor::zeros(&[1, 10, 8]);
    assert!(run_core(&t).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_token_core_and_attention() {
    let t = core_inputs(11, 1, 4, 2, 3);
    let cb: f64 = (0..3).map(|k| t[2].data()[k] * t[3].data()[k]).sum();
    let y = run_core(&t);
    for ch in 0..4 {
        let want = cb * t[0].data()[ch] / t[1].data()[ch / 2];
        assert!((y.data()[ch] - want).abs() < 1e-12);
    }
    let tape = Tape::new();
    let mut r = rng(12);
    let q = tape.constant(normal(&[1, 1, 4], &mut r));
    let k = tape.constant(normal(&[1, 1, 4], &mut r));
    let v = tape.constant(normal(&[1, 1, 4], &mut r));
    let out = attention(&q, &k, &v, 2).unwrap().value();
    assert!(out.max_abs_diff(&v.value()) < 1e-15);
}

fn block(seed: u64, kind: BlockKind, d: usize) -> (ParamStore<f64>, Block) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let b = Block::new(&mut store, &mut Init { rng: &mut r }, "b", kind, d, 2, 4);
    (store, b)
}

fn scores(x: &Tensor<f64>) -> Vec<ImportanceMap<f64>> {
    let s = x.shape();
    let per = s[1] * s[2] * s[3];
    x.data()
        .chunks(per)
        .map(|c| importance_scores(&Tensor::from_vec(&s[1..], c.to_vec()).unwrap()).unwrap())
        .collect()
}

#[test]
fn sssd_block_dense_and_single_window() {
    let (store, b) = block(21, BlockKind::Sssd, 8);
    let xt = normal(&[1, 8, 8, 8], &mut rng(22));
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let x = tape.constant(xt.clone());
    let phi = scores(&xt);

    let dense = sssd_block(&p, &b, &x, 0.0, &phi).unwrap().value();
    assert!(dense.data().iter().all(|v| v.is_finite() && *v != 0.0));

    let best = phi[0]
        .values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let one = sssd_block(&p, &b, &x, 0.75, &phi).unwrap().value();
    for y in 0..8 {
        for xx in 0..8 {
            let inside = (y / 4) * 2 + xx / 4 == best;
            for c in 0..8 {
                let v = one.get(&[0, y, xx, c]);
                assert_eq!(v != 0.0, inside, "({y}, {xx}, {c})");
            }
        }
    }
}

#[test]
fn block_goldens() {
    let xt = normal(&[1, 8, 8, 16], &mut rng(GOLDEN_SEED));
    let phi = scores(&xt);
    let tape = Tape::new();
    let x = tape.constant(xt);

    let (store, b) = block(GOLDEN_SEED, BlockKind::Sssd, 16);
    let y = sssd_block(&store.bind(&tape, false), &b, &x, 0.0, &phi).unwrap().value();
    assert_fingerprint(
        "sssd block",
        &y,
        [
            -3.1487395467314143,
            61128.86393352465,
            -11.367509833452276,
            -0.8170517084239736,
            3.4623865655768404,
        ],
    );

    let (store, b) = block(GOLDEN_SEED, BlockKind::Msa, 16);
    let y = msa_block(&store.bind(&tape, false), &b, &x, 0.5, &phi).unwrap().value();
    assert_fingerprint(
        "msa block",
        &y,
        [
            26.867872580978734,
            611.8153128097227,
            -0.4373909198433209,
            0.8832463846276581,
            0.0,
        ],
    );
}

#[test]
fn sssd_block_gradients() {
    let (store, b) = block(31, BlockKind::Sssd, 8);
    let xt = normal(&[1, 4, 4, 8], &mut rng(32));
    let phi = scores(&xt);
    let weights = normal(&[1, 4, 4, 8], &mut rng(33));
    let loss = |y: Var<f64>| y.mul(&y.tape().constant(weights.clone()))?.sum_all();

    let err = finite_diff_check(
        |x| {
            let p = store.bind(x.tape(), false);
            loss(sssd_block(&p, &b, x, 0.0, &phi).map_err(to_tensor)?)
        },
        &xt,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "input gradient error {err:e}");

    let Mixer::Ssd(ssd) = &b.mixer else { unreachable!() };
    let id = ssd.in_proj.w;
    let err = finite_diff_check(
        |w| {
            let mut p = store.bind(w.tape(), false);
            p.set(id, w.clone());
            loss(sssd_block(&p, &b, &w.tape().constant(xt.clone()), 0.0, &phi).map_err(to_tensor)?)
        },
        store.get(id),
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "projection gradient error {err:e}");
}

fn to_tensor(e: ammsm_core::Error) -> ammsm_tensor::TensorError {
    match e {
        ammsm_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn backbone(cfg: &StageConfig, sparse: bool, seed: u64) -> (ParamStore<f64>, Backbone) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, &mut Init { rng: &mut r }, "t", cfg, sparse).unwrap();
    (store, bb)
}

#[test]
fn desk_stage_resolutions_and_output_width() {
    let cfg = StageConfig::desk();
    let (store, bb) = backbone(&cfg, true, 41);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let reg = Registry::new();
    let ratios = vec![0.5; cfg.slots()];
    let mut x = bb.stem.forward(&p, &tape.constant(normal(&[1, 64, 64, 2], &mut rng(42)))).unwrap();
    let mut sizes = Vec::new();
    for i in 0..4 {
        x = bb.run_stage(&p, i, &x, &ratios, &reg).unwrap();
        let s = x.shape();
        sizes.push((s[1], s[2], s[3]));
        if i < 3 {
            x = bb.downs[i].forward(&p, &x).unwrap();
        }
    }
    assert_eq!(sizes, vec![(16, 16, 16), (8, 8, 32), (4, 4, 64), (2, 2, 128)]);

    let flow = tape.constant(normal(&[2, 64, 64, 2], &mut rng(43)));
    let (stage2, pooled) = backbone_forward(&p, &bb, &flow, &ratios, &reg).unwrap();
    assert_eq!(stage2.shape(), vec![2, 8, 8, 32]);
    assert_eq!(pooled.shape(), vec![2, 128]);
}

#[test]
fn exactly_two_attention_blocks_at_stage_ends() {
    for cfg in [StageConfig::desk(), StageConfig::paper(), tiny_stages()] {
        let (_, bb) = backbone(&cfg, true, 0);
        let msa: Vec<(usize, usize)> = bb
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, blocks)| {
                blocks
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.kind == BlockKind::Msa && matches!(b.mixer, Mixer::Msa(_)))
                    .map(move |(j, _)| (i, j))
            })
            .collect();
        assert_eq!(msa, vec![(2, cfg.layers[2] - 1), (3, cfg.layers[3] - 1)]);
    }
}

#[test]
fn zero_ratios_are_bit_identical_to_the_dense_build() {
    let cfg = tiny_stages();
    let (sparse_store, sparse) = backbone(&cfg, true, 51);
    let (dense_store, dense) = backbone(&cfg, false, 51);
    let flow = normal(&[2, 64, 64, 2], &mut rng(52));
    let run = |store: &ParamStore<f64>, bb: &Backbone| {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (s2, pooled) =
            backbone_forward(&p, bb, &tape.constant(flow.clone()), &vec![0.0; cfg.slots()], &Registry::new()).unwrap();
        (s2.value(), pooled.value())
    };
    let (a2, ap) = run(&sparse_store, &sparse);
    let (b2, bp) = run(&dense_store, &dense);
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a2), bits(&b2));
    assert_eq!(bits(&ap), bits(&bp));
}

#[test]
fn ratio_and_input_validation() {
    let cfg = tiny_stages();
    let (store, bb) = backbone(&cfg, true, 61);
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let reg = Registry::new();
    let ok = vec![0.5; cfg.slots()];
    let flow = |h, w| tape.constant(Tensor::<f64>::zeros(&[1, h, w, 2]));
    assert!(backbone_forward(&p, &bb, &flow(64, 64), &ok, &reg).is_ok());
    assert!(backbone_forward(&p, &bb, &flow(48, 64), &ok, &reg).unwrap_err().is_config());
    assert!(backbone_forward(&p, &bb, &flow(64, 64), &ok[1..], &reg).unwrap_err().is_config());
    let mut bad = ok.clone();
    bad[0] = 1.0;
    assert!(backbone_forward(&p, &bb, &flow(64, 64), &bad, &reg).unwrap_err().is_config());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn core_equivalence_holds_for_any_shape(seed in any::<u64>(), l in 1usize..40, heads in 1usize..4, per_head in 1usize..4, n in 1usize..6) {
        let t = core_inputs(seed, l, heads * per_head, heads, n);
        let oracle = ssd_core_oracle(&t[0], &t[1], &t[2], &t[3]).unwrap();
        prop_assert!(rel_err(&run_core(&t), &oracle) < 1e-6);
    }
}
