mod common;

use proptest::prelude::*;
use resdsn::c2f::{bbox_of_mask, BoundingBox};
use resdsn::metrics::dsc;
use resdsn::rng::{stream, Purpose};
use resdsn::synth::{case_id, synth_case};
use resdsn::train::{
    augment, batch_tensor, draw_patch, fine_origin_ranges, lr_poly, sample_coarse, sample_fine, train_stage, AugmentOp,
    Axis, Case, SamplerSpec, StageKind, Trainer,
};
use resdsn::volume::preprocess;
use resdsn::{Checkpoint, NetworkConfig, ResDsn, RunConfig, Volume};

/// Intensities encode the linear voxel index, so a patch reveals its origin.
fn coordinate_volume(dims: [usize; 3]) -> Volume<f32> {
    let n = dims.iter().product::<usize>();
    Volume::new(dims, [1.0; 3], (0..n).map(|i| i as f32).collect()).unwrap()
}

fn origin_of(patch: &Volume<f32>, dims: [usize; 3]) -> [usize; 3] {
    let i = patch.get(0, 0, 0) as usize;
    [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])]
}

fn assert_is_window(patch: &Volume<f32>, vol: &Volume<f32>) {
    let o = origin_of(patch, vol.dims());
    let expect = vol.extract(o, patch.dims()).unwrap();
    assert_eq!(patch, &expect);
}

fn cube_label(dims: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Volume<u8> {
    let mut m = Volume::filled(dims, [1.0; 3], 0u8).unwrap();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                m.set(x, y, z, 1);
            }
        }
    }
    m
}

#[test]
fn coarse_patches_stay_inside_the_volume() {
    let dims = [128; 3];
    let vol = coordinate_volume(dims);
    let lab = Volume::filled(dims, [1.0; 3], 0u8).unwrap();
    let mut rng = stream(1, Purpose::Sample, 0, 0);
    for _ in 0..1000 {
        let (p, l) = sample_coarse(&vol, &lab, [64; 3], &mut rng).unwrap();
        assert_eq!(l.dims(), [64; 3]);
        assert_is_window(&p, &vol);
    }
}

#[test]
fn sampling_is_seeded() {
    let (img, lab) = synth_case([48, 40, 32], 2, 0).unwrap();
    let draw = |s| {
        let mut r = stream(s, Purpose::Sample, 3, 1);
        sample_coarse(&img, &lab, [16; 3], &mut r).unwrap()
    };
    assert_eq!(draw(5), draw(5));
    assert_ne!(draw(5).0, draw(6).0);
}

#[test]
fn sparse_label_yields_background_patches() {
    let dims = [64; 3];
    let lab = cube_label(dims, [30; 3], [35; 3]);
    assert!((lab.count() as f64) < 0.01 * lab.len() as f64);
    let vol = lab.map(f32::from);
    let mut rng = stream(0, Purpose::Sample, 0, 0);
    let empty = (0..100)
        .filter(|_| sample_coarse(&vol, &lab, [16; 3], &mut rng).unwrap().1.count() == 0)
        .count();
    assert!(empty > 0);
}

/// Every origin whose patch lies in `region`, or contains it on axes where
/// the region is narrower than the patch.
fn valid_origins_bruteforce(region: &BoundingBox, dims: [usize; 3], patch: [usize; 3]) -> [Vec<usize>; 3] {
    [0, 1, 2].map(|a| {
        (0..=dims[a] - patch[a])
            .filter(|&o| {
                let (lo, hi) = (region.lo[a], region.hi[a]);
                let end = o + patch[a] - 1;
                if hi - lo + 1 >= patch[a] {
                    lo <= o && end <= hi
                } else {
                    o <= lo && hi <= end
                }
            })
            .collect()
    })
}

#[test]
fn fine_origins_match_enumeration() {
    let dims = [128; 3];
    let lab = cube_label(dims, [50, 40, 90], [69, 59, 109]);
    let region = bbox_of_mask(&lab).unwrap().padded(8, dims);
    let ranges = fine_origin_ranges(&region, dims, [64; 3]);
    let oracle = valid_origins_bruteforce(&region, dims, [64; 3]);
    for a in 0..3 {
        assert_eq!(ranges[a], (oracle[a][0], *oracle[a].last().unwrap()));
        assert_eq!(oracle[a].len(), ranges[a].1 - ranges[a].0 + 1);
    }
    let vol = coordinate_volume(dims);
    let mut rng = stream(4, Purpose::Sample, 0, 0);
    for _ in 0..300 {
        let (p, l) = sample_fine(&vol, &lab, [64; 3], 8, &mut rng).unwrap();
        let o = origin_of(&p, dims);
        assert!((0..3).all(|a| oracle[a].contains(&o[a])), "{o:?}");
        assert!(l.count() > 0);
    }
}

#[test]
fn full_label_fine_equals_coarse() {
    let dims = [40, 36, 33];
    let vol = coordinate_volume(dims);
    let lab = Volume::filled(dims, [1.0; 3], 1u8).unwrap();
    for s in 0..20 {
        let mut a = stream(s, Purpose::Sample, 0, 0);
        let mut b = stream(s, Purpose::Sample, 0, 0);
        assert_eq!(
            sample_fine(&vol, &lab, [16; 3], 8, &mut a).unwrap(),
            sample_coarse(&vol, &lab, [16; 3], &mut b).unwrap()
        );
    }
}

fn random_mask(side: usize, seed: u64, density: f64) -> Volume<u8> {
    use rand::Rng;
    let mut r = common::rng(seed);
    let n = side * side * side;
    Volume::new([side; 3], [1.0; 3], (0..n).map(|_| r.random_bool(density) as u8).collect()).unwrap()
}

fn any_op() -> impl Strategy<Value = AugmentOp> {
    (0..3usize, 0..4u8, any::<[bool; 3]>()).prop_map(|(a, quarter_turns, flips)| AugmentOp {
        axis: [Axis::X, Axis::Y, Axis::Z][a],
        quarter_turns,
        flips,
    })
}

proptest! {
    #[test]
    fn augmentation_preserves_foreground(op in any_op(), seed in 0u64..1000) {
        let m = random_mask(6, seed, 0.3);
        prop_assert_eq!(op.apply(&m).unwrap().count(), m.count());
    }

    #[test]
    fn dice_is_invariant_under_shared_transform(op in any_op(), seed in 0u64..1000) {
        let p = random_mask(7, seed, 0.4);
        let y = random_mask(7, seed + 1, 0.4);
        let d0 = dsc(&p, &y).unwrap();
        let d1 = dsc(&op.apply(&p).unwrap(), &op.apply(&y).unwrap()).unwrap();
        prop_assert_eq!(d0, d1);
    }

    #[test]
    fn lr_poly_is_non_increasing(total in 1u64..10_000, frac in 0.0f64..1.0) {
        let t = ((total as f64) * frac) as u64;
        let a = lr_poly(t, total, 0.01, 0.9).unwrap();
        let b = lr_poly((t + 1).min(total), total, 0.01, 0.9).unwrap();
        prop_assert!(b <= a);
        prop_assert!((0.0..=0.01).contains(&a));
    }
}

#[test]
fn augment_pairs_image_and_label() {
    let m = random_mask(8, 3, 0.2);
    let img = m.map(|v| v as f32 * 2.0);
    let mut rng = stream(0, Purpose::Sample, 0, 0);
    for _ in 0..20 {
        let (a, b, op) = augment(&img, &m, &mut rng).unwrap();
        assert_eq!(a, b.map(|v| v as f32 * 2.0));
        assert_eq!(op.apply(&m).unwrap(), b);
    }
}

fn tiny_data(count: usize) -> Vec<Case> {
    (0..count)
        .map(|i| {
            let (img, lab) = synth_case([32; 3], 11, i).unwrap();
            Case {
                id: case_id(i),
                image: preprocess(&img),
                label: lab,
            }
        })
        .collect()
}

fn short_run(iterations: u64) -> RunConfig {
    let mut cfg = RunConfig::tiny();
    cfg.optim.iterations = iterations;
    cfg.optim.log_every = 1;
    cfg
}

#[test]
fn two_iteration_smoke_run() {
    let data = tiny_data(2);
    let cfg = short_run(2);
    let mut rows = Vec::new();
    let ck = train_stage(&cfg.train_config(), &data, StageKind::Coarse, 0, |r| rows.push(r.clone())).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.loss_total.is_finite()));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("coarse.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.iteration, 2);
    ResDsn::<f32>::from_checkpoint(&back).unwrap();
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let data = tiny_data(2);
    let cfg = short_run(3);
    for stage in [StageKind::Coarse, StageKind::Fine] {
        let a = train_stage(&cfg.train_config(), &data, stage, 7, |_| {}).unwrap();
        let b = train_stage(&cfg.train_config(), &data, stage, 7, |_| {}).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = train_stage(&cfg.train_config(), &data, stage, 8, |_| {}).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }
}

#[test]
fn fine_stage_rejects_empty_labels() {
    let mut data = tiny_data(1);
    data[0].label = data[0].label.map(|_| 0);
    assert!(train_stage(&short_run(1).train_config(), &data, StageKind::Fine, 0, |_| {}).is_err());
}

#[test]
fn frozen_batch_loss_decreases() {
    let data = tiny_data(4);
    let spec = SamplerSpec {
        stage: StageKind::Fine,
        patch_size: [16; 3],
        fine_margin: 8,
    };
    let mut monotone = 0;
    for seed in 0..10 {
        let patches: Vec<_> = (0..4).map(|s| draw_patch(&spec, &data, seed, 0, s).unwrap()).collect();
        let (x, y) = batch_tensor(&patches).unwrap();
        let mut trainer = Trainer::new(ResDsn::new(NetworkConfig::tiny(), seed).unwrap(), 0.9);
        let losses: Vec<f64> = (0..21).map(|_| trainer.step(&x, &y, 0.01).unwrap().total).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 8, "{monotone}/10 seeds decreased monotonically");
}
