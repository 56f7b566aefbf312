use dmv::anchors::BBox;
use dmv::backbone::{extract, init_params, BackboneConfig};
use dmv::metrics::evaluate_sequence;
use dmv::numerics::rng::stream;
use dmv::numerics::{ParamSet, Tape, Tensor};
use proptest::prelude::*;

fn blob(size: usize, cx: f64, cy: f64) -> Tensor {
    Tensor::from_fn(&[3, size, size], |i| {
        let (y, x) = ((i / size) % size, i % size);
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (-d2 / 18.0).exp()
    })
}

fn argmax_cell(cfg: &BackboneConfig, params: &ParamSet, crop: Tensor) -> (usize, usize) {
    let mut t = Tape::new();
    let x = t.constant(crop);
    let y = extract(&mut t, params, cfg, x).unwrap();
    let s = t.shape(y).to_vec();
    let (c, hw) = (s[0], s[1] * s[2]);
    let v = t.value(y).data();
    let energy: Vec<f64> = (0..hw).map(|p| (0..c).map(|ch| v[ch * hw + p].powi(2)).sum()).collect();
    let best = (0..hw).max_by(|&a, &b| energy[a].partial_cmp(&energy[b]).unwrap()).unwrap();
    (best / s[2], best % s[2])
}

#[test]
fn backbone_response_follows_a_shifted_blob() {
    let cfg = BackboneConfig { input_size: 128, widths: vec![4, 6, 8, 8], strides: vec![2, 2, 2, 2], key_channels: 6 };
    for seed in 0..4 {
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &mut stream(seed, 0));
        let base = argmax_cell(&cfg, &params, blob(128, 56.0, 56.0));
        let right = argmax_cell(&cfg, &params, blob(128, 72.0, 56.0));
        let down = argmax_cell(&cfg, &params, blob(128, 56.0, 72.0));
        assert_eq!(right, (base.0, base.1 + 1), "seed {seed}");
        assert_eq!(down, (base.0 + 1, base.1), "seed {seed}");
    }
}

fn boxes() -> impl Strategy<Value = Vec<(f64, f64, f64, f64)>> {
    prop::collection::vec((10.0..200.0f64, 10.0..200.0f64, 4.0..60.0f64, 4.0..60.0f64), 1..12)
}

fn to_boxes(v: &[(f64, f64, f64, f64)], dx: f64, dy: f64, scale: f64) -> Vec<BBox> {
    v.iter().map(|&(x, y, w, h)| BBox::new((x + dx) * scale, (y + dy) * scale, w * scale, h * scale).unwrap()).collect()
}

proptest! {
    #[test]
    fn metrics_ignore_joint_translation(gt in boxes(), jitter in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 12), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
        let pred: Vec<_> = gt.iter().zip(&jitter).map(|(&(x, y, w, h), &(a, b))| (x + a, y + b, w, h)).collect();
        let base = evaluate_sequence("s", &to_boxes(&pred, 0.0, 0.0, 1.0).into_iter().map(Some).collect::<Vec<_>>(), &to_boxes(&gt, 0.0, 0.0, 1.0)).unwrap();
        let moved = evaluate_sequence("s", &to_boxes(&pred, dx, dy, 1.0).into_iter().map(Some).collect::<Vec<_>>(), &to_boxes(&gt, dx, dy, 1.0)).unwrap();
        prop_assert!((base.success_auc - moved.success_auc).abs() < 1e-9);
        prop_assert!((base.precision_20 - moved.precision_20).abs() < 1e-9);
        prop_assert!((base.p_norm_auc - moved.p_norm_auc).abs() < 1e-9);
        prop_assert!((base.ao - moved.ao).abs() < 1e-9);
    }

    #[test]
    fn overlap_and_normalized_precision_ignore_scale(gt in boxes(), jitter in prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), 12), scale in 0.25..4.0f64) {
        let pred: Vec<_> = gt.iter().zip(&jitter).map(|(&(x, y, w, h), &(a, b))| (x + a, y + b, w, h)).collect();
        let base = evaluate_sequence("s", &to_boxes(&pred, 0.0, 0.0, 1.0).into_iter().map(Some).collect::<Vec<_>>(), &to_boxes(&gt, 0.0, 0.0, 1.0)).unwrap();
        let scaled = evaluate_sequence("s", &to_boxes(&pred, 0.0, 0.0, scale).into_iter().map(Some).collect::<Vec<_>>(), &to_boxes(&gt, 0.0, 0.0, scale)).unwrap();
        prop_assert!((base.success_auc - scaled.success_auc).abs() < 1e-9);
        prop_assert!((base.ao - scaled.ao).abs() < 1e-9);
        prop_assert!((base.p_norm_auc - scaled.p_norm_auc).abs() < 1e-9);
    }
}
