use mmkd::models::*;
use mmkd::rng::{derive_seed, rng_from};
use mmkd::synthdata::*;
use mmkd::{Graph, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn examples(c: &DatasetConfig, n: u64) -> Vec<MultimodalExample> {
    (0..n)
        .map(|i| generate_example(derive_seed(3, i), c, Side::Train, i))
        .collect()
}

fn grid_batch(modality: Modality, data: Tensor) -> Batch {
    Batch {
        modality,
        omni: false,
        input: ModelInput::Grid(data),
    }
}

fn single(out: Outputs) -> Tensor {
    match out {
        Outputs::Single(t) => t,
        Outputs::Dual { .. } => panic!("single head expected"),
    }
}

#[test]
fn zero_input_collapses_to_the_bias_path() {
    let c = DatasetConfig::iid();
    let spec = ModelSpec::new(InputKind::Native(Modality::Appearance), Task::Action, &c);
    let mut m = ModalityModel::init(spec, 8);
    let names = m.param_names();
    // Nonzero biases so the bias path is distinguishable from zero.
    for (name, p) in names.iter().zip(m.params.iter_mut()) {
        if name.ends_with(".b") {
            for (i, v) in p.data_mut().iter_mut().enumerate() {
                *v = 0.01 * (i % 7) as f32;
            }
        }
    }
    let x = Tensor::zeros(&[4, c.clip_frames, 3, c.height, c.width]);
    let logits = single(m.predict(&grid_batch(Modality::Appearance, x)).unwrap());
    for r in 1..4 {
        assert_eq!(logits.row(r), logits.row(0));
    }
    assert!(logits.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn fresh_logits_are_bounded() {
    let c = DatasetConfig::iid();
    let mut worst = 0.0f32;
    for seed in 0..100u64 {
        let spec = ModelSpec::new(InputKind::Native(Modality::Appearance), Task::Action, &c);
        let m = ModalityModel::init(spec, seed);
        let mut rng = rng_from(derive_seed(77, seed));
        let n = 2 * c.clip_frames * 3 * c.height * c.width;
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[2, c.clip_frames, 3, c.height, c.width], data).unwrap();
        let logits = single(m.predict(&grid_batch(Modality::Appearance, x)).unwrap());
        assert!(logits.is_finite());
        worst = logits.data().iter().fold(worst, |w, v| w.max(v.abs()));
    }
    assert!(worst < 10.0, "{worst}");
}

#[test]
fn every_parameter_receives_gradient() {
    let c = DatasetConfig::iid();
    let exs = examples(&c, 8);
    for (kind, omni) in Modality::ALL
        .iter()
        .map(|&m| (InputKind::Native(m), false))
        .chain([(InputKind::Omni, true)])
    {
        for task in [Task::Action, Task::NounVerb] {
            let m = ModalityModel::init(ModelSpec::new(kind, task, &c), 1);
            let modality = match kind {
                InputKind::Native(m) => m,
                InputKind::Omni => Modality::Layout,
            };
            let views: Vec<ViewParams> = (0..exs.len() as u64)
                .map(|i| sample_view(i, ViewMode::Train, &c))
                .collect();
            let items: Vec<_> = exs.iter().zip(&views).collect();
            let batch = build_batch(modality, &items, &c, omni, task).unwrap();
            let mut g = Graph::new();
            let params = m.register(&mut g, true);
            let loss = match m.forward(&mut g, &params, &batch).unwrap() {
                Logits::Single(l) => {
                    let labels: Vec<usize> = exs.iter().map(|e| e.action).collect();
                    g.cross_entropy(l, &labels).unwrap()
                }
                Logits::Dual { noun, verb } => {
                    let nl: Vec<usize> = exs.iter().map(|e| e.noun).collect();
                    let vl: Vec<usize> = exs.iter().map(|e| e.verb).collect();
                    let a = g.cross_entropy(noun, &nl).unwrap();
                    let b = g.cross_entropy(verb, &vl).unwrap();
                    g.add(a, b).unwrap()
                }
            };
            g.backward(loss).unwrap();
            for (name, &p) in m.param_names().iter().zip(&params) {
                let grad = g.grad(p).expect("gradient");
                assert!(grad.iter().any(|&v| v != 0.0), "{kind:?} {task:?}: {name} is dead");
            }
        }
    }
}

fn random_layout(seed: u64, clips: usize, frames: usize, k: usize) -> (LayoutBatch, LayoutBatch) {
    let mut rng = rng_from(seed);
    let mut boxes_per_frame = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut permuted: Vec<Vec<f32>> = Vec::new();
    for _ in 0..clips * frames {
        let n = rng.gen_range(1..=4);
        boxes_per_frame.push(n);
        let frame: Vec<Vec<f32>> = (0..n)
            .map(|_| {
                let mut r: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                let cat = rng.gen_range(0..k);
                r.extend((0..k).map(|j| (j == cat) as u8 as f32));
                r
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(rng.gen_range(0..n));
        permuted.extend(order.iter().map(|&i| frame[i].clone()));
        rows.extend(frame);
    }
    let dim = 4 + k;
    let make = |rows: Vec<Vec<f32>>| LayoutBatch {
        features: Tensor::new(&[rows.len(), dim], rows.concat()).unwrap(),
        boxes_per_frame: boxes_per_frame.clone(),
        frames_per_clip: vec![frames; clips],
    };
    (make(rows), make(permuted))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn layout_encoder_ignores_box_order(seed in any::<u64>(), init in 0u64..1000) {
        let c = DatasetConfig::iid();
        let spec = ModelSpec::new(InputKind::Native(Modality::Layout), Task::NounVerb, &c);
        let m = ModalityModel::init(spec, init);
        let (a, b) = random_layout(seed, 3, c.clip_frames, c.num_categories());
        let run = |l: LayoutBatch| {
            m.predict(&Batch { modality: Modality::Layout, omni: false, input: ModelInput::Layout(l) }).unwrap()
        };
        let (Outputs::Dual { noun: na, verb: va }, Outputs::Dual { noun: nb, verb: vb }) = (run(a), run(b)) else {
            panic!("dual heads expected");
        };
        for (x, y) in na.data().iter().chain(va.data()).zip(nb.data().iter().chain(vb.data())) {
            prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn batch_rows_match_single_rows(seed in any::<u64>(), row in 0usize..8) {
        let c = DatasetConfig::iid();
        let spec = ModelSpec::new(InputKind::Native(Modality::Appearance), Task::Action, &c);
        let m = ModalityModel::init(spec, seed % 97);
        let mut rng = rng_from(seed);
        let per = c.clip_frames * 3 * c.height * c.width;
        let data: Vec<f32> = (0..8 * per).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = Tensor::new(&[8, c.clip_frames, 3, c.height, c.width], data.clone()).unwrap();
        let one = Tensor::new(&[1, c.clip_frames, 3, c.height, c.width], data[row * per..(row + 1) * per].to_vec()).unwrap();
        let a = single(m.predict(&grid_batch(Modality::Appearance, full)).unwrap());
        let b = single(m.predict(&grid_batch(Modality::Appearance, one)).unwrap());
        for (x, y) in a.row(row).iter().zip(b.row(0)) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}
