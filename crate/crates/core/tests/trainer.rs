mod common;

use common::{rel_err, sphere};
use voxbox::encoder::CubeContext;
use voxbox::io::{write_label, write_nifti, Geometry, LabelVolume, Volume};
use voxbox::loss::LossConfig;
use voxbox::model::{Model, ModelConfig};
use voxbox::train::*;
use voxbox::{Error, MemoryMeter, Mode, Partition, Tape, Tensor};

fn sphere_sample(n: usize, radius: f64) -> Sample<f64> {
    let (img, lbl) = sphere(n, radius);
    Sample::new(
        "sphere",
        Tensor::new(img, &[1, 1, n, n, n]).unwrap(),
        Tensor::new(lbl, &[1, 1, n, n, n]).unwrap(),
    )
    .unwrap()
}

fn grads(model: &Model<f64>) -> Vec<f64> {
    model
        .parameters()
        .iter()
        .flat_map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect()
}

#[test]
fn adamw_matches_hand_computation() {
    let mut w = Tensor::<f64>::parameter(vec![1.0, -2.0], &[2]).unwrap();
    let mut frozen = Tensor::<f64>::parameter(vec![5.0], &[1]).unwrap();
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut opt = AdamW::new(cfg);
    let gs = [[0.5, -1.0], [0.25, 0.5]];
    let (mut m, mut v, mut want) = ([0.0; 2], [0.0; 2], [1.0, -2.0]);
    for (t, g) in gs.iter().enumerate() {
        let tape = Tape::new();
        let y = tape.mul(&w, &Tensor::new(g.to_vec(), &[2]).unwrap()).unwrap();
        tape.backward(&y, &Tensor::full(&[2], 1.0)).unwrap();
        opt.step(&mut [("w".into(), &mut w), ("frozen".into(), &mut frozen)], 0.1)
            .unwrap();
        w.zero_grad();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let (mh, vh) = (m[i] / (1.0 - 0.9f64.powi(t)), v[i] / (1.0 - 0.999f64.powi(t)));
            want[i] -= 0.1 * (mh / (vh.sqrt() + 1e-8) + 0.01 * want[i]);
        }
        for i in 0..2 {
            assert!((w.data()[i] - want[i]).abs() < 1e-14, "{:?} vs {want:?}", w.data());
        }
    }
    assert_eq!(frozen.data(), &[5.0]);
    assert_eq!(opt.steps(), 2);
}

#[test]
fn clipping_scale() {
    let a = Tensor::<f64>::parameter(vec![3.0], &[1]).unwrap();
    let b = Tensor::<f64>::parameter(vec![4.0], &[1]).unwrap();
    let tape = Tape::new();
    let y = tape.add(&tape.scale(&a, 3.0), &tape.scale(&b, 4.0)).unwrap();
    tape.backward(&y, &Tensor::full(&[1], 1.0)).unwrap();
    let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
    assert_eq!(clip_grad_norm(&params, 10.0).unwrap(), (5.0, 1.0));
    assert_eq!(a.grad().unwrap(), vec![3.0]);
    assert_eq!(clip_grad_norm(&params, 1.0).unwrap(), (5.0, 0.2));
    assert!((global_grad_norm(&params) - 1.0).abs() < 1e-15);
}

#[test]
fn schedule_endpoints() {
    let base = 1e-4;
    for e in 0..5 {
        assert!((lr_at(e, base, 5, 100) - base * (e + 1) as f64 / 5.0).abs() < 1e-20);
    }
    assert_eq!(lr_at(5, base, 5, 100), base);
    let last = lr_at(99, base, 5, 100);
    assert!(last > 0.0 && last < 1e-3 * base);
    for e in 5..99 {
        assert!(lr_at(e + 1, base, 5, 100) < lr_at(e, base, 5, 100));
    }
}

#[test]
fn early_stopping_patience() {
    let mut h = vec![0.5, 0.6, 0.7];
    h.extend(std::iter::repeat_n(0.69, 19));
    assert!(!early_stop(&h, 20));
    h.push(0.7); // ties do not count as improvement
    assert!(early_stop(&h, 20));
    let mut es = EarlyStopping::new(3);
    for (e, s) in [0.1, 0.2, 0.15, 0.3, 0.2, 0.2].into_iter().enumerate() {
        es.observe(e, s);
    }
    assert_eq!((es.best, es.best_epoch, es.stale), (Some(0.3), 3, 2));
    assert!(!es.should_stop());
}

#[test]
fn five_fold_split_of_twenty() {
    let mut all_val = Vec::new();
    for fold in 0..5 {
        let (tr, va) = cv_split(20, fold, 5, 42).unwrap();
        assert_eq!((tr.len(), va.len()), (16, 4));
        let mut u: Vec<usize> = tr.iter().chain(&va).copied().collect();
        u.sort();
        assert_eq!(u, (0..20).collect::<Vec<_>>());
        all_val.extend(va);
        assert_eq!(cv_split(20, fold, 5, 42).unwrap().0, tr);
    }
    all_val.sort();
    assert_eq!(all_val, (0..20).collect::<Vec<_>>());
    assert_ne!(cv_split(20, 0, 5, 42).unwrap().1, cv_split(20, 0, 5, 43).unwrap().1);
    assert!(cv_split(3, 0, 5, 0).is_err());
}

fn toy_model() -> Model<f64> {
    Model::new(&ModelConfig::toy(8, 4, 4, 2)).unwrap()
}

#[test]
fn two_pass_equals_single_tape() {
    let model = toy_model();
    let s = sphere_sample(8, 2.5);
    let loss = LossConfig::default();
    for cubes in [1, 8] {
        let p = Partition::from_cube_count([8; 3], cubes).unwrap();
        let la = two_pass_gradients(&model, &s, &p, &loss, &MemoryMeter::new()).unwrap();
        let ga = grads(&model);
        model.zero_grad();
        let lb = single_tape_gradients(&model, &s, &p, &loss, &MemoryMeter::new()).unwrap();
        let gb = grads(&model);
        model.zero_grad();
        assert_eq!(la, lb);
        assert!(rel_err(&ga, &gb) < 1e-12, "{cubes}: {}", rel_err(&ga, &gb));
    }
}

#[test]
fn one_cube_step_equals_plain_step() {
    let s = sphere_sample(8, 2.5);
    let loss = LossConfig::default();
    let (mut a, mut b) = (toy_model(), toy_model());
    let (mut oa, mut ob) = (AdamW::new(AdamWConfig::default()), AdamW::new(AdamWConfig::default()));
    let p = Partition::trivial([8; 3]);
    for _ in 0..2 {
        let ra = two_pass_step(&mut a, &mut oa, &s, &p, &loss, 1e-3, 1.0).unwrap();
        let rb = plain_step(&mut b, &mut ob, &s, &loss, 1e-3, 1.0).unwrap();
        assert_eq!(ra, rb);
    }
    for ((_, x), (_, y)) in a.parameters().iter().zip(b.parameters()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn suspended_forward_allocates_nothing() {
    let model = toy_model();
    let s = sphere_sample(8, 2.5);
    let meter = MemoryMeter::new();
    let tape = Tape::with_meter(meter.clone());
    tape.set_mode(Mode::Suspended);
    let ctx = CubeContext::whole("s", [8; 3]);
    let y0 = model.forward(&tape, &s.image, &ctx).unwrap();
    assert_eq!((meter.allocations(), meter.grad_allocations()), (0, 0));
    assert!(tape.is_empty());
    assert!(model.parameters().iter().all(|(_, p)| !p.has_grad()));

    tape.set_mode(Mode::Recording);
    let y1 = model.forward(&tape, &s.image, &ctx).unwrap();
    assert!(meter.allocations() > 0);
    assert_eq!(y0.data(), y1.data());
}

#[test]
fn pass_two_memory_is_bounded_by_the_cube() {
    let model = toy_model();
    let s = sphere_sample(16, 5.0);
    let loss = LossConfig::default();
    let peak = |cubes| {
        let m = MemoryMeter::new();
        two_pass_gradients(
            &model,
            &s,
            &Partition::from_cube_count([16; 3], cubes).unwrap(),
            &loss,
            &m,
        )
        .unwrap();
        model.zero_grad();
        assert_eq!(m.live_bytes(), 0);
        m.peak_bytes()
    };
    let (one, eight) = (peak(1), peak(8));
    assert!(eight < one / 2, "{eight} vs {one}");
}

#[test]
fn aborted_step_leaves_parameters_and_clears_grads() {
    let mut model = toy_model();
    let before: Vec<Vec<f64>> = model.parameters().iter().map(|(_, p)| p.to_vec()).collect();
    let mut s = sphere_sample(8, 2.5);
    let mut img = s.image.to_vec();
    img[17] = f64::NAN;
    s.image = Tensor::new(img, s.image.shape()).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let r = two_pass_step(
        &mut model,
        &mut opt,
        &s,
        &Partition::trivial([8; 3]),
        &LossConfig::default(),
        1e-3,
        1.0,
    );
    assert!(matches!(r, Err(Error::NonFinite(_))));
    assert_eq!(opt.steps(), 0);
    for ((_, p), b) in model.parameters().iter().zip(&before) {
        assert_eq!(p.data(), &b[..]);
        assert!(!p.has_grad());
    }
}

#[test]
fn partition_must_match_volume() {
    let model = toy_model();
    let s = sphere_sample(8, 2.5);
    let p = Partition::trivial([4; 3]);
    assert!(two_pass_gradients(&model, &s, &p, &LossConfig::default(), &MemoryMeter::new()).is_err());
}

fn write_dataset(dir: &std::path::Path, n: usize) {
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::create_dir_all(dir.join("labels")).unwrap();
    for i in 0..n {
        let (img, lbl) = sphere(8, 2.0 + 0.5 * i as f64);
        let g = Geometry::ras([8; 3], [1.0; 3]);
        let id = format!("s{i}");
        let v = Volume::new(&id, g.clone(), img.iter().map(|&x| x as f32).collect()).unwrap();
        let l = LabelVolume::new(&id, g, lbl.iter().map(|&x| x as u8).collect()).unwrap();
        write_nifti(&v, &dir.join(format!("images/{id}.nii.gz"))).unwrap();
        write_label(&l, &dir.join(format!("labels/{id}.nii"))).unwrap();
    }
}

#[test]
fn short_training_run() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), 3);
    let subjects = load_dataset(&dir.path().join("data")).unwrap();
    assert_eq!(subjects.iter().map(|s| s.id()).collect::<Vec<_>>(), ["s0", "s1", "s2"]);

    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy(8, 4, 4, 2);
    cfg.preprocess.crop_extent = [8; 3];
    cfg.train.epochs = 3;
    cfg.train.warmup_epochs = 1;
    cfg.train.optimizer.lr = 3e-3;
    let mut events = Vec::new();
    let summary = train::<f32>(&cfg, &subjects, dir.path(), &mut |e| events.push(e.clone())).unwrap();
    assert_eq!(summary.epochs_run, 3);
    assert_eq!(summary.steps, 9);
    assert!(summary.checkpoint.exists());
    assert!(matches!(events[0], TrainEvent::Warning { .. }));
    assert!(matches!(events[1], TrainEvent::Split { .. }));
    let epochs = events.iter().filter(|e| matches!(e, TrainEvent::Epoch { .. })).count();
    assert_eq!(epochs, 3);

    let mut m = Model::<f32>::new(&cfg.model).unwrap();
    m.load(&summary.checkpoint).unwrap();
    let refs: Vec<&Subject> = subjects.iter().collect();
    let (report, masks) = evaluate(&m, &refs, |e| cfg.partition(e), &cfg.label()).unwrap();
    assert_eq!(report.subjects.len(), 3);
    assert_eq!(masks[0].len(), 512);
    assert!((report.mean.dsc - summary.best_val_dsc).abs() < 1e-12);
}

#[test]
fn mismatched_dataset_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 1);
    std::fs::remove_file(dir.path().join("labels/s0.nii")).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}
