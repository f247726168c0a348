//! Acceptance suite: one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssnet::losses::{
    bce, dice, loss_terms, map_shadow_to_surface, map_surface_to_shadow, tcc_loss,
    MappingParams,
};
use ssnet::network::{Ctft, Model, NetworkConfig};
use ssnet::phantom::{generate_dataset, generate_sample, PhantomSpec};
use ssnet::phase_filters::{bse_raw, lp_product, FilterParams};
use ssnet::trainer::{
    evaluate, run_ablation, run_cascaded_baseline, split_by_subject, train, CascadeConfig, Checkpoint,
    TrainConfig, TrainOptions, Variant,
};
use ssnet::Mask;
use tch::{nn, Device, Kind, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1}s, limit {:.0}s", elapsed.as_secs_f64(), l.as_secs_f64())),
            (r, _) => r,
        };
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{id}] {name}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    }
}

fn scalar(t: &Tensor) -> f64 {
    t.double_value(&[])
}

fn grid_array(g: &Grid) -> Array2<f64> {
    to_array(g)
}

fn array_grid(a: &Array2<f64>) -> Grid {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn formula_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = FilterParams::default();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (h, w) = (rng.random_range(2..16), rng.random_range(2..16));
        let cm = random_grid(&mut rng, h, w, 0.0, 1.0);
        let usa = random_grid(&mut rng, h, w, 0.0, 1.0);
        let got = bse_raw(&grid_array(&cm), &grid_array(&usa), &params).map_err(err)?;
        let want = oracle_bse(&cm, &usa, params.rho, params.delta, params.epsilon);
        worst = worst.max(max_abs_diff(&array_grid(&got), &want));

        let (a, b, c) = (
            random_grid(&mut rng, h, w, 0.0, 1.0),
            random_grid(&mut rng, h, w, 0.0, 1.0),
            random_grid(&mut rng, h, w, 0.0, 1.0),
        );
        let got = lp_product(&grid_array(&a), &grid_array(&b), &grid_array(&c)).map_err(err)?;
        worst = worst.max(max_abs_diff(&array_grid(&got), &oracle_lp(&a, &b, &c)));

        let p = random_grid(&mut rng, h, w, 0.0, 1.0);
        let q = random_grid(&mut rng, h, w, 0.0, 1.0);
        let got = scalar(&bce(&to_tensor(&p), &to_tensor(&q)).map_err(err)?);
        worst = worst.max((got - oracle_bce(&p, &q)).abs());

        let ma = binary_grid(&mut rng, h, w, 0.4);
        let mb = binary_grid(&mut rng, h, w, 0.4);
        let m = |g: &Grid| Mask::from_shape_fn((h, w), |(y, x)| g[y][x] as u8);
        worst = worst.max((dice(&m(&ma), &m(&mb)).map_err(err)? - oracle_dice(&ma, &mb)).abs());
    }
    ensure(worst < 1e-6, format!("oracle deviation {worst:e}"))?;

    let one = |v: f64| Array2::from_elem((3, 3), v);
    let hand = FilterParams {
        rho: 0.1,
        delta: 1.0,
        epsilon: 0.01,
        ..FilterParams::default()
    };
    let bse = |cm: f64, usa: f64| bse_raw(&one(cm), &one(usa), &hand).map(|g| g[[1, 1]]);
    ensure(close(bse(0.8, 0.5).map_err(err)?, 1.5, 1e-12), "bse example 1.5")?;
    ensure(bse(0.1, 0.7).map_err(err)? == 0.1, "bse example rho")?;
    ensure(close(bse(0.11, 0.0).map_err(err)?, 1.1, 1e-12), "bse example 1.1")?;

    let t = |v: f64| Tensor::full([4, 4], v, (Kind::Double, Device::Cpu));
    let bin = Tensor::from_slice(&[0.0f64, 1.0, 1.0, 0.0]).view([2, 2]);
    ensure(scalar(&bce(&bin, &bin).map_err(err)?) < 2e-6, "bce perfect")?;
    let ln2 = std::f64::consts::LN_2;
    ensure(close(scalar(&bce(&t(1.0), &t(0.5)).map_err(err)?), ln2, 1e-12), "bce p=1")?;
    ensure(close(scalar(&bce(&t(0.5), &t(0.5)).map_err(err)?), ln2, 1e-12), "bce p=0.5")?;

    let a = Mask::from_shape_vec((2, 4), vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
    let b = Mask::from_shape_vec((2, 4), vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
    let c = Mask::from_shape_vec((2, 4), vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
    ensure(dice(&a, &a).map_err(err)? == 1.0, "dice identical")?;
    ensure(dice(&a, &c).map_err(err)? == 0.0, "dice disjoint")?;
    ensure(dice(&a, &b).map_err(err)? == 0.5, "dice overlap")?;

    let r = Array2::from_shape_fn((3, 3), |(y, x)| 0.1 * (y * 3 + x) as f64);
    ensure(lp_product(&r, &one(0.0), &r).map_err(err)?.iter().all(|&v| v == 0.0), "lp zero")?;
    ensure(lp_product(&one(1.0), &one(1.0), &one(1.0)).map_err(err)?.iter().all(|&v| v == 1.0), "lp ones")?;
    let direct = lp_product(&r, &r, &one(0.5)).map_err(err)?;
    ensure(direct.iter().zip(r.iter()).all(|(&d, &v)| d == v * v * 0.5), "lp product")?;
    Ok(format!("max oracle deviation {worst:.1e} over 50 inputs per op; 12 hand examples"))
}

fn mapping_oracle() -> Outcome {
    let spec = PhantomSpec::default();
    let params = MappingParams::new(spec.band_thickness as i64).map_err(err)?;
    let mut worst_tcc: f64 = 0.0;
    for seed in 0..100 {
        let s = generate_sample(&spec, seed).map_err(err)?;
        let y1 = to_tensor(&mask_to_grid(&s.y1));
        let y2 = to_tensor(&mask_to_grid(&s.y2));
        let f1 = from_tensor(&map_surface_to_shadow(&y1, &params).map_err(err)?);
        let f2 = from_tensor(&map_shadow_to_surface(&y2, &params).map_err(err)?);
        ensure(oracle_dice(&f1, &mask_to_grid(&s.y2)) == 1.0, format!("F1 seed {seed}"))?;
        ensure(oracle_dice(&f2, &mask_to_grid(&s.y1)) == 1.0, format!("F2 seed {seed}"))?;
        worst_tcc = worst_tcc.max(scalar(&tcc_loss(&y1, &y2, &y1, &y2, &params).map_err(err)?));
    }
    ensure(worst_tcc < 2e-6, format!("tcc at ground truth {worst_tcc:e}"))?;
    Ok(format!("100/100 exact round trips; max tcc at ground truth {worst_tcc:.1e}"))
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (eps, t) = (1e-4, 4usize);
    let params = MappingParams::new(t as i64).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let y1 = binary_grid(&mut rng, 8, 8, 0.25);
        let y2 = binary_grid(&mut rng, 8, 8, 0.5);
        let h1 = random_grid(&mut rng, 8, 8, 0.02, 0.98);
        let h2 = random_grid(&mut rng, 8, 8, 0.02, 0.98);

        let q = leaf(&h1);
        bce(&to_tensor(&y1), &q).map_err(err)?.backward();
        worst = worst.max(rel_err(&from_tensor(&q.grad()), &fd_gradient(|x| oracle_bce(&y1, x), &h1, eps)));

        let (a, b) = (leaf(&h1), leaf(&h2));
        tcc_loss(&to_tensor(&y1), &to_tensor(&y2), &a, &b, &params).map_err(err)?.backward();
        worst = worst.max(rel_err(
            &from_tensor(&a.grad()),
            &fd_gradient(|x| oracle_tcc(&y1, &y2, x, &h2, t), &h1, eps),
        ));
        worst = worst.max(rel_err(
            &from_tensor(&b.grad()),
            &fd_gradient(|x| oracle_tcc(&y1, &y2, &h1, x, t), &h2, eps),
        ));

        let (a, b) = (leaf(&h1), leaf(&h2));
        loss_terms(&to_tensor(&y1), &to_tensor(&y2), &a, &b, &params, true)
            .map_err(err)?
            .total
            .backward();
        worst = worst.max(rel_err(
            &from_tensor(&a.grad()),
            &fd_gradient(|x| oracle_total(&y1, &y2, x, &h2, t, true), &h1, eps),
        ));
        worst = worst.max(rel_err(
            &from_tensor(&b.grad()),
            &fd_gradient(|x| oracle_total(&y1, &y2, &h1, x, t, true), &h2, eps),
        ));
    }
    ensure(worst < 1e-3, format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e} over 20 instances x 5 gradients"))
}

fn perturb(model: &Model, prefix: &str) {
    tch::no_grad(|| {
        for (_, v) in model.variables_with_prefix(prefix) {
            let mut v = v.shallow_clone();
            v.copy_(&Tensor::randn_like(&v));
        }
    });
}

fn architecture_contract() -> Outcome {
    tch::manual_seed(4);
    let opts = (Kind::Float, Device::Cpu);
    let model = Model::new(&NetworkConfig::desk(), 4).map_err(err)?;
    for b in [1i64, 4, 8] {
        let p = model.predict(&Tensor::rand([b, 4, 224, 224], opts)).map_err(err)?;
        for y in [&p.y1_hat, &p.y2_hat] {
            ensure(y.size() == [b, 1, 224, 224], "output shape")?;
            ensure(y.min().double_value(&[]) > 0.0 && y.max().double_value(&[]) < 1.0, "open interval")?;
        }
    }
    for cfg in [NetworkConfig::default(), NetworkConfig::desk()] {
        let m = Model::new(&cfg, 0).map_err(err)?;
        let pyr = tch::no_grad(|| m.net.encode(&Tensor::rand([1, 4, 224, 224], opts), false)).map_err(err)?;
        ensure(pyr.resolutions() == ([112, 56, 28, 14], [14, 7, 4]), "pyramid resolutions")?;
    }

    let vs = nn::VarStore::new(Device::Cpu);
    let ctft = Ctft::new(&vs.root(), 16, 4);
    let f_shadow = Tensor::randn([2, 16, 7, 7], opts);
    let (_, out_shadow) = ctft.forward(&Tensor::zeros([2, 16, 7, 7], opts), &f_shadow, true).map_err(err)?;
    ensure(out_shadow.equal(&f_shadow), "CTFT zero-input passthrough")?;
    let f_surface = Tensor::randn([2, 16, 7, 7], opts);
    let (s, sh) = ctft.forward(&f_surface, &f_shadow, false).map_err(err)?;
    ensure(s.equal(&f_surface) && sh.equal(&f_shadow), "CTFT disabled passthrough")?;

    let x = Tensor::rand([2, 4, 224, 224], opts);
    let m = Model::new(&NetworkConfig::desk().with_ablation(false, true), 5).map_err(err)?;
    let before = m.predict(&x).map_err(err)?;
    perturb(&m, "shadow.");
    let mid = m.predict(&x).map_err(err)?;
    ensure(before.y1_hat.equal(&mid.y1_hat), "surface depends on shadow decoder without CTFT")?;
    perturb(&m, "surface.");
    let after = m.predict(&x).map_err(err)?;
    ensure(mid.y2_hat.equal(&after.y2_hat), "shadow depends on surface decoder without CTFT")?;
    Ok("shapes, (0,1) range, 112/56/28/14 + 14/7/4 pyramid, exact passthroughs, decoupled heads".into())
}

fn cross_task_gradient() -> Outcome {
    let opts = (Kind::Float, Device::Cpu);
    let model = Model::new(&NetworkConfig::desk(), 6).map_err(err)?;
    let mut mags = Vec::new();
    for trial in 0..5 {
        tch::manual_seed(200 + trial);
        model.vs.trainable_variables().iter().for_each(|v| {
            let mut g = v.grad();
            if g.defined() {
                let _ = g.zero_();
            }
        });
        let x = Tensor::rand([1, 4, 224, 224], opts);
        let y = Tensor::rand([1, 1, 224, 224], opts).ge(0.5).to_kind(Kind::Float);
        let p = model.forward(&x, true).map_err(err)?;
        bce(&y, &p.y1_hat).map_err(err)?.backward();
        let g: f64 = model
            .variables_with_prefix("shadow.blocks.1")
            .iter()
            .map(|(_, v)| v.grad().abs().sum(Kind::Double).double_value(&[]))
            .sum();
        ensure(g > 0.0, format!("trial {trial}: zero gradient"))?;
        mags.push(format!("{g:.2e}"));
    }
    Ok(format!("|grad| into shadow decoder block 1 per trial: {}", mags.join(", ")))
}

fn desk_training(workdir: &std::path::Path) -> Outcome {
    let data = phantom_dataset(320, 0);
    let split = split_by_subject(&data.groups, 0.8, 0).map_err(err)?;
    ensure(split.train.len() == 256 && split.test.len() == 64, "256/64 split")?;
    let train_set = data.subset(&split.train).map_err(err)?;
    let test_set = data.subset(&split.test).map_err(err)?;
    let cfg = TrainConfig {
        phase1_steps: 600,
        phase2_steps: 200,
        ..TrainConfig::desk()
    };
    let dir = workdir.join("desk");
    let run = train(
        &cfg,
        &train_set,
        &TrainOptions {
            out_dir: Some(dir.clone()),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let report = evaluate(&run.checkpoint, &test_set, 1).map_err(err)?;
    let (s, sh) = (report.dice_surface.mean, report.dice_shadow.mean);
    let detail = format!(
        "{} steps in {:.0}s; test dice surface {s:.4}, shadow {sh:.4}",
        cfg.total_steps(),
        run.wall_seconds
    );
    ensure(s >= 0.85 && sh >= 0.92 && sh > s, detail.clone())?;

    // Error compounding in the cascaded baseline, on the same model and split.
    let cascade = run_cascaded_baseline(
        &CascadeConfig {
            steps: 150,
            ..CascadeConfig::default()
        },
        &dir,
        &train_set,
        &test_set,
        Some(&workdir.join("cascade")),
    )
    .map_err(err)?;
    println!(
        "      cascade: gt-fed shadow dice {:.4} vs composed {:.4}",
        cascade.gt_fed_dice_shadow, cascade.report.dice_shadow.mean
    );
    ensure(
        cascade.gt_fed_dice_shadow >= cascade.report.dice_shadow.mean,
        format!("{detail}; cascade ordering violated"),
    )?;
    Ok(detail)
}

fn ablation_harness(workdir: &std::path::Path) -> Outcome {
    let data = phantom_dataset(48, 1);
    let split = split_by_subject(&data.groups, 0.67, 1).map_err(err)?;
    let base = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        phase1_steps: 15,
        phase2_steps: 10,
        ..TrainConfig::desk()
    };
    let dir = workdir.join("ablation");
    let table = run_ablation(&base, &data, &split, &Variant::ALL, &[0, 1, 2], &dir).map_err(err)?;
    ensure(table.rows.len() == 5, "five variant rows")?;
    ensure(table.rows.iter().all(|r| r.runs.len() == 3), "three seeds per row")?;
    let mut manifests: Vec<_> = table.rows.iter().flat_map(|r| &r.runs).map(|r| r.manifest.clone()).collect();
    ensure(manifests.iter().all(|m| m.is_file()), "manifest files")?;
    manifests.sort();
    manifests.dedup();
    ensure(manifests.len() == 15, "disjoint manifests")?;
    for run in table.rows.iter().flat_map(|r| &r.runs) {
        let ck = Checkpoint::load(run.manifest.parent().unwrap()).map_err(err)?;
        ensure(ck.manifest.dataset_hash == table.dataset_hash, "dataset hash in manifest")?;
    }
    ensure(table.shares_dataset_hash(), "shared dataset hash")?;
    let rendered = table.render();
    ensure(Variant::ALL.iter().all(|v| rendered.contains(v.label())), "rendered rows")?;
    for line in rendered.lines() {
        println!("      {line}");
    }
    Ok("5 variants x 3 seeds, 15 disjoint manifests, one dataset hash".into())
}

fn determinism(workdir: &std::path::Path) -> Outcome {
    let spec = PhantomSpec {
        seed: 21,
        ..PhantomSpec::default()
    };
    let a = generate_dataset(&spec, 6, &workdir.join("synth_a")).map_err(err)?;
    let b = generate_dataset(&spec, 6, &workdir.join("synth_b")).map_err(err)?;
    ensure(a.content_hash == b.content_hash, "dataset hashes differ")?;

    let data = phantom_dataset(16, 2);
    let cfg = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-3,
        phase1_steps: 10,
        phase2_steps: 5,
        ..TrainConfig::desk()
    };
    let dir = workdir.join("roundtrip");
    let run = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(dir.clone()),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let before = evaluate(&run.checkpoint, &data, 1).map_err(err)?;
    let after = evaluate(&Checkpoint::load(&dir).map_err(err)?, &data, 1).map_err(err)?;
    let d = (before.dice_surface.mean - after.dice_surface.mean)
        .abs()
        .max((before.dice_shadow.mean - after.dice_shadow.mean).abs());
    ensure(d < 1e-6, format!("round trip changed dice by {d:e}"))?;
    let masks = |r: &ssnet::EvalReport| r.samples.iter().map(|s| (s.dice_surface, s.dice_shadow)).collect::<Vec<_>>();
    ensure(masks(&before) == masks(&after), "per-sample dice changed")?;
    Ok(format!("manifest hash {}…; round-trip dice change {d:.1e}", &a.content_hash[..12]))
}

fn main() {
    let workdir = tempfile::tempdir().expect("temp dir");
    let mut suite = Suite { failures: 0 };
    let secs = Duration::from_secs;
    suite.run("1", "formula fidelity", Some(secs(10)), formula_fidelity);
    suite.run("2", "mapping oracle", Some(secs(30)), mapping_oracle);
    suite.run("3", "gradient correctness", Some(secs(60)), gradient_check);
    suite.run("4", "architecture contract", Some(secs(60)), architecture_contract);
    suite.run("5", "cross-task gradient flow", None, cross_task_gradient);
    suite.run("7", "ablation harness", None, || ablation_harness(workdir.path()));
    suite.run("8", "determinism and persistence", None, || determinism(workdir.path()));
    suite.run("6", "desk-scale training", Some(secs(30 * 60)), || desk_training(workdir.path()));
    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
}
